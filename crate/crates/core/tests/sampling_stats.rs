//! Statistical behavior of the sampling stack against independent oracles:
//! brute-force top-k selection under shared noise, symmetry frequencies,
//! concentration at low temperature, and Concrete-distribution convergence.

use rand::Rng as _;

use advmlm::data::{make_batch, Vocabulary};
use advmlm::noiser::{noise_from_scores, MaskScores};
use advmlm::rng::derive_rng;
use advmlm::sampling::{gumbel_noise, gumbel_softmax, rss_sampler, rss_sampler_with_noise, SamplerParams};
use advmlm::Tensor;

#[test]
fn rss_hard_selection_matches_topk_oracle_under_shared_noise() {
    // k = 3 of seq 12 at t = 0.1; the sampler and the brute-force oracle
    // share the same frozen Gumbel perturbation.
    let mut rng = derive_rng(501, &[1]);
    let valid = Tensor::<f64>::ones(&[1, 12]);
    let mut matches = 0usize;
    let trials = 1000;
    for _ in 0..trials {
        let scores_v: Vec<f64> = (0..12).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let scores = Tensor::from_f64_slice(&scores_v, &[1, 12]);
        let noise = gumbel_noise::<f64>(&[1, 12], &mut rng);
        let y = rss_sampler_with_noise(&scores, &valid, 0.25, 0.1, &noise);

        // The sampler's hard subset: the k positions carrying the most mass.
        let yv = y.to_vec();
        let mut by_mass: Vec<(usize, f64)> = yv.iter().copied().enumerate().collect();
        by_mass.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut selected: Vec<usize> = by_mass[..3].iter().map(|(i, _)| *i).collect();
        selected.sort_unstable();

        let noise_v = noise.to_vec();
        let mut perturbed: Vec<(usize, f64)> = scores_v
            .iter()
            .zip(&noise_v)
            .map(|(&s, &g)| s + g)
            .enumerate()
            .collect();
        perturbed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut topk: Vec<usize> = perturbed[..3].iter().map(|(i, _)| *i).collect();
        topk.sort_unstable();

        if selected == topk {
            matches += 1;
        }
    }
    assert!(
        matches >= 950,
        "hard selection matched the top-k oracle in only {matches}/{trials} trials"
    );
}

#[test]
fn rss_uniform_scores_select_each_position_at_budget_rate() {
    // k/len = 2/10; every valid position should be selected equally often.
    let rows = 1000;
    let reps = 100;
    let mut counts = [0usize; 10];
    for rep in 0..reps {
        let mut rng = derive_rng(502, &[rep]);
        let scores = Tensor::<f64>::zeros(&[rows, 10]);
        let valid = Tensor::<f64>::ones(&[rows, 10]);
        let y = rss_sampler(&scores, &valid, 0.2, 0.1, &mut rng).to_vec();
        for r in 0..rows {
            for c in 0..10 {
                if y[r * 10 + c] > 0.5 {
                    counts[c] += 1;
                }
            }
        }
    }
    let total = (rows as u64 * reps) as f64;
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / total;
        assert!(
            (freq - 0.2).abs() < 0.02,
            "position {c} selected with frequency {freq}, expected 0.2"
        );
    }
}

#[test]
fn gumbel_softmax_concentrates_at_low_temperature() {
    // t = 0.01: the sample is effectively one-hot in >= 99% of draws.
    let mut rng = derive_rng(503, &[1]);
    let rows = 10_000;
    let base: Vec<f64> = vec![4.0, 0.0, -1.0, -2.0];
    let scores_v: Vec<f64> = (0..rows).flat_map(|_| base.clone()).collect();
    let scores = Tensor::from_f64_slice(&scores_v, &[rows, 4]);
    let y = gumbel_softmax(&scores, 0.01, &mut rng).to_vec();
    let concentrated = y
        .chunks_exact(4)
        .filter(|row| row.iter().cloned().fold(0.0, f64::max) > 0.99)
        .count();
    assert!(
        concentrated as f64 >= 0.99 * rows as f64,
        "only {concentrated}/{rows} samples were near one-hot at t=0.01"
    );
}

#[test]
fn gumbel_softmax_equal_scores_win_uniformly() {
    // chi-squared goodness of fit over 4 categories; dof 3, the 0.999
    // quantile is 16.266, so rejecting only above it keeps p > 0.001.
    let mut rng = derive_rng(504, &[1]);
    let rows = 100_000;
    let scores = Tensor::<f64>::zeros(&[rows, 4]);
    let y = gumbel_softmax(&scores, 1.0, &mut rng).to_vec();
    let mut counts = [0usize; 4];
    for row in y.chunks_exact(4) {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        counts[best] += 1;
    }
    let expected = rows as f64 / 4.0;
    let chi2: f64 = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    assert!(chi2 < 16.266, "chi-squared {chi2} rejects uniformity (counts {counts:?})");
}

#[test]
fn concrete_convergence_as_temperature_drops() {
    // mean |y_soft - hard(y_soft)| shrinks monotonically over t in
    // {2, 1, 0.5, 0.1} (averaged over seeds).
    let temps = [2.0, 1.0, 0.5, 0.1];
    let mut gaps = [0.0f64; 4];
    let seeds = 20u64;
    for seed in 0..seeds {
        let mut score_rng = derive_rng(505, &[seed]);
        let scores_v: Vec<f64> = (0..32 * 16).map(|_| score_rng.gen_range(-1.0..1.0)).collect();
        let scores = Tensor::from_f64_slice(&scores_v, &[32, 16]);
        let valid = Tensor::<f64>::ones(&[32, 16]);
        for (ti, &t) in temps.iter().enumerate() {
            let mut rng = derive_rng(506, &[seed, ti as u64]);
            let y = rss_sampler(&scores, &valid, 0.25, t, &mut rng).to_vec();
            let gap: f64 = y
                .iter()
                .map(|&v| {
                    let hard = if v > 0.5 { 1.0 } else { 0.0 };
                    (v - hard).abs()
                })
                .sum::<f64>()
                / y.len() as f64;
            gaps[ti] += gap / seeds as f64;
        }
    }
    for w in gaps.windows(2) {
        assert!(
            w[1] < w[0],
            "soft-hard gap did not shrink with temperature: {gaps:?}"
        );
    }
    assert!(
        gaps[3] < 0.5 * gaps[0],
        "gap at t=0.1 ({:.4}) is not well below the t=2 gap ({:.4})",
        gaps[3],
        gaps[0]
    );
}

#[test]
fn constant_scores_make_the_adversary_uniform() {
    // An untrained/constant-score noiser is indistinguishable from
    // uniform budgeted masking: per-position mask frequency ~ k/len.
    let vocab = Vocabulary::amino();
    let seqs: Vec<String> = (0..8).map(|_| "ACDEFGHIKL".to_string()).collect();
    let (batch, _) = make_batch(&seqs, &vocab, 12);
    let channels = 2 + vocab.content_size();
    let params = SamplerParams::new(0.2, 0.1, 77);

    let mut counts = vec![0usize; batch.width];
    let steps = 600u64;
    for step in 0..steps {
        let scores = MaskScores {
            any_mask: Tensor::<f64>::zeros(&[batch.rows, batch.width]),
            mask_options: Tensor::zeros(&[batch.rows, batch.width, channels]),
        };
        let out = noise_from_scores(&scores, &batch, vocab.size(), 1, 5, &params, step);
        for r in 0..batch.rows {
            let row = &out.loss_positions[r * batch.width..(r + 1) * batch.width];
            for (cnt, &m) in counts.iter_mut().zip(row) {
                *cnt += usize::from(m != 0);
            }
        }
    }
    let draws = (steps as usize * batch.rows) as f64;
    for (c, &count) in counts.iter().enumerate() {
        let freq = count as f64 / draws;
        if batch.is_valid(0, c) {
            assert!(
                (freq - 0.2).abs() < 0.02,
                "valid position {c} masked with frequency {freq}, expected 0.2"
            );
        } else {
            assert_eq!(count, 0, "invalid position {c} was masked");
        }
    }
}
