//! End-to-end gradient flow through the noiser: the straight-through loss
//! must deliver finite, nonzero gradients to every scorer parameter group,
//! and the underlying soft sampling path (subset selection + Gumbel-Softmax
//! + encoder) must agree with central finite differences.

use rand::Rng as _;

use advmlm::data::{make_batch, Vocabulary};
use advmlm::gradcheck;
use advmlm::mlm::{masked_cross_entropy, run_encoder, Encoder, NoisingSource};
use advmlm::nn::{GruConfig, TransformerConfig};
use advmlm::noiser::Noiser;
use advmlm::rng::derive_rng;
use advmlm::sampling::{gumbel_noise, rss_sampler_with_noise, SamplerParams};
use advmlm::Tensor;

fn setup() -> (Vocabulary, advmlm::data::Batch, Noiser<f64>, Encoder<f64>) {
    let vocab = Vocabulary::amino();
    // a 2 x 12 batch (10 content tokens per row)
    let seqs = vec!["MKVLLACDEF".to_string(), "GHIKWWPQRS".to_string()];
    let (batch, _) = make_batch(&seqs, &vocab, 12);
    let mut nrng = derive_rng(701, &[1]);
    let noiser = Noiser::<f64>::new(
        &vocab,
        GruConfig { num_layers: 1, embed_dim: 6, hidden_dim: 5, bidirectional: true },
        &mut nrng,
    );
    let mut erng = derive_rng(701, &[2]);
    let encoder = Encoder::<f64>::new(
        &vocab,
        TransformerConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 12,
            max_seq_len: 12,
            dropout_rate: 0.0,
        },
        &mut erng,
    );
    // a zero-initialized head blocks gradients into the input; perturb it
    let mut hr = derive_rng(701, &[3]);
    let head: Vec<f64> = (0..encoder.head.weight.numel())
        .map(|_| hr.gen_range(-0.3..0.3))
        .collect();
    encoder.head.weight.set_data(head);
    (vocab, batch, noiser, encoder)
}

#[test]
fn straight_through_loss_gradient_reaches_all_noiser_params() {
    let (vocab, batch, noiser, encoder) = setup();
    let params = SamplerParams::new(0.2, 0.2, 702);
    for (_, p) in noiser.named_params() {
        p.zero_grad();
    }
    let run = run_encoder(
        NoisingSource::Adversarial { noiser: &noiser, params: &params, rho_rand: 0.1, track_noiser: true },
        &encoder,
        &batch,
        &vocab,
        702,
        0,
        false,
    );
    run.loss.backward();
    let mut nonzero_groups = 0usize;
    for (name, p) in noiser.named_params() {
        let g = p.grad().unwrap_or_else(|| panic!("no gradient reached {name}"));
        assert!(g.iter().all(|v| v.is_finite()), "non-finite gradient in {name}");
        if g.iter().any(|&v| v != 0.0) {
            nonzero_groups += 1;
        }
    }
    assert!(
        nonzero_groups >= noiser.named_params().len() - 2,
        "only {nonzero_groups} parameter groups received nonzero gradients"
    );
}

#[test]
fn soft_sampling_path_matches_finite_differences() {
    let (vocab, batch, noiser, encoder) = setup();
    let (b, s) = (batch.rows, batch.width);
    let v = vocab.size();
    let v_idx = vocab.v_idx() as usize;
    let mask_id = vocab.mask_id() as usize;
    let channels = 2 + vocab.content_size();
    let (rho, t) = (0.2f64, 0.5f64);

    // frozen noise so the loss is a deterministic function of theta
    let mut noise_rng = derive_rng(703, &[1]);
    let any_noise = gumbel_noise::<f64>(&[b, s], &mut noise_rng);
    let type_noise = gumbel_noise::<f64>(&[b, s, channels], &mut noise_rng);
    // fixed positions to score (the soft path has no hard mask set)
    let loss_mask: Vec<u8> = batch.valid.clone();

    let theta = noiser.named_params();
    let flat0: Vec<f64> = theta.iter().flat_map(|(_, p)| p.to_vec()).collect();

    let forward = || -> Tensor<f64> {
        let scores = noiser.scores(&batch);
        let valid_t = batch.valid_tensor::<f64>();
        let p_overall = rss_sampler_with_noise(&scores.any_mask, &valid_t, rho, t, &any_noise);
        let p_type = scores
            .mask_options
            .add(&type_noise)
            .mul_scalar(1.0 / t)
            .softmax(2);

        let x = batch.one_hot::<f64>(v);
        let p3 = p_overall.reshape(&[b, s, 1]);
        let mut onehot_mask = vec![0.0; v];
        onehot_mask[mask_id] = 1.0;
        let onehot_mask = Tensor::from_f64_slice(&onehot_mask, &[v]);
        let x_masked = p_type
            .narrow(2, 0, 1)
            .mul(&onehot_mask)
            .add(&p_type.narrow(2, 1, 1).mul(&x))
            .add(&Tensor::concat(
                &[Tensor::zeros(&[b, s, v_idx]), p_type.narrow(2, 2, channels - 2)],
                2,
            ));
        let x_soft = p3.neg().add_scalar(1.0).mul(&x).add(&p3.mul(&x_masked));
        let logits = encoder.forward_soft(&x_soft, &batch.valid, None);
        let (loss, _) = masked_cross_entropy(&logits, &batch.tokens, &loss_mask);
        loss
    };

    for (_, p) in &theta {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward();
    let autodiff: Vec<f64> = theta
        .iter()
        .flat_map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let write = |flat: &[f64]| {
        let mut off = 0;
        for (_, p) in &theta {
            let n = p.numel();
            p.set_data(flat[off..off + n].to_vec());
            off += n;
        }
    };
    let mut f = |flat: &[f64]| {
        write(flat);
        forward().item()
    };

    // 5 coordinates spread over the parameter vector, rtol 1e-2
    let mut pick_rng = derive_rng(703, &[2]);
    let mut coords: Vec<usize> = (0..5).map(|_| pick_rng.gen_range(0..flat0.len())).collect();
    coords.sort_unstable();
    coords.dedup();
    gradcheck::compare_grads(&mut f, &flat0, &autodiff, &coords, 1e-4, 1e-2)
        .unwrap_or_else(|e| panic!("soft sampling path: {e}"));
}
