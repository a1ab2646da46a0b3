//! Tensor operations: elementwise arithmetic with trailing-dimension
//! broadcasting, batched matmul, softmax family, reductions, and shape ops.
//! Every differentiable op records a backward closure on the graph.

use super::{GradMap, Tensor};
use crate::scalar::Scalar;

// ── broadcasting ─────────────────────────────────────────────────────

struct Bcast {
    out_shape: Vec<usize>,
    a_stride: Vec<usize>,
    b_stride: Vec<usize>,
}

/// Row-major strides padded to `nd` dims, 0 on broadcast (extent-1) dims.
fn effective_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut st = vec![0usize; nd];
    let off = nd - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        st[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    st
}

/// Right-aligned broadcast of two shapes; panics when incompatible.
fn broadcast(a: &[usize], b: &[usize], op: &str) -> Bcast {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i >= nd - a.len() { a[i - (nd - a.len())] } else { 1 };
        let db = if i >= nd - b.len() { b[i - (nd - b.len())] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "{op}: shapes {a:?} and {b:?} are not broadcast-compatible"
        );
        out[i] = da.max(db);
    }
    let a_stride = effective_strides(a, nd);
    let b_stride = effective_strides(b, nd);
    Bcast { out_shape: out, a_stride, b_stride }
}

/// Visit every output element of a broadcast as (out_idx, a_idx, b_idx).
fn for_each_pair(bc: &Bcast, mut f: impl FnMut(usize, usize, usize)) {
    let nd = bc.out_shape.len();
    let total: usize = bc.out_shape.iter().product();
    if total == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for out_idx in 0..total {
        f(out_idx, ia, ib);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ia += bc.a_stride[d];
            ib += bc.b_stride[d];
            if coords[d] < bc.out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= bc.a_stride[d] * bc.out_shape[d];
            ib -= bc.b_stride[d] * bc.out_shape[d];
        }
    }
}

// ── elementwise binary ───────────────────────────────────────────────

fn binary_ew<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: &'static str,
    fwd: fn(S, S) -> S,
    dfa: fn(S, S) -> S,
    dfb: fn(S, S) -> S,
) -> Tensor<S> {
    let same = a.shape() == b.shape();
    let (out, out_shape) = if same {
        let av = a.data();
        let bv = b.data();
        let out: Vec<S> = av.iter().zip(bv.iter()).map(|(&x, &y)| fwd(x, y)).collect();
        (out, a.shape().to_vec())
    } else {
        let bc = broadcast(a.shape(), b.shape(), op);
        let av = a.data();
        let bv = b.data();
        let mut out = vec![S::zero(); bc.out_shape.iter().product()];
        for_each_pair(&bc, |o, ia, ib| out[o] = fwd(av[ia], bv[ib]));
        (out, bc.out_shape)
    };

    let a_ref = a.node_ref();
    let b_ref = b.node_ref();
    let a_buf = a.buf();
    let b_buf = b.buf();
    let a_shape = a.shape().to_vec();
    let b_shape = b.shape().to_vec();
    let backward = Box::new(move |g: &[S], gm: &mut GradMap<S>| {
        let av = a_buf.borrow();
        let bv = b_buf.borrow();
        if same {
            gm.with_slot(a_ref, |slot| {
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * dfa(av[i], bv[i]);
                }
            });
            gm.with_slot(b_ref, |slot| {
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * dfb(av[i], bv[i]);
                }
            });
        } else {
            let bc = broadcast(&a_shape, &b_shape, op);
            gm.with_slot(a_ref, |slot| {
                for_each_pair(&bc, |o, ia, ib| {
                    slot[ia] = slot[ia] + g[o] * dfa(av[ia], bv[ib]);
                });
            });
            gm.with_slot(b_ref, |slot| {
                for_each_pair(&bc, |o, ia, ib| {
                    slot[ib] = slot[ib] + g[o] * dfb(av[ia], bv[ib]);
                });
            });
        }
    });
    Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], backward)
}

// ── elementwise unary ────────────────────────────────────────────────

fn unary_ew<S: Scalar>(x: &Tensor<S>, fwd: fn(S) -> S, dydx: fn(S, S) -> S) -> Tensor<S> {
    let out: Vec<S> = x.data().iter().map(|&v| fwd(v)).collect();
    let x_ref = x.node_ref();
    let x_buf = x.buf();
    let shape = x.shape().to_vec();
    let out_t = Tensor::from_op(
        out.clone(),
        shape,
        vec![x.clone()],
        Box::new(move |g: &[S], gm: &mut GradMap<S>| {
            let xv = x_buf.borrow();
            gm.with_slot(x_ref, |slot| {
                for i in 0..g.len() {
                    slot[i] = slot[i] + g[i] * dydx(xv[i], out[i]);
                }
            });
        }),
    );
    out_t
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        binary_ew(self, other, "add", |x, y| x + y, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        binary_ew(self, other, "sub", |x, y| x - y, |_, _| S::one(), |_, _| -S::one())
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        binary_ew(self, other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor<S>) -> Tensor<S> {
        binary_ew(
            self,
            other,
            "div",
            |x, y| x / y,
            |_, y| S::one() / y,
            |x, y| -x / (y * y),
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        unary_ew(self, |x| -x, |_, _| -S::one())
    }

    pub fn exp(&self) -> Tensor<S> {
        unary_ew(self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<S> {
        unary_ew(self, |x| x.ln(), |x, _| S::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<S> {
        unary_ew(self, |x| x.sqrt(), |_, y| S::from_f64(0.5) / y)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        unary_ew(self, stable_sigmoid, |_, y| y * (S::one() - y))
    }

    pub fn tanh(&self) -> Tensor<S> {
        unary_ew(self, |x| x.tanh(), |_, y| S::one() - y * y)
    }

    /// GELU with the tanh approximation (smooth, exact derivative).
    pub fn gelu(&self) -> Tensor<S> {
        fn fwd<S: Scalar>(x: S) -> S {
            let k = S::from_f64(GELU_K);
            let c = S::from_f64(GELU_C);
            let half = S::from_f64(0.5);
            let inner = k * (x + c * x * x * x);
            half * x * (S::one() + inner.tanh())
        }
        fn dydx<S: Scalar>(x: S, _y: S) -> S {
            let k = S::from_f64(GELU_K);
            let c = S::from_f64(GELU_C);
            let half = S::from_f64(0.5);
            let three = S::from_f64(3.0);
            let inner = k * (x + c * x * x * x);
            let t = inner.tanh();
            half * (S::one() + t)
                + half * x * (S::one() - t * t) * k * (S::one() + three * c * x * x)
        }
        unary_ew(self, fwd, dydx)
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v + c).collect();
        let x_ref = self.node_ref();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, gm| gm.accumulate(x_ref, g)),
        )
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        let x_ref = self.node_ref();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, gm| {
                gm.with_slot(x_ref, |slot| {
                    for i in 0..g.len() {
                        slot[i] = slot[i] + g[i] * c;
                    }
                });
            }),
        )
    }

    /// Elementwise max(x, c). Gradient passes only where x > c.
    pub fn maximum_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| if v > c { v } else { c }).collect();
        let x_ref = self.node_ref();
        let x_buf = self.buf();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, gm| {
                let xv = x_buf.borrow();
                gm.with_slot(x_ref, |slot| {
                    for i in 0..g.len() {
                        if xv[i] > c {
                            slot[i] = slot[i] + g[i];
                        }
                    }
                });
            }),
        )
    }

    /// 0/1 indicator of x > c (strict). The result is a constant: no
    /// gradient flows through a comparison.
    pub fn gt_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| if v > c { S::one() } else { S::zero() })
            .collect();
        Tensor::from_vec(out, self.shape())
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Batched matrix product: `[.., m, k] x [.., k, n] -> [.., m, n]`,
    /// leading batch dimensions broadcast.
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        assert!(
            a_shape.len() >= 2 && b_shape.len() >= 2,
            "matmul requires rank >= 2, got {a_shape:?} x {b_shape:?}"
        );
        let m = a_shape[a_shape.len() - 2];
        let k = a_shape[a_shape.len() - 1];
        let k2 = b_shape[b_shape.len() - 2];
        let n = b_shape[b_shape.len() - 1];
        assert_eq!(k, k2, "matmul inner extents differ: {a_shape:?} x {b_shape:?}");

        let bc = broadcast(
            &a_shape[..a_shape.len() - 2],
            &b_shape[..b_shape.len() - 2],
            "matmul batch dims",
        );
        let mut out_shape = bc.out_shape.clone();
        out_shape.push(m);
        out_shape.push(n);

        let batch: usize = bc.out_shape.iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        {
            let av = self.data();
            let bv = other.data();
            for_each_pair(&bc, |o, ia, ib| {
                gemm_nn(
                    &av[ia * m * k..ia * m * k + m * k],
                    &bv[ib * k * n..ib * k * n + k * n],
                    &mut out[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                );
            });
        }

        let a_ref = self.node_ref();
        let b_ref = other.node_ref();
        let a_buf = self.buf();
        let b_buf = other.buf();
        let backward = Box::new(move |g: &[S], gm: &mut GradMap<S>| {
            let av = a_buf.borrow();
            let bv = b_buf.borrow();
            let bc = broadcast(
                &a_shape[..a_shape.len() - 2],
                &b_shape[..b_shape.len() - 2],
                "matmul batch dims",
            );
            gm.with_slot(a_ref, |slot| {
                for_each_pair(&bc, |o, ia, ib| {
                    // dA = dC · B^T
                    gemm_nt(
                        &g[o * m * n..(o + 1) * m * n],
                        &bv[ib * k * n..ib * k * n + k * n],
                        &mut slot[ia * m * k..ia * m * k + m * k],
                        m,
                        n,
                        k,
                    );
                });
            });
            gm.with_slot(b_ref, |slot| {
                for_each_pair(&bc, |o, ia, ib| {
                    // dB = A^T · dC
                    gemm_tn(
                        &av[ia * m * k..ia * m * k + m * k],
                        &g[o * m * n..(o + 1) * m * n],
                        &mut slot[ib * k * n..ib * k * n + k * n],
                        m,
                        k,
                        n,
                    );
                });
            });
        });
        Tensor::from_op(out, out_shape, vec![self.clone(), other.clone()], backward)
    }

    // ── softmax family ───────────────────────────────────────────────

    /// Numerically stabilized softmax along `dim`.
    pub fn softmax(&self, dim: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(dim < shape.len(), "softmax dim {dim} out of range for {shape:?}");
        let len = shape[dim];
        let inner: usize = shape[dim + 1..].iter().product();
        let outer: usize = shape[..dim].iter().product();

        let mut out = vec![S::zero(); self.numel()];
        {
            let xv = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = xv[base];
                    for j in 1..len {
                        let v = xv[base + j * inner];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = S::zero();
                    for j in 0..len {
                        let e = (xv[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        sum = sum + e;
                    }
                    for j in 0..len {
                        out[base + j * inner] = out[base + j * inner] / sum;
                    }
                }
            }
        }

        let x_ref = self.node_ref();
        let y = out.clone();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                gm.with_slot(x_ref, |slot| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = S::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot = dot + g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                slot[idx] = slot[idx] + y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Stabilized log-softmax along `dim`.
    pub fn log_softmax(&self, dim: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(dim < shape.len(), "log_softmax dim {dim} out of range for {shape:?}");
        let len = shape[dim];
        let inner: usize = shape[dim + 1..].iter().product();
        let outer: usize = shape[..dim].iter().product();

        let mut out = vec![S::zero(); self.numel()];
        {
            let xv = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = xv[base];
                    for j in 1..len {
                        let v = xv[base + j * inner];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = S::zero();
                    for j in 0..len {
                        sum = sum + (xv[base + j * inner] - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    for j in 0..len {
                        out[base + j * inner] = xv[base + j * inner] - lse;
                    }
                }
            }
        }

        let x_ref = self.node_ref();
        let y = out.clone();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                gm.with_slot(x_ref, |slot| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut gsum = S::zero();
                            for j in 0..len {
                                gsum = gsum + g[base + j * inner];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                slot[idx] = slot[idx] + g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                });
            }),
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<S> {
        let s = self.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let x_ref = self.node_ref();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, gm| {
                gm.with_slot(x_ref, |slot| {
                    for v in slot.iter_mut() {
                        *v = *v + g[0];
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel();
        assert!(n > 0, "mean_all on empty tensor");
        self.sum_all().mul_scalar(S::one() / S::from_f64(n as f64))
    }

    /// Sum along one dimension. With `keepdim` the reduced extent becomes 1.
    pub fn sum_axis(&self, dim: usize, keepdim: bool) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(dim < shape.len(), "sum_axis dim {dim} out of range for {shape:?}");
        let len = shape[dim];
        let inner: usize = shape[dim + 1..].iter().product();
        let outer: usize = shape[..dim].iter().product();

        let mut out = vec![S::zero(); outer * inner];
        {
            let xv = self.data();
            for o in 0..outer {
                for j in 0..len {
                    let base = o * len * inner + j * inner;
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + xv[base + i];
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        if keepdim {
            out_shape[dim] = 1;
        } else {
            out_shape.remove(dim);
        }

        let x_ref = self.node_ref();
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                gm.with_slot(x_ref, |slot| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = o * len * inner + j * inner;
                            for i in 0..inner {
                                slot[base + i] = slot[base + i] + g[o * inner + i];
                            }
                        }
                    }
                });
            }),
        )
    }

    // ── shape ops ────────────────────────────────────────────────────

    /// Reinterpret the (row-major, contiguous) buffer under a new shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<S> {
        let n: usize = new_shape.iter().product();
        assert_eq!(n, self.numel(), "reshape {:?} -> {new_shape:?}", self.shape());
        let x_ref = self.node_ref();
        Tensor::view_op(
            self.buf(),
            new_shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, gm| gm.accumulate(x_ref, g)),
        )
    }

    /// Swap two dimensions (materializes a permuted copy).
    pub fn transpose(&self, d0: usize, d1: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(d0 < shape.len() && d1 < shape.len(), "transpose dims out of range");
        let (out, out_shape) = transpose_copy(&self.data(), &shape, d0, d1);
        let x_ref = self.node_ref();
        Tensor::from_op(
            out,
            out_shape.clone(),
            vec![self.clone()],
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                let (gt, _) = transpose_copy(g, &out_shape, d0, d1);
                gm.accumulate(x_ref, &gt);
            }),
        )
    }

    /// Slice `len` extents starting at `start` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(dim < shape.len(), "narrow dim {dim} out of range for {shape:?}");
        assert!(
            start + len <= shape[dim],
            "narrow [{start}, {start}+{len}) out of range for extent {}",
            shape[dim]
        );
        let inner: usize = shape[dim + 1..].iter().product();
        let outer: usize = shape[..dim].iter().product();
        let src_stride = shape[dim] * inner;
        let block = len * inner;

        let mut out = vec![S::zero(); outer * block];
        {
            let xv = self.data();
            for o in 0..outer {
                let src = o * src_stride + start * inner;
                out[o * block..(o + 1) * block].copy_from_slice(&xv[src..src + block]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;

        let x_ref = self.node_ref();
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                gm.with_slot(x_ref, |slot| {
                    for o in 0..outer {
                        let dst = o * src_stride + start * inner;
                        for i in 0..block {
                            slot[dst + i] = slot[dst + i] + g[o * block + i];
                        }
                    }
                });
            }),
        )
    }

    /// Concatenate tensors along `dim`; all other extents must agree.
    pub fn concat(parts: &[Tensor<S>], dim: usize) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let base_shape = parts[0].shape().to_vec();
        assert!(dim < base_shape.len(), "concat dim {dim} out of range");
        let mut total = 0usize;
        for p in parts {
            assert_eq!(p.shape().len(), base_shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in base_shape.iter().zip(p.shape()).enumerate() {
                assert!(d == dim || a == b, "concat shape mismatch at dim {d}");
            }
            total += p.shape()[dim];
        }
        let inner: usize = base_shape[dim + 1..].iter().product();
        let outer: usize = base_shape[..dim].iter().product();

        let mut out_shape = base_shape.clone();
        out_shape[dim] = total;
        let mut out = vec![S::zero(); outer * total * inner];
        let mut offset = 0usize;
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(parts.len());
        for p in parts {
            let plen = p.shape()[dim];
            let pv = p.data();
            let pblock = plen * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + pblock].copy_from_slice(&pv[o * pblock..(o + 1) * pblock]);
            }
            spans.push((offset, plen));
            offset += plen;
        }

        let refs: Vec<_> = parts.iter().map(|p| p.node_ref()).collect();
        Tensor::from_op(
            out,
            out_shape,
            parts.to_vec(),
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                for (r, &(off, plen)) in refs.iter().zip(&spans) {
                    let pblock = plen * inner;
                    gm.with_slot(*r, |slot| {
                        for o in 0..outer {
                            let src = o * total * inner + off * inner;
                            for i in 0..pblock {
                                slot[o * pblock + i] = slot[o * pblock + i] + g[src + i];
                            }
                        }
                    });
                }
            }),
        )
    }

    /// Gather rows of a `[rows, ...]` tensor by index (embedding lookup).
    /// Backward scatter-adds into the selected rows.
    pub fn index_select0(&self, indices: &[usize]) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(!shape.is_empty(), "index_select0 on scalar");
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product();
        for &i in indices {
            assert!(i < rows, "index {i} out of range for {rows} rows");
        }
        let mut out = vec![S::zero(); indices.len() * row_len];
        {
            let xv = self.data();
            for (o, &i) in indices.iter().enumerate() {
                out[o * row_len..(o + 1) * row_len]
                    .copy_from_slice(&xv[i * row_len..(i + 1) * row_len]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();

        let x_ref = self.node_ref();
        let idx = indices.to_vec();
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g: &[S], gm: &mut GradMap<S>| {
                gm.with_slot(x_ref, |slot| {
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..row_len {
                            slot[i * row_len + j] = slot[i * row_len + j] + g[o * row_len + j];
                        }
                    }
                });
            }),
        )
    }
}

fn transpose_copy<S: Scalar>(
    data: &[S],
    shape: &[usize],
    d0: usize,
    d1: usize,
) -> (Vec<S>, Vec<usize>) {
    let nd = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let total: usize = shape.iter().product();
    let mut out = vec![S::zero(); total];
    if total == 0 {
        return (out, out_shape);
    }

    // Row-major strides of the input, permuted to output dimension order.
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(d0, d1);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();

    let mut coords = vec![0usize; nd];
    let mut src = 0usize;
    for item in out.iter_mut().take(total) {
        *item = data[src];
        for d in (0..nd).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

// ── gemm kernels (row-major, accumulate into c) ──────────────────────

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], _m: usize, k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]^T
fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], _m: usize, n: usize, k: usize) {
    for (a_row, c_row) in a.chunks_exact(n).zip(c.chunks_exact_mut(k)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(n)) {
            let mut s = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s = s + x * y;
            }
            *cv = *cv + s;
        }
    }
}

/// c[k,n] += a[m,k]^T · g[m,n]
fn gemm_tn<S: Scalar>(a: &[S], g: &[S], c: &mut [S], _m: usize, k: usize, n: usize) {
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv = *cv + av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let a = Tensor::<f64>::from_f64_slice(&[1.0, 2.0], &[2]);
        let b = Tensor::<f64>::from_f64_slice(&[3.0, 4.0], &[2]);
        assert_eq!(a.add(&b).to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn log_exp_inverse_pair() {
        let x = Tensor::<f64>::from_f64_slice(&[0.5, -1.2], &[2]);
        let y = x.exp().ln();
        for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn product_rule() {
        let a = Tensor::<f64>::param(vec![2.0], &[1]);
        let b = Tensor::<f64>::from_vec(vec![3.0], &[1]);
        a.mul(&b).sum_all().backward();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::<f64>::from_f64_slice(
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        );
        let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        assert_eq!(eye.matmul(&x).to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Tensor::<f64>::from_f64_slice(&[1.0, 2.0], &[1, 2]);
        let b = Tensor::<f64>::from_f64_slice(&[3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&b).to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_batched_broadcast() {
        // [2,2,3] x [3,2] -> [2,2,2]; second operand broadcast over batch.
        let a = Tensor::<f64>::from_f64_slice(
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0, 0.0],
            &[2, 2, 3],
        );
        let b = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 9.0, 12.0, 2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::<f64>::from_f64_slice(&[0.0, 0.0, 0.0], &[3]);
        for v in x.softmax(0).to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = Tensor::<f64>::from_f64_slice(&[1000.0, 0.0], &[2]);
        let y = big.softmax(0).to_vec();
        assert!((y[0] - 1.0).abs() < 1e-6 && y[1] < 1e-6);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_f64_slice(&[0.3, -2.0, 1.7, 0.0, 5.0, -5.0], &[2, 3]);
        let y = x.softmax(1);
        let v = y.to_vec();
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(v[r * 3..(r + 1) * 3].iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn broadcast_add_bias() {
        let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::param(vec![10.0, 20.0], &[2]);
        let y = x.add(&b);
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        y.sum_all().backward();
        // bias gradient sums over the broadcast rows
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_mask_last_dim() {
        // [2,2,3] * [2,2,1]
        let x = Tensor::<f64>::ones(&[2, 2, 3]);
        let m = Tensor::<f64>::from_f64_slice(&[1.0, 0.0, 0.0, 1.0], &[2, 2, 1]);
        let y = x.mul(&m);
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn incompatible_broadcast_panics() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let _ = a.add(&b);
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = x.narrow(1, 0, 1);
        let right = x.narrow(1, 1, 2);
        assert_eq!(left.to_vec(), vec![1.0, 4.0]);
        assert_eq!(right.to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        let back = Tensor::concat(&[left, right], 1);
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn narrow_backward_scatters() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        x.narrow(1, 1, 1).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn transpose_swaps() {
        let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let t = x.transpose(0, 1);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn index_select_gathers_rows_and_scatters_grad() {
        let table = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let picked = table.index_select0(&[2, 0, 2]);
        assert_eq!(picked.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        picked.sum_all().backward();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_axis_keepdim() {
        let x = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let s = x.sum_axis(1, true);
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.to_vec(), vec![6.0, 15.0]);
        let s2 = x.sum_axis(0, false);
        assert_eq!(s2.shape(), &[3]);
        assert_eq!(s2.to_vec(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn maximum_scalar_clamps_and_gates_grad() {
        let x = Tensor::<f64>::param(vec![-1.0, 0.5, 2.0], &[3]);
        let y = x.maximum_scalar(0.0);
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 2.0]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn gt_scalar_is_constant() {
        let x = Tensor::<f64>::param(vec![0.2, 0.8], &[2]);
        let m = x.gt_scalar(0.5);
        assert_eq!(m.to_vec(), vec![0.0, 1.0]);
        assert!(!m.requires_grad());
    }
}
