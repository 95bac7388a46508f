//! Fused attention operations for the ray renderer.
//!
//! Two flavours are needed: a grouped cross-attention where each of `M`
//! query rows attends over its own bucket of `N` candidate rows (one bucket
//! per ray sample, one candidate per source view, with a validity mask), and
//! a multi-head self-attention over the `M` samples of a ray.  Both store
//! their softmax matrices for the backward pass and also hand them to the
//! caller through [`AttentionStats`] so tests can audit normalisation.

use ndarray::{Array2, Array3, ArrayD, Ix2};

use super::{accumulate, BackFn, Tape, Var};

/// Softmax matrices recorded by an attention op, exposed for inspection.
#[derive(Debug, Clone)]
pub struct AttentionStats {
    /// Grouped cross-attention: `[M, N]` (masked entries are zero).
    /// Multi-head self-attention: `[heads, M, M]` flattened to dyn shape.
    pub probs: ArrayD<f64>,
}

impl Tape {
    /// Cross-attention of `M` query rows over per-query buckets of `N`
    /// candidates.  `q` is `[M, d]`; `k` and `v` are `[M * N, d]` with the
    /// bucket for query `m` in rows `m * N .. (m + 1) * N`; `valid[m][n]`
    /// masks candidates out of the softmax.  A query whose bucket is fully
    /// masked produces a zero row and propagates no gradient.
    pub fn grouped_cross_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        valid: &Array2<bool>,
    ) -> (Var, AttentionStats) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.ndim(), 2, "grouped attention: q must be 2-d");
        let (m, d) = (qv.shape()[0], qv.shape()[1]);
        let n = valid.shape()[1];
        assert_eq!(valid.shape()[0], m, "grouped attention: mask rows");
        assert_eq!(kv.shape(), &[m * n, d], "grouped attention: k shape");
        assert_eq!(vv.shape(), &[m * n, d], "grouped attention: v shape");
        assert!(d > 0, "grouped attention: zero feature width");
        let scale = 1.0 / (d as f64).sqrt();

        let q2 = qv.view().into_dimensionality::<Ix2>().unwrap();
        let k2 = kv.view().into_dimensionality::<Ix2>().unwrap();
        let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();

        let mut probs = Array2::<f64>::zeros((m, n));
        let mut out = Array2::<f64>::zeros((m, d));
        for mi in 0..m {
            let qr = q2.row(mi);
            let mut logits = vec![f64::NEG_INFINITY; n];
            let mut any = false;
            for ni in 0..n {
                if !valid[[mi, ni]] {
                    continue;
                }
                any = true;
                logits[ni] = scale * qr.dot(&k2.row(mi * n + ni));
            }
            if !any {
                continue;
            }
            let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ni in 0..n {
                if valid[[mi, ni]] {
                    let e = (logits[ni] - peak).exp();
                    probs[[mi, ni]] = e;
                    z += e;
                }
            }
            for ni in 0..n {
                if valid[[mi, ni]] {
                    probs[[mi, ni]] /= z;
                }
            }
            for ni in 0..n {
                let p = probs[[mi, ni]];
                if p == 0.0 {
                    continue;
                }
                let vr = v2.row(mi * n + ni);
                for di in 0..d {
                    out[[mi, di]] += p * vr[di];
                }
            }
        }
        let stats = AttentionStats {
            probs: probs.clone().into_dyn(),
        };
        let back: Option<BackFn> = if self.grad_enabled {
            let valid = valid.clone();
            Some(Box::new(move |tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let q2 = tape.value(q).view().into_dimensionality::<Ix2>().unwrap();
                let k2 = tape.value(k).view().into_dimensionality::<Ix2>().unwrap();
                let v2 = tape.value(v).view().into_dimensionality::<Ix2>().unwrap();
                let mut dq = Array2::<f64>::zeros((m, d));
                let mut dk = Array2::<f64>::zeros((m * n, d));
                let mut dv = Array2::<f64>::zeros((m * n, d));
                for mi in 0..m {
                    if (0..n).all(|ni| !valid[[mi, ni]]) {
                        continue;
                    }
                    let gr = g2.row(mi);
                    // dp_n = g . v_n ; dlogit = p * (dp - sum_j p_j dp_j)
                    let mut dp = vec![0.0f64; n];
                    let mut dot = 0.0;
                    for ni in 0..n {
                        if !valid[[mi, ni]] {
                            continue;
                        }
                        dp[ni] = gr.dot(&v2.row(mi * n + ni));
                        dot += probs[[mi, ni]] * dp[ni];
                    }
                    for ni in 0..n {
                        if !valid[[mi, ni]] {
                            continue;
                        }
                        let p = probs[[mi, ni]];
                        let dl = p * (dp[ni] - dot);
                        let kr = k2.row(mi * n + ni);
                        let qr = q2.row(mi);
                        for di in 0..d {
                            dq[[mi, di]] += scale * dl * kr[di];
                            dk[[mi * n + ni, di]] += scale * dl * qr[di];
                            dv[[mi * n + ni, di]] += p * gr[di];
                        }
                    }
                }
                accumulate(&mut grads[q.0], dq.into_dyn());
                accumulate(&mut grads[k.0], dk.into_dyn());
                accumulate(&mut grads[v.0], dv.into_dyn());
            }))
        } else {
            None
        };
        (self.push(out.into_dyn(), back), stats)
    }

    /// Multi-head scaled dot-product self-attention over `[M, d]` rows.
    /// `d` must be divisible by `heads`; each head attends over all `M`
    /// positions and the head outputs are re-concatenated.
    pub fn multi_head_self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) -> (Var, AttentionStats) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.ndim(), 2, "self-attention: q must be 2-d");
        let (m, d) = (qv.shape()[0], qv.shape()[1]);
        assert_eq!(kv.shape(), &[m, d], "self-attention: k shape");
        assert_eq!(vv.shape(), &[m, d], "self-attention: v shape");
        assert!(heads > 0 && d % heads == 0, "self-attention: {d} not divisible into {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q2 = qv.view().into_dimensionality::<Ix2>().unwrap();
        let k2 = kv.view().into_dimensionality::<Ix2>().unwrap();
        let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();

        let mut probs = Array3::<f64>::zeros((heads, m, m));
        let mut out = Array2::<f64>::zeros((m, d));
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let qh = q2.slice(ndarray::s![.., lo..hi]);
            let kh = k2.slice(ndarray::s![.., lo..hi]);
            let vh = v2.slice(ndarray::s![.., lo..hi]);
            let logits = qh.dot(&kh.t()) * scale;
            for mi in 0..m {
                let row = logits.row(mi);
                let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for mj in 0..m {
                    let e = (row[mj] - peak).exp();
                    probs[[h, mi, mj]] = e;
                    z += e;
                }
                for mj in 0..m {
                    probs[[h, mi, mj]] /= z;
                }
            }
            let ph = probs.index_axis(ndarray::Axis(0), h);
            let oh = ph.dot(&vh);
            out.slice_mut(ndarray::s![.., lo..hi]).assign(&oh);
        }
        let stats = AttentionStats {
            probs: probs.clone().into_dyn(),
        };
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let q2 = tape.value(q).view().into_dimensionality::<Ix2>().unwrap();
                let k2 = tape.value(k).view().into_dimensionality::<Ix2>().unwrap();
                let v2 = tape.value(v).view().into_dimensionality::<Ix2>().unwrap();
                let mut dq = Array2::<f64>::zeros((m, d));
                let mut dk = Array2::<f64>::zeros((m, d));
                let mut dv = Array2::<f64>::zeros((m, d));
                for h in 0..heads {
                    let lo = h * dh;
                    let hi = lo + dh;
                    let qh = q2.slice(ndarray::s![.., lo..hi]);
                    let kh = k2.slice(ndarray::s![.., lo..hi]);
                    let vh = v2.slice(ndarray::s![.., lo..hi]);
                    let gh = g2.slice(ndarray::s![.., lo..hi]);
                    let ph = probs.index_axis(ndarray::Axis(0), h);
                    // dV = P^T g ; dP = g V^T ; dS = P o (dP - rowsum(dP o P))
                    let dvh = ph.t().dot(&gh);
                    let dp = gh.dot(&vh.t());
                    let mut ds = Array2::<f64>::zeros((m, m));
                    for mi in 0..m {
                        let mut dot = 0.0;
                        for mj in 0..m {
                            dot += dp[[mi, mj]] * ph[[mi, mj]];
                        }
                        for mj in 0..m {
                            ds[[mi, mj]] = ph[[mi, mj]] * (dp[[mi, mj]] - dot);
                        }
                    }
                    let dqh = ds.dot(&kh) * scale;
                    let dkh = ds.t().dot(&qh) * scale;
                    dq.slice_mut(ndarray::s![.., lo..hi]).assign(&dqh);
                    dk.slice_mut(ndarray::s![.., lo..hi]).assign(&dkh);
                    dv.slice_mut(ndarray::s![.., lo..hi]).assign(&dvh);
                }
                accumulate(&mut grads[q.0], dq.into_dyn());
                accumulate(&mut grads[k.0], dk.into_dyn());
                accumulate(&mut grads[v.0], dv.into_dyn());
            }))
        } else {
            None
        };
        (self.push(out.into_dyn(), back), stats)
    }

    /// Mean over each query's valid bucket rows: `feats` is `[M * N, d]`
    /// bucketed like [`Tape::grouped_cross_attention`], output `[M, d]`.
    /// Fully-masked buckets produce zero rows.
    pub fn masked_group_mean(&mut self, feats: Var, valid: &Array2<bool>) -> Var {
        let fv = self.value(feats);
        assert_eq!(fv.ndim(), 2, "masked_group_mean: input must be 2-d");
        let (m, n) = (valid.shape()[0], valid.shape()[1]);
        let d = fv.shape()[1];
        assert_eq!(fv.shape()[0], m * n, "masked_group_mean: row count");
        let f2 = fv.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f64>::zeros((m, d));
        let mut counts = vec![0usize; m];
        for mi in 0..m {
            for ni in 0..n {
                if valid[[mi, ni]] {
                    counts[mi] += 1;
                    let fr = f2.row(mi * n + ni);
                    for di in 0..d {
                        out[[mi, di]] += fr[di];
                    }
                }
            }
            if counts[mi] > 0 {
                let inv = 1.0 / counts[mi] as f64;
                for di in 0..d {
                    out[[mi, di]] *= inv;
                }
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            let valid = valid.clone();
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut df = Array2::<f64>::zeros((m * n, d));
                for mi in 0..m {
                    if counts[mi] == 0 {
                        continue;
                    }
                    let inv = 1.0 / counts[mi] as f64;
                    for ni in 0..n {
                        if !valid[[mi, ni]] {
                            continue;
                        }
                        for di in 0..d {
                            df[[mi * n + ni, di]] = g2[[mi, di]] * inv;
                        }
                    }
                }
                accumulate(&mut grads[feats.0], df.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), back)
    }
}
