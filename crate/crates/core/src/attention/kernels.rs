//! Batched attention kernels over `[N, L, d]` token tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::tensor::{gemm, Tensor};

/// Gaussian projection directions `[d, m]` for the positive random feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatures {
    directions: Tensor,
}

impl RandomFeatures {
    pub fn draw(dim: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RandomFeatures { directions: Tensor::randn(&[dim, count], &mut rng) }
    }

    pub fn from_tensor(directions: Tensor) -> Result<Self> {
        ensure!(directions.ndim() == 2, "random features must be [d, m], got {:?}", directions.shape());
        Ok(RandomFeatures { directions })
    }

    pub fn dim(&self) -> usize {
        self.directions.dim(0)
    }

    pub fn count(&self) -> usize {
        self.directions.dim(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.directions
    }
}

pub(crate) fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    ensure!(
        q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3,
        "attention expects [N, L, d] operands, got {:?}, {:?}, {:?}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    let (n, lq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let (lk, dv) = (k.dim(1), v.dim(2));
    ensure!(
        k.dim(0) == n && v.dim(0) == n && k.dim(2) == d && v.dim(1) == lk,
        "attention shape mismatch: Q {:?}, K {:?}, V {:?}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    ensure!(lk > 0 && d > 0, "attention needs at least one key and d >= 1");
    Ok((n, lq, lk, d, dv))
}

/// `softmax(Q Kᵀ / √d) V`; also returns the attention weights `[N, Lq, Lk]`.
pub(crate) fn softmax_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, lq, lk, d, dv) = check_qkv(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = Tensor::zeros(&[n, lq, lk]);
    exec::for_each_chunk(probs.data_mut(), lq * lk, |b, p| {
        let qb = &q.data()[b * lq * d..(b + 1) * lq * d];
        let kb = &k.data()[b * lk * d..(b + 1) * lk * d];
        gemm(lq, d, lk, scale, qb, false, kb, true, 0.0, p);
        for row in p.chunks_mut(lk) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
    });
    let mut out = Tensor::zeros(&[n, lq, dv]);
    exec::for_each_chunk(out.data_mut(), lq * dv, |b, o| {
        let p = &probs.data()[b * lq * lk..(b + 1) * lq * lk];
        let vb = &v.data()[b * lk * dv..(b + 1) * lk * dv];
        gemm(lq, lk, dv, 1.0, p, false, vb, false, 0.0, o);
    });
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn softmax_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, lq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let (lk, dv) = (k.dim(1), v.dim(2));
    let scale = 1.0 / (d as f64).sqrt();
    let parts = exec::map_indexed(n, |b| {
        let qb = &q.data()[b * lq * d..(b + 1) * lq * d];
        let kb = &k.data()[b * lk * d..(b + 1) * lk * d];
        let vb = &v.data()[b * lk * dv..(b + 1) * lk * dv];
        let p = &probs.data()[b * lq * lk..(b + 1) * lq * lk];
        let g = &d_out.data()[b * lq * dv..(b + 1) * lq * dv];
        let mut dp = vec![0.0; lq * lk];
        gemm(lq, dv, lk, 1.0, g, false, vb, true, 0.0, &mut dp);
        let mut dvb = vec![0.0; lk * dv];
        gemm(lk, lq, dv, 1.0, p, true, g, false, 0.0, &mut dvb);
        for r in 0..lq {
            let pr = &p[r * lk..(r + 1) * lk];
            let dr = &mut dp[r * lk..(r + 1) * lk];
            let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, &pi) in dr.iter_mut().zip(pr) {
                *x = pi * (*x - inner);
            }
        }
        let mut dqb = vec![0.0; lq * d];
        gemm(lq, lk, d, scale, &dp, false, kb, false, 0.0, &mut dqb);
        let mut dkb = vec![0.0; lk * d];
        gemm(lk, lq, d, scale, &dp, true, qb, false, 0.0, &mut dkb);
        (dqb, dkb, dvb)
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(k.len());
    let mut dvv = Vec::with_capacity(v.len());
    for (a, b, c) in parts {
        dq.extend(a);
        dk.extend(b);
        dvv.extend(c);
    }
    (
        Tensor::new(q.shape(), dq).expect("shape"),
        Tensor::new(k.shape(), dk).expect("shape"),
        Tensor::new(v.shape(), dvv).expect("shape"),
    )
}

/// Intermediate values of a fast-attention forward pass.
#[derive(Debug, Clone)]
pub(crate) struct FastCache {
    phi_q: Vec<f64>,
    phi_k: Vec<f64>,
    kv: Vec<f64>,
    k_sum: Vec<f64>,
    den: Vec<f64>,
}

/// Positive random feature map of the rows of `x` (`[L, d]`):
/// `exp(w_iᵀx' − ‖x'‖²/2 − c) / √m` with `x' = x · d^(−1/4)`. The stabilizer
/// `c` is the row maximum (`per_row`) or the global maximum; it cancels in the
/// attention ratio.
fn feature_map(x: &[f64], rows: usize, feats: &RandomFeatures, per_row: bool) -> Vec<f64> {
    let (d, m) = (feats.dim(), feats.count());
    let s = (d as f64).powf(-0.25);
    let mut phi = vec![0.0; rows * m];
    gemm(rows, d, m, s, x, false, feats.tensor().data(), false, 0.0, &mut phi);
    for r in 0..rows {
        let half_sq = 0.5 * s * s * x[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>();
        phi[r * m..(r + 1) * m].iter_mut().for_each(|p| *p -= half_sq);
    }
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    if per_row {
        for row in phi.chunks_mut(m) {
            let c = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|p| *p = (*p - c).exp() * inv_sqrt_m);
        }
    } else {
        let c = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        phi.iter_mut().for_each(|p| *p = (*p - c).exp() * inv_sqrt_m);
    }
    phi
}

/// Backward through [`feature_map`] given `dphi`; returns `dx`.
fn feature_map_backward(x: &[f64], rows: usize, phi: &[f64], dphi: &[f64], feats: &RandomFeatures) -> Vec<f64> {
    let (d, m) = (feats.dim(), feats.count());
    let s = (d as f64).powf(-0.25);
    let dexpo: Vec<f64> = phi.iter().zip(dphi).map(|(p, g)| p * g).collect();
    // dx = s * (dexpo Wᵀ − rowsum(dexpo) · x')
    let mut dx = vec![0.0; rows * d];
    gemm(rows, m, d, s, &dexpo, false, feats.tensor().data(), true, 0.0, &mut dx);
    for r in 0..rows {
        let total: f64 = dexpo[r * m..(r + 1) * m].iter().sum();
        for c in 0..d {
            dx[r * d + c] -= total * s * s * x[r * d + c];
        }
    }
    dx
}

/// Linear-cost approximation of softmax attention:
/// `diag(φ(Q)(φ(K)ᵀ1))⁻¹ φ(Q)(φ(K)ᵀV)`.
pub(crate) fn fast_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    feats: &RandomFeatures,
) -> Result<(Tensor, Vec<FastCache>)> {
    let (n, lq, lk, d, dv) = check_qkv(q, k, v)?;
    ensure!(
        feats.dim() == d,
        "random features have dimension {} but queries have d = {d}",
        feats.dim()
    );
    let m = feats.count();
    let results: Vec<Result<(Vec<f64>, FastCache)>> = exec::map_indexed(n, |b| {
        let qb = &q.data()[b * lq * d..(b + 1) * lq * d];
        let kb = &k.data()[b * lk * d..(b + 1) * lk * d];
        let vb = &v.data()[b * lk * dv..(b + 1) * lk * dv];
        let phi_q = feature_map(qb, lq, feats, true);
        let phi_k = feature_map(kb, lk, feats, false);
        let mut kv = vec![0.0; m * dv];
        gemm(m, lk, dv, 1.0, &phi_k, true, vb, false, 0.0, &mut kv);
        let mut k_sum = vec![0.0; m];
        for row in phi_k.chunks(m) {
            for (s, p) in k_sum.iter_mut().zip(row) {
                *s += p;
            }
        }
        let mut out = vec![0.0; lq * dv];
        gemm(lq, m, dv, 1.0, &phi_q, false, &kv, false, 0.0, &mut out);
        let mut den = vec![0.0; lq];
        for r in 0..lq {
            den[r] = phi_q[r * m..(r + 1) * m].iter().zip(&k_sum).map(|(a, b)| a * b).sum();
            if !(den[r] > 0.0 && den[r].is_finite()) {
                return Err(Error::Numeric(format!(
                    "fast attention normalizer degenerate ({}) at batch {b}, query row {r}",
                    den[r]
                )));
            }
            out[r * dv..(r + 1) * dv].iter_mut().for_each(|o| *o /= den[r]);
        }
        Ok((out, FastCache { phi_q, phi_k, kv, k_sum, den }))
    });
    let mut out = Vec::with_capacity(n * lq * dv);
    let mut caches = Vec::with_capacity(n);
    for r in results {
        let (o, c) = r?;
        out.extend(o);
        caches.push(c);
    }
    Ok((Tensor::new(&[n, lq, dv], out)?, caches))
}

/// Returns `(dq, dk, dv)`; random features are constants.
pub(crate) fn fast_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    feats: &RandomFeatures,
    caches: &[FastCache],
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, lq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let (lk, dv) = (k.dim(1), v.dim(2));
    let m = feats.count();
    let parts = exec::map_indexed(n, |b| {
        let c = &caches[b];
        let qb = &q.data()[b * lq * d..(b + 1) * lq * d];
        let kb = &k.data()[b * lk * d..(b + 1) * lk * d];
        let vb = &v.data()[b * lk * dv..(b + 1) * lk * dv];
        let ob = &out.data()[b * lq * dv..(b + 1) * lq * dv];
        let g = &d_out.data()[b * lq * dv..(b + 1) * lq * dv];
        let mut d_num = vec![0.0; lq * dv];
        let mut d_den = vec![0.0; lq];
        for r in 0..lq {
            let mut acc = 0.0;
            for j in 0..dv {
                d_num[r * dv + j] = g[r * dv + j] / c.den[r];
                acc += g[r * dv + j] * ob[r * dv + j];
            }
            d_den[r] = -acc / c.den[r];
        }
        // dφq = dnum · KVᵀ + dden ⊗ ksum
        let mut dphi_q = vec![0.0; lq * m];
        gemm(lq, dv, m, 1.0, &d_num, false, &c.kv, true, 0.0, &mut dphi_q);
        for r in 0..lq {
            for (x, s) in dphi_q[r * m..(r + 1) * m].iter_mut().zip(&c.k_sum) {
                *x += d_den[r] * s;
            }
        }
        let mut d_kv = vec![0.0; m * dv];
        gemm(m, lq, dv, 1.0, &c.phi_q, true, &d_num, false, 0.0, &mut d_kv);
        let mut d_ksum = vec![0.0; m];
        gemm(m, lq, 1, 1.0, &c.phi_q, true, &d_den, false, 0.0, &mut d_ksum);
        // dφk = V · dKVᵀ + 1 ⊗ dksum
        let mut dphi_k = vec![0.0; lk * m];
        gemm(lk, dv, m, 1.0, vb, false, &d_kv, true, 0.0, &mut dphi_k);
        for row in dphi_k.chunks_mut(m) {
            for (x, s) in row.iter_mut().zip(&d_ksum) {
                *x += s;
            }
        }
        let mut dvb = vec![0.0; lk * dv];
        gemm(lk, m, dv, 1.0, &c.phi_k, false, &d_kv, false, 0.0, &mut dvb);
        let dqb = feature_map_backward(qb, lq, &c.phi_q, &dphi_q, feats);
        let dkb = feature_map_backward(kb, lk, &c.phi_k, &dphi_k, feats);
        (dqb, dkb, dvb)
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(k.len());
    let mut dvv = Vec::with_capacity(v.len());
    for (a, b2, c2) in parts {
        dq.extend(a);
        dk.extend(b2);
        dvv.extend(c2);
    }
    (
        Tensor::new(q.shape(), dq).expect("shape"),
        Tensor::new(k.shape(), dk).expect("shape"),
        Tensor::new(v.shape(), dvv).expect("shape"),
    )
}
