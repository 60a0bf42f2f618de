//! Per-channel normalization over `(N, T, I, V)` for `[N, C, ...]` tensors.

use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.1;

fn dims(x: &Tensor) -> (usize, usize, usize) {
    let n = x.dim(0);
    let c = x.dim(1);
    (n, c, x.len() / (n * c))
}

/// Batch statistics: per-channel mean and biased variance.
pub(crate) fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, r) = dims(x);
    let m = (n * r) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let block = &x.data()[(b * c + ch) * r..(b * c + ch + 1) * r];
            mean[ch] += block.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let block = &x.data()[(b * c + ch) * r..(b * c + ch + 1) * r];
            var[ch] += block.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`; returns `(y, x_hat)`.
pub(crate) fn normalize(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Tensor) {
    let (n, c, r) = dims(x);
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * r..(b * c + ch + 1) * r;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for idx in range {
                let h = (x.data()[idx] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[idx] = h;
                y.data_mut()[idx] = g * h + bt;
            }
        }
    }
    (y, xhat)
}

/// Backward through normalization. With `batch_stats` the statistics are
/// treated as functions of the input; otherwise they are constants.
/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn normalize_backward(
    d_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    batch_stats: bool,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, r) = dims(d_out);
    let m = (n * r) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * r..(b * c + ch + 1) * r;
            for idx in range {
                dbeta[ch] += d_out.data()[idx];
                dgamma[ch] += d_out.data()[idx] * xhat.data()[idx];
            }
        }
    }
    let mut dx = Tensor::zeros(d_out.shape());
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch];
            let range = (b * c + ch) * r..(b * c + ch + 1) * r;
            for idx in range {
                let g = d_out.data()[idx];
                dx.data_mut()[idx] = if batch_stats {
                    scale * (g - dbeta[ch] / m - xhat.data()[idx] * dgamma[ch] / m)
                } else {
                    scale * g
                };
            }
        }
    }
    (
        dx,
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}

pub(crate) fn inv_std(var: &[f64]) -> Vec<f64> {
    var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect()
}

/// Fold batch statistics into running statistics (unbiased variance).
pub fn update_running(
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    batch_mean: &[f64],
    batch_var: &[f64],
    count: usize,
) {
    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for (rm, bm) in running_mean.data_mut().iter_mut().zip(batch_mean) {
        *rm = (1.0 - RUNNING_MOMENTUM) * *rm + RUNNING_MOMENTUM * bm;
    }
    for (rv, bv) in running_var.data_mut().iter_mut().zip(batch_var) {
        *rv = (1.0 - RUNNING_MOMENTUM) * *rv + RUNNING_MOMENTUM * bv * unbias;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_normalized_output_is_standardized() {
        let x = Tensor::from_fn(&[3, 2, 4], |i| (i[0] * 7 + i[2] * 3) as f64 * if i[1] == 0 { 1.0 } else { -2.5 });
        let (mean, var) = batch_stats(&x);
        let (y, _) = normalize(&x, &mean, &inv_std(&var), &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]));
        let (m2, v2) = batch_stats(&y);
        for ch in 0..2 {
            assert!(m2[ch].abs() < 1e-12);
            assert!((v2[ch] - var[ch] / (var[ch] + NORM_EPS)).abs() < 1e-9);
        }
    }
}
