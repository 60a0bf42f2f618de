//! Spatial graph convolution and temporal convolution over feature maps laid
//! out as `[N, C, T, I, V]`.

use super::adjacency::AdjacencyStack;
use crate::error::{ensure, Result};
use crate::exec;
use crate::tensor::{gemm, Tensor};

fn check_feature_map(x: &Tensor, what: &str) -> Result<()> {
    ensure!(
        x.ndim() == 5,
        "{what}: expected a [N, C, T, I, V] feature map, got shape {:?}",
        x.shape()
    );
    Ok(())
}

/// `out = Σ_s (F ×_V A_s) ×_C W_s`, applied independently per (n, t, i).
pub fn spatial_graph_conv(x: &Tensor, adj: &AdjacencyStack, w: &Tensor) -> Result<Tensor> {
    Ok(graph_conv_forward(x, adj, w)?.0)
}

/// Forward pass; also returns the aggregated features `[N, S, C, T·I, V]`
/// needed by the backward pass.
pub(crate) fn graph_conv_forward(
    x: &Tensor,
    adj: &AdjacencyStack,
    w: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_feature_map(x, "spatial_graph_conv")?;
    let [n, c_in, t, i, v] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)];
    let s = adj.subsets();
    ensure!(
        adj.nodes() == v,
        "spatial_graph_conv: adjacency has {} nodes but features have V = {v}",
        adj.nodes()
    );
    ensure!(
        w.ndim() == 3 && w.dim(0) == s && w.dim(1) == c_in,
        "spatial_graph_conv: weights {:?} incompatible with S = {s}, C_in = {c_in}",
        w.shape()
    );
    let c_out = w.dim(2);
    let ti = t * i;
    let plane = c_in * ti * v;
    let mut agg = Tensor::zeros(&[n, s, c_in, ti, v]);
    exec::for_each_chunk(agg.data_mut(), s * plane, |b, y| {
        let xb = &x.data()[b * plane..(b + 1) * plane];
        for k in 0..s {
            gemm(
                c_in * ti,
                v,
                v,
                1.0,
                xb,
                false,
                adj.subset(k),
                true,
                0.0,
                &mut y[k * plane..(k + 1) * plane],
            );
        }
    });
    let mut out = Tensor::zeros(&[n, c_out, t, i, v]);
    exec::for_each_chunk(out.data_mut(), c_out * ti * v, |b, o| {
        let yb = &agg.data()[b * s * plane..(b + 1) * s * plane];
        gemm(c_out, s * c_in, ti * v, 1.0, w.data(), true, yb, false, 0.0, o);
    });
    Ok((out, agg))
}

/// Returns `(d_input, d_weights)`.
pub(crate) fn graph_conv_backward(
    x_shape: &[usize],
    adj: &AdjacencyStack,
    w: &Tensor,
    agg: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor) {
    let [n, c_in, t, i, v] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3], x_shape[4]];
    let s = adj.subsets();
    let c_out = w.dim(2);
    let tiv = t * i * v;
    let plane = c_in * tiv;
    let partials = exec::map_indexed(n, |b| {
        let yb = &agg.data()[b * s * plane..(b + 1) * s * plane];
        let gb = &d_out.data()[b * c_out * tiv..(b + 1) * c_out * tiv];
        let mut dw = vec![0.0; s * c_in * c_out];
        gemm(s * c_in, tiv, c_out, 1.0, yb, false, gb, true, 0.0, &mut dw);
        dw
    });
    let mut dw = Tensor::zeros(w.shape());
    for p in &partials {
        for (a, b) in dw.data_mut().iter_mut().zip(p) {
            *a += b;
        }
    }
    let mut dx = Tensor::zeros(x_shape);
    exec::for_each_chunk(dx.data_mut(), plane, |b, dxb| {
        let gb = &d_out.data()[b * c_out * tiv..(b + 1) * c_out * tiv];
        let mut dy = vec![0.0; s * plane];
        gemm(s * c_in, c_out, tiv, 1.0, w.data(), false, gb, false, 0.0, &mut dy);
        for k in 0..s {
            gemm(
                c_in * t * i,
                v,
                v,
                1.0,
                &dy[k * plane..(k + 1) * plane],
                false,
                adj.subset(k),
                false,
                1.0,
                dxb,
            );
        }
    });
    (dx, dw)
}

fn temporal_dims(x: &Tensor, k: &Tensor, stride: usize) -> Result<(usize, usize)> {
    check_feature_map(x, "temporal_conv")?;
    ensure!(
        k.ndim() == 3 && k.dim(1) == x.dim(1),
        "temporal_conv: kernel {:?} incompatible with {} input channels",
        k.shape(),
        x.dim(1)
    );
    let kt = k.dim(2);
    ensure!(kt % 2 == 1, "temporal_conv: kernel length {kt} must be odd");
    ensure!(stride == 1 || stride == 2, "temporal_conv: stride {stride} not in {{1, 2}}");
    let t_out = x.dim(2).div_ceil(stride);
    Ok((kt, t_out))
}

fn im2col(xb: &[f64], c_in: usize, t: usize, iv: usize, kt: usize, stride: usize, t_out: usize) -> Vec<f64> {
    let pad = (kt - 1) / 2;
    let cols = t_out * iv;
    let mut col = vec![0.0; c_in * kt * cols];
    for c in 0..c_in {
        for j in 0..kt {
            let row = &mut col[(c * kt + j) * cols..(c * kt + j + 1) * cols];
            for to in 0..t_out {
                let src = (to * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let src = src as usize;
                    row[to * iv..(to + 1) * iv]
                        .copy_from_slice(&xb[(c * t + src) * iv..(c * t + src + 1) * iv]);
                }
            }
        }
    }
    col
}

/// 1-D convolution along `T` with symmetric zero padding `(k_t - 1) / 2`, then
/// stride subsampling; `T' = ceil(T / stride)`. Kernel is `[C_out, C_in, k_t]`.
pub fn temporal_conv(x: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor> {
    let (kt, t_out) = temporal_dims(x, k, stride)?;
    let [n, c_in, t, i, v] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)];
    let c_out = k.dim(0);
    let iv = i * v;
    let mut out = Tensor::zeros(&[n, c_out, t_out, i, v]);
    exec::for_each_chunk(out.data_mut(), c_out * t_out * iv, |b, o| {
        let xb = &x.data()[b * c_in * t * iv..(b + 1) * c_in * t * iv];
        let col = im2col(xb, c_in, t, iv, kt, stride, t_out);
        gemm(c_out, c_in * kt, t_out * iv, 1.0, k.data(), false, &col, false, 0.0, o);
    });
    Ok(out)
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn temporal_conv_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    d_out: &Tensor,
) -> (Tensor, Tensor) {
    let [n, c_in, t, i, v] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)];
    let c_out = k.dim(0);
    let kt = k.dim(2);
    let pad = (kt - 1) / 2;
    let iv = i * v;
    let t_out = d_out.dim(2);
    let cols = t_out * iv;
    let results = exec::map_indexed(n, |b| {
        let xb = &x.data()[b * c_in * t * iv..(b + 1) * c_in * t * iv];
        let gb = &d_out.data()[b * c_out * cols..(b + 1) * c_out * cols];
        let col = im2col(xb, c_in, t, iv, kt, stride, t_out);
        let mut dk = vec![0.0; c_out * c_in * kt];
        gemm(c_out, cols, c_in * kt, 1.0, gb, false, &col, true, 0.0, &mut dk);
        let mut dcol = vec![0.0; c_in * kt * cols];
        gemm(c_in * kt, c_out, cols, 1.0, k.data(), true, gb, false, 0.0, &mut dcol);
        let mut dxb = vec![0.0; c_in * t * iv];
        for c in 0..c_in {
            for j in 0..kt {
                let row = &dcol[(c * kt + j) * cols..(c * kt + j + 1) * cols];
                for to in 0..t_out {
                    let src = (to * stride + j) as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        let dst = &mut dxb[(c * t + src as usize) * iv..(c * t + src as usize + 1) * iv];
                        for (d, g) in dst.iter_mut().zip(&row[to * iv..(to + 1) * iv]) {
                            *d += g;
                        }
                    }
                }
            }
        }
        (dxb, dk)
    });
    let mut dx = Vec::with_capacity(x.len());
    let mut dk = Tensor::zeros(k.shape());
    for (dxb, dkb) in results {
        dx.extend_from_slice(&dxb);
        for (a, b) in dk.data_mut().iter_mut().zip(&dkb) {
            *a += b;
        }
    }
    (Tensor::new(x.shape(), dx).expect("shape"), dk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::adjacency::{normalize_adjacency, Partition};
    use crate::graph::topology::{GraphTopology, LayoutKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye_weights(s: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[s, c, c], |i| (i[1] == i[2]) as u8 as f64)
    }

    #[test]
    fn identity_graph_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 2, 5], &mut rng);
        let out = spatial_graph_conv(&x, &AdjacencyStack::identity(5), &eye_weights(1, 3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn half_adjacency_preserves_constants() {
        let a = normalize_adjacency(&GraphTopology::path(2), Partition::Uniform);
        let x = Tensor::full(&[1, 2, 3, 1, 2], 1.75);
        let out = spatial_graph_conv(&x, &a, &eye_weights(1, 2)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn graph_conv_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let topo = GraphTopology::build(LayoutKind::Body25);
        let a = normalize_adjacency(&topo, Partition::Distance);
        let x = Tensor::randn(&[2, 4, 8, 2, 25], &mut rng);
        let w = Tensor::randn(&[3, 4, 16], &mut rng);
        assert_eq!(spatial_graph_conv(&x, &a, &w).unwrap().shape(), &[2, 16, 8, 2, 25]);
        let bad = Tensor::randn(&[3, 5, 16], &mut rng);
        assert!(spatial_graph_conv(&x, &a, &bad).is_err());
    }

    #[test]
    fn graph_conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normalize_adjacency(&GraphTopology::path(4), Partition::Distance);
        let x = Tensor::randn(&[2, 3, 2, 2, 4], &mut rng);
        let w = Tensor::randn(&[3, 3, 2], &mut rng);
        let out = spatial_graph_conv(&x, &a, &w).unwrap();
        let direct = Tensor::from_fn(&[2, 2, 2, 2, 4], |o| {
            let mut acc = 0.0;
            for s in 0..3 {
                for c in 0..3 {
                    for u in 0..4 {
                        acc += a.entry(s, o[4], u) * x.at(&[o[0], c, o[2], o[3], u]) * w.at(&[s, c, o[1]]);
                    }
                }
            }
            acc
        });
        for (p, q) in out.data().iter().zip(direct.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_identity_and_box_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 2, 6, 1, 3], &mut rng);
        let id = Tensor::from_fn(&[2, 2, 1], |i| (i[0] == i[1]) as u8 as f64);
        assert_eq!(temporal_conv(&x, &id, 1).unwrap(), x);

        // per-channel 3-tap mean on a linear ramp keeps interior values
        let ramp = Tensor::from_fn(&[1, 1, 8, 1, 1], |i| 2.0 * i[2] as f64 + 1.0);
        let boxk = Tensor::full(&[1, 1, 3], 1.0 / 3.0);
        let out = temporal_conv(&ramp, &boxk, 1).unwrap();
        for t in 1..7 {
            assert!((out.at(&[0, 0, t, 0, 0]) - ramp.at(&[0, 0, t, 0, 0])).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_stride_and_guards() {
        let x = Tensor::zeros(&[1, 2, 32, 2, 3]);
        let k = Tensor::zeros(&[4, 2, 5]);
        assert_eq!(temporal_conv(&x, &k, 2).unwrap().shape(), &[1, 4, 16, 2, 3]);
        let x_odd = Tensor::zeros(&[1, 2, 7, 1, 1]);
        assert_eq!(temporal_conv(&x_odd, &k, 2).unwrap().dim(2), 4);
        assert!(temporal_conv(&x, &Tensor::zeros(&[4, 2, 4]), 1).is_err());
        assert!(temporal_conv(&x, &k, 3).is_err());
    }

    #[test]
    fn temporal_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 7, 2, 2], &mut rng);
        let k = Tensor::randn(&[2, 3, 3], &mut rng);
        let out = temporal_conv(&x, &k, 2).unwrap();
        let direct = Tensor::from_fn(&[2, 2, 4, 2, 2], |o| {
            let mut acc = 0.0;
            for c in 0..3 {
                for j in 0..3 {
                    let src = (o[2] * 2 + j) as isize - 1;
                    if (0..7).contains(&src) {
                        acc += k.at(&[o[1], c, j]) * x.at(&[o[0], c, src as usize, o[3], o[4]]);
                    }
                }
            }
            acc
        });
        for (p, q) in out.data().iter().zip(direct.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
