use serde::{Deserialize, Serialize};

use super::topology::GraphTopology;
use crate::tensor::Tensor;

/// How neighbours are split into adjacency subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// One subset: the whole neighbourhood including the node itself.
    Uniform,
    /// Three subsets: self, parent direction, child direction.
    #[default]
    Distance,
}

/// `S` normalized `V x V` adjacency matrices stored as one `[S, V, V]` tensor.
/// Row `w` of subset `s` holds the weights node `w` aggregates from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyStack {
    matrices: Tensor,
}

impl AdjacencyStack {
    pub fn from_tensor(matrices: Tensor) -> Self {
        assert_eq!(matrices.ndim(), 3, "adjacency stack must be [S, V, V]");
        assert_eq!(matrices.dim(1), matrices.dim(2));
        AdjacencyStack { matrices }
    }

    /// Identity stack with one subset; graph convolution then reduces to a
    /// per-node channel map.
    pub fn identity(v: usize) -> Self {
        Self::from_tensor(Tensor::from_fn(&[1, v, v], |i| (i[1] == i[2]) as u8 as f64))
    }

    pub fn subsets(&self) -> usize {
        self.matrices.dim(0)
    }

    pub fn nodes(&self) -> usize {
        self.matrices.dim(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrices
    }

    pub fn subset(&self, s: usize) -> &[f64] {
        let vv = self.nodes() * self.nodes();
        &self.matrices.data()[s * vv..(s + 1) * vv]
    }

    pub fn entry(&self, s: usize, row: usize, col: usize) -> f64 {
        self.matrices.at(&[s, row, col])
    }
}

/// Symmetric normalization `D^-1/2 A_s D^-1/2`.
///
/// Self loops are added for real nodes only, so dummy nodes end up with
/// all-zero rows and columns. For the distance partition the degree matrix is
/// taken from the full neighbourhood `A + I`, which makes the three subsets sum
/// to the uniform matrix and keeps edges to leaves and roots non-zero.
pub fn normalize_adjacency(topology: &GraphTopology, partition: Partition) -> AdjacencyStack {
    let v = topology.node_count();
    let mut self_loops = vec![0.0; v * v];
    let mut to_parent = vec![0.0; v * v];
    let mut to_child = vec![0.0; v * v];
    for w in 0..v {
        if !topology.is_dummy(w) {
            self_loops[w * v + w] = 1.0;
        }
    }
    for &(p, c) in topology.edges() {
        to_parent[c * v + p] = 1.0;
        to_child[p * v + c] = 1.0;
    }
    let degree: Vec<f64> = (0..v)
        .map(|w| (0..v).map(|u| self_loops[w * v + u] + to_parent[w * v + u] + to_child[w * v + u]).sum())
        .collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let normalize = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; v * v];
        for r in 0..v {
            for c in 0..v {
                out[r * v + c] = inv_sqrt[r] * m[r * v + c] * inv_sqrt[c];
            }
        }
        out
    };
    let subsets: Vec<Vec<f64>> = match partition {
        Partition::Uniform => {
            let full: Vec<f64> = (0..v * v)
                .map(|i| self_loops[i] + to_parent[i] + to_child[i])
                .collect();
            vec![normalize(&full)]
        }
        Partition::Distance => vec![
            normalize(&self_loops),
            normalize(&to_parent),
            normalize(&to_child),
        ],
    };
    let s = subsets.len();
    let data = subsets.into_iter().flatten().collect();
    AdjacencyStack::from_tensor(Tensor::new(&[s, v, v], data).expect("consistent shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::topology::LayoutKind;

    #[test]
    fn two_node_uniform_is_all_half() {
        let a = normalize_adjacency(&GraphTopology::path(2), Partition::Uniform);
        assert_eq!(a.subsets(), 1);
        for r in 0..2 {
            for c in 0..2 {
                assert!((a.entry(0, r, c) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn three_node_path_uniform_entries() {
        // self-loop degrees (2, 3, 2)
        let a = normalize_adjacency(&GraphTopology::path(3), Partition::Uniform);
        assert!((a.entry(0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((a.entry(0, 0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.entry(0, 1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.entry(0, 0, 2), 0.0);
    }

    #[test]
    fn dummy_rows_and_columns_are_zero() {
        let topo = GraphTopology::build(LayoutKind::Hand21Padded25);
        for partition in [Partition::Uniform, Partition::Distance] {
            let a = normalize_adjacency(&topo, partition);
            for s in 0..a.subsets() {
                for d in 21..25 {
                    for u in 0..25 {
                        assert_eq!(a.entry(s, d, u), 0.0);
                        assert_eq!(a.entry(s, u, d), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn distance_subsets_sum_to_uniform() {
        let topo = GraphTopology::build(LayoutKind::Body25);
        let u = normalize_adjacency(&topo, Partition::Uniform);
        let d = normalize_adjacency(&topo, Partition::Distance);
        assert_eq!(d.subsets(), 3);
        for r in 0..25 {
            for c in 0..25 {
                let sum: f64 = (0..3).map(|s| d.entry(s, r, c)).sum();
                assert!((sum - u.entry(0, r, c)).abs() < 1e-15);
                assert!(d.entry(1, r, c) >= 0.0 && d.entry(2, r, c).is_finite());
            }
        }
    }
}
