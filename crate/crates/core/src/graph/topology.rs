use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Fixed skeleton layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// 25-node body tree rooted at the pelvis.
    Body25,
    /// 21-node single-hand layout plus four isolated dummy nodes (21..=24).
    Hand21Padded25,
}

/// Body joint indices.
pub mod body {
    pub const PELVIS: usize = 0;
    pub const SPINE_MID: usize = 1;
    pub const CHEST: usize = 2;
    pub const NECK: usize = 3;
    pub const HEAD: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const L_HAND: usize = 8;
    pub const L_HANDTIP: usize = 9;
    pub const R_SHOULDER: usize = 10;
    pub const R_ELBOW: usize = 11;
    pub const R_WRIST: usize = 12;
    pub const R_HAND: usize = 13;
    pub const R_HANDTIP: usize = 14;
    pub const L_HIP: usize = 15;
    pub const L_KNEE: usize = 16;
    pub const L_ANKLE: usize = 17;
    pub const L_FOOT: usize = 18;
    pub const R_HIP: usize = 19;
    pub const R_KNEE: usize = 20;
    pub const R_ANKLE: usize = 21;
    pub const R_FOOT: usize = 22;
    pub const L_THUMB: usize = 23;
    pub const R_THUMB: usize = 24;

    pub const PARENTS: [usize; 25] = [
        PELVIS, PELVIS, SPINE_MID, CHEST, NECK, // trunk + head
        CHEST, L_SHOULDER, L_ELBOW, L_WRIST, L_HAND, // left arm
        CHEST, R_SHOULDER, R_ELBOW, R_WRIST, R_HAND, // right arm
        PELVIS, L_HIP, L_KNEE, L_ANKLE, // left leg
        PELVIS, R_HIP, R_KNEE, R_ANKLE, // right leg
        L_HAND, R_HAND, // thumbs
    ];
}

/// Hand joint indices: wrist, then four joints per finger from base to tip
/// (thumb, index, middle, ring, pinky).
pub mod hand {
    pub const WRIST: usize = 0;
    pub const NODES: usize = 21;
    pub const PADDED_NODES: usize = 25;

    pub fn finger(finger: usize, joint: usize) -> usize {
        1 + 4 * finger + joint
    }

    pub fn tip(f: usize) -> usize {
        finger(f, 3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTopology {
    node_count: usize,
    parent: Vec<usize>,
    edges: Vec<(usize, usize)>,
    dummy: Vec<bool>,
}

impl GraphTopology {
    /// Build from a parent table; a node whose parent is itself is a root.
    /// Dummy nodes must be self-parented and receive no edges.
    pub fn from_parents(parent: Vec<usize>, dummy: Vec<bool>) -> Result<Self> {
        let n = parent.len();
        ensure!(n > 0, "topology needs at least one node");
        ensure!(dummy.len() == n, "dummy mask length {} != node count {}", dummy.len(), n);
        let mut edges = Vec::new();
        for (v, &p) in parent.iter().enumerate() {
            ensure!(p < n, "node {v} has out-of-range parent {p}");
            if dummy[v] {
                ensure!(p == v, "dummy node {v} must be self-parented");
                continue;
            }
            ensure!(!dummy[p], "node {v} is parented to dummy node {p}");
            if p != v {
                edges.push((p, v));
            }
        }
        // every chain must terminate at a root within n hops
        for v in 0..n {
            let mut cur = v;
            let mut hops = 0;
            while parent[cur] != cur {
                cur = parent[cur];
                hops += 1;
                ensure!(hops <= n, "parent map has a cycle through node {v}");
            }
        }
        Ok(GraphTopology { node_count: n, parent, edges, dummy })
    }

    pub fn build(kind: LayoutKind) -> Self {
        match kind {
            LayoutKind::Body25 => {
                Self::from_parents(body::PARENTS.to_vec(), vec![false; 25]).expect("static layout")
            }
            LayoutKind::Hand21Padded25 => {
                let mut parent: Vec<usize> = (0..hand::PADDED_NODES).collect();
                for f in 0..5 {
                    for j in 0..4 {
                        let v = hand::finger(f, j);
                        parent[v] = if j == 0 { hand::WRIST } else { v - 1 };
                    }
                }
                let dummy = (0..hand::PADDED_NODES).map(|v| v >= hand::NODES).collect();
                Self::from_parents(parent, dummy).expect("static layout")
            }
        }
    }

    /// A chain 0-1-…-(n-1) rooted at node 0; used for small test graphs.
    pub fn path(n: usize) -> Self {
        let parent = (0..n).map(|v| v.saturating_sub(1)).collect();
        Self::from_parents(parent, vec![false; n]).expect("path layout")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn parent(&self, v: usize) -> usize {
        self.parent[v]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_dummy(&self, v: usize) -> bool {
        self.dummy[v]
    }

    pub fn dummy_mask(&self) -> &[bool] {
        &self.dummy
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.node_count)
            .filter(|&v| self.parent[v] == v && !self.dummy[v])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body25_is_a_tree() {
        let t = GraphTopology::build(LayoutKind::Body25);
        assert_eq!(t.node_count(), 25);
        assert_eq!(t.edges().len(), 24);
        assert_eq!(t.roots(), vec![body::PELVIS]);
    }

    #[test]
    fn hand_dummies_are_isolated() {
        let t = GraphTopology::build(LayoutKind::Hand21Padded25);
        assert_eq!(t.edges().len(), 20);
        for v in 21..25 {
            assert_eq!(t.degree(v), 0);
            assert!(t.is_dummy(v));
        }
        assert_eq!(t.roots(), vec![hand::WRIST]);
    }

    #[test]
    fn fingertips_reach_wrist_in_four_hops() {
        let t = GraphTopology::build(LayoutKind::Hand21Padded25);
        for f in 0..5 {
            let mut v = hand::tip(f);
            let mut hops = 0;
            while v != hand::WRIST {
                v = t.parent(v);
                hops += 1;
            }
            assert!(hops <= 4, "finger {f} took {hops} hops");
        }
    }

    #[test]
    fn cycles_and_bad_dummies_are_rejected() {
        assert!(GraphTopology::from_parents(vec![1, 0], vec![false; 2]).is_err());
        assert!(GraphTopology::from_parents(vec![0, 0], vec![false, true]).is_err());
        assert!(GraphTopology::from_parents(vec![0, 0, 2], vec![false, false]).is_err());
    }
}
