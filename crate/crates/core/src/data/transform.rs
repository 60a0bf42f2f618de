use super::{Dataset, SkeletonSample, StreamKind, HAND_NODES, INSTANCES, PADDED_NODES};
use crate::error::{ensure, Result};
use crate::exec;
use crate::graph::topology::GraphTopology;
use crate::tensor::Tensor;

/// Model-ready stream input, `[N, 3, T, 2, 25]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTensor {
    pub data: Tensor,
    pub kind: StreamKind,
    pub dummy_mask: Vec<bool>,
}

impl StreamTensor {
    pub fn batch(&self) -> usize {
        self.data.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.data.dim(2)
    }

    /// Gather a subset of samples along the batch axis.
    pub fn select(&self, indices: &[usize]) -> StreamTensor {
        let per = self.data.len() / self.batch().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.data.shape().to_vec();
        shape[0] = indices.len();
        StreamTensor {
            data: Tensor::new(&shape, data).expect("selection preserves sample size"),
            kind: self.kind,
            dummy_mask: self.dummy_mask.clone(),
        }
    }
}

fn check_track(track: &Tensor) -> Result<(usize, usize)> {
    ensure!(
        track.ndim() == 3 && track.dim(2) == 3,
        "track must be [T x V x 3], got {:?}",
        track.shape()
    );
    Ok((track.dim(0), track.dim(1)))
}

pub fn resample_temporal(track: &Tensor, t_out: usize) -> Result<Tensor> {
    let (t_in, v) = check_track(track)?;
    ensure!(t_in >= 1 && t_out >= 1, "resampling needs T_in >= 1 and T_out >= 1");
    let frame = v * 3;
    let src = track.data();
    let mut out = Vec::with_capacity(t_out * frame);
    for t in 0..t_out {
        let pos = if t_out > 1 { (t * (t_in - 1)) as f64 / (t_out - 1) as f64 } else { 0.0 };
        let i0 = (pos.floor() as usize).min(t_in - 1);
        let i1 = (i0 + 1).min(t_in - 1);
        let frac = pos - i0 as f64;
        let (a, b) = (&src[i0 * frame..(i0 + 1) * frame], &src[i1 * frame..(i1 + 1) * frame]);
        out.extend(a.iter().zip(b).map(|(&x0, &x1)| if frac == 0.0 { x0 } else { (1.0 - frac) * x0 + frac * x1 }));
    }
    Tensor::new(&[t_out, v, 3], out)
}

pub fn derive_bone(track: &Tensor, topology: &GraphTopology) -> Result<Tensor> {
    let (t, v) = check_track(track)?;
    ensure!(
        topology.node_count() == v,
        "topology has {} nodes but track has {v}",
        topology.node_count()
    );
    let src = track.data();
    let mut out = vec![0.0; src.len()];
    for f in 0..t {
        for node in 0..v {
            let p = topology.parent(node);
            if p == node {
                continue;
            }
            for c in 0..3 {
                out[(f * v + node) * 3 + c] = src[(f * v + node) * 3 + c] - src[(f * v + p) * 3 + c];
            }
        }
    }
    Tensor::new(&[t, v, 3], out)
}

pub fn normalize_center(track: &Tensor, root: usize) -> Result<Tensor> {
    let (t, v) = check_track(track)?;
    ensure!(root < v, "root index {root} out of range for {v} nodes");
    let mut out = track.clone();
    let data = out.data_mut();
    for f in 0..t {
        let r = [data[(f * v + root) * 3], data[(f * v + root) * 3 + 1], data[(f * v + root) * 3 + 2]];
        for node in 0..v {
            for c in 0..3 {
                data[(f * v + node) * 3 + c] -= r[c];
            }
        }
    }
    Ok(out)
}

pub fn pad_hand_layout(hand: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let (t, v) = check_track(hand)?;
    ensure!(v == HAND_NODES, "hand layout needs {HAND_NODES} nodes, got {v}");
    let mut out = Tensor::zeros(&[t, PADDED_NODES, 3]);
    for f in 0..t {
        out.data_mut()[f * PADDED_NODES * 3..(f * PADDED_NODES + HAND_NODES) * 3]
            .copy_from_slice(&hand.data()[f * HAND_NODES * 3..(f + 1) * HAND_NODES * 3]);
    }
    Ok((out, (0..PADDED_NODES).map(|i| i >= HAND_NODES).collect()))
}

/// Hands of the most active person.
#[derive(Debug, Clone, PartialEq)]
pub struct HandSelection {
    pub left: Tensor,
    pub right: Tensor,
    pub person: usize,
}

pub fn motion_energy(body: &Tensor) -> f64 {
    let frame = body.len() / body.dim(0).max(1);
    let d = body.data();
    d.iter().zip(&d[frame.min(d.len())..]).map(|(a, b)| (b - a) * (b - a)).sum()
}

pub fn select_active_hands(sample: &SkeletonSample) -> Result<HandSelection> {
    ensure!(!sample.persons.is_empty(), "sample has no persons");
    let mut best = (0, f64::NEG_INFINITY);
    for (p, person) in sample.persons.iter().enumerate() {
        let e = motion_energy(&person.body);
        if e > best.1 {
            best = (p, e);
        }
    }
    let person = &sample.persons[best.0];
    Ok(HandSelection { left: person.left_hand.clone(), right: person.right_hand.clone(), person: best.0 })
}

fn check_topology(kind: StreamKind, topology: &GraphTopology) -> Result<()> {
    ensure!(
        topology.node_count() == PADDED_NODES,
        "stream topology must have {PADDED_NODES} nodes, got {}",
        topology.node_count()
    );
    let dummies = topology.dummy_mask().iter().filter(|&&d| d).count();
    let expected = if kind.is_hand() { PADDED_NODES - HAND_NODES } else { 0 };
    ensure!(
        dummies == expected,
        "{kind:?} stream needs a topology with {expected} dummy nodes, got {dummies}"
    );
    Ok(())
}

/// Per-instance `[T, 25, 3]` tracks for one sample.
fn sample_instances(
    sample: &SkeletonSample,
    kind: StreamKind,
    frames: usize,
    topology: &GraphTopology,
) -> Result<Vec<Tensor>> {
    let raw: Vec<Option<Tensor>> = if kind.is_hand() {
        let sel = select_active_hands(sample)?;
        vec![Some(sel.left), Some(sel.right)]
    } else {
        (0..INSTANCES).map(|p| sample.persons.get(p).map(|x| x.body.clone())).collect()
    };
    raw.into_iter()
        .map(|track| {
            let Some(track) = track else {
                return Ok(Tensor::zeros(&[frames, PADDED_NODES, 3]));
            };
            let mut x = resample_temporal(&track, frames)?;
            x = normalize_center(&x, 0)?;
            if kind.is_hand() {
                x = pad_hand_layout(&x)?.0;
            }
            if kind.is_bone() {
                x = derive_bone(&x, topology)?;
            }
            Ok(x)
        })
        .collect()
}

pub fn to_stream_tensor(
    dataset: &Dataset,
    kind: StreamKind,
    frames: usize,
    topology: &GraphTopology,
) -> Result<(StreamTensor, Vec<usize>)> {
    ensure!(frames >= 2, "stream needs at least 2 frames, got {frames}");
    check_topology(kind, topology)?;
    let per_sample = exec::map_slice(&dataset.samples, |s| sample_instances(s, kind, frames, topology));
    let n = dataset.len();
    let v = PADDED_NODES;
    let mut out = Tensor::zeros(&[n, 3, frames, INSTANCES, v]);
    let data = out.data_mut();
    for (idx, instances) in per_sample.into_iter().enumerate() {
        let instances = instances.map_err(|e| crate::Error::validation(format!("samples[{idx}]: {e}")))?;
        for (i, track) in instances.iter().enumerate() {
            let src = track.data();
            for t in 0..frames {
                for node in 0..v {
                    for c in 0..3 {
                        data[(((idx * 3 + c) * frames + t) * INSTANCES + i) * v + node] = src[(t * v + node) * 3 + c];
                    }
                }
            }
        }
    }
    let stream = StreamTensor { data: out, kind, dummy_mask: topology.dummy_mask().to_vec() };
    Ok((stream, dataset.labels()))
}
