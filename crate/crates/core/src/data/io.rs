//! Dataset file format: one UTF-8 JSON document,
//! `{"format_version":1, "num_classes":K, "samples":[{"label":k, "persons":[
//! {"body":[T][25][3], "left_hand":[T][21][3], "right_hand":[T][21][3]}]}]}`.
//! Floats are written in shortest round-trip form, so load(save(d)) == d.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PersonTrack, SkeletonSample, BODY_NODES, HAND_NODES};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

type Frames = Vec<Vec<Vec<f64>>>;

#[derive(Serialize, Deserialize)]
struct RawPerson {
    body: Frames,
    left_hand: Frames,
    right_hand: Frames,
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    label: usize,
    persons: Vec<RawPerson>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    format_version: u64,
    num_classes: usize,
    samples: Vec<RawSample>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u64,
}

fn to_frames(t: &Tensor) -> Frames {
    let (frames, nodes) = (t.dim(0), t.dim(1));
    (0..frames)
        .map(|f| {
            (0..nodes)
                .map(|v| t.data()[(f * nodes + v) * 3..(f * nodes + v + 1) * 3].to_vec())
                .collect()
        })
        .collect()
}

fn from_frames(raw: Frames, nodes: usize, path: &str) -> Result<Tensor> {
    let t = raw.len();
    let mut data = Vec::with_capacity(t * nodes * 3);
    for (f, frame) in raw.into_iter().enumerate() {
        ensure!(
            frame.len() == nodes,
            "{path}: frame {f} has {} nodes, expected {nodes}",
            frame.len()
        );
        for (v, xyz) in frame.into_iter().enumerate() {
            ensure!(
                xyz.len() == 3,
                "{path}: frame {f} node {v} has {} coordinates, expected 3",
                xyz.len()
            );
            data.extend(xyz);
        }
    }
    Tensor::new(&[t, nodes, 3], data)
}

fn to_raw(d: &Dataset) -> RawDataset {
    RawDataset {
        format_version: FORMAT_VERSION,
        num_classes: d.num_classes,
        samples: d
            .samples
            .iter()
            .map(|s| RawSample {
                label: s.label,
                persons: s
                    .persons
                    .iter()
                    .map(|p| RawPerson {
                        body: to_frames(&p.body),
                        left_hand: to_frames(&p.left_hand),
                        right_hand: to_frames(&p.right_hand),
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn from_raw(raw: RawDataset) -> Result<Dataset> {
    if raw.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(raw.format_version));
    }
    let mut samples = Vec::with_capacity(raw.samples.len());
    for (i, s) in raw.samples.into_iter().enumerate() {
        let mut persons = Vec::with_capacity(s.persons.len());
        for (p, person) in s.persons.into_iter().enumerate() {
            let path = format!("samples[{i}].persons[{p}]");
            persons.push(PersonTrack {
                body: from_frames(person.body, BODY_NODES, &format!("{path}.body"))?,
                left_hand: from_frames(person.left_hand, HAND_NODES, &format!("{path}.left_hand"))?,
                right_hand: from_frames(person.right_hand, HAND_NODES, &format!("{path}.right_hand"))?,
            });
        }
        samples.push(SkeletonSample { label: s.label, persons });
    }
    Dataset::new(raw.num_classes, samples)
}

pub fn dataset_to_string(d: &Dataset) -> Result<String> {
    Ok(serde_json::to_string(&to_raw(d))?)
}

pub fn dataset_from_str(s: &str) -> Result<Dataset> {
    let probe: VersionProbe = serde_json::from_str(s)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(probe.format_version));
    }
    from_raw(serde_json::from_str(s)?)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    d.validate()?;
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?);
    serde_json::to_writer(&mut w, &to_raw(d))?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let probe: VersionProbe = serde_json::from_reader(BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(probe.format_version));
    }
    from_raw(serde_json::from_reader(BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?))?)
}
