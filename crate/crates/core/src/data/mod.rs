//! Body and hand skeleton sequences: storage, validation, preprocessing, and a
//! synthetic generator.

pub mod io;
pub mod synth;
pub mod transform;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub use io::{dataset_from_str, dataset_to_string, load_dataset, save_dataset, FORMAT_VERSION};
pub use synth::{synth_generate, ClassProfile, SynthSpec, SyntheticSplit};
pub use transform::{
    derive_bone, normalize_center, pad_hand_layout, resample_temporal, select_active_hands, to_stream_tensor,
    HandSelection, StreamTensor,
};

pub const BODY_NODES: usize = 25;
pub const HAND_NODES: usize = 21;
pub const PADDED_NODES: usize = 25;
pub const INSTANCES: usize = 2;

/// One person's coordinate sequences, each `[T_raw, V, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonTrack {
    pub body: Tensor,
    pub left_hand: Tensor,
    pub right_hand: Tensor,
}

impl PersonTrack {
    pub fn frames(&self) -> usize {
        self.body.dim(0)
    }

    pub(crate) fn validate(&self, path: &str) -> Result<()> {
        let t = self.body.dim(0);
        for (field, track, nodes) in [
            ("body", &self.body, BODY_NODES),
            ("left_hand", &self.left_hand, HAND_NODES),
            ("right_hand", &self.right_hand, HAND_NODES),
        ] {
            ensure!(
                track.shape() == [t, nodes, 3],
                "{path}.{field}: expected [{t} x {nodes} x 3], got {:?}",
                track.shape()
            );
            ensure!(track.is_finite(), "{path}.{field}: non-finite coordinate");
        }
        ensure!(t >= 1, "{path}: needs at least one frame");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSample {
    pub label: usize,
    pub persons: Vec<PersonTrack>,
}

impl SkeletonSample {
    pub fn frame_count(&self) -> usize {
        self.persons.first().map_or(0, PersonTrack::frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<SkeletonSample>,
}

impl Dataset {
    pub fn new(num_classes: usize, samples: Vec<SkeletonSample>) -> Result<Self> {
        let d = Dataset { num_classes, samples };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "num_classes must be at least 2, got {}", self.num_classes);
        for (i, s) in self.samples.iter().enumerate() {
            let path = format!("samples[{i}]");
            ensure!(
                s.label < self.num_classes,
                "{path}.label: {} out of range for {} classes",
                s.label,
                self.num_classes
            );
            ensure!(
                (1..=INSTANCES).contains(&s.persons.len()),
                "{path}.persons: expected 1 or 2 persons, got {}",
                s.persons.len()
            );
            let t = s.frame_count();
            for (p, person) in s.persons.iter().enumerate() {
                let ppath = format!("{path}.persons[{p}]");
                person.validate(&ppath)?;
                ensure!(
                    person.frames() == t,
                    "{ppath}: {} frames but person 0 has {t}",
                    person.frames()
                );
            }
        }
        Ok(())
    }
}

/// Coordinate modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Joint,
    Bone,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "joint" => Ok(Modality::Joint),
            "bone" => Ok(Modality::Bone),
            other => Err(crate::Error::validation(format!("unknown stream '{other}' (expected joint or bone)"))),
        }
    }
}

/// Which part and modality a stream tensor carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    BodyJoint,
    BodyBone,
    HandJoint,
    HandBone,
}

impl StreamKind {
    pub fn body(modality: Modality) -> Self {
        match modality {
            Modality::Joint => StreamKind::BodyJoint,
            Modality::Bone => StreamKind::BodyBone,
        }
    }

    pub fn hand(modality: Modality) -> Self {
        match modality {
            Modality::Joint => StreamKind::HandJoint,
            Modality::Bone => StreamKind::HandBone,
        }
    }

    pub fn is_hand(self) -> bool {
        matches!(self, StreamKind::HandJoint | StreamKind::HandBone)
    }

    pub fn is_bone(self) -> bool {
        matches!(self, StreamKind::BodyBone | StreamKind::HandBone)
    }
}
