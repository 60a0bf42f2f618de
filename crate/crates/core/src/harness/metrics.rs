use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::loss::{fuse_logits_avg, Logits};

/// Mean of per-stream logits (joint/bone); prediction is the argmax with the
/// lowest index winning ties.
pub fn ensemble_streams(streams: &[&Logits]) -> Result<Logits> {
    fuse_logits_avg(streams)
}

/// `[true][pred]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(
        predictions.len() == labels.len(),
        "{} predictions for {} labels",
        predictions.len(),
        labels.len()
    );
    let mut m = vec![vec![0; classes]; classes];
    for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
        ensure!(p < classes && l < classes, "entry {i}: prediction {p} / label {l} out of range for {classes} classes");
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn trace(confusion: &[Vec<usize>]) -> usize {
    confusion.iter().enumerate().map(|(i, row)| row[i]).sum()
}

/// Per-class recall; `None` for classes without support.
pub fn per_class_accuracy(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[i] as f64 / support as f64)
        })
        .collect()
}

/// Accuracy restricted to samples whose label is in `classes`.
pub fn accuracy_on(predictions: &[usize], labels: &[usize], classes: &[usize]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        if classes.contains(&l) {
            total += 1;
            hit += usize::from(p == l);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Accuracy of one set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamScore {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

impl StreamScore {
    pub fn from_logits(logits: &Logits, labels: &[usize]) -> Result<StreamScore> {
        let predictions = logits.predictions();
        let confusion = confusion_matrix(&predictions, labels, logits.classes())?;
        Ok(StreamScore {
            accuracy: trace(&confusion) as f64 / labels.len().max(1) as f64,
            per_class: per_class_accuracy(&confusion),
            predictions,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    /// Accuracy per stream (`joint`, `bone`) and per part (`joint.body`,
    /// `joint.hand`, `joint.expert_only`, ...).
    pub streams: BTreeMap<String, StreamScore>,
    pub loss_history: Vec<f64>,
}

impl Metrics {
    pub fn from_logits(fused: &Logits, labels: &[usize], streams: BTreeMap<String, StreamScore>) -> Result<Metrics> {
        let predictions = fused.predictions();
        let confusion = confusion_matrix(&predictions, labels, fused.classes())?;
        Ok(Metrics {
            accuracy: trace(&confusion) as f64 / labels.len().max(1) as f64,
            per_class: per_class_accuracy(&confusion),
            confusion,
            streams,
            loss_history: Vec::new(),
        })
    }

    pub fn stream_accuracy(&self, name: &str) -> Option<f64> {
        self.streams.get(name).map(|s| s.accuracy)
    }

    /// Plain-text summary, one fact per line.
    pub fn report(&self) -> String {
        let mut out = format!("accuracy {:.4}\n", self.accuracy);
        for (name, s) in &self.streams {
            out.push_str(&format!("stream {name} {:.4}\n", s.accuracy));
        }
        for (k, a) in self.per_class.iter().enumerate() {
            match a {
                Some(a) => out.push_str(&format!("class {k} {a:.4}\n")),
                None => out.push_str(&format!("class {k} -\n")),
            }
        }
        out
    }
}
