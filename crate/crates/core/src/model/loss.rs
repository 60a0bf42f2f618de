//! Cross-entropy, logit fusion, and the two composite training objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Raw class scores, `[N, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Tensor);

impl Logits {
    pub fn new(values: Tensor) -> Result<Self> {
        ensure!(values.ndim() == 2, "logits must be [N, K], got {:?}", values.shape());
        ensure!(values.is_finite(), "logits contain non-finite values");
        Ok(Logits(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "logits need at least one row");
        let k = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == k), "ragged logit rows");
        Self::new(Tensor::new(&[rows.len(), k], rows.concat())?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.0.dim(1)
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let k = self.classes();
        &self.0.data()[n * k..(n + 1) * k]
    }

    /// Predicted class per row; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch()).map(|n| argmax(self.row(n))).collect()
    }

    pub fn add(&self, other: &Logits) -> Result<Logits> {
        ensure!(self.0.shape() == other.0.shape(), "logit shapes differ");
        Ok(Logits(self.0.zip_map(&other.0, |a, b| a + b)))
    }
}

/// Index of the maximum; the first maximal entry wins.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-term weights of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_body: f64,
    pub lambda_hand: f64,
    pub lambda_cpl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_body: 1.0, lambda_hand: 1.0, lambda_cpl: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_body: f64, lambda_hand: f64, lambda_cpl: f64) -> Result<Self> {
        let w = LossWeights { lambda_body, lambda_hand, lambda_cpl };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_body", self.lambda_body),
            ("lambda_hand", self.lambda_hand),
            ("lambda_cpl", self.lambda_cpl),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be a finite non-negative number, got {v}");
        }
        Ok(())
    }
}

pub(crate) fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    ensure!(labels.len() == n, "{} labels for {n} logit rows", labels.len());
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::validation(format!("label {l} at index {i} out of range for {k} classes")));
    }
    Ok(())
}

/// Returns the mean loss and the softmax probabilities.
pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    ensure!(logits.ndim() == 2, "cross_entropy: logits must be [N, K]");
    let (n, k) = (logits.dim(0), logits.dim(1));
    check_labels(labels, n, k)?;
    ensure!(n > 0, "cross_entropy: empty batch");
    let mut probs = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let top = argmax(row);
        let max = row[top];
        let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, z)| (z - max).exp()).sum();
        let log_sum = rest.ln_1p();
        total += (max - row[label]) + log_sum;
        for (p, z) in probs.data_mut()[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (z - max - log_sum).exp();
        }
    }
    Ok((total / n as f64, probs))
}

pub(crate) fn cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let s = upstream / n as f64;
    let mut g = probs.scale(s);
    for (r, &l) in labels.iter().enumerate() {
        g.data_mut()[r * k + l] -= s;
    }
    g
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_forward(logits.tensor(), labels)?.0)
}

/// Elementwise arithmetic mean of equally shaped logits.
pub fn fuse_logits_avg(inputs: &[&Logits]) -> Result<Logits> {
    ensure!(!inputs.is_empty(), "cannot fuse an empty list of logits");
    let shape = inputs[0].tensor().shape();
    ensure!(
        inputs.iter().all(|l| l.tensor().shape() == shape),
        "all fused logits must share shape {:?}",
        shape
    );
    let mut acc = inputs[0].tensor().clone();
    for l in &inputs[1..] {
        acc.add_assign(l.tensor());
    }
    Logits::new(acc.scale(1.0 / inputs.len() as f64))
}

/// `λ_B·CE(ŷ_B) + λ_H·CE(ŷ_H) + λ_cpl·CE(mean(ŷ_B, ŷ_H))`.
pub fn dual_stream_loss(body: &Logits, hand: &Logits, labels: &[usize], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let fused = fuse_logits_avg(&[body, hand])?;
    Ok(w.lambda_body * cross_entropy(body, labels)?
        + w.lambda_hand * cross_entropy(hand, labels)?
        + w.lambda_cpl * cross_entropy(&fused, labels)?)
}

/// Logits of the four-branch model.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub expert_body: Logits,
    pub expert_hand: Logits,
    pub interactive_body: Logits,
    pub interactive_hand: Logits,
    pub fused: Logits,
}

impl BranchOutputs {
    /// Builds the outputs with `fused = y1 + y2 + y3 + y4`.
    pub fn from_branches(y1: Logits, y2: Logits, y3: Logits, y4: Logits) -> Result<Self> {
        let fused = y1.add(&y2)?.add(&y3)?.add(&y4)?;
        Ok(BranchOutputs {
            expert_body: y1,
            expert_hand: y2,
            interactive_body: y3,
            interactive_hand: y4,
            fused,
        })
    }
}

/// Individual terms on the interactive branches, complementary term on the
/// four-branch sum: `λ_B·CE(y3) + λ_H·CE(y4) + λ_cpl·CE(fused)`.
pub fn bharnet_e_loss(out: &BranchOutputs, labels: &[usize], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.lambda_body * cross_entropy(&out.interactive_body, labels)?
        + w.lambda_hand * cross_entropy(&out.interactive_hand, labels)?
        + w.lambda_cpl * cross_entropy(&out.fused, labels)?)
}

/// Light-weight inference: only the two expertized branches, `y1 + y2`.
pub fn expert_only_predict(out: &BranchOutputs) -> Result<Logits> {
    out.expert_body.add(&out.expert_hand)
}

/// Weighted sum of cross-entropy terms on a tape; zero-weight terms are not
/// recorded at all.
pub(crate) fn weighted_ce(tape: &mut Tape, terms: &[(f64, Var)], labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(weight, logits) in terms {
        if weight == 0.0 {
            continue;
        }
        let ce = tape.cross_entropy(logits, labels)?;
        let term = tape.scale(ce, weight);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Logits {
        Logits::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn uniform_two_class_is_ln2() {
        let ce = cross_entropy(&logits(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_match_log1p() {
        let ce = cross_entropy(&logits(&[&[10.0, -10.0]]), &[0]).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((ce - want).abs() < 1e-20);
        assert!((ce - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let err = cross_entropy(&logits(&[&[0.0, 1.0]]), &[2]).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn averaging_and_empty_list() {
        let a = logits(&[&[1.0, 3.0]]);
        let b = logits(&[&[3.0, 1.0]]);
        assert_eq!(fuse_logits_avg(&[&a, &b]).unwrap().row(0), &[2.0, 2.0]);
        assert_eq!(fuse_logits_avg(&[&a]).unwrap(), a);
        assert!(fuse_logits_avg(&[]).is_err());
    }

    #[test]
    fn identical_streams_triple_the_loss() {
        let y = logits(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
        let l = dual_stream_loss(&y, &y, &[2, 0], &LossWeights::default()).unwrap();
        let ce = cross_entropy(&y, &[2, 0]).unwrap();
        assert_eq!(l, 3.0 * ce);
    }

    #[test]
    fn tie_break_is_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights::new(1.0, -0.1, 1.0).is_err());
    }
}
