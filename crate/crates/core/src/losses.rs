//! Training objectives: reconstruction MSE for both decoders, the joint
//! reconstruction loss, per-stripe cross-entropy and triplet losses, and
//! the combined re-identification loss.
//!
//! The `*_with_grad` functions return the loss together with its gradient
//! with respect to the first tensor argument; the autograd tape uses them
//! as fused loss nodes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Average over every element (MSE) or every anchor/triplet (triplet).
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Hardest positive and hardest negative per anchor.
    BatchHard,
    /// Every valid (anchor, positive, negative) triple.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the HR reconstruction loss.
    pub lambda: f64,
    /// Weight of the triplet loss.
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            gamma: 1.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Down-sampling rate whose image is the LR reconstruction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct LrStandard(u32);

impl LrStandard {
    pub fn new(rate: u32) -> Result<Self> {
        if (2..=4).contains(&rate) {
            Ok(Self(rate))
        } else {
            Err(Error::Config(format!("LR standard rate must be 2, 3 or 4, got {rate}")))
        }
    }

    pub fn rate(self) -> u32 {
        self.0
    }

    /// Position of the standard within the `[LR2, LR3, LR4]` variants.
    pub fn variant_index(self) -> usize {
        self.0 as usize - 2
    }
}

impl Default for LrStandard {
    fn default() -> Self {
        Self(3)
    }
}

impl TryFrom<u32> for LrStandard {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LrStandard> for u32 {
    fn from(s: LrStandard) -> u32 {
        s.0
    }
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub mse_hr: f64,
    pub mse_lr: f64,
    pub ce: f64,
    pub trip: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.mse_hr, self.mse_lr, self.ce, self.trip, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// One metrics line: `step L_mse_H L_mse_L L_ce L_trip total`, tab separated.
    pub fn tsv_line(&self, step: u64) -> String {
        format!(
            "{step}\t{}\t{}\t{}\t{}\t{}",
            self.mse_hr, self.mse_lr, self.ce, self.trip, self.total
        )
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "{op}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn squared_error_with_grad(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<(f64, Tensor)> {
    same_shape("squared error", pred, target)?;
    let scale = match reduction {
        Reduction::Mean => 1.0 / pred.len().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d * d;
        grad.push(2.0 * scale * d);
    }
    Ok((sum * scale, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// HR reconstruction loss: squared distance of every HR-decoder output
/// (of an HR input or of one of its LR variants) to the original HR image.
/// Row `i` of `recon` is compared with row `i` of `hr_targets`.
pub fn mse_hr(recon: &Tensor, hr_targets: &Tensor, reduction: Reduction) -> Result<f64> {
    Ok(squared_error_with_grad(recon, hr_targets, reduction)?.0)
}

/// LR reconstruction loss against the down-sampled reference standard of
/// the same source image.
pub fn mse_lr(recon: &Tensor, lr_standard_targets: &Tensor, reduction: Reduction) -> Result<f64> {
    Ok(squared_error_with_grad(recon, lr_standard_targets, reduction)?.0)
}

pub fn mse_joint(hr_loss: f64, lr_loss: f64, weights: &LossWeights) -> f64 {
    lr_loss + weights.lambda * hr_loss
}

pub fn reid_loss(ce: f64, trip: f64, weights: &LossWeights) -> f64 {
    ce + weights.gamma * trip
}

fn check_labels(labels: &[usize], rows: usize, classes: Option<usize>) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Argument(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(c) = classes {
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Argument(format!("label {bad} outside {c} classes")));
        }
    }
    Ok(())
}

/// Batch-mean negative log-softmax probability of the true class.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::Argument(format!("logits must be [N, C], got {:?}", logits.shape())));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    check_labels(labels, n, Some(c))?;
    let mut grad = logits.data().to_vec();
    let mut total = 0.0;
    for (row, &y) in grad.chunks_mut(c).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n as f64;
        }
        row[y] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// Cross-entropy summed over every classifier head (five per branch).
pub fn cross_entropy(head_logits: &[&Tensor], labels: &[usize]) -> Result<f64> {
    head_logits
        .iter()
        .map(|l| cross_entropy_with_grad(l, labels).map(|r| r.0))
        .sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One selected triplet with its hinge value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub value: f64,
}

/// Selects triplets from `feats` (`[N, D]`). Batch-hard keeps the farthest
/// positive and nearest negative per anchor, ties going to the lower index.
pub fn mine_triplets(feats: &Tensor, labels: &[usize], margin: f64, mining: Mining) -> Result<Vec<MinedTriplet>> {
    if feats.ndim() != 2 {
        return Err(Error::Argument(format!("features must be [N, D], got {:?}", feats.shape())));
    }
    let n = feats.dim(0);
    check_labels(labels, n, None)?;
    let ids: BTreeSet<usize> = labels.iter().copied().collect();
    if ids.len() < 2 {
        return Err(Error::Triplet(format!(
            "batch has {} identit{}, negatives need at least 2",
            ids.len(),
            if ids.len() == 1 { "y" } else { "ies" }
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(feats.row(i), feats.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut out = Vec::new();
    for a in 0..n {
        let positives = (0..n).filter(|&p| p != a && labels[p] == labels[a]);
        let negatives = (0..n).filter(|&q| labels[q] != labels[a]);
        match mining {
            Mining::BatchHard => {
                let mut hp: Option<usize> = None;
                for p in positives {
                    if hp.map_or(true, |b| dist[a * n + p] > dist[a * n + b]) {
                        hp = Some(p);
                    }
                }
                let Some(p) = hp else { continue };
                let mut hn: Option<usize> = None;
                for q in negatives {
                    if hn.map_or(true, |b| dist[a * n + q] < dist[a * n + b]) {
                        hn = Some(q);
                    }
                }
                let q = hn.expect("two identities guarantee a negative");
                out.push(MinedTriplet {
                    anchor: a,
                    positive: p,
                    negative: q,
                    value: (dist[a * n + p] - dist[a * n + q] + margin).max(0.0),
                });
            }
            Mining::Exhaustive => {
                let negs: Vec<usize> = negatives.collect();
                for p in positives {
                    for &q in &negs {
                        out.push(MinedTriplet {
                            anchor: a,
                            positive: p,
                            negative: q,
                            value: (dist[a * n + p] - dist[a * n + q] + margin).max(0.0),
                        });
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Triplet("no anchor has a positive in the batch".into()));
    }
    Ok(out)
}

/// Margin triplet loss over one sub-feature matrix.
pub fn triplet_with_grad(
    feats: &Tensor,
    labels: &[usize],
    margin: f64,
    mining: Mining,
    reduction: Reduction,
) -> Result<(f64, Tensor)> {
    let mined = mine_triplets(feats, labels, margin, mining)?;
    let scale = match reduction {
        Reduction::Mean => 1.0 / mined.len() as f64,
        Reduction::Sum => 1.0,
    };
    let d = feats.dim(1);
    let mut grad = vec![0.0; feats.len()];
    let mut total = 0.0;
    for t in &mined {
        total += t.value;
        if t.value <= 0.0 {
            continue;
        }
        let a = feats.row(t.anchor);
        for (other, sign) in [(t.positive, 1.0), (t.negative, -1.0)] {
            let o = feats.row(other);
            let dist = euclidean(a, o);
            if dist == 0.0 {
                continue;
            }
            for k in 0..d {
                let g = sign * scale * (a[k] - o[k]) / dist;
                grad[t.anchor * d + k] += g;
                grad[other * d + k] -= g;
            }
        }
    }
    Ok((total * scale, Tensor::new(feats.shape().to_vec(), grad)?))
}

/// Triplet loss summed over every sub-feature of both branches.
pub fn triplet(
    sub_features: &[&Tensor],
    labels: &[usize],
    weights: &LossWeights,
    mining: Mining,
    reduction: Reduction,
) -> Result<f64> {
    sub_features
        .iter()
        .map(|f| triplet_with_grad(f, labels, weights.margin, mining, reduction).map(|r| r.0))
        .sum()
}
