//! OOD discrimination and fit metrics.
//!
//! Scores follow the convention "higher means more likely out of
//! distribution", and labels mark OOD points with 1.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::weights::{PredictiveSummary, SampleOutputs};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreType {
    PredictiveEntropy,
    /// Confidence score `1 − max_c p̄_c`.
    #[default]
    OneMinusMaxProb,
    EpistemicVar,
}

impl ScoreType {
    pub fn score(self, s: &PredictiveSummary) -> f64 {
        match self {
            ScoreType::PredictiveEntropy => s.decomposition().2,
            ScoreType::OneMinusMaxProb => s.max_prob().map_or(f64::NAN, |p| 1.0 - p),
            ScoreType::EpistemicVar => s.epistemic_var(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub score_type: ScoreType,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, score_type: ScoreType) -> Result<Self> {
        ensure_dim("score/label count", scores.len(), labels.len())?;
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Input(format!("score {i} is NaN")));
        }
        Ok(ScoredLabels { scores, labels, score_type })
    }

    /// Scores in-distribution summaries (label 0) and OOD summaries (label 1).
    pub fn from_summaries(inside: &[PredictiveSummary], outside: &[PredictiveSummary], score_type: ScoreType) -> Result<Self> {
        let scores = inside.iter().chain(outside).map(|s| score_type.score(s)).collect();
        let labels = std::iter::repeat_n(false, inside.len())
            .chain(std::iter::repeat_n(true, outside.len()))
            .collect();
        Self::new(scores, labels, score_type)
    }

    fn counts(&self) -> (usize, usize) {
        let p = self.labels.iter().filter(|&&l| l).count();
        (p, self.labels.len() - p)
    }

    /// Indices sorted by descending score, grouped by equal score.
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups = Vec::new();
        let mut k = 0;
        while k < idx.len() {
            let s = self.scores[idx[k]];
            let (mut pos, mut neg) = (0, 0);
            while k < idx.len() && self.scores[idx[k]] == s {
                if self.labels[idx[k]] {
                    pos += 1;
                } else {
                    neg += 1;
                }
                k += 1;
            }
            groups.push((pos, neg));
        }
        groups
    }
}

/// Probability that a random OOD score exceeds a random in-distribution score,
/// ties counted ½. Computed from midranks (Mann-Whitney U).
pub fn auroc(sl: &ScoredLabels) -> Result<f64> {
    let (p, n) = sl.counts();
    if p == 0 || n == 0 {
        return Err(Error::Input("AUROC needs both OOD and in-distribution points".into()));
    }
    // Walking ascending groups: each positive beats all negatives below it and
    // ties with negatives in its own group.
    let mut groups = sl.descending_groups();
    groups.reverse();
    let mut neg_below = 0usize;
    let mut twice_u = 0u128;
    for (pos, neg) in groups {
        twice_u += (pos as u128) * (2 * neg_below as u128 + neg as u128);
        neg_below += neg;
    }
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Average precision `Σ_k (R_k − R_{k−1})·P_k` over descending distinct
/// score thresholds, tied scores entering together.
pub fn aucpr(sl: &ScoredLabels) -> Result<f64> {
    let (p, _) = sl.counts();
    if p == 0 {
        return Err(Error::Input("AUCPR needs at least one OOD point".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (pos, neg) in sl.descending_groups() {
        tp += pos;
        fp += neg;
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Average precision of a ranker that puts all `p` positives below all
/// `n − p` negatives: `(1/p) Σ_{k=1..p} k/(n − p + k)`.
pub fn worst_case_aucpr(p: usize, n: usize) -> f64 {
    (1..=p).map(|k| k as f64 / (n - p + k) as f64).sum::<f64>() / p as f64
}

/// Fraction of points whose predicted class (argmax, first index on ties)
/// equals the label.
pub fn accuracy(summaries: &[PredictiveSummary], labels: &[usize]) -> Result<f64> {
    ensure_dim("label count", summaries.len(), labels.len())?;
    if summaries.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let mut hits = 0usize;
    for (s, &y) in summaries.iter().zip(labels) {
        let PredictiveSummary::Classification { mean_probs, .. } = s else {
            return Err(Error::Input("accuracy needs classification predictions".into()));
        };
        if argmax(mean_probs) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / summaries.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean over points of `ln Σ_s w̃_{js} p(y_j | θ_s, x_j)`, where `weights[j]`
/// are the normalized weights of point `j`. A zero density gives `−∞`.
pub fn test_log_likelihood(outputs: &SampleOutputs, weights: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    ensure_dim("target count", outputs.n_points(), targets.len())?;
    ensure_dim("weight vector count", outputs.n_points(), weights.len())?;
    if targets.is_empty() {
        return Err(Error::Input("log-likelihood of an empty set".into()));
    }
    let mut total = 0.0;
    for (j, (w, &y)) in weights.iter().zip(targets).enumerate() {
        let l = outputs.log_predictive_density(j, w, y)?;
        if l == f64::NEG_INFINITY {
            log::warn!("zero predictive density at test point {j}");
        }
        total += l;
    }
    Ok(total / targets.len() as f64)
}

/// Metrics report written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    /// Mean negative test log-likelihood.
    pub nll: Option<f64>,
    pub auroc: Option<f64>,
    pub aucpr: Option<f64>,
    pub score_type: Option<ScoreType>,
    pub n_in: usize,
    pub n_out: usize,
}
