//! Context prototype-aware selection: positiveness scores, top-K soft
//! neighbors, the distribution-alignment shift, and OCSEM.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::dot;
use crate::error::{Error, Result};
use crate::proto::{ClassCandidates, Prototype};

/// Relevance function used inside the positiveness softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
    Cosine,
    #[default]
    Dot,
}

impl Metric {
    /// Larger means more relevant: distances are negated.
    pub fn logit(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            Metric::L2 => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => cosine(a, b),
            Metric::Dot => dot(a, b),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
            Metric::Dot => "dot",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let den = norm(a) * norm(b);
    if den > 0.0 {
        (dot(a, b) / den).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Softmax-normalized relevance of every candidate to one anchor, scaled by `1/γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositivenessVector {
    pub scores: Vec<f64>,
    pub gamma: f64,
}

impl PositivenessVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Every score multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self {
            scores: self.scores.iter().map(|s| s * c).collect(),
            gamma: self.gamma / c,
        }
    }
}

pub fn positiveness(
    anchor: &[f64],
    candidates: &[Vec<f64>],
    gamma: f64,
    metric: Metric,
) -> Result<PositivenessVector> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if let Some(c) = candidates.iter().find(|c| c.len() != anchor.len()) {
        return Err(Error::Dimension(format!(
            "anchor depth {} vs candidate depth {}",
            anchor.len(),
            c.len()
        )));
    }
    let logits: Vec<f64> = candidates.iter().map(|p| metric.logit(anchor, p)).collect();
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PositivenessVector {
        scores: exps.iter().map(|e| e / total / gamma).collect(),
        gamma,
    })
}

/// Selected context prototypes for one class and one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftNeighbors {
    pub class_id: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    /// Index of each selection in the candidate list.
    pub indices: Vec<usize>,
}

impl SoftNeighbors {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Every candidate with equal weight, as used without soft selection.
    pub fn all_uniform(candidates: &ClassCandidates) -> Self {
        let k = candidates.k();
        Self {
            class_id: candidates.class_id,
            prototypes: candidates.prototypes.clone(),
            scores: vec![1.0 / k as f64; k],
            indices: (0..k).collect(),
        }
    }

    /// A single prototype with unit weight.
    pub fn single(p: &Prototype) -> Self {
        Self {
            class_id: p.class_id,
            prototypes: vec![p.vec.clone()],
            scores: vec![1.0],
            indices: vec![0],
        }
    }
}

/// Keeps the `k` candidates whose score-weighted vectors are most
/// cosine-similar to the anchor. Ties go to the lower candidate index.
pub fn top_k_soft_neighbors(
    anchor: &Prototype,
    candidates: &ClassCandidates,
    scores: &PositivenessVector,
    k: usize,
) -> Result<SoftNeighbors> {
    if k == 0 {
        return Err(Error::Domain("K must be >= 1".into()));
    }
    if scores.len() != candidates.k() {
        return Err(Error::Dimension(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.k()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = candidates
        .prototypes
        .iter()
        .zip(&scores.scores)
        .enumerate()
        .map(|(i, (p, &w))| {
            let weighted: Vec<f64> = p.iter().map(|v| v * w).collect();
            (i, cosine(&weighted, &anchor.vec))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.min(candidates.k()));
    Ok(SoftNeighbors {
        class_id: candidates.class_id,
        prototypes: ranked.iter().map(|&(i, _)| candidates.prototypes[i].clone()).collect(),
        scores: ranked.iter().map(|&(i, _)| scores.scores[i]).collect(),
        indices: ranked.iter().map(|&(i, _)| i).collect(),
    })
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= vs.len() as f64);
    acc
}

fn check_lists(context: &[Vec<f64>], instances: &[Vec<f64>]) -> Result<usize> {
    let (Some(c0), Some(_)) = (context.first(), instances.first()) else {
        return Err(Error::Degenerate("shift needs nonempty context and instance lists".into()));
    };
    let d = c0.len();
    if context.iter().chain(instances).any(|v| v.len() != d) {
        return Err(Error::Dimension("shift inputs of unequal depth".into()));
    }
    Ok(d)
}

/// `δ = (1/(N_p·Q)) Σ_i Σ_q (p_i − P_q)`, evaluated as the double sum.
pub fn compute_shift(context: &[Vec<f64>], instances: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_lists(context, instances)?;
    let mut acc = vec![0.0; d];
    for p in context {
        for q in instances {
            for ((a, x), y) in acc.iter_mut().zip(p).zip(q) {
                *a += x - y;
            }
        }
    }
    let denom = (context.len() * instances.len()) as f64;
    acc.iter_mut().for_each(|a| *a /= denom);
    Ok(acc)
}

/// Closed form of [`compute_shift`]: `mean(context) − mean(instances)`.
pub fn compute_shift_separated(context: &[Vec<f64>], instances: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_lists(context, instances)?;
    Ok(mean(context)
        .into_iter()
        .zip(mean(instances))
        .map(|(a, b)| a - b)
        .collect())
}

pub fn apply_shift(instances: &[Vec<f64>], delta: &[f64]) -> Result<Vec<Vec<f64>>> {
    instances
        .iter()
        .map(|v| {
            if v.len() != delta.len() {
                return Err(Error::Dimension(format!(
                    "instance depth {} vs shift depth {}",
                    v.len(),
                    delta.len()
                )));
            }
            Ok(v.iter().zip(delta).map(|(x, d)| x + d).collect())
        })
        .collect()
}

/// Fraction of `(instance, paired prototype)` pairs whose paired prototype
/// is strictly the most cosine-similar of all context prototypes.
pub fn ocsem(context: &[Vec<f64>], instances: &[(Vec<f64>, usize)]) -> Result<f64> {
    if context.len() < 2 {
        return Err(Error::Degenerate("OCSEM needs at least two context prototypes".into()));
    }
    if instances.is_empty() {
        return Err(Error::Degenerate("OCSEM needs at least one instance".into()));
    }
    let mut hits = 0usize;
    for (v, i) in instances {
        let Some(paired) = context.get(*i) else {
            return Err(Error::Dimension(format!("paired index {i} out of range")));
        };
        let own = cosine(paired, v);
        let rival = context
            .iter()
            .enumerate()
            .filter(|(h, _)| h != i)
            .map(|(_, p)| cosine(p, v))
            .fold(f64::NEG_INFINITY, f64::max);
        if own > rival {
            hits += 1;
        }
    }
    Ok(hits as f64 / instances.len() as f64)
}

/// Mean paired cosine `J(δ) = mean cos(p_{i(q)}, P_q + δ)`.
pub fn alignment_objective(context: &[Vec<f64>], instances: &[(Vec<f64>, usize)], delta: &[f64]) -> f64 {
    let total: f64 = instances
        .iter()
        .map(|(v, i)| {
            let shifted: Vec<f64> = v.iter().zip(delta).map(|(x, d)| x + d).collect();
            cosine(&context[*i], &shifted)
        })
        .sum();
    total / instances.len() as f64
}
