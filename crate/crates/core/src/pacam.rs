//! Prototype-aware CAMs, the consistency loss, the unified objective, and the
//! analytic gradient of the consistency loss with respect to the features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::{dot, ActivationSet, FeatureMap, Map2};
use crate::context::{norm, SoftNeighbors};
use crate::error::{Error, Result};

/// How per-prototype cosine maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// `(1/K) Σ_i cos(f(j), p_i)`.
    Uniform,
    /// `Σ_i w_i cos(f(j), p_i) / Σ_i w_i`.
    #[default]
    Weighted,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::Uniform => "uniform",
            AggregationMode::Weighted => "weighted",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AggregationMode::Uniform),
            "weighted" => Ok(AggregationMode::Weighted),
            other => Err(Error::Config(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

/// Pixel reduction used by the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelReduction {
    #[default]
    Mean,
    Sum,
}

fn aggregation_weights(neighbors: &SoftNeighbors, mode: AggregationMode) -> Result<Vec<f64>> {
    let k = neighbors.len();
    if k == 0 {
        return Err(Error::Degenerate("PACAM needs at least one neighbor".into()));
    }
    match mode {
        AggregationMode::Uniform => Ok(vec![1.0 / k as f64; k]),
        AggregationMode::Weighted => {
            if neighbors.scores.len() != k {
                return Err(Error::Dimension("neighbor scores and prototypes disagree".into()));
            }
            let total: f64 = neighbors.scores.iter().sum();
            if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || neighbors.scores.iter().any(|&w| w < 0.0) {
                return Err(Error::Domain("weighted aggregation needs positive scores".into()));
            }
            Ok(neighbors.scores.iter().map(|w| w / total).collect())
        }
    }
}

fn check_neighbor_depth(f: &FeatureMap, neighbors: &SoftNeighbors) -> Result<()> {
    if let Some(p) = neighbors.prototypes.iter().find(|p| p.len() != f.depth()) {
        return Err(Error::Dimension(format!(
            "prototype depth {} vs feature depth {}",
            p.len(),
            f.depth()
        )));
    }
    Ok(())
}

/// Pre-activation aggregate `s(j)` for every pixel, using
/// `Σ_i a_i cos(f, p_i) = f·(Σ_i a_i p_i/‖p_i‖) / ‖f‖`.
fn aggregate_scores(f: &FeatureMap, neighbors: &SoftNeighbors, weights: &[f64]) -> Vec<f64> {
    let mut direction = vec![0.0; f.depth()];
    for (p, a) in neighbors.prototypes.iter().zip(weights) {
        let n = norm(p);
        if n > 0.0 {
            for (d, v) in direction.iter_mut().zip(p) {
                *d += a * v / n;
            }
        }
    }
    f.iter_pixels()
        .map(|px| {
            let n = norm(px);
            if n > 0.0 {
                dot(px, &direction) / n
            } else {
                0.0
            }
        })
        .collect()
}

/// PACAM for one class: ReLU of the aggregated pixel/prototype cosine.
/// Zero-norm pixels or prototypes contribute a cosine of 0.
pub fn pacam_map(f: &FeatureMap, neighbors: &SoftNeighbors, mode: AggregationMode) -> Result<Map2> {
    let weights = aggregation_weights(neighbors, mode)?;
    check_neighbor_depth(f, neighbors)?;
    let data = aggregate_scores(f, neighbors, &weights)
        .into_iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    Map2::new(f.height(), f.width(), data)
}

/// PACAM channels aligned with a class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PacamSet {
    pub maps: Vec<Map2>,
    pub class_order: Vec<usize>,
    pub mode: AggregationMode,
}

impl PacamSet {
    pub fn map_for(&self, class: usize) -> Option<&Map2> {
        let idx = self.class_order.iter().position(|&c| c == class)?;
        self.maps.get(idx)
    }
}

/// Builds one PACAM channel per neighbor set, in the given order.
pub fn pacam_set(
    f: &FeatureMap,
    neighbors: &[SoftNeighbors],
    mode: AggregationMode,
) -> Result<PacamSet> {
    Ok(PacamSet {
        maps: neighbors
            .iter()
            .map(|n| pacam_map(f, n, mode))
            .collect::<Result<_>>()?,
        class_order: neighbors.iter().map(|n| n.class_id).collect(),
        mode,
    })
}

fn pixel_l1(a: &Map2, b: &Map2, reduction: PixelReduction) -> f64 {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    match reduction {
        PixelReduction::Mean => sum / a.len() as f64,
        PixelReduction::Sum => sum,
    }
}

/// Consistency loss between the classifier CAMs and the PACAMs: the L1
/// distance per channel averaged over the channels of `pacam`. Every PACAM
/// channel must have a matching channel in `cams`.
pub fn self_loss(cams: &ActivationSet, pacam: &PacamSet, reduction: PixelReduction) -> Result<f64> {
    if pacam.maps.len() != pacam.class_order.len() || pacam.maps.is_empty() {
        return Err(Error::Dimension("PACAM set has no channels or a ragged class order".into()));
    }
    let mut total = 0.0;
    for (class, tilde) in pacam.class_order.iter().zip(&pacam.maps) {
        let m = cams
            .map_for(*class)
            .ok_or_else(|| Error::Dimension(format!("class {class} missing from the CAM set")))?;
        if !m.same_shape(tilde) {
            return Err(Error::Dimension(format!("class {class} maps differ in shape")));
        }
        total += pixel_l1(m, tilde, reduction);
    }
    Ok(total / pacam.maps.len() as f64)
}

/// Same loss on bare map lists.
pub fn self_loss_maps(cams: &[Map2], pacams: &[Map2], reduction: PixelReduction) -> Result<f64> {
    if cams.len() != pacams.len() || cams.is_empty() {
        return Err(Error::Dimension(format!(
            "{} CAM channels vs {} PACAM channels",
            cams.len(),
            pacams.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in cams.iter().zip(pacams) {
        if !a.same_shape(b) {
            return Err(Error::Dimension("channel shapes differ".into()));
        }
        total += pixel_l1(a, b, reduction);
    }
    Ok(total / cams.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    #[serde(rename = "self")]
    pub self_loss: f64,
    pub total: f64,
    pub lambda_bce: f64,
    pub lambda_self: f64,
}

pub fn total_loss(bce: f64, self_loss: f64, lambda_bce: f64, lambda_self: f64) -> Result<LossReport> {
    if lambda_bce < 0.0 || lambda_self < 0.0 {
        return Err(Error::Domain("loss coefficients must be non-negative".into()));
    }
    Ok(LossReport {
        bce,
        self_loss,
        total: lambda_bce * bce + lambda_self * self_loss,
        lambda_bce,
        lambda_self,
    })
}

/// `∂cos(f, p)/∂f = p/(‖f‖‖p‖) − cos(f, p)·f/‖f‖²`, accumulated into `out`
/// with factor `scale`.
pub fn add_cosine_gradient(f: &[f64], p: &[f64], scale: f64, out: &mut [f64]) {
    let nf = norm(f);
    let np = norm(p);
    if nf == 0.0 || np == 0.0 {
        return;
    }
    let c = dot(f, p) / (nf * np);
    let a = scale / (nf * np);
    let b = scale * c / (nf * nf);
    for ((o, &fi), &pi) in out.iter_mut().zip(f).zip(p) {
        *o += a * pi - b * fi;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic gradient of the consistency loss with respect to `f`.
///
/// The classifier CAMs, the prototypes and their scores are held constant.
/// `neighbors[c]` produces PACAM channel `c`, compared against the CAM of
/// class `neighbors[c].class_id`. Uses `sign(0) = 0` and `ReLU'(0) = 0`.
pub fn grad_self_wrt_features(
    f: &FeatureMap,
    neighbors: &[SoftNeighbors],
    targets: &ActivationSet,
    mode: AggregationMode,
    reduction: PixelReduction,
) -> Result<FeatureMap> {
    if neighbors.is_empty() {
        return Err(Error::Degenerate("no PACAM channels".into()));
    }
    if let Some(j) = f.iter_pixels().position(|px| norm(px) == 0.0) {
        return Err(Error::Degenerate(format!("pixel {j} has a zero-norm feature")));
    }
    let channels = neighbors.len() as f64;
    let per_pixel = match reduction {
        PixelReduction::Mean => 1.0 / f.pixels() as f64,
        PixelReduction::Sum => 1.0,
    };
    let mut grad = vec![0.0; f.data().len()];
    for n in neighbors {
        check_neighbor_depth(f, n)?;
        let weights = aggregation_weights(n, mode)?;
        let target = targets.map_for(n.class_id).ok_or_else(|| {
            Error::Dimension(format!("class {} missing from the CAM set", n.class_id))
        })?;
        if target.height() != f.height() || target.width() != f.width() {
            return Err(Error::Dimension("target map and features differ in shape".into()));
        }
        let scores = aggregate_scores(f, n, &weights);
        for (j, (&s, &m)) in scores.iter().zip(target.data()).enumerate() {
            if s <= 0.0 {
                continue;
            }
            let upstream = sign(s.min(1.0) - m) * per_pixel / channels;
            if upstream == 0.0 {
                continue;
            }
            let px = f.pixel(j);
            let out = &mut grad[j * f.depth()..(j + 1) * f.depth()];
            for (p, &a) in n.prototypes.iter().zip(&weights) {
                add_cosine_gradient(px, p, upstream * a, out);
            }
        }
    }
    FeatureMap::new(f.height(), f.width(), f.depth(), grad)
}

/// Consistency loss evaluated straight from features (the forward path the
/// gradient differentiates).
pub fn self_loss_from_features(
    f: &FeatureMap,
    neighbors: &[SoftNeighbors],
    targets: &ActivationSet,
    mode: AggregationMode,
    reduction: PixelReduction,
) -> Result<f64> {
    let set = pacam_set(f, neighbors, mode)?;
    self_loss(targets, &set, reduction)
}

/// Closed-form maximizer `s*_i = w_i / Σ_k w_k` of the positiveness-weighted
/// similarity objective.
pub fn claim1_optimum(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::Degenerate("empty weight vector".into()));
    }
    if let Some(bad) = w.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("weights must be positive, got {bad}")));
    }
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}
