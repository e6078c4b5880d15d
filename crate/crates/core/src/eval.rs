//! Seed-quality evaluation: threshold sweep, dataset-level mIoU, and the
//! false-activation rate between confusable classes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{ActivationSet, Map2};
use crate::error::{Error, Result};
use crate::pacam::PacamSet;
use crate::tensor::Tensor;

/// Per-pixel class ids; `num_classes` (N) marks background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Reads a rank-2 tensor of integral values in `[0, num_classes]`.
    pub fn from_tensor(t: &Tensor, num_classes: usize) -> Result<Self> {
        let &[h, w] = t.shape() else {
            return Err(Error::Dimension(format!(
                "label map must be rank 2, got shape {:?}",
                t.shape()
            )));
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v >= 0.0 && v <= num_classes as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("label value {v} outside 0..={num_classes}")))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(h, w, labels)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
        .expect("label map shape is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Foreground localization maps of one image with their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMaps {
    pub class_order: Vec<usize>,
    pub maps: Vec<Map2>,
}

impl ForegroundMaps {
    pub fn from_activations(a: &ActivationSet) -> Self {
        let n = a.foreground.len();
        Self {
            class_order: a.class_order[..n].to_vec(),
            maps: a.foreground.clone(),
        }
    }

    /// Drops the `background_id` channel if present.
    pub fn from_pacam(p: &PacamSet, background_id: usize) -> Self {
        let (class_order, maps) = p
            .class_order
            .iter()
            .zip(&p.maps)
            .filter(|(&c, _)| c != background_id)
            .map(|(&c, m)| (c, m.clone()))
            .unzip();
        Self { class_order, maps }
    }
}

/// `t ∈ {0.05, 0.10, …, 0.95}`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) / 20.0).collect()
}

/// Pixel labels at threshold `t`: the argmax foreground class where its
/// value exceeds `t`, else background. Ties go to the earlier channel.
pub fn predict(maps: &ForegroundMaps, t: f64, height: usize, width: usize, background_id: usize) -> Result<Vec<usize>> {
    if maps.maps.len() != maps.class_order.len() {
        return Err(Error::Dimension("ragged foreground maps".into()));
    }
    if let Some(m) = maps.maps.iter().find(|m| m.height() != height || m.width() != width) {
        return Err(Error::Dimension(format!(
            "map {}x{} vs ground truth {height}x{width}",
            m.height(),
            m.width()
        )));
    }
    Ok((0..height * width)
        .map(|j| {
            let mut best = background_id;
            let mut best_v = f64::NEG_INFINITY;
            for (c, m) in maps.class_order.iter().zip(&maps.maps) {
                let v = m.data()[j];
                if v > best_v {
                    best_v = v;
                    best = *c;
                }
            }
            if best_v > t {
                best
            } else {
                background_id
            }
        })
        .collect())
}

/// Pixel counts indexed `[gt][pred]` over `classes + 1` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    labels: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(labels: usize) -> Self {
        Self {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.labels + pred] += 1;
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.labels + pred]
    }

    fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per label; `None` where the label is absent from both prediction and truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.labels)
            .map(|c| {
                let inter = self.get(c, c);
                let gt: u64 = (0..self.labels).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..self.labels).map(|g| self.get(g, c)).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Fraction of the ground-truth pixels of `a` and `b` that are labeled
    /// as the other class of the pair. `None` when neither class occurs.
    pub fn confuser_rate(&self, a: usize, b: usize) -> Option<f64> {
        let gt_a: u64 = (0..self.labels).map(|p| self.get(a, p)).sum();
        let gt_b: u64 = (0..self.labels).map(|p| self.get(b, p)).sum();
        let total = gt_a + gt_b;
        (total > 0).then(|| (self.get(a, b) + self.get(b, a)) as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedEval {
    pub curve: Vec<ThresholdPoint>,
    pub best_threshold: f64,
    pub best_miou: f64,
    /// Confusion matrix at the best threshold.
    pub confusion: Confusion,
}

impl SeedEval {
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.confusion.iou()
    }

    /// Pooled false-activation rate over `pairs` at the best threshold.
    pub fn confuser_rate(&self, pairs: &[(usize, usize)]) -> Option<f64> {
        let mut wrong = 0;
        let mut total = 0;
        for &(a, b) in pairs {
            wrong += self.confusion.get(a, b) + self.confusion.get(b, a);
            total += (0..self.confusion.labels)
                .map(|p| self.confusion.get(a, p) + self.confusion.get(b, p))
                .sum::<u64>();
        }
        (total > 0).then(|| wrong as f64 / total as f64)
    }
}

/// Sweeps `thresholds` and reports dataset-level mIoU over `num_classes`
/// foreground classes plus background. The best threshold is the first one
/// reaching the maximum.
pub fn evaluate_seed_miou(
    maps: &[ForegroundMaps],
    gt: &[LabelMap],
    thresholds: &[f64],
    num_classes: usize,
) -> Result<SeedEval> {
    if maps.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} map sets vs {} ground-truth masks",
            maps.len(),
            gt.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Domain("no thresholds to sweep".into()));
    }
    let labels = num_classes + 1;
    if let Some(c) = maps.iter().flat_map(|m| &m.class_order).find(|&&c| c >= num_classes) {
        return Err(Error::Dimension(format!("foreground class {c} out of range")));
    }
    let per_image: Vec<Vec<Confusion>> = maps
        .par_iter()
        .zip(gt)
        .map(|(m, g)| {
            thresholds
                .iter()
                .map(|&t| {
                    let pred = predict(m, t, g.height(), g.width(), num_classes)?;
                    let mut conf = Confusion::new(labels);
                    for (&gl, &pl) in g.labels().iter().zip(&pred) {
                        conf.add(gl, pl);
                    }
                    Ok(conf)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut totals = vec![Confusion::new(labels); thresholds.len()];
    for image in &per_image {
        for (acc, c) in totals.iter_mut().zip(image) {
            acc.merge(c);
        }
    }
    let curve: Vec<ThresholdPoint> = thresholds
        .iter()
        .zip(&totals)
        .map(|(&threshold, c)| ThresholdPoint {
            threshold,
            miou: c.miou(),
        })
        .collect();
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.miou > curve[best].miou {
            best = i;
        }
    }
    Ok(SeedEval {
        best_threshold: curve[best].threshold,
        best_miou: curve[best].miou,
        confusion: totals.swap_remove(best),
        curve,
    })
}
