//! Classification head: GAP logits, BCE, class activation maps and the
//! background estimate.

use crate::error::{Error, Result};
use crate::tensor::{LabelVector, Tensor};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Dense `H×W×D` feature field of one image, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Dimension("feature map extents must be positive".into()));
        }
        if data.len() != height * width * depth {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{depth} feature map needs {} values, got {}",
                height * width * depth,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    /// Every pixel holds the same vector.
    pub fn constant(height: usize, width: usize, v: &[f64]) -> Result<Self> {
        let data = v.iter().copied().cycle().take(height * width * v.len()).collect();
        Self::new(height, width, v.len(), data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, d] => Self::new(h, w, d, t.data().to_vec()),
            other => Err(Error::Dimension(format!(
                "feature tensor must be rank 3 (H, W, D), got shape {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.depth], self.data.clone())
            .expect("feature map invariants imply a valid tensor")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, j: usize) -> &[f64] {
        &self.data[j * self.depth..(j + 1) * self.depth]
    }

    pub fn iter_pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.depth)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// One `H×W` real-valued map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_shape(&self, other: &Map2) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Foreground classifier weights, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    classes: usize,
    depth: usize,
    data: Vec<f64>,
}

impl ClassifierWeights {
    pub fn new(classes: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || depth == 0 {
            return Err(Error::Dimension("classifier needs N >= 1 and D >= 1".into()));
        }
        if data.len() != classes * depth {
            return Err(Error::Dimension(format!(
                "{classes}x{depth} classifier needs {} values, got {}",
                classes * depth,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Self {
            classes,
            depth,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[n, d] => Self::new(n, d, t.data().to_vec()),
            other => Err(Error::Dimension(format!(
                "classifier tensor must be rank 2 (N, D), got shape {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.classes, self.depth], self.data.clone())
            .expect("classifier invariants imply a valid tensor")
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.depth..(n + 1) * self.depth]
    }

    pub fn scaled_row(&self, n: usize, c: f64) -> Self {
        let mut data = self.data.clone();
        for v in &mut data[n * self.depth..(n + 1) * self.depth] {
            *v *= c;
        }
        Self { data, ..self.clone() }
    }
}

/// Foreground CAMs for the present classes plus the background map.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub foreground: Vec<Map2>,
    pub background: Map2,
    /// Present foreground class ids followed by the background id `N`.
    pub class_order: Vec<usize>,
}

impl ActivationSet {
    pub fn background_id(&self) -> usize {
        *self.class_order.last().expect("class order always ends with background")
    }

    /// Foreground maps then background, aligned with `class_order`.
    pub fn channels(&self) -> impl Iterator<Item = &Map2> {
        self.foreground.iter().chain(std::iter::once(&self.background))
    }

    pub fn map_for(&self, class: usize) -> Option<&Map2> {
        let idx = self.class_order.iter().position(|&c| c == class)?;
        self.channels().nth(idx)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_depth(f: &FeatureMap, w: &ClassifierWeights) -> Result<()> {
    if f.depth() != w.depth() {
        return Err(Error::Dimension(format!(
            "feature depth {} does not match classifier depth {}",
            f.depth(),
            w.depth()
        )));
    }
    Ok(())
}

/// Global-average-pooled logits `ŷ_n = mean_j w_n·f(j)`.
pub fn compute_logits(f: &FeatureMap, w: &ClassifierWeights) -> Result<Vec<f64>> {
    check_depth(f, w)?;
    let mut pooled = vec![0.0; f.depth()];
    for px in f.iter_pixels() {
        for (acc, v) in pooled.iter_mut().zip(px) {
            *acc += v;
        }
    }
    let p = f.pixels() as f64;
    pooled.iter_mut().for_each(|v| *v /= p);
    Ok((0..w.classes()).map(|n| dot(w.row(n), &pooled)).collect())
}

/// Class-averaged binary cross-entropy with logits clamped to ±30.
pub fn bce_loss(logits: &[f64], y: &LabelVector) -> Result<f64> {
    if logits.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} logits vs {} labels",
            logits.len(),
            y.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Dimension("no classes".into()));
    }
    let total: f64 = logits
        .iter()
        .zip(y.as_slice())
        .map(|(&z, &t)| {
            // -[t ln σ(z) + (1-t) ln(1-σ(z))] = softplus(z) - t·z
            let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            z.max(0.0) + (-z.abs()).exp().ln_1p() - f64::from(t) * z
        })
        .sum();
    Ok(total / logits.len() as f64)
}

/// Max-normalized `ReLU(w_n·f)` for one class. A map whose activation is
/// identically zero stays zero.
pub fn class_activation(f: &FeatureMap, w: &ClassifierWeights, class: usize) -> Result<Map2> {
    check_depth(f, w)?;
    if class >= w.classes() {
        return Err(Error::Dimension(format!(
            "class {class} out of range for {} classes",
            w.classes()
        )));
    }
    let row = w.row(class);
    let mut data: Vec<f64> = f.iter_pixels().map(|px| dot(row, px).max(0.0)).collect();
    let peak = data.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        data.iter_mut().for_each(|v| *v /= peak);
    }
    Map2::new(f.height(), f.width(), data)
}

/// CAMs for every class marked present in `y`, in ascending class order.
pub fn compute_cam(f: &FeatureMap, w: &ClassifierWeights, y: &LabelVector) -> Result<Vec<Map2>> {
    check_depth(f, w)?;
    if y.len() != w.classes() {
        return Err(Error::Dimension(format!(
            "{} labels for {} classifier rows",
            y.len(),
            w.classes()
        )));
    }
    let present = y.present();
    if present.is_empty() {
        return Err(Error::Degenerate("no class present in label vector".into()));
    }
    present
        .into_iter()
        .map(|n| class_activation(f, w, n))
        .collect()
}

/// `M_b = 1 − max_n M_n`, pixel-wise.
pub fn background_map(foreground: &[Map2]) -> Result<Map2> {
    let first = foreground
        .first()
        .ok_or_else(|| Error::Degenerate("background needs at least one foreground map".into()))?;
    if let Some(bad) = foreground.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::Dimension(format!(
            "foreground maps disagree: {}x{} vs {}x{}",
            first.height(),
            first.width(),
            bad.height(),
            bad.width()
        )));
    }
    let data = (0..first.len())
        .map(|j| {
            let peak = foreground.iter().map(|m| m.data()[j]).fold(0.0, f64::max);
            1.0 - peak
        })
        .collect();
    Map2::new(first.height(), first.width(), data)
}

pub fn build_activation_set(
    f: &FeatureMap,
    w: &ClassifierWeights,
    y: &LabelVector,
) -> Result<ActivationSet> {
    let foreground = compute_cam(f, w, y)?;
    let background = background_map(&foreground)?;
    let mut class_order = y.present();
    class_order.push(w.classes());
    Ok(ActivationSet {
        foreground,
        background,
        class_order,
    })
}
