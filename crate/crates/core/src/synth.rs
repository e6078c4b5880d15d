//! Synthetic segmentation benchmark with controlled intra-class variation.
//!
//! Every class owns `attributes_per_class` unit archetypes. Attribute 0 is
//! the direction the emitted classifier row points along; the remaining
//! attributes share only `attribute_cosine` with it, so the classifier
//! under-activates them. Objects are axis-aligned blobs of a single
//! attribute, background pixels follow one background archetype, and every
//! pixel receives isotropic Gaussian noise.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cam::{ClassifierWeights, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::LabelMap;
use crate::npy;
use crate::tensor::LabelVector;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Class `b` borrows the archetypes of class `a` at cosine `cosine` and is
/// added to images containing `a` with probability `probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfuserPair {
    pub a: usize,
    pub b: usize,
    pub probability: f64,
    #[serde(default = "default_confuser_cosine")]
    pub cosine: f64,
}

fn default_confuser_cosine() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub attributes_per_class: usize,
    pub confuser_pairs: Vec<ConfuserPair>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Cosine between attribute `k >= 1` and attribute 0 of the same class.
    pub attribute_cosine: f64,
    /// Cosine between the background archetype and every classifier row.
    pub background_cosine: f64,
    pub max_classes_per_image: usize,
    pub max_instances_per_class: usize,
    /// Blob side lengths are drawn uniformly from `blob_min..=blob_max`.
    pub blob_min: usize,
    pub blob_max: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            images: 200,
            height: 32,
            width: 32,
            depth: 16,
            classes: 4,
            attributes_per_class: 2,
            confuser_pairs: vec![ConfuserPair {
                a: 0,
                b: 1,
                probability: 0.7,
                cosine: 0.6,
            }],
            noise_sigma: 0.125,
            seed: 7,
            attribute_cosine: 0.1,
            background_cosine: -0.3,
            max_classes_per_image: 2,
            max_instances_per_class: 1,
            blob_min: 6,
            blob_max: 14,
        }
    }
}

impl DatasetSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Number of orthonormal directions the archetype construction consumes.
    pub fn basis_size(&self) -> usize {
        self.classes * self.attributes_per_class + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.images == 0 || self.height == 0 || self.width == 0 || self.depth == 0 {
            return bad("images, height, width and depth must be >= 1".into());
        }
        if self.classes == 0 || self.attributes_per_class == 0 {
            return bad("classes and attributes_per_class must be >= 1".into());
        }
        if self.basis_size() > self.depth {
            return bad(format!(
                "depth {} too small for {} archetype directions",
                self.depth,
                self.basis_size()
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.attribute_cosine) {
            return bad(format!("attribute_cosine {} outside [0, 1)", self.attribute_cosine));
        }
        if !(self.background_cosine > -1.0 && self.background_cosine < 1.0) {
            return bad(format!("background_cosine {} outside (-1, 1)", self.background_cosine));
        }
        if self.max_classes_per_image == 0 || self.max_instances_per_class == 0 {
            return bad("max_classes_per_image and max_instances_per_class must be >= 1".into());
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max || self.blob_max > self.height.min(self.width) {
            return bad(format!(
                "blob sizes {}..={} do not fit a {}x{} image",
                self.blob_min, self.blob_max, self.height, self.width
            ));
        }
        let mut used = BTreeSet::new();
        for p in &self.confuser_pairs {
            if p.a >= self.classes || p.b >= self.classes || p.a == p.b {
                return bad(format!("confuser pair ({}, {}) is invalid", p.a, p.b));
            }
            if !used.insert(p.a) || !used.insert(p.b) {
                return bad("a class may belong to at most one confuser pair".into());
            }
            if !(0.0..=1.0).contains(&p.probability) {
                return bad(format!("confuser probability {} outside [0, 1]", p.probability));
            }
            if !(p.cosine > -1.0 && p.cosine < 1.0) {
                return bad(format!("confuser cosine {} outside (-1, 1)", p.cosine));
            }
        }
        Ok(())
    }
}

/// Unit archetype directions and the classifier derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Archetypes {
    /// `attributes[n][k]`.
    pub attributes: Vec<Vec<Vec<f64>>>,
    pub background: Vec<f64>,
    pub classifier: ClassifierWeights,
}

fn gram_schmidt(rng: &mut ChaCha8Rng, depth: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..depth).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn combine(terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = vec![0.0; terms[0].1.len()];
    for (c, v) in terms {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += c * x);
    }
    out
}

pub fn build_archetypes(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Archetypes> {
    spec.validate()?;
    let mut basis = gram_schmidt(rng, spec.depth, spec.basis_size()).into_iter();
    let mut take = || basis.next().expect("basis sized by validate");
    let partner = |n: usize| spec.confuser_pairs.iter().find(|p| p.b == n);
    let mut attributes: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.classes];
    // Sources first so that every confuser can borrow from a finished class.
    let mut order: Vec<usize> = (0..spec.classes).filter(|&n| partner(n).is_none()).collect();
    order.extend((0..spec.classes).filter(|&n| partner(n).is_some()));
    for n in order {
        attributes[n] = match partner(n) {
            None => {
                let a0 = take();
                let s = (1.0 - spec.attribute_cosine.powi(2)).sqrt();
                let mut attrs = vec![a0.clone()];
                for _ in 1..spec.attributes_per_class {
                    let e = take();
                    attrs.push(combine(&[(spec.attribute_cosine, &a0), (s, &e)]));
                }
                attrs
            }
            Some(p) => {
                let s = (1.0 - p.cosine * p.cosine).sqrt();
                (0..spec.attributes_per_class)
                    .map(|k| {
                        let e = take();
                        combine(&[(p.cosine, &attributes[p.a][k]), (s, &e)])
                    })
                    .collect()
            }
        };
    }
    // Background with the requested cosine to every attribute-0 row:
    // orthonormalize the rows (A = R Q) and solve R c = cos·1 by forward substitution.
    let rows: Vec<&Vec<f64>> = attributes.iter().map(|a| &a[0]).collect();
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut r = vec![vec![0.0; spec.classes]; spec.classes];
    for (i, row) in rows.iter().enumerate() {
        let mut v = (*row).clone();
        for (m, qm) in q.iter().enumerate() {
            let proj: f64 = row.iter().zip(qm).map(|(x, y)| x * y).sum();
            r[i][m] = proj;
            v.iter_mut().zip(qm).for_each(|(x, y)| *x -= proj * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        r[i][i] = n;
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut c = vec![0.0; spec.classes];
    for i in 0..spec.classes {
        let acc: f64 = (0..i).map(|m| r[i][m] * c[m]).sum();
        c[i] = (spec.background_cosine - acc) / r[i][i];
    }
    let inside: f64 = c.iter().map(|x| x * x).sum();
    if inside >= 1.0 {
        return Err(Error::Config(format!(
            "background_cosine {} is not realizable for {} classes",
            spec.background_cosine, spec.classes
        )));
    }
    let mut background = take();
    background.iter_mut().for_each(|x| *x *= (1.0 - inside).sqrt());
    for (cm, qm) in c.iter().zip(&q) {
        background.iter_mut().zip(qm).for_each(|(x, y)| *x += cm * y);
    }
    let classifier = ClassifierWeights::new(spec.classes, spec.depth, rows.iter().flat_map(|r| r.iter().copied()).collect())?;
    Ok(Archetypes {
        attributes,
        background,
        classifier,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub features: FeatureMap,
    pub labels: LabelVector,
    pub gt: LabelMap,
}

/// In-memory dataset: images plus the shared classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub classifier: ClassifierWeights,
    pub images: Vec<ImageRecord>,
    /// Pairs of confusable classes used for false-activation reporting.
    pub confuser_pairs: Vec<(usize, usize)>,
    pub spec: Option<DatasetSpec>,
}

impl Dataset {
    pub fn background_id(&self) -> usize {
        self.classes
    }

    pub fn depth(&self) -> usize {
        self.classifier.depth()
    }
}

struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &DatasetSpec, taken: &[Rect], min_only: bool, tries: usize) -> Option<Rect> {
    for _ in 0..tries {
        let (h, w) = if min_only {
            (spec.blob_min, spec.blob_min)
        } else {
            (
                rng.random_range(spec.blob_min..=spec.blob_max),
                rng.random_range(spec.blob_min..=spec.blob_max),
            )
        };
        let r = Rect {
            top: rng.random_range(0..=spec.height - h),
            left: rng.random_range(0..=spec.width - w),
            height: h,
            width: w,
        };
        if taken.iter().all(|t| !t.overlaps(&r)) {
            return Some(r);
        }
    }
    None
}

fn sample_classes(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Vec<usize> {
    let count = rng.random_range(1..=spec.max_classes_per_image.min(spec.classes));
    let mut all: Vec<usize> = (0..spec.classes).collect();
    all.shuffle(rng);
    let mut chosen: BTreeSet<usize> = all[..count].iter().copied().collect();
    for p in &spec.confuser_pairs {
        if chosen.contains(&p.a) && !chosen.contains(&p.b) && rng.random::<f64>() < p.probability {
            chosen.insert(p.b);
        }
    }
    chosen.into_iter().collect()
}

fn generate_image(rng: &mut ChaCha8Rng, spec: &DatasetSpec, arch: &Archetypes, index: usize) -> Result<ImageRecord> {
    let classes = sample_classes(rng, spec);
    let (h, w, d) = (spec.height, spec.width, spec.depth);
    let bg = spec.classes;
    let mut labels = vec![bg; h * w];
    let mut attribute = vec![0usize; h * w];
    let mut taken: Vec<Rect> = Vec::new();
    for &n in &classes {
        let instances = rng.random_range(1..=spec.max_instances_per_class);
        for i in 0..instances {
            let rect = match place(rng, spec, &taken, false, 100) {
                Some(r) => r,
                None if i == 0 => place(rng, spec, &taken, true, 1000).ok_or_else(|| {
                    Error::Config(format!("image {index}: no room left for class {n}"))
                })?,
                None => continue,
            };
            let attr = rng.random_range(0..spec.attributes_per_class);
            for y in rect.top..rect.top + rect.height {
                for x in rect.left..rect.left + rect.width {
                    labels[y * w + x] = n;
                    attribute[y * w + x] = attr;
                }
            }
            taken.push(rect);
        }
    }
    let mut data = Vec::with_capacity(h * w * d);
    for (&l, &a) in labels.iter().zip(&attribute) {
        let base = if l == bg { &arch.background } else { &arch.attributes[l][a] };
        for &v in base {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(v + spec.noise_sigma * noise);
        }
    }
    Ok(ImageRecord {
        id: format!("img_{index:04}"),
        features: FeatureMap::new(h, w, d, data)?,
        labels: LabelVector::from_present(spec.classes, &classes)?,
        gt: LabelMap::new(h, w, labels)?,
    })
}

/// Builds the dataset in memory. Deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let arch = build_archetypes(spec, &mut rng)?;
    let images = (0..spec.images)
        .map(|i| generate_image(&mut rng, spec, &arch, i))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        classes: spec.classes,
        classifier: arch.classifier,
        images,
        confuser_pairs: spec.confuser_pairs.iter().map(|p| (p.a, p.b)).collect(),
        spec: Some(spec.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: String,
    pub features: String,
    pub labels: LabelVector,
    pub gt_mask: String,
}

/// JSON index of a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub background_id: usize,
    pub classifier: String,
    #[serde(default)]
    pub confuser_pairs: Vec<(usize, usize)>,
    pub images: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
}

/// Rejects absolute paths and any `..` component.
pub(crate) fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    if p.is_empty() || path.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(Error::Format(format!("path {p:?} must be relative and stay inside the directory")));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", self.format_version)));
        }
        if self.height == 0 || self.width == 0 || self.depth == 0 || self.classes == 0 {
            return Err(Error::Format("manifest dimensions must be >= 1".into()));
        }
        if self.background_id != self.classes {
            return Err(Error::Format(format!(
                "background id {} must equal the class count {}",
                self.background_id, self.classes
            )));
        }
        if self.images.is_empty() {
            return Err(Error::Format("manifest lists no images".into()));
        }
        check_relative(&self.classifier)?;
        for &(a, b) in &self.confuser_pairs {
            if a >= self.classes || b >= self.classes || a == b {
                return Err(Error::Format(format!("confuser pair ({a}, {b}) is invalid")));
            }
        }
        let mut ids = BTreeSet::new();
        for img in &self.images {
            check_relative(&img.features)?;
            check_relative(&img.gt_mask)?;
            if !ids.insert(&img.id) {
                return Err(Error::Format(format!("duplicate image id {:?}", img.id)));
            }
            if img.labels.len() != self.classes {
                return Err(Error::Format(format!(
                    "image {:?} has {} labels for {} classes",
                    img.id,
                    img.labels.len(),
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Writes arrays and `manifest.json` under `dir`; returns the manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        for sub in ["features", "gt"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        npy::save_tensor(&self.classifier.to_tensor(), dir.join("classifier.npy"))?;
        let first = self.images.first().ok_or_else(|| Error::Degenerate("dataset has no images".into()))?;
        let mut images = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let features = format!("features/{}.npy", img.id);
            let gt_mask = format!("gt/{}.npy", img.id);
            npy::save_tensor(&img.features.to_tensor(), dir.join(&features))?;
            npy::save_tensor(&img.gt.to_tensor(), dir.join(&gt_mask))?;
            images.push(ManifestImage {
                id: img.id.clone(),
                features,
                labels: img.labels.clone(),
                gt_mask,
            });
        }
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            height: first.features.height(),
            width: first.features.width(),
            depth: self.depth(),
            classes: self.classes,
            background_id: self.background_id(),
            classifier: "classifier.npy".into(),
            confuser_pairs: self.confuser_pairs.clone(),
            images,
            spec: self.spec.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    /// Loads a dataset from its manifest file.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = DatasetManifest::from_json_str(&text)?;
        let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let classifier = ClassifierWeights::from_tensor(&npy::load_tensor(root.join(&m.classifier))?)?;
        if classifier.classes() != m.classes || classifier.depth() != m.depth {
            return Err(Error::Format(format!(
                "classifier is {}x{}, manifest says {}x{}",
                classifier.classes(),
                classifier.depth(),
                m.classes,
                m.depth
            )));
        }
        let images = m
            .images
            .iter()
            .map(|img| {
                let features = FeatureMap::from_tensor(&npy::load_tensor(root.join(&img.features))?)?;
                let gt = LabelMap::from_tensor(&npy::load_tensor(root.join(&img.gt_mask))?, m.classes)?;
                if (features.height(), features.width(), features.depth()) != (m.height, m.width, m.depth)
                    || (gt.height(), gt.width()) != (m.height, m.width)
                {
                    return Err(Error::Format(format!("image {:?} does not match the manifest shape", img.id)));
                }
                Ok(ImageRecord {
                    id: img.id.clone(),
                    features,
                    labels: img.labels.clone(),
                    gt,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            classes: m.classes,
            classifier,
            images,
            confuser_pairs: m.confuser_pairs,
            spec: m.spec,
        })
    }
}

/// Generates the dataset and writes it under `out_dir`.
pub fn gen_synthetic(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    generate(spec)?.save(out_dir)
}
