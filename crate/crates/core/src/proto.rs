//! Instance prototypes, per-class FIFO support banks, and k-means context
//! prototypes.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::{FeatureMap, Map2};
use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig};
use crate::npy;
use crate::tensor::Tensor;

/// A feature-space vector tagged with the class it summarizes. The
/// background class uses the id `N` (one past the last foreground class).
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vec: Vec<f64>,
}

impl Prototype {
    pub fn new(class_id: usize, vec: Vec<f64>) -> Self {
        Self { class_id, vec }
    }

    pub fn depth(&self) -> usize {
        self.vec.len()
    }
}

/// Projection head applied pixel-wise before prototyping.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Projection {
    #[default]
    Identity,
    /// Row-major `D×D'` matrix; `z = f·P`.
    Matrix {
        input: usize,
        output: usize,
        data: Vec<f64>,
    },
}

impl Projection {
    pub fn matrix(input: usize, output: usize, data: Vec<f64>) -> Result<Self> {
        if input == 0 || output == 0 || data.len() != input * output {
            return Err(Error::Dimension(format!(
                "projection {input}x{output} needs {} values, got {}",
                input * output,
                data.len()
            )));
        }
        Ok(Projection::Matrix {
            input,
            output,
            data,
        })
    }

    pub fn apply_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Projection::Identity => Ok(v.to_vec()),
            Projection::Matrix {
                input,
                output,
                data,
            } => {
                if v.len() != *input {
                    return Err(Error::Dimension(format!(
                        "projection expects depth {input}, got {}",
                        v.len()
                    )));
                }
                let mut out = vec![0.0; *output];
                for (d, &x) in v.iter().enumerate() {
                    let row = &data[d * output..(d + 1) * output];
                    for (o, &p) in out.iter_mut().zip(row) {
                        *o += x * p;
                    }
                }
                Ok(out)
            }
        }
    }
}

pub fn project_features(f: &FeatureMap, projection: &Projection) -> Result<FeatureMap> {
    match projection {
        Projection::Identity => Ok(f.clone()),
        Projection::Matrix { output, .. } => {
            let mut data = Vec::with_capacity(f.pixels() * output);
            for px in f.iter_pixels() {
                data.extend(projection.apply_vec(px)?);
            }
            FeatureMap::new(f.height(), f.width(), *output, data)
        }
    }
}

/// Boolean `H×W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension("mask size does not match extents".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// `P_n(x, y) = 1` iff `M_n(x, y) > tau`.
pub fn binary_mask(map: &Map2, tau: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau {tau} outside [0, 1)")));
    }
    BinaryMask::new(
        map.height(),
        map.width(),
        map.data().iter().map(|&v| v > tau).collect(),
    )
}

/// Masked average pooling of `z` over `mask`.
///
/// An empty mask falls back to the single most activated pixel of
/// `activation` (first in row-major order on ties). `None` means the
/// activation map is identically zero and the mask is empty.
pub fn instance_prototype(
    z: &FeatureMap,
    mask: &BinaryMask,
    activation: &Map2,
    class_id: usize,
) -> Result<Option<Prototype>> {
    let (h, w) = (z.height(), z.width());
    if mask.height != h || mask.width != w || activation.height() != h || activation.width() != w {
        return Err(Error::Dimension(format!(
            "features {h}x{w}, mask {}x{}, activation {}x{}",
            mask.height,
            mask.width,
            activation.height(),
            activation.width()
        )));
    }
    let selected = mask.count();
    if selected > 0 {
        let mut acc = vec![0.0; z.depth()];
        for (px, _) in z.iter_pixels().zip(&mask.bits).filter(|(_, &b)| b) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= selected as f64);
        return Ok(Some(Prototype::new(class_id, acc)));
    }
    let mut best = None;
    let mut best_v = 0.0;
    for (j, &v) in activation.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = Some(j);
        }
    }
    Ok(best.map(|j| Prototype::new(class_id, z.pixel(j).to_vec())))
}

/// Fixed-capacity FIFO of instance prototypes, one queue per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportBank {
    capacity: usize,
    depth: usize,
    queues: BTreeMap<usize, VecDeque<Vec<f64>>>,
    pushes: BTreeMap<usize, u64>,
}

impl SupportBank {
    pub fn new(capacity: usize, depth: usize) -> Result<Self> {
        if capacity == 0 || depth == 0 {
            return Err(Error::Domain("support bank needs capacity >= 1 and depth >= 1".into()));
        }
        Ok(Self {
            capacity,
            depth,
            queues: BTreeMap::new(),
            pushes: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn push(&mut self, p: &Prototype) -> Result<()> {
        if p.depth() != self.depth {
            return Err(Error::Dimension(format!(
                "prototype depth {} into bank of depth {}",
                p.depth(),
                self.depth
            )));
        }
        if p.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype".into()));
        }
        let q = self.queues.entry(p.class_id).or_default();
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(p.vec.clone());
        *self.pushes.entry(p.class_id).or_default() += 1;
        Ok(())
    }

    pub fn len(&self, class_id: usize) -> usize {
        self.queues.get(&class_id).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    /// Total pushes ever made for `class_id`, evicted or not.
    pub fn pushes(&self, class_id: usize) -> u64 {
        self.pushes.get(&class_id).copied().unwrap_or(0)
    }

    /// Oldest-first snapshot of one class queue.
    pub fn entries(&self, class_id: usize) -> Vec<Vec<f64>> {
        self.queues
            .get(&class_id)
            .map(|q| q.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.queues.keys().copied()
    }
}

/// Free-function form of [`SupportBank::push`].
pub fn bank_push(bank: &mut SupportBank, p: &Prototype) -> Result<()> {
    bank.push(p)
}

/// Context prototypes of one class: cluster means plus member counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCandidates {
    pub class_id: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub wcss: f64,
}

impl ClassCandidates {
    pub fn k(&self) -> usize {
        self.prototypes.len()
    }

    /// Index of the Euclidean-nearest context prototype, as k-means would assign it.
    pub fn nearest(&self, v: &[f64]) -> usize {
        kmeans::nearest(v, &self.prototypes)
    }
}

/// Clusters one class bank into at most `n_p` context prototypes.
pub fn cluster_bank(
    class_id: usize,
    entries: &[Vec<f64>],
    n_p: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClassCandidates> {
    if entries.is_empty() {
        return Err(Error::EmptyBank(class_id));
    }
    if n_p == 0 {
        return Err(Error::Domain("N_p must be >= 1".into()));
    }
    let cfg = KMeansConfig {
        restarts,
        ..KMeansConfig::new(n_p, seed)
    };
    let c = kmeans::fit(entries, &cfg)?;
    Ok(ClassCandidates {
        class_id,
        prototypes: c.centroids,
        counts: c.counts,
        wcss: c.wcss,
    })
}

/// Per-class context prototypes built at the start of an epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub classes: BTreeMap<usize, ClassCandidates>,
    /// Classes that had no bank entries when the set was built.
    pub skipped: Vec<usize>,
}

pub(crate) fn class_seed(seed: u64, class_id: usize) -> u64 {
    seed.wrapping_add((class_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs [`cluster_bank`] on every class in `bank` (plus any extra `classes`
/// the caller expects), skipping classes with empty banks.
pub fn candidate_set(
    bank: &SupportBank,
    classes: &[usize],
    n_p: usize,
    restarts: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let mut ids: Vec<usize> = bank.classes().chain(classes.iter().copied()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut set = CandidateSet::default();
    for id in ids {
        let entries = bank.entries(id);
        if entries.is_empty() {
            set.skipped.push(id);
            continue;
        }
        let c = cluster_bank(id, &entries, n_p, restarts, class_seed(seed, id))?;
        set.classes.insert(id, c);
    }
    Ok(set)
}

impl CandidateSet {
    pub fn get(&self, class_id: usize) -> Option<&ClassCandidates> {
        self.classes.get(&class_id)
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Writes one `[k, D]` array per class plus `index.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = CandidateIndex::default();
        for (id, c) in &self.classes {
            let depth = c.prototypes.first().map_or(0, Vec::len);
            let t = Tensor::new(vec![c.k(), depth], c.prototypes.concat())?;
            let file = format!("class_{id:03}.npy");
            npy::save_tensor(&t, dir.join(&file))?;
            index.classes.push(CandidateIndexEntry {
                class_id: *id,
                file,
                counts: c.counts.clone(),
                wcss: c.wcss,
            });
        }
        index.skipped = self.skipped.clone();
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index = CandidateIndex::from_json_str(&text)?;
        let mut set = CandidateSet {
            skipped: index.skipped,
            ..Default::default()
        };
        for entry in index.classes {
            let t = npy::load_tensor(dir.join(&entry.file))?;
            let &[k, d] = t.shape() else {
                return Err(Error::Format(format!("{} is not rank 2", entry.file)));
            };
            if k != entry.counts.len() {
                return Err(Error::Format(format!(
                    "{} holds {k} prototypes but index lists {} counts",
                    entry.file,
                    entry.counts.len()
                )));
            }
            let prototypes = t.data().chunks_exact(d).map(<[f64]>::to_vec).collect();
            set.classes.insert(
                entry.class_id,
                ClassCandidates {
                    class_id: entry.class_id,
                    prototypes,
                    counts: entry.counts,
                    wcss: entry.wcss,
                },
            );
        }
        Ok(set)
    }
}

/// JSON index written next to the per-class prototype arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateIndex {
    pub classes: Vec<CandidateIndexEntry>,
    #[serde(default)]
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateIndexEntry {
    pub class_id: usize,
    pub file: String,
    pub counts: Vec<usize>,
    pub wcss: f64,
}

impl CandidateIndex {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let index: Self = serde_json::from_str(text)?;
        for e in &index.classes {
            if e.file.contains('/') || e.file.contains('\\') || e.file.contains("..") {
                return Err(Error::Format(format!("index entry file {:?} escapes its directory", e.file)));
            }
        }
        Ok(index)
    }
}
