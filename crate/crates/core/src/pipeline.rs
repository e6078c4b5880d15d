//! Epoch loop: CAMs, instance prototypes, support-bank updates, per-epoch
//! clustering, soft-neighbor selection, PACAMs and losses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{bce_loss, build_activation_set, compute_logits, ActivationSet, Map2};
use crate::context::{compute_shift, ocsem, positiveness, top_k_soft_neighbors, Metric, SoftNeighbors};
use crate::error::{Error, Result};
use crate::npy;
use crate::pacam::{pacam_map, self_loss, total_loss, AggregationMode, LossReport, PacamSet, PixelReduction};
use crate::proto::{binary_mask, candidate_set, instance_prototype, CandidateSet, ClassCandidates, Prototype, SupportBank};
use crate::synth::{check_relative, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    pub bank_capacity: usize,
    pub n_p: usize,
    pub k: usize,
    pub gamma: f64,
    pub metric: Metric,
    pub lambda_bce: f64,
    pub lambda_self: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregation_mode: AggregationMode,
    pub include_background: bool,
    pub seed: u64,
    pub pixel_reduction: PixelReduction,
    /// Keep only the top-K candidates; otherwise every candidate is used.
    pub top_k_enabled: bool,
    /// Shift anchors by the context/instance mean difference.
    pub alignment_enabled: bool,
    pub kmeans_restarts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            bank_capacity: 1000,
            n_p: 50,
            k: 20,
            gamma: 1.0,
            metric: Metric::Dot,
            lambda_bce: 1.0,
            lambda_self: 1.0,
            epochs: 3,
            batch_size: 100,
            aggregation_mode: AggregationMode::Weighted,
            include_background: true,
            seed: 0,
            pixel_reduction: PixelReduction::Mean,
            top_k_enabled: true,
            alignment_enabled: true,
            kmeans_restarts: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        if self.bank_capacity == 0 || self.n_p == 0 || self.k == 0 {
            return bad("bank_capacity, n_p and k must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.lambda_bce >= 0.0 && self.lambda_self >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.kmeans_restarts == 0 {
            return bad("epochs, batch_size and kmeans_restarts must be >= 1");
        }
        Ok(())
    }
}

/// JSON config accepted by the CLI: a dataset reference plus run settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    /// Dataset manifest path, relative to the config file.
    pub dataset: Option<PathBuf>,
    /// Generator settings for `gen-data`.
    pub spec: Option<crate::synth::DatasetSpec>,
    pub run: RunConfig,
}

impl ConfigFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.run.validate()?;
        if let Some(spec) = &c.spec {
            spec.validate()?;
        }
        Ok(c)
    }
}

/// Per-image quantities that do not change across epochs.
#[derive(Debug, Clone)]
struct PreparedImage {
    activations: ActivationSet,
    bce: f64,
    /// PACAM channel classes: present foreground ids, then background if enabled.
    channels: Vec<usize>,
    instances: Vec<Option<Prototype>>,
}

#[derive(Debug, Clone)]
pub struct EpochResult {
    pub epoch: usize,
    pub candidates: CandidateSet,
    pub pacams: Vec<PacamSet>,
    pub losses: Vec<LossReport>,
    /// Pooled over classes with at least two context prototypes.
    pub ocsem: Option<f64>,
}

impl EpochResult {
    pub fn mean_loss(&self) -> LossReport {
        let n = self.losses.len().max(1) as f64;
        let bce = self.losses.iter().map(|l| l.bce).sum::<f64>() / n;
        let self_l = self.losses.iter().map(|l| l.self_loss).sum::<f64>() / n;
        let (lb, ls) = self
            .losses
            .first()
            .map_or((0.0, 0.0), |l| (l.lambda_bce, l.lambda_self));
        LossReport {
            bce,
            self_loss: self_l,
            total: lb * bce + ls * self_l,
            lambda_bce: lb,
            lambda_self: ls,
        }
    }
}

pub struct Pipeline<'a> {
    dataset: &'a Dataset,
    config: RunConfig,
    prepared: Vec<PreparedImage>,
}

impl<'a> Pipeline<'a> {
    pub fn new(dataset: &'a Dataset, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if dataset.images.is_empty() {
            return Err(Error::Degenerate("dataset has no images".into()));
        }
        let prepared = dataset
            .images
            .par_iter()
            .map(|img| {
                let activations = build_activation_set(&img.features, &dataset.classifier, &img.labels)?;
                let bce = bce_loss(&compute_logits(&img.features, &dataset.classifier)?, &img.labels)?;
                let mut channels: Vec<usize> = activations.class_order[..activations.foreground.len()].to_vec();
                if config.include_background {
                    channels.push(activations.background_id());
                }
                let instances = channels
                    .iter()
                    .map(|&c| {
                        let m = activations.map_for(c).expect("channel comes from the class order");
                        let mask = binary_mask(m, config.tau)?;
                        instance_prototype(&img.features, &mask, m, c)
                    })
                    .collect::<Result<_>>()?;
                Ok(PreparedImage {
                    activations,
                    bce,
                    channels,
                    instances,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset,
            config,
            prepared,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn new_bank(&self) -> Result<SupportBank> {
        SupportBank::new(self.config.bank_capacity, self.dataset.depth())
    }

    pub fn activations(&self) -> impl Iterator<Item = &ActivationSet> {
        self.prepared.iter().map(|p| &p.activations)
    }

    fn channel_classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.dataset.classes).collect();
        if self.config.include_background {
            ids.push(self.dataset.background_id());
        }
        ids
    }

    /// Context prototypes clustered from the current bank.
    pub fn build_candidates(&self, bank: &SupportBank, epoch: usize) -> Result<CandidateSet> {
        candidate_set(
            bank,
            &self.channel_classes(),
            self.config.n_p,
            self.config.kmeans_restarts,
            self.config.seed.wrapping_add(epoch as u64),
        )
    }

    /// Pushes every instance prototype in stream order.
    pub fn push_all(&self, bank: &mut SupportBank) -> Result<()> {
        for img in &self.prepared {
            for p in img.instances.iter().flatten() {
                bank.push(p)?;
            }
        }
        Ok(())
    }

    /// Candidate sets seen at the start of each of `epochs` epochs from an empty bank.
    pub fn candidate_schedule(&self, epochs: usize) -> Result<Vec<CandidateSet>> {
        let mut bank = self.new_bank()?;
        let mut out = Vec::with_capacity(epochs);
        for e in 0..epochs {
            out.push(self.build_candidates(&bank, e)?);
            self.push_all(&mut bank)?;
        }
        Ok(out)
    }

    /// One epoch: cluster the bank, compute PACAMs and losses, push the
    /// batch prototypes.
    pub fn run_epoch(&self, bank: &mut SupportBank, epoch: usize) -> Result<EpochResult> {
        let candidates = self.build_candidates(bank, epoch)?;
        let result = self.epoch_with_candidates(epoch, candidates)?;
        self.push_all(bank)?;
        Ok(result)
    }

    /// Per-batch shifts `δ_c` for every class with context prototypes.
    fn batch_shifts(&self, candidates: &CandidateSet) -> Result<Vec<BTreeMap<usize, Vec<f64>>>> {
        let mut per_image = Vec::with_capacity(self.prepared.len());
        for batch in self.prepared.chunks(self.config.batch_size) {
            let mut shifts = BTreeMap::new();
            if self.config.alignment_enabled {
                let mut grouped: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
                for p in batch.iter().flat_map(|img| img.instances.iter().flatten()) {
                    grouped.entry(p.class_id).or_default().push(p.vec.clone());
                }
                for (c, instances) in grouped {
                    if let Some(cand) = candidates.get(c) {
                        shifts.insert(c, compute_shift(&cand.prototypes, &instances)?);
                    }
                }
            }
            per_image.extend(std::iter::repeat_n(shifts, batch.len()));
        }
        Ok(per_image)
    }

    fn neighbors(&self, anchor: &Prototype, cand: &ClassCandidates) -> Result<SoftNeighbors> {
        let cfg = &self.config;
        if !cfg.top_k_enabled && cfg.aggregation_mode == AggregationMode::Uniform {
            return Ok(SoftNeighbors::all_uniform(cand));
        }
        let scores = positiveness(&anchor.vec, &cand.prototypes, cfg.gamma, cfg.metric)?;
        if cfg.top_k_enabled {
            top_k_soft_neighbors(anchor, cand, &scores, cfg.k)
        } else {
            Ok(SoftNeighbors {
                class_id: cand.class_id,
                prototypes: cand.prototypes.clone(),
                scores: scores.scores,
                indices: (0..cand.k()).collect(),
            })
        }
    }

    /// PACAMs and losses for every image against fixed context prototypes.
    pub fn epoch_with_candidates(&self, epoch: usize, candidates: CandidateSet) -> Result<EpochResult> {
        let shifts = self.batch_shifts(&candidates)?;
        type Pairs = Vec<(usize, Vec<f64>, usize)>;
        let per_image: Vec<(PacamSet, LossReport, Pairs)> = self
            .prepared
            .par_iter()
            .zip(&self.dataset.images)
            .zip(&shifts)
            .map(|((prep, img), shift)| {
                let f = &img.features;
                let mut maps = Vec::with_capacity(prep.channels.len());
                let mut pairs = Vec::new();
                for (&c, inst) in prep.channels.iter().zip(&prep.instances) {
                    let Some(inst) = inst else {
                        maps.push(Map2::filled(f.height(), f.width(), 0.0));
                        continue;
                    };
                    let map = match candidates.get(c) {
                        None => pacam_map(f, &SoftNeighbors::single(inst), self.config.aggregation_mode)?,
                        Some(cand) => {
                            let anchor = match shift.get(&c) {
                                Some(d) => Prototype::new(c, inst.vec.iter().zip(d).map(|(x, y)| x + y).collect()),
                                None => inst.clone(),
                            };
                            if cand.k() >= 2 {
                                pairs.push((c, anchor.vec.clone(), cand.nearest(&anchor.vec)));
                            }
                            pacam_map(f, &self.neighbors(&anchor, cand)?, self.config.aggregation_mode)?
                        }
                    };
                    maps.push(map);
                }
                let set = PacamSet {
                    maps,
                    class_order: prep.channels.clone(),
                    mode: self.config.aggregation_mode,
                };
                let l_self = self_loss(&prep.activations, &set, self.config.pixel_reduction)?;
                let loss = total_loss(prep.bce, l_self, self.config.lambda_bce, self.config.lambda_self)?;
                Ok((set, loss, pairs))
            })
            .collect::<Result<_>>()?;
        let mut pacams = Vec::with_capacity(per_image.len());
        let mut losses = Vec::with_capacity(per_image.len());
        let mut grouped: BTreeMap<usize, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
        for (set, loss, pairs) in per_image {
            pacams.push(set);
            losses.push(loss);
            for (c, v, i) in pairs {
                grouped.entry(c).or_default().push((v, i));
            }
        }
        let mut hits = 0.0;
        let mut total = 0usize;
        for (c, pairs) in &grouped {
            let cand = candidates.get(*c).expect("pairs only exist for clustered classes");
            hits += ocsem(&cand.prototypes, pairs)? * pairs.len() as f64;
            total += pairs.len();
        }
        Ok(EpochResult {
            epoch,
            candidates,
            pacams,
            losses,
            ocsem: (total > 0).then(|| hits / total as f64),
        })
    }

    /// Runs every configured epoch from an empty bank.
    pub fn run(&self) -> Result<RunOutput> {
        let mut bank = self.new_bank()?;
        let mut epochs = Vec::with_capacity(self.config.epochs);
        for e in 0..self.config.epochs {
            epochs.push(self.run_epoch(&mut bank, e)?);
        }
        Ok(RunOutput { epochs, bank })
    }

    /// Same as [`Pipeline::run`] but with candidate sets supplied up front.
    pub fn run_with_schedule(&self, schedule: &[CandidateSet]) -> Result<Vec<EpochResult>> {
        schedule
            .iter()
            .enumerate()
            .map(|(e, c)| self.epoch_with_candidates(e, c.clone()))
            .collect()
    }
}

pub struct RunOutput {
    pub epochs: Vec<EpochResult>,
    pub bank: SupportBank,
}

impl RunOutput {
    pub fn last(&self) -> &EpochResult {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Free-function form of [`Pipeline::run_epoch`].
pub fn run_epoch(dataset: &Dataset, bank: &mut SupportBank, config: &RunConfig, epoch: usize) -> Result<EpochResult> {
    Pipeline::new(dataset, config.clone())?.run_epoch(bank, epoch)
}

pub const PACAM_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacamEntry {
    pub id: String,
    pub file: String,
    /// Channels that carry a map; the rest of the `N+1` channels are zero.
    pub channels: Vec<usize>,
}

/// Index of per-image `[N+1, H, W]` PACAM arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacamManifest {
    pub format_version: u32,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub mode: AggregationMode,
    pub include_background: bool,
    pub images: Vec<PacamEntry>,
}

impl PacamManifest {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != 1 {
            return Err(Error::Format(format!("unsupported PACAM manifest version {}", m.format_version)));
        }
        if m.classes == 0 || m.height == 0 || m.width == 0 {
            return Err(Error::Format("PACAM manifest dimensions must be >= 1".into()));
        }
        for e in &m.images {
            check_relative(&e.file)?;
            if e.channels.iter().any(|&c| c > m.classes) {
                return Err(Error::Format(format!("image {:?} lists a channel beyond {}", e.id, m.classes)));
            }
            if e.channels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("image {:?} channels must be strictly increasing", e.id)));
            }
        }
        Ok(m)
    }
}

/// Writes one `[N+1, H, W]` array per image plus `manifest.json`.
pub fn save_pacams(dataset: &Dataset, pacams: &[PacamSet], include_background: bool, dir: impl AsRef<Path>) -> Result<PacamManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if pacams.len() != dataset.images.len() {
        return Err(Error::Dimension("one PACAM set per image expected".into()));
    }
    let (h, w) = {
        let f = &dataset.images[0].features;
        (f.height(), f.width())
    };
    let channels = dataset.classes + 1;
    let mut entries = Vec::with_capacity(pacams.len());
    let mut mode = AggregationMode::default();
    for (img, set) in dataset.images.iter().zip(pacams) {
        mode = set.mode;
        let mut data = vec![0.0; channels * h * w];
        let mut listed: Vec<usize> = set.class_order.clone();
        listed.sort_unstable();
        for (&c, m) in set.class_order.iter().zip(&set.maps) {
            data[c * h * w..(c + 1) * h * w].copy_from_slice(m.data());
        }
        let file = format!("{}.npy", img.id);
        npy::save_tensor(&Tensor::new(vec![channels, h, w], data)?, dir.join(&file))?;
        entries.push(PacamEntry {
            id: img.id.clone(),
            file,
            channels: listed,
        });
    }
    let manifest = PacamManifest {
        format_version: 1,
        classes: dataset.classes,
        height: h,
        width: w,
        mode,
        include_background,
        images: entries,
    };
    let path = dir.join(PACAM_MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_pacams(manifest_path: impl AsRef<Path>) -> Result<(PacamManifest, Vec<PacamSet>)> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = PacamManifest::from_json_str(&text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let plane = m.height * m.width;
    let sets = m
        .images
        .iter()
        .map(|e| {
            let t = npy::load_tensor(root.join(&e.file))?;
            if t.shape() != [m.classes + 1, m.height, m.width] {
                return Err(Error::Format(format!("{} has shape {:?}", e.file, t.shape())));
            }
            let maps = e
                .channels
                .iter()
                .map(|&c| Map2::new(m.height, m.width, t.data()[c * plane..(c + 1) * plane].to_vec()))
                .collect::<Result<_>>()?;
            Ok(PacamSet {
                maps,
                class_order: e.channels.clone(),
                mode: m.mode,
            })
        })
        .collect::<Result<_>>()?;
    Ok((m, sets))
}
