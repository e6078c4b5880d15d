//! Component ablation on one dataset and the JSON evaluation report.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{default_thresholds, evaluate_seed_miou, ForegroundMaps, SeedEval, ThresholdPoint};
use crate::pacam::{AggregationMode, LossReport};
use crate::pipeline::{EpochResult, Pipeline, RunConfig};
use crate::synth::Dataset;

pub const TOOL_NAME: &str = "cpal";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Candidate counts for the neighbor sweep.
pub const K_SWEEP: [usize; 3] = [10, 20, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub ocsem: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub best_threshold: f64,
    pub best_miou: f64,
    pub curve: Vec<ThresholdPoint>,
    /// Indexed by class id, background last; `null` where the class never occurs.
    pub per_class_iou: Vec<Option<f64>>,
    pub ocsem: Option<f64>,
    pub confuser_rate: Option<f64>,
    pub loss_trajectory: Vec<EpochLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub best_threshold: f64,
    pub best_miou: f64,
    pub confuser_rate: Option<f64>,
    pub ocsem: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub confuser_pairs: Vec<(usize, usize)>,
}

impl DatasetSummary {
    pub fn of(d: &Dataset) -> Self {
        let f = &d.images[0].features;
        Self {
            images: d.images.len(),
            height: f.height(),
            width: f.width(),
            depth: f.depth(),
            classes: d.classes,
            confuser_pairs: d.confuser_pairs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool: String,
    pub version: String,
    pub dataset: DatasetSummary,
    pub config: RunConfig,
    pub variants: Vec<VariantReport>,
    pub k_sweep: Vec<KSweepRow>,
}

impl EvalReport {
    pub fn new(dataset: &Dataset, config: &RunConfig) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            dataset: DatasetSummary::of(dataset),
            config: config.clone(),
            variants: Vec::new(),
            k_sweep: Vec::new(),
        }
    }

    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn evaluate_raw_cam(pipeline: &Pipeline<'_>, dataset: &Dataset) -> Result<SeedEval> {
    let maps: Vec<ForegroundMaps> = pipeline.activations().map(ForegroundMaps::from_activations).collect();
    let gt: Vec<_> = dataset.images.iter().map(|i| i.gt.clone()).collect();
    evaluate_seed_miou(&maps, &gt, &default_thresholds(), dataset.classes)
}

pub fn evaluate_epoch(epoch: &EpochResult, dataset: &Dataset) -> Result<SeedEval> {
    let maps: Vec<ForegroundMaps> = epoch
        .pacams
        .iter()
        .map(|p| ForegroundMaps::from_pacam(p, dataset.background_id()))
        .collect();
    let gt: Vec<_> = dataset.images.iter().map(|i| i.gt.clone()).collect();
    evaluate_seed_miou(&maps, &gt, &default_thresholds(), dataset.classes)
}

pub fn variant_report(name: &str, seed: &SeedEval, epochs: &[EpochResult], dataset: &Dataset) -> VariantReport {
    VariantReport {
        name: name.into(),
        best_threshold: seed.best_threshold,
        best_miou: seed.best_miou,
        curve: seed.curve.clone(),
        per_class_iou: seed.per_class_iou(),
        ocsem: epochs.last().and_then(|e| e.ocsem),
        confuser_rate: seed.confuser_rate(&dataset.confuser_pairs),
        loss_trajectory: epochs
            .iter()
            .map(|e| EpochLoss {
                epoch: e.epoch,
                loss: e.mean_loss(),
                ocsem: e.ocsem,
            })
            .collect(),
    }
}

/// Names of the ablation variants in report order.
pub const VARIANTS: [&str; 5] = ["raw-cam", "vanilla", "+top-k", "+positiveness", "+alignment"];

/// Component switches of each learned variant, cumulative in report order.
pub fn variant_config(base: &RunConfig, name: &str) -> Option<RunConfig> {
    let mut c = base.clone();
    match name {
        "vanilla" => {
            c.top_k_enabled = false;
            c.aggregation_mode = AggregationMode::Uniform;
            c.alignment_enabled = false;
        }
        "+top-k" => {
            c.top_k_enabled = true;
            c.aggregation_mode = AggregationMode::Uniform;
            c.alignment_enabled = false;
        }
        "+positiveness" => {
            c.top_k_enabled = true;
            c.aggregation_mode = AggregationMode::Weighted;
            c.alignment_enabled = false;
        }
        "+alignment" => {
            c.top_k_enabled = true;
            c.aggregation_mode = AggregationMode::Weighted;
            c.alignment_enabled = true;
        }
        _ => return None,
    }
    Some(c)
}

/// Runs every variant plus the K sweep with shared banks and seeds.
///
/// Banks depend only on the classifier CAMs, so the per-epoch candidate sets
/// are clustered once and reused by every variant.
pub fn run_ablation(dataset: &Dataset, config: &RunConfig) -> Result<EvalReport> {
    let mut report = EvalReport::new(dataset, config);
    let base = Pipeline::new(dataset, config.clone())?;
    let schedule = base.candidate_schedule(config.epochs)?;
    let raw = evaluate_raw_cam(&base, dataset)?;
    report.variants.push(variant_report("raw-cam", &raw, &[], dataset));
    for name in &VARIANTS[1..] {
        let cfg = variant_config(config, name).expect("known variant");
        let p = Pipeline::new(dataset, cfg)?;
        let epochs = p.run_with_schedule(&schedule)?;
        let seed = evaluate_epoch(epochs.last().expect("epochs >= 1"), dataset)?;
        report.variants.push(variant_report(name, &seed, &epochs, dataset));
    }
    for k in K_SWEEP {
        let cfg = RunConfig {
            k,
            ..variant_config(config, "+alignment").expect("known variant")
        };
        let p = Pipeline::new(dataset, cfg)?;
        let epochs = p.run_with_schedule(&schedule)?;
        let last = epochs.last().expect("epochs >= 1");
        let seed = evaluate_epoch(last, dataset)?;
        report.k_sweep.push(KSweepRow {
            k,
            best_threshold: seed.best_threshold,
            best_miou: seed.best_miou,
            confuser_rate: seed.confuser_rate(&dataset.confuser_pairs),
            ocsem: last.ocsem,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, DatasetSpec};

    #[test]
    fn report_shape() {
        let d = generate(&DatasetSpec {
            images: 6,
            height: 12,
            width: 12,
            blob_min: 3,
            blob_max: 6,
            ..DatasetSpec::default()
        })
        .unwrap();
        let r = run_ablation(&d, &RunConfig::default()).unwrap();
        let names: Vec<&str> = r.variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, VARIANTS);
        assert_eq!(r.k_sweep.len(), 3);
        for v in &r.variants {
            assert!((0.0..=1.0).contains(&v.best_miou));
            assert!(v.curve.iter().all(|p| p.miou <= v.best_miou));
        }
    }
}
