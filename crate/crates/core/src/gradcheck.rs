//! Finite-difference check of the analytic consistency-loss gradient on
//! random instances kept away from the ReLU and L1 kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cam::{ActivationSet, FeatureMap, Map2};
use crate::context::{cosine, SoftNeighbors};
use crate::error::{Error, Result};
use crate::pacam::{grad_self_wrt_features, self_loss_from_features, AggregationMode, PixelReduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub max_k: usize,
    pub step: f64,
    /// Instances with a pre-activation or residual this close to a kink are redrawn.
    pub kink_margin: f64,
    pub tolerance: f64,
    /// Perturbs the analytic gradient so the harness must fail.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            height: 4,
            width: 4,
            depth: 8,
            max_k: 5,
            step: 1e-5,
            kink_margin: 1e-3,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_relative_error: f64,
    pub worst_trial: usize,
    pub redrawn: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Instance {
    f: FeatureMap,
    neighbors: Vec<SoftNeighbors>,
    targets: ActivationSet,
    mode: AggregationMode,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, mode: AggregationMode) -> Result<Instance> {
    let (h, w, d) = (cfg.height, cfg.width, cfg.depth);
    let f = FeatureMap::new(h, w, d, normal_vec(rng, h * w * d))?;
    let foreground = rng.random_range(1..=2usize);
    let mut neighbors = Vec::new();
    let mut maps = Vec::new();
    for class in 0..=foreground {
        let k = rng.random_range(1..=cfg.max_k);
        neighbors.push(SoftNeighbors {
            class_id: class,
            prototypes: (0..k).map(|_| normal_vec(rng, d)).collect(),
            scores: (0..k).map(|_| rng.random_range(0.1..1.0)).collect(),
            indices: (0..k).collect(),
        });
        maps.push(Map2::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())?);
    }
    let background = maps.pop().expect("background channel");
    let mut class_order: Vec<usize> = (0..foreground).collect();
    class_order.push(foreground);
    Ok(Instance {
        f,
        neighbors,
        targets: ActivationSet {
            foreground: maps,
            background,
            class_order,
        },
        mode,
    })
}

fn near_kink(inst: &Instance, margin: f64) -> bool {
    for n in &inst.neighbors {
        let weights: Vec<f64> = match inst.mode {
            AggregationMode::Uniform => vec![1.0 / n.len() as f64; n.len()],
            AggregationMode::Weighted => {
                let t: f64 = n.scores.iter().sum();
                n.scores.iter().map(|s| s / t).collect()
            }
        };
        let target = inst.targets.map_for(n.class_id).expect("every channel has a target");
        for (px, &m) in inst.f.iter_pixels().zip(target.data()) {
            let s: f64 = n.prototypes.iter().zip(&weights).map(|(p, a)| a * cosine(px, p)).sum();
            if s.abs() < margin || (s > 0.0 && (s - m).abs() < margin) || s > 1.0 - margin {
                return true;
            }
        }
    }
    false
}

fn loss(inst: &Instance, f: &FeatureMap) -> Result<f64> {
    self_loss_from_features(f, &inst.neighbors, &inst.targets, inst.mode, PixelReduction::Mean)
}

/// Max relative error over all coordinates of one instance.
fn check_instance(inst: &Instance, cfg: &GradCheckConfig) -> Result<f64> {
    let mut analytic = grad_self_wrt_features(&inst.f, &inst.neighbors, &inst.targets, inst.mode, PixelReduction::Mean)?;
    if cfg.corrupt {
        analytic = analytic.scaled(1.01);
    }
    let mut worst: f64 = 0.0;
    let mut probe = inst.f.clone();
    for i in 0..inst.f.data().len() {
        let orig = inst.f.data()[i];
        probe.data_mut()[i] = orig + cfg.step;
        let up = loss(inst, &probe)?;
        probe.data_mut()[i] = orig - cfg.step;
        let down = loss(inst, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.trials == 0 {
        return Err(Error::Domain("grad-check needs at least one trial".into()));
    }
    if cfg.max_k == 0 || cfg.height == 0 || cfg.width == 0 || cfg.depth == 0 {
        return Err(Error::Domain("grad-check dimensions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_err: f64 = 0.0;
    let mut worst_trial = 0;
    let mut redrawn = 0;
    for trial in 0..cfg.trials {
        let mode = if trial % 2 == 0 {
            AggregationMode::Uniform
        } else {
            AggregationMode::Weighted
        };
        let mut attempts = 0;
        let inst = loop {
            let inst = draw(&mut rng, cfg, mode)?;
            if !near_kink(&inst, cfg.kink_margin) {
                break inst;
            }
            attempts += 1;
            redrawn += 1;
            if attempts > 10_000 {
                return Err(Error::Degenerate("could not draw a kink-free instance".into()));
            }
        };
        let err = check_instance(&inst, cfg)?;
        if err > max_err {
            max_err = err;
            worst_trial = trial;
        }
    }
    Ok(GradCheckReport {
        trials: cfg.trials,
        max_relative_error: max_err,
        worst_trial,
        redrawn,
        tolerance: cfg.tolerance,
        passed: max_err <= cfg.tolerance,
    })
}
