//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p cpal-core --test acceptance`.

use std::collections::VecDeque;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cpal_core::ablation::{run_ablation, EvalReport};
use cpal_core::cam::{class_activation, ClassifierWeights, FeatureMap};
use cpal_core::context::{compute_shift, positiveness, top_k_soft_neighbors, Metric, SoftNeighbors};
use cpal_core::gradcheck::{run_grad_check, GradCheckConfig};
use cpal_core::pacam::{pacam_map, AggregationMode};
use cpal_core::pipeline::RunConfig;
use cpal_core::proto::{cluster_bank, ClassCandidates, Prototype, SupportBank};
use cpal_core::simplex::maximize_weighted_log;
use cpal_core::synth::{generate, DatasetSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Best-threshold seed mIoU of the reference run on the default benchmark.
const PINNED_FULL_MIOU: f64 = 0.978_650_925_509_037_7;
const PINNED_RAW_MIOU: f64 = 0.762_544_094_450_507;

const CHILD_ENV: &str = "CPAL_ACCEPTANCE_EMIT_REPORT";

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass_if(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn wcss_of(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let mut sum = vec![[0.0; 2]; k];
    let mut count = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sum[l][0] += p[0];
        sum[l][1] += p[1];
        count[l] += 1;
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            let cx = sum[l][0] / count[l] as f64;
            let cy = sum[l][1] / count[l] as f64;
            (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
        })
        .sum()
}

/// Minimum within-cluster sum of squares over every partition into exactly `k` nonempty parts.
fn exhaustive_wcss(points: &[[f64; 2]], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            best = best.min(wcss_of(points, &labels, k));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let cases = 200;
    for case in 0..cases {
        let k = rng.random_range(1..=4usize);
        let n = rng.random_range(k.max(2)..=8usize);
        let spread = 1.0;
        let mut centers: Vec<[f64; 2]> = Vec::new();
        while centers.len() < k {
            let c = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)];
            let clear = centers
                .iter()
                .all(|o: &[f64; 2]| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= 5.0 * 2.0 * spread);
            if clear {
                centers.push(c);
            }
        }
        let points: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let c = centers[if i < k { i } else { rng.random_range(0..k) }];
                let r = spread * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect();
        let as_vecs: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        let fitted = match cluster_bank(0, &as_vecs, k, 10, case as u64) {
            Ok(c) => c,
            Err(e) => return pass_if(false, format!("case {case}: {e}")),
        };
        let optimum = exhaustive_wcss(&points, k);
        worst = worst.max((fitted.wcss - optimum).abs());
    }
    pass_if(
        worst <= 1e-9,
        format!("{cases} cases, max |wcss - exhaustive optimum| = {worst:.2e} (tol 1e-9)"),
    )
}

fn cosine_grad_wrt_x(p: &[f64], x: &[f64], out: &mut [f64], scale: f64) {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xn2 = x.iter().map(|v| v * v).sum::<f64>();
    let xn = xn2.sqrt();
    let c = p.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (pn * xn);
    for ((o, pi), xi) in out.iter_mut().zip(p).zip(x) {
        *o += scale * (pi / (pn * xn) - c * xi / xn2);
    }
}

fn paired_objective(protos: &[Vec<f64>], inst: &[(usize, Vec<f64>)], delta: &[f64]) -> f64 {
    inst.iter()
        .map(|(i, v)| {
            let x: Vec<f64> = v.iter().zip(delta).map(|(a, b)| a + b).collect();
            let p = &protos[*i];
            let dot: f64 = p.iter().zip(&x).map(|(a, b)| a * b).sum();
            dot / (p.iter().map(|v| v * v).sum::<f64>().sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .sum::<f64>()
        / inst.len() as f64
}

fn paired_gradient(protos: &[Vec<f64>], inst: &[(usize, Vec<f64>)], delta: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; delta.len()];
    for (i, v) in inst {
        let x: Vec<f64> = v.iter().zip(delta).map(|(a, b)| a + b).collect();
        cosine_grad_wrt_x(&protos[*i], &x, &mut grad, 1.0 / inst.len() as f64);
    }
    grad
}

/// Gradient ascent on the mean paired cosine with Barzilai-Borwein steps,
/// halved until the objective does not decrease.
fn maximize_paired(protos: &[Vec<f64>], inst: &[(usize, Vec<f64>)], d: usize) -> Vec<f64> {
    let mut delta = vec![0.0; d];
    let mut value = paired_objective(protos, inst, &delta);
    let mut grad = paired_gradient(protos, inst, &delta);
    let mut step = 1.0;
    for _ in 0..20_000 {
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
        let (next_delta, next_value) = loop {
            let trial: Vec<f64> = delta.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            let v = paired_objective(protos, inst, &trial);
            if v >= value || step < 1e-20 {
                break (trial, v);
            }
            step *= 0.5;
        };
        let next_grad = paired_gradient(protos, inst, &next_delta);
        let s: Vec<f64> = next_delta.iter().zip(&delta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        if ss == 0.0 {
            break;
        }
        step = if sy < 0.0 { ss / -sy } else { step * 2.0 };
        delta = next_delta;
        value = next_value;
        grad = next_grad;
    }
    delta
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut identity_err: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=16usize);
        let np = rng.random_range(1..=12usize);
        let q = rng.random_range(1..=12usize);
        let ctx: Vec<Vec<f64>> = (0..np).map(|_| normal(&mut rng, d)).collect();
        let ins: Vec<Vec<f64>> = (0..q).map(|_| normal(&mut rng, d)).collect();
        let got = match compute_shift(&ctx, &ins) {
            Ok(v) => v,
            Err(e) => return pass_if(false, format!("compute_shift: {e}")),
        };
        let expected: Vec<f64> = (0..d)
            .map(|j| ctx.iter().map(|v| v[j]).sum::<f64>() / np as f64 - ins.iter().map(|v| v[j]).sum::<f64>() / q as f64)
            .collect();
        identity_err = identity_err.max(max_abs_diff(&got, &expected));
    }

    let mut recovery: f64 = 0.0;
    let mut recovered = 0;
    let cases = 40;
    for _ in 0..cases {
        let (d, np, q) = (16, 8, 8);
        let protos: Vec<Vec<f64>> = (0..np).map(|_| normal(&mut rng, d)).collect();
        let pnorm = protos.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / np as f64;
        let mu_dir = normal(&mut rng, d);
        let mu_norm = mu_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mu: Vec<f64> = mu_dir.iter().map(|v| v / mu_norm * 0.2 * pnorm).collect();
        let sigma = 0.01 * pnorm / (d as f64).sqrt();
        let mut inst = Vec::new();
        for (i, p) in protos.iter().enumerate() {
            for _ in 0..q {
                let noise = normal(&mut rng, d);
                inst.push((i, p.iter().zip(&mu).zip(&noise).map(|((a, m), z)| a + m + sigma * z).collect::<Vec<f64>>()));
            }
        }
        let instances: Vec<Vec<f64>> = inst.iter().map(|(_, v)| v.clone()).collect();
        let delta_n = match compute_shift(&protos, &instances) {
            Ok(v) => v,
            Err(e) => return pass_if(false, format!("compute_shift: {e}")),
        };
        let best = maximize_paired(&protos, &inst, d);
        let gap = best.iter().zip(&delta_n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dn = delta_n.iter().map(|v| v * v).sum::<f64>().sqrt();
        recovery = recovery.max(gap / dn);
        if gap <= 1e-2 * dn + 1e-3 {
            recovered += 1;
        }
    }
    pass_if(
        identity_err <= 1e-12 && recovered == cases,
        format!(
            "identity max err {identity_err:.2e} over 1000 cases (tol 1e-12); argmax of J recovers the shift in {recovered}/{cases} cases, worst relative gap {recovery:.2e} (tol 1e-2)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=20usize);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..10.0)).collect();
        let total: f64 = w.iter().sum();
        let solved = match maximize_weighted_log(&w, 100_000) {
            Ok(r) => r.solution,
            Err(e) => return pass_if(false, format!("ascent: {e}")),
        };
        let target: Vec<f64> = w.iter().map(|v| v / total).collect();
        worst = worst.max(max_abs_diff(&solved, &target));
    }
    pass_if(worst <= 1e-6, format!("100 weight vectors, max inf-norm error {worst:.2e} (tol 1e-6)"))
}

fn criterion_4() -> Outcome {
    let report = match run_grad_check(&GradCheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return pass_if(false, format!("grad check: {e}")),
    };
    let corrupted = run_grad_check(&GradCheckConfig {
        trials: 3,
        corrupt: true,
        ..GradCheckConfig::default()
    });
    let caught = matches!(corrupted, Ok(ref r) if !r.passed);
    pass_if(
        report.passed && report.trials == 100 && caught,
        format!(
            "{} trials, max relative error {:.2e} (tol 1e-4), {} redraws near kinks; corrupted gradient {}",
            report.trials,
            report.max_relative_error,
            report.redrawn,
            if caught { "rejected" } else { "NOT rejected" }
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut cam_err, mut pacam_err): (f64, f64) = (0.0, 0.0);
    let mut topk_mismatch = 0;
    for _ in 0..1000 {
        let (h, w, d) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize), rng.random_range(2..=8usize));
        let classes = rng.random_range(1..=4usize);
        let f = FeatureMap::new(h, w, d, normal(&mut rng, h * w * d)).unwrap();
        let weights = ClassifierWeights::new(classes, d, normal(&mut rng, classes * d)).unwrap();
        let n = rng.random_range(0..classes);
        let c = (rng.random_range(-3.0..3.0f64)).exp();
        let a = class_activation(&f, &weights, n).unwrap();
        let b = class_activation(&f, &weights.scaled_row(n, c), n).unwrap();
        cam_err = cam_err.max(max_abs_diff(a.data(), b.data()));

        let k = rng.random_range(1..=6usize);
        let protos: Vec<Vec<f64>> = (0..k).map(|_| normal(&mut rng, d)).collect();
        let neighbors = SoftNeighbors {
            class_id: 0,
            prototypes: protos.clone(),
            scores: vec![1.0 / k as f64; k],
            indices: (0..k).collect(),
        };
        let scaled = SoftNeighbors {
            prototypes: protos
                .iter()
                .map(|p| {
                    let s = rng.random_range(-3.0..3.0f64).exp();
                    p.iter().map(|v| v * s).collect()
                })
                .collect(),
            ..neighbors.clone()
        };
        let fc = rng.random_range(-3.0..3.0f64).exp();
        let m0 = pacam_map(&f, &neighbors, AggregationMode::Uniform).unwrap();
        let m1 = pacam_map(&f.scaled(fc), &scaled, AggregationMode::Uniform).unwrap();
        pacam_err = pacam_err.max(max_abs_diff(m0.data(), m1.data()));

        let cands = ClassCandidates {
            class_id: 0,
            prototypes: protos,
            counts: vec![1; k],
            wcss: 0.0,
        };
        let anchor = Prototype::new(0, normal(&mut rng, d));
        let metric = [Metric::L1, Metric::L2, Metric::Cosine, Metric::Dot][rng.random_range(0..4)];
        let scores = positiveness(&anchor.vec, &cands.prototypes, rng.random_range(0.5..2.0), metric).unwrap();
        let kk = rng.random_range(1..=k);
        let base = top_k_soft_neighbors(&anchor, &cands, &scores, kk).unwrap();
        let s = rng.random_range(-3.0..3.0f64).exp();
        let moved = top_k_soft_neighbors(&anchor, &cands, &scores.rescaled(s), kk).unwrap();
        if base.indices != moved.indices {
            topk_mismatch += 1;
        }
    }
    pass_if(
        cam_err <= 1e-12 && pacam_err <= 1e-12 && topk_mismatch == 0,
        format!(
            "1000 trials each: CAM max diff {cam_err:.2e}, uniform PACAM max diff {pacam_err:.2e} (tol 1e-12), top-K index sets changed in {topk_mismatch} trials"
        ),
    )
}

fn benchmark_report() -> cpal_core::Result<EvalReport> {
    let data = generate(&DatasetSpec::default())?;
    run_ablation(&data, &RunConfig::default())
}

fn criterion_6(report: &EvalReport, elapsed: Duration) -> Outcome {
    let raw = report.variant("raw-cam").map_or(f64::NAN, |v| v.best_miou);
    let full = report.variant("+alignment").map_or(f64::NAN, |v| v.best_miou);
    let gain = (full - raw) * 100.0;
    let pinned = (full - PINNED_FULL_MIOU).abs() <= 1e-9 && (raw - PINNED_RAW_MIOU).abs() <= 1e-9;
    pass_if(
        gain >= 10.0 && pinned && elapsed < Duration::from_secs(60),
        format!(
            "raw-CAM {raw:.4} -> full {full:.4} ({gain:+.2} points, need >= +10); pinned figures {}; benchmark time {:.2} s (limit 60 s)",
            if pinned { "match" } else { "DIFFER" },
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(report: &EvalReport) -> Outcome {
    let get = |name: &str| report.variant(name);
    let (Some(raw), Some(vanilla), Some(full)) = (get("raw-cam"), get("vanilla"), get("+alignment")) else {
        return pass_if(false, "report is missing a variant".into());
    };
    let (Some(cv), Some(cf)) = (vanilla.confuser_rate, full.confuser_rate) else {
        return pass_if(false, "confuser rate undefined".into());
    };
    let ordered = vanilla.best_miou >= raw.best_miou - 0.005 && full.best_miou >= vanilla.best_miou;
    pass_if(
        ordered && cf <= cv,
        format!(
            "mIoU raw {:.4} / vanilla {:.4} / full {:.4}; confuser rate vanilla {cv:.4} -> full {cf:.4}",
            raw.best_miou, vanilla.best_miou, full.best_miou
        ),
    )
}

fn fifo_suite() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases = 0;
    for _ in 0..300 {
        let capacity = rng.random_range(1..=8usize);
        let classes = rng.random_range(1..=3usize);
        let mut bank = SupportBank::new(capacity, 2).map_err(|e| e.to_string())?;
        let mut oracle: Vec<VecDeque<Vec<f64>>> = vec![VecDeque::new(); classes];
        let mut pushes = vec![0u64; classes];
        for step in 0..rng.random_range(0..40usize) {
            let c = rng.random_range(0..classes);
            let v = vec![step as f64, c as f64];
            bank.push(&Prototype::new(c, v.clone())).map_err(|e| e.to_string())?;
            if oracle[c].len() == capacity {
                oracle[c].pop_front();
            }
            oracle[c].push_back(v);
            pushes[c] += 1;
        }
        for c in 0..classes {
            let expected: Vec<Vec<f64>> = oracle[c].iter().cloned().collect();
            if bank.entries(c) != expected || bank.len(c) as u64 != pushes[c].min(capacity as u64) {
                return Err(format!("class {c} diverges from the FIFO oracle"));
            }
        }
        cases += 1;
    }
    Ok(cases)
}

fn child_report() -> Result<String, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let out = Command::new(exe).env(CHILD_ENV, "1").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("child exited with {}", out.status));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn criterion_8(report: &EvalReport) -> Outcome {
    let fifo = fifo_suite();
    let local = report.to_json().map_err(|e| e.to_string());
    let (a, b) = (child_report(), child_report());
    let identical = matches!((&local, &a, &b), (Ok(l), Ok(x), Ok(y)) if l == x && x == y);
    let fifo_text = match &fifo {
        Ok(n) => format!("FIFO oracle agrees on {n} push sequences"),
        Err(e) => format!("FIFO: {e}"),
    };
    let det_text = match (&a, &b) {
        (Ok(x), Ok(_)) if identical => format!("report JSON bit-identical across 2 fresh processes ({} bytes)", x.len()),
        (Err(e), _) | (_, Err(e)) => format!("child process failed: {e}"),
        _ => "report JSON differs between processes".into(),
    };
    pass_if(fifo.is_ok() && identical, format!("{fifo_text}; {det_text}"))
}

fn timed(id: u8, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut outcome = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            outcome.passed = false;
            outcome.detail.push_str(&format!("; exceeded {:.0} s", limit.as_secs_f64()));
        }
    }
    println!(
        "criterion {id} {}: {name}: {} [{:.2} s]",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64()
    );
    outcome.passed
}

fn main() -> ExitCode {
    if std::env::var_os(CHILD_ENV).is_some() {
        return match benchmark_report().and_then(|r| r.to_json()) {
            Ok(json) => {
                print!("{json}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::FAILURE
            }
        };
    }

    let mut all = true;
    all &= timed(1, "k-means matches exhaustive partition optimum", Some(Duration::from_secs(1)), criterion_1);
    all &= timed(2, "shift identity and argmax recovery", Some(Duration::from_secs(10)), criterion_2);
    all &= timed(3, "weighted-log simplex optimum", Some(Duration::from_secs(5)), criterion_3);
    all &= timed(4, "consistency-loss gradient check", Some(Duration::from_secs(30)), criterion_4);
    all &= timed(5, "scale invariances", None, criterion_5);

    let start = Instant::now();
    let report = benchmark_report();
    let elapsed = start.elapsed();
    match &report {
        Ok(r) => {
            all &= timed(6, "benchmark improvement over raw CAM", None, || criterion_6(r, elapsed));
            all &= timed(7, "ablation direction", None, || criterion_7(r));
            all &= timed(8, "FIFO semantics and cross-process determinism", None, || criterion_8(r));
        }
        Err(e) => {
            for (id, name) in [(6, "benchmark improvement over raw CAM"), (7, "ablation direction"), (8, "FIFO semantics and cross-process determinism")] {
                println!("criterion {id} FAIL: {name}: benchmark failed: {e}");
            }
            all = false;
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
