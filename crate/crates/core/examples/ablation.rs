//! Runs the component ablation on the default synthetic benchmark and prints
//! one line per variant.
//!
//! Optional arguments: a JSON `DatasetSpec` and a JSON `RunConfig`, each
//! overriding the defaults.

use std::time::Instant;

use cpal_core::ablation::run_ablation;
use cpal_core::pipeline::RunConfig;
use cpal_core::synth::{generate, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = match std::env::args().nth(1) {
        Some(text) => DatasetSpec::from_json_str(&text)?,
        None => DatasetSpec::default(),
    };
    let config = match std::env::args().nth(2) {
        Some(text) => RunConfig::from_json_str(&text)?,
        None => RunConfig::default(),
    };
    let start = Instant::now();
    let data = generate(&spec)?;
    let report = run_ablation(&data, &config)?;
    for v in &report.variants {
        println!(
            "{:<14} miou {:.4} @ t={:.2}  confuser {:?}  ocsem {:?}",
            v.name, v.best_miou, v.best_threshold, v.confuser_rate, v.ocsem
        );
    }
    for row in &report.k_sweep {
        println!("K={:<3} miou {:.4} confuser {:?}", row.k, row.best_miou, row.confuser_rate);
    }
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
