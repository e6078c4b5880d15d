//! Euclidean projection onto the probability simplex and a projected
//! gradient ascent solver for `max Σ_i w_i log s_i` over it.

use crate::error::{Error, Result};

/// Closest point of `{s : s_i >= 0, Σ s_i = 1}` to `v` in Euclidean norm.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn weighted_log(w: &[f64], s: &[f64]) -> f64 {
    w.iter()
        .zip(s)
        .map(|(wi, si)| if *si > 0.0 { wi * si.ln() } else { f64::NEG_INFINITY })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Maximizes `Σ_i w_i log s_i` on the simplex by projected gradient ascent
/// with backtracking, starting from the uniform point.
pub fn maximize_weighted_log(w: &[f64], max_iter: usize) -> Result<AscentResult> {
    if w.is_empty() {
        return Err(Error::Degenerate("empty weight vector".into()));
    }
    if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("weights must be positive".into()));
    }
    let n = w.len();
    let mut s = vec![1.0 / n as f64; n];
    let mut value = weighted_log(w, &s);
    let mut step: f64 = 1e-2;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let grad: Vec<f64> = w.iter().zip(&s).map(|(wi, si)| wi / si).collect();
        let mut moved = false;
        step *= 2.0;
        while step > 1e-300 {
            let trial: Vec<f64> = s.iter().zip(&grad).map(|(si, gi)| si + step * gi).collect();
            let next = project_simplex(&trial);
            let change: f64 = next.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum();
            let gain: f64 = w
                .iter()
                .zip(next.iter().zip(&s))
                .map(|(wi, (a, b))| wi * ((a - b) / b).ln_1p())
                .sum();
            if gain >= 1e-4 * change / step {
                let next_value = weighted_log(w, &next);
                let largest = next
                    .iter()
                    .zip(&s)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                s = next;
                value = next_value;
                moved = largest > 1e-16;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(AscentResult {
        solution: s,
        objective: value,
        iterations,
    })
}
