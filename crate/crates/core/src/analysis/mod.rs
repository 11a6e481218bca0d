//! Evaluation metrics, linear CKA similarity and inference throughput.

mod cka;
mod profile;

pub use cka::{cka, cka_gain, cka_matrix, node_features, probe_systems, CkaMatrix};
pub use profile::{inference_trace, profile_throughput, Throughput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, AtomicSystem, Vec3};
use crate::models::{ModelOutput, ModelParams};

/// Energy and force tolerances for the within-threshold rate, in meV and
/// meV/Å.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub energy_mev: f64,
    pub force_mev: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { energy_mev: 20.0, force_mev: 30.0 }
    }
}

/// Errors in meV (energies) and meV/Å (forces).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_mae: f64,
    pub force_mae: f64,
    /// Mean cosine between predicted and reference forces; atoms with a
    /// vanishing reference force are skipped.
    pub force_cos: f64,
    /// Percentage of systems within both thresholds.
    pub efwt: f64,
    pub n_systems: usize,
}

const ZERO_FORCE: f64 = 1e-8;

fn labels(system: &AtomicSystem, index: usize) -> Result<(f64, &[Vec3])> {
    match (system.energy, &system.forces) {
        (Some(e), Some(f)) => Ok((e, f)),
        _ => Err(Error::MissingLabels(format!("system {index} has no energy/force labels"))),
    }
}

/// Metrics of given predictions against the labels of `systems`.
pub fn evaluate_predictions(preds: &[ModelOutput], systems: &[AtomicSystem], thresholds: Thresholds) -> Result<MetricReport> {
    if preds.len() != systems.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} systems", preds.len(), systems.len())));
    }
    if systems.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let (mut e_abs, mut f_abs, mut n_comp) = (0.0, 0.0, 0usize);
    let (mut cos_sum, mut n_cos) = (0.0, 0usize);
    let mut within = 0usize;
    for (i, (p, s)) in preds.iter().zip(systems).enumerate() {
        let (e, f) = labels(s, i)?;
        if p.forces.len() != f.len() {
            return Err(Error::ShapeMismatch(format!("system {i}: {} predicted forces for {} atoms", p.forces.len(), f.len())));
        }
        let de = (p.energy - e).abs();
        e_abs += de;
        let mut max_f = 0.0f64;
        for (fp, ft) in p.forces.iter().zip(f) {
            for a in 0..3 {
                let d = (fp[a] - ft[a]).abs();
                f_abs += d;
                max_f = max_f.max(d);
            }
            n_comp += 3;
            let nt = norm(*ft);
            if nt >= ZERO_FORCE {
                let np = norm(*fp);
                cos_sum += if np > 0.0 { dot(*fp, *ft) / (np * nt) } else { 0.0 };
                n_cos += 1;
            }
        }
        if de * 1e3 <= thresholds.energy_mev && max_f * 1e3 <= thresholds.force_mev {
            within += 1;
        }
    }
    Ok(MetricReport {
        energy_mae: 1e3 * e_abs / systems.len() as f64,
        force_mae: if n_comp > 0 { 1e3 * f_abs / n_comp as f64 } else { 0.0 },
        force_cos: if n_cos > 0 { cos_sum / n_cos as f64 } else { 1.0 },
        efwt: 100.0 * within as f64 / systems.len() as f64,
        n_systems: systems.len(),
    })
}

pub fn evaluate(model: &ModelParams, systems: &[AtomicSystem], thresholds: Thresholds) -> Result<MetricReport> {
    for (i, s) in systems.iter().enumerate() {
        labels(s, i)?;
    }
    let preds = systems.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, systems, thresholds)
}

/// `100 (base - kd) / (base - teacher)`.
pub fn gap_closure(base_mae: f64, kd_mae: f64, teacher_mae: f64) -> f64 {
    100.0 * (base_mae - kd_mae) / (base_mae - teacher_mae)
}
