use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::AtomicSystem;
use crate::models::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median samples per second over the timed repetitions.
    pub samples_per_sec: f64,
    pub repetitions: Vec<f64>,
    pub n_samples: usize,
}

/// Label-free energy and force predictions over `systems`, timed
/// `repetitions` times after one untimed warmup pass.
pub fn profile_throughput(model: &ModelParams, systems: &[AtomicSystem], repetitions: usize) -> Result<Throughput> {
    if systems.is_empty() {
        return Err(Error::InvalidArgument("cannot profile on an empty dataset".into()));
    }
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let inputs: Vec<AtomicSystem> = systems.iter().map(|s| s.unlabeled()).collect();
    let run = || -> Result<f64> {
        let t0 = Instant::now();
        for s in &inputs {
            std::hint::black_box(model.predict(s)?);
        }
        Ok(inputs.len() as f64 / t0.elapsed().as_secs_f64().max(1e-12))
    };
    run()?;
    let reps = (0..repetitions).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let mut sorted = reps.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
    Ok(Throughput { samples_per_sec: median, repetitions: reps, n_samples: inputs.len() })
}

/// Primitive operations recorded by one prediction, in order.
pub fn inference_trace(model: &ModelParams, system: &AtomicSystem) -> Result<Vec<&'static str>> {
    let graph = model.graph(system)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    model.forward_on_tape(&mut tape, &bound, system, &graph)?;
    Ok(tape.op_names())
}
