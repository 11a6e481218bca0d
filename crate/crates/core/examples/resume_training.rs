//! Saves a training checkpoint halfway, resumes it, and confirms the result
//! matches an uninterrupted run bit for bit.
//!
//! ```text
//! cargo run --release --example resume_training
//! ```

use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::models::ModelConfig;
use molkd::training::{train_run, train_run_from, RunData, TrainConfig, TrainState};

fn main() -> molkd::Result<()> {
    let cfg = DataConfig { n_train: 64, n_val_id: 0, n_val_ood: 0, n_test: 0, ..DataConfig::default() };
    let data = generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff)?, 0)?;
    let run = RunData { train: &data.train, ..RunData::default() };
    let model = ModelConfig { depth: 2, ..ModelConfig::snet() };
    let full = TrainConfig { epochs: 4, eval_every: 0, ..TrainConfig::default() };
    let straight = train_run(&full, &model, &run, None, None)?;

    let half = TrainConfig { stop_after_epochs: Some(2), ..full.clone() };
    let first = train_run(&half, &model, &run, None, None)?.state;
    let path = std::env::temp_dir().join("molkd_resume_example.json");
    first.save(&path)?;
    let state = TrainState::load(&path)?;
    let resumed = train_run_from(&full, state, &run, None, None)?;
    println!("steps {} vs {}, identical parameters: {}", straight.state.step, resumed.state.step, straight.state.model == resumed.state.model);
    Ok(())
}
