//! Trains one model without distillation and prints per-epoch validation.
//!
//! ```text
//! cargo run --release --example train_baseline -- [S|P|G] [epochs]
//! ```

use molkd::analysis::{evaluate, Thresholds};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::models::{Family, ModelConfig};
use molkd::training::{train_run, RunData, TrainConfig};

fn main() -> molkd::Result<()> {
    let family = match std::env::args().nth(1).as_deref() {
        Some("S") => Family::S,
        Some("G") => Family::G,
        _ => Family::P,
    };
    let epochs = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = DataConfig { n_train: 400, n_val_id: 50, n_val_ood: 50, n_test: 100, ..DataConfig::default() };
    let data = generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff)?, 0)?;
    let run = RunData {
        train: &data.train,
        validation: vec![("val-id".into(), &data.val_id[..]), ("val-ood".into(), &data.val_ood[..])],
        ..RunData::default()
    };
    let tcfg = TrainConfig { epochs, ..TrainConfig::default() };
    let result = train_run(&tcfg, &ModelConfig::default_for(family), &run, None, None)?;
    for row in &result.validation {
        println!("epoch {:3} {:8} energy {:8.2} meV  forces {:7.2} meV/A  cos {:.3}", row.epoch, row.split, row.energy_mae, row.force_mae, row.force_cos);
    }
    let test = evaluate(&result.model(), &data.test, Thresholds::default())?;
    println!("{family} test: energy {:.2} meV, forces {:.2} meV/A, EFwT {:.3}", test.energy_mae, test.force_mae, test.efwt);
    Ok(())
}
