//! Runs every distillation strategy for a few epochs from a briefly trained
//! G-Net teacher into a P-Net student and prints the loss trajectory.
//!
//! ```text
//! cargo run --release --example distill_strategies
//! ```

use molkd::analysis::{evaluate, Thresholds};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::distill::{KDConfig, Strategy};
use molkd::models::ModelConfig;
use molkd::training::{train_run, RunData, TrainConfig};

fn main() -> molkd::Result<()> {
    let cfg = DataConfig { n_train: 200, n_val_id: 50, n_val_ood: 0, n_test: 50, ..DataConfig::default() };
    let data = generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff)?, 0)?;
    let run = RunData { train: &data.train, ..RunData::default() };
    let teacher_cfg = ModelConfig { depth: 2, ..ModelConfig::gnet() };
    let teacher = train_run(&TrainConfig { epochs: 3, seed: 1, ..TrainConfig::default() }, &teacher_cfg, &run, None, None)?.model();

    let tcfg = TrainConfig { epochs: 3, eval_every: 0, ..TrainConfig::default() };
    let strategies = [
        (Strategy::None, 0.0),
        (Strategy::Vanilla1, 1.0),
        (Strategy::Vanilla2, 1.0),
        (Strategy::N2n, 10.0),
        (Strategy::E2n, 1.0),
        (Strategy::V2v, 10.0),
    ];
    for (strategy, lambda) in strategies {
        let kd = KDConfig::new(strategy, lambda);
        let result = train_run(&tcfg, &ModelConfig::pnet(), &run, Some((&kd, &teacher)), None)?;
        let (first, last) = (&result.log[0], &result.log[result.log.len() - 1]);
        let m = evaluate(&result.model(), &data.test, Thresholds::default())?;
        println!(
            "{:9} L_KD {:.3e} -> {:.3e}, test energy {:8.2} meV, forces {:6.2} meV/A, teacher {:.0} ms",
            strategy.as_str(),
            first.l_kd,
            last.l_kd,
            m.energy_mae,
            m.force_mae,
            result.teacher_ms
        );
    }
    Ok(())
}
