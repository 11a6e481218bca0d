//! Teacher/student gap closure with node-to-node distillation.
//!
//! Trains a G-Net teacher and a P-Net student on the default synthetic
//! dataset, then distills the teacher's final node features into the student
//! through an MLP projection and reports how much of the energy-MAE gap
//! closes.
//!
//! ```text
//! cargo run --release --example gap_closure -- [teacher_epochs] [student_epochs] [lambda] [n_seeds]
//! ```

use molkd::analysis::{evaluate, gap_closure, Thresholds};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::distill::{KDConfig, Strategy, TransformKind};
use molkd::models::{ModelConfig, ModelParams};
use molkd::training::{train_run, RunData, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> molkd::Result<()> {
    env_logger::init();
    let teacher_epochs: usize = arg(1, 20);
    let student_epochs: usize = arg(2, 20);
    let lambda: f64 = arg(3, 1000.0);
    let n_seeds: u64 = arg(4, 1);

    let dcfg = DataConfig::default();
    let data = generate_dataset(&dcfg, &OracleParams::standard(dcfg.n_species, dcfg.cutoff)?, 0)?;
    let run = RunData { train: &data.train, validation: vec![("val-id".into(), &data.val_id[..])], ..RunData::default() };

    let cache = std::env::temp_dir().join(format!("gap_closure_teacher_{teacher_epochs}.json"));
    let teacher = match ModelParams::load(&cache) {
        Ok(t) => t,
        Err(_) => {
            let cfg = TrainConfig { epochs: teacher_epochs, seed: 100, ..TrainConfig::default() };
            let t = train_run(&cfg, &ModelConfig::gnet(), &run, None, None)?.model();
            t.save(&cache)?;
            t
        }
    };
    let th = Thresholds::default();
    let t_metrics = evaluate(&teacher, &data.test, th)?;
    println!("teacher: energy {:.2} meV, forces {:.2} meV/A", t_metrics.energy_mae, t_metrics.force_mae);

    for seed in 0..n_seeds {
        let cfg = TrainConfig { epochs: student_epochs, seed, ..TrainConfig::default() };
        let base = train_run(&cfg, &ModelConfig::pnet(), &run, None, None)?.model();
        let kd = KDConfig { transform_s: TransformKind::Mlp, ..KDConfig::new(Strategy::N2n, lambda) };
        let student = train_run(&cfg, &ModelConfig::pnet(), &run, Some((&kd, &teacher)), None)?.model();
        let b = evaluate(&base, &data.test, th)?;
        let s = evaluate(&student, &data.test, th)?;
        println!(
            "seed {seed}: baseline {:.2} / {:.2}, distilled {:.2} / {:.2}, energy gap closed {:.1}%, force change {:+.1}%",
            b.energy_mae,
            b.force_mae,
            s.energy_mae,
            s.force_mae,
            gap_closure(b.energy_mae, s.energy_mae, t_metrics.energy_mae),
            100.0 * (s.force_mae - b.force_mae) / b.force_mae,
        );
    }
    Ok(())
}
