//! Sweeps the distillation weight for one teacher/student pair.
//!
//! ```text
//! cargo run --release --example lambda_sweep -- <teacher.json> <epochs> <kd-config-json> <lambda>...
//! ```
//!
//! The KD config is a JSON object such as `{"strategy": "n2n"}`; its lambda
//! is replaced by each swept value. Baselines are cached in the temp directory.


use molkd::analysis::{evaluate, gap_closure, Thresholds};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::distill::KDConfig;
use molkd::models::{ModelConfig, ModelParams};
use molkd::training::{train_run, RunData, TrainConfig};

fn main() -> molkd::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let teacher = ModelParams::load(&args[0])?;
    let epochs: usize = args[1].parse().expect("epochs");
    let kd: KDConfig = serde_json::from_str(&args[2])?;
    let lambdas: Vec<f64> = args[3..].iter().map(|s| s.parse().expect("lambda")).collect();
    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);

    let dcfg = DataConfig::default();
    let data = generate_dataset(&dcfg, &OracleParams::standard(dcfg.n_species, dcfg.cutoff)?, 0)?;
    let run = RunData { train: &data.train, ..RunData::default() };
    let th = Thresholds::default();
    let t = evaluate(&teacher, &data.test, th)?;
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let cache = std::env::temp_dir().join(format!("lambda_sweep_baseline_{epochs}_{seed}.json"));
    let base = match ModelParams::load(&cache) {
        Ok(m) => m,
        Err(_) => {
            let m = train_run(&cfg, &ModelConfig::pnet(), &run, None, None)?.model();
            m.save(&cache)?;
            m
        }
    };
    let base = evaluate(&base, &data.test, th)?;
    println!("teacher {:.2} / {:.2}, baseline {:.2} / {:.2}", t.energy_mae, t.force_mae, base.energy_mae, base.force_mae);
    for lambda in lambdas {
        let kd = KDConfig { lambda, ..kd.clone() };
        let res = train_run(&cfg, &ModelConfig::pnet(), &run, Some((&kd, &teacher)), None)?;
        let s = evaluate(&res.model(), &data.test, th)?;
        let last = &res.log[res.log.len() - 1];
        println!(
            "lambda {lambda}: {:.2} / {:.2}, gap closed {:.1}%, forces {:+.1}%, L_KD {:.3e} -> {:.3e}",
            s.energy_mae,
            s.force_mae,
            gap_closure(base.energy_mae, s.energy_mae, t.energy_mae),
            100.0 * (s.force_mae - base.force_mae) / base.force_mae,
            res.log[0].l_kd,
            last.l_kd,
        );
    }
    Ok(())
}
