//! Synthetic data: random and adversarial rattling labeled by a teacher, and
//! relaxation trajectories under the analytic oracle.
//!
//! ```text
//! cargo run --release --example augment_data
//! ```

use molkd::augment::{generate_trajectories, rattle_all, teacher_label, OracleTeacher, RattleConfig, RattleMode, RelaxationConfig};
use molkd::data::{generate_dataset, DataConfig, OracleParams};
use molkd::models::{ModelConfig, ModelParams};
use molkd::rng::rng_from_seed;

fn main() -> molkd::Result<()> {
    let cfg = DataConfig { n_train: 20, n_val_id: 0, n_val_ood: 0, n_test: 0, ..DataConfig::default() };
    let oracle = OracleParams::standard(cfg.n_species, cfg.cutoff)?;
    let data = generate_dataset(&cfg, &oracle, 0)?;
    let teacher = ModelParams::init(ModelConfig { depth: 2, ..ModelConfig::gnet() }, 1)?;
    let student = ModelParams::init(ModelConfig::pnet(), 2)?;

    let random = rattle_all(&data.train, &RattleConfig::default(), None, 3)?;
    let adv_cfg = RattleConfig { mode: RattleMode::Adversarial, ..RattleConfig::default() };
    let adversarial = rattle_all(&data.train, &adv_cfg, Some((&student, &teacher)), 3)?;
    let labeled = teacher_label(&adversarial, &teacher)?;
    println!("{} random and {} adversarial rattles, first label {:.3} eV", random.len(), labeled.len(), labeled[0].energy.unwrap_or(f64::NAN));

    let oracle_teacher = OracleTeacher { params: oracle, energy_shift_per_atom: data.energy_shift_per_atom };
    let seeds: Vec<_> = data.train.iter().take(5).map(|s| s.unlabeled()).collect();
    let relax = RelaxationConfig { max_steps: 50, subsample_fraction: 0.2, ..RelaxationConfig::default() };
    let frames = generate_trajectories(&oracle_teacher, &seeds, &relax, &mut rng_from_seed(4))?;
    println!("{} relaxation frames from {} seeds", frames.len(), seeds.len());
    Ok(())
}
