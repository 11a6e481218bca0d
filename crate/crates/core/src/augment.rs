//! Teacher-labeled augmentation: fixed-norm rattling (random or along the
//! student/teacher discrepancy gradient) and relaxation trajectories.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{oracle_energy_forces, OracleParams};
use crate::error::{Error, Result};
use crate::geometry::{norm, AtomicSystem, Origin, Vec3};
use crate::models::{ModelOutput, ModelParams};
use crate::rng::{rng_from_seed, stream_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RattleMode {
    #[default]
    Random,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RattleConfig {
    /// Norm of the full `3N` displacement, Å.
    pub noise_norm: f64,
    pub mode: RattleMode,
    /// Gradient-ascent step. A single step from zero displacement is
    /// renormalized afterwards, so only its sign matters.
    pub ascent_step: f64,
    /// Rattle every sample of a batch rather than a random subset.
    pub per_batch: bool,
    /// Output-discrepancy weights of the adversarial objective.
    pub alpha_e: f64,
    pub alpha_f: f64,
}

impl Default for RattleConfig {
    fn default() -> Self {
        Self { noise_norm: 0.1, mode: RattleMode::Random, ascent_step: 1.0, per_batch: true, alpha_e: 1.0, alpha_f: 100.0 }
    }
}

impl RattleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_norm >= 0.0 && self.noise_norm.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_norm must be non-negative, got {}", self.noise_norm)));
        }
        if self.mode == RattleMode::Adversarial && !(self.ascent_step > 0.0) {
            return Err(Error::InvalidArgument(format!("ascent_step must be positive, got {}", self.ascent_step)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxationConfig {
    pub max_steps: usize,
    /// Displacement per unit force, Å²/eV.
    pub step_size: f64,
    /// Stop once the largest atomic force is below this, eV/Å.
    pub convergence_fmax: f64,
    /// Fraction of frames kept.
    pub subsample_fraction: f64,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self { max_steps: 200, step_size: 0.02, convergence_fmax: 0.05, subsample_fraction: 0.1 }
    }
}

impl RelaxationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("subsample_fraction must lie in (0, 1], got {}", self.subsample_fraction)));
        }
        if !(self.step_size > 0.0) || !(self.convergence_fmax >= 0.0) {
            return Err(Error::InvalidArgument("step_size must be positive and convergence_fmax non-negative".into()));
        }
        Ok(())
    }
}

/// Anything that can label systems with energies and forces.
pub trait Teacher {
    fn predict(&self, system: &AtomicSystem) -> Result<ModelOutput>;
}

impl Teacher for ModelParams {
    fn predict(&self, system: &AtomicSystem) -> Result<ModelOutput> {
        ModelParams::predict(self, system)
    }
}

/// The analytic Morse oracle used as a teacher. Per-atom energies split the
/// total evenly.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTeacher {
    pub params: OracleParams,
    pub energy_shift_per_atom: f64,
}

impl Teacher for OracleTeacher {
    fn predict(&self, system: &AtomicSystem) -> Result<ModelOutput> {
        let (e, forces) = oracle_energy_forces(system, &self.params)?;
        let n = system.n_atoms() as f64;
        let energy = e - n * self.energy_shift_per_atom;
        Ok(ModelOutput { energy, per_atom_energy: vec![energy / n; system.n_atoms()], forces })
    }
}

fn displaced(system: &AtomicSystem, delta: &[Vec3]) -> AtomicSystem {
    let positions = system.positions.iter().zip(delta).map(|(x, d)| [x[0] + d[0], x[1] + d[1], x[2] + d[2]]).collect();
    AtomicSystem { origin: Origin::Rattled, ..system.with_positions(positions).unlabeled() }
}

fn total_norm(v: &[Vec3]) -> f64 {
    v.iter().map(|a| a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sum::<f64>().sqrt()
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    loop {
        let v: Vec<Vec3> = (0..n).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let len = total_norm(&v);
        if len > 1e-12 {
            return v.into_iter().map(|a| [a[0] / len, a[1] / len, a[2] / len]).collect();
        }
    }
}

fn scaled(v: &[Vec3], k: f64) -> Vec<Vec3> {
    v.iter().map(|a| [a[0] * k, a[1] * k, a[2] * k]).collect()
}

/// Moves all atoms by an isotropic random `3N` displacement of total norm
/// `noise_norm`. The result is unlabeled and tagged as rattled.
pub fn rattle_random(system: &AtomicSystem, noise_norm: f64, rng: &mut ChaCha8Rng) -> AtomicSystem {
    if noise_norm == 0.0 {
        return displaced(system, &vec![[0.0; 3]; system.n_atoms()]);
    }
    let dir = random_direction(rng, system.n_atoms());
    displaced(system, &scaled(&dir, noise_norm))
}

/// Gradient with respect to a displacement `delta` at `delta = 0` of
/// `alpha_e |E_s - E_t| + alpha_f mean |F_s - F_t|`.
pub fn discrepancy_gradient(system: &AtomicSystem, student: &ModelParams, teacher: &ModelParams, alpha_e: f64, alpha_f: f64) -> Result<Vec<Vec3>> {
    let gs = student.graph(system)?;
    let gt = teacher.graph(system)?;
    let mut tape = Tape::new();
    let sb = student.params.bind(&mut tape, false);
    let tb = teacher.params.bind(&mut tape, false);
    let x = tape.leaf(system.position_tensor());
    let fs = student.forward_at(&mut tape, &sb, system, &gs, x)?;
    let ft = teacher.forward_at(&mut tape, &tb, system, &gt, x)?;
    let de = tape.sub(fs.energy, ft.energy);
    let de = tape.abs(de);
    let df = tape.sub(fs.forces, ft.forces);
    let df = tape.abs(df);
    let df = tape.mean(df);
    let de = tape.scale(de, alpha_e);
    let df = tape.scale(df, alpha_f);
    let loss = tape.add(de, df);
    let g = tape.backward(loss, &[x])?.remove(0);
    Ok(g.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// One ascent step on the student/teacher output discrepancy starting from
/// zero displacement, rescaled to `cfg.noise_norm`. A vanishing gradient
/// (for instance identical models) falls back to a random direction.
pub fn rattle_adversarial(
    system: &AtomicSystem,
    student: &ModelParams,
    teacher: &ModelParams,
    cfg: &RattleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AtomicSystem> {
    cfg.validate()?;
    let grad = discrepancy_gradient(system, student, teacher, cfg.alpha_e, cfg.alpha_f)?;
    let step = scaled(&grad, cfg.ascent_step);
    let len = total_norm(&step);
    if !len.is_finite() {
        return Err(Error::NonFinite("discrepancy gradient".into()));
    }
    if len == 0.0 || cfg.noise_norm == 0.0 {
        return Ok(rattle_random(system, cfg.noise_norm, rng));
    }
    Ok(displaced(system, &scaled(&step, cfg.noise_norm / len)))
}

/// Rattles each system according to `cfg`.
pub fn rattle_all(
    systems: &[AtomicSystem],
    cfg: &RattleConfig,
    models: Option<(&ModelParams, &ModelParams)>,
    seed: u64,
) -> Result<Vec<AtomicSystem>> {
    cfg.validate()?;
    systems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_from_seed(stream_seed(seed, &[i as u64]));
            let mut out = match (cfg.mode, models) {
                (RattleMode::Random, _) => rattle_random(s, cfg.noise_norm, &mut rng),
                (RattleMode::Adversarial, Some((student, teacher))) => rattle_adversarial(s, student, teacher, cfg, &mut rng)?,
                (RattleMode::Adversarial, None) => {
                    return Err(Error::Incompatible("adversarial rattling needs a student and a teacher".into()))
                }
            };
            out.provenance = stream_seed(seed, &[i as u64]);
            Ok(out)
        })
        .collect()
}

/// Copies of `systems` carrying the teacher's energies and forces. Rattled
/// systems keep their tag; everything else becomes teacher-labeled.
pub fn teacher_label<T: Teacher + ?Sized>(systems: &[AtomicSystem], teacher: &T) -> Result<Vec<AtomicSystem>> {
    systems
        .iter()
        .map(|s| {
            let out = teacher.predict(s)?;
            let origin = if s.origin == Origin::Rattled { Origin::Rattled } else { Origin::SyntheticTeacher };
            Ok(AtomicSystem { energy: Some(out.energy), forces: Some(out.forces), origin, ..s.clone() })
        })
        .collect()
}

fn fmax(forces: &[Vec3]) -> f64 {
    forces.iter().map(|&f| norm(f)).fold(0.0, f64::max)
}

/// Steepest-descent frames of one system under the teacher's forces,
/// starting frame included. Stops at convergence, after `max_steps` updates,
/// or when the largest force exceeds ten times its initial value (that frame
/// is dropped).
pub fn relax<T: Teacher + ?Sized>(teacher: &T, system: &AtomicSystem, cfg: &RelaxationConfig) -> Result<Vec<AtomicSystem>> {
    cfg.validate()?;
    let mut x = system.unlabeled();
    let mut frames = Vec::new();
    let mut f0 = None;
    for step in 0..=cfg.max_steps {
        let out = teacher.predict(&x)?;
        let f = fmax(&out.forces);
        let start = *f0.get_or_insert(f);
        if !f.is_finite() || (step > 0 && f > 10.0 * start.max(1e-12)) {
            log::warn!("relaxation diverged after {step} steps; trajectory truncated");
            break;
        }
        frames.push(AtomicSystem {
            energy: Some(out.energy),
            forces: Some(out.forces.clone()),
            origin: Origin::SyntheticTeacher,
            ..x.clone()
        });
        if f < cfg.convergence_fmax || step == cfg.max_steps {
            break;
        }
        let positions = x
            .positions
            .iter()
            .zip(&out.forces)
            .map(|(p, g)| [p[0] + cfg.step_size * g[0], p[1] + cfg.step_size * g[1], p[2] + cfg.step_size * g[2]])
            .collect();
        x = x.with_positions(positions);
        x.validate()?;
    }
    Ok(frames)
}

/// Relaxes every seed system with the teacher, keeps a random
/// `subsample_fraction` of each trajectory (at least one frame) and returns
/// the teacher-labeled frames.
pub fn generate_trajectories<T: Teacher + ?Sized>(
    teacher: &T,
    seeds: &[AtomicSystem],
    cfg: &RelaxationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AtomicSystem>> {
    cfg.validate()?;
    let base: u64 = rng.gen();
    let mut out = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        let stream = stream_seed(base, &[i as u64]);
        let frames = relax(teacher, s, cfg)?;
        let keep = ((cfg.subsample_fraction * frames.len() as f64).round() as usize).clamp(1, frames.len());
        let mut idx = sample(&mut rng_from_seed(stream), frames.len(), keep).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|k| AtomicSystem { provenance: stream, ..frames[k].clone() }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataConfig};
    use crate::models::ModelConfig;

    fn systems(n: usize) -> Vec<AtomicSystem> {
        let cfg = DataConfig { n_train: n, n_val_id: 0, n_val_ood: 0, n_test: 0, min_atoms: 4, max_atoms: 8, ..DataConfig::default() };
        generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff).unwrap(), 4).unwrap().train
    }

    fn displacement_norm(a: &AtomicSystem, b: &AtomicSystem) -> f64 {
        let d: Vec<Vec3> = a.positions.iter().zip(&b.positions).map(|(x, y)| [y[0] - x[0], y[1] - x[1], y[2] - x[2]]).collect();
        total_norm(&d)
    }

    #[test]
    fn random_rattle_has_exact_norm() {
        let mut rng = rng_from_seed(1);
        for s in systems(5) {
            for norm in [0.0, 0.1, 0.37] {
                let r = rattle_random(&s, norm, &mut rng);
                assert!((displacement_norm(&s, &r) - norm).abs() < 1e-12);
                assert_eq!(r.origin, Origin::Rattled);
                assert!(!r.is_labeled());
            }
            assert_eq!(rattle_random(&s, 0.0, &mut rng).positions, s.positions);
        }
    }

    #[test]
    fn adversarial_rattle_follows_gradient() {
        let student = ModelParams::init(ModelConfig { depth: 2, width: 16, ..ModelConfig::snet() }, 1).unwrap();
        let teacher = ModelParams::init(ModelConfig { depth: 2, width: 16, vector_width: 8, ..ModelConfig::pnet() }, 2).unwrap();
        let cfg = RattleConfig { mode: RattleMode::Adversarial, noise_norm: 0.1, ..RattleConfig::default() };
        let mut rng = rng_from_seed(2);
        for s in systems(4) {
            let r = rattle_adversarial(&s, &student, &teacher, &cfg, &mut rng).unwrap();
            assert!((displacement_norm(&s, &r) - 0.1).abs() < 1e-12);
            let g = discrepancy_gradient(&s, &student, &teacher, cfg.alpha_e, cfg.alpha_f).unwrap();
            let align: f64 = s
                .positions
                .iter()
                .zip(&r.positions)
                .zip(&g)
                .map(|((x, y), g)| (0..3).map(|k| (y[k] - x[k]) * g[k]).sum::<f64>())
                .sum();
            assert!(align >= 0.0);
            // Aligned with the normalized gradient regardless of the step.
            let cos = align / (0.1 * total_norm(&g));
            assert!((cos - 1.0).abs() < 1e-9, "{cos}");
            let tiny = RattleConfig { ascent_step: 1e-9, ..cfg.clone() };
            let r2 = rattle_adversarial(&s, &student, &teacher, &tiny, &mut rng).unwrap();
            assert!(displacement_norm(&r, &r2) < 1e-12);
        }
    }

    #[test]
    fn adversarial_rattle_falls_back_for_identical_models() {
        let m = ModelParams::init(ModelConfig::snet(), 3).unwrap();
        let s = &systems(1)[0];
        let g = discrepancy_gradient(s, &m, &m, 1.0, 100.0).unwrap();
        assert!(g.iter().flatten().all(|&x| x == 0.0));
        let cfg = RattleConfig { mode: RattleMode::Adversarial, noise_norm: 0.2, ..RattleConfig::default() };
        let r = rattle_adversarial(s, &m, &m, &cfg, &mut rng_from_seed(4)).unwrap();
        assert!((displacement_norm(s, &r) - 0.2).abs() < 1e-12);
        assert_eq!(r.positions, rattle_random(s, 0.2, &mut rng_from_seed(4)).positions);
    }

    #[test]
    fn labels_are_teacher_predictions() {
        let teacher = ModelParams::init(ModelConfig::snet(), 5).unwrap();
        let sys = systems(3);
        let rattled = rattle_all(&sys, &RattleConfig::default(), None, 9).unwrap();
        let labeled = teacher_label(&rattled, &teacher).unwrap();
        let m = crate::analysis::evaluate(&teacher, &labeled, crate::analysis::Thresholds::default()).unwrap();
        assert_eq!((m.energy_mae, m.force_mae), (0.0, 0.0));
        assert!(labeled.iter().all(|s| s.origin == Origin::Rattled && s.energy.unwrap().is_finite()));
        let one_by_one: Vec<_> = rattled.iter().map(|s| teacher_label(std::slice::from_ref(s), &teacher).unwrap().remove(0)).collect();
        assert_eq!(labeled, one_by_one);
        assert_eq!(teacher_label(&sys, &teacher).unwrap()[0].origin, Origin::SyntheticTeacher);
    }

    fn oracle_teacher() -> OracleTeacher {
        OracleTeacher { params: OracleParams::standard(4, 6.0).unwrap(), energy_shift_per_atom: 0.0 }
    }

    #[test]
    fn dimer_relaxes_to_morse_minimum() {
        let t = oracle_teacher();
        let r_eq = t.params.pair(0, 1).r_eq;
        let dimer = AtomicSystem::new(vec![0, 1], vec![[0.0; 3], [r_eq + 0.4, 0.1, 0.0]]).unwrap();
        let cfg = RelaxationConfig { max_steps: 2000, step_size: 0.05, convergence_fmax: 1e-5, subsample_fraction: 1.0 };
        let frames = relax(&t, &dimer, &cfg).unwrap();
        let last = frames.last().unwrap();
        let d = norm(crate::geometry::sub(last.positions[1], last.positions[0]));
        assert!((d - r_eq).abs() < 1e-3, "{d} vs {r_eq}");
        let energies: Vec<f64> = frames.iter().map(|f| f.energy.unwrap()).collect();
        assert!(energies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let all = generate_trajectories(&t, &[dimer.clone()], &cfg, &mut rng_from_seed(0)).unwrap();
        assert_eq!(all.len(), frames.len());
    }

    #[test]
    fn equilibrium_gives_one_frame_and_subsampling() {
        let t = oracle_teacher();
        let r_eq = t.params.pair(0, 0).r_eq;
        let dimer = AtomicSystem::new(vec![0, 0], vec![[0.0; 3], [r_eq, 0.0, 0.0]]).unwrap();
        let cfg = RelaxationConfig { subsample_fraction: 1.0, ..RelaxationConfig::default() };
        assert_eq!(generate_trajectories(&t, &[dimer], &cfg, &mut rng_from_seed(0)).unwrap().len(), 1);

        let seeds = systems(3);
        let full = RelaxationConfig { max_steps: 20, convergence_fmax: 0.0, subsample_fraction: 1.0, ..RelaxationConfig::default() };
        let all = generate_trajectories(&t, &seeds, &full, &mut rng_from_seed(1)).unwrap();
        let part = generate_trajectories(&t, &seeds, &RelaxationConfig { subsample_fraction: 0.25, ..full.clone() }, &mut rng_from_seed(1)).unwrap();
        assert!(part.len() < all.len() && !part.is_empty());
        assert!(part.iter().all(|s| s.is_labeled() && s.origin == Origin::SyntheticTeacher));
        assert!(RelaxationConfig { subsample_fraction: 0.0, ..full }.validate().is_err());
    }
}
