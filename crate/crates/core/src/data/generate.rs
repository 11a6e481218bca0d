use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_energy_forces, OracleParams};
use super::{DatasetSplit, SplitName};
use crate::error::{Error, Result};
use crate::geometry::{add, norm, scale, sub, AtomicSystem, Origin, Vec3};
use crate::rng::{rng_from_seed, stream_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val_id: usize,
    pub n_val_ood: usize,
    pub n_test: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub n_species: usize,
    /// Oracle interaction cutoff in Å.
    pub cutoff: f64,
    /// Upper bound of oracle-gradient steps applied before thermal noise.
    pub relax_steps_max: usize,
    /// Displacement per unit force, Å²/eV.
    pub relax_step_size: f64,
    /// Standard deviation of the Gaussian position noise, Å.
    pub thermal_noise: f64,
    /// Chance that an in-distribution system carries one atom of the
    /// adsorbate species.
    pub adsorbate_probability: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val_id: 300,
            n_val_ood: 300,
            n_test: 400,
            min_atoms: 6,
            max_atoms: 16,
            n_species: 4,
            cutoff: 6.0,
            relax_steps_max: 20,
            relax_step_size: 0.01,
            thermal_noise: 0.05,
            adsorbate_probability: 0.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_species < 3 {
            return Err(Error::InvalidArgument(format!(
                "out-of-distribution split needs at least 3 species, got {}",
                self.n_species
            )));
        }
        if self.min_atoms < 1 || self.min_atoms > self.max_atoms {
            return Err(Error::InvalidArgument("atom count range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.adsorbate_probability) {
            return Err(Error::InvalidArgument("adsorbate_probability must lie in [0, 1]".into()));
        }
        if self.thermal_noise < 0.0 || self.relax_step_size < 0.0 {
            return Err(Error::InvalidArgument("noise and step size must be non-negative".into()));
        }
        Ok(())
    }
}

/// Species layout of the splits. With `K` species the last one, `K - 1`, is
/// the adsorbate and `K - 2` its out-of-distribution partner. In-distribution
/// systems draw from `0..K-1`; when they carry an adsorbate atom they contain
/// no partner atom. Out-of-distribution systems are one partner atom plus
/// adsorbate atoms, so every pair they contain is absent from training.
fn draw_species(rng: &mut ChaCha8Rng, n: usize, k: usize, ood: bool, p_ads: f64) -> Vec<usize> {
    let adsorbate = k - 1;
    let partner = k - 2;
    if ood {
        let mut s = vec![adsorbate; n];
        s[0] = partner;
        return s;
    }
    let mut s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k - 1)).collect();
    if rng.gen::<f64>() < p_ads {
        for x in s.iter_mut().filter(|x| **x == partner) {
            *x = rng.gen_range(0..partner);
        }
        s[0] = adsorbate;
    }
    s
}

fn grow_cluster(rng: &mut ChaCha8Rng, species: &[usize], oracle: &OracleParams) -> Option<Vec<Vec3>> {
    let mut pos: Vec<Vec3> = vec![[0.0; 3]];
    for new in 1..species.len() {
        let mut placed = false;
        for _ in 0..200 {
            let anchor = rng.gen_range(0..pos.len());
            let r_eq = oracle.pair(species[anchor], species[new]).r_eq;
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let cand = add(pos[anchor], scale(dir, r_eq * rng.gen_range(0.9..1.3)));
            let ok = pos.iter().enumerate().all(|(j, &p)| {
                norm(sub(cand, p)) >= 0.75 * oracle.pair(species[j], species[new]).r_eq
            });
            if ok {
                pos.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(pos)
}

fn min_distance(pos: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            best = best.min(norm(sub(pos[i], pos[j])));
        }
    }
    best
}

fn generate_system(seed: u64, cfg: &DataConfig, oracle: &OracleParams, ood: bool) -> Result<AtomicSystem> {
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, cfg.thermal_noise.max(0.0)).expect("finite noise");
    loop {
        let n = rng.gen_range(cfg.min_atoms..=cfg.max_atoms);
        let species = draw_species(&mut rng, n, cfg.n_species, ood, cfg.adsorbate_probability);
        let Some(mut pos) = grow_cluster(&mut rng, &species, oracle) else { continue };
        let steps = rng.gen_range(0..=cfg.relax_steps_max);
        for _ in 0..steps {
            let sys = AtomicSystem::new(species.clone(), pos.clone())?;
            let (_, f) = oracle_energy_forces(&sys, oracle)?;
            for (p, fi) in pos.iter_mut().zip(&f) {
                let mut step = scale(*fi, cfg.relax_step_size);
                let len = norm(step);
                if len > 0.1 {
                    step = scale(step, 0.1 / len);
                }
                *p = add(*p, step);
            }
        }
        if cfg.thermal_noise > 0.0 {
            for p in pos.iter_mut() {
                for x in p.iter_mut() {
                    *x += noise.sample(&mut rng);
                }
            }
        }
        if pos.len() > 1 && min_distance(&pos) < 0.5 {
            continue;
        }
        let mut sys = AtomicSystem::new(species, pos)?;
        let (e, f) = oracle_energy_forces(&sys, oracle)?;
        sys.energy = Some(e);
        sys.forces = Some(f);
        sys.origin = Origin::Oracle;
        sys.provenance = seed;
        return Ok(sys);
    }
}

/// Generates all four splits. The result is a pure function of
/// `(cfg, oracle, seed)`; every system has its own RNG stream.
///
/// Energies are shifted by a per-atom constant chosen so that the training
/// energies have zero mean.
pub fn generate_dataset(cfg: &DataConfig, oracle: &OracleParams, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    oracle.validate()?;
    if oracle.n_species < cfg.n_species {
        return Err(Error::InvalidArgument(format!(
            "oracle knows {} species, data config asks for {}",
            oracle.n_species, cfg.n_species
        )));
    }
    let mut out = DatasetSplit {
        seed,
        oracle_hash: oracle.hash(),
        oracle: Some(oracle.clone()),
        ..DatasetSplit::default()
    };
    let counts = [cfg.n_train, cfg.n_val_id, cfg.n_val_ood, cfg.n_test];
    for (tag, (&name, &count)) in SplitName::ALL.iter().zip(&counts).enumerate() {
        let ood = name == SplitName::ValOod;
        let systems = (0..count)
            .map(|i| generate_system(stream_seed(seed, &[tag as u64, i as u64]), cfg, oracle, ood))
            .collect::<Result<Vec<_>>>()?;
        *out.split_mut(name) = systems;
    }
    let total_e: f64 = out.train.iter().map(|s| s.energy.unwrap_or(0.0)).sum();
    let total_n: usize = out.train.iter().map(|s| s.n_atoms()).sum();
    out.energy_shift_per_atom = if total_n > 0 { total_e / total_n as f64 } else { 0.0 };
    let shift = out.energy_shift_per_atom;
    for name in SplitName::ALL {
        for s in out.split_mut(name) {
            if let Some(e) = s.energy.as_mut() {
                *e -= s.species.len() as f64 * shift;
            }
        }
    }
    Ok(out)
}
