use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{norm, scale, sub, AtomicSystem, Vec3};

/// Morse pair parameters: well depth `depth` (eV), width `width` (1/Å) and
/// equilibrium distance `r_eq` (Å).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorsePair {
    pub depth: f64,
    pub width: f64,
    pub r_eq: f64,
}

impl MorsePair {
    /// `V(r) = D [(1 - e^{-a (r - r_e)})^2 - 1]`, minimum `-D` at `r_e`.
    pub fn energy(&self, r: f64) -> f64 {
        let e = (-self.width * (r - self.r_eq)).exp();
        self.depth * ((1.0 - e) * (1.0 - e) - 1.0)
    }

    pub fn derivative(&self, r: f64) -> f64 {
        let e = (-self.width * (r - self.r_eq)).exp();
        2.0 * self.depth * self.width * e * (1.0 - e)
    }
}

/// Analytic ground truth: pairwise Morse energies within `cutoff` plus a
/// per-species energy offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub n_species: usize,
    /// Upper-triangular table indexed by [`OracleParams::pair_index`].
    pub pairs: Vec<MorsePair>,
    pub offsets: Vec<f64>,
    pub cutoff: f64,
}

impl OracleParams {
    pub fn new(n_species: usize, pairs: Vec<MorsePair>, offsets: Vec<f64>, cutoff: f64) -> Result<Self> {
        let p = Self { n_species, pairs, offsets, cutoff };
        p.validate()?;
        Ok(p)
    }

    /// Deterministic parameters for up to eight species, combined from
    /// per-species radii, depths and widths.
    pub fn standard(n_species: usize, cutoff: f64) -> Result<Self> {
        const RADIUS: [f64; 8] = [1.10, 1.45, 1.80, 1.30, 1.60, 1.20, 1.95, 1.50];
        const DEPTH: [f64; 8] = [1.00, 0.60, 1.40, 0.80, 0.50, 1.20, 0.70, 0.90];
        const WIDTH: [f64; 8] = [1.60, 1.30, 1.20, 1.80, 1.40, 1.70, 1.10, 1.50];
        const OFFSET: [f64; 8] = [-0.50, -1.00, -0.80, -0.30, -0.60, -0.90, -0.40, -0.70];
        if n_species == 0 || n_species > RADIUS.len() {
            return Err(Error::InvalidArgument(format!(
                "standard oracle supports 1..=8 species, got {n_species}"
            )));
        }
        let mut pairs = Vec::new();
        for s in 0..n_species {
            for t in s..n_species {
                pairs.push(MorsePair {
                    depth: (DEPTH[s] * DEPTH[t]).sqrt(),
                    width: 0.5 * (WIDTH[s] + WIDTH[t]),
                    r_eq: 0.5 * (RADIUS[s] + RADIUS[t]),
                });
            }
        }
        Self::new(n_species, pairs, OFFSET[..n_species].to_vec(), cutoff)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.n_species * (self.n_species + 1) / 2;
        if self.pairs.len() != want || self.offsets.len() != self.n_species {
            return Err(Error::ShapeMismatch(format!(
                "oracle for {} species needs {want} pairs and {} offsets",
                self.n_species, self.n_species
            )));
        }
        if self.pairs.iter().any(|p| !(p.depth > 0.0 && p.width > 0.0 && p.r_eq > 0.0)) {
            return Err(Error::InvalidArgument("Morse parameters must be positive".into()));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::InvalidArgument("oracle cutoff must be positive".into()));
        }
        Ok(())
    }

    pub fn pair_index(&self, s: usize, t: usize) -> usize {
        let (a, b) = if s <= t { (s, t) } else { (t, s) };
        a * self.n_species - a * a.saturating_sub(1) / 2 + (b - a)
    }

    pub fn pair(&self, s: usize, t: usize) -> &MorsePair {
        &self.pairs[self.pair_index(s, t)]
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("oracle params serialize");
        hex::encode(Sha256::digest(json))
    }
}

/// Energy and closed-form forces `F = -dE/dX` of the Morse oracle.
pub fn oracle_energy_forces(system: &AtomicSystem, params: &OracleParams) -> Result<(f64, Vec<Vec3>)> {
    system.validate()?;
    if let Some(&s) = system.species.iter().find(|&&s| s >= params.n_species) {
        return Err(Error::InvalidArgument(format!("species {s} unknown to the oracle")));
    }
    let n = system.n_atoms();
    let x = &system.positions;
    let mut energy: f64 = system.species.iter().map(|&s| params.offsets[s]).sum();
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = sub(x[j], x[i]);
            let d = norm(r);
            if d < 1e-8 {
                return Err(Error::DegenerateGeometry(format!("atoms {i} and {j} coincide")));
            }
            if d > params.cutoff {
                continue;
            }
            let pair = params.pair(system.species[i], system.species[j]);
            energy += pair.energy(d);
            // dE/dx_j = V'(d) u_ij, dE/dx_i = -V'(d) u_ij
            let g = scale(r, pair.derivative(d) / d);
            for a in 0..3 {
                forces[i][a] += g[a];
                forces[j][a] -= g[a];
            }
        }
    }
    Ok((energy, forces))
}
