//! Atomic systems, cutoff graphs, edge geometry and radial bases.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const DEFAULT_CUTOFF: f64 = 6.0;
pub const DEFAULT_MAX_NEIGHBORS: usize = 32;
pub const DEFAULT_N_RBF: usize = 32;
const COINCIDENT_TOL: f64 = 1e-8;

/// Where a system's labels came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Oracle,
    SyntheticTeacher,
    Rattled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtomicSystem {
    pub species: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub energy: Option<f64>,
    pub forces: Option<Vec<Vec3>>,
    pub origin: Origin,
    /// Seed of the RNG stream that produced this system.
    pub provenance: u64,
}

impl AtomicSystem {
    pub fn new(species: Vec<usize>, positions: Vec<Vec3>) -> Result<Self> {
        let sys = Self {
            species,
            positions,
            energy: None,
            forces: None,
            origin: Origin::Oracle,
            provenance: 0,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::InvalidArgument("system has no atoms".into()));
        }
        if self.species.len() != self.positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} species for {} positions",
                self.species.len(),
                self.positions.len()
            )));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("atomic positions".into()));
        }
        if let Some(f) = &self.forces {
            if f.len() != self.species.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} force rows for {} atoms",
                    f.len(),
                    self.species.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.energy.is_some() && self.forces.is_some()
    }

    pub fn unlabeled(&self) -> Self {
        Self { energy: None, forces: None, ..self.clone() }
    }

    /// Positions as an `N x 3` tensor.
    pub fn position_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_atoms(), 3, self.positions.iter().flatten().copied().collect())
    }

    pub fn with_positions(&self, positions: Vec<Vec3>) -> Self {
        Self { positions, ..self.clone() }
    }

    pub fn transformed(&self, rotation: &Mat3, translation: Vec3) -> Self {
        let positions = self
            .positions
            .iter()
            .map(|p| add(rotate(rotation, *p), translation))
            .collect();
        let forces = self
            .forces
            .as_ref()
            .map(|f| f.iter().map(|v| rotate(rotation, *v)).collect());
        Self { positions, forces, ..self.clone() }
    }

    /// Atom `i` of the result is atom `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            species: perm.iter().map(|&i| self.species[i]).collect(),
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            forces: self.forces.as_ref().map(|f| perm.iter().map(|&i| f[i]).collect()),
            ..self.clone()
        }
    }
}

/// Directed cutoff graph. Edge `e = (i, j)` points from the center atom `i`
/// to its neighbor `j`; `u[e] = (x_j - x_i) / |x_j - x_i|`.
#[derive(Clone, Debug)]
pub struct Graph {
    pub n_nodes: usize,
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub edges: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub unit_vectors: Vec<Vec3>,
    /// Edge ids whose center atom is `i`.
    pub neighbor_index: Vec<Vec<usize>>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

impl Graph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    /// Per-edge distances as an `E x 1` tensor.
    pub fn distance_tensor(&self) -> Tensor {
        Tensor::column(self.distances.clone())
    }

    /// Unit vectors as an `E x 3` tensor.
    pub fn unit_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_edges(), 3, self.unit_vectors.iter().flatten().copied().collect())
    }
}

/// Connects every ordered pair within `cutoff`, keeping at most
/// `max_neighbors` nearest neighbors per center atom. Equal distances keep the
/// lower atom index. Edges are ordered by center atom, then neighbor index.
pub fn build_graph(system: &AtomicSystem, cutoff: f64, max_neighbors: usize) -> Result<Graph> {
    if !(cutoff > 0.0) {
        return Err(Error::InvalidArgument(format!("cutoff must be positive, got {cutoff}")));
    }
    if max_neighbors == 0 {
        return Err(Error::InvalidArgument("max_neighbors must be at least 1".into()));
    }
    system.validate()?;
    let n = system.n_atoms();
    let x = &system.positions;

    let mut edges = Vec::new();
    let mut distances = Vec::new();
    let mut unit_vectors = Vec::new();
    let mut neighbor_index = vec![Vec::new(); n];
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = norm(sub(x[j], x[i]));
            if d < COINCIDENT_TOL {
                return Err(Error::DegenerateGeometry(format!("atoms {i} and {j} coincide")));
            }
            if d <= cutoff {
                candidates.push((d, j));
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(max_neighbors);
        candidates.sort_by_key(|c| c.1);
        for &(d, j) in &candidates {
            neighbor_index[i].push(edges.len());
            edges.push((i, j));
            distances.push(d);
            unit_vectors.push(scale(sub(x[j], x[i]), 1.0 / d));
        }
    }
    let src: Arc<[usize]> = edges.iter().map(|e| e.0).collect();
    let dst: Arc<[usize]> = edges.iter().map(|e| e.1).collect();
    Ok(Graph {
        n_nodes: n,
        cutoff,
        max_neighbors,
        edges,
        distances,
        unit_vectors,
        neighbor_index,
        src,
        dst,
    })
}

/// Distances and unit vectors of every graph edge for the given positions.
pub fn edge_geometry(graph: &Graph, positions: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
    if positions.len() != graph.n_nodes {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, got {} positions",
            graph.n_nodes,
            positions.len()
        )));
    }
    let mut d = Vec::with_capacity(graph.n_edges());
    let mut u = Vec::with_capacity(graph.n_edges());
    for &(i, j) in &graph.edges {
        let r = sub(positions[j], positions[i]);
        let len = norm(r);
        if len < COINCIDENT_TOL {
            return Err(Error::DegenerateGeometry(format!("edge ({i}, {j}) has zero length")));
        }
        d.push(len);
        u.push(scale(r, 1.0 / len));
    }
    Ok((d, u))
}

/// Recorded edge geometry: distances `E x 1` and unit vectors `E x 3` as
/// functions of the `N x 3` position variable.
pub fn edge_geometry_on_tape(tape: &mut Tape, graph: &Graph, positions: Var) -> Result<(Var, Var)> {
    let xi = tape.gather(positions, graph.src())?;
    let xj = tape.gather(positions, graph.dst())?;
    let r = tape.sub(xj, xi);
    let d = tape.row_norm(r);
    if tape.value(d).data().iter().any(|&v| v < COINCIDENT_TOL) {
        return Err(Error::DegenerateGeometry("zero-length edge".into()));
    }
    let inv = tape.recip(d);
    let u = tape.mul_col(r, inv);
    Ok((d, u))
}

fn check_rbf(n_rbf: usize, cutoff: f64) -> Result<()> {
    if n_rbf < 1 {
        return Err(Error::InvalidArgument("n_rbf must be at least 1".into()));
    }
    if !(cutoff > 0.0) {
        return Err(Error::InvalidArgument(format!("cutoff must be positive, got {cutoff}")));
    }
    Ok(())
}

/// Gaussian centers evenly spaced on `[0, cutoff]`.
pub fn rbf_centers(n_rbf: usize, cutoff: f64) -> Vec<f64> {
    if n_rbf == 1 {
        return vec![0.0];
    }
    (0..n_rbf).map(|k| cutoff * k as f64 / (n_rbf - 1) as f64).collect()
}

pub fn rbf_gamma(n_rbf: usize, cutoff: f64) -> f64 {
    (n_rbf as f64 / cutoff).powi(2)
}

/// Smooth cosine cutoff: 1 at zero distance, 0 at and beyond the cutoff.
pub fn cosine_envelope(d: f64, cutoff: f64) -> f64 {
    if d >= cutoff {
        0.0
    } else {
        0.5 * ((PI * d / cutoff).cos() + 1.0)
    }
}

/// Gaussian basis without the envelope.
pub fn gaussian_basis(d: f64, n_rbf: usize, cutoff: f64) -> Result<Vec<f64>> {
    check_rbf(n_rbf, cutoff)?;
    let gamma = rbf_gamma(n_rbf, cutoff);
    Ok(rbf_centers(n_rbf, cutoff)
        .into_iter()
        .map(|mu| (-gamma * (d - mu).powi(2)).exp())
        .collect())
}

/// Enveloped Gaussian expansion of each distance, `E x n_rbf`.
pub fn rbf_expand(d: &[f64], n_rbf: usize, cutoff: f64) -> Result<Tensor> {
    check_rbf(n_rbf, cutoff)?;
    let mut data = Vec::with_capacity(d.len() * n_rbf);
    for &dist in d {
        let env = cosine_envelope(dist, cutoff);
        data.extend(gaussian_basis(dist, n_rbf, cutoff)?.into_iter().map(|g| g * env));
    }
    Ok(Tensor::matrix(d.len(), n_rbf, data))
}

/// Recorded cosine envelope of an `E x 1` distance variable. Distances are
/// assumed to lie within the cutoff, which holds for graph edges.
pub fn envelope_on_tape(tape: &mut Tape, d: Var, cutoff: f64) -> Var {
    let a = tape.scale(d, PI / cutoff);
    let c = tape.cos(a);
    let rows = tape.value(d).rows();
    let one = tape.constant(Tensor::filled(vec![rows, 1], 1.0));
    let s = tape.add(c, one);
    tape.scale(s, 0.5)
}

/// Recorded version of [`rbf_expand`] for an `E x 1` distance variable.
pub fn rbf_on_tape(tape: &mut Tape, d: Var, n_rbf: usize, cutoff: f64) -> Result<Var> {
    check_rbf(n_rbf, cutoff)?;
    let gamma = rbf_gamma(n_rbf, cutoff);
    let neg_mu = tape.constant(Tensor::new(
        vec![n_rbf],
        rbf_centers(n_rbf, cutoff).into_iter().map(|m| -m).collect(),
    ));
    let wide = tape.expand_cols(d, n_rbf);
    let shifted = tape.add_row(wide, neg_mu);
    let sq = tape.square(shifted);
    let arg = tape.scale(sq, -gamma);
    let g = tape.exp(arg);
    let env = envelope_on_tape(tape, d, cutoff);
    Ok(tape.mul_col(g, env))
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn rotate(r: &Mat3, v: Vec3) -> Vec3 {
    [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
}

/// Uniformly distributed proper rotation (unit quaternion method).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Random cluster of `n` atoms in a cube of side `box_len` with all pairwise
/// distances at least `min_dist`, species uniform in `0..n_species`. Used for
/// property tests and examples.
pub fn random_cluster<R: Rng + ?Sized>(rng: &mut R, n: usize, n_species: usize, box_len: f64, min_dist: f64) -> AtomicSystem {
    let mut pos: Vec<Vec3> = Vec::with_capacity(n);
    while pos.len() < n {
        let p = [rng.gen::<f64>() * box_len, rng.gen::<f64>() * box_len, rng.gen::<f64>() * box_len];
        if pos.iter().all(|q| norm(sub(p, *q)) >= min_dist) {
            pos.push(p);
        }
    }
    let species = (0..n).map(|_| rng.gen_range(0..n_species)).collect();
    AtomicSystem::new(species, pos).expect("non-empty finite cluster")
}
