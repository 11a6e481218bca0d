//! Three small model families sharing one feature-tap vocabulary.
//!
//! * S-Net: scalar node features, forces as the negative energy gradient.
//! * P-Net: scalar and equivariant vector node features, direct forces.
//! * G-Net: scalar node and edge features with per-block output features,
//!   direct forces projected on edge directions.
//!
//! Node-vector features live on the tape as `3N x d` matrices (row `3i + a`
//! is component `a` of atom `i`) and are exposed in a [`FeatureTap`] with
//! shape `[N, 3, d]`.

mod gnet;
mod params;
mod pnet;
mod snet;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use params::{init_bias, init_weight, Bound, ParamStore};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    build_graph, edge_geometry_on_tape, envelope_on_tape, rbf_on_tape, AtomicSystem, Graph, Vec3,
    DEFAULT_CUTOFF, DEFAULT_MAX_NEIGHBORS, DEFAULT_N_RBF,
};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    S,
    P,
    G,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::S => "S-Net",
            Family::P => "P-Net",
            Family::G => "G-Net",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapKind {
    NodeScalar,
    EdgeScalar,
    NodeVector,
    OutputBlockNode,
    OutputBlockEdge,
    AggregatedOutputNode,
    AggregatedOutputEdge,
}

impl TapKind {
    pub const ALL: [TapKind; 7] = [
        TapKind::NodeScalar,
        TapKind::EdgeScalar,
        TapKind::NodeVector,
        TapKind::OutputBlockNode,
        TapKind::OutputBlockEdge,
        TapKind::AggregatedOutputNode,
        TapKind::AggregatedOutputEdge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TapKind::NodeScalar => "node-scalar",
            TapKind::EdgeScalar => "edge-scalar",
            TapKind::NodeVector => "node-vector",
            TapKind::OutputBlockNode => "output-block-node",
            TapKind::OutputBlockEdge => "output-block-edge",
            TapKind::AggregatedOutputNode => "aggregated-output-node",
            TapKind::AggregatedOutputEdge => "aggregated-output-edge",
        }
    }

    pub fn is_edge(self) -> bool {
        matches!(self, TapKind::EdgeScalar | TapKind::OutputBlockEdge | TapKind::AggregatedOutputEdge)
    }

    pub fn is_vector(self) -> bool {
        self == TapKind::NodeVector
    }
}

/// Names one recorded feature matrix.
///
/// Block numbering per family:
/// * S-Net: `block` is the interaction layer.
/// * P-Net: `2l` is layer `l` after its message step, `2l + 1` after its
///   update step.
/// * G-Net: node/edge/output-block taps use the block number; aggregated taps
///   use `0` for the raw aggregate and `1` for the hidden layer of the head,
///   just before its final linear map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapKey {
    pub block: usize,
    pub kind: TapKind,
}

impl TapKey {
    pub fn new(block: usize, kind: TapKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for TapKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind.as_str(), self.block)
    }
}

impl FromStr for TapKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("tap key {s:?} is not of the form kind@block"));
        let (kind, block) = s.split_once('@').ok_or_else(bad)?;
        let kind = TapKind::ALL.into_iter().find(|k| k.as_str() == kind).ok_or_else(bad)?;
        let block = block.parse().map_err(|_| bad())?;
        Ok(TapKey { block, kind })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    #[default]
    Sum,
    Concat,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "default_species")]
    pub n_species: usize,
    /// Interaction layers (S, P) or blocks (G).
    pub depth: usize,
    /// Scalar node feature width.
    pub width: usize,
    /// Vector channels (P-Net only).
    #[serde(default)]
    pub vector_width: usize,
    /// Edge feature width (G-Net only).
    #[serde(default)]
    pub edge_width: usize,
    #[serde(default = "default_n_rbf")]
    pub n_rbf: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_max_neighbors")]
    pub max_neighbors: usize,
    #[serde(default)]
    pub aggregate: Aggregate,
}

fn default_species() -> usize {
    4
}
fn default_n_rbf() -> usize {
    DEFAULT_N_RBF
}
fn default_cutoff() -> f64 {
    DEFAULT_CUTOFF
}
fn default_max_neighbors() -> usize {
    DEFAULT_MAX_NEIGHBORS
}

impl ModelConfig {
    pub fn snet() -> Self {
        Self::base(Family::S, 3, 32, 0, 0)
    }

    pub fn pnet() -> Self {
        Self::base(Family::P, 3, 32, 16, 0)
    }

    pub fn gnet() -> Self {
        Self::base(Family::G, 4, 64, 0, 64)
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::S => Self::snet(),
            Family::P => Self::pnet(),
            Family::G => Self::gnet(),
        }
    }

    fn base(family: Family, depth: usize, width: usize, vector_width: usize, edge_width: usize) -> Self {
        Self {
            family,
            n_species: default_species(),
            depth,
            width,
            vector_width,
            edge_width,
            n_rbf: DEFAULT_N_RBF,
            cutoff: DEFAULT_CUTOFF,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            aggregate: Aggregate::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("{} config: {m}", self.family)));
        if self.n_species == 0 || self.depth == 0 || self.width == 0 || self.n_rbf == 0 {
            return bad("species, depth, width and n_rbf must be positive");
        }
        if !(self.cutoff > 0.0) || self.max_neighbors == 0 {
            return bad("cutoff and max_neighbors must be positive");
        }
        match self.family {
            Family::P if self.vector_width == 0 => bad("vector_width must be positive"),
            Family::G if self.edge_width == 0 => bad("edge_width must be positive"),
            _ => Ok(()),
        }
    }

    /// Every tap key the family records.
    pub fn tap_keys(&self) -> Vec<TapKey> {
        let mut keys = Vec::new();
        match self.family {
            Family::S => {
                keys.extend((0..self.depth).map(|l| TapKey::new(l, TapKind::NodeScalar)));
            }
            Family::P => {
                for b in 0..2 * self.depth {
                    keys.push(TapKey::new(b, TapKind::NodeScalar));
                    keys.push(TapKey::new(b, TapKind::NodeVector));
                }
            }
            Family::G => {
                for b in 0..self.depth {
                    keys.push(TapKey::new(b, TapKind::NodeScalar));
                    keys.push(TapKey::new(b, TapKind::EdgeScalar));
                    keys.push(TapKey::new(b, TapKind::OutputBlockNode));
                    keys.push(TapKey::new(b, TapKind::OutputBlockEdge));
                }
                for b in 0..2 {
                    keys.push(TapKey::new(b, TapKind::AggregatedOutputNode));
                    keys.push(TapKey::new(b, TapKind::AggregatedOutputEdge));
                }
            }
        }
        keys.sort();
        keys
    }

    /// Default distillation tap: the last node features before the energy
    /// readout (hidden layer of the aggregated head for G-Net).
    pub fn default_node_tap(&self) -> TapKey {
        match self.family {
            Family::S => TapKey::new(self.depth - 1, TapKind::NodeScalar),
            Family::P => TapKey::new(2 * self.depth - 1, TapKind::NodeScalar),
            Family::G => TapKey::new(1, TapKind::AggregatedOutputNode),
        }
    }

    /// Column count of a tap (per vector component for node-vector taps).
    pub fn tap_width(&self, key: TapKey) -> Option<usize> {
        if !self.tap_keys().contains(&key) {
            return None;
        }
        let blocks = if self.aggregate == Aggregate::Concat { self.depth } else { 1 };
        Some(match (self.family, key.kind) {
            (_, TapKind::NodeVector) => self.vector_width,
            (Family::G, TapKind::EdgeScalar | TapKind::OutputBlockEdge) => self.edge_width,
            (Family::G, TapKind::AggregatedOutputEdge) if key.block == 0 => blocks * self.edge_width,
            (Family::G, TapKind::AggregatedOutputEdge) => self.edge_width,
            (Family::G, TapKind::AggregatedOutputNode) if key.block == 0 => blocks * self.width,
            _ => self.width,
        })
    }
}

/// Predicted total energy, per-atom energies and forces.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub energy: f64,
    pub per_atom_energy: Vec<f64>,
    pub forces: Vec<Vec3>,
}

/// Feature matrices recorded during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTap {
    pub features: BTreeMap<TapKey, Tensor>,
}

impl FeatureTap {
    pub fn get(&self, key: TapKey) -> Option<&Tensor> {
        self.features.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = TapKey> + '_ {
        self.features.keys().copied()
    }
}

/// A forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub positions: Var,
    /// Scalar total energy.
    pub energy: Var,
    /// `N x 1` per-atom energies.
    pub per_atom: Var,
    /// `N x 3` forces.
    pub forces: Var,
    pub taps: BTreeMap<TapKey, Var>,
}

impl TapeForward {
    pub fn output(&self, tape: &Tape) -> ModelOutput {
        let per_atom_energy = tape.value(self.per_atom).data().to_vec();
        let forces = tape.value(self.forces).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        ModelOutput { energy: tape.item(self.energy), per_atom_energy, forces }
    }

    pub fn tap(&self, key: TapKey) -> Result<Var> {
        self.taps
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Incompatible(format!("model records no tap {key}")))
    }

    /// Tap values with node-vector taps reshaped to `[N, 3, d]`.
    pub fn feature_tap(&self, tape: &Tape) -> FeatureTap {
        let features = self
            .taps
            .iter()
            .map(|(&k, &v)| {
                let t = tape.value(v).clone();
                let t = if k.kind.is_vector() {
                    let (rows, cols) = (t.rows(), t.cols());
                    t.reshaped(vec![rows / 3, 3, cols])
                } else {
                    t
                };
                (k, t)
            })
            .collect();
        FeatureTap { features }
    }
}

/// Architecture plus parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ModelParams {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let pairs = match config.family {
            Family::S => snet::init(&config, &mut rng),
            Family::P => pnet::init(&config, &mut rng),
            Family::G => gnet::init(&config, &mut rng),
        };
        Ok(Self { params: params::store_from(pairs)?, config })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn graph(&self, system: &AtomicSystem) -> Result<Graph> {
        build_graph(system, self.config.cutoff, self.config.max_neighbors)
    }

    /// Hex SHA-256 over the architecture and parameter shapes, independent
    /// of parameter values.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update(d.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records a forward pass on `tape` using parameters already bound to it.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &Bound, system: &AtomicSystem, graph: &Graph) -> Result<TapeForward> {
        let positions = tape.leaf(system.position_tensor());
        self.forward_at(tape, bound, system, graph, positions)
    }

    /// Like [`ModelParams::forward_on_tape`] but reads positions from an
    /// existing `N x 3` variable, so callers can differentiate through them.
    pub fn forward_at(&self, tape: &mut Tape, bound: &Bound, system: &AtomicSystem, graph: &Graph, positions: Var) -> Result<TapeForward> {
        let inputs = Inputs::record(tape, &self.config, system, graph, positions)?;
        let parts = match self.config.family {
            Family::S => snet::forward(&self.config, bound, tape, &inputs)?,
            Family::P => pnet::forward(&self.config, bound, tape, &inputs)?,
            Family::G => gnet::forward(&self.config, bound, tape, &inputs)?,
        };
        let energy = tape.sum(parts.per_atom);
        let forces = match parts.forces {
            Some(f) => f,
            None => {
                let g = tape.grad(energy, &[inputs.positions])?;
                tape.neg(g[0])
            }
        };
        Ok(TapeForward { positions: inputs.positions, energy, per_atom: parts.per_atom, forces, taps: parts.taps })
    }

    /// Forward pass on a fresh tape with the graph built from `system`.
    pub fn forward(&self, system: &AtomicSystem) -> Result<(ModelOutput, FeatureTap)> {
        let graph = self.graph(system)?;
        self.forward_with_graph(system, &graph)
    }

    pub fn forward_with_graph(&self, system: &AtomicSystem, graph: &Graph) -> Result<(ModelOutput, FeatureTap)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fwd = self.forward_on_tape(&mut tape, &bound, system, graph)?;
        Ok((fwd.output(&tape), fwd.feature_tap(&tape)))
    }

    /// Energy and forces only.
    pub fn predict(&self, system: &AtomicSystem) -> Result<ModelOutput> {
        let graph = self.graph(system)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fwd = self.forward_on_tape(&mut tape, &bound, system, &graph)?;
        Ok(fwd.output(&tape))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        Self::from_checkpoint(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.checkpoint())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(ckpt)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != 1 {
            return Err(Error::Incompatible(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        let reference = Self::init(ckpt.config.clone(), 0)?;
        if !reference.params.same_layout(&ckpt.params) {
            return Err(Error::ShapeMismatch("checkpoint parameters do not fit its architecture".into()));
        }
        if !ckpt.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self { config: ckpt.config, params: ckpt.params })
    }
}

const CHECKPOINT_FORMAT: &str = "molkd-model";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ParamStore,
}

/// Convenience wrappers that check the family tag.
pub fn forward_snet(params: &ModelParams, system: &AtomicSystem, graph: &Graph) -> Result<(ModelOutput, FeatureTap)> {
    expect_family(params, Family::S)?;
    params.forward_with_graph(system, graph)
}

pub fn forward_pnet(params: &ModelParams, system: &AtomicSystem, graph: &Graph) -> Result<(ModelOutput, FeatureTap)> {
    expect_family(params, Family::P)?;
    params.forward_with_graph(system, graph)
}

pub fn forward_gnet(params: &ModelParams, system: &AtomicSystem, graph: &Graph) -> Result<(ModelOutput, FeatureTap)> {
    expect_family(params, Family::G)?;
    params.forward_with_graph(system, graph)
}

fn expect_family(params: &ModelParams, family: Family) -> Result<()> {
    if params.family() != family {
        return Err(Error::Incompatible(format!("expected {family} parameters, got {}", params.family())));
    }
    Ok(())
}

/// Recorded inputs shared by all families.
pub(crate) struct Inputs {
    pub n: usize,
    pub positions: Var,
    /// `N x n_species` one-hot species.
    pub onehot: Var,
    /// `E x 3` unit vectors.
    pub u: Var,
    /// `E x n_rbf` enveloped radial basis.
    pub rbf: Var,
    /// `E x 1` cosine envelope.
    pub env: Var,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl Inputs {
    fn record(tape: &mut Tape, cfg: &ModelConfig, system: &AtomicSystem, graph: &Graph, positions: Var) -> Result<Self> {
        system.validate()?;
        let n = system.n_atoms();
        if graph.n_nodes != n {
            return Err(Error::ShapeMismatch(format!("graph has {} nodes, system {n} atoms", graph.n_nodes)));
        }
        if graph.cutoff > cfg.cutoff {
            return Err(Error::Incompatible(format!(
                "graph cutoff {} exceeds model cutoff {}",
                graph.cutoff, cfg.cutoff
            )));
        }
        let mut onehot = vec![0.0; n * cfg.n_species];
        for (i, &s) in system.species.iter().enumerate() {
            if s >= cfg.n_species {
                return Err(Error::InvalidArgument(format!("species {s} outside the model's {} species", cfg.n_species)));
            }
            onehot[i * cfg.n_species + s] = 1.0;
        }
        if tape.value(positions).shape() != [n, 3] {
            return Err(Error::ShapeMismatch(format!("positions {:?} for {n} atoms", tape.value(positions).shape())));
        }
        let onehot = tape.constant(Tensor::matrix(n, cfg.n_species, onehot));
        let (d, u) = edge_geometry_on_tape(tape, graph, positions)?;
        let rbf = rbf_on_tape(tape, d, cfg.n_rbf, cfg.cutoff)?;
        let env = envelope_on_tape(tape, d, cfg.cutoff);
        Ok(Self { n, positions, onehot, u, rbf, env, src: graph.src().clone(), dst: graph.dst().clone() })
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// What a family-specific forward hands back.
pub(crate) struct Parts {
    pub per_atom: Var,
    /// `None` means forces come from the energy gradient.
    pub forces: Option<Var>,
    pub taps: BTreeMap<TapKey, Var>,
}

pub(crate) fn dense(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    tape.linear(x, b[&format!("{prefix}.w")], b[&format!("{prefix}.b")])
}

/// `silu(x W1 + b1) W2 + b2`.
pub(crate) fn mlp(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = dense(tape, b, &format!("{prefix}.0"), x);
    let h = tape.silu(h);
    dense(tape, b, &format!("{prefix}.1"), h)
}

pub(crate) fn dense_init(rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Vec<(String, Tensor)> {
    vec![
        (format!("{prefix}.w"), init_weight(rng, fan_in, fan_out)),
        (format!("{prefix}.b"), init_bias(fan_out)),
    ]
}

pub(crate) fn mlp_init(rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Vec<(String, Tensor)> {
    let mut v = dense_init(rng, &format!("{prefix}.0"), fan_in, hidden);
    v.extend(dense_init(rng, &format!("{prefix}.1"), hidden, fan_out));
    v
}

#[cfg(test)]
mod tests;
