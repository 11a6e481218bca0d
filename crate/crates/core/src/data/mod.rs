//! Analytic ground truth, synthetic dataset generation and dataset files.

mod generate;
mod io;
mod oracle;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use generate::{generate_dataset, DataConfig};
pub use io::{dataset_hash, read_dataset, read_dataset_from, write_dataset, write_dataset_to};
pub use oracle::{oracle_energy_forces, MorsePair, OracleParams};

use crate::error::Result;
use crate::geometry::{AtomicSystem, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    ValId,
    ValOod,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::ValId, SplitName::ValOod, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValId => "val-id",
            SplitName::ValOod => "val-ood",
            SplitName::Test => "test",
        }
    }
}

/// Train / validation (in- and out-of-distribution) / test systems together
/// with the provenance needed to regenerate their labels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<AtomicSystem>,
    pub val_id: Vec<AtomicSystem>,
    pub val_ood: Vec<AtomicSystem>,
    pub test: Vec<AtomicSystem>,
    pub seed: u64,
    pub oracle_hash: String,
    pub oracle: Option<OracleParams>,
    /// Per-atom energy subtracted from every oracle label.
    pub energy_shift_per_atom: f64,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[AtomicSystem] {
        match name {
            SplitName::Train => &self.train,
            SplitName::ValId => &self.val_id,
            SplitName::ValOod => &self.val_ood,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<AtomicSystem> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::ValId => &mut self.val_id,
            SplitName::ValOod => &mut self.val_ood,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        SplitName::ALL.iter().map(|&s| self.split(s).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A split holding only training systems, as used for synthetic data.
    pub fn from_train(train: Vec<AtomicSystem>, seed: u64) -> Self {
        Self { train, seed, ..Self::default() }
    }

    /// Oracle energy and forces with this dataset's energy shift applied.
    pub fn reference_labels(&self, system: &AtomicSystem) -> Result<Option<(f64, Vec<Vec3>)>> {
        let Some(oracle) = &self.oracle else { return Ok(None) };
        let (e, f) = oracle_energy_forces(system, oracle)?;
        Ok(Some((e - system.n_atoms() as f64 * self.energy_shift_per_atom, f)))
    }
}

/// Unordered species pairs occurring among the atoms of `systems`.
pub fn species_pairs(systems: &[AtomicSystem]) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for s in systems {
        for i in 0..s.n_atoms() {
            for j in i + 1..s.n_atoms() {
                let (a, b) = (s.species[i], s.species[j]);
                out.insert((a.min(b), a.max(b)));
            }
        }
    }
    out
}
