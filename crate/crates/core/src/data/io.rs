use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::oracle::OracleParams;
use super::{DatasetSplit, SplitName};
use crate::error::{Error, Result};
use crate::geometry::{AtomicSystem, Origin, Vec3};

const FORMAT: &str = "molkd-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    train: usize,
    val_id: usize,
    val_ood: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    oracle_hash: String,
    oracle: Option<OracleParams>,
    energy_shift_per_atom: f64,
    counts: Counts,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemRecord {
    split: SplitName,
    n_atoms: usize,
    species: Vec<usize>,
    positions: Vec<f64>,
    energy: Option<f64>,
    forces: Option<Vec<f64>>,
    origin: Origin,
    seed: u64,
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Writes one header line followed by one JSON record per system.
pub fn write_dataset_to<W: Write>(split: &DatasetSplit, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        seed: split.seed,
        oracle_hash: split.oracle_hash.clone(),
        oracle: split.oracle.clone(),
        energy_shift_per_atom: split.energy_shift_per_atom,
        counts: Counts {
            train: split.train.len(),
            val_id: split.val_id.len(),
            val_ood: split.val_ood.len(),
            test: split.test.len(),
        },
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for name in SplitName::ALL {
        for s in split.split(name) {
            let rec = SystemRecord {
                split: name,
                n_atoms: s.n_atoms(),
                species: s.species.clone(),
                positions: flatten(&s.positions),
                energy: s.energy,
                forces: s.forces.as_deref().map(flatten),
                origin: s.origin,
                seed: s.provenance,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_dataset_to(split, BufWriter::new(f))
}

fn record_error(record: usize, message: impl Into<String>) -> Error {
    Error::Format { record, message: message.into() }
}

/// Parses a dataset. Record numbers in errors are 1-based line numbers.
pub fn read_dataset_from<R: Read>(r: R) -> Result<DatasetSplit> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| record_error(1, "empty file"))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| record_error(1, e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(record_error(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut out = DatasetSplit {
        seed: header.seed,
        oracle_hash: header.oracle_hash,
        oracle: header.oracle,
        energy_shift_per_atom: header.energy_shift_per_atom,
        ..DatasetSplit::default()
    };
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SystemRecord = serde_json::from_str(&line).map_err(|e| record_error(lineno, e.to_string()))?;
        let n = rec.n_atoms;
        if rec.species.len() != n || rec.positions.len() != 3 * n {
            return Err(record_error(lineno, format!("n_atoms {n} disagrees with species/positions")));
        }
        if let Some(f) = &rec.forces {
            if f.len() != 3 * n {
                return Err(record_error(lineno, format!("{} force values for {n} atoms", f.len())));
            }
        }
        let sys = AtomicSystem {
            species: rec.species,
            positions: unflatten(&rec.positions),
            energy: rec.energy,
            forces: rec.forces.as_deref().map(unflatten),
            origin: rec.origin,
            provenance: rec.seed,
        };
        sys.validate().map_err(|e| record_error(lineno, e.to_string()))?;
        out.split_mut(rec.split).push(sys);
    }
    let c = &header.counts;
    let got = [out.train.len(), out.val_id.len(), out.val_ood.len(), out.test.len()];
    let want = [c.train, c.val_id, c.val_ood, c.test];
    if got != want {
        return Err(record_error(
            got.iter().sum::<usize>() + 2,
            format!("truncated dataset: header announces {want:?} systems, found {got:?}"),
        ));
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    read_dataset_from(File::open(path)?)
}

/// Hex SHA-256 of the serialized dataset.
pub fn dataset_hash(split: &DatasetSplit) -> String {
    let mut buf = Vec::new();
    write_dataset_to(split, &mut buf).expect("in-memory write");
    hex::encode(Sha256::digest(&buf))
}
