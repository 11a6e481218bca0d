use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distill::aggregate_e2n;
use crate::error::{Error, Result};
use crate::geometry::AtomicSystem;
use crate::models::{ModelParams, TapKey};
use crate::rng::rng_from_seed;

fn centered(x: &Tensor) -> Tensor {
    let (n, p) = (x.rows(), x.cols());
    let mut mean = vec![0.0; p];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let data = (0..n).flat_map(|r| x.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>()).collect();
    Tensor::matrix(n, p, data)
}

struct Prepared {
    xc: Tensor,
    self_norm: f64,
}

fn prepare(x: &Tensor, what: &str) -> Result<Prepared> {
    if x.rows() < 2 {
        return Err(Error::InvalidArgument(format!("{what}: cka needs at least 2 samples, got {}", x.rows())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{what}: features")));
    }
    let xc = centered(x);
    let self_norm = xc.matmul_t(&xc, true, false).norm_sq().sqrt();
    if !(self_norm > 0.0) {
        return Err(Error::DegenerateGeometry(format!("{what}: features have zero variance")));
    }
    Ok(Prepared { xc, self_norm })
}

fn cka_prepared(x: &Prepared, y: &Prepared) -> f64 {
    let cross = y.xc.matmul_t(&x.xc, true, false).norm_sq();
    (cross / (x.self_norm * y.self_norm)).clamp(0.0, 1.0)
}

/// Linear centered kernel alignment of `n x p` and `n x q` feature matrices.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::ShapeMismatch(format!("cka: {} vs {} samples", x.rows(), y.rows())));
    }
    Ok(cka_prepared(&prepare(x, "x")?, &prepare(y, "y")?))
}

/// Node-level features of one tap: vectors flattened to `N x 3d`, edge taps
/// summed onto their center atoms.
pub fn node_features(model: &ModelParams, system: &AtomicSystem, keys: &[TapKey]) -> Result<Vec<Tensor>> {
    let graph = model.graph(system)?;
    let (_, taps) = model.forward_with_graph(system, &graph)?;
    keys.iter()
        .map(|&k| {
            let t = taps.get(k).ok_or_else(|| Error::Incompatible(format!("{} records no tap {k}", model.family())))?;
            if k.kind.is_edge() {
                aggregate_e2n(t, &graph)
            } else if k.kind.is_vector() {
                let n = t.shape()[0];
                Ok(t.clone().reshaped(vec![n, t.len() / n.max(1)]))
            } else {
                Ok(t.clone())
            }
        })
        .collect()
}

fn stacked(model: &ModelParams, probe: &[AtomicSystem], keys: &[TapKey]) -> Result<Vec<Tensor>> {
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); keys.len()];
    let mut cols = vec![0usize; keys.len()];
    for s in probe {
        for (i, t) in node_features(model, s, keys)?.into_iter().enumerate() {
            cols[i] = t.cols();
            parts[i].extend_from_slice(t.data());
        }
    }
    Ok(parts
        .into_iter()
        .zip(cols)
        .map(|(data, c)| Tensor::matrix(data.len() / c.max(1), c, data))
        .collect())
}

/// Pairwise CKA between taps of two models over pooled probe nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    /// Tap keys of the first model.
    pub rows: Vec<String>,
    /// Tap keys of the second model.
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub n_nodes: usize,
}

impl CkaMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(self.values[r][c])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn cka_matrix(a: &ModelParams, b: &ModelParams, probe: &[AtomicSystem], taps_a: &[TapKey], taps_b: &[TapKey]) -> Result<CkaMatrix> {
    if probe.is_empty() {
        return Err(Error::InvalidArgument("empty probe set".into()));
    }
    let xa = stacked(a, probe, taps_a)?;
    let xb = stacked(b, probe, taps_b)?;
    let pa = xa.iter().zip(taps_a).map(|(x, k)| prepare(x, &k.to_string())).collect::<Result<Vec<_>>>()?;
    let pb = xb.iter().zip(taps_b).map(|(x, k)| prepare(x, &k.to_string())).collect::<Result<Vec<_>>>()?;
    let values = pa.iter().map(|x| pb.iter().map(|y| cka_prepared(x, y)).collect()).collect();
    Ok(CkaMatrix {
        rows: taps_a.iter().map(|k| k.to_string()).collect(),
        cols: taps_b.iter().map(|k| k.to_string()).collect(),
        values,
        n_nodes: xa.first().map_or(0, |x| x.rows()),
    })
}

/// Entry-wise `with_kd - without_kd`.
pub fn cka_gain(with_kd: &CkaMatrix, without_kd: &CkaMatrix) -> Result<CkaMatrix> {
    if with_kd.rows != without_kd.rows || with_kd.cols != without_kd.cols {
        return Err(Error::ShapeMismatch("cka matrices have different labels".into()));
    }
    let values = with_kd
        .values
        .iter()
        .zip(&without_kd.values)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(CkaMatrix { values, ..with_kd.clone() })
}

/// A fixed random subset of `n` systems, in their original order.
pub fn probe_systems(systems: &[AtomicSystem], n: usize, seed: u64) -> Vec<AtomicSystem> {
    let n = n.min(systems.len());
    let mut idx = sample(&mut rng_from_seed(seed), systems.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| systems[i].clone()).collect()
}
