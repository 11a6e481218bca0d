use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{dense, dense_init, mlp, mlp_init, Bound, Inputs, ModelConfig, Parts, TapKey, TapKind};
use crate::autodiff::{Tape, Tensor};
use crate::error::Result;

pub(super) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let f = cfg.width;
    let mut p = vec![("embed".to_string(), super::init_weight(rng, cfg.n_species, f))];
    for l in 0..cfg.depth {
        p.extend(mlp_init(rng, &format!("l{l}.filter"), cfg.n_rbf, f, f));
        p.push((format!("l{l}.in"), super::init_weight(rng, f, f)));
        p.extend(mlp_init(rng, &format!("l{l}.update"), f, f, f));
    }
    p.extend(dense_init(rng, "head.0", f, (f / 2).max(1)));
    p.extend(dense_init(rng, "head.1", (f / 2).max(1), 1));
    p
}

/// Continuous-filter convolutions on distances only; energy from a per-atom
/// readout, forces left to the energy gradient.
pub(super) fn forward(cfg: &ModelConfig, b: &Bound, tape: &mut Tape, x: &Inputs) -> Result<Parts> {
    let mut taps = BTreeMap::new();
    let mut h = tape.matmul(x.onehot, b["embed"]);
    for l in 0..cfg.depth {
        let filt = mlp(tape, b, &format!("l{l}.filter"), x.rbf);
        let filt = tape.mul_col(filt, x.env);
        let hin = tape.matmul(h, b[&format!("l{l}.in")]);
        let hj = tape.gather(hin, &x.dst)?;
        let msg = tape.mul(hj, filt);
        let agg = tape.scatter_sum(msg, &x.src, x.n)?;
        let dh = mlp(tape, b, &format!("l{l}.update"), agg);
        h = tape.add(h, dh);
        taps.insert(TapKey::new(l, TapKind::NodeScalar), h);
    }
    let e = dense(tape, b, "head.0", h);
    let e = tape.silu(e);
    let per_atom = dense(tape, b, "head.1", e);
    Ok(Parts { per_atom, forces: None, taps })
}
