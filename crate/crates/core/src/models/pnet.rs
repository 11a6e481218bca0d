use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{dense, dense_init, init_weight, mlp, mlp_init, Bound, Inputs, ModelConfig, Parts, TapKey, TapKind};
use crate::autodiff::{Tape, Tensor};
use crate::error::Result;

const NORM_EPS: f64 = 1e-8;

pub(super) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let (f, v) = (cfg.width, cfg.vector_width);
    let mut p = vec![("embed".to_string(), init_weight(rng, cfg.n_species, f))];
    for l in 0..cfg.depth {
        p.extend(mlp_init(rng, &format!("l{l}.phi"), f, f, f + 2 * v));
        p.extend(dense_init(rng, &format!("l{l}.filter"), cfg.n_rbf, f + 2 * v));
        p.push((format!("l{l}.vec_u"), init_weight(rng, v, v)));
        p.push((format!("l{l}.vec_v"), init_weight(rng, v, v)));
        p.extend(mlp_init(rng, &format!("l{l}.update"), f + v, f, f + 2 * v));
        p.push((format!("l{l}.inner"), init_weight(rng, v, f)));
    }
    p.extend(dense_init(rng, "head.0", f, (f / 2).max(1)));
    p.extend(dense_init(rng, "head.1", (f / 2).max(1), 1));
    p.push(("force".to_string(), init_weight(rng, v, 1)));
    p
}

fn repeat3(n: usize, f: impl Fn(usize) -> usize) -> Arc<[usize]> {
    (0..3 * n).map(|r| f(r / 3) * 3 + r % 3).collect()
}

/// Message passing on scalar features `s` (`N x F`) and vector features `v`
/// (`3N x V`). Vector messages combine neighbor vectors gated by scalars with
/// edge directions weighted by scalars, so `v` rotates with the input.
pub(super) fn forward(cfg: &ModelConfig, b: &Bound, tape: &mut Tape, x: &Inputs) -> Result<Parts> {
    let (f, nv, n, ne) = (cfg.width, cfg.vector_width, x.n, x.n_edges());
    // row 3e+a of an edge-vector matrix <- row e of an edge matrix, etc.
    let edge_rep: Arc<[usize]> = (0..3 * ne).map(|r| r / 3).collect();
    let atom_rep: Arc<[usize]> = (0..3 * n).map(|r| r / 3).collect();
    let vec_dst = repeat3(ne, |e| x.dst[e]);
    let vec_src = repeat3(ne, |e| x.src[e]);
    let u_flat = tape.reshape(x.u, vec![3 * ne, 1]);
    let eps = tape.constant(Tensor::filled(vec![n, nv], NORM_EPS));

    let mut taps = BTreeMap::new();
    let mut s = tape.matmul(x.onehot, b["embed"]);
    let mut v = tape.constant(Tensor::zeros(vec![3 * n, nv]));
    for l in 0..cfg.depth {
        // message
        let phi = mlp(tape, b, &format!("l{l}.phi"), s);
        let w = dense(tape, b, &format!("l{l}.filter"), x.rbf);
        let w = tape.mul_col(w, x.env);
        let phi_j = tape.gather(phi, &x.dst)?;
        let m = tape.mul(phi_j, w);
        let ms = tape.slice_cols(m, 0, f);
        let gate_v = tape.slice_cols(m, f, nv);
        let gate_s = tape.slice_cols(m, f + nv, nv);
        let ds = tape.scatter_sum(ms, &x.src, n)?;
        let v_j = tape.gather(v, &vec_dst)?;
        let gate_v = tape.gather(gate_v, &edge_rep)?;
        let gate_s = tape.gather(gate_s, &edge_rep)?;
        let along = tape.mul(v_j, gate_v);
        let radial = tape.mul_col(gate_s, u_flat);
        let dv = tape.add(along, radial);
        let dv = tape.scatter_sum(dv, &vec_src, 3 * n)?;
        s = tape.add(s, ds);
        v = tape.add(v, dv);
        taps.insert(TapKey::new(2 * l, TapKind::NodeScalar), s);
        taps.insert(TapKey::new(2 * l, TapKind::NodeVector), v);

        // update
        let uv = tape.matmul(v, b[&format!("l{l}.vec_u")]);
        let vv = tape.matmul(v, b[&format!("l{l}.vec_v")]);
        let sq = tape.square(vv);
        let sq = tape.scatter_sum(sq, &atom_rep, n)?;
        let sq = tape.add(sq, eps);
        let vnorm = tape.sqrt(sq);
        let cat = tape.concat_cols(&[s, vnorm]);
        let a = mlp(tape, b, &format!("l{l}.update"), cat);
        let a_ss = tape.slice_cols(a, 0, f);
        let a_vv = tape.slice_cols(a, f, nv);
        let a_sv = tape.slice_cols(a, f + nv, nv);
        let prod = tape.mul(uv, vv);
        let inner = tape.scatter_sum(prod, &atom_rep, n)?;
        let gated = tape.mul(a_sv, inner);
        let mixed = tape.matmul(gated, b[&format!("l{l}.inner")]);
        let ds = tape.add(a_ss, mixed);
        let a_vv = tape.gather(a_vv, &atom_rep)?;
        let dv = tape.mul(uv, a_vv);
        s = tape.add(s, ds);
        v = tape.add(v, dv);
        taps.insert(TapKey::new(2 * l + 1, TapKind::NodeScalar), s);
        taps.insert(TapKey::new(2 * l + 1, TapKind::NodeVector), v);
    }
    let e = dense(tape, b, "head.0", s);
    let e = tape.silu(e);
    let per_atom = dense(tape, b, "head.1", e);
    let forces = tape.matmul(v, b["force"]);
    let forces = tape.reshape(forces, vec![n, 3]);
    Ok(Parts { per_atom, forces: Some(forces), taps })
}
