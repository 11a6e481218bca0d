use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{dense, dense_init, init_weight, Aggregate, Bound, Inputs, ModelConfig, Parts, TapKey, TapKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

pub(super) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let (h, m, r) = (cfg.width, cfg.edge_width, cfg.n_rbf);
    let blocks = if cfg.aggregate == Aggregate::Concat { cfg.depth } else { 1 };
    let mut p = vec![("embed".to_string(), init_weight(rng, cfg.n_species, h))];
    p.extend(dense_init(rng, "edge0.rbf", r, m));
    p.push(("edge0.src".to_string(), init_weight(rng, h, m)));
    p.push(("edge0.dst".to_string(), init_weight(rng, h, m)));
    for b in 0..cfg.depth {
        p.extend(dense_init(rng, &format!("b{b}.edge"), m, m));
        p.push((format!("b{b}.src"), init_weight(rng, h, m)));
        p.push((format!("b{b}.dst"), init_weight(rng, h, m)));
        p.push((format!("b{b}.rbf"), init_weight(rng, r, m)));
        p.push((format!("b{b}.gate"), init_weight(rng, r, m)));
        p.extend(dense_init(rng, &format!("b{b}.node"), m, h));
        p.extend(dense_init(rng, &format!("b{b}.out_e"), h, h));
        p.extend(dense_init(rng, &format!("b{b}.out_f"), m, m));
        p.push((format!("b{b}.out_r"), init_weight(rng, r, m)));
    }
    p.extend(dense_init(rng, "energy.0", blocks * h, h));
    p.extend(dense_init(rng, "energy.1", h, 1));
    p.extend(dense_init(rng, "force.0", blocks * m, m));
    p.extend(dense_init(rng, "force.1", m, 1));
    p
}

/// `x W_e + h_i W_s + h_j W_d`, the edge input shared by the embedding and
/// every block.
fn edge_input(tape: &mut Tape, x: &Inputs, h: Var, e: Var, ws: Var, wd: Var) -> Result<Var> {
    let hs = tape.matmul(h, ws);
    let hd = tape.matmul(h, wd);
    let hs = tape.gather(hs, &x.src)?;
    let hd = tape.gather(hd, &x.dst)?;
    let z = tape.add(e, hs);
    Ok(tape.add(z, hd))
}

fn combine(tape: &mut Tape, mode: Aggregate, parts: &[Var]) -> Var {
    match mode {
        Aggregate::Concat => tape.concat_cols(parts),
        Aggregate::Sum => parts[1..].iter().fold(parts[0], |acc, &p| tape.add(acc, p)),
    }
}

/// Node features `h` and edge features `m` updated block by block. Each
/// block emits node (`x_E`) and edge (`x_F`) output features; their aggregate
/// feeds the energy head and a force head whose per-edge scalars multiply
/// the edge unit vectors.
pub(super) fn forward(cfg: &ModelConfig, b: &Bound, tape: &mut Tape, x: &Inputs) -> Result<Parts> {
    let n = x.n;
    let mut taps = BTreeMap::new();
    let mut h = tape.matmul(x.onehot, b["embed"]);
    let e0 = dense(tape, b, "edge0.rbf", x.rbf);
    let m0 = edge_input(tape, x, h, e0, b["edge0.src"], b["edge0.dst"])?;
    let mut m = tape.silu(m0);
    let mut out_e = Vec::with_capacity(cfg.depth);
    let mut out_f = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        let p = |s: &str| format!("b{k}.{s}");
        let em = dense(tape, b, &p("edge"), m);
        let er = tape.matmul(x.rbf, b[&p("rbf")]);
        let e = tape.add(em, er);
        let z = edge_input(tape, x, h, e, b[&p("src")], b[&p("dst")])?;
        let dm = tape.silu(z);
        m = tape.add(m, dm);

        let gate = tape.matmul(x.rbf, b[&p("gate")]);
        let msg = tape.mul(m, gate);
        let agg = tape.scatter_sum(msg, &x.src, n)?;
        let dh = dense(tape, b, &p("node"), agg);
        let dh = tape.silu(dh);
        h = tape.add(h, dh);
        taps.insert(TapKey::new(k, TapKind::NodeScalar), h);
        taps.insert(TapKey::new(k, TapKind::EdgeScalar), m);

        let xe = dense(tape, b, &p("out_e"), h);
        let xe = tape.silu(xe);
        let xf = dense(tape, b, &p("out_f"), m);
        let xf = tape.silu(xf);
        let radial = tape.matmul(x.rbf, b[&p("out_r")]);
        let xf = tape.mul(xf, radial);
        taps.insert(TapKey::new(k, TapKind::OutputBlockNode), xe);
        taps.insert(TapKey::new(k, TapKind::OutputBlockEdge), xf);
        out_e.push(xe);
        out_f.push(xf);
    }
    let xe = combine(tape, cfg.aggregate, &out_e);
    let xf = combine(tape, cfg.aggregate, &out_f);
    taps.insert(TapKey::new(0, TapKind::AggregatedOutputNode), xe);
    taps.insert(TapKey::new(0, TapKind::AggregatedOutputEdge), xf);

    let ze = dense(tape, b, "energy.0", xe);
    let ze = tape.silu(ze);
    taps.insert(TapKey::new(1, TapKind::AggregatedOutputNode), ze);
    let per_atom = dense(tape, b, "energy.1", ze);

    let zf = dense(tape, b, "force.0", xf);
    let zf = tape.silu(zf);
    taps.insert(TapKey::new(1, TapKind::AggregatedOutputEdge), zf);
    let fe = dense(tape, b, "force.1", zf);
    let fe = tape.mul(fe, x.env);
    let fvec = tape.mul_col(x.u, fe);
    let forces = tape.scatter_sum(fvec, &x.src, n)?;
    Ok(Parts { per_atom, forces: Some(forces), taps })
}
