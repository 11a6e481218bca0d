use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{AtomicSystem, Graph};
use crate::models::{Bound, ModelOutput, ModelParams, TapeForward};

use super::transform::{apply_transform_on_tape, TransformParams, TransformSide};
use super::{FeatLoss, KdPlan, Strategy, TeacherAggregation};

/// One system's share of a distillation loss. Over a batch the loss is
/// `mean(system) + sum(rows) / total_rows`, which for a single system is
/// [`KdTerm::value`].
#[derive(Clone, Copy, Debug)]
pub struct KdTerm {
    /// Term averaged over systems.
    pub system: Option<Var>,
    /// Sum over rows (atoms, edges or elements), averaged over all rows of a
    /// batch.
    pub rows_sum: Option<Var>,
    pub rows: usize,
}

impl KdTerm {
    pub fn zero() -> Self {
        Self { system: None, rows_sum: None, rows: 0 }
    }

    /// Loss of this system on its own.
    pub fn value(&self, tape: &mut Tape) -> Var {
        let mut out = tape.scalar(0.0);
        if let Some(s) = self.system {
            out = tape.add(out, s);
        }
        if let Some(r) = self.rows_sum {
            if self.rows > 0 {
                let r = tape.scale(r, 1.0 / self.rows as f64);
                out = tape.add(out, r);
            }
        }
        out
    }
}

fn check_rows(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!("{what}: {} rows vs {}", a.rows(), b.rows())));
    }
    Ok(())
}

/// Sums edge features onto the center atom of each edge, `N x d`.
pub fn aggregate_e2n_on_tape(tape: &mut Tape, h_edge: Var, graph: &Graph) -> Result<Var> {
    let rows = tape.value(h_edge).rows();
    if rows != graph.n_edges() {
        return Err(Error::ShapeMismatch(format!("{rows} edge feature rows for {} edges", graph.n_edges())));
    }
    tape.scatter_sum(h_edge, graph.src(), graph.n_nodes)
}

/// Turns every scalar edge channel into a vector along the edge direction and
/// sums onto the center atom: `3N x d`, row `3i + a`.
pub fn aggregate_v2v_on_tape(tape: &mut Tape, h_edge: Var, graph: &Graph) -> Result<Var> {
    let rows = tape.value(h_edge).rows();
    let ne = graph.n_edges();
    if rows != ne {
        return Err(Error::ShapeMismatch(format!("{rows} edge feature rows for {ne} edges")));
    }
    let rep: Arc<[usize]> = (0..3 * ne).map(|r| r / 3).collect();
    let to_atom: Arc<[usize]> = (0..3 * ne).map(|r| 3 * graph.src()[r / 3] + r % 3).collect();
    let u = tape.constant(graph.unit_tensor().reshaped(vec![3 * ne, 1]));
    let h = tape.gather(h_edge, &rep)?;
    let hu = tape.mul_col(h, u);
    tape.scatter_sum(hu, &to_atom, 3 * graph.n_nodes)
}

pub fn aggregate_e2n(h_edge: &Tensor, graph: &Graph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(h_edge.clone());
    let out = aggregate_e2n_on_tape(&mut tape, h, graph)?;
    Ok(tape.value(out).clone())
}

/// Node vectors with shape `[N, 3, d]`.
pub fn aggregate_v2v(h_edge: &Tensor, graph: &Graph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(h_edge.clone());
    let out = aggregate_v2v_on_tape(&mut tape, h, graph)?;
    let t = tape.value(out).clone();
    let d = t.cols();
    Ok(t.reshaped(vec![graph.n_nodes, 3, d]))
}

fn abs_diff_sum(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.sum(d)
}

/// `alpha_e |E_s - E_t| + alpha_f mean |F_s - F_t|`.
fn vanilla1_on_tape(tape: &mut Tape, student: &TapeForward, teacher: &ModelOutput, alpha_e: f64, alpha_f: f64) -> Result<KdTerm> {
    let n = teacher.forces.len();
    if tape.value(student.forces).rows() != n {
        return Err(Error::ShapeMismatch("student and teacher atom counts differ".into()));
    }
    let te = tape.constant(Tensor::scalar(teacher.energy));
    let tf = tape.constant(Tensor::matrix(n, 3, teacher.forces.iter().flatten().copied().collect()));
    let de = tape.sub(student.energy, te);
    let de = tape.abs(de);
    let de = tape.scale(de, alpha_e);
    let df = abs_diff_sum(tape, student.forces, tf);
    let df = tape.scale(df, alpha_f);
    Ok(KdTerm { system: Some(de), rows_sum: Some(df), rows: 3 * n })
}

/// `mean_i |E_i,s - E_i,t|`.
fn vanilla2_on_tape(tape: &mut Tape, student_ei: Var, teacher_ei: &[f64]) -> Result<KdTerm> {
    let n = teacher_ei.len();
    if tape.value(student_ei).len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} student atom energies vs {n} teacher",
            tape.value(student_ei).len()
        )));
    }
    let t = tape.constant(Tensor::matrix(n, 1, teacher_ei.to_vec()));
    let s = tape.reshape(student_ei, vec![n, 1]);
    let sum = abs_diff_sum(tape, s, t);
    Ok(KdTerm { system: None, rows_sum: Some(sum), rows: n })
}

fn row_normalized(tape: &mut Tape, a: Var) -> Var {
    let sq = tape.square(a);
    let ss = tape.sum_cols(sq);
    let rows = tape.value(ss).rows();
    let eps = tape.constant(Tensor::filled(vec![rows, 1], 1e-12));
    let ss = tape.add(ss, eps);
    let norm = tape.sqrt(ss);
    let inv = tape.recip(norm);
    tape.mul_col(a, inv)
}

fn cosine_matrix(tape: &mut Tape, a: Var) -> Var {
    let n = row_normalized(tape, a);
    tape.matmul_t(n, n, false, true)
}

/// Log-softmax of neighbor similarities `<a_i, a_j>` over the edges of each
/// center atom, and the matching probabilities.
fn neighbor_log_softmax(tape: &mut Tape, a: Var, graph: &Graph) -> Result<(Var, Var)> {
    let ai = tape.gather(a, graph.src())?;
    let aj = tape.gather(a, graph.dst())?;
    let prod = tape.mul(ai, aj);
    let sim = tape.sum_cols(prod);
    // the per-atom maximum only stabilizes the exponentials
    let mut max = vec![f64::NEG_INFINITY; graph.n_nodes];
    for (e, &i) in graph.src().iter().enumerate() {
        max[i] = max[i].max(tape.value(sim).data()[e]);
    }
    let shift: Vec<f64> = graph.src().iter().map(|&i| -max[i]).collect();
    let shift = tape.constant(Tensor::matrix(shift.len(), 1, shift));
    let z = tape.add(sim, shift);
    let ez = tape.exp(z);
    let den = tape.scatter_sum(ez, graph.src(), graph.n_nodes)?;
    let den = tape.gather(den, graph.src())?;
    let log_den = tape.log(den);
    let logp = tape.sub(z, log_den);
    let p = tape.exp(logp);
    Ok((logp, p))
}

/// Feature loss between two matrices already in the common space.
pub fn feature_loss_on_tape(tape: &mut Tape, kind: FeatLoss, zs: Var, zt: Var, graph: Option<&Graph>) -> Result<KdTerm> {
    let (a, b) = (tape.value(zs), tape.value(zt));
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "transformed features {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let elements = a.len();
    match kind {
        FeatLoss::Mse => {
            let d = tape.sub(zs, zt);
            let d = tape.square(d);
            let s = tape.sum(d);
            Ok(KdTerm { system: None, rows_sum: Some(s), rows: elements })
        }
        FeatLoss::Gsp => {
            let ss = cosine_matrix(tape, zs);
            let st = cosine_matrix(tape, zt);
            let d = tape.sub(ss, st);
            let d = tape.square(d);
            let m = tape.mean(d);
            Ok(KdTerm { system: Some(m), rows_sum: None, rows: 0 })
        }
        FeatLoss::Lsp => {
            let graph = graph.ok_or_else(|| Error::Incompatible("lsp needs the graph".into()))?;
            if tape.value(zs).rows() != graph.n_nodes {
                return Err(Error::ShapeMismatch("lsp features must have one row per atom".into()));
            }
            let with_neighbors = graph.neighbor_index.iter().filter(|nb| !nb.is_empty()).count();
            if with_neighbors == 0 {
                return Ok(KdTerm::zero());
            }
            let (logp_s, _) = neighbor_log_softmax(tape, zs, graph)?;
            let (logp_t, p_t) = neighbor_log_softmax(tape, zt, graph)?;
            let d = tape.sub(logp_t, logp_s);
            let kl = tape.mul(p_t, d);
            let s = tape.sum(kl);
            Ok(KdTerm { system: None, rows_sum: Some(s), rows: with_neighbors })
        }
    }
}

/// Teacher quantities a distillation loss needs, computed without gradient
/// tracking.
#[derive(Clone, Debug)]
pub struct TeacherSignals {
    pub output: ModelOutput,
    /// Teacher tap after any edge aggregation, in tape layout (`3N x d` for
    /// vector features).
    pub feature: Option<Arc<Tensor>>,
}

pub fn teacher_signals(plan: &KdPlan, teacher: &ModelParams, system: &AtomicSystem, graph: &Graph) -> Result<TeacherSignals> {
    let mut tape = Tape::new();
    let bound = teacher.params.bind(&mut tape, false);
    let fwd = teacher.forward_on_tape(&mut tape, &bound, system, graph)?;
    let feature = match plan.teacher_tap {
        Some(key) if plan.strategy.is_feature() => {
            let h = fwd.tap(key)?;
            let h = match plan.aggregation {
                TeacherAggregation::None => h,
                TeacherAggregation::EdgeToNode => aggregate_e2n_on_tape(&mut tape, h, graph)?,
                TeacherAggregation::EdgeToVector => aggregate_v2v_on_tape(&mut tape, h, graph)?,
            };
            Some(Arc::new(tape.value(h).clone()))
        }
        _ => None,
    };
    Ok(TeacherSignals { output: fwd.output(&tape), feature })
}

/// Distillation term of one system. `transforms` must be bound to the same
/// tape as the student forward pass.
pub fn kd_loss_on_tape(
    tape: &mut Tape,
    plan: &KdPlan,
    student: &TapeForward,
    student_graph: &Graph,
    transforms: &Bound,
    teacher: &TeacherSignals,
) -> Result<KdTerm> {
    match plan.strategy {
        Strategy::None => Ok(KdTerm::zero()),
        Strategy::Vanilla1 => vanilla1_on_tape(tape, student, &teacher.output, plan.alpha_e, plan.alpha_f),
        Strategy::Vanilla2 => vanilla2_on_tape(tape, student.per_atom, &teacher.output.per_atom_energy),
        _ => {
            let key = plan.student_tap.ok_or_else(|| Error::Incompatible("unresolved student tap".into()))?;
            let hs = student.tap(key)?;
            let ht = teacher
                .feature
                .clone()
                .ok_or_else(|| Error::Incompatible("teacher features were not recorded".into()))?;
            check_rows(tape.value(hs), &ht, "student vs teacher features")?;
            let ht = tape.constant_shared(ht);
            let zs = apply_transform_on_tape(tape, transforms, plan.transform_s, TransformSide::Student, hs)?;
            let zt = apply_transform_on_tape(tape, transforms, plan.transform_t, TransformSide::Teacher, ht)?;
            feature_loss_on_tape(tape, plan.feat_loss, zs, zt, Some(student_graph))
        }
    }
}

/// Unscaled distillation loss of a student on one system.
pub fn kd_loss(
    plan: &KdPlan,
    student: &ModelParams,
    teacher: &ModelParams,
    transforms: &TransformParams,
    system: &AtomicSystem,
) -> Result<f64> {
    let signals = match plan.strategy {
        Strategy::None => return Ok(0.0),
        _ => teacher_signals(plan, teacher, system, &teacher.graph(system)?)?,
    };
    let graph = student.graph(system)?;
    let mut tape = Tape::new();
    let sb = student.params.bind(&mut tape, false);
    let tb = transforms.params.bind(&mut tape, false);
    let fwd = student.forward_on_tape(&mut tape, &sb, system, &graph)?;
    let term = kd_loss_on_tape(&mut tape, plan, &fwd, &graph, &tb, &signals)?;
    let v = term.value(&mut tape);
    Ok(tape.item(v))
}

pub fn loss_vanilla1(student: &ModelOutput, teacher: &ModelOutput, alpha_e: f64, alpha_f: f64) -> Result<f64> {
    if student.forces.len() != teacher.forces.len() {
        return Err(Error::ShapeMismatch("student and teacher atom counts differ".into()));
    }
    let n = student.forces.len().max(1);
    let f: f64 = student
        .forces
        .iter()
        .flatten()
        .zip(teacher.forces.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(alpha_e * (student.energy - teacher.energy).abs() + alpha_f * f / (3 * n) as f64)
}

pub fn loss_vanilla2(student_ei: &[f64], teacher_ei: &[f64]) -> Result<f64> {
    if student_ei.len() != teacher_ei.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} atom energies", student_ei.len(), teacher_ei.len())));
    }
    let n = student_ei.len().max(1);
    Ok(student_ei.iter().zip(teacher_ei).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}

/// Feature loss between raw features `hs` and `ht` after the transforms in
/// `transforms`. `[N, 3, d]` inputs are compared as `3N x d` matrices. LSP
/// needs the graph whose edges define the neighbor sets.
pub fn loss_feature(hs: &Tensor, ht: &Tensor, transforms: &TransformParams, kind: FeatLoss, graph: Option<&Graph>) -> Result<f64> {
    let as_matrix = |t: &Tensor| {
        let cols = *t.shape().last().unwrap_or(&1);
        t.clone().reshaped(vec![t.len() / cols.max(1), cols])
    };
    let (hs, ht) = (as_matrix(hs), as_matrix(ht));
    check_rows(&hs, &ht, "feature rows")?;
    let mut tape = Tape::new();
    let bound = transforms.params.bind(&mut tape, false);
    let s = tape.constant(hs);
    let t = tape.constant(ht);
    let zs = apply_transform_on_tape(&mut tape, &bound, transforms.kind(TransformSide::Student), TransformSide::Student, s)?;
    let zt = apply_transform_on_tape(&mut tape, &bound, transforms.kind(TransformSide::Teacher), TransformSide::Teacher, t)?;
    let term = feature_loss_on_tape(&mut tape, kind, zs, zt, graph)?;
    let v = term.value(&mut tape);
    Ok(tape.item(v))
}
