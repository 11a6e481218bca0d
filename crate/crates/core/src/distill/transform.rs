use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{init_bias, init_weight, Bound, ParamStore};
use crate::rng::rng_from_seed;

use super::{KdPlan, TransformKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformSide {
    Student,
    Teacher,
}

impl TransformSide {
    fn prefix(self) -> &'static str {
        match self {
            TransformSide::Student => "s",
            TransformSide::Teacher => "t",
        }
    }
}

/// Learned maps of student and teacher features into the common space.
/// Parameter names are `s.*` for the student side and `t.*` for the teacher
/// side; vector features use bias-free linear maps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformParams {
    pub params: ParamStore,
    pub student: Option<TransformKind>,
    pub teacher: Option<TransformKind>,
    pub bias: bool,
}

impl TransformParams {
    /// No transforms (output-level strategies).
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn init(plan: &KdPlan, seed: u64) -> Self {
        if !plan.strategy.is_feature() {
            return Self::empty();
        }
        let mut rng = rng_from_seed(seed);
        let bias = !plan.vector;
        let mut params = ParamStore::new();
        for (side, kind, dim) in [
            (TransformSide::Student, plan.transform_s, plan.student_dim),
            (TransformSide::Teacher, plan.transform_t, plan.teacher_dim),
        ] {
            let p = side.prefix();
            match kind {
                TransformKind::Identity => {}
                TransformKind::Linear => {
                    params.insert(format!("{p}.w"), init_weight(&mut rng, dim, plan.common_dim));
                    if bias {
                        params.insert(format!("{p}.b"), init_bias(plan.common_dim));
                    }
                }
                TransformKind::Mlp => {
                    params.insert(format!("{p}.0.w"), init_weight(&mut rng, dim, plan.hidden_dim));
                    params.insert(format!("{p}.0.b"), init_bias(plan.hidden_dim));
                    params.insert(format!("{p}.1.w"), init_weight(&mut rng, plan.hidden_dim, plan.common_dim));
                    params.insert(format!("{p}.1.b"), init_bias(plan.common_dim));
                }
            }
        }
        Self { params, student: Some(plan.transform_s), teacher: Some(plan.transform_t), bias }
    }

    pub fn kind(&self, side: TransformSide) -> TransformKind {
        match side {
            TransformSide::Student => self.student,
            TransformSide::Teacher => self.teacher,
        }
        .unwrap_or(TransformKind::Identity)
    }
}

fn param(bound: &Bound, name: String) -> Result<Var> {
    bound.get(&name).ok_or_else(|| Error::Incompatible(format!("missing transform parameter {name}")))
}

/// Maps `h` into the common space: identity, `h W + b`, or
/// `silu(h W0 + b0) W1 + b1`.
pub fn apply_transform_on_tape(tape: &mut Tape, bound: &Bound, kind: TransformKind, side: TransformSide, h: Var) -> Result<Var> {
    let p = side.prefix();
    Ok(match kind {
        TransformKind::Identity => h,
        TransformKind::Linear => {
            let y = tape.matmul(h, param(bound, format!("{p}.w"))?);
            match bound.get(&format!("{p}.b")) {
                Some(b) => tape.add_row(y, b),
                None => y,
            }
        }
        TransformKind::Mlp => {
            let z = tape.linear(h, param(bound, format!("{p}.0.w"))?, param(bound, format!("{p}.0.b"))?);
            let z = tape.silu(z);
            tape.linear(z, param(bound, format!("{p}.1.w"))?, param(bound, format!("{p}.1.b"))?)
        }
    })
}

/// Tensor version of [`apply_transform_on_tape`]. `[N, 3, d]` inputs are
/// treated as `3N x d` matrices.
pub fn apply_transform(h: &Tensor, kind: TransformKind, params: &ParamStore, side: TransformSide) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let cols = *h.shape().last().unwrap_or(&1);
    let flat = h.clone().reshaped(vec![h.len() / cols.max(1), cols]);
    let x = tape.constant(flat);
    let y = apply_transform_on_tape(&mut tape, &bound, kind, side, x)?;
    let out = tape.value(y).clone();
    if kind == TransformKind::Identity {
        return Ok(h.clone());
    }
    if h.shape().len() == 3 {
        let d = out.cols();
        return Ok(out.reshaped(vec![h.shape()[0], 3, d]));
    }
    Ok(out)
}
