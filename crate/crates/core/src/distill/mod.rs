//! Distillation losses: output matching (vanilla-1/2) and feature matching
//! between recorded taps (n2n, e2e, e2n, v2v) through learned transforms.

mod losses;
mod presets;
mod transform;

use serde::{Deserialize, Serialize};

pub use losses::{
    aggregate_e2n, aggregate_e2n_on_tape, aggregate_v2v, aggregate_v2v_on_tape, feature_loss_on_tape, kd_loss,
    kd_loss_on_tape, loss_feature, loss_vanilla1, loss_vanilla2, teacher_signals, KdTerm, TeacherSignals,
};
pub use presets::{lambda_preset, LambdaPreset, LAMBDA_PRESETS};
pub use transform::{apply_transform, apply_transform_on_tape, TransformParams, TransformSide};

use crate::error::{Error, Result};
use crate::models::{Family, ModelConfig, TapKey, TapKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    None,
    Vanilla1,
    Vanilla2,
    N2n,
    E2e,
    E2n,
    V2v,
}

impl Strategy {
    pub fn is_feature(self) -> bool {
        matches!(self, Strategy::N2n | Strategy::E2e | Strategy::E2n | Strategy::V2v)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Vanilla1 => "vanilla1",
            Strategy::Vanilla2 => "vanilla2",
            Strategy::N2n => "n2n",
            Strategy::E2e => "e2e",
            Strategy::E2n => "e2n",
            Strategy::V2v => "v2v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatLoss {
    #[default]
    Mse,
    Gsp,
    Lsp,
}

/// How teacher features reach the student's feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherAggregation {
    None,
    /// Sum of edge features onto their center atom.
    EdgeToNode,
    /// Edge features weighted by edge unit vectors, summed onto the center
    /// atom.
    EdgeToVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub strategy: Strategy,
    /// Weight of the distillation term in the training loss.
    pub lambda: f64,
    /// Defaults depend on the strategy and the model families.
    pub teacher_tap: Option<TapKey>,
    pub student_tap: Option<TapKey>,
    pub transform_s: TransformKind,
    pub transform_t: TransformKind,
    pub feat_loss: FeatLoss,
    /// Width of the common feature space; defaults to the teacher feature
    /// width.
    pub common_dim: Option<usize>,
    /// Hidden width of MLP transforms; defaults to the common width.
    pub hidden_dim: Option<usize>,
    /// Energy and force weights inside vanilla-1.
    pub alpha_e: f64,
    pub alpha_f: f64,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            lambda: 0.0,
            teacher_tap: None,
            student_tap: None,
            transform_s: TransformKind::Linear,
            transform_t: TransformKind::Identity,
            feat_loss: FeatLoss::Mse,
            common_dim: None,
            hidden_dim: None,
            alpha_e: 1.0,
            alpha_f: 100.0,
        }
    }
}

/// A [`KDConfig`] checked against a concrete student/teacher pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KdPlan {
    pub strategy: Strategy,
    pub lambda: f64,
    pub teacher_tap: Option<TapKey>,
    pub student_tap: Option<TapKey>,
    pub aggregation: TeacherAggregation,
    pub transform_s: TransformKind,
    pub transform_t: TransformKind,
    pub feat_loss: FeatLoss,
    /// Column widths of student and (aggregated) teacher features.
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub common_dim: usize,
    pub hidden_dim: usize,
    /// Features are `3N x d` vector matrices.
    pub vector: bool,
    pub alpha_e: f64,
    pub alpha_f: f64,
}

fn default_edge_tap(cfg: &ModelConfig) -> Option<TapKey> {
    match cfg.family {
        Family::G => Some(TapKey::new(1, TapKind::AggregatedOutputEdge)),
        _ => None,
    }
}

fn default_vector_tap(cfg: &ModelConfig) -> Option<TapKey> {
    match cfg.family {
        Family::P => Some(TapKey::new(2 * cfg.depth - 1, TapKind::NodeVector)),
        _ => None,
    }
}

impl KDConfig {
    pub fn new(strategy: Strategy, lambda: f64) -> Self {
        Self { strategy, lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.alpha_e >= 0.0 && self.alpha_f >= 0.0) {
            return Err(Error::InvalidArgument("vanilla-1 weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Resolves default taps and checks that tap kinds suit the strategy.
    pub fn resolve(&self, student: &ModelConfig, teacher: &ModelConfig) -> Result<KdPlan> {
        self.validate()?;
        let incompatible = |m: String| Err(Error::Incompatible(format!("{}: {m}", self.strategy.as_str())));
        let mut plan = KdPlan {
            strategy: self.strategy,
            lambda: self.lambda,
            teacher_tap: None,
            student_tap: None,
            aggregation: TeacherAggregation::None,
            transform_s: self.transform_s,
            transform_t: self.transform_t,
            feat_loss: self.feat_loss,
            student_dim: 0,
            teacher_dim: 0,
            common_dim: 0,
            hidden_dim: 0,
            vector: false,
            alpha_e: self.alpha_e,
            alpha_f: self.alpha_f,
        };
        if !self.strategy.is_feature() {
            return Ok(plan);
        }
        let (t_default, s_default) = match self.strategy {
            Strategy::N2n => (Some(teacher.default_node_tap()), Some(student.default_node_tap())),
            Strategy::E2e => (default_edge_tap(teacher), default_edge_tap(student)),
            Strategy::E2n => (default_edge_tap(teacher), Some(student.default_node_tap())),
            Strategy::V2v => (
                default_vector_tap(teacher).or_else(|| default_edge_tap(teacher)),
                default_vector_tap(student),
            ),
            _ => unreachable!(),
        };
        let Some(t_tap) = self.teacher_tap.or(t_default) else {
            return incompatible(format!("{} has no default teacher tap", teacher.family));
        };
        let Some(s_tap) = self.student_tap.or(s_default) else {
            return incompatible(format!("{} has no default student tap", student.family));
        };
        let Some(t_width) = teacher.tap_width(t_tap) else {
            return incompatible(format!("teacher {} records no tap {t_tap}", teacher.family));
        };
        let Some(s_width) = student.tap_width(s_tap) else {
            return incompatible(format!("student {} records no tap {s_tap}", student.family));
        };
        let (tk, sk) = (t_tap.kind, s_tap.kind);
        let node = |k: TapKind| !k.is_edge() && !k.is_vector();
        plan.aggregation = match self.strategy {
            Strategy::N2n if (node(tk) && node(sk)) || (tk.is_vector() && sk.is_vector()) => TeacherAggregation::None,
            Strategy::E2e if tk.is_edge() && sk.is_edge() => {
                if teacher.cutoff != student.cutoff || teacher.max_neighbors != student.max_neighbors {
                    return incompatible("teacher and student graphs differ".into());
                }
                TeacherAggregation::None
            }
            Strategy::E2n if tk.is_edge() && node(sk) => TeacherAggregation::EdgeToNode,
            Strategy::V2v if sk.is_vector() && tk.is_vector() => TeacherAggregation::None,
            Strategy::V2v if sk.is_vector() && tk.is_edge() => TeacherAggregation::EdgeToVector,
            _ => return incompatible(format!("teacher tap {t_tap} cannot be paired with student tap {s_tap}")),
        };
        plan.vector = sk.is_vector();
        if plan.vector && (self.transform_s == TransformKind::Mlp || self.transform_t == TransformKind::Mlp) {
            return incompatible("MLP transforms would break the equivariance of vector features".into());
        }
        if self.feat_loss == FeatLoss::Lsp && (sk.is_edge() || plan.vector) {
            return incompatible("lsp is defined for node-scalar features only".into());
        }
        plan.teacher_tap = Some(t_tap);
        plan.student_tap = Some(s_tap);
        plan.student_dim = s_width;
        plan.teacher_dim = t_width;
        plan.common_dim = self.common_dim.unwrap_or(t_width);
        plan.hidden_dim = self.hidden_dim.unwrap_or(plan.common_dim);
        if plan.common_dim == 0 || plan.hidden_dim == 0 {
            return incompatible("common and hidden widths must be positive".into());
        }
        for (kind, width, side) in [(self.transform_s, s_width, "student"), (self.transform_t, t_width, "teacher")] {
            if kind == TransformKind::Identity && width != plan.common_dim {
                return incompatible(format!(
                    "identity {side} transform needs width {} to equal the common width {}",
                    width, plan.common_dim
                ));
            }
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests;
