use super::Strategy;

/// Published distillation weights for full-scale models. Desk-scale runs use
/// much smaller losses and models, so these are starting points to re-tune,
/// not defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaPreset {
    pub teacher: &'static str,
    pub student: &'static str,
    pub strategy: Strategy,
    /// `"oc20"` or `"coll"`.
    pub dataset: &'static str,
    pub lambda: f64,
}

const fn preset(teacher: &'static str, student: &'static str, strategy: Strategy, dataset: &'static str, lambda: f64) -> LambdaPreset {
    LambdaPreset { teacher, student, strategy, dataset, lambda }
}

pub const LAMBDA_PRESETS: &[LambdaPreset] = &[
    preset("gemnet-oc", "painn", Strategy::Vanilla1, "oc20", 1.0),
    preset("gemnet-oc", "painn", Strategy::Vanilla1, "coll", 0.2),
    preset("gemnet-oc", "painn", Strategy::Vanilla2, "oc20", 500.0),
    preset("gemnet-oc", "painn", Strategy::Vanilla2, "coll", 100.0),
    preset("gemnet-oc", "painn", Strategy::N2n, "oc20", 10000.0),
    preset("gemnet-oc", "painn", Strategy::N2n, "coll", 1000.0),
    preset("gemnet-oc", "painn", Strategy::E2n, "oc20", 1000.0),
    preset("gemnet-oc", "painn", Strategy::E2n, "coll", 10.0),
    preset("gemnet-oc", "painn", Strategy::V2v, "oc20", 50000.0),
    preset("gemnet-oc", "painn", Strategy::V2v, "coll", 100.0),
    preset("gemnet-oc", "gemnet-oc-small", Strategy::Vanilla1, "oc20", 0.2),
    preset("gemnet-oc", "gemnet-oc-small", Strategy::Vanilla2, "oc20", 10.0),
    preset("gemnet-oc", "gemnet-oc-small", Strategy::N2n, "oc20", 1000.0),
    preset("gemnet-oc", "gemnet-oc-small", Strategy::E2e, "oc20", 100000.0),
    preset("painn", "painn-small", Strategy::Vanilla1, "oc20", 1.0),
    preset("painn", "painn-small", Strategy::Vanilla1, "coll", 1.0),
    preset("painn", "painn-small", Strategy::Vanilla2, "oc20", 200.0),
    preset("painn", "painn-small", Strategy::Vanilla2, "coll", 100.0),
    preset("painn", "painn-small", Strategy::N2n, "oc20", 100.0),
    preset("painn", "painn-small", Strategy::N2n, "coll", 100.0),
    preset("painn", "painn-small", Strategy::V2v, "oc20", 1000.0),
    preset("painn", "painn-small", Strategy::V2v, "coll", 10000.0),
    preset("painn", "schnet", Strategy::Vanilla1, "oc20", 0.1),
    preset("painn", "schnet", Strategy::Vanilla1, "coll", 1.0),
    preset("painn", "schnet", Strategy::Vanilla2, "oc20", 0.1),
    preset("painn", "schnet", Strategy::Vanilla2, "coll", 100.0),
    preset("painn", "schnet", Strategy::N2n, "oc20", 1000.0),
    preset("painn", "schnet", Strategy::N2n, "coll", 100.0),
];

pub fn lambda_preset(teacher: &str, student: &str, strategy: Strategy, dataset: &str) -> Option<f64> {
    LAMBDA_PRESETS
        .iter()
        .find(|p| p.teacher == teacher && p.student == student && p.strategy == strategy && p.dataset == dataset)
        .map(|p| p.lambda)
}
