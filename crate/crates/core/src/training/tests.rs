use rand::Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{generate_dataset, DataConfig, DatasetSplit, OracleParams};
use crate::distill::{KDConfig, Strategy};
use crate::models::{ModelConfig, ModelParams, ParamStore};
use crate::rng::rng_from_seed;

fn smoke(n_train: usize, seed: u64) -> DatasetSplit {
    let cfg = DataConfig { n_train, n_val_id: 4, n_val_ood: 0, n_test: 0, min_atoms: 4, max_atoms: 8, ..DataConfig::default() };
    generate_dataset(&cfg, &OracleParams::standard(cfg.n_species, cfg.cutoff).unwrap(), seed).unwrap()
}

fn small_snet() -> ModelConfig {
    ModelConfig { depth: 2, width: 16, ..ModelConfig::snet() }
}

fn small_pnet() -> ModelConfig {
    ModelConfig { depth: 2, width: 16, vector_width: 8, ..ModelConfig::pnet() }
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 4, epochs, seed: 7, eval_every: 0, ..TrainConfig::default() }
}

fn bits(store: &ParamStore) -> Vec<u64> {
    store.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

fn labeled_dimer(e: f64, f: [[f64; 3]; 2]) -> crate::geometry::AtomicSystem {
    let mut s = crate::geometry::AtomicSystem::new(vec![0, 1], vec![[0.0; 3], [1.5, 0.0, 0.0]]).unwrap();
    s.energy = Some(e);
    s.forces = Some(f.to_vec());
    s
}

#[test]
fn composite_loss_examples() {
    let cfg = TrainConfig::default();
    let sys = labeled_dimer(1.0, [[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]);
    let perfect = crate::models::ModelOutput { energy: 1.0, per_atom_energy: vec![0.5, 0.5], forces: sys.forces.clone().unwrap() };
    assert_eq!(composite_loss(&perfect, &sys, 0.0, &cfg, 0.0).unwrap().total, 0.0);
    let off = crate::models::ModelOutput { energy: 3.0, ..perfect.clone() };
    assert_eq!(composite_loss(&off, &sys, 0.0, &cfg, 0.0).unwrap().total, 2.0);

    let mut rng = rng_from_seed(1);
    let pred = crate::models::ModelOutput {
        energy: rng.gen_range(-2.0..2.0),
        per_atom_energy: vec![0.0; 2],
        forces: (0..2).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
    };
    let (kd, lambda) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..5.0));
    let cfg = TrainConfig { alpha_e: 0.7, alpha_f: 13.0, ..TrainConfig::default() };
    let mut f_sum = 0.0;
    for a in 0..2 {
        for k in 0..3 {
            f_sum += (pred.forces[a][k] - sys.forces.as_ref().unwrap()[a][k]).abs();
        }
    }
    let expected = 0.7 * (pred.energy - 1.0).abs() + 13.0 * f_sum / 6.0 + lambda * kd;
    let got = composite_loss(&pred, &sys, kd, &cfg, lambda).unwrap().total;
    assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));

    assert!(matches!(composite_loss(&perfect, &sys.unlabeled(), 0.0, &cfg, 0.0), Err(crate::Error::MissingLabels(_))));
}

#[test]
fn origin_weights_examples() {
    for a in [0.0, 0.3, 1.0] {
        assert_eq!(origin_weights(a, 1.0).unwrap(), (1.0, 1.0));
    }
    assert_eq!(origin_weights(0.0, 3.0).unwrap().1, 1.0);
    assert_eq!(origin_weights(1.0, 3.0).unwrap().0, 1.0);
    assert_eq!(origin_weights(0.5, 2.0).unwrap(), (4.0 / 3.0, 2.0 / 3.0));
    assert!(origin_weights(0.5, 0.0).is_err());
    assert!(origin_weights(0.5, -1.0).is_err());
    assert!(origin_weights(1.5, 1.0).is_err());
}

#[test]
fn origin_weights_constraint_on_grid() {
    for i in 0..=20 {
        for j in 1..=16 {
            let (a, r) = (i as f64 / 20.0, j as f64 / 4.0);
            let (ws, wd) = origin_weights(a, r).unwrap();
            let sum = ws * a + wd * (1.0 - a);
            assert!((sum - 1.0).abs() <= 2.0 * f64::EPSILON, "a={a} r={r} sum={sum}");
            assert_eq!(ws, r / (1.0 - a + a * r));
            // Rational check with a = i/20, r = j/4: w_dft = 80 / (80 - 4i + ij).
            let denom = 80 - 4 * i + i * j;
            assert_eq!(j * 20 * i + 80 * (20 - i), 20 * denom, "constraint in exact arithmetic");
        }
    }
}

#[test]
fn mix_batch_shares() {
    let data = smoke(4, 1);
    let pool = &data.train;
    let mut rng = rng_from_seed(3);
    assert!(mix_batch(pool, &[], 8, 0.0, &mut rng).unwrap().iter().all(|s| !s.synthetic));
    assert!(mix_batch(pool, pool, 8, 1.0, &mut rng).unwrap().iter().all(|s| s.synthetic));
    assert!(mix_batch(pool, &[], 8, 0.5, &mut rng).is_err());
    let mut total = 0usize;
    for _ in 0..10_000 {
        total += mix_batch(pool, pool, 32, 0.5, &mut rng).unwrap().iter().filter(|s| s.synthetic).count();
    }
    let share = total as f64 / (10_000.0 * 32.0);
    assert!((share - 0.5).abs() < 0.02, "{share}");
}

#[test]
fn adam_single_step_closed_form() {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::scalar(0.3));
    let mut m = AdamMoments::new(&p, false);
    let (g, lr) = (0.7, 1e-2);
    m.step(&mut p, &[Tensor::scalar(g)], lr, 0.0, 1);
    let expected = 0.3 - lr * g / (g.abs() + 1e-8);
    assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);

    let mut p = ParamStore::new();
    p.insert("x", Tensor::scalar(0.3));
    let mut m = AdamMoments::new(&p, false);
    m.step(&mut p, &[Tensor::scalar(g)], lr, 0.1, 1);
    let expected = 0.3 * (1.0 - lr * 0.1) - lr * g / (g.abs() + 1e-8);
    assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
}

#[test]
fn clipping_inactive_for_small_gradients() {
    let g = vec![vec![Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3])], vec![Tensor::scalar(0.05)]];
    let (mut a, mut b) = (g.clone(), g.clone());
    clip_grad_norm(&mut a, None);
    clip_grad_norm(&mut b, Some(1e6));
    assert_eq!(a, b);
    let mut c = g.clone();
    let n = clip_grad_norm(&mut c, Some(0.1));
    let after: f64 = c.iter().flatten().map(|t| t.norm_sq()).sum::<f64>().sqrt();
    assert!(n > 0.1 && (after - 0.1).abs() < 1e-5);
}

#[test]
fn schedule_shapes() {
    let cfg = TrainConfig { lr: 1.0, ..TrainConfig::default() };
    assert!((cfg.learning_rate(0, 100) - 0.2).abs() < 1e-12);
    assert!((cfg.learning_rate(4, 100) - 1.0).abs() < 1e-12);
    assert!((cfg.learning_rate(100, 100) - 0.01).abs() < 1e-12);
    assert!(cfg.learning_rate(50, 100) < cfg.learning_rate(20, 100));
    let ms = TrainConfig { lr: 1.0, schedule: Schedule::MilestoneDecay, ..TrainConfig::default() };
    assert_eq!(ms.learning_rate(10, 100), 1.0);
    assert!((ms.learning_rate(60, 100) - 0.45).abs() < 1e-12);
    assert!((ms.learning_rate(80, 100) - 0.45 * 0.45).abs() < 1e-12);
    let c = TrainConfig { schedule: Schedule::Constant, ..TrainConfig::default() };
    assert_eq!(c.learning_rate(77, 100), c.lr);
}

#[test]
fn config_is_strict_and_validated() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "clip_norm": null}"#).unwrap();
    assert_eq!(cfg.clip_norm, None);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.01}"#).is_err());
    assert!(TrainConfig { ema_decay: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha_target: 1.2, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { r_s_dft: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha_f: -1.0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn ema_with_zero_decay_tracks_params() {
    let data = smoke(8, 2);
    let cfg = TrainConfig { ema_decay: 0.0, epochs: 1, ..quick_cfg(1) };
    let r = train_run(&cfg, &small_snet(), &RunData { train: &data.train, ..RunData::default() }, None, None).unwrap();
    assert_eq!(r.state.step, 2);
    assert_eq!(bits(&r.state.ema), bits(&r.state.model.params));
}

#[test]
fn zero_epochs_returns_initial_params() {
    let data = smoke(4, 2);
    let cfg = quick_cfg(0);
    let init = TrainState::new(&cfg, &small_snet(), None).unwrap();
    let r = train_run(&cfg, &small_snet(), &RunData { train: &data.train, ..RunData::default() }, None, None).unwrap();
    assert!(r.log.is_empty());
    assert_eq!(r.model(), init.model);
}

#[test]
fn null_kd_is_bitwise_baseline() {
    let data = smoke(12, 3);
    let teacher = ModelParams::init(small_pnet(), 99).unwrap();
    let cfg = quick_cfg(2);
    let run = RunData { train: &data.train, ..RunData::default() };
    let base = train_run(&cfg, &small_snet(), &run, None, None).unwrap();
    let kd = KDConfig::new(Strategy::N2n, 0.0);
    let null = train_run(&cfg, &small_snet(), &run, Some((&kd, &teacher)), None).unwrap();
    assert_eq!(base.state.step, 6);
    assert_eq!(bits(&base.state.model.params), bits(&null.state.model.params));
    assert_eq!(bits(&base.state.ema), bits(&null.state.ema));
    assert!(null.log.iter().all(|r| r.l_kd > 0.0));
}

#[test]
fn strategy_none_ignores_teacher() {
    let data = smoke(4, 3);
    let teacher = ModelParams::init(small_pnet(), 99).unwrap();
    let cfg = quick_cfg(1);
    let run = RunData { train: &data.train, ..RunData::default() };
    let base = train_run(&cfg, &small_snet(), &run, None, None).unwrap();
    let none = train_run(&cfg, &small_snet(), &run, Some((&KDConfig::default(), &teacher)), None).unwrap();
    assert_eq!(bits(&base.state.model.params), bits(&none.state.model.params));
    assert_eq!(none.teacher_ms, 0.0);
}

#[test]
fn runs_are_deterministic_and_time_the_teacher() {
    let data = smoke(8, 4);
    let teacher = ModelParams::init(small_pnet(), 5).unwrap();
    let cfg = TrainConfig { eval_every: 1, ..quick_cfg(2) };
    let run = RunData { train: &data.train, validation: vec![("val-id".into(), &data.val_id[..])], ..RunData::default() };
    let kd = KDConfig::new(Strategy::N2n, 10.0);
    let strip = |r: &RunResult| r.log.iter().map(|l| (l.step, l.l0_e, l.l0_f, l.l_kd, l.lr)).collect::<Vec<_>>();
    let a = train_run(&cfg, &small_snet(), &run, Some((&kd, &teacher)), None).unwrap();
    let b = train_run(&cfg, &small_snet(), &run, Some((&kd, &teacher)), None).unwrap();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.validation, b.validation);
    assert_eq!(a.validation.len(), 2);
    assert!(a.teacher_ms > 0.0);
    // Cached teacher outputs: no teacher work after the first epoch.
    assert!(a.log[2..].iter().all(|l| l.wall_ms_teacher < l.wall_ms_student));
    let base = train_run(&cfg, &small_snet(), &run, None, None).unwrap();
    assert_eq!(base.teacher_ms, 0.0);
    assert!(base.log.iter().all(|l| l.wall_ms_teacher == 0.0 && l.l_kd == 0.0));
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let data = smoke(8, 5);
    let teacher = ModelParams::init(small_pnet(), 5).unwrap();
    let kd = KDConfig::new(Strategy::N2n, 1.0);
    let cfg = TrainConfig { alpha_target: 0.25, r_s_dft: 2.0, amsgrad: true, ..quick_cfg(4) };
    let synth = smoke(4, 6).train;
    let run = RunData { train: &data.train, synthetic: &synth, ..RunData::default() };
    let full = train_run(&cfg, &small_snet(), &run, Some((&kd, &teacher)), None).unwrap();

    let mut d = crate::training::Distiller::new(teacher.clone(), &kd, &small_snet()).unwrap();
    let state = TrainState::new(&cfg, &small_snet(), Some(&d.plan)).unwrap();
    let half = train_run_from(&TrainConfig { stop_after_epochs: Some(2), ..cfg.clone() }, state, &run, Some(&mut d), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let st = half.state.clone();
    assert_eq!(st.step, 4);
    st.save(&path).unwrap();
    let loaded = TrainState::load(&path).unwrap();
    assert_eq!(loaded, st);
    let rest = train_run_from(&cfg, loaded, &run, Some(&mut d), None).unwrap();
    assert_eq!(bits(&rest.state.model.params), bits(&full.state.model.params));
    assert_eq!(bits(&rest.state.transforms.params), bits(&full.state.transforms.params));
    assert_eq!(rest.log.iter().map(|l| l.l0_e).collect::<Vec<_>>(), full.log[4..].iter().map(|l| l.l0_e).collect::<Vec<_>>());
}

#[test]
fn loss_decreases_on_smoke_set() {
    let data = smoke(16, 8);
    let cfg = TrainConfig { alpha_f: 10.0, epochs: 50, ..quick_cfg(50) };
    let r = train_run(&cfg, &small_snet(), &RunData { train: &data.train, ..RunData::default() }, None, None).unwrap();
    assert_eq!(r.log.len(), 200);
    let windows: Vec<f64> = r
        .log
        .chunks(50)
        .map(|c| c.iter().map(|l| cfg.alpha_e * l.l0_e + cfg.alpha_f * l.l0_f).sum::<f64>() / 50.0)
        .collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn missing_labels_and_teacher_errors() {
    let data = smoke(4, 9);
    let unl: Vec<_> = data.train.iter().map(|s| s.unlabeled()).collect();
    let cfg = quick_cfg(1);
    let err = train_run(&cfg, &small_snet(), &RunData { train: &unl, ..RunData::default() }, None, None);
    assert!(matches!(err, Err(crate::Error::MissingLabels(_))));
    let teacher = ModelParams::init(small_pnet(), 1).unwrap();
    let bad = KDConfig { student_tap: Some(crate::models::TapKey::new(9, crate::models::TapKind::NodeScalar)), ..KDConfig::new(Strategy::N2n, 1.0) };
    assert!(train_run(&cfg, &small_snet(), &RunData { train: &data.train, ..RunData::default() }, Some((&bad, &teacher)), None).is_err());
}

#[test]
fn run_writes_outputs() {
    let data = smoke(4, 10);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { eval_every: 1, ..quick_cfg(1) };
    let run = RunData { train: &data.train, validation: vec![("val-id".into(), &data.val_id[..])], ..RunData::default() };
    let r = train_run(&cfg, &small_snet(), &run, None, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,L0_E,L0_F,L_KD,lr,wall_ms_student,wall_ms_teacher"));
    assert_eq!(ModelParams::load(dir.path().join("model.json")).unwrap(), r.model());
    assert!(dir.path().join("validation.csv").exists());
}
