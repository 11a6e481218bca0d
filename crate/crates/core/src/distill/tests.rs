use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check, Tape, Tensor};
use crate::geometry::{build_graph, random_cluster, random_rotation, rotate, AtomicSystem, Graph};
use crate::models::{ModelConfig, ModelOutput, ModelParams, ParamStore};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn small(family: Family) -> ModelConfig {
    let mut c = ModelConfig::default_for(family);
    c.width = 8;
    c.vector_width = 4;
    c.edge_width = 6;
    c.n_rbf = 6;
    c.depth = 2;
    c
}

fn output(e: f64, ei: Vec<f64>, f: Vec<[f64; 3]>) -> ModelOutput {
    ModelOutput { energy: e, per_atom_energy: ei, forces: f }
}

fn identity_transforms() -> TransformParams {
    TransformParams { student: Some(TransformKind::Identity), teacher: Some(TransformKind::Identity), ..TransformParams::empty() }
}

#[test]
fn vanilla1_examples() {
    let a = output(2.0, vec![1.0, 1.0], vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
    assert_eq!(loss_vanilla1(&a, &a, 1.0, 100.0).unwrap(), 0.0);
    let b = output(5.0, vec![2.5, 2.5], a.forces.clone());
    assert_eq!(loss_vanilla1(&a, &b, 1.0, 0.0).unwrap(), 3.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rf = |rng: &mut ChaCha8Rng| (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect::<Vec<[f64; 3]>>();
    let s = output(rng.gen(), vec![0.0; 4], rf(&mut rng));
    let t = output(rng.gen(), vec![0.0; 4], rf(&mut rng));
    let mut f = 0.0;
    for i in 0..4 {
        for k in 0..3 {
            f += (s.forces[i][k] - t.forces[i][k]).abs();
        }
    }
    let want = 0.7 * (s.energy - t.energy).abs() + 30.0 * f / 12.0;
    assert!((loss_vanilla1(&s, &t, 0.7, 30.0).unwrap() - want).abs() < 1e-14);
    assert!(loss_vanilla1(&s, &output(0.0, vec![], vec![]), 1.0, 1.0).is_err());
}

#[test]
fn vanilla2_examples() {
    assert_eq!(loss_vanilla2(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(loss_vanilla2(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
    assert_eq!(loss_vanilla2(&[-1.0, -2.0], &[-2.0, -4.0]).unwrap(), 1.5);
    assert!(loss_vanilla2(&[1.0], &[1.0, 2.0]).is_err());
}

fn ring_graph(n: usize) -> (AtomicSystem, Graph) {
    let pos = (0..n)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / n as f64;
            [1.5 * a.cos(), 1.5 * a.sin(), 0.0]
        })
        .collect();
    let s = AtomicSystem::new(vec![0; n], pos).unwrap();
    let g = build_graph(&s, 2.0, 8).unwrap();
    (s, g)
}

#[test]
fn feature_losses_vanish_on_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, g) = ring_graph(6);
    let h = random_tensor(&mut rng, 6, 3);
    for kind in [FeatLoss::Mse, FeatLoss::Gsp, FeatLoss::Lsp] {
        let l = loss_feature(&h, &h, &identity_transforms(), kind, Some(&g)).unwrap();
        assert!(l.abs() < 1e-15, "{kind:?} {l}");
    }
    let shifted = h.map(|x| x + 1.0);
    assert!((loss_feature(&shifted, &h, &identity_transforms(), FeatLoss::Mse, None).unwrap() - 1.0).abs() < 1e-15);
    let other = random_tensor(&mut rng, 5, 3);
    assert!(matches!(loss_feature(&other, &h, &identity_transforms(), FeatLoss::Mse, None), Err(Error::ShapeMismatch(_))));
}

#[test]
fn gsp_matches_brute_force_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let a = random_tensor(&mut rng, 5, 3);
        let b = random_tensor(&mut rng, 5, 3);
        let cos = |t: &Tensor, i: usize, j: usize| {
            let (x, y) = (t.row(i), t.row(j));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            // norms carry the same 1e-12 guard as the implementation
            let nx = (x.iter().map(|p| p * p).sum::<f64>() + 1e-12).sqrt();
            let ny = (y.iter().map(|p| p * p).sum::<f64>() + 1e-12).sqrt();
            dot / (nx * ny)
        };
        let mut want = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                want += (cos(&a, i, j) - cos(&b, i, j)).powi(2);
            }
        }
        want /= 25.0;
        let got = loss_feature(&a, &b, &identity_transforms(), FeatLoss::Gsp, None).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn lsp_matches_direct_kl_and_skips_isolated_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // atoms 0..4 on a ring, atom 4 far away
    let (ring, _) = ring_graph(4);
    let mut pos = ring.positions.clone();
    pos.push([50.0, 0.0, 0.0]);
    let s = AtomicSystem::new(vec![0; 5], pos).unwrap();
    let g = build_graph(&s, 2.5, 8).unwrap();
    assert!(g.neighbor_index[4].is_empty());
    let a = random_tensor(&mut rng, 5, 3);
    let b = random_tensor(&mut rng, 5, 3);
    let dot = |t: &Tensor, i: usize, j: usize| t.row(i).iter().zip(t.row(j)).map(|(p, q)| p * q).sum::<f64>();
    let mut want = 0.0;
    for i in 0..4 {
        let nb: Vec<usize> = g.neighbor_index[i].iter().map(|&e| g.edges[e].1).collect();
        let soft = |t: &Tensor| {
            let z: Vec<f64> = nb.iter().map(|&j| dot(t, i, j).exp()).collect();
            let sum: f64 = z.iter().sum();
            z.into_iter().map(|x| x / sum).collect::<Vec<_>>()
        };
        let (ps, pt) = (soft(&a), soft(&b));
        want += pt.iter().zip(&ps).map(|(t, s)| t * (t / s).ln()).sum::<f64>();
    }
    want /= 4.0;
    let got = loss_feature(&a, &b, &identity_transforms(), FeatLoss::Lsp, Some(&g)).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(got >= 0.0);
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> (AtomicSystem, Graph) {
    let s = random_cluster(rng, n, 3, 3.5, 0.8);
    let g = build_graph(&s, 2.5, 5).unwrap();
    (s, g)
}

#[test]
fn e2n_examples_and_loop_oracle() {
    let s = AtomicSystem::new(vec![0; 3], vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
    let g = build_graph(&s, 1.5, 8).unwrap();
    // edges of atom 0 come first: (0,1), (0,2)
    let mut h = Tensor::zeros(vec![g.n_edges(), 2]);
    h.data_mut()[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let out = aggregate_e2n(&h, &g).unwrap();
    assert_eq!(out.row(0), &[4.0, 6.0]);

    let far = AtomicSystem::new(vec![0; 2], vec![[0.0; 3], [9.0, 0.0, 0.0]]).unwrap();
    let gf = build_graph(&far, 1.5, 8).unwrap();
    assert_eq!(aggregate_e2n(&Tensor::zeros(vec![0, 3]), &gf).unwrap().data(), &[0.0; 6]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, g) = random_graph(&mut rng, 8);
    let h = random_tensor(&mut rng, g.n_edges(), 3);
    let out = aggregate_e2n(&h, &g).unwrap();
    for i in 0..8 {
        let mut want = [0.0; 3];
        for (e, &(a, _)) in g.edges.iter().enumerate() {
            if a == i {
                for k in 0..3 {
                    want[k] += h.get(e, k);
                }
            }
        }
        assert_eq!(out.row(i), &want);
    }
    assert!(aggregate_e2n(&random_tensor(&mut rng, g.n_edges() + 1, 3), &g).is_err());
}

#[test]
fn v2v_examples_and_rotation() {
    let s = AtomicSystem::new(vec![0; 3], vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
    let g = build_graph(&s, 1.5, 8).unwrap();
    let h = Tensor::filled(vec![g.n_edges(), 2], 0.7);
    let out = aggregate_v2v(&h, &g).unwrap();
    assert_eq!(out.shape(), &[3, 3, 2]);
    assert!(out.data()[..6].iter().all(|x| x.abs() < 1e-15));

    let dimer = AtomicSystem::new(vec![0; 2], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    let g = build_graph(&dimer, 1.5, 8).unwrap();
    let h = Tensor::matrix(2, 1, vec![2.5, 2.5]);
    let out = aggregate_v2v(&h, &g).unwrap();
    assert_eq!(&out.data()[..3], &[2.5, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (s, g) = random_graph(&mut rng, 8);
    let h = random_tensor(&mut rng, g.n_edges(), 4);
    let out = aggregate_v2v(&h, &g).unwrap();
    let r = random_rotation(&mut rng);
    let gr = build_graph(&s.transformed(&r, [0.5, 1.0, -2.0]), 2.5, 5).unwrap();
    assert_eq!(gr.edges, g.edges);
    let outr = aggregate_v2v(&h, &gr).unwrap();
    for i in 0..8 {
        for k in 0..4 {
            let v = [out.data()[(3 * i) * 4 + k], out.data()[(3 * i + 1) * 4 + k], out.data()[(3 * i + 2) * 4 + k]];
            let rv = rotate(&r, v);
            for a in 0..3 {
                assert!((rv[a] - outr.data()[(3 * i + a) * 4 + k]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn transforms_identity_linear_and_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = random_tensor(&mut rng, 5, 3);
    let empty = ParamStore::new();
    assert_eq!(apply_transform(&h, TransformKind::Identity, &empty, TransformSide::Student).unwrap(), h);

    let mut p = ParamStore::new();
    p.insert("s.w", Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    p.insert("s.b", Tensor::zeros(vec![3]));
    assert_eq!(apply_transform(&h, TransformKind::Linear, &p, TransformSide::Student).unwrap(), h);

    let w = random_tensor(&mut rng, 3, 2);
    let b = Tensor::new(vec![2], vec![0.5, -0.25]);
    let mut p = ParamStore::new();
    p.insert("t.w", w.clone());
    p.insert("t.b", b.clone());
    let out = apply_transform(&h, TransformKind::Linear, &p, TransformSide::Teacher).unwrap();
    for i in 0..5 {
        for j in 0..2 {
            let want: f64 = (0..3).map(|k| h.get(i, k) * w.get(k, j)).sum::<f64>() + b.data()[j];
            assert!((out.get(i, j) - want).abs() < 1e-14);
        }
    }
    assert!(apply_transform(&h, TransformKind::Mlp, &p, TransformSide::Teacher).is_err());
}

#[test]
fn resolve_checks_tap_compatibility() {
    let (s, p, g) = (small(Family::S), small(Family::P), small(Family::G));
    assert!(KDConfig::new(Strategy::V2v, 1.0).resolve(&s, &g).is_err());
    let plan = KDConfig::new(Strategy::V2v, 1.0).resolve(&p, &g).unwrap();
    assert_eq!(plan.aggregation, TeacherAggregation::EdgeToVector);
    assert!(plan.vector);
    let plan = KDConfig::new(Strategy::E2n, 1.0).resolve(&p, &g).unwrap();
    assert_eq!(plan.aggregation, TeacherAggregation::EdgeToNode);
    assert!(KDConfig::new(Strategy::E2n, 1.0).resolve(&p, &p).is_err());
    assert!(KDConfig::new(Strategy::E2e, 1.0).resolve(&g, &g).is_ok());
    assert!(KDConfig::new(Strategy::E2e, 1.0).resolve(&p, &g).is_err());
    // identity needs matching widths (8 vs 8 here, 32 vs 64 at default sizes)
    let id = KDConfig { transform_s: TransformKind::Identity, ..KDConfig::new(Strategy::N2n, 1.0) };
    assert!(id.resolve(&p, &g).is_ok());
    assert!(id.resolve(&ModelConfig::pnet(), &ModelConfig::gnet()).is_err());
    let bad_lambda = KDConfig::new(Strategy::N2n, -1.0);
    assert!(bad_lambda.resolve(&p, &g).is_err());
    let mlp_vec = KDConfig { transform_s: TransformKind::Mlp, ..KDConfig::new(Strategy::V2v, 1.0) };
    assert!(mlp_vec.resolve(&p, &g).is_err());
    let wrong = KDConfig { student_tap: Some(TapKey::new(9, TapKind::NodeScalar)), ..KDConfig::new(Strategy::N2n, 1.0) };
    assert!(wrong.resolve(&p, &g).is_err());
}

#[test]
fn kd_loss_none_and_self_distillation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sys = random_cluster(&mut rng, 6, 4, 4.0, 0.9);
    let p = ModelParams::init(small(Family::P), 1).unwrap();
    let none = KDConfig::default().resolve(&p.config, &p.config).unwrap();
    assert_eq!(kd_loss(&none, &p, &p, &TransformParams::empty(), &sys).unwrap(), 0.0);

    let cfg = KDConfig { transform_s: TransformKind::Identity, ..KDConfig::new(Strategy::N2n, 1.0) };
    let plan = cfg.resolve(&p.config, &p.config).unwrap();
    let tp = TransformParams::init(&plan, 0);
    assert_eq!(kd_loss(&plan, &p, &p, &tp, &sys).unwrap(), 0.0);

    let plan = KDConfig::new(Strategy::N2n, 1.0).resolve(&p.config, &p.config).unwrap();
    let mut tp = TransformParams::init(&plan, 0);
    let d = plan.student_dim;
    let w = tp.params.get_mut("s.w").unwrap();
    for i in 0..d {
        for j in 0..d {
            w.data_mut()[i * d + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    assert_eq!(kd_loss(&plan, &p, &p, &tp, &sys).unwrap(), 0.0);
    for strategy in [Strategy::Vanilla1, Strategy::Vanilla2, Strategy::V2v] {
        let cfg = KDConfig { transform_s: TransformKind::Identity, ..KDConfig::new(strategy, 1.0) };
        let plan = cfg.resolve(&p.config, &p.config).unwrap();
        let tp = TransformParams::init(&plan, 0);
        assert_eq!(kd_loss(&plan, &p, &p, &tp, &sys).unwrap(), 0.0, "{strategy:?}");
    }
}

#[test]
fn e2n_matches_manual_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sys = random_cluster(&mut rng, 7, 4, 4.0, 0.9);
    let teacher = ModelParams::init(small(Family::G), 2).unwrap();
    let student = ModelParams::init(small(Family::P), 3).unwrap();
    let plan = KDConfig::new(Strategy::E2n, 1.0).resolve(&student.config, &teacher.config).unwrap();
    let tp = TransformParams::init(&plan, 4);
    let got = kd_loss(&plan, &student, &teacher, &tp, &sys).unwrap();

    let (_, t_taps) = teacher.forward(&sys).unwrap();
    let (_, s_taps) = student.forward(&sys).unwrap();
    let g = teacher.graph(&sys).unwrap();
    let ht = aggregate_e2n(t_taps.get(plan.teacher_tap.unwrap()).unwrap(), &g).unwrap();
    let hs = s_taps.get(plan.student_tap.unwrap()).unwrap();
    let zs = apply_transform(hs, TransformKind::Linear, &tp.params, TransformSide::Student).unwrap();
    let want = zs.data().iter().zip(ht.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / zs.len() as f64;
    assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    assert!(got > 0.0);
}

/// Directional finite-difference check of a KD loss with respect to all
/// student and transform parameters at once.
fn kd_directional_error(plan: &KdPlan, student: &ModelParams, teacher: &ModelParams, tp: &TransformParams, sys: &AtomicSystem, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir_s = student.params.random_like(&mut rng);
    let dir_t = tp.params.random_like(&mut rng);
    let signals = teacher_signals(plan, teacher, sys, &teacher.graph(sys).unwrap()).unwrap();
    let graph = student.graph(sys).unwrap();
    finite_diff_check(
        |tape: &mut Tape, t| {
            let t = tape.reshape(t, vec![]);
            let sb = student.params.bind_along(tape, t, &dir_s)?;
            let tb = tp.params.bind_along(tape, t, &dir_t)?;
            let fwd = student.forward_on_tape(tape, &sb, sys, &graph)?;
            let term = kd_loss_on_tape(tape, plan, &fwd, &graph, &tb, &signals)?;
            Ok(term.value(tape))
        },
        &Tensor::scalar(0.0),
        1e-5,
    )
    .unwrap()
}

#[test]
fn kd_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sys = random_cluster(&mut rng, 6, 4, 4.0, 0.9);
    let teacher = ModelParams::init(small(Family::G), 5).unwrap();
    let cases = [
        (Family::P, KDConfig::new(Strategy::N2n, 1.0)),
        (Family::P, KDConfig { feat_loss: FeatLoss::Gsp, ..KDConfig::new(Strategy::N2n, 1.0) }),
        (Family::P, KDConfig { feat_loss: FeatLoss::Lsp, transform_s: TransformKind::Mlp, ..KDConfig::new(Strategy::N2n, 1.0) }),
        (Family::P, KDConfig::new(Strategy::E2n, 1.0)),
        (Family::P, KDConfig::new(Strategy::V2v, 1.0)),
        (Family::P, KDConfig::new(Strategy::Vanilla1, 1.0)),
        (Family::P, KDConfig::new(Strategy::Vanilla2, 1.0)),
        (Family::G, KDConfig { transform_t: TransformKind::Linear, ..KDConfig::new(Strategy::E2e, 1.0) }),
        (Family::S, KDConfig::new(Strategy::N2n, 1.0)),
        (Family::S, KDConfig::new(Strategy::Vanilla1, 1.0)),
    ];
    for (k, (family, cfg)) in cases.into_iter().enumerate() {
        let student = ModelParams::init(small(family), 6).unwrap();
        let plan = cfg.resolve(&student.config, &teacher.config).unwrap();
        let tp = TransformParams::init(&plan, 7);
        let err = kd_directional_error(&plan, &student, &teacher, &tp, &sys, k as u64);
        assert!(err < 1e-4, "{family} {:?}: {err}", cfg.strategy);
    }
}

#[test]
fn presets_cover_the_published_table() {
    assert_eq!(lambda_preset("gemnet-oc", "painn", Strategy::N2n, "oc20"), Some(10000.0));
    assert_eq!(lambda_preset("gemnet-oc", "painn", Strategy::E2n, "oc20"), Some(1000.0));
    assert_eq!(lambda_preset("gemnet-oc", "painn", Strategy::V2v, "oc20"), Some(50000.0));
    assert_eq!(lambda_preset("gemnet-oc", "gemnet-oc-small", Strategy::E2e, "coll"), None);
    assert_eq!(LAMBDA_PRESETS.len(), 28);
}

#[test]
fn kd_config_parses_strictly() {
    let cfg: KDConfig = serde_json::from_str(
        r#"{"strategy":"n2n","lambda":10.0,"teacher_tap":{"block":1,"kind":"aggregated-output-node"}}"#,
    )
    .unwrap();
    assert_eq!(cfg.strategy, Strategy::N2n);
    assert_eq!(cfg.transform_s, TransformKind::Linear);
    assert!(serde_json::from_str::<KDConfig>(r#"{"strategy":"n2n","lamda":1}"#).is_err());
}
