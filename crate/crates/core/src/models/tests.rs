use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check;
use crate::geometry::{random_cluster, random_rotation, rotate, Mat3};

fn small(family: Family) -> ModelConfig {
    let mut c = ModelConfig::default_for(family);
    c.width = 8;
    c.vector_width = 4;
    c.edge_width = 6;
    c.n_rbf = 8;
    c.depth = 2;
    c
}

fn cluster(rng: &mut ChaCha8Rng, n: usize) -> AtomicSystem {
    random_cluster(rng, n, 4, 4.0, 0.9)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Applies `r` to every 3-vector of a `[N, 3, d]` tensor.
fn rotate_vector_tap(t: &Tensor, r: &Mat3) -> Vec<f64> {
    let d = t.shape()[2];
    let mut out = t.data().to_vec();
    for i in 0..t.shape()[0] {
        for k in 0..d {
            let v = [t.data()[(3 * i) * d + k], t.data()[(3 * i + 1) * d + k], t.data()[(3 * i + 2) * d + k]];
            let rv = rotate(r, v);
            for a in 0..3 {
                out[(3 * i + a) * d + k] = rv[a];
            }
        }
    }
    out
}

#[test]
fn taxonomy_matches_family() {
    for family in [Family::S, Family::P, Family::G] {
        let p = ModelParams::init(small(family), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, taps) = p.forward(&cluster(&mut rng, 5)).unwrap();
        let keys: Vec<TapKey> = taps.keys().collect();
        assert_eq!(keys, p.config.tap_keys());
        let kinds: std::collections::BTreeSet<TapKind> = keys.iter().map(|k| k.kind).collect();
        match family {
            Family::S => assert_eq!(kinds.into_iter().collect::<Vec<_>>(), vec![TapKind::NodeScalar]),
            Family::P => assert_eq!(kinds.into_iter().collect::<Vec<_>>(), vec![TapKind::NodeScalar, TapKind::NodeVector]),
            Family::G => assert_eq!(kinds.len(), 6),
        }
        for k in keys {
            let t = taps.get(k).unwrap();
            let w = p.config.tap_width(k).unwrap();
            assert_eq!(*t.shape().last().unwrap(), w, "{family} {k}");
        }
    }
}

#[test]
fn energy_is_exact_sum_of_atom_energies() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in [Family::S, Family::P, Family::G] {
        let p = ModelParams::init(small(family), 4).unwrap();
        for _ in 0..5 {
            let n = rng.gen_range(1..9);
            let out = p.predict(&cluster(&mut rng, n)).unwrap();
            assert_eq!(out.energy, out.per_atom_energy.iter().sum::<f64>());
            assert!(out.forces.iter().flatten().all(|f| f.is_finite()));
        }
    }
}

#[test]
fn rigid_motion_and_permutation_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for family in [Family::S, Family::P, Family::G] {
        let p = ModelParams::init(small(family), 6).unwrap();
        for _ in 0..4 {
            let s = cluster(&mut rng, 7);
            let (out, taps) = p.forward(&s).unwrap();
            let r = random_rotation(&mut rng);
            let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let (out_r, taps_r) = p.forward(&s.transformed(&r, t)).unwrap();
            assert!(rel(out_r.energy, out.energy) <= 1e-9, "{family} energy");
            for i in 0..7 {
                let f = rotate(&r, out.forces[i]);
                assert!(max_abs_diff(&f, &out_r.forces[i]) <= 1e-8, "{family} force");
            }
            for k in taps.keys() {
                let a = taps.get(k).unwrap();
                let b = taps_r.get(k).unwrap();
                if k.kind.is_vector() {
                    assert!(max_abs_diff(&rotate_vector_tap(a, &r), b.data()) <= 1e-8, "{family} {k}");
                } else {
                    assert!(max_abs_diff(a.data(), b.data()) <= 1e-9, "{family} {k}");
                }
            }

            let perm = [4, 0, 6, 2, 1, 5, 3];
            let (out_p, taps_p) = p.forward(&s.permuted(&perm)).unwrap();
            assert!(rel(out_p.energy, out.energy) <= 1e-9);
            for (k, &i) in perm.iter().enumerate() {
                assert!(max_abs_diff(&out_p.forces[k], &out.forces[i]) <= 1e-8);
            }
            let key = p.config.default_node_tap();
            let (a, b) = (taps.get(key).unwrap(), taps_p.get(key).unwrap());
            for (k, &i) in perm.iter().enumerate() {
                assert!(max_abs_diff(b.row(k), a.row(i)) <= 1e-9);
            }
        }
    }
}

#[test]
fn snet_forces_match_energy_finite_differences() {
    let p = ModelParams::init(small(Family::S), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = cluster(&mut rng, 5);
    let graph = p.graph(&s).unwrap();
    let err = finite_diff_check(
        |tape, x| {
            let b = p.params.bind(tape, false);
            Ok(p.forward_at(tape, &b, &s, &graph, x)?.energy)
        },
        &s.position_tensor(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    // forces are the negated gradient
    let out = p.predict(&s).unwrap();
    let h = 1e-5;
    let mut plus = s.clone();
    plus.positions[2][1] += h;
    let mut minus = s.clone();
    minus.positions[2][1] -= h;
    let fd = -(p.predict(&plus).unwrap().energy - p.predict(&minus).unwrap().energy) / (2.0 * h);
    assert!(rel(out.forces[2][1], fd) < 1e-4);
}

#[test]
fn pnet_zero_vector_pathway_gives_zero_forces() {
    let mut p = ModelParams::init(small(Family::P), 9).unwrap();
    let (f, v) = (p.config.width, p.config.vector_width);
    for l in 0..p.config.depth {
        let w = p.params.get_mut(&format!("l{l}.filter.w")).unwrap();
        let cols = w.cols();
        for r in 0..w.rows() {
            for c in f + v..f + 2 * v {
                w.data_mut()[r * cols + c] = 0.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (out, taps) = p.forward(&cluster(&mut rng, 6)).unwrap();
    assert!(out.forces.iter().flatten().all(|&x| x == 0.0));
    assert!(taps.get(TapKey::new(3, TapKind::NodeVector)).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn gnet_isolated_atom_has_zero_force() {
    for aggregate in [Aggregate::Sum, Aggregate::Concat] {
        let cfg = ModelConfig { aggregate, ..small(Family::G) };
        let p = ModelParams::init(cfg, 11).unwrap();
        let s = AtomicSystem::new(vec![1], vec![[0.3, 0.2, 0.1]]).unwrap();
        let out = p.predict(&s).unwrap();
        assert_eq!(out.forces, vec![[0.0; 3]]);
        assert_eq!(out.energy, out.per_atom_energy[0]);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for family in [Family::S, Family::P, Family::G] {
        let p = ModelParams::init(small(family), 12).unwrap();
        let path = dir.path().join("m.json");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.architecture_hash(), q.architecture_hash());
        assert_eq!(ModelParams::from_json(&p.to_json().unwrap()).unwrap(), p);
    }
}

#[test]
fn checkpoint_with_wrong_layout_is_rejected() {
    let p = ModelParams::init(small(Family::S), 1).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
    json["config"]["width"] = 9.into();
    assert!(ModelParams::from_json(&json.to_string()).is_err());
    json["config"]["width"] = 8.into();
    json["extra"] = 1.into();
    assert!(ModelParams::from_json(&json.to_string()).is_err());
}

#[test]
fn initialization_is_seeded_and_bounded() {
    let a = ModelParams::init(small(Family::G), 3).unwrap();
    let b = ModelParams::init(small(Family::G), 3).unwrap();
    let c = ModelParams::init(small(Family::G), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.architecture_hash(), c.architecture_hash());
    for (name, t) in a.params.iter() {
        let bound = 1.0 / (t.rows() as f64).sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= bound), "{name}");
    }
}

#[test]
fn mismatches_are_errors() {
    let p = ModelParams::init(small(Family::S), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = cluster(&mut rng, 4);
    let other = cluster(&mut rng, 5);
    let g = p.graph(&other).unwrap();
    assert!(matches!(p.forward_with_graph(&s, &g), Err(Error::ShapeMismatch(_))));
    let gs = p.graph(&s).unwrap();
    assert!(matches!(forward_pnet(&p, &s, &gs), Err(Error::Incompatible(_))));
    assert!(forward_snet(&p, &s, &gs).is_ok());
    let bad = AtomicSystem::new(vec![7, 0], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    assert!(p.predict(&bad).is_err());
}

#[test]
fn tap_key_text_round_trip() {
    for family in [Family::S, Family::P, Family::G] {
        for k in ModelConfig::default_for(family).tap_keys() {
            assert_eq!(k.to_string().parse::<TapKey>().unwrap(), k);
        }
    }
    assert!("node@x".parse::<TapKey>().is_err());
}
