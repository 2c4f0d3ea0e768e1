mod support;

use ddm_core::diagnostics::{JacobianMode, RoutedJacobian};
use ddm_core::numcore::{dot, spectral_norm, DenseNet, LinearMap, Mat, MatrixMap, PowerIterConfig};
use ddm_core::rng::SplitMix64;
use ddm_core::router::RoutingPolicy;
use ddm_core::system::DdmSystem;
use support::*;

/// Routed velocity with the selected set and temperature held fixed.
fn frozen_velocity(system: &DdmSystem, selected: &[usize], temperature: f64, x: &[f64], t: f64) -> Vec<f64> {
    let z = system.router.logits(x, t).unwrap();
    let zmax = selected.iter().map(|&k| z[k]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = selected.iter().map(|&k| ((z[k] - zmax) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut v = vec![0.0; x.len()];
    for (&k, ek) in selected.iter().zip(&e) {
        let vk = system.ensemble.expert(k).velocity(x, t).unwrap();
        for j in 0..v.len() {
            v[j] += ek / s * vk[j];
        }
    }
    v
}

fn assert_adjoint(map: &dyn LinearMap, rng: &mut SplitMix64, pairs: usize) {
    let d = map.dim();
    for _ in 0..pairs {
        let u = rng.normal_vec(d);
        let w = rng.normal_vec(map.apply(&u).len());
        let lhs = dot(&map.apply(&u), &w);
        let rhs = dot(&u, &map.apply_adjoint(&w));
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1e-12), "{lhs} vs {rhs}");
    }
}

#[test]
fn net_forward_matches_straight_line_evaluation() {
    let net = DenseNet::init(&[2, 16, 2], 42).unwrap();
    let a = net.forward(&[0.5, -0.5]).unwrap();
    let b = straight_line_forward(&net, &[0.5, -0.5]);
    assert!(rel_err(&a, &b) < 1e-14);
    assert_eq!(a, net.forward(&[0.5, -0.5]).unwrap());
}

#[test]
fn net_adjoint_identity() {
    let net = DenseNet::init(&[6, 16, 16, 4], 3).unwrap();
    let mut rng = SplitMix64::new(11);
    let input = rng.normal_vec(6);
    for _ in 0..100 {
        let u = rng.normal_vec(6);
        let w = rng.normal_vec(4);
        let lhs = dot(&net.jvp(&input, &u).unwrap(), &w);
        let rhs = dot(&u, &net.vjp(&input, &w).unwrap().0);
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1e-12));
    }
}

#[test]
fn net_jvp_and_vjp_match_finite_differences() {
    let net = DenseNet::init(&[5, 12, 12, 3], 8).unwrap();
    let mut rng = SplitMix64::new(5);
    for _ in 0..20 {
        let x = rng.normal_vec(5);
        let u = rng.normal_vec(5);
        let fd = fd_directional(|p| straight_line_forward(&net, p), &x, &u, 1e-4);
        assert!(rel_err(&net.jvp(&x, &u).unwrap(), &fd) < 1e-4);
        let cot = rng.normal_vec(3);
        let cols = fd_jacobian(|p| straight_line_forward(&net, p), &x, 1e-4);
        let fd_grad: Vec<f64> = cols.iter().map(|c| dot(c, &cot)).collect();
        assert!(rel_err(&net.vjp(&x, &cot).unwrap().0, &fd_grad) < 1e-4);
    }
}

#[test]
fn spectral_norm_matches_jacobi_oracle() {
    for seed in [7u64, 8, 9, 10] {
        let mut rng = SplitMix64::new(seed);
        let a = Mat::from_fn(5, 5, |_, _| rng.normal());
        let est = spectral_norm(&MatrixMap(&a), &PowerIterConfig::default().with_seed(seed)).unwrap();
        let oracle = oracle_sigma_max(&a);
        assert!((est.estimate - oracle).abs() / oracle < 0.01, "seed {seed}: {} vs {oracle}", est.estimate);
    }
}

#[test]
fn jacobi_oracle_on_known_matrix() {
    let a = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
    assert!((jacobi_max_eigenvalue(&a) - 3.0).abs() < 1e-12);
}

#[test]
fn routed_jacobian_adjoint_identity() {
    let system = random_system(4, 3, 2, 16, 1);
    let mut rng = SplitMix64::new(2);
    let x = rng.normal_vec(3);
    for (selected, temp) in [(vec![0, 1, 2, 3], 1.0), (vec![1, 3], 1.0), (vec![2], 1.0), (vec![0, 2], 0.5)] {
        for mode in [JacobianMode::FullField, JacobianMode::ExpertTermOnly, JacobianMode::RouterTermOnly] {
            let jac = RoutedJacobian::new(&system, &x, 0.4, &selected, temp, mode).unwrap();
            assert_adjoint(&jac, &mut rng, 100);
        }
    }
}

#[test]
fn routed_jacobian_matches_finite_differences() {
    let system = random_system(4, 3, 2, 16, 4);
    let mut rng = SplitMix64::new(9);
    for i in 0..20 {
        let x = rng.normal_vec(3);
        let t = 0.05 + 0.9 * rng.next_f64();
        let (selected, temp) = match i % 3 {
            0 => (vec![0, 1, 2, 3], 1.0),
            1 => (vec![0, 3], 0.7),
            _ => (vec![1, 2], 2.0),
        };
        let jac = RoutedJacobian::new(&system, &x, t, &selected, temp, JacobianMode::FullField).unwrap();
        let u = rng.normal_vec(3);
        let fd = fd_directional(|p| frozen_velocity(&system, &selected, temp, p, t), &x, &u, 1e-4);
        assert!(rel_err(&jac.apply(&u), &fd) < 1e-4, "point {i}");
    }
}

#[test]
fn full_field_is_sum_of_terms() {
    let system = random_system(3, 4, 2, 12, 6);
    let mut rng = SplitMix64::new(3);
    let x = rng.normal_vec(4);
    let sel = [0, 1, 2];
    let full = RoutedJacobian::new(&system, &x, 0.6, &sel, 1.0, JacobianMode::FullField).unwrap();
    let e = RoutedJacobian::new(&system, &x, 0.6, &sel, 1.0, JacobianMode::ExpertTermOnly).unwrap();
    let r = RoutedJacobian::new(&system, &x, 0.6, &sel, 1.0, JacobianMode::RouterTermOnly).unwrap();
    let u = rng.normal_vec(4);
    let sum: Vec<f64> = e.apply(&u).iter().zip(r.apply(&u)).map(|(a, b)| a + b).collect();
    assert!(rel_err(&full.apply(&u), &sum) < 1e-14);
    let cfg = PowerIterConfig::default();
    let (nf, ne, nr) = (
        full.spectral_norm(&cfg).unwrap().estimate,
        e.spectral_norm(&cfg).unwrap().estimate,
        r.spectral_norm(&cfg).unwrap().estimate,
    );
    assert!(ne <= (nf + nr) * 1.01);
}

#[test]
fn recentred_router_term_identity() {
    let system = random_system(5, 3, 2, 16, 12);
    let mut rng = SplitMix64::new(21);
    for i in 0..100 {
        let x = rng.normal_vec(3);
        let t = rng.next_f64();
        let mut selected: Vec<usize> = if i % 2 == 0 { (0..5).collect() } else { vec![i % 5, (i + 2) % 5] };
        selected.sort();
        let plain = RoutedJacobian::new(&system, &x, t, &selected, 1.0, JacobianMode::RouterTermOnly).unwrap();
        let centred = RoutedJacobian::new(&system, &x, t, &selected, 1.0, JacobianMode::RouterTermOnly)
            .unwrap()
            .recentred(true);
        let u = rng.normal_vec(3);
        let (a, b) = (plain.apply(&u), centred.apply(&u));
        let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-8 * scale, "state {i}: {p} vs {q}");
        }
    }
}

#[test]
fn single_expert_has_no_router_term() {
    let system = random_system(3, 2, 2, 8, 2);
    let x = [0.3, -0.2];
    let r = RoutedJacobian::new(&system, &x, 0.5, &[1], 1.0, JacobianMode::RouterTermOnly).unwrap();
    assert!(r.apply(&[1.0, 0.5]).iter().all(|v| v.abs() < 1e-15));
    let e = RoutedJacobian::new(&system, &x, 0.5, &[1], 1.0, JacobianMode::ExpertTermOnly).unwrap();
    let direct = system
        .expert_jacobian_norm(1, &x, 0.5, &PowerIterConfig::default())
        .unwrap();
    assert!((e.spectral_norm(&PowerIterConfig::default()).unwrap().estimate - direct).abs() < 1e-9);
}

#[test]
fn velocity_at_linearisation_point_matches_routed_velocity() {
    let system = random_system(4, 3, 2, 8, 5);
    let x = [0.1, 0.2, -0.4];
    let policy = RoutingPolicy::top_k(2);
    let (v, dec) = system.routed_velocity(&policy, &x, 0.3, None).unwrap();
    let jac = RoutedJacobian::new(&system, &x, 0.3, &dec.selected, 1.0, JacobianMode::FullField).unwrap();
    assert!(rel_err(&jac.velocity(), &v) < 1e-12);
}
