mod support;

use ddm_core::diagnostics::{delta_refine, empirical_leff, JacobianMode};
use ddm_core::numcore::PowerIterConfig;
use ddm_core::rng::SplitMix64;
use ddm_core::router::RoutingPolicy;
use ddm_core::sampler::{integrate, refinement_pair, refinement_pair_with, sample_trajectory, FnField, SamplerConfig};
use support::*;

/// Least-squares slope of log(error) on log(h).
fn loglog_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn global_errors(cfg_for: impl Fn(usize) -> SamplerConfig) -> (Vec<f64>, Vec<f64>) {
    let exact = (-1.0f64).exp();
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for n in [10usize, 20, 40, 80] {
        let mut f = FnField { dim: 1, f: |x: &[f64], _: f64| x.to_vec() };
        let traj = integrate(&mut f, &[1.0], &cfg_for(n), 0).unwrap();
        hs.push(1.0 / n as f64);
        errs.push((traj.endpoint()[0] - exact).abs());
    }
    (hs, errs)
}

#[test]
fn heun_is_second_order() {
    let (hs, errs) = global_errors(SamplerConfig::heun);
    let slope = loglog_slope(&hs, &errs);
    assert!((1.7..=2.3).contains(&slope), "Heun slope {slope}");
}

#[test]
fn euler_is_first_order() {
    let (hs, errs) = global_errors(SamplerConfig::euler);
    let slope = loglog_slope(&hs, &errs);
    assert!((0.8..=1.2).contains(&slope), "Euler slope {slope}");
}

#[test]
fn exact_field_endpoint() {
    let x0 = [0.7, -1.3, 2.0];
    let x1 = [0.1, 0.4, -0.9];
    let mut f = FnField {
        dim: 3,
        f: move |x: &[f64], t: f64| (0..3).map(|j| (x[j] - x0[j]) / t.max(1e-3)).collect(),
    };
    let traj = integrate(&mut f, &x1, &SamplerConfig::euler(25), 0).unwrap();
    for n in 0..=25 {
        let t = traj.times[n];
        for j in 0..3 {
            let line = x0[j] + t * (x1[j] - x0[j]);
            assert!((traj.state(n)[j] - line).abs() < 1e-6);
        }
    }
    assert!(delta_refine(traj.endpoint(), &x0).unwrap() < 1e-6);
}

#[test]
fn linear_trajectory_field_has_zero_refinement_gap() {
    let x0 = [1.0, 2.0];
    let c = 0.5;
    let (a, b) = refinement_pair_with(
        || FnField {
            dim: 2,
            f: move |x: &[f64], t: f64| (0..2).map(|j| (x[j] - x0[j]) / (t + c)).collect(),
        },
        &[0.3, -0.4],
        10,
    )
    .unwrap();
    assert!(delta_refine(&a, &b).unwrap() < 1e-12);
}

#[test]
fn recording_does_not_change_samples() {
    let system = random_system(4, 3, 2, 12, 8);
    let x1 = SplitMix64::new(1).normal_vec(3);
    for policy in [RoutingPolicy::full(), RoutingPolicy::top_k(2), RoutingPolicy::misaligned(2, 77), RoutingPolicy::weight_clip()] {
        let plain = sample_trajectory(&system, &policy, &x1, &SamplerConfig::heun(20), 5).unwrap();
        let rec = sample_trajectory(&system, &policy, &x1, &SamplerConfig::heun(20).recording(true, true), 5).unwrap();
        assert_eq!(plain.states, rec.states, "{policy}");
        assert_eq!(rec.decisions.len(), 21);
        assert_eq!(rec.velocities_all.as_ref().unwrap().len(), 21);
        let again = sample_trajectory(&system, &policy, &x1, &SamplerConfig::heun(20), 5).unwrap();
        assert_eq!(plain.states, again.states);
    }
}

#[test]
fn misaligned_streams_differ_by_trajectory_seed() {
    let system = random_system(4, 3, 2, 12, 8);
    let x1 = SplitMix64::new(1).normal_vec(3);
    let policy = RoutingPolicy::misaligned(2, 77);
    let cfg = SamplerConfig::heun(20).recording(true, false);
    let a = sample_trajectory(&system, &policy, &x1, &cfg, 1).unwrap();
    let b = sample_trajectory(&system, &policy, &x1, &cfg, 2).unwrap();
    let sa: Vec<_> = a.decisions.iter().map(|d| d.selected.clone()).collect();
    let sb: Vec<_> = b.decisions.iter().map(|d| d.selected.clone()).collect();
    assert_ne!(sa, sb);
}

#[test]
fn refinement_gap_shrinks_with_steps_on_smooth_routing() {
    let system = random_system(4, 3, 2, 12, 2);
    let x1 = SplitMix64::new(4).normal_vec(3);
    let gaps: Vec<f64> = [20usize, 40, 80]
        .iter()
        .map(|&n| {
            let (a, b) = refinement_pair(&system, &RoutingPolicy::full(), &x1, n, 0).unwrap();
            delta_refine(&a, &b).unwrap()
        })
        .collect();
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
}

#[test]
fn leff_is_max_of_per_step_norms_and_bounds_terms() {
    let system = random_system(4, 3, 2, 12, 3);
    let x1 = SplitMix64::new(6).normal_vec(3);
    let policy = RoutingPolicy::top_k(2);
    let traj = sample_trajectory(&system, &policy, &x1, &SamplerConfig::heun(20).recording(true, false), 0).unwrap();
    let cfg = PowerIterConfig::default();
    let full = empirical_leff(&system, &policy, &traj, JacobianMode::FullField, 1, &cfg).unwrap();
    let expert = empirical_leff(&system, &policy, &traj, JacobianMode::ExpertTermOnly, 1, &cfg).unwrap();
    let router = empirical_leff(&system, &policy, &traj, JacobianMode::RouterTermOnly, 1, &cfg).unwrap();
    assert_eq!(full.per_step.len(), 21);
    let max = full.per_step.iter().map(|s| s.norm).fold(0.0, f64::max);
    assert_eq!(full.leff, max);
    for ((f, e), r) in full.per_step.iter().zip(&expert.per_step).zip(&router.per_step) {
        assert!(e.norm <= (f.norm + r.norm) * 1.01, "step {}", f.n);
    }
    let strided = empirical_leff(&system, &policy, &traj, JacobianMode::FullField, 5, &cfg).unwrap();
    assert_eq!(strided.per_step.iter().map(|s| s.n).collect::<Vec<_>>(), vec![0, 5, 10, 15, 20]);
}
