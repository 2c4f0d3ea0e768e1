mod support;

use ddm_core::dataworld::generate_mixture;
use ddm_core::flowexperts::{net_input, train_ensemble, train_expert, ExpertEnsemble, TrainConfig};
use ddm_core::numcore::{dist, norm, DenseNet, Mat};
use ddm_core::rng::SplitMix64;
use ddm_core::router::{softmax, train_router};
use support::*;

fn mse(net: &DenseNet, input: &[f64], target: &[f64]) -> f64 {
    let out = straight_line_forward(net, input);
    out.iter().zip(target).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / target.len() as f64
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut net = DenseNet::init(&[2, 8, 2], 17).unwrap();
    let input = [0.4, -1.1];
    let target = [1.5, 0.2];
    let out = net.forward(&input).unwrap();
    let cot: Vec<f64> = out.iter().zip(&target).map(|(o, y)| 2.0 * (o - y) / 2.0).collect();
    let (_, grads) = net.vjp(&input, &cot).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let h = 1e-5;
    for (ti, tensor) in analytic.iter().enumerate() {
        for pi in 0..tensor.len() {
            let orig = net.tensors()[ti][pi];
            net.tensors_mut()[ti][pi] = orig + h;
            let lp = mse(&net, &input, &target);
            net.tensors_mut()[ti][pi] = orig - h;
            let lm = mse(&net, &input, &target);
            net.tensors_mut()[ti][pi] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = tensor[pi];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-6), "tensor {ti} param {pi}: {a} vs {fd}");
        }
    }
}

#[test]
fn one_point_cluster_learns_closed_form_velocity() {
    let x0 = [1.5, -0.5];
    let cluster = Mat::from_rows(&[x0.to_vec()]);
    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig::default().with_seed(seed);
        let (expert, report) = train_expert(&cluster, &cfg, 0).unwrap();
        assert!(report.losses.last().unwrap() < &report.losses[0]);
        let mut rng = SplitMix64::new(seed + 1000);
        let (mut err2, mut ref2) = (0.0, 0.0);
        for _ in 0..50 {
            let t = 0.2 + 0.8 * rng.next_f64();
            let x1 = rng.normal_vec(2);
            let xt: Vec<f64> = (0..2).map(|j| (1.0 - t) * x0[j] + t * x1[j]).collect();
            let exact: Vec<f64> = (0..2).map(|j| (xt[j] - x0[j]) / t).collect();
            let v = expert.velocity(&xt, t).unwrap();
            err2 += dist(&v, &exact).powi(2);
            ref2 += norm(&exact).powi(2);
        }
        let rel = (err2 / ref2).sqrt();
        assert!(rel < 0.15, "seed {seed}: relative error {rel}");
    }
}

#[test]
fn training_is_deterministic_and_audited() {
    let ds = generate_mixture(5, 2, 2, 16, 6.0).unwrap();
    let cfg = TrainConfig {
        steps: 50,
        batch: 8,
        ..TrainConfig::default()
    };
    let pts = ds.cluster_points(1);
    let (a, ra) = train_expert(&pts, &cfg, 1).unwrap();
    let (b, _) = train_expert(&pts, &cfg, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.rows_read, 50 * 8);
    assert_eq!(ra.rows_available, 16);
    let (c, _) = train_expert(&pts, &cfg.with_seed(99), 1).unwrap();
    assert_ne!(a.net, c.net);
}

#[test]
fn expert_velocity_is_net_on_fourier_features() {
    let net = DenseNet::init(&[3 + 6, 10, 3], 2).unwrap();
    let expert = ddm_core::flowexperts::Expert::new(net.clone(), 0, 3, 0).unwrap();
    let mut rng = SplitMix64::new(4);
    for _ in 0..10 {
        let x = rng.normal_vec(3);
        let t = rng.next_f64();
        let mut input = x.clone();
        for i in 0..3 {
            let w = std::f64::consts::PI * 2f64.powi(i) * t;
            input.push(w.sin());
            input.push(w.cos());
        }
        assert_eq!(net_input(&x, t, 3), input);
        assert!(rel_err(&expert.velocity(&x, t).unwrap(), &straight_line_forward(&net, &input)) < 1e-14);
    }
}

#[test]
fn trained_router_and_experts_on_separated_clusters() {
    let ds = generate_mixture(11, 4, 2, 64, 10.0).unwrap();
    let cfg = TrainConfig {
        steps: 1500,
        ..TrainConfig::default()
    };
    let (router, report) = train_router(&ds, &cfg.with_seed(3)).unwrap();
    assert!(report.clean_accuracy > 0.95, "accuracy {}", report.clean_accuracy);
    let z = router.logits(ds.point(0), 0.0).unwrap();
    assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let (ens, _) = train_ensemble(&ds, |k| cfg.with_seed(20 + k as u64)).unwrap();
    let mid: Vec<f64> = (0..2)
        .map(|j| 0.5 * (ds.centroids.get(0, j) + ds.centroids.get(1, j)))
        .collect();
    let v = ens.velocities(&mid, 0.3).unwrap();
    assert!(dist(&v[0], &v[1]) > 1.0);
}

#[test]
fn ensemble_order_is_by_cluster_id() {
    let mk = |id: usize, seed: u64| {
        ddm_core::flowexperts::Expert::new(DenseNet::init(&[2 + 2, 4, 2], seed).unwrap(), id, 1, 0).unwrap()
    };
    let a = ExpertEnsemble::new(vec![mk(0, 1), mk(1, 2), mk(2, 3)]).unwrap();
    let b = ExpertEnsemble::new(vec![mk(2, 3), mk(0, 1), mk(1, 2)]).unwrap();
    let x = [0.2, 0.7];
    assert_eq!(a.velocities(&x, 0.5).unwrap(), b.velocities(&x, 0.5).unwrap());
    let same = ExpertEnsemble::new(vec![mk(0, 9), mk(1, 9)]).unwrap();
    let v = same.velocities(&x, 0.1).unwrap();
    assert_eq!(v[0], v[1]);
}
