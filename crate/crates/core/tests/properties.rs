use std::collections::HashMap;

use ddm_core::dataworld::{cluster_rank, generate_mixture, kmeans_partition, min_centroid_distance};
use ddm_core::numcore::{DenseNet, Mat, MatrixMap, PowerIterConfig, spectral_norm};
use ddm_core::rng::CounterStream;
use ddm_core::router::{decide, routing_entropy, select_weights, PolicyKind, RoutingPolicy};
use ddm_core::stats::{auc, quartile_bin, spearman, SummaryStats};
use proptest::prelude::*;

fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, k)
}

fn policy(k: usize) -> impl Strategy<Value = RoutingPolicy> {
    prop_oneof![
        Just(PolicyKind::Full),
        (1..=k).prop_map(|k| PolicyKind::TopK { k }),
        (0.05f64..=1.0).prop_map(|p| PolicyKind::TopP { p }),
        ((1..=k), any::<u64>()).prop_map(|(k, seed)| PolicyKind::MisalignedTopK { k, seed }),
        Just(PolicyKind::WeightClip),
    ]
    .prop_flat_map(|kind| (Just(kind), 0.1f64..5.0))
    .prop_map(|(kind, temperature)| RoutingPolicy::new(kind).with_temperature(temperature))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn routing_weights_are_a_distribution(
        (z, pol, aux, counter) in (2usize..10).prop_flat_map(|k| {
            (logits(k), policy(k), prop::collection::vec(0.0f64..10.0, k), any::<u64>())
        })
    ) {
        let k = z.len();
        let mut stream = CounterStream::new(counter);
        let dec = decide(&pol, z, Some(&aux), Some(&mut stream)).unwrap();
        prop_assert!((dec.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((dec.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(dec.weights.iter().all(|&w| w >= 0.0));
        for i in 0..k {
            if !dec.selected.contains(&i) {
                prop_assert_eq!(dec.weights[i], 0.0);
            }
        }
        prop_assert!(dec.entropy_nats >= -1e-12 && dec.entropy_nats <= (k as f64).ln() + 1e-12);
        prop_assert!(dec.selected.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn temperature_never_reorders(z in logits(6), t in 0.05f64..20.0) {
        let base = decide(&RoutingPolicy::full(), z.clone(), None, None).unwrap();
        let hot = decide(&RoutingPolicy::full().with_temperature(t), z.clone(), None, None).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if base.probs[i] > base.probs[j] {
                    prop_assert!(hot.probs[i] >= hot.probs[j]);
                }
            }
        }
        let a = decide(&RoutingPolicy::top_k(1), z.clone(), None, None).unwrap();
        let b = decide(&RoutingPolicy::top_k(1).with_temperature(t), z, None, None).unwrap();
        prop_assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn top_p_one_is_full(z in logits(5)) {
        let full = decide(&RoutingPolicy::full(), z.clone(), None, None).unwrap();
        let tp = decide(&RoutingPolicy::top_p(1.0), z, None, None).unwrap();
        prop_assert_eq!(&tp.selected, &full.selected);
        for (a, b) in tp.weights.iter().zip(&full.weights) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_all_is_full(z in logits(7)) {
        let full = decide(&RoutingPolicy::full(), z.clone(), None, None).unwrap();
        let tk = decide(&RoutingPolicy::top_k(7), z, None, None).unwrap();
        for (a, b) in tk.weights.iter().zip(&full.weights) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn misaligned_pairs_are_uniform() {
    let k = 8;
    let probs = vec![1.0 / k as f64; k];
    let mut stream = CounterStream::new(2024);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let (sel, _) = select_weights(PolicyKind::MisalignedTopK { k: 2, seed: 0 }, &probs, None, Some(&mut stream)).unwrap();
        *counts.entry(sel).or_default() += 1;
    }
    let pairs = k * (k - 1) / 2;
    assert_eq!(counts.len(), pairs);
    let p = 1.0 / pairs as f64;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (pair, c) in counts {
        assert!((c as f64 - expect).abs() < 3.0 * sigma, "{pair:?}: {c} vs {expect}");
    }
}

#[test]
fn entropy_reference_values() {
    assert_eq!(routing_entropy(&[1.0, 0.0, 0.0]), 0.0);
    assert!((routing_entropy(&[0.125; 8]) - 8f64.ln()).abs() < 1e-12);
    assert!((routing_entropy(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cluster_ranks_are_a_permutation(
        (x, c) in (2usize..5, 2usize..9).prop_flat_map(|(d, k)| {
            (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(-5.0f64..5.0, d * k))
        })
    ) {
        let d = x.len();
        let k = c.len() / d;
        let cm = Mat { rows: k, cols: d, data: c };
        let r = cluster_rank(&x, &cm).unwrap();
        let mut ranks = r.ranks.clone();
        ranks.sort();
        prop_assert_eq!(ranks, (1..=k).collect::<Vec<_>>());
        let min = r.distances.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(r.distances[r.closest()], min);
        let all: Vec<usize> = (0..k).collect();
        prop_assert!((r.mean_rank(&all) - (k as f64 + 1.0) / 2.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spearman_is_invariant_under_monotone_maps(xs in prop::collection::vec(-10.0f64..10.0, 3..40), seed in any::<u64>()) {
        let mut s = ddm_core::rng::SplitMix64::new(seed);
        let ys: Vec<f64> = xs.iter().map(|x| x + 3.0 * s.normal()).collect();
        let base = spearman(&xs, &ys).unwrap();
        let fx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        let gy: Vec<f64> = ys.iter().map(|y| (y / 4.0).exp()).collect();
        let mapped = spearman(&fx, &gy).unwrap();
        match (base.rho, mapped.rho) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn auc_of_complement_labels(scores in prop::collection::vec(0.0f64..1.0, 2..60), bits in prop::collection::vec(any::<bool>(), 60)) {
        let labels: Vec<bool> = bits[..scores.len()].to_vec();
        let flipped: Vec<bool> = labels.iter().map(|b| !b).collect();
        match (auc(&scores, &labels).unwrap(), auc(&scores, &flipped).unwrap()) {
            (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn quartile_populations_differ_by_at_most_one(n in 4usize..200, seed in any::<u64>()) {
        let mut s = ddm_core::rng::SplitMix64::new(seed);
        let values: Vec<f64> = (0..n).map(|i| i as f64 + 0.5 * s.next_f64()).collect();
        let bins = quartile_bin(&values).unwrap();
        let mut pop = [0usize; 4];
        bins.iter().for_each(|&b| pop[b as usize - 1] += 1);
        let (lo, hi) = (pop.iter().min().unwrap(), pop.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "{:?}", pop);
    }

    #[test]
    fn summary_percentiles_are_ordered(xs in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        let s = SummaryStats::of(&xs).unwrap();
        let ps = [s.min, s.p25, s.p50, s.p75, s.p90, s.p99, s.max];
        prop_assert!(ps.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.std >= 0.0);
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), k in 1usize..6) {
        let ds = generate_mixture(seed, 4, 3, 10, 3.0).unwrap();
        let r = kmeans_partition(&ds.points, k, seed, 50).unwrap();
        prop_assert!(r.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        prop_assert!((0..k).all(|c| r.labels.contains(&c)));
    }

    #[test]
    fn mixture_separation_is_exact(seed in any::<u64>(), k in 2usize..8, sep in 1.0f64..20.0) {
        let ds = generate_mixture(seed, k, 3, 8, sep).unwrap();
        prop_assert!((min_centroid_distance(&ds.centroids) - sep).abs() < 1e-9);
    }

    #[test]
    fn diagonal_spectral_norm_is_max_entry(diag in prop::collection::vec(0.0f64..10.0, 1..8)) {
        let n = diag.len();
        let a = Mat::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 });
        let cfg = PowerIterConfig { rel_tol: 1e-13, max_iter: 20_000, ..PowerIterConfig::default() };
        let est = spectral_norm(&MatrixMap(&a), &cfg).unwrap();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        prop_assert!((est.estimate - max).abs() <= 1e-6, "{} vs {max}", est.estimate);
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let net = DenseNet::init(&[4, 8, 2], seed).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn kmeans_recovers_two_blobs() {
    let ds = generate_mixture(3, 2, 2, 40, 10.0).unwrap();
    let r = kmeans_partition(&ds.points, 2, 1, 100).unwrap();
    let same = r.labels.iter().zip(&ds.labels).all(|(a, b)| a == b);
    let swapped = r.labels.iter().zip(&ds.labels).all(|(a, b)| *a == 1 - b);
    assert!(same || swapped);
}
