//! Post-hoc router and routing policies.
//!
//! Every policy first rescales logits by `1 / temperature`, takes the softmax,
//! and then sparsifies or reweights the resulting probabilities.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataworld::Dataset;
use crate::error::{check_len, Error, Result};
use crate::flowexperts::{net_input, time_features, TrainConfig};
use crate::numcore::{Adam, DenseNet, Mat, NetGrads};
use crate::rng::{child_seed, CounterStream, SplitMix64};

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub net: DenseNet,
    pub m: usize,
}

impl Router {
    pub fn new(net: DenseNet, m: usize) -> Result<Self> {
        if net.input_dim() < 2 * m + 1 {
            return Err(Error::Config("router input too small for its time features".into()));
        }
        Ok(Self { net, m })
    }

    pub fn k(&self) -> usize {
        self.net.output_dim()
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - 2 * self.m
    }

    pub fn logits(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("router state", self.dim(), x.len())?;
        self.net.forward(&net_input(x, t, self.m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub losses: Vec<f64>,
    /// Argmax accuracy on the clean training points (`t = 0`).
    pub clean_accuracy: f64,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn routing_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Cross-entropy classification of the cluster label from noisy states
/// `x_t` drawn along the same interpolation path the experts use.
pub fn train_router(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Router, RouterReport)> {
    cfg.validate()?;
    dataset.validate()?;
    let (d, k, m) = (dataset.d, dataset.k, cfg.m);
    let dims = cfg.layer_dims(d + 2 * m, k);
    let mut net = DenseNet::init(&dims, child_seed(cfg.seed, "router/init", 0))?;
    let mut rng = SplitMix64::new(child_seed(cfg.seed, "router/batches", 0));
    let mut opt = Adam::new(&net, cfg.adam());
    let mut grads = NetGrads::zeros_like(&net);
    let mut losses = Vec::with_capacity(cfg.steps);
    let n = dataset.len();
    let inv_b = 1.0 / cfg.batch as f64;
    let mut input = Mat::zeros(cfg.batch, d + 2 * m);
    let mut labels = vec![0usize; cfg.batch];

    for step in 1..=cfg.steps {
        grads.clear();
        let mut loss = 0.0;
        for (b, label) in labels.iter_mut().enumerate() {
            let i = rng.below(n);
            let x0 = dataset.point(i);
            let t = rng.next_f64();
            let inp = input.row_mut(b);
            for j in 0..d {
                inp[j] = (1.0 - t) * x0[j] + t * rng.normal();
            }
            inp[d..].copy_from_slice(&time_features(t, m));
            *label = dataset.labels[i];
        }
        let trace = net.forward_batch(&input)?;
        let mut cot = Mat::zeros(cfg.batch, k);
        for (b, &y) in labels.iter().enumerate() {
            let mut p = softmax(trace.output().row(b));
            loss -= p[y].max(1e-300).ln();
            p[y] -= 1.0;
            p.iter_mut().for_each(|g| *g *= inv_b);
            cot.row_mut(b).copy_from_slice(&p);
        }
        net.backward_batch(&trace, &cot, &mut grads)?;
        loss *= inv_b;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        opt.step(&mut net, &grads);
    }
    let router = Router::new(net, m)?;
    let clean_accuracy = clean_accuracy(&router, dataset)?;
    Ok((router, RouterReport { losses, clean_accuracy }))
}

pub fn clean_accuracy(router: &Router, dataset: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for (i, &y) in dataset.labels.iter().enumerate() {
        let z = router.logits(dataset.point(i), 0.0)?;
        if argmax(&z) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    TopK { k: usize },
    TopP { p: f64 },
    /// `k` experts chosen uniformly at random; `seed` keys the per-trajectory
    /// counter stream.
    MisalignedTopK { k: usize, seed: u64 },
    /// Keep experts whose Jacobian norm is strictly below the median.
    WeightClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub kind: PolicyKind,
    pub temperature: f64,
}

impl RoutingPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            temperature: 1.0,
        }
    }

    pub fn full() -> Self {
        Self::new(PolicyKind::Full)
    }

    pub fn top_k(k: usize) -> Self {
        Self::new(PolicyKind::TopK { k })
    }

    pub fn top_p(p: f64) -> Self {
        Self::new(PolicyKind::TopP { p })
    }

    pub fn misaligned(k: usize, seed: u64) -> Self {
        Self::new(PolicyKind::MisalignedTopK { k, seed })
    }

    pub fn weight_clip() -> Self {
        Self::new(PolicyKind::WeightClip)
    }

    pub fn with_temperature(self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self
        }
    }

    pub fn needs_aux(&self) -> bool {
        matches!(self.kind, PolicyKind::WeightClip)
    }

    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be finite and positive, got {}", self.temperature)));
        }
        match self.kind {
            PolicyKind::TopK { k } | PolicyKind::MisalignedTopK { k, .. } if k == 0 || k > num_experts => {
                Err(Error::Config(format!("k = {k} outside [1, {num_experts}]")))
            }
            PolicyKind::TopP { p } if !(p > 0.0 && p <= 1.0) => Err(Error::Config(format!("top-p {p} outside (0, 1]"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::Full => write!(f, "Full")?,
            PolicyKind::TopK { k } => write!(f, "Top-{k}")?,
            PolicyKind::TopP { p } => write!(f, "Top-p({p})")?,
            PolicyKind::MisalignedTopK { k, .. } => write!(f, "Misaligned Top-{k}")?,
            PolicyKind::WeightClip => write!(f, "Full + weight clip")?,
        }
        if self.temperature != 1.0 {
            write!(f, " T={}", self.temperature)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Raw router logits (before temperature).
    pub logits: Vec<f64>,
    /// `softmax(logits / T)`.
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
    /// Ascending expert indices with nonzero support.
    pub selected: Vec<usize>,
    /// Entropy of `probs`.
    pub entropy_nats: f64,
}

/// Indices sorted by descending probability, ties by lower index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn renormalized(probs: &[f64], selected: &[usize]) -> Vec<f64> {
    let mass: f64 = selected.iter().map(|&i| probs[i]).sum();
    let mut w = vec![0.0; probs.len()];
    if mass < 1e-12 {
        let u = 1.0 / selected.len() as f64;
        selected.iter().for_each(|&i| w[i] = u);
    } else {
        selected.iter().for_each(|&i| w[i] = probs[i] / mass);
    }
    w
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Turn (temperature-scaled) probabilities into a selected set and weights.
pub fn select_weights(
    kind: PolicyKind,
    probs: &[f64],
    aux: Option<&[f64]>,
    stream: Option<&mut CounterStream>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let k_all = probs.len();
    let mut selected: Vec<usize> = match kind {
        PolicyKind::Full => (0..k_all).collect(),
        PolicyKind::TopK { k } => ranked(probs).into_iter().take(k).collect(),
        PolicyKind::TopP { p } => {
            let order = ranked(probs);
            let mut cum = 0.0;
            let mut keep = Vec::new();
            for &i in &order {
                keep.push(i);
                cum += probs[i];
                if cum >= p - 1e-12 {
                    break;
                }
            }
            keep
        }
        PolicyKind::MisalignedTopK { k, .. } => {
            let stream = stream.ok_or_else(|| {
                Error::Config("misaligned routing needs a counter stream".into())
            })?;
            let mut rng = stream.next_rng();
            let mut idx: Vec<usize> = (0..k_all).collect();
            for i in 0..k {
                let j = i + rng.below(k_all - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        }
        PolicyKind::WeightClip => {
            let aux = aux.ok_or_else(|| {
                Error::Config("weight clipping needs per-expert Jacobian norms".into())
            })?;
            check_len("weight-clip norms", k_all, aux.len())?;
            let med = median(aux);
            let keep: Vec<usize> = (0..k_all).filter(|&i| aux[i] < med).collect();
            let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
            if keep.is_empty() || mass <= 0.0 {
                (0..k_all).collect()
            } else {
                keep
            }
        }
    };
    selected.sort_unstable();
    let weights = if matches!(kind, PolicyKind::Full) {
        probs.to_vec()
    } else {
        renormalized(probs, &selected)
    };
    Ok((selected, weights))
}

/// Route one state: logits, tempered probabilities, and the policy's weights.
pub fn route(
    router: &Router,
    policy: &RoutingPolicy,
    x: &[f64],
    t: f64,
    aux: Option<&[f64]>,
    stream: Option<&mut CounterStream>,
) -> Result<RoutingDecision> {
    policy.validate(router.k())?;
    let logits = router.logits(x, t)?;
    decide(policy, logits, aux, stream)
}

/// Policy application on already computed logits.
pub fn decide(
    policy: &RoutingPolicy,
    logits: Vec<f64>,
    aux: Option<&[f64]>,
    stream: Option<&mut CounterStream>,
) -> Result<RoutingDecision> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / policy.temperature).collect();
    let probs = softmax(&scaled);
    let (selected, weights) = select_weights(policy.kind, &probs, aux, stream)?;
    let entropy_nats = routing_entropy(&probs);
    Ok(RoutingDecision {
        logits,
        probs,
        weights,
        selected,
        entropy_nats,
    })
}
