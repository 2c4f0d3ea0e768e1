//! Flow-matching experts trained in isolation, one per data cluster.
//!
//! Path convention: `x_t = (1 - t)·x0 + t·x1` with data `x0` and noise `x1`,
//! so `t = 1` is pure noise and `t = 0` is data. The regression target is the
//! constant path velocity `x1 - x0`; sampling integrates from `t = 1` down.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numcore::{Adam, AdamConfig, DenseNet, Mat, NetGrads};
use crate::rng::{child_seed, fnv1a64, SplitMix64};

/// Fourier time features: `(sin(π·2^i·t), cos(π·2^i·t))` for `i < m`.
///
/// The lowest frequency spans half a period over `[0, 1]`, so the features of
/// `t = 0` and `t = 1` differ.
pub fn time_features(t: f64, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * m);
    for i in 0..m {
        let w = std::f64::consts::PI * f64::from(1u32 << i) * t;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Network input `[x, τ(t)]`.
pub fn net_input(x: &[f64], t: f64, m: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + 2 * m);
    v.extend_from_slice(x);
    v.extend(time_features(t, m));
    v
}

/// Interpolated state and target velocity for one `(data, noise, t)` triple.
pub fn fm_pair(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("fm_pair noise", x0.len(), x1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    let xt = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let target = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    Ok((xt, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    /// Number of Fourier time-feature pairs.
    pub m: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 64,
            lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            hidden_dims: vec![64, 64],
            m: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(format!(
                "train config needs lr > 0, steps >= 1, batch >= 1 (lr={}, steps={}, batch={})",
                self.lr, self.steps, self.batch
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.adam_betas,
            eps: self.adam_eps,
        }
    }

    pub(crate) fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden_dims);
        dims.push(output);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub net: DenseNet,
    pub cluster_id: usize,
    pub train_config_hash: u64,
    pub m: usize,
}

impl Expert {
    pub fn new(net: DenseNet, cluster_id: usize, m: usize, train_config_hash: u64) -> Result<Self> {
        let d = net.output_dim();
        check_len("expert input dim", d + 2 * m, net.input_dim())?;
        Ok(Self {
            net,
            cluster_id,
            train_config_hash,
            m,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("expert state", self.dim(), x.len())?;
        self.net.forward(&net_input(x, t, self.m))
    }
}

/// Per-step losses and a count of the partition rows the trainer touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub rows_read: usize,
    pub rows_available: usize,
}

/// Read-only view of one cluster that counts every row access.
struct AuditedRows<'a> {
    rows: &'a Mat,
    reads: usize,
}

impl<'a> AuditedRows<'a> {
    fn row(&mut self, i: usize) -> &'a [f64] {
        self.reads += 1;
        self.rows.row(i)
    }
}

/// Fit one expert on its own cluster by minibatch Adam on the flow-matching
/// MSE. Minibatches are drawn with replacement.
pub fn train_expert(cluster_points: &Mat, cfg: &TrainConfig, cluster_id: usize) -> Result<(Expert, TrainReport)> {
    cfg.validate()?;
    if cluster_points.rows == 0 {
        return Err(Error::Domain(format!("cluster {cluster_id} is empty")));
    }
    let d = cluster_points.cols;
    let dims = cfg.layer_dims(d + 2 * cfg.m, d);
    let mut net = DenseNet::init(&dims, child_seed(cfg.seed, "expert/init", 0))?;
    let mut rng = SplitMix64::new(child_seed(cfg.seed, "expert/batches", 0));
    let mut opt = Adam::new(&net, cfg.adam());
    let mut grads = NetGrads::zeros_like(&net);
    let mut data = AuditedRows {
        rows: cluster_points,
        reads: 0,
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let norm = 1.0 / (cfg.batch * d) as f64;
    let mut input = Mat::zeros(cfg.batch, d + 2 * cfg.m);
    let mut cot = Mat::zeros(cfg.batch, d);

    for step in 1..=cfg.steps {
        grads.clear();
        let mut loss = 0.0;
        for b in 0..cfg.batch {
            let x0 = data.row(rng.below(cluster_points.rows));
            let t = rng.next_f64();
            let (inp, target) = (input.row_mut(b), cot.row_mut(b));
            for j in 0..d {
                let x1 = rng.normal();
                inp[j] = (1.0 - t) * x0[j] + t * x1;
                target[j] = x1 - x0[j];
            }
            inp[d..].copy_from_slice(&time_features(t, cfg.m));
        }
        let trace = net.forward_batch(&input)?;
        for (c, o) in cot.data.iter_mut().zip(&trace.output().data) {
            let r = o - *c;
            loss += r * r;
            *c = 2.0 * r * norm;
        }
        net.backward_batch(&trace, &cot, &mut grads)?;
        loss *= norm;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        opt.step(&mut net, &grads);
    }
    let expert = Expert::new(net, cluster_id, cfg.m, cfg.hash())?;
    let report = TrainReport {
        losses,
        rows_read: data.reads,
        rows_available: cluster_points.rows,
    };
    Ok((expert, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    experts: Vec<Expert>,
    d: usize,
    m: usize,
}

impl ExpertEnsemble {
    pub fn new(mut experts: Vec<Expert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("ensemble needs at least one expert".into()));
        }
        experts.sort_by_key(|e| e.cluster_id);
        for (i, e) in experts.iter().enumerate() {
            if e.cluster_id != i {
                return Err(Error::Config(format!(
                    "expert cluster ids must be exactly 0..{}, found {}",
                    experts.len(),
                    e.cluster_id
                )));
            }
        }
        let (d, m) = (experts[0].dim(), experts[0].m);
        if experts.iter().any(|e| e.dim() != d || e.m != m) {
            return Err(Error::Config("experts disagree on dimension or time features".into()));
        }
        Ok(Self { experts, d, m })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn expert(&self, k: usize) -> &Expert {
        &self.experts[k]
    }

    /// Velocities of every expert, indexed by cluster id.
    pub fn velocities(&self, x: &[f64], t: f64) -> Result<Vec<Vec<f64>>> {
        self.experts.iter().map(|e| e.velocity(x, t)).collect()
    }
}

/// Train one expert per cluster of `dataset`; `cfg_for(k)` supplies the
/// per-expert configuration (typically differing only in seed).
pub fn train_ensemble(
    dataset: &crate::dataworld::Dataset,
    cfg_for: impl Fn(usize) -> TrainConfig + Sync,
) -> Result<(ExpertEnsemble, Vec<TrainReport>)> {
    let trained: Vec<(Expert, TrainReport)> = (0..dataset.k)
        .into_par_iter()
        .map(|k| train_expert(&dataset.cluster_points(k), &cfg_for(k), k))
        .collect::<Result<_>>()?;
    let (experts, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((ExpertEnsemble::new(experts)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fm_pair_endpoints() {
        let x0 = [1.0, -2.0];
        let x1 = [0.5, 4.0];
        assert_eq!(fm_pair(&x0, &x1, 0.0).unwrap(), (x0.to_vec(), vec![-0.5, 6.0]));
        assert_eq!(fm_pair(&x0, &x1, 1.0).unwrap(), (x1.to_vec(), vec![-0.5, 6.0]));
        assert_eq!(
            fm_pair(&[0.0, 0.0], &[2.0, 2.0], 0.5).unwrap(),
            (vec![1.0, 1.0], vec![2.0, 2.0])
        );
    }

    #[test]
    fn fm_pair_domain() {
        assert!(matches!(fm_pair(&[0.0], &[1.0], 1.5), Err(Error::Domain(_))));
        assert!(fm_pair(&[0.0], &[1.0], -0.1).is_err());
        assert!(fm_pair(&[0.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn time_features_separate_endpoints() {
        let a = time_features(0.0, 4);
        let b = time_features(1.0, 4);
        assert_eq!(a.len(), 8);
        assert!((a[1] - b[1]).abs() > 1.9);
    }

    #[test]
    fn zero_net_gives_zero_velocity() {
        let net = DenseNet::zeros(&[2 + 8, 16, 2]).unwrap();
        let e = Expert::new(net, 0, 4, 0).unwrap();
        assert_eq!(e.velocity(&[3.0, -1.0], 0.4).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn expert_rejects_wrong_input_dim() {
        let net = DenseNet::zeros(&[5, 2]).unwrap();
        assert!(Expert::new(net, 0, 4, 0).is_err());
    }

    #[test]
    fn ensemble_requires_contiguous_ids() {
        let mk = |id| Expert::new(DenseNet::zeros(&[4, 2]).unwrap(), id, 1, 0).unwrap();
        assert!(ExpertEnsemble::new(vec![mk(0), mk(2)]).is_err());
        let ens = ExpertEnsemble::new(vec![mk(1), mk(0)]).unwrap();
        assert_eq!(ens.expert(1).cluster_id, 1);
    }

    #[test]
    fn diverging_training_is_reported() {
        let pts = Mat::from_rows(&[vec![1e200, 1e200]]);
        let cfg = TrainConfig {
            steps: 3,
            batch: 4,
            hidden_dims: vec![4],
            ..Default::default()
        };
        match train_expert(&pts, &cfg, 0) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
