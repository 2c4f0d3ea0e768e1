//! Trajectory and field diagnostics: empirical effective Lipschitz constant,
//! step-refinement disagreement, local truncation error, Jacobian
//! decomposition, expert disagreement and alignment, cluster ranks, switching
//! scores, failure flags and convergence probes.

mod jacobian;

pub use jacobian::{JacobianMode, RoutedJacobian};

use serde::{Deserialize, Serialize};

use crate::dataworld::cluster_rank;
use crate::error::{check_len, Error, Result};
use crate::numcore::{dist, dot, norm, Mat, PowerIterConfig};
use crate::router::{RoutingDecision, RoutingPolicy};
use crate::sampler::{heun_step, integrate, sample_trajectory, SamplerConfig, Trajectory, VectorField};
use crate::stats::percentile;
use crate::system::DdmSystem;

/// Probe times for cluster-rank analysis.
pub const DEFAULT_RANK_PROBES: [f64; 3] = [0.3, 0.5, 0.7];
/// Margin floor in the switching score.
pub const EPS_SWITCH: f64 = 1e-3;
/// Sub-steps of the high-precision local-error reference.
pub const LOCAL_ERROR_SUBSTEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeffStep {
    pub n: usize,
    pub t: f64,
    pub norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeffRecord {
    pub per_step: Vec<LeffStep>,
    pub leff: f64,
    pub mode: JacobianMode,
    pub stride: usize,
}

/// `max_n ‖J_x v(x_n, t_n)‖` over every `stride`-th recorded state, each
/// Jacobian taken on the routing branch recorded at that state. Every step
/// starts power iteration from the same vector.
pub fn empirical_leff(
    system: &DdmSystem,
    policy: &RoutingPolicy,
    traj: &Trajectory,
    mode: JacobianMode,
    stride: usize,
    cfg: &PowerIterConfig,
) -> Result<LeffRecord> {
    if traj.decisions.len() != traj.times.len() {
        return Err(Error::Config("empirical_leff needs a trajectory recorded with decisions".into()));
    }
    let stride = stride.max(1);
    let mut per_step = Vec::new();
    for n in (0..traj.times.len()).step_by(stride) {
        let dec = &traj.decisions[n];
        let jac = RoutedJacobian::new(
            system,
            traj.state(n),
            traj.times[n],
            &dec.selected,
            policy.temperature,
            mode,
        )?;
        let est = jac.spectral_norm(cfg)?;
        per_step.push(LeffStep {
            n,
            t: traj.times[n],
            norm: est.estimate,
            converged: est.converged,
        });
    }
    let leff = per_step.iter().map(|s| s.norm).fold(0.0, f64::max);
    Ok(LeffRecord {
        per_step,
        leff,
        mode,
        stride,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeffConsistency {
    /// `(h, L̂^(h))` for each refinement.
    pub points: Vec<(f64, f64)>,
    /// `|L̂^(h_i) - L̂^(h_{i+1})|` between successive refinements.
    pub gaps: Vec<f64>,
}

/// L̂_eff of the same noise at successively finer step counts.
#[allow(clippy::too_many_arguments)]
pub fn leff_consistency(
    system: &DdmSystem,
    policy: &RoutingPolicy,
    x1: &[f64],
    n_list: &[usize],
    mode: JacobianMode,
    stride: usize,
    cfg: &PowerIterConfig,
    seed: u64,
) -> Result<LeffConsistency> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("refinement step counts must increase".into()));
    }
    let mut points = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let traj = sample_trajectory(system, policy, x1, &SamplerConfig::heun(n).recording(true, false), seed)?;
        let rec = empirical_leff(system, policy, &traj, mode, stride, cfg)?;
        points.push((1.0 / n as f64, rec.leff));
    }
    let gaps = points.windows(2).map(|w| (w[0].1 - w[1].1).abs()).collect();
    Ok(LeffConsistency { points, gaps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    /// `‖a - b‖ / √d`
    NormalizedL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub delta_refine: f64,
    pub steps: usize,
    pub distance_kind: DistanceKind,
}

/// Dimension-normalised Euclidean distance between two endpoints.
pub fn delta_refine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("delta_refine", a.len(), b.len())?;
    Ok(dist(a, b) / (a.len() as f64).sqrt())
}

pub fn refine_record(coarse: &[f64], fine: &[f64], steps: usize) -> Result<RefineRecord> {
    Ok(RefineRecord {
        delta_refine: delta_refine(coarse, fine)?,
        steps,
        distance_kind: DistanceKind::NormalizedL2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalErrorRecord {
    pub eps_local: f64,
    pub h: f64,
    pub x: Vec<f64>,
    pub t: f64,
    /// `eps(h) / eps(h/2)` when measured.
    pub scaling_ratio: Option<f64>,
}

/// One Heun step of size `h` against ten Heun sub-steps of `h/10` over the
/// same interval.
pub fn local_truncation_error(field: &mut dyn VectorField, x: &[f64], t: f64, h: f64) -> Result<LocalErrorRecord> {
    if t - h < -1e-12 {
        return Err(Error::Domain(format!("local error step from t = {t} with h = {h} leaves [0, 1]")));
    }
    let single = heun_step(field, x, t, h)?;
    let sub = h / LOCAL_ERROR_SUBSTEPS as f64;
    let mut xr = x.to_vec();
    for i in 0..LOCAL_ERROR_SUBSTEPS {
        let ti = t - i as f64 * sub;
        xr = heun_step(field, &xr, ti.max(sub), sub)?;
    }
    Ok(LocalErrorRecord {
        eps_local: dist(&single, &xr),
        h,
        x: x.to_vec(),
        t,
        scaling_ratio: None,
    })
}

/// Local error at `h` and `h/2`, with the ratio filled in.
pub fn local_error_scaling(field: &mut dyn VectorField, x: &[f64], t: f64, h: f64) -> Result<(LocalErrorRecord, LocalErrorRecord)> {
    let mut coarse = local_truncation_error(field, x, t, h)?;
    let fine = local_truncation_error(field, x, t, h / 2.0)?;
    coarse.scaling_ratio = (fine.eps_local > 0.0).then(|| coarse.eps_local / fine.eps_local);
    Ok((coarse, fine))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DominantTerm {
    Expert,
    Router,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub expert_term_norm: f64,
    pub router_term_norm: f64,
    pub dominant: DominantTerm,
}

/// Spectral norms of the expert and router terms of `∇ₓv` at `(x, t)` on the
/// branch selected by `decision`.
pub fn jacobian_decomposition(
    system: &DdmSystem,
    policy: &RoutingPolicy,
    decision: &RoutingDecision,
    x: &[f64],
    t: f64,
    cfg: &PowerIterConfig,
) -> Result<DecompositionRecord> {
    let jac = RoutedJacobian::new(system, x, t, &decision.selected, policy.temperature, JacobianMode::ExpertTermOnly)?;
    let expert_term_norm = jac.spectral_norm(cfg)?.estimate;
    let jac = jac.with_mode(JacobianMode::RouterTermOnly);
    let router_term_norm = jac.spectral_norm(cfg)?.estimate;
    Ok(DecompositionRecord {
        expert_term_norm,
        router_term_norm,
        dominant: if router_term_norm > expert_term_norm {
            DominantTerm::Router
        } else {
            DominantTerm::Expert
        },
    })
}

/// Mean pairwise Euclidean distance between expert velocities.
pub fn mean_pairwise_distance(velocities: &[Vec<f64>]) -> f64 {
    let k = velocities.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += dist(&velocities[i], &velocities[j]);
        }
    }
    total / (k * (k - 1) / 2) as f64
}

/// Trapezoid rule over a (possibly decreasing) time grid, positively oriented.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| (t[0] - t[1]).abs() * 0.5 * (v[0] + v[1]))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRecord {
    pub per_step: Vec<(f64, f64)>,
    pub d_int: f64,
}

pub fn disagreement(traj: &Trajectory) -> Result<DisagreementRecord> {
    let all = traj
        .velocities_all
        .as_ref()
        .ok_or_else(|| Error::Config("disagreement needs all-expert velocities recorded".into()))?;
    let per_step: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(all)
        .map(|(&t, v)| (t, mean_pairwise_distance(v)))
        .collect();
    let (ts, ds): (Vec<f64>, Vec<f64>) = per_step.iter().cloned().unzip();
    Ok(DisagreementRecord {
        d_int: trapezoid(&ts, &ds),
        per_step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAlignment {
    pub k: usize,
    /// `None` when the expert velocity is zero.
    pub cosine: Option<f64>,
    pub theta_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub per_expert: Vec<ExpertAlignment>,
    pub selected: Vec<usize>,
    /// False when the blended velocity is zero and no angle is defined.
    pub defined: bool,
}

impl AlignmentRecord {
    /// Mean angle of selected and of non-selected experts (defined ones only).
    pub fn mean_angles(&self) -> (Option<f64>, Option<f64>) {
        let avg = |sel: bool| {
            let v: Vec<f64> = self
                .per_expert
                .iter()
                .filter(|a| self.selected.contains(&a.k) == sel)
                .filter_map(|a| a.theta_deg)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        (avg(true), avg(false))
    }
}

/// Cosine and angle between every expert velocity and the blended velocity.
pub fn alignment(velocities: &[Vec<f64>], blended: &[f64], selected: &[usize]) -> AlignmentRecord {
    let bn = norm(blended);
    let per_expert = velocities
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let vn = norm(v);
            let cosine = (bn > 0.0 && vn > 0.0).then(|| (dot(v, blended) / (vn * bn)).clamp(-1.0, 1.0));
            ExpertAlignment {
                k,
                cosine,
                theta_deg: cosine.map(|c| c.acos().to_degrees()),
            }
        })
        .collect();
    AlignmentRecord {
        per_expert,
        selected: selected.to_vec(),
        defined: bn > 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProbe {
    pub t: f64,
    pub n: usize,
    /// Mean rank of the selected experts' clusters.
    pub mean_rank: f64,
    /// Some selected cluster is among the two closest.
    pub top2_match: bool,
    /// Share of selected clusters that are among the two closest.
    pub top2_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRankMetrics {
    pub mean_rank: f64,
    pub top2_match_rate: f64,
    pub top2_share: f64,
    pub probes: Vec<RankProbe>,
}

/// Ranks of the selected experts' clusters at the recorded states nearest to
/// each probe time.
pub fn cluster_rank_metrics(traj: &Trajectory, centroids: &Mat, t_probes: &[f64]) -> Result<ClusterRankMetrics> {
    if traj.decisions.len() != traj.times.len() {
        return Err(Error::Config("cluster-rank metrics need recorded decisions".into()));
    }
    if t_probes.is_empty() {
        return Err(Error::Config("no probe times".into()));
    }
    let mut probes = Vec::with_capacity(t_probes.len());
    for &t in t_probes {
        let n = traj.nearest_step(t);
        let ranks = cluster_rank(traj.state(n), centroids)?;
        let sel = &traj.decisions[n].selected;
        let close = sel.iter().filter(|&&k| ranks.ranks[k] <= 2).count();
        probes.push(RankProbe {
            t,
            n,
            mean_rank: ranks.mean_rank(sel),
            top2_match: close > 0,
            top2_share: close as f64 / sel.len() as f64,
        });
    }
    let np = probes.len() as f64;
    Ok(ClusterRankMetrics {
        mean_rank: probes.iter().map(|p| p.mean_rank).sum::<f64>() / np,
        top2_match_rate: probes.iter().filter(|p| p.top2_match).count() as f64 / np,
        top2_share: probes.iter().map(|p| p.top2_share).sum::<f64>() / np,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchStep {
    pub t: f64,
    /// `p_(1) - p_(2)`
    pub m_p: f64,
    /// `z_(1) - z_(2)` on raw logits
    pub m_z: f64,
    /// `‖v_(1) - v_(2)‖`
    pub g: f64,
    pub s_switch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingRecord {
    pub per_step: Vec<SwitchStep>,
    pub s_eff: f64,
    pub s_int: f64,
    pub eps_sw: f64,
}

pub fn switching_score(g: f64, m_z: f64) -> f64 {
    g / (m_z + EPS_SWITCH)
}

pub fn switching_metrics(traj: &Trajectory) -> Result<SwitchingRecord> {
    let all = traj
        .velocities_all
        .as_ref()
        .ok_or_else(|| Error::Config("switching metrics need all-expert velocities".into()))?;
    if traj.decisions.len() != traj.times.len() {
        return Err(Error::Config("switching metrics need recorded decisions".into()));
    }
    let k = traj.decisions.first().map_or(0, |d| d.probs.len());
    if k < 2 {
        return Err(Error::Config("switching metrics need at least two experts".into()));
    }
    let per_step: Vec<SwitchStep> = traj
        .times
        .iter()
        .zip(&traj.decisions)
        .zip(all)
        .map(|((&t, dec), vels)| {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| dec.probs[b].total_cmp(&dec.probs[a]).then(a.cmp(&b)));
            let (i1, i2) = (order[0], order[1]);
            let m_z = (dec.logits[i1] - dec.logits[i2]).max(0.0);
            let g = dist(&vels[i1], &vels[i2]);
            SwitchStep {
                t,
                m_p: dec.probs[i1] - dec.probs[i2],
                m_z,
                g,
                s_switch: switching_score(g, m_z),
            }
        })
        .collect();
    let ts: Vec<f64> = per_step.iter().map(|s| s.t).collect();
    let ss: Vec<f64> = per_step.iter().map(|s| s.s_switch).collect();
    Ok(SwitchingRecord {
        s_eff: ss.iter().cloned().fold(0.0, f64::max),
        s_int: trapezoid(&ts, &ss),
        per_step,
        eps_sw: EPS_SWITCH,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureThresholds {
    pub entropy_nats: f64,
    pub delta_refine: f64,
    pub leff: f64,
}

impl FailureThresholds {
    /// The absolute constants used for eight latent-space experts.
    pub fn paper8() -> Self {
        Self {
            entropy_nats: 1.5,
            delta_refine: 0.1,
            leff: 50.0,
        }
    }

    /// Percentile protocol: Δ_refine and L̂_eff thresholds are the 99th
    /// percentiles of Top-2 runs; the entropy threshold is `0.72·ln K`.
    pub fn from_top2_runs(k: usize, top2_delta_refine: &[f64], top2_leff: &[f64]) -> Self {
        Self {
            entropy_nats: 0.72 * (k as f64).ln(),
            delta_refine: percentile(top2_delta_refine, 99.0),
            leff: percentile(top2_leff, 99.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureFlags {
    pub routing_uncertain: bool,
    pub poor_convergence: bool,
    pub high_leff: bool,
    pub thresholds: FailureThresholds,
}

/// Strict-inequality failure classification.
pub fn failure_classify(leff: f64, delta_refine: f64, max_entropy: f64, thresholds: &FailureThresholds) -> FailureFlags {
    FailureFlags {
        routing_uncertain: max_entropy > thresholds.entropy_nats,
        poor_convergence: delta_refine > thresholds.delta_refine,
        high_leff: leff > thresholds.leff,
        thresholds: *thresholds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub steps: usize,
    pub h: f64,
    pub exceed_fraction: f64,
    pub mean_error: f64,
}

/// Fraction of noise draws whose Heun endpoint at each step count lies more
/// than `epsilon` (normalised L2) from a reference at four times the largest
/// step count. `endpoint(x1, index, steps)` integrates draw `index`.
pub fn convergence_probe<F>(noise_batch: &[Vec<f64>], epsilon: f64, n_list: &[usize], endpoint: F) -> Result<Vec<ConvergencePoint>>
where
    F: Fn(&[f64], usize, usize) -> Result<Vec<f64>>,
{
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("convergence probe step counts must be non-empty and increasing".into()));
    }
    let reference_steps = 4 * n_list[n_list.len() - 1];
    let references: Vec<Vec<f64>> = noise_batch
        .iter()
        .enumerate()
        .map(|(i, x1)| endpoint(x1, i, reference_steps))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut exceed = 0usize;
        let mut total = 0.0;
        for (i, x1) in noise_batch.iter().enumerate() {
            let e = delta_refine(&endpoint(x1, i, n)?, &references[i])?;
            total += e;
            if e > epsilon {
                exceed += 1;
            }
        }
        let nb = noise_batch.len().max(1) as f64;
        out.push(ConvergencePoint {
            steps: n,
            h: 1.0 / n as f64,
            exceed_fraction: exceed as f64 / nb,
            mean_error: total / nb,
        });
    }
    Ok(out)
}

/// Heun endpoint of any field factory, for [`convergence_probe`].
pub fn heun_endpoint<V: VectorField>(field: &mut V, x1: &[f64], steps: usize) -> Result<Vec<f64>> {
    Ok(integrate(field, x1, &SamplerConfig::heun(steps), 0)?.endpoint().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::FnField;

    #[test]
    fn delta_refine_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(delta_refine(&a, &a).unwrap(), 0.0);
        let b = [1.0, 3.0, 3.0, 4.0];
        assert_eq!(delta_refine(&a, &b).unwrap(), 0.5);
        assert_eq!(delta_refine(&b, &a).unwrap(), 0.5);
    }

    #[test]
    fn local_error_on_identity_field() {
        let mut f = FnField { dim: 1, f: |x: &[f64], _: f64| x.to_vec() };
        let rec = local_truncation_error(&mut f, &[1.0], 1.0, 0.1).unwrap();
        // one Heun step gives 0.905, ten sub-steps give (1 - 0.00995)^10
        let fine = (1.0f64 - 0.00995).powi(10);
        assert!((rec.eps_local - (0.905 - fine)).abs() < 1e-14, "{}", rec.eps_local);
        assert!((fine - (-0.1f64).exp()).abs() < 2e-6);
    }

    #[test]
    fn local_error_of_constant_field_is_zero() {
        let mut f = FnField { dim: 2, f: |_: &[f64], _: f64| vec![1.5, -2.0] };
        let rec = local_truncation_error(&mut f, &[0.0, 1.0], 0.5, 0.2).unwrap();
        assert!(rec.eps_local < 1e-15);
    }

    #[test]
    fn disagreement_examples() {
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((mean_pairwise_distance(&two) - 2f64.sqrt()).abs() < 1e-15);
        let tri = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0]];
        assert!((mean_pairwise_distance(&tri) - 1.0).abs() < 1e-12);
        let same = vec![vec![0.3, 0.1]; 5];
        assert_eq!(mean_pairwise_distance(&same), 0.0);
    }

    #[test]
    fn trapezoid_on_decreasing_grid() {
        let ts = [1.0, 0.5, 0.0];
        let vs = [2.0, 2.0, 2.0];
        assert!((trapezoid(&ts, &vs) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_angles() {
        let blended = vec![1.0, 0.0];
        let rec = alignment(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]], &blended, &[0]);
        assert_eq!(rec.per_expert[0].theta_deg, Some(0.0));
        assert!((rec.per_expert[1].theta_deg.unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(rec.per_expert[2].cosine, None);
        assert_eq!(rec.mean_angles(), (Some(0.0), Some(90.0)));
        let undefined = alignment(&[vec![1.0, 0.0]], &[0.0, 0.0], &[0]);
        assert!(!undefined.defined);
    }

    #[test]
    fn switching_arithmetic() {
        assert!((switching_score(2.0, 1.0) - 2.0 / 1.001).abs() < 1e-15);
        assert!((switching_score(2.0, 0.0) - 2000.0).abs() < 1e-9);
        assert_eq!(switching_score(0.0, 0.3), 0.0);
    }

    #[test]
    fn failure_flags() {
        let p = FailureThresholds::paper8();
        let f = failure_classify(30.0, 0.05, 2.0, &p);
        assert!(f.routing_uncertain && !f.poor_convergence && !f.high_leff);
        let f = failure_classify(0.0, 0.0, 0.0, &p);
        assert!(!f.routing_uncertain && !f.poor_convergence && !f.high_leff);
        let f = failure_classify(50.0, 0.1, 1.5, &p);
        assert!(!f.routing_uncertain && !f.poor_convergence && !f.high_leff);
    }

    #[test]
    fn percentile_thresholds() {
        let th = FailureThresholds::from_top2_runs(8, &[0.1; 10], &[3.0; 10]);
        assert!((th.entropy_nats - 0.72 * 8f64.ln()).abs() < 1e-15);
        assert!((th.entropy_nats - 1.497).abs() < 1e-3);
        assert_eq!(th.delta_refine, 0.1);
        assert_eq!(th.leff, 3.0);
    }

    #[test]
    fn convergence_probe_infinite_epsilon() {
        let noise = vec![vec![1.0], vec![-2.0]];
        let pts = convergence_probe(&noise, f64::INFINITY, &[2, 4], |x1, _, n| {
            let mut f = FnField { dim: 1, f: |x: &[f64], _: f64| vec![x[0].sin()] };
            heun_endpoint(&mut f, x1, n)
        })
        .unwrap();
        assert!(pts.iter().all(|p| p.exceed_fraction == 0.0));
        assert!(pts[0].mean_error > pts[1].mean_error);
    }
}
