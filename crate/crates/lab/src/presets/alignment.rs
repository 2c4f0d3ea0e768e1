//! Expert-data alignment: cluster ranks, per-expert velocity alignment and
//! expert disagreement.

use ddm_core::diagnostics::{alignment, cluster_rank_metrics, delta_refine, disagreement as dis, DEFAULT_RANK_PROBES};
use ddm_core::router::RoutingPolicy;
use ddm_core::sampler::SamplerConfig;
use ddm_core::stats::{mean, quartile_bin, std_dev, t_test};

use super::{label, Ctx, PresetOutput, Table};
use crate::pipeline::{build_cached, par_map, Lab};

pub fn cluster_rank(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let lab = ctx.lab;
    let n = ctx.samples("cluster-rank", ctx.n_samples);
    let mut out = PresetOutput::default();
    let mut table = Table::new(
        "cluster_rank",
        &["policy", "mean_rank", "mean_rank_std", "top2_match_rate", "top2_share"],
    );
    let cfg = SamplerConfig::heun(ctx.steps).recording(true, false);
    for p in ctx.policies()? {
        let per = par_map(n, |i| {
            let traj = lab.trajectory(&p, i, &cfg)?;
            Ok(cluster_rank_metrics(&traj, &lab.partition.centroids, &DEFAULT_RANK_PROBES)?)
        })?;
        let ranks: Vec<f64> = per.iter().map(|m| m.mean_rank).collect();
        let matches = mean(&per.iter().map(|m| m.top2_match_rate).collect::<Vec<_>>());
        let share = mean(&per.iter().map(|m| m.top2_share).collect::<Vec<_>>());
        table.push(vec![
            p.to_string().into(),
            mean(&ranks).into(),
            std_dev(&ranks).into(),
            matches.into(),
            share.into(),
        ]);
        out.set(format!("mean_rank/{}", label(&p)), mean(&ranks));
        out.set(format!("top2_match_rate/{}", label(&p)), matches);
        out.set(format!("top2_share/{}", label(&p)), share);
    }
    out.tables.push(table);
    out.notes.push(format!(
        "{n} samples per policy at t in {DEFAULT_RANK_PROBES:?}; ranks against the k-means centroids the experts were trained on. \
         top2_match_rate counts probes with any selected cluster among the two closest; top2_share is the fraction of selected clusters that are"
    ));
    Ok(out)
}

/// Per-sample mean angular deviation of selected and non-selected experts
/// from the Top-2 blended velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSummary {
    pub selected: Vec<f64>,
    pub non_selected: Vec<f64>,
}

impl AlignmentSummary {
    pub fn gap(&self) -> f64 {
        mean(&self.non_selected) - mean(&self.selected)
    }
}

pub fn top2_alignment(lab: &Lab, n: usize, steps: usize) -> anyhow::Result<AlignmentSummary> {
    let p = RoutingPolicy::top_k(2);
    let cfg = SamplerConfig::heun(steps).recording(true, true);
    let per = par_map(n, |i| {
        let traj = lab.trajectory(&p, i, &cfg)?;
        let all = traj.velocities_all.as_ref().expect("recorded");
        let (mut sel, mut non) = (Vec::new(), Vec::new());
        for (dec, vels) in traj.decisions.iter().zip(all) {
            let mut blended = vec![0.0; lab.cfg.d];
            for (w, v) in dec.weights.iter().zip(vels) {
                blended.iter_mut().zip(v).for_each(|(b, x)| *b += w * x);
            }
            let (s, o) = alignment(vels, &blended, &dec.selected).mean_angles();
            sel.extend(s);
            non.extend(o);
        }
        Ok((mean(&sel), mean(&non)))
    })?;
    let (selected, non_selected) = per.into_iter().filter(|(s, o)| s.is_finite() && o.is_finite()).unzip();
    Ok(AlignmentSummary { selected, non_selected })
}

struct AlignmentTables {
    angles: Table,
    tests: Table,
}

impl AlignmentTables {
    fn new(prefix: &str) -> Self {
        Self {
            angles: Table::new(prefix, &["system", "K", "separation", "status", "angle_deg", "angle_std", "n"]),
            tests: Table::new(&format!("{prefix}_tests"), &["system", "gap_deg", "reduction", "p_welch", "p_paired"]),
        }
    }

    fn add(&mut self, out: &mut PresetOutput, system: &str, lab: &Lab, a: &AlignmentSummary) -> anyhow::Result<()> {
        let welch = t_test(&a.selected, &a.non_selected, false)?;
        let paired = t_test(&a.selected, &a.non_selected, true)?;
        for (status, v) in [("selected", &a.selected), ("non-selected", &a.non_selected)] {
            self.angles.push(vec![
                system.into(),
                lab.cfg.k.into(),
                lab.cfg.separation.into(),
                status.into(),
                mean(v).into(),
                std_dev(v).into(),
                v.len().into(),
            ]);
        }
        self.tests.push(vec![
            system.into(),
            a.gap().into(),
            (a.gap() / mean(&a.non_selected)).into(),
            welch.p_two_tailed.into(),
            paired.p_two_tailed.into(),
        ]);
        out.set(format!("theta_selected/{system}"), mean(&a.selected));
        out.set(format!("theta_non_selected/{system}"), mean(&a.non_selected));
        out.set(format!("gap/{system}"), a.gap());
        out.set(format!("p_welch/{system}"), welch.p_two_tailed);
        out.set(format!("p_paired/{system}"), paired.p_two_tailed);
        Ok(())
    }

    fn finish(self, out: &mut PresetOutput) {
        out.tables.push(self.angles);
        out.tables.push(self.tests);
    }
}

pub fn expert_quality(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("expert-quality", ctx.n_jacobian);
    let mut out = PresetOutput::default();
    let mut tables = AlignmentTables::new("expert_quality");
    let a = top2_alignment(ctx.lab, n, ctx.steps)?;
    tables.add(&mut out, "default", ctx.lab, &a)?;
    tables.finish(&mut out);
    out.notes.push(format!(
        "Top-2 routing, {n} samples; per-sample angles averaged over every recorded step; Welch and paired t-tests on the per-sample means"
    ));
    Ok(out)
}

/// The strong-specialization system: more clusters, twice as far apart.
pub fn strong_config(cfg: &crate::config::LabConfig) -> crate::config::LabConfig {
    let mut strong = cfg.clone();
    strong.k = cfg.override_usize("strong-specialization", "K", 10);
    strong.separation = 2.0 * cfg.separation;
    strong
}

pub fn strong_specialization(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("strong-specialization", ctx.n_jacobian);
    let strong = build_cached(&strong_config(&ctx.lab.cfg))?;
    let mut out = PresetOutput::default();
    let mut tables = AlignmentTables::new("alignment");
    let base = top2_alignment(ctx.lab, n, ctx.steps)?;
    tables.add(&mut out, "default", ctx.lab, &base)?;
    let spec = top2_alignment(&strong, n, ctx.steps)?;
    tables.add(&mut out, "strong", &strong, &spec)?;
    out.set("gap_difference", spec.gap() - base.gap());
    tables.finish(&mut out);
    let ranks = cluster_rank(&Ctx::new(&strong))?;
    for (k, v) in &ranks.metrics {
        out.set(format!("strong/{k}"), *v);
    }
    let mut t = ranks.tables.into_iter().next().expect("cluster-rank table");
    t.name = "strong_cluster_rank".into();
    out.tables.push(t);
    out.notes.push(format!(
        "strong system: K = {}, separation = {}, trained in-process from the same master seed; {n} Top-2 samples per system",
        strong.cfg.k, strong.cfg.separation
    ));
    Ok(out)
}

pub fn disagreement(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let lab = ctx.lab;
    let n = ctx.samples("disagreement", ctx.n_samples);
    let full = RoutingPolicy::full();
    let top2 = RoutingPolicy::top_k(2);
    let cfg = SamplerConfig::heun(ctx.steps).recording(false, true);
    let per = par_map(n, |i| {
        let traj = lab.trajectory(&full, i, &cfg)?;
        let reference = lab.trajectory(&top2, i, &SamplerConfig::heun(ctx.steps))?;
        let d_int = dis(&traj)?.d_int;
        let distance = delta_refine(traj.endpoint(), reference.endpoint())?;
        Ok((d_int, distance, lab.truth(None).nll(traj.endpoint())))
    })?;
    let d_int: Vec<f64> = per.iter().map(|r| r.0).collect();
    let bins = quartile_bin(&d_int)?;
    let mut out = PresetOutput::default();
    let mut quart = Table::new("quartiles", &["quartile", "n", "d_int_mean", "distance_mean", "distance_std", "nll_mean"]);
    let mut means = Vec::new();
    for q in 1..=4u8 {
        let rows: Vec<&(f64, f64, f64)> = per.iter().zip(&bins).filter(|(_, b)| **b == q).map(|(r, _)| r).collect();
        let col = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
        let dist = col(|r| r.1);
        quart.push(vec![
            format!("Q{q}").into(),
            rows.len().into(),
            mean(&col(|r| r.0)).into(),
            mean(&dist).into(),
            std_dev(&dist).into(),
            mean(&col(|r| r.2)).into(),
        ]);
        out.set(format!("distance/Q{q}"), mean(&dist));
        means.push(mean(&dist));
    }
    let monotone = means.windows(2).all(|w| w[1] > w[0]);
    out.set("monotone", f64::from(u8::from(monotone)));
    let mut samples = Table::new("samples", &["index", "d_int", "distance_to_top2", "nll", "quartile"]);
    for (i, (r, b)) in per.iter().zip(&bins).enumerate() {
        samples.push(vec![i.into(), r.0.into(), r.1.into(), r.2.into(), (*b as usize).into()]);
    }
    out.tables.push(quart);
    out.tables.push(samples);
    out.notes.push(format!(
        "full-ensemble samples binned by integrated disagreement; distance is the normalised L2 gap to the Top-2 sample from the same noise ({n} samples)"
    ));
    Ok(out)
}
