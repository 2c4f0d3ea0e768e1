//! Routing comparisons: stability, quality and failure prediction.

use ddm_core::diagnostics::{
    empirical_leff, failure_classify, switching_metrics, FailureThresholds, JacobianMode, SwitchingRecord,
};
use ddm_core::rng::SplitMix64;
use ddm_core::router::RoutingPolicy;
use ddm_core::sampler::SamplerConfig;
use ddm_core::stats::{auc, average_ranks, mean, percentile, spearman, std_dev, SummaryStats};

use super::{label, measure_batch, samples_table, summarize, Ctx, PresetOutput, SampleMetrics, Table};
use crate::pipeline::par_map;

const TEMPERATURES: [f64; 6] = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0];
const TOP_P: [f64; 3] = [0.8, 0.9, 1.0];
/// Margins below this count as near-switching steps.
const LOW_MARGIN: f64 = 0.05;

fn leffs_and_drefs(batch: &[SampleMetrics]) -> (Vec<f64>, Vec<f64>) {
    batch.iter().filter_map(|s| s.leff.map(|l| (l, s.delta_refine))).unzip()
}

/// Samples whose Δ_refine is above the batch's 75th percentile.
fn unstable_labels(drefs: &[f64]) -> Vec<bool> {
    let cut = percentile(drefs, 75.0);
    drefs.iter().map(|&d| d > cut).collect()
}

/// Spearman ρ and the AUC of L̂_eff for high Δ_refine over the samples with L̂_eff.
fn predictiveness(batch: &[SampleMetrics]) -> anyhow::Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let (l, d) = leffs_and_drefs(batch);
    if l.len() < 4 {
        return Ok((None, None, None));
    }
    let c = spearman(&l, &d)?;
    let a = auc(&l, &unstable_labels(&d))?;
    Ok((c.rho, c.p_two_tailed, a))
}

pub fn dissociation(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let mut out = PresetOutput::default();
    let mut table = Table::new("dissociation", &["policy", "nll", "leff_mean", "leff_std", "dref_mean", "dref_std"]);
    let mut batches = Vec::new();
    for p in ctx.policies()? {
        let batch = measure_batch(ctx, &p, ctx.n_samples, ctx.n_jacobian, ctx.steps, None)?;
        let s = summarize(&batch);
        let name = label(&p);
        table.push(vec![
            p.to_string().into(),
            s.nll.into(),
            s.leff_mean.into(),
            s.leff_std.into(),
            s.dref_mean.into(),
            s.dref_std.into(),
        ]);
        out.set(format!("nll/{name}"), s.nll);
        out.set(format!("dref_mean/{name}"), s.dref_mean);
        out.set(format!("leff_mean/{name}"), s.leff_mean);
        batches.push((name, batch));
    }
    let views: Vec<(String, &[SampleMetrics])> = batches.iter().map(|(n, b)| (n.clone(), b.as_slice())).collect();
    out.tables.push(table);
    out.tables.push(samples_table("samples", &views));
    out.notes.push(format!(
        "{} samples per policy, Heun {} vs {} steps; L̂_eff (full field) on the first {}",
        ctx.n_samples,
        ctx.steps,
        2 * ctx.steps,
        ctx.n_jacobian
    ));
    Ok(out)
}

pub fn refinement(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let mut out = PresetOutput::default();
    let mut table = Table::new(
        "refinement",
        &["policy", "n", "spearman_rho", "spearman_p", "auc_leff", "dref_mean", "leff_mean"],
    );
    let mut batches = Vec::new();
    for p in ctx.policies()? {
        let batch = measure_batch(ctx, &p, ctx.n_jacobian, ctx.n_jacobian, ctx.steps, None)?;
        let (rho, pv, a) = predictiveness(&batch)?;
        let s = summarize(&batch);
        let name = label(&p);
        table.push(vec![
            p.to_string().into(),
            batch.len().into(),
            rho.into(),
            pv.into(),
            a.into(),
            s.dref_mean.into(),
            s.leff_mean.into(),
        ]);
        out.set(format!("rho/{name}"), rho.unwrap_or(f64::NAN));
        out.set(format!("auc/{name}"), a.unwrap_or(f64::NAN));
        out.set(format!("dref_mean/{name}"), s.dref_mean);
        batches.push((name, batch));
    }
    let views: Vec<(String, &[SampleMetrics])> = batches.iter().map(|(n, b)| (n.clone(), b.as_slice())).collect();
    out.tables.push(table);
    out.tables.push(samples_table("samples", &views));
    out.notes.push("high Δ_refine = above the policy's 75th percentile; ρ is reported, not gated".into());
    Ok(out)
}

pub fn leff_trace(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let mut out = PresetOutput::default();
    let mut table = Table::new(
        "leff_trace",
        &["policy", "step", "t", "p25", "p50", "p75", "cum_p25", "cum_p50", "cum_p75", "cum_iqr"],
    );
    let lab = ctx.lab;
    let cfg = SamplerConfig::heun(ctx.steps).recording(true, false);
    for p in ctx.policies()? {
        let records = par_map(ctx.n_jacobian, |i| {
            let traj = lab.trajectory(&p, i, &cfg)?;
            Ok(empirical_leff(&lab.system, &p, &traj, JacobianMode::FullField, lab.cfg.jacobian_stride, &ctx.power)?)
        })?;
        let Some(first) = records.first() else { continue };
        let mut running = vec![0.0; records.len()];
        let mut final_iqr = f64::NAN;
        for (j, step) in first.per_step.iter().enumerate() {
            let norms: Vec<f64> = records.iter().map(|r| r.per_step[j].norm).collect();
            running.iter_mut().zip(&norms).for_each(|(r, n)| *r = f64::max(*r, *n));
            let s = SummaryStats::of(&norms).expect("non-empty");
            let c = SummaryStats::of(&running).expect("non-empty");
            final_iqr = c.p75 - c.p25;
            table.push(vec![
                label(&p).into(),
                step.n.into(),
                step.t.into(),
                s.p25.into(),
                s.p50.into(),
                s.p75.into(),
                c.p25.into(),
                c.p50.into(),
                c.p75.into(),
                final_iqr.into(),
            ]);
        }
        out.set(format!("final_cum_iqr/{}", label(&p)), final_iqr);
    }
    out.tables.push(table);
    out.notes.push("cumulative columns track the running maximum of the per-step norm".into());
    Ok(out)
}

fn sweep_row(table: &mut Table, key: f64, batch: &[SampleMetrics]) -> super::BatchSummary {
    let s = summarize(batch);
    table.push(vec![
        key.into(),
        s.entropy.into(),
        s.active.into(),
        s.nll.into(),
        s.leff_mean.into(),
        s.leff_std.into(),
        s.dref_mean.into(),
        s.dref_std.into(),
    ]);
    s
}

const SWEEP_COLUMNS: [&str; 7] = ["entropy", "active_experts", "nll", "leff_mean", "leff_std", "dref_mean", "dref_std"];

pub fn temp_sweep(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("temp-sweep", 100);
    let mut out = PresetOutput::default();
    let mut header = vec!["temperature"];
    header.extend(SWEEP_COLUMNS);
    let mut table = Table::new("temp_sweep", &header);
    for t in TEMPERATURES {
        let p = RoutingPolicy::full().with_temperature(t);
        let batch = measure_batch(ctx, &p, n, n, ctx.steps, None)?;
        let s = sweep_row(&mut table, t, &batch);
        out.set(format!("entropy/T{t}"), s.entropy);
        out.set(format!("dref_mean/T{t}"), s.dref_mean);
        out.set(format!("leff_mean/T{t}"), s.leff_mean);
    }
    out.tables.push(table);
    out.notes.push(format!("full ensemble with softmax(z/T), {n} samples per temperature"));
    Ok(out)
}

pub fn topp_sweep(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("topp-sweep", 50);
    let mut out = PresetOutput::default();
    let mut header = vec!["p"];
    header.extend(SWEEP_COLUMNS);
    let mut table = Table::new("topp_sweep", &header);
    for pv in TOP_P {
        let batch = measure_batch(ctx, &RoutingPolicy::top_p(pv), n, n, ctx.steps, None)?;
        let s = sweep_row(&mut table, pv, &batch);
        out.set(format!("active/p{pv}"), s.active);
        out.set(format!("dref_mean/p{pv}"), s.dref_mean);
        out.set(format!("leff_mean/p{pv}"), s.leff_mean);
    }
    out.tables.push(table);
    out.notes.push(format!("top-p truncation of the full ensemble, {n} samples per p"));
    Ok(out)
}

pub fn counterfactual(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("counterfactual", 50);
    let mut out = PresetOutput::default();
    let mut table = Table::new("counterfactual", &["condition", "policy", "dref_mean", "dref_std", "nll"]);
    let conditions = [
        ("Top-2 (base)", RoutingPolicy::top_k(2)),
        ("Full ensemble", RoutingPolicy::full()),
        ("Full + weight clip", RoutingPolicy::weight_clip()),
        ("Misaligned Top-2", crate::policy::parse_policy("misaligned2")?),
    ];
    for (cond, p) in conditions {
        let batch = measure_batch(ctx, &p, n, 0, ctx.steps, None)?;
        let s = summarize(&batch);
        table.push(vec![cond.into(), label(&p).into(), s.dref_mean.into(), s.dref_std.into(), s.nll.into()]);
        out.set(format!("dref_mean/{}", label(&p)), s.dref_mean);
        out.set(format!("nll/{}", label(&p)), s.nll);
    }
    out.tables.push(table);
    out.notes.push(format!("{n} samples per condition; no Jacobian metrics"));
    Ok(out)
}

pub fn failure_modes(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("failure-modes", 100);
    let mut out = PresetOutput::default();
    let policies = [RoutingPolicy::top_k(1), RoutingPolicy::top_k(2), RoutingPolicy::top_k(4), RoutingPolicy::full()];
    let mut batches = Vec::new();
    for p in policies {
        batches.push((p, measure_batch(ctx, &p, n, n, ctx.steps, None)?));
    }
    let top2 = &batches[1].1;
    let (l2, d2) = leffs_and_drefs(top2);
    let schemes = [
        ("percentile", FailureThresholds::from_top2_runs(ctx.lab.cfg.k, &d2, &l2)),
        ("paper8", FailureThresholds::paper8()),
    ];
    let mut table = Table::new(
        "failure_modes",
        &[
            "policy",
            "thresholds",
            "leff_mean",
            "leff_std",
            "dref_mean",
            "dref_std",
            "routing_uncertain",
            "poor_convergence",
            "high_leff",
        ],
    );
    for (scheme, th) in schemes {
        for (p, batch) in &batches {
            let flags: Vec<_> = batch
                .iter()
                .map(|s| failure_classify(s.leff.unwrap_or(0.0), s.delta_refine, s.max_entropy, &th))
                .collect();
            let frac = |f: fn(&ddm_core::diagnostics::FailureFlags) -> bool| {
                flags.iter().filter(|x| f(x)).count() as f64 / flags.len().max(1) as f64
            };
            let s = summarize(batch);
            let (ru, pc, hl) = (frac(|f| f.routing_uncertain), frac(|f| f.poor_convergence), frac(|f| f.high_leff));
            table.push(vec![
                label(p).into(),
                scheme.into(),
                s.leff_mean.into(),
                s.leff_std.into(),
                s.dref_mean.into(),
                s.dref_std.into(),
                ru.into(),
                pc.into(),
                hl.into(),
            ]);
            out.set(format!("poor_convergence/{scheme}/{}", label(p)), pc);
            out.set(format!("routing_uncertain/{scheme}/{}", label(p)), ru);
        }
        out.notes.push(format!(
            "{scheme} thresholds: entropy > {:.4} nats, Δ_refine > {:.6}, L̂_eff > {:.4}",
            th.entropy_nats, th.delta_refine, th.leff
        ));
    }
    out.tables.push(table);
    Ok(out)
}

struct SwitchSample {
    record: SwitchingRecord,
    delta_refine: f64,
    leff: f64,
}

fn switch_samples(ctx: &Ctx, policy: &RoutingPolicy, n: usize) -> anyhow::Result<Vec<SwitchSample>> {
    let lab = ctx.lab;
    let cfg = SamplerConfig::heun(ctx.steps).recording(true, true);
    par_map(n, |i| {
        let traj = lab.trajectory(policy, i, &cfg)?;
        let fine = lab.trajectory(policy, i, &SamplerConfig::heun(2 * ctx.steps))?;
        let leff = empirical_leff(&lab.system, policy, &traj, JacobianMode::FullField, lab.cfg.jacobian_stride, &ctx.power)?;
        Ok(SwitchSample {
            record: switching_metrics(&traj)?,
            delta_refine: ddm_core::diagnostics::delta_refine(traj.endpoint(), fine.endpoint())?,
            leff: leff.leff,
        })
    })
}

pub fn switching(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let mut out = PresetOutput::default();
    let top1 = switch_samples(ctx, &RoutingPolicy::top_k(1), ctx.n_jacobian)?;
    let drefs: Vec<f64> = top1.iter().map(|s| s.delta_refine).collect();
    let unstable = unstable_labels(&drefs);
    // every score is oriented so that larger means more at risk
    let min_mp: Vec<f64> = top1
        .iter()
        .map(|s| -s.record.per_step.iter().map(|x| x.m_p).fold(f64::INFINITY, f64::min))
        .collect();
    let max_g: Vec<f64> = top1.iter().map(|s| s.record.per_step.iter().map(|x| x.g).fold(0.0, f64::max)).collect();
    let s_eff: Vec<f64> = top1.iter().map(|s| s.record.s_eff).collect();
    let s_int: Vec<f64> = top1.iter().map(|s| s.record.s_int).collect();
    let leff: Vec<f64> = top1.iter().map(|s| s.leff).collect();
    let combined: Vec<f64> = average_ranks(&leff).iter().zip(average_ranks(&s_eff)).map(|(a, b)| a + b).collect();
    let mut predictors = Table::new("predictors", &["predictor", "auc_high_dref", "spearman_rho"]);
    for (name, key, score) in [
        ("m_p only", "m_p", &min_mp),
        ("g only", "g", &max_g),
        ("S_eff (margin+gap)", "s_eff", &s_eff),
        ("S_int", "s_int", &s_int),
        ("L_eff only", "leff", &leff),
        ("L_eff + S_eff", "leff_s_eff", &combined),
    ] {
        let a = auc(score, &unstable)?;
        let r = spearman(score, &drefs)?.rho;
        predictors.push(vec![name.into(), a.into(), r.into()]);
        out.set(format!("auc/{key}"), a.unwrap_or(f64::NAN));
        out.set(format!("rho/{key}"), r.unwrap_or(f64::NAN));
    }
    out.tables.push(predictors);

    let mut margins = Table::new("margins", &["policy", "group", "n", "median_m_p_mean", "median_m_p_std", "low_margin_steps"]);
    let top2 = switch_samples(ctx, &RoutingPolicy::top_k(2), ctx.n_jacobian)?;
    for (p, samples) in [(RoutingPolicy::top_k(1), &top1), (RoutingPolicy::top_k(2), &top2)] {
        let d: Vec<f64> = samples.iter().map(|s| s.delta_refine).collect();
        let flags = unstable_labels(&d);
        for (group, want) in [("stable", false), ("unstable", true)] {
            let chosen: Vec<&SwitchSample> = samples.iter().zip(&flags).filter(|(_, f)| **f == want).map(|(s, _)| s).collect();
            let medians: Vec<f64> = chosen
                .iter()
                .map(|s| percentile(&s.record.per_step.iter().map(|x| x.m_p).collect::<Vec<_>>(), 50.0))
                .collect();
            let steps: usize = chosen.iter().map(|s| s.record.per_step.len()).sum();
            let low: usize = chosen.iter().map(|s| s.record.per_step.iter().filter(|x| x.m_p < LOW_MARGIN).count()).sum();
            let low_frac = low as f64 / steps.max(1) as f64;
            let (m, sd) = if medians.is_empty() { (f64::NAN, f64::NAN) } else { (mean(&medians), std_dev(&medians)) };
            margins.push(vec![label(&p).into(), group.into(), chosen.len().into(), m.into(), sd.into(), low_frac.into()]);
            out.set(format!("median_m_p/{}/{group}", label(&p)), m);
            out.set(format!("low_margin_steps/{}/{group}", label(&p)), low_frac);
        }
    }
    out.tables.push(margins);
    out.notes.push(format!(
        "{} samples per policy; unstable = Δ_refine above the 75th percentile; m_p scored as its negated trajectory minimum, g as its maximum",
        ctx.n_jacobian
    ));
    Ok(out)
}

/// Seeded displacement of length `0.5 · separation`.
pub fn generalization_shift(ctx: &Ctx) -> Vec<f64> {
    let cfg = &ctx.lab.cfg;
    let mut u = SplitMix64::new(cfg.seed("shift", 0)).normal_vec(cfg.d);
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x *= 0.5 * cfg.separation / norm);
    u
}

pub fn generalization(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("generalization", 100);
    let shift = generalization_shift(ctx);
    let mut out = PresetOutput::default();
    let mut table = Table::new(
        "generalization",
        &["policy", "regime", "distribution", "leff_mean", "leff_std", "dref_mean", "dref_std", "spearman", "auc", "nll"],
    );
    let regimes = [("baseline", ctx.steps), ("stressed", (ctx.steps / 2).max(1))];
    for (regime, steps) in regimes {
        for (dist, s) in [("in-distribution", None), ("shifted", Some(shift.as_slice()))] {
            for p in ctx.policies()? {
                let batch = measure_batch(ctx, &p, n, n, steps, s)?;
                let sum = summarize(&batch);
                let (rho, _, a) = predictiveness(&batch)?;
                table.push(vec![
                    label(&p).into(),
                    regime.into(),
                    dist.into(),
                    sum.leff_mean.into(),
                    sum.leff_std.into(),
                    sum.dref_mean.into(),
                    sum.dref_std.into(),
                    rho.into(),
                    a.into(),
                    sum.nll.into(),
                ]);
                out.set(format!("dref_mean/{regime}/{dist}/{}", label(&p)), sum.dref_mean);
                out.set(format!("nll/{regime}/{dist}/{}", label(&p)), sum.nll);
            }
        }
    }
    out.tables.push(table);
    out.notes.push(format!(
        "shifted: initial noise and every ground-truth centre displaced by a fixed vector of length {}; stressed regime uses Heun-{}",
        0.5 * ctx.lab.cfg.separation,
        regimes[1].1
    ));
    Ok(out)
}
