//! Numerical presets: local error, Jacobian decomposition, convergence and
//! proxy consistency.

use ddm_core::diagnostics::{
    convergence_probe, heun_endpoint, jacobian_decomposition, leff_consistency as consistency, local_error_scaling,
    DominantTerm, JacobianMode,
};
use ddm_core::flowexperts::{Expert, ExpertEnsemble};
use ddm_core::numcore::{DenseNet, Mat};
use ddm_core::rng::SplitMix64;
use ddm_core::router::{Router, RoutingPolicy};
use ddm_core::sampler::{FnField, RoutedField, SamplerConfig};
use ddm_core::stats::{mean, std_dev};
use ddm_core::system::DdmSystem;

use super::{label, Ctx, PresetOutput, Table};
use crate::pipeline::par_map;

/// Coarse step of the local-error probe; the fine step is half of it.
const LOCAL_H: f64 = 0.01;
/// Random trajectory points per sample; the sample reports their maximum.
const LOCAL_POINTS: usize = 5;
const CONVERGENCE_STEPS: [usize; 3] = [25, 50, 100];
const CONVERGENCE_EPS: f64 = 0.01;
const CONSISTENCY_STEPS: [usize; 3] = [25, 50, 100];
const DECOMPOSITION_TIMES: [f64; 5] = [0.9, 0.7, 0.5, 0.3, 0.1];

pub fn local_error(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("local-error", ctx.n_samples);
    let lab = ctx.lab;
    let steps = ctx.steps;
    let mut out = PresetOutput::default();
    let mut table = Table::new(
        "local_error",
        &["policy", "eps_h", "eps_h_std", "eps_half_h", "eps_half_h_std", "scaling"],
    );
    let mut means = Vec::new();
    for p in ctx.policies()? {
        let pairs = par_map(n, |i| {
            let traj = lab.trajectory(&p, i, &SamplerConfig::heun(steps))?;
            let mut rng = SplitMix64::new(lab.cfg.seed("local-error", i as u64));
            let mut field = RoutedField::new(&lab.system, p, i as u64);
            let (mut coarse, mut fine) = (0.0f64, 0.0f64);
            for _ in 0..LOCAL_POINTS {
                // every state with t_n >= h
                let n = rng.below(steps);
                let (c, f) = local_error_scaling(&mut field, traj.state(n), traj.times[n], LOCAL_H)?;
                coarse = coarse.max(c.eps_local);
                fine = fine.max(f.eps_local);
            }
            Ok((coarse, fine))
        })?;
        let (c, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let scaling = mean(&c) / mean(&f);
        table.push(vec![
            label(&p).into(),
            mean(&c).into(),
            std_dev(&c).into(),
            mean(&f).into(),
            std_dev(&f).into(),
            scaling.into(),
        ]);
        out.set(format!("eps_h/{}", label(&p)), mean(&c));
        out.set(format!("scaling/{}", label(&p)), scaling);
        means.push(mean(&c));
    }
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    out.set("relative_spread", (hi - lo) / mean(&means));
    out.tables.push(table);
    out.notes.push(format!(
        "{n} samples per policy; each reports the max over {LOCAL_POINTS} random states of its own trajectory; h = {LOCAL_H} and {}",
        LOCAL_H / 2.0
    ));
    Ok(out)
}

pub fn decomposition(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("decomposition", 100);
    let lab = ctx.lab;
    let mut out = PresetOutput::default();
    let mut table = Table::new(
        "decomposition",
        &["policy", "t", "expert_mean", "expert_std", "router_mean", "router_std", "router_dominant_fraction", "dominant"],
    );
    let cfg = SamplerConfig::heun(ctx.steps).recording(true, false);
    for p in [RoutingPolicy::top_k(2), RoutingPolicy::full()] {
        let per_sample = par_map(n, |i| {
            let traj = lab.trajectory(&p, i, &cfg)?;
            DECOMPOSITION_TIMES
                .iter()
                .map(|&t| {
                    let s = traj.nearest_step(t);
                    let power = ctx.power.with_seed(lab.cfg.seed("decomposition", i as u64));
                    Ok(jacobian_decomposition(&lab.system, &p, &traj.decisions[s], traj.state(s), traj.times[s], &power)?)
                })
                .collect::<anyhow::Result<Vec<_>>>()
        })?;
        for (j, &t) in DECOMPOSITION_TIMES.iter().enumerate() {
            let e: Vec<f64> = per_sample.iter().map(|r| r[j].expert_term_norm).collect();
            let r: Vec<f64> = per_sample.iter().map(|r| r[j].router_term_norm).collect();
            let frac = per_sample.iter().filter(|r| r[j].dominant == DominantTerm::Router).count() as f64 / n as f64;
            let dominant = if frac > 0.5 { "router" } else { "expert" };
            table.push(vec![
                label(&p).into(),
                t.into(),
                mean(&e).into(),
                std_dev(&e).into(),
                mean(&r).into(),
                std_dev(&r).into(),
                frac.into(),
                dominant.into(),
            ]);
            if t == 0.5 {
                out.set(format!("expert_term/{}", label(&p)), mean(&e));
                out.set(format!("router_term/{}", label(&p)), mean(&r));
            }
        }
    }
    out.tables.push(table);
    out.notes.push(format!("{n} trajectories per policy; the t = 0.5 rows are the headline decomposition"));
    Ok(out)
}

pub fn convergence(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("convergence", ctx.n_jacobian);
    let eps = ctx.lab.cfg.override_f64("convergence", "epsilon", CONVERGENCE_EPS);
    let lab = ctx.lab;
    let noise: Vec<Vec<f64>> = (0..n).map(|i| lab.noise(i)).collect();
    let mut out = PresetOutput::default();
    let mut table = Table::new("convergence", &["field", "steps", "h", "exceed_fraction", "mean_error"]);
    let mut push = |out: &mut PresetOutput, field: &str, points: &[ddm_core::diagnostics::ConvergencePoint]| {
        for pt in points {
            table.push(vec![
                field.into(),
                pt.steps.into(),
                pt.h.into(),
                pt.exceed_fraction.into(),
                pt.mean_error.into(),
            ]);
            out.set(format!("exceed/{field}/N{}", pt.steps), pt.exceed_fraction);
        }
        let monotone = points.windows(2).all(|w| w[1].exceed_fraction <= w[0].exceed_fraction);
        out.set(format!("non_increasing/{field}"), f64::from(u8::from(monotone)));
    };
    for p in ctx.policies()? {
        let points = convergence_probe(&noise, eps, &CONVERGENCE_STEPS, |x1, i, steps| {
            heun_endpoint(&mut RoutedField::new(&lab.system, p, i as u64), x1, steps)
        })?;
        push(&mut out, &label(&p), &points);
    }
    // v(x, t) = x: smooth with a closed-form flow, so every N converges
    let points = convergence_probe(&noise, eps, &CONVERGENCE_STEPS, |x1, _, steps| {
        let mut f = FnField {
            dim: x1.len(),
            f: |x: &[f64], _t: f64| x.to_vec(),
        };
        heun_endpoint(&mut f, x1, steps)
    })?;
    push(&mut out, "analytic", &points);
    out.tables.push(table);
    out.notes.push(format!(
        "{n} noise draws; exceedance of ε = {eps} against a Heun reference at {} steps",
        4 * CONVERGENCE_STEPS[CONVERGENCE_STEPS.len() - 1]
    ));
    Ok(out)
}

/// An ensemble whose routed field is affine in `x` for every `t`: linear
/// experts and a router that ignores its input.
pub fn affine_system(k: usize, d: usize, seed: u64) -> anyhow::Result<DdmSystem> {
    let m = 1;
    let mut rng = SplitMix64::new(seed);
    let mut dense = |rows: usize, cols: usize, scale: f64| {
        Mat::from_rows(&(0..rows).map(|_| rng.normal_vec(cols).iter().map(|v| v * scale).collect()).collect::<Vec<_>>())
    };
    let experts = (0..k)
        .map(|c| {
            let w = dense(d, d + 2 * m, 1.0 / (d as f64).sqrt());
            Ok(Expert::new(DenseNet::new(vec![d + 2 * m, d], vec![w], vec![vec![0.0; d]])?, c, m, 0)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let bias = dense(1, k, 1.0).row(0).to_vec();
    let router = Router::new(DenseNet::new(vec![d + 2 * m, k], vec![Mat::zeros(k, d + 2 * m)], vec![bias])?, m)?;
    Ok(DdmSystem::new(ExpertEnsemble::new(experts)?, router)?)
}

pub fn leff_consistency(ctx: &Ctx) -> anyhow::Result<PresetOutput> {
    let n = ctx.samples("leff-consistency", 50.min(ctx.n_jacobian));
    let lab = ctx.lab;
    let mut out = PresetOutput::default();
    let mut table = Table::new("leff_consistency", &["field", "refinement", "h", "leff_mean", "gap_mean", "gap_std"]);
    let synthetic = affine_system(lab.cfg.k, lab.cfg.d, lab.cfg.seed("affine", 0))?;
    let mut fields: Vec<(String, &DdmSystem, RoutingPolicy)> = Vec::new();
    for p in ctx.policies()? {
        fields.push((label(&p), &lab.system, p));
    }
    fields.push(("constant-jacobian".into(), &synthetic, RoutingPolicy::full()));
    for (name, system, p) in fields {
        let recs = par_map(n, |i| {
            Ok(consistency(
                system,
                &p,
                &lab.noise(i),
                &CONSISTENCY_STEPS,
                JacobianMode::FullField,
                lab.cfg.jacobian_stride,
                &ctx.power,
                i as u64,
            )?)
        })?;
        let mut gaps_mean = Vec::new();
        for j in 0..CONSISTENCY_STEPS.len() {
            let leffs: Vec<f64> = recs.iter().map(|r| r.points[j].1).collect();
            let (gm, gs) = if j == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let g: Vec<f64> = recs.iter().map(|r| r.gaps[j - 1]).collect();
                (mean(&g), std_dev(&g))
            };
            if j > 0 {
                gaps_mean.push(gm);
                out.set(format!("gap/{name}/N{}", CONSISTENCY_STEPS[j]), gm);
            }
            table.push(vec![
                name.as_str().into(),
                format!("N{}", CONSISTENCY_STEPS[j]).into(),
                (1.0 / CONSISTENCY_STEPS[j] as f64).into(),
                mean(&leffs).into(),
                gm.into(),
                gs.into(),
            ]);
        }
        let monotone = gaps_mean.windows(2).all(|w| w[1] <= w[0]);
        out.set(format!("non_increasing/{name}"), f64::from(u8::from(monotone)));
    }
    out.tables.push(table);
    out.notes.push(format!(
        "{n} noise draws; gap = |L̂(h) - L̂(h/2)| between successive step counts {CONSISTENCY_STEPS:?}"
    ));
    Ok(out)
}
