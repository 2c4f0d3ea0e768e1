//! Experiment presets. Each preset computes a set of tables and scalar
//! metrics from a trained [`Lab`]; writing happens afterwards on one thread.

mod alignment;
mod numerics;
mod sensitivity;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::bail;
use ddm_core::diagnostics::{delta_refine, empirical_leff, JacobianMode};
use ddm_core::numcore::PowerIterConfig;
use ddm_core::router::RoutingPolicy;
use ddm_core::sampler::SamplerConfig;
use ddm_core::stats::{mean, std_dev};
use serde::{Deserialize, Serialize};

use crate::pipeline::{par_map, Lab};
use crate::policy::{parse_policy, policy_name};

pub use alignment::{cluster_rank, disagreement, expert_quality, strong_specialization};
pub use numerics::{convergence, decomposition, leff_consistency, local_error};
pub use sensitivity::{
    counterfactual, dissociation, failure_modes, generalization, leff_trace, refinement, switching, temp_sweep, topp_sweep,
};

type PresetFn = fn(&Ctx) -> anyhow::Result<PresetOutput>;

/// Preset names in the order `experiment all` runs them.
pub const PRESETS: &[(&str, PresetFn)] = &[
    ("dissociation", dissociation),
    ("cluster-rank", cluster_rank),
    ("expert-quality", expert_quality),
    ("disagreement", disagreement),
    ("local-error", local_error),
    ("leff-trace", leff_trace),
    ("refinement", refinement),
    ("decomposition", decomposition),
    ("temp-sweep", temp_sweep),
    ("topp-sweep", topp_sweep),
    ("counterfactual", counterfactual),
    ("failure-modes", failure_modes),
    ("switching", switching),
    ("generalization", generalization),
    ("strong-specialization", strong_specialization),
    ("convergence", convergence),
    ("leff-consistency", leff_consistency),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn run_preset(name: &str, lab: &Lab) -> anyhow::Result<PresetOutput> {
    let Some((_, f)) = PRESETS.iter().find(|(n, _)| *n == name) else {
        bail!("unknown preset `{name}`; valid presets: {}", preset_names().join(", "));
    };
    let mut out = f(&Ctx::new(lab))?;
    out.name = name.to_string();
    Ok(out)
}

/// One CSV cell; numbers keep their shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell(pub String);

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell(if v.is_finite() { format!("{v}") } else { String::new() })
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell(String::new()), Cell::from)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell(v)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width in table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.0.as_str()))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Column `name` parsed as numbers; empty cells become `None`.
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j].0.parse().ok()).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub preset: String,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct PresetOutput {
    pub name: String,
    pub tables: Vec<Table>,
    /// Headline scalars, keyed `metric/qualifier`.
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl PresetOutput {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn set(&mut self, key: impl Into<String>, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    /// Write `<table>.csv` files and `metrics.json`; returns the paths written.
    pub fn write(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for t in &self.tables {
            let p = dir.join(format!("{}.csv", t.name));
            std::fs::write(&p, t.to_csv()?)?;
            written.push(p);
        }
        let m = MetricsFile {
            preset: self.name.clone(),
            metrics: self.metrics.iter().filter(|(_, v)| v.is_finite()).map(|(k, v)| (k.clone(), *v)).collect(),
            notes: self.notes.clone(),
        };
        let p = dir.join("metrics.json");
        std::fs::write(&p, serde_json::to_string_pretty(&m)?)?;
        written.push(p);
        Ok(written)
    }
}

/// What a preset sees: the trained lab plus resolved sample counts.
pub struct Ctx<'a> {
    pub lab: &'a Lab,
    pub n_samples: usize,
    pub n_jacobian: usize,
    pub steps: usize,
    pub power: PowerIterConfig,
}

impl<'a> Ctx<'a> {
    pub fn new(lab: &'a Lab) -> Self {
        Self {
            lab,
            n_samples: lab.cfg.n_samples,
            n_jacobian: lab.cfg.n_jacobian_samples.min(lab.cfg.n_samples),
            steps: lab.cfg.sampler.steps,
            power: PowerIterConfig::default().with_seed(lab.cfg.seed("power", 0)),
        }
    }

    /// Sample count for `preset`, honouring a `samples` override.
    fn samples(&self, preset: &str, default: usize) -> usize {
        self.lab.cfg.override_usize(preset, "samples", default).max(1)
    }

    fn policies(&self) -> anyhow::Result<Vec<RoutingPolicy>> {
        self.lab.cfg.policies.iter().map(|p| parse_policy(p)).collect()
    }
}

/// Per-sample measurements shared by the routing-comparison presets.
#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub index: usize,
    pub endpoint: Vec<f64>,
    pub delta_refine: f64,
    pub nll: f64,
    pub leff: Option<f64>,
    pub max_entropy: f64,
    pub mean_entropy: f64,
    pub mean_active: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MeasureOpts<'s> {
    pub steps: usize,
    pub leff_mode: Option<JacobianMode>,
    /// Added to the initial noise and to every ground-truth centre.
    pub shift: Option<&'s [f64]>,
}

pub fn measure(ctx: &Ctx, policy: &RoutingPolicy, index: usize, opts: MeasureOpts) -> anyhow::Result<SampleMetrics> {
    let lab = ctx.lab;
    let mut x1 = lab.noise(index);
    if let Some(s) = opts.shift {
        x1.iter_mut().zip(s).for_each(|(x, d)| *x += d);
    }
    let seed = index as u64;
    let coarse = ddm_core::sampler::sample_trajectory(
        &lab.system,
        policy,
        &x1,
        &SamplerConfig::heun(opts.steps).recording(true, false),
        seed,
    )?;
    let fine = ddm_core::sampler::sample_trajectory(&lab.system, policy, &x1, &SamplerConfig::heun(2 * opts.steps), seed)?;
    let leff = match opts.leff_mode {
        Some(mode) => Some(empirical_leff(&lab.system, policy, &coarse, mode, lab.cfg.jacobian_stride, &ctx.power)?.leff),
        None => None,
    };
    // the t = 0 observation does not move the sample
    let decs = &coarse.decisions[..coarse.decisions.len() - 1];
    let entropies: Vec<f64> = decs.iter().map(|d| d.entropy_nats).collect();
    let active: Vec<f64> = decs.iter().map(|d| d.selected.len() as f64).collect();
    Ok(SampleMetrics {
        index,
        endpoint: coarse.endpoint().to_vec(),
        delta_refine: delta_refine(coarse.endpoint(), fine.endpoint())?,
        nll: lab.truth(opts.shift).nll(coarse.endpoint()),
        leff,
        max_entropy: entropies.iter().copied().fold(0.0, f64::max),
        mean_entropy: mean(&entropies),
        mean_active: mean(&active),
    })
}

/// [`measure`] over `n` samples; L̂_eff only on the first `n_leff`.
pub fn measure_batch(
    ctx: &Ctx,
    policy: &RoutingPolicy,
    n: usize,
    n_leff: usize,
    steps: usize,
    shift: Option<&[f64]>,
) -> anyhow::Result<Vec<SampleMetrics>> {
    par_map(n, |i| {
        let opts = MeasureOpts {
            steps,
            leff_mode: (i < n_leff).then_some(JacobianMode::FullField),
            shift,
        };
        measure(ctx, policy, i, opts)
    })
}

/// Aggregates of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSummary {
    pub nll: f64,
    pub leff_mean: f64,
    pub leff_std: f64,
    pub dref_mean: f64,
    pub dref_std: f64,
    pub entropy: f64,
    pub active: f64,
}

pub fn summarize(batch: &[SampleMetrics]) -> BatchSummary {
    let col = |f: fn(&SampleMetrics) -> f64| batch.iter().map(f).collect::<Vec<_>>();
    let leffs: Vec<f64> = batch.iter().filter_map(|s| s.leff).collect();
    let dref = col(|s| s.delta_refine);
    BatchSummary {
        nll: mean(&col(|s| s.nll)),
        leff_mean: if leffs.is_empty() { f64::NAN } else { mean(&leffs) },
        leff_std: if leffs.is_empty() { f64::NAN } else { std_dev(&leffs) },
        dref_mean: mean(&dref),
        dref_std: std_dev(&dref),
        entropy: mean(&col(|s| s.mean_entropy)),
        active: mean(&col(|s| s.mean_active)),
    }
}

/// Per-sample CSV shared by several presets.
fn samples_table(name: &str, batches: &[(String, &[SampleMetrics])]) -> Table {
    let mut t = Table::new(name, &["policy", "index", "delta_refine", "nll", "leff", "max_entropy", "mean_active"]);
    for (label, batch) in batches {
        for s in batch.iter() {
            t.push(vec![
                label.as_str().into(),
                s.index.into(),
                s.delta_refine.into(),
                s.nll.into(),
                s.leff.into(),
                s.max_entropy.into(),
                s.mean_active.into(),
            ]);
        }
    }
    t
}

fn label(p: &RoutingPolicy) -> String {
    policy_name(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_round_trip_numbers() {
        let x = 0.1 + 0.2;
        assert_eq!(Cell::from(x).0.parse::<f64>().unwrap(), x);
        assert_eq!(Cell::from(f64::NAN).0, "");
        assert_eq!(Cell::from(None::<f64>).0, "");
    }

    #[test]
    fn table_csv_and_columns() {
        let mut t = Table::new("t", &["policy", "v"]);
        t.push(vec!["a,b".into(), 1.5.into()]);
        t.push(vec!["c".into(), None::<f64>.into()]);
        assert_eq!(t.to_csv().unwrap(), "policy,v\n\"a,b\",1.5\nc,\n");
        assert_eq!(t.column("v").unwrap(), vec![Some(1.5), None]);
        assert!(t.column("w").is_none());
    }

    #[test]
    fn registry_has_unique_names() {
        let mut names = preset_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 17);
    }
}
