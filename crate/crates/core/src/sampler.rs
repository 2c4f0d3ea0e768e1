//! Euler and Heun integration of the routed probability-flow ODE from
//! `t = 1` (noise) to `t = 0` (data) on the grid `t_n = 1 - n/N`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{norm, Mat};
use crate::rng::{child_seed, CounterStream};
use crate::router::{RoutingDecision, RoutingPolicy, PolicyKind};
use crate::system::DdmSystem;

/// A time-dependent velocity field `v(x, t)`.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Routing decision behind the most recent `eval`, if the field routes.
    fn last_decision(&self) -> Option<&RoutingDecision> {
        None
    }

    /// Every expert's velocity at `(x, t)`, if the field is an ensemble.
    /// Must not disturb any random stream.
    fn all_velocities(&self, _x: &[f64], _t: f64) -> Result<Option<Vec<Vec<f64>>>> {
        Ok(None)
    }
}

/// Closure-backed analytic field.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: FnMut(&[f64], f64) -> Vec<f64>> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(x, t))
    }
}

/// The routed field of a trained system under one policy.
pub struct RoutedField<'a> {
    system: &'a DdmSystem,
    policy: RoutingPolicy,
    stream: CounterStream,
    last: Option<RoutingDecision>,
}

impl<'a> RoutedField<'a> {
    /// `trajectory_seed` keys the random stream of misaligned routing.
    pub fn new(system: &'a DdmSystem, policy: RoutingPolicy, trajectory_seed: u64) -> Self {
        let key = match policy.kind {
            PolicyKind::MisalignedTopK { seed, .. } => child_seed(seed, "misaligned", trajectory_seed),
            _ => trajectory_seed,
        };
        Self {
            system,
            policy,
            stream: CounterStream::new(key),
            last: None,
        }
    }

    pub fn policy(&self) -> &RoutingPolicy {
        &self.policy
    }
}

impl VectorField for RoutedField<'_> {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (v, d) = self
            .system
            .routed_velocity(&self.policy, x, t, Some(&mut self.stream))?;
        self.last = Some(d);
        Ok(v)
    }

    fn last_decision(&self) -> Option<&RoutingDecision> {
        self.last.as_ref()
    }

    fn all_velocities(&self, x: &[f64], t: f64) -> Result<Option<Vec<Vec<f64>>>> {
        self.system.ensemble.velocities(x, t).map(Some)
    }
}

/// Evaluates the inner field at `max(t, floor)`.
struct Floored<'a> {
    inner: &'a mut dyn VectorField,
    floor: f64,
}

impl VectorField for Floored<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.inner.eval(x, t.max(self.floor))
    }

    fn last_decision(&self) -> Option<&RoutingDecision> {
        self.inner.last_decision()
    }

    fn all_velocities(&self, x: &[f64], t: f64) -> Result<Option<Vec<Vec<f64>>>> {
        self.inner.all_velocities(x, t.max(self.floor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Solver {
    Euler,
    #[default]
    Heun,
}

fn checked_eval(field: &mut dyn VectorField, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let v = field.eval(x, t)?;
    if v.iter().all(|c| c.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite { t, x_norm: norm(x) })
    }
}

fn check_step(t: f64, h: f64) -> Result<()> {
    if t - h < -1e-12 || !(h > 0.0) {
        return Err(Error::Domain(format!("step from t = {t} with h = {h} leaves [0, 1]")));
    }
    Ok(())
}

fn advance(field: &mut dyn VectorField, solver: Solver, x: &[f64], t: f64, h: f64, k1: &[f64]) -> Result<Vec<f64>> {
    match solver {
        Solver::Euler => Ok(x.iter().zip(k1).map(|(a, v)| a - h * v).collect()),
        Solver::Heun => {
            let pred: Vec<f64> = x.iter().zip(k1).map(|(a, v)| a - h * v).collect();
            let k2 = checked_eval(field, &pred, t - h)?;
            Ok(x
                .iter()
                .zip(k1.iter().zip(&k2))
                .map(|(a, (v1, v2))| a - 0.5 * h * (v1 + v2))
                .collect())
        }
    }
}

/// `x - h·v(x, t)`.
pub fn euler_step(field: &mut dyn VectorField, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    check_step(t, h)?;
    let k1 = checked_eval(field, x, t)?;
    advance(field, Solver::Euler, x, t, h, &k1)
}

/// `x - (h/2)(k1 + k2)` with `k1 = v(x, t)`, `k2 = v(x - h·k1, t - h)`.
pub fn heun_step(field: &mut dyn VectorField, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    check_step(t, h)?;
    let k1 = checked_eval(field, x, t)?;
    advance(field, Solver::Heun, x, t, h, &k1)
}

pub fn step(field: &mut dyn VectorField, solver: Solver, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    match solver {
        Solver::Euler => euler_step(field, x, t, h),
        Solver::Heun => heun_step(field, x, t, h),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub solver: Solver,
    pub record_all_experts: bool,
    pub record_decisions: bool,
    /// Lower clamp on the time passed to the field (for analytic `1/t` fields).
    pub t_floor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            solver: Solver::Heun,
            record_all_experts: false,
            record_decisions: false,
            t_floor: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn heun(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn euler(steps: usize) -> Self {
        Self {
            steps,
            solver: Solver::Euler,
            ..Self::default()
        }
    }

    pub fn recording(self, decisions: bool, all_experts: bool) -> Self {
        Self {
            record_decisions: decisions,
            record_all_experts: all_experts,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `(N + 1) × d`; row 0 is the initial noise, row N the sample.
    pub states: Mat,
    /// One decision per state when recorded, otherwise empty.
    pub decisions: Vec<RoutingDecision>,
    /// Per state, every expert's velocity (`K` rows of length `d`).
    pub velocities_all: Option<Vec<Vec<Vec<f64>>>>,
    pub solver: Solver,
    pub seed: u64,
    pub h: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.row(self.states.rows - 1)
    }

    pub fn state(&self, n: usize) -> &[f64] {
        self.states.row(n)
    }

    /// Index of the recorded time closest to `t` (earlier index on ties).
    pub fn nearest_step(&self, t: f64) -> usize {
        let mut best = 0;
        for (n, &tn) in self.times.iter().enumerate() {
            if (tn - t).abs() < (self.times[best] - t).abs() {
                best = n;
            }
        }
        best
    }

    /// CSV with header `n,t,x_0..x_{d-1},selected,entropy`; `selected` joins
    /// expert ids with `;` and both routing columns are empty when decisions
    /// were not recorded.
    pub fn to_csv_string(&self) -> String {
        let d = self.states.cols;
        let mut s = String::from("n,t,");
        for j in 0..d {
            let _ = write!(s, "x_{j},");
        }
        s.push_str("selected,entropy\n");
        for n in 0..self.times.len() {
            let _ = write!(s, "{n},{},", self.times[n]);
            for v in self.state(n) {
                let _ = write!(s, "{v},");
            }
            if let Some(dec) = self.decisions.get(n) {
                let sel: Vec<String> = dec.selected.iter().map(|k| k.to_string()).collect();
                let _ = writeln!(s, "{},{}", sel.join(";"), dec.entropy_nats);
            } else {
                s.push_str(",\n");
            }
        }
        s
    }

    pub fn metadata(&self, policy: Option<&RoutingPolicy>) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps(),
            "h": self.h,
            "solver": self.solver,
            "seed": self.seed,
            "dim": self.states.cols,
            "policy": policy.map(|p| p.to_string()),
            "recorded_decisions": !self.decisions.is_empty(),
            "recorded_all_experts": self.velocities_all.is_some(),
        })
    }
}

/// Integrate any field from `x1` at `t = 1` to `t = 0`.
pub fn integrate(field: &mut dyn VectorField, x1: &[f64], cfg: &SamplerConfig, seed: u64) -> Result<Trajectory> {
    if cfg.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    crate::error::check_len("initial noise", field.dim(), x1.len())?;
    let n_steps = cfg.steps;
    let h = 1.0 / n_steps as f64;
    let times: Vec<f64> = (0..=n_steps).map(|n| (n_steps - n) as f64 / n_steps as f64).collect();
    let mut floored;
    let field: &mut dyn VectorField = if cfg.t_floor > 0.0 {
        floored = Floored {
            inner: field,
            floor: cfg.t_floor,
        };
        &mut floored
    } else {
        field
    };

    let d = x1.len();
    let mut states = Mat::zeros(n_steps + 1, d);
    states.row_mut(0).copy_from_slice(x1);
    let mut decisions = Vec::new();
    let mut all = cfg.record_all_experts.then(Vec::new);
    let mut x = x1.to_vec();
    for n in 0..n_steps {
        let t = times[n];
        let wrap = |e: Error| Error::Step {
            step: n,
            source: Box::new(e),
        };
        let k1 = checked_eval(field, &x, t).map_err(wrap)?;
        if cfg.record_decisions {
            if let Some(dec) = field.last_decision() {
                decisions.push(dec.clone());
            }
        }
        if let Some(all) = all.as_mut() {
            if let Some(v) = field.all_velocities(&x, t).map_err(wrap)? {
                all.push(v);
            }
        }
        x = advance(field, cfg.solver, &x, t, h, &k1).map_err(wrap)?;
        states.row_mut(n + 1).copy_from_slice(&x);
    }
    // observation at t = 0; does not influence the sample
    if cfg.record_decisions {
        let wrap = |e: Error| Error::Step {
            step: n_steps,
            source: Box::new(e),
        };
        checked_eval(field, &x, 0.0).map_err(wrap)?;
        if let Some(dec) = field.last_decision() {
            decisions.push(dec.clone());
        }
    }
    if let Some(all) = all.as_mut() {
        if let Some(v) = field.all_velocities(&x, 0.0)? {
            all.push(v);
        }
    }
    let velocities_all = all.filter(|a| a.len() == n_steps + 1);
    Ok(Trajectory {
        times,
        states,
        decisions,
        velocities_all,
        solver: cfg.solver,
        seed,
        h,
    })
}

/// Sample one trajectory of the routed system from noise `x1`.
pub fn sample_trajectory(
    system: &DdmSystem,
    policy: &RoutingPolicy,
    x1: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    let mut field = RoutedField::new(system, *policy, seed);
    integrate(&mut field, x1, cfg, seed)
}

/// Heun endpoints at `N` and `2N` steps from the same noise.
pub fn refinement_pair(
    system: &DdmSystem,
    policy: &RoutingPolicy,
    x1: &[f64],
    steps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let coarse = sample_trajectory(system, policy, x1, &SamplerConfig::heun(steps), seed)?;
    let fine = sample_trajectory(system, policy, x1, &SamplerConfig::heun(2 * steps), seed)?;
    Ok((coarse.endpoint().to_vec(), fine.endpoint().to_vec()))
}

/// Same as [`refinement_pair`] for an arbitrary field factory.
pub fn refinement_pair_with<F>(mut make: impl FnMut() -> F, x1: &[f64], steps: usize) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: VectorField,
{
    let a = integrate(&mut make(), x1, &SamplerConfig::heun(steps), 0)?;
    let b = integrate(&mut make(), x1, &SamplerConfig::heun(2 * steps), 0)?;
    Ok((a.endpoint().to_vec(), b.endpoint().to_vec()))
}
