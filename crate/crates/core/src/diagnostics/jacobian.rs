//! Jacobian of the routed field on a frozen routing branch.
//!
//! With the selected set `S` fixed, the weights are a softmax over `S` of the
//! tempered logits, `w_k = softmax_S(z / T)_k`, so
//!
//! ```text
//! ∇ₓv = Σ_k w_k ∇ₓv_k  +  Σ_k v_k ∇ₓw_k,    ∇ₓw_k·u = w_k (ż_k - Σ_j w_j ż_j) / T
//! ```
//!
//! with `ż = J_z·u`. The second (router) term can be recentred as
//! `Σ_k (v_k - v̄) ∇ₓw_k` because `Σ_k ∇ₓw_k = 0`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flowexperts::net_input;
use crate::numcore::{axpy, dot, spectral_norm, LinearMap, PowerIterConfig, SpectralEstimate, Trace};
use crate::router::softmax;
use crate::system::DdmSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianMode {
    /// Experts and router weights both differentiated.
    FullField,
    /// `Σ_k w_k ∇ₓv_k` with weights held constant.
    ExpertTermOnly,
    /// `Σ_k v_k ∇ₓw_k`.
    RouterTermOnly,
}

pub struct RoutedJacobian<'a> {
    system: &'a DdmSystem,
    d: usize,
    selected: Vec<usize>,
    /// Weights over `selected`, same order.
    weights: Vec<f64>,
    velocities: Vec<Vec<f64>>,
    expert_traces: Vec<Trace>,
    router_trace: Trace,
    temperature: f64,
    /// Uniform fallback weights do not depend on `x`.
    weights_constant: bool,
    mode: JacobianMode,
    recentred: bool,
}

impl<'a> RoutedJacobian<'a> {
    pub fn new(
        system: &'a DdmSystem,
        x: &[f64],
        t: f64,
        selected: &[usize],
        temperature: f64,
        mode: JacobianMode,
    ) -> Result<Self> {
        let m = system.ensemble.m();
        let input = net_input(x, t, m);
        let router_trace = system.router.net.forward_trace(&input)?;
        let z: Vec<f64> = selected
            .iter()
            .map(|&k| router_trace.output()[k] / temperature)
            .collect();
        let probs = softmax(&router_trace.output().iter().map(|v| v / temperature).collect::<Vec<_>>());
        let mass: f64 = selected.iter().map(|&k| probs[k]).sum();
        let weights_constant = mass < 1e-12;
        let weights = if weights_constant {
            vec![1.0 / selected.len() as f64; selected.len()]
        } else {
            softmax(&z)
        };
        let mut expert_traces = Vec::with_capacity(selected.len());
        let mut velocities = Vec::with_capacity(selected.len());
        for &k in selected {
            let tr = system.ensemble.expert(k).net.forward_trace(&input)?;
            velocities.push(tr.output().to_vec());
            expert_traces.push(tr);
        }
        Ok(Self {
            system,
            d: x.len(),
            selected: selected.to_vec(),
            weights,
            velocities,
            expert_traces,
            router_trace,
            temperature,
            weights_constant,
            mode,
            recentred: false,
        })
    }

    pub fn with_mode(mut self, mode: JacobianMode) -> Self {
        self.mode = mode;
        self
    }

    /// Evaluate the router term in its recentred form.
    pub fn recentred(mut self, on: bool) -> Self {
        self.recentred = on;
        self
    }

    /// Routed velocity at the linearisation point.
    pub fn velocity(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        for (w, vk) in self.weights.iter().zip(&self.velocities) {
            axpy(*w, vk, &mut v);
        }
        v
    }

    fn pad(&self, u: &[f64], input_dim: usize) -> Vec<f64> {
        let mut tan = vec![0.0; input_dim];
        tan[..self.d].copy_from_slice(u);
        tan
    }

    fn expert_term(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for ((&k, tr), w) in self.selected.iter().zip(&self.expert_traces).zip(&self.weights) {
            let net = &self.system.ensemble.expert(k).net;
            let ju = net.jvp_traced(tr, &self.pad(u, net.input_dim())).expect("shapes fixed at construction");
            axpy(*w, &ju, &mut out);
        }
        out
    }

    /// `∇ₓw_k · u` for every selected expert.
    fn weight_tangents(&self, u: &[f64]) -> Vec<f64> {
        if self.weights_constant {
            return vec![0.0; self.selected.len()];
        }
        let net = &self.system.router.net;
        let dz = net
            .jvp_traced(&self.router_trace, &self.pad(u, net.input_dim()))
            .expect("shapes fixed at construction");
        let dz_s: Vec<f64> = self.selected.iter().map(|&k| dz[k]).collect();
        let mean = dot(&self.weights, &dz_s);
        self.weights
            .iter()
            .zip(&dz_s)
            .map(|(w, dzk)| w * (dzk - mean) / self.temperature)
            .collect()
    }

    fn router_term(&self, u: &[f64]) -> Vec<f64> {
        let dw = self.weight_tangents(u);
        let vbar = if self.recentred { self.velocity() } else { vec![0.0; self.d] };
        let mut out = vec![0.0; self.d];
        for (dwk, vk) in dw.iter().zip(&self.velocities) {
            for j in 0..self.d {
                out[j] += dwk * (vk[j] - vbar[j]);
            }
        }
        out
    }

    fn expert_term_adjoint(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for ((&k, tr), w) in self.selected.iter().zip(&self.expert_traces).zip(&self.weights) {
            let net = &self.system.ensemble.expert(k).net;
            let g = net.backward(tr, c, None).expect("shapes fixed at construction");
            axpy(*w, &g[..self.d], &mut out);
        }
        out
    }

    fn router_term_adjoint(&self, c: &[f64]) -> Vec<f64> {
        if self.weights_constant {
            return vec![0.0; self.d];
        }
        let a: Vec<f64> = self.velocities.iter().map(|vk| dot(vk, c)).collect();
        let abar = dot(&self.weights, &a);
        let net = &self.system.router.net;
        let mut g = vec![0.0; net.output_dim()];
        for ((&k, w), ak) in self.selected.iter().zip(&self.weights).zip(&a) {
            g[k] = w * (ak - abar) / self.temperature;
        }
        let back = net
            .backward(&self.router_trace, &g, None)
            .expect("shapes fixed at construction");
        back[..self.d].to_vec()
    }

    pub fn spectral_norm(&self, cfg: &PowerIterConfig) -> Result<SpectralEstimate> {
        spectral_norm(self, cfg)
    }
}

impl LinearMap for RoutedJacobian<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn apply(&self, u: &[f64]) -> Vec<f64> {
        match self.mode {
            JacobianMode::ExpertTermOnly => self.expert_term(u),
            JacobianMode::RouterTermOnly => self.router_term(u),
            JacobianMode::FullField => {
                let mut e = self.expert_term(u);
                axpy(1.0, &self.router_term(u), &mut e);
                e
            }
        }
    }

    fn apply_adjoint(&self, c: &[f64]) -> Vec<f64> {
        match self.mode {
            JacobianMode::ExpertTermOnly => self.expert_term_adjoint(c),
            JacobianMode::RouterTermOnly => self.router_term_adjoint(c),
            JacobianMode::FullField => {
                let mut e = self.expert_term_adjoint(c);
                axpy(1.0, &self.router_term_adjoint(c), &mut e);
                e
            }
        }
    }
}
