//! A trained expert ensemble paired with its router.

use crate::error::{check_len, Error, Result};
use crate::flowexperts::{net_input, ExpertEnsemble};
use crate::numcore::{axpy, spectral_norm, FnMap, PowerIterConfig};
use crate::rng::CounterStream;
use crate::router::{decide, Router, RoutingDecision, RoutingPolicy};

/// Power iterations used for the per-expert norms that drive weight clipping.
pub const WEIGHT_CLIP_POWER_ITERS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DdmSystem {
    pub ensemble: ExpertEnsemble,
    pub router: Router,
}

impl DdmSystem {
    pub fn new(ensemble: ExpertEnsemble, router: Router) -> Result<Self> {
        check_len("router experts", ensemble.k(), router.k())?;
        check_len("router dim", ensemble.dim(), router.dim())?;
        if router.m != ensemble.m() {
            return Err(Error::Config("router and experts use different time features".into()));
        }
        Ok(Self { ensemble, router })
    }

    pub fn k(&self) -> usize {
        self.ensemble.k()
    }

    pub fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    /// Spectral norm of `∂v_k/∂x` at `(x, t)`.
    pub fn expert_jacobian_norm(&self, k: usize, x: &[f64], t: f64, cfg: &PowerIterConfig) -> Result<f64> {
        let expert = self.ensemble.expert(k);
        let d = self.dim();
        let trace = expert.net.forward_trace(&net_input(x, t, expert.m))?;
        let input_dim = expert.net.input_dim();
        let map = FnMap {
            dim: d,
            apply: |u: &[f64]| {
                let mut tan = vec![0.0; input_dim];
                tan[..d].copy_from_slice(u);
                expert.net.jvp_traced(&trace, &tan).expect("shape checked")
            },
            apply_adjoint: |w: &[f64]| {
                let g = expert.net.backward(&trace, w, None).expect("shape checked");
                g[..d].to_vec()
            },
        };
        Ok(spectral_norm(&map, cfg)?.estimate)
    }

    pub fn expert_jacobian_norms(&self, x: &[f64], t: f64, cfg: &PowerIterConfig) -> Result<Vec<f64>> {
        (0..self.k())
            .map(|k| self.expert_jacobian_norm(k, x, t, &cfg.with_seed(cfg.seed ^ k as u64)))
            .collect()
    }

    /// Routing decision at `(x, t)`; computes weight-clip norms when needed.
    pub fn decide(
        &self,
        policy: &RoutingPolicy,
        x: &[f64],
        t: f64,
        stream: Option<&mut CounterStream>,
    ) -> Result<RoutingDecision> {
        policy.validate(self.k())?;
        let logits = self.router.logits(x, t)?;
        let aux = if policy.needs_aux() {
            let cfg = PowerIterConfig::quick(WEIGHT_CLIP_POWER_ITERS, 0x00C1_1770);
            Some(self.expert_jacobian_norms(x, t, &cfg)?)
        } else {
            None
        };
        decide(policy, logits, aux.as_deref(), stream)
    }

    /// `v = Σ_k w_k v_k(x, t)`, evaluating only the selected experts.
    pub fn routed_velocity(
        &self,
        policy: &RoutingPolicy,
        x: &[f64],
        t: f64,
        stream: Option<&mut CounterStream>,
    ) -> Result<(Vec<f64>, RoutingDecision)> {
        let decision = self.decide(policy, x, t, stream)?;
        let v = self.blend(&decision, x, t)?;
        Ok((v, decision))
    }

    pub fn blend(&self, decision: &RoutingDecision, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        for &k in &decision.selected {
            let vk = self.ensemble.expert(k).velocity(x, t)?;
            axpy(decision.weights[k], &vk, &mut v);
        }
        Ok(v)
    }
}
