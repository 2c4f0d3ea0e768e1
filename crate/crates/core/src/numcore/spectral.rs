use serde::{Deserialize, Serialize};

use super::mat::{norm, Mat};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Matrix-free access to a linear map and its adjoint.
///
/// Implementations must satisfy `⟨apply(u), w⟩ = ⟨u, apply_adjoint(w)⟩`.
pub trait LinearMap {
    /// Dimension of the domain.
    fn dim(&self) -> usize;
    fn apply(&self, u: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, w: &[f64]) -> Vec<f64>;
}

pub struct MatrixMap<'a>(pub &'a Mat);

impl LinearMap for MatrixMap<'_> {
    fn dim(&self) -> usize {
        self.0.cols
    }

    fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.0.matvec(u)
    }

    fn apply_adjoint(&self, w: &[f64]) -> Vec<f64> {
        self.0.matvec_t(w)
    }
}

/// A linear map given by a JVP closure and a VJP closure.
pub struct FnMap<F, G> {
    pub dim: usize,
    pub apply: F,
    pub apply_adjoint: G,
}

impl<F, G> LinearMap for FnMap<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, u: &[f64]) -> Vec<f64> {
        (self.apply)(u)
    }

    fn apply_adjoint(&self, w: &[f64]) -> Vec<f64> {
        (self.apply_adjoint)(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIterConfig {
    /// Iteration pair whose relative change first decides convergence.
    pub check_at: (usize, usize),
    pub rel_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            check_at: (9, 10),
            rel_tol: 0.005,
            max_iter: 20,
            seed: 0,
        }
    }
}

impl PowerIterConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// A short fixed-budget run (used where only an ordering of norms matters).
    pub fn quick(iters: usize, seed: u64) -> Self {
        Self {
            check_at: (iters.saturating_sub(1).max(1), iters.max(2)),
            rel_tol: 0.005,
            max_iter: iters.max(2),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::Config(format!("rel_tol must be in (0,1), got {}", self.rel_tol)));
        }
        let (a, b) = self.check_at;
        if a == 0 || a >= b || b > self.max_iter {
            return Err(Error::Config(format!(
                "check_at {:?} must satisfy 0 < first < second <= max_iter ({})",
                self.check_at, self.max_iter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub estimate: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn random_unit(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    loop {
        let mut u = rng.normal_vec(n);
        let s = norm(&u);
        if s > 0.0 {
            u.iter_mut().for_each(|v| *v /= s);
            return u;
        }
    }
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Iteration `i` evaluates `σ_i = ‖A u_{i-1}‖` and then sets
/// `u_i = normalize(Aᵀ A u_{i-1})`. Convergence is first tested on the
/// relative change between iterations `check_at.0` and `check_at.1`, then on
/// each later consecutive pair up to `max_iter`. A start vector whose image is
/// zero is redrawn once; if the second draw is also annihilated, the map is
/// probed on the standard basis: a zero map returns `0` as converged, any
/// other map returns `0` unconverged.
pub fn spectral_norm(map: &dyn LinearMap, cfg: &PowerIterConfig) -> Result<SpectralEstimate> {
    cfg.validate()?;
    let n = map.dim();
    if n == 0 {
        return Err(Error::Config("linear map has zero dimension".into()));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut u = random_unit(&mut rng, n);
    let mut image = map.apply(&u);
    if norm(&image) == 0.0 {
        u = random_unit(&mut rng, n);
        image = map.apply(&u);
        if norm(&image) == 0.0 {
            let zero_map = (0..n).all(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                norm(&map.apply(&e)) == 0.0
            });
            return Ok(SpectralEstimate {
                estimate: 0.0,
                iterations: 0,
                converged: zero_map,
            });
        }
    }

    let mut prev = f64::NAN;
    let mut sigma = 0.0;
    for it in 1..=cfg.max_iter {
        if it > 1 {
            image = map.apply(&u);
        }
        sigma = norm(&image);
        if it >= cfg.check_at.1 && (sigma - prev).abs() <= cfg.rel_tol * sigma {
            return Ok(SpectralEstimate {
                estimate: sigma,
                iterations: it,
                converged: true,
            });
        }
        prev = sigma;
        if it == cfg.max_iter {
            break;
        }
        let mut g = map.apply_adjoint(&image);
        let gn = norm(&g);
        if gn == 0.0 {
            break;
        }
        g.iter_mut().for_each(|v| *v /= gn);
        u = g;
    }
    Ok(SpectralEstimate {
        estimate: sigma,
        iterations: cfg.max_iter,
        converged: false,
    })
}
