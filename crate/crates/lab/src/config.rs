//! Lab configuration and seed derivation.

use std::path::Path;

use anyhow::{bail, Context};
use ddm_core::flowexperts::TrainConfig;
use ddm_core::rng::{child_seed, fnv1a64};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub master_seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub n_per_cluster: usize,
    /// Minimum centroid distance in units of the within-cluster std.
    pub separation: f64,
    pub expert: TrainConfig,
    pub router: TrainConfig,
    pub sampler: SamplerDefaults,
    /// Policy names understood by [`crate::policy::parse_policy`].
    pub policies: Vec<String>,
    /// Trajectories for cheap presets.
    pub n_samples: usize,
    /// Trajectories for presets that power-iterate Jacobians.
    pub n_jacobian_samples: usize,
    /// Jacobian stride along each trajectory.
    pub jacobian_stride: usize,
    /// Free-form per-preset overrides, keyed by preset name.
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerDefaults {
    /// Heun steps `N`; refinement pairs use `N` and `2N`.
    pub steps: usize,
}

impl Default for SamplerDefaults {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

/// Sample counts used by the paper.
pub const PAPER_SAMPLES: usize = 1000;
pub const PAPER_JACOBIAN_SAMPLES: usize = 500;

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            k: 8,
            d: 8,
            n_per_cluster: 250,
            separation: 2.0,
            expert: TrainConfig::default(),
            router: TrainConfig::default(),
            sampler: SamplerDefaults::default(),
            policies: vec!["top1".into(), "top2".into(), "full".into()],
            n_samples: 500,
            n_jacobian_samples: 200,
            jacobian_stride: 1,
            overrides: serde_json::Map::new(),
        }
    }
}

impl LabConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k < 2 || self.d < 2 || self.n_per_cluster < 8 || !(self.separation > 0.0) {
            bail!("config needs K >= 2, d >= 2, n_per_cluster >= 8 and separation > 0");
        }
        if self.n_samples == 0 || self.n_jacobian_samples == 0 {
            bail!("sample counts must be positive");
        }
        if self.sampler.steps == 0 {
            bail!("sampler step count must be positive");
        }
        self.expert.validate()?;
        self.router.validate()?;
        if self.expert.m != self.router.m {
            bail!("experts and router must share the time-feature count m");
        }
        for p in &self.policies {
            crate::policy::parse_policy(p)?;
        }
        Ok(())
    }

    /// `splitmix64(master_seed ^ fnv1a64(tag) ^ index)`.
    pub fn seed(&self, tag: &str, index: u64) -> u64 {
        child_seed(self.master_seed, tag, index)
    }

    pub fn with_master_seed(&self, seed: u64) -> Self {
        Self {
            master_seed: seed,
            ..self.clone()
        }
    }

    /// Restore the paper's sample counts.
    pub fn paper_n(mut self) -> Self {
        self.n_samples = PAPER_SAMPLES;
        self.n_jacobian_samples = PAPER_JACOBIAN_SAMPLES;
        self
    }

    pub fn expert_config(&self, k: usize) -> TrainConfig {
        self.expert.with_seed(self.seed("expert", k as u64))
    }

    pub fn router_config(&self) -> TrainConfig {
        self.router.with_seed(self.seed("router", 0))
    }

    /// Hash of everything that determines the trained system.
    pub fn system_hash(&self) -> u64 {
        let key = serde_json::json!({
            "master_seed": self.master_seed,
            "K": self.k,
            "d": self.d,
            "n_per_cluster": self.n_per_cluster,
            "separation": self.separation,
            "expert": self.expert,
            "router": self.router,
        });
        fnv1a64(key.to_string().as_bytes())
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Integer override for a preset, falling back to `default`.
    pub fn override_usize(&self, preset: &str, key: &str, default: usize) -> usize {
        self.overrides
            .get(preset)
            .and_then(|o| o.get(key))
            .and_then(|v| v.as_u64())
            .map_or(default, |v| v as usize)
    }

    pub fn override_f64(&self, preset: &str, key: &str, default: f64) -> f64 {
        self.overrides
            .get(preset)
            .and_then(|o| o.get(key))
            .and_then(|v| v.as_f64())
            .unwrap_or(default)
    }
}
