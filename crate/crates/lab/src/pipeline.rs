//! Data generation, training, persistence and batch sampling.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use anyhow::{bail, Context};
use ddm_core::checkpoint::{load_expert, load_router, save_expert, save_router};
use ddm_core::dataworld::{generate_mixture, kmeans_partition, Dataset, GaussianMixture};
use ddm_core::flowexperts::{train_ensemble, ExpertEnsemble};
use ddm_core::numcore::Mat;
use ddm_core::rng::SplitMix64;
use ddm_core::router::{train_router, RoutingPolicy};
use ddm_core::sampler::{sample_trajectory, SamplerConfig, Trajectory};
use ddm_core::system::DdmSystem;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;

const KMEANS_MAX_ITER: usize = 200;

/// A generated dataset, its k-means partition and the trained system.
#[derive(Debug, Clone)]
pub struct Lab {
    pub cfg: LabConfig,
    /// Points with their generating component as label.
    pub data: Dataset,
    /// The same points with k-means labels; expert `k` trains on cluster `k`.
    pub partition: Dataset,
    pub system: DdmSystem,
    pub training: TrainingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub expert_final_loss: Vec<f64>,
    pub expert_rows_read: Vec<usize>,
    pub router_final_loss: f64,
    pub router_clean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartitionFile {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

impl Lab {
    /// Ground-truth generating density, optionally with every centre shifted.
    pub fn truth(&self, shift: Option<&[f64]>) -> GaussianMixture {
        let mut centers = self.data.centroids.clone();
        if let Some(s) = shift {
            for i in 0..centers.rows {
                centers.row_mut(i).iter_mut().zip(s).for_each(|(c, d)| *c += d);
            }
        }
        GaussianMixture::new(centers, 1.0)
    }

    pub fn noise(&self, index: usize) -> Vec<f64> {
        noise(&self.cfg, index)
    }

    pub fn trajectory(&self, policy: &RoutingPolicy, index: usize, cfg: &SamplerConfig) -> ddm_core::Result<Trajectory> {
        sample_trajectory(&self.system, policy, &self.noise(index), cfg, index as u64)
    }
}

/// Initial noise of sample `index`.
pub fn noise(cfg: &LabConfig, index: usize) -> Vec<f64> {
    SplitMix64::new(cfg.seed("noise", index as u64)).normal_vec(cfg.d)
}

pub fn generate_data(cfg: &LabConfig) -> anyhow::Result<Dataset> {
    Ok(generate_mixture(cfg.seed("data", 0), cfg.k, cfg.d, cfg.n_per_cluster, cfg.separation)?)
}

pub fn partition(cfg: &LabConfig, data: &Dataset) -> anyhow::Result<Dataset> {
    let km = kmeans_partition(&data.points, cfg.k, cfg.seed("kmeans", 0), KMEANS_MAX_ITER)?;
    Ok(data.with_partition(km.labels, km.centroids)?)
}

/// Train experts and router on a partition. Parameters are rounded to the
/// checkpoint precision so in-memory and reloaded systems agree exactly.
pub fn train_system(cfg: &LabConfig, partition: &Dataset) -> anyhow::Result<(DdmSystem, TrainingSummary)> {
    let (mut ensemble, reports) = train_ensemble(partition, |k| cfg.expert_config(k))?;
    let (mut router, router_report) = train_router(partition, &cfg.router_config())?;
    let mut experts = ensemble.experts().to_vec();
    experts.iter_mut().for_each(|e| e.net.round_to_f32());
    ensemble = ExpertEnsemble::new(experts)?;
    router.net.round_to_f32();
    let summary = TrainingSummary {
        expert_final_loss: reports.iter().map(|r| *r.losses.last().unwrap_or(&f64::NAN)).collect(),
        expert_rows_read: reports.iter().map(|r| r.rows_read).collect(),
        router_final_loss: *router_report.losses.last().unwrap_or(&f64::NAN),
        router_clean_accuracy: router_report.clean_accuracy,
    };
    Ok((DdmSystem::new(ensemble, router)?, summary))
}

pub fn build(cfg: &LabConfig) -> anyhow::Result<Lab> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    let partition = partition(cfg, &data)?;
    let (system, training) = train_system(cfg, &partition)?;
    Ok(Lab {
        cfg: cfg.clone(),
        data,
        partition,
        system,
        training,
    })
}

/// [`build`] memoised per process on the system-defining part of the config.
pub fn build_cached(cfg: &LabConfig) -> anyhow::Result<Arc<Lab>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<Lab>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = cfg.system_hash();
    if let Some(lab) = cache.lock().expect("cache lock").get(&key) {
        let mut lab = (**lab).clone();
        lab.cfg = cfg.clone();
        return Ok(Arc::new(lab));
    }
    let lab = Arc::new(build(cfg)?);
    cache.lock().expect("cache lock").insert(key, lab.clone());
    Ok(lab)
}

/// Run `f` over `0..n` on the worker pool; results come back in index order.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> anyhow::Result<T> + Sync + Send) -> anyhow::Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

/// On-disk layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_csv(&self) -> PathBuf {
        self.root.join("data").join("dataset.csv")
    }

    pub fn data_meta(&self) -> PathBuf {
        self.root.join("data").join("dataset.json")
    }

    pub fn partition(&self) -> PathBuf {
        self.root.join("data").join("partition.json")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn expert(&self, k: usize) -> PathBuf {
        self.models().join(format!("expert_{k:02}.ddl"))
    }

    pub fn router(&self) -> PathBuf {
        self.models().join("router.ddl")
    }

    pub fn training_summary(&self) -> PathBuf {
        self.models().join("training.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn experiments(&self) -> PathBuf {
        self.root.join("experiments")
    }

    pub fn experiment(&self, name: &str) -> PathBuf {
        self.experiments().join(name)
    }
}

pub fn write_data(layout: &RunLayout, data: &Dataset) -> anyhow::Result<()> {
    std::fs::create_dir_all(layout.root.join("data"))?;
    data.save(&layout.data_csv(), &layout.data_meta())?;
    Ok(())
}

pub fn read_data(layout: &RunLayout) -> anyhow::Result<Dataset> {
    if !layout.data_csv().exists() {
        bail!(
            "no dataset at {}; run `ddmlab gen-data --out {}` first",
            layout.data_csv().display(),
            layout.root.display()
        );
    }
    Ok(Dataset::load(&layout.data_csv(), &layout.data_meta())?)
}

pub fn write_system(layout: &RunLayout, lab: &Lab) -> anyhow::Result<()> {
    std::fs::create_dir_all(layout.models())?;
    for (k, expert) in lab.system.ensemble.experts().iter().enumerate() {
        save_expert(&layout.expert(k), expert, lab.cfg.expert_config(k).seed)?;
    }
    let rc = lab.cfg.router_config();
    save_router(&layout.router(), &lab.system.router, rc.seed, rc.hash())?;
    let part = PartitionFile {
        labels: lab.partition.labels.clone(),
        centroids: lab.partition.centroids.rows_iter().map(<[f64]>::to_vec).collect(),
    };
    std::fs::write(layout.partition(), serde_json::to_string(&part)?)?;
    std::fs::write(layout.training_summary(), serde_json::to_string_pretty(&lab.training)?)?;
    Ok(())
}

/// Reload a trained run; the config must describe the same system.
pub fn read_lab(layout: &RunLayout, cfg: &LabConfig) -> anyhow::Result<Lab> {
    let data = read_data(layout)?;
    if !layout.router().exists() {
        bail!(
            "no trained models under {}; run `ddmlab train --out {}` first",
            layout.models().display(),
            layout.root.display()
        );
    }
    if data.k != cfg.k || data.d != cfg.d {
        bail!("dataset on disk has K={}, d={} but the config asks for K={}, d={}", data.k, data.d, cfg.k, cfg.d);
    }
    let part: PartitionFile = serde_json::from_str(
        &std::fs::read_to_string(layout.partition()).with_context(|| format!("reading {}", layout.partition().display()))?,
    )?;
    let partition = data.with_partition(part.labels, Mat::from_rows(&part.centroids))?;
    let experts = (0..cfg.k)
        .map(|k| load_expert(&layout.expert(k)).with_context(|| format!("loading {}", layout.expert(k).display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let router = load_router(&layout.router())?;
    let system = DdmSystem::new(ExpertEnsemble::new(experts)?, router)?;
    let training = serde_json::from_str(&std::fs::read_to_string(layout.training_summary())?)?;
    Ok(Lab {
        cfg: cfg.clone(),
        data,
        partition,
        system,
        training,
    })
}

/// Write one CSV per trajectory plus JSON metadata; returns written paths.
pub fn write_trajectories(dir: &Path, policy: &RoutingPolicy, trajs: &[Trajectory]) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (i, tr) in trajs.iter().enumerate() {
        let csv = dir.join(format!("traj_{i:04}.csv"));
        std::fs::write(&csv, tr.to_csv_string())?;
        let meta = dir.join(format!("traj_{i:04}.json"));
        std::fs::write(&meta, serde_json::to_string_pretty(&tr.metadata(Some(policy)))?)?;
        out.push(csv);
        out.push(meta);
    }
    Ok(out)
}
