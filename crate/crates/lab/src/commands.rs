//! The `ddmlab` subcommands as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::bail;
use ddm_core::sampler::SamplerConfig;

use crate::config::LabConfig;
use crate::manifest::RunManifest;
use crate::pipeline::{generate_data, par_map, partition, read_data, read_lab, train_system, write_data, write_system, write_trajectories, Lab, RunLayout};
use crate::policy::{parse_policy, policy_name};
use crate::presets::{preset_names, run_preset, PresetOutput};
use crate::report::{write_report, ReportSummary};

pub const CONFIG_FILE: &str = "config.json";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOpts {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub paper_n: bool,
}

impl RunOpts {
    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.out)
    }
}

/// `--config`, else the run directory's saved config, else defaults; then
/// `--seed` and `--paper-n` on top.
pub fn resolve_config(opts: &RunOpts) -> anyhow::Result<LabConfig> {
    let saved = opts.out.join(CONFIG_FILE);
    let mut cfg = match &opts.config {
        Some(p) => LabConfig::load(p)?,
        None if saved.exists() => LabConfig::load(&saved)?,
        None => LabConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.master_seed = s;
    }
    if opts.paper_n {
        cfg = cfg.paper_n();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Refuse to mix artifacts of a different system into a run directory.
fn check_saved_system(opts: &RunOpts, cfg: &LabConfig, stage: &str) -> anyhow::Result<()> {
    let saved = opts.out.join(CONFIG_FILE);
    if !saved.exists() {
        return Ok(());
    }
    let on_disk = LabConfig::load(&saved)?;
    if on_disk.system_hash() != cfg.system_hash() {
        bail!(
            "{} was built from a different configuration (seed {} vs {}); rerun `ddmlab gen-data` and `ddmlab train` with these options before `{stage}`",
            opts.out.display(),
            on_disk.master_seed,
            cfg.master_seed
        );
    }
    Ok(())
}

fn finish(opts: &RunOpts, cfg: &LabConfig, stage: &str, started: Instant, files: &[PathBuf]) -> anyhow::Result<()> {
    let mut m = RunManifest::open(&opts.out, cfg)?;
    m.add_files(&opts.out, files)?;
    m.record_stage(stage, started.elapsed().as_secs_f64());
    m.save(&opts.out)?;
    Ok(())
}

fn save_config(opts: &RunOpts, cfg: &LabConfig) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&opts.out)?;
    let p = opts.out.join(CONFIG_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(cfg)?)?;
    Ok(p)
}

pub fn cmd_gen_data(opts: &RunOpts) -> anyhow::Result<Vec<PathBuf>> {
    let started = Instant::now();
    let cfg = resolve_config(opts)?;
    let layout = opts.layout();
    let data = generate_data(&cfg)?;
    write_data(&layout, &data)?;
    let files = vec![save_config(opts, &cfg)?, layout.data_csv(), layout.data_meta()];
    finish(opts, &cfg, "gen-data", started, &files)?;
    Ok(files)
}

pub fn cmd_train(opts: &RunOpts) -> anyhow::Result<Vec<PathBuf>> {
    let started = Instant::now();
    let cfg = resolve_config(opts)?;
    let layout = opts.layout();
    let data = read_data(&layout)?;
    if data.seed != cfg.seed("data", 0) || data.k != cfg.k || data.d != cfg.d {
        bail!(
            "the dataset in {} was generated from a different configuration; rerun `ddmlab gen-data` with these options first",
            opts.out.display()
        );
    }
    let part = partition(&cfg, &data)?;
    let (system, training) = train_system(&cfg, &part)?;
    let lab = Lab {
        cfg: cfg.clone(),
        data,
        partition: part,
        system,
        training,
    };
    write_system(&layout, &lab)?;
    let mut files = vec![save_config(opts, &cfg)?, layout.partition(), layout.router(), layout.training_summary()];
    files.extend((0..cfg.k).map(|k| layout.expert(k)));
    finish(opts, &cfg, "train", started, &files)?;
    Ok(files)
}

fn load_trained(opts: &RunOpts, stage: &str) -> anyhow::Result<Lab> {
    let cfg = resolve_config(opts)?;
    check_saved_system(opts, &cfg, stage)?;
    read_lab(&opts.layout(), &cfg)
}

/// Trajectories per policy; `policies` defaults to the configured list.
pub fn cmd_sample(opts: &RunOpts, policies: Option<&[String]>, count: usize) -> anyhow::Result<Vec<PathBuf>> {
    let started = Instant::now();
    let lab = load_trained(opts, "sample")?;
    let names = policies.map_or_else(|| lab.cfg.policies.clone(), <[String]>::to_vec);
    let parsed = names.iter().map(|n| parse_policy(n)).collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = SamplerConfig::heun(lab.cfg.sampler.steps).recording(true, false);
    let mut files = Vec::new();
    for p in &parsed {
        let trajs = par_map(count, |i| Ok(lab.trajectory(p, i, &cfg)?))?;
        files.extend(write_trajectories(&opts.layout().samples().join(policy_name(p)), p, &trajs)?);
    }
    finish(opts, &lab.cfg, "sample", started, &files)?;
    Ok(files)
}

/// Run one preset, or all of them for `all`, writing under `experiments/`.
pub fn cmd_experiment(opts: &RunOpts, name: &str) -> anyhow::Result<Vec<PresetOutput>> {
    let names: Vec<&str> = if name == "all" {
        preset_names()
    } else if preset_names().contains(&name) {
        vec![name]
    } else {
        bail!("unknown preset `{name}`; valid presets: {}, all", preset_names().join(", "));
    };
    let lab = load_trained(opts, "experiment")?;
    let mut outputs = Vec::new();
    for n in names {
        let started = Instant::now();
        let out = run_preset(n, &lab)?;
        let files = out.write(&opts.layout().experiment(n))?;
        finish(opts, &lab.cfg, &format!("experiment:{n}"), started, &files)?;
        outputs.push(out);
    }
    Ok(outputs)
}

pub fn cmd_report(opts: &RunOpts) -> anyhow::Result<ReportSummary> {
    let started = Instant::now();
    let summary = write_report(&opts.out)?;
    if opts.out.join(CONFIG_FILE).exists() {
        let cfg = resolve_config(opts)?;
        let mut files = summary.charts.clone();
        files.push(summary.markdown.clone());
        finish(opts, &cfg, "report", started, &files)?;
    }
    Ok(summary)
}

/// Checksum problems in a run directory's manifest.
pub fn verify_run(run_dir: &Path) -> anyhow::Result<Vec<String>> {
    Ok(RunManifest::load(run_dir)?.verify(run_dir))
}
