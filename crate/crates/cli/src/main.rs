//! `taskfuse`: every subcommand reads the experiment config, writes its
//! outputs under the run directory (`--out`) and records them in the run's
//! `manifest.toml`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taskfuse::losses::FeatureWeightMode;
use taskfuse::pipeline::*;
use taskfuse::search_space::SearchSpaceConfig;
use taskfuse::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "taskfuse",
    version,
    about = "Task-guided image fusion: search, meta-initialize, train, fuse, evaluate"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment config (TOML). Defaults to the run directory's
    /// `config.toml`, then to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Per-pixel weighting of the fusion loss.
    #[arg(long, global = true, value_enum)]
    feature_weights: Option<FeatureWeights>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeatureWeights {
    Gradient,
    External,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Implicit architecture search over the fusion search space.
    Search {
        /// Search-space description (TOML); replaces the config's `[space]`.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Pair directory, or a directory of per-task pair directories.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path, relative to the run directory.
        #[arg(long = "out", default_value = "search.ckpt")]
        ckpt: PathBuf,
    },
    /// Meta-learn the fusion initialization across tasks.
    MetaInit {
        /// Task manifest: `[[tasks]]` tables with id, dir, val_dir, kind.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Adaptation steps per task.
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        outer_iters: Option<usize>,
        #[arg(long, action = clap::ArgAction::Set)]
        first_order: Option<bool>,
        /// Search checkpoint; defaults to the run's `search.ckpt` if present.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long = "out", default_value = "meta.ckpt")]
        ckpt: PathBuf,
    },
    /// Train the fusion network and task head on the coupled objective.
    TrainJoint {
        /// Meta or search checkpoint; defaults to the run's latest.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Task id used for joint training.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Weight of the fusion loss in the joint objective.
        #[arg(long)]
        eta: Option<f64>,
        /// Train the task head only.
        #[arg(long)]
        freeze_fusion: bool,
        #[arg(long = "out", default_value = "joint.ckpt")]
        ckpt: PathBuf,
    },
    /// Fuse every pair in a directory with a trained checkpoint.
    Fuse {
        /// Defaults to the run's latest checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>_A` / `<id>_B` pairs.
        #[arg(long)]
        data: PathBuf,
        /// Output directory, relative to the run directory.
        #[arg(long = "out", default_value = "fused")]
        fused: PathBuf,
    },
    /// Score fused images against their sources.
    Evaluate {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        src_a: PathBuf,
        #[arg(long)]
        src_b: PathBuf,
        /// CSV path, relative to the run's `metrics/` directory.
        #[arg(long = "out", default_value = "report.csv")]
        csv: PathBuf,
    },
    /// Aggregate the run's metric CSVs and plot them with the loss curves.
    Report,
    /// Render a synthetic paired dataset.
    SynthData {
        #[arg(long, default_value = "infrared-visible")]
        style: String,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output directory, relative to the run directory; defaults to
        /// `data/<style>`.
        #[arg(long = "out")]
        dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Relative paths land inside the run directory.
fn under(run: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        run.join(p)
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let run_config = g.out.join("config.toml");
    let mut config = match &g.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            // Data paths in a config file are relative to that file.
            let root = path.parent().unwrap_or(Path::new("."));
            for t in &mut c.data.tasks {
                t.dir = t.dir.take().map(|d| root.join(d));
                t.val_dir = t.val_dir.take().map(|d| root.join(d));
            }
            c.latency_table = c.latency_table.take().map(|d| root.join(d));
            c
        }
        None if run_config.exists() => ExperimentConfig::load(&run_config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(w) = g.feature_weights {
        config.losses.feature_weights = match w {
            FeatureWeights::Gradient => FeatureWeightMode::Gradient,
            FeatureWeights::External => FeatureWeightMode::External,
        };
    }
    Ok(config)
}

/// One task per sub-directory, or the directory itself when it has none.
fn tasks_from_dir(dir: &Path) -> Result<Vec<TaskSource>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let task = |p: &Path| TaskSource {
        id: p
            .file_name()
            .map_or_else(|| "data".into(), |n| n.to_string_lossy().into_owned()),
        kind: None,
        dir: Some(p.to_path_buf()),
        val_dir: None,
        synthetic: None,
    };
    Ok(if subdirs.is_empty() {
        vec![task(dir)]
    } else {
        subdirs.iter().map(|p| task(p)).collect()
    })
}

struct Run {
    dir: PathBuf,
    command: String,
    artifacts: Vec<(String, String)>,
}

impl Run {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let command = std::env::args().collect::<Vec<_>>().join(" ");
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            artifacts: Vec::new(),
        })
    }

    fn track(&mut self, path: &Path) -> Result<()> {
        let name = path
            .strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.artifacts.push((name, file_sha256(path)?));
        Ok(())
    }

    fn write_config(&mut self, config: &ExperimentConfig) -> Result<()> {
        let path = self.dir.join("config.toml");
        std::fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))?;
        self.track(&path)
    }

    /// History, extra files and checkpoint of a phase.
    fn persist(&mut self, result: &PhaseResult, ckpt: &Path) -> Result<()> {
        let phase = result.checkpoint.phase.clone();
        let hist = self.dir.join(format!("{phase}_history.csv"));
        std::fs::write(&hist, &result.history_csv).map_err(|e| Error::io(&hist, e))?;
        self.track(&hist)?;
        for (name, text) in &result.files {
            let p = self.dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            self.track(&p)?;
        }
        if let Some(parent) = ckpt.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let hash = result.checkpoint.save(ckpt)?;
        log::info!("{phase} checkpoint {} (sha256 {hash})", ckpt.display());
        self.track(ckpt)
    }

    fn finish(self, seed: u64, config_hash: &[u8; 32]) -> Result<()> {
        let mut manifest = RunManifest::open(&self.dir, seed, config_hash)?;
        manifest.record(&self.command, self.artifacts);
        manifest.save(&self.dir)
    }
}

/// First existing checkpoint among `phases` in the run directory.
fn latest_checkpoint(run: &Path, phases: &[&str]) -> Option<PathBuf> {
    phases
        .iter()
        .map(|p| checkpoint_path(run, p))
        .find(|p| p.exists())
}

fn load_prior(explicit: Option<&Path>, run: &Path, phases: &[&str]) -> Result<Option<Checkpoint>> {
    match explicit {
        Some(p) => Checkpoint::load(p).map(Some),
        None => latest_checkpoint(run, phases)
            .map(|p| Checkpoint::load(&p))
            .transpose(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut config = load_config(g)?;
    let dir = g.out.clone();
    let mut run = Run::new(&dir)?;
    let base = Path::new(".");

    match cli.command {
        Command::Search {
            space,
            data,
            lambda,
            epochs,
            ckpt,
        } => {
            if let Some(space) = space {
                config.space = SearchSpaceConfig::load(&space)?;
            }
            if let Some(d) = data {
                config.data.tasks = tasks_from_dir(&d)?;
                config.data.joint_task = None;
            }
            config.search.lambda = lambda.unwrap_or(config.search.lambda);
            config.search.epochs = epochs.unwrap_or(config.search.epochs);
            let exp = Experiment::new(config, base)?;
            run.write_config(&exp.config)?;
            let result = run_phase_search(&exp)?;
            run.persist(&result, &under(&dir, &ckpt))?;
            run.finish(exp.config.seed, &exp.hash)
        }
        Command::MetaInit {
            tasks,
            k,
            outer_iters,
            first_order,
            prior,
            ckpt,
        } => {
            if let Some(m) = tasks {
                config.data.tasks = TaskManifest::load(&m)?.tasks;
                config.data.joint_task = None;
            }
            config.meta.inner_steps = k.unwrap_or(config.meta.inner_steps);
            config.meta.outer_iters = outer_iters.unwrap_or(config.meta.outer_iters);
            config.meta.first_order = first_order.unwrap_or(config.meta.first_order);
            let exp = Experiment::new(config, base)?;
            run.write_config(&exp.config)?;
            let prior = load_prior(prior.as_deref(), &dir, &["search"])?;
            let result = run_phase_meta(&exp, prior.as_ref())?;
            run.persist(&result, &under(&dir, &ckpt))?;
            run.finish(exp.config.seed, &exp.hash)
        }
        Command::TrainJoint {
            prior,
            task,
            epochs,
            lr,
            eta,
            freeze_fusion,
            ckpt,
        } => {
            if task.is_some() {
                config.data.joint_task = task;
            }
            config.joint.epochs = epochs.unwrap_or(config.joint.epochs);
            config.joint.lr = lr.unwrap_or(config.joint.lr);
            config.losses.eta = eta.unwrap_or(config.losses.eta);
            config.joint.freeze_fusion |= freeze_fusion;
            let exp = Experiment::new(config, base)?;
            run.write_config(&exp.config)?;
            let prior = load_prior(prior.as_deref(), &dir, &["meta", "search"])?;
            let result = run_phase_joint(&exp, prior.as_ref())?;
            run.persist(&result, &under(&dir, &ckpt))?;
            run.finish(exp.config.seed, &exp.hash)
        }
        Command::Fuse {
            checkpoint,
            data,
            fused,
        } => {
            config.validate()?;
            let model = Model::build(&config, base)?;
            let ckpt = load_prior(checkpoint.as_deref(), &dir, &["joint", "meta", "search"])?
                .ok_or_else(|| Error::MissingPrerequisite {
                    phase: "fuse".into(),
                    missing: format!("a checkpoint in {}", dir.display()),
                })?;
            ckpt.check_config(&config.hash(), true)?;
            let (arch, params) = model.fusion_from_checkpoint(&ckpt)?;
            let out = under(&dir, &fused);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for pair in ingest(&data)? {
                let f = model.fuse(&params, &arch, &pair)?;
                let path = out.join(format!("{}.png", pair.id));
                match &pair.chroma {
                    Some(c) => save_color(&path, &f, c)?,
                    None => save_gray(&path, &f)?,
                }
                run.track(&path)?;
            }
            log::info!("fused images written to {}", out.display());
            run.finish(config.seed, &config.hash())
        }
        Command::Evaluate {
            fused,
            src_a,
            src_b,
            csv,
        } => {
            let report = evaluate_paths(&fused, &src_a, &src_b, &config.metrics)?;
            let path = under(&dir.join("metrics"), &csv);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            report.write_csv(file)?;
            if let Some(mean) = report.mean() {
                let cols = &taskfuse::metrics::METRIC_COLUMNS[1..];
                let text: Vec<String> = cols
                    .iter()
                    .zip(mean)
                    .map(|(c, v)| format!("{c} {v:.4}"))
                    .collect();
                println!("{} pairs, mean {}", report.pairs.len(), text.join(", "));
            }
            run.track(&path)?;
            run.finish(config.seed, &config.hash())
        }
        Command::Report => {
            let out = report(&dir)?;
            for row in &out.rows {
                let values: Vec<String> = row.values.iter().map(|v| format!("{v:.4}")).collect();
                println!(
                    "{} {} ({} pairs): {}",
                    row.source,
                    row.stat,
                    row.pairs,
                    values.join(" ")
                );
            }
            run.track(&out.aggregate_csv)?;
            for p in &out.plots {
                run.track(p)?;
            }
            run.finish(config.seed, &config.hash())
        }
        Command::SynthData {
            style,
            pairs,
            size,
            dir: sub,
        } => {
            let style = SynthStyle::parse(&style)?;
            let out = under(
                &dir,
                &sub.unwrap_or_else(|| Path::new("data").join(style.name())),
            );
            for pair in synthesize(style, pairs, size, size, config.seed)? {
                save_pair(&out, &pair)?;
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&out)
                .map_err(|e| Error::io(&out, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            for f in &files {
                run.track(f)?;
            }
            log::info!(
                "{pairs} {} pairs written to {}",
                style.name(),
                out.display()
            );
            run.finish(config.seed, &config.hash())
        }
    }
}
