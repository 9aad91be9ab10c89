//! The `reroof` command line: synthetic data, training, inference,
//! baselines, evaluation and impact estimation over one config model.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::BaselineKind;
pub use config::RunConfig;
use reroof::data::SplitName;

#[derive(Debug, Parser)]
#[command(name = "reroof", version, about = "Detect roof replacement years from yearly rooftop images")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command; each overrides the config file.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the dataset root for `synth`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads. Outputs are identical for any value.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Dataset root.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Split for `infer`, `baseline` and `eval`.
    #[arg(long, global = true)]
    pub split: Option<SplitName>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        buildings: Option<usize>,
        #[arg(long)]
        transition_prob: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        /// No blur, exposure change or misregistration.
        #[arg(long)]
        no_confounders: bool,
    },
    /// Train the VAE and the pair classifier.
    Train {
        #[arg(long)]
        vae_epochs: Option<usize>,
        #[arg(long)]
        clf_epochs: Option<usize>,
    },
    /// Predict reroof years with trained models.
    Infer {
        /// Directory holding the checkpoints written by `train`.
        #[arg(long)]
        models: PathBuf,
    },
    /// Score predictions against labels.
    Eval {
        /// Predictions JSON (`building_id → year | null`).
        #[arg(long)]
        pred: PathBuf,
        /// Labels JSON; defaults to the chosen split of `--data`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run a baseline fitted on the training split.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
    },
    /// Estimate CO₂ displaced through cheaper customer acquisition.
    Impact {
        #[arg(long)]
        top_of_funnel_share: Option<f64>,
        /// Top-of-funnel spend as a ratio to the rest; sets the share to r / (1 + r).
        #[arg(long, conflicts_with = "top_of_funnel_share")]
        funnel_ratio: Option<f64>,
        #[arg(long)]
        cac_share: Option<f64>,
        #[arg(long)]
        elasticity: Option<f64>,
        #[arg(long)]
        co2_per_percent: Option<f64>,
        #[arg(long)]
        horizon: Option<u32>,
    },
    /// Tabulate saved evaluation reports.
    Compare {
        /// `name=path/to/report.json`, repeatable.
        #[arg(long = "report", value_parser = parse_named_path)]
        reports: Vec<(String, PathBuf)>,
        /// Add the published reference rows.
        #[arg(long)]
        published: bool,
    },
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

impl Cli {
    /// Config file (or defaults) with every flag applied.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let c = &self.common;
        if let Some(v) = c.seed {
            cfg.seed = v;
        }
        if let Some(v) = &c.out {
            cfg.out = v.clone();
        }
        if let Some(v) = c.workers {
            cfg.workers = v;
        }
        if let Some(v) = &c.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = c.split {
            cfg.split = v;
        }
        match &self.command {
            Command::Synth {
                buildings,
                transition_prob,
                image_size,
                no_confounders,
            } => {
                if let Some(v) = buildings {
                    cfg.synth.num_buildings = *v;
                }
                if let Some(v) = transition_prob {
                    cfg.synth.transition_prob = *v;
                }
                if let Some(v) = image_size {
                    cfg.synth.image_size = *v;
                }
                if *no_confounders {
                    cfg.synth = cfg.synth.clone().without_confounders();
                }
            }
            Command::Train { vae_epochs, clf_epochs } => {
                if let Some(v) = vae_epochs {
                    cfg.vae.epochs = *v;
                }
                if let Some(v) = clf_epochs {
                    cfg.classifier.epochs = *v;
                }
            }
            Command::Impact {
                top_of_funnel_share,
                funnel_ratio,
                cac_share,
                elasticity,
                co2_per_percent,
                horizon,
            } => {
                let p = &mut cfg.impact;
                if let Some(v) = top_of_funnel_share {
                    p.top_of_funnel_share = *v;
                }
                if let Some(r) = funnel_ratio {
                    *p = p.clone().with_funnel_ratio(*r);
                }
                if let Some(v) = cac_share {
                    p.cac_share_of_cost = *v;
                }
                if let Some(v) = elasticity {
                    p.cost_to_deployment_elasticity = *v;
                }
                if let Some(v) = co2_per_percent {
                    p.annual_co2_per_percent = *v;
                }
                if let Some(v) = horizon {
                    p.horizon_years = *v;
                }
            }
            Command::Infer { .. } | Command::Eval { .. } | Command::Baseline { .. } | Command::Compare { .. } => {}
        }
        if cfg.workers == 0 {
            anyhow::bail!("--workers must be at least 1");
        }
        Ok(cfg)
    }
}

/// Resolves the configuration and runs the command on `workers` threads.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.resolve()?;
    reroof::exec::with_workers(cfg.workers, || -> anyhow::Result<()> {
        match &cli.command {
            Command::Synth { .. } => commands::cmd_synth(&cfg).map(drop),
            Command::Train { .. } => commands::cmd_train(&cfg).map(drop),
            Command::Infer { models } => commands::cmd_infer(&cfg, models).map(drop),
            Command::Eval { pred, truth } => commands::cmd_eval(&cfg, pred, truth.as_deref()).map(drop),
            Command::Baseline { kind } => commands::cmd_baseline(&cfg, *kind).map(drop),
            Command::Impact { .. } => commands::cmd_impact(&cfg).map(drop),
            Command::Compare { reports, published } => commands::cmd_compare(&cfg, reports, *published).map(drop),
        }
    })
}
