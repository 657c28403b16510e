//! `dscm` command line: staged pipeline commands and the HTTP service.

pub mod service;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use dscm_core::auxiliary::AuxRole;
use dscm_core::cft::Regime;
use dscm_core::config::ExperimentConfig;
use dscm_core::graph::Intervention;
use dscm_core::pipeline::Pipeline;
use dscm_core::{Error, Result};

use service::{AppState, Snapshot};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dscm", version, about = "Counterfactual image generation with structure-area attributes")]
pub struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Leaf override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    None,
    Reg,
    Seg,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::None => Regime::None,
            RegimeArg::Reg => Regime::Reg,
            RegimeArg::Seg => Regime::Seg,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Finetune,
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenerateData,
    /// Fit the attribute mechanisms.
    TrainFlows,
    /// Train the image mechanism on the ELBO.
    TrainHvae,
    /// Train the fine-tuning or the evaluation auxiliaries.
    TrainAux {
        #[arg(long, value_enum)]
        role: RoleArg,
    },
    /// Counterfactual fine-tuning for one regime.
    Finetune {
        #[arg(long, value_enum)]
        regime: RegimeArg,
    },
    /// Effectiveness table, report and panels.
    Evaluate {
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["none", "reg", "seg"])]
        regimes: Vec<RegimeArg>,
    },
    /// One counterfactual panel for a stored sample.
    Counterfactual {
        #[arg(long)]
        sample: String,
        /// `attribute=value`; repeatable.
        #[arg(long = "assign", value_name = "NAME=VALUE", required = true)]
        assign: Vec<String>,
        #[arg(long, value_enum, default_value = "seg")]
        regime: RegimeArg,
        /// Defaults to `<out>/counterfactuals/<sample>`.
        #[arg(long)]
        panel_dir: Option<PathBuf>,
    },
    /// Serve the `/api/v1` counterfactual API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, value_enum, default_value = "seg")]
        regime: RegimeArg,
    },
    /// Every stage in order.
    Run,
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

impl Cli {
    /// Config file plus overrides; flag overrides come after `--set` ones.
    pub fn pipeline(&self) -> Result<Pipeline> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            let quoted = toml::Value::String(out.display().to_string()).to_string();
            overrides.push(format!("out={quoted}"));
        }
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides)?,
            None => ExperimentConfig::from_toml("", &overrides)?,
        };
        Pipeline::new(config, overrides)
    }
}

pub fn parse_assignments(pairs: &[String]) -> Result<Intervention> {
    let mut iv = Intervention::default();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("assignment `{p}` is not NAME=VALUE")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("assignment `{p}` has a non-numeric value")))?;
        iv.assignments.insert(k.trim().to_string(), v);
    }
    Ok(iv)
}

/// Builds the serving snapshot for one regime.
pub fn load_snapshot(p: &Pipeline, regime: Regime) -> Result<Snapshot> {
    let ds = p.dataset()?;
    let (loaded, _) = p.load_model(&ds, regime)?;
    Ok(Snapshot::from_dataset(
        p.config_hash.clone(),
        regime.name().to_string(),
        loaded.model,
        Some(loaded.evaluator),
        &ds,
    ))
}

pub fn run(cli: Cli) -> Result<()> {
    let p = cli.pipeline()?;
    match cli.command {
        Command::GenerateData => {
            let _lock = p.lock()?;
            let ds = p.generate_data()?;
            println!("{} records in {}", ds.train.len() + ds.val.len() + ds.test.len(), p.data_dir().display());
        }
        Command::TrainFlows => {
            let _lock = p.lock()?;
            p.train_flows()?;
            println!("{}", p.layout.flows().display());
        }
        Command::TrainHvae => {
            let _lock = p.lock()?;
            p.train_hvae()?;
            println!("{}", p.layout.hvae().display());
        }
        Command::TrainAux { role } => {
            let _lock = p.lock()?;
            let role = match role {
                RoleArg::Finetune => AuxRole::Finetune,
                RoleArg::Eval => AuxRole::Eval,
            };
            p.train_aux(role)?;
        }
        Command::Finetune { regime } => {
            let _lock = p.lock()?;
            let regime = regime.into();
            p.finetune(regime)?;
            println!("{}", p.layout.model(regime).display());
        }
        Command::Evaluate { regimes } => {
            let _lock = p.lock()?;
            let regimes: Vec<Regime> = regimes.into_iter().map(Into::into).collect();
            let report = p.evaluate(&regimes)?;
            print!("{}", report.to_table());
        }
        Command::Counterfactual {
            sample,
            assign,
            regime,
            panel_dir,
        } => {
            let iv = parse_assignments(&assign)?;
            let dir = panel_dir.unwrap_or_else(|| p.layout.root.join("counterfactuals").join(&sample));
            let row = p.counterfactual(regime.into(), &sample, &iv, &dir)?;
            let summary = serde_json::json!({
                "sample": sample,
                "panel": dir.join("panel.png"),
                "factual_areas": row.factual_areas,
                "counterfactual_areas": row.counterfactual_areas,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Serve { addr, regime } => {
            let snapshot = load_snapshot(&p, regime.into())?;
            serve(AppState::new(Some(snapshot)), addr)?;
        }
        Command::Run => {
            let report = p.run_all()?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("listening on http://{addr}{}", service::API_PREFIX);
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })
}
