mod events;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use usps_core::config::{Profile, RunConfig};
use usps_core::error::Error;
use usps_core::evalsuite::{Ablation, AblationPlan};
use usps_core::runner::{MethodSelection, Workspace};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;

#[derive(Parser)]
#[command(name = "usps", version, about = "Unsupervised saliency from fused handcrafted pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides USPS_ARTIFACTS and the configured out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// desk or full.
    #[arg(long)]
    profile: Option<String>,
    /// Only warnings and errors on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by [data.synthetic].
    Generate(Common),
    /// Run the handcrafted methods over the train split.
    Handcrafted(Common),
    /// Refine pseudo-labels with the moving-average loop.
    Refine {
        #[command(flatten)]
        common: Common,
        /// One method name, or `all`.
        #[arg(long, default_value = "all")]
        method: String,
        /// Override the number of self-supervision iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Skip the CRF on the moving averages.
        #[arg(long)]
        no_crf: bool,
    },
    /// Train the final network on the fused refined labels.
    Fuse(Common),
    /// Score the fused network on the test split.
    Evaluate(Common),
    /// Train and score the ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Add the ground-truth oracle rows.
        #[arg(long)]
        oracle: bool,
        /// Add the row that refines without the CRF.
        #[arg(long)]
        no_crf: bool,
    },
    /// Write report.md, plots, failure cases and metrics.json.
    Report(Common),
    /// Every stage in order, stopping at the first failure.
    RunAll(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Handcrafted(_) => "handcrafted",
            Command::Refine { .. } => "refine",
            Command::Fuse(_) => "fuse",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Report(_) => "report",
            Command::RunAll(_) => "run-all",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Handcrafted(c)
            | Command::Fuse(c)
            | Command::Evaluate(c)
            | Command::Report(c)
            | Command::RunAll(c) => c,
            Command::Refine { common, .. } | Command::Ablate { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let profile = common.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    match &common.config {
        Some(path) => RunConfig::load(path, profile),
        None => RunConfig::from_toml_str("", profile),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

fn execute(cmd: &Command, ws: &Workspace) -> Result<(), Error> {
    match cmd {
        Command::Generate(_) => {
            let m = ws.generate()?;
            log::info!("wrote {} samples to {}", m.entries.len(), ws.config.data.root.display());
        }
        Command::Handcrafted(_) => {
            let store = ws.handcrafted()?;
            log::info!("handcrafted maps for {} methods", store.methods.len());
        }
        Command::Refine { method, iters, no_crf, .. } => {
            let sel = match method.as_str() {
                "all" => MethodSelection::All,
                m => MethodSelection::One(m.to_string()),
            };
            for r in ws.refine(&sel, *iters, *no_crf)? {
                log::info!("{}: {} iterations{}", r.method, r.iterations.len(), if r.stopped_early { " (stable)" } else { "" });
            }
        }
        Command::Fuse(_) => {
            ws.fuse()?;
        }
        Command::Evaluate(_) => {
            let e = ws.evaluate()?;
            log::info!("pipeline: F {:.4}  MAE {:.4}", e.row.f, e.row.mae);
        }
        Command::Ablate { oracle, no_crf, .. } => {
            let mut flags = ws.config.ablation_plan()?.flags;
            if !*oracle && ws.config.eval.ablations.is_none() {
                flags.retain(|a| !a.needs_ground_truth());
            }
            if *oracle {
                flags.extend([Ablation::OracleGtTraining, Ablation::OracleLabelFusion]);
            }
            if *no_crf {
                flags.insert(Ablation::NoCrf);
            }
            for e in ws.ablate(&AblationPlan::new(flags)?)? {
                log::info!("{}: F {:.4}  MAE {:.4}", e.row.name, e.row.f, e.row.mae);
            }
        }
        Command::Report(_) => {
            let paths = ws.report()?;
            log::info!("report at {}", paths.report.display());
        }
        Command::RunAll(_) => {
            let metrics = ws.run_all()?;
            for row in &metrics.rows {
                log::info!("{}: F {:.4}  MAE {:.4}", row.name, row.f, row.mae);
            }
        }
    }
    Ok(())
}

/// Writes the error chain and config next to the outputs; returns its path.
fn write_diagnostics(out_dir: &Path, command: &str, err: &Error, cfg: &RunConfig) -> Option<PathBuf> {
    let mut chain = Vec::new();
    let mut cur: Option<&dyn std::error::Error> = Some(err);
    while let Some(e) = cur {
        chain.push(e.to_string());
        cur = e.source();
    }
    let stage = match err {
        Error::Stage { stage, .. } => Some(stage.as_str()),
        _ => None,
    };
    let bundle = serde_json::json!({
        "command": command,
        "stage": stage,
        "error": err.to_string(),
        "chain": chain,
        "config": cfg.to_json(),
        "events": events::events_path(out_dir),
    });
    let path = out_dir.join("diagnostics.json");
    std::fs::create_dir_all(out_dir).ok()?;
    std::fs::write(&path, serde_json::to_vec_pretty(&bundle).ok()?).ok()?;
    Some(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    let level = if common.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };

    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            events::init(None, level);
            log::error!("{e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let out_dir = cfg.resolve_out_dir(common.out.as_deref());
    events::init(Some(&out_dir), level);
    log::info!("{}: out_dir {}", cli.command.name(), out_dir.display());

    let ws = Workspace::new(cfg, out_dir);
    match execute(&cli.command, &ws) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            log::error!("{e}");
            if let Error::MissingArtifact(p) = e.root() {
                if p.ends_with("masks") {
                    log::error!("ground-truth masks are missing from the dataset at {}", p.display());
                }
            }
            if code == EXIT_RUNTIME {
                match write_diagnostics(&ws.out_dir, cli.command.name(), &e, &ws.config) {
                    Some(p) => eprintln!("diagnostics bundle: {}", p.display()),
                    None => eprintln!("diagnostics bundle could not be written"),
                }
            }
            log::logger().flush();
            ExitCode::from(code)
        }
    }
}
