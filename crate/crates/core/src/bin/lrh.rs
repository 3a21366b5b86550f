//! `lrh simulate | estimate | embed | report`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lrh::config::{OptimConfig, RunConfig};
use lrh::io::{self, Provenance};
use lrh::metrics::{self, MetricsReport};
use lrh::optimizer::{self, FitInputs};
use lrh::{Error, InterpolationKind, ObjectiveKind, Result};

#[derive(Parser)]
#[command(name = "lrh", version, about = "Low-rank covariance estimation from projection images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a particle stack and its ground truth.
    Simulate,
    /// Fit a low-rank covariance model to a stack.
    Estimate {
        #[arg(long)]
        stack: PathBuf,
    },
    /// Write per-image latent coordinates under a fitted model.
    Embed {
        #[arg(long)]
        stack: PathBuf,
        /// Directory written by `estimate`.
        #[arg(long)]
        fit: PathBuf,
    },
    /// Compute metrics of a fit, against ground truth when given.
    Report {
        #[arg(long)]
        fit: PathBuf,
        /// Stack whose stored poses are the starting poses of the fit.
        #[arg(long)]
        stack: Option<PathBuf>,
        /// Truth directory written by `simulate`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Ls,
    Ml,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    Nearest,
    Trilinear,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true, value_enum)]
    objective: Option<Objective>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pose_opt: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    interp: Option<Interp>,
    #[arg(long, global = true)]
    oversample: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let (s, e) = (&mut cfg.simulate, &mut cfg.estimate);
        if let Some(x) = self.seed {
            s.seed = x;
            e.seed = x;
        }
        if let Some(x) = self.rank {
            s.rank = x;
            e.rank = x;
        }
        if let Some(x) = self.objective {
            e.objective = match x {
                Objective::Ls => ObjectiveKind::Ls,
                Objective::Ml => ObjectiveKind::Ml,
            };
        }
        if let Some(x) = self.epochs {
            e.epochs = x;
        }
        if let Some(x) = self.batch_size {
            e.batch_size = x;
        }
        if let Some(x) = self.lr {
            e.learning_rate = x;
        }
        if let Some(x) = self.pose_opt {
            e.pose_opt = matches!(x, Switch::On);
        }
        if let Some(x) = self.interp {
            e.interp = match x {
                Interp::Nearest => InterpolationKind::Nearest,
                Interp::Trilinear => InterpolationKind::Trilinear,
            };
        }
        if let Some(x) = self.oversample {
            e.oversample = x;
        }
        Ok(cfg)
    }
}

/// Attach the offending path to I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (stack, truth, sim) = lrh::simulator::simulate_settings(&cfg.simulate)?;
    std::fs::create_dir_all(out)?;
    io::write_stack(&out.join("stack.lrhs"), &stack, Some(Provenance::simulated(&sim)))?;
    io::write_truth(&out.join("truth"), &truth)?;
    log::info!("wrote {} images of side {} to {}", stack.len(), stack.n, out.display());
    Ok(())
}

fn estimate(config: &OptimConfig, stack_path: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    let (stack, _) = at(stack_path, io::read_stack(stack_path))?;
    let result = optimizer::fit(&stack, config, FitInputs::default())?;
    io::write_fit(out, &result)?;
    std::fs::write(out.join("config.toml"), toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?)?;
    log::info!("singular values {:?}", result.singular_values);
    Ok(())
}

fn embed(config: &OptimConfig, stack_path: &Path, fit_dir: &Path, out: &Path) -> Result<()> {
    let (stack, _) = at(stack_path, io::read_stack(stack_path))?;
    let fit = at(fit_dir, io::read_fit(fit_dir))?;
    let latents = optimizer::embed(&stack, &fit, config.scheme())?;
    std::fs::create_dir_all(out)?;
    io::write_latents_csv(&out.join("latents.csv"), &latents)
}

fn report(fit_dir: &Path, stack_path: Option<&Path>, truth_dir: Option<&Path>, out: &Path) -> Result<()> {
    let fit = at(fit_dir, io::read_fit(fit_dir))?;
    let mut rep = MetricsReport { objective_trace: fit.objective_trace.clone(), epoch_seconds: fit.epoch_seconds.clone(), ..MetricsReport::default() };
    if let Some(dir) = truth_dir {
        let truth = at(dir, io::read_truth(dir))?;
        if !truth.components.is_empty() {
            rep.principal_angles_deg = metrics::subspace_angles(&fit.model.components, &truth.components)?;
        }
        rep.mean_fsc = lrh::grid::fsc(&fit.model.mean, &truth.mean)?;
        rep.refined = Some(metrics::pose_errors(&fit.poses, &truth.poses)?);
        if let Some(path) = stack_path {
            let (_, meta) = at(path, io::read_stack(path))?;
            rep.initial = Some(metrics::pose_errors(&meta.poses, &truth.poses)?);
        }
        if let Some(labels) = &truth.labels {
            let k = labels.iter().copied().max().map_or(1, |m| m + 1);
            rep.cluster_accuracy = Some(metrics::cluster_accuracy(&fit.latents, labels, k, 0)?);
        }
    }
    io::write_report(out, &rep)?;
    if let Some(imp) = rep.improvements() {
        println!("improvement (%): rotation {:.1}, out-of-plane {:.1}, in-plane {:.1}, offset {:.1}", imp[0], imp[1], imp[2], imp[3]);
    }
    if let Some(c) = rep.refined.as_ref().and_then(|p| p.contrast_correlation) {
        println!("contrast correlation {c:.3}");
    }
    if let Some(a) = rep.principal_angles_deg.last() {
        println!("largest principal angle {a:.2} deg");
    }
    if let Some(a) = rep.cluster_accuracy {
        println!("cluster accuracy {a:.4}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.opts.load()?;
    let out = &cli.opts.out;
    match &cli.command {
        Command::Simulate => simulate(&cfg, out),
        Command::Estimate { stack } => estimate(&cfg.estimate, stack, out),
        Command::Embed { stack, fit } => embed(&cfg.estimate, stack, fit, out),
        Command::Report { fit, stack, truth } => report(fit, stack.as_deref(), truth.as_deref(), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    lrh::init_thread_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrh: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
