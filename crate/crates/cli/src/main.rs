use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use transmask_core::checkpoint::Checkpoint;
use transmask_core::data::{read_manifest, write_synthetic_dataset, Dataset};
use transmask_core::evaluation::{run_report_from_manifest, EvalConfig, FeatureLpips, Metric, NoBackend, PerceptualBackend};
use transmask_core::imaging::{load_mask, load_rgb, save_mask, save_rgb};
use transmask_core::inference::{load_model, warp_preview, ManipulateOptions};
use transmask_core::training::{moving_average, train_loop, TrainConfig, TrainState};
use transmask_core::RgbImage;
use transmask_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "transmask", version, about = "Mask-driven exemplar image manipulation")]
struct Cli {
    /// Log filter, e.g. `info` or `transmask=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML or JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override `steps` from the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Override `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score outputs listed in an evaluation manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Report path; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of metrics (default: all).
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<Metric>,
        #[arg(long, value_enum, default_value_t = Lpips::Features)]
        lpips: Lpips,
        /// ROI dilation in pixels.
        #[arg(long)]
        dilation: Option<usize>,
    },
    /// Transport an exemplar onto an edited mask.
    Manipulate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
        #[arg(long)]
        exemplar_mask: PathBuf,
        #[arg(long)]
        edited_mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write keypoints, attention maps and the single warp here.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory of the browser editor's static build.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Idle seconds before a session is dropped.
        #[arg(long, default_value_t = 3600)]
        session_ttl: u64,
        /// Promptable segmenter endpoint; without it masks must be uploaded.
        #[arg(long)]
        segmenter: Option<String>,
    },
    /// Write a synthetic image/mask dataset and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a config preset as TOML.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Lpips {
    None,
    Features,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).context("bad --log filter")?)
        .with_writer(std::io::stderr)
        .init();
    match cli.command {
        Command::Train { config, resume, steps, output_dir } => train(&config, resume.as_deref(), steps, output_dir),
        Command::Evaluate { manifest, out, metrics, lpips, dilation } => evaluate(&manifest, &out, metrics, lpips, dilation),
        Command::Manipulate { ckpt, exemplar, exemplar_mask, edited_mask, out, diagnostics } => {
            manipulate(&ckpt, &exemplar, &exemplar_mask, &edited_mask, &out, diagnostics.as_deref())
        }
        Command::Serve { ckpt, bind, static_dir, session_ttl, segmenter } => {
            let mut cfg = ServiceConfig::new(bind, ckpt);
            cfg.static_dir = static_dir;
            cfg.session_ttl = Duration::from_secs(session_ttl);
            cfg.segmenter = segmenter;
            serve(cfg)
        }
        Command::SynthData { out, count, size, seed } => {
            let manifest = write_synthetic_dataset(&out, count, size, seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Desk => TrainConfig::desk(),
                Preset::Full => TrainConfig::default(),
            };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn train(config: &Path, resume: Option<&Path>, steps: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = TrainConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    } else if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    let manifest = match &cfg.manifest {
        Some(m) if m.is_relative() => base.join(m),
        Some(m) => m.clone(),
        None => bail!("config has no `manifest`; point it at an ndjson file of {{\"image\", \"mask\"}} records"),
    };
    let records = read_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let ds = Dataset::load(&records, cfg.resolution)?;

    let state = match resume {
        Some(path) => {
            let mut state = TrainState::from_checkpoint(Checkpoint::load(path)?)?;
            let mut expected = cfg.clone();
            expected.steps = state.config.steps;
            expected.checkpoint_every = state.config.checkpoint_every;
            expected.validate_every = state.config.validate_every;
            expected.output_dir = state.config.output_dir.clone();
            expected.manifest = state.config.manifest.clone();
            if expected != state.config {
                bail!("{} was written with a different config; only steps, cadences and paths may change on resume", path.display());
            }
            if cfg.steps < state.step {
                bail!("checkpoint is at step {} but the config asks for {} steps", state.step, cfg.steps);
            }
            state.config = cfg.clone();
            state
        }
        None => TrainState::new(cfg.clone())?,
    };
    let start = state.step;
    tracing::info!(steps = cfg.steps, from = start, images = ds.len(), "training");
    let report = train_loop(state, &ds, Some(&cfg.output_dir))?;
    if let Some(last) = report.records.last() {
        let n = report.records.len();
        println!(
            "step {}: total {:.5} (mean of last {} steps {:.5})",
            last.step,
            last.total,
            n.min(100),
            moving_average(&report.records, n, 100)
        );
    }
    for c in &report.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

fn evaluate(manifest: &Path, out: &Path, metrics: Vec<Metric>, lpips: Lpips, dilation: Option<usize>) -> Result<()> {
    let mut cfg = EvalConfig::default();
    if !metrics.is_empty() {
        cfg.metrics = metrics;
    }
    if let Some(d) = dilation {
        cfg.dilation = d;
    }
    let backend: Box<dyn PerceptualBackend> = match lpips {
        Lpips::None => Box::new(NoBackend),
        Lpips::Features => Box::new(FeatureLpips::default()),
    };
    let report = run_report_from_manifest(manifest, &cfg, backend.as_ref())?;
    report.save(out)?;
    if let Some(all) = report.group("All") {
        for (name, v) in &all.scores {
            match v {
                Some(v) => println!("{name}\t{v:.6}"),
                None => println!("{name}\tNA"),
            }
        }
    }
    Ok(())
}

fn manipulate(ckpt: &Path, exemplar: &Path, exemplar_mask: &Path, edited_mask: &Path, out: &Path, diag_dir: Option<&Path>) -> Result<()> {
    let model = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let y_b = load_rgb(exemplar)?;
    let y_a = load_mask(exemplar_mask)?;
    let x_a = load_mask(edited_mask)?;
    let opts = ManipulateOptions { diagnostics: diag_dir.is_some(), ..Default::default() };
    let result = model.manipulate(&y_b, &y_a, &x_a, opts)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    save_rgb(&result.output, out)?;
    if let (Some(dir), Some(d)) = (diag_dir, &result.diagnostics) {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("keypoints.json"), serde_json::to_string_pretty(&d.keypoints)?)?;
        for (i, m) in d.attention.iter().enumerate() {
            save_rgb(&RgbImage::from_mask(m), &dir.join(format!("attention_{i}.png")))?;
        }
        save_rgb(&warp_preview(&d.omega_s)?, &dir.join("omega_s.png"))?;
        save_mask(&result.mask, &dir.join("transported_mask.png"))?;
    }
    println!("{}", out.display());
    Ok(())
}

fn serve(cfg: ServiceConfig) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        transmask_service::serve(cfg, shutdown).await
    })?;
    Ok(())
}
