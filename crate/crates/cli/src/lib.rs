//! Command line and live gateway for the hydraulic arm simulator.

pub mod engine;
pub mod server;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hydrarm_core::datapipe::split;
use hydrarm_core::kinlearn::{evaluate, train};
use hydrarm_core::pipeline::{build_samples, load_run_dir, train_test, PipelineConfig};
use hydrarm_core::{
    make_coverage_scripts, Checkpoint, KinematicModel, ModelKind, PlantConfig, TrainConfig,
    TrajectoryScript,
};

use crate::engine::Engine;

#[derive(Debug, Parser)]
#[command(
    name = "hydrarm",
    version,
    about = "Hydraulic soft-arm simulator, data collection and learned kinematics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Play a valve script on the simulator and write the 10 Hz log as JSONL.
    Collect {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "HYDRARM_SEED", default_value_t = 0)]
        seed: u64,
        /// Add sensor and marker noise to the observations.
        #[arg(long)]
        noise: bool,
    },
    /// Write the data-collection script suite into a directory.
    Scripts {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "HYDRARM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train a forward (fk) or inverse (ik) model on every run log in a directory.
    Train {
        kind: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, env = "HYDRARM_SEED", default_value_t = 0)]
        seed: u64,
        /// Peak learning rate; defaults to the model kind's tuned value.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a model on the held-out part of a run directory.
    Eval {
        kind: ModelKind,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for histogram.csv and summary.json.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the live simulator behind HTTP and WebSocket endpoints.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "HYDRARM_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        fk: Option<PathBuf>,
        #[arg(long)]
        ik: Option<PathBuf>,
        /// Play this script on start-up.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Where POST /record writes its run files.
        #[arg(long, default_value = "runs")]
        record_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Collect {
            script,
            out,
            seed,
            noise,
        } => collect(&script, &out, seed, noise),
        Cmd::Scripts { out, seed } => scripts(&out, seed),
        Cmd::Train {
            kind,
            data,
            out,
            epochs,
            batch,
            seed,
            lr,
        } => {
            let mut tc = PipelineConfig::default().train_config(kind).clone();
            tc.epochs = epochs;
            tc.batch_size = batch;
            tc.seed = seed;
            if let Some(lr) = lr {
                tc.lr = lr;
            }
            train_model(kind, &data, &out, &tc)
        }
        Cmd::Eval {
            kind,
            model,
            data,
            report,
        } => eval_model(kind, &model, &data, &report),
        Cmd::Serve {
            port,
            seed,
            fk,
            ik,
            script,
            record_dir,
            host,
        } => {
            let cfg = PlantConfig::default().with_seed(seed);
            let script = script.map(|p| load_script(&p)).transpose()?;
            let mut engine = Engine::new(cfg, script.as_ref(), record_dir)?;
            if let Some(p) = fk {
                engine = engine.with_forward_model(load_model(&p, ModelKind::Fk)?);
            }
            let ik = ik.map(|p| load_model(&p, ModelKind::Ik)).transpose()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(SocketAddr::new(host, port), engine, ik))
        }
    }
}

fn load_script(path: &Path) -> Result<TrajectoryScript> {
    TrajectoryScript::load(path).with_context(|| format!("reading script {}", path.display()))
}

fn load_model(path: &Path, kind: ModelKind) -> Result<KinematicModel> {
    let model =
        KinematicModel::load(path).with_context(|| format!("reading model {}", path.display()))?;
    if model.kind() != kind {
        bail!(
            "model kind mismatch: {} holds a {} model, expected {kind}",
            path.display(),
            model.kind()
        );
    }
    Ok(model)
}

pub fn collect(script: &Path, out: &Path, seed: u64, noise: bool) -> Result<()> {
    let script = load_script(script)?;
    let mut cfg = PlantConfig::default().with_seed(seed);
    if !noise {
        cfg = cfg.noiseless();
    }
    let log = hydrarm_core::plant::run_scripted(&cfg, &script)?;
    log.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("{} rows -> {}", log.len(), out.display());
    Ok(())
}

pub fn scripts(out: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let suite = make_coverage_scripts(seed)?;
    for (i, s) in suite.iter().enumerate() {
        let path = out.join(format!("run_{i:02}.json"));
        s.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let minutes: f64 = suite.iter().map(TrajectoryScript::duration).sum::<f64>() / 60.0;
    println!(
        "{} scripts, {minutes:.1} min -> {}",
        suite.len(),
        out.display()
    );
    Ok(())
}

pub fn train_model(kind: ModelKind, data: &Path, out: &Path, tc: &TrainConfig) -> Result<()> {
    let pc = PipelineConfig::default();
    let logs = load_run_dir(data).with_context(|| format!("reading runs in {}", data.display()))?;
    let samples = build_samples(kind, &logs, &pc.window, &pc.norm)?;
    let (tr, _) = train_test(&samples, tc)?;
    let ckpt = train(kind, &tr, tc, &pc.norm, &pc.window)?;
    ckpt.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{kind}: {} training samples, {} epochs, final loss {:.3e} -> {}",
        tr.len(),
        tc.epochs,
        ckpt.loss_history.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Rebuilds the held-out split from the checkpoint's seed and reports on it.
pub fn eval_model(kind: ModelKind, model: &Path, data: &Path, report: &Path) -> Result<()> {
    let ckpt =
        Checkpoint::load(model).with_context(|| format!("reading model {}", model.display()))?;
    let m = KinematicModel::from_checkpoint(&ckpt)?;
    if m.kind() != kind {
        bail!(
            "model kind mismatch: {} holds a {} model, asked to evaluate {kind}",
            model.display(),
            m.kind()
        );
    }
    let window = m.window().cloned().unwrap_or_default();
    let logs = load_run_dir(data).with_context(|| format!("reading runs in {}", data.display()))?;
    let samples = build_samples(kind, &logs, &window, m.norm())?;
    let (_, test) = split(&samples, TrainConfig::default().split, ckpt.seed)?;
    let r = evaluate(&m, &test)?;
    r.write(report)
        .with_context(|| format!("writing report to {}", report.display()))?;
    let s = &r.summary;
    println!(
        "{kind}: {} test samples, median {:.3} {}, {:.1}% below {} {} -> {}",
        s.samples,
        s.median,
        s.unit,
        100.0 * s.fraction_below,
        s.threshold,
        s.unit,
        report.display()
    );
    Ok(())
}

pub async fn serve(addr: SocketAddr, engine: Engine, ik: Option<KinematicModel>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let (app, _loop) = server::start(engine, ik)?;
    println!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
