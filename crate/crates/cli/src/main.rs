use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use edgelift::cloud;
use edgelift::config::RunConfig;
use edgelift::dataset::{self, Calibration, TraceProfile};
use edgelift::eval::evaluate;
use edgelift::pipeline::{self, run_pipeline, PipelineParams, Sequence};
use edgelift::report::{self, write_detections, write_report};
use edgelift::synth::{self, generate_synthetic_scene, SynthConfig};

#[derive(Parser)]
#[command(name = "edgelift", version, about = "Edge 3D detection from 2D masks and LiDAR, with cloud offloading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the edge pipeline over a sequence and evaluate it.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Simulate the uplink with this bandwidth trace CSV.
        #[arg(long, conflicts_with = "server")]
        trace: Option<PathBuf>,
        /// Offload to a live detector at this address.
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Skip frames that arrived while an anchor was blocking.
        #[arg(long)]
        drop_late: bool,
    },
    /// Score label-format detections against ground-truth labels.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        iou: f64,
        /// Calibration used to read both label sets.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Also write eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic sequence with ground truth and a run config.
    Synth {
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Point noise, meters.
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
        /// Uplink profile for the generated trace: FCC-1, FCC-2, Belgium-1 or Belgium-2.
        #[arg(long, default_value = "FCC-1")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve precomputed cloud detections over TCP.
    Serve {
        #[arg(long)]
        bind: String,
        /// Cloud detections file, or a directory holding cloud.jsonl.
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, trace, server, out, drop_late } => run(&config, trace, server, &out, drop_late),
        Command::Eval { dets, labels, iou, calib, out } => eval(&dets, &labels, iou, calib.as_deref(), out.as_deref()),
        Command::Synth { frames, objects, seed, sigma, profile, out } => {
            synth(SynthConfig { frames, objects, seed, noise_sigma: sigma, ..SynthConfig::default() }, &profile, &out)
        }
        Command::Serve { bind, store, delay_ms } => serve(&bind, &store, delay_ms),
    }
}

fn run(config: &Path, trace: Option<PathBuf>, server: Option<String>, out: &Path, drop_late: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if trace.is_some() || server.is_some() {
        cfg.trace = trace;
        cfg.server = server;
    }
    cfg.scheduler.drop_late |= drop_late;
    cfg.validate()?;
    let seq = Sequence::load(&cfg.paths)?;
    let mut backend = pipeline::backend_from_config(&cfg)?;
    let output = run_pipeline(&seq, &PipelineParams::from(&cfg), &mut backend)?;
    let labels = pipeline::load_labels_for(&seq, &cfg.paths.labels)?;
    let report = evaluate(&output.detections, &labels, cfg.eval_iou)?;
    let report = write_report(&report, &output.ledger, out)?;
    let (width, height) = seq.frames.first().map_or((0, 0), |f| (f.instances.width, f.instances.height));
    write_detections(&output.detections, &seq.calib, width, height, &out.join(report::DETS_DIR))?;
    print!("{}", report::summary_text(&report, &output.ledger));
    Ok(())
}

fn eval(dets: &Path, labels: &Path, iou: f64, calib: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if !(iou > 0.0 && iou <= 1.0) {
        bail!("--iou must be in (0, 1], got {iou}");
    }
    let calib = match calib {
        Some(p) => dataset::load_calibration(p)?,
        None => Calibration::kitti_like(),
    };
    let d = pipeline::load_label_dir(dets, &calib)?;
    let l = pipeline::load_label_dir(labels, &calib)?;
    let report = evaluate(&d, &l, iou)?;
    if let Some(out) = out {
        write_report(&report, &[], out)?;
    }
    print!("{}", report::summary_text(&report, &[]));
    Ok(())
}

fn synth(cfg: SynthConfig, profile: &str, out: &Path) -> Result<()> {
    let Some(profile) = TraceProfile::by_name(profile) else {
        bail!("unknown trace profile {profile}");
    };
    let scene = generate_synthetic_scene(&cfg);
    synth::write_bundle(&scene, out)?;
    let seconds = (cfg.frames as f64 * 0.1).ceil() as usize + 60;
    std::fs::write(out.join("trace.csv"), dataset::format_bandwidth_trace(&profile.synthesize(seconds, cfg.seed)))?;
    let run_cfg = RunConfig { trace: Some("trace.csv".into()), seed: cfg.seed, ..RunConfig::default() };
    std::fs::write(out.join("run.toml"), run_cfg.to_toml())?;
    println!("wrote {} frames to {}", scene.frames.len(), out.display());
    Ok(())
}

fn serve(bind: &str, store: &Path, delay_ms: u64) -> Result<()> {
    let file = if store.is_dir() { store.join(synth::CLOUD_FILE) } else { store.to_owned() };
    let store = dataset::load_cloud_store(&file).with_context(|| format!("loading {}", file.display()))?;
    let handle = cloud::serve(bind, &store, Duration::from_millis(delay_ms))?;
    println!("serving {} frames on {}", store.len(), handle.local_addr());
    handle.wait();
    Ok(())
}
