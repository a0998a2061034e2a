use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polarwater::features::FeatureSet;
use polarwater::pipeline::{self, PipelineConfig, MANIFEST_FILE};
use polarwater::Error;
use serde_json::{json, Value};

/// Water-hazard detection from a polarized stereo camera.
#[derive(Parser)]
#[command(name = "polarwater", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured feature set.
    #[arg(long, value_parser = parse_feature_set)]
    feature_set: Option<FeatureSet>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a dataset spec.
    Synth {
        /// Dataset spec (TOML).
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a manifest for a directory with `images/` and optional `masks/`.
    Import {
        /// Dataset directory; the manifest is written into it.
        dir: PathBuf,
        /// Every n-th frame goes to the test split.
        #[arg(long, default_value_t = 2)]
        test_every: usize,
        #[arg(long)]
        focal_length: Option<f64>,
        #[arg(long)]
        baseline: Option<f64>,
        #[arg(long)]
        height: Option<f64>,
    },
    /// Train the water and not-water models.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify the test frames.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the trained models.
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against the truth masks.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `detect`.
        #[arg(long)]
        detections: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the sky-polarization and water-reflection model curves.
    Curves {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default pipeline configuration.
    Config,
}

fn parse_feature_set(s: &str) -> Result<FeatureSet, String> {
    FeatureSet::parse(s).ok_or_else(|| format!("unknown feature set `{s}`"))
}

fn load_config(a: &ConfigArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.feature_set {
        cfg.feature_set = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn import(dir: &Path, test_every: usize, f: Option<f64>, b: Option<f64>, h: Option<f64>) -> Result<Value, Error> {
    let mut manifest = pipeline::import_directory(dir, None, test_every)?;
    let cam = &mut manifest.camera;
    cam.focal_length = f.unwrap_or(cam.focal_length);
    cam.baseline = b.unwrap_or(cam.baseline);
    cam.camera_height = h.unwrap_or(cam.camera_height);
    manifest.validate()?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_toml()).map_err(|source| Error::Io { path, source })?;
    Ok(json!({ "frames": manifest.frames.len() }))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn run(cli: Cli) -> Result<Value, Error> {
    match cli.command {
        Command::Synth { spec, out } => {
            let m = pipeline::cmd_synth(&spec, &out)?;
            Ok(json!({ "frames": m.frames.len(), "manifest": out.join(MANIFEST_FILE) }))
        }
        Command::Import {
            dir,
            test_every,
            focal_length,
            baseline,
            height,
        } => import(&dir, test_every, focal_length, baseline, height),
        Command::Train { manifest, cfg, out } => {
            let cfg = load_config(&cfg)?;
            Ok(to_value(&pipeline::cmd_train(&manifest, &cfg, &out)?))
        }
        Command::Detect {
            manifest,
            models,
            cfg,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let s = pipeline::cmd_detect(&manifest, &models, &cfg, &out)?;
            Ok(json!({ "frames": s.frames.len(), "skipped": s.skipped() }))
        }
        Command::Eval {
            manifest,
            detections,
            cfg,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let s = pipeline::cmd_eval(&manifest, &detections, &cfg, &out)?;
            Ok(json!({ "frames": s.frames, "skipped": s.skipped, "pooled": s.pooled, "mean": s.mean }))
        }
        Command::Curves { out } => {
            let files = pipeline::cmd_curves(&out)?;
            Ok(json!({ "files": files }))
        }
        Command::Config => {
            print!("{}", PipelineConfig::default().to_toml());
            Ok(Value::Null)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": { "kind": "threads", "message": e.to_string() } }));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
