//! `endogede` command-line front end.
//!
//! Exit codes: 0 on success, 1 when inputs cannot be read or processed,
//! 2 on usage errors. Results are canonical JSON written to `--out` or
//! standard output; diagnostics go to standard error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use endogede_core::eval::{self, ate, depth_metrics, EvalReport, Scaling, Trajectory};
use endogede_core::io::{list_files, read_array, read_npy};
use endogede_core::mole::{routing_stats, ExpertUsage, MoLEAdapter};
use endogede_core::report::to_json;
use endogede_core::spectral::{allocate_experts, fit_block, AllocationPlan};
use endogede_core::synth::{gen_scene, LightMode, SceneConfig};
use endogede_core::train::{run_training, TrainConfig};

/// Histogram bins for the spectral density peak.
const DENSITY_BINS: usize = 100;
const ROUTE_SCHEMA: &str = "endogede-routing/1";

#[derive(Parser)]
#[command(name = "endogede", version, about = "Spectral expert allocation, depth evaluation and desk-scale training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an expert budget across blocks from their weight spectra.
    Allocate {
        /// Directory of NPY weight matrices, one per linear layer.
        #[arg(long)]
        weights: PathBuf,
        /// JSON manifest `{"blocks": [["layer.npy", ...], ...]}`.
        #[arg(long)]
        blocks: PathBuf,
        #[arg(long, default_value_t = 55)]
        experts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Depth metrics for matching PFM/NPY files in two directories.
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_DEPTH_CAP)]
        cap: f64,
        #[arg(long, default_value = "median")]
        scaling: Scaling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM trajectories.
    EvalPose {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic scene bundle.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x80", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, value_enum, default_value_t = Light::Fixed)]
        light: Light,
        #[arg(long, default_value_t = 0)]
        max_specular: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged optimisation on a synthetic scene.
    DemoTrain {
        /// JSON training configuration; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Noiseless expert usage of saved adapters over NPY token batches.
    RouteStats {
        /// One adapter directory, or a directory of adapter directories.
        #[arg(long)]
        adapters: PathBuf,
        /// Directory of `[tokens, d_in]` NPY batches.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Light {
    Fixed,
    Headlight,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size '{s}': {e}"));
    Ok((parse(h)?, parse(w)?))
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Deserialize)]
struct BlockManifest {
    blocks: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct FrameReport {
    pred: String,
    gt: String,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct DepthOutput {
    schema: &'static str,
    scaling: Scaling,
    frames: Vec<FrameReport>,
    /// Pixel-weighted over all frames.
    mean: EvalReport,
}

#[derive(Serialize)]
struct PoseOutput {
    schema: &'static str,
    associated: usize,
    ate: f64,
}

#[derive(Serialize)]
struct RouteOutput {
    schema: &'static str,
    adapters: Vec<String>,
    samples: Vec<String>,
    usage: Vec<ExpertUsage>,
}

fn emit(json: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, json)?;
            log::info!("wrote {}", path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn allocate(weights: &Path, blocks: &Path, experts: usize) -> CliResult<AllocationPlan> {
    let manifest: BlockManifest = serde_json::from_str(&std::fs::read_to_string(blocks)?)?;
    let mut fits = Vec::with_capacity(manifest.blocks.len());
    for (b, layers) in manifest.blocks.iter().enumerate() {
        let mats = layers
            .iter()
            .map(|l| read_npy(weights.join(l)).map_err(|e| format!("block {b}, layer {l}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        fits.push(fit_block(&mats, DENSITY_BINS).map_err(|e| format!("block {b}: {e}"))?);
    }
    let taus: Vec<f64> = fits.iter().map(|f| f.tau).collect();
    let mut plan = allocate_experts(&taus, experts)?;
    plan.fits = fits;
    Ok(plan)
}

fn eval_depth(pred: &Path, gt: &Path, cap: f64, scaling: Scaling) -> CliResult<DepthOutput> {
    let exts = ["pfm", "npy"];
    let (p, g) = (list_files(pred, &exts)?, list_files(gt, &exts)?);
    if p.len() != g.len() || p.is_empty() {
        return Err(format!("{} predicted and {} ground-truth depth maps", p.len(), g.len()).into());
    }
    let mut frames = Vec::with_capacity(p.len());
    for (pp, gp) in p.iter().zip(&g) {
        let report = depth_metrics(&read_array(pp)?, &read_array(gp)?, cap, scaling)
            .map_err(|e| format!("{}: {e}", file_name(pp)))?;
        frames.push(FrameReport {
            pred: file_name(pp),
            gt: file_name(gp),
            report,
        });
    }
    let mean = EvalReport::merge(&frames.iter().map(|f| f.report.clone()).collect::<Vec<_>>())?;
    Ok(DepthOutput {
        schema: eval::SCHEMA,
        scaling,
        frames,
        mean,
    })
}

fn adapter_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("manifest.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(format!("no adapter manifest under {}", root.display()).into());
    }
    Ok(dirs)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Allocate {
            weights,
            blocks,
            experts,
            out,
        } => emit(&to_json(&allocate(&weights, &blocks, experts)?)?, out.as_deref()),
        Command::EvalDepth {
            pred,
            gt,
            cap,
            scaling,
            out,
        } => emit(&to_json(&eval_depth(&pred, &gt, cap, scaling)?)?, out.as_deref()),
        Command::EvalPose { pred, gt, out } => {
            let (p, g) = (Trajectory::read_tum(&pred)?, Trajectory::read_tum(&gt)?);
            let output = PoseOutput {
                schema: eval::SCHEMA,
                associated: p.associate(&g).len(),
                ate: ate(&p, &g)?,
            };
            emit(&to_json(&output)?, out.as_deref())
        }
        Command::Synth {
            seed,
            frames,
            size: (height, width),
            light,
            max_specular,
            out,
        } => {
            let cfg = SceneConfig {
                height,
                width,
                frames,
                max_specular,
                light: match light {
                    Light::Fixed => LightMode::Fixed,
                    Light::Headlight => LightMode::Headlight,
                },
                ..Default::default()
            };
            gen_scene(seed, &cfg)?.write_dir(&out)?;
            log::info!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
        Command::DemoTrain { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => TrainConfig::desk(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            emit(&to_json(&run_training(&cfg)?)?, out.as_deref())
        }
        Command::RouteStats { adapters, data, out } => {
            let dirs = adapter_dirs(&adapters)?;
            let loaded = dirs.iter().map(MoLEAdapter::load).collect::<Result<Vec<_>, _>>()?;
            let files = list_files(&data, &["npy"])?;
            if files.is_empty() {
                return Err(format!("no NPY batches in {}", data.display()).into());
            }
            let batches = files.iter().map(read_npy).collect::<Result<Vec<_>, _>>()?;
            let output = RouteOutput {
                schema: ROUTE_SCHEMA,
                adapters: dirs.iter().map(|d| file_name(d)).collect(),
                samples: files.iter().map(|f| file_name(f)).collect(),
                usage: routing_stats(&loaded, &batches)?,
            };
            emit(&to_json(&output)?, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap prints usage and exits with status 2 on malformed arguments
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
