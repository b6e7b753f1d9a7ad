//! Command-line harness: train the denoiser, inpaint single scenes with any
//! ablation arm, run the fixed benchmark, and run the modulator ablation.
//! Every command writes its resolved config next to its outputs and is
//! bit-reproducible from (config, seed).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use inpaint_core::bench::{self, Arm};
use inpaint_core::checkpoint::{self, TrainMeta};
use inpaint_core::config::RunConfig;
use inpaint_core::denoiser::DenoiserModel;
use inpaint_core::guidance::GuidanceError;
use inpaint_core::metrics::benchmark_suite;
use inpaint_core::ppm::{gray_to_rgb, write_ppm};
use inpaint_core::scene::{generate_scene, training_corpus, MaskMode, Scene};
use inpaint_core::schedule::NoiseSchedule;
use inpaint_core::tensor::Tensor;
use inpaint_core::train;

/// Output-root override; `--out` still wins when given.
const OUT_ROOT_ENV: &str = "INPAINT_OUT_ROOT";

const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "inpaint", about = "Toy diffusion inpainting lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's out_dir or "runs/<cmd>").
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and write a checkpoint plus the loss curve.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Inpaint scenes with a chosen arm; writes input/mask/output images.
    Inpaint {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ablation arm; defaults to the config's run flags.
        #[arg(long)]
        arm: Option<String>,
        /// Scene seed to inpaint.
        #[arg(long, default_value_t = 10000)]
        scene: u64,
        /// Mask mode for the scene.
        #[arg(long, default_value = "object-aligned")]
        mask: String,
        /// Emit per-step trace CSVs.
        #[arg(long)]
        trace: bool,
        /// Also write PNG copies of the images.
        #[arg(long)]
        png: bool,
    },
    /// Run all four arms over the 50-scene benchmark suite.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the guidance-modulator ablation over the benchmark suite.
    AblateModulator {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
enum AppError {
    Config(String),
    Checkpoint(String),
    Numeric(String),
    Io(String),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => EXIT_CONFIG,
            AppError::Checkpoint(_) => EXIT_CHECKPOINT,
            AppError::Numeric(_) => EXIT_NUMERIC,
            AppError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Checkpoint(m) | AppError::Numeric(m) | AppError::Io(m) => m,
        }
    }
}

impl From<inpaint_core::config::ConfigError> for AppError {
    fn from(e: inpaint_core::config::ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<inpaint_core::checkpoint::CheckpointError> for AppError {
    fn from(e: inpaint_core::checkpoint::CheckpointError) -> Self {
        AppError::Checkpoint(e.to_string())
    }
}

impl From<train::TrainError> for AppError {
    fn from(e: train::TrainError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<GuidanceError> for AppError {
    fn from(e: GuidanceError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Inpaint {
            common,
            checkpoint,
            arm,
            scene,
            mask,
            trace,
            png,
        } => cmd_inpaint(common, checkpoint, arm, scene, mask, trace, png),
        Command::Bench { common, checkpoint } => cmd_bench(common, checkpoint),
        Command::AblateModulator { common, checkpoint } => cmd_ablate(common, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

/// Loads the config (or defaults), applies the seed override, and resolves
/// the output directory.
fn setup(common: &CommonArgs, default_dir: &str) -> Result<(RunConfig, PathBuf), AppError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| {
            let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into());
            Path::new(&root).join(default_dir)
        });
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    Ok((cfg, out))
}

fn build_schedule(cfg: &RunConfig) -> Result<NoiseSchedule, AppError> {
    cfg.schedule
        .build()
        .map_err(|e| AppError::Config(e.to_string()))
}

fn cmd_train(common: CommonArgs) -> Result<(), AppError> {
    let (cfg, out) = setup(&common, "train")?;
    let sched = build_schedule(&cfg)?;
    let corpus = training_corpus(cfg.training.corpus_size);
    let mut model = DenoiserModel::init(cfg.denoiser.clone(), cfg.seed);
    let report = train::train(&mut model, &corpus, &sched, &cfg.training, cfg.seed)?;
    let meta = TrainMeta {
        seed: cfg.seed,
        train: cfg.training.clone(),
        schedule_t_total: cfg.schedule.t_total,
        final_loss: report.final_loss,
    };
    checkpoint::save(&out.join("checkpoint.json"), &model, &meta)?;
    std::fs::write(out.join("loss_curve.csv"), report.curve_csv())?;
    println!(
        "trained {} steps: loss {:.4} -> {:.4}; wrote {}",
        cfg.training.steps,
        report.initial_loss,
        report.final_loss,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<DenoiserModel, AppError> {
    let (model, meta) = checkpoint::load(path)?;
    if model.config != cfg.denoiser {
        return Err(AppError::Checkpoint(format!(
            "checkpoint model config {:?} does not match run config {:?}",
            model.config, cfg.denoiser
        )));
    }
    if meta.schedule_t_total != cfg.schedule.t_total {
        return Err(AppError::Checkpoint(format!(
            "checkpoint was trained with T = {}, run config has T = {}",
            meta.schedule_t_total, cfg.schedule.t_total
        )));
    }
    Ok(model)
}

fn write_images(
    out: &PathBuf,
    stem: &str,
    image: &Tensor,
    png: bool,
) -> Result<(), AppError> {
    write_ppm(&out.join(format!("{stem}.ppm")), image)?;
    if png {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let bytes: Vec<u8> = image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer dimensions always match");
        img.save(out.join(format!("{stem}.png")))
            .map_err(|e| AppError::Io(e.to_string()))?;
    }
    Ok(())
}

fn cmd_inpaint(
    common: CommonArgs,
    checkpoint_path: PathBuf,
    arm: Option<String>,
    scene_seed: u64,
    mask: String,
    trace: bool,
    png: bool,
) -> Result<(), AppError> {
    let (cfg, out) = setup(&common, "inpaint")?;
    let sched = build_schedule(&cfg)?;
    let arm = match arm {
        Some(label) => Arm::from_label(&label)
            .ok_or_else(|| AppError::Config(format!("unknown arm {label:?} (base|prino|degu|full)")))?,
        None => cfg.arm(),
    };
    let mode = match mask.as_str() {
        "object-aligned" => MaskMode::ObjectAligned,
        "freeform" => MaskMode::Freeform,
        other => {
            return Err(AppError::Config(format!(
                "unknown mask mode {other:?} (object-aligned|freeform)"
            )))
        }
    };
    let model = load_model(&checkpoint_path, &cfg)?;
    let scene: Scene = generate_scene(scene_seed, mode);
    let trace_on = trace || cfg.run.trace;

    let result = bench::run_scene_arm(
        &model,
        &scene,
        arm,
        &cfg.noise_opt,
        &cfg.guidance,
        &sched,
        cfg.seed,
    )?;

    write_images(&out, "input", &scene.image, png)?;
    write_images(&out, "mask", &gray_to_rgb(&scene.mask), png)?;
    write_images(&out, &format!("output_{}", arm.label()), &result.run.image, png)?;
    if trace_on {
        if let Some(prino) = &result.noise_opt {
            std::fs::write(out.join("noise_opt_trace.csv"), prino.trace_csv())?;
        }
        std::fs::write(out.join("guidance_trace.csv"), result.run.trace_csv())?;
    }
    println!(
        "inpainted scene {} with arm {}; wrote {}",
        scene_seed,
        arm.label(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(common: CommonArgs, checkpoint_path: PathBuf) -> Result<(), AppError> {
    let (cfg, out) = setup(&common, "bench")?;
    let sched = build_schedule(&cfg)?;
    let model = load_model(&checkpoint_path, &cfg)?;
    let suite = benchmark_suite();
    let results = bench::run_arms(
        &model,
        &suite,
        &Arm::ALL,
        &cfg.noise_opt,
        &cfg.guidance,
        &sched,
        cfg.seed,
    )?;
    std::fs::write(out.join("metrics.csv"), bench::metrics_csv(&results))?;
    std::fs::write(out.join("summary.csv"), bench::summary_csv(&results))?;
    for r in &results {
        println!(
            "{:<6} alignment {:.3}  boundary {:.5}  preference {:.5}  l2 {:.4}",
            r.label,
            r.report.alignment_accuracy,
            r.report.boundary_energy,
            r.report.preference_score,
            r.report.l2_to_truth
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(common: CommonArgs, checkpoint_path: PathBuf) -> Result<(), AppError> {
    let (cfg, out) = setup(&common, "ablate-modulator")?;
    let sched = build_schedule(&cfg)?;
    let model = load_model(&checkpoint_path, &cfg)?;
    let suite = benchmark_suite();
    let results = bench::ablate_modulator(
        &model,
        &suite,
        &bench::ablation_modulators(),
        &cfg.noise_opt,
        &cfg.guidance,
        &sched,
        cfg.seed,
    )?;
    std::fs::write(out.join("metrics.csv"), bench::metrics_csv(&results))?;
    std::fs::write(out.join("summary.csv"), bench::summary_csv(&results))?;
    for r in &results {
        println!(
            "{:<28} alignment {:.3}  composite {:.5}",
            r.label, r.report.alignment_accuracy, r.mean_composite
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
