use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidarflow::config::RunConfig;
use lidarflow::eval::{eval_l1, infer, ModelPredictor};
use lidarflow::formats::{flo, rimg};
use lidarflow::gradcheck::{end_to_end, GradCheckConfig};
use lidarflow::kitti::{self, FrameSource, SequenceId};
use lidarflow::projection::project_cloud;
use lidarflow::train::{run_phase, EpochStats};
use lidarflow::{render, synthetic, Checkpoint, Error, FlowModel, ModelConfig, Phase, RangeImage};

#[derive(Parser)]
#[command(
    name = "lidarflow",
    version,
    about = "Unsupervised optical flow for LiDAR range images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command; flags override the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// KITTI odometry root containing `sequences/`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Upper vertical field of view, degrees.
    #[arg(long, allow_hyphen_values = true)]
    fov_up: Option<f64>,
    /// Lower vertical field of view, degrees (negative below the horizon).
    #[arg(long, allow_hyphen_values = true)]
    fov_down: Option<f64>,
    /// Meters; ranges beyond it are dropped and it normalizes ranges to [0, 1].
    #[arg(long)]
    max_range: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence split as TRAIN:VAL:TEST, e.g. 0-15:16-18:19-21.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Project a Velodyne scan to a range image.
    Project {
        /// `.bin` scan.
        input: PathBuf,
        /// `.rimg` output.
        #[arg(long)]
        out: PathBuf,
        /// Also write a grayscale `.pgm` rendering.
        #[arg(long)]
        render: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train from scratch on the training split.
    Train {
        /// Directory for per-epoch and best checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of fresh weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a trained checkpoint with the masked loss.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate flow between two frames (`.rimg` or `.bin`).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        frame1: PathBuf,
        frame2: PathBuf,
        /// `.flo` output.
        #[arg(long)]
        out: PathBuf,
        /// Also write a color-coded `.ppm` rendering.
        #[arg(long)]
        render: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction L1 on the test split, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate at most this many triplets.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the end-to-end loss gradient.
    Gradcheck {
        /// Fraction of parameters to probe.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check the full-width network instead of the narrow one.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Quick invariant checks; exits nonzero on any failure.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic scan sequence in the KITTI odometry layout.
    SynthKitti {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: u8,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        /// Forward motion per frame, meters.
        #[arg(long, default_value_t = 0.8)]
        advance: f32,
        #[command(flatten)]
        common: Common,
    },
}

fn run_config(common: &Common, phase: Phase) -> lidarflow::Result<RunConfig> {
    let mut c = RunConfig::for_phase(phase);
    if let Some(path) = &common.config {
        c.apply_file(path)?;
    }
    let mut set = |key: &str, value: Option<String>| match value {
        Some(v) => c.set(key, &v),
        None => Ok(()),
    };
    set("width", common.width.map(|v| v.to_string()))?;
    set("height", common.height.map(|v| v.to_string()))?;
    set("fov_up", common.fov_up.map(|v| v.to_string()))?;
    set("fov_down", common.fov_down.map(|v| v.to_string()))?;
    set("max_range", common.max_range.map(|v| v.to_string()))?;
    set("seed", common.seed.map(|v| v.to_string()))?;
    set("split", common.split.clone())?;
    if let Some(root) = &common.data_root {
        c.data_root = Some(root.clone());
    }
    c.validate()?;
    Ok(c)
}

fn data_root(c: &RunConfig) -> lidarflow::Result<&Path> {
    c.data_root
        .as_deref()
        .ok_or_else(|| Error::Config("no data root; pass --data-root or set data_root".into()))
}

fn load_frame(path: &Path, c: &RunConfig) -> lidarflow::Result<RangeImage> {
    if path.extension().is_some_and(|e| e == "bin") {
        project_cloud(&kitti::load_velodyne_bin(path)?, &c.projection)
    } else {
        rimg::read(path)
    }
}

fn write(path: &Path, bytes: &[u8]) -> lidarflow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_epoch(s: &EpochStats) {
    println!(
        "epoch {:>3}  lr {:.3e}  loss {:.6}  validation {:.6}{}",
        s.epoch + 1,
        s.lr,
        s.train_loss,
        s.validation_loss,
        if s.improved { "  *" } else { "" }
    );
}

fn train_command(
    common: &Common,
    phase: Phase,
    out: &Path,
    checkpoint: Option<&Path>,
) -> lidarflow::Result<()> {
    let mut c = run_config(common, phase)?;
    c.train.checkpoint_dir = Some(out.to_path_buf());
    let start = match checkpoint {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let model_config = start.as_ref().map_or(c.model.clone(), |s| s.model.clone());
    let model = FlowModel::new(model_config)?;
    let source = FrameSource::new(data_root(&c)?, c.projection)?;
    let sets = kitti::discover(data_root(&c)?, &c.split)?;
    let multiple = model.config().size_multiple();
    let train_set = source.dataset(&sets.train, multiple)?;
    let val_set = source.dataset(&sets.val, multiple)?;
    println!(
        "{} on {} pairs, validating on {}",
        phase.name(),
        train_set.len(),
        val_set.len()
    );
    let start = start.unwrap_or_else(|| {
        Checkpoint::new(
            model.init_params(c.train.seed),
            model.config().clone(),
            Phase::Train,
            c.train.initial_lr,
        )
    });
    let validation = (!val_set.is_empty()).then_some(&val_set);
    let report = run_phase(&model, &train_set, validation, &c.train, start, print_epoch)?;
    let last = out.join(format!("{}-last.lfck", phase.name()));
    report.checkpoint.save(&last)?;
    println!("wrote {}", last.display());
    Ok(())
}

fn gradcheck_command(
    common: &Common,
    fraction: f64,
    tolerance: f64,
    full: bool,
) -> lidarflow::Result<bool> {
    let c = run_config(common, Phase::Train)?;
    let config = if full {
        ModelConfig::default()
    } else {
        ModelConfig::narrow()
    };
    let model = FlowModel::new(config)?;
    let report = end_to_end(&model, fraction, c.train.seed, GradCheckConfig::default())?;
    let worst = report.worst().expect("at least one probe");
    println!(
        "probed {} parameters; max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.len(),
        worst.rel_error,
        worst.name,
        worst.index,
        worst.analytic,
        worst.numeric
    );
    Ok(report.passes(tolerance))
}

fn selftest(common: &Common) -> lidarflow::Result<bool> {
    let c = run_config(common, Phase::Train)?;
    let mut ok = true;
    let mut report = |name: &str, pass: bool| {
        println!("{} {name}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    let p = lidarflow::ProjectionConfig::default();
    report(
        "projection of (1,0,0) lands at u=512, v=6",
        p.pixel_of(&lidarflow::Point::new(1.0, 0.0, 0.0)) == Some((512, 6)),
    );
    let img = lidarflow::Tensor::from_fn(lidarflow::Shape::new(1, 1, 8, 8), |_, _, y, x| {
        (y * 8 + x) as f32
    });
    let warped = lidarflow::kernels::backwarp_forward(
        &img,
        &lidarflow::Tensor::zeros(lidarflow::Shape::new(1, 2, 8, 8)),
    )?;
    report("zero-flow warp is the identity", warped == img);
    let model = FlowModel::new(ModelConfig::default())?;
    let store = model.init_params(c.train.seed);
    let n = store.param_count();
    report(
        &format!("parameter count {n} within [2.0M, 2.5M]"),
        (2_000_000..=2_500_000).contains(&n),
    );
    let ck = Checkpoint::new(store, model.config().clone(), Phase::Train, 1e-4);
    let bytes = ck.encode()?;
    let back = Checkpoint::decode(&bytes, "selftest")?;
    report(
        "checkpoint round trip is byte-identical",
        back.encode()? == bytes,
    );
    Ok(ok)
}

fn run(cli: Cli) -> lidarflow::Result<bool> {
    match cli.command {
        Command::Project {
            input,
            out,
            render: pgm,
            common,
        } => {
            let c = run_config(&common, Phase::Train)?;
            let img = project_cloud(&kitti::load_velodyne_bin(&input)?, &c.projection)?;
            rimg::write(&out, &img)?;
            if let Some(p) = pgm {
                write(&p, &render::range_pgm(&img, c.projection.max_range))?;
            }
            println!(
                "{}x{} image, {:.1}% occupied",
                img.height(),
                img.width(),
                100.0 * img.occupancy_fraction()
            );
        }
        Command::Train {
            out,
            checkpoint,
            common,
        } => train_command(&common, Phase::Train, &out, checkpoint.as_deref())?,
        Command::Finetune {
            checkpoint,
            out,
            common,
        } => train_command(&common, Phase::Finetune, &out, Some(&checkpoint))?,
        Command::Infer {
            checkpoint,
            frame1,
            frame2,
            out,
            render: ppm,
            common,
        } => {
            let c = run_config(&common, Phase::Train)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = FlowModel::new(ck.model.clone())?;
            let predictor = ModelPredictor {
                model: &model,
                params: &ck.params,
            };
            let a = load_frame(&frame1, &c)?;
            let b = load_frame(&frame2, &c)?;
            let flow = infer(&predictor, &a, &b, &c.projection)?;
            flo::write(&out, &flow)?;
            if let Some(p) = ppm {
                write(&p, &render::flow_ppm(&flow, None))?;
            }
            let (u, v) = flow.mean_over(Some(a.occupancy()));
            println!("mean flow over occupied pixels: u {u:.4}, v {v:.4}");
        }
        Command::Eval {
            checkpoint,
            out,
            limit,
            common,
        } => {
            let c = run_config(&common, Phase::Train)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = FlowModel::new(ck.model.clone())?;
            let predictor = ModelPredictor {
                model: &model,
                params: &ck.params,
            };
            let source = FrameSource::new(data_root(&c)?, c.projection)?;
            let mut test = kitti::discover(data_root(&c)?, &c.split)?.test;
            if let Some(n) = limit {
                test.truncate(n);
            }
            let pairs = source.pairs(&test)?;
            let report = eval_l1(&predictor, &pairs, &c.projection, ck.params.param_count())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(p) => write(&p, json.as_bytes())?,
                None => println!("{json}"),
            }
            log::info!(
                "mean L1 {:.4} m vs identity {:.4} m",
                report.mean_l1,
                report.baseline_mean_l1
            );
        }
        Command::Gradcheck {
            fraction,
            tolerance,
            full,
            common,
        } => return gradcheck_command(&common, fraction, tolerance, full),
        Command::Selftest { common } => return selftest(&common),
        Command::SynthKitti {
            out,
            sequence,
            frames,
            advance,
            common,
        } => {
            let c = run_config(&common, Phase::Train)?;
            let dir = kitti::sequence_dir(&out, SequenceId(sequence));
            for i in 0..frames {
                let scan = synthetic::street_scan(advance * i as f32, c.train.seed);
                write(
                    &dir.join(format!("{i:06}.bin")),
                    &synthetic::encode_velodyne(&scan),
                )?;
            }
            println!("wrote {frames} scans to {}", dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
