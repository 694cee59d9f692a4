use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nhp_core::field::Ablation;
use nhp_core::gradsuite;
use nhp_core::imaging::save_gray_png;
use nhp_core::synth::{
    generate_captures, read_dataset, subject_seeds, write_dataset, CaptureConfig, CaptureSet,
    RING_TARGET,
};
use nhp_core::train::{
    evaluate, render_frame, run_ablation, write_ablation_csv, Checkpoint, Precision, Protocol,
    TrainConfig, Trainer,
};
use nhp_core::tensor::Real;
use nhp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nhp", version, about = "Generalizable human-performer radiance fields")]
struct Cli {
    /// Worker threads for data generation and rendering; overrides
    /// NHP_THREADS. Training itself is single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Render one frame of a subject to PNG.
    Render(RenderArgs),
    /// Score a checkpoint under an evaluation protocol.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train every ablation variant with the same seed and data.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant label such as `Sk+Px+T+MV`.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

impl TrainOverrides {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(label) = &self.ablation {
            cfg.model.ablation = Ablation::parse(label)?;
        }
        let t = &mut cfg.train;
        t.steps = self.steps.unwrap_or(t.steps);
        t.seed = self.seed.unwrap_or(t.seed);
        t.rays = self.rays.unwrap_or(t.rays);
        t.samples = self.samples.unwrap_or(t.samples);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (its config is used; --steps may
    /// raise the step target).
    #[arg(long, conflicts_with_all = ["config", "ablation", "seed", "rays", "samples"])]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "s00")]
    subject: String,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Dataset camera to render from.
    #[arg(long, conflicts_with = "azimuth")]
    view: Option<usize>,
    /// Render from camera 0 carried this many degrees around the body.
    #[arg(long, allow_negative_numbers = true)]
    azimuth: Option<f64>,
    /// Samples per ray (default: the checkpoint's training setting).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the accumulated opacity as a grayscale PNG.
    #[arg(long)]
    alpha: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// pose, identity or seen.
    #[arg(long, default_value = "pose")]
    protocol: Protocol,
    /// Per-image scores; printed to stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variant labels (default: all six).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated protocols.
    #[arg(long, value_delimiter = ',', default_value = "identity,pose")]
    protocols: Vec<Protocol>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("NHP_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Error::invalid(format!("NHP_THREADS must be a count, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let Some(n) = flag.or(from_env) else {
        return Ok(());
    };
    if n == 0 {
        return Err(Error::invalid("thread count must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = CaptureConfig {
        width: a.resolution,
        height: a.resolution,
        frames: a.frames,
        views: a.views,
        ..CaptureConfig::default()
    };
    let set = generate_captures(&subject_seeds(a.seed, a.subjects), &cfg)?;
    write_dataset(&set, &a.out)?;
    log::info!(
        "wrote {} subjects × {} frames × {} views to {}",
        a.subjects,
        a.frames,
        a.views,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::<f64>::load(path)?;
            if let Some(steps) = a.overrides.steps {
                ckpt.config.train.steps = steps;
            }
            let data = read_dataset(&a.data)?;
            match ckpt.config.train.precision {
                Precision::F32 => train_from(Trainer::<f32>::resume(ckpt.cast(), &data)?, &a.out),
                Precision::F64 => train_from(Trainer::<f64>::resume(ckpt, &data)?, &a.out),
            }
        }
        None => {
            let cfg = a.overrides.config()?;
            let data = read_dataset(&a.data)?;
            match cfg.train.precision {
                Precision::F32 => train_from(Trainer::<f32>::new(cfg, &data)?, &a.out),
                Precision::F64 => train_from(Trainer::<f64>::new(cfg, &data)?, &a.out),
            }
        }
    }
}

fn train_from<T: Real>(mut trainer: Trainer<'_, T>, out: &Path) -> Result<()> {
    log::info!(
        "training {} from step {} to {}",
        trainer.cfg.model.ablation.label(),
        trainer.step_count(),
        trainer.cfg.train.steps
    );
    trainer.run(|_| {})?;
    trainer.checkpoint().save(out)?;
    log::info!("saved {}", out.display());
    Ok(())
}

/// Any checkpoint as evaluation weights.
fn load_for_eval(path: &Path) -> Result<Checkpoint<f32>> {
    Ok(Checkpoint::<f64>::load(path)?.cast())
}

fn render(a: RenderArgs) -> Result<()> {
    let ckpt = load_for_eval(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let cfg = &ckpt.config;
    let subject = data.subject(&a.subject)?;
    if a.frame >= subject.frames.len() {
        return Err(Error::invalid(format!(
            "frame {} out of range (clip has {})",
            a.frame,
            subject.frames.len()
        )));
    }
    let cam = camera_for(&data, a.view, a.azimuth)?;
    let samples = a.samples.unwrap_or(cfg.train.samples);
    let out = render_frame(&ckpt.model()?, &ckpt.store, cfg, &data, subject, a.frame, &cam, samples)?;
    out.image.save_png(&a.out)?;
    if let Some(path) = &a.alpha {
        save_gray_png(cam.width, cam.height, &out.alpha, path)?;
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn camera_for(data: &CaptureSet, view: Option<usize>, azimuth: Option<f64>) -> Result<nhp_core::geometry::Camera> {
    let base = |v: usize| {
        data.cameras
            .get(v)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("camera {v} not in dataset ({} cameras)", data.cameras.len())))
    };
    match (view, azimuth) {
        (_, Some(deg)) => base(0)?.orbited(RING_TARGET, deg.to_radians()),
        (Some(v), None) => base(v),
        (None, None) => base(0),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_for_eval(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let report = evaluate(&ckpt.model()?, &ckpt.store, &ckpt.config, &data, a.protocol)?;
    match &a.csv {
        Some(path) => report.write_csv(BufWriter::new(create(path)?))?,
        None => report.write_csv(io::stdout().lock())?,
    }
    log::info!(
        "{}: {} images, PSNR {:.2} dB (crop {:.2}), SSIM {:.4}; mean-color baseline {:.2} dB, gray {:.2} dB",
        a.protocol.name(),
        report.rows.len(),
        report.mean_psnr(),
        report.mean_crop_psnr(),
        report.mean_ssim(),
        report.mean_color_baseline(),
        report.mean_gray_baseline()
    );
    if !report.all_finite() {
        return Err(Error::NonFinite("rendered images contain non-finite pixels".into()));
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = gradsuite::full_suite(a.seed)?;
    let mut out = io::stdout().lock();
    let mut failed = 0;
    for c in &cases {
        let ok = c.passes();
        failed += usize::from(!ok);
        writeln!(
            out,
            "{} {:<24} max rel {:.2e} (tol {:.0e}) over {} entries, {} kinks skipped",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.checked,
            c.report.skipped.len()
        )
        .map_err(|e| Error::io("writing to stdout", e))?;
    }
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} of {} gradient checks failed", cases.len())));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.overrides.config()?;
    let variants = if a.variants.is_empty() {
        Ablation::VARIANTS.to_vec()
    } else {
        a.variants.iter().map(|l| Ablation::parse(l)).collect::<Result<_>>()?
    };
    let data = read_dataset(&a.data)?;
    let rows = run_ablation(&cfg, &data, &variants, &a.protocols, |v, r| {
        if cfg.train.log_every > 0 && r.step % cfg.train.log_every == 0 {
            log::debug!("{} step {} loss {:.5}", v.label(), r.step, r.loss);
        }
    })?;
    write_ablation_csv(&rows, BufWriter::new(create(&a.out)?))?;
    for r in &rows {
        log::info!("{:<12} {:<8} PSNR {:.2} dB", r.variant.label(), r.protocol.name(), r.psnr);
    }
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}
