mod sample;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use animdiff::driving::BlurParams;
use animdiff::frame::{load_bitmap_png, load_png};
use animdiff::metrics::{metrics_csv, pad_to_square, MetricRow};
use animdiff::pipeline::{list_pngs, preprocess, PreprocessOptions};
use animdiff::regional::{
    regional_stage_loss, DownsampleEmbedder, EmbeddingProvider, LossBreakdown, LossWeights,
    RegionKind, RegionMask, RegionalInputs,
};
use animdiff::scheduler::{max_snr_ratio_error, NoiseSchedule};

/// Diffusion animation toolkit: noise schedules, driving-signal
/// preprocessing, windowed sampling and image metrics.
#[derive(Debug, Parser)]
#[command(name = "animdiff", version)]
struct Cli {
    /// Seed for every random draw; overrides a `seed` entry in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suppress progress and summary output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the default and SNR-shifted noise schedules as CSV.
    Schedule(ScheduleArgs),
    /// Render pose maps with hand blur overlays, region masks and blur.csv.
    Preprocess(PreprocessArgs),
    /// Run windowed sampling with the analytic Gaussian denoiser.
    Sample(SampleArgs),
    /// Per-frame L1, PSNR and SSIM between two directories of PNGs.
    Metrics(MetricsArgs),
    /// Regional loss breakdown between a target and a predicted image.
    Losses(LossesArgs),
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Number of diffusion steps.
    #[arg(long = "T", value_parser = clap::value_parser!(u32).range(2..))]
    steps: u32,
    /// SNR scale factor in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Output directory; receives `default.csv` and `shifted.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    frames_dir: PathBuf,
    keypoints_json: PathBuf,
    out_dir: PathBuf,
    /// Speed (px/frame) mapped to full overlay saturation.
    #[arg(long, default_value_t = BlurParams::default().v_max)]
    v_max: f64,
    /// Sharpness score mapped to full overlay intensity.
    #[arg(long, default_value_t = BlurParams::default().s_max)]
    s_max: f64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    config: PathBuf,
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    dir_a: PathBuf,
    dir_b: PathBuf,
    out_csv: PathBuf,
    /// Compare frames as-is instead of padding them to squares first.
    #[arg(long)]
    no_pad: bool,
}

#[derive(Debug, Args)]
struct LossesArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    predicted: PathBuf,
    #[arg(long)]
    face_mask: Option<PathBuf>,
    #[arg(long)]
    left_hand_mask: Option<PathBuf>,
    #[arg(long)]
    right_hand_mask: Option<PathBuf>,
    /// Reference image for the face-identity term (needs --face-mask).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    w_face: f64,
    #[arg(long, default_value_t = 1.0)]
    w_hand: f64,
    #[arg(long, default_value_t = 1.0)]
    w_cos: f64,
    /// Also write the breakdown as a one-row CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation that clap cannot detect; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub(crate) struct Ctx {
    pub seed: Option<u64>,
    pub workers: usize,
    pub quiet: bool,
}

impl Ctx {
    pub fn say(&self, msg: impl fmt::Display) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        workers: cli.workers.unwrap_or(0),
        quiet: cli.quiet,
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match cli.command {
        Command::Schedule(a) => cmd_schedule(&ctx, a),
        Command::Preprocess(a) => cmd_preprocess(&ctx, a),
        Command::Sample(a) => sample::run(&ctx, &a.config, &a.out_dir),
        Command::Metrics(a) => cmd_metrics(&ctx, a),
        Command::Losses(a) => cmd_losses(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_schedule(ctx: &Ctx, a: ScheduleArgs) -> Result<()> {
    if !(a.gamma > 0.0 && a.gamma <= 1.0) {
        return Err(usage(format!("--gamma must be in (0, 1], got {}", a.gamma)));
    }
    let base = NoiseSchedule::linear(a.steps as usize)?;
    let shifted = base.shift_snr(a.gamma)?;
    create_dir(&a.out)?;
    base.write_csv(a.out.join("default.csv"))?;
    shifted.write_csv(a.out.join("shifted.csv"))?;
    let err = max_snr_ratio_error(&base, &shifted, a.gamma);
    ctx.say(format!("max relative snr ratio deviation: {err:.3e}"));
    if err.is_nan() || err > 1e-9 {
        bail!("snr ratio deviation {err:.3e} exceeds 1e-9");
    }
    Ok(())
}

fn cmd_preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<()> {
    let opts = PreprocessOptions {
        blur: BlurParams {
            v_max: a.v_max,
            s_max: a.s_max,
            ..BlurParams::default()
        },
        workers: ctx.workers,
        ..PreprocessOptions::default()
    };
    let summary = preprocess(&a.frames_dir, &a.keypoints_json, &a.out_dir, &opts)?;
    let valid: usize = summary
        .conditions
        .iter()
        .flatten()
        .filter(|c| c.valid)
        .count();
    ctx.say(format!(
        "{} frames, {} valid hand conditions, {} masks -> {}",
        summary.frames,
        valid,
        summary.masks_written,
        a.out_dir.display()
    ));
    Ok(())
}

fn file_names(paths: &[PathBuf]) -> BTreeSet<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

fn cmd_metrics(ctx: &Ctx, a: MetricsArgs) -> Result<()> {
    let left = list_pngs(&a.dir_a)?;
    let right = list_pngs(&a.dir_b)?;
    if left.is_empty() || right.is_empty() {
        return Err(usage(format!(
            "no PNG frames to compare ({} in {}, {} in {})",
            left.len(),
            a.dir_a.display(),
            right.len(),
            a.dir_b.display()
        )));
    }
    let (na, nb) = (file_names(&left), file_names(&right));
    if na != nb {
        let only_a: Vec<_> = na.difference(&nb).cloned().collect();
        let only_b: Vec<_> = nb.difference(&na).cloned().collect();
        bail!(
            "frame sets differ: only in {}: [{}]; only in {}: [{}]",
            a.dir_a.display(),
            only_a.join(", "),
            a.dir_b.display(),
            only_b.join(", ")
        );
    }
    let mut rows = Vec::with_capacity(left.len());
    for (name, (pa, pb)) in na.iter().zip(left.iter().zip(&right)) {
        let (mut fa, mut fb) = (load_png(pa)?, load_png(pb)?);
        if !a.no_pad {
            fa = pad_to_square(&fa);
            fb = pad_to_square(&fb);
        }
        let row = MetricRow::compute(name.clone(), &fa, &fb)
            .with_context(|| format!("comparing {name}"))?;
        rows.push(row);
    }
    let csv = metrics_csv(&rows);
    fs::write(&a.out_csv, &csv).with_context(|| format!("writing {}", a.out_csv.display()))?;
    if let Some(mean) = csv.lines().last() {
        ctx.say(format!("{} frames; {mean}", rows.len()));
    }
    Ok(())
}

fn load_mask(kind: RegionKind, path: &Option<PathBuf>) -> Result<Option<RegionMask>> {
    path.as_ref()
        .map(|p| Ok(RegionMask::new(kind, load_bitmap_png(p)?)))
        .transpose()
}

fn cmd_losses(ctx: &Ctx, a: LossesArgs) -> Result<()> {
    let target = load_png(&a.target)?;
    let predicted = load_png(&a.predicted)?;
    let face = load_mask(RegionKind::Face, &a.face_mask)?;
    let left = load_mask(RegionKind::LeftHand, &a.left_hand_mask)?;
    let right = load_mask(RegionKind::RightHand, &a.right_hand_mask)?;

    let embeddings = match (&a.reference, &face) {
        (Some(r), Some(mask)) => {
            let embedder = DownsampleEmbedder::default();
            let reference = load_png(r)?;
            Some((
                embedder.embed(&reference, mask)?,
                embedder.embed(&predicted, mask)?,
            ))
        }
        (Some(_), None) => return Err(usage("--reference needs --face-mask")),
        _ => None,
    };
    let inputs = RegionalInputs {
        target: &target,
        predicted: &predicted,
        face_mask: face.as_ref(),
        left_hand_mask: left.as_ref(),
        right_hand_mask: right.as_ref(),
        psi_ref: embeddings.as_ref().map(|e| &e.0),
        psi_pre: embeddings.as_ref().map(|e| &e.1),
    };
    let weights = LossWeights {
        face: a.w_face,
        hand: a.w_hand,
        cos: a.w_cos,
    };
    let loss = regional_stage_loss(&inputs, &weights)?;
    let frame = a
        .predicted
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let row = loss.csv_row(&frame);
    if let Some(out) = &a.out {
        fs::write(out, format!("{}\n{row}\n", LossBreakdown::CSV_HEADER))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    ctx.say(LossBreakdown::CSV_HEADER);
    ctx.say(&row);
    let skipped = loss.skipped();
    if !skipped.is_empty() {
        ctx.say(format!("skipped: {}", skipped.join(", ")));
    }
    Ok(())
}
