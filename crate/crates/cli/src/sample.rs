//! `animdiff sample`: end-to-end windowed denoising driven by a flat config.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use animdiff::config::{manifest, KeyValues};
use animdiff::frame::save_png;
use animdiff::sampler::{
    gaussian_noise, initial_reference_noise, prompt_travel_denoise_traced, ConditionBundle,
    GaussianDenoiser, OffsetPolicy, SamplerKind, TravelConfig,
};
use animdiff::scheduler::{uniform_ladder, NoiseSchedule};
use animdiff::FrameSequence;

use crate::{usage, Ctx};

const KEYS: &[&str] = &[
    "denoiser",
    "mu",
    "sigma",
    "frames",
    "height",
    "width",
    "window",
    "stride",
    "omega",
    "gamma",
    "steps",
    "seed",
    "timesteps",
    "sampler",
    "start",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Start {
    /// Fully diffused reference latent (filled with the data mean).
    Reference,
    Gaussian,
}

#[derive(Debug, Clone)]
struct SampleConfig {
    mu: Vec<f64>,
    sigma: f64,
    frames: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    omega: f64,
    gamma: f64,
    steps: usize,
    seed: u64,
    timesteps: usize,
    sampler: SamplerKind,
    start: Start,
}

impl SampleConfig {
    fn from_kv(kv: &KeyValues, seed_override: Option<u64>) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let denoiser: String = kv.require("denoiser")?;
        if denoiser != "analytic-gaussian" {
            bail!("field `denoiser`: only `analytic-gaussian` is available, got `{denoiser}`");
        }
        let seed = match seed_override {
            Some(s) => s,
            None => kv.require("seed")?,
        };
        let sampler = match kv.get_or("sampler", "ddim".to_string())?.as_str() {
            "ddim" => SamplerKind::Ddim,
            "ddpm" => SamplerKind::Ddpm,
            other => bail!("field `sampler`: expected `ddim` or `ddpm`, got `{other}`"),
        };
        let start = match kv.get_or("start", "reference".to_string())?.as_str() {
            "reference" => Start::Reference,
            "gaussian" => Start::Gaussian,
            other => bail!("field `start`: expected `reference` or `gaussian`, got `{other}`"),
        };
        let cfg = Self {
            mu: kv.require_list("mu")?,
            sigma: kv.require("sigma")?,
            frames: kv.require("frames")?,
            height: kv.require("height")?,
            width: kv.require("width")?,
            window: kv.get_or("window", 16)?,
            stride: kv.get_or("stride", 8)?,
            omega: kv.get_or("omega", 0.0)?,
            gamma: kv.get_or("gamma", 1.0)?,
            steps: kv.get_or("steps", 50)?,
            seed,
            timesteps: kv.get_or("timesteps", 999)?,
            sampler,
            start,
        };
        for (name, v) in [
            ("frames", cfg.frames),
            ("height", cfg.height),
            ("width", cfg.width),
            ("window", cfg.window),
            ("stride", cfg.stride),
        ] {
            if v == 0 {
                bail!("field `{name}` must be positive");
            }
        }
        if !cfg.omega.is_finite() {
            bail!("field `omega` must be finite");
        }
        Ok(cfg)
    }

    fn manifest_entries(&self) -> Vec<(String, String)> {
        let mu: Vec<String> = self.mu.iter().map(f64::to_string).collect();
        vec![
            ("denoiser", "analytic-gaussian".to_string()),
            ("mu", mu.join(",")),
            ("sigma", self.sigma.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("omega", self.omega.to_string()),
            ("gamma", self.gamma.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("timesteps", self.timesteps.to_string()),
            (
                "sampler",
                match self.sampler {
                    SamplerKind::Ddim => "ddim",
                    SamplerKind::Ddpm => "ddpm",
                }
                .to_string(),
            ),
            (
                "start",
                match self.start {
                    Start::Reference => "reference",
                    Start::Gaussian => "gaussian",
                }
                .to_string(),
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Per-channel sample mean and (population) variance over frames and pixels.
pub(crate) fn channel_moments(x: &FrameSequence) -> Vec<(f64, f64)> {
    (0..x.len_of(Axis(3)))
        .map(|c| {
            let lane = x.index_axis(Axis(3), c);
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

/// Lays the channels of one frame side by side as a grayscale image, mapping
/// `[lo, hi]` to `[0, 1]`.
fn panel(frame: ndarray::ArrayView3<'_, f64>, lo: f64, hi: f64) -> Array3<f64> {
    let (h, w, c) = frame.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    Array3::from_shape_fn((h, w * c, 1), |(y, x, _)| {
        (frame[[y, x % w, x / w]] - lo) / span
    })
}

pub(crate) fn run(ctx: &Ctx, config: &Path, out_dir: &Path) -> Result<()> {
    let kv = KeyValues::load(config).map_err(|e| usage(e.to_string()))?;
    let cfg = SampleConfig::from_kv(&kv, ctx.seed)
        .with_context(|| format!("invalid config {}", config.display()))?;

    let mut sched = NoiseSchedule::linear(cfg.timesteps).context("field `timesteps`")?;
    if cfg.gamma != 1.0 {
        sched = sched.shift_snr(cfg.gamma).context("field `gamma`")?;
    }
    let ladder = uniform_ladder(cfg.timesteps, cfg.steps).context("field `steps`")?;
    let denoiser = GaussianDenoiser::new(cfg.mu.clone(), cfg.sigma, sched.clone())?;
    let channels = cfg.mu.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_start = match cfg.start {
        Start::Reference => {
            let latent =
                Array3::from_shape_fn((cfg.height, cfg.width, channels), |(_, _, c)| cfg.mu[c]);
            initial_reference_noise(&latent, cfg.frames, &sched, &mut rng)?
        }
        Start::Gaussian => gaussian_noise((cfg.frames, cfg.height, cfg.width, channels), &mut rng),
    };
    let travel = TravelConfig {
        window: cfg.window,
        stride: cfg.stride,
        omega: cfg.omega,
        sampler: cfg.sampler,
        offsets: OffsetPolicy::Random,
    };
    let (x, trace) = prompt_travel_denoise_traced(
        &x_start,
        &denoiser,
        &sched,
        &ConditionBundle::default(),
        &travel,
        &ladder,
        &mut rng,
    )?;

    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir)
        .with_context(|| format!("creating {}", frames_dir.display()))?;
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (i, frame) in x.axis_iter(Axis(0)).enumerate() {
        save_png(
            &panel(frame, lo, hi),
            frames_dir.join(format!("{i:06}.png")),
        )?;
    }

    let moments = channel_moments(&x);
    let mut entries = cfg.manifest_entries();
    entries.push(("denoising_steps".into(), trace.len().to_string()));
    entries.push((
        "offsets".into(),
        trace
            .iter()
            .map(|s| s.offset.to_string())
            .collect::<Vec<_>>()
            .join(","),
    ));
    entries.push(("value_range".into(), format!("{lo:.9},{hi:.9}")));
    for (c, (m, v)) in moments.iter().enumerate() {
        entries.push((format!("mean_{c}"), format!("{m:.9}")));
        entries.push((format!("var_{c}"), format!("{v:.9}")));
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest(&entries))
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    for (c, (m, v)) in moments.iter().enumerate() {
        ctx.say(format!(
            "channel {c}: mean {m:.6} (mu {}), variance {v:.6} (sigma^2 {})",
            cfg.mu[c],
            cfg.sigma * cfg.sigma
        ));
    }
    Ok(())
}
