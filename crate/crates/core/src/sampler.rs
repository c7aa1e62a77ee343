//! Reverse diffusion: the denoiser port, animation-cfg guidance, DDIM and
//! DDPM updates, initial reference noise and prompt-traveling denoising of
//! sequences longer than the denoiser's window.

use std::ops::Range;

use ndarray::{s, Array4, ArrayView4, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::{axpby, ensure_same_shape, FrameSequence, FrameTensor};
use crate::scheduler::{validate_ladder, NoiseSchedule};

/// Control inputs for the conditional branch. Either slot may be empty.
#[derive(Debug, Clone, Default)]
pub struct ConditionBundle {
    /// Reference image or latent.
    pub reference: Option<FrameTensor>,
    /// Per-frame driving signal, aligned with the sequence being denoised.
    pub driving: Option<FrameSequence>,
}

impl ConditionBundle {
    /// The same bundle restricted to the frames in `frames`.
    pub fn window(&self, frames: Range<usize>) -> ConditionBundle {
        ConditionBundle {
            reference: self.reference.clone(),
            driving: self
                .driving
                .as_ref()
                .map(|d| d.slice(s![frames, .., .., ..]).to_owned()),
        }
    }
}

/// A noise predictor `(x_t, t, condition) -> eps_hat`.
///
/// `condition = None` is the unconditional branch with every control
/// deactivated. Implementations must be pure and return an array shaped like
/// `x_t`; they are called concurrently from several windows.
pub trait Denoiser: Sync {
    fn predict(
        &self,
        x_t: ArrayView4<'_, f64>,
        t: usize,
        condition: Option<&ConditionBundle>,
    ) -> Result<FrameSequence>;
}

fn checked_predict<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: ArrayView4<'_, f64>,
    t: usize,
    condition: Option<&ConditionBundle>,
) -> Result<FrameSequence> {
    let eps = denoiser.predict(x_t, t, condition)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::Invariant(format!(
            "denoiser returned shape {:?} for input {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    Ok(eps)
}

/// Animation-cfg: `eps_uncond + omega * (eps_uncond - eps_cond)`.
///
/// Note the sign: positive `omega` moves away from the conditional
/// prediction. Evaluated as `(1 + omega) * eps_uncond - omega * eps_cond` so
/// that `omega = 0` and `omega = -1` return the unconditional and conditional
/// branches bit for bit.
pub fn cfg_epsilon(
    eps_uncond: ArrayView4<'_, f64>,
    eps_cond: ArrayView4<'_, f64>,
    omega: f64,
) -> Result<FrameSequence> {
    ensure_same_shape("cfg_epsilon", &eps_uncond.raw_dim(), &eps_cond.raw_dim())?;
    Ok(Zip::from(&eps_uncond)
        .and(&eps_cond)
        .map_collect(|&u, &c| (1.0 + omega) * u - omega * c))
}

/// Deterministic DDIM update from `t` to `t_prev`:
/// `x_prev = sqrt(abar_prev) * x0' + sqrt(1 - abar_prev) * eps_hat`.
pub fn ddim_step(
    sched: &NoiseSchedule,
    x_t: ArrayView4<'_, f64>,
    t: usize,
    t_prev: usize,
    eps_hat: ArrayView4<'_, f64>,
) -> Result<FrameSequence> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddim step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let x0 = sched.predict_x0_from_eps(x_t, t, eps_hat)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab_prev = sched.alpha_bar(t_prev);
    Ok(axpby(
        ab_prev.sqrt(),
        x0.view(),
        (1.0 - ab_prev).sqrt(),
        eps_hat,
    ))
}

/// Ancestral DDPM update from `t` to `t_prev`, sampling from
/// `q(x_prev | x_t, x0')` with the posterior variance
/// `(1 - abar_prev) / (1 - abar_t) * (1 - abar_t / abar_prev)`.
pub fn ddpm_step<R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    x_t: ArrayView4<'_, f64>,
    t: usize,
    t_prev: usize,
    eps_hat: ArrayView4<'_, f64>,
    rng: &mut R,
) -> Result<FrameSequence> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddpm step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let x0 = sched.predict_x0_from_eps(x_t, t, eps_hat)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let step_alpha = ab_t / ab_prev;
    let step_beta = 1.0 - step_alpha;
    let c0 = ab_prev.sqrt() * step_beta / (1.0 - ab_t);
    let ct = step_alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let std = ((1.0 - ab_prev) / (1.0 - ab_t) * step_beta).sqrt();
    let mut out = axpby(c0, x0.view(), ct, x_t);
    out.mapv_inplace(|m| m + std * rng.sample::<f64, _>(StandardNormal));
    Ok(out)
}

/// Which reverse update to apply at every rung of the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerKind {
    #[default]
    Ddim,
    Ddpm,
}

/// Starting latent for sampling: the reference latent pushed through the
/// whole forward process in one closed-form jump to `t = T`, with a single
/// noise draw replicated across `frames` frames.
pub fn initial_reference_noise<R: Rng + ?Sized>(
    ref_latent: &FrameTensor,
    frames: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<FrameSequence> {
    if frames == 0 {
        return Err(Error::invalid(
            "initial reference noise needs at least one frame",
        ));
    }
    let eps = ref_latent.mapv(|_| rng.sample::<f64, _>(StandardNormal));
    let noised = sched.forward_diffuse(ref_latent, sched.steps(), &eps)?;
    let (h, w, c) = noised.dim();
    Ok(noised
        .broadcast((frames, h, w, c))
        .expect("leading axis broadcast")
        .to_owned())
}

/// Pure Gaussian noise start, for comparison with
/// [`initial_reference_noise`].
pub fn gaussian_noise<R: Rng + ?Sized>(
    shape: (usize, usize, usize, usize),
    rng: &mut R,
) -> FrameSequence {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Fixed-length windows tiling a sequence, with the number of windows that
/// cover each frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    windows: Vec<Range<usize>>,
    counts: Vec<usize>,
}

impl WindowPlan {
    pub fn windows(&self) -> &[Range<usize>] {
        &self.windows
    }

    pub fn overlap_counts(&self) -> &[usize] {
        &self.counts
    }

    /// Uniform averaging weight of one window's prediction at `frame`.
    pub fn weight(&self, frame: usize) -> f64 {
        1.0 / self.counts[frame] as f64
    }
}

/// Lays out windows of length `window` starting at `-offset + k * stride`.
///
/// Starts that fall outside `[0, N - W]` are clamped inward so every window
/// keeps its full length; duplicates are dropped and a final window at
/// `N - W` is added when the tail would otherwise be uncovered.
pub fn plan_windows(
    frames: usize,
    window: usize,
    stride: usize,
    offset: usize,
) -> Result<WindowPlan> {
    if window == 0 || window > frames {
        return Err(Error::invalid(format!(
            "window length {window} must lie in 1..={frames}"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::invalid(format!(
            "stride {stride} must lie in 1..={window}"
        )));
    }
    if offset >= stride {
        return Err(Error::invalid(format!(
            "offset {offset} must be below stride {stride}"
        )));
    }
    let last_start = (frames - window) as isize;
    let mut starts: Vec<usize> = Vec::new();
    let mut raw = -(offset as isize);
    while raw <= last_start {
        let start = raw.clamp(0, last_start) as usize;
        if starts.last() != Some(&start) {
            starts.push(start);
        }
        raw += stride as isize;
    }
    if starts.last().is_none_or(|&s| s + window < frames) {
        starts.push(last_start as usize);
    }
    let windows: Vec<Range<usize>> = starts.into_iter().map(|s| s..s + window).collect();
    let mut counts = vec![0usize; frames];
    for w in &windows {
        for c in &mut counts[w.clone()] {
            *c += 1;
        }
    }
    debug_assert!(counts.iter().all(|&c| c >= 1));
    Ok(WindowPlan { windows, counts })
}

/// How the window offset is chosen at each denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetPolicy {
    /// Redrawn uniformly from `0..stride` at every step.
    #[default]
    Random,
    Fixed(usize),
}

/// Parameters of a prompt-traveling run.
#[derive(Debug, Clone, Copy)]
pub struct TravelConfig {
    pub window: usize,
    pub stride: usize,
    pub omega: f64,
    pub sampler: SamplerKind,
    pub offsets: OffsetPolicy,
}

impl Default for TravelConfig {
    fn default() -> Self {
        Self {
            window: 16,
            stride: 8,
            omega: 0.0,
            sampler: SamplerKind::Ddim,
            offsets: OffsetPolicy::Random,
        }
    }
}

/// What happened at one rung of the ladder.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub offset: usize,
    pub plan: WindowPlan,
    /// Sum of averaging weights received by each frame.
    pub weight_sums: Vec<f64>,
}

/// Guided, window-averaged noise prediction for the whole sequence at `t`.
fn windowed_epsilon<D: Denoiser + ?Sized>(
    x_t: &FrameSequence,
    t: usize,
    denoiser: &D,
    cond: &ConditionBundle,
    omega: f64,
    plan: &WindowPlan,
) -> Result<(FrameSequence, Vec<f64>)> {
    let per_window: Vec<FrameSequence> = plan
        .windows()
        .par_iter()
        .map(|w| {
            let xw = x_t.slice(s![w.clone(), .., .., ..]);
            let cw = cond.window(w.clone());
            let uncond = checked_predict(denoiser, xw, t, None)?;
            let guided = checked_predict(denoiser, xw, t, Some(&cw))?;
            cfg_epsilon(uncond.view(), guided.view(), omega)
        })
        .collect::<Result<_>>()?;

    let mut eps = FrameSequence::zeros(x_t.raw_dim());
    let mut weight_sums = vec![0.0; x_t.len_of(Axis(0))];
    for (w, pred) in plan.windows().iter().zip(&per_window) {
        for (local, frame) in w.clone().enumerate() {
            let weight = plan.weight(frame);
            weight_sums[frame] += weight;
            eps.index_axis_mut(Axis(0), frame)
                .zip_mut_with(&pred.index_axis(Axis(0), local), |e, &p| *e += weight * p);
        }
    }
    Ok((eps, weight_sums))
}

/// Denoises `x_start` along `ladder`, splitting the sequence into
/// overlapping windows whose offset shifts every step and averaging the
/// guided noise predictions where windows overlap.
///
/// Sequences no longer than `config.window` are denoised as a single window.
pub fn prompt_travel_denoise<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_start: &FrameSequence,
    denoiser: &D,
    sched: &NoiseSchedule,
    cond: &ConditionBundle,
    config: &TravelConfig,
    ladder: &[usize],
    rng: &mut R,
) -> Result<FrameSequence> {
    prompt_travel_denoise_traced(x_start, denoiser, sched, cond, config, ladder, rng)
        .map(|(x, _)| x)
}

/// [`prompt_travel_denoise`] that also returns a record per step.
pub fn prompt_travel_denoise_traced<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_start: &FrameSequence,
    denoiser: &D,
    sched: &NoiseSchedule,
    cond: &ConditionBundle,
    config: &TravelConfig,
    ladder: &[usize],
    rng: &mut R,
) -> Result<(FrameSequence, Vec<StepRecord>)> {
    let frames = x_start.len_of(Axis(0));
    if frames == 0 {
        return Err(Error::invalid("cannot denoise an empty sequence"));
    }
    validate_ladder(ladder, sched)?;
    if let Some(d) = &cond.driving {
        if d.len_of(Axis(0)) != frames {
            return Err(Error::invalid(format!(
                "driving signal has {} frames, sequence has {frames}",
                d.len_of(Axis(0))
            )));
        }
    }
    let window = config.window.min(frames);
    let stride = config.stride.min(window);
    if config.window == 0 || config.stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }

    let mut x = x_start.clone();
    let mut trace = Vec::with_capacity(ladder.len() - 1);
    for pair in ladder.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let offset = match config.offsets {
            OffsetPolicy::Random => rng.random_range(0..stride),
            OffsetPolicy::Fixed(o) => o,
        };
        let plan = plan_windows(frames, window, stride, offset)?;
        let (eps, weight_sums) = windowed_epsilon(&x, t, denoiser, cond, config.omega, &plan)?;
        if let Some((f, s)) = weight_sums
            .iter()
            .enumerate()
            .find(|(_, s)| (**s - 1.0).abs() > 1e-12)
        {
            return Err(Error::Invariant(format!(
                "overlap weights of frame {f} sum to {s} at t = {t}"
            )));
        }
        x = match config.sampler {
            SamplerKind::Ddim => ddim_step(sched, x.view(), t, t_prev, eps.view())?,
            SamplerKind::Ddpm => ddpm_step(sched, x.view(), t, t_prev, eps.view(), rng)?,
        };
        trace.push(StepRecord {
            t,
            t_prev,
            offset,
            plan,
            weight_sums,
        });
    }
    Ok((x, trace))
}

/// Bayes-optimal noise predictor for data `x0 ~ N(mu, sigma^2 I)`.
///
/// `mu` holds one mean per channel, broadcast over frames and pixels. With
/// `x_t = a x0 + b eps` the posterior mean is
/// `mu + a sigma^2 / (a^2 sigma^2 + b^2) (x_t - a mu)` and the returned
/// estimate is `(x_t - a E[x0 | x_t]) / b`. Conditions are ignored.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    mu: Vec<f64>,
    sigma: f64,
    sched: NoiseSchedule,
}

impl GaussianDenoiser {
    pub fn new(mu: Vec<f64>, sigma: f64, sched: NoiseSchedule) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if mu.is_empty() {
            return Err(Error::invalid("mu must have at least one entry"));
        }
        Ok(Self { mu, sigma, sched })
    }

    /// `E[x0 | x_t]` for one element of channel `channel`.
    pub fn posterior_mean(&self, x_t: f64, t: usize, channel: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        let (a, b2) = (ab.sqrt(), 1.0 - ab);
        let s2 = self.sigma * self.sigma;
        let mu = self.mu[channel];
        mu + a * s2 / (ab * s2 + b2) * (x_t - a * mu)
    }

    fn epsilon(&self, x_t: f64, t: usize, channel: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        let mean = self.posterior_mean(x_t, t, channel);
        (x_t - ab.sqrt() * mean) / (1.0 - ab).sqrt()
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict(
        &self,
        x_t: ArrayView4<'_, f64>,
        t: usize,
        _condition: Option<&ConditionBundle>,
    ) -> Result<FrameSequence> {
        if x_t.len_of(Axis(3)) != self.mu.len() {
            return Err(Error::invalid(format!(
                "gaussian denoiser has {} channels, input has {}",
                self.mu.len(),
                x_t.len_of(Axis(3))
            )));
        }
        if t == 0 || t > self.sched.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.sched.steps()
            )));
        }
        let mut out = x_t.to_owned();
        out.indexed_iter_mut()
            .for_each(|((_, _, _, c), v)| *v = self.epsilon(*v, t, c));
        Ok(out)
    }
}
