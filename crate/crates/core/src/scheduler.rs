//! Discrete diffusion noise schedules.
//!
//! Timesteps run over `0..=T`. Betas exist for `t = 1..=T`; slot `0` only
//! carries `alpha_bar = 1` and an infinite SNR, so the clean sample sits at
//! `t = 0` and every finite quantity is well defined.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array, AsArray, Dimension};
use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::{axpby, ensure_same_shape};

/// First beta of the linear schedule.
pub const BETA_START: f64 = 0.00085;
/// Last beta of the linear schedule.
pub const BETA_END: f64 = 0.012;

/// The immutable beta / alpha / alpha-bar / SNR tables of a `T`-step
/// diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // betas[t - 1] is beta_t
    betas: Vec<f64>,
    // alpha_bar[t], alpha_bar[0] == 1
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation between [`BETA_START`] and [`BETA_END`]:
    /// `beta_t = 0.00085 (1 - (t-1)/(T-1)) + 0.012 (t-1)/(T-1)`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "linear schedule needs at least 2 steps, got {steps}"
            )));
        }
        let denom = (steps - 1) as f64;
        let betas = (1..=steps)
            .map(|t| {
                let frac = (t - 1) as f64 / denom;
                BETA_START * (1.0 - frac) + BETA_END * frac
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from `beta_1..beta_T`, checking every beta lies in
    /// `(0, 1)` and that alpha-bar stays strictly decreasing and positive.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one beta"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for (i, &beta) in betas.iter().enumerate() {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::invalid(format!(
                    "beta_{} = {beta} outside (0, 1)",
                    i + 1
                )));
            }
            let prev = alpha_bar[i];
            let next = prev * (1.0 - beta);
            if !(next < prev && next > 0.0) {
                return Err(Error::invalid(format!(
                    "alpha_bar not strictly decreasing at t = {}",
                    i + 1
                )));
            }
            alpha_bar.push(next);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Rescales every step's SNR by `gamma` and rederives the betas:
    ///
    /// ```text
    /// snr'_t  = gamma * abar_t / (1 - abar_t)
    /// abar'_t = snr'_t / (1 + snr'_t),  abar'_0 = 1
    /// beta'_t = 1 - abar'_t / abar'_{t-1}
    /// ```
    ///
    /// `gamma = 1` is accepted as the identity shift.
    pub fn shift_snr(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0, 1], got {gamma}"
            )));
        }
        if gamma == 1.0 {
            return Ok(self.clone());
        }
        let corrected: Vec<f64> = std::iter::once(1.0)
            .chain((1..=self.steps()).map(|t| {
                let snr = gamma * self.snr(t);
                snr / (1.0 + snr)
            }))
            .collect();
        let betas = corrected
            .windows(2)
            .map(|pair| 1.0 - pair[1] / pair[0])
            .collect();
        Self::from_betas(betas)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "beta_{t} undefined");
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`; `alpha_0` is taken as 1.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            1.0 - self.beta(t)
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `alpha_bar / (1 - alpha_bar)`, with `+inf` at `t = 0`.
    pub fn snr(&self, t: usize) -> f64 {
        if t == 0 {
            return f64::INFINITY;
        }
        let ab = self.alpha_bar[t];
        ab / (1.0 - ab)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_diffuse<'a, 'b, D: Dimension>(
        &self,
        x0: impl AsArray<'a, f64, D>,
        t: usize,
        eps: impl AsArray<'b, f64, D>,
    ) -> Result<Array<f64, D>> {
        let (x0, eps) = (x0.into(), eps.into());
        ensure_same_shape("forward_diffuse", &x0.raw_dim(), &eps.raw_dim())?;
        self.check_timestep(t)?;
        let ab = self.alpha_bar[t];
        Ok(axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps))
    }

    /// One-step clean estimate `(x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
    /// At `t = 0` the input is returned unchanged.
    pub fn predict_x0_from_eps<'a, 'b, D: Dimension>(
        &self,
        x_t: impl AsArray<'a, f64, D>,
        t: usize,
        eps_hat: impl AsArray<'b, f64, D>,
    ) -> Result<Array<f64, D>> {
        let (x_t, eps_hat) = (x_t.into(), eps_hat.into());
        ensure_same_shape("predict_x0_from_eps", &x_t.raw_dim(), &eps_hat.raw_dim())?;
        self.check_timestep(t)?;
        if t == 0 {
            return Ok(x_t.to_owned());
        }
        let ab = self.alpha_bar[t];
        let inv = 1.0 / ab.sqrt();
        Ok(axpby(inv, x_t, -(1.0 - ab).sqrt() * inv, eps_hat))
    }

    /// The schedule as CSV with header `t,beta,alpha,alpha_bar,snr`, one row
    /// per `t = 0..=T`, 12 significant digits. Beta is blank at `t = 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,snr\n");
        for t in 0..=self.steps() {
            let beta = if t == 0 {
                String::new()
            } else {
                sig12(self.beta(t))
            };
            let _ = writeln!(
                out,
                "{t},{beta},{},{},{}",
                sig12(self.alpha(t)),
                sig12(self.alpha_bar(t)),
                sig12(self.snr(t))
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn sig12(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.11e}")
    }
}

/// Largest relative deviation of `snr_shifted(t) / snr_base(t)` from `gamma`
/// over `t = 1..=T`, with the shifted alpha-bar rebuilt from its betas.
pub fn max_snr_ratio_error(base: &NoiseSchedule, shifted: &NoiseSchedule, gamma: f64) -> f64 {
    let mut abar = 1.0;
    let mut worst = 0.0f64;
    for (t, beta) in shifted.betas().iter().enumerate() {
        abar *= 1.0 - beta;
        let ratio = (abar / (1.0 - abar)) / base.snr(t + 1);
        worst = worst.max((ratio / gamma - 1.0).abs());
    }
    worst
}

/// An inclusive band of timesteps to draw training noise levels from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepRange {
    lo: usize,
    hi: usize,
}

impl TimestepRange {
    /// Small-timestep band used when fine-tuning against one-step `x0`
    /// predictions.
    pub const REGIONAL_STAGE: TimestepRange = TimestepRange { lo: 0, hi: 124 };
    /// Full band used for ordinary denoising training.
    pub const MAIN_STAGE: TimestepRange = TimestepRange { lo: 0, hi: 999 };

    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::invalid(format!(
                "timestep range {lo}..={hi} is empty"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    /// Checks the range fits inside a schedule's `0..=T`.
    pub fn validate_for(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.hi > sched.steps() {
            return Err(Error::invalid(format!(
                "timestep range upper bound {} exceeds T = {}",
                self.hi,
                sched.steps()
            )));
        }
        Ok(())
    }

    /// A uniform draw from `lo..=hi`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.lo..=self.hi)
    }
}

/// Decreasing timestep ladder with `steps` points spread uniformly over
/// `[1, T]`, followed by a terminal `0`.
///
/// `uniform_ladder(999, 50)` starts at 999 and ends `.., 1, 0`.
pub fn uniform_ladder(max_t: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > max_t {
        return Err(Error::invalid(format!(
            "ladder needs 1..={max_t} steps, got {steps}"
        )));
    }
    let mut ladder: Vec<usize> = if steps == 1 {
        vec![max_t]
    } else {
        let span = (max_t - 1) as f64;
        (0..steps)
            .rev()
            .map(|k| 1 + (span * k as f64 / (steps - 1) as f64).round() as usize)
            .collect()
    };
    ladder.push(0);
    Ok(ladder)
}

/// Checks that a ladder strictly decreases, ends at zero and stays within
/// the schedule.
pub fn validate_ladder(ladder: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if ladder.len() < 2 || *ladder.last().unwrap() != 0 {
        return Err(Error::invalid(
            "ladder must have at least two entries and end at 0",
        ));
    }
    if ladder[0] > sched.steps() {
        return Err(Error::invalid(format!(
            "ladder starts at {} beyond T = {}",
            ladder[0],
            sched.steps()
        )));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("ladder must be strictly decreasing"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.beta(1), 0.00085);
        assert!((s.beta(1000) - 0.012).abs() < 1e-15);
        let two = NoiseSchedule::linear(2).unwrap();
        assert_eq!(two.betas()[0], 0.00085);
        assert!((two.betas()[1] - 0.012).abs() < 1e-15);
    }

    #[test]
    fn linear_interior_point() {
        let s = NoiseSchedule::linear(4).unwrap();
        assert!((s.beta(2) - 0.004_566_666_666_666_67).abs() < 1e-15);
    }

    #[test]
    fn linear_rejects_short_schedules() {
        assert!(matches!(
            NoiseSchedule::linear(1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(NoiseSchedule::linear(0).is_err());
    }

    #[test]
    fn derived_tables_are_consistent() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.snr(0), f64::INFINITY);
        for t in 1..=1000 {
            let ab = s.alpha_bar(t);
            assert!(ab < s.alpha_bar(t - 1));
            assert!(rel(s.snr(t), ab / (1.0 - ab)) <= 1e-12);
            if t > 1 {
                assert!(s.snr(t) < s.snr(t - 1));
            }
        }
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn identity_shift() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let same = s.shift_snr(1.0).unwrap();
        for (a, b) in s.betas().iter().zip(same.betas()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn shift_t4_by_hand() {
        // Values from a 40-digit evaluation of the recurrence.
        let s = NoiseSchedule::linear(4).unwrap();
        assert!(rel(s.snr(1), 1_175.470_588_235_29) < 1e-12);
        let shifted = s.shift_snr(0.5).unwrap();
        assert!(rel(shifted.snr(1), 587.735_294_117_647) < 1e-12);
        assert!(rel(shifted.alpha_bar(1), 0.998_301_443_772_793) < 1e-14);
        let expected = [
            0.001_698_556_227_206_87,
            0.009_084_162_713_659_28,
            0.016_343_556_165_525_5,
            0.023_403_503_964_054_8,
        ];
        for (got, want) in shifted.betas().iter().zip(expected) {
            assert!(rel(*got, want) < 1e-10, "{got} vs {want}");
        }
        assert!(rel(shifted.alpha_bar(4), 0.950_291_997_004_566) < 1e-12);
        assert!(shifted.alpha_bar(4) < s.alpha_bar(4));
    }

    #[test]
    fn shift_rejects_bad_gamma() {
        let s = NoiseSchedule::linear(10).unwrap();
        for g in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(s.shift_snr(g).is_err(), "gamma {g}");
        }
    }

    #[test]
    fn shift_exactness_t1000() {
        let s = NoiseSchedule::linear(1000).unwrap();
        for gamma in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let shifted = s.shift_snr(gamma).unwrap();
            assert!(max_snr_ratio_error(&s, &shifted, gamma) <= 1e-9);
            assert!(shifted.betas().iter().all(|&b| b > 0.0 && b < 1.0));
            for t in 1..=1000 {
                assert!(shifted.alpha_bar(t) < shifted.alpha_bar(t - 1));
            }
            if gamma < 1.0 {
                assert!(shifted.alpha_bar(1000) < s.alpha_bar(1000));
            }
        }
    }

    #[test]
    fn forward_diffuse_boundaries() {
        let s = NoiseSchedule::linear(10).unwrap();
        let x0 = arr1(&[0.3, -1.2, 7.0]);
        let eps = arr1(&[1.0, 2.0, 3.0]);
        assert_eq!(s.forward_diffuse(&x0, 0, &eps).unwrap(), x0);
        assert!(s.forward_diffuse(&x0, 11, &eps).is_err());
        assert!(s.forward_diffuse(&x0, 1, &arr1(&[1.0])).is_err());
    }

    #[test]
    fn forward_diffuse_quarter_alpha_bar() {
        // alpha_bar = 0.25 from a single beta of 0.75.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = s.forward_diffuse(&arr1(&[1.0]), 1, &arr1(&[1.0])).unwrap();
        assert!((out[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!((out[0] - 1.3660).abs() < 1e-4);
        let x0 = s
            .predict_x0_from_eps(&arr1(&[1.0]), 1, &arr1(&[0.0]))
            .unwrap();
        assert!((x0[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in [10, 300, 1000] {
            let eps: Array1<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
            let out = s.forward_diffuse(&Array1::zeros(100_000), t, &eps).unwrap();
            let var = out.var(0.0);
            assert!(rel(var, 1.0 - s.alpha_bar(t)) < 0.03, "t={t}");
        }
    }

    #[test]
    fn predict_x0_at_zero_is_identity() {
        let s = NoiseSchedule::linear(10).unwrap();
        let x = arr1(&[0.1, 0.2]);
        assert_eq!(s.predict_x0_from_eps(&x, 0, &arr1(&[5.0, 5.0])).unwrap(), x);
    }

    #[test]
    fn timestep_range_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = TimestepRange::new(5, 5).unwrap();
        assert!((0..100).all(|_| single.sample(&mut rng) == 5));
        assert!(TimestepRange::new(6, 5).is_err());

        let r = TimestepRange::REGIONAL_STAGE;
        let n = 100_000;
        let mean = (0..n).map(|_| r.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 62.0).abs() < 1.0, "{mean}");

        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| TimestepRange::MAIN_STAGE.sample(&mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn range_must_fit_schedule() {
        let s = NoiseSchedule::linear(100).unwrap();
        assert!(TimestepRange::REGIONAL_STAGE.validate_for(&s).is_err());
        assert!(TimestepRange::new(0, 100).unwrap().validate_for(&s).is_ok());
    }

    #[test]
    fn ladder_shape() {
        let l = uniform_ladder(999, 50).unwrap();
        assert_eq!(l.len(), 51);
        assert_eq!(l[0], 999);
        assert_eq!(&l[49..], &[1, 0]);
        let s = NoiseSchedule::linear(999).unwrap();
        validate_ladder(&l, &s).unwrap();
        assert_eq!(uniform_ladder(10, 1).unwrap(), vec![10, 0]);
        assert_eq!(
            uniform_ladder(10, 10).unwrap(),
            vec![10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0]
        );
        assert!(uniform_ladder(10, 11).is_err());
        assert!(validate_ladder(&[5, 5, 0], &s).is_err());
        assert!(validate_ladder(&[5, 2], &s).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = NoiseSchedule::linear(2).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar,snr");
        assert_eq!(lines[1], "0,,1.00000000000e0,1.00000000000e0,inf");
        assert!(lines[2].starts_with("1,8.50000000000e-4,9.99150000000e-1,"));
        assert_eq!(lines.len(), 4);
    }

    proptest! {
        #[test]
        fn shift_exact_for_random_schedules(
            betas in prop::collection::vec(1e-5f64..0.05, 2..200),
            gamma in 0.01f64..=1.0,
        ) {
            let s = NoiseSchedule::from_betas(betas).unwrap();
            let shifted = s.shift_snr(gamma).unwrap();
            prop_assert!(max_snr_ratio_error(&s, &shifted, gamma) <= 1e-9);
            prop_assert!(shifted.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        }

        #[test]
        fn diffuse_then_recover(
            x0 in prop::collection::vec(-3.0f64..3.0, 1..16),
            seed in 0u64..1000,
            t in 0usize..=1000,
        ) {
            let s = NoiseSchedule::linear(1000).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Array1::from(x0);
            let eps: Array1<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            let back = s.predict_x0_from_eps(&xt, t, &eps).unwrap();
            for (a, b) in back.iter().zip(x0.iter()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
