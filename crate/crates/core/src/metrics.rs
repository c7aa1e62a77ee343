//! Full-reference image metrics (L1, PSNR, SSIM) and the square-padding
//! helper used before distribution metrics.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::frame::{ensure_same_shape, FrameTensor};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference over every element.
pub fn l1_error(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    ensure_same_shape("l1_error", &a.raw_dim(), &b.raw_dim())?;
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Mean squared error over every element.
pub fn mse(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    ensure_same_shape("mse", &a.raw_dim(), &b.raw_dim())?;
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` for `[0, 1]` images, computed from the global MSE.
/// Identical images give `+inf`.
pub fn psnr(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / err).log10())
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

// Separable "valid" filtering: the output covers window positions that lie
// entirely inside the image.
fn filter_valid(img: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = SSIM_WINDOW;
    let rows: Array2<f64> = Array2::from_shape_fn((h, w - k + 1), |(y, x)| {
        (0..k).map(|i| taps[i] * img[[y, x + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(y, x)| {
        (0..k).map(|i| taps[i] * rows[[y + i, x]]).sum::<f64>()
    })
}

fn ssim_plane(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let taps = gaussian_taps();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let e_aa = filter_valid(&(&a * &a), &taps);
    let e_bb = filter_valid(&(&b * &b), &taps);
    let e_ab = filter_valid(&(&a * &b), &taps);
    let mut total = 0.0;
    for ((((ma, mb), aa), bb), ab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(e_aa.iter())
        .zip(e_bb.iter())
        .zip(e_ab.iter())
    {
        let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
/// `K2 = 0.03` and dynamic range 1, averaged over channels. Only window
/// positions fully inside the image contribute.
pub fn ssim(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    ensure_same_shape("ssim", &a.raw_dim(), &b.raw_dim())?;
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    if c == 0 {
        return Err(Error::invalid("ssim of a zero-channel image"));
    }
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(a.index_axis(Axis(2), ch), b.index_axis(Axis(2), ch)))
        .sum();
    Ok(sum / c as f64)
}

/// Centres the image on a black square canvas of side `max(H, W)`. When the
/// padding is odd the extra row or column goes to the bottom or right.
pub fn pad_to_square(img: &FrameTensor) -> FrameTensor {
    let (h, w, c) = img.dim();
    let side = h.max(w);
    if h == w {
        return img.clone();
    }
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut out = Array3::zeros((side, side, c));
    out.slice_mut(s![top..top + h, left..left + w, ..])
        .assign(img);
    out
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub frame: String,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compute(frame: impl Into<String>, a: &FrameTensor, b: &FrameTensor) -> Result<Self> {
        Ok(Self {
            frame: frame.into(),
            l1: l1_error(a, b)?,
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// `frame,l1,psnr,ssim` CSV with a trailing `mean` row. Infinite PSNR is
/// written as `inf`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("frame,l1,psnr,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.frame,
            fmt_metric(r.l1),
            fmt_metric(r.psnr),
            fmt_metric(r.ssim)
        ));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        out.push_str(&format!(
            "mean,{},{},{}\n",
            fmt_metric(mean(|r| r.l1)),
            fmt_metric(mean(|r| r.psnr)),
            fmt_metric(mean(|r| r.ssim))
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> FrameTensor {
        Array3::from_shape_simple_fn(shape, || rng.random::<f64>())
    }

    #[test]
    fn l1_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(&mut rng, (4, 4, 3));
        assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
        let zeros = Array3::zeros((4, 4, 3));
        let halves = Array3::from_elem((4, 4, 3), 0.5);
        assert_eq!(l1_error(&zeros, &halves).unwrap(), 0.5);

        let b = random(&mut rng, (4, 4, 3));
        let mut acc = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    acc += (a[[y, x, c]] - b[[y, x, c]]).abs();
                }
            }
        }
        assert!((l1_error(&a, &b).unwrap() - acc / 48.0).abs() < 1e-12);
        assert!(l1_error(&a, &zeros.slice(s![.., .., 0..1]).to_owned()).is_err());
    }

    #[test]
    fn psnr_anchors() {
        let zeros = Array3::zeros((8, 8, 3));
        let halves = Array3::from_elem((8, 8, 3), 0.5);
        let ones = Array3::from_elem((8, 8, 3), 1.0);
        assert!((psnr(&zeros, &halves).unwrap() - 6.0206).abs() < 1e-4);
        assert!((psnr(&zeros, &halves).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&zeros, &zeros).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
    }

    // Direct per-window SSIM with the 2-D Gaussian weights.
    fn ssim_oracle(a: &FrameTensor, b: &FrameTensor) -> f64 {
        let taps = gaussian_taps();
        let (h, w, c) = a.dim();
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let mut per_channel = 0.0;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut count = 0;
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = taps[i] * taps[j];
                            ma += wt * a[[y0 + i, x0 + j, ch]];
                            mb += wt * b[[y0 + i, x0 + j, ch]];
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = taps[i] * taps[j];
                            let (da, db) =
                                (a[[y0 + i, x0 + j, ch]] - ma, b[[y0 + i, x0 + j, ch]] - mb);
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            per_channel += sum / count as f64;
        }
        per_channel / c as f64
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let a = random(&mut rng, (16, 16, 1));
            let b = random(&mut rng, (16, 16, 1));
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
        }
        let a = random(&mut rng, (13, 17, 3));
        let b = random(&mut rng, (13, 17, 3));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn ssim_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, (20, 24, 3));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let checker = Array3::from_shape_fn((16, 16, 1), |(y, x, _)| ((x + y) % 2) as f64);
        let inverse = checker.mapv(|v| 1.0 - v);
        assert!(ssim(&checker, &inverse).unwrap() < 0.0);
        assert!(ssim(&Array3::zeros((10, 20, 1)), &Array3::zeros((10, 20, 1))).is_err());
    }

    #[test]
    fn padding_geometry() {
        let img = Array3::from_shape_fn((512, 896, 3), |(y, x, c)| {
            ((y + x + c) % 255 + 1) as f64 / 256.0
        });
        let sq = pad_to_square(&img);
        assert_eq!(sq.dim(), (896, 896, 3));
        assert!(sq.slice(s![..192, .., ..]).iter().all(|&v| v == 0.0));
        assert!(sq.slice(s![704.., .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(sq.slice(s![192..704, .., ..]), img);

        let square = Array3::from_elem((5, 5, 1), 0.3);
        assert_eq!(pad_to_square(&square), square);
        let tall = Array3::from_elem((6, 3, 1), 1.0);
        let p = pad_to_square(&tall);
        assert_eq!(p.dim(), (6, 6, 1));
        assert_eq!(p.slice(s![.., 1..4, ..]), tall);
    }

    #[test]
    fn csv_report() {
        let rows = vec![
            MetricRow {
                frame: "a".into(),
                l1: 0.0,
                psnr: f64::INFINITY,
                ssim: 1.0,
            },
            MetricRow {
                frame: "b".into(),
                l1: 0.5,
                psnr: 6.0,
                ssim: 0.5,
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "frame,l1,psnr,ssim");
        assert_eq!(lines[1], "a,0.000000,inf,1.000000");
        assert_eq!(lines[3], "mean,0.250000,inf,0.750000");
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, (12, 13, 2));
            let b = random(&mut rng, (12, 13, 2));
            prop_assert_eq!(l1_error(&a, &b).unwrap(), l1_error(&b, &a).unwrap());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn psnr_decreases_with_mse(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, (6, 6, 1));
            let b = random(&mut rng, (6, 6, 1));
            let c = random(&mut rng, (6, 6, 1));
            let (m1, m2) = (mse(&a, &b).unwrap(), mse(&a, &c).unwrap());
            let (p1, p2) = (psnr(&a, &b).unwrap(), psnr(&a, &c).unwrap());
            prop_assert!((m1 < m2) == (p1 > p2) || m1 == m2);
        }
    }
}
