//! Hand motion-blur condition: movement vectors from consecutive keypoint
//! frames, Laplacian-variance sharpness of hand crops, and their overlay on
//! pose maps.

use ndarray::{s, Array2};

use super::keypoints::{Hand, KeypointFrame, DEFAULT_CONFIDENCE};
use super::PixelBox;
use crate::error::{Error, Result};
use crate::frame::{to_gray, FrameTensor};

/// Mean displacement `(dx, dy)` of a hand's keypoints between `prev` and
/// `curr`, in pixels per frame.
///
/// Only keypoints visible in both frames contribute. With all 21 visible this
/// is the plain mean over the hand. Fails when no keypoint of the hand is
/// visible in both frames.
pub fn movement_vector(
    curr: &KeypointFrame,
    prev: &KeypointFrame,
    hand: Hand,
    threshold: f64,
) -> Result<(f64, f64)> {
    let (mut dx, mut dy, mut n) = (0.0, 0.0, 0usize);
    for i in hand.indices() {
        let (c, p) = (curr.points[i], prev.points[i]);
        if c.is_visible(threshold) && p.is_visible(threshold) {
            dx += c.x - p.x;
            dy += c.y - p.y;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::RegionUnavailable(format!(
            "{} hand between frames {} and {}",
            hand.name(),
            prev.index,
            curr.index
        )));
    }
    Ok((dx / n as f64, dy / n as f64))
}

/// Square crop around the padded bounding box of a hand, clamped to the
/// image. Returns the crop and the clamped box it was cut from.
pub fn crop_hand(
    image: &FrameTensor,
    kps: &KeypointFrame,
    hand: Hand,
    pad_ratio: f64,
    threshold: f64,
) -> Result<(FrameTensor, PixelBox)> {
    let unavailable =
        || Error::RegionUnavailable(format!("{} hand in frame {}", hand.name(), kps.index));
    let (h, w, _) = image.dim();
    let bbox = PixelBox::around(kps.visible(hand.indices(), threshold), pad_ratio)
        .ok_or_else(unavailable)?
        .squared()
        .clamp_to(w, h)
        .ok_or_else(unavailable)?;
    let crop = image
        .slice(s![
            bbox.y0 as usize..=bbox.y1 as usize,
            bbox.x0 as usize..=bbox.x1 as usize,
            ..
        ])
        .to_owned();
    Ok((crop, bbox))
}

/// Variance of the 5-point Laplacian response over the valid interior of the
/// crop's luminance. Higher means sharper.
pub fn sharpness_score(crop: &FrameTensor) -> Result<f64> {
    let (h, w, _) = crop.dim();
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!(
            "sharpness needs a crop of at least 3x3, got {w}x{h}"
        )));
    }
    let gray = to_gray(crop.view())?;
    let response = laplacian_valid(&gray);
    let n = response.len() as f64;
    let mean = response.sum() / n;
    Ok(response
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n)
}

fn laplacian_valid(gray: &Array2<f64>) -> Array2<f64> {
    let (h, w) = gray.dim();
    Array2::from_shape_fn((h - 2, w - 2), |(y, x)| {
        let (y, x) = (y + 1, x + 1);
        gray[[y - 1, x]] + gray[[y + 1, x]] + gray[[y, x - 1]] + gray[[y, x + 1]]
            - 4.0 * gray[[y, x]]
    })
}

/// Per-hand motion-blur record for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurCondition {
    pub hand: Hand,
    /// Movement in pixels per frame.
    pub v: (f64, f64),
    /// Sharpness score.
    pub s: f64,
    pub valid: bool,
}

impl BlurCondition {
    pub fn invalid(hand: Hand) -> Self {
        Self {
            hand,
            v: (0.0, 0.0),
            s: 0.0,
            valid: false,
        }
    }

    pub fn speed(&self) -> f64 {
        self.v.0.hypot(self.v.1)
    }

    /// `frame,hand,vx,vy,speed,sharpness,valid` row body.
    pub fn csv_row(&self, frame: usize) -> String {
        format!(
            "{frame},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.hand.name(),
            self.v.0,
            self.v.1,
            self.speed(),
            self.s,
            self.valid
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurParams {
    pub threshold: f64,
    pub hand_pad_ratio: f64,
    /// Speed mapped to full red/green saturation, px/frame.
    pub v_max: f64,
    /// Sharpness mapped to full blue.
    pub s_max: f64,
    /// Factor applied to crop intensities before scoring; 255 scores 8-bit
    /// intensity units from `[0, 1]` frames.
    pub intensity_scale: f64,
}

impl Default for BlurParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_CONFIDENCE,
            hand_pad_ratio: 0.35,
            v_max: 32.0,
            s_max: 2000.0,
            intensity_scale: 255.0,
        }
    }
}

/// Blur condition of one hand in `curr`, plus the crop box used for the
/// overlay. The record is invalid, with no box, when there is no previous
/// frame or the hand cannot be located in either frame.
pub fn hand_blur_condition(
    image: &FrameTensor,
    curr: &KeypointFrame,
    prev: Option<&KeypointFrame>,
    hand: Hand,
    params: &BlurParams,
) -> Result<(BlurCondition, Option<PixelBox>)> {
    let Some(prev) = prev else {
        return Ok((BlurCondition::invalid(hand), None));
    };
    let v = match movement_vector(curr, prev, hand, params.threshold) {
        Ok(v) => v,
        Err(Error::RegionUnavailable(_)) => return Ok((BlurCondition::invalid(hand), None)),
        Err(e) => return Err(e),
    };
    let (crop, bbox) = match crop_hand(image, curr, hand, params.hand_pad_ratio, params.threshold) {
        Ok(c) => c,
        Err(Error::RegionUnavailable(_)) => return Ok((BlurCondition::invalid(hand), None)),
        Err(e) => return Err(e),
    };
    if crop.dim().0 < 3 || crop.dim().1 < 3 {
        return Ok((BlurCondition::invalid(hand), None));
    }
    let s = sharpness_score(&(crop * params.intensity_scale))?;
    Ok((
        BlurCondition {
            hand,
            v,
            s,
            valid: true,
        },
        Some(bbox),
    ))
}

/// Paints the blur condition as a filled disc over the hand region of a pose
/// map. The disc is centred on `bbox` with radius half its diagonal and
/// coloured
/// `(0.5 + vx / (2 v_max), 0.5 + vy / (2 v_max), s / s_max)`, each clamped to
/// `[0, 1]`. Invalid conditions leave the map untouched.
pub fn overlay_blur_condition(
    pose_map: &FrameTensor,
    bbox: PixelBox,
    cond: &BlurCondition,
    v_max: f64,
    s_max: f64,
) -> Result<FrameTensor> {
    let (h, w, c) = pose_map.dim();
    if !cond.valid {
        return Ok(pose_map.clone());
    }
    if c != 3 {
        return Err(Error::invalid(format!(
            "overlay needs an RGB pose map, got {c} channels"
        )));
    }
    if !bbox.within(w, h) {
        return Err(Error::invalid(format!(
            "overlay box {bbox:?} outside {w}x{h} map"
        )));
    }
    if !(v_max > 0.0 && s_max > 0.0) {
        return Err(Error::invalid("v_max and s_max must be positive"));
    }
    let color = [
        (0.5 + cond.v.0 / (2.0 * v_max)).clamp(0.0, 1.0),
        (0.5 + cond.v.1 / (2.0 * v_max)).clamp(0.0, 1.0),
        (cond.s / s_max).clamp(0.0, 1.0),
    ];
    let (cx, cy) = bbox.center();
    let r2 = (bbox.width().pow(2) + bbox.height().pow(2)) as f64 / 4.0;
    let r = r2.sqrt();
    let mut out = pose_map.clone();
    let ys = ((cy - r).floor().max(0.0) as usize)..=((cy + r).ceil().min(h as f64 - 1.0) as usize);
    for y in ys {
        let xs =
            ((cx - r).floor().max(0.0) as usize)..=((cx + r).ceil().min(w as f64 - 1.0) as usize);
        for x in xs {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                for (ch, v) in color.iter().enumerate() {
                    out[[y, x, ch]] = *v;
                }
            }
        }
    }
    Ok(out)
}
