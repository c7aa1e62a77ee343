//! Driving signals: keypoints, rendered pose maps and the hand motion-blur
//! condition overlaid on them.

mod blur;
mod keypoints;
mod render;

pub use blur::{
    crop_hand, hand_blur_condition, movement_vector, overlay_blur_condition, sharpness_score,
    BlurCondition, BlurParams,
};
pub use keypoints::{
    flip_horizontal, flip_permutation, Hand, Keypoint, KeypointFrame, KeypointVideo, BODY,
    DEFAULT_CONFIDENCE, FACE, FEET, LEFT_HAND, NUM_KEYPOINTS, RIGHT_HAND,
};
pub use render::{render_pose_map, RenderStyle, BODY_LIMBS, LIMB_COLORS};

/// Inclusive pixel rectangle `[x0, x1] x [y0, y1]`. Corners may lie outside
/// an image until [`PixelBox::clamp_to`] is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelBox {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0 + 1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    /// Bounding box of `points`, grown on each side by `pad_ratio` times the
    /// box extent along that axis, with outer edges rounded outward.
    pub fn around<'a>(
        points: impl IntoIterator<Item = &'a Keypoint>,
        pad_ratio: f64,
    ) -> Option<Self> {
        let mut it = points.into_iter().peekable();
        it.peek()?;
        let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
        let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in it {
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            ymin = ymin.min(p.y);
            ymax = ymax.max(p.y);
        }
        let (px, py) = (pad_ratio * (xmax - xmin), pad_ratio * (ymax - ymin));
        Some(PixelBox {
            x0: (xmin - px).floor() as i64,
            y0: (ymin - py).floor() as i64,
            x1: (xmax + px).ceil() as i64,
            y1: (ymax + py).ceil() as i64,
        })
    }

    /// Grows the shorter side symmetrically until the box is square.
    pub fn squared(&self) -> Self {
        let (w, h) = (self.width(), self.height());
        let mut b = *self;
        if w < h {
            let extra = h - w;
            b.x0 -= extra / 2;
            b.x1 += extra - extra / 2;
        } else if h < w {
            let extra = w - h;
            b.y0 -= extra / 2;
            b.y1 += extra - extra / 2;
        }
        b
    }

    /// Intersection with a `width x height` image, or `None` when the box
    /// lies entirely outside it.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<Self> {
        let (wmax, hmax) = (width as i64 - 1, height as i64 - 1);
        let b = PixelBox {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(wmax),
            y1: self.y1.min(hmax),
        };
        (b.x0 <= b.x1 && b.y0 <= b.y1).then_some(b)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 < width as i64 && self.y1 < height as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(coords: &[(f64, f64)]) -> Vec<Keypoint> {
        coords
            .iter()
            .map(|&(x, y)| Keypoint {
                x,
                y,
                confidence: 1.0,
            })
            .collect()
    }

    #[test]
    fn box_arithmetic() {
        let p = pts(&[(100.0, 50.0), (140.0, 90.0), (120.0, 70.0)]);
        let b = PixelBox::around(&p, 0.0).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (100, 50, 140, 90));
        assert_eq!((b.width(), b.height()), (41, 41));
        let padded = PixelBox::around(&p, 0.25).unwrap();
        assert_eq!(
            (padded.x0, padded.y0, padded.x1, padded.y1),
            (90, 40, 150, 100)
        );
        assert!(PixelBox::around(&[], 0.0).is_none());
    }

    #[test]
    fn squaring_and_clamping() {
        let b = PixelBox {
            x0: 10,
            y0: 0,
            x1: 13,
            y1: 9,
        }
        .squared();
        assert_eq!((b.x0, b.x1, b.width(), b.height()), (7, 16, 10, 10));
        let c = PixelBox {
            x0: -5,
            y0: 2,
            x1: 4,
            y1: 30,
        }
        .clamp_to(20, 20)
        .unwrap();
        assert_eq!(
            c,
            PixelBox {
                x0: 0,
                y0: 2,
                x1: 4,
                y1: 19
            }
        );
        assert!(PixelBox {
            x0: 25,
            y0: 0,
            x1: 30,
            y1: 3
        }
        .clamp_to(20, 20)
        .is_none());
    }
}
