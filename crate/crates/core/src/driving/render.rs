//! OpenPose-style skeleton rendering of whole-body keypoints.

use ndarray::Array3;

use super::keypoints::{Keypoint, KeypointFrame, DEFAULT_CONFIDENCE, FACE, LEFT_HAND, RIGHT_HAND};
use crate::frame::FrameTensor;

/// COCO body index for each OpenPose-18 joint. `None` marks the neck, which
/// is synthesised from the shoulders.
const OPENPOSE_FROM_COCO: [Option<usize>; 18] = [
    Some(0),
    None,
    Some(6),
    Some(8),
    Some(10),
    Some(5),
    Some(7),
    Some(9),
    Some(12),
    Some(14),
    Some(16),
    Some(11),
    Some(13),
    Some(15),
    Some(2),
    Some(1),
    Some(4),
    Some(3),
];

/// Limbs between OpenPose-18 joints, in drawing order.
pub const BODY_LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Conventional OpenPose palette, one colour per joint; limb `i` uses
/// colour `i` dimmed to 60%.
pub const LIMB_COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

const HAND_BONES: [(usize, usize); 20] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (0, 5),
    (5, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (0, 17),
    (17, 18),
    (18, 19),
    (19, 20),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    pub threshold: f64,
    /// Half thickness of body limbs in pixels.
    pub limb_half_width: f64,
    pub joint_radius: f64,
    /// Radius of face dots; 0 draws single pixels.
    pub face_dot_radius: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_CONFIDENCE,
            limb_half_width: 2.0,
            joint_radius: 3.0,
            face_dot_radius: 1.0,
        }
    }
}

struct Canvas {
    img: FrameTensor,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, rgb: [f64; 3]) {
        let (h, w, _) = self.img.dim();
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            for (c, v) in rgb.into_iter().enumerate() {
                self.img[[y as usize, x as usize, c]] = v;
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, rgb: [f64; 3]) {
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    /// Pixels whose centre lies within `half_width` of the segment.
    fn thick_segment(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, rgb: [f64; 3]) {
        let (x0, x1) = (a.0.min(b.0) - half_width, a.0.max(b.0) + half_width);
        let (y0, y1) = (a.1.min(b.1) - half_width, a.1.max(b.1) + half_width);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0.floor() as i64..=y1.ceil() as i64 {
            for x in x0.floor() as i64..=x1.ceil() as i64 {
                let (px, py) = (x as f64 - a.0, y as f64 - a.1);
                let t = if len2 > 0.0 {
                    ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= half_width * half_width {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    /// One-pixel Bresenham line between rounded endpoints.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), rgb: [f64; 3]) {
        let (mut x, mut y) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let dx = (x1 - x).abs();
        let dy = -(y1 - y).abs();
        let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x, y, rgb);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

fn unit(rgb: [u8; 3], scale: f64) -> [f64; 3] {
    rgb.map(|c| (f64::from(c) * scale).floor() / 255.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn body_joints(kps: &KeypointFrame, threshold: f64) -> [Option<(f64, f64)>; 18] {
    let at = |i: usize| {
        let p: Keypoint = kps.points[i];
        p.is_visible(threshold).then_some((p.x, p.y))
    };
    OPENPOSE_FROM_COCO.map(|src| match src {
        Some(i) => at(i),
        None => match (at(5), at(6)) {
            (Some(l), Some(r)) => Some(((l.0 + r.0) / 2.0, (l.1 + r.1) / 2.0)),
            _ => None,
        },
    })
}

/// Draws the skeleton of `kps` on a black `height x width` RGB canvas.
///
/// Body limbs are thick segments in the OpenPose palette with coloured joint
/// discs; hand bones are one-pixel lines coloured around the hue circle with
/// blue single-pixel joints; face points are white dots. Keypoints below the
/// style's confidence threshold are skipped, as is anything touching them.
pub fn render_pose_map(
    kps: &KeypointFrame,
    height: usize,
    width: usize,
    style: &RenderStyle,
) -> FrameTensor {
    let mut canvas = Canvas {
        img: Array3::zeros((height, width, 3)),
    };
    // Scale keypoints from source resolution onto the canvas.
    let sx = if kps.width > 0 {
        width as f64 / kps.width as f64
    } else {
        1.0
    };
    let sy = if kps.height > 0 {
        height as f64 / kps.height as f64
    } else {
        1.0
    };
    let scale = |p: (f64, f64)| (p.0 * sx, p.1 * sy);

    let joints = body_joints(kps, style.threshold);
    for (i, &(a, b)) in BODY_LIMBS.iter().enumerate() {
        if let (Some(pa), Some(pb)) = (joints[a], joints[b]) {
            canvas.thick_segment(
                scale(pa),
                scale(pb),
                style.limb_half_width,
                unit(LIMB_COLORS[i], 0.6),
            );
        }
    }
    for (i, j) in joints.iter().enumerate() {
        if let Some(p) = j {
            let (x, y) = scale(*p);
            canvas.disc(x, y, style.joint_radius, unit(LIMB_COLORS[i], 1.0));
        }
    }

    for range in [LEFT_HAND, RIGHT_HAND] {
        let base = *range.start();
        let pt = |k: usize| {
            let p = kps.points[base + k];
            p.is_visible(style.threshold).then(|| scale((p.x, p.y)))
        };
        for (e, &(a, b)) in HAND_BONES.iter().enumerate() {
            if let (Some(pa), Some(pb)) = (pt(a), pt(b)) {
                canvas.line(
                    pa,
                    pb,
                    hsv_to_rgb(e as f64 / HAND_BONES.len() as f64, 1.0, 1.0),
                );
            }
        }
        for k in 0..21 {
            if let Some((x, y)) = pt(k) {
                canvas.put(x.round() as i64, y.round() as i64, [0.0, 0.0, 1.0]);
            }
        }
    }

    for p in kps.visible(FACE, style.threshold) {
        let (x, y) = scale((p.x, p.y));
        if style.face_dot_radius > 0.0 {
            canvas.disc(x, y, style.face_dot_radius, [1.0, 1.0, 1.0]);
        } else {
            canvas.put(x.round() as i64, y.round() as i64, [1.0, 1.0, 1.0]);
        }
    }
    canvas.img
}
