//! Regenerates the bundled preprocessing fixture:
//!
//! ```text
//! cargo run -p animdiff-cli --example make_fixture -- crates/cli/tests/fixtures/dance
//! ```
//!
//! Ten 64x48 frames of a textured figure waving both hands, with keypoints on
//! a quarter-pixel grid. The right hand is occluded (zero confidence) in
//! frame 3.

use std::path::PathBuf;

use animdiff::driving::{Keypoint, KeypointFrame, KeypointVideo, FACE, LEFT_HAND, RIGHT_HAND};
use animdiff::frame::save_png;
use ndarray::Array3;

const WIDTH: usize = 64;
const HEIGHT: usize = 48;
const FRAMES: usize = 10;
const OCCLUDED_FRAME: usize = 3;

fn quarter(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

fn kp(x: f64, y: f64) -> Keypoint {
    Keypoint {
        x: quarter(x),
        y: quarter(y),
        confidence: 0.9,
    }
}

fn hash(x: usize, y: usize) -> f64 {
    let mut h = (x as u32).wrapping_mul(0x9E37_79B1) ^ (y as u32).wrapping_mul(0x85EB_CA77);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    f64::from(h & 0xFF) / 255.0
}

fn hand_center(i: usize, right: bool) -> (f64, f64) {
    let phase = i as f64 * 0.7 + if right { 1.3 } else { 0.0 };
    let base_x = if right { 16.0 } else { 48.0 };
    (base_x + 5.0 * phase.sin(), 20.0 + 4.0 * phase.cos())
}

fn frame_keypoints(i: usize) -> KeypointFrame {
    let mut f = KeypointFrame::empty(i, WIDTH, HEIGHT);
    let sway = 1.5 * (i as f64 * 0.5).sin();
    let cx = 32.0 + sway;
    // nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
    let body = [
        (cx, 9.0),
        (cx + 1.5, 8.0),
        (cx - 1.5, 8.0),
        (cx + 3.0, 9.0),
        (cx - 3.0, 9.0),
        (cx + 7.0, 16.0),
        (cx - 7.0, 16.0),
    ];
    for (k, &(x, y)) in body.iter().enumerate() {
        f.points[k] = kp(x, y);
    }
    let (lx, ly) = hand_center(i, false);
    let (rx, ry) = hand_center(i, true);
    f.points[7] = kp((cx + 7.0 + lx) / 2.0, (16.0 + ly) / 2.0 + 3.0);
    f.points[8] = kp((cx - 7.0 + rx) / 2.0, (16.0 + ry) / 2.0 + 3.0);
    f.points[9] = kp(lx, ly + 3.0);
    f.points[10] = kp(rx, ry + 3.0);
    let lower = [
        (cx + 4.0, 30.0),
        (cx - 4.0, 30.0),
        (cx + 5.0, 37.0),
        (cx - 5.0, 37.0),
        (cx + 5.0, 44.0),
        (cx - 5.0, 44.0),
    ];
    for (k, &(x, y)) in lower.iter().enumerate() {
        f.points[11 + k] = kp(x, y);
    }
    for (j, k) in FACE.enumerate() {
        let a = j as f64 / 68.0 * std::f64::consts::TAU;
        f.points[k] = kp(cx + 3.5 * a.cos(), 8.0 + 4.0 * a.sin());
    }
    for (range, (hx, hy)) in [(LEFT_HAND, (lx, ly)), (RIGHT_HAND, (rx, ry))] {
        for (j, k) in range.enumerate() {
            let a = j as f64 / 21.0 * std::f64::consts::TAU;
            let r = if j == 0 {
                0.0
            } else {
                1.0 + (j % 4) as f64 * 0.75
            };
            f.points[k] = kp(hx + r * a.cos(), hy + r * a.sin());
        }
    }
    if i == OCCLUDED_FRAME {
        for k in RIGHT_HAND {
            f.points[k].confidence = 0.0;
        }
    }
    f
}

fn frame_image(i: usize, kps: &KeypointFrame) -> Array3<f64> {
    let hands: Vec<(f64, f64)> = [LEFT_HAND, RIGHT_HAND]
        .into_iter()
        .map(|r| (kps.points[*r.start()].x, kps.points[*r.start()].y))
        .collect();
    Array3::from_shape_fn((HEIGHT, WIDTH, 3), |(y, x, c)| {
        let bg = 0.2 + 0.3 * (x as f64 / WIDTH as f64) + 0.1 * c as f64;
        let tex = hash(x + 7 * i, y);
        let near_hand = hands
            .iter()
            .any(|&(hx, hy)| (x as f64 - hx).powi(2) + (y as f64 - hy).powi(2) < 16.0);
        if near_hand {
            0.4 + 0.15 * tex
        } else {
            bg + 0.1 * (tex - 0.5)
        }
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .ok_or("usage: make_fixture <out_dir>")?,
    );
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let frames: Vec<KeypointFrame> = (0..FRAMES).map(frame_keypoints).collect();
    for f in &frames {
        save_png(
            &frame_image(f.index, f),
            frames_dir.join(format!("{:06}.png", f.index)),
        )?;
    }
    let video = KeypointVideo {
        video: "dance".into(),
        width: WIDTH,
        height: HEIGHT,
        frames,
    };
    std::fs::write(out.join("keypoints.json"), video.to_json())?;
    Ok(())
}
