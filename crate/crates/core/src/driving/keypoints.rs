//! COCO-WholeBody keypoints: ingestion, region lookup and horizontal
//! flipping.

use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameTensor;

/// Points per frame in the COCO-WholeBody layout.
pub const NUM_KEYPOINTS: usize = 133;
pub const BODY: RangeInclusive<usize> = 0..=16;
pub const FEET: RangeInclusive<usize> = 17..=22;
pub const FACE: RangeInclusive<usize> = 23..=90;
pub const LEFT_HAND: RangeInclusive<usize> = 91..=111;
pub const RIGHT_HAND: RangeInclusive<usize> = 112..=132;

/// Default confidence below which a keypoint is treated as missing.
pub const DEFAULT_CONFIDENCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl From<[f64; 3]> for Keypoint {
    fn from([x, y, confidence]: [f64; 3]) -> Self {
        Keypoint { x, y, confidence }
    }
}

impl From<Keypoint> for [f64; 3] {
    fn from(k: Keypoint) -> Self {
        [k.x, k.y, k.confidence]
    }
}

impl Keypoint {
    pub const MISSING: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn is_visible(&self, threshold: f64) -> bool {
        self.confidence >= threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub const BOTH: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn indices(self) -> RangeInclusive<usize> {
        match self {
            Hand::Left => LEFT_HAND,
            Hand::Right => RIGHT_HAND,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

/// One frame of whole-body keypoints in source pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Keypoint>,
}

impl KeypointFrame {
    /// A frame with every keypoint missing.
    pub fn empty(index: usize, width: usize, height: usize) -> Self {
        Self {
            index,
            width,
            height,
            points: vec![Keypoint::MISSING; NUM_KEYPOINTS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != NUM_KEYPOINTS {
            return Err(Error::invalid(format!(
                "frame {} has {} keypoints, expected {NUM_KEYPOINTS}",
                self.index,
                self.points.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) || !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::invalid(format!(
                    "frame {} keypoint {i} is malformed: {p:?}",
                    self.index
                )));
            }
        }
        Ok(())
    }

    /// Keypoints in `range` whose confidence reaches `threshold`.
    pub fn visible(
        &self,
        range: RangeInclusive<usize>,
        threshold: f64,
    ) -> impl Iterator<Item = &Keypoint> + '_ {
        self.points[range]
            .iter()
            .filter(move |p| p.is_visible(threshold))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    points: Vec<Keypoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VideoRecord {
    video: String,
    width: usize,
    height: usize,
    frames: Vec<FrameRecord>,
}

/// All keypoint frames of one video, as stored in the ingestion JSON:
/// `{ "video", "width", "height", "frames": [ { "index", "points": [[x, y, c], ...] } ] }`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointVideo {
    pub video: String,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<KeypointFrame>,
}

impl KeypointVideo {
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let rec: VideoRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let frames = rec
            .frames
            .into_iter()
            .map(|f| KeypointFrame {
                index: f.index,
                width: rec.width,
                height: rec.height,
                points: f.points,
            })
            .collect();
        let video = KeypointVideo {
            video: rec.video,
            width: rec.width,
            height: rec.height,
            frames,
        };
        for f in &video.frames {
            f.validate().map_err(|e| e.to_string())?;
        }
        Ok(video)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn to_json(&self) -> String {
        let rec = VideoRecord {
            video: self.video.clone(),
            width: self.width,
            height: self.height,
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    index: f.index,
                    points: f.points.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&rec).expect("keypoint video serializes")
    }
}

const BODY_PAIRS: [(usize, usize); 8] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 8),
    (9, 10),
    (11, 12),
    (13, 14),
    (15, 16),
];
const FEET_PAIRS: [(usize, usize); 3] = [(17, 20), (18, 21), (19, 22)];
// 68-point face, indices relative to the start of the face block.
const FACE_PAIRS: [(usize, usize); 29] = [
    (0, 16),
    (1, 15),
    (2, 14),
    (3, 13),
    (4, 12),
    (5, 11),
    (6, 10),
    (7, 9),
    (17, 26),
    (18, 25),
    (19, 24),
    (20, 23),
    (21, 22),
    (31, 35),
    (32, 34),
    (36, 45),
    (37, 44),
    (38, 43),
    (39, 42),
    (40, 47),
    (41, 46),
    (48, 54),
    (49, 53),
    (50, 52),
    (55, 59),
    (56, 58),
    (60, 64),
    (61, 63),
    (65, 67),
];

/// Mirror partner of every keypoint index under a horizontal flip.
pub fn flip_permutation() -> [usize; NUM_KEYPOINTS] {
    let mut perm: [usize; NUM_KEYPOINTS] = std::array::from_fn(|i| i);
    let mut swap = |a: usize, b: usize| {
        perm[a] = b;
        perm[b] = a;
    };
    for (a, b) in BODY_PAIRS.into_iter().chain(FEET_PAIRS) {
        swap(a, b);
    }
    let face0 = *FACE.start();
    for (a, b) in FACE_PAIRS {
        swap(face0 + a, face0 + b);
    }
    for i in 0..21 {
        swap(LEFT_HAND.start() + i, RIGHT_HAND.start() + i);
    }
    perm
}

/// Mirrors a frame and its keypoints left to right: pixel columns are
/// reversed, `x -> W - 1 - x`, and left/right keypoint pairs trade places.
///
/// Applying it twice restores the input exactly for any coordinates where
/// `W - 1 - x` is representable, e.g. quarter-pixel positions.
pub fn flip_horizontal(
    image: &FrameTensor,
    kps: &KeypointFrame,
) -> Result<(FrameTensor, KeypointFrame)> {
    let (h, w, _) = image.dim();
    if w != kps.width || h != kps.height {
        return Err(Error::invalid(format!(
            "image is {w}x{h} but keypoints are for {}x{}",
            kps.width, kps.height
        )));
    }
    kps.validate()?;
    let flipped_img = image.slice(s![.., ..;-1, ..]).to_owned();
    debug_assert_eq!(flipped_img.len_of(Axis(1)), w);
    let perm = flip_permutation();
    let mirror = (w - 1) as f64;
    let points = (0..NUM_KEYPOINTS)
        .map(|i| {
            let p = kps.points[perm[i]];
            Keypoint {
                x: mirror - p.x,
                ..p
            }
        })
        .collect();
    Ok((
        flipped_img,
        KeypointFrame {
            points,
            ..kps.clone()
        },
    ))
}
