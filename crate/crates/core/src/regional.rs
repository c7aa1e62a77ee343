//! Regional supervision: masked face/hand reconstruction losses, the face
//! embedding cosine loss, and the combined regional-stage objective.

use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::driving::{KeypointFrame, PixelBox, FACE, LEFT_HAND, RIGHT_HAND};
use crate::error::{Error, Result};
use crate::frame::{ensure_same_shape, to_gray, FrameTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Face,
    LeftHand,
    RightHand,
}

impl RegionKind {
    pub const ALL: [RegionKind; 3] = [
        RegionKind::Face,
        RegionKind::LeftHand,
        RegionKind::RightHand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Face => "face",
            RegionKind::LeftHand => "left_hand",
            RegionKind::RightHand => "right_hand",
        }
    }

    /// Default box padding: 0.25 for faces, 0.35 for hands.
    pub fn default_pad_ratio(self) -> f64 {
        match self {
            RegionKind::Face => 0.25,
            RegionKind::LeftHand | RegionKind::RightHand => 0.35,
        }
    }

    fn keypoints(self) -> std::ops::RangeInclusive<usize> {
        match self {
            RegionKind::Face => FACE,
            RegionKind::LeftHand => LEFT_HAND,
            RegionKind::RightHand => RIGHT_HAND,
        }
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary `H x W` indicator of a face or hand region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub kind: RegionKind,
    pub cells: Array2<bool>,
}

impl RegionMask {
    pub fn new(kind: RegionKind, cells: Array2<bool>) -> Self {
        Self { kind, cells }
    }

    /// Number of selected pixels.
    pub fn mass(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cells.dim()
    }

    /// Smallest box holding every selected pixel.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for ((y, x), &on) in self.cells.indexed_iter() {
            if !on {
                continue;
            }
            let (x, y) = (x as i64, y as i64);
            b = Some(match b {
                None => PixelBox {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                },
                Some(b) => PixelBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        b
    }
}

/// Mask covering the padded bounding box of a region's confident keypoints,
/// clamped to a `height x width` image.
pub fn region_mask_from_keypoints(
    kps: &KeypointFrame,
    kind: RegionKind,
    pad_ratio: f64,
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<RegionMask> {
    let unavailable = || Error::RegionUnavailable(format!("{kind} in frame {}", kps.index));
    let bbox = PixelBox::around(kps.visible(kind.keypoints(), threshold), pad_ratio)
        .ok_or_else(unavailable)?
        .clamp_to(width, height)
        .ok_or_else(unavailable)?;
    let mut cells = Array2::from_elem((height, width), false);
    cells
        .slice_mut(s![
            bbox.y0 as usize..=bbox.y1 as usize,
            bbox.x0 as usize..=bbox.x1 as usize
        ])
        .fill(true);
    Ok(RegionMask { kind, cells })
}

/// Squared error summed over masked pixels and all channels, divided by the
/// number of masked pixels (the mask is counted once, not per channel).
pub fn masked_mse(tgt: &FrameTensor, pre: &FrameTensor, mask: &RegionMask) -> Result<f64> {
    ensure_same_shape("masked_mse", &tgt.raw_dim(), &pre.raw_dim())?;
    let (h, w, _) = tgt.dim();
    if mask.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "mask is {:?} but images are {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mass = mask.mass();
    if mass == 0 {
        return Err(Error::EmptyRegion(mask.kind.to_string()));
    }
    let mut sum = 0.0;
    for ((t_px, p_px), &on) in tgt
        .lanes(Axis(2))
        .into_iter()
        .zip(pre.lanes(Axis(2)))
        .zip(mask.cells.iter())
    {
        if on {
            sum += t_px
                .iter()
                .zip(p_px.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(sum / mass as f64)
}

/// Identity embedding of a face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding(pub Vec<f64>);

impl FaceEmbedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `1 - cos(psi_ref, psi_pre)`, in `[0, 2]`.
pub fn cosine_loss(psi_ref: &FaceEmbedding, psi_pre: &FaceEmbedding) -> Result<f64> {
    if psi_ref.0.len() != psi_pre.0.len() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            psi_ref.0.len(),
            psi_pre.0.len()
        )));
    }
    if psi_ref.0.iter().chain(&psi_pre.0).any(|v| !v.is_finite()) {
        return Err(Error::invalid("embedding has non-finite entries"));
    }
    let (na, nb) = (psi_ref.norm(), psi_pre.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine loss of a zero embedding"));
    }
    let dot: f64 = psi_ref.0.iter().zip(&psi_pre.0).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Source of face identity embeddings.
pub trait EmbeddingProvider: Sync {
    fn embed(&self, image: &FrameTensor, face: &RegionMask) -> Result<FaceEmbedding>;
}

/// Deterministic stand-in for a face recognition network: the face box is
/// area-resampled to a `side x side` luminance grid, flattened and
/// L2-normalised (`d = side^2`, 256 by default).
#[derive(Debug, Clone, Copy)]
pub struct DownsampleEmbedder {
    pub side: usize,
}

impl Default for DownsampleEmbedder {
    fn default() -> Self {
        Self { side: 16 }
    }
}

fn area_resample(src: ArrayView2<'_, f64>, side: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let (fy, fx) = (h as f64 / side as f64, w as f64 / side as f64);
    Array2::from_shape_fn((side, side), |(oy, ox)| {
        let (y0, y1) = (oy as f64 * fy, (oy + 1) as f64 * fy);
        let (x0, x1) = (ox as f64 * fx, (ox + 1) as f64 * fx);
        let mut acc = 0.0;
        for y in y0.floor() as usize..(y1.ceil() as usize).min(h) {
            let wy = (y1.min((y + 1) as f64) - y0.max(y as f64)).max(0.0);
            for x in x0.floor() as usize..(x1.ceil() as usize).min(w) {
                let wx = (x1.min((x + 1) as f64) - x0.max(x as f64)).max(0.0);
                acc += wy * wx * src[[y, x]];
            }
        }
        acc / (fy * fx)
    })
}

impl EmbeddingProvider for DownsampleEmbedder {
    fn embed(&self, image: &FrameTensor, face: &RegionMask) -> Result<FaceEmbedding> {
        let (h, w, _) = image.dim();
        if face.dim() != (h, w) {
            return Err(Error::invalid("face mask and image sizes differ"));
        }
        let b = face
            .bounding_box()
            .ok_or_else(|| Error::EmptyRegion(face.kind.to_string()))?;
        let gray = to_gray(image.view())?;
        let crop = gray.slice(s![
            b.y0 as usize..=b.y1 as usize,
            b.x0 as usize..=b.x1 as usize
        ]);
        let grid = area_resample(crop, self.side);
        let norm = grid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("face crop is black; embedding undefined"));
        }
        Ok(FaceEmbedding(grid.iter().map(|v| v / norm).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub face: f64,
    pub hand: f64,
    pub cos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            face: 1.0,
            hand: 1.0,
            cos: 1.0,
        }
    }
}

/// Everything the regional-stage loss can use. Missing masks or embeddings
/// skip their term.
#[derive(Debug, Clone, Copy)]
pub struct RegionalInputs<'a> {
    pub target: &'a FrameTensor,
    pub predicted: &'a FrameTensor,
    pub face_mask: Option<&'a RegionMask>,
    pub left_hand_mask: Option<&'a RegionMask>,
    pub right_hand_mask: Option<&'a RegionMask>,
    pub psi_ref: Option<&'a FaceEmbedding>,
    pub psi_pre: Option<&'a FaceEmbedding>,
}

/// Per-term values of the regional loss; `None` marks a skipped term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub face: Option<f64>,
    pub left_hand: Option<f64>,
    pub right_hand: Option<f64>,
    pub cos: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Names of the terms that were not computed.
    pub fn skipped(&self) -> Vec<&'static str> {
        [
            ("face", self.face),
            ("left_hand", self.left_hand),
            ("right_hand", self.right_hand),
            ("cos", self.cos),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.is_none().then_some(n))
        .collect()
    }

    pub const CSV_HEADER: &'static str = "frame,face,left_hand,right_hand,cos,total";

    /// `frame,face,left_hand,right_hand,cos,total`, skipped terms blank.
    pub fn csv_row(&self, frame: &str) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        format!(
            "{frame},{},{},{},{},{:.9}",
            cell(self.face),
            cell(self.left_hand),
            cell(self.right_hand),
            cell(self.cos),
            self.total
        )
    }
}

/// `w_face L_face + w_hand (L_left + L_right) + w_cos L_cos` over the terms
/// that are available.
pub fn regional_stage_loss(
    inputs: &RegionalInputs<'_>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let term = |mask: Option<&RegionMask>| -> Result<Option<f64>> {
        mask.map(|m| masked_mse(inputs.target, inputs.predicted, m))
            .transpose()
    };
    let face = term(inputs.face_mask)?;
    let left_hand = term(inputs.left_hand_mask)?;
    let right_hand = term(inputs.right_hand_mask)?;
    let cos = match (inputs.psi_ref, inputs.psi_pre) {
        (Some(a), Some(b)) => Some(cosine_loss(a, b)?),
        _ => None,
    };
    if face.is_none() && left_hand.is_none() && right_hand.is_none() && cos.is_none() {
        return Err(Error::invalid("regional loss has no computable term"));
    }
    let total = weights.face * face.unwrap_or(0.0)
        + weights.hand * (left_hand.unwrap_or(0.0) + right_hand.unwrap_or(0.0))
        + weights.cos * cos.unwrap_or(0.0);
    Ok(LossBreakdown {
        face,
        left_hand,
        right_hand,
        cos,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driving::Keypoint;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;

    fn plane(rows: &[[f64; 2]; 2]) -> FrameTensor {
        Array3::from_shape_fn((2, 2, 1), |(y, x, _)| rows[y][x])
    }

    fn full(kind: RegionKind, h: usize, w: usize) -> RegionMask {
        RegionMask::new(kind, Array2::from_elem((h, w), true))
    }

    #[test]
    fn masked_mse_by_hand() {
        let tgt = plane(&[[0.0, 0.0], [1.0, 1.0]]);
        let pre = plane(&[[0.0, 1.0], [1.0, 0.0]]);
        let mask = RegionMask::new(RegionKind::Face, arr2(&[[true, true], [false, false]]));
        assert_eq!(masked_mse(&tgt, &pre, &mask).unwrap(), 0.5);
        assert_eq!(masked_mse(&tgt, &tgt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn full_mask_matches_plain_mse_per_pixel() {
        let tgt = Array3::from_shape_fn((3, 4, 3), |(y, x, c)| (y + 2 * x + c) as f64 / 10.0);
        let pre = Array3::from_shape_fn((3, 4, 3), |(y, x, c)| (y * x + c) as f64 / 7.0);
        let got = masked_mse(&tgt, &pre, &full(RegionKind::Face, 3, 4)).unwrap();
        let sse: f64 = tgt
            .iter()
            .zip(pre.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        // numerator over channels, denominator over pixels
        assert!((got - sse / 12.0).abs() < 1e-12);
        // single channel: exactly the mean squared error
        let t1 = tgt.slice(s![.., .., 0..1]).to_owned();
        let p1 = pre.slice(s![.., .., 0..1]).to_owned();
        let mse1: f64 = t1
            .iter()
            .zip(p1.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 12.0;
        assert!(
            (masked_mse(&t1, &p1, &full(RegionKind::Face, 3, 4)).unwrap() - mse1).abs() < 1e-15
        );
    }

    #[test]
    fn masked_mse_errors() {
        let a = Array3::zeros((2, 2, 1));
        let empty = RegionMask::new(RegionKind::LeftHand, Array2::from_elem((2, 2), false));
        assert!(matches!(
            masked_mse(&a, &a, &empty),
            Err(Error::EmptyRegion(_))
        ));
        assert!(masked_mse(&a, &Array3::zeros((2, 3, 1)), &full(RegionKind::Face, 2, 2)).is_err());
        assert!(masked_mse(&a, &a, &full(RegionKind::Face, 3, 2)).is_err());
    }

    #[test]
    fn cosine_anchors() {
        let a = FaceEmbedding(vec![1.0, 2.0, -0.5]);
        assert!(cosine_loss(&a, &a).unwrap().abs() < 1e-15);
        let x = FaceEmbedding(vec![1.0, 0.0]);
        let y = FaceEmbedding(vec![0.0, 3.0]);
        assert_eq!(cosine_loss(&x, &y).unwrap(), 1.0);
        let neg = FaceEmbedding(a.0.iter().map(|v| -v).collect());
        assert_eq!(cosine_loss(&a, &neg).unwrap(), 2.0);
        assert!(cosine_loss(&x, &FaceEmbedding(vec![0.0, 0.0])).is_err());
        assert!(cosine_loss(&x, &a).is_err());
    }

    fn face_frame(xs: (f64, f64), ys: (f64, f64)) -> KeypointFrame {
        let mut kps = KeypointFrame::empty(0, 200, 200);
        kps.points[*FACE.start()] = Keypoint {
            x: xs.0,
            y: ys.0,
            confidence: 1.0,
        };
        kps.points[FACE.start() + 1] = Keypoint {
            x: xs.1,
            y: ys.1,
            confidence: 1.0,
        };
        kps.points[FACE.start() + 2] = Keypoint {
            x: 120.0,
            y: 70.0,
            confidence: 1.0,
        };
        kps
    }

    #[test]
    fn mask_from_keypoints_box() {
        let kps = face_frame((100.0, 140.0), (50.0, 90.0));
        let m = region_mask_from_keypoints(&kps, RegionKind::Face, 0.0, 200, 200, 0.3).unwrap();
        assert_eq!(m.mass(), 41 * 41);
        assert_eq!(
            m.bounding_box().unwrap(),
            PixelBox {
                x0: 100,
                y0: 50,
                x1: 140,
                y1: 90
            }
        );
        let m = region_mask_from_keypoints(&kps, RegionKind::Face, 0.25, 200, 200, 0.3).unwrap();
        assert_eq!(
            m.bounding_box().unwrap(),
            PixelBox {
                x0: 90,
                y0: 40,
                x1: 150,
                y1: 100
            }
        );
    }

    #[test]
    fn single_keypoint_mask_is_one_pixel() {
        let mut kps = KeypointFrame::empty(0, 50, 50);
        kps.points[100] = Keypoint {
            x: 7.0,
            y: 9.0,
            confidence: 0.8,
        };
        let m = region_mask_from_keypoints(&kps, RegionKind::LeftHand, 0.0, 50, 50, 0.3).unwrap();
        assert_eq!(m.mass(), 1);
        assert!(m.cells[[9, 7]]);
        assert!(matches!(
            region_mask_from_keypoints(&kps, RegionKind::RightHand, 0.0, 50, 50, 0.3),
            Err(Error::RegionUnavailable(_))
        ));
    }

    #[test]
    fn stage_loss_combinations() {
        let img = Array3::from_elem((4, 4, 3), 0.5);
        let m = full(RegionKind::Face, 4, 4);
        let psi = FaceEmbedding(vec![0.2, 0.4]);
        let zero = regional_stage_loss(
            &RegionalInputs {
                target: &img,
                predicted: &img,
                face_mask: Some(&m),
                left_hand_mask: Some(&m),
                right_hand_mask: Some(&m),
                psi_ref: Some(&psi),
                psi_pre: Some(&psi),
            },
            &LossWeights::default(),
        )
        .unwrap();
        assert!(zero.total.abs() < 1e-15);
        assert!(zero.skipped().is_empty());

        // Constructed so that L_face = 0.5, each hand = 0.25, L_cos = 0.1.
        let tgt = Array3::zeros((2, 2, 1));
        let pre = Array3::from_shape_fn((2, 2, 1), |(y, x, _)| match (y, x) {
            (0, 0) => 0.5f64.sqrt(),
            (0, 1) => 0.5f64.sqrt(),
            _ => 0.5,
        });
        let face = RegionMask::new(RegionKind::Face, arr2(&[[true, true], [false, false]]));
        let left = RegionMask::new(RegionKind::LeftHand, arr2(&[[false, false], [true, false]]));
        let right = RegionMask::new(
            RegionKind::RightHand,
            arr2(&[[false, false], [false, true]]),
        );
        let cos_target = 0.9f64;
        let a = FaceEmbedding(vec![1.0, 0.0]);
        let b = FaceEmbedding(vec![cos_target, (1.0 - cos_target * cos_target).sqrt()]);
        let inputs = RegionalInputs {
            target: &tgt,
            predicted: &pre,
            face_mask: Some(&face),
            left_hand_mask: Some(&left),
            right_hand_mask: Some(&right),
            psi_ref: Some(&a),
            psi_pre: Some(&b),
        };
        let out = regional_stage_loss(&inputs, &LossWeights::default()).unwrap();
        assert!((out.face.unwrap() - 0.5).abs() < 1e-12);
        assert!((out.left_hand.unwrap() - 0.25).abs() < 1e-12);
        assert!((out.cos.unwrap() - 0.1).abs() < 1e-12);
        assert!((out.total - 1.1).abs() < 1e-12);

        let occluded = RegionalInputs {
            right_hand_mask: None,
            ..inputs
        };
        let out = regional_stage_loss(&occluded, &LossWeights::default()).unwrap();
        assert_eq!(out.skipped(), vec!["right_hand"]);
        assert!((out.total - 0.85).abs() < 1e-12);
        assert_eq!(out.csv_row("3").split(',').nth(3), Some(""));

        let nothing = RegionalInputs {
            face_mask: None,
            left_hand_mask: None,
            right_hand_mask: None,
            psi_ref: None,
            ..inputs
        };
        assert!(regional_stage_loss(&nothing, &LossWeights::default()).is_err());
    }

    #[test]
    fn downsample_embedder() {
        let img = Array3::from_shape_fn((40, 40, 3), |(y, x, _)| ((x + y) % 9) as f64 / 9.0 + 0.05);
        let mask = full(RegionKind::Face, 40, 40);
        let e = DownsampleEmbedder::default().embed(&img, &mask).unwrap();
        assert_eq!(e.0.len(), 256);
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert!(cosine_loss(&e, &e).unwrap().abs() < 1e-12);
        let black = Array3::zeros((40, 40, 3));
        assert!(DownsampleEmbedder::default().embed(&black, &mask).is_err());
    }

    #[test]
    fn area_resample_preserves_mean() {
        let src = Array2::from_shape_fn((13, 7), |(y, x)| (y * 7 + x) as f64);
        let out = area_resample(src.view(), 4);
        assert!((out.mean().unwrap() - src.mean().unwrap()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn masked_mse_symmetry_and_scaling(
            a in prop::collection::vec(-1.0f64..1.0, 48),
            b in prop::collection::vec(-1.0f64..1.0, 48),
            bits in prop::collection::vec(any::<bool>(), 16),
            c in prop::sample::select(vec![0.5f64, 2.0, 4.0, -0.25]),
        ) {
            prop_assume!(bits.iter().any(|&x| x));
            let tgt = Array3::from_shape_vec((4, 4, 3), a).unwrap();
            let pre = Array3::from_shape_vec((4, 4, 3), b).unwrap();
            let mask = RegionMask::new(RegionKind::Face, Array2::from_shape_vec((4, 4), bits).unwrap());
            let base = masked_mse(&tgt, &pre, &mask).unwrap();
            prop_assert_eq!(base, masked_mse(&pre, &tgt, &mask).unwrap());
            let scaled = masked_mse(&(&tgt * c), &(&pre * c), &mask).unwrap();
            prop_assert_eq!(scaled, c * c * base);
        }

        #[test]
        fn cosine_scale_invariance(
            a in prop::collection::vec(-1.0f64..1.0, 8),
            b in prop::collection::vec(-1.0f64..1.0, 8),
            k in 0.01f64..100.0,
        ) {
            let (ea, eb) = (FaceEmbedding(a.clone()), FaceEmbedding(b));
            prop_assume!(ea.norm() > 1e-3 && eb.norm() > 1e-3);
            let base = cosine_loss(&ea, &eb).unwrap();
            let scaled = FaceEmbedding(a.iter().map(|v| v * k).collect());
            prop_assert!((cosine_loss(&scaled, &eb).unwrap() - base).abs() <= 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&base));
        }

        #[test]
        fn keypoint_masks_are_rectangles(
            pts in prop::collection::vec((-20.0f64..80.0, -20.0f64..80.0), 1..10),
            pad in 0.0f64..1.0,
        ) {
            let mut kps = KeypointFrame::empty(0, 60, 60);
            for (i, (x, y)) in pts.iter().enumerate() {
                kps.points[LEFT_HAND.start() + i] = Keypoint { x: *x, y: *y, confidence: 1.0 };
            }
            match region_mask_from_keypoints(&kps, RegionKind::LeftHand, pad, 60, 60, 0.3) {
                Ok(m) => {
                    let b = m.bounding_box().unwrap();
                    prop_assert!(b.within(60, 60));
                    prop_assert_eq!(m.mass() as i64, b.width() * b.height());
                }
                Err(e) => prop_assert!(matches!(e, Error::RegionUnavailable(_))),
            }
        }
    }
}
