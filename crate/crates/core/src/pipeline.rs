//! Batch preprocessing of a video into conditioning assets: pose maps with
//! hand blur overlays, the blur-condition sidecar CSV and region masks.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::driving::{
    hand_blur_condition, overlay_blur_condition, render_pose_map, BlurCondition, BlurParams, Hand,
    KeypointVideo, RenderStyle,
};
use crate::error::{Error, Result};
use crate::frame::{load_png, save_bitmap_png, save_png};
use crate::regional::{region_mask_from_keypoints, RegionKind};

pub const BLUR_CSV_HEADER: &str = "frame,hand,vx,vy,speed,sharpness,valid";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub blur: BlurParams,
    pub render: RenderStyle,
    pub face_pad_ratio: f64,
    pub hand_mask_pad_ratio: f64,
    /// Worker threads; 0 uses every logical core.
    pub workers: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            blur: BlurParams::default(),
            render: RenderStyle::default(),
            face_pad_ratio: RegionKind::Face.default_pad_ratio(),
            hand_mask_pad_ratio: RegionKind::LeftHand.default_pad_ratio(),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub frames: usize,
    /// Blur conditions per frame, left hand first.
    pub conditions: Vec<[BlurCondition; 2]>,
    pub masks_written: usize,
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn frame_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs the motion-blur conditioning pipeline over a directory of frames and
/// their keypoints.
///
/// Writes under `out_dir`:
/// - `pose/NNNNNN.png`: pose maps with blur discs over valid hands,
/// - `masks/{face,left_hand,right_hand}/NNNNNN.png`: 1-bit region masks,
///   omitted where the region is not detected,
/// - `blur.csv`: one row per frame and hand.
///
/// Outputs depend only on the inputs and options, never on the worker count.
pub fn preprocess(
    frames_dir: impl AsRef<Path>,
    keypoints_json: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    opts: &PreprocessOptions,
) -> Result<PreprocessSummary> {
    let frames = list_pngs(frames_dir)?;
    let video = KeypointVideo::load(keypoints_json)?;
    if frames.len() != video.frames.len() {
        return Err(Error::invalid(format!(
            "found {} frame images but {} keypoint frames",
            frames.len(),
            video.frames.len()
        )));
    }
    let out_dir = out_dir.as_ref();
    let pose_dir = out_dir.join("pose");
    create_dir(&pose_dir)?;
    for kind in RegionKind::ALL {
        create_dir(&out_dir.join("masks").join(kind.name()))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;

    let results: Vec<([BlurCondition; 2], usize)> = pool.install(|| {
        frames
            .par_iter()
            .enumerate()
            .map(|(i, path)| {
                let kps = &video.frames[i];
                let prev = i.checked_sub(1).map(|p| &video.frames[p]);
                let image = load_png(path)?;
                let (h, w, _) = image.dim();
                if (w, h) != (video.width, video.height) {
                    return Err(Error::invalid(format!(
                        "{} is {w}x{h} but keypoints are for {}x{}",
                        path.display(),
                        video.width,
                        video.height
                    )));
                }
                let mut pose = render_pose_map(kps, h, w, &opts.render);
                let mut conds = [
                    BlurCondition::invalid(Hand::Left),
                    BlurCondition::invalid(Hand::Right),
                ];
                for (slot, hand) in Hand::BOTH.into_iter().enumerate() {
                    let (cond, bbox) = hand_blur_condition(&image, kps, prev, hand, &opts.blur)?;
                    if let Some(bbox) = bbox {
                        pose = overlay_blur_condition(
                            &pose,
                            bbox,
                            &cond,
                            opts.blur.v_max,
                            opts.blur.s_max,
                        )?;
                    }
                    conds[slot] = cond;
                }
                let name = frame_name(kps.index);
                save_png(&pose, pose_dir.join(&name))?;

                let mut masks = 0;
                for kind in RegionKind::ALL {
                    let pad = match kind {
                        RegionKind::Face => opts.face_pad_ratio,
                        _ => opts.hand_mask_pad_ratio,
                    };
                    match region_mask_from_keypoints(kps, kind, pad, h, w, opts.blur.threshold) {
                        Ok(mask) => {
                            save_bitmap_png(
                                &mask.cells,
                                out_dir.join("masks").join(kind.name()).join(&name),
                            )?;
                            masks += 1;
                        }
                        Err(Error::RegionUnavailable(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                Ok((conds, masks))
            })
            .collect::<Result<_>>()
    })?;

    let mut csv = String::from(BLUR_CSV_HEADER);
    csv.push('\n');
    for (kps, (conds, _)) in video.frames.iter().zip(&results) {
        for c in conds {
            csv.push_str(&c.csv_row(kps.index));
            csv.push('\n');
        }
    }
    let csv_path = out_dir.join("blur.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(PreprocessSummary {
        frames: frames.len(),
        masks_written: results.iter().map(|(_, m)| m).sum(),
        conditions: results.into_iter().map(|(c, _)| c).collect(),
    })
}
