//! Frame containers and PNG input/output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, Array4, ArrayView3, Dimension, Zip};

use crate::error::{Error, Result};

/// A single image or latent laid out as `(height, width, channels)`.
pub type FrameTensor = Array3<f64>;

/// A stack of frames laid out as `(frame, height, width, channels)`.
pub type FrameSequence = Array4<f64>;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub(crate) fn ensure_same_shape<D: Dimension>(what: &str, a: &D, b: &D) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.slice(),
            b.slice()
        )));
    }
    Ok(())
}

/// Collapses a frame to a single luminance plane. One-channel frames are
/// returned as-is; three or four channel frames use [`LUMA_WEIGHTS`] and
/// ignore alpha.
pub fn to_gray(frame: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    let (h, w, c) = frame.dim();
    match c {
        1 => Ok(frame.index_axis(ndarray::Axis(2), 0).to_owned()),
        3 | 4 => Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            LUMA_WEIGHTS[0] * frame[[y, x, 0]]
                + LUMA_WEIGHTS[1] * frame[[y, x, 1]]
                + LUMA_WEIGHTS[2] * frame[[y, x, 2]]
        })),
        _ => Err(Error::invalid(format!(
            "cannot convert {c}-channel frame to grayscale"
        ))),
    }
}

/// Reads a PNG as an RGB frame with values in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<FrameTensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0,
    ))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a one- or three-channel frame as an 8-bit PNG. Values are clamped
/// to `[0, 1]` and rounded to the nearest code.
pub fn save_png(frame: &FrameTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = frame.dim();
    let result = match c {
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(frame[[y as usize, x as usize, 0]])])
        })
        .save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                quantize(frame[[y, x, 0]]),
                quantize(frame[[y, x, 1]]),
                quantize(frame[[y, x, 2]]),
            ])
        })
        .save(path),
        _ => {
            return Err(Error::invalid(format!(
                "png output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a binary grid as a 1-bit grayscale PNG (white = selected).
pub fn save_bitmap_png(cells: &Array2<bool>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = cells.dim();
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for ((y, x), &on) in cells.indexed_iter() {
        if on {
            packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&packed).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Reads a mask PNG of any bit depth; any nonzero luma counts as selected.
pub fn load_bitmap_png(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] != 0
    }))
}

/// Elementwise `a * x + b * y` over equally shaped arrays.
pub(crate) fn axpby<D: Dimension>(
    a: f64,
    x: ndarray::ArrayView<'_, f64, D>,
    b: f64,
    y: ndarray::ArrayView<'_, f64, D>,
) -> ndarray::Array<f64, D> {
    Zip::from(&x).and(&y).map_collect(|&x, &y| a * x + b * y)
}
