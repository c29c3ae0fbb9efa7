//! PNG/JPEG reading and writing. 8-bit quantization happens here and nowhere else.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::colorspace::RgbImage;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error(transparent)]
    Fs(#[from] std::io::Error),
    #[error("label value {0} does not fit in 16 bits")]
    LabelOverflow(u32),
    #[error("expected a single-channel 16-bit PNG, got {0:?}")]
    NotLabels(image::ColorType),
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn from_dynamic(img: DynamicImage) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut px = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            px[[y as usize, x as usize, c]] = p[c] as f32 / 255.0;
        }
    }
    RgbImage::new(px).expect("decoded bytes are always in range")
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// PNG/JPEG files directly inside `dir`, sorted by path.
pub fn image_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Every image in `dir` keyed by file stem, in path order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>, IoError> {
    image_files(dir)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((stem, load_rgb(&p)?))
        })
        .collect()
}

/// Gray inputs are replicated to three channels.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage, IoError> {
    Ok(from_dynamic(image::open(path)?))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, IoError> {
    Ok(from_dynamic(image::load_from_memory(bytes)?))
}

fn to_buffer(img: &RgbImage) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let [r, g, b] = img.get(y as usize, x as usize);
        Rgb([to_byte(r), to_byte(g), to_byte(b)])
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, IoError> {
    let mut out = Cursor::new(Vec::new());
    to_buffer(img).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Format is chosen from the extension (`.png`, `.jpg`, `.jpeg`).
pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), IoError> {
    to_buffer(img).save(path)?;
    Ok(())
}

pub fn encode_labels_png(labels: &Array2<u32>) -> Result<Vec<u8>, IoError> {
    let (h, w) = labels.dim();
    let mut raw = Vec::with_capacity(h * w);
    for &v in labels.iter() {
        raw.push(u16::try_from(v).map_err(|_| IoError::LabelOverflow(v))?);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from labels");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Accepts 16-bit or 8-bit single-channel PNGs.
pub fn decode_labels_png(bytes: &[u8]) -> Result<Array2<u32>, IoError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<u32> = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => return Err(IoError::NotLabels(other.color())),
    };
    Ok(Array2::from_shape_vec((h, w), values).expect("buffer sized from header"))
}

pub fn save_labels_png(labels: &Array2<u32>, path: impl AsRef<Path>) -> Result<(), IoError> {
    std::fs::write(path, encode_labels_png(labels)?)?;
    Ok(())
}

pub fn load_labels_png(path: impl AsRef<Path>) -> Result<Array2<u32>, IoError> {
    decode_labels_png(&std::fs::read(path)?)
}

/// Single-channel 8-bit PNG from values in `[0, 1]`.
pub fn encode_gray_png(values: &Array2<f32>) -> Result<Vec<u8>, IoError> {
    let (h, w) = values.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_byte(values[[y as usize, x as usize]])]));
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Binary mask as an 8-bit PNG (0 / 255).
pub fn save_mask_png(mask: &Array2<u8>, path: impl AsRef<Path>) -> Result<(), IoError> {
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    buf.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_the_byte_grid() {
        let img = RgbImage::from_fn(3, 5, |y, x| [(y * 40) as f32 / 255.0, (x * 50) as f32 / 255.0, 1.0])
            .unwrap();
        let back = decode_rgb(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn label_png_keeps_16_bit_ids() {
        let labels = Array2::from_shape_fn((4, 3), |(y, x)| (y * 1000 + x * 7) as u32);
        let back = decode_labels_png(&encode_labels_png(&labels).unwrap()).unwrap();
        assert_eq!(back, labels);
        assert!(matches!(
            encode_labels_png(&Array2::from_elem((1, 1), 70_000)),
            Err(IoError::LabelOverflow(70_000))
        ));
    }

    #[test]
    fn eight_bit_label_png_is_accepted() {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(2, 1, |x, _| Luma([x as u8 * 3]));
        let mut bytes = Cursor::new(Vec::new());
        buf.write_to(&mut bytes, ImageFormat::Png).unwrap();
        let labels = decode_labels_png(&bytes.into_inner()).unwrap();
        assert_eq!(labels.as_slice().unwrap(), &[0, 3]);
    }
}
