//! PNG encoding for images and masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RgbImage};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn encode(buf: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    buf(&mut out).map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
        .expect("buffer matches dimensions");
    encode(|out| buf.write_to(out, ImageFormat::Png))
}

/// 8-bit single channel with foreground 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer matches dimensions");
    encode(|out| buf.write_to(out, ImageFormat::Png))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

/// Accepts only the values 0 and 255.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    let mut bits = Vec::with_capacity((w * h) as usize);
    for &v in img.as_raw() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{}: mask value {v} is not 0 or 255",
                    path.display()
                )))
            }
        }
    }
    BinaryMask::from_bits(w as usize, h as usize, bits)
}
