//! Binary 8-bit PGM (P5) via the `image` crate.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use super::Image;
use crate::error::{Error, Result};

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::DecodeError {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Read a P5 file with maxval 255 into `[0, 1]` intensities `v / 255`.
pub fn load_bscan(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| decode_err(path, e))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| decode_err(path, e))?;
    let header = decoder.header();
    if header.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
        return Err(decode_err(path, "not a binary graymap (P5)"));
    }
    if header.maximal_sample() != 255 {
        return Err(decode_err(path, format!("maxval {} is not 255", header.maximal_sample())));
    }
    let luma = DynamicImage::from_decoder(decoder)
        .map_err(|e| decode_err(path, e))?
        .into_luma8();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data).map_err(|e| decode_err(path, e))
}

/// Quantize to 8 bits (round to nearest, clamped) and write P5.
pub fn save_bscan(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => decode_err(path, other),
        })
}
