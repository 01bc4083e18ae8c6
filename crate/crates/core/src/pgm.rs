//! Binary portable graymaps ("P5"), 8-bit only. Decoded samples are scaled
//! to 0..=255 whatever the file's maxval.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Graymap {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(
            pixels.len(),
            width * height,
            "pixel count must match dimensions"
        );
        Graymap {
            width,
            height,
            pixels,
        }
    }
}

pub fn read(path: &Path) -> Result<Graymap> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn write(path: &Path, map: &Graymap) -> Result<()> {
    fs::write(path, encode(map))?;
    Ok(())
}

pub fn encode(map: &Graymap) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.pixels.len() + 20);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .encode(
            map.pixels.as_slice(),
            map.width as u32,
            map.height as u32,
            ExtendedColorType::L8,
        )
        .expect("in-memory graymap encoding cannot fail");
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Graymap, String> {
    let decoder = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| e.to_string())?;
    if decoder.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
        return Err(format!(
            "expected a binary graymap (P5), found {:?}",
            decoder.subtype()
        ));
    }
    if decoder.color_type() != ColorType::L8 {
        return Err("only 8-bit graymaps are supported".into());
    }
    let (w, h) = decoder.dimensions();
    let mut pixels = vec![0; decoder.total_bytes() as usize];
    decoder.read_image(&mut pixels).map_err(|e| e.to_string())?;
    Ok(Graymap::new(w as usize, h as usize, pixels))
}
