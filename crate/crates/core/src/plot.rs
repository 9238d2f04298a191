//! 8-bit grayscale montages: the axial mid-slice of each frame, tiled
//! left to right.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value range mapped linearly onto `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const INTENSITY: Range = Range { lo: 0.0, hi: 1.0 };
    pub const SIGNED: Range = Range { lo: -1.0, hi: 1.0 };
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn to_u8(x: f64, r: Range) -> u8 {
    let t = ((x - r.lo) / (r.hi - r.lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Slice `L / 2` of an `(L, H, W)` volume as an `H x W` image.
pub fn axial_mid_slice(volume: &Tensor, r: Range) -> Result<GrayImage> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected an (L, H, W) volume, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let off = (s[0] / 2) * h * w;
    let pixels = volume.data()[off..off + h * w].iter().map(|&x| to_u8(x, r)).collect();
    Ok(GrayImage { width: w, height: h, pixels })
}

pub fn montage(volumes: &[Tensor], r: Range) -> Result<GrayImage> {
    let tiles: Vec<GrayImage> = volumes.iter().map(|v| axial_mid_slice(v, r)).collect::<Result<_>>()?;
    let Some(first) = tiles.first() else {
        return Err(Error::Empty("montage frames".into()));
    };
    let (h, w) = (first.height, first.width);
    if tiles.iter().any(|t| t.height != h || t.width != w) {
        return Err(Error::Shape("montage frames differ in size".into()));
    }
    let width = w * tiles.len();
    let mut pixels = vec![0u8; width * h];
    for (k, t) in tiles.iter().enumerate() {
        for y in 0..h {
            pixels[y * width + k * w..y * width + (k + 1) * w].copy_from_slice(&t.pixels[y * w..(y + 1) * w]);
        }
    }
    Ok(GrayImage { width, height: h, pixels })
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format { what: "PNG", msg: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img.pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}
