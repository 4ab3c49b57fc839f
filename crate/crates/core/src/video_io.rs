//! Frame sequences, boxes, and patch extraction.
//!
//! Intensities are `f32` in `[0, 1]`, stored row-major. Color input is
//! reduced to Rec.601 luma on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

/// Row-major grid of intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimensions(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Dimensions(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f32 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    /// Bilinear sample at a subpixel location (pixel centers at integers),
    /// border-clamped.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let ty = y - y0;
        let tx = x - x0;
        let (r, c) = (y0 as isize, x0 as isize);
        let p00 = self.get_clamped(r, c) as f64;
        let p01 = self.get_clamped(r, c + 1) as f64;
        let p10 = self.get_clamped(r + 1, c) as f64;
        let p11 = self.get_clamped(r + 1, c + 1) as f64;
        let top = p00 + (p01 - p00) * tx;
        let bottom = p10 + (p11 - p10) * tx;
        top + (bottom - top) * ty
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// One frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u32,
    pub image: GrayImage,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Axis-aligned integer box; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: i64, y: i64, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, frame_h: usize, frame_w: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x >= 0
            && self.y >= 0
            && self.x as usize + self.w <= frame_w
            && self.y as usize + self.h <= frame_h
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn translated(&self, dx: i64, dy: i64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Closed-interval containment of a subpixel point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && x <= (self.x + self.w as i64) as f64
            && y >= self.y as f64
            && y <= (self.y + self.h as i64) as f64
    }

    fn check(&self, frame_h: usize, frame_w: usize) -> Result<()> {
        if self.fits(frame_h, frame_w) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                frame_h,
                frame_w,
            })
        }
    }
}

/// Where a patch was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub video_id: String,
    pub frame: u32,
    pub bbox: BBox,
}

/// Square network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: GrayImage,
    pub provenance: Option<Provenance>,
}

impl Patch {
    pub fn new(pixels: GrayImage) -> Result<Self> {
        if pixels.height() != pixels.width() {
            return Err(Error::Dimensions(format!(
                "patch must be square, got {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        Ok(Self {
            pixels,
            provenance: None,
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.height()
    }
}

/// Frames of one video, ordered by index. Missing indices are allowed.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Indices absent between the first and last frame.
    pub fn gaps(&self) -> Vec<u32> {
        self.frames
            .windows(2)
            .flat_map(|w| (w[0].index + 1)..w[1].index)
            .collect()
    }
}

fn frame_stem(path: &Path) -> Option<u32> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !matches!(ext.as_str(), "png" | "pgm" | "ppm" | "pnm") {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

/// Decodes an 8-bit gray or color image file into normalized luma.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match decoded {
        image::DynamicImage::ImageLuma8(g) => {
            g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels().map(|p| luma(p[0], p[1], p[2])).collect()
        }
    };
    GrayImage::new(h, w, data).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Rec.601 luma of an 8-bit RGB triple, normalized to `[0, 1]`.
pub fn luma(r: u8, g: u8, b: u8) -> f32 {
    let y = (LUMA_R * r as f64 + LUMA_G * g as f64 + LUMA_B * b as f64) / 255.0;
    y.clamp(0.0, 1.0) as f32
}

/// Loads every `<digits>.{png,pgm,ppm}` file in `dir`, sorted by numeric stem.
pub fn load_frame_sequence(dir: &Path) -> Result<FrameSequence> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(u32, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(index) = frame_stem(&path) {
            files.push((index, path));
        }
    }
    if files.is_empty() {
        return Err(Error::EmptySequence(dir.to_path_buf()));
    }
    files.sort();

    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for (index, path) in files {
        let image = load_image(&path)?;
        if let Some(first) = frames.first() {
            if (image.height(), image.width()) != (first.height(), first.width()) {
                return Err(Error::MixedDimensions {
                    path,
                    got_h: image.height(),
                    got_w: image.width(),
                    want_h: first.height(),
                    want_w: first.width(),
                });
            }
        }
        frames.push(Frame { index, image });
    }
    Ok(FrameSequence { frames })
}

/// Writes an image as an 8-bit grayscale PNG (values rounded to 1/255).
pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Copies the pixels under `bbox`.
pub fn crop(img: &GrayImage, bbox: BBox) -> Result<GrayImage> {
    bbox.check(img.height(), img.width())?;
    let (x, y) = (bbox.x as usize, bbox.y as usize);
    let mut data = Vec::with_capacity(bbox.w * bbox.h);
    for r in y..y + bbox.h {
        let row = r * img.width();
        data.extend_from_slice(&img.data()[row + x..row + x + bbox.w]);
    }
    GrayImage::new(bbox.h, bbox.w, data)
}

/// Bilinear resize with half-pixel centers (align-corners = false).
///
/// Source coordinates are clamped to the image, so the output never leaves
/// the input's value range.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimensions(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, img.height());
    let cols = taps(out_w, img.width());
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            let lerp = |a: f32, b: f32, t: f64| {
                let a = a as f64;
                a + (b as f64 - a) * t
            };
            let top = lerp(img.get(r0, c0), img.get(r0, c1), tx);
            let bottom = lerp(img.get(r1, c0), img.get(r1, c1), tx);
            let v = top + (bottom - top) * ty;
            data.push((v as f32).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(out_h, out_w, data)
}

/// Crops `bbox` and resizes it to a `side`x`side` patch.
pub fn extract_patch(img: &GrayImage, bbox: BBox, side: usize) -> Result<GrayImage> {
    let cut = crop(img, bbox)?;
    if cut.height() == side && cut.width() == side {
        Ok(cut)
    } else {
        resize_bilinear(&cut, side, side)
    }
}

const GRID_MAGIC: &str = "TRKGRID v1\n";

/// Serializes a grid as `TRKGRID v1\n<h> <w>\n` followed by little-endian f32s.
pub fn encode_grid(img: &GrayImage) -> Vec<u8> {
    let header = format!("{GRID_MAGIC}{} {}\n", img.height(), img.width());
    let mut out = Vec::with_capacity(header.len() + 4 * img.data().len());
    out.extend_from_slice(header.as_bytes());
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |message: &str| Error::BadGrid {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let rest = bytes
        .strip_prefix(GRID_MAGIC.as_bytes())
        .ok_or_else(|| bad("missing TRKGRID v1 header"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated dimension line"))?;
    let dims = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("dimension line is not text"))?;
    let mut parts = dims.split(' ');
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed dimension line"))
    };
    let (h, w) = (dim()?, dim()?);
    let payload = &rest[nl + 1..];
    if payload.len() != h * w * 4 {
        return Err(bad(&format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            h * w * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    GrayImage::new(h, w, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_grid(path: &Path, img: &GrayImage) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_grid(img))
        .map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}
