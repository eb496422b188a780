//! 8-bit RGB images: PPM/PNG I/O, mean subtraction, bilinear resizing.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::ImageFormat(format!(
                "{height}x{width} RGB image needs {} samples, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, pixels }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Reads a binary PPM (P6, maxval 255) or PNG, detected by content.
pub fn load(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::ImageFormat(m) => Error::ImageFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<RawImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.is_empty() {
        Err(Error::ImageFormat("empty file".into()))
    } else {
        Err(Error::ImageFormat("not a binary PPM (P6) or PNG file".into()))
    }
}

/// Writes PNG for a `.png` extension and binary PPM otherwise.
pub fn save(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_ppm(img) };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 2;
    let mut field = |what: &str| -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::ImageFormat(format!("PPM header ends before {what}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ImageFormat(format!("PPM {what} is not a number")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("PPM maxval {maxval} unsupported (need 255)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::ImageFormat("PPM header not terminated by whitespace".into()));
    }
    let data = &bytes[pos + 1..];
    let need = 3 * width * height;
    if data.len() < need {
        return Err(Error::ImageFormat(format!("PPM pixel data truncated: {} of {need} bytes", data.len())));
    }
    RawImage::new(height, width, data[..need].to_vec())
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::ImageFormat(format!("PNG: {e}"))
}

pub fn decode_png(bytes: &[u8]) -> Result<RawImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err("palette was not expanded")),
    };
    let mut pixels = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    RawImage::new(h, w, pixels)
}

pub fn encode_png(img: &RawImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&img.pixels).map_err(png_err)?;
        w.finish().map_err(png_err)?;
    }
    Ok(out)
}

/// Planar real tensor with the per-channel mean removed.
pub fn preprocess(img: &RawImage, mean: &[f64]) -> Result<Tensor3> {
    if mean.len() != 3 {
        return Err(Error::InvalidArgument(format!("need 3 channel means, got {}", mean.len())));
    }
    Ok(Tensor3::from_fn(Shape3::new(3, img.height, img.width), |c, y, x| {
        img.pixels[3 * (y * img.width + x) + c] as f64 - mean[c]
    }))
}

/// Adds the mean back, clamps to `[0, 255]` and rounds half to even.
pub fn deprocess(t: &Tensor3, mean: &[f64]) -> Result<RawImage> {
    if t.channels() != 3 || mean.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "deprocessing needs 3 channels and 3 means, got {} and {}",
            t.channels(),
            mean.len()
        )));
    }
    let (h, w) = (t.height(), t.width());
    Ok(RawImage::from_fn(h, w, |y, x| {
        let q = |c: usize| (t.at(c, y, x) + mean[c]).clamp(0.0, 255.0).round_ties_even() as u8;
        [q(0), q(1), q(2)]
    }))
}

// source coordinate with half-pixel centres: (lower index, upper index, weight of upper)
fn sample_points(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Separable bilinear resampling with half-pixel-centre alignment.
pub fn resize_bilinear(img: &RawImage, new_h: usize, new_w: usize) -> Result<RawImage> {
    if new_h == 0 || new_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize {}x{} to {new_h}x{new_w}", img.height, img.width)));
    }
    let xs = sample_points(img.width, new_w);
    let ys = sample_points(img.height, new_h);
    // horizontal pass, kept in f64
    let mut rows = vec![0.0; img.height * new_w * 3];
    for y in 0..img.height {
        for (x, &(lo, hi, t)) in xs.iter().enumerate() {
            for c in 0..3 {
                let a = img.pixels[3 * (y * img.width + lo) + c] as f64;
                let b = img.pixels[3 * (y * img.width + hi) + c] as f64;
                rows[3 * (y * new_w + x) + c] = if t == 0.0 { a } else { a * (1.0 - t) + b * t };
            }
        }
    }
    let mut pixels = Vec::with_capacity(3 * new_h * new_w);
    for &(lo, hi, t) in &ys {
        for x in 0..new_w {
            for c in 0..3 {
                let a = rows[3 * (lo * new_w + x) + c];
                let b = rows[3 * (hi * new_w + x) + c];
                let v = if t == 0.0 { a } else { a * (1.0 - t) + b * t };
                pixels.push(v.clamp(0.0, 255.0).round_ties_even() as u8);
            }
        }
    }
    RawImage::new(new_h, new_w, pixels)
}
