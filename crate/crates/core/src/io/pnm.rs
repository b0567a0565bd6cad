//! Binary PNM readers and writers.
//!
//! Images travel as 8-bit P5 (gray) / P6 (RGB). Density maps export as
//! 16-bit P5, linear scale, max-normalized, big-endian samples per the
//! PNM format; the header comment records the normalization
//! factor and the raw count so the map is exactly recoverable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{format_err, Result};
use crate::tensor::Tensor;

/// 8-bit raster with 1 (gray) or 3 (RGB) channels, values in [0,1],
/// laid out channel-first.
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    /// `[3,H,W]` tensor in [0,1]; gray rasters replicate their channel.
    pub fn to_rgb_tensor(&self) -> Tensor<f64> {
        let plane = self.height * self.width;
        let mut data = vec![0.0f64; 3 * plane];
        for c in 0..3 {
            let src = if self.channels == 3 { c } else { 0 };
            data[c * plane..(c + 1) * plane]
                .copy_from_slice(&self.data[src * plane..(src + 1) * plane]);
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("raster layout")
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err!("truncated PNM header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err!("bad number in PNM header"))
    }
}

pub fn read_pnm(path: &Path) -> Result<Raster> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut scan = HeaderScanner {
        bytes: &bytes,
        pos: 0,
    };
    let magic = scan.token()?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format_err!(
                "unsupported PNM magic {:?}",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let width = scan.number()?;
    let height = scan.number()?;
    let maxval = scan.number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err!("PNM maxval {maxval} out of range"));
    }
    let wide = maxval > 255;
    // Exactly one whitespace byte separates header and raster.
    let raster = &bytes[scan.pos + 1..];
    let sample_bytes = if wide { 2 } else { 1 };
    let expected = width * height * channels * sample_bytes;
    if raster.len() < expected {
        return Err(format_err!(
            "PNM raster holds {} bytes, header implies {}",
            raster.len(),
            expected
        ));
    }
    let plane = width * height;
    let mut data = vec![0.0f64; channels * plane];
    for i in 0..plane {
        for c in 0..channels {
            let v = if wide {
                let o = (i * channels + c) * 2;
                u16::from_be_bytes([raster[o], raster[o + 1]]) as f64
            } else {
                raster[i * channels + c] as f64
            };
            data[c * plane + i] = v / maxval as f64;
        }
    }
    Ok(Raster {
        channels,
        height,
        width,
        data,
    })
}

/// Write an 8-bit raster. `image` is `[C,H,W]` with values clamped to [0,1].
pub fn write_pnm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    if image.rank() != 3 || (image.shape()[0] != 1 && image.shape()[0] != 3) {
        return Err(format_err!(
            "write_pnm expects [1|3,H,W], got {:?}",
            image.shape()
        ));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut raster = vec![0u8; plane * c];
    for i in 0..plane {
        for ch in 0..c {
            let v = image.data()[ch * plane + i].clamp(0.0, 1.0);
            raster[i * c + ch] = (v * 255.0).round() as u8;
        }
    }
    out.write_all(&raster)?;
    Ok(())
}

/// Export a density map (`[h,w]` values, any non-negative scale) as
/// 16-bit P5. The comment line carries `count` (raw sum) and `scale`
/// (value one 16-bit unit represents), so `pixel * scale` recovers the
/// raw density.
pub fn write_density_pnm(path: &Path, values: &Tensor<f64>, raw_count: f64) -> Result<()> {
    if values.rank() != 2 {
        return Err(format_err!(
            "density export expects [h,w], got {:?}",
            values.shape()
        ));
    }
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let max = values.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let scale = if max > 0.0 { max / 65535.0 } else { 0.0 };
    let mut out = BufWriter::new(File::create(path)?);
    write!(
        out,
        "P5\n# count={raw_count:.9e} scale={scale:.9e}\n{w} {h}\n65535\n"
    )?;
    let mut raster = vec![0u8; h * w * 2];
    for (i, &v) in values.data().iter().enumerate() {
        let q = if max > 0.0 {
            ((v / max) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        raster[i * 2..i * 2 + 2].copy_from_slice(&q.to_be_bytes());
    }
    out.write_all(&raster)?;
    Ok(())
}

/// Read back a 16-bit density export, undoing the normalization.
pub fn read_density_pnm(path: &Path) -> Result<(Tensor<f64>, f64)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let text = String::from_utf8_lossy(&bytes);
    let scale = text
        .lines()
        .find(|l| l.starts_with('#'))
        .and_then(|l| l.split("scale=").nth(1))
        .and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or_else(|| format_err!("density PNM lacks a scale comment"))?;
    let count = text
        .lines()
        .find(|l| l.starts_with('#'))
        .and_then(|l| l.split("count=").nth(1))
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse::<f64>().ok())
        .ok_or_else(|| format_err!("density PNM lacks a count comment"))?;
    let raster = read_pnm(path)?;
    let values = Tensor::from_vec(
        &[raster.height, raster.width],
        raster.data.iter().map(|v| v * 65535.0 * scale).collect(),
    )?;
    Ok((values, count))
}

/// Load a PNG (8-bit gray or RGB/RGBA) into a raster.
pub fn read_png(path: &Path) -> Result<Raster> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err!("png decode: {e}"))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err!("png decode: {e}"))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err!("only 8-bit PNG is supported"));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(format_err!("unsupported PNG color type {other:?}")),
    };
    let keep = if src_channels >= 3 { 3 } else { 1 };
    let plane = width * height;
    let mut data = vec![0.0f64; keep * plane];
    for i in 0..plane {
        for c in 0..keep {
            data[c * plane + i] = buf[i * src_channels + c] as f64 / 255.0;
        }
    }
    Ok(Raster {
        channels: keep,
        height,
        width,
        data,
    })
}

/// Dispatch on extension: `.png` or PNM otherwise.
pub fn read_image(path: &Path) -> Result<Raster> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("PNG") => read_png(path),
        _ => read_pnm(path),
    }
}
