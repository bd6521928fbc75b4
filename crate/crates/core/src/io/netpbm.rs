//! Binary netpbm images: P5 (greyscale PGM) and P6 (RGB PPM).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{BinaryMap, ProbabilityMap};
use crate::tensor::Tensor;

/// A decoded netpbm raster with samples normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub samples: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Decode a binary P5 or P6 image from memory.
pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM (P5) or PPM (P6) file".into()),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number().ok_or("missing width")?;
    let height = cur.number().ok_or("missing height")?;
    let maxval = cur.number().ok_or("missing maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("degenerate size {width}x{height}"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("header must end with a single whitespace byte".into());
    }
    cur.pos += 1;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < n * bytes_per_sample {
        return Err(format!(
            "truncated raster: expected {} bytes, found {}",
            n * bytes_per_sample,
            body.len()
        ));
    }
    let maxval = maxval as f32;
    let samples = if bytes_per_sample == 1 {
        body[..n].iter().map(|&b| (b as f32 / maxval).min(1.0)).collect()
    } else {
        body[..2 * n]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / maxval).min(1.0))
            .collect()
    };
    Ok(Raster {
        width,
        height,
        channels,
        samples,
    })
}

/// Encode 8-bit samples as a binary P5 (`channels = 1`) or P6 (`channels = 3`).
pub fn encode(width: usize, height: usize, channels: usize, samples: &[u8]) -> Vec<u8> {
    assert!(channels == 1 || channels == 3, "netpbm supports 1 or 3 channels");
    assert_eq!(samples.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// `[0,1] → 0..=255` with rounding and clamping.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a `[3,H,W]` planar image as P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::format(path, format!("expected a [3,H,W] image, got {:?}", image.shape())));
    };
    let d = image.data();
    let mut samples = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            samples.push(quantize(d[c * h * w + i]));
        }
    }
    write_bytes(path, &encode(w, h, 3, &samples))
}

/// Read a P6 (or P5, replicated to three channels) as a `[3,H,W]` image.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let r = read(path)?;
    let (h, w) = (r.height, r.width);
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let src = if r.channels == 3 { 3 * i + c } else { i };
            data[c * h * w + i] = r.samples[src];
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Edge maps are stored as P5 with 255 = edge, 0 = background.
pub fn write_edges(path: &Path, edges: &BinaryMap) -> Result<()> {
    let samples: Vec<u8> = edges.data().iter().map(|&e| if e { 255 } else { 0 }).collect();
    write_bytes(path, &encode(edges.width(), edges.height(), 1, &samples))
}

/// Read a greyscale map and binarise it at 0.5.
pub fn read_edges(path: &Path) -> Result<BinaryMap> {
    Ok(read_probability(path)?.binarize(0.5))
}

/// Probability maps are quantised to `round(255·p)`.
pub fn write_probability(path: &Path, p: &ProbabilityMap) -> Result<()> {
    let samples: Vec<u8> = p.data().iter().map(|&v| quantize(v)).collect();
    write_bytes(path, &encode(p.width(), p.height(), 1, &samples))
}

pub fn read_probability(path: &Path) -> Result<ProbabilityMap> {
    let r = read(path)?;
    let (h, w) = (r.height, r.width);
    let data = if r.channels == 1 {
        r.samples
    } else {
        r.samples.chunks_exact(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
    };
    ProbabilityMap::new(h, w, data)
}

/// Loss-free probability dump: `u32` height, `u32` width, then `f32`
/// samples, all little-endian.
pub fn write_raw(path: &Path, p: &ProbabilityMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * p.data().len());
    bytes.extend_from_slice(&(p.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(p.width() as u32).to_le_bytes());
    for v in p.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_raw(path: &Path) -> Result<ProbabilityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "raw map shorter than its header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * h * w {
        return Err(Error::format(path, format!("raw {h}x{w} map has {} payload bytes", bytes.len() - 8)));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ProbabilityMap::new(h, w, data)
}

/// Read a prediction in any supported format, chosen by extension.
pub fn read_prediction(path: &Path) -> Result<ProbabilityMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => read_raw(path),
        _ => read_probability(path),
    }
}
