//! Dense images, instance label masks, and their on-disk encodings.

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major image with interleaved channels, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Channel mean, one value per pixel.
    pub fn to_gray(&self) -> Vec<f64> {
        let c = self.channels as f64;
        self.data.chunks_exact(self.channels).map(|px| px.iter().sum::<f64>() / c).collect()
    }

    fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            match self.channels {
                1 => Rgb([q(self.get(x, y, 0)); 3]),
                _ => Rgb([q(self.get(x, y, 0)), q(self.get(x, y, 1)), q(self.get(x, y, 2))]),
            }
        })
    }

    /// Write an 8-bit RGB PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.into(), source: e })
    }

    /// Read an 8-bit PNG as a 3-channel image in [0, 1].
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::from_data(w as usize, h as usize, 3, data)
    }

    /// Quantize to 8 bits per channel, as PNG export does.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Image { data, ..*self }
    }
}

/// Per-view instance labels: 0 is background, `k > 0` is local instance `k - 1`.
/// A label image makes instances within one view disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

/// Summary of one instance inside a label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub label: u16,
    pub area: usize,
    pub centroid: (f64, f64),
    pub min_row: usize,
    pub max_row: usize,
}

impl LabelMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, label: u16) {
        self.labels[row * self.width + col] = label;
    }

    /// Per-label statistics, sorted by label.
    pub fn instances(&self) -> Vec<InstanceStats> {
        let mut stats: std::collections::BTreeMap<u16, (usize, f64, f64, usize, usize)> = Default::default();
        for row in 0..self.height {
            for col in 0..self.width {
                let l = self.get(col, row);
                if l == 0 {
                    continue;
                }
                let e = stats.entry(l).or_insert((0, 0.0, 0.0, usize::MAX, 0));
                e.0 += 1;
                e.1 += col as f64;
                e.2 += row as f64;
                e.3 = e.3.min(row);
                e.4 = e.4.max(row);
            }
        }
        stats
            .into_iter()
            .map(|(label, (area, sx, sy, min_row, max_row))| InstanceStats {
                label,
                area,
                centroid: (sx / area as f64, sy / area as f64),
                min_row,
                max_row,
            })
            .collect()
    }

    /// 16-bit grayscale PNG; stored value is the label.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.labels.clone()).expect("sized");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.into(), source: e })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
        let img = match img {
            image::DynamicImage::ImageLuma16(b) => b,
            other => other.to_luma16(),
        };
        let (w, h) = img.dimensions();
        Ok(Self { width: w as usize, height: h as usize, labels: img.into_raw() })
    }
}

const GRID_MAGIC: &[u8; 4] = b"SFGR";

/// Write a float grid: 16-byte header (magic "SFGR", u32 width, u32 height,
/// u32 channels, little endian) followed by row-major f32 values.
pub fn write_grid(path: &Path, width: usize, height: usize, channels: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height * channels);
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::format("grid", path, "bad header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    if bytes.len() != 16 + w * h * c * 4 {
        return Err(Error::format("grid", path, "payload size does not match header"));
    }
    let values = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((w, h, c, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_stats() {
        let mut m = LabelMask::new(4, 3);
        m.set(1, 1, 2);
        m.set(2, 1, 2);
        m.set(0, 2, 5);
        let inst = m.instances();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].label, 2);
        assert_eq!(inst[0].area, 2);
        assert_eq!(inst[0].centroid, (1.5, 1.0));
        assert_eq!(inst[1].max_row, 2);
    }

    #[test]
    fn png_and_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = LabelMask::new(5, 4);
        m.set(3, 2, 300);
        let p = dir.path().join("m.png");
        m.write_png(&p).unwrap();
        assert_eq!(LabelMask::read_png(&p).unwrap(), m);

        let mut img = Image::new(5, 4, 3);
        img.set(1, 2, 0, 1.0);
        img.set(4, 3, 2, 0.5);
        let p = dir.path().join("i.png");
        img.write_png(&p).unwrap();
        assert_eq!(Image::read_png(&p).unwrap(), img.quantized());

        let p = dir.path().join("g.bin");
        write_grid(&p, 2, 1, 1, &[1.5, -2.0]).unwrap();
        assert_eq!(read_grid(&p).unwrap(), (2, 1, 1, vec![1.5f32, -2.0]));
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24);
    }
}
