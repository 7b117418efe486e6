//! Rasterization of 1-D series into 224×224 waveform images.
//!
//! A series is min-max normalized, its samples are placed on evenly spaced
//! columns and joined by a one-pixel Bresenham polyline. Strokes are 0.0 on a
//! 1.0 background; nothing is anti-aliased, so every pixel is exactly one of
//! the two values.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Width and height of every rendered image.
pub const SIZE: usize = 224;
/// Topmost row a stroke can occupy (5% margin).
pub const Y_TOP: usize = 11;
/// Bottommost row a stroke can occupy.
pub const Y_BOTTOM: usize = 212;

pub const BACKGROUND: f64 = 1.0;
pub const STROKE: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    FnirsHbo,
    FnirsHbr,
    VideoEmbedding,
    FnirsEmbedding,
}

/// A finite 1-D signal with at least two samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    values: Vec<f64>,
    label: Modality,
}

impl Series {
    pub fn new(values: Vec<f64>, label: Modality) -> Result<Self> {
        check_values(&values)?;
        Ok(Series { values, label })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> Modality {
        self.label
    }
}

fn check_values(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::Data(format!("series needs at least 2 samples, got {}", v.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("series value {} at index {i} is not finite", v[i])));
    }
    Ok(())
}

/// Affine map onto `[0, 1]`; a constant series maps to 0.5 everywhere.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("series value {} at index {i} is not finite", values[i])));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.5; values.len()]);
    }
    let span = hi - lo;
    Ok(values.iter().map(|v| (v - lo) / span).collect())
}

pub fn normalize_series(s: &Series) -> Result<Series> {
    Ok(Series {
        values: normalize(&s.values)?,
        label: s.label,
    })
}

/// Piecewise-linear resampling onto `n ≥ 2` evenly spaced positions spanning
/// the original index range.
pub fn resample(values: &[f64], n: usize) -> Vec<f64> {
    let len = values.len();
    if len == n {
        return values.to_vec();
    }
    (0..n)
        .map(|j| {
            let t = j as f64 * (len - 1) as f64 / (n - 1) as f64;
            let i = (t.floor() as usize).min(len - 2);
            let f = t - i as f64;
            values[i] * (1.0 - f) + values[i + 1] * f
        })
        .collect()
}

/// Pixel coordinates `(x, y)` of each sample after resampling and
/// normalization.
pub fn sample_points(values: &[f64]) -> Result<Vec<(usize, usize)>> {
    check_values(values)?;
    let v = if values.len() > SIZE {
        resample(values, SIZE)
    } else {
        values.to_vec()
    };
    let v = normalize(&v)?;
    let n = v.len();
    let span = (Y_BOTTOM - Y_TOP) as f64;
    Ok(v.iter()
        .enumerate()
        .map(|(i, &u)| {
            let x = (i as f64 * (SIZE - 1) as f64 / (n - 1) as f64).round() as usize;
            let y = (Y_TOP as f64 + (1.0 - u) * span).round() as usize;
            (x, y)
        })
        .collect())
}

/// Visits every pixel on the segment from `a` to `b`, endpoints included.
fn bresenham(a: (usize, usize), b: (usize, usize), mut plot: impl FnMut(usize, usize)) {
    let (mut x, mut y) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x as usize, y as usize);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Boolean `SIZE × SIZE` mask of the polyline through `values`.
fn stroke_mask(values: &[f64]) -> Result<Vec<bool>> {
    let pts = sample_points(values)?;
    let mut mask = vec![false; SIZE * SIZE];
    let mut plot = |x: usize, y: usize| mask[y * SIZE + x] = true;
    for w in pts.windows(2) {
        bresenham(w[0], w[1], &mut plot);
    }
    Ok(mask)
}

/// A 224×224 raster with 1 (grayscale) or 3 (RGB) channels, stored
/// channel-major with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveformImage {
    channels: usize,
    pixels: Vec<f64>,
}

impl WaveformImage {
    fn blank(channels: usize) -> Self {
        WaveformImage {
            channels,
            pixels: vec![BACKGROUND; channels * SIZE * SIZE],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        SIZE
    }

    pub fn height(&self) -> usize {
        SIZE
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * SIZE + y) * SIZE + x]
    }

    /// Pixels of channel `c` that differ from the background.
    pub fn channel_mask(&self, c: usize) -> Vec<bool> {
        self.pixels[c * SIZE * SIZE..(c + 1) * SIZE * SIZE]
            .iter()
            .map(|&v| v != BACKGROUND)
            .collect()
    }

    /// `[channels, 224, 224]` tensor; grayscale images are replicated when
    /// `channels` is 3.
    pub fn to_tensor(&self, channels: usize) -> Result<Tensor> {
        match (self.channels, channels) {
            (a, b) if a == b => Tensor::new(&[b, SIZE, SIZE], self.pixels.clone()),
            (1, 3) => Tensor::new(&[3, SIZE, SIZE], self.pixels.repeat(3)),
            (a, b) => Err(Error::Dimension(format!(
                "cannot convert a {a}-channel waveform to {b} channels"
            ))),
        }
    }

    /// Interleaved 8-bit samples (row-major, channels last).
    pub fn to_bytes(&self) -> Vec<u8> {
        let plane = SIZE * SIZE;
        let mut out = Vec::with_capacity(self.pixels.len());
        for p in 0..plane {
            for c in 0..self.channels {
                out.push((self.pixels[c * plane + p] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &self.to_bytes(), SIZE as u32, SIZE as u32, color)?;
        Ok(())
    }

    /// Plain-text PGM (`P2`) or PPM (`P3`) with one image row per line.
    pub fn to_pnm(&self) -> String {
        let magic = if self.channels == 1 { "P2" } else { "P3" };
        let bytes = self.to_bytes();
        let mut s = format!("{magic}\n{SIZE} {SIZE}\n255\n");
        for row in bytes.chunks(SIZE * self.channels) {
            let mut first = true;
            for b in row {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{b}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_pnm().as_bytes())?;
        Ok(())
    }
}

/// Renders one series as a grayscale waveform image.
pub fn render(s: &Series) -> Result<WaveformImage> {
    render_values(&s.values)
}

/// [`render`] on raw values.
pub fn render_values(values: &[f64]) -> Result<WaveformImage> {
    let mask = stroke_mask(values)?;
    let mut img = WaveformImage::blank(1);
    for (p, &m) in img.pixels.iter_mut().zip(&mask) {
        if m {
            *p = STROKE;
        }
    }
    Ok(img)
}

/// Renders two series on one RGB canvas, each normalized independently.
///
/// Series `a` is drawn red (it clears the green and blue channels) and `b`
/// blue (it clears red and green). Where the strokes meet both clear their
/// channels, so the pixel is black. The blue-channel mask is exactly `a`'s
/// stroke and the red-channel mask exactly `b`'s.
pub fn render_single_diagram(a: &Series, b: &Series) -> Result<WaveformImage> {
    render_pair(&a.values, &b.values)
}

/// [`render_single_diagram`] on raw values.
pub fn render_pair(a: &[f64], b: &[f64]) -> Result<WaveformImage> {
    let ma = stroke_mask(a)?;
    let mb = stroke_mask(b)?;
    let mut img = WaveformImage::blank(3);
    let plane = SIZE * SIZE;
    for p in 0..plane {
        if ma[p] {
            img.pixels[plane + p] = STROKE;
            img.pixels[2 * plane + p] = STROKE;
        }
        if mb[p] {
            img.pixels[p] = STROKE;
            img.pixels[plane + p] = STROKE;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let mut pts = Vec::new();
        bresenham((0, 5), (3, 0), |x, y| pts.push((x, y)));
        assert_eq!(pts.first(), Some(&(0, 5)));
        assert_eq!(pts.last(), Some(&(3, 0)));
        for w in pts.windows(2) {
            let dx = (w[0].0 as i64 - w[1].0 as i64).abs();
            let dy = (w[0].1 as i64 - w[1].1 as i64).abs();
            assert!(dx <= 1 && dy <= 1);
        }
    }
}
