//! Hyperspectral cubes: the HSC container, the blur-and-decimate
//! degradation, a synthetic scene generator and pseudo-color export.
//!
//! HSC layout, little-endian:
//!
//! | offset | field |
//! |--------|-------|
//! | 0 | magic `HSC1` |
//! | 4 | `u32` bands, height, width |
//! | 16 | `f32` range low, high |
//! | 24 | `f32` values, band-major then row-major |

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{dim_u32, put_f32, put_u32, Reader};
use crate::error::{ensure, Result};
use crate::nn::reflect_index;
use crate::tensor::Tensor;

pub const HSC_MAGIC: &[u8; 4] = b"HSC1";
pub const HSC_HEADER_BYTES: usize = 24;
pub const SCALES: [usize; 3] = crate::model::SCALES;
/// Blur of the degradation model.
pub const BLUR_SIGMA: f64 = 0.5;
/// Band triple used for pseudo-color previews.
pub const DEFAULT_RGB: (usize, usize, usize) = (20, 30, 40);

/// A `[C, H, W]` cube with the value range used to normalize metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    data: Tensor<f32>,
    range: (f32, f32),
}

impl HsiCube {
    /// Wraps `data`, clamping values into `range`.
    pub fn new(data: Tensor<f32>, range: (f32, f32)) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        ensure!(c >= 1 && h >= 1 && w >= 1, "cube dimensions must be positive, got {c}x{h}x{w}");
        let (lo, hi) = range;
        ensure!(lo.is_finite() && hi.is_finite() && lo < hi, "invalid value range {lo}..{hi}");
        let mut data = data;
        let mut clamped = 0usize;
        for v in data.data_mut() {
            let c = if v.is_nan() { lo } else { v.clamp(lo, hi) };
            if c.to_bits() != v.to_bits() {
                clamped += 1;
                *v = c;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} values into [{lo}, {hi}]");
        }
        Ok(Self { data, range })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn range(&self) -> (f32, f32) {
        self.range
    }

    /// `hi - lo`, the peak for PSNR and SSIM.
    pub fn peak(&self) -> f64 {
        (self.range.1 - self.range.0) as f64
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    fn band(&self, b: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.data.data()[b * n..(b + 1) * n]
    }
}

pub fn encode_hsc(cube: &HsiCube) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HSC_HEADER_BYTES + 4 * cube.data.numel());
    out.extend_from_slice(HSC_MAGIC);
    put_u32(&mut out, dim_u32(cube.bands(), "band count")?);
    put_u32(&mut out, dim_u32(cube.height(), "height")?);
    put_u32(&mut out, dim_u32(cube.width(), "width")?);
    put_f32(&mut out, cube.range.0);
    put_f32(&mut out, cube.range.1);
    for &v in cube.data.data() {
        put_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_hsc(bytes: &[u8]) -> Result<HsiCube> {
    let mut r = Reader::new(bytes);
    r.magic(HSC_MAGIC)?;
    let c = r.u32("band count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if c == 0 || h == 0 || w == 0 {
        return r.fail(format!("zero dimension in {c}x{h}x{w}"));
    }
    let lo = r.f32("range low")?;
    let hi = r.f32("range high")?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return r.fail(format!("invalid value range {lo}..{hi}"));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|n| n.checked_mul(4).is_some());
    let Some(n) = n else {
        return r.fail(format!("dimensions {c}x{h}x{w} overflow"));
    };
    let data = r.f32s(n, "payload")?;
    r.finish()?;
    HsiCube::new(Tensor::new(&[c, h, w], data)?, (lo, hi))
}

pub fn write_hsc(cube: &HsiCube, path: &Path) -> Result<()> {
    std::fs::write(path, encode_hsc(cube)?)?;
    Ok(())
}

pub fn read_hsc(path: &Path) -> Result<HsiCube> {
    decode_hsc(&std::fs::read(path)?)
}

/// Normalized `3x3` Gaussian, row-major.
pub fn gaussian_kernel3(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for (i, v) in k.iter_mut().enumerate() {
        let dy = (i / 3) as f64 - 1.0;
        let dx = (i % 3) as f64 - 1.0;
        *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Blurs each band with the `3x3` Gaussian (reflect borders) and keeps
/// every `s`-th sample starting at offset 0.
pub fn degrade(cube: &HsiCube, s: usize) -> Result<HsiCube> {
    ensure!(SCALES.contains(&s), "scale {s} not in {SCALES:?}");
    let (c, h, w) = (cube.bands(), cube.height(), cube.width());
    ensure!(h % s == 0 && w % s == 0, "{h}x{w} is not divisible by the scale {s}");
    let k = gaussian_kernel3(BLUR_SIGMA);
    let (ho, wo) = (h / s, w / s);
    let mut out = Vec::with_capacity(c * ho * wo);
    for b in 0..c {
        let band = cube.band(b);
        for oy in 0..ho {
            for ox in 0..wo {
                let (y, x) = (oy * s, ox * s);
                let mut acc = 0.0f64;
                for (i, kv) in k.iter().enumerate() {
                    let sy = reflect_index(y as isize + (i / 3) as isize - 1, h);
                    let sx = reflect_index(x as isize + (i % 3) as isize - 1, w);
                    acc += kv * band[sy * w + sx] as f64;
                }
                out.push(acc as f32);
            }
        }
    }
    HsiCube::new(Tensor::new(&[c, ho, wo], out)?, cube.range)
}

/// Smooth synthetic scene: a sum of Gaussian blobs, each with a slowly
/// varying spectral profile, min-max normalized to `[0, 1]`. `smoothness`
/// sets the typical blob radius as a fraction of the larger side.
pub fn synth_cube(seed: u64, c: usize, h: usize, w: usize, smoothness: f64) -> Result<HsiCube> {
    ensure!(c >= 4 && h >= 4 && w >= 4, "synthetic cubes need every dimension >= 4, got {c}x{h}x{w}");
    ensure!(smoothness > 0.0, "smoothness must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = 24;
    let side = h.max(w) as f64;
    let mut data = vec![0.0f64; c * h * w];
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let radius = smoothness * side * rng.gen_range(0.3..1.5);
        let amp = rng.gen_range(-1.0..1.0);
        let freq = rng.gen_range(0.0..0.15);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let spatial: Vec<f64> = (0..h * w)
            .map(|i| {
                let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp()
            })
            .collect();
        for b in 0..c {
            let profile = amp * (1.0 + 0.5 * (freq * b as f64 + phase).sin());
            for (d, s) in data[b * h * w..(b + 1) * h * w].iter_mut().zip(&spatial) {
                *d += profile * s;
            }
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let values = data.iter().map(|v| ((v - lo) / span) as f32).collect();
    HsiCube::new(Tensor::new(&[c, h, w], values)?, (0.0, 1.0))
}

/// Binary portable pixmap of `rgb` (`3 * width * height` bytes).
pub fn encode_p6(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    ensure!(
        rgb.len() == 3 * width * height,
        "{} bytes for a {width}x{height} RGB image",
        rgb.len()
    );
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Min-max stretch to `0..=255`; a constant input maps to 128.
pub fn stretch_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect()
}

/// Three bands stretched independently and written as a P6 image.
pub fn pseudo_color(cube: &HsiCube, r: usize, g: usize, b: usize) -> Result<Vec<u8>> {
    let c = cube.bands();
    for band in [r, g, b] {
        ensure!(band < c, "band {band} out of range for a {c}-band cube");
    }
    let planes: Vec<Vec<u8>> = [r, g, b]
        .iter()
        .map(|&i| stretch_u8(&cube.band(i).iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    let n = cube.height() * cube.width();
    let mut rgb = Vec::with_capacity(3 * n);
    for p in 0..n {
        rgb.extend(planes.iter().map(|pl| pl[p]));
    }
    encode_p6(cube.width(), cube.height(), &rgb)
}
