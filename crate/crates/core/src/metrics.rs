//! Reconstruction quality: PSNR, SSIM, spectral angle and ERGAS. All sums
//! run in `f64`; per-band values are averaged arithmetically.

use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Tensor};

/// Reported PSNR for a band with zero error.
pub const PSNR_CAP: f64 = 99.0;
/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;

fn same_cube<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize, usize)> {
    ensure!(
        x.shape() == y.shape(),
        "metric inputs differ in shape: {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    x.dims3()
}

fn bands<T: Element>(x: &Tensor<T>, n: usize) -> impl Iterator<Item = &[T]> {
    x.data().chunks_exact(n)
}

fn band_mse<T: Element>(x: &[T], y: &[T]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    s / x.len() as f64
}

/// Mean over bands of `10 log10(peak^2 / MSE)`, each band capped at
/// [`PSNR_CAP`].
pub fn psnr<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let (c, h, w) = same_cube(x, y)?;
    ensure!(peak > 0.0, "PSNR peak must be positive, got {peak}");
    let total: f64 = bands(x, h * w)
        .zip(bands(y, h * w))
        .map(|(a, b)| {
            let mse = band_mse(a, b);
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
            }
        })
        .sum();
    Ok(total / c as f64)
}

/// Structural similarity over every `8x8` window at stride 1 with uniform
/// weights, averaged over windows and then bands.
pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let (c, h, w) = same_cube(x, y)?;
    let k = SSIM_WINDOW;
    ensure!(h >= k && w >= k, "SSIM needs at least {k}x{k} pixels, got {h}x{w}");
    ensure!(peak > 0.0, "SSIM peak must be positive, got {peak}");
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for (a, b) in bands(x, h * w).zip(bands(y, h * w)) {
        let a: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
        let mut band_sum = 0.0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for yy in y0..y0 + k {
                    for i in yy * w + x0..yy * w + x0 + k {
                        let (p, q) = (a[i], b[i]);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                band_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += band_sum / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// Per-pixel spectral angles in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SamMap {
    /// `[H, W]`; excluded pixels hold 0.
    pub angles: Tensor<f64>,
    pub valid: Vec<bool>,
    pub excluded: usize,
}

/// Angle between the spectra at each pixel. Pixels where either spectrum is
/// all zeros are excluded.
pub fn sam_error_map<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<SamMap> {
    let (c, h, w) = same_cube(x, y)?;
    let n = h * w;
    let (xd, yd) = (x.data(), y.data());
    let mut angles = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut excluded = 0;
    for p in 0..n {
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for b in 0..c {
            let (u, v) = (xd[b * n + p].as_f64(), yd[b * n + p].as_f64());
            dot += u * v;
            nx += u * u;
            ny += v * v;
        }
        if nx == 0.0 || ny == 0.0 {
            excluded += 1;
            continue;
        }
        let cos = (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0);
        angles[p] = cos.acos().to_degrees();
        valid[p] = true;
    }
    Ok(SamMap {
        angles: Tensor::new(&[h, w], angles)?,
        valid,
        excluded,
    })
}

/// Mean spectral angle over valid pixels, in degrees.
pub fn sam<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let map = sam_error_map(x, y)?;
    let count = map.valid.len() - map.excluded;
    if count == 0 {
        return Err(Error::Numeric("every pixel has an all-zero spectrum".into()));
    }
    if map.excluded > 0 {
        log::warn!("SAM excluded {} zero-spectrum pixels", map.excluded);
    }
    Ok(map.angles.data().iter().sum::<f64>() / count as f64)
}

/// `100 / s * sqrt(mean_b(MSE_b / mu_b^2))` with `mu_b` the mean of
/// reference band `b`.
pub fn ergas<T: Element>(reference: &Tensor<T>, estimate: &Tensor<T>, scale: usize) -> Result<f64> {
    let (c, h, w) = same_cube(reference, estimate)?;
    ensure!(scale >= 1, "ERGAS scale must be positive");
    let mut acc = 0.0;
    for (b, (r, e)) in bands(reference, h * w).zip(bands(estimate, h * w)).enumerate() {
        let mu = r.iter().map(|v| v.as_f64()).sum::<f64>() / r.len() as f64;
        if mu == 0.0 {
            return Err(Error::Numeric(format!("reference band {b} has zero mean")));
        }
        acc += band_mse(r, e) / (mu * mu);
    }
    Ok(100.0 / scale as f64 * (acc / c as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub ergas: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "psnr,ssim,sam,ergas";

    /// All four metrics of `estimate` against `reference`.
    pub fn compute<T: Element>(reference: &Tensor<T>, estimate: &Tensor<T>, peak: f64, scale: usize) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, estimate, peak)?,
            ssim: ssim(reference, estimate, peak)?,
            sam: sam(reference, estimate)?,
            ergas: ergas(reference, estimate, scale)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!("{:?},{:?},{:?},{:?}", self.psnr, self.ssim, self.sam, self.ergas)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PSNR {:.3} dB, SSIM {:.4}, SAM {:.3} deg, ERGAS {:.4}",
            self.psnr, self.ssim, self.sam, self.ergas
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.05f32..1.0))
    }

    #[test]
    fn identical_inputs_hit_best_values() {
        let x = cube(1, 4, 12, 10);
        let r = MetricReport::compute(&x, &x, 1.0, 4).unwrap();
        assert_eq!(r, MetricReport { psnr: 99.0, ssim: 1.0, sam: 0.0, ergas: 0.0 });
        assert_eq!(r.csv_row(), "99.0,1.0,0.0,0.0");
    }

    #[test]
    fn constant_offset_is_twenty_db() {
        let x = cube(2, 3, 8, 8).map(|v| v * 0.5);
        let y = x.map(|v| v + 0.1);
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!((p - 20.0).abs() <= 1e-4, "{p}");
    }

    #[test]
    fn band_mean_equals_scalar_psnr() {
        let band = cube(3, 1, 8, 8);
        let noisy = cube(4, 1, 8, 8);
        let rep = |t: &Tensor<f32>| Tensor::new(&[3, 8, 8], t.data().repeat(3)).unwrap();
        let one = psnr(&band, &noisy, 1.0).unwrap();
        let three = psnr(&rep(&band), &rep(&noisy), 1.0).unwrap();
        assert!((one - three).abs() < 1e-12);
    }

    #[test]
    fn ssim_on_flat_estimate_is_low() {
        let x = cube(5, 2, 16, 16);
        let flat = Tensor::full(&[2, 16, 16], 0.5f32);
        assert!(ssim(&x, &flat, 1.0).unwrap() < 0.5);
        assert!(ssim(&cube(5, 1, 7, 9), &cube(6, 1, 7, 9), 1.0).is_err());
    }

    #[test]
    fn spectral_angles() {
        let x = cube(7, 5, 4, 4);
        assert_eq!(sam(&x, &x.map(|v| 2.0 * v)).unwrap(), 0.0);
        let a = Tensor::new(&[2, 1, 1], vec![1.0f32, 0.0]).unwrap();
        let b = Tensor::new(&[2, 1, 1], vec![0.0f32, 1.0]).unwrap();
        assert!((sam(&a, &b).unwrap() - 90.0).abs() < 1e-12);
        let z = Tensor::zeros(&[2, 1, 1]);
        assert!(matches!(sam(&a, &z), Err(Error::Numeric(_))));
        let mut partial = cube(8, 2, 1, 2);
        partial.data_mut()[0] = 0.0;
        partial.data_mut()[2] = 0.0;
        let map = sam_error_map(&partial, &cube(9, 2, 1, 2)).unwrap();
        assert_eq!((map.excluded, map.valid.as_slice()), (1, &[false, true][..]));
    }

    #[test]
    fn ergas_closed_form() {
        // One band, mean 1, MSE 0.04.
        let r = Tensor::full(&[1, 2, 2], 1.0f64);
        let e = Tensor::new(&[1, 2, 2], vec![1.2, 0.8, 1.2, 0.8]).unwrap();
        assert!((ergas(&r, &e, 4).unwrap() - 5.0).abs() < 1e-12);
        assert!((ergas(&r, &e, 2).unwrap() - 10.0).abs() < 1e-12);
        let zero = Tensor::zeros(&[1, 2, 2]);
        match ergas(&zero, &e, 4) {
            Err(Error::Numeric(m)) => assert!(m.contains("band 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = cube(10, 2, 8, 8);
        let y = cube(10, 3, 8, 8);
        assert!(psnr(&x, &y, 1.0).is_err());
        assert!(sam(&x, &y).is_err());
        assert!(ergas(&x, &y, 2).is_err());
    }

    // Straight-line references written per pixel with explicit indexing.
    fn oracle(x: &Tensor<f32>, y: &Tensor<f32>, peak: f64, s: usize) -> [f64; 4] {
        let (c, h, w) = x.dims3().unwrap();
        let at = |t: &Tensor<f32>, b: usize, i: usize, j: usize| t.data()[(b * h + i) * w + j] as f64;
        let mut psnr_sum = 0.0;
        let mut ergas_sum = 0.0;
        let mut ssim_sum = 0.0;
        for b in 0..c {
            let mut se = 0.0;
            let mut mean = 0.0;
            for i in 0..h {
                for j in 0..w {
                    se += (at(x, b, i, j) - at(y, b, i, j)).powi(2);
                    mean += at(x, b, i, j);
                }
            }
            let mse = se / (h * w) as f64;
            mean /= (h * w) as f64;
            psnr_sum += 10.0 * (peak * peak / mse).log10();
            ergas_sum += mse / (mean * mean);
            let mut windows = 0.0;
            let mut count = 0.0;
            for i0 in 0..=h - 8 {
                for j0 in 0..=w - 8 {
                    let px: Vec<f64> = (0..64).map(|k| at(x, b, i0 + k / 8, j0 + k % 8)).collect();
                    let py: Vec<f64> = (0..64).map(|k| at(y, b, i0 + k / 8, j0 + k % 8)).collect();
                    let mx = px.iter().sum::<f64>() / 64.0;
                    let my = py.iter().sum::<f64>() / 64.0;
                    let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 64.0;
                    let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 64.0;
                    let cv = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / 64.0;
                    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
                    windows += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1.0;
                }
            }
            ssim_sum += windows / count;
        }
        let mut angle = 0.0;
        for i in 0..h {
            for j in 0..w {
                let dot: f64 = (0..c).map(|b| at(x, b, i, j) * at(y, b, i, j)).sum();
                let nx: f64 = (0..c).map(|b| at(x, b, i, j).powi(2)).sum::<f64>().sqrt();
                let ny: f64 = (0..c).map(|b| at(y, b, i, j).powi(2)).sum::<f64>().sqrt();
                angle += (dot / (nx * ny)).clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI;
            }
        }
        [
            psnr_sum / c as f64,
            ssim_sum / c as f64,
            angle / (h * w) as f64,
            100.0 / s as f64 * (ergas_sum / c as f64).sqrt(),
        ]
    }

    #[test]
    fn matches_straight_line_oracle() {
        for seed in 0..5 {
            let x = cube(100 + seed, 3, 10, 9);
            let noise = cube(200 + seed, 3, 10, 9);
            let y = Tensor::from_fn(x.shape(), |i| x.data()[i] * 0.9 + noise.data()[i] * 0.1);
            let r = MetricReport::compute(&x, &y, 1.0, 4).unwrap();
            let o = oracle(&x, &y, 1.0, 4);
            for (got, want) in [r.psnr, r.ssim, r.sam, r.ergas].into_iter().zip(o) {
                assert!((got - want).abs() <= 1e-6 * want.abs(), "seed {seed}: {got} vs {want}");
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(seed in 0u64..1000, k in 0.1f32..10.0) {
            let x = cube(seed, 3, 8, 8);
            let y = cube(seed + 1, 3, 8, 8);
            prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
            prop_assert!((ssim(&x, &y, 1.0).unwrap() - ssim(&y, &x, 1.0).unwrap()).abs() < 1e-12);
            let s = sam(&x, &y).unwrap();
            prop_assert!((s - sam(&y, &x).unwrap()).abs() < 1e-9);
            // A different positive factor per pixel.
            let scaled = Tensor::from_fn(x.shape(), |i| x.data()[i] * k * (1.0 + (i % 64 % 5) as f32 * 0.3));
            prop_assert!((s - sam(&scaled, &y).unwrap()).abs() < 1e-6);
            let e2 = ergas(&x, &y, 2).unwrap();
            prop_assert!((e2 / 2.0 - ergas(&x, &y, 4).unwrap()).abs() < 1e-12);
        }
    }
}
