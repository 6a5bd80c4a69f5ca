//! Single-level orthonormal 2D Haar transform.
//!
//! For each 2x2 block `[a b; c d]`:
//! `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`,
//! `HH = (a-b-c+d)/2`. Detail bands are stacked on the channel axis as
//! `[LH | HL | HH]`.

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::tensor::{Element, Tensor};

/// Low band `[C, H/2, W/2]` and detail bands `[3C, H/2, W/2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveletPair<V> {
    pub low: V,
    pub high: V,
}

/// `[C, H, W] -> [4C, H/2, W/2]` with band blocks `LL, LH, HL, HH`.
fn analysis<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let plane = h2 * w2;
    let mut out = vec![T::zero(); 4 * c * plane];
    for ch in 0..c {
        for r in 0..h2 {
            let top = &x[(ch * h + 2 * r) * w..][..w];
            let bot = &x[(ch * h + 2 * r + 1) * w..][..w];
            for q in 0..w2 {
                let [a, b, cc, d] = [top[2 * q], top[2 * q + 1], bot[2 * q], bot[2 * q + 1]].map(T::as_f64);
                let o = r * w2 + q;
                out[ch * plane + o] = T::of((a + b + cc + d) * 0.5);
                out[(c + ch) * plane + o] = T::of((a - b + cc - d) * 0.5);
                out[(2 * c + ch) * plane + o] = T::of((a + b - cc - d) * 0.5);
                out[(3 * c + ch) * plane + o] = T::of((a - b - cc + d) * 0.5);
            }
        }
    }
    out
}

/// Inverse of [`analysis`].
fn synthesis<T: Element>(bands: &[T], c: usize, h2: usize, w2: usize) -> Vec<T> {
    let (h, w) = (2 * h2, 2 * w2);
    let plane = h2 * w2;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for r in 0..h2 {
            for q in 0..w2 {
                let o = r * w2 + q;
                let ll = bands[ch * plane + o].as_f64();
                let lh = bands[(c + ch) * plane + o].as_f64();
                let hl = bands[(2 * c + ch) * plane + o].as_f64();
                let hh = bands[(3 * c + ch) * plane + o].as_f64();
                let top = (ch * h + 2 * r) * w + 2 * q;
                let bot = top + w;
                out[top] = T::of((ll + lh + hl + hh) * 0.5);
                out[top + 1] = T::of((ll - lh + hl - hh) * 0.5);
                out[bot] = T::of((ll + lh - hl - hh) * 0.5);
                out[bot + 1] = T::of((ll - lh - hl + hh) * 0.5);
            }
        }
    }
    out
}

fn analysis_op<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (c, h, w) = xv.dims3()?;
    ensure!(
        h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0,
        "Haar analysis needs even spatial dims, got {h}x{w}"
    );
    let value = Tensor::from_parts(vec![4 * c, h / 2, w / 2], analysis(xv.data(), c, h, w));
    // Orthonormal: the adjoint is the inverse.
    x.tape().record("dwt_haar", value, &[x], move |g, _| {
        vec![Some(Tensor::from_parts(
            vec![c, h, w],
            synthesis(g.data(), c, h / 2, w / 2),
        ))]
    })
}

fn synthesis_op<'t, T: Element>(bands: Var<'t, T>) -> Result<Var<'t, T>> {
    let bv = bands.value();
    let (c4, h2, w2) = bv.dims3()?;
    ensure!(c4 % 4 == 0, "Haar synthesis needs 4C band channels, got {c4}");
    let c = c4 / 4;
    let value = Tensor::from_parts(vec![c, 2 * h2, 2 * w2], synthesis(bv.data(), c, h2, w2));
    bands.tape().record("iwt_haar", value, &[bands], move |g, _| {
        vec![Some(Tensor::from_parts(
            vec![c4, h2, w2],
            analysis(g.data(), c, 2 * h2, 2 * w2),
        ))]
    })
}

/// Splits `x: [C, H, W]` (H, W even) into low and detail bands.
pub fn dwt_haar<'t, T: Element>(x: Var<'t, T>) -> Result<WaveletPair<Var<'t, T>>> {
    let c = x.shape().first().copied().unwrap_or(0);
    let bands = analysis_op(x)?;
    Ok(WaveletPair {
        low: bands.narrow(0, c)?,
        high: bands.narrow(c, 3 * c)?,
    })
}

/// Exact inverse of [`dwt_haar`].
pub fn iwt_haar<'t, T: Element>(p: WaveletPair<Var<'t, T>>) -> Result<Var<'t, T>> {
    let (ls, hs) = (p.low.shape(), p.high.shape());
    ensure!(
        ls.len() == 3 && hs.len() == 3 && hs[0] == 3 * ls[0] && hs[1..] == ls[1..],
        "detail bands {hs:?} do not match low band {ls:?}"
    );
    synthesis_op(Var::concat(&[p.low, p.high])?)
}

/// Tape-free analysis.
pub fn dwt_tensor<T: Element>(x: &Tensor<T>) -> Result<WaveletPair<Tensor<T>>> {
    let (c, h, w) = x.dims3()?;
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        "Haar analysis needs even spatial dims, got {h}x{w}"
    );
    let bands = analysis(x.data(), c, h, w);
    let plane = (h / 2) * (w / 2);
    Ok(WaveletPair {
        low: Tensor::new(&[c, h / 2, w / 2], bands[..c * plane].to_vec())?,
        high: Tensor::new(&[3 * c, h / 2, w / 2], bands[c * plane..].to_vec())?,
    })
}

/// Tape-free synthesis.
pub fn iwt_tensor<T: Element>(p: &WaveletPair<Tensor<T>>) -> Result<Tensor<T>> {
    let (c, h2, w2) = p.low.dims3()?;
    ensure!(
        p.high.shape() == [3 * c, h2, w2],
        "detail bands {:?} do not match low band {:?}",
        p.high.shape(),
        p.low.shape()
    );
    let mut bands = p.low.data().to_vec();
    bands.extend_from_slice(p.high.data());
    Tensor::new(&[c, 2 * h2, 2 * w2], synthesis(&bands, c, h2, w2))
}
