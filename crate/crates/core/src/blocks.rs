//! Composite blocks: VSSM, LFSE, HFSE with its soft gate, HLFD, and the
//! channel-mapping head and tail convolutions.
//!
//! Every block operates on a single `[C, H, W]` feature map and reads its
//! parameters from a [`Scope`] named after the block.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::nn::{attention_hidden, channel_attention, conv2d, layernorm, linear, ConvSpec};
use crate::params::{Init, Scope, CA_REDUCTION};
use crate::scan::{four_directions, ScanKind, ScanOrder};
use crate::ssm::{dt_rank, ss2d};
use crate::tensor::Element;

/// Channel reduction factor of block heads.
pub const CHANNEL_SCALE: usize = 8;
/// Floor on the bottleneck width.
pub const MIN_BOTTLENECK: usize = 8;
/// Channel expansion inside VSSM.
pub const VSSM_EXPAND: usize = 2;
pub const LN_EPS: f64 = 1e-5;

/// Width of a block bottleneck for `c` input channels.
pub fn bottleneck(c: usize) -> usize {
    c.div_ceil(CHANNEL_SCALE).max(MIN_BOTTLENECK)
}

/// Scan orders per grid size for one scan scheme.
pub struct ScanCache {
    kind: ScanKind,
    orders: RefCell<HashMap<(usize, usize), Rc<[ScanOrder; 4]>>>,
}

impl ScanCache {
    pub fn new(kind: ScanKind) -> Self {
        Self {
            kind,
            orders: RefCell::new(HashMap::new()),
        }
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn get(&self, h: usize, w: usize) -> Result<Rc<[ScanOrder; 4]>> {
        if let Some(o) = self.orders.borrow().get(&(h, w)) {
            return Ok(Rc::clone(o));
        }
        let o = Rc::new(four_directions(self.kind, h, w)?);
        self.orders.borrow_mut().insert((h, w), Rc::clone(&o));
        Ok(o)
    }
}

fn conv<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, name: &str, spec: ConvSpec) -> Result<Var<'t, T>> {
    let s = p.child(name);
    conv2d(x, s.get("w")?, Some(s.get("b")?), spec)
}

fn lin<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, name: &str) -> Result<Var<'t, T>> {
    let s = p.child(name);
    linear(x, s.get("w")?, Some(s.get("b")?))
}

fn ln<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, name: &str) -> Result<Var<'t, T>> {
    let s = p.child(name);
    layernorm(x, s.get("g")?, s.get("b")?, LN_EPS)
}

/// `3x3` convolution under `head`.
pub fn head<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    conv(x, p, "head", ConvSpec::same(3))
}

/// `3x3` convolution under `tail`.
pub fn tail<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>) -> Result<Var<'t, T>> {
    conv(x, p, "tail", ConvSpec::same(3))
}

pub fn init_head_tail<T: Element>(init: &mut Init<'_, T>, c: usize, b: usize) -> Result<()> {
    init.conv("head", b, c, 3)?;
    init.conv("tail", c, b, 3)
}

/// Gate weights `(w1, w2)` with `w1 = e^a / (e^a + e^(1-a))`.
pub fn gate_weights(alpha: f64) -> (f64, f64) {
    let w1 = 1.0 / (1.0 + (1.0 - 2.0 * alpha).exp());
    (w1, 1.0 - w1)
}

/// `w1 * (x21 * x1) + w2 * (x22 * x1)` with weights from the scalar `alpha`.
pub fn soft_gate<'t, T: Element>(
    x1: Var<'t, T>,
    x21: Var<'t, T>,
    x22: Var<'t, T>,
    alpha: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = x1.shape();
    ensure!(
        x21.shape() == s && x22.shape() == s,
        "soft gate inputs differ: {:?}, {:?}, {:?}",
        s,
        x21.shape(),
        x22.shape()
    );
    ensure!(alpha.value().numel() == 1, "soft gate alpha must be a scalar");
    let alpha = alpha.reshape(&[])?;
    let w1 = alpha.scale(2.0)?.offset(-1.0)?.sigmoid()?;
    let w2 = w1.neg()?.offset(1.0)?;
    x21.mul(x1)?.mul(w1)?.add(x22.mul(x1)?.mul(w2)?)
}

/// Visual state space module on `c` channels.
pub fn init_vssm<T: Element>(init: &mut Init<'_, T>, c: usize, n: usize) -> Result<()> {
    let e = VSSM_EXPAND * c;
    init.layernorm("ln_in", c)?;
    init.linear("in_proj", 2 * e, c)?;
    init.conv("dw", e, 1, 3)?;
    for k in 0..4 {
        init.s6(&format!("s6_{k}"), e, n)?;
    }
    init.layernorm("ln_out", e)?;
    init.linear("out_proj", c, e)
}

pub fn vssm_block<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, scans: &ScanCache) -> Result<Var<'t, T>> {
    let s = x.shape();
    ensure!(s.len() == 3, "VSSM input must be [C, H, W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let proj = lin(ln(x, p, "ln_in")?, p, "in_proj")?;
    let e = proj.shape()[0] / 2;
    let xs = proj.narrow(0, e)?;
    let z = proj.narrow(e, e)?;
    let xs = conv(xs, p, "dw", ConvSpec::same(3).grouped(e))?.silu()?;
    let orders = scans.get(h, w)?;
    let heads = [p.s6("s6_0")?, p.s6("s6_1")?, p.s6("s6_2")?, p.s6("s6_3")?];
    let y = ss2d(xs, &heads, &orders)?;
    let y = ln(y, p, "ln_out")?.mul(z.silu()?)?;
    lin(y, p, "out_proj")?.add(x)
}

pub fn init_lfse<T: Element>(init: &mut Init<'_, T>, c: usize, n: usize) -> Result<()> {
    let b = bottleneck(c);
    init_head_tail(init, c, b)?;
    init.channel_attention("ca", b)?;
    init_vssm(&mut init.child("vssm"), b, n)
}

/// Low-frequency block: head, sigmoid-gated product of channel attention and
/// VSSM branches, residual to the head output, tail.
pub fn lfse<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, scans: &ScanCache) -> Result<Var<'t, T>> {
    let xh = head(x, p)?;
    let ca = p.child("ca");
    let a = channel_attention(xh, ca.get("w1")?, ca.get("b1")?, ca.get("w2")?, ca.get("b2")?)?;
    let v = vssm_block(xh, &p.child("vssm"), scans)?;
    let fused = a.sigmoid()?.mul(v.sigmoid()?)?.add(xh)?;
    tail(fused, p)
}

pub fn init_hfse<T: Element>(init: &mut Init<'_, T>, c: usize, n: usize) -> Result<()> {
    let b = bottleneck(c);
    init_head_tail(init, c, b)?;
    init.conv("b1_conv", b, b, 3)?;
    init.layernorm("b1_ln", b)?;
    init_vssm(&mut init.child("vssm"), b, n)?;
    init.conv("b2_dw", b, 1, 5)?;
    init.conv("b2_d1", b, b, 3)?;
    init.conv("b2_d2", b, b, 3)?;
    init.scalar("alpha", 0.5)
}

/// High-frequency block: VSSM branch gated against two dilated-conv
/// responses of a depthwise `5x5` branch.
pub fn hfse<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, scans: &ScanCache) -> Result<Var<'t, T>> {
    let xh = head(x, p)?;
    let b = xh.shape()[0];
    let x1 = conv(xh, p, "b1_conv", ConvSpec::same(3))?;
    let x1 = vssm_block(ln(x1, p, "b1_ln")?, &p.child("vssm"), scans)?;
    let t = conv(xh, p, "b2_dw", ConvSpec::same(5).grouped(b))?;
    let x21 = conv(t, p, "b2_d1", ConvSpec::same(3))?;
    let x22 = conv(t, p, "b2_d2", ConvSpec::same(3).dilated(2))?;
    let g = soft_gate(x1, x21, x22, p.get("alpha")?)?;
    tail(g.add(xh)?, p)
}

pub fn init_hlfd<T: Element>(init: &mut Init<'_, T>, c: usize, n: usize) -> Result<()> {
    let b = bottleneck(c);
    ensure!(b % 2 == 0, "HLFD bottleneck {b} cannot be split in halves");
    let half = b / 2;
    init_head_tail(init, c, b)?;
    init_vssm(&mut init.child("vssm"), half, n)?;
    init.conv("ds_dw", half, 1, 3)?;
    init.conv("ds_pw", half, half, 1)?;
    init.conv("fuse", b, b, 3)
}

/// Decoder block: channel halves through VSSM and a depthwise-separable
/// conv, concatenated, fused by a `3x3` conv with a residual, tail.
pub fn hlfd<'t, T: Element>(x: Var<'t, T>, p: &Scope<'_, 't, T>, scans: &ScanCache) -> Result<Var<'t, T>> {
    let xh = head(x, p)?;
    let b = xh.shape()[0];
    ensure!(b % 2 == 0, "HLFD needs an even channel count after the head, got {b}");
    let half = b / 2;
    let y1 = vssm_block(xh.narrow(0, half)?, &p.child("vssm"), scans)?;
    let y2 = conv(xh.narrow(half, half)?, p, "ds_dw", ConvSpec::same(3).grouped(half))?;
    let y2 = conv(y2, p, "ds_pw", ConvSpec::same(1))?;
    let fused = conv(Var::concat(&[y1, y2])?, p, "fuse", ConvSpec::same(3))?.add(xh)?;
    tail(fused, p)
}

/// Multiply-accumulate counts, reported as `2 x MAC`.
pub mod flops {
    use super::*;

    pub fn conv(cout: usize, cin_g: usize, k: usize, h: usize, w: usize) -> u64 {
        2 * (cout * cin_g * k * k * h * w) as u64
    }

    pub fn linear(cout: usize, cin: usize, h: usize, w: usize) -> u64 {
        conv(cout, cin, 1, h, w)
    }

    /// Projections plus the recurrence of one S6 head over `t` tokens.
    pub fn s6(d: usize, n: usize, t: usize) -> u64 {
        let r = dt_rank(d);
        let proj = 2 * t * (d * r + r * d + 2 * d * n);
        // Decay product, input injection and output read per state.
        let scan = 2 * 3 * t * d * n;
        (proj + scan) as u64
    }

    pub fn vssm(c: usize, n: usize, h: usize, w: usize) -> u64 {
        let e = VSSM_EXPAND * c;
        linear(2 * e, c, h, w) + conv(e, 1, 3, h, w) + 4 * s6(e, n, h * w) + linear(c, e, h, w)
    }

    fn head_tail(c: usize, b: usize, h: usize, w: usize) -> u64 {
        conv(b, c, 3, h, w) + conv(c, b, 3, h, w)
    }

    pub fn lfse(c: usize, n: usize, h: usize, w: usize) -> u64 {
        let b = bottleneck(c);
        let hid = attention_hidden(b, CA_REDUCTION);
        head_tail(c, b, h, w) + 2 * (b * hid * 2) as u64 + vssm(b, n, h, w)
    }

    pub fn hfse(c: usize, n: usize, h: usize, w: usize) -> u64 {
        let b = bottleneck(c);
        head_tail(c, b, h, w)
            + conv(b, b, 3, h, w)
            + vssm(b, n, h, w)
            + conv(b, 1, 5, h, w)
            + 2 * conv(b, b, 3, h, w)
    }

    pub fn hlfd(c: usize, n: usize, h: usize, w: usize) -> u64 {
        let b = bottleneck(c);
        let half = b / 2;
        head_tail(c, b, h, w) + vssm(half, n, h, w) + conv(half, 1, 3, h, w) + conv(half, half, 1, h, w) + conv(b, b, 3, h, w)
    }
}
