//! Neural-network operators on top of the tape: convolution, layer
//! normalization, squeeze-and-excitation channel attention, bicubic
//! resizing, AdamW and the L1 objective.

use crate::autodiff::Var;
use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// "Same" output size with mirrored borders (no edge repeat).
    SameReflect,
    /// "Same" output size with zero borders.
    SameZero,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride-1, reflect-padded, ungrouped `k x k` convolution.
    pub fn same(k: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::SameReflect,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Padding before and after along an axis with kernel extent `k`.
    fn pads(&self, k: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::SameReflect | Padding::SameZero => {
                let total = self.dilation * (k - 1);
                (total / 2, total - total / 2)
            }
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (pt, pb) = self.pads(self.kernel.0);
        let (pl, pr) = self.pads(self.kernel.1);
        let eh = self.dilation * (self.kernel.0 - 1) + 1;
        let ew = self.dilation * (self.kernel.1 - 1) + 1;
        let (hp, wp) = (h + pt + pb, w + pl + pr);
        if hp < eh || wp < ew {
            return None;
        }
        Some(((hp - eh) / self.stride + 1, (wp - ew) / self.stride + 1))
    }
}

/// Mirror index `i` into `[0, n)` without repeating the edge sample,
/// folding repeatedly when the padding exceeds the extent.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Source index for each padded position, `None` for zero padding.
fn pad_map(n: usize, before: usize, after: usize, mode: Padding) -> Vec<Option<usize>> {
    (0..n + before + after)
        .map(|i| {
            let r = i as isize - before as isize;
            match mode {
                Padding::SameReflect => Some(reflect_index(r, n)),
                _ => (r >= 0 && (r as usize) < n).then_some(r as usize),
            }
        })
        .collect()
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    hp: usize,
    wp: usize,
    stride: usize,
    dilation: usize,
}

impl ConvGeom {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for co in 0..self.cout {
            let g = co / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        f(co, ci, cl, ky, kx);
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in/groups,
/// kh, kw]` plus optional bias `[C_out]`.
pub fn conv2d<'t, T: Element>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
    spec: ConvSpec,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = w.value();
    let (cin, h, wd) = xv.dims3()?;
    ensure!(
        wv.ndim() == 4,
        "conv weight must be [C_out, C_in/groups, kh, kw], got {:?}",
        wv.shape()
    );
    let (cout, cin_g, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    ensure!(
        spec.groups >= 1 && spec.stride >= 1 && spec.dilation >= 1,
        "conv stride, dilation and groups must be positive"
    );
    ensure!(
        cin % spec.groups == 0 && cout % spec.groups == 0,
        "channels {cin} -> {cout} not divisible by {} groups",
        spec.groups
    );
    ensure!(
        cin_g * spec.groups == cin,
        "weight expects {} input channels per group, input has {cin} over {} groups",
        cin_g,
        spec.groups
    );
    ensure!(
        (kh, kw) == spec.kernel,
        "weight kernel {:?} differs from spec {:?}",
        (kh, kw),
        spec.kernel
    );
    let bv = match b {
        Some(b) => {
            let bv = b.value();
            ensure!(
                bv.shape() == [cout],
                "bias shape {:?} for {cout} output channels",
                bv.shape()
            );
            Some(bv)
        }
        None => None,
    };
    let (ho, wo) = spec.output_dims(h, wd).ok_or_else(|| {
        Error::Contract(format!(
            "{h}x{wd} input smaller than the effective kernel under valid padding"
        ))
    })?;
    let (pt, pb) = spec.pads(kh);
    let (pl, pr) = spec.pads(kw);
    let rows = pad_map(h, pt, pb, spec.padding);
    let cols = pad_map(wd, pl, pr, spec.padding);
    let geom = ConvGeom {
        cin,
        cout,
        groups: spec.groups,
        kh,
        kw,
        hp: rows.len(),
        wp: cols.len(),
        stride: spec.stride,
        dilation: spec.dilation,
    };

    let mut xp = vec![T::zero(); cin * geom.hp * geom.wp];
    for ci in 0..cin {
        for (i, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            let dst = &mut xp[(ci * geom.hp + i) * geom.wp..][..geom.wp];
            let src = &xv.data()[(ci * h + r) * wd..][..wd];
            for (d, c) in dst.iter_mut().zip(&cols) {
                if let Some(c) = c {
                    *d = src[*c];
                }
            }
        }
    }

    let mut out = vec![T::zero(); cout * ho * wo];
    if let Some(bv) = &bv {
        for (co, plane) in out.chunks_exact_mut(ho * wo).enumerate() {
            plane.fill(bv.data()[co]);
        }
    }
    let wdata = wv.data();
    let (s, d) = (geom.stride, geom.dilation);
    geom.for_each_tap(|co, ci, cl, ky, kx| {
        let wgt = wdata[((co * cin_g + cl) * kh + ky) * kw + kx];
        for oy in 0..ho {
            let in_row = &xp[(ci * geom.hp + oy * s + ky * d) * geom.wp + kx * d..];
            let out_row = &mut out[(co * ho + oy) * wo..][..wo];
            if s == 1 {
                for (o, &v) in out_row.iter_mut().zip(&in_row[..wo]) {
                    *o += wgt * v;
                }
            } else {
                for (o, &v) in out_row.iter_mut().zip(in_row.iter().step_by(s)) {
                    *o += wgt * v;
                }
            }
        }
    });

    let value = Tensor::from_parts(vec![cout, ho, wo], out);
    let mut parents = vec![x, w];
    parents.extend(b);
    let w_shape = wv.shape().to_vec();
    x.tape().record("conv2d", value, &parents, move |g, needs| {
        let gd = g.data();
        let mut gxp = needs[0].then(|| vec![T::zero(); cin * geom.hp * geom.wp]);
        let mut gw = needs[1].then(|| vec![T::zero(); wdata_len(&w_shape)]);
        let wdata = wv.data();
        geom.for_each_tap(|co, ci, cl, ky, kx| {
            let widx = ((co * cin_g + cl) * kh + ky) * kw + kx;
            let wgt = wdata[widx];
            let mut acc = T::zero();
            for oy in 0..ho {
                let base = (ci * geom.hp + oy * s + ky * d) * geom.wp + kx * d;
                let g_row = &gd[(co * ho + oy) * wo..][..wo];
                if gw.is_some() {
                    let in_row = &xp[base..];
                    if s == 1 {
                        for (&gv, &v) in g_row.iter().zip(&in_row[..wo]) {
                            acc += gv * v;
                        }
                    } else {
                        for (&gv, &v) in g_row.iter().zip(in_row.iter().step_by(s)) {
                            acc += gv * v;
                        }
                    }
                }
                if let Some(gxp) = gxp.as_mut() {
                    let dst = &mut gxp[base..];
                    if s == 1 {
                        for (o, &gv) in dst[..wo].iter_mut().zip(g_row) {
                            *o += wgt * gv;
                        }
                    } else {
                        for (o, &gv) in dst.iter_mut().step_by(s).zip(g_row) {
                            *o += wgt * gv;
                        }
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                gw[widx] += acc;
            }
        });
        let gx = gxp.map(|gxp| {
            let mut gx = vec![T::zero(); cin * h * wd];
            for ci in 0..cin {
                for (i, r) in rows.iter().enumerate() {
                    let Some(r) = r else { continue };
                    let src = &gxp[(ci * geom.hp + i) * geom.wp..][..geom.wp];
                    let dst = &mut gx[(ci * h + r) * wd..][..wd];
                    for (&v, c) in src.iter().zip(&cols) {
                        if let Some(c) = c {
                            dst[*c] += v;
                        }
                    }
                }
            }
            Tensor::from_parts(vec![cin, h, wd], gx)
        });
        let mut grads = vec![gx, gw.map(|v| Tensor::from_parts(w_shape.clone(), v))];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let gb = gd.chunks_exact(ho * wo).map(|p| p.iter().copied().sum()).collect();
                Tensor::from_parts(vec![cout], gb)
            }));
        }
        grads
    })
}

fn wdata_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Per-pixel linear map `[C_in, H, W] -> [C_out, H, W]`; `w` is `[C_out, C_in]`.
pub fn linear<'t, T: Element>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (cout, cin) = w.value().dims2()?;
    let w4 = w.reshape(&[cout, cin, 1, 1])?;
    conv2d(x, w4, b, ConvSpec::same(1))
}

/// Layer normalization over the channel axis of `[C, H, W]`, separately at
/// each spatial position, followed by the per-channel affine map.
pub fn layernorm<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    ensure!(eps > 0.0, "layernorm eps must be positive, got {eps}");
    let xv = x.value();
    let (c, h, w) = xv.dims3()?;
    let (gv, bv) = (gamma.value(), beta.value());
    ensure!(
        gv.shape() == [c] && bv.shape() == [c],
        "layernorm affine shapes {:?}/{:?} for {c} channels",
        gv.shape(),
        bv.shape()
    );
    let p = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let xd = xv.data();
    let mut mean = vec![T::zero(); p];
    for plane in xd.chunks_exact(p) {
        for (m, &v) in mean.iter_mut().zip(plane) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![T::zero(); p];
    for plane in xd.chunks_exact(p) {
        for ((s, &v), &m) in var.iter_mut().zip(plane).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let eps_t = T::of(eps);
    let rstd: Vec<T> = var
        .iter()
        .map(|&s| T::one() / (s * inv_c + eps_t).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); c * p];
    let mut out = vec![T::zero(); c * p];
    for ch in 0..c {
        let (gc, bc) = (gv.data()[ch], bv.data()[ch]);
        for i in 0..p {
            let xh = (xd[ch * p + i] - mean[i]) * rstd[i];
            xhat[ch * p + i] = xh;
            out[ch * p + i] = gc * xh + bc;
        }
    }
    let value = Tensor::from_parts(vec![c, h, w], out);
    x.tape()
        .record("layernorm", value, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut m1 = vec![T::zero(); p];
                let mut m2 = vec![T::zero(); p];
                for ch in 0..c {
                    let gc = gv.data()[ch];
                    for i in 0..p {
                        let gh = gd[ch * p + i] * gc;
                        m1[i] += gh;
                        m2[i] += gh * xhat[ch * p + i];
                    }
                }
                let mut gx = vec![T::zero(); c * p];
                for ch in 0..c {
                    let gc = gv.data()[ch];
                    for i in 0..p {
                        let gh = gd[ch * p + i] * gc;
                        gx[ch * p + i] =
                            rstd[i] * (gh - m1[i] * inv_c - xhat[ch * p + i] * m2[i] * inv_c);
                    }
                }
                Tensor::from_parts(vec![c, h, w], gx)
            });
            let ggamma = needs[1].then(|| {
                let d = (0..c)
                    .map(|ch| {
                        (0..p)
                            .map(|i| gd[ch * p + i] * xhat[ch * p + i])
                            .sum()
                    })
                    .collect();
                Tensor::from_parts(vec![c], d)
            });
            let gbeta = needs[2].then(|| {
                let d = gd.chunks_exact(p).map(|pl| pl.iter().copied().sum()).collect();
                Tensor::from_parts(vec![c], d)
            });
            vec![gx, ggamma, gbeta]
        })
}

/// Width of the channel-attention bottleneck: `C / r`, at least 1.
pub fn attention_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Squeeze-and-excitation: global average pool, `C -> C/r` linear, ReLU,
/// `C/r -> C` linear, sigmoid, per-channel rescale of `x`.
///
/// `w1: [C, C/r]`, `b1: [C/r]`, `w2: [C/r, C]`, `b2: [C]`.
pub fn channel_attention<'t, T: Element>(
    x: Var<'t, T>,
    w1: Var<'t, T>,
    b1: Var<'t, T>,
    w2: Var<'t, T>,
    b2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let gate = channel_gate(x, w1, b1, w2, b2)?;
    x.mul_leading(gate)
}

/// The `[C]` sigmoid gate of [`channel_attention`].
pub fn channel_gate<'t, T: Element>(
    x: Var<'t, T>,
    w1: Var<'t, T>,
    b1: Var<'t, T>,
    w2: Var<'t, T>,
    b2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (c, _, _) = x.value().dims3()?;
    let pooled = x
        .reduce(crate::autodiff::ReduceKind::Mean, &[1, 2])?
        .reshape(&[1, c])?;
    let hidden = pooled.matmul(w1)?.add(b1)?.relu()?;
    hidden.matmul(w2)?.add(b2)?.sigmoid()?.reshape(&[c])
}

/// Keys cubic convolution kernel.
pub fn cubic_kernel(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Parameter of the Keys kernel used for upsampling.
pub const BICUBIC_A: f64 = -0.5;

/// Four source taps and weights per output index along one axis.
fn cubic_taps(n_in: usize, n_out: usize, scale: f64) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, n_in as isize - 1) as usize;
                wts[k] = cubic_kernel(frac - (k as f64 - 1.0), BICUBIC_A);
            }
            (idx, wts)
        })
        .collect()
}

fn scaled_dim(n: usize, scale: f64) -> Result<usize> {
    let target = n as f64 * scale;
    let rounded = target.round();
    ensure!(
        scale > 0.0 && (target - rounded).abs() < 1e-9 && rounded >= 1.0,
        "scale {scale} maps extent {n} to non-integral {target}"
    );
    Ok(rounded as usize)
}

/// Separable bicubic resize of every band of `[C, H, W]` by `scale`, with
/// clamped sampling at the borders. Fixed preprocessing; not differentiated.
pub fn bicubic_resize<T: Element>(x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (scaled_dim(h, scale)?, scaled_dim(w, scale)?);
    let col_taps = cubic_taps(w, wo, scale);
    let row_taps = cubic_taps(h, ho, scale);
    let xd = x.data();
    let mut horiz = vec![T::zero(); c * h * wo];
    for (row_in, row_out) in xd.chunks_exact(w).zip(horiz.chunks_exact_mut(wo)) {
        for (o, (idx, wts)) in row_out.iter_mut().zip(&col_taps) {
            let mut acc = T::zero();
            for k in 0..4 {
                acc += T::of(wts[k]) * row_in[idx[k]];
            }
            *o = acc;
        }
    }
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let plane = &horiz[ch * h * wo..][..h * wo];
        for (oy, (idx, wts)) in row_taps.iter().enumerate() {
            let dst = &mut out[(ch * ho + oy) * wo..][..wo];
            for k in 0..4 {
                let wt = T::of(wts[k]);
                let src = &plane[idx[k] * wo..][..wo];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wt * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Mean absolute error between `pred` and `target`.
pub fn l1_loss<'t, T: Element>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let (p, t) = (pred.value(), target.value());
    ensure!(
        p.shape() == t.shape(),
        "l1_loss shapes differ: {:?} vs {:?}",
        p.shape(),
        t.shape()
    );
    let n = T::of(p.numel() as f64);
    let loss: T = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>()
        / n;
    let shape = p.shape().to_vec();
    pred.tape()
        .record("l1_loss", Tensor::scalar(loss), &[pred, target], move |g, needs| {
            let gs = g.data()[0] / n;
            let sign: Vec<T> = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = a - b;
                    if d > T::zero() {
                        gs
                    } else if d < T::zero() {
                        -gs
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let gt = needs[1].then(|| {
                Tensor::from_parts(shape.clone(), sign.iter().map(|&v| -v).collect())
            });
            vec![needs[0].then(|| Tensor::from_parts(shape.clone(), sign)), gt]
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates and step counter for [`adamw_step`].
#[derive(Debug, Clone)]
pub struct OptState<T: Element> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> OptState<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One AdamW update: decoupled weight decay, then the bias-corrected Adam
/// step.
pub fn adamw_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptState<T>,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        "adamw: {} params, {} grads, {} moment slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    let cfg = state.config;
    ensure!(cfg.lr > 0.0, "adamw learning rate must be positive");
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape() && p.shape() == state.m[i].shape(),
            "adamw: parameter {i} has shape {:?} but gradient {:?}",
            p.shape(),
            g.shape()
        );
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2_sqrt = (1.0 - cfg.beta2.powi(t)).sqrt();
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(cfg.lr / bc1);
    let bc2 = T::of(bc2_sqrt);
    let eps = T::of(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *pv *= decay;
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            *pv -= step_size * *mv / (vv.sqrt() / bc2 + eps);
        }
    }
    Ok(())
}
