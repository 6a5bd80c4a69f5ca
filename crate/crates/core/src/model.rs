//! The full network and its checkpoint format.
//!
//! The low-resolution cube is upsampled bicubically, mapped to `hidden`
//! channels, and pushed through a `levels`-deep Haar wavelet U-Net. Each
//! encoder level splits its input into a low band, encoded further down,
//! and three high bands, encoded in place and handed to the decoder at the
//! same level. The tail maps back to the band count and is added to the
//! upsampled cube.
//!
//! Parameter paths:
//!
//! | path | block |
//! |------|-------|
//! | `head`, `tail` | global `3x3` convolutions |
//! | `enc.{i}.lfse{j}` | low-frequency encoder, `i` in `0..=levels` |
//! | `enc.{i}.hfse{j}` | high-frequency encoder, `i` in `0..levels` |
//! | `dec.{i}.hlfd{j}` | decoder, `i` in `0..levels` |
//!
//! with `j` in `0..blocks_per_level`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::binio::{dim_u32, put_f32, put_u32, put_u64, Reader};
use crate::blocks::{self, flops, hfse, hlfd, init_head_tail, init_hfse, init_hlfd, init_lfse, lfse, ScanCache};
use crate::error::{ensure, Error, Result};
use crate::nn::{bicubic_resize, reflect_index};
use crate::params::{Init, ParamSet, Scope};
use crate::scan::ScanKind;
use crate::tensor::{Element, Tensor};
use crate::wavelet::{dwt_haar, iwt_haar, WaveletPair};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LEVELS: usize = 2;
pub const DEFAULT_STRIPE: usize = 4;
pub const DEFAULT_STATE: usize = 16;
pub const SCALES: [usize; 3] = [2, 4, 8];

/// Token ordering used by every VSSM in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanFamily {
    /// Stripes of width `stripe`.
    #[default]
    Stripe,
    /// Whole-image raster.
    Raster,
    /// Square windows of side `stripe`.
    Window,
}

impl ScanFamily {
    pub const ALL: [ScanFamily; 3] = [ScanFamily::Stripe, ScanFamily::Raster, ScanFamily::Window];

    fn code(self) -> u32 {
        match self {
            ScanFamily::Stripe => 0,
            ScanFamily::Raster => 1,
            ScanFamily::Window => 2,
        }
    }

    /// The scan scheme with stripe length or window side `l`.
    pub fn kind(self, l: usize) -> ScanKind {
        match self {
            ScanFamily::Stripe => ScanKind::Stripe(l),
            ScanFamily::Raster => ScanKind::Raster,
            ScanFamily::Window => ScanKind::Window(l),
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.code() == c)
    }
}

impl fmt::Display for ScanFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanFamily::Stripe => "stripe",
            ScanFamily::Raster => "raster",
            ScanFamily::Window => "window",
        })
    }
}

impl FromStr for ScanFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Contract(format!("unknown scan family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub bands: usize,
    pub scale: usize,
    pub hidden: usize,
    pub levels: usize,
    pub stripe: usize,
    pub state: usize,
    pub blocks_per_level: usize,
    pub scan: ScanFamily,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(bands: usize, scale: usize) -> Self {
        Self {
            bands,
            scale,
            hidden: DEFAULT_HIDDEN,
            levels: DEFAULT_LEVELS,
            stripe: DEFAULT_STRIPE,
            state: DEFAULT_STATE,
            blocks_per_level: 1,
            scan: ScanFamily::Stripe,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.bands >= 1, "band count must be positive");
        ensure!(SCALES.contains(&self.scale), "scale {} not in {SCALES:?}", self.scale);
        ensure!(self.hidden >= 1, "hidden width must be positive");
        ensure!(self.levels >= 1, "at least one wavelet level is required");
        ensure!(self.stripe >= 1, "stripe length must be positive");
        ensure!(self.state >= 1, "state size must be positive");
        ensure!(self.blocks_per_level >= 1, "at least one block per level is required");
        Ok(())
    }

    pub fn scan_kind(&self) -> ScanKind {
        self.scan.kind(self.stripe)
    }
}

fn block_name(kind: &str, j: usize) -> String {
    format!("{kind}{j}")
}

/// Parameters in initialization order for `cfg`.
pub fn init_weights<T: Element>(cfg: &ModelConfig) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let (d, n, m) = (cfg.hidden, cfg.state, cfg.blocks_per_level);
    let mut set = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut root = Init::new(&mut set, &mut rng);
    init_head_tail(&mut root, cfg.bands, d)?;
    for i in 0..=cfg.levels {
        let mut enc = root.child("enc");
        let mut lvl = enc.child(&i.to_string());
        for j in 0..m {
            init_lfse(&mut lvl.child(&block_name("lfse", j)), d, n)?;
        }
        if i < cfg.levels {
            for j in 0..m {
                init_hfse(&mut lvl.child(&block_name("hfse", j)), 3 * d, n)?;
            }
        }
    }
    for i in 0..cfg.levels {
        let mut dec = root.child("dec");
        let mut lvl = dec.child(&i.to_string());
        for j in 0..m {
            init_hlfd(&mut lvl.child(&block_name("hlfd", j)), d, n)?;
        }
    }
    Ok(set)
}

/// Multiply-accumulate estimate (as `2 x MAC`) of one forward pass on an
/// `h x w` low-resolution input. Resampling and wavelet steps are excluded.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (c, d, n, m) = (cfg.bands, cfg.hidden, cfg.state, cfg.blocks_per_level as u64);
    let (mut hh, mut ww) = (h * cfg.scale, w * cfg.scale);
    let mut total = flops::conv(d, c, 3, hh, ww) + flops::conv(c, d, 3, hh, ww);
    total += m * flops::lfse(d, n, hh, ww);
    for _ in 0..cfg.levels {
        let (lh, lw) = (hh.div_ceil(2), ww.div_ceil(2));
        total += m * (flops::hfse(3 * d, n, lh, lw) + flops::lfse(d, n, lh, lw) + flops::hlfd(d, n, hh, ww));
        (hh, ww) = (lh, lw);
    }
    total
}

/// Mirrors a trailing row and column onto odd spatial extents.
fn pad_even<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 == 0 && w % 2 == 0 {
        return Ok(x);
    }
    let (hp, wp) = (h + h % 2, w + w % 2);
    let index: Vec<usize> = (0..hp * wp)
        .map(|t| reflect_index((t / wp) as isize, h) * w + reflect_index((t % wp) as isize, w))
        .collect();
    x.reshape(&[c, h * w])?.gather_last(&index)?.reshape(&[c, hp, wp])
}

/// Keeps the top-left `h x w` corner.
fn crop<'t, T: Element>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (c, hp, wp) = (s[0], s[1], s[2]);
    if (hp, wp) == (h, w) {
        return Ok(x);
    }
    let index: Vec<usize> = (0..h * w).map(|t| (t / w) * wp + t % w).collect();
    x.reshape(&[c, hp * wp])?.gather_last(&index)?.reshape(&[c, h, w])
}

type Block<T> = for<'a, 't> fn(Var<'t, T>, &Scope<'a, 't, T>, &ScanCache) -> Result<Var<'t, T>>;

fn run_blocks<'t, T: Element>(
    mut x: Var<'t, T>,
    level: &Scope<'_, 't, T>,
    kind: &str,
    m: usize,
    block: Block<T>,
    scans: &ScanCache,
) -> Result<Var<'t, T>> {
    for j in 0..m {
        x = block(x, &level.child(&block_name(kind, j)), scans)?;
    }
    Ok(x)
}

/// Records the network on the scope's tape and returns the `[C, sH, sW]`
/// prediction for the low-resolution cube `x_lr`.
pub fn forward<'t, T: Element>(
    tape: &'t Tape<T>,
    p: &Scope<'_, 't, T>,
    cfg: &ModelConfig,
    x_lr: &Tensor<T>,
    scans: &ScanCache,
) -> Result<Var<'t, T>> {
    let (c, _, _) = x_lr.dims3()?;
    ensure!(c == cfg.bands, "input has {c} bands, model expects {}", cfg.bands);
    if !x_lr.is_finite() {
        return Err(Error::Numeric("input cube contains non-finite values".into()));
    }
    let m = cfg.blocks_per_level;
    let upsampled = tape.constant(bicubic_resize(x_lr, cfg.scale as f64)?);
    let enc = p.child("enc");
    let dec = p.child("dec");

    let x0 = blocks::head(upsampled, p)?;
    let mut cur = run_blocks(x0, &enc.child("0"), "lfse", m, lfse, scans)?;
    let mut skips = Vec::with_capacity(cfg.levels);
    for i in 0..cfg.levels {
        let s = cur.shape();
        let (h, w) = (s[1], s[2]);
        let bands = dwt_haar(pad_even(cur)?)?;
        ensure!(
            bands.high.shape()[0] == 3 * bands.low.shape()[0],
            "level {i}: high path has {} channels for {} low",
            bands.high.shape()[0],
            bands.low.shape()[0]
        );
        let lvl = enc.child(&i.to_string());
        skips.push((run_blocks(bands.high, &lvl, "hfse", m, hfse, scans)?, h, w));
        cur = run_blocks(bands.low, &enc.child(&(i + 1).to_string()), "lfse", m, lfse, scans)?;
    }
    for i in (0..cfg.levels).rev() {
        let (high, h, w) = skips.pop().expect("one skip per level");
        let y = crop(iwt_haar(WaveletPair { low: cur, high })?, h, w)?;
        cur = run_blocks(y, &dec.child(&i.to_string()), "hlfd", m, hlfd, scans)?;
    }
    upsampled.add(blocks::tail(cur, p)?)
}

/// A configuration with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    config: ModelConfig,
    params: ParamSet<T>,
}

impl<T: Element> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            params: init_weights(&config)?,
            config,
        })
    }

    /// Pairs `params` with `config`, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let expected = init_weights::<T>(&config)?;
        ensure!(
            expected.len() == params.len(),
            "{} parameters for a configuration with {}",
            params.len(),
            expected.len()
        );
        for ((en, et), (gn, gt)) in expected.iter().zip(params.iter()) {
            ensure!(
                en == gn && et.shape() == gt.shape(),
                "parameter {gn} {:?} where {en} {:?} was expected",
                gt.shape(),
                et.shape()
            );
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }

    pub fn scan_cache(&self) -> ScanCache {
        ScanCache::new(self.config.scan_kind())
    }

    /// Zeroes the global tail so the output reduces to the upsampled input.
    pub fn zero_tail(&mut self) -> Result<()> {
        for name in ["tail.w", "tail.b"] {
            let t = self.params.get_mut(name)?;
            *t = Tensor::zeros(t.shape());
        }
        Ok(())
    }

    /// Forward pass without gradients.
    pub fn infer(&self, x_lr: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let y = forward(&tape, &bound.root(), &self.config, x_lr, &self.scan_cache())?;
        let out = y.value();
        if !out.is_finite() {
            return Err(Error::Numeric("forward pass produced non-finite values".into()));
        }
        Ok(out)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HSRW";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes `model` as magic, version, config record, tensor count, then
/// `(name, shape, f32 values)` per parameter, all little-endian.
pub fn encode_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + 4 * model.count_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for (v, what) in [
        (c.bands, "bands"),
        (c.scale, "scale"),
        (c.hidden, "hidden"),
        (c.levels, "levels"),
        (c.stripe, "stripe"),
        (c.state, "state"),
        (c.blocks_per_level, "blocks per level"),
    ] {
        put_u32(&mut out, dim_u32(v, what)?);
    }
    put_u32(&mut out, c.scan.code());
    put_u64(&mut out, c.seed);
    put_u32(&mut out, dim_u32(model.params.len(), "tensor count")?);
    for (name, t) in model.params.iter() {
        put_u32(&mut out, dim_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dim_u32(t.ndim(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, dim_u32(d, "dimension")?);
        }
        for &v in t.data() {
            put_f32(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let mut field = |what: &str| -> Result<usize> { Ok(r.u32(what)? as usize) };
    let (bands, scale, hidden, levels, stripe, state, blocks_per_level) = (
        field("bands")?,
        field("scale")?,
        field("hidden")?,
        field("levels")?,
        field("stripe")?,
        field("state")?,
        field("blocks per level")?,
    );
    let code = r.u32("scan family")?;
    let Some(scan) = ScanFamily::from_code(code) else {
        return r.fail(format!("unknown scan family code {code}"));
    };
    let seed = r.u64("seed")?;
    let config = ModelConfig {
        bands,
        scale,
        hidden,
        levels,
        stripe,
        state,
        blocks_per_level,
        scan,
        seed,
    };
    if let Err(e) = config.validate() {
        return r.fail(format!("invalid configuration: {e}"));
    }
    let expected = init_weights::<f32>(&config)?;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return r.fail(format!("{count} tensors, configuration needs {}", expected.len()));
    }
    let mut params = ParamSet::new();
    for (en, et) in expected.iter() {
        let start = r.offset();
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8_lossy(r.bytes(len, "name")?).into_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if name != en || shape != et.shape() {
            return Err(Error::Format {
                offset: start as u64,
                message: format!("tensor {name} {shape:?} where {en} {:?} was expected", et.shape()),
            });
        }
        let data = r.f32s(et.numel(), &format!("values of {name}"))?;
        params.insert(name, Tensor::new(&shape, data)?)?;
    }
    r.finish()?;
    Ok(Model { config, params })
}

pub fn write_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
