//! Patch sampling and the L1/AdamW training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{ensure, Error, Result};
use crate::model::{forward, Model, ModelConfig};
use crate::nn::{adamw_step, l1_loss, AdamWConfig, OptState};
use crate::tensor::Tensor;

/// Ground-truth patch side for a scale factor.
pub fn default_patch(scale: usize) -> usize {
    if scale >= 8 {
        128
    } else {
        64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch: usize,
    pub epochs: usize,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
    /// Ground-truth patch side.
    pub patch: usize,
    pub seed: u64,
    /// Global gradient norm limit.
    pub clip_norm: Option<f64>,
    /// Calls the checkpoint hook every this many updates.
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(scale: usize) -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch: 8,
            epochs: 50,
            max_steps: None,
            patch: default_patch(scale),
            seed: 0,
            clip_norm: None,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        ensure!(self.batch >= 1, "batch size must be positive");
        let s = model.scale;
        let align = 1usize << model.levels;
        ensure!(
            self.patch > 0 && self.patch % s == 0 && self.patch % align == 0,
            "patch {} must be a positive multiple of the scale {s} and of {align}",
            self.patch
        );
        if let Some(c) = self.clip_norm {
            ensure!(c > 0.0, "clip norm must be positive");
        }
        Ok(())
    }
}

/// A low-resolution cube and its ground truth, `[C, h, w]` and `[C, sh, sw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub lr: Tensor<f32>,
    pub gt: Tensor<f32>,
}

impl Pair {
    pub fn new(lr: Tensor<f32>, gt: Tensor<f32>) -> Result<Self> {
        let (c, h, w) = lr.dims3()?;
        let (cg, hg, wg) = gt.dims3()?;
        ensure!(
            c == cg && hg % h == 0 && wg % w == 0 && hg / h == wg / w,
            "ground truth {:?} is not an integer upscale of {:?}",
            gt.shape(),
            lr.shape()
        );
        Ok(Self { lr, gt })
    }

    pub fn scale(&self) -> usize {
        self.gt.shape()[1] / self.lr.shape()[1]
    }
}

/// A crop taken by [`sample_patches`], with its source cube and the
/// ground-truth origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub source: usize,
    pub origin: (usize, usize),
    pub pair: Pair,
}

fn crop3(x: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(&[c, size, size], out).expect("crop shape")
}

/// Draws `count` aligned crops. Ground-truth origins are multiples of the
/// scale, uniform over the valid range, and the low-resolution crop starts
/// at the origin divided by the scale.
pub fn sample_patches(pairs: &[Pair], patch: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<Patch>> {
    ensure!(!pairs.is_empty(), "no training pairs");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let source = rng.gen_range(0..pairs.len());
        let p = &pairs[source];
        let s = p.scale();
        ensure!(patch % s == 0, "patch {patch} is not a multiple of the scale {s}");
        let (_, h, w) = p.gt.dims3()?;
        ensure!(
            h >= patch && w >= patch,
            "cube {source} is {h}x{w}, smaller than the {patch}x{patch} patch"
        );
        let gy = rng.gen_range(0..=(h - patch) / s) * s;
        let gx = rng.gen_range(0..=(w - patch) / s) * s;
        let pair = Pair {
            lr: crop3(&p.lr, gy / s, gx / s, patch / s),
            gt: crop3(&p.gt, gy, gx, patch),
        };
        out.push(Patch {
            source,
            origin: (gy, gx),
            pair,
        });
    }
    Ok(out)
}

/// Final weights and the loss of every update, in order.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub losses: Vec<f32>,
}

/// [`train_from`] on freshly initialized weights.
pub fn train(dataset: &[Pair], cfg: &TrainConfig, mcfg: &ModelConfig) -> Result<TrainOutcome> {
    train_from(Model::init(*mcfg)?, dataset, cfg, &mut |_, _| Ok(()))
}

/// Trains `model` on `dataset` for `cfg.epochs` shuffled passes in batches
/// of `cfg.batch`. `checkpoint` receives the step count and the weights at
/// the configured interval.
pub fn train_from(
    mut model: Model<f32>,
    dataset: &[Pair],
    cfg: &TrainConfig,
    checkpoint: &mut dyn FnMut(usize, &Model<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mcfg = *model.config();
    cfg.validate(&mcfg)?;
    for (i, p) in dataset.iter().enumerate() {
        ensure!(
            p.lr.shape()[0] == mcfg.bands && p.scale() == mcfg.scale,
            "pair {i} has {} bands at scale {}, model expects {} at {}",
            p.lr.shape()[0],
            p.scale(),
            mcfg.bands,
            mcfg.scale
        );
    }
    let mut opt = OptState::new(cfg.optimizer, &model.params().tensors());
    let scans = model.scan_cache();
    let mut losses = Vec::new();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            if losses.len() >= limit {
                break 'epochs;
            }
            let step = losses.len();
            let tape = Tape::new();
            let bound = model.params().bind(&tape, true);
            let mut total = None;
            for &i in batch {
                let p = &dataset[i];
                let y = forward(&tape, &bound.root(), &mcfg, &p.lr, &scans)?;
                let l = l1_loss(y, tape.constant(p.gt.clone()))?;
                total = Some(match total {
                    None => l,
                    Some(t) => l.add(t)?,
                });
            }
            let Some(total) = total else { continue };
            let loss = total.scale(1.0 / batch.len() as f64)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at step {step}")));
            }
            let g = tape.backward(loss)?;
            let mut grads: Vec<Tensor<f32>> = bound.vars().map(|(_, v)| g.get_or_zeros(v)).collect();
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            let mut params = model.params().tensors();
            adamw_step(&mut params, &grads, &mut opt)?;
            model.params_mut().set_tensors(params)?;
            losses.push(value);
            log::debug!("step {step} loss {value:e}");
            if let Some(every) = cfg.checkpoint_every {
                if every > 0 && losses.len() % every == 0 {
                    checkpoint(losses.len(), &model)?;
                }
            }
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// Rescales `grads` so their joint Euclidean norm is at most `max`.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = (max / norm) as f32;
        for g in grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
}

/// Writes `step,loss` rows, one per update.
pub fn write_loss_csv(path: &Path, losses: &[f32]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l:?}")?;
    }
    f.flush()?;
    Ok(())
}
