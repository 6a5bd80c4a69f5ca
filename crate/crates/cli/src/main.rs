//! Command-line front end: synthetic data, degradation, training, inference,
//! evaluation and scan-order visualization.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hsrmamba::data::{degrade, encode_p6, read_hsc, synth_cube, write_hsc, HsiCube};
use hsrmamba::metrics::{sam_error_map, MetricReport};
use hsrmamba::model::{
    read_checkpoint, write_checkpoint, Model, ModelConfig, ScanFamily, DEFAULT_HIDDEN, DEFAULT_LEVELS,
    DEFAULT_STATE, DEFAULT_STRIPE,
};
use hsrmamba::nn::AdamWConfig;
use hsrmamba::scan::ScanOrder;
use hsrmamba::train::{default_patch, sample_patches, train_from, write_loss_csv, Pair, TrainConfig};
use hsrmamba::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "hsrmamba", version, about = "Hyperspectral super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cube
    Synth(SynthArgs),
    /// Blur and decimate a cube
    Degrade(DegradeArgs),
    /// Train a model on patches of one ground-truth cube
    Train(TrainArgs),
    /// Super-resolve a low-resolution cube
    Infer(InferArgs),
    /// Compare a prediction against ground truth
    Eval(EvalArgs),
    /// Render a scan order as a text grid and an image
    ScanViz(ScanVizArgs),
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if hsrmamba::model::SCALES.contains(&v) => Ok(v),
        _ => Err(format!("scale must be one of 2, 4, 8 (got {s})")),
    }
}

fn parse_scan(s: &str) -> Result<ScanFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spectral bands
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(4..))]
    bands: u32,
    /// Height and width
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(4..))]
    size: u32,
    /// Blob radius as a fraction of the side
    #[arg(long, default_value_t = 0.15)]
    smoothness: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = parse_scale)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Hidden width
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    /// Wavelet levels
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    /// Stripe length, also the window side
    #[arg(long, default_value_t = DEFAULT_STRIPE)]
    stripe: usize,
    /// State size per channel
    #[arg(long, default_value_t = DEFAULT_STATE)]
    state: usize,
    /// Blocks of each kind per level
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Token order: stripe, raster or window
    #[arg(long, default_value = "stripe", value_parser = parse_scan)]
    scan: ScanFamily,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Ground-truth cube
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = parse_scale)]
    scale: usize,
    /// Optimizer updates
    #[arg(long, default_value_t = 500, conflicts_with = "epochs")]
    steps: usize,
    /// Passes over the sampled patches, instead of a step count
    #[arg(long)]
    epochs: Option<usize>,
    /// Output checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Ground-truth patch side [default: 64, or 128 at scale 8]
    #[arg(long)]
    patch: Option<usize>,
    /// Patches sampled from the cube
    #[arg(long, default_value_t = 16)]
    patches: usize,
    /// Global gradient norm limit
    #[arg(long)]
    clip: Option<f64>,
    /// Rewrite the checkpoint every this many steps
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Write `step,loss` rows here
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Zero the global tail before saving, so inference returns the bicubic upsample
    #[arg(long)]
    zero_tail: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Low-resolution cube
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Metric CSV; printed to stdout either way
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Scale used by ERGAS
    #[arg(long, default_value_t = 4, value_parser = parse_scale)]
    scale: usize,
    /// Spectral-angle error map as a P6 image
    #[arg(long)]
    sam_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScanVizArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Stripe length, also the window side
    #[arg(long, default_value_t = DEFAULT_STRIPE)]
    stripe: usize,
    /// Token order: stripe, raster or window
    #[arg(long, default_value = "stripe", value_parser = parse_scan)]
    kind: ScanFamily,
    /// Scan direction, 0 to 3
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..4))]
    direction: u8,
    /// Pixels per grid cell in the image
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    cell: u32,
    /// Output prefix; writes `<out>.txt` and `<out>.ppm`
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(context: impl std::fmt::Display, err: Error) -> Self {
        let code = match err {
            Error::Numeric(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: format!("{context}: {err}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> Context<T> for Result<T, E> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(what, e.into()))
    }
}

fn load(path: &Path) -> Result<HsiCube, Failure> {
    read_hsc(path).context(format!("reading {}", path.display()))
}

fn save(cube: &HsiCube, path: &Path) -> CmdResult {
    write_hsc(cube, path).context(format!("writing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).context(format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> CmdResult {
    let n = a.size as usize;
    let cube = synth_cube(a.seed, a.bands as usize, n, n, a.smoothness).context("--smoothness")?;
    save(&cube, &a.out)
}

fn degrade_cmd(a: DegradeArgs) -> CmdResult {
    let cube = load(&a.input)?;
    let out = degrade(&cube, a.scale).context(format!("degrading {} by --scale {}", a.input.display(), a.scale))?;
    save(&out, &a.out)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let gt = load(&a.gt)?;
    let lr = degrade(&gt, a.scale).context(format!("degrading {} by --scale {}", a.gt.display(), a.scale))?;
    let mcfg = ModelConfig {
        hidden: a.model.hidden,
        levels: a.model.levels,
        stripe: a.model.stripe,
        state: a.model.state,
        blocks_per_level: a.model.blocks,
        scan: a.model.scan,
        seed: a.seed,
        ..ModelConfig::new(gt.bands(), a.scale)
    };
    let patch = a.patch.unwrap_or_else(|| default_patch(a.scale));
    let pair = Pair::new(lr.into_data(), gt.into_data()).context("pairing cubes")?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let patches: Vec<Pair> = sample_patches(&[pair], patch, a.patches, &mut rng)
        .context(format!("sampling --patch {patch} from {}", a.gt.display()))?
        .into_iter()
        .map(|p| p.pair)
        .collect();
    let per_epoch = patches.len().div_ceil(a.batch.max(1));
    let (epochs, max_steps) = match a.epochs {
        Some(e) => (e, None),
        None => (a.steps.div_ceil(per_epoch.max(1)), Some(a.steps)),
    };
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        batch: a.batch,
        epochs,
        max_steps,
        patch,
        seed: a.seed,
        clip_norm: a.clip,
        checkpoint_every: a.checkpoint_every,
    };
    let model = Model::init(mcfg).context("model configuration")?;
    log::info!("{} parameters", model.count_params());
    let ckpt = a.ckpt.clone();
    let mut hook = |step: usize, m: &Model<f32>| {
        log::info!("step {step}: checkpoint");
        write_checkpoint(m, &ckpt)
    };
    let out = train_from(model, &patches, &cfg, &mut hook).context("training")?;
    let mut model = out.model;
    if a.zero_tail {
        model.zero_tail().context("--zero-tail")?;
    }
    write_checkpoint(&model, &a.ckpt).context(format!("writing {}", a.ckpt.display()))?;
    if let Some(path) = &a.loss_csv {
        write_loss_csv(path, &out.losses).context(format!("writing {}", path.display()))?;
    }
    match (out.losses.first(), out.losses.last()) {
        (Some(first), Some(last)) => println!("{} steps, loss {first:e} -> {last:e}", out.losses.len()),
        _ => println!("0 steps"),
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> CmdResult {
    let cube = load(&a.input)?;
    let model = read_checkpoint(&a.ckpt).context(format!("reading {}", a.ckpt.display()))?;
    let y = model.infer(cube.data()).context(format!("running {} on {}", a.ckpt.display(), a.input.display()))?;
    // Widen the range rather than clamp, so the prediction is stored as computed.
    let (mut lo, mut hi) = cube.range();
    for &v in y.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let out = HsiCube::new(y, (lo, hi)).context("prediction")?;
    save(&out, &a.out)
}

/// Blue through green to red.
fn ramp(f: f64) -> [u8; 3] {
    let f = f.clamp(0.0, 1.0);
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(2.0 * f - 1.0), c(1.0 - (2.0 * f - 1.0).abs()), c(1.0 - 2.0 * f)]
}

fn ramp_image(values: &[f64], width: usize, height: usize, cell: usize) -> Result<Vec<u8>, Error> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = (width * cell, height * cell);
    let mut rgb = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / cell) * width + x / cell];
            let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            rgb.extend_from_slice(&ramp(f));
        }
    }
    encode_p6(w, h, &rgb)
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let pred = load(&a.pred)?;
    let gt = load(&a.gt)?;
    let what = format!("comparing {} with {}", a.pred.display(), a.gt.display());
    let report = MetricReport::compute(gt.data(), pred.data(), gt.peak(), a.scale).context(&what)?;
    let csv = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
    print!("{csv}");
    log::info!("{report}");
    if let Some(path) = &a.csv {
        write_bytes(path, csv.as_bytes())?;
    }
    if let Some(path) = &a.sam_map {
        let map = sam_error_map(gt.data(), pred.data()).context(&what)?;
        let img = ramp_image(map.angles.data(), gt.width(), gt.height(), 1).context("SAM map")?;
        write_bytes(path, &img)?;
    }
    Ok(())
}

fn scan_viz(a: ScanVizArgs) -> CmdResult {
    let order = ScanOrder::new(a.kind.kind(a.stripe), a.height, a.width, a.direction).context("scan order")?;
    let grid = order.text_grid();
    println!("{grid}");
    if let Some(prefix) = &a.out {
        let with_ext = |ext: &str| {
            let mut p = prefix.clone().into_os_string();
            p.push(ext);
            PathBuf::from(p)
        };
        write_bytes(&with_ext(".txt"), format!("{grid}\n").as_bytes())?;
        let seq: Vec<f64> = order.inv().iter().map(|&t| t as f64).collect();
        let img = ramp_image(&seq, a.width, a.height, a.cell as usize).context("scan image")?;
        write_bytes(&with_ext(".ppm"), &img)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Degrade(a) => degrade_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ScanViz(a) => scan_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
