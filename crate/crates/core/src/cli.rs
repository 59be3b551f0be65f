//! Command-line interface: train, compress, decompress, eval, ablate.

use crate::ablation::{ablation_table, latent_volumes, PostHocConfig};
use crate::autoencoder::{train, Model, RateModel, StepRecord, TrainConfig};
use crate::codec::{compress_image, decompress_symbols, Bitstream};
use crate::data::{procedural_corpus, tiles, Dataset};
use crate::image_io::{quantize_8bit, read_image, write_ppm};
use crate::metrics::{ms_ssim, MsSsimConfig};
use crate::model_file;
use crate::tensor::Tensor;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Version of every JSON line this tool writes.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "cpdc", version, about = "Learned image compression with a 3D-CNN context model")]
pub struct Cli {
    /// TOML file with `[train]` and `[ablate]` tables; flags override it.
    #[arg(long, global = true, env = "CPDC_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a directory of PPM/PGM images.
    Train(TrainArgs),
    /// Compress one image into a bitstream.
    Compress(CompressArgs),
    /// Reconstruct an image from a bitstream.
    Decompress(DecompressArgs),
    /// Compress and reconstruct every image in a directory and report rates and quality.
    Eval(EvalArgs),
    /// Compare uniform, histogram and context-model rates on frozen latents.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub target_bpp: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub centers: Option<usize>,
    /// Encoder stage widths, e.g. `32,64,64`.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub lr_ae: Option<f64>,
    #[arg(long)]
    pub lr_ctx: Option<f64>,
    /// Divide learning rates by 10 every this many steps.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub rate_model: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Add this many 128x128 procedural textures to the training set.
    #[arg(long, default_value_t = 0)]
    pub procedural: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file (JSON lines); printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Model trained with beta = 0; trained here from `--data` when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Images the histogram and post-hoc models are fit on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub procedural: usize,
    /// Held-out images the rates are measured on; defaults to the training images.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Tile size used to cut images into latent volumes.
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    #[arg(long)]
    pub post_hoc_steps: Option<usize>,
    #[arg(long)]
    pub post_hoc_lr: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

/// Contents of the `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub ablate: PostHocConfig,
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

impl TrainFlags {
    pub fn apply(&self, c: &mut TrainConfig) -> anyhow::Result<()> {
        macro_rules! set {
            ($($f:ident => $t:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$t = v.clone();
                }
            )*};
        }
        set!(beta => beta, target_bpp => target_bpp, channels => channels, centers => centers,
             widths => widths, steps => steps, batch => batch, crop => crop, lr_ae => lr_ae,
             lr_ctx => lr_ctx, steps_per_epoch => lr_decay_every, seed => seed);
        if let Some(r) = &self.rate_model {
            c.rate_model = match r.as_str() {
                "context" => RateModel::Context,
                "uniform" => RateModel::Uniform,
                other => bail!("unknown rate model {other:?} (expected context or uniform)"),
            };
        }
        c.validate()?;
        Ok(())
    }
}

fn load_dataset(dir: Option<&Path>, procedural: usize, seed: u64) -> anyhow::Result<Dataset> {
    let mut data = match dir {
        Some(d) => Dataset::load_dir(d).with_context(|| format!("loading images from {}", d.display()))?,
        None => Dataset::default(),
    };
    if procedural > 0 {
        data.extend(procedural_corpus(seed, procedural, 128));
    }
    if data.is_empty() {
        bail!("no training images (pass --data with PPM/PGM files or --procedural N)");
    }
    Ok(data)
}

fn json_line(out: &mut impl Write, v: &Value) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn record(kind: &str, body: Value) -> Value {
    let mut v = json!({ "schema": REPORT_SCHEMA, "kind": kind });
    if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
        m.extend(b);
    }
    v
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains and writes model and log; returns the trained model.
pub fn run_training(
    config: &TrainConfig,
    data: &Dataset,
    out: &Path,
    log: &Path,
) -> anyhow::Result<Model> {
    let mut log_file = std::io::BufWriter::new(
        std::fs::File::create(log).with_context(|| format!("creating {}", log.display()))?,
    );
    json_line(
        &mut log_file,
        &record("config", json!({ "train": config, "images": data.names })),
    )?;
    let model = train(config, data, |r: &StepRecord| {
        json_line(&mut log_file, &record("step", serde_json::to_value(r).expect("plain struct")))
            .map_err(|e| crate::Error::State(e.to_string()))
    })?;
    let hash = model_file::save(out, &model, Some(config)).with_context(|| format!("writing {}", out.display()))?;
    json_line(&mut log_file, &record("model", json!({ "path": out, "hash": hex(&hash) })))?;
    log_file.flush()?;
    Ok(model)
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> anyhow::Result<()> {
    let mut config = file.train.clone();
    args.flags.apply(&mut config)?;
    let data = load_dataset(args.data.as_deref(), args.procedural, config.seed)?;
    let log = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", args.out.display())));
    run_training(&config, &data, &args.out, &log)?;
    println!("wrote {} and {}", args.out.display(), log.display());
    Ok(())
}

fn cmd_compress(args: &CompressArgs) -> anyhow::Result<()> {
    let mut m = model_file::load(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let x = read_image(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let c = compress_image(&mut m.model, m.hash, &x)?;
    let bytes = c.bitstream.to_bytes();
    // the header must read back exactly before the file counts as written
    if Bitstream::from_bytes(&bytes)? != c.bitstream {
        bail!("bitstream header failed to round-trip");
    }
    std::fs::write(&args.output, &bytes).with_context(|| format!("writing {}", args.output.display()))?;
    let v = record(
        "compress",
        json!({
            "input": args.input, "output": args.output,
            "width": c.bitstream.width, "height": c.bitstream.height,
            "payload_bits": c.bitstream.payload_bits(), "bpp": c.bitstream.bpp(),
            "coding_cost_bits": c.coding_cost, "masked_coding_cost_bits": c.masked_coding_cost,
        }),
    );
    println!("{v}");
    Ok(())
}

fn cmd_decompress(args: &DecompressArgs) -> anyhow::Result<()> {
    let mut m = model_file::load(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let bytes = std::fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let (_, x_hat) = decompress_symbols(&mut m.model, m.hash, &bs)?;
    write_ppm(&args.output, &x_hat).with_context(|| format!("writing {}", args.output.display()))?;
    let v = record(
        "decompress",
        json!({ "input": args.input, "output": args.output, "width": bs.width, "height": bs.height,
                "payload_bits": bs.payload_bits(), "bpp": bs.bpp() }),
    );
    println!("{v}");
    Ok(())
}

/// Per-image evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub payload_bits: u64,
    pub bpp: f64,
    pub coding_cost_bits: f64,
    pub masked_coding_cost_bits: f64,
    pub ms_ssim: f64,
    pub distortion: f64,
    pub ms_ssim_scales: usize,
}

/// Compresses, decodes and scores one image; the decoded image must match
/// the encoder's reconstruction exactly.
pub fn evaluate_image(m: &mut model_file::LoadedModel, name: &str, x: &Tensor) -> anyhow::Result<EvalRecord> {
    let c = compress_image(&mut m.model, m.hash, x)?;
    let bs = Bitstream::from_bytes(&c.bitstream.to_bytes())?;
    let (symbols, x_hat) = decompress_symbols(&mut m.model, m.hash, &bs)?;
    if symbols != c.symbols || x_hat != c.x_hat {
        bail!("{name}: decoded output differs from the encoder's reconstruction");
    }
    let out = quantize_8bit(&x_hat);
    let cfg = MsSsimConfig::default();
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let s = ms_ssim(x, &out, &cfg)?;
    Ok(EvalRecord {
        name: name.to_string(),
        width: w,
        height: h,
        payload_bits: bs.payload_bits(),
        bpp: bs.bpp(),
        coding_cost_bits: c.coding_cost,
        masked_coding_cost_bits: c.masked_coding_cost,
        ms_ssim: s,
        distortion: 100.0 * (1.0 - s),
        ms_ssim_scales: cfg.effective_scales(h, w)?,
    })
}

/// The full report as JSON lines: a config line, one line per image, one aggregate line.
pub fn eval_report(m: &mut model_file::LoadedModel, data: &Dataset) -> anyhow::Result<Vec<Value>> {
    if data.is_empty() {
        bail!("no images to evaluate");
    }
    let mut lines = vec![record("config", json!({ "model_hash": hex(&m.hash), "model": m.header }))];
    let mut recs = Vec::new();
    for (name, x) in data.names.iter().zip(&data.images) {
        let r = evaluate_image(m, name, x)?;
        lines.push(record("image", serde_json::to_value(&r)?));
        recs.push(r);
    }
    let n = recs.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
    lines.push(record(
        "aggregate",
        json!({
            "images": recs.len(),
            "bpp": mean(|r| r.bpp),
            "ms_ssim": mean(|r| r.ms_ssim),
            "distortion": mean(|r| r.distortion),
            "coding_cost_bits": mean(|r| r.coding_cost_bits),
            "payload_bits": mean(|r| r.payload_bits as f64),
        }),
    ));
    Ok(lines)
}

fn write_lines(path: Option<&Path>, lines: &[Value]) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?);
            lines.iter().try_for_each(|l| json_line(&mut f, l))?;
            f.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            lines.iter().try_for_each(|l| json_line(&mut out, l))?;
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let mut m = model_file::load(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let data = Dataset::load_dir(&args.data).with_context(|| format!("loading images from {}", args.data.display()))?;
    let lines = eval_report(&mut m, &data)?;
    write_lines(args.report.as_deref(), &lines)
}

fn cmd_ablate(args: &AblateArgs, file: &FileConfig) -> anyhow::Result<()> {
    let mut train_cfg = file.train.clone();
    args.flags.apply(&mut train_cfg)?;
    let mut post = file.ablate.clone();
    if let Some(s) = args.post_hoc_steps {
        post.steps = s;
    }
    if let Some(lr) = args.post_hoc_lr {
        post.lr = lr;
    }
    let data = load_dataset(args.data.as_deref(), args.procedural, train_cfg.seed)?;
    let mut model = match &args.model {
        Some(p) => model_file::load(p).with_context(|| format!("loading model {}", p.display()))?.model,
        None => {
            train_cfg.beta = 0.0;
            let m = train(&train_cfg, &data, |_| Ok(()))?;
            model_file::round_trip(&m, Some(&train_cfg))?.model
        }
    };
    let eval = match &args.eval_data {
        Some(d) => Dataset::load_dir(d).with_context(|| format!("loading images from {}", d.display()))?,
        None => data.clone(),
    };
    let f = model.ae.downsampling();
    if args.tile == 0 || args.tile % f != 0 {
        bail!("--tile must be a positive multiple of {f}");
    }
    let train_tiles = tiles(&data.images, args.tile);
    let eval_tiles = tiles(&eval.images, args.tile);
    if train_tiles.is_empty() || eval_tiles.is_empty() {
        bail!("images are smaller than one {0}x{0} tile", args.tile);
    }
    let train_vols = latent_volumes(&mut model, &train_tiles)?;
    let eval_vols = latent_volumes(&mut model, &eval_tiles)?;
    let pixels = eval_tiles.len() * args.tile * args.tile;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let table = ablation_table(&train_vols, &eval_vols, &model.centers, pixels, &post, &mut rng)?;
    print!("{}", table.to_text());
    let mut lines = vec![record("config", json!({ "post_hoc": post, "tile": args.tile }))];
    for r in &table.rows {
        lines.push(record("ablation", serde_json::to_value(r)?));
    }
    if let Some(p) = &args.report {
        write_lines(Some(p), &lines)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, &file),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a, &file),
    }
}
