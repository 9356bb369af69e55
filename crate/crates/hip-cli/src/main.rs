//! `hip` — training, evaluation, benchmarking, and analysis harness for the
//! hierarchical grouped-attention models in `hip-core`.
//!
//! Every run persists its resolved configuration (TOML) next to its outputs,
//! so rerunning with that file and the same seed reproduces the metric CSVs
//! bit-exactly. Summary results are printed as `metric=value` lines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hip_core::attn::count_costs;
use hip_core::datasets::{self, DatasetKind, DatasetSpec};
use hip_core::embed::{adjacency_similarity, pos_analysis};
use hip_core::mae::{mask_autocorrelation, sample_mask, write_mask_pgm, MaskMode, MaskSpec};
use hip_core::model::{self, load_checkpoint, ModelConfig};
use hip_core::pgm::write_pgm;
use hip_core::tokenize::Permutation;
use hip_core::train::{
    build_pipeline, eval_classify, eval_dense, eval_mae, finetune_classify, finetune_dense,
    metrics_to_csv, pretrain_mae, AdamW, AdamWConfig, DecoderKind, Pipeline, PosMode, TrainConfig,
};
use hip_core::{Error, Result, Tensor32};

#[derive(Parser)]
#[command(name = "hip", version, about = "Hierarchical grouped-attention training harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the fully resolved run configuration as TOML.
    PrintConfig(RunArgs),
    /// Masked auto-encoding pre-training.
    Pretrain(RunArgs),
    /// Supervised fine-tuning (classification or dense labeling, by dataset).
    Finetune(RunArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(RunArgs),
    /// Wall-clock steps/sec across token counts, with analytic cost reports.
    Bench(BenchArgs),
    /// Render positional-embedding channels, probe maps, and PCA images.
    AnalyzePos(AnalyzeArgs),
    /// Render a sampling mask and report its periodicity.
    DumpMasks(DumpArgs),
}

/// Everything needed to reproduce a training/eval run.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    /// Model preset: hip16, hip256, hip16-toy, tiny, or a `-flat` variant.
    preset: String,
    model_seed: u64,
    pos_embed: PosMode,
    /// Apply one fixed random permutation to every example's token order.
    shuffle_pixels: bool,
    /// Dense-decoding path used by finetune/eval on segmentation data.
    decoder: DecoderKind,
    beta2: f64,
    weight_decay: f64,
    dataset: DatasetSpec,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "hip16-toy".into(),
            model_seed: 1,
            pos_embed: PosMode::Learned,
            shuffle_pixels: false,
            decoder: DecoderKind::Full,
            beta2: 0.95,
            weight_decay: 0.0,
            dataset: DatasetSpec::new(DatasetKind::SmoothField, 64, 64, 2024),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Start from a persisted run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where config, metrics, and checkpoints are written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// smooth-field | local-pattern | shapes-seg | point-set | bimodal
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Training seed (HIP_SEED env var takes precedence).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    /// uniform | groupwise
    #[arg(long)]
    mask_mode: Option<String>,
    #[arg(long)]
    early_stop_loss: Option<f64>,
    /// Stop after this step without altering the lr schedule.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    drop_rate: Option<f64>,
    /// learned | fourier
    #[arg(long)]
    pos_embed: Option<String>,
    #[arg(long)]
    shuffle_pixels: Option<bool>,
    /// full | bottleneck
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Checkpoint to initialize from (resume or fine-tune source).
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [4096usize, 16384, 50176])]
    resolutions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ["hip16-toy".to_string(), "hip16-toy-flat".to_string()])]
    presets: Vec<String>,
    /// Timed steps per cell (median reported).
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimated-activation budget; cells above it are recorded as OOM.
    #[arg(long, default_value_t = 4.0)]
    mem_limit_gb: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, default_value_t = 0.85)]
    rate: f64,
    /// uniform | groupwise
    #[arg(long, default_value = "groupwise")]
    mode: String,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    #[arg(long, default_value_t = 224)]
    height: usize,
    #[arg(long, default_value_t = 224)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_kind(s: &str) -> Result<DatasetKind> {
    Ok(match s {
        "smooth-field" => DatasetKind::SmoothField,
        "local-pattern" => DatasetKind::LocalPattern,
        "shapes-seg" => DatasetKind::ShapesSeg,
        "point-set" => DatasetKind::PointSet,
        "bimodal" => DatasetKind::Bimodal,
        other => return Err(Error::Config(format!("unknown dataset kind {other}"))),
    })
}

fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    Ok(match s {
        "uniform" => MaskMode::Uniform,
        "groupwise" => MaskMode::Groupwise,
        other => return Err(Error::Config(format!("unknown mask mode {other}"))),
    })
}

fn parse_pos_mode(s: &str) -> Result<PosMode> {
    Ok(match s {
        "learned" => PosMode::Learned,
        "fourier" => PosMode::Fourier,
        other => return Err(Error::Config(format!("unknown positional mode {other}"))),
    })
}

fn parse_decoder(s: &str) -> Result<DecoderKind> {
    Ok(match s {
        "full" => DecoderKind::Full,
        "bottleneck" => DecoderKind::Bottleneck,
        other => return Err(Error::Config(format!("unknown decoder kind {other}"))),
    })
}

/// All-G=1 variant with identical depth and widths: every block keeps its
/// total latent count (groups x latents) but processes it as one group.
fn flat_variant(mut cfg: ModelConfig) -> ModelConfig {
    cfg.name = format!("{}-flat", cfg.name);
    for b in &mut cfg.blocks {
        b.latents *= b.groups;
        b.groups = 1;
    }
    cfg
}

fn preset_config(name: &str) -> Result<ModelConfig> {
    if let Some(base) = name.strip_suffix("-flat") {
        return Ok(flat_variant(preset_config(base)?));
    }
    Ok(match name {
        "hip16" => model::hip16(),
        "hip256" => model::hip256(),
        "hip16-toy" => model::hip16_toy(),
        "tiny" => model::tiny(),
        // tiny with a finer outer grouping: same depth and width, but the
        // encoder/decoder edges split the sequence into 8 contiguous groups,
        // which strengthens the locality prior of grouped cross-attention.
        // tiny-g8 with a roomier bottleneck, for dense decoding tasks where
        // everything the decoder paints must fit through the mid block.
        "tiny-wide" => {
            let mut cfg = model::tiny();
            cfg.blocks[0].groups = 8;
            cfg.blocks[2].groups = 8;
            cfg.blocks[1].latents = 16;
            cfg.blocks[1].channels = 32;
            cfg
        }
        "tiny-g8" => {
            let mut cfg = model::tiny();
            cfg.blocks[0].groups = 8;
            cfg.blocks[2].groups = 8;
            // the decoder edge needs at least one incoming token per group
            cfg.blocks[1].latents = 8;
            cfg
        }
        other => return Err(Error::Config(format!("unknown preset {other}"))),
    })
}

/// Defaults, then config file, then command-line flags, then HIP_SEED.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &args.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = &args.dataset {
        cfg.dataset.kind = parse_kind(v)?;
    }
    if let Some(v) = args.height {
        cfg.dataset.height = v;
    }
    if let Some(v) = args.width {
        cfg.dataset.width = v;
    }
    if let Some(v) = args.noise {
        cfg.dataset.noise = v;
    }
    if let Some(v) = args.train_size {
        cfg.dataset.train_size = v;
    }
    if let Some(v) = args.val_size {
        cfg.dataset.val_size = v;
    }
    if let Some(v) = args.data_seed {
        cfg.dataset.seed = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.model_seed {
        cfg.model_seed = v;
    }
    if let Some(v) = args.lr {
        cfg.train.schedule.base_lr = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.steps {
        cfg.train.schedule.total_steps = v;
    }
    if let Some(v) = args.warmup {
        cfg.train.schedule.warmup_steps = v;
    }
    if let Some(v) = args.mask_rate {
        cfg.train.mask_rate = v;
    }
    if let Some(v) = &args.mask_mode {
        cfg.train.mask_mode = parse_mask_mode(v)?;
    }
    if let Some(v) = args.early_stop_loss {
        cfg.train.early_stop_loss = Some(v);
    }
    if let Some(v) = args.stop_after {
        cfg.train.stop_after = Some(v);
    }
    if let Some(v) = args.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = args.log_every {
        cfg.train.log_every = v;
    }
    if let Some(v) = args.drop_rate {
        cfg.train.drop_rate = v;
    }
    if let Some(v) = &args.pos_embed {
        cfg.pos_embed = parse_pos_mode(v)?;
    }
    if let Some(v) = args.shuffle_pixels {
        cfg.shuffle_pixels = v;
    }
    if let Some(v) = &args.decoder {
        cfg.decoder = parse_decoder(v)?;
    }
    if let Some(v) = args.beta2 {
        cfg.beta2 = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Ok(env_seed) = std::env::var("HIP_SEED") {
        let v: u64 = env_seed
            .parse()
            .map_err(|_| Error::Config(format!("HIP_SEED={env_seed} is not an integer")))?;
        cfg.train.seed = v;
    }
    Ok(cfg)
}

const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Sampler indices at or above this are validation examples.
const VAL_BASE: usize = 1 << 32;

/// Dataset access plus the optional fixed pixel shuffle.
struct Data {
    spec: DatasetSpec,
    perm: Option<Permutation>,
}

impl Data {
    fn new(cfg: &RunConfig) -> Data {
        let spec = cfg.dataset.clone();
        let perm = cfg
            .shuffle_pixels
            .then(|| Permutation::fixed(tokens_of(&spec), hip_core::rng::derive(spec.seed, &[SHUFFLE_TAG])));
        Data { spec, perm }
    }

    fn tokens(&self) -> usize {
        tokens_of(&self.spec)
    }

    fn c_raw(&self) -> usize {
        match self.spec.kind {
            DatasetKind::PointSet => 3,
            _ => 1,
        }
    }

    /// Grid geometry for Fourier coordinates and visualizations; sequence
    /// datasets fall back to 1-D coordinates.
    fn grid(&self) -> Option<(usize, usize)> {
        match self.spec.kind {
            DatasetKind::SmoothField | DatasetKind::LocalPattern | DatasetKind::ShapesSeg => {
                Some((self.spec.height, self.spec.width))
            }
            DatasetKind::PointSet | DatasetKind::Bimodal => None,
        }
    }

    fn classes(&self) -> usize {
        match self.spec.kind {
            DatasetKind::LocalPattern => 4,
            DatasetKind::ShapesSeg => 3,
            _ => self.spec.num_classes.clamp(2, 4),
        }
    }

    fn shuffled(&self, x: Tensor32) -> Tensor32 {
        match &self.perm {
            Some(p) => p.apply_rows(&x),
            None => x,
        }
    }

    /// Training loops hand out unbounded indices that cycle over the train
    /// split; validation indices are offset by `VAL_BASE` and map to the
    /// disjoint val range.
    fn wrap(&self, idx: usize) -> usize {
        if idx >= VAL_BASE {
            self.spec.train_size + (idx - VAL_BASE) % self.spec.val_size.max(1)
        } else {
            idx % self.spec.train_size.max(1)
        }
    }

    fn val_indices(&self) -> Vec<usize> {
        (0..self.spec.val_size).map(|j| VAL_BASE + j).collect()
    }

    fn raw(&self, idx: usize) -> Tensor32 {
        let idx = self.wrap(idx);
        let x = match self.spec.kind {
            DatasetKind::SmoothField => datasets::gen_smooth_field(&self.spec, idx),
            DatasetKind::LocalPattern => datasets::gen_local_pattern(&self.spec, idx).0,
            DatasetKind::ShapesSeg => datasets::gen_shapes_seg(&self.spec, idx).0,
            DatasetKind::PointSet => datasets::gen_point_set(&self.spec, idx).0,
            DatasetKind::Bimodal => {
                let (g, w, _) = datasets::gen_bimodal(&self.spec, idx);
                let mut data = g.data().to_vec();
                data.extend_from_slice(w.data());
                hip_core::Tensor::new(vec![g.rows() + w.rows(), 1], data)
            }
        };
        self.shuffled(x.cast())
    }

    fn labeled(&self, idx: usize) -> (Tensor32, usize) {
        let wrapped = self.wrap(idx);
        let label = match self.spec.kind {
            DatasetKind::LocalPattern => datasets::gen_local_pattern(&self.spec, wrapped).1,
            DatasetKind::PointSet => datasets::gen_point_set(&self.spec, wrapped).1,
            DatasetKind::Bimodal => datasets::gen_bimodal(&self.spec, wrapped).2,
            _ => 0,
        };
        (self.raw(idx), label)
    }

    fn dense(&self, idx: usize) -> (Tensor32, Vec<usize>) {
        let wrapped = self.wrap(idx);
        let labels = match self.spec.kind {
            DatasetKind::ShapesSeg => datasets::gen_shapes_seg(&self.spec, wrapped).1,
            _ => vec![0; self.tokens()],
        };
        let labels = match &self.perm {
            Some(p) => p.indices().iter().map(|&i| labels[i]).collect(),
            None => labels,
        };
        (self.raw(idx), labels)
    }
}

fn tokens_of(spec: &DatasetSpec) -> usize {
    match spec.kind {
        DatasetKind::PointSet => datasets::POINT_SET_SIZE,
        DatasetKind::Bimodal => datasets::BIMODAL_GRID_TOKENS + datasets::BIMODAL_WAVE_TOKENS,
        _ => spec.tokens(),
    }
}

fn persist_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn out_dir(args: &RunArgs) -> Result<PathBuf> {
    let dir = args
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("--out-dir is required for this command".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn build_run_pipeline(
    cfg: &RunConfig,
    data: &Data,
    dense_out: Option<usize>,
    classes: Option<usize>,
) -> Result<Pipeline<f32>> {
    let mut mc = preset_config(&cfg.preset)?;
    mc.dense_out_channels = dense_out;
    mc.num_classes = classes;
    build_pipeline(mc, data.c_raw(), data.tokens(), cfg.pos_embed, data.grid(), cfg.model_seed)
}

fn optimizer(cfg: &RunConfig, pipe: &Pipeline<f32>) -> AdamW<f32> {
    AdamW::new(
        &pipe.model.store,
        AdamWConfig { beta2: cfg.beta2, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
    )
}

fn cmd_pretrain(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let dir = out_dir(args)?;
    persist_config(&cfg, &dir)?;
    let data = Data::new(&cfg);
    let mut pipe = build_run_pipeline(&cfg, &data, Some(data.c_raw()), None)?;
    let mut opt = optimizer(&cfg, &pipe);
    if let Some(p) = &args.init_from {
        let records = pipe.model.load(p)?;
        opt = AdamW::import(&pipe.model.store, opt.cfg, &records)?;
    }
    let mut sample = |idx: usize| data.raw(idx);
    let val: Vec<usize> = data.val_indices();
    let metrics = pretrain_mae(&mut pipe, &mut opt, &mut sample, &cfg.train, &val)?;
    std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
    pipe.model.save(&dir.join("model.ckpt"), &opt.export(&pipe.model.store))?;
    if let Some(last) = metrics.iter().rev().find(|m| m.metric == "masked_mse") {
        println!("masked_mse={}", last.value);
    }
    println!("steps={}", opt.step);
    Ok(())
}

fn cmd_finetune(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let dir = out_dir(args)?;
    persist_config(&cfg, &dir)?;
    let data = Data::new(&cfg);
    match cfg.dataset.kind {
        DatasetKind::ShapesSeg => {
            let mut pipe = build_run_pipeline(&cfg, &data, Some(data.classes()), None)?;
            if let Some(p) = &args.init_from {
                let n = pipe.model.load_matching(p)?;
                eprintln!("loaded {n} matching parameters from {}", p.display());
            }
            let mut opt = optimizer(&cfg, &pipe);
            let mut sample = |idx: usize| data.dense(idx);
            let val: Vec<usize> = data.val_indices();
            let metrics =
                finetune_dense(&mut pipe, &mut opt, &mut sample, cfg.decoder, &cfg.train, &val)?;
            std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
            pipe.model.save(&dir.join("model.ckpt"), &opt.export(&pipe.model.store))?;
            let miou = eval_dense(&pipe, &mut sample, &val, cfg.decoder)?;
            println!("miou={miou}");
        }
        _ => {
            let mut pipe = build_run_pipeline(&cfg, &data, None, Some(data.classes()))?;
            if let Some(p) = &args.init_from {
                let n = pipe.model.load_matching(p)?;
                eprintln!("loaded {n} matching parameters from {}", p.display());
            }
            let mut opt = optimizer(&cfg, &pipe);
            let mut sample = |idx: usize| data.labeled(idx);
            let val: Vec<usize> = data.val_indices();
            let metrics = finetune_classify(&mut pipe, &mut opt, &mut sample, &cfg.train, &val)?;
            std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
            pipe.model.save(&dir.join("model.ckpt"), &opt.export(&pipe.model.store))?;
            let acc = eval_classify(&pipe, &mut sample, &val)?;
            println!("accuracy={acc}");
        }
    }
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let data = Data::new(&cfg);
    let ckpt = args
        .checkpoint
        .clone()
        .or_else(|| args.init_from.clone())
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let val: Vec<usize> = data.val_indices();
    match cfg.dataset.kind {
        DatasetKind::SmoothField => {
            let mut pipe = build_run_pipeline(&cfg, &data, Some(data.c_raw()), None)?;
            pipe.model.load(&ckpt)?;
            let mut sample = |idx: usize| data.raw(idx);
            let mse = eval_mae(&pipe, &mut sample, &val, &cfg.train)?;
            println!("masked_mse={mse}");
        }
        DatasetKind::ShapesSeg => {
            let mut pipe = build_run_pipeline(&cfg, &data, Some(data.classes()), None)?;
            pipe.model.load(&ckpt)?;
            let mut sample = |idx: usize| data.dense(idx);
            let miou = eval_dense(&pipe, &mut sample, &val, cfg.decoder)?;
            println!("miou={miou}");
        }
        _ => {
            let mut pipe = build_run_pipeline(&cfg, &data, None, Some(data.classes()))?;
            pipe.model.load(&ckpt)?;
            let mut sample = |idx: usize| data.labeled(idx);
            let acc = eval_classify(&pipe, &mut sample, &val)?;
            println!("accuracy={acc}");
        }
    }
    Ok(())
}

/// Rough peak-activation estimate: the largest attention-score tensor
/// (heads x total latents x group tokens, summed over groups) is stored a
/// handful of times across forward values and gradients.
fn estimated_peak_bytes(mc: &ModelConfig, m: usize) -> u64 {
    let mut tokens = m as u64;
    let mut worst = 0u64;
    for b in &mc.blocks {
        // scores across all groups: G x [H, K, M/G] = H * K * M elements
        let scores = b.heads as u64 * b.latents as u64 * tokens;
        worst = worst.max(scores);
        tokens = (b.groups * b.latents) as u64;
    }
    worst * 4 * 6
}

fn square_grid(m: usize) -> Result<(usize, usize)> {
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(Error::Config(format!("benchmark token count {m} is not a square")));
    }
    Ok((side, side))
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let mut csv = String::from("preset,tokens,steps_per_sec,median_step_secs,analytic_macs\n");
    for preset in &args.presets {
        for &m in &args.resolutions {
            let mut mc = preset_config(preset)?;
            mc.dense_out_channels = Some(1);
            let report = count_costs(&mc.blocks, mc.input_channels, m)?;
            let cost_path = args.out_dir.join(format!("cost_{preset}_{m}.csv"));
            std::fs::write(&cost_path, report.to_csv())?;
            let total = report.total();
            let est = estimated_peak_bytes(&mc, m);
            if est as f64 > args.mem_limit_gb * 1e9 {
                csv.push_str(&format!("{preset},{m},OOM,OOM,{total}\n"));
                eprintln!("{preset} at {m} tokens exceeds the memory budget; recording OOM");
                continue;
            }
            let (h, w) = square_grid(m)?;
            let spec = DatasetSpec::new(DatasetKind::SmoothField, h, w, args.seed);
            let mut pipe: Pipeline<f32> =
                build_pipeline(mc, 1, m, PosMode::Learned, Some((h, w)), args.seed)?;
            let mut opt = AdamW::new(&pipe.model.store, AdamWConfig::default());
            let mut tc = TrainConfig {
                batch: args.batch,
                seed: args.seed,
                log_every: 0,
                ..TrainConfig::default()
            };
            let mut sample = |idx: usize| datasets::gen_smooth_field(&spec, idx % 16).cast::<f32>();
            let mut times = Vec::with_capacity(args.steps);
            for k in 0..args.warmup + args.steps {
                tc.schedule.total_steps = opt.step + 1;
                let start = Instant::now();
                pretrain_mae(&mut pipe, &mut opt, &mut sample, &tc, &[])?;
                let secs = start.elapsed().as_secs_f64();
                if k >= args.warmup {
                    times.push(secs);
                }
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times[times.len() / 2];
            let sps = 1.0 / median;
            csv.push_str(&format!("{preset},{m},{sps},{median},{total}\n"));
            println!("bench preset={preset} tokens={m} steps_per_sec={sps}");
        }
    }
    std::fs::write(args.out_dir.join("bench.csv"), &csv)?;
    Ok(())
}

fn cmd_analyze_pos(args: &AnalyzeArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let table = params
        .iter()
        .find(|(n, _)| n == "embed.pos")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Format("checkpoint has no positional table (embed.pos)".into()))?;
    let m = table.shape()[0];
    let d = table.shape()[1];
    let (h, w) = match (args.height, args.width) {
        (Some(h), Some(w)) if h * w == m => (h, w),
        (None, None) => {
            let side = (m as f64).sqrt().round() as usize;
            if side * side == m {
                (side, side)
            } else {
                eprintln!("positional table of {m} rows is not a grid; emitting 1-D strips");
                (1, m)
            }
        }
        _ => {
            eprintln!("--height/--width do not match {m} rows; emitting 1-D strips");
            (1, m)
        }
    };
    // per-channel images
    for c in 0..d {
        let values: Vec<f64> = (0..m).map(|r| table.data()[r * d + c] as f64).collect();
        write_pgm(&args.out_dir.join(format!("pos_channel_{c:02}.pgm")), w, h, &values)?;
    }
    // probe-pixel inner products and PCA channels
    let probes = [0, m / 2 + w / 2, m - 1];
    let analysis = pos_analysis(&table, &probes);
    for (p, map) in &analysis.distance_maps {
        write_pgm(&args.out_dir.join(format!("probe_{p}.pgm")), w, h, map)?;
    }
    for (k, ch) in analysis.pca_channels.iter().take(4).enumerate() {
        write_pgm(&args.out_dir.join(format!("pca_{k}.pgm")), w, h, ch)?;
    }
    let (adj, rand_pair) = adjacency_similarity(&table, h, w, args.seed);
    println!("adjacent_cos={adj}");
    println!("random_cos={rand_pair}");
    println!("gap={}", adj - rand_pair);
    Ok(())
}

fn cmd_dump_masks(args: &DumpArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let m = args.height * args.width;
    let spec = MaskSpec { rate: args.rate, mode: parse_mask_mode(&args.mode)?, seed: args.seed };
    let mask = sample_mask(m, &spec, Some(args.groups))?;
    write_mask_pgm(&mask, args.height, args.width, &args.out_dir.join("mask.pgm"))?;
    println!("masked={}", mask.masked.len());
    println!("visible={}", mask.visible.len());
    if args.groups > 0 && m % args.groups == 0 && args.groups > 1 {
        let lag = m / args.groups;
        println!("autocorr_group_lag={}", mask_autocorrelation(&mask, m, lag));
    }
    Ok(())
}

fn cmd_print_config(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let text = toml::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::PrintConfig(a) => cmd_print_config(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::AnalyzePos(a) => cmd_analyze_pos(a),
        Cmd::DumpMasks(a) => cmd_dump_masks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
