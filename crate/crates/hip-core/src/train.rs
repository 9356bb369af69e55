//! Optimization: AdamW with decoupled weight decay, cosine schedule with
//! linear warmup, gradient clipping, and the MAE / classification / dense
//! fine-tuning drivers.

use crate::attn::DropPath;
use crate::embed::{embed_rows, init_embed_params, EmbedParams};
use crate::mae::{corrupt_groupwise, corrupt_uniform, init_mask_token, mae_loss, sample_mask, MaskMode, MaskSpec};
use crate::model::{build, classify, decode_bottleneck_dense, decode_dense, encode, Model, ModelConfig};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear ramp `0 -> base_lr` over the warmup, then cosine decay to ~0.
/// Continuous at the warmup boundary.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    if s.total_steps <= s.warmup_steps {
        return s.base_lr;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moments per parameter plus the step counter.
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamWConfig) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { cfg, step: 0, m, v }
    }

    /// One decoupled-weight-decay update with bias correction. A non-finite
    /// gradient rejects the whole step and reports which parameter broke.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Option<Tensor<F>>],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "gradient slot count mismatch");
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Err(what) = g.check_finite("gradient") {
                    return Err(Error::Diverged {
                        step: self.step as usize,
                        what: format!("gradient of {}: {what}", store.name(ParamId(i))),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let bc1 = F::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - self.cfg.beta2.powi(t));
        let eps = F::from_f64(self.cfg.eps);
        let lr_f = F::from_f64(lr);
        let decay = F::from_f64(1.0 - lr * self.cfg.weight_decay);
        let one = F::one();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let mut p = store.value(id).clone();
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {}", store.name(id));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.data_mut();
            for ((pi, (mi, vi)), &gi) in
                pd.iter_mut().zip(md.iter_mut().zip(vd.iter_mut())).zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
            store.set(id, p);
        }
        Ok(())
    }

    /// Moments and step counter in checkpoint-record form.
    pub fn export(&self, store: &ParamStore<F>) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![("adamw.step".to_string(), Tensor::scalar(F::from_f64(self.step as f64)))];
        for (id, name, _) in store.iter() {
            out.push((format!("adamw.m.{name}"), self.m[id.0].clone()));
            out.push((format!("adamw.v.{name}"), self.v[id.0].clone()));
        }
        out
    }

    pub fn import(
        store: &ParamStore<F>,
        cfg: AdamWConfig,
        records: &[(String, Tensor<F>)],
    ) -> Result<Self> {
        let mut opt = Self::new(store, cfg);
        let lookup = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("optimizer record {name} missing")))
        };
        opt.step = lookup("adamw.step")?.data()[0].as_f64() as u64;
        for (id, name, _) in store.iter() {
            opt.m[id.0] = lookup(&format!("adamw.m.{name}"))?;
            opt.v[id.0] = lookup(&format!("adamw.v.{name}"))?;
        }
        Ok(opt)
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    Learned,
    Fourier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Full,
    Bottleneck,
}

/// Model plus the trainable input embedding and mask token, sharing one
/// parameter store.
pub struct Pipeline<F: Real> {
    pub model: Model<F>,
    pub embed: EmbedParams,
    pub mask_token: ParamId,
    /// Fixed Fourier positional code, used instead of the learned table
    /// when set (zero-padded to `d_pos` columns).
    pub fourier: Option<Tensor<F>>,
}

pub fn build_pipeline<F: Real>(
    config: ModelConfig,
    c_raw: usize,
    m_max: usize,
    pos_mode: PosMode,
    grid: Option<(usize, usize)>,
    seed: u64,
) -> Result<Pipeline<F>> {
    let d_pos = config.input_channels;
    let mut model = build(config, seed)?;
    let mut rng = crate::rng::stream(seed, &[0x454D_4245]);
    let embed = init_embed_params(&mut model.store, c_raw, d_pos, m_max, &mut rng);
    let mask_token = init_mask_token(&mut model.store, d_pos);
    let fourier = match pos_mode {
        PosMode::Learned => None,
        PosMode::Fourier => {
            let coords = match grid {
                Some((h, w)) => crate::embed::grid_coords(h, w),
                None => (0..m_max)
                    .map(|i| vec![2.0 * i as f64 / (m_max - 1).max(1) as f64 - 1.0])
                    .collect(),
            };
            let dims = coords[0].len();
            let bands = ((d_pos / dims).saturating_sub(1) / 2).max(1);
            let feats: Tensor<F> = crate::embed::fourier_features(&coords, bands, 10.0);
            let width = feats.shape()[1];
            if width > d_pos {
                return Err(Error::Config(format!(
                    "fourier width {width} exceeds input channels {d_pos}"
                )));
            }
            // zero-pad columns up to d_pos
            let m = feats.shape()[0];
            let mut data = vec![F::zero(); m * d_pos];
            for r in 0..m {
                data[r * d_pos..r * d_pos + width]
                    .copy_from_slice(&feats.data()[r * width..(r + 1) * width]);
            }
            Some(Tensor::new(vec![m, d_pos], data))
        }
    };
    Ok(Pipeline { model, embed, mask_token, fourier })
}

impl<F: Real> Pipeline<F> {
    /// Positional rows for `positions`: learned table rows (trainable) or
    /// fixed Fourier rows.
    pub fn pos_rows(&self, ctx: &mut Ctx<F>, positions: &[usize]) -> Var {
        match &self.fourier {
            None => crate::embed::pos_rows(ctx, &self.embed, positions),
            Some(table) => {
                let t = ctx.tape.constant(table.clone());
                ctx.tape.gather0(t, positions)
            }
        }
    }

    /// `proj(x) + pos` for consecutive positions `0..M`.
    pub fn embed_example(&self, ctx: &mut Ctx<F>, x_raw: &Tensor<F>) -> Var {
        let m = x_raw.shape()[0];
        let x = ctx.tape.constant(x_raw.clone());
        let positions: Vec<usize> = (0..m).collect();
        match &self.fourier {
            None => embed_rows(ctx, x, &positions, &self.embed),
            Some(_) => {
                let w = ctx.p(self.embed.w);
                let b = ctx.p(self.embed.b);
                let proj = ctx.tape.linear(x, w, b);
                let rows = self.pos_rows(ctx, &positions);
                ctx.tape.add(proj, rows)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,split,metric,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
    }
    out
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch: usize,
    pub clip: f64,
    pub drop_rate: f64,
    pub seed: u64,
    pub mask_rate: f64,
    pub mask_mode: MaskMode,
    /// Stop early once the train loss falls to this value.
    pub early_stop_loss: Option<f64>,
    /// Stop after this step without altering the schedule (mid-run
    /// checkpointing); `None` runs to the schedule's total.
    #[serde(default)]
    pub stop_after: Option<u64>,
    pub eval_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule { base_lr: 1e-3, warmup_steps: 100, total_steps: 1000 },
            batch: 8,
            clip: 1.0,
            drop_rate: 0.0,
            seed: 0,
            mask_rate: 0.85,
            mask_mode: MaskMode::Uniform,
            early_stop_loss: None,
            stop_after: None,
            eval_every: 0,
            log_every: 10,
        }
    }
}

const MASK_PART: u64 = 1;
const DROP_PART: u64 = 2;

fn drop_path<F: Real>(tc: &TrainConfig, idx: u64, step: u64) -> DropPath {
    let _ = std::marker::PhantomData::<F>;
    if tc.drop_rate > 0.0 {
        DropPath::train(tc.drop_rate, crate::rng::stream(tc.seed, &[idx, step, DROP_PART]))
    } else {
        DropPath::eval()
    }
}

/// Forward + loss for one MAE example on a fresh tape.
fn mae_example<'a, F: Real>(
    pipe: &'a Pipeline<F>,
    x_raw: &Tensor<F>,
    mask_seed: u64,
    tc: &TrainConfig,
    drop: &mut DropPath,
) -> Result<(Ctx<'a, F>, Var)> {
    let m = x_raw.shape()[0];
    let c_raw = x_raw.shape()[1];
    let groups = pipe.model.config.blocks[0].groups;
    let spec = MaskSpec { rate: tc.mask_rate, mode: tc.mask_mode, seed: mask_seed };
    let mask = sample_mask(m, &spec, Some(groups))?;
    if mask.masked.is_empty() {
        return Err(Error::Config(format!(
            "mask rate {} leaves nothing to reconstruct at M={m}",
            tc.mask_rate
        )));
    }
    let mut ctx = Ctx::new(&pipe.model.store);
    let emb = pipe.embed_example(&mut ctx, x_raw);
    let corrupted = match tc.mask_mode {
        MaskMode::Uniform => {
            if pipe.fourier.is_some() {
                // mask token plus the fixed Fourier row
                let tok = ctx.p(pipe.mask_token);
                let d = ctx.tape.value(tok).numel();
                let visible = ctx.tape.gather0(emb, &mask.visible);
                let pos = pipe.pos_rows(&mut ctx, &mask.masked);
                let tok = ctx.tape.reshape(tok, &[d]);
                let toks = ctx.tape.repeat0(tok, mask.masked.len());
                let rows = ctx.tape.add(pos, toks);
                let stacked = ctx.tape.concat0(&[visible, rows]);
                let mut inverse = vec![0usize; m];
                for (row, &p) in mask.visible.iter().chain(&mask.masked).enumerate() {
                    inverse[p] = row;
                }
                ctx.tape.gather0(stacked, &inverse)
            } else {
                corrupt_uniform(&mut ctx, emb, &mask, pipe.mask_token, pipe.embed.pos)?
            }
        }
        MaskMode::Groupwise => corrupt_groupwise(&mut ctx, emb, &mask)?,
    };
    let mut trace = encode(&mut ctx, &pipe.model, corrupted, drop)?;
    // queries are grouped by their position in the original grid, not in
    // the (possibly shortened) visible sequence
    trace.input_tokens = m;
    let queries = pipe.pos_rows(&mut ctx, &mask.masked);
    let pred = decode_dense(&mut ctx, &pipe.model, &trace, queries, Some(&mask.masked), drop, true)?;

    let mut target = Vec::with_capacity(mask.masked.len() * c_raw);
    for &p in &mask.masked {
        target.extend_from_slice(&x_raw.data()[p * c_raw..(p + 1) * c_raw]);
    }
    let target = Tensor::new(vec![mask.masked.len(), c_raw], target);
    let loss = mae_loss(&mut ctx, pred, &target)?;
    Ok((ctx, loss))
}

fn finish_batch<F: Real>(
    pipe: &mut Pipeline<F>,
    opt: &mut AdamW<F>,
    grads: &mut [Option<Tensor<F>>],
    batch: usize,
    tc: &TrainConfig,
    step: u64,
) -> Result<()> {
    let inv = F::from_f64(1.0 / batch as f64);
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v = *v * inv;
        }
    }
    clip_global_norm(grads, tc.clip);
    let lr = lr_at(step, &tc.schedule);
    opt.apply(&mut pipe.model.store, grads, lr)
}

/// MAE pre-training. `sample(idx)` yields a normalized raw token array
/// `[M, C_raw]`; steps run from `opt.step` to the schedule's total, so a
/// restored optimizer resumes where it stopped.
pub fn pretrain_mae<F: Real>(
    pipe: &mut Pipeline<F>,
    opt: &mut AdamW<F>,
    sample: &mut dyn FnMut(usize) -> Tensor<F>,
    tc: &TrainConfig,
    val_indices: &[usize],
) -> Result<Vec<MetricRow>> {
    let mut metrics = Vec::new();
    let mut step = opt.step;
    while step < tc.schedule.total_steps {
        let mut grads = vec![None; pipe.model.store.len()];
        let mut batch_loss = 0.0;
        for b in 0..tc.batch {
            let idx = (step as usize) * tc.batch + b;
            let x = sample(idx);
            let mask_seed = crate::rng::derive(tc.seed, &[idx as u64, step, MASK_PART]);
            let mut drop = drop_path::<F>(tc, idx as u64, step);
            let (mut ctx, loss) = mae_example(pipe, &x, mask_seed, tc, &mut drop)?;
            ctx.tape.backward(loss);
            ctx.accumulate_grads(&mut grads);
            batch_loss += ctx.tape.value(loss).data()[0].as_f64();
        }
        batch_loss /= tc.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step: step as usize, what: "masked MSE non-finite".into() });
        }
        finish_batch(pipe, opt, &mut grads, tc.batch, tc, step)?;
        step = opt.step;
        if tc.stop_after.is_some_and(|s| step >= s) {
            break;
        }
        if tc.log_every > 0 && step % tc.log_every == 0 {
            metrics.push(MetricRow {
                step,
                split: "train".into(),
                metric: "masked_mse".into(),
                value: batch_loss,
            });
        }
        if tc.eval_every > 0 && step % tc.eval_every == 0 && !val_indices.is_empty() {
            let val = eval_mae(pipe, sample, val_indices, tc)?;
            metrics.push(MetricRow { step, split: "val".into(), metric: "masked_mse".into(), value: val });
        }
        if tc.early_stop_loss.is_some_and(|t| batch_loss <= t) {
            metrics.push(MetricRow {
                step,
                split: "train".into(),
                metric: "early_stop".into(),
                value: batch_loss,
            });
            break;
        }
    }
    Ok(metrics)
}

/// Masked reconstruction loss over held-out examples (eval mode, fixed
/// mask seeds).
pub fn eval_mae<F: Real>(
    pipe: &Pipeline<F>,
    sample: &mut dyn FnMut(usize) -> Tensor<F>,
    indices: &[usize],
    tc: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &idx in indices {
        let x = sample(idx);
        let mask_seed = crate::rng::derive(tc.seed, &[idx as u64, u64::MAX, MASK_PART]);
        let mut drop = DropPath::eval();
        let (ctx, loss) = mae_example(pipe, &x, mask_seed, tc, &mut drop)?;
        total += ctx.tape.value(loss).data()[0].as_f64();
    }
    Ok(total / indices.len() as f64)
}

/// Forward + cross-entropy for one labeled example.
fn classify_example<'a, F: Real>(
    pipe: &'a Pipeline<F>,
    x_raw: &Tensor<F>,
    label: usize,
    drop: &mut DropPath,
) -> Result<(Ctx<'a, F>, Var, usize)> {
    let mut ctx = Ctx::new(&pipe.model.store);
    let emb = pipe.embed_example(&mut ctx, x_raw);
    let trace = encode(&mut ctx, &pipe.model, emb, drop)?;
    let logits = classify(&mut ctx, &pipe.model, &trace)?;
    let n = ctx.tape.value(logits).numel();
    let logits2 = ctx.tape.reshape(logits, &[1, n]);
    let loss = ctx.tape.softmax_xent(logits2, &[label]);
    let pred = {
        let v = ctx.tape.value(logits);
        let mut best = 0;
        for (i, &x) in v.data().iter().enumerate() {
            if x > v.data()[best] {
                best = i;
            }
        }
        best
    };
    Ok((ctx, loss, pred))
}

/// Supervised classification (optionally from an MAE-initialized pipeline).
pub fn finetune_classify<F: Real>(
    pipe: &mut Pipeline<F>,
    opt: &mut AdamW<F>,
    sample: &mut dyn FnMut(usize) -> (Tensor<F>, usize),
    tc: &TrainConfig,
    val_indices: &[usize],
) -> Result<Vec<MetricRow>> {
    let classes = pipe
        .model
        .config
        .num_classes
        .ok_or_else(|| Error::Config("classification needs num_classes".into()))?;
    let mut metrics = Vec::new();
    let mut step = opt.step;
    while step < tc.schedule.total_steps {
        let mut grads = vec![None; pipe.model.store.len()];
        let mut batch_loss = 0.0;
        for b in 0..tc.batch {
            let idx = (step as usize) * tc.batch + b;
            let (x, label) = sample(idx);
            if label >= classes {
                return Err(Error::Config(format!("label {label} outside {classes} classes")));
            }
            let mut drop = drop_path::<F>(tc, idx as u64, step);
            let (mut ctx, loss, _) = classify_example(pipe, &x, label, &mut drop)?;
            ctx.tape.backward(loss);
            ctx.accumulate_grads(&mut grads);
            batch_loss += ctx.tape.value(loss).data()[0].as_f64();
        }
        batch_loss /= tc.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step: step as usize, what: "cross-entropy non-finite".into() });
        }
        finish_batch(pipe, opt, &mut grads, tc.batch, tc, step)?;
        step = opt.step;
        if tc.stop_after.is_some_and(|s| step >= s) {
            break;
        }
        if tc.log_every > 0 && step % tc.log_every == 0 {
            metrics.push(MetricRow { step, split: "train".into(), metric: "xent".into(), value: batch_loss });
        }
        if tc.eval_every > 0 && step % tc.eval_every == 0 && !val_indices.is_empty() {
            let acc = eval_classify(pipe, sample, val_indices)?;
            metrics.push(MetricRow { step, split: "val".into(), metric: "accuracy".into(), value: acc });
        }
        if tc.early_stop_loss.is_some_and(|t| batch_loss <= t) {
            break;
        }
    }
    Ok(metrics)
}

/// Top-1 accuracy over held-out examples (eval mode).
pub fn eval_classify<F: Real>(
    pipe: &Pipeline<F>,
    sample: &mut dyn FnMut(usize) -> (Tensor<F>, usize),
    indices: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for &idx in indices {
        let (x, label) = sample(idx);
        let mut drop = DropPath::eval();
        let (_, _, pred) = classify_example(pipe, &x, label, &mut drop)?;
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Forward + per-position cross-entropy for one dense-labeled example.
fn dense_example<'a, F: Real>(
    pipe: &'a Pipeline<F>,
    x_raw: &Tensor<F>,
    labels: &[usize],
    kind: DecoderKind,
    drop: &mut DropPath,
) -> Result<(Ctx<'a, F>, Var, Vec<usize>)> {
    let m = x_raw.shape()[0];
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} tokens", labels.len())));
    }
    let mut ctx = Ctx::new(&pipe.model.store);
    let emb = pipe.embed_example(&mut ctx, x_raw);
    let trace = encode(&mut ctx, &pipe.model, emb, drop)?;
    let positions: Vec<usize> = (0..m).collect();
    let queries = pipe.pos_rows(&mut ctx, &positions);
    let logits = match kind {
        DecoderKind::Full => {
            decode_dense(&mut ctx, &pipe.model, &trace, queries, Some(&positions), drop, true)?
        }
        DecoderKind::Bottleneck => decode_bottleneck_dense(&mut ctx, &pipe.model, &trace, queries)?,
    };
    let loss = ctx.tape.softmax_xent(logits, labels);
    let preds = {
        let v = ctx.tape.value(logits);
        let c = v.shape()[1];
        (0..m)
            .map(|r| {
                let row = &v.data()[r * c..(r + 1) * c];
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    };
    Ok((ctx, loss, preds))
}

/// Dense per-position labeling through either decoder variant.
pub fn finetune_dense<F: Real>(
    pipe: &mut Pipeline<F>,
    opt: &mut AdamW<F>,
    sample: &mut dyn FnMut(usize) -> (Tensor<F>, Vec<usize>),
    kind: DecoderKind,
    tc: &TrainConfig,
    val_indices: &[usize],
) -> Result<Vec<MetricRow>> {
    let classes = pipe
        .model
        .config
        .dense_out_channels
        .ok_or_else(|| Error::Config("dense labeling needs dense_out_channels".into()))?;
    let mut metrics = Vec::new();
    let mut step = opt.step;
    while step < tc.schedule.total_steps {
        let mut grads = vec![None; pipe.model.store.len()];
        let mut batch_loss = 0.0;
        for b in 0..tc.batch {
            let idx = (step as usize) * tc.batch + b;
            let (x, labels) = sample(idx);
            if labels.iter().any(|&l| l >= classes) {
                return Err(Error::Config(format!("label outside {classes} classes")));
            }
            let mut drop = drop_path::<F>(tc, idx as u64, step);
            let (mut ctx, loss, _) = dense_example(pipe, &x, &labels, kind, &mut drop)?;
            ctx.tape.backward(loss);
            ctx.accumulate_grads(&mut grads);
            batch_loss += ctx.tape.value(loss).data()[0].as_f64();
        }
        batch_loss /= tc.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step: step as usize, what: "dense loss non-finite".into() });
        }
        finish_batch(pipe, opt, &mut grads, tc.batch, tc, step)?;
        step = opt.step;
        if tc.stop_after.is_some_and(|s| step >= s) {
            break;
        }
        if tc.log_every > 0 && step % tc.log_every == 0 {
            metrics.push(MetricRow { step, split: "train".into(), metric: "xent".into(), value: batch_loss });
        }
        if tc.eval_every > 0 && step % tc.eval_every == 0 && !val_indices.is_empty() {
            let miou = eval_dense(pipe, sample, val_indices, kind)?;
            metrics.push(MetricRow { step, split: "val".into(), metric: "miou".into(), value: miou });
        }
        if tc.early_stop_loss.is_some_and(|t| batch_loss <= t) {
            break;
        }
    }
    Ok(metrics)
}

/// Mean IoU over classes present in prediction or truth.
pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..classes {
        if union[c] > 0 {
            sum += inter[c] as f64 / union[c] as f64;
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// mIoU over held-out examples (eval mode), pooled across examples.
pub fn eval_dense<F: Real>(
    pipe: &Pipeline<F>,
    sample: &mut dyn FnMut(usize) -> (Tensor<F>, Vec<usize>),
    indices: &[usize],
    kind: DecoderKind,
) -> Result<f64> {
    let classes = pipe.model.config.dense_out_channels.unwrap_or(0);
    let mut all_pred = Vec::new();
    let mut all_truth = Vec::new();
    for &idx in indices {
        let (x, labels) = sample(idx);
        let mut drop = DropPath::eval();
        let (_, _, preds) = dense_example(pipe, &x, &labels, kind, &mut drop)?;
        all_pred.extend(preds);
        all_truth.extend(labels);
    }
    Ok(miou(&all_pred, &all_truth, classes))
}
