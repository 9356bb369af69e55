//! Masked auto-encoding: mask sampling (uniform and groupwise), input
//! corruption, reconstruction loss, and mask visualization.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masked rows are replaced by a learned token plus their positional
    /// embedding; the token count is unchanged.
    Uniform,
    /// Masked rows are dropped; the same within-group offsets are
    /// replicated across all groups.
    Groupwise,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub rate: f64,
    pub mode: MaskMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskResult {
    /// Sorted masked positions.
    pub masked: Vec<usize>,
    /// Sorted visible positions; disjoint from `masked`, union = `0..M`.
    pub visible: Vec<usize>,
    /// Groupwise only: the within-group offset pattern shared by every group.
    pub per_group_offsets: Option<Vec<usize>>,
    pub groups: Option<usize>,
}

const MASK_TAG: u64 = 0x4D41_534B;

/// Sample `floor(rate * M)` masked positions without replacement (uniform)
/// or `G * floor(rate * M / G)` (groupwise, one offset pattern replicated
/// across groups). Fully determined by `(m, spec, groups)`.
pub fn sample_mask(m: usize, spec: &MaskSpec, groups: Option<usize>) -> Result<MaskResult> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::Config(format!("mask rate {} outside [0, 1)", spec.rate)));
    }
    let mut rng = crate::rng::stream(spec.seed, &[MASK_TAG]);
    match spec.mode {
        MaskMode::Uniform => {
            let count = (spec.rate * m as f64).floor() as usize;
            let mut all: Vec<usize> = (0..m).collect();
            all.partial_shuffle(&mut rng, count);
            let mut masked: Vec<usize> = all[..count].to_vec();
            masked.sort_unstable();
            let visible = complement(&masked, m);
            Ok(MaskResult { masked, visible, per_group_offsets: None, groups: None })
        }
        MaskMode::Groupwise => {
            let g = groups.ok_or_else(|| {
                Error::Config("groupwise masking needs the first block's group count".into())
            })?;
            if g == 0 || m % g != 0 {
                return Err(Error::Config(format!(
                    "groupwise masking: group count {g} does not divide token count {m}"
                )));
            }
            let span = m / g;
            let per_group = (spec.rate * m as f64 / g as f64).floor() as usize;
            let mut all: Vec<usize> = (0..span).collect();
            all.partial_shuffle(&mut rng, per_group);
            let mut offsets: Vec<usize> = all[..per_group].to_vec();
            offsets.sort_unstable();
            let mut masked = Vec::with_capacity(g * per_group);
            for gi in 0..g {
                masked.extend(offsets.iter().map(|&o| gi * span + o));
            }
            let visible = complement(&masked, m);
            Ok(MaskResult { masked, visible, per_group_offsets: Some(offsets), groups: Some(g) })
        }
    }
}

fn complement(sorted: &[usize], m: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(m - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..m {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Allocate the learned token that replaces masked rows under uniform
/// masking.
pub fn init_mask_token<F: Real>(store: &mut ParamStore<F>, d_pos: usize) -> ParamId {
    store.add("mask_token", Tensor::zeros(&[d_pos]))
}

/// Uniform-mode corruption: masked rows become `mask_token + pos[row]`;
/// the positional embedding is kept, only the content is replaced.
///
/// `pos_table` is the positional-embedding parameter (`[M_max, d_pos]`);
/// row positions of `embedded` are `0..M`.
pub fn corrupt_uniform<F: Real>(
    ctx: &mut Ctx<F>,
    embedded: Var,
    mask: &MaskResult,
    mask_token: ParamId,
    pos_table: ParamId,
) -> Result<Var> {
    let m = ctx.tape.value(embedded).shape()[0];
    check_mask(mask, m)?;
    if mask.masked.is_empty() {
        return Ok(embedded);
    }
    let pos = ctx.p(pos_table);
    let token = ctx.p(mask_token);
    let d = ctx.tape.value(token).numel();
    let visible = ctx.tape.gather0(embedded, &mask.visible);
    let masked_pos = ctx.tape.gather0(pos, &mask.masked);
    let token = ctx.tape.reshape(token, &[d]);
    let tokens = ctx.tape.repeat0(token, mask.masked.len());
    let masked_rows = ctx.tape.add(masked_pos, tokens);
    let stacked = ctx.tape.concat0(&[visible, masked_rows]);
    // restore original row order
    let mut inverse = vec![0usize; m];
    for (row, &p) in mask.visible.iter().chain(&mask.masked).enumerate() {
        inverse[p] = row;
    }
    Ok(ctx.tape.gather0(stacked, &inverse))
}

/// Groupwise-mode corruption: masked rows are removed. The result has
/// `M - |masked|` rows with equal per-group lengths.
pub fn corrupt_groupwise<F: Real>(
    ctx: &mut Ctx<F>,
    embedded: Var,
    mask: &MaskResult,
) -> Result<Var> {
    let m = ctx.tape.value(embedded).shape()[0];
    check_mask(mask, m)?;
    if mask.per_group_offsets.is_none() {
        return Err(Error::Config("groupwise corruption needs a groupwise mask".into()));
    }
    Ok(ctx.tape.gather0(embedded, &mask.visible))
}

fn check_mask(mask: &MaskResult, m: usize) -> Result<()> {
    if mask.masked.len() + mask.visible.len() != m
        || mask.masked.iter().chain(&mask.visible).any(|&p| p >= m)
    {
        return Err(Error::Shape(format!(
            "mask over {} + {} positions does not fit {m} rows",
            mask.masked.len(),
            mask.visible.len()
        )));
    }
    Ok(())
}

/// Mean over masked positions and raw channels of the squared error.
/// `pred` rows are ordered by sorted masked index; `target_raw` likewise.
pub fn mae_loss<F: Real>(ctx: &mut Ctx<F>, pred: Var, target_raw: &Tensor<F>) -> Result<Var> {
    let ps = ctx.tape.value(pred).shape().to_vec();
    if ps != target_raw.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {ps:?} does not match target shape {:?}",
            target_raw.shape()
        )));
    }
    let t = ctx.tape.constant(target_raw.clone());
    let diff = ctx.tape.sub(pred, t);
    Ok(ctx.tape.mean_sq(diff))
}

/// Write the mask pattern reshaped to its source grid as a PGM (masked
/// positions dark, visible bright).
pub fn write_mask_pgm(mask: &MaskResult, h: usize, w: usize, path: &Path) -> Result<()> {
    let m = h * w;
    check_mask(mask, m)?;
    let mut img = vec![1.0f64; m];
    for &p in &mask.masked {
        img[p] = 0.0;
    }
    crate::pgm::write_pgm(path, w, h, &img)
}

/// Circular autocorrelation of the centered mask indicator at `lag`.
/// Groupwise masks score 1.0 at the group-span lag (the replicated stripe
/// pattern); uniform masks stay near 0 at every nonzero lag.
pub fn mask_autocorrelation(mask: &MaskResult, m: usize, lag: usize) -> f64 {
    let mut x = vec![0.0f64; m];
    for &p in &mask.masked {
        x[p] = 1.0;
    }
    let mean = mask.masked.len() as f64 / m as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        let a = x[i] - mean;
        num += a * (x[(i + lag) % m] - mean);
        den += a * a;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
