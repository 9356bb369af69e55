//! Multi-head attention primitives, the grouped cross-attend block,
//! stochastic depth, and analytic cost accounting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{CostTag, Real, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::{Error, Result};

/// Per-block hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockConfig {
    pub groups: usize,
    /// Latent vectors per group.
    pub latents: usize,
    pub channels: usize,
    pub heads: usize,
    pub self_layers: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Shared cross/self attention projections; pre-norm on both streams.
#[derive(Clone, Debug)]
pub struct AttnP {
    pub ln_q: LayerNormP,
    pub ln_kv: LayerNormP,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MlpP {
    pub ln: LayerNormP,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// One HiP block: per-group latents plus weights shared across groups.
/// Only the latents differ between groups.
#[derive(Clone, Debug)]
pub struct BlockP {
    pub latents: ParamId, // [G, K, D]
    pub cross: AttnP,
    pub cross_mlp: MlpP,
    pub self_layers: Vec<(AttnP, MlpP)>,
    pub config: BlockConfig,
}

pub const INIT_STD: f64 = 0.02;

pub fn init_layer_norm<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
) -> LayerNormP {
    LayerNormP {
        gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
        bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
    }
}

/// Attention weights: queries at width `d`, keys/values projected from
/// `d_kv`. The output projection is zero-initialized so residual branches
/// start as identity.
pub fn init_attn<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    d_kv: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> AttnP {
    assert!(d % heads == 0, "channels {d} not divisible by {heads} heads");
    AttnP {
        ln_q: init_layer_norm(store, &format!("{prefix}.ln_q"), d),
        ln_kv: init_layer_norm(store, &format!("{prefix}.ln_kv"), d_kv),
        wq: store.add(format!("{prefix}.wq"), Tensor::randn(&[d, d], INIT_STD, rng)),
        bq: store.add(format!("{prefix}.bq"), Tensor::zeros(&[d])),
        wk: store.add(format!("{prefix}.wk"), Tensor::randn(&[d_kv, d], INIT_STD, rng)),
        bk: store.add(format!("{prefix}.bk"), Tensor::zeros(&[d])),
        wv: store.add(format!("{prefix}.wv"), Tensor::randn(&[d_kv, d], INIT_STD, rng)),
        bv: store.add(format!("{prefix}.bv"), Tensor::zeros(&[d])),
        wo: store.add(format!("{prefix}.wo"), Tensor::zeros(&[d, d])),
        bo: store.add(format!("{prefix}.bo"), Tensor::zeros(&[d])),
        heads,
    }
}

pub fn init_mlp<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    expansion: usize,
    rng: &mut ChaCha8Rng,
) -> MlpP {
    let e = d * expansion;
    MlpP {
        ln: init_layer_norm(store, &format!("{prefix}.ln"), d),
        w1: store.add(format!("{prefix}.w1"), Tensor::randn(&[d, e], INIT_STD, rng)),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[e])),
        w2: store.add(format!("{prefix}.w2"), Tensor::zeros(&[e, d])),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

/// 4x expansion in self-attention MLPs, 1x in cross-attention MLPs.
pub const SELF_MLP_EXPANSION: usize = 4;
pub const CROSS_MLP_EXPANSION: usize = 1;

pub fn init_block<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &BlockConfig,
    c_in: usize,
    rng: &mut ChaCha8Rng,
) -> BlockP {
    let d = cfg.channels;
    let latents = store.add(
        format!("{prefix}.latents"),
        Tensor::randn(&[cfg.groups, cfg.latents, d], INIT_STD, rng),
    );
    let cross = init_attn(store, &format!("{prefix}.cross"), d, c_in, cfg.heads, rng);
    let cross_mlp = init_mlp(store, &format!("{prefix}.cross_mlp"), d, CROSS_MLP_EXPANSION, rng);
    let self_layers = (0..cfg.self_layers)
        .map(|l| {
            (
                init_attn(store, &format!("{prefix}.self{l}"), d, d, cfg.heads, rng),
                init_mlp(store, &format!("{prefix}.self{l}.mlp"), d, SELF_MLP_EXPANSION, rng),
            )
        })
        .collect();
    BlockP { latents, cross, cross_mlp, self_layers, config: cfg.clone() }
}

/// Attention branch without the residual: pre-norm both streams, project,
/// scaled dot-product per head, merge heads, output projection.
///
/// `q_in`: `[G, Nq, D]`, `kv_in`: `[G, Nk, Dkv]`.
pub fn mha_branch<F: Real>(
    ctx: &mut Ctx<F>,
    q_in: Var,
    kv_in: Var,
    p: &AttnP,
    proj_tag: CostTag,
    score_tag: CostTag,
    value_tag: CostTag,
) -> Var {
    let q_shape = ctx.tape.value(q_in).shape().to_vec();
    let kv_shape = ctx.tape.value(kv_in).shape().to_vec();
    assert_eq!(q_shape.len(), 3, "mha expects [G, Nq, D], got {q_shape:?}");
    assert_eq!(kv_shape.len(), 3, "mha expects [G, Nk, Dkv], got {kv_shape:?}");
    assert_eq!(q_shape[0], kv_shape[0], "group mismatch {q_shape:?} vs {kv_shape:?}");
    let (g, nq, d) = (q_shape[0], q_shape[1], q_shape[2]);
    let nk = kv_shape[1];
    let h = p.heads;
    assert_eq!(d % h, 0, "width {d} not divisible by {h} heads");
    let dh = d / h;

    ctx.tape.set_tag(CostTag::Other);
    let lg = ctx.p(p.ln_q.gain);
    let lb = ctx.p(p.ln_q.bias);
    let qn = ctx.tape.layer_norm(q_in, lg, lb, 1e-5);
    let lg = ctx.p(p.ln_kv.gain);
    let lb = ctx.p(p.ln_kv.bias);
    let kvn = ctx.tape.layer_norm(kv_in, lg, lb, 1e-5);

    let wqv = ctx.p(p.wq);
    let bqv = ctx.p(p.bq);
    let wkv = ctx.p(p.wk);
    let bkv = ctx.p(p.bk);
    let wvv = ctx.p(p.wv);
    let bvv = ctx.p(p.bv);
    let wov = ctx.p(p.wo);
    let bov = ctx.p(p.bo);

    let t = &mut ctx.tape;
    t.set_tag(proj_tag);
    let q = t.linear(qn, wqv, bqv);
    let k = t.linear(kvn, wkv, bkv);
    let v = t.linear(kvn, wvv, bvv);

    // [G, N, D] -> [G, H, N, dh]
    let q = t.reshape(q, &[g, nq, h, dh]);
    let q = t.swap_axes(q, 1, 2);
    let k = t.reshape(k, &[g, nk, h, dh]);
    let k = t.swap_axes(k, 1, 2);
    let v = t.reshape(v, &[g, nk, h, dh]);
    let v = t.swap_axes(v, 1, 2);

    t.set_tag(score_tag);
    let scores = t.matmul_nt(q, k);
    let scores = t.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = t.softmax(scores, 3);
    t.set_tag(value_tag);
    let attended = t.matmul(probs, v);

    let merged = t.swap_axes(attended, 1, 2);
    let merged = t.reshape(merged, &[g, nq, d]);
    t.set_tag(proj_tag);
    let out = t.linear(merged, wov, bov);
    t.set_tag(CostTag::Other);
    out
}

/// Standard attention with residual on the query stream.
pub fn mha<F: Real>(ctx: &mut Ctx<F>, q_in: Var, kv_in: Var, p: &AttnP) -> Var {
    let branch = mha_branch(ctx, q_in, kv_in, p, CostTag::Projection, CostTag::SelfScore, CostTag::SelfValue);
    ctx.tape.add(q_in, branch)
}

/// MLP branch without the residual: pre-norm, expand, GELU, contract.
pub fn mlp_branch<F: Real>(ctx: &mut Ctx<F>, x: Var, p: &MlpP) -> Var {
    let lg = ctx.p(p.ln.gain);
    let lb = ctx.p(p.ln.bias);
    let w1v = ctx.p(p.w1);
    let b1v = ctx.p(p.b1);
    let w2v = ctx.p(p.w2);
    let b2v = ctx.p(p.b2);
    let t = &mut ctx.tape;
    let xn = t.layer_norm(x, lg, lb, 1e-5);
    t.set_tag(CostTag::Mlp);
    let h = t.linear(xn, w1v, b1v);
    let h = t.gelu(h);
    let out = t.linear(h, w2v, b2v);
    t.set_tag(CostTag::Other);
    out
}

/// Training-time residual-branch dropping with survivor rescaling.
///
/// Training mode: the branch is zeroed with probability `rate` and scaled by
/// `1/(1-rate)` otherwise. Eval mode: identity.
pub fn stochastic_depth<F: Real>(
    ctx: &mut Ctx<F>,
    delta: Var,
    rate: f64,
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Var {
    assert!((0.0..1.0).contains(&rate), "drop rate {rate} outside [0, 1)");
    if !train || rate == 0.0 {
        return delta;
    }
    let rng = rng.expect("training-mode stochastic depth needs an rng");
    let u: f64 = rng.gen();
    if u < rate {
        ctx.tape.scale(delta, F::zero())
    } else {
        ctx.tape.scale(delta, F::from_f64(1.0 / (1.0 - rate)))
    }
}

/// Stochastic-depth state for one example's forward pass.
pub struct DropPath {
    pub rate: f64,
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl DropPath {
    /// Eval mode: identity on every branch.
    pub fn eval() -> Self {
        Self { rate: 0.0, train: false, rng: crate::rng::stream(0, &[]) }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, train: true, rng }
    }

    fn apply<F: Real>(&mut self, ctx: &mut Ctx<F>, delta: Var) -> Var {
        stochastic_depth(ctx, delta, self.rate, self.train, Some(&mut self.rng))
    }
}

/// One HiP block: group the tokens, cross-attend per-group latents, run the
/// self-attention stack on the latents, merge groups in order.
///
/// `x`: `[M, C]` -> output `[G K, D]`. Fails when `G` does not divide `M`.
pub fn hip_block<F: Real>(
    ctx: &mut Ctx<F>,
    x: Var,
    block: &BlockP,
    drop: &mut DropPath,
) -> Result<Var> {
    let cfg = &block.config;
    let shape = ctx.tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 2, "hip_block expects [M, C], got {shape:?}");
    let (m, c) = (shape[0], shape[1]);
    let (g, k, d) = (cfg.groups, cfg.latents, cfg.channels);
    if g == 0 || m % g != 0 {
        return Err(Error::Config(format!(
            "group count {g} does not divide token count {m}"
        )));
    }
    let grouped = ctx.tape.reshape(x, &[g, m / g, c]);
    let z = ctx.p(block.latents);

    // cross-attend: never dropped, it is the block's only input path
    let branch = mha_branch(ctx, z, grouped, &block.cross, CostTag::Projection, CostTag::CrossScore, CostTag::CrossValue);
    let mut h = ctx.tape.add(z, branch);
    let branch = mlp_branch(ctx, h, &block.cross_mlp);
    let branch = drop.apply(ctx, branch);
    h = ctx.tape.add(h, branch);

    for (attn, mlp) in &block.self_layers {
        let branch = mha_branch(ctx, h, h, attn, CostTag::Projection, CostTag::SelfScore, CostTag::SelfValue);
        let branch = drop.apply(ctx, branch);
        h = ctx.tape.add(h, branch);
        let branch = mlp_branch(ctx, h, mlp);
        let branch = drop.apply(ctx, branch);
        h = ctx.tape.add(h, branch);
    }

    Ok(ctx.tape.reshape(h, &[g * k, d]))
}

// ---- cost accounting ----

/// Forward multiply-accumulate counts for one block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockCost {
    pub block: usize,
    pub projection_macs: u64,
    pub cross_score_macs: u64,
    pub cross_value_macs: u64,
    pub self_score_macs_per_layer: u64,
    pub self_value_macs_per_layer: u64,
    pub self_layers: u64,
    pub mlp_macs: u64,
}

impl BlockCost {
    pub fn self_attn_macs(&self) -> u64 {
        self.self_layers * (self.self_score_macs_per_layer + self.self_value_macs_per_layer)
    }

    pub fn total(&self) -> u64 {
        self.projection_macs
            + self.cross_score_macs
            + self.cross_value_macs
            + self.self_attn_macs()
            + self.mlp_macs
    }
}

/// Per-block and total forward MAC counts for a block stack.
#[derive(Clone, Debug, Default)]
pub struct CostReport {
    pub blocks: Vec<BlockCost>,
}

impl CostReport {
    pub fn total(&self) -> u64 {
        self.blocks.iter().map(|b| b.total()).sum()
    }

    pub fn cross_score_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.cross_score_macs).sum()
    }

    pub fn self_attn_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.self_attn_macs()).sum()
    }

    pub fn projection_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.projection_macs).sum()
    }

    pub fn mlp_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.mlp_macs).sum()
    }

    /// CSV rows: block, operation, macs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,operation,macs\n");
        for b in &self.blocks {
            out.push_str(&format!("{},projection,{}\n", b.block, b.projection_macs));
            out.push_str(&format!("{},cross_score,{}\n", b.block, b.cross_score_macs));
            out.push_str(&format!("{},cross_value,{}\n", b.block, b.cross_value_macs));
            out.push_str(&format!("{},self_attn,{}\n", b.block, b.self_attn_macs()));
            out.push_str(&format!("{},mlp,{}\n", b.block, b.mlp_macs));
            out.push_str(&format!("{},block_total,{}\n", b.block, b.total()));
        }
        out.push_str(&format!("all,model_total,{}\n", self.total()));
        out
    }
}

/// Exact forward MAC counts for a stack of blocks applied to `m` input
/// tokens of width `input_channels`.
///
/// Per block: cross score MACs = `G (M/G) K D = M K D`; self-attention
/// score MACs per layer = `G K^2 D`.
pub fn count_costs(blocks: &[BlockConfig], input_channels: usize, m: usize) -> Result<CostReport> {
    let mut report = CostReport::default();
    let mut tokens = m;
    let mut c_in = input_channels;
    for (i, cfg) in blocks.iter().enumerate() {
        let (g, k, d, l) = (
            cfg.groups as u64,
            cfg.latents as u64,
            cfg.channels as u64,
            cfg.self_layers as u64,
        );
        if cfg.groups == 0 || tokens % cfg.groups != 0 {
            return Err(Error::Config(format!(
                "block {i}: group count {} does not divide token count {tokens}",
                cfg.groups
            )));
        }
        let mt = tokens as u64;
        let c = c_in as u64;
        let cost = BlockCost {
            block: i,
            // cross q/out projections + k/v projections + self-layer q/k/v/out
            projection_macs: 2 * g * k * d * d + 2 * mt * c * d + l * 4 * g * k * d * d,
            cross_score_macs: mt * k * d,
            cross_value_macs: mt * k * d,
            self_score_macs_per_layer: g * k * k * d,
            self_value_macs_per_layer: g * k * k * d,
            self_layers: l,
            // cross MLP (1x) + self MLPs (4x)
            mlp_macs: 2 * g * k * d * d + l * 8 * g * k * d * d,
        };
        report.blocks.push(cost);
        tokens = cfg.groups * cfg.latents;
        c_in = cfg.channels;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};
    use crate::rng::stream;

    fn tiny_attn(store: &mut ParamStore<f64>, d: usize, dkv: usize, h: usize) -> AttnP {
        let mut rng = stream(1, &[9]);
        let p = init_attn(store, "a", d, dkv, h, &mut rng);
        // break the zero-init so gradients flow through every path
        let wo = store.find("a.wo").unwrap();
        store.set(wo, Tensor::randn(&[d, d], 0.5, &mut rng));
        p
    }

    #[test]
    fn single_key_weight_is_one() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = tiny_attn(&mut store, 4, 3, 2);
        let mut rng = stream(2, &[]);
        let q = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 1, 3], 1.0, &mut rng);

        let mut ctx = Ctx::new(&store);
        let qv = ctx.tape.constant(q.clone());
        let kvv = ctx.tape.constant(kv.clone());
        let out = mha(&mut ctx, qv, kvv, &p);
        let got = ctx.tape.value(out).clone();

        // with one key, softmax weight is exactly 1: output reduces to
        // residual + Wo(per-head value) = residual + Wo(v-projection)
        let mut ctx2 = Ctx::new(&store);
        let qv = ctx2.tape.constant(q);
        let kvv = ctx2.tape.constant(kv);
        let lg = ctx2.p(p.ln_kv.gain);
        let lb = ctx2.p(p.ln_kv.bias);
        let kvn = ctx2.tape.layer_norm(kvv, lg, lb, 1e-5);
        let wv = ctx2.p(p.wv);
        let bv = ctx2.p(p.bv);
        let v = ctx2.tape.linear(kvn, wv, bv); // [1,1,4]
        let rows = ctx2.tape.reshape(v, &[1, 1, 4]);
        let rep: Vec<Var> = (0..2).map(|_| rows).collect();
        let vq = ctx2.tape.concat0(&rep); // broadcast value to both queries
        let vq = ctx2.tape.reshape(vq, &[1, 2, 4]);
        let wo = ctx2.p(p.wo);
        let bo = ctx2.p(p.bo);
        let proj = ctx2.tape.linear(vq, wo, bo);
        let expect = ctx2.tape.add(qv, proj);
        let expect = ctx2.tape.value(expect);
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn kv_permutation_invariance() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = tiny_attn(&mut store, 4, 3, 2);
        let mut rng = stream(3, &[]);
        let q = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 5, 3], 1.0, &mut rng);
        let mut kv_perm_data = Vec::new();
        for &r in &[3usize, 0, 4, 1, 2] {
            kv_perm_data.extend_from_slice(&kv.data()[r * 3..(r + 1) * 3]);
        }
        let kv_perm = Tensor::new(vec![1, 5, 3], kv_perm_data);

        let run = |kv: Tensor<f64>| {
            let mut ctx = Ctx::new(&store);
            let qv = ctx.tape.constant(q.clone());
            let kvv = ctx.tape.constant(kv);
            let out = mha(&mut ctx, qv, kvv, &p);
            ctx.tape.value(out).clone()
        };
        let a = run(kv);
        let b = run(kv_perm);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn mha_gradient_check() {
        // Nq=2, Nk=3, D=4, H=2 random case; scalar target = mean of squares
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = tiny_attn(&mut store, 4, 4, 2);
        let mut rng = stream(4, &[]);
        let q = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 3, 4], 1.0, &mut rng);
        let report = grad_check(
            |tape: &mut Tape<f64>, vars| {
                let mut ctx = Ctx::new(&store);
                std::mem::swap(&mut ctx.tape, tape);
                let out = mha(&mut ctx, vars[0], vars[1], &p);
                let loss = ctx.tape.mean_sq(out);
                std::mem::swap(&mut ctx.tape, tape);
                loss
            },
            &[q, kv],
            1e-4,
        );
        assert!(report.passed(), "max rel err {:?}", report.max_rel_err);
    }

    #[test]
    fn hip_block_gradient_check() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let b = tiny_block(&mut store, 2, 21);
        let mut rng = stream(22, &[]);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let report = grad_check(
            |tape: &mut Tape<f64>, vars| {
                let mut ctx = Ctx::new(&store);
                std::mem::swap(&mut ctx.tape, tape);
                let out = hip_block(&mut ctx, vars[0], &b, &mut DropPath::eval()).unwrap();
                let loss = ctx.tape.mean_sq(out);
                std::mem::swap(&mut ctx.tape, tape);
                loss
            },
            &[x],
            1e-4,
        );
        assert!(report.passed(), "max rel err {:?}", report.max_rel_err);
    }

    #[test]
    fn stochastic_depth_modes() {
        let store: ParamStore<f64> = ParamStore::new();
        let x = Tensor::new(vec![2], vec![1.0, -2.0]);

        // rate 0 in both modes, and eval mode at rate 0.3, are identity
        for (rate, train) in [(0.0, true), (0.0, false), (0.3, false)] {
            let mut ctx = Ctx::new(&store);
            let v = ctx.tape.constant(x.clone());
            let mut rng = stream(1, &[]);
            let y = stochastic_depth(&mut ctx, v, rate, train, Some(&mut rng));
            assert_eq!(ctx.tape.value(y).data(), x.data());
        }

        // empirical drop frequency over 10^4 draws within 0.3 +/- 0.02
        let mut rng = stream(7, &[]);
        let mut dropped = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            let mut ctx = Ctx::new(&store);
            let v = ctx.tape.constant(x.clone());
            let y = stochastic_depth(&mut ctx, v, 0.3, true, Some(&mut rng));
            if ctx.tape.value(y).data()[0] == 0.0 {
                dropped += 1;
            } else {
                // survivors rescaled by 1/(1-rate)
                assert!((ctx.tape.value(y).data()[0] - 1.0 / 0.7).abs() < 1e-12);
            }
        }
        let freq = dropped as f64 / trials as f64;
        assert!((freq - 0.3).abs() < 0.02, "drop frequency {freq}");
    }

    fn tiny_block(store: &mut ParamStore<f64>, g: usize, seed: u64) -> BlockP {
        let cfg = BlockConfig { groups: g, latents: 2, channels: 4, heads: 2, self_layers: 1 };
        let mut rng = stream(seed, &[]);
        let b = init_block(store, &format!("b{g}"), &cfg, 4, &mut rng);
        // randomize the zero-initialized projections so structure is visible
        for name in [format!("b{g}.cross.wo"), format!("b{g}.cross_mlp.w2"), format!("b{g}.self0.wo"), format!("b{g}.self0.mlp.w2")] {
            let id = store.find(&name).unwrap();
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.3, &mut rng));
        }
        b
    }

    #[test]
    fn block_group_independence_bit_exact() {
        // M=8, G=2, K=2, D=4: output equals two independent G=1 halves that
        // share weights but use that group's latents
        let mut store: ParamStore<f64> = ParamStore::new();
        let two = tiny_block(&mut store, 2, 11);
        let mut rng = stream(12, &[]);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);

        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(x.clone());
        let out = hip_block(&mut ctx, xv, &two, &mut DropPath::eval()).unwrap();
        let full = ctx.tape.value(out).clone();
        assert_eq!(full.shape(), &[4, 4]);

        // per-half runs sharing every weight but using that group's latents
        let z = store.value(two.latents).clone(); // [2, 2, 4]
        for half in 0..2 {
            let zh = Tensor::new(vec![1, 2, 4], z.data()[half * 8..(half + 1) * 8].to_vec());
            let mut hstore: ParamStore<f64> = ParamStore::new();
            for (_, name, value) in store.iter() {
                let v = if name == "b2.latents" { zh.clone() } else { value.clone() };
                hstore.add(name.to_string(), v);
            }
            let mut remap = two.clone();
            remap.config.groups = 1;
            let mut ctx = Ctx::new(&hstore);
            let xh = Tensor::new(vec![4, 4], x.data()[half * 16..(half + 1) * 16].to_vec());
            let xv = ctx.tape.constant(xh);
            let out = hip_block(&mut ctx, xv, &remap, &mut DropPath::eval()).unwrap();
            let got = ctx.tape.value(out);
            assert_eq!(
                got.data(),
                &full.data()[half * 8..(half + 1) * 8],
                "group {half} differs"
            );
        }
    }

    #[test]
    fn block_g1_is_flat_perceiver_step() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let b = tiny_block(&mut store, 1, 13);
        let mut rng = stream(14, &[]);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(x);
        let out = hip_block(&mut ctx, xv, &b, &mut DropPath::eval()).unwrap();
        assert_eq!(ctx.tape.value(out).shape(), &[2, 4]);
    }

    #[test]
    fn block_divisibility_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let b = tiny_block(&mut store, 2, 15);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(Tensor::zeros(&[5, 4]));
        assert!(hip_block(&mut ctx, xv, &b, &mut DropPath::eval()).is_err());
    }

    #[test]
    fn parameter_sharing_count() {
        // block parameters = shared weights + G*K*D latents exactly
        let mut store1: ParamStore<f32> = ParamStore::new();
        let cfg1 = BlockConfig { groups: 1, latents: 3, channels: 8, heads: 2, self_layers: 2 };
        let mut rng = stream(1, &[]);
        init_block(&mut store1, "b", &cfg1, 6, &mut rng);
        let mut store4: ParamStore<f32> = ParamStore::new();
        let cfg4 = BlockConfig { groups: 4, ..cfg1 };
        let mut rng = stream(1, &[]);
        init_block(&mut store4, "b", &cfg4, 6, &mut rng);
        let shared = store1.num_scalars() - 3 * 8;
        assert_eq!(store4.num_scalars(), shared + 4 * 3 * 8);
    }

    #[test]
    fn cost_report_formulas() {
        // HiP-16 block 1 at M=50,176: cross score pairs = M*K
        let blocks = vec![BlockConfig { groups: 16, latents: 128, channels: 128, heads: 4, self_layers: 2 }];
        let report = count_costs(&blocks, 32, 50_176).unwrap();
        let b = &report.blocks[0];
        assert_eq!(b.cross_score_macs / 128, 6_422_528); // token pairs, D factored out
        assert_eq!(b.self_score_macs_per_layer / 128, 262_144); // 16 * 128^2
        // totals equal the sum of parts
        assert_eq!(
            b.total(),
            b.projection_macs + b.cross_score_macs + b.cross_value_macs + b.self_attn_macs() + b.mlp_macs
        );

        // all-groups-1 config reproduces flat Perceiver cost M*K pairs
        let flat = vec![BlockConfig { groups: 1, latents: 128, channels: 128, heads: 4, self_layers: 2 }];
        let fr = count_costs(&flat, 32, 50_176).unwrap();
        assert_eq!(fr.blocks[0].cross_score_macs, report.blocks[0].cross_score_macs);
    }

    #[test]
    fn measured_macs_equal_analytic_counts() {
        // run the block forward and require the tape counter to agree with
        // count_costs exactly, bucket by bucket
        let mut store: ParamStore<f64> = ParamStore::new();
        let b = tiny_block(&mut store, 2, 31);
        let mut rng = stream(32, &[]);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(x);
        hip_block(&mut ctx, xv, &b, &mut DropPath::eval()).unwrap();

        let report = count_costs(&[b.config.clone()], 4, 8).unwrap();
        let c = &ctx.tape.counter;
        let a = &report.blocks[0];
        assert_eq!(c.get(CostTag::Projection), a.projection_macs);
        assert_eq!(c.get(CostTag::CrossScore), a.cross_score_macs);
        assert_eq!(c.get(CostTag::CrossValue), a.cross_value_macs);
        assert_eq!(
            c.get(CostTag::SelfScore),
            a.self_layers * a.self_score_macs_per_layer
        );
        assert_eq!(
            c.get(CostTag::SelfValue),
            a.self_layers * a.self_value_macs_per_layer
        );
        assert_eq!(c.get(CostTag::Mlp), a.mlp_macs);
        assert_eq!(c.total(), a.total());
    }

    #[test]
    fn grouped_vs_flat_ratios() {
        // same K per group: cross score is M*K*D either way; at equal output
        // tokens (flat latents = G*K) the self-attention ratio is 1/G
        let m = 4096;
        let (g, k, d) = (16usize, 32usize, 8usize);
        let grouped = count_costs(
            &[BlockConfig { groups: g, latents: k, channels: d, heads: 2, self_layers: 1 }],
            d,
            m,
        )
        .unwrap();
        let flat_same_k = count_costs(
            &[BlockConfig { groups: 1, latents: k, channels: d, heads: 2, self_layers: 1 }],
            d,
            m,
        )
        .unwrap();
        let flat_equal_width = count_costs(
            &[BlockConfig { groups: 1, latents: g * k, channels: d, heads: 2, self_layers: 1 }],
            d,
            m,
        )
        .unwrap();
        assert_eq!(grouped.blocks[0].cross_score_macs, flat_same_k.blocks[0].cross_score_macs);
        assert_eq!(
            flat_equal_width.blocks[0].self_score_macs_per_layer,
            grouped.blocks[0].self_score_macs_per_layer * g as u64
        );
    }
}
