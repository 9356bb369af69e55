//! Flattening of raw multi-dimensional signals into token matrices, modality
//! concatenation, contiguous grouping, and the fixed-shuffle ablation.

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};
use rand::Rng;

/// Contiguous span of tokens belonging to one modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySegment {
    pub modality: usize,
    pub start: usize,
    pub len: usize,
}

/// Flattened input: `M` tokens by `C` channels plus modality metadata.
#[derive(Clone, Debug)]
pub struct TokenArray<F> {
    pub tokens: Tensor<F>,
    pub segments: Vec<ModalitySegment>,
    /// Original index dims (without the channel dim) per modality.
    pub source_shape: Vec<Vec<usize>>,
}

impl<F: Real> TokenArray<F> {
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Tokens split into `G` contiguous slices of `M/G`.
#[derive(Clone, Debug)]
pub struct GroupedTokens<F> {
    pub groups: Vec<Tensor<F>>,
    pub group_size: usize,
}

/// Row-major flatten of an nd signal with a trailing channel dim: the last
/// index dimension varies fastest and channels stay attached to each token.
pub fn flatten<F: Real>(signal: &Tensor<F>, modality: usize) -> Result<TokenArray<F>> {
    let shape = signal.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "flatten needs at least one index dim plus channels, got {shape:?}"
        )));
    }
    let channels = *shape.last().unwrap();
    let m: usize = shape[..shape.len() - 1].iter().product();
    if m == 0 || channels == 0 {
        return Err(Error::Shape(format!("flatten of empty signal {shape:?}")));
    }
    Ok(TokenArray {
        tokens: signal.reshaped(&[m, channels]),
        segments: vec![ModalitySegment { modality, start: 0, len: m }],
        source_shape: vec![shape[..shape.len() - 1].to_vec()],
    })
}

/// Concatenate per-modality token arrays back to back.
pub fn concat_modalities<F: Real>(parts: &[TokenArray<F>]) -> Result<TokenArray<F>> {
    let Some(first) = parts.first() else {
        return Err(Error::Shape("concat of zero modalities".into()));
    };
    let c = first.channels();
    let mut data = Vec::new();
    let mut segments = Vec::new();
    let mut source_shape = Vec::new();
    let mut offset = 0usize;
    for (i, part) in parts.iter().enumerate() {
        if part.channels() != c {
            return Err(Error::Shape(format!(
                "modality {i} has {} channels, expected {c}",
                part.channels()
            )));
        }
        data.extend_from_slice(part.tokens.data());
        for seg in &part.segments {
            segments.push(ModalitySegment {
                modality: seg.modality,
                start: seg.start + offset,
                len: seg.len,
            });
        }
        source_shape.extend(part.source_shape.iter().cloned());
        offset += part.num_tokens();
    }
    Ok(TokenArray {
        tokens: Tensor::new(vec![offset, c], data),
        segments,
        source_shape,
    })
}

/// Group index of token `pos` under `g` contiguous groups of an `m`-token array.
pub fn group_of(pos: usize, m: usize, g: usize) -> usize {
    pos / (m / g)
}

/// Split into `G` contiguous groups. Fails when `G` does not divide `M`
/// (no implicit padding).
pub fn split_groups<F: Real>(x: &TokenArray<F>, g: usize) -> Result<GroupedTokens<F>> {
    let m = x.num_tokens();
    if g == 0 || m % g != 0 {
        return Err(Error::Config(format!(
            "group count {g} does not divide token count {m}"
        )));
    }
    let size = m / g;
    let c = x.channels();
    let groups = (0..g)
        .map(|i| {
            Tensor::new(
                vec![size, c],
                x.tokens.data()[i * size * c..(i + 1) * size * c].to_vec(),
            )
        })
        .collect();
    Ok(GroupedTokens { groups, group_size: size })
}

/// Merge per-group `K x D` outputs into a `(G K) x D` token array, group
/// order preserved.
pub fn merge_groups<F: Real>(groups: &[Tensor<F>]) -> Result<TokenArray<F>> {
    let Some(first) = groups.first() else {
        return Err(Error::Shape("merge of zero groups".into()));
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        if g.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "ragged group {i}: {:?} vs {:?}",
                g.shape(),
                shape
            )));
        }
        data.extend_from_slice(g.data());
    }
    let m = groups.len() * shape[0];
    Ok(TokenArray {
        tokens: Tensor::new(vec![m, shape[1]], data),
        segments: vec![ModalitySegment { modality: 0, start: 0, len: m }],
        source_shape: vec![vec![m]],
    })
}

/// A fixed, seed-deterministic token permutation with its inverse.
#[derive(Clone, Debug)]
pub struct Permutation {
    fwd: Vec<usize>,
}

impl Permutation {
    /// Fisher-Yates permutation of `[0, m)` from the given seed. The same
    /// seed always yields the same permutation.
    pub fn fixed(m: usize, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, &[SHUFFLE_TAG]);
        let mut fwd: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = rng.gen_range(0..=i);
            fwd.swap(i, j);
        }
        Self { fwd }
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }

    /// Destination index of source position `i`: output[i] = input[fwd[i]].
    pub fn indices(&self) -> &[usize] {
        &self.fwd
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.fwd.len()];
        for (i, &j) in self.fwd.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { fwd: inv }
    }

    pub fn apply_rows<F: Real>(&self, x: &Tensor<F>) -> Tensor<F> {
        let c = x.last_dim();
        assert_eq!(x.shape()[0], self.fwd.len(), "permutation length mismatch");
        let mut data = Vec::with_capacity(x.numel());
        for &src in &self.fwd {
            data.extend_from_slice(&x.data()[src * c..(src + 1) * c]);
        }
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Apply a seed-deterministic permutation identically to every example.
pub fn fixed_shuffle<F: Real>(x: &TokenArray<F>, seed: u64) -> (TokenArray<F>, Permutation) {
    let perm = Permutation::fixed(x.num_tokens(), seed);
    let shuffled = TokenArray {
        tokens: perm.apply_rows(&x.tokens),
        segments: x.segments.clone(),
        source_shape: x.source_shape.clone(),
    };
    (shuffled, perm)
}

const SHUFFLE_TAG: u64 = 0x53484646;
