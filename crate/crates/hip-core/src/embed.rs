//! Learned low-dimensional positional embeddings, per-modality input
//! projection, and the Fourier-feature baseline.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tokenize::TokenArray;
use crate::{Error, Result};

/// One learned row per input position. `d_pos` matches the model's input
/// channel width.
#[derive(Clone, Debug)]
pub struct PosEmbeddingTable<F> {
    pub table: Tensor<F>,
    pub d_pos: usize,
}

/// Per-modality linear map into the shared `d_pos` width.
#[derive(Clone, Debug)]
pub struct ModalityProjector<F> {
    pub weight: Tensor<F>, // [C_mod, d_pos]
    pub bias: Tensor<F>,   // [d_pos]
}

/// i.i.d. normal(0, 0.02) table, seed-deterministic.
pub fn init_pos_table<F: Real>(m_max: usize, d_pos: usize, seed: u64) -> PosEmbeddingTable<F> {
    let mut rng = crate::rng::stream(seed, &[0x504f53]);
    PosEmbeddingTable { table: Tensor::randn(&[m_max, d_pos], 0.02, &mut rng), d_pos }
}

/// Project each token through its modality's linear layer, then add the
/// positional embedding row: `out[i] = proj(x[i]) + pos[i]`.
pub fn embed_inputs<F: Real>(
    x: &TokenArray<F>,
    projectors: &[ModalityProjector<F>],
    pos: &PosEmbeddingTable<F>,
) -> Result<Tensor<F>> {
    let m = x.num_tokens();
    let c = x.channels();
    let d = pos.d_pos;
    if m > pos.table.shape()[0] {
        return Err(Error::Config(format!(
            "{} tokens exceed positional table capacity {}",
            m,
            pos.table.shape()[0]
        )));
    }
    let mut out = vec![F::zero(); m * d];
    for seg in &x.segments {
        let proj = projectors.get(seg.modality).ok_or_else(|| {
            Error::Config(format!("no projector for modality {}", seg.modality))
        })?;
        assert_eq!(proj.weight.shape(), [c, d], "projector shape mismatch");
        for i in seg.start..seg.start + seg.len {
            let tok = &x.tokens.data()[i * c..(i + 1) * c];
            let row = &mut out[i * d..(i + 1) * d];
            row.copy_from_slice(&pos.table.data()[i * d..(i + 1) * d]);
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = proj.bias.data()[j];
                for (k, &xv) in tok.iter().enumerate() {
                    acc = acc + xv * proj.weight.data()[k * d + j];
                }
                *r = *r + acc;
            }
        }
    }
    Ok(Tensor::new(vec![m, d], out))
}

/// Trainable single-modality embedding: projection weights plus the
/// positional table, bound onto a tape so gradients reach them.
#[derive(Clone, Copy, Debug)]
pub struct EmbedParams {
    pub w: ParamId,   // [C_raw, d_pos]
    pub b: ParamId,   // [d_pos]
    pub pos: ParamId, // [M_max, d_pos]
}

pub fn init_embed_params<F: Real>(
    store: &mut ParamStore<F>,
    c_raw: usize,
    d_pos: usize,
    m_max: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> EmbedParams {
    EmbedParams {
        w: store.add("embed.w", Tensor::randn(&[c_raw, d_pos], 0.02, rng)),
        b: store.add("embed.b", Tensor::zeros(&[d_pos])),
        pos: store.add("embed.pos", Tensor::randn(&[m_max, d_pos], 0.02, rng)),
    }
}

/// `out[i] = x[i] W + b + pos[positions[i]]` on the tape.
pub fn embed_rows<F: Real>(
    ctx: &mut Ctx<F>,
    x: Var, // [M, C_raw]
    positions: &[usize],
    p: &EmbedParams,
) -> Var {
    let m = ctx.tape.value(x).shape()[0];
    assert_eq!(m, positions.len(), "{m} rows vs {} positions", positions.len());
    let w = ctx.p(p.w);
    let b = ctx.p(p.b);
    let pos = ctx.p(p.pos);
    let proj = ctx.tape.linear(x, w, b);
    let rows = ctx.tape.gather0(pos, positions);
    ctx.tape.add(proj, rows)
}

/// Positional-embedding rows for the given positions (dense-decoder queries).
pub fn pos_rows<F: Real>(ctx: &mut Ctx<F>, p: &EmbedParams, positions: &[usize]) -> Var {
    let pos = ctx.p(p.pos);
    ctx.tape.gather0(pos, positions)
}

/// Per dimension: raw coordinate plus `[sin(f_k pi u), cos(f_k pi u)]` for
/// `B` linearly spaced frequencies from 1 to `max_freq`. Output width is
/// `dims * (2B + 1)`.
pub fn fourier_features<F: Real>(
    coords: &[Vec<f64>],
    bands: usize,
    max_freq: f64,
) -> Tensor<F> {
    assert!(bands >= 1, "need at least one frequency band");
    let m = coords.len();
    let dims = coords.first().map_or(0, |c| c.len());
    let width = dims * (2 * bands + 1);
    let mut out = Vec::with_capacity(m * width);
    for c in coords {
        assert_eq!(c.len(), dims, "ragged coordinates");
        for &u in c {
            out.push(F::from_f64(u));
            for k in 0..bands {
                let f = if bands == 1 {
                    1.0
                } else {
                    1.0 + (max_freq - 1.0) * k as f64 / (bands - 1) as f64
                };
                let arg = f * std::f64::consts::PI * u;
                out.push(F::from_f64(arg.sin()));
                out.push(F::from_f64(arg.cos()));
            }
        }
    }
    Tensor::new(vec![m, width], out)
}

/// Normalized `[-1, 1]` coordinates of an `h x w` grid, row-major.
pub fn grid_coords(h: usize, w: usize) -> Vec<Vec<f64>> {
    let norm = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(vec![norm(r, h), norm(c, w)]);
        }
    }
    out
}

/// Inner-product maps against probe positions plus a PCA factorization of
/// the table.
#[derive(Clone, Debug)]
pub struct PosAnalysis {
    /// (probe position, inner products against every position).
    pub distance_maps: Vec<(usize, Vec<f64>)>,
    /// Per-component projection of every position, strongest first.
    pub pca_channels: Vec<Vec<f64>>,
    /// Eigenvalues of the table covariance, descending.
    pub explained_variance: Vec<f64>,
}

pub fn pos_analysis<F: Real>(table: &Tensor<F>, probes: &[usize]) -> PosAnalysis {
    let m = table.shape()[0];
    let d = table.shape()[1];
    let data = table.to_f64_vec();
    let row = |i: usize| &data[i * d..(i + 1) * d];

    let distance_maps = probes
        .iter()
        .map(|&p| {
            let pr = row(p).to_vec();
            let map = (0..m)
                .map(|i| row(i).iter().zip(&pr).map(|(a, b)| a * b).sum())
                .collect();
            (p, map)
        })
        .collect();

    // PCA over centered rows
    let mut mean = vec![0.0f64; d];
    for i in 0..m {
        for (j, v) in row(i).iter().enumerate() {
            mean[j] += v / m as f64;
        }
    }
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for i in 0..m {
        let r = row(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / m as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut pca_channels = Vec::with_capacity(d);
    let mut explained_variance = Vec::with_capacity(d);
    for &k in &order {
        let v = eig.eigenvectors.column(k);
        let channel = (0..m)
            .map(|i| {
                row(i)
                    .iter()
                    .zip(v.iter())
                    .zip(&mean)
                    .map(|((x, vk), mu)| (x - mu) * vk)
                    .sum()
            })
            .collect();
        pca_channels.push(channel);
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    PosAnalysis { distance_maps, pca_channels, explained_variance }
}

/// Mean cosine similarity of the embeddings of 4-adjacent grid positions
/// versus uniformly random pairs.
pub fn adjacency_similarity<F: Real>(
    table: &Tensor<F>,
    h: usize,
    w: usize,
    seed: u64,
) -> (f64, f64) {
    use rand::Rng;
    let d = table.shape()[1];
    assert!(table.shape()[0] >= h * w, "table smaller than grid");
    let data = table.to_f64_vec();
    let cos = |a: usize, b: usize| {
        let (ra, rb) = (&data[a * d..(a + 1) * d], &data[b * d..(b + 1) * d]);
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let mut adj_sum = 0.0;
    let mut adj_n = 0usize;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                adj_sum += cos(i, i + 1);
                adj_n += 1;
            }
            if r + 1 < h {
                adj_sum += cos(i, i + w);
                adj_n += 1;
            }
        }
    }
    let mut rng = crate::rng::stream(seed, &[0xAD7A]);
    let mut rnd_sum = 0.0;
    let pairs = 4096;
    for _ in 0..pairs {
        let a = rng.gen_range(0..h * w);
        let b = rng.gen_range(0..h * w);
        rnd_sum += cos(a, b);
    }
    (adj_sum / adj_n as f64, rnd_sum / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::flatten;

    #[test]
    fn zero_inputs_give_pos_rows() {
        let x = flatten(&Tensor::<f32>::zeros(&[2, 3, 4]), 0).unwrap();
        let pos = init_pos_table::<f32>(6, 8, 3);
        let proj = ModalityProjector {
            weight: Tensor::randn(&[4, 8], 1.0, &mut crate::rng::stream(1, &[])),
            bias: Tensor::zeros(&[8]),
        };
        let out = embed_inputs(&x, &[proj], &pos).unwrap();
        assert_eq!(out.data(), pos.table.data());
    }

    #[test]
    fn missing_projector_errors() {
        let x = flatten(&Tensor::<f32>::zeros(&[2, 2, 1]), 1).unwrap();
        let pos = init_pos_table::<f32>(4, 4, 0);
        assert!(embed_inputs(&x, &[], &pos).is_err());
    }

    #[test]
    fn capacity_enforced() {
        let x = flatten(&Tensor::<f32>::zeros(&[4, 4, 1]), 0).unwrap();
        let pos = init_pos_table::<f32>(8, 4, 0);
        let proj = ModalityProjector {
            weight: Tensor::zeros(&[1, 4]),
            bias: Tensor::zeros(&[4]),
        };
        assert!(embed_inputs(&x, &[proj], &pos).is_err());
    }

    #[test]
    fn embedding_is_linear_in_inputs() {
        // embed(a*x) - embed(0) = a * (embed(x) - embed(0)) per token
        let g = Tensor::<f64>::randn(&[3, 3, 2], 1.0, &mut crate::rng::stream(5, &[]));
        let x = flatten(&g, 0).unwrap();
        let x2 = flatten(&g.map(|v| v * 2.5), 0).unwrap();
        let zero = flatten(&Tensor::<f64>::zeros(&[3, 3, 2]), 0).unwrap();
        let pos = init_pos_table::<f64>(9, 5, 7);
        let proj = vec![ModalityProjector {
            weight: Tensor::randn(&[2, 5], 1.0, &mut crate::rng::stream(6, &[])),
            bias: Tensor::randn(&[5], 1.0, &mut crate::rng::stream(7, &[])),
        }];
        let e1 = embed_inputs(&x, &proj, &pos).unwrap();
        let e2 = embed_inputs(&x2, &proj, &pos).unwrap();
        let e0 = embed_inputs(&zero, &proj, &pos).unwrap();
        for i in 0..e1.numel() {
            let lhs = e2.data()[i] - e0.data()[i];
            let rhs = 2.5 * (e1.data()[i] - e0.data()[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn init_table_stats() {
        let a = init_pos_table::<f32>(4096, 32, 11);
        let b = init_pos_table::<f32>(4096, 32, 11);
        assert_eq!(a.table.data(), b.table.data());
        let c = init_pos_table::<f32>(4096, 32, 12);
        assert_ne!(a.table.data(), c.table.data());
        let n = a.table.numel() as f64;
        assert!(n >= 1e5);
        let var: f64 = a.table.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn fourier_dimensionality() {
        let coords = grid_coords(2, 2);
        let f: Tensor<f64> = fourier_features(&coords, 64, 112.0);
        assert_eq!(f.shape(), &[4, 258]); // dims=2, B=64 -> 2*(2*64+1)

        let one_d: Vec<Vec<f64>> = vec![vec![0.3]; 5];
        let f: Tensor<f64> = fourier_features(&one_d, 3, 4.0);
        assert_eq!(f.shape(), &[5, 7]); // dims*(2B+1)
    }

    #[test]
    fn fourier_at_zero() {
        let f: Tensor<f64> = fourier_features(&[vec![0.0]], 4, 8.0);
        let d = f.data();
        assert_eq!(d[0], 0.0); // raw
        for k in 0..4 {
            assert_eq!(d[1 + 2 * k], 0.0); // sin
            assert_eq!(d[2 + 2 * k], 1.0); // cos
        }
    }

    #[test]
    fn distance_map_degenerate_cases() {
        // identical rows -> constant map
        let t: Tensor<f64> = Tensor::new(vec![3, 2], vec![1., 2., 1., 2., 1., 2.]);
        let a = pos_analysis(&t, &[0]);
        let map = &a.distance_maps[0].1;
        assert!(map.iter().all(|&v| (v - map[0]).abs() < 1e-12));

        // orthonormal rows -> identity-like inner products
        let t: Tensor<f64> = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]);
        let a = pos_analysis(&t, &[0, 1]);
        assert_eq!(a.distance_maps[0].1, vec![1.0, 0.0]);
        assert_eq!(a.distance_maps[1].1, vec![0.0, 1.0]);
    }

    #[test]
    fn pca_components_orthogonal_descending() {
        let t = init_pos_table::<f64>(256, 8, 3).table;
        let a = pos_analysis(&t, &[]);
        for w in a.explained_variance.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        // projections onto distinct components are uncorrelated
        let m = 256;
        for i in 0..8 {
            for j in i + 1..8 {
                let dot: f64 = (0..m)
                    .map(|r| a.pca_channels[i][r] * a.pca_channels[j][r])
                    .sum::<f64>()
                    / m as f64;
                assert!(dot.abs() < 1e-9, "components {i},{j} correlate: {dot}");
            }
        }
        // channel variance equals the eigenvalue
        for k in 0..8 {
            let var: f64 =
                a.pca_channels[k].iter().map(|v| v * v).sum::<f64>() / m as f64;
            assert!((var - a.explained_variance[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn random_table_has_no_adjacency_structure() {
        let t = init_pos_table::<f32>(1024, 16, 9).table;
        let (adj, rnd) = adjacency_similarity(&t, 32, 32, 1);
        assert!((adj - rnd).abs() <= 0.02, "adj {adj} rnd {rnd}");
    }
}
