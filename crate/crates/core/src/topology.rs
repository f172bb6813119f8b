//! Positional and semantic input topology, layer-wise distortion measures and
//! the HSIC dependence statistic.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{Graph, Var};

const READOUT_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeKind {
    Sinusoidal,
    Convolutional,
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeKind::Sinusoidal => "sinusoidal",
            PeKind::Convolutional => "convolutional",
        })
    }
}

impl FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(PeKind::Sinusoidal),
            "convolutional" | "conv" => Ok(PeKind::Convolutional),
            other => Err(Error::Config(format!("unknown positional encoding '{other}'"))),
        }
    }
}

/// Frozen topology of one input window: the positional encodings injected as
/// OPT and the raw-token Gram matrix injected as OST.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyContext {
    pub opt: Matrix,
    pub ost: Matrix,
    pub pe_kind: PeKind,
}

/// Per-layer distortion and dependence measurements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistortionReport {
    pub delta_s: Vec<f64>,
    pub delta_g_proxy: Vec<f64>,
    pub hsic_positional: Vec<f64>,
    pub hsic_semantic: Vec<f64>,
}

/// `PE[k, 2i] = sin(k / 10000^{2i/D})`, `PE[k, 2i+1] = cos(..)`, with 0-indexed positions.
pub fn sinusoidal_pe(n_tokens: usize, dim: usize) -> Result<Matrix> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::InvalidArgument(format!("sinusoidal PE needs an even dimension, got {dim}")));
    }
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("sinusoidal PE needs at least one position".into()));
    }
    let mut m = Matrix::zeros(n_tokens, dim);
    for k in 0..n_tokens {
        for i in 0..dim / 2 {
            let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            m.set(k, 2 * i, angle.sin());
            m.set(k, 2 * i + 1, angle.cos());
        }
    }
    Ok(m)
}

/// Depthwise width-3 convolution over the token axis with zero padding:
/// `out[k] = Σ_{j∈{-1,0,1}} kernel[j+1] ⊙ emb[k+j]`.
pub fn conv_pe(g: &mut Graph, embeddings: Var, kernel: Var) -> Result<Var> {
    let (n, d) = g.dims(embeddings);
    let (kr, kc) = g.dims(kernel);
    if (kr, kc) != (3, d) {
        return Err(crate::error::shape_err("conv_pe", &[3, d], &[kr, kc]));
    }
    let mut taps = Vec::with_capacity(3);
    for j in 0..3 {
        let row = g.slice_rows(kernel, j, 1)?;
        taps.push(g.broadcast_rows(row, n)?);
    }
    let mut out = g.mul(embeddings, taps[1])?;
    if n > 1 {
        let prev = g.slice_rows(embeddings, 0, n - 1)?;
        let prev = g.pad_rows(prev, 1, n)?;
        let prev = g.mul(prev, taps[0])?;
        out = g.add(out, prev)?;
        let next = g.slice_rows(embeddings, 1, n - 1)?;
        let next = g.pad_rows(next, 0, n)?;
        let next = g.mul(next, taps[2])?;
        out = g.add(out, next)?;
    }
    Ok(out)
}

/// Gram matrix `H⁰ (H⁰)ᵀ` of raw tokens.
pub fn ost_matrix(h0: &Matrix) -> Matrix {
    h0.gram()
}

fn cosine_matrix(h: &Matrix) -> Matrix {
    let norms: Vec<f64> = (0..h.rows())
        .map(|i| h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let gram = h.gram();
    Matrix::from_fn(h.rows(), h.rows(), |i, j| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            gram.get(i, j) / (norms[i] * norms[j])
        }
    })
}

/// Mean absolute difference between the token cosine-similarity matrices of
/// the input tokens and a layer's tokens. Zero-norm rows have similarity 0.
pub fn semantic_distortion(h0: &Matrix, hi: &Matrix) -> Result<f64> {
    if h0.rows() != hi.rows() {
        return Err(Error::InvalidArgument(format!(
            "token count mismatch: {} vs {}",
            h0.rows(),
            hi.rows()
        )));
    }
    let n = h0.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let a = cosine_matrix(h0);
    let b = cosine_matrix(hi);
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / (n * n) as f64)
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Positions recovered from layer activations by a minimum-norm least-squares
/// linear readout `Hi·W ≈ opt`. Singular values below `1e-12·σ_max` are dropped.
pub fn linear_readout(opt: &Matrix, hi: &Matrix) -> Result<Matrix> {
    let h = to_dmatrix(hi);
    let p = to_dmatrix(opt);
    let svd = h.clone().svd(true, true);
    let cutoff = READOUT_RCOND * svd.singular_values.max();
    let w = svd
        .solve(&p, cutoff)
        .map_err(|e| Error::NonFinite(format!("readout solve failed: {e}")))?;
    let fitted = h * w;
    Ok(Matrix::from_fn(fitted.nrows(), fitted.ncols(), |i, j| fitted[(i, j)]))
}

fn pairwise_distance_gap(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.rows();
    let dist = |m: &Matrix, i: usize, j: usize| {
        m.row(i)
            .iter()
            .zip(m.row(j))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for k in 0..n {
        for j in 0..n {
            total += (dist(a, k, j) - dist(b, k, j)).abs();
        }
    }
    total / (n * n) as f64
}

/// Layer-wise positional distortion, using a linear readout as the layer's
/// perceived positions. Reported as a proxy.
pub fn positional_distortion_proxy(opt: &Matrix, hi: &Matrix) -> Result<f64> {
    if opt.rows() < 2 {
        return Err(Error::InvalidArgument("positional distortion needs at least 2 tokens".into()));
    }
    if opt.rows() != hi.rows() {
        return Err(Error::InvalidArgument(format!(
            "token count mismatch: {} vs {}",
            opt.rows(),
            hi.rows()
        )));
    }
    let recovered = linear_readout(opt, hi)?;
    Ok(pairwise_distance_gap(opt, &recovered))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median heuristic: `sqrt(v_m / 2)`, `v_m` the median of the non-zero squared
/// pairwise distances over unordered pairs.
pub fn median_bandwidth(x: &Matrix) -> Result<f64> {
    let n = x.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(x.row(i), x.row(j));
            if v != 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return Err(Error::InvalidArgument(
            "median heuristic needs at least one non-zero pairwise distance".into(),
        ));
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    Ok((median / 2.0).sqrt())
}

fn gaussian_kernel(x: &Matrix, sigma: f64) -> Matrix {
    let n = x.rows();
    let denom = 2.0 * sigma * sigma;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, 1.0);
        for j in i + 1..n {
            let v = (-sq_dist(x.row(i), x.row(j)) / denom).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

fn center(k: &Matrix) -> Matrix {
    let n = k.rows();
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.get(i, j)).sum::<f64>() / n as f64).collect();
    let all = row_mean.iter().sum::<f64>() / n as f64;
    Matrix::from_fn(n, n, |i, j| k.get(i, j) - row_mean[i] - col_mean[j] + all)
}

/// Biased HSIC `tr(K H L H) / (N−1)²` with Gaussian kernels, rows paired by index.
pub fn hsic(x: &Matrix, y: &Matrix) -> Result<f64> {
    let n = x.rows();
    if n != y.rows() {
        return Err(Error::InvalidArgument(format!("HSIC sample count mismatch: {n} vs {}", y.rows())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("HSIC needs at least 2 samples".into()));
    }
    let k = gaussian_kernel(x, median_bandwidth(x)?);
    let l = gaussian_kernel(y, median_bandwidth(y)?);
    // tr(HKH · L) = Σ_ij (HKH)_ij L_ji with both symmetric; centre both so the
    // result is symmetric in its arguments to rounding.
    let kc = center(&k);
    let lc = center(&l);
    let tr: f64 = kc.data().iter().zip(lc.data()).map(|(a, b)| a * b).sum();
    Ok(tr / ((n - 1) * (n - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sinusoidal_examples() {
        let pe = sinusoidal_pe(4, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 0.841471).abs() < 1e-6);
        assert!(sinusoidal_pe(3, 5).is_err());
        for k in 0..4 {
            for i in 0..2 {
                let w = 1.0 / 10000f64.powf(2.0 * i as f64 / 4.0);
                assert_eq!(pe.get(k, 2 * i), (k as f64 * w).sin());
                assert_eq!(pe.get(k, 2 * i + 1), (k as f64 * w).cos());
            }
        }
    }

    #[test]
    fn sinusoidal_row_norm_is_half_dim() {
        let pe = sinusoidal_pe(50, 16).unwrap();
        for k in 0..50 {
            let n2: f64 = pe.row(k).iter().map(|v| v * v).sum();
            assert!((n2 - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_pe_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = random(&mut rng, 3, 2);
        let kern = random(&mut rng, 3, 2);
        let mut g = Graph::new();
        let e = g.constant(&emb);

        let zero = g.constant(&Matrix::zeros(3, 2));
        let out = conv_pe(&mut g, e, zero).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let ident = g.constant(&Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]).unwrap());
        let out = conv_pe(&mut g, e, ident).unwrap();
        assert_eq!(g.to_matrix(out), emb);

        let k = g.constant(&kern);
        let out = conv_pe(&mut g, e, k).unwrap();
        let out = g.to_matrix(out);
        // sliding-window oracle
        for r in 0..3i64 {
            for c in 0..2 {
                let mut s = 0.0;
                for j in -1i64..=1 {
                    let src = r + j;
                    if (0..3).contains(&src) {
                        s += kern.get((j + 1) as usize, c) * emb.get(src as usize, c);
                    }
                }
                assert!((out.get(r as usize, c) - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ost_examples() {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(ost_matrix(&eye), eye);
        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(ost_matrix(&one).data(), &[5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random(&mut rng, 3, 2);
        let s = ost_matrix(&h);
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..2 {
                    dot += h.get(i, k) * h.get(j, k);
                }
                assert!((s.get(i, j) - dot).abs() < 1e-15);
                assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn semantic_distortion_examples() {
        let h0 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(semantic_distortion(&h0, &h0).unwrap(), 0.0);
        assert!(semantic_distortion(&h0, &h0.map(|v| 3.0 * v)).unwrap().abs() < 1e-15);
        // orthogonal pair rotated to parallel: two off-diagonal entries change by 1
        let hi = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!((semantic_distortion(&h0, &hi).unwrap() - 0.5).abs() < 1e-15);
        let bad = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(semantic_distortion(&h0, &bad).is_err());
    }

    #[test]
    fn zero_rows_have_zero_similarity() {
        let h0 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let d = semantic_distortion(&h0, &h0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn positional_proxy_self_fit() {
        let opt = sinusoidal_pe(8, 4).unwrap();
        assert!(positional_distortion_proxy(&opt, &opt).unwrap() < 1e-8);
        let permuted = opt.select_columns(&[2, 0, 3, 1]);
        assert!(positional_distortion_proxy(&opt, &permuted).unwrap() < 1e-8);
        let single = sinusoidal_pe(1, 4).unwrap();
        assert!(positional_distortion_proxy(&single, &single).is_err());
    }

    /// Normal equations (full column rank input) solved by Gauss-Jordan
    /// elimination, then the distance gap evaluated with explicit loops.
    fn proxy_oracle(opt: &Matrix, hi: &Matrix) -> f64 {
        let d = hi.cols();
        let q = opt.cols();
        let n = hi.rows();
        let mut aug = vec![vec![0.0; d + q]; d];
        for a in 0..d {
            for b in 0..d {
                aug[a][b] = (0..n).map(|k| hi.get(k, a) * hi.get(k, b)).sum::<f64>();
            }
            for c in 0..q {
                aug[a][d + c] = (0..n).map(|k| hi.get(k, a) * opt.get(k, c)).sum::<f64>();
            }
        }
        for col in 0..d {
            let piv = (col..d).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs())).unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = aug[r][col];
                    let pivot_row = aug[col].clone();
                    for (x, y) in aug[r].iter_mut().zip(pivot_row) {
                        *x -= f * y;
                    }
                }
            }
        }
        let w = |a: usize, c: usize| aug[a][d + c];
        let fitted = Matrix::from_fn(n, q, |k, c| (0..d).map(|a| hi.get(k, a) * w(a, c)).sum());
        let mut total = 0.0;
        for k in 0..n {
            for j in 0..n {
                let mut dp = 0.0;
                let mut df = 0.0;
                for c in 0..q {
                    dp += (opt.get(k, c) - opt.get(j, c)).powi(2);
                    df += (fitted.get(k, c) - fitted.get(j, c)).powi(2);
                }
                total += (dp.sqrt() - df.sqrt()).abs();
            }
        }
        total / (n * n) as f64
    }

    #[test]
    fn positional_proxy_matches_oracle_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opt = sinusoidal_pe(8, 4).unwrap();
        let noise = random(&mut rng, 8, 5);
        let got = positional_distortion_proxy(&opt, &noise).unwrap();
        let want = proxy_oracle(&opt, &noise);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn median_bandwidth_examples() {
        let two = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(median_bandwidth(&two).unwrap(), 0.5f64.sqrt());
        let three = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert_eq!(median_bandwidth(&three).unwrap(), 0.5f64.sqrt());
        // duplicates: pairs (0,0)=0 excluded; remaining {4, 4} -> median 4
        let dup = Matrix::from_rows(&[[0.0], [0.0], [2.0]]).unwrap();
        assert_eq!(median_bandwidth(&dup).unwrap(), 2.0f64.sqrt());
        let same = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert!(median_bandwidth(&same).is_err());
    }

    #[test]
    fn hsic_basic_properties() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(hsic(&x, &x).unwrap() > 0.0);
        let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [-1.0]]).unwrap();
        assert!((hsic(&a, &b).unwrap() - hsic(&b, &a).unwrap()).abs() < 1e-12);
        assert!(hsic(&a, &x).is_err());
        assert!(hsic(&Matrix::from_rows(&[[1.0]]).unwrap(), &Matrix::from_rows(&[[1.0]]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn hsic_symmetric_and_permutation_invariant(
            seed in 0u64..1000, n in 3usize..9, dx in 1usize..4, dy in 1usize..4
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, n, dx);
            let y = random(&mut rng, n, dy);
            let h = hsic(&x, &y).unwrap();
            prop_assert!(h >= -1e-12);
            prop_assert!((h - hsic(&y, &x).unwrap()).abs() < 1e-12);
            let perm: Vec<usize> = (0..n).rev().collect();
            let px = Matrix::from_fn(n, dx, |i, j| x.get(perm[i], j));
            let py = Matrix::from_fn(n, dy, |i, j| y.get(perm[i], j));
            prop_assert!((h - hsic(&px, &py).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn semantic_distortion_bounds(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 5, 3);
            let b = random(&mut rng, 5, 4);
            let d = semantic_distortion(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert!(semantic_distortion(&a, &a.map(|v| c * v)).unwrap() < 1e-12);
        }
    }
}
