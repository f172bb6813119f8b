//! Token schemes for a look-back window `X ∈ R^{T×N}` and mean-std normalization.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScheme {
    /// One token per timestamp, carrying all variables.
    Temporal,
    /// One token per variable, carrying the whole look-back.
    Variable,
    /// Per-variable contiguous slices, variable-major.
    Patch,
}

impl fmt::Display for TokenScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenScheme::Temporal => "temporal",
            TokenScheme::Variable => "variable",
            TokenScheme::Patch => "patch",
        })
    }
}

impl FromStr for TokenScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(TokenScheme::Temporal),
            "variable" => Ok(TokenScheme::Variable),
            "patch" => Ok(TokenScheme::Patch),
            other => Err(Error::Config(format!("unknown token scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchSpec {
    /// `⌈(T − patch_len) / stride⌉ + 1` patches per variable.
    pub fn patches_per_variable(&self, t: usize) -> usize {
        (t - self.patch_len).div_ceil(self.stride) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Matrix,
    pub scheme: TokenScheme,
    pub patch: Option<PatchSpec>,
}

impl TokenBatch {
    pub fn count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Number of tokens and raw token width a scheme produces for a `T×N` window.
pub fn token_shape(scheme: TokenScheme, t: usize, n: usize, patch: Option<PatchSpec>) -> Result<(usize, usize)> {
    match scheme {
        TokenScheme::Temporal => Ok((t, n)),
        TokenScheme::Variable => Ok((n, t)),
        TokenScheme::Patch => {
            let p = validate_patch(t, patch)?;
            Ok((n * p.patches_per_variable(t), p.patch_len))
        }
    }
}

fn validate_patch(t: usize, patch: Option<PatchSpec>) -> Result<PatchSpec> {
    let p = patch.ok_or_else(|| Error::InvalidArgument("patch scheme needs patch_len and stride".into()))?;
    if p.patch_len == 0 || p.stride == 0 {
        return Err(Error::InvalidArgument("patch_len and stride must be >= 1".into()));
    }
    if p.patch_len > t {
        return Err(Error::InvalidArgument(format!(
            "patch_len {} exceeds window length {t}",
            p.patch_len
        )));
    }
    Ok(p)
}

pub fn tokenize(x: &Matrix, scheme: TokenScheme, patch: Option<PatchSpec>) -> Result<TokenBatch> {
    let (t, n) = (x.rows(), x.cols());
    if t == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("empty window {t}x{n}")));
    }
    let tokens = match scheme {
        TokenScheme::Temporal => x.clone(),
        TokenScheme::Variable => x.transpose(),
        TokenScheme::Patch => {
            let p = validate_patch(t, patch)?;
            let per_var = p.patches_per_variable(t);
            let mut m = Matrix::zeros(n * per_var, p.patch_len);
            for v in 0..n {
                for k in 0..per_var {
                    let start = k * p.stride;
                    for j in 0..p.patch_len {
                        // tail of the last patch stays zero-padded
                        if start + j < t {
                            m.set(v * per_var + k, j, x.get(start + j, v));
                        }
                    }
                }
            }
            m
        }
    };
    Ok(TokenBatch {
        tokens,
        scheme,
        patch: if scheme == TokenScheme::Patch { patch } else { None },
    })
}

/// Reassembles the `T×N` window from tokens. Exact for temporal and variable
/// tokens, and for patches whose stride tiles the window.
pub fn detokenize(batch: &TokenBatch, t: usize, n: usize) -> Result<Matrix> {
    match batch.scheme {
        TokenScheme::Temporal => Ok(batch.tokens.clone()),
        TokenScheme::Variable => Ok(batch.tokens.transpose()),
        TokenScheme::Patch => {
            let p = validate_patch(t, batch.patch)?;
            let per_var = p.patches_per_variable(t);
            let mut x = Matrix::zeros(t, n);
            for v in 0..n {
                for k in 0..per_var {
                    for j in 0..p.patch_len {
                        let ts = k * p.stride + j;
                        if ts < t {
                            x.set(ts, v, batch.tokens.get(v * per_var + k, j));
                        }
                    }
                }
            }
            Ok(x)
        }
    }
}

/// Per-variable mean and population standard deviation of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_norm(train: &Matrix) -> Result<NormStats> {
    let rows = train.rows();
    if rows == 0 {
        return Err(Error::Data("cannot fit normalization on an empty split".into()));
    }
    let mut mean = vec![0.0; train.cols()];
    let mut std = vec![0.0; train.cols()];
    for j in 0..train.cols() {
        let col = train.column(j);
        let m = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows as f64;
        mean[j] = m;
        std[j] = var.sqrt().max(STD_FLOOR);
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "normalization stats cover {} variables, data has {}",
                self.mean.len(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.std[j]))
    }

    pub fn invert(&self, y: &Matrix) -> Result<Matrix> {
        self.check(y)?;
        Ok(Matrix::from_fn(y.rows(), y.cols(), |i, j| y.get(i, j) * self.std[j] + self.mean[j]))
    }
}

pub fn apply_norm(x: &Matrix, stats: &NormStats) -> Result<Matrix> {
    stats.apply(x)
}

pub fn invert_norm(y: &Matrix, stats: &NormStats) -> Result<Matrix> {
    stats.invert(y)
}
