//! Layer-wise topology diagnostics: activation capture, HSIC curves and
//! distortion curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{synthetic, SynthConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::tensor::Graph;
use crate::tokenizer::fit_norm;
use crate::topology::{hsic, ost_matrix, positional_distortion_proxy, semantic_distortion};

/// Number of probe windows each curve point is averaged over.
pub const PROBE_WINDOWS: usize = 8;

/// Snapshot of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `H^1 … H^L`, each `N_t × D`.
    pub layers: Vec<Matrix>,
    /// Positional encodings (OPT), `N_t × D`.
    pub opt: Matrix,
    /// Raw-token Gram matrix (OST), `N_t × N_t`.
    pub ost: Matrix,
    /// `H⁰`, the raw tokens.
    pub raw_tokens: Matrix,
}

/// Runs the forward pass on one normalized window and records the layer
/// outputs of encoder `branch` (0 for single-branch models; 0 = temporal,
/// 1 = variable for the dual-branch model).
pub fn capture(model: &Model, x: &Matrix, branch: usize) -> Result<LayerTrace> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, false);
    let out = model.forward_graph(&mut g, &bound, x)?;
    let enc = out.encodings.get(branch).ok_or_else(|| {
        Error::InvalidArgument(format!("model has {} encoder branches, asked for {branch}", out.encodings.len()))
    })?;
    Ok(LayerTrace {
        layers: enc.layers.iter().map(|&v| g.to_matrix(v)).collect(),
        opt: g.to_matrix(enc.opt),
        ost: g.to_matrix(enc.ost),
        raw_tokens: enc.raw_tokens.clone(),
    })
}

/// `(positional, semantic)` HSIC per layer. The semantic pairing treats each
/// token's row of the two similarity matrices as one sample.
pub fn hsic_curves(trace: &LayerTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::with_capacity(trace.layers.len());
    let mut sem = Vec::with_capacity(trace.layers.len());
    for h in &trace.layers {
        pos.push(hsic(&trace.opt, h)?);
        sem.push(hsic(&trace.ost, &h.gram())?);
    }
    Ok((pos, sem))
}

/// `(Δ_S, Δ_G-proxy)` per layer.
pub fn distortion_curves(trace: &LayerTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ds = Vec::with_capacity(trace.layers.len());
    let mut dg = Vec::with_capacity(trace.layers.len());
    for h in &trace.layers {
        ds.push(semantic_distortion(&trace.raw_tokens, h)?);
        dg.push(positional_distortion_proxy(&trace.opt, h)?);
    }
    Ok((ds, dg))
}

/// All four per-layer curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCurves {
    pub hsic_positional: Vec<f64>,
    pub hsic_semantic: Vec<f64>,
    pub delta_s: Vec<f64>,
    pub delta_g_proxy: Vec<f64>,
}

impl LayerCurves {
    pub fn from_trace(trace: &LayerTrace) -> Result<Self> {
        let (hsic_positional, hsic_semantic) = hsic_curves(trace)?;
        let (delta_s, delta_g_proxy) = distortion_curves(trace)?;
        Ok(Self {
            hsic_positional,
            hsic_semantic,
            delta_s,
            delta_g_proxy,
        })
    }

    pub fn len(&self) -> usize {
        self.hsic_positional.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hsic_positional.is_empty()
    }

    /// Element-wise mean of equally long curve sets.
    pub fn mean(sets: &[LayerCurves]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::InvalidArgument("no curves to average".into()))?;
        let l = first.len();
        if sets.iter().any(|s| s.len() != l) {
            return Err(Error::InvalidArgument("curves of different lengths".into()));
        }
        let n = sets.len() as f64;
        let avg = |f: fn(&LayerCurves) -> &Vec<f64>| -> Vec<f64> {
            (0..l).map(|i| sets.iter().map(|s| f(s)[i]).sum::<f64>() / n).collect()
        };
        Ok(Self {
            hsic_positional: avg(|s| &s.hsic_positional),
            hsic_semantic: avg(|s| &s.hsic_semantic),
            delta_s: avg(|s| &s.delta_s),
            delta_g_proxy: avg(|s| &s.delta_g_proxy),
        })
    }

    /// `layer,hsic_positional,hsic_semantic,delta_s,delta_g_proxy`, 1-based layers.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,hsic_positional,hsic_semantic,delta_s,delta_g_proxy\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                self.hsic_positional[i],
                self.hsic_semantic[i],
                self.delta_s[i],
                self.delta_g_proxy[i]
            );
        }
        s
    }
}

/// Normalized synthetic probe windows of shape `lookback × n_vars`.
pub fn probe_windows(lookback: usize, n_vars: usize, count: usize, seed: u64) -> Result<Vec<Matrix>> {
    let stride = lookback.max(1);
    let ds = synthetic(&SynthConfig {
        n_vars,
        length: lookback + stride * count,
        seed,
        ..SynthConfig::default()
    })?;
    let norm = fit_norm(&ds.values)?;
    let values = norm.apply(&ds.values)?;
    Ok((0..count).map(|k| values.slice_rows(k * stride, k * stride + lookback)).collect())
}

/// Gaussian-noise windows, for comparisons against unstructured input.
pub fn noise_windows(lookback: usize, n_vars: usize, count: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| Matrix::from_fn(lookback, n_vars, |_, _| n.sample(&mut rng)))
        .collect()
}

/// Curves averaged over `probes`.
pub fn layer_curves(model: &Model, probes: &[Matrix], branch: usize) -> Result<LayerCurves> {
    let sets = probes
        .iter()
        .map(|x| capture(model, x, branch).and_then(|t| LayerCurves::from_trace(&t)))
        .collect::<Result<Vec<_>>>()?;
    LayerCurves::mean(&sets)
}

// ---- activation dumps ---------------------------------------------------

/// Writes `layer,<index>,rows,<r>,cols,<c>` followed by the rows.
pub fn write_dump(path: impl AsRef<Path>, index: usize, m: &Matrix) -> Result<()> {
    let mut s = format!("layer,{index},rows,{},cols,{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<(usize, Matrix)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    if header.len() != 6 || header[0] != "layer" || header[2] != "rows" || header[4] != "cols" {
        return Err(bad("header must be layer,<index>,rows,<n>,cols,<d>".into()));
    }
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("bad header field '{s}'")));
    let (index, rows, cols) = (num(header[1])?, num(header[3])?, num(header[5])?);
    let mut data = Vec::with_capacity(rows * cols);
    for (r, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(bad(format!("row {} has {} values, expected {cols}", r + 1, cells.len())));
        }
        for (c, cell) in cells.iter().enumerate() {
            data.push(cell.trim().parse::<f64>().map_err(|_| bad(format!("row {}, column {}: '{cell}'", r + 1, c + 1)))?);
        }
    }
    if data.len() != rows * cols {
        return Err(bad(format!("expected {rows} rows, found {}", data.len() / cols.max(1))));
    }
    Ok((index, Matrix::from_vec(rows, cols, data)?))
}

/// Builds a trace from dump files. Index 0 must hold the raw tokens `H⁰`;
/// indices 1..=L the layer outputs. Positions use sinusoidal encodings.
pub fn trace_from_dumps(paths: &[PathBuf]) -> Result<LayerTrace> {
    let mut entries = paths.iter().map(read_dump).collect::<Result<Vec<_>>>()?;
    entries.sort_by_key(|(i, _)| *i);
    for (k, (i, _)) in entries.iter().enumerate() {
        if *i != k {
            return Err(Error::Data(format!("dump indices must be 0..=L without gaps; missing {k}")));
        }
    }
    if entries.len() < 2 {
        return Err(Error::Data("need the layer-0 input dump and at least one layer".into()));
    }
    let mut it = entries.into_iter().map(|(_, m)| m);
    let raw_tokens = it.next().expect("checked length");
    let layers: Vec<Matrix> = it.collect();
    let (n_t, d) = (layers[0].rows(), layers[0].cols());
    if raw_tokens.rows() != n_t || layers.iter().any(|m| m.shape() != [n_t, d]) {
        return Err(Error::Data("all dumps must share the token count and layers the width".into()));
    }
    Ok(LayerTrace {
        opt: crate::topology::sinusoidal_pe(n_t, d)?,
        ost: ost_matrix(&raw_tokens),
        raw_tokens,
        layers,
    })
}
