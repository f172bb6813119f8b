//! Dataset ingestion, chronological splits and sliding windows.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tokenizer::{fit_norm, NormStats};

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub values: Matrix,
    pub names: Vec<String>,
    pub frequency: Option<String>,
}

impl SeriesDataset {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.cols()
    }
}

/// Reads a CSV with a header row. A leading `date` column is dropped; every
/// other cell must parse as a real.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Data(format!("{}: empty header", path.display())));
    }
    let skip = usize::from(header.get(0).is_some_and(|h| h.eq_ignore_ascii_case("date")));
    let names: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    let width = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = r + 2;
        if rec.len() != width {
            return Err(Error::Data(format!(
                "{}: row {line} has {} columns, header has {width}",
                path.display(),
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {line}, column {} ('{}'): cannot parse '{cell}' as a number",
                    path.display(),
                    c + 1,
                    header.get(c).unwrap_or("")
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(SeriesDataset {
        values: Matrix::from_vec(rows, names.len(), data)?,
        names,
        frequency: None,
    })
}

/// Writes `date,<names...>`, with the row index in the date column.
pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![i.to_string()];
        rec.extend(ds.values.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Ratios(f64, f64, f64),
    Counts(usize, usize, usize),
}

/// A contiguous row range `[start, end)` of the dataset. `core_start` marks
/// where the split itself begins; rows before it are left context only.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    pub start: usize,
    pub core_start: usize,
    pub end: usize,
    pub data: Matrix,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Rows belonging to the split proper, excluding left context.
    pub fn core_len(&self) -> usize {
        self.end - self.core_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SplitView,
    pub val: SplitView,
    pub test: SplitView,
    pub train_end: usize,
    pub val_end: usize,
    /// Fitted on the training rows only.
    pub norm: NormStats,
}

impl Splits {
    /// Normalized copy of a view's rows.
    pub fn normalized(&self, view: &SplitView) -> Result<Matrix> {
        self.norm.apply(&view.data)
    }
}

fn view(ds: &SeriesDataset, start: usize, core_start: usize, end: usize) -> SplitView {
    SplitView {
        start,
        core_start,
        end,
        data: ds.values.slice_rows(start, end),
    }
}

/// Chronological train/val/test split. With `overhang` the val and test views
/// start `lookback` rows early so their first windows have full context.
pub fn split(ds: &SeriesDataset, spec: SplitSpec, lookback: usize, overhang: bool) -> Result<Splits> {
    let len = ds.len();
    let (n_train, n_val, n_test) = match spec {
        SplitSpec::Counts(a, b, c) => (a, b, c),
        SplitSpec::Ratios(a, b, c) => {
            if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c > 1.0 + 1e-9 {
                return Err(Error::Data(format!("invalid split ratios ({a}, {b}, {c})")));
            }
            let n_train = (a * len as f64).floor() as usize;
            let n_val = (b * len as f64).floor() as usize;
            let n_test = if (a + b + c - 1.0).abs() < 1e-9 {
                len - n_train - n_val
            } else {
                (c * len as f64).floor() as usize
            };
            (n_train, n_val, n_test)
        }
    };
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "every split must be non-empty, got ({n_train}, {n_val}, {n_test})"
        )));
    }
    if n_train + n_val + n_test > len {
        return Err(Error::Data(format!(
            "split sizes ({n_train}, {n_val}, {n_test}) exceed dataset length {len}"
        )));
    }
    let train_end = n_train;
    let val_end = n_train + n_val;
    let test_end = val_end + n_test;
    let ctx = if overhang { lookback } else { 0 };
    let train = view(ds, 0, 0, train_end);
    let norm = fit_norm(&train.data)?;
    Ok(Splits {
        val: view(ds, train_end.saturating_sub(ctx), train_end, val_end),
        test: view(ds, val_end.saturating_sub(ctx), val_end, test_end),
        train,
        train_end,
        val_end,
        norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: Matrix,
    pub y: Matrix,
    /// Index of the first input row, in dataset coordinates.
    pub start: usize,
}

/// Number of windows a series of `len` rows yields.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if len < lookback + horizon || stride == 0 {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

/// Sliding `(x, y)` windows over a matrix, ordered by start index.
/// `offset` translates local row indices to dataset coordinates.
pub struct Windows<'a> {
    data: &'a Matrix,
    offset: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
    next: usize,
    count: usize,
}

impl Iterator for Windows<'_> {
    type Item = WindowSample;

    fn next(&mut self) -> Option<WindowSample> {
        if self.next >= self.count {
            return None;
        }
        let s = self.next * self.stride;
        self.next += 1;
        Some(WindowSample {
            x: self.data.slice_rows(s, s + self.lookback),
            y: self.data.slice_rows(s + self.lookback, s + self.lookback + self.horizon),
            start: self.offset + s,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.count - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Windows<'_> {}

pub fn windows(data: &Matrix, offset: usize, lookback: usize, horizon: usize, stride: usize) -> Windows<'_> {
    let count = window_count(data.rows(), lookback, horizon, stride);
    if count == 0 {
        log::warn!(
            "series of {} rows is too short for lookback {lookback} + horizon {horizon}; no windows",
            data.rows()
        );
    }
    Windows {
        data,
        offset,
        lookback,
        horizon,
        stride,
        next: 0,
        count,
    }
}

/// Parameters of the seeded sum-of-sinusoids generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_vars: usize,
    pub length: usize,
    /// Shared periods (in steps); each variable mixes all of them.
    pub periods: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_vars: 7,
            length: 4000,
            periods: vec![24.0, 48.0, 168.0],
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Per variable: `Σ_k a_k sin(2πt / P_k + φ_k) + ε`, with seeded amplitudes,
/// phases and Gaussian noise.
pub fn synthetic(cfg: &SynthConfig) -> Result<SeriesDataset> {
    if cfg.n_vars == 0 || cfg.length == 0 || cfg.periods.is_empty() {
        return Err(Error::Config("synthetic data needs variables, length and periods".into()));
    }
    if cfg.periods.iter().any(|&p| p <= 0.0) || cfg.noise_std < 0.0 {
        return Err(Error::Config("periods must be > 0 and noise_std >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let comps: Vec<Vec<(f64, f64)>> = (0..cfg.n_vars)
        .map(|_| {
            cfg.periods
                .iter()
                .map(|_| (rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let mut values = Matrix::zeros(cfg.length, cfg.n_vars);
    for t in 0..cfg.length {
        for (v, comp) in comps.iter().enumerate() {
            let mut s = 0.0;
            for (&(amp, phase), &p) in comp.iter().zip(&cfg.periods) {
                s += amp * (2.0 * PI * t as f64 / p + phase).sin();
            }
            values.set(t, v, s + noise.sample(&mut rng));
        }
    }
    Ok(SeriesDataset {
        values,
        names: (0..cfg.n_vars).map(|v| format!("v{v}")).collect(),
        frequency: Some("synthetic".into()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn seq(len: usize, n: usize) -> SeriesDataset {
        SeriesDataset {
            values: Matrix::from_fn(len, n, |i, j| (i * 10 + j) as f64),
            names: (0..n).map(|j| format!("c{j}")).collect(),
            frequency: None,
        }
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_plain_and_dated_files() {
        let f = write("a,b\n1,2\n3,4\n5,6\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.values.shape(), [3, 2]);
        assert_eq!(ds.names, vec!["a", "b"]);

        let f = write("date,x\n2016-07-01 00:00:00,1.5\n2016-07-01 01:00:00,2.5\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.values.data(), &[1.5, 2.5]);
    }

    #[test]
    fn ett_header_has_seven_variables() {
        let f = write("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n2016-07-01 00:00:00,5.8,2.0,1.4,0.4,4.2,1.3,30.5\n");
        assert_eq!(load_csv(f.path()).unwrap().n_vars(), 7);
    }

    #[test]
    fn bad_cells_and_ragged_rows_are_reported() {
        let f = write("a,b\n1,2\n3,x\n");
        let msg = load_csv(f.path()).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("column 2"), "{msg}");
        let f = write("a,b\n1,2\n3\n");
        let msg = load_csv(f.path()).unwrap_err().to_string();
        assert!(msg.contains("row 3"), "{msg}");
    }

    #[test]
    fn csv_round_trip() {
        let ds = synthetic(&SynthConfig { length: 20, n_vars: 2, ..Default::default() }).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let back = load_csv(f.path()).unwrap();
        assert_eq!(back.values, ds.values);
    }

    #[test]
    fn ratio_split() {
        let s = split(&seq(100, 1), SplitSpec::Ratios(0.7, 0.1, 0.2), 5, false).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
    }

    #[test]
    fn count_split_and_overhang() {
        let s = split(&seq(100, 1), SplitSpec::Counts(60, 20, 20), 5, true).unwrap();
        assert_eq!((s.train.core_len(), s.val.core_len(), s.test.core_len()), (60, 20, 20));
        assert_eq!((s.val.start, s.test.start), (55, 75));
        assert_eq!(s.val.len(), 25);
    }

    #[test]
    fn degenerate_splits_error() {
        assert!(split(&seq(100, 1), SplitSpec::Ratios(0.7, 0.0, 0.3), 5, true).is_err());
        assert!(split(&seq(100, 1), SplitSpec::Counts(60, 30, 20), 5, true).is_err());
    }

    #[test]
    fn norm_stats_come_from_train_rows_only() {
        let ds = seq(10, 1);
        let s = split(&ds, SplitSpec::Counts(4, 3, 3), 2, true).unwrap();
        // rows 0..4 hold 0,10,20,30
        assert_eq!(s.norm.mean, vec![15.0]);
    }

    #[test]
    fn window_counting() {
        let m = Matrix::from_fn(5, 1, |i, _| i as f64);
        let w: Vec<_> = windows(&m, 0, 2, 1, 1).collect();
        assert_eq!(w.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(w[1].x.data(), &[1.0, 2.0]);
        assert_eq!(w[1].y.data(), &[3.0]);
        let m3 = Matrix::from_fn(3, 1, |i, _| i as f64);
        assert_eq!(windows(&m3, 0, 2, 1, 1).count(), 1);
        assert_eq!(windows(&m3, 0, 3, 1, 1).count(), 0);
        assert_eq!(window_count(10, 2, 2, 3), 3);
    }

    #[test]
    fn ett_train_view_window_count() {
        // 8545 training rows, T = S = 96: (8545 - 192) / 1 + 1
        let m = Matrix::zeros(8545, 1);
        assert_eq!(windows(&m, 0, 96, 96, 1).len(), 8354);
    }

    #[test]
    fn test_windows_do_not_leak() {
        let ds = seq(200, 2);
        let (t, s_len) = (12, 6);
        let s = split(&ds, SplitSpec::Ratios(0.6, 0.2, 0.2), t, true).unwrap();
        for w in windows(&s.test.data, s.test.start, t, s_len, 1) {
            assert!(w.start + t >= s.val_end, "target must lie in the test split");
            assert!(w.start >= s.val_end - t);
            // x and y are disjoint and consecutive
            assert_eq!(w.x.get(t - 1, 0) + 10.0, w.y.get(0, 0));
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let c = SynthConfig { length: 50, ..Default::default() };
        assert_eq!(synthetic(&c).unwrap(), synthetic(&c).unwrap());
        let d = SynthConfig { seed: 1, ..c };
        assert_ne!(synthetic(&d).unwrap().values, synthetic(&SynthConfig { length: 50, ..Default::default() }).unwrap().values);
    }
}
