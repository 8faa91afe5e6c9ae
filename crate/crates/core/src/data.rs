//! Series tables, standardization, chronological splits, sliding windows and
//! synthetic series.

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// A multivariate series: `T` rows of `D` variates plus an opaque label column.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<String>,
    pub names: Vec<String>,
    /// Row-major `[T, D]`.
    pub values: Vec<f64>,
}

impl SeriesTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_variates(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.n_variates();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.n_variates() + v]
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(t, v)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![self.timestamps[t].clone()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a comma-separated file whose first column is a label and whose
/// remaining columns are numeric. Rows and columns in errors are 1-based,
/// counting the header as row 1.
pub fn load_csv(path: &Path) -> Result<SeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        timestamps.push(rec.get(0).unwrap_or_default().to_string());
        for col in 1..=names.len() {
            let cell = rec.get(col).map(str::trim).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                return Err(Error::MissingValue { row, col: col + 1 });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: col + 1,
                value: cell.to_string(),
            })?;
            values.push(v);
        }
    }
    Ok(SeriesTable {
        timestamps,
        names,
        values,
    })
}

/// Per-variate mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Row range the statistics were fitted on.
    pub fitted_on: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleDirection {
    Forward,
    Inverse,
}

pub fn fit_scaler(table: &SeriesTable, train: Range<usize>) -> Result<ScalerStats> {
    if train.is_empty() || train.end > table.len() {
        return Err(Error::EmptySplit("scaler fitting range"));
    }
    let n = train.len() as f64;
    let d = table.n_variates();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for v in 0..d {
        let m = train.clone().map(|t| table.get(t, v)).sum::<f64>() / n;
        let var = train.clone().map(|t| (table.get(t, v) - m).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::ZeroVariance(v));
        }
        mean[v] = m;
        std[v] = var.sqrt();
    }
    Ok(ScalerStats {
        mean,
        std,
        fitted_on: train,
    })
}

impl ScalerStats {
    pub fn n_variates(&self) -> usize {
        self.mean.len()
    }

    /// Scales a row-major array whose last axis holds the variates.
    pub fn scale(&self, values: &[f64], direction: ScaleDirection) -> Vec<f64> {
        let d = self.n_variates();
        values
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let v = i % d;
                match direction {
                    ScaleDirection::Forward => (x - self.mean[v]) / self.std[v],
                    ScaleDirection::Inverse => x * self.std[v] + self.mean[v],
                }
            })
            .collect()
    }

    pub fn scale_table(&self, table: &SeriesTable, direction: ScaleDirection) -> SeriesTable {
        SeriesTable {
            timestamps: table.timestamps.clone(),
            names: table.names.clone(),
            values: self.scale(&table.values, direction),
        }
    }

    pub fn scale_tensor(&self, t: &Tensor, direction: ScaleDirection) -> Tensor {
        Tensor::new(t.shape().to_vec(), self.scale(t.data(), direction))
            .expect("shape preserved")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_len: usize,
    pub pred_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(input_len: usize, pred_len: usize) -> Self {
        Self {
            input_len,
            pred_len,
            stride: 1,
        }
    }

    pub fn span(&self) -> usize {
        self.input_len + self.pred_len
    }
}

/// One supervised sample: `x` is `[I, D]`, `y` the following `[O, D]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// First row of `x` in the source table.
    pub start: usize,
    pub x: Tensor,
    pub y: Tensor,
}

pub fn window_count(len: usize, spec: &WindowSpec) -> usize {
    if len < spec.span() {
        0
    } else {
        (len - spec.span()) / spec.stride + 1
    }
}

pub fn make_windows(table: &SeriesTable, spec: &WindowSpec, range: Range<usize>) -> Result<Vec<Window>> {
    if spec.input_len == 0 || spec.pred_len == 0 || spec.stride == 0 {
        return Err(Error::InvalidConfig("window lengths and stride must be >= 1".into()));
    }
    if range.len() < spec.span() || range.end > table.len() {
        return Err(Error::RangeTooShort {
            len: range.len(),
            needed: spec.span(),
        });
    }
    let d = table.n_variates();
    let rows = |from: usize, n: usize| -> Tensor {
        Tensor::new(vec![n, d], table.values[from * d..(from + n) * d].to_vec())
            .expect("window shape")
    };
    Ok((0..window_count(range.len(), spec))
        .map(|k| {
            let start = range.start + k * spec.stride;
            Window {
                start,
                x: rows(start, spec.input_len),
                y: rows(start + spec.input_len, spec.pred_len),
            }
        })
        .collect())
}

/// Stacks windows into batch tensors `[B, I, D]` and `[B, O, D]`.
pub fn stack_windows<'a>(windows: impl IntoIterator<Item = &'a Window>) -> (Tensor, Tensor) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0;
    let mut xshape = vec![];
    let mut yshape = vec![];
    for w in windows {
        xs.extend_from_slice(w.x.data());
        ys.extend_from_slice(w.y.data());
        xshape = w.x.shape().to_vec();
        yshape = w.y.shape().to_vec();
        n += 1;
    }
    assert!(n > 0, "stack_windows on empty input");
    xshape.insert(0, n);
    yshape.insert(0, n);
    (
        Tensor::new(xshape, xs).expect("x batch"),
        Tensor::new(yshape, ys).expect("y batch"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous train/val/test ranges in time order. Boundaries are rounded to
/// the nearest row.
pub fn chrono_split(len: usize, split: &SplitSpec) -> Result<Splits> {
    let fracs = [split.train, split.val, split.test];
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions must lie in [0, 1] and sum to 1, got {fracs:?}"
        )));
    }
    let train_end = (len as f64 * split.train).round() as usize;
    let val_end = ((len as f64 * (split.train + split.val)).round() as usize).min(len);
    let s = Splits {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..len,
    };
    for (name, r) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        if r.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Sum of sines with periods 24, 12 and 8 (amplitudes 1, 0.5, 0.25) and a
    /// per-variate phase `2π d / D`, plus Gaussian noise.
    SineMix,
    /// Linear trend `0.002 t` plus a period-24 sine and noise.
    TrendSine,
    /// Cumulative sum of Gaussian steps with std `noise_std`.
    RandomWalk,
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sine_mix" => Ok(SynthKind::SineMix),
            "trend_sine" => Ok(SynthKind::TrendSine),
            "random_walk" => Ok(SynthKind::RandomWalk),
            _ => Err(format!("unknown series kind {s:?}")),
        }
    }
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::SineMix => "sine_mix",
            SynthKind::TrendSine => "trend_sine",
            SynthKind::RandomWalk => "random_walk",
        }
    }
}

pub const SINE_MIX_PERIODS: [f64; 3] = [24.0, 12.0, 8.0];
pub const SINE_MIX_AMPLITUDES: [f64; 3] = [1.0, 0.5, 0.25];

pub fn synth_series(kind: SynthKind, len: usize, n_variates: usize, noise_std: f64, seed: u64) -> SeriesTable {
    let mut rng = SeededRng::new(seed);
    let tau = std::f64::consts::TAU;
    let mut values = vec![0.0; len * n_variates];
    let mut walk = vec![0.0; n_variates];
    for t in 0..len {
        for d in 0..n_variates {
            let phase = tau * d as f64 / n_variates as f64;
            let tf = t as f64;
            let noise = noise_std * rng.normal();
            values[t * n_variates + d] = match kind {
                SynthKind::SineMix => {
                    SINE_MIX_PERIODS
                        .iter()
                        .zip(SINE_MIX_AMPLITUDES)
                        .map(|(p, a)| a * (tau * tf / p + phase).sin())
                        .sum::<f64>()
                        + noise
                }
                SynthKind::TrendSine => 0.002 * tf + (tau * tf / 24.0 + phase).sin() + noise,
                SynthKind::RandomWalk => {
                    walk[d] += noise;
                    walk[d]
                }
            };
        }
    }
    SeriesTable {
        timestamps: (0..len).map(|t| t.to_string()).collect(),
        names: (0..n_variates).map(|d| format!("v{d}")).collect(),
        values,
    }
}

/// A table standardized with train-split statistics and cut into windows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scaler: ScalerStats,
    pub splits: Splits,
    pub window: WindowSpec,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

impl Prepared {
    pub fn new(table: &SeriesTable, window: WindowSpec, split: &SplitSpec) -> Result<Self> {
        let splits = chrono_split(table.len(), split)?;
        let scaler = fit_scaler(table, splits.train.clone())?;
        let scaled = scaler.scale_table(table, ScaleDirection::Forward);
        Ok(Self {
            train: make_windows(&scaled, &window, splits.train.clone())?,
            val: make_windows(&scaled, &window, splits.val.clone())?,
            test: make_windows(&scaled, &window, splits.test.clone())?,
            scaler,
            splits,
            window,
        })
    }
}
