//! CSV ingestion, chronological splits, sliding windows and synthetic series.
//!
//! Series are kept in raw scale. The model normalizes each input window
//! itself, so no dataset-level scaling is applied here.

use std::f64::consts::PI;
use std::fs::File;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub channel_names: Vec<String>,
    /// `[C, total]`
    pub values: Tensor,
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(channel_names: Vec<String>, values: Tensor, timestamps: Option<Vec<String>>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != channel_names.len() {
            return Err(Error::shape("series", values.shape(), &[channel_names.len()]));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.shape()[1] {
                return Err(Error::shape("series timestamps", values.shape(), &[ts.len()]));
            }
        }
        Ok(RawSeries {
            channel_names,
            values,
            timestamps,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trailing `n` time steps of every channel, `[C, n]`.
    pub fn tail(&self, n: usize) -> Result<Tensor> {
        let total = self.len();
        if n > total {
            return Err(Error::usage(format!("need {n} rows, series has {total}")));
        }
        let data = self
            .values
            .rows()
            .flat_map(|r| r[total - n..].iter().copied())
            .collect();
        Tensor::new(vec![self.channels(), n], data)
    }
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("io error kind");
    }
    format_err(path, e)
}

/// Reads a headed CSV. A first column named `date` is kept as opaque
/// timestamps; every other column is a channel. Data rows are numbered from 1
/// in error messages, header excluded.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let has_date = header.first().is_some_and(|h| h.eq_ignore_ascii_case("date"));
    let names: Vec<String> = header[usize::from(has_date)..].to_vec();
    if names.is_empty() {
        return Err(format_err(path, "no channel columns"));
    }
    let mut columns = vec![Vec::new(); names.len()];
    let mut stamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_err(path, e))?;
        let mut cells = record.iter();
        if has_date {
            stamps.push(cells.next().unwrap_or_default().to_string());
        }
        for ((cell, name), col) in cells.zip(&names).zip(&mut columns) {
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            match value {
                Some(v) => col.push(v),
                None => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row,
                        column: name.clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
    }
    let total = columns[0].len();
    let values = Tensor::new(vec![names.len(), total], columns.concat())?;
    RawSeries::new(names, values, has_date.then_some(stamps))
}

/// Writes `[C, T]` values as a headed CSV, one row per time step.
pub fn write_csv(path: &Path, names: &[String], timestamps: Option<&[String]>, values: &Tensor) -> Result<()> {
    let (c, t) = match *values.shape() {
        [c, t] if c == names.len() => (c, t),
        ref s => return Err(Error::shape("write_csv", s, &[names.len()])),
    };
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<&str> = Vec::with_capacity(c + 1);
    if timestamps.is_some() {
        header.push("date");
    }
    header.extend(names.iter().map(String::as_str));
    writer.write_record(&header).map_err(|e| csv_err(path, e))?;
    for step in 0..t {
        let mut record: Vec<String> = Vec::with_capacity(c + 1);
        if let Some(ts) = timestamps {
            record.push(ts.get(step).cloned().unwrap_or_default());
        }
        record.extend((0..c).map(|ch| format!("{:?}", values.get(&[ch, step]))));
        writer.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// 0.6 / 0.2 / 0.2.
    pub const ETT: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || self.train <= 0.0 {
            return Err(Error::Config(format!(
                "split ratios must lie in [0, 1] with a positive train share, got {all:?}"
            )));
        }
        if all.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config(format!("split ratios {all:?} sum to more than 1")));
        }
        Ok(())
    }
}

/// Index ranges into the raw series. `None` marks a split with a zero ratio.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Option<Range<usize>>,
    pub test: Option<Range<usize>>,
}

/// Contiguous train / val / test ranges of `floor(ratio * total)` points each.
/// Val and test start `seq_len - 1` points early so their first window's input
/// reaches back into the previous split while every target stays inside.
/// When the ratios sum to 1 the test range ends at `total`.
pub fn chronological_split(
    total: usize,
    ratios: SplitRatios,
    seq_len: usize,
    pred_len: usize,
) -> Result<SplitRanges> {
    ratios.validate()?;
    let need = seq_len + pred_len;
    if total < need {
        return Err(Error::usage(format!(
            "series of length {total} is shorter than seq_len + pred_len = {need}"
        )));
    }
    let count = |r: f64| (r * total as f64 + 1e-9).floor() as usize;
    let n_train = count(ratios.train);
    let n_val = count(ratios.val);
    let sum = ratios.train + ratios.val + ratios.test;
    let test_end = if (sum - 1.0).abs() < 1e-9 {
        total
    } else {
        (n_train + n_val + count(ratios.test)).min(total)
    };
    let back = seq_len - 1;
    let train = 0..n_train;
    let val = (ratios.val > 0.0).then(|| n_train.saturating_sub(back)..n_train + n_val);
    let test = (ratios.test > 0.0).then(|| (n_train + n_val).saturating_sub(back)..test_end);
    for (name, range) in [("train", Some(&train)), ("val", val.as_ref()), ("test", test.as_ref())] {
        if let Some(r) = range {
            if r.len() < need {
                return Err(Error::usage(format!(
                    "{name} split {r:?} has {} points, fewer than seq_len + pred_len = {need}",
                    r.len()
                )));
            }
        }
    }
    Ok(SplitRanges { train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stride-1 windows over one range of a series.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    values: Arc<Tensor>,
    starts: Vec<usize>,
    seq_len: usize,
    pred_len: usize,
    pub split: Split,
}

/// One window per start `t` in `range` with input `[t, t+L)` and target `[t+L, t+L+H)`.
pub fn make_windows(
    rs: &RawSeries,
    range: Range<usize>,
    seq_len: usize,
    pred_len: usize,
    split: Split,
) -> Result<WindowDataset> {
    let need = seq_len + pred_len;
    if range.end > rs.len() || range.len() < need {
        return Err(Error::usage(format!(
            "range {range:?} cannot hold a window of {need} points in a series of length {}",
            rs.len()
        )));
    }
    Ok(WindowDataset {
        values: Arc::new(rs.values.clone()),
        starts: (range.start..=range.end - need).collect(),
        seq_len,
        pred_len,
        split,
    })
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn pred_len(&self) -> usize {
        self.pred_len
    }

    /// Series index of window `i`'s first input point.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    /// Inputs `[B, C, L]` and targets `[B, C, H]` for the given window indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let c = self.channels();
        let (l, h) = (self.seq_len, self.pred_len);
        let mut x = Vec::with_capacity(indices.len() * c * l);
        let mut y = Vec::with_capacity(indices.len() * c * h);
        for &i in indices {
            let s = self.starts[i];
            for row in self.values.rows() {
                x.extend_from_slice(&row[s..s + l]);
                y.extend_from_slice(&row[s + l..s + l + h]);
            }
        }
        let b = indices.len();
        (
            Tensor::from_parts(vec![b, c, l], x),
            Tensor::from_parts(vec![b, c, h], y),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub channels: usize,
    pub total: usize,
    pub seed: u64,
    pub regime_period: usize,
    pub trend_scale: f64,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            channels: 4,
            total: 4000,
            seed: 0,
            regime_period: 500,
            trend_scale: 1.0,
            noise_std: 0.1,
        }
    }
}

/// Shared periodic driver with periods 24 and 60; exactly periodic in `t`.
fn driver(t: usize) -> f64 {
    (2.0 * PI * (t % 24) as f64 / 24.0).sin() + 0.5 * (2.0 * PI * (t % 60) as f64 / 60.0).sin()
}

/// Deterministic synthetic series:
///
/// ```text
/// x_c(t) = a_c d(t) s_c(t) + trend_scale * b_c * t / 100 + noise
/// ```
///
/// with amplitudes `a_c` in [0.5, 2], slopes `b_c` in [-1, 1], and `s_c(t) = 1`
/// for even channels and `+-1` for odd ones, flipping every `regime_period`
/// steps, so the sign of the correlation between neighbouring channels
/// reverses from regime to regime.
pub fn synth_generate(spec: &SynthSpec) -> Result<RawSeries> {
    if spec.channels == 0 || spec.regime_period == 0 || spec.total < spec.regime_period {
        return Err(Error::Config(format!(
            "synthetic spec needs channels >= 1 and total >= regime_period >= 1, got {spec:?}"
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite() && spec.trend_scale.is_finite()) {
        return Err(Error::Config(format!("invalid noise or trend scale in {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amp: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.5..2.0)).collect();
    let slope: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.channels * spec.total);
    for c in 0..spec.channels {
        for t in 0..spec.total {
            let regime = if c % 2 == 1 && (t / spec.regime_period) % 2 == 1 {
                -1.0
            } else {
                1.0
            };
            let mut v = amp[c] * driver(t) * regime + spec.trend_scale * slope[c] * t as f64 / 100.0;
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v);
        }
    }
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(names, Tensor::new(vec![spec.channels, spec.total], data)?, None)
}
