//! Raw series ingestion, channel selection, normalization and windowing.
//!
//! Channels are ranked by the variance of their first differences over a fit
//! range (the training portion), normalized with statistics from that same
//! range, and cut into `(x, z, y)` windows.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{F2aError, Result};

/// Standard-deviation floor used during normalization.
pub const EPS_NORM: f64 = 1e-8;

/// Width of the precursor ramp written by [`gen_synthetic`].
pub const RAMP_LEN: usize = 4;
/// Shared sinusoid period of the synthetic generator, in timesteps.
pub const SYNTH_PERIOD: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub name: String,
    /// T x C_raw
    pub values: Array2<f64>,
    pub labels: Vec<u8>,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, values: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        let (t, c) = values.dim();
        if t == 0 || c == 0 {
            return Err(F2aError::InvalidArgument {
                arg: "values",
                reason: format!("series must be non-empty, got {t}x{c}"),
            });
        }
        if labels.len() != t {
            return Err(F2aError::shape("labels", t, labels.len()));
        }
        if let Some(pos) = labels.iter().position(|&l| l > 1) {
            return Err(F2aError::InvalidArgument {
                arg: "labels",
                reason: format!("label at t={pos} is {}, expected 0 or 1", labels[pos]),
            });
        }
        Ok(RawSeries {
            name: name.into(),
            values,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Which raw channels feed the model, plus their normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    pub selected: Vec<usize>,
    pub pad_count: usize,
    /// Length C; padded slots hold mean 0, std 1.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelPlan {
    pub fn channels(&self) -> usize {
        self.selected.len() + self.pad_count
    }

    /// Selects and z-scores one raw row into a C-length row.
    pub fn normalize_row(&self, raw: &[f64], out: &mut [f64]) {
        for (slot, o) in out.iter_mut().enumerate() {
            *o = match self.selected.get(slot) {
                Some(&src) => (raw[src] - self.mean[slot]) / self.std[slot],
                None => 0.0,
            };
        }
    }

    /// Inverse of [`normalize_row`](Self::normalize_row) on the selected slots.
    pub fn denormalize(&self, normalized: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((normalized.nrows(), self.selected.len()));
        for ((t, slot), v) in out.indexed_iter_mut() {
            *v = normalized[[t, slot]] * self.std[slot] + self.mean[slot];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub series: String,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// L x C context.
    pub x: Array2<f64>,
    /// H x C true horizon.
    pub z: Array2<f64>,
    pub y: Vec<u8>,
    pub origin: Origin,
}

fn population_stats(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = vals.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Ranks channels by first-difference variance over `fit_range` and keeps the top `c_target`.
pub fn select_channels(series: &RawSeries, c_target: usize, fit_range: Range<usize>) -> Result<ChannelPlan> {
    if c_target == 0 {
        return Err(F2aError::InvalidArgument {
            arg: "c_target",
            reason: "must be at least 1".into(),
        });
    }
    if fit_range.is_empty() || fit_range.end > series.len() {
        return Err(F2aError::InvalidArgument {
            arg: "fit_range",
            reason: format!(
                "{fit_range:?} must be non-empty and within 0..{}",
                series.len()
            ),
        });
    }
    let fit = series.values.slice(s![fit_range.clone(), ..]);

    let mut ranked: Vec<(usize, f64)> = (0..series.channels())
        .map(|c| {
            let col = fit.column(c);
            let diffs = col.windows(2).into_iter().map(|w| w[1] - w[0]);
            (c, population_stats(diffs).1)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let selected: Vec<usize> = ranked.iter().take(c_target).map(|&(c, _)| c).collect();
    let pad_count = c_target - selected.len();

    let mut mean = vec![0.0; c_target];
    let mut std = vec![1.0; c_target];
    for (slot, &c) in selected.iter().enumerate() {
        let (m, var) = population_stats(fit.column(c).iter().copied());
        mean[slot] = m;
        std[slot] = var.sqrt().max(EPS_NORM);
    }
    Ok(ChannelPlan {
        selected,
        pad_count,
        mean,
        std,
    })
}

/// Window start offsets `0, stride, ...` whose context and horizon fit inside `t` steps.
pub fn window_starts(t: usize, l: usize, h: usize, stride: usize) -> Vec<usize> {
    if stride == 0 || l + h > t {
        return Vec::new();
    }
    (0..=t - l - h).step_by(stride).collect()
}

pub fn make_windows(
    series: &RawSeries,
    plan: &ChannelPlan,
    l: usize,
    h: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(F2aError::InvalidArgument {
            arg: "stride",
            reason: "must be at least 1".into(),
        });
    }
    if l == 0 || h == 0 {
        return Err(F2aError::InvalidArgument {
            arg: "L/H",
            reason: format!("context and horizon must be positive, got L={l}, H={h}"),
        });
    }
    if l + h > series.len() {
        return Err(F2aError::SeriesTooShort {
            series: series.name.clone(),
            needed: l + h,
            available: series.len(),
        });
    }
    if let Some(&bad) = plan.selected.iter().find(|&&c| c >= series.channels()) {
        return Err(F2aError::InvalidArgument {
            arg: "plan",
            reason: format!("channel {bad} not present in `{}`", series.name),
        });
    }

    let c = plan.channels();
    let raw = series.values.as_standard_layout();
    let mut out = Vec::new();
    for start in window_starts(series.len(), l, h, stride) {
        let mut slab = Array2::zeros((l + h, c));
        for (i, mut row) in slab.rows_mut().into_iter().enumerate() {
            let src = raw.row(start + i);
            plan.normalize_row(src.as_slice().unwrap(), row.as_slice_mut().unwrap());
        }
        out.push(WindowSample {
            x: slab.slice(s![..l, ..]).to_owned(),
            z: slab.slice(s![l.., ..]).to_owned(),
            y: series.labels[start + l..start + l + h].to_vec(),
            origin: Origin {
                series: series.name.clone(),
                start,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_series: usize,
    pub length: usize,
    pub channels: usize,
    pub anomaly_rate: f64,
    pub precursor_lead: usize,
    /// In multiples of the base signal's standard deviation.
    pub spike_magnitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_series: 1,
            length: 40_000,
            channels: 4,
            anomaly_rate: 0.02,
            precursor_lead: 8,
            spike_magnitude: 6.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(F2aError::Config(reason));
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate < 0.5) {
            return bad(format!("synth.anomaly_rate = {} must lie in (0, 0.5)", self.anomaly_rate));
        }
        if self.channels < 2 {
            return bad(format!("synth.channels = {} must be at least 2", self.channels));
        }
        if self.num_series == 0 {
            return bad("synth.num_series must be at least 1".into());
        }
        if self.precursor_lead == 0 {
            return bad("synth.precursor_lead must be at least 1".into());
        }
        if self.length <= self.precursor_lead + RAMP_LEN {
            return bad(format!(
                "synth.length = {} leaves no room for precursor_lead {} plus ramp",
                self.length, self.precursor_lead
            ));
        }
        if !(self.spike_magnitude.is_finite() && self.spike_magnitude > 0.0) {
            return bad(format!("synth.spike_magnitude = {} must be positive", self.spike_magnitude));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("synth.noise_std = {} must be non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// Sinusoids plus noise, with channel-0 spikes each announced by a channel-1
/// ramp that peaks exactly `precursor_lead` steps earlier. Only the phase is
/// drawn per channel.
pub fn gen_synthetic(config: &SynthConfig) -> Result<RawSeries> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (t_len, c) = (config.length, config.channels);

    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| F2aError::Config(e.to_string()))?;
    let mut values = Array2::zeros((t_len, c));
    for ch in 0..c {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for t in 0..t_len {
            let base = (std::f64::consts::TAU * t as f64 / SYNTH_PERIOD + phase).sin();
            let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values[[t, ch]] = base + eps;
        }
    }

    // Unit-amplitude sinusoid has variance 1/2.
    let signal_std = (0.5 + config.noise_std * config.noise_std).sqrt();
    let bump = config.spike_magnitude * signal_std;
    let first = config.precursor_lead + RAMP_LEN - 1;
    let mut labels = vec![0u8; t_len];
    for t in first..t_len {
        if rng.gen::<f64>() < config.anomaly_rate {
            labels[t] = 1;
            values[[t, 0]] += bump;
            let peak = t - config.precursor_lead;
            for i in 0..RAMP_LEN {
                values[[peak - i, 1]] += bump * (RAMP_LEN - i) as f64 / RAMP_LEN as f64;
            }
        }
    }
    RawSeries::new(format!("synth_{}", config.seed), values, labels)
}

pub fn read_csv(path: &Path) -> Result<RawSeries> {
    let csv_err = |detail: String| F2aError::Csv {
        path: path.to_path_buf(),
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let ncols = headers.len();
    if ncols < 2 || !headers[ncols - 1].eq_ignore_ascii_case("label") {
        return Err(csv_err(format!(
            "expected channel columns followed by a final `Label` column, got header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let c = ncols - 1;
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let row = i + 2;
        for j in 0..c {
            let v: f64 = rec[j]
                .parse()
                .map_err(|_| csv_err(format!("row {row}, column `{}`: bad number {:?}", &headers[j], &rec[j])))?;
            flat.push(v);
        }
        let label = match rec[c].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(csv_err(format!("row {row}: label {other:?} is not 0 or 1"))),
        };
        labels.push(label);
    }
    let t = labels.len();
    let values = Array2::from_shape_vec((t, c), flat).map_err(|e| csv_err(e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RawSeries::new(name, values, labels).map_err(|e| csv_err(e.to_string()))
}

pub fn write_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    for c in 0..series.channels() {
        out.push_str(&format!("ch{c},"));
    }
    out.push_str("Label\n");
    for (row, label) in series.values.rows().into_iter().zip(&series.labels) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| F2aError::io(dir, e))?;
    }
    crate::binio::atomic_write(path, out.as_bytes())
}
