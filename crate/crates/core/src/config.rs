//! Run configuration: `key = value` lines with `#` comments.
//!
//! Every key is checked against a fixed schema before any work starts;
//! unknown keys and malformed values are rejected with the source and the
//! expected form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dataset::{SynthConfig, RAMP_LEN};
use crate::error::{F2aError, Result};
use crate::loss::{ForecastTarget, LossConfig};
use crate::model::ModelDims;
use crate::optim::TrainConfig;

pub const DESK_PRESET: &str = include_str!("../../../configs/desk.cfg");
pub const FULL_PRESET: &str = include_str!("../../../configs/full.cfg");

#[derive(Debug, Clone, Copy)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    UintOrAuto,
    Choice(&'static [&'static str]),
    UintList,
}

impl Kind {
    fn describe(&self) -> String {
        match self {
            Kind::Uint => "a non-negative integer".into(),
            Kind::Float => "a finite number".into(),
            Kind::Bool => "`true` or `false`".into(),
            Kind::Text => "text".into(),
            Kind::UintOrAuto => "a non-negative integer or `auto`".into(),
            Kind::Choice(opts) => format!("one of {}", opts.join("|")),
            Kind::UintList => "comma-separated non-negative integers".into(),
        }
    }

    fn accepts(&self, v: &str) -> bool {
        match self {
            Kind::Uint => v.parse::<u64>().is_ok(),
            Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
            Kind::Bool => matches!(v, "true" | "false"),
            Kind::Text => true,
            Kind::UintOrAuto => v == "auto" || v.parse::<u64>().is_ok(),
            Kind::Choice(opts) => opts.contains(&v),
            Kind::UintList => !v.is_empty() && v.split(',').all(|p| p.trim().parse::<u64>().is_ok()),
        }
    }
}

/// `(key, default, kind)`
const SCHEMA: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::Uint),
    ("run.out_dir", "runs/default", Kind::Text),
    ("run.variant", "f2a", Kind::Text),
    ("data.dir", "", Kind::Text),
    ("data.channels", "4", Kind::Uint),
    ("data.train_fraction", "0.5", Kind::Float),
    ("window.context", "64", Kind::Uint),
    ("window.horizon", "8", Kind::Uint),
    ("window.stride", "auto", Kind::UintOrAuto),
    ("model.embed_dim", "32", Kind::Uint),
    ("model.k", "3", Kind::Uint),
    ("forecaster.external", "", Kind::Text),
    ("retrieval.db_test_fraction", "0.3", Kind::Float),
    ("loss.lambda", "1", Kind::Float),
    ("loss.psi", "3", Kind::Float),
    ("loss.alpha", "0.25", Kind::Float),
    ("loss.gamma", "2", Kind::Float),
    ("loss.threshold", "0.5", Kind::Float),
    ("loss.eps_p", "1e-7", Kind::Float),
    ("loss.forecast_target", "fused", Kind::Choice(&["fused", "base"])),
    ("train.lr_max", "0.001", Kind::Float),
    ("train.lr_min", "0", Kind::Float),
    ("train.epochs", "50", Kind::Uint),
    ("train.batch_size", "256", Kind::Uint),
    ("train.beta1", "0.9", Kind::Float),
    ("train.beta2", "0.999", Kind::Float),
    ("train.eps", "1e-8", Kind::Float),
    ("train.weight_decay", "0.01", Kind::Float),
    ("train.pretrain_epochs", "10", Kind::Uint),
    ("train.exclude_self", "true", Kind::Bool),
    ("metrics.l_buf", "auto", Kind::UintOrAuto),
    ("metrics.threshold", "fixed", Kind::Choice(&["fixed", "calibrate"])),
    ("synth.num_series", "1", Kind::Uint),
    ("synth.length", "40000", Kind::Uint),
    ("synth.channels", "4", Kind::Uint),
    ("synth.anomaly_rate", "0.02", Kind::Float),
    ("synth.precursor_lead", "8", Kind::Uint),
    ("synth.spike_magnitude", "6", Kind::Float),
    ("synth.noise_std", "0.1", Kind::Float),
    ("ablate.k_values", "0,3,5,7", Kind::UintList),
];

fn schema_entry(key: &str) -> Option<&'static (&'static str, &'static str, Kind)> {
    SCHEMA.iter().find(|(k, _, _)| *k == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Fixed,
    Calibrate,
}

/// Fully validated configuration for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub variant: String,
    pub data_dir: PathBuf,
    pub train_fraction: f64,
    pub stride: usize,
    pub dims: ModelDims,
    pub external: Option<PathBuf>,
    pub db_test_fraction: f64,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub l_buf: usize,
    pub threshold_mode: ThresholdMode,
    pub synth: SynthConfig,
    pub ablate_k: Vec<usize>,
}

/// Parses `key = value` text, naming `source` and the line in errors.
pub fn parse_lines(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            F2aError::Config(format!("{source}:{}: expected `key = value`, got {raw:?}", n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_overrides(overrides: &[String]) -> Result<(String, Vec<(String, String)>)> {
    let mut pairs = Vec::new();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| F2aError::Config(format!("--set {o:?}: expected key=value")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(("--set".to_string(), pairs))
}

/// Every recognized key, in schema order.
pub fn keys() -> impl Iterator<Item = &'static str> {
    SCHEMA.iter().map(|(k, _, _)| *k)
}

impl RunConfig {
    /// Defaults, then each `(source, pairs)` layer in order; later layers win.
    pub fn from_layers(layers: &[(String, Vec<(String, String)>)]) -> Result<Self> {
        let mut values: BTreeMap<String, String> = SCHEMA
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        for (source, pairs) in layers {
            for (k, v) in pairs {
                let (_, _, kind) = schema_entry(k)
                    .ok_or_else(|| F2aError::Config(format!("{source}: unknown key `{k}`")))?;
                if !kind.accepts(v) {
                    return Err(F2aError::Config(format!(
                        "{source}: key `{k}` = {v:?}, expected {}",
                        kind.describe()
                    )));
                }
                values.insert(k.clone(), v.clone());
            }
        }
        Self::from_values(values)
    }

    /// Loads `file` (or the built-in desk preset when `None`) and applies `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| F2aError::io(p, e))?;
                let name = p.display().to_string();
                Self::from_layers(&[(name.clone(), parse_lines(&text, &name)?), parse_overrides(overrides)?])
            }
            None => Self::load_preset("desk", overrides),
        }
    }

    /// Built-in preset `desk` or `full`, with `key=value` overrides.
    pub fn load_preset(name: &str, overrides: &[String]) -> Result<Self> {
        let text = match name {
            "desk" => DESK_PRESET,
            "full" => FULL_PRESET,
            other => return Err(F2aError::Config(format!("unknown preset `{other}`, expected desk|full"))),
        };
        let source = format!("{name} preset");
        Self::from_layers(&[(source.clone(), parse_lines(text, &source)?), parse_overrides(overrides)?])
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::load_preset(name, &[])
    }

    /// Returns a copy with `overrides` applied on top of the current values.
    pub fn with(&self, overrides: &[(&str, String)]) -> Result<Self> {
        let pairs = overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let current = self.values.clone().into_iter().collect();
        Self::from_layers(&[("current".into(), current), ("override".into(), pairs)])
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let g = |k: &str| values[k].as_str();
        let uint = |k: &str| g(k).parse::<usize>().unwrap();
        let float = |k: &str| g(k).parse::<f64>().unwrap();
        let auto = |k: &str, dflt: usize| match g(k) {
            "auto" => dflt,
            v => v.parse::<usize>().unwrap(),
        };
        let fail = |k: &str, want: &str| {
            Err(F2aError::Config(format!("key `{k}` = {:?}, expected {want}", g(k))))
        };

        let dims = ModelDims {
            context: uint("window.context"),
            channels: uint("data.channels"),
            embed_dim: uint("model.embed_dim"),
            horizon: uint("window.horizon"),
            k: uint("model.k"),
        };
        for k in ["window.context", "data.channels", "model.embed_dim", "window.horizon"] {
            if uint(k) == 0 {
                return fail(k, "a positive integer");
            }
        }
        let stride = auto("window.stride", dims.horizon);
        if stride == 0 {
            return fail("window.stride", "a positive integer or `auto`");
        }
        let train_fraction = float("data.train_fraction");
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return fail("data.train_fraction", "a value in (0, 1)");
        }
        let db_test_fraction = float("retrieval.db_test_fraction");
        if !(0.0..1.0).contains(&db_test_fraction) {
            return fail("retrieval.db_test_fraction", "a value in [0, 1); 1 would leave nothing to evaluate");
        }

        let loss = LossConfig {
            lambda: float("loss.lambda"),
            psi: float("loss.psi"),
            alpha: float("loss.alpha"),
            gamma: float("loss.gamma"),
            threshold: float("loss.threshold"),
            eps_p: float("loss.eps_p"),
            forecast_target: g("loss.forecast_target").parse::<ForecastTarget>().map_err(F2aError::Config)?,
        };
        loss.validate()?;

        let seed = g("seed").parse::<u64>().unwrap();
        let train = TrainConfig {
            lr_max: float("train.lr_max"),
            lr_min: float("train.lr_min"),
            epochs: uint("train.epochs"),
            batch_size: uint("train.batch_size"),
            beta1: float("train.beta1"),
            beta2: float("train.beta2"),
            eps: float("train.eps"),
            weight_decay: float("train.weight_decay"),
            pretrain_epochs: uint("train.pretrain_epochs"),
            seed,
            exclude_self: g("train.exclude_self") == "true",
        };
        train.validate()?;

        let synth = SynthConfig {
            num_series: uint("synth.num_series"),
            length: uint("synth.length"),
            channels: uint("synth.channels"),
            anomaly_rate: float("synth.anomaly_rate"),
            precursor_lead: uint("synth.precursor_lead"),
            spike_magnitude: float("synth.spike_magnitude"),
            noise_std: float("synth.noise_std"),
            seed,
        };
        synth.validate()?;
        if synth.precursor_lead + RAMP_LEN > dims.context {
            return fail(
                "synth.precursor_lead",
                &format!("a lead that keeps the ramp inside the context (lead + {RAMP_LEN} <= window.context = {})", dims.context),
            );
        }

        let out_dir = PathBuf::from(g("run.out_dir"));
        let data_dir = match g("data.dir") {
            "" => out_dir.join("data"),
            d => PathBuf::from(d),
        };
        let external = match g("forecaster.external") {
            "" => None,
            p => Some(PathBuf::from(p)),
        };
        let ablate_k = g("ablate.k_values")
            .split(',')
            .map(|p| p.trim().parse::<usize>().unwrap())
            .collect();

        Ok(RunConfig {
            seed,
            out_dir,
            variant: g("run.variant").to_string(),
            data_dir,
            train_fraction,
            stride,
            dims,
            external,
            db_test_fraction,
            loss,
            train,
            l_buf: auto("metrics.l_buf", dims.horizon),
            threshold_mode: if g("metrics.threshold") == "calibrate" {
                ThresholdMode::Calibrate
            } else {
                ThresholdMode::Fixed
            },
            synth,
            ablate_k,
            values,
        })
    }
}
