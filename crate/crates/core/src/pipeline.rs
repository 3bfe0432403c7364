//! End-to-end commands: data generation, training, scoring, evaluation and ablation.
//!
//! Layout under `run.out_dir`:
//! `data/*.csv`, `model.f2am`, `store.f2ar`, `train.log`,
//! `scores/<series>.csv`, `scores/<series>.calib.csv`, `metrics.csv`,
//! and for ablations `ablate/<variant>/...` plus `ablation.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, ThresholdMode};
use crate::dataset::{gen_synthetic, make_windows, read_csv, select_channels, write_csv, RawSeries, SynthConfig, WindowSample};
use crate::error::{F2aError, Result};
use crate::forecaster::{load_external, ExternalSet};
use crate::fusion::{forward_from_base, ForwardTrace};
use crate::metrics::{stitch_scores, MetricReport, ScoredSeries, METRIC_CSV_HEADER};
use crate::model::Model;
use crate::optim::{calibrate_threshold, train, BaseSource, TrainOutcome};
use crate::retrieval::{build_store_from_embeddings, RetrievalStore, StoreDims};

pub const MODEL_FILE: &str = "model.f2am";
pub const STORE_FILE: &str = "store.f2ar";
pub const LOG_FILE: &str = "train.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Windows of one series, split chronologically.
#[derive(Debug, Clone)]
pub struct SeriesSplit {
    pub name: String,
    pub labels: Vec<u8>,
    /// Horizons end inside the training prefix.
    pub train: Vec<WindowSample>,
    /// Early test windows added to the store as history.
    pub db: Vec<WindowSample>,
    /// Remaining test windows; scored and evaluated.
    pub eval: Vec<WindowSample>,
}

pub fn split_series(series: &RawSeries, cfg: &RunConfig) -> Result<SeriesSplit> {
    let (l, h) = (cfg.dims.context, cfg.dims.horizon);
    let train_end = (series.len() as f64 * cfg.train_fraction).floor() as usize;
    if train_end < l + h || series.len() - train_end < h {
        return Err(F2aError::SeriesTooShort {
            series: series.name.clone(),
            needed: ((l + 2 * h) as f64 / cfg.train_fraction.min(1.0 - cfg.train_fraction)).ceil() as usize,
            available: series.len(),
        });
    }
    let plan = select_channels(series, cfg.dims.channels, 0..train_end)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for w in make_windows(series, &plan, l, h, cfg.stride)? {
        let s = w.origin.start;
        if s + l + h <= train_end {
            train.push(w);
        } else if s + l >= train_end {
            test.push(w);
        }
    }
    let n_db = (test.len() as f64 * cfg.db_test_fraction).floor() as usize;
    let eval = test.split_off(n_db);
    if eval.is_empty() {
        return Err(F2aError::SeriesTooShort {
            series: series.name.clone(),
            needed: series.len() + h,
            available: series.len(),
        });
    }
    Ok(SeriesSplit {
        name: series.name.clone(),
        labels: series.labels.clone(),
        train,
        db: test,
        eval,
    })
}

/// Generates `num_series` series; series `i` uses seed `seed + i`.
pub fn synth_all(cfg: &SynthConfig) -> Result<Vec<RawSeries>> {
    (0..cfg.num_series as u64)
        .map(|i| {
            gen_synthetic(&SynthConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            })
        })
        .collect()
}

/// Reads every `*.csv` in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<RawSeries>> {
    let entries = fs::read_dir(dir).map_err(|e| F2aError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| F2aError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(F2aError::MissingInput(dir.join("*.csv")));
    }
    paths.sort();
    paths.iter().map(|p| read_csv(p)).collect()
}

fn base_of(external: Option<&ExternalSet>) -> BaseSource<'_> {
    external.map_or(BaseSource::BuiltIn, BaseSource::External)
}

fn load_external_for(cfg: &RunConfig) -> Result<Option<ExternalSet>> {
    cfg.external
        .as_deref()
        .map(|p| {
            load_external(
                p,
                Some(cfg.dims.channels),
                Some(cfg.dims.embed_dim),
                Some(cfg.dims.horizon),
            )
        })
        .transpose()
}

/// Store over training and history windows, embedded with `model`'s frozen encoder or the external set.
pub fn build_run_store(splits: &[SeriesSplit], model: &Model, external: Option<&ExternalSet>) -> Result<RetrievalStore> {
    let base = base_of(external);
    let windows: Vec<&WindowSample> = splits.iter().flat_map(|s| s.train.iter().chain(&s.db)).collect();
    let embeddings = windows
        .iter()
        .map(|w| base.embedding(w, &model.forecaster))
        .collect::<Result<Vec<_>>>()?;
    build_store_from_embeddings(embeddings.iter().zip(&windows).map(|(e, w)| (e, w.z.view(), &w.origin)))
}

/// Trains a model on the training windows of every split.
pub fn train_on(splits: &[SeriesSplit], cfg: &RunConfig, external: Option<&ExternalSet>) -> Result<TrainOutcome> {
    let windows: Vec<WindowSample> = splits.iter().flat_map(|s| s.train.iter().cloned()).collect();
    train(cfg.dims, &windows, base_of(external), &cfg.loss, &cfg.train, |f| {
        let probe = Model {
            dims: cfg.dims,
            forecaster: f.clone(),
            fusion: crate::fusion::FusionParams::zeros(cfg.dims.horizon, cfg.dims.channels),
        };
        build_run_store(splits, &probe, external).map(Some)
    })
}

/// Forward pass for one window; `exclude_self` skips the window's own store entry.
pub fn score_window(
    model: &Model,
    store: Option<&RetrievalStore>,
    external: Option<&ExternalSet>,
    w: &WindowSample,
    exclude_self: bool,
) -> Result<ForwardTrace> {
    let base = base_of(external);
    let e = base.embedding(w, &model.forecaster)?;
    let x_hat = base.forecast(w, &e, &model.forecaster)?;
    let k = model.dims.k;
    let retrieved = if k == 0 {
        None
    } else {
        let store = store.ok_or_else(|| F2aError::Retrieval(format!("k = {k} requires a store")))?;
        Some(if exclude_self {
            store.query_excluding(&e, k, |o| *o == w.origin)?
        } else {
            store.query(&e, k)?
        })
    };
    forward_from_base(e, x_hat, retrieved.as_ref(), &model.fusion)
}

/// Stitched per-timestep scores for `windows` of one series.
pub fn score_windows(
    model: &Model,
    store: Option<&RetrievalStore>,
    external: Option<&ExternalSet>,
    windows: &[WindowSample],
    labels: &[u8],
    exclude_self: bool,
) -> Result<ScoredSeries> {
    let l = model.dims.context;
    let mut horizons = Vec::with_capacity(windows.len());
    for w in windows {
        let trace = score_window(model, store, external, w, exclude_self)?;
        horizons.push((w.origin.start + l, trace.p.to_vec()));
    }
    let refs: Vec<(usize, &[f64])> = horizons.iter().map(|(s, p)| (*s, p.as_slice())).collect();
    stitch_scores(&refs, labels)
}

/// Scores for evaluation and for threshold calibration (training windows).
#[derive(Debug, Clone)]
pub struct SeriesScores {
    pub name: String,
    pub eval: ScoredSeries,
    pub calib: ScoredSeries,
}

pub fn predict_all(
    splits: &[SeriesSplit],
    model: &Model,
    store: Option<&RetrievalStore>,
    external: Option<&ExternalSet>,
    exclude_self: bool,
) -> Result<Vec<SeriesScores>> {
    splits
        .iter()
        .map(|s| {
            Ok(SeriesScores {
                name: s.name.clone(),
                eval: score_windows(model, store, external, &s.eval, &s.labels, false)?,
                calib: score_windows(model, store, external, &s.train, &s.labels, exclude_self)?,
            })
        })
        .collect()
}

pub fn evaluate(scores: &[SeriesScores], cfg: &RunConfig) -> Result<Vec<MetricReport>> {
    scores
        .iter()
        .map(|s| {
            let u = match cfg.threshold_mode {
                ThresholdMode::Fixed => cfg.loss.threshold,
                ThresholdMode::Calibrate => calibrate_threshold(&s.calib.scores, &s.calib.labels)?,
            };
            MetricReport::compute(&s.name, &cfg.variant, cfg.dims.k, &s.eval, u, cfg.l_buf)
        })
        .collect()
}

/// Everything a run produces, held in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub scores: Vec<SeriesScores>,
    pub reports: Vec<MetricReport>,
}

/// Train, score and evaluate without touching the file system.
pub fn run_in_memory(series: &[RawSeries], cfg: &RunConfig, external: Option<&ExternalSet>) -> Result<RunResult> {
    let splits = series.iter().map(|s| split_series(s, cfg)).collect::<Result<Vec<_>>>()?;
    let outcome = train_on(&splits, cfg, external)?;
    let scores = predict_all(&splits, &outcome.model, outcome.store.as_ref(), external, cfg.train.exclude_self)?;
    let reports = evaluate(&scores, cfg)?;
    Ok(RunResult {
        outcome,
        scores,
        reports,
    })
}

// ---------------------------------------------------------------- file commands

fn guard(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(F2aError::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| F2aError::io(dir, e))
}

fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    guard(path, force)?;
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    crate::atomic_write(path, text.as_bytes())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(F2aError::MissingInput(path.to_path_buf()))
    }
}

fn splits_for(cfg: &RunConfig) -> Result<Vec<SeriesSplit>> {
    load_dataset(&cfg.data_dir)?.iter().map(|s| split_series(s, cfg)).collect()
}

fn scores_csv(s: &ScoredSeries) -> String {
    let mut out = String::from("timestep,score,label\n");
    for (i, (p, y)) in s.scores.iter().zip(&s.labels).enumerate() {
        out.push_str(&format!("{},{},{}\n", s.start + i, p, y));
    }
    out
}

fn read_scores_csv(path: &Path) -> Result<ScoredSeries> {
    let text = fs::read_to_string(path).map_err(|e| F2aError::io(path, e))?;
    let bad = |line: usize, detail: &str| F2aError::Csv {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "timestep,score,label")) => {}
        _ => return Err(bad(1, "expected header `timestep,score,label`")),
    }
    let (mut start, mut scores, mut labels) = (None, Vec::new(), Vec::new());
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(n + 1, "expected 3 fields"));
        }
        let t: usize = f[0].parse().map_err(|_| bad(n + 1, "bad timestep"))?;
        let first = *start.get_or_insert(t);
        if t != first + scores.len() {
            return Err(bad(n + 1, "timesteps must be consecutive"));
        }
        scores.push(f[1].parse::<f64>().map_err(|_| bad(n + 1, "bad score"))?);
        labels.push(match f[2] {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad(n + 1, "label must be 0 or 1")),
        });
    }
    ScoredSeries::new(start.unwrap_or(0), scores, labels)
}

fn scores_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("scores")
}

/// Writes synthetic series as CSV into the data directory. Returns the written paths.
pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    let series = synth_all(&cfg.synth)?;
    ensure_dir(&cfg.data_dir)?;
    let mut out = Vec::new();
    for s in &series {
        let path = cfg.data_dir.join(format!("{}.csv", s.name));
        guard(&path, force)?;
        write_csv(s, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Trains on the data directory; writes the checkpoint, the store and the epoch log.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<TrainOutcome> {
    let model_path = cfg.out_dir.join(MODEL_FILE);
    let store_path = cfg.out_dir.join(STORE_FILE);
    let log_path = cfg.out_dir.join(LOG_FILE);
    for p in [&model_path, &store_path, &log_path] {
        guard(p, force)?;
    }
    let external = load_external_for(cfg)?;
    let splits = splits_for(cfg)?;
    let outcome = train_on(&splits, cfg, external.as_ref())?;

    ensure_dir(&cfg.out_dir)?;
    outcome.model.save(&model_path)?;
    if let Some(store) = &outcome.store {
        store.save(&store_path)?;
    }
    let mut log = String::from("# epoch, lr, total, ap, f\n");
    for e in &outcome.log {
        log.push_str(&e.line());
        log.push('\n');
    }
    write_text(&log_path, &log, true)?;
    Ok(outcome)
}

/// Rebuilds the retrieval store from an existing checkpoint's frozen encoder.
pub fn cmd_build_db(cfg: &RunConfig, force: bool) -> Result<RetrievalStore> {
    let model_path = cfg.out_dir.join(MODEL_FILE);
    let store_path = cfg.out_dir.join(STORE_FILE);
    require(&model_path)?;
    guard(&store_path, force)?;
    let model = Model::load(&model_path, Some(cfg.dims))?;
    let external = load_external_for(cfg)?;
    let store = build_run_store(&splits_for(cfg)?, &model, external.as_ref())?;
    store.save(&store_path)?;
    Ok(store)
}

fn load_trained(cfg: &RunConfig) -> Result<(Model, Option<RetrievalStore>)> {
    let model_path = cfg.out_dir.join(MODEL_FILE);
    require(&model_path)?;
    let model = Model::load(&model_path, Some(cfg.dims))?;
    let store = if cfg.dims.k > 0 {
        let store_path = cfg.out_dir.join(STORE_FILE);
        require(&store_path)?;
        Some(RetrievalStore::load(
            &store_path,
            Some(StoreDims {
                channels: cfg.dims.channels,
                embed_dim: cfg.dims.embed_dim,
                horizon: cfg.dims.horizon,
            }),
        )?)
    } else {
        None
    };
    Ok((model, store))
}

/// Scores evaluation and calibration windows; writes `scores/<series>.csv` and `.calib.csv`.
pub fn cmd_predict(cfg: &RunConfig, force: bool) -> Result<Vec<SeriesScores>> {
    let (model, store) = load_trained(cfg)?;
    let external = load_external_for(cfg)?;
    let splits = splits_for(cfg)?;
    let dir = scores_dir(cfg);
    for s in &splits {
        guard(&dir.join(format!("{}.csv", s.name)), force)?;
        guard(&dir.join(format!("{}.calib.csv", s.name)), force)?;
    }
    let scores = predict_all(&splits, &model, store.as_ref(), external.as_ref(), cfg.train.exclude_self)?;
    for s in &scores {
        write_text(&dir.join(format!("{}.csv", s.name)), &scores_csv(&s.eval), true)?;
        write_text(&dir.join(format!("{}.calib.csv", s.name)), &scores_csv(&s.calib), true)?;
    }
    Ok(scores)
}

/// Computes metrics from written scores; writes `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig, force: bool) -> Result<Vec<MetricReport>> {
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    guard(&metrics_path, force)?;
    let dir = scores_dir(cfg);
    require(&dir)?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| F2aError::io(&dir, e))? {
        let name = entry.map_err(|e| F2aError::io(&dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".csv") {
            if !stem.ends_with(".calib") {
                names.push(stem.to_string());
            }
        }
    }
    if names.is_empty() {
        return Err(F2aError::MissingInput(dir.join("*.csv")));
    }
    names.sort();
    let scores = names
        .iter()
        .map(|n| {
            Ok(SeriesScores {
                name: n.clone(),
                eval: read_scores_csv(&dir.join(format!("{n}.csv")))?,
                calib: read_scores_csv(&dir.join(format!("{n}.calib.csv")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = evaluate(&scores, cfg)?;
    let mut text = format!("{METRIC_CSV_HEADER}\n");
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_text(&metrics_path, &text, true)?;
    Ok(reports)
}

/// Variants compared by `cmd_ablate`: each k in `ablate.k_values`, then
/// the configured k with the forecast term removed and with unweighted MAE.
pub fn ablation_variants(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    let data = cfg.data_dir.display().to_string();
    let sub = |name: &str, extra: &[(&str, String)]| {
        let mut ov: Vec<(&str, String)> = vec![
            ("run.variant", name.to_string()),
            ("run.out_dir", cfg.out_dir.join("ablate").join(name).display().to_string()),
            ("data.dir", data.clone()),
        ];
        ov.extend_from_slice(extra);
        cfg.with(&ov)
    };
    let mut out = Vec::new();
    for &k in &cfg.ablate_k {
        out.push(sub(&format!("rag{k}"), &[("model.k", k.to_string())])?);
    }
    out.push(sub("lambda0", &[("loss.lambda", "0".into())])?);
    out.push(sub("psi1", &[("loss.psi", "1".into())])?);
    Ok(out)
}

/// Runs train, predict and eval for every ablation variant; writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, force: bool) -> Result<Vec<MetricReport>> {
    let table = cfg.out_dir.join(ABLATION_FILE);
    guard(&table, force)?;
    let mut rows = Vec::new();
    for v in ablation_variants(cfg)? {
        cmd_train(&v, force)?;
        cmd_predict(&v, force)?;
        rows.extend(cmd_eval(&v, force)?);
    }
    let mut text = format!("{METRIC_CSV_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_text(&table, &text, true)?;
    Ok(rows)
}
