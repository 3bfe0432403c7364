//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::path::Path;
use std::time::Instant;

use f2a::config::RunConfig;
use f2a::dataset::Origin;
use f2a::forecaster::{
    forecaster_backward, load_external, Embedding, ExternalRecord, ExternalSet, ForecasterParams, InterchangeDims,
};
use f2a::fusion::{aggregate_stage1, f2a_backward, f2a_forward, forward_from_base, fuse_stage2, FusionParams};
use f2a::loss::{focal_loss, joint_loss, joint_loss_grad, weighted_mae, weighted_mae_grad, ForecastTarget, LossConfig};
use f2a::metrics::{average_precision, vus_pr, ScoredSeries};
use f2a::model::{Model, ModelDims};
use f2a::pipeline::{self, run_in_memory, synth_all};
use f2a::retrieval::{RetrievalStore, StoreDims, StoreRecord};
use f2a::F2aError;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal) * scale)
}

fn normal1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal) * scale)
}

fn bits(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<u8> {
    (0..n).map(|_| rng.gen_bool(rate) as u8).collect()
}

fn random_store(rng: &mut ChaCha8Rng, dims: StoreDims, n: usize) -> RetrievalStore {
    let records = (0..n)
        .map(|i| StoreRecord {
            embedding: (0..dims.flat_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            horizon: normal(rng, (dims.horizon, dims.channels), 1.0),
            origin: Origin {
                series: "s".into(),
                start: i,
            },
        })
        .collect();
    RetrievalStore::from_records(dims, records).unwrap()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// ------------------------------------------------------------------ gradients

/// Relative error; the denominator is floored at 1e-6 because a central
/// difference of an unused parameter is pure rounding noise (about 1e-11 here).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().unwrap()
}

/// Worst relative error over every trainable parameter of one random instance,
/// or `None` if the instance sits within reach of a kink and must be redrawn.
fn gradient_instance(rng: &mut ChaCha8Rng, k: usize) -> Option<f64> {
    let (l, h, c, d) = (6, 4, 2, 3);
    let step = 1e-5;
    let mut fc = ForecasterParams::init(l, d, h, rng);
    fc.b_enc = normal1(rng, d, 0.3);
    fc.b_dec = normal1(rng, h, 0.3);
    let hc = h * c;
    let mut fp = FusionParams::init(h, c, rng);
    fp.w1 = normal1(rng, c, 0.7);
    fp.w2 = normal1(rng, hc, 0.3);
    fp.ws = Array2::eye(hc) + normal(rng, (hc, hc), 0.2);
    fp.wap = normal(rng, (hc, h), 0.4);
    let x = normal(rng, (l, c), 1.0);
    let z = normal(rng, (h, c), 1.0);
    let y = bits(rng, h, 0.4);
    let cfg = LossConfig {
        lambda: rng.gen_range(0.5..2.0),
        psi: rng.gen_range(1.0..4.0),
        forecast_target: if rng.gen_bool(0.5) { ForecastTarget::Fused } else { ForecastTarget::Base },
        ..LossConfig::default()
    };
    let store = random_store(
        rng,
        StoreDims {
            channels: c,
            embed_dim: d,
            horizon: h,
        },
        k + 4,
    );
    let e = fc.encode(x.view()).unwrap();
    let retrieved = (k > 0).then(|| store.query(&e, k).unwrap());

    let trace_of = |fc: &ForecasterParams, fp: &FusionParams| {
        let x_hat = fc.decode(&e).unwrap();
        forward_from_base(e.clone(), x_hat, retrieved.as_ref(), fp).unwrap()
    };
    let loss = |fc: &ForecasterParams, fp: &FusionParams| joint_loss(&trace_of(fc, fp), z.view(), &y, &cfg).unwrap().total;

    let trace = trace_of(&fc, &fp);
    let margin = |a: &Array2<f64>| a.iter().zip(z.iter()).map(|(p, q)| (p - q).abs()).fold(f64::INFINITY, f64::min);
    if margin(&trace.x_f) < 1e-3 || margin(&trace.x_hat) < 1e-3 || trace.logits.iter().any(|v| v.abs() > 30.0) {
        return None;
    }
    let up = joint_loss_grad(&trace, z.view(), &y, &cfg, 1.0).unwrap();
    let g = f2a_backward(&trace, &up, &fp, &fc).unwrap();

    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * step)));
    };
    macro_rules! sweep2 {
        ($owner:ident, $field:ident, $grad:expr, $eval:expr) => {
            for i in 0..$owner.$field.len() {
                let mut a = $owner.clone();
                flat_mut(&mut a.$field)[i] += step;
                let mut b = $owner.clone();
                flat_mut(&mut b.$field)[i] -= step;
                let (pa, pb) = $eval(&a, &b);
                check($grad.as_slice().unwrap()[i], pa, pb);
            }
        };
    }
    macro_rules! sweep1 {
        ($owner:ident, $field:ident, $grad:expr, $eval:expr) => {
            for i in 0..$owner.$field.len() {
                let mut a = $owner.clone();
                a.$field[i] += step;
                let mut b = $owner.clone();
                b.$field[i] -= step;
                let (pa, pb) = $eval(&a, &b);
                check($grad[i], pa, pb);
            }
        };
    }
    let on_fusion = |a: &FusionParams, b: &FusionParams| (loss(&fc, a), loss(&fc, b));
    let on_forecaster = |a: &ForecasterParams, b: &ForecasterParams| (loss(a, &fp), loss(b, &fp));
    sweep1!(fp, w1, g.fusion.w1, on_fusion);
    sweep1!(fp, w2, g.fusion.w2, on_fusion);
    sweep2!(fp, ws, g.fusion.ws, on_fusion);
    sweep2!(fp, wap, g.fusion.wap, on_fusion);
    sweep2!(fc, w_dec, g.w_dec, on_forecaster);
    sweep1!(fc, b_dec, g.b_dec, on_forecaster);

    // Encoder parameters are trained only in the pretraining stage, on plain MAE.
    let pre = |fc: &ForecasterParams| {
        let e = fc.encode(x.view()).unwrap();
        weighted_mae(fc.decode(&e).unwrap().view(), z.view(), &y, 1.0).unwrap()
    };
    let base = fc.decode(&e).unwrap();
    let d = weighted_mae_grad(base.view(), z.view(), &y, 1.0).unwrap();
    let ge = forecaster_backward(x.view(), &e, d.view(), &fc);
    let on_pre = |a: &ForecasterParams, b: &ForecasterParams| (pre(a), pre(b));
    sweep2!(fc, w_enc, ge.w_enc, on_pre);
    sweep1!(fc, b_enc, ge.b_enc, on_pre);
    sweep2!(fc, w_dec, ge.w_dec, on_pre);
    sweep1!(fc, b_dec, ge.b_dec, on_pre);
    Some(worst)
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let (mut done, mut redrawn) = (0, 0);
    while done < 100 {
        let k = done % 3;
        match gradient_instance(&mut rng, k) {
            Some(w) => {
                worst = worst.max(w);
                done += 1;
            }
            None => redrawn += 1,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 10.0,
        format!("100 instances (k=0,1,2), max rel err {worst:.2e} (< 1e-4), {redrawn} redrawn near kinks, {secs:.2}s (< 10s)"),
    )
}

// ------------------------------------------------------------------ retrieval

fn brute_force(store: &RetrievalStore, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = store
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (q.iter().zip(&r.embedding).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d2, i)| (i, d2.sqrt())).collect()
}

fn retrieval_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    let mut queries = 0;
    for s in 0..200 {
        let dims = StoreDims {
            channels: rng.gen_range(1..=3),
            embed_dim: rng.gen_range(1..=6),
            horizon: 2,
        };
        let n = if s % 20 == 0 { 10_000 } else { rng.gen_range(7..=2_000) };
        let mut store = random_store(&mut rng, dims, n);
        // Exact duplicates exercise the index tie-break.
        if s % 2 == 0 {
            let mut recs = store.records().to_vec();
            for _ in 0..n / 10 {
                let src = rng.gen_range(0..recs.len());
                let mut dup = recs[src].clone();
                dup.origin.start += n;
                recs.push(dup);
            }
            store = RetrievalStore::from_records(dims, recs).unwrap();
        }
        for _ in 0..3 {
            let q: Vec<f64> = if rng.gen_bool(0.3) {
                store.records()[rng.gen_range(0..store.len())].embedding.clone()
            } else {
                (0..dims.flat_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            for k in [1, 3, 5, 7] {
                queries += 1;
                let got = store.query_flat(&q, k, |_| false).unwrap();
                let want = brute_force(&store, &q, k);
                let same = got.indices.len() == k
                    && got
                        .indices
                        .iter()
                        .zip(&got.distances)
                        .zip(&want)
                        .all(|((&i, &d), &(wi, wd))| i == wi && (d - wd).abs() <= 1e-12);
                if !same {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("200 stores, {queries} queries, {mismatches} mismatches vs brute force, {secs:.2}s (< 30s)"),
    )
}

// ------------------------------------------------------------------ fusion

fn bits_eq<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> bool {
    a.into_iter().map(|v| v.to_bits()).eq(b.into_iter().map(|v| v.to_bits()))
}

fn fusion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut fails = Vec::new();
    for case in 0..1000 {
        let (k, h, c) = (rng.gen_range(1..=5), rng.gen_range(1..=6), rng.gen_range(1..=4));
        let scale = rng.gen_range(0.1..10.0);
        let o: Vec<Array2<f64>> = (0..k).map(|_| normal(&mut rng, (h, c), scale)).collect();
        let s = rng.gen_range(0.1..5.0);
        let w1 = normal1(&mut rng, c, s);
        let s1 = aggregate_stage1(&o, &w1).unwrap();
        if (s1.phi.sum() - 1.0).abs() > 1e-12 {
            fails.push(format!("case {case}: phi sums to {}", s1.phi.sum()));
        }

        let x_s = normal(&mut rng, (h, c), scale);
        let s = rng.gen_range(0.1..5.0);
        let w2 = normal1(&mut rng, h * c, s);
        let s2 = fuse_stage2(x_s.view(), s1.h1.view(), &w2).unwrap();
        let convex = (s2.phi1 + s2.phi2 - 1.0).abs() <= 1e-12 && (0.0..=1.0).contains(&s2.phi1) && (0.0..=1.0).contains(&s2.phi2);
        let tol = 1e-12 * scale.max(1.0);
        let between = s2.h2.iter().zip(x_s.iter()).zip(s1.h1.iter()).all(|((&v, &a), &b)| {
            v >= a.min(b) - tol && v <= a.max(b) + tol
        });
        if !convex || !between {
            fails.push(format!("case {case}: stage-2 convexity {convex}, betweenness {between}"));
        }

        let mut perm = o.clone();
        perm.shuffle(&mut rng);
        let p1 = aggregate_stage1(&perm, &w1).unwrap();
        let moved = p1.h1.iter().zip(s1.h1.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved > tol {
            fails.push(format!("case {case}: permuting horizons moved h1 by {moved:e}"));
        }

        let l = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=4);
        let fc = ForecasterParams::init(l, d, h, &mut rng);
        let fp = FusionParams::init(h, c, &mut rng);
        let x = normal(&mut rng, (l, c), 1.0);
        let dims = StoreDims {
            channels: c,
            embed_dim: d,
            horizon: h,
        };
        let (na, nb) = (rng.gen_range(1..50), rng.gen_range(1..50));
        let a = random_store(&mut rng, dims, na);
        let b = random_store(&mut rng, dims, nb);
        let ta = f2a_forward(x.view(), &fc, Some(&a), 0, &fp).unwrap();
        let tb = f2a_forward(x.view(), &fc, Some(&b), 0, &fp).unwrap();
        let tn = f2a_forward(x.view(), &fc, None, 0, &fp).unwrap();
        if !(bits_eq(&ta.x_f, &tb.x_f) && bits_eq(&ta.x_f, &tn.x_f) && bits_eq(&ta.p, &tb.p) && bits_eq(&ta.p, &tn.p)) {
            fails.push(format!("case {case}: k=0 output depends on the store"));
        }
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            "1000 cases each: phi sum, stage-2 convexity/betweenness, stage-1 permutation, k=0 store independence".to_string()
        } else {
            format!("{} violations, first: {}", fails.len(), fails[0])
        },
    )
}

// ------------------------------------------------------------------ loss

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut fails = Vec::new();
    for case in 0..500 {
        let (h, c, d, l) = (rng.gen_range(1..=8), rng.gen_range(1..=4), 3, 6);
        let fc = ForecasterParams::init(l, d, h, &mut rng);
        let mut fp = FusionParams::init(h, c, &mut rng);
        fp.wap = normal(&mut rng, (h * c, h), 1.0);
        let x = normal(&mut rng, (l, c), 1.0);
        let z = normal(&mut rng, (h, c), 1.0);
        let y = bits(&mut rng, h, 0.3);
        let trace = f2a_forward(x.view(), &fc, None, 0, &fp).unwrap();

        let zero = LossConfig {
            lambda: 0.0,
            psi: rng.gen_range(1.0..5.0),
            ..LossConfig::default()
        };
        let parts = joint_loss(&trace, z.view(), &y, &zero).unwrap();
        if parts.total != parts.ap {
            fails.push(format!("case {case}: lambda=0 total {} != focal {}", parts.total, parts.ap));
        }

        // Same summation order as the definition: per-timestep channel sums, then the mean over t.
        let plain = trace
            .x_f
            .rows()
            .into_iter()
            .zip(z.rows())
            .map(|(a, b)| 1.0 * a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .sum::<f64>()
            / h as f64;
        let w1 = weighted_mae(trace.x_f.view(), z.view(), &y, 1.0).unwrap();
        if w1 != plain {
            fails.push(format!("case {case}: psi=1 MAE {w1} != plain {plain}"));
        }

        let p = Array1::from_shape_simple_fn(h, || rng.gen_range(0.01..0.99));
        let half = LossConfig {
            gamma: 0.0,
            alpha: 0.5,
            ..LossConfig::default()
        };
        let bce: f64 = p
            .iter()
            .zip(&y)
            .map(|(&p, &y): (&f64, &u8)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
            .sum();
        let focal = focal_loss(p.view(), &y, &half).unwrap();
        if (focal - 0.5 * bce).abs() > 1e-12 {
            fails.push(format!("case {case}: focal(gamma=0, alpha=0.5) {focal} vs 0.5 BCE {}", 0.5 * bce));
        }
    }
    let cfg = LossConfig::default();
    let pos = focal_loss(Array1::from(vec![0.5]).view(), &[1], &cfg).unwrap();
    let neg = focal_loss(Array1::from(vec![0.5]).view(), &[0], &cfg).unwrap();
    if (pos - 0.043322).abs() > 1e-6 || (neg - 0.129965).abs() > 1e-6 {
        fails.push(format!("worked values {pos:.6}, {neg:.6}"));
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            format!("500 cases exact; worked values {pos:.6} and {neg:.6}")
        } else {
            format!("{} violations, first: {}", fails.len(), fails[0])
        },
    )
}

// ------------------------------------------------------------------ metrics

/// Threshold sweep over every distinct score, predicting `score >= u`.
fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for u in thresholds {
        let (mut tp, mut pp) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= u {
                pp += 1.0;
                tp += l as f64;
            }
        }
        let r = tp / pos;
        ap += (r - prev_r) * (tp / pp);
        prev_r = r;
    }
    ap
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.gen_range(2..=1000);
        let quantized = case % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen();
                if quantized {
                    (v * 10.0).floor() / 10.0
                } else {
                    v
                }
            })
            .collect();
        let rate = rng.gen_range(0.01..0.5);
        let mut labels = bits(&mut rng, n, rate);
        if !labels.contains(&1) {
            labels[0] = 1;
        }
        let s = ScoredSeries::new(0, scores.clone(), labels.clone()).unwrap();
        let ap = average_precision(&s).unwrap();
        let err = (ap - brute_ap(&scores, &labels)).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            fails.push(format!("case {case}: AP off by {err:e}"));
        }
        if vus_pr(&s, 0).unwrap() != ap {
            fails.push(format!("case {case}: L_buf=0 VUS-PR differs from AP"));
        }
    }
    let worked = ScoredSeries::new(0, vec![0.0, 0.0, 1.0, 0.0, 0.0], vec![0, 0, 1, 0, 0]).unwrap();
    let v = vus_pr(&worked, 1).unwrap();
    if (v - 13.0 / 15.0).abs() > 1e-12 {
        fails.push(format!("worked VUS-PR {v}"));
    }
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            format!("500 series, max |AP - sweep| {worst:.1e}; L_buf=0 exact; worked VUS-PR {v:.12}")
        } else {
            format!("{} violations, first: {}", fails.len(), fails[0])
        },
    )
}

// ------------------------------------------------------------------ end to end

struct SeedRun {
    vus: f64,
    base_rate: f64,
}

fn desk_run(seed: u64, overrides: &[&str]) -> f2a::Result<SeedRun> {
    let mut ov = vec![format!("seed={seed}")];
    ov.extend(overrides.iter().map(|s| s.to_string()));
    let cfg = RunConfig::load_preset("desk", &ov)?;
    let series = synth_all(&cfg.synth)?;
    let r = run_in_memory(&series, &cfg, None)?;
    let eval = &r.scores[0].eval;
    Ok(SeedRun {
        vus: r.reports[0].vus_pr,
        base_rate: eval.positives() as f64 / eval.len() as f64,
    })
}

fn desk_variant(overrides: &[&str]) -> f2a::Result<Vec<SeedRun>> {
    (0..5).map(|seed| desk_run(seed, overrides)).collect()
}

fn fmt_vus(runs: &[SeedRun]) -> String {
    runs.iter().map(|r| format!("{:.3}", r.vus)).collect::<Vec<_>>().join(" ")
}

struct EndToEnd {
    k3: Vec<SeedRun>,
    efficacy: Outcome,
}

fn efficacy() -> EndToEnd {
    let t0 = Instant::now();
    let (k0, k3) = match (desk_variant(&["model.k=0"]), desk_variant(&["model.k=3"])) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            return EndToEnd {
                k3: Vec::new(),
                efficacy: outcome(false, format!("run failed: {e}")),
            }
        }
    };
    let elapsed = t0.elapsed();
    let base: Vec<f64> = k3.iter().map(|r| r.base_rate).collect();
    let m3 = median(&k3.iter().map(|r| r.vus).collect::<Vec<_>>());
    let m0 = median(&k0.iter().map(|r| r.vus).collect::<Vec<_>>());
    let mb = median(&base);
    let secs = elapsed.as_secs_f64();
    let pass = m3 >= 5.0 * mb && m3 > m0 && secs < 300.0;
    let detail = format!(
        "median VUS-PR k=3 {m3:.4} vs 5x base rate {:.4}; k=0 {m0:.4}; per seed k=3 [{}] k=0 [{}]; {secs:.1}s (< 300s)",
        5.0 * mb,
        fmt_vus(&k3),
        fmt_vus(&k0)
    );
    EndToEnd {
        k3,
        efficacy: outcome(pass, detail),
    }
}

fn ablation(k3: &[SeedRun]) -> Outcome {
    if k3.is_empty() {
        return outcome(false, "no k=3 baseline runs");
    }
    let (lam0, psi1) = match (
        desk_variant(&["model.k=3", "loss.lambda=0"]),
        desk_variant(&["model.k=3", "loss.psi=1"]),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("run failed: {e}")),
    };
    let m = |r: &[SeedRun]| median(&r.iter().map(|s| s.vus).collect::<Vec<_>>());
    let (full, l0, p1) = (m(k3), m(&lam0), m(&psi1));
    outcome(
        full >= l0 && full >= p1,
        format!(
            "median VUS-PR lambda=1,psi=3 {full:.4} vs lambda=0 {l0:.4} [{}] and psi=1 {p1:.4} [{}]",
            fmt_vus(&lam0),
            fmt_vus(&psi1)
        ),
    )
}

// ------------------------------------------------------------------ determinism

fn run_files(dir: &Path) -> f2a::Result<Vec<(String, Vec<u8>)>> {
    let cfg = RunConfig::load_preset("desk", &[format!("run.out_dir={}", dir.display()), "seed=3".into()])?;
    pipeline::cmd_synth(&cfg, false)?;
    pipeline::cmd_train(&cfg, false)?;
    pipeline::cmd_predict(&cfg, false)?;
    pipeline::cmd_eval(&cfg, false)?;
    let mut out = Vec::new();
    for rel in [
        "data/synth_3.csv",
        "model.f2am",
        "store.f2ar",
        "train.log",
        "scores/synth_3.csv",
        "scores/synth_3.calib.csv",
        "metrics.csv",
    ] {
        let p = dir.join(rel);
        let bytes = std::fs::read(&p).map_err(|_| F2aError::MissingInput(p.clone()))?;
        out.push((rel.to_string(), bytes));
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run_files(a.path()), run_files(b.path())) {
        (Ok(fa), Ok(fb)) => {
            let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
            outcome(
                differing.is_empty(),
                if differing.is_empty() {
                    format!("{} artifacts byte-identical across two runs", fa.len())
                } else {
                    format!("differing: {}", differing.join(", "))
                },
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("run failed: {e}")),
    }
}

// ------------------------------------------------------------------ formats

fn corrupt_at(path: &Path, offset: usize) {
    let mut bytes = std::fs::read(path).unwrap();
    bytes[offset] ^= 0xff;
    std::fs::write(path, bytes).unwrap();
}

fn formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut fails: Vec<String> = Vec::new();
    let mut expect = |what: &str, ok: bool| {
        if !ok {
            fails.push(what.to_string());
        }
    };

    let dims = ModelDims {
        context: 12,
        channels: 3,
        embed_dim: 5,
        horizon: 4,
        k: 2,
    };
    let model = Model::init(dims, &mut rng).unwrap();
    let mp = dir.path().join("m.f2am");
    model.save(&mp).unwrap();
    let back = Model::load(&mp, Some(dims)).unwrap();
    expect("checkpoint round trip", back.tensors() == model.tensors());
    let other = ModelDims { horizon: 5, ..dims };
    expect("checkpoint dims", matches!(Model::load(&mp, Some(other)), Err(F2aError::DimMismatch { .. })));
    corrupt_at(&mp, 0);
    expect("checkpoint magic", matches!(Model::load(&mp, None), Err(F2aError::BadMagic { .. })));
    model.save(&mp).unwrap();
    corrupt_at(&mp, 4);
    expect("checkpoint version", matches!(Model::load(&mp, None), Err(F2aError::BadVersion { .. })));
    model.save(&mp).unwrap();
    let len = std::fs::metadata(&mp).unwrap().len() as usize;
    corrupt_at(&mp, len / 2);
    expect("checkpoint checksum", matches!(Model::load(&mp, None), Err(F2aError::Checksum { .. })));

    let sd = StoreDims {
        channels: 3,
        embed_dim: 5,
        horizon: 4,
    };
    let store = random_store(&mut rng, sd, 40);
    let sp = dir.path().join("s.f2ar");
    store.save(&sp).unwrap();
    let back = RetrievalStore::load(&sp, Some(sd)).unwrap();
    expect("store round trip", back.records() == store.records());
    expect(
        "store dims",
        matches!(RetrievalStore::load(&sp, Some(StoreDims { embed_dim: 6, ..sd })), Err(F2aError::DimMismatch { .. })),
    );
    corrupt_at(&sp, 1);
    expect("store magic", matches!(RetrievalStore::load(&sp, None), Err(F2aError::BadMagic { .. })));
    store.save(&sp).unwrap();
    corrupt_at(&sp, 5);
    expect("store version", matches!(RetrievalStore::load(&sp, None), Err(F2aError::BadVersion { .. })));

    let idims = InterchangeDims {
        channels: 3,
        embed_dim: 5,
        horizon: 4,
    };
    let mut set = ExternalSet::new(idims);
    for i in 0..10 {
        set.insert(
            Origin {
                series: format!("series_{}", i % 3),
                start: i * 4,
            },
            ExternalRecord {
                embedding: Embedding::new(normal(&mut rng, (3, 5), 1.0)),
                forecast: normal(&mut rng, (4, 3), 1.0),
            },
        )
        .unwrap();
    }
    let ip = dir.path().join("x.f2ae");
    set.save(&ip).unwrap();
    let back = load_external(&ip, Some(3), Some(5), Some(4)).unwrap();
    expect("interchange round trip", back == set);
    expect("interchange dims", matches!(load_external(&ip, Some(3), Some(6), Some(4)), Err(F2aError::DimMismatch { .. })));
    corrupt_at(&ip, 2);
    expect("interchange magic", matches!(load_external(&ip, None, None, None), Err(F2aError::BadMagic { .. })));
    set.save(&ip).unwrap();
    corrupt_at(&ip, 6);
    expect("interchange version", matches!(load_external(&ip, None, None, None), Err(F2aError::BadVersion { .. })));
    set.save(&ip).unwrap();
    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
    expect("interchange truncation", matches!(load_external(&ip, None, None, None), Err(F2aError::Corrupt { .. })));

    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            "checkpoint, store and interchange round trips; magic/version/dims/checksum/truncation rejected".to_string()
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("gradient correctness", gradient_correctness());
    report("retrieval oracle", retrieval_oracle());
    report("fusion invariants", fusion_invariants());
    report("loss identities", loss_identities());
    report("metric oracle", metric_oracle());
    let e2e = efficacy();
    report("end-to-end synthetic efficacy", e2e.efficacy);
    report("ablation directions", ablation(&e2e.k3));
    report("determinism", determinism());
    report("format round trips", formats());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
