//! Scaling layer, retrieval aggregation, skip fusion and anomaly head.
//!
//! Shapes, with `τ` the row-major (timestep-major, channel-minor) flatten:
//!
//! ```text
//! x̂  (H×C) ──τ·Ws──▶ x̂ˢ (H×C) ─┐
//! o (k×H×C) ─stack─▶ ô (kH×C)   │
//!     φ = softmax(ô·W1)  (kH)    │
//!     h¹[t] = Σ_q φ[qH+t]·ô[qH+t]│
//!     (φ¹, φ²) = softmax(τ(x̂ˢ)·W2, τ(h¹)·W2)
//!     x̂ᶠ = h² = φ¹·x̂ˢ + φ²·h¹ ◀──┘
//! p = sigmoid(τ(x̂ᶠ)·Wap)     (H)
//! ```
//!
//! With `k = 0` the retrieval branch is skipped and `x̂ᶠ = x̂ˢ`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{F2aError, Result};
use crate::forecaster::{decoder_backward, Embedding, ForecasterParams};
use crate::retrieval::{RetrievalStore, RetrievedSet};

/// Logits are clamped to this magnitude so `p` stays strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 36.7;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// C
    pub w1: Array1<f64>,
    /// H·C
    pub w2: Array1<f64>,
    /// H·C x H·C
    pub ws: Array2<f64>,
    /// H·C x H
    pub wap: Array2<f64>,
}

impl FusionParams {
    /// `Ws = I`, `W1 = W2 = 0`, `Wap ~ U(±1/√(HC))`: untrained fusion passes the base forecast through.
    pub fn init(h: usize, c: usize, rng: &mut impl Rng) -> Self {
        let hc = h * c;
        let bound = 1.0 / (hc as f64).sqrt();
        FusionParams {
            w1: Array1::zeros(c),
            w2: Array1::zeros(hc),
            ws: Array2::eye(hc),
            wap: Array2::from_shape_fn((hc, h), |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros(h: usize, c: usize) -> Self {
        let hc = h * c;
        FusionParams {
            w1: Array1::zeros(c),
            w2: Array1::zeros(hc),
            ws: Array2::zeros((hc, hc)),
            wap: Array2::zeros((hc, h)),
        }
    }

    pub fn horizon(&self) -> usize {
        self.wap.ncols()
    }

    pub fn channels(&self) -> usize {
        self.w1.len()
    }

    fn check(&self) -> Result<()> {
        let (h, c) = (self.horizon(), self.channels());
        let hc = h * c;
        if self.w2.len() != hc || self.ws.dim() != (hc, hc) || self.wap.nrows() != hc {
            return Err(F2aError::shape(
                "fusion params",
                format!("W2 {hc}, Ws {hc}x{hc}, Wap {hc}x{h}"),
                format!("W2 {}, Ws {:?}, Wap {:?}", self.w2.len(), self.ws.dim(), self.wap.dim()),
            ));
        }
        Ok(())
    }
}

fn flat(m: ArrayView2<f64>) -> Array1<f64> {
    Array1::from_iter(m.iter().copied())
}

fn unflatten(v: Array1<f64>, h: usize, c: usize) -> Array2<f64> {
    v.into_shape_with_order((h, c)).expect("length h*c")
}

fn check_hc(what: &'static str, m: ArrayView2<f64>, h: usize, c: usize) -> Result<()> {
    if m.dim() != (h, c) {
        return Err(F2aError::shape(what, format!("{h}x{c}"), format!("{:?}", m.dim())));
    }
    Ok(())
}

/// Softmax with the max logit subtracted.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn scale_forecast(x_hat: ArrayView2<f64>, ws: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, c) = x_hat.dim();
    if ws.dim() != (h * c, h * c) {
        return Err(F2aError::shape("Ws", format!("{0}x{0}", h * c), format!("{:?}", ws.dim())));
    }
    Ok(unflatten(flat(x_hat).dot(ws), h, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    /// kH x C, retrieved horizons stacked along time.
    pub o_hat: Array2<f64>,
    /// kH, sums to one.
    pub phi: Array1<f64>,
    /// H x C
    pub h1: Array2<f64>,
}

pub fn aggregate_stage1(o: &[Array2<f64>], w1: &Array1<f64>) -> Result<Stage1> {
    let first = o.first().ok_or_else(|| F2aError::InvalidArgument {
        arg: "k",
        reason: "stage-1 aggregation needs at least one retrieved horizon".into(),
    })?;
    let (h, c) = first.dim();
    if w1.len() != c {
        return Err(F2aError::shape("W1", c, w1.len()));
    }
    for z in o {
        check_hc("retrieved horizon", z.view(), h, c)?;
    }
    let views: Vec<_> = o.iter().map(|z| z.view()).collect();
    let o_hat = ndarray::concatenate(Axis(0), &views).expect("uniform shapes");
    let phi = softmax(o_hat.dot(w1).view());
    let mut h1 = Array2::zeros((h, c));
    for (r, row) in o_hat.rows().into_iter().enumerate() {
        h1.row_mut(r % h).scaled_add(phi[r], &row);
    }
    Ok(Stage1 { o_hat, phi, h1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2 {
    pub h2: Array2<f64>,
    pub phi1: f64,
    pub phi2: f64,
}

pub fn fuse_stage2(x_s: ArrayView2<f64>, h1: ArrayView2<f64>, w2: &Array1<f64>) -> Result<Stage2> {
    let (h, c) = x_s.dim();
    check_hc("h1", h1, h, c)?;
    if w2.len() != h * c {
        return Err(F2aError::shape("W2", h * c, w2.len()));
    }
    let a = flat(x_s).dot(w2);
    let b = flat(h1).dot(w2);
    let w = softmax(ndarray::arr1(&[a, b]).view());
    let (phi1, phi2) = (w[0], w[1]);
    let h2 = &x_s * phi1 + &h1 * phi2;
    Ok(Stage2 { h2, phi1, phi2 })
}

/// Returns `(pre-clamp logits, probabilities)`.
pub fn anomaly_head_logits(x_f: ArrayView2<f64>, wap: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let hc = x_f.len();
    if wap.nrows() != hc {
        return Err(F2aError::shape("Wap rows", hc, wap.nrows()));
    }
    let raw = flat(x_f).dot(wap);
    let p = raw.mapv(sigmoid);
    Ok((raw, p))
}

pub fn anomaly_head(x_f: ArrayView2<f64>, wap: &Array2<f64>) -> Result<Array1<f64>> {
    anomaly_head_logits(x_f, wap).map(|(_, p)| p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTrace {
    pub stage1: Stage1,
    pub stage2: Stage2,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub embedding: Embedding,
    pub x_hat: Array2<f64>,
    pub x_s: Array2<f64>,
    /// Absent when k = 0.
    pub retrieval: Option<RetrievalTrace>,
    pub x_f: Array2<f64>,
    /// Pre-clamp logits.
    pub logits: Array1<f64>,
    pub p: Array1<f64>,
}

impl ForwardTrace {
    pub fn k(&self) -> usize {
        self.retrieval.as_ref().map_or(0, |r| r.indices.len())
    }
}

/// Fusion and head on top of a base embedding/forecast pair.
pub fn forward_from_base(
    embedding: Embedding,
    x_hat: Array2<f64>,
    retrieved: Option<&RetrievedSet>,
    params: &FusionParams,
) -> Result<ForwardTrace> {
    params.check()?;
    check_hc("base forecast", x_hat.view(), params.horizon(), params.channels())?;
    let x_s = scale_forecast(x_hat.view(), &params.ws)?;
    let (retrieval, x_f) = match retrieved {
        Some(set) if set.k() > 0 => {
            let stage1 = aggregate_stage1(&set.horizons, &params.w1)?;
            let stage2 = fuse_stage2(x_s.view(), stage1.h1.view(), &params.w2)?;
            let x_f = stage2.h2.clone();
            let trace = RetrievalTrace {
                stage1,
                stage2,
                indices: set.indices.clone(),
                distances: set.distances.clone(),
            };
            (Some(trace), x_f)
        }
        _ => (None, x_s.clone()),
    };
    let (logits, p) = anomaly_head_logits(x_f.view(), &params.wap)?;
    Ok(ForwardTrace {
        embedding,
        x_hat,
        x_s,
        retrieval,
        x_f,
        logits,
        p,
    })
}

/// encode → decode → scale → (retrieve, aggregate, fuse) → head.
pub fn f2a_forward(
    x: ArrayView2<f64>,
    forecaster: &ForecasterParams,
    store: Option<&RetrievalStore>,
    k: usize,
    params: &FusionParams,
) -> Result<ForwardTrace> {
    let embedding = forecaster.encode(x)?;
    let x_hat = forecaster.decode(&embedding)?;
    let retrieved = if k == 0 {
        None
    } else {
        let store = store.ok_or_else(|| F2aError::Retrieval(format!("k = {k} but no store given")))?;
        Some(store.query(&embedding, k)?)
    };
    forward_from_base(embedding, x_hat, retrieved.as_ref(), params)
}

/// Loss gradients arriving at the trace outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    /// dL/dp, length H.
    pub d_p: Array1<f64>,
    /// dL/dx̂ᶠ, H x C.
    pub d_x_f: Array2<f64>,
    /// dL/dx̂ taken directly on the base forecast, H x C.
    pub d_x_hat: Array2<f64>,
}

impl Upstream {
    pub fn zeros(h: usize, c: usize) -> Self {
        Upstream {
            d_p: Array1::zeros(h),
            d_x_f: Array2::zeros((h, c)),
            d_x_hat: Array2::zeros((h, c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub w1: Array1<f64>,
    pub w2: Array1<f64>,
    pub ws: Array2<f64>,
    pub wap: Array2<f64>,
}

/// Gradients for every parameter trained in the fusion stage. The encoder is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBackward {
    pub fusion: FusionGrads,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

pub fn f2a_backward(
    trace: &ForwardTrace,
    upstream: &Upstream,
    params: &FusionParams,
    forecaster: &ForecasterParams,
) -> Result<FusionBackward> {
    params.check()?;
    let (h, c) = (params.horizon(), params.channels());
    for (what, m) in [
        ("trace x_hat", trace.x_hat.view()),
        ("trace x_s", trace.x_s.view()),
        ("trace x_f", trace.x_f.view()),
        ("upstream d_x_f", upstream.d_x_f.view()),
        ("upstream d_x_hat", upstream.d_x_hat.view()),
    ] {
        check_hc(what, m, h, c)?;
    }
    if trace.p.len() != h || trace.logits.len() != h || upstream.d_p.len() != h {
        return Err(F2aError::shape("trace p / upstream d_p", h, trace.p.len()));
    }

    // Head.
    let d_logit = Array1::from_iter(trace.p.iter().zip(&trace.logits).zip(&upstream.d_p).map(
        |((&p, &z), &g)| {
            if z.abs() > LOGIT_CLAMP {
                0.0
            } else {
                g * p * (1.0 - p)
            }
        },
    ));
    let xf_flat = flat(trace.x_f.view());
    let d_wap = outer(xf_flat.view(), d_logit.view());
    let d_xf_flat = flat(upstream.d_x_f.view()) + params.wap.dot(&d_logit);

    let xs_flat = flat(trace.x_s.view());
    let mut d_w1 = Array1::zeros(c);
    let mut d_w2 = Array1::zeros(h * c);
    let d_xs_flat = match &trace.retrieval {
        None => d_xf_flat,
        Some(rt) => {
            let Stage1 { o_hat, phi, h1 } = &rt.stage1;
            let Stage2 { phi1, phi2, .. } = rt.stage2;
            if h1.dim() != (h, c) || o_hat.ncols() != c || o_hat.nrows() != phi.len() || phi.len() % h != 0 {
                return Err(F2aError::shape(
                    "retrieval trace",
                    format!("h1 {h}x{c}, o_hat kH x {c}"),
                    format!("h1 {:?}, o_hat {:?}, phi {}", h1.dim(), o_hat.dim(), phi.len()),
                ));
            }
            let h1_flat = flat(h1.view());
            // Skip fusion.
            let d_phi1 = d_xf_flat.dot(&xs_flat);
            let d_phi2 = d_xf_flat.dot(&h1_flat);
            let mean = phi1 * d_phi1 + phi2 * d_phi2;
            let d_a = phi1 * (d_phi1 - mean);
            let d_b = phi2 * (d_phi2 - mean);
            d_w2 = &xs_flat * d_a + &h1_flat * d_b;
            let d_xs = &d_xf_flat * phi1 + &params.w2 * d_a;
            let d_h1 = unflatten(&d_xf_flat * phi2 + &params.w2 * d_b, h, c);

            // Stage-1 attention over all kH retrieved rows.
            let d_phi = Array1::from_iter(
                o_hat
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(r, row)| row.dot(&d_h1.row(r % h))),
            );
            let centre = phi.dot(&d_phi);
            let d_logits1 = phi * &(d_phi - centre);
            d_w1 = o_hat.t().dot(&d_logits1);
            d_xs
        }
    };

    // Scaling layer.
    let xhat_flat = flat(trace.x_hat.view());
    let d_ws = outer(xhat_flat.view(), d_xs_flat.view());
    let d_xhat = unflatten(params.ws.dot(&d_xs_flat), h, c) + &upstream.d_x_hat;

    let (w_dec, b_dec, _) = decoder_backward(&trace.embedding, d_xhat.view(), forecaster);
    Ok(FusionBackward {
        fusion: FusionGrads {
            w1: d_w1,
            w2: d_w2,
            ws: crate::forecaster::standard(d_ws),
            wap: crate::forecaster::standard(d_wap),
        },
        w_dec,
        b_dec,
    })
}
