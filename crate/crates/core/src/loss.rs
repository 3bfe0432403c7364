//! Joint objective: focal loss on the per-timestep probabilities plus an
//! anomaly-upweighted MAE on the forecast.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{F2aError, Result};
use crate::fusion::{ForwardTrace, Upstream};

/// Which forecast the MAE term is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastTarget {
    /// Post-fusion forecast x̂ᶠ.
    Fused,
    /// Decoder output x̂.
    Base,
}

impl std::str::FromStr for ForecastTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fused" => Ok(ForecastTarget::Fused),
            "base" => Ok(ForecastTarget::Base),
            other => Err(format!("expected `fused` or `base`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Forecast-loss weight.
    pub lambda: f64,
    /// Forecast-error multiplier at anomalous timesteps.
    pub psi: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub eps_p: f64,
    pub forecast_target: ForecastTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            psi: 3.0,
            alpha: 0.25,
            gamma: 2.0,
            threshold: 0.5,
            eps_p: 1e-7,
            forecast_target: ForecastTarget::Fused,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, want: &str, v: f64| Err(F2aError::Config(format!("{key} = {v}: expected {want}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("loss.lambda", "a finite value >= 0", self.lambda);
        }
        if !(self.psi >= 1.0 && self.psi.is_finite()) {
            return bad("loss.psi", "a finite value >= 1", self.psi);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("loss.alpha", "a value in (0, 1)", self.alpha);
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("loss.gamma", "a finite value >= 0", self.gamma);
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("loss.threshold", "a value in (0, 1)", self.threshold);
        }
        if !(self.eps_p > 0.0 && self.eps_p < 0.5) {
            return bad("loss.eps_p", "a value in (0, 0.5)", self.eps_p);
        }
        Ok(())
    }
}

fn check_len(p: usize, y: usize) -> Result<()> {
    if p != y {
        return Err(F2aError::shape("labels vs probabilities", p, y));
    }
    Ok(())
}

/// Per-timestep focal term and its derivative w.r.t. the unclamped probability.
fn focal_term(p: f64, y: u8, cfg: &LossConfig) -> (f64, f64) {
    let (lo, hi) = (cfg.eps_p, 1.0 - cfg.eps_p);
    let clamped = p < lo || p > hi;
    let p = p.clamp(lo, hi);
    let g = cfg.gamma;
    let (value, grad) = if y == 1 {
        let q = 1.0 - p;
        let mod_ = q.powf(g);
        let v = -cfg.alpha * mod_ * p.ln();
        // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
        let dmod = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * p.ln() };
        (v, cfg.alpha * (dmod - mod_ / p))
    } else {
        let q = 1.0 - p;
        let mod_ = p.powf(g);
        let v = -(1.0 - cfg.alpha) * mod_ * q.ln();
        // d/dp [-p^g ln(1-p)] = -g p^(g-1) ln(1-p) + p^g / (1-p)
        let dmod = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) * q.ln() };
        (v, (1.0 - cfg.alpha) * (mod_ / q - dmod))
    };
    (value, if clamped { 0.0 } else { grad })
}

/// Sum over timesteps of the binary focal loss.
pub fn focal_loss(p: ArrayView1<f64>, y: &[u8], cfg: &LossConfig) -> Result<f64> {
    check_len(p.len(), y.len())?;
    Ok(p.iter().zip(y).map(|(&p, &y)| focal_term(p, y, cfg).0).sum())
}

pub fn focal_loss_grad(p: ArrayView1<f64>, y: &[u8], cfg: &LossConfig) -> Result<Array1<f64>> {
    check_len(p.len(), y.len())?;
    Ok(p.iter().zip(y).map(|(&p, &y)| focal_term(p, y, cfg).1).collect())
}

fn check_forecast(x_hat: ArrayView2<f64>, z: ArrayView2<f64>, y: &[u8]) -> Result<()> {
    if x_hat.dim() != z.dim() {
        return Err(F2aError::shape("forecast vs truth", format!("{:?}", z.dim()), format!("{:?}", x_hat.dim())));
    }
    check_len(x_hat.nrows(), y.len())
}

/// `(1/H) Σ_t m_t Σ_c |x̂_tc − z_tc|` with `m_t = ψ` at labeled timesteps.
pub fn weighted_mae(x_hat: ArrayView2<f64>, z: ArrayView2<f64>, y: &[u8], psi: f64) -> Result<f64> {
    check_forecast(x_hat, z, y)?;
    let h = x_hat.nrows() as f64;
    let total: f64 = x_hat
        .rows()
        .into_iter()
        .zip(z.rows())
        .zip(y)
        .map(|((xr, zr), &yt)| {
            let m = if yt == 1 { psi } else { 1.0 };
            m * xr.iter().zip(zr.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    Ok(total / h)
}

/// Subgradient of [`weighted_mae`] w.r.t. the forecast, with sign(0) = 0.
pub fn weighted_mae_grad(x_hat: ArrayView2<f64>, z: ArrayView2<f64>, y: &[u8], psi: f64) -> Result<Array2<f64>> {
    check_forecast(x_hat, z, y)?;
    let h = x_hat.nrows() as f64;
    let mut g = Array2::zeros(x_hat.dim());
    for ((t, c), v) in g.indexed_iter_mut() {
        let m = if y[t] == 1 { psi } else { 1.0 };
        let d = x_hat[[t, c]] - z[[t, c]];
        *v = if d > 0.0 {
            m / h
        } else if d < 0.0 {
            -m / h
        } else {
            0.0
        };
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ap: f64,
    pub forecast: f64,
}

fn forecast_of<'a>(trace: &'a ForwardTrace, cfg: &LossConfig) -> ArrayView2<'a, f64> {
    match cfg.forecast_target {
        ForecastTarget::Fused => trace.x_f.view(),
        ForecastTarget::Base => trace.x_hat.view(),
    }
}

pub fn joint_loss(trace: &ForwardTrace, z: ArrayView2<f64>, y: &[u8], cfg: &LossConfig) -> Result<LossParts> {
    let ap = focal_loss(trace.p.view(), y, cfg)?;
    let forecast = weighted_mae(forecast_of(trace, cfg), z, y, cfg.psi)?;
    Ok(LossParts {
        total: ap + cfg.lambda * forecast,
        ap,
        forecast,
    })
}

/// Gradient of [`joint_loss`] w.r.t. the trace outputs, scaled by `weight`.
pub fn joint_loss_grad(
    trace: &ForwardTrace,
    z: ArrayView2<f64>,
    y: &[u8],
    cfg: &LossConfig,
    weight: f64,
) -> Result<Upstream> {
    let (h, c) = trace.x_f.dim();
    let mut up = Upstream::zeros(h, c);
    up.d_p = focal_loss_grad(trace.p.view(), y, cfg)? * weight;
    if cfg.lambda != 0.0 {
        let g = weighted_mae_grad(forecast_of(trace, cfg), z, y, cfg.psi)? * (cfg.lambda * weight);
        match cfg.forecast_target {
            ForecastTarget::Fused => up.d_x_f = g,
            ForecastTarget::Base => up.d_x_hat = g,
        }
    }
    Ok(up)
}

/// `ŷ_t = 1` iff `p_t > u`.
pub fn threshold_labels(p: ArrayView1<f64>, u: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v > u)).collect()
}
