//! Built-in base forecaster: a shared per-channel tanh encoder `L -> D` and a
//! shared affine decoder `D -> H`.
//!
//! The encoder output doubles as the retrieval embedding. Forecasts and
//! embeddings from other backbones can be imported through the `F2AE`
//! interchange file instead.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::binio::{self, check_dim, Decoder, Encoder};
use crate::dataset::Origin;
use crate::error::{F2aError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterParams {
    /// L x D
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// D x H
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub encoder_frozen: bool,
}

impl ForecasterParams {
    /// Uniform(±1/√fan_in) weights, zero biases.
    pub fn init(l: usize, d: usize, h: usize, rng: &mut impl Rng) -> Self {
        let enc = 1.0 / (l as f64).sqrt();
        let dec = 1.0 / (d as f64).sqrt();
        ForecasterParams {
            w_enc: Array2::from_shape_fn((l, d), |_| rng.gen_range(-enc..enc)),
            b_enc: Array1::zeros(d),
            w_dec: Array2::from_shape_fn((d, h), |_| rng.gen_range(-dec..dec)),
            b_dec: Array1::zeros(h),
            encoder_frozen: false,
        }
    }

    pub fn zeros(l: usize, d: usize, h: usize) -> Self {
        ForecasterParams {
            w_enc: Array2::zeros((l, d)),
            b_enc: Array1::zeros(d),
            w_dec: Array2::zeros((d, h)),
            b_dec: Array1::zeros(h),
            encoder_frozen: false,
        }
    }

    pub fn context_len(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Embedding> {
        encode(x, self)
    }

    pub fn decode(&self, e: &Embedding) -> Result<Array2<f64>> {
        decode(e, self)
    }

    /// Bitwise checksum of the encoder weights.
    pub fn encoder_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.w_enc.iter().chain(self.b_enc.iter()) {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

/// Per-channel embedding rows, C x D.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    e: Array2<f64>,
}

impl Embedding {
    pub fn new(e: Array2<f64>) -> Self {
        Embedding {
            e: e.as_standard_layout().into_owned(),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.e
    }

    /// Row-major flattening by channel, length C·D.
    pub fn flat(&self) -> &[f64] {
        self.e.as_slice().expect("standard layout")
    }

    pub fn channels(&self) -> usize {
        self.e.nrows()
    }

    pub fn dim(&self) -> usize {
        self.e.ncols()
    }
}

pub fn encode(x: ArrayView2<f64>, params: &ForecasterParams) -> Result<Embedding> {
    let l = params.context_len();
    if x.nrows() != l || x.ncols() == 0 {
        return Err(F2aError::shape("context window", format!("{l} x C"), format!("{:?}", x.dim())));
    }
    let mut e = x.t().dot(&params.w_enc);
    e += &params.b_enc;
    e.mapv_inplace(f64::tanh);
    Ok(Embedding::new(e))
}

/// Returns the H x C forecast.
pub fn decode(e: &Embedding, params: &ForecasterParams) -> Result<Array2<f64>> {
    let d = params.embed_dim();
    if e.dim() != d {
        return Err(F2aError::shape("embedding", format!("C x {d}"), format!("{:?}", e.matrix().dim())));
    }
    let mut out = e.matrix().dot(&params.w_dec);
    out += &params.b_dec;
    Ok(out.reversed_axes().as_standard_layout().into_owned())
}

/// Gradients for the forecaster's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterGrads {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl ForecasterGrads {
    pub fn zeros_like(p: &ForecasterParams) -> Self {
        ForecasterGrads {
            w_enc: Array2::zeros(p.w_enc.raw_dim()),
            b_enc: Array1::zeros(p.b_enc.raw_dim()),
            w_dec: Array2::zeros(p.w_dec.raw_dim()),
            b_dec: Array1::zeros(p.b_dec.raw_dim()),
        }
    }
}

/// Products of transposed views can come back column-major; flat access needs row-major.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Decoder gradients plus the gradient flowing back into the embedding (C x D).
pub fn decoder_backward(
    e: &Embedding,
    d_forecast: ArrayView2<f64>,
    params: &ForecasterParams,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    // forecast^T = e · W_dec + b_dec  (C x H)
    let d_out_t = d_forecast.t();
    let d_w_dec = standard(e.matrix().t().dot(&d_out_t));
    let d_b_dec = d_out_t.sum_axis(Axis(0));
    let d_e = d_out_t.dot(&params.w_dec.t());
    (d_w_dec, d_b_dec, d_e)
}

/// Full forecaster gradient for a loss whose gradient w.r.t. the forecast is `d_forecast`.
pub fn forecaster_backward(
    x: ArrayView2<f64>,
    e: &Embedding,
    d_forecast: ArrayView2<f64>,
    params: &ForecasterParams,
) -> ForecasterGrads {
    let (w_dec, b_dec, d_e) = decoder_backward(e, d_forecast, params);
    let d_pre = &d_e * &e.matrix().mapv(|v| 1.0 - v * v);
    ForecasterGrads {
        w_enc: standard(x.dot(&d_pre)),
        b_enc: d_pre.sum_axis(Axis(0)),
        w_dec,
        b_dec,
    }
}

pub const INTERCHANGE_MAGIC: [u8; 4] = *b"F2AE";
pub const INTERCHANGE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterchangeDims {
    pub channels: usize,
    pub embed_dim: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalRecord {
    pub embedding: Embedding,
    /// H x C
    pub forecast: Array2<f64>,
}

/// Per-window embeddings and forecasts from an external backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSet {
    pub dims: InterchangeDims,
    pub windows: BTreeMap<Origin, ExternalRecord>,
}

impl ExternalSet {
    pub fn new(dims: InterchangeDims) -> Self {
        ExternalSet {
            dims,
            windows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, origin: Origin, record: ExternalRecord) -> Result<()> {
        let d = self.dims;
        if record.embedding.matrix().dim() != (d.channels, d.embed_dim) {
            return Err(F2aError::shape(
                "interchange embedding",
                format!("{}x{}", d.channels, d.embed_dim),
                format!("{:?}", record.embedding.matrix().dim()),
            ));
        }
        if record.forecast.dim() != (d.horizon, d.channels) {
            return Err(F2aError::shape(
                "interchange forecast",
                format!("{}x{}", d.horizon, d.channels),
                format!("{:?}", record.forecast.dim()),
            ));
        }
        self.windows.insert(origin, record);
        Ok(())
    }

    pub fn get(&self, origin: &Origin) -> Option<&ExternalRecord> {
        self.windows.get(origin)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.dims;
        let mut enc = Encoder::new(&INTERCHANGE_MAGIC, INTERCHANGE_VERSION);
        enc.u32(d.channels as u32);
        enc.u32(d.embed_dim as u32);
        enc.u32(d.horizon as u32);
        enc.u32(u32::try_from(self.windows.len()).map_err(|_| F2aError::InvalidArgument {
            arg: "records",
            reason: "more than u32::MAX windows".into(),
        })?);
        for (origin, rec) in &self.windows {
            enc.name(&origin.series)?;
            enc.u64(origin.start as u64);
            enc.f64s(rec.embedding.flat());
            enc.f64s(rec.forecast.as_standard_layout().iter());
        }
        Ok(enc.into_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes()?)
    }
}

/// Loads an interchange file, validating its dims against any that are given.
pub fn load_external(
    path: &Path,
    channels: Option<usize>,
    embed_dim: Option<usize>,
    horizon: Option<usize>,
) -> Result<ExternalSet> {
    let data = binio::read_file(path)?;
    let mut dec = Decoder::open(path, &data, &INTERCHANGE_MAGIC, INTERCHANGE_VERSION)?;
    let c = dec.u32("C")? as usize;
    let d = dec.u32("D")? as usize;
    let h = dec.u32("H")? as usize;
    check_dim(&dec, "C", c, channels)?;
    check_dim(&dec, "D", d, embed_dim)?;
    check_dim(&dec, "H", h, horizon)?;
    let n = dec.u32("record count")? as usize;
    let mut set = ExternalSet::new(InterchangeDims {
        channels: c,
        embed_dim: d,
        horizon: h,
    });
    for i in 0..n {
        let series = dec.name()?;
        let start = dec.u64("start index")? as usize;
        let emb = dec.f64s(c * d, "embedding")?;
        let fc = dec.f64s(h * c, "forecast")?;
        let origin = Origin { series, start };
        if set.windows.contains_key(&origin) {
            return Err(dec.corrupt(format!("record {i} duplicates window {origin:?}")));
        }
        set.insert(
            origin,
            ExternalRecord {
                embedding: Embedding::new(Array2::from_shape_vec((c, d), emb).unwrap()),
                forecast: Array2::from_shape_vec((h, c), fc).unwrap(),
            },
        )?;
    }
    dec.finish()?;
    Ok(set)
}
