//! Full parameter set (forecaster + fusion) and its checkpoint format.
//!
//! Checkpoint layout, little-endian: magic `F2AM`, version u32, dims
//! `L C D H k` as u32, then f64 arrays in [`PARAM_NAMES`] order (each
//! row-major), then a CRC32 of every preceding byte.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::binio::{self, check_dim, Decoder, Encoder};
use crate::error::{F2aError, Result};
use crate::forecaster::{ForecasterGrads, ForecasterParams};
use crate::fusion::{FusionBackward, FusionParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"F2AM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed parameter order shared by checkpoints, gradients and the optimizer.
pub const PARAM_NAMES: [&str; 8] = ["W_enc", "b_enc", "W_dec", "b_dec", "Ws", "W1", "W2", "Wap"];

/// Indices into [`PARAM_NAMES`] belonging to the encoder.
pub const ENCODER_PARAMS: [usize; 2] = [0, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub context: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub horizon: usize,
    pub k: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.channels == 0 || self.embed_dim == 0 || self.horizon == 0 {
            return Err(F2aError::Config(format!("model dims must be positive, got {self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> [(usize, usize); 8] {
        let (l, c, d, h) = (self.context, self.channels, self.embed_dim, self.horizon);
        let hc = h * c;
        [(l, d), (1, d), (d, h), (1, h), (hc, hc), (1, c), (1, hc), (hc, h)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub forecaster: ForecasterParams,
    pub fusion: FusionParams,
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

impl Model {
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        Ok(Model {
            dims,
            forecaster: ForecasterParams::init(dims.context, dims.embed_dim, dims.horizon, rng),
            fusion: FusionParams::init(dims.horizon, dims.channels, rng),
        })
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        let f = &self.forecaster;
        let u = &self.fusion;
        [
            slice2(&f.w_enc),
            slice1(&f.b_enc),
            slice2(&f.w_dec),
            slice1(&f.b_dec),
            slice2(&u.ws),
            slice1(&u.w1),
            slice1(&u.w2),
            slice2(&u.wap),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        let f = &mut self.forecaster;
        let u = &mut self.fusion;
        [
            f.w_enc.as_slice_mut().unwrap(),
            f.b_enc.as_slice_mut().unwrap(),
            f.w_dec.as_slice_mut().unwrap(),
            f.b_dec.as_slice_mut().unwrap(),
            u.ws.as_slice_mut().unwrap(),
            u.w1.as_slice_mut().unwrap(),
            u.w2.as_slice_mut().unwrap(),
            u.wap.as_slice_mut().unwrap(),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut enc = Encoder::new(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        for v in [d.context, d.channels, d.embed_dim, d.horizon, d.k] {
            enc.u32(v as u32);
        }
        for t in self.tensors() {
            enc.f64s(t);
        }
        let crc = crc32fast::hash(enc.bytes());
        enc.u32(crc);
        enc.into_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes())
    }

    /// Loads a checkpoint; `Some` fields of `expected` are checked against it.
    pub fn load(path: &Path, expected: Option<ModelDims>) -> Result<Self> {
        let data = binio::read_file(path)?;
        let mut dec = Decoder::open(path, &data, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut raw = [0usize; 5];
        for (slot, name) in raw.iter_mut().zip(["L", "C", "D", "H", "k"]) {
            *slot = dec.u32(name)? as usize;
        }
        let dims = ModelDims {
            context: raw[0],
            channels: raw[1],
            embed_dim: raw[2],
            horizon: raw[3],
            k: raw[4],
        };
        if let Some(e) = expected {
            check_dim(&dec, "L", dims.context, Some(e.context))?;
            check_dim(&dec, "C", dims.channels, Some(e.channels))?;
            check_dim(&dec, "D", dims.embed_dim, Some(e.embed_dim))?;
            check_dim(&dec, "H", dims.horizon, Some(e.horizon))?;
            check_dim(&dec, "k", dims.k, Some(e.k))?;
        }
        dims.validate().map_err(|e| dec.corrupt(e.to_string()))?;
        let body: usize = dims.shapes().iter().map(|(r, c)| r * c).sum();
        if dec.remaining() != body * 8 + 4 {
            return Err(dec.corrupt(format!(
                "expected {} payload bytes for dims {dims:?}, found {}",
                body * 8 + 4,
                dec.remaining()
            )));
        }
        let mut arrays = Vec::with_capacity(8);
        for (name, (r, c)) in PARAM_NAMES.iter().zip(dims.shapes()) {
            arrays.push((dec.f64s(r * c, name)?, r, c));
        }
        let payload_end = dec.position();
        let stored = dec.u32("crc")?;
        dec.finish()?;
        let computed = crc32fast::hash(&data[..payload_end]);
        if stored != computed {
            return Err(F2aError::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut it = arrays.into_iter();
        let mut mat = || {
            let (v, r, c) = it.next().unwrap();
            Array2::from_shape_vec((r, c), v).unwrap()
        };
        let w_enc = mat();
        let b_enc = mat().into_shape_with_order(dims.embed_dim).unwrap();
        let w_dec = mat();
        let b_dec = mat().into_shape_with_order(dims.horizon).unwrap();
        let ws = mat();
        let w1 = mat().into_shape_with_order(dims.channels).unwrap();
        let w2 = mat().into_shape_with_order(dims.horizon * dims.channels).unwrap();
        let wap = mat();
        Ok(Model {
            dims,
            forecaster: ForecasterParams {
                w_enc,
                b_enc,
                w_dec,
                b_dec,
                encoder_frozen: true,
            },
            fusion: FusionParams { w1, w2, ws, wap },
        })
    }
}

/// Gradient buffers in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: [Vec<f64>; 8],
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        ModelGrads {
            tensors: model.tensors().map(|t| vec![0.0; t.len()]),
        }
    }

    fn add_at(&mut self, idx: usize, src: &[f64], scale: f64) {
        for (d, s) in self.tensors[idx].iter_mut().zip(src) {
            *d += scale * s;
        }
    }

    pub fn add_fusion(&mut self, g: &FusionBackward, scale: f64, train_decoder: bool) {
        if train_decoder {
            self.add_at(2, slice2(&g.w_dec), scale);
            self.add_at(3, slice1(&g.b_dec), scale);
        }
        self.add_at(4, slice2(&g.fusion.ws), scale);
        self.add_at(5, slice1(&g.fusion.w1), scale);
        self.add_at(6, slice1(&g.fusion.w2), scale);
        self.add_at(7, slice2(&g.fusion.wap), scale);
    }

    pub fn add_forecaster(&mut self, g: &ForecasterGrads, scale: f64) {
        self.add_at(0, slice2(&g.w_enc), scale);
        self.add_at(1, slice1(&g.b_enc), scale);
        self.add_at(2, slice2(&g.w_dec), scale);
        self.add_at(3, slice1(&g.b_dec), scale);
    }
}
