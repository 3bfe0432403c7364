//! Retrieval database of `(embedding, horizon)` pairs with exact ℓ² k-NN.
//!
//! Queries are a flat scan over every record. Ties in distance go to the
//! lower record index so results are stable across platforms.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::binio::{self, check_dim, Decoder, Encoder};
use crate::dataset::{Origin, WindowSample};
use crate::error::{F2aError, Result};
use crate::forecaster::{Embedding, ForecasterParams};

pub const STORE_MAGIC: [u8; 4] = *b"F2AR";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreDims {
    pub channels: usize,
    pub embed_dim: usize,
    pub horizon: usize,
}

impl StoreDims {
    pub fn flat_len(&self) -> usize {
        self.channels * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub embedding: Vec<f64>,
    /// H x C
    pub horizon: Array2<f64>,
    pub origin: Origin,
}

/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalStore {
    dims: StoreDims,
    records: Vec<StoreRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    /// Record indices, nearest first.
    pub indices: Vec<usize>,
    /// Non-decreasing ℓ² distances.
    pub distances: Vec<f64>,
    /// k horizons, each H x C.
    pub horizons: Vec<Array2<f64>>,
}

impl RetrievedSet {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl RetrievalStore {
    pub fn from_records(dims: StoreDims, records: Vec<StoreRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.embedding.len() != dims.flat_len() {
                return Err(F2aError::Retrieval(format!(
                    "record {i}: embedding length {} != C·D = {}",
                    r.embedding.len(),
                    dims.flat_len()
                )));
            }
            if r.horizon.dim() != (dims.horizon, dims.channels) {
                return Err(F2aError::Retrieval(format!(
                    "record {i}: horizon {:?} != {}x{}",
                    r.horizon.dim(),
                    dims.horizon,
                    dims.channels
                )));
            }
        }
        Ok(RetrievalStore { dims, records })
    }

    pub fn dims(&self) -> StoreDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    /// Exact top-`k` by ℓ² distance.
    pub fn query(&self, e: &Embedding, k: usize) -> Result<RetrievedSet> {
        self.query_flat(e.flat(), k, |_| false)
    }

    /// Top-`k` among records whose origin is not rejected by `skip`.
    ///
    /// Training uses this to keep a window from retrieving its own horizon.
    pub fn query_excluding(&self, e: &Embedding, k: usize, skip: impl Fn(&Origin) -> bool) -> Result<RetrievedSet> {
        self.query_flat(e.flat(), k, skip)
    }

    pub fn query_flat(&self, q: &[f64], k: usize, skip: impl Fn(&Origin) -> bool) -> Result<RetrievedSet> {
        if k == 0 {
            return Err(F2aError::Retrieval(
                "k = 0: bypass retrieval instead of querying".into(),
            ));
        }
        if q.len() != self.dims.flat_len() {
            return Err(F2aError::shape("query embedding", self.dims.flat_len(), q.len()));
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut eligible = 0usize;
        for (index, rec) in self.records.iter().enumerate() {
            if skip(&rec.origin) {
                continue;
            }
            eligible += 1;
            let cand = Candidate {
                dist2: squared_l2(q, &rec.embedding),
                index,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        if eligible < k {
            return Err(F2aError::Retrieval(format!(
                "k = {k} exceeds the {eligible} eligible records"
            )));
        }
        let best = heap.into_sorted_vec();
        Ok(RetrievedSet {
            indices: best.iter().map(|c| c.index).collect(),
            distances: best.iter().map(|c| c.dist2.sqrt()).collect(),
            horizons: best
                .iter()
                .map(|c| self.records[c.index].horizon.clone())
                .collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.dims;
        let mut enc = Encoder::new(&STORE_MAGIC, STORE_VERSION);
        enc.u32(d.channels as u32);
        enc.u32(d.embed_dim as u32);
        enc.u32(d.horizon as u32);
        enc.u64(self.records.len() as u64);
        for r in &self.records {
            enc.f64s(&r.embedding);
            enc.f64s(r.horizon.as_standard_layout().iter());
            enc.name(&r.origin.series)?;
            enc.u64(r.origin.start as u64);
        }
        Ok(enc.into_bytes())
    }

    /// SHA-256 of the serialized store.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes().expect("names validated on build")).into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes()?)
    }

    /// Loads a store; any `Some` dim is checked against the file header.
    pub fn load(path: &Path, expected: Option<StoreDims>) -> Result<Self> {
        let data = binio::read_file(path)?;
        let mut dec = Decoder::open(path, &data, &STORE_MAGIC, STORE_VERSION)?;
        let dims = StoreDims {
            channels: dec.u32("C")? as usize,
            embed_dim: dec.u32("D")? as usize,
            horizon: dec.u32("H")? as usize,
        };
        if let Some(e) = expected {
            check_dim(&dec, "C", dims.channels, Some(e.channels))?;
            check_dim(&dec, "D", dims.embed_dim, Some(e.embed_dim))?;
            check_dim(&dec, "H", dims.horizon, Some(e.horizon))?;
        }
        let n = dec.u64("record count")? as usize;
        let per_record = 8 * (dims.flat_len() + dims.horizon * dims.channels) + 10;
        if n.saturating_mul(per_record) > dec.remaining() {
            return Err(dec.corrupt(format!("{n} records declared, body too short")));
        }
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let embedding = dec.f64s(dims.flat_len(), "embedding")?;
            let horizon = dec.f64s(dims.horizon * dims.channels, "horizon")?;
            let series = dec.name()?;
            let start = dec.u64("start index")? as usize;
            records.push(StoreRecord {
                embedding,
                horizon: Array2::from_shape_vec((dims.horizon, dims.channels), horizon).unwrap(),
                origin: Origin { series, start },
            });
        }
        dec.finish()?;
        RetrievalStore::from_records(dims, records)
    }
}

/// Builds a store from samples using the given encoder, preserving input order.
pub fn build_store(samples: &[WindowSample], encoder: &ForecasterParams) -> Result<RetrievalStore> {
    let pairs: Result<Vec<_>> = samples
        .iter()
        .map(|s| Ok((encoder.encode(s.x.view())?, s)))
        .collect();
    build_store_from_embeddings(pairs?.iter().map(|(e, s)| (e, s.z.view(), &s.origin)))
}

/// Builds a store from precomputed embeddings (built-in or imported).
pub fn build_store_from_embeddings<'a>(
    items: impl IntoIterator<Item = (&'a Embedding, ArrayView2<'a, f64>, &'a Origin)>,
) -> Result<RetrievalStore> {
    let mut dims: Option<StoreDims> = None;
    let mut records = Vec::new();
    for (e, z, origin) in items {
        let here = StoreDims {
            channels: e.channels(),
            embed_dim: e.dim(),
            horizon: z.nrows(),
        };
        if z.ncols() != e.channels() {
            return Err(F2aError::Retrieval(format!(
                "window {origin:?}: horizon has {} channels, embedding {}",
                z.ncols(),
                e.channels()
            )));
        }
        match dims {
            None => dims = Some(here),
            Some(d) if d != here => {
                return Err(F2aError::Retrieval(format!(
                    "window {origin:?}: dims {here:?} differ from first window {d:?}"
                )))
            }
            _ => {}
        }
        if origin.series.len() > u16::MAX as usize {
            return Err(F2aError::Retrieval(format!("series name of {} bytes too long", origin.series.len())));
        }
        records.push(StoreRecord {
            embedding: e.flat().to_vec(),
            horizon: z.to_owned(),
            origin: origin.clone(),
        });
    }
    let dims = dims.ok_or_else(|| F2aError::Retrieval("cannot build a store from zero samples".into()))?;
    RetrievalStore::from_records(dims, records)
}
