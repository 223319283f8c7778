//! Versioned binary checkpoints with a human-readable sidecar manifest.
//!
//! Layout (all little-endian): magic `METARCKPT`, format version u32, shape
//! header (entity count, embedding width, layer count, per-layer out/in),
//! leaky slope, iteration, best dev Hits@10 (NaN when absent), config
//! fingerprint, Adam hyperparameters and step counter, then every tensor as
//! f64 row-major: parameters, first moments, second moments, each block in
//! the order embeddings, layer0.w, layer0.b, layer1.w, … Reloading at the
//! same precision reproduces forward losses bit-identically.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, Layer, Matrix, MetaLearnerParams, ModelParams};
use crate::rng::fnv1a;
use crate::scalar::Scalar;
use crate::train::AdamState;

const MAGIC: &[u8; 9] = b"METARCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ModelParams<S>,
    pub adam: AdamState<S>,
    /// Completed training iterations.
    pub iteration: u64,
    pub best_dev_hits10: Option<f64>,
    pub config_fingerprint: u64,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn fresh(params: ModelParams<S>, lr: f64, config_fingerprint: u64) -> Self {
        let adam = AdamState::new(&params, lr);
        Self { params, adam, iteration: 0, best_dev_hits10: None, config_fingerprint }
    }
}

/// Fingerprint of the canonical config text, stored in the checkpoint so a
/// mismatched resume is detectable.
pub fn config_fingerprint(canonical: &str) -> u64 {
    fnv1a(canonical.as_bytes())
}

pub(super) fn io_err(path: &Path, source: io::Error) -> Error {
    if source.kind() == io::ErrorKind::NotFound {
        Error::MissingFile(path.into())
    } else {
        Error::Io { path: path.into(), source }
    }
}

pub(super) struct Writer<W: Write> {
    pub(super) w: W,
}

impl<W: Write> Writer<W> {
    pub(super) fn u32(&mut self, x: u32) -> io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    pub(super) fn u64(&mut self, x: u64) -> io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    pub(super) fn f64(&mut self, x: f64) -> io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    pub(super) fn scalars<S: Scalar>(&mut self, xs: &[S]) -> io::Result<()> {
        for &x in xs {
            self.f64(x.to_f64())?;
        }
        Ok(())
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".manifest.txt");
    name.into()
}

/// Tensor names and shapes in serialization order, for the manifest.
fn tensor_manifest<S: Scalar>(ckpt: &Checkpoint<S>) -> Vec<String> {
    let emb = &ckpt.params.embeddings;
    let mut lines = Vec::new();
    for prefix in ["", "adam.m.", "adam.v."] {
        lines.push(format!("tensor {prefix}embeddings {} {}", emb.n_rows(), emb.dim()));
        for (i, layer) in ckpt.params.learner.layers.iter().enumerate() {
            lines.push(format!("tensor {prefix}layer{i}.w {} {}", layer.w.rows, layer.w.cols));
            lines.push(format!("tensor {prefix}layer{i}.b {}", layer.b.len()));
        }
    }
    lines
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    let write = || -> io::Result<()> {
        let file = fs::File::create(path)?;
        let mut w = Writer { w: BufWriter::new(file) };
        w.w.write_all(MAGIC)?;
        w.u32(FORMAT_VERSION)?;

        let emb = &ckpt.params.embeddings;
        let layers = &ckpt.params.learner.layers;
        w.u64(emb.n_rows() as u64)?;
        w.u64(emb.dim() as u64)?;
        w.u64(layers.len() as u64)?;
        for layer in layers {
            w.u64(layer.w.rows as u64)?;
            w.u64(layer.w.cols as u64)?;
        }
        w.f64(ckpt.params.learner.slope.to_f64())?;
        w.u64(ckpt.iteration)?;
        w.f64(ckpt.best_dev_hits10.unwrap_or(f64::NAN))?;
        w.u64(ckpt.config_fingerprint)?;
        w.f64(ckpt.adam.lr)?;
        w.f64(ckpt.adam.b1)?;
        w.f64(ckpt.adam.b2)?;
        w.f64(ckpt.adam.eps)?;
        w.u64(ckpt.adam.t)?;

        w.scalars(emb.data())?;
        for layer in layers {
            w.scalars(&layer.w.data)?;
            w.scalars(&layer.b)?;
        }
        w.scalars(ckpt.adam.emb_m.data())?;
        for (wm, bm) in ckpt.adam.w_m.iter().zip(&ckpt.adam.b_m) {
            w.scalars(&wm.data)?;
            w.scalars(bm)?;
        }
        w.scalars(ckpt.adam.emb_v.data())?;
        for (wv, bv) in ckpt.adam.w_v.iter().zip(&ckpt.adam.b_v) {
            w.scalars(&wv.data)?;
            w.scalars(bv)?;
        }
        w.w.flush()
    };
    write().map_err(|e| io_err(path, e))?;

    let manifest = format!(
        "format {FORMAT_VERSION}\niteration {}\nfingerprint {:#018x}\n{}\n",
        ckpt.iteration,
        ckpt.config_fingerprint,
        tensor_manifest(ckpt).join("\n")
    );
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))
}

pub(super) struct Reader<'a> {
    pub(super) buf: &'a [u8],
    pub(super) pos: usize,
    pub(super) path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(super) fn bad(&self, reason: impl Into<String>) -> Error {
        Error::BadCheckpoint { path: self.path.into(), reason: reason.into() }
    }

    pub(super) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(super) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(super) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(super) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(super) fn dim(&mut self, what: &str) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x).map_err(|_| self.bad(format!("{what} {x} does not fit in memory")))
    }

    pub(super) fn scalars<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.bad("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };

    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.bad("bad magic: not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("unsupported format version {version}")));
    }

    let n_entities = r.dim("entity count")?;
    let dim = r.dim("embedding width")?;
    let n_layers = r.dim("layer count")?;
    if n_entities == 0 || dim == 0 || n_layers == 0 {
        return Err(r.bad("empty model shape"));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = r.dim("layer rows")?;
        let cols = r.dim("layer cols")?;
        shapes.push((rows, cols));
    }
    let slope = r.f64()?;
    if !slope.is_finite() {
        return Err(r.bad("non-finite activation slope"));
    }
    let iteration = r.u64()?;
    let best = r.f64()?;
    let best_dev_hits10 = if best.is_nan() { None } else { Some(best) };
    let config_fingerprint = r.u64()?;
    let lr = r.f64()?;
    let b1 = r.f64()?;
    let b2 = r.f64()?;
    let eps = r.f64()?;
    let t = r.u64()?;
    if !(lr.is_finite() && lr > 0.0)
        || !(0.0..1.0).contains(&b1)
        || !(0.0..1.0).contains(&b2)
        || !(eps.is_finite() && eps > 0.0)
    {
        return Err(r.bad("invalid optimizer hyperparameters"));
    }

    let emb_len = n_entities
        .checked_mul(dim)
        .ok_or_else(|| r.bad("embedding tensor too large"))?;
    let read_block = |r: &mut Reader| -> Result<(EmbeddingTable<S>, Vec<Matrix<S>>, Vec<Vec<S>>)> {
        let emb_data = r.scalars::<S>(emb_len)?;
        let emb = EmbeddingTable::from_fn(n_entities, dim, |row, col| emb_data[row * dim + col]);
        let mut ws = Vec::with_capacity(n_layers);
        let mut bs = Vec::with_capacity(n_layers);
        for &(rows, cols) in &shapes {
            let len = rows.checked_mul(cols).ok_or_else(|| r.bad("layer tensor too large"))?;
            let data = r.scalars::<S>(len)?;
            ws.push(Matrix { rows, cols, data });
            bs.push(r.scalars::<S>(rows)?);
        }
        Ok((emb, ws, bs))
    };

    let (embeddings, ws, bs) = read_block(&mut r)?;
    let (emb_m, w_m, b_m) = read_block(&mut r)?;
    let (emb_v, w_v, b_v) = read_block(&mut r)?;
    if r.pos != buf.len() {
        return Err(r.bad(format!("trailing data: {} extra bytes", buf.len() - r.pos)));
    }

    let layers: Vec<Layer<S>> =
        ws.into_iter().zip(bs).map(|(w, b)| Layer { w, b }).collect();
    let learner = MetaLearnerParams { layers, slope: S::from_f64(slope) };
    learner
        .check_chain(dim)
        .map_err(|e| r.bad(format!("inconsistent layer chain: {e}")))?;
    let params = ModelParams::new(embeddings, learner);

    let adam = AdamState { lr, b1, b2, eps, t, emb_m, emb_v, w_m, w_v, b_m, b_v };
    Ok(Checkpoint { params, adam, iteration, best_dev_hits10, config_fingerprint })
}
