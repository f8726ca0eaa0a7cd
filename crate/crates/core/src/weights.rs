//! Network parameters and the LAWT tensor-table file format.
//!
//! A LAWT file is little-endian: magic `LAWT`, `u32` version (1), `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `u32` dims and row-major `f32` data.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::encoder::NetworkConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub const LAWT_MAGIC: &[u8; 4] = b"LAWT";
pub const LAWT_VERSION: u32 = 1;

const TENSOR_NAMES: [&str; 7] = ["wq", "wk", "wv", "mlp0", "mlp1", "ln_g", "ln_b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    SelfAttention,
    Cross,
    Pairwise,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::SelfAttention, LayerKind::Cross, LayerKind::Pairwise];

    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::SelfAttention => "self",
            LayerKind::Cross => "cross",
            LayerKind::Pairwise => "pair",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `2C′ × 2C′`
    pub mlp0: Matrix,
    /// `2C′ × C′`
    pub mlp1: Matrix,
    /// Layer-norm gain and bias, `1 × 2C′`.
    pub ln_g: Matrix,
    pub ln_b: Matrix,
    /// Projections map `D → C′` and the residual path uses `x·W_V`.
    pub input_projection: bool,
}

impl LayerWeights {
    fn tensors(&self) -> [&Matrix; 7] {
        [&self.wq, &self.wk, &self.wv, &self.mlp0, &self.mlp1, &self.ln_g, &self.ln_b]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.mlp0,
            &mut self.mlp1,
            &mut self.ln_g,
            &mut self.ln_b,
        ]
    }

    fn expected_shapes(input_dim: usize, hidden: usize) -> [(usize, usize); 7] {
        let p = (input_dim, hidden);
        [p, p, p, (2 * hidden, 2 * hidden), (2 * hidden, hidden), (1, 2 * hidden), (1, 2 * hidden)]
    }

    fn from_fn(input_dim: usize, hidden: usize, input_projection: bool, mut f: impl FnMut(usize, (usize, usize)) -> Matrix) -> Self {
        let shapes = Self::expected_shapes(input_dim, hidden);
        Self {
            wq: f(0, shapes[0]),
            wk: f(1, shapes[1]),
            wv: f(2, shapes[2]),
            mlp0: f(3, shapes[3]),
            mlp1: f(4, shapes[4]),
            ln_g: f(5, shapes[5]),
            ln_b: f(6, shapes[6]),
            input_projection,
        }
    }
}

/// All encoder parameters, grouped by layer kind in loop order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub self_layers: Vec<LayerWeights>,
    pub cross_layers: Vec<LayerWeights>,
    pub pair_layers: Vec<LayerWeights>,
}

fn tensor_name(kind: LayerKind, idx: usize, tensor: &str) -> String {
    format!("layer{idx}.{kind}.{tensor}")
}

/// Number of stored layers of `kind` for `cfg`. With tied weights the first
/// self layer stays separate because it changes the feature width.
pub fn slot_count(cfg: &NetworkConfig, kind: LayerKind) -> usize {
    match (kind, cfg.tie_weights) {
        (LayerKind::SelfAttention, false) | (LayerKind::Cross, false) => cfg.l1,
        (LayerKind::SelfAttention, true) => cfg.l1.min(2),
        (LayerKind::Cross, true) => cfg.l1.min(1),
        (LayerKind::Pairwise, false) => cfg.l2,
        (LayerKind::Pairwise, true) => cfg.l2.min(1),
    }
}

fn round_f32(x: f64) -> f64 {
    f64::from(x as f32)
}

impl NetworkWeights {
    fn build(cfg: &NetworkConfig, mut layer: impl FnMut(LayerKind, usize, bool) -> LayerWeights) -> Self {
        let mut make = |kind| {
            (0..slot_count(cfg, kind))
                .map(|idx| layer(kind, idx, kind == LayerKind::SelfAttention && idx == 0))
                .collect()
        };
        Self {
            self_layers: make(LayerKind::SelfAttention),
            cross_layers: make(LayerKind::Cross),
            pair_layers: make(LayerKind::Pairwise),
        }
    }

    /// Xavier-uniform projections and MLP weights, unit gain, zero bias.
    /// Values are rounded to `f32` so they survive a save/load unchanged.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, c) = (cfg.input_dim, cfg.hidden_dim);
        let mut counter = 0u64;
        Ok(Self::build(cfg, |_, _, proj| {
            LayerWeights::from_fn(if proj { d } else { c }, c, proj, |t, (rows, cols)| {
                counter += 1;
                match TENSOR_NAMES[t] {
                    "ln_g" => Matrix::filled(rows, cols, 1.0),
                    "ln_b" => Matrix::zeros(rows, cols),
                    _ => {
                        let mut r = rng::stream(seed, "weights.init", counter);
                        let a = (6.0 / (rows + cols) as f64).sqrt();
                        Matrix::from_fn(rows, cols, |_, _| round_f32(r.random_range(-a..=a)))
                    }
                }
            })
        }))
    }

    /// Weights under which every layer returns its (projected) input: identity
    /// projections (the first `min(D, C′)` dims for the input layer), zero MLP.
    pub fn identity(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, c) = (cfg.input_dim, cfg.hidden_dim);
        Ok(Self::build(cfg, |_, _, proj| {
            LayerWeights::from_fn(if proj { d } else { c }, c, proj, |t, (rows, cols)| match TENSOR_NAMES[t] {
                "wq" | "wk" | "wv" => Matrix::from_fn(rows, cols, |r, col| if r == col { 1.0 } else { 0.0 }),
                "ln_g" => Matrix::filled(rows, cols, 1.0),
                _ => Matrix::zeros(rows, cols),
            })
        }))
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = Matrix::zeros(t.rows(), t.cols());
        }
        out
    }

    fn groups(&self) -> [(LayerKind, &Vec<LayerWeights>); 3] {
        [
            (LayerKind::SelfAttention, &self.self_layers),
            (LayerKind::Cross, &self.cross_layers),
            (LayerKind::Pairwise, &self.pair_layers),
        ]
    }

    pub fn layers(&self, kind: LayerKind) -> &[LayerWeights] {
        match kind {
            LayerKind::SelfAttention => &self.self_layers,
            LayerKind::Cross => &self.cross_layers,
            LayerKind::Pairwise => &self.pair_layers,
        }
    }

    /// Stored layer (and its index) used at loop iteration `iteration`.
    pub fn layer_for(&self, kind: LayerKind, iteration: usize) -> Option<(usize, &LayerWeights)> {
        let layers = self.layers(kind);
        let idx = iteration.min(layers.len().checked_sub(1)?);
        Some((idx, &layers[idx]))
    }

    /// `(name, tensor)` in canonical order: self, cross, pair layers, each in
    /// index order, tensors in `wq wk wv mlp0 mlp1 ln_g ln_b` order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (kind, layers) in self.groups() {
            for (idx, layer) in layers.iter().enumerate() {
                for (t, m) in TENSOR_NAMES.iter().zip(layer.tensors()) {
                    out.push((tensor_name(kind, idx, t), m));
                }
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layers in [&mut self.self_layers, &mut self.cross_layers, &mut self.pair_layers] {
            for layer in layers.iter_mut() {
                out.extend(layer.tensors_mut());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// `(D, C′)` implied by the first self layer.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.self_layers.first().map(|l| (l.wq.rows(), l.wq.cols()))
    }

    /// Reassembles weights from named tensors (any order). Every layer needs
    /// all seven tensors and layer indices must be contiguous from zero.
    pub fn from_named(tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut slots: BTreeMap<(LayerKind, usize), [Option<Matrix>; 7]> = BTreeMap::new();
        for (name, m) in tensors {
            let (kind, idx, t) = parse_name(&name)
                .ok_or_else(|| Error::InvalidInput(format!("tensor `{name}`: unrecognized tensor name")))?;
            let slot = &mut slots.entry((kind, idx)).or_default()[t];
            if slot.is_some() {
                return Err(Error::InvalidInput(format!("tensor `{name}`: appears more than once")));
            }
            *slot = Some(m);
        }
        let mut out = Self {
            self_layers: Vec::new(),
            cross_layers: Vec::new(),
            pair_layers: Vec::new(),
        };
        for ((kind, idx), tensors) in slots {
            let layers = match kind {
                LayerKind::SelfAttention => &mut out.self_layers,
                LayerKind::Cross => &mut out.cross_layers,
                LayerKind::Pairwise => &mut out.pair_layers,
            };
            if layers.len() != idx {
                return Err(Error::InvalidInput(format!(
                    "tensor `{}`: layer indices must be contiguous from 0",
                    tensor_name(kind, idx, "wq")
                )));
            }
            let mut parts = tensors.into_iter().enumerate().map(|(t, m)| {
                m.ok_or_else(|| Error::InvalidInput(format!("tensor `{}`: missing", tensor_name(kind, idx, TENSOR_NAMES[t]))))
            });
            let mut next = || parts.next().expect("seven tensors");
            layers.push(LayerWeights {
                wq: next()?,
                wk: next()?,
                wv: next()?,
                mlp0: next()?,
                mlp1: next()?,
                ln_g: next()?,
                ln_b: next()?,
                input_projection: kind == LayerKind::SelfAttention && idx == 0,
            });
        }
        Ok(out)
    }

    /// Checks layer counts and every tensor shape against `cfg`.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        for (kind, layers) in self.groups() {
            let want = slot_count(cfg, kind);
            if layers.len() != want {
                return Err(Error::Config(format!(
                    "weights hold {} {kind} layers, configuration needs {want}",
                    layers.len()
                )));
            }
            for (idx, layer) in layers.iter().enumerate() {
                let d = if layer.input_projection { cfg.input_dim } else { cfg.hidden_dim };
                let shapes = LayerWeights::expected_shapes(d, cfg.hidden_dim);
                for ((t, m), shape) in TENSOR_NAMES.iter().zip(layer.tensors()).zip(shapes) {
                    if m.shape() != shape {
                        return Err(Error::Shape(format!(
                            "tensor `{}` is {}x{}, expected {}x{}",
                            tensor_name(kind, idx, t),
                            m.rows(),
                            m.cols(),
                            shape.0,
                            shape.1
                        )));
                    }
                    if !m.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "tensor `{}` has non-finite entries",
                            tensor_name(kind, idx, t)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn parse_name(name: &str) -> Option<(LayerKind, usize, usize)> {
    let mut parts = name.split('.');
    let idx = parts.next()?.strip_prefix("layer")?;
    if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) || (idx.len() > 1 && idx.starts_with('0')) {
        return None;
    }
    let kind = LayerKind::from_tag(parts.next()?)?;
    let tensor = parts.next()?;
    let t = TENSOR_NAMES.iter().position(|&t| t == tensor)?;
    parts.next().is_none().then_some((kind, idx.parse().ok()?, t))
}

/// Serializes a tensor table. Values are written as `f32`.
pub fn encode_tensors(tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(LAWT_MAGIC);
    out.extend_from_slice(&LAWT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::InvalidInput("too many tensors".into()))?.to_le_bytes());
    for (name, m) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput(format!("tensor name `{name}` is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        for dim in [m.rows(), m.cols()] {
            let dim = u32::try_from(dim).map_err(|_| Error::InvalidInput(format!("tensor `{name}` is too large")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for &x in m.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Byte cursor whose errors name the file and the tensor being read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a str) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("{what}: truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.error(format!("{what}: size overflow")))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("four bytes"))))
            .collect())
    }

    pub(crate) fn error(&self, message: String) -> Error {
        Error::format(self.path, message)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.error(format!("{} trailing bytes after the last record", self.bytes.len() - self.pos)))
        }
    }
}

/// Parses a tensor table. `path` is only used in error messages.
pub fn decode_tensors(bytes: &[u8], path: &str) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "header")? != LAWT_MAGIC {
        return Err(r.error("bad magic, expected LAWT".into()));
    }
    let version = r.u32("header")?;
    if version != LAWT_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let count = r.u32("header")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let label = format!("tensor #{i}");
        let len = r.u16(&label)? as usize;
        let name = std::str::from_utf8(r.take(len, &label)?)
            .map_err(|_| r.error(format!("{label}: name is not UTF-8")))?
            .to_string();
        let label = format!("tensor `{name}`");
        let ndim = r.u8(&label)?;
        let (rows, cols) = match ndim {
            1 => (1, r.u32(&label)? as usize),
            2 => (r.u32(&label)? as usize, r.u32(&label)? as usize),
            _ => return Err(r.error(format!("{label}: unsupported rank {ndim}"))),
        };
        let count = rows.checked_mul(cols).ok_or_else(|| r.error(format!("{label}: shape overflows")))?;
        let data = r.f32s(count, &label)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(r.error(format!("{label}: non-finite value")));
        }
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_tensor_file(path: &Path, tensors: &[(String, &Matrix)]) -> Result<()> {
    std::fs::write(path, encode_tensors(tensors)?)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bytes = std::fs::read(path)?;
    decode_tensors(&bytes, &path.display().to_string())
}

pub fn save_weights(path: &Path, weights: &NetworkWeights) -> Result<()> {
    write_tensor_file(path, &weights.named())
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights> {
    let tensors = read_tensor_file(path)?;
    NetworkWeights::from_named(tensors).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
