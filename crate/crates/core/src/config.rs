//! Model shapes, GQA head configurations and parameter accounting.
//!
//! Shapes may be fractional while the optimizer searches over continuous model
//! sizes; only concrete shapes (integral fields, FFN width a multiple of 32)
//! can be counted exactly with [`count_params`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HEAD_DIM: u32 = 64;
pub const DEFAULT_VOCAB_SIZE: u32 = 50304;

/// FFN widths are rounded to this granularity.
pub const FFN_MULTIPLE: u64 = 32;

/// Hidden sizes of concrete configurations are rounded to this granularity.
pub const HIDDEN_MULTIPLE: f64 = 128.0;

/// A GQA head configuration: `n_h` query heads sharing `n_kv` key/value heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawHeads", into = "RawHeads")]
pub struct AttentionHeads {
    n_h: u32,
    n_kv: u32,
}

#[derive(Serialize, Deserialize)]
struct RawHeads {
    n_h: u32,
    n_kv: u32,
}

impl TryFrom<RawHeads> for AttentionHeads {
    type Error = Error;

    fn try_from(raw: RawHeads) -> Result<Self> {
        Self::new(raw.n_h, raw.n_kv)
    }
}

impl From<AttentionHeads> for RawHeads {
    fn from(h: AttentionHeads) -> Self {
        RawHeads { n_h: h.n_h, n_kv: h.n_kv }
    }
}

impl AttentionHeads {
    pub fn new(n_h: u32, n_kv: u32) -> Result<Self> {
        let reason = if n_h == 0 || n_kv == 0 {
            "head counts must be positive"
        } else if n_kv > n_h {
            "n_kv must not exceed n_h"
        } else if !n_h.is_multiple_of(n_kv) {
            "n_h must be a multiple of n_kv"
        } else {
            return Ok(Self { n_h, n_kv });
        };
        Err(Error::InvalidHeads { n_h, n_kv, reason })
    }

    /// Multi-head attention: one KV head per query head.
    pub fn mha(n_h: u32) -> Result<Self> {
        Self::new(n_h, n_h)
    }

    pub fn n_h(&self) -> u32 {
        self.n_h
    }

    pub fn n_kv(&self) -> u32 {
        self.n_kv
    }

    /// Query heads per KV group.
    pub fn group_size(&self) -> u32 {
        self.n_h / self.n_kv
    }
}

impl fmt::Display for AttentionHeads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.n_h, self.n_kv)
    }
}

impl FromStr for AttentionHeads {
    type Err = Error;

    /// Parses `"n_h,n_kv"` (parentheses optional).
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let bad = || Error::InvalidArgument(format!("expected \"n_h,n_kv\", got {s:?}"));
        let (h, kv) = inner.split_once(',').ok_or_else(bad)?;
        let n_h = h.trim().parse().map_err(|_| bad())?;
        let n_kv = kv.trim().parse().map_err(|_| bad())?;
        Self::new(n_h, n_kv)
    }
}

/// How FFN weights are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnCountingMode {
    /// Two projection matrices (up, down): `2·L·d·d_ff` parameters.
    #[default]
    Table2,
    /// Three projection matrices (gate, up, down) as in SwiGLU: `3·L·d·d_ff`.
    Gated,
}

impl FfnCountingMode {
    pub fn matrices(self) -> u64 {
        match self {
            FfnCountingMode::Table2 => 2,
            FfnCountingMode::Gated => 3,
        }
    }
}

impl FromStr for FfnCountingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Self::Table2),
            "gated" => Ok(Self::Gated),
            _ => Err(Error::InvalidArgument(format!("unknown ffn mode {s:?} (expected table2 or gated)"))),
        }
    }
}

impl fmt::Display for FfnCountingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table2 => "table2",
            Self::Gated => "gated",
        })
    }
}

/// Which parameter total stands in for "model size".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeField {
    Total,
    #[default]
    #[serde(rename = "nonemb")]
    NonEmbedding,
}

impl FromStr for SizeField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(Self::Total),
            "nonemb" | "non_embedding" => Ok(Self::NonEmbedding),
            _ => Err(Error::InvalidArgument(format!("unknown size field {s:?} (expected total or nonemb)"))),
        }
    }
}

impl fmt::Display for SizeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Total => "total",
            Self::NonEmbedding => "nonemb",
        })
    }
}

/// Structural hyperparameters. `n_layers`, `hidden_size` and `ffn_size` are
/// real-valued so that interpolated shapes can be represented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: f64,
    pub hidden_size: f64,
    pub ffn_size: f64,
    pub head_dim: u32,
    pub vocab_size: u32,
}

impl ModelShape {
    /// A concrete shape with the FFN width derived from `hidden_size`.
    pub fn concrete(n_layers: u32, hidden_size: u32, head_dim: u32, vocab_size: u32) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidShape("n_layers must be positive".into()));
        }
        let ffn = derive_ffn_width(u64::from(hidden_size))?;
        Self::with_ffn(n_layers, hidden_size, ffn as u32, head_dim, vocab_size)
    }

    pub fn with_ffn(n_layers: u32, hidden_size: u32, ffn_size: u32, head_dim: u32, vocab_size: u32) -> Result<Self> {
        let shape = Self {
            n_layers: f64::from(n_layers),
            hidden_size: f64::from(hidden_size),
            ffn_size: f64::from(ffn_size),
            head_dim,
            vocab_size,
        };
        shape.validate()?;
        if !shape.is_concrete() {
            return Err(Error::InvalidShape(format!(
                "ffn_size {ffn_size} is not a positive multiple of {FFN_MULTIPLE}"
            )));
        }
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.n_layers) || !positive(self.hidden_size) || !positive(self.ffn_size) {
            return Err(Error::InvalidShape(format!(
                "n_layers, hidden_size and ffn_size must be finite and positive (got {}, {}, {})",
                self.n_layers, self.hidden_size, self.ffn_size
            )));
        }
        if self.head_dim == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidShape("head_dim and vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn is_concrete(&self) -> bool {
        let integral = |v: f64| v.fract() == 0.0 && v > 0.0 && v < 9.0e15;
        integral(self.n_layers)
            && integral(self.hidden_size)
            && integral(self.ffn_size)
            && (self.ffn_size as u64).is_multiple_of(FFN_MULTIPLE)
    }

    /// Width-to-depth ratio `d / L`.
    pub fn aspect_ratio(&self) -> f64 {
        self.hidden_size / self.n_layers
    }
}

impl fmt::Display for ModelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d={} d_ff={} d_h={} V={}",
            self.n_layers, self.hidden_size, self.ffn_size, self.head_dim, self.vocab_size
        )
    }
}

/// The multiple of 32 closest to `8·hidden_size/3`; exact ties round down.
pub fn derive_ffn_width(hidden_size: u64) -> Result<u64> {
    if hidden_size < FFN_MULTIPLE {
        return Err(Error::InvalidShape(format!("hidden_size {hidden_size} is below {FFN_MULTIPLE}")));
    }
    // Work in units of 1/3 to stay exact: target*3 = 8d, candidate*3 = 96q.
    let scaled = 8 * hidden_size;
    let step = 3 * FFN_MULTIPLE;
    let q = scaled / step;
    let below = scaled - q * step;
    let above = (q + 1) * step - scaled;
    let q = if below <= above { q } else { q + 1 };
    Ok(q * FFN_MULTIPLE)
}

/// Parameter totals of a concrete configuration. Input and output embeddings
/// are tied and counted once; norms and rotary tables are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub attention_projections: u64,
    pub ffn: u64,
    pub total: u64,
    pub non_embedding: u64,
}

impl ParamCount {
    pub fn get(&self, field: SizeField) -> u64 {
        match field {
            SizeField::Total => self.total,
            SizeField::NonEmbedding => self.non_embedding,
        }
    }
}

pub fn count_params(shape: &ModelShape, heads: AttentionHeads, mode: FfnCountingMode) -> Result<ParamCount> {
    shape.validate()?;
    if !shape.is_concrete() {
        return Err(Error::InvalidShape(format!("count_params needs a concrete shape, got {shape}")));
    }
    let l = shape.n_layers as u64;
    let d = shape.hidden_size as u64;
    let d_ff = shape.ffn_size as u64;
    let d_h = u64::from(shape.head_dim);
    let v = u64::from(shape.vocab_size);

    let embedding = d * v;
    let attention_projections = 2 * l * d * d_h * u64::from(heads.n_h() + heads.n_kv());
    let ffn = mode.matrices() * l * d * d_ff;
    let non_embedding = attention_projections + ffn;
    Ok(ParamCount { embedding, attention_projections, ffn, total: embedding + non_embedding, non_embedding })
}

/// Real-valued counterpart of [`ParamCount`], for fractional shapes and
/// fractional head counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionalParamCount {
    pub embedding: f64,
    pub attention_projections: f64,
    pub ffn: f64,
    pub total: f64,
    pub non_embedding: f64,
}

impl FractionalParamCount {
    pub fn get(&self, field: SizeField) -> f64 {
        match field {
            SizeField::Total => self.total,
            SizeField::NonEmbedding => self.non_embedding,
        }
    }
}

pub fn count_params_fractional(shape: &ModelShape, n_h: f64, n_kv: f64, mode: FfnCountingMode) -> FractionalParamCount {
    let l = shape.n_layers;
    let d = shape.hidden_size;
    let d_h = f64::from(shape.head_dim);
    let embedding = d * f64::from(shape.vocab_size);
    let attention_projections = 2.0 * l * d * d_h * (n_h + n_kv);
    let ffn = mode.matrices() as f64 * l * d * shape.ffn_size;
    let non_embedding = attention_projections + ffn;
    FractionalParamCount { embedding, attention_projections, ffn, total: embedding + non_embedding, non_embedding }
}

/// Largest head value of the candidate grid: `d_max / head_dim` rounded to
/// the nearest power of two, ties rounding up.
pub fn max_head_value(d_max: u32, head_dim: u32) -> Result<u32> {
    if head_dim == 0 || d_max < head_dim {
        return Err(Error::InvalidArgument(format!(
            "d_max ({d_max}) must be at least head_dim ({head_dim}) and head_dim positive"
        )));
    }
    let raw = f64::from(d_max) / f64::from(head_dim);
    let lower = 1u32 << raw.log2().floor() as u32;
    let upper = lower * 2;
    if raw - f64::from(lower) < f64::from(upper) - raw {
        Ok(lower)
    } else {
        Ok(upper)
    }
}

/// All `(n_h, n_kv)` with both drawn from `{1, 2, 4, …, k}` and `n_kv ≤ n_h`,
/// sorted by `(n_h, n_kv)`.
pub fn candidate_set(d_max: u32, head_dim: u32) -> Result<Vec<AttentionHeads>> {
    let k = max_head_value(d_max, head_dim)?;
    let values: Vec<u32> = std::iter::successors(Some(1u32), |&v| (v < k).then_some(v * 2)).collect();
    let mut out = Vec::with_capacity(values.len() * (values.len() + 1) / 2);
    for &n_h in &values {
        for &n_kv in values.iter().take_while(|&&kv| kv <= n_h) {
            out.push(AttentionHeads::new(n_h, n_kv)?);
        }
    }
    Ok(out)
}

/// Rounds a fractional shape to the closest buildable configuration: layers to
/// the nearest integer, width to the nearest multiple of 128, FFN width
/// re-derived.
pub fn nearest_concrete_config(fractional: &ModelShape, _heads: AttentionHeads) -> Result<ModelShape> {
    fractional.validate()?;
    let l = fractional.n_layers.round().max(1.0);
    let d = ((fractional.hidden_size / HIDDEN_MULTIPLE).round() * HIDDEN_MULTIPLE).max(HIDDEN_MULTIPLE);
    ModelShape::concrete(l as u32, d as u32, fractional.head_dim, fractional.vocab_size)
}
