//! Anchor tables of (size, depth, width) and the inverse map from a real-valued
//! model size to a fractional shape.
//!
//! The aspect ratio `d/L` is interpolated piecewise-linearly in `ln N` between
//! the two nearest anchors, then `L` is found by bisection so that the
//! parameter count of `(L, a·L, 8·a·L/3)` matches the requested size.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{count_params_fractional, AttentionHeads, FfnCountingMode, ModelShape, SizeField};
use crate::error::{Error, Result};

/// Sizes beyond this factor past either end anchor are refused.
pub const EXTRAPOLATION_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    /// Nominal size label (used for ordering and reporting).
    pub param_count: u64,
    pub n_layers: u32,
    pub hidden_size: u32,
}

impl Anchor {
    pub fn aspect_ratio(&self) -> f64 {
        f64::from(self.hidden_size) / f64::from(self.n_layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyTable {
    anchors: Vec<Anchor>,
}

const fn anchor(param_count: u64, n_layers: u32, hidden_size: u32) -> Anchor {
    Anchor { param_count, n_layers, hidden_size }
}

/// Small-model anchors followed by the large-model aspect-ratio anchors.
const DEFAULT_ANCHORS: [Anchor; 14] = [
    anchor(3_000_000, 4, 256),
    anchor(19_000_000, 6, 512),
    anchor(85_000_000, 12, 768),
    anchor(150_000_000, 12, 1024),
    anchor(200_000_000, 16, 1024),
    anchor(470_000_000, 24, 1280),
    anchor(680_000_000, 24, 1536),
    anchor(1_200_000_000, 36, 1536),
    anchor(1_800_000_000, 36, 2048),
    anchor(4_000_000_000, 48, 2560),
    anchor(6_000_000_000, 54, 3072),
    anchor(13_000_000_000, 64, 4096),
    anchor(33_000_000_000, 72, 6144),
    anchor(64_000_000_000, 80, 8192),
];

impl Default for FamilyTable {
    fn default() -> Self {
        Self { anchors: DEFAULT_ANCHORS.to_vec() }
    }
}

impl FamilyTable {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::InvalidFamily(format!("need at least two anchors, got {}", anchors.len())));
        }
        for a in &anchors {
            if a.param_count == 0 || a.n_layers == 0 || a.hidden_size == 0 {
                return Err(Error::InvalidFamily(format!("anchor {a:?} has a zero field")));
            }
        }
        for w in anchors.windows(2) {
            if w[1].param_count <= w[0].param_count {
                return Err(Error::InvalidFamily(format!(
                    "anchors must be strictly increasing in param_count ({} then {})",
                    w[0].param_count, w[1].param_count
                )));
            }
        }
        for (i, a) in anchors.iter().enumerate() {
            if anchors[..i].iter().any(|b| (b.n_layers, b.hidden_size) == (a.n_layers, a.hidden_size)) {
                return Err(Error::InvalidFamily(format!("duplicate shape (L={}, d={})", a.n_layers, a.hidden_size)));
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn max_hidden_size(&self) -> u32 {
        self.anchors.iter().map(|a| a.hidden_size).max().unwrap_or(0)
    }

    /// Parses the plain-text table format: one anchor per line as
    /// `param_count, n_layers, hidden_size`. Blank lines and `#` comments are
    /// skipped; `param_count` accepts plain numbers, exponents and K/M/B/T
    /// suffixes.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut anchors = Vec::new();
        let mut first = true;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: idx as u64 + 1, msg };
            let fields: Vec<&str> = line.split([',', '\t', ' ']).map(str::trim).filter(|f| !f.is_empty()).collect();
            if fields.len() != 3 {
                return Err(err(format!(
                    "expected 3 fields (param_count, n_layers, hidden_size), got {}",
                    fields.len()
                )));
            }
            if std::mem::take(&mut first) && parse_size(fields[0]).is_none() {
                // header row
                continue;
            }
            let param_count = parse_size(fields[0]).ok_or_else(|| err(format!("bad param_count {:?}", fields[0])))?;
            let n_layers = fields[1].parse().map_err(|_| err(format!("bad n_layers {:?}", fields[1])))?;
            let hidden_size = fields[2].parse().map_err(|_| err(format!("bad hidden_size {:?}", fields[2])))?;
            anchors.push(Anchor { param_count, n_layers, hidden_size });
        }
        Self::new(anchors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("param_count,n_layers,hidden_size\n");
        for a in &self.anchors {
            out.push_str(&format!("{},{},{}\n", a.param_count, a.n_layers, a.hidden_size));
        }
        out
    }
}

fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1e3),
        'M' | 'm' => (&s[..s.len() - 1], 1e6),
        'B' | 'b' | 'G' | 'g' => (&s[..s.len() - 1], 1e9),
        'T' | 't' => (&s[..s.len() - 1], 1e12),
        _ => (s, 1.0),
    };
    let v: f64 = num.replace('_', "").parse().ok()?;
    let v = v * mult;
    (v.is_finite() && v >= 1.0).then(|| v.round() as u64)
}

/// How head counts follow from the hidden size of a (possibly fractional) shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadsRule {
    /// Head counts independent of width.
    Fixed(AttentionHeads),
    /// `n_h = n_kv = d / d_h`.
    Mha,
    /// `n_h = d / d_h` with a fixed number of KV heads.
    QueryFromWidth { n_kv: u32 },
}

impl HeadsRule {
    /// Real-valued `(n_h, n_kv)` at the given width.
    pub fn heads_at(&self, hidden_size: f64, head_dim: u32) -> (f64, f64) {
        let per_width = hidden_size / f64::from(head_dim);
        match *self {
            HeadsRule::Fixed(h) => (f64::from(h.n_h()), f64::from(h.n_kv())),
            HeadsRule::Mha => (per_width, per_width),
            HeadsRule::QueryFromWidth { n_kv } => (per_width, f64::from(n_kv)),
        }
    }
}

impl fmt::Display for HeadsRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadsRule::Fixed(h) => write!(f, "({h})"),
            HeadsRule::Mha => f.write_str("(d/d_h, d/d_h)"),
            HeadsRule::QueryFromWidth { n_kv } => write!(f, "(d/d_h, {n_kv})"),
        }
    }
}

/// Knot-based inverse of the parameter count for one family under one
/// counting convention.
///
/// Each anchor's knot sits at its own parameter count recomputed under MHA
/// heads with the resolver's mode and size field, so resolving that exact
/// count under MHA lands exactly on the anchor.
#[derive(Debug, Clone)]
pub struct ShapeResolver {
    /// (ln N, aspect ratio), strictly increasing in ln N.
    knots: Vec<(f64, f64)>,
    mode: FfnCountingMode,
    size_field: SizeField,
    head_dim: u32,
    vocab_size: u32,
}

/// A fractional shape together with the head counts it was resolved under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedShape {
    pub shape: ModelShape,
    pub n_h: f64,
    pub n_kv: f64,
    /// Size fell outside the anchor range (but within the extrapolation limit).
    pub extrapolated: bool,
}

impl ShapeResolver {
    pub fn new(
        family: &FamilyTable,
        mode: FfnCountingMode,
        size_field: SizeField,
        head_dim: u32,
        vocab_size: u32,
    ) -> Result<Self> {
        if head_dim == 0 || vocab_size == 0 {
            return Err(Error::InvalidArgument("head_dim and vocab_size must be positive".into()));
        }
        let mut knots = Vec::with_capacity(family.anchors.len());
        for a in &family.anchors {
            let d = f64::from(a.hidden_size);
            let shape = ModelShape {
                n_layers: f64::from(a.n_layers),
                hidden_size: d,
                ffn_size: 8.0 * d / 3.0,
                head_dim,
                vocab_size,
            };
            let (n_h, n_kv) = HeadsRule::Mha.heads_at(d, head_dim);
            let n = count_params_fractional(&shape, n_h, n_kv, mode).get(size_field);
            knots.push((n.ln(), a.aspect_ratio()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidFamily(format!(
                "anchor sizes are not increasing once recomputed under mode {mode} / {size_field}"
            )));
        }
        Ok(Self { knots, mode, size_field, head_dim, vocab_size })
    }

    pub fn mode(&self) -> FfnCountingMode {
        self.mode
    }

    pub fn size_field(&self) -> SizeField {
        self.size_field
    }

    /// Recomputed anchor sizes, in anchor order.
    pub fn knot_sizes(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.0.exp()).collect()
    }

    pub fn floor(&self) -> f64 {
        self.knots[0].0.exp() / EXTRAPOLATION_LIMIT
    }

    pub fn ceiling(&self) -> f64 {
        self.knots[self.knots.len() - 1].0.exp() * EXTRAPOLATION_LIMIT
    }

    /// Aspect ratio at `ln_n`; boundary segments are extended linearly.
    pub fn aspect_ratio_at(&self, n_params: f64) -> f64 {
        let x = n_params.ln();
        let k = &self.knots;
        let seg = match k.iter().position(|&(kx, _)| kx >= x) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => k.len() - 2,
        };
        let (x0, y0) = k[seg];
        let (x1, y1) = k[seg + 1];
        if x == x0 {
            return y0;
        }
        if x == x1 {
            return y1;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    fn shape_for(&self, n_layers: f64, aspect: f64) -> ModelShape {
        let d = aspect * n_layers;
        ModelShape {
            n_layers,
            hidden_size: d,
            ffn_size: 8.0 * d / 3.0,
            head_dim: self.head_dim,
            vocab_size: self.vocab_size,
        }
    }

    fn size_at(&self, n_layers: f64, aspect: f64, rule: &HeadsRule) -> f64 {
        let shape = self.shape_for(n_layers, aspect);
        let (n_h, n_kv) = rule.heads_at(shape.hidden_size, self.head_dim);
        count_params_fractional(&shape, n_h, n_kv, self.mode).get(self.size_field)
    }

    pub fn resolve(&self, n_params: f64, rule: &HeadsRule) -> Result<ResolvedShape> {
        if !(n_params.is_finite() && n_params > 0.0) {
            return Err(Error::InvalidArgument(format!("model size must be positive and finite, got {n_params}")));
        }
        let floor = self.floor();
        if n_params < floor {
            return Err(Error::SizeBelowRange { n_params, floor });
        }
        let ceiling = self.ceiling();
        if n_params > ceiling {
            return Err(Error::SizeAboveRange { n_params, ceiling });
        }
        let aspect = self.aspect_ratio_at(n_params);
        if !(aspect > 0.0) {
            return Err(Error::InvalidFamily(format!("aspect ratio extrapolates to {aspect} at N={n_params:.4e}")));
        }
        let ln_n = n_params.ln();
        let extrapolated = ln_n < self.knots[0].0 || ln_n > self.knots[self.knots.len() - 1].0;

        // size_at is strictly increasing in L with a fixed aspect ratio
        let mut lo = 0.0;
        let mut hi = 1.0;
        while self.size_at(hi, aspect, rule) < n_params {
            lo = hi;
            hi *= 2.0;
            if hi > 1e9 {
                return Err(Error::InvalidArgument(format!("cannot bracket depth for N={n_params:.4e}")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.size_at(mid, aspect, rule) < n_params {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let n_layers =
            if (self.size_at(lo, aspect, rule) - n_params).abs() < (self.size_at(hi, aspect, rule) - n_params).abs() {
                lo
            } else {
                hi
            };
        let shape = self.shape_for(n_layers, aspect);
        let (n_h, n_kv) = rule.heads_at(shape.hidden_size, self.head_dim);
        Ok(ResolvedShape { shape, n_h, n_kv, extrapolated })
    }
}

/// One-shot form of [`ShapeResolver::resolve`] with default head size and
/// vocabulary.
pub fn resolve_shape_from_size(
    n_params: f64,
    family: &FamilyTable,
    rule: &HeadsRule,
    mode: FfnCountingMode,
    size_field: SizeField,
) -> Result<ResolvedShape> {
    ShapeResolver::new(family, mode, size_field, crate::config::DEFAULT_HEAD_DIM, crate::config::DEFAULT_VOCAB_SIZE)?
        .resolve(n_params, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{count_params, AttentionHeads};
    use std::path::PathBuf;

    fn resolver(mode: FfnCountingMode, field: SizeField) -> ShapeResolver {
        ShapeResolver::new(&FamilyTable::default(), mode, field, 64, 50304).unwrap()
    }

    #[test]
    fn default_family_is_valid() {
        let f = FamilyTable::default();
        assert_eq!(f.anchors().len(), 14);
        assert_eq!(f.max_hidden_size(), 8192);
        assert!(FamilyTable::new(f.anchors().to_vec()).is_ok());
        for mode in [FfnCountingMode::Table2, FfnCountingMode::Gated] {
            for field in [SizeField::Total, SizeField::NonEmbedding] {
                assert!(ShapeResolver::new(&f, mode, field, 64, 50304).is_ok());
            }
        }
    }

    #[test]
    fn family_validation() {
        assert!(FamilyTable::new(vec![anchor(1, 1, 64)]).is_err());
        assert!(FamilyTable::new(vec![anchor(2, 1, 64), anchor(1, 2, 64)]).is_err());
        assert!(FamilyTable::new(vec![anchor(1, 2, 64), anchor(2, 2, 64)]).is_err());
    }

    #[test]
    fn parse_table_text() {
        let text = "# comment\nparam_count,n_layers,hidden_size\n3M, 4, 256\n1.2e9,36,1536 # inline\n\n64B 80 8192\n";
        let f = FamilyTable::parse(text, Path::new("t.txt")).unwrap();
        assert_eq!(
            f.anchors(),
            &[anchor(3_000_000, 4, 256), anchor(1_200_000_000, 36, 1536), anchor(64_000_000_000, 80, 8192)]
        );
        let again = FamilyTable::parse(&f.to_text(), Path::new("t.txt")).unwrap();
        assert_eq!(again, f);
        match FamilyTable::parse("1M,4,256\n2M,x,512\n", Path::new("bad.txt")) {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!(path, PathBuf::from("bad.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn anchor_knot_is_exact() {
        // 1.2B anchor: 8d/3 is integral, so the concrete count equals the knot
        let r = resolver(FfnCountingMode::Table2, SizeField::NonEmbedding);
        let shape = ModelShape::concrete(36, 1536, 64, 50304).unwrap();
        let n = count_params(&shape, AttentionHeads::mha(24).unwrap(), FfnCountingMode::Table2).unwrap().non_embedding;
        let got = r.resolve(n as f64, &HeadsRule::Mha).unwrap();
        assert!((got.shape.n_layers - 36.0).abs() < 1e-9, "{:?}", got.shape);
        assert!((got.shape.hidden_size - 1536.0).abs() < 1e-6);
        assert!(!got.extrapolated);
    }

    #[test]
    fn every_knot_resolves_to_its_anchor() {
        for mode in [FfnCountingMode::Table2, FfnCountingMode::Gated] {
            for field in [SizeField::Total, SizeField::NonEmbedding] {
                let r = resolver(mode, field);
                for (a, n) in FamilyTable::default().anchors().iter().zip(r.knot_sizes()) {
                    let got = r.resolve(n, &HeadsRule::Mha).unwrap();
                    assert!((got.shape.n_layers / f64::from(a.n_layers) - 1.0).abs() < 1e-9);
                    assert!((got.shape.hidden_size / f64::from(a.hidden_size) - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn interpolation_monotone_between_knots() {
        let r = resolver(FfnCountingMode::Table2, SizeField::NonEmbedding);
        let sizes = r.knot_sizes();
        for (i, w) in sizes.windows(2).enumerate() {
            let (a0, a1) = (r.knots[i].1, r.knots[i + 1].1);
            let mut prev = a0;
            for k in 1..50 {
                let n = (w[0].ln() + (w[1].ln() - w[0].ln()) * f64::from(k) / 50.0).exp();
                let a = r.aspect_ratio_at(n);
                assert!(a >= a0.min(a1) - 1e-12 && a <= a0.max(a1) + 1e-12);
                if a1 >= a0 {
                    assert!(a >= prev - 1e-12);
                } else {
                    assert!(a <= prev + 1e-12);
                }
                prev = a;
            }
        }
    }

    #[test]
    fn extrapolation_limits() {
        let r = resolver(FfnCountingMode::Table2, SizeField::NonEmbedding);
        let rule = HeadsRule::Fixed(AttentionHeads::new(8, 1).unwrap());
        let first = r.knot_sizes()[0];
        let last = *r.knot_sizes().last().unwrap();
        assert!(r.resolve(first / 2.0, &rule).unwrap().extrapolated);
        assert!(r.resolve(last * 3.0, &rule).unwrap().extrapolated);
        assert!(matches!(r.resolve(first / 5.0, &rule), Err(Error::SizeBelowRange { .. })));
        assert!(matches!(r.resolve(last * 5.0, &rule), Err(Error::SizeAboveRange { .. })));
        assert!(r.resolve(-1.0, &rule).is_err());
    }

    #[test]
    fn resolve_1p8b_with_mqa_heads() {
        let rule = HeadsRule::Fixed(AttentionHeads::new(8, 1).unwrap());
        let got = resolve_shape_from_size(
            1.8e9,
            &FamilyTable::default(),
            &rule,
            FfnCountingMode::Table2,
            SizeField::NonEmbedding,
        )
        .unwrap();
        // aspect ratio sits between the 1.8B and 4B anchors
        let a = got.shape.aspect_ratio();
        assert!((2560.0 / 48.0..=2048.0 / 36.0).contains(&a), "{a}");
        assert!(((a / (2048.0 / 36.0)) - 1.0).abs() < 0.05);
        let n = count_params_fractional(&got.shape, got.n_h, got.n_kv, FfnCountingMode::Table2).non_embedding;
        assert!((n / 1.8e9 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn query_from_width_rule() {
        let rule = HeadsRule::QueryFromWidth { n_kv: 8 };
        assert_eq!(rule.heads_at(2048.0, 64), (32.0, 8.0));
        let got =
            resolve_shape_from_size(1.0e9, &FamilyTable::default(), &rule, FfnCountingMode::Gated, SizeField::Total)
                .unwrap();
        assert!((got.n_h - got.shape.hidden_size / 64.0).abs() < 1e-12);
        let n = count_params_fractional(&got.shape, got.n_h, got.n_kv, FfnCountingMode::Gated).total;
        assert!((n / 1.0e9 - 1.0).abs() < 1e-9);
    }
}
