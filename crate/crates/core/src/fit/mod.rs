//! Power-plus-constant scaling curves: fitting, prediction and inversion.
//!
//! Both curve families share one model, `y = c + A·x^p`:
//!
//! * size curves `L(N) = (a/N)^b + E` have `p = −b`, `A = a^b`, `c = E`;
//! * head curves `L(n) = a·n^b + c` map directly.
//!
//! Fits scan the asymptote over `[0, min y)`, regress `ln(y − c)` on `ln x` at
//! each grid point, then polish the best starts with a Nelder-Mead simplex over
//! `(c, p)` with the amplitude solved in closed form. Residuals are measured in
//! raw loss space.

pub mod simplex;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionHeads, SizeField};
use crate::error::{Error, Result};
use simplex::SimplexOptions;

/// Default context length at which reference curves are fitted.
pub const DEFAULT_REFERENCE_CONTEXT: u64 = 8192;

/// Context lengths at or above this enter the flatness statistic.
pub const FLATNESS_MIN_CONTEXT: u64 = 8192;

const MIN_RECORDS: usize = 4;
const ASYMPTOTE_GRID: usize = 240;
const STARTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub model_id: String,
    pub heads: AttentionHeads,
    pub n_params_non_embedding: f64,
    pub n_params_total: f64,
    pub context_length: u64,
    pub train_tokens: f64,
    pub loss: f64,
}

impl LossRecord {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.loss) {
            return Err(Error::InvalidArgument(format!("{}: loss must be positive, got {}", self.model_id, self.loss)));
        }
        if !positive(self.n_params_non_embedding) || !positive(self.n_params_total) || !positive(self.train_tokens) {
            return Err(Error::InvalidArgument(format!(
                "{}: parameter counts and train_tokens must be positive",
                self.model_id
            )));
        }
        if self.n_params_non_embedding > self.n_params_total {
            return Err(Error::InvalidArgument(format!(
                "{}: non-embedding count {} exceeds total {}",
                self.model_id, self.n_params_non_embedding, self.n_params_total
            )));
        }
        Ok(())
    }

    pub fn size(&self, field: SizeField) -> f64 {
        match field {
            SizeField::Total => self.n_params_total,
            SizeField::NonEmbedding => self.n_params_non_embedding,
        }
    }
}

/// `L(N) = (a/N)^b + E` for one head configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub heads: AttentionHeads,
    pub a: f64,
    pub b: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub size_field: SizeField,
    pub context_length: u64,
    pub fit_domain: (f64, f64),
}

impl ScalingCurve {
    pub fn new(
        heads: AttentionHeads,
        a: f64,
        b: f64,
        e: f64,
        size_field: SizeField,
        context_length: u64,
        fit_domain: (f64, f64),
    ) -> Result<Self> {
        let curve = Self { heads, a, b, e, size_field, context_length, fit_domain };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0 && self.b.is_finite() && self.b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "curve ({}) needs a > 0 and b > 0, got a={} b={}",
                self.heads, self.a, self.b
            )));
        }
        if !(self.e.is_finite() && self.e >= 0.0) {
            return Err(Error::InvalidArgument(format!("curve ({}) needs E >= 0, got {}", self.heads, self.e)));
        }
        let (lo, hi) = self.fit_domain;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "curve ({}) has an invalid fit domain {:?}",
                self.heads, self.fit_domain
            )));
        }
        Ok(())
    }

    pub fn in_domain(&self, n_params: f64) -> bool {
        n_params >= self.fit_domain.0 && n_params <= self.fit_domain.1
    }
}

pub fn predict_loss(curve: &ScalingCurve, n_params: f64) -> f64 {
    (curve.a / n_params).powf(curve.b) + curve.e
}

/// Smallest size whose predicted loss reaches `target_loss`.
pub fn invert_curve(curve: &ScalingCurve, target_loss: f64) -> Result<f64> {
    let gap = target_loss - curve.e;
    if !(gap > 0.0) {
        return Err(Error::InfeasibleTarget { target: target_loss, asymptote: curve.e, gap });
    }
    Ok(curve.a / gap.powf(1.0 / curve.b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAxis {
    #[serde(rename = "n_h")]
    QueryHeads,
    #[serde(rename = "n_kv")]
    KvHeads,
}

impl HeadAxis {
    pub fn value(self, heads: AttentionHeads) -> f64 {
        f64::from(match self {
            HeadAxis::QueryHeads => heads.n_h(),
            HeadAxis::KvHeads => heads.n_kv(),
        })
    }
}

impl FromStr for HeadAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_h" | "heads" => Ok(Self::QueryHeads),
            "n_kv" | "kv-heads" => Ok(Self::KvHeads),
            _ => Err(Error::InvalidArgument(format!("unknown head axis {s:?}"))),
        }
    }
}

impl fmt::Display for HeadAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadAxis::QueryHeads => "n_h",
            HeadAxis::KvHeads => "n_kv",
        })
    }
}

/// `L(x) = a·x^b + c` along one head axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLawCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub axis: HeadAxis,
}

impl HeadLawCurve {
    pub fn predict(&self, heads: f64) -> f64 {
        self.a * heads.powf(self.b) + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub r_squared: f64,
    pub rmse: f64,
    pub n_points: usize,
    /// Observed minus predicted, in input order.
    pub residuals: Vec<f64>,
}

impl FitDiagnostics {
    fn from_residuals(y: &[f64], residuals: Vec<f64>) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let sse: f64 = residuals.iter().map(|r| r * r).sum();
        Self {
            r_squared: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
            rmse: (sse / n).sqrt(),
            n_points: y.len(),
            residuals,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    pub size_field: SizeField,
    /// Accept records with different training budgets, asserting they were
    /// all trained at a fixed tokens-per-parameter ratio.
    pub chinchilla_ratio: bool,
}

/// Raw power-plus-constant fit `y = c + A·x^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PowerFit {
    amplitude: f64,
    exponent: f64,
    constant: f64,
    sse: f64,
}

impl PowerFit {
    fn eval(&self, x: f64) -> f64 {
        self.constant + self.amplitude * x.powf(self.exponent)
    }
}

/// Least-squares amplitude for fixed `(c, p)` and the resulting SSE.
fn projected(x: &[f64], y: &[f64], c: f64, p: f64) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let z = xi.powf(p);
        num += (yi - c) * z;
        den += z * z;
    }
    let amp = num / den;
    let sse = x.iter().zip(y).map(|(&xi, &yi)| (yi - c - amp * xi.powf(p)).powi(2)).sum();
    (amp, sse)
}

/// Ordinary least squares of `ln(y − c)` on `ln x`; returns the slope.
fn log_linear_slope(lx: &[f64], y: &[f64], c: f64) -> Option<f64> {
    let ly: Vec<f64> = y.iter().map(|v| (v - c).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    slope.is_finite().then_some(slope)
}

fn asymptote_grid(min_y: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..ASYMPTOTE_GRID).map(|k| min_y * k as f64 / ASYMPTOTE_GRID as f64).collect();
    // geometric refinement toward min_y where the log transform is steep
    grid.extend((1..=60).map(|k| min_y * (1.0 - 10f64.powf(-2.0 - f64::from(k) / 10.0))));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn check_not_constant(y: &[f64]) -> Result<()> {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return Err(Error::DegenerateData("losses are constant; the power term is unidentifiable".into()));
    }
    Ok(())
}

/// Core fit shared by size and head curves. `sign` restricts the exponent:
/// `Some(-1.0)` requires `p < 0`, `None` leaves it free.
fn fit_power_plus_constant(x: &[f64], y: &[f64], require_negative: bool) -> Result<PowerFit> {
    check_not_constant(y)?;
    let min_y = y.iter().copied().fold(f64::INFINITY, f64::min);
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();

    let objective = |c: f64, p: f64| -> (f64, f64) {
        if !(c >= 0.0 && c < min_y) || !p.is_finite() || (require_negative && p >= 0.0) || p == 0.0 {
            return (f64::NAN, f64::INFINITY);
        }
        let (amp, sse) = projected(x, y, c, p);
        if !(amp > 0.0) {
            return (amp, f64::INFINITY);
        }
        (amp, sse)
    };

    let mut starts: Vec<(f64, f64, f64)> = asymptote_grid(min_y)
        .into_iter()
        .filter_map(|c| {
            let p = log_linear_slope(&lx, y, c)?;
            let (_, sse) = objective(c, p);
            sse.is_finite().then_some((sse, c, p))
        })
        .collect();
    if starts.is_empty() {
        return Err(Error::DegenerateData(
            "no admissible starting point (losses may not decrease along the axis)".into(),
        ));
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, f64, f64)> = None;
    for &(_, c0, p0) in starts.iter().take(STARTS) {
        let mut cur = (c0, p0);
        let mut cur_f = objective(c0, p0).1;
        for _ in 0..6 {
            let step = [0.05 * (min_y - cur.0).max(1e-6 * min_y), 0.1 * cur.1.abs().max(1e-4)];
            let r = simplex::minimize(|v| objective(v[0], v[1]).1, &[cur.0, cur.1], &step, SimplexOptions::default());
            if r.f < cur_f {
                let improved = cur_f - r.f > 1e-14 * cur_f.max(1e-300);
                cur = (r.x[0], r.x[1]);
                cur_f = r.f;
                if !improved {
                    break;
                }
            } else {
                break;
            }
        }
        if best.is_none_or(|b| cur_f < b.0) {
            best = Some((cur_f, cur.0, cur.1));
        }
    }
    let (_, c, p) = best.expect("at least one start");
    let (amplitude, sse) = objective(c, p);
    Ok(PowerFit { amplitude, exponent: p, constant: c, sse })
}

fn group_label(heads: AttentionHeads, context_length: u64) -> String {
    format!("heads=({heads}) T={context_length}")
}

fn check_common_group(records: &[LossRecord], opts: &FitOptions) -> Result<()> {
    let first = &records[0];
    for r in records {
        r.validate()?;
        if r.heads != first.heads || r.context_length != first.context_length {
            return Err(Error::InvalidArgument(format!(
                "records mix groups: {} and {}",
                group_label(first.heads, first.context_length),
                group_label(r.heads, r.context_length)
            )));
        }
    }
    if !opts.chinchilla_ratio && records.iter().any(|r| r.train_tokens != first.train_tokens) {
        return Err(Error::MixedTrainTokens { groups: vec![group_label(first.heads, first.context_length)] });
    }
    Ok(())
}

/// Fits `L(N) = (a/N)^b + E` to records sharing one head configuration and
/// context length.
pub fn fit_power_law(records: &[LossRecord], opts: &FitOptions) -> Result<(ScalingCurve, FitDiagnostics)> {
    if records.len() < MIN_RECORDS {
        return Err(Error::InsufficientData { needed: MIN_RECORDS, got: records.len() });
    }
    check_common_group(records, opts)?;
    let x: Vec<f64> = records.iter().map(|r| r.size(opts.size_field)).collect();
    let y: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi < 10.0 * lo {
        return Err(Error::DegenerateData(format!("sizes span {:.3}x, need at least one decade", hi / lo)));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    if order.windows(2).all(|w| y[w[1]] >= y[w[0]]) {
        return Err(Error::DegenerateData("losses do not decrease with model size".into()));
    }

    let fit = fit_power_plus_constant(&x, &y, true)?;
    let b = -fit.exponent;
    let a = fit.amplitude.powf(1.0 / b);
    let first = &records[0];
    let curve = ScalingCurve::new(first.heads, a, b, fit.constant, opts.size_field, first.context_length, (lo, hi))?;
    let residuals = x.iter().zip(&y).map(|(&n, &l)| l - predict_loss(&curve, n)).collect();
    Ok((curve, FitDiagnostics::from_residuals(&y, residuals)))
}

fn head_law_xy(records: &[LossRecord], axis: HeadAxis) -> Result<(Vec<f64>, Vec<f64>)> {
    if records.len() < MIN_RECORDS {
        return Err(Error::InsufficientData { needed: MIN_RECORDS, got: records.len() });
    }
    let t = records[0].context_length;
    for r in records {
        r.validate()?;
        if r.context_length != t {
            return Err(Error::InvalidArgument(format!(
                "head-law records must share one context length ({} vs {})",
                t, r.context_length
            )));
        }
    }
    let x: Vec<f64> = records.iter().map(|r| axis.value(r.heads)).collect();
    let mut distinct = x.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::DegenerateData(format!("{axis} takes {} distinct values, need at least 3", distinct.len())));
    }
    Ok((x, records.iter().map(|r| r.loss).collect()))
}

/// Fits `L(x) = a·x^b + c` where `x` is the head count along `axis`.
pub fn fit_head_law(records: &[LossRecord], axis: HeadAxis) -> Result<(HeadLawCurve, FitDiagnostics)> {
    let (x, y) = head_law_xy(records, axis)?;
    let fit = fit_power_plus_constant(&x, &y, false)?;
    let curve = HeadLawCurve { a: fit.amplitude, b: fit.exponent, c: fit.constant, axis };
    let residuals = x.iter().zip(&y).map(|(&h, &l)| l - fit.eval(h)).collect();
    debug_assert!(fit.sse.is_finite());
    Ok((curve, FitDiagnostics::from_residuals(&y, residuals)))
}

/// Head-law curves for several groups constrained to one asymptote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedConstantFit {
    pub constant: f64,
    pub curves: Vec<HeadLawCurve>,
    pub diagnostics: Vec<FitDiagnostics>,
    /// Some group fits worse than R² = 0.999.
    pub poor_fit: bool,
}

pub const POOR_FIT_R_SQUARED: f64 = 0.999;

pub fn joint_fit_shared_constant(groups: &[Vec<LossRecord>], axis: HeadAxis) -> Result<SharedConstantFit> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: groups.len() });
    }
    let data: Vec<(Vec<f64>, Vec<f64>)> = groups.iter().map(|g| head_law_xy(g, axis)).collect::<Result<_>>()?;
    for (_, y) in &data {
        check_not_constant(y)?;
    }
    let logs: Vec<Vec<f64>> = data.iter().map(|(x, _)| x.iter().map(|v| v.ln()).collect()).collect();
    let min_y = data.iter().flat_map(|(_, y)| y.iter().copied()).fold(f64::INFINITY, f64::min);
    let g = data.len();

    // v = [c, p_1, …, p_g]
    let objective = |v: &[f64]| -> f64 {
        let c = v[0];
        if !(c >= 0.0 && c < min_y) {
            return f64::INFINITY;
        }
        let mut total = 0.0;
        for ((x, y), &p) in data.iter().zip(&v[1..]) {
            if !p.is_finite() || p == 0.0 {
                return f64::INFINITY;
            }
            let (amp, sse) = projected(x, y, c, p);
            if !(amp > 0.0) {
                return f64::INFINITY;
            }
            total += sse;
        }
        total
    };

    let mut starts: Vec<(f64, Vec<f64>)> = asymptote_grid(min_y)
        .into_iter()
        .filter_map(|c| {
            let mut v = vec![c];
            for (lx, (_, y)) in logs.iter().zip(&data) {
                v.push(log_linear_slope(lx, y, c)?);
            }
            let f = objective(&v);
            f.is_finite().then_some((f, v))
        })
        .collect();
    if starts.is_empty() {
        return Err(Error::DegenerateData("no admissible shared asymptote".into()));
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, Vec<f64>)> = None;
    for (f0, v0) in starts.iter().take(STARTS) {
        let mut cur = v0.clone();
        let mut cur_f = *f0;
        for _ in 0..8 {
            let mut step = vec![0.05 * (min_y - cur[0]).max(1e-6 * min_y)];
            step.extend(cur[1..].iter().map(|p| 0.1 * p.abs().max(1e-4)));
            let opts = SimplexOptions { max_evals: 40_000, ..SimplexOptions::default() };
            let r = simplex::minimize(objective, &cur, &step, opts);
            if r.f < cur_f {
                let improved = cur_f - r.f > 1e-14 * cur_f.max(1e-300);
                cur = r.x;
                cur_f = r.f;
                if !improved {
                    break;
                }
            } else {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| cur_f < b.0) {
            best = Some((cur_f, cur));
        }
    }
    let (_, v) = best.expect("at least one start");
    let c = v[0];
    let mut curves = Vec::with_capacity(g);
    let mut diagnostics = Vec::with_capacity(g);
    for ((x, y), &p) in data.iter().zip(&v[1..]) {
        let (amp, _) = projected(x, y, c, p);
        let curve = HeadLawCurve { a: amp, b: p, c, axis };
        let residuals = x.iter().zip(y).map(|(&h, &l)| l - curve.predict(h)).collect();
        diagnostics.push(FitDiagnostics::from_residuals(y, residuals));
        curves.push(curve);
    }
    let poor_fit = diagnostics.iter().any(|d| d.r_squared < POOR_FIT_R_SQUARED);
    Ok(SharedConstantFit { constant: c, curves, diagnostics, poor_fit })
}

/// Partitions records by `(heads, context_length)` in a stable order.
pub fn group_records(records: &[LossRecord]) -> BTreeMap<(AttentionHeads, u64), Vec<LossRecord>> {
    let mut groups: BTreeMap<(AttentionHeads, u64), Vec<LossRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.heads, r.context_length)).or_default().push(r.clone());
    }
    groups
}

/// Rejects record sets where a group mixes training budgets, naming every
/// offending group.
pub fn check_train_tokens(records: &[LossRecord], opts: &FitOptions) -> Result<()> {
    if opts.chinchilla_ratio {
        return Ok(());
    }
    let offending: Vec<String> = group_records(records)
        .iter()
        .filter(|(_, rs)| rs.iter().any(|r| r.train_tokens != rs[0].train_tokens))
        .map(|(&(h, t), _)| group_label(h, t))
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        Err(Error::MixedTrainTokens { groups: offending })
    }
}

/// Relative loss difference against a baseline at each shared context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDeltaSeries {
    pub baseline_id: String,
    /// `(T, (L(T) − L_base(T)) / L_base(T))`, ascending in `T`.
    pub deltas: Vec<(u64, f64)>,
    /// `max |ΔL(T_i) − ΔL(T_j)|` over shared `T ≥ 8192`; `None` without any
    /// such point.
    pub flatness: Option<f64>,
}

pub fn relative_delta_series(
    series: &[(u64, f64)],
    baseline: &[(u64, f64)],
    baseline_id: &str,
) -> Result<ContextDeltaSeries> {
    let base: BTreeMap<u64, f64> = baseline.iter().copied().collect();
    let mut deltas: Vec<(u64, f64)> =
        series.iter().filter_map(|&(t, l)| base.get(&t).map(|&lb| (t, (l - lb) / lb))).collect();
    if deltas.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    deltas.sort_by_key(|d| d.0);
    deltas.dedup_by_key(|d| d.0);
    let tail: Vec<f64> = deltas.iter().filter(|d| d.0 >= FLATNESS_MIN_CONTEXT).map(|d| d.1).collect();
    let flatness = (!tail.is_empty()).then(|| {
        let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    });
    Ok(ContextDeltaSeries { baseline_id: baseline_id.to_string(), deltas, flatness })
}
