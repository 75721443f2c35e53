//! Cost-optimal head configuration search.
//!
//! For every candidate curve the smallest size reaching the target loss is
//! found by inverting the curve, the size is resolved to a fractional shape,
//! and the candidate with the lowest objective wins. Ties go to fewer KV
//! heads, then fewer query heads, then the smaller model.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    count_params, count_params_fractional, nearest_concrete_config, AttentionHeads, FfnCountingMode, ModelShape,
    SizeField, DEFAULT_HEAD_DIM, DEFAULT_VOCAB_SIZE,
};
use crate::cost::{hardware_cost, inference_cost_with_heads, tokens_under_budget, HardwareCostParams, InferenceCost};
use crate::error::{Error, Result};
use crate::family::{FamilyTable, HeadsRule, ShapeResolver};
use crate::fit::{invert_curve, predict_loss, ScalingCurve};

/// Candidates whose optimal size exceeds the fit domain by more than this
/// factor are flagged as extrapolated.
pub const EXTRAPOLATION_FLAG_FACTOR: f64 = 100.0;

pub const DEFAULT_GRID_POINTS: usize = 1024;

/// The brute-force grid spans the fit domain widened by this factor each way.
pub const GRID_WIDENING: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `Z = λ·M^α + (1−λ)·C^β`
    #[default]
    #[serde(rename = "z")]
    HardwareCost,
    Memory,
    Flops,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" | "hardware" => Ok(Self::HardwareCost),
            "memory" | "mem" => Ok(Self::Memory),
            "flops" | "compute" => Ok(Self::Flops),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?} (expected z, memory or flops)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HardwareCost => "z",
            Self::Memory => "memory",
            Self::Flops => "flops",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizationQuery {
    pub target_loss: f64,
    pub context_length: u64,
    pub cost_params: HardwareCostParams,
    pub objective: Objective,
    /// Added to every predicted loss, e.g. to move reference-context curves
    /// to the query context.
    #[serde(default)]
    pub loss_shift: f64,
}

impl OptimizationQuery {
    pub fn new(target_loss: f64, context_length: u64) -> Self {
        Self {
            target_loss,
            context_length,
            cost_params: HardwareCostParams::default(),
            objective: Objective::default(),
            loss_shift: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.target_loss.is_finite() || !self.loss_shift.is_finite() {
            return Err(Error::InvalidArgument(format!("target loss must be finite, got {}", self.target_loss)));
        }
        Ok(())
    }

    fn effective_target(&self) -> f64 {
        self.target_loss - self.loss_shift
    }
}

/// Counting conventions shared by every evaluation in one search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub mode: FfnCountingMode,
    /// Which parameter total enters the cost formulas.
    pub cost_size_field: SizeField,
    pub head_dim: u32,
    pub vocab_size: u32,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            mode: FfnCountingMode::default(),
            cost_size_field: SizeField::Total,
            head_dim: DEFAULT_HEAD_DIM,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateStatus {
    Feasible,
    /// Target at or below the curve's asymptote.
    BelowAsymptote {
        gap: f64,
    },
    /// The size could not be mapped to a shape.
    Unresolvable {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub heads: AttentionHeads,
    pub status: CandidateStatus,
    /// Size in the curve's own size field.
    pub n_params: Option<f64>,
    /// Size entering the cost formulas.
    pub cost_n_params: Option<f64>,
    pub fractional_shape: Option<ModelShape>,
    pub cost: Option<InferenceCost>,
    pub z: Option<f64>,
    pub objective_value: Option<f64>,
    /// Optimal size lies more than 100x beyond the fitted sizes.
    pub extrapolated: bool,
    /// Optimal size lies outside the anchor table.
    pub beyond_anchors: bool,
}

impl CandidateRow {
    pub fn is_feasible(&self) -> bool {
        self.status == CandidateStatus::Feasible
    }

    fn infeasible(heads: AttentionHeads, status: CandidateStatus, n_params: Option<f64>) -> Self {
        Self {
            heads,
            status,
            n_params,
            cost_n_params: None,
            fractional_shape: None,
            cost: None,
            z: None,
            objective_value: None,
            extrapolated: false,
            beyond_anchors: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalChoice {
    pub query: OptimizationQuery,
    pub heads: AttentionHeads,
    pub n_params: f64,
    pub size_field: SizeField,
    pub fractional_shape: ModelShape,
    pub concrete_shape: ModelShape,
    pub cost: InferenceCost,
    pub z_value: f64,
    pub objective_value: f64,
    /// One row per supplied curve, in input order.
    pub candidates: Vec<CandidateRow>,
    pub warnings: Vec<String>,
}

impl OptimalChoice {
    pub fn winner(&self) -> &CandidateRow {
        self.candidates.iter().find(|r| r.heads == self.heads && r.is_feasible()).expect("winner row present")
    }

    /// Feasible rows sorted by objective, then infeasible rows.
    pub fn rows_by_objective(&self) -> Vec<&CandidateRow> {
        let mut rows: Vec<&CandidateRow> = self.candidates.iter().collect();
        rows.sort_by(|a, b| match (a.objective_value, b.objective_value) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => a.heads.cmp(&b.heads),
        });
        rows
    }
}

/// Resolvers for each size field actually used by the curves.
struct Resolvers {
    total: Option<ShapeResolver>,
    non_embedding: Option<ShapeResolver>,
}

impl Resolvers {
    fn new(family: &FamilyTable, settings: &SearchSettings, curves: &[ScalingCurve]) -> Result<Self> {
        let make = |field| ShapeResolver::new(family, settings.mode, field, settings.head_dim, settings.vocab_size);
        let uses = |field| curves.iter().any(|c| c.size_field == field);
        Ok(Self {
            total: uses(SizeField::Total).then(|| make(SizeField::Total)).transpose()?,
            non_embedding: uses(SizeField::NonEmbedding).then(|| make(SizeField::NonEmbedding)).transpose()?,
        })
    }

    fn get(&self, field: SizeField) -> &ShapeResolver {
        match field {
            SizeField::Total => self.total.as_ref(),
            SizeField::NonEmbedding => self.non_embedding.as_ref(),
        }
        .expect("resolver built for every size field in use")
    }
}

struct Evaluation {
    shape: ModelShape,
    cost_n_params: f64,
    cost: InferenceCost,
    z: f64,
    objective_value: f64,
    beyond_anchors: bool,
}

fn evaluate(
    curve: &ScalingCurve,
    n_params: f64,
    resolvers: &Resolvers,
    query: &OptimizationQuery,
    settings: &SearchSettings,
) -> Result<Evaluation> {
    let resolved = resolvers.get(curve.size_field).resolve(n_params, &HeadsRule::Fixed(curve.heads))?;
    let counts = count_params_fractional(&resolved.shape, resolved.n_h, resolved.n_kv, settings.mode);
    let cost_n_params = counts.get(settings.cost_size_field);
    let cost =
        inference_cost_with_heads(cost_n_params, &resolved.shape, resolved.n_h, resolved.n_kv, query.context_length);
    let z = hardware_cost(&cost, &query.cost_params)?;
    let objective_value = match query.objective {
        Objective::HardwareCost => z,
        Objective::Memory => cost.mem_total(),
        Objective::Flops => cost.flops_total(),
    };
    Ok(Evaluation {
        shape: resolved.shape,
        cost_n_params,
        cost,
        z,
        objective_value,
        beyond_anchors: resolved.extrapolated,
    })
}

fn feasible_row(curve: &ScalingCurve, n_params: f64, ev: Evaluation) -> CandidateRow {
    CandidateRow {
        heads: curve.heads,
        status: CandidateStatus::Feasible,
        n_params: Some(n_params),
        cost_n_params: Some(ev.cost_n_params),
        fractional_shape: Some(ev.shape),
        cost: Some(ev.cost),
        z: Some(ev.z),
        objective_value: Some(ev.objective_value),
        extrapolated: n_params > curve.fit_domain.1 * EXTRAPOLATION_FLAG_FACTOR,
        beyond_anchors: ev.beyond_anchors,
    }
}

fn check_curves(curves: &[ScalingCurve]) -> Result<()> {
    let first = curves.first().ok_or(Error::NoCurves)?;
    let mut seen = BTreeSet::new();
    for c in curves {
        c.validate()?;
        if c.context_length != first.context_length {
            return Err(Error::InvalidArgument(format!(
                "curves were fitted at different context lengths ({} and {})",
                first.context_length, c.context_length
            )));
        }
        if !seen.insert(c.heads) {
            return Err(Error::InvalidArgument(format!("more than one curve for heads ({})", c.heads)));
        }
    }
    Ok(())
}

/// Ordering used to pick the winner among feasible rows.
fn preference(a: &CandidateRow, b: &CandidateRow) -> Ordering {
    let key = |r: &CandidateRow| {
        (r.objective_value.unwrap_or(f64::INFINITY), r.heads.n_kv(), r.heads.n_h(), r.n_params.unwrap_or(f64::INFINITY))
    };
    let (ka, kb) = (key(a), key(b));
    ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.cmp(&kb.2)).then(ka.3.total_cmp(&kb.3))
}

fn assemble(query: &OptimizationQuery, curves: &[ScalingCurve], rows: Vec<CandidateRow>) -> Result<OptimalChoice> {
    let mut warnings = Vec::new();
    for row in &rows {
        match &row.status {
            CandidateStatus::Unresolvable { reason } => warnings.push(format!("skipping ({}): {reason}", row.heads)),
            CandidateStatus::Feasible if row.extrapolated => warnings.push(format!(
                "({}): optimal size {:.4e} is more than {EXTRAPOLATION_FLAG_FACTOR}x beyond the fitted sizes",
                row.heads,
                row.n_params.unwrap_or(f64::NAN)
            )),
            _ => {}
        }
    }
    let Some(best) = rows.iter().filter(|r| r.is_feasible()).min_by(|a, b| preference(a, b)) else {
        let min_e = curves.iter().map(|c| c.e).fold(f64::INFINITY, f64::min);
        if curves.iter().all(|c| query.effective_target() <= c.e) {
            return Err(Error::AllInfeasible {
                target: query.target_loss,
                gap: min_e - query.effective_target(),
                min_loss: min_e + query.loss_shift,
            });
        }
        return Err(Error::InvalidArgument(format!("no candidate could be evaluated: {}", warnings.join("; "))));
    };
    let fractional_shape = best.fractional_shape.expect("feasible rows carry a shape");
    let concrete_shape = nearest_concrete_config(&fractional_shape, best.heads)?;
    Ok(OptimalChoice {
        query: *query,
        heads: best.heads,
        n_params: best.n_params.expect("feasible"),
        size_field: curves.iter().find(|c| c.heads == best.heads).map(|c| c.size_field).unwrap_or_default(),
        fractional_shape,
        concrete_shape,
        cost: best.cost.expect("feasible"),
        z_value: best.z.expect("feasible"),
        objective_value: best.objective_value.expect("feasible"),
        candidates: rows,
        warnings,
    })
}

/// Cost-optimal candidate for one `(target loss, context length)` query.
pub fn optimize(
    query: &OptimizationQuery,
    curves: &[ScalingCurve],
    family: &FamilyTable,
    settings: &SearchSettings,
) -> Result<OptimalChoice> {
    query.validate()?;
    check_curves(curves)?;
    let resolvers = Resolvers::new(family, settings, curves)?;
    let target = query.effective_target();
    let rows: Vec<CandidateRow> = curves
        .par_iter()
        .map(|curve| match invert_curve(curve, target) {
            Err(Error::InfeasibleTarget { gap, .. }) => {
                CandidateRow::infeasible(curve.heads, CandidateStatus::BelowAsymptote { gap }, None)
            }
            Err(e) => {
                CandidateRow::infeasible(curve.heads, CandidateStatus::Unresolvable { reason: e.to_string() }, None)
            }
            Ok(n) => match evaluate(curve, n, &resolvers, query, settings) {
                Ok(ev) => feasible_row(curve, n, ev),
                Err(e) => CandidateRow::infeasible(
                    curve.heads,
                    CandidateStatus::Unresolvable { reason: e.to_string() },
                    Some(n),
                ),
            },
        })
        .collect();
    assemble(query, curves, rows)
}

/// Exhaustive check of [`optimize`]: every candidate is scanned over a dense
/// log-spaced size grid spanning its fit domain widened 10x each way, keeping
/// the grid point with the lowest objective among those meeting the target.
/// When that point's lower neighbour misses the target, the loss boundary
/// inside the cell is located by bisection on the predicted loss.
pub fn brute_force_check(
    query: &OptimizationQuery,
    curves: &[ScalingCurve],
    family: &FamilyTable,
    settings: &SearchSettings,
    grid_points: usize,
) -> Result<OptimalChoice> {
    query.validate()?;
    check_curves(curves)?;
    if grid_points < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    let resolvers = Resolvers::new(family, settings, curves)?;
    let target = query.effective_target();
    let meets = |curve: &ScalingCurve, n: f64| predict_loss(curve, n) <= target;

    let rows: Vec<CandidateRow> = curves
        .par_iter()
        .map(|curve| {
            let lo = (curve.fit_domain.0 / GRID_WIDENING).ln();
            let hi = (curve.fit_domain.1 * GRID_WIDENING).ln();
            let grid: Vec<f64> =
                (0..grid_points).map(|k| (lo + (hi - lo) * k as f64 / (grid_points - 1) as f64).exp()).collect();
            let mut best: Option<(usize, f64, Evaluation)> = None;
            for (k, &n) in grid.iter().enumerate() {
                if !meets(curve, n) {
                    continue;
                }
                let Ok(ev) = evaluate(curve, n, &resolvers, query, settings) else { continue };
                if best.as_ref().is_none_or(|b| ev.objective_value < b.2.objective_value) {
                    best = Some((k, n, ev));
                }
            }
            let Some((k, mut n, mut ev)) = best else {
                let status = if target <= curve.e {
                    CandidateStatus::BelowAsymptote { gap: target - curve.e }
                } else {
                    CandidateStatus::Unresolvable { reason: "no grid point meets the target".into() }
                };
                return CandidateRow::infeasible(curve.heads, status, None);
            };
            if k > 0 && !meets(curve, grid[k - 1]) {
                let (mut miss, mut hit) = (grid[k - 1], grid[k]);
                for _ in 0..100 {
                    let mid = (miss * hit).sqrt();
                    if mid <= miss || mid >= hit {
                        break;
                    }
                    if meets(curve, mid) {
                        hit = mid;
                    } else {
                        miss = mid;
                    }
                }
                if let Ok(refined) = evaluate(curve, hit, &resolvers, query, settings) {
                    if refined.objective_value <= ev.objective_value {
                        n = hit;
                        ev = refined;
                    }
                }
            }
            feasible_row(curve, n, ev)
        })
        .collect();
    assemble(query, curves, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub heads: AttentionHeads,
    pub n_params: f64,
    pub cost: InferenceCost,
    pub z_value: f64,
    pub objective_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub target_loss: f64,
    pub context_length: u64,
    pub choice: Option<CellSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Descending.
    pub loss_axis: Vec<f64>,
    /// Ascending.
    pub context_axis: Vec<u64>,
    /// `cells[i][j]` answers `(loss_axis[i], context_axis[j])`.
    pub cells: Vec<Vec<SweepCell>>,
}

impl SweepGrid {
    pub fn winner(&self, i: usize, j: usize) -> Option<AttentionHeads> {
        self.cells[i][j].choice.as_ref().map(|c| c.heads)
    }
}

/// Sorts the loss axis descending and the context axis ascending, dropping
/// duplicates.
pub fn normalize_axes(loss_axis: &[f64], context_axis: &[u64]) -> Result<(Vec<f64>, Vec<u64>)> {
    if loss_axis.is_empty() || context_axis.is_empty() {
        return Err(Error::InvalidArgument("sweep axes must be non-empty".into()));
    }
    if loss_axis.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidArgument("loss axis values must be finite".into()));
    }
    let mut losses = loss_axis.to_vec();
    losses.sort_by(|a, b| b.total_cmp(a));
    losses.dedup();
    let mut contexts = context_axis.to_vec();
    contexts.sort_unstable();
    contexts.dedup();
    Ok((losses, contexts))
}

/// Runs [`optimize`] on every `(loss, context)` cell. Failing cells carry the
/// error message instead of aborting the sweep.
pub fn sweep(
    loss_axis: &[f64],
    context_axis: &[u64],
    curves: &[ScalingCurve],
    family: &FamilyTable,
    cost_params: HardwareCostParams,
    objective: Objective,
    settings: &SearchSettings,
) -> Result<SweepGrid> {
    let (losses, contexts) = normalize_axes(loss_axis, context_axis)?;
    check_curves(curves)?;
    let cells: Vec<Vec<SweepCell>> = losses
        .par_iter()
        .map(|&target_loss| {
            contexts
                .par_iter()
                .map(|&context_length| {
                    let query =
                        OptimizationQuery { target_loss, context_length, cost_params, objective, loss_shift: 0.0 };
                    match optimize(&query, curves, family, settings) {
                        Ok(c) => SweepCell {
                            target_loss,
                            context_length,
                            choice: Some(CellSummary {
                                heads: c.heads,
                                n_params: c.n_params,
                                cost: c.cost,
                                z_value: c.z_value,
                                objective_value: c.objective_value,
                            }),
                            error: None,
                        },
                        Err(e) => SweepCell { target_loss, context_length, choice: None, error: Some(e.to_string()) },
                    }
                })
                .collect()
        })
        .collect();
    Ok(SweepGrid { loss_axis: losses, context_axis: contexts, cells })
}

/// A concrete configuration entered in a training-budget comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub label: String,
    pub shape: ModelShape,
    pub heads: AttentionHeads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub label: String,
    pub heads: AttentionHeads,
    pub n_params: f64,
    pub train_tokens: f64,
    /// `20·N`
    pub chinchilla_tokens: f64,
    pub ratio_to_chinchilla: f64,
}

pub const CHINCHILLA_TOKENS_PER_PARAM: f64 = 20.0;

/// Training tokens each configuration may consume so that all of them spend
/// the same FLOPs budget.
pub fn aligned_budget_report(
    configs: &[BudgetConfig],
    flops_budget: f64,
    train_context: u64,
    mode: FfnCountingMode,
    size_field: SizeField,
) -> Result<Vec<BudgetRow>> {
    if train_context == 0 {
        return Err(Error::InvalidArgument("training context length must be positive".into()));
    }
    configs
        .iter()
        .map(|c| {
            let n = count_params(&c.shape, c.heads, mode)?.get(size_field) as f64;
            let d = tokens_under_budget(flops_budget, n, &c.shape, c.heads, train_context)?;
            let chinchilla = CHINCHILLA_TOKENS_PER_PARAM * n;
            Ok(BudgetRow {
                label: c.label.clone(),
                heads: c.heads,
                n_params: n,
                train_tokens: d,
                chinchilla_tokens: chinchilla,
                ratio_to_chinchilla: d / chinchilla,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::training_cost;

    fn curve(n_h: u32, n_kv: u32, a: f64) -> ScalingCurve {
        ScalingCurve::new(
            AttentionHeads::new(n_h, n_kv).unwrap(),
            a,
            0.3,
            2.0,
            SizeField::NonEmbedding,
            8192,
            (1e7, 1.2e9),
        )
        .unwrap()
    }

    fn mha_family() -> Vec<ScalingCurve> {
        (0..6)
            .map(|k| {
                let n = 1u32 << k;
                curve(n, n, 4e7 * (32.0 / f64::from(n)).powf(0.25))
            })
            .collect()
    }

    #[test]
    fn single_candidate() {
        let c = curve(8, 2, 5e7);
        let q = OptimizationQuery::new(2.5, 131_072);
        let choice =
            optimize(&q, std::slice::from_ref(&c), &FamilyTable::default(), &SearchSettings::default()).unwrap();
        assert_eq!(choice.heads, c.heads);
        assert_eq!(choice.n_params, invert_curve(&c, 2.5).unwrap());
        assert_eq!(choice.candidates.len(), 1);
        assert!(choice.concrete_shape.is_concrete());
    }

    #[test]
    fn all_infeasible_reports_gap() {
        let q = OptimizationQuery::new(1.9, 8192);
        match optimize(&q, &mha_family(), &FamilyTable::default(), &SearchSettings::default()) {
            Err(Error::AllInfeasible { gap, min_loss, .. }) => {
                assert!((gap - 0.1).abs() < 1e-12);
                assert_eq!(min_loss, 2.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_infeasibility_is_flagged_not_fatal() {
        let mut curves = mha_family();
        curves[0].e = 2.6;
        let q = OptimizationQuery::new(2.5, 8192);
        let choice = optimize(&q, &curves, &FamilyTable::default(), &SearchSettings::default()).unwrap();
        assert!(matches!(choice.candidates[0].status, CandidateStatus::BelowAsymptote { .. }));
        assert!(choice.candidates[1..].iter().all(CandidateRow::is_feasible));
    }

    #[test]
    fn winner_is_minimum_and_consistent() {
        let q = OptimizationQuery::new(2.5, 131_072);
        let choice = optimize(&q, &mha_family(), &FamilyTable::default(), &SearchSettings::default()).unwrap();
        let min = choice.candidates.iter().filter_map(|r| r.objective_value).fold(f64::INFINITY, f64::min);
        assert_eq!(choice.objective_value, min);
        assert_eq!(choice.z_value, hardware_cost(&choice.cost, &q.cost_params).unwrap());
        for row in &choice.candidates {
            let c = mha_family().into_iter().find(|c| c.heads == row.heads).unwrap();
            let n = row.n_params.unwrap();
            assert!((predict_loss(&c, n) / 2.5 - 1.0).abs() < 1e-9);
        }
        assert_eq!(choice.rows_by_objective()[0].heads, choice.heads);
    }

    #[test]
    fn ties_prefer_fewer_kv_heads_then_fewer_query_heads() {
        let row = |n_h, n_kv, n| CandidateRow {
            objective_value: Some(1.0),
            n_params: Some(n),
            ..CandidateRow::infeasible(AttentionHeads::new(n_h, n_kv).unwrap(), CandidateStatus::Feasible, None)
        };
        let mut rows = [row(8, 4, 1e8), row(8, 2, 2e8), row(4, 2, 3e8), row(4, 2, 1e8)];
        rows.sort_by(preference);
        let order: Vec<_> = rows.iter().map(|r| (r.heads.n_h(), r.heads.n_kv(), r.n_params.unwrap())).collect();
        assert_eq!(order, vec![(4, 2, 1e8), (4, 2, 3e8), (8, 2, 2e8), (8, 4, 1e8)]);
    }

    #[test]
    fn rejects_bad_curve_sets() {
        let q = OptimizationQuery::new(2.5, 8192);
        let fam = FamilyTable::default();
        assert!(matches!(optimize(&q, &[], &fam, &SearchSettings::default()), Err(Error::NoCurves)));
        let mut mixed = mha_family();
        mixed[1].context_length = 2048;
        assert!(optimize(&q, &mixed, &fam, &SearchSettings::default()).is_err());
        let dup = vec![curve(4, 4, 5e7), curve(4, 4, 6e7)];
        assert!(optimize(&q, &dup, &fam, &SearchSettings::default()).is_err());
    }

    #[test]
    fn loss_shift_moves_the_target() {
        let c = curve(8, 2, 5e7);
        let mut q = OptimizationQuery::new(2.6, 8192);
        q.loss_shift = 0.1;
        let shifted =
            optimize(&q, std::slice::from_ref(&c), &FamilyTable::default(), &SearchSettings::default()).unwrap();
        assert_eq!(shifted.n_params, invert_curve(&c, 2.5).unwrap());
    }

    #[test]
    fn sweep_normalizes_axes() {
        let grid = sweep(
            &[2.4, 2.6, 2.5, 2.6],
            &[65_536, 8192],
            &mha_family(),
            &FamilyTable::default(),
            HardwareCostParams::default(),
            Objective::HardwareCost,
            &SearchSettings::default(),
        )
        .unwrap();
        assert_eq!(grid.loss_axis, vec![2.6, 2.5, 2.4]);
        assert_eq!(grid.context_axis, vec![8192, 65_536]);
        assert_eq!(grid.cells.len(), 3);
        assert!(grid.cells.iter().all(|r| r.len() == 2));
        assert!(sweep(
            &[],
            &[8192],
            &mha_family(),
            &FamilyTable::default(),
            HardwareCostParams::default(),
            Objective::HardwareCost,
            &SearchSettings::default()
        )
        .is_err());
    }

    #[test]
    fn sweep_marks_infeasible_cells() {
        let grid = sweep(
            &[1.5, 2.5],
            &[8192],
            &mha_family(),
            &FamilyTable::default(),
            HardwareCostParams::default(),
            Objective::HardwareCost,
            &SearchSettings::default(),
        )
        .unwrap();
        assert!(grid.cells[0][0].choice.is_some());
        assert!(grid.cells[1][0].choice.is_none());
        assert!(grid.cells[1][0].error.is_some());
    }

    #[test]
    fn one_by_one_sweep_matches_optimize() {
        let q = OptimizationQuery::new(2.5, 32_768);
        let fam = FamilyTable::default();
        let direct = optimize(&q, &mha_family(), &fam, &SearchSettings::default()).unwrap();
        let grid =
            sweep(&[2.5], &[32_768], &mha_family(), &fam, q.cost_params, q.objective, &SearchSettings::default())
                .unwrap();
        let cell = grid.cells[0][0].choice.as_ref().unwrap();
        assert_eq!(cell.heads, direct.heads);
        assert_eq!(cell.n_params, direct.n_params);
        assert_eq!(cell.z_value, direct.z_value);
    }

    fn budget_configs() -> Vec<BudgetConfig> {
        let shape = ModelShape::concrete(24, 1280, 64, DEFAULT_VOCAB_SIZE).unwrap();
        vec![
            BudgetConfig { label: "h16".into(), shape, heads: AttentionHeads::new(16, 4).unwrap() },
            BudgetConfig { label: "h32".into(), shape, heads: AttentionHeads::new(32, 4).unwrap() },
        ]
    }

    #[test]
    fn aligned_budget_examples() {
        let configs = budget_configs();
        let h32 = &configs[1];
        let n32 = count_params(&h32.shape, h32.heads, FfnCountingMode::Table2).unwrap().total as f64;
        let budget = training_cost(n32, &h32.shape, h32.heads, 20.0 * n32, 8192).unwrap().flops;
        let rows = aligned_budget_report(&configs, budget, 8192, FfnCountingMode::Table2, SizeField::Total).unwrap();
        assert!(rows[0].train_tokens > rows[1].train_tokens);
        assert!((rows[1].train_tokens / (20.0 * n32) - 1.0).abs() < 1e-9);
        assert!((rows[1].ratio_to_chinchilla - 1.0).abs() < 1e-9);
        assert!(aligned_budget_report(&configs, budget, 0, FfnCountingMode::Table2, SizeField::Total).is_err());
        assert!(aligned_budget_report(&configs, -1.0, 8192, FfnCountingMode::Table2, SizeField::Total).is_err());
    }
}
