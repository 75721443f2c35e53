//! File formats: loss records and sweep matrices as CSV, curve documents and
//! series as JSON, plus helpers for human-readable tables.
//!
//! Machine-readable files carry every float in its shortest round-trip form,
//! so reading a file and writing it back reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AttentionHeads, FfnCountingMode, ModelShape};
use crate::cost::{component_breakdown, CostBreakdown, InferenceCost, Precision};
use crate::error::{Error, Result};
use crate::fit::{FitDiagnostics, HeadLawCurve, LossRecord, ScalingCurve};
use crate::optimize::{BudgetConfig, BudgetRow, CellSummary, SweepCell, SweepGrid};

pub const CURVES_FORMAT: &str = "gqa-curves/1";
pub const SERIES_FORMAT: &str = "gqa-series/1";

pub const RECORD_COLUMNS: [&str; 12] = [
    "model_id",
    "n_layers",
    "hidden_size",
    "head_dim",
    "vocab_size",
    "n_heads",
    "n_kv_heads",
    "n_params_total",
    "n_params_nonemb",
    "context_length",
    "train_tokens",
    "loss",
];

pub const SWEEP_COLUMNS: [&str; 12] = [
    "target_loss",
    "context_length",
    "n_heads",
    "n_kv_heads",
    "n_params",
    "flops_invariant",
    "flops_variant",
    "mem_invariant",
    "mem_variant",
    "z",
    "objective_value",
    "error",
];

pub const BUDGET_CONFIG_COLUMNS: [&str; 7] =
    ["label", "n_layers", "hidden_size", "head_dim", "vocab_size", "n_heads", "n_kv_heads"];

pub const INFEASIBLE_MARKER: &str = "-";

/// Six significant digits, switching to exponent notation outside
/// `[1e-3, 1e7)`.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs();
    if (1e-3..1e7).contains(&mag) {
        let digits = mag.log10().floor() as i32;
        let decimals = (5 - digits).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

/// Left-aligned first column, right-aligned others.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn parse_err(origin: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: origin.to_path_buf(), line, msg: msg.into() }
}

/// Maps required column names to their positions in a header row.
fn column_index(header: &csv::StringRecord, required: &[&str], origin: &Path) -> Result<Vec<usize>> {
    required
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| parse_err(origin, 1, format!("missing column {name:?}")))
        })
        .collect()
}

/// CSV reader over `text` with `#` comment lines blanked out. The csv crate
/// does not count skipped lines, so physical line numbers come from
/// [`LineMap`] instead.
fn csv_reader(text: &str) -> (csv::Reader<std::io::Cursor<Vec<u8>>>, LineMap) {
    let cleaned: String = text
        .split_inclusive('\n')
        .map(|line| {
            if line.trim_start().starts_with('#') {
                if line.ends_with('\n') {
                    "\n"
                } else {
                    ""
                }
            } else {
                line
            }
        })
        .collect();
    let map = LineMap {
        newlines: cleaned.bytes().enumerate().filter(|&(_, b)| b == b'\n').map(|(i, _)| i as u64).collect(),
        text: cleaned.clone(),
    };
    let rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::Cursor::new(cleaned.into_bytes()));
    (rdr, map)
}

struct LineMap {
    newlines: Vec<u64>,
    text: String,
}

impl LineMap {
    /// Positions may point at blank lines skipped before the record.
    fn line(&self, pos: Option<&csv::Position>) -> u64 {
        let Some(p) = pos else { return 0 };
        let start = p.byte() as usize;
        let skipped = self
            .text
            .as_bytes()
            .get(start..)
            .map_or(0, |rest| rest.iter().take_while(|b| matches!(b, b'\n' | b'\r')).count());
        let byte = (start + skipped) as u64;
        self.newlines.partition_point(|&nl| nl < byte) as u64 + 1
    }
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    index: &'a [usize],
    names: &'a [&'a str],
    origin: &'a Path,
    line: u64,
}

impl Row<'_> {
    fn str(&self, k: usize) -> &str {
        self.record.get(self.index[k]).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, k: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(k);
        raw.parse().map_err(|e| parse_err(self.origin, self.line, format!("column {}: {raw:?}: {e}", self.names[k])))
    }

    fn optional<T: std::str::FromStr>(&self, k: usize) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.str(k).is_empty() {
            Ok(None)
        } else {
            self.parse(k).map(Some)
        }
    }
}

/// A loss record together with the architecture it was measured on, when
/// known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedRecord {
    pub record: LossRecord,
    pub shape: Option<ModelShape>,
}

impl From<LossRecord> for ShapedRecord {
    fn from(record: LossRecord) -> Self {
        Self { record, shape: None }
    }
}

/// Parses a loss-record table. Shape columns may be left blank.
pub fn parse_records(text: &str, origin: &Path) -> Result<Vec<ShapedRecord>> {
    let (mut rdr, lines) = csv_reader(text);
    let header = match rdr.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        _ => return Err(Error::NoRecords { path: origin.to_path_buf() }),
    };
    let index = column_index(&header, &RECORD_COLUMNS, origin)?;
    let mut out = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| {
            let line = lines.line(e.position());
            parse_err(origin, line, e.to_string())
        })?;
        let line = lines.line(rec.position());
        let row = Row { record: &rec, index: &index, names: &RECORD_COLUMNS, origin, line };
        let heads =
            AttentionHeads::new(row.parse(5)?, row.parse(6)?).map_err(|e| parse_err(origin, line, e.to_string()))?;
        let shape_fields: [Option<u32>; 4] = [row.optional(1)?, row.optional(2)?, row.optional(3)?, row.optional(4)?];
        let shape = match shape_fields {
            [Some(l), Some(d), Some(dh), Some(v)] => {
                Some(ModelShape::concrete(l, d, dh, v).map_err(|e| parse_err(origin, line, e.to_string()))?)
            }
            [None, None, None, None] => None,
            _ => return Err(parse_err(origin, line, "shape columns must be all filled or all blank")),
        };
        let record = LossRecord {
            model_id: row.str(0).to_string(),
            heads,
            n_params_total: row.parse(7)?,
            n_params_non_embedding: row.parse(8)?,
            context_length: row.parse(9)?,
            train_tokens: row.parse(10)?,
            loss: row.parse(11)?,
        };
        record.validate().map_err(|e| parse_err(origin, line, e.to_string()))?;
        out.push(ShapedRecord { record, shape });
    }
    if out.is_empty() {
        return Err(Error::NoRecords { path: origin.to_path_buf() });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<ShapedRecord>> {
    parse_records(&fs::read_to_string(path)?, path)
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_to_csv(records: &[ShapedRecord]) -> Result<String> {
    csv_string(|w| {
        w.write_record(RECORD_COLUMNS)?;
        for ShapedRecord { record: r, shape } in records {
            let shape_cells = match shape {
                Some(s) => [
                    s.n_layers.to_string(),
                    s.hidden_size.to_string(),
                    s.head_dim.to_string(),
                    s.vocab_size.to_string(),
                ],
                None => Default::default(),
            };
            w.write_record([
                r.model_id.clone(),
                shape_cells[0].clone(),
                shape_cells[1].clone(),
                shape_cells[2].clone(),
                shape_cells[3].clone(),
                r.heads.n_h().to_string(),
                r.heads.n_kv().to_string(),
                r.n_params_total.to_string(),
                r.n_params_non_embedding.to_string(),
                r.context_length.to_string(),
                r.train_tokens.to_string(),
                r.loss.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub curve: ScalingCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
}

/// A head-count law fitted over records sharing one context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLawEntry {
    pub context_length: u64,
    pub curve: HeadLawCurve,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedGroup {
    pub heads: AttentionHeads,
    pub context_length: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveDocument {
    pub format: String,
    #[serde(default)]
    pub curves: Vec<CurveEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_laws: Vec<HeadLawEntry>,
    /// Set when the head laws were fitted with one common asymptote.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedGroup>,
}

impl CurveDocument {
    pub fn new(curves: Vec<CurveEntry>) -> Self {
        Self { format: CURVES_FORMAT.into(), curves, head_laws: Vec::new(), shared_constant: None, skipped: Vec::new() }
    }

    pub fn from_curves(curves: impl IntoIterator<Item = ScalingCurve>) -> Self {
        Self::new(curves.into_iter().map(|curve| CurveEntry { curve, diagnostics: None }).collect())
    }

    pub fn curves(&self) -> Vec<ScalingCurve> {
        self.curves.iter().map(|e| e.curve.clone()).collect()
    }

    /// Curves fitted at one context length; all of them when `None`.
    pub fn curves_at(&self, context_length: Option<u64>) -> Vec<ScalingCurve> {
        self.curves
            .iter()
            .map(|e| e.curve.clone())
            .filter(|c| context_length.is_none_or(|t| c.context_length == t))
            .collect()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| parse_err(origin, e.line() as u64, e.to_string()))?;
        if doc.format != CURVES_FORMAT {
            return Err(parse_err(
                origin,
                1,
                format!("unsupported format {:?} (expected {CURVES_FORMAT:?})", doc.format),
            ));
        }
        for entry in &doc.curves {
            entry.curve.validate().map_err(|e| parse_err(origin, 0, e.to_string()))?;
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Rows are target losses, columns context lengths, cells `n_h,n_kv` or `-`.
pub fn render_sweep_matrix(grid: &SweepGrid) -> String {
    let headers: Vec<String> =
        std::iter::once("L* \\ T".to_string()).chain(grid.context_axis.iter().map(u64::to_string)).collect();
    let rows: Vec<Vec<String>> = grid
        .loss_axis
        .iter()
        .zip(&grid.cells)
        .map(|(l, cells)| {
            std::iter::once(fmt_sig(*l))
                .chain(
                    cells
                        .iter()
                        .map(|c| c.choice.as_ref().map_or(INFEASIBLE_MARKER.to_string(), |s| s.heads.to_string())),
                )
                .collect()
        })
        .collect();
    render_table(&headers.iter().map(String::as_str).collect::<Vec<_>>(), &rows)
}

pub fn sweep_to_csv(grid: &SweepGrid) -> Result<String> {
    csv_string(|w| {
        w.write_record(SWEEP_COLUMNS)?;
        for cell in grid.cells.iter().flatten() {
            let mut fields = vec![cell.target_loss.to_string(), cell.context_length.to_string()];
            match &cell.choice {
                Some(s) => fields.extend([
                    s.heads.n_h().to_string(),
                    s.heads.n_kv().to_string(),
                    s.n_params.to_string(),
                    s.cost.flops_invariant.to_string(),
                    s.cost.flops_variant.to_string(),
                    s.cost.mem_invariant.to_string(),
                    s.cost.mem_variant.to_string(),
                    s.z_value.to_string(),
                    s.objective_value.to_string(),
                ]),
                None => fields.extend(std::iter::repeat_n(String::new(), 9)),
            }
            fields.push(cell.error.clone().unwrap_or_default());
            w.write_record(&fields)?;
        }
        Ok(())
    })
}

/// Reads a sweep companion file back into a grid. Axes keep the order in
/// which they first appear.
pub fn parse_sweep_csv(text: &str, origin: &Path) -> Result<SweepGrid> {
    let (mut rdr, lines) = csv_reader(text);
    let header = rdr.headers().map_err(|e| parse_err(origin, 1, e.to_string()))?.clone();
    let index = column_index(&header, &SWEEP_COLUMNS, origin)?;
    let mut loss_axis: Vec<f64> = Vec::new();
    let mut context_axis: Vec<u64> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), SweepCell> = BTreeMap::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| parse_err(origin, lines.line(e.position()), e.to_string()))?;
        let line = lines.line(rec.position());
        let row = Row { record: &rec, index: &index, names: &SWEEP_COLUMNS, origin, line };
        let target_loss: f64 = row.parse(0)?;
        let context_length: u64 = row.parse(1)?;
        let i = loss_axis.iter().position(|&l| l.to_bits() == target_loss.to_bits()).unwrap_or_else(|| {
            loss_axis.push(target_loss);
            loss_axis.len() - 1
        });
        let j = context_axis.iter().position(|&t| t == context_length).unwrap_or_else(|| {
            context_axis.push(context_length);
            context_axis.len() - 1
        });
        let choice = match row.optional::<u32>(2)? {
            None => None,
            Some(n_h) => Some(CellSummary {
                heads: AttentionHeads::new(n_h, row.parse(3)?).map_err(|e| parse_err(origin, line, e.to_string()))?,
                n_params: row.parse(4)?,
                cost: InferenceCost {
                    flops_invariant: row.parse(5)?,
                    flops_variant: row.parse(6)?,
                    mem_invariant: row.parse(7)?,
                    mem_variant: row.parse(8)?,
                    context_length,
                },
                z_value: row.parse(9)?,
                objective_value: row.parse(10)?,
            }),
        };
        let error = Some(row.str(11).to_string()).filter(|s| !s.is_empty());
        if cells.insert((i, j), SweepCell { target_loss, context_length, choice, error }).is_some() {
            return Err(parse_err(origin, line, "duplicate cell"));
        }
    }
    let mut grid = Vec::with_capacity(loss_axis.len());
    for (i, loss) in loss_axis.iter().enumerate() {
        let mut row = Vec::with_capacity(context_axis.len());
        for (j, ctx) in context_axis.iter().enumerate() {
            row.push(
                cells.remove(&(i, j)).ok_or_else(|| parse_err(origin, 0, format!("missing cell ({loss}, {ctx})")))?,
            );
        }
        grid.push(row);
    }
    Ok(SweepGrid { loss_axis, context_axis, cells: grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDocument {
    pub format: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl SeriesDocument {
    pub fn new(
        title: impl Into<String>,
        x_label: impl Into<String>,
        y_label: impl Into<String>,
        series: Vec<Series>,
    ) -> Result<Self> {
        let doc = Self {
            format: SERIES_FORMAT.into(),
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.series {
            if s.x.len() != s.y.len() {
                return Err(Error::InvalidArgument(format!("series {:?}: x and y lengths differ", s.label)));
            }
            if s.x.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument(format!("series {:?}: x must be strictly increasing", s.label)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| parse_err(origin, e.line() as u64, e.to_string()))?;
        if doc.format != SERIES_FORMAT {
            return Err(parse_err(
                origin,
                1,
                format!("unsupported format {:?} (expected {SERIES_FORMAT:?})", doc.format),
            ));
        }
        doc.validate().map_err(|e| parse_err(origin, 0, e.to_string()))?;
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Component fractions of per-token FLOPs and memory over a context-length
/// axis, one series per component.
pub fn breakdown_series(
    shape: &ModelShape,
    heads: AttentionHeads,
    context_axis: &[u64],
    mode: FfnCountingMode,
    precision: Precision,
) -> Result<(SeriesDocument, SeriesDocument)> {
    let mut axis = context_axis.to_vec();
    axis.sort_unstable();
    axis.dedup();
    let points = axis
        .iter()
        .map(|&t| Ok((t as f64, component_breakdown(shape, heads, t, mode, precision)?)))
        .collect::<Result<Vec<_>>>()?;
    breakdown_documents("context_length", &points)
}

/// FLOPs and memory fraction documents from breakdowns evaluated at
/// increasing `x`.
pub fn breakdown_documents(x_label: &str, points: &[(f64, CostBreakdown)]) -> Result<(SeriesDocument, SeriesDocument)> {
    let Some((_, first)) = points.first() else {
        return Err(Error::InvalidArgument("breakdown axis must be non-empty".into()));
    };
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let series = |labels: Vec<&'static str>, pick: &dyn Fn(&CostBreakdown, usize) -> f64| -> Vec<Series> {
        labels
            .iter()
            .enumerate()
            .map(|(k, label)| Series {
                label: label.to_string(),
                x: x.clone(),
                y: points.iter().map(|(_, b)| pick(b, k)).collect(),
            })
            .collect()
    };
    let flops = series(first.flops.shares().map(|(l, _)| l).to_vec(), &|b, k| b.flops.shares()[k].1.fraction);
    let memory = series(first.memory.shares().map(|(l, _)| l).to_vec(), &|b, k| b.memory.shares()[k].1.fraction);
    Ok((
        SeriesDocument::new("FLOPs per token by component", x_label, "fraction", flops)?,
        SeriesDocument::new("memory per token by component", x_label, "fraction", memory)?,
    ))
}

pub fn parse_budget_configs(text: &str, origin: &Path) -> Result<Vec<BudgetConfig>> {
    let (mut rdr, lines) = csv_reader(text);
    let header = rdr.headers().map_err(|e| parse_err(origin, 1, e.to_string()))?.clone();
    let index = column_index(&header, &BUDGET_CONFIG_COLUMNS, origin)?;
    let mut out = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| parse_err(origin, lines.line(e.position()), e.to_string()))?;
        let line = lines.line(rec.position());
        let row = Row { record: &rec, index: &index, names: &BUDGET_CONFIG_COLUMNS, origin, line };
        let wrap = |e: Error| parse_err(origin, line, e.to_string());
        out.push(BudgetConfig {
            label: row.str(0).to_string(),
            shape: ModelShape::concrete(row.parse(1)?, row.parse(2)?, row.parse(3)?, row.parse(4)?).map_err(wrap)?,
            heads: AttentionHeads::new(row.parse(5)?, row.parse(6)?).map_err(wrap)?,
        });
    }
    if out.is_empty() {
        return Err(Error::NoRecords { path: origin.to_path_buf() });
    }
    Ok(out)
}

pub fn budget_rows_to_csv(rows: &[BudgetRow]) -> Result<String> {
    csv_string(|w| {
        w.write_record([
            "label",
            "n_heads",
            "n_kv_heads",
            "n_params",
            "train_tokens",
            "chinchilla_tokens",
            "ratio_to_chinchilla",
        ])?;
        for r in rows {
            w.write_record([
                r.label.clone(),
                r.heads.n_h().to_string(),
                r.heads.n_kv().to_string(),
                r.n_params.to_string(),
                r.train_tokens.to_string(),
                r.chinchilla_tokens.to_string(),
                r.ratio_to_chinchilla.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SizeField;
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("test.csv")
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(2.615), "2.61500");
        assert_eq!(fmt_sig(131072.0), "131072");
        assert_eq!(fmt_sig(0.0123456789), "0.0123457");
        assert_eq!(fmt_sig(6_031_838_208.0), "6.03184e9");
        assert_eq!(fmt_sig(-1.5e-7), "-1.50000e-7");
        assert_eq!(fmt_sig(0.0), "0");
    }

    const RECORDS: &str = "\
model_id,n_layers,hidden_size,head_dim,vocab_size,n_heads,n_kv_heads,n_params_total,n_params_nonemb,context_length,train_tokens,loss
a,12,768,64,50304,12,12,123000000,85000000,8192,2000000000,3.1
# comment
b,,,,,8,2,1e8,5e7,8192,2e9,3.3
";

    #[test]
    fn records_parse_and_round_trip() {
        let recs = parse_records(RECORDS, &origin()).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].shape.unwrap().is_concrete());
        assert!(recs[1].shape.is_none());
        assert_eq!(recs[1].record.heads, AttentionHeads::new(8, 2).unwrap());
        let written = records_to_csv(&recs).unwrap();
        let again = parse_records(&written, &origin()).unwrap();
        assert_eq!(again, recs);
        assert_eq!(records_to_csv(&again).unwrap(), written);
    }

    #[test]
    fn record_errors_cite_lines() {
        let bad = RECORDS.replace("3.3", "oops");
        match parse_records(&bad, &origin()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("loss"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let bad = RECORDS.replace("8,2,1e8", "2,8,1e8");
        assert!(matches!(parse_records(&bad, &origin()), Err(Error::Parse { line: 4, .. })));
        let missing = "model_id,loss\nx,1\n";
        assert!(matches!(parse_records(missing, &origin()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_record_files() {
        assert!(matches!(parse_records("", &origin()), Err(Error::NoRecords { .. })));
        let header_only = format!("{}\n", RECORD_COLUMNS.join(","));
        assert!(matches!(parse_records(&header_only, &origin()), Err(Error::NoRecords { .. })));
    }

    #[test]
    fn curve_document_round_trip_is_bit_identical() {
        let c = ScalingCurve::new(
            AttentionHeads::new(32, 8).unwrap(),
            1.0 / 3.0 * 1e8,
            0.1 + 0.2,
            1.8,
            SizeField::NonEmbedding,
            8192,
            (1.1e7, 1.2e9),
        )
        .unwrap();
        let mut doc = CurveDocument::new(vec![CurveEntry {
            curve: c.clone(),
            diagnostics: Some(FitDiagnostics {
                r_squared: 0.9999999,
                rmse: 1e-9,
                n_points: 6,
                residuals: vec![1e-10, -2e-10],
            }),
        }]);
        doc.skipped.push(SkippedGroup {
            heads: AttentionHeads::mha(4).unwrap(),
            context_length: 8192,
            reason: "too few".into(),
        });
        let text = doc.to_json().unwrap();
        let back = CurveDocument::parse(&text, &origin()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.curves[0].curve.a.to_bits(), c.a.to_bits());
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.contains("\"E\""));
        let wrong = text.replace(CURVES_FORMAT, "other/9");
        assert!(CurveDocument::parse(&wrong, &origin()).is_err());
    }

    #[test]
    fn series_x_must_increase() {
        let s = |x: Vec<f64>| Series { label: "s".into(), y: vec![0.0; x.len()], x };
        assert!(SeriesDocument::new("t", "x", "y", vec![s(vec![1.0, 2.0])]).is_ok());
        assert!(SeriesDocument::new("t", "x", "y", vec![s(vec![2.0, 2.0])]).is_err());
    }

    #[test]
    fn breakdown_fractions_sum_to_one() {
        let shape = ModelShape::concrete(36, 1536, 64, 50304).unwrap();
        let axis: Vec<u64> = (10..=19).map(|k| 1u64 << k).collect();
        let (flops, memory) = breakdown_series(
            &shape,
            AttentionHeads::mha(24).unwrap(),
            &axis,
            FfnCountingMode::Table2,
            Precision::default(),
        )
        .unwrap();
        for doc in [&flops, &memory] {
            for i in 0..axis.len() {
                let sum: f64 = doc.series.iter().map(|s| s.y[i]).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        let kv = memory.series.iter().find(|s| s.label.contains("kv")).unwrap();
        assert!(kv.y.windows(2).all(|w| w[0] < w[1]));
        let at_128k = kv.y[axis.iter().position(|&t| t == 131_072).unwrap()];
        assert!(at_128k >= 0.88);
        let back = SeriesDocument::parse(&memory.to_json().unwrap(), &origin()).unwrap();
        assert_eq!(back, memory);
        let (single, _) = breakdown_series(
            &shape,
            AttentionHeads::mha(24).unwrap(),
            &[8192],
            FfnCountingMode::Table2,
            Precision::default(),
        )
        .unwrap();
        assert_eq!(single.series[0].x.len(), 1);
    }

    #[test]
    fn budget_configs_parse() {
        let text = "label,n_layers,hidden_size,head_dim,vocab_size,n_heads,n_kv_heads\nx,24,1280,64,50304,16,4\n";
        let cfgs = parse_budget_configs(text, &origin()).unwrap();
        assert_eq!(cfgs[0].heads, AttentionHeads::new(16, 4).unwrap());
        assert!(parse_budget_configs(
            "label,n_layers,hidden_size,head_dim,vocab_size,n_heads,n_kv_heads\nx,0,1280,64,50304,16,4\n",
            &origin()
        )
        .is_err());
    }
}
