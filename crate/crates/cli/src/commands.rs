use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use gqa_core::config::{count_params, nearest_concrete_config, AttentionHeads, ParamCount};
use gqa_core::cost::{component_breakdown, hardware_cost, inference_cost, training_cost, CostBreakdown, InferenceCost};
use gqa_core::family::{HeadsRule, ShapeResolver};
use gqa_core::fit::{
    check_train_tokens, fit_head_law, fit_power_law, group_records, joint_fit_shared_constant, FitOptions, LossRecord,
    ScalingCurve, POOR_FIT_R_SQUARED,
};
use gqa_core::io::{
    breakdown_documents, breakdown_series, budget_rows_to_csv, fmt_sig, parse_budget_configs, read_records,
    render_sweep_matrix, render_table, sweep_to_csv, CurveDocument, CurveEntry, HeadLawEntry, SeriesDocument,
    SkippedGroup,
};
use gqa_core::optimize::{
    aligned_budget_report, brute_force_check, CandidateStatus, OptimalChoice, OptimizationQuery, SearchSettings,
    DEFAULT_GRID_POINTS,
};
use gqa_core::Error;
use serde::Serialize;

use crate::{AlignCmd, BreakdownCmd, CostCmd, FitCmd, Format, OptimizeCmd, Output, SearchArgs, SweepCmd};

/// Largest relative N* difference `optimize --check` accepts.
const CHECK_TOLERANCE: f64 = 5e-3;

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes the machine-readable form to `--out` when given, and prints either
/// it or the human table depending on `--format`.
fn emit(output: &Output, machine: &str, table: impl FnOnce() -> String) -> anyhow::Result<()> {
    if let Some(path) = &output.out {
        write_file(path, machine)?;
    }
    match output.format {
        Format::Machine => print!("{machine}"),
        Format::Table => print!("{}", table()),
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct CostReport {
    n_layers: f64,
    hidden_size: f64,
    ffn_size: f64,
    heads: AttentionHeads,
    params: ParamCount,
    cost_n_params: f64,
    cost: InferenceCost,
    flops_total: f64,
    mem_total: f64,
    mem_total_bytes: f64,
    z: f64,
    breakdown: CostBreakdown,
}

fn breakdown_rows(b: &CostBreakdown) -> Vec<Vec<String>> {
    let flops = b.flops.shares().map(|(l, s)| vec![format!("flops.{l}"), fmt_sig(s.value), fmt_sig(s.fraction)]);
    let mem = b.memory.shares().map(|(l, s)| vec![format!("memory.{l}"), fmt_sig(s.value), fmt_sig(s.fraction)]);
    flops.into_iter().chain(mem).collect()
}

pub fn cost(cmd: &CostCmd) -> anyhow::Result<()> {
    let heads = cmd.shape.heads()?;
    let shape = cmd.shape.shape(&cmd.counting)?;
    let params = count_params(&shape, heads, cmd.counting.ffn_mode)?;
    let n = match cmd.n_params {
        Some(n) if n.is_finite() && n > 0.0 => n,
        Some(n) => bail!("--n-params must be positive, got {n}"),
        None => params.get(cmd.size_field) as f64,
    };
    let cost = inference_cost(n, &shape, heads, cmd.ctx);
    let z = hardware_cost(&cost, &cmd.weights.params()?)?;
    let precision = cmd.precision()?;
    let breakdown = component_breakdown(&shape, heads, cmd.ctx, cmd.counting.ffn_mode, precision)?;
    let report = CostReport {
        n_layers: shape.n_layers,
        hidden_size: shape.hidden_size,
        ffn_size: shape.ffn_size,
        heads,
        params,
        cost_n_params: n,
        cost,
        flops_total: cost.flops_total(),
        mem_total: cost.mem_total(),
        mem_total_bytes: precision.bytes(cost.mem_total()),
        z,
        breakdown,
    };
    emit(&cmd.output, &json(&report)?, || {
        let mut out = format!(
            "L={} d={} d_ff={} heads=({}) T={}\nparameters: total {} non-embedding {} (cost uses {})\n\n",
            shape.n_layers,
            shape.hidden_size,
            shape.ffn_size,
            heads,
            cmd.ctx,
            params.total,
            params.non_embedding,
            fmt_sig(n)
        );
        let row =
            |name: &str, inv: f64, var: f64| vec![name.to_string(), fmt_sig(inv), fmt_sig(var), fmt_sig(inv + var)];
        out.push_str(&render_table(
            &["per token", "time-invariant", "time-variant", "total"],
            &[
                row("FLOPs", cost.flops_invariant, cost.flops_variant),
                row("memory (values)", cost.mem_invariant, cost.mem_variant),
                row("memory (bytes)", precision.bytes(cost.mem_invariant), precision.bytes(cost.mem_variant)),
            ],
        ));
        out.push_str(&format!("\nZ = {}\n\n", fmt_sig(z)));
        out.push_str(&render_table(&["component", "value", "fraction"], &breakdown_rows(&breakdown)));
        out
    })
}

fn diagnostics_row(label: String, t: u64, coeffs: [f64; 3], r2: f64, n: usize) -> Vec<String> {
    vec![
        label,
        t.to_string(),
        fmt_sig(coeffs[0]),
        fmt_sig(coeffs[1]),
        fmt_sig(coeffs[2]),
        format!("{r2:.6}"),
        n.to_string(),
    ]
}

fn warn_poor_fit(label: &str, r2: f64) {
    if r2 < POOR_FIT_R_SQUARED {
        eprintln!("warning: {label}: R^2 = {r2:.6} is below {POOR_FIT_R_SQUARED}");
    }
}

pub fn fit(cmd: &FitCmd) -> anyhow::Result<()> {
    let records: Vec<LossRecord> = read_records(&cmd.records)?.into_iter().map(|r| r.record).collect();
    let mut doc = CurveDocument::new(Vec::new());
    let mut rows = Vec::new();
    let headers;
    if let Some(axis) = cmd.axis {
        headers = ["axis", "T", "a", "b", "c", "R^2", "points"];
        let mut by_context: BTreeMap<u64, Vec<LossRecord>> = BTreeMap::new();
        for r in records {
            by_context.entry(r.context_length).or_default().push(r);
        }
        if cmd.shared_constant {
            let groups: Vec<Vec<LossRecord>> = by_context.values().cloned().collect();
            let joint = joint_fit_shared_constant(&groups, axis)?;
            if joint.poor_fit {
                eprintln!("warning: a shared asymptote does not fit every context length well");
            }
            doc.shared_constant = Some(joint.constant);
            for ((t, _), (curve, diagnostics)) in by_context.iter().zip(joint.curves.into_iter().zip(joint.diagnostics))
            {
                warn_poor_fit(&format!("T={t}"), diagnostics.r_squared);
                rows.push(diagnostics_row(
                    axis.to_string(),
                    *t,
                    [curve.a, curve.b, curve.c],
                    diagnostics.r_squared,
                    diagnostics.n_points,
                ));
                doc.head_laws.push(HeadLawEntry { context_length: *t, curve, diagnostics });
            }
        } else {
            for (t, group) in &by_context {
                let (curve, diagnostics) = fit_head_law(group, axis).with_context(|| format!("fitting T={t}"))?;
                warn_poor_fit(&format!("T={t}"), diagnostics.r_squared);
                rows.push(diagnostics_row(
                    axis.to_string(),
                    *t,
                    [curve.a, curve.b, curve.c],
                    diagnostics.r_squared,
                    diagnostics.n_points,
                ));
                doc.head_laws.push(HeadLawEntry { context_length: *t, curve, diagnostics });
            }
        }
    } else {
        headers = ["heads", "T", "a", "b", "E", "R^2", "points"];
        let opts = FitOptions { size_field: cmd.size_field, chinchilla_ratio: cmd.chinchilla };
        check_train_tokens(&records, &opts)?;
        for ((heads, t), group) in group_records(&records) {
            match fit_power_law(&group, &opts) {
                Ok((curve, diagnostics)) => {
                    warn_poor_fit(&format!("heads=({heads}) T={t}"), diagnostics.r_squared);
                    rows.push(diagnostics_row(
                        heads.to_string(),
                        t,
                        [curve.a, curve.b, curve.e],
                        diagnostics.r_squared,
                        diagnostics.n_points,
                    ));
                    doc.curves.push(CurveEntry { curve, diagnostics: Some(diagnostics) });
                }
                Err(e @ (Error::InsufficientData { .. } | Error::DegenerateData(_))) => {
                    eprintln!("warning: skipping heads=({heads}) T={t}: {e}");
                    doc.skipped.push(SkippedGroup { heads, context_length: t, reason: e.to_string() });
                }
                Err(e) => return Err(e).with_context(|| format!("fitting heads=({heads}) T={t}")),
            }
        }
        if doc.curves.is_empty() {
            bail!("no group could be fitted");
        }
    }
    emit(&cmd.output, &doc.to_json()?, || {
        let mut out = render_table(&headers, &rows);
        if let Some(c) = doc.shared_constant {
            out.push_str(&format!("shared constant c = {}\n", fmt_sig(c)));
        }
        out
    })
}

fn search_setup(args: &SearchArgs) -> anyhow::Result<(Vec<ScalingCurve>, SearchSettings)> {
    let doc = CurveDocument::load(&args.curves)?;
    let curves = doc.curves_at(Some(args.ref_ctx));
    if curves.is_empty() {
        let mut available: Vec<u64> = doc.curves.iter().map(|e| e.curve.context_length).collect();
        available.sort_unstable();
        available.dedup();
        bail!(
            "{} has no curves fitted at context length {} (available: {available:?}); pass --ref-ctx",
            args.curves.display(),
            args.ref_ctx
        );
    }
    let settings = SearchSettings {
        mode: args.counting.ffn_mode,
        cost_size_field: args.size_field,
        head_dim: args.counting.head_dim,
        vocab_size: args.counting.vocab,
    };
    Ok((curves, settings))
}

fn render_choice(choice: &OptimalChoice) -> String {
    let s = &choice.concrete_shape;
    let f = &choice.fractional_shape;
    let mut out = format!(
        "target loss {} at T={}: best heads ({}) with N* = {} ({})\n  fractional shape L={} d={}\n  nearest concrete L={} d={} d_ff={}\n  Z = {}  memory = {}  FLOPs = {}\n\n",
        choice.query.target_loss,
        choice.query.context_length,
        choice.heads,
        fmt_sig(choice.n_params),
        choice.size_field,
        fmt_sig(f.n_layers),
        fmt_sig(f.hidden_size),
        s.n_layers,
        s.hidden_size,
        s.ffn_size,
        fmt_sig(choice.z_value),
        fmt_sig(choice.cost.mem_total()),
        fmt_sig(choice.cost.flops_total()),
    );
    let rows: Vec<Vec<String>> = choice
        .rows_by_objective()
        .into_iter()
        .map(|r| {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), fmt_sig);
            let status = match &r.status {
                CandidateStatus::Feasible if r.extrapolated => "extrapolated".to_string(),
                CandidateStatus::Feasible if r.beyond_anchors => "beyond anchors".to_string(),
                CandidateStatus::Feasible => "ok".to_string(),
                CandidateStatus::BelowAsymptote { gap } => format!("target below E by {}", fmt_sig(-gap)),
                CandidateStatus::Unresolvable { reason } => reason.clone(),
            };
            vec![
                r.heads.to_string(),
                opt(r.n_params),
                opt(r.fractional_shape.map(|s| s.n_layers)),
                opt(r.fractional_shape.map(|s| s.hidden_size)),
                opt(r.cost.map(|c| c.mem_total())),
                opt(r.cost.map(|c| c.flops_total())),
                opt(r.z),
                status,
            ]
        })
        .collect();
    out.push_str(&render_table(&["heads", "N*", "L", "d", "memory", "FLOPs", "Z", "status"], &rows));
    out
}

pub fn optimize(cmd: &OptimizeCmd) -> anyhow::Result<()> {
    let (curves, settings) = search_setup(&cmd.search)?;
    let family = cmd.search.family.load()?;
    let query = OptimizationQuery {
        target_loss: cmd.target_loss,
        context_length: cmd.ctx,
        cost_params: cmd.search.weights.params()?,
        objective: cmd.search.objective,
        loss_shift: 0.0,
    };
    let choice = gqa_core::optimize::optimize(&query, &curves, &family, &settings)?;
    for w in &choice.warnings {
        eprintln!("warning: {w}");
    }
    if cmd.check {
        let oracle = brute_force_check(&query, &curves, &family, &settings, DEFAULT_GRID_POINTS)?;
        let rel = (oracle.n_params / choice.n_params - 1.0).abs();
        if oracle.heads != choice.heads {
            bail!("exhaustive search picked ({}) instead of ({})", oracle.heads, choice.heads);
        }
        if rel > CHECK_TOLERANCE {
            bail!(
                "exhaustive search puts N* for ({}) at {}, {} away",
                oracle.heads,
                fmt_sig(oracle.n_params),
                fmt_sig(rel)
            );
        }
        eprintln!("check: exhaustive search agrees on ({}); N* differs by {}", oracle.heads, fmt_sig(rel));
    }
    emit(&cmd.output, &json(&choice)?, || render_choice(&choice))
}

pub fn sweep(cmd: &SweepCmd) -> anyhow::Result<()> {
    let (curves, settings) = search_setup(&cmd.search)?;
    let family = cmd.search.family.load()?;
    let grid = gqa_core::optimize::sweep(
        &cmd.losses,
        &cmd.contexts,
        &curves,
        &family,
        cmd.search.weights.params()?,
        cmd.search.objective,
        &settings,
    )?;
    for cell in grid.cells.iter().flatten() {
        if let Some(e) = &cell.error {
            eprintln!("warning: L*={} T={}: {e}", cell.target_loss, cell.context_length);
        }
    }
    let matrix = render_sweep_matrix(&grid);
    if let Some(path) = &cmd.matrix {
        write_file(path, &matrix)?;
    }
    emit(&cmd.output, &sweep_to_csv(&grid)?, || matrix.clone())
}

pub fn breakdown(cmd: &BreakdownCmd) -> anyhow::Result<()> {
    let precision = gqa_core::cost::Precision::new(cmd.precision_bytes)?;
    let mode = cmd.counting.ffn_mode;
    let explicit_heads = match cmd.heads {
        Some(h) => Some(AttentionHeads::new(h, cmd.kv_heads.unwrap_or(h))?),
        None => None,
    };
    let (flops, memory) = if cmd.sizes.is_empty() {
        let (Some(layers), Some(hidden), Some(heads)) = (cmd.layers, cmd.hidden, explicit_heads) else {
            bail!("pass --layers, --hidden and --heads, or --sizes");
        };
        let shape = gqa_core::config::ModelShape::concrete(layers, hidden, cmd.counting.head_dim, cmd.counting.vocab)?;
        breakdown_series(&shape, heads, &cmd.contexts, mode, precision)?
    } else {
        let family = cmd.family.load()?;
        let resolver = ShapeResolver::new(&family, mode, cmd.size_field, cmd.counting.head_dim, cmd.counting.vocab)?;
        let rule = explicit_heads.map_or(HeadsRule::Mha, HeadsRule::Fixed);
        let mut sizes = cmd.sizes.clone();
        sizes.sort_by(f64::total_cmp);
        sizes.dedup();
        let points = sizes
            .iter()
            .map(|&n| {
                let r = resolver.resolve(n, &rule)?;
                let shape = nearest_concrete_config(&r.shape, AttentionHeads::mha(1)?)?;
                let heads = match explicit_heads {
                    Some(h) => h,
                    None => AttentionHeads::mha((shape.hidden_size as u32 / cmd.counting.head_dim).max(1))?,
                };
                Ok((n, component_breakdown(&shape, heads, cmd.ctx, mode, precision)?))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        breakdown_documents("n_params", &points)?
    };
    if let Some(dir) = &cmd.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("flops.json"), &flops.to_json()?)?;
        write_file(&dir.join("memory.json"), &memory.to_json()?)?;
    }
    match cmd.format {
        Format::Machine => print!("{}", json(&serde_json::json!({ "flops": flops, "memory": memory }))?),
        Format::Table => {
            print!("{}", series_table(&memory));
            println!();
            print!("{}", series_table(&flops));
        }
    }
    Ok(())
}

fn series_table(doc: &SeriesDocument) -> String {
    let mut headers = vec![doc.x_label.as_str()];
    headers.extend(doc.series.iter().map(|s| s.label.as_str()));
    let n = doc.series.first().map_or(0, |s| s.x.len());
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            std::iter::once(fmt_sig(doc.series[0].x[i])).chain(doc.series.iter().map(|s| fmt_sig(s.y[i]))).collect()
        })
        .collect();
    format!("{}\n{}", doc.title, render_table(&headers, &rows))
}

pub fn align(cmd: &AlignCmd) -> anyhow::Result<()> {
    let text = fs::read_to_string(&cmd.configs).with_context(|| format!("reading {}", cmd.configs.display()))?;
    let configs = parse_budget_configs(&text, &cmd.configs)?;
    let budget = match (&cmd.budget, &cmd.chinchilla) {
        (Some(b), _) => *b,
        (None, Some(label)) => {
            let c = configs
                .iter()
                .find(|c| &c.label == label)
                .with_context(|| format!("no configuration labelled {label:?}"))?;
            let n = count_params(&c.shape, c.heads, cmd.ffn_mode)?.get(cmd.size_field) as f64;
            training_cost(n, &c.shape, c.heads, 20.0 * n, cmd.train_ctx)?.flops
        }
        (None, None) => bail!("pass --budget or --chinchilla"),
    };
    let rows = aligned_budget_report(&configs, budget, cmd.train_ctx, cmd.ffn_mode, cmd.size_field)?;
    emit(&cmd.output, &budget_rows_to_csv(&rows)?, || {
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.heads.to_string(),
                    fmt_sig(r.n_params),
                    fmt_sig(r.train_tokens),
                    fmt_sig(r.ratio_to_chinchilla),
                ]
            })
            .collect();
        format!(
            "budget {} FLOPs at T_train={}\n{}",
            fmt_sig(budget),
            cmd.train_ctx,
            render_table(&["config", "heads", "N", "tokens", "tokens / 20N"], &table)
        )
    })
}
