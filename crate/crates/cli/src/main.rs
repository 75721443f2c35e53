use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gqa_core::config::{AttentionHeads, FfnCountingMode, ModelShape, SizeField, DEFAULT_HEAD_DIM, DEFAULT_VOCAB_SIZE};
use gqa_core::cost::{HardwareCostParams, Precision};
use gqa_core::family::FamilyTable;
use gqa_core::fit::{HeadAxis, DEFAULT_REFERENCE_CONTEXT};
use gqa_core::optimize::Objective;

mod commands;

pub const SWEEP_LOSSES: [f64; 8] = [3.0, 2.9, 2.8, 2.7, 2.6, 2.5, 2.4, 2.35];
pub const SWEEP_CONTEXTS: [u64; 5] = [8192, 16384, 32768, 65536, 131072];

/// Cost-optimal grouped-query attention configurations.
#[derive(Debug, Parser)]
#[command(name = "gqa-opt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-token inference FLOPs, memory and hardware cost of one configuration.
    Cost(CostCmd),
    /// Fit scaling curves to measured losses.
    Fit(FitCmd),
    /// Pick the cheapest head configuration reaching a target loss.
    Optimize(OptimizeCmd),
    /// Optimize over a grid of target losses and context lengths.
    Sweep(SweepCmd),
    /// Component fractions of FLOPs and memory over context length or size.
    Breakdown(BreakdownCmd),
    /// Training tokens per configuration under a shared FLOPs budget.
    Align(AlignCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Table,
    Machine,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output format for stdout.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write the machine-readable result to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostWeights {
    /// Weight of the memory term in Z.
    #[arg(long, default_value_t = 0.9)]
    pub lambda: f64,
    /// Exponent of the memory term.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Exponent of the FLOPs term.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub beta: f64,
}

impl CostWeights {
    pub fn params(&self) -> anyhow::Result<HardwareCostParams> {
        Ok(HardwareCostParams::new(self.lambda, self.alpha, self.beta)?)
    }
}

#[derive(Debug, Args)]
pub struct Counting {
    /// How many FFN matrices each layer has: table2 (2) or gated (3).
    #[arg(long, default_value = "table2")]
    pub ffn_mode: FfnCountingMode,
    #[arg(long, default_value_t = DEFAULT_HEAD_DIM)]
    pub head_dim: u32,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab: u32,
}

#[derive(Debug, Args)]
pub struct FamilyArg {
    /// Anchor table for size-to-shape resolution; built-in table when unset.
    #[arg(long, env = "GQA_FAMILY_TABLE")]
    pub family: Option<PathBuf>,
}

impl FamilyArg {
    pub fn load(&self) -> anyhow::Result<FamilyTable> {
        Ok(match &self.family {
            Some(p) => FamilyTable::load(p)?,
            None => FamilyTable::default(),
        })
    }
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    #[arg(long)]
    pub layers: u32,
    #[arg(long)]
    pub hidden: u32,
    /// Query heads.
    #[arg(long)]
    pub heads: u32,
    /// Key/value heads; defaults to --heads.
    #[arg(long)]
    pub kv_heads: Option<u32>,
}

impl ShapeArgs {
    pub fn heads(&self) -> anyhow::Result<AttentionHeads> {
        Ok(AttentionHeads::new(self.heads, self.kv_heads.unwrap_or(self.heads))?)
    }

    pub fn shape(&self, counting: &Counting) -> anyhow::Result<ModelShape> {
        Ok(ModelShape::concrete(self.layers, self.hidden, counting.head_dim, counting.vocab)?)
    }
}

#[derive(Debug, Args)]
pub struct CostCmd {
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Context length T.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_CONTEXT)]
    pub ctx: u64,
    /// Parameter total entering the cost formulas.
    #[arg(long, default_value = "total")]
    pub size_field: SizeField,
    /// Use this parameter count in the cost formulas instead of the one
    /// counted from the shape, e.g. a nominal model size.
    #[arg(long)]
    pub n_params: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub precision_bytes: f64,
    #[command(flatten)]
    pub counting: Counting,
    #[command(flatten)]
    pub weights: CostWeights,
    #[command(flatten)]
    pub output: Output,
}

impl CostCmd {
    pub fn precision(&self) -> anyhow::Result<Precision> {
        Ok(Precision::new(self.precision_bytes)?)
    }
}

#[derive(Debug, Args)]
pub struct FitCmd {
    /// Loss records table.
    #[arg(long)]
    pub records: PathBuf,
    /// Size measure the curves are fitted against.
    #[arg(long, default_value = "nonemb")]
    pub size_field: SizeField,
    /// Accept groups whose records differ in training tokens because they
    /// follow a fixed tokens-per-parameter rule.
    #[arg(long)]
    pub chinchilla: bool,
    /// Fit loss against head count along this axis instead of against size,
    /// one curve per context length.
    #[arg(long)]
    pub axis: Option<HeadAxis>,
    /// With --axis, force one asymptote shared by all context lengths.
    #[arg(long, requires = "axis")]
    pub shared_constant: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Curve document produced by `fit`.
    #[arg(long)]
    pub curves: PathBuf,
    /// Use the curves fitted at this context length.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_CONTEXT)]
    pub ref_ctx: u64,
    /// Quantity minimized: z, memory or flops.
    #[arg(long, default_value = "z")]
    pub objective: Objective,
    /// Parameter total entering the cost formulas.
    #[arg(long, default_value = "total")]
    pub size_field: SizeField,
    #[command(flatten)]
    pub family: FamilyArg,
    #[command(flatten)]
    pub counting: Counting,
    #[command(flatten)]
    pub weights: CostWeights,
}

#[derive(Debug, Args)]
pub struct OptimizeCmd {
    #[command(flatten)]
    pub search: SearchArgs,
    /// Target loss L*.
    #[arg(long)]
    pub target_loss: f64,
    /// Inference context length T.
    #[arg(long)]
    pub ctx: u64,
    /// Also run the exhaustive grid search and fail if it disagrees.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub search: SearchArgs,
    /// Target losses (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LOSSES)]
    pub losses: Vec<f64>,
    /// Context lengths (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_CONTEXTS)]
    pub contexts: Vec<u64>,
    /// Write the human-readable matrix here.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct BreakdownCmd {
    /// Fixed shape to sweep over context lengths.
    #[arg(long, requires_all = ["hidden", "heads"], conflicts_with = "sizes")]
    pub layers: Option<u32>,
    #[arg(long)]
    pub hidden: Option<u32>,
    #[arg(long)]
    pub heads: Option<u32>,
    #[arg(long)]
    pub kv_heads: Option<u32>,
    /// Context lengths (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = (10..=19).map(|k| 1u64 << k).collect::<Vec<_>>())]
    pub contexts: Vec<u64>,
    /// Sweep model sizes instead, resolving each through the family table.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<f64>,
    /// Context length used with --sizes.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_CONTEXT)]
    pub ctx: u64,
    /// Size measure of --sizes.
    #[arg(long, default_value = "total")]
    pub size_field: SizeField,
    #[arg(long, default_value_t = 2.0)]
    pub precision_bytes: f64,
    #[command(flatten)]
    pub family: FamilyArg,
    #[command(flatten)]
    pub counting: Counting,
    /// Write flops.json and memory.json into this directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct AlignCmd {
    /// Table of configurations (label, n_layers, hidden_size, head_dim,
    /// vocab_size, n_heads, n_kv_heads).
    #[arg(long)]
    pub configs: PathBuf,
    /// Training FLOPs budget.
    #[arg(long, required_unless_present = "chinchilla", conflicts_with = "chinchilla")]
    pub budget: Option<f64>,
    /// Use the Chinchilla-rule budget (20 tokens per parameter) of the
    /// configuration with this label.
    #[arg(long)]
    pub chinchilla: Option<String>,
    /// Training context length.
    #[arg(long)]
    pub train_ctx: u64,
    #[arg(long, default_value = "total")]
    pub size_field: SizeField,
    #[arg(long, default_value = "table2")]
    pub ffn_mode: FfnCountingMode,
    #[command(flatten)]
    pub output: Output,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Cost(c) => commands::cost(c),
        Command::Fit(c) => commands::fit(c),
        Command::Optimize(c) => commands::optimize(c),
        Command::Sweep(c) => commands::sweep(c),
        Command::Breakdown(c) => commands::breakdown(c),
        Command::Align(c) => commands::align(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
