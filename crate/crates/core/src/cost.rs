//! Per-token inference costs, training costs and the hardware-aware scalar cost.
//!
//! Memory is counted in stored values; [`Precision`] converts to bytes.
//! Every formula accepts fractional shapes.

use serde::{Deserialize, Serialize};

use crate::config::{count_params, AttentionHeads, FfnCountingMode, ModelShape};
use crate::error::{Error, Result};

/// Inference cost of processing one token after `context_length` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceCost {
    /// `2N`
    pub flops_invariant: f64,
    /// `4·T·L·d_h·n_h`
    pub flops_variant: f64,
    /// `N`
    pub mem_invariant: f64,
    /// `2·T·L·d_h·n_kv` (KV cache)
    pub mem_variant: f64,
    pub context_length: u64,
}

impl InferenceCost {
    pub fn flops_total(&self) -> f64 {
        self.flops_invariant + self.flops_variant
    }

    pub fn mem_total(&self) -> f64 {
        self.mem_invariant + self.mem_variant
    }
}

pub fn inference_cost(n_params: f64, shape: &ModelShape, heads: AttentionHeads, context_length: u64) -> InferenceCost {
    inference_cost_with_heads(n_params, shape, f64::from(heads.n_h()), f64::from(heads.n_kv()), context_length)
}

/// As [`inference_cost`] with real-valued head counts.
pub fn inference_cost_with_heads(
    n_params: f64,
    shape: &ModelShape,
    n_h: f64,
    n_kv: f64,
    context_length: u64,
) -> InferenceCost {
    let t = context_length as f64;
    let per_token_layer = t * shape.n_layers * f64::from(shape.head_dim);
    InferenceCost {
        flops_invariant: 2.0 * n_params,
        flops_variant: 4.0 * per_token_layer * n_h,
        mem_invariant: n_params,
        mem_variant: 2.0 * per_token_layer * n_kv,
        context_length,
    }
}

/// Weights of the hardware-aware cost `Z = λ·M^α + (1−λ)·C^β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareCostParams {
    lambda: f64,
    alpha: f64,
    beta: f64,
}

impl Default for HardwareCostParams {
    fn default() -> Self {
        Self { lambda: 0.9, alpha: 0.5, beta: 1.0 / 3.0 }
    }
}

impl HardwareCostParams {
    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and positive, got {v}")));
            }
        }
        Ok(Self { lambda, alpha, beta })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub fn hardware_cost(cost: &InferenceCost, params: &HardwareCostParams) -> Result<f64> {
    let (m, c) = (cost.mem_total(), cost.flops_total());
    if !(m > 0.0 && c > 0.0) {
        return Err(Error::InvalidArgument(format!("cost totals must be positive (memory {m}, flops {c})")));
    }
    // skip the zero-weighted term so that λ ∈ {0, 1} returns the other term exactly
    let mem_term = if params.lambda == 0.0 { 0.0 } else { params.lambda * m.powf(params.alpha) };
    let flop_term = if params.lambda == 1.0 { 0.0 } else { (1.0 - params.lambda) * c.powf(params.beta) };
    let z = mem_term + flop_term;
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::NonFinite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingCost {
    pub flops: f64,
    /// Values held during training: weights, gradients, two optimizer moments
    /// and activations.
    pub memory: f64,
    pub train_tokens: f64,
    pub mean_context: f64,
}

fn attention_training_term(shape: &ModelShape, heads: AttentionHeads, train_context: u64) -> f64 {
    // 2·L·T̄·d_h·n_h with T̄ = T/2
    shape.n_layers * train_context as f64 * f64::from(shape.head_dim) * f64::from(heads.n_h())
}

pub fn training_cost(
    n_params: f64,
    shape: &ModelShape,
    heads: AttentionHeads,
    train_tokens: f64,
    train_context: u64,
) -> Result<TrainingCost> {
    if !(train_tokens.is_finite() && train_tokens > 0.0) {
        return Err(Error::InvalidArgument(format!("train_tokens must be positive, got {train_tokens}")));
    }
    if train_context == 0 {
        return Err(Error::InvalidArgument("train_context must be positive".into()));
    }
    let inner = n_params + attention_training_term(shape, heads, train_context);
    Ok(TrainingCost {
        flops: (6.0 * train_tokens) * inner,
        memory: 4.0 * n_params + train_context as f64 * shape.hidden_size * shape.n_layers,
        train_tokens,
        mean_context: train_context as f64 / 2.0,
    })
}

/// Training tokens affordable under a FLOPs budget; the inverse of
/// [`training_cost`] on its `flops` field. Fractional tokens are returned as is.
pub fn tokens_under_budget(
    flops_budget: f64,
    n_params: f64,
    shape: &ModelShape,
    heads: AttentionHeads,
    train_context: u64,
) -> Result<f64> {
    if !(flops_budget.is_finite() && flops_budget > 0.0) {
        return Err(Error::InvalidArgument(format!("flops budget must be positive, got {flops_budget}")));
    }
    if train_context == 0 {
        return Err(Error::InvalidArgument("train_context must be positive".into()));
    }
    let inner = n_params + attention_training_term(shape, heads, train_context);
    Ok(flops_budget / (6.0 * inner))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    bytes_per_value: f64,
}

impl Default for Precision {
    fn default() -> Self {
        Self { bytes_per_value: 2.0 }
    }
}

impl Precision {
    pub fn new(bytes_per_value: f64) -> Result<Self> {
        if bytes_per_value.is_finite() && bytes_per_value > 0.0 {
            Ok(Self { bytes_per_value })
        } else {
            Err(Error::InvalidArgument(format!("bytes per value must be positive, got {bytes_per_value}")))
        }
    }

    pub fn bytes_per_value(&self) -> f64 {
        self.bytes_per_value
    }

    pub fn bytes(&self, values: f64) -> f64 {
        values * self.bytes_per_value
    }
}

/// A cost component and its share of the category total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub value: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub input_embedding: Share,
    pub attention_projections: Share,
    pub attention_computation: Share,
    pub ffn: Share,
    pub output_embedding: Share,
    pub total: f64,
}

impl FlopsBreakdown {
    pub fn shares(&self) -> [(&'static str, Share); 5] {
        [
            ("input_embedding", self.input_embedding),
            ("attention_projections", self.attention_projections),
            ("attention_computation", self.attention_computation),
            ("ffn", self.ffn),
            ("output_embedding", self.output_embedding),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub parameters: Share,
    pub kv_cache: Share,
    /// Total in values.
    pub total: f64,
    pub total_bytes: f64,
    pub parameter_bytes: f64,
    pub kv_cache_bytes: f64,
}

impl MemoryBreakdown {
    pub fn shares(&self) -> [(&'static str, Share); 2] {
        [("parameters", self.parameters), ("kv_cache", self.kv_cache)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub context_length: u64,
    pub flops: FlopsBreakdown,
    pub memory: MemoryBreakdown,
}

fn shares<const K: usize>(values: [f64; K]) -> ([Share; K], f64) {
    let total: f64 = values.iter().sum();
    let out = values.map(|value| Share { value, fraction: if total > 0.0 { value / total } else { 0.0 } });
    (out, total)
}

/// Per-component forward FLOPs and inference memory of a concrete
/// configuration.
pub fn component_breakdown(
    shape: &ModelShape,
    heads: AttentionHeads,
    context_length: u64,
    mode: FfnCountingMode,
    precision: Precision,
) -> Result<CostBreakdown> {
    let params = count_params(shape, heads, mode)?;
    let l = shape.n_layers;
    let d = shape.hidden_size;
    let d_h = f64::from(shape.head_dim);
    let t = context_length as f64;
    let (n_h, n_kv) = (f64::from(heads.n_h()), f64::from(heads.n_kv()));

    let ([input_embedding, attention_projections, attention_computation, ffn, output_embedding], flops_total) =
        shares([
            0.0,
            4.0 * l * d * d_h * (n_h + n_kv),
            4.0 * l * t * n_h * d_h,
            2.0 * mode.matrices() as f64 * l * d * shape.ffn_size,
            2.0 * d * f64::from(shape.vocab_size),
        ]);
    let kv = 2.0 * t * l * d_h * n_kv;
    let ([parameters, kv_cache], mem_total) = shares([params.total as f64, kv]);

    Ok(CostBreakdown {
        context_length,
        flops: FlopsBreakdown {
            input_embedding,
            attention_projections,
            attention_computation,
            ffn,
            output_embedding,
            total: flops_total,
        },
        memory: MemoryBreakdown {
            parameters,
            kv_cache,
            total: mem_total,
            total_bytes: precision.bytes(mem_total),
            parameter_bytes: precision.bytes(parameters.value),
            kv_cache_bytes: precision.bytes(kv),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DEFAULT_VOCAB_SIZE;

    fn shape(l: u32, d: u32) -> ModelShape {
        ModelShape::concrete(l, d, 64, DEFAULT_VOCAB_SIZE).unwrap()
    }

    #[test]
    fn inference_cost_examples() {
        let s = shape(36, 1536);
        let c = inference_cost(1.2e9, &s, AttentionHeads::new(24, 8).unwrap(), 131_072);
        assert_eq!(c.flops_variant, 28_991_029_248.0);
        assert_eq!(c.flops_total(), 31_391_029_248.0);
        assert_eq!(c.mem_variant, 4_831_838_208.0);
        assert_eq!(c.mem_total(), 6_031_838_208.0);

        let c = inference_cost(1.2e9, &s, AttentionHeads::new(24, 8).unwrap(), 8192);
        assert_eq!(c.flops_variant, 1_811_939_328.0);

        let c = inference_cost(1.2e9, &s, AttentionHeads::new(24, 8).unwrap(), 0);
        assert_eq!((c.flops_variant, c.mem_variant), (0.0, 0.0));
        assert_eq!((c.flops_total(), c.mem_total()), (2.4e9, 1.2e9));
    }

    #[test]
    fn variant_terms_are_separable() {
        let s = shape(24, 1280);
        let a = inference_cost(5e8, &s, AttentionHeads::new(16, 1).unwrap(), 32768);
        let b = inference_cost(5e8, &s, AttentionHeads::new(16, 16).unwrap(), 32768);
        let c = inference_cost(5e8, &s, AttentionHeads::new(2, 1).unwrap(), 32768);
        assert_eq!(a.flops_variant, b.flops_variant);
        assert_eq!(a.mem_variant, c.mem_variant);
    }

    #[test]
    fn hardware_cost_examples() {
        let cost = InferenceCost {
            flops_invariant: 2.4e9,
            flops_variant: 28_991_029_248.0,
            mem_invariant: 1.2e9,
            mem_variant: 4_831_838_208.0,
            context_length: 131_072,
        };
        // 0.9·sqrt(6031838208) + 0.1·cbrt(31391029248), evaluated with mpmath at 50 digits
        let z = hardware_cost(&cost, &HardwareCostParams::default()).unwrap();
        assert!((z / 70_213.872_163_883_62 - 1.0).abs() < 1e-12, "{z}");
        assert!((z / 70_214.5 - 1.0).abs() < 1e-3);

        let mem_only = HardwareCostParams::new(1.0, 1.0, 0.5).unwrap();
        assert_eq!(hardware_cost(&cost, &mem_only).unwrap(), cost.mem_total());
        let flops_only = HardwareCostParams::new(0.0, 0.5, 1.0).unwrap();
        assert_eq!(hardware_cost(&cost, &flops_only).unwrap(), cost.flops_total());
    }

    #[test]
    fn hardware_params_validation() {
        assert!(HardwareCostParams::new(1.1, 0.5, 0.5).is_err());
        assert!(HardwareCostParams::new(-0.1, 0.5, 0.5).is_err());
        assert!(HardwareCostParams::new(0.5, 0.0, 0.5).is_err());
        assert!(HardwareCostParams::new(0.5, 0.5, f64::INFINITY).is_err());
        let zero = InferenceCost {
            flops_invariant: 0.0,
            flops_variant: 0.0,
            mem_invariant: 0.0,
            mem_variant: 0.0,
            context_length: 0,
        };
        assert!(hardware_cost(&zero, &HardwareCostParams::default()).is_err());
        let huge = InferenceCost {
            flops_invariant: 1e300,
            flops_variant: 0.0,
            mem_invariant: 1e300,
            mem_variant: 0.0,
            context_length: 0,
        };
        assert!(matches!(
            hardware_cost(&huge, &HardwareCostParams::new(0.5, 2.0, 2.0).unwrap()),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn training_cost_examples() {
        let s = ModelShape {
            n_layers: 12.0,
            hidden_size: 1024.0,
            ffn_size: 2720.0,
            head_dim: 64,
            vocab_size: DEFAULT_VOCAB_SIZE,
        };
        let heads = AttentionHeads::mha(16).unwrap();
        let t = training_cost(1e8, &s, heads, 2e9, 8192).unwrap();
        assert!((t.flops / 2.40796e18 - 1.0).abs() < 1e-6);
        assert_eq!(t.flops, 6.0 * 2e9 * (1e8 + 100_663_296.0));
        assert_eq!(t.memory, 500_663_296.0);
        assert_eq!(t.mean_context, 4096.0);
        assert!(training_cost(1e8, &s, heads, 0.0, 8192).is_err());
        assert!(training_cost(1e8, &s, heads, 2e9, 0).is_err());

        let d = tokens_under_budget(t.flops, 1e8, &s, heads, 8192).unwrap();
        assert!((d / 2e9 - 1.0).abs() < 1e-9);
        let d2 = tokens_under_budget(2.0 * t.flops, 1e8, &s, heads, 8192).unwrap();
        assert!((d2 / (2.0 * d) - 1.0).abs() < 1e-15);
        let tiny = tokens_under_budget(6.0 * 1e8, 1e8, &s, heads, 8192).unwrap();
        assert!(tiny < 1.0 && tiny > 0.0);
        assert!(tokens_under_budget(0.0, 1e8, &s, heads, 8192).is_err());
    }

    #[test]
    fn training_is_three_forward_passes_at_mean_context() {
        let s = shape(24, 1280);
        let heads = AttentionHeads::new(20, 4).unwrap();
        let n = 4.7e8;
        let t = training_cost(n, &s, heads, 1e10, 4096).unwrap();
        let infer = inference_cost(n, &s, heads, 2048);
        assert!((t.flops / (3.0 * 1e10 * infer.flops_total()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_kv_fraction_at_128k() {
        let s = shape(36, 1536);
        let b = component_breakdown(
            &s,
            AttentionHeads::mha(24).unwrap(),
            131_072,
            FfnCountingMode::Table2,
            Precision::default(),
        )
        .unwrap();
        assert_eq!(b.memory.kv_cache.value, 14_495_514_624.0);
        assert!((0.88..=0.95).contains(&b.memory.kv_cache.fraction), "{}", b.memory.kv_cache.fraction);
        assert_eq!(b.memory.kv_cache_bytes, 2.0 * 14_495_514_624.0);

        let b0 =
            component_breakdown(&s, AttentionHeads::mha(24).unwrap(), 0, FfnCountingMode::Gated, Precision::default())
                .unwrap();
        assert_eq!(b0.memory.kv_cache.fraction, 0.0);
        assert_eq!(b0.memory.parameters.fraction, 1.0);
        assert_eq!(b0.flops.attention_computation.value, 0.0);
        assert_eq!(b0.flops.input_embedding.value, 0.0);
    }
}
