//! Synthetic curve families for demonstrations and tests.
//!
//! Every candidate shares the exponent `b` and the asymptote `E`; only the
//! scale differs, `a_H = a_ref · (n_h,ref / n_h)^p · (n_kv,ref / n_kv)^q`, so
//! configurations with fewer heads need more parameters for the same loss.

use serde::{Deserialize, Serialize};

use crate::config::{
    candidate_set, count_params, nearest_concrete_config, AttentionHeads, FfnCountingMode, ModelShape, SizeField,
    DEFAULT_HEAD_DIM, DEFAULT_VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::family::{FamilyTable, HeadsRule, ShapeResolver};
use crate::fit::{predict_loss, HeadAxis, HeadLawCurve, LossRecord, ScalingCurve};
use crate::io::{records_to_csv, ShapedRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamily {
    pub reference: AttentionHeads,
    pub reference_a: f64,
    pub b: f64,
    pub e: f64,
    pub query_exponent: f64,
    pub kv_exponent: f64,
    pub size_field: SizeField,
    pub context_length: u64,
    pub fit_domain: (f64, f64),
}

/// Reference loss of the 32-query, 8-KV configuration at 1.2B non-embedding
/// parameters.
pub const CALIBRATION_LOSS: f64 = 2.615;
pub const CALIBRATION_SIZE: f64 = 1.2e9;

impl SyntheticFamily {
    /// A family whose (32, 8) curve passes through loss 2.615 at 1.2B
    /// non-embedding parameters.
    pub fn calibrated() -> Self {
        let (b, e) = (0.3, 1.8);
        Self::through(
            AttentionHeads::new(32, 8).expect("valid heads"),
            CALIBRATION_SIZE,
            CALIBRATION_LOSS,
            b,
            e,
            0.2,
            0.1,
        )
        .expect("valid calibration")
    }

    /// Family whose reference curve passes through `(size, loss)`.
    pub fn through(
        reference: AttentionHeads,
        size: f64,
        loss: f64,
        b: f64,
        e: f64,
        query_exponent: f64,
        kv_exponent: f64,
    ) -> Result<Self> {
        if !(loss > e) || !(size > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidArgument(format!("cannot calibrate through ({size}, {loss}) with E = {e}")));
        }
        let reference_a = size * (loss - e).powf(1.0 / b);
        Ok(Self {
            reference,
            reference_a,
            b,
            e,
            query_exponent,
            kv_exponent,
            size_field: SizeField::NonEmbedding,
            context_length: 8192,
            fit_domain: (1e7, 1.2e9),
        })
    }

    pub fn a_for(&self, heads: AttentionHeads) -> f64 {
        let q = f64::from(self.reference.n_h()) / f64::from(heads.n_h());
        let kv = f64::from(self.reference.n_kv()) / f64::from(heads.n_kv());
        self.reference_a * q.powf(self.query_exponent) * kv.powf(self.kv_exponent)
    }

    pub fn curve(&self, heads: AttentionHeads) -> Result<ScalingCurve> {
        ScalingCurve::new(
            heads,
            self.a_for(heads),
            self.b,
            self.e,
            self.size_field,
            self.context_length,
            self.fit_domain,
        )
    }

    pub fn curves(&self, candidates: &[AttentionHeads]) -> Result<Vec<ScalingCurve>> {
        candidates.iter().map(|&h| self.curve(h)).collect()
    }

    /// Noiseless loss records for concrete models of roughly the given sizes.
    /// Each size is resolved through `family` and rounded to a concrete shape;
    /// the loss is evaluated at that shape's exact parameter count.
    /// `train_tokens` maps the non-embedding count to a training budget.
    pub fn records(
        &self,
        heads: AttentionHeads,
        sizes: &[f64],
        family: &FamilyTable,
        mode: FfnCountingMode,
        train_tokens: &dyn Fn(f64) -> f64,
    ) -> Result<Vec<ShapedRecord>> {
        let resolver = ShapeResolver::new(family, mode, self.size_field, DEFAULT_HEAD_DIM, DEFAULT_VOCAB_SIZE)?;
        let curve = self.curve(heads)?;
        sizes
            .iter()
            .map(|&n| {
                let resolved = resolver.resolve(n, &HeadsRule::Fixed(heads))?;
                let shape = nearest_concrete_config(&resolved.shape, heads)?;
                let counts = count_params(&shape, heads, mode)?;
                let record = LossRecord {
                    model_id: format!("h{}-kv{}-l{}-d{}", heads.n_h(), heads.n_kv(), shape.n_layers, shape.hidden_size),
                    heads,
                    n_params_non_embedding: counts.non_embedding as f64,
                    n_params_total: counts.total as f64,
                    context_length: self.context_length,
                    train_tokens: train_tokens(counts.non_embedding as f64),
                    loss: predict_loss(&curve, counts.get(self.size_field) as f64),
                };
                Ok(ShapedRecord { record, shape: Some(shape) })
            })
            .collect()
    }
}

/// Multi-head records for a fixed shape with losses following `law`, so
/// query and KV head counts both equal the varied value.
pub fn head_law_records(
    law: &HeadLawCurve,
    shape: &ModelShape,
    head_counts: &[u32],
    context_length: u64,
    train_tokens: f64,
    mode: FfnCountingMode,
) -> Result<Vec<ShapedRecord>> {
    head_counts
        .iter()
        .map(|&n| {
            let heads = AttentionHeads::mha(n)?;
            let counts = count_params(shape, heads, mode)?;
            Ok(ShapedRecord {
                record: LossRecord {
                    model_id: format!("h{n}-t{context_length}"),
                    heads,
                    n_params_non_embedding: counts.non_embedding as f64,
                    n_params_total: counts.total as f64,
                    context_length,
                    train_tokens,
                    loss: law.predict(f64::from(n)),
                },
                shape: Some(*shape),
            })
        })
        .collect()
}

/// Log-spaced sizes from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count.max(2) - 1) as f64).exp()).collect()
}

/// Demonstration inputs for the command-line tool, as `(file name, contents)`:
/// loss records for every candidate of the calibrated family, head-count law
/// records, the default family table and a budget-alignment table.
pub fn demo_files() -> Result<Vec<(&'static str, String)>> {
    let family = FamilyTable::default();
    let mode = FfnCountingMode::Table2;
    let synthetic = SyntheticFamily::calibrated();
    let sizes = log_spaced(2e7, 1.2e9, 6);
    let mut records = Vec::new();
    for heads in candidate_set(1536, DEFAULT_HEAD_DIM)? {
        records.extend(synthetic.records(heads, &sizes, &family, mode, &|_| 2e10)?);
    }

    let shape_470m = ModelShape::concrete(24, 1280, DEFAULT_HEAD_DIM, DEFAULT_VOCAB_SIZE)?;
    let law = HeadLawCurve { a: 0.579, b: -0.124, c: 2.473, axis: HeadAxis::QueryHeads };
    let head_counts = [1, 2, 4, 8, 16, 20];
    let head_law = head_law_records(&law, &shape_470m, &head_counts, 8192, 1e10, mode)?;

    let mut context_laws = Vec::new();
    for (a, b, t) in [(1.513, -0.039, 1024), (1.436, -0.041, 2048), (1.356, -0.044, 8192)] {
        let law = HeadLawCurve { a, b, c: 1.53, axis: HeadAxis::QueryHeads };
        context_laws.extend(head_law_records(&law, &shape_470m, &head_counts, t, 1e10, mode)?);
    }

    let align = "\
label,n_layers,hidden_size,head_dim,vocab_size,n_heads,n_kv_heads
h16-kv4,24,1280,64,50304,16,4
h32-kv4,24,1280,64,50304,32,4
h8-kv1,36,2048,64,50304,8,1
";
    Ok(vec![
        ("records.csv", records_to_csv(&records)?),
        ("head_law_470m.csv", records_to_csv(&head_law)?),
        ("context_head_laws.csv", records_to_csv(&context_laws)?),
        ("family.txt", family.to_text()),
        ("align_configs.csv", align.to_string()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_reference_point() {
        let fam = SyntheticFamily::calibrated();
        let c = fam.curve(AttentionHeads::new(32, 8).unwrap()).unwrap();
        assert!((predict_loss(&c, CALIBRATION_SIZE) / CALIBRATION_LOSS - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fewer_heads_need_more_parameters() {
        let fam = SyntheticFamily::calibrated();
        let big = fam.a_for(AttentionHeads::new(32, 32).unwrap());
        let small = fam.a_for(AttentionHeads::new(1, 1).unwrap());
        assert!(small > big);
        for h in candidate_set(1536, 64).unwrap() {
            assert_eq!(fam.curve(h).unwrap().e, fam.e);
        }
    }

    #[test]
    fn records_lie_on_curve() {
        let fam = SyntheticFamily::calibrated();
        let heads = AttentionHeads::new(8, 2).unwrap();
        let recs = fam
            .records(heads, &[2e7, 1e8, 5e8], &FamilyTable::default(), FfnCountingMode::Table2, &|n| 20.0 * n)
            .unwrap();
        let c = fam.curve(heads).unwrap();
        for ShapedRecord { record: r, shape } in &recs {
            assert!(shape.unwrap().is_concrete());
            assert_eq!(r.loss, predict_loss(&c, r.n_params_non_embedding));
            assert_eq!(r.train_tokens, 20.0 * r.n_params_non_embedding);
        }
    }
}
