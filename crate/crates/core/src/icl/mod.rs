//! Dual form of in-context learning with linear attention.
//!
//! With keys and values projected from a column set X and a frozen query q,
//! linear attention factors as
//!
//! ```text
//! F(q) = W_V X (W_K X)^T q = (W_ZSL + dW) q
//! W_ZSL = W_V X_zsl (W_K X_zsl)^T      dW = W_V X_demo (W_K X_demo)^T
//! ```
//!
//! so demonstrations act as a rank-limited weight update applied to the
//! zero-shot weight. This module implements both routes, the three-subtask
//! composition, the meta-gradient feature extraction, and a small boosted
//! tree ensemble whose split counts provide the importance readout.

mod gbdt;

pub use gbdt::{
    split_56_14_30, train_tree_ensemble, GbdtParams, ImportanceTable, MetaTrainOutcome,
    SplitAssignment, Tree, TreeEnsembleModel, TreeNode,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::InteractionKind;
use crate::data::MemeSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{self, Tensor};

/// One linear-attention evaluation: projections, zero-shot context columns,
/// demonstration columns, and the frozen query.
#[derive(Debug, Clone)]
pub struct LinearAttentionTask {
    pub w_key: Tensor,
    pub w_value: Tensor,
    /// `[d, n_zsl]` zero-shot context, one column per token.
    pub zero_shot: Tensor,
    /// `[d, n_demo]` demonstration columns; zero columns are allowed.
    pub demonstrations: Tensor,
    pub query: Vec<f64>,
}

impl LinearAttentionTask {
    pub fn validate(&self) -> Result<()> {
        let d = self.query.len();
        let ok = |t: &Tensor| t.is_2d() && t.rows() == d && t.cols() == d;
        if !ok(&self.w_key) || !ok(&self.w_value) {
            return Err(Error::ShapeMismatch {
                op: "linear_attention_task",
                left: self.w_key.shape().to_vec(),
                right: vec![d, d],
            });
        }
        for t in [&self.zero_shot, &self.demonstrations] {
            if !t.is_2d() || t.rows() != d {
                return Err(Error::ShapeMismatch {
                    op: "linear_attention_task",
                    left: t.shape().to_vec(),
                    right: vec![d, t.cols()],
                });
            }
        }
        Ok(())
    }

    /// Random task for identity sweeps.
    pub fn random(dim: usize, n_zsl: usize, n_demo: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![r, c], data).expect("shape")
        };
        LinearAttentionTask {
            w_key: mat(dim, dim),
            w_value: mat(dim, dim),
            zero_shot: mat(dim, n_zsl),
            demonstrations: mat(dim, n_demo),
            query: {
                let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
                (0..dim).map(|_| rng2.random_range(-1.0..1.0)).collect()
            },
        }
    }
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let at = tensor::transpose(a)?;
    let bt = tensor::transpose(b)?;
    let mut data = at.data().to_vec();
    data.extend_from_slice(bt.data());
    let stacked = Tensor::new(vec![at.rows() + bt.rows(), at.cols()], data)?;
    tensor::transpose(&stacked)
}

/// In-context route: attention over the concatenated `[demos; zero-shot]`
/// columns with the query held frozen. The combined weight
/// `W_V X (W_K X)^T` is materialized before the query is applied, matching
/// the dual route's association; with no demonstrations the two routes are
/// the same arithmetic.
pub fn forward_icl(task: &LinearAttentionTask) -> Result<Vec<f64>> {
    task.validate()?;
    let x = concat_cols(&task.demonstrations, &task.zero_shot)?;
    let w = weight_of(task, &x)?;
    tensor::matvec(&w, &task.query)
}

/// Zero-shot weight `W_V X_zsl (W_K X_zsl)^T`.
pub fn zsl_weight(task: &LinearAttentionTask) -> Result<Tensor> {
    weight_of(task, &task.zero_shot)
}

/// Demonstration update `dW = W_V X_demo (W_K X_demo)^T`: the sum of
/// value-key outer products over demonstrations.
pub fn delta_weight(task: &LinearAttentionTask) -> Result<Tensor> {
    weight_of(task, &task.demonstrations)
}

fn weight_of(task: &LinearAttentionTask, x: &Tensor) -> Result<Tensor> {
    let d = task.query.len();
    if x.cols() == 0 {
        return Ok(Tensor::zeros(vec![d, d]));
    }
    let values = tensor::matmul(&task.w_value, x)?;
    let keys = tensor::matmul(&task.w_key, x)?;
    tensor::matmul(&values, &tensor::transpose(&keys)?)
}

/// Dual route: `(W_ZSL + dW) q`.
pub fn forward_dual(task: &LinearAttentionTask) -> Result<Vec<f64>> {
    task.validate()?;
    let w = tensor::add(&zsl_weight(task)?, &delta_weight(task)?)?;
    tensor::matvec(&w, &task.query)
}

/// The meta in-context subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    TaskTypeClassification,
    InstructionAnalysis,
    LabelIdentification,
}

impl Subtask {
    pub const ALL: [Subtask; 3] = [
        Subtask::TaskTypeClassification,
        Subtask::InstructionAnalysis,
        Subtask::LabelIdentification,
    ];
}

/// Sum of per-subtask dual-form outputs: `sum_t (W_t + dW_t) q` over exactly
/// the three subtasks.
pub fn subtask_compose(query: &[f64], parts: &[(Tensor, Tensor)]) -> Result<Vec<f64>> {
    if parts.len() != Subtask::ALL.len() {
        return Err(Error::Contract(format!(
            "subtask composition needs exactly {} weight pairs, got {}",
            Subtask::ALL.len(),
            parts.len()
        )));
    }
    let mut out = vec![0.0; query.len()];
    for (w, dw) in parts {
        let combined = tensor::add(w, dw)?;
        let y = tensor::matvec(&combined, query)?;
        for (o, v) in out.iter_mut().zip(&y) {
            *o += v;
        }
    }
    Ok(out)
}

/// Which half of a meta-feature row a feature belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightType {
    /// First half: zero-shot attention sums.
    ZeroShot,
    /// Second half: few-shot minus zero-shot sums.
    Delta,
}

/// One classifier row: token-wise attention sums for the zero-shot pass and
/// the few-shot delta, with per-token interaction tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaFeatureRow {
    /// Length `2 * token_count`: zero-shot part then delta part.
    pub features: Vec<f64>,
    pub token_tags: Vec<InteractionKind>,
    pub subtask: Subtask,
    pub target: bool,
}

impl MetaFeatureRow {
    pub fn token_count(&self) -> usize {
        self.token_tags.len()
    }

    pub fn weight_type(&self, feature: usize) -> WeightType {
        if feature < self.token_count() {
            WeightType::ZeroShot
        } else {
            WeightType::Delta
        }
    }

    pub fn tag(&self, feature: usize) -> InteractionKind {
        self.token_tags[feature % self.token_count()]
    }

    /// Pad with zero features (tagged cross-modal) up to `token_count`
    /// tokens, so variable-length prompts can share one feature space.
    pub fn pad_to(&mut self, token_count: usize) {
        let old = self.token_count();
        assert!(token_count >= old, "cannot shrink a feature row");
        if token_count == old {
            return;
        }
        let mut features = Vec::with_capacity(2 * token_count);
        features.extend_from_slice(&self.features[..old]);
        features.resize(token_count, 0.0);
        features.extend_from_slice(&self.features[old..]);
        features.resize(2 * token_count, 0.0);
        self.features = features;
        self.token_tags.resize(token_count, InteractionKind::CrossModal);
    }
}

/// Build a feature row from zero-shot and few-shot attention matrices over
/// the same token positions: per-token column sums, zeroed at masked
/// positions, concatenated as (zero-shot, few-shot minus zero-shot). The
/// few-shot matrix may have extra rows (the demonstration positions); the
/// columns must line up token for token.
pub fn meta_features(
    zero_shot: &Tensor,
    few_shot: &Tensor,
    masked: &[bool],
    tags: &[InteractionKind],
    subtask: Subtask,
    target: bool,
) -> Result<MetaFeatureRow> {
    if !zero_shot.is_2d() || !few_shot.is_2d() || zero_shot.cols() != few_shot.cols() {
        return Err(Error::ShapeMismatch {
            op: "meta_features",
            left: zero_shot.shape().to_vec(),
            right: few_shot.shape().to_vec(),
        });
    }
    let s = zero_shot.cols();
    if masked.len() != s || tags.len() != s {
        return Err(Error::Contract(format!(
            "meta_features: {s} tokens but {} mask entries and {} tags",
            masked.len(),
            tags.len()
        )));
    }
    let col_sums = |m: &Tensor| -> Vec<f64> {
        (0..s)
            .map(|j| (0..m.rows()).map(|i| m.at(i, j)).sum())
            .collect()
    };
    let zsl = col_sums(zero_shot);
    let few = col_sums(few_shot);
    let mut features = Vec::with_capacity(2 * s);
    for j in 0..s {
        features.push(if masked[j] { 0.0 } else { zsl[j] });
    }
    for j in 0..s {
        features.push(if masked[j] { 0.0 } else { few[j] - zsl[j] });
    }
    Ok(MetaFeatureRow {
        features,
        token_tags: tags.to_vec(),
        subtask,
        target,
    })
}

/// Head-averaged last-layer attention of a forward pass.
fn mean_attention(model: &Model, sample: &MemeSample) -> Result<(Tensor, crate::model::SequenceLayout)> {
    let pass = model.forward(sample)?;
    let heads = pass.last_layer_attention();
    let s = pass.layout().total;
    let mut mean = Tensor::zeros(vec![s, s]);
    let inv = 1.0 / heads.len() as f64;
    for h in &heads {
        for (m, v) in mean.data_mut().iter_mut().zip(h.data()) {
            *m += v * inv;
        }
    }
    Ok((mean, pass.layout().clone()))
}

/// Feature row from the toy transformer: the zero-shot pass sees the query
/// sample alone, the few-shot pass sees the demonstration prepended to it
/// (text before text, regions before regions). The query's token positions
/// are compared across the two passes. Marker positions are masked; text
/// and image positions carry their span's tag, markers the cross-modal tag.
pub fn model_meta_row(
    model: &Model,
    demo: &MemeSample,
    query: &MemeSample,
    subtask: Subtask,
    target: bool,
) -> Result<MetaFeatureRow> {
    let (zsl_attn, layout) = mean_attention(model, query)?;

    let mut merged = query.clone();
    merged.tokens = demo.tokens.iter().chain(&query.tokens).copied().collect();
    merged.regions = demo.regions.iter().chain(&query.regions).cloned().collect();
    let (few_attn_full, few_layout) = mean_attention(model, &merged)?;

    // query token positions inside the merged layout
    let mut positions = Vec::with_capacity(layout.total);
    positions.push(few_layout.start_marker);
    for k in 0..query.tokens.len() {
        positions.push(few_layout.text.start + demo.tokens.len() + k);
    }
    positions.push(few_layout.separator);
    for k in 0..query.regions.len() {
        positions.push(few_layout.image.start + demo.regions.len() + k);
    }

    let s = layout.total;
    let sf = few_layout.total;
    let mut few_sub = Tensor::zeros(vec![sf, s]);
    for i in 0..sf {
        for (jj, &pj) in positions.iter().enumerate() {
            few_sub.set(i, jj, few_attn_full.at(i, pj));
        }
    }

    let masked: Vec<bool> = (0..s).map(|p| layout.is_marker(p)).collect();
    let tags: Vec<InteractionKind> = (0..s)
        .map(|p| match layout.kind(p) {
            crate::model::PositionKind::Text => InteractionKind::WithinText,
            crate::model::PositionKind::Image => InteractionKind::WithinImage,
            crate::model::PositionKind::Marker => InteractionKind::CrossModal,
        })
        .collect();
    meta_features(&zsl_attn, &few_sub, &masked, &tags, subtask, target)
}

/// Synthetic calibration rows. With `separable`, feature 0 copies the target
/// exactly and everything else is noise; otherwise all features are noise
/// and targets are coin flips.
pub fn synthetic_meta_rows(
    n: usize,
    token_count: usize,
    separable: bool,
    seed: u64,
) -> Vec<MetaFeatureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tags: Vec<InteractionKind> = (0..token_count)
        .map(|i| InteractionKind::ALL[i % 3])
        .collect();
    (0..n)
        .map(|i| {
            let target = rng.random_bool(0.5);
            let mut features: Vec<f64> =
                (0..2 * token_count).map(|_| rng.random_range(0.0..1.0)).collect();
            if separable {
                features[0] = if target { 1.0 } else { 0.0 };
            }
            MetaFeatureRow {
                features,
                token_tags: tags.clone(),
                subtask: Subtask::ALL[i % 3],
                target,
            }
        })
        .collect()
}

/// Reassign the targets by a seeded permutation, breaking any relation
/// between features and labels while preserving the class balance.
pub fn permute_targets(rows: &[MetaFeatureRow], seed: u64) -> Vec<MetaFeatureRow> {
    let mut targets: Vec<bool> = rows.iter().map(|r| r.target).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets.shuffle(&mut rng);
    rows.iter()
        .zip(targets)
        .map(|(r, target)| MetaFeatureRow {
            target,
            ..r.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn icl_without_demonstrations_reduces_to_zsl_exactly() {
        let task = LinearAttentionTask::random(6, 5, 0, 1);
        let icl = forward_icl(&task).unwrap();
        let zsl = tensor::matvec(&zsl_weight(&task).unwrap(), &task.query).unwrap();
        // same arithmetic on the same columns: bit-identical
        for (a, b) in icl.iter().zip(&zsl) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_query_gives_zero_output() {
        let mut task = LinearAttentionTask::random(5, 4, 3, 2);
        task.query = vec![0.0; 5];
        assert!(forward_icl(&task).unwrap().iter().all(|&v| v == 0.0));
        assert!(forward_dual(&task).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_identity_on_random_tasks() {
        for seed in 0..30 {
            let task = LinearAttentionTask::random(4 + (seed as usize % 5), 3, 4, seed);
            let a = forward_icl(&task).unwrap();
            let b = forward_dual(&task).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn single_demonstration_is_an_outer_product() {
        // d = 2, identity projections: dW = v k^T with k = K x, v = V x
        let task = LinearAttentionTask {
            w_key: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            w_value: Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            zero_shot: Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap(),
            demonstrations: Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap(),
            query: vec![1.0, 1.0],
        };
        // v = (6, 8), k = (3, 4); dW = [[18, 24], [24, 32]]
        let dw = delta_weight(&task).unwrap();
        assert_eq!(dw.data(), &[18.0, 24.0, 24.0, 32.0]);
        // (W_zsl + dW) q with W_zsl = 0: (42, 56)
        let out = forward_dual(&task).unwrap();
        assert_eq!(out, vec![42.0, 56.0]);
    }

    #[test]
    fn duplicating_a_demonstration_doubles_delta_w() {
        let task = LinearAttentionTask::random(4, 2, 1, 9);
        let dw = delta_weight(&task).unwrap();
        let mut doubled = task.clone();
        doubled.demonstrations = concat_cols(&task.demonstrations, &task.demonstrations).unwrap();
        let dw2 = delta_weight(&doubled).unwrap();
        for (a, b) in dw.data().iter().zip(dw2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_delta_keeps_the_zsl_output() {
        let task = LinearAttentionTask::random(4, 3, 0, 11);
        let dual = forward_dual(&task).unwrap();
        let zsl = tensor::matvec(&zsl_weight(&task).unwrap(), &task.query).unwrap();
        assert!(max_abs_diff(&dual, &zsl) == 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut task = LinearAttentionTask::random(4, 3, 2, 3);
        task.query = vec![0.0; 5];
        assert!(forward_icl(&task).is_err());
        assert!(forward_dual(&task).is_err());
    }

    #[test]
    fn compose_zero_sparse_and_sum_cases() {
        let d = 3;
        let zero = (Tensor::zeros(vec![d, d]), Tensor::zeros(vec![d, d]));
        let q = vec![1.0, 2.0, 3.0];
        let out = subtask_compose(&q, &[zero.clone(), zero.clone(), zero.clone()]).unwrap();
        assert_eq!(out, vec![0.0; 3]);

        // one nonzero subtask equals that subtask's dual output
        let task = LinearAttentionTask::random(d, 2, 2, 21);
        let part = (zsl_weight(&task).unwrap(), delta_weight(&task).unwrap());
        let out =
            subtask_compose(&task.query, &[part.clone(), zero.clone(), zero.clone()]).unwrap();
        let dual = forward_dual(&task).unwrap();
        assert!(max_abs_diff(&out, &dual) <= 1e-12);

        // three random subtasks sum exactly
        let tasks: Vec<LinearAttentionTask> =
            (0..3).map(|i| LinearAttentionTask::random(d, 2, 2, 30 + i)).collect();
        let parts: Vec<(Tensor, Tensor)> = tasks
            .iter()
            .map(|t| (zsl_weight(t).unwrap(), delta_weight(t).unwrap()))
            .collect();
        let q = tasks[0].query.clone();
        let composed = subtask_compose(&q, &parts).unwrap();
        let mut summed = vec![0.0; d];
        for p in &parts {
            let w = tensor::add(&p.0, &p.1).unwrap();
            for (s, v) in summed.iter_mut().zip(tensor::matvec(&w, &q).unwrap()) {
                *s += v;
            }
        }
        assert!(max_abs_diff(&composed, &summed) <= 1e-12);
    }

    #[test]
    fn compose_rejects_wrong_subtask_count() {
        let d = 2;
        let zero = (Tensor::zeros(vec![d, d]), Tensor::zeros(vec![d, d]));
        assert!(matches!(
            subtask_compose(&[1.0, 0.0], &[zero.clone(), zero.clone()]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn meta_features_fully_masked_is_all_zero() {
        let a = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap();
        let row = meta_features(
            &a,
            &b,
            &[true, true],
            &[InteractionKind::WithinText, InteractionKind::WithinImage],
            Subtask::TaskTypeClassification,
            false,
        )
        .unwrap();
        assert_eq!(row.features, vec![0.0; 4]);
    }

    #[test]
    fn meta_features_identical_passes_have_zero_delta() {
        let a = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let row = meta_features(
            &a,
            &a,
            &[false, false],
            &[InteractionKind::WithinText, InteractionKind::WithinText],
            Subtask::InstructionAnalysis,
            true,
        )
        .unwrap();
        assert_eq!(&row.features[2..], &[0.0, 0.0]);
        assert_eq!(&row.features[..2], &[0.75, 1.25]);
    }

    #[test]
    fn meta_features_three_token_hand_case() {
        let zsl = Tensor::from_rows(&[
            vec![0.2, 0.3, 0.5],
            vec![0.1, 0.6, 0.3],
            vec![0.4, 0.4, 0.2],
        ])
        .unwrap();
        let few = Tensor::from_rows(&[
            vec![0.3, 0.3, 0.4],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.8, 0.1],
        ])
        .unwrap();
        let tags = [
            InteractionKind::WithinText,
            InteractionKind::CrossModal,
            InteractionKind::WithinImage,
        ];
        let row = meta_features(&zsl, &few, &[false, true, false], &tags, Subtask::LabelIdentification, true)
            .unwrap();
        // zsl column sums: 0.7, 1.3, 1.0; few: 0.6, 1.6, 0.8; middle masked
        assert!((row.features[0] - 0.7).abs() < 1e-12);
        assert_eq!(row.features[1], 0.0);
        assert!((row.features[2] - 1.0).abs() < 1e-12);
        assert!((row.features[3] - (0.6 - 0.7)).abs() < 1e-12);
        assert_eq!(row.features[4], 0.0);
        assert!((row.features[5] - (0.8 - 1.0)).abs() < 1e-12);
        assert_eq!(row.weight_type(0), WeightType::ZeroShot);
        assert_eq!(row.weight_type(3), WeightType::Delta);
        assert_eq!(row.tag(3), InteractionKind::WithinText);
    }

    #[test]
    fn meta_features_length_mismatch_is_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            meta_features(&a, &a, &[false], &[InteractionKind::WithinText], Subtask::LabelIdentification, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn model_meta_row_has_expected_shape() {
        use crate::data::{generate, GenConfig};
        use crate::model::ModelConfig;
        let data = generate(&GenConfig {
            min_tokens: 2,
            max_tokens: 4,
            min_regions: 1,
            max_regions: 2,
            ..GenConfig::default()
        })
        .unwrap();
        let model = Model::new(ModelConfig {
            d_model: 16,
            n_heads: 2,
            max_text: 16,
            max_regions: 8,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        let row = model_meta_row(&model, &data[1], &data[0], Subtask::LabelIdentification, true).unwrap();
        let s = data[0].tokens.len() + data[0].regions.len() + 2;
        assert_eq!(row.features.len(), 2 * s);
        assert_eq!(row.token_count(), s);
        // markers masked
        assert_eq!(row.features[0], 0.0);
        let sep = 1 + data[0].tokens.len();
        assert_eq!(row.features[sep], 0.0);
    }
}
