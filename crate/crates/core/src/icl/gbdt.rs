//! Small gradient-boosted tree ensemble for the meta-feature classifier.
//!
//! Logistic loss, second-order (Newton) leaf values, gain-based splits with
//! an L2 leaf penalty, early stopping on validation log-loss. Everything is
//! deterministic: split search scans features in index order and thresholds
//! in value order, so equal gains resolve to the lowest feature index.
//! Feature importance is the number of split nodes using a feature, counted
//! as Table-style groupings by weight type and interaction type.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::InteractionKind;
use crate::error::{Error, Result};
use crate::icl::{MetaFeatureRow, WeightType};
use crate::model::sigmoid;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub max_rounds: usize,
    pub l2: f64,
    pub min_gain: f64,
    pub early_stop_patience: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            max_depth: 3,
            learning_rate: 0.1,
            max_rounds: 200,
            l2: 1.0,
            min_gain: 1e-9,
            early_stop_patience: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeEnsembleModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub n_features: usize,
    /// Split-node occurrence count per feature, maintained during training.
    pub importance: Vec<usize>,
}

impl TreeEnsembleModel {
    pub fn predict_margin(&self, x: &[f64]) -> f64 {
        let mut m = self.base_score;
        for t in &self.trees {
            m += self.learning_rate * t.predict(x);
        }
        m
    }

    pub fn predict_prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.predict_margin(x))
    }

    /// Brute-force recount of split nodes per feature by walking every tree;
    /// the oracle for the incrementally maintained `importance` table.
    pub fn enumerate_split_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_features];
        for t in &self.trees {
            for n in &t.nodes {
                if let TreeNode::Split { feature, .. } = n {
                    counts[*feature] += 1;
                }
            }
        }
        counts
    }

    pub fn total_split_nodes(&self) -> usize {
        self.enumerate_split_counts().iter().sum()
    }
}

/// Deterministic shuffled 56/14/30 split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_56_14_30(n: usize, seed: u64) -> SplitAssignment {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * 0.56).round() as usize;
    let n_valid = ((n as f64) * 0.14).round() as usize;
    let train = idx[..n_train].to_vec();
    let valid = idx[n_train..(n_train + n_valid).min(n)].to_vec();
    let test = idx[(n_train + n_valid).min(n)..].to_vec();
    SplitAssignment { train, valid, test }
}

/// Importance grouped the two ways the readout reports it: by weight type
/// and by interaction type. `features` counts distinct features with at
/// least one occurrence; `occurrences` totals split nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub per_feature: Vec<usize>,
    pub by_weight_type: BTreeMap<WeightType, GroupImportance>,
    pub by_interaction: BTreeMap<InteractionKind, GroupImportance>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub features: usize,
    pub occurrences: usize,
}

fn group_importance(counts: &[usize], template: &MetaFeatureRow) -> ImportanceTable {
    let mut by_weight_type: BTreeMap<WeightType, GroupImportance> = BTreeMap::new();
    let mut by_interaction: BTreeMap<InteractionKind, GroupImportance> = BTreeMap::new();
    for wt in [WeightType::ZeroShot, WeightType::Delta] {
        by_weight_type.insert(wt, GroupImportance::default());
    }
    for kind in InteractionKind::ALL {
        by_interaction.insert(kind, GroupImportance::default());
    }
    for (f, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let wt = by_weight_type.get_mut(&template.weight_type(f)).expect("init");
        wt.features += 1;
        wt.occurrences += c;
        let it = by_interaction.get_mut(&template.tag(f)).expect("init");
        it.features += 1;
        it.occurrences += c;
    }
    ImportanceTable {
        per_feature: counts.to_vec(),
        by_weight_type,
        by_interaction,
    }
}

pub struct MetaTrainOutcome {
    pub model: TreeEnsembleModel,
    pub auc: f64,
    pub split: SplitAssignment,
    pub importance: ImportanceTable,
    pub best_valid_logloss: f64,
}

/// Train the boosted ensemble on feature rows with their embedded targets.
/// Split is 56% train / 14% validation / 30% test; early stopping watches
/// the validation log-loss; the reported AUC is the rank statistic on test.
pub fn train_tree_ensemble(
    rows: &[MetaFeatureRow],
    params: &GbdtParams,
    seed: u64,
) -> Result<MetaTrainOutcome> {
    if rows.len() < 10 {
        return Err(Error::DegenerateData(format!(
            "need at least 10 feature rows, got {}",
            rows.len()
        )));
    }
    let n_features = rows[0].features.len();
    if rows.iter().any(|r| r.features.len() != n_features) {
        return Err(Error::Contract("feature rows have inconsistent lengths".into()));
    }

    let split = split_56_14_30(rows.len(), seed);
    let fetch = |ids: &[usize]| -> (Vec<&[f64]>, Vec<bool>) {
        (
            ids.iter().map(|&i| rows[i].features.as_slice()).collect(),
            ids.iter().map(|&i| rows[i].target).collect(),
        )
    };
    let (x_train, y_train) = fetch(&split.train);
    let (x_valid, y_valid) = fetch(&split.valid);
    let (x_test, y_test) = fetch(&split.test);

    let pos = y_train.iter().filter(|&&y| y).count();
    if pos == 0 || pos == y_train.len() {
        return Err(Error::DegenerateData(format!(
            "train split has a single class ({pos} positive of {})",
            y_train.len()
        )));
    }

    let prior = pos as f64 / y_train.len() as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let mut model = TreeEnsembleModel {
        base_score,
        learning_rate: params.learning_rate,
        trees: Vec::new(),
        n_features,
        importance: vec![0; n_features],
    };

    let mut train_margin = vec![base_score; x_train.len()];
    let mut best_valid = f64::INFINITY;
    let mut best_rounds = 0usize;
    let mut since_best = 0usize;

    for _round in 0..params.max_rounds {
        let mut grad = Vec::with_capacity(x_train.len());
        let mut hess = Vec::with_capacity(x_train.len());
        for (m, &y) in train_margin.iter().zip(&y_train) {
            let p = sigmoid(*m);
            grad.push(p - if y { 1.0 } else { 0.0 });
            hess.push((p * (1.0 - p)).max(1e-12));
        }
        let all: Vec<usize> = (0..x_train.len()).collect();
        let mut tree = Tree { nodes: Vec::new() };
        grow_node(&mut tree, &x_train, &grad, &hess, &all, 0, params, &mut model.importance);
        for (i, m) in train_margin.iter_mut().enumerate() {
            *m += params.learning_rate * tree.predict(x_train[i]);
        }
        model.trees.push(tree);

        let valid_loss = log_loss(&model, &x_valid, &y_valid);
        if valid_loss + 1e-12 < best_valid {
            best_valid = valid_loss;
            best_rounds = model.trees.len();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= params.early_stop_patience {
                break;
            }
        }
    }

    // rewind to the best round and recount importance
    model.trees.truncate(best_rounds.max(1));
    model.importance = model.enumerate_split_counts();

    let scores: Vec<f64> = x_test.iter().map(|x| model.predict_margin(x)).collect();
    let auc = rank_auc(&scores, &y_test)?;
    let importance = group_importance(&model.importance, &rows[0]);
    Ok(MetaTrainOutcome {
        model,
        auc,
        split,
        importance,
        best_valid_logloss: best_valid,
    })
}

fn log_loss(model: &TreeEnsembleModel, xs: &[&[f64]], ys: &[bool]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let p = model.predict_prob(x).clamp(1e-12, 1.0 - 1e-12);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    total / xs.len() as f64
}

fn grow_node(
    tree: &mut Tree,
    x: &[&[f64]],
    grad: &[f64],
    hess: &[f64],
    idx: &[usize],
    depth: usize,
    params: &GbdtParams,
    importance: &mut [usize],
) -> usize {
    let g_total: f64 = idx.iter().map(|&i| grad[i]).sum();
    let h_total: f64 = idx.iter().map(|&i| hess[i]).sum();
    let leaf = |tree: &mut Tree| {
        tree.nodes.push(TreeNode::Leaf {
            value: -g_total / (h_total + params.l2),
        });
        tree.nodes.len() - 1
    };
    if depth >= params.max_depth || idx.len() < 2 {
        return leaf(tree);
    }

    let score = |g: f64, h: f64| g * g / (h + params.l2);
    let parent_score = score(g_total, h_total);
    let n_features = x[0].len();
    let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
    let mut order: Vec<usize> = idx.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| x[a][f].partial_cmp(&x[b][f]).expect("finite features"));
        let mut gl = 0.0;
        let mut hl = 0.0;
        for w in 0..order.len() - 1 {
            let i = order[w];
            gl += grad[i];
            hl += hess[i];
            let v = x[i][f];
            let v_next = x[order[w + 1]][f];
            if v == v_next {
                continue;
            }
            let gain = 0.5
                * (score(gl, hl) + score(g_total - gl, h_total - hl) - parent_score);
            if gain > best.map_or(params.min_gain, |(g, _, _)| g) {
                best = Some((gain, f, 0.5 * (v + v_next)));
            }
        }
    }

    let Some((_, feature, threshold)) = best else {
        return leaf(tree);
    };
    let left_idx: Vec<usize> = idx.iter().copied().filter(|&i| x[i][feature] <= threshold).collect();
    let right_idx: Vec<usize> = idx.iter().copied().filter(|&i| x[i][feature] > threshold).collect();
    debug_assert!(!left_idx.is_empty() && !right_idx.is_empty());

    let node_pos = tree.nodes.len();
    tree.nodes.push(TreeNode::Split {
        feature,
        threshold,
        left: 0,
        right: 0,
    });
    importance[feature] += 1;
    let left = grow_node(tree, x, grad, hess, &left_idx, depth + 1, params, importance);
    let right = grow_node(tree, x, grad, hess, &right_idx, depth + 1, params, importance);
    if let TreeNode::Split { left: l, right: r, .. } = &mut tree.nodes[node_pos] {
        *l = left;
        *r = right;
    }
    node_pos
}

/// AUC as the Mann-Whitney rank statistic with midranks for ties.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateData(
            "AUC needs both classes in the evaluation set".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1 + j + 1) as f64) / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y)
        .map(|(i, _)| ranks[i])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icl::{permute_targets, synthetic_meta_rows};

    #[test]
    fn split_fractions_are_respected() {
        for n in [50usize, 100, 173] {
            let s = split_56_14_30(n, 3);
            assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n);
            assert!((s.train.len() as f64 - 0.56 * n as f64).abs() <= 1.0, "n={n}");
            assert!((s.valid.len() as f64 - 0.14 * n as f64).abs() <= 1.0, "n={n}");
            assert!((s.test.len() as f64 - 0.30 * n as f64).abs() <= 1.5, "n={n}");
            // disjoint and covering
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_separating_feature_gives_stumps_and_perfect_auc() {
        let rows = synthetic_meta_rows(100, 4, true, 7);
        let out = train_tree_ensemble(&rows, &GbdtParams::default(), 7).unwrap();
        assert_eq!(out.auc, 1.0);
        assert!(out.model.importance[0] >= 1);
        for (f, &c) in out.model.importance.iter().enumerate().skip(1) {
            assert_eq!(c, 0, "feature {f} should never split");
        }
        for t in &out.model.trees {
            assert_eq!(t.depth(), 1, "pure children admit no further gain");
        }
    }

    #[test]
    fn permuted_labels_give_chance_level_auc() {
        let rows = synthetic_meta_rows(160, 4, true, 11);
        let permuted = permute_targets(&rows, 13);
        let out = train_tree_ensemble(&permuted, &GbdtParams::default(), 11).unwrap();
        assert!(
            (0.3..=0.7).contains(&out.auc),
            "null AUC should hover near 0.5, got {}",
            out.auc
        );
    }

    #[test]
    fn importance_table_matches_enumeration_and_totals() {
        let rows = synthetic_meta_rows(120, 6, false, 5);
        let out = train_tree_ensemble(&rows, &GbdtParams::default(), 5).unwrap();
        assert_eq!(out.model.importance, out.model.enumerate_split_counts());
        let total = out.model.total_split_nodes();
        let by_wt: usize = out.importance.by_weight_type.values().map(|g| g.occurrences).sum();
        let by_it: usize = out.importance.by_interaction.values().map(|g| g.occurrences).sum();
        assert_eq!(by_wt, total);
        assert_eq!(by_it, total);
        let features_used = out.model.importance.iter().filter(|&&c| c > 0).count();
        let wt_features: usize = out.importance.by_weight_type.values().map(|g| g.features).sum();
        assert_eq!(wt_features, features_used);
    }

    #[test]
    fn single_class_train_split_is_rejected() {
        let mut rows = synthetic_meta_rows(40, 3, true, 2);
        for r in rows.iter_mut() {
            r.target = true;
        }
        assert!(matches!(
            train_tree_ensemble(&rows, &GbdtParams::default(), 2),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn too_few_rows_are_rejected() {
        let rows = synthetic_meta_rows(9, 3, true, 2);
        assert!(matches!(
            train_tree_ensemble(&rows, &GbdtParams::default(), 2),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let scores = vec![0.1, 0.9, 0.4, 0.4, 0.7, 0.2];
        let labels = vec![false, true, false, true, true, false];
        let base = rank_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (5.0 * s).tanh()).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 100.0 * s - 3.0).collect();
        assert_eq!(base, rank_auc(&squashed, &labels).unwrap());
        assert_eq!(base, rank_auc(&shifted, &labels).unwrap());
    }

    #[test]
    fn auc_handles_ties_with_midranks() {
        // all scores equal -> AUC = 0.5 exactly
        let scores = vec![0.5; 6];
        let labels = vec![true, false, true, false, true, false];
        assert_eq!(rank_auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn ensemble_prediction_is_deterministic() {
        let rows = synthetic_meta_rows(60, 4, true, 9);
        let a = train_tree_ensemble(&rows, &GbdtParams::default(), 9).unwrap();
        let b = train_tree_ensemble(&rows, &GbdtParams::default(), 9).unwrap();
        let x = &rows[0].features;
        assert_eq!(a.model.predict_prob(x).to_bits(), b.model.predict_prob(x).to_bits());
        assert_eq!(a.auc.to_bits(), b.auc.to_bits());
    }
}
