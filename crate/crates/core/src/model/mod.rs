//! Toy transformer encoder over a concatenated text+image sequence.
//!
//! The encoder exposes every layer's per-head attention matrices as graph
//! nodes. The last layer's attention can additionally be *overridden* with
//! externally supplied values that enter the tape as differentiable leaves;
//! attribution evaluates the network at scaled attention this way.
//!
//! Input layout is `[start-marker, text tokens..., separator, regions...]`.
//! Text tokens get learned positional embeddings; regions are treated as a
//! set and get none. The classifier reads the start-marker position.

mod checkpoint;
mod layout;

pub use layout::{PositionKind, SequenceLayout};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MemeSample;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub region_dim: usize,
    pub max_text: usize,
    pub max_regions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 64,
            region_dim: 16,
            max_text: 16,
            max_regions: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("region_dim", self.region_dim),
            ("max_text", self.max_text),
            ("max_regions", self.max_regions),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Per-layer attention tensors of one forward pass, shaped `[H, S, S]`.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    layers: Vec<Tensor>,
}

impl AttentionStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    /// Copy of one head's `[S, S]` attention matrix.
    pub fn head(&self, layer: usize, head: usize) -> Tensor {
        let t = &self.layers[layer];
        let s = t.shape()[1];
        let data = t.data()[head * s * s..(head + 1) * s * s].to_vec();
        Tensor::new(vec![s, s], data).expect("stack shape")
    }
}

/// How the last layer's attention is produced.
enum AttentionSource<'a> {
    Natural,
    /// Per-head `[S, S]` values inserted as differentiable leaves.
    Override(&'a [Tensor]),
}

struct BuildOptions<'a> {
    attention: AttentionSource<'a>,
    target: Option<usize>,
    regions_override: Option<&'a [Vec<f64>]>,
    params_require_grad: bool,
}

impl Default for BuildOptions<'_> {
    fn default() -> Self {
        BuildOptions {
            attention: AttentionSource::Natural,
            target: None,
            regions_override: None,
            params_require_grad: false,
        }
    }
}

/// One recorded forward computation over a sample, with handles to the
/// interesting nodes.
pub struct ForwardPass {
    graph: Graph,
    logits_id: NodeId,
    margin_id: NodeId,
    loss_id: Option<NodeId>,
    attention_ids: Vec<Vec<NodeId>>,
    override_ids: Option<Vec<NodeId>>,
    param_nodes: Vec<(usize, NodeId)>,
    layout: SequenceLayout,
}

impl ForwardPass {
    pub fn logits(&self) -> [f64; 2] {
        let v = self.graph.value(self.logits_id).data();
        [v[0], v[1]]
    }

    /// Pre-softmax hateful-minus-benign logit margin; the scalar F that
    /// attribution differentiates.
    pub fn margin(&self) -> f64 {
        self.graph.value(self.margin_id).item()
    }

    /// Hatefulness probability, softmax of the two logits at index 1, which
    /// for two classes reduces to the logistic of the margin.
    pub fn prob(&self) -> f64 {
        sigmoid(self.margin())
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss_id.map(|id| self.graph.value(id).item())
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn attention(&self) -> AttentionStack {
        let s = self.layout.total;
        let layers = self
            .attention_ids
            .iter()
            .map(|heads| {
                let mut data = Vec::with_capacity(heads.len() * s * s);
                for &id in heads {
                    data.extend_from_slice(self.graph.value(id).data());
                }
                Tensor::new(vec![heads.len(), s, s], data).expect("stack shape")
            })
            .collect();
        AttentionStack { layers }
    }

    /// Per-head `[S, S]` attention values at the last layer.
    pub fn last_layer_attention(&self) -> Vec<Tensor> {
        let heads = self.attention_ids.last().expect("n_layers >= 1");
        heads.iter().map(|&id| self.graph.value(id).clone()).collect()
    }

    /// Node ids of the last layer's attention leaves when this pass was
    /// built with an override.
    pub fn override_ids(&self) -> Option<&[NodeId]> {
        self.override_ids.as_deref()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Gradients of the logit margin with respect to everything that
    /// requires gradients in this pass.
    pub fn backward_margin(&self) -> Result<Gradients> {
        self.graph.backward(self.margin_id)
    }

    pub fn backward_loss(&self) -> Result<Gradients> {
        let loss = self
            .loss_id
            .ok_or_else(|| Error::Contract("pass was built without a loss target".into()))?;
        self.graph.backward(loss)
    }

    /// (parameter index, leaf node) pairs for passes built for training.
    pub(crate) fn param_nodes(&self) -> &[(usize, NodeId)] {
        &self.param_nodes
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<NamedParam>,
    index: HashMap<String, usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();

        let mut xavier = |name: &str, rows: usize, cols: usize, params: &mut Vec<NamedParam>| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(NamedParam {
                name: name.to_string(),
                value: Tensor::new(vec![rows, cols], data).expect("shape"),
            });
        };
        let push_const = |name: &str, rows: usize, cols: usize, fill: f64, params: &mut Vec<NamedParam>| {
            params.push(NamedParam {
                name: name.to_string(),
                value: Tensor::new(vec![rows, cols], vec![fill; rows * cols]).expect("shape"),
            });
        };

        let d = cfg.d_model;
        xavier("token_embedding", cfg.vocab_size, d, &mut params);
        xavier("position_embedding", cfg.max_text, d, &mut params);
        xavier("marker_embedding", 2, d, &mut params);
        xavier("region_projection", cfg.region_dim, d, &mut params);
        push_const("region_bias", 1, d, 0.0, &mut params);
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                xavier(&format!("layer{l}.head{h}.w_query"), d, cfg.head_dim(), &mut params);
                xavier(&format!("layer{l}.head{h}.w_key"), d, cfg.head_dim(), &mut params);
                xavier(&format!("layer{l}.head{h}.w_value"), d, cfg.head_dim(), &mut params);
                xavier(&format!("layer{l}.head{h}.w_out"), cfg.head_dim(), d, &mut params);
            }
            push_const(&format!("layer{l}.attn_norm_gain"), 1, d, 1.0, &mut params);
            push_const(&format!("layer{l}.attn_norm_bias"), 1, d, 0.0, &mut params);
            xavier(&format!("layer{l}.ffn_w1"), d, cfg.ffn_dim(), &mut params);
            push_const(&format!("layer{l}.ffn_b1"), 1, cfg.ffn_dim(), 0.0, &mut params);
            xavier(&format!("layer{l}.ffn_w2"), cfg.ffn_dim(), d, &mut params);
            push_const(&format!("layer{l}.ffn_b2"), 1, d, 0.0, &mut params);
            push_const(&format!("layer{l}.ffn_norm_gain"), 1, d, 1.0, &mut params);
            push_const(&format!("layer{l}.ffn_norm_bias"), 1, d, 0.0, &mut params);
        }
        xavier("classifier_w", d, 2, &mut params);
        push_const("classifier_b", 1, 2, 0.0, &mut params);

        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model { cfg, params, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    /// Replace a parameter tensor; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                left: self.params[i].value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.params[i].value = value;
        Ok(())
    }

    pub(crate) fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    fn check_capacity(&self, sample: &MemeSample) -> Result<()> {
        if sample.tokens.len() > self.cfg.max_text {
            return Err(Error::Capacity(format!(
                "sample {} has {} tokens, model capacity is {}",
                sample.id,
                sample.tokens.len(),
                self.cfg.max_text
            )));
        }
        if sample.regions.len() > self.cfg.max_regions {
            return Err(Error::Capacity(format!(
                "sample {} has {} regions, model capacity is {}",
                sample.id,
                sample.regions.len(),
                self.cfg.max_regions
            )));
        }
        if let Some(&bad) = sample.tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Capacity(format!(
                "sample {} token id {bad} exceeds vocab size {}",
                sample.id, self.cfg.vocab_size
            )));
        }
        if sample.regions.iter().any(|r| r.len() != self.cfg.region_dim) {
            return Err(Error::Capacity(format!(
                "sample {} has a region of the wrong width (expected {})",
                sample.id, self.cfg.region_dim
            )));
        }
        Ok(())
    }

    /// Plain forward pass; parameters enter the tape as constants.
    pub fn forward(&self, sample: &MemeSample) -> Result<ForwardPass> {
        self.build(sample, BuildOptions::default())
    }

    /// Forward pass with a cross-entropy loss node and differentiable
    /// parameters. `regions_override` substitutes the image inputs (the
    /// text-only training intervention).
    pub fn forward_for_training(
        &self,
        sample: &MemeSample,
        regions_override: Option<&[Vec<f64>]>,
    ) -> Result<ForwardPass> {
        self.build(
            sample,
            BuildOptions {
                target: Some(sample.label as usize),
                regions_override,
                params_require_grad: true,
                ..BuildOptions::default()
            },
        )
    }

    /// Forward pass whose last-layer attention is replaced by `alpha * A`,
    /// where `A` is the attention of an unmodified pass on the same sample.
    /// The replacement values enter the tape as differentiable leaves.
    pub fn forward_with_attention_override(
        &self,
        sample: &MemeSample,
        alpha: f64,
    ) -> Result<ForwardPass> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!(
                "attention scale alpha must lie in [0, 1], got {alpha}"
            )));
        }
        let natural = self.forward(sample)?;
        let scaled: Vec<Tensor> = natural
            .last_layer_attention()
            .into_iter()
            .map(|a| a.scale_by(alpha))
            .collect();
        self.forward_with_attention_values(sample, &scaled)
    }

    /// Forward pass with explicit per-head last-layer attention values.
    pub fn forward_with_attention_values(
        &self,
        sample: &MemeSample,
        attention: &[Tensor],
    ) -> Result<ForwardPass> {
        if attention.len() != self.cfg.n_heads {
            return Err(Error::Contract(format!(
                "expected {} override heads, got {}",
                self.cfg.n_heads,
                attention.len()
            )));
        }
        self.build(
            sample,
            BuildOptions {
                attention: AttentionSource::Override(attention),
                ..BuildOptions::default()
            },
        )
    }

    /// Hatefulness probability theta in (0, 1).
    pub fn predict_prob(&self, sample: &MemeSample) -> Result<f64> {
        Ok(self.forward(sample)?.prob())
    }

    fn build(&self, sample: &MemeSample, opts: BuildOptions) -> Result<ForwardPass> {
        self.check_capacity(sample)?;
        let cfg = &self.cfg;
        let layout = SequenceLayout::new(sample.tokens.len(), sample.regions.len());
        let s_total = layout.total;

        let mut g = Graph::new();
        let mut param_nodes: Vec<(usize, NodeId)> = Vec::new();
        // lazily register parameters as graph leaves, once each
        let mut param_cache: Vec<Option<NodeId>> = vec![None; self.params.len()];
        let mut param_node = |g: &mut Graph, name: &str| -> NodeId {
            let i = *self.index.get(name).expect("parameter name");
            if let Some(id) = param_cache[i] {
                return id;
            }
            let id = g.input(self.params[i].value.clone(), opts.params_require_grad);
            param_cache[i] = Some(id);
            param_nodes.push((i, id));
            id
        };

        // embeddings
        let tok_ids: Vec<usize> = sample.tokens.iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = (0..tok_ids.len()).collect();
        let tok_table = param_node(&mut g, "token_embedding");
        let pos_table = param_node(&mut g, "position_embedding");
        let marker_table = param_node(&mut g, "marker_embedding");
        let text_tok = g.embedding_lookup(tok_table, &tok_ids)?;
        let text_pos = g.embedding_lookup(pos_table, &pos_ids)?;
        let text = g.add(text_tok, text_pos)?;

        let region_rows: Vec<Vec<f64>> = match opts.regions_override {
            Some(rows) => rows.to_vec(),
            None => sample.regions.clone(),
        };
        if region_rows.len() != sample.regions.len() {
            return Err(Error::Contract(
                "regions_override must match the sample's region count".into(),
            ));
        }
        let region_data: Vec<f64> = region_rows.iter().flatten().copied().collect();
        let regions_in = g.input(
            Tensor::new(vec![region_rows.len(), cfg.region_dim], region_data)?,
            false,
        );
        let region_proj = param_node(&mut g, "region_projection");
        let region_bias = param_node(&mut g, "region_bias");
        let regions_emb = g.matmul(regions_in, region_proj)?;
        let regions_emb = g.add_row_broadcast(regions_emb, region_bias)?;

        let start = g.embedding_lookup(marker_table, &[0])?;
        let sep = g.embedding_lookup(marker_table, &[1])?;
        let seq = g.concat_rows(start, text)?;
        let seq = g.concat_rows(seq, sep)?;
        let mut x = g.concat_rows(seq, regions_emb)?;
        debug_assert_eq!(g.value(x).rows(), s_total);

        // encoder stack
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut attention_ids: Vec<Vec<NodeId>> = Vec::with_capacity(cfg.n_layers);
        let mut override_ids = None;
        for l in 0..cfg.n_layers {
            let mut head_ids = Vec::with_capacity(cfg.n_heads);
            let mut attn_sum: Option<NodeId> = None;
            let is_last = l + 1 == cfg.n_layers;
            for h in 0..cfg.n_heads {
                let wq = param_node(&mut g, &format!("layer{l}.head{h}.w_query"));
                let wk = param_node(&mut g, &format!("layer{l}.head{h}.w_key"));
                let wv = param_node(&mut g, &format!("layer{l}.head{h}.w_value"));
                let wo = param_node(&mut g, &format!("layer{l}.head{h}.w_out"));
                let v = g.matmul(x, wv)?;
                let attn = match (&opts.attention, is_last) {
                    (AttentionSource::Override(values), true) => {
                        let val = &values[h];
                        if val.shape() != [s_total, s_total] {
                            return Err(Error::ShapeMismatch {
                                op: "attention_override",
                                left: val.shape().to_vec(),
                                right: vec![s_total, s_total],
                            });
                        }
                        g.input(val.clone(), true)
                    }
                    _ => {
                        let q = g.matmul(x, wq)?;
                        let k = g.matmul(x, wk)?;
                        let kt = g.transpose(k)?;
                        let scores = g.matmul(q, kt)?;
                        g.softmax_rows(scores, scale)?
                    }
                };
                head_ids.push(attn);
                let ctx = g.matmul(attn, v)?;
                let proj = g.matmul(ctx, wo)?;
                attn_sum = Some(match attn_sum {
                    None => proj,
                    Some(acc) => g.add(acc, proj)?,
                });
            }
            if is_last {
                if let AttentionSource::Override(_) = opts.attention {
                    override_ids = Some(head_ids.clone());
                }
            }
            attention_ids.push(head_ids);

            let res = g.add(x, attn_sum.expect("n_heads >= 1"))?;
            let normed = g.layer_norm(res, LAYER_NORM_EPS)?;
            let gain = param_node(&mut g, &format!("layer{l}.attn_norm_gain"));
            let bias = param_node(&mut g, &format!("layer{l}.attn_norm_bias"));
            let normed = g.mul_row_broadcast(normed, gain)?;
            x = g.add_row_broadcast(normed, bias)?;

            let w1 = param_node(&mut g, &format!("layer{l}.ffn_w1"));
            let b1 = param_node(&mut g, &format!("layer{l}.ffn_b1"));
            let w2 = param_node(&mut g, &format!("layer{l}.ffn_w2"));
            let b2 = param_node(&mut g, &format!("layer{l}.ffn_b2"));
            let h1 = g.matmul(x, w1)?;
            let h1 = g.add_row_broadcast(h1, b1)?;
            let h1 = g.relu(h1)?;
            let h2 = g.matmul(h1, w2)?;
            let h2 = g.add_row_broadcast(h2, b2)?;
            let res = g.add(x, h2)?;
            let normed = g.layer_norm(res, LAYER_NORM_EPS)?;
            let gain = param_node(&mut g, &format!("layer{l}.ffn_norm_gain"));
            let bias = param_node(&mut g, &format!("layer{l}.ffn_norm_bias"));
            let normed = g.mul_row_broadcast(normed, gain)?;
            x = g.add_row_broadcast(normed, bias)?;
        }

        // classification head on the mean-pooled final hidden states. A
        // marker-only readout would leave every non-marker attention row of
        // the last layer without gradient (everything after attention is
        // row-local), collapsing the masked attribution sums to zero;
        // pooling keeps all rows attributable.
        let cls_w = param_node(&mut g, "classifier_w");
        let cls_b = param_node(&mut g, "classifier_b");
        let pool_w = Tensor::new(vec![1, s_total], vec![1.0 / s_total as f64; s_total])?;
        let pool = g.constant(pool_w);
        let cls_h = g.matmul(pool, x)?;
        let logits = g.matmul(cls_h, cls_w)?;
        let logits = g.add_row_broadcast(logits, cls_b)?;

        // margin = logits[hateful] - logits[benign]
        let margin_vec = g.constant(Tensor::new(vec![2, 1], vec![-1.0, 1.0])?);
        let margin = g.matmul(logits, margin_vec)?;

        let loss_id = match opts.target {
            Some(t) => Some(g.cross_entropy_with_logits(logits, &[t])?),
            None => None,
        };

        Ok(ForwardPass {
            graph: g,
            logits_id: logits,
            margin_id: margin,
            loss_id,
            attention_ids,
            override_ids,
            param_nodes,
            layout,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
