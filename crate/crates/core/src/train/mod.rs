//! Training loop for the toy transformer: Adam over per-sample cross-entropy,
//! deterministic given the seed.
//!
//! `BiasMode::TextOnly` reproduces a text-biased encoder: during training the
//! image regions are replaced by fixed per-sample noise, so the model can only
//! learn from text. Evaluation always sees the real regions.

mod adam;

pub use adam::{Adam, AdamState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::MemeSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Balanced,
    TextOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bias_mode: BiasMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            seed: 0,
            bias_mode: BiasMode::Balanced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.learning_rate < 0.0 {
            problems.push(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems))
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Per-epoch mean loss over the training set.
    pub loss_curve: Vec<f64>,
}

/// Train a copy of `model` on `dataset`. The input model is untouched.
pub fn train(model: &Model, dataset: &[MemeSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::DegenerateData("training set is empty".into()));
    }
    let n_hateful = dataset.iter().filter(|s| s.is_hateful()).count();
    if n_hateful == 0 || n_hateful == dataset.len() {
        return Err(Error::DegenerateData(format!(
            "training set has a single class ({} hateful of {})",
            n_hateful,
            dataset.len()
        )));
    }

    let mut model = model.clone();
    let noise_regions = match cfg.bias_mode {
        BiasMode::Balanced => None,
        BiasMode::TextOnly => Some(fixed_noise_regions(dataset, cfg.seed)),
    };

    let mut adam = Adam::new(
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
        model.params().iter().map(|p| p.value.shape().to_vec()),
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
            for &i in batch {
                let s = &dataset[i];
                let override_rows = noise_regions.as_ref().map(|m| m[i].as_slice());
                let pass = model.forward_for_training(s, override_rows)?;
                epoch_loss += pass.loss().expect("training pass has a loss");
                let grads = pass.backward_loss()?;
                for &(pi, node) in pass.param_nodes() {
                    let g = grads.get(node);
                    for (acc, &v) in grad_acc[pi].data_mut().iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_acc.iter_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            adam.step(model.params_mut().iter_mut().map(|p| &mut p.value), &grad_acc)?;
        }
        loss_curve.push(epoch_loss / dataset.len() as f64);
    }

    Ok(TrainOutcome { model, loss_curve })
}

/// Fixed per-sample noise regions for the text-only intervention; the same
/// sample sees the same noise every epoch.
fn fixed_noise_regions(dataset: &[MemeSample], seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    dataset
        .iter()
        .map(|s| {
            s.regions
                .iter()
                .map(|r| (0..r.len()).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        })
        .collect()
}

/// Fraction of samples whose thresholded prediction matches the label.
pub fn accuracy(model: &Model, samples: &[MemeSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("accuracy over no samples"));
    }
    let mut correct = 0usize;
    for s in samples {
        let theta = model.predict_prob(s)?;
        if (theta > 0.5) == s.is_hateful() {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Loss curve as a `epoch,loss` CSV document.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}
