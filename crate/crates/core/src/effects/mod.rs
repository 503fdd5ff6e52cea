//! Intersectional treatment effects over confounder triples.
//!
//! For a probability readout theta, the per-triple effect is
//! `theta(T1,I1) - theta(T1,I0) - theta(T0,I1)`; miATE is its mean with a
//! percentile-bootstrap confidence interval. MIDAS applies the same
//! difference to interaction-type score records (attattr, attention-only or
//! gradient-only). The image analysis runs over triples whose image
//! confounder is original (text member picked); the text analysis is the
//! mirror image.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{attattr_by_type, attention_only_score, gradient_only_score, TypeScores};
use crate::data::{ConfounderTriple, MemeSample, Provenance};
use crate::error::{Error, Result};
use crate::model::Model;

/// Which confounder is original in the analyzed triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    /// Original image confounder, picked text completion.
    Image,
    /// Original text confounder, picked image completion.
    Text,
}

/// Which per-sample score feeds the MIDAS difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    Attattr,
    AttentionOnly,
    GradientOnly,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 3] = [
        ScoreVariant::Attattr,
        ScoreVariant::AttentionOnly,
        ScoreVariant::GradientOnly,
    ];
}

/// Anything that maps a sample to a hatefulness probability.
pub trait HatefulnessScorer {
    fn theta(&self, sample: &MemeSample) -> Result<f64>;
}

impl HatefulnessScorer for Model {
    fn theta(&self, sample: &MemeSample) -> Result<f64> {
        self.predict_prob(sample)
    }
}

/// Reads the latent label: theta = 1 on hateful samples, 0 otherwise.
pub struct OracleScorer;

impl HatefulnessScorer for OracleScorer {
    fn theta(&self, sample: &MemeSample) -> Result<f64> {
        Ok(f64::from(sample.label))
    }
}

/// Same theta for every input.
pub struct ConstantScorer(pub f64);

impl HatefulnessScorer for ConstantScorer {
    fn theta(&self, _sample: &MemeSample) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            seed: 0,
        }
    }
}

/// Mean effect with a 95% percentile-bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub mean: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n: usize,
}

/// Mean and 95% percentile CI of per-observation effects.
fn bootstrap_mean(effects: &[f64], cfg: &BootstrapConfig) -> EffectEstimate {
    let n = effects.len();
    let mean = effects.iter().sum::<f64>() / n as f64;
    if cfg.resamples == 0 || n < 2 {
        return EffectEstimate {
            mean,
            ci_lower: mean,
            ci_upper: mean,
            n,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Vec::with_capacity(cfg.resamples);
    for _ in 0..cfg.resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += effects[rng.random_range(0..n)];
        }
        means.push(s / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let lo_idx = ((cfg.resamples as f64) * 0.025).floor() as usize;
    let hi_idx = (((cfg.resamples as f64) * 0.975).ceil() as usize).saturating_sub(1);
    EffectEstimate {
        mean,
        ci_lower: means[lo_idx.min(cfg.resamples - 1)],
        ci_upper: means[hi_idx.min(cfg.resamples - 1)],
        n,
    }
}

/// Triples matching the analysis's provenance pattern.
pub fn select_triples<'a>(
    triples: &'a [ConfounderTriple],
    analysis: Analysis,
) -> Vec<&'a ConfounderTriple> {
    triples
        .iter()
        .filter(|t| match analysis {
            Analysis::Image => t.image_benign_provenance == Provenance::Original,
            Analysis::Text => t.text_benign_provenance == Provenance::Original,
        })
        .collect()
}

/// miATE: mean over triples of `theta(hateful) - theta(image_benign) -
/// theta(text_benign)`, with a bootstrap CI. Each picked completion counts
/// as one observation.
pub fn miate(
    scorer: &dyn HatefulnessScorer,
    triples: &[ConfounderTriple],
    analysis: Analysis,
    bootstrap: &BootstrapConfig,
) -> Result<EffectEstimate> {
    let selected = select_triples(triples, analysis);
    if selected.is_empty() {
        return Err(Error::EmptyInput("miate over no matching triples"));
    }
    let mut effects = Vec::with_capacity(selected.len());
    for t in &selected {
        effects.push(triple_effect(scorer, t)?);
    }
    Ok(bootstrap_mean(&effects, bootstrap))
}

pub fn triple_effect(scorer: &dyn HatefulnessScorer, t: &ConfounderTriple) -> Result<f64> {
    Ok(scorer.theta(&t.hateful)? - scorer.theta(&t.image_benign)? - scorer.theta(&t.text_benign)?)
}

/// Per-interaction-type MIDAS estimates plus the all-types aggregate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MidasReport {
    pub within_text: EffectEstimate,
    pub within_image: EffectEstimate,
    pub cross_modal: EffectEstimate,
    pub all: EffectEstimate,
}

/// Score records of one triple's members: (hateful, text_benign, image_benign).
pub type TripleScores = (TypeScores, TypeScores, TypeScores);

/// MIDAS aggregation over precomputed per-member score records.
pub fn midas_from_records(records: &[TripleScores], bootstrap: &BootstrapConfig) -> Result<MidasReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("midas over no records"));
    }
    let diff = |pick: fn(&TypeScores) -> f64| -> Vec<f64> {
        records
            .iter()
            .map(|(h, tb, ib)| pick(h) - pick(ib) - pick(tb))
            .collect()
    };
    let stat = |effects: Vec<f64>, salt: u64| {
        bootstrap_mean(
            &effects,
            &BootstrapConfig {
                resamples: bootstrap.resamples,
                seed: bootstrap.seed ^ salt,
            },
        )
    };
    Ok(MidasReport {
        within_text: stat(diff(|s| s.within_text), 1),
        within_image: stat(diff(|s| s.within_image), 2),
        cross_modal: stat(diff(|s| s.cross_modal), 3),
        all: stat(diff(|s| s.all), 4),
    })
}

/// Compute per-member scores for the selected triples and aggregate them
/// into MIDAS. Member scores are cached by sample id.
pub fn midas(
    model: &Model,
    triples: &[ConfounderTriple],
    analysis: Analysis,
    variant: ScoreVariant,
    m_steps: usize,
    bootstrap: &BootstrapConfig,
) -> Result<MidasReport> {
    let selected = select_triples(triples, analysis);
    if selected.is_empty() {
        return Err(Error::EmptyInput("midas over no matching triples"));
    }
    let mut cache: BTreeMap<u64, TypeScores> = BTreeMap::new();
    let mut score_of = |s: &MemeSample| -> Result<TypeScores> {
        if let Some(v) = cache.get(&s.id) {
            return Ok(*v);
        }
        let v = match variant {
            ScoreVariant::Attattr => attattr_by_type(model, s, m_steps)?.type_means,
            ScoreVariant::AttentionOnly => attention_only_score(model, s)?,
            ScoreVariant::GradientOnly => gradient_only_score(model, s)?,
        };
        cache.insert(s.id, v);
        Ok(v)
    };
    let mut records = Vec::with_capacity(selected.len());
    for t in &selected {
        records.push((
            score_of(&t.hateful)?,
            score_of(&t.text_benign)?,
            score_of(&t.image_benign)?,
        ));
    }
    midas_from_records(&records, bootstrap)
}

/// Keep triples the scorer classifies correctly: hateful above threshold,
/// both confounders strictly below.
pub fn filter_correct(
    scorer: &dyn HatefulnessScorer,
    triples: &[ConfounderTriple],
    threshold: f64,
) -> Result<Vec<ConfounderTriple>> {
    let mut kept = Vec::new();
    for t in triples {
        if scorer.theta(&t.hateful)? > threshold
            && scorer.theta(&t.text_benign)? < threshold
            && scorer.theta(&t.image_benign)? < threshold
        {
            kept.push(t.clone());
        }
    }
    Ok(kept)
}

/// One sample's contribution to the single-step relation check: a per-type
/// attention aggregate and its normalized gradient weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedAttention {
    pub attention: f64,
    pub grad_weight: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelationReport {
    /// Sum over samples of gradient-weighted attention differences.
    pub weighted_sum: f64,
    /// Difference of empirical attention expectations.
    pub expectation_gap: f64,
    pub discrepancy: f64,
}

/// Single-step MIDAS sum versus the expectation gap of attention.
///
/// With gradient weights summing to one on each side, the weighted sum of
/// attention is an expectation; with exactly uniform weights it equals the
/// empirical mean, so the discrepancy vanishes. Perturbed (but still
/// normalized) weights degrade it smoothly, bounded by max|A| times the
/// perturbation mass.
pub fn relation_check(
    hateful: &[WeightedAttention],
    benign: &[WeightedAttention],
) -> Result<RelationReport> {
    if hateful.is_empty() || benign.is_empty() {
        return Err(Error::EmptyInput("relation_check over no samples"));
    }
    for (name, side) in [("hateful", hateful), ("benign", benign)] {
        let total: f64 = side.iter().map(|w| w.grad_weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "{name} gradient weights sum to {total}, expected 1 within 1e-9"
            )));
        }
    }
    let weighted = |side: &[WeightedAttention]| -> f64 {
        side.iter().map(|w| w.attention * w.grad_weight).sum()
    };
    let mean = |side: &[WeightedAttention]| -> f64 {
        side.iter().map(|w| w.attention).sum::<f64>() / side.len() as f64
    };
    let weighted_sum = weighted(hateful) - weighted(benign);
    let expectation_gap = mean(hateful) - mean(benign);
    Ok(RelationReport {
        weighted_sum,
        expectation_gap,
        discrepancy: (weighted_sum - expectation_gap).abs(),
    })
}

/// Full effect readout for one analysis type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectReport {
    pub analysis: Analysis,
    pub filtered_to_correct: bool,
    pub n_triples: usize,
    pub miate: EffectEstimate,
    /// Per score variant; absent for oracle runs that have no model.
    pub midas: BTreeMap<ScoreVariant, MidasReport>,
}

impl EffectReport {
    /// CSV rows `analysis,metric,variant,interaction,mean,ci_lower,ci_upper,n`.
    pub fn csv_rows(&self) -> Vec<String> {
        let analysis = match self.analysis {
            Analysis::Image => "image",
            Analysis::Text => "text",
        };
        let mut rows = vec![format!(
            "{analysis},miate,-,-,{},{},{},{}",
            self.miate.mean, self.miate.ci_lower, self.miate.ci_upper, self.miate.n
        )];
        for (variant, report) in &self.midas {
            let vname = match variant {
                ScoreVariant::Attattr => "attattr",
                ScoreVariant::AttentionOnly => "attention_only",
                ScoreVariant::GradientOnly => "gradient_only",
            };
            for (iname, est) in [
                ("all", report.all),
                ("within_text", report.within_text),
                ("within_image", report.within_image),
                ("cross_modal", report.cross_modal),
            ] {
                rows.push(format!(
                    "{analysis},midas,{vname},{iname},{},{},{},{}",
                    est.mean, est.ci_lower, est.ci_upper, est.n
                ));
            }
        }
        rows
    }

    pub const CSV_HEADER: &'static str = "analysis,metric,variant,interaction,mean,ci_lower,ci_upper,n";
}
