//! Direct preference optimization objective and a desk-scale linear scorer.
//!
//! The loss for one preference example is
//!
//! ```text
//! -log σ(β · [(log π(y_w) - log π(y_l)) - (log π_ref(y_w) - log π_ref(y_l))])
//! ```
//!
//! evaluated as `softplus(-z)` so large margins neither overflow nor lose
//! precision. [`ToyScorer`] is a linear model over token-count features whose
//! "logprob" of a candidate is `w · φ(base, candidate)`; it lets the same loss
//! be trained and gradient-checked without a language model.

use serde::{Deserialize, Serialize};

use crate::dataset::PromptTriplet;
use crate::error::{Error, Result};

/// Total logprobs (nats) of the preferred (`w`) and dispreferred (`l`)
/// completions under the policy and the reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub lp_pol_w: f64,
    pub lp_pol_l: f64,
    pub lp_ref_w: f64,
    pub lp_ref_l: f64,
}

impl PreferenceExample {
    pub fn new(lp_pol_w: f64, lp_pol_l: f64, lp_ref_w: f64, lp_ref_l: f64) -> Self {
        Self {
            lp_pol_w,
            lp_pol_l,
            lp_ref_w,
            lp_ref_l,
        }
    }

    fn check(&self) -> Result<()> {
        let all = [self.lp_pol_w, self.lp_pol_l, self.lp_ref_w, self.lp_ref_l];
        if all.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("preference example {self:?}")))
        }
    }

    /// Policy margin minus reference margin.
    pub fn relative_margin(&self) -> f64 {
        (self.lp_pol_w - self.lp_pol_l) - (self.lp_ref_w - self.lp_ref_l)
    }

    /// Preferred completion gained more logprob relative to the reference than the other one.
    pub fn is_ranked_correctly(&self) -> bool {
        (self.lp_pol_w - self.lp_ref_w) > (self.lp_pol_l - self.lp_ref_l)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_loss(example: &PreferenceExample, beta: f64) -> Result<f64> {
    example.check()?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidConfig(format!("beta = {beta} must be positive")));
    }
    Ok(softplus(-beta * example.relative_margin()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub mean: f64,
    pub per_example: Vec<f64>,
    /// Fraction of examples with a strictly positive relative margin.
    pub pairwise_accuracy: f64,
}

pub fn dpo_batch_loss(examples: &[PreferenceExample], beta: f64) -> Result<BatchLoss> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_example = examples
        .iter()
        .map(|e| dpo_loss(e, beta))
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len() as f64;
    let correct = examples.iter().filter(|e| e.is_ranked_correctly()).count();
    Ok(BatchLoss {
        mean: per_example.iter().sum::<f64>() / n,
        per_example,
        pairwise_accuracy: correct as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    /// Weight of the policy when refreshing the reference: `ref ← α·policy + (1-α)·ref`.
    pub ref_mixup_alpha: f64,
    /// Optimizer steps between reference refreshes.
    pub ref_sync_steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            ref_mixup_alpha: 1.0,
            ref_sync_steps: 512,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta = {} must be positive", self.beta)));
        }
        if !(self.ref_mixup_alpha > 0.0 && self.ref_mixup_alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ref_mixup_alpha = {} must lie in (0, 1]",
                self.ref_mixup_alpha
            )));
        }
        if self.ref_sync_steps == 0 {
            return Err(Error::InvalidConfig("ref_sync_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Words counted by the default feature map.
pub const DEFAULT_VOCABULARY: &[&str] = &[
    "giant", "tiny", "huge", "miniature", "enormous", "towering", "massive", "small", "big", "beside", "next",
    "dwarfed", "scale", "realistic",
];

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Linear scorer over candidate word counts plus candidate length.
///
/// `φ(base, candidate)[i]` is the number of occurrences of `vocabulary[i]`
/// in the candidate (lowercased, split on non-alphanumerics) and the final
/// feature is the candidate's token count divided by 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub version: u32,
    pub vocabulary: Vec<String>,
    pub weights: Vec<f64>,
}

pub const TOY_SCORER_VERSION: u32 = 1;

impl Default for ToyScorer {
    fn default() -> Self {
        Self::zeros(DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect())
    }
}

impl ToyScorer {
    pub fn zeros(vocabulary: Vec<String>) -> Self {
        let dim = vocabulary.len() + 1;
        Self {
            version: TOY_SCORER_VERSION,
            vocabulary,
            weights: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.vocabulary.len() + 1
    }

    pub fn features(&self, _base: &str, candidate: &str) -> Vec<f64> {
        let mut phi = vec![0.0; self.dim()];
        let mut length = 0usize;
        for tok in tokens(candidate) {
            length += 1;
            if let Some(i) = self.vocabulary.iter().position(|v| *v == tok) {
                phi[i] += 1.0;
            }
        }
        phi[self.vocabulary.len()] = length as f64 / 10.0;
        phi
    }

    pub fn logprob(&self, base: &str, candidate: &str) -> f64 {
        dot(&self.weights, &self.features(base, candidate))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scorer: Self = crate::error::from_str_at(&path.display().to_string(), &text)?;
        if scorer.version != TOY_SCORER_VERSION {
            return Err(Error::schema(path.display().to_string(), format!("field `version`: unsupported {}", scorer.version)));
        }
        if scorer.weights.len() != scorer.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} features",
                scorer.weights.len(),
                scorer.dim()
            )));
        }
        Ok(scorer)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Feature vectors of one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFeatures {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

pub fn triplet_features(scorer: &ToyScorer, triplets: &[PromptTriplet]) -> Vec<TripletFeatures> {
    triplets
        .iter()
        .map(|t| TripletFeatures {
            chosen: scorer.features(&t.base, &t.positive),
            rejected: scorer.features(&t.base, &t.negative),
        })
        .collect()
}

/// Preference examples for linear policy and reference weights.
pub fn linear_examples(features: &[TripletFeatures], policy: &[f64], reference: &[f64]) -> Vec<PreferenceExample> {
    features
        .iter()
        .map(|f| PreferenceExample {
            lp_pol_w: dot(policy, &f.chosen),
            lp_pol_l: dot(policy, &f.rejected),
            lp_ref_w: dot(reference, &f.chosen),
            lp_ref_l: dot(reference, &f.rejected),
        })
        .collect()
}

/// Batch loss and its analytic gradient with respect to the policy weights.
///
/// With `z = β·(w - w_ref)·(φ_w - φ_l)`, `∂ softplus(-z)/∂w = -β·σ(-z)·(φ_w - φ_l)`.
pub fn loss_and_gradient(
    features: &[TripletFeatures],
    policy: &[f64],
    reference: &[f64],
    beta: f64,
) -> Result<(BatchLoss, Vec<f64>)> {
    let loss = dpo_batch_loss(&linear_examples(features, policy, reference), beta)?;
    let mut grad = vec![0.0; policy.len()];
    let n = features.len() as f64;
    for f in features {
        let diff: Vec<f64> = f.chosen.iter().zip(&f.rejected).map(|(a, b)| a - b).collect();
        let delta: Vec<f64> = policy.iter().zip(reference).map(|(p, r)| p - r).collect();
        let z = beta * dot(&delta, &diff);
        let coeff = -beta * sigmoid(-z) / n;
        for (g, d) in grad.iter_mut().zip(&diff) {
            *g += coeff * d;
        }
    }
    Ok((loss, grad))
}

/// Gradient-descent state: trainable policy and the periodically refreshed reference.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: ToyScorer,
    pub reference: Vec<f64>,
    pub config: DpoConfig,
    pub learning_rate: f64,
    features: Vec<TripletFeatures>,
    steps_taken: usize,
}

impl Trainer {
    pub fn new(triplets: &[PromptTriplet], scorer: ToyScorer, config: DpoConfig, learning_rate: f64) -> Result<Self> {
        config.validate()?;
        if triplets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {learning_rate} must be positive")));
        }
        let features = triplet_features(&scorer, triplets);
        Ok(Self {
            reference: scorer.weights.clone(),
            policy: scorer,
            config,
            learning_rate,
            features,
            steps_taken: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn evaluate(&self) -> Result<BatchLoss> {
        dpo_batch_loss(
            &linear_examples(&self.features, &self.policy.weights, &self.reference),
            self.config.beta,
        )
    }

    /// One descent step; returns the loss before the update and whether the reference was refreshed.
    pub fn step(&mut self) -> Result<(f64, bool)> {
        let (loss, grad) =
            loss_and_gradient(&self.features, &self.policy.weights, &self.reference, self.config.beta)?;
        if !loss.mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected {
                step: self.steps_taken,
                loss: loss.mean,
            });
        }
        for (w, g) in self.policy.weights.iter_mut().zip(&grad) {
            *w -= self.learning_rate * g;
        }
        self.steps_taken += 1;
        let synced = self.steps_taken.is_multiple_of(self.config.ref_sync_steps);
        if synced {
            let alpha = self.config.ref_mixup_alpha;
            for (r, w) in self.reference.iter_mut().zip(&self.policy.weights) {
                *r = alpha * w + (1.0 - alpha) * *r;
            }
        }
        Ok((loss.mean, synced))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss before each step, then once more after the last step.
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub best: Vec<f64>,
    /// Steps after which the reference was refreshed.
    pub sync_steps: Vec<usize>,
    pub final_loss: BatchLoss,
}

/// Train `scorer` on `triplets` for `steps` full-batch gradient steps.
pub fn toy_train(
    triplets: &[PromptTriplet],
    scorer: ToyScorer,
    config: DpoConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<(ToyScorer, TrainReport)> {
    let mut trainer = Trainer::new(triplets, scorer, config, learning_rate)?;
    let mut losses = Vec::with_capacity(steps + 1);
    let mut sync_steps = Vec::new();
    for _ in 0..steps {
        let (loss, synced) = trainer.step()?;
        losses.push(loss);
        if synced {
            sync_steps.push(trainer.steps_taken());
        }
    }
    let final_loss = trainer.evaluate()?;
    if !final_loss.mean.is_finite() {
        return Err(Error::DivergenceDetected {
            step: steps,
            loss: final_loss.mean,
        });
    }
    losses.push(final_loss.mean);
    let best = losses
        .iter()
        .scan(f64::INFINITY, |m, &l| {
            *m = m.min(l);
            Some(*m)
        })
        .collect();
    Ok((
        trainer.policy,
        TrainReport {
            losses,
            best,
            sync_steps,
            final_loss,
        },
    ))
}
