//! Best-of-N selection over rewriter candidates.

use serde::{Deserialize, Serialize};

use crate::clients::{Clients, RewriteRequest, ScoringModel, SCHEMA_VERSION};
use crate::dpo::ToyScorer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub base_prompt: String,
    pub candidates: Vec<Candidate>,
}

/// Index and candidate with the highest score; ties go to the lowest index.
pub fn select_best(set: &CandidateSet) -> Result<(usize, &Candidate)> {
    if set.candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if let Some(i) = set.candidates.iter().position(|c| !c.score.is_finite()) {
        return Err(Error::NonFinite(format!("candidate {i} score {}", set.candidates[i].score)));
    }
    let mut best = 0;
    for (i, c) in set.candidates.iter().enumerate().skip(1) {
        if c.score > set.candidates[best].score {
            best = i;
        }
    }
    Ok((best, &set.candidates[best]))
}

/// Anything that can score a candidate rewrite of a base prompt.
pub trait CandidateScorer: Sync {
    fn score(&self, base_prompt: &str, candidate: &str) -> Result<f64>;
}

impl CandidateScorer for ToyScorer {
    fn score(&self, base_prompt: &str, candidate: &str) -> Result<f64> {
        Ok(self.logprob(base_prompt, candidate))
    }
}

/// Scores candidates by their total logprob under the remote ranker model.
pub struct RemoteRanker<'a> {
    pub clients: &'a Clients,
}

impl CandidateScorer for RemoteRanker<'_> {
    fn score(&self, base_prompt: &str, candidate: &str) -> Result<f64> {
        self.clients.score_logprob(ScoringModel::Ranker, base_prompt, candidate)
    }
}

/// Scores every candidate equally.
pub struct ConstantScorer(pub f64);

impl CandidateScorer for ConstantScorer {
    fn score(&self, _: &str, _: &str) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_candidates: usize,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_candidates: 15,
            temperature: 0.6,
            top_p: 1.0,
        }
    }
}

/// Audit record of one ranking decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrompt {
    pub base_prompt: String,
    pub candidates: Vec<Candidate>,
    pub selected_index: usize,
    pub selected: String,
}

/// Sample candidates from the rewriter, score each with `ranker`, keep the best.
pub fn generate_and_rank(
    base_prompt: &str,
    clients: &Clients,
    ranker: &dyn CandidateScorer,
    sampling: &SamplingConfig,
) -> Result<RankedPrompt> {
    if sampling.n_candidates == 0 {
        return Err(Error::InvalidConfig("n_candidates must be at least 1".into()));
    }
    let rewrites = clients.rewrite(&RewriteRequest {
        version: SCHEMA_VERSION,
        base_prompt: base_prompt.to_string(),
        n_candidates: sampling.n_candidates,
        temperature: sampling.temperature,
        top_p: sampling.top_p,
        few_shot: Vec::new(),
    })?;
    let candidates = rewrites
        .into_iter()
        .map(|r| {
            let score = ranker.score(base_prompt, &r.text)?;
            Ok(Candidate { text: r.text, score })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = CandidateSet {
        base_prompt: base_prompt.to_string(),
        candidates,
    };
    let (selected_index, best) = select_best(&set)?;
    let selected = best.text.clone();
    Ok(RankedPrompt {
        base_prompt: set.base_prompt,
        candidates: set.candidates,
        selected_index,
        selected,
    })
}
