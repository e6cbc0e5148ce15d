//! Evaluator-guided dataset construction.
//!
//! Every (big, small) catalog pair yields one base prompt. The rewriter
//! proposes revisions, each revision is rendered by the generator and scored
//! by the evaluator, and the score decides whether the revision is a positive
//! or a negative example. Positives become SFT pairs; per base prompt the
//! positives × negatives cross product becomes DPO triplets.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clients::{Clients, RewriteRequest, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::evaluator::{EvalItem, Evaluator, EvaluatorConfig, ImageSource};
use crate::jsonl::{append_jsonl, read_jsonl, write_jsonl};
use crate::label::ReferenceDb;
use crate::pair::ObjectPair;

/// Object names split by their usual real-world size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub big: Vec<String>,
    pub small: Vec<String>,
}

impl Catalog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let catalog: Self = crate::error::from_str_at(&path.display().to_string(), &text)?;
        catalog.validate(None)?;
        Ok(catalog)
    }

    /// Check for duplicates, overlap between the lists and, given a database, coverage.
    pub fn validate(&self, db: Option<&ReferenceDb>) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.big.iter().chain(&self.small) {
            if name.trim().is_empty() {
                return Err(Error::InvalidInput("catalog contains an empty name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("`{name}` appears more than once in the catalog")));
            }
        }
        if let Some(db) = db {
            if let Some(missing) = self.big.iter().chain(&self.small).find(|n| !db.contains_label(n)) {
                return Err(Error::InvalidInput(format!("`{missing}` has no reference embedding")));
            }
        }
        Ok(())
    }

    pub fn all_labels(&self) -> impl Iterator<Item = &String> {
        self.big.iter().chain(&self.small)
    }
}

/// One base prompt per (big, small) pair, big-major order.
pub fn make_base_prompts(catalog: &Catalog) -> Result<Vec<(ObjectPair, String)>> {
    if catalog.big.is_empty() || catalog.small.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    Ok(catalog
        .big
        .iter()
        .flat_map(|big| {
            catalog.small.iter().map(move |small| {
                let pair = ObjectPair::new(small, big);
                let prompt = pair.base_prompt();
                (pair, prompt)
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptLabel {
    Positive,
    Negative,
    Discarded,
}

/// `score >= tau_reward` is positive, `score < 0` negative, anything in between discarded.
pub fn label_prompt(score: f64, tau_reward: f64) -> PromptLabel {
    if score >= tau_reward {
        PromptLabel::Positive
    } else if score < 0.0 {
        PromptLabel::Negative
    } else {
        PromptLabel::Discarded
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub small: String,
    pub big: String,
    pub seed: u64,
    pub image_ref: String,
    pub candidate_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub base_prompt: String,
    pub revised_prompt: String,
    pub score: f64,
    pub label: PromptLabel,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTriplet {
    pub base: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SftPair {
    pub base: String,
    pub positive: String,
}

/// Positives and negatives per base prompt, deduplicated, in first-seen order.
fn group_by_base(records: &[PromptRecord]) -> Vec<(&str, Vec<&str>, Vec<&str>)> {
    let mut groups: Vec<(&str, Vec<&str>, Vec<&str>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let i = *index.entry(&r.base_prompt).or_insert_with(|| {
            groups.push((&r.base_prompt, Vec::new(), Vec::new()));
            groups.len() - 1
        });
        let list = match r.label {
            PromptLabel::Positive => &mut groups[i].1,
            PromptLabel::Negative => &mut groups[i].2,
            PromptLabel::Discarded => continue,
        };
        if !list.contains(&r.revised_prompt.as_str()) {
            list.push(&r.revised_prompt);
        }
    }
    groups
}

/// Cross product of positives and negatives per base prompt, positive-major.
///
/// A text labeled both ways (e.g. under different seeds) never pairs with
/// itself. `cap` limits the triplets emitted per base.
pub fn build_triplets(records: &[PromptRecord], cap: Option<usize>) -> Vec<PromptTriplet> {
    let mut out = Vec::new();
    for (base, positives, negatives) in group_by_base(records) {
        let per_base = positives
            .iter()
            .flat_map(|p| negatives.iter().map(move |n| (*p, *n)))
            .filter(|(p, n)| p != n)
            .take(cap.unwrap_or(usize::MAX))
            .map(|(p, n)| PromptTriplet {
                base: base.to_string(),
                positive: p.to_string(),
                negative: n.to_string(),
            });
        out.extend(per_base);
    }
    out
}

/// One (base, positive) pair per distinct positive text.
pub fn extract_sft_pairs(records: &[PromptRecord]) -> Vec<SftPair> {
    group_by_base(records)
        .into_iter()
        .flat_map(|(base, positives, _)| {
            positives.into_iter().map(move |p| SftPair {
                base: base.to_string(),
                positive: p.to_string(),
            })
        })
        .collect()
}

/// Few-shot exemplars handed to the rewriter verbatim.
///
/// File format: a `# cfsize-few-shot v1` header line, then one exemplar per
/// non-blank line; other `#` lines are comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShot {
    pub exemplars: Vec<String>,
}

pub const FEW_SHOT_HEADER: &str = "# cfsize-few-shot v1";
pub const FEW_SHOT_SLOTS: usize = 12;

impl FewShot {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(FEW_SHOT_HEADER) {
            return Err(Error::schema("few-shot file", format!("missing `{FEW_SHOT_HEADER}` header")));
        }
        let exemplars: Vec<String> = lines
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if exemplars.is_empty() || exemplars.len() > FEW_SHOT_SLOTS {
            return Err(Error::schema(
                "few-shot file",
                format!("expected 1..={FEW_SHOT_SLOTS} exemplars, found {}", exemplars.len()),
            ));
        }
        Ok(Self { exemplars })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructionConfig {
    /// Rewrites requested per base prompt.
    pub rewrites_per_base: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Generator seed for every rewrite.
    pub seed: u64,
    pub max_triplets_per_base: Option<usize>,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            rewrites_per_base: 15,
            temperature: 0.6,
            top_p: 1.0,
            seed: 42,
            max_triplets_per_base: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionError {
    pub base: String,
    pub candidate_index: Option<usize>,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionSummary {
    pub base_prompts: usize,
    pub records: usize,
    pub new_records: usize,
    pub triplets: usize,
    pub sft_pairs: usize,
    pub errors: usize,
}

/// Files written by [`Construction::run`].
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub records: PathBuf,
    pub triplets: PathBuf,
    pub sft_pairs: PathBuf,
    pub errors: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            records: dir.join("records.jsonl"),
            triplets: dir.join("triplets.jsonl"),
            sft_pairs: dir.join("sft_pairs.jsonl"),
            errors: dir.join("errors.jsonl"),
        }
    }
}

/// Everything the construction run talks to.
pub struct Construction<'a> {
    pub clients: &'a Clients,
    pub images: &'a dyn ImageSource,
    pub db: &'a ReferenceDb,
    pub eval_config: &'a EvaluatorConfig,
    pub config: &'a ConstructionConfig,
}

impl Construction<'_> {
    /// Build (or resume) a dataset in `out_dir`.
    ///
    /// `records.jsonl` is the append-only store: rewrites already scored are
    /// not requested again, and a base prompt whose rewrites are all scored
    /// issues no client calls at all. Failures are written to `errors.jsonl`
    /// and retried on the next run.
    pub fn run(&self, catalog: &Catalog, few_shot: &FewShot, out_dir: impl AsRef<Path>) -> Result<ConstructionSummary> {
        let out_dir = out_dir.as_ref();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        catalog.validate(Some(self.db))?;
        let paths = DatasetPaths::in_dir(out_dir);
        let bases = make_base_prompts(catalog)?;
        let n = self.config.rewrites_per_base;

        let mut store: Vec<PromptRecord> = if paths.records.exists() {
            read_jsonl(&paths.records)?
        } else {
            Vec::new()
        };
        let mut done: HashSet<(String, usize, u64)> = store
            .iter()
            .map(|r| (r.base_prompt.clone(), r.provenance.candidate_index, r.provenance.seed))
            .collect();
        let evaluator = Evaluator::new(self.clients, self.images, self.db, self.eval_config);
        let mut errors = Vec::new();
        let mut new_records = 0;

        for (pair, base) in &bases {
            let seed = self.config.seed;
            if (0..n).all(|i| done.contains(&(base.clone(), i, seed))) {
                continue;
            }
            let fail = |i: Option<usize>, stage: &str, e: Error| ConstructionError {
                base: base.clone(),
                candidate_index: i,
                stage: stage.to_string(),
                message: e.to_string(),
            };
            let candidates = match self.clients.rewrite(&RewriteRequest {
                version: SCHEMA_VERSION,
                base_prompt: base.clone(),
                n_candidates: n,
                temperature: self.config.temperature,
                top_p: self.config.top_p,
                few_shot: few_shot.exemplars.clone(),
            }) {
                Ok(c) => c,
                Err(e) => {
                    errors.push(fail(None, "rewrite", e));
                    continue;
                }
            };
            for (i, candidate) in candidates.iter().enumerate().take(n) {
                if done.contains(&(base.clone(), i, seed)) {
                    continue;
                }
                let image_ref = match self.clients.generate(&candidate.text, seed) {
                    Ok(r) => r,
                    Err(e) => {
                        errors.push(fail(Some(i), "generate", e));
                        continue;
                    }
                };
                let mut item = EvalItem::new(image_ref.clone(), pair);
                item.seed = Some(seed);
                let outcome = match evaluator.evaluate_image(&item) {
                    Ok(o) => o,
                    Err(e) => {
                        errors.push(fail(Some(i), "evaluate", e));
                        continue;
                    }
                };
                let record = PromptRecord {
                    base_prompt: base.clone(),
                    revised_prompt: candidate.text.clone(),
                    score: outcome.score,
                    label: label_prompt(outcome.score, self.eval_config.reward_threshold),
                    provenance: Provenance {
                        small: pair.small.clone(),
                        big: pair.big.clone(),
                        seed,
                        image_ref,
                        candidate_index: i,
                    },
                };
                append_jsonl(&paths.records, &record)?;
                done.insert((base.clone(), i, seed));
                store.push(record);
                new_records += 1;
            }
        }

        // Outputs are rebuilt from the whole store in catalog order.
        let order: HashMap<&str, usize> = bases.iter().enumerate().map(|(i, (_, b))| (b.as_str(), i)).collect();
        store.sort_by_key(|r| {
            (
                order.get(r.base_prompt.as_str()).copied().unwrap_or(usize::MAX),
                r.provenance.candidate_index,
                r.provenance.seed,
            )
        });
        for r in &mut store {
            r.label = label_prompt(r.score, self.eval_config.reward_threshold);
        }
        let triplets = build_triplets(&store, self.config.max_triplets_per_base);
        let sft = extract_sft_pairs(&store);
        write_jsonl(&paths.triplets, &triplets)?;
        write_jsonl(&paths.sft_pairs, &sft)?;
        write_jsonl(&paths.errors, &errors)?;

        Ok(ConstructionSummary {
            base_prompts: bases.len(),
            records: store.len(),
            new_records,
            triplets: triplets.len(),
            sft_pairs: sft.len(),
            errors: errors.len(),
        })
    }
}
