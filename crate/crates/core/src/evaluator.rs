//! The counterfactual-size image evaluator.
//!
//! For one generated image and an [`ObjectPair`] the evaluator:
//!
//! 1. asks the embedder for the image/base-prompt cosine similarity and picks
//!    detector thresholds from it ([`select_thresholds`]); below the secondary
//!    cutoff the image is assumed to show only one object and scoring stops;
//! 2. runs the detector once with both object names as queries;
//! 3. applies the tiny-region filter and exclusive masks;
//! 4. relabels every surviving mask by nearest reference embedding;
//! 5. scores the largest small-object area against the largest big-object
//!    area ([`score`]).
//!
//! Each refinement can be switched off through [`Refinements`] for ablations.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{Clients, DetectRequest, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::label::{compose_on_blank, nearest_label, ReferenceDb};
use crate::mask::{exclusive_masks, filter_tiny, Detection, FilterPolicy};
use crate::pair::ObjectPair;

/// Version tag of serialized [`EvalOutcome`] lines.
pub const OUTCOME_SCHEMA_VERSION: u32 = 1;

/// Stage switches. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Refinements {
    pub adaptive_thresholds: bool,
    pub label_verification: bool,
    pub exclusive_masks: bool,
    pub tiny_filter: bool,
}

impl Default for Refinements {
    fn default() -> Self {
        Self::all()
    }
}

impl Refinements {
    pub fn all() -> Self {
        Self {
            adaptive_thresholds: true,
            label_verification: true,
            exclusive_masks: true,
            tiny_filter: true,
        }
    }

    pub fn none() -> Self {
        Self {
            adaptive_thresholds: false,
            label_verification: false,
            exclusive_masks: false,
            tiny_filter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    /// Box threshold used when the image matches its description well.
    #[serde(alias = "b_l")]
    pub lower_box_threshold: f64,
    #[serde(alias = "t_l")]
    pub lower_text_threshold: f64,
    /// Box threshold used otherwise.
    #[serde(alias = "b_g")]
    pub greater_box_threshold: f64,
    #[serde(alias = "t_g")]
    pub greater_text_threshold: f64,
    /// Similarity at or above which the lower thresholds apply.
    #[serde(alias = "mu_a")]
    pub similarity_cutoff: f64,
    /// Similarity below which only one object is assumed present.
    #[serde(alias = "mu_b")]
    pub single_object_cutoff: f64,
    /// Magnitude at which size-ratio scores are clipped.
    #[serde(alias = "tau_R")]
    pub ratio_clip: f64,
    /// Penalty factor for missing objects.
    #[serde(alias = "g")]
    pub missing_penalty: f64,
    /// Scores at or above this count as successes.
    #[serde(alias = "tau_reward")]
    pub reward_threshold: f64,
    pub filter: FilterPolicy,
    pub refinements: Refinements,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            lower_box_threshold: 0.2,
            lower_text_threshold: 0.2,
            greater_box_threshold: 0.3,
            greater_text_threshold: 0.25,
            similarity_cutoff: 0.39,
            single_object_cutoff: 0.33,
            ratio_clip: 1.5,
            missing_penalty: 0.5,
            reward_threshold: 1.0,
            filter: FilterPolicy::default(),
            refinements: Refinements::all(),
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, t) in [
            ("lower_box_threshold", self.lower_box_threshold),
            ("lower_text_threshold", self.lower_text_threshold),
            ("greater_box_threshold", self.greater_box_threshold),
            ("greater_text_threshold", self.greater_text_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} = {t} must lie in (0, 1)"));
            }
        }
        if !(0.0 < self.single_object_cutoff
            && self.single_object_cutoff < self.similarity_cutoff
            && self.similarity_cutoff < 1.0)
        {
            return bad(format!(
                "need 0 < single_object_cutoff ({}) < similarity_cutoff ({}) < 1",
                self.single_object_cutoff, self.similarity_cutoff
            ));
        }
        if !(self.ratio_clip > 0.0) || !self.ratio_clip.is_finite() {
            return bad(format!("ratio_clip = {} must be positive", self.ratio_clip));
        }
        if !(self.missing_penalty > 0.0) || !self.missing_penalty.is_finite() {
            return bad(format!("missing_penalty = {} must be positive", self.missing_penalty));
        }
        if !(self.reward_threshold > 0.0 && self.reward_threshold <= self.ratio_clip) {
            return bad(format!(
                "reward_threshold = {} must lie in (0, ratio_clip]",
                self.reward_threshold
            ));
        }
        self.filter.validate()
    }

    /// Load a JSON config; absent fields keep their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = crate::error::from_str_at(&path.display().to_string(), &text)?;
        config.validate()?;
        Ok(config)
    }

    /// Lowest reachable score, assigned when both objects are missing.
    pub fn min_score(&self) -> f64 {
        -self.ratio_clip * (1.0 + self.missing_penalty).powi(2)
    }

    /// Score assigned when exactly one object is found.
    pub fn one_missing_score(&self) -> f64 {
        -self.ratio_clip * (1.0 + self.missing_penalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub single_object_mode: bool,
}

/// Pick detector thresholds from the image/text similarity.
pub fn select_thresholds(clip_sim: f64, config: &EvaluatorConfig) -> ThresholdDecision {
    let greater = ThresholdDecision {
        box_threshold: config.greater_box_threshold,
        text_threshold: config.greater_text_threshold,
        single_object_mode: false,
    };
    if !config.refinements.adaptive_thresholds {
        return greater;
    }
    let single_object_mode = clip_sim < config.single_object_cutoff;
    if clip_sim >= config.similarity_cutoff {
        ThresholdDecision {
            box_threshold: config.lower_box_threshold,
            text_threshold: config.lower_text_threshold,
            single_object_mode,
        }
    } else {
        ThresholdDecision {
            single_object_mode,
            ..greater
        }
    }
}

/// Which case of the scoring rule produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBranch {
    /// Both found and the small object is strictly larger.
    SizeCorrect,
    /// Both found, small object not larger.
    SizeIncorrect,
    OneMissing,
    BothMissing,
    /// Image/text similarity fell below the single-object cutoff; detection skipped.
    SingleObjectMode,
}

/// Score object presence and relative size.
///
/// `area_small`/`area_big` must be `Some` and non-zero exactly when the
/// matching presence flag is set.
pub fn score(
    small_present: bool,
    big_present: bool,
    area_small: Option<u64>,
    area_big: Option<u64>,
    config: &EvaluatorConfig,
) -> Result<(f64, ScoreBranch)> {
    let area_of = |present: bool, area: Option<u64>, which: &str| -> Result<Option<f64>> {
        match (present, area) {
            (true, Some(a)) if a > 0 => Ok(Some(a as f64)),
            (true, _) => Err(Error::InvalidInput(format!("{which} object present without a positive area"))),
            (false, _) => Ok(None),
        }
    };
    let small = area_of(small_present, area_small, "small")?;
    let big = area_of(big_present, area_big, "big")?;
    let tau = config.ratio_clip;
    Ok(match (small, big) {
        (Some(s), Some(b)) if s > b => ((s / b).min(tau), ScoreBranch::SizeCorrect),
        (Some(s), Some(b)) => ((-b / s).max(-tau), ScoreBranch::SizeIncorrect),
        (Some(_), None) | (None, Some(_)) => (config.one_missing_score(), ScoreBranch::OneMissing),
        (None, None) => (config.min_score(), ScoreBranch::BothMissing),
    })
}

/// One image to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: String,
    /// Reference understood by the services and the image store; defaults to `image_id`.
    #[serde(default)]
    pub image_ref: Option<String>,
    pub small: String,
    pub big: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EvalItem {
    pub fn new(image_id: impl Into<String>, pair: &ObjectPair) -> Self {
        Self {
            image_id: image_id.into(),
            image_ref: None,
            small: pair.small.clone(),
            big: pair.big.clone(),
            seed: None,
        }
    }

    pub fn image_ref(&self) -> &str {
        self.image_ref.as_deref().unwrap_or(&self.image_id)
    }

    pub fn pair(&self) -> ObjectPair {
        ObjectPair::new(&self.small, &self.big)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedDetection {
    pub label: String,
    pub raw_label: String,
    pub area: u64,
    /// Cosine similarity to the matched reference entry; absent without label verification.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub raw_label: String,
    pub area: u64,
}

/// Detections as they leave each stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub detected: Vec<StageEntry>,
    pub after_tiny_filter: Vec<StageEntry>,
    pub after_exclusive: Vec<StageEntry>,
}

fn entries(dets: &[Detection]) -> Vec<StageEntry> {
    dets.iter()
        .map(|d| StageEntry {
            raw_label: d.raw_label.clone(),
            area: d.area(),
        })
        .collect()
}

/// Full evaluator verdict for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub schema_version: u32,
    pub image_id: String,
    pub image_ref: String,
    pub small: String,
    pub big: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub score: f64,
    pub branch: ScoreBranch,
    pub small_present: bool,
    pub big_present: bool,
    pub area_small: Option<u64>,
    pub area_big: Option<u64>,
    pub clip_sim: f64,
    pub thresholds: ThresholdDecision,
    pub verified_detections: Vec<VerifiedDetection>,
    pub trace: StageTrace,
}

/// Supplies RGB pixels for an image reference.
pub trait ImageSource: Send + Sync {
    fn load(&self, image_ref: &str) -> Result<RgbImage>;
}

/// Images stored as `<dir>/<image_ref>.png`.
#[derive(Debug, Clone)]
pub struct ImageDir {
    root: PathBuf,
}

impl ImageDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, image_ref: &str) -> PathBuf {
        self.root.join(format!("{image_ref}.png"))
    }
}

impl ImageSource for ImageDir {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        if image_ref.is_empty() || image_ref.split(['/', '\\']).any(|part| part == "..") {
            return Err(Error::InvalidInput(format!("bad image reference `{image_ref}`")));
        }
        let path = self.path_for(image_ref);
        if !path.is_file() {
            return Err(Error::ImageUnavailable(image_ref.to_string()));
        }
        let img = image::open(&path).map_err(|e| Error::schema(path.display().to_string(), e))?;
        Ok(img.to_rgb8())
    }
}

/// Bundles the services, reference data and configuration one evaluation needs.
pub struct Evaluator<'a> {
    pub clients: &'a Clients,
    pub images: &'a dyn ImageSource,
    pub db: &'a ReferenceDb,
    pub config: &'a EvaluatorConfig,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        clients: &'a Clients,
        images: &'a dyn ImageSource,
        db: &'a ReferenceDb,
        config: &'a EvaluatorConfig,
    ) -> Self {
        Self {
            clients,
            images,
            db,
            config,
        }
    }

    pub fn evaluate_image(&self, item: &EvalItem) -> Result<EvalOutcome> {
        let pair = item.pair();
        let config = self.config;
        let image_ref = item.image_ref();

        let clip_sim = self.clients.clip_sim(image_ref, &pair.base_prompt())?;
        let thresholds = select_thresholds(clip_sim, config);
        let mut outcome = EvalOutcome {
            schema_version: OUTCOME_SCHEMA_VERSION,
            image_id: item.image_id.clone(),
            image_ref: image_ref.to_string(),
            small: pair.small.clone(),
            big: pair.big.clone(),
            seed: item.seed,
            score: config.one_missing_score(),
            branch: ScoreBranch::SingleObjectMode,
            small_present: false,
            big_present: false,
            area_small: None,
            area_big: None,
            clip_sim,
            thresholds,
            verified_detections: Vec::new(),
            trace: StageTrace::default(),
        };
        if thresholds.single_object_mode {
            return Ok(outcome);
        }

        let detected = self.clients.detect(&DetectRequest {
            version: SCHEMA_VERSION,
            image_ref: image_ref.to_string(),
            query_labels: pair.query_labels(),
            box_threshold: thresholds.box_threshold,
            text_threshold: thresholds.text_threshold,
        })?;
        outcome.trace.detected = entries(&detected);

        let filtered = if config.refinements.tiny_filter {
            filter_tiny(detected, &config.filter)
        } else {
            detected
        };
        outcome.trace.after_tiny_filter = entries(&filtered);

        let exclusive = if config.refinements.exclusive_masks {
            exclusive_masks(filtered)?
        } else {
            filtered
        };
        outcome.trace.after_exclusive = entries(&exclusive);

        outcome.verified_detections = self.verify(image_ref, &exclusive)?;

        let largest = |label: &str| {
            outcome
                .verified_detections
                .iter()
                .filter(|d| d.label == label && d.area > 0)
                .map(|d| d.area)
                .max()
        };
        outcome.area_small = largest(&pair.small);
        outcome.area_big = largest(&pair.big);
        outcome.small_present = outcome.area_small.is_some();
        outcome.big_present = outcome.area_big.is_some();
        let (s, branch) = score(
            outcome.small_present,
            outcome.big_present,
            outcome.area_small,
            outcome.area_big,
            config,
        )?;
        outcome.score = s;
        outcome.branch = branch;
        Ok(outcome)
    }

    fn verify(&self, image_ref: &str, detections: &[Detection]) -> Result<Vec<VerifiedDetection>> {
        if !self.config.refinements.label_verification {
            return Ok(detections
                .iter()
                .map(|d| VerifiedDetection {
                    label: d.raw_label.clone(),
                    raw_label: d.raw_label.clone(),
                    area: d.area(),
                    similarity: None,
                })
                .collect());
        }
        if detections.is_empty() {
            return Ok(Vec::new());
        }
        let image = self.images.load(image_ref)?;
        detections
            .iter()
            .map(|d| {
                let crop = compose_on_blank(&image, &d.mask)?;
                let embedding = self.clients.embed_crop(&crop)?;
                let matched = nearest_label(&embedding, self.db)?;
                Ok(VerifiedDetection {
                    label: matched.label,
                    raw_label: d.raw_label.clone(),
                    area: d.area(),
                    similarity: Some(matched.similarity),
                })
            })
            .collect()
    }

    /// Evaluate every item, at most `parallelism` at a time. Results keep input order
    /// and one failing item never aborts the rest.
    pub fn evaluate_batch(&self, items: &[EvalItem], parallelism: usize) -> Vec<Result<EvalOutcome>> {
        if items.is_empty() {
            return Vec::new();
        }
        let run = || items.par_iter().map(|item| self.evaluate_image(item)).collect();
        match rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
        {
            Ok(pool) => pool.install(run),
            Err(e) => {
                log::warn!("thread pool unavailable ({e}); evaluating sequentially");
                items.iter().map(|item| self.evaluate_image(item)).collect()
            }
        }
    }
}

/// One line of an outcomes file: either a verdict or a recorded per-item failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum OutcomeLine {
    Ok(EvalOutcome),
    Error(ItemError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub image_id: String,
    pub message: String,
}

impl OutcomeLine {
    pub fn from_result(item: &EvalItem, result: Result<EvalOutcome>) -> Self {
        match result {
            Ok(o) => OutcomeLine::Ok(o),
            Err(e) => OutcomeLine::Error(ItemError {
                image_id: item.image_id.clone(),
                message: e.to_string(),
            }),
        }
    }

    pub fn outcome(&self) -> Option<&EvalOutcome> {
        match self {
            OutcomeLine::Ok(o) => Some(o),
            OutcomeLine::Error(_) => None,
        }
    }
}

/// Serialize outcome lines as JSONL.
pub fn outcomes_to_jsonl(lines: &[OutcomeLine]) -> Result<String> {
    crate::jsonl::to_jsonl(lines)
}

/// Parse an outcomes JSONL file.
pub fn read_outcomes(path: impl AsRef<Path>) -> Result<Vec<OutcomeLine>> {
    crate::jsonl::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> EvaluatorConfig {
        EvaluatorConfig::default()
    }

    #[test]
    fn defaults_are_valid() {
        cfg().validate().unwrap();
        assert_relative_eq!(cfg().min_score(), -3.375);
        assert_relative_eq!(cfg().one_missing_score(), -2.25);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg();
        c.single_object_cutoff = 0.5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.reward_threshold = 2.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.missing_penalty = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.greater_box_threshold = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_aliases_parse() {
        let c: EvaluatorConfig = serde_json::from_str(r#"{"tau_reward": 1.5, "mu_a": 0.4}"#).unwrap();
        assert_eq!(c.reward_threshold, 1.5);
        assert_eq!(c.similarity_cutoff, 0.4);
        assert_eq!(c.ratio_clip, 1.5);
        assert!(serde_json::from_str::<EvaluatorConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn threshold_branches() {
        let d = select_thresholds(0.40, &cfg());
        assert_eq!((d.box_threshold, d.text_threshold, d.single_object_mode), (0.2, 0.2, false));
        let d = select_thresholds(0.39, &cfg());
        assert_eq!((d.box_threshold, d.text_threshold), (0.2, 0.2));
        let d = select_thresholds(0.35, &cfg());
        assert_eq!((d.box_threshold, d.text_threshold, d.single_object_mode), (0.3, 0.25, false));
        let d = select_thresholds(0.30, &cfg());
        assert_eq!((d.box_threshold, d.text_threshold, d.single_object_mode), (0.3, 0.25, true));
    }

    #[test]
    fn fixed_thresholds_without_adaptation() {
        let mut c = cfg();
        c.refinements.adaptive_thresholds = false;
        for sim in [0.40, 0.35, 0.30, -1.0] {
            let d = select_thresholds(sim, &c);
            assert_eq!((d.box_threshold, d.text_threshold, d.single_object_mode), (0.3, 0.25, false));
        }
    }

    #[test]
    fn score_table() {
        let c = cfg();
        let s = |sp, bp, a, b| score(sp, bp, a, b, &c).unwrap().0;
        assert_relative_eq!(s(true, true, Some(3000), Some(1000)), 1.5, epsilon = 1e-12);
        assert_relative_eq!(s(true, true, Some(1200), Some(1000)), 1.2, epsilon = 1e-12);
        assert_relative_eq!(s(true, true, Some(900), Some(1000)), -1000.0 / 900.0, epsilon = 1e-12);
        assert_relative_eq!(s(true, true, Some(400), Some(1000)), -1.5, epsilon = 1e-12);
        assert_relative_eq!(s(true, false, Some(3000), None), -2.25, epsilon = 1e-12);
        assert_relative_eq!(s(false, true, None, Some(3000)), -2.25, epsilon = 1e-12);
        assert_relative_eq!(s(false, false, None, None), -3.375, epsilon = 1e-12);
    }

    #[test]
    fn equal_areas_score_incorrect() {
        let (s, b) = score(true, true, Some(1000), Some(1000), &cfg()).unwrap();
        assert_eq!(b, ScoreBranch::SizeIncorrect);
        assert_relative_eq!(s, -1.0);
    }

    #[test]
    fn score_rejects_missing_area() {
        assert!(matches!(score(true, false, None, None, &cfg()), Err(Error::InvalidInput(_))));
        assert!(matches!(score(true, true, Some(10), Some(0), &cfg()), Err(Error::InvalidInput(_))));
    }
}
