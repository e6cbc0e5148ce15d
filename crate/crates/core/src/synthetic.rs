//! A deterministic stand-in for the remote services.
//!
//! Scenes are flat-colored rectangles on a gray background, one color per
//! object label. The detector replays per-scene proposals, the embedder is a
//! color histogram and the generator derives a scene from the words of the
//! prompt. Everything is a pure function of the request, so recorded fixtures
//! are reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clients::{
    ClipSimRequest, ClipSimResponse, DetectRequest, DetectResponse, EmbedCropRequest, EmbedCropResponse, Endpoint,
    GenerateRequest, GenerateResponse, RecordingTransport, RewriteCandidate, RewriteRequest, RewriteResponse,
    ScoreRequest, ScoreResponse, Transport, SCHEMA_VERSION,
};
use crate::clients::Clients;
use crate::dataset::{Catalog, Construction, ConstructionConfig, ConstructionSummary, FewShot, FEW_SHOT_HEADER, FEW_SHOT_SLOTS};
use crate::error::{from_value_at, Error, Result};
use crate::evaluator::{outcomes_to_jsonl, EvalItem, Evaluator, EvaluatorConfig, ImageDir, ImageSource, OutcomeLine};
use crate::jsonl::write_jsonl;
use crate::label::{EmbeddingEntry, ReferenceDb};
use crate::mask::{BoundingBox, Detection, DetectionSet, Mask};
use crate::pair::ObjectPair;
use crate::report::{render_ablation, run_ablation, AnnotatedCorpus, HumanAnnotation, ReportFormat};

pub const SCENE_SIZE: u32 = 256;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];
pub const BACKGROUND_LABEL: &str = "background";

/// Words that make a generated scene show the sizes swapped.
const STRONG_WORDS: [&str; 6] = ["giant", "huge", "enormous", "towering", "massive", "colossal"];

/// Half-open pixel rectangle `[x0, y0, x1, y1)`.
pub type Rect = [u32; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub rect: Rect,
}

/// What the detector reports for a scene when its confidence clears both thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub raw_label: String,
    pub confidence: f64,
    /// The mask is the union of these rectangles.
    pub rects: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub pair: ObjectPair,
    pub clip_sim: f64,
    pub regions: Vec<Region>,
    pub proposals: Vec<Proposal>,
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

fn dist2(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(b).map(|(&x, y)| (x as i32 - y as i32).pow(2) as u32).sum()
}

fn rect_mask(w: u32, h: u32, rects: &[Rect]) -> Mask {
    let mut m = Mask::empty(w, h);
    for r in rects {
        for x in r[0]..r[2].min(w) {
            for y in r[1]..r[3].min(h) {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn rects_bbox(rects: &[Rect]) -> BoundingBox {
    let x0 = rects.iter().map(|r| r[0]).min().unwrap_or(0);
    let y0 = rects.iter().map(|r| r[1]).min().unwrap_or(0);
    let x1 = rects.iter().map(|r| r[2]).max().unwrap_or(0);
    let y1 = rects.iter().map(|r| r[3]).max().unwrap_or(0);
    BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GenKind {
    Swapped,
    Ordinary,
    Lone,
}

impl GenKind {
    fn code(self) -> &'static str {
        match self {
            GenKind::Swapped => "swapped",
            GenKind::Ordinary => "ordinary",
            GenKind::Lone => "lone",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "swapped" => Some(GenKind::Swapped),
            "ordinary" => Some(GenKind::Ordinary),
            "lone" => Some(GenKind::Lone),
            _ => None,
        }
    }
}

/// Simulated detector, embedder, generator, rewriter and scorer over a fixed label set.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    labels: Vec<String>,
    colors: Vec<[u8; 3]>,
    scenes: BTreeMap<String, Scene>,
}

impl SyntheticWorld {
    pub fn new(labels: &[impl AsRef<str>]) -> Result<Self> {
        let labels: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        if labels.is_empty() {
            return Err(Error::InvalidInput("synthetic world needs at least one label".into()));
        }
        if labels.iter().any(|l| l == BACKGROUND_LABEL || l.trim().is_empty()) {
            return Err(Error::InvalidInput(format!("`{BACKGROUND_LABEL}` and empty names are reserved")));
        }
        let golden = 0.618_033_988_749_895;
        let colors = (0..labels.len())
            .map(|i| hsv((i as f64 * golden).fract(), 0.85, 0.9 - 0.2 * ((i / 7) % 3) as f64))
            .collect();
        Ok(Self {
            labels,
            colors,
            scenes: BTreeMap::new(),
        })
    }

    /// Register a hand-built scene under `image_ref`.
    pub fn insert_scene(&mut self, image_ref: impl Into<String>, scene: Scene) -> Result<()> {
        for r in &scene.regions {
            self.index_of(&r.label)?;
        }
        self.scenes.insert(image_ref.into(), scene);
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn scene_refs(&self) -> impl Iterator<Item = &String> {
        self.scenes.keys()
    }

    fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::InvalidInput(format!("`{label}` is not a synthetic label")))
    }

    pub fn color(&self, label: &str) -> Result<[u8; 3]> {
        Ok(self.colors[self.index_of(label)?])
    }

    /// One-hot reference entries per label, plus the background.
    pub fn reference_entries(&self) -> Vec<EmbeddingEntry> {
        let dim = self.labels.len() + 1;
        self.labels
            .iter()
            .map(String::as_str)
            .chain([BACKGROUND_LABEL])
            .enumerate()
            .map(|(i, label)| {
                let mut vector = vec![0.0; dim];
                vector[i] = 1.0;
                EmbeddingEntry {
                    label: label.to_string(),
                    vector,
                }
            })
            .collect()
    }

    pub fn reference_db(&self) -> Result<ReferenceDb> {
        ReferenceDb::from_entries(self.reference_entries())
    }

    pub fn scene(&self, image_ref: &str) -> Result<Scene> {
        if let Some(s) = self.scenes.get(image_ref) {
            return Ok(s.clone());
        }
        self.generated_scene(image_ref)
            .ok_or_else(|| Error::ImageUnavailable(image_ref.to_string()))
    }

    pub fn render(&self, scene: &Scene) -> Result<RgbImage> {
        let mut img = RgbImage::from_pixel(SCENE_SIZE, SCENE_SIZE, Rgb(BACKGROUND));
        for region in &scene.regions {
            let c = Rgb(self.color(&region.label)?);
            let [x0, y0, x1, y1] = region.rect;
            for x in x0..x1.min(SCENE_SIZE) {
                for y in y0..y1.min(SCENE_SIZE) {
                    img.put_pixel(x, y, c);
                }
            }
        }
        Ok(img)
    }

    /// Color histogram of the non-white pixels, unit-normalized.
    pub fn embed(&self, pixels: &RgbImage) -> Vec<f64> {
        let dim = self.labels.len() + 1;
        let mut hist = vec![0.0; dim];
        for p in pixels.pixels() {
            if p.0 == [255, 255, 255] {
                continue;
            }
            let mut best = (dim - 1, dist2(p.0, BACKGROUND));
            for (i, &c) in self.colors.iter().enumerate() {
                let d = dist2(p.0, c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            hist[best.0] += 1.0;
        }
        let norm = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            hist[dim - 1] = 1.0;
            return hist;
        }
        hist.iter().map(|x| x / norm).collect()
    }

    /// Labels mentioned in `text` at word boundaries, in order of first mention.
    fn mentioned(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let bytes = lower.as_bytes();
        let boundary = |i: usize| i >= bytes.len() || !bytes[i].is_ascii_alphanumeric();
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for (li, label) in self.labels.iter().enumerate() {
            let needle = label.to_lowercase();
            let mut from = 0;
            while let Some(off) = lower[from..].find(&needle) {
                let start = from + off;
                let end = start + needle.len();
                if (start == 0 || boundary(start - 1)) && boundary(end) {
                    hits.push((start, li));
                    break;
                }
                from = start + 1;
            }
        }
        hits.sort();
        hits.into_iter().map(|(_, li)| li).collect()
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<String> {
        let seed_s = seed.to_string();
        let h = stable_hash(&[prompt, &seed_s]);
        let found = self.mentioned(prompt);
        let words: Vec<String> = prompt
            .to_lowercase()
            .split(|c: char| !c.is_ascii_alphanumeric())
            .map(str::to_string)
            .collect();
        let (kind, small, big) = match found.as_slice() {
            [] => return Err(Error::InvalidInput("prompt names no known object".into())),
            [only] => (GenKind::Lone, *only, None),
            [s, b, ..] => {
                let strong = words.iter().any(|w| STRONG_WORDS.contains(&w.as_str()));
                // Occasionally the renderer ignores the prompt.
                let kind = match (strong, h.is_multiple_of(7)) {
                    (true, false) | (false, true) => GenKind::Swapped,
                    _ => GenKind::Ordinary,
                };
                (kind, *s, Some(*b))
            }
        };
        let big = big.map_or_else(|| "x".to_string(), |b| b.to_string());
        Ok(format!("gen-{}-{small}-{big}-{:016x}", kind.code(), h))
    }

    fn generated_scene(&self, image_ref: &str) -> Option<Scene> {
        let mut parts = image_ref.strip_prefix("gen-")?.split('-');
        let kind = GenKind::parse(parts.next()?)?;
        let small: usize = parts.next()?.parse().ok()?;
        let big = parts.next()?;
        let h = u64::from_str_radix(parts.next()?, 16).ok()?;
        if parts.next().is_some() || small >= self.labels.len() {
            return None;
        }
        let big: Option<usize> = match big {
            "x" => None,
            b => Some(b.parse().ok().filter(|&b: &usize| b < self.labels.len())?),
        };
        let small_label = self.labels[small].clone();
        let big_label = big.map(|b| self.labels[b].clone()).unwrap_or_default();

        let large = 130 + (h % 40) as u32;
        let little = 40 + ((h >> 8) % 30) as u32;
        let conf = 0.55 + ((h >> 16) % 30) as f64 / 100.0;
        let mut regions = Vec::new();
        match kind {
            GenKind::Lone => regions.push(Region {
                label: small_label.clone(),
                rect: [60, 60, 160, 160],
            }),
            GenKind::Swapped | GenKind::Ordinary => {
                let (s_side, b_side) = if kind == GenKind::Swapped {
                    (large, little)
                } else {
                    (little, large)
                };
                regions.push(Region {
                    label: small_label.clone(),
                    rect: [8, 8, 8 + s_side, 8 + s_side],
                });
                let end = SCENE_SIZE - 8;
                regions.push(Region {
                    label: big_label.clone(),
                    rect: [end - b_side, end - b_side, end, end],
                });
            }
        }
        let proposals = regions
            .iter()
            .map(|r| Proposal {
                raw_label: r.label.clone(),
                confidence: conf,
                rects: vec![r.rect],
            })
            .collect();
        let clip_sim = match kind {
            GenKind::Lone => 0.30,
            _ => 0.40 + ((h >> 24) % 10) as f64 / 100.0,
        };
        Some(Scene {
            pair: ObjectPair::new(small_label, big_label),
            clip_sim,
            regions,
            proposals,
        })
    }

    fn detect(&self, req: &DetectRequest) -> Result<DetectResponse> {
        let scene = self.scene(&req.image_ref)?;
        let dets: Vec<Detection> = scene
            .proposals
            .iter()
            .filter(|p| p.confidence >= req.box_threshold && p.confidence >= req.text_threshold)
            .filter(|p| req.query_labels.contains(&p.raw_label))
            .map(|p| Detection {
                raw_label: p.raw_label.clone(),
                confidence: p.confidence,
                bbox: rects_bbox(&p.rects),
                mask: rect_mask(SCENE_SIZE, SCENE_SIZE, &p.rects),
            })
            .collect();
        Ok(DetectResponse {
            version: SCHEMA_VERSION,
            set: DetectionSet::from_detections(&req.image_ref, SCENE_SIZE, SCENE_SIZE, &dets),
        })
    }

    fn clip_sim(&self, req: &ClipSimRequest) -> Result<f64> {
        let scene = self.scene(&req.image_ref)?;
        let mentioned = self.mentioned(&req.text);
        let names_scene = scene
            .regions
            .iter()
            .all(|r| self.index_of(&r.label).is_ok_and(|i| mentioned.contains(&i)));
        Ok(if names_scene { scene.clip_sim } else { 0.1 })
    }

    fn rewrite(&self, req: &RewriteRequest) -> Result<Vec<RewriteCandidate>> {
        const TEMPLATES: [&str; 8] = [
            "A giant {small} towering over a tiny {big}, photorealistic.",
            "A {small} next to a {big}.",
            "An enormous {small} standing beside a miniature {big}.",
            "A photo of a {small} near a {big}.",
            "A huge {small} dwarfing a {big} on a wooden table.",
            "A close-up of a single {small} on a plain background.",
            "A massive {small} and a small {big} side by side, realistic lighting.",
            "A small {small} and a big {big} in a field.",
        ];
        let pair = ObjectPair::parse_base_prompt(&req.base_prompt)
            .ok_or_else(|| Error::InvalidInput(format!("not a base prompt: `{}`", req.base_prompt)))?;
        let offset = (stable_hash(&[&req.base_prompt]) % TEMPLATES.len() as u64) as usize;
        Ok((0..req.n_candidates)
            .map(|i| {
                let t = TEMPLATES[(offset + i) % TEMPLATES.len()];
                let mut text = t.replace("{small}", &pair.small).replace("{big}", &pair.big);
                let cycle = i / TEMPLATES.len();
                if cycle > 0 {
                    text.push_str(&format!(" Variation {cycle}."));
                }
                let total_logprob = -0.5 * text.split_whitespace().count() as f64;
                RewriteCandidate { text, total_logprob }
            })
            .collect())
    }

    fn score_logprob(&self, req: &ScoreRequest) -> f64 {
        let words: Vec<String> = req
            .completion
            .to_lowercase()
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        let strong = words.iter().filter(|w| STRONG_WORDS.contains(&w.as_str())).count();
        -0.3 * words.len() as f64 + 1.5 * strong as f64
    }
}

fn parse<T: serde::de::DeserializeOwned>(endpoint: Endpoint, body: &Value) -> Result<T> {
    let version = body.get("version").and_then(Value::as_u64);
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::schema(
            format!("{} request", endpoint.name()),
            "field `version`: missing or unsupported",
        ));
    }
    from_value_at(&format!("{} request", endpoint.name()), body.clone())
}

impl Transport for SyntheticWorld {
    fn call(&self, endpoint: Endpoint, body: &Value) -> Result<Value> {
        let v = match endpoint {
            Endpoint::Detect => serde_json::to_value(self.detect(&parse(endpoint, body)?)?)?,
            Endpoint::EmbedCrop => {
                let req: EmbedCropRequest = parse(endpoint, body)?;
                let crop = req.to_crop()?;
                serde_json::to_value(EmbedCropResponse {
                    version: SCHEMA_VERSION,
                    vector: self.embed(crop.image()),
                })?
            }
            Endpoint::ClipSim => serde_json::to_value(ClipSimResponse {
                version: SCHEMA_VERSION,
                similarity: self.clip_sim(&parse(endpoint, body)?)?,
            })?,
            Endpoint::Generate => {
                let req: GenerateRequest = parse(endpoint, body)?;
                serde_json::to_value(GenerateResponse {
                    version: SCHEMA_VERSION,
                    image_ref: self.generate(&req.prompt, req.seed)?,
                })?
            }
            Endpoint::Rewrite => serde_json::to_value(RewriteResponse {
                version: SCHEMA_VERSION,
                candidates: self.rewrite(&parse(endpoint, body)?)?,
            })?,
            Endpoint::ScoreLogprob => serde_json::to_value(ScoreResponse {
                version: SCHEMA_VERSION,
                total_logprob: self.score_logprob(&parse(endpoint, body)?),
            })?,
        };
        Ok(v)
    }
}

impl ImageSource for SyntheticWorld {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        self.render(&self.scene(image_ref)?)
    }
}

/// Scene archetypes of the ablation corpus. Each one is decided correctly
/// only while a particular refinement is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Archetype {
    /// Sizes clearly swapped; every variant gets it right.
    CleanSwapped,
    /// Ordinary sizes; every variant gets it right.
    CleanOrdinary,
    /// Small object detected only at low confidence.
    LowConfidence,
    /// Image does not match the prompt although both objects are drawn.
    OffPrompt,
    /// Detector swaps the labels on a correctly drawn image.
    SwappedLabels,
    /// Detector swaps the labels on an ordinary image.
    SwappedLabelsOrdinary,
    /// Extra mask spanning both objects.
    OverlappingMask,
    /// Sliver of the missing object hallucinated on the background.
    TinySliver,
    /// Small object the detector barely sees.
    Missed,
}

const ABLATION_PAIRS: [(&str, &str); 2] = [("button", "walrus"), ("mouse", "elephant")];

fn ablation_plan() -> Vec<(Archetype, usize)> {
    use Archetype::*;
    [
        (CleanSwapped, 5),
        (CleanOrdinary, 4),
        (LowConfidence, 2),
        (OffPrompt, 2),
        (SwappedLabels, 2),
        (SwappedLabelsOrdinary, 1),
        (OverlappingMask, 2),
        (TinySliver, 2),
        (Missed, 1),
    ]
    .into_iter()
    .flat_map(|(a, n)| (0..n).map(move |j| (a, j)))
    .collect()
}

fn ablation_scene(arch: Archetype, j: usize) -> (Scene, bool) {
    use Archetype::*;
    let (small, big) = ABLATION_PAIRS[j % ABLATION_PAIRS.len()];
    let jitter = 4 * j as u32;
    let large: Rect = [10, 10, 160 + jitter, 160 + jitter];
    let little: Rect = [190, 190, 246, 246];
    let region = |label: &str, rect: Rect| Region {
        label: label.to_string(),
        rect,
    };
    let prop = |label: &str, confidence: f64, rects: Vec<Rect>| Proposal {
        raw_label: label.to_string(),
        confidence,
        rects,
    };
    let mut clip_sim = 0.45;
    let (regions, proposals, human) = match arch {
        CleanSwapped => {
            let mut props = vec![prop(small, 0.6, vec![large]), prop(big, 0.6, vec![little])];
            if j.is_multiple_of(2) {
                props.push(prop(small, 0.22, vec![[196, 4, 250, 58]]));
            }
            (vec![region(small, large), region(big, little)], props, true)
        }
        CleanOrdinary => (
            vec![region(small, little), region(big, large)],
            vec![prop(small, 0.6, vec![little]), prop(big, 0.6, vec![large])],
            false,
        ),
        LowConfidence => (
            vec![region(small, large), region(big, little)],
            vec![prop(small, 0.25, vec![large]), prop(big, 0.6, vec![little])],
            true,
        ),
        OffPrompt => {
            clip_sim = 0.30;
            (
                vec![region(small, large), region(big, little)],
                vec![prop(small, 0.6, vec![large]), prop(big, 0.6, vec![little])],
                false,
            )
        }
        SwappedLabels => (
            vec![region(small, large), region(big, little)],
            vec![prop(big, 0.6, vec![large]), prop(small, 0.6, vec![little])],
            true,
        ),
        SwappedLabelsOrdinary => (
            vec![region(small, little), region(big, large)],
            vec![prop(big, 0.6, vec![little]), prop(small, 0.6, vec![large])],
            false,
        ),
        OverlappingMask => (
            vec![region(small, large), region(big, little)],
            vec![
                prop(small, 0.6, vec![large]),
                prop(big, 0.6, vec![little]),
                prop(big, 0.5, vec![large, little]),
            ],
            true,
        ),
        TinySliver => (
            vec![region(small, large)],
            vec![prop(small, 0.6, vec![large]), prop(big, 0.6, vec![[200, 200, 220, 220]])],
            false,
        ),
        Missed => (
            vec![region(small, large), region(big, little)],
            vec![prop(small, 0.1, vec![large]), prop(big, 0.6, vec![little])],
            true,
        ),
    };
    (
        Scene {
            pair: ObjectPair::new(small, big),
            clip_sim,
            regions,
            proposals,
        },
        human,
    )
}

/// The annotated ablation corpus as an in-memory world.
pub fn ablation_world() -> Result<(SyntheticWorld, AnnotatedCorpus)> {
    let labels: Vec<&str> = ABLATION_PAIRS.iter().flat_map(|&(s, b)| [s, b]).collect();
    let mut world = SyntheticWorld::new(&labels)?;
    let mut items = Vec::new();
    let mut annotations = Vec::new();
    for (k, (arch, j)) in ablation_plan().into_iter().enumerate() {
        let (scene, human_label) = ablation_scene(arch, j);
        let id = format!("scene{k:02}");
        items.push(EvalItem::new(id.clone(), &scene.pair));
        annotations.push(HumanAnnotation {
            image_id: id.clone(),
            human_label,
        });
        world.insert_scene(id, scene)?;
    }
    Ok((world, AnnotatedCorpus { items, annotations }))
}

/// Paths inside a written corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub images: std::path::PathBuf,
    pub fixtures: std::path::PathBuf,
    pub items: std::path::PathBuf,
    pub annotations: std::path::PathBuf,
    pub db: std::path::PathBuf,
    pub golden_outcomes: std::path::PathBuf,
    pub ablation_csv: std::path::PathBuf,
}

impl CorpusLayout {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            images: d.join("images"),
            fixtures: d.join("fixtures"),
            items: d.join("items.jsonl"),
            annotations: d.join("annotations.jsonl"),
            db: d.join("db.jsonl"),
            golden_outcomes: d.join("golden_outcomes.jsonl"),
            ablation_csv: d.join("ablation.csv"),
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Write the ablation corpus: PNG images, items, annotations, reference
/// database, recorded fixtures for all four variants, golden outcomes of the
/// default configuration and the resulting ablation table.
pub fn write_ablation_corpus(dir: impl AsRef<Path>) -> Result<CorpusLayout> {
    let layout = CorpusLayout::in_dir(&dir);
    let (world, corpus) = ablation_world()?;
    std::fs::create_dir_all(&layout.images).map_err(|e| Error::io(&layout.images, e))?;
    for item in &corpus.items {
        let img = world.load(item.image_ref())?;
        save_png(&img, &layout.images.join(format!("{}.png", item.image_ref())))?;
    }
    write_jsonl(&layout.items, &corpus.items)?;
    write_jsonl(&layout.annotations, &corpus.annotations)?;
    write_jsonl(&layout.db, &world.reference_entries())?;

    let db = ReferenceDb::load(&layout.db)?;
    let images = ImageDir::new(&layout.images);
    let clients = Clients::new(RecordingTransport::new(world, &layout.fixtures)?);
    let config = EvaluatorConfig::default();

    let table = run_ablation(&corpus, &clients, &images, &db, &config, 1)?;
    let text = render_ablation(&table, ReportFormat::Csv)?;
    std::fs::write(&layout.ablation_csv, text).map_err(|e| Error::io(&layout.ablation_csv, e))?;

    let evaluator = Evaluator::new(&clients, &images, &db, &config);
    let lines: Vec<OutcomeLine> = corpus
        .items
        .iter()
        .zip(evaluator.evaluate_batch(&corpus.items, 1))
        .map(|(item, r)| OutcomeLine::from_result(item, r))
        .collect();
    std::fs::write(&layout.golden_outcomes, outcomes_to_jsonl(&lines)?)
        .map_err(|e| Error::io(&layout.golden_outcomes, e))?;
    Ok(layout)
}

/// Renders synthetic images on demand and keeps a PNG copy of each one.
struct SavingImages<'a> {
    world: &'a SyntheticWorld,
    dir: std::path::PathBuf,
}

impl ImageSource for SavingImages<'_> {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        let img = self.world.load(image_ref)?;
        save_png(&img, &self.dir.join(format!("{image_ref}.png")))?;
        Ok(img)
    }
}

pub const SAMPLE_FEW_SHOT: [&str; FEW_SHOT_SLOTS] = [
    "A giant strawberry towering over a tiny tractor in a sunny field.",
    "An enormous bee resting beside a miniature house.",
    "A huge teacup next to a small sailboat on calm water.",
    "A massive ladybug perched on a tiny car.",
    "A colossal pencil leaning against a miniature skyscraper.",
    "A giant snail crossing a road next to a tiny bus.",
    "An enormous apple sitting beside a miniature horse.",
    "A huge key lying next to a tiny castle.",
    "A massive butterfly hovering over a small airplane.",
    "A towering mushroom next to a miniature lighthouse.",
    "A giant dice beside a tiny elephant on a table.",
    "An enormous spoon next to a small rowing boat.",
];

/// Catalog used by the sample dataset corpus.
pub fn sample_catalog() -> Catalog {
    Catalog {
        big: vec!["elephant".into(), "walrus".into(), "bus".into()],
        small: vec!["button".into(), "mouse".into(), "teacup".into()],
    }
}

/// Paths inside a written dataset corpus directory.
#[derive(Debug, Clone)]
pub struct DatasetCorpusLayout {
    pub catalog: std::path::PathBuf,
    pub few_shot: std::path::PathBuf,
    pub db: std::path::PathBuf,
    pub fixtures: std::path::PathBuf,
    pub images: std::path::PathBuf,
    pub expected: std::path::PathBuf,
}

impl DatasetCorpusLayout {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            catalog: d.join("catalog.json"),
            few_shot: d.join("few_shot.txt"),
            db: d.join("db.jsonl"),
            fixtures: d.join("fixtures"),
            images: d.join("images"),
            expected: d.join("expected"),
        }
    }
}

/// Run dataset construction against the synthetic world for `catalog` and
/// store its inputs, fixtures, images and outputs under `dir`.
pub fn write_dataset_corpus(
    dir: impl AsRef<Path>,
    catalog: &Catalog,
    config: &ConstructionConfig,
) -> Result<(DatasetCorpusLayout, ConstructionSummary)> {
    let layout = DatasetCorpusLayout::in_dir(&dir);
    let world = SyntheticWorld::new(&catalog.all_labels().collect::<Vec<_>>())?;
    std::fs::create_dir_all(&layout.images).map_err(|e| Error::io(&layout.images, e))?;
    let catalog_json = serde_json::to_string_pretty(catalog)? + "\n";
    std::fs::write(&layout.catalog, catalog_json).map_err(|e| Error::io(&layout.catalog, e))?;
    let few_shot_text = std::iter::once(FEW_SHOT_HEADER)
        .chain(SAMPLE_FEW_SHOT)
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    std::fs::write(&layout.few_shot, &few_shot_text).map_err(|e| Error::io(&layout.few_shot, e))?;
    write_jsonl(&layout.db, &world.reference_entries())?;

    let db = ReferenceDb::load(&layout.db)?;
    let few_shot = FewShot::parse(&few_shot_text)?;
    let images = SavingImages {
        world: &world,
        dir: layout.images.clone(),
    };
    let clients = Clients::new(RecordingTransport::new(world.clone(), &layout.fixtures)?);
    let eval_config = EvaluatorConfig::default();
    let summary = Construction {
        clients: &clients,
        images: &images,
        db: &db,
        eval_config: &eval_config,
        config,
    }
    .run(catalog, &few_shot, &layout.expected)?;
    Ok((layout, summary))
}
