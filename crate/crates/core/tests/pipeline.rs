#![allow(clippy::type_complexity)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::Value;

use cfsize_core::clients::{Clients, Endpoint, Transport};
use cfsize_core::dataset::{Catalog, Construction, ConstructionConfig, DatasetPaths, FewShot, PromptRecord};
use cfsize_core::dpo::ToyScorer;
use cfsize_core::evaluator::{EvalItem, Evaluator, EvaluatorConfig, ImageDir, Refinements, ScoreBranch};
use cfsize_core::jsonl::read_jsonl;
use cfsize_core::label::ReferenceDb;
use cfsize_core::ranking::{generate_and_rank, ConstantScorer, RemoteRanker, SamplingConfig};
use cfsize_core::report::{run_ablation, AblationVariant, AnnotatedCorpus, HumanAnnotation};
use cfsize_core::synthetic::{DatasetCorpusLayout, Proposal, Region, Scene, SyntheticWorld};
use cfsize_core::{Error, ObjectPair};

/// Counts calls per endpoint and fails selected ones.
struct Probe<T> {
    inner: T,
    calls: Mutex<Vec<Endpoint>>,
    fail_generate_at: Option<usize>,
    generated: AtomicUsize,
}

impl<T> Probe<T> {
    fn new(inner: T) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
            fail_generate_at: None,
            generated: AtomicUsize::new(0),
        }
    }

    fn count(&self, e: Endpoint) -> usize {
        self.calls.lock().unwrap().iter().filter(|&&c| c == e).count()
    }

    fn total(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

impl<T: Transport> Transport for Probe<T> {
    fn call(&self, endpoint: Endpoint, body: &Value) -> cfsize_core::Result<Value> {
        self.calls.lock().unwrap().push(endpoint);
        if endpoint == Endpoint::Generate {
            let n = self.generated.fetch_add(1, Ordering::SeqCst);
            if Some(n) == self.fail_generate_at {
                return Err(Error::ClientUnavailable {
                    service: "generator".into(),
                    message: "injected failure".into(),
                });
            }
        }
        self.inner.call(endpoint, body)
    }
}

fn catalog_2x2() -> Catalog {
    Catalog {
        big: vec!["walrus".into(), "bus".into()],
        small: vec!["button".into(), "teacup".into()],
    }
}

fn few_shot() -> FewShot {
    FewShot::parse("# cfsize-few-shot v1\nA giant apple next to a tiny horse.\n").unwrap()
}

fn run_dataset(probe: Arc<Probe<SyntheticWorld>>, world: &SyntheticWorld, dir: &std::path::Path) -> cfsize_core::dataset::ConstructionSummary {
    let db = world.reference_db().unwrap();
    let clients = Clients::from_arc(probe);
    let eval_config = EvaluatorConfig::default();
    let config = ConstructionConfig {
        rewrites_per_base: 2,
        ..ConstructionConfig::default()
    };
    Construction {
        clients: &clients,
        images: world,
        db: &db,
        eval_config: &eval_config,
        config: &config,
    }
    .run(&catalog_2x2(), &few_shot(), dir)
    .unwrap()
}

#[test]
fn four_bases_two_rewrites_give_eight_records() {
    let catalog = catalog_2x2();
    let world = SyntheticWorld::new(&catalog.all_labels().collect::<Vec<_>>()).unwrap();
    let probe = Arc::new(Probe::new(world.clone()));
    let dir = tempfile::tempdir().unwrap();
    let summary = run_dataset(probe.clone(), &world, dir.path());
    assert_eq!(summary.base_prompts, 4);
    assert_eq!(summary.records, 8);
    assert_eq!(summary.errors, 0);
    assert_eq!(probe.count(Endpoint::Rewrite), 4);
    assert_eq!(probe.count(Endpoint::Generate), 8);

    let paths = DatasetPaths::in_dir(dir.path());
    let records: Vec<PromptRecord> = read_jsonl(&paths.records).unwrap();
    assert_eq!(records.len(), 8);
    let triplets: Vec<Value> = read_jsonl(&paths.triplets).unwrap();
    assert_eq!(triplets.len(), summary.triplets);
    for t in &triplets {
        let keys: Vec<&String> = t.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["base", "negative", "positive"]);
    }

    let rerun = Arc::new(Probe::new(world.clone()));
    let again = run_dataset(rerun.clone(), &world, dir.path());
    assert_eq!(rerun.total(), 0);
    assert_eq!(again.records, 8);
    assert_eq!(again.new_records, 0);
}

#[test]
fn generation_failure_is_recorded_and_retried_later() {
    let catalog = catalog_2x2();
    let world = SyntheticWorld::new(&catalog.all_labels().collect::<Vec<_>>()).unwrap();
    let mut probe = Probe::new(world.clone());
    probe.fail_generate_at = Some(3);
    let dir = tempfile::tempdir().unwrap();
    let summary = run_dataset(Arc::new(probe), &world, dir.path());
    assert_eq!(summary.records, 7);
    assert_eq!(summary.errors, 1);
    let errors: Vec<Value> = read_jsonl(DatasetPaths::in_dir(dir.path()).errors).unwrap();
    assert_eq!(errors[0]["stage"], "generate");
    assert_eq!(errors[0]["candidate_index"], 1);

    // Only the failed base is revisited, and only its missing rewrite is generated.
    let retry = Arc::new(Probe::new(world.clone()));
    let summary = run_dataset(retry.clone(), &world, dir.path());
    assert_eq!(summary.records, 8);
    assert_eq!(summary.new_records, 1);
    assert_eq!(summary.errors, 0);
    assert_eq!(retry.count(Endpoint::Rewrite), 1);
    assert_eq!(retry.count(Endpoint::Generate), 1);
}

#[test]
fn checked_in_dataset_corpus_replays() {
    let layout = DatasetCorpusLayout::in_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/dataset"));
    let clients = Clients::fixtures(&layout.fixtures).unwrap();
    let db = ReferenceDb::load(&layout.db).unwrap();
    let images = ImageDir::new(&layout.images);
    let eval_config = EvaluatorConfig::default();
    let config = ConstructionConfig {
        rewrites_per_base: 4,
        ..ConstructionConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    Construction {
        clients: &clients,
        images: &images,
        db: &db,
        eval_config: &eval_config,
        config: &config,
    }
    .run(
        &Catalog::load(&layout.catalog).unwrap(),
        &FewShot::load(&layout.few_shot).unwrap(),
        out.path(),
    )
    .unwrap();
    for name in ["records.jsonl", "triplets.jsonl", "sft_pairs.jsonl", "errors.jsonl"] {
        let got = std::fs::read_to_string(out.path().join(name)).unwrap();
        let want = std::fs::read_to_string(layout.expected.join(name)).unwrap();
        assert_eq!(got, want, "{name}");
    }
}

fn rect_scene(pair: &ObjectPair, clip_sim: f64, parts: &[(&str, &str, [u32; 4], &[[u32; 4]])]) -> Scene {
    Scene {
        pair: pair.clone(),
        clip_sim,
        regions: parts
            .iter()
            .map(|&(label, _, rect, _)| Region {
                label: label.into(),
                rect,
            })
            .collect(),
        proposals: parts
            .iter()
            .map(|&(_, raw, _, rects)| Proposal {
                raw_label: raw.into(),
                confidence: 0.6,
                rects: rects.to_vec(),
            })
            .collect(),
    }
}

fn button_walrus() -> ObjectPair {
    ObjectPair::new("button", "walrus")
}

#[test]
fn evaluator_fixture_examples() {
    let pair = button_walrus();
    let mut world = SyntheticWorld::new(&["button", "walrus"]).unwrap();
    // 100x50 button and 50x20 walrus.
    let b = [0, 0, 100, 50];
    let w = [120, 120, 170, 140];
    world.insert_scene("big-button", rect_scene(&pair, 0.45, &[("button", "button", b, &[b]), ("walrus", "walrus", w, &[w])])).unwrap();
    world.insert_scene("off-prompt", rect_scene(&pair, 0.30, &[("button", "button", b, &[b]), ("walrus", "walrus", w, &[w])])).unwrap();
    let big_w = [100, 100, 200, 200];
    let small_b = [10, 10, 60, 60];
    // One "walrus" mask spans both objects.
    world
        .insert_scene(
            "merged",
            rect_scene(&pair, 0.45, &[("walrus", "walrus", big_w, &[big_w, small_b]), ("button", "button", small_b, &[small_b])]),
        )
        .unwrap();

    let db = world.reference_db().unwrap();
    let probe = Arc::new(Probe::new(world.clone()));
    let clients = Clients::from_arc(probe.clone());
    let config = EvaluatorConfig::default();
    let ev = Evaluator::new(&clients, &world, &db, &config);

    // A 1000 px walrus is below the default tiny-region area, so it only counts with the filter off.
    let o = ev.evaluate_image(&EvalItem::new("big-button", &pair)).unwrap();
    assert_eq!((o.area_small, o.area_big), (Some(5000), None));
    assert_eq!(o.score, -2.25);
    let unfiltered = EvaluatorConfig {
        refinements: Refinements {
            tiny_filter: false,
            ..Refinements::all()
        },
        ..EvaluatorConfig::default()
    };
    let o = Evaluator::new(&clients, &world, &db, &unfiltered)
        .evaluate_image(&EvalItem::new("big-button", &pair))
        .unwrap();
    assert_eq!((o.area_small, o.area_big), (Some(5000), Some(1000)));
    assert_eq!(o.score, 1.5);

    let before = probe.count(Endpoint::Detect);
    let o = ev.evaluate_image(&EvalItem::new("off-prompt", &pair)).unwrap();
    assert_eq!(o.score, -2.25);
    assert_eq!(o.branch, ScoreBranch::SingleObjectMode);
    assert_eq!(probe.count(Endpoint::Detect), before);

    let merged = EvalItem::new("merged", &pair);
    let o = ev.evaluate_image(&merged).unwrap();
    assert_eq!(o.trace.after_exclusive.len(), 2);
    assert_eq!((o.area_small, o.area_big), (Some(2500), Some(10000)));
    assert_eq!(o.score, -1.5);

    let no_exclusive = EvaluatorConfig {
        refinements: Refinements {
            exclusive_masks: false,
            label_verification: false,
            ..Refinements::all()
        },
        ..EvaluatorConfig::default()
    };
    let o = Evaluator::new(&clients, &world, &db, &no_exclusive).evaluate_image(&merged).unwrap();
    assert_eq!(o.area_big, Some(12500));
    assert_eq!(o.trace.after_exclusive.len(), 2);
}

#[test]
fn batch_records_missing_fixture_in_band() {
    let pair = button_walrus();
    let mut world = SyntheticWorld::new(&["button", "walrus"]).unwrap();
    let b = [0, 0, 100, 100];
    let w = [150, 150, 200, 200];
    for id in ["a", "b", "c"] {
        world.insert_scene(id, rect_scene(&pair, 0.45, &[("button", "button", b, &[b]), ("walrus", "walrus", w, &[w])])).unwrap();
    }
    let db = world.reference_db().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<EvalItem> = ["a", "b", "c"].iter().map(|id| EvalItem::new(*id, &pair)).collect();
    let config = EvaluatorConfig::default();
    {
        let recorder = Clients::new(cfsize_core::clients::RecordingTransport::new(world.clone(), dir.path()).unwrap());
        let ev = Evaluator::new(&recorder, &world, &db, &config);
        assert!(ev.evaluate_batch(&items[..2], 2).iter().all(|r| r.is_ok()));
    }
    let replay = Clients::fixtures(dir.path()).unwrap();
    let ev = Evaluator::new(&replay, &world, &db, &config);
    let results = ev.evaluate_batch(&items, 3);
    assert_eq!(results.len(), 3);
    assert!(results[0].is_ok() && results[1].is_ok());
    assert!(matches!(results[2], Err(Error::FixtureMissing { .. })));
    assert_eq!(results[0].as_ref().unwrap().image_id, "a");
    assert!(ev.evaluate_batch(&[], 2).is_empty());
}

#[test]
fn ablation_of_one_trivial_item_and_empty_corpus() {
    let pair = button_walrus();
    let mut world = SyntheticWorld::new(&["button", "walrus"]).unwrap();
    let b = [0, 0, 150, 150];
    let w = [180, 180, 240, 240];
    world.insert_scene("ok", rect_scene(&pair, 0.45, &[("button", "button", b, &[b]), ("walrus", "walrus", w, &[w])])).unwrap();
    let db = world.reference_db().unwrap();
    let clients = Clients::new(world.clone());
    let corpus = AnnotatedCorpus {
        items: vec![EvalItem::new("ok", &pair)],
        annotations: vec![HumanAnnotation {
            image_id: "ok".into(),
            human_label: true,
        }],
    };
    let table = run_ablation(&corpus, &clients, &world, &db, &EvaluatorConfig::default(), 1).unwrap();
    assert_eq!(table.rows.len(), 4);
    for v in AblationVariant::ALL {
        assert_eq!(table.row(v).unwrap().f1, 1.0);
        assert_eq!(table.row(v).unwrap().rank, 1);
    }
    let empty = AnnotatedCorpus {
        items: vec![],
        annotations: vec![],
    };
    assert!(matches!(
        run_ablation(&empty, &clients, &world, &db, &EvaluatorConfig::default(), 1),
        Err(Error::EmptyInput)
    ));
}

#[test]
fn best_of_n_with_remote_and_toy_rankers() {
    let world = SyntheticWorld::new(&["button", "walrus"]).unwrap();
    let clients = Clients::new(world);
    let base = button_walrus().base_prompt();
    let sampling = SamplingConfig::default();

    let ranked = generate_and_rank(&base, &clients, &RemoteRanker { clients: &clients }, &sampling).unwrap();
    assert_eq!(ranked.candidates.len(), 15);
    let best = ranked.candidates.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(ranked.candidates[ranked.selected_index].score, best);
    assert_eq!(ranked.selected, ranked.candidates[ranked.selected_index].text);

    let flat = generate_and_rank(&base, &clients, &ConstantScorer(0.0), &sampling).unwrap();
    assert_eq!(flat.selected_index, 0);

    let mut toy = ToyScorer::default();
    let giant = toy.vocabulary.iter().position(|v| v == "giant").unwrap();
    toy.weights[giant] = 5.0;
    let ranked = generate_and_rank(&base, &clients, &toy, &sampling).unwrap();
    assert!(ranked.selected.to_lowercase().contains("giant"));

    let zero = SamplingConfig {
        n_candidates: 0,
        ..sampling
    };
    assert!(generate_and_rank(&base, &clients, &toy, &zero).is_err());
}
