use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dnc_core::backend::{
    Backend, Completion, CompletionRequest, MockBackend, QuestionProfile, ReplayBackend, ResponseCache, SimConfig,
};
use dnc_core::conquer::{conquer_item, ConquerParams, ScMode, Strategy};
use dnc_core::divide::{run_divide, AnswerHistogram, ConfidenceReport, DivideParams, Subset};
use dnc_core::model::{load_dataset, Answer, DatasetSchema, DatasetSpec, Fraction, Label, Question};
use dnc_core::run::{self, read_profiles, DivideMode, RunConfig};
use dnc_core::Error;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn toy() -> (Vec<Question>, Vec<QuestionProfile>) {
    let q = load_dataset(&data("toy.jsonl"), DatasetSchema::McqJsonl).unwrap();
    let p = read_profiles(&data("toy_profiles.json")).unwrap();
    (q, p)
}

fn spec() -> DatasetSpec {
    DatasetSpec::new("toy", 5, DatasetSpec::default_mu(), DatasetSpec::default_nu()).unwrap()
}

/// Fails every request for questions not in `allowed`.
struct Interrupted {
    inner: MockBackend,
    allowed: Vec<String>,
}

impl Backend for Interrupted {
    fn complete(&self, req: &CompletionRequest) -> dnc_core::Result<Completion> {
        if self.allowed.contains(&req.question_id) {
            self.inner.complete(req)
        } else {
            Err(Error::Transport {
                attempts: 5,
                message: "connection reset".into(),
            })
        }
    }
}

#[test]
fn resumed_divide_only_issues_missing_queries() {
    let (questions, profiles) = toy();
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("cache.jsonl");
    let transcript = dir.path().join("transcript.jsonl");
    let mut params = DivideParams::new(spec());
    params.parallelism = 1;

    let first = Interrupted {
        inner: MockBackend::new(&questions, profiles.clone(), SimConfig::new(42)).unwrap(),
        allowed: questions[..10].iter().map(|q| q.id.clone()).collect(),
    };
    let cache = ResponseCache::open(&cache_path, Some(Arc::new(first))).unwrap();
    let err = run_divide(&questions, &params, &cache, Some(&transcript)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(dnc_core::transcript::read_transcript(&transcript).unwrap().len(), 50);
    drop(cache);

    let mock = Arc::new(MockBackend::new(&questions, profiles, SimConfig::new(42)).unwrap());
    let cache = ResponseCache::open(&cache_path, Some(mock.clone())).unwrap();
    let out = run_divide(&questions, &params, &cache, Some(&transcript)).unwrap();
    assert_eq!(mock.calls(), 10 * 5);
    assert_eq!(cache.stats().hits, 50);
    assert_eq!(out.records.len(), 100);
    assert_eq!(out.reports.len(), 20);
}

#[test]
fn invalid_thresholds_issue_no_calls() {
    let (questions, profiles) = toy();
    let mock = MockBackend::new(&questions, profiles, SimConfig::new(1)).unwrap();
    let bad = DatasetSpec {
        name: "toy".into(),
        divide_base: 5,
        mu: Fraction::new(3, 5),
        nu: Fraction::new(4, 5),
    };
    match run_divide(&questions, &DivideParams::new(bad), &mock, None) {
        Err(Error::Validation(v)) => assert!(v[0].contains("nu")),
        other => panic!("{other:?}"),
    }
    assert_eq!(mock.calls(), 0);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml_str("[dataset]\nmu = 0.6\nnu = 0.8\ndivide_base = 1").unwrap();
    cfg.dataset.path = Some(data("toy.jsonl"));
    cfg.simulator.profiles = Some(data("toy_profiles.json"));
    cfg.run.out_dir = dir.path().join("run");
    match run::cmd_divide(&cfg) {
        Err(Error::Validation(v)) => assert_eq!(v.len(), 2, "{v:?}"),
        other => panic!("{other:?}"),
    }
    assert!(!cfg.run.out_dir.join("cache").exists());
}

struct Counting(AtomicU64, MockBackend);

impl Backend for Counting {
    fn complete(&self, req: &CompletionRequest) -> dnc_core::Result<Completion> {
        self.0.fetch_add(1, Ordering::Relaxed);
        self.1.complete(req)
    }
}

fn label(c: char) -> Answer {
    Answer::Label(Label::from_char(c).unwrap())
}

#[test]
fn single_surviving_choice_needs_no_query() {
    let (questions, profiles) = toy();
    let q = &questions[0];
    let backend = Counting(AtomicU64::new(0), MockBackend::new(&questions, profiles, SimConfig::new(3)).unwrap());
    let h = AnswerHistogram::from_samples([(0, Some(label('C'))), (1, None), (2, Some(label('C'))), (3, None), (4, None)]);
    let report = ConfidenceReport::from_histogram(&q.id, h, &spec());
    assert_eq!(report.subset, Subset::Low);
    let out = conquer_item(q, &report, &[], &ConquerParams::new(Strategy::Fcr, ScMode::On { samples: 5 }), &backend).unwrap();
    assert!(out.short_circuit);
    assert_eq!(out.final_answer, Some(label('C')));
    assert_eq!(backend.0.load(Ordering::Relaxed), 0);
}

#[test]
fn empty_support_falls_back_to_plain_prompting() {
    let (questions, profiles) = toy();
    let q = &questions[3];
    let backend = Counting(AtomicU64::new(0), MockBackend::new(&questions, profiles, SimConfig::new(3)).unwrap());
    let h = AnswerHistogram::from_samples((0..5).map(|i| (i, None)));
    let report = ConfidenceReport::from_histogram(&q.id, h, &spec());
    for strategy in [Strategy::Fcr, Strategy::Pkr, Strategy::Com1, Strategy::Com2] {
        let out = conquer_item(q, &report, &[], &ConquerParams::new(strategy, ScMode::Off), &backend).unwrap();
        assert_eq!(out.fallback, Some(Strategy::Ztcot), "{strategy}");
        assert!(out.mapping.is_none());
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].temperature, 0.0);
    }
}

#[test]
fn replay_without_upstream_reports_the_missing_key() {
    let (questions, _) = toy();
    let replay = ReplayBackend::from_records(Vec::new());
    let err = run_divide(&questions[..1], &DivideParams::new(spec()), &replay, None).unwrap_err();
    assert!(matches!(err, Error::CacheMiss { .. }), "{err:?}");
}

#[test]
fn verify_mode_divides_the_toy_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset.path = Some(data("toy.jsonl"));
    cfg.simulator.profiles = Some(data("toy_profiles.json"));
    cfg.run.out_dir = dir.path().join("run");
    cfg.divide.mode = DivideMode::Verify;
    let s = run::cmd_divide(&cfg).unwrap();
    assert_eq!(s.reports.len(), 20);
    assert!(s.reports.iter().all(|r| r.verdict.is_some()));
    // Confident questions are mostly confirmed.
    let confirmed = s.reports.iter().take(5).filter(|r| r.verdict == Some(true)).count();
    assert!(confirmed >= 3, "{confirmed}");
}

#[test]
fn cloze_questions_run_through_divide_and_conquer() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("arith.jsonl");
    std::fs::write(
        &dataset,
        concat!(
            r#"{"id": "c1", "question": "3 boxes of 4 apples. How many apples?", "gold": "12"}"#,
            "\n",
            r#"{"id": "c2", "question": "Half of 30?", "gold": "15"}"#,
            "\n",
        ),
    )
    .unwrap();
    let profiles = dir.path().join("arith_profiles.json");
    std::fs::write(
        &profiles,
        r#"[
          {"question_id": "c1", "answer_distribution": {"12": 0.4, "7": 0.35, "16": 0.25}, "rationale_length_mean": 200},
          {"question_id": "c2", "answer_distribution": {"15": 1.0}, "rationale_length_mean": 150}
        ]"#,
    )
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset.path = Some(dataset);
    cfg.dataset.schema = DatasetSchema::ClozeJsonl;
    cfg.simulator.profiles = Some(profiles);
    cfg.run.out_dir = dir.path().join("run");
    let d = run::cmd_divide(&cfg).unwrap();
    assert_eq!(d.reports[1].subset, Subset::High);
    for strategy in ["fcr", "pkr", "ztcot"] {
        let mut c = cfg.clone();
        c.conquer.strategy = strategy.into();
        c.conquer.subsets = vec!["med".into(), "low".into()];
        let s = run::cmd_conquer(&c).unwrap();
        for o in &s.outcomes {
            assert!(matches!(o.final_answer, Some(Answer::Number(_)) | None), "{strategy}: {:?}", o.final_answer);
        }
    }
    run::cmd_report(&cfg.run.out_dir).unwrap();
}
