//! Run orchestration: configuration, run directories, manifests, and the
//! divide / conquer / simulate / report commands.
//!
//! A run directory looks like this:
//!
//! ```text
//! <out_dir>/
//!   manifest.json
//!   dataset.jsonl            copy of the input questions
//!   profiles.json            simulator profiles (mock backend only)
//!   cache/<run_id>.jsonl     response cache, append-only
//!   divide/transcript.jsonl
//!   divide/partition.jsonl
//!   conquer/<tag>.transcript.jsonl
//!   conquer/<tag>.outcomes.jsonl
//!   report.json  summary.csv  curves.csv
//! ```
//!
//! Every path in the manifest is relative to the run directory, except a
//! cache placed elsewhere with `cache_dir`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    generate_synthetic, Backend, HttpBackend, MockBackend, ProfileFamily, QuestionProfile, ResponseCache, RetryPolicy,
    SimConfig,
};
use crate::conquer::{run_conquer, AblationMode, ConquerParams, OutcomeSummary, RationaleSelect, ScMode, Strategy};
use crate::divide::{
    confidence_score, majority_answer, run_divide, run_verify_divide, ConfidenceReport, DivideOutput, DivideParams,
    SubsetSelector,
};
use crate::error::{Error, Result};
use crate::eval::{self, build_report, emit_report, ConquerRun, ReportInput};
use crate::io::{read_json, read_jsonl, write_json_pretty, write_jsonl};
use crate::model::{
    fraction_to_f64, load_dataset, parse_fraction, save_dataset, DatasetSchema, DatasetSpec, Fraction, Question,
};
use crate::prompt::Tail;
use crate::transcript::{read_transcript, InferenceRecord};

pub const MANIFEST: &str = "manifest.json";
const DATASET_COPY: &str = "dataset.jsonl";
const PROFILES_COPY: &str = "profiles.json";
const DIVIDE_TRANSCRIPT: &str = "divide/transcript.jsonl";
const PARTITION: &str = "divide/partition.jsonl";
pub const REPORT_FILES: [&str; 3] = ["report.json", "summary.csv", "curves.csv"];

/// A fraction written either as a number (`0.8`) or a string (`"4/5"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FractionValue {
    Number(f64),
    Text(String),
}

impl FractionValue {
    fn parse(&self) -> Result<Fraction> {
        match self {
            FractionValue::Number(x) => parse_fraction(&x.to_string()),
            FractionValue::Text(s) => parse_fraction(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub schema: DatasetSchema,
    /// Defaults to the file stem.
    pub name: Option<String>,
    pub divide_base: u32,
    pub mu: FractionValue,
    pub nu: FractionValue,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            schema: DatasetSchema::McqJsonl,
            name: None,
            divide_base: 5,
            mu: FractionValue::Text("4/5".into()),
            nu: FractionValue::Text("3/5".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
    /// Serve only from the run's cache; any miss is an error.
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub max_output_tokens: u32,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_attempts: 5,
            max_output_tokens: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub profiles: Option<PathBuf>,
    pub noise_rate: f64,
    pub uplift: f64,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        SimulatorSection {
            profiles: None,
            noise_rate: 0.0,
            uplift: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub parallelism: usize,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            parallelism: 4,
            out_dir: PathBuf::from("runs/default"),
            cache_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivideMode {
    /// `t` samples per question.
    Sample,
    /// One sample plus one self-check query.
    Verify,
}

impl DivideMode {
    fn as_str(self) -> &'static str {
        match self {
            DivideMode::Sample => "sample",
            DivideMode::Verify => "verify",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivideSection {
    pub mode: DivideMode,
    pub tail: String,
}

impl Default for DivideSection {
    fn default() -> Self {
        DivideSection {
            mode: DivideMode::Sample,
            tail: "prompt0".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConquerSection {
    pub strategy: String,
    pub sc: bool,
    pub rationale_select: String,
    pub subsets: Vec<String>,
    pub ablation: Option<String>,
    pub tail: Option<String>,
}

impl Default for ConquerSection {
    fn default() -> Self {
        ConquerSection {
            strategy: "fcr".into(),
            sc: false,
            rationale_select: "longest".into(),
            subsets: vec!["med".into(), "low".into()],
            ablation: None,
            tail: None,
        }
    }
}

/// The declarative run configuration (a TOML file). Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub backend: BackendSection,
    pub simulator: SimulatorSection,
    pub run: RunSection,
    pub divide: DivideSection,
    pub conquer: ConquerSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Validation(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn out_dir(&self) -> &Path {
        &self.run.out_dir
    }

    /// Checks the whole configuration and reports every problem at once.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Invalid(m) => m,
                    Error::Validation(v) => v.join("; "),
                    other => other.to_string(),
                });
            }
        };
        let mut mu = DatasetSpec::default_mu();
        let mut nu = DatasetSpec::default_nu();
        check(self.dataset.mu.parse().map(|v| mu = v).map_err(|_| Error::invalid(format!("mu: {:?} is not a fraction in [0, 1]", self.dataset.mu))));
        check(self.dataset.nu.parse().map(|v| nu = v).map_err(|_| Error::invalid(format!("nu: {:?} is not a fraction in [0, 1]", self.dataset.nu))));
        let name = self.dataset.name.clone().unwrap_or_else(|| {
            self.dataset
                .path
                .as_ref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        let spec = DatasetSpec {
            name,
            divide_base: self.dataset.divide_base,
            mu,
            nu,
        };
        for p in spec.problems() {
            check(Err(Error::invalid(p)));
        }
        if self.run.parallelism == 0 {
            check(Err(Error::invalid("parallelism must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.simulator.noise_rate) {
            check(Err(Error::invalid(format!("noise_rate {} outside [0, 1]", self.simulator.noise_rate))));
        }
        if !(self.simulator.uplift > 0.0) {
            check(Err(Error::invalid(format!("uplift {} must be positive", self.simulator.uplift))));
        }
        if self.backend.max_output_tokens == 0 {
            check(Err(Error::invalid("max_output_tokens must be positive")));
        }
        match self.backend.kind {
            BackendKind::Http => {
                if self.backend.endpoint.is_none() {
                    check(Err(Error::invalid("backend.endpoint is required for the http backend")));
                }
                if self.backend.model.is_none() {
                    check(Err(Error::invalid("backend.model is required for the http backend")));
                }
                if std::env::var_os(&self.backend.api_key_env).is_none() {
                    check(Err(Error::invalid(format!(
                        "environment variable {} (backend.api_key_env) is not set",
                        self.backend.api_key_env
                    ))));
                }
                if self.backend.max_attempts == 0 {
                    check(Err(Error::invalid("backend.max_attempts must be at least 1")));
                }
            }
            BackendKind::Mock | BackendKind::Replay => {}
        }
        let mut divide_tail = Tail::StepByStep;
        check(self.divide.tail.parse().map(|t| divide_tail = t));

        let mut strategy = Strategy::Fcr;
        check(self.conquer.strategy.parse().map(|s| strategy = s));
        let mut select = RationaleSelect::Longest;
        check(self.conquer.rationale_select.parse().map(|s| select = s));
        if let RationaleSelect::Random(0) = select {
            if self.conquer.rationale_select == "random" {
                select = RationaleSelect::Random(self.run.seed);
            }
        }
        let mut ablation = None;
        if let Some(a) = &self.conquer.ablation {
            check(a.parse::<AblationMode>().map(|m| ablation = Some(m.with_seed(self.run.seed))));
        }
        let mut conquer_tail = None;
        if let Some(t) = &self.conquer.tail {
            check(t.parse::<Tail>().map(|t| conquer_tail = Some(t)));
        }
        if let Some(a) = &ablation {
            if !matches!(strategy, Strategy::Ztcot | Strategy::Fcr) {
                check(Err(Error::invalid(format!(
                    "ablation `{}` works with ztcot or fcr, not {strategy}",
                    a.name()
                ))));
            }
        }
        let mut subsets = Vec::new();
        for s in &self.conquer.subsets {
            match s.parse::<SubsetSelector>() {
                Ok(SubsetSelector::High) => check(Err(Error::invalid(
                    "conquer.subsets: the high-confidence subset keeps its divide answers",
                ))),
                Ok(sel) => subsets.push(sel),
                Err(e) => check(Err(e)),
            }
        }
        if self.conquer.subsets.is_empty() {
            check(Err(Error::invalid("conquer.subsets is empty")));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let mut conquer = ConquerParams::new(
            strategy,
            if self.conquer.sc {
                ScMode::On {
                    samples: spec.divide_base,
                }
            } else {
                ScMode::Off
            },
        );
        conquer.select = select;
        conquer.ablation = ablation;
        conquer.tail = conquer_tail;
        conquer.max_output_tokens = self.backend.max_output_tokens;
        conquer.parallelism = self.run.parallelism;
        Ok(Resolved {
            spec,
            divide_tail,
            conquer,
            subsets,
        })
    }
}

/// Parsed and checked parts of a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub spec: DatasetSpec,
    pub divide_tail: Tail,
    pub conquer: ConquerParams,
    pub subsets: Vec<SubsetSelector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseStatus {
    Pending,
    Partial,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Only the variable name; the key itself is never written.
    pub api_key_env: String,
    pub max_output_tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivideRecord {
    pub mode: DivideMode,
    pub tail: Tail,
    pub status: PhaseStatus,
    pub transcript: String,
    pub partition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConquerRecord {
    pub tag: String,
    pub strategy: Strategy,
    pub self_consistency: bool,
    pub rationale_select: RationaleSelect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<Tail>,
    pub subsets: Vec<SubsetSelector>,
    pub status: PhaseStatus,
    pub transcript: String,
    pub outcomes: String,
}

impl ConquerRecord {
    fn params(&self, spec: &DatasetSpec, max_output_tokens: u32, parallelism: usize) -> ConquerParams {
        let mut p = ConquerParams::new(
            self.strategy,
            if self.self_consistency {
                ScMode::On {
                    samples: spec.divide_base,
                }
            } else {
                ScMode::Off
            },
        );
        p.select = self.rationale_select;
        p.ablation = self.ablation;
        p.tail = self.tail;
        p.max_output_tokens = max_output_tokens;
        p.parallelism = parallelism;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub status: PhaseStatus,
    pub files: Vec<String>,
}

/// Everything needed to inspect or replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: DatasetSpec,
    pub dataset_file: String,
    pub schema: DatasetSchema,
    pub backend: BackendRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles_file: Option<String>,
    pub seed: u64,
    pub cache: String,
    pub divide: DivideRecord,
    pub conquer: Vec<ConquerRecord>,
    pub report: ReportRecord,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Phase {
                phase: "divide",
                reason: format!("no manifest at {}; run `divide` first", path.display()),
            });
        }
        read_json(&path)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json_pretty(&dir.join(MANIFEST), self)
    }

    pub fn cache_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.cache)
    }
}

fn digest_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

/// Run id: a digest of everything that determines divide-phase completions.
fn run_id(
    spec: &DatasetSpec,
    dataset_bytes: &[u8],
    backend: &BackendRecord,
    sim: Option<&SimConfig>,
    profiles_bytes: &[u8],
    divide: (DivideMode, Tail),
) -> Result<String> {
    let spec_json = serde_json::to_vec(spec)?;
    let backend_json = serde_json::to_vec(backend)?;
    let sim_json = serde_json::to_vec(&sim)?;
    let divide_json = serde_json::to_vec(&divide)?;
    Ok(digest_hex(&[&spec_json, dataset_bytes, &backend_json, &sim_json, profiles_bytes, &divide_json]))
}

/// Reads simulator profiles, either a bare list or `{"profiles": [...]}`.
pub fn read_profiles(path: &Path) -> Result<Vec<QuestionProfile>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum ProfileFile {
        List(Vec<QuestionProfile>),
        Wrapped { profiles: Vec<QuestionProfile> },
    }
    Ok(match read_json::<ProfileFile>(path)? {
        ProfileFile::List(v) | ProfileFile::Wrapped { profiles: v } => v,
    })
}

fn write_profiles(path: &Path, profiles: &[QuestionProfile]) -> Result<()> {
    write_json_pretty(path, &serde_json::json!({ "profiles": profiles }))
}

fn relative(path: &str) -> &Path {
    Path::new(path)
}

/// Builds the backend stack for a run: the upstream (if any) behind the
/// response cache.
fn open_backend(manifest: &RunManifest, dir: &Path, questions: &[Question], timeout_secs: u64, max_attempts: u32) -> Result<ResponseCache> {
    let cache_path = manifest.cache_path(dir);
    let upstream: Option<Arc<dyn Backend>> = match manifest.backend.kind {
        BackendKind::Mock => {
            let profiles_file = manifest.profiles_file.as_deref().ok_or_else(|| {
                Error::Validation(vec!["the mock backend needs simulator.profiles".into()])
            })?;
            let profiles = read_profiles(&dir.join(profiles_file))?;
            let sim = manifest.simulator.clone().unwrap_or_else(|| SimConfig::new(manifest.seed));
            Some(Arc::new(MockBackend::new(questions, profiles, sim)?))
        }
        BackendKind::Http => {
            let retry = RetryPolicy {
                max_attempts,
                ..RetryPolicy::default()
            };
            Some(Arc::new(HttpBackend::from_env(
                manifest.backend.endpoint.clone().unwrap_or_default(),
                manifest.backend.model.clone().unwrap_or_default(),
                &manifest.backend.api_key_env,
                Duration::from_secs(timeout_secs),
                retry,
            )?))
        }
        BackendKind::Replay => None,
    };
    ResponseCache::open(&cache_path, upstream)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivideSummary {
    pub run_id: String,
    pub reports: Vec<ConfidenceReport>,
    pub records: usize,
    pub cache_hits: u64,
    pub fetches: u64,
}

/// Runs the divide phase and writes the partition file.
///
/// Completed samples are cached, so rerunning after an interruption only
/// issues the missing queries.
pub fn cmd_divide(cfg: &RunConfig) -> Result<DivideSummary> {
    let resolved = cfg.resolve()?;
    let dir = cfg.out_dir().to_path_buf();
    let mut problems = Vec::new();
    let dataset_path = match &cfg.dataset.path {
        Some(p) if p.exists() => Some(p.clone()),
        Some(p) => {
            problems.push(format!("dataset file {} does not exist", p.display()));
            None
        }
        None => {
            problems.push("dataset.path is required".into());
            None
        }
    };
    if cfg.backend.kind == BackendKind::Mock {
        match &cfg.simulator.profiles {
            Some(p) if !p.exists() => problems.push(format!("profile file {} does not exist", p.display())),
            None => problems.push("simulator.profiles is required for the mock backend".into()),
            _ => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let dataset_path = dataset_path.unwrap();
    let questions = load_dataset(&dataset_path, cfg.dataset.schema)?;
    if questions.is_empty() {
        return Err(Error::Validation(vec![format!("dataset {} is empty", dataset_path.display())]));
    }
    save_dataset(&dir.join(DATASET_COPY), &questions)?;
    let dataset_bytes = fs::read(dir.join(DATASET_COPY)).map_err(|e| Error::io(dir.join(DATASET_COPY), e))?;

    let (sim, profiles_file, profiles_bytes) = if cfg.backend.kind == BackendKind::Mock {
        let profiles = read_profiles(cfg.simulator.profiles.as_ref().unwrap())?;
        write_profiles(&dir.join(PROFILES_COPY), &profiles)?;
        let bytes = fs::read(dir.join(PROFILES_COPY)).map_err(|e| Error::io(dir.join(PROFILES_COPY), e))?;
        let sim = SimConfig {
            seed: cfg.run.seed,
            noise_rate: cfg.simulator.noise_rate,
            uplift: cfg.simulator.uplift,
        };
        (Some(sim), Some(PROFILES_COPY.to_string()), bytes)
    } else {
        (None, None, Vec::new())
    };

    let backend_record = BackendRecord {
        kind: cfg.backend.kind,
        endpoint: cfg.backend.endpoint.clone(),
        model: cfg.backend.model.clone(),
        api_key_env: cfg.backend.api_key_env.clone(),
        max_output_tokens: cfg.backend.max_output_tokens,
    };
    let id = run_id(
        &resolved.spec,
        &dataset_bytes,
        &backend_record,
        sim.as_ref(),
        &profiles_bytes,
        (cfg.divide.mode, resolved.divide_tail),
    )?;
    let cache = match &cfg.run.cache_dir {
        Some(c) => {
            let abs = if c.is_absolute() { c.clone() } else { std::env::current_dir().map_err(|e| Error::io(c, e))?.join(c) };
            abs.join(format!("{id}.jsonl")).to_string_lossy().into_owned()
        }
        None => format!("cache/{id}.jsonl"),
    };
    // Keep conquer runs from an earlier divide with the same id.
    let previous = RunManifest::load(&dir).ok().filter(|m| m.run_id == id);
    let mut manifest = RunManifest {
        run_id: id.clone(),
        dataset: resolved.spec.clone(),
        dataset_file: DATASET_COPY.into(),
        schema: cfg.dataset.schema,
        backend: backend_record,
        simulator: sim,
        profiles_file,
        seed: cfg.run.seed,
        cache,
        divide: DivideRecord {
            mode: cfg.divide.mode,
            tail: resolved.divide_tail,
            status: PhaseStatus::Pending,
            transcript: DIVIDE_TRANSCRIPT.into(),
            partition: PARTITION.into(),
        },
        conquer: previous.map(|m| m.conquer).unwrap_or_default(),
        report: ReportRecord {
            status: PhaseStatus::Pending,
            files: Vec::new(),
        },
    };
    manifest.save(&dir)?;

    let backend = open_backend(&manifest, &dir, &questions, cfg.backend.timeout_secs, cfg.backend.max_attempts)?;
    let params = DivideParams {
        spec: resolved.spec.clone(),
        temperature: crate::divide::DIVIDE_TEMPERATURE,
        max_output_tokens: cfg.backend.max_output_tokens,
        parallelism: cfg.run.parallelism,
        tail: resolved.divide_tail,
    };
    let result = execute_divide(&manifest, &questions, &params, &backend, Some(&dir.join(DIVIDE_TRANSCRIPT)));
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            manifest.divide.status = PhaseStatus::Partial;
            manifest.save(&dir)?;
            return Err(e);
        }
    };
    for r in &out.reports {
        info!("{} cs={} subset={}", r.question_id, r.cs, r.subset);
    }
    write_jsonl(&dir.join(PARTITION), &out.reports)?;
    manifest.divide.status = PhaseStatus::Complete;
    manifest.save(&dir)?;
    let stats = backend.stats();
    Ok(DivideSummary {
        run_id: id,
        records: out.records.len(),
        reports: out.reports,
        cache_hits: stats.hits,
        fetches: stats.fetches,
    })
}

fn execute_divide(
    manifest: &RunManifest,
    questions: &[Question],
    params: &DivideParams,
    backend: &dyn Backend,
    transcript: Option<&Path>,
) -> Result<DivideOutput> {
    match manifest.divide.mode {
        DivideMode::Sample => run_divide(questions, params, backend, transcript),
        DivideMode::Verify => run_verify_divide(questions, params, backend, transcript),
    }
}

/// Divide-phase artifacts of a completed run.
pub struct DivideArtifacts {
    pub manifest: RunManifest,
    pub questions: Vec<Question>,
    pub reports: Vec<ConfidenceReport>,
    pub records: Vec<InferenceRecord>,
}

pub fn load_divide(dir: &Path) -> Result<DivideArtifacts> {
    let manifest = RunManifest::load(dir)?;
    if manifest.divide.status != PhaseStatus::Complete {
        return Err(Error::Phase {
            phase: "divide",
            reason: format!("status is {:?}; rerun `divide`", manifest.divide.status).to_lowercase(),
        });
    }
    let partition = dir.join(relative(&manifest.divide.partition));
    if !partition.exists() {
        return Err(Error::Phase {
            phase: "divide",
            reason: format!("partition file {} is missing", partition.display()),
        });
    }
    let questions = load_dataset(&dir.join(relative(&manifest.dataset_file)), manifest.schema)?;
    let reports: Vec<ConfidenceReport> = read_jsonl(&partition)?;
    let transcript = dir.join(relative(&manifest.divide.transcript));
    let records = if transcript.exists() { read_transcript(&transcript)? } else { Vec::new() };
    Ok(DivideArtifacts {
        manifest,
        questions,
        reports,
        records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConquerSummary {
    pub tag: String,
    pub outcomes: Vec<OutcomeSummary>,
    pub records: usize,
    pub cache_hits: u64,
    pub fetches: u64,
}

/// Runs one conquer strategy over the selected subsets of a divided run.
pub fn cmd_conquer(cfg: &RunConfig) -> Result<ConquerSummary> {
    let resolved = cfg.resolve()?;
    let dir = cfg.out_dir().to_path_buf();
    let art = load_divide(&dir)?;
    let mut manifest = art.manifest.clone();
    let params = resolved.conquer.clone();
    if params.strategy.uses_rationales() && art.records.is_empty() {
        return Err(Error::Phase {
            phase: "divide",
            reason: format!("{} needs the divide transcript, which is missing", params.strategy),
        });
    }
    let tag = params.tag();
    let record = ConquerRecord {
        tag: tag.clone(),
        strategy: params.strategy,
        self_consistency: params.sc.is_on(),
        rationale_select: params.select,
        ablation: params.ablation,
        tail: params.tail,
        subsets: resolved.subsets.clone(),
        status: PhaseStatus::Pending,
        transcript: format!("conquer/{tag}.transcript.jsonl"),
        outcomes: format!("conquer/{tag}.outcomes.jsonl"),
    };
    let backend = open_backend(&manifest, &dir, &art.questions, cfg.backend.timeout_secs, cfg.backend.max_attempts)?;
    let result = execute_conquer(&art, &record, &params, &backend, Some(&dir.join(&record.transcript)));
    let mut record = record;
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            record.status = PhaseStatus::Partial;
            upsert_conquer(&mut manifest, record);
            manifest.save(&dir)?;
            return Err(e);
        }
    };
    for o in &outcome.0 {
        info!(
            "{} {} -> {}",
            o.question_id,
            tag,
            o.final_answer.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "unparsed".into())
        );
    }
    write_jsonl(&dir.join(&record.outcomes), &outcome.0)?;
    record.status = PhaseStatus::Complete;
    upsert_conquer(&mut manifest, record);
    manifest.report.status = PhaseStatus::Pending;
    manifest.save(&dir)?;
    let stats = backend.stats();
    Ok(ConquerSummary {
        tag,
        outcomes: outcome.0,
        records: outcome.1,
        cache_hits: stats.hits,
        fetches: stats.fetches,
    })
}

fn upsert_conquer(manifest: &mut RunManifest, record: ConquerRecord) {
    match manifest.conquer.iter_mut().find(|c| c.tag == record.tag) {
        Some(slot) => *slot = record,
        None => manifest.conquer.push(record),
    }
}

fn execute_conquer(
    art: &DivideArtifacts,
    record: &ConquerRecord,
    params: &ConquerParams,
    backend: &dyn Backend,
    transcript: Option<&Path>,
) -> Result<(Vec<OutcomeSummary>, usize)> {
    let by_id: BTreeMap<&str, &Question> = art.questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut items = Vec::new();
    for r in &art.reports {
        if record.subsets.iter().any(|s| s.matches(r)) {
            let q = by_id.get(r.question_id.as_str()).ok_or_else(|| {
                Error::invalid(format!("partition names unknown question `{}`", r.question_id))
            })?;
            items.push((*q, r));
        }
    }
    let out = run_conquer(&items, &art.records, params, backend, transcript)?;
    let summaries = out
        .outcomes
        .iter()
        .zip(&items)
        .map(|(o, (_, r))| o.summary(r.subset))
        .collect();
    Ok((summaries, out.records.len()))
}

/// Report input read back from a run directory.
pub fn load_conquer_runs(dir: &Path, manifest: &RunManifest) -> Result<(Vec<ConquerRun>, bool)> {
    let mut partial = false;
    let mut runs = Vec::new();
    for c in &manifest.conquer {
        let path = dir.join(relative(&c.outcomes));
        if c.status != PhaseStatus::Complete || !path.exists() {
            partial = true;
            continue;
        }
        runs.push(ConquerRun {
            tag: c.tag.clone(),
            self_consistency: c.self_consistency,
            outcomes: read_jsonl(&path)?,
        });
    }
    Ok((runs, partial))
}

/// Writes the three report files for a run directory.
pub fn cmd_report(dir: &Path) -> Result<eval::Report> {
    let art = load_divide(dir)?;
    let (runs, partial) = load_conquer_runs(dir, &art.manifest)?;
    let report = build_report(&ReportInput {
        run_id: &art.manifest.run_id,
        spec: &art.manifest.dataset,
        divide_mode: art.manifest.divide.mode.as_str(),
        questions: &art.questions,
        reports: &art.reports,
        divide_records: &art.records,
        conquer: &runs,
        partial,
    })?;
    emit_report(dir, &report, &art.manifest.dataset.name)?;
    let mut manifest = art.manifest;
    manifest.report = ReportRecord {
        status: if partial { PhaseStatus::Partial } else { PhaseStatus::Complete },
        files: REPORT_FILES.iter().map(|s| s.to_string()).collect(),
    };
    manifest.save(dir)?;
    Ok(report)
}

/// Accuracy differences between two report directories, as printable lines.
pub fn compare_runs(a: &Path, b: &Path) -> Result<Vec<String>> {
    let load = |d: &Path| -> Result<serde_json::Value> {
        let p = d.join("report.json");
        if !p.exists() {
            return Err(Error::Phase {
                phase: "report",
                reason: format!("{} is missing; run `report` first", p.display()),
            });
        }
        read_json(&p)
    };
    let (ra, rb) = (load(a)?, load(b)?);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    let mut lines = vec![format!("{:<28} {:<11} {:>8} {:>8} {:>8}", "strategy", "subset", "a", "b", "delta")];
    for (strategy, subset, va, vb) in eval::compare_reports(&ra, &rb) {
        let delta = match (va, vb) {
            (Some(x), Some(y)) => format!("{:+.2}", y - x),
            _ => "-".into(),
        };
        lines.push(format!("{strategy:<28} {subset:<11} {:>8} {:>8} {delta:>8}", fmt(va), fmt(vb)));
    }
    Ok(lines)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayStats {
    pub records: u64,
    pub cache_hits: u64,
    pub fetches: u64,
    /// Every replayed partition and outcome file matched the stored one.
    pub identical: bool,
}

/// Re-executes every completed phase of a run from its cache alone.
pub fn replay_run(dir: &Path, parallelism: usize) -> Result<ReplayStats> {
    let art = load_divide(dir)?;
    let manifest = &art.manifest;
    let cache = ResponseCache::open(&manifest.cache_path(dir), None)?;
    let params = DivideParams {
        spec: manifest.dataset.clone(),
        temperature: crate::divide::DIVIDE_TEMPERATURE,
        max_output_tokens: manifest.backend.max_output_tokens,
        parallelism,
        tail: manifest.divide.tail,
    };
    let out = execute_divide(manifest, &art.questions, &params, &cache, None)?;
    let mut records = out.records.len() as u64;
    let mut identical = jsonl_bytes(&out.reports)? == read_bytes(&dir.join(&manifest.divide.partition))?;
    let art = DivideArtifacts {
        records: out.records,
        ..art
    };
    for c in art.manifest.conquer.iter().filter(|c| c.status == PhaseStatus::Complete) {
        let p = c.params(&art.manifest.dataset, art.manifest.backend.max_output_tokens, parallelism);
        let (outcomes, n) = execute_conquer(&art, c, &p, &cache, None)?;
        records += n as u64;
        identical &= jsonl_bytes(&outcomes)? == read_bytes(&dir.join(&c.outcomes))?;
    }
    let stats = cache.stats();
    Ok(ReplayStats {
        records,
        cache_hits: stats.hits,
        fetches: stats.fetches,
        identical,
    })
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Where simulated questions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    #[serde(default = "five")]
    pub num_choices: usize,
    pub family: ProfileFamily,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn five() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub sc: bool,
    #[serde(default)]
    pub rationale_select: Option<String>,
    #[serde(default)]
    pub ablation: Option<String>,
    #[serde(default)]
    pub tail: Option<String>,
}

/// Where an accuracy is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every question, high-confidence ones keeping their divide answer.
    All,
    /// Only the questions the conquer run touched.
    Conquered,
}

/// A property checked at the end of `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Divide-phase majority accuracy strictly decreases along `subsets`.
    AccuracyOrder { subsets: Vec<SubsetSelector> },
    /// Spearman correlation between confidence and majority correctness.
    Spearman { min: f64 },
    /// Run `better` beats run `worse` by at least `min_pp` percentage points.
    StrategyGain {
        better: String,
        worse: String,
        #[serde(default = "conquered")]
        scope: Scope,
        min_pp: f64,
    },
    /// Share of questions in a subset lies within `[min, max]`.
    SubsetShare {
        subset: SubsetSelector,
        #[serde(default)]
        min: f64,
        #[serde(default = "one")]
        max: f64,
    },
}

fn conquered() -> Scope {
    Scope::Conquered
}

fn one() -> f64 {
    1.0
}

/// A simulation profile file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    /// Dataset and profile files, used when there is no generator.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub noise_rate: Option<f64>,
    #[serde(default)]
    pub uplift: Option<f64>,
    #[serde(default)]
    pub divide_base: Option<u32>,
    #[serde(default)]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub subsets: Option<Vec<String>>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

impl SimulationSpec {
    /// Reads a JSON or TOML profile file, by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: String| Error::Validation(vec![format!("{}: {e}", path.display())]);
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssertionResult {
    pub description: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateSummary {
    pub divide: DivideSummary,
    pub conquer: Vec<ConquerSummary>,
    pub report: eval::Report,
    pub assertions: Vec<AssertionResult>,
}

/// Full synthetic run: divide, every configured conquer strategy, report,
/// then the profile's assertions. Failed assertions are an
/// [`Error::Assertion`] after all files have been written.
pub fn cmd_simulate(cfg: &RunConfig, sim: &SimulationSpec) -> Result<SimulateSummary> {
    let dir = cfg.out_dir().to_path_buf();
    let mut cfg = cfg.clone();
    cfg.backend.kind = BackendKind::Mock;
    if let Some(t) = sim.divide_base {
        cfg.dataset.divide_base = t;
    }
    if let Some(x) = sim.noise_rate {
        cfg.simulator.noise_rate = x;
    }
    if let Some(x) = sim.uplift {
        cfg.simulator.uplift = x;
    }
    if let Some(s) = &sim.subsets {
        cfg.conquer.subsets = s.clone();
    }
    cfg.resolve()?;
    match (&sim.generator, &sim.dataset, &sim.profiles) {
        (Some(g), _, _) => {
            let (questions, profiles) = generate_synthetic(g.n, g.num_choices, &g.family, g.seed.unwrap_or(cfg.run.seed))?;
            let src = dir.join("input");
            save_dataset(&src.join("synthetic.jsonl"), &questions)?;
            write_profiles(&src.join("profiles.json"), &profiles)?;
            cfg.dataset.path = Some(src.join("synthetic.jsonl"));
            cfg.dataset.schema = DatasetSchema::McqJsonl;
            cfg.simulator.profiles = Some(src.join("profiles.json"));
        }
        (None, Some(d), Some(p)) => {
            cfg.dataset.path = Some(d.clone());
            cfg.simulator.profiles = Some(p.clone());
        }
        (None, _, _) if cfg.dataset.path.is_some() && cfg.simulator.profiles.is_some() => {}
        _ => {
            return Err(Error::Validation(vec![
                "simulation profile needs either `generator` or `dataset` and `profiles`".into(),
            ]))
        }
    }
    let strategies = if sim.strategies.is_empty() {
        vec![StrategySpec {
            strategy: Strategy::Fcr,
            sc: false,
            rationale_select: None,
            ablation: None,
            tail: None,
        }]
    } else {
        sim.strategies.clone()
    };

    let divide = cmd_divide(&cfg)?;
    let mut conquer = Vec::new();
    for s in &strategies {
        let mut c = cfg.clone();
        c.conquer.strategy = s.strategy.to_string();
        c.conquer.sc = s.sc;
        c.conquer.rationale_select = s.rationale_select.clone().unwrap_or_else(|| "longest".into());
        c.conquer.ablation = s.ablation.clone();
        c.conquer.tail = s.tail.clone();
        conquer.push(cmd_conquer(&c)?);
    }
    let report = cmd_report(&dir)?;
    let art = load_divide(&dir)?;
    let assertions = sim
        .assertions
        .iter()
        .map(|a| check_assertion(a, &art, &report))
        .collect::<Result<Vec<_>>>()?;
    let failed: Vec<String> = assertions.iter().filter(|a| !a.passed).map(|a| a.description.clone()).collect();
    let summary = SimulateSummary {
        divide,
        conquer,
        report,
        assertions,
    };
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(Error::Assertion(failed))
    }
}

fn row_accuracy(report: &eval::Report, strategy: &str, subset: &str) -> Option<Fraction> {
    report
        .rows
        .iter()
        .find(|r| r.strategy == strategy && r.subset == subset)
        .and_then(|r| r.accuracy)
}

fn fmt_opt(f: Option<Fraction>) -> String {
    f.map(|f| format!("{:.2}", eval::percent(f))).unwrap_or_else(|| "n/a".into())
}

/// Spearman correlation between each question's confidence score and
/// whether its divide majority is correct.
pub fn confidence_correctness_spearman(questions: &[Question], reports: &[ConfidenceReport]) -> Option<f64> {
    let gold: BTreeMap<&str, _> = questions.iter().map(|q| (q.id.as_str(), q.gold.as_ref())).collect();
    let (mut cs, mut ok) = (Vec::new(), Vec::new());
    for r in reports {
        cs.push(fraction_to_f64(confidence_score(&r.histogram)));
        let correct = majority_answer(&r.histogram).ok().as_ref() == gold.get(r.question_id.as_str()).copied().flatten();
        ok.push(if correct { 1.0 } else { 0.0 });
    }
    eval::spearman(&cs, &ok)
}

fn check_assertion(a: &Assertion, art: &DivideArtifacts, report: &eval::Report) -> Result<AssertionResult> {
    Ok(match a {
        Assertion::AccuracyOrder { subsets } => {
            let accs: Vec<Option<Fraction>> = subsets.iter().map(|s| row_accuracy(report, "prior", s.as_str())).collect();
            let passed = accs.iter().all(Option::is_some) && accs.windows(2).all(|w| w[0] > w[1]);
            let shown: Vec<String> = subsets
                .iter()
                .zip(&accs)
                .map(|(s, a)| format!("{s}={}", fmt_opt(*a)))
                .collect();
            AssertionResult {
                description: format!("accuracy order {}", shown.join(" > ")),
                passed,
            }
        }
        Assertion::Spearman { min } => {
            let rho = confidence_correctness_spearman(&art.questions, &art.reports);
            AssertionResult {
                description: format!(
                    "spearman(cs, correct) = {} > {min}",
                    rho.map(|r| format!("{r:.3}")).unwrap_or_else(|| "undefined".into())
                ),
                passed: rho.is_some_and(|r| r > *min),
            }
        }
        Assertion::StrategyGain {
            better,
            worse,
            scope,
            min_pp,
        } => {
            let acc = |tag: &str| match scope {
                Scope::All => row_accuracy(report, &format!("overall-{tag}"), "all"),
                Scope::Conquered => {
                    let rows: Vec<&eval::SubsetMetrics> = report
                        .rows
                        .iter()
                        .filter(|r| r.strategy == tag && matches!(r.subset.as_str(), "med" | "low"))
                        .collect();
                    let n: u64 = rows.iter().map(|r| r.n).sum();
                    let c: u64 = rows.iter().map(|r| r.correct).sum();
                    (n > 0).then(|| Fraction::new(c, n))
                }
            };
            let (b, w) = (acc(better), acc(worse));
            let gain = match (b, w) {
                (Some(b), Some(w)) => Some(eval::percent(b) - eval::percent(w)),
                _ => None,
            };
            AssertionResult {
                description: format!(
                    "{better} ({}) beats {worse} ({}) by >= {min_pp} pp",
                    fmt_opt(b),
                    fmt_opt(w)
                ),
                passed: gain.is_some_and(|g| g >= *min_pp),
            }
        }
        Assertion::SubsetShare { subset, min, max } => {
            let n = art.reports.iter().filter(|r| subset.matches(r)).count();
            let share = n as f64 / art.reports.len().max(1) as f64;
            AssertionResult {
                description: format!("share of {subset} = {share:.3} within [{min}, {max}]"),
                passed: (*min..=*max).contains(&share),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [dataset]
            divide_base = 7
            mu = 0.9
            nu = "1/2"

            [conquer]
            strategy = "pkr"
            sc = true
            rationale_select = "shortest"
            "#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.spec.mu, Fraction::new(9, 10));
        assert_eq!(r.spec.nu, Fraction::new(1, 2));
        assert_eq!(r.conquer.sc, ScMode::On { samples: 7 });
        assert_eq!(r.conquer.select, RationaleSelect::Shortest);
        assert_eq!(cfg.run.parallelism, 4);
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [dataset]
            divide_base = 1
            mu = 0.6
            nu = 0.8
            [run]
            parallelism = 0
            [conquer]
            strategy = "magic"
            subsets = ["high"]
            "#,
        )
        .unwrap();
        match cfg.resolve() {
            Err(Error::Validation(v)) => assert!(v.len() >= 5, "{v:?}"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml_str("[dataset]\nbogus = 1").is_err());
    }

    #[test]
    fn simulation_spec_parses() {
        let spec: SimulationSpec = serde_json::from_str(
            r#"{
              "generator": {"n": 10, "family": {"family": "uniform", "p_min": 0.2, "p_max": 0.9}},
              "strategies": [{"strategy": "fcr", "sc": true}],
              "assertions": [
                {"kind": "spearman", "min": 0.3},
                {"kind": "strategy_gain", "better": "fcr-sc", "worse": "ztcot", "min_pp": 5},
                {"kind": "accuracy_order", "subsets": ["high", "med", "low"]}
              ]
            }"#,
        )
        .unwrap();
        assert_eq!(spec.generator.unwrap().num_choices, 5);
        assert_eq!(spec.assertions.len(), 3);
    }
}
