//! Conquer phase: re-query medium and low confidence questions using what
//! the divide phase learned about them.
//!
//! * ZTCOT re-asks the original prompt.
//! * PKR adds one rationale per distinct earlier answer.
//! * FCR keeps only the choices that were answered before, relabeled.
//! * COM1 / COM2 combine both and differ only in the closing instruction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, CompletionRequest, Phase};
use crate::divide::{majority_answer, AnswerHistogram, ConfidenceReport, Subset};
use crate::error::{Error, Result};
use crate::extract::{extract_for, rationale_of};
use crate::model::{cloze_to_mcq, relabel_choices, Answer, Label, LabelMapping, Question, QuestionKind};
use crate::prompt::{self, Tail};
use crate::transcript::{execute, sort_records, write_transcript, InferenceRecord, Job};

pub const SC_TEMPERATURE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ztcot,
    Pkr,
    Fcr,
    Com1,
    Com2,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Ztcot, Strategy::Pkr, Strategy::Fcr, Strategy::Com1, Strategy::Com2];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ztcot => "ztcot",
            Strategy::Pkr => "pkr",
            Strategy::Fcr => "fcr",
            Strategy::Com1 => "com1",
            Strategy::Com2 => "com2",
        }
    }

    pub fn uses_rationales(self) -> bool {
        matches!(self, Strategy::Pkr | Strategy::Com1 | Strategy::Com2)
    }

    pub fn filters_choices(self) -> bool {
        matches!(self, Strategy::Fcr | Strategy::Com1 | Strategy::Com2)
    }

    pub fn default_tail(self) -> Tail {
        match self {
            Strategy::Ztcot => Tail::StepByStep,
            Strategy::Pkr | Strategy::Com1 => Tail::DelveQuestion,
            Strategy::Fcr | Strategy::Com2 => Tail::DelveChoices,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScMode {
    Off,
    On { samples: u32 },
}

impl ScMode {
    pub fn is_on(self) -> bool {
        matches!(self, ScMode::On { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub text: String,
    /// Length in characters.
    pub length: usize,
    pub sample_index: u32,
}

/// Rationales of the divide samples that reached the same answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleCluster {
    pub answer: Answer,
    pub rationales: Vec<Rationale>,
}

impl RationaleCluster {
    fn first_index(&self) -> u32 {
        self.rationales.iter().map(|r| r.sample_index).min().unwrap_or(u32::MAX)
    }
}

/// Groups parsed divide samples by answer. `labels` must be the label set
/// the samples were extracted against (empty for numeric answers).
pub fn build_clusters<'a>(records: impl IntoIterator<Item = &'a InferenceRecord>, labels: &[Label]) -> Vec<RationaleCluster> {
    let mut by_answer: BTreeMap<Answer, Vec<Rationale>> = BTreeMap::new();
    for r in records {
        let Some(answer) = &r.answer else { continue };
        let extracted = extract_for(&r.text, labels);
        let text = rationale_of(&r.text, &extracted).trim().to_string();
        by_answer.entry(answer.clone()).or_default().push(Rationale {
            length: text.chars().count(),
            text,
            sample_index: r.sample_index,
        });
    }
    by_answer
        .into_iter()
        .map(|(answer, mut rationales)| {
            rationales.sort_by_key(|r| r.sample_index);
            RationaleCluster { answer, rationales }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleSelect {
    Longest,
    Random(u64),
    Shortest,
}

impl FromStr for RationaleSelect {
    type Err = Error;

    /// `longest`, `shortest`, `random` or `random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "longest" => Ok(RationaleSelect::Longest),
            None if s == "shortest" => Ok(RationaleSelect::Shortest),
            None if s == "random" => Ok(RationaleSelect::Random(0)),
            Some(("random", seed)) => seed
                .parse()
                .map(RationaleSelect::Random)
                .map_err(|_| Error::invalid(format!("bad seed in `{s}`"))),
            _ => Err(Error::invalid(format!("unknown rationale selection `{s}`"))),
        }
    }
}

impl fmt::Display for RationaleSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RationaleSelect::Longest => f.write_str("longest"),
            RationaleSelect::Shortest => f.write_str("shortest"),
            RationaleSelect::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

/// Picks one rationale per cluster, ordered by descending cluster size and
/// then by earliest first appearance.
pub fn select_rationales(clusters: &[RationaleCluster], select: RationaleSelect) -> Result<Vec<(Answer, String)>> {
    if clusters.is_empty() {
        return Err(Error::EmptyInput("rationale selection"));
    }
    let mut order: Vec<&RationaleCluster> = clusters.iter().collect();
    order.sort_by_key(|c| (std::cmp::Reverse(c.rationales.len()), c.first_index()));
    let mut rng = match select {
        RationaleSelect::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    order
        .into_iter()
        .map(|c| {
            let by_index = |r: &&Rationale| r.sample_index;
            let pick = match select {
                RationaleSelect::Longest => c
                    .rationales
                    .iter()
                    .min_by_key(|r| (std::cmp::Reverse(r.length), by_index(r))),
                RationaleSelect::Shortest => c.rationales.iter().min_by_key(|r| (r.length, by_index(r))),
                RationaleSelect::Random(_) => c.rationales.choose(rng.as_mut().unwrap()),
            };
            pick.map(|r| (c.answer.clone(), r.text.clone()))
                .ok_or_else(|| Error::invalid(format!("empty rationale cluster for `{}`", c.answer)))
        })
        .collect()
}

/// Keeps the choices that were answered at least once, in original label
/// order, relabeled from `A`. The mapping sends new labels to old ones.
pub fn filter_choices(q: &Question, h: &AnswerHistogram) -> Result<(Question, LabelMapping)> {
    if q.kind != QuestionKind::Mcq {
        return Err(Error::invalid(format!("question `{}` has no choices to filter", q.id)));
    }
    if h.counts.is_empty() {
        return Err(Error::EmptySupport {
            question_id: q.id.clone(),
        });
    }
    let mut kept = Vec::with_capacity(h.counts.len());
    for answer in h.counts.keys() {
        match answer.label().and_then(|l| q.choice(l)) {
            Some(c) => kept.push(c),
            None => {
                return Err(Error::invalid(format!(
                    "question `{}`: answer `{answer}` is not one of its labels",
                    q.id
                )))
            }
        }
    }
    kept.sort_by_key(|c| c.label);
    restrict(q, &kept.iter().map(|c| c.label).collect::<Vec<_>>())
}

/// The sub-question made of `labels` (in the given order), relabeled.
fn restrict(q: &Question, labels: &[Label]) -> Result<(Question, LabelMapping)> {
    let contents: Vec<String> = labels
        .iter()
        .map(|l| {
            q.choice(*l)
                .map(|c| c.content.clone())
                .ok_or_else(|| Error::invalid(format!("question `{}` has no choice {l}", q.id)))
        })
        .collect::<Result<_>>()?;
    let choices = relabel_choices(&contents)?;
    let gold = q
        .gold
        .as_ref()
        .and_then(|g| labels.iter().position(|l| Some(*l) == g.label()))
        .map(|i| Answer::Label(choices[i].label));
    let mapping = LabelMapping::new(q.id.clone(), labels.iter().map(|l| Answer::Label(*l)).collect())?;
    let filtered = Question {
        choices,
        gold,
        ..q.clone()
    };
    Ok((filtered, mapping))
}

/// How to rebuild the choice list in the choice-list ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AblationMode {
    /// All original choices.
    Full,
    /// Gold plus `k - 1` random incorrect choices.
    RandomK { k: usize, seed: u64 },
    /// Gold plus every earlier answer.
    WithPrior,
    /// Gold plus every incorrect choice that was never answered.
    WithoutPrior,
    /// Gold plus one random never-answered incorrect choice.
    WithoutPrior2 { seed: u64 },
}

impl AblationMode {
    pub fn name(&self) -> String {
        match self {
            AblationMode::Full => "full".into(),
            AblationMode::RandomK { k, .. } => format!("random_k{k}"),
            AblationMode::WithPrior => "with_prior".into(),
            AblationMode::WithoutPrior => "without_prior".into(),
            AblationMode::WithoutPrior2 { .. } => "without_prior_2".into(),
        }
    }

    /// Replaces the seed of seeded modes.
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            AblationMode::RandomK { k, .. } => AblationMode::RandomK { k, seed },
            AblationMode::WithoutPrior2 { .. } => AblationMode::WithoutPrior2 { seed },
            other => other,
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    /// `full`, `random_k:<k>`, `with_prior`, `without_prior`, `without_prior_2`.
    /// Seeded modes start with seed 0; see [`AblationMode::with_seed`].
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "with_prior" => Ok(AblationMode::WithPrior),
            "without_prior" => Ok(AblationMode::WithoutPrior),
            "without_prior_2" => Ok(AblationMode::WithoutPrior2 { seed: 0 }),
            _ => {
                let k = s
                    .strip_prefix("random_k:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown ablation mode `{s}`")))?;
                Ok(AblationMode::RandomK { k, seed: 0 })
            }
        }
    }
}

fn item_rng(seed: u64, tag: &str, question_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(question_id.as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(s)
}

fn sample_labels(rng: &mut ChaCha8Rng, pool: &[Label], k: usize) -> Vec<Label> {
    let mut pool = pool.to_vec();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.random_range(0..=i));
    }
    pool.truncate(k);
    pool
}

/// Builds an ablation choice list around the gold answer. The result keeps
/// original label order.
pub fn ablation_choices(q: &Question, mode: AblationMode, h: &AnswerHistogram) -> Result<(Question, LabelMapping)> {
    let fail = |why: &str| Error::invalid(format!("ablation `{}` on `{}`: {why}", mode.name(), q.id));
    if q.kind != QuestionKind::Mcq {
        return Err(fail("needs a multiple-choice question"));
    }
    let gold = q.gold.as_ref().and_then(Answer::label).ok_or_else(|| fail("needs a gold label"))?;
    let prior: Vec<Label> = h.counts.keys().filter_map(Answer::label).collect();
    let incorrect: Vec<Label> = q.labels().into_iter().filter(|l| *l != gold).collect();
    let unseen: Vec<Label> = incorrect.iter().copied().filter(|l| !prior.contains(l)).collect();
    let mut keep: Vec<Label> = match mode {
        AblationMode::Full => q.labels(),
        AblationMode::RandomK { k, seed } => {
            if k == 0 || k > q.choices.len() {
                return Err(fail(&format!("k={k} outside 1..={}", q.choices.len())));
            }
            let mut rng = item_rng(seed, "random_k", &q.id);
            let mut keep = sample_labels(&mut rng, &incorrect, k - 1);
            keep.push(gold);
            keep
        }
        AblationMode::WithPrior => {
            let mut keep = prior.clone();
            keep.push(gold);
            keep
        }
        AblationMode::WithoutPrior => {
            if unseen.is_empty() {
                return Err(fail("every incorrect choice was answered before"));
            }
            let mut keep = unseen.clone();
            keep.push(gold);
            keep
        }
        AblationMode::WithoutPrior2 { seed } => {
            if unseen.is_empty() {
                return Err(fail("every incorrect choice was answered before"));
            }
            let mut rng = item_rng(seed, "without_prior_2", &q.id);
            let mut keep = sample_labels(&mut rng, &unseen, 1);
            keep.push(gold);
            keep
        }
    };
    keep.sort();
    keep.dedup();
    restrict(q, &keep)
}

/// Renders a conquer prompt. `prior` answers are in `shown`'s label space.
pub fn build_prompt(shown: &Question, strategy: Strategy, prior: Option<&[(Label, String)]>, filtered: bool, tail: Option<Tail>) -> Result<String> {
    if strategy.uses_rationales() && prior.is_none() {
        return Err(Error::invalid(format!("{strategy} needs prior rationales")));
    }
    if strategy.filters_choices() && !filtered {
        return Err(Error::invalid(format!("{strategy} needs a filtered choice list")));
    }
    let prior = if strategy.uses_rationales() { prior } else { None };
    Ok(prompt::render(shown, prior, tail.unwrap_or(strategy.default_tail())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConquerParams {
    pub strategy: Strategy,
    pub sc: ScMode,
    pub select: RationaleSelect,
    pub ablation: Option<AblationMode>,
    /// Overrides the strategy's closing instruction.
    pub tail: Option<Tail>,
    pub max_output_tokens: u32,
    pub parallelism: usize,
}

impl ConquerParams {
    pub fn new(strategy: Strategy, sc: ScMode) -> Self {
        ConquerParams {
            strategy,
            sc,
            select: RationaleSelect::Longest,
            ablation: None,
            tail: None,
            max_output_tokens: 512,
            parallelism: 4,
        }
    }

    /// Short name used for file names and report rows, e.g. `fcr-sc`.
    pub fn tag(&self) -> String {
        let mut tag = self.strategy.as_str().to_string();
        if self.sc.is_on() {
            tag.push_str("-sc");
        }
        if let Some(a) = &self.ablation {
            tag.push('-');
            tag.push_str(&a.name());
        }
        if self.strategy.uses_rationales() && self.select != RationaleSelect::Longest {
            tag.push('-');
            tag.push_str(&self.select.to_string().replace(':', ""));
        }
        if let Some(t) = self.tail {
            if t != self.strategy.default_tail() {
                tag.push_str(match t {
                    Tail::StepByStep => "-prompt0",
                    Tail::DelveChoices => "-prompt1",
                    Tail::DelveQuestion => "-delveq",
                });
            }
        }
        tag
    }

    fn validate(&self) -> Result<()> {
        if let Some(a) = &self.ablation {
            if !matches!(self.strategy, Strategy::Ztcot | Strategy::Fcr) {
                return Err(Error::invalid(format!(
                    "ablation `{}` works with ztcot or fcr, not {}",
                    a.name(),
                    self.strategy
                )));
            }
        }
        if let ScMode::On { samples: 0 } = self.sc {
            return Err(Error::invalid("self-consistency needs at least one sample"));
        }
        Ok(())
    }
}

/// Final answer for one conquered question.
#[derive(Clone, Debug, PartialEq)]
pub struct ConquerOutcome {
    pub question_id: String,
    pub strategy: Strategy,
    pub self_consistency: bool,
    /// In the original question's answer space; `None` when unparsed.
    pub final_answer: Option<Answer>,
    pub records: Vec<InferenceRecord>,
    /// New label → original answer, when the prompt showed rewritten choices.
    pub mapping: Option<LabelMapping>,
    /// Only one choice survived filtering, so no query was made.
    pub short_circuit: bool,
    /// Strategy actually used when the requested one had nothing to work with.
    pub fallback: Option<Strategy>,
}

impl ConquerOutcome {
    pub fn summary(&self, subset: Subset) -> OutcomeSummary {
        OutcomeSummary {
            question_id: self.question_id.clone(),
            subset,
            strategy: self.strategy,
            self_consistency: self.self_consistency,
            final_answer: self.final_answer.clone(),
            mapping: self.mapping.clone(),
            short_circuit: self.short_circuit,
            fallback: self.fallback,
            records: self
                .records
                .iter()
                .map(|r| RecordUsage {
                    key: r.key.clone(),
                    sample_index: r.sample_index,
                    answer: r.answer.clone(),
                    prompt_tokens: r.prompt_tokens,
                    output_tokens: r.output_tokens,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordUsage {
    pub key: String,
    pub sample_index: u32,
    /// Answer as emitted, in the prompt's label space.
    pub answer: Option<Answer>,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

/// One line of an outcomes file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub question_id: String,
    pub subset: Subset,
    pub strategy: Strategy,
    pub self_consistency: bool,
    pub final_answer: Option<Answer>,
    pub mapping: Option<LabelMapping>,
    pub short_circuit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Strategy>,
    pub records: Vec<RecordUsage>,
}

/// What one item will send and how to read the answers back.
struct Plan {
    question_id: String,
    fallback: Option<Strategy>,
    mapping: Option<LabelMapping>,
    short_circuit: Option<Option<Answer>>,
    jobs: Vec<Job<'static>>,
}

fn map_back(mapping: Option<&LabelMapping>, emitted: &Answer) -> Option<Answer> {
    match mapping {
        Some(m) => m.map_answer(emitted),
        None => Some(emitted.clone()),
    }
}

fn plan_item(q: &Question, report: &ConfidenceReport, divide: &[&InferenceRecord], params: &ConquerParams) -> Result<Plan> {
    if report.question_id != q.id {
        return Err(Error::invalid(format!("report `{}` does not belong to `{}`", report.question_id, q.id)));
    }
    if report.subset == Subset::High {
        return Err(Error::invalid(format!(
            "question `{}` is in the high-confidence subset and keeps its divide answer",
            q.id
        )));
    }
    let h = &report.histogram;
    let needs_support = params.strategy != Strategy::Ztcot && params.ablation.is_none();
    let used = if needs_support && h.counts.is_empty() {
        Strategy::Ztcot
    } else {
        params.strategy
    };
    let fallback = (used != params.strategy).then_some(used);

    // The question as it will be shown, and how its labels map back.
    let (mut shown, mut mapping) = if let Some(mode) = params.ablation {
        let (aq, m) = ablation_choices(q, mode, h)?;
        (aq, Some(m))
    } else if q.kind == QuestionKind::Cloze && used != Strategy::Ztcot {
        let priors: Vec<String> = divide
            .iter()
            .filter_map(|r| match &r.answer {
                Some(Answer::Number(n)) => Some(n.clone()),
                _ => None,
            })
            .collect();
        let (mcq, m) = cloze_to_mcq(q, &priors)?;
        (mcq, Some(m))
    } else {
        (q.clone(), None)
    };

    let filtered = used.filters_choices() && params.ablation.is_none();
    if filtered {
        let mut view_hist = h.clone();
        if let Some(m) = &mapping {
            let relabel = |map: &BTreeMap<Answer, u32>| -> BTreeMap<Answer, u32> {
                map.iter()
                    .filter_map(|(a, n)| m.inverse(a).map(|l| (Answer::Label(l), *n)))
                    .collect()
            };
            view_hist.counts = relabel(&h.counts);
            view_hist.first_seen = relabel(&h.first_seen);
        }
        let (fq, m1) = filter_choices(&shown, &view_hist)?;
        mapping = Some(match &mapping {
            Some(m0) => m1.then(m0)?,
            None => m1,
        });
        shown = fq;
    }

    let prior = if used.uses_rationales() {
        let original_labels = q.labels();
        let clusters = build_clusters(divide.iter().copied(), &original_labels);
        let select = match params.select {
            RationaleSelect::Random(seed) => {
                RationaleSelect::Random(item_rng(seed, "rationale", &q.id).random())
            }
            other => other,
        };
        let picked = select_rationales(&clusters, select)?;
        Some(
            picked
                .into_iter()
                .filter_map(|(answer, text)| {
                    let label = match &mapping {
                        Some(m) => m.inverse(&answer),
                        None => answer.label(),
                    }?;
                    Some((label, text))
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let tail = params.tail.or(match params.ablation {
        Some(_) => Some(used.default_tail()),
        None => None,
    });
    let is_fcr_family = used.filters_choices();
    let text = build_prompt(&shown, used, prior.as_deref(), filtered || params.ablation.is_some(), tail)?;
    let labels = shown.labels();

    if is_fcr_family && shown.choices.len() == 1 {
        let only = Answer::Label(labels[0]);
        return Ok(Plan {
            question_id: q.id.clone(),
            fallback,
            short_circuit: Some(map_back(mapping.as_ref(), &only)),
            mapping,
            jobs: Vec::new(),
        });
    }

    let (count, temperature) = match params.sc {
        ScMode::Off => (1, 0.0),
        ScMode::On { samples } => (samples, SC_TEMPERATURE),
    };
    let jobs = (0..count)
        .map(|i| {
            Ok(Job {
                request: CompletionRequest::new(&q.id, Phase::Conquer, i, text.clone(), temperature, params.max_output_tokens)?,
                prompt_kind: used.as_str(),
                labels: labels.clone(),
                verdict: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Plan {
        question_id: q.id.clone(),
        fallback,
        mapping,
        short_circuit: None,
        jobs,
    })
}

fn finish_item(plan: Plan, mut records: Vec<InferenceRecord>, params: &ConquerParams) -> ConquerOutcome {
    records.sort_by_key(|r| r.sample_index);
    let final_answer = match plan.short_circuit {
        Some(answer) => answer,
        None => {
            let emitted = match params.sc {
                ScMode::Off => records.first().and_then(|r| r.answer.clone()),
                ScMode::On { .. } => majority_answer(&AnswerHistogram::from_records(&records)).ok(),
            };
            emitted.and_then(|a| map_back(plan.mapping.as_ref(), &a))
        }
    };
    ConquerOutcome {
        question_id: plan.question_id,
        strategy: params.strategy,
        self_consistency: params.sc.is_on(),
        final_answer,
        records,
        mapping: plan.mapping,
        short_circuit: plan.jobs.is_empty(),
        fallback: plan.fallback,
    }
}

/// Conquers a single question.
pub fn conquer_item(
    q: &Question,
    report: &ConfidenceReport,
    divide: &[&InferenceRecord],
    params: &ConquerParams,
    backend: &dyn Backend,
) -> Result<ConquerOutcome> {
    params.validate()?;
    let plan = plan_item(q, report, divide, params)?;
    let (records, err) = execute(&plan.jobs, backend, params.parallelism);
    if let Some(e) = err {
        return Err(e);
    }
    Ok(finish_item(plan, records, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConquerOutput {
    /// In input order.
    pub outcomes: Vec<ConquerOutcome>,
    /// Conquer records in transcript order.
    pub records: Vec<InferenceRecord>,
}

/// Conquers every `(question, report)` pair, fanning all queries out at once.
///
/// The transcript is written before returning, including after a backend
/// failure.
pub fn run_conquer(
    items: &[(&Question, &ConfidenceReport)],
    divide_records: &[InferenceRecord],
    params: &ConquerParams,
    backend: &dyn Backend,
    transcript: Option<&Path>,
) -> Result<ConquerOutput> {
    params.validate()?;
    let grouped = crate::divide::group_divide_records(divide_records);
    let plans = items
        .iter()
        .map(|(q, report)| {
            let divide = grouped.get(q.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            if params.strategy.uses_rationales() && divide.is_empty() && !report.histogram.counts.is_empty() {
                return Err(Error::Phase {
                    phase: "divide",
                    reason: format!("no divide transcript for `{}`; {} needs its rationales", q.id, params.strategy),
                });
            }
            plan_item(q, report, divide, params)
        })
        .collect::<Result<Vec<_>>>()?;

    // Run every job in one pool, then hand records back to their plans.
    let all_jobs: Vec<&Job<'static>> = plans.iter().flat_map(|p| &p.jobs).collect();
    let results = crate::transcript::run_parallel(&all_jobs, params.parallelism, |job| {
        backend
            .complete(&job.request)
            .map(|c| InferenceRecord::answer(&job.request, job.prompt_kind, c, &job.labels))
    });
    let mut records_by_item: Vec<Vec<InferenceRecord>> = Vec::with_capacity(plans.len());
    let mut results = results.into_iter();
    let mut first_err = None;
    for p in &plans {
        let mut recs = Vec::with_capacity(p.jobs.len());
        for r in results.by_ref().take(p.jobs.len()) {
            match r {
                Ok(rec) => recs.push(rec),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        records_by_item.push(recs);
    }
    let mut all: Vec<InferenceRecord> = records_by_item.iter().flatten().cloned().collect();
    sort_records(&mut all);
    if let Some(path) = transcript {
        write_transcript(path, &all)?;
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let outcomes = plans
        .into_iter()
        .zip(records_by_item)
        .map(|(plan, recs)| finish_item(plan, recs, params))
        .collect();
    Ok(ConquerOutput { outcomes, records: all })
}
