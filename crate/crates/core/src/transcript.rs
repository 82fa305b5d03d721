use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Completion, CompletionRequest, Phase};
use crate::error::{Error, Result};
use crate::extract::{extract_for, extract_verdict, ExtractedAnswer, RuleId};
use crate::model::{Answer, Label};

/// One model completion for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub question_id: String,
    pub phase: Phase,
    /// Strategy or prompt family that produced the request (`ztcot`, `fcr`, `verify`, ...).
    pub prompt_kind: String,
    pub sample_index: u32,
    pub key: String,
    pub temperature: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
    pub rule: RuleId,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub backend_tag: String,
}

impl InferenceRecord {
    fn build(req: &CompletionRequest, prompt_kind: &str, completion: Completion, extracted: ExtractedAnswer) -> Self {
        InferenceRecord {
            question_id: req.question_id.clone(),
            phase: req.phase,
            prompt_kind: prompt_kind.to_string(),
            sample_index: req.sample_index,
            key: req.key(),
            temperature: req.temperature,
            answer: extracted.answer(),
            verdict: extracted.verdict(),
            rule: extracted.rule,
            text: completion.text,
            prompt_tokens: completion.prompt_tokens,
            output_tokens: completion.output_tokens,
            backend_tag: completion.backend_tag,
        }
    }

    /// Record for an answer-bearing completion; `labels` empty means numeric extraction.
    pub fn answer(req: &CompletionRequest, prompt_kind: &str, completion: Completion, labels: &[Label]) -> Self {
        let extracted = extract_for(&completion.text, labels);
        Self::build(req, prompt_kind, completion, extracted)
    }

    pub fn verdict(req: &CompletionRequest, completion: Completion) -> Self {
        let extracted = extract_verdict(&completion.text);
        Self::build(req, "verify", completion, extracted)
    }

    pub fn completion(&self) -> Completion {
        Completion {
            text: self.text.clone(),
            prompt_tokens: self.prompt_tokens,
            output_tokens: self.output_tokens,
            backend_tag: self.backend_tag.clone(),
        }
    }

    pub fn is_unparsed(&self) -> bool {
        self.answer.is_none() && self.verdict.is_none()
    }
}

/// Sorts records into canonical transcript order.
pub fn sort_records(records: &mut [InferenceRecord]) {
    records.sort_by(|a, b| {
        (&a.question_id, a.phase, &a.prompt_kind, a.sample_index).cmp(&(
            &b.question_id,
            b.phase,
            &b.prompt_kind,
            b.sample_index,
        ))
    });
}

pub fn write_transcript(path: &Path, records: &[InferenceRecord]) -> Result<()> {
    crate::io::write_jsonl(path, records)
}

pub fn read_transcript(path: &Path) -> Result<Vec<InferenceRecord>> {
    crate::io::read_jsonl(path)
}

/// Runs `f` over `items` on at most `parallelism` threads, returning results
/// in input order.
pub fn run_parallel<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if parallelism <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// A request together with how its completion should be interpreted.
pub struct Job<'a> {
    pub request: CompletionRequest,
    pub prompt_kind: &'a str,
    /// Labels for choice extraction; empty for numeric answers.
    pub labels: Vec<Label>,
    pub verdict: bool,
}

/// Executes jobs concurrently. Completed records are returned even when
/// some jobs fail; the first failure in input order is reported alongside.
pub fn execute(jobs: &[Job<'_>], backend: &dyn Backend, parallelism: usize) -> (Vec<InferenceRecord>, Option<Error>) {
    let results = run_parallel(jobs, parallelism, |job| {
        backend.complete(&job.request).map(|c| {
            if job.verdict {
                InferenceRecord::verdict(&job.request, c)
            } else {
                InferenceRecord::answer(&job.request, job.prompt_kind, c, &job.labels)
            }
        })
    });
    let mut records = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    (records, first_err)
}
