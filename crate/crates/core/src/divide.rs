//! Divide phase: sample each question `t` times, histogram the extracted
//! answers, score confidence as the top answer's share of all samples, and
//! split the dataset into high / medium / low confidence subsets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CompletionRequest, Phase};
use crate::error::{Error, Result};
use crate::model::{fraction_to_f64, Answer, DatasetSpec, Fraction, Question};
use crate::prompt::{self, Tail};
use crate::transcript::{execute, sort_records, write_transcript, InferenceRecord, Job};

/// Sampling temperature for divide-phase queries.
pub const DIVIDE_TEMPERATURE: f64 = 0.7;

/// Confidence at or below which a low-subset question is in the bottom bin.
pub fn low_split() -> Fraction {
    Fraction::new(2, 5)
}

/// Counts of extracted answers over `total_samples` completions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerHistogram {
    pub counts: BTreeMap<Answer, u32>,
    /// Sample index at which each answer first appeared.
    pub first_seen: BTreeMap<Answer, u32>,
    pub total_samples: u32,
    pub unparsed_count: u32,
}

impl AnswerHistogram {
    /// Builds a histogram from `(sample_index, answer)` pairs; `None` is an
    /// unparsed completion.
    pub fn from_samples(samples: impl IntoIterator<Item = (u32, Option<Answer>)>) -> Self {
        let mut samples: Vec<_> = samples.into_iter().collect();
        samples.sort_by_key(|(i, _)| *i);
        let mut h = AnswerHistogram::default();
        for (idx, answer) in samples {
            h.total_samples += 1;
            match answer {
                Some(a) => {
                    *h.counts.entry(a.clone()).or_insert(0) += 1;
                    h.first_seen.entry(a).or_insert(idx);
                }
                None => h.unparsed_count += 1,
            }
        }
        h
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a InferenceRecord>) -> Self {
        Self::from_samples(records.into_iter().map(|r| (r.sample_index, r.answer.clone())))
    }

    pub fn parsed(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// Answers ordered by descending count, then earliest first appearance.
    pub fn ranked(&self) -> Vec<Answer> {
        let mut out: Vec<&Answer> = self.counts.keys().collect();
        out.sort_by_key(|a| (std::cmp::Reverse(self.counts[*a]), self.first_seen[*a]));
        out.into_iter().cloned().collect()
    }
}

/// Share of all samples taken by the most frequent answer; zero when no
/// sample parsed. Unparsed samples stay in the denominator.
pub fn confidence_score(h: &AnswerHistogram) -> Fraction {
    match h.counts.values().max() {
        Some(&max) if h.total_samples > 0 => Fraction::new(max as u64, h.total_samples as u64),
        _ => Fraction::from_integer(0),
    }
}

/// Majority answer; ties go to the answer that appeared first.
pub fn majority_answer(h: &AnswerHistogram) -> Result<Answer> {
    h.ranked()
        .into_iter()
        .next()
        .ok_or(Error::EmptyInput("majority vote"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    High,
    Med,
    Low,
}

impl Subset {
    /// `cs > mu` → high, `nu < cs <= mu` → med, `cs <= nu` → low.
    pub fn classify(cs: Fraction, mu: Fraction, nu: Fraction) -> Self {
        if cs > mu {
            Subset::High
        } else if cs > nu {
            Subset::Med
        } else {
            Subset::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::High => "high",
            Subset::Med => "med",
            Subset::Low => "low",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Subset refined by splitting low at [`low_split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineBin {
    High,
    Med,
    LowTop,
    LowBottom,
}

impl FineBin {
    pub fn classify(cs: Fraction, mu: Fraction, nu: Fraction) -> Self {
        match Subset::classify(cs, mu, nu) {
            Subset::High => FineBin::High,
            Subset::Med => FineBin::Med,
            Subset::Low if cs > low_split() => FineBin::LowTop,
            Subset::Low => FineBin::LowBottom,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FineBin::High => "high",
            FineBin::Med => "med",
            FineBin::LowTop => "low_top",
            FineBin::LowBottom => "low_bottom",
        }
    }
}

/// A selectable slice of the partition: a subset or a fine bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSelector {
    High,
    Med,
    Low,
    LowTop,
    LowBottom,
}

impl SubsetSelector {
    pub const ALL: [SubsetSelector; 5] = [
        SubsetSelector::High,
        SubsetSelector::Med,
        SubsetSelector::Low,
        SubsetSelector::LowTop,
        SubsetSelector::LowBottom,
    ];

    pub fn matches(self, report: &ConfidenceReport) -> bool {
        match self {
            SubsetSelector::High => report.subset == Subset::High,
            SubsetSelector::Med => report.subset == Subset::Med,
            SubsetSelector::Low => report.subset == Subset::Low,
            SubsetSelector::LowTop => report.fine_bin == FineBin::LowTop,
            SubsetSelector::LowBottom => report.fine_bin == FineBin::LowBottom,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetSelector::High => "high",
            SubsetSelector::Med => "med",
            SubsetSelector::Low => "low",
            SubsetSelector::LowTop => "low_top",
            SubsetSelector::LowBottom => "low_bottom",
        }
    }
}

impl fmt::Display for SubsetSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sel| sel.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown subset `{s}`")))
    }
}

/// Per-question divide outcome. Serialized as one partition-file line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionLine", into = "PartitionLine")]
pub struct ConfidenceReport {
    pub question_id: String,
    pub histogram: AnswerHistogram,
    pub cs: Fraction,
    pub subset: Subset,
    pub fine_bin: FineBin,
    /// Set when the subset came from a single-inference verify check.
    pub verdict: Option<bool>,
}

impl ConfidenceReport {
    pub fn from_histogram(question_id: impl Into<String>, histogram: AnswerHistogram, spec: &DatasetSpec) -> Self {
        let cs = confidence_score(&histogram);
        ConfidenceReport {
            question_id: question_id.into(),
            subset: Subset::classify(cs, spec.mu, spec.nu),
            fine_bin: FineBin::classify(cs, spec.mu, spec.nu),
            cs,
            histogram,
            verdict: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionLine {
    question_id: String,
    counts: BTreeMap<Answer, u32>,
    cs: f64,
    cs_exact: String,
    subset: Subset,
    fine_bin: FineBin,
    total_samples: u32,
    unparsed_count: u32,
    first_seen: BTreeMap<Answer, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verdict: Option<bool>,
}

impl From<ConfidenceReport> for PartitionLine {
    fn from(r: ConfidenceReport) -> Self {
        PartitionLine {
            question_id: r.question_id,
            counts: r.histogram.counts,
            cs: fraction_to_f64(r.cs),
            cs_exact: r.cs.to_string(),
            subset: r.subset,
            fine_bin: r.fine_bin,
            total_samples: r.histogram.total_samples,
            unparsed_count: r.histogram.unparsed_count,
            first_seen: r.histogram.first_seen,
            verdict: r.verdict,
        }
    }
}

impl TryFrom<PartitionLine> for ConfidenceReport {
    type Error = Error;

    fn try_from(l: PartitionLine) -> Result<Self> {
        let cs = crate::model::parse_fraction(&l.cs_exact)?;
        Ok(ConfidenceReport {
            question_id: l.question_id,
            histogram: AnswerHistogram {
                counts: l.counts,
                first_seen: l.first_seen,
                total_samples: l.total_samples,
                unparsed_count: l.unparsed_count,
            },
            cs,
            subset: l.subset,
            fine_bin: l.fine_bin,
            verdict: l.verdict,
        })
    }
}

/// Question ids per subset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub high: Vec<String>,
    pub med: Vec<String>,
    pub low: Vec<String>,
}

impl Partition {
    pub fn get(&self, s: Subset) -> &[String] {
        match s {
            Subset::High => &self.high,
            Subset::Med => &self.med,
            Subset::Low => &self.low,
        }
    }
}

/// Splits reports by their confidence score. Every report lands in exactly one subset.
pub fn partition(reports: &[ConfidenceReport], mu: Fraction, nu: Fraction) -> Partition {
    let mut p = Partition::default();
    for r in reports {
        let bucket = match Subset::classify(r.cs, mu, nu) {
            Subset::High => &mut p.high,
            Subset::Med => &mut p.med,
            Subset::Low => &mut p.low,
        };
        bucket.push(r.question_id.clone());
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivideParams {
    pub spec: DatasetSpec,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub parallelism: usize,
    pub tail: Tail,
}

impl DivideParams {
    pub fn new(spec: DatasetSpec) -> Self {
        DivideParams {
            spec,
            temperature: DIVIDE_TEMPERATURE,
            max_output_tokens: 512,
            parallelism: 4,
            tail: Tail::StepByStep,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivideOutput {
    /// One report per question, in input order.
    pub reports: Vec<ConfidenceReport>,
    /// All divide-phase records in transcript order.
    pub records: Vec<InferenceRecord>,
}

fn divide_request(q: &Question, params: &DivideParams, sample_index: u32) -> Result<CompletionRequest> {
    CompletionRequest::new(
        &q.id,
        Phase::Divide,
        sample_index,
        prompt::render(q, None, params.tail),
        params.temperature,
        params.max_output_tokens,
    )
}

fn finish(records: &mut Vec<InferenceRecord>, err: Option<Error>, transcript: Option<&Path>) -> Result<()> {
    sort_records(records);
    if let Some(path) = transcript {
        write_transcript(path, records)?;
    }
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Samples every question `divide_base` times and scores it.
///
/// The transcript (if a path is given) is written before returning, also
/// when a backend error aborts the run; completed samples are then kept.
pub fn run_divide(
    questions: &[Question],
    params: &DivideParams,
    backend: &dyn Backend,
    transcript: Option<&Path>,
) -> Result<DivideOutput> {
    let problems = params.spec.problems();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let t = params.spec.divide_base;
    let mut jobs = Vec::with_capacity(questions.len() * t as usize);
    for q in questions {
        for i in 0..t {
            jobs.push(Job {
                request: divide_request(q, params, i)?,
                prompt_kind: "ztcot",
                labels: q.labels(),
                verdict: false,
            });
        }
    }
    let (mut records, err) = execute(&jobs, backend, params.parallelism);
    finish(&mut records, err, transcript)?;
    let reports = reports_from_records(questions, &records, &params.spec);
    Ok(DivideOutput { reports, records })
}

/// Rebuilds divide reports from a transcript.
pub fn reports_from_records(questions: &[Question], records: &[InferenceRecord], spec: &DatasetSpec) -> Vec<ConfidenceReport> {
    let by_question = group_divide_records(records);
    questions
        .iter()
        .map(|q| {
            let recs = by_question.get(q.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            ConfidenceReport::from_histogram(&q.id, AnswerHistogram::from_records(recs.iter().copied()), spec)
        })
        .collect()
}

/// Divide-phase answer records grouped by question, sorted by sample index.
pub fn group_divide_records(records: &[InferenceRecord]) -> BTreeMap<&str, Vec<&InferenceRecord>> {
    let mut by_question: BTreeMap<&str, Vec<&InferenceRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == Phase::Divide) {
        by_question.entry(r.question_id.as_str()).or_default().push(r);
    }
    for v in by_question.values_mut() {
        v.sort_by_key(|r| r.sample_index);
    }
    by_question
}

/// Verify request for a single earlier answer.
pub fn verify_request(q: &Question, proposed: &Answer, max_output_tokens: u32) -> Result<CompletionRequest> {
    CompletionRequest::new(&q.id, Phase::Verify, 0, prompt::render_verify(q, proposed), 0.0, max_output_tokens)
}

/// Asks the model to check one earlier answer. A `true` verdict means high
/// confidence; `false` or an unreadable verdict means low.
pub fn verify_divide(
    q: &Question,
    single_record: &InferenceRecord,
    backend: &dyn Backend,
    max_output_tokens: u32,
) -> Result<(Subset, Option<InferenceRecord>)> {
    let Some(proposed) = &single_record.answer else {
        return Ok((Subset::Low, None));
    };
    let req = verify_request(q, proposed, max_output_tokens)?;
    let record = InferenceRecord::verdict(&req, backend.complete(&req)?);
    let subset = if record.verdict == Some(true) {
        Subset::High
    } else {
        Subset::Low
    };
    Ok((subset, Some(record)))
}

/// Cheap divide: one sample per question plus one verify query.
pub fn run_verify_divide(
    questions: &[Question],
    params: &DivideParams,
    backend: &dyn Backend,
    transcript: Option<&Path>,
) -> Result<DivideOutput> {
    let jobs = questions
        .iter()
        .map(|q| {
            Ok(Job {
                request: divide_request(q, params, 0)?,
                prompt_kind: "ztcot",
                labels: q.labels(),
                verdict: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut records, err) = execute(&jobs, backend, params.parallelism);
    if err.is_some() {
        finish(&mut records, err, transcript)?;
    }
    let by_id: BTreeMap<&str, &InferenceRecord> = records.iter().map(|r| (r.question_id.as_str(), r)).collect();
    let verify_jobs = questions
        .iter()
        .filter_map(|q| {
            let proposed = by_id.get(q.id.as_str())?.answer.as_ref()?;
            Some(verify_request(q, proposed, params.max_output_tokens).map(|request| Job {
                request,
                prompt_kind: "verify",
                labels: Vec::new(),
                verdict: true,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (verify_records, err) = execute(&verify_jobs, backend, params.parallelism);
    let verdicts: BTreeMap<String, Option<bool>> =
        verify_records.iter().map(|r| (r.question_id.clone(), r.verdict)).collect();
    records.extend(verify_records);
    finish(&mut records, err, transcript)?;

    let reports = questions
        .iter()
        .map(|q| {
            let single: Vec<&InferenceRecord> = records
                .iter()
                .filter(|r| r.question_id == q.id && r.phase == Phase::Divide)
                .collect();
            let histogram = AnswerHistogram::from_records(single);
            let cs = confidence_score(&histogram);
            let verdict = verdicts.get(&q.id).copied().flatten();
            let subset = if verdict == Some(true) { Subset::High } else { Subset::Low };
            ConfidenceReport {
                question_id: q.id.clone(),
                histogram,
                cs,
                subset,
                fine_bin: if subset == Subset::High { FineBin::High } else { FineBin::LowBottom },
                verdict: Some(verdict == Some(true)),
            }
        })
        .collect();
    Ok(DivideOutput { reports, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Label;

    fn a(c: char) -> Answer {
        Answer::Label(Label::from_char(c).unwrap())
    }

    fn hist(answers: &[Option<char>]) -> AnswerHistogram {
        AnswerHistogram::from_samples(answers.iter().enumerate().map(|(i, c)| (i as u32, c.map(a))))
    }

    fn spec() -> DatasetSpec {
        DatasetSpec::new("t", 5, DatasetSpec::default_mu(), DatasetSpec::default_nu()).unwrap()
    }

    #[test]
    fn confidence_scores() {
        let h = hist(&[Some('A'), Some('A'), Some('B'), Some('A'), Some('C')]);
        assert_eq!(h.counts[&a('A')], 3);
        assert_eq!(confidence_score(&h), Fraction::new(3, 5));
        let r = ConfidenceReport::from_histogram("q", h, &spec());
        assert_eq!(r.subset, Subset::Low);

        let uniform = hist(&[Some('A'), Some('B'), Some('C'), Some('D'), Some('E')]);
        assert_eq!(confidence_score(&uniform), Fraction::new(1, 5));

        let none = hist(&[None; 5]);
        assert_eq!(confidence_score(&none), Fraction::from_integer(0));
        assert_eq!(none.unparsed_count, 5);
        let r = ConfidenceReport::from_histogram("q", none, &spec());
        assert_eq!((r.subset, r.fine_bin), (Subset::Low, FineBin::LowBottom));

        let certain = hist(&[Some('A'); 5]);
        let r = ConfidenceReport::from_histogram("q", certain, &spec());
        assert_eq!((r.cs, r.subset), (Fraction::from_integer(1), Subset::High));
    }

    #[test]
    fn unparsed_samples_stay_in_denominator() {
        let h = hist(&[Some('A'), Some('A'), None, Some('A'), None]);
        assert_eq!(confidence_score(&h), Fraction::new(3, 5));
        assert_eq!(h.parsed() + h.unparsed_count, h.total_samples);
    }

    #[test]
    fn boundaries_are_strict_at_mu_and_inclusive_at_nu() {
        let (mu, nu) = (DatasetSpec::default_mu(), DatasetSpec::default_nu());
        let f = |k| Fraction::new(k, 5);
        assert_eq!(Subset::classify(f(5), mu, nu), Subset::High);
        assert_eq!(Subset::classify(f(4), mu, nu), Subset::Med);
        assert_eq!(Subset::classify(f(3), mu, nu), Subset::Low);
        assert_eq!(FineBin::classify(f(1), mu, nu), FineBin::LowBottom);
        assert_eq!(FineBin::classify(f(2), mu, nu), FineBin::LowBottom);
        assert_eq!(FineBin::classify(Fraction::new(1, 2), mu, nu), FineBin::LowTop);
        assert_eq!(FineBin::classify(f(3), mu, nu), FineBin::LowTop);
    }

    #[test]
    fn majority_votes() {
        assert_eq!(majority_answer(&hist(&[Some('A'), Some('B'), Some('A'), Some('B'), Some('A')])).unwrap(), a('A'));
        assert_eq!(majority_answer(&hist(&[Some('B'); 5])).unwrap(), a('B'));
        assert!(majority_answer(&hist(&[None, None])).is_err());
    }

    #[test]
    fn tie_break_matches_first_occurrence_scan() {
        // Brute force: among answers with the top count, the one whose first
        // index in the raw list is smallest.
        let lists: Vec<Vec<Option<char>>> = vec![
            vec![Some('A'), Some('A'), Some('B'), Some('B')],
            vec![Some('B'), Some('A'), Some('A'), Some('B')],
            vec![None, Some('C'), Some('D'), Some('D'), Some('C')],
            vec![Some('E'), Some('D'), Some('C'), Some('B'), Some('A')],
        ];
        for list in lists {
            let max = list.iter().flatten().map(|x| list.iter().filter(|y| **y == Some(*x)).count()).max().unwrap();
            let expected = list
                .iter()
                .flatten()
                .find(|x| list.iter().filter(|y| **y == Some(**x)).count() == max)
                .unwrap();
            assert_eq!(majority_answer(&hist(&list)).unwrap(), a(*expected), "{list:?}");
        }
    }

    #[test]
    fn partition_line_round_trip() {
        let r = ConfidenceReport::from_histogram("q9", hist(&[Some('A'), Some('B'), Some('A'), None]), &spec());
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"cs\":0.5"));
        assert!(line.contains("\"subset\":\"low\""));
        assert!(line.contains("\"fine_bin\":\"low_top\""));
        let back: ConfidenceReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
