//! Scoring, cost accounting and report files.
//!
//! Accuracies stay exact fractions until they are written out; files show
//! percentages rounded half-up to two decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::backend::Phase;
use crate::conquer::OutcomeSummary;
use crate::divide::{majority_answer, AnswerHistogram, ConfidenceReport, SubsetSelector};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{fraction_to_f64, Answer, DatasetSpec, Fraction, Question};
use crate::transcript::InferenceRecord;

pub const SCHEMA_VERSION: u32 = 1;

/// Exact-match accuracy of `(question_id, prediction)` pairs. Unparsed
/// predictions count as wrong.
pub fn em_accuracy(predictions: &[(String, Option<Answer>)], golds: &BTreeMap<String, Answer>) -> Result<Fraction> {
    let (correct, n) = em_counts(predictions, golds)?;
    if n == 0 {
        return Err(Error::EmptyInput("accuracy"));
    }
    Ok(Fraction::new(correct, n))
}

fn em_counts(predictions: &[(String, Option<Answer>)], golds: &BTreeMap<String, Answer>) -> Result<(u64, u64)> {
    let missing: Vec<String> = predictions
        .iter()
        .filter(|(id, _)| !golds.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGold { ids: missing });
    }
    let correct = predictions
        .iter()
        .filter(|(id, p)| p.as_ref() == golds.get(id))
        .count() as u64;
    Ok((correct, predictions.len() as u64))
}

/// Gold answers by question id; fails listing every question without one.
pub fn gold_map(questions: &[Question]) -> Result<BTreeMap<String, Answer>> {
    let missing: Vec<String> = questions.iter().filter(|q| q.gold.is_none()).map(|q| q.id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingGold { ids: missing });
    }
    Ok(questions
        .iter()
        .filter_map(|q| Some((q.id.clone(), q.gold.clone()?)))
        .collect())
}

/// `Σ nᵢ·vᵢ / Σ nᵢ`, exactly.
pub fn weighted_average(rows: &[(u64, Fraction)]) -> Result<BigRational> {
    let total: u64 = rows.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return Err(Error::EmptyInput("weighted average"));
    }
    let mut sum = BigRational::zero();
    for (n, v) in rows {
        sum += BigRational::new(BigInt::from(*n) * BigInt::from(*v.numer()), BigInt::from(*v.denom()));
    }
    Ok(sum / BigRational::from_integer(BigInt::from(total)))
}

pub fn big_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Counts across several datasets: the total, the plain mean, and the
/// count-weighted accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct CountSummary {
    pub n_total: u64,
    pub n_mean: Fraction,
    pub weighted_accuracy: BigRational,
}

pub fn count_summary(rows: &[(u64, Fraction)]) -> Result<CountSummary> {
    let weighted_accuracy = weighted_average(rows)?;
    let n_total: u64 = rows.iter().map(|(n, _)| n).sum();
    Ok(CountSummary {
        n_total,
        n_mean: Fraction::new(n_total, rows.len() as u64),
        weighted_accuracy,
    })
}

/// Percentage rounded half-up to two decimals.
pub fn percent(f: Fraction) -> f64 {
    let (n, d) = (*f.numer() as u128, *f.denom() as u128);
    ((n * 10_000 + d / 2) / d) as f64 / 100.0
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetMetrics {
    pub dataset: String,
    pub subset: String,
    /// `prior` for divide-phase majority votes, `overall-<tag>` for the whole
    /// pipeline, otherwise the conquer run's tag.
    pub strategy: String,
    pub self_consistency: bool,
    pub n: u64,
    pub correct: u64,
    /// Absent when `n == 0`.
    pub accuracy: Option<Fraction>,
    pub completions: u64,
    pub unparsed_completions: u64,
    pub queries: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl SubsetMetrics {
    pub fn unparsed_rate(&self) -> Option<Fraction> {
        (self.completions > 0).then(|| Fraction::new(self.unparsed_completions, self.completions))
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "subset": self.subset,
            "strategy": self.strategy,
            "self_consistency": self.self_consistency,
            "n": self.n,
            "correct": self.correct,
            "accuracy": self.accuracy.map(percent),
            "accuracy_exact": self.accuracy.map(|a| a.to_string()),
            "unparsed_rate": self.unparsed_rate().map(percent),
            "queries": self.queries,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub queries: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl PhaseCost {
    fn add(&mut self, prompt_tokens: u64, output_tokens: u64) {
        self.queries += 1;
        self.prompt_tokens += prompt_tokens;
        self.output_tokens += output_tokens;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub by_phase: BTreeMap<String, PhaseCost>,
    /// Conquer cost per run tag.
    pub by_conquer_run: BTreeMap<String, PhaseCost>,
    pub total_queries: u64,
    /// Queries a self-consistency conquer pass would have spent on the
    /// high-confidence subset.
    pub queries_saved: u64,
}

/// Counts queries and tokens exactly from records.
pub fn cost_summary<'a>(
    records: impl IntoIterator<Item = &'a InferenceRecord>,
    conquer_runs: &[(String, &[OutcomeSummary])],
    high_count: u64,
    sc_budget: u64,
) -> CostSummary {
    let mut c = CostSummary::default();
    for r in records {
        c.by_phase.entry(r.phase.to_string()).or_default().add(r.prompt_tokens, r.output_tokens);
        c.total_queries += 1;
    }
    for (tag, outcomes) in conquer_runs {
        // Runs with nothing to do still get an entry.
        let entry = c.by_conquer_run.entry(tag.clone()).or_default();
        for u in outcomes.iter().flat_map(|o| &o.records) {
            entry.add(u.prompt_tokens, u.output_tokens);
            c.by_phase.entry(Phase::Conquer.to_string()).or_default().add(u.prompt_tokens, u.output_tokens);
            c.total_queries += 1;
        }
    }
    c.queries_saved = high_count * sc_budget;
    c
}

/// Majority-vote answer over the first `k` samples of one question.
fn majority_of_first(records: &[&InferenceRecord], k: usize) -> Option<Answer> {
    let h = AnswerHistogram::from_records(records.iter().take(k).copied());
    majority_answer(&h).ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub subset: String,
    pub sc_count: u32,
    pub accuracy: Fraction,
}

/// A finished conquer run as read back from its outcomes file.
#[derive(Clone, Debug, PartialEq)]
pub struct ConquerRun {
    pub tag: String,
    pub self_consistency: bool,
    pub outcomes: Vec<OutcomeSummary>,
}

pub struct ReportInput<'a> {
    pub run_id: &'a str,
    pub spec: &'a DatasetSpec,
    pub divide_mode: &'a str,
    pub questions: &'a [Question],
    pub reports: &'a [ConfidenceReport],
    pub divide_records: &'a [InferenceRecord],
    pub conquer: &'a [ConquerRun],
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub json: serde_json::Value,
    pub rows: Vec<SubsetMetrics>,
    pub curves: Vec<CurvePoint>,
}

fn subset_ids(reports: &[ConfidenceReport], sel: SubsetSelector) -> BTreeSet<String> {
    reports.iter().filter(|r| sel.matches(r)).map(|r| r.question_id.clone()).collect()
}

/// Builds every metric of a run.
pub fn build_report(input: &ReportInput<'_>) -> Result<Report> {
    let golds = gold_map(input.questions)?;
    let dataset = input.spec.name.clone();
    let by_q = crate::divide::group_divide_records(input.divide_records);
    let empty = Vec::new();
    let divide_of = |id: &str| by_q.get(id).unwrap_or(&empty);
    let t = input.spec.divide_base as usize;
    let prior: BTreeMap<String, Option<Answer>> = input
        .reports
        .iter()
        .map(|r| (r.question_id.clone(), majority_answer(&r.histogram).ok()))
        .collect();

    let mut rows = Vec::new();
    let mut divide_subsets = Vec::new();
    let mut curves = Vec::new();
    for sel in SubsetSelector::ALL {
        let ids = subset_ids(input.reports, sel);
        let preds: Vec<(String, Option<Answer>)> = ids.iter().map(|id| (id.clone(), prior[id].clone())).collect();
        let (correct, n) = em_counts(&preds, &golds)?;
        let recs: Vec<&InferenceRecord> = ids.iter().flat_map(|id| divide_of(id).iter().copied()).collect();
        let m = SubsetMetrics {
            dataset: dataset.clone(),
            subset: sel.as_str().into(),
            strategy: "prior".into(),
            self_consistency: true,
            n,
            correct,
            accuracy: (n > 0).then(|| Fraction::new(correct, n)),
            completions: recs.len() as u64,
            unparsed_completions: recs.iter().filter(|r| r.answer.is_none()).count() as u64,
            queries: recs.len() as u64,
            prompt_tokens: recs.iter().map(|r| r.prompt_tokens).sum(),
            output_tokens: recs.iter().map(|r| r.output_tokens).sum(),
        };
        divide_subsets.push(m.to_json());
        rows.push(m);
        if n > 0 && input.divide_mode == "sample" {
            for k in 1..=t {
                let correct = ids
                    .iter()
                    .filter(|id| majority_of_first(divide_of(id), k).as_ref() == golds.get(*id))
                    .count() as u64;
                curves.push(CurvePoint {
                    subset: sel.as_str().into(),
                    sc_count: k as u32,
                    accuracy: Fraction::new(correct, n),
                });
            }
        }
    }

    let subset_of: BTreeMap<&str, &ConfidenceReport> =
        input.reports.iter().map(|r| (r.question_id.as_str(), r)).collect();
    let mut conquer_json = Vec::new();
    for run in input.conquer {
        let by_id: BTreeMap<&str, &OutcomeSummary> =
            run.outcomes.iter().map(|o| (o.question_id.as_str(), o)).collect();
        let mut run_rows = Vec::new();
        for sel in SubsetSelector::ALL {
            let chosen: Vec<&OutcomeSummary> = run
                .outcomes
                .iter()
                .filter(|o| subset_of.get(o.question_id.as_str()).is_some_and(|r| sel.matches(r)))
                .collect();
            if chosen.is_empty() {
                continue;
            }
            run_rows.push(conquer_row(&dataset, sel.as_str(), &run.tag, run.self_consistency, &chosen, &golds)?);
        }
        // Whole pipeline: conquered answers where available, divide majority elsewhere.
        let preds: Vec<(String, Option<Answer>)> = input
            .reports
            .iter()
            .map(|r| {
                let p = match by_id.get(r.question_id.as_str()) {
                    Some(o) => o.final_answer.clone(),
                    None => prior[&r.question_id].clone(),
                };
                (r.question_id.clone(), p)
            })
            .collect();
        let all: Vec<&OutcomeSummary> = run.outcomes.iter().collect();
        let mut overall = conquer_row(&dataset, "all", &format!("overall-{}", run.tag), run.self_consistency, &all, &golds)?;
        let (correct, n) = em_counts(&preds, &golds)?;
        overall.n = n;
        overall.correct = correct;
        overall.accuracy = (n > 0).then(|| Fraction::new(correct, n));
        run_rows.push(overall);
        conquer_json.push(serde_json::json!({
            "tag": run.tag,
            "self_consistency": run.self_consistency,
            "short_circuits": run.outcomes.iter().filter(|o| o.short_circuit).count(),
            "fallbacks": run.outcomes.iter().filter(|o| o.fallback.is_some()).count(),
            "subsets": run_rows.iter().map(SubsetMetrics::to_json).collect::<Vec<_>>(),
        }));
        rows.extend(run_rows);
    }

    let high = input.reports.iter().filter(|r| SubsetSelector::High.matches(r)).count() as u64;
    let runs: Vec<(String, &[OutcomeSummary])> =
        input.conquer.iter().map(|r| (r.tag.clone(), r.outcomes.as_slice())).collect();
    let cost = cost_summary(input.divide_records, &runs, high, t as u64);

    let json = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "run_id": input.run_id,
        "dataset": dataset,
        "partial": input.partial,
        "divide": {
            "mode": input.divide_mode,
            "divide_base": input.spec.divide_base,
            "mu": fraction_to_f64(input.spec.mu),
            "nu": fraction_to_f64(input.spec.nu),
            "num_questions": input.reports.len(),
            "subsets": divide_subsets,
        },
        "conquer": conquer_json,
        "cost": cost,
    });
    Ok(Report { json, rows, curves })
}

fn conquer_row(
    dataset: &str,
    subset: &str,
    tag: &str,
    sc: bool,
    outcomes: &[&OutcomeSummary],
    golds: &BTreeMap<String, Answer>,
) -> Result<SubsetMetrics> {
    let preds: Vec<(String, Option<Answer>)> =
        outcomes.iter().map(|o| (o.question_id.clone(), o.final_answer.clone())).collect();
    let (correct, n) = em_counts(&preds, golds)?;
    let usage = outcomes.iter().flat_map(|o| &o.records);
    let completions = usage.clone().count() as u64;
    Ok(SubsetMetrics {
        dataset: dataset.into(),
        subset: subset.into(),
        strategy: tag.into(),
        self_consistency: sc,
        n,
        correct,
        accuracy: (n > 0).then(|| Fraction::new(correct, n)),
        completions,
        unparsed_completions: usage.clone().filter(|u| u.answer.is_none()).count() as u64,
        queries: completions,
        prompt_tokens: usage.clone().map(|u| u.prompt_tokens).sum(),
        output_tokens: usage.map(|u| u.output_tokens).sum(),
    })
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "dataset",
    "subset",
    "strategy",
    "self_consistency",
    "n",
    "correct",
    "accuracy",
    "unparsed_rate",
    "queries",
    "prompt_tokens",
    "output_tokens",
];

pub const CURVE_COLUMNS: [&str; 4] = ["dataset", "subset", "sc_count", "accuracy"];

fn fmt_pct(f: Option<Fraction>) -> String {
    f.map(|f| format!("{:.2}", percent(f))).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Writes `report.json`, `summary.csv` and `curves.csv` into `dir`.
pub fn emit_report(dir: &Path, report: &Report, dataset: &str) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(&report.json)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;

    let summary = csv_bytes(
        &SUMMARY_COLUMNS,
        report.rows.iter().map(|m| {
            vec![
                m.dataset.clone(),
                m.subset.clone(),
                m.strategy.clone(),
                m.self_consistency.to_string(),
                m.n.to_string(),
                m.correct.to_string(),
                fmt_pct(m.accuracy),
                fmt_pct(m.unparsed_rate()),
                m.queries.to_string(),
                m.prompt_tokens.to_string(),
                m.output_tokens.to_string(),
            ]
        }),
    )?;
    write_atomic(&dir.join("summary.csv"), &summary)?;

    let curves = csv_bytes(
        &CURVE_COLUMNS,
        report.curves.iter().map(|c| {
            vec![
                dataset.to_string(),
                c.subset.clone(),
                c.sc_count.to_string(),
                fmt_pct(Some(c.accuracy)),
            ]
        }),
    )?;
    write_atomic(&dir.join("curves.csv"), &curves)
}

/// Per-subset accuracy differences `b - a` for every strategy present in both reports.
pub fn compare_reports(a: &serde_json::Value, b: &serde_json::Value) -> Vec<(String, String, Option<f64>, Option<f64>)> {
    fn index(v: &serde_json::Value) -> BTreeMap<(String, String), Option<f64>> {
        let mut out = BTreeMap::new();
        let mut take = |rows: &serde_json::Value| {
            for row in rows.as_array().into_iter().flatten() {
                let key = (
                    row["strategy"].as_str().unwrap_or_default().to_string(),
                    row["subset"].as_str().unwrap_or_default().to_string(),
                );
                out.insert(key, row["accuracy"].as_f64());
            }
        };
        take(&v["divide"]["subsets"]);
        for run in v["conquer"].as_array().into_iter().flatten() {
            take(&run["subsets"]);
        }
        out
    }
    let (ia, ib) = (index(a), index(b));
    let keys: BTreeSet<_> = ia.keys().chain(ib.keys()).cloned().collect();
    keys.into_iter()
        .map(|k| {
            let va = ia.get(&k).copied().flatten();
            let vb = ib.get(&k).copied().flatten();
            (k.0, k.1, va, vb)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Label;

    fn ans(c: char) -> Option<Answer> {
        Some(Answer::Label(Label::from_char(c).unwrap()))
    }

    fn preds(xs: &[Option<Answer>]) -> Vec<(String, Option<Answer>)> {
        xs.iter().enumerate().map(|(i, a)| (format!("q{i}"), a.clone())).collect()
    }

    fn golds(xs: &[char]) -> BTreeMap<String, Answer> {
        xs.iter().enumerate().map(|(i, c)| (format!("q{i}"), ans(*c).unwrap())).collect()
    }

    #[test]
    fn exact_match() {
        let g = golds(&['A', 'B', 'D']);
        assert_eq!(em_accuracy(&preds(&[ans('A'), ans('B'), ans('C')]), &g).unwrap(), Fraction::new(2, 3));
        assert_eq!(em_accuracy(&preds(&[None, None, None]), &g).unwrap(), Fraction::from_integer(0));
        assert!(matches!(em_accuracy(&[], &g), Err(Error::EmptyInput(_))));
        match em_accuracy(&preds(&[ans('A'), ans('A'), ans('A'), ans('A')]), &g) {
            Err(Error::MissingGold { ids }) => assert_eq!(ids, ["q3"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weighted_average_basics() {
        let one = weighted_average(&[(10, Fraction::new(1, 2))]).unwrap();
        assert_eq!(one, BigRational::new(1.into(), 2.into()));
        assert!(weighted_average(&[(0, Fraction::new(1, 2))]).is_err());
        assert!(weighted_average(&[]).is_err());
    }

    #[test]
    fn percent_rounds_half_up() {
        assert_eq!(percent(Fraction::new(2, 3)), 66.67);
        assert_eq!(percent(Fraction::new(1, 8)), 12.5);
        assert_eq!(percent(Fraction::new(1, 20000)), 0.01);
    }

    #[test]
    fn spearman_ranks() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 1.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), [2.5, 1.0, 2.5]);
        // Textbook example with ties, computed by hand via Pearson on average ranks.
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.948_683_298).abs() < 1e-6, "{r}");
    }
}
