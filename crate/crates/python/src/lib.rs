//! Python bindings for `dnc-core`.
//!
//! Exposes the scoring primitives (confidence score, subset
//! classification, choice filtering, answer extraction, weighted average)
//! and the run commands. Run results come back as plain Python objects.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use dnc_core::divide::{confidence_score as cs_of, AnswerHistogram, FineBin};
use dnc_core::model::{self, parse_fraction, Answer, DatasetSchema, Fraction, Label};
use dnc_core::run::{self, RunConfig, SimulationSpec};
use dnc_core::{eval, extract, Error, Subset};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Transport { .. } | Error::Assertion(_) | Error::CacheMiss { .. } => PyRuntimeError::new_err(e.to_string()),
        other if other.exit_code() == 1 => PyValueError::new_err(other.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn fraction(s: &str) -> PyResult<Fraction> {
    parse_fraction(s).map_err(to_py)
}

fn parse_answers(samples: &[Option<String>]) -> PyResult<AnswerHistogram> {
    let parsed = samples
        .iter()
        .map(|s| s.as_deref().map(str::parse::<Answer>).transpose())
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    Ok(AnswerHistogram::from_samples(
        parsed.into_iter().enumerate().map(|(i, a)| (i as u32, a)),
    ))
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

/// One multiple-choice or cloze question.
#[pyclass(frozen, get_all, skip_from_py_object, module = "dnc")]
#[derive(Clone)]
struct Question {
    id: String,
    text: String,
    /// Choice contents in label order; empty for cloze questions.
    choices: Vec<String>,
    gold: Option<String>,
}

#[pymethods]
impl Question {
    #[new]
    #[pyo3(signature = (id, text, choices, gold=None))]
    fn new(id: String, text: String, choices: Vec<String>, gold: Option<String>) -> PyResult<Self> {
        let q = Question { id, text, choices, gold };
        q.to_core()?;
        Ok(q)
    }

    fn labels(&self) -> Vec<String> {
        (0..self.choices.len())
            .filter_map(|i| Label::from_index(i).ok())
            .map(|l| l.to_string())
            .collect()
    }

    /// The prompt sent in the divide phase.
    fn prompt(&self) -> PyResult<String> {
        Ok(dnc_core::prompt::render(&self.to_core()?, None, dnc_core::prompt::Tail::StepByStep))
    }

    fn __repr__(&self) -> String {
        format!("Question(id={:?}, choices={})", self.id, self.choices.len())
    }
}

impl Question {
    fn to_core(&self) -> PyResult<model::Question> {
        if self.choices.is_empty() {
            model::Question::cloze(&self.id, &self.text, self.gold.as_deref(), "python").map_err(to_py)
        } else {
            let gold = match &self.gold {
                Some(g) => Some(g.parse::<Label>().map_err(to_py)?),
                None => None,
            };
            model::Question::mcq(&self.id, &self.text, &self.choices, gold, "python").map_err(to_py)
        }
    }

    fn from_core(q: &model::Question) -> Self {
        Question {
            id: q.id.clone(),
            text: q.text.clone(),
            choices: q.choices.iter().map(|c| c.content.clone()).collect(),
            gold: q.gold.as_ref().map(|g| g.to_string()),
        }
    }
}

/// Divide-phase result for one question.
#[pyclass(frozen, get_all, module = "dnc")]
struct ConfidenceReport {
    question_id: String,
    /// Exact score as `"p/q"`.
    cs: String,
    subset: String,
    fine_bin: String,
    counts: BTreeMap<String, u32>,
    total_samples: u32,
    unparsed_count: u32,
    majority: Option<String>,
}

#[pymethods]
impl ConfidenceReport {
    fn cs_float(&self) -> PyResult<f64> {
        Ok(model::fraction_to_f64(fraction(&self.cs)?))
    }

    fn __repr__(&self) -> String {
        format!("ConfidenceReport({:?}, cs={}, subset={})", self.question_id, self.cs, self.subset)
    }
}

impl ConfidenceReport {
    fn from_core(r: &dnc_core::ConfidenceReport) -> Self {
        ConfidenceReport {
            question_id: r.question_id.clone(),
            cs: r.cs.to_string(),
            subset: r.subset.to_string(),
            fine_bin: r.fine_bin.as_str().to_string(),
            counts: r.histogram.counts.iter().map(|(a, n)| (a.to_string(), *n)).collect(),
            total_samples: r.histogram.total_samples,
            unparsed_count: r.histogram.unparsed_count,
            majority: dnc_core::divide::majority_answer(&r.histogram).ok().map(|a| a.to_string()),
        }
    }
}

/// Confidence score of sampled answers as `(numerator, denominator)`.
/// `None` entries are unparsed samples and still count towards the total.
#[pyfunction]
fn confidence_score(samples: Vec<Option<String>>) -> PyResult<(u64, u64)> {
    if samples.is_empty() {
        return Err(PyValueError::new_err("no samples"));
    }
    let cs = cs_of(&parse_answers(&samples)?);
    Ok((*cs.numer(), *cs.denom()))
}

/// Subset for a confidence score given as `"p/q"` or a decimal.
#[pyfunction]
#[pyo3(signature = (cs, mu="4/5", nu="3/5", fine=false))]
fn classify(cs: &str, mu: &str, nu: &str, fine: bool) -> PyResult<String> {
    let (cs, mu, nu) = (fraction(cs)?, fraction(mu)?, fraction(nu)?);
    if nu >= mu {
        return Err(PyValueError::new_err("nu must be smaller than mu"));
    }
    Ok(if fine {
        FineBin::classify(cs, mu, nu).as_str().to_string()
    } else {
        Subset::classify(cs, mu, nu).to_string()
    })
}

/// Keeps the answered choices of a question. Returns the new choice list
/// and a map from new label to original label.
#[pyfunction]
fn filter_choices(question: &Question, samples: Vec<Option<String>>) -> PyResult<(Vec<String>, BTreeMap<String, String>)> {
    let q = question.to_core()?;
    let (filtered, mapping) = dnc_core::conquer::filter_choices(&q, &parse_answers(&samples)?).map_err(to_py)?;
    let back = mapping.forward.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    Ok((filtered.choices.into_iter().map(|c| c.content).collect(), back))
}

/// Answer in `text`: a label among the first `num_choices`, or a number
/// when `num_choices` is 0. `None` when no rule matches.
#[pyfunction]
#[pyo3(signature = (text, num_choices=0))]
fn extract_answer(text: &str, num_choices: usize) -> PyResult<Option<String>> {
    let labels = (0..num_choices).map(Label::from_index).collect::<Result<Vec<_>, _>>().map_err(to_py)?;
    Ok(extract::extract_for(text, &labels).answer().map(|a| a.to_string()))
}

/// Count-weighted mean of accuracies, each given as `"p/q"` or a decimal in [0, 1].
#[pyfunction]
fn weighted_average(rows: Vec<(u64, String)>) -> PyResult<f64> {
    let rows = rows
        .into_iter()
        .map(|(n, a)| Ok((n, fraction(&a)?)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(eval::big_to_f64(&eval::weighted_average(&rows).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (path, schema="mcq-jsonl"))]
fn load_dataset(path: PathBuf, schema: &str) -> PyResult<Vec<Question>> {
    let schema: DatasetSchema = schema.parse().map_err(to_py)?;
    let qs = model::load_dataset(&path, schema).map_err(to_py)?;
    Ok(qs.iter().map(Question::from_core).collect())
}

fn load_config(config: Option<PathBuf>, out_dir: Option<PathBuf>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(o) = out_dir {
        cfg.run.out_dir = o;
    }
    Ok(cfg)
}

/// Runs the divide phase for a TOML run configuration.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn divide(py: Python<'_>, config: PathBuf, out_dir: Option<PathBuf>) -> PyResult<Vec<ConfidenceReport>> {
    let cfg = load_config(Some(config), out_dir)?;
    let s = py.detach(|| run::cmd_divide(&cfg)).map_err(to_py)?;
    Ok(s.reports.iter().map(ConfidenceReport::from_core).collect())
}

/// Runs one conquer strategy over a divided run. Returns the run tag.
#[pyfunction]
#[pyo3(signature = (config, strategy=None, sc=None, out_dir=None))]
fn conquer(
    py: Python<'_>,
    config: PathBuf,
    strategy: Option<String>,
    sc: Option<bool>,
    out_dir: Option<PathBuf>,
) -> PyResult<String> {
    let mut cfg = load_config(Some(config), out_dir)?;
    if let Some(s) = strategy {
        cfg.conquer.strategy = s;
    }
    if let Some(sc) = sc {
        cfg.conquer.sc = sc;
    }
    let s = py.detach(|| run::cmd_conquer(&cfg)).map_err(to_py)?;
    Ok(s.tag)
}

/// Writes the report files of a run directory and returns `report.json` as a dict.
#[pyfunction]
fn report<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| run::cmd_report(&run_dir)).map_err(to_py)?;
    json_to_py(py, &r.json)
}

/// Full simulated run from a JSON or TOML simulation profile. Returns
/// `(report, assertions)` where assertions are `(description, passed)`.
/// Failed assertions do not raise.
#[pyfunction]
#[pyo3(signature = (profile, out_dir, seed=42, parallelism=4))]
fn simulate<'py>(
    py: Python<'py>,
    profile: PathBuf,
    out_dir: PathBuf,
    seed: u64,
    parallelism: usize,
) -> PyResult<(Bound<'py, PyAny>, Vec<(String, bool)>)> {
    let spec = SimulationSpec::load(&profile).map_err(to_py)?;
    let mut cfg = load_config(None, Some(out_dir.clone()))?;
    cfg.run.seed = seed;
    cfg.run.parallelism = parallelism;
    let result = py.detach(|| run::cmd_simulate(&cfg, &spec));
    let assertions = match result {
        Ok(s) => s.assertions.into_iter().map(|a| (a.description, a.passed)).collect(),
        Err(Error::Assertion(failed)) => failed.into_iter().map(|d| (d, false)).collect(),
        Err(e) => return Err(to_py(e)),
    };
    let r = py.detach(|| run::cmd_report(&out_dir)).map_err(to_py)?;
    Ok((json_to_py(py, &r.json)?, assertions))
}

#[pymodule]
fn dnc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Question>()?;
    m.add_class::<ConfidenceReport>()?;
    m.add_function(wrap_pyfunction!(confidence_score, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(filter_choices, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(divide, m)?)?;
    m.add_function(wrap_pyfunction!(conquer, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
