//! Domain types: questions, choice labels, label mappings and dataset
//! parameters, plus JSONL ingestion and cloze-to-multiple-choice conversion.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Exact fraction in `[0, 1]` used for confidence scores, thresholds and accuracies.
pub type Fraction = Ratio<u64>;

/// A choice label: `A` through `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Label(u8);

impl Label {
    pub const MAX: usize = 26;

    pub fn from_index(index: usize) -> Result<Self> {
        if index < Self::MAX {
            Ok(Label(index as u8))
        } else {
            Err(Error::invalid(format!(
                "choice position {} has no label: only {} labels (A-Z) are supported",
                index + 1,
                Self::MAX
            )))
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then(|| Label(c as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for Label {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next().and_then(Label::from_char), chars.next()) {
            (Some(l), None) => Ok(l),
            _ => Err(Error::invalid(format!("`{s}` is not a choice label"))),
        }
    }
}

/// An answer value: a choice label for multiple-choice questions or a
/// normalized number for cloze questions.
///
/// Serialized as a plain string (`"B"`, `"18"`); the two forms never collide.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Answer {
    Label(Label),
    Number(String),
}

impl Answer {
    pub fn label(&self) -> Option<Label> {
        match self {
            Answer::Label(l) => Some(*l),
            Answer::Number(_) => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Label(l) => l.fmt(f),
            Answer::Number(n) => f.write_str(n),
        }
    }
}

impl From<Answer> for String {
    fn from(a: Answer) -> String {
        a.to_string()
    }
}

impl From<Label> for Answer {
    fn from(l: Label) -> Self {
        Answer::Label(l)
    }
}

impl TryFrom<String> for Answer {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Answer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(l) = s.parse::<Label>() {
            return Ok(Answer::Label(l));
        }
        normalize_number(s)
            .map(Answer::Number)
            .ok_or_else(|| Error::invalid(format!("`{s}` is neither a label nor a number")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: Label,
    pub content: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Mcq,
    Cloze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub choices: Vec<Choice>,
    pub gold: Option<Answer>,
    pub source: String,
    pub kind: QuestionKind,
    /// Opaque per-record metadata carried through from the input file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Value>,
}

impl Question {
    /// Builds a multiple-choice question, assigning labels from `A` in order.
    pub fn mcq(
        id: impl Into<String>,
        text: impl Into<String>,
        contents: &[String],
        gold: Option<Label>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let q = Question {
            id: id.into(),
            text: text.into(),
            choices: relabel_choices(contents)?,
            gold: gold.map(Answer::Label),
            source: source.into(),
            kind: QuestionKind::Mcq,
            meta: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn cloze(
        id: impl Into<String>,
        text: impl Into<String>,
        gold: Option<&str>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let gold = match gold {
            Some(g) => Some(Answer::Number(normalize_number(g).ok_or_else(|| {
                Error::invalid(format!("cloze gold `{g}` is not numeric"))
            })?)),
            None => None,
        };
        let q = Question {
            id: id.into(),
            text: text.into(),
            choices: Vec::new(),
            gold,
            source: source.into(),
            kind: QuestionKind::Cloze,
            meta: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.choices.iter().map(|c| c.label).collect()
    }

    pub fn choice(&self, label: Label) -> Option<&Choice> {
        self.choices.get(label.index()).filter(|c| c.label == label)
    }

    /// Gold label or number; evaluation requires it.
    pub fn require_gold(&self) -> Result<&Answer> {
        self.gold.as_ref().ok_or_else(|| Error::MissingGold {
            ids: vec![self.id.clone()],
        })
    }

    /// Checks every structural invariant of a question.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            QuestionKind::Mcq => {
                if self.choices.is_empty() {
                    return Err(Error::invalid(format!("question `{}` has no choices", self.id)));
                }
                let mut seen = HashSet::new();
                for (i, c) in self.choices.iter().enumerate() {
                    if c.label.index() != i {
                        return Err(Error::invalid(format!(
                            "question `{}`: labels are not contiguous from A (found {} at position {})",
                            self.id,
                            c.label,
                            i + 1
                        )));
                    }
                    let norm = normalize_whitespace(&c.content);
                    if norm.is_empty() {
                        return Err(Error::invalid(format!(
                            "question `{}`: choice {} is empty",
                            self.id, c.label
                        )));
                    }
                    if !seen.insert(norm) {
                        return Err(Error::invalid(format!(
                            "question `{}`: duplicate choice content at {}",
                            self.id, c.label
                        )));
                    }
                }
                match &self.gold {
                    None => {}
                    Some(Answer::Label(l)) if l.index() < self.choices.len() => {}
                    Some(g) => {
                        return Err(Error::invalid(format!(
                            "question `{}`: gold `{g}` is not one of its labels",
                            self.id
                        )))
                    }
                }
            }
            QuestionKind::Cloze => {
                if !self.choices.is_empty() {
                    return Err(Error::invalid(format!(
                        "cloze question `{}` must not carry choices",
                        self.id
                    )));
                }
                match &self.gold {
                    None => {}
                    Some(Answer::Number(n)) if normalize_number(n).as_deref() == Some(n) => {}
                    Some(g) => {
                        return Err(Error::invalid(format!(
                            "cloze question `{}`: gold `{g}` is not a normalized number",
                            self.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Maps labels of a rewritten choice list back to the answers they stood
/// for in the original question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub origin: String,
    pub forward: BTreeMap<Label, Answer>,
}

impl LabelMapping {
    pub fn new(origin: impl Into<String>, targets: Vec<Answer>) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut seen = HashSet::new();
        for (i, target) in targets.into_iter().enumerate() {
            if !seen.insert(target.clone()) {
                return Err(Error::invalid(format!("label mapping target `{target}` repeated")));
            }
            forward.insert(Label::from_index(i)?, target);
        }
        Ok(LabelMapping {
            origin: origin.into(),
            forward,
        })
    }

    pub fn apply(&self, label: Label) -> Option<&Answer> {
        self.forward.get(&label)
    }

    /// The new label that stands for `original`, if it survived.
    pub fn inverse(&self, original: &Answer) -> Option<Label> {
        self.forward
            .iter()
            .find_map(|(new, orig)| (orig == original).then_some(*new))
    }

    /// Maps an answer emitted in the rewritten label space back to the original space.
    pub fn map_answer(&self, emitted: &Answer) -> Option<Answer> {
        emitted.label().and_then(|l| self.apply(l).cloned())
    }

    /// `self` followed by `outer`: labels of `self`'s targets are looked up in `outer`.
    pub fn then(&self, outer: &LabelMapping) -> Result<LabelMapping> {
        let targets = self
            .forward
            .values()
            .map(|a| {
                outer.map_answer(a).ok_or_else(|| {
                    Error::invalid(format!("label mapping composition: `{a}` has no image"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMapping::new(outer.origin.clone(), targets)
    }
}

/// Per-dataset run parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub divide_base: u32,
    pub mu: Fraction,
    pub nu: Fraction,
}

impl DatasetSpec {
    /// Default thresholds: μ = 0.8, ν = 0.6.
    pub fn default_mu() -> Fraction {
        Fraction::new(4, 5)
    }

    pub fn default_nu() -> Fraction {
        Fraction::new(3, 5)
    }

    pub fn new(name: impl Into<String>, divide_base: u32, mu: Fraction, nu: Fraction) -> Result<Self> {
        let spec = DatasetSpec {
            name: name.into(),
            divide_base,
            mu,
            nu,
        };
        let problems = spec.problems();
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub(crate) fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.divide_base < 2 {
            out.push(format!("divide_base must be at least 2 (got {})", self.divide_base));
        }
        if self.mu == Fraction::from_integer(0) || self.mu > Fraction::from_integer(1) {
            out.push(format!("mu must lie in (0, 1] (got {})", self.mu));
        }
        if self.nu >= self.mu {
            out.push(format!("nu must be smaller than mu (got nu={}, mu={})", self.nu, self.mu));
        }
        out
    }
}

/// Parses a decimal such as `0.8` or a ratio such as `4/5` into an exact fraction in `[0, 1]`.
pub fn parse_fraction(s: &str) -> Result<Fraction> {
    let s = s.trim();
    let bad = || Error::invalid(format!("`{s}` is not a fraction in [0, 1]"));
    let value = if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        Fraction::new(n, d)
    } else {
        let canonical = normalize_number(s).ok_or_else(bad)?;
        if canonical.starts_with('-') {
            return Err(bad());
        }
        let (int, frac) = canonical.split_once('.').unwrap_or((&canonical, ""));
        if frac.len() > 18 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = int.parse().map_err(|_| bad())?;
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Fraction::new(
            int.checked_mul(den).and_then(|v| v.checked_add(frac_val)).ok_or_else(bad)?,
            den,
        )
    };
    if value > Fraction::from_integer(1) {
        return Err(bad());
    }
    Ok(value)
}

pub fn fraction_to_f64(f: Fraction) -> f64 {
    *f.numer() as f64 / *f.denom() as f64
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical rendering of a numeric answer.
///
/// Commas, currency symbols and surrounding whitespace are dropped; the value
/// is then re-rendered without leading zeros, trailing fractional zeros or a
/// sign on zero. Returns `None` when the string is not a plain decimal.
pub fn normalize_number(raw: &str) -> Option<String> {
    let mut s: String = raw
        .trim()
        .chars()
        .filter(|c| !matches!(c, ',' | '$' | '€' | '£' | '¥') && !c.is_whitespace())
        .collect();
    if s.ends_with('.') {
        s.pop();
    }
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(&s)),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let mut out = String::new();
    if negative && !(int == "0" && frac.is_empty()) {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

/// Assigns labels `A`, `B`, ... to `contents` in input order.
///
/// Fails on empty input, on duplicate contents (whitespace-normalized,
/// case-sensitive) and on more than 26 choices.
pub fn relabel_choices(contents: &[String]) -> Result<Vec<Choice>> {
    if contents.is_empty() {
        return Err(Error::invalid("choice list is empty"));
    }
    let mut seen = HashSet::new();
    contents
        .iter()
        .enumerate()
        .map(|(i, content)| {
            let norm = normalize_whitespace(content);
            if norm.is_empty() {
                return Err(Error::invalid(format!("choice {} is empty", i + 1)));
            }
            if !seen.insert(norm) {
                return Err(Error::invalid(format!("duplicate choice content `{content}`")));
            }
            Ok(Choice {
                label: Label::from_index(i)?,
                content: content.clone(),
            })
        })
        .collect()
}

/// Builds a multiple-choice question from the distinct numeric answers of
/// earlier attempts at a cloze question.
pub fn cloze_to_mcq(q: &Question, prior_answers: &[String]) -> Result<(Question, LabelMapping)> {
    if q.kind != QuestionKind::Cloze {
        return Err(Error::invalid(format!("question `{}` is not cloze-style", q.id)));
    }
    if prior_answers.is_empty() {
        return Err(Error::invalid(format!(
            "question `{}`: no prior answers to build choices from",
            q.id
        )));
    }
    let mut distinct: Vec<String> = Vec::new();
    for raw in prior_answers {
        let n = normalize_number(raw)
            .ok_or_else(|| Error::invalid(format!("prior answer `{raw}` is not numeric")))?;
        if !distinct.contains(&n) {
            distinct.push(n);
        }
    }
    let choices = relabel_choices(&distinct)?;
    let gold = match &q.gold {
        Some(Answer::Number(g)) => distinct
            .iter()
            .position(|d| d == g)
            .map(|i| Answer::Label(choices[i].label)),
        _ => None,
    };
    let mapping = LabelMapping::new(q.id.clone(), distinct.into_iter().map(Answer::Number).collect())?;
    let mcq = Question {
        id: q.id.clone(),
        text: q.text.clone(),
        choices,
        gold,
        source: q.source.clone(),
        kind: QuestionKind::Mcq,
        meta: q.meta.clone(),
    };
    Ok((mcq, mapping))
}

/// Supported dataset file layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSchema {
    McqJsonl,
    ClozeJsonl,
}

impl FromStr for DatasetSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcq-jsonl" | "mcq" => Ok(DatasetSchema::McqJsonl),
            "cloze-jsonl" | "cloze" => Ok(DatasetSchema::ClozeJsonl),
            _ => Err(Error::invalid(format!("unknown dataset schema `{s}`"))),
        }
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a JSONL dataset. The file stem becomes each question's `source`.
pub fn load_dataset(path: &Path, schema: DatasetSchema) -> Result<Vec<Question>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source = dataset_name(path);
    let mut out: Vec<Question> = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |field: &'static str, reason: String| Error::Dataset {
            path: path.to_path_buf(),
            line: line_no,
            field,
            reason,
        };
        let value: Value =
            serde_json::from_str(&line).map_err(|e| err("<record>", format!("not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("<record>", "expected a JSON object".into()))?;
        let q = parse_record(obj, schema, &source).map_err(|(field, reason)| err(field, reason))?;
        if !ids.insert(q.id.clone()) {
            return Err(err("id", format!("duplicate id `{}`", q.id)));
        }
        out.push(q);
    }
    Ok(out)
}

type FieldError = (&'static str, String);

fn str_field<'a>(obj: &'a Map<String, Value>, field: &'static str) -> Result<&'a str, FieldError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err((field, "expected a string".into())),
        None => Err((field, "missing".into())),
    }
}

fn parse_record(
    obj: &Map<String, Value>,
    schema: DatasetSchema,
    source: &str,
) -> Result<Question, FieldError> {
    let id = str_field(obj, "id")?.to_string();
    if id.is_empty() {
        return Err(("id", "empty id".into()));
    }
    let text = str_field(obj, "question")?.to_string();
    let meta = match obj.get("meta") {
        None | Some(Value::Null) => None,
        Some(v @ Value::Object(_)) => Some(v.clone()),
        Some(_) => return Err(("meta", "expected an object".into())),
    };
    let gold_raw = match obj.get("gold") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.as_str()),
        Some(_) => return Err(("gold", "expected a string".into())),
    };
    let q = match schema {
        DatasetSchema::McqJsonl => {
            let contents = match obj.get("choices") {
                Some(Value::Array(items)) => items
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or(("choices", "expected an array of strings".to_string()))?,
                Some(_) => return Err(("choices", "expected an array of strings".into())),
                None => return Err(("choices", "missing".into())),
            };
            let choices = relabel_choices(&contents).map_err(|e| ("choices", strip_prefix(e)))?;
            let gold = match gold_raw {
                None => None,
                Some(g) => {
                    let label: Label = g.parse().map_err(|_| ("gold", format!("`{g}` is not a label")))?;
                    if label.index() >= choices.len() {
                        return Err(("gold", format!("`{g}` is not one of the {} labels", choices.len())));
                    }
                    Some(Answer::Label(label))
                }
            };
            Question {
                id,
                text,
                choices,
                gold,
                source: source.to_string(),
                kind: QuestionKind::Mcq,
                meta,
            }
        }
        DatasetSchema::ClozeJsonl => {
            if obj.contains_key("choices") {
                return Err(("choices", "cloze records carry no choices".into()));
            }
            let gold = match gold_raw {
                None => None,
                Some(g) => Some(Answer::Number(
                    normalize_number(g).ok_or(("gold", format!("`{g}` is not numeric")))?,
                )),
            };
            Question {
                id,
                text,
                choices: Vec::new(),
                gold,
                source: source.to_string(),
                kind: QuestionKind::Cloze,
                meta,
            }
        }
    };
    q.validate().map_err(|e| ("<record>", strip_prefix(e)))?;
    Ok(q)
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Invalid(m) => m,
        other => other.to_string(),
    }
}

/// Renders one question as a dataset line in the schema matching its kind.
pub fn question_record(q: &Question) -> Value {
    let mut obj = Map::new();
    obj.insert("id".into(), json!(q.id));
    obj.insert("question".into(), json!(q.text));
    if q.kind == QuestionKind::Mcq {
        obj.insert(
            "choices".into(),
            Value::Array(q.choices.iter().map(|c| json!(c.content)).collect()),
        );
    }
    if let Some(g) = &q.gold {
        obj.insert("gold".into(), json!(g.to_string()));
    }
    if let Some(meta) = &q.meta {
        obj.insert("meta".into(), meta.clone());
    }
    Value::Object(obj)
}

/// Writes questions as JSONL; reading the file back yields the same list.
pub fn save_dataset(path: &Path, questions: &[Question]) -> Result<()> {
    let mut buf = Vec::new();
    for q in questions {
        serde_json::to_writer(&mut buf, &question_record(q))?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}
