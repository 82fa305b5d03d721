//! Answer extraction from raw completion text.
//!
//! Every extractor is total: text that matches no rule yields
//! [`AnswerValue::Unparsed`]. All rules use last-match semantics, since a
//! chain of thought typically mentions rejected options before the final one.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{normalize_number, Answer, Label};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    Label(Label),
    Number(String),
    Verdict(bool),
    Unparsed,
}

/// Which rule produced an [`ExtractedAnswer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    /// "answer is (X)", "answer is X", "answer: X"
    AnswerCue,
    /// "(X)" in the final line
    ParenthesizedFinalLine,
    /// bare label next to punctuation in the final line
    BareFinalLine,
    /// number after an "answer" cue
    NumberCue,
    /// last number in the final line
    NumberFinalLine,
    Verdict,
    NoMatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub value: AnswerValue,
    /// Byte range of the matched text within the completion.
    pub span: Option<Range<usize>>,
    pub rule: RuleId,
}

impl ExtractedAnswer {
    fn unparsed() -> Self {
        ExtractedAnswer {
            value: AnswerValue::Unparsed,
            span: None,
            rule: RuleId::NoMatch,
        }
    }

    pub fn is_parsed(&self) -> bool {
        self.value != AnswerValue::Unparsed
    }

    /// The label or number, if one was found.
    pub fn answer(&self) -> Option<Answer> {
        match &self.value {
            AnswerValue::Label(l) => Some(Answer::Label(*l)),
            AnswerValue::Number(n) => Some(Answer::Number(n.clone())),
            _ => None,
        }
    }

    pub fn verdict(&self) -> Option<bool> {
        match self.value {
            AnswerValue::Verdict(v) => Some(v),
            _ => None,
        }
    }
}

static ANSWER_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:(?i:so|thus|therefore),?\s+)?(?:(?i:the)\s+)?(?i:answer)\s*(?:(?i:is)\s*:?|:)\s*(?:(?i:option|choice)\s+)?(?:\(([A-Z])\)|([A-Z])\b)")
        .unwrap()
});
static PAREN_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)").unwrap());
static BARE_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").unwrap());
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?[$€£¥]?\d[\d,]*(?:\.\d+)?").unwrap());
static NUMBER_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:(?i:so|thus|therefore),?\s+)?(?:(?i:the)\s+)?(?i:answer)[^\d\n$€£¥-]*?(-?[$€£¥]?\d[\d,]*(?:\.\d+)?)").unwrap()
});
static VERDICT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(true|false)\b").unwrap());

/// Byte offset where the last `n` non-empty lines begin.
fn tail_lines_start(text: &str, n: usize) -> usize {
    let mut seen = 0;
    let mut end = text.len();
    loop {
        let slice = &text[..end];
        let start = slice.rfind('\n').map(|i| i + 1).unwrap_or(0);
        if !text[start..end].trim().is_empty() {
            seen += 1;
            if seen == n {
                return start;
            }
        }
        if start == 0 {
            return 0;
        }
        end = start - 1;
    }
}

fn label_in(m: &str, labels: &BTreeSet<Label>) -> Option<Label> {
    m.chars()
        .next()
        .and_then(Label::from_char)
        .filter(|l| labels.contains(l))
}

/// Extracts a choice label from `text`, considering only letters in `labels`.
pub fn extract_choice_answer(text: &str, labels: &[Label]) -> ExtractedAnswer {
    let labels: BTreeSet<Label> = labels.iter().copied().collect();
    if labels.is_empty() {
        return ExtractedAnswer::unparsed();
    }

    let cue = ANSWER_CUE.captures_iter(text).filter_map(|c| {
        let g = c.get(1).or_else(|| c.get(2))?;
        let label = label_in(g.as_str(), &labels)?;
        Some((label, c.get(0).unwrap().range()))
    });
    if let Some((label, span)) = cue.last() {
        return ExtractedAnswer {
            value: AnswerValue::Label(label),
            span: Some(span),
            rule: RuleId::AnswerCue,
        };
    }

    let start = tail_lines_start(text, 1);
    let final_line = &text[start..];

    let paren = PAREN_LABEL.captures_iter(final_line).filter_map(|c| {
        let label = label_in(c.get(1)?.as_str(), &labels)?;
        let r = c.get(0).unwrap().range();
        Some((label, start + r.start..start + r.end))
    });
    if let Some((label, span)) = paren.last() {
        return ExtractedAnswer {
            value: AnswerValue::Label(label),
            span: Some(span),
            rule: RuleId::ParenthesizedFinalLine,
        };
    }

    let is_punct = |c: Option<char>| c.is_some_and(|c| c.is_ascii_punctuation() && c != '\'');
    let bare = BARE_LABEL.find_iter(final_line).filter_map(|m| {
        let label = label_in(m.as_str(), &labels)?;
        let before = final_line[..m.start()].chars().next_back();
        let after = final_line[m.end()..].chars().next();
        (is_punct(before) || is_punct(after)).then(|| (label, start + m.start()..start + m.end()))
    });
    if let Some((label, span)) = bare.last() {
        return ExtractedAnswer {
            value: AnswerValue::Label(label),
            span: Some(span),
            rule: RuleId::BareFinalLine,
        };
    }

    ExtractedAnswer::unparsed()
}

/// Extracts a normalized number: the one following the last "answer" cue,
/// else the last number on the final line.
pub fn extract_numeric_answer(text: &str) -> ExtractedAnswer {
    let cue = NUMBER_CUE.captures_iter(text).filter_map(|c| {
        let g = c.get(1)?;
        let n = normalize_number(g.as_str())?;
        Some((n, c.get(0).unwrap().start()..g.end()))
    });
    if let Some((n, span)) = cue.last() {
        return ExtractedAnswer {
            value: AnswerValue::Number(n),
            span: Some(span),
            rule: RuleId::NumberCue,
        };
    }
    let start = tail_lines_start(text, 1);
    let last = NUMBER.find_iter(&text[start..]).filter_map(|m| {
        let n = normalize_number(m.as_str())?;
        Some((n, start + m.start()..start + m.end()))
    });
    if let Some((n, span)) = last.last() {
        return ExtractedAnswer {
            value: AnswerValue::Number(n),
            span: Some(span),
            rule: RuleId::NumberFinalLine,
        };
    }
    ExtractedAnswer::unparsed()
}

/// Extracts a true/false verdict from the final two non-empty lines.
pub fn extract_verdict(text: &str) -> ExtractedAnswer {
    let start = tail_lines_start(text, 2);
    match VERDICT.find_iter(&text[start..]).last() {
        Some(m) => ExtractedAnswer {
            value: AnswerValue::Verdict(m.as_str().eq_ignore_ascii_case("true")),
            span: Some(start + m.start()..start + m.end()),
            rule: RuleId::Verdict,
        },
        None => ExtractedAnswer::unparsed(),
    }
}

/// Extracts whatever answer form fits the question: a label when `labels`
/// is non-empty, a number otherwise.
pub fn extract_for(text: &str, labels: &[Label]) -> ExtractedAnswer {
    if labels.is_empty() {
        extract_numeric_answer(text)
    } else {
        extract_choice_answer(text, labels)
    }
}

/// The reasoning that precedes the final answer statement.
pub fn rationale_of<'a>(text: &'a str, extracted: &ExtractedAnswer) -> &'a str {
    match &extracted.span {
        Some(span) => text[..span.start].trim_end(),
        None => text.trim_end(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> Vec<Label> {
        s.chars().map(|c| Label::from_char(c).unwrap()).collect()
    }

    fn label(c: char) -> AnswerValue {
        AnswerValue::Label(Label::from_char(c).unwrap())
    }

    #[test]
    fn cue_rule_wins_and_takes_last_match() {
        let e = extract_choice_answer("Let me think... so the answer is (B).", &labels("ABCDE"));
        assert_eq!(e.value, label('B'));
        assert_eq!(e.rule, RuleId::AnswerCue);

        let e = extract_choice_answer("Option C is wrong; the answer is D", &labels("ABCDE"));
        assert_eq!(e.value, label('D'));

        let e = extract_choice_answer("The answer is A. Wait, the answer: C", &labels("ABCD"));
        assert_eq!(e.value, label('C'));
    }

    #[test]
    fn cue_ignores_letters_outside_label_set_and_words() {
        // E is not a label, "Dog" is a word.
        let e = extract_choice_answer("the answer is (E)\nthe answer is Dog", &labels("ABCD"));
        assert_eq!(e.value, AnswerValue::Unparsed);
    }

    #[test]
    fn final_line_fallbacks() {
        let e = extract_choice_answer("(A) looks tempting\nI pick (C) over (B)", &labels("ABC"));
        assert_eq!(e.value, label('B'));
        assert_eq!(e.rule, RuleId::ParenthesizedFinalLine);

        let e = extract_choice_answer("reasoning here\nFinal: C.", &labels("ABC"));
        assert_eq!(e.value, label('C'));
        assert_eq!(e.rule, RuleId::BareFinalLine);

        // "I'm" is not a bare label.
        let e = extract_choice_answer("I'm stuck", &labels("ABCDEFGHI"));
        assert_eq!(e.value, AnswerValue::Unparsed);
    }

    #[test]
    fn unparsed_when_nothing_fires() {
        let e = extract_choice_answer("I cannot decide.", &labels("ABCDE"));
        assert_eq!(e, ExtractedAnswer::unparsed());
        assert_eq!(extract_choice_answer("the answer is (A)", &[]).value, AnswerValue::Unparsed);
    }

    #[test]
    fn numeric_rules() {
        let e = extract_numeric_answer("…the answer is 1,000 dollars.");
        assert_eq!(e.value, AnswerValue::Number("1000".into()));
        let e = extract_numeric_answer("18 apples minus 2 gives the answer is 16");
        assert_eq!(e.value, AnswerValue::Number("16".into()));
        let e = extract_numeric_answer("She had 3 bags.\nTotal is 12.50 now");
        assert_eq!(e.value, AnswerValue::Number("12.5".into()));
        assert_eq!(e.rule, RuleId::NumberFinalLine);
        let e = extract_numeric_answer("the answer is $-4.0");
        assert_eq!(e.value, AnswerValue::Number("-4".into()));
        assert!(!extract_numeric_answer("no numeric result").is_parsed());
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(
            extract_verdict("Substituting back… this is True.").value,
            AnswerValue::Verdict(true)
        );
        assert_eq!(extract_verdict("The statement is false").value, AnswerValue::Verdict(false));
        assert!(!extract_verdict("maybe").is_parsed());
        // Only the final two non-empty lines count.
        let text = "check it is 'true' or 'false'\nstep one\n\nstep two\nno conclusion";
        assert!(!extract_verdict(text).is_parsed());
        assert_eq!(
            extract_verdict("false start\nfirst\nit is TRUE\n").value,
            AnswerValue::Verdict(true)
        );
        // untrue is not a standalone token
        assert!(!extract_verdict("that is untrue").is_parsed());
    }

    #[test]
    fn rationale_precedes_answer_span() {
        let text = "step one. step two.\nSo the answer is (B).";
        let e = extract_choice_answer(text, &labels("AB"));
        assert_eq!(rationale_of(text, &e), "step one. step two.");
    }
}
