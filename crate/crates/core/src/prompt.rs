//! Prompt layout shared by every phase.
//!
//! ```text
//! Question: <stem>
//! Answer Choices:
//! (A) <content>
//! (B) <content>
//!
//! Prior reasoning:
//! Reasoning for (A):
//! <rationale>
//!
//! <tail instruction>
//! ```
//!
//! The choice block is omitted for cloze questions and the prior block is
//! present only for strategies that reuse rationales.

use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_number, normalize_whitespace, Answer, Label, Question};

pub const CHOICES_HEADER: &str = "Answer Choices:";
pub const PRIOR_HEADER: &str = "Prior reasoning:";
pub const PROPOSED_PREFIX: &str = "Proposed answer: ";
pub const VERIFY_INSTRUCTION: &str =
    "Let's substitute the answer back into the question to check it is 'true' or 'false':";

/// Closing instruction of a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tail {
    /// "Let's think step by step."
    StepByStep,
    /// "Let's delve deeper into this question to arrive at the best answer"
    DelveQuestion,
    /// "Let's delve deeper into these {n} choices and select the best one"
    DelveChoices,
}

impl Tail {
    pub fn render(self, choice_count: usize) -> String {
        match self {
            Tail::StepByStep => "Let's think step by step.".to_string(),
            Tail::DelveQuestion => {
                "Let's delve deeper into this question to arrive at the best answer".to_string()
            }
            Tail::DelveChoices => {
                format!("Let's delve deeper into these {choice_count} choices and select the best one")
            }
        }
    }
}

impl FromStr for Tail {
    type Err = Error;

    /// `prompt0` and `prompt1` name the step-by-step and choice-focused tails.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt0" | "step-by-step" => Ok(Tail::StepByStep),
            "prompt1" | "delve-choices" => Ok(Tail::DelveChoices),
            "delve-question" => Ok(Tail::DelveQuestion),
            _ => Err(Error::invalid(format!("unknown tail `{s}`"))),
        }
    }
}

fn write_question(out: &mut String, q: &Question) {
    let _ = writeln!(out, "Question: {}", q.text.trim());
    if !q.choices.is_empty() {
        let _ = writeln!(out, "{CHOICES_HEADER}");
        for c in &q.choices {
            let _ = writeln!(out, "({}) {}", c.label, normalize_whitespace(&c.content));
        }
    }
}

/// Renders the full prompt. `prior` lists (label in `q`'s label space, rationale).
pub fn render(q: &Question, prior: Option<&[(Label, String)]>, tail: Tail) -> String {
    let mut out = String::new();
    write_question(&mut out, q);
    if let Some(prior) = prior {
        let _ = writeln!(out, "\n{PRIOR_HEADER}");
        for (i, (label, rationale)) in prior.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "Reasoning for ({label}):\n{}", rationale.trim());
        }
    }
    let _ = write!(out, "\n{}", tail.render(q.choices.len()));
    out
}

pub fn render_verify(q: &Question, proposed: &Answer) -> String {
    let mut out = String::new();
    write_question(&mut out, q);
    let shown = match proposed {
        Answer::Label(l) => format!("({l})"),
        Answer::Number(n) => n.clone(),
    };
    let _ = write!(out, "\n{PROPOSED_PREFIX}{shown}\n\n{VERIFY_INSTRUCTION}");
    out
}

/// Labeled choices as they appear in a prompt, or `None` if there is no choice block.
pub fn parse_choices(prompt: &str) -> Option<Vec<(Label, String)>> {
    let mut lines = prompt.lines().skip_while(|l| *l != CHOICES_HEADER);
    lines.next()?;
    let mut out = Vec::new();
    for line in lines {
        let parsed = line
            .strip_prefix('(')
            .and_then(|rest| rest.split_once(") "))
            .and_then(|(l, content)| Some((l.parse::<Label>().ok()?, content.to_string())));
        match parsed {
            Some(pair) => out.push(pair),
            None => break,
        }
    }
    Some(out)
}

pub fn has_prior_block(prompt: &str) -> bool {
    prompt.lines().any(|l| l == PRIOR_HEADER)
}

pub fn parse_proposed_answer(prompt: &str) -> Option<Answer> {
    let line = prompt.lines().find_map(|l| l.strip_prefix(PROPOSED_PREFIX))?;
    let inner = line.trim();
    if let Some(l) = inner.strip_prefix('(').and_then(|s| s.strip_suffix(')')) {
        return l.parse().ok().map(Answer::Label);
    }
    normalize_number(inner).map(Answer::Number)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> Question {
        Question::mcq(
            "q1",
            "What is 2+2?",
            &["3".into(), "4".into(), "5  \n six".into()],
            None,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn layout_round_trips_through_parser() {
        let p = render(&q(), None, Tail::StepByStep);
        assert!(p.starts_with("Question: What is 2+2?\nAnswer Choices:\n(A) 3\n"));
        assert!(p.ends_with("\n\nLet's think step by step."));
        let parsed = parse_choices(&p).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[2].1, "5 six");
        assert!(!has_prior_block(&p));
    }

    #[test]
    fn prior_block_and_tails() {
        let a = Label::from_char('A').unwrap();
        let prior = vec![(a, "because of x".to_string())];
        let p = render(&q(), Some(&prior), Tail::DelveChoices);
        assert!(has_prior_block(&p));
        assert!(p.contains("Reasoning for (A):\nbecause of x"));
        assert!(p.ends_with("these 3 choices and select the best one"));
        // The choice parser stops at the blank line.
        assert_eq!(parse_choices(&p).unwrap().len(), 3);
    }

    #[test]
    fn verify_prompt() {
        let p = render_verify(&q(), &Answer::Label(Label::from_char('B').unwrap()));
        assert!(p.ends_with(VERIFY_INSTRUCTION));
        assert_eq!(parse_proposed_answer(&p), Some(Answer::Label(Label::from_char('B').unwrap())));
        let c = Question::cloze("g", "How many?", None, "gsm").unwrap();
        let p = render_verify(&c, &Answer::Number("18".into()));
        assert!(parse_choices(&p).is_none());
        assert_eq!(parse_proposed_answer(&p), Some(Answer::Number("18".into())));
    }
}
