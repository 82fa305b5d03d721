//! Offline simulator backend.
//!
//! Each question carries a categorical answer distribution. A completion
//! draws one answer from a pseudorandom stream keyed by
//! `(seed, question_id, phase, sample_index)` and wraps it in a synthetic
//! rationale ending with "the answer is (X)", so simulator runs exercise
//! the same extraction path as real model output.
//!
//! The simulator reads the prompt like a model would: it looks at the
//! "Answer Choices:" block to see which options survive (restricting and
//! renormalizing the distribution), and at the "Prior reasoning:" block to
//! apply the configured gold uplift.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Completion, CompletionRequest, Phase};
use crate::error::{Error, Result};
use crate::model::{normalize_number, normalize_whitespace, Answer, Label, Question, QuestionKind};
use crate::prompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionProfile {
    pub question_id: String,
    pub answer_distribution: BTreeMap<Answer, f64>,
    /// Mean rationale length in characters.
    pub rationale_length_mean: u32,
}

impl QuestionProfile {
    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for (a, p) in &self.answer_distribution {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::invalid(format!(
                    "profile `{}`: probability {p} for `{a}` outside [0, 1]",
                    self.question_id
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "profile `{}`: probabilities sum to {sum}",
                self.question_id
            )));
        }
        if self.rationale_length_mean == 0 {
            return Err(Error::invalid(format!(
                "profile `{}`: rationale_length_mean must be positive",
                self.question_id
            )));
        }
        Ok(())
    }

    /// Highest-probability answer; ties go to the smallest answer.
    pub fn modal(&self) -> Option<&Answer> {
        let mut best: Option<(&Answer, f64)> = None;
        for (a, &p) in &self.answer_distribution {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((a, p));
            }
        }
        best.map(|(a, _)| a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Probability that a completion ends in a malformed way.
    #[serde(default)]
    pub noise_rate: f64,
    /// Multiplier on the gold answer's mass when prior rationales are in the prompt.
    #[serde(default = "one")]
    pub uplift: f64,
}

fn one() -> f64 {
    1.0
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        SimConfig {
            seed,
            noise_rate: 0.0,
            uplift: 1.0,
        }
    }
}

/// How a noisy completion ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// No recoverable answer.
    Unparseable,
    /// Answer only as "(X)" on the final line.
    FinalLineParen,
    /// Answer only as a bare "X." final line.
    FinalLineBare,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulated {
    pub completion: Completion,
    pub drawn: Answer,
    pub noise: Option<NoiseKind>,
}

const BACKEND_TAG: &str = "mock (tokens = chars/4)";

const WORDS: &[&str] = &[
    "consider", "the", "given", "values", "each", "option", "carefully", "we", "compare", "this",
    "with", "that", "step", "first", "then", "next", "check", "whether", "condition", "holds",
    "because", "evidence", "suggests", "relation", "between", "terms", "quantity", "remains",
    "unchanged", "after", "simplifying", "expression", "so", "it", "follows", "likely", "case",
    "rules", "out", "others", "based", "on", "known", "facts", "reasoning", "about", "context",
];

fn stream(seed: u64, question_id: &str, phase: Phase, sample_index: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"dnc-sim\0");
    h.update(seed.to_le_bytes());
    h.update(question_id.as_bytes());
    h.update([0u8]);
    h.update(phase.as_str().as_bytes());
    h.update(sample_index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn approx_tokens(s: &str) -> u64 {
    (s.chars().count() as u64).div_ceil(4)
}

/// Geometric length on {1, 2, ...} with the given mean.
fn geometric_length(rng: &mut ChaCha8Rng, mean: u32) -> usize {
    if mean <= 1 {
        return 1;
    }
    let p = 1.0 / mean as f64;
    let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    ((u.ln() / (1.0 - p).ln()).ceil() as usize).max(1)
}

fn synthetic_rationale(rng: &mut ChaCha8Rng, target_chars: usize) -> String {
    let mut out = String::new();
    while out.len() < target_chars {
        let words = rng.random_range(6..=12);
        let mut sentence = String::new();
        for i in 0..words {
            let w = WORDS[rng.random_range(0..WORDS.len())];
            if i == 0 {
                let mut cs = w.chars();
                sentence.extend(cs.next().map(|c| c.to_ascii_uppercase()));
                sentence.push_str(cs.as_str());
            } else {
                sentence.push(' ');
                sentence.push_str(w);
            }
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence);
        out.push('.');
    }
    out
}

fn draw(rng: &mut ChaCha8Rng, dist: &BTreeMap<Answer, f64>) -> Answer {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (a, &p) in dist {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(a);
        if u < acc {
            return a.clone();
        }
    }
    // Rounding slack at the top of the cumulative sum.
    last.expect("validated distribution has positive mass").clone()
}

fn answer_sentence(a: &Answer) -> String {
    match a {
        Answer::Label(l) => format!("So the answer is ({l})."),
        Answer::Number(n) => format!("So the answer is {n}."),
    }
}

fn noisy_ending(kind: NoiseKind, a: &Answer) -> String {
    match (kind, a) {
        (NoiseKind::Unparseable, _) => "Not sure which of these is right.".to_string(),
        (NoiseKind::FinalLineParen, Answer::Label(l)) => format!("My pick would be ({l})"),
        (NoiseKind::FinalLineParen, Answer::Number(n)) => format!("My final count: {n}"),
        (NoiseKind::FinalLineBare, a) => format!("{a}."),
    }
}

/// Draws one completion from `profile` in its own answer space, without noise.
pub fn simulate_completion(profile: &QuestionProfile, req: &CompletionRequest, seed: u64) -> Result<Completion> {
    simulate(profile, req, &SimConfig::new(seed)).map(|s| s.completion)
}

/// Draws one completion from `profile`, applying the noise settings of `config`.
pub fn simulate(profile: &QuestionProfile, req: &CompletionRequest, config: &SimConfig) -> Result<Simulated> {
    if profile.question_id != req.question_id {
        return Err(Error::invalid(format!(
            "profile `{}` does not match request for `{}`",
            profile.question_id, req.question_id
        )));
    }
    profile.validate()?;
    let mut rng = stream(config.seed, &req.question_id, req.phase, req.sample_index);
    let sampled = draw(&mut rng, &profile.answer_distribution);
    let drawn = if req.temperature == 0.0 {
        profile.modal().cloned().expect("validated")
    } else {
        sampled
    };
    let noise_u: f64 = rng.random();
    let kind_u: f64 = rng.random();
    let noise = (noise_u < config.noise_rate).then(|| match kind_u {
        u if u < 1.0 / 3.0 => NoiseKind::Unparseable,
        u if u < 2.0 / 3.0 => NoiseKind::FinalLineParen,
        _ => NoiseKind::FinalLineBare,
    });
    let len = geometric_length(&mut rng, profile.rationale_length_mean);
    let rationale = synthetic_rationale(&mut rng, len);
    let ending = match noise {
        None => answer_sentence(&drawn),
        Some(kind) => noisy_ending(kind, &drawn),
    };
    let text = format!("{rationale}\n{ending}");
    Ok(Simulated {
        completion: Completion {
            prompt_tokens: approx_tokens(&req.prompt),
            output_tokens: approx_tokens(&text),
            text,
            backend_tag: BACKEND_TAG.into(),
        },
        drawn,
        noise,
    })
}

/// Deterministic simulator over a fixed question set.
pub struct MockBackend {
    questions: HashMap<String, Question>,
    profiles: HashMap<String, QuestionProfile>,
    config: SimConfig,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(questions: &[Question], profiles: Vec<QuestionProfile>, config: SimConfig) -> Result<Self> {
        let questions: HashMap<String, Question> =
            questions.iter().map(|q| (q.id.clone(), q.clone())).collect();
        let mut by_id = HashMap::new();
        for p in profiles {
            p.validate()?;
            let q = questions.get(&p.question_id).ok_or_else(|| {
                Error::invalid(format!("profile for unknown question `{}`", p.question_id))
            })?;
            for a in p.answer_distribution.keys() {
                let ok = match (q.kind, a) {
                    (QuestionKind::Mcq, Answer::Label(l)) => l.index() < q.choices.len(),
                    (QuestionKind::Cloze, Answer::Number(_)) => true,
                    _ => false,
                };
                if !ok {
                    return Err(Error::invalid(format!(
                        "profile `{}`: answer `{a}` is not in the question's label set",
                        p.question_id
                    )));
                }
            }
            by_id.insert(p.question_id.clone(), p);
        }
        if let Some(q) = questions.keys().find(|id| !by_id.contains_key(*id)) {
            return Err(Error::invalid(format!("question `{q}` has no simulator profile")));
        }
        Ok(MockBackend {
            questions,
            profiles: by_id,
            config,
            calls: AtomicU64::new(0),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Maps the labels shown in `prompt` to answers of the original question.
    fn shown_choices(&self, q: &Question, prompt_text: &str) -> Result<Option<Vec<(Label, Answer)>>> {
        let Some(shown) = prompt::parse_choices(prompt_text) else {
            return Ok(None);
        };
        shown
            .into_iter()
            .map(|(label, content)| {
                let original = match q.kind {
                    QuestionKind::Mcq => {
                        let norm = normalize_whitespace(&content);
                        q.choices
                            .iter()
                            .find(|c| normalize_whitespace(&c.content) == norm)
                            .map(|c| Answer::Label(c.label))
                    }
                    QuestionKind::Cloze => normalize_number(&content).map(Answer::Number),
                };
                original
                    .map(|o| (label, o))
                    .ok_or_else(|| Error::invalid(format!("prompt choice `{content}` is not an option of `{}`", q.id)))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// The distribution a model would answer from, given what the prompt shows.
    pub fn effective_profile(&self, req: &CompletionRequest) -> Result<QuestionProfile> {
        let (q, base) = self.lookup(&req.question_id)?;
        let Some(shown) = self.shown_choices(q, &req.prompt)? else {
            return Ok(base.clone());
        };
        let gold = q.gold.as_ref();
        let uplift = prompt::has_prior_block(&req.prompt) && self.config.uplift != 1.0;
        let mut dist: BTreeMap<Answer, f64> = shown
            .iter()
            .map(|(label, orig)| {
                let mut p = base.answer_distribution.get(orig).copied().unwrap_or(0.0);
                if uplift && Some(orig) == gold {
                    p *= self.config.uplift;
                }
                (Answer::Label(*label), p)
            })
            .collect();
        let total: f64 = dist.values().sum();
        if total > 0.0 {
            dist.values_mut().for_each(|p| *p /= total);
        } else {
            let n = dist.len() as f64;
            dist.values_mut().for_each(|p| *p = 1.0 / n);
        }
        Ok(QuestionProfile {
            question_id: base.question_id.clone(),
            answer_distribution: dist,
            rationale_length_mean: base.rationale_length_mean,
        })
    }

    fn lookup(&self, id: &str) -> Result<(&Question, &QuestionProfile)> {
        let q = self
            .questions
            .get(id)
            .ok_or_else(|| Error::invalid(format!("simulator has no question `{id}`")))?;
        Ok((q, &self.profiles[id]))
    }

    /// Full simulated outcome, including the drawn answer and any noise.
    pub fn simulate(&self, req: &CompletionRequest) -> Result<Simulated> {
        if req.phase == Phase::Verify {
            return self.simulate_verdict(req);
        }
        let profile = self.effective_profile(req)?;
        simulate(&profile, req, &self.config)
    }

    /// Confirms the proposed answer with probability equal to its mass; at
    /// temperature 0, confirms exactly the modal answer.
    fn simulate_verdict(&self, req: &CompletionRequest) -> Result<Simulated> {
        let profile = self.effective_profile(req)?;
        let proposed = prompt::parse_proposed_answer(&req.prompt)
            .ok_or_else(|| Error::invalid("verify prompt carries no proposed answer"))?;
        let mut rng = stream(self.config.seed, &req.question_id, req.phase, req.sample_index);
        let mass = profile.answer_distribution.get(&proposed).copied().unwrap_or(0.0);
        let u: f64 = rng.random();
        let verdict = if req.temperature == 0.0 {
            profile.modal() == Some(&proposed)
        } else {
            u < mass
        };
        let noisy = rng.random::<f64>() < self.config.noise_rate;
        let len = geometric_length(&mut rng, profile.rationale_length_mean);
        let rationale = synthetic_rationale(&mut rng, len);
        let ending = if noisy {
            "The check is inconclusive.".to_string()
        } else {
            format!("Substituting the proposed answer back, the check is {verdict}.")
        };
        let text = format!("{rationale}\n{ending}");
        Ok(Simulated {
            completion: Completion {
                prompt_tokens: approx_tokens(&req.prompt),
                output_tokens: approx_tokens(&text),
                text,
                backend_tag: BACKEND_TAG.into(),
            },
            drawn: proposed,
            noise: noisy.then_some(NoiseKind::Unparseable),
        })
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.simulate(req).map(|s| s.completion)
    }
}

/// Families of synthetic question profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProfileFamily {
    /// Gold probability drawn uniformly from `[p_min, p_max]`; the rest is
    /// spread over incorrect options with random weights.
    Uniform { p_min: f64, p_max: f64 },
    /// One strong distractor above the gold answer and one weaker distractor.
    SecondGold { wrong: f64, gold: f64, other: f64 },
    /// The gold answer with probability one.
    Certain,
}

impl ProfileFamily {
    pub fn second_gold() -> Self {
        ProfileFamily::SecondGold {
            wrong: 0.45,
            gold: 0.35,
            other: 0.2,
        }
    }
}

/// Generates `n` synthetic questions with `num_choices` options each and a
/// profile per question.
pub fn generate_synthetic(
    n: usize,
    num_choices: usize,
    family: &ProfileFamily,
    seed: u64,
) -> Result<(Vec<Question>, Vec<QuestionProfile>)> {
    if !(2..=Label::MAX).contains(&num_choices) {
        return Err(Error::invalid(format!("num_choices {num_choices} outside 2..=26")));
    }
    if matches!(family, ProfileFamily::SecondGold { .. }) && num_choices < 3 {
        return Err(Error::invalid("second_gold profiles need at least 3 choices"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut questions = Vec::with_capacity(n);
    let mut profiles = Vec::with_capacity(n);
    let width = n.to_string().len();
    for i in 0..n {
        let id = format!("s{:0width$}", i + 1);
        let contents: Vec<String> = (0..num_choices).map(|j| format!("value {}", (i * 7 + j * 13) % 1000 + j * 1000)).collect();
        let gold = Label::from_index(rng.random_range(0..num_choices))?;
        let q = Question::mcq(&id, format!("Synthetic question {}", i + 1), &contents, Some(gold), "synthetic")?;
        let mut incorrect: Vec<Label> = q.labels().into_iter().filter(|l| *l != gold).collect();
        // Fisher-Yates so distractor choice is seed-determined.
        for k in (1..incorrect.len()).rev() {
            incorrect.swap(k, rng.random_range(0..=k));
        }
        let mut dist = BTreeMap::new();
        match *family {
            ProfileFamily::Uniform { p_min, p_max } => {
                let p = p_min + (p_max - p_min) * rng.random::<f64>();
                let weights: Vec<f64> = incorrect.iter().map(|_| rng.random::<f64>() + 1e-6).collect();
                let total: f64 = weights.iter().sum();
                dist.insert(Answer::Label(gold), p);
                for (l, w) in incorrect.iter().zip(&weights) {
                    dist.insert(Answer::Label(*l), (1.0 - p) * w / total);
                }
            }
            ProfileFamily::SecondGold { wrong, gold: g, other } => {
                dist.insert(Answer::Label(gold), g);
                dist.insert(Answer::Label(incorrect[0]), wrong);
                dist.insert(Answer::Label(incorrect[1]), other);
            }
            ProfileFamily::Certain => {
                dist.insert(Answer::Label(gold), 1.0);
            }
        }
        // Absorb floating-point drift into the gold mass.
        let drift: f64 = 1.0 - dist.values().sum::<f64>();
        *dist.get_mut(&Answer::Label(gold)).unwrap() += drift;
        profiles.push(QuestionProfile {
            question_id: id,
            answer_distribution: dist,
            rationale_length_mean: rng.random_range(150..=600),
        });
        questions.push(q);
    }
    Ok((questions, profiles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::extract_choice_answer;

    fn profile(entries: &[(char, f64)]) -> QuestionProfile {
        QuestionProfile {
            question_id: "q".into(),
            answer_distribution: entries
                .iter()
                .map(|(c, p)| (Answer::Label(Label::from_char(*c).unwrap()), *p))
                .collect(),
            rationale_length_mean: 120,
        }
    }

    fn req(idx: u32, temperature: f64) -> CompletionRequest {
        CompletionRequest::new("q", Phase::Divide, idx, "prompt", temperature, 256).unwrap()
    }

    #[test]
    fn degenerate_distribution_always_emits_its_label() {
        let p = profile(&[('A', 1.0)]);
        for seed in 0..20 {
            let c = simulate_completion(&p, &req(seed as u32, 0.7), seed).unwrap();
            assert!(c.text.ends_with("the answer is (A)."), "{}", c.text);
        }
    }

    #[test]
    fn same_key_is_byte_identical() {
        let p = profile(&[('A', 0.3), ('B', 0.7)]);
        let a = simulate_completion(&p, &req(3, 0.7), 9).unwrap();
        let b = simulate_completion(&p, &req(3, 0.7), 9).unwrap();
        assert_eq!(a, b);
        let c = simulate_completion(&p, &req(4, 0.7), 9).unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn temperature_zero_emits_mode() {
        let p = profile(&[('A', 0.4), ('B', 0.6)]);
        for i in 0..50 {
            let c = simulate_completion(&p, &req(i, 0.0), 1).unwrap();
            assert!(c.text.ends_with("(B)."));
        }
    }

    #[test]
    fn fair_coin_frequency() {
        // 10,000 draws at seed 7; the binomial standard error is 0.005.
        let p = profile(&[('A', 0.5), ('B', 0.5)]);
        let a = (0..10_000)
            .filter(|&i| {
                let s = simulate(&p, &req(i, 0.7), &SimConfig::new(7)).unwrap();
                s.drawn == Answer::Label(Label::from_char('A').unwrap())
            })
            .count();
        let freq = a as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn clean_completions_parse_to_drawn_label() {
        let p = profile(&[('A', 0.2), ('B', 0.3), ('C', 0.5)]);
        let labels: Vec<Label> = "ABC".chars().filter_map(Label::from_char).collect();
        for i in 0..500 {
            let s = simulate(&p, &req(i, 0.7), &SimConfig::new(3)).unwrap();
            let e = extract_choice_answer(&s.completion.text, &labels);
            assert_eq!(e.answer(), Some(s.drawn));
        }
    }

    #[test]
    fn mismatched_profile_and_bad_distributions_are_rejected() {
        let mut p = profile(&[('A', 0.5), ('B', 0.4)]);
        assert!(p.validate().is_err());
        p = profile(&[('A', 1.0)]);
        p.question_id = "other".into();
        assert!(simulate_completion(&p, &req(0, 0.7), 0).is_err());

        let q = Question::mcq("q", "t", &["x".into(), "y".into()], None, "s").unwrap();
        let bad = profile(&[('A', 0.5), ('C', 0.5)]);
        assert!(MockBackend::new(&[q], vec![bad], SimConfig::new(0)).is_err());
    }

    #[test]
    fn synthetic_generation_is_seeded() {
        let (q1, p1) = generate_synthetic(20, 5, &ProfileFamily::second_gold(), 4).unwrap();
        let (q2, p2) = generate_synthetic(20, 5, &ProfileFamily::second_gold(), 4).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(p1, p2);
        for p in &p1 {
            p.validate().unwrap();
        }
        let (_, p3) = generate_synthetic(20, 5, &ProfileFamily::Uniform { p_min: 0.1, p_max: 1.0 }, 4).unwrap();
        for p in &p3 {
            p.validate().unwrap();
        }
    }
}
