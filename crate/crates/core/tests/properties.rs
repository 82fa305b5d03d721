use dnc_core::divide::{confidence_score, majority_answer, AnswerHistogram, FineBin, Subset};
use dnc_core::eval::weighted_average;
use dnc_core::extract::extract_for;
use dnc_core::model::{load_dataset, normalize_whitespace, save_dataset, Answer, DatasetSchema, Fraction, Label, LabelMapping, Question};
use dnc_core::prompt::{self, Tail};
use proptest::prelude::*;

fn answer(i: u8) -> Answer {
    Answer::Label(Label::from_index(i as usize).unwrap())
}

fn samples() -> impl Strategy<Value = Vec<Option<u8>>> {
    prop::collection::vec(prop::option::weighted(0.8, 0u8..6), 1..12)
}

fn histogram(s: &[Option<u8>]) -> AnswerHistogram {
    AnswerHistogram::from_samples(s.iter().enumerate().map(|(i, a)| (i as u32, a.map(answer))))
}

proptest! {
    #[test]
    fn histogram_totals_are_conserved(s in samples()) {
        let h = histogram(&s);
        let parsed = s.iter().filter(|a| a.is_some()).count() as u32;
        prop_assert_eq!(h.total_samples, s.len() as u32);
        prop_assert_eq!(h.parsed(), parsed);
        prop_assert_eq!(h.parsed() + h.unparsed_count, h.total_samples);
        let cs = confidence_score(&h);
        prop_assert!(cs >= Fraction::from_integer(0) && cs <= Fraction::from_integer(1));
    }

    #[test]
    fn majority_is_most_frequent_then_earliest(s in samples()) {
        let h = histogram(&s);
        let parsed: Vec<u8> = s.iter().flatten().copied().collect();
        match majority_answer(&h) {
            Err(_) => prop_assert!(parsed.is_empty()),
            Ok(m) => {
                let count = |x: u8| parsed.iter().filter(|y| **y == x).count();
                let best = parsed.iter().map(|x| count(*x)).max().unwrap();
                // Earliest sample whose answer reaches the top count.
                let oracle = s.iter().flatten().find(|x| count(**x) == best).unwrap();
                prop_assert_eq!(m, answer(*oracle));
            }
        }
    }

    #[test]
    fn every_score_lands_in_one_subset_and_bin(k in 0u64..=30, extra in 0u64..=30, mu_n in 1u64..=9, gap in 1u64..=8) {
        let t = k + extra;
        prop_assume!(t > 0 && gap < mu_n);
        let cs = Fraction::new(k, t);
        let mu = Fraction::new(mu_n, 10);
        let nu = Fraction::new(mu_n - gap, 10);
        let subset = Subset::classify(cs, mu, nu);
        let hits = [cs > mu, cs > nu && cs <= mu, cs <= nu].iter().filter(|b| **b).count();
        prop_assert_eq!(hits, 1);
        let bin = FineBin::classify(cs, mu, nu);
        match subset {
            Subset::High => prop_assert_eq!(bin, FineBin::High),
            Subset::Med => prop_assert_eq!(bin, FineBin::Med),
            Subset::Low => prop_assert!(matches!(bin, FineBin::LowTop | FineBin::LowBottom)),
        }
    }

    #[test]
    fn weighted_average_ignores_row_order(rows in prop::collection::vec((1u64..500, 0u64..=100), 1..10), seed in any::<u64>()) {
        let rows: Vec<(u64, Fraction)> = rows.into_iter().map(|(n, a)| (n, Fraction::new(a, 100))).collect();
        let mut shuffled = rows.clone();
        let len = shuffled.len();
        shuffled.rotate_left((seed % len as u64) as usize);
        shuffled.reverse();
        prop_assert_eq!(weighted_average(&rows).unwrap(), weighted_average(&shuffled).unwrap());
    }

    #[test]
    fn splitting_a_row_keeps_the_average(rows in prop::collection::vec((2u64..500, 0u64..=100), 1..10), cut in 1u64..100) {
        let rows: Vec<(u64, Fraction)> = rows.into_iter().map(|(n, a)| (n, Fraction::new(a, 100))).collect();
        let (n, a) = rows[0];
        let left = 1 + cut % (n - 1);
        let mut split = vec![(left, a), (n - left, a)];
        split.extend_from_slice(&rows[1..]);
        prop_assert_eq!(weighted_average(&rows).unwrap(), weighted_average(&split).unwrap());
    }

    #[test]
    fn extraction_is_total_and_stays_in_the_label_set(text in ".{0,200}", n in 2usize..8) {
        let labels: Vec<Label> = (0..n).map(|i| Label::from_index(i).unwrap()).collect();
        let got = extract_for(&text, &labels);
        if let Some(Answer::Label(l)) = got.answer() {
            prop_assert!(labels.contains(&l));
        }
    }

    #[test]
    fn rendered_choices_parse_back(contents in prop::collection::vec("[a-zA-Z0-9 ,.]{1,30}", 2..8)) {
        let contents: Vec<String> = contents.into_iter().map(|c| c.trim().to_string()).collect();
        prop_assume!(contents.iter().all(|c| !c.is_empty()));
        let mut uniq = contents.clone();
        uniq.sort();
        uniq.dedup();
        prop_assume!(uniq.len() == contents.len());
        let q = Question::mcq("q", "Pick one.", &contents, None, "t").unwrap();
        let parsed = prompt::parse_choices(&prompt::render(&q, None, Tail::StepByStep)).unwrap();
        let want: Vec<(Label, String)> = q.choices.iter().map(|c| (c.label, normalize_whitespace(&c.content))).collect();
        prop_assert_eq!(parsed, want);
    }

    #[test]
    fn mapping_composition_matches_stepwise_lookup(n in 2usize..8, keep in prop::collection::vec(any::<bool>(), 8), keep2 in prop::collection::vec(any::<bool>(), 8)) {
        let outer_targets: Vec<Answer> = (0..n).filter(|i| keep[*i]).map(|i| answer(i as u8)).collect();
        prop_assume!(!outer_targets.is_empty());
        let outer = LabelMapping::new("q", outer_targets.clone()).unwrap();
        let inner_targets: Vec<Answer> = (0..outer_targets.len()).filter(|i| keep2[*i]).map(|i| answer(i as u8)).collect();
        prop_assume!(!inner_targets.is_empty());
        let inner = LabelMapping::new("q", inner_targets).unwrap();
        let composed = inner.then(&outer).unwrap();
        for (label, mid) in &inner.forward {
            let stepwise = outer.map_answer(mid).unwrap();
            prop_assert_eq!(composed.apply(*label), Some(&stepwise));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn datasets_round_trip_through_jsonl(items in prop::collection::vec(("[a-z ]{1,40}", prop::collection::vec("[a-z0-9]{1,12}", 2..6), any::<prop::sample::Index>()), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        let mut questions = Vec::new();
        for (i, (text, mut contents, gold)) in items.into_iter().enumerate() {
            contents.sort();
            contents.dedup();
            prop_assume!(contents.len() >= 2 && !text.trim().is_empty());
            let g = Label::from_index(gold.index(contents.len())).unwrap();
            questions.push(Question::mcq(format!("id-{i}"), text.trim(), &contents, Some(g), "set").unwrap());
        }
        save_dataset(&path, &questions).unwrap();
        let back = load_dataset(&path, DatasetSchema::McqJsonl).unwrap();
        prop_assert_eq!(back, questions);
    }
}

#[test]
fn cloze_mapping_composes_through_filtering() {
    let q = Question::cloze("c", "How many?", Some("12"), "t").unwrap();
    let prior = vec!["12".to_string(), "15".into(), "12.0".into(), "9".into()];
    let (mcq, m0) = dnc_core::model::cloze_to_mcq(&q, &prior).unwrap();
    assert_eq!(mcq.choices.len(), 3);
    let h = AnswerHistogram::from_samples([(0, Some(answer(0))), (1, Some(answer(2))), (2, None)]);
    let (filtered, m1) = dnc_core::conquer::filter_choices(&mcq, &h).unwrap();
    assert_eq!(filtered.choices.len(), 2);
    let composed = m1.then(&m0).unwrap();
    assert_eq!(composed.map_answer(&answer(0)), Some(Answer::Number("12".into())));
    assert_eq!(composed.map_answer(&answer(1)), Some(Answer::Number("9".into())));
}
