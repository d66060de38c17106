use std::collections::BTreeMap;

use bialign_core::corpus::{Case, Event, EventLog};
use bialign_core::evalkit::{
    evaluate, levenshtein, optimal_alignment, optimal_empty_moves, reference_align, Correction,
};
use proptest::prelude::*;

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..4u8, 0..9)
}

fn names(s: &[u8]) -> Vec<String> {
    s.iter().map(|x| format!("act{x}")).collect()
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(a in seq(), b in seq(), c in seq()) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn optimal_empty_moves_bounds_and_parity(a in seq(), b in seq()) {
        let m = optimal_empty_moves(&a, &b);
        prop_assert!(m >= a.len().abs_diff(b.len()));
        prop_assert!(m <= a.len() + b.len());
        prop_assert_eq!((a.len() + b.len() - m) % 2, 0);
        prop_assert!(m >= levenshtein(&a, &b));
        prop_assert!(m <= 2 * levenshtein(&a, &b));
    }

    #[test]
    fn optimal_alignment_is_optimal_and_consistent(a in seq(), b in seq()) {
        let (a, b) = (names(&a), names(&b));
        let al = optimal_alignment(&a, &b);
        prop_assert_eq!(al.log_projection(), a.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(al.model_projection(), b.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(al.empty_moves(), optimal_empty_moves(&a, &b));
        prop_assert!(al.pairs.iter().all(|p| p.log.is_some() || p.model.is_some()));
        let syncs_match = al.pairs.iter().all(|p| match (&p.log, &p.model) {
            (Some(x), Some(y)) => x == y,
            _ => true,
        });
        prop_assert!(syncs_match);
    }

    #[test]
    fn reference_alignment_picks_a_closest_variant(c in seq(), vs in prop::collection::vec(seq(), 1..5)) {
        let mut case = Case::new("x");
        case.events = names(&c).into_iter().map(Event::new).collect();
        let variants: Vec<Vec<String>> = vs.iter().map(|v| names(v)).collect();
        let (chosen, al) = reference_align(&case, &variants).unwrap();
        let best = variants.iter().map(|v| optimal_empty_moves(&names(&c), v)).min().unwrap();
        prop_assert_eq!(al.empty_moves(), best);
        prop_assert!(variants.contains(&chosen));
        prop_assert_eq!(al.model_projection(), chosen.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn evaluation_ignores_case_order(
        rows in prop::collection::vec((seq(), seq(), 0..3usize), 1..12),
        rotate in 0..12usize,
    ) {
        let mut truth = Vec::new();
        let mut corrections = Vec::new();
        for (i, (t, got, label)) in rows.iter().enumerate() {
            let id = format!("case-{i}");
            let mut case = Case::new(id.clone());
            case.events = names(t).into_iter().map(Event::new).collect();
            case.label = Some(["normal", "skip", "insert"][*label].to_string());
            truth.push(case);
            let got = names(got);
            corrections.push(Correction {
                id,
                alignment: optimal_alignment(&names(t), &got),
                corrected: got,
            });
        }
        let a = evaluate(&corrections, &EventLog::new(truth.clone())).unwrap();
        let r = rotate % rows.len();
        truth.rotate_left(r);
        corrections.reverse();
        let b = evaluate(&corrections, &EventLog::new(truth)).unwrap();
        prop_assert_eq!(serde_json::to_value(&a).unwrap(), serde_json::to_value(&b).unwrap());
        let counts = a.confusion.true_normal + a.confusion.false_anomalous
            + a.confusion.false_normal + a.confusion.true_anomalous;
        prop_assert_eq!(counts, rows.len());
        for rate in [a.f1_normal, a.f1_anomalous, a.f1_macro, a.accuracy, a.optimality] {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        let kinds: BTreeMap<_, _> = a.per_kind.iter().map(|(k, v)| (k.clone(), v.cases)).collect();
        prop_assert_eq!(kinds.values().sum::<usize>(), rows.len());
    }
}
