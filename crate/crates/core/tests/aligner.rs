use bialign_core::aligner::{deep_align, replay_history, SearchConfig};
use bialign_core::corpus::{AttributeSchema, Case, Direction, Event, EventLog};
use bialign_core::evalkit::optimal_empty_moves;
use bialign_core::neuralnet::{init_model, NextEventModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn models(seed: u64) -> (NextEventModel, NextEventModel) {
    let cases = (0..6)
        .map(|i| {
            let mut c = Case::new(format!("c{i}"));
            c.case_attributes.insert("T".into(), format!("t{}", i % 2));
            c.events.push(Event::new(format!("a{}", i % 4)).with_attr("U", format!("u{}", i % 3)));
            c
        })
        .collect();
    let schema = AttributeSchema::build(&EventLog::new(cases)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        init_model(&schema, Direction::Forward, 8, &mut rng).unwrap(),
        init_model(&schema, Direction::Backward, 8, &mut rng).unwrap(),
    )
}

fn arb_case() -> impl Strategy<Value = Case> {
    (prop::collection::vec((0..4usize, 0..3usize), 0..7), 0..2usize).prop_map(|(events, t)| {
        let mut c = Case::new("p");
        c.case_attributes.insert("T".into(), format!("t{t}"));
        c.events = events
            .into_iter()
            .map(|(a, u)| Event::new(format!("a{a}")).with_attr("U", format!("u{u}")))
            .collect();
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn alignments_are_consistent_and_never_beat_the_optimum(
        seed in 0..4u64,
        case in arb_case(),
        k in 1..5usize,
        n in 1..4usize,
        iterations in 1..5usize,
        cfo in any::<bool>(),
    ) {
        let (f, b) = models(seed);
        let config = SearchConfig {
            beam_width: k,
            max_deletion: n,
            max_iterations: iterations,
            control_flow_only: cfo,
            length_normalize: false,
        };
        let result = deep_align(&f, &b, &case, &config).unwrap();
        prop_assert!(result.iterations <= iterations);
        prop_assert!(!result.ranked.is_empty() && result.ranked.len() <= k);
        for w in result.ranked.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for r in &result.ranked {
            let log = r.alignment.log_projection();
            let model = r.alignment.model_projection();
            prop_assert_eq!(&log, &case.activities());
            prop_assert_eq!(&model, &r.corrected.activities());
            prop_assert!(r.alignment.pairs.iter().all(|p| p.log.is_some() || p.model.is_some()));
            prop_assert!(r.alignment.empty_moves() >= optimal_empty_moves(&log, &model));
            let (replayed, again) = replay_history(&case, &r.history).unwrap();
            prop_assert_eq!(&replayed, &r.corrected);
            prop_assert_eq!(&again, &r.alignment);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn top_score_never_decreases_across_iterations(seed in 0..4u64, case in arb_case(), cfo in any::<bool>()) {
        let (f, b) = models(seed);
        let config = SearchConfig { control_flow_only: cfo, ..SearchConfig::default() };
        let result = deep_align(&f, &b, &case, &config).unwrap();
        for w in result.top_scores.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", result.top_scores);
        }
    }
}

