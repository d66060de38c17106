use bialign_core::procgen::{
    apply_noise, audit, generate_log, inject_anomaly, paper_process, random_likelihood_graph, AnomalyContext,
    AnomalyKind, RandomGraphParams,
};
use bialign_core::corpus::Case;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn is_subsequence(small: &[&str], big: &[&str]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

fn run_moved(before: &[&str], after: &[&str]) -> bool {
    let n = before.len();
    (1..=2.min(n)).any(|size| {
        (0..=n - size).any(|start| {
            let mut rest = before.to_vec();
            let run: Vec<&str> = rest.drain(start..start + size).collect();
            (0..=rest.len()).filter(|&to| to != start).any(|to| {
                let mut t = rest.clone();
                t.splice(to..to, run.iter().copied());
                t == after
            })
        })
    })
}

fn reworked(before: &[&str], after: &[&str]) -> bool {
    let n = before.len();
    (1..=3.min(n)).any(|size| {
        (0..=n - size).any(|start| {
            let mut t = before.to_vec();
            let end = start + size;
            let copy = before[start..end].to_vec();
            t.splice(end..end, copy);
            t == after
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_graphs_pass_audit_and_accept_their_cases(
        seed in any::<u64>(),
        activities in 6..20usize,
        breadth in 1..4usize,
        depth in 1..6usize,
        event_attrs in 0..3usize,
        case_attrs in 0..3usize,
    ) {
        let params = RandomGraphParams {
            n_activities: activities,
            breadth,
            depth,
            n_event_attributes: event_attrs,
            n_case_attributes: case_attrs,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Ok((graph, rule)) = random_likelihood_graph(params, &mut rng) else {
            return Ok(());
        };
        audit(&graph, &rule).unwrap();
        let log = generate_log(&graph, &rule, 40, &mut rng).unwrap();
        for case in &log.cases {
            prop_assert!(graph.accepts(&rule, case), "{:?}", case.activities());
        }
    }

    #[test]
    fn anomalies_have_their_defined_shapes(seed in any::<u64>(), kind in 0..6usize) {
        let (graph, rule) = paper_process();
        let ctx = AnomalyContext::for_graph(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log = generate_log(&graph, &rule, 4, &mut rng).unwrap();
        let kind = AnomalyKind::ALL[kind];
        for case in &log.cases {
            let (out, label) = inject_anomaly(case, kind, &ctx, &mut rng).unwrap();
            prop_assert_eq!(label, kind.label());
            let (a, b) = (case.activities(), out.activities());
            match kind {
                AnomalyKind::Skip => {
                    prop_assert!(b.len() < a.len() && a.len() - b.len() <= 2);
                    prop_assert!(is_subsequence(&b, &a));
                }
                AnomalyKind::Insert => {
                    prop_assert!(b.len() > a.len() && b.len() - a.len() <= 2);
                    prop_assert!(is_subsequence(&a, &b));
                    prop_assert!(b.iter().filter(|x| x.starts_with("Random activity")).count() == b.len() - a.len());
                }
                AnomalyKind::Rework => prop_assert!(reworked(&a, &b)),
                AnomalyKind::Early | AnomalyKind::Late => {
                    prop_assert!(run_moved(&a, &b));
                    let (mut x, mut y) = (a.clone(), b.clone());
                    x.sort();
                    y.sort();
                    prop_assert_eq!(x, y);
                }
                AnomalyKind::Attribute => {
                    prop_assert_eq!(&a, &b);
                    let changed = case.events.iter().zip(&out.events).filter(|(p, q)| p != q).count();
                    prop_assert!((1..=3).contains(&changed));
                }
            }
            prop_assert_eq!(&out.case_attributes, &case.case_attributes);
        }
    }

    #[test]
    fn noise_mutates_exactly_the_prescribed_count(seed in any::<u64>(), n in 1..120usize, ratio in 0.0..=1.0f64) {
        let (graph, rule) = paper_process();
        let ctx = AnomalyContext::for_graph(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = generate_log(&graph, &rule, n, &mut rng).unwrap();
        let (noisy, truth) = apply_noise(&clean, ratio, &ctx, &mut rng).unwrap();
        prop_assert_eq!(noisy.cases.len(), n);
        prop_assert_eq!(truth.cases.len(), n);
        let anomalous = truth.cases.iter().filter(|c| c.label.as_deref() != Some("normal")).count();
        prop_assert_eq!(anomalous, (ratio * n as f64).round() as usize);
        for ((c, t), o) in clean.cases.iter().zip(&truth.cases).zip(&noisy.cases) {
            prop_assert_eq!(&t.events, &c.events);
            prop_assert_eq!(&o.id, &c.id);
            prop_assert!(o.label.is_none());
            if t.label.as_deref() == Some("normal") {
                prop_assert_eq!(&o.events, &c.events);
            }
        }
    }
}

#[test]
fn zero_noise_leaves_the_log_unchanged() {
    let (graph, rule) = paper_process();
    let ctx = AnomalyContext::for_graph(&graph);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clean = generate_log(&graph, &rule, 200, &mut rng).unwrap();
    let (noisy, _) = apply_noise(&clean, 0.0, &ctx, &mut rng).unwrap();
    let strip = |c: &Case| (c.id.clone(), c.events.clone(), c.case_attributes.clone());
    assert!(noisy.cases.iter().map(strip).eq(clean.cases.iter().map(strip)));
}

/// Every kind applies to every paper-process case, so kinds are uniform.
/// df = 5; 20.52 is the 0.999 quantile of chi-square.
#[test]
fn anomaly_kinds_are_uniform() {
    let (graph, rule) = paper_process();
    let ctx = AnomalyContext::for_graph(&graph);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let clean = generate_log(&graph, &rule, 10_000, &mut rng).unwrap();
    let (_, truth) = apply_noise(&clean, 1.0, &ctx, &mut rng).unwrap();
    let mut counts = [0usize; 6];
    for c in &truth.cases {
        let kind = AnomalyKind::from_label(c.label.as_deref().unwrap()).unwrap();
        counts[AnomalyKind::ALL.iter().position(|k| *k == kind).unwrap()] += 1;
    }
    let expected = 10_000.0 / 6.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 20.52, "chi-square {chi2} for {counts:?}");
}

#[test]
fn generation_is_seed_deterministic() {
    let (graph, rule) = paper_process();
    let a = generate_log(&graph, &rule, 300, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = generate_log(&graph, &rule, 300, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}
