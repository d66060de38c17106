//! Scoring corrections against ground truth, plus an edit-distance oracle
//! and a variant-set baseline aligner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{AlignedPair, Alignment};
use crate::corpus::{Case, EventLog};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty variant set")]
    NoVariants,
    #[error("case {0} has no correction")]
    MissingCorrection(String),
    #[error("correction {0} has no ground truth")]
    UnknownCorrection(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const NORMAL: &str = "normal";

/// Unit-cost edit distance (insert, delete, substitute).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence table; `t[i][j]` covers `a[i..]` and `b[j..]`.
fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                t[i + 1][j + 1] + 1
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t
}

/// Fewest log plus model moves in any alignment of `log` with `model` when
/// only synchronous moves may pair events: `|log| + |model| - 2 * LCS`.
pub fn optimal_empty_moves<T: PartialEq>(log: &[T], model: &[T]) -> usize {
    log.len() + model.len() - 2 * lcs_table(log, model)[0][0]
}

/// One alignment achieving [`optimal_empty_moves`]. Synchronous moves are
/// taken as early as possible, then log moves before model moves.
pub fn optimal_alignment<S: AsRef<str>>(log: &[S], model: &[S]) -> Alignment {
    let a: Vec<&str> = log.iter().map(AsRef::as_ref).collect();
    let b: Vec<&str> = model.iter().map(AsRef::as_ref).collect();
    let t = lcs_table(&a, &b);
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::with_capacity(a.len() + b.len());
    while i < a.len() || j < b.len() {
        if i < a.len() && j < b.len() && a[i] == b[j] && t[i][j] == t[i + 1][j + 1] + 1 {
            pairs.push(AlignedPair {
                log: Some(a[i].to_string()),
                model: Some(b[j].to_string()),
            });
            i += 1;
            j += 1;
        } else if i < a.len() && (j == b.len() || t[i][j] == t[i + 1][j]) {
            pairs.push(AlignedPair {
                log: Some(a[i].to_string()),
                model: None,
            });
            i += 1;
        } else {
            pairs.push(AlignedPair {
                log: None,
                model: Some(b[j].to_string()),
            });
            j += 1;
        }
    }
    Alignment { pairs }
}

/// Distinct activity sequences of a log, sorted.
pub fn variants(log: &EventLog) -> Vec<Vec<String>> {
    let set: BTreeSet<Vec<String>> = log
        .cases
        .iter()
        .map(|c| c.events.iter().map(|e| e.activity.clone()).collect())
        .collect();
    set.into_iter().collect()
}

/// Aligns `case` optimally against the variant with the fewest empty moves,
/// the lexicographically smallest on ties.
pub fn reference_align(case: &Case, variants: &[Vec<String>]) -> Result<(Vec<String>, Alignment)> {
    let acts: Vec<&str> = case.activities();
    let best = variants
        .iter()
        .min_by(|x, y| {
            let cost = |v: &Vec<String>| {
                let v: Vec<&str> = v.iter().map(String::as_str).collect();
                optimal_empty_moves(&acts, &v)
            };
            cost(x).cmp(&cost(y)).then_with(|| x.cmp(y))
        })
        .ok_or(EvalError::NoVariants)?;
    let model: Vec<&str> = best.iter().map(String::as_str).collect();
    Ok((best.clone(), optimal_alignment(&acts, &model)))
}

/// The part of an alignment result that evaluation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub id: String,
    pub alignment: Alignment,
    pub corrected: Vec<String>,
}

/// Counts for the anomalous class as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Normal predicted normal.
    pub true_normal: usize,
    /// Normal predicted anomalous.
    pub false_anomalous: usize,
    /// Anomalous predicted normal.
    pub false_normal: usize,
    /// Anomalous predicted anomalous.
    pub true_anomalous: usize,
}

/// `2 TP / (2 TP + FP + FN)`, and 1 when the class is absent from both truth
/// and prediction.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

impl Confusion {
    pub fn f1_normal(&self) -> f64 {
        f1(self.true_normal, self.false_normal, self.false_anomalous)
    }

    pub fn f1_anomalous(&self) -> f64 {
        f1(self.true_anomalous, self.false_anomalous, self.false_normal)
    }

    pub fn total(&self) -> usize {
        self.true_normal + self.false_anomalous + self.false_normal + self.true_anomalous
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub cases: usize,
    /// Corrected sequence equals the ground truth.
    pub correct: usize,
    /// At least one empty move.
    pub flagged: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: usize,
    pub confusion: Confusion,
    pub f1_normal: f64,
    pub f1_anomalous: f64,
    pub f1_macro: f64,
    /// Fraction of corrections equal to the ground truth.
    pub accuracy: f64,
    pub incorrect: usize,
    /// Mean Levenshtein distance over incorrect corrections; 0 when there
    /// are none (see `error_defined`).
    pub mean_error: f64,
    pub error_defined: bool,
    pub correct: usize,
    /// Correct corrections whose alignment has the minimal empty-move count.
    pub optimal: usize,
    /// `optimal / correct`; 0 when nothing is correct (see
    /// `optimality_defined`).
    pub optimality: f64,
    pub optimality_defined: bool,
    pub per_kind: BTreeMap<String, KindReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// Scores `corrections` against `truth` (matched by id). A case is predicted
/// anomalous iff its alignment has an empty move.
pub fn evaluate(corrections: &[Correction], truth: &EventLog) -> Result<EvaluationReport> {
    let mut by_id: BTreeMap<&str, &Correction> = BTreeMap::new();
    for c in corrections {
        if by_id.insert(&c.id, c).is_some() {
            return Err(EvalError::DuplicateId(c.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut confusion = Confusion::default();
    let mut per_kind: BTreeMap<String, KindReport> = BTreeMap::new();
    let (mut correct, mut optimal, mut error_sum) = (0usize, 0usize, 0usize);
    for case in &truth.cases {
        if !seen.insert(case.id.as_str()) {
            return Err(EvalError::DuplicateId(case.id.clone()));
        }
        let c = by_id
            .get(case.id.as_str())
            .ok_or_else(|| EvalError::MissingCorrection(case.id.clone()))?;
        let label = case.label.as_deref().unwrap_or(NORMAL);
        let anomalous = label != NORMAL;
        let flagged = c.alignment.empty_moves() > 0;
        match (anomalous, flagged) {
            (false, false) => confusion.true_normal += 1,
            (false, true) => confusion.false_anomalous += 1,
            (true, false) => confusion.false_normal += 1,
            (true, true) => confusion.true_anomalous += 1,
        }
        let expected = case.activities();
        let is_correct = c.corrected.iter().map(String::as_str).eq(expected.iter().copied());
        let kind = per_kind.entry(label.to_string()).or_default();
        kind.cases += 1;
        kind.flagged += usize::from(flagged);
        if is_correct {
            correct += 1;
            kind.correct += 1;
            let log = c.alignment.log_projection();
            if c.alignment.empty_moves() == optimal_empty_moves(&log, &expected) {
                optimal += 1;
            }
        } else {
            let got: Vec<&str> = c.corrected.iter().map(String::as_str).collect();
            error_sum += levenshtein(&got, &expected);
        }
    }
    if let Some(extra) = by_id.keys().find(|id| !seen.contains(*id)) {
        return Err(EvalError::UnknownCorrection(extra.to_string()));
    }
    for k in per_kind.values_mut() {
        k.accuracy = k.correct as f64 / k.cases as f64;
    }
    let cases = truth.cases.len();
    let incorrect = cases - correct;
    let (f1_normal, f1_anomalous) = (confusion.f1_normal(), confusion.f1_anomalous());
    Ok(EvaluationReport {
        cases,
        confusion,
        f1_normal,
        f1_anomalous,
        f1_macro: (f1_normal + f1_anomalous) / 2.0,
        accuracy: if cases == 0 { 0.0 } else { correct as f64 / cases as f64 },
        incorrect,
        mean_error: if incorrect == 0 {
            0.0
        } else {
            error_sum as f64 / incorrect as f64
        },
        error_defined: incorrect > 0,
        correct,
        optimal,
        optimality: if correct == 0 {
            0.0
        } else {
            optimal as f64 / correct as f64
        },
        optimality_defined: correct > 0,
        per_kind,
        run_config: None,
    })
}

/// Aligned text table with one row per labeled report.
pub fn render_table(rows: &[(String, &EvaluationReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}  {:>6}  {:>8}",
        "method", "F1^N", "F1^A", "F1", "Accuracy", "Error", "Optimal"
    );
    for (name, r) in rows {
        let error = if r.error_defined {
            format!("{:.2}", r.mean_error)
        } else {
            "-".into()
        };
        let optimal = if r.optimality_defined {
            format!("{:.1}%", 100.0 * r.optimality)
        } else {
            "-".into()
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>8.4}  {:>6}  {:>8}",
            name, r.f1_normal, r.f1_anomalous, r.f1_macro, r.accuracy, error, optimal
        );
    }
    out
}

/// Per-kind breakdown as a text table.
pub fn render_kinds(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10}  {:>6}  {:>8}  {:>8}", "label", "cases", "flagged", "accuracy");
    for (label, k) in &report.per_kind {
        let _ = writeln!(
            out,
            "{:<10}  {:>6}  {:>8}  {:>8.4}",
            label, k.cases, k.flagged, k.accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Event;

    fn s(x: &str) -> Vec<char> {
        x.chars().collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&s("abc"), &s("abc")), 0);
        assert_eq!(levenshtein(&s("abc"), &s("")), 3);
        assert_eq!(levenshtein(&s("abcxe"), &s("abcde")), 1);
        assert_eq!(levenshtein(&s("kitten"), &s("sitting")), 3);
    }

    #[test]
    fn empty_move_examples() {
        assert_eq!(optimal_empty_moves(&s("abcxe"), &s("abcde")), 2);
        assert_eq!(optimal_empty_moves(&s("abc"), &s("abc")), 0);
        assert_eq!(optimal_empty_moves(&s(""), &s("abcd")), 4);
        let al = optimal_alignment(&["a", "b", "c", "x", "e"], &["a", "b", "c", "d", "e"]);
        assert_eq!(
            serde_json::to_string(&al).unwrap(),
            r#"[["a","a"],["b","b"],["c","c"],["x",">>"],[">>","d"],["e","e"]]"#
        );
    }

    fn case(id: &str, acts: &[&str], label: &str) -> Case {
        let mut c = Case::new(id);
        c.events = acts.iter().map(|a| Event::new(*a)).collect();
        c.label = Some(label.into());
        c
    }

    fn correction(id: &str, log: &[&str], model: &[&str]) -> Correction {
        let alignment = optimal_alignment(log, model);
        Correction {
            id: id.into(),
            alignment,
            corrected: model.iter().map(|m| m.to_string()).collect(),
        }
    }

    #[test]
    fn reference_alignment_picks_the_closest_variant() {
        let vs = vec![
            vec!["a".to_string(), "b".into(), "c".into()],
            vec!["a".to_string(), "d".into(), "c".into()],
        ];
        let (v, al) = reference_align(&case("1", &["a", "c"], "skip"), &vs).unwrap();
        assert_eq!(v, vs[0]);
        assert_eq!(al.model_moves().collect::<Vec<_>>(), ["b"]);
        let (_, al) = reference_align(&case("1", &["a", "d", "c"], NORMAL), &vs).unwrap();
        assert_eq!(al.empty_moves(), 0);
        assert!(matches!(
            reference_align(&case("1", &["a"], NORMAL), &[]),
            Err(EvalError::NoVariants)
        ));
    }

    /// Four cases: a normal case left alone (TN), a normal case changed (FP),
    /// an attribute anomaly left alone (FN) and a skip restored (TP).
    #[test]
    fn four_case_confusion_matrix() {
        let truth = EventLog::new(vec![
            case("1", &["a", "b"], NORMAL),
            case("2", &["a", "b"], NORMAL),
            case("3", &["a", "b"], "attribute"),
            case("4", &["a", "b", "c"], "skip"),
        ]);
        let corrections = vec![
            correction("1", &["a", "b"], &["a", "b"]),
            correction("2", &["a", "b"], &["a"]),
            correction("3", &["a", "b"], &["a", "b"]),
            correction("4", &["a", "c"], &["a", "b", "c"]),
        ];
        let r = evaluate(&corrections, &truth).unwrap();
        assert_eq!(
            r.confusion,
            Confusion {
                true_normal: 1,
                false_anomalous: 1,
                false_normal: 1,
                true_anomalous: 1
            }
        );
        assert_eq!(r.f1_normal, 0.5);
        assert_eq!(r.f1_anomalous, 0.5);
        assert_eq!(r.f1_macro, 0.5);
        assert_eq!(r.correct, 3);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.mean_error, 1.0);
        assert_eq!(r.optimality, 1.0);
        assert_eq!(r.per_kind["skip"].correct, 1);

        let mut shuffled = corrections.clone();
        shuffled.reverse();
        let mut t2 = truth.clone();
        t2.cases.rotate_left(1);
        assert_eq!(evaluate(&shuffled, &t2).unwrap(), r);
    }

    #[test]
    fn perfect_corrections() {
        let truth = EventLog::new(vec![case("1", &["a"], NORMAL), case("2", &["a", "b"], "skip")]);
        let corrections = vec![
            correction("1", &["a"], &["a"]),
            correction("2", &["a"], &["a", "b"]),
        ];
        let r = evaluate(&corrections, &truth).unwrap();
        assert_eq!(r.f1_macro, 1.0);
        assert!(!r.error_defined);
        assert_eq!(r.mean_error, 0.0);
        assert_eq!(r.optimality, 1.0);
        let table = render_table(&[("CE".into(), &r)]);
        assert!(table.contains("F1^N") && table.contains("100.0%"));
    }

    #[test]
    fn suboptimal_alignment_of_a_correct_sequence() {
        let truth = EventLog::new(vec![case("1", &["a", "b"], "rework")]);
        let alignment: Alignment =
            serde_json::from_str(r#"[["a",">>"],["b",">>"],[">>","a"],[">>","b"]]"#).unwrap();
        let c = Correction {
            id: "1".into(),
            alignment,
            corrected: vec!["a".into(), "b".into()],
        };
        let r = evaluate(&[c], &truth).unwrap();
        assert_eq!(r.correct, 1);
        assert_eq!(r.optimal, 0);
    }

    #[test]
    fn id_mismatches_are_errors() {
        let truth = EventLog::new(vec![case("1", &["a"], NORMAL)]);
        assert!(matches!(
            evaluate(&[], &truth),
            Err(EvalError::MissingCorrection(_))
        ));
        let extra = vec![correction("1", &["a"], &["a"]), correction("9", &["a"], &["a"])];
        assert!(matches!(
            evaluate(&extra, &truth),
            Err(EvalError::UnknownCorrection(_))
        ));
    }
}
