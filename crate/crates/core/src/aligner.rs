//! Bidirectional beam-search alignment of a case against a forward and a
//! backward next-event model.
//!
//! Every beam keeps, for its current sequence `c_1..c_T`, the forward states
//! after `BOS, c_1..c_t` and the backward states after `BOS, c_T..c_{t+1}`
//! together with their next-event log-distributions and cumulative
//! log-probabilities. An insertion at `t` or a deletion of `c_{t+1}..c_{t+n}`
//! is then scored from four cached terms without running either model:
//!
//! ```text
//! insert e at t:  fwd(c_1..c_t) + fwd(e | c_1..c_t) + bwd(e | c_T..c_{t+1}) + bwd(c_T..c_{t+1})
//! delete run:     fwd(c_1..c_t) + fwd(c_{t+n+1} | c_1..c_t)
//!                   + bwd(c_t | c_T..c_{t+n+1}) + bwd(c_T..c_{t+n+1})
//! ```
//!
//! with `EOS` standing in for `c_{t+n+1}` or `c_t` when the run touches an
//! end. The unchanged beam is scored with [`Scorer::case_score`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Case, CorpusError, Direction, Event, Step, BOS, EOS, RESERVED};
use crate::neuralnet::{ModelError, NextEventModel};

pub const GAP: &str = ">>";

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("forward and backward models were built for different schemas")]
    SchemaMismatch,
    #[error("expected a {expected:?} model, got a {found:?} model")]
    WrongDirection {
        expected: Direction,
        found: Direction,
    },
    #[error("invalid search config: {0}")]
    BadConfig(String),
    #[error("position {position} out of range for a sequence of length {len}")]
    OutOfRange { position: usize, len: usize },
    #[error("deletion of {length} events at {position} out of range for a sequence of length {len}")]
    RunOutOfRange {
        position: usize,
        length: usize,
        len: usize,
    },
    #[error("activity id {0} is not a real activity")]
    NotAnActivity(u32),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Beam width K.
    pub beam_width: usize,
    /// Longest deleted run N.
    pub max_deletion: usize,
    pub max_iterations: usize,
    /// Score events by the activity head only.
    pub control_flow_only: bool,
    /// Divide candidate scores by the candidate length plus one.
    pub length_normalize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_deletion: 3,
            max_iterations: 10,
            control_flow_only: false,
            length_normalize: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_deletion == 0 || self.max_iterations == 0 {
            return Err(AlignError::BadConfig(
                "beam width, max deletion and max iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// An edit applied to the current sequence. Positions count events of the
/// current sequence, before the edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AlignmentOp {
    /// The beam was carried over unchanged.
    Sync,
    /// `event` goes before the current event at `position`.
    Insert { position: usize, event: Event },
    /// The current events `position..position + length` are removed.
    Delete { position: usize, length: usize },
}

/// One column of an alignment; `None` is the gap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedPair {
    pub log: Option<String>,
    pub model: Option<String>,
}

impl Serialize for AlignedPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let side = |v: &Option<String>| v.clone().unwrap_or_else(|| GAP.to_string());
        [side(&self.log), side(&self.model)].serialize(s)
    }
}

impl<'de> Deserialize<'de> for AlignedPair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [log, model] = <[String; 2]>::deserialize(d)?;
        let side = |v: String| (v != GAP).then_some(v);
        let pair = AlignedPair {
            log: side(log),
            model: side(model),
        };
        if pair.log.is_none() && pair.model.is_none() {
            return Err(serde::de::Error::custom("an alignment pair cannot be two gaps"));
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
}

impl Alignment {
    /// Number of log moves plus model moves.
    pub fn empty_moves(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.log.is_none() || p.model.is_none())
            .count()
    }

    pub fn log_projection(&self) -> Vec<&str> {
        self.pairs.iter().filter_map(|p| p.log.as_deref()).collect()
    }

    pub fn model_projection(&self) -> Vec<&str> {
        self.pairs.iter().filter_map(|p| p.model.as_deref()).collect()
    }

    pub fn log_moves(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .filter(|p| p.model.is_none())
            .filter_map(|p| p.log.as_deref())
    }

    pub fn model_moves(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .filter(|p| p.log.is_none())
            .filter_map(|p| p.model.as_deref())
    }
}

/// Provenance of one element of the alignment under construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Cell<E> {
    Sync(usize),
    LogMove(usize),
    ModelMove(E),
}

fn current_cell_indices<E>(cells: &[Cell<E>]) -> Vec<usize> {
    cells
        .iter()
        .enumerate()
        .filter(|(_, c)| !matches!(c, Cell::LogMove(_)))
        .map(|(i, _)| i)
        .collect()
}

fn insert_cell<E>(cells: &mut Vec<Cell<E>>, position: usize, event: E) -> Result<()> {
    let current = current_cell_indices(cells);
    if position > current.len() {
        return Err(AlignError::OutOfRange {
            position,
            len: current.len(),
        });
    }
    let at = current.get(position).copied().unwrap_or(cells.len());
    cells.insert(at, Cell::ModelMove(event));
    Ok(())
}

fn delete_cells<E>(cells: &mut Vec<Cell<E>>, position: usize, length: usize) -> Result<()> {
    let current = current_cell_indices(cells);
    if length == 0 || position + length > current.len() {
        return Err(AlignError::RunOutOfRange {
            position,
            length,
            len: current.len(),
        });
    }
    let run: BTreeSet<usize> = current[position..position + length].iter().copied().collect();
    let mut i = 0;
    cells.retain_mut(|cell| {
        let keep = if run.contains(&i) {
            match cell {
                Cell::Sync(orig) => {
                    *cell = Cell::LogMove(*orig);
                    true
                }
                _ => false,
            }
        } else {
            true
        };
        i += 1;
        keep
    });
    Ok(())
}

fn cells_to_output(case: &Case, cells: &[Cell<Event>]) -> (Case, Alignment) {
    let mut corrected = Case::new(case.id.clone());
    corrected.case_attributes = case.case_attributes.clone();
    let mut pairs = Vec::with_capacity(cells.len());
    for cell in cells {
        match cell {
            Cell::Sync(i) => {
                let e = &case.events[*i];
                corrected.events.push(e.clone());
                pairs.push(AlignedPair {
                    log: Some(e.activity.clone()),
                    model: Some(e.activity.clone()),
                });
            }
            Cell::LogMove(i) => pairs.push(AlignedPair {
                log: Some(case.events[*i].activity.clone()),
                model: None,
            }),
            Cell::ModelMove(e) => {
                corrected.events.push(e.clone());
                pairs.push(AlignedPair {
                    log: None,
                    model: Some(e.activity.clone()),
                });
            }
        }
    }
    (corrected, Alignment { pairs })
}

/// Applies `history` to `case` and returns the corrected case and the
/// alignment that relates the two.
pub fn replay_history(case: &Case, history: &[AlignmentOp]) -> Result<(Case, Alignment)> {
    let mut cells: Vec<Cell<Event>> = (0..case.events.len()).map(Cell::Sync).collect();
    for op in history {
        match op {
            AlignmentOp::Sync => {}
            AlignmentOp::Insert { position, event } => insert_cell(&mut cells, *position, event.clone())?,
            AlignmentOp::Delete { position, length } => delete_cells(&mut cells, *position, *length)?,
        }
    }
    Ok(cells_to_output(case, &cells))
}

/// Cached states of one reading direction. Index `s` holds the state after
/// `BOS` and the first `s` elements in reading order.
#[derive(Debug, Clone)]
struct DirCache {
    states: Vec<Vec<f64>>,
    log_probs: Vec<Vec<Vec<f64>>>,
    /// `cum[s]`: log-probability of the first `s` elements.
    cum: Vec<f64>,
}

impl DirCache {
    fn event_lp(&self, s: usize, event: &[u32], control_flow_only: bool) -> f64 {
        let heads = if control_flow_only { 1 } else { event.len() };
        (0..heads).map(|k| self.log_probs[s][k][event[k] as usize]).sum()
    }
}

/// A hypothesis of the search: the current sequence, its provenance and the
/// cached model states.
#[derive(Debug, Clone)]
pub struct Beam {
    cells: Vec<Cell<Step>>,
    current: Vec<Step>,
    history: Vec<AlignmentOp>,
    score: f64,
    fwd: DirCache,
    bwd: DirCache,
}

impl Beam {
    pub fn current(&self) -> &[Step] {
        &self.current
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn history(&self) -> &[AlignmentOp] {
        &self.history
    }

    pub fn empty_moves(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| !matches!(c, Cell::Sync(_)))
            .count()
    }

    fn len(&self) -> usize {
        self.current.len()
    }
}

/// The two directional models plus the scoring mode.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'m> {
    pub fwd: &'m NextEventModel,
    pub bwd: &'m NextEventModel,
    pub control_flow_only: bool,
}

fn log_mean_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + (0.5 * ((a - m).exp() + (b - m).exp())).ln()
}

/// Total order on candidates: higher score, then fewer empty moves.
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl<'m> Scorer<'m> {
    pub fn new(fwd: &'m NextEventModel, bwd: &'m NextEventModel, control_flow_only: bool) -> Result<Self> {
        if fwd.direction != Direction::Forward {
            return Err(AlignError::WrongDirection {
                expected: Direction::Forward,
                found: fwd.direction,
            });
        }
        if bwd.direction != Direction::Backward {
            return Err(AlignError::WrongDirection {
                expected: Direction::Backward,
                found: bwd.direction,
            });
        }
        if fwd.schema != bwd.schema {
            return Err(AlignError::SchemaMismatch);
        }
        Ok(Self {
            fwd,
            bwd,
            control_flow_only,
        })
    }

    fn eos(&self) -> Step {
        vec![EOS; self.fwd.schema.step_width()]
    }

    /// Extends `cache` (valid up to index `keep`) over `elements` in reading
    /// order.
    fn extend(&self, model: &NextEventModel, cache: &mut DirCache, keep: usize, elements: &[&Step]) {
        cache.states.truncate(keep + 1);
        cache.log_probs.truncate(keep + 1);
        cache.cum.truncate(keep + 1);
        for s in keep..elements.len() {
            let event = elements[s];
            let lp = cache.event_lp(s, event, self.control_flow_only);
            let dist = model.step(&cache.states[s], event);
            cache.cum.push(cache.cum[s] + lp);
            cache.states.push(dist.state);
            cache.log_probs.push(dist.log_probs);
        }
    }

    fn fresh_cache(&self, model: &NextEventModel, h0: Vec<f64>) -> DirCache {
        let bos = vec![BOS; model.schema.step_width()];
        let dist = model.step(&h0, &bos);
        DirCache {
            states: vec![dist.state],
            log_probs: vec![dist.log_probs],
            cum: vec![0.0],
        }
    }

    /// A beam holding `case` unchanged.
    pub fn beam(&self, case: &Case) -> Result<Beam> {
        let enc = self.fwd.encode(case)?;
        let current: Vec<Step> = enc.interior().to_vec();
        let mut fwd = self.fresh_cache(self.fwd, self.fwd.case_state(&enc.case_attr_ids)?);
        let mut bwd = self.fresh_cache(self.bwd, self.bwd.case_state(&enc.case_attr_ids)?);
        self.extend(self.fwd, &mut fwd, 0, &current.iter().collect::<Vec<_>>());
        self.extend(self.bwd, &mut bwd, 0, &current.iter().rev().collect::<Vec<_>>());
        let mut beam = Beam {
            cells: (0..current.len()).map(Cell::Sync).collect(),
            current,
            history: Vec::new(),
            score: 0.0,
            fwd,
            bwd,
        };
        beam.score = self.case_score(&beam);
        Ok(beam)
    }

    /// Log of the mean of the forward and backward probabilities of the
    /// beam's whole sequence, end symbol included.
    pub fn case_score(&self, beam: &Beam) -> f64 {
        let t = beam.len();
        let eos = self.eos();
        let f = beam.fwd.cum[t] + beam.fwd.event_lp(t, &eos, self.control_flow_only);
        let b = beam.bwd.cum[t] + beam.bwd.event_lp(t, &eos, self.control_flow_only);
        log_mean_exp(f, b)
    }

    /// The event inserted for `activity` at `t`: each attribute takes its most
    /// likely real value under the forward model, lowest id on ties.
    pub fn insertion_event(&self, beam: &Beam, activity: u32, t: usize) -> Result<Step> {
        if t > beam.len() {
            return Err(AlignError::OutOfRange {
                position: t,
                len: beam.len(),
            });
        }
        if activity < RESERVED || activity as usize >= self.fwd.schema.activities.len() {
            return Err(AlignError::NotAnActivity(activity));
        }
        let mut event = Vec::with_capacity(self.fwd.schema.step_width());
        event.push(activity);
        for head in &beam.fwd.log_probs[t][1..] {
            let mut best = RESERVED as usize;
            for (id, &lp) in head.iter().enumerate().skip(RESERVED as usize + 1) {
                if lp > head[best] {
                    best = id;
                }
            }
            event.push(best as u32);
        }
        Ok(event)
    }

    /// Score of inserting `activity` (with argmax attributes) before the
    /// current element `t`.
    pub fn insertion_score(&self, beam: &Beam, activity: u32, t: usize) -> Result<f64> {
        let event = self.insertion_event(beam, activity, t)?;
        Ok(self.insertion_score_of(beam, &event, t))
    }

    fn insertion_score_of(&self, beam: &Beam, event: &[u32], t: usize) -> f64 {
        let s = beam.len() - t;
        beam.fwd.cum[t]
            + beam.fwd.event_lp(t, event, self.control_flow_only)
            + beam.bwd.event_lp(s, event, self.control_flow_only)
            + beam.bwd.cum[s]
    }

    /// Score of deleting the current elements `t..t + n`.
    pub fn deletion_score(&self, beam: &Beam, n: usize, t: usize) -> Result<f64> {
        let len = beam.len();
        if n == 0 || t + n > len {
            return Err(AlignError::RunOutOfRange {
                position: t,
                length: n,
                len,
            });
        }
        let eos = self.eos();
        let after = beam.current.get(t + n).unwrap_or(&eos);
        let before = if t == 0 { &eos } else { &beam.current[t - 1] };
        let s = len - t - n;
        Ok(beam.fwd.cum[t]
            + beam.fwd.event_lp(t, after, self.control_flow_only)
            + beam.bwd.event_lp(s, before, self.control_flow_only)
            + beam.bwd.cum[s])
    }

    /// The beam after an edit, with caches rebuilt on the changed side only.
    fn apply(&self, parent: &Beam, edit: &Edit, score: f64) -> Result<Beam> {
        let mut beam = parent.clone();
        beam.score = score;
        let (t, keep_bwd) = match edit {
            Edit::Keep => {
                beam.history.push(AlignmentOp::Sync);
                return Ok(beam);
            }
            Edit::Insert { t, event } => {
                insert_cell(&mut beam.cells, *t, event.clone())?;
                beam.current.insert(*t, event.clone());
                beam.history.push(AlignmentOp::Insert {
                    position: *t,
                    event: self.fwd.schema.decode_event(event)?,
                });
                (*t, parent.len() - t)
            }
            Edit::Delete { t, n } => {
                delete_cells(&mut beam.cells, *t, *n)?;
                beam.current.drain(*t..*t + *n);
                beam.history.push(AlignmentOp::Delete {
                    position: *t,
                    length: *n,
                });
                (*t, parent.len() - t - n)
            }
        };
        let forward: Vec<&Step> = beam.current.iter().collect();
        let backward: Vec<&Step> = beam.current.iter().rev().collect();
        let (mut f, mut b) = (std::mem::replace(&mut beam.fwd, parent.fwd.clone()), parent.bwd.clone());
        self.extend(self.fwd, &mut f, t, &forward);
        self.extend(self.bwd, &mut b, keep_bwd, &backward);
        beam.fwd = f;
        beam.bwd = b;
        Ok(beam)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Edit {
    Keep,
    Insert { t: usize, event: Step },
    Delete { t: usize, n: usize },
}

struct Candidate {
    score: f64,
    empty_moves: usize,
    parent: usize,
    edit: Edit,
}

impl Candidate {
    fn sequence(&self, beams: &[Beam]) -> Vec<Step> {
        let mut seq = beams[self.parent].current.clone();
        match &self.edit {
            Edit::Keep => {}
            Edit::Insert { t, event } => seq.insert(*t, event.clone()),
            Edit::Delete { t, n } => {
                seq.drain(*t..*t + *n);
            }
        }
        seq
    }
}

/// One ranked outcome of the search.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCase {
    pub corrected: Case,
    pub alignment: Alignment,
    pub score: f64,
    pub history: Vec<AlignmentOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult {
    /// At most K results, best first.
    pub ranked: Vec<AlignedCase>,
    pub converged: bool,
    pub iterations: usize,
    /// Best score after each iteration.
    pub top_scores: Vec<f64>,
}

impl AlignResult {
    pub fn best(&self) -> &AlignedCase {
        &self.ranked[0]
    }
}

fn candidates(scorer: &Scorer, beams: &[Beam], config: &SearchConfig) -> Result<Vec<Candidate>> {
    let activities = scorer.fwd.schema.activities.real_ids();
    let norm = |score: f64, len: usize| {
        if config.length_normalize {
            score / (len + 1) as f64
        } else {
            score
        }
    };
    let mut out = Vec::new();
    for (parent, beam) in beams.iter().enumerate() {
        let len = beam.len();
        let moves = beam.empty_moves();
        out.push(Candidate {
            score: norm(scorer.case_score(beam), len),
            empty_moves: moves,
            parent,
            edit: Edit::Keep,
        });
        let inserted: Vec<bool> = beam
            .cells
            .iter()
            .filter_map(|c| match c {
                Cell::Sync(_) => Some(false),
                Cell::ModelMove(_) => Some(true),
                Cell::LogMove(_) => None,
            })
            .collect();
        for n in 1..=config.max_deletion.min(len) {
            for t in 0..=len - n {
                let removed_inserts = inserted[t..t + n].iter().filter(|&&b| b).count();
                out.push(Candidate {
                    score: norm(scorer.deletion_score(beam, n, t)?, len - n),
                    empty_moves: moves + n - 2 * removed_inserts,
                    parent,
                    edit: Edit::Delete { t, n },
                });
            }
        }
        for t in 0..=len {
            for activity in activities.clone() {
                let event = scorer.insertion_event(beam, activity, t)?;
                out.push(Candidate {
                    score: norm(scorer.insertion_score_of(beam, &event, t), len + 1),
                    empty_moves: moves + 1,
                    parent,
                    edit: Edit::Insert { t, event },
                });
            }
        }
    }
    Ok(out)
}

fn activity_key(steps: &[Step]) -> Vec<u32> {
    steps.iter().map(|s| s[0]).collect()
}

/// Picks the top-K distinct activity sequences. Candidates that reach the
/// same activity sequence are one alignment target; the one with the fewest
/// empty moves represents it (then higher score, then smaller steps).
/// Representatives rank by higher score, then fewer empty moves, then the
/// lexicographically smaller activity sequence.
fn select(
    scorer: &Scorer,
    beams: &[Beam],
    cands: Vec<Candidate>,
    k: usize,
) -> Result<Vec<Beam>> {
    let mut best: BTreeMap<Vec<u32>, (usize, Vec<Step>)> = BTreeMap::new();
    for (c, cand) in cands.iter().enumerate() {
        let seq = cand.sequence(beams);
        let key = activity_key(&seq);
        match best.get_mut(&key) {
            None => {
                best.insert(key, (c, seq));
            }
            Some(entry) => {
                let old = &cands[entry.0];
                let better = cand
                    .empty_moves
                    .cmp(&old.empty_moves)
                    .then(old.score.total_cmp(&cand.score))
                    .then(seq.cmp(&entry.1))
                    == Ordering::Less;
                if better {
                    *entry = (c, seq);
                }
            }
        }
    }
    let mut reps: Vec<(Vec<u32>, usize)> = best.into_iter().map(|(key, (c, _))| (key, c)).collect();
    reps.sort_by(|a, b| {
        let (x, y) = (&cands[a.1], &cands[b.1]);
        rank((x.score, x.empty_moves), (y.score, y.empty_moves)).then(a.0.cmp(&b.0))
    });
    reps.into_iter()
        .take(k)
        .map(|(_, c)| {
            let cand = &cands[c];
            scorer.apply(&beams[cand.parent], &cand.edit, cand.score)
        })
        .collect()
}

/// Aligns `case` by iterated bidirectional beam search. Iteration stops when
/// the set of K sequences no longer changes or after `max_iterations`.
pub fn deep_align(
    fwd: &NextEventModel,
    bwd: &NextEventModel,
    case: &Case,
    config: &SearchConfig,
) -> Result<AlignResult> {
    config.validate()?;
    let scorer = Scorer::new(fwd, bwd, config.control_flow_only)?;
    let mut beams = vec![scorer.beam(case)?];
    let mut converged = false;
    let mut iterations = 0;
    let mut top_scores = Vec::new();
    while iterations < config.max_iterations {
        iterations += 1;
        let cands = candidates(&scorer, &beams, config)?;
        let next = select(&scorer, &beams, cands, config.beam_width)?;
        top_scores.push(next[0].score);
        let before: BTreeSet<Vec<u32>> = beams.iter().map(|b| activity_key(&b.current)).collect();
        let after: BTreeSet<Vec<u32>> = next.iter().map(|b| activity_key(&b.current)).collect();
        let same = before == after;
        beams = next;
        if same {
            converged = true;
            break;
        }
    }
    let ranked = beams
        .iter()
        .map(|beam| {
            let history: Vec<AlignmentOp> = beam
                .history
                .iter()
                .filter(|op| !matches!(op, AlignmentOp::Sync))
                .cloned()
                .collect();
            let (corrected, alignment) = replay_history(case, &history)?;
            Ok(AlignedCase {
                corrected,
                alignment,
                score: beam.score,
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignResult {
        ranked,
        converged,
        iterations,
        top_scores,
    })
}

/// One line of an alignment output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: String,
    pub score: f64,
    pub alignment: Alignment,
    pub corrected: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
}

impl AlignmentRecord {
    /// The top-ranked result of `result` for `case`.
    pub fn from_result(case: &Case, result: &AlignResult) -> Self {
        let best = result.best();
        Self {
            id: case.id.clone(),
            score: best.score,
            alignment: best.alignment.clone(),
            corrected: best.corrected.activities().iter().map(|a| a.to_string()).collect(),
            converged: result.converged,
            iterations: result.iterations,
        }
    }
}

/// Generates the most likely case for the given case attributes by aligning
/// the empty case. The iteration budget is raised to the longest case the
/// models were sized for, since each iteration adds at most one event.
/// Scores are always length-normalized here: every partial sequence carries
/// one transition the models never saw, so raw scores favour stopping short.
pub fn complete_case(
    fwd: &NextEventModel,
    bwd: &NextEventModel,
    case_attributes: &BTreeMap<String, String>,
    config: &SearchConfig,
) -> Result<Case> {
    let mut empty = Case::new("completion");
    empty.case_attributes = case_attributes.clone();
    let config = SearchConfig {
        max_iterations: config.max_iterations.max(fwd.hidden_size() / 2),
        length_normalize: true,
        ..config.clone()
    };
    let result = deep_align(fwd, bwd, &empty, &config)?;
    Ok(result.ranked.into_iter().next().expect("beam width >= 1").corrected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttributeSchema, EventLog};
    use crate::neuralnet::{init_model, train, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case_of(acts: &[&str]) -> Case {
        let mut c = Case::new("x");
        c.events = acts.iter().map(|a| Event::new(*a)).collect();
        c
    }

    fn acts(c: &Case) -> Vec<&str> {
        c.activities()
    }

    fn random_models(log: &EventLog, seed: u64) -> (NextEventModel, NextEventModel) {
        let schema = AttributeSchema::build(log).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = log.max_case_len() + 2;
        (
            init_model(&schema, Direction::Forward, len, &mut rng).unwrap(),
            init_model(&schema, Direction::Backward, len, &mut rng).unwrap(),
        )
    }

    fn attr_log() -> EventLog {
        let mut cases = Vec::new();
        for (i, seq) in [vec!["a", "b", "c", "d"], vec!["b", "a"], vec!["c"]].iter().enumerate() {
            let mut c = Case::new(format!("c{i}"));
            c.case_attributes.insert("T".into(), format!("t{}", i % 2));
            for (j, a) in seq.iter().enumerate() {
                c.events.push(Event::new(*a).with_attr("U", format!("u{}", (i + j) % 3)));
            }
            cases.push(c);
        }
        EventLog::new(cases)
    }

    /// Log-probability of `events` (reading order) after `BOS` from scratch,
    /// and the distribution that follows.
    fn naive(model: &NextEventModel, h0: &[f64], events: &[Step], cfo: bool) -> (f64, Vec<Vec<f64>>) {
        let width = model.schema.step_width();
        let mut steps = vec![vec![BOS; width]];
        steps.extend(events.iter().cloned());
        let lp = model.sequence_log_prob(h0, &steps, cfo);
        let state = model.run(h0, &steps[..steps.len() - 1]);
        let dist = model.step(&state, steps.last().unwrap());
        (lp, dist.log_probs)
    }

    fn event_lp(dist: &[Vec<f64>], e: &[u32], cfo: bool) -> f64 {
        let heads = if cfo { 1 } else { e.len() };
        (0..heads).map(|k| dist[k][e[k] as usize]).sum()
    }

    #[test]
    fn cached_scores_match_naive_recomputation() {
        let log = attr_log();
        let (f, b) = random_models(&log, 11);
        for cfo in [false, true] {
            let scorer = Scorer::new(&f, &b, cfo).unwrap();
            for case in &log.cases {
                let beam = scorer.beam(case).unwrap();
                let enc = f.encode(case).unwrap();
                let c = enc.interior().to_vec();
                let h0 = f.case_state(&enc.case_attr_ids).unwrap();
                let hb = b.case_state(&enc.case_attr_ids).unwrap();
                let len = c.len();
                let eos = vec![EOS; 2];
                for t in 0..=len {
                    let suffix: Vec<Step> = c[t..].iter().rev().cloned().collect();
                    let (pf, df) = naive(&f, &h0, &c[..t], cfo);
                    let (pb, db) = naive(&b, &hb, &suffix, cfo);
                    for a in f.schema.activities.real_ids() {
                        let e = scorer.insertion_event(&beam, a, t).unwrap();
                        let want = pf + event_lp(&df, &e, cfo) + event_lp(&db, &e, cfo) + pb;
                        let got = scorer.insertion_score(&beam, a, t).unwrap();
                        assert!((got - want).abs() < 1e-9);
                    }
                    for n in 1..=len - t {
                        let after = c.get(t + n).unwrap_or(&eos);
                        let before = if t == 0 { &eos } else { &c[t - 1] };
                        let suffix: Vec<Step> = c[t + n..].iter().rev().cloned().collect();
                        let (pb, db) = naive(&b, &hb, &suffix, cfo);
                        let want = pf + event_lp(&df, after, cfo) + event_lp(&db, before, cfo) + pb;
                        let got = scorer.deletion_score(&beam, n, t).unwrap();
                        assert!((got - want).abs() < 1e-9);
                    }
                }
                assert!(scorer.deletion_score(&beam, 1, len).is_err());
                assert!(scorer.insertion_score(&beam, 3, len + 1).is_err());
            }
        }
    }

    #[test]
    fn rebuilt_caches_match_fresh_beams() {
        let log = attr_log();
        let (f, b) = random_models(&log, 5);
        let scorer = Scorer::new(&f, &b, false).unwrap();
        let case = &log.cases[0];
        let beam = scorer.beam(case).unwrap();
        let edits = [
            Edit::Insert {
                t: 2,
                event: scorer.insertion_event(&beam, 4, 2).unwrap(),
            },
            Edit::Delete { t: 1, n: 2 },
            Edit::Delete { t: 0, n: 4 },
        ];
        for edit in edits {
            let child = scorer.apply(&beam, &edit, 0.0).unwrap();
            let (corrected, _) = replay_history(case, &child.history).unwrap();
            let fresh = scorer.beam(&corrected).unwrap();
            assert_eq!(child.current, fresh.current);
            assert_eq!(child.fwd.states, fresh.fwd.states);
            assert_eq!(child.bwd.states, fresh.bwd.states);
            for (x, y) in child.fwd.cum.iter().zip(&fresh.fwd.cum) {
                assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in child.bwd.cum.iter().zip(&fresh.bwd.cum) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn case_score_is_the_log_mean() {
        assert!((log_mean_exp(-2.0, -2.0) + 2.0).abs() < 1e-12);
        let v = log_mean_exp(-1.0, -3.0);
        assert!((v - (0.5 * ((-1f64).exp() + (-3f64).exp())).ln()).abs() < 1e-12);
        assert!(v <= -1.0);
        assert!(log_mean_exp(-1e5, -1e5 - 1.0).is_finite());
    }

    #[test]
    fn replay_examples() {
        let case = case_of(&["a", "b", "c"]);
        let (same, al) = replay_history(&case, &[]).unwrap();
        assert_eq!(same, case);
        assert_eq!(al.empty_moves(), 0);

        let (c, al) = replay_history(&case, &[AlignmentOp::Delete { position: 1, length: 1 }]).unwrap();
        assert_eq!(acts(&c), ["a", "c"]);
        assert_eq!(al.log_moves().collect::<Vec<_>>(), ["b"]);
        assert_eq!(al.empty_moves(), 1);

        // a late execution of b: removed at its position, inserted after c
        let history = [
            AlignmentOp::Insert {
                position: 3,
                event: Event::new("b"),
            },
            AlignmentOp::Delete { position: 1, length: 1 },
        ];
        let (c, al) = replay_history(&case_of(&["a", "b", "c"]), &history).unwrap();
        assert_eq!(acts(&c), ["a", "c", "b"]);
        assert_eq!(
            serde_json::to_string(&al).unwrap(),
            r#"[["a","a"],["b",">>"],["c","c"],[">>","b"]]"#
        );

        // deleting an inserted event removes it outright
        let history = [
            AlignmentOp::Insert {
                position: 0,
                event: Event::new("z"),
            },
            AlignmentOp::Delete { position: 0, length: 2 },
        ];
        let (c, al) = replay_history(&case, &history).unwrap();
        assert_eq!(acts(&c), ["b", "c"]);
        assert_eq!(al.log_projection(), ["a", "b", "c"]);
        assert_eq!(al.empty_moves(), 1);

        let bad = [AlignmentOp::Delete { position: 2, length: 2 }];
        assert!(replay_history(&case, &bad).is_err());
        let bad = [AlignmentOp::Insert {
            position: 5,
            event: Event::new("z"),
        }];
        assert!(replay_history(&case, &bad).is_err());
    }

    #[test]
    fn insertions_follow_log_moves() {
        let case = case_of(&["a", "b", "c"]);
        let history = [
            AlignmentOp::Delete { position: 1, length: 1 },
            AlignmentOp::Insert {
                position: 1,
                event: Event::new("x"),
            },
        ];
        let (_, al) = replay_history(&case, &history).unwrap();
        assert_eq!(
            serde_json::to_string(&al).unwrap(),
            r#"[["a","a"],["b",">>"],[">>","x"],["c","c"]]"#
        );
    }

    #[test]
    fn alignment_pairs_reject_double_gaps() {
        assert!(serde_json::from_str::<Alignment>(r#"[[">>",">>"]]"#).is_err());
        let al: Alignment = serde_json::from_str(r#"[["a",">>"],[">>","b"]]"#).unwrap();
        assert_eq!(al.empty_moves(), 2);
    }

    /// Models with all-zero parameters predict uniformly, so every edit of a
    /// given kind ties.
    #[test]
    fn uniform_models_break_ties_by_empty_moves_then_sequence() {
        let log = EventLog::new(vec![case_of(&["a", "b"]), case_of(&["b"])]);
        let (mut f, mut b) = random_models(&log, 0);
        f.parameters_mut().iter_mut().for_each(|p| *p = 0.0);
        b.parameters_mut().iter_mut().for_each(|p| *p = 0.0);
        let config = SearchConfig {
            beam_width: 5,
            max_iterations: 1,
            ..SearchConfig::default()
        };
        let result = deep_align(&f, &b, &case_of(&["a"]), &config).unwrap();
        let ranked = &result.ranked;
        for w in ranked.windows(2) {
            let (x, y) = (&w[0], &w[1]);
            assert!(x.score >= y.score);
            if x.score == y.score {
                assert!(x.alignment.empty_moves() <= y.alignment.empty_moves());
            }
        }
        // with uniform predictions the unchanged case beats single edits
        // (-2 ln 5 for keeping or deleting versus -3 ln 5 for an insertion)
        assert_eq!(acts(&ranked[0].corrected), ["a"]);
        assert_eq!(ranked[0].alignment.empty_moves(), 0);
        assert_eq!(acts(&ranked[1].corrected), Vec::<&str>::new());
        let inserted: Vec<Vec<&str>> = ranked[2..].iter().map(|r| acts(&r.corrected)).collect();
        assert_eq!(inserted, [vec!["a", "a"], vec!["a", "b"], vec!["b", "a"]]);
    }

    fn single_variant_models() -> (NextEventModel, NextEventModel, Case) {
        let variant = ["a", "b", "c", "d", "e", "f"];
        let log = EventLog::new((0..200).map(|_| case_of(&variant)).collect());
        let (f, b) = random_models(&log, 1);
        let config = TrainConfig {
            epochs: 30,
            batch_size: 10,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let fd: Vec<_> = log.cases.iter().map(|c| f.encode(c).unwrap()).collect();
        let bd: Vec<_> = log.cases.iter().map(|c| b.encode(c).unwrap()).collect();
        let (f, _) = train(f, &fd, &config).unwrap();
        let (b, _) = train(b, &bd, &config).unwrap();
        (f, b, case_of(&variant))
    }

    #[test]
    fn greedy_search_restores_a_deleted_event() {
        let (f, b, variant) = single_variant_models();
        let config = SearchConfig {
            beam_width: 1,
            max_deletion: 1,
            ..SearchConfig::default()
        };
        for skip in 0..variant.events.len() {
            let mut broken = variant.clone();
            broken.events.remove(skip);
            let result = deep_align(&f, &b, &broken, &config).unwrap();
            let best = result.best();
            assert_eq!(best.corrected.activities(), variant.activities());
            assert_eq!(best.alignment.model_moves().count(), 1);
            assert_eq!(best.alignment.empty_moves(), 1);
        }
        let clean = deep_align(&f, &b, &variant, &SearchConfig::default()).unwrap();
        assert!(clean.converged);
        assert_eq!(clean.best().alignment.empty_moves(), 0);
        assert_eq!(clean.iterations, 2);
    }

    #[test]
    fn history_replays_to_the_reported_alignment() {
        let log = attr_log();
        let (f, b) = random_models(&log, 3);
        let config = SearchConfig::default();
        for case in &log.cases {
            let result = deep_align(&f, &b, case, &config).unwrap();
            assert!(result.iterations <= config.max_iterations);
            assert!(result.ranked.len() <= config.beam_width);
            for r in &result.ranked {
                let (c, al) = replay_history(case, &r.history).unwrap();
                assert_eq!(c, r.corrected);
                assert_eq!(al, r.alignment);
                assert_eq!(al.log_projection(), case.activities());
                assert_eq!(al.model_projection(), r.corrected.activities());
            }
        }
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let log = attr_log();
        let (f, b) = random_models(&log, 3);
        assert!(matches!(
            Scorer::new(&b, &f, false),
            Err(AlignError::WrongDirection { .. })
        ));
        let other = EventLog::new(vec![case_of(&["q"])]);
        let (_, b2) = random_models(&other, 3);
        assert!(matches!(Scorer::new(&f, &b2, false), Err(AlignError::SchemaMismatch)));
        let bad = SearchConfig {
            beam_width: 0,
            ..SearchConfig::default()
        };
        assert!(deep_align(&f, &b, &log.cases[0], &bad).is_err());
    }
}
