//! Ground-truth log generation from likelihood graphs and labeled anomaly
//! injection.
//!
//! A [`LikelihoodGraph`] is a transition graph whose nodes carry an activity
//! and per-attribute emission distributions. Outgoing transitions are grouped;
//! each group may be guarded by attribute values (the node's own emitted
//! event attributes or the case attributes) and the first matching group is
//! used. Case-attribute guarded groups live in the [`CaseAttributeRule`] and
//! take precedence over the graph's own groups.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Case, Event, EventLog};

/// Upper bound on the number of events in one random walk.
pub const MAX_WALK_LEN: usize = 100;
const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ProcgenError {
    #[error("graph walk diverged after {0} events")]
    WalkDiverged(usize),
    #[error("inapplicable anomaly {kind} for case of length {len}")]
    Inapplicable { kind: AnomalyKind, len: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("noise ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("graph file: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProcgenError>;

/// A categorical distribution; keys are sampled in sorted order.
pub type Distribution = BTreeMap<String, f64>;

/// Attribute-value conditions; a guard matches when every listed attribute
/// takes one of the allowed values. The empty guard always matches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Guard(pub BTreeMap<String, GuardValues>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GuardValues {
    One(String),
    Many(Vec<String>),
}

impl GuardValues {
    fn contains(&self, value: &str) -> bool {
        match self {
            GuardValues::One(v) => v == value,
            GuardValues::Many(vs) => vs.iter().any(|v| v == value),
        }
    }
}

impl Guard {
    pub fn always() -> Self {
        Self::default()
    }

    pub fn when(name: &str, value: &str) -> Self {
        let mut map = BTreeMap::new();
        map.insert(name.to_string(), GuardValues::One(value.to_string()));
        Self(map)
    }

    pub fn when_any(name: &str, values: &[&str]) -> Self {
        let mut map = BTreeMap::new();
        map.insert(
            name.to_string(),
            GuardValues::Many(values.iter().map(|v| v.to_string()).collect()),
        );
        Self(map)
    }

    pub fn is_always(&self) -> bool {
        self.0.is_empty()
    }

    /// Names are looked up in `event` first and then in `case`.
    fn matches(&self, event: &BTreeMap<String, String>, case: &BTreeMap<String, String>) -> bool {
        self.0.iter().all(|(name, allowed)| {
            event
                .get(name)
                .or_else(|| case.get(name))
                .is_some_and(|v| allowed.contains(v))
        })
    }

    fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub activity: String,
}

/// Emission distribution of one event attribute at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub node: String,
    pub attribute: String,
    #[serde(default, skip_serializing_if = "Guard::is_always")]
    pub when: Guard,
    pub dist: Distribution,
}

/// A guarded group of outgoing transitions of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: String,
    #[serde(default, skip_serializing_if = "Guard::is_always")]
    pub when: Guard,
    pub to: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodGraph {
    /// Event attribute names, in emission order.
    pub event_attributes: Vec<String>,
    pub nodes: Vec<Node>,
    pub emissions: Vec<Emission>,
    pub transitions: Vec<Transition>,
    pub source: String,
    pub sink: String,
}

/// One row of the joint case-attribute distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAttributeRow {
    pub values: BTreeMap<String, String>,
    pub p: f64,
}

/// Joint distribution over case-attribute tuples plus the transition groups
/// they force.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseAttributeRule {
    pub joint: Vec<CaseAttributeRow>,
    pub overrides: Vec<Transition>,
}

impl CaseAttributeRule {
    /// Attribute names in sorted order.
    pub fn attribute_names(&self) -> Vec<String> {
        self.joint
            .first()
            .map(|r| r.values.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Product distribution of independent uniform marginals.
    pub fn uniform(attributes: &[(String, Vec<String>)]) -> Self {
        let mut rows = vec![BTreeMap::new()];
        for (name, values) in attributes {
            rows = rows
                .into_iter()
                .flat_map(|row| {
                    values.iter().map(move |v| {
                        let mut r = row.clone();
                        r.insert(name.clone(), v.clone());
                        r
                    })
                })
                .collect();
        }
        if attributes.is_empty() {
            return Self::default();
        }
        let p = 1.0 / rows.len() as f64;
        Self {
            joint: rows
                .into_iter()
                .map(|values| CaseAttributeRow { values, p })
                .collect(),
            overrides: Vec::new(),
        }
    }
}

/// On-disk graph description: the graph and its case-attribute rule in one
/// JSON document. Transitions whose guards mention case attributes are the
/// rule's overrides.
#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    #[serde(default)]
    event_attributes: Vec<String>,
    nodes: Vec<Node>,
    transitions: Vec<Transition>,
    #[serde(default)]
    emissions: Vec<Emission>,
    source: String,
    sink: String,
    #[serde(default)]
    case_attributes: Vec<CaseAttributeRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

pub fn save_graph(
    graph: &LikelihoodGraph,
    rule: &CaseAttributeRule,
    run_config: Option<&serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let mut transitions = rule.overrides.clone();
    transitions.extend(graph.transitions.iter().cloned());
    let file = GraphFile {
        event_attributes: graph.event_attributes.clone(),
        nodes: graph.nodes.clone(),
        transitions,
        emissions: graph.emissions.clone(),
        source: graph.source.clone(),
        sink: graph.sink.clone(),
        case_attributes: rule.joint.clone(),
        run_config: run_config.cloned(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<(LikelihoodGraph, CaseAttributeRule)> {
    let file: GraphFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let case_names: BTreeSet<String> = file
        .case_attributes
        .first()
        .map(|r| r.values.keys().cloned().collect())
        .unwrap_or_default();
    let (overrides, transitions) = file
        .transitions
        .into_iter()
        .partition(|t| t.when.names().any(|n| case_names.contains(n)));
    let graph = LikelihoodGraph {
        event_attributes: file.event_attributes,
        nodes: file.nodes,
        emissions: file.emissions,
        transitions,
        source: file.source,
        sink: file.sink,
    };
    let rule = CaseAttributeRule {
        joint: file.case_attributes,
        overrides,
    };
    audit(&graph, &rule)?;
    Ok((graph, rule))
}

fn sample_dist<'a, R: Rng + ?Sized>(dist: &'a Distribution, rng: &mut R) -> &'a str {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (key, &p) in dist {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(key.as_str());
        if u < acc {
            return key;
        }
    }
    last.expect("distribution has positive mass")
}

impl LikelihoodGraph {
    fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Every successor reachable through any transition group.
    fn successors<'a>(&'a self, rule: &'a CaseAttributeRule, id: &str) -> BTreeSet<&'a str> {
        rule.overrides
            .iter()
            .chain(&self.transitions)
            .filter(|t| t.from == id)
            .flat_map(|t| t.to.iter().filter(|(_, &p)| p > 0.0).map(|(k, _)| k.as_str()))
            .collect()
    }

    /// The active transition group at `node` given the node's emitted event
    /// attributes and the case attributes.
    fn active_transition<'a>(
        &'a self,
        rule: &'a CaseAttributeRule,
        node: &str,
        event: &BTreeMap<String, String>,
        case: &BTreeMap<String, String>,
    ) -> Option<&'a Transition> {
        rule.overrides
            .iter()
            .chain(&self.transitions)
            .find(|t| t.from == node && t.when.matches(event, case))
    }

    fn emit<R: Rng + ?Sized>(
        &self,
        node: &str,
        case: &BTreeMap<String, String>,
        rng: &mut R,
    ) -> Result<BTreeMap<String, String>> {
        let mut attrs = BTreeMap::new();
        for name in &self.event_attributes {
            let emission = self
                .emissions
                .iter()
                .find(|e| e.node == node && &e.attribute == name && e.when.matches(&attrs, case))
                .ok_or_else(|| {
                    ProcgenError::InvalidGraph(format!("node {node} cannot emit {name}"))
                })?;
            let value = sample_dist(&emission.dist, rng).to_string();
            attrs.insert(name.clone(), value);
        }
        Ok(attrs)
    }

    /// All values each event attribute can take anywhere in the graph.
    pub fn attribute_values(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &self.emissions {
            out.entry(e.attribute.clone())
                .or_default()
                .extend(e.dist.iter().filter(|(_, &p)| p > 0.0).map(|(k, _)| k.clone()));
        }
        out.into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }

    /// Distinct activity names.
    pub fn activities(&self) -> BTreeSet<&str> {
        self.nodes.iter().map(|n| n.activity.as_str()).collect()
    }

    /// True when `case` can be produced by a walk from source to sink that
    /// respects the guards and only uses positive-probability choices.
    pub fn accepts(&self, rule: &CaseAttributeRule, case: &Case) -> bool {
        let Some(first) = case.events.first() else {
            return false;
        };
        let emits = |node: &str, event: &Event| {
            self.node(node).is_some_and(|n| n.activity == event.activity)
                && self.event_attributes.iter().all(|name| {
                    let Some(value) = event.attributes.get(name) else {
                        return false;
                    };
                    self.emissions.iter().any(|e| {
                        e.node == node
                            && &e.attribute == name
                            && e.dist.get(value).is_some_and(|&p| p > 0.0)
                    })
                })
        };
        let mut current: BTreeSet<&str> = BTreeSet::new();
        if emits(&self.source, first) {
            current.insert(&self.source);
        }
        for (prev, event) in case.events.iter().zip(case.events.iter().skip(1)) {
            let mut next = BTreeSet::new();
            for &node in &current {
                if let Some(t) =
                    self.active_transition(rule, node, &prev.attributes, &case.case_attributes)
                {
                    for (succ, &p) in &t.to {
                        if p > 0.0 && emits(succ, event) {
                            next.insert(succ.as_str());
                        }
                    }
                }
            }
            current = next;
        }
        current.contains(self.sink.as_str())
    }
}

/// Checks the structural invariants of a graph and its rule.
pub fn audit(graph: &LikelihoodGraph, rule: &CaseAttributeRule) -> Result<()> {
    let bad = |msg: String| Err(ProcgenError::InvalidGraph(msg));
    let ids: BTreeSet<&str> = graph.nodes.iter().map(|n| n.id.as_str()).collect();
    if ids.len() != graph.nodes.len() {
        return bad("duplicate node ids".into());
    }
    for id in [&graph.source, &graph.sink] {
        if !ids.contains(id.as_str()) {
            return bad(format!("unknown node {id}"));
        }
    }
    let sums_to_one = |d: &Distribution| {
        (d.values().sum::<f64>() - 1.0).abs() <= PROB_TOLERANCE && d.values().all(|&p| p >= 0.0)
    };
    for t in rule.overrides.iter().chain(&graph.transitions) {
        if !ids.contains(t.from.as_str()) || t.to.keys().any(|k| !ids.contains(k.as_str())) {
            return bad(format!("transition from {} references an unknown node", t.from));
        }
        if !sums_to_one(&t.to) {
            return bad(format!("transitions from {} do not sum to 1", t.from));
        }
        if t.from == graph.sink {
            return bad("sink has successors".into());
        }
    }
    for e in &graph.emissions {
        if !sums_to_one(&e.dist) {
            return bad(format!("emission {} at {} does not sum to 1", e.attribute, e.node));
        }
    }
    if !rule.joint.is_empty() {
        let total: f64 = rule.joint.iter().map(|r| r.p).sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return bad("case-attribute distribution does not sum to 1".into());
        }
    }
    for node in &graph.nodes {
        if node.id != graph.sink
            && !graph
                .transitions
                .iter()
                .any(|t| t.from == node.id && t.when.is_always())
        {
            return bad(format!("node {} has no unguarded transition group", node.id));
        }
        for name in &graph.event_attributes {
            if !graph
                .emissions
                .iter()
                .any(|e| e.node == node.id && &e.attribute == name && e.when.is_always())
            {
                return bad(format!("node {} has no unguarded emission for {name}", node.id));
            }
        }
    }

    // reachability from source
    let mut seen = BTreeSet::from([graph.source.as_str()]);
    let mut queue = VecDeque::from([graph.source.as_str()]);
    while let Some(id) = queue.pop_front() {
        for s in graph.successors(rule, id) {
            if seen.insert(s) {
                queue.push_back(s);
            }
        }
    }
    if seen.len() != ids.len() {
        let missing: Vec<_> = ids.difference(&seen).collect();
        return bad(format!("unreachable nodes {missing:?}"));
    }
    // co-reachability to sink
    let mut co = BTreeSet::from([graph.sink.as_str()]);
    loop {
        let before = co.len();
        for &id in &ids {
            if !co.contains(id) && graph.successors(rule, id).iter().any(|s| co.contains(s)) {
                co.insert(id);
            }
        }
        if co.len() == before {
            break;
        }
    }
    if co.len() != ids.len() {
        let missing: Vec<_> = ids.difference(&co).collect();
        return bad(format!("nodes cannot reach the sink {missing:?}"));
    }
    Ok(())
}

fn sample_case_attributes<R: Rng + ?Sized>(
    rule: &CaseAttributeRule,
    rng: &mut R,
) -> BTreeMap<String, String> {
    if rule.joint.is_empty() {
        return BTreeMap::new();
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for row in &rule.joint {
        acc += row.p;
        if u < acc {
            return row.values.clone();
        }
    }
    rule.joint.last().unwrap().values.clone()
}

/// Samples one case by a random walk from source to sink.
pub fn sample_case<R: Rng + ?Sized>(
    graph: &LikelihoodGraph,
    rule: &CaseAttributeRule,
    rng: &mut R,
) -> Result<Case> {
    let case_attributes = sample_case_attributes(rule, rng);
    sample_case_with(graph, rule, case_attributes, rng)
}

/// Like [`sample_case`] but with the case attributes fixed by the caller.
pub fn sample_case_with<R: Rng + ?Sized>(
    graph: &LikelihoodGraph,
    rule: &CaseAttributeRule,
    case_attributes: BTreeMap<String, String>,
    rng: &mut R,
) -> Result<Case> {
    let mut case = Case::new("");
    case.case_attributes = case_attributes;
    let mut node = graph.source.clone();
    loop {
        if case.events.len() >= MAX_WALK_LEN {
            return Err(ProcgenError::WalkDiverged(MAX_WALK_LEN));
        }
        let activity = graph
            .node(&node)
            .ok_or_else(|| ProcgenError::InvalidGraph(format!("unknown node {node}")))?
            .activity
            .clone();
        let attributes = graph.emit(&node, &case.case_attributes, rng)?;
        if node == graph.sink {
            case.events.push(Event {
                activity,
                attributes,
            });
            return Ok(case);
        }
        let next = graph
            .active_transition(rule, &node, &attributes, &case.case_attributes)
            .ok_or_else(|| ProcgenError::InvalidGraph(format!("node {node} is a dead end")))?;
        let next = sample_dist(&next.to, rng).to_string();
        case.events.push(Event {
            activity,
            attributes,
        });
        node = next;
    }
}

/// Samples `n_cases` cases with ids `case-000001`, `case-000002`, ...
pub fn generate_log<R: Rng + ?Sized>(
    graph: &LikelihoodGraph,
    rule: &CaseAttributeRule,
    n_cases: usize,
    rng: &mut R,
) -> Result<EventLog> {
    if n_cases == 0 {
        return Err(ProcgenError::Infeasible("n_cases must be positive".into()));
    }
    let cases = (0..n_cases)
        .map(|i| {
            let mut case = sample_case(graph, rule, rng)?;
            case.id = format!("case-{:06}", i + 1);
            Ok(case)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EventLog::new(cases))
}

// ---------------------------------------------------------------------------
// Anomalies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Skip,
    Insert,
    Rework,
    Early,
    Late,
    Attribute,
}

impl AnomalyKind {
    /// Registered kinds, in label order.
    pub const ALL: [AnomalyKind; 6] = [
        AnomalyKind::Skip,
        AnomalyKind::Insert,
        AnomalyKind::Rework,
        AnomalyKind::Early,
        AnomalyKind::Late,
        AnomalyKind::Attribute,
    ];

    /// Largest number of events one injection touches.
    pub fn max_size(self) -> usize {
        match self {
            AnomalyKind::Skip | AnomalyKind::Insert | AnomalyKind::Early | AnomalyKind::Late => 2,
            AnomalyKind::Rework | AnomalyKind::Attribute => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AnomalyKind::Skip => "skip",
            AnomalyKind::Insert => "insert",
            AnomalyKind::Rework => "rework",
            AnomalyKind::Early => "early",
            AnomalyKind::Late => "late",
            AnomalyKind::Attribute => "attribute",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == label)
    }

    /// Largest size applicable to a case of `len` events, if any.
    fn max_applicable(self, len: usize, ctx: &AnomalyContext) -> Option<usize> {
        let cap = self.max_size();
        let m = match self {
            AnomalyKind::Skip | AnomalyKind::Early | AnomalyKind::Late => len.saturating_sub(1),
            AnomalyKind::Insert => cap,
            AnomalyKind::Rework => len,
            AnomalyKind::Attribute => {
                if ctx.attribute_values.values().any(|v| v.len() >= 2) {
                    len
                } else {
                    0
                }
            }
        };
        (m >= 1).then_some(m.min(cap))
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Value pools used when an anomaly needs fresh values.
#[derive(Debug, Clone, Default)]
pub struct AnomalyContext {
    /// Every value of every event attribute.
    pub attribute_values: BTreeMap<String, Vec<String>>,
    /// Inserted activities are named `Random activity k` for k in 1..=pool.
    pub random_activity_pool: usize,
}

impl AnomalyContext {
    pub fn for_graph(graph: &LikelihoodGraph) -> Self {
        Self {
            attribute_values: graph.attribute_values(),
            random_activity_pool: graph.activities().len().max(1),
        }
    }
}

/// Applies one anomaly of the given kind; returns the mutated case and its
/// label.
pub fn inject_anomaly<R: Rng + ?Sized>(
    case: &Case,
    kind: AnomalyKind,
    ctx: &AnomalyContext,
    rng: &mut R,
) -> Result<(Case, String)> {
    let len = case.events.len();
    let max = kind
        .max_applicable(len, ctx)
        .ok_or(ProcgenError::Inapplicable { kind, len })?;
    let size = rng.gen_range(1..=max);
    let mut out = case.clone();
    let events = &mut out.events;
    match kind {
        AnomalyKind::Skip => {
            let start = rng.gen_range(0..=len - size);
            events.drain(start..start + size);
        }
        AnomalyKind::Insert => {
            for _ in 0..size {
                let k = rng.gen_range(1..=ctx.random_activity_pool.max(1));
                let mut event = Event::new(format!("Random activity {k}"));
                for (name, values) in &ctx.attribute_values {
                    let value = values.choose(rng).cloned().unwrap_or_default();
                    event.attributes.insert(name.clone(), value);
                }
                let at = rng.gen_range(0..=events.len());
                events.insert(at, event);
            }
        }
        AnomalyKind::Rework => {
            let start = rng.gen_range(0..=len - size);
            let copy: Vec<Event> = events[start..start + size].to_vec();
            let end = start + size;
            events.splice(end..end, copy);
        }
        AnomalyKind::Early => {
            // a run starting at `start` moves to an earlier position `to`
            let start = rng.gen_range(1..=len - size);
            let to = rng.gen_range(0..start);
            let run: Vec<Event> = events.drain(start..start + size).collect();
            events.splice(to..to, run);
        }
        AnomalyKind::Late => {
            let start = rng.gen_range(0..len - size);
            let run: Vec<Event> = events.drain(start..start + size).collect();
            let to = rng.gen_range(start + 1..=events.len());
            events.splice(to..to, run);
        }
        AnomalyKind::Attribute => {
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(rng);
            let names: Vec<&String> = ctx
                .attribute_values
                .iter()
                .filter(|(_, v)| v.len() >= 2)
                .map(|(k, _)| k)
                .collect();
            for &pos in positions.iter().take(size) {
                let name = *names.choose(rng).expect("checked applicable");
                let current = events[pos].attributes.get(name).cloned().unwrap_or_default();
                let choices: Vec<&String> = ctx.attribute_values[name]
                    .iter()
                    .filter(|v| **v != current)
                    .collect();
                let value = (*choices.choose(rng).expect("two or more values")).clone();
                events[pos].attributes.insert(name.clone(), value);
            }
        }
    }
    Ok((out, kind.label().to_string()))
}

/// Mutates exactly `round(ratio * |log|)` cases. Returns the noisy log
/// (unlabeled) and the ground truth: the original cases labeled `normal` or
/// with the anomaly kind applied.
pub fn apply_noise<R: Rng + ?Sized>(
    log: &EventLog,
    ratio: f64,
    ctx: &AnomalyContext,
    rng: &mut R,
) -> Result<(EventLog, EventLog)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ProcgenError::BadRatio(ratio));
    }
    let n = log.cases.len();
    let n_anomalous = (ratio * n as f64).round() as usize;
    let mut chosen = rand::seq::index::sample(rng, n, n_anomalous).into_vec();
    chosen.sort_unstable();
    let mut chosen = chosen.into_iter().peekable();

    let mut noisy = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (i, case) in log.cases.iter().enumerate() {
        let mut original = case.clone();
        original.label = Some("normal".into());
        let mut mutated = case.clone();
        mutated.label = None;
        if chosen.peek() == Some(&i) {
            chosen.next();
            let mut kinds = AnomalyKind::ALL.to_vec();
            loop {
                if kinds.is_empty() {
                    return Err(ProcgenError::Inapplicable {
                        kind: AnomalyKind::Skip,
                        len: case.events.len(),
                    });
                }
                let k = rng.gen_range(0..kinds.len());
                match inject_anomaly(&mutated, kinds[k], ctx, rng) {
                    Ok((m, label)) => {
                        mutated = m;
                        original.label = Some(label);
                        break;
                    }
                    Err(ProcgenError::Inapplicable { .. }) => {
                        kinds.remove(k);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        noisy.push(mutated);
        truth.push(original);
    }
    Ok((EventLog::new(noisy), EventLog::new(truth)))
}

// ---------------------------------------------------------------------------
// Built-in graphs
// ---------------------------------------------------------------------------

struct GraphBuilder {
    graph: LikelihoodGraph,
    rule: CaseAttributeRule,
}

impl GraphBuilder {
    fn new(event_attributes: &[&str], source: &str, sink: &str) -> Self {
        Self {
            graph: LikelihoodGraph {
                event_attributes: event_attributes.iter().map(|s| s.to_string()).collect(),
                nodes: Vec::new(),
                emissions: Vec::new(),
                transitions: Vec::new(),
                source: source.into(),
                sink: sink.into(),
            },
            rule: CaseAttributeRule::default(),
        }
    }

    fn node(&mut self, id: &str, activity: &str) {
        self.graph.nodes.push(Node {
            id: id.into(),
            activity: activity.into(),
        });
    }

    fn emit_uniform(&mut self, node: &str, attribute: &str, values: &[&str]) {
        let p = 1.0 / values.len() as f64;
        self.graph.emissions.push(Emission {
            node: node.into(),
            attribute: attribute.into(),
            when: Guard::always(),
            dist: values.iter().map(|v| (v.to_string(), p)).collect(),
        });
    }

    fn go(&mut self, from: &str, when: Guard, to: &[(&str, f64)]) {
        self.graph.transitions.push(Transition {
            from: from.into(),
            when,
            to: to.iter().map(|(k, p)| (k.to_string(), *p)).collect(),
        });
    }

    fn force(&mut self, from: &str, when: Guard, to: &str) {
        self.rule.overrides.push(Transition {
            from: from.into(),
            when,
            to: [(to.to_string(), 1.0)].into_iter().collect(),
        });
    }
}

/// The paper-submission process: authors write, reviewers review; `Topic`
/// decides between the hypothesis and the method branch, `Decision` decides
/// whether a minor revision happens, and the submitting author decides which
/// reviewer pool handles the review.
pub fn paper_process() -> (LikelihoodGraph, CaseAttributeRule) {
    const AUTHORS: [&str; 3] = ["Alice", "Bob", "Carol"];
    let mut b = GraphBuilder::new(&["User"], "identify_problem", "final_decision");
    let authored = [
        ("identify_problem", "Identify Problem"),
        ("research_related_work", "Research Related Work"),
        ("develop_hypothesis", "Develop Hypothesis"),
        ("develop_method", "Develop Method"),
        ("experiment_hypothesis", "Experiment"),
        ("experiment_method", "Experiment"),
        ("conduct_study", "Conduct Study"),
        ("evaluate", "Evaluate"),
        ("conclude", "Conclude"),
        ("submit", "Submit"),
        ("minor_revision", "Minor Revision"),
    ];
    for (id, activity) in authored {
        b.node(id, activity);
        b.emit_uniform(id, "User", &AUTHORS);
    }
    b.node("review_internal", "Review");
    b.emit_uniform("review_internal", "User", &["Dave", "Erin"]);
    b.node("review_external", "Review");
    b.emit_uniform("review_external", "User", &["Grace", "Heidi"]);
    b.node("final_decision", "Final Decision");
    b.emit_uniform("final_decision", "User", &["Ivan"]);

    let always = Guard::always;
    b.go("identify_problem", always(), &[("research_related_work", 1.0)]);
    b.go(
        "research_related_work",
        always(),
        &[("develop_hypothesis", 0.5), ("develop_method", 0.5)],
    );
    b.go("develop_hypothesis", always(), &[("experiment_hypothesis", 1.0)]);
    b.go("develop_method", always(), &[("experiment_method", 1.0)]);
    // the two Experiment nodes carry the long-term dependencies
    // Develop Hypothesis -> Conduct Study and Develop Method -> Evaluate
    b.go("experiment_hypothesis", always(), &[("conduct_study", 1.0)]);
    b.go("experiment_method", always(), &[("evaluate", 1.0)]);
    b.go("conduct_study", always(), &[("conclude", 1.0)]);
    b.go("evaluate", always(), &[("conclude", 1.0)]);
    b.go("conclude", always(), &[("submit", 1.0)]);
    b.go("submit", Guard::when("User", "Alice"), &[("review_internal", 1.0)]);
    b.go("submit", always(), &[("review_external", 1.0)]);
    for review in ["review_internal", "review_external"] {
        b.go(
            review,
            always(),
            &[("final_decision", 0.6), ("minor_revision", 0.4)],
        );
    }
    b.go("minor_revision", always(), &[("final_decision", 1.0)]);

    b.force("research_related_work", Guard::when("Topic", "Theory"), "develop_hypothesis");
    b.force("research_related_work", Guard::when("Topic", "Engineering"), "develop_method");
    for review in ["review_internal", "review_external"] {
        b.force(review, Guard::when_any("Decision", &["Accept", "Weak Accept"]), "minor_revision");
        b.force(
            review,
            Guard::when_any("Decision", &["Borderline", "Weak Reject", "Reject"]),
            "final_decision",
        );
    }
    let overrides = std::mem::take(&mut b.rule.overrides);
    b.rule = CaseAttributeRule::uniform(&[
        ("Topic".into(), vec!["Engineering".into(), "Theory".into()]),
        (
            "Decision".into(),
            ["Accept", "Weak Accept", "Borderline", "Weak Reject", "Reject"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        ),
    ]);
    b.rule.overrides = overrides;
    (b.graph, b.rule)
}

/// Shape parameters of [`random_likelihood_graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomGraphParams {
    /// Distinct activities, source and sink included.
    pub n_activities: usize,
    /// Maximum number of alternative branches in one block.
    pub breadth: usize,
    /// Number of sequential blocks between source and sink.
    pub depth: usize,
    pub n_event_attributes: usize,
    pub n_case_attributes: usize,
}

impl Default for RandomGraphParams {
    fn default() -> Self {
        Self {
            n_activities: 14,
            breadth: 3,
            depth: 5,
            n_event_attributes: 2,
            n_case_attributes: 2,
        }
    }
}

fn activity_name(i: usize) -> String {
    let mut name = String::new();
    let mut i = i + 1;
    while i > 0 {
        let r = (i - 1) % 26;
        name.insert(0, (b'A' + r as u8) as char);
        i = (i - 1) / 26;
    }
    format!("Activity {name}")
}

enum Guarding {
    Uniform,
    CaseAttribute(usize),
    EventAttribute,
}

/// Generates a layered graph: a source, `depth` blocks and a sink. Each
/// block is a choice between up to `breadth` chains of activities; a block
/// of two single activities may instead run them in either order. With case
/// attributes, the first case attribute decides two separate blocks, which
/// ties their choices together across the case; further case attributes
/// decide one block each. Remaining blocks may follow the first event
/// attribute of the preceding node. Further case attributes prefer
/// single-chain blocks and make them optional: the first value skips the
/// chain, so whether its activities happen at all depends on the case.
/// Event-attribute values are split into disjoint pools, and every node of a
/// block emits uniformly from the block's pool.
pub fn random_likelihood_graph<R: Rng + ?Sized>(
    params: RandomGraphParams,
    rng: &mut R,
) -> Result<(LikelihoodGraph, CaseAttributeRule)> {
    let RandomGraphParams {
        n_activities,
        breadth,
        depth,
        n_event_attributes,
        n_case_attributes,
    } = params;
    if n_activities < 3 {
        return Err(ProcgenError::Infeasible("need at least 3 activities".into()));
    }
    if depth == 0 || breadth == 0 {
        return Err(ProcgenError::Infeasible("depth and breadth must be positive".into()));
    }
    let interior = n_activities - 2;
    if interior < depth {
        return Err(ProcgenError::Infeasible(format!(
            "{interior} interior activities cannot fill {depth} blocks"
        )));
    }
    if n_case_attributes >= 1 && (depth < 2 || breadth < 2 || interior < depth + 2) {
        return Err(ProcgenError::Infeasible(
            "case-attribute dependencies need two blocks with at least two branches".into(),
        ));
    }

    // branch counts per block
    let mut branches: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=breadth)).collect();
    if n_case_attributes >= 1 {
        let mut picks: Vec<usize> = (0..depth).collect();
        picks.shuffle(rng);
        for &i in picks.iter().take(2) {
            branches[i] = branches[i].max(2);
        }
    }
    while branches.iter().sum::<usize>() > interior {
        let i = branches
            .iter()
            .enumerate()
            .filter(|(_, &b)| b > 1)
            .map(|(i, _)| i)
            .max_by_key(|&i| branches[i])
            .expect("interior >= depth");
        branches[i] -= 1;
    }
    // activities per branch, each at least one
    let mut lengths: Vec<Vec<usize>> = branches.iter().map(|&b| vec![1; b]).collect();
    let mut spare = interior - branches.iter().sum::<usize>();
    while spare > 0 {
        let bi = rng.gen_range(0..depth);
        let ri = rng.gen_range(0..lengths[bi].len());
        lengths[bi][ri] += 1;
        spare -= 1;
    }

    // guarding per block; the first case attribute goes to two choice blocks
    let mut guarding: Vec<Guarding> = (0..depth).map(|_| Guarding::Uniform).collect();
    let mut choice_blocks: Vec<usize> = (0..depth).filter(|&i| branches[i] >= 2).collect();
    choice_blocks.shuffle(rng);
    if n_case_attributes >= 1 {
        for &i in choice_blocks.iter().take(2) {
            guarding[i] = Guarding::CaseAttribute(0);
        }
    }
    let mut order: Vec<usize> = (0..depth)
        .filter(|&i| matches!(guarding[i], Guarding::Uniform))
        .collect();
    order.shuffle(rng);
    // further case attributes prefer single-chain blocks, which they make
    // optional
    order.sort_by_key(|&i| branches[i] > 1);
    let mut order = order.into_iter();
    for a in 1..n_case_attributes {
        if let Some(i) = order.next() {
            guarding[i] = Guarding::CaseAttribute(a);
        }
    }
    let order: Vec<usize> = {
        let mut rest: Vec<usize> = order.collect();
        rest.sort_unstable();
        rest
    };
    if n_event_attributes >= 1 {
        for i in order {
            if rng.gen_bool(0.5) {
                guarding[i] = Guarding::EventAttribute;
            }
        }
    }
    let max_branches = branches.iter().copied().max().unwrap_or(1);
    let case_attrs: Vec<(String, Vec<String>)> = (0..n_case_attributes)
        .map(|a| {
            let n_values = max_branches.max(2) + rng.gen_range(0..=1);
            let name = format!("Case Attribute {}", a + 1);
            let values = (0..n_values).map(|v| format!("c{}v{}", a + 1, v + 1)).collect();
            (name, values)
        })
        .collect();
    // the skip takes the first of at least two values, so it is never more
    // likely than the chain
    let optional: Vec<bool> = (0..depth)
        .map(|i| matches!(guarding[i], Guarding::CaseAttribute(a) if a >= 1) && branches[i] == 1)
        .collect();
    let parallel: Vec<bool> = (0..depth)
        .map(|i| {
            matches!(guarding[i], Guarding::Uniform)
                && lengths[i] == [1, 1]
                && rng.gen_bool(0.5)
        })
        .collect();

    let event_attrs: Vec<(String, Vec<String>)> = (0..n_event_attributes)
        .map(|a| {
            let name = format!("Attribute {}", a + 1);
            let values = (0..6).map(|v| format!("a{}v{}", a + 1, v + 1)).collect();
            (name, values)
        })
        .collect();
    let names: Vec<&str> = event_attrs.iter().map(|(n, _)| n.as_str()).collect();
    // Each attribute's values split into disjoint equal-size pools (roles);
    // all nodes of a block emit uniformly from one pool. Alternatives with
    // unequal or overlapping emissions would make a branch look more likely
    // than its siblings through its attributes alone.
    let pools: Vec<Vec<Vec<String>>> = event_attrs
        .iter()
        .map(|(_, values)| {
            let k = rng.gen_range(2..=3);
            let mut shuffled = values.clone();
            shuffled.shuffle(rng);
            shuffled
                .chunks(k)
                .map(|c| {
                    let mut pool = c.to_vec();
                    pool.sort_unstable();
                    pool
                })
                .collect()
        })
        .collect();
    let draw_roles = |rng: &mut R| -> Vec<usize> { pools.iter().map(|p| rng.gen_range(0..p.len())).collect() };

    let mut b = GraphBuilder::new(&names, "n0", "n_end");
    let mut next_activity = 0usize;
    let mut fresh_activity = || {
        let a = activity_name(next_activity);
        next_activity += 1;
        a
    };
    let mut node_count = 0usize;
    let mut emissions: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    let add_node = |b: &mut GraphBuilder,
                    emissions: &mut Vec<(String, Vec<Vec<String>>)>,
                    id: String,
                    activity: &str,
                    roles: &[usize]| {
        b.node(&id, activity);
        let mut per_attr = Vec::new();
        for (((name, _), attr_pools), &role) in event_attrs.iter().zip(&pools).zip(roles) {
            let pool: Vec<&str> = attr_pools[role].iter().map(String::as_str).collect();
            b.emit_uniform(&id, name, &pool);
            per_attr.push(attr_pools[role].clone());
        }
        emissions.push((id, per_attr));
    };

    let source_activity = fresh_activity();
    add_node(&mut b, &mut emissions, "n0".into(), &source_activity, &draw_roles(rng));
    let mut exits: Vec<String> = vec!["n0".into()];
    for block in 0..depth {
        let roles = draw_roles(rng);
        // chains of node ids for each alternative
        let mut chains: Vec<Vec<String>> = Vec::new();
        if parallel[block] {
            let (x, y) = (fresh_activity(), fresh_activity());
            let ids: Vec<String> = (0..4)
                .map(|_| {
                    node_count += 1;
                    format!("n{node_count}")
                })
                .collect();
            add_node(&mut b, &mut emissions, ids[0].clone(), &x, &roles);
            add_node(&mut b, &mut emissions, ids[1].clone(), &y, &roles);
            add_node(&mut b, &mut emissions, ids[2].clone(), &y, &roles);
            add_node(&mut b, &mut emissions, ids[3].clone(), &x, &roles);
            chains.push(vec![ids[0].clone(), ids[1].clone()]);
            chains.push(vec![ids[2].clone(), ids[3].clone()]);
        } else {
            for &len in &lengths[block] {
                let chain: Vec<String> = (0..len)
                    .map(|_| {
                        node_count += 1;
                        let id = format!("n{node_count}");
                        let activity = fresh_activity();
                        add_node(&mut b, &mut emissions, id.clone(), &activity, &roles);
                        id
                    })
                    .collect();
                chains.push(chain);
            }
        }
        let entries: Vec<String> = chains.iter().map(|c| c[0].clone()).collect();
        let p = 1.0 / entries.len() as f64;
        let uniform: Vec<(&str, f64)> = entries.iter().map(|e| (e.as_str(), p)).collect();
        // the alternative for guarding value v; None skips the block, which
        // leaves the exit to the next block's groups
        let alternative = |v: usize| -> Option<&str> {
            if optional[block] {
                (v > 0).then(|| entries[(v - 1) % entries.len()].as_str())
            } else {
                Some(entries[v % entries.len()].as_str())
            }
        };
        for exit in &exits {
            match guarding[block] {
                Guarding::CaseAttribute(a) => {
                    let (name, values) = &case_attrs[a];
                    for (v, value) in values.iter().enumerate() {
                        if let Some(entry) = alternative(v) {
                            b.force(exit, Guard::when(name, value), entry);
                        }
                    }
                }
                Guarding::EventAttribute => {
                    let (_, per_attr) = emissions
                        .iter()
                        .find(|(id, _)| id == exit)
                        .expect("exit node exists");
                    for (v, value) in per_attr[0].iter().enumerate() {
                        if let Some(entry) = alternative(v) {
                            b.go(exit, Guard::when(names[0], value), &[(entry, 1.0)]);
                        }
                    }
                }
                Guarding::Uniform => {}
            }
            if !optional[block] {
                b.go(exit, Guard::always(), &uniform);
            }
        }
        for chain in &chains {
            for w in chain.windows(2) {
                b.go(&w[0], Guard::always(), &[(w[1].as_str(), 1.0)]);
            }
        }
        let mut next: Vec<String> = chains.iter().map(|c| c.last().unwrap().clone()).collect();
        if optional[block] {
            next.extend(exits);
        }
        exits = next;
    }
    let sink_activity = fresh_activity();
    add_node(&mut b, &mut emissions, "n_end".into(), &sink_activity, &draw_roles(rng));
    for exit in &exits {
        b.go(exit, Guard::always(), &[("n_end", 1.0)]);
    }

    let overrides = std::mem::take(&mut b.rule.overrides);
    b.rule = CaseAttributeRule::uniform(&case_attrs);
    b.rule.overrides = overrides;
    audit(&b.graph, &b.rule)?;
    Ok((b.graph, b.rule))
}
