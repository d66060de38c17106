//! Event-log data model, categorical vocabularies and the line-oriented
//! JSON log format.
//!
//! Every categorical value is mapped to an integer id. Ids 0, 1 and 2 are
//! reserved for padding, begin-of-case and end-of-case; real values follow
//! in lexicographic order so that the same log always yields the same ids.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Number of reserved ids in front of the real values of every vocabulary.
pub const RESERVED: u32 = 3;

const RESERVED_NAMES: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown value {value:?} for attribute {attribute:?}")]
    OutOfVocabulary { attribute: String, value: String },
    #[error("unknown id {id} for attribute {attribute:?} (vocabulary size {size})")]
    UnknownId { attribute: String, id: u32, size: usize },
    #[error("case {case:?}: {message}")]
    InconsistentAttributes { case: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Reading direction of a sequence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// An ordered set of categorical values with the reserved symbols in front.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from arbitrary values; duplicates are dropped and
    /// the rest sorted.
    pub fn from_values<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = values.into_iter().map(Into::into).collect();
        let values: Vec<String> = sorted.into_iter().collect();
        let index = values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32 + RESERVED))
            .collect();
        Self { values, index }
    }

    /// Total number of ids, reserved symbols included.
    pub fn len(&self) -> usize {
        self.values.len() + RESERVED as usize
    }

    /// True when there are no real values.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, value: &str) -> Option<u32> {
        self.index.get(value).copied()
    }

    /// The string behind an id; reserved ids map to `<pad>`, `<bos>`, `<eos>`.
    pub fn value(&self, id: u32) -> Option<&str> {
        if id < RESERVED {
            Some(RESERVED_NAMES[id as usize])
        } else {
            self.values.get((id - RESERVED) as usize).map(String::as_str)
        }
    }

    /// Real values in id order.
    pub fn values(&self) -> &[String] {
        &self.values
    }

    /// Ids of the real values.
    pub fn real_ids(&self) -> std::ops::Range<u32> {
        RESERVED..self.len() as u32
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<String>::deserialize(d)?;
        let vocab = Vocabulary::from_values(values.iter().cloned());
        if vocab.values != values {
            return Err(serde::de::Error::custom(
                "vocabulary values must be sorted and distinct",
            ));
        }
        Ok(vocab)
    }
}

/// A named categorical attribute and its vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub vocabulary: Vocabulary,
}

/// Vocabularies for the activity, every event attribute and every case
/// attribute of a log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub activities: Vocabulary,
    pub event_attributes: Vec<Attribute>,
    pub case_attributes: Vec<Attribute>,
}

/// One encoded event (or a framing symbol): activity id followed by one id
/// per event attribute.
pub type Step = Vec<u32>;

/// A case mapped to integer ids and framed with BOS/EOS steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCase {
    pub case_attr_ids: Vec<u32>,
    pub steps: Vec<Step>,
}

impl EncodedCase {
    /// The events between the framing steps.
    pub fn interior(&self) -> &[Step] {
        &self.steps[1..self.steps.len() - 1]
    }
}

impl AttributeSchema {
    /// Derives the schema from the values present in a log.
    pub fn build(log: &EventLog) -> Result<Self> {
        let first = log.cases.first().ok_or(CorpusError::EmptyCorpus)?;
        let case_names: Vec<String> = first.case_attributes.keys().cloned().collect();
        let event_names: Option<Vec<String>> = log
            .cases
            .iter()
            .flat_map(|c| c.events.first())
            .map(|e| e.attributes.keys().cloned().collect())
            .next();
        let event_names = event_names.unwrap_or_default();

        let mut activities = BTreeSet::new();
        let mut event_values: Vec<BTreeSet<String>> = vec![BTreeSet::new(); event_names.len()];
        let mut case_values: Vec<BTreeSet<String>> = vec![BTreeSet::new(); case_names.len()];

        for case in &log.cases {
            if !case.case_attributes.keys().eq(case_names.iter()) {
                return Err(CorpusError::InconsistentAttributes {
                    case: case.id.clone(),
                    message: format!("case attributes differ from {case_names:?}"),
                });
            }
            for (slot, value) in case_values.iter_mut().zip(case.case_attributes.values()) {
                slot.insert(value.clone());
            }
            for event in &case.events {
                if !event.attributes.keys().eq(event_names.iter()) {
                    return Err(CorpusError::InconsistentAttributes {
                        case: case.id.clone(),
                        message: format!("event attributes differ from {event_names:?}"),
                    });
                }
                activities.insert(event.activity.clone());
                for (slot, value) in event_values.iter_mut().zip(event.attributes.values()) {
                    slot.insert(value.clone());
                }
            }
        }

        let zip_attrs = |names: Vec<String>, values: Vec<BTreeSet<String>>| {
            names
                .into_iter()
                .zip(values)
                .map(|(name, vals)| Attribute {
                    name,
                    vocabulary: Vocabulary::from_values(vals),
                })
                .collect()
        };
        Ok(Self {
            activities: Vocabulary::from_values(activities),
            event_attributes: zip_attrs(event_names, event_values),
            case_attributes: zip_attrs(case_names, case_values),
        })
    }

    /// A copy restricted to the activity plus, optionally, the event and
    /// case attributes.
    pub fn project(&self, keep_event_attributes: bool, keep_case_attributes: bool) -> Self {
        Self {
            activities: self.activities.clone(),
            event_attributes: if keep_event_attributes {
                self.event_attributes.clone()
            } else {
                Vec::new()
            },
            case_attributes: if keep_case_attributes {
                self.case_attributes.clone()
            } else {
                Vec::new()
            },
        }
    }

    /// Number of ids per event step: activity plus event attributes.
    pub fn step_width(&self) -> usize {
        1 + self.event_attributes.len()
    }

    /// Vocabulary of the k-th position of a step (0 is the activity).
    pub fn step_vocabulary(&self, k: usize) -> &Vocabulary {
        if k == 0 {
            &self.activities
        } else {
            &self.event_attributes[k - 1].vocabulary
        }
    }

    fn step_name(&self, k: usize) -> &str {
        if k == 0 {
            "activity"
        } else {
            &self.event_attributes[k - 1].name
        }
    }

    /// SHA-256 over the canonical JSON form of the schema.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("schema serializes");
        Sha256::digest(&json).into()
    }

    /// Ids of the case attributes of `case`, in schema order.
    pub fn encode_case_attributes(&self, attrs: &BTreeMap<String, String>) -> Result<Vec<u32>> {
        self.case_attributes
            .iter()
            .map(|attr| {
                let value = attrs.get(&attr.name).ok_or_else(|| CorpusError::OutOfVocabulary {
                    attribute: attr.name.clone(),
                    value: "<missing>".into(),
                })?;
                attr.vocabulary
                    .id(value)
                    .ok_or_else(|| CorpusError::OutOfVocabulary {
                        attribute: attr.name.clone(),
                        value: value.clone(),
                    })
            })
            .collect()
    }

    pub fn encode_event(&self, event: &Event) -> Result<Step> {
        let mut step = Vec::with_capacity(self.step_width());
        step.push(self.activities.id(&event.activity).ok_or_else(|| {
            CorpusError::OutOfVocabulary {
                attribute: "activity".into(),
                value: event.activity.clone(),
            }
        })?);
        for attr in &self.event_attributes {
            let value = event.attributes.get(&attr.name).ok_or_else(|| {
                CorpusError::OutOfVocabulary {
                    attribute: attr.name.clone(),
                    value: "<missing>".into(),
                }
            })?;
            step.push(attr.vocabulary.id(value).ok_or_else(|| {
                CorpusError::OutOfVocabulary {
                    attribute: attr.name.clone(),
                    value: value.clone(),
                }
            })?);
        }
        Ok(step)
    }

    /// Maps a step back to an event.
    pub fn decode_event(&self, step: &[u32]) -> Result<Event> {
        let mut values = Vec::with_capacity(step.len());
        for (k, &id) in step.iter().enumerate() {
            let vocab = self.step_vocabulary(k);
            let value = vocab
                .value(id)
                .filter(|_| id >= RESERVED)
                .ok_or_else(|| CorpusError::UnknownId {
                    attribute: self.step_name(k).to_string(),
                    id,
                    size: vocab.len(),
                })?;
            values.push(value.to_string());
        }
        let mut values = values.into_iter();
        let activity = values.next().unwrap_or_default();
        let attributes = self
            .event_attributes
            .iter()
            .map(|a| a.name.clone())
            .zip(values)
            .collect();
        Ok(Event {
            activity,
            attributes,
        })
    }

    /// Encodes a case in the given reading direction. Backward reverses the
    /// events before framing; case attributes are unaffected.
    pub fn encode_case(&self, case: &Case, direction: Direction) -> Result<EncodedCase> {
        let width = self.step_width();
        let mut steps = Vec::with_capacity(case.events.len() + 2);
        steps.push(vec![BOS; width]);
        let mut events = case
            .events
            .iter()
            .map(|e| self.encode_event(e))
            .collect::<Result<Vec<_>>>()?;
        if direction == Direction::Backward {
            events.reverse();
        }
        steps.extend(events);
        steps.push(vec![EOS; width]);
        Ok(EncodedCase {
            case_attr_ids: self.encode_case_attributes(&case.case_attributes)?,
            steps,
        })
    }

    /// Decodes activity ids, dropping the reserved symbols.
    pub fn decode_sequence(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .filter(|&&id| id >= RESERVED)
            .map(|&id| {
                self.activities
                    .value(id)
                    .map(str::to_string)
                    .ok_or_else(|| CorpusError::UnknownId {
                        attribute: "activity".into(),
                        id,
                        size: self.activities.len(),
                    })
            })
            .collect()
    }
}

/// A single executed process step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub activity: String,
    #[serde(rename = "attrs", default)]
    pub attributes: BTreeMap<String, String>,
}

impl Event {
    pub fn new(activity: impl Into<String>) -> Self {
        Self {
            activity: activity.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), value.into());
        self
    }
}

/// One process instance. `label` is only present in ground-truth files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    #[serde(rename = "case_attrs", default)]
    pub case_attributes: BTreeMap<String, String>,
    pub events: Vec<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Case {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            case_attributes: BTreeMap::new(),
            events: Vec::new(),
            label: None,
        }
    }

    pub fn activities(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.activity.as_str()).collect()
    }
}

/// An ordered collection of cases, optionally tagged with the run
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub cases: Vec<Case>,
    pub run_config: Option<serde_json::Value>,
}

impl EventLog {
    pub fn new(cases: Vec<Case>) -> Self {
        Self {
            cases,
            run_config: None,
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Length of the longest case in events.
    pub fn max_case_len(&self) -> usize {
        self.cases.iter().map(|c| c.events.len()).max().unwrap_or(0)
    }
}

#[derive(Serialize)]
struct Header<'a> {
    run_config: &'a serde_json::Value,
}

/// Parses one line of a JSON-lines file. An object whose only key is
/// `run_config` is a header and yields `Ok(None)`.
fn parse_line<T: serde::de::DeserializeOwned>(
    text: &str,
    line: usize,
    header: &mut Option<serde_json::Value>,
) -> Result<Option<T>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        line,
        message: e.to_string(),
    })?;
    if let Some(obj) = value.as_object() {
        if obj.len() == 1 && obj.contains_key("run_config") {
            if line != 1 {
                return Err(CorpusError::Parse {
                    line,
                    message: "run_config header must be the first line".into(),
                });
            }
            *header = obj.get("run_config").cloned();
            return Ok(None);
        }
    }
    serde_json::from_value(value)
        .map(Some)
        .map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })
}

/// Reads a JSON-lines file of records with an optional `run_config` header.
pub fn read_records<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, Option<serde_json::Value>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(record) = parse_line(&line, i + 1, &mut header)? {
            records.push(record);
        }
    }
    Ok((records, header))
}

/// Writes records one JSON object per line, preceded by the header when given.
pub fn write_records<T: Serialize>(
    path: &Path,
    records: &[T],
    run_config: Option<&serde_json::Value>,
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    if let Some(config) = run_config {
        serde_json::to_writer(&mut out, &Header { run_config: config })
            .map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<EventLog> {
    let (cases, run_config) = read_records(path)?;
    Ok(EventLog { cases, run_config })
}

pub fn write_log(log: &EventLog, path: &Path) -> Result<()> {
    write_records(path, &log.cases, log.run_config.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: &str, acts: &[&str]) -> Case {
        let mut c = Case::new(id);
        c.events = acts.iter().map(|a| Event::new(*a)).collect();
        c
    }

    #[test]
    fn activity_vocabulary_is_sorted_after_reserved() {
        let log = EventLog::new(vec![case("1", &["b", "a"])]);
        let schema = AttributeSchema::build(&log).unwrap();
        let names: Vec<_> = (0..schema.activities.len() as u32)
            .map(|i| schema.activities.value(i).unwrap())
            .collect();
        assert_eq!(names, ["<pad>", "<bos>", "<eos>", "a", "b"]);
    }

    #[test]
    fn empty_log_is_rejected() {
        let err = AttributeSchema::build(&EventLog::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn case_attributes_get_their_own_vocabularies() {
        let mut a = case("1", &["x"]);
        a.case_attributes.insert("Topic".into(), "Theory".into());
        a.case_attributes.insert("Decision".into(), "Accept".into());
        let mut b = case("2", &["x"]);
        b.case_attributes.insert("Topic".into(), "Engineering".into());
        b.case_attributes.insert("Decision".into(), "Reject".into());
        let log = EventLog::new(vec![a, b]);
        let schema = AttributeSchema::build(&log).unwrap();
        assert_eq!(schema.case_attributes.len(), 2);
        assert_eq!(schema.case_attributes[0].name, "Decision");
        assert_eq!(schema.case_attributes[1].vocabulary.values(), ["Engineering", "Theory"]);
        assert_eq!(AttributeSchema::build(&log).unwrap(), schema);
    }

    #[test]
    fn encode_both_directions() {
        let log = EventLog::new(vec![case("1", &["a", "b", "c"])]);
        let schema = AttributeSchema::build(&log).unwrap();
        let fwd = schema.encode_case(&log.cases[0], Direction::Forward).unwrap();
        let bwd = schema.encode_case(&log.cases[0], Direction::Backward).unwrap();
        let ids = |s: &EncodedCase| s.steps.iter().map(|s| s[0]).collect::<Vec<_>>();
        assert_eq!(ids(&fwd), [BOS, 3, 4, 5, EOS]);
        assert_eq!(ids(&bwd), [BOS, 5, 4, 3, EOS]);

        let empty = case("2", &[]);
        for dir in [Direction::Forward, Direction::Backward] {
            let enc = schema.encode_case(&empty, dir).unwrap();
            assert_eq!(ids(&enc), [BOS, EOS]);
        }
    }

    #[test]
    fn out_of_vocabulary_names_attribute_and_value() {
        let log = EventLog::new(vec![case("1", &["a"])]);
        let schema = AttributeSchema::build(&log).unwrap();
        let err = schema
            .encode_case(&case("2", &["zzz"]), Direction::Forward)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("activity") && msg.contains("zzz"), "{msg}");
    }

    #[test]
    fn decode_strips_framing_and_rejects_unknown_ids() {
        let log = EventLog::new(vec![case("1", &["a", "b"])]);
        let schema = AttributeSchema::build(&log).unwrap();
        assert_eq!(schema.decode_sequence(&[BOS, 3, EOS]).unwrap(), ["a"]);
        assert!(schema.decode_sequence(&[BOS, EOS]).unwrap().is_empty());
        assert!(schema.decode_sequence(&[999]).is_err());
    }

    #[test]
    fn missing_events_key_is_a_parse_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"1\",\"case_attrs\":{},\"events\":[]}\n{\"id\":\"2\",\"case_attrs\":{}}\n",
        )
        .unwrap();
        match read_log(&path) {
            Err(CorpusError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("events"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_log(&path).unwrap().is_empty());
    }

    #[test]
    fn header_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = EventLog::new(vec![case("1", &["a"])]);
        log.run_config = Some(serde_json::json!({"seed": 7}));
        write_log(&log, &path).unwrap();
        assert_eq!(read_log(&path).unwrap(), log);
    }
}
