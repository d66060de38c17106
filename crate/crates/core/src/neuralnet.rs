//! Next-event sequence model: per-attribute embeddings feeding a gated
//! recurrent cell whose initial state comes from a small case-attribute
//! network, with one softmax head per predicted attribute.
//!
//! Parameters live in one flat `f64` vector with a named tensor layout. They
//! are rounded to `f32` precision after initialization and after training so
//! that checkpoints (stored as `f32`) round-trip bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AttributeSchema, Case, CorpusError, Direction, EncodedCase, Step};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BALM";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_EMBED_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("maximum encoded case length {0} is below 2")]
    CaseTooShort(usize),
    #[error("id {id} out of range for case attribute {attribute} of size {size}")]
    IdOutOfRange {
        attribute: String,
        id: u32,
        size: usize,
    },
    #[error("expected {expected} case attribute ids, got {found}")]
    CaseAttributeCount { expected: usize, found: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("schema fingerprint mismatch")]
    FingerprintMismatch,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// `max(2, ceil(1.5 * sqrt(n)))`, capped at 32.
pub fn embedding_dim(vocab_size: usize) -> usize {
    ((1.5 * (vocab_size as f64).sqrt()).ceil() as usize).clamp(2, MAX_EMBED_DIM)
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Tensor {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tensors: Vec<Tensor>,
    embed: Vec<usize>,
    case_embed: Vec<usize>,
    /// fc1 weight, fc1 bias, fc2 weight, fc2 bias; absent without case attributes.
    case_fc: Option<[usize; 4]>,
    /// w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n.
    gru: [usize; 9],
    head_w: Vec<usize>,
    head_b: Vec<usize>,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Dims {
    hidden: usize,
    step_vocab: Vec<usize>,
    embed: Vec<usize>,
    input: usize,
    case_vocab: Vec<usize>,
    case_embed: Vec<usize>,
    case_input: usize,
    case_hidden: usize,
}

impl Dims {
    fn new(schema: &AttributeSchema, hidden: usize) -> Self {
        let step_vocab: Vec<usize> = (0..schema.step_width())
            .map(|k| schema.step_vocabulary(k).len())
            .collect();
        let embed: Vec<usize> = step_vocab.iter().map(|&v| embedding_dim(v)).collect();
        let case_vocab: Vec<usize> = schema
            .case_attributes
            .iter()
            .map(|a| a.vocabulary.len())
            .collect();
        let case_embed: Vec<usize> = case_vocab.iter().map(|&v| embedding_dim(v)).collect();
        Self {
            hidden,
            input: embed.iter().sum(),
            case_input: case_embed.iter().sum(),
            case_hidden: (hidden / 8).max(1),
            step_vocab,
            embed,
            case_vocab,
            case_embed,
        }
    }

    fn layout(&self) -> Layout {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let t = Tensor {
                name,
                shape,
                offset,
            };
            offset += t.len();
            tensors.push(t);
            tensors.len() - 1
        };
        let h = self.hidden;
        let embed: Vec<usize> = (0..self.step_vocab.len())
            .map(|k| push(format!("embed.{k}"), vec![self.step_vocab[k], self.embed[k]]))
            .collect();
        let case_embed: Vec<usize> = (0..self.case_vocab.len())
            .map(|j| push(format!("case_embed.{j}"), vec![self.case_vocab[j], self.case_embed[j]]))
            .collect();
        let case_fc = (!self.case_vocab.is_empty()).then(|| {
            [
                push("case_fc1.weight".into(), vec![self.case_hidden, self.case_input]),
                push("case_fc1.bias".into(), vec![self.case_hidden]),
                push("case_fc2.weight".into(), vec![h, self.case_hidden]),
                push("case_fc2.bias".into(), vec![h]),
            ]
        });
        let mut gru = [0; 9];
        for (g, gate) in ["z", "r", "n"].iter().enumerate() {
            gru[3 * g] = push(format!("gru.w_{gate}"), vec![h, self.input]);
            gru[3 * g + 1] = push(format!("gru.u_{gate}"), vec![h, h]);
            gru[3 * g + 2] = push(format!("gru.b_{gate}"), vec![h]);
        }
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for (k, &v) in self.step_vocab.iter().enumerate() {
            head_w.push(push(format!("head.{k}.weight"), vec![v, h]));
            head_b.push(push(format!("head.{k}.bias"), vec![v]));
        }
        let total = offset;
        let resolve = |i: usize| tensors[i].offset;
        Layout {
            embed: resolve_all(&embed, resolve),
            case_embed: resolve_all(&case_embed, resolve),
            case_fc: case_fc.map(|ids| ids.map(resolve)),
            gru: gru.map(resolve),
            head_w: resolve_all(&head_w, resolve),
            head_b: resolve_all(&head_b, resolve),
            tensors: tensors.clone(),
            total,
        }
    }
}

fn resolve_all(ids: &[usize], f: impl Fn(usize) -> usize) -> Vec<usize> {
    ids.iter().map(|&i| f(i)).collect()
}

/// Output of one recurrent step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    /// Per predicted attribute, a distribution over its vocabulary.
    pub probs: Vec<Vec<f64>>,
    /// Floored natural logs of `probs`.
    pub log_probs: Vec<Vec<f64>>,
    /// Hidden state after consuming the step's input.
    pub state: Vec<f64>,
}

impl StepDistribution {
    /// Log-probability of `event`: the sum over heads, or the activity head
    /// alone when `control_flow_only` is set.
    pub fn event_log_prob(&self, event: &[u32], control_flow_only: bool) -> f64 {
        let heads = if control_flow_only { 1 } else { event.len() };
        (0..heads)
            .map(|k| self.log_probs[k][event[k] as usize])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextEventModel {
    pub direction: Direction,
    pub schema: AttributeSchema,
    /// Provenance stored in checkpoints.
    pub run_config: Option<serde_json::Value>,
    dims: Dims,
    layout: Layout,
    params: Vec<f64>,
}

fn snap_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += W x` for a row-major `rows x cols` matrix.
fn gemv(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T v`.
fn gemv_t(w: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (&vi, row) in v.iter().zip(w.chunks_exact(cols)) {
        if vi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
    }
}

/// `dw += a b^T`.
fn ger(dw: &mut [f64], a: &[f64], b: &[f64]) {
    for (&ai, row) in a.iter().zip(dw.chunks_exact_mut(b.len())) {
        if ai != 0.0 {
            for (d, bj) in row.iter_mut().zip(b) {
                *d += ai * bj;
            }
        }
    }
}

/// Writes the stable log-softmax of `logits` into `logp` and the softmax
/// into `p`.
fn log_softmax(logits: &[f64], logp: &mut [f64], p: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for ((lp, pi), l) in logp.iter_mut().zip(p.iter_mut()).zip(logits) {
        *lp = l - lse;
        *pi = lp.exp();
    }
}

/// Intermediate values of one recurrent step, kept for backpropagation.
struct StepTrace {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
    h: Vec<f64>,
}

struct CaseTrace {
    e: Vec<f64>,
    u: Vec<f64>,
    h0: Vec<f64>,
}

/// Builds a freshly initialized model. `max_case_len` is the longest encoded
/// case (framing steps included); the hidden size is twice that.
pub fn init_model<R: Rng + ?Sized>(
    schema: &AttributeSchema,
    direction: Direction,
    max_case_len: usize,
    rng: &mut R,
) -> Result<NextEventModel> {
    if max_case_len < 2 {
        return Err(ModelError::CaseTooShort(max_case_len));
    }
    let dims = Dims::new(schema, 2 * max_case_len);
    let layout = dims.layout();
    let mut params = vec![0.0; layout.total];
    for t in &layout.tensors {
        let slice = &mut params[t.offset..t.offset + t.len()];
        let bound = if t.name.ends_with("bias") || t.name.starts_with("gru.b_") {
            0.0
        } else if t.name.contains("embed") {
            (3.0 / t.shape[1] as f64).sqrt()
        } else {
            1.0 / (t.shape[1] as f64).sqrt()
        };
        if bound > 0.0 {
            for p in slice {
                *p = rng.gen_range(-bound..bound);
            }
        }
    }
    snap_f32(&mut params);
    Ok(NextEventModel {
        direction,
        schema: schema.clone(),
        run_config: None,
        dims,
        layout,
        params,
    })
}

impl NextEventModel {
    pub fn hidden_size(&self) -> usize {
        self.dims.hidden
    }

    /// Width of the first case-attribute layer.
    pub fn case_hidden_size(&self) -> usize {
        self.dims.case_hidden
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter tensors as (name, range into the flat vector).
    pub fn parameter_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layout
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.offset..t.offset + t.len()))
            .collect()
    }

    /// Encodes a case in this model's reading direction.
    pub fn encode(&self, case: &Case) -> Result<EncodedCase> {
        Ok(self.schema.encode_case(case, self.direction)?)
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    fn case_forward(&self, ids: &[u32]) -> Result<CaseTrace> {
        let d = &self.dims;
        if ids.len() != d.case_vocab.len() {
            return Err(ModelError::CaseAttributeCount {
                expected: d.case_vocab.len(),
                found: ids.len(),
            });
        }
        let Some([w1, b1, w2, b2]) = self.layout.case_fc else {
            return Ok(CaseTrace {
                e: Vec::new(),
                u: Vec::new(),
                h0: vec![0.0; d.hidden],
            });
        };
        let mut e = Vec::with_capacity(d.case_input);
        for (j, &id) in ids.iter().enumerate() {
            if id as usize >= d.case_vocab[j] {
                return Err(ModelError::IdOutOfRange {
                    attribute: self.schema.case_attributes[j].name.clone(),
                    id,
                    size: d.case_vocab[j],
                });
            }
            let dim = d.case_embed[j];
            e.extend_from_slice(self.slice(self.layout.case_embed[j] + id as usize * dim, dim));
        }
        let mut u = self.slice(b1, d.case_hidden).to_vec();
        gemv(self.slice(w1, d.case_hidden * d.case_input), d.case_input, &e, &mut u);
        u.iter_mut().for_each(|v| *v = v.tanh());
        let mut h0 = self.slice(b2, d.hidden).to_vec();
        gemv(self.slice(w2, d.hidden * d.case_hidden), d.case_hidden, &u, &mut h0);
        h0.iter_mut().for_each(|v| *v = v.tanh());
        Ok(CaseTrace { e, u, h0 })
    }

    /// Initial hidden state from the case attributes; zeros for a model
    /// without case attributes.
    pub fn case_state(&self, case_attr_ids: &[u32]) -> Result<Vec<f64>> {
        Ok(self.case_forward(case_attr_ids)?.h0)
    }

    fn cell(&self, h_prev: &[f64], event: &[u32]) -> StepTrace {
        let d = &self.dims;
        let h = d.hidden;
        let mut x = Vec::with_capacity(d.input);
        for (k, &id) in event.iter().enumerate() {
            let dim = d.embed[k];
            x.extend_from_slice(self.slice(self.layout.embed[k] + id as usize * dim, dim));
        }
        let g = &self.layout.gru;
        let gate = |wi: usize, ui: usize, bi: usize, hin: &[f64]| {
            let mut a = self.slice(bi, h).to_vec();
            gemv(self.slice(wi, h * d.input), d.input, &x, &mut a);
            gemv(self.slice(ui, h * h), h, hin, &mut a);
            a
        };
        let z: Vec<f64> = gate(g[0], g[1], g[2], h_prev).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(g[3], g[4], g[5], h_prev).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = gate(g[6], g[7], g[8], &rh).into_iter().map(f64::tanh).collect();
        let h_new = (0..h)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * n[i])
            .collect();
        StepTrace {
            x,
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            rh,
            h: h_new,
        }
    }

    fn heads(&self, h: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = &self.dims;
        let mut probs = Vec::with_capacity(d.step_vocab.len());
        let mut log_probs = Vec::with_capacity(d.step_vocab.len());
        for (k, &v) in d.step_vocab.iter().enumerate() {
            let mut logits = self.slice(self.layout.head_b[k], v).to_vec();
            gemv(self.slice(self.layout.head_w[k], v * d.hidden), d.hidden, h, &mut logits);
            let mut lp = vec![0.0; v];
            let mut p = vec![0.0; v];
            log_softmax(&logits, &mut lp, &mut p);
            probs.push(p);
            log_probs.push(lp);
        }
        (probs, log_probs)
    }

    /// Consumes `event` from `state` and predicts the following event.
    pub fn step(&self, state: &[f64], event: &[u32]) -> StepDistribution {
        let trace = self.cell(state, event);
        let (probs, mut log_probs) = self.heads(&trace.h);
        let floor = PROB_FLOOR.ln();
        for lp in &mut log_probs {
            lp.iter_mut().for_each(|v| *v = v.max(floor));
        }
        StepDistribution {
            probs,
            log_probs,
            state: trace.h,
        }
    }

    /// State after consuming every step of `inputs`.
    pub fn run(&self, h0: &[f64], inputs: &[Step]) -> Vec<f64> {
        inputs
            .iter()
            .fold(h0.to_vec(), |h, s| self.cell(&h, s).h)
    }

    /// Log-probability of `steps[1..]` given `steps[0]` as the first input
    /// and `h0` as the initial state.
    pub fn sequence_log_prob(&self, h0: &[f64], steps: &[Step], control_flow_only: bool) -> f64 {
        let mut state = h0.to_vec();
        let mut total = 0.0;
        for w in steps.windows(2) {
            let dist = self.step(&state, &w[0]);
            total += dist.event_log_prob(&w[1], control_flow_only);
            state = dist.state;
        }
        total
    }

    /// Summed cross-entropy over all target steps of `cases` and its
    /// gradient, plus the number of target steps.
    fn loss_grad_sum(&self, cases: &[&EncodedCase], grad: &mut [f64]) -> Result<(f64, usize)> {
        let d = &self.dims;
        let h = d.hidden;
        let lay = &self.layout;
        let g = &lay.gru;
        let mut loss = 0.0;
        let mut targets = 0;
        for case in cases {
            let ct = self.case_forward(&case.case_attr_ids)?;
            let mut traces = Vec::with_capacity(case.steps.len());
            let mut probs = Vec::with_capacity(case.steps.len());
            let mut state = ct.h0.clone();
            for w in case.steps.windows(2) {
                let trace = self.cell(&state, &w[0]);
                let (p, lp) = self.heads(&trace.h);
                for (k, &y) in w[1].iter().enumerate() {
                    loss -= lp[k][y as usize];
                }
                targets += 1;
                state = trace.h.clone();
                traces.push(trace);
                probs.push(p);
            }

            let mut dh_next = vec![0.0; h];
            for (t, trace) in traces.iter().enumerate().rev() {
                let target = &case.steps[t + 1];
                let mut dh = dh_next;
                for (k, p) in probs[t].iter().enumerate() {
                    let v = d.step_vocab[k];
                    let mut gl = p.clone();
                    gl[target[k] as usize] -= 1.0;
                    ger(&mut grad[lay.head_w[k]..lay.head_w[k] + v * h], &gl, &trace.h);
                    add(&mut grad[lay.head_b[k]..lay.head_b[k] + v], &gl);
                    gemv_t(self.slice(lay.head_w[k], v * h), h, &gl, &mut dh);
                }
                let StepTrace {
                    x,
                    h_prev,
                    z,
                    r,
                    n,
                    rh,
                    ..
                } = trace;
                let mut dh_prev: Vec<f64> = (0..h).map(|i| dh[i] * (1.0 - z[i])).collect();
                let dan: Vec<f64> = (0..h)
                    .map(|i| dh[i] * z[i] * (1.0 - n[i] * n[i]))
                    .collect();
                let daz: Vec<f64> = (0..h)
                    .map(|i| dh[i] * (n[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
                    .collect();
                let mut dx = vec![0.0; d.input];
                let mut drh = vec![0.0; h];
                ger(&mut grad[g[6]..g[6] + h * d.input], &dan, x);
                ger(&mut grad[g[7]..g[7] + h * h], &dan, rh);
                add(&mut grad[g[8]..g[8] + h], &dan);
                gemv_t(self.slice(g[7], h * h), h, &dan, &mut drh);
                gemv_t(self.slice(g[6], h * d.input), d.input, &dan, &mut dx);
                let dar: Vec<f64> = (0..h)
                    .map(|i| drh[i] * h_prev[i] * r[i] * (1.0 - r[i]))
                    .collect();
                for i in 0..h {
                    dh_prev[i] += drh[i] * r[i];
                }
                for (da, (wi, ui, bi)) in [(&daz, (g[0], g[1], g[2])), (&dar, (g[3], g[4], g[5]))] {
                    ger(&mut grad[wi..wi + h * d.input], da, x);
                    ger(&mut grad[ui..ui + h * h], da, h_prev);
                    add(&mut grad[bi..bi + h], da);
                    gemv_t(self.slice(ui, h * h), h, da, &mut dh_prev);
                    gemv_t(self.slice(wi, h * d.input), d.input, da, &mut dx);
                }
                let input = &case.steps[t];
                let mut at = 0;
                for (k, &id) in input.iter().enumerate() {
                    let dim = d.embed[k];
                    let row = lay.embed[k] + id as usize * dim;
                    add(&mut grad[row..row + dim], &dx[at..at + dim]);
                    at += dim;
                }
                dh_next = dh_prev;
            }

            if let Some([w1, b1, w2, b2]) = lay.case_fc {
                let da2: Vec<f64> = (0..h)
                    .map(|i| dh_next[i] * (1.0 - ct.h0[i] * ct.h0[i]))
                    .collect();
                let m = d.case_hidden;
                ger(&mut grad[w2..w2 + h * m], &da2, &ct.u);
                add(&mut grad[b2..b2 + h], &da2);
                let mut du = vec![0.0; m];
                gemv_t(self.slice(w2, h * m), m, &da2, &mut du);
                let da1: Vec<f64> = (0..m).map(|i| du[i] * (1.0 - ct.u[i] * ct.u[i])).collect();
                ger(&mut grad[w1..w1 + m * d.case_input], &da1, &ct.e);
                add(&mut grad[b1..b1 + m], &da1);
                let mut de = vec![0.0; d.case_input];
                gemv_t(self.slice(w1, m * d.case_input), d.case_input, &da1, &mut de);
                let mut at = 0;
                for (j, &id) in case.case_attr_ids.iter().enumerate() {
                    let dim = d.case_embed[j];
                    let row = lay.case_embed[j] + id as usize * dim;
                    add(&mut grad[row..row + dim], &de[at..at + dim]);
                    at += dim;
                }
            }
        }
        Ok((loss, targets))
    }

    /// Mean cross-entropy per target step (summed over heads) and its
    /// gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(&self, cases: &[EncodedCase]) -> Result<(f64, Vec<f64>)> {
        let refs: Vec<&EncodedCase> = cases.iter().collect();
        let mut grad = vec![0.0; self.params.len()];
        let (loss, targets) = self.loss_grad_sum(&refs, &mut grad)?;
        let scale = 1.0 / targets.max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// Mean cross-entropy per target step, summed over heads.
    pub fn loss(&self, cases: &[EncodedCase]) -> Result<f64> {
        let mut loss = 0.0;
        let mut targets = 0;
        for case in cases {
            let mut state = self.case_state(&case.case_attr_ids)?;
            for w in case.steps.windows(2) {
                let trace = self.cell(&state, &w[0]);
                let (_, lp) = self.heads(&trace.h);
                loss -= w[1].iter().enumerate().map(|(k, &y)| lp[k][y as usize]).sum::<f64>();
                targets += 1;
                state = trace.h;
            }
        }
        Ok(loss / targets.max(1) as f64)
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("clip_norm", self.clip_norm),
        ];
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::BadConfig("epochs and batch_size must be positive".into()));
        }
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ModelError::BadConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Trains with Adam on shuffled mini-batches. Returns the model and the mean
/// per-step training loss of each epoch.
pub fn train(
    mut model: NextEventModel,
    data: &[EncodedCase],
    config: &TrainConfig,
) -> Result<(NextEventModel, Vec<f64>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = model.params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut t = 0i32;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_targets = 0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedCase> = chunk.iter().map(|&i| &data[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (loss, targets) = model.loss_grad_sum(&batch, &mut grad)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            epoch_loss += loss;
            epoch_targets += targets;
            let scale = 1.0 / targets.max(1) as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            t += 1;
            let c1 = 1.0 - config.beta1.powi(t);
            let c2 = 1.0 - config.beta2.powi(t);
            for i in 0..n {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
                let step = config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + config.epsilon);
                model.params[i] -= step;
            }
        }
        trace.push(epoch_loss / epoch_targets.max(1) as f64);
    }
    snap_f32(&mut model.params);
    Ok((model, trace))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema: AttributeSchema,
    #[serde(default)]
    run_config: Option<serde_json::Value>,
}

/// Writes the model as a versioned little-endian container:
///
/// ```text
/// "BALM" | version u32 | direction u8 (0 forward, 1 backward) | hidden u32
/// | schema fingerprint [u8; 32] | meta_len u32 | meta JSON {schema, run_config}
/// | n_tensors u32 | per tensor: name_len u16, name, ndim u8, dims u32 x ndim,
///   data f32 x prod(dims)
/// ```
pub fn save_model(model: &NextEventModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(match model.direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    });
    buf.extend_from_slice(&(model.dims.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&model.schema.fingerprint());
    let meta = serde_json::to_vec(&CheckpointMeta {
        schema: model.schema.clone(),
        run_config: model.run_config.clone(),
    })?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(model.layout.tensors.len() as u32).to_le_bytes());
    for t in &model.layout.tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &p in &model.params[t.offset..t.offset + t.len()] {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Malformed("unexpected end of file".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint. When `expected` is given its fingerprint must match
/// the stored schema's.
pub fn load_model(path: &Path, expected: Option<&AttributeSchema>) -> Result<NextEventModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Malformed("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let direction = match r.u8()? {
        0 => Direction::Forward,
        1 => Direction::Backward,
        d => return Err(ModelError::Malformed(format!("direction byte {d}"))),
    };
    let hidden = r.u32()? as usize;
    let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.schema.fingerprint() != fingerprint {
        return Err(ModelError::FingerprintMismatch);
    }
    if let Some(schema) = expected {
        if schema.fingerprint() != fingerprint {
            return Err(ModelError::FingerprintMismatch);
        }
    }
    if hidden < 4 || hidden % 2 != 0 {
        return Err(ModelError::Malformed(format!("hidden size {hidden}")));
    }
    let dims = Dims::new(&meta.schema, hidden);
    let layout = dims.layout();
    let n_tensors = r.u32()? as usize;
    if n_tensors != layout.tensors.len() {
        return Err(ModelError::Malformed(format!(
            "{n_tensors} tensors, expected {}",
            layout.tensors.len()
        )));
    }
    let mut params = vec![0.0; layout.total];
    for t in &layout.tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != t.name || shape != t.shape {
            return Err(ModelError::Malformed(format!(
                "tensor {name} {shape:?}, expected {} {:?}",
                t.name, t.shape
            )));
        }
        let data = r.take(4 * t.len())?;
        for (p, chunk) in params[t.offset..t.offset + t.len()]
            .iter_mut()
            .zip(data.chunks_exact(4))
        {
            *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if r.at != bytes.len() {
        return Err(ModelError::Malformed("trailing bytes".into()));
    }
    Ok(NextEventModel {
        direction,
        schema: meta.schema,
        run_config: meta.run_config,
        dims,
        layout,
        params,
    })
}
