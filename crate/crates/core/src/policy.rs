//! Wait-seg streaming simulation: frames arrive one at a time, the
//! segmenter re-runs on the prefix after every read, and the `t`-th target
//! token is written once `t + k − 1` segments have closed (or the stream
//! has ended).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{length_cap, Model, Token, K_INF};
use crate::segmentation::hard_decisions;
use crate::{Error, FeatureSequence, Result};

/// What the simulator needs from a model.
pub trait StreamingModel {
    type Memory;

    /// Inference-mode boundary decisions for a prefix.
    fn boundaries(&self, prefix: &Tensor) -> Result<Vec<bool>>;

    /// Encoder state for a prefix.
    fn encode(&self, prefix: &Tensor) -> Result<Self::Memory>;

    /// Next token given the memory, the frames visible to every decoder
    /// row, and the tokens written so far.
    fn next_token(&self, memory: &Self::Memory, visible: &[usize], history: &[usize]) -> Result<Token>;
}

impl StreamingModel for Model {
    type Memory = Tensor;

    fn boundaries(&self, prefix: &Tensor) -> Result<Vec<bool>> {
        Ok(hard_decisions(&self.segment(prefix)?))
    }

    fn encode(&self, prefix: &Tensor) -> Result<Tensor> {
        Ok(self.encode_stream(prefix)?.0)
    }

    fn next_token(&self, memory: &Tensor, visible: &[usize], history: &[usize]) -> Result<Token> {
        Model::next_token(self, memory, visible, history)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Read,
    Write,
}

/// READ carries the 1-based frame index, WRITE the target id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub kind: EventKind,
    pub t_ms: f64,
    pub payload: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub id: usize,
    /// Lagging value; `None` is `k = ∞`.
    pub k: Option<usize>,
    #[serde(rename = "T_ms")]
    pub t_ms: f64,
    pub events: Vec<StreamEvent>,
    /// Emitted target ids, without the end-of-sequence token.
    pub hypothesis: Vec<usize>,
    pub tau_ms: Vec<f64>,
    /// Ends of the detected segments over the whole stream.
    pub segments_ms: Vec<f64>,
    /// Set when the length cap stopped decoding.
    pub truncated: bool,
}

fn k_value(k: Option<usize>) -> Result<usize> {
    match k {
        Some(0) => Err(Error::InvalidConfig("k must be at least 1".into())),
        Some(k) => Ok(k),
        None => Ok(K_INF),
    }
}

fn prefix(features: &FeatureSequence, n: usize) -> Result<Tensor> {
    Ok(features.prefix(n)?.frames().clone())
}

/// Runs the wait-seg policy over `features`. `k_words` sets the length cap
/// `2K + 10`.
pub fn simulate<M: StreamingModel>(
    model: &M,
    features: &FeatureSequence,
    k: Option<usize>,
    k_words: usize,
    id: usize,
) -> Result<SimulationTrace> {
    let kk = k_value(k)?;
    let n = features.len();
    let fm = features.frame_ms();
    let cap = length_cap(k_words);
    let mut events = Vec::new();
    let mut hypothesis = Vec::new();
    let mut tau_ms = Vec::new();
    let mut visible = Vec::new();
    let mut truncated = false;
    let mut read = 0;
    'stream: while read < n {
        read += 1;
        let now = read as f64 * fm;
        events.push(StreamEvent { kind: EventKind::Read, t_ms: now, payload: read });
        let current = prefix(features, read)?;
        let segments = model.boundaries(&current)?.iter().filter(|&&b| b).count();
        let mut memory = None;
        loop {
            let t = hypothesis.len() + 1;
            if segments < t.saturating_add(kk).saturating_sub(1) && read < n {
                break;
            }
            if hypothesis.len() >= cap {
                truncated = true;
                break 'stream;
            }
            if memory.is_none() {
                memory = Some(model.encode(&current)?);
            }
            visible.push(read);
            match model.next_token(memory.as_ref().expect("encoded above"), &visible, &hypothesis)? {
                Token::Eos => break 'stream,
                Token::Word(w) => {
                    hypothesis.push(w);
                    tau_ms.push(now);
                    events.push(StreamEvent { kind: EventKind::Write, t_ms: now, payload: w });
                }
            }
        }
    }
    let b = model.boundaries(features.frames())?;
    let segments_ms = b.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| (i + 1) as f64 * fm).collect();
    Ok(SimulationTrace { id, k, t_ms: features.duration_ms(), events, hypothesis, tau_ms, segments_ms, truncated })
}

/// Checks that every WRITE obeys the policy at its recorded time and that
/// a fresh simulation reproduces the trace exactly. Errors name the first
/// offending event (1-based).
pub fn replay_consistency_check<M: StreamingModel>(
    trace: &SimulationTrace,
    features: &FeatureSequence,
    model: &M,
    k_words: usize,
) -> Result<()> {
    let kk = k_value(trace.k)?;
    let n = features.len();
    let fm = features.frame_ms();
    let fail = |event: usize, message: String| Err(Error::Replay { event, message });
    let mut read = 0;
    let mut written: usize = 0;
    let mut last = 0.0;
    for (i, e) in trace.events.iter().enumerate() {
        if e.t_ms < last {
            return fail(i + 1, format!("time {} precedes {last}", e.t_ms));
        }
        last = e.t_ms;
        match e.kind {
            EventKind::Read => {
                read += 1;
                if e.payload != read || e.t_ms != read as f64 * fm || read > n {
                    return fail(i + 1, format!("READ of frame {} at {} ms is out of order", e.payload, e.t_ms));
                }
            }
            EventKind::Write => {
                written += 1;
                if e.t_ms != read as f64 * fm {
                    return fail(i + 1, format!("WRITE at {} ms after reading {read} frames", e.t_ms));
                }
                let segments = model.boundaries(&prefix(features, read)?)?.iter().filter(|&&b| b).count();
                if read < n && segments < written.saturating_add(kk).saturating_sub(1) {
                    return fail(i + 1, format!("token {written} written with {segments} segments at k={kk}"));
                }
            }
        }
    }
    let fresh = simulate(model, features, trace.k, k_words, trace.id)?;
    for (i, (a, b)) in trace.events.iter().zip(&fresh.events).enumerate() {
        if a != b {
            return fail(i + 1, format!("recorded {a:?}, replay gives {b:?}"));
        }
    }
    if trace.events.len() != fresh.events.len() {
        let at = trace.events.len().min(fresh.events.len()) + 1;
        return fail(at, format!("recorded {} events, replay gives {}", trace.events.len(), fresh.events.len()));
    }
    if trace != &fresh {
        return fail(trace.events.len(), "hypothesis, emission times or segments differ".into());
    }
    Ok(())
}

pub fn write_traces<W: Write>(mut out: W, traces: &[SimulationTrace]) -> Result<()> {
    for t in traces {
        writeln!(out, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<SimulationTrace>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}
