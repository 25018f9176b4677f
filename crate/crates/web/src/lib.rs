//! WebAssembly bindings for the browser demo. Every export takes plain
//! numbers and returns a JSON string; the same functions are callable from
//! Rust for testing.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use diseg::alignment::{segment_marginals_with, Truncation};
use diseg::attention::{hard_segment_mask, same_segment_probabilities};
use diseg::autodiff::Tensor;
use diseg::metrics::{latency_from_times, LatencyReport};
use diseg::model::{g_of_t, K_INF};
use diseg::segmentation::hard_decisions;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn check_p(p: &[f64]) -> Result<(), String> {
    if p.is_empty() {
        return Err("enter at least one probability".into());
    }
    match p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(format!("probability {v} is outside [0, 1]")),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    /// Probability that column frame is not in a later segment than the row.
    pub beta: Vec<Vec<f64>>,
    /// Expected attention under uniform raw scores.
    pub gamma: Vec<Vec<f64>>,
    /// Hard segmented attention from the thresholded decisions.
    pub hard: Vec<Vec<f64>>,
    pub decisions: Vec<bool>,
}

pub fn attention_view(p: &[f64]) -> Result<AttentionView, String> {
    check_p(p)?;
    let n = p.len();
    let beta = same_segment_probabilities(p);
    let normalize = |w: &dyn Fn(usize, usize) -> f64| {
        Tensor::from_fn(n, n, |i, j| w(i, j) / (0..n).map(|l| w(i, l)).sum::<f64>())
    };
    let gamma = normalize(&|i, j| beta.get(i, j));
    let decisions = hard_decisions(p);
    let mask = hard_segment_mask(&decisions);
    let hard = normalize(&|i, j| if mask.allowed(i, j) { 1.0 } else { 0.0 });
    Ok(AttentionView { beta: rows(&beta), gamma: rows(&gamma), hard: rows(&hard), decisions })
}

#[derive(Debug, Serialize)]
pub struct MarginalsView {
    /// `m[i][k]`: probability that frame `i` lies in segment `k`.
    pub m: Vec<Vec<f64>>,
    pub expected_index: Vec<f64>,
}

pub fn marginals_view(p: &[f64], segments: usize, discard: bool) -> Result<MarginalsView, String> {
    check_p(p)?;
    if segments == 0 {
        return Err("the number of segments must be at least 1".into());
    }
    let trunc = if discard { Truncation::Discard } else { Truncation::Absorb };
    let m = segment_marginals_with(p, segments, trunc).map_err(|e| e.to_string())?;
    Ok(MarginalsView { m: rows(m.matrix()), expected_index: m.expected_index() })
}

#[derive(Debug, Serialize)]
pub struct LatencyView {
    /// Frames visible when each target token is written.
    pub frames_read: Vec<usize>,
    pub tau_ms: Vec<f64>,
    pub duration_ms: f64,
    pub latency: Option<LatencyReport>,
}

/// Emission schedule of the wait-seg policy for fixed decisions; `k = 0`
/// stands for the offline limit.
pub fn latency_view(decisions: &[bool], k: usize, target_len: usize, frame_ms: f64) -> Result<LatencyView, String> {
    if decisions.is_empty() {
        return Err("enter at least one frame".into());
    }
    if !(frame_ms > 0.0) {
        return Err("frame duration must be positive".into());
    }
    let k = if k == 0 { K_INF } else { k };
    let frames_read: Vec<usize> = (1..=target_len).map(|t| g_of_t(decisions, t, k)).collect();
    let tau_ms: Vec<f64> = frames_read.iter().map(|&f| f as f64 * frame_ms).collect();
    let duration_ms = decisions.len() as f64 * frame_ms;
    Ok(LatencyView { latency: latency_from_times(&tau_ms, duration_ms), frames_read, tau_ms, duration_ms })
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = attentionView)]
pub fn attention_view_js(p: &[f64]) -> Result<String, JsError> {
    json(attention_view(p))
}

#[wasm_bindgen(js_name = marginalsView)]
pub fn marginals_view_js(p: &[f64], segments: usize, discard: bool) -> Result<String, JsError> {
    json(marginals_view(p, segments, discard))
}

#[wasm_bindgen(js_name = latencyView)]
pub fn latency_view_js(decisions: &[u8], k: usize, target_len: usize, frame_ms: f64) -> Result<String, JsError> {
    let b: Vec<bool> = decisions.iter().map(|&d| d != 0).collect();
    json(latency_view(&b, k, target_len, frame_ms))
}
