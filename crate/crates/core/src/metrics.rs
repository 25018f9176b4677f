//! Latency (CW, AP, AL, DAL), boundary quality (P/R/F1, OS, R-value) and
//! corpus BLEU. Times are in milliseconds; segmentation scores are percent.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::policy::SimulationTrace;
use crate::synth::Sentence;
use crate::{Error, Result};

/// Latency of one sentence, or of a corpus as the mean over sentences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub cw: f64,
    pub ap: f64,
    pub al: f64,
    pub dal: f64,
}

/// Per-sentence latency from emission times `tau` and source duration
/// `t_ms`. `None` when nothing was emitted.
pub fn latency_from_times(tau: &[f64], t_ms: f64) -> Option<LatencyReport> {
    if tau.is_empty() || !(t_ms > 0.0) {
        return None;
    }
    let n = tau.len() as f64;
    let rate = t_ms / n;

    let mut prev = 0.0;
    let mut waits = 0usize;
    let mut total_wait = 0.0;
    for &t in tau {
        let gap = t - prev;
        if gap > 0.0 {
            waits += 1;
        }
        total_wait += gap;
        prev = t;
    }
    let cw = if waits > 0 { total_wait / waits as f64 } else { 0.0 };

    let ap = tau.iter().map(|t| t / t_ms).sum::<f64>() / n;

    let cutoff = tau.iter().position(|&t| t >= t_ms).map_or(tau.len(), |i| i + 1);
    let al = (0..cutoff).map(|t| tau[t] - t as f64 * rate).sum::<f64>() / cutoff as f64;

    let mut lagged = Vec::with_capacity(tau.len());
    for (t, &v) in tau.iter().enumerate() {
        let d = if t == 0 { v } else { v.max(lagged[t - 1] + rate) };
        lagged.push(d);
    }
    let dal = lagged.iter().enumerate().map(|(t, d)| d - t as f64 * rate).sum::<f64>() / n;

    Some(LatencyReport { cw, ap, al, dal })
}

/// Mean over the sentences that emitted something; also returns how many
/// were excluded.
pub fn mean_latency(per_sentence: &[Option<LatencyReport>]) -> (Option<LatencyReport>, usize) {
    let present: Vec<&LatencyReport> = per_sentence.iter().flatten().collect();
    let excluded = per_sentence.len() - present.len();
    if present.is_empty() {
        return (None, excluded);
    }
    let n = present.len() as f64;
    let mean = |f: fn(&LatencyReport) -> f64| present.iter().map(|r| f(r)).sum::<f64>() / n;
    (Some(LatencyReport { cw: mean(|r| r.cw), ap: mean(|r| r.ap), al: mean(|r| r.al), dal: mean(|r| r.dal) }), excluded)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub matches: usize,
    pub hypothesis: usize,
    pub reference: usize,
}

impl BoundaryCounts {
    pub fn add(&mut self, other: BoundaryCounts) {
        self.matches += other.matches;
        self.hypothesis += other.hypothesis;
        self.reference += other.reference;
    }

    /// `(P, R, F1)` in percent; P is 0 when there are no hypotheses.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let p = ratio(self.matches, self.hypothesis);
        let r = ratio(self.matches, self.reference);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

/// Greedy one-to-one matching in time order: each hypothesis boundary
/// takes the nearest unmatched reference within `tol_ms` (earlier wins ties).
pub fn match_boundaries(hyp_ms: &[f64], ref_ms: &[f64], tol_ms: f64) -> BoundaryCounts {
    let mut used = vec![false; ref_ms.len()];
    let mut matches = 0;
    for &h in hyp_ms {
        let mut best: Option<(usize, f64)> = None;
        for (j, &r) in ref_ms.iter().enumerate() {
            let d = (h - r).abs();
            if used[j] || d > tol_ms {
                continue;
            }
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            matches += 1;
        }
    }
    BoundaryCounts { matches, hypothesis: hyp_ms.len(), reference: ref_ms.len() }
}

/// `(P, R, F1)` in percent and whether P was undefined (empty hypothesis).
pub fn boundary_prf(hyp_ms: &[f64], ref_ms: &[f64], tol_ms: f64) -> Result<(f64, f64, f64, bool)> {
    if !(tol_ms >= 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be non-negative, got {tol_ms}")));
    }
    let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
    if !sorted(hyp_ms) || !sorted(ref_ms) {
        return Err(Error::Data("boundary lists must be sorted".into()));
    }
    let (p, r, f1) = match_boundaries(hyp_ms, ref_ms, tol_ms).prf();
    Ok((p, r, f1, hyp_ms.is_empty()))
}

/// `100 (R/P - 1)` from percent P and R; `None` when P is 0.
pub fn over_segmentation(p: f64, r: f64) -> Option<f64> {
    (p > 0.0).then(|| 100.0 * (r / p - 1.0))
}

/// R-value in percent from fractional recall and over-segmentation.
pub fn r_value(r: f64, os: f64) -> f64 {
    let r1 = ((1.0 - r).powi(2) + os.powi(2)).sqrt();
    let r2 = (-os + r - 1.0) / std::f64::consts::SQRT_2;
    100.0 * (1.0 - (r1.abs() + r2.abs()) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub os: Option<f64>,
    pub r_value: Option<f64>,
    pub hypothesis_boundaries: usize,
    pub reference_boundaries: usize,
    pub tolerance_ms: f64,
}

impl SegmentationReport {
    pub fn from_counts(counts: BoundaryCounts, tolerance_ms: f64) -> Self {
        let (p, r, f1) = counts.prf();
        let os = over_segmentation(p, r);
        SegmentationReport {
            precision: p,
            recall: r,
            f1,
            os,
            r_value: os.map(|os| r_value(r / 100.0, os / 100.0)),
            hypothesis_boundaries: counts.hypothesis,
            reference_boundaries: counts.reference,
            tolerance_ms,
        }
    }
}

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU (0-100) with uniform weights, brevity penalty and no
/// smoothing: any zero n-gram precision gives 0.
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!("{} hypotheses for {} references", hypotheses.len(), references.len())));
    }
    if max_n == 0 {
        return Err(Error::InvalidConfig("max_n must be positive".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / max_n as f64;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// One row of the quality-latency curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Lagging parameter; `None` is the offline limit.
    pub k: Option<usize>,
    pub sentences: usize,
    /// Sentences without emissions, left out of the latency means.
    pub no_output: usize,
    pub latency: Option<LatencyReport>,
    pub bleu: f64,
    pub segmentation: SegmentationReport,
}

pub const CSV_HEADER: &str = "k,AL,AP,CW,DAL,BLEU,P,R,F1,OS,R-value";

fn k_label(k: Option<usize>) -> String {
    k.map_or_else(|| "inf".to_string(), |k| k.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let l = self.latency;
        let s = &self.segmentation;
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{},{}",
            k_label(self.k),
            opt(l.map(|l| l.al)),
            opt(l.map(|l| l.ap)),
            opt(l.map(|l| l.cw)),
            opt(l.map(|l| l.dal)),
            self.bleu,
            s.precision,
            s.recall,
            s.f1,
            opt(s.os),
            opt(s.r_value),
        )
    }
}

/// CSV with a leading comment line recording the boundary tolerance.
pub fn write_csv<W: Write>(mut out: W, reports: &[MetricReport], tolerance_frames: usize, frame_ms: f64) -> Result<()> {
    writeln!(out, "# tolerance_frames={tolerance_frames} tolerance_ms={}", tolerance_frames as f64 * frame_ms)?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Boundaries every `spacing` frames, strictly inside a stream of `frames`
/// frames, in ms.
pub fn equal_spacing_boundaries(frames: usize, spacing: usize, frame_ms: f64) -> Vec<f64> {
    (1..).map(|i| i * spacing.max(1)).take_while(|&f| f < frames).map(|f| f as f64 * frame_ms).collect()
}

/// Boundaries strictly before the end of the stream; the end itself is
/// never scored.
pub fn interior_boundaries(boundaries_ms: &[f64], t_ms: f64) -> Vec<f64> {
    boundaries_ms.iter().copied().filter(|&b| b < t_ms - 1e-9).collect()
}

/// Pooled boundary scores over `(hypothesis, reference, duration)` triples.
pub fn segmentation_report<'a>(
    sentences: impl IntoIterator<Item = (&'a [f64], &'a [f64], f64)>,
    tolerance_ms: f64,
) -> SegmentationReport {
    let mut counts = BoundaryCounts::default();
    for (hyp, reference, t_ms) in sentences {
        counts.add(match_boundaries(&interior_boundaries(hyp, t_ms), &interior_boundaries(reference, t_ms), tolerance_ms));
    }
    SegmentationReport::from_counts(counts, tolerance_ms)
}

/// Scores traces of one lagging value against the sentences they were run
/// on, matched by id.
pub fn evaluate_traces(traces: &[SimulationTrace], corpus: &[Sentence], tolerance_ms: f64) -> Result<MetricReport> {
    let first = traces.first().ok_or_else(|| Error::Data("no traces to evaluate".into()))?;
    let by_id: HashMap<usize, &Sentence> = corpus.iter().map(|s| (s.id, s)).collect();
    let mut latencies = Vec::with_capacity(traces.len());
    let mut hyps = Vec::with_capacity(traces.len());
    let mut refs = Vec::with_capacity(traces.len());
    let mut pairs = Vec::with_capacity(traces.len());
    for t in traces {
        if t.k != first.k {
            return Err(Error::Data(format!("trace {} has k={} but trace {} has k={}", t.id, k_label(t.k), first.id, k_label(first.k))));
        }
        let s = by_id.get(&t.id).ok_or_else(|| Error::Data(format!("trace {} has no sentence in the corpus", t.id)))?;
        if (s.duration_ms() - t.t_ms).abs() > 1e-9 {
            return Err(Error::Data(format!("trace {} lasts {} ms but its sentence lasts {} ms", t.id, t.t_ms, s.duration_ms())));
        }
        latencies.push(latency_from_times(&t.tau_ms, t.t_ms));
        hyps.push(t.hypothesis.clone());
        refs.push(s.target.clone());
        pairs.push((t.segments_ms.as_slice(), s.boundaries_ms.as_slice(), t.t_ms));
    }
    let (latency, no_output) = mean_latency(&latencies);
    Ok(MetricReport {
        k: first.k,
        sentences: traces.len(),
        no_output,
        latency,
        bleu: corpus_bleu(&hyps, &refs, 4)?,
        segmentation: segmentation_report(pairs, tolerance_ms),
    })
}
