//! Self-contained correctness suite: marginal DP against enumeration,
//! normalization, attention reductions, finite-difference gradients,
//! metric hand examples and decoder masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{
    contrastive_loss_node, expected_segment_representations_node, segment_marginals, segment_marginals_node, Truncation,
    WordSpans,
};
use crate::attention::{encoder_attention, init_attention, same_segment_node, self_attention, AttentionKind, EncoderMask};
use crate::autodiff::{finite_difference_check, FdConfig, FdReport, ParameterSet, Tensor};
use crate::metrics::{corpus_bleu, latency_from_times, over_segmentation, r_value};
use crate::model::{g_of_t, wait_seg_decoder_mask, Model, ModelConfig, K_INF};
use crate::segmentation::{sample_noise, segment_count_loss_node};
use crate::synth::Sentence;
use crate::{Error, FeatureSequence, Result};

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Added to every analytic gradient entry; a non-zero value must make
    /// the gradient family fail.
    pub gradient_perturbation: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 1, gradient_perturbation: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckFamily {
    pub name: &'static str,
    pub checks: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Up to five failure descriptions.
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub families: Vec<CheckFamily>,
    pub checks: usize,
    pub failures: usize,
    pub passed: bool,
}

struct Family {
    inner: CheckFamily,
}

impl Family {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Family {
            inner: CheckFamily { name, checks: 0, failures: 0, max_error: 0.0, tolerance, passed: true, notes: vec![] },
        }
    }

    fn record(&mut self, error: f64, what: impl FnOnce() -> String) {
        self.inner.checks += 1;
        let error = if error.is_nan() { f64::INFINITY } else { error };
        self.inner.max_error = self.inner.max_error.max(error);
        if error > self.inner.tolerance {
            self.fail(what());
        }
    }

    fn exact(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.inner.checks += 1;
        if !ok {
            self.fail(what());
        }
    }

    fn fail(&mut self, note: String) {
        self.inner.failures += 1;
        self.inner.passed = false;
        if self.inner.notes.len() < 5 {
            self.inner.notes.push(note);
        }
    }

    fn fd(&mut self, label: &str, report: &FdReport) {
        for r in &report.per_param {
            self.record(r.max_rel_err, || format!("{label}: {} rel err {:.3e} at {}", r.name, r.max_rel_err, r.worst_index));
        }
    }
}

pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let families = vec![
        dp_oracle(&mut rng)?,
        normalization(&mut rng)?,
        attention_reductions(&mut rng)?,
        gradients(&mut rng, opts.gradient_perturbation)?,
        metric_hand_checks()?,
        decoder_masks(),
    ];
    let checks = families.iter().map(|f| f.checks).sum();
    let failures = families.iter().map(|f| f.failures).sum();
    Ok(VerifyReport { passed: failures == 0, checks, failures, families })
}

/// Marginals by summing over all `2^(n−1)` boundary patterns; segments past
/// `K` fold into the last one.
pub fn enumerate_marginals(p: &[f64], k: usize) -> Tensor {
    let n = p.len();
    let mut m = Tensor::zeros(n, k);
    for bits in 0u64..(1 << (n - 1)) {
        let weight: f64 = (0..n - 1).map(|l| if bits >> l & 1 == 1 { p[l] } else { 1.0 - p[l] }).product();
        let mut seg = 0usize;
        for i in 0..n {
            if i > 0 && bits >> (i - 1) & 1 == 1 {
                seg += 1;
            }
            let s = seg.min(k - 1);
            m.set(i, s, m.get(i, s) + weight);
        }
    }
    m
}

fn dp_oracle(rng: &mut ChaCha8Rng) -> Result<CheckFamily> {
    let mut f = Family::new("dp_oracle", 1e-10);
    for trial in 0..100 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=n);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let dp = segment_marginals(&p, k)?;
        let err = dp.matrix().max_abs_diff(&enumerate_marginals(&p, k));
        f.record(err, || format!("trial {trial} (n={n}, K={k}): abs err {err:.3e}"));
    }
    Ok(f.inner)
}

fn normalization(rng: &mut ChaCha8Rng) -> Result<CheckFamily> {
    let mut f = Family::new("marginal_normalization", 1e-12);
    for trial in 0..1000 {
        let n = rng.random_range(1..=40);
        let k = rng.random_range(1..=12);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = segment_marginals(&p, k)?;
        let err = (0..n).map(|i| (m.matrix().row_slice(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        f.record(err, || format!("instance {trial} (n={n}, K={k}): row sum off by {err:.3e}"));
    }
    Ok(f.inner)
}

fn attention_reductions(rng: &mut ChaCha8Rng) -> Result<CheckFamily> {
    let mut f = Family::new("attention_reductions", 1e-12);
    let (d, heads) = (8, 2);
    for trial in 0..100 {
        let n = rng.random_range(1..10);
        let mut params = ParameterSet::new();
        init_attention(&mut params, "att", d, heads, rng)?;
        let x = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let run = |kind, seg: Option<&[f64]>| encoder_attention(&x, &params, "att", heads, kind, seg);

        let bi = run(AttentionKind::Bi, None)?;
        let err = run(AttentionKind::Expected, Some(&vec![0.0; n]))?.max_abs_diff(&bi);
        f.record(err, || format!("instance {trial}: p=0 vs bi-directional {err:.3e}"));

        let b: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let err = run(AttentionKind::Expected, Some(&b))?.max_abs_diff(&run(AttentionKind::Hard, Some(&b))?);
        f.record(err, || format!("instance {trial}: binary p vs hard mask {err:.3e}"));

        let err = run(AttentionKind::Hard, Some(&vec![1.0; n]))?.max_abs_diff(&run(AttentionKind::Uni, None)?);
        f.record(err, || format!("instance {trial}: b=1 vs uni-directional {err:.3e}"));
    }
    Ok(f.inner)
}

/// Six frames, three words over four subwords, three target tokens.
fn tiny_instance(rng: &mut ChaCha8Rng) -> Result<(Model, Sentence)> {
    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn: 16,
        src_vocab: 6,
        tgt_vocab: 5,
        frame_dim: 8,
        ..Default::default()
    };
    let model = Model::new(config, rng)?;
    let frames = Tensor::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
    let sentence = Sentence {
        id: 0,
        features: FeatureSequence::new(frames, 40.0)?,
        subwords: vec![0, 3, 5, 1],
        spans: WordSpans::new(vec![(1, 1), (2, 3), (4, 4)], 4)?,
        target: vec![2, 0, 4],
        boundaries_ms: vec![80.0, 160.0, 240.0],
    };
    Ok((model, sentence))
}

fn gradients(rng: &mut ChaCha8Rng, perturbation: f64) -> Result<CheckFamily> {
    let tol = 1e-4;
    let mut f = Family::new("gradients", tol);
    let cfg = FdConfig { analytic_perturbation: perturbation, ..FdConfig::with_tol(tol) };
    let n = 6;

    for k in 1..=3 {
        // Keep Σp away from K so the absolute value stays differentiable.
        let mut params = ParameterSet::new();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        if (p.iter().sum::<f64>() - k as f64).abs() < 0.05 {
            continue;
        }
        params.insert("p", Tensor::column(&p))?;
        let report = finite_difference_check::<Error, _>(&params, &cfg, |g| {
            let pv = g.param("p")?;
            segment_count_loss_node(g, pv, k)
        })?;
        f.fd(&format!("L_num K={k}"), &report);
    }

    for k in 2..=3 {
        let mut params = ParameterSet::new();
        params.insert("p", Tensor::column(&(0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>()))?;
        params.insert("a", Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0)))?;
        params.insert("e", Tensor::from_fn(k, 8, |_, _| rng.random_range(-1.0..1.0)))?;
        let report = finite_difference_check::<Error, _>(&params, &cfg, |g| {
            let (pv, a, e) = (g.param("p")?, g.param("a")?, g.param("e")?);
            let m = segment_marginals_node(g, pv, k, Truncation::Absorb)?;
            let fs = expected_segment_representations_node(g, a, m)?;
            contrastive_loss_node(g, fs, e, 0.1)
        })?;
        f.fd(&format!("L_ctr K={k}"), &report);
    }

    let mut params = ParameterSet::new();
    init_attention(&mut params, "att", 8, 2, rng)?;
    params.insert("p", Tensor::column(&(0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>()))?;
    let x = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
    let proj = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
    let report = finite_difference_check::<Error, _>(&params, &cfg, |g| {
        let xv = g.input(x.clone())?;
        let pv = g.param("p")?;
        let beta = same_segment_node(g, pv)?;
        let (out, _) = self_attention(g, "att", 2, xv, &EncoderMask::Expected(beta))?;
        let w = g.input(proj.clone())?;
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod)?)
    })?;
    f.fd("expected attention", &report);

    let (model, s) = tiny_instance(rng)?;
    let noise = sample_noise(s.features.len(), model.config.noise_variance, rng)?;
    for k in 1..=3 {
        let report = finite_difference_check::<Error, _>(&model.params, &cfg, |g| {
            Ok(model.sentence_graph(g, &s, k, Some(&noise))?.losses.total)
        })?;
        f.fd(&format!("L_DiSeg k={k}"), &report);
    }
    Ok(f.inner)
}

fn metric_hand_checks() -> Result<CheckFamily> {
    let mut f = Family::new("metric_hand_checks", 0.1);
    let lat = |tau: &[f64], t: f64| latency_from_times(tau, t).ok_or_else(|| Error::Data("no latency".into()));
    let exact = |f: &mut Family, got: f64, want: f64, what: &str| {
        f.exact(got == want, || format!("{what}: got {got}, expected {want}"));
    };
    exact(&mut f, lat(&[1000.0], 1000.0)?.al, 1000.0, "AL single token");
    exact(&mut f, lat(&[500.0, 1000.0, 1500.0, 2000.0], 2000.0)?.al, 500.0, "AL perfectly paced");
    exact(&mut f, lat(&[500.0, 500.0, 1000.0], 1000.0)?.cw, 500.0, "CW consecutive wait");
    exact(&mut f, lat(&[2000.0, 2000.0], 2000.0)?.dal, 2000.0, "DAL clamped");
    exact(&mut f, corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4]], 4)?, 100.0, "BLEU identical");
    exact(&mut f, corpus_bleu(&[vec![1, 2, 3, 5]], &[vec![1, 2, 3, 4]], 4)?, 0.0, "BLEU no 4-gram");

    let os = over_segmentation(34.9, 32.3).unwrap_or(f64::NAN);
    f.record((os + 7.4).abs(), || format!("OS(34.9, 32.3) = {os}, expected -7.4"));
    let rv = r_value(0.323, os / 100.0);
    f.record((rv - 44.6).abs(), || format!("R-value(34.9, 32.3) = {rv}, expected 44.6"));
    let os = over_segmentation(18.2, 54.1).unwrap_or(f64::NAN);
    let err = if (195.0..=198.5).contains(&os) { 0.0 } else { f64::INFINITY };
    f.record(err, || format!("OS(18.2, 54.1) = {os}, expected about +196.4"));
    Ok(f.inner)
}

fn decoder_masks() -> CheckFamily {
    let mut f = Family::new("decoder_masks", 0.0);
    let bits = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<bool>>();
    for (b, t, k, want) in [
        (bits(&[1, 1, 1]), 2, 1, 2),
        (bits(&[0, 1, 0, 1]), 1, 2, 4),
        (bits(&[0, 1, 0, 0]), 2, 2, 4),
        (bits(&[1, 0]), 1, K_INF, 2),
    ] {
        let got = g_of_t(&b, t, k);
        f.exact(got == want, || format!("g({t}) with k={k} on {b:?}: got {got}, expected {want}"));
    }
    let b = bits(&[0, 1, 0, 1, 1, 0, 1]);
    for k in 1..=4 {
        let m = wait_seg_decoder_mask(&b, k, 5);
        for t in 0..5 {
            let limit = g_of_t(&b, t + 1, k);
            let ok = (0..b.len()).all(|j| m.allowed(t, j) == (j < limit));
            f.exact(ok, || format!("wait-seg mask row {t} at k={k} is not the prefix 1..{limit}"));
        }
    }
    f.inner
}
