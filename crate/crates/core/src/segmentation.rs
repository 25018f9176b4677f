//! Segmentation probabilities, hard decisions, and the segment-count loss.
//!
//! Each frame `a_i` gets a probability `p_i = sigmoid(FFN(a_i) + η_i)` of
//! closing the current segment. `η_i ~ N(0, n)` is added only while
//! training; it pushes `p` toward 0 or 1 so that the relaxed training
//! behaviour matches thresholded inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParameterSet, Tensor, Var};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Default variance of the pre-sigmoid training noise.
pub const DEFAULT_NOISE_VARIANCE: f64 = 1.0;

const PREFIX: &str = "seg";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-sentence segmentation quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationState {
    pub p: Vec<f64>,
    pub b: Vec<bool>,
    pub k_target: usize,
    pub noise_variance: f64,
}

impl SegmentationState {
    pub fn new(p: Vec<f64>, k_target: usize, noise_variance: f64) -> Result<Self> {
        if k_target == 0 {
            return Err(Error::InvalidConfig("segment target K must be positive".into()));
        }
        if !(noise_variance >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise variance must be non-negative, got {noise_variance}")));
        }
        if let Some(bad) = p.iter().find(|v| !(PROB_EPS..=1.0 - PROB_EPS).contains(*v)) {
            return Err(Error::InvalidConfig(format!("segmentation probability {bad} outside [ε, 1-ε]")));
        }
        let b = hard_decisions(&p);
        Ok(SegmentationState { p, b, k_target, noise_variance })
    }

    pub fn segment_count(&self) -> usize {
        self.b.iter().filter(|&&x| x).count()
    }
}

/// Registers the segmenter FFN: one tanh hidden layer of width `hidden`
/// mapping a `dim`-wide frame to a scalar logit.
pub fn init_segmenter<R: Rng>(params: &mut ParameterSet, dim: usize, hidden: usize, rng: &mut R) -> Result<()> {
    params.insert_normal(&format!("{PREFIX}.w1"), dim, hidden, (1.0 / dim as f64).sqrt(), rng)?;
    params.insert(format!("{PREFIX}.b1"), Tensor::zeros(1, hidden))?;
    params.insert_normal(&format!("{PREFIX}.w2"), hidden, 1, (1.0 / hidden as f64).sqrt(), rng)?;
    params.insert(format!("{PREFIX}.b2"), Tensor::zeros(1, 1))?;
    Ok(())
}

/// Pre-sigmoid logits `FFN(a_i)` as an `n × 1` column.
pub fn segmenter_logits(g: &mut Graph<'_>, features: Var) -> Result<Var> {
    let w1 = g.param(&format!("{PREFIX}.w1"))?;
    let b1 = g.param(&format!("{PREFIX}.b1"))?;
    let w2 = g.param(&format!("{PREFIX}.w2"))?;
    let b2 = g.param(&format!("{PREFIX}.b2"))?;
    let h = g.matmul(features, w1)?;
    let h = g.add(h, b1)?;
    let h = g.tanh(h)?;
    let out = g.matmul(h, w2)?;
    Ok(g.add(out, b2)?)
}

/// `p = clamp(sigmoid(FFN(a) + noise))`; `noise` is an `n × 1` constant.
pub fn probabilities_node(g: &mut Graph<'_>, features: Var, noise: Option<&Tensor>) -> Result<Var> {
    if g.value(features).rows() == 0 {
        return Err(Error::EmptyFeatures);
    }
    let mut logits = segmenter_logits(g, features)?;
    if let Some(noise) = noise {
        let eta = g.input(noise.clone())?;
        logits = g.add(logits, eta)?;
    }
    let p = g.sigmoid(logits)?;
    Ok(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?)
}

/// `n` draws from `N(0, variance)` as an `n × 1` column.
pub fn sample_noise<R: Rng>(n: usize, variance: f64, rng: &mut R) -> Result<Tensor> {
    if variance == 0.0 {
        return Ok(Tensor::zeros(n, 1));
    }
    let normal = Normal::new(0.0, variance.sqrt())
        .map_err(|e| Error::InvalidConfig(format!("noise variance {variance}: {e}")))?;
    Ok(Tensor::column(&(0..n).map(|_| normal.sample(rng)).collect::<Vec<_>>()))
}

/// Segmentation probabilities for every frame of `features`.
///
/// In [`Mode::Infer`] no noise is applied whatever `noise_variance` is.
pub fn segmentation_probabilities(
    features: &Tensor,
    params: &ParameterSet,
    noise_variance: f64,
    mode: Mode,
    seed: u64,
) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::EmptyFeatures);
    }
    if !(noise_variance >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise variance must be non-negative, got {noise_variance}")));
    }
    let noise = match mode {
        Mode::Train => Some(sample_noise(features.rows(), noise_variance, &mut ChaCha8Rng::seed_from_u64(seed))?),
        Mode::Infer => None,
    };
    let mut g = Graph::new(params);
    let a = g.input(features.clone())?;
    let p = probabilities_node(&mut g, a, noise.as_ref())?;
    Ok(g.value(p).data().to_vec())
}

/// `b_i = 1` iff `p_i ≥ 0.5`.
pub fn hard_decisions(p: &[f64]) -> Vec<bool> {
    p.iter().map(|&v| v >= 0.5).collect()
}

/// Max-pool kernel `max(1, ⌊|a| / K⌋)`.
pub fn pool_kernel(frames: usize, k: usize) -> usize {
    (frames / k.max(1)).max(1)
}

/// `|Σ p − K| + |Σ MaxPool(p, w) − K|` with non-overlapping windows.
pub fn segment_count_loss_node(g: &mut Graph<'_>, p: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::InvalidConfig("segment target K must be positive".into()));
    }
    let n = g.value(p).len();
    if n == 0 {
        return Err(Error::EmptyFeatures);
    }
    let w = pool_kernel(n, k);
    let expected = g.sum(p)?;
    let d1 = g.offset(expected, -(k as f64))?;
    let t1 = g.abs(d1)?;
    let pooled = g.max_pool1d(p, w, w)?;
    let pooled_sum = g.sum(pooled)?;
    let d2 = g.offset(pooled_sum, -(k as f64))?;
    let t2 = g.abs(d2)?;
    Ok(g.add(t1, t2)?)
}

pub fn segment_count_loss(p: &[f64], k: usize) -> Result<f64> {
    let params = ParameterSet::new();
    let mut g = Graph::new(&params);
    let pv = g.input(Tensor::column(p))?;
    let loss = segment_count_loss_node(&mut g, pv, k)?;
    Ok(g.scalar(loss)?)
}
