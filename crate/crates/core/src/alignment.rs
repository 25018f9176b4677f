//! Feature-to-segment marginals, representation maps and the contrastive
//! loss between expected segment representations and word embeddings.
//!
//! `M[i][k]` is the probability that frame `i` falls into segment `k`:
//!
//! ```text
//! M[1][1] = 1
//! M[i][k] = M[i-1][k-1]·p_{i-1} + M[i-1][k]·(1 - p_{i-1})     k < K
//! M[i][K] = M[i-1][K-1]·p_{i-1} + M[i-1][K]                    (absorbing)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// How mass that would move past segment `K` is handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Overflow folds into the last segment; rows sum to 1.
    #[default]
    Absorb,
    /// Overflow is dropped; rows sum to at most 1.
    Discard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMarginals {
    m: Tensor,
    truncation: Truncation,
}

impl SegmentMarginals {
    /// `|a| × K` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn frames(&self) -> usize {
        self.m.rows()
    }

    pub fn segments(&self) -> usize {
        self.m.cols()
    }

    /// `Σ_k k·M[i][k]` with 1-based `k`.
    pub fn expected_index(&self) -> Vec<f64> {
        (0..self.m.rows())
            .map(|i| self.m.row_slice(i).iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum())
            .collect()
    }
}

/// Inclusive 1-based subword ranges, one per word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpans(Vec<(usize, usize)>);

impl WordSpans {
    /// Validates that the spans tile `1..=subwords` in order.
    pub fn new(spans: Vec<(usize, usize)>, subwords: usize) -> Result<Self> {
        if spans.is_empty() {
            return Err(Error::InvalidSpans("no words".into()));
        }
        let mut next = 1;
        for (k, &(l, r)) in spans.iter().enumerate() {
            if l != next {
                let what = if l > next { "gap" } else { "overlap" };
                return Err(Error::InvalidSpans(format!("{what} before word {}: expected start {next}, got {l}", k + 1)));
            }
            if r < l {
                return Err(Error::InvalidSpans(format!("word {} ends ({r}) before it starts ({l})", k + 1)));
            }
            next = r + 1;
        }
        if next != subwords + 1 {
            return Err(Error::InvalidSpans(format!("spans cover {} subwords, sequence has {subwords}", next - 1)));
        }
        Ok(WordSpans(spans))
    }

    /// Every word is one subword.
    pub fn identity(words: usize) -> Result<Self> {
        WordSpans::new((1..=words).map(|i| (i, i)).collect(), words)
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn words(&self) -> usize {
        self.0.len()
    }

    pub fn subwords(&self) -> usize {
        self.0.last().map_or(0, |s| s.1)
    }

    /// Word index (0-based) of each subword (0-based).
    pub fn word_of_subword(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.subwords());
        for (k, &(l, r)) in self.0.iter().enumerate() {
            out.extend(std::iter::repeat_n(k, r - l + 1));
        }
        out
    }

    /// Last subword (1-based) of each word.
    pub fn ends(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.1).collect()
    }

    /// `K × |x|` matrix whose rows average each word's subwords.
    pub fn averaging_matrix(&self) -> Tensor {
        let mut a = Tensor::zeros(self.words(), self.subwords());
        for (k, &(l, r)) in self.0.iter().enumerate() {
            let w = 1.0 / (r - l + 1) as f64;
            for j in l..=r {
                a.set(k, j - 1, w);
            }
        }
        a
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("segment count K must be at least 1".into()));
    }
    Ok(())
}

pub fn segment_marginals(p: &[f64], k: usize) -> Result<SegmentMarginals> {
    segment_marginals_with(p, k, Truncation::Absorb)
}

pub fn segment_marginals_with(p: &[f64], k: usize, truncation: Truncation) -> Result<SegmentMarginals> {
    check_k(k)?;
    if p.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    let n = p.len();
    let mut m = Tensor::zeros(n, k);
    m.set(0, 0, 1.0);
    for i in 1..n {
        let pi = p[i - 1];
        for s in 0..k {
            let from_prev = if s > 0 { m.get(i - 1, s - 1) * pi } else { 0.0 };
            let stay = if s == k - 1 && truncation == Truncation::Absorb {
                m.get(i - 1, s)
            } else {
                m.get(i - 1, s) * (1.0 - pi)
            };
            m.set(i, s, from_prev + stay);
        }
    }
    Ok(SegmentMarginals { m, truncation })
}

/// Graph version of [`segment_marginals_with`]; `p` is an `n × 1` node.
/// Each step is `M_i = M_{i-1} + p_{i-1} · M_{i-1}(S - I)` where `S` shifts
/// mass one segment to the right.
pub fn segment_marginals_node(g: &mut Graph<'_>, p: Var, k: usize, truncation: Truncation) -> Result<Var> {
    check_k(k)?;
    let n = g.value(p).len();
    if n == 0 {
        return Err(Error::EmptyFeatures);
    }
    let p = if g.value(p).rows() == 1 { g.transpose(p)? } else { p };
    let mut step = Tensor::zeros(k, k);
    for s in 0..k {
        if s + 1 < k {
            step.set(s, s + 1, 1.0);
            step.set(s, s, -1.0);
        } else if truncation == Truncation::Discard {
            step.set(s, s, -1.0);
        }
    }
    let step = g.input(step)?;
    let mut first = Tensor::zeros(1, k);
    first.set(0, 0, 1.0);
    let mut rows = vec![g.input(first)?];
    for i in 1..n {
        let mut pick = Tensor::zeros(1, n);
        pick.set(0, i - 1, 1.0);
        let pick = g.input(pick)?;
        let pi = g.matmul(pick, p)?;
        let prev = rows[i - 1];
        let moved = g.matmul(prev, step)?;
        let delta = g.mul(moved, pi)?;
        rows.push(g.add(prev, delta)?);
    }
    Ok(g.stack_rows(&rows)?)
}

/// `f^s = Mᵀ A`, one row per segment.
pub fn expected_segment_representations(features: &Tensor, marginals: &SegmentMarginals) -> Result<Tensor> {
    if features.rows() != marginals.frames() {
        return Err(AutodiffError::shape("expected_segment_representations", features.shape(), marginals.matrix().shape()).into());
    }
    Ok(marginals.matrix().transpose().matmul(features)?)
}

pub fn expected_segment_representations_node(g: &mut Graph<'_>, features: Var, marginals: Var) -> Result<Var> {
    let mt = g.transpose(marginals)?;
    Ok(g.matmul(mt, features)?)
}

/// `f^t_k` = mean of the embedding rows of word `k`.
pub fn subword_to_word(embeddings: &Tensor, spans: &WordSpans) -> Result<Tensor> {
    if embeddings.rows() != spans.subwords() {
        return Err(Error::InvalidSpans(format!(
            "spans cover {} subwords, embeddings have {} rows",
            spans.subwords(),
            embeddings.rows()
        )));
    }
    Ok(spans.averaging_matrix().matmul(embeddings)?)
}

pub fn subword_to_word_node(g: &mut Graph<'_>, embeddings: Var, spans: &WordSpans) -> Result<Var> {
    if g.value(embeddings).rows() != spans.subwords() {
        return Err(Error::InvalidSpans(format!(
            "spans cover {} subwords, embeddings have {} rows",
            spans.subwords(),
            g.value(embeddings).rows()
        )));
    }
    let avg = g.input(spans.averaging_matrix())?;
    Ok(g.matmul(avg, embeddings)?)
}

fn check_contrastive(fs: [usize; 2], ft: [usize; 2], tau: f64) -> Result<()> {
    if fs != ft || fs[0] == 0 {
        return Err(AutodiffError::shape("contrastive_loss", fs, ft).into());
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `Σ_k -log softmax_n(cos(f^s_k, f^t_n) / τ)[k]`.
pub fn contrastive_loss(fs: &Tensor, ft: &Tensor, tau: f64) -> Result<f64> {
    check_contrastive(fs.shape(), ft.shape(), tau)?;
    let norm = |t: &Tensor, which: &'static str| -> Result<Vec<f64>> {
        (0..t.rows())
            .map(|r| {
                let n = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(AutodiffError::ZeroNorm { operand: which, row: r }.into())
                }
            })
            .collect()
    };
    let (ns, nt) = (norm(fs, "left")?, norm(ft, "right")?);
    let k = fs.rows();
    let mut total = 0.0;
    for a in 0..k {
        let logits: Vec<f64> = (0..k)
            .map(|b| {
                let dot: f64 = fs.row_slice(a).iter().zip(ft.row_slice(b)).map(|(x, y)| x * y).sum();
                dot / (ns[a] * nt[b]) / tau
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[a];
    }
    Ok(total)
}

pub fn contrastive_loss_node(g: &mut Graph<'_>, fs: Var, ft: Var, tau: f64) -> Result<Var> {
    check_contrastive(g.value(fs).shape(), g.value(ft).shape(), tau)?;
    let k = g.value(fs).rows();
    let cos = g.cosine_similarity(fs, ft)?;
    let logits = g.scale(cos, 1.0 / tau)?;
    let targets: Vec<usize> = (0..k).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{evaluate, finite_difference_check, FdConfig, ParameterSet};

    /// Enumerates every boundary vector over the first `n - 1` frames.
    fn brute_force(p: &[f64], k: usize) -> Tensor {
        let n = p.len();
        let mut m = Tensor::zeros(n, k);
        for bits in 0u32..(1 << (n - 1)) {
            let mut weight = 1.0;
            for (l, pl) in p.iter().enumerate().take(n - 1) {
                weight *= if bits >> l & 1 == 1 { *pl } else { 1.0 - pl };
            }
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

    fn random_p(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn no_boundaries_stay_in_first_segment() {
        let m = segment_marginals(&[0.0; 5], 3).unwrap();
        for i in 0..5 {
            assert_eq!(m.matrix().row_slice(i), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn first_frame_in_first_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..5 {
            let m = segment_marginals(&random_p(&mut rng, 4), k).unwrap();
            assert_eq!(m.matrix().get(0, 0), 1.0);
            assert!(m.matrix().row_slice(0)[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_segments_rejected() {
        assert!(matches!(segment_marginals(&[0.5], 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn six_frames_three_segments_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_p(&mut rng, 6);
        let m = segment_marginals(&p, 3).unwrap();
        assert!(m.matrix().max_abs_diff(&brute_force(&p, 3)) <= 1e-10);
    }

    #[test]
    fn dp_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let k = rng.random_range(1..=n + 1);
            let p = random_p(&mut rng, n);
            let m = segment_marginals(&p, k).unwrap();
            let err = m.matrix().max_abs_diff(&brute_force(&p, k));
            assert!(err <= 1e-10, "n={n} k={k} err={err}");
        }
    }

    #[test]
    fn discard_leaks_mass() {
        let p = [0.5, 0.5, 0.5, 0.5];
        let m = segment_marginals_with(&p, 2, Truncation::Discard).unwrap();
        let last: f64 = m.matrix().row_slice(3).iter().sum();
        assert!(last < 1.0);
        // Without overflow the two rules agree.
        let a = segment_marginals_with(&p, 5, Truncation::Discard).unwrap();
        let b = segment_marginals_with(&p, 5, Truncation::Absorb).unwrap();
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn graph_dp_matches_pure_dp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trunc in [Truncation::Absorb, Truncation::Discard] {
            for _ in 0..20 {
                let n = rng.random_range(1..=12);
                let k = rng.random_range(1..=6);
                let p = random_p(&mut rng, n);
                let params = ParameterSet::new();
                let out = evaluate::<Error, _>(&params, |g| {
                    let pv = g.input(Tensor::column(&p))?;
                    segment_marginals_node(g, pv, k, trunc)
                })
                .unwrap();
                let pure = segment_marginals_with(&p, k, trunc).unwrap();
                assert!(out.max_abs_diff(pure.matrix()) <= 1e-12);
            }
        }
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(2..=7);
            let k = rng.random_range(1..=4);
            let mut params = ParameterSet::new();
            params.insert("p", Tensor::column(&random_p(&mut rng, n))).unwrap();
            let w = Tensor::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
            let report = finite_difference_check::<Error, _>(&params, &FdConfig::default(), |g| {
                let p = g.param("p")?;
                let m = segment_marginals_node(g, p, k, Truncation::Absorb)?;
                let wv = g.input(w.clone())?;
                let prod = g.mul(m, wv)?;
                Ok(g.sum(prod)?)
            })
            .unwrap();
            assert!(report.passed, "{:?}", report.per_param);
        }
    }

    #[test]
    fn representation_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let hard = segment_marginals(&[1.0, 0.0, 0.0], 2).unwrap();
        let fs = expected_segment_representations(&a, &hard).unwrap();
        assert_eq!(fs.row_vecs(), vec![vec![1.0, 2.0], vec![8.0, 10.0]]);

        let single = segment_marginals(&[0.0; 3], 2).unwrap();
        let fs = expected_segment_representations(&a, &single).unwrap();
        assert_eq!(fs.row_vecs(), vec![vec![9.0, 12.0], vec![0.0, 0.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_p(&mut rng, 3);
        let m = segment_marginals(&p, 2).unwrap();
        let fs = expected_segment_representations(&a, &m).unwrap();
        for k in 0..2 {
            for c in 0..2 {
                let direct: f64 = (0..3).map(|i| m.matrix().get(i, k) * a.get(i, c)).sum();
                assert!((fs.get(k, c) - direct).abs() <= 1e-14);
            }
        }
        assert!(expected_segment_representations(&Tensor::zeros(2, 2), &m).is_err());
    }

    #[test]
    fn subword_averaging() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![-1.0, 5.0]]).unwrap();
        let id = WordSpans::identity(3).unwrap();
        assert_eq!(subword_to_word(&e, &id).unwrap(), e);

        let spans = WordSpans::new(vec![(1, 2), (3, 3)], 3).unwrap();
        let ft = subword_to_word(&e, &spans).unwrap();
        assert_eq!(ft.row_vecs(), vec![vec![2.0, 1.0], vec![-1.0, 5.0]]);

        let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        let one = WordSpans::new(vec![(1, 2)], 2).unwrap();
        assert_eq!(subword_to_word(&two, &one).unwrap().row_vecs(), vec![vec![2.0, 1.0]]);
        assert_eq!(spans.word_of_subword(), vec![0, 0, 1]);
    }

    #[test]
    fn malformed_spans_rejected() {
        assert!(matches!(WordSpans::new(vec![(1, 1), (3, 3)], 3), Err(Error::InvalidSpans(m)) if m.contains("gap")));
        assert!(matches!(WordSpans::new(vec![(1, 2), (2, 3)], 3), Err(Error::InvalidSpans(m)) if m.contains("overlap")));
        assert!(WordSpans::new(vec![(1, 2)], 3).is_err());
        assert!(WordSpans::new(vec![(2, 3)], 3).is_err());
        assert!(WordSpans::new(vec![], 0).is_err());
        let spans = WordSpans::new(vec![(1, 2)], 2).unwrap();
        assert!(subword_to_word(&Tensor::zeros(3, 2), &spans).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let one = Tensor::row(&[0.3, -0.2]);
        assert_eq!(contrastive_loss(&one, &Tensor::row(&[1.0, 4.0]), 0.1).unwrap(), 0.0);

        let eye = Tensor::identity(2);
        let loss = contrastive_loss(&eye, &eye, 0.1).unwrap();
        let term = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((term - 4.54e-5).abs() < 1e-7);
        assert!((loss - 2.0 * term).abs() < 1e-12);
        assert!((loss - 9.08e-5).abs() < 1e-7);

        let params = ParameterSet::new();
        let graph = evaluate::<Error, _>(&params, |g| {
            let a = g.input(eye.clone())?;
            let b = g.input(eye.clone())?;
            contrastive_loss_node(g, a, b, 0.1)
        })
        .unwrap();
        assert!((graph.item().unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::identity(2);
        assert!(matches!(contrastive_loss(&a, &b, 0.1), Err(Error::Autodiff(AutodiffError::ZeroNorm { .. }))));
        assert!(contrastive_loss(&b, &Tensor::identity(3), 0.1).is_err());
        assert!(matches!(contrastive_loss(&b, &b, 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = rng.random_range(1..=5);
            let d = rng.random_range(2..=6);
            let mut params = ParameterSet::new();
            params.insert("fs", Tensor::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0))).unwrap();
            let ft = Tensor::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
            let report = finite_difference_check::<Error, _>(&params, &FdConfig::default(), |g| {
                let fs = g.param("fs")?;
                let ftv = g.input(ft.clone())?;
                contrastive_loss_node(g, fs, ftv, DEFAULT_TEMPERATURE)
            })
            .unwrap();
            assert!(report.passed, "{:?}", report.per_param);
        }
    }

    #[test]
    fn end_to_end_gradient_wrt_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let k = rng.random_range(2..=4);
            let n = rng.random_range(k..=9);
            let d = 4;
            let mut params = ParameterSet::new();
            params.insert("p", Tensor::column(&(0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>())).unwrap();
            let a = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let emb = Tensor::from_fn(k + 1, d, |_, _| rng.random_range(-1.0..1.0));
            let spans = WordSpans::new((1..k).map(|i| (i, i)).chain([(k, k + 1)]).collect(), k + 1).unwrap();
            let report = finite_difference_check::<Error, _>(&params, &FdConfig::with_tol(1e-4), |g| {
                let p = g.param("p")?;
                let m = segment_marginals_node(g, p, k, Truncation::Absorb)?;
                let av = g.input(a.clone())?;
                let fs = expected_segment_representations_node(g, av, m)?;
                let ev = g.input(emb.clone())?;
                let ft = subword_to_word_node(g, ev, &spans)?;
                contrastive_loss_node(g, fs, ft, DEFAULT_TEMPERATURE)
            })
            .unwrap();
            assert!(report.passed, "{:?}", report.per_param);
        }
    }

    proptest! {
        #[test]
        fn rows_normalized_and_index_monotone(p in prop::collection::vec(0.0f64..=1.0, 1..40), k in 1usize..8) {
            let m = segment_marginals(&p, k).unwrap();
            for i in 0..p.len() {
                let row = m.matrix().row_slice(i);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let idx = m.expected_index();
            for w in idx.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
        }

        #[test]
        fn contrastive_positive_for_several_words(
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs = Tensor::from_fn(k, 3, |_, _| rng.random_range(0.1..1.0));
            let ft = Tensor::from_fn(k, 3, |_, _| rng.random_range(0.1..1.0));
            prop_assert!(contrastive_loss(&fs, &ft, DEFAULT_TEMPERATURE).unwrap() > 0.0);
        }
    }
}
