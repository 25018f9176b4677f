//! Segmented self-attention and its expected (differentiable) relaxation.
//!
//! At inference a frame attends to every frame of its own segment and of
//! all earlier segments. During training the hard mask is replaced by
//! `β_ij`, the probability that frame `j` is not in a later segment than
//! frame `i`, and the soft attention is reweighted by it:
//!
//! ```text
//! β_ij = Π_{l=i}^{j-1} (1 - p_l)   for i < j,   1 otherwise
//! γ_ij = α_ij β_ij / Σ_l α_il β_il
//! ```

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Graph, Mask, ParameterSet, Tensor, Var};
use crate::{Error, Result};

/// Which mask or reweighting the encoder self-attention applies.
#[derive(Clone, Debug)]
pub enum EncoderMask {
    /// Reweight by the same-segment probabilities `β` (an `n × n` node).
    Expected(Var),
    /// Hard segmented mask from binary decisions.
    Hard(Mask),
    /// Causal mask.
    Uni,
    /// No mask.
    Bi,
}

/// Attention variants selectable through [`encoder_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Expected,
    Hard,
    Uni,
    Bi,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Expected => "expected",
            AttentionKind::Hard => "hard",
            AttentionKind::Uni => "uni",
            AttentionKind::Bi => "bi",
        }
    }
}

/// `β` computed with prefix sums of `log(1 - p)`. Entries with `p_l = 1`
/// exactly are tracked separately so that spans crossing them give 0.
pub fn same_segment_probabilities(p: &[f64]) -> Tensor {
    let n = p.len();
    let mut log_prefix = vec![0.0; n + 1];
    let mut cut_prefix = vec![0usize; n + 1];
    for (l, &pl) in p.iter().enumerate() {
        let (lg, cut) = if pl >= 1.0 { (0.0, 1) } else { ((1.0 - pl).ln(), 0) };
        log_prefix[l + 1] = log_prefix[l] + lg;
        cut_prefix[l + 1] = cut_prefix[l] + cut;
    }
    Tensor::from_fn(n, n, |i, j| {
        if i >= j {
            1.0
        } else if cut_prefix[j] > cut_prefix[i] {
            0.0
        } else {
            (log_prefix[j] - log_prefix[i]).exp()
        }
    })
}

/// Graph version of [`same_segment_probabilities`] for `p` strictly inside
/// `(0, 1)`, built from constant matrix products so it differentiates
/// through the standard op set.
pub fn same_segment_node(g: &mut Graph<'_>, p: Var) -> Result<Var> {
    let n = g.value(p).len();
    let p = if g.value(p).rows() == 1 { g.transpose(p)? } else { p };
    let q = g.one_minus(p)?;
    let log_q = g.log(q)?;
    // c_j = Σ_{l<j} log(1 - p_l)
    let strict_lower = g.input(Tensor::from_fn(n, n, |j, l| if l < j { 1.0 } else { 0.0 }))?;
    let c = g.matmul(strict_lower, log_q)?;
    let ones_col = g.input(Tensor::filled(n, 1, 1.0))?;
    let ones_row = g.input(Tensor::filled(1, n, 1.0))?;
    let c_row = g.transpose(c)?;
    let by_col = g.matmul(ones_col, c_row)?; // (i, j) = c_j
    let by_row = g.matmul(c, ones_row)?; // (i, j) = c_i
    let diff = g.sub(by_col, by_row)?;
    let upper = g.input(Tensor::from_fn(n, n, |i, j| if i < j { 1.0 } else { 0.0 }))?;
    let masked = g.mul(diff, upper)?;
    Ok(g.exp(masked)?)
}

/// `γ = normalize_rows(α ⊙ β)`.
pub fn expected_segmented_attention(alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if alpha.shape() != beta.shape() {
        return Err(crate::autodiff::AutodiffError::ShapeMismatch {
            op: "expected_segmented_attention",
            left: alpha.shape().to_vec(),
            right: beta.shape().to_vec(),
        }
        .into());
    }
    let mut out = Tensor::zeros(alpha.rows(), alpha.cols());
    for i in 0..alpha.rows() {
        let total: f64 = (0..alpha.cols()).map(|j| alpha.get(i, j) * beta.get(i, j)).sum();
        assert!(total > 0.0, "row {i} of α·β has zero mass");
        for j in 0..alpha.cols() {
            out.set(i, j, alpha.get(i, j) * beta.get(i, j) / total);
        }
    }
    Ok(out)
}

/// 1-based segment id of every frame: `1 + Σ_{l<i} b_l`.
pub fn segment_ids(b: &[bool]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(b.len());
    let mut current = 1;
    for &cut in b {
        ids.push(current);
        if cut {
            current += 1;
        }
    }
    ids
}

/// `allowed(i, j) = segment(j) ≤ segment(i)`.
pub fn hard_segment_mask(b: &[bool]) -> Mask {
    let ids = segment_ids(b);
    Mask::from_fn(b.len(), b.len(), |i, j| ids[j] <= ids[i])
}

/// Registers a multi-head self-attention block of width `d_model`.
pub fn init_attention<R: Rng>(params: &mut ParameterSet, prefix: &str, d_model: usize, heads: usize, rng: &mut R) -> Result<()> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::InvalidConfig(format!("{heads} heads do not divide d_model {d_model}")));
    }
    let dh = d_model / heads;
    let std_in = (1.0 / d_model as f64).sqrt();
    let std_out = (1.0 / d_model as f64).sqrt();
    for h in 0..heads {
        for w in ["wq", "wk", "wv"] {
            params.insert_normal(&format!("{prefix}.h{h}.{w}"), d_model, dh, std_in, rng)?;
        }
        params.insert_normal(&format!("{prefix}.h{h}.wo"), dh, d_model, std_out, rng)?;
    }
    params.insert(format!("{prefix}.bo"), Tensor::zeros(1, d_model))?;
    Ok(())
}

/// Multi-head scaled dot-product attention of `query` over `memory`.
///
/// `mask` restricts keys; `reweight` (an `nq × nk` node) applies the
/// expected-segment reweighting shared by every head. Returns the output
/// and the per-head attention weights.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    prefix: &str,
    heads: usize,
    query: Var,
    memory: Var,
    mask: Option<&Mask>,
    reweight: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d_model = g.value(query).cols();
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = None;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = g.param(&format!("{prefix}.h{h}.wq"))?;
        let wk = g.param(&format!("{prefix}.h{h}.wk"))?;
        let wv = g.param(&format!("{prefix}.h{h}.wv"))?;
        let wo = g.param(&format!("{prefix}.h{h}.wo"))?;
        let q = g.matmul(query, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, mask, reweight)?;
        weights.push(attn);
        let ctx = g.matmul(attn, v)?;
        let proj = g.matmul(ctx, wo)?;
        out = Some(match out {
            None => proj,
            Some(acc) => g.add(acc, proj)?,
        });
    }
    let bo = g.param(&format!("{prefix}.bo"))?;
    let out = g.add(out.expect("at least one head"), bo)?;
    Ok((out, weights))
}

/// Encoder self-attention under one of the four masking schemes.
pub fn self_attention(g: &mut Graph<'_>, prefix: &str, heads: usize, x: Var, mode: &EncoderMask) -> Result<(Var, Vec<Var>)> {
    let n = g.value(x).rows();
    match mode {
        EncoderMask::Expected(beta) => multi_head_attention(g, prefix, heads, x, x, None, Some(*beta)),
        EncoderMask::Hard(mask) => multi_head_attention(g, prefix, heads, x, x, Some(mask), None),
        EncoderMask::Uni => multi_head_attention(g, prefix, heads, x, x, Some(&Mask::causal(n)), None),
        EncoderMask::Bi => multi_head_attention(g, prefix, heads, x, x, None, None),
    }
}

/// Context matrix of one self-attention block over `features`.
///
/// `seg` carries `p` for [`AttentionKind::Expected`] and the 0/1 decisions
/// for [`AttentionKind::Hard`]; the other kinds ignore it.
pub fn encoder_attention(
    features: &Tensor,
    params: &ParameterSet,
    prefix: &str,
    heads: usize,
    kind: AttentionKind,
    seg: Option<&[f64]>,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = g.input(features.clone())?;
    let mode = match (kind, seg) {
        (AttentionKind::Expected, Some(p)) => {
            let beta = g.input(same_segment_probabilities(p))?;
            EncoderMask::Expected(beta)
        }
        (AttentionKind::Hard, Some(b)) => {
            let b: Vec<bool> = b.iter().map(|&v| v >= 0.5).collect();
            EncoderMask::Hard(hard_segment_mask(&b))
        }
        (AttentionKind::Expected | AttentionKind::Hard, None) => {
            return Err(Error::MissingSegInfo { mode: kind.name() })
        }
        (AttentionKind::Uni, _) => EncoderMask::Uni,
        (AttentionKind::Bi, _) => EncoderMask::Bi,
    };
    let (out, _) = self_attention(&mut g, prefix, heads, x, &mode)?;
    Ok(g.value(out).clone())
}

/// Writes attention rows as CSV: `sentence_id,layer,head,row,w_1,...,w_n`.
pub fn write_attention_csv<W: Write>(out: &mut W, sentence_id: &str, layer: usize, head: usize, weights: &Tensor) -> std::io::Result<()> {
    for r in 0..weights.rows() {
        write!(out, "{sentence_id},{layer},{head},{}", r + 1)?;
        for v in weights.row_slice(r) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, FdConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_beta(p: &[f64]) -> Tensor {
        Tensor::from_fn(p.len(), p.len(), |i, j| if i >= j { 1.0 } else { p[i..j].iter().map(|v| 1.0 - v).product() })
    }

    fn softmax_rows(x: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let max = (0..x.cols()).filter(|&j| allowed(i, j)).map(|j| x.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..x.cols()).filter(|&j| allowed(i, j)).map(|j| (x.get(i, j) - max).exp()).sum();
            for j in 0..x.cols() {
                if allowed(i, j) {
                    out.set(i, j, (x.get(i, j) - max).exp() / total);
                }
            }
        }
        out
    }

    #[test]
    fn beta_examples() {
        let beta = same_segment_probabilities(&[0.0; 4]);
        assert!(beta.data().iter().all(|&v| v == 1.0));
        let beta = same_segment_probabilities(&[0.5, 0.5, 0.5]);
        assert_eq!(beta.get(0, 2), 0.25);
        let beta = same_segment_probabilities(&[0.3, 0.9, 0.1, 0.7]);
        for i in 0..4 {
            for j in 0..=i {
                assert_eq!(beta.get(i, j), 1.0);
            }
        }
    }

    #[test]
    fn beta_log_space_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=64 {
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
            assert!(same_segment_probabilities(&p).max_abs_diff(&direct_beta(&p)) <= 1e-12);
        }
    }

    #[test]
    fn beta_graph_matches_log_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..0.99)).collect();
        let params = ParameterSet::new();
        let mut g = Graph::new(&params);
        let pv = g.input(Tensor::column(&p)).unwrap();
        let beta = same_segment_node(&mut g, pv).unwrap();
        assert!(g.value(beta).max_abs_diff(&same_segment_probabilities(&p)) < 1e-14);
    }

    #[test]
    fn beta_with_exact_cuts() {
        let beta = same_segment_probabilities(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(beta.get(0, 1), 1.0);
        assert_eq!(beta.get(0, 2), 0.0);
        assert_eq!(beta.get(2, 3), 1.0);
        assert_eq!(beta.get(1, 2), 0.0);
    }

    #[test]
    fn gamma_examples() {
        let alpha = softmax_rows(&Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.3), |_, _| true);
        let gamma = expected_segmented_attention(&alpha, &Tensor::filled(3, 3, 1.0)).unwrap();
        assert!(gamma.max_abs_diff(&alpha) < 1e-15);
        let one = expected_segmented_attention(&Tensor::scalar(1.0), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn gamma_with_binary_beta_is_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let logits = Tensor::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
            let b: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let p: Vec<f64> = b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            let alpha = softmax_rows(&logits, |_, _| true);
            let gamma = expected_segmented_attention(&alpha, &same_segment_probabilities(&p)).unwrap();
            let ids = segment_ids(&b);
            let oracle = softmax_rows(&logits, |i, j| ids[j] <= ids[i]);
            assert!(gamma.max_abs_diff(&oracle) <= 1e-12);
        }
    }

    #[test]
    fn mask_examples() {
        let m = hard_segment_mask(&[false, false, false, true]);
        assert!((0..4).all(|i| (0..4).all(|j| m.allowed(i, j))));
        let m = hard_segment_mask(&[true; 4]);
        assert_eq!(m, Mask::causal(4));
        let m = hard_segment_mask(&[false, true, false, true]);
        let expected = [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), expected[i][j] == 1, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_invariant_matches_decision_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(1..15);
            let b: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let m = hard_segment_mask(&b);
            for i in 0..n {
                for j in 0..n {
                    let expected = j <= i || !b[i..j].iter().any(|&x| x);
                    assert_eq!(m.allowed(i, j), expected);
                }
            }
        }
    }

    fn attention_params(d: usize, heads: usize, seed: u64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        init_attention(&mut ps, "att", d, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ps
    }

    #[test]
    fn encoder_attention_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let n = rng.random_range(1..10);
            let params = attention_params(8, 2, trial);
            let feats = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
            let bi = encoder_attention(&feats, &params, "att", 2, AttentionKind::Bi, None).unwrap();
            let zeros = vec![0.0; n];
            let expected = encoder_attention(&feats, &params, "att", 2, AttentionKind::Expected, Some(&zeros)).unwrap();
            assert!(expected.max_abs_diff(&bi) <= 1e-12);

            let b: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let hard = encoder_attention(&feats, &params, "att", 2, AttentionKind::Hard, Some(&b)).unwrap();
            let expected = encoder_attention(&feats, &params, "att", 2, AttentionKind::Expected, Some(&b)).unwrap();
            assert!(expected.max_abs_diff(&hard) <= 1e-12);

            let ones = vec![1.0; n];
            let hard = encoder_attention(&feats, &params, "att", 2, AttentionKind::Hard, Some(&ones)).unwrap();
            let uni = encoder_attention(&feats, &params, "att", 2, AttentionKind::Uni, None).unwrap();
            assert!(hard.max_abs_diff(&uni) <= 1e-12);
        }
    }

    #[test]
    fn missing_seg_info_is_an_error() {
        let params = attention_params(4, 2, 0);
        let feats = Tensor::zeros(3, 4);
        for kind in [AttentionKind::Expected, AttentionKind::Hard] {
            let err = encoder_attention(&feats, &params, "att", 2, kind, None).unwrap_err();
            assert!(matches!(err, Error::MissingSegInfo { .. }));
        }
    }

    #[test]
    fn attention_gradient_wrt_p_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..10 {
            let n = 6;
            let mut params = attention_params(8, 2, 100 + trial);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            params.insert("p", Tensor::column(&p)).unwrap();
            let feats = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
            let proj = Tensor::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
            let report = finite_difference_check::<Error, _>(&params, &FdConfig::default(), |g| {
                let x = g.input(feats.clone())?;
                let pv = g.param("p")?;
                let beta = same_segment_node(g, pv)?;
                let (out, _) = self_attention(g, "att", 2, x, &EncoderMask::Expected(beta))?;
                let w = g.input(proj.clone())?;
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod)?)
            })
            .unwrap();
            assert!(report.passed, "trial {trial}: {:?}", report.per_param);
        }
    }

    #[test]
    fn csv_dump_layout() {
        let mut buf = Vec::new();
        write_attention_csv(&mut buf, "s1", 0, 1, &Tensor::from_rows(&[vec![1.0, 0.0], vec![0.25, 0.75]]).unwrap()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "s1,0,1,1,1,0\ns1,0,1,2,0.25,0.75\n");
    }

    proptest! {
        #[test]
        fn gamma_rows_are_stochastic(
            n in 1usize..16,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn(n, n, |_, _| rng.random_range(-4.0..4.0));
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let alpha = softmax_rows(&logits, |_, _| true);
            let gamma = expected_segmented_attention(&alpha, &same_segment_probabilities(&p)).unwrap();
            for i in 0..n {
                let s: f64 = gamma.row_slice(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn beta_monotone_in_p(
            p in prop::collection::vec(0.0f64..0.99, 2..12),
            idx in any::<prop::sample::Index>(),
            bump in 0.0f64..0.5,
        ) {
            let l = idx.index(p.len());
            let mut q = p.clone();
            q[l] = (q[l] + bump).min(0.999);
            let (bp, bq) = (same_segment_probabilities(&p), same_segment_probabilities(&q));
            for i in 0..p.len() {
                for j in 0..p.len() {
                    prop_assert!(bq.get(i, j) <= bp.get(i, j) + 1e-12);
                    prop_assert!((0.0..=1.0).contains(&bp.get(i, j)));
                    if j > i + 1 {
                        prop_assert!(bp.get(i, j) <= bp.get(i, j - 1) + 1e-12);
                    }
                }
            }
        }
    }
}
