//! Encoder-decoder over projected speech frames with a differentiable
//! segmenter, trained jointly on speech translation (ST), recognition
//! (ASR) and text translation (MT).
//!
//! All three tasks share one decoder over a joint vocabulary:
//! `0 = BOS_TGT`, `1 = BOS_SRC`, `2 = EOS`, then the source subwords, then
//! the target words. The start token tells the decoder which side to
//! produce.

mod checkpoint;
mod masks;
mod train;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::alignment::{
    contrastive_loss_node, expected_segment_representations_node, segment_marginals_node, subword_to_word_node,
    Truncation,
};
use crate::attention::{hard_segment_mask, init_attention, multi_head_attention, same_segment_node, self_attention, EncoderMask};
use crate::autodiff::{AutodiffError, Graph, Mask, ParameterSet, Tensor, Var};
use crate::segmentation::{hard_decisions, init_segmenter, probabilities_node, segment_count_loss_node};
use crate::synth::Sentence;
use crate::{Error, FeatureSequence, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use masks::{g_of_t, prefix_mask, wait_k_decoder_mask, wait_seg_decoder_mask, K_INF};
pub use train::{epoch_log_csv, sample_k, train, Adam, EpochLog, TrainOutcome, EPOCH_LOG_HEADER};

pub const BOS_TGT: usize = 0;
pub const BOS_SRC: usize = 1;
pub const EOS: usize = 2;
const SPECIAL_TOKENS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub frame_dim: usize,
    pub noise_variance: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on the sampled lagging value; `None` uses the longest
    /// sentence of each batch.
    pub max_k: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub truncation: Truncation,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn: 256,
            src_vocab: 1,
            tgt_vocab: 1,
            frame_dim: 16,
            noise_variance: crate::segmentation::DEFAULT_NOISE_VARIANCE,
            tau: crate::alignment::DEFAULT_TEMPERATURE,
            learning_rate: 3e-4,
            batch_size: 16,
            max_k: None,
            epochs: 10,
            seed: 1,
            truncation: Truncation::Absorb,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn", self.ffn),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("frame_dim", self.frame_dim),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        if self.max_k == Some(0) {
            return Err(Error::InvalidConfig("max_k must be positive".into()));
        }
        for (name, v) in [("tau", self.tau), ("learning_rate", self.learning_rate), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_variance must be non-negative, got {}", self.noise_variance)));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn joint_vocab(&self) -> usize {
        SPECIAL_TOKENS + self.src_vocab + self.tgt_vocab
    }

    pub fn src_token(&self, id: usize) -> usize {
        SPECIAL_TOKENS + id
    }

    pub fn tgt_token(&self, id: usize) -> usize {
        SPECIAL_TOKENS + self.src_vocab + id
    }

    /// Target id of a joint token, if it is one.
    pub fn tgt_id(&self, token: usize) -> Option<usize> {
        let first = SPECIAL_TOKENS + self.src_vocab;
        (first..first + self.tgt_vocab).contains(&token).then(|| token - first)
    }

    fn segmenter_hidden(&self) -> usize {
        4 * self.d_model
    }
}

/// One greedy decoding step's result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Word(usize),
    Eos,
}

/// Greedy output; `truncated` marks a hit of the length cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub truncated: bool,
}

/// Output length cap `2K + 10` for a sentence of `K` words.
pub fn length_cap(k_words: usize) -> usize {
    2 * k_words + 10
}

/// Sinusoidal position encodings, `n × d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(n, d, |pos, i| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Loss terms of one sentence (or their batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub st: T,
    pub asr: T,
    pub mt: T,
    pub num: T,
    pub ctr: T,
    pub total: T,
}

/// Graph nodes of one sentence's training objective, plus what the
/// segmenter produced along the way.
pub struct SentenceGraph {
    pub losses: LossTerms<Var>,
    pub features: Var,
    pub p: Var,
    pub b: Vec<bool>,
    pub st_logits: Var,
    pub memory: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

fn ln_params(params: &mut ParameterSet, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::filled(1, d, 1.0))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, d))?;
    Ok(())
}

fn ffn_params<R: Rng>(params: &mut ParameterSet, prefix: &str, d: usize, hidden: usize, rng: &mut R) -> Result<()> {
    params.insert_normal(&format!("{prefix}.w1"), d, hidden, (2.0 / d as f64).sqrt(), rng)?;
    params.insert(format!("{prefix}.b1"), Tensor::zeros(1, hidden))?;
    params.insert_normal(&format!("{prefix}.w2"), hidden, d, (1.0 / hidden as f64).sqrt(), rng)?;
    params.insert(format!("{prefix}.b2"), Tensor::zeros(1, d))?;
    Ok(())
}

fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

fn feed_forward(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.w1"))?;
    let b1 = g.param(&format!("{prefix}.b1"))?;
    let w2 = g.param(&format!("{prefix}.w2"))?;
    let b2 = g.param(&format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    Ok(g.add(h, b2)?)
}

/// Attributes a non-finite value produced while building `term`.
fn named<T>(term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Autodiff(AutodiffError::NonFinite(_)) => Error::NonFiniteLoss { term },
        other => other,
    })
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParameterSet::new();
        params.insert_normal("speech.w", config.frame_dim, d, (1.0 / config.frame_dim as f64).sqrt(), rng)?;
        params.insert("speech.b", Tensor::zeros(1, d))?;
        init_segmenter(&mut params, d, config.segmenter_hidden(), rng)?;
        params.insert_normal("src.emb", config.src_vocab, d, 1.0, rng)?;
        for l in 0..config.encoder_layers {
            let p = format!("enc.l{l}");
            ln_params(&mut params, &format!("{p}.ln1"), d)?;
            init_attention(&mut params, &format!("{p}.attn"), d, config.heads, rng)?;
            ln_params(&mut params, &format!("{p}.ln2"), d)?;
            ffn_params(&mut params, &format!("{p}.ffn"), d, config.ffn, rng)?;
        }
        ln_params(&mut params, "enc.ln", d)?;
        params.insert_normal("dec.emb", config.joint_vocab(), d, 1.0, rng)?;
        for l in 0..config.decoder_layers {
            let p = format!("dec.l{l}");
            ln_params(&mut params, &format!("{p}.ln1"), d)?;
            init_attention(&mut params, &format!("{p}.self"), d, config.heads, rng)?;
            ln_params(&mut params, &format!("{p}.ln2"), d)?;
            init_attention(&mut params, &format!("{p}.cross"), d, config.heads, rng)?;
            ln_params(&mut params, &format!("{p}.ln3"), d)?;
            ffn_params(&mut params, &format!("{p}.ffn"), d, config.ffn, rng)?;
        }
        ln_params(&mut params, "dec.ln", d)?;
        params.insert_normal("dec.out.w", d, config.joint_vocab(), (1.0 / d as f64).sqrt(), rng)?;
        params.insert("dec.out.b", Tensor::zeros(1, config.joint_vocab()))?;
        Ok(Model { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Model> {
        let reference = Model::new(config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Data(format!("parameter {name} has shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::Data(format!("parameter {name} is missing"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Data(format!("{} parameters, expected {}", params.len(), reference.params.len())));
        }
        Ok(Model { config, params })
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.rows() == 0 {
            return Err(Error::EmptyFeatures);
        }
        if frames.cols() != self.config.frame_dim {
            return Err(Error::Data(format!("frames have {} dims, model expects {}", frames.cols(), self.config.frame_dim)));
        }
        Ok(())
    }

    /// Projected features `a` (`n × d_model`).
    pub fn project(g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        let w = g.param("speech.w")?;
        let b = g.param("speech.b")?;
        let a = g.matmul(frames, w)?;
        Ok(g.add(a, b)?)
    }

    fn add_positions(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        let pe = g.input(positional_encoding(n, self.config.d_model))?;
        Ok(g.add(x, pe)?)
    }

    /// Shared encoder stack over `x` (positions already added).
    pub fn encode(&self, g: &mut Graph<'_>, x: Var, mask: &EncoderMask) -> Result<Var> {
        let mut x = x;
        for l in 0..self.config.encoder_layers {
            let p = format!("enc.l{l}");
            let h = layer_norm(g, x, &format!("{p}.ln1"))?;
            let (att, _) = self_attention(g, &format!("{p}.attn"), self.config.heads, h, mask)?;
            x = g.add(x, att)?;
            let h = layer_norm(g, x, &format!("{p}.ln2"))?;
            let f = feed_forward(g, h, &format!("{p}.ffn"))?;
            x = g.add(x, f)?;
        }
        layer_norm(g, x, "enc.ln")
    }

    /// Speech encoder input `a + PE`.
    pub fn speech_input(&self, g: &mut Graph<'_>, a: Var) -> Result<Var> {
        self.add_positions(g, a)
    }

    /// Text encoder input: source subword embeddings plus positions.
    pub fn text_input(&self, g: &mut Graph<'_>, subwords: &[usize]) -> Result<Var> {
        let table = g.param("src.emb")?;
        let e = g.embedding(table, subwords)?;
        self.add_positions(g, e)
    }

    /// Decoder logits (`len(inputs) × joint vocab`) over `memory` with
    /// cross-attention restricted by `cross_mask`.
    pub fn decode_logits(&self, g: &mut Graph<'_>, memory: Var, inputs: &[usize], cross_mask: &Mask) -> Result<Var> {
        let table = g.param("dec.emb")?;
        let e = g.embedding(table, inputs)?;
        let mut y = self.add_positions(g, e)?;
        let causal = Mask::causal(inputs.len());
        for l in 0..self.config.decoder_layers {
            let p = format!("dec.l{l}");
            let h = layer_norm(g, y, &format!("{p}.ln1"))?;
            let (sa, _) = multi_head_attention(g, &format!("{p}.self"), self.config.heads, h, h, Some(&causal), None)?;
            y = g.add(y, sa)?;
            let h = layer_norm(g, y, &format!("{p}.ln2"))?;
            let (ca, _) = multi_head_attention(g, &format!("{p}.cross"), self.config.heads, h, memory, Some(cross_mask), None)?;
            y = g.add(y, ca)?;
            let h = layer_norm(g, y, &format!("{p}.ln3"))?;
            let f = feed_forward(g, h, &format!("{p}.ffn"))?;
            y = g.add(y, f)?;
        }
        let y = layer_norm(g, y, "dec.ln")?;
        let w = g.param("dec.out.w")?;
        let b = g.param("dec.out.b")?;
        let logits = g.matmul(y, w)?;
        Ok(g.add(logits, b)?)
    }

    fn check_sentence(&self, s: &Sentence) -> Result<()> {
        self.check_frames(s.features.frames())?;
        if let Some(&bad) = s.subwords.iter().find(|&&x| x >= self.config.src_vocab) {
            return Err(Error::Data(format!("sentence {}: subword id {bad} outside vocabulary", s.id)));
        }
        if let Some(&bad) = s.target.iter().find(|&&x| x >= self.config.tgt_vocab) {
            return Err(Error::Data(format!("sentence {}: target id {bad} outside vocabulary", s.id)));
        }
        Ok(())
    }

    /// The full training objective of one sentence at lagging `k`.
    ///
    /// `noise` is added to the segmenter logits; the decoder masks use the
    /// thresholded noisy probabilities, which carry no gradient.
    pub fn sentence_graph(&self, g: &mut Graph<'_>, s: &Sentence, k: usize, noise: Option<&Tensor>) -> Result<SentenceGraph> {
        self.check_sentence(s)?;
        let cfg = &self.config;
        let kw = s.k();
        let (frames, a, p, b, memory) = named("encoder", (|| {
            let frames = g.input(s.features.frames().clone())?;
            let a = Model::project(g, frames)?;
            let p = probabilities_node(g, a, noise)?;
            let b = hard_decisions(g.value(p).data());
            let beta = same_segment_node(g, p)?;
            let x = self.speech_input(g, a)?;
            let memory = self.encode(g, x, &EncoderMask::Expected(beta))?;
            Ok((frames, a, p, b, memory))
        })())?;

        let tgt: Vec<usize> = s.target.iter().map(|&t| cfg.tgt_token(t)).collect();
        let src: Vec<usize> = s.subwords.iter().map(|&t| cfg.src_token(t)).collect();
        let with_bos = |bos: usize, ids: &[usize]| [&[bos][..], ids].concat();
        let with_eos = |ids: &[usize]| [ids, &[EOS][..]].concat();
        let st_in = with_bos(BOS_TGT, &tgt);
        let asr_in = with_bos(BOS_SRC, &src);

        let (st_logits, st) = named("st", (|| {
            let logits = self.decode_logits(g, memory, &st_in, &wait_seg_decoder_mask(&b, k, st_in.len()))?;
            Ok((logits, g.cross_entropy(logits, &with_eos(&tgt))?))
        })())?;
        let asr = named("asr", (|| {
            let logits = self.decode_logits(g, memory, &asr_in, &wait_seg_decoder_mask(&b, k, asr_in.len()))?;
            Ok(g.cross_entropy(logits, &with_eos(&src))?)
        })())?;
        let mt = named("mt", (|| {
            let text = self.text_input(g, &s.subwords)?;
            let text_memory = self.encode(g, text, &EncoderMask::Uni)?;
            let mask = wait_k_decoder_mask(&s.spans.ends(), k, st_in.len());
            let logits = self.decode_logits(g, text_memory, &st_in, &mask)?;
            Ok(g.cross_entropy(logits, &with_eos(&tgt))?)
        })())?;
        let num = named("num", segment_count_loss_node(g, p, kw))?;
        let ctr = named("ctr", (|| {
            let m = segment_marginals_node(g, p, kw, cfg.truncation)?;
            let fs = expected_segment_representations_node(g, a, m)?;
            let table = g.param("src.emb")?;
            let emb = g.embedding(table, &s.subwords)?;
            let ft = subword_to_word_node(g, emb, &s.spans)?;
            contrastive_loss_node(g, fs, ft, cfg.tau)
        })())?;

        let total = named("total", (|| {
            let mut total = g.add(st, asr)?;
            for term in [mt, num, ctr] {
                total = g.add(total, term)?;
            }
            Ok(total)
        })())?;
        let losses = LossTerms { st, asr, mt, num, ctr, total };
        Ok(SentenceGraph { losses, features: frames, p, b, st_logits, memory })
    }

    /// Loss values of one sentence without gradients.
    pub fn sentence_losses(&self, s: &Sentence, k: usize, noise: Option<&Tensor>) -> Result<LossTerms<f64>> {
        let mut g = Graph::new(&self.params);
        let sg = self.sentence_graph(&mut g, s, k, noise)?;
        let v = |x: Var| g.scalar(x);
        let l = sg.losses;
        Ok(LossTerms { st: v(l.st)?, asr: v(l.asr)?, mt: v(l.mt)?, num: v(l.num)?, ctr: v(l.ctr)?, total: v(l.total)? })
    }

    /// Inference-mode segmentation probabilities of every frame.
    pub fn segment(&self, frames: &Tensor) -> Result<Vec<f64>> {
        self.check_frames(frames)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(frames.clone())?;
        let a = Model::project(&mut g, x)?;
        let p = probabilities_node(&mut g, a, None)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Hard-segmented encoder memory of a (prefix of a) stream together
    /// with its boundary decisions.
    pub fn encode_stream(&self, frames: &Tensor) -> Result<(Tensor, Vec<bool>)> {
        self.check_frames(frames)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(frames.clone())?;
        let a = Model::project(&mut g, x)?;
        let p = probabilities_node(&mut g, a, None)?;
        let b = hard_decisions(g.value(p).data());
        let x = self.speech_input(&mut g, a)?;
        let memory = self.encode(&mut g, x, &EncoderMask::Hard(hard_segment_mask(&b)))?;
        Ok((g.value(memory).clone(), b))
    }

    /// Greedy choice of the next target token. Decoder row `t` attends to
    /// the first `visible[t]` memory rows; `history` holds the target ids
    /// emitted so far and `visible.len() == history.len() + 1`.
    pub fn next_token(&self, memory: &Tensor, visible: &[usize], history: &[usize]) -> Result<Token> {
        if visible.len() != history.len() + 1 {
            return Err(Error::Data(format!("{} visibility rows for {} emitted tokens", visible.len(), history.len())));
        }
        let cfg = &self.config;
        let mut g = Graph::new(&self.params);
        let mem = g.input(memory.clone())?;
        let inputs: Vec<usize> = std::iter::once(BOS_TGT).chain(history.iter().map(|&t| cfg.tgt_token(t))).collect();
        let logits = self.decode_logits(&mut g, mem, &inputs, &prefix_mask(visible, memory.rows()))?;
        let last = g.value(logits).row_slice(inputs.len() - 1);
        // Only target words and EOS are admissible outputs.
        let mut best = (Token::Eos, last[EOS]);
        for id in 0..cfg.tgt_vocab {
            let v = last[cfg.tgt_token(id)];
            if v > best.1 {
                best = (Token::Word(id), v);
            }
        }
        Ok(best.0)
    }

    /// Greedy decoding with the whole stream visible, capped at
    /// `length_cap(k_words)` tokens.
    pub fn offline_decode(&self, features: &FeatureSequence, k_words: usize) -> Result<Decoded> {
        let (memory, _) = self.encode_stream(features.frames())?;
        let n = features.len();
        let cap = length_cap(k_words);
        let mut tokens = Vec::new();
        loop {
            if tokens.len() >= cap {
                return Ok(Decoded { tokens, truncated: true });
            }
            let visible = vec![n; tokens.len() + 1];
            match self.next_token(&memory, &visible, &tokens)? {
                Token::Eos => return Ok(Decoded { tokens, truncated: false }),
                Token::Word(id) => tokens.push(id),
            }
        }
    }
}
