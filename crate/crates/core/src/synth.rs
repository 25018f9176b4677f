//! Planted-boundary corpus: each word type owns a fixed block of feature
//! frames, a sentence concatenates the blocks of its words plus Gaussian
//! noise, so the true word boundaries are known exactly.
//!
//! File format (JSON lines, one sentence per line):
//!
//! ```text
//! {"id", "frame_ms", "frames": [[f64; d]...], "subwords": [id...],
//!  "word_spans": [[l, r]...], "target": [id...], "boundaries_ms": [...]}
//! ```
//!
//! `word_spans` are 1-based inclusive subword positions. Token ids are
//! vocabulary entries and start at 0.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::WordSpans;
use crate::autodiff::Tensor;
use crate::{Error, FeatureSequence, Result};

pub const DEFAULT_FRAME_MS: f64 = 40.0;
pub const SWAP_PROBABILITY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub word_types: usize,
    pub dim: usize,
    /// Inclusive range of block lengths; each word type draws one length.
    pub frames_per_word: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub noise_std: f64,
    pub silence_probability: f64,
    pub frame_ms: f64,
    /// Word type to its subword ids. Derived from the seed when absent.
    pub subword_table: Option<Vec<Vec<usize>>>,
    /// Word type to target id. A seeded permutation when absent.
    pub target_map: Option<Vec<usize>>,
    /// 0 (monotone targets) or 2 (adjacent swaps).
    pub reorder_window: usize,
    pub sentences: usize,
    /// Id of the first generated sentence; sentence streams are keyed by id,
    /// so disjoint id ranges give disjoint splits over the same lexicon.
    pub first_id: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            word_types: 24,
            dim: 16,
            frames_per_word: (2, 6),
            words_per_sentence: (3, 10),
            noise_std: 0.1,
            silence_probability: 0.1,
            frame_ms: DEFAULT_FRAME_MS,
            subword_table: None,
            target_map: None,
            reorder_window: 2,
            sentences: 2000,
            first_id: 0,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.word_types == 0 || self.dim == 0 {
            return bad("word_types and dim must be positive".into());
        }
        let (fl, fh) = self.frames_per_word;
        if fl == 0 || fl > fh {
            return bad(format!("frames_per_word range [{fl}, {fh}] is empty or starts at 0"));
        }
        let (wl, wh) = self.words_per_sentence;
        if wl == 0 || wl > wh {
            return bad(format!("words_per_sentence range [{wl}, {wh}] is empty or starts at 0"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be a finite non-negative number, got {}", self.noise_std));
        }
        if !(0.0..1.0).contains(&self.silence_probability) {
            return bad(format!("silence_probability must be in [0, 1), got {}", self.silence_probability));
        }
        if !(self.frame_ms > 0.0) {
            return bad(format!("frame_ms must be positive, got {}", self.frame_ms));
        }
        if self.reorder_window != 0 && self.reorder_window != 2 {
            return bad(format!("reorder_window must be 0 or 2, got {}", self.reorder_window));
        }
        if let Some(table) = &self.subword_table {
            if table.len() != self.word_types || table.iter().any(|s| s.is_empty() || s.len() > 2) {
                return bad("subword_table needs 1 or 2 ids for every word type".into());
            }
        }
        if let Some(map) = &self.target_map {
            if map.len() != self.word_types {
                return bad("target_map must cover every word type".into());
            }
        }
        Ok(())
    }
}

/// Per-word-type tables shared by every sentence of a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub subwords: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub prototypes: Vec<Tensor>,
    pub silence: Tensor,
}

impl Lexicon {
    pub fn derive(config: &CorpusConfig) -> Result<Lexicon> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (fl, fh) = config.frames_per_word;
        let block = |rng: &mut ChaCha8Rng| {
            let len = rng.random_range(fl..=fh);
            Tensor::from_fn(len, config.dim, |_, _| StandardNormal.sample(rng))
        };
        let prototypes: Vec<Tensor> = (0..config.word_types).map(|_| block(&mut rng)).collect();
        let silence = block(&mut rng).map(|v| 0.1 * v);
        let subwords = match &config.subword_table {
            Some(t) => t.clone(),
            None => {
                let mut next = 0;
                (0..config.word_types)
                    .map(|_| {
                        let n = if rng.random_bool(0.5) { 2 } else { 1 };
                        let ids = (next..next + n).collect();
                        next += n;
                        ids
                    })
                    .collect()
            }
        };
        let targets = match &config.target_map {
            Some(m) => m.clone(),
            None => {
                let mut perm: Vec<usize> = (0..config.word_types).collect();
                perm.shuffle(&mut rng);
                perm
            }
        };
        Ok(Lexicon { subwords, targets, prototypes, silence })
    }

    pub fn source_vocab(&self) -> usize {
        self.subwords.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn target_vocab(&self) -> usize {
        self.targets.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub id: usize,
    pub features: FeatureSequence,
    pub subwords: Vec<usize>,
    pub spans: WordSpans,
    pub target: Vec<usize>,
    /// End time of each word's last frame; the last one equals `T`.
    pub boundaries_ms: Vec<f64>,
}

impl Sentence {
    /// Word count `K`.
    pub fn k(&self) -> usize {
        self.spans.words()
    }

    pub fn duration_ms(&self) -> f64 {
        self.features.duration_ms()
    }

    /// Boundary frame indices (1-based, the last frame of each word).
    pub fn boundary_frames(&self) -> Vec<usize> {
        self.boundaries_ms.iter().map(|b| (b / self.features.frame_ms()).round() as usize).collect()
    }

    fn validate(&self) -> Result<()> {
        let k = self.spans.words();
        if self.spans.subwords() != self.subwords.len() {
            return Err(Error::InvalidSpans(format!(
                "spans cover {} subwords, sentence has {}",
                self.spans.subwords(),
                self.subwords.len()
            )));
        }
        if self.boundaries_ms.len() != k {
            return Err(Error::Data(format!("{} boundaries for {k} words", self.boundaries_ms.len())));
        }
        if self.target.len() != k {
            return Err(Error::Data(format!("{} target tokens for {k} words", self.target.len())));
        }
        if self.boundaries_ms.windows(2).any(|w| w[1] <= w[0]) || self.boundaries_ms[0] <= 0.0 {
            return Err(Error::Data("boundaries must be positive and strictly increasing".into()));
        }
        if (self.boundaries_ms[k - 1] - self.duration_ms()).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "last boundary {} differs from duration {}",
                self.boundaries_ms[k - 1],
                self.duration_ms()
            )));
        }
        Ok(())
    }
}

fn sentence_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

/// Swaps disjoint adjacent pairs, each with probability `SWAP_PROBABILITY`.
fn reorder<R: Rng>(tokens: &mut [usize], rng: &mut R) {
    let mut i = 0;
    while i + 1 < tokens.len() {
        if rng.random_bool(SWAP_PROBABILITY) {
            tokens.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
}

fn generate_sentence(config: &CorpusConfig, lex: &Lexicon, id: usize) -> Result<Sentence> {
    let mut rng = sentence_rng(config.seed, id);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (wl, wh) = config.words_per_sentence;
    let n_words = rng.random_range(wl..=wh);
    let words: Vec<usize> = (0..n_words).map(|_| rng.random_range(0..config.word_types)).collect();

    let mut data = Vec::new();
    let mut frames = 0;
    let mut boundaries_ms = Vec::with_capacity(n_words);
    let mut subwords = Vec::new();
    let mut spans = Vec::with_capacity(n_words);
    // Silence only ever precedes a word, so the stream ends on a boundary.
    for &w in &words {
        let blocks: &[&Tensor] = if rng.random_bool(config.silence_probability) {
            &[&lex.silence, &lex.prototypes[w]]
        } else {
            &[&lex.prototypes[w]]
        };
        for block in blocks {
            for &v in block.data() {
                data.push(v + noise.sample(&mut rng));
            }
            frames += block.rows();
        }
        boundaries_ms.push(frames as f64 * config.frame_ms);
        let start = subwords.len() + 1;
        subwords.extend_from_slice(&lex.subwords[w]);
        spans.push((start, subwords.len()));
    }
    let mut target: Vec<usize> = words.iter().map(|&w| lex.targets[w]).collect();
    if config.reorder_window == 2 {
        reorder(&mut target, &mut rng);
    }
    let n_sub = subwords.len();
    let sentence = Sentence {
        id,
        features: FeatureSequence::new(Tensor::from_vec(frames, config.dim, data)?, config.frame_ms)?,
        subwords,
        spans: WordSpans::new(spans, n_sub)?,
        target,
        boundaries_ms,
    };
    sentence.validate()?;
    Ok(sentence)
}

/// Generates `config.sentences` sentences with ids starting at `first_id`.
pub fn generate(config: &CorpusConfig) -> Result<Vec<Sentence>> {
    let lex = Lexicon::derive(config)?;
    (config.first_id..config.first_id + config.sentences).map(|id| generate_sentence(config, &lex, id)).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    frame_ms: f64,
    frames: Vec<Vec<f64>>,
    subwords: Vec<usize>,
    word_spans: Vec<(usize, usize)>,
    target: Vec<usize>,
    boundaries_ms: Vec<f64>,
}

impl Record {
    fn from_sentence(s: &Sentence) -> Record {
        Record {
            id: s.id,
            frame_ms: s.features.frame_ms(),
            frames: s.features.frames().row_vecs(),
            subwords: s.subwords.clone(),
            word_spans: s.spans.spans().to_vec(),
            target: s.target.clone(),
            boundaries_ms: s.boundaries_ms.clone(),
        }
    }

    fn into_sentence(self) -> Result<Sentence> {
        let frames = Tensor::from_rows(&self.frames)?;
        let n_sub = self.subwords.len();
        let s = Sentence {
            id: self.id,
            features: FeatureSequence::new(frames, self.frame_ms)?,
            subwords: self.subwords,
            spans: WordSpans::new(self.word_spans, n_sub)?,
            target: self.target,
            boundaries_ms: self.boundaries_ms,
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn sentence_to_json(s: &Sentence) -> Result<String> {
    Ok(serde_json::to_string(&Record::from_sentence(s))?)
}

pub fn write_corpus<W: Write>(out: W, corpus: &[Sentence]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for s in corpus {
        writeln!(out, "{}", sentence_to_json(s)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(path: &Path, corpus: &[Sentence]) -> Result<()> {
    write_corpus(std::fs::File::create(path)?, corpus)
}

/// Parses corpus JSON lines; errors carry the 1-based line number.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |line: &str| -> Result<Sentence> { serde_json::from_str::<Record>(line)?.into_sentence() };
        out.push(parse(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    if out.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    read_corpus(BufReader::new(file))
}

/// SHA-256 of the serialized corpus, hex encoded.
pub fn fingerprint(corpus: &[Sentence]) -> Result<String> {
    let mut hasher = Sha256::new();
    for s in corpus {
        hasher.update(sentence_to_json(s)?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex(&hasher.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
