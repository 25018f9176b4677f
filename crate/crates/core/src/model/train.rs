use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossTerms, Model, ModelConfig};
use crate::autodiff::{Graph, ParameterSet};
use crate::segmentation::sample_noise;
use crate::synth::Sentence;
use crate::{Error, Result};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: ParameterSet,
    v: ParameterSet,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParameterSet, config: &ModelConfig) -> Adam {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss terms over the sentences of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossTerms<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,L_st,L_asr,L_mt,L_num,L_ctr,total";

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for e in log {
        let l = &e.losses;
        out.push_str(&format!("{},{},{},{},{},{},{}\n", e.epoch, l.st, l.asr, l.mt, l.num, l.ctr, l.total));
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Lagging value drawn for every batch, in order.
    pub k_sequence: Vec<usize>,
}

/// Draws `k` uniformly from `1..=K_max`, where `K_max` is the largest word
/// count in the batch, optionally capped.
pub fn sample_k<R: Rng>(rng: &mut R, word_counts: &[usize], cap: Option<usize>) -> usize {
    let k_max = word_counts.iter().copied().max().unwrap_or(1).max(1);
    let k_max = cap.map_or(k_max, |c| k_max.min(c));
    rng.random_range(1..=k_max)
}

fn add_terms(acc: &mut LossTerms<f64>, t: &LossTerms<f64>) {
    acc.st += t.st;
    acc.asr += t.asr;
    acc.mt += t.mt;
    acc.num += t.num;
    acc.ctr += t.ctr;
    acc.total += t.total;
}

fn scale_terms(t: &mut LossTerms<f64>, f: f64) {
    for v in [&mut t.st, &mut t.asr, &mut t.mt, &mut t.num, &mut t.ctr, &mut t.total] {
        *v *= f;
    }
}

/// Gradient of the batch-mean objective; returns the summed loss terms.
fn batch_gradient(
    model: &Model,
    batch: &[&Sentence],
    k: usize,
    rng: &mut ChaCha8Rng,
    grads: &mut ParameterSet,
) -> Result<LossTerms<f64>> {
    let mut sums = LossTerms::default();
    for s in batch {
        let noise = sample_noise(s.features.len(), model.config.noise_variance, rng)?;
        let mut g = Graph::new(&model.params);
        let sg = model.sentence_graph(&mut g, s, k.min(s.k()), Some(&noise))?;
        let l = sg.losses;
        let values = LossTerms {
            st: g.scalar(l.st)?,
            asr: g.scalar(l.asr)?,
            mt: g.scalar(l.mt)?,
            num: g.scalar(l.num)?,
            ctr: g.scalar(l.ctr)?,
            total: g.scalar(l.total)?,
        };
        add_terms(&mut sums, &values);
        g.backward(l.total)?.accumulate_into(&g, grads);
    }
    grads.scale(1.0 / batch.len() as f64);
    if !grads.all_finite() {
        return Err(Error::NonFiniteLoss { term: "gradient" });
    }
    Ok(sums)
}

/// Trains from scratch. `progress` sees every finished epoch.
pub fn train(corpus: &[Sentence], config: &ModelConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.clone(), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.params, config);
    let mut log: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut k_sequence = Vec::new();
    let mut above = 0;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &corpus[i]).collect();
            let counts: Vec<usize> = batch.iter().map(|s| s.k()).collect();
            let k = sample_k(&mut rng, &counts, config.max_k);
            k_sequence.push(k);
            let mut grads = model.params.zeros_like();
            let batch_sums = batch_gradient(&model, &batch, k, &mut rng, &mut grads)?;
            add_terms(&mut sums, &batch_sums);
            adam.step(&mut model.params, &grads);
        }
        scale_terms(&mut sums, 1.0 / corpus.len() as f64);
        let entry = EpochLog { epoch, losses: sums };
        progress(&entry);
        log.push(entry);
        let initial = log[0].losses.total;
        above = if sums.total > 10.0 * initial { above + 1 } else { 0 };
        if above >= 3 {
            return Err(Error::Divergence { epoch, loss: sums.total, initial, log: epoch_log_csv(&log) });
        }
    }
    Ok(TrainOutcome { model, log, k_sequence })
}
