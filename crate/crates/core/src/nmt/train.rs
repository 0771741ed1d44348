use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{batch_loss_and_gradients, step_log_probs, SoftmaxMode};
use super::model::{Gradients, Seq2SeqModel};
use super::{NmtError, Result};
use crate::corpus::{BucketedPair, PAD_ID};

/// Training pair of id sequences. The target should end with EOS; PAD ids
/// anywhere are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub bucket: usize,
}

impl From<BucketedPair> for Example {
    fn from(p: BucketedPair) -> Self {
        Self {
            source: p.source,
            target: p.target,
            bucket: p.bucket,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub clip_norm: f64,
    pub perplexity_history: Vec<f64>,
}

impl TrainState {
    pub fn new(learning_rate: f64, decay_factor: f64, clip_norm: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NmtError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(clip_norm > 0.0 && clip_norm.is_finite()) {
            return Err(NmtError::InvalidConfig("clip norm must be positive".into()));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(NmtError::InvalidConfig("decay factor must lie in (0, 1]".into()));
        }
        Ok(Self {
            step: 0,
            learning_rate,
            decay_factor,
            clip_norm,
            perplexity_history: Vec::new(),
        })
    }

    /// Applies the decay rule after `completed_epoch` (1-based), whose
    /// perplexity is the last entry of the history. A non-empty `schedule`
    /// decays exactly at the listed epochs; otherwise the rate decays when
    /// the relative improvement over the previous epoch is below
    /// `threshold`. Returns whether the rate changed.
    pub fn maybe_decay(&mut self, completed_epoch: usize, schedule: &[usize], threshold: f64) -> bool {
        let decay = if !schedule.is_empty() {
            schedule.contains(&completed_epoch)
        } else {
            match self.perplexity_history.as_slice() {
                [.., prev, last] => (prev - last) / prev < threshold,
                _ => false,
            }
        };
        if decay {
            self.learning_rate *= self.decay_factor;
        }
        decay
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|(_, t)| t.sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = global_norm(grads);
    if norm > threshold {
        let factor = threshold / norm;
        for (_, t) in grads.tensors_mut() {
            t.scale(factor);
        }
    }
    norm
}

/// `θ ← θ − lr·g`, then increments the step count.
pub fn sgd_update(model: &mut Seq2SeqModel, grads: &Gradients, state: &mut TrainState) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut params = model.tensors_mut();
    if params.len() != grad_tensors.len() {
        return Err(NmtError::Shape("gradient layout differs from model".into()));
    }
    for ((name, p), (_, g)) in params.iter_mut().zip(&grad_tensors) {
        if p.shape() != g.shape() {
            return Err(NmtError::Shape(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    for ((_, p), (_, g)) in params.iter_mut().zip(&grad_tensors) {
        p.add_scaled(-state.learning_rate, g);
    }
    state.step += 1;
    Ok(())
}

/// Teacher-forced per-token perplexity under the full softmax.
pub fn perplexity(model: &Seq2SeqModel, examples: &[Example]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let src: Vec<u32> = ex.source.iter().copied().filter(|&t| t != PAD_ID).collect();
        let tgt: Vec<u32> = ex.target.iter().copied().filter(|&t| t != PAD_ID).collect();
        let lp = step_log_probs(model, &src, &tgt)?;
        nll -= lp.iter().sum::<f64>();
        tokens += tgt.len();
    }
    if tokens == 0 {
        return Err(NmtError::EmptySequence("evaluation"));
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Relative perplexity improvement below which the rate decays.
    pub decay_threshold: f64,
    /// Explicit decay epochs; when non-empty the stagnation rule is off.
    pub decay_epochs: Vec<usize>,
    pub clip_norm: f64,
    pub softmax: SoftmaxMode,
    pub seed: u64,
    /// Stop once the training perplexity falls below this value.
    pub target_perplexity: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            learning_rate: 1.0,
            decay_factor: 0.5,
            decay_threshold: 0.01,
            decay_epochs: Vec::new(),
            clip_norm: 5.0,
            softmax: SoftmaxMode::Sampled(512),
            seed: 1,
            target_perplexity: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppl: f64,
    pub dev_ppl: Option<f64>,
    pub global_norm_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Global gradient norm before clipping, one per update.
    pub pre_clip_norms: Vec<f64>,
    /// Global gradient norm after clipping, one per update.
    pub post_clip_norms: Vec<f64>,
    /// Mean training loss of each batch, in update order.
    pub loss_trace: Vec<f64>,
    pub state: TrainState,
}

/// Batches never mix buckets. Bucket contents and batch order are shuffled
/// each epoch.
fn make_batches(examples: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_bucket: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_bucket.entry(ex.bucket).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in by_bucket {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// SGD with global-norm clipping over bucketed mini-batches. `on_epoch` sees
/// each log line as soon as the epoch finishes.
pub fn train<F: FnMut(&EpochLog)>(
    model: &mut Seq2SeqModel,
    train_set: &[Example],
    dev_set: Option<&[Example]>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(NmtError::EmptySequence("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(NmtError::InvalidConfig("batch size must be positive".into()));
    }
    let mut state = TrainState::new(cfg.learning_rate, cfg.decay_factor, cfg.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        epochs: Vec::new(),
        pre_clip_norms: Vec::new(),
        post_clip_norms: Vec::new(),
        loss_trace: Vec::new(),
        state: state.clone(),
    };
    for epoch in 1..=cfg.epochs {
        let lr = state.learning_rate;
        let batches = make_batches(train_set, cfg.batch_size, &mut rng);
        let mut norm_sum = 0.0;
        for idx in &batches {
            let pairs: Vec<(&[u32], &[u32])> = idx
                .iter()
                .map(|&i| (train_set[i].source.as_slice(), train_set[i].target.as_slice()))
                .collect();
            let mut batch = batch_loss_and_gradients(model, &pairs, cfg.softmax, &mut rng)
                .map_err(|e| match e {
                    NmtError::NonFinite(msg) => NmtError::NonFinite(format!(
                        "epoch {epoch}, step {}: {msg}",
                        state.step + 1
                    )),
                    other => other,
                })?;
            let pre = clip_global_norm(&mut batch.gradients, state.clip_norm);
            norm_sum += pre;
            report.pre_clip_norms.push(pre);
            report.post_clip_norms.push(global_norm(&batch.gradients));
            report.loss_trace.push(batch.loss);
            sgd_update(model, &batch.gradients, &mut state)?;
        }
        if !model.is_finite() {
            return Err(NmtError::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let train_ppl = perplexity(model, train_set)?;
        let dev_ppl = dev_set.filter(|d| !d.is_empty()).map(|d| perplexity(model, d)).transpose()?;
        state.perplexity_history.push(dev_ppl.unwrap_or(train_ppl));
        let log = EpochLog {
            epoch,
            lr,
            train_ppl,
            dev_ppl,
            global_norm_mean: norm_sum / batches.len() as f64,
        };
        on_epoch(&log);
        report.epochs.push(log);
        if cfg.target_perplexity.is_some_and(|t| train_ppl < t) {
            break;
        }
        state.maybe_decay(epoch, &cfg.decay_epochs, cfg.decay_threshold);
    }
    report.state = state;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS_ID;
    use crate::nmt::ModelConfig;

    fn tiny_model() -> Seq2SeqModel {
        let mut cfg = ModelConfig::new(12, 12, 4, 4, 1);
        cfg.init_scale = 0.3;
        Seq2SeqModel::new(cfg).unwrap()
    }

    fn filled(model: &Seq2SeqModel, v: f64) -> Gradients {
        let mut g = model.zeros_like();
        for (_, t) in g.tensors_mut() {
            t.fill(v);
        }
        g
    }

    #[test]
    fn clipping_halves_norm_ten() {
        let m = tiny_model();
        let n = m.num_parameters() as f64;
        let mut g = filled(&m, 10.0 / n.sqrt());
        let pre = clip_global_norm(&mut g, 5.0);
        assert!((pre - 10.0).abs() < 1e-9);
        let expected = 5.0 / n.sqrt();
        for (_, t) in g.tensors() {
            assert!(t.as_slice().iter().all(|&x| (x - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn clipping_below_threshold_is_identity() {
        let m = tiny_model();
        let n = m.num_parameters() as f64;
        let mut g = filled(&m, 3.0 / n.sqrt());
        let before = g.clone();
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g, before);
    }

    #[test]
    fn zero_gradient_keeps_model() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut st = TrainState::new(1.0, 0.5, 5.0).unwrap();
        let zero = m.zeros_like();
        sgd_update(&mut m, &zero, &mut st).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn unit_rate_subtracts_gradient() {
        let mut m = tiny_model();
        let before = m.clone();
        let g = filled(&m, 0.25);
        let mut st = TrainState::new(1.0, 0.5, 5.0).unwrap();
        sgd_update(&mut m, &g, &mut st).unwrap();
        for ((_, a), (_, b)) in m.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(*x, y - 0.25);
            }
        }
    }

    #[test]
    fn two_updates_equal_one_summed_update() {
        let m0 = tiny_model();
        let g1 = filled(&m0, 0.125);
        let g2 = filled(&m0, -0.0625);
        let mut a = m0.clone();
        let mut st = TrainState::new(0.5, 0.5, 5.0).unwrap();
        sgd_update(&mut a, &g1, &mut st).unwrap();
        sgd_update(&mut a, &g2, &mut st).unwrap();
        let mut sum = g1.clone();
        for ((_, s), (_, t)) in sum.tensors_mut().into_iter().zip(g2.tensors()) {
            s.add_scaled(1.0, t);
        }
        let mut b = m0.clone();
        let mut st2 = TrainState::new(0.5, 0.5, 5.0).unwrap();
        sgd_update(&mut b, &sum, &mut st2).unwrap();
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors()) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stagnation_decays_rate() {
        let mut st = TrainState::new(1.0, 0.5, 5.0).unwrap();
        st.perplexity_history = vec![30.0, 29.9];
        assert!(st.maybe_decay(2, &[], 0.01));
        assert_eq!(st.learning_rate, 0.5);

        let mut st = TrainState::new(1.0, 0.5, 5.0).unwrap();
        st.perplexity_history = vec![30.0, 20.0];
        assert!(!st.maybe_decay(2, &[], 0.01));
        assert_eq!(st.learning_rate, 1.0);
    }

    #[test]
    fn explicit_schedule_overrides_stagnation() {
        let mut st = TrainState::new(1.0, 0.5, 5.0).unwrap();
        let mut rates = Vec::new();
        for epoch in 1..=5 {
            st.perplexity_history.push(10.0);
            st.maybe_decay(epoch, &[3], 0.01);
            rates.push(st.learning_rate);
        }
        assert_eq!(rates, vec![1.0, 1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(TrainState::new(0.0, 0.5, 5.0).is_err());
        assert!(TrainState::new(1.0, 0.5, 0.0).is_err());
    }

    fn toy_examples() -> Vec<Example> {
        (0..6u32)
            .map(|i| Example {
                source: vec![4 + i, 5 + i],
                target: vec![5 + i, 4 + i, EOS_ID],
                bucket: (i % 2) as usize,
            })
            .collect()
    }

    #[test]
    fn batches_stay_within_buckets() {
        let ex = toy_examples();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = make_batches(&ex, 2, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.iter().all(|&i| ex[i].bucket == ex[b[0]].bucket));
        }
    }

    #[test]
    fn training_is_deterministic_and_clipped() {
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 3,
            clip_norm: 0.05,
            softmax: SoftmaxMode::Full,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model();
            let r = train(&mut m, &toy_examples(), None, &cfg, |_| {}).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1, m2);
        assert_eq!(r1.loss_trace, r2.loss_trace);
        assert_eq!(r1.epochs, r2.epochs);
        assert!(r1.post_clip_norms.iter().all(|&n| n <= 0.05 + 1e-9));
        assert_eq!(r1.epochs.len(), 3);
        assert_eq!(r1.state.step, 12);
    }
}
