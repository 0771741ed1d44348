use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{EncodedSource, Gradients, Seq2SeqModel, StepTrace};
use super::{NmtError, Result};
use crate::corpus::{EOS_ID, GO_ID, PAD_ID};
use crate::linalg::{axpy, dot, softmax_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "samples")]
pub enum SoftmaxMode {
    Full,
    /// Softmax over the true token plus this many sampled negatives.
    Sampled(usize),
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean negative log-likelihood per non-PAD target token.
    pub loss: f64,
    pub tokens: usize,
    pub gradients: Gradients,
}

fn strip_pad(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&id| id != PAD_ID).collect()
}

/// Log-probability of each target token under teacher forcing.
pub fn step_log_probs(model: &Seq2SeqModel, src: &[u32], tgt: &[u32]) -> Result<Vec<f64>> {
    Seq2SeqModel::check_ids(tgt, model.config().target_vocab_size)?;
    let enc = model.encode(src)?;
    let mut state = model.initial_state();
    let mut y_prev = GO_ID;
    let mut out = Vec::with_capacity(tgt.len());
    for &y in tgt {
        let (trace, next) = model.step_trace(y_prev, &state, &enc);
        let mut logits = model.output_logits(&trace.out_in);
        let target_logit = logits[y as usize];
        let lse = softmax_in_place(&mut logits);
        out.push(target_logit - lse);
        state = next;
        y_prev = y;
    }
    Ok(out)
}

/// `log P(y | x)` as a teacher-forced sum of per-step terms. The target must
/// end with EOS.
pub fn sequence_log_prob(model: &Seq2SeqModel, src: &[u32], tgt: &[u32]) -> Result<f64> {
    if tgt.last() != Some(&EOS_ID) {
        return Err(NmtError::Shape("target sequence must end with EOS".into()));
    }
    Ok(step_log_probs(model, src, tgt)?.iter().sum())
}

/// Draws distinct negatives from the log-uniform distribution over ids
/// (ids are frequency ranks), skipping `target`. Returns candidates with the
/// target first, and `ln Q` for each, where `Q` is the expected number of
/// times the id appears among the draws.
fn sample_candidates<R: Rng + ?Sized>(
    vocab: usize,
    target: u32,
    samples: usize,
    rng: &mut R,
) -> (Vec<u32>, Vec<f64>) {
    if samples + 1 >= vocab {
        let mut cands = vec![target];
        cands.extend((0..vocab as u32).filter(|&k| k != target));
        return (cands, vec![0.0; vocab]);
    }
    let log_range = ((vocab + 1) as f64).ln();
    let mut seen = vec![false; vocab];
    seen[target as usize] = true;
    let mut cands = vec![target];
    let mut tries = 0u64;
    while cands.len() < samples + 1 {
        let u: f64 = rng.gen();
        let k = (((u * log_range).exp() as usize).saturating_sub(1)).min(vocab - 1);
        tries += 1;
        if !seen[k] {
            seen[k] = true;
            cands.push(k as u32);
        }
    }
    let log_q = cands
        .iter()
        .map(|&k| {
            let p = ((k as f64 + 2.0) / (k as f64 + 1.0)).ln() / log_range;
            (-(tries as f64 * (-p).ln_1p()).exp_m1()).ln()
        })
        .collect();
    (cands, log_q)
}

/// Output layer loss for one step; accumulates output-layer gradients and
/// returns `(nll, d out_in)`.
fn output_step<R: Rng + ?Sized>(
    model: &Seq2SeqModel,
    out_in: &[f64],
    target: u32,
    mode: SoftmaxMode,
    scale: f64,
    rng: &mut R,
    grads: &mut Gradients,
) -> (f64, Vec<f64>) {
    let mut d_out_in = vec![0.0; out_in.len()];
    match mode {
        SoftmaxMode::Full => {
            let mut p = model.output_logits(out_in);
            let target_logit = p[target as usize];
            let lse = softmax_in_place(&mut p);
            p[target as usize] -= 1.0;
            for v in &mut p {
                *v *= scale;
            }
            grads.out_w.add_outer(&p, out_in);
            for (b, d) in grads.out_b.as_mut_slice().iter_mut().zip(&p) {
                *b += d;
            }
            model.out_w.matvec_t_acc(&p, &mut d_out_in);
            (lse - target_logit, d_out_in)
        }
        SoftmaxMode::Sampled(s) => {
            let (cands, log_q) = sample_candidates(model.out_b.rows(), target, s, rng);
            let bias = model.out_b.as_slice();
            let mut p: Vec<f64> = cands
                .iter()
                .zip(&log_q)
                .map(|(&k, lq)| dot(model.out_w.row(k as usize), out_in) + bias[k as usize] - lq)
                .collect();
            let target_logit = p[0];
            let lse = softmax_in_place(&mut p);
            p[0] -= 1.0;
            for (&k, &pk) in cands.iter().zip(&p) {
                let g = pk * scale;
                axpy(g, out_in, grads.out_w.row_mut(k as usize));
                grads.out_b.as_mut_slice()[k as usize] += g;
                axpy(g, model.out_w.row(k as usize), &mut d_out_in);
            }
            (lse - target_logit, d_out_in)
        }
    }
}

/// Forward and backward pass for one pair; gradients are scaled by `scale`.
/// Returns the summed token NLL.
fn example_backward<R: Rng + ?Sized>(
    model: &Seq2SeqModel,
    src: &[u32],
    tgt: &[u32],
    mode: SoftmaxMode,
    scale: f64,
    rng: &mut R,
    grads: &mut Gradients,
) -> Result<f64> {
    let cfg = model.config();
    let (h, d, layers) = (cfg.hidden_size, cfg.embedding_dim, cfg.layers);
    Seq2SeqModel::check_ids(tgt, cfg.target_vocab_size)?;
    let trace = model.encode_trace(src)?;
    let enc = EncodedSource::from_annotations(model, trace.annotations.clone())?;
    let q = src.len();

    let mut steps: Vec<StepTrace> = Vec::with_capacity(tgt.len());
    let mut d_out_ins = Vec::with_capacity(tgt.len());
    let mut nll = 0.0;
    let mut state = model.initial_state();
    let mut y_prev = GO_ID;
    for &y in tgt {
        let (st, next) = model.step_trace(y_prev, &state, &enc);
        let (step_nll, d_out_in) = output_step(model, &st.out_in, y, mode, scale, rng, grads);
        nll += step_nll;
        steps.push(st);
        d_out_ins.push(d_out_in);
        state = next;
        y_prev = y;
    }
    if !nll.is_finite() {
        return Err(NmtError::NonFinite(format!(
            "sequence loss {nll} for source of length {q}, target of length {}",
            tgt.len()
        )));
    }

    let mut dh_carry = vec![vec![0.0; h]; layers];
    let mut dc_carry = vec![vec![0.0; h]; layers];
    let mut d_ann = vec![vec![0.0; 2 * h]; q];
    let mut d_keys = vec![vec![0.0; cfg.attention_size]; q];
    let v = model.attn_v.row(0);
    for (st, d_out_in) in steps.iter().zip(&d_out_ins).rev() {
        let mut d_ctx = d_out_in[h..].to_vec();
        let mut dh_above = d_out_in[..h].to_vec();
        for l in (0..layers).rev() {
            let mut dh = std::mem::take(&mut dh_carry[l]);
            axpy(1.0, &dh_above, &mut dh);
            let (dx, dhp, dcp) =
                model.decoder[l].backward(&st.caches[l], &dh, &dc_carry[l], &mut grads.decoder[l]);
            dh_carry[l] = dhp;
            dc_carry[l] = dcp;
            if l > 0 {
                dh_above = dx;
            } else {
                axpy(
                    1.0,
                    &dx[..d],
                    grads.target_embedding.row_mut(st.y_prev as usize),
                );
                axpy(1.0, &dx[d..], &mut d_ctx);
            }
        }

        let att = &st.attention;
        let da: Vec<f64> = enc.annotations.iter().map(|e| dot(&d_ctx, e)).collect();
        let mean = dot(&att.weights, &da);
        let mut d_wh = vec![0.0; cfg.attention_size];
        for m in 0..q {
            axpy(att.weights[m], &d_ctx, &mut d_ann[m]);
            let ds = att.weights[m] * (da[m] - mean);
            let t = &att.hidden[m];
            axpy(ds, t, grads.attn_v.row_mut(0));
            for k in 0..t.len() {
                let dpre = ds * v[k] * (1.0 - t[k] * t[k]);
                d_keys[m][k] += dpre;
                d_wh[k] += dpre;
            }
        }
        grads.attn_w.add_outer(&d_wh, &att.h_prev);
        model.attn_w.matvec_t_acc(&d_wh, &mut dh_carry[layers - 1]);
    }
    for m in 0..q {
        grads.attn_u.add_outer(&d_keys[m], &enc.annotations[m]);
        model.attn_u.matvec_t_acc(&d_keys[m], &mut d_ann[m]);
    }

    let mut d_out = d_ann;
    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let in_dim = lt.inputs[0].len();
        let mut d_in = vec![vec![0.0; in_dim]; q];
        let (mut dh, mut dc) = (vec![0.0; h], vec![0.0; h]);
        for n in (0..q).rev() {
            let mut g = d_out[n][..h].to_vec();
            axpy(1.0, &dh, &mut g);
            let (dx, dhp, dcp) =
                model.encoder_fwd[l].backward(&lt.fwd[n], &g, &dc, &mut grads.encoder_fwd[l]);
            axpy(1.0, &dx, &mut d_in[n]);
            dh = dhp;
            dc = dcp;
        }
        let (mut dh, mut dc) = (vec![0.0; h], vec![0.0; h]);
        for n in 0..q {
            let mut g = d_out[n][h..].to_vec();
            axpy(1.0, &dh, &mut g);
            let (dx, dhp, dcp) =
                model.encoder_bwd[l].backward(&lt.bwd[n], &g, &dc, &mut grads.encoder_bwd[l]);
            axpy(1.0, &dx, &mut d_in[n]);
            dh = dhp;
            dc = dcp;
        }
        d_out = d_in;
    }
    for (n, &id) in src.iter().enumerate() {
        axpy(1.0, &d_out[n], grads.source_embedding.row_mut(id as usize));
    }
    Ok(nll)
}

/// Mean per-token NLL over a batch of (possibly padded) pairs and its
/// gradient. PAD ids are removed from both sides before the forward pass, so
/// padding never affects the result.
pub fn batch_loss_and_gradients<R: Rng + ?Sized>(
    model: &Seq2SeqModel,
    batch: &[(&[u32], &[u32])],
    mode: SoftmaxMode,
    rng: &mut R,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(NmtError::EmptySequence("batch"));
    }
    if let SoftmaxMode::Sampled(0) = mode {
        return Err(NmtError::InvalidConfig("sampled softmax needs at least one sample".into()));
    }
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = batch
        .iter()
        .map(|(s, t)| (strip_pad(s), strip_pad(t)))
        .collect();
    let tokens: usize = pairs.iter().map(|(_, t)| t.len()).sum();
    if tokens == 0 {
        return Err(NmtError::EmptySequence("target"));
    }
    let scale = 1.0 / tokens as f64;
    let mut gradients = model.zeros_like();
    let mut total = 0.0;
    for (src, tgt) in &pairs {
        total += example_backward(model, src, tgt, mode, scale, rng, &mut gradients)?;
    }
    let loss = total / tokens as f64;
    if !loss.is_finite() {
        return Err(NmtError::NonFinite(format!("batch loss {loss}")));
    }
    Ok(BatchLoss {
        loss,
        tokens,
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmt::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(v: usize, layers: usize, scale: f64, seed: u64) -> Seq2SeqModel {
        let mut cfg = ModelConfig::new(v, v, 8, 8, layers);
        cfg.init_scale = scale;
        cfg.seed = seed;
        Seq2SeqModel::new(cfg).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn uniform_model_log_prob() {
        let m = model(20, 1, 0.0, 1);
        let lp = sequence_log_prob(&m, &[4, 5], &[6, 7, EOS_ID]).unwrap();
        assert!((lp - 3.0 * (1.0f64 / 20.0).ln()).abs() < 1e-12);
        let b = batch_loss_and_gradients(&m, &[(&[4, 5], &[6, 7, EOS_ID])], SoftmaxMode::Full, &mut rng())
            .unwrap();
        assert!((b.loss - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_requires_eos() {
        let m = model(20, 1, 0.3, 1);
        assert!(sequence_log_prob(&m, &[4], &[5, 6]).is_err());
    }

    #[test]
    fn single_step_targets_normalize() {
        let m = model(12, 2, 0.5, 3);
        let total: f64 = (0..12u32)
            .map(|y| step_log_probs(&m, &[4, 5, 6], &[y]).unwrap()[0].exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_prob_is_additive_over_prefixes() {
        let m = model(15, 2, 0.5, 4);
        let tgt = [5, 9, 11, 4, EOS_ID];
        let full = step_log_probs(&m, &[4, 7, 8], &tgt).unwrap();
        for k in 1..tgt.len() {
            let prefix = step_log_probs(&m, &[4, 7, 8], &tgt[..k]).unwrap();
            assert_eq!(prefix[..], full[..k]);
            let shorter: f64 = prefix.iter().sum();
            let longer: f64 = full[..=k].iter().sum();
            assert!((shorter - longer - (-full[k])).abs() < 1e-12);
        }
        assert!(full.iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn padding_changes_nothing() {
        let m = model(15, 2, 0.4, 6);
        let plain = batch_loss_and_gradients(
            &m,
            &[(&[4, 5, 6], &[7, 8, EOS_ID]), (&[9], &[10, EOS_ID])],
            SoftmaxMode::Full,
            &mut rng(),
        )
        .unwrap();
        let padded = batch_loss_and_gradients(
            &m,
            &[
                (&[PAD_ID, PAD_ID, 4, 5, 6], &[7, 8, EOS_ID, PAD_ID]),
                (&[PAD_ID, 9], &[10, EOS_ID, PAD_ID, PAD_ID, PAD_ID]),
            ],
            SoftmaxMode::Full,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(plain.loss, padded.loss);
        assert_eq!(plain.tokens, padded.tokens);
        assert_eq!(plain.gradients, padded.gradients);
    }

    #[test]
    fn whole_vocabulary_sample_equals_full_softmax() {
        let m = model(20, 2, 0.5, 7);
        let batch: [(&[u32], &[u32]); 2] = [(&[4, 5, 6], &[7, 8, 19, EOS_ID]), (&[9, 3], &[10, EOS_ID])];
        let full = batch_loss_and_gradients(&m, &batch, SoftmaxMode::Full, &mut rng()).unwrap();
        let sampled = batch_loss_and_gradients(&m, &batch, SoftmaxMode::Sampled(19), &mut rng()).unwrap();
        assert!((full.loss - sampled.loss).abs() < 1e-12);
        for ((_, a), (_, b)) in full.gradients.tensors().iter().zip(sampled.gradients.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_candidates_are_distinct_and_exclude_target() {
        let mut r = rng();
        for target in [0u32, 3, 99, 250] {
            let (c, lq) = sample_candidates(300, target, 40, &mut r);
            assert_eq!(c.len(), 41);
            assert_eq!(c[0], target);
            let set: std::collections::BTreeSet<_> = c.iter().collect();
            assert_eq!(set.len(), 41);
            assert!(lq.iter().all(|&x| x <= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn log_uniform_favors_frequent_ranks() {
        let mut r = rng();
        let mut hits = [0usize; 2];
        for _ in 0..2000 {
            let (c, _) = sample_candidates(1000, 999, 5, &mut r);
            hits[0] += c[1..].iter().filter(|&&k| k < 10).count();
            hits[1] += c[1..].iter().filter(|&&k| (500..510).contains(&k)).count();
        }
        assert!(hits[0] > 20 * hits[1].max(1));
    }

    #[test]
    fn sampled_loss_is_deterministic_under_seed() {
        let m = model(40, 1, 0.3, 2);
        let batch: [(&[u32], &[u32]); 1] = [(&[4, 5], &[7, 8, EOS_ID])];
        let a = batch_loss_and_gradients(&m, &batch, SoftmaxMode::Sampled(5), &mut rng()).unwrap();
        let b = batch_loss_and_gradients(&m, &batch, SoftmaxMode::Sampled(5), &mut rng()).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.gradients, b.gradients);
    }

    #[test]
    fn rejects_empty_batches_and_bad_ids() {
        let m = model(10, 1, 0.3, 2);
        assert!(batch_loss_and_gradients(&m, &[], SoftmaxMode::Full, &mut rng()).is_err());
        assert!(batch_loss_and_gradients(&m, &[(&[4], &[PAD_ID])], SoftmaxMode::Full, &mut rng()).is_err());
        assert!(batch_loss_and_gradients(&m, &[(&[4], &[10])], SoftmaxMode::Full, &mut rng()).is_err());
    }

    /// Five-point central differences on random coordinates spread across
    /// every tensor.
    fn gradient_check(layers: usize, mode: SoftmaxMode) {
        let mut cfg = ModelConfig::new(20, 20, 8, 8, layers);
        cfg.init_scale = 0.4;
        cfg.seed = 11 + layers as u64;
        let mut m = Seq2SeqModel::new(cfg).unwrap();
        let batch: [(&[u32], &[u32]); 2] = [
            (&[PAD_ID, 4, 5, 6, 7], &[8, 9, 10, EOS_ID]),
            (&[11, 12, 3], &[13, 4, EOS_ID, PAD_ID]),
        ];
        let analytic = batch_loss_and_gradients(&m, &batch, mode, &mut rng()).unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        let mut pick = ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-3;
        let mut checked = 0;
        let mut worst = 0.0f64;
        while checked < 80 {
            let ti = pick.gen_range(0..names.len());
            let len = m.tensors()[ti].1.as_slice().len();
            let idx = pick.gen_range(0..len);
            let g = analytic.gradients.tensors()[ti].1.as_slice()[idx];
            if g.abs() < 1e-7 {
                continue;
            }
            let orig = m.tensors()[ti].1.as_slice()[idx];
            let mut loss_at = |x: f64| {
                m.tensors_mut()[ti].1.as_mut_slice()[idx] = x;
                batch_loss_and_gradients(&m, &batch, mode, &mut rng()).unwrap().loss
            };
            let numeric = (8.0 * (loss_at(orig + eps) - loss_at(orig - eps))
                - (loss_at(orig + 2.0 * eps) - loss_at(orig - 2.0 * eps)))
                / (12.0 * eps);
            m.tensors_mut()[ti].1.as_mut_slice()[idx] = orig;
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs());
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{}[{idx}]: analytic {g} numeric {numeric}", names[ti]);
            checked += 1;
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_one_layer() {
        gradient_check(1, SoftmaxMode::Full);
    }

    #[test]
    fn gradients_match_finite_differences_two_layers() {
        gradient_check(2, SoftmaxMode::Full);
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        gradient_check(2, SoftmaxMode::Sampled(6));
    }
}
