use super::model::{DecoderState, Seq2SeqModel};
use super::{AttentionMatrix, NmtError, Result};
use crate::corpus::{EOS_ID, GO_ID, PAD_ID};

#[derive(Debug, Clone)]
pub struct Translation {
    /// Emitted tokens without the final EOS.
    pub tokens: Vec<u32>,
    /// One row per emitted token, one column per non-PAD source token.
    pub attention: AttentionMatrix,
    /// Total log-probability including the EOS step when one was produced.
    pub log_prob: f64,
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    rows: Vec<Vec<f64>>,
    log_prob: f64,
    state: DecoderState,
    finished: bool,
}

impl Hypothesis {
    /// Average log-probability per decoding step, EOS included.
    fn normalized(&self) -> f64 {
        let steps = self.tokens.len() + usize::from(self.finished);
        self.log_prob / steps.max(1) as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for `beam == 1`, beam search otherwise. Decoding stops at
/// EOS or after `max_len` tokens.
pub fn translate(model: &Seq2SeqModel, src: &[u32], max_len: usize, beam: usize) -> Result<Translation> {
    if max_len == 0 || beam == 0 {
        return Err(NmtError::InvalidConfig("max_len and beam must be at least 1".into()));
    }
    let src: Vec<u32> = src.iter().copied().filter(|&t| t != PAD_ID).collect();
    let enc = model.encode(&src)?;
    let start = Hypothesis {
        tokens: Vec::new(),
        rows: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        finished: false,
    };
    let best = if beam == 1 {
        let mut hyp = start;
        while hyp.tokens.len() < max_len {
            let y_prev = hyp.tokens.last().copied().unwrap_or(GO_ID);
            let out = model.decoder_step(y_prev, &hyp.state, &enc)?;
            let y = argmax(&out.distribution);
            hyp.log_prob += out.distribution[y].ln();
            if y as u32 == EOS_ID {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(y as u32);
            hyp.rows.push(out.weights);
            hyp.state = out.state;
        }
        hyp
    } else {
        let mut live = vec![start];
        let mut done: Vec<Hypothesis> = Vec::new();
        for _ in 0..max_len {
            let mut cands: Vec<Hypothesis> = Vec::new();
            for hyp in &live {
                let y_prev = hyp.tokens.last().copied().unwrap_or(GO_ID);
                let out = model.decoder_step(y_prev, &hyp.state, &enc)?;
                let mut order: Vec<usize> = (0..out.distribution.len()).collect();
                order.sort_by(|&a, &b| out.distribution[b].total_cmp(&out.distribution[a]).then(a.cmp(&b)));
                for &y in order.iter().take(beam) {
                    let mut next = Hypothesis {
                        tokens: hyp.tokens.clone(),
                        rows: hyp.rows.clone(),
                        log_prob: hyp.log_prob + out.distribution[y].ln(),
                        state: out.state.clone(),
                        finished: y as u32 == EOS_ID,
                    };
                    if !next.finished {
                        next.tokens.push(y as u32);
                        next.rows.push(out.weights.clone());
                    }
                    cands.push(next);
                }
            }
            cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            cands.truncate(beam);
            live.clear();
            for c in cands {
                if c.finished {
                    done.push(c);
                } else {
                    live.push(c);
                }
            }
            if live.is_empty() || done.len() >= beam {
                break;
            }
        }
        let pool = if done.is_empty() { live } else { done };
        pool.into_iter()
            .reduce(|a, b| if b.normalized() > a.normalized() { b } else { a })
            .expect("beam keeps at least one hypothesis")
    };
    let attention = AttentionMatrix::from_rows(src.len(), &best.rows)?;
    Ok(Translation {
        tokens: best.tokens,
        attention,
        log_prob: best.log_prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmt::ModelConfig;

    fn model(seed: u64) -> Seq2SeqModel {
        let mut cfg = ModelConfig::new(15, 15, 6, 6, 2);
        cfg.init_scale = 0.6;
        cfg.seed = seed;
        Seq2SeqModel::new(cfg).unwrap()
    }

    #[test]
    fn greedy_follows_argmax() {
        for seed in 0..5 {
            let m = model(seed);
            let src = [4, 7, 9];
            let t = translate(&m, &src, 6, 1).unwrap();
            let enc = m.encode(&src).unwrap();
            let mut state = m.initial_state();
            let mut y_prev = GO_ID;
            for (i, &y) in t.tokens.iter().enumerate() {
                let out = m.decoder_step(y_prev, &state, &enc).unwrap();
                assert_eq!(argmax(&out.distribution) as u32, y);
                assert_eq!(t.attention.row(i), out.weights.as_slice());
                state = out.state;
                y_prev = y;
            }
        }
    }

    #[test]
    fn attention_shape_matches_output() {
        for seed in 0..5 {
            let m = model(seed);
            for beam in [1, 3] {
                let t = translate(&m, &[PAD_ID, 4, 5, 6, 8], 7, beam).unwrap();
                assert_eq!(t.attention.rows(), t.tokens.len());
                assert_eq!(t.attention.cols(), 4);
                assert!(t.tokens.len() <= 7);
                assert!(t.attention.max_row_deviation().unwrap() < 1e-9);
                assert!(!t.tokens.contains(&EOS_ID));
            }
        }
    }

    #[test]
    fn beam_and_greedy_scores_are_finite() {
        for seed in 0..5 {
            let m = model(seed);
            let greedy = translate(&m, &[4, 5], 5, 1).unwrap();
            let wide = translate(&m, &[4, 5], 5, 4).unwrap();
            assert!(wide.log_prob.is_finite() && greedy.log_prob.is_finite());
        }
    }

    #[test]
    fn rejects_zero_limits() {
        let m = model(1);
        assert!(translate(&m, &[4], 0, 1).is_err());
        assert!(translate(&m, &[4], 3, 0).is_err());
    }
}
