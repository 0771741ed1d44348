//! LSTM cell without peephole connections.

use rand::Rng;

use super::{NmtError, Result};
use crate::linalg::{sigmoid, Matrix};

/// Weights over the concatenated `[x, h_prev]`, stacked as four row blocks in
/// gate order input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub weights: Matrix,
    pub bias: Matrix,
    input_size: usize,
    hidden_size: usize,
}

/// Values kept from a forward step for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmCache {
    z: Vec<f64>,
    /// activated gates `[i, f, o, g]`
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            weights: Matrix::zeros(4 * hidden_size, input_size + hidden_size),
            bias: Matrix::zeros(4 * hidden_size, 1),
            input_size,
            hidden_size,
        }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero except the forget
    /// gate which starts at `forget_bias`.
    pub fn init<R: Rng + ?Sized>(
        input_size: usize,
        hidden_size: usize,
        scale: f64,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(input_size, hidden_size);
        p.weights = Matrix::uniform(4 * hidden_size, input_size + hidden_size, scale, rng);
        for b in &mut p.bias.as_mut_slice()[hidden_size..2 * hidden_size] {
            *b = forget_bias;
        }
        p
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// Block of the stacked weights belonging to one gate (0 = i, 1 = f,
    /// 2 = o, 3 = c).
    pub fn gate_rows(&self, gate: usize) -> std::ops::Range<usize> {
        gate * self.hidden_size..(gate + 1) * self.hidden_size
    }

    /// One step:
    ///
    /// ```text
    /// i = σ(W_i·[x, h] + B_i)   f = σ(W_f·[x, h] + B_f)   o = σ(W_o·[x, h] + B_o)
    /// c = f ⊙ c_prev + i ⊙ tanh(W_c·[x, h] + B_c)
    /// h = o ⊙ tanh(c)
    /// ```
    pub fn forward(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmCache) {
        let hs = self.hidden_size;
        debug_assert_eq!(x.len(), self.input_size);
        debug_assert_eq!(h_prev.len(), hs);
        let mut z = Vec::with_capacity(self.input_size + hs);
        z.extend_from_slice(x);
        z.extend_from_slice(h_prev);
        let mut gates = self.bias.as_slice().to_vec();
        self.weights.matvec_acc(&z, &mut gates);
        for v in &mut gates[..3 * hs] {
            *v = sigmoid(*v);
        }
        for v in &mut gates[3 * hs..] {
            *v = v.tanh();
        }
        let mut c = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        let mut tanh_c = vec![0.0; hs];
        for k in 0..hs {
            let (i, f, o, g) = (gates[k], gates[hs + k], gates[2 * hs + k], gates[3 * hs + k]);
            c[k] = f * c_prev[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
        let cache = LstmCache {
            z,
            gates,
            c_prev: c_prev.to_vec(),
            tanh_c,
        };
        (h, c, cache)
    }

    /// Checked step: shapes must agree and every input must be finite.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let hs = self.hidden_size;
        if x.len() != self.input_size || h_prev.len() != hs || c_prev.len() != hs {
            return Err(NmtError::Shape(format!(
                "cell expects input {} and state {hs}, got {}, {}, {}",
                self.input_size,
                x.len(),
                h_prev.len(),
                c_prev.len()
            )));
        }
        if let Some(v) = x.iter().chain(h_prev).chain(c_prev).find(|v| !v.is_finite()) {
            return Err(NmtError::NonFinite(format!("cell input {v}")));
        }
        let (h, c, _) = self.forward(x, h_prev, c_prev);
        Ok((h, c))
    }

    /// Backpropagates `dh`, `dc` through one step, accumulating parameter
    /// gradients into `grad`. Returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(
        &self,
        cache: &LstmCache,
        dh: &[f64],
        dc_next: &[f64],
        grad: &mut LstmParams,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden_size;
        let g = &cache.gates;
        let mut da = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for k in 0..hs {
            let (i, f, o, gg) = (g[k], g[hs + k], g[2 * hs + k], g[3 * hs + k]);
            let tc = cache.tanh_c[k];
            let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
            da[k] = dc * gg * i * (1.0 - i);
            da[hs + k] = dc * cache.c_prev[k] * f * (1.0 - f);
            da[2 * hs + k] = dh[k] * tc * o * (1.0 - o);
            da[3 * hs + k] = dc * i * (1.0 - gg * gg);
            dc_prev[k] = dc * f;
        }
        grad.weights.add_outer(&da, &cache.z);
        for (b, d) in grad.bias.as_mut_slice().iter_mut().zip(&da) {
            *b += d;
        }
        let mut dz = vec![0.0; self.input_size + hs];
        self.weights.matvec_t_acc(&da, &mut dz);
        let dh_prev = dz.split_off(self.input_size);
        (dz, dh_prev, dc_prev)
    }
}
