//! Scalar reference implementations shared by unit tests.

use crate::numerics::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step computed gate by gate from `[d_in, 4h]`, `[h, 4h]` and
/// `[4h]` weights in (i, f, g, o) order.
pub fn lstm_step_oracle(wx: &Tensor, wh: &Tensor, b: &Tensor, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let pre = |gate: usize, j: usize| {
        let col = gate * n + j;
        let mut s = b.data()[col];
        for (t, xv) in x.iter().enumerate() {
            s += xv * wx.data()[t * 4 * n + col];
        }
        for (t, hv) in h.iter().enumerate() {
            s += hv * wh.data()[t * 4 * n + col];
        }
        s
    };
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for j in 0..n {
        let (i, f, g, o) = (sigmoid(pre(0, j)), sigmoid(pre(1, j)), pre(2, j).tanh(), sigmoid(pre(3, j)));
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// Runs the oracle over a whole sequence from a zero state; returns every
/// hidden state.
pub fn lstm_sequence_oracle(wx: &Tensor, wh: &Tensor, b: &Tensor, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = wh.shape()[0];
    let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
    xs.iter()
        .map(|x| {
            (h, c) = lstm_step_oracle(wx, wh, b, x, &h, &c);
            h.clone()
        })
        .collect()
}

/// `x·W + b` for row vector `x` and `[d_in, d_out]` weights.
pub fn linear_oracle(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    (0..d_out)
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * d_out + j]).sum::<f64>())
        .collect()
}
