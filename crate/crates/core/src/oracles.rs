//! Independent numerical oracles for test suites.
//!
//! Everything in this module is deliberately kept apart from the tape: the
//! finite-difference routines only ever call a black-box evaluation closure,
//! and the straight-line MLP loss below recomputes forward passes with plain
//! loops. Test code compares the library against these; the library never
//! calls them.

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let fp = f(&work);
        work[i] = theta[i] - eps;
        let fm = f(&work);
        work[i] = theta[i];
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Central finite-difference Hessian-vector product,
/// `(g(theta + eps v) - g(theta - eps v)) / (2 eps)`.
pub fn fd_hvp(
    grad_f: impl Fn(&[f64]) -> Vec<f64>,
    theta: &[f64],
    v: &[f64],
    eps: f64,
) -> Vec<f64> {
    assert_eq!(theta.len(), v.len());
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad_f(&plus);
    let gm = grad_f(&minus);
    gp.iter().zip(gm.iter()).map(|(p, m)| (p - m) / (2.0 * eps)).collect()
}

/// Largest relative error between two vectors, with an absolute floor so
/// near-zero entries do not explode the ratio.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Straight-line reimplementation of a dense MLP loss: plain nested loops,
/// no tape, no masks, no gates. Weights are row-major `[in, out]`, layer
/// activations apply to every layer except the last.
pub struct PlainMlp {
    pub widths: Vec<usize>,
    pub tanh_hidden: bool,
}

impl PlainMlp {
    /// Forward pass returning the logits/outputs for a batch.
    pub fn forward(&self, params: &[f64], inputs: &[f64], batch: usize) -> Vec<f64> {
        let mut offset = 0;
        let mut act = inputs.to_vec();
        let mut in_dim = self.widths[0];
        for (li, &out_dim) in self.widths[1..].iter().enumerate() {
            let w = &params[offset..offset + in_dim * out_dim];
            offset += in_dim * out_dim;
            let b = &params[offset..offset + out_dim];
            offset += out_dim;
            let mut next = vec![0.0; batch * out_dim];
            for s in 0..batch {
                for j in 0..out_dim {
                    let mut z = b[j];
                    for i in 0..in_dim {
                        z += act[s * in_dim + i] * w[i * out_dim + j];
                    }
                    let last = li == self.widths.len() - 2;
                    next[s * out_dim + j] = if last {
                        z
                    } else if self.tanh_hidden {
                        z.tanh()
                    } else if z > 0.0 {
                        z
                    } else {
                        0.0
                    };
                }
            }
            act = next;
            in_dim = out_dim;
        }
        act
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Mean softmax cross-entropy over a batch, stable shift included.
    pub fn cross_entropy_loss(
        &self,
        params: &[f64],
        inputs: &[f64],
        labels: &[usize],
        batch: usize,
    ) -> f64 {
        let k = *self.widths.last().unwrap();
        let logits = self.forward(params, inputs, batch);
        let mut total = 0.0;
        for s in 0..batch {
            let row = &logits[s * k..(s + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
            total += sum.ln() - (row[labels[s]] - m);
        }
        total / batch as f64
    }

    /// Smallest |pre-activation| over all hidden units, used by gradcheck
    /// suites to reject batches that sit close to a relu kink (finite
    /// differences straddle the kink there and disagree with the
    /// subgradient by design).
    pub fn min_abs_preactivation(&self, params: &[f64], inputs: &[f64], batch: usize) -> f64 {
        let mut offset = 0;
        let mut act = inputs.to_vec();
        let mut in_dim = self.widths[0];
        let mut min_abs = f64::INFINITY;
        for (li, &out_dim) in self.widths[1..].iter().enumerate() {
            let w = &params[offset..offset + in_dim * out_dim];
            offset += in_dim * out_dim;
            let b = &params[offset..offset + out_dim];
            offset += out_dim;
            let last = li == self.widths.len() - 2;
            let mut next = vec![0.0; batch * out_dim];
            for s in 0..batch {
                for j in 0..out_dim {
                    let mut z = b[j];
                    for i in 0..in_dim {
                        z += act[s * in_dim + i] * w[i * out_dim + j];
                    }
                    if !last {
                        min_abs = min_abs.min(z.abs());
                    }
                    next[s * out_dim + j] = if last {
                        z
                    } else if self.tanh_hidden {
                        z.tanh()
                    } else if z > 0.0 {
                        z
                    } else {
                        0.0
                    };
                }
            }
            act = next;
            in_dim = out_dim;
        }
        min_abs
    }

    /// Mean squared error over all outputs.
    pub fn mse_loss(&self, params: &[f64], inputs: &[f64], targets: &[f64], batch: usize) -> f64 {
        let out = self.forward(params, inputs, batch);
        let n = out.len();
        assert_eq!(targets.len(), n);
        let _ = batch;
        out.iter()
            .zip(targets.iter())
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>()
            / n as f64
    }
}
