//! Numerical verification of the theory the scores lean on: gradient flow,
//! the empirical NTK, the chain-rule identity connecting them, and the
//! second-order Taylor behaviour of predictions and gradient norm.
//!
//! The identity check computes both sides through genuinely different
//! pipelines: `gf_direct` is one backward pass over the loss, while
//! `gf_via_ntk` assembles per-output prediction gradients into a Gram
//! matrix and contracts it with the loss-vs-prediction gradient. Agreement
//! to 1e-8 relative is the module's core theorem check.
//!
//! Loss conventions are the crate's own (mean cross-entropy / mean squared
//! error without a 1/2 factor); the identity holds for any scalar loss.

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::model::{Batch, GraphOpts, Model};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Default cap on NTK probe batches; the Gram matrix is quadratic in
/// (samples x outputs).
pub const DEFAULT_NTK_CAP: usize = 32;

#[derive(Clone, Debug, Serialize)]
pub struct TaylorError {
    pub delta_norm: f64,
    pub prediction_error: f64,
    pub gradnorm_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub gf_direct: f64,
    pub gf_via_ntk: f64,
    /// Row-major Gram matrix over flattened (sample, output) pairs.
    pub ntk: Vec<Vec<f64>>,
    pub taylor: Vec<TaylorError>,
    /// Samples actually used for the NTK probe.
    pub probe_samples: usize,
}

/// Squared gradient norm of the loss over the batch.
pub fn gradient_flow(model: &Model, batch: &Batch) -> Result<f64> {
    let lg = model.loss_grad_flat(batch)?;
    Ok(lg.grad.iter().map(|g| g * g).sum())
}

/// Per-(sample, output) prediction gradients: one backward pass per output
/// entry, rows in the output's row-major order.
fn prediction_jacobian(model: &Model, inputs: &Tensor) -> Result<(Vec<Vec<f64>>, Tensor)> {
    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, inputs, GraphOpts::params_only())?;
    let y = tape.to_tensor(graph.output);
    let m = y.numel();
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let mut onehot = vec![0.0; m];
        onehot[j] = 1.0;
        let oh = tape.constant_from(tape.shape(graph.output).to_vec(), onehot);
        let picked = tape.mul(graph.output, oh)?;
        let scalar = tape.sum_all(picked)?;
        let g = tape.grad(scalar, &graph.param_ids)?;
        let mut row = Vec::with_capacity(model.param_count());
        for t in &g.grads {
            row.extend_from_slice(t.data());
        }
        rows.push(row);
    }
    Ok((rows, y))
}

/// Empirical NTK on a probe batch: Gram matrix of prediction gradients.
/// Batches larger than `cap` are refused (quadratic memory).
pub fn ntk_with_cap(model: &Model, inputs: &Tensor, cap: usize) -> Result<Vec<Vec<f64>>> {
    let samples = inputs.shape()[0];
    if samples > cap {
        return Err(CoreError::SizeLimit(format!(
            "NTK probe batch has {samples} samples, cap is {cap}"
        )));
    }
    let (jac, _) = prediction_jacobian(model, inputs)?;
    Ok(gram(&jac))
}

pub fn ntk(model: &Model, inputs: &Tensor) -> Result<Vec<Vec<f64>>> {
    ntk_with_cap(model, inputs, DEFAULT_NTK_CAP)
}

#[allow(clippy::needless_range_loop)]
fn gram(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = rows.len();
    let mut k = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let v: f64 = rows[i].iter().zip(rows[j].iter()).map(|(a, b)| a * b).sum();
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

/// Both sides of the gradient-flow / NTK relation
/// `||g_L(theta)||^2 == g_L(Y)^T K g_L(Y)`, computed independently.
#[allow(clippy::needless_range_loop)]
pub fn gf_ntk_identity(model: &Model, batch: &Batch, cap: usize) -> Result<(f64, f64)> {
    let samples = batch.inputs.shape()[0];
    if samples > cap {
        return Err(CoreError::SizeLimit(format!(
            "NTK probe batch has {samples} samples, cap is {cap}"
        )));
    }
    let gf_direct = gradient_flow(model, batch)?;

    // dL/dY on a fresh tape: parameters constant, differentiate the loss
    // with respect to the output node itself.
    let mut tape = Tape::new();
    let (graph, loss) = model.build_loss(&mut tape, batch, GraphOpts::params_only())?;
    let dl_dy = {
        let g = tape.backward_graph(loss, &[graph.output])?;
        match g[0] {
            Some(id) => tape.value(id).to_vec(),
            None => vec![0.0; tape.value(graph.output).len()],
        }
    };

    let (jac, _) = prediction_jacobian(model, batch.inputs)?;
    let k = gram(&jac);
    let m = dl_dy.len();
    let mut gf_via = 0.0;
    for i in 0..m {
        for j in 0..m {
            gf_via += dl_dy[i] * k[i][j] * dl_dy[j];
        }
    }
    Ok((gf_direct, gf_via))
}

/// Linearization residuals for predictions and gradient norm.
///
/// For each direction d and step s, with delta = s * d:
/// `e_Y = ||Y(theta+delta) - Y(theta) - J delta||_2` and
/// `e_G = | ||g(theta+delta)||^2 - ||g||^2 - 2 (H g)^T delta |`.
pub fn taylor_probe(
    model: &Model,
    batch: &Batch,
    directions: &[Vec<f64>],
    steps: &[f64],
) -> Result<Vec<TaylorError>> {
    let theta = model.flatten_params();
    let p = theta.len();
    for d in directions {
        if d.len() != p {
            return Err(CoreError::Contract(format!(
                "direction has {} entries, model has {p} parameters",
                d.len()
            )));
        }
    }
    let (jac, y0) = prediction_jacobian(model, batch.inputs)?;
    let lg = model.loss_grad_flat(batch)?;
    let g_norm2: f64 = lg.grad.iter().map(|g| g * g).sum();
    let hg = model.loss_hvp_flat(batch, &lg.grad)?;

    let mut out = Vec::with_capacity(directions.len() * steps.len());
    for d in directions {
        for &s in steps {
            let delta: Vec<f64> = d.iter().map(|di| s * di).collect();
            let delta_norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();

            let mut perturbed = model.clone();
            let theta1: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, dl)| t + dl).collect();
            perturbed.set_params(&theta1)?;

            let y1 = perturbed.forward(batch.inputs)?;
            let mut e_y2 = 0.0;
            for (i, (a, b)) in y1.data().iter().zip(y0.data().iter()).enumerate() {
                let lin: f64 = jac[i].iter().zip(delta.iter()).map(|(j, dl)| j * dl).sum();
                let r = a - b - lin;
                e_y2 += r * r;
            }

            let lg1 = perturbed.loss_grad_flat(batch)?;
            let g1_norm2: f64 = lg1.grad.iter().map(|g| g * g).sum();
            let lin_g: f64 = hg.iter().zip(delta.iter()).map(|(h, dl)| 2.0 * h * dl).sum();
            let e_g = (g1_norm2 - g_norm2 - lin_g).abs();

            out.push(TaylorError {
                delta_norm,
                prediction_error: e_y2.sqrt(),
                gradnorm_error: e_g,
            });
        }
    }
    Ok(out)
}

/// Random unit directions in flat parameter space.
pub fn random_unit_directions(param_count: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut d: Vec<f64> = (0..param_count).map(|_| rng.normal()).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut d {
                *x /= n;
            }
            d
        })
        .collect()
}

/// Least-squares slope of ln(err) against ln(x).
pub fn log_log_slope(xs: &[f64], errs: &[f64]) -> f64 {
    assert_eq!(xs.len(), errs.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(ly.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(mat: &[Vec<f64>]) -> Vec<f64> {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn min_eigenvalue(mat: &[Vec<f64>]) -> f64 {
    symmetric_eigenvalues(mat)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Frobenius norm of the difference of two matrices.
pub fn frobenius_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (ra, rb) in a.iter().zip(b.iter()) {
        for (x, y) in ra.iter().zip(rb.iter()) {
            s += (x - y) * (x - y);
        }
    }
    s.sqrt()
}

/// Full diagnostics pass: identity, NTK, and Taylor errors on one batch.
pub fn full_report(
    model: &Model,
    batch: &Batch,
    cap: usize,
    taylor_directions: usize,
    taylor_seed: u64,
) -> Result<DiagnosticsReport> {
    let (gf_direct, gf_via_ntk) = gf_ntk_identity(model, batch, cap)?;
    let k = ntk_with_cap(model, batch.inputs, cap)?;
    let dirs = random_unit_directions(model.param_count(), taylor_directions, taylor_seed);
    let steps = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
    let taylor = taylor_probe(model, batch, &dirs, &steps)?;
    Ok(DiagnosticsReport {
        gf_direct,
        gf_via_ntk,
        probe_samples: batch.inputs.shape()[0],
        ntk: k,
        taylor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Head, Targets};
    use crate::oracles::{fd_gradient, max_rel_error};

    /// 1 -> 1 linear neuron with masked bias: y = theta * x.
    fn linear_neuron(theta: f64) -> Model {
        let mut rng = Rng::seed_from_u64(0);
        let mut m =
            Model::mlp(1, &[], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        m.layers[0].weight.data_mut()[0] = theta;
        m.layers[0].bias_mask[0] = 0.0;
        m
    }

    #[test]
    fn gf_zero_at_minimum() {
        let model = linear_neuron(0.7);
        let inputs = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let targets = Targets::Values(model.forward(&inputs).unwrap());
        let gf = gradient_flow(&model, &Batch { inputs: &inputs, targets: &targets }).unwrap();
        assert_eq!(gf, 0.0);
    }

    #[test]
    fn gf_scales_quadratically_with_loss_scale() {
        let mut rng = Rng::seed_from_u64(3);
        let model = Model::mlp(2, &[4], 1, Activation::Tanh, Head::Regression, &mut rng).unwrap();
        let inputs = Tensor::from_fn(&[5, 2], |i| (i as f64 * 0.3).sin());
        let values = Tensor::from_fn(&[5, 1], |i| (i as f64 * 0.7).cos());
        let targets = Targets::Values(values);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let gf1 = gradient_flow(&model, &batch).unwrap();

        // Scale the loss on the tape and recompute ||grad||^2 end to end.
        let c = 3.0;
        let mut tape = Tape::new();
        let (graph, loss) = model.build_loss(&mut tape, &batch, GraphOpts::params_only()).unwrap();
        let scaled = tape.scale(loss, c).unwrap();
        let g = tape.grad(scaled, &graph.param_ids).unwrap();
        let gf_c: f64 = g
            .grads
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum();
        assert!(
            (gf_c - c * c * gf1).abs() <= 1e-9 * gf_c.abs().max(1.0),
            "{gf_c} vs {}",
            c * c * gf1
        );
    }

    #[test]
    fn gf_matches_fd_gradient_oracle() {
        let mut rng = Rng::seed_from_u64(4);
        let model =
            Model::mlp(3, &[5], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        let inputs = Tensor::from_fn(&[6, 3], |_| rng.normal());
        let labels: Vec<usize> = (0..6).map(|_| rng.next_below(2) as usize).collect();
        let targets = Targets::Labels(labels);
        let batch = Batch { inputs: &inputs, targets: &targets };

        let gf = gradient_flow(&model, &batch).unwrap();
        let fd = fd_gradient(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                m.loss_value(&batch).unwrap()
            },
            &model.flatten_params(),
            1e-5,
        );
        let gf_fd: f64 = fd.iter().map(|g| g * g).sum();
        assert!(
            max_rel_error(&[gf], &[gf_fd], 1e-9) < 1e-6,
            "{gf} vs {gf_fd}"
        );
    }

    #[test]
    fn ntk_linear_neuron_is_x_squared() {
        let model = linear_neuron(0.9);
        let inputs = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let k = ntk(&model, &inputs).unwrap();
        assert_eq!(k.len(), 1);
        assert!((k[0][0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ntk_identical_samples_identical_rows() {
        let mut rng = Rng::seed_from_u64(6);
        let model =
            Model::mlp(2, &[4], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        let inputs = Tensor::new(vec![2, 2], vec![0.4, -0.7, 0.4, -0.7]).unwrap();
        let k = ntk(&model, &inputs).unwrap();
        for out in 0..2 {
            for (a, b) in k[out].iter().zip(k[2 + out].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ntk_is_psd() {
        for seed in 0..5u64 {
            let mut rng = Rng::seed_from_u64(seed);
            let model =
                Model::mlp(3, &[6], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
            let inputs = Tensor::from_fn(&[4, 3], |_| rng.normal());
            let k = ntk(&model, &inputs).unwrap();
            let min = min_eigenvalue(&k);
            assert!(min >= -1e-8, "seed {seed}: min eigenvalue {min}");
        }
    }

    #[test]
    fn ntk_cap_enforced() {
        let model = linear_neuron(1.0);
        let inputs = Tensor::zeros(&[40, 1]);
        assert!(matches!(ntk(&model, &inputs), Err(CoreError::SizeLimit(_))));
    }

    #[test]
    fn identity_linear_neuron_by_hand() {
        // theta=1, x=2, t=0; loss is (y-t)^2 so dL/dy = 2y = 4.
        // GF = (dL/dtheta)^2 = (4*2)^2 = 64; NTK = 4; via-NTK = 4*4*4 = 64.
        let model = linear_neuron(1.0);
        let inputs = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let targets = Targets::Values(Tensor::zeros(&[1, 1]));
        let (direct, via) =
            gf_ntk_identity(&model, &Batch { inputs: &inputs, targets: &targets }, 32).unwrap();
        assert!((direct - 64.0).abs() < 1e-12, "{direct}");
        assert!((via - 64.0).abs() < 1e-12, "{via}");
    }

    #[test]
    fn identity_zero_at_minimum() {
        let model = linear_neuron(0.3);
        let inputs = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let targets = Targets::Values(model.forward(&inputs).unwrap());
        let (direct, via) =
            gf_ntk_identity(&model, &Batch { inputs: &inputs, targets: &targets }, 32).unwrap();
        assert_eq!(direct, 0.0);
        assert!(via.abs() < 1e-20);
    }

    #[test]
    fn identity_random_mlps() {
        for seed in 0..10u64 {
            let mut rng = Rng::seed_from_u64(seed + 40);
            let model =
                Model::mlp(3, &[8, 5], 3, Activation::Tanh, Head::Classification, &mut rng)
                    .unwrap();
            let inputs = Tensor::from_fn(&[5, 3], |_| rng.normal());
            let labels: Vec<usize> = (0..5).map(|_| rng.next_below(3) as usize).collect();
            let targets = Targets::Labels(labels);
            let (direct, via) =
                gf_ntk_identity(&model, &Batch { inputs: &inputs, targets: &targets }, 32).unwrap();
            let rel = (direct - via).abs() / direct.abs().max(via.abs()).max(1e-300);
            assert!(rel < 1e-8, "seed {seed}: {direct} vs {via} rel {rel}");
        }
    }

    #[test]
    fn taylor_prediction_error_quadratic_product_model() {
        // Two chained 1x1 weights: Y = w0 * w1 at x = 1. Along the
        // direction moving both weights, e_Y(s) = s^2 exactly.
        let mut rng = Rng::seed_from_u64(0);
        let mut model =
            Model::mlp(1, &[1], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        model.layers[0].weight.data_mut()[0] = 1.0;
        model.layers[1].weight.data_mut()[0] = 1.0;
        model.layers[0].bias_mask[0] = 0.0;
        model.layers[1].bias_mask[0] = 0.0;
        let inputs = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let targets = Targets::Values(Tensor::zeros(&[1, 1]));
        let batch = Batch { inputs: &inputs, targets: &targets };
        // Params: [w0, b0, w1, b1]; move both weights by s.
        let dir = vec![1.0, 0.0, 1.0, 0.0];
        let errs = taylor_probe(&model, &batch, &[dir], &[0.1, 0.01]).unwrap();
        assert!((errs[0].prediction_error - 0.01).abs() < 1e-12);
        assert!((errs[1].prediction_error - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn taylor_gradnorm_exact_for_quadratic_loss() {
        // L = theta^2 => ||g||^2 = 4 theta^2; the expansion remainder is
        // exactly 4 delta^2.
        let model = linear_neuron(1.0);
        let inputs = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let targets = Targets::Values(Tensor::zeros(&[1, 1]));
        let batch = Batch { inputs: &inputs, targets: &targets };
        let dir = vec![1.0, 0.0];
        let errs = taylor_probe(&model, &batch, &[dir], &[0.1]).unwrap();
        assert!(
            (errs[0].gradnorm_error - 4.0 * 0.01).abs() < 1e-12,
            "{}",
            errs[0].gradnorm_error
        );
    }

    #[test]
    fn taylor_slope_quadratic_on_tanh_mlp() {
        let mut rng = Rng::seed_from_u64(21);
        let model =
            Model::mlp(2, &[8], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        let inputs = Tensor::from_fn(&[6, 2], |_| rng.normal());
        let labels: Vec<usize> = (0..6).map(|_| rng.next_below(2) as usize).collect();
        let targets = Targets::Labels(labels);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let dirs = random_unit_directions(model.param_count(), 1, 5);
        let steps = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
        let errs = taylor_probe(&model, &batch, &dirs, &steps).unwrap();
        let xs: Vec<f64> = errs.iter().map(|e| e.delta_norm).collect();
        let ey: Vec<f64> = errs.iter().map(|e| e.prediction_error).collect();
        let slope = log_log_slope(&xs, &ey);
        assert!((1.9..=2.1).contains(&slope), "slope {slope}");
    }

    #[test]
    fn jacobi_eigenvalues_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let m = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let mut ev = symmetric_eigenvalues(&m);
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ev[0] - 1.0).abs() < 1e-10);
        assert!((ev[1] - 3.0).abs() < 1e-10);
    }
}
