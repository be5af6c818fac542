//! Per-parameter importance scores and global mask construction.
//!
//! The curvature-aware scores rank parameter i by its contribution
//! `theta_i * (H g)_i` to the change of the gradient norm: `crop` keeps the
//! entries whose removal least disturbs the gradient flow (absolute value,
//! lowest pruned), while `grasp` ranks the signed negation of the same
//! product. `snip`, `magnitude`, and `random` are the usual baselines. The
//! Hessian-gradient product is an exact nested-differentiation HVP, never a
//! finite-difference estimate: FD noise reorders the bottom of the ranking
//! exactly where pruning decisions happen.

use crate::error::{CoreError, Result};
use crate::model::{Batch, Model, ParamIndexMap, Targets};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Crop,
    Grasp,
    Snip,
    Magnitude,
    Random,
}

impl Criterion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::Crop => "crop",
            Criterion::Grasp => "grasp",
            Criterion::Snip => "snip",
            Criterion::Magnitude => "magnitude",
            Criterion::Random => "random",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(Criterion::Crop),
            "grasp" => Ok(Criterion::Grasp),
            "snip" => Ok(Criterion::Snip),
            "magnitude" => Ok(Criterion::Magnitude),
            "random" => Ok(Criterion::Random),
            other => Err(CoreError::Config(format!(
                "unknown criterion {other:?} (expected crop|grasp|snip|magnitude|random)"
            ))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Importance values over the rankable parameter view.
#[derive(Clone, Debug)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub criterion: Criterion,
    /// Fingerprint of the scoring batch.
    pub batch_id: String,
    /// Set when the gradient vanished everywhere and all scores are zero.
    pub degenerate: bool,
}

/// Global binary keep mask over the rankable parameter view.
#[derive(Clone, Debug)]
pub struct PruningMask {
    pub keep: Vec<u8>,
    pub rho: f64,
    pub criterion: Criterion,
    /// Epoch at which the mask was built (0 = before training).
    pub epoch: usize,
    /// Set when layer protection reduced the pruned count below
    /// `round(rho * n)`; only possible on degenerate tiny layers.
    pub capped: bool,
}

impl PruningMask {
    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0).count()
    }

    pub fn apply(&self, model: &mut Model, map: &ParamIndexMap) -> Result<()> {
        model.apply_keep(map, &self.keep)
    }
}

/// FNV-1a fingerprint of the batch contents.
pub fn batch_fingerprint(batch: &Batch) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for v in batch.inputs.data() {
        eat(&v.to_le_bytes());
    }
    match batch.targets {
        Targets::Labels(ls) => {
            for &l in ls {
                eat(&(l as u64).to_le_bytes());
            }
        }
        Targets::Values(t) => {
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
    }
    format!("{:016x}-n{}", h, batch.inputs.shape()[0])
}

fn grad_and_hg(model: &Model, batch: &Batch) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let lg = model.loss_grad_flat(batch)?;
    if lg.grad.iter().all(|&g| g == 0.0) {
        return Ok((lg.grad, None));
    }
    let hg = model.loss_hvp_flat(batch, &lg.grad)?;
    Ok((lg.grad, Some(hg)))
}

fn curvature_scores(
    model: &Model,
    batch: &Batch,
    map: &ParamIndexMap,
    criterion: Criterion,
    combine: impl Fn(f64, f64) -> f64,
) -> Result<ScoreVector> {
    let theta = model.flatten_params();
    let (_, hg) = grad_and_hg(model, batch)?;
    let batch_id = batch_fingerprint(batch);
    match hg {
        Some(hg) => Ok(ScoreVector {
            values: (0..map.rankable_len())
                .map(|r| {
                    let i = map.rankable_to_full(r);
                    combine(theta[i], hg[i])
                })
                .collect(),
            criterion,
            batch_id,
            degenerate: false,
        }),
        None => Ok(ScoreVector {
            values: vec![0.0; map.rankable_len()],
            criterion,
            batch_id,
            degenerate: true,
        }),
    }
}

/// `|theta_i * (H g)_i|`, exact HVP in the gradient direction.
pub fn crop_scores(model: &Model, batch: &Batch, map: &ParamIndexMap) -> Result<ScoreVector> {
    curvature_scores(model, batch, map, Criterion::Crop, |t, h| (t * h).abs())
}

/// `-theta_i * (H g)_i`, signed; lowest pruned (gradient-flow maximizing).
pub fn grasp_scores(model: &Model, batch: &Batch, map: &ParamIndexMap) -> Result<ScoreVector> {
    curvature_scores(model, batch, map, Criterion::Grasp, |t, h| -(t * h))
}

/// `|theta_i * g_i|`: first-order loss sensitivity.
pub fn snip_scores(model: &Model, batch: &Batch, map: &ParamIndexMap) -> Result<ScoreVector> {
    let theta = model.flatten_params();
    let lg = model.loss_grad_flat(batch)?;
    let degenerate = lg.grad.iter().all(|&g| g == 0.0);
    Ok(ScoreVector {
        values: (0..map.rankable_len())
            .map(|r| {
                let i = map.rankable_to_full(r);
                (theta[i] * lg.grad[i]).abs()
            })
            .collect(),
        criterion: Criterion::Snip,
        batch_id: batch_fingerprint(batch),
        degenerate,
    })
}

pub fn magnitude_scores(model: &Model, map: &ParamIndexMap) -> ScoreVector {
    let theta = model.flatten_params();
    ScoreVector {
        values: (0..map.rankable_len())
            .map(|r| theta[map.rankable_to_full(r)].abs())
            .collect(),
        criterion: Criterion::Magnitude,
        batch_id: String::new(),
        degenerate: false,
    }
}

pub fn random_scores(map: &ParamIndexMap, seed: u64) -> ScoreVector {
    let mut rng = Rng::seed_from_u64(seed);
    ScoreVector {
        values: (0..map.rankable_len()).map(|_| rng.uniform()).collect(),
        criterion: Criterion::Random,
        batch_id: format!("seed{seed}"),
        degenerate: false,
    }
}

/// Score a model with the requested criterion on one batch.
pub fn score(
    model: &Model,
    batch: &Batch,
    map: &ParamIndexMap,
    criterion: Criterion,
    seed: u64,
) -> Result<ScoreVector> {
    match criterion {
        Criterion::Crop => crop_scores(model, batch, map),
        Criterion::Grasp => grasp_scores(model, batch, map),
        Criterion::Snip => snip_scores(model, batch, map),
        Criterion::Magnitude => Ok(magnitude_scores(model, map)),
        Criterion::Random => Ok(random_scores(map, seed)),
    }
}

/// Round-half-away-from-zero pruned count.
pub fn pruned_count_for(rho: f64, n: usize) -> usize {
    (rho * n as f64).round() as usize
}

/// Rank indices by (score ascending, index ascending): the pruning order.
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Build a global mask pruning `round(rho * n)` lowest-scoring parameters.
///
/// Ties are broken by pruning the lower flat index first. Layer protection:
/// every layer's top-scoring parameter (lowest index on ties) is never
/// pruned; the requested count is filled from the remaining pool in score
/// order. If protection leaves fewer prunable parameters than requested —
/// only possible on toy layers — the mask is capped and flagged.
pub fn build_mask(
    scores: &ScoreVector,
    rho: f64,
    map: &ParamIndexMap,
    epoch: usize,
) -> Result<PruningMask> {
    let n = map.rankable_len();
    if scores.values.len() != n {
        return Err(CoreError::Contract(format!(
            "score vector has {} entries, rankable count is {n}",
            scores.values.len()
        )));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(CoreError::InfeasibleRatio {
            rho,
            reason: "ratio must satisfy 0 <= rho < 1".into(),
        });
    }
    let k = pruned_count_for(rho, n);

    // Per-layer protected index: highest score, lowest index on ties.
    let num_layers = (0..n).map(|r| map.rankable_layer(r)).max().map_or(0, |m| m + 1);
    let mut protected: Vec<Option<usize>> = vec![None; num_layers];
    for r in 0..n {
        let l = map.rankable_layer(r);
        match protected[l] {
            None => protected[l] = Some(r),
            Some(best) => {
                if scores.values[r] > scores.values[best] {
                    protected[l] = Some(r);
                }
            }
        }
    }
    let mut is_protected = vec![false; n];
    for p in protected.iter().flatten() {
        is_protected[*p] = true;
    }

    let pool: Vec<usize> = ranking(&scores.values)
        .into_iter()
        .filter(|&r| !is_protected[r])
        .collect();
    if pool.is_empty() && k > 0 {
        return Err(CoreError::InfeasibleRatio {
            rho,
            reason: "every layer consists of a single protected parameter".into(),
        });
    }

    let capped = k > pool.len();
    let mut keep = vec![1u8; n];
    for &r in &pool[..k.min(pool.len())] {
        keep[r] = 0;
    }
    Ok(PruningMask {
        keep,
        rho,
        criterion: scores.criterion,
        epoch,
        capped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Head, Model};
    use crate::tensor::Tensor;

    /// Single dense layer 2->1, masked-out bias, weights (w1, w2), and a
    /// two-sample regression batch chosen so the loss is exactly
    /// w1^2 + 1.5 w2^2 (gradient (2w1, 3w2), Hessian diag(2, 3)).
    fn quadratic_fixture(w: [f64; 2]) -> (Model, Tensor, Targets) {
        let mut rng = Rng::seed_from_u64(0);
        let mut model =
            Model::mlp(2, &[], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        model.layers[0].weight.data_mut().copy_from_slice(&w);
        model.layers[0].bias_mask[0] = 0.0;
        let inputs =
            Tensor::new(vec![2, 2], vec![2f64.sqrt(), 0.0, 0.0, 3f64.sqrt()]).unwrap();
        let targets = Targets::Values(Tensor::zeros(&[2, 1]));
        (model, inputs, targets)
    }

    /// Two dense layers with two rankable weights each; scores supplied by
    /// the caller in flat order (layer 0 then layer 1).
    fn two_layer_scores(values: Vec<f64>) -> (ScoreVector, ParamIndexMap) {
        let mut rng = Rng::seed_from_u64(1);
        let model =
            Model::mlp(1, &[2], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        let map = model.param_index_map(false);
        assert_eq!(map.rankable_len(), values.len());
        (
            ScoreVector {
                values,
                criterion: Criterion::Magnitude,
                batch_id: String::new(),
                degenerate: false,
            },
            map,
        )
    }

    #[test]
    fn crop_grasp_snip_on_known_quadratic() {
        let (model, inputs, targets) = quadratic_fixture([1.0, 1.0]);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let map = model.param_index_map(false);

        let crop = crop_scores(&model, &batch, &map).unwrap();
        assert!((crop.values[0] - 4.0).abs() < 1e-10, "{:?}", crop.values);
        assert!((crop.values[1] - 9.0).abs() < 1e-10);

        let grasp = grasp_scores(&model, &batch, &map).unwrap();
        assert!((grasp.values[0] + 4.0).abs() < 1e-10);
        assert!((grasp.values[1] + 9.0).abs() < 1e-10);

        let snip = snip_scores(&model, &batch, &map).unwrap();
        assert!((snip.values[0] - 2.0).abs() < 1e-10);
        assert!((snip.values[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn zero_parameter_scores_zero_regardless_of_curvature() {
        let (model, inputs, targets) = quadratic_fixture([0.0, 1.0]);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let map = model.param_index_map(false);
        let crop = crop_scores(&model, &batch, &map).unwrap();
        assert_eq!(crop.values[0], 0.0);
    }

    #[test]
    fn grasp_matches_negated_elementwise_product() {
        let (model, inputs, targets) = quadratic_fixture([0.8, -0.4]);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let map = model.param_index_map(false);
        let crop = crop_scores(&model, &batch, &map).unwrap();
        let grasp = grasp_scores(&model, &batch, &map).unwrap();
        for (c, g) in crop.values.iter().zip(grasp.values.iter()) {
            assert!((c - g.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_gradient_flags_and_zeroes() {
        // Perfect fit at the minimum: gradient identically zero.
        let mut rng = Rng::seed_from_u64(1);
        let model =
            Model::mlp(1, &[], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        let inputs = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let targets = Targets::Values(model.forward(&inputs).unwrap());
        let batch = Batch { inputs: &inputs, targets: &targets };
        let map = model.param_index_map(false);
        let crop = crop_scores(&model, &batch, &map).unwrap();
        assert!(crop.degenerate);
        assert!(crop.values.iter().all(|&v| v == 0.0));
        let snip = snip_scores(&model, &batch, &map).unwrap();
        assert!(snip.degenerate);
    }

    #[test]
    fn magnitude_and_random_basics() {
        let (mut model, ..) = quadratic_fixture([0.0, 0.0]);
        model.layers[0].weight.data_mut().copy_from_slice(&[-3.0, 1.0]);
        let map = model.param_index_map(false);
        let mag = magnitude_scores(&model, &map);
        assert_eq!(mag.values, vec![3.0, 1.0]);

        let a = random_scores(&map, 42);
        let b = random_scores(&map, 42);
        assert_eq!(a.values, b.values);
        let c = random_scores(&map, 43);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn mask_simple_half() {
        // Scores (4, 9) in one layer next to a high-scoring second layer:
        // rho 0.5 on the two-parameter layer alone.
        let (model, inputs, targets) = quadratic_fixture([1.0, 1.0]);
        let batch = Batch { inputs: &inputs, targets: &targets };
        let map = model.param_index_map(false);
        let scores = crop_scores(&model, &batch, &map).unwrap();
        let mask = build_mask(&scores, 0.5, &map, 0).unwrap();
        assert_eq!(mask.keep, vec![0, 1]);
    }

    #[test]
    fn mask_prunes_exact_count_and_ties_by_index() {
        // Single layer of four weights, scores (1,1,1,3), rho 0.5: the tie
        // rule prunes the lower flat indices {0, 1}.
        let mut rng = Rng::seed_from_u64(1);
        let model =
            Model::mlp(2, &[], 2, Activation::Identity, Head::Regression, &mut rng).unwrap();
        let map = model.param_index_map(false);
        let scores = ScoreVector {
            values: vec![1.0, 1.0, 1.0, 3.0],
            criterion: Criterion::Magnitude,
            batch_id: String::new(),
            degenerate: false,
        };
        let mask = build_mask(&scores, 0.5, &map, 0).unwrap();
        assert_eq!(mask.keep, vec![0, 0, 1, 1]);
        assert_eq!(mask.pruned_count(), 2);
        assert!(!mask.capped);
    }

    #[test]
    fn mask_layer_protection_swaps_and_caps() {
        // Scores A=(0.1, 0.2), B=(5, 6), rho=0.75: protection keeps each
        // layer's best; kept set is {0.2, 6}.
        let (scores, map) = two_layer_scores(vec![0.1, 0.2, 5.0, 6.0]);
        let mask = build_mask(&scores, 0.75, &map, 0).unwrap();
        assert_eq!(mask.keep, vec![0, 1, 0, 1]);
        assert!(mask.capped, "protection reduced the count below round(rho*n)");
    }

    #[test]
    fn mask_rejects_bad_rho() {
        let (scores, map) = two_layer_scores(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(build_mask(&scores, 1.0, &map, 0).is_err());
        assert!(build_mask(&scores, -0.1, &map, 0).is_err());
    }

    #[test]
    fn mask_exact_counts_on_grid() {
        let mut rng = Rng::seed_from_u64(5);
        let model =
            Model::mlp(4, &[16, 16], 3, Activation::Relu, Head::Classification, &mut rng).unwrap();
        let map = model.param_index_map(false);
        let scores = random_scores(&map, 7);
        let n = map.rankable_len();
        for &rho in &[0.5, 0.8, 0.9, 0.95, 0.98, 0.99] {
            let mask = build_mask(&scores, rho, &map, 0).unwrap();
            assert_eq!(mask.pruned_count(), pruned_count_for(rho, n), "rho {rho}");
            assert!(!mask.capped);
            for li in 0..model.layers.len() {
                let kept_in_layer = (0..n)
                    .filter(|&r| map.rankable_layer(r) == li && mask.keep[r] == 1)
                    .count();
                assert!(kept_in_layer >= 1, "layer {li} fully pruned at rho {rho}");
            }
        }
    }

    #[test]
    fn mask_nesting_monotone_in_rho() {
        let mut rng = Rng::seed_from_u64(6);
        let model =
            Model::mlp(3, &[8], 2, Activation::Relu, Head::Classification, &mut rng).unwrap();
        let map = model.param_index_map(false);
        let scores = random_scores(&map, 11);
        let rhos = [0.1, 0.3, 0.5, 0.7, 0.9];
        let masks: Vec<_> = rhos
            .iter()
            .map(|&r| build_mask(&scores, r, &map, 0).unwrap())
            .collect();
        for w in masks.windows(2) {
            for i in 0..map.rankable_len() {
                if w[1].keep[i] == 1 {
                    assert_eq!(w[0].keep[i], 1, "kept sets must nest");
                }
            }
        }
    }

    #[test]
    fn infeasible_when_everything_protected() {
        // Single layer with a single weight: pool is empty.
        let mut rng = Rng::seed_from_u64(0);
        let model =
            Model::mlp(1, &[], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        let map = model.param_index_map(false);
        let scores = magnitude_scores(&model, &map);
        assert!(matches!(
            build_mask(&scores, 0.5, &map, 0),
            Err(CoreError::InfeasibleRatio { .. })
        ));
        let mask = build_mask(&scores, 0.0, &map, 0).unwrap();
        assert_eq!(mask.pruned_count(), 0);
    }

    #[test]
    fn random_scores_mean_near_half() {
        let mut rng = Rng::seed_from_u64(3);
        let model =
            Model::mlp(100, &[500], 100, Activation::Relu, Head::Classification, &mut rng).unwrap();
        let map = model.param_index_map(false);
        let s = random_scores(&map, 1);
        assert!(s.values.len() >= 100_000);
        let mean = s.values.iter().sum::<f64>() / s.values.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn apply_mask_zeroes_weights_and_masks() {
        let (mut model, ..) = quadratic_fixture([1.5, -2.5]);
        let map = model.param_index_map(false);
        let scores = magnitude_scores(&model, &map);
        let mask = build_mask(&scores, 0.5, &map, 0).unwrap();
        mask.apply(&mut model, &map).unwrap();
        assert_eq!(model.layers[0].weight_mask, vec![0.0, 1.0]);
        assert_eq!(model.layers[0].weight.data()[0], 0.0);
        assert_eq!(model.weight_sparsity(), 0.5);
    }
}
