//! Training objective and its exact gradients.
//!
//! For a batch of B queries:
//!
//! ```text
//! l_s   = mean_i (1 − cos(ẑ_i, ẑⁿ_i))
//! omega = mean_i (1 − cos(z_i, ẑ_i) + ‖z_i − ẑ_i‖²)
//! total = l_s + λ·omega
//! ```
//!
//! Cosine denominators are clamped at [`MIN_NORM`] so a collapsing head keeps
//! producing finite values. Gradients are backpropagated by hand through the
//! head, the attention softmax, the residual mean and both cosine terms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::bank::{NeighborSet, MIN_NORM};
use crate::error::{CapError, Result};
use crate::model::{
    forward_traced, to_f64_matrix, to_f64_row, ForwardOutput, ForwardTrace, HeadParams, HeadTrace,
    HeadVariant, ModelParams, ParamKind,
};

/// Loss weighting options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// Divide the squared-distance part of the constraint by D.
    pub euclid_per_dim: bool,
}

impl ObjectiveConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            euclid_per_dim: false,
        }
    }

    fn euclid_scale(&self, dim: usize) -> f64 {
        if self.euclid_per_dim {
            1.0 / dim as f64
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub omega: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(l_s: f64, omega: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_s,
        omega,
        lambda,
        total: l_s + lambda * omega,
    }
}

/// One gradient matrix per model parameter, in [`ModelParams::param_kinds`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<(ParamKind, Array2<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelParams) -> Self {
        let d = model.dim();
        Self {
            entries: model
                .param_kinds()
                .into_iter()
                .map(|k| (k, Array2::zeros((d, d))))
                .collect(),
        }
    }

    pub fn get(&self, kind: ParamKind) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(k, _)| *k == kind).map(|(_, g)| g)
    }

    /// Largest entrywise `|a − b| / max(|a|, |b|, floor)` across all matrices.
    pub fn max_relative_error(&self, other: &GradientSet, floor: f64) -> f64 {
        let mut worst = 0.0f64;
        for ((ka, a), (kb, b)) in self.entries.iter().zip(&other.entries) {
            assert_eq!(ka, kb, "gradient sets disagree on parameter order");
            for (x, y) in a.iter().zip(b) {
                let denom = x.abs().max(y.abs()).max(floor);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }
}

/// A training query with its precomputed neighbors.
#[derive(Debug, Clone, Copy)]
pub struct QuerySample<'a> {
    pub z: &'a [f32],
    pub neighbors: &'a NeighborSet,
}

pub(crate) fn clamped_cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(MIN_NORM);
    let nb = b.dot(&b).sqrt().max(MIN_NORM);
    a.dot(&b) / (na * nb)
}

/// Cosine with clamped norms and its gradients with respect to both arguments.
fn cosine_with_grads(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    let ca = na.max(MIN_NORM);
    let cb = nb.max(MIN_NORM);
    let ab = a.dot(&b);
    let cos = ab / (ca * cb);
    let mut ga = &b / (ca * cb);
    if na > MIN_NORM {
        ga.scaled_add(-cos / (ca * ca), &a);
    }
    let mut gb = &a / (ca * cb);
    if nb > MIN_NORM {
        gb.scaled_add(-cos / (cb * cb), &b);
    }
    (cos, ga, gb)
}

/// Mean of `1 − cos(ẑ, ẑⁿ)` over the batch.
pub fn similarity_loss(outputs: &[ForwardOutput]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(CapError::Empty("batch"));
    }
    let sum: f64 = outputs
        .iter()
        .map(|o| 1.0 - clamped_cosine(o.z_hat.view(), o.z_normal.view()))
        .sum();
    Ok(sum / outputs.len() as f64)
}

/// Mean of `1 − cos(z, ẑ) + ‖z − ẑ‖²` over the batch.
pub fn constraint_term(z_batch: &[Array1<f64>], z_hat_batch: &[Array1<f64>]) -> Result<f64> {
    constraint_term_scaled(z_batch, z_hat_batch, 1.0)
}

fn constraint_term_scaled(z_batch: &[Array1<f64>], z_hat_batch: &[Array1<f64>], euclid_scale: f64) -> Result<f64> {
    if z_batch.is_empty() {
        return Err(CapError::Empty("batch"));
    }
    if z_batch.len() != z_hat_batch.len() {
        return Err(CapError::LengthMismatch {
            what: "adapted batch",
            expected: z_batch.len(),
            actual: z_hat_batch.len(),
        });
    }
    let mut sum = 0.0;
    for (z, z_hat) in z_batch.iter().zip(z_hat_batch) {
        if z.len() != z_hat.len() {
            return Err(CapError::DimensionMismatch {
                expected: z.len(),
                actual: z_hat.len(),
            });
        }
        let diff = z - z_hat;
        sum += 1.0 - clamped_cosine(z.view(), z_hat.view()) + euclid_scale * diff.dot(&diff);
    }
    Ok(sum / z_batch.len() as f64)
}

fn check_batch(model: &ModelParams, batch: &[QuerySample<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(CapError::Empty("batch"));
    }
    for s in batch {
        for actual in [s.z.len(), s.neighbors.matrix.ncols()] {
            if actual != model.dim() {
                return Err(CapError::DimensionMismatch {
                    expected: model.dim(),
                    actual,
                });
            }
        }
    }
    Ok(())
}

/// Loss of a batch through the plain forward path (no backpropagation).
pub fn evaluate_loss(model: &ModelParams, batch: &[QuerySample<'_>], config: ObjectiveConfig) -> Result<LossBreakdown> {
    check_batch(model, batch)?;
    let outputs: Vec<ForwardOutput> = batch
        .iter()
        .map(|s| crate::model::forward(model, s.z, s.neighbors))
        .collect::<Result<_>>()?;
    let l_s = similarity_loss(&outputs)?;
    let z: Vec<Array1<f64>> = outputs.iter().map(|o| o.z.clone()).collect();
    let z_hat: Vec<Array1<f64>> = outputs.iter().map(|o| o.z_hat.clone()).collect();
    let omega = constraint_term_scaled(&z, &z_hat, config.euclid_scale(model.dim()))?;
    Ok(total_loss(l_s, omega, config.lambda))
}

struct SampleGrad {
    l_s: f64,
    omega: f64,
    grads: Vec<Array2<f64>>,
}

fn mask_positive(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Accumulates head-parameter gradients for rows `input` with upstream `g_out`.
fn head_backward(
    head: &HeadParams,
    input: ArrayView2<'_, f64>,
    trace: &HeadTrace,
    g_out: &Array2<f64>,
    g_first: &mut Array2<f64>,
    g_second: Option<&mut Array2<f64>>,
) {
    match head.variant {
        HeadVariant::Linear => {
            *g_first += &g_out.t().dot(&input);
        }
        HeadVariant::LinearRelu => {
            let mut g_pre = g_out.clone();
            mask_positive(&mut g_pre, &trace.pre);
            *g_first += &g_pre.t().dot(&input);
        }
        HeadVariant::LinearReluLinear => {
            let hidden = trace.hidden.as_ref().expect("two-layer trace");
            let second = head.second.as_ref().expect("two-layer head");
            if let Some(g_second) = g_second {
                *g_second += &g_out.t().dot(hidden);
            }
            let mut g_pre = g_out.dot(second);
            mask_positive(&mut g_pre, &trace.pre);
            *g_first += &g_pre.t().dot(&input);
        }
    }
}

fn sample_gradient(
    model: &ModelParams,
    z: ArrayView1<'_, f64>,
    m: ArrayView2<'_, f64>,
    config: ObjectiveConfig,
) -> Result<SampleGrad> {
    let (out, trace): (ForwardOutput, ForwardTrace) = forward_traced(model, z, m)?;
    let d = model.dim();
    let k = m.nrows();
    let euclid = config.euclid_scale(d);

    // Similarity term.
    let (cos_s, g_zhat_s, g_zn) = cosine_with_grads(out.z_hat.view(), out.z_normal.view());
    let l_s = 1.0 - cos_s;
    let mut g_zhat = -g_zhat_s;
    let g_zn = -g_zn;

    // Constraint term, weighted by λ.
    let (cos_c, _, g_zhat_c) = cosine_with_grads(z, out.z_hat.view());
    let diff = &out.z_hat - &z;
    let omega = 1.0 - cos_c + euclid * diff.dot(&diff);
    g_zhat.scaled_add(-config.lambda, &g_zhat_c);
    g_zhat.scaled_add(2.0 * euclid * config.lambda, &diff);

    // z_normal = wᵀ M̂ with w = (1 + Aᵀ1)/K.
    let m_hat = &out.m_hat;
    let w = &out.mix_weights;
    let mut g_mhat = Array2::<f64>::zeros((k, d));
    for (r, mut row) in g_mhat.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(w[r], &g_zn);
    }

    let mut grads: Vec<Array2<f64>> = model.param_kinds().iter().map(|_| Array2::zeros((d, d))).collect();
    let has_second = model.head.second.is_some();

    if let Some(attn) = &model.attention {
        let a = &out.attention_matrix;
        // Upstream gradient on A is the same for every row: g_w[c] / K.
        let g_w = m_hat.dot(&g_zn);
        let g_a_row = &g_w / k as f64;
        let mut g_s = Array2::<f64>::zeros((k, k));
        for r in 0..k {
            let a_r = a.row(r);
            let inner = a_r.dot(&g_a_row);
            for c in 0..k {
                g_s[[r, c]] = a_r[c] * (g_a_row[c] - inner);
            }
        }
        let scale = (d as f64).sqrt();
        let q = m_hat.dot(&attn.w_q);
        let key = m_hat.dot(&attn.w_k);
        let g_q = g_s.dot(&key) / scale;
        let g_key = g_s.t().dot(&q) / scale;
        let qi = 1 + usize::from(has_second);
        grads[qi] += &m_hat.t().dot(&g_q);
        grads[qi + 1] += &m_hat.t().dot(&g_key);
        g_mhat += &g_q.dot(&attn.w_q.t());
        g_mhat += &g_key.dot(&attn.w_k.t());
    }

    let (first, rest) = grads.split_first_mut().expect("head gradient");
    let mut second = if has_second { rest.first_mut() } else { None };
    head_backward(&model.head, m, &trace.neighbors, &g_mhat, first, second.as_deref_mut());
    let z_row = z.insert_axis(Axis(0));
    let g_zhat_row = g_zhat.insert_axis(Axis(0));
    head_backward(&model.head, z_row, &trace.query, &g_zhat_row, first, second);

    Ok(SampleGrad { l_s, omega, grads })
}

/// Total loss and its exact gradient with respect to every parameter matrix.
///
/// Per-sample work runs on the rayon pool; the reduction is sequential in
/// batch order, so results do not depend on the worker count.
pub fn gradients(
    model: &ModelParams,
    batch: &[QuerySample<'_>],
    config: ObjectiveConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    check_batch(model, batch)?;
    let per_sample: Vec<SampleGrad> = batch
        .par_iter()
        .map(|s| {
            let z = to_f64_row(s.z);
            let m = to_f64_matrix(&s.neighbors.matrix);
            sample_gradient(model, z.view(), m.view(), config)
        })
        .collect::<Result<_>>()?;

    let kinds = model.param_kinds();
    let mut set = GradientSet::zeros_like(model);
    let (mut l_s, mut omega) = (0.0, 0.0);
    for (sample, g) in per_sample.iter().enumerate() {
        for ((kind, acc), part) in set.entries.iter_mut().zip(&g.grads) {
            if part.iter().any(|v| !v.is_finite()) {
                return Err(CapError::NonFiniteGradient {
                    param: kind.name(),
                    sample,
                });
            }
            *acc += part;
        }
        l_s += g.l_s;
        omega += g.omega;
    }
    let n = batch.len() as f64;
    for (_, acc) in &mut set.entries {
        acc.mapv_inplace(|v| v / n);
    }
    debug_assert_eq!(kinds.len(), set.entries.len());
    Ok((total_loss(l_s / n, omega / n, config.lambda), set))
}

/// Central finite-difference estimate of the total-loss gradient.
///
/// Uses only the forward path, independent of the backpropagation in
/// [`gradients`].
pub fn finite_difference_oracle(
    model: &ModelParams,
    batch: &[QuerySample<'_>],
    config: ObjectiveConfig,
    step: f64,
) -> Result<GradientSet> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut set = GradientSet::zeros_like(model);
    let mut probe = model.clone();
    for (kind, grad) in &mut set.entries {
        let (rows, cols) = grad.dim();
        for i in 0..rows {
            for j in 0..cols {
                let original = model.param(*kind)[[i, j]];
                probe.param_mut(*kind)[[i, j]] = original + step;
                let plus = evaluate_loss(&probe, batch, config)?.total;
                probe.param_mut(*kind)[[i, j]] = original - step;
                let minus = evaluate_loss(&probe, batch, config)?.total;
                probe.param_mut(*kind)[[i, j]] = original;
                grad[[i, j]] = (plus - minus) / (2.0 * step);
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn output(z_hat: Array1<f64>, z_normal: Array1<f64>) -> ForwardOutput {
        ForwardOutput {
            z: z_hat.clone(),
            z_hat,
            m_hat: Array2::zeros((1, 2)),
            attention_matrix: array![[1.0]],
            z_normal,
            mix_weights: array![2.0],
        }
    }

    #[test]
    fn similarity_loss_examples() {
        let same = output(array![1.0, 2.0], array![1.0, 2.0]);
        assert!(similarity_loss(&[same.clone(), same]).unwrap().abs() < 1e-15);
        let orth = output(array![1.0, 0.0], array![0.0, 3.0]);
        assert!((similarity_loss(&[orth]).unwrap() - 1.0).abs() < 1e-15);
        let anti = output(array![1.0, -1.0], array![-2.0, 2.0]);
        assert!((similarity_loss(&[anti]).unwrap() - 2.0).abs() < 1e-15);
        assert!(similarity_loss(&[]).is_err());
    }

    #[test]
    fn similarity_loss_is_scale_invariant_in_normal_representation() {
        let a = output(array![0.3, -1.2, 2.0], array![1.0, 0.5, 0.25]);
        let mut b = a.clone();
        b.z_normal *= 10.0;
        let (la, lb) = (similarity_loss(&[a]).unwrap(), similarity_loss(&[b]).unwrap());
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn constraint_examples() {
        let z = vec![array![1.0, 0.0]];
        assert_eq!(constraint_term(&z, &z).unwrap(), 0.0);
        assert!((constraint_term(&z, &[array![0.0, 1.0]]).unwrap() - 3.0).abs() < 1e-15);
        assert!((constraint_term(&z, &[array![2.0, 0.0]]).unwrap() - 1.0).abs() < 1e-15);
        // Degenerate adapted vector: cosine treated as 0 via the clamp.
        assert!((constraint_term(&z, &[array![0.0, 0.0]]).unwrap() - 2.0).abs() < 1e-15);
        assert!(constraint_term(&z, &[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(0.1, 0.05, 2.0);
        assert!((b.total - 0.2).abs() < 1e-15);
        assert_eq!(total_loss(0.3, 0.7, 0.0).total, 0.3);
        assert_eq!(total_loss(0.3, 0.0, 100.0).total, 0.3);
    }

    fn random_neighbors(rng: &mut ChaCha8Rng, k: usize, d: usize) -> NeighborSet {
        NeighborSet {
            indices: (0..k).collect(),
            similarities: vec![0.0; k],
            matrix: Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0f32..1.5)),
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, variant: HeadVariant, attention: bool) -> ModelParams {
        let mut m = init_model(d, variant, attention, rng.random());
        for kind in m.param_kinds() {
            m.param_mut(kind)
                .mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
        }
        m
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for variant in HeadVariant::ALL {
            for attention in [false, true] {
                let (d, k) = (5, 3);
                let model = random_model(&mut rng, d, variant, attention);
                let zs: Vec<Vec<f32>> = (0..3)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.5)).collect())
                    .collect();
                let ns: Vec<NeighborSet> = (0..3).map(|_| random_neighbors(&mut rng, k, d)).collect();
                let batch: Vec<QuerySample> = zs
                    .iter()
                    .zip(&ns)
                    .map(|(z, n)| QuerySample { z, neighbors: n })
                    .collect();
                let cfg = ObjectiveConfig::new(0.7);
                let (loss, analytic) = gradients(&model, &batch, cfg).unwrap();
                let plain = evaluate_loss(&model, &batch, cfg).unwrap();
                assert!((loss.total - plain.total).abs() < 1e-12);
                let numeric = finite_difference_oracle(&model, &batch, cfg, 1e-5).unwrap();
                let err = analytic.max_relative_error(&numeric, 1e-6);
                assert!(err < 1e-4, "{variant:?} attention={attention}: rel err {err}");
            }
        }
    }

    #[test]
    fn constraint_gradient_vanishes_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = init_model(4, HeadVariant::Linear, false, 0);
        let z: Vec<f32> = (0..4).map(|_| rng.random_range(0.1f32..1.0)).collect();
        let ns = random_neighbors(&mut rng, 3, 4);
        let batch = [QuerySample { z: &z, neighbors: &ns }];
        // λ-only objective: drop the similarity term by comparing λ=1 and λ=0.
        let (_, with) = gradients(&model, &batch, ObjectiveConfig::new(1.0)).unwrap();
        let (_, without) = gradients(&model, &batch, ObjectiveConfig::new(0.0)).unwrap();
        let omega_grad = with.entries[0].1.clone() - &without.entries[0].1;
        assert!(omega_grad.iter().all(|v| v.abs() < 1e-12));

        let numeric_with = finite_difference_oracle(&model, &batch, ObjectiveConfig::new(1.0), 1e-5).unwrap();
        let numeric_without = finite_difference_oracle(&model, &batch, ObjectiveConfig::new(0.0), 1e-5).unwrap();
        let numeric_omega = numeric_with.entries[0].1.clone() - &numeric_without.entries[0].1;
        assert!(numeric_omega.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn duplicated_batch_gives_identical_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 4, HeadVariant::Linear, true);
        let zs: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let ns: Vec<NeighborSet> = (0..2).map(|_| random_neighbors(&mut rng, 2, 4)).collect();
        let batch: Vec<QuerySample> = zs.iter().zip(&ns).map(|(z, n)| QuerySample { z, neighbors: n }).collect();
        let doubled: Vec<QuerySample> = batch.iter().chain(batch.iter()).copied().collect();
        let cfg = ObjectiveConfig::new(2.0);
        let (l1, g1) = gradients(&model, &batch, cfg).unwrap();
        let (l2, g2) = gradients(&model, &doubled, cfg).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-14);
        assert!(g1.max_relative_error(&g2, 1e-12) < 1e-12);
    }

    #[test]
    fn finite_differences_are_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = random_model(&mut rng, 3, HeadVariant::Linear, true);
        let z: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ns = random_neighbors(&mut rng, 3, 3);
        let batch = [QuerySample { z: &z, neighbors: &ns }];
        let cfg = ObjectiveConfig::new(1.0);
        let (_, exact) = gradients(&model, &batch, cfg).unwrap();
        let max_abs = |g: &GradientSet| {
            g.entries
                .iter()
                .zip(&exact.entries)
                .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
                .fold(0.0f64, f64::max)
        };
        let coarse = max_abs(&finite_difference_oracle(&model, &batch, cfg, 2e-2).unwrap());
        let fine = max_abs(&finite_difference_oracle(&model, &batch, cfg, 1e-2).unwrap());
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn stationary_point_has_near_zero_estimates() {
        // Identity head, no attention, every neighbor equal to the query:
        // both loss terms sit at their minimum of zero.
        let model = init_model(3, HeadVariant::Linear, false, 0);
        let z = [0.5f32, 1.0, 0.25];
        let ns = NeighborSet {
            indices: vec![0, 1],
            similarities: vec![1.0, 1.0],
            matrix: Array2::from_shape_fn((2, 3), |(_, j)| z[j]),
        };
        let batch = [QuerySample { z: &z, neighbors: &ns }];
        let cfg = ObjectiveConfig::new(2.0);
        assert!(evaluate_loss(&model, &batch, cfg).unwrap().total.abs() < 1e-12);
        let numeric = finite_difference_oracle(&model, &batch, cfg, 1e-5).unwrap();
        assert!(numeric.entries[0].1.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_head_gradient_is_finite() {
        let mut model = init_model(3, HeadVariant::Linear, true, 2);
        model.head.first.fill(0.0);
        let z = [1.0f32, 0.5, 0.2];
        let ns = NeighborSet {
            indices: vec![0],
            similarities: vec![1.0],
            matrix: array![[0.3f32, 0.2, 0.9]],
        };
        let batch = [QuerySample { z: &z, neighbors: &ns }];
        let (loss, grads) = gradients(&model, &batch, ObjectiveConfig::new(0.0)).unwrap();
        assert_eq!(loss.l_s, 1.0);
        assert!(grads.entries.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn dimension_errors() {
        let model = init_model(3, HeadVariant::Linear, false, 0);
        let ns = NeighborSet {
            indices: vec![0],
            similarities: vec![1.0],
            matrix: array![[1.0f32, 0.0]],
        };
        let z = [1.0f32, 0.0];
        let batch = [QuerySample { z: &z, neighbors: &ns }];
        assert!(matches!(
            gradients(&model, &batch, ObjectiveConfig::new(1.0)),
            Err(CapError::DimensionMismatch { expected: 3, actual: 2 })
        ));
        assert!(matches!(gradients(&model, &[], ObjectiveConfig::new(1.0)), Err(CapError::Empty(_))));
    }
}
