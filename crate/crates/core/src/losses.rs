//! Scalar training objectives and their adapter gradients.
//!
//! * cross-entropy risk over ID rows,
//! * the energy-gradient (EDR) penalty, the squared magnitude of the
//!   adapter gradient of the per-sample log-sum-exp,
//! * the generator-coupled loss on worst-case shifted rows,
//! * their weighted total.
//!
//! Gradients are exact derivatives of the values as functions of
//! `(theta_I, theta_T)` with the generator held fixed. Generated rows are
//! recomputed from the current adapters, so the adapter gradient flows
//! through them.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CroftError, Result};
use crate::generator::{self, GeneratorParams};
use crate::grad::{self, ParamGradient, RowAdjoint};
use crate::model::{self, AdapterParams};

/// Which reading of the squared energy gradient to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdrVariant {
    /// `|| (1/N) sum_i grad lse_i ||^2`.
    #[default]
    MeanGrad,
    /// `(1/N) sum_i || grad lse_i ||^2`.
    PerSample,
}

impl std::str::FromStr for EdrVariant {
    type Err = CroftError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_grad" | "mean-grad" => Ok(EdrVariant::MeanGrad),
            "per_sample" | "per-sample" => Ok(EdrVariant::PerSample),
            other => Err(CroftError::Validation(format!("unknown EDR variant {other:?}"))),
        }
    }
}

/// Frozen features of one mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub image: ArrayView2<'a, f64>,
    pub text: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(image: ArrayView2<'a, f64>, text: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if image.ncols() != text.ncols() {
            return Err(CroftError::Dimension(format!(
                "image rows have {} columns, text rows {}",
                image.ncols(),
                text.ncols()
            )));
        }
        grad::check_labels(labels, image.nrows(), text.nrows())?;
        Ok(Batch { image, text, labels })
    }

    pub fn n(&self) -> usize {
        self.image.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_sim: f64,
    pub edr_variant: EdrVariant,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_sim", self.lambda_sim),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CroftError::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Component values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_id: f64,
    pub ce_gen: f64,
    pub similarity: f64,
    pub edr_id: f64,
    pub edr_gen: f64,
    /// Mean negative log-sum-exp; only used by the plain energy-minimization baseline.
    #[serde(default)]
    pub energy_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `ce_id + l1 (-l_sim sim + ce_gen) + l2 (edr_id + edr_gen + energy_reg)`.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.ce_id
            + w.lambda1 * (-w.lambda_sim * self.similarity + self.ce_gen)
            + w.lambda2 * (self.edr_id + self.edr_gen + self.energy_reg)
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("ce_id", self.ce_id),
            ("ce_gen", self.ce_gen),
            ("similarity", self.similarity),
            ("edr_id", self.edr_id),
            ("edr_gen", self.edr_gen),
            ("energy_reg", self.energy_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// EDR value for image-side rows `u` (adapted or generated), adapted text `v`,
/// frozen image rows `x` and frozen text rows `t0`, with its row adjoint.
pub(crate) fn edr_rows(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    x: ArrayView2<f64>,
    t0: ArrayView2<f64>,
    temperature: f64,
    variant: EdrVariant,
) -> Result<(f64, RowAdjoint)> {
    let (n, d) = u.dim();
    let k = v.nrows();
    let nf = n as f64;
    let tau = temperature;
    let sm = model::scores_from_adapted(u, v, tau)?;
    let (probs, _) = model::row_softmax(sm.scores.view());
    // w_i = theta_T t̄_i = sum_j p_ij v_j, t̄_i = sum_j p_ij b_j
    let w = probs.dot(&v);
    let tbar = probs.dot(&t0);

    let (value, d_w, d_u_direct, d_tbar) = match variant {
        EdrVariant::MeanGrad => {
            let m_a = w.t().dot(&x) * (tau / nf);
            let m_b = u.t().dot(&tbar) * (tau / nf);
            let value = m_a.iter().map(|a| a * a).sum::<f64>() + m_b.iter().map(|a| a * a).sum::<f64>();
            let r_a = m_a * 2.0;
            let r_b = m_b * 2.0;
            let d_w = x.dot(&r_a.t()) * (tau / nf);
            let d_u = tbar.dot(&r_b.t()) * (tau / nf);
            let d_tbar = u.dot(&r_b) * (tau / nf);
            (value, d_w, d_u, d_tbar)
        }
        EdrVariant::PerSample => {
            let sq = |m: ArrayView2<f64>| m.map_axis(Axis(1), |r| r.dot(&r));
            let (w2, x2, u2, t2) = (sq(w.view()), sq(x), sq(u), sq(tbar.view()));
            let c = tau * tau / nf;
            let value = c * (0..n).map(|i| w2[i] * x2[i] + u2[i] * t2[i]).sum::<f64>();
            let mut d_w = w.clone();
            let mut d_u = u.to_owned();
            let mut d_tbar = tbar.clone();
            for i in 0..n {
                d_w.row_mut(i).mapv_inplace(|a| a * 2.0 * c * x2[i]);
                d_u.row_mut(i).mapv_inplace(|a| a * 2.0 * c * t2[i]);
                d_tbar.row_mut(i).mapv_inplace(|a| a * 2.0 * c * u2[i]);
            }
            (value, d_w, d_u, d_tbar)
        }
    };

    let mut adj = RowAdjoint::zeros(n, k, d);
    adj.u += &d_u_direct;
    // W = P V, T̄ = P T0
    adj.v += &probs.t().dot(&d_w);
    let d_probs = d_w.dot(&v.t()) + d_tbar.dot(&t0.t());
    let d_scores = grad::softmax_backward(&probs, &d_probs);
    grad::scores_backward(&d_scores, u, v, tau, &mut adj);
    Ok((value, adj))
}

/// `(1/N) sum_i [lse_i - s_{i, y_i}]`.
pub fn cross_entropy_risk(batch: &Batch, params: &AdapterParams) -> Result<f64> {
    let u = model::adapt_image(batch.image, params)?;
    let v = model::adapt_text(batch.text, params)?;
    Ok(grad::cross_entropy_rows(u.view(), v.view(), batch.labels, params.temperature)?.0)
}

/// Squared energy-gradient magnitude over the batch rows.
pub fn edr_loss(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    params: &AdapterParams,
    variant: EdrVariant,
) -> Result<f64> {
    Ok(edr_loss_with_grad(image, text, params, variant)?.0)
}

pub fn edr_loss_with_grad(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    params: &AdapterParams,
    variant: EdrVariant,
) -> Result<(f64, ParamGradient)> {
    if image.nrows() == 0 {
        return Err(CroftError::Validation("EDR loss needs at least one row".into()));
    }
    let u = model::adapt_image(image, params)?;
    let v = model::adapt_text(text, params)?;
    let (value, adj) = edr_rows(u.view(), v.view(), image, text, params.temperature, variant)?;
    Ok((value, adj.to_params(image, text)))
}

/// Mean log-sum-exp `(1/N) sum_i lse_i`.
pub fn mean_lse(image: ArrayView2<f64>, text: ArrayView2<f64>, params: &AdapterParams) -> Result<f64> {
    let s = model::score_matrix(image, text, params)?;
    Ok(model::row_logsumexp(s.scores.view()).mean().unwrap_or(0.0))
}

/// Mean true-class score `(1/N) sum_i s_{i, y_i}`.
pub fn mean_true_score(batch: &Batch, params: &AdapterParams) -> Result<f64> {
    let s = model::score_matrix(batch.image, batch.text, params)?;
    let n = batch.n() as f64;
    Ok(batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| s.scores[[i, y]])
        .sum::<f64>()
        / n)
}

/// `-(lambda_sim/N) sum_i <generated_i, adapted_i> + CE(generated)`, with the
/// generated rows scored against adapted text features.
pub fn lc_loss(
    adapted_id: ArrayView2<f64>,
    generated: ArrayView2<f64>,
    text: ArrayView2<f64>,
    labels: &[usize],
    params: &AdapterParams,
    lambda_sim: f64,
) -> Result<f64> {
    if adapted_id.dim() != generated.dim() {
        return Err(CroftError::Dimension(format!(
            "adapted rows {:?} vs generated rows {:?}",
            adapted_id.dim(),
            generated.dim()
        )));
    }
    let v = model::adapt_text(text, params)?;
    let sim = generator::mean_similarity(generated, adapted_id);
    let (ce, _) = grad::cross_entropy_rows(generated, v.view(), labels, params.temperature)?;
    Ok(-lambda_sim * sim + ce)
}

/// [`lc_loss`] with the generated rows produced by `gen` from the adapted rows, and
/// its adapter gradient at fixed `gen`.
pub fn lc_loss_with_grad(
    batch: &Batch,
    params: &AdapterParams,
    gen: &GeneratorParams,
    lambda_sim: f64,
) -> Result<(f64, ParamGradient)> {
    let tau = params.temperature;
    let u = model::adapt_image(batch.image, params)?;
    let v = model::adapt_text(batch.text, params)?;
    let (n, d) = u.dim();
    let nf = n as f64;
    let cache = generator::generate_with_cache(u.view(), gen)?;
    let similarity = generator::mean_similarity(cache.rows.view(), u.view());
    let (ce_gen, adj_gen) = grad::cross_entropy_rows(cache.rows.view(), v.view(), batch.labels, tau)?;
    let mut d_gen = adj_gen.u;
    d_gen.scaled_add(-lambda_sim / nf, &u);
    let mut adj = RowAdjoint::zeros(n, v.nrows(), d);
    adj.u.scaled_add(-lambda_sim / nf, &cache.rows);
    adj.v += &adj_gen.v;
    let (d_u, _) = generator::generate_backward(&cache, u.view(), gen, &d_gen);
    adj.u += &d_u;
    Ok((
        -lambda_sim * similarity + ce_gen,
        adj.to_params(batch.image, batch.text),
    ))
}

/// Full objective value.
pub fn croft_total(
    batch: &Batch,
    params: &AdapterParams,
    gen: &GeneratorParams,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(croft_total_with_grad(batch, params, gen, weights)?.0)
}

/// Full objective value and its adapter gradient at fixed `gen`.
pub fn croft_total_with_grad(
    batch: &Batch,
    params: &AdapterParams,
    gen: &GeneratorParams,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ParamGradient)> {
    weights.validate()?;
    let tau = params.temperature;
    let u = model::adapt_image(batch.image, params)?;
    let v = model::adapt_text(batch.text, params)?;
    let (n, d) = u.dim();
    let k = v.nrows();
    let nf = n as f64;

    let (ce_id, adj_ce) = grad::cross_entropy_rows(u.view(), v.view(), batch.labels, tau)?;
    let (edr_id, adj_edr) = edr_rows(u.view(), v.view(), batch.image, batch.text, tau, weights.edr_variant)?;

    let gen_cache = generator::generate_with_cache(u.view(), gen)?;
    let uc = gen_cache.rows.view();
    let similarity = generator::mean_similarity(uc, u.view());
    let (ce_gen, adj_ce_gen) = grad::cross_entropy_rows(uc, v.view(), batch.labels, tau)?;
    let (edr_gen, adj_edr_gen) = edr_rows(uc, v.view(), batch.image, batch.text, tau, weights.edr_variant)?;

    let (l1, l2, ls) = (weights.lambda1, weights.lambda2, weights.lambda_sim);
    let mut adj = RowAdjoint::zeros(n, k, d);
    adj.scaled_add(1.0, &adj_ce);
    adj.scaled_add(l2, &adj_edr);

    // Adjoint of the generated rows, then pulled back through the generator.
    let mut d_gen: Array2<f64> = adj_ce_gen.u * l1;
    d_gen.scaled_add(l2, &adj_edr_gen.u);
    d_gen.scaled_add(-l1 * ls / nf, &u);
    adj.u.scaled_add(-l1 * ls / nf, &gen_cache.rows);
    adj.v.scaled_add(l1, &adj_ce_gen.v);
    adj.v.scaled_add(l2, &adj_edr_gen.v);
    let (d_u_from_gen, _) = generator::generate_backward(&gen_cache, u.view(), gen, &d_gen);
    adj.u += &d_u_from_gen;

    let mut breakdown = LossBreakdown {
        ce_id,
        ce_gen,
        similarity,
        edr_id,
        edr_gen,
        energy_reg: 0.0,
        total: 0.0,
    };
    breakdown.total = breakdown.recompose(weights);
    Ok((breakdown, adj.to_params(batch.image, batch.text)))
}

/// Cross-entropy plus `lambda2 * (1/N) sum_i (-lse_i)`: plain energy minimization on ID rows.
pub fn energy_min_with_grad(
    batch: &Batch,
    params: &AdapterParams,
    lambda2: f64,
) -> Result<(LossBreakdown, ParamGradient)> {
    if lambda2.is_nan() || lambda2 < 0.0 {
        return Err(CroftError::Validation(format!("lambda2 must be >= 0, got {lambda2}")));
    }
    let tau = params.temperature;
    let u = model::adapt_image(batch.image, params)?;
    let v = model::adapt_text(batch.text, params)?;
    let (ce_id, mut adj) = grad::cross_entropy_rows(u.view(), v.view(), batch.labels, tau)?;
    let sm = model::scores_from_adapted(u.view(), v.view(), tau)?;
    let (probs, lse) = model::row_softmax(sm.scores.view());
    let nf = batch.n() as f64;
    let energy_reg = -lse.sum() / nf;
    let d_scores = probs * (-lambda2 / nf);
    grad::scores_backward(&d_scores, u.view(), v.view(), tau, &mut adj);
    let breakdown = LossBreakdown {
        ce_id,
        energy_reg,
        total: ce_id + lambda2 * energy_reg,
        ..Default::default()
    };
    Ok((breakdown, adj.to_params(batch.image, batch.text)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{fd_gradient, max_relative_error, FlatParamVector};
    use crate::instance::Instance;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(inst: &Instance) -> Batch<'_> {
        Batch::new(inst.image.view(), inst.text.view(), &inst.labels).unwrap()
    }

    fn weights(l1: f64, l2: f64, ls: f64, v: EdrVariant) -> LossWeights {
        LossWeights {
            lambda1: l1,
            lambda2: l2,
            lambda_sim: ls,
            edr_variant: v,
        }
    }

    #[test]
    fn uniform_scores_give_log_k() {
        let image = array![[0.0, 0.0]];
        let text = Array2::eye(2);
        let text4 = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let p = AdapterParams::identity(2, 1.0);
        let b = Batch::new(image.view(), text4.view(), &[2]).unwrap();
        assert!((cross_entropy_risk(&b, &p).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy_risk(&b, &p).unwrap() - 1.3863).abs() < 1e-4);
        let image = array![[1.0, 0.0]];
        let b = Batch::new(image.view(), text.view(), &[0]).unwrap();
        let big = AdapterParams::identity(2, 1000.0);
        assert!(cross_entropy_risk(&b, &big).unwrap() <= 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = Instance::random(&mut rng, 6, 12, 5);
        let s = model::score_matrix(inst.image.view(), inst.text.view(), &inst.params).unwrap();
        let mut want = 0.0;
        for (i, &y) in inst.labels.iter().enumerate() {
            let row = s.scores.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / z).ln();
        }
        want /= inst.labels.len() as f64;
        assert!((cross_entropy_risk(&batch(&inst), &inst.params).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn edr_orthogonal_single_class_is_two() {
        let p = AdapterParams::identity(2, 1.0);
        let image = array![[1.0, 0.0]];
        let text = array![[0.0, 1.0]];
        let ps = edr_loss(image.view(), text.view(), &p, EdrVariant::PerSample).unwrap();
        let mg = edr_loss(image.view(), text.view(), &p, EdrVariant::MeanGrad).unwrap();
        assert!((ps - 2.0).abs() < 1e-12);
        assert!((mg - 2.0).abs() < 1e-12);
    }

    #[test]
    fn edr_opposite_gradients_cancel_in_mean() {
        let p = AdapterParams::identity(2, 1.0);
        let image = array![[1.0, 0.0], [-1.0, 0.0]];
        let text = array![[0.0, 1.0]];
        let mg = edr_loss(image.view(), text.view(), &p, EdrVariant::MeanGrad).unwrap();
        let ps = edr_loss(image.view(), text.view(), &p, EdrVariant::PerSample).unwrap();
        assert!(mg.abs() < 1e-15);
        assert!(ps > 0.0);
    }

    #[test]
    fn per_sample_edr_equals_squared_fd_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let inst = Instance::random(&mut rng, 5, 1, 4);
            let d = inst.d();
            let tau = inst.params.temperature;
            let ps = edr_loss(inst.image.view(), inst.text.view(), &inst.params, EdrVariant::PerSample).unwrap();
            let g = fd_gradient(
                |v| {
                    mean_lse(
                        inst.image.view(),
                        inst.text.view(),
                        &FlatParamVector(v.to_vec()).to_params(d, tau).unwrap(),
                    )
                    .unwrap()
                },
                FlatParamVector::from_params(&inst.params).as_slice(),
                1e-5,
            )
            .unwrap();
            let sq: f64 = g.iter().map(|a| a * a).sum();
            assert!(((ps - sq) / sq).abs() < 1e-4);
        }
    }

    #[test]
    fn jensen_mean_below_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let inst = Instance::random(&mut rng, 6, 12, 5);
            let mg = edr_loss(inst.image.view(), inst.text.view(), &inst.params, EdrVariant::MeanGrad).unwrap();
            let ps = edr_loss(inst.image.view(), inst.text.view(), &inst.params, EdrVariant::PerSample).unwrap();
            assert!(mg >= 0.0 && mg <= ps * (1.0 + 1e-12));
        }
    }

    #[test]
    fn lc_examples() {
        let u = array![[1.0, 2.0], [0.0, -1.0]];
        let text = Array2::eye(2);
        let p = AdapterParams::identity(2, 1.0);
        let labels = [0, 1];
        let lc = lc_loss(u.view(), u.view(), text.view(), &labels, &p, 1.0).unwrap();
        let (ce, _) = grad::cross_entropy_rows(u.view(), text.view(), &labels, 1.0).unwrap();
        assert!((lc - ce - (-(5.0 + 1.0) / 2.0)).abs() < 1e-12);

        let orth = array![[-2.0, 1.0], [1.0, 0.0]];
        let lc = lc_loss(u.view(), orth.view(), text.view(), &labels, &p, 1.0).unwrap();
        let (ce, _) = grad::cross_entropy_rows(orth.view(), text.view(), &labels, 1.0).unwrap();
        assert!((lc - ce).abs() < 1e-12);
    }

    #[test]
    fn lc_matches_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inst = Instance::random(&mut rng, 6, 10, 4);
        let u = model::adapt_image(inst.image.view(), &inst.params).unwrap();
        let g = generator::generate(u.view(), &inst.generator).unwrap();
        let v = model::adapt_text(inst.text.view(), &inst.params).unwrap();
        let lc = lc_loss(u.view(), g.view(), inst.text.view(), &inst.labels, &inst.params, 0.7).unwrap();
        let n = u.nrows();
        let mut want = 0.0;
        for i in 0..n {
            want -= 0.7 * g.row(i).dot(&u.row(i)) / n as f64;
            let s: Array1<f64> = (0..v.nrows())
                .map(|j| inst.params.temperature * g.row(i).dot(&v.row(j)))
                .collect();
            want += (s.mapv(f64::exp).sum().ln() - s[inst.labels[i]]) / n as f64;
        }
        assert!((lc - want).abs() < 1e-12);
    }

    #[test]
    fn total_reduces_to_ce_without_regularizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let inst = Instance::random(&mut rng, 6, 10, 4);
        let b = batch(&inst);
        let bd = croft_total(
            &b,
            &inst.params,
            &inst.generator,
            &weights(0.0, 0.0, 0.0, EdrVariant::MeanGrad),
        )
        .unwrap();
        assert_eq!(bd.total, bd.ce_id);

        let id = GeneratorParams::identity(inst.d(), false);
        let bd = croft_total(&b, &inst.params, &id, &weights(2.0, 0.0, 0.0, EdrVariant::MeanGrad)).unwrap();
        assert!((bd.total - (bd.ce_id + 2.0 * bd.ce_gen)).abs() < 1e-12);
        assert!((bd.ce_gen - bd.ce_id).abs() < 1e-12);
    }

    #[test]
    fn breakdown_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let inst = Instance::random(&mut rng, 6, 10, 4);
            let w = weights(1.5, 3.0, 0.5, EdrVariant::PerSample);
            let bd = croft_total(&batch(&inst), &inst.params, &inst.generator, &w).unwrap();
            assert!((bd.recompose(&w) - bd.total).abs() < 1e-12);
            assert!(bd.ce_id >= 0.0 && bd.ce_gen >= 0.0 && bd.edr_id >= 0.0 && bd.edr_gen >= 0.0);
        }
    }

    #[test]
    fn total_monotone_in_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let inst = Instance::random(&mut rng, 5, 8, 3);
        let b = batch(&inst);
        let lo = croft_total(
            &b,
            &inst.params,
            &inst.generator,
            &weights(1.0, 1.0, 0.0, EdrVariant::MeanGrad),
        )
        .unwrap();
        let hi2 = croft_total(
            &b,
            &inst.params,
            &inst.generator,
            &weights(1.0, 2.0, 0.0, EdrVariant::MeanGrad),
        )
        .unwrap();
        assert!(hi2.total >= lo.total);
        let hi1 = croft_total(
            &b,
            &inst.params,
            &inst.generator,
            &weights(2.0, 1.0, 0.0, EdrVariant::MeanGrad),
        )
        .unwrap();
        assert!(lo.ce_gen > 0.0 && hi1.total >= lo.total);
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let inst = Instance::random(&mut rng, 4, 4, 3);
        let err = croft_total(
            &batch(&inst),
            &inst.params,
            &inst.generator,
            &weights(-1.0, 0.0, 0.0, EdrVariant::MeanGrad),
        );
        assert!(matches!(err, Err(CroftError::Validation(_))));
    }

    fn check_fd<F>(inst: &Instance, analytic: &ParamGradient, f: F) -> f64
    where
        F: Fn(&AdapterParams) -> f64 + Sync,
    {
        let d = inst.d();
        let tau = inst.params.temperature;
        let fd = fd_gradient(
            |v| f(&FlatParamVector(v.to_vec()).to_params(d, tau).unwrap()),
            FlatParamVector::from_params(&inst.params).as_slice(),
            1e-5,
        )
        .unwrap();
        max_relative_error(analytic.flatten().as_slice(), &fd)
    }

    #[test]
    fn edr_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for variant in [EdrVariant::MeanGrad, EdrVariant::PerSample] {
            for _ in 0..10 {
                let inst = Instance::random(&mut rng, 6, 10, 5);
                let (_, g) = edr_loss_with_grad(inst.image.view(), inst.text.view(), &inst.params, variant).unwrap();
                let err = check_fd(&inst, &g, |p| {
                    edr_loss(inst.image.view(), inst.text.view(), p, variant).unwrap()
                });
                assert!(err < 1e-6, "{variant:?}: {err}");
            }
        }
    }

    #[test]
    fn total_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for i in 0..12 {
            let inst = Instance::random(&mut rng, 6, 10, 5);
            let variant = if i % 2 == 0 {
                EdrVariant::MeanGrad
            } else {
                EdrVariant::PerSample
            };
            let w = weights(1.3, 0.7, 0.9, variant);
            let b = batch(&inst);
            let (_, g) = croft_total_with_grad(&b, &inst.params, &inst.generator, &w).unwrap();
            let err = check_fd(&inst, &g, |p| croft_total(&b, p, &inst.generator, &w).unwrap().total);
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn lc_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let inst = Instance::random(&mut rng, 6, 10, 5);
            let b = batch(&inst);
            let (value, g) = lc_loss_with_grad(&b, &inst.params, &inst.generator, 0.8).unwrap();
            let lc_at = |p: &AdapterParams| {
                let u = model::adapt_image(b.image, p).unwrap();
                let gen = generator::generate(u.view(), &inst.generator).unwrap();
                lc_loss(u.view(), gen.view(), b.text, b.labels, p, 0.8).unwrap()
            };
            assert!((value - lc_at(&inst.params)).abs() < 1e-12);
            let err = check_fd(&inst, &g, lc_at);
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn energy_min_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let inst = Instance::random(&mut rng, 6, 10, 5);
            let b = batch(&inst);
            let (bd, g) = energy_min_with_grad(&b, &inst.params, 2.0).unwrap();
            assert!((bd.total - (bd.ce_id + 2.0 * bd.energy_reg)).abs() < 1e-12);
            let err = check_fd(&inst, &g, |p| energy_min_with_grad(&b, p, 2.0).unwrap().0.total);
            assert!(err < 1e-6, "rel err {err}");
        }
    }
}
