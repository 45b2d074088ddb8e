//! Numerical checks of the Hessian structure of the classification loss, and
//! the computable terms of the OOD generalization bound.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CroftError, Result};
use crate::eval;
use crate::features::FeatureSet;
use crate::generator::{self, GeneratorParams};
use crate::grad::{self, FlatParamVector, DEFAULT_HESSIAN_STEP};
use crate::losses::{self, Batch, EdrVariant};
use crate::model::{self, AdapterParams};

/// Largest flat parameter count (`2 d^2`) for which finite-difference Hessians are attempted.
pub const DEFAULT_FD_DIM_LIMIT: usize = 512;

/// Hessian of `-(1/N) sum_i tau <theta_I a_i, theta_T b_{y_i}>` over the flat
/// parameter vector. It is constant: zero diagonal blocks, cross entries
/// `-(tau/N) sum_i delta_pr a_iq b_{y_i} s`.
pub fn score_term_hessian(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    labels: &[usize],
    temperature: f64,
) -> Result<Array2<f64>> {
    grad::check_labels(labels, image.nrows(), text.nrows())?;
    let d = image.ncols();
    let n = image.nrows() as f64;
    // C[q, s] = sum_i a_iq b_{y_i} s
    let mut c = Array2::<f64>::zeros((d, d));
    for (i, &y) in labels.iter().enumerate() {
        for q in 0..d {
            for s in 0..d {
                c[[q, s]] += image[[i, q]] * text[[y, s]];
            }
        }
    }
    let dd = d * d;
    let mut h = Array2::<f64>::zeros((2 * dd, 2 * dd));
    for p in 0..d {
        for q in 0..d {
            for s in 0..d {
                let v = -temperature / n * c[[q, s]];
                h[[p * d + q, dd + p * d + s]] = v;
                h[[dd + p * d + s, p * d + q]] = v;
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianStructureReport {
    /// Max |fd - closed form| over the score-term Hessian.
    pub score_hessian_error: f64,
    /// Max |entry| of the fd score-term Hessian inside the two diagonal blocks.
    pub diagonal_block_max: f64,
    /// Max |H(CE) - H(mean lse) - H(score term)| with every Hessian by finite differences.
    pub decomposition_error: f64,
    /// Frobenius norm of the mean log-sum-exp Hessian (zero only when the log-sum-exp part has no curvature).
    pub lse_hessian_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Finite-difference Hessian of the mean log-sum-exp over the flat adapter vector.
pub fn lse_hessian(image: ArrayView2<f64>, text: ArrayView2<f64>, params: &AdapterParams) -> Result<Array2<f64>> {
    let d = params.d();
    let tau = params.temperature;
    let f = |x: &[f64]| {
        FlatParamVector(x.to_vec())
            .to_params(d, tau)
            .and_then(|p| losses::mean_lse(image, text, &p))
            .unwrap_or(f64::NAN)
    };
    grad::fd_hessian(f, FlatParamVector::from_params(params).as_slice(), DEFAULT_HESSIAN_STEP)
}

fn check_size(d: usize, limit: usize) -> Result<()> {
    if 2 * d * d > limit {
        return Err(CroftError::TooLarge(format!(
            "2 d^2 = {} parameters exceeds the finite-difference limit {limit}",
            2 * d * d
        )));
    }
    Ok(())
}

/// Checks the block structure of the score-term Hessian and the decomposition
/// `H(CE) = H(mean lse) + H(-mean S)` by finite differences.
pub fn hessian_structure_check(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    labels: &[usize],
    params: &AdapterParams,
    tol: f64,
    fd_dim_limit: usize,
) -> Result<HessianStructureReport> {
    let d = params.d();
    check_size(d, fd_dim_limit)?;
    let batch = Batch::new(image, text, labels)?;
    let tau = params.temperature;
    let at = FlatParamVector::from_params(params);
    let with = |x: &[f64], f: &dyn Fn(&AdapterParams) -> Result<f64>| {
        FlatParamVector(x.to_vec())
            .to_params(d, tau)
            .and_then(|p| f(&p))
            .unwrap_or(f64::NAN)
    };
    let h = DEFAULT_HESSIAN_STEP;
    let h_score = grad::fd_hessian(
        |x| with(x, &|p| Ok(-losses::mean_true_score(&batch, p)?)),
        at.as_slice(),
        h,
    )?;
    let h_ce = grad::fd_hessian(
        |x| with(x, &|p| losses::cross_entropy_risk(&batch, p)),
        at.as_slice(),
        h,
    )?;
    let h_lse = lse_hessian(image, text, params)?;

    let closed = score_term_hessian(image, text, labels, tau)?;
    let dd = d * d;
    let mut diagonal_block_max = 0.0f64;
    for ((r, c), v) in h_score.indexed_iter() {
        if (r < dd) == (c < dd) {
            diagonal_block_max = diagonal_block_max.max(v.abs());
        }
    }
    let score_hessian_error = max_abs_diff(&h_score, &closed);
    let decomposition_error = max_abs_diff(&h_ce, &(&h_lse + &h_score));
    let passed = score_hessian_error <= tol && diagonal_block_max <= tol && decomposition_error <= tol;
    Ok(HessianStructureReport {
        score_hessian_error,
        diagonal_block_max,
        decomposition_error,
        lse_hessian_residual: frobenius(&h_lse),
        tolerance: tol,
        passed,
    })
}

/// Plain gradient descent on the EDR loss alone; returns the final adapters and the loss trace.
pub fn edr_descent(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    params: &AdapterParams,
    variant: EdrVariant,
    lr: f64,
    steps: usize,
) -> Result<(AdapterParams, Vec<f64>)> {
    let mut p = params.clone();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (value, g) = losses::edr_loss_with_grad(image, text, &p, variant)?;
        trace.push(value);
        p = crate::trainer::sgd_step(&p, &g, lr)?;
    }
    Ok((p, trace))
}

/// Quantities of the generalization bound that have a computable value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub e_hat_s: f64,
    pub e_hat_s_c: f64,
    pub e_hat_t: f64,
    /// `1/2 |theta^T H theta|` for the score-term Hessian `H`.
    pub hessian_quadratic: f64,
    pub edr_value: f64,
    pub energy_percentiles_by_role: BTreeMap<String, [f64; 5]>,
    /// Bound terms with no computable value.
    pub not_computed: Vec<String>,
}

const NOT_COMPUTED: [&str; 9] = [
    "divergence",
    "epsilon",
    "epsilon_c",
    "lambda",
    "lambda_s",
    "lambda_t",
    "vc_dimension",
    "m",
    "delta",
];

/// `1/2 |theta^T H theta|` with `H` the score-term Hessian over `id`.
///
/// The score is bilinear and hence homogeneous of degree two in the flat
/// parameters, so `theta^T H theta = -2 mean_i S_i` and the value is `|mean_i S_i|`.
pub fn hessian_quadratic(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    labels: &[usize],
    params: &AdapterParams,
) -> Result<f64> {
    let batch = Batch::new(image, text, labels)?;
    Ok(losses::mean_true_score(&batch, params)?.abs())
}

/// `generated` holds generated rows in adapted space, labelled like `closed_id`.
pub fn bound_report(
    closed_id: &FeatureSet,
    closed_ood: &FeatureSet,
    generated: ArrayView2<f64>,
    params: &AdapterParams,
    variant: EdrVariant,
) -> Result<BoundReport> {
    let id_labels = closed_id.class_labels()?;
    let ood_labels = closed_ood.class_labels()?;
    let id_batch = Batch::new(
        closed_id.image_features.view(),
        closed_id.text_features.view(),
        &id_labels,
    )?;
    let ood_batch = Batch::new(
        closed_ood.image_features.view(),
        closed_ood.text_features.view(),
        &ood_labels,
    )?;
    if generated.dim() != closed_id.image_features.dim() {
        return Err(CroftError::Dimension(format!(
            "generated rows {:?} vs closed-set ID rows {:?}",
            generated.dim(),
            closed_id.image_features.dim()
        )));
    }
    let v = model::adapt_text(closed_id.text_features.view(), params)?;
    let (e_hat_s_c, _) = grad::cross_entropy_rows(generated, v.view(), &id_labels, params.temperature)?;
    let mut percentiles = BTreeMap::new();
    let id_e = eval::energy_detector(closed_id.image_features.view(), closed_id.text_features.view(), params)?;
    percentiles.insert(
        closed_id.role.to_string(),
        eval::energy_percentiles(id_e.as_slice().unwrap())?,
    );
    let ood_e = eval::energy_detector(
        closed_ood.image_features.view(),
        closed_ood.text_features.view(),
        params,
    )?;
    percentiles.insert(
        closed_ood.role.to_string(),
        eval::energy_percentiles(ood_e.as_slice().unwrap())?,
    );
    let gen_e = eval::energy_of_adapted(generated, closed_id.text_features.view(), params)?;
    percentiles.insert(
        GENERATED_ROLE.into(),
        eval::energy_percentiles(gen_e.as_slice().unwrap())?,
    );
    let report = BoundReport {
        e_hat_s: losses::cross_entropy_risk(&id_batch, params)?,
        e_hat_s_c,
        e_hat_t: losses::cross_entropy_risk(&ood_batch, params)?,
        hessian_quadratic: hessian_quadratic(id_batch.image, id_batch.text, &id_labels, params)?,
        edr_value: losses::edr_loss(id_batch.image, id_batch.text, params, variant)?,
        energy_percentiles_by_role: percentiles,
        not_computed: NOT_COMPUTED.iter().map(|s| s.to_string()).collect(),
    };
    if !(report.e_hat_s.is_finite()
        && report.e_hat_s_c.is_finite()
        && report.e_hat_t.is_finite()
        && report.edr_value.is_finite())
    {
        return Err(CroftError::NonFinite("bound report term".into()));
    }
    Ok(report)
}

/// Table key for generated rows.
pub const GENERATED_ROLE: &str = "generated";

/// Energy percentiles per role for raw feature sets, plus generated rows `g(adapt(source))` when given.
pub fn energy_percentile_report(
    params: &AdapterParams,
    sets: &[&FeatureSet],
    generated_from: Option<(&FeatureSet, &GeneratorParams)>,
) -> Result<BTreeMap<String, [f64; 5]>> {
    let mut table = BTreeMap::new();
    for fs in sets {
        if fs.n() == 0 {
            return Err(CroftError::Validation(format!("{} set is empty", fs.role)));
        }
        let e = eval::energy_detector(fs.image_features.view(), fs.text_features.view(), params)?;
        table.insert(fs.role.to_string(), eval::energy_percentiles(e.as_slice().unwrap())?);
    }
    if let Some((src, gen)) = generated_from {
        let rows = generated_rows(src, params, gen)?;
        let e = eval::energy_of_adapted(rows.view(), src.text_features.view(), params)?;
        table.insert(GENERATED_ROLE.into(), eval::energy_percentiles(e.as_slice().unwrap())?);
    }
    Ok(table)
}

/// `g(theta_I a_i)` for every row of `source`.
pub fn generated_rows(source: &FeatureSet, params: &AdapterParams, gen: &GeneratorParams) -> Result<Array2<f64>> {
    let u = model::adapt_image(source.image_features.view(), params)?;
    generator::generate(u.view(), gen)
}
