//! Analytic gradients of the adapter model and finite-difference oracles.
//!
//! Every loss in this crate is a function of the adapted image rows `U`
//! (`u_i = theta_I z_i`) and adapted text rows `V` (`v_j = theta_T b_j`).
//! Losses are differentiated by hand with respect to `U` and `V`; the
//! adapter gradients then follow from `dL/dtheta_I = Ḡ_Uᵀ Z` and
//! `dL/dtheta_T = Ḡ_Vᵀ B`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{CroftError, Result};
use crate::model::{self, AdapterParams, SoftmaxCache};

/// Gradient with respect to both adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub d_theta_i: Array2<f64>,
    pub d_theta_t: Array2<f64>,
}

impl ParamGradient {
    pub fn zeros(d: usize) -> Self {
        ParamGradient {
            d_theta_i: Array2::zeros((d, d)),
            d_theta_t: Array2::zeros((d, d)),
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &ParamGradient) {
        self.d_theta_i.scaled_add(alpha, &other.d_theta_i);
        self.d_theta_t.scaled_add(alpha, &other.d_theta_t);
    }

    pub fn norm_sq(&self) -> f64 {
        self.d_theta_i.iter().chain(self.d_theta_t.iter()).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.d_theta_i
            .iter()
            .chain(self.d_theta_t.iter())
            .all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> FlatParamVector {
        FlatParamVector(self.d_theta_i.iter().chain(self.d_theta_t.iter()).copied().collect())
    }
}

/// Row-major `theta_I` followed by row-major `theta_T`; length `2 d^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParamVector(pub Vec<f64>);

impl FlatParamVector {
    pub fn from_params(p: &AdapterParams) -> Self {
        FlatParamVector(p.theta_i.iter().chain(p.theta_t.iter()).copied().collect())
    }

    /// Rebuilds adapters of dimension `d`, keeping `temperature`.
    pub fn to_params(&self, d: usize, temperature: f64) -> Result<AdapterParams> {
        if self.0.len() != 2 * d * d {
            return Err(CroftError::Dimension(format!(
                "flat vector has {} entries, expected {}",
                self.0.len(),
                2 * d * d
            )));
        }
        let theta_i = Array2::from_shape_vec((d, d), self.0[..d * d].to_vec()).unwrap();
        let theta_t = Array2::from_shape_vec((d, d), self.0[d * d..].to_vec()).unwrap();
        Ok(AdapterParams {
            theta_i,
            theta_t,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Gradient of a loss with respect to the adapted rows `U` (N x d) and `V` (K x d).
#[derive(Debug, Clone)]
pub(crate) struct RowAdjoint {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl RowAdjoint {
    pub fn zeros(n: usize, k: usize, d: usize) -> Self {
        RowAdjoint {
            u: Array2::zeros((n, d)),
            v: Array2::zeros((k, d)),
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &RowAdjoint) {
        self.u.scaled_add(alpha, &other.u);
        self.v.scaled_add(alpha, &other.v);
    }

    /// Pulls the adjoint back to the adapters through `U = Z theta_Iᵀ`, `V = B theta_Tᵀ`.
    pub fn to_params(&self, image: ArrayView2<f64>, text: ArrayView2<f64>) -> ParamGradient {
        ParamGradient {
            d_theta_i: self.u.t().dot(&image),
            d_theta_t: self.v.t().dot(&text),
        }
    }
}

/// Backward pass of the row softmax: returns `dL/dS` given `dL/dP`.
pub(crate) fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let inner = (probs * d_probs).sum_axis(Axis(1));
    let mut out = d_probs.clone();
    Zip::from(out.rows_mut())
        .and(&inner)
        .for_each(|mut row, &c| row.mapv_inplace(|g| g - c));
    out *= probs;
    out
}

/// Backward pass of `S = tau * U Vᵀ`, accumulated into `adj`.
pub(crate) fn scores_backward(
    d_scores: &Array2<f64>,
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    temperature: f64,
    adj: &mut RowAdjoint,
) {
    adj.u.scaled_add(temperature, &d_scores.dot(&v));
    adj.v.scaled_add(temperature, &d_scores.t().dot(&u));
}

pub(crate) fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(CroftError::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(CroftError::LabelOutOfRange {
            label: bad as i64,
            classes: k,
        });
    }
    Ok(())
}

/// Mean cross-entropy of adapted rows against adapted text, with its row adjoint.
pub(crate) fn cross_entropy_rows(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, RowAdjoint)> {
    let (n, k) = (u.nrows(), v.nrows());
    check_labels(labels, n, k)?;
    let sm = model::scores_from_adapted(u, v, temperature)?;
    let (probs, lse) = model::row_softmax(sm.scores.view());
    let nf = n as f64;
    let value = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| lse[i] - sm.scores[[i, y]])
        .sum::<f64>()
        / nf;
    let mut d_scores = probs;
    for (i, &y) in labels.iter().enumerate() {
        d_scores[[i, y]] -= 1.0;
    }
    d_scores.mapv_inplace(|g| g / nf);
    let mut adj = RowAdjoint::zeros(n, k, u.ncols());
    scores_backward(&d_scores, u, v, temperature, &mut adj);
    Ok((value, adj))
}

/// Gradient of `lse_i` for one image row `a` with respect to both adapters:
/// `dlse/dtheta_I = tau (theta_T t̄) aᵀ`, `dlse/dtheta_T = tau (theta_I a) t̄ᵀ`.
pub fn grad_lse_per_sample(
    cache: &SoftmaxCache,
    row: usize,
    image_row: ArrayView1<f64>,
    params: &AdapterParams,
) -> Result<ParamGradient> {
    let d = params.d();
    if image_row.len() != d || cache.weighted_text_mean.ncols() != d {
        return Err(CroftError::Dimension(format!(
            "image row of length {} for {d}x{d} adapters",
            image_row.len()
        )));
    }
    if row >= cache.weighted_text_mean.nrows() {
        return Err(CroftError::Dimension(format!("row {row} outside softmax cache")));
    }
    let tbar = cache.weighted_text_mean.row(row);
    let w = params.theta_t.dot(&tbar);
    let u = params.theta_i.dot(&image_row);
    let tau = params.temperature;
    Ok(ParamGradient {
        d_theta_i: outer(&w, &image_row) * tau,
        d_theta_t: outer(&u, &tbar) * tau,
    })
}

pub(crate) fn outer(a: &Array1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Gradient of the mean cross-entropy over `image` rows with respect to both adapters.
pub fn grad_cross_entropy(
    image: ArrayView2<f64>,
    text: ArrayView2<f64>,
    labels: &[usize],
    params: &AdapterParams,
) -> Result<ParamGradient> {
    let u = model::adapt_image(image, params)?;
    let v = model::adapt_text(text, params)?;
    let (_, adj) = cross_entropy_rows(u.view(), v.view(), labels, params.temperature)?;
    Ok(adj.to_params(image, text))
}

pub const DEFAULT_GRAD_STEP: f64 = 1e-5;
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-4;

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate.
pub fn fd_gradient<F>(loss: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..at.len())
        .into_par_iter()
        .map(|k| {
            let mut x = at.to_vec();
            x[k] = at[k] + h;
            let plus = loss(&x);
            x[k] = at[k] - h;
            let minus = loss(&x);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CroftError::NonFinite(format!("loss near coordinate {k}")));
            }
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Second-order central differences, symmetrized as `(H + Hᵀ) / 2`.
pub fn fd_hessian<F>(loss: F, at: &[f64], h: f64) -> Result<Array2<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = at.len();
    let f0 = loss(at);
    if !f0.is_finite() {
        return Err(CroftError::NonFinite("loss at expansion point".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut x = at.to_vec();
            let mut row = vec![0.0; n];
            for l in 0..n {
                if l == k {
                    x[k] = at[k] + h;
                    let p = loss(&x);
                    x[k] = at[k] - h;
                    let m = loss(&x);
                    x[k] = at[k];
                    row[l] = (p - 2.0 * f0 + m) / (h * h);
                } else {
                    let mut eval = |sk: f64, sl: f64| {
                        x[k] = at[k] + sk * h;
                        x[l] = at[l] + sl * h;
                        let v = loss(&x);
                        x[k] = at[k];
                        x[l] = at[l];
                        v
                    };
                    let pp = eval(1.0, 1.0);
                    let pm = eval(1.0, -1.0);
                    let mp = eval(-1.0, 1.0);
                    let mm = eval(-1.0, -1.0);
                    row[l] = (pp - pm - mp + mm) / (4.0 * h * h);
                }
            }
            row
        })
        .collect();
    let mut hess = Array2::zeros((n, n));
    for (k, row) in rows.into_iter().enumerate() {
        for (l, v) in row.into_iter().enumerate() {
            hess[[k, l]] = v;
        }
    }
    if hess.iter().any(|v: &f64| !v.is_finite()) {
        return Err(CroftError::NonFinite("Hessian entry".into()));
    }
    let sym = (&hess + &hess.t()) * 0.5;
    Ok(sym)
}

/// `max_k |a_k - b_k| / max(max_k |a_k|, max_k |b_k|)`; zero when both vectors vanish.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
