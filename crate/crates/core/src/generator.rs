//! Worst-case covariate-shifted feature generator.
//!
//! The generator is a single linear map `g` applied to adapted image rows.
//! It is trained to make generated rows dissimilar to their source rows while
//! keeping them classifiable by the current adapters. With `norm_preserving`
//! each generated row is rescaled to the norm of its source row, so the shift
//! is purely directional.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{CroftError, Result};
use crate::grad::{self, RowAdjoint};
use crate::model::{self, AdapterParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub g_matrix: Array2<f64>,
    pub norm_preserving: bool,
}

impl GeneratorParams {
    pub fn identity(d: usize, norm_preserving: bool) -> Self {
        GeneratorParams {
            g_matrix: Array2::eye(d),
            norm_preserving,
        }
    }

    pub fn d(&self) -> usize {
        self.g_matrix.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.g_matrix.dim();
        if r != c {
            return Err(CroftError::Dimension(format!("generator must be square, got {r}x{c}")));
        }
        if self.g_matrix.iter().any(|v| !v.is_finite()) {
            return Err(CroftError::NonFinite("generator entry".into()));
        }
        Ok(())
    }
}

/// Forward results kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Generated {
    pub rows: Array2<f64>,
    /// `g u_i` before rescaling.
    raw: Array2<f64>,
    /// `||u_i||` (only used when norm preserving).
    source_norms: Array1<f64>,
    raw_norms: Array1<f64>,
    norm_preserving: bool,
}

pub(crate) fn generate_with_cache(adapted: ArrayView2<f64>, gen: &GeneratorParams) -> Result<Generated> {
    gen.validate()?;
    if adapted.ncols() != gen.d() {
        return Err(CroftError::Dimension(format!(
            "{} feature columns for a {}x{} generator",
            adapted.ncols(),
            gen.d(),
            gen.d()
        )));
    }
    let raw = adapted.dot(&gen.g_matrix.t());
    let raw_norms: Array1<f64> = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let source_norms: Array1<f64> = adapted.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let rows = if gen.norm_preserving {
        let mut rows = raw.clone();
        for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
            if raw_norms[i] == 0.0 {
                return Err(CroftError::Degenerate(format!(
                    "generated row {i} has zero norm and cannot be rescaled"
                )));
            }
            let s = source_norms[i] / raw_norms[i];
            row.mapv_inplace(|v| v * s);
        }
        rows
    } else {
        raw.clone()
    };
    Ok(Generated {
        rows,
        raw,
        source_norms,
        raw_norms,
        norm_preserving: gen.norm_preserving,
    })
}

/// Row `i` is `g u_i`, rescaled to `||u_i||` when the generator is norm preserving.
pub fn generate(adapted: ArrayView2<f64>, gen: &GeneratorParams) -> Result<Array2<f64>> {
    Ok(generate_with_cache(adapted, gen)?.rows)
}

/// Backward through the generator. Given `dL/d(generated)`, returns
/// `(dL/du, dL/dg)`; `source` is the adapted input `U`.
pub(crate) fn generate_backward(
    cache: &Generated,
    source: ArrayView2<f64>,
    gen: &GeneratorParams,
    d_rows: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut d_u = Array2::zeros(source.raw_dim());
    let d_raw = if cache.norm_preserving {
        // generated_i = r_i * y_i / |y_i| with r_i = |u_i| and y_i = g u_i
        let mut d_raw = Array2::zeros(d_rows.raw_dim());
        for i in 0..d_rows.nrows() {
            let c = d_rows.row(i);
            let y = cache.raw.row(i);
            let ny = cache.raw_norms[i];
            let r = cache.source_norms[i];
            let c_dot_yhat = c.dot(&y) / ny;
            let scale = r / ny;
            let mut dy = d_raw.row_mut(i);
            for q in 0..y.len() {
                dy[q] = scale * (c[q] - c_dot_yhat * y[q] / ny);
            }
            if r > 0.0 {
                d_u.row_mut(i).scaled_add(c_dot_yhat / r, &source.row(i));
            }
        }
        d_raw
    } else {
        d_rows.clone()
    };
    d_u += &d_raw.dot(&gen.g_matrix);
    let d_g = d_raw.t().dot(&source);
    (d_u, d_g)
}

/// `(1/N) sum_i <generated_i, adapted_i>`.
pub fn mean_similarity(generated: ArrayView2<f64>, adapted: ArrayView2<f64>) -> f64 {
    let n = adapted.nrows() as f64;
    (&generated * &adapted).sum() / n
}

/// Value and `g`-gradient of `(lambda1/N) sum_i <g(u_i), u_i> + CE(generated)`
/// with the adapters frozen. `adapted` holds `U`, `adapted_text` holds `V`.
pub(crate) fn objective_and_grad(
    adapted: ArrayView2<f64>,
    adapted_text: ArrayView2<f64>,
    gen: &GeneratorParams,
    labels: &[usize],
    temperature: f64,
    lambda1: f64,
) -> Result<(f64, Array2<f64>)> {
    let cache = generate_with_cache(adapted, gen)?;
    let n = adapted.nrows() as f64;
    let sim = mean_similarity(cache.rows.view(), adapted);
    let (ce, adj): (f64, RowAdjoint) = grad::cross_entropy_rows(cache.rows.view(), adapted_text, labels, temperature)?;
    let mut d_rows = adj.u;
    d_rows.scaled_add(lambda1 / n, &adapted);
    let (_, d_g) = generate_backward(&cache, adapted, gen, &d_rows);
    Ok((lambda1 * sim + ce, d_g))
}

/// Generator objective for adapted rows `adapted` (N x d) and frozen text features `text`.
pub fn generator_objective(
    adapted: ArrayView2<f64>,
    text: ArrayView2<f64>,
    gen: &GeneratorParams,
    labels: &[usize],
    params: &AdapterParams,
    lambda1: f64,
) -> Result<f64> {
    let v = model::adapt_text(text, params)?;
    let generated = generate(adapted, gen)?;
    let sim = mean_similarity(generated.view(), adapted);
    let (ce, _) = grad::cross_entropy_rows(generated.view(), v.view(), labels, params.temperature)?;
    Ok(lambda1 * sim + ce)
}

/// Gradient of [`generator_objective`] with respect to `g`.
pub fn generator_gradient(
    adapted: ArrayView2<f64>,
    text: ArrayView2<f64>,
    gen: &GeneratorParams,
    labels: &[usize],
    params: &AdapterParams,
    lambda1: f64,
) -> Result<Array2<f64>> {
    let v = model::adapt_text(text, params)?;
    let (_, d_g) = objective_and_grad(adapted, v.view(), gen, labels, params.temperature, lambda1)?;
    Ok(d_g)
}

/// One gradient-descent update of `g` with the adapters frozen.
pub fn generator_step(
    adapted: ArrayView2<f64>,
    text: ArrayView2<f64>,
    gen: &GeneratorParams,
    labels: &[usize],
    params: &AdapterParams,
    lambda1: f64,
    lr_g: f64,
) -> Result<GeneratorParams> {
    if lr_g.is_nan() || lr_g <= 0.0 {
        return Err(CroftError::Validation(format!("lr_g must be positive, got {lr_g}")));
    }
    let d_g = generator_gradient(adapted, text, gen, labels, params, lambda1)?;
    if d_g.iter().any(|v| !v.is_finite()) {
        return Err(CroftError::Divergence {
            term: "generator".into(),
            detail: "non-finite generator gradient".into(),
        });
    }
    let mut next = gen.clone();
    next.g_matrix.scaled_add(-lr_g, &d_g);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{fd_gradient, max_relative_error};
    use crate::instance::{random_matrix, Instance};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_generator_is_noop() {
        let u = array![[1.0, 2.0], [-3.0, 0.5]];
        assert_eq!(generate(u.view(), &GeneratorParams::identity(2, false)).unwrap(), u);
    }

    #[test]
    fn quarter_turn_is_orthogonal_and_unit() {
        let g = GeneratorParams {
            g_matrix: array![[0.0, -1.0], [1.0, 0.0]],
            norm_preserving: true,
        };
        let u = array![[1.0, 0.0], [0.6, 0.8]];
        let out = generate(u.view(), &g).unwrap();
        for i in 0..2 {
            let r = out.row(i);
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
            assert!(r.dot(&u.row(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_preserving_keeps_row_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_matrix(&mut rng, 9, 5, 2.0);
        let g = GeneratorParams {
            g_matrix: random_matrix(&mut rng, 5, 5, 1.0),
            norm_preserving: true,
        };
        let out = generate(u.view(), &g).unwrap();
        for i in 0..9 {
            let a = out.row(i).dot(&out.row(i)).sqrt();
            let b = u.row(i).dot(&u.row(i)).sqrt();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_generated_row_is_degenerate() {
        let g = GeneratorParams {
            g_matrix: Array2::zeros((2, 2)),
            norm_preserving: true,
        };
        assert!(matches!(
            generate(array![[1.0, 0.0]].view(), &g),
            Err(CroftError::Degenerate(_))
        ));
    }

    #[test]
    fn identity_objective_is_one_plus_ce() {
        let u = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let text = array![[1.0, 0.0], [0.0, 1.0]];
        let p = AdapterParams::identity(2, 1.0);
        let labels = [0, 1, 1];
        let obj = generator_objective(
            u.view(),
            text.view(),
            &GeneratorParams::identity(2, true),
            &labels,
            &p,
            1.0,
        )
        .unwrap();
        let (ce, _) = grad::cross_entropy_rows(u.view(), text.view(), &labels, 1.0).unwrap();
        assert!((obj - (1.0 + ce)).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_generator_zeroes_similarity() {
        let u = array![[1.0, 0.0], [0.0, 2.0]];
        let g = GeneratorParams {
            g_matrix: array![[0.0, -1.0], [1.0, 0.0]],
            norm_preserving: false,
        };
        let gen = generate(u.view(), &g).unwrap();
        assert!(mean_similarity(gen.view(), u.view()).abs() < 1e-15);
    }

    #[test]
    fn objective_matches_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = Instance::random(&mut rng, 6, 10, 4);
        let u = model::adapt_image(inst.image.view(), &inst.params).unwrap();
        let obj = generator_objective(
            u.view(),
            inst.text.view(),
            &inst.generator,
            &inst.labels,
            &inst.params,
            2.5,
        )
        .unwrap();
        let generated = generate(u.view(), &inst.generator).unwrap();
        let v = model::adapt_text(inst.text.view(), &inst.params).unwrap();
        let n = u.nrows();
        let mut sim = 0.0;
        let mut ce = 0.0;
        for i in 0..n {
            sim += generated.row(i).dot(&u.row(i));
            let scores: Vec<f64> = (0..v.nrows())
                .map(|j| inst.params.temperature * generated.row(i).dot(&v.row(j)))
                .collect();
            let lse = scores.iter().map(|s| s.exp()).sum::<f64>().ln();
            ce += lse - scores[inst.labels[i]];
        }
        let want = 2.5 * sim / n as f64 + ce / n as f64;
        assert!((obj - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let inst = Instance::random(&mut rng, 6, 12, 5);
            let d = inst.d();
            let u = model::adapt_image(inst.image.view(), &inst.params).unwrap();
            let an = generator_gradient(
                u.view(),
                inst.text.view(),
                &inst.generator,
                &inst.labels,
                &inst.params,
                1.5,
            )
            .unwrap();
            let np = inst.generator.norm_preserving;
            let fd = fd_gradient(
                |v| {
                    let g = GeneratorParams {
                        g_matrix: Array2::from_shape_vec((d, d), v.to_vec()).unwrap(),
                        norm_preserving: np,
                    };
                    generator_objective(u.view(), inst.text.view(), &g, &inst.labels, &inst.params, 1.5).unwrap()
                },
                inst.generator.g_matrix.as_slice().unwrap(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(an.as_slice().unwrap(), &fd);
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn stationary_point_is_fixed() {
        // With one class the cross-entropy is identically zero; with lambda1 = 0 the
        // objective is constant.
        let u = array![[1.0, 0.5], [0.2, -1.0]];
        let text = array![[1.0, 1.0]];
        let p = AdapterParams::identity(2, 1.0);
        let g = GeneratorParams {
            g_matrix: array![[0.9, 0.1], [-0.2, 1.1]],
            norm_preserving: true,
        };
        let next = generator_step(u.view(), text.view(), &g, &[0, 0], &p, 0.0, 0.1).unwrap();
        for (a, b) in next.g_matrix.iter().zip(g.g_matrix.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn small_step_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..10 {
            let mut inst = Instance::random(&mut rng, 6, 12, 4);
            inst.generator = GeneratorParams::identity(inst.d(), inst.generator.norm_preserving);
            let u = model::adapt_image(inst.image.view(), &inst.params).unwrap();
            let before = generator_objective(
                u.view(),
                inst.text.view(),
                &inst.generator,
                &inst.labels,
                &inst.params,
                1.0,
            )
            .unwrap();
            let mut lr = 0.1;
            let mut decreased = false;
            for _ in 0..30 {
                let next = generator_step(
                    u.view(),
                    inst.text.view(),
                    &inst.generator,
                    &inst.labels,
                    &inst.params,
                    1.0,
                    lr,
                )
                .unwrap();
                let after =
                    generator_objective(u.view(), inst.text.view(), &next, &inst.labels, &inst.params, 1.0).unwrap();
                if after < before {
                    decreased = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(decreased);
        }
    }

    #[test]
    fn non_positive_lr_rejected() {
        let p = AdapterParams::identity(2, 1.0);
        let u = array![[1.0, 0.0]];
        assert!(generator_step(
            u.view(),
            u.view(),
            &GeneratorParams::identity(2, false),
            &[0],
            &p,
            1.0,
            0.0
        )
        .is_err());
    }
}
