//! Bilinear adapter model: adapted features, scores, softmax statistics and energies.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{CroftError, Result};

/// Trainable image and text adapters (square linear maps, no bias) plus the score temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub theta_i: Array2<f64>,
    pub theta_t: Array2<f64>,
    pub temperature: f64,
}

impl AdapterParams {
    /// Identity adapters: adapted features equal the frozen ones.
    pub fn identity(d: usize, temperature: f64) -> Self {
        AdapterParams {
            theta_i: Array2::eye(d),
            theta_t: Array2::eye(d),
            temperature,
        }
    }

    pub fn new(theta_i: Array2<f64>, theta_t: Array2<f64>, temperature: f64) -> Result<Self> {
        let p = AdapterParams {
            theta_i,
            theta_t,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.theta_i.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.theta_i.nrows();
        if self.theta_i.ncols() != d || self.theta_t.dim() != (d, d) {
            return Err(CroftError::Dimension(format!(
                "adapters must both be square {d}x{d}, got {:?} and {:?}",
                self.theta_i.dim(),
                self.theta_t.dim()
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CroftError::Validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.theta_i.iter().chain(self.theta_t.iter()).any(|v| !v.is_finite()) {
            return Err(CroftError::NonFinite("adapter entry".into()));
        }
        Ok(())
    }

    fn check_cols(&self, m: &ArrayView2<f64>, what: &str) -> Result<()> {
        if m.ncols() != self.d() {
            return Err(CroftError::Dimension(format!(
                "{what} has {} columns, adapters are {}x{}",
                m.ncols(),
                self.d(),
                self.d()
            )));
        }
        Ok(())
    }
}

/// `s_ij = tau * <u_i, v_j>` for already-adapted image rows `u` and text rows `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Array2<f64>,
}

/// Row-wise softmax statistics shared by every gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxCache {
    /// `N x K`, `p_ij`.
    pub probs: Array2<f64>,
    /// `N x d`, `sum_j p_ij * b_j` over the frozen text rows `b_j`.
    pub weighted_text_mean: Array2<f64>,
    /// `log sum_j exp(s_ij)` per row.
    pub lse: Array1<f64>,
}

/// Row `i` is `theta_I * z_i`.
pub fn adapt_image(features: ArrayView2<f64>, params: &AdapterParams) -> Result<Array2<f64>> {
    params.check_cols(&features, "image features")?;
    Ok(features.dot(&params.theta_i.t()))
}

/// Row `j` is `theta_T * b_j`.
pub fn adapt_text(features: ArrayView2<f64>, params: &AdapterParams) -> Result<Array2<f64>> {
    params.check_cols(&features, "text features")?;
    Ok(features.dot(&params.theta_t.t()))
}

/// Scores between adapted image rows and adapted text rows.
pub fn scores_from_adapted(
    adapted_image: ArrayView2<f64>,
    adapted_text: ArrayView2<f64>,
    temperature: f64,
) -> Result<ScoreMatrix> {
    if adapted_image.ncols() != adapted_text.ncols() {
        return Err(CroftError::Dimension(format!(
            "image rows have {} columns, text rows {}",
            adapted_image.ncols(),
            adapted_text.ncols()
        )));
    }
    let mut scores = adapted_image.dot(&adapted_text.t());
    scores.mapv_inplace(|s| s * temperature);
    Ok(ScoreMatrix { scores })
}

/// `s_ij = tau * z_iᵀ theta_Iᵀ theta_T b_j`.
pub fn score_matrix(image: ArrayView2<f64>, text: ArrayView2<f64>, params: &AdapterParams) -> Result<ScoreMatrix> {
    let u = adapt_image(image, params)?;
    let v = adapt_text(text, params)?;
    scores_from_adapted(u.view(), v.view(), params.temperature)
}

/// Max-subtracted log-sum-exp of every row.
pub fn row_logsumexp(scores: ArrayView2<f64>) -> Array1<f64> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            m + row.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Row-stable softmax of a score matrix.
pub fn row_softmax(scores: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let lse = row_logsumexp(scores);
    let mut probs = scores.to_owned();
    for (mut row, &l) in probs.rows_mut().into_iter().zip(lse.iter()) {
        row.mapv_inplace(|s| (s - l).exp());
        let total: f64 = row.sum();
        row.mapv_inplace(|p| p / total);
    }
    (probs, lse)
}

pub fn softmax_cache(sm: &ScoreMatrix, text_features: ArrayView2<f64>) -> Result<SoftmaxCache> {
    if sm.scores.ncols() != text_features.nrows() {
        return Err(CroftError::Dimension(format!(
            "{} score columns for {} text rows",
            sm.scores.ncols(),
            text_features.nrows()
        )));
    }
    if sm.scores.iter().any(|s| !s.is_finite()) {
        return Err(CroftError::NonFinite("score matrix".into()));
    }
    let (probs, lse) = row_softmax(sm.scores.view());
    let weighted_text_mean = probs.dot(&text_features);
    Ok(SoftmaxCache {
        probs,
        weighted_text_mean,
        lse,
    })
}

/// Per-sample energy `-log sum_j exp(s_ij)`; higher means more out-of-distribution.
pub fn energy_scores(sm: &ScoreMatrix) -> Array1<f64> {
    -row_logsumexp(sm.scores.view())
}

/// Index of the largest score per row, lowest index on ties.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{naive_matmul, random_matrix};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_adapter_is_noop() {
        let x = array![[1.0, 2.0], [3.0, -4.0]];
        let p = AdapterParams::identity(2, 1.0);
        assert_eq!(adapt_image(x.view(), &p).unwrap(), x);
        let p2 = AdapterParams::new(Array2::eye(2) * 2.0, Array2::eye(2), 1.0).unwrap();
        assert_eq!(adapt_image(x.view(), &p2).unwrap(), &x * 2.0);
    }

    #[test]
    fn adapt_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 7, 5, 1.0);
        let a = random_matrix(&mut rng, 5, 5, 1.0);
        let p = AdapterParams::new(a.clone(), Array2::eye(5), 1.0).unwrap();
        let got = adapt_image(x.view(), &p).unwrap();
        let want = naive_matmul(&x, &a.t().to_owned());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_simple_and_scaled() {
        let img = array![[1.0, 0.0]];
        let txt = array![[1.0, 0.0], [0.0, 1.0]];
        let p = AdapterParams::identity(2, 1.0);
        let s = score_matrix(img.view(), txt.view(), &p).unwrap();
        assert_eq!(s.scores, array![[1.0, 0.0]]);
        let p100 = AdapterParams::identity(2, 100.0);
        let s100 = score_matrix(img.view(), txt.view(), &p100).unwrap();
        assert_eq!(s100.scores, array![[100.0, 0.0]]);
    }

    #[test]
    fn scores_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 6, 4, 1.0);
        let t = random_matrix(&mut rng, 3, 4, 1.0);
        let a = random_matrix(&mut rng, 4, 4, 1.0);
        let b = random_matrix(&mut rng, 4, 4, 1.0);
        let p = AdapterParams::new(a.clone(), b.clone(), 2.5).unwrap();
        let s = score_matrix(x.view(), t.view(), &p).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let mut want = 0.0;
                for r in 0..4 {
                    let mut u = 0.0;
                    let mut v = 0.0;
                    for q in 0..4 {
                        u += a[[r, q]] * x[[i, q]];
                        v += b[[r, q]] * t[[j, q]];
                    }
                    want += u * v;
                }
                assert!((s.scores[[i, j]] - 2.5 * want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 4, 3, 1.0);
        let t = random_matrix(&mut rng, 2, 3, 1.0);
        let a = random_matrix(&mut rng, 3, 3, 1.0);
        let b = random_matrix(&mut rng, 3, 3, 1.0);
        let base = score_matrix(
            x.view(),
            t.view(),
            &AdapterParams::new(a.clone(), b.clone(), 1.0).unwrap(),
        )
        .unwrap();
        let scaled = score_matrix(x.view(), t.view(), &AdapterParams::new(&a * 3.0, b, 1.0).unwrap()).unwrap();
        for (s, b) in scaled.scores.iter().zip(base.scores.iter()) {
            assert!((s - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_softmax_and_mean_text() {
        let sm = ScoreMatrix {
            scores: array![[0.5, 0.5, 0.5, 0.5]],
        };
        let text = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0], [4.0, 1.0]];
        let c = softmax_cache(&sm, text.view()).unwrap();
        for &p in c.probs.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((c.weighted_text_mean[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((c.weighted_text_mean[[0, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_gaps() {
        let sm = ScoreMatrix {
            scores: array![[1000.0, 0.0, -3.0]],
        };
        let c = softmax_cache(&sm, Array2::eye(3).view()).unwrap();
        assert!((c.probs[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(c.probs[[0, 1]] < 1e-12);
        assert!((c.lse[0] - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_matrix(&mut rng, 5, 4, 1.0);
        let c = softmax_cache(&ScoreMatrix { scores: s.clone() }, Array2::eye(4).view()).unwrap();
        for i in 0..5 {
            let total: f64 = (0..4).map(|j| s[[i, j]].exp()).sum();
            for j in 0..4 {
                assert!((c.probs[[i, j]] - s[[i, j]].exp() / total).abs() < 1e-12);
            }
            assert!((c.lse[i] - total.ln()).abs() < 1e-12);
            assert!((c.probs.row(i).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_examples() {
        let e = energy_scores(&ScoreMatrix {
            scores: array![[0.0, 0.0]],
        });
        assert!((e[0] + std::f64::consts::LN_2).abs() < 1e-15);
        let e = energy_scores(&ScoreMatrix { scores: array![[1.0]] });
        assert!((e[0] + 1.0).abs() < 1e-15);
        let e = energy_scores(&ScoreMatrix {
            scores: array![[1.0, 2.0, 3.0]],
        });
        let direct = -(1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((e[0] - direct).abs() < 1e-12);
        assert!((e[0] + 3.4076).abs() < 1e-4);
    }

    #[test]
    fn energy_shift_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_matrix(&mut rng, 6, 5, 3.0);
        let e = energy_scores(&ScoreMatrix { scores: s.clone() });
        let shifted = energy_scores(&ScoreMatrix { scores: &s + 7.25 });
        for (a, b) in e.iter().zip(shifted.iter()) {
            assert!((b - (a - 7.25)).abs() < 1e-10);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_rows(array![[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]].view()), vec![0, 1]);
    }

    #[test]
    fn bad_shapes_rejected() {
        let p = AdapterParams::identity(3, 1.0);
        assert!(adapt_image(Array2::zeros((2, 2)).view(), &p).is_err());
        assert!(AdapterParams::new(Array2::eye(2), Array2::eye(3), 1.0).is_err());
        assert!(AdapterParams::new(Array2::eye(2), Array2::eye(2), 0.0).is_err());
    }
}
