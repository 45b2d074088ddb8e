//! Seeded random problem instances for gradient checks and diagnostics.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::generator::GeneratorParams;
use crate::model::AdapterParams;

/// Matrix with i.i.d. `N(0, scale^2)` entries.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Identity plus a Gaussian perturbation.
pub fn perturbed_identity<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Array2<f64> {
    Array2::eye(d) + random_matrix(rng, d, d, scale)
}

/// A small complete problem: frozen features, labels, adapters and generator.
#[derive(Debug, Clone)]
pub struct Instance {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
    pub labels: Vec<usize>,
    pub params: AdapterParams,
    pub generator: GeneratorParams,
}

impl Instance {
    /// Draws an instance with `d` in `[2, max_d]`, `N` in `[1, max_n]`, `K` in `[2, max_k]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_d: usize, max_n: usize, max_k: usize) -> Self {
        let d = rng.random_range(2..=max_d.max(2));
        let n = rng.random_range(1..=max_n.max(1));
        let k = rng.random_range(2..=max_k.max(2));
        let scale = 1.0 / (d as f64).sqrt();
        let image = random_matrix(rng, n, d, 1.0);
        let text = random_matrix(rng, k, d, 1.0);
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        let temperature = rng.random_range(0.5..2.0);
        let params = AdapterParams {
            theta_i: perturbed_identity(rng, d, 0.3 * scale),
            theta_t: perturbed_identity(rng, d, 0.3 * scale),
            temperature,
        };
        let generator = GeneratorParams {
            g_matrix: perturbed_identity(rng, d, 0.3 * scale),
            norm_preserving: rng.random_bool(0.5),
        };
        Instance {
            image,
            text,
            labels,
            params,
            generator,
        }
    }

    pub fn d(&self) -> usize {
        self.image.ncols()
    }
}
