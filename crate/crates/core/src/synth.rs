//! Deterministic synthetic benchmark: closed-set ID data, rotated (covariate-shifted)
//! closed-set domains and open-set classes.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `seed_from_u64(seed)`; Gaussian draws
//! use `rand_distr::StandardNormal`. Draw order: closed then open prototypes, text
//! noise, domain-0 closed samples (class-major), open samples (class-major), then one
//! random basis per shifted domain.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CroftError, Result};
use crate::features::{self, FeatureSet, Role, OPEN_SET_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub d: usize,
    pub k: usize,
    pub k_open: usize,
    pub n_domains: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    /// Rotation angle (radians) per domain index.
    pub shift_strength: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 16,
            k: 10,
            k_open: 5,
            n_domains: 3,
            samples_per_class: 50,
            sigma: 0.1,
            shift_strength: 0.3,
            text_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(CroftError::Dimension(format!(
                "d = {} is below the minimum of 4",
                self.d
            )));
        }
        if self.k < 1 || self.k_open < 1 {
            return Err(CroftError::Validation(format!(
                "need at least one closed and one open class (k = {}, k_open = {})",
                self.k, self.k_open
            )));
        }
        if self.n_domains < 1 || self.samples_per_class < 1 {
            return Err(CroftError::Validation(
                "n_domains and samples_per_class must be >= 1".into(),
            ));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("shift_strength", self.shift_strength),
            ("text_noise", self.text_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CroftError::Validation(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Closed-set domains (domain 0 has role `closed_id`, the rest `closed_ood`) and the
/// pooled open set. All share `text_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub domains: Vec<FeatureSet>,
    pub open: FeatureSet,
    pub text_features: Array2<f64>,
}

impl Benchmark {
    pub fn id(&self) -> &FeatureSet {
        &self.domains[0]
    }

    /// All shifted domains stacked as one `closed_ood` set, if there are any.
    pub fn shifted(&self) -> Result<Option<FeatureSet>> {
        if self.domains.len() < 2 {
            return Ok(None);
        }
        let rest: Vec<&FeatureSet> = self.domains[1..].iter().collect();
        FeatureSet::concat(&rest, Role::ClosedOod).map(Some)
    }

    /// Writes `domain_<j>` and `open` file pairs; returns the base paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CroftError::io(dir, e))?;
        let mut out = Vec::new();
        for (j, fs) in self.domains.iter().enumerate() {
            let base = dir.join(format!("domain_{j}"));
            features::write_feature_set(fs, &base)?;
            out.push(base);
        }
        let base = dir.join("open");
        features::write_feature_set(&self.open, &base)?;
        out.push(base);
        Ok(out)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn unit(v: Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if n.is_nan() || n <= 1e-12 {
        return Err(CroftError::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v / n)
}

/// Removes the components along `basis` (assumed orthonormal).
fn project_out(mut v: Array1<f64>, basis: &[Array1<f64>]) -> Array1<f64> {
    for b in basis {
        let c = v.dot(b);
        v.scaled_add(-c, b);
    }
    v
}

type Prototypes = (Vec<Array1<f64>>, Vec<Array1<f64>>);

/// `k + k_open` unit prototypes. Fully orthonormal when `d >= k + k_open`; otherwise
/// open prototypes avoid the closed span when `d > k`.
fn prototypes(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Prototypes> {
    let total = cfg.k + cfg.k_open;
    let mut closed: Vec<Array1<f64>> = Vec::with_capacity(cfg.k);
    let mut open: Vec<Array1<f64>> = Vec::with_capacity(cfg.k_open);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for i in 0..total {
        let raw = gaussian(rng, cfg.d);
        let v = if cfg.d >= total {
            unit(project_out(raw, &basis))?
        } else if i >= cfg.k && cfg.d > cfg.k {
            unit(project_out(raw, &basis[..cfg.k]))?
        } else {
            unit(raw)?
        };
        if cfg.d >= total || i < cfg.k.min(cfg.d) {
            basis.push(v.clone());
        }
        if i < cfg.k {
            closed.push(v);
        } else {
            open.push(v);
        }
    }
    let all: Vec<&Array1<f64>> = closed.iter().chain(open.iter()).collect();
    for a in 0..all.len() {
        for b in 0..a {
            if (all[a] - all[b]).dot(&(all[a] - all[b])) < 1e-12 {
                return Err(CroftError::Dimension(format!(
                    "prototypes {a} and {b} coincide in d = {}",
                    cfg.d
                )));
            }
        }
    }
    Ok((closed, open))
}

/// Orthogonal map rotating by `angle` in `floor(d/2)` mutually orthogonal random planes.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize, angle: f64) -> Result<Array2<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let v = project_out(gaussian(rng, d), &basis);
        basis.push(unit(v)?);
    }
    let mut r = Array2::<f64>::eye(d);
    let (c, s) = (angle.cos(), angle.sin());
    for pair in basis.chunks_exact(2) {
        let (p, q) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                r[[i, j]] += (c - 1.0) * (p[i] * p[j] + q[i] * q[j]) + s * (q[i] * p[j] - p[i] * q[j]);
            }
        }
    }
    Ok(r)
}

fn noisy_rows(rng: &mut ChaCha8Rng, protos: &[Array1<f64>], per_class: usize, sigma: f64) -> Result<Array2<f64>> {
    let d = protos[0].len();
    let mut m = Array2::zeros((protos.len() * per_class, d));
    for (c, mu) in protos.iter().enumerate() {
        for s in 0..per_class {
            let row = unit(mu + &(gaussian(rng, d) * sigma))?;
            m.row_mut(c * per_class + s).assign(&row);
        }
    }
    Ok(m)
}

fn rotate_rows(m: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let mut out = m.dot(&r.t());
    // Rotation preserves norms only up to rounding; restore exact unit rows.
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    out
}

pub fn generate_benchmark(cfg: &SynthConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (closed, open) = prototypes(&mut rng, cfg)?;
    let mut text = Array2::zeros((cfg.k, cfg.d));
    for (j, mu) in closed.iter().enumerate() {
        let row = unit(mu + &(gaussian(&mut rng, cfg.d) * cfg.text_noise))?;
        text.row_mut(j).assign(&row);
    }
    let base_closed = noisy_rows(&mut rng, &closed, cfg.samples_per_class, cfg.sigma)?;
    let base_open = noisy_rows(&mut rng, &open, cfg.samples_per_class, cfg.sigma)?;
    let closed_labels: Vec<i32> = (0..cfg.k)
        .flat_map(|c| std::iter::repeat_n(c as i32, cfg.samples_per_class))
        .collect();
    let class_names: Vec<String> = (0..cfg.k).map(|c| format!("class_{c}")).collect();
    let domain_names: Vec<String> = (0..cfg.n_domains).map(|j| format!("domain_{j}")).collect();

    let mut domains = Vec::with_capacity(cfg.n_domains);
    let mut open_blocks = Vec::with_capacity(cfg.n_domains);
    for j in 0..cfg.n_domains {
        let angle = j as f64 * cfg.shift_strength;
        let (img, opn) = if j == 0 || angle == 0.0 {
            (base_closed.clone(), base_open.clone())
        } else {
            let r = random_rotation(&mut rng, cfg.d, angle)?;
            (rotate_rows(&base_closed, &r), rotate_rows(&base_open, &r))
        };
        let role = if j == 0 { Role::ClosedId } else { Role::ClosedOod };
        let n = img.nrows();
        let mut fs = FeatureSet::new(
            img,
            text.clone(),
            closed_labels.clone(),
            vec![j as u32; n],
            role,
            class_names.clone(),
        )?
        .with_domain_names(domain_names.clone());
        fs.normalized = true;
        domains.push(fs);
        open_blocks.push(opn);
    }
    let views: Vec<_> = open_blocks.iter().map(|b| b.view()).collect();
    let open_img = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| CroftError::Dimension(e.to_string()))?;
    let per_domain = base_open.nrows();
    let n_open = open_img.nrows();
    let open_domains: Vec<u32> = (0..n_open).map(|i| (i / per_domain) as u32).collect();
    let mut open_fs = FeatureSet::new(
        open_img,
        text.clone(),
        vec![OPEN_SET_LABEL; n_open],
        open_domains,
        Role::OpenOod,
        class_names,
    )?
    .with_domain_names(domain_names);
    open_fs.normalized = true;
    Ok(Benchmark {
        domains,
        open: open_fs,
        text_features: text,
    })
}
