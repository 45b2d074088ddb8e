//! Finite-difference audit of every analytic gradient on seeded random instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::generator::{self, GeneratorParams};
use crate::grad::{self, FlatParamVector, ParamGradient, DEFAULT_GRAD_STEP};
use crate::instance::Instance;
use crate::losses::{self, Batch, EdrVariant, LossWeights};
use crate::model::{self, AdapterParams};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_d: usize,
    pub max_n: usize,
    pub max_k: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            seed: 0,
            max_d: 8,
            max_n: 16,
            max_k: 5,
            step: DEFAULT_GRAD_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Worst relative error seen for one loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub max_rel_error: f64,
    pub worst_instance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    pub tolerance: f64,
    pub instances: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_rel_error))
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22}{:>14}{:>10}{:>8}\n", "loss", "max_rel_err", "instance", "ok");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<22}{:>14.3e}{:>10}{:>8}\n",
                c.loss,
                c.max_rel_error,
                c.worst_instance,
                if c.max_rel_error <= self.tolerance { "yes" } else { "NO" }
            ));
        }
        out
    }
}

fn adapter_error<F>(params: &AdapterParams, analytic: &ParamGradient, h: f64, f: F) -> Result<f64>
where
    F: Fn(&AdapterParams) -> Result<f64> + Sync,
{
    let d = params.d();
    let tau = params.temperature;
    let fd = grad::fd_gradient(
        |x| {
            FlatParamVector(x.to_vec())
                .to_params(d, tau)
                .and_then(|p| f(&p))
                .unwrap_or(f64::NAN)
        },
        FlatParamVector::from_params(params).as_slice(),
        h,
    )?;
    Ok(grad::max_relative_error(analytic.flatten().as_slice(), &fd))
}

fn generator_error(inst: &Instance, lambda1: f64, h: f64) -> Result<f64> {
    let u = model::adapt_image(inst.image.view(), &inst.params)?;
    let analytic = generator::generator_gradient(
        u.view(),
        inst.text.view(),
        &inst.generator,
        &inst.labels,
        &inst.params,
        lambda1,
    )?;
    let d = inst.d();
    let fd = grad::fd_gradient(
        |x| {
            let g = GeneratorParams {
                g_matrix: ndarray::Array2::from_shape_vec((d, d), x.to_vec()).unwrap(),
                norm_preserving: inst.generator.norm_preserving,
            };
            generator::generator_objective(u.view(), inst.text.view(), &g, &inst.labels, &inst.params, lambda1)
                .unwrap_or(f64::NAN)
        },
        inst.generator.g_matrix.as_slice().unwrap(),
        h,
    )?;
    Ok(grad::max_relative_error(analytic.as_slice().unwrap(), &fd))
}

const LOSSES: [&str; 6] = [
    "cross_entropy",
    "edr_mean_grad",
    "edr_per_sample",
    "lc",
    "generator_objective",
    "croft_total",
];

/// Relative errors of all six gradients on one instance, in [`LOSSES`] order.
fn check_instance(inst: &Instance, h: f64) -> Result<[f64; 6]> {
    let b = Batch::new(inst.image.view(), inst.text.view(), &inst.labels)?;
    let p = &inst.params;
    let ce = grad::grad_cross_entropy(b.image, b.text, b.labels, p)?;
    let ce_err = adapter_error(p, &ce, h, |q| losses::cross_entropy_risk(&b, q))?;
    let mut edr = [0.0; 2];
    for (slot, variant) in edr.iter_mut().zip([EdrVariant::MeanGrad, EdrVariant::PerSample]) {
        let (_, g) = losses::edr_loss_with_grad(b.image, b.text, p, variant)?;
        *slot = adapter_error(p, &g, h, |q| losses::edr_loss(b.image, b.text, q, variant))?;
    }
    let lambda_sim = 0.7;
    let (_, lc) = losses::lc_loss_with_grad(&b, p, &inst.generator, lambda_sim)?;
    let lc_err = adapter_error(p, &lc, h, |q| {
        Ok(losses::lc_loss_with_grad(&b, q, &inst.generator, lambda_sim)?.0)
    })?;
    let gen_err = generator_error(inst, 1.5, h)?;
    let w = LossWeights {
        lambda1: 1.5,
        lambda2: 0.8,
        lambda_sim,
        edr_variant: EdrVariant::MeanGrad,
    };
    let (_, total) = losses::croft_total_with_grad(&b, p, &inst.generator, &w)?;
    let total_err = adapter_error(p, &total, h, |q| {
        Ok(losses::croft_total(&b, q, &inst.generator, &w)?.total)
    })?;
    Ok([ce_err, edr[0], edr[1], lc_err, gen_err, total_err])
}

/// Runs the suite on `cfg.instances` instances drawn from one seeded stream.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks: Vec<LossCheck> = LOSSES
        .iter()
        .map(|name| LossCheck {
            loss: name.to_string(),
            max_rel_error: 0.0,
            worst_instance: 0,
        })
        .collect();
    for i in 0..cfg.instances {
        let inst = Instance::random(&mut rng, cfg.max_d, cfg.max_n, cfg.max_k);
        let errs = check_instance(&inst, cfg.step)?;
        for (c, e) in checks.iter_mut().zip(errs) {
            // NaN errors must win so a broken gradient is never hidden.
            if e.is_nan() || e > c.max_rel_error {
                c.max_rel_error = e;
                c.worst_instance = i;
            }
        }
    }
    Ok(GradcheckReport {
        checks,
        tolerance: cfg.tolerance,
        instances: cfg.instances,
    })
}
