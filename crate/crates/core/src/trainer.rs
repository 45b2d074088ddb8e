//! SGD training loop over the adapters with interleaved generator updates.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CroftError, Result};
use crate::features::{FeatureSet, Role};
use crate::generator::{self, GeneratorParams};
use crate::grad::{self, ParamGradient};
use crate::losses::{self, Batch, EdrVariant, LossBreakdown, LossWeights};
use crate::model::{self, AdapterParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Croft,
    CeOnly,
    EnergyMin,
    NoLc,
    NoLe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Croft => "croft",
            Mode::CeOnly => "ce_only",
            Mode::EnergyMin => "energy_min",
            Mode::NoLc => "no_lc",
            Mode::NoLe => "no_le",
        }
    }

    fn uses_generator(self) -> bool {
        matches!(self, Mode::Croft | Mode::NoLe)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = CroftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "croft" => Ok(Mode::Croft),
            "ce_only" => Ok(Mode::CeOnly),
            "energy_min" => Ok(Mode::EnergyMin),
            "no_lc" => Ok(Mode::NoLc),
            "no_le" => Ok(Mode::NoLe),
            other => Err(CroftError::Validation(format!(
                "unknown mode {other:?} (expected croft, ce_only, energy_min, no_lc or no_le)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_g: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_sim: f64,
    pub temperature: f64,
    pub edr_variant: EdrVariant,
    pub gen_steps: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Stops after this many SGD steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Rescale generated rows to the norm of their source rows.
    pub norm_preserving: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            lr_g: 0.002,
            batch_size: 32,
            max_epochs: 30,
            lambda1: 15.0,
            lambda2: 30.0,
            lambda_sim: 15.0,
            temperature: 1.0,
            edr_variant: EdrVariant::MeanGrad,
            gen_steps: 1,
            seed: 0,
            mode: Mode::Croft,
            max_steps: None,
            norm_preserving: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("lr_g", self.lr_g), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CroftError::Validation(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(CroftError::Validation("batch_size must be >= 1".into()));
        }
        self.weights().validate()
    }

    /// Loss weights after the mode's ablation is applied.
    pub fn weights(&self) -> LossWeights {
        let mut w = LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_sim: self.lambda_sim,
            edr_variant: self.edr_variant,
        };
        match self.mode {
            Mode::Croft | Mode::EnergyMin => {}
            Mode::CeOnly => {
                w.lambda1 = 0.0;
                w.lambda2 = 0.0;
            }
            Mode::NoLc => w.lambda1 = 0.0,
            Mode::NoLe => w.lambda2 = 0.0,
        }
        w
    }
}

/// Losses recorded for one SGD step, evaluated before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub generator: GeneratorParams,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<HistoryEntry>,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Mean total loss over the steps of `epoch`, if it ran.
    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        let totals: Vec<f64> = self
            .history
            .iter()
            .filter(|h| h.epoch == epoch)
            .map(|h| h.losses.total)
            .collect();
        (!totals.is_empty()).then(|| totals.iter().sum::<f64>() / totals.len() as f64)
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }
}

/// `params - lr * grads`.
pub fn sgd_step(params: &AdapterParams, grads: &ParamGradient, lr: f64) -> Result<AdapterParams> {
    let d = params.d();
    if grads.d_theta_i.dim() != (d, d) || grads.d_theta_t.dim() != (d, d) {
        return Err(CroftError::Dimension(format!(
            "gradient shapes {:?}/{:?} vs adapters {d}x{d}",
            grads.d_theta_i.dim(),
            grads.d_theta_t.dim()
        )));
    }
    let mut next = params.clone();
    next.theta_i.scaled_add(-lr, &grads.d_theta_i);
    next.theta_t.scaled_add(-lr, &grads.d_theta_t);
    if next.theta_i.iter().chain(next.theta_t.iter()).any(|v| !v.is_finite()) {
        return Err(CroftError::Divergence {
            term: "sgd_step".into(),
            detail: "non-finite adapter after update".into(),
        });
    }
    Ok(next)
}

/// Objective value and adapter gradient for one batch under `cfg.mode`.
pub fn mode_objective(
    batch: &Batch,
    params: &AdapterParams,
    gen: &GeneratorParams,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamGradient)> {
    match cfg.mode {
        Mode::CeOnly => {
            let u = model::adapt_image(batch.image, params)?;
            let v = model::adapt_text(batch.text, params)?;
            let (ce, adj) = grad::cross_entropy_rows(u.view(), v.view(), batch.labels, params.temperature)?;
            let b = LossBreakdown {
                ce_id: ce,
                total: ce,
                ..Default::default()
            };
            Ok((b, adj.to_params(batch.image, batch.text)))
        }
        Mode::EnergyMin => losses::energy_min_with_grad(batch, params, cfg.lambda2),
        Mode::Croft | Mode::NoLc | Mode::NoLe => losses::croft_total_with_grad(batch, params, gen, &cfg.weights()),
    }
}

fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Trains adapters on closed-set ID data; deterministic given `cfg.seed`.
pub fn train(dataset: &FeatureSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_from(dataset, cfg, AdapterParams::identity(dataset.d(), cfg.temperature))
}

/// As [`train`] but starting from given adapters.
pub fn train_from(dataset: &FeatureSet, cfg: &TrainConfig, init: AdapterParams) -> Result<Checkpoint> {
    if dataset.role != Role::ClosedId {
        return Err(CroftError::Validation(format!(
            "training data must have role closed_id, found {}",
            dataset.role
        )));
    }
    cfg.validate()?;
    dataset.validate()?;
    let d = dataset.d();
    if init.d() != d {
        return Err(CroftError::Dimension(format!(
            "adapters are {0}x{0}, features have d = {d}",
            init.d()
        )));
    }
    let labels = dataset.class_labels()?;
    let n = dataset.n();
    if n == 0 {
        return Err(CroftError::Validation("training set is empty".into()));
    }
    let text = dataset.text_features.view();
    let mut params = init;
    let mut gen = GeneratorParams::identity(d, cfg.norm_preserving);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs_done = 0;
    let step_limit = cfg.max_steps.unwrap_or(usize::MAX);
    let weights = cfg.weights();

    'epochs: for epoch in 0..cfg.max_epochs {
        if history.len() >= step_limit {
            break;
        }
        if n > cfg.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            if history.len() >= step_limit {
                break 'epochs;
            }
            let (img, lab): (Array2<f64>, Vec<usize>) = if chunk.len() == n && n <= cfg.batch_size {
                (dataset.image_features.clone(), labels.clone())
            } else {
                (
                    select_rows(&dataset.image_features, chunk),
                    chunk.iter().map(|&i| labels[i]).collect(),
                )
            };
            let batch = Batch::new(img.view(), text, &lab)?;
            if cfg.mode.uses_generator() && weights.lambda1 + weights.lambda2 > 0.0 {
                let u = model::adapt_image(batch.image, &params)?;
                for _ in 0..cfg.gen_steps {
                    gen = generator::generator_step(u.view(), text, &gen, &lab, &params, weights.lambda1, cfg.lr_g)?;
                }
            }
            let (breakdown, grads) = mode_objective(&batch, &params, &gen, cfg)?;
            if let Some(term) = breakdown.non_finite_term() {
                return Err(CroftError::Divergence {
                    term: term.into(),
                    detail: format!("non-finite loss at step {}", history.len()),
                });
            }
            if !grads.is_finite() {
                return Err(CroftError::Divergence {
                    term: "gradient".into(),
                    detail: format!("non-finite adapter gradient at step {}", history.len()),
                });
            }
            history.push(HistoryEntry {
                step: history.len(),
                epoch,
                losses: breakdown,
            });
            params = sgd_step(&params, &grads, cfg.lr)?;
        }
        epochs_done = epoch + 1;
    }
    Ok(Checkpoint {
        params,
        generator: gen,
        epoch: epochs_done,
        history,
        config: cfg.clone(),
    })
}

/// Fixed history CSV header.
pub const HISTORY_COLUMNS: &str = "step,ce_id,ce_gen,similarity,edr_id,edr_gen,total";

pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from(HISTORY_COLUMNS);
    out.push('\n');
    for h in history {
        let l = &h.losses;
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            h.step, l.ce_id, l.ce_gen, l.similarity, l.edr_id, l.edr_gen, l.total
        ));
    }
    out
}

// Checkpoint storage: `<base>.json` manifest plus `<base>.bin` holding three
// matrix blocks (theta_I, theta_T, g). Each block: magic "CF64", little-endian
// u32 version 1, rows, cols, then rows*cols little-endian f64 values row-major.

pub const BLOCK_MAGIC: &[u8; 4] = b"CF64";
const BLOCK_VERSION: u32 = 1;
const BLOCK_HEADER: usize = 16;
const CHECKPOINT_FORMAT: &str = "croft-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    d: usize,
    temperature: f64,
    norm_preserving: bool,
    epoch: usize,
    config: TrainConfig,
    history: Vec<HistoryEntry>,
}

fn encode_block(buf: &mut Vec<u8>, m: &Array2<f64>) {
    buf.extend_from_slice(BLOCK_MAGIC);
    for w in [BLOCK_VERSION, m.nrows() as u32, m.ncols() as u32] {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_block(bytes: &[u8], at: &mut usize) -> Result<Array2<f64>> {
    let rest = &bytes[*at..];
    if rest.len() < BLOCK_HEADER {
        return Err(CroftError::Truncated {
            expected: *at + BLOCK_HEADER,
            found: bytes.len(),
        });
    }
    if &rest[..4] != BLOCK_MAGIC {
        return Err(CroftError::Format(format!("bad block magic {:?}", &rest[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(rest[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    if word(1) != BLOCK_VERSION as usize {
        return Err(CroftError::Format(format!("unsupported block version {}", word(1))));
    }
    let (rows, cols) = (word(2), word(3));
    let len = BLOCK_HEADER + rows * cols * 8;
    if rest.len() < len {
        return Err(CroftError::Truncated {
            expected: *at + len,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = rest[BLOCK_HEADER..len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *at += len;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| CroftError::Format(e.to_string()))
}

/// Resolves a checkpoint base path to its `(binary, manifest)` pair.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let base = match base.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    (base.with_extension("bin"), base.with_extension("json"))
}

pub fn encode_checkpoint_params(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    encode_block(&mut buf, &ckpt.params.theta_i);
    encode_block(&mut buf, &ckpt.params.theta_t);
    encode_block(&mut buf, &ckpt.generator.g_matrix);
    buf
}

pub fn save_checkpoint(ckpt: &Checkpoint, base: &Path) -> Result<()> {
    let (bin, json) = checkpoint_paths(base);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        d: ckpt.params.d(),
        temperature: ckpt.params.temperature,
        norm_preserving: ckpt.generator.norm_preserving,
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        history: ckpt.history.clone(),
    };
    fs::write(&bin, encode_checkpoint_params(ckpt)).map_err(|e| CroftError::io(&bin, e))?;
    let mut f = fs::File::create(&json).map_err(|e| CroftError::io(&json, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| CroftError::io(&json, e))?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<Checkpoint> {
    let (bin, json) = checkpoint_paths(base);
    let text = fs::read_to_string(&json).map_err(|e| CroftError::io(&json, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(CroftError::Format(format!(
            "{} is not a version-1 checkpoint manifest",
            json.display()
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| CroftError::io(&bin, e))?;
    let mut at = 0;
    let theta_i = decode_block(&bytes, &mut at)?;
    let theta_t = decode_block(&bytes, &mut at)?;
    let g = decode_block(&bytes, &mut at)?;
    if at != bytes.len() {
        return Err(CroftError::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - at
        )));
    }
    for (name, mat) in [("theta_i", &theta_i), ("theta_t", &theta_t), ("g", &g)] {
        if mat.dim() != (m.d, m.d) {
            return Err(CroftError::Dimension(format!(
                "{name} is {:?}, manifest says d = {}",
                mat.dim(),
                m.d
            )));
        }
    }
    let params = AdapterParams::new(theta_i, theta_t, m.temperature)?;
    let generator = GeneratorParams {
        g_matrix: g,
        norm_preserving: m.norm_preserving,
    };
    generator.validate()?;
    Ok(Checkpoint {
        params,
        generator,
        epoch: m.epoch,
        history: m.history,
        config: m.config,
    })
}
