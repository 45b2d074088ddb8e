//! Command-line front end. Exit codes: 0 success, 1 validation error, 2 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::diagnostics::{self, DEFAULT_FD_DIM_LIMIT};
use crate::error::{CroftError, Result};
use crate::eval::{self, ClosedPopulation, Detector};
use crate::features::{self, FeatureSet, Role};
use crate::gradcheck::{self, GradcheckConfig};
use crate::losses::EdrVariant;
use crate::model::AdapterParams;
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, Mode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "croft",
    version,
    about = "Robust fine-tuning of linear adapters over frozen features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic benchmark as CFT1 file pairs.
    Synth(SynthArgs),
    /// Train adapters on a closed-set ID feature set.
    Train(TrainArgs),
    /// Evaluate a checkpoint on ID / shifted / open-set features.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Hessian structure checks, bound terms and energy percentiles.
    Diagnose(DiagnoseArgs),
    /// Leave-one-domain-out training and evaluation.
    Lodo(LodoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_open: Option<usize>,
    #[arg(long)]
    pub n_domains: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub shift_strength: Option<f64>,
    #[arg(long)]
    pub text_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Croft,
    CeOnly,
    EnergyMin,
    NoLc,
    NoLe,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Croft => Mode::Croft,
            ModeArg::CeOnly => Mode::CeOnly,
            ModeArg::EnergyMin => Mode::EnergyMin,
            ModeArg::NoLc => Mode::NoLc,
            ModeArg::NoLe => Mode::NoLe,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EdrArg {
    MeanGrad,
    PerSample,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda_sim: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_enum)]
    pub edr_variant: Option<EdrArg>,
    #[arg(long)]
    pub gen_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Let generated rows change norm.
    #[arg(long)]
    pub no_norm_preserving: bool,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Closed-set ID feature set (`<name>`, `<name>.cft1` or `<name>.json`).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint base path; writes `<out>.json`, `<out>.bin` and `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DetectorArg {
    Energy,
    Knn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PopulationArg {
    Id,
    Ood,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub open: Option<PathBuf>,
    /// Detection score; requires `--open`.
    #[arg(long, value_enum)]
    pub detector: Option<DetectorArg>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Closed-set population compared with the open set.
    #[arg(long, value_enum, default_value = "id")]
    pub closed_population: PopulationArg,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Checkpoint to inspect; identity adapters when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub open: Option<PathBuf>,
    /// Temperature of the identity adapters used without a checkpoint.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Skip finite-difference Hessians when `2 d^2` exceeds this.
    #[arg(long, default_value_t = DEFAULT_FD_DIM_LIMIT)]
    pub fd_dim_limit: usize,
    /// Rows of the ID set used for the finite-difference checks.
    #[arg(long, default_value_t = 16)]
    pub fd_rows: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LodoArgs {
    /// Closed-set domain feature sets (at least two).
    #[arg(long, num_args = 1.., required = true)]
    pub domains: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub open: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "energy")]
    pub detector: DetectorArg,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

/// Error raised when a numerical tolerance is breached.
fn tolerance_breach(what: &str) -> CroftError {
    CroftError::Divergence {
        term: what.into(),
        detail: "tolerance exceeded".into(),
    }
}

/// Overlays the fields of a JSON file onto `base`; unknown fields are rejected.
fn apply_config<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path).map_err(|e| CroftError::io(path, e))?;
    let overlay: serde_json::Value = serde_json::from_str(&text)?;
    let serde_json::Value::Object(fields) = overlay else {
        return Err(CroftError::Validation(format!(
            "{} must hold a JSON object",
            path.display()
        )));
    };
    let mut merged = serde_json::to_value(base)?;
    let target = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in fields {
        target.insert(k, v);
    }
    Ok(serde_json::from_value(merged)?)
}

fn config_sets(path: Option<&Path>, key: &str) -> Result<bool> {
    let Some(path) = path else { return Ok(false) };
    let text = fs::read_to_string(path).map_err(|e| CroftError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(v.get(key).is_some())
}

impl SynthArgs {
    pub fn to_config(&self) -> Result<SynthConfig> {
        let mut c = SynthConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        take!(
            d,
            k,
            k_open,
            n_domains,
            samples_per_class,
            sigma,
            shift_strength,
            text_noise,
            seed
        );
        let c = apply_config(c, self.config.as_deref())?;
        c.validate()?;
        Ok(c)
    }
}

impl TrainFlags {
    pub fn to_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        take!(
            lr,
            lr_g,
            batch_size,
            max_epochs,
            lambda1,
            lambda2,
            temperature,
            gen_steps,
            seed
        );
        // lambda_sim follows lambda1 unless given.
        c.lambda_sim = self.lambda_sim.unwrap_or(c.lambda1);
        c.max_steps = self.max_steps;
        if let Some(m) = self.mode {
            c.mode = m.into();
        }
        if let Some(v) = self.edr_variant {
            c.edr_variant = match v {
                EdrArg::MeanGrad => EdrVariant::MeanGrad,
                EdrArg::PerSample => EdrVariant::PerSample,
            };
        }
        c.norm_preserving = !self.no_norm_preserving;
        let mut c = apply_config(c, self.config.as_deref())?;
        if self.lambda_sim.is_none() && !config_sets(self.config.as_deref(), "lambda_sim")? {
            c.lambda_sim = c.lambda1;
        }
        c.validate()?;
        Ok(c)
    }
}

fn detector(arg: DetectorArg, k: usize) -> Detector {
    match arg {
        DetectorArg::Energy => Detector::Energy,
        DetectorArg::Knn => Detector::Knn { k },
    }
}

fn read_role(path: &Path, role: Role) -> Result<FeatureSet> {
    let fs = features::read_feature_set(path)?;
    if fs.role != role {
        return Err(CroftError::Validation(format!(
            "{} has role {}, expected {role}",
            path.display(),
            fs.role
        )));
    }
    Ok(fs)
}

fn emit_json<T: Serialize>(value: &T, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CroftError::io(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CroftError::io("<stdout>", e)),
    }
}

fn stdout_err(e: std::io::Error) -> CroftError {
    CroftError::io("<stdout>", e)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.to_config()?;
    let bench = synth::generate_benchmark(&cfg)?;
    let bases = bench.write(&a.out)?;
    writeln!(out, "{:<40}{:<12}{:>8}{:>6}", "file", "role", "rows", "d").map_err(stdout_err)?;
    let sets = bench.domains.iter().chain(std::iter::once(&bench.open));
    for (base, fs) in bases.iter().zip(sets) {
        let (bin, json) = features::file_pair(base);
        for p in [bin, json] {
            writeln!(
                out,
                "{:<40}{:<12}{:>8}{:>6}",
                p.display(),
                fs.role.as_str(),
                fs.n(),
                fs.d()
            )
            .map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.flags.to_config()?;
    let data = read_role(&a.data, Role::ClosedId)?;
    let ckpt = trainer::train(&data, &cfg)?;
    trainer::save_checkpoint(&ckpt, &a.out)?;
    let (bin, json) = trainer::checkpoint_paths(&a.out);
    let csv = json.with_extension("history.csv");
    fs::write(&csv, trainer::history_csv(&ckpt.history)).map_err(|e| CroftError::io(&csv, e))?;
    let last = ckpt.history.last().map(|h| h.losses.total);
    writeln!(
        out,
        "mode {} epochs {} steps {} final_total {}",
        cfg.mode,
        ckpt.epoch,
        ckpt.steps(),
        last.map_or("-".to_string(), |v| format!("{v:.6}"))
    )
    .map_err(stdout_err)?;
    for p in [json, bin, csv] {
        writeln!(out, "wrote {}", p.display()).map_err(stdout_err)?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = trainer::load_checkpoint(&a.checkpoint)?;
    let id = read_role(&a.id, Role::ClosedId)?;
    let ood = a.ood.as_deref().map(|p| read_role(p, Role::ClosedOod)).transpose()?;
    let open = a.open.as_deref().map(|p| read_role(p, Role::OpenOod)).transpose()?;
    if a.detector.is_some() && open.is_none() {
        return Err(CroftError::Validation(
            "detection needs the open_ood feature set; pass it with --open".into(),
        ));
    }
    let population = match a.closed_population {
        PopulationArg::Id => ClosedPopulation::Id,
        PopulationArg::Ood => ClosedPopulation::Ood,
    };
    let det = detector(a.detector.unwrap_or(DetectorArg::Energy), a.k);
    let report = eval::evaluate(&ckpt.params, &id, ood.as_ref(), open.as_ref(), det, population)?;
    out.write_all(report.to_table().as_bytes()).map_err(stdout_err)?;
    emit_json(&report, a.report.as_deref(), out)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg)?;
    out.write_all(report.to_table().as_bytes()).map_err(stdout_err)?;
    if !report.passed() {
        return Err(tolerance_breach("gradcheck"));
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport {
    hessian_structure: Option<diagnostics::HessianStructureReport>,
    bound: Option<diagnostics::BoundReport>,
    energy_percentiles: std::collections::BTreeMap<String, [f64; 5]>,
}

fn cmd_diagnose(a: &DiagnoseArgs, out: &mut dyn Write) -> Result<()> {
    let (params, gen) = match &a.checkpoint {
        Some(p) => {
            let c = trainer::load_checkpoint(p)?;
            (c.params, c.generator)
        }
        None => {
            let id = read_role(&a.id, Role::ClosedId)?;
            (
                AdapterParams::identity(id.d(), a.temperature),
                crate::generator::GeneratorParams::identity(id.d(), true),
            )
        }
    };
    let id = read_role(&a.id, Role::ClosedId)?;
    let ood = a.ood.as_deref().map(|p| read_role(p, Role::ClosedOod)).transpose()?;
    let open = a.open.as_deref().map(|p| read_role(p, Role::OpenOod)).transpose()?;
    let labels = id.class_labels()?;
    let rows = a.fd_rows.clamp(1, id.n());
    let hessian_structure = match diagnostics::hessian_structure_check(
        id.image_features.slice(ndarray::s![..rows, ..]),
        id.text_features.view(),
        &labels[..rows],
        &params,
        a.tol,
        a.fd_dim_limit,
    ) {
        Ok(r) => Some(r),
        Err(CroftError::TooLarge(msg)) => {
            writeln!(out, "skipping finite-difference Hessian checks: {msg}").map_err(stdout_err)?;
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(r) = &hessian_structure {
        writeln!(
            out,
            "score Hessian error {:.3e}  diagonal blocks {:.3e}  decomposition error {:.3e}  lse residual {:.6}  {}",
            r.score_hessian_error,
            r.diagonal_block_max,
            r.decomposition_error,
            r.lse_hessian_residual,
            if r.passed { "pass" } else { "FAIL" }
        )
        .map_err(stdout_err)?;
    }
    let generated = diagnostics::generated_rows(&id, &params, &gen)?;
    let bound = match &ood {
        Some(o) => Some(diagnostics::bound_report(
            &id,
            o,
            generated.view(),
            &params,
            EdrVariant::MeanGrad,
        )?),
        None => {
            writeln!(out, "no closed_ood set given; bound terms skipped").map_err(stdout_err)?;
            None
        }
    };
    if let Some(b) = &bound {
        writeln!(
            out,
            "E_S {:.6}  E_S^c {:.6}  E_T {:.6}  hessian_quadratic {:.6}  edr {:.6e}",
            b.e_hat_s, b.e_hat_s_c, b.e_hat_t, b.hessian_quadratic, b.edr_value
        )
        .map_err(stdout_err)?;
    }
    let mut sets: Vec<&FeatureSet> = vec![&id];
    sets.extend(ood.iter());
    sets.extend(open.iter());
    let table = diagnostics::energy_percentile_report(&params, &sets, Some((&id, &gen)))?;
    out.write_all(eval::percentile_table(&table).as_bytes())
        .map_err(stdout_err)?;
    let report = DiagnoseReport {
        hessian_structure: hessian_structure.clone(),
        bound,
        energy_percentiles: table,
    };
    if let Some(p) = &a.report {
        emit_json(&report, Some(p), out)?;
    }
    if hessian_structure.is_some_and(|r| !r.passed) {
        return Err(tolerance_breach("hessian_structure_check"));
    }
    Ok(())
}

fn cmd_lodo(a: &LodoArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.flags.to_config()?;
    let domains: Vec<FeatureSet> = a
        .domains
        .iter()
        .map(|p| {
            let fs = features::read_feature_set(p)?;
            if fs.role == Role::OpenOod {
                return Err(CroftError::Validation(format!(
                    "{} is an open_ood set, not a closed-set domain",
                    p.display()
                )));
            }
            Ok(fs)
        })
        .collect::<Result<_>>()?;
    let open: Vec<FeatureSet> = a
        .open
        .iter()
        .map(|p| read_role(p, Role::OpenOod))
        .collect::<Result<_>>()?;
    let report = eval::lodo_evaluate(&domains, &open, &cfg, detector(a.detector, a.k))?;
    for r in &report.per_domain {
        writeln!(
            out,
            "held-out domain {}",
            r.held_out_domain.map_or("-".into(), |d| d.to_string())
        )
        .map_err(stdout_err)?;
        out.write_all(r.to_table().as_bytes()).map_err(stdout_err)?;
    }
    writeln!(out, "average").map_err(stdout_err)?;
    out.write_all(report.average.to_table().as_bytes())
        .map_err(stdout_err)?;
    if let Some(p) = &a.report {
        emit_json(&report, Some(p), out)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Diagnose(a) => cmd_diagnose(a, out),
        Command::Lodo(a) => cmd_lodo(a, out),
    }
}

pub fn exit_code(err: &CroftError) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(err, "{e}");
            } else {
                let _ = write!(out, "{e}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
