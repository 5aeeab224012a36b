//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage error, 3 input or validation error,
//! 4 numerical fit error. Every command writes a [`ResultRecord`] as JSON
//! to `--out` (stdout when omitted).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::covmodels::{make_cov, matrix_to_rows, rows_to_matrix, CovModel, CovSpec, Covariance};
use crate::error::{input, Error, Result};
use crate::io::{read_matrix, write_matrix, MatrixFormat};
use crate::mnrsa::{fit_mnrsa, naive_rsa, RsaConfig, RsaProblem};
use crate::mnsrm::{
    fit_srm_ecm, reconstruct, reconstruction_error, row_means, transform_new_subject, SrmConfig,
    SrmDataset, SrmModel, SrmVariant,
};
use crate::optim::OptimSettings;
use crate::synth::{gen_rsa_synth, gen_srm_synth, rmse_corr, RsaSynthConfig, SrmSynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_FIT: i32 = 4;

/// Machine-readable outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub command: String,
    /// Arguments needed to rerun the command (`argv`) plus resolved settings.
    pub config: Value,
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub seed: u64,
    pub version: String,
    /// Metrics or estimates that are undefined for this run.
    pub degenerate: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub estimates: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ResultRecord {
    fn new(command: &str, config: Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            config,
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            degenerate: BTreeMap::new(),
            estimates: BTreeMap::new(),
        }
    }

    /// Record a metric; non-finite values are dropped and flagged.
    fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.into(), value);
        } else {
            self.degenerate.insert(name.into(), true);
        }
    }

    /// The record without timings, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mnkit", version, about = "Matrix-normal models: MN-RSA, MN-SRM, DP-SRM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic data.
    #[command(subcommand)]
    Gen(GenCmd),
    /// Fit a model.
    #[command(subcommand)]
    Fit(FitCmd),
    /// Score estimates against ground truth.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run a benchmark grid.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
enum GenCmd {
    Rsa(GenArgs),
    Srm(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON generator config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Bin)]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Bin,
    Csv,
}

impl FormatArg {
    fn ext(self) -> &'static str {
        match self {
            FormatArg::Bin => "bin",
            FormatArg::Csv => "csv",
        }
    }
}

#[derive(Subcommand, Debug)]
enum FitCmd {
    Rsa(FitRsaArgs),
    Srm(FitSrmArgs),
}

#[derive(Args, Debug)]
struct FitRsaArgs {
    /// `t × v` data matrix.
    #[arg(long)]
    data: PathBuf,
    /// `t × c` design matrix.
    #[arg(long)]
    design: PathBuf,
    #[arg(long, default_value = "diagonal")]
    spatial: String,
    #[arg(long, default_value = "ar1")]
    temporal: String,
    #[arg(long, default_value_t = 15)]
    rank: usize,
    /// Seed for the initial nuisance loadings.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitSrmArgs {
    /// Directory of per-subject `v × t` matrices, read in file-name order.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Dp)]
    variant: VariantArg,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory to save the fitted model in.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Dp,
    Mn,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    Rsa(EvalRsaArgs),
    Srm(EvalSrmArgs),
}

#[derive(Args, Debug)]
struct EvalRsaArgs {
    /// Result JSON from `fit rsa`.
    #[arg(long)]
    est: PathBuf,
    /// True correlation matrix.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalSrmArgs {
    /// Directory written by `fit srm --model-out`.
    #[arg(long)]
    model: PathBuf,
    /// Held-out subject, `v × t`.
    #[arg(long)]
    heldout: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    Rsa(BenchRsaArgs),
}

#[derive(Args, Debug)]
struct BenchRsaArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [2500usize, 10000])]
    voxels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [300usize, 600, 1200])]
    trs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.08f64, 0.4])]
    snrs: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 16)]
    conditions: usize,
    #[arg(long, default_value_t = 15)]
    rank: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cells fitted concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON-lines output, one record per cell.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (including the program name), execute, and return the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let echo: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match dispatch(cli.command, echo) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mnkit: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Contract(_) | Error::Io(_) => EXIT_INPUT,
        Error::SingularFactor(_)
        | Error::Conditioning(_)
        | Error::Initialization(_)
        | Error::Fit(_) => EXIT_FIT,
    }
}

fn dispatch(cmd: Command, argv: Vec<String>) -> Result<()> {
    match cmd {
        Command::Gen(GenCmd::Rsa(a)) => gen_rsa(a, argv),
        Command::Gen(GenCmd::Srm(a)) => gen_srm(a, argv),
        Command::Fit(FitCmd::Rsa(a)) => fit_rsa(a, argv),
        Command::Fit(FitCmd::Srm(a)) => fit_srm(a, argv),
        Command::Eval(EvalCmd::Rsa(a)) => eval_rsa(a, argv),
        Command::Eval(EvalCmd::Srm(a)) => eval_srm(a, argv),
        Command::Bench(BenchCmd::Rsa(a)) => bench_rsa(a, argv),
    }
}

fn emit(out: Option<&Path>, rec: &ResultRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(rec).expect("records serialize") + "\n";
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("serializable") + "\n")?;
    Ok(())
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn gen_rsa(a: GenArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let mut cfg: RsaSynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RsaSynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let b = gen_rsa_synth(&cfg)?;
    let gen_time = secs(start);
    fs::create_dir_all(&a.out_dir)?;
    let fmt = matrix_format(a.format);
    let ext = a.format.ext();
    for (name, m) in [
        ("y", &b.y),
        ("design", &b.design),
        ("u_true", &b.u_true),
        ("corr_true", &b.corr_true),
    ] {
        write_matrix(&a.out_dir.join(format!("{name}.{ext}")), m, fmt)?;
    }
    let truth = json!({
        "generator": "rsa",
        "config": cfg,
        "realized_snr": b.realized_snr,
        "snr_definition": "frobenius norm of design signal / frobenius norm of all other terms",
        "voxel_scale": b.voxel_scale,
        "files": { "data": format!("y.{ext}"), "design": format!("design.{ext}"),
                   "u_true": format!("u_true.{ext}"), "corr_true": format!("corr_true.{ext}") },
    });
    write_json(&a.out_dir.join("truth.json"), &truth)?;
    let mut rec = ResultRecord::new("gen rsa", json!({ "argv": argv, "generator": cfg }), cfg.seed);
    rec.metric("realized_snr", b.realized_snr);
    rec.timings.insert("generate".into(), gen_time);
    emit(a.out.as_deref(), &rec)
}

/// SRM generator config plus the number of subjects held out of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SrmGenConfig {
    #[serde(flatten)]
    synth: SrmSynthConfig,
    #[serde(default = "one")]
    n_heldout: usize,
}

fn one() -> usize {
    1
}

fn gen_srm(a: GenArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let mut cfg: SrmGenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SrmGenConfig {
            synth: SrmSynthConfig::default(),
            n_heldout: 1,
        },
    };
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let mut all = cfg.synth.clone();
    all.n += cfg.n_heldout;
    let b = gen_srm_synth(&all)?;
    let gen_time = secs(start);
    let fmt = matrix_format(a.format);
    let ext = a.format.ext();
    let train = a.out_dir.join("train");
    let held = a.out_dir.join("heldout");
    fs::create_dir_all(&train)?;
    fs::create_dir_all(&held)?;
    for (j, x) in b.subjects.iter().enumerate() {
        let (dir, idx) = if j < cfg.synth.n {
            (&train, j)
        } else {
            (&held, j - cfg.synth.n)
        };
        write_matrix(&dir.join(format!("subject_{idx:03}.{ext}")), x, fmt)?;
    }
    write_matrix(&a.out_dir.join(format!("s_true.{ext}")), &b.s_true, fmt)?;
    let truth = json!({
        "generator": "srm",
        "config": cfg,
        "realized_snr": b.realized_snr,
        "snr_definition": "frobenius norm of shared signal / frobenius norm of noise, pooled over subjects",
        "files": { "s_true": format!("s_true.{ext}"), "train": "train", "heldout": "heldout" },
    });
    write_json(&a.out_dir.join("truth.json"), &truth)?;
    let mut rec = ResultRecord::new(
        "gen srm",
        json!({ "argv": argv, "generator": cfg }),
        cfg.synth.seed,
    );
    rec.metric("realized_snr", b.realized_snr);
    rec.timings.insert("generate".into(), gen_time);
    emit(a.out.as_deref(), &rec)
}

fn matrix_format(f: FormatArg) -> MatrixFormat {
    match f {
        FormatArg::Bin => MatrixFormat::Binary,
        FormatArg::Csv => MatrixFormat::Csv,
    }
}

fn fit_rsa(a: FitRsaArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let y = read_matrix(&a.data)?;
    let x = read_matrix(&a.design)?;
    let load = secs(start);
    let problem = RsaProblem::new(y, x)?;
    let cfg = RsaConfig {
        spatial: CovSpec::simple(&a.spatial, problem.voxels())?,
        temporal_base: CovSpec::simple(&a.temporal, problem.timepoints())?,
        residual_rank: a.rank,
        optim: OptimSettings {
            max_iters: a.max_iters,
            ..Default::default()
        },
        seed: a.seed,
    };
    let fit_start = Instant::now();
    let r = fit_mnrsa(&problem, &cfg)?;
    let fit = secs(fit_start);
    let mut rec = ResultRecord::new(
        "fit rsa",
        json!({
            "argv": argv,
            "spatial": a.spatial, "temporal": a.temporal, "rank": a.rank,
            "optim": cfg.optim, "seed": a.seed,
            "timepoints": problem.timepoints(), "voxels": problem.voxels(),
            "conditions": problem.conditions(),
        }),
        a.seed,
    );
    rec.metric("loglik", r.loglik_trace.last().map_or(f64::NAN, |x| x.1));
    rec.metric("iterations", r.iterations as f64);
    rec.metric("converged", f64::from(u8::from(r.converged)));
    rec.metric("trace_ratio", r.trace_ratio);
    rec.degenerate.insert("u".into(), r.degenerate);
    rec.degenerate.insert("corr".into(), r.corr.is_none());
    rec.estimates.insert("u".into(), matrix_to_rows(&r.u));
    if let Some(c) = &r.corr {
        rec.estimates.insert("corr".into(), matrix_to_rows(c));
    }
    rec.timings.insert("load".into(), load);
    rec.timings.insert("fit".into(), fit);
    emit(a.out.as_deref(), &rec)
}

fn eval_rsa(a: EvalRsaArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let est: ResultRecord = read_json(&a.est)?;
    let truth = read_matrix(&a.truth)?;
    let corr = est.estimates.get("corr").map(|r| rows_to_matrix(r)).transpose()?;
    let (rmse, degenerate) = rmse_corr(corr.as_ref(), &truth)?;
    let mut rec = ResultRecord::new("eval rsa", json!({ "argv": argv }), est.seed);
    rec.metric("rmse_corr", rmse);
    rec.degenerate.insert("estimate".into(), degenerate);
    rec.timings.insert("eval".into(), secs(start));
    emit(a.out.as_deref(), &rec)
}

fn list_matrix_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("csv") | Some("bin") | Some("mnm")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return input(format!("{}: no matrix files", dir.display()));
    }
    Ok(files)
}

/// On-disk description of a fitted SRM, next to its matrix files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SrmManifest {
    config: SrmConfig,
    n_subjects: usize,
    voxels: usize,
    timepoints: usize,
    tau2: Vec<f64>,
    sigma_v_params: Vec<f64>,
    sigma_t_params: Vec<f64>,
    loglik_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn fit_srm(a: FitSrmArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let files = list_matrix_files(&a.data_dir)?;
    let subjects = files.iter().map(|f| read_matrix(f)).collect::<Result<Vec<_>>>()?;
    let data = SrmDataset::new(subjects)?;
    let load = secs(start);
    let variant = match a.variant {
        VariantArg::Dp => SrmVariant::Dp,
        VariantArg::Mn => SrmVariant::Mn,
    };
    let mut cfg = SrmConfig::for_variant(variant, a.k, data.voxels(), data.timepoints());
    cfg.max_iters = a.max_iters;
    cfg.rel_tol = a.rel_tol;
    cfg.seed = a.seed;
    let fit_start = Instant::now();
    let m = fit_srm_ecm(&data, &cfg)?;
    let fit = secs(fit_start);
    let mut rec = ResultRecord::new(
        "fit srm",
        json!({ "argv": argv, "srm": cfg, "subjects": files }),
        a.seed,
    );
    rec.metric("loglik", *m.loglik_trace.last().expect("trace is non-empty"));
    rec.metric("iterations", m.iterations as f64);
    rec.metric("converged", f64::from(u8::from(m.converged)));
    rec.metric("free_params", m.n_free_params() as f64);
    let mean_err = (0..data.n_subjects())
        .map(|j| {
            let yhat = reconstruct(&m, &m.loadings(j), &m.intercept(j))?;
            reconstruction_error(&data.subjects()[j], &yhat)
        })
        .collect::<Result<Vec<f64>>>()?;
    rec.metric(
        "train_reconstruction_error",
        mean_err.iter().sum::<f64>() / mean_err.len() as f64,
    );
    rec.estimates.insert("tau2".into(), vec![m.tau2.clone()]);
    rec.timings.insert("load".into(), load);
    rec.timings.insert("fit".into(), fit);
    if let Some(dir) = &a.model_out {
        save_srm(dir, &cfg, &m)?;
    }
    emit(a.out.as_deref(), &rec)
}

fn save_srm(dir: &Path, cfg: &SrmConfig, m: &SrmModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bin = MatrixFormat::Binary;
    write_matrix(&dir.join("s.bin"), &m.s, bin)?;
    write_matrix(&dir.join("b.bin"), &DMatrix::from_column_slice(m.b.len(), 1, m.b.as_slice()), bin)?;
    write_matrix(&dir.join("w_post_mean.bin"), &m.w_post_mean, bin)?;
    write_matrix(&dir.join("w_post_colcov.bin"), &m.w_post_colcov, bin)?;
    let manifest = SrmManifest {
        config: cfg.clone(),
        n_subjects: m.n_subjects(),
        voxels: m.voxels(),
        timepoints: m.timepoints(),
        tau2: m.tau2.clone(),
        sigma_v_params: m.sigma_v.params().as_slice().to_vec(),
        sigma_t_params: m.sigma_t.params().as_slice().to_vec(),
        loglik_trace: m.loglik_trace.clone(),
        iterations: m.iterations,
        converged: m.converged,
    };
    write_json(&dir.join("model.json"), &manifest)
}

fn load_srm(dir: &Path) -> Result<SrmModel> {
    let man: SrmManifest = read_json(&dir.join("model.json"))?;
    let with = |spec: &CovSpec, p: &[f64]| -> Result<CovModel> { make_cov(spec)?.with_params(p) };
    let s = read_matrix(&dir.join("s.bin"))?;
    let b = read_matrix(&dir.join("b.bin"))?;
    let model = SrmModel {
        s,
        b: DVector::from_column_slice(b.as_slice()),
        tau2: man.tau2,
        sigma_v: with(&man.config.spatial, &man.sigma_v_params)?,
        sigma_t: with(&man.config.temporal, &man.sigma_t_params)?,
        w_post_mean: read_matrix(&dir.join("w_post_mean.bin"))?,
        w_post_colcov: read_matrix(&dir.join("w_post_colcov.bin"))?,
        s_prior: man.config.s_prior,
        loglik_trace: man.loglik_trace,
        iterations: man.iterations,
        converged: man.converged,
    };
    if model.s.shape() != (man.config.k, man.timepoints) || model.b.len() != man.n_subjects * man.voxels {
        return input(format!("{}: model files disagree with model.json", dir.display()));
    }
    Ok(model)
}

fn eval_srm(a: EvalSrmArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let m = load_srm(&a.model)?;
    let y = read_matrix(&a.heldout)?;
    if y.shape() != (m.voxels(), m.timepoints()) {
        return input(format!(
            "held-out subject is {}×{}, model expects {}×{}",
            y.nrows(),
            y.ncols(),
            m.voxels(),
            m.timepoints()
        ));
    }
    let load = secs(start);
    let t0 = Instant::now();
    let w = transform_new_subject(&m, &y)?;
    let yhat = reconstruct(&m, &w, &row_means(&y))?;
    let err = reconstruction_error(&y, &yhat)?;
    let mut rec = ResultRecord::new("eval srm", json!({ "argv": argv }), m_seed(&a.model));
    rec.metric("reconstruction_error", err);
    rec.timings.insert("load".into(), load);
    rec.timings.insert("eval".into(), secs(t0));
    emit(a.out.as_deref(), &rec)
}

fn m_seed(dir: &Path) -> u64 {
    read_json::<SrmManifest>(&dir.join("model.json")).map_or(0, |m| m.config.seed)
}

/// One benchmark cell: generate, fit MN-RSA and naive RSA, score both.
pub fn bench_cell(
    v: usize,
    t: usize,
    snr: f64,
    c: usize,
    rank: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ResultRecord> {
    let synth = RsaSynthConfig {
        t,
        v,
        c,
        snr,
        seed,
        ..Default::default()
    };
    let t0 = Instant::now();
    let b = gen_rsa_synth(&synth)?;
    let gen = secs(t0);
    let p = RsaProblem::new(b.y, b.design)?;
    let mut cfg = RsaConfig::default_for(&p);
    cfg.residual_rank = rank;
    cfg.optim.max_iters = max_iters;
    cfg.seed = seed;
    let mut rec = ResultRecord::new(
        "bench rsa",
        json!({ "synth": synth, "rank": rank, "optim": cfg.optim }),
        seed,
    );
    let t1 = Instant::now();
    let fit = fit_mnrsa(&p, &cfg);
    let fit_time = secs(t1);
    match fit {
        Ok(r) => {
            let (e, deg) = rmse_corr(r.corr.as_ref(), &b.corr_true)?;
            rec.metric("rmse_mnrsa", e);
            rec.degenerate.insert("mnrsa".into(), deg);
            rec.metric("iterations", r.iterations as f64);
            rec.metric("time_per_iteration", fit_time / r.iterations.max(1) as f64);
        }
        Err(e) if exit_code(&e) == EXIT_FIT => {
            rec.degenerate.insert("mnrsa".into(), true);
        }
        Err(e) => return Err(e),
    }
    let t2 = Instant::now();
    let naive = naive_rsa(&p)?;
    let naive_time = secs(t2);
    rec.metric("rmse_naive", rmse_corr(Some(&naive), &b.corr_true)?.0);
    rec.metric("realized_snr", b.realized_snr);
    rec.timings.insert("generate".into(), gen);
    rec.timings.insert("fit".into(), fit_time);
    rec.timings.insert("naive".into(), naive_time);
    Ok(rec)
}

fn bench_rsa(a: BenchRsaArgs, argv: Vec<String>) -> Result<()> {
    if a.jobs == 0 || a.reps == 0 {
        return input("bench: --jobs and --reps must be positive");
    }
    let mut cells = Vec::new();
    for &v in &a.voxels {
        for &t in &a.trs {
            for &snr in &a.snrs {
                for rep in 0..a.reps {
                    cells.push((v, t, snr, a.seed + rep as u64));
                }
            }
        }
    }
    let sink: Mutex<Box<dyn Write + Send>> = Mutex::new(match &a.out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Error::Input(format!("bench: {e}")))?;
    pool.install(|| {
        cells.par_iter().try_for_each(|&(v, t, snr, seed)| -> Result<()> {
            let mut rec = bench_cell(v, t, snr, a.conditions, a.rank, a.max_iters, seed)?;
            if let Value::Object(m) = &mut rec.config {
                m.insert("argv".into(), json!(argv));
            }
            let line = serde_json::to_string(&rec).expect("records serialize") + "\n";
            sink.lock().expect("sink lock").write_all(line.as_bytes())?;
            Ok(())
        })
    })
}
