//! Command-line front end. Every command reads CSV, writes CSV/JSON into an
//! output location and records a manifest with content hashes of its inputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cellcov::{cellcov, CovOptions};
use crate::data::DataMatrix;
use crate::diagnostics::{distances, DiagOptions};
use crate::error::{Error, Result};
use crate::fastcellcov::FastCellCovModel;
use crate::inference::{cellboot, slope_contrast, BootOptions, IiOptions};
use crate::regression::{tune, CvReport, RegressionFit, TuneOptions};
use crate::sensitivity::{bivariate_sample, cellmr_slope, default_axis, if_surface, ols_slope, write_surface, ContaminationKind};
use crate::simharness::{run_coverage, run_mse, write_results, CoverageOptions, HarnessOptions, Method, ScenarioConfig};

pub const MODEL_SCHEMA: &str = "cellmr-model/1";

#[derive(Debug, Parser)]
#[command(name = "cellmr", version, about = "Cellwise robust multivariate regression")]
pub struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tune (k, lambda) by cross-validation and fit the model.
    Fit(FitArgs),
    /// Predict responses for new predictor rows.
    Predict(PredictArgs),
    /// Outlier map and cell maps for a data set.
    Diagnose(ModelDataArgs),
    /// cellBoot percentile intervals for every slope.
    Bootstrap(BootstrapArgs),
    /// Empirical influence surface of a slope on a bivariate data set.
    Influence(InfluenceArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("cannot parse {s:?}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("level must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_epsilon(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("cannot parse {s:?}"))?;
    if v > 0.0 && v <= 0.1 {
        Ok(v)
    } else {
        Err(format!("epsilon must lie in (0, 0.1], got {v}"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated response column names; all other columns are predictors.
    #[arg(long, required = true, value_delimiter = ',')]
    pub response: Vec<String>,
    /// Rank or comma-separated rank grid (default 1..min(10, d-1)).
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Ridge penalty or comma-separated grid.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// The data the model was fitted on.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "B", default_value_t = 1000, value_parser = parse_positive)]
    pub b: usize,
    #[arg(long = "H", default_value_t = 50, value_parser = parse_positive)]
    pub h: usize,
    #[arg(long, default_value_t = 0.9, value_parser = parse_level)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Casewise,
    Cellwise,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    Cellmr,
    Ols,
}

#[derive(Debug, Args)]
pub struct InfluenceArgs {
    /// Bivariate CSV (predictor, response). A clean sample from the
    /// y = 0.9 x + e model is generated when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Rows of the generated sample.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Casewise)]
    pub kind: KindArg,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Cellmr)]
    pub estimator: EstimatorArg,
    #[arg(long, default_value_t = 0.02, value_parser = parse_epsilon)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 5, value_parser = parse_positive)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON (fields of the scenario configuration).
    #[arg(long)]
    pub config: PathBuf,
    /// Also run the bootstrap coverage study.
    #[arg(long)]
    pub coverage: bool,
    #[arg(long = "B", default_value_t = 200, value_parser = parse_positive)]
    pub b: usize,
    #[arg(long = "H", default_value_t = 10, value_parser = parse_positive)]
    pub h: usize,
    #[arg(long, default_value_t = 0.9, value_parser = parse_level)]
    pub level: f64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A fitted model as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    pub predictors: Vec<String>,
    pub responses: Vec<String>,
    pub options: CovOptions,
    pub fit: RegressionFit,
    pub cv: Option<CvReport>,
}

impl ModelFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: ModelFile = serde_json::from_str(&text)?;
        if model.schema != MODEL_SCHEMA {
            return Err(Error::Parse(format!("unsupported model schema {:?}", model.schema)));
        }
        Ok(model)
    }
}

/// Git-style content hash: sha256 of `"blob {len}\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn hash_file(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::json!({ "path": path.display().to_string(), "sha256": content_hash(&bytes) }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, config: serde_json::Value, inputs: &[&Path]) -> Result<()> {
    let inputs = inputs.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>>>()?;
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "tool": "cellmr",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "inputs": inputs,
        }),
    )
}

/// Columns reordered as predictors then responses.
fn arrange(data: &DataMatrix, responses: &[String]) -> Result<(DataMatrix, Vec<String>, Vec<String>)> {
    let names = data.names();
    let mut resp_idx = Vec::new();
    for r in responses {
        let j = names
            .iter()
            .position(|n| n == r)
            .ok_or_else(|| Error::InvalidConfig(format!("response column {r:?} not in the input")))?;
        if resp_idx.contains(&j) {
            return Err(Error::InvalidConfig(format!("response column {r:?} listed twice")));
        }
        resp_idx.push(j);
    }
    let pred_idx: Vec<usize> = (0..names.len()).filter(|j| !resp_idx.contains(j)).collect();
    if pred_idx.is_empty() || resp_idx.is_empty() {
        return Err(Error::InvalidConfig("need at least one predictor and one response column".into()));
    }
    let order: Vec<usize> = pred_idx.iter().chain(resp_idx.iter()).copied().collect();
    let arranged = data.select_cols(&order)?;
    let pick = |idx: &[usize]| idx.iter().map(|&j| names[j].clone()).collect();
    Ok((arranged, pick(&pred_idx), pick(&resp_idx)))
}

fn select_named(data: &DataMatrix, wanted: &[String]) -> Result<DataMatrix> {
    let cols = wanted
        .iter()
        .map(|w| {
            data.names()
                .iter()
                .position(|n| n == w)
                .ok_or_else(|| Error::InvalidConfig(format!("column {w:?} not in the input")))
        })
        .collect::<Result<Vec<_>>>()?;
    data.select_cols(&cols)
}

fn write_matrix_csv(path: &Path, names: &[String], rows: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in rows.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    if a.response.is_empty() {
        return Err(Error::InvalidConfig("no response columns given".into()));
    }
    let raw = DataMatrix::read_csv(&a.input)?;
    let (data, predictors, responses) = arrange(&raw, &a.response)?;
    let p = predictors.len();
    let options = CovOptions::default();
    let t = TuneOptions { k_grid: a.k.clone(), lambda_grid: a.lambda.clone(), folds: a.folds, seed: a.seed };
    let single = a.k.as_ref().is_some_and(|k| k.len() == 1) && a.lambda.as_ref().is_some_and(|l| l.len() == 1);
    let (cv, fit) = if single {
        let fit = crate::regression::fit(&data, p, a.k.as_ref().unwrap()[0], a.lambda.as_ref().unwrap()[0], &options)?;
        (None, fit)
    } else {
        let (cv, fit) = tune(&data, p, &t, &options)?;
        (Some(cv), fit)
    };
    std::fs::create_dir_all(&a.out)?;
    if let Some(cv) = &cv {
        let mut w = csv::Writer::from_path(a.out.join("cv.csv"))?;
        w.write_record(["k", "lambda", "cv"])?;
        for (&(k, l), v) in cv.grid.iter().zip(&cv.cv_values) {
            w.write_record([k.to_string(), format!("{l:?}"), format!("{v:?}")])?;
        }
        w.flush()?;
    }
    let x = data.select_cols(&(0..p).collect::<Vec<_>>())?;
    write_matrix_csv(&a.out.join("fitted.csv"), &responses, &fit.predict_matrix(&x)?)?;
    let model = ModelFile { schema: MODEL_SCHEMA.into(), predictors, responses, options, fit, cv };
    write_json(&a.out.join("model.json"), &model)?;
    write_manifest(
        &a.out,
        "fit",
        serde_json::json!({ "response": a.response, "k": a.k, "lambda": a.lambda, "folds": a.folds, "seed": a.seed }),
        &[&a.input],
    )
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = ModelFile::read(&a.model)?;
    let x = select_named(&DataMatrix::read_csv(&a.input)?, &model.predictors)?;
    write_matrix_csv(&a.out, &model.responses, &model.fit.predict_matrix(&x)?)
}

fn load_model_data(model: &Path, input: &Path) -> Result<(ModelFile, DataMatrix)> {
    let model = ModelFile::read(model)?;
    let wanted: Vec<String> = model.predictors.iter().chain(&model.responses).cloned().collect();
    let data = select_named(&DataMatrix::read_csv(input)?, &wanted)?;
    Ok((model, data))
}

fn cmd_diagnose(a: &ModelDataArgs) -> Result<()> {
    let (model, data) = load_model_data(&a.model, &a.input)?;
    let report = distances(&model.fit, &data, &DiagOptions { seed: a.seed, ..DiagOptions::default() })?;
    report.write_tables(&a.out, data.names(), model.fit.p)?;
    write_json(
        &a.out.join("cutoffs.json"),
        &serde_json::json!({ "rd": report.cutoff_rd, "pd": report.cutoff_pd, "total_deviation": report.cutoff_t }),
    )?;
    write_manifest(&a.out, "diagnose", serde_json::json!({ "seed": a.seed }), &[&a.model, &a.input])
}

fn cmd_bootstrap(a: &BootstrapArgs) -> Result<()> {
    let (model, data) = load_model_data(&a.model, &a.input)?;
    let fit = &model.fit;
    let (p, q) = (fit.p, fit.q);
    let joint = cellcov(&data, fit.k, &model.options)?;
    let aux = FastCellCovModel::train(&data, &joint, &model.options)?;
    let contrasts: Vec<Vec<f64>> = (0..p).flat_map(|r| (0..q).map(move |c| slope_contrast(p, q, r, c))).collect();
    let opts = BootOptions { b: a.b, h: a.h, level: a.level, seed: a.seed, ii: IiOptions::default() };
    let result = cellboot(&data, fit, &aux, &contrasts, &opts)?;

    std::fs::create_dir_all(&a.out)?;
    let labels: Vec<String> =
        (0..p).flat_map(|r| (0..q).map(move |c| (r, c))).map(|(r, c)| format!("{}:{}", model.predictors[r], model.responses[c])).collect();
    let mut summary = result.summary_json();
    if let Some(items) = summary["contrasts"].as_array_mut() {
        for (item, label) in items.iter_mut().zip(&labels) {
            item["name"] = serde_json::Value::String(label.clone());
        }
    }
    write_json(&a.out.join("intervals.json"), &summary)?;
    let mut w = csv::Writer::from_path(a.out.join("replicates.csv"))?;
    w.write_record(std::iter::once("replicate".to_string()).chain(labels.iter().cloned()))?;
    let draws = result.coef_samples.first().map_or(0, |v| v.len());
    for b in 0..draws {
        w.write_record(std::iter::once((b + 1).to_string()).chain(result.coef_samples.iter().map(|v| format!("{:?}", v[b]))))?;
    }
    w.flush()?;
    write_manifest(
        &a.out,
        "bootstrap",
        serde_json::json!({ "B": a.b, "H": a.h, "level": a.level, "seed": a.seed }),
        &[&a.model, &a.input],
    )
}

fn cmd_influence(a: &InfluenceArgs) -> Result<()> {
    let data = match &a.input {
        Some(path) => DataMatrix::read_csv(path)?,
        None => bivariate_sample(a.n, a.seed)?,
    };
    if data.ncols() != 2 {
        return Err(Error::DimensionMismatch(format!("influence needs two columns, got {}", data.ncols())));
    }
    let kind = match a.kind {
        KindArg::Casewise => ContaminationKind::Casewise,
        KindArg::Cellwise => ContaminationKind::Cellwise,
    };
    let surface = match a.estimator {
        EstimatorArg::Cellmr => {
            let f = cellmr_slope(&data, 1, a.k, a.lambda, 0, 0, CovOptions::default())?;
            if_surface(&data, &f, kind, &default_axis(), a.epsilon, a.draws, a.seed)?
        }
        EstimatorArg::Ols => if_surface(&data, &ols_slope(1, 0, 0), kind, &default_axis(), a.epsilon, a.draws, a.seed)?,
    };
    std::fs::create_dir_all(&a.out)?;
    write_surface(std::fs::File::create(a.out.join("influence.csv"))?, &surface)?;
    let inputs: Vec<&Path> = a.input.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &a.out,
        "influence",
        serde_json::json!({
            "estimate": "finite-sample empirical influence (difference quotient), not the population influence function",
            "kind": format!("{:?}", a.kind).to_lowercase(),
            "estimator": format!("{:?}", a.estimator).to_lowercase(),
            "epsilon": a.epsilon,
            "draws": a.draws,
            "k": a.k,
            "lambda": a.lambda,
            "seed": a.seed,
            "n": data.nrows(),
        }),
        &inputs,
    )
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let cfg: ScenarioConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    let opts = HarnessOptions { folds: a.folds, k_grid: a.k.clone(), ..HarnessOptions::default() };
    let mse = run_mse(&cfg, &[Method::Ridge, Method::CellMr], &opts)?;
    let coverage = if a.coverage {
        let c = CoverageOptions { level: a.level, b: a.b, h: a.h, ii: IiOptions::default() };
        vec![run_coverage(&cfg, &c, &opts)?]
    } else {
        Vec::new()
    };
    std::fs::create_dir_all(&a.out)?;
    write_results(std::fs::File::create(a.out.join("results.csv"))?, &[mse], &coverage, cfg.reps)?;
    write_manifest(
        &a.out,
        "simulate",
        serde_json::json!({
            "scenario": cfg,
            "coverage": a.coverage,
            "B": a.b,
            "H": a.h,
            "level": a.level,
            "folds": a.folds,
            "k": a.k,
        }),
        &[&a.config],
    )
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Influence(a) => cmd_influence(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage error, 2 data or model error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
