//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage error, 3 unreadable or invalid input,
//! 4 convergence failure, 5 identifiability failure. Failures print a JSON
//! object to standard error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::cov::CovStructure;
use crate::error::Error;
use crate::io::{load_data, save_data};
use crate::outcome::Scheme;
use crate::report::{fit_model, scores_csv, theta3_of, FitResult, Method, Provenance};
use crate::sim::{self, DesignKind, Generator, Missingness, SimDesign};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;
pub const EXIT_IDENTIFIABILITY: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "latent-ee", version, about = "Latent-exposure outcome models: joint likelihood and estimating equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mle,
    Ee1,
    Ee2,
    Rc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignArg {
    Bias,
    Efficiency,
    Varratio,
}

impl From<DesignArg> for DesignKind {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Bias => DesignKind::Bias,
            DesignArg::Efficiency => DesignKind::Efficiency,
            DesignArg::Varratio => DesignKind::Varratio,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a subjects file and an outcomes file.
    Fit {
        /// Subjects CSV (id, W columns, surrogate columns).
        #[arg(long)]
        data_x: PathBuf,
        /// Outcomes CSV (id, occasion, y, Z columns).
        #[arg(long)]
        data_y: PathBuf,
        /// Model configuration (TOML).
        #[arg(long)]
        model: PathBuf,
        /// Estimation method; defaults to the configuration's `outcome.method`.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Fixed β* values for ee2, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        beta_star: Option<Vec<f64>>,
        /// Outcome covariance structure (overrides the configuration).
        #[arg(long)]
        outcome_cov: Option<String>,
        /// Record that the run must be reproducible bit for bit.
        #[arg(long)]
        deterministic: bool,
        /// Seed recorded in the report.
        #[arg(long)]
        seed: Option<u64>,
        /// Output prefix: writes PREFIX.report.json and PREFIX.scores.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo study and write per-cell results.
    Simulate {
        #[arg(long, value_enum)]
        design: DesignArg,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Design file (TOML); its `kind` must match --design.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output prefix: writes PREFIX.csv and PREFIX.manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one simulated dataset with a matching model configuration.
    Generate {
        #[arg(long, value_enum, default_value = "bias")]
        design: DesignArg,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replicate index within the design's generator stream.
        #[arg(long, default_value_t = 0)]
        rep: u64,
        /// Standardized effect (replaces the design's grid).
        #[arg(long, allow_hyphen_values = true)]
        beta_std: Option<f64>,
        /// Outcome correlation for AR-type truths (replaces the grid).
        #[arg(long, allow_hyphen_values = true)]
        rho: Option<f64>,
        /// Measurement-error fraction (replaces the grid).
        #[arg(long)]
        me_fraction: Option<f64>,
        /// Missingness scenario: complete, uniform, var-proportional or var-inverse.
        #[arg(long)]
        missingness: Option<String>,
        /// Output prefix: writes PREFIX.subjects.csv, PREFIX.outcomes.csv,
        /// PREFIX.model.cfg and PREFIX.truth.json.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure carried to the process exit.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub detail: serde_json::Value,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
            detail: json!({}),
        }
    }

    pub fn to_json(&self) -> String {
        json!({
            "error": self.kind,
            "exit_code": self.code,
            "message": self.message,
            "detail": self.detail,
        })
        .to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (code, kind, detail) = match &e {
            Error::Parse { line, column, reason } => {
                (EXIT_PARSE, "parse", json!({"line": line, "column": column, "reason": reason}))
            }
            Error::Join(id) => (EXIT_PARSE, "join", json!({"id": id})),
            Error::MissingCovariate { id, column } => {
                (EXIT_PARSE, "missing_covariate", json!({"id": id, "column": column}))
            }
            Error::Spec(v) => (
                EXIT_PARSE,
                "specification",
                json!({"violations": v.0.iter().map(|x| x.to_string()).collect::<Vec<_>>()}),
            ),
            Error::Dimension(_) => (EXIT_PARSE, "dimension", json!({})),
            Error::Io(_) => (EXIT_PARSE, "io", json!({})),
            Error::BadDesign(_) => (EXIT_PARSE, "bad_design", json!({})),
            Error::NotConverged { what, iterations, norm, .. } => (
                EXIT_CONVERGENCE,
                "not_converged",
                json!({"what": what, "iterations": iterations, "norm": norm}),
            ),
            Error::NumericJacobianFailure { rel_err } => {
                (EXIT_CONVERGENCE, "numeric_jacobian", json!({"rel_err": rel_err}))
            }
            Error::BadParam(_) => (EXIT_CONVERGENCE, "bad_parameter", json!({})),
            Error::Unidentified(_) => (EXIT_IDENTIFIABILITY, "unidentified", json!({})),
            Error::RankDeficient { columns } => {
                (EXIT_IDENTIFIABILITY, "rank_deficient", json!({"columns": columns}))
            }
            Error::Singular(_) => (EXIT_IDENTIFIABILITY, "singular", json!({})),
        };
        Self {
            code,
            kind,
            message,
            detail,
        }
    }
}

fn hash_files(paths: &[&Path]) -> Result<String, Error> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::from(Error::Io(e)))
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    data_x: &Path,
    data_y: &Path,
    model: &Path,
    method: Option<MethodArg>,
    beta_star: Option<Vec<f64>>,
    outcome_cov: Option<String>,
    deterministic: bool,
    seed: Option<u64>,
    out: &Path,
) -> Result<String, Failure> {
    let (config, text) = ModelConfig::load(model)?;
    let mut spec = config.to_spec()?;
    if let Some(name) = &outcome_cov {
        spec.outcome_cov = match CovStructure::parse(name) {
            Some(c) if !matches!(c, CovStructure::DiagAr1Blocks { .. }) => c,
            _ => return Err(Failure::usage(format!("unknown outcome covariance `{name}`"))),
        };
        spec.validate().map_err(Error::from)?;
    }
    let method = match (method, &beta_star) {
        (Some(MethodArg::Ee2), None) => return Err(Failure::usage("--method ee2 requires --beta-star")),
        (Some(m), Some(_)) if m != MethodArg::Ee2 => {
            return Err(Failure::usage("--beta-star is only valid with --method ee2"))
        }
        (Some(MethodArg::Mle), _) => Method::Mle,
        (Some(MethodArg::Ee1), _) => Method::Ee(Scheme::Ee1),
        (Some(MethodArg::Rc), _) => Method::Ee(Scheme::Rc),
        (Some(MethodArg::Ee2), Some(b)) => Method::Ee(Scheme::Ee2 { beta_star: b.clone() }),
        (None, Some(b)) => Method::Ee(Scheme::Ee2 { beta_star: b.clone() }),
        (None, None) => match config.default_scheme()? {
            Some(s) => Method::Ee(s),
            None if config.outcome.method.as_deref() == Some("mle") => Method::Mle,
            None => return Err(Failure::usage("no --method given and the configuration declares none")),
        },
    };
    if let Method::Ee(s) = &method {
        if let Err(e) = s.check(spec.outcome_latents.len()) {
            return Err(Failure::usage(e.to_string()));
        }
    }
    let data = load_data(data_x, data_y, &spec)?;
    let provenance = Provenance {
        seed,
        deterministic,
        config_hash: Some(ModelConfig::hash_text(&text)),
        data_hash: Some(hash_files(&[data_x, data_y])?),
        config: Some(text),
        ..Provenance::new()
    };
    let report_path = with_suffix(out, ".report.json");
    match fit_model(&spec, &data, &method, provenance.clone()) {
        Ok(result) => {
            write(&report_path, &(result.to_json() + "\n"))?;
            let scores = scores_csv(&spec, &theta3_of(&result), &data)?;
            write(&with_suffix(out, ".scores.csv"), &scores)?;
            Ok(result.table())
        }
        Err(e) => {
            let failed = FitResult::failed(&spec, &data, &method, &e, provenance);
            write(&report_path, &(failed.to_json() + "\n"))?;
            Err(e.into())
        }
    }
}

fn load_design(kind: DesignKind, params: Option<&Path>) -> Result<SimDesign, Failure> {
    let design = match params {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::Io)?;
            let d = SimDesign::from_toml(&text)?;
            if d.kind != kind {
                return Err(Failure::usage(format!(
                    "design file is of kind `{}` but --design is `{}`",
                    d.kind.name(),
                    kind.name()
                )));
            }
            d
        }
        None => SimDesign::for_kind(kind),
    };
    Ok(design)
}

fn cmd_simulate(
    design: DesignArg,
    reps: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
    params: Option<&Path>,
    out: &Path,
) -> Result<String, Failure> {
    let mut d = load_design(design.into(), params)?;
    if let Some(r) = reps {
        d.reps = r;
    }
    if let Some(n) = n {
        d.n = n;
    }
    if let Some(s) = seed {
        d.seed = s;
    }
    d.check()?;
    let result = sim::run(&d)?;
    write(&with_suffix(out, ".csv"), &result.to_csv()?)?;
    let manifest = serde_json::to_string_pretty(&json!({
        "manifest": result.manifest,
        "design": d,
    }))
    .expect("manifest serializes");
    write(&with_suffix(out, ".manifest.json"), &(manifest + "\n"))?;
    Ok(format!(
        "{} cells, {} replicate failures; wrote {}",
        result.manifest.cells,
        result.manifest.failures,
        with_suffix(out, ".csv").display()
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    design: DesignArg,
    params: Option<&Path>,
    n: Option<usize>,
    seed: Option<u64>,
    rep: u64,
    beta_std: Option<f64>,
    rho: Option<f64>,
    me_fraction: Option<f64>,
    missingness: Option<&str>,
    out: &Path,
) -> Result<String, Failure> {
    let mut d = load_design(design.into(), params)?;
    if let Some(n) = n {
        d.n = n;
    }
    if let Some(s) = seed {
        d.seed = s;
    }
    if let Some(b) = beta_std {
        d.beta_std_grid = vec![b];
    }
    if let Some(r) = rho {
        d.rho_grid = vec![r];
    }
    if let Some(f) = me_fraction {
        d.me_fractions = vec![f];
    }
    if let Some(m) = missingness {
        let parsed = match m {
            "complete" => Missingness::Complete,
            "uniform" => Missingness::Uniform,
            "var-proportional" => Missingness::VarProportional,
            "var-inverse" => Missingness::VarInverse,
            other => return Err(Failure::usage(format!("unknown missingness scenario `{other}`"))),
        };
        d.missingness = vec![parsed];
    }
    d.check()?;
    let cell = d.cells().into_iter().next().expect("grids are non-empty");
    let gen = Generator::new(&d, &cell)?;
    let data = gen.generate(rep)?;
    let spec = d.fit_spec();
    save_data(
        &data,
        &spec,
        &with_suffix(out, ".subjects.csv"),
        &with_suffix(out, ".outcomes.csv"),
    )?;
    write(&with_suffix(out, ".model.cfg"), &ModelConfig::from_single_latent(&spec).to_toml())?;
    let (truth, _) = gen.true_params();
    let truth_doc = json!({
        "beta": gen.beta,
        "beta_std": cell.beta_std,
        "rho": cell.rho,
        "me_fraction": cell.me_fraction,
        "missingness": cell.missingness.name(),
        "seed": d.seed,
        "rep": rep,
        "theta": truth,
    });
    write(
        &with_suffix(out, ".truth.json"),
        &(serde_json::to_string_pretty(&truth_doc).expect("truth serializes") + "\n"),
    )?;
    Ok(format!("wrote {} subjects to {}.*", data.len(), out.display()))
}

/// Execute a parsed command; returns the text to print on success.
pub fn execute(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Fit {
            data_x,
            data_y,
            model,
            method,
            beta_star,
            outcome_cov,
            deterministic,
            seed,
            out,
        } => cmd_fit(&data_x, &data_y, &model, method, beta_star, outcome_cov, deterministic, seed, &out),
        Command::Simulate {
            design,
            reps,
            n,
            seed,
            params,
            out,
        } => cmd_simulate(design, reps, n, seed, params.as_deref(), &out),
        Command::Generate {
            design,
            params,
            n,
            seed,
            rep,
            beta_std,
            rho,
            me_fraction,
            missingness,
            out,
        } => cmd_generate(
            design,
            params.as_deref(),
            n,
            seed,
            rep,
            beta_std,
            rho,
            me_fraction,
            missingness.as_deref(),
            &out,
        ),
    }
}

/// Parse arguments, run, print, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let f = Failure::usage(e.to_string());
            eprintln!("{}", f.to_json());
            return f.code;
        }
    };
    match execute(cli) {
        Ok(text) => {
            println!("{text}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code
        }
    }
}
