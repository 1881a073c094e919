//! End-to-end fitting and report documents.
//!
//! [`fit_model`] runs one estimation method on a dataset and returns a
//! [`FitResult`], which serializes to a self-describing JSON document and
//! renders as a plain-text table (4 decimals for display; the JSON keeps full
//! precision). [`scores_csv`] writes per-subject empirical Bayes latent scores
//! for reuse in later analyses.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exposure::{fit_exposure_mle, obs_loglik_x, MleOptions};
use crate::inference::{sandwich_var, wald_report, SandwichParts, WaldRow};
use crate::joint::fit_joint_mle;
use crate::moments::ExposureMoments;
use crate::outcome::{fit_outcome_ee, EeOptions, Scheme};
use crate::params::{Block, ParamLayout, ParamVector};
use crate::spec::ModelSpec;

/// Estimation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    /// Joint maximum likelihood over (θ₁, θ₂, θ₃).
    Mle,
    /// Estimating equations with a two-stage θ₃ plug-in.
    Ee(Scheme),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::Ee(s) => s.name(),
        }
    }
}

/// Where a report came from; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub deterministic: bool,
    /// SHA-256 of the model configuration text.
    pub config_hash: Option<String>,
    /// SHA-256 of the subjects and outcomes files, concatenated.
    pub data_hash: Option<String>,
    /// The configuration text itself.
    pub config: Option<String>,
}

impl Provenance {
    pub fn new() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            ..Default::default()
        }
    }
}

/// Surrogate missingness pattern (1-based indices) and its subject count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCount {
    pub observed: Vec<usize>,
    pub subjects: usize,
}

/// A completed (or failed) fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub scheme: Option<Scheme>,
    pub outcome_cov: String,
    pub converged: bool,
    /// Failure description when `converged` is false.
    pub message: Option<String>,
    pub iterations: usize,
    /// Final gradient or estimating-equation norm (per subject).
    pub convergence_norm: f64,
    pub n_subjects: usize,
    pub n_outcomes: usize,
    /// Parameter names in θ₁, θ₂, θ₃ order.
    pub names: Vec<String>,
    /// Which block each parameter belongs to ("theta1", "theta2" or "theta3").
    pub blocks: Vec<String>,
    pub estimates: Vec<f64>,
    /// Covariance of all estimates (sandwich for estimating equations,
    /// inverse observed information for maximum likelihood).
    pub cov: Option<Vec<Vec<f64>>>,
    /// θ₁ variance ignoring uncertainty in θ̂₃ (estimating equations only).
    pub theta1_naive: Option<Vec<Vec<f64>>>,
    /// Added θ₁ variance due to estimating θ₃ (estimating equations only).
    pub theta1_correction: Option<Vec<Vec<f64>>>,
    pub rows: Vec<WaldRow>,
    pub exposure_loglik: Option<f64>,
    pub joint_loglik: Option<f64>,
    pub patterns: Vec<PatternCount>,
    pub provenance: Provenance,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn blocks(layout: &ParamLayout) -> Vec<String> {
    (0..layout.len())
        .map(|k| {
            match layout.block_of(k) {
                Block::Theta1 => "theta1",
                Block::Theta2 => "theta2",
                Block::Theta3 => "theta3",
            }
            .to_string()
        })
        .collect()
}

fn patterns(data: &Dataset) -> Vec<PatternCount> {
    data.patterns()
        .iter()
        .zip(data.pattern_counts())
        .map(|(o, c)| PatternCount {
            observed: o.iter().map(|j| j + 1).collect(),
            subjects: c,
        })
        .collect()
}

impl FitResult {
    /// Report for a fit that failed; carries the best iterate if one exists
    /// but no covariance and no p-values.
    pub fn failed(spec: &ModelSpec, data: &Dataset, method: &Method, err: &Error, provenance: Provenance) -> Self {
        let layout = ParamLayout::new(spec);
        let (estimates, iterations, norm) = match err {
            Error::NotConverged {
                best, iterations, norm, ..
            } if best.len() == layout.len() => (best.clone(), *iterations, *norm),
            Error::NotConverged { iterations, norm, .. } => (Vec::new(), *iterations, *norm),
            _ => (Vec::new(), 0, f64::NAN),
        };
        let names: Vec<String> = if estimates.is_empty() {
            Vec::new()
        } else {
            layout.names().to_vec()
        };
        let rows = wald_report(&names, &estimates, None);
        FitResult {
            method: method.name().into(),
            scheme: match method {
                Method::Ee(s) => Some(s.clone()),
                Method::Mle => None,
            },
            outcome_cov: spec.outcome_cov.name().into(),
            converged: false,
            message: Some(err.to_string()),
            iterations,
            convergence_norm: if norm.is_finite() { norm } else { -1.0 },
            n_subjects: data.len(),
            n_outcomes: data.total_occasions(),
            blocks: if names.is_empty() { Vec::new() } else { blocks(&layout) },
            names,
            estimates,
            cov: None,
            theta1_naive: None,
            theta1_correction: None,
            rows,
            exposure_loglik: None,
            joint_loglik: None,
            patterns: patterns(data),
            provenance,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: format!("{}", e.column()),
            reason: e.to_string(),
        })
    }

    /// Row for a parameter by name.
    pub fn row(&self, name: &str) -> Option<&WaldRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Human-readable table of estimates.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let scheme = match &self.scheme {
            Some(Scheme::Ee2 { beta_star }) => format!(
                " (beta* = {})",
                beta_star.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(", ")
            ),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "method: {}{}   outcome covariance: {}   subjects: {}   outcomes: {}",
            self.method, scheme, self.outcome_cov, self.n_subjects, self.n_outcomes
        );
        let _ = writeln!(
            out,
            "converged: {}   iterations: {}   norm: {:.3e}",
            self.converged, self.iterations, self.convergence_norm
        );
        if let Some(m) = &self.message {
            let _ = writeln!(out, "note: {m}");
        }
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(9).max(9);
        let _ = writeln!(
            out,
            "{:<w$}  {:>10}  {:>10}  {:>9}  {:>8}  {:>8}  {:>21}",
            "parameter", "estimate", "s.e.", "z", "p(2-sd)", "p(1-sd)", "95% CI"
        );
        let opt = |v: Option<f64>, width: usize| match v {
            Some(x) => format!("{x:>width$.4}"),
            None => format!("{:>width$}", "-"),
        };
        for r in &self.rows {
            let ci = match (r.ci_low, r.ci_high) {
                (Some(a), Some(b)) => format!("({a:.4}, {b:.4})"),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<w$}  {:>10.4}  {}  {}  {}  {}  {:>21}",
                r.name,
                r.estimate,
                opt(r.se, 10),
                opt(r.z, 9),
                opt(r.p_two_sided, 8),
                opt(r.p_one_sided, 8),
                ci
            );
        }
        out
    }
}

/// Fit `method` to `data` and assemble the report.
pub fn fit_model(spec: &ModelSpec, data: &Dataset, method: &Method, provenance: Provenance) -> Result<FitResult> {
    let layout = ParamLayout::new(spec);
    match method {
        Method::Mle => {
            let fit = fit_joint_mle(spec, data, None, &MleOptions::default())?;
            let est = fit.theta.pack();
            let cov = DMatrix::from_fn(est.len(), est.len(), |i, j| fit.cov[i][j]);
            let exposure_loglik = obs_loglik_x(&layout, &fit.theta.theta3, data)?;
            Ok(FitResult {
                method: "mle".into(),
                scheme: None,
                outcome_cov: spec.outcome_cov.name().into(),
                converged: true,
                message: None,
                iterations: fit.iterations,
                convergence_norm: fit.score_norm,
                n_subjects: data.len(),
                n_outcomes: data.total_occasions(),
                rows: wald_report(&fit.names, &est, Some(&cov)),
                blocks: blocks(&layout),
                names: fit.names,
                estimates: est,
                cov: Some(fit.cov),
                theta1_naive: None,
                theta1_correction: None,
                exposure_loglik: Some(exposure_loglik),
                joint_loglik: Some(fit.loglik),
                patterns: patterns(data),
                provenance,
            })
        }
        Method::Ee(scheme) => {
            scheme.check(layout.n_beta())?;
            let ex = fit_exposure_mle(spec, data, None, &MleOptions::default())?;
            let oc = fit_outcome_ee(&layout, data, &ex.theta3, scheme, &EeOptions::default())?;
            let theta = ParamVector {
                theta1: oc.theta1.clone(),
                theta2: oc.theta2.clone(),
                theta3: ex.theta3.clone(),
            };
            let parts = SandwichParts::estimate(&layout, &theta, data, scheme)?;
            let var = sandwich_var(&parts)?;
            let est = theta.pack();
            Ok(FitResult {
                method: scheme.name().into(),
                scheme: Some(scheme.clone()),
                outcome_cov: spec.outcome_cov.name().into(),
                converged: true,
                message: None,
                iterations: oc.iterations,
                convergence_norm: oc.ee_norm,
                n_subjects: data.len(),
                n_outcomes: data.total_occasions(),
                rows: wald_report(layout.names(), &est, Some(&var.cov)),
                names: layout.names().to_vec(),
                blocks: blocks(&layout),
                estimates: est,
                cov: Some(to_rows(&var.cov)),
                theta1_naive: Some(to_rows(&var.naive)),
                theta1_correction: Some(to_rows(&var.correction)),
                exposure_loglik: Some(ex.loglik),
                joint_loglik: None,
                patterns: patterns(data),
                provenance,
            })
        }
    }
}

/// Per-subject empirical Bayes scores Ũ and var(U | X_obs) diagonals at θ₃.
pub fn scores_csv(spec: &ModelSpec, theta3: &[f64], data: &Dataset) -> Result<String> {
    let layout = ParamLayout::new(spec);
    let em = ExposureMoments::from_theta3(&layout, theta3)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "observed".into()];
    header.extend(spec.latent_names.iter().map(|n| format!("score:{n}")));
    header.extend(spec.latent_names.iter().map(|n| format!("var:{n}")));
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    let mut factors = Vec::with_capacity(data.patterns().len());
    for obs in data.patterns() {
        factors.push(em.pattern(obs)?);
    }
    for (i, s) in data.subjects().iter().enumerate() {
        let f = &factors[data.pattern_of(i)];
        let u = f.u_tilde(&em, &s.x, &s.w);
        let mut row = vec![
            s.id.clone(),
            s.observed()
                .iter()
                .map(|&j| spec.surrogate_names[j].clone())
                .collect::<Vec<_>>()
                .join(";"),
        ];
        row.extend(u.iter().map(|v| format!("{v:?}")));
        row.extend((0..spec.l()).map(|k| format!("{:?}", f.psi_tilde[(k, k)])));
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// θ₃ part of a report's estimates.
pub fn theta3_of(result: &FitResult) -> Vec<f64> {
    result
        .estimates
        .iter()
        .zip(&result.blocks)
        .filter(|(_, b)| b.as_str() == "theta3")
        .map(|(v, _)| *v)
        .collect()
}
