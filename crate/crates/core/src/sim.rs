//! Data generation and Monte Carlo experiments.
//!
//! Designs have one latent exposure U ~ N(α + γ₂ᵀW, var_u) measured by `p`
//! surrogates Xⱼ = νⱼ + λⱼU + δⱼ, and `occasions` outcomes
//! Yⱼ = β₀ + βU + κᵀZⱼ + εⱼ with Z ~ N(0, I).
//!
//! The measurement-error fraction f is var(δⱼ)/var(Xⱼ), so
//! var(δⱼ) = f/(1 − f)·λⱼ²·var_u. Effects are given on the standardized
//! scale β·√var_u/√noise_total, where noise_total is the mean of the diagonal
//! of Ω_ε.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cov::CovStructure;
use crate::data::{Dataset, SubjectData};
use crate::error::{Error, Result};
use crate::exposure::{fit_exposure_mle, subject_scores_theta3, MleOptions};
use crate::inference::{sandwich_var, SandwichParts, Z975};
use crate::joint::{fit_joint_mle, observed_information};
use crate::linalg::{inverse_checked, SpdFactor};
use crate::moments::ExposureMoments;
use crate::outcome::{fit_outcome_ee, EeOptions, Scheme};
use crate::params::{ExposureParams, ParamLayout, ParamVector};
use crate::spec::{Entry, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Bias,
    Efficiency,
    Varratio,
}

impl DesignKind {
    pub fn name(&self) -> &'static str {
        match self {
            DesignKind::Bias => "bias",
            DesignKind::Efficiency => "efficiency",
            DesignKind::Varratio => "varratio",
        }
    }
}

/// How surrogate missingness patterns are drawn (completely at random).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Missingness {
    /// Every surrogate observed.
    Complete,
    /// All non-empty patterns equally likely.
    Uniform,
    /// Pattern probability ∝ var(U | X₍ₘ₎).
    VarProportional,
    /// Pattern probability ∝ 1/var(U | X₍ₘ₎).
    VarInverse,
}

impl Missingness {
    pub fn name(&self) -> &'static str {
        match self {
            Missingness::Complete => "complete",
            Missingness::Uniform => "uniform",
            Missingness::VarProportional => "var-proportional",
            Missingness::VarInverse => "var-inverse",
        }
    }
}

/// Versioned simulation design. Every number here is an input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimDesign {
    pub kind: DesignKind,
    /// Subjects per dataset.
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Surrogates.
    pub p: usize,
    pub occasions: usize,
    pub var_u: f64,
    pub alpha: f64,
    /// Loadings (first must be 1); empty = all ones.
    pub loadings: Vec<f64>,
    /// Surrogate intercepts (first must be 0); empty = all zeros.
    pub intercepts: Vec<f64>,
    /// Number of subject-level covariates W, each with effect `gamma2` on U.
    pub n_w: usize,
    pub gamma2: f64,
    pub beta0: f64,
    /// One entry per occasion-level covariate.
    pub kappa: Vec<f64>,
    /// Mean outcome error variance.
    pub noise_total: f64,
    pub true_cov: CovStructure,
    /// Relative per-occasion variances for heterogeneous truths (rescaled to mean `noise_total`).
    pub variance_profile: Vec<f64>,
    /// σ_w²/(σ² + σ_w²) for a compound-symmetry truth.
    pub within_share: f64,
    pub fit_cov: CovStructure,
    pub beta_std_grid: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub me_fractions: Vec<f64>,
    /// Per-surrogate multipliers on the error odds f/(1 − f); empty = all
    /// surrogates equally reliable. Spread-out multipliers make var(U | X₍ₘ₎)
    /// differ widely between missingness patterns.
    pub odds_profile: Vec<f64>,
    pub missingness: Vec<Missingness>,
    /// Fixed β* values for EE2 (raw units); 0 and β_true are always added.
    pub beta_star_grid: Vec<f64>,
    /// Subjects in the single large sample used for expected-information ratios.
    pub expected_n: usize,
    /// Also compute information-based MLE standard errors.
    pub mle_se: bool,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self::bias()
    }
}

impl SimDesign {
    /// Misspecified outcome covariance: heterogeneous AR(1) truth, compound symmetry fit.
    pub fn bias() -> Self {
        Self {
            kind: DesignKind::Bias,
            n: 500,
            reps: 200,
            seed: 20090101,
            p: 3,
            occasions: 4,
            var_u: 1.0,
            alpha: 0.0,
            loadings: Vec::new(),
            intercepts: Vec::new(),
            n_w: 0,
            gamma2: 0.0,
            beta0: 0.0,
            kappa: vec![0.5],
            noise_total: 4.0,
            true_cov: CovStructure::Har1,
            variance_profile: vec![0.5, 1.0, 1.5, 2.0],
            within_share: 0.5,
            fit_cov: CovStructure::Cs,
            beta_std_grid: vec![0.0, 0.25, 0.5, 1.0],
            rho_grid: vec![0.0, 0.25, 0.5, 0.75],
            me_fractions: vec![0.22],
            odds_profile: Vec::new(),
            missingness: vec![Missingness::Complete],
            beta_star_grid: Vec::new(),
            expected_n: 20_000,
            mle_se: false,
        }
    }

    /// Correctly specified compound symmetry; EE1 versus joint ML.
    pub fn efficiency() -> Self {
        Self {
            kind: DesignKind::Efficiency,
            true_cov: CovStructure::Cs,
            fit_cov: CovStructure::Cs,
            beta_std_grid: vec![0.0, 0.1, 0.25, 0.5],
            rho_grid: vec![0.0],
            me_fractions: vec![0.10, 0.22, 0.36],
            ..Self::bias()
        }
    }

    /// Twelve surrogates with missing patterns; EE2(β*) versus EE1.
    pub fn varratio() -> Self {
        Self {
            kind: DesignKind::Varratio,
            p: 12,
            true_cov: CovStructure::Cs,
            fit_cov: CovStructure::Cs,
            noise_total: 1.0,
            beta_std_grid: vec![0.5, 1.0, 2.0],
            rho_grid: vec![0.0],
            me_fractions: vec![0.5],
            odds_profile: geometric(0.25, 50.0, 12),
            missingness: vec![Missingness::Uniform, Missingness::VarProportional, Missingness::VarInverse],
            beta_star_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            ..Self::bias()
        }
    }

    pub fn for_kind(kind: DesignKind) -> Self {
        match kind {
            DesignKind::Bias => Self::bias(),
            DesignKind::Efficiency => Self::efficiency(),
            DesignKind::Varratio => Self::varratio(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let d: Self = toml::from_str(text).map_err(|e| Error::BadDesign(e.to_string()))?;
        d.check()?;
        Ok(d)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("design serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn loadings(&self) -> Vec<f64> {
        if self.loadings.is_empty() {
            vec![1.0; self.p]
        } else {
            self.loadings.clone()
        }
    }

    pub fn intercepts(&self) -> Vec<f64> {
        if self.intercepts.is_empty() {
            vec![0.0; self.p]
        } else {
            self.intercepts.clone()
        }
    }

    /// β in outcome units for a standardized effect.
    pub fn beta_raw(&self, beta_std: f64) -> f64 {
        beta_std * self.noise_total.sqrt() / self.var_u.sqrt()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadDesign(m));
        if self.n == 0 || self.reps == 0 || self.p == 0 || self.occasions == 0 {
            return bad("n, reps, p and occasions must be positive".into());
        }
        let lam = self.loadings();
        let nu = self.intercepts();
        if lam.len() != self.p || nu.len() != self.p {
            return bad(format!("loadings and intercepts need {} entries", self.p));
        }
        if !self.odds_profile.is_empty()
            && (self.odds_profile.len() != self.p || self.odds_profile.iter().any(|m| !(*m > 0.0 && m.is_finite())))
        {
            return bad(format!("odds_profile needs {} positive entries", self.p));
        }
        if lam[0] != 1.0 || nu[0] != 0.0 {
            return bad("the first surrogate must have loading 1 and intercept 0".into());
        }
        if !(self.var_u > 0.0 && self.noise_total > 0.0) {
            return bad("variances must be positive".into());
        }
        if self.me_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return bad("measurement-error fractions must lie in [0, 1)".into());
        }
        if self.beta_std_grid.is_empty() || self.rho_grid.is_empty() || self.me_fractions.is_empty() {
            return bad("grids must be non-empty".into());
        }
        if self.missingness.is_empty() {
            return bad("at least one missingness scenario is required".into());
        }
        if matches!(self.true_cov, CovStructure::Har1 | CovStructure::Csh | CovStructure::Diagonal)
            && self.variance_profile.len() != self.occasions
        {
            return bad(format!("variance_profile needs {} entries", self.occasions));
        }
        if matches!(self.true_cov, CovStructure::Unstructured | CovStructure::DiagAr1Blocks { .. }) {
            return bad(format!("{} is not supported as a generating structure", self.true_cov.name()));
        }
        if matches!(self.fit_cov, CovStructure::DiagAr1Blocks { .. }) {
            return bad("diagonal+ar1 cannot be fitted to outcomes".into());
        }
        for &rho in &self.rho_grid {
            if rho.abs() >= 1.0 {
                return bad(format!("rho {rho} outside (-1, 1)"));
            }
            self.true_theta2(rho)?;
        }
        if self.p < 12 && self.kind == DesignKind::Varratio {
            // not an error, but patterns are few; nothing to check
        }
        Ok(())
    }

    /// Ω_ε parameters of the generating model at correlation `rho`.
    pub fn true_theta2(&self, rho: f64) -> Result<Vec<f64>> {
        let n = self.occasions;
        let t = self.noise_total;
        let profile = || -> Vec<f64> {
            let m = self.variance_profile.iter().sum::<f64>() / n as f64;
            self.variance_profile.iter().map(|v| v * t / m).collect()
        };
        let theta = match self.true_cov {
            CovStructure::Independence => vec![t],
            CovStructure::Diagonal => profile(),
            CovStructure::Cs => vec![(1.0 - self.within_share) * t, self.within_share * t],
            CovStructure::Ar1 => vec![t, rho],
            CovStructure::Har1 | CovStructure::Csh => {
                let mut v: Vec<f64> = profile().into_iter().map(f64::sqrt).collect();
                v.push(rho);
                v
            }
            _ => return Err(Error::BadDesign("unsupported generating structure".into())),
        };
        self.true_cov
            .check(&theta, n)
            .map_err(|e| Error::BadDesign(format!("generating covariance: {e}")))?;
        Ok(theta)
    }

    /// Model fitted to generated data.
    pub fn fit_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::single_latent(self.p, self.kappa.len(), self.occasions, self.fit_cov.clone());
        spec.w_names = (1..=self.n_w).map(|c| format!("w{c}")).collect();
        spec.k = vec![vec![Entry::ZERO; self.n_w]; self.p];
        spec.gamma2 = vec![vec![Entry::free(); self.n_w]];
        spec
    }
}

/// One cell of a design grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub beta_std: f64,
    pub rho: f64,
    pub me_fraction: f64,
    pub missingness: Missingness,
}

impl SimDesign {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &m in &self.missingness {
            for &f in &self.me_fractions {
                for &rho in &self.rho_grid {
                    for &b in &self.beta_std_grid {
                        out.push(Cell {
                            index: out.len(),
                            beta_std: b,
                            rho,
                            me_fraction: f,
                            missingness: m,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Fully specified generating model for one cell.
#[derive(Debug, Clone)]
pub struct Generator {
    pub design: SimDesign,
    pub cell: Cell,
    pub beta: f64,
    pub delta_var: Vec<f64>,
    pub omega_eps: DMatrix<f64>,
    pub true_theta2: Vec<f64>,
    patterns: Vec<Vec<bool>>,
    weights: Option<WeightedIndex<f64>>,
    pub pattern_probs: Vec<f64>,
    pub pattern_psi_tilde: Vec<f64>,
    eps_chol: Option<DMatrix<f64>>,
}

impl Generator {
    pub fn new(design: &SimDesign, cell: &Cell) -> Result<Self> {
        design.check()?;
        let lam = design.loadings();
        let f = cell.me_fraction;
        let delta_var: Vec<f64> = lam
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let m = design.odds_profile.get(j).copied().unwrap_or(1.0);
                m * f / (1.0 - f) * l * l * design.var_u
            })
            .collect();
        let true_theta2 = design.true_theta2(cell.rho)?;
        let omega_eps = design.true_cov.build(&true_theta2, design.occasions)?;
        let eps_chol = omega_eps.clone().cholesky().map(|c| c.l());
        if eps_chol.is_none() {
            return Err(Error::BadDesign("generating outcome covariance is not positive definite".into()));
        }

        let p = design.p;
        let (patterns, psi): (Vec<Vec<bool>>, Vec<f64>) = if cell.missingness == Missingness::Complete {
            (vec![vec![true; p]], vec![Self::psi_tilde_of(&lam, &delta_var, design.var_u, &vec![true; p])])
        } else {
            if p > 20 {
                return Err(Error::BadDesign("pattern enumeration supports at most 20 surrogates".into()));
            }
            (1u32..(1 << p))
                .map(|bits| {
                    let m: Vec<bool> = (0..p).map(|j| bits & (1 << j) != 0).collect();
                    let v = Self::psi_tilde_of(&lam, &delta_var, design.var_u, &m);
                    (m, v)
                })
                .unzip()
        };
        let raw: Vec<f64> = match cell.missingness {
            Missingness::Complete | Missingness::Uniform => vec![1.0; patterns.len()],
            Missingness::VarProportional => psi.clone(),
            Missingness::VarInverse => psi.iter().map(|v| 1.0 / v.max(1e-300)).collect(),
        };
        if raw.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::BadDesign(
                "pattern weights are degenerate (zero measurement error with var-based missingness?)".into(),
            ));
        }
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let weights = if patterns.len() > 1 {
            Some(WeightedIndex::new(&probs).map_err(|e| Error::BadDesign(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            design: design.clone(),
            cell: cell.clone(),
            beta: design.beta_raw(cell.beta_std),
            delta_var,
            omega_eps,
            true_theta2,
            patterns,
            weights,
            pattern_probs: probs,
            pattern_psi_tilde: psi,
            eps_chol,
        })
    }

    /// var(U | X_obs) for a single-latent model with independent errors.
    fn psi_tilde_of(lam: &[f64], dvar: &[f64], var_u: f64, mask: &[bool]) -> f64 {
        let mut info = 1.0 / var_u;
        for j in 0..lam.len() {
            if mask[j] {
                if dvar[j] == 0.0 {
                    return 0.0;
                }
                info += lam[j] * lam[j] / dvar[j];
            }
        }
        1.0 / info
    }

    pub fn patterns(&self) -> &[Vec<bool>] {
        &self.patterns
    }

    /// Generating parameters laid out for the fitted model; θ₂ is present
    /// only when the fitted structure matches the generating one.
    pub fn true_params(&self) -> (ParamVector, bool) {
        let d = &self.design;
        let spec = d.fit_spec();
        let layout = ParamLayout::new(&spec);
        let p = d.p;
        let m = ExposureParams {
            nu: DVector::from_vec(d.intercepts()),
            lambda: DMatrix::from_column_slice(p, 1, &d.loadings()),
            k: DMatrix::zeros(p, d.n_w),
            alpha: DVector::from_element(1, d.alpha),
            gamma1: DMatrix::zeros(1, 1),
            gamma2: DMatrix::from_element(1, d.n_w, d.gamma2),
            omega_delta: DMatrix::from_diagonal(&DVector::from_vec(self.delta_var.clone())),
            psi: DMatrix::from_element(1, 1, d.var_u),
            delta_zero: Vec::new(),
        };
        let theta3 = layout.theta3_from_matrices(&m);
        let mut theta1 = vec![d.beta0, self.beta];
        theta1.extend(&d.kappa);
        let same = d.fit_cov == d.true_cov;
        let theta2 = if same {
            self.true_theta2.clone()
        } else {
            d.fit_cov.start(d.occasions, d.noise_total)
        };
        (ParamVector { theta1, theta2, theta3 }, same)
    }

    /// Dataset for replicate `rep`; deterministic in (seed, cell, rep).
    pub fn generate(&self, rep: u64) -> Result<Dataset> {
        self.generate_n(rep, self.design.n)
    }

    pub fn generate_n(&self, rep: u64, n: usize) -> Result<Dataset> {
        let d = &self.design;
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        rng.set_stream(((self.cell.index as u64) << 32) | rep);
        let lam = d.loadings();
        let nu = d.intercepts();
        let q = d.kappa.len();
        let occ = d.occasions;
        let chol = self.eps_chol.as_ref().expect("checked at construction");
        let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
        let mut subjects = Vec::with_capacity(n);
        let mut pattern_draws = Vec::with_capacity(n);
        for i in 0..n {
            let w: Vec<f64> = (0..d.n_w).map(|_| normal()).collect();
            let u = d.alpha + d.gamma2 * w.iter().sum::<f64>() + d.var_u.sqrt() * normal();
            let x: Vec<f64> = (0..d.p)
                .map(|j| nu[j] + lam[j] * u + self.delta_var[j].sqrt() * normal())
                .collect();
            let z = DMatrix::from_fn(occ, q, |_, _| 0.0).map(|_| normal());
            let e = chol * DVector::from_fn(occ, |_, _| normal());
            let y: Vec<f64> = (0..occ)
                .map(|j| {
                    let mut v = d.beta0 + self.beta * u + e[j];
                    for c in 0..q {
                        v += d.kappa[c] * z[(j, c)];
                    }
                    v
                })
                .collect();
            subjects.push(SubjectData {
                id: format!("{}", i + 1),
                x,
                mask: vec![true; d.p],
                w,
                z,
                y,
                u_true: Some(vec![u]),
            });
            pattern_draws.push(normal());
        }
        // Patterns come from a second stream so the measurements above do not
        // depend on the missingness scenario.
        if let Some(wi) = &self.weights {
            let mut prng = ChaCha8Rng::seed_from_u64(d.seed ^ 0x9e37_79b9_7f4a_7c15);
            prng.set_stream(((self.cell.index as u64) << 32) | rep);
            for s in &mut subjects {
                let k = wi.sample(&mut prng);
                s.mask = self.patterns[k].clone();
            }
        }
        for s in &mut subjects {
            for j in 0..d.p {
                if !s.mask[j] {
                    s.x[j] = f64::NAN;
                }
            }
        }
        Dataset::new(subjects, d.p, d.n_w, q)
    }
}

/// Estimates from one replicate for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub cell: usize,
    pub rep: u64,
    pub method: String,
    pub beta_star: Option<f64>,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub error: Option<String>,
}

/// Aggregated results for one (cell, method).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub design: String,
    pub cell: usize,
    pub beta_std: f64,
    pub beta: f64,
    pub rho: f64,
    pub me_fraction: f64,
    pub missingness: String,
    pub fit_cov: String,
    pub method: String,
    pub beta_star: Option<f64>,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub valid: bool,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub bias_mcse: Option<f64>,
    pub rel_bias: Option<f64>,
    pub mse: Option<f64>,
    pub emp_var: Option<f64>,
    pub mean_se: Option<f64>,
    pub median_se: Option<f64>,
    pub se_ratio: Option<f64>,
    pub coverage: Option<f64>,
    /// Variance ratio against the reference method (EE1 or ML).
    pub var_ratio: Option<f64>,
    pub var_ratio_mcse: Option<f64>,
    /// Same ratio from expected information on one large sample.
    pub var_ratio_expected: Option<f64>,
}

/// Reproducibility record for a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub design: String,
    pub seed: u64,
    pub reps: usize,
    pub n: usize,
    pub design_hash: String,
    pub cells: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub design: SimDesign,
    pub rows: Vec<CellRow>,
    pub estimates: Vec<RepEstimate>,
    pub manifest: Manifest,
}

impl SimResult {
    pub fn row(&self, cell: usize, method: &str, beta_star: Option<f64>) -> Option<&CellRow> {
        self.rows
            .iter()
            .find(|r| r.cell == cell && r.method == method && r.beta_star == beta_star)
    }

    pub fn estimates_for(&self, cell: usize, method: &str, beta_star: Option<f64>) -> Vec<&RepEstimate> {
        self.estimates
            .iter()
            .filter(|e| e.cell == cell && e.method == method && e.beta_star == beta_star)
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn ee_estimate(
    layout: &ParamLayout,
    data: &Dataset,
    theta3: &[f64],
    scheme: &Scheme,
    with_se: bool,
) -> Result<(f64, Option<f64>)> {
    let fit = fit_outcome_ee(layout, data, theta3, scheme, &EeOptions::default())?;
    let beta = fit.theta1[1];
    if !with_se {
        return Ok((beta, None));
    }
    let theta = ParamVector {
        theta1: fit.theta1,
        theta2: fit.theta2,
        theta3: theta3.to_vec(),
    };
    let parts = SandwichParts::estimate(layout, &theta, data, scheme)?;
    let var = sandwich_var(&parts)?;
    Ok((beta, Some(var.cov[(1, 1)].max(0.0).sqrt())))
}

fn record(
    out: &mut Vec<RepEstimate>,
    cell: usize,
    rep: u64,
    method: &str,
    beta_star: Option<f64>,
    res: std::result::Result<(f64, Option<f64>), String>,
) {
    let (estimate, se, error) = match res {
        Ok((b, s)) => (Some(b), s, None),
        Err(e) => (None, None, Some(e)),
    };
    out.push(RepEstimate {
        cell,
        rep,
        method: method.to_string(),
        beta_star,
        estimate,
        se,
        error,
    });
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `k` geometrically spaced values from `lo` to `hi`.
pub fn geometric(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    (0..k).map(|j| lo * (hi / lo).powf(j as f64 / (k - 1) as f64)).collect()
}

/// Var(a)/Var(b) over paired replicates with a delta-method MC standard error.
pub fn paired_variance_ratio(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ua: Vec<f64> = a.iter().map(|x| (x - ma).powi(2)).collect();
    let ub: Vec<f64> = b.iter().map(|x| (x - mb).powi(2)).collect();
    let ratio = mean(&ua) / mean(&ub);
    let d: Vec<f64> = ua.iter().zip(&ub).map(|(x, y)| x - ratio * y).collect();
    let se = var(&d).sqrt() / n.sqrt() / mean(&ub);
    (ratio, se)
}

/// Difference of two variance ratios sharing a denominator,
/// `var(a)/var(c) − var(b)/var(c)`, with its delta-method standard error.
/// All three slices are paired by replication.
pub fn variance_ratio_difference(a: &[f64], b: &[f64], c: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let sq = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m).powi(2)).collect::<Vec<f64>>()
    };
    let (ua, ub, uc) = (sq(a), sq(b), sq(c));
    let (va, vb, vc) = (mean(&ua), mean(&ub), mean(&uc));
    let diff = (va - vb) / vc;
    let infl: Vec<f64> = (0..ua.len()).map(|i| (ua[i] - ub[i]) / vc - diff / vc * uc[i]).collect();
    (diff, var(&infl).sqrt() / n.sqrt())
}

fn summarize(design: &SimDesign, cell: &Cell, method: &str, beta_star: Option<f64>, ests: &[&RepEstimate]) -> CellRow {
    let beta = design.beta_raw(cell.beta_std);
    let ok: Vec<f64> = ests.iter().filter_map(|e| e.estimate).collect();
    let failed = ests.len() - ok.len();
    let valid = !ok.is_empty() && (failed as f64) <= 0.05 * ests.len() as f64;
    let have = ok.len() >= 2;
    let ses: Vec<f64> = ests.iter().filter_map(|e| e.se).collect();
    let covered: Vec<bool> = ests
        .iter()
        .filter_map(|e| match (e.estimate, e.se) {
            (Some(b), Some(s)) => Some((b - beta).abs() <= Z975 * s),
            _ => None,
        })
        .collect();
    let m = have.then(|| mean(&ok));
    let v = have.then(|| var(&ok));
    CellRow {
        design: design.kind.name().into(),
        cell: cell.index,
        beta_std: cell.beta_std,
        beta,
        rho: cell.rho,
        me_fraction: cell.me_fraction,
        missingness: cell.missingness.name().into(),
        fit_cov: design.fit_cov.name().into(),
        method: method.into(),
        beta_star,
        reps_ok: ok.len(),
        reps_failed: failed,
        valid,
        mean_estimate: m,
        bias: m.map(|m| m - beta),
        bias_mcse: v.map(|v| (v / ok.len() as f64).sqrt()),
        rel_bias: m.filter(|_| beta != 0.0).map(|m| (m - beta) / beta),
        mse: have.then(|| ok.iter().map(|b| (b - beta).powi(2)).sum::<f64>() / ok.len() as f64),
        emp_var: v,
        mean_se: (!ses.is_empty()).then(|| mean(&ses)),
        median_se: (!ses.is_empty()).then(|| median(&ses)),
        se_ratio: match (ses.is_empty(), v) {
            (false, Some(v)) if v > 0.0 => Some(median(&ses) / v.sqrt()),
            _ => None,
        },
        coverage: (!covered.is_empty()).then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64),
        var_ratio: None,
        var_ratio_mcse: None,
        var_ratio_expected: None,
    }
}

/// Values paired by replicate where both methods succeeded.
fn paired(a: &[&RepEstimate], b: &[&RepEstimate]) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for ea in a {
        if let Some(eb) = b.iter().find(|e| e.rep == ea.rep) {
            if let (Some(u), Some(v)) = (ea.estimate, eb.estimate) {
                x.push(u);
                y.push(v);
            }
        }
    }
    (x, y)
}

fn manifest(design: &SimDesign, cells: usize, failures: usize) -> Manifest {
    Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        design: design.kind.name().into(),
        seed: design.seed,
        reps: design.reps,
        n: design.n,
        design_hash: design.hash(),
        cells,
        failures,
    }
}

fn mle_options(with_se: bool) -> MleOptions {
    MleOptions {
        information: with_se,
        ..MleOptions::default()
    }
}

/// Fit θ₃ once per replicate; shared by every outcome method.
fn exposure_theta3(spec: &ModelSpec, data: &Dataset) -> Result<Vec<f64>> {
    Ok(fit_exposure_mle(spec, data, None, &mle_options(false))?.theta3)
}

fn mle_estimate(spec: &ModelSpec, data: &Dataset, theta3: &[f64], with_se: bool) -> Result<(f64, Option<f64>)> {
    let layout = ParamLayout::new(spec);
    let rc = fit_outcome_ee(&layout, data, theta3, &Scheme::Rc, &EeOptions::default())?;
    let init = ParamVector {
        theta1: rc.theta1,
        theta2: rc.theta2,
        theta3: theta3.to_vec(),
    };
    let fit = fit_joint_mle(spec, data, Some(&init), &mle_options(with_se))?;
    let se = fit.cov.get(1).map(|row| row[1].max(0.0).sqrt());
    Ok((fit.theta.theta1[1], se))
}

/// Misspecified-covariance bias study: ML, EE1 and RC per (β, ρ) cell.
///
/// `mle_reps` limits how many replicates also get the (slower) joint ML fit.
pub fn run_bias_experiment(design: &SimDesign, mle_reps: Option<usize>) -> Result<SimResult> {
    design.check()?;
    let spec = design.fit_spec();
    let layout = ParamLayout::new(&spec);
    let cells = design.cells();
    let mut estimates = Vec::new();
    let mle_reps = mle_reps.unwrap_or(design.reps);
    for cell in &cells {
        let gen = Generator::new(design, cell)?;
        for rep in 0..design.reps as u64 {
            let data = gen.generate(rep)?;
            match exposure_theta3(&spec, &data) {
                Ok(t3) => {
                    record(&mut estimates, cell.index, rep, "ee1", None, ee_estimate(&layout, &data, &t3, &Scheme::Ee1, true).map_err(|e| e.to_string()));
                    record(&mut estimates, cell.index, rep, "rc", None, ee_estimate(&layout, &data, &t3, &Scheme::Rc, true).map_err(|e| e.to_string()));
                    if (rep as usize) < mle_reps {
                        record(&mut estimates, cell.index, rep, "mle", None, mle_estimate(&spec, &data, &t3, design.mle_se).map_err(|e| e.to_string()));
                    }
                }
                Err(e) => {
                    for m in ["ee1", "rc", "mle"] {
                        if m != "mle" || (rep as usize) < mle_reps {
                            record(&mut estimates, cell.index, rep, m, None, Err(e.to_string()));
                        }
                    }
                }
            }
        }
    }
    let mut rows = Vec::new();
    for cell in &cells {
        for m in ["mle", "ee1", "rc"] {
            let e: Vec<&RepEstimate> = estimates.iter().filter(|e| e.cell == cell.index && e.method == m).collect();
            rows.push(summarize(design, cell, m, None, &e));
        }
    }
    let failures = estimates.iter().filter(|e| e.error.is_some()).count();
    Ok(SimResult {
        manifest: manifest(design, cells.len(), failures),
        design: design.clone(),
        rows,
        estimates,
    })
}

/// Asymptotic Var(β̂_EE1)/Var(β̂_ML) from Monte Carlo expected information.
///
/// Both variances are built from Jacobians averaged over `n` simulated
/// subjects at the true parameters. Under a correctly specified model the
/// information identity gives A₁₁ = −B₁₁ and A₃₃ = −B₃₃, so
/// var(θ̂₁) = I₁₁⁻¹ + I₁₁⁻¹B₁₃I₃₃⁻¹B₁₃ᵀI₁₁⁻¹ with I = −B, while the ML
/// variance is the inverse of the averaged joint observed information.
/// Avoiding score outer products keeps the Monte Carlo noise small.
pub fn expected_efficiency_ratio(gen: &Generator, n: usize) -> Result<f64> {
    let spec = gen.design.fit_spec();
    let layout = ParamLayout::new(&spec);
    let (theta, same) = gen.true_params();
    if !same {
        return Err(Error::BadDesign("efficiency requires the fitted structure to match the truth".into()));
    }
    let data = gen.generate_n(u64::MAX >> 32, n)?;
    let parts = SandwichParts::estimate(&layout, &theta, &data, &Scheme::Ee1)?;
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * -0.5;
    let i11 = inverse_checked(&sym(parts.b11()), "outcome information")?;
    let i33 = inverse_checked(&sym(parts.b33()), "exposure information")?;
    let b13 = parts.b13();
    let ee1 = &i11 + &i11 * &b13 * i33 * b13.transpose() * &i11;
    let info = observed_information(&layout, &theta, &data)? / n as f64;
    let ml = inverse_checked(&info, "expected information")?;
    Ok(ee1[(1, 1)] / ml[(1, 1)])
}

/// Correct-model efficiency study: EE1 versus joint ML.
pub fn run_efficiency_experiment(design: &SimDesign) -> Result<SimResult> {
    design.check()?;
    let spec = design.fit_spec();
    let layout = ParamLayout::new(&spec);
    let cells = design.cells();
    let mut estimates = Vec::new();
    let mut expected = Vec::new();
    for cell in &cells {
        let gen = Generator::new(design, cell)?;
        for rep in 0..design.reps as u64 {
            let data = gen.generate(rep)?;
            match exposure_theta3(&spec, &data) {
                Ok(t3) => {
                    record(&mut estimates, cell.index, rep, "ee1", None, ee_estimate(&layout, &data, &t3, &Scheme::Ee1, false).map_err(|e| e.to_string()));
                    record(&mut estimates, cell.index, rep, "mle", None, mle_estimate(&spec, &data, &t3, false).map_err(|e| e.to_string()));
                }
                Err(e) => {
                    record(&mut estimates, cell.index, rep, "ee1", None, Err(e.to_string()));
                    record(&mut estimates, cell.index, rep, "mle", None, Err(e.to_string()));
                }
            }
        }
        expected.push(if design.expected_n > 0 {
            expected_efficiency_ratio(&gen, design.expected_n).ok()
        } else {
            None
        });
    }
    let mut rows = Vec::new();
    for (cell, exp) in cells.iter().zip(expected) {
        let mle: Vec<&RepEstimate> = estimates.iter().filter(|e| e.cell == cell.index && e.method == "mle").collect();
        let ee1: Vec<&RepEstimate> = estimates.iter().filter(|e| e.cell == cell.index && e.method == "ee1").collect();
        rows.push(summarize(design, cell, "mle", None, &mle));
        let mut row = summarize(design, cell, "ee1", None, &ee1);
        let (a, b) = paired(&ee1, &mle);
        if a.len() >= 2 {
            let (r, se) = paired_variance_ratio(&a, &b);
            row.var_ratio = Some(r);
            row.var_ratio_mcse = Some(se);
        }
        row.var_ratio_expected = exp;
        rows.push(row);
    }
    let failures = estimates.iter().filter(|e| e.error.is_some()).count();
    Ok(SimResult {
        manifest: manifest(design, cells.len(), failures),
        design: design.clone(),
        rows,
        estimates,
    })
}

/// β* values used in a cell: the grid plus 0 and β_true, sorted and deduplicated.
pub fn beta_star_values(design: &SimDesign, beta: f64) -> Vec<f64> {
    let mut v = design.beta_star_grid.clone();
    v.push(0.0);
    v.push(beta);
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    v
}

/// EE2(β*) and RC variance relative to EE1 across missingness scenarios.
pub fn run_varratio_experiment(design: &SimDesign) -> Result<SimResult> {
    design.check()?;
    let spec = design.fit_spec();
    let layout = ParamLayout::new(&spec);
    let cells = design.cells();
    let mut estimates = Vec::new();
    for cell in &cells {
        let gen = Generator::new(design, cell)?;
        let stars = beta_star_values(design, gen.beta);
        for rep in 0..design.reps as u64 {
            let data = gen.generate(rep)?;
            match exposure_theta3(&spec, &data) {
                Ok(t3) => {
                    record(&mut estimates, cell.index, rep, "ee1", None, ee_estimate(&layout, &data, &t3, &Scheme::Ee1, false).map_err(|e| e.to_string()));
                    record(&mut estimates, cell.index, rep, "rc", None, ee_estimate(&layout, &data, &t3, &Scheme::Rc, false).map_err(|e| e.to_string()));
                    for &b in &stars {
                        let s = Scheme::Ee2 { beta_star: vec![b] };
                        record(&mut estimates, cell.index, rep, "ee2", Some(b), ee_estimate(&layout, &data, &t3, &s, false).map_err(|e| e.to_string()));
                    }
                }
                Err(e) => {
                    record(&mut estimates, cell.index, rep, "ee1", None, Err(e.to_string()));
                    record(&mut estimates, cell.index, rep, "rc", None, Err(e.to_string()));
                    for &b in &stars {
                        record(&mut estimates, cell.index, rep, "ee2", Some(b), Err(e.to_string()));
                    }
                }
            }
        }
    }
    let mut rows = Vec::new();
    for cell in &cells {
        let beta = design.beta_raw(cell.beta_std);
        let ee1: Vec<&RepEstimate> = estimates.iter().filter(|e| e.cell == cell.index && e.method == "ee1").collect();
        rows.push(summarize(design, cell, "ee1", None, &ee1));
        let mut push = |method: &str, star: Option<f64>| {
            let es: Vec<&RepEstimate> = estimates
                .iter()
                .filter(|e| e.cell == cell.index && e.method == method && e.beta_star == star)
                .collect();
            let mut row = summarize(design, cell, method, star, &es);
            let (a, b) = paired(&es, &ee1);
            if a.len() >= 2 {
                let (r, se) = paired_variance_ratio(&a, &b);
                row.var_ratio = Some(r);
                row.var_ratio_mcse = Some(se);
            }
            rows.push(row);
        };
        push("rc", None);
        for b in beta_star_values(design, beta) {
            push("ee2", Some(b));
        }
    }
    let failures = estimates.iter().filter(|e| e.error.is_some()).count();
    Ok(SimResult {
        manifest: manifest(design, cells.len(), failures),
        design: design.clone(),
        rows,
        estimates,
    })
}

pub fn run(design: &SimDesign) -> Result<SimResult> {
    match design.kind {
        DesignKind::Bias => run_bias_experiment(design, None),
        DesignKind::Efficiency => run_efficiency_experiment(design),
        DesignKind::Varratio => run_varratio_experiment(design),
    }
}

/// Sample covariance of Ũ and U − Ũ with its MC standard error (first latent).
pub fn berkson_check(layout: &ParamLayout, theta3: &[f64], data: &Dataset) -> Result<(f64, f64)> {
    let em = ExposureMoments::from_theta3(layout, theta3)?;
    let mut a = Vec::with_capacity(data.len());
    let mut b = Vec::with_capacity(data.len());
    for s in data.subjects() {
        let u = s
            .u_true
            .as_ref()
            .ok_or_else(|| Error::BadDesign("dataset carries no true latent values".into()))?;
        let f = em.pattern(&s.observed())?;
        let ut = f.u_tilde(&em, &s.x, &s.w);
        a.push(ut[0]);
        b.push(u[0] - ut[0]);
    }
    let (ma, mb) = (mean(&a), mean(&b));
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let c = mean(&prod);
    let se = (var(&prod) / prod.len() as f64).sqrt();
    Ok((c, se))
}

/// Subject-level exposure scores at the truth (exposed for the LLN checks).
pub fn exposure_scores_at_truth(gen: &Generator, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let spec = gen.design.fit_spec();
    let layout = ParamLayout::new(&spec);
    let (theta, _) = gen.true_params();
    subject_scores_theta3(&layout, &theta.theta3, data)
}

/// Check that the generating outcome covariance factorizes (used by tests).
pub fn outcome_cov_is_pd(gen: &Generator) -> bool {
    SpdFactor::new(&gen.omega_eps, "generating covariance").is_ok()
}
