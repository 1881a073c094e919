//! Estimating equations for the outcome parameters (θ₁, θ₂) given θ̂₃.
//!
//! Per subject, with r = Y − μ_{y|x} and working covariance R:
//!
//! * S_{β₀} = 1ᵀR⁻¹r,  S_{βₖ} = Ũₖ·1ᵀR⁻¹r,  S_κ = ZᵀR⁻¹r
//! * S_{θ₂ₖ} = ½ tr{R⁻¹ ∂Ω_{y|x}/∂θ₂ₖ R⁻¹ (rrᵀ − Ω_{y|x})}
//!
//! R = Ω_ε + (bᵀΨ̃b)11ᵀ with b the current β (EE1), a fixed guess β* (EE2)
//! or zero (regression calibration).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::moments::{beta_quad, leading, pattern_factors, ExposureMoments};
use crate::params::{OutcomeCoefs, ParamLayout};

/// Working-covariance scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheme {
    Ee1,
    Ee2 { beta_star: Vec<f64> },
    Rc,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Ee1 => "ee1",
            Scheme::Ee2 { .. } => "ee2",
            Scheme::Rc => "rc",
        }
    }

    /// β used inside the working covariance.
    pub fn weight_beta(&self, current: &[f64]) -> Vec<f64> {
        match self {
            Scheme::Ee1 => current.to_vec(),
            Scheme::Ee2 { beta_star } => beta_star.clone(),
            Scheme::Rc => vec![0.0; current.len()],
        }
    }

    pub fn check(&self, n_beta: usize) -> Result<()> {
        if let Scheme::Ee2 { beta_star } = self {
            if beta_star.len() != n_beta {
                return Err(Error::Dimension(format!(
                    "beta_star has {} entries, model has {n_beta} exposure effects",
                    beta_star.len()
                )));
            }
        }
        Ok(())
    }
}

/// R_{y|x} for one subject.
pub fn working_cov(
    scheme: &Scheme,
    omega_eps: &DMatrix<f64>,
    beta_current: &[f64],
    psi_tilde: &DMatrix<f64>,
    latents: &[usize],
    n: usize,
) -> DMatrix<f64> {
    let b = scheme.weight_beta(beta_current);
    let c = beta_quad(&b, psi_tilde, latents);
    leading(omega_eps, n).map(|v| v + c)
}

/// EB scores at a fixed θ₃: Ũ per subject and Ψ̃ per pattern.
#[derive(Debug, Clone)]
pub struct EbContext {
    pub u_tilde: Vec<DVector<f64>>,
    pub psi_tilde: Vec<DMatrix<f64>>,
}

impl EbContext {
    pub fn new(layout: &ParamLayout, theta3: &[f64], data: &Dataset) -> Result<Self> {
        let em = ExposureMoments::from_theta3(layout, theta3)?;
        let factors = pattern_factors(&em, data.patterns())?;
        let u_tilde = data
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| factors[data.pattern_of(i)].u_tilde(&em, &s.x, &s.w))
            .collect();
        Ok(Self {
            u_tilde,
            psi_tilde: factors.into_iter().map(|f| f.psi_tilde).collect(),
        })
    }
}

/// Design row block D = [1, Ũ_sel, Z] for a subject.
fn design(layout: &ParamLayout, u: &DVector<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let nb = layout.n_beta();
    let lat = layout.outcome_latents();
    DMatrix::from_fn(n, layout.n1, |j, c| {
        if c == 0 {
            1.0
        } else if c <= nb {
            u[lat[c - 1]]
        } else {
            z[(j, c - 1 - nb)]
        }
    })
}

/// Weights shared by all subjects with the same pattern and occasion count.
struct Weights {
    r: SpdFactor<f64>,
    r_inv: DMatrix<f64>,
    omega_yx: DMatrix<f64>,
}

struct WeightCache<'a> {
    layout: &'a ParamLayout,
    ctx: &'a EbContext,
    omega_eps: DMatrix<f64>,
    beta: Vec<f64>,
    b_w: Vec<f64>,
    map: HashMap<(usize, usize), Weights>,
}

impl<'a> WeightCache<'a> {
    fn new(layout: &'a ParamLayout, ctx: &'a EbContext, theta2: &[f64], beta: &[f64], b_w: &[f64]) -> Result<Self> {
        Ok(Self {
            layout,
            ctx,
            omega_eps: layout.outcome_cov().build(theta2, layout.occasions())?,
            beta: beta.to_vec(),
            b_w: b_w.to_vec(),
            map: HashMap::new(),
        })
    }

    fn get(&mut self, pattern: usize, n: usize) -> Result<&Weights> {
        if !self.map.contains_key(&(pattern, n)) {
            if n > self.omega_eps.nrows() {
                return Err(Error::Dimension(format!(
                    "subject has {n} occasions, model allows {}",
                    self.omega_eps.nrows()
                )));
            }
            let lat = self.layout.outcome_latents();
            let psi = &self.ctx.psi_tilde[pattern];
            let base = leading(&self.omega_eps, n);
            let cw = beta_quad(&self.b_w, psi, lat);
            let cy = beta_quad(&self.beta, psi, lat);
            let rm = base.map(|v| v + cw);
            let r = SpdFactor::new(&rm, "working covariance")?;
            let r_inv = r.inverse();
            self.map.insert(
                (pattern, n),
                Weights {
                    r,
                    r_inv,
                    omega_yx: base.map(|v| v + cy),
                },
            );
        }
        Ok(&self.map[&(pattern, n)])
    }
}

/// Per-subject estimating functions for (θ₁, θ₂) at fixed EB scores.
///
/// `b_w` is the β placed in the working covariance.
pub fn subject_equations(
    layout: &ParamLayout,
    ctx: &EbContext,
    data: &Dataset,
    theta1: &[f64],
    theta2: &[f64],
    b_w: &[f64],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let coefs = OutcomeCoefs::from_theta1(theta1, layout.n_beta());
    let mut cache = WeightCache::new(layout, ctx, theta2, &coefs.beta, b_w)?;
    let derivs = layout.outcome_cov().derivatives(theta2, layout.occasions());
    let mut out = Vec::with_capacity(data.len());
    for (i, s) in data.subjects().iter().enumerate() {
        let n = s.n_occ();
        if n == 0 {
            out.push((vec![0.0; layout.n1], vec![0.0; layout.n2]));
            continue;
        }
        let w = cache.get(data.pattern_of(i), n)?;
        let d = design(layout, &ctx.u_tilde[i], &s.z);
        let resid = DVector::from_column_slice(&s.y) - &d * DVector::from_column_slice(theta1);
        let rr = DVector::from_vec(w.r.solve(resid.as_slice()));
        let s1 = d.transpose() * &rr;
        // R⁻¹(rrᵀ − Ω)R⁻¹ = R⁻¹r (R⁻¹r)ᵀ − R⁻¹ΩR⁻¹
        let mid = &rr * rr.transpose() - &w.r_inv * &w.omega_yx * &w.r_inv;
        let s2 = derivs
            .iter()
            .map(|g| 0.5 * leading(g, n).component_mul(&mid).sum())
            .collect();
        out.push((s1.as_slice().to_vec(), s2));
    }
    Ok(out)
}

fn sum_equations(eqs: &[(Vec<f64>, Vec<f64>)], n1: usize, n2: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; n1];
    let mut b = vec![0.0; n2];
    for (s1, s2) in eqs {
        for (x, v) in a.iter_mut().zip(s1) {
            *x += v;
        }
        for (x, v) in b.iter_mut().zip(s2) {
            *x += v;
        }
    }
    (a, b)
}

/// Generalized least squares for θ₁ with the working covariance held fixed.
pub fn solve_theta1(
    layout: &ParamLayout,
    ctx: &EbContext,
    data: &Dataset,
    theta2: &[f64],
    b_w: &[f64],
) -> Result<Vec<f64>> {
    let k = layout.n1;
    let mut cache = WeightCache::new(layout, ctx, theta2, &vec![0.0; layout.n_beta()], b_w)?;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for (i, s) in data.subjects().iter().enumerate() {
        let n = s.n_occ();
        if n == 0 {
            continue;
        }
        let w = cache.get(data.pattern_of(i), n)?;
        let d = design(layout, &ctx.u_tilde[i], &s.z);
        let rd = w.r_inv.clone() * &d;
        xtx += d.transpose() * &rd;
        xty += rd.transpose() * DVector::from_column_slice(&s.y);
    }
    rank_check(&xtx, &layout.names()[..k])?;
    let sol = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::Singular("GLS normal equations".into()))?;
    Ok(sol.as_slice().to_vec())
}

fn rank_check(xtx: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let k = xtx.nrows();
    if k == 0 {
        return Ok(());
    }
    // scale to unit diagonal so the check is unit-free
    let d: Vec<f64> = (0..k).map(|i| xtx[(i, i)].max(0.0).sqrt()).collect();
    if let Some(i) = d.iter().position(|&v| v == 0.0) {
        return Err(Error::RankDeficient {
            columns: vec![names[i].clone()],
        });
    }
    let scaled = DMatrix::from_fn(k, k, |i, j| xtx[(i, j)] / (d[i] * d[j]));
    let eig = scaled.symmetric_eigen();
    let (imin, &lo) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let hi = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if lo < 1e-12 * hi {
        let v = eig.eigenvectors.column(imin);
        let columns = (0..k).filter(|&i| v[i].abs() > 0.1).map(|i| names[i].clone()).collect();
        return Err(Error::RankDeficient { columns });
    }
    Ok(())
}

/// Fisher-scoring solution of the θ₂ equations, with step halving to stay admissible.
pub fn solve_theta2(
    layout: &ParamLayout,
    ctx: &EbContext,
    data: &Dataset,
    theta1: &[f64],
    start: &[f64],
    scheme: &Scheme,
) -> Result<Vec<f64>> {
    let nobs = data.len().max(1) as f64;
    let cov = layout.outcome_cov();
    let occ = layout.occasions();
    let beta = &theta1[1..1 + layout.n_beta()];
    let b_w = scheme.weight_beta(beta);
    let mut theta2 = start.to_vec();
    for iter in 0..200 {
        let eqs = subject_equations(layout, ctx, data, theta1, &theta2, &b_w)?;
        let (_, s) = sum_equations(&eqs, layout.n1, layout.n2);
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt() / nobs;
        let info = theta2_information(layout, ctx, data, &theta2, beta, &b_w)?;
        let step = info
            .clone()
            .lu()
            .solve(&DVector::from_vec(s))
            .ok_or_else(|| Error::Singular("outcome covariance information".into()))?;
        // a small residual can still leave θ₂ off by norm / curvature; one full step polishes it
        if norm < 1e-10 {
            let polished: Vec<f64> = theta2.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let ok = cov.check(&polished, occ).is_ok()
                && cov.build(&polished, occ).and_then(|m| SpdFactor::new(&m, "outcome covariance")).is_ok();
            return Ok(if ok { polished } else { theta2 });
        }
        let mut t = 1.0;
        let mut halvings = 0;
        loop {
            let trial: Vec<f64> = theta2.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            if cov.check(&trial, occ).is_ok() && cov.build(&trial, occ).and_then(|m| SpdFactor::new(&m, "outcome covariance")).is_ok() {
                let tiny = step.iter().map(|d| (t * d).abs()).fold(0.0, f64::max) < 1e-12;
                if tiny && halvings > 0 {
                    // the root lies outside the admissible region
                    return Err(Error::NotConverged {
                        what: "outcome covariance equations (stalled at the admissible boundary)".into(),
                        iterations: iter + 1,
                        norm,
                        best: theta2,
                    });
                }
                theta2 = trial;
                if tiny {
                    return Ok(theta2);
                }
                break;
            }
            halvings += 1;
            if halvings > 50 {
                return Err(Error::BadParam(
                    "outcome covariance update left the admissible region".into(),
                ));
            }
            t *= 0.5;
        }
    }
    let eqs = subject_equations(layout, ctx, data, theta1, &theta2, &b_w)?;
    let (_, s) = sum_equations(&eqs, layout.n1, layout.n2);
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt() / nobs;
    if norm < 1e-8 {
        return Ok(theta2);
    }
    Err(Error::NotConverged {
        what: "outcome covariance equations".into(),
        iterations: 200,
        norm,
        best: theta2,
    })
}

/// ½Σ tr(R⁻¹ ∂Ωₖ R⁻¹ ∂Ωⱼ).
fn theta2_information(
    layout: &ParamLayout,
    ctx: &EbContext,
    data: &Dataset,
    theta2: &[f64],
    beta: &[f64],
    b_w: &[f64],
) -> Result<DMatrix<f64>> {
    let m = layout.n2;
    let derivs = layout.outcome_cov().derivatives(theta2, layout.occasions());
    let mut cache = WeightCache::new(layout, ctx, theta2, beta, b_w)?;
    let mut per_key: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, s) in data.subjects().iter().enumerate() {
        if s.n_occ() > 0 {
            *per_key.entry((data.pattern_of(i), s.n_occ())).or_default() += 1;
        }
    }
    let mut keys: Vec<_> = per_key.into_iter().collect();
    keys.sort_unstable();
    let mut info = DMatrix::zeros(m, m);
    for ((pat, n), count) in keys {
        let w = cache.get(pat, n)?;
        let a: Vec<DMatrix<f64>> = derivs.iter().map(|g| &w.r_inv * leading(g, n)).collect();
        for k in 0..m {
            for j in 0..=k {
                let v = 0.5 * count as f64 * (&a[k] * &a[j]).trace();
                info[(k, j)] += v;
                if j != k {
                    info[(j, k)] += v;
                }
            }
        }
    }
    Ok(info)
}

/// Working weight used for one missingness pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternWeight {
    /// Observed surrogates (1-based).
    pub observed: Vec<usize>,
    pub subjects: usize,
    /// Diagonal of Ψ̃ for this pattern.
    pub psi_tilde_diag: Vec<f64>,
    /// bᵀΨ̃b added to every entry of R.
    pub inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub scheme: Scheme,
    /// ‖ΣSᵢ‖/N of the stacked (θ₁, θ₂) equations at the solution.
    pub ee_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub weights: Vec<PatternWeight>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EeOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub damping: f64,
}

impl Default for EeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            damping: 0.5,
        }
    }
}

/// Norm of the stacked equations with the scheme's working covariance.
pub fn stacked_norm(
    layout: &ParamLayout,
    ctx: &EbContext,
    data: &Dataset,
    theta1: &[f64],
    theta2: &[f64],
    scheme: &Scheme,
) -> Result<f64> {
    let b_w = scheme.weight_beta(&theta1[1..1 + layout.n_beta()]);
    let eqs = subject_equations(layout, ctx, data, theta1, theta2, &b_w)?;
    let (a, b) = sum_equations(&eqs, layout.n1, layout.n2);
    Ok(a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt() / data.len().max(1) as f64)
}

/// Solve the outcome estimating equations given θ̂₃.
pub fn fit_outcome_ee(
    layout: &ParamLayout,
    data: &Dataset,
    theta3: &[f64],
    scheme: &Scheme,
    opts: &EeOptions,
) -> Result<OutcomeFit> {
    scheme.check(layout.n_beta())?;
    if data.total_occasions() == 0 {
        return Err(Error::BadDesign("no outcome observations".into()));
    }
    let ctx = EbContext::new(layout, theta3, data)?;
    let nb = layout.n_beta();
    let occ = layout.occasions();
    let cov = layout.outcome_cov();

    // Ordinary least squares start, then a residual-variance start for θ₂.
    let mut theta1 = ols_start(layout, &ctx, data)?;
    let mut s2 = 0.0;
    let mut cnt = 0usize;
    for (i, s) in data.subjects().iter().enumerate() {
        let d = design(layout, &ctx.u_tilde[i], &s.z);
        let r = DVector::from_column_slice(&s.y) - &d * DVector::from_column_slice(&theta1);
        s2 += r.norm_squared();
        cnt += s.n_occ();
    }
    let mut theta2 = cov.start(occ, s2 / cnt.max(1) as f64);

    let mut iterations = 0;
    let mut converged = false;
    let mut prev_norm = f64::INFINITY;
    let mut b_w = scheme.weight_beta(&theta1[1..1 + nb]);
    while iterations < opts.max_iter {
        iterations += 1;
        let t1 = solve_theta1(layout, &ctx, data, &theta2, &b_w)?;
        let t2 = solve_theta2(layout, &ctx, data, &t1, &theta2, scheme)?;
        let change = t1
            .iter()
            .zip(&theta1)
            .chain(t2.iter().zip(&theta2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        match scheme {
            Scheme::Ee1 => {
                let mut cand1 = t1;
                let mut cand2 = t2;
                let mut norm = stacked_norm(layout, &ctx, data, &cand1, &cand2, scheme)?;
                if norm > prev_norm {
                    let damp = opts.damping;
                    cand1 = theta1.iter().zip(&cand1).map(|(a, b)| a + damp * (b - a)).collect();
                    cand2 = solve_theta2(layout, &ctx, data, &cand1, &cand2, scheme)?;
                    norm = stacked_norm(layout, &ctx, data, &cand1, &cand2, scheme)?;
                }
                theta1 = cand1;
                theta2 = cand2;
                b_w = theta1[1..1 + nb].to_vec();
                prev_norm = norm;
                if norm < opts.tol {
                    converged = true;
                    break;
                }
            }
            _ => {
                theta1 = t1;
                theta2 = t2;
                if change < opts.tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    let ee_norm = stacked_norm(layout, &ctx, data, &theta1, &theta2, scheme)?;
    if !converged {
        let mut best = theta1.clone();
        best.extend(&theta2);
        return Err(Error::NotConverged {
            what: format!("{} estimating equations", scheme.name()),
            iterations,
            norm: ee_norm,
            best,
        });
    }
    let counts = data.pattern_counts();
    let b_w = scheme.weight_beta(&theta1[1..1 + nb]);
    let weights = data
        .patterns()
        .iter()
        .enumerate()
        .map(|(k, o)| PatternWeight {
            observed: o.iter().map(|j| j + 1).collect(),
            subjects: counts[k],
            psi_tilde_diag: ctx.psi_tilde[k].diagonal().as_slice().to_vec(),
            inflation: beta_quad(&b_w, &ctx.psi_tilde[k], layout.outcome_latents()),
        })
        .collect();
    Ok(OutcomeFit {
        theta1,
        theta2,
        scheme: scheme.clone(),
        ee_norm,
        iterations,
        converged,
        weights,
    })
}

fn ols_start(layout: &ParamLayout, ctx: &EbContext, data: &Dataset) -> Result<Vec<f64>> {
    let k = layout.n1;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for (i, s) in data.subjects().iter().enumerate() {
        let d = design(layout, &ctx.u_tilde[i], &s.z);
        xtx += d.transpose() * &d;
        xty += d.transpose() * DVector::from_column_slice(&s.y);
    }
    rank_check(&xtx, &layout.names()[..k])?;
    let sol = xtx
        .cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::Singular("least squares normal equations".into()))?;
    Ok(sol.as_slice().to_vec())
}

/// Per-subject (θ₁, θ₂) estimating functions at a full parameter value.
pub fn subject_outcome_scores(
    layout: &ParamLayout,
    data: &Dataset,
    theta1: &[f64],
    theta2: &[f64],
    theta3: &[f64],
    scheme: &Scheme,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let ctx = EbContext::new(layout, theta3, data)?;
    let b_w = scheme.weight_beta(&theta1[1..1 + layout.n_beta()]);
    subject_equations(layout, &ctx, data, theta1, theta2, &b_w)
}
