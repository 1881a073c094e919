//! Observed-data likelihood of the surrogates and its maximization.
//!
//! Each subject contributes the Gaussian log-density of its observed
//! surrogates under (μₓ, Ωₓ) restricted to its missingness pattern.

use nalgebra::{DMatrix, DVector};
use num_dual::Dual64;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{eig_range, sym_inverse, SpdFactor};
use crate::moments::{pattern_factors, ExposureMoments, PatternFactor};
use crate::optim::{minimize, OptimOptions};
use crate::params::{ExposureParams, ParamLayout};
use crate::scalar::{seeded, tangent, Scalar};
use crate::spec::{Entry, ModelSpec};

/// Σᵢ log f(xᵢ,ₒ); generic so it can be differentiated with dual numbers.
pub fn obs_loglik_x<T: Scalar>(layout: &ParamLayout, theta3: &[T], data: &Dataset) -> Result<T> {
    let em = ExposureMoments::from_theta3(layout, theta3)?;
    let factors = pattern_factors(&em, data.patterns())?;
    let mut total = T::zero();
    for (i, s) in data.subjects().iter().enumerate() {
        total += factors[data.pattern_of(i)].loglik(&em, &s.x, &s.w);
    }
    Ok(total)
}

/// Per-subject log-likelihood contributions.
pub fn obs_loglik_x_contrib(layout: &ParamLayout, theta3: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    let em = ExposureMoments::from_theta3(layout, theta3)?;
    let factors = pattern_factors(&em, data.patterns())?;
    Ok(data
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| factors[data.pattern_of(i)].loglik(&em, &s.x, &s.w))
        .collect())
}

/// Directional derivatives of μₓ's intercept, slope and Ωₓ along each θ₃ coordinate.
#[derive(Debug, Clone)]
pub struct MomentTangent {
    pub a: DVector<f64>,
    pub c: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

pub fn moment_tangents(layout: &ParamLayout, theta3: &[f64]) -> Result<Vec<MomentTangent>> {
    (0..theta3.len())
        .map(|k| {
            let d = seeded(theta3, Some(k));
            let par = ExposureParams::<Dual64>::from_theta3(layout, &d)?;
            let em = ExposureMoments::new(&par)?;
            Ok(MomentTangent {
                a: em.mu_x0.map(tangent),
                c: em.mu_x_w.map(tangent),
                omega: em.omega_x.map(tangent),
            })
        })
        .collect()
}

/// ∂(μₓ intercept, vec μₓ slope, vech Ωₓ)/∂θ₃, one column per coordinate.
pub fn moment_jacobian(layout: &ParamLayout, theta3: &[f64]) -> Result<DMatrix<f64>> {
    let tangents = moment_tangents(layout, theta3)?;
    let cols: Vec<DVector<f64>> = tangents
        .iter()
        .map(|t| {
            let p = t.a.len();
            let mut v: Vec<f64> = t.a.iter().chain(t.c.iter()).copied().collect();
            for j in 0..p {
                for i in j..p {
                    v.push(t.omega[(i, j)]);
                }
            }
            DVector::from_vec(v)
        })
        .collect();
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(rows, cols.len(), |i, k| cols[k][i]))
}

/// Local identification: the moment Jacobian must have full column rank.
/// A null direction leaves every implied moment, and so the likelihood,
/// unchanged to first order.
pub fn check_local_identification(layout: &ParamLayout, theta3: &[f64]) -> Result<()> {
    if theta3.is_empty() {
        return Ok(());
    }
    let jac = moment_jacobian(layout, theta3)?;
    let sv = jac.svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if !(hi > 0.0) || lo < 1e-9 * hi {
        return Err(Error::Unidentified(format!(
            "moment Jacobian is rank deficient at the optimum (singular values {lo:.3e} .. {hi:.3e})"
        )));
    }
    Ok(())
}

struct PatternAdjoint {
    inv: DMatrix<f64>,
}

impl PatternAdjoint {
    fn new(f: &PatternFactor<f64>) -> Self {
        Self { inv: f.chol.inverse() }
    }
}

/// Per-subject residual weight v = Ωₒₒ⁻¹(xₒ − μₓₒ) and its pattern.
fn subject_weights(
    em: &ExposureMoments<f64>,
    factors: &[PatternFactor<f64>],
    data: &Dataset,
) -> Vec<Vec<f64>> {
    data.subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = &factors[data.pattern_of(i)];
            f.chol.solve(&f.residual(em, &s.x, &s.w))
        })
        .collect()
}

/// Gradient of `obs_loglik_x` with respect to θ₃ (constrained scale).
///
/// Computed by accumulating ∂ℓ/∂μₓ, ∂ℓ/∂(slope) and ∂ℓ/∂Ωₓ per pattern and
/// contracting them with the exact tangents of the moment map.
pub fn score_theta3(layout: &ParamLayout, theta3: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    let em = ExposureMoments::from_theta3(layout, theta3)?;
    let factors = pattern_factors(&em, data.patterns())?;
    let weights = subject_weights(&em, &factors, data);
    let (p, r) = (em.p(), data.r());
    let mut ga = DVector::<f64>::zeros(p);
    let mut gc = DMatrix::<f64>::zeros(p, r);
    let mut gom = DMatrix::<f64>::zeros(p, p);
    let mut counts = vec![0usize; factors.len()];
    for (i, s) in data.subjects().iter().enumerate() {
        let k = data.pattern_of(i);
        counts[k] += 1;
        let obs = &factors[k].obs;
        let v = &weights[i];
        for (a, &ja) in obs.iter().enumerate() {
            ga[ja] += v[a];
            for (c, &wc) in s.w.iter().enumerate() {
                gc[(ja, c)] += v[a] * wc;
            }
            for (b, &jb) in obs.iter().enumerate() {
                gom[(ja, jb)] += 0.5 * v[a] * v[b];
            }
        }
    }
    for (f, &n) in factors.iter().zip(&counts) {
        if f.obs.is_empty() {
            continue;
        }
        let inv = PatternAdjoint::new(f).inv;
        for (a, &ja) in f.obs.iter().enumerate() {
            for (b, &jb) in f.obs.iter().enumerate() {
                gom[(ja, jb)] -= 0.5 * n as f64 * inv[(a, b)];
            }
        }
    }
    let tangents = moment_tangents(layout, theta3)?;
    Ok(tangents
        .iter()
        .map(|t| ga.dot(&t.a) + gc.component_mul(&t.c).sum() + gom.component_mul(&t.omega).sum())
        .collect())
}

/// Per-subject θ₃ scores (rows = subjects).
pub fn subject_scores_theta3(layout: &ParamLayout, theta3: &[f64], data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let em = ExposureMoments::from_theta3(layout, theta3)?;
    let factors = pattern_factors(&em, data.patterns())?;
    let weights = subject_weights(&em, &factors, data);
    let invs: Vec<DMatrix<f64>> = factors.iter().map(|f| PatternAdjoint::new(f).inv).collect();
    let tangents = moment_tangents(layout, theta3)?;
    Ok(data
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = &factors[data.pattern_of(i)];
            let inv = &invs[data.pattern_of(i)];
            let v = &weights[i];
            tangents
                .iter()
                .map(|t| {
                    let mut g = 0.0;
                    for (a, &ja) in f.obs.iter().enumerate() {
                        let mut da = t.a[ja];
                        for (c, &wc) in s.w.iter().enumerate() {
                            da += t.c[(ja, c)] * wc;
                        }
                        g += v[a] * da;
                        for (b, &jb) in f.obs.iter().enumerate() {
                            g += 0.5 * (v[a] * v[b] - inv[(a, b)]) * t.omega[(ja, jb)];
                        }
                    }
                    g
                })
                .collect()
        })
        .collect())
}

/// Central-difference gradient of `obs_loglik_x` on the unconstrained
/// scale, mapped back to θ₃. Slow; kept as a cross-check of [`score_theta3`].
pub fn score_theta3_numeric(layout: &ParamLayout, theta3: &[f64], data: &Dataset, h: f64) -> Result<Vec<f64>> {
    let z = layout.theta3_to_unconstrained(theta3)?;
    let mut gz = vec![0.0; z.len()];
    for k in 0..z.len() {
        let mut up = z.clone();
        let mut dn = z.clone();
        up[k] += h;
        dn[k] -= h;
        let fu = obs_loglik_x(layout, &layout.theta3_from_unconstrained(&up), data)?;
        let fd = obs_loglik_x(layout, &layout.theta3_from_unconstrained(&dn), data)?;
        gz[k] = (fu - fd) / (2.0 * h);
    }
    // g_z = Jᵀ g_θ  ⇒  g_θ = J⁻ᵀ g_z
    let jac = layout.theta3_transform_jacobian(&z);
    let jt = jac.transpose();
    let g = jt
        .lu()
        .solve(&DVector::from_vec(gz))
        .ok_or_else(|| Error::Singular("transform Jacobian".into()))?;
    Ok(g.as_slice().to_vec())
}

/// Result of maximizing the surrogate likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureFit {
    pub theta3: Vec<f64>,
    pub names: Vec<String>,
    pub loglik: f64,
    /// 2-norm of the per-subject mean gradient on the unconstrained scale.
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of subjects per distinct missingness pattern (1-based surrogate indices).
    pub pattern_counts: Vec<(Vec<usize>, usize)>,
    /// Inverse observed information on the θ₃ scale.
    pub cov: Vec<Vec<f64>>,
}

impl ExposureFit {
    /// Standard errors, or NaN when the information was not computed.
    pub fn se(&self) -> Vec<f64> {
        (0..self.theta3.len())
            .map(|k| self.cov.get(k).map_or(f64::NAN, |r| r[k].max(0.0).sqrt()))
            .collect()
    }
}

/// Number of distinct first and second moments available to identify θ₃.
fn moment_count(spec: &ModelSpec) -> usize {
    let p = spec.p();
    p * (1 + spec.r()) + p * (p + 1) / 2
}

/// Crude but admissible starting values: means for intercepts, unit
/// loadings, variances from the sample, zero correlations.
pub fn initial_theta3(spec: &ModelSpec, layout: &ParamLayout, data: &Dataset) -> Result<Vec<f64>> {
    let (p, l, r) = (spec.p(), spec.l(), spec.r());
    let mut mean = vec![0.0; p];
    let mut var = vec![1.0; p];
    for j in 0..p {
        let v: Vec<f64> = data.subjects().iter().filter(|s| s.mask[j]).map(|s| s.x[j]).collect();
        if v.len() >= 2 {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            mean[j] = m;
            if s2 > 0.0 {
                var[j] = s2;
            }
        } else if v.len() == 1 {
            mean[j] = v[0];
        }
    }
    let fixed = |e: &Entry, default: f64| e.fixed_value().unwrap_or(default);
    let lambda = DMatrix::from_fn(p, l, |j, k| fixed(&spec.lambda[j][k], 1.0));
    let mut alpha = DVector::zeros(l);
    let mut psi = DMatrix::zeros(l, l);
    for k in 0..l {
        let anchor = (0..p).find(|&j| matches!(spec.lambda[j][k], Entry::Fixed(v) if v != 0.0));
        let (j, lam) = match anchor {
            Some(j) => (j, lambda[(j, k)]),
            None => (0, 1.0),
        };
        let nu_j = spec.nu[j].fixed_value().unwrap_or(0.0);
        alpha[k] = fixed(&spec.alpha[k], (mean[j] - nu_j) / lam);
        psi[(k, k)] = 0.5 * var[j] / (lam * lam);
    }
    let mut nu = DVector::zeros(p);
    for j in 0..p {
        let implied: f64 = (0..l).map(|k| lambda[(j, k)] * alpha[k]).sum();
        nu[j] = fixed(&spec.nu[j], mean[j] - implied);
    }
    let omega_delta = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            spec.delta_cov.fixed_variances[j].unwrap_or(0.5 * var[j])
        } else {
            0.0
        }
    });
    let m = ExposureParams {
        nu,
        lambda,
        k: DMatrix::from_fn(p, r, |j, c| fixed(&spec.k[j][c], 0.0)),
        alpha,
        gamma1: DMatrix::from_fn(l, l, |a, b| fixed(&spec.gamma1[a][b], 0.0)),
        gamma2: DMatrix::from_fn(l, r, |a, c| fixed(&spec.gamma2[a][c], 0.0)),
        omega_delta,
        psi,
        delta_zero: Vec::new(),
    };
    let theta = layout.theta3_from_matrices(&m);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadParam("could not construct starting values".into()));
    }
    Ok(theta)
}

/// Observed information −∂²ℓ/∂θ₃∂θ₃ᵀ by central differences of the exact score.
pub fn observed_information_theta3(layout: &ParamLayout, theta3: &[f64], data: &Dataset) -> Result<DMatrix<f64>> {
    let n = theta3.len();
    let mut info = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-5 * theta3[k].abs().max(1.0);
        let mut up = theta3.to_vec();
        let mut dn = theta3.to_vec();
        up[k] += h;
        dn[k] -= h;
        let gu = score_theta3(layout, &up, data)?;
        let gd = score_theta3(layout, &dn, data)?;
        for i in 0..n {
            info[(i, k)] = -(gu[i] - gd[i]) / (2.0 * h);
        }
    }
    let sym = (&info + info.transpose()) * 0.5;
    Ok(sym)
}

/// Settings shared by the likelihood fits.
#[derive(Debug, Clone, PartialEq)]
pub struct MleOptions {
    pub optim: OptimOptions,
    /// Compute the observed information, check it for singularity and invert
    /// it. Point estimates alone skip this (the covariance is left empty).
    pub information: bool,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            optim: OptimOptions::default(),
            information: true,
        }
    }
}

/// Maximize the surrogate likelihood over θ₃.
pub fn fit_exposure_mle(
    spec: &ModelSpec,
    data: &Dataset,
    init: Option<&[f64]>,
    opts: &MleOptions,
) -> Result<ExposureFit> {
    let layout = ParamLayout::new(spec);
    if layout.n3 > moment_count(spec) {
        return Err(Error::Unidentified(format!(
            "{} free exposure parameters but only {} first and second moments",
            layout.n3,
            moment_count(spec)
        )));
    }
    spec.validate()?;
    if !data.subjects().iter().any(|s| s.mask.iter().any(|&m| m)) {
        return Err(Error::Unidentified("no subject has an observed surrogate".into()));
    }
    let start = match init {
        Some(t) => t.to_vec(),
        None => initial_theta3(spec, &layout, data)?,
    };
    let z0 = layout.theta3_to_unconstrained(&start)?;
    let nobs = data.len() as f64;
    let objective = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let theta = layout.theta3_from_unconstrained(z);
        let ll = obs_loglik_x(&layout, &theta, data)?;
        let g = score_theta3(&layout, &theta, data)?;
        let jac = layout.theta3_transform_jacobian(z);
        let gz = jac.transpose() * DVector::from_vec(g);
        Ok((-ll / nobs, gz.iter().map(|v| -v / nobs).collect()))
    };
    let res = minimize(objective, &z0, &opts.optim)?;
    let theta3 = layout.theta3_from_unconstrained(&res.x);
    if !res.converged {
        return Err(Error::NotConverged {
            what: "exposure likelihood".into(),
            iterations: res.iterations,
            norm: res.gnorm,
            best: theta3,
        });
    }
    check_local_identification(&layout, &theta3)?;
    let cov = if opts.information {
        let info = observed_information_theta3(&layout, &theta3, data)?;
        let (lo, hi) = eig_range(&info);
        let ratio = lo.abs().min(hi.abs()) / lo.abs().max(hi.abs());
        if !(lo > 0.0) || ratio < 1e-8 {
            return Err(Error::Unidentified(format!(
                "observed information is singular at the optimum (eigenvalues {lo:.3e} .. {hi:.3e})"
            )));
        }
        let cov = sym_inverse(&info, "observed information")?;
        (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect()
    } else {
        Vec::new()
    };
    let counts = data.pattern_counts();
    Ok(ExposureFit {
        names: layout.theta3_names().to_vec(),
        loglik: -res.f * nobs,
        score_norm: res.gnorm,
        iterations: res.iterations,
        converged: true,
        pattern_counts: data
            .patterns()
            .iter()
            .zip(counts)
            .map(|(o, c)| (o.iter().map(|j| j + 1).collect(), c))
            .collect(),
        cov,
        theta3,
    })
}

/// Log-density of a residual under a covariance (exposed for oracles).
pub fn gaussian_logpdf(resid: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    Ok(SpdFactor::new(cov, "covariance")?.log_density(resid))
}
