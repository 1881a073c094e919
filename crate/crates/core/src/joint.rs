//! Joint maximum likelihood over (θ₁, θ₂, θ₃).
//!
//! L(θ) = Πᵢ f(Yᵢ | Xᵢ; θ₁, θ₂, θ₃) f(Xᵢ; θ₃), with Y | X Gaussian with
//! mean μ_{y|x} and covariance Ω_{y|x}.

use nalgebra::{DMatrix, DVector};
use num_dual::Dual64;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exposure::{fit_exposure_mle, obs_loglik_x, subject_scores_theta3, MleOptions};
use crate::linalg::{eig_range, sym_inverse, SpdFactor};
use crate::moments::{beta_quad, leading, outcome_conditional_moments, pattern_factors, ExposureMoments};
use crate::optim::{minimize, OptimOptions};
use crate::outcome::{fit_outcome_ee, EbContext, EeOptions, Scheme};
use crate::params::{OutcomeCoefs, ParamLayout, ParamVector};
use crate::scalar::{seeded, tangent, Scalar};
use crate::spec::ModelSpec;

/// Σᵢ [log f(Yᵢ | Xᵢ) + log f(Xᵢ,ₒ)].
pub fn joint_loglik<T: Scalar>(layout: &ParamLayout, theta: &ParamVector<T>, data: &Dataset) -> Result<T> {
    Ok(outcome_loglik(layout, theta, data)? + obs_loglik_x(layout, &theta.theta3, data)?)
}

/// Σᵢ log f(Yᵢ | Xᵢ) alone.
pub fn outcome_loglik<T: Scalar>(layout: &ParamLayout, theta: &ParamVector<T>, data: &Dataset) -> Result<T> {
    let em = ExposureMoments::from_theta3(layout, &theta.theta3)?;
    let factors = pattern_factors(&em, data.patterns())?;
    let omega_eps = layout.outcome_cov().build(&theta.theta2, layout.occasions())?;
    let coefs = OutcomeCoefs::from_theta1(&theta.theta1, layout.n_beta());
    let mut total = T::zero();
    for (i, s) in data.subjects().iter().enumerate() {
        if s.n_occ() == 0 {
            continue;
        }
        let f = &factors[data.pattern_of(i)];
        let u = f.u_tilde(&em, &s.x, &s.w);
        let (mu, om) = outcome_conditional_moments(&coefs, &omega_eps, layout.outcome_latents(), &u, &f.psi_tilde, &s.z)?;
        let resid: Vec<T> = (0..s.n_occ()).map(|j| T::lit(s.y[j]) - mu[j]).collect();
        total += SpdFactor::new(&om, "conditional outcome covariance")?.log_density(&resid);
    }
    Ok(total)
}

/// Per-subject likelihood scores (rows = subjects, columns = packed θ).
///
/// θ₁ and θ₂ components use the closed forms, including the
/// ½tr{Ω⁻¹ ∂Ω/∂βₖ Ω⁻¹(rrᵀ − Ω)} term with ∂Ω_{y|x}/∂βₖ = 2(Ψ̃β)ₖ11ᵀ;
/// θ₃ components combine the surrogate score with exact tangents of Ũ and
/// Ψ̃.
pub fn subject_scores_full(layout: &ParamLayout, theta: &ParamVector, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let (n1, n2, n3) = (layout.n1, layout.n2, layout.n3);
    let nb = layout.n_beta();
    let lat = layout.outcome_latents();
    let ctx = EbContext::new(layout, &theta.theta3, data)?;
    let omega_eps = layout.outcome_cov().build(&theta.theta2, layout.occasions())?;
    let derivs = layout.outcome_cov().derivatives(&theta.theta2, layout.occasions());
    let coefs = OutcomeCoefs::from_theta1(&theta.theta1, nb);
    let x_scores = subject_scores_theta3(layout, &theta.theta3, data)?;

    // Exact tangents of Ũ (per subject) and Ψ̃ (per pattern) along each θ₃ coordinate.
    let mut u_dot: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n3);
    let mut psi_dot: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n3);
    for k in 0..n3 {
        let d = seeded(&theta.theta3, Some(k));
        let em = ExposureMoments::<Dual64>::from_theta3(layout, &d)?;
        let factors = pattern_factors(&em, data.patterns())?;
        u_dot.push(
            data.subjects()
                .iter()
                .enumerate()
                .map(|(i, s)| factors[data.pattern_of(i)].u_tilde(&em, &s.x, &s.w).map(tangent))
                .collect(),
        );
        psi_dot.push(factors.iter().map(|f| f.psi_tilde.map(tangent)).collect());
    }

    let mut out = Vec::with_capacity(data.len());
    for (i, s) in data.subjects().iter().enumerate() {
        let mut g = vec![0.0; n1 + n2 + n3];
        g[n1 + n2..].copy_from_slice(&x_scores[i]);
        let n = s.n_occ();
        if n == 0 {
            out.push(g);
            continue;
        }
        let pat = data.pattern_of(i);
        let psi = &ctx.psi_tilde[pat];
        let u = &ctx.u_tilde[i];
        let (mu, om) = outcome_conditional_moments(&coefs, &omega_eps, lat, u, psi, &s.z)?;
        let f = SpdFactor::new(&om, "conditional outcome covariance")?;
        let om_inv = f.inverse();
        let r = DVector::from_column_slice(&s.y) - mu;
        let v = DVector::from_vec(f.solve(r.as_slice()));
        let ones = DVector::from_element(n, 1.0);
        let one_v = v.sum();
        let one_inv_one = (&om_inv * &ones).sum();
        // ½tr{Ω⁻¹ 11ᵀ Ω⁻¹ (rrᵀ − Ω)}
        let dc = 0.5 * (one_v * one_v - one_inv_one);

        g[0] = one_v;
        for b in 0..nb {
            let psi_beta: f64 = (0..nb).map(|c| psi[(lat[b], lat[c])] * coefs.beta[c]).sum();
            g[1 + b] = u[lat[b]] * one_v + 2.0 * psi_beta * dc;
        }
        for c in 0..coefs.kappa.len() {
            g[1 + nb + c] = (0..n).map(|j| s.z[(j, c)] * v[j]).sum();
        }
        let mid = &v * v.transpose() - &om_inv;
        for (k, gk) in derivs.iter().enumerate() {
            g[n1 + k] = 0.5 * leading(gk, n).component_mul(&mid).sum();
        }
        for k in 0..n3 {
            let ud = &u_dot[k][i];
            let mean_dot: f64 = (0..nb).map(|b| coefs.beta[b] * ud[lat[b]]).sum();
            let c_dot = beta_quad(&coefs.beta, &psi_dot[k][pat], lat);
            g[n1 + n2 + k] += one_v * mean_dot + dc * c_dot;
        }
        out.push(g);
    }
    Ok(out)
}

pub fn score_full(layout: &ParamLayout, theta: &ParamVector, data: &Dataset) -> Result<Vec<f64>> {
    let per = subject_scores_full(layout, theta, data)?;
    let mut g = vec![0.0; layout.len()];
    for row in &per {
        for (a, b) in g.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok(g)
}

/// Observed information by central differences of the exact score.
pub fn observed_information(layout: &ParamLayout, theta: &ParamVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let v = theta.pack();
    let n = v.len();
    let mut info = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-5 * v[k].abs().max(1.0);
        let mut up = v.clone();
        let mut dn = v.clone();
        up[k] += h;
        dn[k] -= h;
        let gu = score_full(layout, &ParamVector::unpack(layout, &up)?, data)?;
        let gd = score_full(layout, &ParamVector::unpack(layout, &dn)?, data)?;
        for i in 0..n {
            info[(i, k)] = -(gu[i] - gd[i]) / (2.0 * h);
        }
    }
    Ok((&info + info.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub theta: ParamVector,
    pub names: Vec<String>,
    pub loglik: f64,
    /// Inverse observed information.
    pub cov: Vec<Vec<f64>>,
    /// 2-norm of the per-subject mean gradient on the unconstrained scale.
    pub score_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Two-stage starting point: θ̂₃ by surrogate likelihood, then regression calibration.
pub fn two_stage_start(spec: &ModelSpec, data: &Dataset, opts: &OptimOptions) -> Result<ParamVector> {
    let layout = ParamLayout::new(spec);
    let ex_opts = MleOptions {
        optim: opts.clone(),
        information: false,
    };
    let ex = fit_exposure_mle(spec, data, None, &ex_opts)?;
    let oc = fit_outcome_ee(&layout, data, &ex.theta3, &Scheme::Rc, &EeOptions::default())?;
    Ok(ParamVector {
        theta1: oc.theta1,
        theta2: oc.theta2,
        theta3: ex.theta3,
    })
}

pub fn fit_joint_mle(spec: &ModelSpec, data: &Dataset, init: Option<&ParamVector>, opts: &MleOptions) -> Result<JointFit> {
    spec.validate()?;
    let layout = ParamLayout::new(spec);
    let start = match init {
        Some(t) => t.clone(),
        None => two_stage_start(spec, data, &opts.optim)?,
    };
    let z0 = layout.to_unconstrained(&start)?;
    let nobs = data.len() as f64;
    let objective = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let theta = layout.from_unconstrained(z);
        let ll = joint_loglik(&layout, &theta, data)?;
        let g = score_full(&layout, &theta, data)?;
        let jac = layout.transform_jacobian(z);
        let gz = jac.transpose() * DVector::from_vec(g);
        Ok((-ll / nobs, gz.iter().map(|v| -v / nobs).collect()))
    };
    let res = minimize(objective, &z0, &opts.optim)?;
    let theta = layout.from_unconstrained(&res.x);
    if !res.converged {
        return Err(Error::NotConverged {
            what: "joint likelihood".into(),
            iterations: res.iterations,
            norm: res.gnorm,
            best: theta.pack(),
        });
    }
    let cov = if opts.information {
        let info = observed_information(&layout, &theta, data)?;
        let (lo, hi) = eig_range(&info);
        if !(lo > 0.0) || lo / hi < 1e-8 {
            return Err(Error::Unidentified(format!(
                "observed information is singular at the optimum (eigenvalues {lo:.3e} .. {hi:.3e})"
            )));
        }
        let cov = sym_inverse(&info, "observed information")?;
        (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect()
    } else {
        Vec::new()
    };
    Ok(JointFit {
        names: layout.names().to_vec(),
        loglik: -res.f * nobs,
        cov,
        score_norm: res.gnorm,
        converged: true,
        iterations: res.iterations,
        theta,
    })
}
