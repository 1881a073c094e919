//! Marginal and pattern-conditional Gaussian moments.
//!
//! With R = (I − Γ₁)⁻¹:
//!
//! * μᵤ = R(α + Γ₂W),  Ψᵤ = RΨRᵀ
//! * μₓ = ν + Λμᵤ + KW,  Ωₓ = ΛΨᵤΛᵀ + Ω_δ
//! * Ũ = μᵤ + ΨᵤΛₒᵀΩₒₒ⁻¹(xₒ − μₓₒ),  Ψ̃ = Ψᵤ − ΨᵤΛₒᵀΩₒₒ⁻¹ΛₒΨᵤ
//! * μ_{y|x} = β₀ + βᵀŨ + Zκ,  Ω_{y|x} = Ω_ε + (βᵀΨ̃β)11ᵀ
//!
//! where `o` indexes the surrogates observed for a subject.

use nalgebra::{DMatrix, DVector};

use crate::data::SubjectData;
use crate::error::{Error, Result};
use crate::linalg::{inverse_checked, submatrix, symmetrize, SpdFactor};
use crate::params::{ExposureParams, OutcomeCoefs, ParamLayout, ParamVector};
use crate::scalar::Scalar;

/// Subject-independent parts of the exposure moments.
#[derive(Debug, Clone)]
pub struct ExposureMoments<T: Scalar> {
    /// (I − Γ₁)⁻¹
    pub resolvent: DMatrix<T>,
    /// μᵤ = `mu_u0 + mu_u_w · W`
    pub mu_u0: DVector<T>,
    pub mu_u_w: DMatrix<T>,
    pub psi_u: DMatrix<T>,
    /// μₓ = `mu_x0 + mu_x_w · W`
    pub mu_x0: DVector<T>,
    pub mu_x_w: DMatrix<T>,
    pub omega_x: DMatrix<T>,
    nu: DVector<T>,
    lambda: DMatrix<T>,
    k: DMatrix<T>,
    delta_zero: Vec<bool>,
}

impl<T: Scalar> ExposureMoments<T> {
    pub fn new(par: &ExposureParams<T>) -> Result<Self> {
        let l = par.alpha.len();
        let ig = DMatrix::<T>::identity(l, l) - &par.gamma1;
        let resolvent = inverse_checked(&ig, "I - Gamma1")?;
        let mu_u0 = &resolvent * &par.alpha;
        let mu_u_w = &resolvent * &par.gamma2;
        let mut psi_u = &resolvent * &par.psi * resolvent.transpose();
        symmetrize(&mut psi_u);
        let mu_x0 = &par.nu + &par.lambda * &mu_u0;
        let mu_x_w = &par.lambda * &mu_u_w + &par.k;
        let mut omega_x = &par.lambda * &psi_u * par.lambda.transpose() + &par.omega_delta;
        symmetrize(&mut omega_x);
        Ok(Self {
            resolvent,
            mu_u0,
            mu_u_w,
            psi_u,
            mu_x0,
            mu_x_w,
            omega_x,
            nu: par.nu.clone(),
            lambda: par.lambda.clone(),
            k: par.k.clone(),
            delta_zero: par.delta_zero.clone(),
        })
    }

    pub fn from_theta3(layout: &ParamLayout, theta3: &[T]) -> Result<Self> {
        Self::new(&ExposureParams::from_theta3(layout, theta3)?)
    }

    pub fn l(&self) -> usize {
        self.mu_u0.len()
    }

    pub fn p(&self) -> usize {
        self.mu_x0.len()
    }

    pub fn mu_u(&self, w: &[f64]) -> DVector<T> {
        affine(&self.mu_u0, &self.mu_u_w, w)
    }

    pub fn mu_x(&self, w: &[f64]) -> DVector<T> {
        affine(&self.mu_x0, &self.mu_x_w, w)
    }

    /// Factorization of the observed sub-block for one missingness pattern.
    pub fn pattern(&self, obs: &[usize]) -> Result<PatternFactor<T>> {
        let l = self.l();
        let omega_oo = submatrix(&self.omega_x, obs, obs);
        let lambda_o = DMatrix::from_fn(obs.len(), l, |i, k| self.lambda[(obs[i], k)]);
        let error_free = !obs.is_empty() && obs.iter().all(|&j| self.delta_zero[j]);
        if error_free && obs.len() == l {
            // Ũ is a deterministic function of the observed surrogates.
            let inv = inverse_checked(&lambda_o, "observed loading block")?;
            let chol = SpdFactor::new(&omega_oo, "observed surrogate covariance")?;
            return Ok(PatternFactor {
                obs: obs.to_vec(),
                chol,
                gain: Gain::Exact {
                    lambda_inv: inv,
                    nu_o: DVector::from_fn(obs.len(), |i, _| self.nu[obs[i]]),
                    k_o: DMatrix::from_fn(obs.len(), self.k.ncols(), |i, c| self.k[(obs[i], c)]),
                },
                psi_tilde: DMatrix::zeros(l, l),
            });
        }
        let chol = SpdFactor::new(&omega_oo, "observed surrogate covariance")?;
        // cov(X_o, U) = Λ_o Ψᵤ
        let cross = &lambda_o * &self.psi_u;
        let solved = chol.solve_mat(&cross);
        let gain = solved.transpose();
        let mut psi_tilde = &self.psi_u - &gain * &cross;
        symmetrize(&mut psi_tilde);
        Ok(PatternFactor {
            obs: obs.to_vec(),
            chol,
            gain: Gain::Regular(gain),
            psi_tilde,
        })
    }
}

fn affine<T: Scalar>(c: &DVector<T>, m: &DMatrix<T>, w: &[f64]) -> DVector<T> {
    let mut out = c.clone();
    for (j, &wj) in w.iter().enumerate() {
        let wj = T::lit(wj);
        for i in 0..out.len() {
            out[i] += m[(i, j)] * wj;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Gain<T: Scalar> {
    /// Ψᵤ Λₒᵀ Ωₒₒ⁻¹
    Regular(DMatrix<T>),
    /// Error-free surrogates exactly identifying U: Ũ = Λₒ⁻¹(xₒ − νₒ − Kₒ W).
    Exact {
        lambda_inv: DMatrix<T>,
        nu_o: DVector<T>,
        k_o: DMatrix<T>,
    },
}

/// Per-pattern factorization: Cholesky of Ωₒₒ, the EB gain and Ψ̃.
#[derive(Debug, Clone)]
pub struct PatternFactor<T: Scalar> {
    pub obs: Vec<usize>,
    pub chol: SpdFactor<T>,
    gain: Gain<T>,
    pub psi_tilde: DMatrix<T>,
}

impl<T: Scalar> PatternFactor<T> {
    /// Residual xₒ − μₓₒ.
    pub fn residual(&self, em: &ExposureMoments<T>, x: &[f64], w: &[f64]) -> Vec<T> {
        let mu = em.mu_x(w);
        self.obs.iter().map(|&j| T::lit(x[j]) - mu[j]).collect()
    }

    pub fn u_tilde(&self, em: &ExposureMoments<T>, x: &[f64], w: &[f64]) -> DVector<T> {
        match &self.gain {
            Gain::Regular(g) => {
                let r = DVector::from_vec(self.residual(em, x, w));
                em.mu_u(w) + g * r
            }
            Gain::Exact { lambda_inv, nu_o, k_o } => {
                let v = DVector::from_fn(self.obs.len(), |i, _| T::lit(x[self.obs[i]]) - nu_o[i]);
                lambda_inv * (v - affine(&DVector::zeros(self.obs.len()), k_o, w))
            }
        }
    }

    /// Log-density of the observed surrogates (0 when nothing is observed).
    pub fn loglik(&self, em: &ExposureMoments<T>, x: &[f64], w: &[f64]) -> T {
        if self.obs.is_empty() {
            return T::zero();
        }
        self.chol.log_density(&self.residual(em, x, w))
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.gain, Gain::Exact { .. })
    }
}

/// Factors for every pattern of a dataset, in pattern order.
pub fn pattern_factors<T: Scalar>(em: &ExposureMoments<T>, patterns: &[Vec<usize>]) -> Result<Vec<PatternFactor<T>>> {
    patterns.iter().map(|o| em.pattern(o)).collect()
}

/// (μᵤ, Ψᵤ) at covariates `w`.
pub fn latent_marginal_moments<T: Scalar>(par: &ExposureParams<T>, w: &[f64]) -> Result<(DVector<T>, DMatrix<T>)> {
    let em = ExposureMoments::new(par)?;
    Ok((em.mu_u(w), em.psi_u))
}

/// (μₓ, Ωₓ) at covariates `w`.
pub fn surrogate_marginal_moments<T: Scalar>(par: &ExposureParams<T>, w: &[f64]) -> Result<(DVector<T>, DMatrix<T>)> {
    let em = ExposureMoments::new(par)?;
    Ok((em.mu_x(w), em.omega_x))
}

/// Empirical-Bayes scores (Ũ, Ψ̃) for one subject's observed surrogates.
pub fn eb_scores<T: Scalar>(
    par: &ExposureParams<T>,
    x: &[f64],
    mask: &[bool],
    w: &[f64],
) -> Result<(DVector<T>, DMatrix<T>)> {
    let em = ExposureMoments::new(par)?;
    let obs: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    let f = em.pattern(&obs)?;
    Ok((f.u_tilde(&em, x, w), f.psi_tilde))
}

/// β entries paired with the latents they multiply.
pub fn selected<T: Scalar>(v: &DVector<T>, latents: &[usize]) -> Vec<T> {
    latents.iter().map(|&k| v[k]).collect()
}

/// βᵀΨ̃β over the outcome latents.
pub fn beta_quad<T: Scalar>(beta: &[T], psi_tilde: &DMatrix<T>, latents: &[usize]) -> T {
    let mut s = T::zero();
    for (a, &ka) in latents.iter().enumerate() {
        for (b, &kb) in latents.iter().enumerate() {
            s += beta[a] * psi_tilde[(ka, kb)] * beta[b];
        }
    }
    s
}

/// Leading `n × n` block of the full-occasion outcome covariance.
pub fn leading<T: Scalar>(m: &DMatrix<T>, n: usize) -> DMatrix<T> {
    m.view((0, 0), (n, n)).into_owned()
}

/// (μ_{y|x}, Ω_{y|x}) for one subject.
pub fn outcome_conditional_moments<T: Scalar>(
    coefs: &OutcomeCoefs<T>,
    omega_eps: &DMatrix<T>,
    latents: &[usize],
    u_tilde: &DVector<T>,
    psi_tilde: &DMatrix<T>,
    z: &DMatrix<f64>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let n = z.nrows();
    if omega_eps.nrows() < n {
        return Err(Error::Dimension(format!(
            "{n} occasions exceed outcome covariance size {}",
            omega_eps.nrows()
        )));
    }
    let mut base = coefs.beta0;
    for (b, &k) in coefs.beta.iter().zip(latents) {
        base += *b * u_tilde[k];
    }
    let mu = DVector::from_fn(n, |j, _| {
        let mut m = base;
        for (c, kc) in coefs.kappa.iter().enumerate() {
            m += *kc * T::lit(z[(j, c)]);
        }
        m
    });
    let inflate = beta_quad(&coefs.beta, psi_tilde, latents);
    let omega = leading(omega_eps, n).map(|v| v + inflate);
    Ok((mu, omega))
}

/// Every moment for one subject at one parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet<T: Scalar = f64> {
    pub mu_u: DVector<T>,
    pub psi_u: DMatrix<T>,
    pub mu_x: DVector<T>,
    pub omega_x: DMatrix<T>,
    pub u_tilde: DVector<T>,
    pub psi_tilde: DMatrix<T>,
    pub mu_y_given_x: DVector<T>,
    pub omega_y_given_x: DMatrix<T>,
}

impl<T: Scalar> MomentSet<T> {
    pub fn compute(layout: &ParamLayout, theta: &ParamVector<T>, subject: &SubjectData) -> Result<Self> {
        let par = ExposureParams::from_theta3(layout, &theta.theta3)?;
        let em = ExposureMoments::new(&par)?;
        let f = em.pattern(&subject.observed())?;
        let u_tilde = f.u_tilde(&em, &subject.x, &subject.w);
        let omega_eps = layout.outcome_cov().build(&theta.theta2, layout.occasions())?;
        let coefs = OutcomeCoefs::from_theta1(&theta.theta1, layout.n_beta());
        let (mu_y, omega_y) = outcome_conditional_moments(
            &coefs,
            &omega_eps,
            layout.outcome_latents(),
            &u_tilde,
            &f.psi_tilde,
            &subject.z,
        )?;
        Ok(Self {
            mu_u: em.mu_u(&subject.w),
            psi_u: em.psi_u.clone(),
            mu_x: em.mu_x(&subject.w),
            omega_x: em.omega_x.clone(),
            u_tilde,
            psi_tilde: f.psi_tilde,
            mu_y_given_x: mu_y,
            omega_y_given_x: omega_y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lambda: DMatrix<f64>, psi: DMatrix<f64>, omega_delta: DMatrix<f64>) -> ExposureParams<f64> {
        let (p, l) = lambda.shape();
        ExposureParams {
            nu: DVector::zeros(p),
            lambda,
            k: DMatrix::zeros(p, 0),
            alpha: DVector::zeros(l),
            gamma1: DMatrix::zeros(l, l),
            gamma2: DMatrix::zeros(l, 0),
            delta_zero: omega_delta.diagonal().iter().map(|&v| v == 0.0).collect(),
            omega_delta,
            psi,
        }
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn identity_resolvent() {
        let par = params(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0, DMatrix::identity(2, 2));
        let (mu, psi) = latent_marginal_moments(&par, &[]).unwrap();
        assert_eq!(mu, DVector::zeros(2));
        assert_eq!(psi, par.psi);
    }

    #[test]
    fn two_latent_resolvent() {
        let mut par = params(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2));
        par.gamma1[(0, 1)] = 0.5;
        par.alpha = DVector::from_vec(vec![0.0, 1.0]);
        let (mu, psi) = latent_marginal_moments(&par, &[]).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15 && (mu[1] - 1.0).abs() < 1e-15);
        let expect = DMatrix::from_row_slice(2, 2, &[1.25, 0.5, 0.5, 1.0]);
        assert!(close(&psi, &expect, 1e-15));
    }

    #[test]
    fn singular_structural_system() {
        let mut par = params(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2));
        par.gamma1[(0, 1)] = 1.0;
        par.gamma1[(1, 0)] = 1.0;
        assert!(matches!(latent_marginal_moments(&par, &[]), Err(Error::Singular(_))));
    }

    #[test]
    fn error_free_surrogates() {
        let par = params(DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]), DMatrix::zeros(2, 2));
        let (mu_x, omega_x) = surrogate_marginal_moments(&par, &[]).unwrap();
        assert_eq!(mu_x, DVector::zeros(2));
        assert_eq!(omega_x, par.psi);
        let (u, psi_t) = eb_scores(&par, &[0.7, -1.1], &[true, true], &[]).unwrap();
        assert_eq!(u.as_slice(), &[0.7, -1.1]);
        assert_eq!(psi_t, DMatrix::zeros(2, 2));
    }

    #[test]
    fn one_latent_two_surrogates() {
        let par = params(DMatrix::from_element(2, 1, 1.0), DMatrix::identity(1, 1), DMatrix::identity(2, 2));
        let (_, omega_x) = surrogate_marginal_moments(&par, &[]).unwrap();
        assert_eq!(omega_x, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let (u, psi_t) = eb_scores(&par, &[1.0, 1.0], &[true, true], &[]).unwrap();
        assert!((u[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((psi_t[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);

        let coefs = OutcomeCoefs { beta0: 0.0, beta: vec![1.0], kappa: vec![] };
        let (mu_y, omega_y) =
            outcome_conditional_moments(&coefs, &DMatrix::identity(2, 2), &[0], &u, &psi_t, &DMatrix::zeros(2, 0))
                .unwrap();
        assert!((mu_y[0] - 2.0 / 3.0).abs() < 1e-15 && (mu_y[1] - 2.0 / 3.0).abs() < 1e-15);
        let expect = DMatrix::identity(2, 2) + DMatrix::from_element(2, 2, 1.0 / 3.0);
        assert!(close(&omega_y, &expect, 1e-15));
    }

    #[test]
    fn all_missing_returns_prior() {
        let mut par = params(DMatrix::from_element(3, 1, 1.0), DMatrix::identity(1, 1) * 1.5, DMatrix::identity(3, 3));
        par.alpha[0] = 0.4;
        let (u, psi_t) = eb_scores(&par, &[0.0; 3], &[false; 3], &[]).unwrap();
        assert_eq!(u[0], 0.4);
        assert_eq!(psi_t[(0, 0)], 1.5);
    }

    #[test]
    fn zero_beta_leaves_outcome_covariance() {
        let coefs = OutcomeCoefs { beta0: 1.0, beta: vec![0.0], kappa: vec![] };
        let eps = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (_, om) = outcome_conditional_moments(
            &coefs,
            &eps,
            &[0],
            &DVector::from_element(1, 3.0),
            &DMatrix::identity(1, 1),
            &DMatrix::zeros(2, 0),
        )
        .unwrap();
        assert_eq!(om, eps);
    }
}
