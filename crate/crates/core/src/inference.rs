//! Sandwich variance for the two-stage estimating equations and Wald summaries.
//!
//! The stacked estimating function per subject is Sᵢ = (S_{θ₁}, S_{θ₂}, S_{θ₃}),
//! with S_{θ₃} the surrogate-likelihood score. N·var(θ̂) = B⁻¹AB⁻ᵀ with
//! A = ΣSᵢSᵢᵀ/N and B = Σ∂Sᵢ/∂θᵀ/N. For θ₁ this splits into the naive term
//! B₁₁⁻¹A₁₁B₁₁⁻ᵀ plus the exposure-estimation correction
//! B₁₁⁻¹B₁₃V₃₃B₁₃ᵀB₁₁⁻ᵀ with V₃₃ = B₃₃⁻¹A₃₃B₃₃⁻ᵀ.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exposure::{score_theta3, subject_scores_theta3};
use crate::linalg::equilibrated_inverse;
use crate::outcome::{subject_outcome_scores, Scheme};
use crate::params::{ParamLayout, ParamVector};

/// 97.5% standard-normal quantile.
pub const Z975: f64 = 1.959_963_984_540_054;

/// Per-subject stacked estimating functions (rows = subjects).
pub fn stacked_subject_scores(
    layout: &ParamLayout,
    theta: &ParamVector,
    data: &Dataset,
    scheme: &Scheme,
) -> Result<Vec<Vec<f64>>> {
    let outcome = subject_outcome_scores(layout, data, &theta.theta1, &theta.theta2, &theta.theta3, scheme)?;
    let exposure = subject_scores_theta3(layout, &theta.theta3, data)?;
    Ok(outcome
        .into_iter()
        .zip(exposure)
        .map(|((s1, s2), s3)| {
            let mut v = s1;
            v.extend(s2);
            v.extend(s3);
            v
        })
        .collect())
}

/// ΣᵢSᵢ.
pub fn stacked_sum(layout: &ParamLayout, theta: &ParamVector, data: &Dataset, scheme: &Scheme) -> Result<Vec<f64>> {
    let outcome = subject_outcome_scores(layout, data, &theta.theta1, &theta.theta2, &theta.theta3, scheme)?;
    let mut v = vec![0.0; layout.n1 + layout.n2];
    for (s1, s2) in outcome {
        for (a, b) in v.iter_mut().zip(s1.iter().chain(&s2)) {
            *a += b;
        }
    }
    v.extend(score_theta3(layout, &theta.theta3, data)?);
    Ok(v)
}

/// Â = ΣSᵢSᵢᵀ/N.
pub fn estimate_a(layout: &ParamLayout, theta: &ParamVector, data: &Dataset, scheme: &Scheme) -> Result<DMatrix<f64>> {
    let rows = stacked_subject_scores(layout, theta, data, scheme)?;
    Ok(outer_mean(&rows, layout.len()))
}

pub fn outer_mean(rows: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(k, k);
    for r in rows {
        let v = DVector::from_column_slice(r);
        a += &v * v.transpose();
    }
    a / rows.len().max(1) as f64
}

/// Central-difference Jacobian of `f` at `x`, step h = `rel`·max(1, |xₖ|),
/// cross-checked against step 2h.
pub fn numeric_jacobian<F>(mut f: F, x: &[f64], rel: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut cols_h = Vec::with_capacity(n);
    let mut cols_2h = Vec::with_capacity(n);
    let mut m = 0;
    for k in 0..n {
        let h = rel * x[k].abs().max(1.0);
        let mut diff = |step: f64| -> Result<DVector<f64>> {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[k] += step;
            dn[k] -= step;
            let a = DVector::from_vec(f(&up)?);
            let b = DVector::from_vec(f(&dn)?);
            Ok((a - b) / (2.0 * step))
        };
        let c1 = diff(h)?;
        let c2 = diff(2.0 * h)?;
        m = c1.len();
        cols_h.push(c1);
        cols_2h.push(c2);
    }
    let jac = DMatrix::from_fn(m, n, |i, k| cols_h[k][i]);
    let scale = cols_h.iter().chain(&cols_2h).map(|c| c.norm()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let d = (&cols_h[k] - &cols_2h[k]).norm();
        let base = cols_h[k].norm().max(cols_2h[k].norm()).max(1e-6 * scale);
        if base > 0.0 {
            worst = worst.max(d / base);
        }
    }
    if worst > 1e-3 {
        return Err(Error::NumericJacobianFailure { rel_err: worst });
    }
    Ok(jac)
}

/// B̂ = Σ∂Sᵢ/∂θᵀ/N by central differences on the constrained scale.
pub fn estimate_b(layout: &ParamLayout, theta: &ParamVector, data: &Dataset, scheme: &Scheme) -> Result<DMatrix<f64>> {
    let x = theta.pack();
    let nobs = data.len().max(1) as f64;
    let jac = numeric_jacobian(
        |v| stacked_sum(layout, &ParamVector::unpack(layout, v)?, data, scheme),
        &x,
        1e-6,
    )?;
    Ok(jac / nobs)
}

/// A and B with their block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub n_subjects: usize,
}

impl SandwichParts {
    /// Assemble A and B at θ̂. The A₁₃ and B₁₂ blocks have expectation zero
    /// (outcome residuals are mean-zero given the surrogates) and are set to
    /// zero, which makes the full and block variance formulas coincide.
    pub fn estimate(layout: &ParamLayout, theta: &ParamVector, data: &Dataset, scheme: &Scheme) -> Result<Self> {
        let mut a = estimate_a(layout, theta, data, scheme)?;
        let mut b = estimate_b(layout, theta, data, scheme)?;
        let (n1, n2, n3) = (layout.n1, layout.n2, layout.n3);
        for i in 0..n1 {
            for j in 0..n3 {
                a[(i, n1 + n2 + j)] = 0.0;
                a[(n1 + n2 + j, i)] = 0.0;
            }
            for j in 0..n2 {
                b[(i, n1 + j)] = 0.0;
            }
        }
        Ok(Self {
            a,
            b,
            n1,
            n2,
            n3,
            n_subjects: data.len(),
        })
    }

    fn block(m: &DMatrix<f64>, r: (usize, usize), c: (usize, usize)) -> DMatrix<f64> {
        m.view((r.0, c.0), (r.1, c.1)).into_owned()
    }

    pub fn a11(&self) -> DMatrix<f64> {
        Self::block(&self.a, (0, self.n1), (0, self.n1))
    }
    pub fn a33(&self) -> DMatrix<f64> {
        let o = self.n1 + self.n2;
        Self::block(&self.a, (o, self.n3), (o, self.n3))
    }
    pub fn b11(&self) -> DMatrix<f64> {
        Self::block(&self.b, (0, self.n1), (0, self.n1))
    }
    pub fn b13(&self) -> DMatrix<f64> {
        Self::block(&self.b, (0, self.n1), (self.n1 + self.n2, self.n3))
    }
    pub fn b33(&self) -> DMatrix<f64> {
        let o = self.n1 + self.n2;
        Self::block(&self.b, (o, self.n3), (o, self.n3))
    }
}

/// Sandwich covariance of θ̂ with the θ₁ decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichVar {
    /// B⁻¹AB⁻ᵀ/N for all parameters.
    pub cov: DMatrix<f64>,
    /// B₁₁⁻¹A₁₁B₁₁⁻ᵀ/N.
    pub naive: DMatrix<f64>,
    /// B₁₁⁻¹B₁₃V₃₃B₁₃ᵀB₁₁⁻ᵀ/N.
    pub correction: DMatrix<f64>,
}

impl SandwichVar {
    /// naive + correction.
    pub fn theta1_block(&self) -> DMatrix<f64> {
        &self.naive + &self.correction
    }

    /// Largest relative discrepancy between the full-matrix and block forms for var(θ̂₁).
    pub fn block_discrepancy(&self) -> f64 {
        let n1 = self.naive.nrows();
        let full = self.cov.view((0, 0), (n1, n1)).into_owned();
        let block = self.theta1_block();
        let scale = full.abs().max().max(f64::MIN_POSITIVE);
        (full - block).abs().max() / scale
    }
}

pub fn sandwich_var(parts: &SandwichParts) -> Result<SandwichVar> {
    let n = parts.n_subjects.max(1) as f64;
    let b_inv = equilibrated_inverse(&parts.b, "estimating-equation Jacobian")?;
    let mut cov = &b_inv * &parts.a * b_inv.transpose() / n;
    crate::linalg::symmetrize(&mut cov);
    let b11_inv = equilibrated_inverse(&parts.b11(), "B11")?;
    let mut naive = &b11_inv * parts.a11() * b11_inv.transpose() / n;
    crate::linalg::symmetrize(&mut naive);
    let correction = if parts.n3 > 0 {
        let b33_inv = equilibrated_inverse(&parts.b33(), "B33")?;
        let v33 = &b33_inv * parts.a33() * b33_inv.transpose();
        let m = &b11_inv * parts.b13();
        let mut c = &m * v33 * m.transpose() / n;
        crate::linalg::symmetrize(&mut c);
        c
    } else {
        DMatrix::zeros(parts.n1, parts.n1)
    };
    Ok(SandwichVar { cov, naive, correction })
}

/// One Wald row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    /// 2Φ(−|z|)
    pub p_two_sided: Option<f64>,
    /// Φ(−|z|)
    pub p_one_sided: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

pub fn wald_row(name: &str, estimate: f64, variance: Option<f64>) -> WaldRow {
    let se = variance.filter(|v| v.is_finite() && *v > 0.0).map(f64::sqrt);
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let z = se.map(|s| estimate / s);
    WaldRow {
        name: name.to_string(),
        estimate,
        se,
        z,
        p_two_sided: z.map(|z| (2.0 * std.cdf(-z.abs())).min(1.0)),
        p_one_sided: z.map(|z| std.cdf(-z.abs())),
        ci_low: se.map(|s| estimate - Z975 * s),
        ci_high: se.map(|s| estimate + Z975 * s),
    }
}

/// Wald rows for every parameter; `cov = None` yields rows without inference.
pub fn wald_report(names: &[String], estimates: &[f64], cov: Option<&DMatrix<f64>>) -> Vec<WaldRow> {
    names
        .iter()
        .zip(estimates)
        .enumerate()
        .map(|(k, (n, &e))| wald_row(n, e, cov.map(|c| c[(k, k)])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_examples() {
        let r = wald_row("b", 0.0, Some(1.0));
        assert_eq!(r.z, Some(0.0));
        assert!((r.p_two_sided.unwrap() - 1.0).abs() < 1e-15);

        let r = wald_row("b", 1.96, Some(1.0));
        assert!((r.p_two_sided.unwrap() - 0.05).abs() < 1e-4);
        assert!(r.ci_low.unwrap().abs() < 1e-4 && (r.ci_high.unwrap() - 3.92).abs() < 1e-4);

        let r = wald_row("b", -0.9941, Some(0.5598 * 0.5598));
        assert!((r.p_two_sided.unwrap() - 0.0757).abs() < 5e-4);
        assert!((r.p_one_sided.unwrap() - 0.038).abs() < 5e-4);
    }

    #[test]
    fn missing_variance_gives_no_inference() {
        let r = wald_row("b", 1.0, None);
        assert!(r.se.is_none() && r.p_two_sided.is_none() && r.ci_low.is_none());
    }

    #[test]
    fn linear_system_jacobian() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let f = |x: &[f64]| Ok((&m * DVector::from_column_slice(x)).as_slice().to_vec());
        let j = numeric_jacobian(f, &[0.3, -2.0, 10.0], 1e-6).unwrap();
        assert!((j - &m).abs().max() < 1e-6);
    }

    #[test]
    fn inconsistent_steps_are_flagged() {
        // a kink inside the 2h stencil but not the h one
        let f = |x: &[f64]| Ok(vec![if x[0] - 1.0 > 1.5e-6 { 1e3 * (x[0] - 1.0) } else { 0.0 }]);
        assert!(matches!(
            numeric_jacobian(f, &[1.0], 1e-6),
            Err(Error::NumericJacobianFailure { .. })
        ));
    }
}
