//! Parametric covariance structures used for the outcome residuals (Ω_ε)
//! and the surrogate measurement errors (Ω_δ).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Covariance structure family.
///
/// Parameter slots per kind, for dimension `n`:
///
/// | kind | parameters |
/// |---|---|
/// | `Independence` | `σ²` |
/// | `Diagonal` | `σ²₁ … σ²ₙ` |
/// | `Cs` | `σ², σ_w²` giving `σ²I + σ_w²11ᵀ` (σ_w² may be negative while PD) |
/// | `Csh` | `σ₁ … σₙ, ρ` with off-diagonals `ρσⱼσₖ` |
/// | `Ar1` | `σ², ρ` with entries `σ²ρ^|j−k|` |
/// | `Har1` | `σ₁ … σₙ, ρ` with entries `σⱼσₖρ^|j−k|` |
/// | `Unstructured` | lower triangle of the matrix, row-major |
/// | `DiagAr1Blocks` | `σ²₁ … σ²ₙ`, then one `ρ` per group |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStructure {
    Independence,
    Diagonal,
    Cs,
    Csh,
    Ar1,
    Har1,
    Unstructured,
    /// Diagonal variances with AR(1) correlation inside each ordered group.
    #[serde(rename = "diagonal+ar1")]
    DiagAr1Blocks { groups: Vec<Vec<usize>> },
}

/// Index of entry `(i, j)`, `i ≥ j`, in a row-major lower triangle.
#[inline]
pub fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

impl CovStructure {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Self::Independence,
            "diagonal" => Self::Diagonal,
            "cs" | "exchangeable" => Self::Cs,
            "csh" => Self::Csh,
            "ar1" => Self::Ar1,
            "har1" => Self::Har1,
            "unstructured" | "un" => Self::Unstructured,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Independence => "independence",
            Self::Diagonal => "diagonal",
            Self::Cs => "cs",
            Self::Csh => "csh",
            Self::Ar1 => "ar1",
            Self::Har1 => "har1",
            Self::Unstructured => "unstructured",
            Self::DiagAr1Blocks { .. } => "diagonal+ar1",
        }
    }

    pub fn n_params(&self, n: usize) -> usize {
        match self {
            Self::Independence => 1,
            Self::Diagonal => n,
            Self::Cs | Self::Ar1 => 2,
            Self::Csh | Self::Har1 => n + 1,
            Self::Unstructured => tri_len(n),
            Self::DiagAr1Blocks { groups } => n + groups.len(),
        }
    }

    pub fn param_names(&self, n: usize) -> Vec<String> {
        match self {
            Self::Independence => vec!["sigma2".into()],
            Self::Diagonal => (1..=n).map(|j| format!("sigma2[{j}]")).collect(),
            Self::Cs => vec!["sigma2".into(), "sigma2_w".into()],
            Self::Ar1 => vec!["sigma2".into(), "rho".into()],
            Self::Csh | Self::Har1 => (1..=n)
                .map(|j| format!("sigma[{j}]"))
                .chain(std::iter::once("rho".to_string()))
                .collect(),
            Self::Unstructured => {
                let mut v = Vec::new();
                for i in 0..n {
                    for j in 0..=i {
                        v.push(format!("omega[{},{}]", i + 1, j + 1));
                    }
                }
                v
            }
            Self::DiagAr1Blocks { groups } => (1..=n)
                .map(|j| format!("sigma2[{j}]"))
                .chain((1..=groups.len()).map(|g| format!("rho[{g}]")))
                .collect(),
        }
    }

    /// True when the matrix is a linear function of the parameters.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Self::Independence | Self::Diagonal | Self::Cs | Self::Unstructured
        )
    }

    fn csh_rho_lower(n: usize) -> f64 {
        if n >= 2 {
            -1.0 / (n as f64 - 1.0)
        } else {
            -1.0
        }
    }

    /// Admissibility of constrained parameter values.
    pub fn check(&self, params: &[f64], n: usize) -> Result<()> {
        let expect = self.n_params(n);
        if params.len() != expect {
            return Err(Error::Dimension(format!(
                "{} structure of size {n} takes {expect} parameters, got {}",
                self.name(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadParam(format!("non-finite {} parameter", self.name())));
        }
        let positive = |v: f64, what: &str| {
            if v > 0.0 {
                Ok(())
            } else {
                Err(Error::BadParam(format!("{what} must be > 0, got {v}")))
            }
        };
        let corr = |v: f64, lo: f64| {
            if v > lo && v < 1.0 {
                Ok(())
            } else {
                Err(Error::BadParam(format!("correlation {v} outside ({lo}, 1)")))
            }
        };
        match self {
            Self::Independence | Self::Diagonal => {
                for &v in params {
                    positive(v, "variance")?;
                }
            }
            Self::Cs => {
                positive(params[0], "sigma2")?;
                // Positive definite for every leading block: σ² + nσ_w² > 0.
                let floor = -params[0] / n.max(1) as f64;
                if !(params[1] > floor) {
                    return Err(Error::BadParam(format!(
                        "sigma2_w must exceed -sigma2/n = {floor}, got {}",
                        params[1]
                    )));
                }
            }
            Self::Ar1 => {
                positive(params[0], "sigma2")?;
                corr(params[1], -1.0)?;
            }
            Self::Csh => {
                for &v in &params[..n] {
                    positive(v, "sigma")?;
                }
                corr(params[n], Self::csh_rho_lower(n))?;
            }
            Self::Har1 => {
                for &v in &params[..n] {
                    positive(v, "sigma")?;
                }
                corr(params[n], -1.0)?;
            }
            Self::Unstructured => {
                let m = unpack_tri(params, n);
                if n > 0 && m.cholesky().is_none() {
                    return Err(Error::BadParam(
                        "unstructured covariance is not positive definite".into(),
                    ));
                }
            }
            Self::DiagAr1Blocks { groups } => {
                for &v in &params[..n] {
                    if v < 0.0 {
                        return Err(Error::BadParam(format!("variance must be >= 0, got {v}")));
                    }
                }
                for &r in &params[n..] {
                    corr(r, -1.0)?;
                }
                let mut seen = vec![false; n];
                for g in groups {
                    for &i in g {
                        if i >= n || seen[i] {
                            return Err(Error::Dimension(format!(
                                "AR(1) groups must be disjoint indices below {n}"
                            )));
                        }
                        seen[i] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Build the `n × n` matrix. Generic so derivatives can flow through it.
    pub fn build<T: Scalar>(&self, params: &[T], n: usize) -> Result<DMatrix<T>> {
        let values: Vec<f64> = params.iter().map(|v| v.value()).collect();
        self.check(&values, n)?;
        Ok(self.build_unchecked(params, n))
    }

    pub(crate) fn build_unchecked<T: Scalar>(&self, p: &[T], n: usize) -> DMatrix<T> {
        match self {
            Self::Independence => DMatrix::from_diagonal_element(n, n, p[0]),
            Self::Diagonal => DMatrix::from_fn(n, n, |i, j| if i == j { p[i] } else { T::zero() }),
            Self::Cs => DMatrix::from_fn(n, n, |i, j| if i == j { p[0] + p[1] } else { p[1] }),
            Self::Ar1 => DMatrix::from_fn(n, n, |i, j| p[0] * ipow(p[1], i.abs_diff(j))),
            Self::Csh => {
                DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        p[i] * p[i]
                    } else {
                        p[i] * p[j] * p[n]
                    }
                })
            }
            Self::Har1 => DMatrix::from_fn(n, n, |i, j| p[i] * p[j] * ipow(p[n], i.abs_diff(j))),
            Self::Unstructured => unpack_tri(p, n),
            Self::DiagAr1Blocks { groups } => {
                let mut m = DMatrix::from_fn(n, n, |i, j| if i == j { p[i] } else { T::zero() });
                for (g, members) in groups.iter().enumerate() {
                    let rho = p[n + g];
                    for (a, &i) in members.iter().enumerate() {
                        for (b, &j) in members.iter().enumerate() {
                            if a != b {
                                let v = (p[i] * p[j]).sqrt() * ipow(rho, a.abs_diff(b));
                                m[(i, j)] = v;
                            }
                        }
                    }
                }
                m
            }
        }
    }

    /// Elementwise derivative matrices `∂Ω/∂θₖ`, one per parameter.
    pub fn derivatives(&self, p: &[f64], n: usize) -> Vec<DMatrix<f64>> {
        let zero = || DMatrix::<f64>::zeros(n, n);
        let dpow = |r: f64, d: usize| if d == 0 { 0.0 } else { d as f64 * r.powi(d as i32 - 1) };
        match self {
            Self::Independence => vec![DMatrix::identity(n, n)],
            Self::Diagonal => (0..n)
                .map(|k| {
                    let mut m = zero();
                    m[(k, k)] = 1.0;
                    m
                })
                .collect(),
            Self::Cs => vec![DMatrix::identity(n, n), DMatrix::from_element(n, n, 1.0)],
            Self::Ar1 => vec![
                DMatrix::from_fn(n, n, |i, j| p[1].powi(i.abs_diff(j) as i32)),
                DMatrix::from_fn(n, n, |i, j| p[0] * dpow(p[1], i.abs_diff(j))),
            ],
            Self::Csh | Self::Har1 => {
                let rho = p[n];
                let corr = |i: usize, j: usize| match self {
                    Self::Csh => {
                        if i == j {
                            1.0
                        } else {
                            rho
                        }
                    }
                    _ => rho.powi(i.abs_diff(j) as i32),
                };
                let dcorr = |i: usize, j: usize| match self {
                    Self::Csh => {
                        if i == j {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    _ => dpow(rho, i.abs_diff(j)),
                };
                let mut out: Vec<DMatrix<f64>> = (0..n)
                    .map(|k| {
                        let mut m = zero();
                        for j in 0..n {
                            if j == k {
                                m[(k, k)] = 2.0 * p[k];
                            } else {
                                let v = p[j] * corr(k, j);
                                m[(k, j)] = v;
                                m[(j, k)] = v;
                            }
                        }
                        m
                    })
                    .collect();
                out.push(DMatrix::from_fn(n, n, |i, j| p[i] * p[j] * dcorr(i, j)));
                out
            }
            Self::Unstructured => {
                let mut out = Vec::with_capacity(tri_len(n));
                for i in 0..n {
                    for j in 0..=i {
                        let mut m = zero();
                        m[(i, j)] = 1.0;
                        m[(j, i)] = 1.0;
                        out.push(m);
                    }
                }
                out
            }
            Self::DiagAr1Blocks { groups } => {
                let mut out: Vec<DMatrix<f64>> = (0..n)
                    .map(|k| {
                        let mut m = zero();
                        m[(k, k)] = 1.0;
                        m
                    })
                    .collect();
                for (g, members) in groups.iter().enumerate() {
                    let rho = p[n + g];
                    let mut dr = zero();
                    for (a, &i) in members.iter().enumerate() {
                        for (b, &j) in members.iter().enumerate() {
                            if a == b {
                                continue;
                            }
                            let lag = a.abs_diff(b);
                            let s = (p[i] * p[j]).sqrt();
                            dr[(i, j)] = s * dpow(rho, lag);
                            // ∂√(σ²ᵢσ²ⱼ)/∂σ²ᵢ = σⱼ / (2σᵢ)
                            out[i][(i, j)] += 0.5 * (p[j] / p[i]).sqrt() * rho.powi(lag as i32);
                            out[i][(j, i)] = out[i][(i, j)];
                        }
                    }
                    out.push(dr);
                }
                out
            }
        }
    }

    /// Matrix plus its parameter derivatives.
    pub fn build_cov(&self, params: &[f64], n: usize) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let m = self.build(params, n)?;
        Ok((m, self.derivatives(params, n)))
    }

    /// Map admissible parameters to an unconstrained real vector.
    pub fn to_unconstrained(&self, p: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(p, n)?;
        let log = |v: f64| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::BadParam(format!("boundary value {v} has no unconstrained image")))
            }
        };
        Ok(match self {
            Self::Independence | Self::Diagonal => p.iter().map(|&v| log(v)).collect::<Result<_>>()?,
            Self::Cs => vec![log(p[0])?, log(p[1] / p[0] + 1.0 / n.max(1) as f64)?],
            Self::Ar1 => vec![log(p[0])?, p[1].atanh()],
            Self::Har1 => {
                let mut z = p[..n].iter().map(|&v| log(v)).collect::<Result<Vec<_>>>()?;
                z.push(p[n].atanh());
                z
            }
            Self::Csh => {
                let mut z = p[..n].iter().map(|&v| log(v)).collect::<Result<Vec<_>>>()?;
                z.push(scaled_atanh(p[n], Self::csh_rho_lower(n)));
                z
            }
            Self::Unstructured => chol_to_unconstrained(p, n)?,
            Self::DiagAr1Blocks { .. } => {
                let mut z = p[..n].iter().map(|&v| log(v)).collect::<Result<Vec<_>>>()?;
                z.extend(p[n..].iter().map(|r| r.atanh()));
                z
            }
        })
    }

    pub fn from_unconstrained<T: Scalar>(&self, z: &[T], n: usize) -> Vec<T> {
        match self {
            Self::Independence | Self::Diagonal => z.iter().map(|v| v.exp()).collect(),
            Self::Cs => {
                let s2 = z[0].exp();
                vec![s2, s2 * (z[1].exp() - T::lit(1.0 / n.max(1) as f64))]
            }
            Self::Ar1 => vec![z[0].exp(), z[1].tanh()],
            Self::Har1 => {
                let mut p: Vec<T> = z[..n].iter().map(|v| v.exp()).collect();
                p.push(z[n].tanh());
                p
            }
            Self::Csh => {
                let mut p: Vec<T> = z[..n].iter().map(|v| v.exp()).collect();
                p.push(scaled_tanh(z[n], Self::csh_rho_lower(n)));
                p
            }
            Self::Unstructured => chol_from_unconstrained(z, n),
            Self::DiagAr1Blocks { .. } => {
                let mut p: Vec<T> = z[..n].iter().map(|v| v.exp()).collect();
                p.extend(z[n..].iter().map(|v| v.tanh()));
                p
            }
        }
    }

    /// An admissible starting point with marginal variance `var`.
    pub fn start(&self, n: usize, var: f64) -> Vec<f64> {
        let var = if var.is_finite() && var > 0.0 { var } else { 1.0 };
        let sd = var.sqrt();
        match self {
            Self::Independence => vec![var],
            Self::Diagonal => vec![var; n],
            Self::Cs => vec![0.7 * var, 0.3 * var],
            Self::Ar1 => vec![var, 0.3],
            Self::Csh | Self::Har1 => {
                let mut p = vec![sd; n];
                p.push(0.3);
                p
            }
            Self::Unstructured => {
                let mut p = vec![0.0; tri_len(n)];
                for i in 0..n {
                    p[tri_index(i, i)] = var;
                }
                p
            }
            Self::DiagAr1Blocks { groups } => {
                let mut p = vec![var; n];
                p.extend(std::iter::repeat_n(0.0, groups.len()));
                p
            }
        }
    }
}

fn ipow<T: Scalar>(x: T, k: usize) -> T {
    let mut r = T::one();
    for _ in 0..k {
        r *= x;
    }
    r
}

fn scaled_atanh(rho: f64, lo: f64) -> f64 {
    // (lo, 1) → (−1, 1) → ℝ
    (2.0 * (rho - lo) / (1.0 - lo) - 1.0).atanh()
}

fn scaled_tanh<T: Scalar>(z: T, lo: f64) -> T {
    T::lit(lo) + (z.tanh() + T::one()) * T::lit(0.5 * (1.0 - lo))
}

/// Symmetric matrix from its row-major lower triangle.
pub fn unpack_tri<T: Scalar>(p: &[T], n: usize) -> DMatrix<T> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = p[tri_index(i, j)];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn pack_tri<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(tri_len(n));
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Log-diagonal Cholesky coordinates of a positive-definite matrix given by
/// its lower triangle.
pub fn chol_to_unconstrained(p: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = unpack_tri(p, n);
    let l = m
        .cholesky()
        .ok_or_else(|| Error::BadParam("covariance block is not positive definite".into()))?
        .l();
    let mut z = Vec::with_capacity(tri_len(n));
    for i in 0..n {
        for j in 0..=i {
            z.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    Ok(z)
}

pub fn chol_from_unconstrained<T: Scalar>(z: &[T], n: usize) -> Vec<T> {
    let mut l = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = z[tri_index(i, j)];
            l[(i, j)] = if i == j { v.exp() } else { v };
        }
    }
    let m = &l * l.transpose();
    pack_tri(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_kinds() -> Vec<CovStructure> {
        vec![
            CovStructure::Independence,
            CovStructure::Diagonal,
            CovStructure::Cs,
            CovStructure::Csh,
            CovStructure::Ar1,
            CovStructure::Har1,
            CovStructure::Unstructured,
            CovStructure::DiagAr1Blocks {
                groups: vec![vec![0, 2], vec![1, 3]],
            },
        ]
    }

    const N: usize = 4;

    /// Admissible parameters from an arbitrary real vector.
    fn admissible(kind: &CovStructure, raw: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = raw[..kind.n_params(N)].iter().map(|v| v.clamp(-2.0, 2.0)).collect();
        kind.from_unconstrained(&z, N)
    }

    #[test]
    fn cs_examples() {
        let (m, d) = CovStructure::Cs.build_cov(&[1.0, 0.0], 2).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
        assert_eq!(d[0], DMatrix::identity(2, 2));
        assert_eq!(d[1], DMatrix::from_element(2, 2, 1.0));
        let m = CovStructure::Cs.build(&[0.5, 0.5], 2).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
    }

    #[test]
    fn har1_example() {
        let m = CovStructure::Har1.build(&[1.0, 2.0, 0.5], 2).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 4.0]));
    }

    #[test]
    fn bad_params_rejected() {
        assert!(matches!(CovStructure::Cs.build(&[0.0, 1.0], 3), Err(Error::BadParam(_))));
        assert!(matches!(CovStructure::Ar1.build(&[1.0, 1.0], 3), Err(Error::BadParam(_))));
        assert!(matches!(CovStructure::Har1.build(&[1.0, -1.0, 0.2], 2), Err(Error::BadParam(_))));
        assert!(matches!(
            CovStructure::Unstructured.build(&[1.0, 2.0, 1.0], 2),
            Err(Error::BadParam(_))
        ));
    }

    #[test]
    fn transform_fixed_points() {
        let z = CovStructure::Independence.to_unconstrained(&[1.0], 3).unwrap();
        assert_eq!(z, vec![0.0]);
        assert_eq!(CovStructure::Independence.from_unconstrained(&z, 3), vec![1.0]);
        let z = CovStructure::Ar1.to_unconstrained(&[1.0, 0.75], 3).unwrap();
        let back = CovStructure::Ar1.from_unconstrained(&z, 3);
        assert!((back[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_draws_are_symmetric_positive_definite() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for kind in all_kinds() {
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p = admissible(&kind, &raw);
                let m = kind.build(&p, N).unwrap();
                assert_eq!(m, m.transpose(), "{kind:?}");
                let (lo, _) = crate::linalg::eig_range(&m);
                assert!(lo > 0.0, "{kind:?} min eigenvalue {lo}");
            }
        }
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(raw in prop::collection::vec(-1.5f64..1.5, 16), k in 0usize..16) {
            for kind in all_kinds() {
                let p = admissible(&kind, &raw);
                let k = k % p.len();
                let d = kind.derivatives(&p, N);
                let h = 1e-6 * p[k].abs().max(1.0);
                let mut up = p.clone();
                let mut dn = p.clone();
                up[k] += h;
                dn[k] -= h;
                let (Ok(a), Ok(b)) = (kind.build(&up, N), kind.build(&dn, N)) else { continue };
                let fd = (a - b) / (2.0 * h);
                let err = (&fd - &d[k]).abs().max();
                let scale = d[k].abs().max().max(1.0);
                prop_assert!(err / scale < 1e-6, "{:?} param {} err {}", kind, k, err);
            }
        }

        #[test]
        fn unconstrained_round_trip(raw in prop::collection::vec(-2.0f64..2.0, 16)) {
            for kind in all_kinds() {
                let p = admissible(&kind, &raw);
                let z = kind.to_unconstrained(&p, N).unwrap();
                let back = kind.from_unconstrained(&z, N);
                for (a, b) in p.iter().zip(&back) {
                    prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn compound_symmetry_admits_negative_within_variance_while_pd() {
        let cs = CovStructure::Cs;
        assert!(cs.check(&[1.0, -0.2], 4).is_ok());
        assert!(cs.check(&[1.0, -0.25], 4).is_err());
        let z = cs.to_unconstrained(&[1.0, -0.2], 4).unwrap();
        let back: Vec<f64> = cs.from_unconstrained(&z, 4);
        assert!((back[0] - 1.0).abs() < 1e-14 && (back[1] + 0.2).abs() < 1e-14);
    }
}
