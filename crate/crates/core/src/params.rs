//! Parameter packing.
//!
//! The full parameter vector is θ = (θ₁, θ₂, θ₃):
//!
//! * θ₁ = (β₀, β, κ): β has one entry per outcome latent, κ one per Z covariate.
//! * θ₂: parameters of Ω_ε in the slot order of [`CovStructure`].
//! * θ₃: exposure-model parameters in declaration order: free entries of
//!   ν, Λ (row-major), K (row-major), α, Γ₁ (row-major), Γ₂ (row-major),
//!   then free Ω_δ variances, Ω_δ AR(1) correlations, and finally the lower
//!   triangles (row-major) of each Ψ block. Labeled free entries share one
//!   slot, placed at the label's first occurrence.
//!
//! Constrained values are the natural ones (variances, correlations,
//! covariance entries). The unconstrained map uses log for variances and
//! standard deviations, atanh for correlations and log-diagonal Cholesky
//! coordinates for unstructured blocks.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_dual::Dual64;
use serde::{Deserialize, Serialize};

use crate::cov::{chol_from_unconstrained, chol_to_unconstrained, tri_len, unpack_tri, CovStructure};
use crate::error::{Error, Result};
use crate::scalar::{seeded, tangent, Scalar};
use crate::spec::{Entry, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Fixed(f64),
    Param(usize),
}

impl Slot {
    #[inline]
    fn get<T: Scalar>(&self, theta3: &[T]) -> T {
        match *self {
            Slot::Fixed(v) => T::lit(v),
            Slot::Param(i) => theta3[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SegmentKind {
    Real,
    Positive,
    Correlation,
    Chol(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    start: usize,
    len: usize,
    kind: SegmentKind,
}

/// Which block of θ a flat index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Theta1,
    Theta2,
    Theta3,
}

/// Mapping between a [`ModelSpec`] and flat parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    n_beta: usize,
    outcome_latents: Vec<usize>,
    names: Vec<String>,
    outcome_cov: CovStructure,
    occasions: usize,
    p: usize,
    l: usize,
    r: usize,
    nu: Vec<Slot>,
    lambda: Vec<Vec<Slot>>,
    k: Vec<Vec<Slot>>,
    alpha: Vec<Slot>,
    gamma1: Vec<Vec<Slot>>,
    gamma2: Vec<Vec<Slot>>,
    delta_var: Vec<Slot>,
    delta_rho: Vec<usize>,
    delta_structure: CovStructure,
    psi_blocks: Vec<(Vec<usize>, usize)>,
    segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut names3: Vec<String> = Vec::new();
        let mut labels: HashMap<String, usize> = HashMap::new();
        let mut slot = |e: &Entry, name: String, names3: &mut Vec<String>| match e {
            Entry::Fixed(v) => Slot::Fixed(*v),
            Entry::Free(None) => {
                names3.push(name);
                Slot::Param(names3.len() - 1)
            }
            Entry::Free(Some(lab)) => {
                if let Some(&i) = labels.get(lab) {
                    Slot::Param(i)
                } else {
                    names3.push(lab.clone());
                    labels.insert(lab.clone(), names3.len() - 1);
                    Slot::Param(names3.len() - 1)
                }
            }
        };
        let sx = &spec.surrogate_names;
        let su = &spec.latent_names;
        let sw = &spec.w_names;
        let nu = spec
            .nu
            .iter()
            .enumerate()
            .map(|(j, e)| slot(e, format!("nu[{}]", sx[j]), &mut names3))
            .collect();
        let lambda = spec
            .lambda
            .iter()
            .enumerate()
            .map(|(j, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, e)| slot(e, format!("lambda[{},{}]", sx[j], su[k]), &mut names3))
                    .collect()
            })
            .collect();
        let k = spec
            .k
            .iter()
            .enumerate()
            .map(|(j, row)| {
                row.iter()
                    .enumerate()
                    .map(|(c, e)| slot(e, format!("K[{},{}]", sx[j], sw[c]), &mut names3))
                    .collect()
            })
            .collect();
        let alpha = spec
            .alpha
            .iter()
            .enumerate()
            .map(|(k, e)| slot(e, format!("alpha[{}]", su[k]), &mut names3))
            .collect();
        let gamma1 = spec
            .gamma1
            .iter()
            .enumerate()
            .map(|(a, row)| {
                row.iter()
                    .enumerate()
                    .map(|(b, e)| slot(e, format!("gamma1[{},{}]", su[a], su[b]), &mut names3))
                    .collect()
            })
            .collect();
        let gamma2 = spec
            .gamma2
            .iter()
            .enumerate()
            .map(|(a, row)| {
                row.iter()
                    .enumerate()
                    .map(|(c, e)| slot(e, format!("gamma2[{},{}]", su[a], sw[c]), &mut names3))
                    .collect()
            })
            .collect();
        let mut segments = vec![Segment {
            start: 0,
            len: names3.len(),
            kind: SegmentKind::Real,
        }];

        let start = names3.len();
        let delta_var: Vec<Slot> = spec
            .delta_cov
            .fixed_variances
            .iter()
            .enumerate()
            .map(|(j, fv)| match fv {
                Some(v) => Slot::Fixed(*v),
                None => {
                    names3.push(format!("delta_var[{}]", sx[j]));
                    Slot::Param(names3.len() - 1)
                }
            })
            .collect();
        segments.push(Segment {
            start,
            len: names3.len() - start,
            kind: SegmentKind::Positive,
        });
        let start = names3.len();
        let delta_rho: Vec<usize> = (0..spec.delta_cov.ar1_groups.len())
            .map(|g| {
                names3.push(format!("delta_rho[{}]", g + 1));
                names3.len() - 1
            })
            .collect();
        segments.push(Segment {
            start,
            len: delta_rho.len(),
            kind: SegmentKind::Correlation,
        });
        let mut psi_blocks = Vec::new();
        for block in spec.psi_cov.blocks(spec.l()) {
            let start = names3.len();
            for a in 0..block.len() {
                for b in 0..=a {
                    names3.push(format!("psi[{},{}]", su[block[a]], su[block[b]]));
                }
            }
            segments.push(Segment {
                start,
                len: tri_len(block.len()),
                kind: SegmentKind::Chol(block.len()),
            });
            psi_blocks.push((block, start));
        }
        segments.retain(|s| s.len > 0);

        let mut names = vec!["beta0".to_string()];
        names.extend(spec.outcome_latents.iter().map(|&k| format!("beta[{}]", su[k])));
        names.extend(spec.z_names.iter().map(|z| format!("kappa[{z}]")));
        let n1 = names.len();
        let n2 = spec.outcome_cov.n_params(spec.occasions);
        names.extend(spec.outcome_cov.param_names(spec.occasions));
        let n3 = names3.len();
        names.extend(names3);

        Self {
            n1,
            n2,
            n3,
            n_beta: spec.outcome_latents.len(),
            outcome_latents: spec.outcome_latents.clone(),
            names,
            outcome_cov: spec.outcome_cov.clone(),
            occasions: spec.occasions,
            p: spec.p(),
            l: spec.l(),
            r: spec.r(),
            nu,
            lambda,
            k,
            alpha,
            gamma1,
            gamma2,
            delta_var,
            delta_rho,
            delta_structure: spec.delta_cov.structure(),
            psi_blocks,
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.n1 + self.n2 + self.n3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn theta3_names(&self) -> &[String] {
        &self.names[self.n1 + self.n2..]
    }

    pub fn block_of(&self, idx: usize) -> Block {
        if idx < self.n1 {
            Block::Theta1
        } else if idx < self.n1 + self.n2 {
            Block::Theta2
        } else {
            Block::Theta3
        }
    }

    pub fn n_beta(&self) -> usize {
        self.n_beta
    }

    /// Latents entering the outcome mean, in β order.
    pub fn outcome_latents(&self) -> &[usize] {
        &self.outcome_latents
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn outcome_cov(&self) -> &CovStructure {
        &self.outcome_cov
    }

    pub fn occasions(&self) -> usize {
        self.occasions
    }

    /// Positions of the θ₃ slots that are error variances of surrogates.
    pub fn delta_var_slots(&self) -> &[Slot] {
        &self.delta_var
    }

    pub fn check_theta2(&self, theta2: &[f64]) -> Result<()> {
        self.outcome_cov.check(theta2, self.occasions)
    }

    pub fn theta3_to_unconstrained(&self, theta3: &[f64]) -> Result<Vec<f64>> {
        if theta3.len() != self.n3 {
            return Err(Error::Dimension(format!("theta3 has {} entries, expected {}", theta3.len(), self.n3)));
        }
        let mut z = theta3.to_vec();
        for s in &self.segments {
            let seg = &theta3[s.start..s.start + s.len];
            let out = &mut z[s.start..s.start + s.len];
            match s.kind {
                SegmentKind::Real => {}
                SegmentKind::Positive => {
                    for (o, &v) in out.iter_mut().zip(seg) {
                        if !(v > 0.0) {
                            return Err(Error::BadParam(format!("variance {v} must be > 0")));
                        }
                        *o = v.ln();
                    }
                }
                SegmentKind::Correlation => {
                    for (o, &v) in out.iter_mut().zip(seg) {
                        if !(v.abs() < 1.0) {
                            return Err(Error::BadParam(format!("correlation {v} outside (-1, 1)")));
                        }
                        *o = v.atanh();
                    }
                }
                SegmentKind::Chol(n) => {
                    out.copy_from_slice(&chol_to_unconstrained(seg, n)?);
                }
            }
        }
        Ok(z)
    }

    pub fn theta3_from_unconstrained<T: Scalar>(&self, z: &[T]) -> Vec<T> {
        let mut theta = z.to_vec();
        for s in &self.segments {
            let seg = &z[s.start..s.start + s.len];
            let out = &mut theta[s.start..s.start + s.len];
            match s.kind {
                SegmentKind::Real => {}
                SegmentKind::Positive => {
                    for (o, v) in out.iter_mut().zip(seg) {
                        *o = v.exp();
                    }
                }
                SegmentKind::Correlation => {
                    for (o, v) in out.iter_mut().zip(seg) {
                        *o = v.tanh();
                    }
                }
                SegmentKind::Chol(n) => out.copy_from_slice(&chol_from_unconstrained(seg, n)),
            }
        }
        theta
    }

    pub fn to_unconstrained(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        self.check_lengths(theta)?;
        let mut z = theta.theta1.clone();
        z.extend(self.outcome_cov.to_unconstrained(&theta.theta2, self.occasions)?);
        z.extend(self.theta3_to_unconstrained(&theta.theta3)?);
        Ok(z)
    }

    pub fn from_unconstrained<T: Scalar>(&self, z: &[T]) -> ParamVector<T> {
        let (a, rest) = z.split_at(self.n1);
        let (b, c) = rest.split_at(self.n2);
        ParamVector {
            theta1: a.to_vec(),
            theta2: self.outcome_cov.from_unconstrained(b, self.occasions),
            theta3: self.theta3_from_unconstrained(c),
        }
    }

    /// `∂θ/∂z` of the full unconstrained map at `z`.
    pub fn transform_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let zd = seeded(z, Some(k));
            let t = self.from_unconstrained::<Dual64>(&zd).pack();
            for (i, v) in t.into_iter().enumerate() {
                jac[(i, k)] = tangent(v);
            }
        }
        jac
    }

    /// `∂θ₃/∂z₃` of the exposure-parameter map.
    pub fn theta3_transform_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for s in &self.segments {
            match s.kind {
                SegmentKind::Real => {
                    for i in s.start..s.start + s.len {
                        jac[(i, i)] = 1.0;
                    }
                }
                SegmentKind::Positive => {
                    for i in s.start..s.start + s.len {
                        jac[(i, i)] = z[i].exp();
                    }
                }
                SegmentKind::Correlation => {
                    for i in s.start..s.start + s.len {
                        jac[(i, i)] = 1.0 - z[i].tanh().powi(2);
                    }
                }
                SegmentKind::Chol(m) => {
                    let seg = &z[s.start..s.start + s.len];
                    for k in 0..s.len {
                        let d = seeded(seg, Some(k));
                        let out = chol_from_unconstrained(&d, m);
                        for (i, v) in out.into_iter().enumerate() {
                            jac[(s.start + i, s.start + k)] = tangent(v);
                        }
                    }
                }
            }
        }
        jac
    }

    fn check_lengths<T>(&self, theta: &ParamVector<T>) -> Result<()> {
        if theta.theta1.len() != self.n1 || theta.theta2.len() != self.n2 || theta.theta3.len() != self.n3 {
            return Err(Error::Dimension(format!(
                "parameter blocks ({}, {}, {}) do not match layout ({}, {}, {})",
                theta.theta1.len(),
                theta.theta2.len(),
                theta.theta3.len(),
                self.n1,
                self.n2,
                self.n3
            )));
        }
        Ok(())
    }

    /// Build θ₃ by reading the free slots out of explicit matrices
    /// (the first occurrence wins for shared labels).
    pub fn theta3_from_matrices(&self, m: &ExposureParams<f64>) -> Vec<f64> {
        let mut theta = vec![f64::NAN; self.n3];
        let mut put = |s: &Slot, v: f64| {
            if let Slot::Param(i) = *s {
                if theta[i].is_nan() {
                    theta[i] = v;
                }
            }
        };
        for j in 0..self.p {
            put(&self.nu[j], m.nu[j]);
            for k in 0..self.l {
                put(&self.lambda[j][k], m.lambda[(j, k)]);
            }
            for c in 0..self.r {
                put(&self.k[j][c], m.k[(j, c)]);
            }
            put(&self.delta_var[j], m.omega_delta[(j, j)]);
        }
        for a in 0..self.l {
            put(&self.alpha[a], m.alpha[a]);
            for b in 0..self.l {
                put(&self.gamma1[a][b], m.gamma1[(a, b)]);
            }
            for c in 0..self.r {
                put(&self.gamma2[a][c], m.gamma2[(a, c)]);
            }
        }
        if let CovStructure::DiagAr1Blocks { groups } = &self.delta_structure {
            for (g, members) in groups.iter().enumerate() {
                let (i, j) = (members[0], members[1]);
                let denom = (m.omega_delta[(i, i)] * m.omega_delta[(j, j)]).sqrt();
                theta[self.delta_rho[g]] = if denom > 0.0 { m.omega_delta[(i, j)] / denom } else { 0.0 };
            }
        }
        for (block, start) in &self.psi_blocks {
            let mut idx = *start;
            for a in 0..block.len() {
                for b in 0..=a {
                    theta[idx] = m.psi[(block[a], block[b])];
                    idx += 1;
                }
            }
        }
        theta
    }
}

/// Packed parameters, split into the three blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T = f64> {
    pub theta1: Vec<T>,
    pub theta2: Vec<T>,
    pub theta3: Vec<T>,
}

impl<T: Copy> ParamVector<T> {
    pub fn pack(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.theta1.len() + self.theta2.len() + self.theta3.len());
        v.extend_from_slice(&self.theta1);
        v.extend_from_slice(&self.theta2);
        v.extend_from_slice(&self.theta3);
        v
    }

    pub fn unpack(layout: &ParamLayout, values: &[T]) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        let (a, rest) = values.split_at(layout.n1);
        let (b, c) = rest.split_at(layout.n2);
        Ok(Self {
            theta1: a.to_vec(),
            theta2: b.to_vec(),
            theta3: c.to_vec(),
        })
    }

    pub fn beta0(&self) -> T {
        self.theta1[0]
    }
}

/// Outcome-mean coefficients unpacked from θ₁.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeCoefs<T> {
    pub beta0: T,
    pub beta: Vec<T>,
    pub kappa: Vec<T>,
}

impl<T: Copy> OutcomeCoefs<T> {
    pub fn from_theta1(theta1: &[T], n_beta: usize) -> Self {
        Self {
            beta0: theta1[0],
            beta: theta1[1..1 + n_beta].to_vec(),
            kappa: theta1[1 + n_beta..].to_vec(),
        }
    }
}

/// Exposure-model matrices (ν, Λ, K, α, Γ₁, Γ₂, Ω_δ, Ψ).
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureParams<T: Scalar> {
    pub nu: DVector<T>,
    pub lambda: DMatrix<T>,
    pub k: DMatrix<T>,
    pub alpha: DVector<T>,
    pub gamma1: DMatrix<T>,
    pub gamma2: DMatrix<T>,
    pub omega_delta: DMatrix<T>,
    pub psi: DMatrix<T>,
    /// Ω_δ entries that are structurally zero (fixed zero variances).
    pub delta_zero: Vec<bool>,
}

impl<T: Scalar> ExposureParams<T> {
    pub fn from_theta3(layout: &ParamLayout, theta3: &[T]) -> Result<Self> {
        if theta3.len() != layout.n3 {
            return Err(Error::Dimension(format!(
                "theta3 has {} entries, expected {}",
                theta3.len(),
                layout.n3
            )));
        }
        let (p, l, r) = (layout.p, layout.l, layout.r);
        let nu = DVector::from_fn(p, |j, _| layout.nu[j].get(theta3));
        let lambda = DMatrix::from_fn(p, l, |j, k| layout.lambda[j][k].get(theta3));
        let k = DMatrix::from_fn(p, r, |j, c| layout.k[j][c].get(theta3));
        let alpha = DVector::from_fn(l, |a, _| layout.alpha[a].get(theta3));
        let gamma1 = DMatrix::from_fn(l, l, |a, b| layout.gamma1[a][b].get(theta3));
        let gamma2 = DMatrix::from_fn(l, r, |a, c| layout.gamma2[a][c].get(theta3));

        let mut dparams: Vec<T> = layout.delta_var.iter().map(|s| s.get(theta3)).collect();
        dparams.extend(layout.delta_rho.iter().map(|&i| theta3[i]));
        let omega_delta = layout.delta_structure.build(&dparams, p)?;
        let delta_zero = layout
            .delta_var
            .iter()
            .map(|s| matches!(s, Slot::Fixed(v) if *v == 0.0))
            .collect();

        let mut psi = DMatrix::zeros(l, l);
        for (block, start) in &layout.psi_blocks {
            let n = block.len();
            let m = unpack_tri(&theta3[*start..*start + tri_len(n)], n);
            let values = m.map(|v| v.value());
            if values.cholesky().is_none() {
                return Err(Error::BadParam("latent covariance block is not positive definite".into()));
            }
            for a in 0..n {
                for b in 0..n {
                    psi[(block[a], block[b])] = m[(a, b)];
                }
            }
        }
        Ok(Self {
            nu,
            lambda,
            k,
            alpha,
            gamma1,
            gamma2,
            omega_delta,
            psi,
            delta_zero,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::PsiCov;
    use proptest::prelude::*;

    fn two_latent_spec() -> ModelSpec {
        let mut s = ModelSpec::single_latent(4, 1, 3, CovStructure::Har1);
        s.latent_names = vec!["U1".into(), "U2".into()];
        s.lambda = vec![
            vec![Entry::Fixed(1.0), Entry::ZERO],
            vec![Entry::free(), Entry::ZERO],
            vec![Entry::ZERO, Entry::Fixed(1.0)],
            vec![Entry::ZERO, Entry::free()],
        ];
        s.nu = vec![Entry::ZERO, Entry::free(), Entry::ZERO, Entry::free()];
        s.w_names = vec!["w".into()];
        s.k = vec![vec![Entry::ZERO], vec![Entry::free()], vec![Entry::ZERO], vec![Entry::ZERO]];
        s.alpha = vec![Entry::free(), Entry::free()];
        s.gamma1 = vec![vec![Entry::ZERO, Entry::free()], vec![Entry::ZERO, Entry::ZERO]];
        s.gamma2 = vec![vec![Entry::Free(Some("g".into()))], vec![Entry::Free(Some("g".into()))]];
        s.delta_cov.ar1_groups = vec![vec![1, 3]];
        s.delta_cov.fixed_variances[0] = Some(0.5);
        s.psi_cov = PsiCov::Unstructured;
        s.outcome_latents = vec![0, 1];
        s
    }

    #[test]
    fn layout_counts_and_names() {
        let layout = ParamLayout::new(&two_latent_spec());
        assert_eq!(layout.n1, 1 + 2 + 1);
        assert_eq!(layout.n2, 4);
        // nu 2, lambda 2, K 1, alpha 2, gamma1 1, gamma2 1 (shared), delta var 3, rho 1, psi 3
        assert_eq!(layout.n3, 16);
        assert_eq!(layout.theta3_names()[0], "nu[x2]");
        assert!(layout.theta3_names().contains(&"g".to_string()));
        assert_eq!(layout.names().len(), layout.len());
    }

    #[test]
    fn shared_label_sets_both_entries() {
        let spec = two_latent_spec();
        let layout = ParamLayout::new(&spec);
        let mut theta3 = vec![0.1; layout.n3];
        let g = layout.theta3_names().iter().position(|n| n == "g").unwrap();
        theta3[g] = 0.7;
        let z = layout.theta3_from_unconstrained(&vec![0.0; layout.n3]);
        theta3[layout.n3 - 3..].copy_from_slice(&z[layout.n3 - 3..]);
        let m = ExposureParams::from_theta3(&layout, &theta3).unwrap();
        assert_eq!(m.gamma2[(0, 0)], 0.7);
        assert_eq!(m.gamma2[(1, 0)], 0.7);
        assert_eq!(m.omega_delta[(0, 0)], 0.5);
    }

    #[test]
    fn log_and_atanh_fixed_points() {
        let spec = ModelSpec::single_latent(3, 0, 2, CovStructure::Ar1);
        let layout = ParamLayout::new(&spec);
        let theta = ParamVector {
            theta1: vec![0.0, 1.0],
            theta2: vec![1.0, 0.75],
            theta3: vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        };
        let z = layout.to_unconstrained(&theta).unwrap();
        assert_eq!(z[2], 0.0);
        let back = layout.from_unconstrained(&z);
        assert!((back.theta2[1] - 0.75).abs() < 1e-12);
        assert_eq!(back.theta2[0], 1.0);
    }

    proptest! {
        #[test]
        fn pack_unpack_is_identity(values in prop::collection::vec(-5.0f64..5.0, 24)) {
            let layout = ParamLayout::new(&two_latent_spec());
            let v = values[..layout.len()].to_vec();
            let pv = ParamVector::unpack(&layout, &v).unwrap();
            prop_assert_eq!(pv.pack(), v);
        }

        #[test]
        fn unconstrained_round_trip(z in prop::collection::vec(-1.5f64..1.5, 24)) {
            let layout = ParamLayout::new(&two_latent_spec());
            let z = &z[..layout.len()];
            let theta = layout.from_unconstrained(z);
            let z2 = layout.to_unconstrained(&theta).unwrap();
            let back = layout.from_unconstrained(&z2);
            for (a, b) in theta.pack().iter().zip(back.pack()) {
                prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
            }
            for (a, b) in z.iter().zip(&z2) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transform_jacobian_matches_finite_differences() {
        let layout = ParamLayout::new(&two_latent_spec());
        let z: Vec<f64> = (0..layout.len()).map(|i| 0.1 * (i as f64 % 5.0) - 0.2).collect();
        let jac = layout.transform_jacobian(&z);
        let h = 1e-6;
        for k in 0..z.len() {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[k] += h;
            dn[k] -= h;
            let a = layout.from_unconstrained(&up).pack();
            let b = layout.from_unconstrained(&dn).pack();
            for i in 0..z.len() {
                let fd = (a[i] - b[i]) / (2.0 * h);
                assert!((fd - jac[(i, k)]).abs() < 1e-7, "({i},{k})");
            }
        }
        let n12 = layout.n1 + layout.n2;
        let j3 = layout.theta3_transform_jacobian(&z[n12..]);
        let sub = jac.view((n12, n12), (layout.n3, layout.n3)).into_owned();
        assert!((j3 - sub).abs().max() < 1e-14);
    }
}
