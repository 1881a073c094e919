//! Shared test support: random small models, a direct simulator, and a
//! brute-force joint-Gaussian oracle that assembles the distribution of
//! (U, X, Y) from the structural equations and conditions it with a
//! general LU solve. Nothing here goes through the crate's moment code.

#![allow(dead_code)]

use latent_ee::cov::CovStructure;
use latent_ee::params::ExposureParams;
use latent_ee::spec::{DeltaCov, Entry, ModelSpec, PsiCov};
use latent_ee::{Dataset, ParamLayout, ParamVector, SubjectData};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

pub const OUTCOME_STRUCTURES: [CovStructure; 7] = [
    CovStructure::Independence,
    CovStructure::Diagonal,
    CovStructure::Cs,
    CovStructure::Csh,
    CovStructure::Ar1,
    CovStructure::Har1,
    CovStructure::Unstructured,
];

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// A model together with one admissible parameter value.
#[derive(Debug, Clone)]
pub struct RandomModel {
    pub spec: ModelSpec,
    pub layout: ParamLayout,
    pub theta: ParamVector,
    pub par: ExposureParams<f64>,
    pub omega_eps: DMatrix<f64>,
}

/// Options bounding the random model family.
#[derive(Debug, Clone)]
pub struct ModelShape {
    pub max_p: usize,
    pub max_l: usize,
    pub max_occasions: usize,
    pub allow_exact: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            max_p: 6,
            max_l: 2,
            max_occasions: 4,
            allow_exact: true,
        }
    }
}

pub fn random_spec<R: Rng>(rng: &mut R, shape: &ModelShape) -> ModelSpec {
    let l = rng.random_range(1..=shape.max_l);
    let p = rng.random_range(l.max(2).min(shape.max_p)..=shape.max_p);
    let r = rng.random_range(0..=1);
    let q = rng.random_range(0..=1);
    let occasions = rng.random_range(1..=shape.max_occasions);
    let outcome_cov = OUTCOME_STRUCTURES[rng.random_range(0..OUTCOME_STRUCTURES.len())].clone();

    let mut lambda = vec![vec![Entry::ZERO; l]; p];
    let mut nu = vec![Entry::free(); p];
    let mut k = vec![vec![Entry::ZERO; r]; p];
    for j in 0..p {
        if j < l {
            lambda[j][j] = Entry::Fixed(1.0);
            nu[j] = Entry::ZERO;
            continue;
        }
        lambda[j][j % l] = Entry::free();
        if l == 2 && rng.random_bool(0.3) {
            lambda[j][(j + 1) % l] = Entry::free();
        }
        for c in 0..r {
            if rng.random_bool(0.4) {
                k[j][c] = Entry::free();
            }
        }
    }
    let mut gamma1 = vec![vec![Entry::ZERO; l]; l];
    if l == 2 && rng.random_bool(0.5) {
        gamma1[1][0] = Entry::free();
    }
    let mut delta_cov = DeltaCov::diagonal(p);
    if shape.allow_exact && rng.random_bool(0.15) {
        delta_cov.fixed_variances[0] = Some(0.0);
    }
    if p >= l + 2 && rng.random_bool(0.3) {
        delta_cov.ar1_groups = vec![vec![l, l + 1]];
    }
    let outcome_latents = if l == 2 {
        match rng.random_range(0..3) {
            0 => vec![0],
            1 => vec![1],
            _ => vec![0, 1],
        }
    } else {
        vec![0]
    };
    let spec = ModelSpec {
        surrogate_names: (1..=p).map(|j| format!("x{j}")).collect(),
        latent_names: (1..=l).map(|k| format!("U{k}")).collect(),
        w_names: (1..=r).map(|c| format!("w{c}")).collect(),
        z_names: (1..=q).map(|c| format!("z{c}")).collect(),
        occasions,
        nu,
        lambda,
        k,
        alpha: vec![Entry::free(); l],
        gamma1,
        gamma2: vec![vec![Entry::free(); r]; l],
        delta_cov,
        psi_cov: if rng.random_bool(0.3) { PsiCov::Diagonal } else { PsiCov::Unstructured },
        outcome_cov,
        outcome_latents,
    };
    spec.validate().expect("random spec is valid");
    spec
}

/// Draw an admissible parameter value for `spec`: unconstrained coordinates
/// are standard normal scaled by `spread`, loadings are centred at 1.
pub fn random_theta<R: Rng>(rng: &mut R, spec: &ModelSpec, spread: f64) -> RandomModel {
    let layout = ParamLayout::new(spec);
    let z3: Vec<f64> = (0..layout.n3).map(|_| spread * normal(rng)).collect();
    let mut theta3 = layout.theta3_from_unconstrained(&z3);
    for (v, name) in theta3.iter_mut().zip(layout.theta3_names()) {
        if name.starts_with("lambda") {
            *v += 1.0;
        }
    }
    let n2 = spec.outcome_cov.n_params(spec.occasions);
    let z2: Vec<f64> = (0..n2).map(|_| spread * normal(rng)).collect();
    let theta2 = spec.outcome_cov.from_unconstrained(&z2, spec.occasions);
    let theta1: Vec<f64> = (0..layout.n1).map(|_| normal(rng)).collect();
    let par = ExposureParams::from_theta3(&layout, &theta3).expect("admissible theta3");
    let omega_eps = spec.outcome_cov.build(&theta2, spec.occasions).expect("admissible theta2");
    RandomModel {
        spec: spec.clone(),
        layout,
        theta: ParamVector { theta1, theta2, theta3 },
        par,
        omega_eps,
    }
}

pub fn random_model<R: Rng>(rng: &mut R, shape: &ModelShape) -> RandomModel {
    let spec = random_spec(rng, shape);
    random_theta(rng, &spec, 0.5)
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn mvn<R: Rng>(rng: &mut R, root: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_fn(root.ncols(), |_, _| normal(rng));
    root * e
}

/// Outcome coefficients split out of θ₁ = (β₀, β, κ).
pub fn coefs(model: &RandomModel) -> (f64, Vec<f64>, Vec<f64>) {
    let nb = model.spec.outcome_latents.len();
    let t = &model.theta.theta1;
    (t[0], t[1..1 + nb].to_vec(), t[1 + nb..].to_vec())
}

/// Simulate `n` subjects from the structural equations directly.
/// Each surrogate is missing with probability `p_missing`; outcome lengths
/// are uniform on 0..=occasions when `ragged`, else full.
pub fn simulate<R: Rng>(rng: &mut R, model: &RandomModel, n: usize, p_missing: f64, ragged: bool) -> Dataset {
    let spec = &model.spec;
    let par = &model.par;
    let (p, l, r, q) = (spec.p(), spec.l(), spec.r(), spec.q());
    let resolvent = (DMatrix::identity(l, l) - &par.gamma1).try_inverse().expect("acyclic");
    let psi_root = psd_sqrt(&par.psi);
    let delta_root = psd_sqrt(&par.omega_delta);
    let eps_root = psd_sqrt(&model.omega_eps);
    let (b0, beta, kappa) = coefs(model);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let w: Vec<f64> = (0..r).map(|_| normal(rng)).collect();
        let wv = DVector::from_column_slice(&w);
        let xi = mvn(rng, &psi_root);
        let u = &resolvent * (&par.alpha + &par.gamma2 * &wv + xi);
        let delta = mvn(rng, &delta_root);
        let x = &par.nu + &par.k * &wv + &par.lambda * &u + delta;
        let mask: Vec<bool> = (0..p).map(|_| !rng.random_bool(p_missing)).collect();
        let n_i = if ragged { rng.random_range(0..=spec.occasions) } else { spec.occasions };
        let z = DMatrix::from_fn(n_i, q, |_, _| normal(rng));
        let eps = mvn(rng, &eps_root);
        let mut signal = b0;
        for (b, &k) in beta.iter().zip(&spec.outcome_latents) {
            signal += b * u[k];
        }
        let y: Vec<f64> = (0..n_i)
            .map(|j| signal + (0..q).map(|c| kappa[c] * z[(j, c)]).sum::<f64>() + eps[j])
            .collect();
        subjects.push(SubjectData {
            id: format!("s{i}"),
            x: (0..p).map(|j| if mask[j] { x[j] } else { f64::NAN }).collect(),
            mask,
            w,
            z,
            y,
            u_true: Some(u.iter().copied().collect()),
        });
    }
    Dataset::new(subjects, p, r, q).expect("simulated data are consistent")
}

/// Joint Gaussian of the stacked vector (U, X, Y) for one subject.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub l: usize,
    pub p: usize,
    pub n: usize,
}

impl JointGaussian {
    /// Assemble from the structural form: with e = (ξ, δ, ε) independent,
    /// (U, X, Y) = m + M e where U = Rξ + ..., X = ΛRξ + δ + ..., Y = 1βᵀSRξ + ε + ...
    pub fn assemble(model: &RandomModel, w: &[f64], z: &DMatrix<f64>) -> Self {
        let spec = &model.spec;
        let par = &model.par;
        let (p, l) = (spec.p(), spec.l());
        let n = z.nrows();
        let resolvent = (DMatrix::identity(l, l) - &par.gamma1).try_inverse().expect("acyclic");
        let (b0, beta, kappa) = coefs(model);
        let mut sel = DMatrix::zeros(1, l);
        for (b, &k) in beta.iter().zip(&spec.outcome_latents) {
            sel[(0, k)] = *b;
        }
        let dim = l + p + n;
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (l, l)).copy_from(&resolvent);
        m.view_mut((l, 0), (p, l)).copy_from(&(&par.lambda * &resolvent));
        m.view_mut((l, l), (p, p)).copy_from(&DMatrix::identity(p, p));
        let row = &sel * &resolvent;
        for j in 0..n {
            m.view_mut((l + p + j, 0), (1, l)).copy_from(&row);
            m[(l + p + j, l + p + j)] = 1.0;
        }
        let mut e = DMatrix::zeros(dim, dim);
        e.view_mut((0, 0), (l, l)).copy_from(&par.psi);
        e.view_mut((l, l), (p, p)).copy_from(&par.omega_delta);
        e.view_mut((l + p, l + p), (n, n))
            .copy_from(&model.omega_eps.view((0, 0), (n, n)));
        let cov = &m * e * m.transpose();

        let wv = DVector::from_column_slice(w);
        let mu_u = &resolvent * (&par.alpha + &par.gamma2 * &wv);
        let mu_x = &par.nu + &par.k * &wv + &par.lambda * &mu_u;
        let base = b0 + (&sel * &mu_u)[0];
        let mut mean = DVector::zeros(dim);
        mean.rows_mut(0, l).copy_from(&mu_u);
        mean.rows_mut(l, p).copy_from(&mu_x);
        for j in 0..n {
            mean[l + p + j] = base + (0..kappa.len()).map(|c| kappa[c] * z[(j, c)]).sum::<f64>();
        }
        Self { mean, cov, l, p, n }
    }

    pub fn u_idx(&self) -> Vec<usize> {
        (0..self.l).collect()
    }

    pub fn x_idx(&self, obs: &[usize]) -> Vec<usize> {
        obs.iter().map(|j| self.l + j).collect()
    }

    pub fn y_idx(&self) -> Vec<usize> {
        (self.l + self.p..self.l + self.p + self.n).collect()
    }

    /// Mean and covariance of `target` given `given = values`.
    pub fn condition(&self, target: &[usize], given: &[usize], values: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.cov[(rows[i], cols[j])]);
        let mt = DVector::from_fn(target.len(), |i, _| self.mean[target[i]]);
        let stt = pick(target, target);
        if given.is_empty() {
            return (mt, stt);
        }
        let sgg = pick(given, given);
        let stg = pick(target, given);
        let resid = DVector::from_fn(given.len(), |i, _| values[i] - self.mean[given[i]]);
        let lu = sgg.full_piv_lu();
        let gain_r = lu.solve(&resid).expect("conditioning block is invertible");
        let gain_c = lu.solve(&stg.transpose()).expect("conditioning block is invertible");
        (mt + &stg * gain_r, stt - &stg * gain_c)
    }

    /// Log-density of the sub-vector `idx` at `values`.
    pub fn log_density(&self, idx: &[usize], values: &[f64]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let s = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.cov[(idx[i], idx[j])]);
        let r = DVector::from_fn(idx.len(), |i, _| values[i] - self.mean[idx[i]]);
        let lu = s.clone().full_piv_lu();
        let det = lu.determinant();
        let quad = r.dot(&lu.solve(&r).expect("density covariance is invertible"));
        -0.5 * (idx.len() as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
    }
}

/// Brute-force observed-data log-likelihood of (X_obs, Y) summed over subjects.
pub fn brute_force_loglik(model: &RandomModel, data: &Dataset) -> f64 {
    data.subjects()
        .iter()
        .map(|s| {
            let g = JointGaussian::assemble(model, &s.w, &s.z);
            let obs = s.observed();
            let mut idx = g.x_idx(&obs);
            idx.extend(g.y_idx());
            let mut values: Vec<f64> = obs.iter().map(|&j| s.x[j]).collect();
            values.extend(&s.y);
            g.log_density(&idx, &values)
        })
        .sum()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

/// Central-difference gradient of `f` at `x` with relative step `h`.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let step = h * x[k].abs().max(1.0);
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[k] += step;
            dn[k] -= step;
            (f(&up) - f(&dn)) / (2.0 * step)
        })
        .collect()
}

/// Largest |a − b| / max(|b|, 1) over components.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
