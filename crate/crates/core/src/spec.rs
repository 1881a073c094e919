//! Declarative model description: which parameters of the exposure and
//! outcome models are free, which are fixed, and which covariance families
//! are used.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cov::CovStructure;
use crate::error::{SpecError, Violation};

/// One entry of a parameter pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Entry {
    Fixed(f64),
    /// Free parameter. Entries sharing a label are constrained equal.
    Free(Option<String>),
}

impl Entry {
    pub const ZERO: Entry = Entry::Fixed(0.0);

    pub fn free() -> Self {
        Entry::Free(None)
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Entry::Free(_))
    }

    pub fn fixed_value(&self) -> Option<f64> {
        match self {
            Entry::Fixed(v) => Some(*v),
            Entry::Free(_) => None,
        }
    }
}

/// Measurement-error covariance Ω_δ: a diagonal baseline plus optional
/// AR(1)-correlated blocks over ordered, disjoint surrogate groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCov {
    /// `Some(v)` fixes the error variance of that surrogate (0 allowed).
    pub fixed_variances: Vec<Option<f64>>,
    pub ar1_groups: Vec<Vec<usize>>,
}

impl DeltaCov {
    pub fn diagonal(p: usize) -> Self {
        Self {
            fixed_variances: vec![None; p],
            ar1_groups: Vec::new(),
        }
    }

    pub fn structure(&self) -> CovStructure {
        CovStructure::DiagAr1Blocks {
            groups: self.ar1_groups.clone(),
        }
    }
}

/// Covariance of the latent disturbances ξ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PsiCov {
    Unstructured,
    Diagonal,
    /// Listed groups are unstructured; latents outside every group are independent.
    Blocks(Vec<Vec<usize>>),
}

impl PsiCov {
    /// Partition of `0..l` into unstructured blocks (singletons for independent latents).
    pub fn blocks(&self, l: usize) -> Vec<Vec<usize>> {
        match self {
            PsiCov::Unstructured => vec![(0..l).collect()],
            PsiCov::Diagonal => (0..l).map(|i| vec![i]).collect(),
            PsiCov::Blocks(groups) => {
                let mut out = groups.clone();
                let covered: BTreeSet<usize> = groups.iter().flatten().copied().collect();
                out.extend((0..l).filter(|i| !covered.contains(i)).map(|i| vec![i]));
                out
            }
        }
    }
}

/// Full model description.
///
/// Matrices are stored row-major as nested vectors: `lambda[j][k]` is the
/// loading of surrogate `j` on latent `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub surrogate_names: Vec<String>,
    pub latent_names: Vec<String>,
    pub w_names: Vec<String>,
    pub z_names: Vec<String>,
    /// Maximum number of outcome occasions.
    pub occasions: usize,
    pub nu: Vec<Entry>,
    pub lambda: Vec<Vec<Entry>>,
    pub k: Vec<Vec<Entry>>,
    pub alpha: Vec<Entry>,
    pub gamma1: Vec<Vec<Entry>>,
    pub gamma2: Vec<Vec<Entry>>,
    pub delta_cov: DeltaCov,
    pub psi_cov: PsiCov,
    pub outcome_cov: CovStructure,
    /// Latents (0-based) entering the outcome mean, in β order.
    pub outcome_latents: Vec<usize>,
}

impl ModelSpec {
    pub fn p(&self) -> usize {
        self.surrogate_names.len()
    }
    pub fn l(&self) -> usize {
        self.latent_names.len()
    }
    pub fn r(&self) -> usize {
        self.w_names.len()
    }
    pub fn q(&self) -> usize {
        self.z_names.len()
    }

    /// One latent measured by `p` surrogates: the first surrogate fixes scale
    /// (loading 1) and location (intercept 0); the rest are free. No W, and
    /// `q` occasion-level covariates.
    pub fn single_latent(p: usize, q: usize, occasions: usize, outcome_cov: CovStructure) -> Self {
        let first_fixed = |j: usize, v: f64| if j == 0 { Entry::Fixed(v) } else { Entry::free() };
        Self {
            surrogate_names: (1..=p).map(|j| format!("x{j}")).collect(),
            latent_names: vec!["U".into()],
            w_names: Vec::new(),
            z_names: (1..=q).map(|j| format!("z{j}")).collect(),
            occasions,
            nu: (0..p).map(|j| first_fixed(j, 0.0)).collect(),
            lambda: (0..p).map(|j| vec![first_fixed(j, 1.0)]).collect(),
            k: vec![Vec::new(); p],
            alpha: vec![Entry::free()],
            gamma1: vec![vec![Entry::ZERO]],
            gamma2: vec![Vec::new()],
            delta_cov: DeltaCov::diagonal(p),
            psi_cov: PsiCov::Unstructured,
            outcome_cov,
            outcome_latents: vec![0],
        }
    }

    /// Check identifiability conventions and dimensional consistency,
    /// reporting every violation.
    pub fn validate(&self) -> Result<(), SpecError> {
        let mut v = Vec::new();
        let mut bad = |rule: &'static str, entry: String| v.push(Violation { rule, entry });
        let (p, l, r) = (self.p(), self.l(), self.r());

        if p == 0 {
            bad("at least one surrogate is required", "surrogates".into());
        }
        if l == 0 {
            bad("at least one latent variable is required", "latents".into());
        }
        if self.occasions == 0 {
            bad("occasions must be positive", "occasions".into());
        }
        for (what, names) in [
            ("surrogate", &self.surrogate_names),
            ("latent", &self.latent_names),
            ("W covariate", &self.w_names),
            ("Z covariate", &self.z_names),
        ] {
            let mut seen = BTreeSet::new();
            for n in names {
                if !seen.insert(n) {
                    bad("names must be unique", format!("{what} `{n}`"));
                }
            }
        }
        let rows = |m: &Vec<Vec<Entry>>, nr: usize, nc: usize| {
            m.len() == nr && m.iter().all(|row| row.len() == nc)
        };
        if self.nu.len() != p {
            bad("nu must have one entry per surrogate", format!("len {}", self.nu.len()));
        }
        if !rows(&self.lambda, p, l) {
            bad("lambda must be p x l", "lambda".into());
        }
        if !rows(&self.k, p, r) {
            bad("K must be p x r", "K".into());
        }
        if self.alpha.len() != l {
            bad("alpha must have one entry per latent", format!("len {}", self.alpha.len()));
        }
        if !rows(&self.gamma1, l, l) {
            bad("Gamma1 must be l x l", "Gamma1".into());
        }
        if !rows(&self.gamma2, l, r) {
            bad("Gamma2 must be l x r", "Gamma2".into());
        }
        if self.delta_cov.fixed_variances.len() != p {
            bad("delta variances must have one entry per surrogate", "delta".into());
        }

        if rows(&self.lambda, p, l) {
            for k in 0..l {
                let scaled = (0..p).any(|j| matches!(self.lambda[j][k], Entry::Fixed(x) if x != 0.0));
                if !scaled {
                    bad("no scale-fixing loading", format!("latent `{}`", self.latent_names[k]));
                }
            }
        }
        if rows(&self.gamma1, l, l) {
            for k in 0..l {
                if self.gamma1[k][k] != Entry::ZERO {
                    bad("Gamma1 diagonal must be fixed at 0", format!("gamma1[{k},{k}]"));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for &k in &self.outcome_latents {
            if k >= l {
                bad("outcome latent out of range", format!("index {k}"));
            } else if !seen.insert(k) {
                bad("outcome latent listed twice", self.latent_names[k].clone());
            }
        }
        for (j, fv) in self.delta_cov.fixed_variances.iter().enumerate() {
            if let Some(x) = fv {
                if !(x.is_finite() && *x >= 0.0) {
                    bad("fixed error variance must be >= 0", format!("surrogate {j}"));
                }
            }
        }
        let mut covered = BTreeSet::new();
        for g in &self.delta_cov.ar1_groups {
            if g.len() < 2 {
                bad("AR(1) group needs at least two surrogates", format!("{g:?}"));
            }
            for &j in g {
                if j >= p {
                    bad("AR(1) group index out of range", format!("index {j}"));
                } else if !covered.insert(j) {
                    bad("AR(1) groups must be disjoint", format!("surrogate {j}"));
                }
            }
        }
        if let PsiCov::Blocks(groups) = &self.psi_cov {
            let mut covered = BTreeSet::new();
            for g in groups {
                for &k in g {
                    if k >= l || !covered.insert(k) {
                        bad("latent covariance blocks must be disjoint and in range", format!("{g:?}"));
                    }
                }
            }
        }
        match &self.outcome_cov {
            CovStructure::DiagAr1Blocks { .. } => {
                bad("outcome covariance cannot be diagonal+ar1", "outcome_cov".into())
            }
            _ => {}
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(SpecError(v))
        }
    }
}
