//! Model configuration files.
//!
//! A configuration is a TOML document naming the latents, surrogates and
//! covariates and giving each parameter as either a number (fixed), `"free"`,
//! `"free:label"` (free, constrained equal to every other entry with the same
//! label) or `"fixed:value"`. Omitted loadings, item-bias terms and latent
//! regressions are fixed at zero; omitted intercepts, latent means and error
//! variances are free. Unknown keys are rejected.
//!
//! ```toml
//! occasions = 4
//! w = ["age"]
//! z = ["iq"]
//!
//! [[latent]]
//! name = "U"
//! covariates = { age = "free" }
//!
//! [[surrogate]]
//! name = "x1"
//! intercept = 0
//! loadings = { U = 1 }
//!
//! [[surrogate]]
//! name = "x2"
//! loadings = { U = "free" }
//!
//! [outcome]
//! latents = ["U"]
//! covariance = "cs"
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::cov::CovStructure;
use crate::error::{Error, Result, SpecError, Violation};
use crate::outcome::Scheme;
use crate::spec::{DeltaCov, Entry, ModelSpec, PsiCov};

/// A parameter entry as written in a configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry(pub Entry);

impl ParamEntry {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let t = text.trim();
        if t == "free" {
            return Ok(Self(Entry::free()));
        }
        if let Some(label) = t.strip_prefix("free:") {
            let label = label.trim();
            if label.is_empty() {
                return Err("empty equality label".into());
            }
            return Ok(Self(Entry::Free(Some(label.to_string()))));
        }
        let num = t.strip_prefix("fixed:").unwrap_or(t).trim();
        num.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|v| Self(Entry::Fixed(v)))
            .ok_or_else(|| format!("expected a number, \"free\", \"free:label\" or \"fixed:value\", got `{t}`"))
    }
}

impl<'de> Deserialize<'de> for ParamEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Float(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Self(Entry::Fixed(v as f64))),
            Raw::Float(v) => Ok(Self(Entry::Fixed(v))),
            Raw::Text(s) => Self::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

impl Serialize for ParamEntry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match &self.0 {
            Entry::Fixed(v) => s.serialize_f64(*v),
            Entry::Free(None) => s.serialize_str("free"),
            Entry::Free(Some(l)) => s.serialize_str(&format!("free:{l}")),
        }
    }
}

fn is_empty<C>(c: &C) -> bool
where
    for<'a> &'a C: IntoIterator,
{
    c.into_iter().next().is_none()
}

fn free() -> ParamEntry {
    ParamEntry(Entry::free())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub name: String,
    /// Latent intercept α.
    #[serde(default = "free")]
    pub alpha: ParamEntry,
    /// Γ₁ row: effects of other latents on this one.
    #[serde(default, skip_serializing_if = "is_empty")]
    pub regress: BTreeMap<String, ParamEntry>,
    /// Γ₂ row: effects of W covariates.
    #[serde(default, skip_serializing_if = "is_empty")]
    pub covariates: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub name: String,
    #[serde(default = "free")]
    pub intercept: ParamEntry,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub loadings: BTreeMap<String, ParamEntry>,
    /// K row: covariate effects beyond those on the parent latent.
    #[serde(default, skip_serializing_if = "is_empty")]
    pub item_bias: BTreeMap<String, ParamEntry>,
    /// Measurement-error variance; only fixed values or "free" are allowed.
    #[serde(default = "free")]
    pub error_var: ParamEntry,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaConfig {
    /// Ordered surrogate groups with AR(1)-correlated errors.
    #[serde(default, skip_serializing_if = "is_empty")]
    pub ar1: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiConfig {
    /// "unstructured", "diagonal" or "blocks".
    #[serde(default = "unstructured")]
    pub structure: String,
    /// Unstructured latent groups when `structure = "blocks"`.
    #[serde(default, skip_serializing_if = "is_empty")]
    pub blocks: Vec<Vec<String>>,
}

fn unstructured() -> String {
    "unstructured".into()
}

impl DeltaConfig {
    fn is_default(&self) -> bool {
        self.ar1.is_empty()
    }
}

impl Default for PsiConfig {
    fn default() -> Self {
        Self {
            structure: unstructured(),
            blocks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeConfig {
    pub latents: Vec<String>,
    #[serde(default = "independence")]
    pub covariance: String,
    /// Default estimation method: mle, ee1, ee2 or rc.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Default β* for ee2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_star: Option<Vec<f64>>,
}

fn independence() -> String {
    "independence".into()
}

/// Parsed configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub occasions: usize,
    #[serde(default)]
    pub w: Vec<String>,
    #[serde(default)]
    pub z: Vec<String>,
    #[serde(rename = "latent")]
    pub latents: Vec<LatentConfig>,
    #[serde(rename = "surrogate")]
    pub surrogates: Vec<SurrogateConfig>,
    #[serde(default, skip_serializing_if = "DeltaConfig::is_default")]
    pub delta: DeltaConfig,
    #[serde(default)]
    pub psi: PsiConfig,
    pub outcome: OutcomeConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                line,
                column: format!("{col}"),
                reason: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::from_toml(&text)?, text))
    }

    /// SHA-256 of the configuration text.
    pub fn hash_text(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Default scheme declared in the file, if any.
    pub fn default_scheme(&self) -> Result<Option<Scheme>> {
        match self.outcome.method.as_deref() {
            None | Some("mle") => Ok(None),
            Some("ee1") => Ok(Some(Scheme::Ee1)),
            Some("rc") => Ok(Some(Scheme::Rc)),
            Some("ee2") => match &self.outcome.beta_star {
                Some(b) => Ok(Some(Scheme::Ee2 { beta_star: b.clone() })),
                None => Err(Error::Spec(SpecError(vec![Violation {
                    rule: "ee2 requires beta_star",
                    entry: "outcome.method".into(),
                }]))),
            },
            Some(m) => Err(Error::Spec(SpecError(vec![Violation {
                rule: "unknown method",
                entry: format!("outcome.method = `{m}`"),
            }]))),
        }
    }

    /// Resolve names into a validated [`ModelSpec`].
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let mut v = Vec::new();
        let latents: Vec<String> = self.latents.iter().map(|l| l.name.clone()).collect();
        let surrogates: Vec<String> = self.surrogates.iter().map(|s| s.name.clone()).collect();
        let (p, l, r) = (surrogates.len(), latents.len(), self.w.len());
        let index = |names: &[String], key: &str, what: &'static str, v: &mut Vec<Violation>| {
            let i = names.iter().position(|n| n == key);
            if i.is_none() {
                v.push(Violation {
                    rule: what,
                    entry: key.to_string(),
                });
            }
            i
        };

        let mut lambda = vec![vec![Entry::ZERO; l]; p];
        let mut k = vec![vec![Entry::ZERO; r]; p];
        let mut nu = Vec::with_capacity(p);
        let mut fixed_variances = Vec::with_capacity(p);
        for (j, s) in self.surrogates.iter().enumerate() {
            nu.push(s.intercept.0.clone());
            for (name, e) in &s.loadings {
                if let Some(c) = index(&latents, name, "loading on an unknown latent", &mut v) {
                    lambda[j][c] = e.0.clone();
                }
            }
            for (name, e) in &s.item_bias {
                if let Some(c) = index(&self.w, name, "item bias on an unknown W covariate", &mut v) {
                    k[j][c] = e.0.clone();
                }
            }
            fixed_variances.push(match &s.error_var.0 {
                Entry::Fixed(x) => Some(*x),
                Entry::Free(None) => None,
                Entry::Free(Some(_)) => {
                    v.push(Violation {
                        rule: "error variances cannot carry equality labels",
                        entry: s.name.clone(),
                    });
                    None
                }
            });
        }

        let mut alpha = Vec::with_capacity(l);
        let mut gamma1 = vec![vec![Entry::ZERO; l]; l];
        let mut gamma2 = vec![vec![Entry::ZERO; r]; l];
        for (a, lat) in self.latents.iter().enumerate() {
            alpha.push(lat.alpha.0.clone());
            for (name, e) in &lat.regress {
                if let Some(b) = index(&latents, name, "regression on an unknown latent", &mut v) {
                    gamma1[a][b] = e.0.clone();
                }
            }
            for (name, e) in &lat.covariates {
                if let Some(c) = index(&self.w, name, "regression on an unknown W covariate", &mut v) {
                    gamma2[a][c] = e.0.clone();
                }
            }
        }

        let ar1_groups: Vec<Vec<usize>> = self
            .delta
            .ar1
            .iter()
            .map(|g| g.iter().filter_map(|n| index(&surrogates, n, "AR(1) group names an unknown surrogate", &mut v)).collect())
            .collect();

        let psi_cov = match self.psi.structure.as_str() {
            "unstructured" => PsiCov::Unstructured,
            "diagonal" => PsiCov::Diagonal,
            "blocks" => PsiCov::Blocks(
                self.psi
                    .blocks
                    .iter()
                    .map(|g| g.iter().filter_map(|n| index(&latents, n, "psi block names an unknown latent", &mut v)).collect())
                    .collect(),
            ),
            other => {
                v.push(Violation {
                    rule: "psi structure must be unstructured, diagonal or blocks",
                    entry: other.to_string(),
                });
                PsiCov::Unstructured
            }
        };
        if !self.psi.blocks.is_empty() && self.psi.structure != "blocks" {
            v.push(Violation {
                rule: "psi blocks given without structure = \"blocks\"",
                entry: "psi.blocks".into(),
            });
        }

        let outcome_cov = match CovStructure::parse(&self.outcome.covariance) {
            Some(c) if !matches!(c, CovStructure::DiagAr1Blocks { .. }) => c,
            _ => {
                v.push(Violation {
                    rule: "unknown outcome covariance structure",
                    entry: self.outcome.covariance.clone(),
                });
                CovStructure::Independence
            }
        };
        let outcome_latents: Vec<usize> = self
            .outcome
            .latents
            .iter()
            .filter_map(|n| index(&latents, n, "outcome names an unknown latent", &mut v))
            .collect();

        if !v.is_empty() {
            return Err(Error::Spec(SpecError(v)));
        }
        let spec = ModelSpec {
            surrogate_names: surrogates,
            latent_names: latents,
            w_names: self.w.clone(),
            z_names: self.z.clone(),
            occasions: self.occasions,
            nu,
            lambda,
            k,
            alpha,
            gamma1,
            gamma2,
            delta_cov: DeltaCov {
                fixed_variances,
                ar1_groups,
            },
            psi_cov,
            outcome_cov,
            outcome_latents,
        };
        spec.validate()?;
        let _ = self.default_scheme()?;
        Ok(spec)
    }

    /// Configuration equivalent to a single-latent [`ModelSpec`] built by
    /// [`ModelSpec::single_latent`] (used when writing generated datasets).
    pub fn from_single_latent(spec: &ModelSpec) -> Self {
        let lat = &spec.latent_names[0];
        ModelConfig {
            occasions: spec.occasions,
            w: spec.w_names.clone(),
            z: spec.z_names.clone(),
            latents: vec![LatentConfig {
                name: lat.clone(),
                alpha: ParamEntry(spec.alpha[0].clone()),
                regress: BTreeMap::new(),
                covariates: spec
                    .w_names
                    .iter()
                    .zip(&spec.gamma2[0])
                    .map(|(n, e)| (n.clone(), ParamEntry(e.clone())))
                    .collect(),
            }],
            surrogates: spec
                .surrogate_names
                .iter()
                .enumerate()
                .map(|(j, n)| SurrogateConfig {
                    name: n.clone(),
                    intercept: ParamEntry(spec.nu[j].clone()),
                    loadings: [(lat.clone(), ParamEntry(spec.lambda[j][0].clone()))].into_iter().collect(),
                    item_bias: BTreeMap::new(),
                    error_var: match spec.delta_cov.fixed_variances[j] {
                        Some(x) => ParamEntry(Entry::Fixed(x)),
                        None => free(),
                    },
                })
                .collect(),
            delta: DeltaConfig::default(),
            psi: PsiConfig::default(),
            outcome: OutcomeConfig {
                latents: vec![lat.clone()],
                covariance: spec.outcome_cov.name().into(),
                method: None,
                beta_star: None,
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// The prenatal/postnatal lead exposure model shipped as `element.cfg`.
pub const ELEMENT_CFG: &str = include_str!("../configs/element.cfg");
