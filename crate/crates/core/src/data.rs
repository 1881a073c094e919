//! Per-subject data containers.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One subject: surrogates with a missingness mask, subject-level
/// covariates W, and `n_i` outcome occasions with their covariates Z.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    /// Surrogate values; entries whose mask bit is false are ignored.
    pub x: Vec<f64>,
    /// `true` = observed.
    pub mask: Vec<bool>,
    pub w: Vec<f64>,
    /// `n_i × q`, one row per occasion.
    pub z: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Generating latent values, kept by the simulator for oracle checks.
    pub u_true: Option<Vec<f64>>,
}

impl SubjectData {
    pub fn n_occ(&self) -> usize {
        self.y.len()
    }

    pub fn observed(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect()
    }

    pub fn x_obs(&self) -> Vec<f64> {
        self.observed().into_iter().map(|j| self.x[j]).collect()
    }
}

/// A validated collection of subjects with their distinct missingness
/// patterns indexed for reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<SubjectData>,
    p: usize,
    r: usize,
    q: usize,
    patterns: Vec<Vec<usize>>,
    pattern_of: Vec<usize>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectData>, p: usize, r: usize, q: usize) -> Result<Self> {
        let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut patterns = Vec::new();
        let mut pattern_of = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let bad = |what: String| Err(Error::Dimension(format!("subject `{}`: {what}", s.id)));
            if s.x.len() != p || s.mask.len() != p {
                return bad(format!("expected {p} surrogates"));
            }
            if s.w.len() != r {
                return bad(format!("expected {r} W covariates"));
            }
            if s.z.nrows() != s.y.len() || s.z.ncols() != q {
                return bad(format!("Z must be {} x {q}", s.y.len()));
            }
            if let Some(c) = s.w.iter().position(|v| !v.is_finite()) {
                return Err(Error::MissingCovariate {
                    id: s.id.clone(),
                    column: format!("w{}", c + 1),
                });
            }
            if s.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::MissingCovariate {
                    id: s.id.clone(),
                    column: "Z".into(),
                });
            }
            if s.y.iter().any(|v| !v.is_finite()) {
                return bad("outcome values must be finite".into());
            }
            if s.x.iter().zip(&s.mask).any(|(v, &m)| m && !v.is_finite()) {
                return bad("observed surrogate values must be finite".into());
            }
            let next = patterns.len();
            let k = *index.entry(s.mask.clone()).or_insert(next);
            if k == next {
                patterns.push(s.observed());
            }
            pattern_of.push(k);
        }
        Ok(Self {
            subjects,
            p,
            r,
            q,
            patterns,
            pattern_of,
        })
    }

    pub fn subjects(&self) -> &[SubjectData] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Distinct observed-index sets, in order of first appearance.
    pub fn patterns(&self) -> &[Vec<usize>] {
        &self.patterns
    }

    pub fn pattern_of(&self, i: usize) -> usize {
        self.pattern_of[i]
    }

    pub fn pattern_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.patterns.len()];
        for &k in &self.pattern_of {
            c[k] += 1;
        }
        c
    }

    pub fn max_occasions(&self) -> usize {
        self.subjects.iter().map(|s| s.n_occ()).max().unwrap_or(0)
    }

    pub fn total_occasions(&self) -> usize {
        self.subjects.iter().map(|s| s.n_occ()).sum()
    }

    /// Same subjects with the outcomes removed.
    pub fn without_outcomes(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.subjects {
            s.y.clear();
            s.z = DMatrix::zeros(0, self.q);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, mask: Vec<bool>) -> SubjectData {
        SubjectData {
            id: id.into(),
            x: vec![1.0; mask.len()],
            mask,
            w: vec![],
            z: DMatrix::zeros(2, 0),
            y: vec![0.0, 1.0],
            u_true: None,
        }
    }

    #[test]
    fn patterns_are_deduplicated() {
        let d = Dataset::new(
            vec![
                subject("a", vec![true, false]),
                subject("b", vec![true, true]),
                subject("c", vec![true, false]),
            ],
            2,
            0,
            0,
        )
        .unwrap();
        assert_eq!(d.patterns(), &[vec![0], vec![0, 1]]);
        assert_eq!(d.pattern_counts(), vec![2, 1]);
        assert_eq!(d.pattern_of(2), 0);
    }

    #[test]
    fn missing_w_is_rejected() {
        let mut s = subject("a", vec![true]);
        s.w = vec![f64::NAN];
        assert!(matches!(
            Dataset::new(vec![s], 1, 1, 0),
            Err(Error::MissingCovariate { .. })
        ));
    }
}
