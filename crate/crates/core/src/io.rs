//! CSV data files.
//!
//! Subjects file (one row per subject): `id`, every W column and every
//! surrogate column named in the model; an empty surrogate cell means the
//! surrogate is missing. Optional `true:<latent>` columns carry known latent
//! values (written for simulated data). Other columns are ignored.
//!
//! Outcomes file (one row per subject and occasion): `id`, `occasion`
//! (1, 2, … without gaps per subject), `y` and every Z column. Subjects without
//! outcome rows are kept and contribute to the exposure model only.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::{Dataset, SubjectData};
use crate::error::{Error, Result};
use crate::spec::ModelSpec;

fn parse_err(line: u64, column: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        column: column.to_string(),
        reason: reason.into(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        column: String::new(),
        reason: e.to_string(),
    }
}

fn column_map(headers: &csv::StringRecord, required: &[&str], file: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if map.insert(h.trim().to_string(), i).is_some() {
            return Err(parse_err(1, h, format!("duplicate column in {file} file")));
        }
    }
    for r in required {
        if !map.contains_key(*r) {
            return Err(parse_err(1, r, format!("required column missing from {file} file")));
        }
    }
    Ok(map)
}

fn number(line: u64, column: &str, cell: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, column, format!("`{cell}` is not a finite number")))
}

/// Read a dataset from subject and outcome CSV readers.
pub fn read_data<R1: Read, R2: Read>(subjects: R1, outcomes: R2, spec: &ModelSpec) -> Result<Dataset> {
    let (p, r, q) = (spec.p(), spec.r(), spec.q());
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(subjects);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut required = vec!["id"];
    required.extend(spec.w_names.iter().map(String::as_str));
    required.extend(spec.surrogate_names.iter().map(String::as_str));
    let cols = column_map(&headers, &required, "subjects")?;
    let truth_cols: Vec<Option<usize>> = spec
        .latent_names
        .iter()
        .map(|n| cols.get(&format!("true:{n}")).copied())
        .collect();
    let has_truth = truth_cols.iter().all(Option::is_some);

    let mut subjects: Vec<SubjectData> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[cols["id"]].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "id", "empty subject id"));
        }
        if by_id.contains_key(&id) {
            return Err(parse_err(line, "id", format!("duplicate subject id `{id}`")));
        }
        let mut w = Vec::with_capacity(r);
        for name in &spec.w_names {
            let cell = &rec[cols[name]];
            if cell.is_empty() {
                return Err(Error::MissingCovariate {
                    id,
                    column: name.clone(),
                });
            }
            w.push(number(line, name, cell)?);
        }
        let mut x = Vec::with_capacity(p);
        let mut mask = Vec::with_capacity(p);
        for name in &spec.surrogate_names {
            let cell = &rec[cols[name]];
            if cell.is_empty() {
                x.push(f64::NAN);
                mask.push(false);
            } else {
                x.push(number(line, name, cell)?);
                mask.push(true);
            }
        }
        let u_true = if has_truth {
            let mut u = Vec::with_capacity(truth_cols.len());
            for (k, c) in truth_cols.iter().enumerate() {
                let name = format!("true:{}", spec.latent_names[k]);
                u.push(number(line, &name, &rec[c.expect("checked")])?);
            }
            Some(u)
        } else {
            None
        };
        by_id.insert(id.clone(), subjects.len());
        subjects.push(SubjectData {
            id,
            x,
            mask,
            w,
            z: DMatrix::zeros(0, q),
            y: Vec::new(),
            u_true,
        });
    }

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(outcomes);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut required = vec!["id", "occasion", "y"];
    required.extend(spec.z_names.iter().map(String::as_str));
    let cols = column_map(&headers, &required, "outcomes")?;
    let mut rows: BTreeMap<usize, Vec<(usize, u64, f64, Vec<f64>)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = &rec[cols["id"]];
        let Some(&s) = by_id.get(id) else {
            return Err(Error::Join(id.to_string()));
        };
        let occ_cell = &rec[cols["occasion"]];
        let occ = occ_cell
            .parse::<usize>()
            .ok()
            .filter(|&o| o >= 1)
            .ok_or_else(|| parse_err(line, "occasion", format!("`{occ_cell}` is not a positive integer")))?;
        let y_cell = &rec[cols["y"]];
        if y_cell.is_empty() {
            return Err(parse_err(line, "y", "empty outcome"));
        }
        let y = number(line, "y", y_cell)?;
        let mut z = Vec::with_capacity(q);
        for name in &spec.z_names {
            let cell = &rec[cols[name]];
            if cell.is_empty() {
                return Err(Error::MissingCovariate {
                    id: id.to_string(),
                    column: name.clone(),
                });
            }
            z.push(number(line, name, cell)?);
        }
        rows.entry(s).or_default().push((occ, line, y, z));
    }
    for (s, mut occ_rows) in rows {
        occ_rows.sort_by_key(|r| r.0);
        for (k, row) in occ_rows.iter().enumerate() {
            if row.0 != k + 1 {
                let reason = if k > 0 && occ_rows[k - 1].0 == row.0 {
                    format!("duplicate occasion {} for subject `{}`", row.0, subjects[s].id)
                } else {
                    format!("occasions for subject `{}` must run 1..n without gaps", subjects[s].id)
                };
                return Err(parse_err(row.1, "occasion", reason));
            }
        }
        let n = occ_rows.len();
        if n > spec.occasions {
            return Err(parse_err(
                occ_rows[n - 1].1,
                "occasion",
                format!("subject `{}` has {n} occasions but the model allows {}", subjects[s].id, spec.occasions),
            ));
        }
        let sub = &mut subjects[s];
        sub.y = occ_rows.iter().map(|r| r.2).collect();
        sub.z = DMatrix::from_fn(n, q, |i, c| occ_rows[i].3[c]);
    }
    Dataset::new(subjects, p, r, q)
}

/// Read a dataset from two CSV files.
pub fn load_data(subjects_path: &Path, outcomes_path: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let s = std::fs::File::open(subjects_path)?;
    let o = std::fs::File::open(outcomes_path)?;
    read_data(s, o, spec)
}

fn fmt(v: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{v:?}")
}

/// Write a dataset in the two-file layout; reading it back gives an equal dataset.
pub fn write_data<W1: Write, W2: Write>(data: &Dataset, spec: &ModelSpec, subjects: W1, outcomes: W2) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(subjects);
    let with_truth = data.subjects().iter().all(|s| s.u_true.is_some());
    let mut header = vec!["id".to_string()];
    header.extend(spec.w_names.iter().cloned());
    header.extend(spec.surrogate_names.iter().cloned());
    if with_truth {
        header.extend(spec.latent_names.iter().map(|n| format!("true:{n}")));
    }
    w.write_record(&header).map_err(io)?;
    for s in data.subjects() {
        let mut row = vec![s.id.clone()];
        row.extend(s.w.iter().map(|v| fmt(*v)));
        row.extend(s.x.iter().zip(&s.mask).map(|(v, &m)| if m { fmt(*v) } else { String::new() }));
        if let Some(u) = &s.u_true {
            row.extend(u.iter().map(|v| fmt(*v)));
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(outcomes);
    let mut header = vec!["id".to_string(), "occasion".into(), "y".into()];
    header.extend(spec.z_names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for s in data.subjects() {
        for j in 0..s.n_occ() {
            let mut row = vec![s.id.clone(), format!("{}", j + 1), fmt(s.y[j])];
            row.extend((0..s.z.ncols()).map(|c| fmt(s.z[(j, c)])));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_data(data: &Dataset, spec: &ModelSpec, subjects_path: &Path, outcomes_path: &Path) -> Result<()> {
    let s = std::fs::File::create(subjects_path)?;
    let o = std::fs::File::create(outcomes_path)?;
    write_data(data, spec, std::io::BufWriter::new(s), std::io::BufWriter::new(o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cov::CovStructure;

    fn spec() -> ModelSpec {
        let mut s = ModelSpec::single_latent(2, 1, 3, CovStructure::Cs);
        s.w_names = vec!["age".into()];
        s.k = vec![vec![crate::spec::Entry::ZERO]; 2];
        s.gamma2 = vec![vec![crate::spec::Entry::free()]];
        s
    }

    #[test]
    fn empty_surrogate_cell_sets_mask() {
        let subj = "id,age,x1,x2\na,30,1.5,\nb,41,0.2,0.7\n";
        let out = "id,occasion,y,z1\na,1,3.0,0.1\na,2,2.5,0.2\nb,1,1.0,0.3\n";
        let d = read_data(subj.as_bytes(), out.as_bytes(), &spec()).unwrap();
        assert_eq!(d.subjects()[0].mask, vec![true, false]);
        assert_eq!(d.subjects()[1].mask, vec![true, true]);
        assert_eq!(d.subjects()[0].y, vec![3.0, 2.5]);
    }

    #[test]
    fn orphan_outcome_is_a_join_error() {
        let subj = "id,age,x1,x2\na,30,1.5,1\n";
        let out = "id,occasion,y,z1\nzz,1,3.0,0.1\n";
        match read_data(subj.as_bytes(), out.as_bytes(), &spec()) {
            Err(Error::Join(id)) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_covariates_and_bad_cells() {
        let out = "id,occasion,y,z1\n";
        let r = read_data("id,age,x1,x2\na,,1,1\n".as_bytes(), out.as_bytes(), &spec());
        assert!(matches!(r, Err(Error::MissingCovariate { .. })));
        let r = read_data("id,age,x1,x2\na,3,abc,1\n".as_bytes(), out.as_bytes(), &spec());
        match r {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, "x1");
            }
            other => panic!("{other:?}"),
        }
        let r = read_data(
            "id,age,x1,x2\na,3,1,1\n".as_bytes(),
            "id,occasion,y,z1\na,1,1,\n".as_bytes(),
            &spec(),
        );
        assert!(matches!(r, Err(Error::MissingCovariate { .. })));
    }

    #[test]
    fn occasion_gaps_are_rejected() {
        let subj = "id,age,x1,x2\na,30,1.5,1\n";
        let out = "id,occasion,y,z1\na,1,3.0,0.1\na,3,3.0,0.1\n";
        assert!(matches!(
            read_data(subj.as_bytes(), out.as_bytes(), &spec()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn subjects_without_outcomes_are_kept() {
        let subj = "id,age,x1,x2\na,30,1.5,1\nb,31,2,\n";
        let out = "id,occasion,y,z1\na,1,3.0,0.1\n";
        let d = read_data(subj.as_bytes(), out.as_bytes(), &spec()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.subjects()[1].n_occ(), 0);
    }
}
