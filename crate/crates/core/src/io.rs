//! CSV and JSON persistence for cohorts and result tables.
//!
//! Every CSV may start with `#` comment lines carrying provenance; readers skip them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SubjectCovariates, Trajectory, VisitSchedule};
use crate::simulation::{Cohort, CohortMeta, CohortSubject};

pub const COHORT_HEADER: [&str; 7] = ["subject_id", "visit_index", "time", "C", "D", "A", "Z"];

/// Writes a header plus rows, preceded by one `# ...` line per comment.
pub fn write_table<W: Write, R: AsRef<[String]>>(writer: W, comments: &[String], header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header)?;
    for row in rows {
        csv.write_record(row.as_ref())?;
    }
    csv.flush()?;
    Ok(())
}

/// Same as [`write_table`] but to a file path.
pub fn write_table_file<R: AsRef<[String]>>(path: &Path, comments: &[String], header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    write_table(File::create(path)?, comments, header, rows)
}

fn cohort_rows(cohort: &Cohort) -> impl Iterator<Item = Vec<String>> + '_ {
    cohort.subjects.iter().flat_map(|s| {
        s.schedule.times().iter().enumerate().map(move |(j, t)| {
            vec![
                s.id.to_string(),
                j.to_string(),
                t.to_string(),
                s.cov.c.to_string(),
                s.cov.d.to_string(),
                s.trajectory.a[j].to_string(),
                s.trajectory.z[j].to_string(),
            ]
        })
    })
}

/// Path of the JSON sidecar holding cohort metadata.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes the long-format cohort CSV and its metadata sidecar.
pub fn write_cohort(path: &Path, cohort: &Cohort, comments: &[String]) -> Result<()> {
    write_table_file(path, comments, &COHORT_HEADER, cohort_rows(cohort))?;
    let sidecar = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(sidecar, &cohort.meta)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CohortRecord {
    subject_id: usize,
    visit_index: usize,
    time: f64,
    #[serde(rename = "C")]
    c: f64,
    #[serde(rename = "D")]
    d: u8,
    #[serde(rename = "A")]
    a: u8,
    #[serde(rename = "Z")]
    z: f64,
}

/// Reads a cohort CSV. Latent markers are unknown and set to NaN.
/// The sidecar, when present next to the file, restores metadata.
pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut subjects: Vec<CohortSubject> = Vec::new();
    let mut times: Vec<Vec<f64>> = Vec::new();
    for rec in reader.deserialize::<CohortRecord>() {
        let r = rec?;
        if r.d > 1 || r.a > 1 {
            return Err(Error::Parse(format!("subject {}: D and A must be 0 or 1", r.subject_id)));
        }
        let same = subjects.last().is_some_and(|s| s.id == r.subject_id);
        if !same {
            if subjects.iter().any(|s| s.id == r.subject_id) {
                return Err(Error::Parse(format!("rows of subject {} are not contiguous", r.subject_id)));
            }
            subjects.push(CohortSubject {
                id: r.subject_id,
                cov: SubjectCovariates::new(r.c, r.d),
                schedule: VisitSchedule::unit(0),
                trajectory: Trajectory { y: Vec::new(), z: Vec::new(), a: Vec::new() },
            });
            times.push(Vec::new());
        }
        let s = subjects.last_mut().expect("pushed above");
        if r.visit_index != s.trajectory.z.len() {
            return Err(Error::Parse(format!("subject {}: expected visit {}, found {}", r.subject_id, s.trajectory.z.len(), r.visit_index)));
        }
        if r.c != s.cov.c || r.d != s.cov.d {
            return Err(Error::Parse(format!("subject {}: covariates change over visits", r.subject_id)));
        }
        s.trajectory.z.push(r.z);
        s.trajectory.a.push(r.a);
        s.trajectory.y.push(f64::NAN);
        times.last_mut().expect("pushed above").push(r.time);
    }
    if subjects.is_empty() {
        return Err(Error::Parse(format!("{} contains no observations", path.display())));
    }
    for (s, t) in subjects.iter_mut().zip(times) {
        s.schedule = VisitSchedule::new(t).map_err(|e| Error::Parse(format!("subject {}: {e}", s.id)))?;
    }
    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() { serde_json::from_reader(File::open(sidecar)?)? } else { CohortMeta::default() };
    Ok(Cohort { subjects, meta })
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate_cohort, PopulationSpec};
    use crate::strategies::ObservationalAssignmentModel;

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let c = simulate_cohort(&PopulationSpec::illustration(7), &ObservationalAssignmentModel::illustration(), &VisitSchedule::unit(4), 9).unwrap();
        write_cohort(&path, &c, &["version 1".into(), "seed 9".into()]).unwrap();
        let back = read_cohort(&path).unwrap();
        assert_eq!(back.len(), 7);
        assert_eq!(back.meta, c.meta);
        for (a, b) in c.subjects.iter().zip(&back.subjects) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.schedule, b.schedule);
            assert_eq!(a.trajectory.z, b.trajectory.z);
            assert_eq!(a.trajectory.a, b.trajectory.a);
            assert_eq!((a.cov.c, a.cov.d), (b.cov.c, b.cov.d));
            assert!(b.trajectory.y.iter().all(|y| y.is_nan()));
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "subject_id,visit_index,time,C,D,A,Z\n0,0,0,0.1,0,0,1.0\n0,2,1,0.1,0,0,1.0\n").unwrap();
        assert!(matches!(read_cohort(&path), Err(Error::Parse(_))));
        std::fs::write(&path, "subject_id,visit_index,time,C,D,A,Z\n0,0,0,0.1,3,0,1.0\n").unwrap();
        assert!(read_cohort(&path).is_err());
    }
}
