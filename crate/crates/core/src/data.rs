//! Dataset representation and CSV ingestion.
//!
//! A [`Dataset`] holds a row-major covariate matrix, a binary treatment
//! indicator and a real outcome per unit. It is immutable once built and is
//! shared read-only by every estimation routine.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row position of a unit inside a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitIndex(pub usize);

impl UnitIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for UnitIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Column mapping used to ingest arbitrary CSV files.
///
/// `treatment` may be omitted for control-only data (placebo runs); every row
/// is then loaded as a control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl Manifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: Vec<f64>,
    n_covariates: usize,
    treatment: Vec<bool>,
    outcome: Vec<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from a row-major `n × p` covariate buffer.
    pub fn new(
        covariates: Vec<f64>,
        n_covariates: usize,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let names = (1..=n_covariates).map(|j| format!("x{j}")).collect();
        Self::with_names(covariates, n_covariates, treatment, outcome, names)
    }

    pub fn with_names(
        covariates: Vec<f64>,
        n_covariates: usize,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcome.len();
        if treatment.len() != n {
            return Err(Error::InvalidDataset(format!(
                "treatment has {} entries, outcome has {n}",
                treatment.len()
            )));
        }
        if covariates.len() != n * n_covariates {
            return Err(Error::InvalidDataset(format!(
                "covariate buffer has {} values, expected {n} x {n_covariates}",
                covariates.len()
            )));
        }
        if covariate_names.len() != n_covariates {
            return Err(Error::DimensionMismatch {
                expected: n_covariates,
                got: covariate_names.len(),
            });
        }
        if n < 2 {
            return Err(Error::InvalidDataset(format!("need at least 2 rows, got {n}")));
        }
        if let Some(i) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite outcome at row {i}")));
        }
        if let Some(k) = covariates.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite covariate at row {}, column {}",
                k / n_covariates.max(1),
                k % n_covariates.max(1)
            )));
        }
        Ok(Self {
            covariates,
            n_covariates,
            treatment,
            outcome,
            covariate_names,
        })
    }

    /// Builds a dataset from covariate rows.
    pub fn from_rows(rows: &[Vec<f64>], treatment: Vec<bool>, outcome: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: bad.len(),
            });
        }
        if rows.len() != outcome.len() {
            return Err(Error::InvalidDataset(format!(
                "{} covariate rows but {} outcomes",
                rows.len(),
                outcome.len()
            )));
        }
        Self::new(rows.concat(), p, treatment, outcome)
    }

    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    pub fn covariate(&self, i: usize, j: usize) -> f64 {
        self.covariates[i * self.n_covariates + j]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.treatment[i]
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }

    /// Fails unless both treatment classes are present.
    pub fn require_both_groups(&self) -> Result<()> {
        let n1 = self.n_treated();
        if n1 == 0 {
            return Err(Error::NoTreated);
        }
        if n1 == self.len() {
            return Err(Error::NoControls);
        }
        Ok(())
    }

    /// Rows `indices` (repeats allowed) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut cov = Vec::with_capacity(indices.len() * self.n_covariates);
        for &i in indices {
            cov.extend_from_slice(self.row(i));
        }
        Self::with_names(
            cov,
            self.n_covariates,
            indices.iter().map(|&i| self.treatment[i]).collect(),
            indices.iter().map(|&i| self.outcome[i]).collect(),
            self.covariate_names.clone(),
        )
    }

    /// Same covariates and outcome with a replacement treatment vector.
    pub fn with_treatment(&self, treatment: Vec<bool>) -> Result<Self> {
        Self::with_names(
            self.covariates.clone(),
            self.n_covariates,
            treatment,
            self.outcome.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Same data with a constant added to every outcome.
    pub fn shift_outcome(&self, c: f64) -> Result<Self> {
        Self::with_names(
            self.covariates.clone(),
            self.n_covariates,
            self.treatment.clone(),
            self.outcome.iter().map(|y| y + c).collect(),
            self.covariate_names.clone(),
        )
    }

    /// Writes the dataset as CSV with columns `covariates..., treatment, outcome`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.push("treatment");
        header.push("outcome");
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.n_covariates + 2);
        for i in 0..self.len() {
            record.clear();
            record.extend(self.row(i).iter().map(|x| format!("{x:?}")));
            record.push(if self.treatment[i] { "1" } else { "0" }.to_string());
            record.push(format!("{:?}", self.outcome[i]));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// The manifest matching [`Dataset::write_csv`] output.
    pub fn default_manifest(&self) -> Manifest {
        Manifest {
            treatment: Some("treatment".into()),
            outcome: "outcome".into(),
            covariates: self.covariate_names.clone(),
        }
    }
}

/// Loads a CSV file (header row required) according to `manifest`.
/// Row order is preserved.
pub fn load_dataset(path: impl AsRef<Path>, manifest: &Manifest) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), manifest).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

/// Parses CSV content from any reader; see [`load_dataset`].
pub fn read_dataset<R: std::io::Read>(reader: R, manifest: &Manifest) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile(Default::default()));
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let treat_col = manifest.treatment.as_deref().map(col).transpose()?;
    let outcome_col = col(&manifest.outcome)?;
    let cov_cols = manifest
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut covariates = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::NonNumeric {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        for (&c, name) in cov_cols.iter().zip(&manifest.covariates) {
            covariates.push(cell(c, name)?);
        }
        outcome.push(cell(outcome_col, &manifest.outcome)?);
        let z = match treat_col {
            None => false,
            Some(c) => parse_treatment(record.get(c).unwrap_or("").trim(), row)?,
        };
        treatment.push(z);
    }
    if outcome.is_empty() {
        return Err(Error::EmptyFile(Default::default()));
    }
    Dataset::with_names(
        covariates,
        cov_cols.len(),
        treatment,
        outcome,
        manifest.covariates.clone(),
    )
}

fn parse_treatment(raw: &str, row: usize) -> Result<bool> {
    let err = || Error::NonBinaryTreatment {
        row,
        value: raw.to_string(),
    };
    match raw.to_ascii_lowercase().as_str() {
        "true" => return Ok(true),
        "false" => return Ok(false),
        _ => {}
    }
    let v: f64 = raw.parse().map_err(|_| err())?;
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(err())
    }
}

/// Partitions row indices into (treated, control), each in ascending order.
pub fn split_by_treatment(d: &Dataset) -> (Vec<usize>, Vec<usize>) {
    (0..d.len()).partition(|&i| d.is_treated(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest() -> Manifest {
        Manifest {
            treatment: Some("z".into()),
            outcome: "y".into(),
            covariates: vec!["x1".into()],
        }
    }

    #[test]
    fn parses_small_csv() {
        let csv = "x1,z,y\n0.5,1,3.0\n-1.0,0,2.5\n2.0,1,1.0\n0.0,0,0.0\n";
        let d = read_dataset(csv.as_bytes(), &manifest()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.n_covariates(), 1);
        assert_eq!(d.treatment(), &[true, false, true, false]);
        assert_eq!(d.outcome(), &[3.0, 2.5, 1.0, 0.0]);
        assert_eq!(d.row(1), &[-1.0]);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let csv = "x1,z,y\n0.5,2,3.0\n1.0,0,1.0\n";
        let err = read_dataset(csv.as_bytes(), &manifest()).unwrap_err();
        assert!(matches!(err, Error::NonBinaryTreatment { row: 0, .. }));
        assert!(err.to_string().contains("non-binary treatment"));
    }

    #[test]
    fn rejects_missing_column() {
        let csv = "x2,z,y\n0.5,1,3.0\n1.0,0,1.0\n";
        let err = read_dataset(csv.as_bytes(), &manifest()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "x1"));
    }

    #[test]
    fn rejects_missing_and_non_numeric_cells() {
        let csv = "x1,z,y\n,1,3.0\n1.0,0,1.0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &manifest()),
            Err(Error::NonNumeric { row: 0, .. })
        ));
        let csv = "x1,z,y\n0.1,1,abc\n1.0,0,1.0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &manifest()),
            Err(Error::NonNumeric { .. })
        ));
    }

    #[test]
    fn rejects_empty_input() {
        assert!(matches!(
            read_dataset("".as_bytes(), &manifest()),
            Err(Error::EmptyFile(_))
        ));
        assert!(matches!(
            read_dataset("x1,z,y\n".as_bytes(), &manifest()),
            Err(Error::EmptyFile(_))
        ));
    }

    #[test]
    fn treatment_column_is_optional() {
        let m = Manifest {
            treatment: None,
            ..manifest()
        };
        let d = read_dataset("x1,y\n1,2\n3,4\n".as_bytes(), &m).unwrap();
        assert_eq!(d.n_treated(), 0);
    }

    #[test]
    fn rejects_non_finite_values() {
        let r = Dataset::new(vec![f64::NAN, 1.0], 1, vec![true, false], vec![0.0, 1.0]);
        assert!(r.is_err());
        let r = Dataset::new(vec![0.0, 1.0], 1, vec![true, false], vec![f64::INFINITY, 1.0]);
        assert!(r.is_err());
        let r = Dataset::new(vec![0.0], 1, vec![true], vec![1.0]);
        assert!(r.is_err());
    }

    #[test]
    fn split_examples() {
        let d = Dataset::new(vec![], 0, vec![true, false, true, false], vec![0.0; 4]).unwrap();
        assert_eq!(split_by_treatment(&d), (vec![0, 2], vec![1, 3]));

        let d = Dataset::new(vec![], 0, vec![true; 3], vec![0.0; 3]).unwrap();
        assert_eq!(split_by_treatment(&d), (vec![0, 1, 2], vec![]));
        assert!(matches!(d.require_both_groups(), Err(Error::NoControls)));
    }

    #[test]
    fn split_exhaustive_small() {
        for n in 2..=8usize {
            for mask in 0u32..(1 << n) {
                let z: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let d = Dataset::new(vec![], 0, z.clone(), vec![0.0; n]).unwrap();
                let (t, c) = split_by_treatment(&d);
                assert_eq!(t.len(), mask.count_ones() as usize);
                let mut all: Vec<usize> = t.iter().chain(&c).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
                assert!(t.iter().all(|&i| z[i]) && c.iter().all(|&i| !z[i]));
            }
        }
    }

    proptest! {
        #[test]
        fn split_partitions_random(z in prop::collection::vec(any::<bool>(), 2..1000)) {
            let n = z.len();
            let d = Dataset::new(vec![], 0, z, vec![0.0; n]).unwrap();
            let (t, c) = split_by_treatment(&d);
            prop_assert_eq!(t.len() + c.len(), n);
            prop_assert_eq!(t.len(), d.n_treated());
        }

        #[test]
        fn csv_round_trip(
            rows in prop::collection::vec(
                (prop::collection::vec(-1e6f64..1e6, 3), any::<bool>(), -1e9f64..1e9),
                2..40,
            )
        ) {
            let cov: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
            let d = Dataset::from_rows(
                &cov,
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.2).collect(),
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.csv");
            d.write_csv(&path).unwrap();
            let back = load_dataset(&path, &d.default_manifest()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
