//! Observational data: ingestion, validation and stratification by
//! discrete covariate cells.
//!
//! Covariate values are opaque labels. Two observations share a cell when
//! every covariate label matches; no ordering of labels is assumed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Key of a covariate cell: one label per covariate column, in schema order.
/// The empty key is the single cell of a dataset without covariates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CellKey(pub Vec<String>);

impl CellKey {
    pub fn empty() -> Self {
        CellKey(Vec::new())
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("()")
        } else {
            f.write_str(&self.0.join("|"))
        }
    }
}

impl From<Vec<&str>> for CellKey {
    fn from(labels: Vec<&str>) -> Self {
        CellKey(labels.into_iter().map(str::to_owned).collect())
    }
}

impl Serialize for CellKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "()" {
            CellKey::empty()
        } else {
            CellKey(s.split('|').map(str::to_owned).collect())
        })
    }
}

/// One sampled unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: usize,
    pub y: f64,
    pub d: u8,
    pub z: u8,
    pub x: CellKey,
}

/// Column names used to read a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            outcome: "y".into(),
            treatment: "d".into(),
            instrument: "z".into(),
            covariates: Vec::new(),
        }
    }
}

/// Validated observations indexed by covariate cell. Immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset {
    observations: Vec<Observation>,
    cell_index: BTreeMap<CellKey, Vec<usize>>,
    rejected_missing: usize,
}

impl Dataset {
    /// Validates the observations and renumbers ids by position.
    pub fn new(mut observations: Vec<Observation>) -> Result<Self> {
        let mut cell_index: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for (i, obs) in observations.iter_mut().enumerate() {
            obs.id = i;
            if obs.d > 1 || obs.z > 1 {
                return Err(Error::InvalidObservation {
                    id: i,
                    reason: format!("treatment/instrument must be 0 or 1 (d={}, z={})", obs.d, obs.z),
                });
            }
            if !obs.y.is_finite() {
                return Err(Error::InvalidObservation {
                    id: i,
                    reason: format!("outcome is not finite ({})", obs.y),
                });
            }
            cell_index.entry(obs.x.clone()).or_default().push(i);
        }
        Ok(Dataset {
            observations,
            cell_index,
            rejected_missing: 0,
        })
    }

    /// Single-cell dataset from parallel (y, d, z) columns.
    pub fn from_columns(y: &[f64], d: &[u8], z: &[u8]) -> Result<Self> {
        if y.len() != d.len() || y.len() != z.len() {
            return Err(Error::Mismatch("column lengths differ".into()));
        }
        let obs = (0..y.len())
            .map(|i| Observation {
                id: i,
                y: y[i],
                d: d[i],
                z: z[i],
                x: CellKey::empty(),
            })
            .collect();
        Dataset::new(obs)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Number of input rows dropped because a field was missing.
    pub fn rejected_missing(&self) -> usize {
        self.rejected_missing
    }

    pub fn cells(&self) -> impl Iterator<Item = &CellKey> {
        self.cell_index.keys()
    }

    pub fn cell_index(&self) -> &BTreeMap<CellKey, Vec<usize>> {
        &self.cell_index
    }

    /// Observation ids in `cell`, in row order.
    pub fn cell_ids(&self, cell: &CellKey) -> Result<&[usize]> {
        self.cell_index
            .get(cell)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCell(cell.clone()))
    }

    /// Counts indexed `[d][z]`.
    pub fn arm_counts(&self, cell: &CellKey) -> Result<[[usize; 2]; 2]> {
        let mut n = [[0usize; 2]; 2];
        for &i in self.cell_ids(cell)? {
            let o = &self.observations[i];
            n[o.d as usize][o.z as usize] += 1;
        }
        Ok(n)
    }

    /// New dataset made of the given rows (repeats allowed), renumbered.
    pub fn resample(&self, rows: &[usize]) -> Result<Self> {
        Dataset::new(rows.iter().map(|&i| self.observations[i].clone()).collect())
    }
}

/// Reads a CSV file with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    read_csv(file, schema)
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "N/A")
}

fn parse_binary(field: &str, row: usize, column: &str) -> Result<u8> {
    let v: f64 = field.trim().parse().map_err(|_| Error::NonBinary {
        row,
        column: column.to_owned(),
        value: field.to_owned(),
    })?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::NonBinary {
            row,
            column: column.to_owned(),
            value: field.to_owned(),
        })
    }
}

/// Reads CSV from any reader. Data rows are numbered from 1 in error
/// messages (the header is not counted). Rows with a missing field are
/// skipped and counted in [`Dataset::rejected_missing`].
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let iy = col(&schema.outcome)?;
    let id = col(&schema.treatment)?;
    let iz = col(&schema.instrument)?;
    let ix = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    let mut rejected = 0usize;
    let mut rows = 0usize;
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 1;
        rows += 1;
        let field = |i: usize| record.get(i).unwrap_or("");
        let needed = [iy, id, iz].into_iter().chain(ix.iter().copied());
        if needed.clone().any(|i| is_missing(field(i))) {
            rejected += 1;
            continue;
        }
        let y_raw = field(iy);
        let y: f64 = y_raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::NonNumeric {
                row,
                column: schema.outcome.clone(),
                value: y_raw.to_owned(),
            })?;
        let d = parse_binary(field(id), row, &schema.treatment)?;
        let z = parse_binary(field(iz), row, &schema.instrument)?;
        let x = CellKey(ix.iter().map(|&i| field(i).to_owned()).collect());
        observations.push(Observation { id: 0, y, d, z, x });
    }
    if rows == 0 || observations.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ds = Dataset::new(observations)?;
    ds.rejected_missing = rejected;
    Ok(ds)
}

/// Finite-sample frequencies of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub cell: CellKey,
    /// Counts indexed `[d][z]`.
    pub n_dz: [[usize; 2]; 2],
    /// p̂(x, z) = n_{1z} / (n_{0z} + n_{1z}).
    pub p_hat: [f64; 2],
    /// Sample frequency of Z = z within the cell.
    pub pr_z: [f64; 2],
}

impl CellStats {
    pub fn n(&self) -> usize {
        self.n_z(0) + self.n_z(1)
    }

    pub fn n_z(&self, z: u8) -> usize {
        self.n_dz[0][z as usize] + self.n_dz[1][z as usize]
    }

    /// |p̂(x,1) − p̂(x,0)|.
    pub fn propensity_gap(&self) -> f64 {
        (self.p_hat[1] - self.p_hat[0]).abs()
    }
}

pub fn cell_stats(dataset: &Dataset, cell: &CellKey) -> Result<CellStats> {
    let n_dz = dataset.arm_counts(cell)?;
    let mut p_hat = [0.0; 2];
    for z in 0..2 {
        let nz = n_dz[0][z] + n_dz[1][z];
        if nz == 0 {
            return Err(Error::EmptyInstrumentArm {
                cell: cell.clone(),
                z: z as u8,
            });
        }
        p_hat[z] = n_dz[1][z] as f64 / nz as f64;
    }
    let n0 = n_dz[0][0] + n_dz[1][0];
    let n1 = n_dz[0][1] + n_dz[1][1];
    let n = (n0 + n1) as f64;
    Ok(CellStats {
        cell: cell.clone(),
        n_dz,
        p_hat,
        pr_z: [n0 as f64 / n, n1 as f64 / n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell_fixture(counts: [[usize; 2]; 2]) -> Dataset {
        let mut obs = Vec::new();
        for d in 0..2u8 {
            for z in 0..2u8 {
                for k in 0..counts[d as usize][z as usize] {
                    obs.push(Observation {
                        id: 0,
                        y: k as f64,
                        d,
                        z,
                        x: CellKey::empty(),
                    });
                }
            }
        }
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn four_rows_without_covariates_form_one_cell() {
        let csv = "y,d,z\n1.0,0,0\n2.0,1,0\n3.5,0,1\n4,1,1\n";
        let ds = read_csv(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.cells().count(), 1);
        assert_eq!(ds.cell_ids(&CellKey::empty()).unwrap(), &[0, 1, 2, 3]);
        assert_eq!(ds.observations()[2].y, 3.5);
    }

    #[test]
    fn covariate_columns_key_cells() {
        let mut csv = String::from("y,d,z,inc_cat,age_cat\n");
        for i in 0..32 {
            csv.push_str(&format!("{},{},{},{},{}\n", i, i % 2, (i / 2) % 2, i % 4, (i / 4) % 4));
        }
        let schema = Schema {
            covariates: vec!["inc_cat".into(), "age_cat".into()],
            ..Schema::default()
        };
        let ds = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.cells().count(), 16);
        let key = CellKey::from(vec!["1", "2"]);
        let ids = ds.cell_ids(&key).unwrap();
        assert_eq!(ids, &[9, 25]);
        let total: usize = ds.cell_index().values().map(Vec::len).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn non_binary_treatment_names_row() {
        let mut csv = String::from("y,d,z\n");
        for i in 1..=10 {
            let d = if i == 7 { 2 } else { i % 2 };
            csv.push_str(&format!("{i},{d},0\n"));
        }
        let err = read_csv(csv.as_bytes(), &Schema::default()).unwrap_err();
        match err {
            Error::NonBinary { row, ref column, .. } => {
                assert_eq!(row, 7);
                assert_eq!(column, "d");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("row 7"));
    }

    #[test]
    fn load_errors() {
        let s = Schema::default();
        assert!(matches!(
            read_csv("y,d\n1,0\n".as_bytes(), &s),
            Err(Error::MissingColumn(c)) if c == "z"
        ));
        assert!(matches!(
            read_csv("y,d,z\nabc,0,1\n".as_bytes(), &s),
            Err(Error::NonNumeric { row: 1, .. })
        ));
        assert!(matches!(read_csv("y,d,z\n".as_bytes(), &s), Err(Error::EmptyInput)));
        assert!(matches!(read_csv("".as_bytes(), &s), Err(Error::EmptyInput)));
    }

    #[test]
    fn missing_fields_are_rejected_and_counted() {
        let csv = "y,d,z\n1,0,0\n,1,0\n3,NA,1\n4,1,1\n";
        let ds = read_csv(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.rejected_missing(), 2);
        assert_eq!(ds.observations()[1].y, 4.0);
    }

    #[test]
    fn load_csv_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,d,z\n1,0,0\n2,1,1\n").unwrap();
        let ds = load_csv(&path, &Schema::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(matches!(
            load_csv(dir.path().join("nope.csv"), &Schema::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn cell_stats_hand_counts() {
        let ds = cell_fixture([[2, 1], [2, 3]]);
        let st = cell_stats(&ds, &CellKey::empty()).unwrap();
        assert_eq!(st.p_hat, [0.5, 0.75]);
        assert_eq!(st.pr_z, [0.5, 0.5]);
        assert_eq!(st.n(), 8);
    }

    #[test]
    fn one_sided_compliance_has_zero_base_propensity() {
        let ds = cell_fixture([[6, 2], [0, 5]]);
        let st = cell_stats(&ds, &CellKey::empty()).unwrap();
        assert_eq!(st.p_hat[0], 0.0);
        assert!((st.p_hat[1] - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn cell_stats_errors() {
        let ds = cell_fixture([[3, 0], [2, 0]]);
        assert!(matches!(
            cell_stats(&ds, &CellKey::empty()),
            Err(Error::EmptyInstrumentArm { z: 1, .. })
        ));
        assert!(matches!(
            cell_stats(&ds, &CellKey::from(vec!["a"])),
            Err(Error::UnknownCell(_))
        ));
    }

    #[test]
    fn cell_key_serde_round_trip() {
        let k = CellKey::from(vec!["1", "3"]);
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(s, "\"1|3\"");
        assert_eq!(serde_json::from_str::<CellKey>(&s).unwrap(), k);
        let e = serde_json::to_string(&CellKey::empty()).unwrap();
        assert_eq!(serde_json::from_str::<CellKey>(&e).unwrap(), CellKey::empty());
    }

    proptest::proptest! {
        #[test]
        fn stratification_is_partition_and_propensity_identity_holds(
            rows in proptest::collection::vec((0u8..2, 0u8..2, 0u8..3), 1..200)
        ) {
            let obs: Vec<_> = rows.iter().enumerate().map(|(i, &(d, z, c))| Observation {
                id: i, y: i as f64, d, z, x: CellKey(vec![c.to_string()]),
            }).collect();
            let ds = Dataset::new(obs).unwrap();
            let total: usize = ds.cell_index().values().map(Vec::len).sum();
            proptest::prop_assert_eq!(total, ds.len());
            for cell in ds.cells() {
                if let Ok(st) = cell_stats(&ds, cell) {
                    let again = cell_stats(&ds, cell).unwrap();
                    proptest::prop_assert_eq!(&st, &again);
                    for z in 0..2 {
                        let nz = st.n_dz[0][z] + st.n_dz[1][z];
                        // p̂ is n_1z / n_z, so scaling back recovers the integer count
                        proptest::prop_assert_eq!((st.p_hat[z] * nz as f64).round() as usize, st.n_dz[1][z]);
                    }
                    proptest::prop_assert!((st.pr_z[0] + st.pr_z[1] - 1.0).abs() < 1e-15);
                }
            }
        }
    }
}
