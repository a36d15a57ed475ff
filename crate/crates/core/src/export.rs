//! CSV writers and readers for ITE records, maps and density grids.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::counterfactual::MapInference;
use crate::data::CellKey;
use crate::density::{DensityBand, DensityEstimate};
use crate::error::{Error, Result};
use crate::ite::IteRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteRow {
    pub id: usize,
    pub cell: CellKey,
    pub d: u8,
    pub y: f64,
    pub y_counterfactual: f64,
    pub delta_hat: f64,
    pub out_of_support_flag: u8,
}

impl From<&IteRecord> for IteRow {
    fn from(r: &IteRecord) -> Self {
        IteRow {
            id: r.id,
            cell: r.cell.clone(),
            d: r.d,
            y: r.y_observed,
            y_counterfactual: r.y_counterfactual,
            delta_hat: r.delta_hat,
            out_of_support_flag: u8::from(r.out_of_support),
        }
    }
}

pub fn write_ite_csv<W: Write>(w: W, records: &[IteRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(IteRow::from(r))?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_ite_csv<R: Read>(r: R) -> Result<Vec<IteRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: IteRow = row?;
        if !row.delta_hat.is_finite() {
            return Err(Error::InvalidObservation {
                id: row.id,
                reason: "delta_hat is not finite".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct MapRow<'a> {
    cell: &'a CellKey,
    target: u8,
    y_query: f64,
    phi_hat: f64,
    se: Option<f64>,
    r_hat: f64,
    c_star_hat: f64,
    flat_width: f64,
}

/// One row per query point; an unavailable standard error is left empty.
pub fn write_map_csv<W: Write>(w: W, maps: &[MapInference]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in maps {
        for p in &m.points {
            out.serialize(MapRow {
                cell: &m.cell,
                target: m.target,
                y_query: p.y,
                phi_hat: p.phi_hat,
                se: p.se,
                r_hat: p.r_hat,
                c_star_hat: p.c_star_hat,
                flat_width: p.flat_width,
            })?;
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct DensityRow {
    delta: f64,
    f_hat: f64,
    lower: Option<f64>,
    upper: Option<f64>,
    bandwidth: f64,
    kernel: &'static str,
}

/// Density grid, with band columns left empty when there is no band.
pub fn write_density_csv<W: Write>(w: W, est: &DensityEstimate, band: Option<&DensityBand>) -> Result<()> {
    if let Some(b) = band {
        if b.grid != est.grid {
            return Err(Error::Mismatch("band grid differs from the density grid".into()));
        }
    }
    let mut out = csv::Writer::from_writer(w);
    for (k, (&g, &v)) in est.grid.iter().zip(&est.values).enumerate() {
        out.serialize(DensityRow {
            delta: g,
            f_hat: v,
            lower: band.map(|b| b.lower[k]),
            upper: band.map(|b| b.upper[k]),
            bandwidth: est.bandwidth,
            kernel: est.kernel.id(),
        })?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ite_csv_round_trip() {
        let recs = vec![
            IteRecord {
                id: 0,
                cell: CellKey::from(vec!["a", "b"]),
                d: 1,
                z: 0,
                y_observed: 8.0,
                y_counterfactual: 4.0,
                delta_hat: 4.0,
                out_of_support: false,
            },
            IteRecord {
                id: 1,
                cell: CellKey::empty(),
                d: 0,
                z: 1,
                y_observed: 1.5,
                y_counterfactual: 0.1,
                delta_hat: -1.4,
                out_of_support: true,
            },
        ];
        let mut buf = Vec::new();
        write_ite_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,cell,d,y,y_counterfactual,delta_hat,out_of_support_flag\n"));
        let rows = read_ite_csv(buf.as_slice()).unwrap();
        assert_eq!(rows[0], IteRow::from(&recs[0]));
        assert_eq!(rows[1].out_of_support_flag, 1);
        assert_eq!(rows[1].cell, CellKey::empty());
    }
}
