//! Individual treatment effects, the Wald LATE and sign summaries.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{CellKey, Dataset};
use crate::empirical::CellSample;
use crate::error::{Error, Result};
use crate::pipeline::Estimation;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IteRecord {
    pub id: usize,
    pub cell: CellKey,
    pub d: u8,
    pub z: u8,
    pub y_observed: f64,
    pub y_counterfactual: f64,
    pub delta_hat: f64,
    /// y_observed lies outside the support of its own arm.
    pub out_of_support: bool,
}

impl IteRecord {
    /// Δ̂ = Y − φ̂₀(Y) for treated units, φ̂₁(Y) − Y otherwise.
    pub fn delta(d: u8, y_observed: f64, y_counterfactual: f64) -> f64 {
        if d == 1 {
            y_observed - y_counterfactual
        } else {
            y_counterfactual - y_observed
        }
    }
}

/// One record per observation in a fitted cell, in id order. Observations
/// in skipped cells get no record. With monotonization on, the map values
/// at each arm's observed outcomes are rearranged before use.
pub fn estimate_ite(dataset: &Dataset, est: &Estimation) -> Result<Vec<IteRecord>> {
    let mut records = Vec::new();
    for fitted in &est.cells {
        let ids = dataset.cell_ids(fitted.cell())?;
        for d in 0..2u8 {
            let arm: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&i| dataset.observations()[i].d == d)
                .collect();
            let queries: Vec<f64> = arm.iter().map(|&i| dataset.observations()[i].y).collect();
            let estimator = fitted.estimator_for_arm(d);
            let mut map = estimator.map(&queries);
            if est.config.monotonize {
                map.rearrange();
            }
            let (lo, hi) = estimator.source_support();
            for (k, &i) in arm.iter().enumerate() {
                let o = &dataset.observations()[i];
                let y_cf = map.values[k];
                records.push(IteRecord {
                    id: o.id,
                    cell: o.x.clone(),
                    d,
                    z: o.z,
                    y_observed: o.y,
                    y_counterfactual: y_cf,
                    delta_hat: IteRecord::delta(d, o.y, y_cf),
                    out_of_support: o.y < lo || o.y > hi,
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    records.sort_by_key(|r| r.id);
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LateEstimate {
    pub value: f64,
    /// `None` for the pooled estimate.
    pub cell: Option<CellKey>,
    pub propensity_gap: f64,
    pub n: usize,
}

/// [Ȳ(1) − Ȳ(0)] / [p̂(1) − p̂(0)], with Ȳ(z) and p̂(z) the mean outcome and
/// treated share among Z = z, pooled or within one cell.
pub fn late(dataset: &Dataset, cell: Option<&CellKey>, tol: f64) -> Result<LateEstimate> {
    let rows: Vec<usize> = match cell {
        Some(k) => dataset.cell_ids(k)?.to_vec(),
        None => (0..dataset.len()).collect(),
    };
    let mut sum_y = [0.0f64; 2];
    let mut treated = [0usize; 2];
    let mut count = [0usize; 2];
    for &i in &rows {
        let o = &dataset.observations()[i];
        let z = o.z as usize;
        sum_y[z] += o.y;
        treated[z] += o.d as usize;
        count[z] += 1;
    }
    let label = cell.cloned().unwrap_or_else(CellKey::empty);
    for z in 0..2 {
        if count[z] == 0 {
            return Err(Error::EmptyInstrumentArm { cell: label, z: z as u8 });
        }
    }
    let mean = |z: usize| sum_y[z] / count[z] as f64;
    let p = |z: usize| treated[z] as f64 / count[z] as f64;
    let gap = p(1) - p(0);
    if gap.abs() < tol || gap == 0.0 {
        return Err(Error::WeakInstrument {
            cell: label,
            gap: gap.abs(),
            tol,
        });
    }
    Ok(LateEstimate {
        value: (mean(1) - mean(0)) / gap,
        cell: cell.cloned(),
        propensity_gap: gap,
        n: rows.len(),
    })
}

/// Wald LATE within a single cell sample.
pub fn late_for_sample(sample: &CellSample) -> f64 {
    let mean = |z: u8| (sample.arm(0, z).iter().sum::<f64>() + sample.arm(1, z).iter().sum::<f64>()) / sample.n_z(z) as f64;
    (mean(1) - mean(0)) / sample.propensity_diff()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SignCounts {
    pub n: usize,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
    pub negative_share: f64,
    pub positive_share: f64,
    pub mean_delta: f64,
}

impl SignCounts {
    fn from_deltas<'a>(deltas: impl Iterator<Item = &'a f64>) -> Self {
        let mut c = SignCounts::default();
        let mut sum = 0.0;
        for &v in deltas {
            c.n += 1;
            sum += v;
            if v > 0.0 {
                c.positive += 1;
            } else if v < 0.0 {
                c.negative += 1;
            } else {
                c.zero += 1;
            }
        }
        if c.n > 0 {
            c.negative_share = c.negative as f64 / c.n as f64;
            c.positive_share = c.positive as f64 / c.n as f64;
            c.mean_delta = sum / c.n as f64;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratum {
    /// Instrument value (eligibility).
    pub z: u8,
    /// Treatment (participation).
    pub d: u8,
    #[serde(flatten)]
    pub counts: SignCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignReport {
    pub overall: SignCounts,
    pub strata: Vec<Stratum>,
}

pub fn sign_classification(records: &[IteRecord]) -> SignReport {
    let mut groups: BTreeMap<(u8, u8), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.z, r.d)).or_default().push(r.delta_hat);
    }
    SignReport {
        overall: SignCounts::from_deltas(records.iter().map(|r| &r.delta_hat)),
        strata: groups
            .into_iter()
            .map(|((z, d), v)| Stratum {
                z,
                d,
                counts: SignCounts::from_deltas(v.iter()),
            })
            .collect(),
    }
}
