//! Per-cell fitting of both counterfactual maps, and the bootstrap that
//! re-runs the whole pipeline (maps, ITEs, density) on resampled data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{CounterfactualMap, MapEstimator};
use crate::data::{CellKey, Dataset};
use crate::density::{evaluate_kde, percentile_band, BandKind, DensityBand, DensityEstimate};
use crate::empirical::{CellSample, DEFAULT_PROPENSITY_TOL};
use crate::error::{Error, Result};
use crate::ite::{estimate_ite, IteRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub propensity_tol: f64,
    /// Orient the objective by the sign of the propensity difference.
    pub sign_adjust: bool,
    /// Monotone rearrangement of φ̂ across query points.
    pub monotonize: bool,
    /// Support overrides [lo, hi] for arm 0 and arm 1.
    pub support: [Option<(f64, f64)>; 2],
    pub min_cell_size: usize,
    /// Minimum size of each instrument arm and of each non-empty (d, z) arm.
    pub min_arm_size: usize,
    /// Bandwidth for the complier density in standard errors; `None` is Silverman.
    pub kde_bandwidth: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            propensity_tol: DEFAULT_PROPENSITY_TOL,
            sign_adjust: true,
            monotonize: false,
            support: [None, None],
            min_cell_size: 50,
            min_arm_size: 5,
            kde_bandwidth: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.propensity_tol >= 0.0 && self.propensity_tol < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "propensity tolerance must be in [0, 1), got {}",
                self.propensity_tol
            )));
        }
        for (d, s) in self.support.iter().enumerate() {
            if let Some((lo, hi)) = *s {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::InvalidConfig(format!("support for arm {d} is not a finite ordered pair")));
                }
            }
        }
        if let Some(h) = self.kde_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidConfig(format!("kde bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// A cell with both maps ready to evaluate.
#[derive(Debug, Clone)]
pub struct FittedCell {
    pub sample: CellSample,
    /// Indexed by target arm.
    pub estimators: [MapEstimator; 2],
}

impl FittedCell {
    pub fn cell(&self) -> &CellKey {
        self.sample.cell()
    }

    /// The map applied to observations in arm `d`.
    pub fn estimator_for_arm(&self, d: u8) -> &MapEstimator {
        &self.estimators[1 - d as usize]
    }

    /// φ̂ into `target` at the distinct source-arm outcomes.
    pub fn map_at_outcomes(&self, target: u8, monotonize: bool) -> CounterfactualMap {
        let mut q = self.sample.outcomes(1 - target).to_vec();
        q.dedup();
        let mut m = self.estimators[target as usize].map(&q);
        if monotonize {
            m.rearrange();
        }
        m
    }
}

fn check_sizes(sample: &CellSample, cfg: &EstimatorConfig) -> Result<()> {
    let too_small = |reason: String| Error::CellTooSmall {
        cell: sample.cell().clone(),
        reason,
    };
    if sample.n() < cfg.min_cell_size {
        return Err(too_small(format!("{} observations, need {}", sample.n(), cfg.min_cell_size)));
    }
    for z in 0..2u8 {
        if sample.n_z(z) < cfg.min_arm_size {
            return Err(too_small(format!("{} observations with z={z}, need {}", sample.n_z(z), cfg.min_arm_size)));
        }
    }
    for d in 0..2u8 {
        for z in 0..2u8 {
            let m = sample.n_dz(d, z);
            if m > 0 && m < cfg.min_arm_size {
                return Err(too_small(format!("arm (d={d}, z={z}) has {m} observations, need {}", cfg.min_arm_size)));
            }
        }
        if sample.outcomes(d).len() < cfg.min_arm_size {
            return Err(too_small(format!("treatment arm d={d} has {} observations", sample.outcomes(d).len())));
        }
    }
    Ok(())
}

pub fn fit_cell(sample: CellSample, cfg: &EstimatorConfig) -> Result<FittedCell> {
    check_sizes(&sample, cfg)?;
    sample.check_gap(cfg.propensity_tol)?;
    let est = |t: u8| {
        MapEstimator::new(
            &sample,
            t,
            cfg.sign_adjust,
            cfg.support[t as usize],
            cfg.support[1 - t as usize],
        )
    };
    let estimators = [est(0)?, est(1)?];
    Ok(FittedCell { sample, estimators })
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedCell {
    pub cell: CellKey,
    pub kind: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Estimation {
    pub config: EstimatorConfig,
    pub cells: Vec<FittedCell>,
    pub skipped: Vec<SkippedCell>,
}

impl Estimation {
    pub fn cell(&self, key: &CellKey) -> Option<&FittedCell> {
        self.cells.iter().find(|c| c.cell() == key)
    }
}

/// Fits every cell. Cells that cannot be estimated are skipped with a
/// reason; the call fails only when no cell survives.
pub fn fit(dataset: &Dataset, cfg: &EstimatorConfig) -> Result<Estimation> {
    cfg.validate()?;
    let keys: Vec<&CellKey> = dataset.cells().collect();
    let results: Vec<Result<FittedCell>> = keys
        .par_iter()
        .map(|k| CellSample::from_dataset(dataset, k).and_then(|s| fit_cell(s, cfg)))
        .collect();
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    let mut errors = Vec::new();
    for (k, r) in keys.into_iter().zip(results) {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => {
                skipped.push(SkippedCell {
                    cell: k.clone(),
                    kind: e.kind(),
                    reason: e.to_string(),
                });
                errors.push(e);
            }
        }
    }
    if cells.is_empty() {
        return Err(match errors.len() {
            1 => errors.remove(0),
            n => Error::NoEstimableCell(n),
        });
    }
    Ok(Estimation {
        config: cfg.clone(),
        cells,
        skipped,
    })
}

/// Maps, then ITE records, for a whole dataset.
pub fn run(dataset: &Dataset, cfg: &EstimatorConfig) -> Result<(Estimation, Vec<IteRecord>)> {
    let est = fit(dataset, cfg)?;
    let records = estimate_ite(dataset, &est)?;
    Ok((est, records))
}

/// ITE values that feed the density: in-support records only.
pub fn density_sample(records: &[IteRecord]) -> Vec<f64> {
    records
        .iter()
        .filter(|r| !r.out_of_support)
        .map(|r| r.delta_hat)
        .collect()
}

/// Generator for replicate `index` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Nonparametric resample: n rows drawn with replacement.
pub fn resample_rows(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n = dataset.len();
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    dataset.resample(&rows)
}

/// Pointwise bootstrap band around `point`. Each of the `b` replicates
/// resamples the data with `resampler`, re-estimates maps and ITEs, and
/// evaluates the density on the point estimate's grid and bandwidth.
/// Replicate r uses stream r + 1 of `seed`, so results do not depend on
/// scheduling.
pub fn bootstrap_band_with<F>(
    dataset: &Dataset,
    cfg: &EstimatorConfig,
    point: &DensityEstimate,
    b: usize,
    level: f64,
    seed: u64,
    resampler: F,
) -> Result<DensityBand>
where
    F: Fn(&Dataset, &mut ChaCha8Rng) -> Result<Dataset> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 2 replicates, got {b}")));
    }
    let curves: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64 + 1);
            let data = resampler(dataset, &mut rng).ok()?;
            let (_, records) = run(&data, cfg).ok()?;
            let deltas = density_sample(&records);
            (!deltas.is_empty()).then(|| evaluate_kde(&deltas, &point.grid, point.bandwidth, point.kernel))
        })
        .collect();
    percentile_band(point, &curves, level, BandKind::Bootstrap)
}

pub fn bootstrap_band(
    dataset: &Dataset,
    cfg: &EstimatorConfig,
    point: &DensityEstimate,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<DensityBand> {
    bootstrap_band_with(dataset, cfg, point, b, level, seed, resample_rows)
}
