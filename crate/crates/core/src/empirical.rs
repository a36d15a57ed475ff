//! Empirical distributions within a covariate cell: the complier CDF of
//! each treatment arm, its kernel density, the probability rank used by the
//! standard errors, and the model-restriction diagnostics.
//!
//! All frequencies are computed from integer counts so that algebraically
//! equal quantities (for instance the complier CDF under an instrument
//! relabelling) are also bitwise equal.

use serde::Serialize;

use crate::counterfactual::CounterfactualMap;
use crate::data::{CellKey, Dataset};
use crate::density::{silverman_bandwidth, Kernel};
use crate::error::{Error, Result};

/// Default minimum |p̂(x,1) − p̂(x,0)| below which a cell is refused.
pub const DEFAULT_PROPENSITY_TOL: f64 = 0.02;

/// Outcomes of one covariate cell split by treatment and instrument.
#[derive(Debug, Clone)]
pub struct CellSample {
    cell: CellKey,
    /// Sorted outcomes indexed `[d][z]`.
    arms: [[Vec<f64>; 2]; 2],
    /// Sorted outcomes of arm d, both instrument values pooled.
    pooled: [Vec<f64>; 2],
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn count_le(sorted: &[f64], y: f64) -> usize {
    sorted.partition_point(|&v| v <= y)
}

impl CellSample {
    pub fn from_dataset(dataset: &Dataset, cell: &CellKey) -> Result<Self> {
        let mut arms: [[Vec<f64>; 2]; 2] = Default::default();
        for &i in dataset.cell_ids(cell)? {
            let o = &dataset.observations()[i];
            arms[o.d as usize][o.z as usize].push(o.y);
        }
        CellSample::from_arms(cell.clone(), arms)
    }

    /// Builds a sample from outcomes indexed `[d][z]`. Fails when an
    /// instrument arm is empty.
    pub fn from_arms(cell: CellKey, arms: [[Vec<f64>; 2]; 2]) -> Result<Self> {
        let [[a00, a01], [a10, a11]] = arms;
        let arms = [[sorted(a00), sorted(a01)], [sorted(a10), sorted(a11)]];
        for z in 0..2 {
            if arms[0][z].len() + arms[1][z].len() == 0 {
                return Err(Error::EmptyInstrumentArm { cell, z: z as u8 });
            }
        }
        let pooled = [0, 1].map(|d: usize| sorted([arms[d][0].clone(), arms[d][1].clone()].concat()));
        Ok(CellSample { cell, arms, pooled })
    }

    pub fn cell(&self) -> &CellKey {
        &self.cell
    }

    /// Sorted outcomes with D = d and Z = z.
    pub fn arm(&self, d: u8, z: u8) -> &[f64] {
        &self.arms[d as usize][z as usize]
    }

    /// Sorted outcomes with D = d.
    pub fn outcomes(&self, d: u8) -> &[f64] {
        &self.pooled[d as usize]
    }

    pub fn n(&self) -> usize {
        self.n_z(0) + self.n_z(1)
    }

    pub fn n_z(&self, z: u8) -> usize {
        self.arms[0][z as usize].len() + self.arms[1][z as usize].len()
    }

    pub fn n_dz(&self, d: u8, z: u8) -> usize {
        self.arms[d as usize][z as usize].len()
    }

    /// #{Y ≤ y, D = d, Z = z}.
    pub fn count_le(&self, d: u8, z: u8, y: f64) -> usize {
        count_le(self.arm(d, z), y)
    }

    /// #{Y ≤ y, D = d}.
    pub fn count_le_pooled(&self, d: u8, y: f64) -> usize {
        count_le(self.outcomes(d), y)
    }

    /// p̂(x, z) = Pr̂(D = 1 | Z = z).
    pub fn propensity(&self, z: u8) -> f64 {
        self.n_dz(1, z) as f64 / self.n_z(z) as f64
    }

    /// Pr̂(D = d | Z = z).
    pub fn arm_share(&self, d: u8, z: u8) -> f64 {
        self.n_dz(d, z) as f64 / self.n_z(z) as f64
    }

    /// Pr̂(Z = z).
    pub fn instrument_share(&self, z: u8) -> f64 {
        self.n_z(z) as f64 / self.n() as f64
    }

    /// p̂(x,1) − p̂(x,0), signed.
    pub fn propensity_diff(&self) -> f64 {
        self.propensity(1) - self.propensity(0)
    }

    /// sign(p̂(x,1) − p̂(x,0)) computed exactly from counts; 0 when equal.
    pub fn propensity_sign(&self) -> i8 {
        let lhs = self.n_dz(1, 1) as i128 * self.n_z(0) as i128;
        let rhs = self.n_dz(1, 0) as i128 * self.n_z(1) as i128;
        (lhs - rhs).signum() as i8
    }

    /// Sample min and max of arm d.
    pub fn range(&self, d: u8) -> Option<(f64, f64)> {
        let v = self.outcomes(d);
        Some((*v.first()?, *v.last()?))
    }

    /// Refuses the cell when the propensity gap is below `tol`.
    pub fn check_gap(&self, tol: f64) -> Result<()> {
        let gap = self.propensity_diff().abs();
        if self.propensity_sign() == 0 || gap < tol {
            return Err(Error::WeakInstrument {
                cell: self.cell.clone(),
                gap,
                tol,
            });
        }
        Ok(())
    }

    /// The same sample with instrument labels exchanged.
    pub fn swap_instrument(&self) -> CellSample {
        let a = &self.arms;
        CellSample {
            cell: self.cell.clone(),
            arms: [
                [a[0][1].clone(), a[0][0].clone()],
                [a[1][1].clone(), a[1][0].clone()],
            ],
            pooled: self.pooled.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplierOptions {
    pub propensity_tol: f64,
    /// Relabel the instrument so that p̂(x,0) < p̂(x,1) before computing.
    pub sign_adjust: bool,
    /// Outcome support bounds; defaults to the sample range of the arm.
    pub support: Option<(f64, f64)>,
}

impl Default for ComplierOptions {
    fn default() -> Self {
        ComplierOptions {
            propensity_tol: DEFAULT_PROPENSITY_TOL,
            sign_adjust: true,
            support: None,
        }
    }
}

/// Estimated complier distribution of the arm-d potential outcome.
#[derive(Debug, Clone, Serialize)]
pub struct ComplierCdf {
    pub cell: CellKey,
    pub d: u8,
    /// Strictly increasing: arm-d outcomes inside the support plus both bounds.
    pub grid: Vec<f64>,
    /// Monotone projection of `raw_values`, clamped to [0, 1].
    pub values: Vec<f64>,
    /// Unconstrained ratios of empirical frequencies at each grid point.
    pub raw_values: Vec<f64>,
    pub support: (f64, f64),
    /// Sign of Pr̂(D=d|Z=0) − Pr̂(D=d|Z=1) after any relabelling.
    pub denom_sign: i8,
    /// True when the instrument labels were exchanged internally.
    pub swapped: bool,
}

/// Support bounds for arm d: the override, or the sample range.
pub(crate) fn arm_support(sample: &CellSample, d: u8, support: Option<(f64, f64)>) -> Result<(f64, f64)> {
    let (lo, hi) = match support {
        Some(s) => s,
        None => sample.range(d).ok_or_else(|| Error::EmptyCandidateSet {
            cell: sample.cell.clone(),
            arm: d,
        })?,
    };
    if !(lo <= hi) {
        return Err(Error::InvalidConfig(format!("support bounds [{lo}, {hi}] are not ordered")));
    }
    Ok((lo, hi))
}

/// Sorted, de-duplicated arm-d outcomes inside `[lo, hi]`, plus both bounds.
pub(crate) fn support_grid(outcomes: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut grid = Vec::with_capacity(outcomes.len() + 2);
    grid.push(lo);
    grid.extend(outcomes.iter().copied().filter(|&y| y > lo && y < hi));
    grid.push(hi);
    grid.dedup();
    grid
}

/// Pool-adjacent-violators projection onto nondecreasing sequences (unit weights).
pub fn isotonic_nondecreasing(values: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        let mut cur = (v, 1usize);
        while let Some(&(m, w)) = blocks.last() {
            if m <= cur.0 {
                break;
            }
            blocks.pop();
            let total = w + cur.1;
            cur = ((m * w as f64 + cur.0 * cur.1 as f64) / total as f64, total);
        }
        blocks.push(cur);
    }
    blocks
        .into_iter()
        .flat_map(|(m, w)| std::iter::repeat_n(m, w))
        .collect()
}

impl ComplierCdf {
    pub fn estimate(sample: &CellSample, d: u8, opts: &ComplierOptions) -> Result<Self> {
        sample.check_gap(opts.propensity_tol)?;
        let swapped = opts.sign_adjust && sample.propensity_sign() < 0;
        // After relabelling, labels (a, b) play the roles of (Z=0, Z=1).
        let (za, zb) = if swapped { (1u8, 0u8) } else { (0u8, 1u8) };
        let (na, nb) = (sample.n_z(za) as i128, sample.n_z(zb) as i128);
        let denom = sample.n_dz(d, za) as i128 * nb - sample.n_dz(d, zb) as i128 * na;
        let (lo, hi) = arm_support(sample, d, opts.support)?;
        let grid = support_grid(sample.outcomes(d), lo, hi);
        let raw_values: Vec<f64> = grid
            .iter()
            .map(|&g| {
                let num = sample.count_le(d, za, g) as i128 * nb - sample.count_le(d, zb, g) as i128 * na;
                if num == 0 {
                    0.0
                } else {
                    num as f64 / denom as f64
                }
            })
            .collect();
        let mut values: Vec<f64> = isotonic_nondecreasing(&raw_values)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) + 0.0)
            .collect();
        if let Some(last) = values.last_mut() {
            *last = 1.0;
        }
        Ok(ComplierCdf {
            cell: sample.cell.clone(),
            d,
            grid,
            values,
            raw_values,
            support: (lo, hi),
            denom_sign: denom.signum() as i8,
            swapped,
        })
    }

    /// Ĉ(y) as a right-continuous step function: 0 below the support,
    /// 1 at and above its upper bound.
    pub fn eval(&self, y: f64) -> f64 {
        if y < self.support.0 {
            return 0.0;
        }
        if y >= self.support.1 {
            return 1.0;
        }
        let k = count_le(&self.grid, y);
        self.values[k - 1]
    }

    /// Generalized (left-continuous) inverse: the smallest grid point whose
    /// value reaches `u`.
    pub fn quantile(&self, u: f64) -> f64 {
        let k = self.values.partition_point(|&v| v < u);
        self.grid.get(k).copied().unwrap_or(self.support.1)
    }

    /// Grid points where the monotone values strictly increase.
    pub fn jump_points(&self) -> Vec<f64> {
        let mut prev = 0.0;
        let mut out = Vec::new();
        for (&g, &v) in self.grid.iter().zip(&self.values) {
            if v > prev {
                out.push(g);
            }
            prev = v;
        }
        out
    }
}

/// Complier CDF of arm `d` in one cell.
pub fn complier_cdf(sample: &CellSample, d: u8, opts: &ComplierOptions) -> Result<ComplierCdf> {
    ComplierCdf::estimate(sample, d, opts)
}

/// Kernel estimate of Y's density within one (d, z) arm, Silverman bandwidth.
#[derive(Debug, Clone)]
pub struct ArmDensity<'a> {
    points: &'a [f64],
    h: f64,
}

impl<'a> ArmDensity<'a> {
    /// `None` when the arm has fewer than two distinct outcomes.
    pub fn new(points: &'a [f64]) -> Option<Self> {
        silverman_bandwidth(points).map(|h| ArmDensity { points, h })
    }

    pub fn with_bandwidth(points: &'a [f64], h: f64) -> Self {
        ArmDensity { points, h }
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn eval(&self, y: f64) -> f64 {
        let s: f64 = self
            .points
            .iter()
            .map(|&p| Kernel::Gaussian.eval((p - y) / self.h))
            .sum();
        s / (self.points.len() as f64 * self.h)
    }
}

/// Kernel plug-in of the scale-adjusted complier density
/// ĉ*_d(y) = ĉ_d(y)·|p̂(x,1) − p̂(x,0)|, obtained by differentiating the
/// complier CDF: (−1)^d [f̂(y|d,0)·Pr̂(D=d|Z=0) − f̂(y|d,1)·Pr̂(D=d|Z=1)],
/// oriented so that it is positive in the population whichever instrument
/// value has the higher propensity.
#[derive(Debug, Clone)]
pub struct ComplierDensity<'a> {
    sample: &'a CellSample,
    d: u8,
    arms: [Option<ArmDensity<'a>>; 2],
    orientation: f64,
}

impl<'a> ComplierDensity<'a> {
    /// Fails when a non-empty (d, z) arm is too degenerate for a kernel
    /// estimate. Empty arms contribute zero.
    pub fn new(sample: &'a CellSample, d: u8) -> Result<Self> {
        let mut arms = [None, None];
        for z in 0..2u8 {
            let pts = sample.arm(d, z);
            if pts.is_empty() {
                continue;
            }
            arms[z as usize] = Some(ArmDensity::new(pts).ok_or_else(|| Error::CellTooSmall {
                cell: sample.cell.clone(),
                reason: format!("arm (d={d}, z={z}) has no spread for a kernel density"),
            })?);
        }
        let sign_d = if d == 0 { 1.0 } else { -1.0 };
        let kappa = f64::from(sample.propensity_sign());
        Ok(ComplierDensity {
            sample,
            d,
            arms,
            orientation: sign_d * kappa,
        })
    }

    /// Same as [`ComplierDensity::new`] with one fixed bandwidth for both arms.
    pub fn with_bandwidth(sample: &'a CellSample, d: u8, h: f64) -> Self {
        let arm = |z: u8| {
            let pts = sample.arm(d, z);
            (!pts.is_empty()).then(|| ArmDensity::with_bandwidth(pts, h))
        };
        let sign_d = if d == 0 { 1.0 } else { -1.0 };
        ComplierDensity {
            sample,
            d,
            arms: [arm(0), arm(1)],
            orientation: sign_d * f64::from(sample.propensity_sign()),
        }
    }

    /// ĉ*_d(y).
    pub fn scaled(&self, y: f64) -> f64 {
        let term = |z: u8| {
            self.arms[z as usize]
                .as_ref()
                .map_or(0.0, |k| k.eval(y) * self.sample.arm_share(self.d, z))
        };
        self.orientation * (term(0) - term(1))
    }

    /// ĉ_d(y), the complier density itself.
    pub fn density(&self, y: f64) -> f64 {
        self.scaled(y) / self.sample.propensity_diff().abs()
    }
}

/// Empirical probability rank of the arm-d potential outcome.
#[derive(Debug, Clone, Serialize)]
pub struct RankFunction {
    pub cell: CellKey,
    pub d: u8,
    /// Sorted evaluation points (the map's query points).
    pub points: Vec<f64>,
    /// R̂_d at each point, nondecreasing.
    pub ranks: Vec<f64>,
}

impl RankFunction {
    /// Step evaluation: the rank at the largest point ≤ y, 0 below all points.
    pub fn eval(&self, y: f64) -> f64 {
        match count_le(&self.points, y) {
            0 => 0.0,
            k => self.ranks[k - 1],
        }
    }
}

/// R̂_d(y) = Pr̂(Y ≤ y; D=d) + Pr̂(Y ≤ φ̂_{d'}(y); D=d'), where `phi` maps
/// arm-d outcomes to arm d' = 1 − d.
pub fn rank_function(sample: &CellSample, d: u8, phi: &CounterfactualMap) -> Result<RankFunction> {
    if phi.cell != *sample.cell() {
        return Err(Error::Mismatch(format!(
            "map for cell {} applied to cell {}",
            phi.cell,
            sample.cell()
        )));
    }
    if phi.target != 1 - d {
        return Err(Error::Mismatch(format!(
            "rank of arm {d} needs the map into arm {}, got arm {}",
            1 - d,
            phi.target
        )));
    }
    let n = sample.n() as f64;
    let mut pairs: Vec<(f64, f64)> = phi
        .query_points
        .iter()
        .copied()
        .zip(phi.values.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(pairs.len());
    let mut ranks = Vec::with_capacity(pairs.len());
    let mut running = 0.0f64;
    let (lo, hi) = phi.source_support;
    for (y, v) in pairs {
        // outside the support the rank is that of the population: 0 or 1
        let r = if y < lo {
            0.0
        } else if y >= hi {
            1.0
        } else {
            (sample.count_le_pooled(d, y) + sample.count_le_pooled(1 - d, v)) as f64 / n
        };
        // pointwise maps need not be monotone; the rank envelope is.
        running = running.max(r);
        points.push(y);
        ranks.push(running);
    }
    Ok(RankFunction {
        cell: sample.cell().clone(),
        d,
        points,
        ranks,
    })
}

/// Departures of the raw complier CDF from a distribution function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub cell: CellKey,
    pub d: u8,
    /// max over i < j of raw_i − raw_j (0 when monotone).
    pub max_downward_violation: f64,
    /// Share of adjacent grid intervals on which the raw values decrease.
    pub violating_fraction: f64,
    pub n_below_zero: usize,
    pub n_above_one: usize,
    pub min_raw: f64,
    pub max_raw: f64,
}

pub fn monotonicity_diagnostic(c: &ComplierCdf) -> MonotonicityReport {
    let raw = &c.raw_values;
    let mut running_max = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in raw {
        running_max = running_max.max(v);
        worst = worst.max(running_max - v);
    }
    let intervals = raw.len().saturating_sub(1);
    let drops = raw.windows(2).filter(|w| w[1] < w[0]).count();
    MonotonicityReport {
        cell: c.cell.clone(),
        d: c.d,
        max_downward_violation: worst,
        violating_fraction: if intervals == 0 {
            0.0
        } else {
            drops as f64 / intervals as f64
        },
        n_below_zero: raw.iter().filter(|&&v| v < 0.0).count(),
        n_above_one: raw.iter().filter(|&&v| v > 1.0).count(),
        min_raw: raw.iter().copied().fold(f64::INFINITY, f64::min),
        max_raw: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlayPoint {
    pub y: f64,
    pub c_hat: f64,
    pub f_hat: f64,
}

/// Comparison of the complier support with the arm's outcome support.
#[derive(Debug, Clone, Serialize)]
pub struct SupportReport {
    pub cell: CellKey,
    pub d: u8,
    pub complier_support: (f64, f64),
    pub arm_support: (f64, f64),
    /// Hausdorff distance between the two intervals.
    pub gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlay: Option<Vec<OverlayPoint>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportOptions {
    /// The complier support runs from the first grid point where Ĉ exceeds
    /// `level_tol` to the first where it reaches 1 − `level_tol`.
    pub level_tol: f64,
    /// Number of overlay points; 0 skips the density overlay.
    pub overlay_points: usize,
}

impl Default for SupportOptions {
    fn default() -> Self {
        SupportOptions {
            level_tol: 0.0,
            overlay_points: 0,
        }
    }
}

pub fn support_condition_diagnostic(
    sample: &CellSample,
    d: u8,
    copts: &ComplierOptions,
    sopts: &SupportOptions,
) -> Result<SupportReport> {
    let c = ComplierCdf::estimate(sample, d, copts)?;
    let arm = sample.range(d).ok_or_else(|| Error::EmptyCandidateSet {
        cell: sample.cell().clone(),
        arm: d,
    })?;
    let tol = sopts.level_tol;
    let first = |pred: &dyn Fn(f64) -> bool| {
        c.grid
            .iter()
            .zip(&c.values)
            .find(|(_, &v)| pred(v))
            .map(|(&g, _)| g)
    };
    let lo = first(&|v| v > tol).unwrap_or(c.support.1);
    let hi = first(&|v| v >= 1.0 - tol).unwrap_or(c.support.1);
    let gap = (lo - arm.0).abs().max((hi - arm.1).abs());

    let overlay = if sopts.overlay_points >= 2 {
        let cd = ComplierDensity::new(sample, d)?;
        let fd = ArmDensity::new(sample.outcomes(d)).ok_or_else(|| Error::CellTooSmall {
            cell: sample.cell().clone(),
            reason: format!("arm d={d} has no spread for a kernel density"),
        })?;
        let m = sopts.overlay_points;
        Some(
            (0..m)
                .map(|k| {
                    let y = arm.0 + (arm.1 - arm.0) * k as f64 / (m - 1) as f64;
                    OverlayPoint {
                        y,
                        c_hat: cd.density(y),
                        f_hat: fd.eval(y),
                    }
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(SupportReport {
        cell: sample.cell().clone(),
        d,
        complier_support: (lo, hi),
        arm_support: arm,
        gap,
        overlay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Z=0: (1,d0) (2,d0) (3,d1) (4,d1); Z=1: (1,d0) (5,d1) (6,d1) (7,d1).
    pub(crate) fn eight_rows() -> CellSample {
        CellSample::from_arms(
            CellKey::empty(),
            [[vec![1.0, 2.0], vec![1.0]], [vec![3.0, 4.0], vec![5.0, 6.0, 7.0]]],
        )
        .unwrap()
    }

    fn opts() -> ComplierOptions {
        ComplierOptions::default()
    }

    #[test]
    fn eight_row_complier_cdf_by_hand() {
        let s = eight_rows();
        assert_eq!(s.propensity(0), 0.5);
        assert_eq!(s.propensity(1), 0.75);
        let c0 = complier_cdf(&s, 0, &opts()).unwrap();
        assert_eq!(c0.grid, vec![1.0, 2.0]);
        // denominator 0.5 − 0.25; at y=1 (0.25 − 0.25)/0.25, at y=2 (0.5 − 0.25)/0.25
        assert_eq!(c0.raw_values, vec![0.0, 1.0]);
        assert_eq!(c0.eval(1.0), 0.0);
        assert_eq!(c0.eval(2.0), 1.0);
        assert_eq!(c0.eval(0.5), 0.0);
        assert_eq!(c0.eval(10.0), 1.0);

        let c1 = complier_cdf(&s, 1, &opts()).unwrap();
        assert_eq!(c1.grid, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        // (F0 − F1)/(p0 − p1) with p0 − p1 = −0.25
        assert_eq!(c1.raw_values, vec![-1.0, -2.0, -1.0, 0.0, 1.0]);
        assert_eq!(c1.values, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cdf_is_zero_below_and_one_above_observed_range() {
        let s = eight_rows();
        for d in 0..2 {
            let c = complier_cdf(&s, d, &opts()).unwrap();
            let (lo, hi) = s.range(d).unwrap();
            assert_eq!(c.eval(lo - 1e-9), 0.0);
            assert_eq!(c.eval(hi), 1.0);
            assert_eq!(c.eval(hi + 5.0), 1.0);
        }
    }

    #[test]
    fn one_sided_compliance_equals_treated_ecdf() {
        let treated_z1 = vec![2.5, 0.5, 4.0, 1.5, 3.0, 2.0, 9.0];
        let s = CellSample::from_arms(
            CellKey::empty(),
            [[vec![1.0, 2.0, 3.0, 0.2, 8.0], vec![0.7, 1.1, 5.0]], [vec![], treated_z1.clone()]],
        )
        .unwrap();
        assert_eq!(s.propensity(0), 0.0);
        let c = complier_cdf(&s, 1, &opts()).unwrap();
        let ecdf = sorted(treated_z1);
        for (&g, &v) in c.grid.iter().zip(&c.values) {
            let k = ecdf.partition_point(|&x| x <= g);
            assert_eq!(v, k as f64 / ecdf.len() as f64);
            assert_eq!(v, c.raw_values[c.grid.iter().position(|&x| x == g).unwrap()]);
        }
    }

    #[test]
    fn weak_instrument_and_missing_arm_are_refused() {
        let s = CellSample::from_arms(
            CellKey::empty(),
            [[vec![1.0, 2.0], vec![1.5, 2.5]], [vec![3.0, 4.0], vec![5.0, 6.0]]],
        )
        .unwrap();
        assert!(matches!(complier_cdf(&s, 0, &opts()), Err(Error::WeakInstrument { .. })));
        assert!(matches!(
            CellSample::from_arms(CellKey::empty(), [[vec![1.0], vec![]], [vec![2.0], vec![]]]),
            Err(Error::EmptyInstrumentArm { z: 1, .. })
        ));
    }

    #[test]
    fn isotonic_projection() {
        assert_eq!(isotonic_nondecreasing(&[0.0, 0.4, 0.3, 1.0]), vec![0.0, 0.35, 0.35, 1.0]);
        assert_eq!(isotonic_nondecreasing(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic_nondecreasing(&[]), Vec::<f64>::new());
    }

    #[test]
    fn monotonicity_report_arithmetic() {
        let mut c = complier_cdf(&eight_rows(), 0, &opts()).unwrap();
        let clean = monotonicity_diagnostic(&c);
        assert_eq!(clean.max_downward_violation, 0.0);
        assert_eq!(clean.violating_fraction, 0.0);
        c.raw_values = vec![0.0, 0.4, 0.3, 1.0];
        let r = monotonicity_diagnostic(&c);
        assert!((r.max_downward_violation - 0.1).abs() < 1e-15);
        assert!((r.violating_fraction - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.n_below_zero + r.n_above_one, 0);
    }

    #[test]
    fn support_gap_zero_when_complier_support_matches() {
        // compliers alone move between arms; no never-takers or always-takers
        let y0: Vec<f64> = (0..=14).map(|k| 1.0 + 0.5 * k as f64).collect();
        let s = CellSample::from_arms(
            CellKey::empty(),
            [[y0.clone(), vec![]], [vec![], y0.iter().map(|y| y + 1.0).collect()]],
        )
        .unwrap();
        let r = support_condition_diagnostic(&s, 0, &opts(), &SupportOptions::default()).unwrap();
        assert_eq!(r.arm_support, (1.0, 8.0));
        assert_eq!(r.complier_support, (1.0, 8.0));
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn support_gap_positive_when_compliers_occupy_subinterval() {
        // never-takers identical in both instrument arms span [1, 8];
        // compliers only occupy [3, 5].
        let never: Vec<f64> = (0..=70).map(|k| 1.0 + 0.1 * k as f64).collect();
        let compliers: Vec<f64> = (0..=20).map(|k| 3.0 + 0.1 * k as f64).collect();
        let s = CellSample::from_arms(
            CellKey::empty(),
            [
                [[never.clone(), compliers.clone()].concat(), never.clone()],
                [vec![], compliers.iter().map(|y| y * 2.0).collect()],
            ],
        )
        .unwrap();
        let sopts = SupportOptions {
            level_tol: 0.0,
            overlay_points: 25,
        };
        let r = support_condition_diagnostic(&s, 0, &opts(), &sopts).unwrap();
        assert!((r.complier_support.0 - 3.0).abs() < 1e-12);
        assert!((r.complier_support.1 - 5.0).abs() < 1e-12);
        assert!((r.gap - 3.0).abs() < 1e-12);
        let overlay = r.overlay.unwrap();
        assert_eq!(overlay.len(), 25);
        assert!(overlay.iter().all(|p| p.f_hat > 0.0));
    }

    #[test]
    fn complier_density_one_sided_is_treated_density() {
        let pts: Vec<f64> = (0..40).map(|k| (k as f64 * 0.37).sin() + 2.0).collect();
        let s = CellSample::from_arms(
            CellKey::empty(),
            [[vec![1.0, 2.0, 3.0, 4.0], vec![1.5, 2.5]], [vec![], pts.clone()]],
        )
        .unwrap();
        let cd = ComplierDensity::new(&s, 1).unwrap();
        let f = ArmDensity::new(s.arm(1, 1)).unwrap();
        for y in [1.2, 2.0, 2.7] {
            let expect = f.eval(y) * s.arm_share(1, 1);
            assert!((cd.scaled(y) - expect).abs() < 1e-15);
            assert!((cd.density(y) - f.eval(y)).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn clamped_cdf_is_valid_and_label_swap_is_bitwise_invariant(
            a00 in proptest::collection::vec(0.0f64..10.0, 1..30),
            a01 in proptest::collection::vec(0.0f64..10.0, 1..30),
            a10 in proptest::collection::vec(0.0f64..10.0, 1..30),
            a11 in proptest::collection::vec(0.0f64..10.0, 1..30),
        ) {
            let s = CellSample::from_arms(CellKey::empty(), [[a00, a01], [a10, a11]]).unwrap();
            let o = ComplierOptions { propensity_tol: 1e-9, ..opts() };
            for d in 0..2 {
                let Ok(c) = complier_cdf(&s, d, &o) else { continue };
                proptest::prop_assert!(c.values.windows(2).all(|w| w[0] <= w[1]));
                proptest::prop_assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
                proptest::prop_assert_eq!(*c.values.last().unwrap(), 1.0);
                proptest::prop_assert_eq!(c.eval(c.support.0 - 1.0), 0.0);

                let swapped = s.swap_instrument();
                for adjust in [true, false] {
                    let o2 = ComplierOptions { sign_adjust: adjust, ..o };
                    let c1 = complier_cdf(&s, d, &o2).unwrap();
                    let c2 = complier_cdf(&swapped, d, &o2).unwrap();
                    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    proptest::prop_assert_eq!(bits(&c1.values), bits(&c2.values));
                    proptest::prop_assert_eq!(bits(&c1.raw_values), bits(&c2.raw_values));
                }
            }
        }
    }
}
