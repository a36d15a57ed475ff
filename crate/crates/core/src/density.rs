//! Kernel density estimation of the ITE distribution.
//!
//! f̂_Δ(δ) = (1/nh) Σ K((Δ̂_i − δ)/h), evaluated on an equally spaced grid
//! inside the trimmed interval [δ̲ + h, δ̄ − h].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 512;
pub const DEFAULT_REPLICATIONS: usize = 200;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
    Triweight,
}

impl Kernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            Kernel::Triweight => {
                if u.abs() <= 1.0 {
                    let t = 1.0 - u * u;
                    35.0 / 32.0 * t * t * t
                } else {
                    0.0
                }
            }
        }
    }

    /// All registered kernels are symmetric second-order kernels.
    pub fn order(self) -> u32 {
        2
    }

    pub fn id(self) -> &'static str {
        match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Triweight => "triweight",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Kernel::Gaussian),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            "triweight" => Ok(Kernel::Triweight),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

/// 1.06·σ̂·m^{−1/5}. `None` for fewer than two points or zero spread.
pub fn silverman_bandwidth(points: &[f64]) -> Option<f64> {
    let m = points.len();
    if m < 2 {
        return None;
    }
    let mean = points.iter().sum::<f64>() / m as f64;
    let var = points.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / (m - 1) as f64;
    let sd = var.sqrt();
    (sd > 0.0).then(|| 1.06 * sd * (m as f64).powf(-0.2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// (ln n / n)^{1/7}, the Monte Carlo choice.
    #[default]
    #[serde(rename = "paper_mc")]
    MonteCarlo,
    /// (ln n / n)^{1/(2P+2)} for a kernel of order P.
    Assumption2,
}

impl BandwidthRule {
    pub fn id(self) -> &'static str {
        match self {
            BandwidthRule::MonteCarlo => "paper_mc",
            BandwidthRule::Assumption2 => "assumption2",
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BandwidthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_mc" => Ok(BandwidthRule::MonteCarlo),
            "assumption2" => Ok(BandwidthRule::Assumption2),
            other => Err(Error::InvalidConfig(format!("unknown bandwidth rule `{other}`"))),
        }
    }
}

pub fn bandwidth(rule: BandwidthRule, n: usize, order: u32) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("bandwidth rule needs n >= 2, got {n}")));
    }
    if order == 0 {
        return Err(Error::InvalidConfig("kernel order must be positive".into()));
    }
    let n = n as f64;
    let base = n.ln() / n;
    let exponent = match rule {
        BandwidthRule::MonteCarlo => 1.0 / 7.0,
        BandwidthRule::Assumption2 => 1.0 / (2.0 * f64::from(order) + 2.0),
    };
    Ok(base.powf(exponent))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum BandwidthChoice {
    Rule { rule: BandwidthRule, order: u32, scale: f64 },
    Fixed { h: f64 },
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::Rule {
            rule: BandwidthRule::MonteCarlo,
            order: 2,
            scale: 1.0,
        }
    }
}

impl BandwidthChoice {
    pub fn resolve(&self, n: usize) -> Result<f64> {
        let h = match *self {
            BandwidthChoice::Rule { rule, order, scale } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidConfig(format!("bandwidth scale must be positive, got {scale}")));
                }
                scale * bandwidth(rule, n, order)?
            }
            BandwidthChoice::Fixed { h } => h,
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub kernel: Kernel,
    pub bandwidth: BandwidthChoice,
    /// [δ̲, δ̄]; defaults to the sample min/max.
    pub domain: Option<(f64, f64)>,
    pub grid_points: usize,
    /// Evaluate on [δ̲ + h, δ̄ − h] (default) or on the whole domain.
    pub trim: bool,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthChoice::default(),
            domain: None,
            grid_points: DEFAULT_GRID_POINTS,
            trim: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub kernel: Kernel,
    pub domain: (f64, f64),
    /// The interval actually covered by the grid.
    pub evaluated: (f64, f64),
    pub n: usize,
}

impl DensityEstimate {
    /// Trapezoid integral of f̂ over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(g, v)| 0.5 * (v[0] + v[1]) * (g[1] - g[0]))
            .sum()
    }

    /// sup over the grid of |f̂ − f|.
    pub fn sup_error(&self, truth: impl Fn(f64) -> f64) -> f64 {
        self.grid
            .iter()
            .zip(&self.values)
            .map(|(&g, &v)| (v - truth(g)).abs())
            .fold(0.0, f64::max)
    }
}

pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => {
            let step = (hi - lo) / (m - 1) as f64;
            (0..m)
                .map(|k| if k == m - 1 { hi } else { lo + step * k as f64 })
                .collect()
        }
    }
}

/// f̂ at each grid point with a given bandwidth.
pub fn evaluate_kde(deltas: &[f64], grid: &[f64], h: f64, kernel: Kernel) -> Vec<f64> {
    let scale = 1.0 / (deltas.len() as f64 * h);
    grid.par_iter()
        .map(|&g| deltas.iter().map(|&d| kernel.eval((d - g) / h)).sum::<f64>() * scale)
        .collect()
}

pub fn kde(deltas: &[f64], cfg: &DensityConfig) -> Result<DensityEstimate> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(bad) = deltas.iter().find(|d| !d.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite ITE value {bad}")));
    }
    if cfg.grid_points < 2 {
        return Err(Error::InvalidConfig("density grid needs at least 2 points".into()));
    }
    let h = cfg.bandwidth.resolve(deltas.len())?;
    let domain = match cfg.domain {
        Some(d) => d,
        None => {
            let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    let (lo, hi) = if cfg.trim {
        (domain.0 + h, domain.1 - h)
    } else {
        domain
    };
    if lo >= hi {
        return Err(Error::EmptyTrimmedInterval { lo, hi });
    }
    let grid = linspace(lo, hi, cfg.grid_points);
    let values = evaluate_kde(deltas, &grid, h, cfg.kernel);
    Ok(DensityEstimate {
        grid,
        values,
        bandwidth: h,
        kernel: cfg.kernel,
        domain,
        evaluated: (lo, hi),
        n: deltas.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    /// Resampling the observed data and re-running the whole pipeline.
    Bootstrap,
    /// Percentiles across independent Monte Carlo replications.
    MonteCarloPercentile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityBand {
    pub kind: BandKind,
    pub grid: Vec<f64>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub replications: usize,
    pub failures: usize,
    /// More than 5% of replicates failed.
    pub degraded: bool,
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (m - 1) as f64;
    let k = pos.floor() as usize;
    if k + 1 >= m {
        return sorted[m - 1];
    }
    let frac = pos - k as f64;
    sorted[k] + frac * (sorted[k + 1] - sorted[k])
}

/// Pointwise band from replicate curves on the point estimate's grid.
/// `None` entries are failed replicates. The band is widened where needed
/// so that it always contains the point estimate.
pub fn percentile_band(
    point: &DensityEstimate,
    replicates: &[Option<Vec<f64>>],
    level: f64,
    kind: BandKind,
) -> Result<DensityBand> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("band level must be in (0, 1), got {level}")));
    }
    let ok: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    let failures = replicates.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::InvalidConfig("every replicate failed; no band available".into()));
    }
    let m = point.grid.len();
    if ok.iter().any(|r| r.len() != m) {
        return Err(Error::Mismatch("replicate curve length differs from the grid".into()));
    }
    let (pl, pu) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut lower = Vec::with_capacity(m);
    let mut upper = Vec::with_capacity(m);
    let mut column = Vec::with_capacity(ok.len());
    for k in 0..m {
        column.clear();
        column.extend(ok.iter().map(|r| r[k]));
        column.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&column, pl).min(point.values[k]));
        upper.push(quantile_sorted(&column, pu).max(point.values[k]));
    }
    Ok(DensityBand {
        kind,
        grid: point.grid.clone(),
        point: point.values.clone(),
        lower,
        upper,
        level,
        replications: replicates.len(),
        failures,
        degraded: failures as f64 > 0.05 * replicates.len() as f64,
    })
}
