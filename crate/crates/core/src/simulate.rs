//! Monte Carlo engine for the triangular design
//!
//! ```text
//! Y = h(D, ε),   D = 1(γ₀ + γ₁·Z + ν ≥ 0),   Z = 1(ξ ≥ 0),
//! ```
//!
//! with (ε, ν) uniform on [0,1] and joined by a Gaussian copula, and
//! ξ ~ N(0,1) independent of (ε, ν). Replicate r of a run is drawn from its
//! own ChaCha stream, so any replicate can be regenerated in isolation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density::{evaluate_kde, kde, percentile_band, BandKind, DensityBand, DensityConfig, DensityEstimate};
use crate::empirical::CellSample;
use crate::error::{Error, Result};
use crate::ite::{late_for_sample, IteRecord};
use crate::pipeline::{density_sample, fit, replicate_rng, run, EstimatorConfig};

/// Φ(x) through erfc; absolute error well below 1e-7.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Φ⁻¹(p) by bisection on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralFamily {
    /// h(d, ε) = (ε + 1)^{2+d}.
    #[default]
    Exponent,
    /// h(0, ε) = ln(ε + 1), h(1, ε) = (ε + 1)².
    Alternate,
}

impl StructuralFamily {
    pub fn h(self, d: u8, eps: f64) -> f64 {
        match (self, d) {
            (StructuralFamily::Exponent, 0) => (eps + 1.0).powi(2),
            (StructuralFamily::Exponent, _) => (eps + 1.0).powi(3),
            (StructuralFamily::Alternate, 0) => (eps + 1.0).ln(),
            (StructuralFamily::Alternate, _) => (eps + 1.0).powi(2),
        }
    }

    /// h(d, ·)⁻¹.
    pub fn h_inv(self, d: u8, y: f64) -> f64 {
        match (self, d) {
            (StructuralFamily::Exponent, 0) => y.sqrt() - 1.0,
            (StructuralFamily::Exponent, _) => y.cbrt() - 1.0,
            (StructuralFamily::Alternate, 0) => y.exp() - 1.0,
            (StructuralFamily::Alternate, _) => y.sqrt() - 1.0,
        }
    }

    /// The true map φ into `target`: h(target, h(1 − target, ·)⁻¹).
    pub fn phi(self, target: u8, y: f64) -> f64 {
        self.h(target, self.h_inv(1 - target, y))
    }

    pub fn delta(self, eps: f64) -> f64 {
        self.h(1, eps) - self.h(0, eps)
    }

    /// Density of Δ = δ(ε) with ε ~ U[0,1], δ strictly increasing on [0,1].
    pub fn delta_density(self, delta: f64) -> f64 {
        let (lo, hi) = (self.delta(0.0), self.delta(1.0));
        if !(lo..=hi).contains(&delta) {
            return 0.0;
        }
        let eps = self.delta_inverse(delta);
        let slope = match self {
            StructuralFamily::Exponent => (eps + 1.0) * (3.0 * eps + 1.0),
            StructuralFamily::Alternate => 2.0 * (eps + 1.0) - 1.0 / (eps + 1.0),
        };
        1.0 / slope
    }

    /// ε with δ(ε) = delta, by bisection on [0, 1].
    pub fn delta_inverse(self, delta: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.delta(mid) < delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub gamma0: f64,
    pub gamma1: f64,
    pub copula_rho: f64,
    pub family: StructuralFamily,
    pub reps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 1000,
            gamma0: -0.7,
            gamma1: 0.3,
            copula_rho: 0.3,
            family: StructuralFamily::Exponent,
            reps: 200,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if !(self.copula_rho.abs() < 1.0) {
            return Err(Error::InvalidConfig(format!("copula correlation must lie in (-1, 1), got {}", self.copula_rho)));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if !(self.gamma0.is_finite() && self.gamma1.is_finite()) {
            return Err(Error::InvalidConfig("gamma0 and gamma1 must be finite".into()));
        }
        Ok(())
    }

    /// Compliers have ν in [lo, hi).
    pub fn complier_band(&self) -> (f64, f64) {
        let a = -self.gamma0 - self.gamma1;
        let b = -self.gamma0;
        (a.min(b).clamp(0.0, 1.0), a.max(b).clamp(0.0, 1.0))
    }
}

/// Latent draws behind one simulated unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truth {
    pub eps: f64,
    pub nu: f64,
    pub y0: f64,
    pub y1: f64,
    pub delta: f64,
    /// Treatment under z = 0 and z = 1.
    pub d_potential: [u8; 2],
}

#[derive(Debug, Clone)]
pub struct SimSample {
    pub dataset: Dataset,
    pub truth: Vec<Truth>,
}

fn draw_unit(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> (f64, u8, u8, Truth) {
    let xi: f64 = rng.sample(StandardNormal);
    let w1: f64 = rng.sample(StandardNormal);
    let w2: f64 = rng.sample(StandardNormal);
    let rho = cfg.copula_rho;
    let eps = normal_cdf(w1);
    let nu = normal_cdf(rho * w1 + (1.0 - rho * rho).sqrt() * w2);
    let z = u8::from(xi >= 0.0);
    let treat = |z: u8| u8::from(cfg.gamma0 + cfg.gamma1 * f64::from(z) + nu >= 0.0);
    let d = treat(z);
    let (y0, y1) = (cfg.family.h(0, eps), cfg.family.h(1, eps));
    let truth = Truth {
        eps,
        nu,
        y0,
        y1,
        delta: y1 - y0,
        d_potential: [treat(0), treat(1)],
    };
    (if d == 1 { y1 } else { y0 }, d, z, truth)
}

/// Sample `rep_index` of the run defined by `cfg`.
pub fn draw_sample(cfg: &SimConfig, rep_index: u64) -> Result<SimSample> {
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, rep_index);
    let mut y = Vec::with_capacity(cfg.n);
    let mut d = Vec::with_capacity(cfg.n);
    let mut z = Vec::with_capacity(cfg.n);
    let mut truth = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let (yi, di, zi, t) = draw_unit(cfg, &mut rng);
        y.push(yi);
        d.push(di);
        z.push(zi);
        truth.push(t);
    }
    Ok(SimSample {
        dataset: Dataset::from_columns(&y, &d, &z)?,
        truth,
    })
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let m = intervals + intervals % 2;
    let step = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + step * k as f64);
    }
    s * step / 3.0
}

/// E[Δ | complier] by quadrature: ν uniform over the complier band, and
/// given ν, the latent normal of ε is N(ρ·Φ⁻¹(ν), 1 − ρ²).
pub fn population_late(cfg: &SimConfig) -> Result<f64> {
    cfg.validate()?;
    let (a, b) = cfg.complier_band();
    if !(b > a) {
        return Err(Error::WeakInstrument {
            cell: crate::data::CellKey::empty(),
            gap: b - a,
            tol: 0.0,
        });
    }
    let rho = cfg.copula_rho;
    let sd = (1.0 - rho * rho).sqrt();
    let phi = |w: f64| (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner = |nu: f64| {
        let m = rho * normal_quantile(nu);
        simpson(|w| cfg.family.delta(normal_cdf(m + sd * w)) * phi(w), -8.0, 8.0, 400)
    };
    Ok(simpson(inner, a, b, 400) / (b - a))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthSummary {
    pub draws: usize,
    pub mean_delta: f64,
    pub median_delta: f64,
    /// Simulated E[Δ | complier].
    pub late: f64,
    pub complier_share: f64,
}

/// Population summaries by simulation with `draws` units.
pub fn truth_oracle(cfg: &SimConfig, draws: usize) -> Result<TruthSummary> {
    cfg.validate()?;
    const CHUNK: usize = 1 << 16;
    let chunks = draws.div_ceil(CHUNK);
    let (a, b) = cfg.complier_band();
    let parts: Vec<(Vec<f64>, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replicate_rng(cfg.seed ^ 0x7275_7468, c as u64);
            let m = CHUNK.min(draws - c * CHUNK);
            let mut deltas = Vec::with_capacity(m);
            let (mut sum_c, mut n_c) = (0.0, 0usize);
            for _ in 0..m {
                let (_, _, _, t) = draw_unit(cfg, &mut rng);
                if t.nu >= a && t.nu < b {
                    sum_c += t.delta;
                    n_c += 1;
                }
                deltas.push(t.delta);
            }
            (deltas, sum_c, n_c)
        })
        .collect();
    let mut all = Vec::with_capacity(draws);
    let (mut sum_c, mut n_c) = (0.0, 0usize);
    for (d, s, n) in parts {
        all.extend(d);
        sum_c += s;
        n_c += n;
    }
    let mean = all.iter().sum::<f64>() / draws as f64;
    let mid = draws / 2;
    let (_, median, _) = all.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(TruthSummary {
        draws,
        mean_delta: mean,
        median_delta: *median,
        late: if n_c > 0 { sum_c / n_c as f64 } else { f64::NAN },
        complier_share: n_c as f64 / draws as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseRow {
    pub n: usize,
    pub gamma1: f64,
    pub reps: usize,
    pub seed: u64,
    pub ave_rmse: f64,
    pub std_rmse: f64,
    pub late_rmse: f64,
    pub population_late: f64,
    /// Replicates whose estimation failed; they are left out of the averages.
    pub failures: usize,
    #[serde(skip)]
    pub individual_rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseReport {
    pub rows: Vec<RmseRow>,
}

impl RmseReport {
    pub fn row(&self, n: usize, gamma1: f64) -> Option<&RmseRow> {
        self.rows.iter().find(|r| r.n == n && r.gamma1 == gamma1)
    }
}

/// Per-individual and LATE RMSE for one design. The base sample (stream 0)
/// fixes the individuals; replicates 1..=reps each give fresh maps that are
/// applied to the base individuals' observed (Y, D).
pub fn rmse_row(cfg: &SimConfig, est_cfg: &EstimatorConfig) -> Result<RmseRow> {
    cfg.validate()?;
    if cfg.gamma1 == 0.0 {
        return Err(Error::WeakInstrument {
            cell: crate::data::CellKey::empty(),
            gap: 0.0,
            tol: est_cfg.propensity_tol,
        });
    }
    let base = draw_sample(cfg, 0)?;
    let late_pop = population_late(cfg)?;
    let obs = base.dataset.observations();
    let reps: Vec<Option<(Vec<f64>, f64)>> = (1..=cfg.reps as u64)
        .into_par_iter()
        .map(|r| {
            let s = draw_sample(cfg, r).ok()?;
            let est = fit(&s.dataset, est_cfg).ok()?;
            let cell = est.cells.first()?;
            let sq: Vec<f64> = obs
                .iter()
                .zip(&base.truth)
                .map(|(o, t)| {
                    let y_cf = cell.estimator_for_arm(o.d).evaluate(o.y);
                    let e = IteRecord::delta(o.d, o.y, y_cf) - t.delta;
                    e * e
                })
                .collect();
            Some((sq, late_for_sample(&cell.sample)))
        })
        .collect();
    let ok: Vec<&(Vec<f64>, f64)> = reps.iter().flatten().collect();
    let failures = reps.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::NoEstimableCell(1));
    }
    let k = ok.len() as f64;
    let individual_rmse: Vec<f64> = (0..cfg.n)
        .map(|i| (ok.iter().map(|(sq, _)| sq[i]).sum::<f64>() / k).sqrt())
        .collect();
    let n = individual_rmse.len() as f64;
    let ave = individual_rmse.iter().sum::<f64>() / n;
    let var = individual_rmse.iter().map(|v| (v - ave) * (v - ave)).sum::<f64>() / (n - 1.0).max(1.0);
    let late_rmse = (ok.iter().map(|(_, l)| (l - late_pop) * (l - late_pop)).sum::<f64>() / k).sqrt();
    Ok(RmseRow {
        n: cfg.n,
        gamma1: cfg.gamma1,
        reps: cfg.reps,
        seed: cfg.seed,
        ave_rmse: ave,
        std_rmse: var.sqrt(),
        late_rmse,
        population_late: late_pop,
        failures,
        individual_rmse,
    })
}

/// One row per (n, γ₁) design, all other settings taken from `base`.
pub fn table1_harness(base: &SimConfig, designs: &[(usize, f64)], est_cfg: &EstimatorConfig) -> Result<RmseReport> {
    let rows = designs
        .iter()
        .map(|&(n, gamma1)| rmse_row(&SimConfig { n, gamma1, ..*base }, est_cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(RmseReport { rows })
}

pub const RMSE_SIZES: [usize; 3] = [1000, 2000, 4000];
pub const RMSE_GAMMAS: [f64; 3] = [0.1, 0.2, 0.3];

pub fn rmse_designs() -> Vec<(usize, f64)> {
    RMSE_SIZES
        .iter()
        .flat_map(|&n| RMSE_GAMMAS.iter().map(move |&g| (n, g)))
        .collect()
}

/// Density of the estimated ITEs across Monte Carlo replications, on the
/// grid of the base sample's estimate.
#[derive(Debug, Clone, Serialize)]
pub struct DensityReplications {
    pub base: DensityEstimate,
    pub truth: Vec<f64>,
    pub band: DensityBand,
    /// sup over the grid of |f̂ − f_Δ| for each replicate (failures omitted).
    pub sup_errors: Vec<f64>,
}

pub fn density_replications(
    cfg: &SimConfig,
    est_cfg: &EstimatorConfig,
    dens_cfg: &DensityConfig,
    level: f64,
) -> Result<DensityReplications> {
    let base_sample = draw_sample(cfg, 0)?;
    let (_, records) = run(&base_sample.dataset, est_cfg)?;
    let base = kde(&density_sample(&records), dens_cfg)?;
    let curves: Vec<Option<Vec<f64>>> = (1..=cfg.reps as u64)
        .into_par_iter()
        .map(|r| {
            let s = draw_sample(cfg, r).ok()?;
            let (_, recs) = run(&s.dataset, est_cfg).ok()?;
            let deltas = density_sample(&recs);
            (!deltas.is_empty()).then(|| evaluate_kde(&deltas, &base.grid, base.bandwidth, base.kernel))
        })
        .collect();
    let truth: Vec<f64> = base.grid.iter().map(|&g| cfg.family.delta_density(g)).collect();
    let sup_errors = curves
        .iter()
        .flatten()
        .map(|c| c.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    let band = percentile_band(&base, &curves, level, BandKind::MonteCarloPercentile)?;
    Ok(DensityReplications {
        base,
        truth,
        band,
        sup_errors,
    })
}

/// Sample cell of a simulated dataset (simulations have no covariates).
pub fn sample_cell(sample: &SimSample) -> Result<CellSample> {
    CellSample::from_dataset(&sample.dataset, &crate::data::CellKey::empty())
}
