//! Optional JSON config file and its merge with command-line flags.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use cfmap::density::{BandwidthChoice, BandwidthRule, DensityConfig, Kernel, DEFAULT_GRID_POINTS, DEFAULT_REPLICATIONS};
use cfmap::simulate::{SimConfig, StructuralFamily};
use cfmap::EstimatorConfig;

use crate::{EstimatorArgs, Usage};

pub fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("`{a}` is not a number"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("`{b}` is not a number"))?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(format!("`{s}` is not a finite ordered pair"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityOptions {
    pub kernel: Kernel,
    pub rule: BandwidthRule,
    pub order: u32,
    pub scale: f64,
    pub bandwidth: Option<f64>,
    pub domain: Option<(f64, f64)>,
    pub grid_points: usize,
    pub trim: bool,
    pub bootstrap: bool,
    pub reps: usize,
    pub level: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            kernel: Kernel::Gaussian,
            rule: BandwidthRule::MonteCarlo,
            order: 2,
            scale: 1.0,
            bandwidth: None,
            domain: None,
            grid_points: DEFAULT_GRID_POINTS,
            trim: true,
            bootstrap: true,
            reps: DEFAULT_REPLICATIONS,
            level: 0.9,
        }
    }
}

impl DensityOptions {
    pub fn validate(&self) -> Result<(), Usage> {
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Usage(format!("--bandwidth must be positive, got {h}")));
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Usage(format!("--bandwidth-scale must be positive, got {}", self.scale)));
        }
        if self.order == 0 {
            return Err(Usage("--P must be at least 1".into()));
        }
        if self.grid_points < 2 {
            return Err(Usage("--grid-points must be at least 2".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Usage(format!("--level must be in (0, 1), got {}", self.level)));
        }
        if self.bootstrap && self.reps < 2 {
            return Err(Usage("--reps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn density_config(&self) -> DensityConfig {
        DensityConfig {
            kernel: self.kernel,
            bandwidth: match self.bandwidth {
                Some(h) => BandwidthChoice::Fixed { h },
                None => BandwidthChoice::Rule {
                    rule: self.rule,
                    order: self.order,
                    scale: self.scale,
                },
            },
            domain: self.domain,
            grid_points: self.grid_points,
            trim: self.trim,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub estimator: EstimatorConfig,
    pub density: DensityOptions,
    pub simulation: SimConfig,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }
}

/// File values overridden by whichever flags were given.
pub fn estimator_config(file: &EstimatorConfig, args: &EstimatorArgs) -> Result<EstimatorConfig, Usage> {
    let mut cfg = file.clone();
    if let Some(t) = args.propensity_tol {
        cfg.propensity_tol = t;
    }
    if args.monotonize {
        cfg.monotonize = true;
    }
    if args.no_sign_adjust {
        cfg.sign_adjust = false;
    }
    if args.support0.is_some() {
        cfg.support[0] = args.support0;
    }
    if args.support1.is_some() {
        cfg.support[1] = args.support1;
    }
    if let Some(m) = args.min_cell_size {
        cfg.min_cell_size = m;
    }
    if let Some(m) = args.min_arm_size {
        cfg.min_arm_size = m;
    }
    if args.kde_bandwidth.is_some() {
        cfg.kde_bandwidth = args.kde_bandwidth;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_kernel(s: &str) -> Result<Kernel, Usage> {
    s.parse().map_err(|e: cfmap::Error| Usage(e.to_string()))
}

pub fn parse_rule(s: &str) -> Result<BandwidthRule, Usage> {
    s.parse().map_err(|e: cfmap::Error| Usage(e.to_string()))
}

pub fn parse_family(s: &str) -> Result<StructuralFamily, Usage> {
    match s {
        "exponent" => Ok(StructuralFamily::Exponent),
        "alternate" => Ok(StructuralFamily::Alternate),
        other => Err(Usage(format!("unknown structural family `{other}`"))),
    }
}
