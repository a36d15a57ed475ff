//! Counterfactual mappings φ̂_{d'}: for an outcome observed in arm d, the
//! outcome the same unit would realize in arm d' = 1 − d.
//!
//! The estimator minimizes the sample objective Q̂_{d'}(·) over the target
//! arm's support. For a fixed source outcome the objective is piecewise
//! linear in the target outcome with kinks only at observed target-arm
//! outcomes, so minimizing over those outcomes plus the support bounds is
//! exact. On the segment starting at candidate c_k the slope is
//!
//! ```text
//! 2·κ·(−1)^{d'} / (n₀n₁) · [ (k₀(c_k) + j₀)·n₁ − (k₁(c_k) + j₁)·n₀ ]
//! ```
//!
//! where k_z counts target-arm outcomes ≤ c_k and j_z counts source-arm
//! outcomes ≤ y_d, both within Z = z, and κ = sign(p̂(x,1) − p̂(x,0)). The
//! bracket is an integer, so flat segments are detected exactly. The global
//! minimum over candidates is found on the lower convex hull of the
//! cumulative objective, one binary search per query.

use serde::Serialize;

use crate::data::CellKey;
use crate::empirical::{arm_support, support_grid, CellSample, ComplierCdf, ComplierDensity};
use crate::error::{Error, Result};

/// sign(u) = 2·1(u > 0) − 1, so sign(0) = −1.
fn sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn orientation(sample: &CellSample, target: u8, sign_adjust: bool) -> i8 {
    let kappa = if sign_adjust { sample.propensity_sign() } else { 1 };
    if target == 0 {
        kappa
    } else {
        -kappa
    }
}

/// Q̂_{d'}(y₀, y₁) evaluated directly from its defining sample averages,
/// with the target arm d' = `target` and the source arm d = 1 − d'.
///
/// ρ̂_{d'}(z) = [Σ_{D=d',Z=z} |Y − y_{d'}| − y_{d'} Σ_{D=d,Z=z} sign(Y − y_d)] / n_z
/// and Q̂ = κ·(−1)^{d'}·[ρ̂_{d'}(0) − ρ̂_{d'}(1)], where κ is the sign of the
/// propensity difference when `sign_adjust` is set and 1 otherwise.
pub fn empirical_objective(sample: &CellSample, target: u8, y_source: f64, y_target: f64, sign_adjust: bool) -> f64 {
    let source = 1 - target;
    let rho = |z: u8| {
        let abs: f64 = sample.arm(target, z).iter().map(|&y| (y - y_target).abs()).sum();
        let sgn: f64 = sample.arm(source, z).iter().map(|&y| sign(y - y_source)).sum();
        (abs - y_target * sgn) / sample.n_z(z) as f64
    };
    f64::from(orientation(sample, target, sign_adjust)) * (rho(0) - rho(1))
}

/// Estimated counterfactual map into `target`, evaluated at query points.
#[derive(Debug, Clone, Serialize)]
pub struct CounterfactualMap {
    pub cell: CellKey,
    /// The arm being imputed (d').
    pub target: u8,
    pub query_points: Vec<f64>,
    pub values: Vec<f64>,
    /// Width of the set of tied minimizers (0 for a unique minimizer).
    pub flat_widths: Vec<f64>,
    /// Target-arm support [y̲_{d'}, ȳ_{d'}].
    pub support: (f64, f64),
    /// Source-arm support, the domain of the map.
    pub source_support: (f64, f64),
}

impl CounterfactualMap {
    pub fn source(&self) -> u8 {
        1 - self.target
    }

    /// Replaces the pointwise values by their monotone rearrangement.
    pub fn rearrange(&mut self) {
        let mut order: Vec<usize> = (0..self.query_points.len()).collect();
        order.sort_by(|&a, &b| self.query_points[a].total_cmp(&self.query_points[b]));
        let mut vals = self.values.clone();
        vals.sort_by(f64::total_cmp);
        for (rank, &i) in order.iter().enumerate() {
            self.values[i] = vals[rank];
        }
    }
}

/// Minimizer of Q̂ at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimizer {
    pub value: f64,
    pub flat_width: f64,
}

/// Precomputed exact minimizer of Q̂_{d'}(·) for one cell and target arm.
#[derive(Debug, Clone)]
pub struct MapEstimator {
    cell: CellKey,
    target: u8,
    source_arms: [Vec<f64>; 2],
    n_z: [i64; 2],
    orient: i8,
    candidates: Vec<f64>,
    /// g_k = k₀(c_k)·n₁ − k₁(c_k)·n₀ for each segment start.
    seg: Vec<i64>,
    /// Lower hull vertex indices into `candidates`.
    hull: Vec<usize>,
    hull_slopes: Vec<f64>,
    support: (f64, f64),
    source_support: (f64, f64),
}

impl MapEstimator {
    /// `support` overrides the target arm's support bounds,
    /// `source_support` the source arm's (used only to report the domain).
    pub fn new(
        sample: &CellSample,
        target: u8,
        sign_adjust: bool,
        support: Option<(f64, f64)>,
        source_support: Option<(f64, f64)>,
    ) -> Result<Self> {
        let source = 1 - target;
        let (lo, hi) = arm_support(sample, target, support)?;
        let src = arm_support(sample, source, source_support)?;
        let candidates = support_grid(sample.outcomes(target), lo, hi);
        let n_z = [sample.n_z(0) as i64, sample.n_z(1) as i64];
        let seg: Vec<i64> = candidates
            .iter()
            .map(|&c| sample.count_le(target, 0, c) as i64 * n_z[1] - sample.count_le(target, 1, c) as i64 * n_z[0])
            .collect();
        let orient = orientation(sample, target, sign_adjust);

        // cumulative objective (up to a positive factor and constant) at each candidate
        let mut cum = Vec::with_capacity(candidates.len());
        let mut acc = 0.0f64;
        cum.push(0.0);
        for k in 1..candidates.len() {
            acc += seg[k - 1] as f64 * (candidates[k] - candidates[k - 1]);
            cum.push(f64::from(orient) * acc);
        }
        let (hull, hull_slopes) = lower_hull(&candidates, &cum);
        Ok(MapEstimator {
            cell: sample.cell().clone(),
            target,
            source_arms: [sample.arm(source, 0).to_vec(), sample.arm(source, 1).to_vec()],
            n_z,
            orient,
            candidates,
            seg,
            hull,
            hull_slopes,
            support: (lo, hi),
            source_support: src,
        })
    }

    pub fn target(&self) -> u8 {
        self.target
    }

    pub fn cell(&self) -> &CellKey {
        &self.cell
    }

    pub fn candidates(&self) -> &[f64] {
        &self.candidates
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn source_support(&self) -> (f64, f64) {
        self.source_support
    }

    fn source_offset(&self, y_source: f64) -> i64 {
        let j = |z: usize| self.source_arms[z].partition_point(|&v| v <= y_source) as i64;
        j(0) * self.n_z[1] - j(1) * self.n_z[0]
    }

    /// φ̂_{d'}(y_source): the smallest minimizing candidate.
    pub fn minimize(&self, y_source: f64) -> Minimizer {
        let offset = self.source_offset(y_source);
        // minimize cum_k + λ·c_k over hull vertices, λ = orient·J
        let lambda = f64::from(self.orient) * offset as f64;
        let mut edge = self.hull_slopes.partition_point(|&s| s + lambda < 0.0);
        // hull edges that are flat up to rounding join tied vertices: keep the leftmost
        let tol = 1e-10 * (1.0 + lambda.abs());
        while edge > 0 && (self.hull_slopes[edge - 1] + lambda).abs() <= tol {
            edge -= 1;
        }
        let mut k = self.hull[edge];
        // tied neighbours: segments with an exactly zero slope
        while k > 0 && self.seg[k - 1] + offset == 0 {
            k -= 1;
        }
        let mut right = k;
        while right + 1 < self.candidates.len() && self.seg[right] + offset == 0 {
            right += 1;
        }
        Minimizer {
            value: self.candidates[k],
            flat_width: self.candidates[right] - self.candidates[k],
        }
    }

    pub fn evaluate(&self, y_source: f64) -> f64 {
        self.minimize(y_source).value
    }

    pub fn map(&self, query_points: &[f64]) -> CounterfactualMap {
        let mins: Vec<Minimizer> = query_points.iter().map(|&y| self.minimize(y)).collect();
        CounterfactualMap {
            cell: self.cell.clone(),
            target: self.target,
            query_points: query_points.to_vec(),
            values: mins.iter().map(|m| m.value).collect(),
            flat_widths: mins.iter().map(|m| m.flat_width).collect(),
            support: self.support,
            source_support: self.source_support,
        }
    }
}

/// Lower convex hull of points sorted by strictly increasing x. Returns the
/// vertex indices and the slopes of consecutive hull edges.
fn lower_hull(x: &[f64], y: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut hull: Vec<usize> = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b unless it lies strictly below segment a–i
            let cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let slopes = hull
        .windows(2)
        .map(|w| (y[w[1]] - y[w[0]]) / (x[w[1]] - x[w[0]]))
        .collect();
    (hull, slopes)
}

/// φ̂_{d'} at each query point by exact minimization of Q̂_{d'}.
pub fn estimate_map(
    sample: &CellSample,
    target: u8,
    query_points: &[f64],
    support: Option<(f64, f64)>,
) -> Result<CounterfactualMap> {
    Ok(MapEstimator::new(sample, target, true, support, None)?.map(query_points))
}

/// Plug-in map C_{d'}^{-1}(C_d(y)) from two complier CDFs.
pub fn plugin_map_oracle(source: &ComplierCdf, target: &ComplierCdf, query_points: &[f64]) -> Result<CounterfactualMap> {
    if source.cell != target.cell || source.d == target.d {
        return Err(Error::Mismatch(format!(
            "plug-in needs both arms of one cell, got ({}, d={}) and ({}, d={})",
            source.cell, source.d, target.cell, target.d
        )));
    }
    Ok(CounterfactualMap {
        cell: target.cell.clone(),
        target: target.d,
        query_points: query_points.to_vec(),
        values: query_points.iter().map(|&y| target.quantile(source.eval(y))).collect(),
        flat_widths: vec![0.0; query_points.len()],
        support: target.support,
        source_support: source.support,
    })
}

/// Pointwise asymptotic standard error of φ̂_{d'}(y):
/// [√n · ĉ*]⁻¹ · √((R̂ − R̂²) / (Pr̂(Z=0)·Pr̂(Z=1))).
pub fn standard_error(n: usize, c_star: f64, rank: f64, pr_z0: f64, pr_z1: f64) -> f64 {
    let var = (rank - rank * rank).max(0.0) / (pr_z0 * pr_z1);
    var.sqrt() / ((n as f64).sqrt() * c_star)
}

/// Σ(y, y') = (R(min(y,y')) − R(y)R(y')) / (Pr(Z=0)·Pr(Z=1)), given the ranks
/// at y and y' (R is nondecreasing, so R(min) = min of the ranks).
pub fn covariance_kernel(rank_y: f64, rank_y2: f64, pr_z0: f64, pr_z1: f64) -> f64 {
    (rank_y.min(rank_y2) - rank_y * rank_y2) / (pr_z0 * pr_z1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferencePoint {
    pub y: f64,
    pub phi_hat: f64,
    /// `None` when ĉ* is below the floor.
    pub se: Option<f64>,
    pub r_hat: f64,
    pub c_star_hat: f64,
    pub flat_width: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MapInference {
    pub cell: CellKey,
    pub target: u8,
    pub n: usize,
    pub pr_z: [f64; 2],
    pub c_star_floor: f64,
    pub points: Vec<InferencePoint>,
}

impl MapInference {
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        covariance_kernel(self.points[i].r_hat, self.points[j].r_hat, self.pr_z[0], self.pr_z[1])
    }

    pub fn unavailable(&self) -> usize {
        self.points.iter().filter(|p| p.se.is_none()).count()
    }
}

/// Floor on ĉ*, relative to the target outcome scale.
pub const C_STAR_FLOOR: f64 = 1e-6;

/// Standard errors for every query of `map`. `kde_bandwidth` fixes the
/// bandwidth of the arm densities; `None` uses Silverman's rule per arm.
pub fn map_inference(sample: &CellSample, map: &CounterfactualMap, kde_bandwidth: Option<f64>) -> Result<MapInference> {
    if map.cell != *sample.cell() {
        return Err(Error::Mismatch(format!("map for cell {} applied to cell {}", map.cell, sample.cell())));
    }
    let density = match kde_bandwidth {
        None => ComplierDensity::new(sample, map.target)?,
        Some(h) if h > 0.0 => ComplierDensity::with_bandwidth(sample, map.target, h),
        Some(h) => return Err(Error::InvalidConfig(format!("kde bandwidth must be positive, got {h}"))),
    };
    let rank = crate::empirical::rank_function(sample, map.source(), map)?;
    let pr_z = [sample.instrument_share(0), sample.instrument_share(1)];
    let width = map.support.1 - map.support.0;
    let floor = if width > 0.0 {
        C_STAR_FLOOR / width
    } else {
        C_STAR_FLOOR
    };
    let n = sample.n();
    let points = map
        .query_points
        .iter()
        .zip(&map.values)
        .zip(&map.flat_widths)
        .map(|((&y, &phi), &flat)| {
            let c_star = density.scaled(phi);
            let r = rank.eval(y);
            let se = (c_star >= floor).then(|| standard_error(n, c_star, r, pr_z[0], pr_z[1]));
            InferencePoint {
                y,
                phi_hat: phi,
                se,
                r_hat: r,
                c_star_hat: c_star,
                flat_width: flat,
            }
        })
        .collect();
    Ok(MapInference {
        cell: map.cell.clone(),
        target: map.target,
        n,
        pr_z,
        c_star_floor: floor,
        points,
    })
}

/// Stretches where the map has slope close to one, which would put a mass
/// point in the distribution of the treatment effect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassPointReport {
    pub cell: CellKey,
    pub target: u8,
    /// Share of query points covered by the longest slope-one run.
    pub longest_run_fraction: f64,
    pub run_interval: Option<(f64, f64)>,
    /// Median of φ̂(y) − y over the run (the would-be mass point).
    pub offset: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassPointOptions {
    /// Slopes are measured across this many query points.
    pub window: usize,
    pub slope_tol: f64,
    /// Runs covering at least this share of the queries are flagged.
    pub min_fraction: f64,
}

impl Default for MassPointOptions {
    fn default() -> Self {
        MassPointOptions {
            window: 10,
            slope_tol: 0.1,
            min_fraction: 0.1,
        }
    }
}

pub fn mass_point_diagnostic(map: &CounterfactualMap, opts: &MassPointOptions) -> MassPointReport {
    let mut pairs: Vec<(f64, f64)> = map
        .query_points
        .iter()
        .copied()
        .zip(map.values.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.dedup_by(|a, b| a.0 == b.0);
    let w = opts.window.max(1);
    let m = pairs.len();
    let mut best: Option<(usize, usize)> = None;
    let mut start: Option<usize> = None;
    let windows = m.saturating_sub(w);
    for k in 0..=windows {
        let ok = k < windows && {
            let (q0, v0) = pairs[k];
            let (q1, v1) = pairs[k + w];
            ((v1 - v0) / (q1 - q0) - 1.0).abs() <= opts.slope_tol
        };
        match (ok, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                // windows s..k cover points s..=k−1+w
                if best.is_none_or(|(bs, be)| k - s > be - bs) {
                    best = Some((s, k));
                }
                start = None;
            }
            _ => {}
        }
    }
    let (fraction, interval, offset) = match best {
        Some((s, e)) => {
            let last = e - 1 + w;
            let covered = &pairs[s..=last];
            let mut diffs: Vec<f64> = covered.iter().map(|(q, v)| v - q).collect();
            diffs.sort_by(f64::total_cmp);
            (
                covered.len() as f64 / m as f64,
                Some((pairs[s].0, pairs[last].0)),
                Some(diffs[diffs.len() / 2]),
            )
        }
        None => (0.0, None, None),
    };
    MassPointReport {
        cell: map.cell.clone(),
        target: map.target,
        longest_run_fraction: fraction,
        run_interval: interval,
        offset,
        flagged: fraction >= opts.min_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical::{complier_cdf, ComplierOptions};

    fn eight_rows() -> CellSample {
        CellSample::from_arms(
            CellKey::empty(),
            [[vec![1.0, 2.0], vec![1.0]], [vec![3.0, 4.0], vec![5.0, 6.0, 7.0]]],
        )
        .unwrap()
    }

    /// Brute force: evaluate Q̂ directly at every candidate and keep the
    /// smallest argument attaining the minimum.
    fn brute_force(sample: &CellSample, target: u8, y_source: f64) -> f64 {
        let (lo, hi) = sample.range(target).unwrap();
        let cands = support_grid(sample.outcomes(target), lo, hi);
        let vals: Vec<f64> = cands
            .iter()
            .map(|&c| empirical_objective(sample, target, y_source, c, true))
            .collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let k = vals.iter().position(|&v| v <= min + 1e-12).unwrap();
        cands[k]
    }

    #[test]
    fn sign_convention_counts_zero_as_negative() {
        assert_eq!(sign(0.0), -1.0);
        assert_eq!(sign(1e-300), 1.0);
        assert_eq!(sign(-2.0), -1.0);
    }

    #[test]
    fn objective_is_piecewise_linear_with_kinks_at_target_outcomes() {
        let s = eight_rows();
        for target in 0..2u8 {
            let cands = s.outcomes(target).to_vec();
            for y_src in [0.5, 1.0, 2.0, 3.5, 6.0, 8.0] {
                let q = |y: f64| empirical_objective(&s, target, y_src, y, true);
                for w in cands.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if a == b {
                        continue;
                    }
                    let mid = 0.5 * (a + b);
                    assert!((q(mid) - 0.5 * (q(a) + q(b))).abs() < 1e-12);
                    let quarter = a + 0.25 * (b - a);
                    assert!((q(quarter) - (0.75 * q(a) + 0.25 * q(b))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eight_row_minimizer_matches_brute_force() {
        let s = eight_rows();
        for target in 0..2u8 {
            let est = MapEstimator::new(&s, target, true, None, None).unwrap();
            for &y in s.outcomes(1 - target) {
                assert_eq!(est.evaluate(y), brute_force(&s, target, y), "target {target} y {y}");
            }
        }
        // C_0(2) = 1, so the map into arm 1 at y=2 is the top of arm 1's support
        let est1 = MapEstimator::new(&s, 1, true, None, None).unwrap();
        assert_eq!(est1.evaluate(2.0), 7.0);
    }

    #[test]
    fn plugin_oracle_on_eight_rows() {
        let s = eight_rows();
        let o = ComplierOptions::default();
        let c0 = complier_cdf(&s, 0, &o).unwrap();
        let c1 = complier_cdf(&s, 1, &o).unwrap();
        let m = plugin_map_oracle(&c0, &c1, &[2.0]).unwrap();
        assert_eq!(m.values, vec![7.0]);
        let same = plugin_map_oracle(&c0, &c0.clone_as(1), &c0.grid).unwrap();
        assert_eq!(same.values, c0.grid);
        assert!(plugin_map_oracle(&c0, &c0, &[1.0]).is_err());
    }

    impl ComplierCdf {
        fn clone_as(&self, d: u8) -> ComplierCdf {
            ComplierCdf { d, ..self.clone() }
        }
    }

    #[test]
    fn symmetric_instrument_arms_give_flat_objective() {
        let rows = [(1.0, 0), (2.5, 1), (3.0, 0), (4.0, 1), (0.5, 1)];
        let mut arms: [[Vec<f64>; 2]; 2] = Default::default();
        for &(y, d) in &rows {
            for z in 0..2 {
                arms[d][z].push(y);
            }
        }
        let s = CellSample::from_arms(CellKey::empty(), arms).unwrap();
        for target in 0..2u8 {
            for ys in [0.0, 1.0, 2.7, 5.0] {
                for yt in [-1.0, 0.5, 2.0, 3.3, 9.0] {
                    assert_eq!(empirical_objective(&s, target, ys, yt, false), 0.0);
                }
            }
        }
    }

    #[test]
    fn standard_error_unit_substitution() {
        assert!((standard_error(100, 1.0, 0.5, 0.5, 0.5) - 0.1).abs() < 1e-15);
        assert_eq!(standard_error(100, 1.0, 0.0, 0.5, 0.5), 0.0);
        assert_eq!(standard_error(100, 1.0, 1.0, 0.5, 0.5), 0.0);
        assert!((covariance_kernel(0.3, 0.6, 0.5, 0.5) - (0.3 - 0.18) / 0.25).abs() < 1e-15);
    }

    #[test]
    fn rearrangement_sorts_values_along_queries() {
        let mut m = CounterfactualMap {
            cell: CellKey::empty(),
            target: 1,
            query_points: vec![3.0, 1.0, 2.0],
            values: vec![5.0, 6.0, 4.0],
            flat_widths: vec![0.0; 3],
            support: (0.0, 10.0),
            source_support: (0.0, 10.0),
        };
        m.rearrange();
        assert_eq!(m.values, vec![6.0, 4.0, 5.0]);
    }

    #[test]
    fn mass_point_flags_unit_slope_stretch() {
        let q: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        // unit slope on [3, 7), steeper elsewhere
        let v: Vec<f64> = q
            .iter()
            .map(|&y| if y < 3.0 { 2.0 * y } else if y < 7.0 { y + 3.0 } else { 10.0 + 2.0 * (y - 7.0) })
            .collect();
        let m = CounterfactualMap {
            cell: CellKey::empty(),
            target: 1,
            query_points: q,
            values: v,
            flat_widths: vec![0.0; 100],
            support: (0.0, 20.0),
            source_support: (0.0, 10.0),
        };
        let r = mass_point_diagnostic(&m, &MassPointOptions::default());
        assert!(r.flagged);
        assert!((r.offset.unwrap() - 3.0).abs() < 1e-9);
        let (a, b) = r.run_interval.unwrap();
        // windows straddling a kink still have slope within the tolerance
        assert!(a >= 2.8 && b <= 7.2 && b - a >= 4.0, "{a} {b}");

        let steep = CounterfactualMap {
            values: m.query_points.iter().map(|y| 3.0 * y).collect(),
            ..m
        };
        assert!(!mass_point_diagnostic(&steep, &MassPointOptions::default()).flagged);
    }

    #[test]
    fn lower_hull_of_nonconvex_points() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, -1.0, 1.0, -3.0, 0.0];
        let (h, s) = lower_hull(&x, &y);
        // (1, −1) is collinear with (0, 0) and (3, −3) and is dropped
        assert_eq!(h, vec![0, 3, 4]);
        assert_eq!(s, vec![-1.0, 3.0]);
    }
}
