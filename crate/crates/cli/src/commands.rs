use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use cfmap::counterfactual::{map_inference, mass_point_diagnostic, MassPointOptions};
use cfmap::data::{cell_stats, load_csv, Dataset, Schema};
use cfmap::density::{kde, DensityConfig};
use cfmap::empirical::{
    complier_cdf, monotonicity_diagnostic, support_condition_diagnostic, CellSample, ComplierOptions, SupportOptions,
};
use cfmap::export::{read_ite_csv, write_density_csv, write_ite_csv, write_map_csv};
use cfmap::ite::{estimate_ite, late, sign_classification};
use cfmap::pipeline::{bootstrap_band, density_sample, fit, fit_cell, run};
use cfmap::simulate::{density_replications, draw_sample, rmse_designs, table1_harness, SimConfig};
use cfmap::EstimatorConfig;

use crate::config::{estimator_config, parse_family, parse_kernel, parse_rule, DensityOptions, FileConfig};
use crate::{DensityArgs, DiagnoseArgs, EstimateArgs, SchemaArgs, SimulateArgs, Usage};

pub struct Output {
    pub json: bool,
}

impl Output {
    fn emit(&self, value: &Value) -> anyhow::Result<()> {
        if self.json {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn schema(a: &SchemaArgs) -> Schema {
    Schema {
        outcome: a.outcome.clone(),
        treatment: a.treatment.clone(),
        instrument: a.instrument.clone(),
        covariates: a.covariates.clone(),
    }
}

fn load(path: &Path, schema: &Schema) -> anyhow::Result<Dataset> {
    let data = load_csv(path, schema)?;
    eprintln!(
        "loaded {} observations in {} cell(s) from {} ({} skipped for missing values)",
        data.len(),
        data.cell_index().len(),
        path.display(),
        data.rejected_missing()
    );
    Ok(data)
}

pub fn estimate(a: EstimateArgs, file: &FileConfig, out: &Output) -> anyhow::Result<()> {
    let cfg = estimator_config(&file.estimator, &a.estimator)?;
    let schema = schema(&a.schema);
    let data = load(&a.schema.input, &schema)?;
    let est = fit(&data, &cfg)?;
    let records = estimate_ite(&data, &est)?;

    let mut maps = Vec::new();
    let mut cells = Vec::new();
    for c in &est.cells {
        for target in 0..2u8 {
            let m = c.map_at_outcomes(target, cfg.monotonize);
            maps.push(map_inference(&c.sample, &m, cfg.kde_bandwidth)?);
        }
        let stats = cell_stats(&data, c.cell())?;
        let cell_late = late(&data, Some(c.cell()), cfg.propensity_tol).ok().map(|l| l.value);
        cells.push(json!({
            "cell": c.cell(),
            "n": stats.n(),
            "n_dz": stats.n_dz,
            "propensity": stats.p_hat,
            "instrument_share": stats.pr_z,
            "late": cell_late,
        }));
    }
    let mut warnings: Vec<Value> = est
        .skipped
        .iter()
        .map(|s| json!({ "cell": s.cell, "kind": s.kind, "message": s.reason }))
        .collect();
    let pooled = match late(&data, None, cfg.propensity_tol) {
        Ok(l) => Some(l.value),
        Err(e) => {
            warnings.push(json!({ "cell": null, "kind": e.kind(), "message": format!("pooled LATE: {e}") }));
            None
        }
    };
    let out_of_support = records.iter().filter(|r| r.out_of_support).count();
    let se_unavailable: usize = maps.iter().map(|m| m.unavailable()).sum();
    if se_unavailable > 0 {
        warnings.push(json!({
            "cell": null,
            "kind": "se_unavailable",
            "message": format!("{se_unavailable} map point(s) have a complier density below the floor; no standard error reported"),
        }));
    }

    out_dir(&a.out_dir)?;
    write_ite_csv(create(&a.out_dir.join("ite.csv"))?, &records)?;
    write_map_csv(create(&a.out_dir.join("map.csv"))?, &maps)?;
    let summary = json!({
        "config": { "input": a.schema.input, "schema": schema, "estimator": cfg },
        "n_observations": data.len(),
        "rejected_missing": data.rejected_missing(),
        "n_records": records.len(),
        "out_of_support": out_of_support,
        "cells": cells,
        "pooled_late": pooled,
        "sign_classification": sign_classification(&records),
        "warnings": warnings,
    });
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    eprintln!(
        "estimated {} cell(s), {} skipped; wrote {}",
        est.cells.len(),
        est.skipped.len(),
        a.out_dir.display()
    );
    out.emit(&summary)
}

fn density_options(a: &DensityArgs, file: &FileConfig) -> Result<DensityOptions, Usage> {
    let mut o = file.density.clone();
    if let Some(k) = &a.kernel {
        o.kernel = parse_kernel(k)?;
    }
    if let Some(r) = &a.rule {
        o.rule = parse_rule(r)?;
    }
    if let Some(p) = a.order {
        o.order = p;
    }
    if let Some(s) = a.bandwidth_scale {
        o.scale = s;
    }
    if a.bandwidth.is_some() {
        o.bandwidth = a.bandwidth;
    }
    if a.domain.is_some() {
        o.domain = a.domain;
    }
    if let Some(g) = a.grid_points {
        o.grid_points = g;
    }
    if a.no_trim {
        o.trim = false;
    }
    if a.no_bootstrap {
        o.bootstrap = false;
    }
    if let Some(r) = a.reps {
        o.reps = r;
    }
    if let Some(l) = a.level {
        o.level = l;
    }
    o.validate()?;
    Ok(o)
}

pub fn density(a: DensityArgs, file: &FileConfig, out: &Output) -> anyhow::Result<()> {
    let opts = density_options(&a, file)?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let ecfg = estimator_config(&file.estimator, &a.estimator)?;
    let dcfg: DensityConfig = opts.density_config();

    let (deltas, dataset, source) = match (&a.ite, &a.input) {
        (Some(path), None) => {
            if opts.bootstrap {
                return Err(Usage("a bootstrap band needs the raw data (--input); pass --no-bootstrap".into()).into());
            }
            let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
            let rows = read_ite_csv(f)?;
            let deltas: Vec<f64> = rows
                .iter()
                .filter(|r| r.out_of_support_flag == 0)
                .map(|r| r.delta_hat)
                .collect();
            (deltas, None, json!({ "ite": path }))
        }
        (None, Some(path)) => {
            let (Some(y), Some(d), Some(z)) = (&a.outcome, &a.treatment, &a.instrument) else {
                return Err(Usage("--input needs --outcome, --treatment and --instrument".into()).into());
            };
            let schema = Schema {
                outcome: y.clone(),
                treatment: d.clone(),
                instrument: z.clone(),
                covariates: a.covariates.clone(),
            };
            let data = load(path, &schema)?;
            let (_, records) = run(&data, &ecfg)?;
            (density_sample(&records), Some(data), json!({ "input": path, "schema": schema }))
        }
        _ => return Err(Usage("give exactly one of --ite or --input".into()).into()),
    };
    if deltas.is_empty() {
        return Err(cfmap::Error::EmptyInput.into());
    }
    let est = kde(&deltas, &dcfg)?;
    let band = match (&dataset, opts.bootstrap) {
        (Some(data), true) => {
            eprintln!("bootstrap: {} replicates", opts.reps);
            Some(bootstrap_band(data, &ecfg, &est, opts.reps, opts.level, seed)?)
        }
        _ => None,
    };

    out_dir(&a.out_dir)?;
    write_density_csv(create(&a.out_dir.join("density.csv"))?, &est, band.as_ref())?;
    let meta = json!({
        "source": source,
        "n": est.n,
        "kernel": est.kernel,
        "rule": if opts.bandwidth.is_some() { "fixed" } else { opts.rule.id() },
        "order": opts.order,
        "scale": opts.scale,
        "bandwidth": est.bandwidth,
        "domain": est.domain,
        "evaluated": est.evaluated,
        "trimmed": opts.trim,
        "grid_points": est.grid.len(),
        "integral": est.integral(),
        "seed": seed,
        "B": band.as_ref().map(|b| b.replications),
        "band": band.as_ref().map(|b| json!({
            "kind": b.kind,
            "level": b.level,
            "failures": b.failures,
            "degraded": b.degraded,
        })),
        "config": { "density": opts, "estimator": ecfg },
    });
    write_json(&a.out_dir.join("density.meta.json"), &meta)?;
    if band.as_ref().is_some_and(|b| b.degraded) {
        eprintln!("warning: more than 5% of bootstrap replicates failed");
    }
    out.emit(&meta)
}

fn complier_options(cfg: &EstimatorConfig, d: u8) -> ComplierOptions {
    ComplierOptions {
        propensity_tol: cfg.propensity_tol,
        sign_adjust: cfg.sign_adjust,
        support: cfg.support[d as usize],
    }
}

pub fn diagnose(a: DiagnoseArgs, file: &FileConfig, out: &Output) -> anyhow::Result<()> {
    let cfg = estimator_config(&file.estimator, &a.estimator)?;
    let mass_opts = MassPointOptions {
        window: a.slope_window.unwrap_or(MassPointOptions::default().window),
        ..MassPointOptions::default()
    };
    if mass_opts.window == 0 {
        return Err(Usage("--slope-window must be at least 1".into()).into());
    }
    let sopts = SupportOptions {
        overlay_points: a.overlay_points.unwrap_or(0),
        ..SupportOptions::default()
    };
    let schema = schema(&a.schema);
    let data = load(&a.schema.input, &schema)?;

    let mut cells = Vec::new();
    let mut overlay_rows = Vec::new();
    let mut estimable = 0usize;
    for key in data.cells() {
        let stats = cell_stats(&data, key);
        let sample = CellSample::from_dataset(&data, key);
        let (stats, sample) = match (stats, sample) {
            (Ok(s), Ok(c)) => (s, c),
            (Err(e), _) | (_, Err(e)) => {
                cells.push(json!({ "cell": key, "estimable": false, "kind": e.kind(), "reason": e.to_string() }));
                continue;
            }
        };
        let mut entry = json!({
            "cell": key,
            "n": stats.n(),
            "n_dz": stats.n_dz,
            "propensity": stats.p_hat,
            "propensity_gap": stats.propensity_gap(),
            "gap_ok": sample.check_gap(cfg.propensity_tol).is_ok(),
        });
        let mut monotonicity = Vec::new();
        let mut support = Vec::new();
        let mut failure = None;
        for d in 0..2u8 {
            let copts = complier_options(&cfg, d);
            match complier_cdf(&sample, d, &copts) {
                Ok(c) => monotonicity.push(monotonicity_diagnostic(&c)),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
            match support_condition_diagnostic(&sample, d, &copts, &sopts) {
                Ok(r) => {
                    if let Some(ov) = &r.overlay {
                        overlay_rows.extend(ov.iter().map(|p| (key.clone(), d, p.clone())));
                    }
                    support.push(r);
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let fitted = match failure {
            Some(e) => Err(e),
            None => fit_cell(sample, &cfg),
        };
        match fitted {
            Ok(c) => {
                estimable += 1;
                let mass: Vec<_> = (0..2u8)
                    .map(|t| mass_point_diagnostic(&c.map_at_outcomes(t, cfg.monotonize), &mass_opts))
                    .collect();
                entry["estimable"] = json!(true);
                entry["mass_points"] = json!(mass);
            }
            Err(e) => {
                entry["estimable"] = json!(false);
                entry["kind"] = json!(e.kind());
                entry["reason"] = json!(e.to_string());
            }
        }
        entry["monotonicity"] = json!(monotonicity);
        entry["support"] = json!(support);
        cells.push(entry);
    }

    out_dir(&a.out_dir)?;
    if sopts.overlay_points > 0 {
        let mut w = create(&a.out_dir.join("overlay.csv"))?;
        writeln!(w, "cell,d,y,c_hat,f_hat")?;
        for (k, d, p) in &overlay_rows {
            writeln!(w, "{k},{d},{},{},{}", p.y, p.c_hat, p.f_hat)?;
        }
        w.flush()?;
    }
    let report = json!({
        "config": { "input": a.schema.input, "schema": schema, "estimator": cfg, "mass_points": mass_opts },
        "n_observations": data.len(),
        "rejected_missing": data.rejected_missing(),
        "estimable_cells": estimable,
        "cells": cells,
    });
    write_json(&a.out_dir.join("diagnostics.json"), &report)?;
    eprintln!("diagnosed {} cell(s); wrote {}", data.cell_index().len(), a.out_dir.display());
    if estimable == 0 {
        return Err(cfmap::Error::NoEstimableCell(data.cell_index().len()).into());
    }
    out.emit(&report)
}

fn sim_config(a: &SimulateArgs, file: &FileConfig) -> Result<SimConfig, Usage> {
    let mut s = file.simulation;
    if let Some(n) = a.n {
        s.n = n;
    }
    if let Some(g) = a.gamma1 {
        s.gamma1 = g;
    }
    if let Some(g) = a.gamma0 {
        s.gamma0 = g;
    }
    if let Some(r) = a.rho {
        s.copula_rho = r;
    }
    if let Some(f) = &a.family {
        s.family = parse_family(f)?;
    }
    if let Some(r) = a.reps {
        s.reps = r;
    }
    if let Some(seed) = a.seed.or(file.seed) {
        s.seed = seed;
    }
    s.validate().map_err(|e| Usage(e.to_string()))?;
    if s.gamma1 == 0.0 {
        return Err(Usage("--gamma1 0 leaves no compliers, so the maps are not identified".into()));
    }
    Ok(s)
}

pub fn simulate(a: SimulateArgs, file: &FileConfig, out: &Output) -> anyhow::Result<()> {
    let sim = sim_config(&a, file)?;
    let ecfg = estimator_config(&file.estimator, &a.estimator)?;
    let level = a.level.unwrap_or(0.9);
    if !(level > 0.0 && level < 1.0) {
        return Err(Usage(format!("--level must be in (0, 1), got {level}")).into());
    }
    let designs = match a.design.as_str() {
        "table1" => vec![(sim.n, sim.gamma1)],
        "table1-full" => rmse_designs(),
        other => return Err(Usage(format!("unknown design `{other}` (table1 or table1-full)")).into()),
    };
    let single = designs.len() == 1;
    if !single && (a.individual_rmse.is_some() || a.density_dir.is_some()) {
        return Err(Usage("--individual-rmse and --density-dir need --design table1".into()).into());
    }
    if let Some(path) = &a.sample_out {
        let (n, gamma1) = designs[0];
        let base = draw_sample(&SimConfig { n, gamma1, ..sim }, 0)?;
        let mut w = create(path)?;
        writeln!(w, "y,d,z")?;
        for o in base.dataset.observations() {
            writeln!(w, "{},{},{}", o.y, o.d, o.z)?;
        }
        w.flush()?;
    }
    eprintln!("simulating {} design(s) with {} replicates each", designs.len(), sim.reps);
    let report = table1_harness(&sim, &designs, &ecfg)?;
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "design": { "n": r.n, "gamma1": r.gamma1, "reps": r.reps, "seed": r.seed },
                "ave_rmse": r.ave_rmse,
                "std_rmse": r.std_rmse,
                "late_rmse": r.late_rmse,
                "population_late": r.population_late,
                "failures": r.failures,
            })
        })
        .collect();
    let config = json!({
        "design": a.design,
        "simulation": sim,
        "estimator": ecfg,
    });
    let doc = if single {
        let mut row = rows[0].clone();
        row["config"] = config;
        row
    } else {
        json!({ "config": config, "rows": rows })
    };

    if let Some(path) = &a.individual_rmse {
        let mut w = create(path)?;
        writeln!(w, "id,rmse")?;
        for (i, v) in report.rows[0].individual_rmse.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        w.flush()?;
    }
    if let Some(dir) = &a.density_dir {
        out_dir(dir)?;
        let dcfg = DensityConfig {
            domain: Some((sim.family.delta(0.0), sim.family.delta(1.0))),
            ..DensityConfig::default()
        };
        let mc = density_replications(&sim, &ecfg, &dcfg, level)?;
        let mut w = create(&dir.join("density_mc.csv"))?;
        writeln!(w, "delta,truth,f_hat,lower,upper")?;
        for k in 0..mc.base.grid.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                mc.base.grid[k], mc.truth[k], mc.base.values[k], mc.band.lower[k], mc.band.upper[k]
            )?;
        }
        w.flush()?;
        write_json(
            &dir.join("density_mc.meta.json"),
            &json!({
                "kind": mc.band.kind,
                "level": mc.band.level,
                "replications": mc.band.replications,
                "failures": mc.band.failures,
                "bandwidth": mc.base.bandwidth,
                "kernel": mc.base.kernel,
                "domain": mc.base.domain,
                "sup_errors": mc.sup_errors,
                "config": config_for(&sim, &ecfg),
            }),
        )?;
    }
    match &a.out {
        Some(path) => {
            write_json(path, &doc)?;
            out.emit(&doc)
        }
        None => Output { json: true }.emit(&doc),
    }
}

fn config_for(sim: &SimConfig, ecfg: &EstimatorConfig) -> Value {
    json!({ "simulation": sim, "estimator": ecfg })
}
