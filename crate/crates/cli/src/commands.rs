use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fdm_core::pipeline::{predict_all, Prepared};
use fdm_core::{
    bootstrap_prediction_intervals, evaluate, forecast, ingest_files, run_experiment, Dataset, EodFit, FdmModel,
    TrainingSet,
};
use serde_json::json;

use crate::config::{self, FileConfig};
use crate::output::OutputDir;
use crate::svg::{Band, Chart, Series};
use crate::tables::*;
use crate::{
    BootstrapArgs, Cli, Command, EvaluateArgs, ExperimentArgs, FitArgs, IngestArgs, PredictArgs, SimulateArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest(a) => ingest(cli, a),
        Command::Fit(a) => fit(cli, &file, a),
        Command::Predict(a) => predict(cli, a),
        Command::Simulate(a) => simulate(cli, &file, a),
        Command::Experiment(a) => experiment(cli, &file, a),
        Command::Bootstrap(a) => bootstrap(cli, &file, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    ds.validate().with_context(|| format!("validating dataset {}", path.display()))?;
    Ok(ds)
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let mut out = OutputDir::new(&a.out)?;
    let ds = out.stage("ingest", || Ok(ingest_files(&a.curves, &a.meta, Some(a.grid_size))?))?;
    ds.validate()?;
    out.write_text("dataset.json", &ds.to_json()?)?;
    out.write_csv_with_header("rejected.csv", &["unit_id", "source_cycle", "reason"], &ds.rejected)?;
    log::info!("{} units, {} cycles, {} rejected", ds.n_units(), ds.records().count(), ds.rejected.len());
    out.finish("ingest", cli.seed, json!({ "grid_size": a.grid_size }), &[&a.curves, &a.meta])?;
    Ok(())
}

fn paths_chart(title: &str, units: &[fdm_core::UnitPrediction], threshold: Option<f64>, bands: Vec<Band>) -> Chart {
    let mut series = Vec::new();
    for (k, u) in units.iter().enumerate() {
        series.push(Series {
            label: format!("{} observed", u.unit_id),
            points: u.cycles.iter().map(|c| (c.cycle as f64, c.d_obs)).collect(),
            dashed: false,
            color: k,
        });
        series.push(Series {
            label: String::new(),
            points: u.cycles.iter().map(|c| (c.cycle as f64, c.d_hat)).collect(),
            dashed: true,
            color: k,
        });
    }
    Chart {
        title: title.into(),
        x_label: "cycle".into(),
        y_label: "degradation amount".into(),
        series,
        bands,
        hline: threshold,
    }
}

fn fit(cli: &Cli, file: &FileConfig, a: &FitArgs) -> Result<()> {
    let cfg = config::pipeline(file, &a.model, cli.seed)?;
    let mut out = OutputDir::new(&a.out)?;
    let ds = out.stage("load", || load_dataset(&a.dataset))?;
    let ts = out.stage("prepare", || Ok(TrainingSet::new(&ds, &cfg)?))?;
    let model = out.stage("fit", || Ok(ts.fit(&cfg)?))?;
    out.write_text("model.json", &model.to_json()?)?;
    out.write_csv("coefficients.csv", coefficient_rows(&model))?;

    let grid = &model.fpca.grid;
    let mut header = vec!["t".to_string(), "mean".to_string()];
    header.extend((1..=model.fpca.k).map(|j| format!("phi_{j}")));
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|g| {
            let mut r = vec![grid[g], model.fpca.mean[g]];
            r.extend(model.fpca.eigenfunctions.iter().map(|e| e[g]));
            r
        })
        .collect();
    write_wide(&mut out, "fpca.csv", &header, &rows)?;

    if let EodFit::Flmm(f) = &model.eod {
        let beta = f.beta_on_grid();
        let t = fdm_core::grid::uniform_grid(beta.len());
        out.write_csv("beta.csv", t.iter().zip(&beta).map(|(&t, &value)| FunctionRow { t, value }))?;
        if a.svg {
            let chart = Chart {
                title: "estimated slope function".into(),
                x_label: "t".into(),
                y_label: "beta(t)".into(),
                series: vec![Series {
                    label: "estimate".into(),
                    points: t.iter().copied().zip(beta.iter().copied()).collect(),
                    dashed: false,
                    color: 0,
                }],
                ..Default::default()
            };
            out.write_text("beta.svg", &chart.render())?;
        }
    }
    if a.svg {
        let units = predict_all(&model, &ts.prepared)?;
        out.write_text("paths.svg", &paths_chart("degradation paths", &units, cfg.threshold, vec![]).render())?;
    }
    out.finish("fit", cli.seed, serde_json::to_value(&cfg)?, &[&a.dataset])?;
    Ok(())
}

fn write_wide(out: &mut OutputDir, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    out.write_text(name, std::str::from_utf8(&bytes)?)
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let mut out = OutputDir::new(&a.out)?;
    let text = std::fs::read_to_string(&a.fit).with_context(|| format!("reading {}", a.fit.display()))?;
    let model = FdmModel::from_json(&text).with_context(|| format!("parsing {}", a.fit.display()))?;
    let ds = out.stage("load", || load_dataset(&a.dataset))?;
    let cfg = &model.config;
    let units = out.stage("predict", || {
        let prepared = Prepared::new(&ds, cfg.train_ratio, cfg.norm_order)?;
        Ok(predict_all(&model, &prepared)?)
    })?;
    out.write_csv("predictions.csv", prediction_rows(&units))?;
    let paths = units.iter().map(|u| u.path(cfg.threshold)).collect::<fdm_core::Result<Vec<_>>>()?;
    out.write_csv("paths.csv", path_rows(&paths))?;
    if a.svg {
        out.write_text("paths.svg", &paths_chart("degradation paths", &units, cfg.threshold, vec![]).render())?;
    }
    if let Some(h) = a.horizon {
        if h == 0 {
            bail!("--horizon must be positive");
        }
        let forecasts = out.stage("forecast", || {
            ds.units
                .iter()
                .map(|u| Ok((u.unit_id.clone(), forecast(&model, &ds, &u.unit_id, h, a.rest_hours)?)))
                .collect::<Result<Vec<_>>>()
        })?;
        let mut rows = Vec::new();
        let mut curve_rows = Vec::new();
        for (id, fc) in &forecasts {
            for f in fc {
                rows.push(ForecastRow {
                    unit_id: id.clone(),
                    cycle: f.cycle,
                    rest_hours: a.rest_hours,
                    eod: f.eod,
                    norm: f.norm,
                    d: f.d,
                    exceeds_threshold: cfg.threshold.is_some_and(|t| f.d > t),
                });
                let t = fdm_core::grid::uniform_grid(f.curve.len());
                curve_rows.extend(t.iter().zip(&f.curve).map(|(&t, &v)| CurvePointRow {
                    unit_id: id.clone(),
                    cycle: f.cycle,
                    t,
                    time_s: t * f.eod,
                    voltage: v,
                }));
            }
        }
        out.write_csv("forecast.csv", rows)?;
        out.write_csv("forecast_curves.csv", curve_rows)?;
    }
    out.finish(
        "predict",
        cli.seed,
        json!({ "model_config": cfg, "horizon": a.horizon, "rest_hours": a.rest_hours }),
        &[&a.fit, &a.dataset],
    )?;
    Ok(())
}

fn simulate(cli: &Cli, file: &FileConfig, a: &SimulateArgs) -> Result<()> {
    let cfg = config::simulation(file, a, cli.seed)?;
    let mut out = OutputDir::new(&a.out)?;
    for k in 0..a.replications {
        let r = a.replicate + k as u64;
        let sim = out.stage("simulate", || Ok(fdm_core::generate_dataset(&cfg, a.cell, r)?))?;
        let suffix = if a.replications == 1 { String::new() } else { format!("_{r:03}") };
        out.write_text(&format!("dataset{suffix}.json"), &sim.dataset.to_json()?)?;
        out.write_json(&format!("truth{suffix}.json"), &sim.truth)?;
    }
    out.finish(
        "simulate",
        cli.seed,
        json!({ "simulation": cfg, "cell": a.cell, "first_replicate": a.replicate }),
        &[],
    )?;
    Ok(())
}

fn experiment(cli: &Cli, file: &FileConfig, a: &ExperimentArgs) -> Result<()> {
    let grid = config::experiment(file, a, cli.seed)?;
    let mut out = OutputDir::new(&a.out)?;
    let res = out.stage("experiment", || Ok(run_experiment(&grid)?))?;
    out.write_csv("cells.csv", &res.cells)?;
    out.write_csv("results.csv", &res.rows)?;
    let summary = res.summaries(grid.replications);
    for s in summary.iter().filter(|s| s.flagged) {
        log::warn!("cell {} method {}: {} failed replicates", s.cell, s.method, s.failures);
    }
    out.write_csv("summary.csv", &summary)?;
    out.write_csv_with_header("failures.csv", &["cell", "replicate", "method", "error"], &res.failures)?;
    let beta_rows = res.beta.iter().flat_map(|b| {
        let t = fdm_core::grid::uniform_grid(b.values.len());
        t.into_iter().zip(b.values.clone()).map(move |(t, beta)| BetaRow {
            cell: b.cell,
            replicate: b.replicate,
            t,
            beta,
        })
    });
    out.write_csv_with_header("beta.csv", &["cell", "replicate", "t", "beta"], beta_rows)?;
    if a.svg {
        for cell in &res.cells {
            let draws: Vec<&Vec<f64>> = res.beta.iter().filter(|b| b.cell == cell.index).map(|b| &b.values).collect();
            if draws.len() < 2 {
                continue;
            }
            let g = draws[0].len();
            let t = fdm_core::grid::uniform_grid(g);
            let band = (0..g)
                .map(|k| {
                    let mut v: Vec<f64> = draws.iter().map(|d| d[k]).collect();
                    v.sort_by(f64::total_cmp);
                    (
                        t[k],
                        fdm_core::bootstrap::quantile_sorted(&v, 0.025),
                        fdm_core::bootstrap::quantile_sorted(&v, 0.975),
                    )
                })
                .collect();
            let chart = Chart {
                title: format!("slope estimates, cell {}", cell.index),
                x_label: "t".into(),
                y_label: "beta(t)".into(),
                series: vec![Series {
                    label: "truth".into(),
                    points: t.iter().map(|&s| (s, fdm_core::simulator::true_beta(s))).collect(),
                    dashed: false,
                    color: 1,
                }],
                bands: vec![Band { points: band, color: 0 }],
                hline: None,
            };
            out.write_text(&format!("beta_cell{}.svg", cell.index), &chart.render())?;
        }
    }
    out.finish("experiment", cli.seed, serde_json::to_value(&grid)?, &[])?;
    if !res.failures.is_empty() {
        log::warn!("{} method fits failed; see failures.csv", res.failures.len());
    }
    Ok(())
}

fn bootstrap(cli: &Cli, file: &FileConfig, a: &BootstrapArgs) -> Result<()> {
    let cfg = config::pipeline(file, &a.model, cli.seed)?;
    let boot = config::bootstrap(file, a.replicates, a.levels.as_deref(), a.per_prediction_residuals, cli.seed)?;
    let mut out = OutputDir::new(&a.out)?;
    let ds = out.stage("load", || load_dataset(&a.dataset))?;
    let res = out.stage("bootstrap", || Ok(bootstrap_prediction_intervals(&ds, &cfg, &boot)?))?;
    if res.unreliable {
        log::warn!("{} of {} replicates failed; intervals flagged unreliable", res.dropped, res.replicates);
    }
    out.write_csv("intervals.csv", &res.intervals)?;
    let cov: Vec<CoverageRow> = res
        .levels
        .iter()
        .filter_map(|&l| res.coverage(l).map(|c| CoverageRow { level: l, coverage: c }))
        .collect();
    out.write_csv("coverage.csv", cov)?;
    let top = res.levels.iter().copied().fold(f64::NAN, f64::max);
    let paths = res.paths(top, cfg.threshold)?;
    out.write_csv("paths.csv", path_rows(&paths))?;
    if a.svg {
        let bands = paths
            .iter()
            .enumerate()
            .map(|(k, p)| Band {
                points: p
                    .entries
                    .iter()
                    .filter_map(|e| Some((e.cycle as f64, e.lower?, e.upper?)))
                    .collect(),
                color: k,
            })
            .collect();
        let title = format!("degradation paths with {:.0}% intervals", 100.0 * top);
        out.write_text("paths.svg", &paths_chart(&title, &res.point, cfg.threshold, bands).render())?;
    }
    out.finish(
        "bootstrap",
        cli.seed,
        json!({ "pipeline": cfg, "bootstrap": boot, "dropped": res.dropped, "unreliable": res.unreliable }),
        &[&a.dataset],
    )?;
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut out = OutputDir::new(&a.out)?;
    let mut rdr = csv::Reader::from_path(&a.predictions)
        .with_context(|| format!("reading {}", a.predictions.display()))?;
    let rows = rdr
        .deserialize::<PredictionRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("parsing {}", a.predictions.display()))?;
    let units = units_from_rows(rows);
    let ev = out.stage("evaluate", || Ok(evaluate(&units)?))?;
    let metric = |q: &str, p: fdm_core::ErrorPair| MetricRow {
        quantity: q.into(),
        rmse: p.rmse,
        rmspe: p.rmspe,
    };
    out.write_csv(
        "metrics.csv",
        [
            metric("degradation", ev.degradation),
            metric("eod", ev.eod),
            metric("curve", ev.curve),
        ],
    )?;
    out.finish("evaluate", cli.seed, json!({}), &[&a.predictions])?;
    Ok(())
}
