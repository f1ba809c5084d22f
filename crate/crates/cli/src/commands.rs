use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use mdc_core::analytics::{omega_report, quantile, OmegaReport, SecurityThresholds};
use mdc_core::evaluation::{
    marginal_forecasts, marginal_models, oracle_laws, reliability, CopulaFamily, CopulaForecaster,
    CopulaSpec, JdanForecaster, MkdeForecaster, MkdeModel, OracleForecaster, ReliabilityReport,
};
use mdc_core::jdan::ForecastDistribution;
use mdc_core::nfn::{Checkpoint, ForecastModel};
use mdc_core::pipeline::{
    feature_refs, synth_generate, targets, Dataset, DatasetManifest, FlowgateSeries, GroundTruth,
};
use mdc_core::trainer::{grid_search, train_model, GridBase, GridReport, TrainReport};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn prepare_output(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))
}

fn load_manifest(cfg: &RunConfig) -> anyhow::Result<(DatasetManifest, std::path::PathBuf)> {
    let path = cfg.manifest_path();
    let m = DatasetManifest::load(&path)
        .map_err(|e| ConfigError(format!("dataset manifest {}: {e}", path.display())))?;
    Ok((m, path))
}

fn load_dataset(
    cfg: &RunConfig,
    lag: Option<usize>,
) -> anyhow::Result<(DatasetManifest, FlowgateSeries, Dataset)> {
    let (m, path) = load_manifest(cfg)?;
    let (series, data) = m.load_dataset(&path, lag.or(cfg.arch.lag_steps))?;
    Ok((m, series, data))
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    Checkpoint::load(&path)
        .map_err(|e| ConfigError(format!("checkpoint {}: {e}", path.display())).into())
}

/// Dataset windowed to the checkpoint's own lag, checked against its arch.
fn checkpoint_dataset(
    cfg: &RunConfig,
    model: &ForecastModel,
) -> anyhow::Result<(DatasetManifest, Dataset)> {
    let (m, _, data) = load_dataset(cfg, Some(model.nfn.lag_steps))?;
    if data.n_vars() != model.jdan.n_vars || data.n_features != model.nfn.n_features {
        return Err(ConfigError(format!(
            "checkpoint expects {} flowgates and {} features, data has {} and {}",
            model.jdan.n_vars,
            model.nfn.n_features,
            data.n_vars(),
            data.n_features
        ))
        .into());
    }
    Ok((m, data))
}

fn pick<'a, T>(items: &'a [T], idx: &[usize], what: &str) -> anyhow::Result<Vec<&'a T>> {
    idx.iter()
        .map(|&i| {
            items.get(i).ok_or_else(|| {
                ConfigError(format!("{what} index {i} beyond {} windows", items.len())).into()
            })
        })
        .collect()
}

pub fn generate(cfg: &RunConfig) -> anyhow::Result<()> {
    let synth = cfg.synth();
    if cfg.data.length == 0 {
        return Err(ConfigError("series length must be positive".into()).into());
    }
    let (series, truth) = synth_generate(&synth, cfg.data.length)?;
    let margins = mdc_core::pipeline::compute_margins(&series)?;
    let data = Dataset::new(
        &series.features,
        &margins,
        cfg.data.lag_steps,
        synth.lead_steps,
    )?;
    prepare_output(cfg)?;
    series.write_csv(create(&cfg.output.join("series.csv"))?)?;
    let manifest = DatasetManifest {
        series: "series.csv".into(),
        n_vars: series.n_vars(),
        n_features: series.n_features(),
        interval_minutes: series.interval_minutes,
        lag_steps: cfg.data.lag_steps,
        lead_steps: synth.lead_steps,
        seed: synth.seed,
        split: data.split.clone(),
        synth: Some(synth),
    };
    write_json(&cfg.output.join("manifest.json"), &manifest)?;
    write_json(&cfg.output.join("ground_truth.json"), &truth)?;
    println!(
        "wrote {} rows, {} windows to {}",
        series.len(),
        data.windows.len(),
        cfg.output.display()
    );
    Ok(())
}

fn save_model(cfg: &RunConfig, model: ForecastModel, report: &TrainReport) -> anyhow::Result<()> {
    let ck = Checkpoint {
        model,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
    };
    ck.save(&cfg.checkpoint_path())?;
    write_json(&cfg.output.join("train_report.json"), report)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let (_, _, data) = load_dataset(cfg, None)?;
    let (nfn, jdan) = cfg.arch.build(data.n_vars(), data.n_features, data.lag)?;
    let (model, report) = train_model(nfn, jdan, &data, &cfg.train_config())?;
    prepare_output(cfg)?;
    save_model(cfg, model, &report)?;
    println!(
        "best validation log-likelihood {:.6} at epoch {} (stopped at {})",
        report.best_val_ll, report.best_epoch, report.stop_epoch
    );
    Ok(())
}

#[derive(Serialize)]
struct ParamDigest {
    n_weights: usize,
    n_biases: usize,
    weight_sum: f64,
    bias_sum: f64,
    mixture_weights: Vec<f64>,
}

fn digest(d: &ForecastDistribution) -> ParamDigest {
    let f = d.params().to_flat();
    ParamDigest {
        n_weights: f.weights.len(),
        n_biases: f.biases.len(),
        weight_sum: f.weights.iter().sum(),
        bias_sum: f.biases.iter().sum(),
        mixture_weights: d.mixture_weights().to_vec(),
    }
}

#[derive(Serialize)]
struct QuantileValue {
    alpha: f64,
    value: Option<f64>,
}

#[derive(Serialize)]
struct ConditionalCurve {
    var: usize,
    x: Vec<f64>,
    pdf: Vec<f64>,
    quantiles: Vec<QuantileValue>,
}

#[derive(Serialize)]
struct WindowForecast {
    window: usize,
    anchor: usize,
    observed: Vec<f64>,
    params: ParamDigest,
    conditionals: Vec<ConditionalCurve>,
}

pub fn forecast(cfg: &RunConfig) -> anyhow::Result<()> {
    let ck = load_checkpoint(cfg)?;
    let (_, data) = checkpoint_dataset(cfg, &ck.model)?;
    let test = data.test();
    let chosen = pick(test, &cfg.forecast.windows, "forecast window")?;
    let dists = ck.model.predict(
        &chosen
            .iter()
            .map(|w| w.features.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let train_t = targets(data.train());
    let n = data.n_vars();
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let lo =
                train_t.iter().map(|t| t[i]).fold(f64::INFINITY, f64::min) - cfg.forecast.padding;
            let hi = train_t
                .iter()
                .map(|t| t[i])
                .fold(f64::NEG_INFINITY, f64::max)
                + cfg.forecast.padding;
            let k = cfg.forecast.grid_points;
            (0..k)
                .map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut csv = csv_writer(&cfg.output.join("forecast_curves.csv"))?;
    csv.write_record(["window", "var", "x", "pdf"])?;
    for ((&idx, w), d) in cfg.forecast.windows.iter().zip(&chosen).zip(&dists) {
        let mut conditionals = Vec::with_capacity(n);
        for (i, axis) in axes.iter().enumerate() {
            let mut x = w.target.clone();
            let pdf = axis
                .iter()
                .map(|&v| {
                    x[i] = v;
                    d.conditional_pdf(i, &x).map(|p| p.max(0.0))
                })
                .collect::<mdc_core::Result<Vec<_>>>()?;
            for (v, p) in axis.iter().zip(&pdf) {
                csv.write_record([
                    idx.to_string(),
                    (i + 1).to_string(),
                    v.to_string(),
                    p.to_string(),
                ])?;
            }
            let quantiles = cfg
                .forecast
                .quantiles
                .iter()
                .map(|&a| QuantileValue {
                    alpha: a,
                    value: quantile(d, i, &w.target, a).ok(),
                })
                .collect();
            conditionals.push(ConditionalCurve {
                var: i + 1,
                x: axis.clone(),
                pdf,
                quantiles,
            });
        }
        out.push(WindowForecast {
            window: idx,
            anchor: w.anchor,
            observed: w.target.clone(),
            params: digest(d),
            conditionals,
        });
    }
    csv.flush()?;
    write_json(&cfg.output.join("forecast.json"), &out)?;
    println!("wrote {} forecasts", out.len());
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

#[derive(Serialize)]
struct SummaryRow {
    model: String,
    /// Mean absolute deviation per flowgate.
    mean_abs: Vec<f64>,
    samples: usize,
}

#[derive(Serialize)]
struct BaselineFailure {
    model: String,
    error: String,
}

#[derive(Serialize)]
struct EvaluationReport {
    table: Vec<SummaryRow>,
    failures: Vec<BaselineFailure>,
    reports: Vec<ReliabilityReport>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

pub fn evaluate(cfg: &RunConfig) -> anyhow::Result<()> {
    let ck = load_checkpoint(cfg)?;
    let (manifest, data) = checkpoint_dataset(cfg, &ck.model)?;
    let test = data.test();
    let test_t = targets(test);
    let mut runs: Vec<(String, anyhow::Result<ReliabilityReport>)> = Vec::new();

    let dists = ck.model.predict(&feature_refs(test))?;
    runs.push((
        "jdan-nfn".into(),
        reliability("jdan-nfn", &JdanForecaster { dists: &dists }, &test_t).map_err(Into::into),
    ));
    if cfg.evaluate.mkde {
        let r = MkdeModel::fit(targets(data.train())).and_then(|m| {
            reliability(
                "mkde",
                &MkdeForecaster {
                    model: &m,
                    len: test.len(),
                },
                &test_t,
            )
        });
        runs.push(("mkde".into(), r.map_err(Into::into)));
    }
    let copulas: Vec<CopulaSpec> = cfg
        .evaluate
        .clayton
        .iter()
        .map(|&t| CopulaSpec {
            family: CopulaFamily::Clayton,
            theta: t,
        })
        .chain(cfg.evaluate.frank.iter().map(|&t| CopulaSpec {
            family: CopulaFamily::Frank,
            theta: t,
        }))
        .collect();
    if !copulas.is_empty() {
        let marginals = marginal_models(
            ck.model.nfn.clone(),
            ck.model.jdan.clone(),
            &data,
            &cfg.train_config(),
        )
        .and_then(|ms| {
            let models: Vec<ForecastModel> = ms.into_iter().map(|(m, _)| m).collect();
            marginal_forecasts(&models, test)
        });
        match marginals {
            Ok(marg) => {
                for spec in copulas {
                    let name = spec.label();
                    let r = spec.validate(data.n_vars()).and_then(|_| {
                        reliability(
                            &name,
                            &CopulaForecaster {
                                spec,
                                marginals: &marg,
                            },
                            &test_t,
                        )
                    });
                    runs.push((name, r.map_err(Into::into)));
                }
            }
            Err(e) => {
                for spec in copulas {
                    runs.push((
                        spec.label(),
                        Err(anyhow::anyhow!("marginal training failed: {e}")),
                    ));
                }
            }
        }
    }
    if cfg.evaluate.oracle && manifest.synth.is_some() {
        let path = cfg.manifest_path().with_file_name("ground_truth.json");
        let r = fs::read_to_string(&path)
            .map_err(anyhow::Error::from)
            .and_then(|s| Ok(serde_json::from_str::<GroundTruth>(&s)?))
            .and_then(|truth| {
                let laws = oracle_laws(&truth, test)?;
                Ok(reliability(
                    "oracle",
                    &OracleForecaster { laws: &laws },
                    &test_t,
                )?)
            });
        runs.push(("oracle".into(), r));
    }

    prepare_output(cfg)?;
    let mut report = EvaluationReport {
        table: Vec::new(),
        failures: Vec::new(),
        reports: Vec::new(),
    };
    for (name, r) in runs {
        match r {
            Ok(r) => {
                r.write_csv(create(
                    &cfg.output
                        .join(format!("reliability_{}.csv", file_stem(&name))),
                )?)?;
                report.table.push(SummaryRow {
                    model: name,
                    mean_abs: r.mean_abs(),
                    samples: r.dims.first().map_or(0, |d| d.samples),
                });
                report.reports.push(r);
            }
            Err(e) => {
                eprintln!("{name}: {e:#}");
                report.failures.push(BaselineFailure {
                    model: name,
                    error: format!("{e:#}"),
                });
            }
        }
    }
    let mut table = csv_writer(&cfg.output.join("reliability_table.csv"))?;
    let mut header = vec!["model".to_string()];
    header.extend((1..=data.n_vars()).map(|i| format!("b_bar_{i}")));
    table.write_record(&header)?;
    for row in &report.table {
        let mut rec = vec![row.model.clone()];
        rec.extend(row.mean_abs.iter().map(|b| b.to_string()));
        table.write_record(&rec)?;
        println!(
            "{:<18} {}",
            row.model,
            row.mean_abs
                .iter()
                .map(|b| format!("{:6.2}%", 100.0 * b))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    table.flush()?;
    write_json(&cfg.output.join("reliability.json"), &report)
}

#[derive(Serialize)]
struct WindowOmega {
    window: usize,
    anchor: usize,
    report: OmegaReport,
}

pub fn index(cfg: &RunConfig) -> anyhow::Result<()> {
    let ck = load_checkpoint(cfg)?;
    let (_, data) = checkpoint_dataset(cfg, &ck.model)?;
    let thresholds =
        SecurityThresholds::new(cfg.thresholds.clone()).map_err(|e| ConfigError(e.to_string()))?;
    if thresholds.len() != data.n_vars() {
        return Err(ConfigError(format!(
            "{} thresholds for {} flowgates",
            thresholds.len(),
            data.n_vars()
        ))
        .into());
    }
    let test = data.test();
    let chosen = pick(test, &cfg.index.windows, "index window")?;
    let dists = ck.model.predict(
        &chosen
            .iter()
            .map(|w| w.features.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let mc = (cfg.index.mc_samples > 0).then_some((cfg.index.mc_samples, cfg.seed));
    let mut out = Vec::new();
    for ((&idx, w), d) in cfg.index.windows.iter().zip(&chosen).zip(&dists) {
        let report = omega_report(d, &thresholds, mc)?;
        match &report.monte_carlo {
            Some(m) => println!(
                "window {idx}: Ω = {:.4}, secure proportion {:.2}%, |diff| {:.4} ({:.4} s)",
                report.omega, m.proportion, m.abs_diff, report.wall_time_s
            ),
            None => println!(
                "window {idx}: Ω = {:.4} ({:.4} s)",
                report.omega, report.wall_time_s
            ),
        }
        out.push(WindowOmega {
            window: idx,
            anchor: w.anchor,
            report,
        });
    }
    prepare_output(cfg)?;
    write_json(&cfg.output.join("omega.json"), &out)
}

pub fn grid(cfg: &RunConfig) -> anyhow::Result<()> {
    let (m, path) = load_manifest(cfg)?;
    let base = GridBase {
        n_vars: m.n_vars,
        n_features: m.n_features,
        n_components: cfg.arch.n_components,
        coupling: cfg.arch.coupling,
        train: cfg.train_config(),
    };
    let outcome = grid_search(&cfg.grid, &base, |lag| {
        Ok(m.load_dataset(&path, Some(lag))?.1)
    })?;
    prepare_output(cfg)?;
    write_json::<GridReport>(&cfg.output.join("grid.json"), &outcome.report)?;
    save_model(cfg, outcome.best_model, &outcome.best_train_report)?;
    for row in &outcome.report.rows {
        let p = row.point;
        let v = row
            .val_ll
            .map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"));
        println!(
            "nfn {}x{} jdan {}x{} lag {}: {v}",
            p.nfn_blocks, p.nfn_width, p.jdan_blocks, p.jdan_width, p.lag_steps
        );
    }
    Ok(())
}
