use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use quantbench::advisory::{advise, render_advisory, write_advisory_csv, AdvisoryError};
use quantbench::data::{
    load_news_jsonl, load_ohlcv_csv, write_ohlcv_csv, CacheDirSource, HistorySource, PriceSeries,
};
use quantbench::eval::{
    benchmark, forecast_file_name, render_report, render_sweep, standard_lineup, sweep,
    write_benchmark_csv, write_forecast_csv, write_sweep_csv, EvalOptions,
};
use quantbench::fundamentals::{
    load_fundamentals_csv, relative_valuation, ValuationResult, DEFAULT_BAND,
};
use quantbench::linalg::Matrix;
use quantbench::models::{
    predict, read_params, write_params, Architecture, Gate, ModelParams, ModelSpec,
};
use quantbench::preprocess::{
    fit_minmax, make_windows, split_train_test, FeatureMatrix, ScalerState,
};
use quantbench::sentiment::{daily_sentiment, merge_features, Lexicon, SentimentSeries};
use quantbench::train::{grad_check_with, train, GradCheckOptions};

use crate::config::RunConfig;
use crate::error::CliError;

fn output_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    Ok(&cfg.output_dir)
}

fn cache(cfg: &RunConfig) -> CacheDirSource {
    match &cfg.data.cache_dir {
        Some(dir) => CacheDirSource::new(dir.clone()),
        None => CacheDirSource::from_env(),
    }
}

fn clip(cfg: &RunConfig, series: PriceSeries) -> Result<PriceSeries, CliError> {
    if cfg.data.start.is_none() && cfg.data.end.is_none() {
        return Ok(series);
    }
    let dates = series.dates();
    let start = cfg.data.start.unwrap_or(dates[0]);
    let end = cfg.data.end.unwrap_or(dates[dates.len() - 1]);
    series.slice_dates(start, end).map_err(CliError::data)
}

/// The modeled stock, from `data.prices` or the cache.
pub fn load_series(cfg: &RunConfig) -> Result<PriceSeries, CliError> {
    let series = match (&cfg.data.prices, &cfg.data.symbol) {
        (Some(path), _) => load_ohlcv_csv(path).map_err(CliError::data)?,
        (None, Some(symbol)) => cache(cfg).load(symbol).map_err(CliError::data)?,
        (None, None) => {
            return Err(CliError::Config(
                "config key `data`: set `prices` or `symbol` to choose the modeled stock".into(),
            ))
        }
    };
    clip(cfg, series)
}

fn sentiment_series(
    cfg: &RunConfig,
    calendar: &[chrono::NaiveDate],
) -> Result<Option<SentimentSeries>, CliError> {
    let Some(news) = &cfg.data.news else {
        return Ok(None);
    };
    let mut items = load_news_jsonl(news).map_err(CliError::data)?;
    if let Some(symbol) = &cfg.data.symbol {
        items.retain(|i| i.symbol.eq_ignore_ascii_case(symbol));
    }
    let lexicon = match &cfg.data.lexicon {
        Some(path) => Lexicon::load(path).map_err(CliError::data)?,
        None => Lexicon::default(),
    };
    Ok(Some(daily_sentiment(
        &items,
        calendar,
        &lexicon,
        cfg.data.sentiment_decay,
    )))
}

/// Price column, plus the sentiment column when news is configured and
/// `with_sentiment` asks for it.
fn features(
    cfg: &RunConfig,
    series: &PriceSeries,
    with_sentiment: bool,
) -> Result<FeatureMatrix, CliError> {
    let prices = FeatureMatrix::from_series(series, cfg.data.column);
    if !with_sentiment {
        return Ok(prices);
    }
    match sentiment_series(cfg, prices.dates())? {
        Some(s) => merge_features(&prices, &s).map_err(CliError::data),
        None => Err(CliError::Config(
            "config key `data.news`: required when `data.use_sentiment` is true".into(),
        )),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let out = output_dir(cfg)?;
    let prices_path = out.join("prices.csv");
    write_ohlcv_csv(&series, &prices_path).map_err(CliError::data)?;
    let dates = series.dates();
    println!(
        "{}: {} rows from {} to {} -> {}",
        series.symbol(),
        series.len(),
        dates[0],
        dates[dates.len() - 1],
        prices_path.display()
    );
    if let Some(s) = sentiment_series(cfg, &dates)? {
        let path = out.join("sentiment.csv");
        let mut text = String::from("date,sentiment\n");
        for (d, v) in s.dates.iter().zip(&s.scores) {
            text.push_str(&format!("{},{}\n", d.format("%Y-%m-%d"), v));
        }
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        println!("sentiment: {} days -> {}", s.dates.len(), path.display());
    }
    Ok(())
}

fn spec_for(cfg: &RunConfig, features: usize) -> Result<ModelSpec, CliError> {
    Ok(ModelSpec {
        features,
        ..cfg.model()?.clone()
    })
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let data = features(cfg, &series, cfg.data.use_sentiment)?;
    let spec = spec_for(cfg, data.features())?;
    let (train_rows, _) = split_train_test(&data, cfg.train_fraction)?;
    let scaler = fit_minmax(&train_rows)?;
    let dataset = make_windows(&scaler.transform(&train_rows)?, spec.window, spec.horizon)?;
    let (params, history) = train(&spec, &dataset, &cfg.train)?;

    let out = output_dir(cfg)?;
    let model_path = out.join("model.qbnn");
    save_params(&model_path, &spec, &params)?;
    let loss_path = out.join("loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    fs::write(&loss_path, text).map_err(|e| CliError::io(&loss_path, e))?;
    write_json(&out.join("scaler.json"), &scaler)?;
    println!(
        "trained {} on {} windows for {} epochs, final loss {:.6e} -> {}",
        spec.architecture.name(),
        dataset.len(),
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        model_path.display()
    );
    Ok(())
}

fn save_params(path: &Path, spec: &ModelSpec, params: &ModelParams) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_params(&mut BufWriter::new(file), spec, params).map_err(|e| CliError::io(path, e))
}

fn load_params(path: &Path) -> Result<(ModelSpec, ModelParams), CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_params(&mut std::io::BufReader::new(file)).map_err(|e| CliError::io(path, e))
}

fn load_scaler(path: &Path) -> Result<ScalerState, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Scaled last `window` rows of `data` as a single sample.
fn last_window(
    data: &FeatureMatrix,
    scaler: &ScalerState,
    window: usize,
) -> Result<Matrix, CliError> {
    if data.rows() < window {
        return Err(CliError::Data(format!(
            "{} rows cannot fill a window of {window}",
            data.rows()
        )));
    }
    let tail = data.slice_rows(data.rows() - window, data.rows());
    Ok(scaler.transform(&tail)?.values().clone())
}

pub fn predict_cmd(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    scaler: Option<PathBuf>,
) -> Result<(), CliError> {
    let model = model.unwrap_or_else(|| cfg.output_dir.join("model.qbnn"));
    let scaler = scaler.unwrap_or_else(|| cfg.output_dir.join("scaler.json"));
    let (spec, params) = load_params(&model)?;
    let scaler = load_scaler(&scaler)?;
    let series = load_series(cfg)?;
    let data = features(cfg, &series, spec.features > 1)?;
    if scaler.features() != spec.features || data.features() != spec.features {
        return Err(CliError::Data(format!(
            "model expects {} features, scaler has {}, data has {}",
            spec.features,
            scaler.features(),
            data.features()
        )));
    }
    let x = last_window(&data, &scaler, spec.window)?;
    let pred = predict(&spec, &params, &[x]).map_err(CliError::training)?;
    let prices = scaler.unscale_matrix(0, &pred);

    let out = output_dir(cfg)?;
    let path = out.join("predictions.csv");
    let mut text = String::from("step,predicted\n");
    for k in 0..spec.horizon {
        text.push_str(&format!("{},{}\n", k + 1, prices.get(0, k)));
        println!("t+{}: {:.4}", k + 1, prices.get(0, k));
    }
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn benchmark_cmd(cfg: &RunConfig, with_sweep: bool) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let has_news = cfg.data.news.is_some();
    let data = features(cfg, &series, has_news)?;
    let base = spec_for(cfg, 1)?;
    let lineup = standard_lineup(&base, has_news);
    let opts = EvalOptions {
        train_fraction: cfg.train_fraction,
        metric_space: cfg.metric_space,
    };
    let outcome = benchmark(&lineup, &data, &opts, &cfg.train)?;

    let out = output_dir(cfg)?;
    write_benchmark_csv(out.join("benchmark.csv"), &outcome.report)?;
    for f in &outcome.forecasts {
        write_forecast_csv(out.join(forecast_file_name(&f.model)), f)?;
    }
    print!("{}", render_report(&outcome.report));

    if with_sweep {
        let report = sweep(
            &base,
            &data,
            &cfg.sweep.windows,
            &cfg.sweep.horizons,
            &opts,
            &cfg.train,
        )?;
        write_sweep_csv(out.join("sweep.csv"), &report)?;
        print!("\n{}", render_sweep(&report));
    }
    Ok(())
}

/// Next-close forecast per symbol from a price-only model, each series
/// scaled by its own min and max.
fn model_forecasts(
    path: &Path,
    set: &[PriceSeries],
    cfg: &RunConfig,
) -> Result<BTreeMap<String, f64>, CliError> {
    let (spec, params) = load_params(path)?;
    if spec.features != 1 {
        return Err(CliError::Config(format!(
            "--use-model needs a price-only model, {} has {} features",
            path.display(),
            spec.features
        )));
    }
    let mut out = BTreeMap::new();
    for series in set {
        let data = FeatureMatrix::from_series(series, cfg.data.column);
        let scaler = fit_minmax(&data)?;
        let x = last_window(&data, &scaler, spec.window)?;
        let pred = predict(&spec, &params, &[x]).map_err(CliError::training)?;
        out.insert(
            series.symbol().to_string(),
            scaler.unscale_value(0, pred.get(0, 0)),
        );
    }
    Ok(out)
}

fn write_valuation(path: &Path, results: &[ValuationResult]) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = String::from("symbol,pe,ps,flag\n");
    for r in results {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.symbol,
            opt(r.pe),
            opt(r.ps),
            r.flag.as_str()
        ));
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn advise_cmd(cfg: &RunConfig, use_model: Option<PathBuf>) -> Result<(), CliError> {
    if cfg.data.symbols.is_empty() {
        return Err(CliError::Config(
            "config key `data.symbols`: no symbols to advise on".into(),
        ));
    }
    let source = cache(cfg);
    let set = cfg
        .data
        .symbols
        .iter()
        .map(|s| {
            source
                .load(s)
                .map_err(CliError::data)
                .and_then(|series| clip(cfg, series))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let forecasts = match &use_model {
        Some(path) => Some(model_forecasts(path, &set, cfg)?),
        None => None,
    };
    let report = advise(&set, forecasts.as_ref(), &cfg.advisory).map_err(|e| match e {
        AdvisoryError::Empty | AdvisoryError::DuplicateSymbol(_) => CliError::config(e),
        other => CliError::data(other),
    })?;

    let out = output_dir(cfg)?;
    let path = out.join("advisory.csv");
    write_advisory_csv(&path, &report).map_err(CliError::data)?;
    print!("{}", render_advisory(&report));

    if let Some(f) = &cfg.data.fundamentals {
        let records = load_fundamentals_csv(f).map_err(CliError::data)?;
        let results = relative_valuation(&records, DEFAULT_BAND);
        write_valuation(&out.join("valuation.csv"), &results)?;
        println!();
        for r in &results {
            println!("{:<8} {}", r.symbol, r.flag.as_str());
        }
    }
    Ok(())
}

/// Largest configuration the gradient check certifies.
pub fn gradcheck_spec(architecture: Architecture) -> ModelSpec {
    ModelSpec {
        architecture,
        layers: 2,
        units: 4,
        dropout_rate: 0.2,
        window: 5,
        horizon: 2,
        features: 2,
        seed: 7,
    }
}

/// Returns whether every architecture passed.
pub fn gradcheck_cmd(inject_fault: bool) -> Result<bool, CliError> {
    use rand::{Rng, SeedableRng};
    let tolerance = 1e-4;
    let mut all_pass = true;
    println!(
        "{:<14}  {:>6}  {:>12}  status",
        "architecture", "params", "max_rel_err"
    );
    for arch in Architecture::ALL {
        let spec = gradcheck_spec(arch);
        let mut rng = quantbench::models::ModelRng::seed_from_u64(3);
        let inputs: Vec<Matrix> = (0..3)
            .map(|_| {
                Matrix::from_fn(spec.window, spec.features, |_, _| {
                    rng.random_range(-1.0..1.0)
                })
            })
            .collect();
        let targets: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_fn(spec.horizon, 1, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let params = quantbench::models::init_params_seeded(&spec).map_err(CliError::training)?;
        let opts = GradCheckOptions {
            inject_fault: inject_fault.then_some(Gate::Forget),
            ..GradCheckOptions::default()
        };
        let report = grad_check_with(&spec, &params, &inputs, &targets, &opts)?;
        let pass = report.max_relative_error < tolerance;
        all_pass &= pass;
        println!(
            "{:<14}  {:>6}  {:>12.3e}  {}",
            arch.name(),
            report.entries_checked,
            report.max_relative_error,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(all_pass)
}
