//! Forecast accuracy metrics, the paired significance test, the multi-model
//! benchmark and window/horizon sweeps.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::linalg::{Matrix, ShapeError};
use crate::models::{predict, Architecture, ModelError, ModelSpec};
use crate::preprocess::{
    fit_minmax, make_test_windows, make_windows, split_train_test, FeatureMatrix, PreprocessError,
    ScalerState,
};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} paired samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("a benchmark needs at least two models")]
    TooFewModels,
    #[error("model `{0}` needs a sentiment column but the data has only prices")]
    MissingSentiment(String),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("writing {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Whether errors are measured on the scaled `[0, 1]` values or on prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpace {
    #[default]
    Scaled,
    Price,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

fn check_pair(pred: &Matrix, actual: &Matrix, op: &'static str) -> Result<()> {
    if pred.shape() != actual.shape() {
        return Err(ShapeError::Mismatch {
            op,
            lhs: pred.shape(),
            rhs: actual.shape(),
        }
        .into());
    }
    if pred.is_empty() {
        return Err(EvalError::TooFewSamples {
            needed: 1,
            found: 0,
        });
    }
    Ok(())
}

pub fn metrics(pred: &Matrix, actual: &Matrix) -> Result<Metrics> {
    check_pair(pred, actual, "metrics")?;
    let n = pred.len() as f64;
    let (mut sq, mut abs) = (0.0, 0.0);
    for (p, a) in pred.as_slice().iter().zip(actual.as_slice()) {
        let d = p - a;
        sq += d * d;
        abs += d.abs();
    }
    let mse = sq / n;
    Ok(Metrics {
        mse,
        rmse: mse.sqrt(),
        mae: abs / n,
    })
}

/// Squared error of each sample (row), averaged over the horizon.
pub fn squared_errors(pred: &Matrix, actual: &Matrix) -> Result<Vec<f64>> {
    check_pair(pred, actual, "squared_errors")?;
    let h = pred.cols() as f64;
    Ok((0..pred.rows())
        .map(|r| {
            pred.row(r)
                .iter()
                .zip(actual.row(r))
                .map(|(p, a)| (p - a) * (p - a))
                .sum::<f64>()
                / h
        })
        .collect())
}

/// Two-sided p-value of a Student t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Paired two-sided t-test on per-sample differences `a − b`.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            found: n,
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(1.0);
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let t = if var == 0.0 {
        f64::INFINITY
    } else {
        mean / (var.sqrt() / nf.sqrt())
    };
    Ok(t_two_sided_p(t, nf - 1.0))
}

/// One model of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEntry {
    pub name: String,
    pub spec: ModelSpec,
    /// Feed every feature column (price plus sentiment) instead of the price
    /// alone.
    pub use_sentiment: bool,
}

/// vanilla, vanilla+sentiment (only when sentiment is available),
/// bidirectional, seq2seq and two_path, all sharing `base`'s sizes.
pub fn standard_lineup(base: &ModelSpec, with_sentiment: bool) -> Vec<ModelEntry> {
    let entry = |name: &str, architecture, use_sentiment| ModelEntry {
        name: name.to_string(),
        spec: ModelSpec {
            architecture,
            ..base.clone()
        },
        use_sentiment,
    };
    let mut out = vec![entry("vanilla", Architecture::Vanilla, false)];
    if with_sentiment {
        out.push(entry("vanilla+sentiment", Architecture::Vanilla, true));
    }
    out.push(entry("bidirectional", Architecture::Bidirectional, false));
    out.push(entry("seq2seq", Architecture::Seq2seq, false));
    out.push(entry("two_path", Architecture::TwoPath, false));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub train_fraction: f64,
    pub metric_space: MetricSpace,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            train_fraction: crate::preprocess::DEFAULT_TRAIN_FRACTION,
            metric_space: MetricSpace::Scaled,
        }
    }
}

/// First-step forecasts against actual prices for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub model: String,
    pub dates: Vec<NaiveDate>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// A trained-and-tested model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub squared_errors: Vec<f64>,
    pub forecast: Forecast,
}

/// Splits, scales on the training rows, trains `spec` and scores it on the
/// test rows. `data` must carry exactly `spec.features` columns.
pub fn evaluate(
    name: &str,
    spec: &ModelSpec,
    data: &FeatureMatrix,
    opts: &EvalOptions,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let (train_rows, test_rows) = split_train_test(data, opts.train_fraction)?;
    let scaler = fit_minmax(&train_rows)?;
    let train_scaled = scaler.transform(&train_rows)?;
    let test_scaled = scaler.transform(&test_rows)?;
    let train_set = make_windows(&train_scaled, spec.window, spec.horizon)?;
    let test_set = make_test_windows(&train_scaled, &test_scaled, spec.window, spec.horizon)?;
    let spec = ModelSpec {
        features: data.features(),
        ..spec.clone()
    };
    let (params, _) = train(&spec, &train_set, cfg)?;
    let pred = predict(&spec, &params, &test_set.inputs)?;
    let actual = test_set.target_matrix();
    score(
        name,
        &pred,
        &actual,
        &scaler,
        &test_set.target_dates,
        opts.metric_space,
    )
}

fn score(
    name: &str,
    pred: &Matrix,
    actual: &Matrix,
    scaler: &ScalerState,
    dates: &[NaiveDate],
    space: MetricSpace,
) -> Result<Evaluation> {
    let pred_price = scaler.unscale_matrix(0, pred);
    let actual_price = scaler.unscale_matrix(0, actual);
    let (p, a) = match space {
        MetricSpace::Scaled => (pred, actual),
        MetricSpace::Price => (&pred_price, &actual_price),
    };
    Ok(Evaluation {
        metrics: metrics(p, a)?,
        squared_errors: squared_errors(p, a)?,
        forecast: Forecast {
            model: name.to_string(),
            dates: dates.to_vec(),
            actual: actual_price.column(0),
            predicted: pred_price.column(0),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Paired test against the best model (1 for the best model itself).
    pub p_value: f64,
}

/// Rows ranked by ascending mse.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn best(&self) -> Option<&MetricsRow> {
        self.rows.first()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutcome {
    pub report: MetricsReport,
    /// In lineup order.
    pub forecasts: Vec<Forecast>,
}

/// Trains and tests every entry on the same chronological split. Column 0
/// of `data` is the price; any further columns are sentiment features used
/// only by entries that ask for them.
pub fn benchmark(
    entries: &[ModelEntry],
    data: &FeatureMatrix,
    opts: &EvalOptions,
    cfg: &TrainConfig,
) -> Result<BenchmarkOutcome> {
    if entries.len() < 2 {
        return Err(EvalError::TooFewModels);
    }
    let prices = data.leading_columns(1)?;
    let mut evaluations = Vec::with_capacity(entries.len());
    for entry in entries {
        let input = if entry.use_sentiment {
            if data.features() < 2 {
                return Err(EvalError::MissingSentiment(entry.name.clone()));
            }
            data
        } else {
            &prices
        };
        evaluations.push(evaluate(&entry.name, &entry.spec, input, opts, cfg)?);
    }

    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        evaluations[a]
            .metrics
            .mse
            .total_cmp(&evaluations[b].metrics.mse)
            .then_with(|| entries[a].name.cmp(&entries[b].name))
    });
    let best = &evaluations[order[0]].squared_errors;
    let mut rows = Vec::with_capacity(order.len());
    for &idx in &order {
        let e = &evaluations[idx];
        rows.push(MetricsRow {
            model: entries[idx].name.clone(),
            mse: e.metrics.mse,
            rmse: e.metrics.rmse,
            mae: e.metrics.mae,
            p_value: significance_test(&e.squared_errors, best)?,
        });
    }
    Ok(BenchmarkOutcome {
        report: MetricsReport { rows },
        forecasts: evaluations.into_iter().map(|e| e.forecast).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub window: usize,
    pub horizon: usize,
    /// `None` when the series is too short for this cell.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    /// Window-major grid order.
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, window: usize, horizon: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.window == window && c.horizon == horizon)
    }
}

/// Evaluates `spec` at every `(window, horizon)` with the same seeds.
pub fn sweep(
    spec: &ModelSpec,
    data: &FeatureMatrix,
    windows: &[usize],
    horizons: &[usize],
    opts: &EvalOptions,
    cfg: &TrainConfig,
) -> Result<SweepReport> {
    if windows.is_empty() || horizons.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let prices = data.leading_columns(1)?;
    let mut cells = Vec::with_capacity(windows.len() * horizons.len());
    for &window in windows {
        for &horizon in horizons {
            let cell_spec = ModelSpec {
                window,
                horizon,
                ..spec.clone()
            };
            let rmse = match evaluate("sweep", &cell_spec, &prices, opts, cfg) {
                Ok(e) => Some(e.metrics.rmse),
                Err(EvalError::Preprocess(PreprocessError::TooShort { .. })) => None,
                Err(e) => return Err(e),
            };
            cells.push(SweepCell {
                window,
                horizon,
                rmse,
            });
        }
    }
    Ok(SweepReport { cells })
}

pub fn render_report(report: &MetricsReport) -> String {
    let width = report
        .rows
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>12}  {:>10}  {:>10}  {:>10}",
        "model", "mse", "rmse", "mae", "p_value"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.6}  {:>10.6}  {:>10.6}  {:>10.4}",
            r.model, r.mse, r.rmse, r.mae, r.p_value
        );
    }
    out
}

pub fn render_sweep(report: &SweepReport) -> String {
    let mut out = format!("{:>8}  {:>8}  {:>10}\n", "window", "horizon", "rmse");
    for c in &report.cells {
        let rmse = c
            .rmse
            .map_or_else(|| "infeasible".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{:>8}  {:>8}  {:>10}", c.window, c.horizon, rmse);
    }
    out
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let wrap = |source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `model,mse,rmse,mae,p_value`
pub fn write_benchmark_csv(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["model", "mse", "rmse", "mae", "p_value"],
        report.rows.iter().map(|r| {
            vec![
                r.model.clone(),
                r.mse.to_string(),
                r.rmse.to_string(),
                r.mae.to_string(),
                r.p_value.to_string(),
            ]
        }),
    )
}

/// `window,horizon,rmse`; infeasible cells leave `rmse` empty.
pub fn write_sweep_csv(path: impl AsRef<Path>, report: &SweepReport) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["window", "horizon", "rmse"],
        report.cells.iter().map(|c| {
            vec![
                c.window.to_string(),
                c.horizon.to_string(),
                c.rmse.map(|v| v.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

/// `date,actual,predicted`
pub fn write_forecast_csv(path: impl AsRef<Path>, forecast: &Forecast) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["date", "actual", "predicted"],
        forecast
            .dates
            .iter()
            .zip(&forecast.actual)
            .zip(&forecast.predicted)
            .map(|((d, a), p)| {
                vec![
                    d.format("%Y-%m-%d").to_string(),
                    a.to_string(),
                    p.to_string(),
                ]
            }),
    )
}

/// File name for a model's forecast CSV.
pub fn forecast_file_name(model: &str) -> String {
    let slug: String = model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("forecast_{slug}.csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn metric_basics() {
        let a = col(&[0.1, 0.5, 0.9]);
        let m = metrics(&a, &a).unwrap();
        assert_eq!((m.mse, m.rmse, m.mae), (0.0, 0.0, 0.0));
        let m = metrics(&col(&[1.5, 0.5, -0.5, 2.0]), &col(&[1.0, 0.0, -1.0, 1.5])).unwrap();
        assert_eq!((m.mse, m.rmse, m.mae), (0.25, 0.5, 0.5));
        assert!(metrics(&a, &col(&[1.0])).is_err());
        assert!(metrics(&Matrix::zeros(0, 1), &Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn rounded_rmse_from_reported_mse() {
        let rmse = 0.00035f64.sqrt();
        assert!((rmse - 0.0187).abs() < 5e-5);
        assert_eq!(format!("{rmse:.3}"), "0.019");
    }

    #[test]
    fn per_sample_squared_errors_average_the_horizon() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(squared_errors(&p, &a).unwrap(), vec![2.5, 4.5]);
    }

    #[test]
    fn t_table_critical_value() {
        // t(0.975, 9) = 2.262
        let p = t_two_sided_p(2.262, 9.0);
        assert!((p - 0.05).abs() < 1e-3, "{p}");
        assert!((t_two_sided_p(1.96, 1e6) - 0.05).abs() < 1e-3);
        assert_eq!(t_two_sided_p(0.0, 5.0), 1.0);
    }

    #[test]
    fn significance_edge_cases() {
        let a = [0.1, 0.2, 0.3];
        assert_eq!(significance_test(&a, &a).unwrap(), 1.0);
        assert!(matches!(
            significance_test(&a, &a[..2]),
            Err(EvalError::LengthMismatch(3, 2))
        ));
        assert!(matches!(
            significance_test(&a[..1], &a[..1]),
            Err(EvalError::TooFewSamples { .. })
        ));
        // A constant non-zero shift is infinitely significant.
        assert_eq!(significance_test(&[1.0, 2.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn small_consistent_difference_is_significant() {
        let b: Vec<f64> = (0..30)
            .map(|i| 0.01 + 0.001 * (i as f64 * 0.7).sin())
            .collect();
        let a: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.001 + 1e-5 * (i as f64 * 1.3).cos())
            .collect();
        assert!(significance_test(&a, &b).unwrap() < 0.01);
    }

    /// Paired t statistic computed by hand for a small fixture.
    #[test]
    fn hand_computed_t_statistic() {
        let a = [3.0, 5.0, 4.0, 6.0];
        let b = [1.0, 2.0, 3.0, 2.0];
        // d = 2, 3, 1, 4 ; mean 2.5 ; sample var 5/3 ; t = 2.5 / sqrt(5/12)
        let t = 2.5 / (5.0f64 / 12.0).sqrt();
        let expected = t_two_sided_p(t, 3.0);
        assert!((significance_test(&a, &b).unwrap() - expected).abs() < 1e-15);
        // Independently: for df = 3, the two-sided p of t = 3.873 is about 0.0305.
        assert!((expected - 0.0305).abs() < 5e-4, "{expected}");
    }

    #[test]
    fn lineup_contents() {
        let base = ModelSpec::default();
        let names: Vec<_> = standard_lineup(&base, true)
            .into_iter()
            .map(|e| e.name)
            .collect();
        assert_eq!(
            names,
            [
                "vanilla",
                "vanilla+sentiment",
                "bidirectional",
                "seq2seq",
                "two_path"
            ]
        );
        assert_eq!(standard_lineup(&base, false).len(), 4);
        assert_eq!(
            forecast_file_name("vanilla+sentiment"),
            "forecast_vanilla_sentiment.csv"
        );
    }

    proptest! {
        #[test]
        fn rmse_identities(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let p = col(&pairs.iter().map(|x| x.0).collect::<Vec<_>>());
            let a = col(&pairs.iter().map(|x| x.1).collect::<Vec<_>>());
            let m = metrics(&p, &a).unwrap();
            prop_assert!((m.rmse - m.mse.sqrt()).abs() <= 1e-12);
            prop_assert!(m.rmse >= m.mae - 1e-12);
        }

        #[test]
        fn significance_is_symmetric(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..40)) {
            let a: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let b: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let p1 = significance_test(&a, &b).unwrap();
            let p2 = significance_test(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&p1));
            prop_assert!((p1 - p2).abs() < 1e-12);
        }
    }
}
