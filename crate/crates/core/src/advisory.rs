//! Buy/sell/hold advisories ranked by the returns-to-volatility ratio.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PriceSeries;

/// Default hold band around zero.
pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Volatility at or below this is treated as a flat series.
const FLAT_VOLATILITY: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdvisoryError {
    #[error("need at least {needed} values, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("zero volatility: the series is flat and has no meaningful ratio")]
    Degenerate { mean: f64 },
    #[error("no series to advise on")]
    Empty,
    #[error("symbol {0} appears more than once")]
    DuplicateSymbol(String),
    #[error("forecast for {symbol} must be a positive price, got {value}")]
    BadForecast { symbol: String, value: f64 },
    #[error("writing {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

pub type Result<T> = std::result::Result<T, AdvisoryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Buy,
    Sell,
    Hold,
}

impl Signal {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Buy => "buy",
            Self::Sell => "sell",
            Self::Hold => "hold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioStats {
    pub mean: f64,
    pub volatility: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvisoryEntry {
    pub symbol: String,
    pub mean_return: f64,
    pub volatility: f64,
    /// `None` for a flat series.
    pub ratio: Option<f64>,
    pub signal: Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvisoryReport {
    pub entries: Vec<AdvisoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvisoryOptions {
    pub threshold: f64,
    /// Use only the most recent `lookback` returns.
    pub lookback: Option<usize>,
}

impl Default for AdvisoryOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            lookback: None,
        }
    }
}

/// `close_t / close_{t-1} − 1`.
pub fn returns_from_closes(closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(AdvisoryError::TooShort {
            needed: 2,
            found: closes.len(),
        });
    }
    Ok(closes.windows(2).map(|w| w[1] / w[0] - 1.0).collect())
}

pub fn simple_returns(series: &PriceSeries) -> Result<Vec<f64>> {
    returns_from_closes(&series.closes())
}

/// Mean return over its sample standard deviation, un-annualised.
pub fn return_volatility_ratio(returns: &[f64]) -> Result<RatioStats> {
    let n = returns.len();
    if n < 2 {
        return Err(AdvisoryError::TooShort {
            needed: 2,
            found: n,
        });
    }
    let nf = n as f64;
    let mean = returns.iter().sum::<f64>() / nf;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (nf - 1.0);
    let volatility = var.sqrt();
    if volatility <= FLAT_VOLATILITY {
        return Err(AdvisoryError::Degenerate { mean });
    }
    Ok(RatioStats {
        mean,
        volatility,
        ratio: mean / volatility,
    })
}

pub fn signal_for(ratio: f64, threshold: f64) -> Signal {
    if ratio >= threshold {
        Signal::Buy
    } else if ratio <= -threshold {
        Signal::Sell
    } else {
        Signal::Hold
    }
}

/// Ranks every series by ratio, best first, flat series last. With
/// `forecasts` (predicted next close per symbol), the implied next return is
/// appended to that symbol's returns first.
pub fn advise(
    series_set: &[PriceSeries],
    forecasts: Option<&BTreeMap<String, f64>>,
    opts: &AdvisoryOptions,
) -> Result<AdvisoryReport> {
    if series_set.is_empty() {
        return Err(AdvisoryError::Empty);
    }
    let mut seen = BTreeSet::new();
    let mut ranked = Vec::new();
    let mut flat = Vec::new();
    for series in series_set {
        let symbol = series.symbol().to_string();
        if !seen.insert(symbol.clone()) {
            return Err(AdvisoryError::DuplicateSymbol(symbol));
        }
        let closes = series.closes();
        let mut returns = returns_from_closes(&closes)?;
        if let Some(n) = opts.lookback {
            let skip = returns.len().saturating_sub(n);
            returns.drain(..skip);
        }
        if let Some(next) = forecasts.and_then(|f| f.get(&symbol)) {
            if !(*next > 0.0 && next.is_finite()) {
                return Err(AdvisoryError::BadForecast {
                    symbol,
                    value: *next,
                });
            }
            returns.push(next / closes[closes.len() - 1] - 1.0);
        }
        match return_volatility_ratio(&returns) {
            Ok(stats) => ranked.push(AdvisoryEntry {
                symbol,
                mean_return: stats.mean,
                volatility: stats.volatility,
                ratio: Some(stats.ratio),
                signal: signal_for(stats.ratio, opts.threshold),
            }),
            Err(AdvisoryError::Degenerate { mean }) => flat.push(AdvisoryEntry {
                symbol,
                mean_return: mean,
                volatility: 0.0,
                ratio: None,
                signal: Signal::Hold,
            }),
            Err(e) => return Err(e),
        }
    }
    ranked.sort_by(|a, b| {
        let (ra, rb) = (a.ratio.unwrap_or(0.0), b.ratio.unwrap_or(0.0));
        rb.total_cmp(&ra).then_with(|| a.symbol.cmp(&b.symbol))
    });
    flat.sort_by(|a, b| a.symbol.cmp(&b.symbol));
    ranked.extend(flat);
    Ok(AdvisoryReport { entries: ranked })
}

pub fn render_advisory(report: &AdvisoryReport) -> String {
    let width = report
        .entries
        .iter()
        .map(|e| e.symbol.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>9}  {:>6}\n",
        "symbol", "mean_return", "volatility", "ratio", "signal"
    );
    for e in &report.entries {
        let ratio = e
            .ratio
            .map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.6}  {:>12.6}  {:>9}  {:>6}",
            e.symbol,
            e.mean_return,
            e.volatility,
            ratio,
            e.signal.as_str()
        );
    }
    out
}

/// `symbol,mean_return,volatility,ratio,signal`; a flat series leaves
/// `ratio` empty.
pub fn write_advisory_csv(path: impl AsRef<Path>, report: &AdvisoryReport) -> Result<()> {
    let path = path.as_ref();
    let wrap = |source| AdvisoryError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["symbol", "mean_return", "volatility", "ratio", "signal"])
        .map_err(wrap)?;
    for e in &report.entries {
        w.write_record([
            e.symbol.clone(),
            e.mean_return.to_string(),
            e.volatility.to_string(),
            e.ratio.map(|r| r.to_string()).unwrap_or_default(),
            e.signal.as_str().to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))
}
