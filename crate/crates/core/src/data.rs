//! Daily OHLCV price history and news headline ingestion.
//!
//! Price files use the header `date,open,high,low,close,adj_close,volume`
//! with ISO-8601 dates. A [`HistorySource`] hands out whole per-symbol series;
//! the stock implementation reads `<cache_dir>/<SYMBOL>.csv`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OHLCV_HEADER: [&str; 7] = [
    "date",
    "open",
    "high",
    "low",
    "close",
    "adj_close",
    "volume",
];

/// Environment variable naming the default cache directory.
pub const CACHE_DIR_ENV: &str = "QUANTBENCH_CACHE_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header must be `{expected}`, found `{found}`")]
    BadHeader {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}, line {line}: {message}")]
    BadRow {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("series needs at least 2 bars, found {0}")]
    TooShort(usize),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("no bars for {symbol} between {start} and {end}")]
    EmptyRange {
        symbol: String,
        start: NaiveDate,
        end: NaiveDate,
    },
    #[error("start date {start} must precede end date {end}")]
    InvalidRange { start: NaiveDate, end: NaiveDate },
    #[error("invalid bar on {date}: {message}")]
    InvalidBar { date: NaiveDate, message: String },
    #[error("dates must be strictly increasing ({prev} then {next})")]
    Unordered { prev: NaiveDate, next: NaiveDate },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: u64,
}

impl PriceBar {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close, self.adj_close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and positive".into());
        }
        let body_low = self.open.min(self.close);
        let body_high = self.open.max(self.close);
        if self.low > body_low || body_high > self.high {
            return Err(format!(
                "expected low <= min(open, close) <= max(open, close) <= high, got low={} open={} close={} high={}",
                self.low, self.open, self.close, self.high
            ));
        }
        Ok(())
    }
}

/// Which price column is modeled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceColumn {
    #[default]
    Close,
    AdjClose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    symbol: String,
    bars: Vec<PriceBar>,
}

impl PriceSeries {
    /// Validates the series invariants: at least two bars, strictly
    /// increasing dates and well-formed bars.
    pub fn new(symbol: impl Into<String>, bars: Vec<PriceBar>) -> Result<Self> {
        if bars.len() < 2 {
            return Err(DataError::TooShort(bars.len()));
        }
        for bar in &bars {
            bar.validate().map_err(|message| DataError::InvalidBar {
                date: bar.date,
                message,
            })?;
        }
        for pair in bars.windows(2) {
            if pair[0].date == pair[1].date {
                return Err(DataError::DuplicateDate(pair[0].date));
            }
            if pair[0].date > pair[1].date {
                return Err(DataError::Unordered {
                    prev: pair[0].date,
                    next: pair[1].date,
                });
            }
        }
        Ok(Self {
            symbol: symbol.into(),
            bars,
        })
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn bars(&self) -> &[PriceBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.bars.iter().map(|b| b.date).collect()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.column(PriceColumn::Close)
    }

    pub fn column(&self, column: PriceColumn) -> Vec<f64> {
        self.bars
            .iter()
            .map(|b| match column {
                PriceColumn::Close => b.close,
                PriceColumn::AdjClose => b.adj_close,
            })
            .collect()
    }

    /// Bars with `start <= date <= end`.
    pub fn slice_dates(&self, start: NaiveDate, end: NaiveDate) -> Result<Self> {
        let bars: Vec<PriceBar> = self
            .bars
            .iter()
            .filter(|b| b.date >= start && b.date <= end)
            .copied()
            .collect();
        if bars.is_empty() {
            return Err(DataError::EmptyRange {
                symbol: self.symbol.clone(),
                start,
                end,
            });
        }
        Self::new(self.symbol.clone(), bars)
    }

    /// Keeps the last `n` bars (or all of them when shorter).
    pub fn tail(&self, n: usize) -> Result<Self> {
        let skip = self.bars.len().saturating_sub(n);
        Self::new(self.symbol.clone(), self.bars[skip..].to_vec())
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> std::result::Result<T, String> {
    let raw = record
        .get(idx)
        .ok_or_else(|| format!("missing field `{name}`"))?
        .trim();
    raw.parse::<T>()
        .map_err(|_| format!("cannot parse `{name}` from `{raw}`"))
}

/// Loads a price file. Rows may appear in any order; the result is sorted by
/// date and duplicate dates are rejected.
pub fn load_ohlcv_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::BadRow {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for column in OHLCV_HEADER {
        if !headers.iter().any(|h| h.trim() == column) {
            return Err(DataError::MissingColumn {
                path: path.to_path_buf(),
                column: column.to_string(),
            });
        }
    }
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != OHLCV_HEADER {
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            expected: OHLCV_HEADER.join(","),
            found: found.join(","),
        });
    }

    let mut bars = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::BadRow {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad_row = |message: String| DataError::BadRow {
            path: path.to_path_buf(),
            line,
            message,
        };
        let date_raw = record.get(0).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d")
            .map_err(|_| bad_row(format!("cannot parse date `{date_raw}`")))?;
        let bar = PriceBar {
            date,
            open: parse_field(&record, 1, "open").map_err(bad_row)?,
            high: parse_field(&record, 2, "high").map_err(bad_row)?,
            low: parse_field(&record, 3, "low").map_err(bad_row)?,
            close: parse_field(&record, 4, "close").map_err(bad_row)?,
            adj_close: parse_field(&record, 5, "adj_close").map_err(bad_row)?,
            volume: parse_field(&record, 6, "volume").map_err(bad_row)?,
        };
        bar.validate().map_err(bad_row)?;
        bars.push(bar);
    }
    bars.sort_by_key(|b| b.date);
    if let Some(pair) = bars.windows(2).find(|p| p[0].date == p[1].date) {
        return Err(DataError::DuplicateDate(pair[0].date));
    }
    let symbol = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    PriceSeries::new(symbol, bars)
}

/// Writes a series in the format [`load_ohlcv_csv`] reads. Floats use the
/// shortest representation that round-trips exactly.
pub fn write_ohlcv_csv(series: &PriceSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("date,open,high,low,close,adj_close,volume\n");
    for b in series.bars() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            b.date.format("%Y-%m-%d"),
            b.open,
            b.high,
            b.low,
            b.close,
            b.adj_close,
            b.volume
        ));
    }
    let mut file = File::create(path).map_err(io_err(path))?;
    file.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Provider of full per-symbol daily histories.
///
/// Implementations must be safe for concurrent reads.
pub trait HistorySource: Send + Sync {
    fn load(&self, symbol: &str) -> Result<PriceSeries>;
}

/// Local directory of `<SYMBOL>.csv` files.
#[derive(Debug, Clone)]
pub struct CacheDirSource {
    dir: PathBuf,
}

impl CacheDirSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Uses `$QUANTBENCH_CACHE_DIR`, falling back to `./cache`.
    pub fn from_env() -> Self {
        let dir = std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("cache"));
        Self::new(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, symbol: &str) -> PathBuf {
        self.dir.join(format!("{symbol}.csv"))
    }
}

fn valid_symbol(symbol: &str) -> bool {
    !symbol.is_empty()
        && symbol
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '^'))
        && symbol != "."
        && symbol != ".."
}

impl HistorySource for CacheDirSource {
    fn load(&self, symbol: &str) -> Result<PriceSeries> {
        if !valid_symbol(symbol) {
            return Err(DataError::UnknownSymbol(symbol.to_string()));
        }
        let path = self.path_for(symbol);
        if !path.is_file() {
            return Err(DataError::UnknownSymbol(symbol.to_string()));
        }
        let series = load_ohlcv_csv(&path)?;
        PriceSeries::new(symbol, series.bars)
    }
}

/// Inclusive date-range slice of a symbol's history.
pub fn fetch_history(
    symbol: &str,
    start: NaiveDate,
    end: NaiveDate,
    source: &dyn HistorySource,
) -> Result<PriceSeries> {
    if start >= end {
        return Err(DataError::InvalidRange { start, end });
    }
    source.load(symbol)?.slice_dates(start, end)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsItem {
    pub date: NaiveDate,
    pub symbol: String,
    pub text: String,
}

/// Reads one JSON object per line. Blank lines are skipped; any other
/// malformed line fails the whole load with its line number.
pub fn load_news_jsonl(path: impl AsRef<Path>) -> Result<Vec<NewsItem>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = idx as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DataError::BadRow {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let item: NewsItem = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if item.text.trim().is_empty() {
            return Err(bad("headline text is blank".into()));
        }
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, body).unwrap();
        path
    }

    const FIVE_ROWS: &str = "date,open,high,low,close,adj_close,volume
2021-01-08,10,12,9,11,11,100
2021-01-04,10,11,9,10.5,10.5,100
2021-01-05,10.5,11,10,10.8,10.7,200
2021-01-06,10.8,11.5,10.2,11.2,11.1,150
2021-01-07,11.2,11.4,10.9,11,10.9,120
";

    #[test]
    fn loads_and_sorts_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "ABC.csv", FIVE_ROWS);
        let series = load_ohlcv_csv(&path).unwrap();
        assert_eq!(series.len(), 5);
        assert_eq!(series.symbol(), "ABC");
        assert!(series.dates().windows(2).all(|d| d[0] < d[1]));
        assert_eq!(series.bars()[4].close, 11.0);
    }

    #[test]
    fn duplicate_date_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{FIVE_ROWS}2021-01-05,10.5,11,10,10.8,10.7,200\n");
        let path = write(dir.path(), "DUP.csv", &body);
        let err = load_ohlcv_csv(&path).unwrap_err();
        assert!(matches!(err, DataError::DuplicateDate(d) if d.to_string() == "2021-01-05"));
        assert!(err.to_string().contains("2021-01-05"));
    }

    #[test]
    fn rejects_missing_column_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "a.csv", "date,open,high,low,close,volume\n");
        assert!(matches!(
            load_ohlcv_csv(&path),
            Err(DataError::MissingColumn { column, .. }) if column == "adj_close"
        ));

        let path = write(
            dir.path(),
            "b.csv",
            "date,open,high,low,close,adj_close,volume\n2021-01-04,10,11,9,10,10,1\n2021-01-05,10,x,9,10,10,1\n",
        );
        let err = load_ohlcv_csv(&path).unwrap_err();
        assert!(matches!(err, DataError::BadRow { line: 3, .. }), "{err}");

        let path = write(
            dir.path(),
            "c.csv",
            "date,open,high,low,close,adj_close,volume\n2021-01-04,10,11,9,10,10,1\n2021-01-05,10,9.5,9,10,10,1\n",
        );
        assert!(matches!(
            load_ohlcv_csv(&path),
            Err(DataError::BadRow { line: 3, .. })
        ));

        assert!(matches!(
            load_ohlcv_csv(dir.path().join("missing.csv")),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn cache_source_and_range() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "ABC.csv", FIVE_ROWS);
        let source = CacheDirSource::new(dir.path());
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        let all = fetch_history("ABC", d("2020-01-01"), d("2022-01-01"), &source).unwrap();
        assert_eq!(all, load_ohlcv_csv(dir.path().join("ABC.csv")).unwrap());
        let part = fetch_history("ABC", d("2021-01-05"), d("2021-01-07"), &source).unwrap();
        assert_eq!(part.len(), 3);
        assert!(matches!(
            fetch_history("ZZZ", d("2021-01-01"), d("2021-02-01"), &source),
            Err(DataError::UnknownSymbol(_))
        ));
        assert!(matches!(
            fetch_history("../ABC", d("2021-01-01"), d("2021-02-01"), &source),
            Err(DataError::UnknownSymbol(_))
        ));
        assert!(matches!(
            fetch_history("ABC", d("2022-01-01"), d("2022-02-01"), &source),
            Err(DataError::EmptyRange { .. })
        ));
        assert!(matches!(
            fetch_history("ABC", d("2022-01-01"), d("2021-02-01"), &source),
            Err(DataError::InvalidRange { .. })
        ));
    }

    #[test]
    fn news_lines() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "empty.jsonl", "");
        assert!(load_news_jsonl(&empty).unwrap().is_empty());

        let body = r#"{"date":"2021-01-04","symbol":"ABC","text":"Shares rally"}
{"date":"2021-01-05","symbol":"ABC","text":"Profit warning"}
{"date":"2021-01-05","symbol":"XYZ","text":"Record revenue"}
"#;
        let ok = write(dir.path(), "ok.jsonl", body);
        let items = load_news_jsonl(&ok).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[1].text, "Profit warning");

        let blank = write(
            dir.path(),
            "blank.jsonl",
            "{\"date\":\"2021-01-04\",\"symbol\":\"ABC\",\"text\":\"ok\"}\n{\"date\":\"2021-01-05\",\"symbol\":\"ABC\",\"text\":\"   \"}\n",
        );
        assert!(matches!(
            load_news_jsonl(&blank),
            Err(DataError::BadRow { line: 2, .. })
        ));
        let garbage = write(dir.path(), "garbage.jsonl", "not json\n");
        assert!(matches!(
            load_news_jsonl(&garbage),
            Err(DataError::BadRow { line: 1, .. })
        ));
    }
}
