//! Price/earnings and price/sales ratios, and a within-sector peer comparison
//! that flags over- and undervalued stocks.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative band around the sector median inside which a stock is `inline`.
pub const DEFAULT_BAND: f64 = 0.2;

#[derive(Debug, Error)]
pub enum FundamentalsError {
    #[error("price must be positive, got {0}")]
    InvalidPrice(f64),
    #[error("ratio undefined for a non-positive denominator ({0})")]
    UndefinedRatio(f64),
    #[error("fundamentals file: {0}")]
    Csv(#[from] csv::Error),
    #[error("fundamentals record for {symbol}: {message}")]
    InvalidRecord { symbol: String, message: String },
}

pub type Result<T> = std::result::Result<T, FundamentalsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalsRecord {
    pub symbol: String,
    pub price: f64,
    pub eps: f64,
    pub sales_per_share: f64,
    pub sector: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuationFlag {
    Overvalued,
    Undervalued,
    Inline,
    Indeterminate,
}

impl ValuationFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Overvalued => "overvalued",
            Self::Undervalued => "undervalued",
            Self::Inline => "inline",
            Self::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValuationResult {
    pub symbol: String,
    pub pe: Option<f64>,
    pub ps: Option<f64>,
    pub flag: ValuationFlag,
}

fn ratio(price: f64, denominator: f64) -> Result<f64> {
    if !(price > 0.0 && price.is_finite()) {
        return Err(FundamentalsError::InvalidPrice(price));
    }
    if denominator.is_nan() || denominator <= 0.0 {
        return Err(FundamentalsError::UndefinedRatio(denominator));
    }
    Ok(price / denominator)
}

/// Price over earnings per share. Loss-making or zero-earnings firms have no
/// meaningful P/E.
pub fn pe_ratio(price: f64, eps: f64) -> Result<f64> {
    ratio(price, eps)
}

pub fn ps_ratio(price: f64, sales_per_share: f64) -> Result<f64> {
    ratio(price, sales_per_share)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Compares each stock's P/S with the median P/S of its sector peers.
///
/// A lower P/S than `median * (1 - band)` is undervalued, higher than
/// `median * (1 + band)` overvalued. Stocks without a defined P/S, and
/// sectors with fewer than two defined P/S values, are indeterminate.
/// Results keep the input order.
pub fn relative_valuation(records: &[FundamentalsRecord], band: f64) -> Vec<ValuationResult> {
    let ratios: Vec<(Option<f64>, Option<f64>)> = records
        .iter()
        .map(|r| {
            (
                pe_ratio(r.price, r.eps).ok(),
                ps_ratio(r.price, r.sales_per_share).ok(),
            )
        })
        .collect();

    let mut by_sector: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (record, (_, ps)) in records.iter().zip(&ratios) {
        let entry = by_sector.entry(record.sector.as_str()).or_default();
        if let Some(ps) = ps {
            entry.push(*ps);
        }
    }
    let medians: BTreeMap<&str, Option<f64>> = by_sector
        .into_iter()
        .map(|(sector, mut values)| {
            values.sort_by(f64::total_cmp);
            let m = (values.len() >= 2).then(|| median(&values));
            (sector, m)
        })
        .collect();

    records
        .iter()
        .zip(ratios)
        .map(|(record, (pe, ps))| {
            let flag = match (ps, medians[record.sector.as_str()]) {
                (Some(ps), Some(m)) if ps < m * (1.0 - band) => ValuationFlag::Undervalued,
                (Some(ps), Some(m)) if ps > m * (1.0 + band) => ValuationFlag::Overvalued,
                (Some(_), Some(_)) => ValuationFlag::Inline,
                _ => ValuationFlag::Indeterminate,
            };
            ValuationResult {
                symbol: record.symbol.clone(),
                pe,
                ps,
                flag,
            }
        })
        .collect()
}

/// Reads `symbol,price,eps,sales_per_share,sector` rows.
pub fn load_fundamentals_csv(path: impl AsRef<Path>) -> Result<Vec<FundamentalsRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let record: FundamentalsRecord = row?;
        if record.price.is_nan() || record.price <= 0.0 {
            return Err(FundamentalsError::InvalidRecord {
                symbol: record.symbol,
                message: format!("price must be positive, got {}", record.price),
            });
        }
        if record.sales_per_share < 0.0 {
            return Err(FundamentalsError::InvalidRecord {
                symbol: record.symbol,
                message: format!(
                    "sales per share must be non-negative, got {}",
                    record.sales_per_share
                ),
            });
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(symbol: &str, price: f64, eps: f64, sps: f64, sector: &str) -> FundamentalsRecord {
        FundamentalsRecord {
            symbol: symbol.into(),
            price,
            eps,
            sales_per_share: sps,
            sector: sector.into(),
        }
    }

    #[test]
    fn ratios() {
        assert_eq!(pe_ratio(100.0, 4.0).unwrap(), 25.0);
        assert!(matches!(
            pe_ratio(100.0, 0.0),
            Err(FundamentalsError::UndefinedRatio(_))
        ));
        assert!(matches!(
            pe_ratio(100.0, -2.0),
            Err(FundamentalsError::UndefinedRatio(_))
        ));
        assert_eq!(ps_ratio(30.0, 20.0).unwrap(), 1.5);
        assert_eq!(ps_ratio(10.0, 10.0).unwrap(), 1.0);
        assert!(matches!(
            ps_ratio(10.0, 0.0),
            Err(FundamentalsError::UndefinedRatio(_))
        ));
        assert!(matches!(
            ps_ratio(0.0, 1.0),
            Err(FundamentalsError::InvalidPrice(_))
        ));
    }

    #[test]
    fn equal_peers_are_inline() {
        let records = vec![
            rec("A", 10.0, 1.0, 10.0, "tech"),
            rec("B", 20.0, 1.0, 20.0, "tech"),
            rec("C", 5.0, 1.0, 5.0, "tech"),
        ];
        let out = relative_valuation(&records, DEFAULT_BAND);
        assert!(out.iter().all(|r| r.flag == ValuationFlag::Inline));
    }

    #[test]
    fn lower_price_to_sales_is_cheaper() {
        // Y trades at 1.5 times X's P/S.
        let records = vec![
            rec("X", 10.0, 1.0, 10.0, "energy"),
            rec("Y", 15.0, 1.0, 10.0, "energy"),
        ];
        let out = relative_valuation(&records, 0.1);
        assert_eq!(out[0].flag, ValuationFlag::Undervalued);
        assert_eq!(out[1].flag, ValuationFlag::Overvalued);
        // A wider band swallows the spread.
        let out = relative_valuation(&records, 0.25);
        assert!(out.iter().all(|r| r.flag == ValuationFlag::Inline));
    }

    #[test]
    fn singletons_and_undefined() {
        let records = vec![
            rec("S", 10.0, 1.0, 5.0, "solo"),
            rec("L1", 10.0, -1.0, 0.0, "loss"),
            rec("L2", 10.0, 0.0, 0.0, "loss"),
            rec("M1", 10.0, -1.0, 0.0, "mixed"),
            rec("M2", 10.0, 1.0, 5.0, "mixed"),
            rec("M3", 10.0, 1.0, 6.0, "mixed"),
        ];
        let out = relative_valuation(&records, DEFAULT_BAND);
        assert_eq!(out[0].flag, ValuationFlag::Indeterminate);
        assert_eq!(out[0].pe, Some(10.0));
        assert_eq!(out[1].flag, ValuationFlag::Indeterminate);
        assert_eq!(out[2].flag, ValuationFlag::Indeterminate);
        assert_eq!((out[1].pe, out[1].ps), (None, None));
        assert_eq!(out[3].flag, ValuationFlag::Indeterminate);
        assert_eq!(out[4].flag, ValuationFlag::Inline);
    }

    #[test]
    fn loads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(
            &path,
            "symbol,price,eps,sales_per_share,sector\nA,10,1,5,tech\nB,12,-1,4,tech\n",
        )
        .unwrap();
        let records = load_fundamentals_csv(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].eps, -1.0);
        std::fs::write(
            &path,
            "symbol,price,eps,sales_per_share,sector\nA,0,1,5,tech\n",
        )
        .unwrap();
        assert!(load_fundamentals_csv(&path).is_err());
    }

    proptest! {
        #[test]
        fn ratios_are_scale_invariant(price in 0.1f64..1e4, denom in 0.01f64..1e3, k in 0.01f64..100.0) {
            let a = ps_ratio(price, denom).unwrap();
            let b = ps_ratio(price * k, denom * k).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
            let a = pe_ratio(price, denom).unwrap();
            let b = pe_ratio(price * k, denom * k).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }

        #[test]
        fn flags_invariant_under_sector_price_scaling(
            sales in proptest::collection::vec(0.5f64..50.0, 2..8),
            k in prop_oneof![Just(2.0f64), Just(0.5), Just(4.0)],
        ) {
            // Power-of-two factors keep the scaled ratios exact.
            let records: Vec<_> = sales.iter().enumerate()
                .map(|(i, s)| rec(&format!("S{i}"), 10.0 + i as f64, 1.0, *s, "tech"))
                .collect();
            let scaled: Vec<_> = records.iter().cloned().map(|mut r| { r.price *= k; r }).collect();
            let a: Vec<_> = relative_valuation(&records, DEFAULT_BAND).into_iter().map(|r| r.flag).collect();
            let b: Vec<_> = relative_valuation(&scaled, DEFAULT_BAND).into_iter().map(|r| r.flag).collect();
            prop_assert_eq!(a, b);
        }
    }
}
