//! MinMax scaling, chronological splitting and sliding-window sample
//! construction.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PriceColumn, PriceSeries};
use crate::linalg::{Matrix, ShapeError};

/// Default share of rows used for training.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("feature count mismatch: scaler has {expected}, input has {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("series of {rows} rows is too short for window {window} + horizon {horizon}")]
    TooShort {
        rows: usize,
        window: usize,
        horizon: usize,
    },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("split of {rows} rows at fraction {fraction} leaves an empty side")]
    EmptySplit { rows: usize, fraction: f64 },
    #[error("window and horizon must both be at least 1")]
    ZeroLength,
    #[error("{0} dates for {1} rows")]
    DateCount(usize, usize),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Per-day feature rows. Column 0 is always the modeled price.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dates: Vec<NaiveDate>,
    values: Matrix,
}

impl FeatureMatrix {
    pub fn new(dates: Vec<NaiveDate>, values: Matrix) -> Result<Self> {
        if dates.len() != values.rows() {
            return Err(PreprocessError::DateCount(dates.len(), values.rows()));
        }
        if values.cols() == 0 {
            return Err(PreprocessError::FeatureMismatch {
                expected: 1,
                found: 0,
            });
        }
        Ok(Self { dates, values })
    }

    /// Single-column matrix of the chosen price column.
    pub fn from_series(series: &PriceSeries, column: PriceColumn) -> Self {
        let prices = series.column(column);
        let values = Matrix::from_fn(prices.len(), 1, |r, _| prices[r]);
        Self {
            dates: series.dates(),
            values,
        }
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn features(&self) -> usize {
        self.values.cols()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.values.column(0)
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let values = Matrix::from_fn(end - start, self.features(), |r, c| {
            self.values.get(start + r, c)
        });
        Self {
            dates: self.dates[start..end].to_vec(),
            values,
        }
    }

    /// The first `n` feature columns.
    pub fn leading_columns(&self, n: usize) -> Result<Self> {
        let values = self.values.slice_cols(0, n)?;
        Self::new(self.dates.clone(), values)
    }

    /// Stacks `other` below `self`. Feature counts must agree.
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        if self.features() != other.features() {
            return Err(PreprocessError::FeatureMismatch {
                expected: self.features(),
                found: other.features(),
            });
        }
        let mut data = self.values.as_slice().to_vec();
        data.extend_from_slice(other.values.as_slice());
        let mut dates = self.dates.clone();
        dates.extend_from_slice(&other.dates);
        let values = Matrix::from_vec(dates.len(), self.features(), data)?;
        Ok(Self { dates, values })
    }
}

/// Column-wise min/max fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerState {
    pub fn features(&self) -> usize {
        self.min.len()
    }

    fn check(&self, x: &FeatureMatrix) -> Result<()> {
        if x.features() != self.features() {
            return Err(PreprocessError::FeatureMismatch {
                expected: self.features(),
                found: x.features(),
            });
        }
        Ok(())
    }

    fn span(&self, col: usize) -> Option<f64> {
        let span = self.max[col] - self.min[col];
        (span > 0.0).then_some(span)
    }

    pub fn scale_value(&self, col: usize, v: f64) -> f64 {
        match self.span(col) {
            Some(span) => (v - self.min[col]) / span,
            None => 0.0,
        }
    }

    pub fn unscale_value(&self, col: usize, v: f64) -> f64 {
        match self.span(col) {
            Some(span) => v * span + self.min[col],
            None => self.min[col],
        }
    }

    /// Maps scaled values of `col` back to original units, entry by entry.
    pub fn unscale_matrix(&self, col: usize, m: &Matrix) -> Matrix {
        m.map(|v| self.unscale_value(col, v))
    }

    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(x)?;
        let values = Matrix::from_fn(x.rows(), x.features(), |r, c| {
            self.scale_value(c, x.values.get(r, c))
        });
        Ok(FeatureMatrix {
            dates: x.dates.clone(),
            values,
        })
    }

    pub fn inverse_transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(x)?;
        let values = Matrix::from_fn(x.rows(), x.features(), |r, c| {
            self.unscale_value(c, x.values.get(r, c))
        });
        Ok(FeatureMatrix {
            dates: x.dates.clone(),
            values,
        })
    }
}

pub fn fit_minmax(train: &FeatureMatrix) -> Result<ScalerState> {
    if train.rows() < 2 {
        return Err(PreprocessError::TooFewRows {
            needed: 2,
            found: train.rows(),
        });
    }
    let (min, max) = (0..train.features())
        .map(|c| {
            train
                .values
                .column(c)
                .into_iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        })
        .unzip();
    Ok(ScalerState { min, max })
}

/// Chronological split at `floor(rows * fraction)`.
pub fn split_train_test(
    x: &FeatureMatrix,
    train_fraction: f64,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PreprocessError::BadFraction(train_fraction));
    }
    let cut = (x.rows() as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == x.rows() {
        return Err(PreprocessError::EmptySplit {
            rows: x.rows(),
            fraction: train_fraction,
        });
    }
    Ok((x.slice_rows(0, cut), x.slice_rows(cut, x.rows())))
}

/// Supervised samples cut from a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// One `window × features` matrix per sample.
    pub inputs: Vec<Matrix>,
    /// One `horizon × 1` matrix of scaled closes per sample.
    pub targets: Vec<Matrix>,
    pub window: usize,
    pub horizon: usize,
    /// Date of each sample's first target.
    pub target_dates: Vec<NaiveDate>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::cols)
    }

    /// Targets stacked as an `N × horizon` matrix.
    pub fn target_matrix(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.horizon, |r, c| self.targets[r].get(c, 0))
    }

    /// Subset of samples in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            window: self.window,
            horizon: self.horizon,
            target_dates: indices.iter().map(|&i| self.target_dates[i]).collect(),
        }
    }
}

/// Sample `i` reads rows `[i, i+window)` and targets the closes at rows
/// `[i+window, i+window+horizon)`.
pub fn make_windows(x: &FeatureMatrix, window: usize, horizon: usize) -> Result<WindowedDataset> {
    if window == 0 || horizon == 0 {
        return Err(PreprocessError::ZeroLength);
    }
    let rows = x.rows();
    if rows < window + horizon {
        return Err(PreprocessError::TooShort {
            rows,
            window,
            horizon,
        });
    }
    let count = rows - window - horizon + 1;
    let f = x.features();
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut target_dates = Vec::with_capacity(count);
    for i in 0..count {
        inputs.push(Matrix::from_fn(window, f, |r, c| x.values.get(i + r, c)));
        targets.push(Matrix::from_fn(horizon, 1, |r, _| {
            x.values.get(i + window + r, 0)
        }));
        target_dates.push(x.dates[i + window]);
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        window,
        horizon,
        target_dates,
    })
}

/// Windows whose targets all fall inside `test`, using the tail of `train`
/// as look-back context for the earliest test targets.
pub fn make_test_windows(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    window: usize,
    horizon: usize,
) -> Result<WindowedDataset> {
    let context = window.min(train.rows());
    let joined = train
        .slice_rows(train.rows() - context, train.rows())
        .concat_rows(test)?;
    make_windows(&joined, window, horizon)
}
