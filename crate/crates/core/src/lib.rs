//! LSTM stock-price forecasting, benchmarking and portfolio advisory.

pub mod advisory;
pub mod data;
pub mod eval;
pub mod fundamentals;
pub mod linalg;
pub mod models;
pub mod preprocess;
pub mod sentiment;
pub mod train;
