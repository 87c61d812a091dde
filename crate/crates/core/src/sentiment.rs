//! Lexicon scoring of news headlines and fusion of a daily sentiment column
//! into the feature matrix.
//!
//! Lexicon files are `word,weight` CSV lines (an optional `word,weight`
//! header is allowed) followed by a `#negations` marker and one negation token
//! per line. Other lines starting with `#` are comments.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

use crate::data::NewsItem;
use crate::linalg::{Matrix, ShapeError};
use crate::preprocess::FeatureMatrix;

/// Lexicon shipped with the crate.
pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.csv");

/// Carry-over factor for days without news.
pub const DEFAULT_DECAY: f64 = 0.5;

/// How many tokens before a lexicon hit are searched for a negation.
const NEGATION_REACH: usize = 2;

#[derive(Debug, Error)]
pub enum SentimentError {
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no sentiment score for {0}")]
    DateNotCovered(NaiveDate),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    weights: HashMap<String, f64>,
    negations: HashSet<String>,
}

impl Lexicon {
    /// Keys are lowercased. Weights must be non-zero and inside [-1, 1].
    pub fn new(
        weights: impl IntoIterator<Item = (String, f64)>,
        negations: impl IntoIterator<Item = String>,
    ) -> Result<Self, SentimentError> {
        let mut map = HashMap::new();
        for (idx, (word, weight)) in weights.into_iter().enumerate() {
            validate_weight(&word, weight).map_err(|message| SentimentError::Lexicon {
                line: idx + 1,
                message,
            })?;
            map.insert(word.to_lowercase(), weight);
        }
        Ok(Self {
            weights: map,
            negations: negations.into_iter().map(|w| w.to_lowercase()).collect(),
        })
    }

    pub fn parse(text: &str) -> Result<Self, SentimentError> {
        let mut weights = HashMap::new();
        let mut negations = HashSet::new();
        let mut in_negations = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.eq_ignore_ascii_case("#negations") {
                in_negations = true;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if in_negations {
                negations.insert(line.to_lowercase());
                continue;
            }
            if line.eq_ignore_ascii_case("word,weight") {
                continue;
            }
            let bad = |message: String| SentimentError::Lexicon {
                line: line_no,
                message,
            };
            let (word, weight) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected `word,weight`, found `{line}`")))?;
            let word = word.trim();
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| bad(format!("cannot parse weight `{}`", weight.trim())))?;
            validate_weight(word, weight).map_err(bad)?;
            weights.insert(word.to_lowercase(), weight);
        }
        Ok(Self { weights, negations })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SentimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SentimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn weight(&self, word: &str) -> Option<f64> {
        self.weights.get(&word.to_lowercase()).copied()
    }

    pub fn is_negation(&self, word: &str) -> bool {
        self.negations.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Same lexicon with every weight negated.
    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|(w, v)| (w.clone(), -v)).collect(),
            negations: self.negations.clone(),
        }
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

fn validate_weight(word: &str, weight: f64) -> Result<(), String> {
    if word.is_empty() {
        return Err("empty word".into());
    }
    if !weight.is_finite() || weight == 0.0 || !(-1.0..=1.0).contains(&weight) {
        return Err(format!(
            "weight for `{word}` must be non-zero and in [-1, 1], got {weight}"
        ));
    }
    Ok(())
}

/// Score in [-1, 1]: mean weight of matched tokens, with a weight's sign
/// flipped when a negation token occurs within the two preceding tokens.
pub fn score_text(text: &str, lex: &Lexicon) -> f64 {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut sum = 0.0;
    let mut matched = 0usize;
    for (i, token) in tokens.iter().enumerate() {
        let Some(weight) = lex.weights.get(token) else {
            continue;
        };
        let negated = tokens[i.saturating_sub(NEGATION_REACH)..i]
            .iter()
            .any(|t| lex.negations.contains(t));
        sum += if negated { -weight } else { *weight };
        matched += 1;
    }
    (sum / matched.max(1) as f64).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentimentSeries {
    pub dates: Vec<NaiveDate>,
    pub scores: Vec<f64>,
}

impl SentimentSeries {
    pub fn score_on(&self, date: NaiveDate) -> Option<f64> {
        self.dates
            .binary_search(&date)
            .ok()
            .map(|idx| self.scores[idx])
    }
}

/// One score per calendar date.
///
/// A headline is credited to the first calendar date on or after its own date
/// (weekend news lands on the next session); items after the last calendar
/// date are ignored. Dates with news take the mean of their item scores;
/// dates without news carry the previous score multiplied by `decay`,
/// starting from 0.
pub fn daily_sentiment(
    items: &[NewsItem],
    calendar: &[NaiveDate],
    lex: &Lexicon,
    decay: f64,
) -> SentimentSeries {
    let mut sums = vec![0.0; calendar.len()];
    let mut counts = vec![0usize; calendar.len()];
    for item in items {
        let idx = calendar.partition_point(|d| *d < item.date);
        if idx < calendar.len() {
            sums[idx] += score_text(&item.text, lex);
            counts[idx] += 1;
        }
    }
    let mut scores = Vec::with_capacity(calendar.len());
    let mut prev = 0.0;
    for (sum, count) in sums.into_iter().zip(counts) {
        let score = if count > 0 {
            sum / count as f64
        } else {
            prev * decay
        };
        scores.push(score);
        prev = score;
    }
    SentimentSeries {
        dates: calendar.to_vec(),
        scores,
    }
}

/// Appends the sentiment score aligned by date as a new last column.
pub fn merge_features(
    prices: &FeatureMatrix,
    s: &SentimentSeries,
) -> Result<FeatureMatrix, SentimentError> {
    let mut column = Vec::with_capacity(prices.rows());
    for &date in prices.dates() {
        column.push(
            s.score_on(date)
                .ok_or(SentimentError::DateNotCovered(date))?,
        );
    }
    let extra = Matrix::from_vec(column.len(), 1, column)?;
    let values = prices.values().concat_cols(&extra)?;
    FeatureMatrix::new(prices.dates().to_vec(), values).map_err(|e| match e {
        crate::preprocess::PreprocessError::Shape(s) => SentimentError::Shape(s),
        other => unreachable!("dates already aligned: {other}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(words: &[(&str, f64)]) -> Lexicon {
        Lexicon::new(
            words.iter().map(|(w, v)| (w.to_string(), *v)),
            ["not".to_string(), "no".to_string()],
        )
        .unwrap()
    }

    fn day(offset: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 3, 1).unwrap() + chrono::Days::new(offset)
    }

    fn item(offset: u64, text: &str) -> NewsItem {
        NewsItem {
            date: day(offset),
            symbol: "ABC".into(),
            text: text.into(),
        }
    }

    #[test]
    fn scoring_rules() {
        let l = lex(&[("good", 0.8), ("great", 1.0), ("bad", -0.6)]);
        assert_eq!(score_text("", &l), 0.0);
        assert_eq!(score_text("great", &l), 1.0);
        assert_eq!(score_text("GREAT!", &l), 1.0);
        assert!((score_text("not good", &l) - (-0.8)).abs() < 1e-15);
        // negation reaches two tokens back, not three
        assert!((score_text("not very good", &l) + 0.8).abs() < 1e-15);
        assert!((score_text("not so very good", &l) - 0.8).abs() < 1e-15);
        assert!((score_text("good but bad", &l) - 0.1).abs() < 1e-12);
        assert_eq!(score_text("nothing matches here", &l), 0.0);
    }

    #[test]
    fn lexicon_file_format() {
        let l =
            Lexicon::parse("word,weight\nUp,0.5\n# comment\ndown,-0.5\n#negations\nnot\n").unwrap();
        assert_eq!(l.weight("up"), Some(0.5));
        assert_eq!(l.weight("DOWN"), Some(-0.5));
        assert!(l.is_negation("NOT"));
        assert!(matches!(
            Lexicon::parse("a,0\n"),
            Err(SentimentError::Lexicon { line: 1, .. })
        ));
        assert!(matches!(
            Lexicon::parse("a,0.1\nb,1.5\n"),
            Err(SentimentError::Lexicon { line: 2, .. })
        ));
        assert!(Lexicon::parse("a;0.1\n").is_err());
    }

    #[test]
    fn default_lexicon_loads() {
        let l = Lexicon::default();
        assert!(l.len() >= 200);
        assert!(l.is_negation("not"));
        assert!(score_text("Shares surge after record profit", &l) > 0.0);
        assert!(score_text("Profit warning sends stock into a slump", &l) < 0.0);
    }

    #[test]
    fn decay_chain() {
        let l = lex(&[("up", 0.6)]);
        let calendar: Vec<_> = (0..4).map(day).collect();
        let s = daily_sentiment(&[item(1, "up")], &calendar, &l, 0.5);
        assert_eq!(s.scores, vec![0.0, 0.6, 0.3, 0.15]);
    }

    #[test]
    fn no_news_and_symmetric_news() {
        let l = lex(&[("up", 1.0), ("down", -1.0)]);
        let calendar: Vec<_> = (0..3).map(day).collect();
        assert_eq!(
            daily_sentiment(&[], &calendar, &l, 0.5).scores,
            vec![0.0; 3]
        );
        let s = daily_sentiment(&[item(0, "up"), item(0, "down")], &calendar, &l, 0.5);
        assert_eq!(s.scores[0], 0.0);
    }

    #[test]
    fn weekend_news_rolls_forward() {
        let l = lex(&[("up", 1.0)]);
        let calendar = vec![day(0), day(3)];
        let s = daily_sentiment(&[item(1, "up"), item(9, "up")], &calendar, &l, 0.5);
        assert_eq!(s.scores, vec![0.0, 1.0]);
    }

    #[test]
    fn merge_appends_column() {
        let dates: Vec<_> = (0..3).map(day).collect();
        let prices = FeatureMatrix::new(
            dates.clone(),
            Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap(),
        )
        .unwrap();
        let zero = SentimentSeries {
            dates: dates.clone(),
            scores: vec![0.0; 3],
        };
        let merged = merge_features(&prices, &zero).unwrap();
        assert_eq!(merged.features(), 2);
        assert_eq!(merged.values().column(1), vec![0.0; 3]);
        assert_eq!(merged.values().column(0), prices.values().column(0));

        let shifted = SentimentSeries {
            dates: (0..5).map(day).collect(),
            scores: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        };
        let merged = merge_features(&prices, &shifted).unwrap();
        assert_eq!(merged.values().column(1), vec![0.1, 0.2, 0.3]);

        let short = SentimentSeries {
            dates: vec![day(0)],
            scores: vec![0.0],
        };
        assert!(matches!(
            merge_features(&prices, &short),
            Err(SentimentError::DateNotCovered(_))
        ));
    }

    proptest! {
        #[test]
        fn antisymmetric_under_weight_negation(words in proptest::collection::vec("(good|bad|not|up|down|flat|no)", 0..12)) {
            let l = lex(&[("good", 0.8), ("bad", -0.3), ("up", 0.25), ("down", -1.0)]);
            let text = words.join(" ");
            let a = score_text(&text, &l);
            let b = score_text(&text, &l.negated());
            prop_assert!((a + b).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn daily_scores_bounded(texts in proptest::collection::vec(("[a-z ]{0,30}", 0u64..10), 0..20), decay in 0.0f64..1.0) {
            let l = Lexicon::default();
            let items: Vec<_> = texts.iter().map(|(t, d)| item(*d, t)).collect();
            let calendar: Vec<_> = (0..10).map(day).collect();
            let s = daily_sentiment(&items, &calendar, &l, decay);
            prop_assert!(s.scores.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn merge_preserves_existing_columns(values in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let dates: Vec<_> = (0..values.len() as u64).map(day).collect();
            let prices = FeatureMatrix::new(dates.clone(), Matrix::from_vec(values.len(), 1, values.clone()).unwrap()).unwrap();
            let s = SentimentSeries { dates, scores: vec![0.25; values.len()] };
            let merged = merge_features(&prices, &s).unwrap();
            let col0 = merged.values().column(0);
            prop_assert!(col0.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
