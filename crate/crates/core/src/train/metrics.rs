//! Regression and sign-thresholded classification metrics.
//!
//! Two binary conventions are reported side by side:
//!
//! * `nonneg`: every example is kept and a value is positive when `>= 0`, so
//!   zero labels fall in the non-negative class.
//! * `excl_zero`: examples whose label is exactly 0 are dropped and a value is
//!   positive when `> 0`.
//!
//! In both, the same threshold is applied to predictions and labels.
//! Undefined quantities (no nonzero labels, zero variance for Pearson) are
//! `None` and serialize as the string `"undefined"`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// Per-class F1 weighted by true-class support.
    #[default]
    Weighted,
    /// F1 of the positive class only.
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub ba_nonneg: f64,
    #[serde(with = "maybe")]
    pub ba_excl_zero: Option<f64>,
    pub f1_nonneg: f64,
    #[serde(with = "maybe")]
    pub f1_excl_zero: Option<f64>,
    pub mae: f64,
    #[serde(with = "maybe")]
    pub corr: Option<f64>,
}

pub const UNDEFINED: &str = "undefined";

/// Render an optional metric the way reports and TSV files show it.
pub fn format_metric(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.6}"),
        None => UNDEFINED.to_string(),
    }
}

mod maybe {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Marker(String),
    }

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(v) => Repr::Value(*v).serialize(s),
            None => Repr::Marker(super::UNDEFINED.into()).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(Some(v)),
            Repr::Marker(m) if m == super::UNDEFINED => Ok(None),
            Repr::Marker(m) => Err(D::Error::custom(format!("unexpected metric marker `{m}`"))),
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Confusion {
    fn from_classes(pairs: impl Iterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    fn f1_score(&self, avg: F1Average) -> f64 {
        let pos = Self::f1(self.tp, self.fp, self.fn_);
        match avg {
            F1Average::Positive => pos,
            F1Average::Weighted => {
                let neg = Self::f1(self.tn, self.fn_, self.fp);
                let n_pos = (self.tp + self.fn_) as f64;
                let n_neg = (self.tn + self.fp) as f64;
                (n_pos * pos + n_neg * neg) / self.total() as f64
            }
        }
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn compute_metrics(preds: &[f64], labels: &[f64]) -> Result<MetricsReport> {
    compute_metrics_with(preds, labels, F1Average::Weighted)
}

pub fn compute_metrics_with(preds: &[f64], labels: &[f64], avg: F1Average) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::dim("compute_metrics", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Contract("compute_metrics needs at least one pair".into()));
    }
    if preds.iter().chain(labels).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("compute_metrics input".into()));
    }
    let nonneg = Confusion::from_classes(preds.iter().zip(labels).map(|(p, l)| (*p >= 0.0, *l >= 0.0)));
    let excl = Confusion::from_classes(
        preds
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l != 0.0)
            .map(|(p, l)| (*p > 0.0, *l > 0.0)),
    );
    let has_excl = excl.total() > 0;
    let mae = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / preds.len() as f64;
    Ok(MetricsReport {
        n: preds.len(),
        ba_nonneg: nonneg.accuracy(),
        ba_excl_zero: has_excl.then(|| excl.accuracy()),
        f1_nonneg: nonneg.f1_score(avg),
        f1_excl_zero: has_excl.then(|| excl.f1_score(avg)),
        mae,
        corr: pearson(preds, labels),
    })
}
