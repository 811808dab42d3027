//! Precision, recall and F-measure over tp/fp/fn counts.

use serde::{Deserialize, Serialize};

/// Unrounded ratios in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawRatios {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
}

/// Percentages rounded half-up to two decimals; `None` where a denominator
/// is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    pub raw: RawRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub scenario: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    pub raw: RawRatios,
}

impl EvalOutcome {
    pub fn new(scenario: impl Into<String>, tp: u64, fp: u64, fn_: u64) -> Self {
        let m = compute_metrics(tp, fp, fn_);
        EvalOutcome {
            scenario: scenario.into(),
            tp,
            fp,
            fn_,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            raw: m.raw,
        }
    }

    /// Sum of the counts, metrics recomputed.
    pub fn total<'a>(name: impl Into<String>, parts: impl IntoIterator<Item = &'a EvalOutcome>) -> Self {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for p in parts {
            tp += p.tp;
            fp += p.fp;
            fn_ += p.fn_;
        }
        EvalOutcome::new(name, tp, fp, fn_)
    }
}

/// `num / den` as a percentage, rounded half-up at the second decimal using
/// integer arithmetic so ties are exact.
pub fn percent_half_up(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        return None;
    }
    let (num, den) = (num as u128, den as u128);
    let hundredths = (2 * num * 10_000 + den) / (2 * den);
    Some(hundredths as f64 / 100.0)
}

pub fn compute_metrics(tp: u64, fp: u64, fn_: u64) -> Metrics {
    let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn) whenever P and R exist and P+R > 0.
    let f1_defined = precision.is_some() && recall.is_some() && tp > 0;
    let raw = RawRatios {
        precision,
        recall,
        f1: f1_defined.then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
    };
    Metrics {
        precision: percent_half_up(tp, tp + fp),
        recall: percent_half_up(tp, tp + fn_),
        f1: if f1_defined {
            percent_half_up(2 * tp, 2 * tp + fp + fn_)
        } else {
            None
        },
        raw,
    }
}
