//! Running corpus cases and scoring them against the ground truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::corpus::Case;
use super::metrics::EvalOutcome;
use crate::dom::NodePath;
use crate::engine::{execute_wrapper_with, ExecuteOptions, ExecutionContext, FixedClock, Status};
use crate::par;
use crate::treematch::Algorithm;
use crate::wrapper::{Rule, Wrapper};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Forces every rule onto one matching algorithm.
    pub algorithm: Option<Algorithm>,
    pub adapt: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            algorithm: None,
            adapt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub scenario: String,
    pub case: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub status: Status,
    pub adaptations: usize,
    pub failed_adaptations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub algorithm: Option<Algorithm>,
    pub adapt: bool,
    pub scenarios: Vec<EvalOutcome>,
    pub total: EvalOutcome,
    pub cases: Vec<CaseResult>,
}

fn force_algorithm(rules: &mut [Rule], algorithm: Algorithm) {
    for rule in rules {
        if let Some(cfg) = rule.adaptation.as_mut() {
            cfg.algorithm = algorithm;
            cfg.algorithm_order.clear();
        }
        force_algorithm(&mut rule.children, algorithm);
    }
}

pub fn configured_wrapper(wrapper: &Wrapper, config: &EvalConfig) -> Wrapper {
    let mut w = wrapper.clone();
    if let Some(alg) = config.algorithm {
        force_algorithm(&mut w.rules, alg);
    }
    w
}

/// Expected nodes per rule on the mutated page; deleted nodes are dropped.
pub fn expected_on_mutated(case: &Case) -> BTreeMap<String, BTreeSet<NodePath>> {
    case.truth
        .expected
        .iter()
        .map(|(rule, paths)| {
            let mapped = paths
                .iter()
                .filter_map(|p| case.truth.mapping.get(p).and_then(|m| m.path()).cloned())
                .collect();
            (rule.clone(), mapped)
        })
        .collect()
}

/// Counts per expected node: a returned node is a tp when it is the mapped
/// position of an expected node of the same rule.
pub fn evaluate_case(case: &Case, config: &EvalConfig) -> CaseResult {
    let wrapper = configured_wrapper(&case.wrapper, config);
    let ctx = ExecutionContext::single(case.mutated.clone()).with_clock(FixedClock(
        case.wrapper
            .rules
            .first()
            .and_then(|r| r.stored_example.as_ref())
            .map(|s| s.captured_at)
            .unwrap_or_default(),
    ));
    let exec = execute_wrapper_with(&wrapper, &ctx, ExecuteOptions { adapt: config.adapt })
        .expect("single-page context is valid");
    let expected = expected_on_mutated(case);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (rule, want) in &expected {
        let got: BTreeSet<NodePath> = exec.find(rule).iter().flat_map(|r| r.paths()).collect();
        tp += got.intersection(want).count() as u64;
        fp += got.difference(want).count() as u64;
        fn_ += want.difference(&got).count() as u64;
    }
    CaseResult {
        scenario: case.scenario.clone(),
        case: case.name.clone(),
        tp,
        fp,
        fn_,
        status: exec.status(),
        adaptations: exec.reports.iter().filter(|r| r.repaired).count(),
        failed_adaptations: exec.reports.iter().filter(|r| !r.repaired).count(),
    }
}

/// Cases run independently (in parallel with the `parallel` feature);
/// aggregation follows corpus order.
pub fn evaluate_corpus(cases: &[Case], config: &EvalConfig) -> EvalReport {
    let results = par::map(cases, |c| evaluate_case(c, config));
    aggregate(results, config)
}

pub fn evaluate_corpus_sequential(cases: &[Case], config: &EvalConfig) -> EvalReport {
    let results = par::map_sequential(cases, |c| evaluate_case(c, config));
    aggregate(results, config)
}

fn aggregate(results: Vec<CaseResult>, config: &EvalConfig) -> EvalReport {
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    for r in &results {
        if !sums.contains_key(&r.scenario) {
            order.push(r.scenario.clone());
        }
        let e = sums.entry(r.scenario.clone()).or_default();
        e.0 += r.tp;
        e.1 += r.fp;
        e.2 += r.fn_;
    }
    let scenarios: Vec<EvalOutcome> = order
        .iter()
        .map(|s| {
            let (tp, fp, fn_) = sums[s];
            EvalOutcome::new(s.clone(), tp, fp, fn_)
        })
        .collect();
    let total = EvalOutcome::total("total", &scenarios);
    EvalReport {
        algorithm: config.algorithm,
        adapt: config.adapt,
        scenarios,
        total,
        cases: results,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}%"))
}

/// Plain-text table: one row per scenario plus totals.
pub fn format_table(report: &EvalReport) -> String {
    format_tables(&[("", report)])
}

/// Several reports side by side, sharing the scenario column.
pub fn format_tables(reports: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let cols = format!(" | {:>5} {:>5} {:>5} {:>8} {:>8} {:>8}", "tp", "fp", "fn", "P", "R", "F");
    let rule = "-".repeat(18 + cols.len() * reports.len());
    if reports.iter().any(|(t, _)| !t.is_empty()) {
        let mut header = " ".repeat(18);
        for (title, _) in reports {
            header.push_str(&format!(" | {:<w$}", title, w = cols.len() - 3));
        }
        out.push_str(header.trim_end());
        out.push('\n');
    }
    let mut cols_line = format!("{:<18}", "scenario");
    for _ in reports {
        cols_line.push_str(&cols);
    }
    out.push_str(&cols_line);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    let Some((_, first)) = reports.first() else {
        return out;
    };
    let row = |name: &str, pick: &dyn Fn(&EvalReport) -> Option<EvalOutcome>| {
        let mut line = format!("{name:<18}");
        for (_, r) in reports {
            match pick(r) {
                Some(o) => line.push_str(&format!(
                    " | {:>5} {:>5} {:>5} {:>8} {:>8} {:>8}",
                    o.tp,
                    o.fp,
                    o.fn_,
                    pct(o.precision),
                    pct(o.recall),
                    pct(o.f1)
                )),
                None => line.push_str(&format!(" | {:>44}", "-")),
            }
        }
        line.push('\n');
        line
    };
    for s in &first.scenarios {
        let name = s.scenario.clone();
        out.push_str(&row(&name, &|r: &EvalReport| {
            r.scenarios.iter().find(|o| o.scenario == name).cloned()
        }));
    }
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&row("total", &|r: &EvalReport| Some(r.total.clone())));
    out
}
