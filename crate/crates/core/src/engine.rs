//! Wrapper execution over a bundle of pages, with constraint-triggered
//! adaptation and the top-down / bottom-up / process-flow cascade.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{DomNode, DomTree, NodePath};
use crate::template::{generalize, refine, template_match_within, TreeTemplate};
use crate::treematch::{best_matches_within, match_computation, similarity, Algorithm, Labeler, RankedCandidate};
use crate::wrapper::{
    extracted_text, validate_results, IntegrityConstraint, Rule, StoredExample, Threshold, Trigger, Wrapper,
};
use crate::xpath::{apply_plan, generate_plan_within, FallbackPlan, PlanOptions, Used};

/// Bound on chained cascade steps; together with the bundle size it also
/// caps adaptation attempts per rule at `MAX_CASCADE_DEPTH * pages`.
pub const MAX_CASCADE_DEPTH: usize = 3;

/// Candidates kept in a report.
const REPORTED_CANDIDATES: usize = 20;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("the page bundle is empty")]
    EmptyBundle,
    #[error("current page {current} is outside a bundle of {len}")]
    CurrentOutOfRange { current: usize, len: usize },
}

/// A snapshot bundle: the primary page first, then pages standing in for
/// other windows or the previous page.
#[derive(Clone)]
pub struct ExecutionContext {
    pub pages: Vec<DomTree>,
    pub current: usize,
    pub clock: Arc<dyn Clock>,
}

impl fmt::Debug for ExecutionContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecutionContext")
            .field("pages", &self.pages.iter().map(|p| &p.source_id).collect::<Vec<_>>())
            .field("current", &self.current)
            .finish()
    }
}

impl ExecutionContext {
    pub fn new(pages: Vec<DomTree>) -> Result<Self, EngineError> {
        if pages.is_empty() {
            return Err(EngineError::EmptyBundle);
        }
        Ok(ExecutionContext {
            pages,
            current: 0,
            clock: Arc::new(SystemClock),
        })
    }

    pub fn single(page: DomTree) -> Self {
        ExecutionContext {
            pages: vec![page],
            current: 0,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: impl Clock + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn with_current(mut self, current: usize) -> Result<Self, EngineError> {
        if current >= self.pages.len() {
            return Err(EngineError::CurrentOutOfRange {
                current,
                len: self.pages.len(),
            });
        }
        self.current = current;
        Ok(self)
    }

    pub fn page(&self) -> &DomTree {
        &self.pages[self.current]
    }

    fn check(&self) -> Result<(), EngineError> {
        if self.pages.is_empty() {
            Err(EngineError::EmptyBundle)
        } else if self.current >= self.pages.len() {
            Err(EngineError::CurrentOutOfRange {
                current: self.current,
                len: self.pages.len(),
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Adapted,
    Failed,
}

impl Status {
    pub fn worst(self, other: Status) -> Status {
        self.max(other)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::Adapted => "adapted",
            Status::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extracted {
    pub path: NodePath,
    pub text: String,
}

/// What one rule produced for one context node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub rule_name: String,
    /// Source id of the page the matches come from.
    pub page: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used: Option<Used>,
    pub matches: Vec<Extracted>,
    /// `children[i]` holds the child-rule results for `matches[i]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Vec<ExtractionResult>>,
    pub status: Status,
}

impl ExtractionResult {
    /// Worst status anywhere in this result tree.
    pub fn overall_status(&self) -> Status {
        self.children
            .iter()
            .flatten()
            .fold(self.status, |acc, c| acc.worst(c.overall_status()))
    }

    /// Every result for `rule_name` in this tree, in pre-order.
    pub fn collect<'a>(&'a self, rule_name: &str, out: &mut Vec<&'a ExtractionResult>) {
        if self.rule_name == rule_name {
            out.push(self);
        }
        for c in self.children.iter().flatten() {
            c.collect(rule_name, out);
        }
    }

    pub fn paths(&self) -> Vec<NodePath> {
        self.matches.iter().map(|m| m.path.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    ConstraintViolation,
    TopDown,
    BottomUp,
    ProcessFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateAction {
    Created,
    Refined,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub algorithm: Algorithm,
    pub threshold: Threshold,
    pub xpath_best: String,
    pub fallbacks: usize,
    pub stored_from: Option<String>,
}

impl ConfigSummary {
    fn of(rule: &Rule) -> Option<Self> {
        let cfg = rule.adaptation.as_ref()?;
        Some(ConfigSummary {
            algorithm: cfg.algorithm,
            threshold: cfg.threshold,
            xpath_best: rule.plan.best.to_string(),
            fallbacks: rule.plan.fallbacks.len(),
            stored_from: rule.stored_example.as_ref().map(|s| s.captured_from.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDelta {
    pub before: ConfigSummary,
    pub after: ConfigSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub rule_name: String,
    pub trigger: TriggerKind,
    pub page: String,
    pub repaired: bool,
    /// `None` when the tree template alone resolved the rule.
    pub algorithm: Option<Algorithm>,
    pub candidates: Vec<RankedCandidate>,
    pub chosen_threshold: Option<f64>,
    pub template_action: TemplateAction,
    pub config_delta: Option<ConfigDelta>,
    pub detail: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("adaptation of rule {rule:?} failed: {reason}")]
pub struct AdaptationFailed {
    pub rule: String,
    pub reason: String,
    pub candidates: Vec<RankedCandidate>,
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("no threshold in the allowed range satisfies the constraint")]
pub struct Unsatisfiable;

/// Distinct scores inside the allowed range plus its endpoints, descending.
fn candidate_thresholds(scores: &[f64], threshold: &Threshold) -> Vec<f64> {
    let mut ts: Vec<f64> = match threshold {
        Threshold::Constant(c) => vec![*c],
        Threshold::Interval { low, high } => {
            let mut v = vec![*low, *high];
            v.extend(scores.iter().copied().filter(|s| threshold.contains(*s)));
            v
        }
    };
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts
}

/// Highest allowed threshold whose admitted prefix (`scores >= t`) passes
/// `ok`, together with the admitted count. `scores` must be descending.
pub(crate) fn threshold_search_by(
    scores: &[f64],
    threshold: &Threshold,
    mut ok: impl FnMut(usize) -> bool,
) -> Result<(f64, usize), Unsatisfiable> {
    for t in candidate_thresholds(scores, threshold) {
        let k = scores.iter().take_while(|s| **s >= t).count();
        if ok(k) {
            return Ok((t, k));
        }
    }
    Err(Unsatisfiable)
}

/// Threshold search against a single cardinality constraint. Datatype
/// constraints say nothing about counts and always pass here.
pub fn threshold_search(
    scores: &[f64],
    constraint: &IntegrityConstraint,
    threshold: &Threshold,
) -> Result<(f64, usize), Unsatisfiable> {
    threshold_search_by(scores, threshold, |k| match constraint {
        IntegrityConstraint::Cardinality { min, max } => k >= *min && max.is_none_or(|m| k <= m),
        IntegrityConstraint::Datatype { .. } => true,
    })
}

/// A successful adaptation: the updated rule, its report, and the resolved
/// targets for each requested scope.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub rule: Rule,
    pub report: AdaptationReport,
    pub targets: Vec<Vec<NodePath>>,
}

struct AdaptRequest<'a> {
    constraints: &'a [IntegrityConstraint],
    page: &'a DomTree,
    /// One entry per context the rule failed in; the document root for
    /// top-level rules.
    scopes: &'a [NodePath],
    /// Contexts where the rule still works, with its current results there.
    settled: &'a [(NodePath, Vec<NodePath>)],
    nested: bool,
    trigger: TriggerKind,
    now: DateTime<Utc>,
    accept: &'a dyn Fn(&[NodePath]) -> bool,
}

/// Repairs a top-level rule against the current page of `ctx`.
pub fn adapt_rule(rule: &Rule, ctx: &ExecutionContext) -> Result<Adaptation, AdaptationFailed> {
    adapt_rule_in(
        rule,
        &AdaptRequest {
            constraints: &rule.constraints,
            page: ctx.page(),
            scopes: &[NodePath::root()],
            settled: &[],
            nested: false,
            trigger: TriggerKind::ConstraintViolation,
            now: ctx.clock.now(),
            accept: &|_| true,
        },
    )
}

/// Follows the stored target's residual path into `candidate`, mapping each
/// step through the child alignment of the two trees. A step whose stored
/// child has no partner continues with the most similar same-label node one
/// or two levels down among the unaligned children.
pub fn resolve_target(
    stored: &StoredExample,
    page: &DomTree,
    candidate: &NodePath,
    labeler: &Labeler,
    algorithm: Algorithm,
) -> Option<NodePath> {
    let mut s: &DomNode = &stored.subtree;
    let mut c: &DomNode = page.get(candidate)?;
    let mut path = candidate.clone();
    for &i in stored.residual_path.steps() {
        let pairs = match_computation(s, c, labeler, algorithm).alignment();
        let want = &s.children[i];
        let rel = match pairs.iter().find(|(a, _)| *a == i) {
            Some(&(_, j)) => NodePath(vec![j]),
            None => {
                let taken: HashSet<usize> = pairs.iter().map(|&(_, j)| j).collect();
                unaligned_partner(want, c, &taken, labeler, algorithm)?
            }
        };
        s = want;
        c = c.get(&rel)?;
        path = path.join(&rel);
    }
    Some(path)
}

fn unaligned_partner(
    want: &DomNode,
    parent: &DomNode,
    taken: &HashSet<usize>,
    labeler: &Labeler,
    algorithm: Algorithm,
) -> Option<NodePath> {
    let mut best: Option<(f64, NodePath)> = None;
    for (j, child) in parent.children.iter().enumerate() {
        if taken.contains(&j) {
            continue;
        }
        for (rel, node) in child.walk() {
            if rel.depth() > 1 || !labeler.same_label(node, want) {
                continue;
            }
            let score = similarity(want, node, labeler, algorithm);
            if score > 0.0 && best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, NodePath(vec![j]).join(&rel)));
            }
        }
    }
    best.map(|(_, p)| p)
}

fn texts(page: &DomTree, paths: &[NodePath]) -> Vec<(NodePath, String)> {
    paths
        .iter()
        .map(|p| (p.clone(), page.get(p).map(extracted_text).unwrap_or_default()))
        .collect()
}

fn dedup_in_order(paths: impl IntoIterator<Item = NodePath>) -> Vec<NodePath> {
    let mut seen = HashSet::new();
    paths.into_iter().filter(|p| seen.insert(p.clone())).collect()
}

fn inside(scope: &NodePath, nested: bool, target: &NodePath) -> bool {
    scope.is_prefix_of(target) && (!nested || target.depth() > scope.depth())
}

fn adapt_rule_in(rule: &Rule, req: &AdaptRequest<'_>) -> Result<Adaptation, AdaptationFailed> {
    let fail = |reason: &str, candidates: Vec<RankedCandidate>| AdaptationFailed {
        rule: rule.name.clone(),
        reason: reason.to_string(),
        candidates,
    };
    let cfg = rule
        .adaptation
        .as_ref()
        .ok_or_else(|| fail("rule has no adaptation settings", Vec::new()))?;
    let stored = rule
        .stored_example
        .as_ref()
        .ok_or_else(|| fail("rule has no stored example", Vec::new()))?;
    let labeler = cfg.labeler;
    let page = req.page;
    let passes = |targets: &[NodePath]| {
        validate_results(&texts(page, targets), req.constraints).is_ok() && (req.accept)(targets)
    };

    if let Some(template) = &rule.template {
        let mut per_scope = Vec::new();
        for scope in req.scopes {
            let roots = template_match_within(template, page, scope, &labeler);
            let targets = dedup_in_order(
                roots
                    .iter()
                    .filter_map(|r| resolve_target(stored, page, r, &labeler, cfg.algorithm))
                    .filter(|t| inside(scope, req.nested, t)),
            );
            if !passes(&targets) {
                break;
            }
            per_scope.push(targets);
        }
        if per_scope.len() == req.scopes.len() {
            let mut kept = rule.clone();
            if cfg.update_stored {
                kept.plan = updated_plan(rule, req, &per_scope);
            }
            return Ok(Adaptation {
                rule: kept,
                report: AdaptationReport {
                    rule_name: rule.name.clone(),
                    trigger: req.trigger,
                    page: page.source_id.clone(),
                    repaired: true,
                    algorithm: None,
                    candidates: Vec::new(),
                    chosen_threshold: None,
                    template_action: TemplateAction::None,
                    config_delta: None,
                    detail: "resolved by tree template".into(),
                },
                targets: per_scope,
            });
        }
    }

    let mut last_candidates = Vec::new();
    for algorithm in cfg.algorithms() {
        let mut chosen: Option<f64> = None;
        let mut per_scope: Vec<(Vec<RankedCandidate>, Vec<NodePath>)> = Vec::new();
        for scope in req.scopes {
            let ranked = best_matches_within(
                &stored.subtree,
                page,
                scope,
                &labeler,
                algorithm,
                cfg.threshold.low(),
            );
            let resolved: Vec<Option<NodePath>> = ranked
                .iter()
                .map(|c| {
                    resolve_target(stored, page, &c.path, &labeler, algorithm).filter(|t| inside(scope, req.nested, t))
                })
                .collect();
            let scores: Vec<f64> = ranked.iter().map(|c| c.score).collect();
            let admitted_targets =
                |k: usize| dedup_in_order(resolved[..k].iter().flatten().cloned());
            let found = threshold_search_by(&scores, &cfg.threshold, |k| {
                let targets = admitted_targets(k);
                !targets.is_empty() && passes(&targets)
            });
            match found {
                Ok((t, k)) => {
                    chosen = Some(chosen.map_or(t, |c: f64| c.min(t)));
                    let targets = admitted_targets(k);
                    let admitted: Vec<RankedCandidate> = ranked
                        .iter()
                        .zip(&resolved)
                        .take(k)
                        .filter(|(_, r)| r.is_some())
                        .map(|(c, _)| c.clone())
                        .collect();
                    last_candidates = ranked;
                    per_scope.push((admitted, targets));
                }
                Err(Unsatisfiable) => {
                    last_candidates = ranked;
                    break;
                }
            }
        }
        if per_scope.len() < req.scopes.len() {
            continue;
        }
        let chosen = chosen.expect("at least one scope");
        return Ok(finish_adaptation(rule, req, algorithm, chosen, per_scope, last_candidates));
    }
    last_candidates.truncate(REPORTED_CANDIDATES);
    Err(fail(
        "no candidate set satisfies the constraints at any allowed threshold",
        last_candidates,
    ))
}

fn finish_adaptation(
    rule: &Rule,
    req: &AdaptRequest<'_>,
    algorithm: Algorithm,
    chosen: f64,
    per_scope: Vec<(Vec<RankedCandidate>, Vec<NodePath>)>,
    mut ranked: Vec<RankedCandidate>,
) -> Adaptation {
    let page = req.page;
    let cfg = rule.adaptation.as_ref().expect("checked by caller");
    let stored = rule.stored_example.as_ref().expect("checked by caller");
    let labeler = cfg.labeler;
    let mut new_rule = rule.clone();

    let matched: Vec<&DomNode> = per_scope
        .iter()
        .flat_map(|(admitted, _)| admitted.iter())
        .filter_map(|c| page.get(&c.path))
        .collect();
    let (template, action) = update_template(rule.template.as_ref(), &stored.subtree, &matched, &labeler);
    new_rule.template = template;

    if cfg.update_stored {
        let admitted = &per_scope[0].0;
        let fresh = admitted.iter().find_map(|c| {
            let target = resolve_target(stored, page, &c.path, &labeler, algorithm)?;
            let residual = target.relative_to(&c.path)?;
            let node = page.get(&c.path)?;
            Some(StoredExample {
                subtree: DomTree::new(node.clone(), page.source_id.clone()).root,
                residual_path: residual,
                captured_from: page.source_id.clone(),
                captured_at: req.now,
            })
        });
        if let Some(example) = fresh {
            new_rule.stored_example = Some(example);
        }
        let targets: Vec<Vec<NodePath>> = per_scope.iter().map(|(_, t)| t.clone()).collect();
        new_rule.plan = updated_plan(rule, req, &targets);
    }

    if let Some(cfg) = new_rule.adaptation.as_mut() {
        if let Threshold::Interval { low, .. } = cfg.threshold {
            cfg.threshold = Threshold::Interval { low, high: chosen };
        }
    }

    let config_delta = match (ConfigSummary::of(rule), ConfigSummary::of(&new_rule)) {
        (Some(before), Some(after)) => Some(ConfigDelta { before, after }),
        _ => None,
    };
    ranked.truncate(REPORTED_CANDIDATES);
    let targets: Vec<Vec<NodePath>> = per_scope.into_iter().map(|(_, t)| t).collect();
    let found: usize = targets.iter().map(Vec::len).sum();
    Adaptation {
        rule: new_rule,
        report: AdaptationReport {
            rule_name: rule.name.clone(),
            trigger: req.trigger,
            page: page.source_id.clone(),
            repaired: true,
            algorithm: Some(algorithm),
            candidates: ranked,
            chosen_threshold: Some(chosen),
            template_action: action,
            config_delta,
            detail: format!("{found} target(s) recovered by similarity search"),
        },
        targets,
    }
}

/// A locator plan regenerated for the first repaired context. It replaces the
/// old plan when it reproduces the results in every known context; otherwise
/// its locators are added to the old plan as fallbacks.
fn updated_plan(rule: &Rule, req: &AdaptRequest<'_>, targets: &[Vec<NodePath>]) -> FallbackPlan {
    let context = req.nested.then(|| &req.scopes[0]);
    let Ok(fresh) = generate_plan_within(req.page, context, &targets[0], PlanOptions::default()) else {
        return rule.plan.clone();
    };
    let reproduces = |plan: &FallbackPlan| {
        req.scopes
            .iter()
            .zip(targets)
            .chain(req.settled.iter().map(|(s, t)| (s, t)))
            .all(|(scope, want)| {
                apply_plan(plan, req.page, scope, req.constraints).is_ok_and(|(got, _)| got == *want)
            })
    };
    if reproduces(&fresh) {
        fresh
    } else {
        rule.plan.absorb(&fresh)
    }
}

fn update_template(
    current: Option<&TreeTemplate>,
    stored: &DomNode,
    matched: &[&DomNode],
    labeler: &Labeler,
) -> (Option<TreeTemplate>, TemplateAction) {
    let Some((first, rest)) = matched.split_first() else {
        return (current.cloned(), TemplateAction::None);
    };
    let (mut template, created) = match current {
        Some(t) => (t.clone(), false),
        None => match generalize(stored, first, labeler) {
            Ok(t) => (t, true),
            Err(_) => return (None, TemplateAction::None),
        },
    };
    let to_refine = if created { rest } else { matched };
    for node in to_refine {
        if let Ok(t) = refine(&template, node, labeler) {
            template = t;
        }
    }
    let action = if created {
        TemplateAction::Created
    } else if Some(&template) != current {
        TemplateAction::Refined
    } else {
        TemplateAction::None
    };
    (Some(template), action)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptOutcome {
    Repaired,
    Failed,
}

/// Follow-up work scheduled after an adaptation attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum Directive {
    /// Adapt a descendant rule against the parent's new matches.
    AdaptDescendant { rule: String },
    AdaptParent { parent: String },
    Retry { rule: String },
    SwitchPage { page: usize },
}

fn descendants(rule: &Rule, out: &mut Vec<String>) {
    for c in &rule.children {
        if !c.adaptation.as_ref().is_some_and(|a| a.top_down_opt_out) {
            out.push(c.name.clone());
        }
        descendants(c, out);
    }
}

fn cascade(rule: &Rule, parent: Option<&str>, outcome: AdaptOutcome, current: usize, pages: usize) -> Vec<Directive> {
    let Some(cfg) = &rule.adaptation else {
        return Vec::new();
    };
    let mut out = Vec::new();
    match outcome {
        AdaptOutcome::Repaired => {
            if cfg.has(Trigger::TopDown) {
                let mut names = Vec::new();
                descendants(rule, &mut names);
                out.extend(names.into_iter().map(|rule| Directive::AdaptDescendant { rule }));
            }
        }
        AdaptOutcome::Failed => {
            if cfg.has(Trigger::BottomUp) {
                if let Some(parent) = parent {
                    out.push(Directive::AdaptParent {
                        parent: parent.to_string(),
                    });
                    out.push(Directive::Retry {
                        rule: rule.name.clone(),
                    });
                }
            }
            if cfg.has(Trigger::ProcessFlow) && current + 1 < pages {
                out.push(Directive::SwitchPage { page: current + 1 });
            }
        }
    }
    out
}

fn parent_of<'a>(rules: &'a [Rule], name: &str) -> Option<&'a Rule> {
    for r in rules {
        if r.children.iter().any(|c| c.name == name) {
            return Some(r);
        }
        if let Some(p) = parent_of(&r.children, name) {
            return Some(p);
        }
    }
    None
}

/// Directives implied by the rule's configured triggers for an outcome.
pub fn trigger_cascade(wrapper: &Wrapper, rule: &Rule, outcome: AdaptOutcome, ctx: &ExecutionContext) -> Vec<Directive> {
    let parent = parent_of(&wrapper.rules, &rule.name).map(|p| p.name.as_str());
    cascade(rule, parent, outcome, ctx.current, ctx.pages.len())
}

/// Child rules that failed under every match of their parent. A child that
/// itself matched but has a descendant stuck in all of its matches counts as
/// failed too, so bottom-up requests climb past it.
fn stuck_children(per_match: &[Vec<ExtractionResult>]) -> HashSet<&str> {
    let mut names: Vec<&str> = Vec::new();
    for r in per_match.iter().flatten() {
        if !names.contains(&r.rule_name.as_str()) {
            names.push(&r.rule_name);
        }
    }
    names
        .into_iter()
        .filter(|name| {
            let mut seen = false;
            let all = per_match.iter().flatten().filter(|r| r.rule_name == *name).all(|r| {
                seen = true;
                r.status == Status::Failed || (!r.children.is_empty() && !stuck_children(&r.children).is_empty())
            });
            seen && all
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecuteOptions {
    pub adapt: bool,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        ExecuteOptions { adapt: true }
    }
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub results: Vec<ExtractionResult>,
    pub reports: Vec<AdaptationReport>,
    /// Present when any rule was adapted; carries the next version.
    pub adapted: Option<Wrapper>,
    /// Adaptation attempts per rule name.
    pub attempts: BTreeMap<String, usize>,
}

impl Execution {
    pub fn status(&self) -> Status {
        self.results
            .iter()
            .fold(Status::Ok, |acc, r| acc.worst(r.overall_status()))
    }

    /// Every result for `rule_name`, in pre-order.
    pub fn find(&self, rule_name: &str) -> Vec<&ExtractionResult> {
        let mut out = Vec::new();
        for r in &self.results {
            r.collect(rule_name, &mut out);
        }
        out
    }
}

pub fn execute_wrapper(wrapper: &Wrapper, ctx: &ExecutionContext) -> Result<Execution, EngineError> {
    execute_wrapper_with(wrapper, ctx, ExecuteOptions::default())
}

pub fn execute_wrapper_with(
    wrapper: &Wrapper,
    ctx: &ExecutionContext,
    options: ExecuteOptions,
) -> Result<Execution, EngineError> {
    ctx.check()?;
    let mut working = wrapper.clone();
    let mut run = Run {
        ctx,
        options,
        schema: wrapper.schema.clone(),
        now: ctx.clock.now(),
        reports: Vec::new(),
        attempts: BTreeMap::new(),
        bottom_up_used: HashSet::new(),
        changed: false,
    };
    let mut results = Vec::new();
    for rule in working.rules.iter_mut() {
        results.extend(run.eval_rule(rule, None, ctx.current, &[NodePath::root()], None, 0));
    }
    let adapted = run.changed.then(|| {
        working.version = wrapper.version + 1;
        working
    });
    Ok(Execution {
        results,
        reports: run.reports,
        adapted,
        attempts: run.attempts,
    })
}

struct Run<'a> {
    ctx: &'a ExecutionContext,
    options: ExecuteOptions,
    schema: BTreeMap<String, Vec<IntegrityConstraint>>,
    now: DateTime<Utc>,
    reports: Vec<AdaptationReport>,
    attempts: BTreeMap<String, usize>,
    bottom_up_used: HashSet<String>,
    changed: bool,
}

struct ScopeOutcome {
    matches: Vec<NodePath>,
    used: Option<Used>,
    status: Status,
}

impl<'a> Run<'a> {
    fn constraints(&self, rule: &Rule) -> Vec<IntegrityConstraint> {
        if !rule.constraints.is_empty() {
            return rule.constraints.clone();
        }
        self.schema.get(&rule.name).cloned().unwrap_or_default()
    }

    /// One adaptation attempt, recorded in the reports. Returns the targets
    /// per scope on success.
    #[allow(clippy::too_many_arguments)]
    fn try_adapt(
        &mut self,
        rule: &mut Rule,
        page_idx: usize,
        scopes: &[NodePath],
        settled: &[(NodePath, Vec<NodePath>)],
        nested: bool,
        trigger: TriggerKind,
        accept: &dyn Fn(&[NodePath]) -> bool,
    ) -> Option<Vec<Vec<NodePath>>> {
        if !self.options.adapt || rule.adaptation.is_none() {
            return None;
        }
        let used = self.attempts.entry(rule.name.clone()).or_default();
        if *used >= MAX_CASCADE_DEPTH * self.ctx.pages.len() {
            return None;
        }
        *used += 1;
        let constraints = self.constraints(rule);
        let page = &self.ctx.pages[page_idx];
        let req = AdaptRequest {
            constraints: &constraints,
            page,
            scopes,
            settled,
            nested,
            trigger,
            now: self.now,
            accept,
        };
        match adapt_rule_in(rule, &req) {
            Ok(adaptation) => {
                *rule = adaptation.rule;
                self.changed = true;
                self.reports.push(adaptation.report);
                Some(adaptation.targets)
            }
            Err(failed) => {
                self.reports.push(AdaptationReport {
                    rule_name: rule.name.clone(),
                    trigger,
                    page: page.source_id.clone(),
                    repaired: false,
                    algorithm: None,
                    candidates: failed.candidates,
                    chosen_threshold: None,
                    template_action: TemplateAction::None,
                    config_delta: None,
                    detail: failed.reason,
                });
                None
            }
        }
    }

    /// Evaluates `rule` once per scope and recurses into its children.
    fn eval_rule(
        &mut self,
        rule: &mut Rule,
        parent: Option<&str>,
        page_idx: usize,
        scopes: &[NodePath],
        forced: Option<TriggerKind>,
        depth: usize,
    ) -> Vec<ExtractionResult> {
        let nested = parent.is_some();
        let page = &self.ctx.pages[page_idx];
        let constraints = self.constraints(rule);
        let mut outcomes: Vec<ScopeOutcome> = scopes
            .iter()
            .map(|scope| match apply_plan(&rule.plan, page, scope, &constraints) {
                Ok((matches, used)) => ScopeOutcome {
                    matches,
                    used: Some(used),
                    status: Status::Ok,
                },
                Err(_) => ScopeOutcome {
                    matches: Vec::new(),
                    used: None,
                    status: Status::Failed,
                },
            })
            .collect();

        let failing: Vec<usize> = (0..scopes.len())
            .filter(|&i| outcomes[i].status == Status::Failed)
            .collect();
        if !failing.is_empty() {
            let failing_scopes: Vec<NodePath> = failing.iter().map(|&i| scopes[i].clone()).collect();
            let settled: Vec<(NodePath, Vec<NodePath>)> = (0..scopes.len())
                .filter(|&i| outcomes[i].status == Status::Ok)
                .map(|i| (scopes[i].clone(), outcomes[i].matches.clone()))
                .collect();
            let trigger = forced.unwrap_or(TriggerKind::ConstraintViolation);
            if let Some(targets) =
                self.try_adapt(rule, page_idx, &failing_scopes, &settled, nested, trigger, &|_| true)
            {
                for (&i, t) in failing.iter().zip(targets) {
                    outcomes[i] = ScopeOutcome {
                        matches: t,
                        used: None,
                        status: Status::Adapted,
                    };
                }
            }
        }

        let failed_here = outcomes.iter().any(|o| o.status == Status::Failed);
        let adapted_here = outcomes.iter().any(|o| o.status == Status::Adapted);
        if failed_here && depth < MAX_CASCADE_DEPTH && self.options.adapt {
            let directives = cascade(rule, parent, AdaptOutcome::Failed, page_idx, self.ctx.pages.len());
            // Nested rules are bound to their parent's page; only top-level
            // rules switch pages.
            if !nested {
                if let Some(Directive::SwitchPage { page }) =
                    directives.iter().find(|d| matches!(d, Directive::SwitchPage { .. }))
                {
                    return self.eval_rule(rule, parent, *page, scopes, Some(TriggerKind::ProcessFlow), depth + 1);
                }
            }
        }

        let top_down: HashSet<String> = if adapted_here && depth < MAX_CASCADE_DEPTH {
            cascade(rule, parent, AdaptOutcome::Repaired, page_idx, self.ctx.pages.len())
                .into_iter()
                .filter_map(|d| match d {
                    Directive::AdaptDescendant { rule } => Some(rule),
                    _ => None,
                })
                .collect()
        } else {
            HashSet::new()
        };

        let page = &self.ctx.pages[page_idx];
        let mut results = Vec::with_capacity(scopes.len());
        for (scope_idx, mut outcome) in outcomes.into_iter().enumerate() {
            let mut children = self.eval_children(rule, page_idx, &outcome.matches, &top_down, depth);
            if let Some(retry) = self.bottom_up(rule, parent, page_idx, &scopes[scope_idx], &children, depth) {
                outcome = retry;
                children = self.eval_children(rule, page_idx, &outcome.matches, &top_down, depth);
            }
            results.push(ExtractionResult {
                rule_name: rule.name.clone(),
                page: page.source_id.clone(),
                used: outcome.used,
                matches: texts(page, &outcome.matches)
                    .into_iter()
                    .map(|(path, text)| Extracted { path, text })
                    .collect(),
                children,
                status: outcome.status,
            });
        }
        results
    }

    /// Child results per match, as `[match][child rule]`.
    fn eval_children(
        &mut self,
        rule: &mut Rule,
        page_idx: usize,
        matches: &[NodePath],
        top_down: &HashSet<String>,
        depth: usize,
    ) -> Vec<Vec<ExtractionResult>> {
        if rule.children.is_empty() {
            return Vec::new();
        }
        let mut per_match: Vec<Vec<ExtractionResult>> = vec![Vec::new(); matches.len()];
        if matches.is_empty() {
            return per_match;
        }
        let parent_name = rule.name.clone();
        for child in rule.children.iter_mut() {
            let (forced, child_depth) = if top_down.contains(&child.name) {
                (Some(TriggerKind::TopDown), depth + 1)
            } else {
                (None, depth)
            };
            let results = self.eval_rule(child, Some(&parent_name), page_idx, matches, forced, child_depth);
            for (slot, r) in per_match.iter_mut().zip(results) {
                slot.push(r);
            }
        }
        per_match
    }

    /// Forced parent adaptation when a child with a bottom-up trigger failed.
    /// Runs at most once per rule and execution; the new matches must let
    /// every such child's locators succeed.
    fn bottom_up(
        &mut self,
        rule: &mut Rule,
        parent: Option<&str>,
        page_idx: usize,
        scope: &NodePath,
        children: &[Vec<ExtractionResult>],
        depth: usize,
    ) -> Option<ScopeOutcome> {
        if depth >= MAX_CASCADE_DEPTH || rule.adaptation.is_none() || self.bottom_up_used.contains(&rule.name) {
            return None;
        }
        let failed = stuck_children(children);
        let pages = self.ctx.pages.len();
        let asking: Vec<Rule> = rule
            .children
            .iter()
            .filter(|c| failed.contains(c.name.as_str()))
            .filter(|c| {
                cascade(c, Some(&rule.name), AdaptOutcome::Failed, page_idx, pages)
                    .iter()
                    .any(|d| matches!(d, Directive::AdaptParent { .. }))
            })
            .cloned()
            .collect();
        if asking.is_empty() {
            return None;
        }
        self.bottom_up_used.insert(rule.name.clone());
        let page = &self.ctx.pages[page_idx];
        let child_constraints: Vec<Vec<IntegrityConstraint>> = asking.iter().map(|c| self.constraints(c)).collect();
        let accept = |targets: &[NodePath]| {
            targets.iter().all(|t| {
                asking
                    .iter()
                    .zip(&child_constraints)
                    .all(|(c, cons)| apply_plan(&c.plan, page, t, cons).is_ok())
            })
        };
        let targets = self.try_adapt(
            rule,
            page_idx,
            std::slice::from_ref(scope),
            &[],
            parent.is_some(),
            TriggerKind::BottomUp,
            &accept,
        )?;
        Some(ScopeOutcome {
            matches: targets.into_iter().next().unwrap_or_default(),
            used: None,
            status: Status::Adapted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse_html;
    use crate::wrapper::{capture_example, AdaptationConfig};
    use crate::xpath::{generate_plan, FallbackPlan, XPathExpr};
    use chrono::TimeZone;

    fn clock() -> FixedClock {
        FixedClock(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }

    fn interval(low: f64, high: f64) -> Threshold {
        Threshold::Interval { low, high }
    }

    #[test]
    fn threshold_search_examples() {
        let one = IntegrityConstraint::exactly_one();
        assert_eq!(threshold_search(&[0.9, 0.4], &one, &interval(0.5, 0.95)), Ok((0.9, 1)));
        assert_eq!(threshold_search(&[0.9, 0.9], &one, &interval(0.5, 0.95)), Err(Unsatisfiable));
        assert_eq!(threshold_search(&[], &one, &interval(0.5, 0.95)), Err(Unsatisfiable));
        let (t, k) = threshold_search(&[0.92, 0.9], &one, &interval(0.5, 0.95)).unwrap();
        assert!(t > 0.90 && t <= 0.92);
        assert_eq!(k, 1);
        let many = IntegrityConstraint::at_least_one();
        assert_eq!(threshold_search(&[0.9, 0.9], &many, &interval(0.5, 0.95)), Ok((0.9, 2)));
        assert_eq!(threshold_search(&[0.9, 0.4], &one, &Threshold::Constant(0.5)), Ok((0.5, 1)));
        assert_eq!(threshold_search(&[0.9, 0.6], &one, &Threshold::Constant(0.5)), Err(Unsatisfiable));
    }

    const BEFORE: &str = r#"<body><div id="top"><h1>Shop</h1></div>
        <div class="main"><div class="box"><span class="name">Lamp</span><span class="price">12.50</span></div></div></body>"#;
    const AFTER: &str = r#"<body><div id="top"><h1>Shop</h1></div><aside><p>ad</p></aside>
        <section><div class="main"><div class="box"><span class="name">Lamp</span><span class="price">12.50</span></div></div></section></body>"#;

    fn price_wrapper() -> (Wrapper, DomTree) {
        let page = parse_html(BEFORE, "before");
        let target = NodePath(vec![0, 1, 0, 1]);
        assert_eq!(page.get(&target).unwrap().text, "12.50");
        let plan = FallbackPlan::single(XPathExpr::parse("/html/body/div[2]/div/span[2]").unwrap());
        let example = capture_example(&page, &target, 2, clock().0).unwrap();
        let rule = Rule::new("price", plan)
            .with_constraints(vec![IntegrityConstraint::exactly_one(), IntegrityConstraint::decimal()])
            .with_adaptation(AdaptationConfig::new(Algorithm::Weighted, interval(0.5, 0.95)), example);
        (Wrapper::new("shop", vec![rule]), page)
    }

    #[test]
    fn unchanged_page_is_idempotent() {
        let (w, page) = price_wrapper();
        let ctx = ExecutionContext::single(page).with_clock(clock());
        let a = execute_wrapper(&w, &ctx).unwrap();
        let b = execute_wrapper(&w, &ctx).unwrap();
        assert_eq!(a.results, b.results);
        assert!(a.reports.is_empty() && a.adapted.is_none());
        assert_eq!(a.status(), Status::Ok);
        assert_eq!(a.results[0].matches[0].text, "12.50");
    }

    #[test]
    fn relocated_region_is_repaired() {
        let (w, _) = price_wrapper();
        let ctx = ExecutionContext::single(parse_html(AFTER, "after")).with_clock(clock());
        let ex = execute_wrapper(&w, &ctx).unwrap();
        assert_eq!(ex.status(), Status::Adapted);
        assert_eq!(ex.results[0].matches.len(), 1);
        assert_eq!(ex.results[0].matches[0].text, "12.50");
        let report = &ex.reports[0];
        assert!(report.repaired);
        assert_eq!(report.candidates[0].score, 1.0);
        assert_eq!(report.template_action, TemplateAction::Created);
        assert!(interval(0.5, 0.95).contains(report.chosen_threshold.unwrap()));
        let next = ex.adapted.unwrap();
        assert_eq!(next.version, w.version + 1);
        assert_eq!(w.version, 1);
        // The repaired wrapper runs cleanly on the new page.
        let again = execute_wrapper(&next, &ctx).unwrap();
        assert_eq!(again.status(), Status::Ok);
        assert_eq!(again.results[0].matches, ex.results[0].matches);
    }

    #[test]
    fn deleted_region_fails() {
        let (w, _) = price_wrapper();
        let ctx = ExecutionContext::single(parse_html("<body><div id='top'></div></body>", "gone"));
        let ex = execute_wrapper(&w, &ctx).unwrap();
        assert_eq!(ex.status(), Status::Failed);
        assert!(!ex.reports[0].repaired);
        assert!(ex.adapted.is_none());
        let err = adapt_rule(&w.rules[0], &ctx).unwrap_err();
        assert!(err.reason.contains("no candidate"));
    }

    #[test]
    fn empty_bundle_is_an_error() {
        assert_eq!(ExecutionContext::new(Vec::new()).unwrap_err(), EngineError::EmptyBundle);
    }

    #[test]
    fn process_flow_switches_page() {
        let (mut w, _) = price_wrapper();
        w.rules[0].adaptation.as_mut().unwrap().triggers.insert(Trigger::ProcessFlow);
        let gone = parse_html("<body><p>nothing</p></body>", "gone");
        let ctx = ExecutionContext::new(vec![gone, parse_html(BEFORE, "other")]).unwrap();
        let ex = execute_wrapper(&w, &ctx).unwrap();
        assert_eq!(ex.results[0].page, "other");
        assert_eq!(ex.results[0].matches[0].text, "12.50");
        assert!(ex.attempts["price"] <= MAX_CASCADE_DEPTH * 2);

        let single = ExecutionContext::single(parse_html("<p/>", "x"));
        assert!(trigger_cascade(&w, &w.rules[0], AdaptOutcome::Failed, &single).is_empty());
    }

    fn listing(records: &[(&str, &str)], wrap: bool) -> String {
        let class = if wrap { "row" } else { "rec" };
        let items: String = records
            .iter()
            .map(|(n, p)| format!("<li class='{class}'><b>{n}</b><i>{p}</i></li>"))
            .collect();
        if wrap {
            format!("<body><div><ul class='items'>{items}</ul></div></body>")
        } else {
            format!("<body><ul class='list'>{items}</ul></body>")
        }
    }

    fn listing_wrapper(triggers: &[Trigger]) -> Wrapper {
        let page = parse_html(&listing(&[("a", "1"), ("b", "2")], false), "gen");
        let recs = vec![NodePath(vec![0, 0, 0]), NodePath(vec![0, 0, 1])];
        let rec_plan = generate_plan_within(&page, None, &recs, PlanOptions::default()).unwrap();
        let rec_example = capture_example(&page, &recs[0], 0, clock().0).unwrap();
        let price_target = NodePath(vec![0, 0, 0, 1]);
        let price_plan = generate_plan_within(&page, Some(&recs[0]), std::slice::from_ref(&price_target), PlanOptions::default())
            .unwrap();
        let price_example = {
            let mut e = capture_example(&page, &price_target, 1, clock().0).unwrap();
            e.captured_from = "gen".into();
            e
        };
        let cfg = AdaptationConfig::new(Algorithm::Weighted, interval(0.3, 0.95)).with_triggers(triggers.iter().copied());
        let price = Rule::new("price", price_plan)
            .with_constraints(vec![IntegrityConstraint::exactly_one(), IntegrityConstraint::integer()])
            .with_adaptation(cfg.clone(), price_example);
        let record = Rule::new("record", rec_plan)
            .with_constraints(vec![IntegrityConstraint::at_least_one()])
            .with_adaptation(cfg, rec_example)
            .with_children(vec![price]);
        Wrapper::new("listing", vec![record])
    }

    #[test]
    fn children_follow_repaired_parent() {
        let w = listing_wrapper(&[Trigger::TopDown]);
        assert!(w.validate().is_ok());
        let page = parse_html(&listing(&[("a", "1"), ("b", "2"), ("c", "3")], true), "moved");
        let ctx = ExecutionContext::single(page).with_clock(clock());
        let ex = execute_wrapper(&w, &ctx).unwrap();
        let rec = &ex.results[0];
        assert_eq!(rec.status, Status::Adapted);
        assert_eq!(rec.matches.len(), 3);
        let prices: Vec<&str> = ex.find("price").iter().map(|r| r.matches[0].text.as_str()).collect();
        assert_eq!(prices, ["1", "2", "3"]);
        // The relative child locator still works, so no child adaptation.
        assert!(ex.reports.iter().all(|r| r.rule_name == "record"));
        let directives = trigger_cascade(&w, &w.rules[0], AdaptOutcome::Repaired, &ctx);
        assert_eq!(directives, vec![Directive::AdaptDescendant { rule: "price".into() }]);
    }

    #[test]
    fn bottom_up_directives() {
        let w = listing_wrapper(&[Trigger::BottomUp]);
        let ctx = ExecutionContext::single(parse_html("<p/>", "x"));
        let d = trigger_cascade(&w, &w.rules[0].children[0], AdaptOutcome::Failed, &ctx);
        assert_eq!(
            d,
            vec![
                Directive::AdaptParent { parent: "record".into() },
                Directive::Retry { rule: "price".into() }
            ]
        );
    }

    #[test]
    fn attempts_are_bounded() {
        let w = listing_wrapper(&[Trigger::BottomUp, Trigger::TopDown, Trigger::ProcessFlow]);
        let junk = |id: &str| parse_html("<body><ul><li><b>x</b><i>not a number</i></li></ul></body>", id);
        let ctx = ExecutionContext::new(vec![junk("p1"), junk("p2"), junk("p3")]).unwrap();
        let ex = execute_wrapper(&w, &ctx).unwrap();
        for n in ex.attempts.values() {
            assert!(*n <= MAX_CASCADE_DEPTH * 3);
        }
        assert_eq!(ex.status(), Status::Failed);
    }

    #[test]
    fn no_adapt_option() {
        let (w, _) = price_wrapper();
        let ctx = ExecutionContext::single(parse_html(AFTER, "after"));
        let ex = execute_wrapper_with(&w, &ctx, ExecuteOptions { adapt: false }).unwrap();
        assert_eq!(ex.status(), Status::Failed);
        assert!(ex.reports.is_empty());
    }

    #[test]
    fn generated_plan_is_used_after_repair() {
        let page = parse_html(BEFORE, "before");
        let target = NodePath(vec![0, 1, 0, 1]);
        let plan = generate_plan(&page, &target, PlanOptions::default()).unwrap();
        assert_eq!(crate::xpath::evaluate(&plan.best, &page), vec![target]);
    }
}
