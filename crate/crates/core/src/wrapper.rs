//! Wrapper definitions: hierarchical rules, integrity constraints, adaptation
//! settings and stored example subtrees, with their JSON file format.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{ancestor, parse_html, DomError, DomNode, DomTree, NodePath};
use crate::template::TreeTemplate;
use crate::treematch::{Algorithm, Labeler};
use crate::xpath::{FallbackPlan, Pattern, PlanEntry, XPathExpr};

pub const WRAPPER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WrapperError {
    #[error("invalid wrapper: {0}")]
    Invalid(String),
    #[error("malformed wrapper document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Path(#[from] DomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Datatype {
    Integer,
    Decimal,
    Pattern { pattern: Pattern },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegrityConstraint {
    Cardinality {
        min: usize,
        /// `None` is unbounded.
        #[serde(default)]
        max: Option<usize>,
    },
    Datatype {
        #[serde(flatten)]
        datatype: Datatype,
    },
}

impl IntegrityConstraint {
    pub fn exactly_one() -> Self {
        IntegrityConstraint::Cardinality { min: 1, max: Some(1) }
    }

    pub fn at_least_one() -> Self {
        IntegrityConstraint::Cardinality { min: 1, max: None }
    }

    pub fn cardinality(min: usize, max: Option<usize>) -> Self {
        IntegrityConstraint::Cardinality { min, max }
    }

    pub fn integer() -> Self {
        IntegrityConstraint::Datatype {
            datatype: Datatype::Integer,
        }
    }

    pub fn decimal() -> Self {
        IntegrityConstraint::Datatype {
            datatype: Datatype::Decimal,
        }
    }

    pub fn pattern(source: &str) -> Result<Self, WrapperError> {
        let pattern = Pattern::new(source).map_err(|e| WrapperError::Invalid(e.to_string()))?;
        Ok(IntegrityConstraint::Datatype {
            datatype: Datatype::Pattern { pattern },
        })
    }

    fn check_shape(&self) -> Result<(), WrapperError> {
        match self {
            IntegrityConstraint::Cardinality { min, max: Some(max) } if min > max => Err(WrapperError::Invalid(
                format!("cardinality min {min} exceeds max {max}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Intersection of all cardinality constraints, if any are present.
pub fn cardinality_bounds(constraints: &[IntegrityConstraint]) -> (usize, Option<usize>) {
    let mut lo = 0;
    let mut hi: Option<usize> = None;
    for c in constraints {
        if let IntegrityConstraint::Cardinality { min, max } = c {
            lo = lo.max(*min);
            hi = match (hi, max) {
                (Some(a), Some(b)) => Some(a.min(*b)),
                (a, b) => a.or(*b),
            };
        }
    }
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    Cardinality {
        min: usize,
        max: Option<usize>,
        found: usize,
    },
    Datatype {
        path: NodePath,
        text: String,
        expected: Datatype,
    },
}

fn is_integer(s: &str) -> bool {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_decimal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let all_digits = |x: &str| x.bytes().all(|b| b.is_ascii_digit());
    match frac {
        None => !int.is_empty() && all_digits(int),
        Some(f) => (!int.is_empty() || !f.is_empty()) && all_digits(int) && all_digits(f),
    }
}

fn full_match(pattern: &Pattern, s: &str) -> bool {
    // Anchored full match regardless of how the pattern was written.
    let anchored = format!("^(?:{})$", pattern.as_str());
    regex::Regex::new(&anchored).is_ok_and(|re| re.is_match(s))
}

/// The text a rule extracts from a matched node: its directly owned text.
pub fn extracted_text(node: &DomNode) -> String {
    node.text.clone()
}

/// Checks every constraint and reports all violations.
pub fn validate_results(results: &[(NodePath, String)], constraints: &[IntegrityConstraint]) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    for c in constraints {
        match c {
            IntegrityConstraint::Cardinality { min, max } => {
                let found = results.len();
                if found < *min || max.is_some_and(|m| found > m) {
                    violations.push(Violation::Cardinality {
                        min: *min,
                        max: *max,
                        found,
                    });
                }
            }
            IntegrityConstraint::Datatype { datatype } => {
                for (path, text) in results {
                    let ok = match datatype {
                        Datatype::Integer => is_integer(text),
                        Datatype::Decimal => is_decimal(text),
                        Datatype::Pattern { pattern } => full_match(pattern, text),
                    };
                    if !ok {
                        violations.push(Violation::Datatype {
                            path: path.clone(),
                            text: text.clone(),
                            expected: datatype.clone(),
                        });
                    }
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Constant(f64),
    Interval { low: f64, high: f64 },
}

impl Threshold {
    pub fn low(&self) -> f64 {
        match self {
            Threshold::Constant(c) => *c,
            Threshold::Interval { low, .. } => *low,
        }
    }

    pub fn high(&self) -> f64 {
        match self {
            Threshold::Constant(c) => *c,
            Threshold::Interval { high, .. } => *high,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.low() <= t && t <= self.high()
    }

    fn check(&self) -> Result<(), WrapperError> {
        let ok = match self {
            Threshold::Constant(c) => (0.0..=1.0).contains(c),
            Threshold::Interval { low, high } => 0.0 <= *low && low <= high && *high <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(WrapperError::Invalid(format!("threshold out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    TopDown,
    BottomUp,
    ProcessFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub algorithm: Algorithm,
    pub threshold: Threshold,
    #[serde(default)]
    pub labeler: Labeler,
    #[serde(default)]
    pub ancestor_level: usize,
    #[serde(default)]
    pub triggers: BTreeSet<Trigger>,
    #[serde(default = "default_true")]
    pub update_stored: bool,
    /// Algorithms to try in order; empty means just `algorithm`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub algorithm_order: Vec<Algorithm>,
    /// Excludes this rule from top-down adaptation forced by its parent.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub top_down_opt_out: bool,
}

fn default_true() -> bool {
    true
}

impl AdaptationConfig {
    pub fn new(algorithm: Algorithm, threshold: Threshold) -> Self {
        AdaptationConfig {
            algorithm,
            threshold,
            labeler: Labeler::default(),
            ancestor_level: 0,
            triggers: BTreeSet::new(),
            update_stored: true,
            algorithm_order: Vec::new(),
            top_down_opt_out: false,
        }
    }

    pub fn with_triggers(mut self, triggers: impl IntoIterator<Item = Trigger>) -> Self {
        self.triggers.extend(triggers);
        self
    }

    pub fn algorithms(&self) -> Vec<Algorithm> {
        if self.algorithm_order.is_empty() {
            vec![self.algorithm]
        } else {
            self.algorithm_order.clone()
        }
    }

    pub fn has(&self, trigger: Trigger) -> bool {
        self.triggers.contains(&trigger)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredExample {
    pub subtree: DomNode,
    pub residual_path: NodePath,
    pub captured_from: String,
    pub captured_at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
struct StoredExampleRepr {
    html: String,
    residual_path: NodePath,
    captured_from: String,
    captured_at: DateTime<Utc>,
}

impl Serialize for StoredExample {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StoredExampleRepr {
            html: crate::dom::serialize(&self.subtree),
            residual_path: self.residual_path.clone(),
            captured_from: self.captured_from.clone(),
            captured_at: self.captured_at,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StoredExample {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = StoredExampleRepr::deserialize(deserializer)?;
        let subtree = parse_fragment(&repr.html);
        if subtree.get(&repr.residual_path).is_none() {
            return Err(serde::de::Error::custom(format!(
                "residual path {} does not resolve in the stored subtree",
                repr.residual_path
            )));
        }
        Ok(StoredExample {
            subtree,
            residual_path: repr.residual_path,
            captured_from: repr.captured_from,
            captured_at: repr.captured_at,
        })
    }
}

/// Parses a serialized subtree back into a standalone element.
pub fn parse_fragment(html: &str) -> DomNode {
    let tree = parse_html(html, "fragment");
    let first_tag = html
        .trim_start()
        .strip_prefix('<')
        .map(|s| {
            s.chars()
                .take_while(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase()
        })
        .unwrap_or_default();
    let root = if first_tag == "html" || tree.root.children.len() != 1 {
        tree.root
    } else {
        tree.root.children.into_iter().next().expect("one child")
    };
    DomTree::new(root, "fragment").root
}

impl StoredExample {
    pub fn target(&self) -> Option<&DomNode> {
        self.subtree.get(&self.residual_path)
    }
}

/// Leaf targets keep two levels of context; anything else stores itself.
pub fn default_ancestor_level(node: &DomNode) -> usize {
    if node.is_leaf() {
        2
    } else {
        0
    }
}

/// Stores the subtree rooted `ancestor_level` levels above `target`
/// (clamped at the root) and where the target sits inside it.
pub fn capture_example(
    tree: &DomTree,
    target: &NodePath,
    ancestor_level: usize,
    captured_at: DateTime<Utc>,
) -> Result<StoredExample, WrapperError> {
    let anc = ancestor(tree, target, ancestor_level)?;
    Ok(StoredExample {
        subtree: DomTree::new(anc.node.clone(), tree.source_id.clone()).root,
        residual_path: anc.residual,
        captured_from: tree.source_id.clone(),
        captured_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RuleRepr", into = "RuleRepr")]
pub struct Rule {
    pub name: String,
    pub plan: FallbackPlan,
    pub constraints: Vec<IntegrityConstraint>,
    pub adaptation: Option<AdaptationConfig>,
    pub stored_example: Option<StoredExample>,
    pub template: Option<TreeTemplate>,
    pub children: Vec<Rule>,
}

#[derive(Serialize, Deserialize)]
struct RuleRepr {
    name: String,
    xpath_best: XPathExpr,
    #[serde(default)]
    xpath_fallbacks: Vec<PlanEntry>,
    #[serde(default)]
    constraints: Vec<IntegrityConstraint>,
    #[serde(default)]
    adaptation: Option<AdaptationConfig>,
    #[serde(default)]
    stored_example: Option<StoredExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<TreeTemplate>,
    #[serde(default)]
    children: Vec<Rule>,
}

impl From<Rule> for RuleRepr {
    fn from(r: Rule) -> Self {
        RuleRepr {
            name: r.name,
            xpath_best: r.plan.best,
            xpath_fallbacks: r.plan.fallbacks,
            constraints: r.constraints,
            adaptation: r.adaptation,
            stored_example: r.stored_example,
            template: r.template,
            children: r.children,
        }
    }
}

impl TryFrom<RuleRepr> for Rule {
    type Error = String;
    fn try_from(r: RuleRepr) -> Result<Self, Self::Error> {
        let plan = FallbackPlan {
            best: r.xpath_best,
            fallbacks: r.xpath_fallbacks,
        };
        if !plan.priorities_increasing() {
            return Err(format!("rule {:?}: fallback priorities must strictly increase", r.name));
        }
        Ok(Rule {
            name: r.name,
            plan,
            constraints: r.constraints,
            adaptation: r.adaptation,
            stored_example: r.stored_example,
            template: r.template,
            children: r.children,
        })
    }
}

impl Rule {
    pub fn new(name: impl Into<String>, plan: FallbackPlan) -> Self {
        Rule {
            name: name.into(),
            plan,
            constraints: Vec::new(),
            adaptation: None,
            stored_example: None,
            template: None,
            children: Vec::new(),
        }
    }

    pub fn with_constraints(mut self, constraints: Vec<IntegrityConstraint>) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn with_adaptation(mut self, config: AdaptationConfig, example: StoredExample) -> Self {
        self.adaptation = Some(config);
        self.stored_example = Some(example);
        self
    }

    pub fn with_children(mut self, children: Vec<Rule>) -> Self {
        self.children = children;
        self
    }

    /// Depth-first search by name.
    pub fn find(&self, name: &str) -> Option<&Rule> {
        if self.name == name {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wrapper {
    pub name: String,
    pub version: u64,
    pub rules: Vec<Rule>,
    /// Constraints declared once per rule name; a rule's own constraints
    /// take precedence.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub schema: BTreeMap<String, Vec<IntegrityConstraint>>,
}

impl Wrapper {
    pub fn new(name: impl Into<String>, rules: Vec<Rule>) -> Self {
        Wrapper {
            name: name.into(),
            version: 1,
            rules,
            schema: BTreeMap::new(),
        }
    }

    pub fn effective_constraints<'a>(&'a self, rule: &'a Rule) -> &'a [IntegrityConstraint] {
        if !rule.constraints.is_empty() {
            return &rule.constraints;
        }
        self.schema.get(&rule.name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn from_json(text: &str) -> Result<Self, WrapperError> {
        let w: Wrapper = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("wrappers always serialize")
    }

    pub fn find(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find_map(|r| r.find(name))
    }

    pub fn validate(&self) -> Result<(), WrapperError> {
        if self.version < 1 {
            return Err(WrapperError::Invalid("version must be at least 1".into()));
        }
        self.validate_rules(&self.rules, false)
    }

    fn validate_rules(&self, rules: &[Rule], nested: bool) -> Result<(), WrapperError> {
        let mut names = HashSet::new();
        for rule in rules {
            if !names.insert(rule.name.as_str()) {
                return Err(WrapperError::Invalid(format!("duplicate rule name {:?}", rule.name)));
            }
            if nested && !rule.plan.is_relative() {
                return Err(WrapperError::Invalid(format!(
                    "child rule {:?} must use relative locators",
                    rule.name
                )));
            }
            for c in &rule.constraints {
                c.check_shape()?;
            }
            if let Some(cfg) = &rule.adaptation {
                if self.effective_constraints(rule).is_empty() {
                    return Err(WrapperError::Invalid(format!(
                        "rule {:?} is adaptive but has no constraints",
                        rule.name
                    )));
                }
                cfg.threshold.check()?;
                if !cfg.labeler.is_valid() {
                    return Err(WrapperError::Invalid(format!("rule {:?}: labeler enables nothing", rule.name)));
                }
            }
            self.validate_rules(&rule.children, true)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse_html;

    fn res(texts: &[&str]) -> Vec<(NodePath, String)> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| (NodePath(vec![i]), t.to_string()))
            .collect()
    }

    #[test]
    fn cardinality_checks() {
        assert!(validate_results(&res(&["a"]), &[IntegrityConstraint::exactly_one()]).is_ok());
        let v = validate_results(&res(&[]), &[IntegrityConstraint::at_least_one()]).unwrap_err();
        assert_eq!(v, vec![Violation::Cardinality { min: 1, max: None, found: 0 }]);
        assert!(validate_results(&res(&["a", "b"]), &[IntegrityConstraint::exactly_one()]).is_err());
    }

    #[test]
    fn datatype_checks() {
        let r = res(&["12.99"]);
        let v = validate_results(&r, &[IntegrityConstraint::integer()]).unwrap_err();
        assert!(matches!(v[0], Violation::Datatype { .. }));
        assert!(validate_results(&r, &[IntegrityConstraint::pattern(r"\d+\.\d{2}").unwrap()]).is_ok());
        assert!(validate_results(&r, &[IntegrityConstraint::decimal()]).is_ok());
        assert!(validate_results(&res(&["-42"]), &[IntegrityConstraint::integer()]).is_ok());
        assert!(validate_results(&res(&["4 2"]), &[IntegrityConstraint::integer()]).is_err());
        assert!(validate_results(&res(&["."]), &[IntegrityConstraint::decimal()]).is_err());
        // Pattern must match the whole text.
        assert!(validate_results(&res(&["x12.99"]), &[IntegrityConstraint::pattern(r"\d+\.\d{2}").unwrap()]).is_err());
    }

    #[test]
    fn all_violations_reported() {
        let v = validate_results(
            &res(&["a", "b"]),
            &[IntegrityConstraint::exactly_one(), IntegrityConstraint::integer()],
        )
        .unwrap_err();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn capture_levels() {
        let t = parse_html("<body><div><ul><li><b>x</b></li></ul></div></body>", "p");
        let ul = NodePath(vec![0, 0, 0]);
        let e = capture_example(&t, &ul, 0, Utc::now()).unwrap();
        assert_eq!(e.subtree.label, "ul");
        assert!(e.residual_path.steps().is_empty());

        let b = NodePath(vec![0, 0, 0, 0, 0]);
        let e = capture_example(&t, &b, 2, Utc::now()).unwrap();
        assert_eq!(e.subtree.label, "ul");
        assert_eq!(e.residual_path, NodePath(vec![0, 0]));
        assert_eq!(e.target().unwrap().label, "b");

        let div = NodePath(vec![0]);
        let e = capture_example(&t, &div, 5, Utc::now()).unwrap();
        assert_eq!(e.subtree.label, "html");
        assert_eq!(e.residual_path, div);
        assert!(capture_example(&t, &NodePath(vec![7]), 0, Utc::now()).is_err());
    }

    #[test]
    fn fragment_round_trip() {
        let t = parse_html("<body><table><tr><td>1</td><td>2</td></tr></table></body>", "p");
        for (path, node) in t.root.walk() {
            let sub = DomTree::new(node.clone(), "x").root;
            let back = parse_fragment(&crate::dom::serialize(&sub));
            assert_eq!(back, sub, "at {path}");
        }
    }

    #[test]
    fn cardinality_bounds_intersect() {
        let cs = [
            IntegrityConstraint::at_least_one(),
            IntegrityConstraint::cardinality(0, Some(3)),
        ];
        assert_eq!(cardinality_bounds(&cs), (1, Some(3)));
        assert_eq!(cardinality_bounds(&[]), (0, None));
    }

    #[test]
    fn threshold_json_forms() {
        let c: Threshold = serde_json::from_str("0.4").unwrap();
        assert_eq!(c, Threshold::Constant(0.4));
        let i: Threshold = serde_json::from_str(r#"{"low":0.5,"high":0.9}"#).unwrap();
        assert!(i.contains(0.7) && !i.contains(0.95));
    }

    #[test]
    fn adaptive_rule_needs_constraints() {
        let t = parse_html("<body><p>x</p></body>", "p");
        let ex = capture_example(&t, &NodePath(vec![0, 0]), 2, Utc::now()).unwrap();
        let rule = Rule::new("p", FallbackPlan::single(XPathExpr::parse("//p").unwrap()))
            .with_adaptation(AdaptationConfig::new(Algorithm::Weighted, Threshold::Constant(0.5)), ex);
        let mut w = Wrapper::new("w", vec![rule]);
        assert!(matches!(w.validate(), Err(WrapperError::Invalid(_))));
        w.schema.insert("p".into(), vec![IntegrityConstraint::exactly_one()]);
        assert!(w.validate().is_ok());
        let back = Wrapper::from_json(&w.to_json()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn child_rules_must_be_relative() {
        let child = Rule::new("c", FallbackPlan::single(XPathExpr::parse("//b").unwrap()));
        let parent = Rule::new("p", FallbackPlan::single(XPathExpr::parse("//p").unwrap())).with_children(vec![child]);
        assert!(Wrapper::new("w", vec![parent]).validate().is_err());
    }
}
