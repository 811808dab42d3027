//! Robust locator generation: a best expression plus prioritized fallbacks,
//! and their replay against a (possibly changed) page.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_from, relaxation_variants};
use super::{Axis, NameTest, Pattern, Predicate, Step, XPathError, XPathExpr};
use crate::dom::{DomNode, DomTree, NodePath};
use crate::wrapper::{extracted_text, validate_results, IntegrityConstraint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicTag {
    Id,
    Attribute,
    AttributeFragment,
    StructuralGeneralization,
    AnchorRelative,
    IndexRelaxation,
    Textual,
}

impl HeuristicTag {
    pub fn base_priority(self) -> u32 {
        match self {
            HeuristicTag::Id => 10,
            HeuristicTag::Attribute => 20,
            HeuristicTag::AttributeFragment => 30,
            HeuristicTag::StructuralGeneralization => 40,
            HeuristicTag::AnchorRelative => 50,
            HeuristicTag::IndexRelaxation => 60,
            HeuristicTag::Textual => 70,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeuristicTag::Id => "id",
            HeuristicTag::Attribute => "attribute",
            HeuristicTag::AttributeFragment => "attribute_fragment",
            HeuristicTag::StructuralGeneralization => "structural_generalization",
            HeuristicTag::AnchorRelative => "anchor_relative",
            HeuristicTag::IndexRelaxation => "index_relaxation",
            HeuristicTag::Textual => "textual",
        }
    }
}

impl fmt::Display for HeuristicTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub expr: XPathExpr,
    pub tag: HeuristicTag,
    pub priority: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackPlan {
    pub best: XPathExpr,
    /// Sorted by strictly increasing priority.
    pub fallbacks: Vec<PlanEntry>,
}

impl FallbackPlan {
    /// A plan with a single hand-written locator.
    pub fn single(best: XPathExpr) -> Self {
        FallbackPlan {
            best,
            fallbacks: Vec::new(),
        }
    }

    pub fn is_relative(&self) -> bool {
        !self.best.absolute
    }

    pub fn priorities_increasing(&self) -> bool {
        self.fallbacks.windows(2).all(|w| w[0].priority < w[1].priority)
    }

    /// Keeps this plan's best locator and adds `other`'s locators (its best
    /// included) as fallbacks. Entries are regrouped by heuristic, this
    /// plan's first within each group, at most ten per group.
    pub fn absorb(&self, other: &FallbackPlan) -> FallbackPlan {
        let mut seen: HashSet<String> = HashSet::from([self.best.to_string()]);
        let mut entries: Vec<(XPathExpr, HeuristicTag)> = Vec::new();
        let incoming = std::iter::once((other.best.clone(), classify_locator(&other.best)))
            .chain(other.fallbacks.iter().map(|e| (e.expr.clone(), e.tag)));
        for (expr, tag) in self.fallbacks.iter().map(|e| (e.expr.clone(), e.tag)).chain(incoming) {
            if seen.insert(expr.to_string()) {
                entries.push((expr, tag));
            }
        }
        entries.sort_by_key(|(_, tag)| *tag);
        let mut fallbacks = Vec::new();
        let mut offset: HashMap<HeuristicTag, u32> = HashMap::new();
        for (expr, tag) in entries {
            let k = offset.entry(tag).or_default();
            if *k >= 10 {
                continue;
            }
            fallbacks.push(PlanEntry {
                expr,
                tag,
                priority: tag.base_priority() + *k,
            });
            *k += 1;
        }
        FallbackPlan {
            best: self.best.clone(),
            fallbacks,
        }
    }
}

/// The heuristic a locator most likely came from, judged by its predicates.
pub fn classify_locator(expr: &XPathExpr) -> HeuristicTag {
    let preds = || expr.steps.iter().flat_map(|s| s.predicates.iter());
    if preds().any(|p| matches!(p, Predicate::TextEquals(_))) {
        HeuristicTag::Textual
    } else if preds().any(|p| matches!(p, Predicate::AttrEquals { name, .. } if name == "id")) {
        HeuristicTag::Id
    } else if preds().any(|p| matches!(p, Predicate::AttrEquals { .. })) {
        HeuristicTag::Attribute
    } else if preds().any(|p| matches!(p, Predicate::AttrMatches { .. })) {
        HeuristicTag::AttributeFragment
    } else if preds().any(|p| matches!(p, Predicate::Position(_))) {
        HeuristicTag::IndexRelaxation
    } else {
        HeuristicTag::StructuralGeneralization
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub use_text: bool,
}

/// Which part of a plan produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Used {
    Best,
    Fallback(HeuristicTag),
}

impl fmt::Display for Used {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Used::Best => f.write_str("best"),
            Used::Fallback(tag) => tag.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    OutermostTable,
    MainContent,
    IdAnchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPoint {
    pub path: NodePath,
    pub kind: AnchorKind,
    /// Filled once the anchor is bound to a target.
    pub relative: Option<XPathExpr>,
}

/// Outermost tables, the main content area and every element with a
/// page-unique id.
///
/// The main content area is found by starting at `body` (or the root) and
/// descending into the child holding more than half of the current node's
/// text for as long as such a child exists.
pub fn detect_anchors(tree: &DomTree) -> Vec<AnchorPoint> {
    let mut anchors = Vec::new();
    let all = tree.root.walk();

    for (path, node) in &all {
        if node.label == "table" && !has_ancestor_labeled(tree, path, "table") {
            anchors.push(AnchorPoint {
                path: path.clone(),
                kind: AnchorKind::OutermostTable,
                relative: None,
            });
        }
    }

    let mut main = match tree.root.children.iter().position(|c| c.label == "body") {
        Some(i) => NodePath(vec![i]),
        None => NodePath::root(),
    };
    loop {
        let node = tree.get(&main).expect("main content path resolves");
        let total = node.text_len();
        let heaviest = node
            .children
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.text_len()))
            .fold(None, |best: Option<(usize, usize)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match heaviest {
            Some((i, len)) if total > 0 && len * 2 > total => main = main.child(i),
            _ => break,
        }
    }
    anchors.push(AnchorPoint {
        path: main,
        kind: AnchorKind::MainContent,
        relative: None,
    });

    let mut id_counts: HashMap<&str, usize> = HashMap::new();
    for (_, node) in &all {
        if let Some(id) = node.id().filter(|s| !s.is_empty()) {
            *id_counts.entry(id).or_default() += 1;
        }
    }
    for (path, node) in &all {
        if let Some(id) = node.id().filter(|s| !s.is_empty()) {
            if id_counts[id] == 1 {
                anchors.push(AnchorPoint {
                    path: path.clone(),
                    kind: AnchorKind::IdAnchor,
                    relative: None,
                });
            }
        }
    }
    anchors
}

fn has_ancestor_labeled(tree: &DomTree, path: &NodePath, label: &str) -> bool {
    let mut cur = path.parent();
    while let Some(p) = cur {
        if tree.get(&p).is_some_and(|n| n.label == label) {
            return true;
        }
        cur = p.parent();
    }
    false
}

/// Locator for a single page-level target.
pub fn generate_plan(tree: &DomTree, target: &NodePath, options: PlanOptions) -> Result<FallbackPlan, XPathError> {
    generate_plan_within(tree, None, std::slice::from_ref(target), options)
}

/// Locator for a set of targets, relative to `context` when given. The
/// targets must lie strictly below the context.
pub fn generate_plan_within(
    tree: &DomTree,
    context: Option<&NodePath>,
    targets: &[NodePath],
    options: PlanOptions,
) -> Result<FallbackPlan, XPathError> {
    if targets.is_empty() {
        return Err(XPathError::Path(NodePath::root()));
    }
    if let Some(ctx) = context {
        tree.get(ctx).ok_or_else(|| XPathError::Path(ctx.clone()))?;
    }
    for t in targets {
        tree.get(t).ok_or_else(|| XPathError::Path(t.clone()))?;
        if let Some(ctx) = context {
            if !(ctx.is_prefix_of(t) && t.depth() > ctx.depth()) {
                return Err(XPathError::Path(t.clone()));
            }
        }
    }
    let mut sorted = targets.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut gen = Generator::new(tree, context.cloned(), sorted, options);
    gen.run();
    Ok(gen.finish())
}

struct Generator<'a> {
    tree: &'a DomTree,
    context: Option<NodePath>,
    targets: Vec<NodePath>,
    options: PlanOptions,
    seen: HashSet<String>,
    entries: Vec<(XPathExpr, HeuristicTag)>,
    indexed: Option<XPathExpr>,
    /// (label, id-or-class) occurrence counts within the scope.
    characteristic: HashMap<(String, Option<String>), usize>,
}

fn char_key(node: &DomNode) -> (String, Option<String>) {
    let distinguishing = node
        .id()
        .filter(|s| !s.is_empty())
        .map(|s| format!("#{s}"))
        .or_else(|| node.class().filter(|s| !s.is_empty()).map(|s| format!(".{s}")));
    (node.label.clone(), distinguishing)
}

impl<'a> Generator<'a> {
    fn new(tree: &'a DomTree, context: Option<NodePath>, targets: Vec<NodePath>, options: PlanOptions) -> Self {
        let mut gen = Generator {
            tree,
            context,
            targets,
            options,
            seen: HashSet::new(),
            entries: Vec::new(),
            indexed: None,
            characteristic: HashMap::new(),
        };
        for (path, node) in gen.scope_nodes() {
            if gen.context.as_ref() != Some(&path) {
                *gen.characteristic.entry(char_key(node)).or_default() += 1;
            }
        }
        gen
    }

    fn scope_root(&self) -> NodePath {
        self.context.clone().unwrap_or_default()
    }

    fn scope_nodes(&self) -> Vec<(NodePath, &'a DomNode)> {
        let root = self.scope_root();
        let node = self.tree.get(&root).expect("scope resolves");
        node.walk().into_iter().map(|(p, n)| (root.join(&p), n)).collect()
    }

    fn base(&self) -> XPathExpr {
        XPathExpr {
            absolute: self.context.is_none(),
            steps: Vec::new(),
        }
    }

    fn eval(&self, expr: &XPathExpr) -> Vec<NodePath> {
        evaluate_from(expr, self.tree, &self.scope_root())
    }

    fn exact(&self, expr: &XPathExpr) -> bool {
        self.eval(expr) == self.targets
    }

    fn node(&self, path: &NodePath) -> &'a DomNode {
        self.tree.get(path).expect("generator paths resolve")
    }

    fn single(&self) -> Option<&NodePath> {
        (self.targets.len() == 1).then(|| &self.targets[0])
    }

    fn push(&mut self, expr: XPathExpr, tag: HeuristicTag) -> bool {
        if !self.exact(&expr) {
            return false;
        }
        if self.seen.insert(expr.to_string()) {
            self.entries.push((expr, tag));
        }
        true
    }

    fn name_test(&self) -> NameTest {
        let first = &self.node(&self.targets[0]).label;
        if self.targets.iter().all(|t| self.node(t).label == *first) {
            NameTest::Name(first.clone())
        } else {
            NameTest::Any
        }
    }

    fn target_step(&self, axis: Axis) -> Step {
        Step::new(axis, self.name_test())
    }

    /// Attribute value shared by every target.
    fn shared_attr(&self, name: &str) -> Option<String> {
        let v = self.node(&self.targets[0]).attr(name)?.to_string();
        self.targets
            .iter()
            .all(|t| self.node(t).attr(name) == Some(v.as_str()))
            .then_some(v)
    }

    fn attribute_names(&self) -> Vec<String> {
        const PREFERRED: &[&str] = &["name", "class", "type", "role", "itemprop", "for", "title"];
        let node = self.node(&self.targets[0]);
        let mut names: Vec<String> = node
            .attributes
            .keys()
            .filter(|k| !matches!(k.as_str(), "id" | "style"))
            .cloned()
            .collect();
        names.sort_by_key(|k| {
            (
                PREFERRED.iter().position(|p| p == k).unwrap_or(PREFERRED.len()),
                k.clone(),
            )
        });
        names
    }

    /// 1-based position of `path` among its parent's children accepted by `step`.
    fn position_in(&self, path: &NodePath, step: &Step) -> Option<usize> {
        let parent = match path.parent() {
            Some(p) => p,
            None => return Some(1),
        };
        let siblings = &self.node(&parent).children;
        let idx = *path.steps().last()?;
        let mut pos = 0;
        for (i, sib) in siblings.iter().enumerate() {
            let ok = step.name.matches(&sib.label)
                && step.predicates.iter().all(|p| match p {
                    Predicate::Position(_) => true,
                    Predicate::AttrEquals { name, value } => sib.attr(name) == Some(value.as_str()),
                    Predicate::AttrMatches { name, pattern } => sib.attr(name).is_some_and(|v| pattern.is_match(v)),
                    Predicate::TextEquals(t) => sib.text == *t,
                });
            if ok {
                pos += 1;
            }
            if i == idx {
                return ok.then_some(pos);
            }
        }
        None
    }

    /// Pushes `prefix + step`; for a single target falls back to adding a
    /// position to the final step when the plain form over-matches.
    fn push_with_position(&mut self, prefix: XPathExpr, step: Step, tag: HeuristicTag) -> bool {
        let plain = prefix.clone().then([step.clone()]);
        if self.push(plain.clone(), tag) {
            return true;
        }
        let Some(target) = self.single().cloned() else {
            return false;
        };
        if !self.eval(&plain).contains(&target) {
            return false;
        }
        if step.axis == Axis::Child {
            if let Some(pos) = self.position_in(&target, &step) {
                return self.push(prefix.then([step.with(Predicate::Position(pos))]), tag);
            }
            return false;
        }
        // For a descendant step, the position is relative to the target's parent.
        let Some(pos) = self.position_in(&target, &step) else {
            return false;
        };
        self.push(prefix.then([step.with(Predicate::Position(pos))]), tag)
    }

    fn ancestors(&self, path: &NodePath) -> Vec<NodePath> {
        // Strict ancestors within the scope, outermost first; the context
        // itself is excluded.
        let min_depth = self.context.as_ref().map(|c| c.depth() + 1).unwrap_or(0);
        (min_depth..path.depth())
            .map(|d| NodePath(path.steps()[..d].to_vec()))
            .collect()
    }

    fn common_ancestors(&self) -> Vec<NodePath> {
        let mut common = self.ancestors(&self.targets[0]);
        for t in &self.targets[1..] {
            common.retain(|a| a.is_prefix_of(t) && a != t);
        }
        common
    }

    /// A step that selects `path` alone within the scope via id or one
    /// attribute, if such a step exists.
    fn unique_step(&self, path: &NodePath) -> Option<Step> {
        let node = self.node(path);
        let want = vec![path.clone()];
        if let Some(id) = node.id().filter(|s| !s.is_empty()) {
            let step = Step::descendant("*").with(Predicate::AttrEquals {
                name: "id".into(),
                value: id.into(),
            });
            if self.eval(&self.base().then([step.clone()])) == want {
                return Some(step);
            }
        }
        for (name, value) in &node.attributes {
            if name == "id" || name == "style" || value.is_empty() {
                continue;
            }
            let step = Step::descendant(&node.label).with(Predicate::AttrEquals {
                name: name.clone(),
                value: value.clone(),
            });
            if self.eval(&self.base().then([step.clone()])) == want {
                return Some(step);
            }
        }
        None
    }

    fn is_characteristic(&self, node: &DomNode) -> bool {
        self.characteristic.get(&char_key(node)).copied() == Some(1)
    }

    fn characteristic_step(&self, node: &DomNode, axis: Axis) -> Step {
        let step = Step::new(axis, NameTest::Name(node.label.clone()));
        if let Some(id) = node.id().filter(|s| !s.is_empty()) {
            step.with(Predicate::AttrEquals {
                name: "id".into(),
                value: id.into(),
            })
        } else if let Some(class) = node.class().filter(|s| !s.is_empty()) {
            step.with(Predicate::AttrEquals {
                name: "class".into(),
                value: class.into(),
            })
        } else {
            step
        }
    }

    /// Child-axis steps from `from` down to `to`, each with its position.
    fn indexed_chain(&self, from: Option<&NodePath>, to: &NodePath) -> Vec<Step> {
        let start = from.map(|f| f.depth()).unwrap_or(0);
        let mut steps = Vec::new();
        // The first step out of the document selects the root element.
        let first = if from.is_none() { 0 } else { start + 1 };
        for depth in first..=to.depth() {
            let path = NodePath(to.steps()[..depth].to_vec());
            let node = self.node(&path);
            let step = Step::child(&node.label);
            let pos = self.position_in(&path, &step).unwrap_or(1);
            steps.push(step.with(Predicate::Position(pos)));
        }
        steps
    }

    fn run(&mut self) {
        self.id_locators();
        self.attribute_locators();
        self.fragment_locators();
        self.structural_locators();
        self.anchor_locators();
        self.index_locator();
        self.text_locators();
    }

    fn id_locators(&mut self) {
        let Some(target) = self.single().cloned() else {
            return;
        };
        if let Some(id) = self.node(&target).id().filter(|s| !s.is_empty()) {
            let expr = self.base().then([Step::descendant("*").with(Predicate::AttrEquals {
                name: "id".into(),
                value: id.into(),
            })]);
            self.push(expr, HeuristicTag::Id);
        }
    }

    fn attribute_locators(&mut self) {
        let names = self.attribute_names();
        let mut own_steps = Vec::new();
        for name in &names {
            let Some(value) = self.shared_attr(name).filter(|v| !v.is_empty()) else {
                continue;
            };
            let step = self.target_step(Axis::Descendant).with(Predicate::AttrEquals {
                name: name.clone(),
                value,
            });
            if !self.push(self.base().then([step.clone()]), HeuristicTag::Attribute) {
                own_steps.push(step);
            }
        }
        // Ancestor attributes when the target's own attributes are not enough.
        own_steps.push(self.target_step(Axis::Descendant));
        let ancestors = self.common_ancestors();
        for anc in ancestors.iter().rev().take(6) {
            if let Some(anc_step) = self.unique_step(anc) {
                for step in &own_steps {
                    let expr = self.base().then([anc_step.clone(), step.clone()]);
                    self.push(expr, HeuristicTag::Attribute);
                }
                break;
            }
        }
    }

    fn fragment_locators(&mut self) {
        let node = self.node(&self.targets[0]);
        let mut names: Vec<String> = Vec::new();
        if self.single().is_some() && node.id().is_some() {
            names.push("id".into());
        }
        names.extend(self.attribute_names());
        for name in names {
            let values: Vec<&str> = self
                .targets
                .iter()
                .filter_map(|t| self.node(t).attr(&name))
                .collect();
            if values.len() != self.targets.len() {
                continue;
            }
            for source in fragment_patterns(values[0]) {
                let Ok(pattern) = Pattern::new(&source) else {
                    continue;
                };
                if !values.iter().all(|v| pattern.is_match(v)) {
                    continue;
                }
                let step = self.target_step(Axis::Descendant).with(Predicate::AttrMatches {
                    name: name.clone(),
                    pattern,
                });
                self.push(self.base().then([step]), HeuristicTag::AttributeFragment);
            }
        }
    }

    fn structural_locators(&mut self) {
        let tag = HeuristicTag::StructuralGeneralization;
        let rep = self.targets[0].clone();
        let target_node = self.node(&rep);
        if self.targets.len() == 1 && self.is_characteristic(target_node) {
            let step = self.characteristic_step(target_node, Axis::Descendant);
            self.push(self.base().then([step]), tag);
        }
        let ancestors = self.common_ancestors();
        let chars: Vec<NodePath> = ancestors
            .iter()
            .filter(|a| self.is_characteristic(self.node(a)))
            .cloned()
            .collect();
        if let Some(nearest) = chars.last() {
            let anc_step = self.characteristic_step(self.node(nearest), Axis::Descendant);
            let prefix = self.base().then([anc_step.clone()]);
            self.push_with_position(prefix.clone(), self.target_step(Axis::Descendant), tag);

            let all: Vec<Step> = chars
                .iter()
                .map(|c| self.characteristic_step(self.node(c), Axis::Descendant))
                .collect();
            if all.len() > 1 {
                self.push_with_position(self.base().then(all), self.target_step(Axis::Descendant), tag);
            }

            // Names-only child chain below the nearest characteristic ancestor.
            if self.targets.iter().all(|t| t.depth() == rep.depth()) {
                let mut chain = Vec::new();
                for depth in nearest.depth() + 1..rep.depth() {
                    let p = NodePath(rep.steps()[..depth].to_vec());
                    chain.push(Step::child(&self.node(&p).label));
                }
                let pre = prefix.clone().then(chain);
                if !self.push_with_position(pre, self.target_step(Axis::Child), tag) && self.single().is_some() {
                    let indexed = self.indexed_chain(Some(nearest), &rep);
                    self.push(prefix.then(indexed), tag);
                }
            }
        } else {
            // Characteristic element sequences: shortest tail of the label chain.
            let same_depth = self.targets.iter().all(|t| t.depth() == rep.depth());
            if same_depth {
                let labels: Vec<String> = ancestors.iter().map(|a| self.node(a).label.clone()).collect();
                for take in 1..=labels.len().min(4) {
                    let tail = &labels[labels.len() - take..];
                    let mut steps = Vec::new();
                    for (i, l) in tail.iter().enumerate() {
                        steps.push(if i == 0 { Step::descendant(l) } else { Step::child(l) });
                    }
                    if self.push_with_position(self.base().then(steps), self.target_step(Axis::Child), tag) {
                        break;
                    }
                }
            }
        }
    }

    fn anchor_locators(&mut self) {
        let common = self.common_ancestors();
        let anchors: Vec<AnchorPoint> = detect_anchors(self.tree)
            .into_iter()
            .filter(|a| common.contains(&a.path))
            .collect();
        let rep = self.targets[0].clone();
        for anchor in anchors {
            let Some(anchor_expr) = self.anchor_expr(&anchor.path) else {
                continue;
            };
            self.push_with_position(anchor_expr.clone(), self.target_step(Axis::Descendant), HeuristicTag::AnchorRelative);
            if self.single().is_some() {
                let chain = self.indexed_chain(Some(&anchor.path), &rep);
                self.push(anchor_expr.then(chain), HeuristicTag::AnchorRelative);
            }
        }
    }

    fn anchor_expr(&self, path: &NodePath) -> Option<XPathExpr> {
        if let Some(step) = self.unique_step(path) {
            return Some(self.base().then([step]));
        }
        Some(self.base().then(self.indexed_chain(self.context.as_ref(), path)))
    }

    fn index_locator(&mut self) {
        let chains: Vec<Vec<Step>> = self
            .targets
            .iter()
            .map(|t| self.indexed_chain(self.context.as_ref(), t))
            .collect();
        let len = chains[0].len();
        if chains.iter().any(|c| c.len() != len) {
            return;
        }
        let merged: Vec<Step> = (0..len)
            .map(|i| {
                let step = &chains[0][i];
                if chains.iter().all(|c| c[i] == *step) {
                    step.clone()
                } else {
                    let mut plain = step.clone();
                    plain.predicates.clear();
                    if chains.iter().any(|c| c[i].name != step.name) {
                        plain.name = NameTest::Any;
                    }
                    plain
                }
            })
            .collect();
        let expr = self.base().then(merged);
        self.indexed = Some(expr.clone());
        self.seen.insert(expr.to_string());
        self.entries.push((expr, HeuristicTag::IndexRelaxation));
    }

    fn text_locators(&mut self) {
        if !self.options.use_text {
            return;
        }
        let Some(target) = self.single().cloned() else {
            return;
        };
        let text = self.node(&target).text.clone();
        if text.is_empty() {
            return;
        }
        let step = self.target_step(Axis::Descendant).with(Predicate::TextEquals(text));
        self.push_with_position(self.base(), step, HeuristicTag::Textual);
    }

    fn finish(self) -> FallbackPlan {
        let mut entries = self.entries;
        entries.sort_by_key(|(_, tag)| *tag);
        let exact: Vec<bool> = entries
            .iter()
            .map(|(e, _)| evaluate_from(e, self.tree, &self.context.clone().unwrap_or_default()) == self.targets)
            .collect();
        let best_idx = exact.iter().position(|&x| x);
        let best = match best_idx {
            Some(i) => entries[i].0.clone(),
            None => self.indexed.clone().unwrap_or_else(|| entries[0].0.clone()),
        };
        let mut fallbacks = Vec::new();
        let mut offset: HashMap<HeuristicTag, u32> = HashMap::new();
        for (i, (expr, tag)) in entries.into_iter().enumerate() {
            let keep_as_fallback = Some(i) != best_idx || tag == HeuristicTag::IndexRelaxation;
            if !keep_as_fallback {
                continue;
            }
            let k = offset.entry(tag).or_default();
            if *k >= 10 {
                continue;
            }
            fallbacks.push(PlanEntry {
                expr,
                tag,
                priority: tag.base_priority() + *k,
            });
            *k += 1;
        }
        FallbackPlan { best, fallbacks }
    }
}

/// Regular expressions over an attribute value that survive renumbering and
/// partial edits: digits generalized, the stable prefix, the stable suffix,
/// and each whitespace-separated token.
fn fragment_patterns(value: &str) -> Vec<String> {
    let mut out = Vec::new();
    if value.is_empty() {
        return out;
    }
    if value.chars().any(|c| c.is_ascii_digit()) {
        let mut re = String::from("^");
        let mut digits = false;
        for c in value.chars() {
            if c.is_ascii_digit() {
                if !digits {
                    re.push_str("\\d+");
                }
                digits = true;
            } else {
                digits = false;
                re.push_str(&regex::escape(&c.to_string()));
            }
        }
        re.push('$');
        out.push(re);
    }
    let is_sep = |c: char| c.is_ascii_digit() || matches!(c, '-' | '_' | ' ' | ':' | '/' | '.');
    if let Some(cut) = value.find(is_sep) {
        let prefix = &value[..cut];
        if prefix.len() >= 3 {
            out.push(format!("^{}", regex::escape(prefix)));
        }
    }
    if let Some(cut) = value.rfind(is_sep) {
        let suffix = &value[cut + value[cut..].chars().next().map_or(1, char::len_utf8)..];
        if suffix.len() >= 3 {
            out.push(format!("{}$", regex::escape(suffix)));
        }
    }
    let tokens: Vec<&str> = value.split_ascii_whitespace().collect();
    if tokens.len() > 1 {
        for t in tokens {
            out.push(format!("(^|\\s){}(\\s|$)", regex::escape(t)));
        }
    }
    out.dedup();
    out
}

/// Replays a plan: `best`, then each fallback by priority; index-relaxation
/// entries are retried with positions stripped right to left.
pub fn apply_plan_with(
    plan: &FallbackPlan,
    tree: &DomTree,
    context: &NodePath,
    accept: impl Fn(&[NodePath]) -> bool,
) -> Result<(Vec<NodePath>, Used), XPathError> {
    let best = evaluate_from(&plan.best, tree, context);
    if accept(&best) {
        return Ok((best, Used::Best));
    }
    for entry in &plan.fallbacks {
        let variants = if entry.tag == HeuristicTag::IndexRelaxation {
            relaxation_variants(&entry.expr)
        } else {
            vec![entry.expr.clone()]
        };
        for v in variants {
            let found = evaluate_from(&v, tree, context);
            if accept(&found) {
                return Ok((found, Used::Fallback(entry.tag)));
            }
        }
    }
    Err(XPathError::PlanExhausted)
}

/// [`apply_plan_with`] accepting the first result set that satisfies every
/// constraint (datatype checks use each node's own text).
pub fn apply_plan(
    plan: &FallbackPlan,
    tree: &DomTree,
    context: &NodePath,
    constraints: &[IntegrityConstraint],
) -> Result<(Vec<NodePath>, Used), XPathError> {
    apply_plan_with(plan, tree, context, |paths| {
        let results: Vec<(NodePath, String)> = paths
            .iter()
            .map(|p| (p.clone(), tree.get(p).map(extracted_text).unwrap_or_default()))
            .collect();
        validate_results(&results, constraints).is_ok()
    })
}

/// Locator for an anchor element itself, preferring id and attributes.
pub fn anchor_locator(tree: &DomTree, anchor: &AnchorPoint) -> XPathExpr {
    let gen = Generator::new(tree, None, vec![anchor.path.clone()], PlanOptions::default());
    gen.anchor_expr(&anchor.path)
        .expect("anchor paths resolve")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse_html;
    use crate::wrapper::IntegrityConstraint;

    fn plan_for(html: &str, target: &[usize]) -> (DomTree, FallbackPlan) {
        let t = parse_html(html, "t");
        let p = generate_plan(&t, &NodePath(target.to_vec()), PlanOptions::default()).unwrap();
        (t, p)
    }

    #[test]
    fn unique_id_wins() {
        let (t, p) = plan_for(r#"<body><div><span id="price">3</span><span>4</span></div></body>"#, &[0, 0, 0]);
        assert_eq!(p.best.to_string(), "//*[@id='price']");
        assert_eq!(evaluate_from(&p.best, &t, &NodePath::root()), vec![NodePath(vec![0, 0, 0])]);
        assert!(p.priorities_increasing());
    }

    #[test]
    fn structural_path_for_plain_target() {
        let (t, p) = plan_for("<html><body><div><span>x</span></div></body></html>", &[0, 0, 0]);
        let target = vec![NodePath(vec![0, 0, 0])];
        assert_eq!(evaluate_from(&p.best, &t, &NodePath::root()), target);
        assert!(p.best.steps.iter().all(|s| !s.has_position()));
        assert!(p
            .fallbacks
            .iter()
            .any(|e| e.tag == HeuristicTag::IndexRelaxation && e.expr.to_string() == "/html[1]/body[1]/div[1]/span[1]"));
        let structural = p.fallbacks.iter().any(|e| e.tag == HeuristicTag::StructuralGeneralization);
        assert!(structural || !p.best.to_string().contains('['));
    }

    #[test]
    fn identical_siblings_force_an_index() {
        let (t, p) = plan_for("<body><ul><li>a</li><li>a</li></ul></body>", &[0, 0, 1]);
        assert!(p.best.steps.iter().any(Step::has_position));
        assert_eq!(evaluate_from(&p.best, &t, &NodePath::root()), vec![NodePath(vec![0, 0, 1])]);
        let relax = p
            .fallbacks
            .iter()
            .find(|e| e.tag == HeuristicTag::IndexRelaxation)
            .expect("index relaxation fallback");
        let variants = relaxation_variants(&relax.expr);
        assert!(variants.last().unwrap().steps.iter().all(|s| !s.has_position()));
    }

    #[test]
    fn apply_identity_and_fallbacks() {
        let html = r#"<body><div id="box" class="price-box"><b>1</b></div><div class="other"></div></body>"#;
        let (t, p) = plan_for(html, &[0, 0]);
        let one = [IntegrityConstraint::exactly_one()];
        let (found, used) = apply_plan(&p, &t, &NodePath::root(), &one).unwrap();
        assert_eq!(used, Used::Best);
        assert_eq!(found, vec![NodePath(vec![0, 0])]);

        let renamed = parse_html(
            r#"<body><div data-id="box" class="price-box"><b>1</b></div><div class="other"></div></body>"#,
            "m",
        );
        let (found, used) = apply_plan(&p, &renamed, &NodePath::root(), &one).unwrap();
        assert_eq!(used, Used::Fallback(HeuristicTag::Attribute));
        assert_eq!(found, vec![NodePath(vec![0, 0])]);

        let gone = parse_html("<body><p>nothing</p></body>", "g");
        assert_eq!(
            apply_plan(&p, &gone, &NodePath::root(), &one),
            Err(XPathError::PlanExhausted)
        );
    }

    #[test]
    fn fragment_patterns_cover_digits_prefix_tokens() {
        let f = fragment_patterns("item-1234");
        assert!(f.contains(&"^item\\-\\d+$".to_string()));
        assert!(f.contains(&"^item".to_string()));
        let f = fragment_patterns("btn primary");
        assert!(f.contains(&"(^|\\s)primary(\\s|$)".to_string()));
        assert!(fragment_patterns("").is_empty());
    }

    #[test]
    fn fragment_locator_when_values_are_not_unique() {
        let html = r#"<body><p class="row row-7">a</p><p class="row">b</p><p class="row">c</p></body>"#;
        let t = parse_html(html, "t");
        let p = generate_plan(&t, &NodePath(vec![0, 0]), PlanOptions::default()).unwrap();
        assert_eq!(p.best.to_string(), "//p[@class='row row-7']");
        assert!(p.fallbacks.iter().any(|e| e.tag == HeuristicTag::AttributeFragment));
    }

    #[test]
    fn anchors_tables_main_ids() {
        let t = parse_html(
            "<body><table><tr><td><table><tr><td>x</td></tr></table></td></tr></table><div id='a'>long text here</div></body>",
            "t",
        );
        let anchors = detect_anchors(&t);
        let tables: Vec<_> = anchors.iter().filter(|a| a.kind == AnchorKind::OutermostTable).collect();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].path, NodePath(vec![0, 0]));
        assert!(anchors.iter().any(|a| a.kind == AnchorKind::IdAnchor && a.path == NodePath(vec![0, 1])));
        let main: Vec<_> = anchors.iter().filter(|a| a.kind == AnchorKind::MainContent).collect();
        assert_eq!(main.len(), 1);
        assert_eq!(main[0].path, NodePath(vec![0, 1]));

        let plain = parse_html("<body><p>a</p><p>b</p></body>", "p");
        let anchors = detect_anchors(&plain);
        assert_eq!(anchors.len(), 1);
        assert_eq!(anchors[0].kind, AnchorKind::MainContent);
    }

    #[test]
    fn relative_plans_for_sets() {
        let html = r#"<body><ul id="l"><li><b>1</b></li><li><b>2</b></li><li><b>3</b></li></ul><ul><li>x</li></ul></body>"#;
        let t = parse_html(html, "t");
        let ctx = NodePath(vec![0, 0]);
        let targets: Vec<NodePath> = (0..3).map(|i| ctx.child(i)).collect();
        let p = generate_plan_within(&t, Some(&ctx), &targets, PlanOptions::default()).unwrap();
        assert!(p.is_relative());
        assert_eq!(evaluate_from(&p.best, &t, &ctx), targets);

        let price = generate_plan_within(&t, Some(&targets[1]), &[targets[1].child(0)], PlanOptions::default()).unwrap();
        assert_eq!(evaluate_from(&price.best, &t, &targets[2]), vec![targets[2].child(0)]);
    }

    #[test]
    fn text_locator_only_when_enabled() {
        let html = "<body><span>a</span><span>Total</span></body>";
        let t = parse_html(html, "t");
        let target = NodePath(vec![0, 1]);
        let off = generate_plan(&t, &target, PlanOptions::default()).unwrap();
        assert!(off.fallbacks.iter().all(|e| e.tag != HeuristicTag::Textual));
        let on = generate_plan(&t, &target, PlanOptions { use_text: true }).unwrap();
        assert!(on.fallbacks.iter().any(|e| e.tag == HeuristicTag::Textual));
    }

    #[test]
    fn absorb_keeps_best_and_groups() {
        let (_, a) = plan_for(r#"<body><div><span class="p">3</span><span>4</span></div></body>"#, &[0, 0, 0]);
        let (_, b) = plan_for(r#"<body><div id="x"><b/><span>3</span></div></body>"#, &[0, 0, 1]);
        let merged = a.absorb(&b);
        assert_eq!(merged.best, a.best);
        assert!(merged.priorities_increasing());
        assert!(merged.fallbacks.iter().any(|e| e.expr == b.best));
        assert!(merged.fallbacks.iter().all(|e| e.expr != a.best));
        assert_eq!(classify_locator(&XPathExpr::parse("//*[@id='x']/span[2]").unwrap()), HeuristicTag::Id);
        assert_eq!(
            classify_locator(&XPathExpr::parse("/html/body/div").unwrap()),
            HeuristicTag::StructuralGeneralization
        );
    }

    #[test]
    fn bad_target_is_an_error() {
        let t = parse_html("<p/>", "t");
        assert!(matches!(
            generate_plan(&t, &NodePath(vec![3]), PlanOptions::default()),
            Err(XPathError::Path(_))
        ));
    }
}
