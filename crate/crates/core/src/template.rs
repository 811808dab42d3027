//! Tree templates: a small regular tree grammar induced from example
//! subtrees, with occurrence indicators and skippable wrapper levels.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dom::{DomNode, DomTree, NodePath};
use crate::treematch::{stm_by, wtm_computation_by, Labeler, OrderedTree};

#[derive(Debug, Error, PartialEq)]
#[error("root labels differ: {left:?} vs {right:?}")]
pub struct GeneralizeError {
    pub left: String,
    pub right: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occurrence {
    ExactlyOne,
    Optional,
    OneOrMore,
    ZeroOrMore,
}

impl Occurrence {
    fn from_bounds(required: bool, repeated: bool) -> Self {
        match (required, repeated) {
            (true, false) => Occurrence::ExactlyOne,
            (false, false) => Occurrence::Optional,
            (true, true) => Occurrence::OneOrMore,
            (false, true) => Occurrence::ZeroOrMore,
        }
    }

    pub fn required(self) -> bool {
        matches!(self, Occurrence::ExactlyOne | Occurrence::OneOrMore)
    }

    pub fn repeated(self) -> bool {
        matches!(self, Occurrence::OneOrMore | Occurrence::ZeroOrMore)
    }

    /// The tightest indicator admitting everything either one admits.
    pub fn join(self, other: Occurrence) -> Occurrence {
        Occurrence::from_bounds(self.required() && other.required(), self.repeated() || other.repeated())
    }

    pub fn make_optional(self) -> Occurrence {
        Occurrence::from_bounds(false, self.repeated())
    }

    /// True when `self` admits every count `other` admits.
    pub fn covers(self, other: Occurrence) -> bool {
        self.join(other) == self
    }
}

impl fmt::Display for Occurrence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Occurrence::ExactlyOne => "",
            Occurrence::Optional => "?",
            Occurrence::OneOrMore => "+",
            Occurrence::ZeroOrMore => "*",
        })
    }
}

/// A node label under the rule's labeler, or `*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LabelMatcher {
    Any,
    Exact(String),
}

impl LabelMatcher {
    pub fn matches(&self, label: &str) -> bool {
        match self {
            LabelMatcher::Any => true,
            LabelMatcher::Exact(l) => l == label,
        }
    }

    fn compatible(&self, other: &LabelMatcher) -> bool {
        match (self, other) {
            (LabelMatcher::Exact(a), LabelMatcher::Exact(b)) => a == b,
            _ => true,
        }
    }

    fn join(&self, other: &LabelMatcher) -> LabelMatcher {
        if self == other {
            self.clone()
        } else {
            LabelMatcher::Any
        }
    }
}

impl fmt::Display for LabelMatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelMatcher::Any => f.write_str("*"),
            LabelMatcher::Exact(l) => f.write_str(l),
        }
    }
}

impl Serialize for LabelMatcher {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LabelMatcher {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s == "*" {
            LabelMatcher::Any
        } else {
            LabelMatcher::Exact(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeTemplate {
    pub label: LabelMatcher,
    pub occurrence: Occurrence,
    #[serde(default)]
    pub depth_optional: bool,
    #[serde(default)]
    pub children: Vec<TreeTemplate>,
}

impl OrderedTree for TreeTemplate {
    fn kids(&self) -> &[TreeTemplate] {
        &self.children
    }
}

impl fmt::Display for TreeTemplate {
    /// Compact form, e.g. `ul(li+(a,span?))`; depth-optional levels are
    /// written in brackets.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.depth_optional {
            f.write_str("[")?;
        }
        write!(f, "{}{}", self.label, self.occurrence)?;
        if !self.children.is_empty() {
            f.write_str("(")?;
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                c.fmt(f)?;
            }
            f.write_str(")")?;
        }
        if self.depth_optional {
            f.write_str("]")?;
        }
        Ok(())
    }
}

impl TreeTemplate {
    /// The template accepting exactly `node`'s shape.
    pub fn exact(node: &DomNode, labeler: &Labeler) -> Self {
        TreeTemplate {
            label: LabelMatcher::Exact(labeler.label(node)),
            occurrence: Occurrence::ExactlyOne,
            depth_optional: false,
            children: node.children.iter().map(|c| TreeTemplate::exact(c, labeler)).collect(),
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TreeTemplate::size).sum::<usize>()
    }

    /// Whether `node` is accepted with `self` as the root pattern.
    pub fn accepts(&self, node: &DomNode, labeler: &Labeler) -> bool {
        Matcher::new(labeler).node_ok(self, node)
    }

    /// Root occurrence is `exactly_one` and every depth-optional level has
    /// children.
    pub fn is_well_formed(&self) -> bool {
        fn inner(t: &TreeTemplate) -> bool {
            (!t.depth_optional || !t.children.is_empty()) && t.children.iter().all(inner)
        }
        self.occurrence == Occurrence::ExactlyOne && !self.depth_optional && inner(self)
    }
}

/// A template accepting both trees.
pub fn generalize(stored: &DomNode, matched: &DomNode, labeler: &Labeler) -> Result<TreeTemplate, GeneralizeError> {
    let a = TreeTemplate::exact(stored, labeler);
    let b = TreeTemplate::exact(matched, labeler);
    if a.label != b.label {
        return Err(GeneralizeError {
            left: a.label.to_string(),
            right: b.label.to_string(),
        });
    }
    Ok(merge(&a, &b))
}

/// Widens `template` just enough to accept `new_tree` as well. Returns the
/// template unchanged when it already accepts the tree.
pub fn refine(template: &TreeTemplate, new_tree: &DomNode, labeler: &Labeler) -> Result<TreeTemplate, GeneralizeError> {
    let label = labeler.label(new_tree);
    if !template.label.matches(&label) {
        return Err(GeneralizeError {
            left: template.label.to_string(),
            right: label,
        });
    }
    if template.accepts(new_tree, labeler) {
        return Ok(template.clone());
    }
    Ok(merge(template, &TreeTemplate::exact(new_tree, labeler)))
}

/// Roots of every subtree of `tree` accepted by `template`, in document order.
pub fn template_match(template: &TreeTemplate, tree: &DomTree, labeler: &Labeler) -> Vec<NodePath> {
    template_match_within(template, tree, &NodePath::root(), labeler)
}

/// Like [`template_match`] but restricted to the subtree at `scope`.
pub fn template_match_within(
    template: &TreeTemplate,
    tree: &DomTree,
    scope: &NodePath,
    labeler: &Labeler,
) -> Vec<NodePath> {
    let Some(base) = tree.get(scope) else {
        return Vec::new();
    };
    let matcher = Matcher::new(labeler);
    base.walk()
        .into_iter()
        .filter(|(_, n)| matcher.node_ok(template, n))
        .map(|(p, _)| scope.join(&p))
        .collect()
}

/// Draws a random tree accepted by `template`. Repetitions are capped at
/// `max_repeat`; wildcard labels become `span`. Labels are turned back into
/// element names and id/class attributes according to `labeler`.
pub fn sample<R: Rng>(template: &TreeTemplate, labeler: &Labeler, max_repeat: usize, rng: &mut R) -> DomNode {
    let mut node = node_for_label(&template.label, labeler);
    node.children = sample_seq(&template.children, labeler, max_repeat, rng);
    node
}

fn sample_seq<R: Rng>(patterns: &[TreeTemplate], labeler: &Labeler, max_repeat: usize, rng: &mut R) -> Vec<DomNode> {
    let mut out = Vec::new();
    for p in patterns {
        let lo = usize::from(p.occurrence.required());
        let hi = if p.occurrence.repeated() { max_repeat.max(lo) } else { 1 };
        let count = rng.gen_range(lo..=hi);
        for _ in 0..count {
            if p.depth_optional && rng.gen_bool(0.5) {
                out.extend(sample_seq(&p.children, labeler, max_repeat, rng));
            } else {
                out.push(sample(p, labeler, max_repeat, rng));
            }
        }
    }
    out
}

fn node_for_label(label: &LabelMatcher, labeler: &Labeler) -> DomNode {
    let text = match label {
        LabelMatcher::Any => return DomNode::element("span"),
        LabelMatcher::Exact(l) => l,
    };
    let mut parts = text.split('|');
    let mut next = |on: bool| if on { parts.next().unwrap_or("") } else { "" };
    let name = next(labeler.use_element_name);
    let id = next(labeler.use_id_attribute);
    let class = next(labeler.use_class_attribute);
    let mut node = DomNode::element(if labeler.use_element_name { name } else { "div" });
    if labeler.use_id_attribute && !id.is_empty() {
        node = node.with_attr("id", id);
    }
    if labeler.use_class_attribute && !class.is_empty() {
        node = node.with_attr("class", class);
    }
    node
}

/// Acceptance check with memoization keyed on (pattern, node) addresses.
struct Matcher<'l> {
    labeler: &'l Labeler,
    memo: RefCell<HashMap<(usize, usize), bool>>,
}

impl<'l> Matcher<'l> {
    fn new(labeler: &'l Labeler) -> Self {
        Matcher {
            labeler,
            memo: RefCell::new(HashMap::new()),
        }
    }

    fn node_ok(&self, p: &TreeTemplate, node: &DomNode) -> bool {
        let key = (p as *const _ as usize, node as *const _ as usize);
        if let Some(&v) = self.memo.borrow().get(&key) {
            return v;
        }
        let ok = p.label.matches(&self.labeler.label(node))
            && self
                .seq_ends(&p.children, &node.children, BTreeSet::from([0]))
                .contains(&node.children.len());
        self.memo.borrow_mut().insert(key, ok);
        ok
    }

    /// Every position reachable after parsing `patterns` from any start.
    fn seq_ends(&self, patterns: &[TreeTemplate], nodes: &[DomNode], start: BTreeSet<usize>) -> BTreeSet<usize> {
        let mut cur = start;
        for p in patterns {
            if cur.is_empty() {
                break;
            }
            cur = self.step(p, nodes, cur);
        }
        cur
    }

    fn step(&self, p: &TreeTemplate, nodes: &[DomNode], cur: BTreeSet<usize>) -> BTreeSet<usize> {
        let once = |from: &BTreeSet<usize>| {
            let mut out = BTreeSet::new();
            for &pos in from {
                if pos < nodes.len() && self.node_ok(p, &nodes[pos]) {
                    out.insert(pos + 1);
                }
                if p.depth_optional {
                    out.extend(self.seq_ends(&p.children, nodes, BTreeSet::from([pos])));
                }
            }
            out
        };
        let mut out = once(&cur);
        if p.occurrence.repeated() {
            let mut frontier = out.clone();
            loop {
                let next: BTreeSet<usize> = once(&frontier).difference(&out).copied().collect();
                if next.is_empty() {
                    break;
                }
                out.extend(next.iter().copied());
                frontier = next;
            }
        }
        if !p.occurrence.required() {
            out.extend(cur);
        }
        out
    }
}

fn same(a: &TreeTemplate, b: &TreeTemplate) -> bool {
    a.label.compatible(&b.label)
}

/// Generalization of two templates with compatible root labels.
fn merge(a: &TreeTemplate, b: &TreeTemplate) -> TreeTemplate {
    let children = merge_children(&a.children, &b.children);
    TreeTemplate {
        label: a.label.join(&b.label),
        occurrence: a.occurrence.join(b.occurrence),
        depth_optional: (a.depth_optional || b.depth_optional) && !children.is_empty(),
        children,
    }
}

/// One item of a merged child sequence before run collapsing.
struct Item {
    template: TreeTemplate,
    aligned: bool,
    /// Derived from the children of a spliced wrapper level.
    in_block: bool,
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

struct Splice {
    side: Side,
    index: usize,
}

fn widen(t: &TreeTemplate) -> TreeTemplate {
    TreeTemplate {
        occurrence: t.occurrence.make_optional(),
        ..t.clone()
    }
}

fn align(pa: &[TreeTemplate], pb: &[TreeTemplate]) -> (Vec<(usize, usize)>, usize) {
    let wrap = |c: &[TreeTemplate]| TreeTemplate {
        label: LabelMatcher::Any,
        occurrence: Occurrence::ExactlyOne,
        depth_optional: false,
        children: c.to_vec(),
    };
    let comp = wtm_computation_by(&wrap(pa), &wrap(pb), &same);
    let pairs = comp.alignment();
    let coverage = pairs.iter().map(|&(i, j)| stm_by(&pa[i], &pb[j], &same)).sum();
    (pairs, coverage)
}

fn spliced(seq: &[TreeTemplate], index: usize) -> Vec<TreeTemplate> {
    let mut out = seq[..index].to_vec();
    out.extend(seq[index].children.iter().cloned());
    out.extend(seq[index + 1..].iter().cloned());
    out
}

fn merge_children(pa: &[TreeTemplate], pb: &[TreeTemplate]) -> Vec<TreeTemplate> {
    let (mut pairs, mut best) = align(pa, pb);
    let mut splice: Option<Splice> = None;
    // A single wrapper level present on one side only: try splicing each
    // candidate's children into its parent's sequence.
    for (side, seq) in [(Side::Left, pa), (Side::Right, pb)] {
        for (index, t) in seq.iter().enumerate() {
            if t.children.is_empty() {
                continue;
            }
            let s = spliced(seq, index);
            let (p, cov) = match side {
                Side::Left => align(&s, pb),
                Side::Right => align(pa, &s),
            };
            if cov > best {
                best = cov;
                pairs = p;
                splice = Some(Splice { side, index });
            }
        }
    }

    let (sa, sb, block) = match &splice {
        None => (pa.to_vec(), pb.to_vec(), None),
        Some(s) => {
            let seq = match s.side {
                Side::Left => pa,
                Side::Right => pb,
            };
            let range = s.index..s.index + seq[s.index].children.len();
            match s.side {
                Side::Left => (spliced(pa, s.index), pb.to_vec(), Some((Side::Left, range))),
                Side::Right => (pa.to_vec(), spliced(pb, s.index), Some((Side::Right, range))),
            }
        }
    };
    let in_block = |side: Side, idx: usize| match (&block, side) {
        (Some((Side::Left, r)), Side::Left) | (Some((Side::Right, r)), Side::Right) => r.contains(&idx),
        _ => false,
    };

    let mut items = Vec::new();
    let (mut i, mut j) = (0, 0);
    let push_gap = |items: &mut Vec<Item>, i_to: usize, j_to: usize, i: &mut usize, j: &mut usize| {
        while *i < i_to {
            items.push(Item {
                template: widen(&sa[*i]),
                aligned: false,
                in_block: in_block(Side::Left, *i),
            });
            *i += 1;
        }
        while *j < j_to {
            items.push(Item {
                template: widen(&sb[*j]),
                aligned: false,
                in_block: in_block(Side::Right, *j),
            });
            *j += 1;
        }
    };
    for &(ai, bj) in &pairs {
        push_gap(&mut items, ai, bj, &mut i, &mut j);
        items.push(Item {
            template: merge(&sa[ai], &sb[bj]),
            aligned: true,
            in_block: in_block(Side::Left, ai) || in_block(Side::Right, bj),
        });
        i = ai + 1;
        j = bj + 1;
    }
    push_gap(&mut items, sa.len(), sb.len(), &mut i, &mut j);

    let Some(s) = splice else {
        return collapse(items);
    };
    let wrapper = match s.side {
        Side::Left => &pa[s.index],
        Side::Right => &pb[s.index],
    };
    let first = items.iter().position(|it| it.in_block);
    let last = items.iter().rposition(|it| it.in_block);
    let (Some(first), Some(last)) = (first, last) else {
        return collapse(items);
    };
    let after = items.split_off(last + 1);
    let inner = items.split_off(first);
    let inner = collapse(inner);
    let mut out = collapse(items);
    out.push(TreeTemplate {
        label: wrapper.label.clone(),
        occurrence: wrapper.occurrence,
        depth_optional: true,
        children: inner,
    });
    out.extend(collapse(after));
    out
}

/// Runs of two or more same-label siblings collapse into one repeated
/// pattern when at least one member is present on one side only.
fn collapse(items: Vec<Item>) -> Vec<TreeTemplate> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < items.len() {
        let head = &items[k].template;
        let mut end = k + 1;
        if !head.depth_optional {
            while end < items.len()
                && !items[end].template.depth_optional
                && items[end].template.label == head.label
            {
                end += 1;
            }
        }
        let run = &items[k..end];
        if run.len() >= 2 && run.iter().any(|it| !it.aligned) {
            let required = run.iter().any(|it| it.template.occurrence.required());
            let mut folded = run[0].template.clone();
            for it in &run[1..] {
                folded = merge(&folded, &it.template);
            }
            folded.occurrence = Occurrence::from_bounds(required, true);
            out.push(folded);
        } else {
            out.extend(run.iter().map(|it| it.template.clone()));
        }
        k = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse_html;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn n(label: &str, kids: Vec<DomNode>) -> DomNode {
        DomNode::element(label).with_children(kids)
    }

    fn l(label: &str) -> DomNode {
        DomNode::element(label)
    }

    fn lab() -> Labeler {
        Labeler::element_name()
    }

    #[test]
    fn identity_is_exact() {
        let t = n("ul", vec![l("li"), l("li"), n("p", vec![l("b")])]);
        let g = generalize(&t, &t, &lab()).unwrap();
        assert_eq!(g, TreeTemplate::exact(&t, &lab()));
        assert_eq!(g.to_string(), "ul(li,li,p(b))");
    }

    #[test]
    fn missing_child_becomes_optional() {
        let g = generalize(&n("a", vec![l("b"), l("c")]), &n("a", vec![l("b")]), &lab()).unwrap();
        assert_eq!(g.to_string(), "a(b,c?)");
    }

    #[test]
    fn repeated_siblings_collapse() {
        let three = n("ul", vec![l("li"), l("li"), l("li")]);
        let two = n("ul", vec![l("li"), l("li")]);
        let g = generalize(&three, &two, &lab()).unwrap();
        assert_eq!(g.to_string(), "ul(li+)");
        let five = n("ul", vec![l("li"); 5]);
        assert!(g.accepts(&five, &lab()));
    }

    #[test]
    fn root_mismatch() {
        assert!(generalize(&l("a"), &l("b"), &lab()).is_err());
        let t = TreeTemplate::exact(&l("a"), &lab());
        assert!(refine(&t, &l("b"), &lab()).is_err());
    }

    #[test]
    fn inserted_wrapper_level_is_depth_optional() {
        let before = n("div", vec![l("h2"), l("p"), l("span")]);
        let after = n("div", vec![n("section", vec![l("h2"), l("p")]), l("span")]);
        let g = generalize(&before, &after, &lab()).unwrap();
        assert_eq!(g.to_string(), "div([section(h2,p)],span)");
        assert!(g.accepts(&before, &lab()));
        assert!(g.accepts(&after, &lab()));
        assert!(g.is_well_formed());
    }

    #[test]
    fn matching_requires_full_consumption() {
        let t = generalize(&n("a", vec![l("b"), l("c")]), &n("a", vec![l("b")]), &lab()).unwrap();
        assert!(!t.accepts(&n("a", vec![l("b"), l("c"), l("d")]), &lab()));
        assert!(t.accepts(&n("a", vec![l("b")]), &lab()));
    }

    #[test]
    fn refine_widens() {
        let t = TreeTemplate::exact(&n("a", vec![l("b")]), &lab());
        let r = refine(&t, &n("a", vec![l("b"), l("b")]), &lab()).unwrap();
        assert_eq!(r.to_string(), "a(b+)");

        let opt = generalize(&n("a", vec![l("b")]), &n("a", vec![]), &lab()).unwrap();
        assert_eq!(opt.to_string(), "a(b?)");
        assert_eq!(refine(&opt, &n("a", vec![]), &lab()).unwrap(), opt);
    }

    #[test]
    fn template_match_in_document_order() {
        let page = parse_html("<ul><li/><li/></ul><div><ul><li/><li/><li/><li/><li/></ul></div>", "t");
        let t = generalize(&n("ul", vec![l("li"); 3]), &n("ul", vec![l("li"); 2]), &lab()).unwrap();
        assert_eq!(template_match(&t, &page, &lab()), vec![NodePath(vec![0]), NodePath(vec![1, 0])]);
    }

    #[test]
    fn serde_shape() {
        let t = generalize(&n("a", vec![l("b"), l("c")]), &n("a", vec![l("b")]), &lab()).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["label"], "a");
        assert_eq!(v["occurrence"], "exactly_one");
        assert_eq!(v["depth_optional"], false);
        assert_eq!(v["children"][1]["occurrence"], "optional");
        let back: TreeTemplate = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn samples_are_accepted() {
        let before = n("div", vec![l("h2"), n("ul", vec![l("li"); 3]), l("span")]);
        let after = n("div", vec![n("section", vec![l("h2"), n("ul", vec![l("li"); 2])])]);
        let g = generalize(&before, &after, &lab()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = sample(&g, &lab(), 3, &mut rng);
            assert!(g.accepts(&s, &lab()), "{g} rejects {}", TreeTemplate::exact(&s, &lab()));
        }
    }

    #[test]
    fn labels_follow_labeler() {
        let lab = Labeler::new(true, false, true).unwrap();
        let a = l("li").with_attr("class", "x");
        let b = l("li").with_attr("class", "y");
        assert!(generalize(&a, &b, &lab).is_err());
        let t = TreeTemplate::exact(&a, &lab);
        assert_eq!(t.to_string(), "li|x");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(t.accepts(&sample(&t, &lab, 2, &mut rng), &lab));
    }
}
