#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rewrap::dom::{DomNode, DomTree};
use serde_json::Value;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random element tree with labels drawn from `labels`, at most
/// `max_depth` levels below the root, `max_branch` children per node and
/// roughly `budget` nodes.
pub fn random_tree(rng: &mut impl Rng, labels: &[&str], max_depth: usize, max_branch: usize, budget: usize) -> DomNode {
    let mut left = budget.max(1) - 1;
    let root = grow(rng, labels, 0, max_depth, max_branch, &mut left);
    DomTree::new(root, "random").root
}

fn grow(rng: &mut impl Rng, labels: &[&str], depth: usize, max_depth: usize, max_branch: usize, left: &mut usize) -> DomNode {
    let label = labels[rng.gen_range(0..labels.len())];
    let mut node = DomNode::element(label);
    if depth >= max_depth {
        return node;
    }
    let n = rng.gen_range(0..=max_branch).min(*left);
    *left -= n;
    // Children are created first so later siblings can still receive nodes.
    let mut kids: Vec<DomNode> = (0..n).map(|_| DomNode::element(labels[rng.gen_range(0..labels.len())])).collect();
    for kid in kids.iter_mut() {
        if *left == 0 || depth + 1 >= max_depth {
            break;
        }
        if rng.gen_bool(0.6) {
            let grown = grow(rng, labels, depth + 1, max_depth, max_branch, left);
            *kid = DomNode::element(kid.label.clone()).with_children(grown.children);
        }
    }
    node.children = kids;
    node
}

// ---------------------------------------------------------------------------
// Brute-force top-down mapping enumerator.
//
// A mapping is a set of node pairs that is one-to-one, label-preserving,
// closed under parents (a mapped non-root node has its parent mapped to the
// image's parent; roots map only to roots) and keeps document order. Every
// such mapping is enumerated; the largest size is returned.

struct Flat {
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
}

fn flatten(root: &DomNode) -> Flat {
    let mut f = Flat {
        labels: Vec::new(),
        parent: Vec::new(),
    };
    fn go(n: &DomNode, parent: Option<usize>, f: &mut Flat) {
        let me = f.labels.len();
        f.labels.push(n.label.clone());
        f.parent.push(parent);
        for c in &n.children {
            go(c, Some(me), f);
        }
    }
    go(root, None, &mut f);
    f
}

pub fn brute_force_stm(a: &DomNode, b: &DomNode) -> usize {
    let fa = flatten(a);
    let fb = flatten(b);
    let mut image: Vec<Option<usize>> = vec![None; fa.labels.len()];
    let mut used = vec![false; fb.labels.len()];
    let mut best = 0;
    search(&fa, &fb, 0, &mut image, &mut used, &mut best);
    best
}

fn search(fa: &Flat, fb: &Flat, v: usize, image: &mut Vec<Option<usize>>, used: &mut Vec<bool>, best: &mut usize) {
    if v == fa.labels.len() {
        if order_preserved(image) {
            *best = (*best).max(image.iter().flatten().count());
        }
        return;
    }
    image[v] = None;
    search(fa, fb, v + 1, image, used, best);
    for w in 0..fb.labels.len() {
        if used[w] || fa.labels[v] != fb.labels[w] {
            continue;
        }
        let parent_ok = match (fa.parent[v], fb.parent[w]) {
            (None, None) => true,
            (Some(pv), Some(pw)) => image[pv] == Some(pw),
            _ => false,
        };
        if !parent_ok {
            continue;
        }
        image[v] = Some(w);
        used[w] = true;
        search(fa, fb, v + 1, image, used, best);
        used[w] = false;
        image[v] = None;
    }
}

/// Nodes are numbered in preorder, so document order is index order.
fn order_preserved(image: &[Option<usize>]) -> bool {
    let mapped: Vec<usize> = image.iter().flatten().copied().collect();
    mapped.windows(2).all(|w| w[0] < w[1])
}

// ---------------------------------------------------------------------------
// Minimal JSON Schema conformance check covering the keywords used by the
// shipped wrapper schema.

pub fn schema_errors(schema: &Value, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, schema, value, "$", &mut errors);
    errors
}

fn resolve<'a>(root: &'a Value, s: &'a Value) -> &'a Value {
    match s.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.trim_start_matches("#/$defs/");
            &root["$defs"][name]
        }
        None => s,
    }
}

fn type_ok(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "integer" => v.is_u64() || v.is_i64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        _ => false,
    }
}

fn check(root: &Value, schema: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    let s = resolve(root, schema);
    if let Some(options) = s.get("oneOf").and_then(Value::as_array) {
        let passing = options
            .iter()
            .filter(|o| {
                let mut e = Vec::new();
                check(root, o, v, at, &mut e);
                e.is_empty()
            })
            .count();
        if passing != 1 {
            errors.push(format!("{at}: {passing} oneOf branches match"));
        }
        return;
    }
    match s.get("type") {
        Some(Value::String(t)) if !type_ok(t, v) => errors.push(format!("{at}: expected {t}")),
        Some(Value::Array(ts)) if !ts.iter().any(|t| type_ok(t.as_str().unwrap_or(""), v)) => {
            errors.push(format!("{at}: expected one of {ts:?}"))
        }
        _ => {}
    }
    if let Some(c) = s.get("const") {
        if c != v {
            errors.push(format!("{at}: expected {c}"));
        }
    }
    if let Some(options) = s.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            errors.push(format!("{at}: {v} not in enum"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            errors.push(format!("{at}: below minimum"));
        }
    }
    if let (Some(max), Some(x)) = (s.get("maximum").and_then(Value::as_f64), v.as_f64()) {
        if x > max {
            errors.push(format!("{at}: above maximum"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = s.get("properties").and_then(Value::as_object);
        if let Some(req) = s.get("required").and_then(Value::as_array) {
            for r in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(r) {
                    errors.push(format!("{at}: missing {r}"));
                }
            }
        }
        for (k, val) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(ps) => check(root, ps, val, &format!("{at}.{k}"), errors),
                None => match s.get("additionalProperties") {
                    Some(Value::Bool(false)) => errors.push(format!("{at}: unexpected key {k}")),
                    Some(extra @ Value::Object(_)) => check(root, extra, val, &format!("{at}.{k}"), errors),
                    _ => {}
                },
            }
        }
    }
    if let (Some(items), Some(arr)) = (s.get("items"), v.as_array()) {
        for (i, item) in arr.iter().enumerate() {
            check(root, items, item, &format!("{at}[{i}]"), errors);
        }
    }
}

/// A full `html(head, body(...))` page with classes, a few ids and text, built
/// from labels that have no implied-end-tag behaviour.
pub fn random_page(rng: &mut impl Rng, budget: usize) -> DomTree {
    let body = random_tree(rng, &["div", "span", "section", "em", "article"], 5, 4, budget);
    let mut next_id = 0;
    let body = decorate(rng, DomNode::element("body").with_children(vec![body]), &mut next_id);
    let root = DomNode::element("html").with_children(vec![DomNode::element("head"), body]);
    DomTree::new(root, "page")
}

fn decorate(rng: &mut impl Rng, mut node: DomNode, next_id: &mut usize) -> DomNode {
    if node.label != "body" {
        if rng.gen_bool(0.4) {
            let class = ["item", "title", "row", "meta"][rng.gen_range(0..4)];
            node = node.with_attr("class", class);
        }
        if rng.gen_bool(0.1) {
            *next_id += 1;
            node = node.with_attr("id", format!("n{next_id}"));
        }
        if rng.gen_bool(0.3) {
            node = node.with_text(format!("t{}", rng.gen_range(0..100)));
        }
    }
    let children = std::mem::take(&mut node.children);
    node.children = children.into_iter().map(|c| decorate(rng, c, next_id)).collect();
    node
}
