//! Ordered, labeled HTML element trees.
//!
//! Text is not modelled as nodes: every element carries the text it owns
//! directly (whitespace collapsed, runs joined by a single space). Comments,
//! doctypes and the bodies of `script`/`style` are discarded.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomError {
    #[error("input is not valid UTF-8: {0}")]
    Parse(#[from] std::str::Utf8Error),
    #[error("path {0} does not resolve")]
    Path(NodePath),
}

/// Child indices from the root; the empty path is the root itself.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodePath(pub Vec<usize>);

impl NodePath {
    pub fn root() -> Self {
        NodePath(Vec::new())
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, index: usize) -> Self {
        let mut steps = self.0.clone();
        steps.push(index);
        NodePath(steps)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(NodePath(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn join(&self, rest: &NodePath) -> Self {
        let mut steps = self.0.clone();
        steps.extend_from_slice(&rest.0);
        NodePath(steps)
    }

    pub fn is_prefix_of(&self, other: &NodePath) -> bool {
        other.0.starts_with(&self.0)
    }

    /// The remainder of `other` below `self`, if `self` is an ancestor-or-self.
    pub fn relative_to(&self, ancestor: &NodePath) -> Option<NodePath> {
        if ancestor.is_prefix_of(self) {
            Some(NodePath(self.0[ancestor.0.len()..].to_vec()))
        } else {
            None
        }
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("/");
        }
        for step in &self.0 {
            write!(f, "/{step}")?;
        }
        Ok(())
    }
}

impl FromStr for NodePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let steps = s
            .split('/')
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|e| format!("bad path step {p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NodePath(steps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomNode {
    pub label: String,
    pub attributes: IndexMap<String, String>,
    pub text: String,
    pub children: Vec<DomNode>,
    pub parent_path: Option<NodePath>,
    pub sibling_index: usize,
    siblings: usize,
}

impl DomNode {
    /// A detached element; structural bookkeeping is filled in once it is
    /// placed into a [`DomTree`].
    pub fn element(label: impl Into<String>) -> Self {
        DomNode {
            label: label.into(),
            attributes: IndexMap::new(),
            text: String::new(),
            children: Vec::new(),
            parent_path: None,
            sibling_index: 0,
            siblings: 1,
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.entry(name.into()).or_insert_with(|| value.into());
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = text.into();
        self
    }

    pub fn with_children(mut self, children: Vec<DomNode>) -> Self {
        self.children = children;
        self
    }

    /// `d(n)`: number of element children.
    pub fn degree(&self) -> usize {
        self.children.len()
    }

    /// `t(n)`: element siblings including the node itself.
    pub fn sibling_count(&self) -> usize {
        self.siblings
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    pub fn id(&self) -> Option<&str> {
        self.attr("id")
    }

    pub fn class(&self) -> Option<&str> {
        self.attr("class")
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(DomNode::size).sum::<usize>()
    }

    pub fn height(&self) -> usize {
        1 + self.children.iter().map(DomNode::height).max().unwrap_or(0)
    }

    pub fn get(&self, path: &NodePath) -> Option<&DomNode> {
        let mut node = self;
        for &step in path.steps() {
            node = node.children.get(step)?;
        }
        Some(node)
    }

    /// Owned text of this node and all descendants, in document order.
    pub fn text_content(&self) -> String {
        let mut parts = Vec::new();
        self.collect_text(&mut parts);
        parts.join(" ")
    }

    fn collect_text<'a>(&'a self, out: &mut Vec<&'a str>) {
        if !self.text.is_empty() {
            out.push(&self.text);
        }
        for child in &self.children {
            child.collect_text(out);
        }
    }

    pub fn text_len(&self) -> usize {
        self.text.chars().count() + self.children.iter().map(DomNode::text_len).sum::<usize>()
    }

    /// Pre-order walk yielding each node with its path relative to `self`.
    pub fn walk(&self) -> Vec<(NodePath, &DomNode)> {
        let mut out = Vec::new();
        fn go<'a>(node: &'a DomNode, path: NodePath, out: &mut Vec<(NodePath, &'a DomNode)>) {
            out.push((path.clone(), node));
            for (i, child) in node.children.iter().enumerate() {
                go(child, path.child(i), out);
            }
        }
        go(self, NodePath::root(), &mut out);
        out
    }

    fn renumber(&mut self, path: &NodePath, siblings: usize, index: usize, parent: Option<NodePath>) {
        self.parent_path = parent;
        self.sibling_index = index;
        self.siblings = siblings;
        let count = self.children.len();
        for (i, child) in self.children.iter_mut().enumerate() {
            let child_path = path.child(i);
            child.renumber(&child_path, count, i, Some(path.clone()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomTree {
    pub root: DomNode,
    pub source_id: String,
    pub node_count: usize,
}

impl DomTree {
    pub fn new(mut root: DomNode, source_id: impl Into<String>) -> Self {
        root.renumber(&NodePath::root(), 1, 0, None);
        let node_count = root.size();
        DomTree {
            root,
            source_id: source_id.into(),
            node_count,
        }
    }

    pub fn get(&self, path: &NodePath) -> Option<&DomNode> {
        self.root.get(path)
    }

    pub fn resolve(&self, path: &NodePath) -> Result<&DomNode, DomError> {
        self.get(path).ok_or_else(|| DomError::Path(path.clone()))
    }

    /// The subtree at `path` re-rooted as a standalone tree.
    pub fn subtree(&self, path: &NodePath) -> Result<DomTree, DomError> {
        let node = self.resolve(path)?.clone();
        Ok(DomTree::new(node, self.source_id.clone()))
    }

    pub fn to_html(&self) -> String {
        serialize(&self.root)
    }
}

#[derive(Debug, Clone)]
pub struct Ancestor<'a> {
    pub path: NodePath,
    pub node: &'a DomNode,
    /// Path from the ancestor back down to the original node.
    pub residual: NodePath,
}

pub fn degree(node: &DomNode) -> usize {
    node.degree()
}

pub fn sibling_count(node: &DomNode) -> usize {
    node.sibling_count()
}

/// All subtrees in document order, optionally restricted to one root label.
pub fn enumerate_subtrees<'a>(
    tree: &'a DomTree,
    root_label_filter: Option<&str>,
) -> Vec<(NodePath, &'a DomNode)> {
    let mut all = tree.root.walk();
    if let Some(label) = root_label_filter {
        all.retain(|(_, n)| n.label == label);
    }
    all
}

/// Walks `levels` steps up from `path`, stopping at the root.
pub fn ancestor<'a>(tree: &'a DomTree, path: &NodePath, levels: usize) -> Result<Ancestor<'a>, DomError> {
    tree.resolve(path)?;
    let keep = path.depth().saturating_sub(levels);
    let up = NodePath(path.steps()[..keep].to_vec());
    let residual = NodePath(path.steps()[keep..].to_vec());
    let node = tree.resolve(&up)?;
    Ok(Ancestor {
        path: up,
        node,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Parsing

const VOID_ELEMENTS: &[&str] = &[
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "param", "source",
    "track", "wbr",
];

const RAW_TEXT_DROPPED: &[&str] = &["script", "style", "noscript", "template"];
const RCDATA: &[&str] = &["title", "textarea"];

/// Start tags that implicitly close an open `p`.
const CLOSES_P: &[&str] = &[
    "address", "article", "aside", "blockquote", "details", "dialog", "dd", "div", "dl", "dt",
    "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6",
    "header", "hgroup", "hr", "li", "main", "menu", "nav", "ol", "p", "pre", "section", "summary",
    "table", "ul",
];

/// Elements that bound the search for an implicitly closed `p`/`li`.
const SCOPE_BOUNDARY: &[&str] = &[
    "applet", "button", "caption", "html", "marquee", "object", "table", "td", "th", "template",
];

fn is_void(name: &str) -> bool {
    VOID_ELEMENTS.contains(&name)
}

#[derive(Debug)]
enum Token {
    Start {
        name: String,
        attrs: Vec<(String, String)>,
        self_closing: bool,
    },
    End(String),
    Text(String),
}

struct Tokenizer<'a> {
    src: &'a str,
    pos: usize,
    pending_raw: Option<String>,
}

impl<'a> Tokenizer<'a> {
    fn new(src: &'a str) -> Self {
        Tokenizer {
            src,
            pos: 0,
            pending_raw: None,
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn next_token(&mut self) -> Option<Token> {
        if let Some(name) = self.pending_raw.take() {
            let rest = self.rest();
            let close = format!("</{name}");
            let end = find_ci(rest, &close).unwrap_or(rest.len());
            let body = &rest[..end];
            self.pos += end;
            if RCDATA.contains(&name.as_str()) && !body.is_empty() {
                return Some(Token::Text(decode_entities(body)));
            }
        }
        loop {
            let rest = self.rest();
            if rest.is_empty() {
                return None;
            }
            if let Some(after) = rest.strip_prefix('<') {
                if let Some(comment) = after.strip_prefix("!--") {
                    let end = comment.find("-->").map(|i| i + 3 + 3).unwrap_or(after.len());
                    self.pos += 1 + end;
                    continue;
                }
                if after.starts_with('!') || after.starts_with('?') {
                    let end = after.find('>').map(|i| i + 1).unwrap_or(after.len());
                    self.pos += 1 + end;
                    continue;
                }
                if let Some(close) = after.strip_prefix('/') {
                    if close.starts_with(|c: char| c.is_ascii_alphabetic()) {
                        let end = close.find('>').map(|i| i + 1).unwrap_or(close.len());
                        let name: String = close[..end]
                            .chars()
                            .take_while(|c| !c.is_ascii_whitespace() && *c != '>' && *c != '/')
                            .collect::<String>()
                            .to_ascii_lowercase();
                        self.pos += 2 + end;
                        return Some(Token::End(name));
                    }
                    if close.starts_with('>') {
                        self.pos += 3;
                        continue;
                    }
                } else if after.starts_with(|c: char| c.is_ascii_alphabetic()) {
                    return Some(self.start_tag());
                }
                // A lone '<' is text.
                let end = rest[1..].find('<').map(|i| i + 1).unwrap_or(rest.len());
                self.pos += end;
                return Some(Token::Text(decode_entities(&rest[..end])));
            }
            let end = rest.find('<').unwrap_or(rest.len());
            self.pos += end;
            return Some(Token::Text(decode_entities(&rest[..end])));
        }
    }

    fn start_tag(&mut self) -> Token {
        let bytes = self.src.as_bytes();
        let mut i = self.pos + 1;
        let name_start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'>' && bytes[i] != b'/' {
            i += 1;
        }
        let name = self.src[name_start..i].to_ascii_lowercase();
        let mut attrs: Vec<(String, String)> = Vec::new();
        let mut self_closing = false;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i >= bytes.len() {
                break;
            }
            match bytes[i] {
                b'>' => {
                    i += 1;
                    break;
                }
                b'/' => {
                    i += 1;
                    if i < bytes.len() && bytes[i] == b'>' {
                        self_closing = true;
                        i += 1;
                        break;
                    }
                    continue;
                }
                _ => {}
            }
            let an_start = i;
            while i < bytes.len()
                && !bytes[i].is_ascii_whitespace()
                && !matches!(bytes[i], b'>' | b'=' | b'/')
            {
                i += 1;
            }
            if i == an_start {
                // Stray '=' or similar; skip a byte to guarantee progress.
                i += 1;
                continue;
            }
            let attr_name = self.src[an_start..i].to_ascii_lowercase();
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            let mut value = String::new();
            if j < bytes.len() && bytes[j] == b'=' {
                j += 1;
                while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] == b'"' || bytes[j] == b'\'') {
                    let quote = bytes[j];
                    let v_start = j + 1;
                    let mut k = v_start;
                    while k < bytes.len() && bytes[k] != quote {
                        k += 1;
                    }
                    value = decode_entities(&self.src[v_start..k]);
                    i = (k + 1).min(bytes.len());
                } else {
                    let v_start = j;
                    let mut k = j;
                    while k < bytes.len() && !bytes[k].is_ascii_whitespace() && bytes[k] != b'>' {
                        k += 1;
                    }
                    value = decode_entities(&self.src[v_start..k]);
                    i = k;
                }
            }
            if !attrs.iter().any(|(n, _)| *n == attr_name) {
                attrs.push((attr_name, value));
            }
        }
        self.pos = i;
        if (RAW_TEXT_DROPPED.contains(&name.as_str()) || RCDATA.contains(&name.as_str())) && !self_closing {
            self.pending_raw = Some(name.clone());
        }
        Token::Start {
            name,
            attrs,
            self_closing,
        }
    }
}

fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.as_bytes();
    let nee = needle.as_bytes();
    if nee.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - nee.len()).find(|&i| hay[i..i + nee.len()].eq_ignore_ascii_case(nee))
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp..];
        let semi = tail[..tail.len().min(12)].find(';');
        let decoded = semi.and_then(|end| {
            let entity = &tail[1..end];
            decode_entity(entity).map(|c| (c, end + 1))
        });
        match decoded {
            Some((c, len)) => {
                out.push(c);
                rest = &tail[len..];
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_entity(entity: &str) -> Option<char> {
    if let Some(num) = entity.strip_prefix('#') {
        let code = if let Some(hex) = num.strip_prefix('x').or_else(|| num.strip_prefix('X')) {
            u32::from_str_radix(hex, 16).ok()?
        } else {
            num.parse::<u32>().ok()?
        };
        return char::from_u32(code);
    }
    Some(match entity {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        "nbsp" => '\u{a0}',
        "copy" => '©',
        "reg" => '®',
        "euro" => '€',
        "pound" => '£',
        "mdash" => '—',
        "ndash" => '–',
        "hellip" => '…',
        "laquo" => '«',
        "raquo" => '»',
        "middot" => '·',
        _ => return None,
    })
}

struct Builder {
    label: String,
    attrs: IndexMap<String, String>,
    text: Vec<String>,
    children: Vec<usize>,
}

struct TreeBuilder {
    arena: Vec<Builder>,
    stack: Vec<usize>,
}

impl TreeBuilder {
    fn new() -> Self {
        TreeBuilder {
            arena: Vec::new(),
            stack: Vec::new(),
        }
    }

    fn ensure_root(&mut self) {
        if self.stack.is_empty() {
            self.arena.push(Builder {
                label: "html".into(),
                attrs: IndexMap::new(),
                text: Vec::new(),
                children: Vec::new(),
            });
            self.stack.push(0);
        }
    }

    fn open_labels(&self) -> impl DoubleEndedIterator<Item = (usize, &str)> {
        self.stack
            .iter()
            .enumerate()
            .map(move |(depth, &id)| (depth, self.arena[id].label.as_str()))
    }

    /// Stack depth of the nearest open `name`, scanning down to a boundary.
    fn in_scope(&self, name: &str, boundaries: &[&str]) -> Option<usize> {
        for (depth, label) in self.open_labels().rev() {
            if depth == 0 {
                return None;
            }
            if label == name {
                return Some(depth);
            }
            if boundaries.contains(&label) {
                return None;
            }
        }
        None
    }

    fn close_to(&mut self, depth: usize) {
        self.stack.truncate(depth.max(1));
    }

    fn apply_implied_ends(&mut self, name: &str) {
        if CLOSES_P.contains(&name) {
            if let Some(d) = self.in_scope("p", SCOPE_BOUNDARY) {
                self.close_to(d);
            }
        }
        let mut list_boundary: Vec<&str> = SCOPE_BOUNDARY.to_vec();
        match name {
            "li" => {
                list_boundary.extend(["ul", "ol"]);
                if let Some(d) = self.in_scope("li", &list_boundary) {
                    self.close_to(d);
                }
            }
            "dt" | "dd" => {
                list_boundary.push("dl");
                let d = self
                    .in_scope("dt", &list_boundary)
                    .max(self.in_scope("dd", &list_boundary));
                if let Some(d) = d {
                    self.close_to(d);
                }
            }
            "option" => {
                if let Some(d) = self.in_scope("option", &["select", "datalist"]) {
                    self.close_to(d);
                }
            }
            "tr" => {
                if let Some(d) = self.in_scope("tr", &["table"]) {
                    self.close_to(d);
                }
            }
            "td" | "th" => {
                let d = self.in_scope("td", &["tr", "table"]).max(self.in_scope("th", &["tr", "table"]));
                if let Some(d) = d {
                    self.close_to(d);
                }
            }
            "thead" | "tbody" | "tfoot" => {
                let d = ["thead", "tbody", "tfoot"]
                    .iter()
                    .filter_map(|s| self.in_scope(s, &["table"]))
                    .max();
                if let Some(d) = d {
                    self.close_to(d);
                }
            }
            _ => {}
        }
    }

    fn start(&mut self, name: String, attrs: Vec<(String, String)>, self_closing: bool) {
        if name == "html" {
            let fresh = self.stack.is_empty();
            self.ensure_root();
            let root = &mut self.arena[0];
            for (k, v) in attrs {
                root.attrs.entry(k).or_insert(v);
            }
            if fresh {
                return;
            }
            return;
        }
        self.ensure_root();
        if name == "head" || name == "body" {
            let existing = self.arena[0]
                .children
                .iter()
                .copied()
                .find(|&c| self.arena[c].label == name);
            if let Some(id) = existing {
                for (k, v) in attrs {
                    self.arena[id].attrs.entry(k).or_insert(v);
                }
                if name == "body" && !self.stack.contains(&id) {
                    self.stack.truncate(1);
                    self.stack.push(id);
                }
                return;
            }
            // head/body always attach to the root.
            self.stack.truncate(1);
        } else {
            self.apply_implied_ends(&name);
        }
        let void = is_void(&name);
        let id = self.arena.len();
        self.arena.push(Builder {
            label: name,
            attrs: attrs.into_iter().collect(),
            text: Vec::new(),
            children: Vec::new(),
        });
        let parent = *self.stack.last().expect("root is always open");
        self.arena[parent].children.push(id);
        if !(void || self_closing) {
            self.stack.push(id);
        }
    }

    fn end(&mut self, name: &str) {
        if matches!(name, "html" | "body") {
            return;
        }
        if let Some(depth) = self.stack.iter().rposition(|&id| self.arena[id].label == name) {
            if depth > 0 {
                self.close_to(depth);
            }
        }
    }

    fn text(&mut self, text: String) {
        let collapsed = collapse_ws(&text);
        if collapsed.is_empty() {
            return;
        }
        self.ensure_root();
        let top = *self.stack.last().expect("root is always open");
        self.arena[top].text.push(collapsed);
    }

    fn finish(mut self) -> DomNode {
        self.ensure_root();
        fn build(arena: &mut Vec<Builder>, id: usize) -> DomNode {
            let children_ids = std::mem::take(&mut arena[id].children);
            let children = children_ids.into_iter().map(|c| build(arena, c)).collect();
            let b = &mut arena[id];
            DomNode {
                label: std::mem::take(&mut b.label),
                attributes: std::mem::take(&mut b.attrs),
                text: b.text.join(" "),
                children,
                parent_path: None,
                sibling_index: 0,
                siblings: 1,
            }
        }
        build(&mut self.arena, 0)
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_ascii_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lenient parse. Never fails on malformed markup; an empty document yields a
/// bare `html` root.
pub fn parse_html(text: &str, source_id: impl Into<String>) -> DomTree {
    let mut tokenizer = Tokenizer::new(text);
    let mut builder = TreeBuilder::new();
    while let Some(token) = tokenizer.next_token() {
        match token {
            Token::Start {
                name,
                attrs,
                self_closing,
            } => builder.start(name, attrs, self_closing),
            Token::End(name) => builder.end(&name),
            Token::Text(t) => builder.text(t),
        }
    }
    DomTree::new(builder.finish(), source_id)
}

pub fn parse_html_bytes(bytes: &[u8], source_id: impl Into<String>) -> Result<DomTree, DomError> {
    let text = std::str::from_utf8(bytes)?;
    Ok(parse_html(text, source_id))
}

// ---------------------------------------------------------------------------
// Canonical serialization: two-space indentation, attributes sorted by name.

pub fn serialize(node: &DomNode) -> String {
    let mut out = String::new();
    write_node(node, 0, &mut out);
    out
}

fn write_node(node: &DomNode, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    out.push_str(&pad);
    out.push('<');
    out.push_str(&node.label);
    let mut attrs: Vec<(&String, &String)> = node.attributes.iter().collect();
    attrs.sort();
    for (k, v) in attrs {
        out.push(' ');
        out.push_str(k);
        out.push_str("=\"");
        out.push_str(&escape_attr(v));
        out.push('"');
    }
    out.push('>');
    if is_void(&node.label) {
        out.push('\n');
        return;
    }
    if node.children.is_empty() {
        out.push_str(&escape_text(&node.text));
    } else {
        out.push('\n');
        if !node.text.is_empty() {
            out.push_str(&"  ".repeat(indent + 1));
            out.push_str(&escape_text(&node.text));
            out.push('\n');
        }
        for child in &node.children {
            write_node(child, indent + 1, out);
        }
        out.push_str(&pad);
    }
    out.push_str("</");
    out.push_str(&node.label);
    out.push_str(">\n");
}

fn escape_text(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn escape_attr(s: &str) -> String {
    s.replace('&', "&amp;").replace('"', "&quot;")
}
