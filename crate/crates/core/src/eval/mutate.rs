//! Seeded page mutations with an exact ground-truth map from original node
//! paths to their new positions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dom::{DomNode, DomTree, NodePath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    RenameAttribute,
    DropAttribute,
    InsertWrapperElement,
    RemoveLevel,
    ReorderSiblings,
    DuplicateRecord,
    ChangeClassValue,
    DeleteRegion,
}

impl MutationOp {
    pub const ALL: [MutationOp; 8] = [
        MutationOp::RenameAttribute,
        MutationOp::DropAttribute,
        MutationOp::InsertWrapperElement,
        MutationOp::RemoveLevel,
        MutationOp::ReorderSiblings,
        MutationOp::DuplicateRecord,
        MutationOp::ChangeClassValue,
        MutationOp::DeleteRegion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationOp::RenameAttribute => "rename_attribute",
            MutationOp::DropAttribute => "drop_attribute",
            MutationOp::InsertWrapperElement => "insert_wrapper_element",
            MutationOp::RemoveLevel => "remove_level",
            MutationOp::ReorderSiblings => "reorder_siblings",
            MutationOp::DuplicateRecord => "duplicate_record",
            MutationOp::ChangeClassValue => "change_class_value",
            MutationOp::DeleteRegion => "delete_region",
        }
    }

    fn applies_to(self, node: &MNode) -> bool {
        match self {
            MutationOp::RenameAttribute | MutationOp::DropAttribute => !node.attributes.is_empty(),
            MutationOp::ChangeClassValue => node.attributes.contains_key("class"),
            MutationOp::RemoveLevel => !node.children.is_empty(),
            MutationOp::ReorderSiblings => node.children.len() >= 2,
            MutationOp::InsertWrapperElement | MutationOp::DuplicateRecord | MutationOp::DeleteRegion => true,
        }
    }
}

impl fmt::Display for MutationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MutationOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MutationOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| format!("unknown mutation operation {s:?}"))
    }
}

/// Each eligible element is mutated with probability `rate`, by one of the
/// listed operations that applies to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub operations: Vec<MutationOp>,
    pub seed: u64,
    pub rate: f64,
}

impl MutationSpec {
    pub fn all(seed: u64, rate: f64) -> Self {
        MutationSpec {
            operations: MutationOp::ALL.to_vec(),
            seed,
            rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mapped {
    At(NodePath),
    Deleted,
}

impl Mapped {
    pub fn path(&self) -> Option<&NodePath> {
        match self {
            Mapped::At(p) => Some(p),
            Mapped::Deleted => None,
        }
    }
}

/// Original path to new path (or deletion) for every node of the input.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth(pub BTreeMap<NodePath, Mapped>);

impl GroundTruth {
    pub fn get(&self, original: &NodePath) -> Option<&Mapped> {
        self.0.get(original)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|(k, v)| v.path() == Some(k))
    }
}

impl Serialize for GroundTruth {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_map(self.0.iter().map(|(k, v)| {
            let value = match v {
                Mapped::At(p) => p.to_string(),
                Mapped::Deleted => "deleted".to_string(),
            };
            (k.to_string(), value)
        }))
    }
}

impl<'de> Deserialize<'de> for GroundTruth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(deserializer)?;
        let mut out = BTreeMap::new();
        for (k, v) in raw {
            let key = k.parse::<NodePath>().map_err(serde::de::Error::custom)?;
            let value = if v == "deleted" {
                Mapped::Deleted
            } else {
                Mapped::At(v.parse::<NodePath>().map_err(serde::de::Error::custom)?)
            };
            out.insert(key, value);
        }
        Ok(GroundTruth(out))
    }
}

#[derive(Debug, Clone)]
pub struct Mutation {
    pub tree: DomTree,
    pub truth: GroundTruth,
    /// Count of applied operations by kind.
    pub applied: BTreeMap<MutationOp, usize>,
}

#[derive(Debug, Clone)]
struct MNode {
    label: String,
    attributes: indexmap::IndexMap<String, String>,
    text: String,
    children: Vec<MNode>,
    origin: Option<NodePath>,
}

impl MNode {
    fn from_dom(node: &DomNode, path: NodePath) -> Self {
        MNode {
            label: node.label.clone(),
            attributes: node.attributes.clone(),
            text: node.text.clone(),
            children: node
                .children
                .iter()
                .enumerate()
                .map(|(i, c)| MNode::from_dom(c, path.child(i)))
                .collect(),
            origin: Some(path),
        }
    }

    fn to_dom(&self) -> DomNode {
        let mut node = DomNode::element(self.label.clone())
            .with_text(self.text.clone())
            .with_children(self.children.iter().map(MNode::to_dom).collect());
        node.attributes = self.attributes.clone();
        node
    }

    fn without_origin(&self) -> MNode {
        MNode {
            origin: None,
            children: self.children.iter().map(MNode::without_origin).collect(),
            ..self.clone()
        }
    }

    fn record_positions(&self, path: NodePath, out: &mut BTreeMap<NodePath, Mapped>) {
        if let Some(origin) = &self.origin {
            out.insert(origin.clone(), Mapped::At(path.clone()));
        }
        for (i, c) in self.children.iter().enumerate() {
            c.record_positions(path.child(i), out);
        }
    }
}

struct Mutator<'a> {
    spec: &'a MutationSpec,
    rng: ChaCha8Rng,
    applied: BTreeMap<MutationOp, usize>,
}

const STRUCTURAL: [&str; 3] = ["html", "head", "body"];

impl Mutator<'_> {
    /// Mutates the children of `node` bottom-up, returning the new child list.
    fn children(&mut self, node: &mut MNode) {
        let old = std::mem::take(&mut node.children);
        let mut out = Vec::with_capacity(old.len());
        for mut child in old {
            if child.label == "head" {
                out.push(child);
                continue;
            }
            self.children(&mut child);
            if STRUCTURAL.contains(&child.label.as_str()) {
                out.push(child);
                continue;
            }
            self.element(child, &mut out);
        }
        node.children = out;
    }

    fn element(&mut self, mut node: MNode, out: &mut Vec<MNode>) {
        if self.spec.rate <= 0.0 || !self.rng.gen_bool(self.spec.rate.min(1.0)) {
            out.push(node);
            return;
        }
        let eligible: Vec<MutationOp> = self
            .spec
            .operations
            .iter()
            .copied()
            .filter(|op| op.applies_to(&node))
            .collect();
        let Some(&op) = eligible.choose(&mut self.rng) else {
            out.push(node);
            return;
        };
        *self.applied.entry(op).or_default() += 1;
        match op {
            MutationOp::RenameAttribute => {
                let i = self.rng.gen_range(0..node.attributes.len());
                let (k, v) = node.attributes.shift_remove_index(i).expect("index in range");
                node.attributes.shift_insert(i, format!("data-{k}"), v);
                out.push(node);
            }
            MutationOp::DropAttribute => {
                let i = self.rng.gen_range(0..node.attributes.len());
                node.attributes.shift_remove_index(i);
                out.push(node);
            }
            MutationOp::ChangeClassValue => {
                let value = format!("c{:04x}", self.rng.gen::<u16>());
                node.attributes.insert("class".to_string(), value);
                out.push(node);
            }
            MutationOp::InsertWrapperElement => {
                let mut wrapper = MNode {
                    label: "div".to_string(),
                    attributes: Default::default(),
                    text: String::new(),
                    children: Vec::new(),
                    origin: None,
                };
                wrapper.children.push(node);
                out.push(wrapper);
            }
            MutationOp::RemoveLevel => out.extend(node.children),
            MutationOp::ReorderSiblings => {
                node.children.shuffle(&mut self.rng);
                out.push(node);
            }
            MutationOp::DuplicateRecord => {
                let copy = node.without_origin();
                out.push(node);
                out.push(copy);
            }
            MutationOp::DeleteRegion => {}
        }
    }
}

/// Applies `spec` to `tree`. A pure function of the tree and the spec.
pub fn mutate(tree: &DomTree, spec: &MutationSpec) -> Mutation {
    let mut root = MNode::from_dom(&tree.root, NodePath::root());
    let mut m = Mutator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        applied: BTreeMap::new(),
    };
    m.children(&mut root);

    let mut positions = BTreeMap::new();
    root.record_positions(NodePath::root(), &mut positions);
    let truth = tree
        .root
        .walk()
        .into_iter()
        .map(|(p, _)| {
            let mapped = positions.remove(&p).unwrap_or(Mapped::Deleted);
            (p, mapped)
        })
        .collect();
    Mutation {
        tree: DomTree::new(root.to_dom(), format!("{}#mutated-{}", tree.source_id, spec.seed)),
        truth: GroundTruth(truth),
        applied: m.applied,
    }
}
