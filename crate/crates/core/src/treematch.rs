//! Top-down tree similarity: Selkow-style Simple Tree Matching and its
//! weighted variant, plus ranked candidate search over a page.
//!
//! Both algorithms fill the same `(m+1)×(n+1)` table `M` over the child
//! sequences of the two roots. The table uses 1-based indices, so cell
//! `M[i][j]` combines child `i-1` of the first root with child `j-1` of the
//! second.

use serde::{Deserialize, Serialize};

use crate::dom::{DomNode, DomTree, NodePath};
use crate::par;

/// Which node properties make up a node's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labeler {
    #[serde(default = "yes")]
    pub use_element_name: bool,
    #[serde(default)]
    pub use_id_attribute: bool,
    #[serde(default)]
    pub use_class_attribute: bool,
}

fn yes() -> bool {
    true
}

impl Default for Labeler {
    fn default() -> Self {
        Labeler::element_name()
    }
}

type LabelKey<'a> = (Option<&'a str>, Option<&'a str>, Option<&'a str>);

impl Labeler {
    pub fn element_name() -> Self {
        Labeler {
            use_element_name: true,
            use_id_attribute: false,
            use_class_attribute: false,
        }
    }

    pub fn new(name: bool, id: bool, class: bool) -> Option<Self> {
        let l = Labeler {
            use_element_name: name,
            use_id_attribute: id,
            use_class_attribute: class,
        };
        l.is_valid().then_some(l)
    }

    pub fn is_valid(&self) -> bool {
        self.use_element_name || self.use_id_attribute || self.use_class_attribute
    }

    fn key<'a>(&self, node: &'a DomNode) -> LabelKey<'a> {
        (
            self.use_element_name.then_some(node.label.as_str()),
            self.use_id_attribute.then(|| node.id().unwrap_or("")),
            self.use_class_attribute.then(|| node.class().unwrap_or("")),
        )
    }

    /// Enabled segments in (name, id, class) order joined by `|`; a missing
    /// attribute contributes an empty segment.
    pub fn label(&self, node: &DomNode) -> String {
        let (n, i, c) = self.key(node);
        [n, i, c].into_iter().flatten().collect::<Vec<_>>().join("|")
    }

    pub fn same_label(&self, a: &DomNode, b: &DomNode) -> bool {
        self.key(a) == self.key(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Simple,
    Weighted,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Simple => "simple",
            Algorithm::Weighted => "weighted",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(Algorithm::Simple),
            "weighted" => Ok(Algorithm::Weighted),
            other => Err(format!("unknown algorithm {other:?} (expected simple|weighted)")),
        }
    }
}

/// The DP state for one pair of roots.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchComputation {
    pub m: usize,
    pub n: usize,
    /// `(m+1) × (n+1)`; row 0 and column 0 are zero.
    pub table: Vec<Vec<f64>>,
    /// `m × n`; `sub_scores[i][j]` scores child `i` against child `j` (0-based).
    pub sub_scores: Vec<Vec<f64>>,
}

impl MatchComputation {
    fn fill(sub_scores: Vec<Vec<f64>>, m: usize, n: usize) -> Self {
        let mut table = vec![vec![0.0; n + 1]; m + 1];
        for i in 1..=m {
            for j in 1..=n {
                let diag = table[i - 1][j - 1] + sub_scores[i - 1][j - 1];
                table[i][j] = table[i][j - 1].max(table[i - 1][j]).max(diag);
            }
        }
        MatchComputation {
            m,
            n,
            table,
            sub_scores,
        }
    }

    pub fn total(&self) -> f64 {
        self.table[self.m][self.n]
    }

    /// One optimal order-preserving child alignment as 0-based index pairs.
    /// Ties prefer skipping over matching zero-scored pairs.
    pub fn alignment(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        let (mut i, mut j) = (self.m, self.n);
        while i > 0 && j > 0 {
            let here = self.table[i][j];
            if here == self.table[i - 1][j] {
                i -= 1;
            } else if here == self.table[i][j - 1] {
                j -= 1;
            } else {
                pairs.push((i - 1, j - 1));
                i -= 1;
                j -= 1;
            }
        }
        pairs.reverse();
        pairs
    }
}

/// Something with ordered children that the matchers can recurse into.
pub trait OrderedTree {
    fn kids(&self) -> &[Self]
    where
        Self: Sized;
}

impl OrderedTree for DomNode {
    fn kids(&self) -> &[DomNode] {
        &self.children
    }
}

/// Simple Tree Matching over any ordered tree with a label predicate.
pub fn stm_by<T: OrderedTree>(a: &T, b: &T, same: &impl Fn(&T, &T) -> bool) -> usize {
    if !same(a, b) {
        return 0;
    }
    let (ka, kb) = (a.kids(), b.kids());
    let (m, n) = (ka.len(), kb.len());
    let mut table = vec![vec![0usize; n + 1]; m + 1];
    for i in 1..=m {
        for j in 1..=n {
            let w = stm_by(&ka[i - 1], &kb[j - 1], same);
            table[i][j] = table[i][j - 1].max(table[i - 1][j]).max(table[i - 1][j - 1] + w);
        }
    }
    1 + table[m][n]
}

/// Weighted Tree Matching where `ta`/`tb` are the sibling counts of the two
/// roots within the trees being compared.
pub fn wtm_by<T: OrderedTree>(a: &T, b: &T, ta: usize, tb: usize, same: &impl Fn(&T, &T) -> bool) -> f64 {
    if !same(a, b) {
        return 0.0;
    }
    let comp = wtm_computation_by(a, b, same);
    let norm = 1.0 / ta.max(tb) as f64;
    if comp.m > 0 && comp.n > 0 {
        comp.total() * norm
    } else {
        comp.total() + norm
    }
}

/// The weighted DP table for the children of `a` and `b` (labels not checked).
pub fn wtm_computation_by<T: OrderedTree>(a: &T, b: &T, same: &impl Fn(&T, &T) -> bool) -> MatchComputation {
    let (ka, kb) = (a.kids(), b.kids());
    let (m, n) = (ka.len(), kb.len());
    let sub_scores = (0..m)
        .map(|i| (0..n).map(|j| wtm_by(&ka[i], &kb[j], m, n, same)).collect())
        .collect();
    MatchComputation::fill(sub_scores, m, n)
}

pub fn simple_tree_matching(a: &DomNode, b: &DomNode, labeler: &Labeler) -> usize {
    stm_by(a, b, &|x: &DomNode, y: &DomNode| labeler.same_label(x, y))
}

/// Similarity in `[0, 1]`. Both arguments are compared as whole trees, so each
/// root counts as having no siblings; every descendant uses its real sibling
/// count.
pub fn weighted_tree_matching(a: &DomNode, b: &DomNode, labeler: &Labeler) -> f64 {
    wtm_by(a, b, 1, 1, &|x: &DomNode, y: &DomNode| labeler.same_label(x, y))
}

/// `2·STM / (size(a) + size(b))`.
pub fn normalized_stm(a: &DomNode, b: &DomNode, labeler: &Labeler) -> f64 {
    let matched = simple_tree_matching(a, b, labeler) as f64;
    2.0 * matched / (a.size() + b.size()) as f64
}

/// Score under either algorithm, normalized into `[0, 1]`.
pub fn similarity(a: &DomNode, b: &DomNode, labeler: &Labeler, algorithm: Algorithm) -> f64 {
    match algorithm {
        Algorithm::Simple => normalized_stm(a, b, labeler),
        Algorithm::Weighted => weighted_tree_matching(a, b, labeler),
    }
}

/// Child-level DP for two roots under the given algorithm.
pub fn match_computation(a: &DomNode, b: &DomNode, labeler: &Labeler, algorithm: Algorithm) -> MatchComputation {
    let same = |x: &DomNode, y: &DomNode| labeler.same_label(x, y);
    match algorithm {
        Algorithm::Weighted => wtm_computation_by(a, b, &same),
        Algorithm::Simple => {
            let (m, n) = (a.degree(), b.degree());
            let sub_scores = (0..m)
                .map(|i| {
                    (0..n)
                        .map(|j| stm_by(&a.children[i], &b.children[j], &same) as f64)
                        .collect()
                })
                .collect();
            MatchComputation::fill(sub_scores, m, n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub path: NodePath,
    pub score: f64,
    pub rank: usize,
}

/// Scores every subtree of `page` against `stored` and ranks those at or above
/// `min_score` (score descending, document order on ties).
pub fn best_matches(
    stored: &DomNode,
    page: &DomTree,
    labeler: &Labeler,
    algorithm: Algorithm,
    min_score: f64,
) -> Vec<RankedCandidate> {
    best_matches_within(stored, page, &NodePath::root(), labeler, algorithm, min_score)
}

/// [`best_matches`] restricted to the subtree rooted at `scope`.
pub fn best_matches_within(
    stored: &DomNode,
    page: &DomTree,
    scope: &NodePath,
    labeler: &Labeler,
    algorithm: Algorithm,
    min_score: f64,
) -> Vec<RankedCandidate> {
    let Some(scope_node) = page.get(scope) else {
        return Vec::new();
    };
    let candidates: Vec<(NodePath, &DomNode)> = scope_node
        .walk()
        .into_iter()
        .filter(|(_, n)| labeler.same_label(n, stored))
        .map(|(p, n)| (scope.join(&p), n))
        .collect();
    let scores = par::map(&candidates, |(_, node)| similarity(stored, node, labeler, algorithm));
    rank(
        candidates.into_iter().map(|(p, _)| p).zip(scores).collect(),
        min_score,
    )
}

pub(crate) fn rank(scored: Vec<(NodePath, f64)>, min_score: f64) -> Vec<RankedCandidate> {
    let mut kept: Vec<(NodePath, f64)> = scored.into_iter().filter(|(_, s)| *s >= min_score).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.into_iter()
        .enumerate()
        .map(|(i, (path, score))| RankedCandidate {
            path,
            score,
            rank: i + 1,
        })
        .collect()
}
