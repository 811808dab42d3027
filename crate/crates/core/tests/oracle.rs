mod common;

use rewrap::dom::{DomNode, DomTree};
use rewrap::treematch::{simple_tree_matching, Labeler};

fn t(label: &str, children: Vec<DomNode>) -> DomNode {
    DomTree::new(DomNode::element(label).with_children(children), "t").root
}

fn leaf(label: &str) -> DomNode {
    DomNode::element(label)
}

#[test]
fn oracle_on_hand_cases() {
    let cases = [
        (t("a", vec![leaf("b"), leaf("c")]), t("a", vec![leaf("b")]), 2),
        (t("a", vec![leaf("b")]), t("x", vec![leaf("b")]), 0),
        (t("a", vec![t("b", vec![leaf("c")])]), t("a", vec![leaf("c")]), 1),
        (t("a", vec![leaf("b"), leaf("c")]), t("a", vec![leaf("c"), leaf("b")]), 2),
        (
            t("a", vec![t("b", vec![leaf("d")]), leaf("c")]),
            t("a", vec![leaf("c"), t("b", vec![leaf("d"), leaf("d")])]),
            3,
        ),
        (t("a", vec![leaf("b"), leaf("b"), leaf("b")]), t("a", vec![leaf("b"), leaf("b")]), 3),
    ];
    let l = Labeler::element_name();
    for (a, b, want) in cases {
        assert_eq!(common::brute_force_stm(&a, &b), want, "{a:?} vs {b:?}");
        assert_eq!(simple_tree_matching(&a, &b, &l), want);
    }
}

#[test]
fn oracle_on_seeded_pairs() {
    let l = Labeler::element_name();
    let mut rng = common::rng(11);
    for _ in 0..300 {
        let a = common::random_tree(&mut rng, &["a", "b", "c"], 4, 3, 8);
        let mut b = common::random_tree(&mut rng, &["a", "b", "c"], 4, 3, 8);
        b.label = a.label.clone();
        assert_eq!(simple_tree_matching(&a, &b, &l), common::brute_force_stm(&a, &b));
    }
}
