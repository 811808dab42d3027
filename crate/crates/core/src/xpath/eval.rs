use std::collections::BTreeSet;

use super::{Axis, Predicate, Step, XPathExpr};
use crate::dom::{DomNode, DomTree, NodePath};

/// Matches in document order. Absolute expressions start at the document.
pub fn evaluate(expr: &XPathExpr, tree: &DomTree) -> Vec<NodePath> {
    evaluate_from(expr, tree, &NodePath::root())
}

/// Relative expressions are evaluated from `context`; absolute ones ignore it.
pub fn evaluate_from(expr: &XPathExpr, tree: &DomTree, context: &NodePath) -> Vec<NodePath> {
    // `None` stands for the document node above the root element.
    let mut current: Vec<Option<NodePath>> = if expr.absolute {
        vec![None]
    } else if tree.get(context).is_some() {
        vec![Some(context.clone())]
    } else {
        return Vec::new();
    };
    for step in &expr.steps {
        let mut next = BTreeSet::new();
        for ctx in &current {
            for parent in step_parents(tree, ctx.as_ref(), step.axis) {
                select_children(tree, parent.as_ref(), step, &mut next);
            }
        }
        current = next.into_iter().map(Some).collect();
    }
    current.into_iter().flatten().collect()
}

fn step_parents(tree: &DomTree, ctx: Option<&NodePath>, axis: Axis) -> Vec<Option<NodePath>> {
    match axis {
        Axis::Child => vec![ctx.cloned()],
        Axis::Descendant => {
            let (base, node) = match ctx {
                None => {
                    let mut all = vec![None];
                    all.extend(tree.root.walk().into_iter().map(|(p, _)| Some(p)));
                    return all;
                }
                Some(p) => match tree.get(p) {
                    Some(n) => (p.clone(), n),
                    None => return Vec::new(),
                },
            };
            node.walk().into_iter().map(|(p, _)| Some(base.join(&p))).collect()
        }
    }
}

fn select_children(tree: &DomTree, parent: Option<&NodePath>, step: &Step, out: &mut BTreeSet<NodePath>) {
    let children: Vec<(NodePath, &DomNode)> = match parent {
        None => vec![(NodePath::root(), &tree.root)],
        Some(p) => match tree.get(p) {
            Some(n) => n.children.iter().enumerate().map(|(i, c)| (p.child(i), c)).collect(),
            None => return,
        },
    };
    let mut selected: Vec<(NodePath, &DomNode)> =
        children.into_iter().filter(|(_, n)| step.name.matches(&n.label)).collect();
    for pred in &step.predicates {
        selected = match pred {
            Predicate::Position(k) => selected.into_iter().nth(k - 1).into_iter().collect(),
            other => selected.into_iter().filter(|(_, n)| holds(other, n)).collect(),
        };
    }
    out.extend(selected.into_iter().map(|(p, _)| p));
}

fn holds(pred: &Predicate, node: &DomNode) -> bool {
    match pred {
        Predicate::Position(_) => unreachable!("positions are applied to the sibling list"),
        Predicate::AttrEquals { name, value } => node.attr(name) == Some(value.as_str()),
        Predicate::AttrMatches { name, pattern } => node.attr(name).is_some_and(|v| pattern.is_match(v)),
        Predicate::TextEquals(t) => node.text == *t,
    }
}

/// The expression followed by variants with positional predicates removed
/// one step at a time, from the rightmost step leftward. Each variant drops
/// one more index than the previous one.
pub fn relaxation_variants(expr: &XPathExpr) -> Vec<XPathExpr> {
    let mut out = vec![expr.clone()];
    let mut current = expr.clone();
    for i in (0..current.steps.len()).rev() {
        if current.steps[i].has_position() {
            current.steps[i]
                .predicates
                .retain(|p| !matches!(p, Predicate::Position(_)));
            out.push(current.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse_html;

    fn ev(x: &str, html: &str) -> Vec<NodePath> {
        evaluate(&XPathExpr::parse(x).unwrap(), &parse_html(html, "t"))
    }

    #[test]
    fn absolute_child_path() {
        let r = ev("/html/body/p", "<html><body><p>x</p></body></html>");
        assert_eq!(r, vec![NodePath(vec![0, 0])]);
        assert!(ev("/body", "<html><body></body></html>").is_empty());
    }

    #[test]
    fn positional_predicate() {
        let r = ev("//li[2]", "<ul><li/><li/></ul>");
        assert_eq!(r, vec![NodePath(vec![0, 1])]);
        // Positions count same-name siblings only.
        let r = ev("//ul/li[2]", "<ul><b/><li/><b/><li/></ul>");
        assert_eq!(r, vec![NodePath(vec![0, 3])]);
        // Per-parent positions.
        let r = ev("//li[1]", "<ul><li/><li/></ul><ol><li/></ol>");
        assert_eq!(r, vec![NodePath(vec![0, 0]), NodePath(vec![1, 0])]);
    }

    #[test]
    fn id_and_attribute_predicates() {
        let html = r#"<div><nav id="nav"><a class="x y">1</a></nav><nav id="foot"></nav></div>"#;
        assert_eq!(ev("//*[@id='nav']", html), vec![NodePath(vec![0, 0])]);
        assert_eq!(ev("//a[matches(@class,'(^|\\s)y(\\s|$)')]", html), vec![NodePath(vec![0, 0, 0])]);
        assert_eq!(ev("//a[text()='1']", html), vec![NodePath(vec![0, 0, 0])]);
        assert!(ev("//a[text()='2']", html).is_empty());
    }

    #[test]
    fn predicates_apply_in_order() {
        let html = r#"<ul><li class="a"/><li/><li class="a"/></ul>"#;
        assert_eq!(ev("//li[@class='a'][2]", html), vec![NodePath(vec![0, 2])]);
        assert!(ev("//li[2][@class='a']", html).is_empty());
    }

    #[test]
    fn descendant_includes_root() {
        assert_eq!(ev("//html", "<p/>"), vec![NodePath::root()]);
    }

    #[test]
    fn relative_from_context() {
        let t = parse_html("<div><p><b/></p></div><p><b/></p>", "t");
        let e = XPathExpr::parse(".//b").unwrap();
        assert_eq!(evaluate_from(&e, &t, &NodePath(vec![0])), vec![NodePath(vec![0, 0, 0])]);
        let me = XPathExpr::parse(".").unwrap();
        assert_eq!(evaluate_from(&me, &t, &NodePath(vec![1])), vec![NodePath(vec![1])]);
        assert!(evaluate_from(&e, &t, &NodePath(vec![9])).is_empty());
    }

    #[test]
    fn document_order_and_dedup() {
        let html = "<div><div><span/></div></div>";
        let r = ev("//div//span", html);
        assert_eq!(r, vec![NodePath(vec![0, 0, 0])]);
    }

    #[test]
    fn relaxation_strips_right_to_left() {
        let e = XPathExpr::parse("/html[1]/body[1]/ul[2]/li[3]").unwrap();
        let v: Vec<String> = relaxation_variants(&e).iter().map(|x| x.to_string()).collect();
        assert_eq!(
            v,
            [
                "/html[1]/body[1]/ul[2]/li[3]",
                "/html[1]/body[1]/ul[2]/li",
                "/html[1]/body[1]/ul/li",
                "/html[1]/body/ul/li",
                "/html/body/ul/li",
            ]
        );
    }
}
