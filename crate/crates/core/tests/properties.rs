mod common;

use proptest::prelude::*;
use rewrap::dom::{parse_html, serialize, NodePath};
use rewrap::eval::{compute_metrics, mutate, MutationSpec};
use rewrap::template::{generalize, refine, sample};
use rewrap::treematch::{normalized_stm, simple_tree_matching, weighted_tree_matching, Labeler};
use rewrap::wrapper::parse_fragment;
use rewrap::xpath::{apply_plan, evaluate, generate_plan, relaxation_variants, PlanOptions, Used};

const LABELS: &[&str] = &["div", "span", "p", "ul", "li"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weighted_is_bounded_symmetric_and_reflexive(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tree(&mut rng, LABELS, 5, 4, 40);
        let b = common::random_tree(&mut rng, LABELS, 5, 4, 40);
        let l = Labeler::element_name();
        let ab = weighted_tree_matching(&a, &b, &l);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - weighted_tree_matching(&b, &a, &l)).abs() <= 1e-12);
        prop_assert!((weighted_tree_matching(&a, &a, &l) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn simple_matching_is_bounded(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tree(&mut rng, LABELS, 5, 4, 40);
        let b = common::random_tree(&mut rng, LABELS, 5, 4, 40);
        let l = Labeler::element_name();
        let m = simple_tree_matching(&a, &b, &l);
        prop_assert!(m <= a.size().min(b.size()));
        prop_assert_eq!(m, simple_tree_matching(&b, &a, &l));
        prop_assert_eq!(simple_tree_matching(&a, &a, &l), a.size());
        let n = normalized_stm(&a, &b, &l);
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!((normalized_stm(&a, &a, &l) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn small_trees_agree_with_oracle(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tree(&mut rng, &["a", "b"], 3, 3, 7);
        let mut b = common::random_tree(&mut rng, &["a", "b"], 3, 3, 7);
        b.label = a.label.clone();
        let l = Labeler::element_name();
        prop_assert_eq!(simple_tree_matching(&a, &b, &l), common::brute_force_stm(&a, &b));
    }

    #[test]
    fn pages_round_trip_through_markup(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let page = common::random_page(&mut rng, 40);
        let again = parse_html(&page.to_html(), "page");
        prop_assert_eq!(&again.root, &page.root);
        let body = &page.root.children[1];
        prop_assert_eq!(serialize(&parse_fragment(&serialize(body))), serialize(body));
    }

    #[test]
    fn plans_find_their_target_and_relax_monotonically(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let mut rng = common::rng(seed);
        let page = common::random_page(&mut rng, 40);
        let nodes = page.root.walk();
        let (target, _) = &nodes[pick.index(nodes.len())];
        let plan = generate_plan(&page, target, PlanOptions::default()).unwrap();
        let (found, used) = apply_plan(&plan, &page, &NodePath::root(), &[]).unwrap();
        prop_assert_eq!(found, vec![target.clone()]);
        prop_assert_eq!(used, Used::Best);
        prop_assert!(plan.priorities_increasing());
        let mut previous: Option<Vec<NodePath>> = None;
        for v in relaxation_variants(&plan.best) {
            let hits = evaluate(&v, &page);
            if let Some(prev) = &previous {
                prop_assert!(prev.iter().all(|p| hits.contains(p)));
            }
            previous = Some(hits);
        }
    }

    #[test]
    fn generalized_templates_accept_both_examples(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tree(&mut rng, LABELS, 4, 4, 25);
        let mut b = common::random_tree(&mut rng, LABELS, 4, 4, 25);
        b.label = a.label.clone();
        let l = Labeler::element_name();
        if let Ok(t) = generalize(&a, &b, &l) {
            prop_assert!(t.is_well_formed());
            prop_assert!(t.accepts(&a, &l));
            prop_assert!(t.accepts(&b, &l));
        }
    }

    #[test]
    fn refinement_never_shrinks(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = common::random_tree(&mut rng, LABELS, 4, 3, 20);
        let mut b = common::random_tree(&mut rng, LABELS, 4, 3, 20);
        let mut c = common::random_tree(&mut rng, LABELS, 4, 3, 20);
        b.label = a.label.clone();
        c.label = a.label.clone();
        let l = Labeler::element_name();
        let Ok(t) = generalize(&a, &b, &l) else { return Ok(()) };
        let Ok(wider) = refine(&t, &c, &l) else { return Ok(()) };
        prop_assert!(wider.accepts(&c, &l));
        for _ in 0..10 {
            let s = sample(&t, &l, 3, &mut rng);
            prop_assert!(t.accepts(&s, &l));
            prop_assert!(wider.accepts(&s, &l));
        }
    }

    #[test]
    fn mutation_is_deterministic(seed in any::<u64>(), rate in 0.0f64..0.5) {
        let mut rng = common::rng(seed);
        let page = common::random_page(&mut rng, 40);
        let spec = MutationSpec::all(seed, rate);
        let x = mutate(&page, &spec);
        let y = mutate(&page, &spec);
        prop_assert_eq!(&x.tree.root, &y.tree.root);
        prop_assert_eq!(&x.truth, &y.truth);
        prop_assert_eq!(&x.applied, &y.applied);
        let none = mutate(&page, &MutationSpec::all(seed, 0.0));
        prop_assert_eq!(&none.tree.root, &page.root);
        prop_assert!(none.truth.is_identity());
    }

    #[test]
    fn mutation_truth_points_at_same_labels(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let page = common::random_page(&mut rng, 40);
        let m = mutate(&page, &MutationSpec::all(seed, 0.3));
        for (from, to) in &m.truth.0 {
            if let Some(to) = to.path() {
                let before = page.get(from).unwrap();
                let after = m.tree.get(to).unwrap();
                prop_assert_eq!(&before.label, &after.label);
            }
        }
    }

    #[test]
    fn metrics_stay_in_range(tp in 0u64..5000, fp in 0u64..5000, fn_ in 0u64..5000) {
        let m = compute_metrics(tp, fp, fn_);
        for v in [m.precision, m.recall, m.f1].into_iter().flatten() {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
            prop_assert!(f >= p.min(r) - 0.01 && f <= p.max(r) + 0.01);
        }
        if tp == 0 {
            prop_assert!(m.f1.is_none());
        }
    }
}
