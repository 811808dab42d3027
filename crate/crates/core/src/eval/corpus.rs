//! Synthetic scenarios: listing pages, hand-shaped wrappers over them, and
//! seeded mutations with ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mutate::{mutate, GroundTruth, MutationOp, MutationSpec};
use super::EvalError;
use crate::dom::{parse_html, serialize, DomNode, DomTree, NodePath};
use crate::treematch::Algorithm;
use crate::wrapper::{capture_example, AdaptationConfig, IntegrityConstraint, Rule, Threshold, Trigger, Wrapper};
use crate::xpath::{generate_plan, generate_plan_within, PlanOptions};

pub const SCENARIOS: [&str; 7] = [
    "bookmarks",
    "auction_listing",
    "social_feed",
    "news_portal",
    "search_results",
    "price_comparison",
    "tech_blog",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTruth {
    /// Expected nodes of the original page per rule name.
    pub expected: BTreeMap<String, Vec<NodePath>>,
    pub mapping: GroundTruth,
    pub spec: MutationSpec,
    #[serde(default)]
    pub applied: BTreeMap<MutationOp, usize>,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub scenario: String,
    pub name: String,
    pub original: DomTree,
    pub mutated: DomTree,
    pub wrapper: Wrapper,
    pub truth: CaseTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub wrappers_per_scenario: usize,
    pub rate: f64,
    pub seed: u64,
    pub operations: Vec<MutationOp>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            wrappers_per_scenario: 10,
            rate: 0.15,
            seed: 2024,
            operations: MutationOp::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Words(&'static [&'static str], usize),
    Integer(u32, u32),
    Price,
    Date,
    Clock,
    Url,
    Handle,
}

#[derive(Clone, Copy)]
struct FieldDef {
    name: &'static str,
    tag: &'static str,
    class: &'static str,
    kind: Kind,
    optional: bool,
}

enum Part {
    Field(usize),
    Group(&'static str, &'static str, Vec<Part>),
    Fixed(&'static str, &'static str, &'static str),
}

struct ScenarioDef {
    name: &'static str,
    title: &'static str,
    container: (&'static str, &'static str, &'static str),
    /// Intermediate element between container and records, e.g. `tbody`.
    inner: Option<&'static str>,
    record: (&'static str, &'static str),
    fields: Vec<FieldDef>,
    layout: Vec<Part>,
}

const NOUNS: &[&str] = &[
    "garden", "engine", "river", "camera", "lantern", "harbor", "violin", "compass", "meadow", "rocket", "marble",
    "tablet", "canyon", "saddle", "beacon", "orchid", "glacier", "pepper", "anchor", "falcon",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "vintage", "rapid", "golden", "hidden", "modern", "tiny", "bold", "rustic", "silver", "lucky",
    "northern", "gentle", "bright",
];
const VERBS: &[&str] = &[
    "builds", "opens", "explains", "reviews", "tracks", "shows", "moves", "finds", "tests", "ships", "collects",
];
const NAMES: &[&str] = &[
    "ada", "bruno", "chiara", "dmitri", "elena", "farid", "greta", "hugo", "ines", "jonas", "kaito", "lena",
];
const TAGS: &[&str] = &["rust", "web", "travel", "music", "food", "design", "science", "retro", "diy"];
const SHOPS: &[&str] = &["MegaStore", "ShopRight", "PrimeDeals", "BudgetBox", "CityMart", "NetOutlet"];

fn field(name: &'static str, tag: &'static str, class: &'static str, kind: Kind) -> FieldDef {
    FieldDef {
        name,
        tag,
        class,
        kind,
        optional: false,
    }
}

fn optional(mut f: FieldDef) -> FieldDef {
    f.optional = true;
    f
}

fn scenario_defs() -> Vec<ScenarioDef> {
    use Part::*;
    vec![
        ScenarioDef {
            name: "bookmarks",
            title: "My bookmarks",
            container: ("ul", "bookmarks", "bm-list"),
            inner: None,
            record: ("li", "bookmark"),
            fields: vec![
                field("title", "a", "bm-title", Kind::Words(NOUNS, 3)),
                field("url", "span", "bm-url", Kind::Url),
                optional(field("tags", "span", "bm-tags", Kind::Words(TAGS, 2))),
                field("added", "span", "bm-date", Kind::Date),
            ],
            layout: vec![Field(0), Field(1), Group("div", "bm-meta", vec![Field(2), Field(3)])],
        },
        ScenarioDef {
            name: "auction_listing",
            title: "Current auctions",
            container: ("div", "auctions", "results"),
            inner: None,
            record: ("div", "item"),
            fields: vec![
                field("title", "a", "item-title", Kind::Words(ADJECTIVES, 3)),
                field("bids", "span", "bids", Kind::Integer(0, 80)),
                field("price", "span", "price", Kind::Price),
                optional(field("ends", "span", "ends", Kind::Clock)),
            ],
            layout: vec![
                Group("h3", "item-head", vec![Field(0)]),
                Group("div", "meta", vec![Field(1), Field(2), Field(3)]),
                Fixed("button", "watch", "Watch"),
            ],
        },
        ScenarioDef {
            name: "social_feed",
            title: "Feed",
            container: ("section", "feed", "timeline"),
            inner: None,
            record: ("article", "post"),
            fields: vec![
                field("author", "span", "author", Kind::Handle),
                field("posted", "time", "posted", Kind::Date),
                field("body", "p", "body", Kind::Words(NOUNS, 6)),
                field("likes", "span", "likes", Kind::Integer(0, 999)),
                optional(field("shares", "span", "shares", Kind::Integer(0, 99))),
            ],
            layout: vec![
                Group("header", "post-head", vec![Field(0), Field(1)]),
                Field(2),
                Group("footer", "post-foot", vec![Field(3), Field(4)]),
            ],
        },
        ScenarioDef {
            name: "news_portal",
            title: "Headlines",
            container: ("div", "headlines", "stories"),
            inner: None,
            record: ("div", "story"),
            fields: vec![
                field("headline", "h2", "headline", Kind::Words(ADJECTIVES, 4)),
                optional(field("teaser", "p", "teaser", Kind::Words(VERBS, 7))),
                field("byline", "span", "byline", Kind::Handle),
                field("date", "span", "date", Kind::Date),
            ],
            layout: vec![Field(0), Field(1), Group("div", "story-info", vec![Field(2), Field(3)])],
        },
        ScenarioDef {
            name: "search_results",
            title: "Search",
            container: ("ol", "serp", "results"),
            inner: None,
            record: ("li", "result"),
            fields: vec![
                field("link", "a", "result-link", Kind::Words(NOUNS, 4)),
                field("url", "cite", "result-url", Kind::Url),
                optional(field("snippet", "p", "snippet", Kind::Words(VERBS, 8))),
            ],
            layout: vec![Group("h3", "result-head", vec![Field(0)]), Field(1), Field(2)],
        },
        ScenarioDef {
            name: "price_comparison",
            title: "Compare prices",
            container: ("table", "offers", "offer-table"),
            inner: Some("tbody"),
            record: ("tr", "offer"),
            fields: vec![
                field("shop", "td", "shop", Kind::Words(SHOPS, 1)),
                field("price", "td", "price", Kind::Price),
                field("shipping", "td", "shipping", Kind::Price),
                optional(field("stock", "td", "stock", Kind::Integer(0, 50))),
            ],
            layout: vec![Field(0), Field(1), Field(2), Field(3)],
        },
        ScenarioDef {
            name: "tech_blog",
            title: "Engineering blog",
            container: ("main", "content", "entries"),
            inner: None,
            record: ("div", "entry"),
            fields: vec![
                field("title", "a", "entry-title", Kind::Words(NOUNS, 3)),
                field("author", "span", "entry-author", Kind::Handle),
                field("comments", "span", "comments", Kind::Integer(0, 300)),
                optional(field("summary", "p", "summary", Kind::Words(VERBS, 9))),
            ],
            layout: vec![
                Group("h2", "entry-head", vec![Field(0)]),
                Group("div", "entry-info", vec![Field(1), Field(2)]),
                Field(3),
            ],
        },
    ]
}

fn datatype(kind: Kind) -> IntegrityConstraint {
    let pattern = |p: &str| IntegrityConstraint::pattern(p).expect("static pattern");
    match kind {
        Kind::Integer(..) => IntegrityConstraint::integer(),
        Kind::Price => IntegrityConstraint::decimal(),
        Kind::Date => pattern(r"\d{4}-\d{2}-\d{2}"),
        Kind::Clock => pattern(r"\d{2}:\d{2}"),
        Kind::Url => pattern(r"https?://\S+"),
        Kind::Handle => pattern(r"@\w+"),
        Kind::Words(..) => pattern(r"\S.*"),
    }
}

fn sentence(rng: &mut impl Rng, words: &[&str], n: usize) -> String {
    (0..n)
        .map(|_| *words.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn value(rng: &mut impl Rng, kind: Kind) -> String {
    match kind {
        Kind::Words(words, n) => {
            let mut s = sentence(rng, words, n);
            if let Some(first) = s.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            s
        }
        Kind::Integer(lo, hi) => rng.gen_range(lo..=hi).to_string(),
        Kind::Price => format!("{}.{:02}", rng.gen_range(1..900), rng.gen_range(0..100)),
        Kind::Date => format!(
            "20{:02}-{:02}-{:02}",
            rng.gen_range(18..25),
            rng.gen_range(1..13),
            rng.gen_range(1..29)
        ),
        Kind::Clock => format!("{:02}:{:02}", rng.gen_range(0..24), rng.gen_range(0..60)),
        Kind::Url => format!(
            "https://{}.example/{}",
            NOUNS.choose(rng).expect("non-empty"),
            NOUNS.choose(rng).expect("non-empty")
        ),
        Kind::Handle => format!("@{}", NAMES.choose(rng).expect("non-empty")),
    }
}

fn el(tag: &str) -> DomNode {
    DomNode::element(tag)
}

fn classed(tag: &str, class: &str) -> DomNode {
    el(tag).with_attr("class", class)
}

const ROLE: &str = "data-role";

fn build_parts(parts: &[Part], def: &ScenarioDef, used: &[bool], rng: &mut impl Rng) -> Vec<DomNode> {
    let mut out = Vec::new();
    for part in parts {
        match part {
            Part::Field(i) => {
                if !used[*i] {
                    continue;
                }
                let f = def.fields[*i];
                let text = value(rng, f.kind);
                let mut node = classed(f.tag, f.class)
                    .with_text(text)
                    .with_attr(ROLE, format!("field:{}", f.name));
                if f.tag == "a" {
                    node = node.with_attr("href", format!("/{}/{}", def.name, rng.gen_range(100..10_000)));
                }
                out.push(node);
            }
            Part::Group(tag, class, inner) => {
                let children = build_parts(inner, def, used, rng);
                if !children.is_empty() {
                    out.push(classed(tag, class).with_children(children));
                }
            }
            Part::Fixed(tag, class, text) => out.push(classed(tag, class).with_text(*text)),
        }
    }
    out
}

fn chrome_nav(rng: &mut impl Rng) -> DomNode {
    let n = rng.gen_range(3..=6);
    let items = (0..n)
        .map(|i| {
            el("li").with_children(vec![el("a")
                .with_attr("href", format!("/section/{i}"))
                .with_text(value(rng, Kind::Words(NOUNS, 1)))])
        })
        .collect();
    el("div")
        .with_attr("id", "header")
        .with_children(vec![
            el("h1").with_text("Site"),
            classed("ul", "nav").with_children(items),
        ])
}

fn sidebar(rng: &mut impl Rng) -> DomNode {
    let n = rng.gen_range(2..=5);
    let items = (0..n)
        .map(|_| {
            el("li").with_children(vec![el("a")
                .with_attr("href", "/popular")
                .with_text(value(rng, Kind::Words(ADJECTIVES, 2)))])
        })
        .collect();
    classed("div", "sidebar").with_children(vec![
        el("h4").with_text("Popular"),
        classed("ul", "popular").with_children(items),
    ])
}

/// Page with `data-role` markers on the container, records and fields.
fn marked_page(def: &ScenarioDef, case: usize, rng: &mut impl Rng) -> DomNode {
    let n_records = rng.gen_range(4..=9);
    let mut used = vec![true; def.fields.len()];
    if case % 3 == 1 {
        if let Some(i) = def.fields.iter().position(|f| f.optional) {
            used[i] = false;
        }
    }
    let records: Vec<DomNode> = (0..n_records)
        .map(|_| {
            classed(def.record.0, def.record.1)
                .with_attr(ROLE, "record")
                .with_children(build_parts(&def.layout, def, &used, rng))
        })
        .collect();
    let (ctag, cid, cclass) = def.container;
    let mut container = classed(ctag, cclass).with_attr(ROLE, "container");
    if case.is_multiple_of(2) {
        container = container.with_attr("id", cid);
    }
    container = match def.inner {
        Some(inner) => container.with_children(vec![el(inner).with_children(records)]),
        None => container.with_children(records),
    };

    let mut main = vec![el("h2").with_text(def.title)];
    if rng.gen_bool(0.5) {
        main.push(classed("div", "banner").with_children(vec![el("p").with_text(value(rng, Kind::Words(VERBS, 5)))]));
    }
    main.push(container);
    let mut wrap = vec![classed("div", "main").with_children(main)];
    if case % 2 == 1 || rng.gen_bool(0.3) {
        wrap.insert(0, sidebar(rng));
    }
    el("html").with_children(vec![
        el("head").with_children(vec![el("title").with_text(format!("{} {}", def.title, case))]),
        el("body").with_children(vec![
            chrome_nav(rng),
            el("div").with_attr("id", "wrap").with_children(wrap),
            el("div")
                .with_attr("id", "footer")
                .with_children(vec![el("p").with_text("Contact us")]),
        ]),
    ])
}

fn strip_roles(node: &mut DomNode) {
    node.attributes.shift_remove(ROLE);
    for c in &mut node.children {
        strip_roles(c);
    }
}

fn captured_at() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date")
}

fn adaptive(threshold: Threshold) -> AdaptationConfig {
    AdaptationConfig::new(Algorithm::Weighted, threshold).with_triggers([Trigger::TopDown, Trigger::BottomUp])
}

/// Builds the wrapper for one page from the role markers; the returned tree is
/// the canonical (re-parsed) page without markers.
fn build_case_wrapper(def: &ScenarioDef, name: &str, marked: DomNode, source: &str) -> (DomTree, Wrapper, BTreeMap<String, Vec<NodePath>>) {
    let tree = DomTree::new(marked, source);
    let mut container = None;
    let mut records = Vec::new();
    let mut fields: BTreeMap<String, Vec<NodePath>> = BTreeMap::new();
    for (path, node) in tree.root.walk() {
        match node.attr(ROLE) {
            Some("container") => container = Some(path),
            Some("record") => records.push(path),
            Some(role) => {
                if let Some(f) = role.strip_prefix("field:") {
                    fields.entry(f.to_string()).or_default().push(path);
                }
            }
            None => {}
        }
    }
    let mut clean = tree.root.clone();
    strip_roles(&mut clean);
    let tree = parse_html(&serialize(&clean), source);
    let container = container.expect("container marker");
    let first = records[0].clone();
    let now = captured_at();
    let opts = PlanOptions::default();

    let mut field_rules = Vec::new();
    for f in def.fields.iter() {
        let Some(paths) = fields.get(f.name) else { continue };
        let target = paths[0].clone();
        let plan = generate_plan_within(&tree, Some(&first), std::slice::from_ref(&target), opts)
            .expect("field plan");
        let level = target.depth() - first.depth();
        let example = capture_example(&tree, &target, level, now).expect("field example");
        field_rules.push(
            Rule::new(f.name, plan)
                .with_constraints(vec![IntegrityConstraint::exactly_one(), datatype(f.kind)])
                .with_adaptation(adaptive(Threshold::Interval { low: 0.3, high: 1.0 }), example),
        );
    }
    let record_plan = generate_plan_within(&tree, Some(&container), &records, opts).expect("record plan");
    let record = Rule::new("record", record_plan)
        .with_constraints(vec![IntegrityConstraint::at_least_one()])
        .with_adaptation(
            adaptive(Threshold::Constant(0.5)),
            capture_example(&tree, &first, 0, now).expect("record example"),
        )
        .with_children(field_rules);
    let container_rule = Rule::new("container", generate_plan(&tree, &container, opts).expect("container plan"))
        .with_constraints(vec![IntegrityConstraint::exactly_one()])
        .with_adaptation(
            adaptive(Threshold::Interval { low: 0.3, high: 1.0 }),
            capture_example(&tree, &container, 0, now).expect("container example"),
        )
        .with_children(vec![record]);

    let mut expected = fields;
    expected.insert("container".into(), vec![container]);
    expected.insert("record".into(), records);
    (tree, Wrapper::new(name, vec![container_rule]), expected)
}

fn case_seed(base: u64, scenario: usize, case: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add((scenario as u64) * 1_000 + case as u64)
}

pub fn generate_corpus(config: &CorpusConfig) -> Vec<Case> {
    let mut out = Vec::new();
    for (si, def) in scenario_defs().iter().enumerate() {
        for case in 0..config.wrappers_per_scenario {
            let seed = case_seed(config.seed, si, case);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let name = format!("{}-{:02}", def.name, case);
            let marked = marked_page(def, case, &mut rng);
            let source = format!("{}/{:02}/original.html", def.name, case);
            let (original, wrapper, expected) = build_case_wrapper(def, &name, marked, &source);
            let spec = MutationSpec {
                operations: config.operations.clone(),
                seed,
                rate: config.rate,
            };
            let m = mutate(&original, &spec);
            let mutated = DomTree::new(m.tree.root, format!("{}/{:02}/mutated.html", def.name, case));
            out.push(Case {
                scenario: def.name.to_string(),
                name,
                original,
                mutated,
                wrapper,
                truth: CaseTruth {
                    expected,
                    mapping: m.truth,
                    spec,
                    applied: m.applied,
                },
            });
        }
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<scenario>/<case>/{original.html, mutated.html, wrapper.json, truth.json}`.
pub fn write_corpus(dir: &Path, cases: &[Case]) -> Result<(), EvalError> {
    for case in cases {
        let case_dir = case_dir(dir, case);
        fs::create_dir_all(&case_dir).map_err(io_err(&case_dir))?;
        let files = [
            ("original.html", case.original.to_html()),
            ("mutated.html", case.mutated.to_html()),
            ("wrapper.json", case.wrapper.to_json()),
            (
                "truth.json",
                serde_json::to_string_pretty(&case.truth).expect("truth serializes"),
            ),
        ];
        for (file, content) in files {
            let path = case_dir.join(file);
            fs::write(&path, content).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn case_dir(dir: &Path, case: &Case) -> PathBuf {
    let suffix = case.name.rsplit('-').next().unwrap_or(&case.name);
    dir.join(&case.scenario).join(suffix)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_case(scenario: &str, case_dir: &Path) -> Result<Case, EvalError> {
    let read = |file: &str| {
        let path = case_dir.join(file);
        fs::read_to_string(&path).map_err(io_err(&path))
    };
    let malformed = |file: &str, reason: String| EvalError::Malformed {
        path: case_dir.join(file),
        reason,
    };
    let label = |file: &str| format!("{scenario}/{}/{file}", dir_name(case_dir));
    let original = parse_html(&read("original.html")?, label("original.html"));
    let mutated = parse_html(&read("mutated.html")?, label("mutated.html"));
    let wrapper = Wrapper::from_json(&read("wrapper.json")?).map_err(|e| malformed("wrapper.json", e.to_string()))?;
    let truth: CaseTruth =
        serde_json::from_str(&read("truth.json")?).map_err(|e| malformed("truth.json", e.to_string()))?;
    Ok(Case {
        scenario: scenario.to_string(),
        name: wrapper.name.clone(),
        original,
        mutated,
        wrapper,
        truth,
    })
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads every case below `dir`, scenarios and cases in name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Case>, EvalError> {
    let mut cases = Vec::new();
    for scenario_dir in sorted_dirs(dir)? {
        let scenario = dir_name(&scenario_dir);
        for case_dir in sorted_dirs(&scenario_dir)? {
            cases.push(load_case(&scenario, &case_dir)?);
        }
    }
    if cases.is_empty() {
        return Err(EvalError::Malformed {
            path: dir.to_path_buf(),
            reason: "no cases found".into(),
        });
    }
    Ok(cases)
}
