mod common;

use rewrap::engine::{execute_wrapper, ExecutionContext};
use rewrap::eval::{generate_corpus, CorpusConfig};
use rewrap::wrapper::{Rule, Wrapper};
use serde_json::Value;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schema/wrapper.v1.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn strip(rules: &mut [Rule]) {
    for r in rules {
        r.plan.fallbacks.clear();
        strip(&mut r.children);
    }
}

fn conforms(schema: &Value, w: &Wrapper) {
    let doc: Value = serde_json::from_str(&w.to_json()).unwrap();
    let errors = common::schema_errors(schema, &doc);
    assert!(errors.is_empty(), "{}: {errors:#?}", w.name);
}

#[test]
fn generated_and_adapted_wrappers_conform() {
    let schema = schema();
    let mut templates = 0;
    for case in generate_corpus(&CorpusConfig {
        wrappers_per_scenario: 3,
        ..CorpusConfig::default()
    }) {
        conforms(&schema, &case.wrapper);
        let mut w = case.wrapper.clone();
        strip(&mut w.rules);
        let exec = execute_wrapper(&w, &ExecutionContext::single(case.mutated.clone())).unwrap();
        if let Some(adapted) = exec.adapted {
            templates += adapted.to_json().matches("\"template\"").count();
            conforms(&schema, &adapted);
        }
    }
    assert!(templates > 0);
}

#[test]
fn schema_rejects_unknown_and_missing_keys() {
    let schema = schema();
    let case = generate_corpus(&CorpusConfig {
        wrappers_per_scenario: 1,
        ..CorpusConfig::default()
    })
    .remove(0);
    let good: Value = serde_json::from_str(&case.wrapper.to_json()).unwrap();

    let mut extra = good.clone();
    extra["rules"][0]["colour"] = Value::from("blue");
    assert!(!common::schema_errors(&schema, &extra).is_empty());

    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("version");
    assert!(!common::schema_errors(&schema, &missing).is_empty());

    let mut wrong = good;
    wrong["version"] = Value::from("one");
    assert!(!common::schema_errors(&schema, &wrong).is_empty());
}
