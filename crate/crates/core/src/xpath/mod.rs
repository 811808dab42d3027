//! A small XPath subset: child and descendant steps, name tests, and
//! position / attribute / attribute-regex / text predicates.

mod eval;
mod plan;

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dom::NodePath;

pub use eval::{evaluate, evaluate_from, relaxation_variants};
pub use plan::{
    anchor_locator, apply_plan, classify_locator, apply_plan_with, detect_anchors, generate_plan, generate_plan_within,
    AnchorKind, AnchorPoint, FallbackPlan, HeuristicTag, PlanEntry, PlanOptions, Used,
};

#[derive(Debug, Error, PartialEq)]
pub enum XPathError {
    #[error("xpath syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("invalid regular expression {0:?}")]
    Regex(String),
    #[error("target path {0} does not resolve")]
    Path(NodePath),
    #[error("no locator in the plan satisfied the constraints")]
    PlanExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Child,
    Descendant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NameTest {
    Any,
    Name(String),
}

impl NameTest {
    pub fn matches(&self, label: &str) -> bool {
        match self {
            NameTest::Any => true,
            NameTest::Name(n) => n == label,
        }
    }
}

/// A compiled regular expression compared by its source text.
#[derive(Debug, Clone)]
pub struct Pattern(Regex);

impl Pattern {
    pub fn new(source: &str) -> Result<Self, XPathError> {
        Regex::new(source)
            .map(Pattern)
            .map_err(|_| XPathError::Regex(source.to_string()))
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn is_match(&self, s: &str) -> bool {
        self.0.is_match(s)
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Pattern::new(&s).map_err(serde::de::Error::custom)
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.as_str() == other.as_str()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    /// 1-based.
    Position(usize),
    AttrEquals { name: String, value: String },
    AttrMatches { name: String, pattern: Pattern },
    TextEquals(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub axis: Axis,
    pub name: NameTest,
    pub predicates: Vec<Predicate>,
}

impl Step {
    pub fn new(axis: Axis, name: NameTest) -> Self {
        Step {
            axis,
            name,
            predicates: Vec::new(),
        }
    }

    pub fn child(name: &str) -> Self {
        Step::new(Axis::Child, name_test(name))
    }

    pub fn descendant(name: &str) -> Self {
        Step::new(Axis::Descendant, name_test(name))
    }

    pub fn with(mut self, predicate: Predicate) -> Self {
        self.predicates.push(predicate);
        self
    }

    pub fn has_position(&self) -> bool {
        self.predicates.iter().any(|p| matches!(p, Predicate::Position(_)))
    }
}

fn name_test(name: &str) -> NameTest {
    if name == "*" {
        NameTest::Any
    } else {
        NameTest::Name(name.to_string())
    }
}

/// An absolute expression starts at the document; a relative one at a
/// context element (written with a leading `.`).
#[derive(Debug, Clone, PartialEq)]
pub struct XPathExpr {
    pub absolute: bool,
    pub steps: Vec<Step>,
}

impl XPathExpr {
    pub fn absolute(steps: Vec<Step>) -> Self {
        XPathExpr { absolute: true, steps }
    }

    pub fn relative(steps: Vec<Step>) -> Self {
        XPathExpr { absolute: false, steps }
    }

    pub fn then(mut self, more: impl IntoIterator<Item = Step>) -> Self {
        self.steps.extend(more);
        self
    }

    pub fn parse(s: &str) -> Result<Self, XPathError> {
        Parser::new(s).parse()
    }
}

impl fmt::Display for XPathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.absolute {
            f.write_str(".")?;
        }
        for step in &self.steps {
            f.write_str(match step.axis {
                Axis::Child => "/",
                Axis::Descendant => "//",
            })?;
            match &step.name {
                NameTest::Any => f.write_str("*")?,
                NameTest::Name(n) => f.write_str(n)?,
            }
            for pred in &step.predicates {
                match pred {
                    Predicate::Position(i) => write!(f, "[{i}]")?,
                    Predicate::AttrEquals { name, value } => write!(f, "[@{name}={}]", literal(value))?,
                    Predicate::AttrMatches { name, pattern } => {
                        write!(f, "[matches(@{name},{})]", literal(pattern.as_str()))?
                    }
                    Predicate::TextEquals(t) => write!(f, "[text()={}]", literal(t))?,
                }
            }
        }
        Ok(())
    }
}

/// XPath 1.0 string literal; values holding both quote kinds use `concat`.
fn literal(s: &str) -> String {
    if !s.contains('\'') {
        format!("'{s}'")
    } else if !s.contains('"') {
        format!("\"{s}\"")
    } else {
        let parts: Vec<String> = s
            .split('\'')
            .map(|p| format!("'{p}'"))
            .collect::<Vec<_>>();
        format!("concat({})", parts.join(",\"'\","))
    }
}

impl FromStr for XPathExpr {
    type Err = XPathError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        XPathExpr::parse(s)
    }
}

impl Serialize for XPathExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for XPathExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        XPathExpr::parse(&s).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, XPathError> {
        Err(XPathError::Syntax {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), XPathError> {
        if self.eat(token) {
            Ok(())
        } else {
            self.err(format!("expected {token:?}"))
        }
    }

    fn parse(mut self) -> Result<XPathExpr, XPathError> {
        self.skip_ws();
        let absolute = !self.eat(".");
        let mut steps = Vec::new();
        loop {
            self.skip_ws();
            if self.rest().is_empty() {
                break;
            }
            let axis = if self.eat("//") {
                Axis::Descendant
            } else if self.eat("/") {
                Axis::Child
            } else {
                return self.err("expected '/' or '//'");
            };
            let name = self.name_test()?;
            let mut step = Step::new(axis, name);
            while self.eat("[") {
                step.predicates.push(self.predicate()?);
                self.expect("]")?;
            }
            steps.push(step);
        }
        if steps.is_empty() && absolute {
            return self.err("empty expression");
        }
        Ok(XPathExpr { absolute, steps })
    }

    fn ident(&mut self) -> Result<String, XPathError> {
        self.skip_ws();
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | ':' | '.')))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return self.err("expected a name");
        }
        let name = self.rest()[..len].to_string();
        self.pos += len;
        Ok(name)
    }

    fn name_test(&mut self) -> Result<NameTest, XPathError> {
        if self.eat("*") {
            Ok(NameTest::Any)
        } else {
            Ok(NameTest::Name(self.ident()?.to_ascii_lowercase()))
        }
    }

    fn predicate(&mut self) -> Result<Predicate, XPathError> {
        self.skip_ws();
        if self.rest().starts_with(|c: char| c.is_ascii_digit()) {
            let len = self.rest().find(|c: char| !c.is_ascii_digit()).unwrap_or(self.rest().len());
            let n: usize = self.rest()[..len].parse().expect("digits");
            if n == 0 {
                return self.err("positions are 1-based");
            }
            self.pos += len;
            return Ok(Predicate::Position(n));
        }
        if self.eat("@") {
            let name = self.ident()?.to_ascii_lowercase();
            self.expect("=")?;
            let value = self.literal()?;
            return Ok(Predicate::AttrEquals { name, value });
        }
        if self.eat("matches(") {
            self.expect("@")?;
            let name = self.ident()?.to_ascii_lowercase();
            self.expect(",")?;
            let source = self.literal()?;
            self.expect(")")?;
            return Ok(Predicate::AttrMatches {
                name,
                pattern: Pattern::new(&source)?,
            });
        }
        if self.eat("text()") {
            self.expect("=")?;
            return Ok(Predicate::TextEquals(self.literal()?));
        }
        self.err("unsupported predicate")
    }

    fn literal(&mut self) -> Result<String, XPathError> {
        self.skip_ws();
        if self.eat("concat(") {
            let mut out = self.literal()?;
            while self.eat(",") {
                out.push_str(&self.literal()?);
            }
            self.expect(")")?;
            return Ok(out);
        }
        let quote = match self.rest().chars().next() {
            Some(q @ ('\'' | '"')) => q,
            _ => return self.err("expected a string literal"),
        };
        let body = &self.rest()[1..];
        let Some(end) = body.find(quote) else {
            return self.err("unterminated string literal");
        };
        let value = body[..end].to_string();
        self.pos += end + 2;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_display_round_trip() {
        for src in [
            "/html/body/p",
            "//li[2]",
            "//*[@id='nav']",
            "//div[@class='a b'][3]/span",
            ".//span[matches(@class,'^price-\\d+$')]",
            "./td[text()=\"it's\"]",
            "//a[@title=concat('a',\"'\",'b\"c')]",
            ".",
        ] {
            let e = XPathExpr::parse(src).unwrap();
            let again = XPathExpr::parse(&e.to_string()).unwrap();
            assert_eq!(e, again, "{src}");
        }
        assert_eq!(XPathExpr::parse("//li[2]").unwrap().to_string(), "//li[2]");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(XPathExpr::parse("li"), Err(XPathError::Syntax { .. })));
        assert!(matches!(XPathExpr::parse("//li[0]"), Err(XPathError::Syntax { .. })));
        assert!(matches!(XPathExpr::parse("//li[@x='unterminated]"), Err(XPathError::Syntax { .. })));
        assert!(matches!(XPathExpr::parse("//li[matches(@x,'(')]"), Err(XPathError::Regex(_))));
        assert!(matches!(XPathExpr::parse("//li[last()]"), Err(XPathError::Syntax { .. })));
    }

    #[test]
    fn literal_quoting() {
        assert_eq!(literal("a"), "'a'");
        assert_eq!(literal("it's"), "\"it's\"");
        assert_eq!(literal("a'b\"c"), "concat('a',\"'\",'b\"c')");
    }
}
