//! Append-only, versioned wrapper storage on the local file system.
//!
//! Layout: `<root>/<wrapper name>/v<N>.json` holds each version and
//! `<root>/<wrapper name>/log.jsonl` one [`VersionRecord`] per line.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::AdaptationReport;
use crate::wrapper::{Wrapper, WrapperError};

const LOG_FILE: &str = "log.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("version conflict for {name:?}: expected version {expected}, got {found}")]
    Conflict { name: String, expected: u64, found: u64 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt version {version} of {name:?}: {detail}")]
    Corruption { name: String, version: u64, detail: String },
    #[error("invalid wrapper name {0:?}")]
    InvalidName(String),
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEntry {
    pub rule_name: String,
    pub trigger: String,
    pub delta: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version: u64,
    pub parent_version: Option<u64>,
    pub timestamp: DateTime<Utc>,
    pub change_summary: Vec<ChangeEntry>,
    /// SHA-256 of the stored `v<N>.json` bytes, lowercase hex.
    pub content_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSel {
    Latest,
    Number(u64),
}

impl FromStr for VersionSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "latest" {
            return Ok(VersionSel::Latest);
        }
        s.trim_start_matches('v')
            .parse()
            .map(VersionSel::Number)
            .map_err(|_| format!("expected a version number or \"latest\", got {s:?}"))
    }
}

impl fmt::Display for VersionSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionSel::Latest => f.write_str("latest"),
            VersionSel::Number(n) => write!(f, "{n}"),
        }
    }
}

/// One line per repaired rule: what triggered it and how its locator changed.
pub fn summarize(reports: &[AdaptationReport]) -> Vec<ChangeEntry> {
    reports
        .iter()
        .filter(|r| r.repaired)
        .map(|r| {
            let trigger = serde_json::to_value(r.trigger)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let delta = match &r.config_delta {
                Some(d) => format!(
                    "xpath {} -> {}; threshold {} -> {}",
                    d.before.xpath_best,
                    d.after.xpath_best,
                    threshold_text(&d.before.threshold),
                    threshold_text(&d.after.threshold)
                ),
                None => r.detail.clone(),
            };
            ChangeEntry {
                rule_name: r.rule_name.clone(),
                trigger,
                delta,
            }
        })
        .collect()
}

fn threshold_text(t: &crate::wrapper::Threshold) -> String {
    match t {
        crate::wrapper::Threshold::Constant(c) => format!("{c}"),
        crate::wrapper::Threshold::Interval { low, high } => format!("[{low}, {high}]"),
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RepoError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, name: &str) -> Result<PathBuf, RepoError> {
        let ok = !name.is_empty()
            && name != "."
            && name != ".."
            && !name.contains(['/', '\\', '\0'])
            && !name.starts_with('.');
        if !ok {
            return Err(RepoError::InvalidName(name.to_string()));
        }
        Ok(self.root.join(name))
    }

    /// Wrapper names with at least one committed version, sorted.
    pub fn names(&self) -> Result<Vec<String>, RepoError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join(LOG_FILE).is_file() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn commit(&self, wrapper: &Wrapper, summary: Vec<ChangeEntry>) -> Result<VersionRecord, RepoError> {
        self.commit_at(wrapper, summary, Utc::now())
    }

    /// Stores `wrapper` as the next version. Its version must be exactly one
    /// more than the latest stored version (1 for a new wrapper).
    pub fn commit_at(
        &self,
        wrapper: &Wrapper,
        summary: Vec<ChangeEntry>,
        timestamp: DateTime<Utc>,
    ) -> Result<VersionRecord, RepoError> {
        wrapper.validate()?;
        let dir = self.dir(&wrapper.name)?;
        fs::create_dir_all(&dir)?;
        let lock = File::create(dir.join(LOCK_FILE))?;
        lock.lock()?;

        let latest = read_log(&dir)?.last().map(|r| r.version);
        let expected = latest.map_or(1, |v| v + 1);
        if wrapper.version != expected {
            return Err(RepoError::Conflict {
                name: wrapper.name.clone(),
                expected,
                found: wrapper.version,
            });
        }

        let content = wrapper.to_json();
        let record = VersionRecord {
            version: wrapper.version,
            parent_version: latest,
            timestamp,
            change_summary: summary,
            content_digest: digest(content.as_bytes()),
        };

        let final_path = dir.join(version_file(wrapper.version));
        if final_path.exists() {
            return Err(RepoError::Conflict {
                name: wrapper.name.clone(),
                expected,
                found: wrapper.version,
            });
        }
        let tmp = dir.join(format!(".{}.tmp", version_file(wrapper.version)));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(content.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &final_path)?;

        let mut line = serde_json::to_string(&record).map_err(io::Error::other)?;
        line.push('\n');
        let mut log = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        log.write_all(line.as_bytes())?;
        log.sync_all()?;
        drop(lock);
        Ok(record)
    }

    /// The stored wrapper, with its digest checked against the log.
    pub fn checkout(&self, name: &str, version: VersionSel) -> Result<Wrapper, RepoError> {
        let dir = self.dir(name)?;
        let log = self.history(name)?;
        let record = match version {
            VersionSel::Latest => log.last(),
            VersionSel::Number(n) => log.iter().find(|r| r.version == n),
        }
        .ok_or_else(|| RepoError::NotFound(format!("{name} version {version}")))?;
        let corrupt = |detail: String| RepoError::Corruption {
            name: name.to_string(),
            version: record.version,
            detail,
        };
        let bytes = match fs::read(dir.join(version_file(record.version))) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(corrupt("content file missing".into())),
            Err(e) => return Err(e.into()),
        };
        let actual = digest(&bytes);
        if actual != record.content_digest {
            return Err(corrupt(format!(
                "digest {actual} does not match recorded {}",
                record.content_digest
            )));
        }
        let text = String::from_utf8(bytes).map_err(|e| corrupt(e.to_string()))?;
        let wrapper = Wrapper::from_json(&text).map_err(|e| corrupt(e.to_string()))?;
        if wrapper.version != record.version || wrapper.name != name {
            return Err(corrupt("stored name or version differs from the log".into()));
        }
        Ok(wrapper)
    }

    /// Records oldest first.
    pub fn history(&self, name: &str) -> Result<Vec<VersionRecord>, RepoError> {
        let dir = self.dir(name)?;
        let log = read_log(&dir)?;
        if log.is_empty() {
            return Err(RepoError::NotFound(name.to_string()));
        }
        Ok(log)
    }

    /// Checks the version chain and every content digest.
    pub fn verify(&self, name: &str) -> Result<(), RepoError> {
        let log = self.history(name)?;
        let mut parent = None;
        for (i, r) in log.iter().enumerate() {
            if r.version != i as u64 + 1 || r.parent_version != parent {
                return Err(RepoError::Corruption {
                    name: name.to_string(),
                    version: r.version,
                    detail: "version chain is broken".into(),
                });
            }
            self.checkout(name, VersionSel::Number(r.version))?;
            parent = Some(r.version);
        }
        Ok(())
    }
}

fn version_file(version: u64) -> String {
    format!("v{version}.json")
}

fn read_log(dir: &Path) -> Result<Vec<VersionRecord>, RepoError> {
    let file = match File::open(dir.join(LOG_FILE)) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VersionRecord = serde_json::from_str(&line).map_err(|e| RepoError::Corruption {
            name: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            version: n as u64 + 1,
            detail: format!("unreadable log line: {e}"),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wrapper::Rule;
    use crate::xpath::{FallbackPlan, XPathExpr};

    fn wrapper(version: u64) -> Wrapper {
        let mut w = Wrapper::new(
            "shop",
            vec![Rule::new("title", FallbackPlan::single(XPathExpr::parse("//h1").unwrap()))],
        );
        w.version = version;
        w
    }

    #[test]
    fn linear_history() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let r1 = store.commit(&wrapper(1), Vec::new()).unwrap();
        assert_eq!((r1.version, r1.parent_version), (1, None));
        let r2 = store.commit(&wrapper(2), Vec::new()).unwrap();
        assert_eq!(r2.parent_version, Some(1));
        store.commit(&wrapper(3), Vec::new()).unwrap();
        assert!(matches!(store.commit(&wrapper(3), Vec::new()), Err(RepoError::Conflict { .. })));
        assert!(matches!(store.commit(&wrapper(5), Vec::new()), Err(RepoError::Conflict { .. })));
        assert_eq!(store.checkout("shop", VersionSel::Latest).unwrap().version, 3);
        assert_eq!(store.checkout("shop", VersionSel::Number(2)).unwrap(), wrapper(2));
        assert!(matches!(store.checkout("shop", VersionSel::Number(99)), Err(RepoError::NotFound(_))));
        let h = store.history("shop").unwrap();
        assert_eq!(h.iter().map(|r| r.parent_version).collect::<Vec<_>>(), [None, Some(1), Some(2)]);
        store.verify("shop").unwrap();
        assert_eq!(store.names().unwrap(), ["shop"]);
    }

    #[test]
    fn missing_wrapper() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.history("nope"), Err(RepoError::NotFound(_))));
        assert!(matches!(store.history("../x"), Err(RepoError::InvalidName(_))));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.commit(&wrapper(1), Vec::new()).unwrap();
        let path = dir.path().join("shop").join("v1.json");
        let text = fs::read_to_string(&path).unwrap().replace("//h1", "//h2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            store.checkout("shop", VersionSel::Number(1)),
            Err(RepoError::Corruption { .. })
        ));
    }

    #[test]
    fn version_selector_parses() {
        assert_eq!("latest".parse::<VersionSel>().unwrap(), VersionSel::Latest);
        assert_eq!("v4".parse::<VersionSel>().unwrap(), VersionSel::Number(4));
        assert!("x".parse::<VersionSel>().is_err());
    }
}
