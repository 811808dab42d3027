//! Command-line front end: `run`, `mutate`, `eval`, `history` and `corpus`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::dom::{parse_html_bytes, DomTree};
use crate::engine::{execute_wrapper_with, ExecuteOptions, ExecutionContext, Status};
use crate::eval::{
    evaluate_corpus, format_table, format_tables, generate_corpus, load_corpus, mutate, write_corpus, CorpusConfig,
    EvalConfig, MutationOp, MutationSpec,
};
use crate::repo::{summarize, RepoError, Store, VersionSel};
use crate::treematch::Algorithm;
use crate::wrapper::Wrapper;

/// Exit status for a successful command, including adapted runs.
pub const EXIT_OK: u8 = 0;
/// Extraction finished but some rule could not be satisfied.
pub const EXIT_FAILED: u8 = 1;
/// Bad arguments, unreadable or invalid input, storage errors.
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Simple,
    Weighted,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Simple => Algorithm::Simple,
            AlgorithmArg::Weighted => Algorithm::Weighted,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rewrap", version, about = "Run, repair and evaluate adaptive web wrappers")]
pub struct Cli {
    /// Wrapper repository directory.
    #[arg(long, global = true, default_value = ".rewrap-store")]
    pub store: PathBuf,
    /// Force one tree matching algorithm for every rule.
    #[arg(long, global = true, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a wrapper over a bundle of page snapshots.
    Run {
        wrapper: PathBuf,
        #[arg(required = true)]
        pages: Vec<PathBuf>,
        /// Commit an adapted wrapper to the store.
        #[arg(long)]
        commit: bool,
        /// Disable repair; report failures only.
        #[arg(long)]
        no_adapt: bool,
        /// Write the adapted wrapper here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Apply seeded structural mutations to a page.
    Mutate {
        page: PathBuf,
        /// Comma-separated operations; all kinds by default.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<MutationOp>,
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
        /// Mutated page; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ground-truth map from original to new node paths.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score wrappers against a mutation corpus.
    Eval {
        corpus: PathBuf,
        #[arg(long)]
        no_adapt: bool,
        /// Report weighted and simple matching side by side.
        #[arg(long)]
        compare: bool,
    },
    /// Show the version chain of a stored wrapper.
    History { name: String },
    /// Generate a synthetic mutation corpus.
    Corpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        wrappers: usize,
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
    },
}

#[derive(Debug)]
struct CliError(String);

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

fn write(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

fn load_wrapper(path: &Path) -> Result<Wrapper, CliError> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    Wrapper::from_json(&text).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

fn load_page(path: &Path) -> Result<DomTree, CliError> {
    parse_html_bytes(&read(path)?, path.display().to_string()).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

fn force_algorithm(wrapper: &Wrapper, algorithm: Option<AlgorithmArg>) -> Wrapper {
    crate::eval::run::configured_wrapper(
        wrapper,
        &EvalConfig {
            algorithm: algorithm.map(Algorithm::from),
            adapt: true,
        },
    )
}

/// Commits the original first when the store has no history for it, then
/// the adapted version.
fn commit_adapted(store: &Store, original: &Wrapper, adapted: &Wrapper, reports: &[crate::engine::AdaptationReport]) -> Result<u64, CliError> {
    match store.history(&original.name) {
        Ok(_) => {}
        Err(RepoError::NotFound(_)) => {
            store.commit(original, Vec::new())?;
        }
        Err(e) => return Err(e.into()),
    }
    Ok(store.commit(adapted, summarize(reports))?.version)
}

fn cmd_run(cli: &Cli, wrapper: &Path, pages: &[PathBuf], commit: bool, no_adapt: bool, save: Option<&Path>) -> Result<u8, CliError> {
    let original = load_wrapper(wrapper)?;
    let pages = pages.iter().map(|p| load_page(p)).collect::<Result<Vec<_>, _>>()?;
    let ctx = ExecutionContext::new(pages)?;
    let effective = force_algorithm(&original, cli.algorithm);
    let exec = execute_wrapper_with(&effective, &ctx, ExecuteOptions { adapt: !no_adapt })?;
    let status = exec.status();

    let mut committed = None;
    if let Some(adapted) = &exec.adapted {
        if let Some(path) = save {
            write(path, &adapted.to_json())?;
        }
        if commit {
            let store = Store::open(&cli.store)?;
            committed = Some(commit_adapted(&store, &original, adapted, &exec.reports)?);
        }
    }

    let mut out = std::io::stdout().lock();
    match cli.format {
        Format::Json => {
            let doc = json!({
                "wrapper": original.name,
                "status": status,
                "results": exec.results,
                "reports": exec.reports,
                "adapted_version": exec.adapted.as_ref().map(|w| w.version),
                "committed_version": committed,
            });
            writeln!(out, "{}", to_json(&doc))?;
        }
        Format::Table => {
            writeln!(out, "wrapper {} status {status}", original.name)?;
            for name in rule_names(&original) {
                let results = exec.find(&name);
                let found: usize = results.iter().map(|r| r.matches.len()).sum();
                let worst = results.iter().fold(Status::Ok, |acc, r| acc.worst(r.status));
                writeln!(out, "  {name:<20} {found:>5} match(es)  {worst}")?;
            }
            for r in &exec.reports {
                writeln!(
                    out,
                    "  repair {:<13} {:<20} {}",
                    if r.repaired { "ok" } else { "failed" },
                    r.rule_name,
                    r.detail
                )?;
            }
            if let Some(v) = committed {
                writeln!(out, "committed version {v}")?;
            }
        }
    }
    Ok(if status == Status::Failed { EXIT_FAILED } else { EXIT_OK })
}

fn rule_names(wrapper: &Wrapper) -> Vec<String> {
    fn go(rules: &[crate::wrapper::Rule], out: &mut Vec<String>) {
        for r in rules {
            out.push(r.name.clone());
            go(&r.children, out);
        }
    }
    let mut out = Vec::new();
    go(&wrapper.rules, &mut out);
    out
}

fn cmd_mutate(cli: &Cli, page: &Path, ops: &[MutationOp], rate: f64, out: Option<&Path>, truth: Option<&Path>) -> Result<u8, CliError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CliError(format!("rate must lie in [0, 1], got {rate}")));
    }
    let tree = load_page(page)?;
    let spec = MutationSpec {
        operations: if ops.is_empty() { MutationOp::ALL.to_vec() } else { ops.to_vec() },
        seed: cli.seed,
        rate,
    };
    let m = mutate(&tree, &spec);
    let html = m.tree.to_html();
    match out {
        Some(path) => write(path, &html)?,
        None => std::io::stdout().lock().write_all(html.as_bytes())?,
    }
    if let Some(path) = truth {
        let doc = json!({ "spec": spec, "applied": m.applied, "mapping": m.truth });
        write(path, &to_json(&doc))?;
    }
    Ok(EXIT_OK)
}

fn cmd_eval(cli: &Cli, corpus: &Path, no_adapt: bool, compare: bool) -> Result<u8, CliError> {
    let cases = load_corpus(corpus)?;
    let mut out = std::io::stdout().lock();
    if compare {
        let weighted = evaluate_corpus(
            &cases,
            &EvalConfig {
                algorithm: Some(Algorithm::Weighted),
                adapt: !no_adapt,
            },
        );
        let simple = evaluate_corpus(
            &cases,
            &EvalConfig {
                algorithm: Some(Algorithm::Simple),
                adapt: !no_adapt,
            },
        );
        match cli.format {
            Format::Json => writeln!(out, "{}", to_json(&json!({ "weighted": weighted, "simple": simple })))?,
            Format::Table => write!(out, "{}", format_tables(&[("weighted", &weighted), ("simple", &simple)]))?,
        }
    } else {
        let report = evaluate_corpus(
            &cases,
            &EvalConfig {
                algorithm: cli.algorithm.map(Algorithm::from),
                adapt: !no_adapt,
            },
        );
        match cli.format {
            Format::Json => writeln!(out, "{}", to_json(&report))?,
            Format::Table => write!(out, "{}", format_table(&report))?,
        }
    }
    Ok(EXIT_OK)
}

fn cmd_history(cli: &Cli, name: &str) -> Result<u8, CliError> {
    let store = Store::open(&cli.store)?;
    let records = store.history(name)?;
    let latest = store.checkout(name, VersionSel::Latest)?;
    let mut out = std::io::stdout().lock();
    match cli.format {
        Format::Json => writeln!(out, "{}", to_json(&records))?,
        Format::Table => {
            writeln!(out, "{name} (latest v{})", latest.version)?;
            for r in &records {
                writeln!(
                    out,
                    "  v{:<4} parent {:<6} {}  {}",
                    r.version,
                    r.parent_version.map_or_else(|| "-".to_string(), |p| format!("v{p}")),
                    r.timestamp.format("%Y-%m-%dT%H:%M:%SZ"),
                    &r.content_digest[..12]
                )?;
                for c in &r.change_summary {
                    writeln!(out, "        {} ({}): {}", c.rule_name, c.trigger, c.delta)?;
                }
            }
        }
    }
    Ok(EXIT_OK)
}

fn cmd_corpus(cli: &Cli, dir: &Path, wrappers: usize, rate: f64) -> Result<u8, CliError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CliError(format!("rate must lie in [0, 1], got {rate}")));
    }
    let cases = generate_corpus(&CorpusConfig {
        wrappers_per_scenario: wrappers,
        rate,
        seed: cli.seed,
        ..CorpusConfig::default()
    });
    write_corpus(dir, &cases)?;
    let doc = json!({ "dir": dir.display().to_string(), "cases": cases.len(), "rate": rate, "seed": cli.seed });
    writeln!(std::io::stdout().lock(), "{}", to_json(&doc))?;
    Ok(EXIT_OK)
}

pub fn run(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Run {
            wrapper,
            pages,
            commit,
            no_adapt,
            save,
        } => cmd_run(cli, wrapper, pages, *commit, *no_adapt, save.as_deref()),
        Command::Mutate {
            page,
            ops,
            rate,
            out,
            truth,
        } => cmd_mutate(cli, page, ops, *rate, out.as_deref(), truth.as_deref()),
        Command::Eval {
            corpus,
            no_adapt,
            compare,
        } => cmd_eval(cli, corpus, *no_adapt, *compare),
        Command::History { name } => cmd_history(cli, name),
        Command::Corpus { dir, wrappers, rate } => cmd_corpus(cli, dir, *wrappers, *rate),
    };
    match result {
        Ok(code) => code,
        Err(CliError(msg)) => {
            eprintln!("rewrap: {msg}");
            EXIT_USAGE
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(&cli))
}
