//! `reenactd`: execute audit logs, reenact past transactions, export their
//! provenance and run the differential checker.
//!
//! Exit status is 0 on success, 1 when a verification fails and 2 on usage,
//! input or parse errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use reenact_core::auditlog::{parse_condition, parse_log, ParsedLog};
use reenact_core::history::{execute_history, History, HistoryState};
use reenact_core::mvsemiring::{has_created, TxnId, VersionId};
use reenact_core::provenance::{filter_provenance, transaction_provenance, ProvenanceTable};
use reenact_core::reenact::{evaluate, reenact_history, reenact_transaction, reenact_transaction_opt, ReenactPlan};
use reenact_core::relalg::AnnotatedRelation;
use reenact_core::verify::{check_history, fuzz, Check, FuzzConfig, Stats, Status, Verdict};

#[derive(Parser)]
#[command(name = "reenactd", version, about = "Provenance and reenactment for transactional audit logs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TextOrJson {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a log and print committed relations.
    Run {
        #[arg(long)]
        log: PathBuf,
        /// Versions to print; defaults to the end of the log.
        #[arg(long = "dump-at")]
        dump_at: Vec<VersionId>,
        /// Print the relations as seen inside this transaction instead.
        #[arg(long)]
        txn: Option<String>,
        #[arg(long)]
        rel: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: TextOrJson,
    },
    /// Compile a past transaction into a reenactment query.
    Reenact {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        txn: String,
        #[arg(long)]
        rel: Option<String>,
        /// Use the single-scan form for update/delete/VALUES transactions.
        #[arg(long)]
        opt: bool,
        /// Print the plan without evaluating it.
        #[arg(long = "plan-only")]
        plan_only: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: TextOrJson,
    },
    /// Provenance of a transaction, one row per version it created.
    Provenance {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        txn: String,
        #[arg(long)]
        rel: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: TableFormat,
        /// Keep only rows satisfying this condition, e.g. `U2 AND Amount > 1000`.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Snapshot queries against an executed log.
    History {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        at: VersionId,
        #[arg(long)]
        txn: Option<String>,
        #[arg(long)]
        rel: Option<String>,
        /// With --txn: the versions the transaction's update at `at` may write.
        #[arg(long)]
        visible: bool,
        /// Rebuild the committed state from the log alone and compare.
        #[arg(long)]
        reenact: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: TextOrJson,
    },
    /// Differential checks over random histories, or over one log.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        iters: u64,
        #[arg(long = "max-txns", default_value_t = 4)]
        max_txns: usize,
        #[arg(long = "max-ops", default_value_t = 6)]
        max_ops: usize,
        #[arg(long, default_value_t = 2)]
        relations: usize,
        #[arg(long = "max-tuples", default_value_t = 12)]
        max_tuples: usize,
        #[arg(long, default_value_t = 8)]
        domain: u32,
        #[arg(long, default_value = "all", value_parser = parse_check)]
        check: Check,
        /// Check this log instead of generated histories.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn parse_check(s: &str) -> Result<Check, String> {
    Check::parse(s).ok_or_else(|| format!("unknown check `{s}` (theorem1, homs, lemma4, bag, roundtrip, all)"))
}

fn parse_txn(s: &str) -> Result<TxnId> {
    let digits = s.strip_prefix('T').or_else(|| s.strip_prefix('t')).unwrap_or(s);
    digits.parse().map(TxnId).map_err(|_| anyhow!("invalid transaction id `{s}`"))
}

fn load(path: &Path) -> Result<(ParsedLog, HistoryState)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let log = parse_log(&text).map_err(|e| anyhow!("{}:{e}", path.display()))?;
    let st = execute_history(&log.history).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok((log, st))
}

fn relations<'a>(st: &'a HistoryState, rel: &'a Option<String>) -> Result<Vec<&'a str>> {
    match rel {
        Some(r) => {
            st.schema(r)?;
            Ok(vec![r.as_str()])
        }
        None => Ok(st.schemas().iter().map(|s| s.name.as_str()).collect()),
    }
}

fn modified(h: &History, txn: TxnId, rel: &Option<String>) -> Result<Vec<String>> {
    let t = h.transaction(txn).ok_or_else(|| anyhow!("unknown transaction {txn}"))?;
    let rels = t.modified_relations();
    match rel {
        Some(r) if rels.contains(r) => Ok(vec![r.clone()]),
        Some(r) => bail!("{txn} does not modify {r}"),
        None => Ok(rels),
    }
}

fn print_relations(out: &mut String, format: TextOrJson, items: Vec<(String, AnnotatedRelation)>, extra: serde_json::Value) {
    match format {
        TextOrJson::Text => {
            for (title, r) in items {
                out.push_str(&format!("-- {title}\n{}", r.render_text()));
            }
        }
        TextOrJson::Json => {
            let rels: Vec<_> = items
                .into_iter()
                .map(|(title, r)| {
                    let mut j = r.to_json();
                    j["title"] = json!(title);
                    j
                })
                .collect();
            let mut doc = extra;
            doc["relations"] = json!(rels);
            out.push_str(&serde_json::to_string_pretty(&doc).unwrap());
            out.push('\n');
        }
    }
}

fn cmd_run(
    log: &Path,
    dump_at: &[VersionId],
    txn: &Option<String>,
    rel: &Option<String>,
    format: TextOrJson,
) -> Result<(String, bool)> {
    let (_, st) = load(log)?;
    let versions = if dump_at.is_empty() { vec![st.horizon()] } else { dump_at.to_vec() };
    let txn = txn.as_deref().map(parse_txn).transpose()?;
    let mut items = Vec::new();
    for v in &versions {
        for r in relations(&st, rel)? {
            match txn {
                Some(t) => items.push((format!("{r} in {t} at {v}"), st.relation_in_txn(r, t, *v)?)),
                None => items.push((format!("{r} at {v}"), st.committed_at(r, *v)?)),
            }
        }
    }
    let mut out = String::new();
    print_relations(&mut out, format, items, json!({"versions": versions}));
    Ok((out, true))
}

fn cmd_history(
    log: &Path,
    at: VersionId,
    txn: &Option<String>,
    rel: &Option<String>,
    visible: bool,
    reenact: bool,
    format: TextOrJson,
) -> Result<(String, bool)> {
    let (parsed, st) = load(log)?;
    let txn = txn.as_deref().map(parse_txn).transpose()?;
    if visible && txn.is_none() {
        bail!("--visible needs --txn");
    }
    let mut out = String::new();
    let mut ok = true;
    let mut items = Vec::new();
    if reenact {
        let plans = reenact_history(&parsed.history, at)?;
        for r in relations(&st, rel)? {
            let Some(p) = plans.get(r) else { continue };
            let got = evaluate(p, &st)?;
            let same = got == st.committed_at(r, at)?;
            ok &= same;
            items.push((format!("{r} reenacted at {at} ({})", if same { "matches" } else { "DIFFERS" }), got));
        }
    } else {
        for r in relations(&st, rel)? {
            let rel_at = match (txn, visible) {
                (Some(t), true) => (format!("{r} visible to {t} at {at}"), st.visible_to_update(r, t, at)?),
                (Some(t), false) => (format!("{r} in {t} at {at}"), st.relation_in_txn(r, t, at)?),
                (None, _) => (format!("{r} at {at}"), st.committed_at(r, at)?),
            };
            items.push(rel_at);
        }
    }
    print_relations(&mut out, format, items, json!({"version": at, "consistent": ok}));
    Ok((out, ok))
}

fn plan_json(rel: &str, p: &ReenactPlan) -> serde_json::Value {
    json!({"relation": rel, "plan": p.plan.pretty(), "access": p.access})
}

fn cmd_reenact(
    log: &Path,
    txn: &str,
    rel: &Option<String>,
    opt: bool,
    plan_only: bool,
    format: TextOrJson,
) -> Result<(String, bool)> {
    let (parsed, st) = load(log)?;
    let h = &parsed.history;
    let txn = parse_txn(txn)?;
    let finish = st.finish(txn)?.ok_or_else(|| anyhow!("{txn} has not committed"))?;
    let name = if opt { "R_opt" } else { "R" };
    let mut out = String::new();
    let mut docs = Vec::new();
    let mut ok = true;
    for r in modified(h, txn, rel)? {
        let p = if opt { reenact_transaction_opt(h, txn, &r)? } else { reenact_transaction(h, txn, &r)? };
        let mut doc = plan_json(&r, &p);
        if let TextOrJson::Text = format {
            out.push_str(&format!("-- {name}({txn}) on {r}\n{}", p.pretty()));
        }
        if !plan_only {
            let got = evaluate(&p, &st)?;
            let direct = st.relation_in_txn(&r, txn, finish + 1)?;
            let (same, scope) = if got == direct {
                (true, "exact")
            } else if opt {
                let created = |x: &AnnotatedRelation| x.filter_summands(|_, s| has_created(txn, s));
                (created(&got) == created(&direct), "versions created by the transaction")
            } else {
                (false, "exact")
            };
            ok &= same;
            let verdict = if same { format!("equivalent ({scope})") } else { "DIFFERS".to_string() };
            match format {
                TextOrJson::Text => out.push_str(&format!("{}direct execution: {verdict}\n", got.render_text())),
                TextOrJson::Json => {
                    doc["result"] = got.to_json();
                    doc["direct"] = json!(verdict);
                }
            }
        }
        docs.push(doc);
    }
    if let TextOrJson::Json = format {
        out.push_str(&serde_json::to_string_pretty(&json!({"transaction": txn.to_string(), "plans": docs})).unwrap());
        out.push('\n');
    }
    Ok((out, ok))
}

fn cmd_provenance(
    log: &Path,
    txn: &str,
    rel: &Option<String>,
    format: TableFormat,
    filter: &Option<String>,
) -> Result<(String, bool)> {
    let (parsed, st) = load(log)?;
    let txn = parse_txn(txn)?;
    let cond = filter
        .as_deref()
        .map(|f| parse_condition(f).map_err(|e| anyhow!("--filter: {e}")))
        .transpose()?;
    let rels = modified(&parsed.history, txn, rel)?;
    let mut tables: Vec<ProvenanceTable> = Vec::new();
    for r in &rels {
        let mut p = transaction_provenance(&parsed.history, &st, txn, r)?;
        if let Some(c) = &cond {
            p = filter_provenance(&p, c)?;
        }
        tables.push(p);
    }
    let single = rel.is_some();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for (i, p) in tables.iter().enumerate() {
                if !single {
                    if i > 0 {
                        out.push('\n');
                    }
                    out.push_str(&format!("# {}\n", p.relation));
                }
                out.push_str(&p.to_csv()?);
            }
        }
        TableFormat::Json => {
            let doc = if single {
                tables[0].to_json()
            } else {
                json!(tables.iter().map(ProvenanceTable::to_json).collect::<Vec<_>>())
            };
            out.push_str(&serde_json::to_string_pretty(&doc).unwrap());
            out.push('\n');
        }
    }
    Ok((out, true))
}

fn cmd_verify(cfg: FuzzConfig, log: &Option<PathBuf>) -> Result<(String, bool)> {
    let v = match log {
        Some(path) => {
            let (parsed, _) = load(path)?;
            let mut stats = Stats::default();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let r = check_history(&parsed.history, &cfg, &mut rng, &mut stats);
            let (status, check, detail, divergence) = match r {
                Ok(()) => (Status::Pass, format!("{:?}", cfg.check).to_lowercase(), String::new(), None),
                Err(f) => (Status::Fail, f.check.to_string(), f.detail, f.divergence),
            };
            Verdict {
                status,
                check,
                detail,
                seed: Some(cfg.seed),
                iteration: None,
                counterexample: None,
                divergence,
                stats,
            }
        }
        None => fuzz(&cfg),
    };
    let mut out = serde_json::to_string_pretty(&v.to_json()).unwrap();
    out.push('\n');
    Ok((out, v.passed()))
}

fn dispatch(cmd: Cmd) -> Result<(String, bool)> {
    match cmd {
        Cmd::Run {
            log,
            dump_at,
            txn,
            rel,
            format,
        } => cmd_run(&log, &dump_at, &txn, &rel, format),
        Cmd::Reenact {
            log,
            txn,
            rel,
            opt,
            plan_only,
            format,
        } => cmd_reenact(&log, &txn, &rel, opt, plan_only, format),
        Cmd::Provenance {
            log,
            txn,
            rel,
            format,
            filter,
        } => cmd_provenance(&log, &txn, &rel, format, &filter),
        Cmd::History {
            log,
            at,
            txn,
            rel,
            visible,
            reenact,
            format,
        } => cmd_history(&log, at, &txn, &rel, visible, reenact, format),
        Cmd::Verify {
            seed,
            iters,
            max_txns,
            max_ops,
            relations,
            max_tuples,
            domain,
            check,
            log,
        } => {
            let cfg = FuzzConfig {
                seed,
                iters,
                max_txns,
                max_ops,
                max_relations: relations,
                max_tuples,
                domain,
                check,
                ..FuzzConfig::default()
            };
            cfg.validate().map_err(|e| anyhow!(e))?;
            cmd_verify(cfg, &log)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok((out, ok)) => {
            print!("{out}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
