//! Differential testing: reenactment against direct execution, homomorphism
//! commutation, the predecessor property of the single-scan form, and an
//! annotation-free bag interpreter, all over randomly generated histories.

#![allow(clippy::result_large_err)]

pub mod gen;
pub mod oracle;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::auditlog::{parse_log, serialize_log};
use crate::history::{execute_history, execute_history_with, History, HistoryState, IdAllocator, OpKind};
use crate::mvsemiring::{has_created, AnnotKind, BaseElem, BaseSemiring, LiftedHom, NormalForm, Summand, TxnId, VersionId};
use crate::reenact::{
    access_count, evaluate, reenact_history, reenact_transaction_opt, reenact_transaction_with, MergeMode, ReenactError,
};
use crate::relalg::{eval_version_filter, eval_version_merge, AnnotatedRelation, CmpOp, VCond};

pub use gen::{random_history, random_relation};
pub use oracle::bag_oracle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Theorem1,
    Homs,
    Lemma4,
    Bag,
    Roundtrip,
    All,
}

impl Check {
    pub fn parse(s: &str) -> Option<Check> {
        Some(match s {
            "theorem1" => Check::Theorem1,
            "homs" => Check::Homs,
            "lemma4" => Check::Lemma4,
            "bag" => Check::Bag,
            "roundtrip" => Check::Roundtrip,
            "all" => Check::All,
            _ => return None,
        })
    }

    fn runs(self, c: Check) -> bool {
        self == Check::All || self == c
    }
}

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub seed: u64,
    pub iters: u64,
    pub max_txns: usize,
    /// Operations per transaction, commit included.
    pub max_ops: usize,
    pub max_relations: usize,
    /// Bound on summands per relation version.
    pub max_tuples: usize,
    pub domain: u32,
    /// Weights of update, insert VALUES, insert SELECT, delete.
    pub op_mix: [f64; 4],
    /// Probability of staying with the same transaction for the next op.
    pub density: f64,
    pub check: Check,
    pub merge: MergeMode,
    /// Relation pairs drawn per history for the operator-level checks.
    pub pairs_per_history: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            iters: 100,
            max_txns: 4,
            max_ops: 6,
            max_relations: 2,
            max_tuples: 12,
            domain: 8,
            op_mix: [0.35, 0.3, 0.1, 0.25],
            density: 0.4,
            check: Check::All,
            merge: MergeMode::Merge,
            pairs_per_history: 3,
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_txns == 0 || self.max_ops == 0 || self.max_relations == 0 || self.max_tuples == 0 || self.domain == 0 {
            return Err("bounds must be positive".into());
        }
        if self.op_mix.iter().any(|w| *w < 0.0) || self.op_mix.iter().sum::<f64>() <= 0.0 {
            return Err("operation weights must be non-negative and not all zero".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub relation: String,
    pub tuple: String,
    pub version: VersionId,
    pub expected: String,
    pub actual: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub histories: u64,
    pub transactions: u64,
    pub opt_transactions: u64,
    pub exact_opt_transactions: u64,
    pub access_checks: u64,
    pub lemma4_transactions: u64,
    pub hom_histories: u64,
    pub operator_pairs: u64,
    pub bag_versions: u64,
    pub roundtrips: u64,
}

impl Stats {
    fn add(&mut self, o: &Stats) {
        self.histories += o.histories;
        self.transactions += o.transactions;
        self.opt_transactions += o.opt_transactions;
        self.exact_opt_transactions += o.exact_opt_transactions;
        self.access_checks += o.access_checks;
        self.lemma4_transactions += o.lemma4_transactions;
        self.hom_histories += o.hom_histories;
        self.operator_pairs += o.operator_pairs;
        self.bag_versions += o.bag_versions;
        self.roundtrips += o.roundtrips;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub status: Status,
    pub check: String,
    pub detail: String,
    pub seed: Option<u64>,
    pub iteration: Option<u64>,
    /// The minimized failing history as a log.
    pub counterexample: Option<String>,
    pub divergence: Option<Divergence>,
    pub stats: Stats,
}

impl Verdict {
    fn pass(check: &str, stats: Stats) -> Verdict {
        Verdict {
            status: Status::Pass,
            check: check.into(),
            detail: String::new(),
            seed: None,
            iteration: None,
            counterexample: None,
            divergence: None,
            stats,
        }
    }

    fn from_result(check: &str, r: Result<(), Failure>, stats: Stats) -> Verdict {
        match r {
            Ok(()) => Verdict::pass(check, stats),
            Err(f) => Verdict {
                status: Status::Fail,
                check: f.check.into(),
                detail: f.detail,
                seed: None,
                iteration: None,
                counterexample: None,
                divergence: f.divergence,
                stats,
            },
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("verdicts serialize")
    }
}

#[derive(Clone, Debug)]
pub struct Failure {
    pub check: &'static str,
    pub detail: String,
    pub divergence: Option<Divergence>,
}

fn fail(check: &'static str, detail: String) -> Failure {
    Failure {
        check,
        detail,
        divergence: None,
    }
}

fn render(k: Option<&NormalForm>) -> String {
    k.map_or("0".to_string(), |k| k.render())
}

/// First tuple on which two relations disagree.
pub fn first_divergence(rel: &str, v: VersionId, expected: &AnnotatedRelation, actual: &AnnotatedRelation) -> Option<Divergence> {
    let keys: BTreeSet<_> = expected.rows().keys().chain(actual.rows().keys()).collect();
    keys.into_iter().find_map(|t| {
        let (e, a) = (expected.get(t), actual.get(t));
        (e != a).then(|| Divergence {
            relation: rel.to_string(),
            tuple: t.to_string(),
            version: v,
            expected: render(e),
            actual: render(a),
        })
    })
}

fn same(
    check: &'static str,
    what: impl FnOnce() -> String,
    rel: &str,
    v: VersionId,
    expected: &AnnotatedRelation,
    actual: &AnnotatedRelation,
) -> Result<(), Failure> {
    if expected == actual {
        return Ok(());
    }
    Err(Failure {
        check,
        detail: what(),
        divergence: first_divergence(rel, v, expected, actual),
    })
}

fn rel_err(check: &'static str) -> impl Fn(crate::relalg::RelError) -> Failure {
    move |e| fail(check, e.to_string())
}

fn hist_err(check: &'static str) -> impl Fn(crate::history::HistoryError) -> Failure {
    move |e| fail(check, e.to_string())
}

fn reenact_err(check: &'static str) -> impl Fn(ReenactError) -> Failure {
    move |e| fail(check, e.to_string())
}

fn theorem1_inner(h: &History, st: &HistoryState, txn: TxnId, mode: MergeMode, stats: &mut Stats) -> Result<(), Failure> {
    const C: &str = "theorem1";
    let t = h.transaction(txn).ok_or_else(|| fail(C, format!("unknown transaction {txn}")))?;
    let finish = t.finish().ok_or_else(|| fail(C, format!("{txn} has not committed")))?;
    let update_delete_only = t
        .ops
        .iter()
        .all(|o| matches!(o.kind, OpKind::Update { .. } | OpKind::Delete { .. } | OpKind::Commit));
    for rel in t.modified_relations() {
        let direct = st.relation_in_txn(&rel, txn, finish + 1).map_err(hist_err(C))?;
        let plan = reenact_transaction_with(h, txn, &rel, mode).map_err(reenact_err(C))?;
        let chained = evaluate(&plan, st).map_err(reenact_err(C))?;
        same(C, || format!("R({txn}) differs from direct execution on {rel}"), &rel, finish + 1, &direct, &chained)?;

        let before = st.committed_at(&rel, finish).map_err(hist_err(C))?;
        let after = st.committed_at(&rel, finish + 1).map_err(hist_err(C))?;
        let merged = eval_version_merge(&before, &direct).map_err(rel_err(C))?;
        same(C, || format!("merging {txn}'s result into R_C[{finish}] misses R_C[{}] on {rel}", finish + 1), &rel, finish + 1, &after, &merged)?;

        let stages = t.ops.iter().filter(|o| o.target() == Some(rel.as_str())).count();
        match reenact_transaction_opt(h, txn, &rel) {
            Ok(opt) => {
                stats.opt_transactions += 1;
                let got = evaluate(&opt, st).map_err(reenact_err(C))?;
                let created = |r: &AnnotatedRelation| r.filter_summands(|_, s| has_created(txn, s));
                same(
                    C,
                    || format!("R_opt({txn}) creates different versions than direct execution on {rel}"),
                    &rel,
                    finish + 1,
                    &created(&direct),
                    &created(&got),
                )?;
                let merged = eval_version_merge(&before, &got).map_err(rel_err(C))?;
                same(C, || format!("merging R_opt({txn}) into R_C[{finish}] misses R_C[{}] on {rel}", finish + 1), &rel, finish + 1, &after, &merged)?;
                let last = t.ops.iter().filter(|o| o.target() == Some(rel.as_str())).map(|o| o.time).max().unwrap_or(0);
                if st.committed_at(&rel, last).map_err(hist_err(C))? == st.committed_at(&rel, finish - 1).map_err(hist_err(C))? {
                    stats.exact_opt_transactions += 1;
                    same(C, || format!("R_opt({txn}) differs from direct execution on {rel}"), &rel, finish + 1, &direct, &got)?;
                }
                if update_delete_only {
                    stats.access_checks += 1;
                    if access_count(&opt, &rel) != 1 {
                        return Err(fail(C, format!("R_opt({txn}) reads {rel} {} times", access_count(&opt, &rel))));
                    }
                    if access_count(&plan, &rel) != stages {
                        return Err(fail(
                            C,
                            format!("R({txn}) reads {rel} {} times for {stages} statements", access_count(&plan, &rel)),
                        ));
                    }
                }
            }
            Err(ReenactError::OptimizationInapplicable(_)) => {}
            Err(e) => return Err(fail(C, e.to_string())),
        }
    }
    stats.transactions += 1;
    Ok(())
}

fn history_plans_inner(h: &History, st: &HistoryState) -> Result<(), Failure> {
    const C: &str = "theorem1";
    let v = st.horizon();
    for (rel, p) in reenact_history(h, v).map_err(reenact_err(C))? {
        let got = evaluate(&p, st).map_err(reenact_err(C))?;
        let want = st.committed_at(&rel, v).map_err(hist_err(C))?;
        same(C, || format!("history reenactment of {rel} at {v} differs"), &rel, v, &want, &got)?;
    }
    Ok(())
}

/// Direct execution, `R(T)` and, when it applies, `R_opt(T)` agree.
pub fn check_theorem1(h: &History, st: &HistoryState, txn: TxnId) -> Verdict {
    let mut stats = Stats::default();
    let r = theorem1_inner(h, st, txn, MergeMode::Merge, &mut stats);
    Verdict::from_result("theorem1", r, stats)
}

/// A mapping `x -> 0` for one variable, identity elsewhere.
pub fn annihilating(var: &str) -> LiftedHom {
    let v = var.to_string();
    LiftedHom::from_valuation(&format!("{var}-to-0"), BaseSemiring::ProvPoly, move |x| {
        if x.name() == v {
            BaseElem::Nat(0)
        } else {
            BaseElem::var(x.name())
        }
    })
}

fn hom_inner(h: &History, st: &HistoryState, hom: &LiftedHom) -> Result<(), Failure> {
    const C: &str = "homs";
    let mapped = h.map_base(hom);
    let st2 = execute_history_with(&mapped, IdAllocator::Table(Arc::new(st.id_table().clone())))
        .map_err(|e| fail(C, format!("mapped history under {} fails: {e}", hom.name())))?;
    for s in st.schemas() {
        for v in 1..=st.horizon() {
            let want = st.committed_at(&s.name, v).map_err(hist_err(C))?.map_annotations(hom);
            let got = st2.committed_at(&s.name, v).map_err(hist_err(C))?;
            same(C, || format!("{} does not commute with execution: R_C[{v}] of {}", hom.name(), s.name), &s.name, v, &want, &got)?;
        }
        for t in &h.transactions {
            let Some(finish) = t.finish() else { continue };
            for v in t.start()..=finish + 1 {
                let want = st.relation_in_txn(&s.name, t.id, v).map_err(hist_err(C))?.map_annotations(hom);
                let got = st2.relation_in_txn(&s.name, t.id, v).map_err(hist_err(C))?;
                same(
                    C,
                    || format!("{} does not commute with execution: {} view of {} at {v}", hom.name(), t.id, s.name),
                    &s.name,
                    v,
                    &want,
                    &got,
                )?;
            }
        }
    }
    // Reenactment directly in the target semiring.
    for t in &mapped.transactions {
        let Some(finish) = t.finish() else { continue };
        for rel in t.modified_relations() {
            let p = reenact_transaction_with(&mapped, t.id, &rel, MergeMode::Merge).map_err(reenact_err(C))?;
            let got = evaluate(&p, &st2).map_err(reenact_err(C))?;
            let want = st2.relation_in_txn(&rel, t.id, finish + 1).map_err(hist_err(C))?;
            same(C, || format!("R({}) under {} differs on {rel}", t.id, hom.name()), &rel, finish + 1, &want, &got)?;
        }
    }
    Ok(())
}

/// Mapping leaves through `hom` commutes with executing the history.
pub fn check_hom_commutation(h: &History, st: &HistoryState, hom: &LiftedHom) -> Verdict {
    let mut stats = Stats::default();
    let r = hom_inner(h, st, hom);
    if r.is_ok() {
        stats.hom_histories += 1;
    }
    Verdict::from_result("homs", r, stats)
}

/// `h(μ(R,S)) = μ(h(R), h(S))` and `h(σ^V(R)) = σ^V(h(R))`.
pub fn check_operator_commutation(r: &AnnotatedRelation, s: &AnnotatedRelation, cond: &VCond, hom: &LiftedHom) -> Result<(), Failure> {
    const C: &str = "homs";
    let merged = eval_version_merge(r, s).map_err(rel_err(C))?.map_annotations(hom);
    let merged_h = eval_version_merge(&r.map_annotations(hom), &s.map_annotations(hom)).map_err(rel_err(C))?;
    same(C, || format!("{} does not commute with version merge", hom.name()), &r.schema.name, 0, &merged, &merged_h)?;
    let filtered = eval_version_filter(cond, r).map_err(rel_err(C))?.map_annotations(hom);
    let filtered_h = eval_version_filter(cond, &r.map_annotations(hom)).map_err(rel_err(C))?;
    same(C, || format!("{} does not commute with version filter {cond}", hom.name()), &r.schema.name, 0, &filtered, &filtered_h)
}

fn random_vcond(rng: &mut ChaCha8Rng, max: VersionId) -> VCond {
    let op = *[CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge].choose(rng).unwrap();
    let c = VCond::cmp(op, rng.gen_range(0..=max.max(1)));
    if rng.gen_bool(0.3) {
        VCond::and(c, VCond::cmp(CmpOp::Le, rng.gen_range(0..=max.max(1))))
    } else {
        c
    }
}

/// Relation versions of one history, the population for operator checks.
fn sample_relations(st: &HistoryState) -> Vec<AnnotatedRelation> {
    let mut out = Vec::new();
    for s in st.schemas() {
        for v in 1..=st.horizon() {
            if let Ok(r) = st.committed_at(&s.name, v) {
                out.push(r);
            }
        }
    }
    out
}

fn operator_pairs_inner(h: &History, st: &HistoryState, n: usize, rng: &mut ChaCha8Rng, stats: &mut Stats) -> Result<(), Failure> {
    let mut pop = sample_relations(st);
    for t in &h.transactions {
        let Some(finish) = t.finish() else { continue };
        for s in st.schemas() {
            for v in t.start()..=finish + 1 {
                if let Ok(r) = st.relation_in_txn(&s.name, t.id, v) {
                    pop.push(r);
                }
            }
        }
    }
    if pop.is_empty() {
        return Ok(());
    }
    let homs = [LiftedHom::vars_to_one(), LiftedHom::vars_to_true()];
    for _ in 0..n {
        let r = pop.choose(rng).unwrap();
        let same_schema: Vec<&AnnotatedRelation> = pop.iter().filter(|x| x.schema == r.schema).collect();
        let s = same_schema.choose(rng).unwrap();
        let cond = random_vcond(rng, st.horizon());
        for hom in &homs {
            check_operator_commutation(r, s, &cond, hom)?;
        }
        stats.operator_pairs += 1;
    }
    Ok(())
}

/// Strips `txn`'s update, delete and commit layers. `None` if the version was
/// created by an insert of `txn` or no update/delete layer was removed.
fn immediate_predecessor(txn: TxnId, s: &Summand) -> Option<Summand> {
    let mut cur = s.clone();
    let mut peeled_write = false;
    loop {
        let ann = match cur.outermost() {
            Some(a) if a.txn == txn => *a,
            _ => break,
        };
        match ann.kind {
            AnnotKind::I => return None,
            AnnotKind::U | AnnotKind::D => peeled_write = true,
            AnnotKind::C => {}
        }
        if cur.shape.factors.len() != 1 || !cur.shape.mono.is_unit() {
            break;
        }
        cur = Summand {
            shape: (*cur.shape.factors[0].inner).clone(),
            coeff: cur.coeff,
        };
    }
    peeled_write.then_some(cur)
}

fn lemma4_inner(h: &History, st: &HistoryState, txn: TxnId, stats: &mut Stats) -> Result<bool, Failure> {
    const C: &str = "lemma4";
    let t = h.transaction(txn).ok_or_else(|| fail(C, format!("unknown transaction {txn}")))?;
    let Some(finish) = t.finish() else { return Ok(false) };
    let eligible = t.ops.iter().all(|o| match &o.kind {
        OpKind::Insert { query, .. } => crate::history::is_values_only(query),
        _ => true,
    });
    if !eligible {
        return Ok(false);
    }
    for rel in t.modified_relations() {
        let direct = st.relation_in_txn(&rel, txn, finish + 1).map_err(hist_err(C))?;
        let base = st.committed_at(&rel, finish - 1).map_err(hist_err(C))?;
        let present: BTreeSet<_> = base.summands().map(|(_, s)| s.shape.clone()).collect();
        for (tuple, s) in direct.summands() {
            if !has_created(txn, s) {
                continue;
            }
            if let Some(pred) = immediate_predecessor(txn, s) {
                if !present.contains(&pred.shape) {
                    return Err(Failure {
                        check: C,
                        detail: format!(
                            "predecessor of a version created by {txn} is missing from R_C[{}] of {rel}",
                            finish - 1
                        ),
                        divergence: Some(Divergence {
                            relation: rel.clone(),
                            tuple: tuple.to_string(),
                            version: finish - 1,
                            expected: pred.render(st.semiring()),
                            actual: "0".into(),
                        }),
                    });
                }
            }
        }
    }
    stats.lemma4_transactions += 1;
    Ok(true)
}

/// Every version `txn` updated or deleted is still in `R_C[finish - 1]`.
pub fn check_immediate_predecessors(h: &History, st: &HistoryState, txn: TxnId) -> Verdict {
    let mut stats = Stats::default();
    let r = lemma4_inner(h, st, txn, &mut stats).map(|_| ());
    Verdict::from_result("lemma4", r, stats)
}

fn bag_inner(h: &History, st: &HistoryState, stats: &mut Stats) -> Result<(), Failure> {
    const C: &str = "bag";
    let bags = bag_oracle(h).map_err(|e| fail(C, e))?;
    for (v, rels) in &bags {
        for (rel, want) in rels {
            let got = HistoryState::live_bag(&st.committed_at(rel, *v).map_err(hist_err(C))?);
            if &got != want {
                let keys: BTreeSet<_> = want.keys().chain(got.keys()).collect();
                let t = keys.into_iter().find(|t| want.get(*t) != got.get(*t)).expect("bags differ somewhere");
                return Err(Failure {
                    check: C,
                    detail: format!("live contents of {rel} at {v} differ from the bag interpreter"),
                    divergence: Some(Divergence {
                        relation: rel.clone(),
                        tuple: t.to_string(),
                        version: *v,
                        expected: want.get(t).copied().unwrap_or(0).to_string(),
                        actual: got.get(t).copied().unwrap_or(0).to_string(),
                    }),
                });
            }
        }
        stats.bag_versions += 1;
    }
    Ok(())
}

/// The live bag of every committed version matches the plain interpreter.
pub fn check_bag_oracle(h: &History, st: &HistoryState) -> Verdict {
    let mut stats = Stats::default();
    let r = bag_inner(h, st, &mut stats);
    Verdict::from_result("bag", r, stats)
}

fn roundtrip_inner(h: &History) -> Result<(), Failure> {
    const C: &str = "roundtrip";
    let text = serialize_log(h).map_err(|e| fail(C, e))?;
    let back = parse_log(&text).map_err(|e| fail(C, format!("{e}\n{text}")))?;
    if back.history != *h {
        return Err(fail(C, format!("log does not parse back to the same history:\n{text}")));
    }
    Ok(())
}

/// Runs the checks selected by `cfg` on one history.
pub fn check_history(h: &History, cfg: &FuzzConfig, rng: &mut ChaCha8Rng, stats: &mut Stats) -> Result<(), Failure> {
    let st = execute_history(h).map_err(|e| fail("execute", e.to_string()))?;
    if cfg.check.runs(Check::Roundtrip) {
        roundtrip_inner(h)?;
        stats.roundtrips += 1;
    }
    if cfg.check.runs(Check::Theorem1) {
        for t in &h.transactions {
            theorem1_inner(h, &st, t.id, cfg.merge, stats)?;
        }
        history_plans_inner(h, &st)?;
    }
    if cfg.check.runs(Check::Homs) {
        let mut homs = vec![LiftedHom::vars_to_one(), LiftedHom::vars_to_true()];
        let vars: Vec<_> = h.var_origins().into_keys().collect();
        if let Some(v) = vars.choose(rng) {
            homs.push(annihilating(v.name()));
        }
        for hom in &homs {
            hom_inner(h, &st, hom)?;
        }
        stats.hom_histories += 1;
        operator_pairs_inner(h, &st, cfg.pairs_per_history, rng, stats)?;
    }
    if cfg.check.runs(Check::Lemma4) {
        for t in &h.transactions {
            lemma4_inner(h, &st, t.id, stats)?;
        }
    }
    if cfg.check.runs(Check::Bag) {
        bag_inner(h, &st, stats)?;
    }
    stats.histories += 1;
    Ok(())
}

fn iteration_rng(seed: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

type Outcome = (Stats, Option<(History, Failure)>);

fn run_iteration(cfg: &FuzzConfig, i: u64) -> Outcome {
    let mut rng = iteration_rng(cfg.seed, i);
    let h = random_history(cfg, &mut rng);
    let mut stats = Stats::default();
    match check_history(&h, cfg, &mut rng, &mut stats) {
        Ok(()) => (stats, None),
        Err(f) => (stats, Some((h, f))),
    }
}

fn without_op(h: &History, ti: usize, oi: usize) -> History {
    let mut c = h.clone();
    c.transactions[ti].ops.remove(oi);
    c
}

fn without_txn(h: &History, ti: usize) -> History {
    let mut c = h.clone();
    c.transactions.remove(ti);
    c
}

/// Deletes statements, then whole transactions, while `fails` keeps holding.
pub fn minimize(h: &History, fails: impl Fn(&History) -> bool) -> History {
    let mut cur = h.clone();
    'outer: loop {
        for ti in 0..cur.transactions.len() {
            for oi in 0..cur.transactions[ti].ops.len() {
                if cur.transactions[ti].ops[oi].is_commit() {
                    continue;
                }
                let cand = without_op(&cur, ti, oi);
                if fails(&cand) {
                    cur = cand;
                    continue 'outer;
                }
            }
        }
        for ti in 0..cur.transactions.len() {
            let cand = without_txn(&cur, ti);
            if fails(&cand) {
                cur = cand;
                continue 'outer;
            }
        }
        return cur;
    }
}

/// Generates `cfg.iters` histories and checks each one. Iterations run in
/// parallel; the verdict does not depend on scheduling.
pub fn fuzz(cfg: &FuzzConfig) -> Verdict {
    if let Err(e) = cfg.validate() {
        return Verdict {
            status: Status::Fail,
            check: "config".into(),
            detail: e,
            seed: Some(cfg.seed),
            iteration: None,
            counterexample: None,
            divergence: None,
            stats: Stats::default(),
        };
    }
    let results: Vec<Outcome> = (0..cfg.iters).into_par_iter().map(|i| run_iteration(cfg, i)).collect();
    let mut stats = Stats::default();
    for (s, _) in &results {
        stats.add(s);
    }
    let check_name = serde_json::to_value(cfg.check)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let first = results.into_iter().zip(0u64..).find_map(|((_, f), i)| f.map(|(h, f)| (i, h, f)));
    let Some((i, h, f)) = first else {
        let mut v = Verdict::pass(&check_name, stats);
        v.seed = Some(cfg.seed);
        return v;
    };
    // Replays use the iteration's rng so sampled homomorphisms and pairs repeat.
    let fails = |cand: &History| {
        let mut rng = iteration_rng(cfg.seed, i);
        let _ = random_history(cfg, &mut rng);
        let mut s = Stats::default();
        check_history(cand, cfg, &mut rng, &mut s).map_err(|e| e.check) == Err(f.check)
    };
    let small = minimize(&h, fails);
    let mut rng = iteration_rng(cfg.seed, i);
    let _ = random_history(cfg, &mut rng);
    let final_failure = check_history(&small, cfg, &mut rng, &mut Stats::default()).err().unwrap_or(f);
    Verdict {
        status: Status::Fail,
        check: final_failure.check.into(),
        detail: final_failure.detail,
        seed: Some(cfg.seed),
        iteration: Some(i),
        counterexample: Some(serialize_log(&small).unwrap_or_else(|_| format!("{small:#?}"))),
        divergence: final_failure.divergence,
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(iters: u64) -> FuzzConfig {
        FuzzConfig {
            iters,
            ..FuzzConfig::default()
        }
    }

    #[test]
    fn default_config_passes() {
        let v = fuzz(&cfg(40));
        assert!(v.passed(), "{}", serde_json::to_string_pretty(&v.to_json()).unwrap());
        assert_eq!(v.stats.histories, 40);
    }

    #[test]
    fn deterministic() {
        let c = cfg(5);
        let a = random_history(&c, &mut iteration_rng(3, 1));
        let b = random_history(&c, &mut iteration_rng(3, 1));
        assert_eq!(a, b);
        assert_eq!(fuzz(&c).stats, fuzz(&c).stats);
    }

    #[test]
    fn serial_degenerate_case() {
        let v = fuzz(&FuzzConfig {
            max_txns: 1,
            ..cfg(20)
        });
        assert!(v.passed(), "{:?}", v);
    }

    #[test]
    fn plain_union_is_caught_and_minimized() {
        let c = FuzzConfig {
            check: Check::Theorem1,
            merge: MergeMode::PlainUnion,
            ..cfg(60)
        };
        let v = fuzz(&c);
        assert_eq!(v.status, Status::Fail);
        assert_eq!(v.check, "theorem1");
        let log = v.counterexample.clone().unwrap();
        let h = parse_log(&log).unwrap().history;
        let ops: usize = h.transactions.iter().map(|t| t.ops.len()).sum();
        // Two statements on one relation plus the commit, and a row to carry.
        assert!(ops <= 6, "{log}");
        let mut s = Stats::default();
        let again = check_history(&h, &c, &mut iteration_rng(0, 0), &mut s);
        assert!(again.is_err());
    }
}
