//! Compiling past transactions into queries over committed relation versions.
//!
//! A transaction `T` with statements `u_1 .. u_n` on relation `R` compiles to
//!
//! ```text
//! C_T(R(u_n)( μ( R(u_{n-1})(...), R_C[ν(u_n)] ) ))
//! ```
//!
//! where the first stage reads `R_C[ν(u_1)]` directly. The optimized form
//! reads `R_C[finish(T) - 1]` once and uses version filters to hide summands a
//! statement could not have seen.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::history::{is_values_only, History, HistoryError, HistoryState, OpKind, TableIds, Transaction, UpdateOp};
use crate::mvsemiring::{AnnotKind, BaseSemiring, TxnId, VersionId};
use crate::relalg::{
    eval_plan, AnnotatedRelation, Catalog, CmpOp, Condition, QueryPlan, RelError, Schema, VCond, VersionRef,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReenactError {
    #[error("unknown transaction {0}")]
    UnknownTransaction(TxnId),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("{0} did not modify `{1}`")]
    NotModified(TxnId, String),
    #[error("{0} has not committed")]
    Uncommitted(TxnId),
    #[error("{0} has an insert that is not a VALUES list; the single-scan form does not apply")]
    OptimizationInapplicable(TxnId),
    #[error("commit cannot be reenacted as a statement")]
    UnsupportedOp,
    #[error(transparent)]
    Rel(#[from] RelError),
    #[error(transparent)]
    History(#[from] HistoryError),
}

/// Input of a statement's reenactment.
#[derive(Clone, Debug, PartialEq)]
pub enum RelRef {
    CommittedAt(String, VersionId),
    Derived(Arc<QueryPlan>),
}

impl RelRef {
    pub fn plan(&self) -> Arc<QueryPlan> {
        match self {
            RelRef::CommittedAt(r, v) => QueryPlan::base(r, VersionRef::CommittedAt(*v)),
            RelRef::Derived(p) => p.clone(),
        }
    }
}

/// How successive statement stages combine with fresh committed versions.
/// `PlainUnion` is wrong on purpose and exists for mutation testing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MergeMode {
    #[default]
    Merge,
    PlainUnion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReenactPlan {
    pub plan: Arc<QueryPlan>,
    /// Number of distinct `CommittedAt` versions read, per relation.
    pub access: BTreeMap<String, usize>,
}

impl ReenactPlan {
    pub fn new(plan: Arc<QueryPlan>) -> ReenactPlan {
        let mut leaves = std::collections::BTreeSet::new();
        plan.for_each_leaf(&mut |name, v| {
            if let VersionRef::CommittedAt(v) = v {
                leaves.insert((name.to_string(), v));
            }
        });
        let mut access = BTreeMap::new();
        for (name, _) in leaves {
            *access.entry(name).or_insert(0) += 1;
        }
        ReenactPlan { plan, access }
    }

    pub fn pretty(&self) -> String {
        let mut s = self.plan.pretty();
        for (r, n) in &self.access {
            s.push_str(&format!("access {r} = {n}\n"));
        }
        s
    }
}

pub fn access_count(p: &ReenactPlan, rel: &str) -> usize {
    p.access.get(rel).copied().unwrap_or(0)
}

/// Rewrites `BaseRel(_, Current)` leaves through `bind`.
fn bind_current(p: &Arc<QueryPlan>, bind: &mut dyn FnMut(&str) -> Result<Arc<QueryPlan>, ReenactError>) -> Result<Arc<QueryPlan>, ReenactError> {
    Ok(match p.as_ref() {
        QueryPlan::BaseRel {
            name,
            version: VersionRef::Current,
        } => bind(name)?,
        QueryPlan::BaseRel { .. } | QueryPlan::Empty { .. } | QueryPlan::Singleton { .. } => p.clone(),
        QueryPlan::Select { cond, input } => QueryPlan::select(cond.clone(), bind_current(input, bind)?),
        QueryPlan::Project { exprs, input } => QueryPlan::project(exprs.clone(), bind_current(input, bind)?),
        QueryPlan::AnnotOp { kind, txn, time, input } => QueryPlan::annot(*kind, *txn, *time, bind_current(input, bind)?),
        QueryPlan::VersionFilter { cond, input } => QueryPlan::vfilter(cond.clone(), bind_current(input, bind)?),
        QueryPlan::Join { left, right } => QueryPlan::join(bind_current(left, bind)?, bind_current(right, bind)?),
        QueryPlan::Union { left, right } => QueryPlan::union(bind_current(left, bind)?, bind_current(right, bind)?),
        QueryPlan::VersionMerge { left, right } => {
            QueryPlan::merge(bind_current(left, bind)?, bind_current(right, bind)?)
        }
    })
}

fn update_stage(u: &UpdateOp, input: Arc<QueryPlan>, insert_src: Option<Arc<QueryPlan>>) -> Result<Arc<QueryPlan>, ReenactError> {
    let next = u.time + 1;
    Ok(match &u.kind {
        OpKind::Update { cond, exprs, .. } => QueryPlan::union(
            QueryPlan::annot(
                AnnotKind::U,
                u.txn,
                next,
                QueryPlan::project(exprs.clone(), QueryPlan::select(cond.clone(), input.clone())),
            ),
            QueryPlan::select(Condition::not(cond.clone()), input),
        ),
        OpKind::Delete { cond, .. } => QueryPlan::union(
            QueryPlan::annot(AnnotKind::D, u.txn, next, QueryPlan::select(cond.clone(), input.clone())),
            QueryPlan::select(Condition::not(cond.clone()), input),
        ),
        OpKind::Insert { .. } => QueryPlan::union(
            input,
            QueryPlan::annot(AnnotKind::I, u.txn, next, insert_src.expect("insert source bound")),
        ),
        OpKind::Commit => return Err(ReenactError::UnsupportedOp),
    })
}

/// `R(u)` over `input`. Relations read by an insert query resolve to their
/// committed version at the statement's time.
pub fn reenact_update(u: &UpdateOp, input: &RelRef) -> Result<Arc<QueryPlan>, ReenactError> {
    let target = u.target().ok_or(ReenactError::UnsupportedOp)?.to_string();
    let input = input.plan();
    let src = match &u.kind {
        OpKind::Insert { query, .. } => Some(bind_current(query, &mut |s| {
            Ok(if s == target {
                input.clone()
            } else {
                QueryPlan::base(s, VersionRef::CommittedAt(u.time))
            })
        })?),
        _ => None,
    };
    update_stage(u, input, src)
}

/// Per-transaction compiler state; memoizes stage plans so shared inputs stay
/// shared in the plan DAG.
struct TxnCompiler<'a> {
    txn: &'a Transaction,
    mode: MergeMode,
    stages: HashMap<usize, Arc<QueryPlan>>,
}

impl TxnCompiler<'_> {
    /// What statement of `T` at `time` sees of `rel`.
    fn visible(&mut self, rel: &str, time: VersionId) -> Result<Arc<QueryPlan>, ReenactError> {
        let committed = QueryPlan::base(rel, VersionRef::CommittedAt(time));
        let prev = self
            .txn
            .ops
            .iter()
            .enumerate().rfind(|(_, o)| o.time < time && o.target() == Some(rel))
            .map(|(i, _)| i);
        match prev {
            None => Ok(committed),
            Some(i) => {
                let own = self.stage(i)?;
                Ok(match self.mode {
                    MergeMode::Merge => QueryPlan::merge(own, committed),
                    MergeMode::PlainUnion => QueryPlan::union(own, committed),
                })
            }
        }
    }

    fn stage(&mut self, i: usize) -> Result<Arc<QueryPlan>, ReenactError> {
        if let Some(p) = self.stages.get(&i) {
            return Ok(p.clone());
        }
        let u = &self.txn.ops[i];
        let rel = u.target().ok_or(ReenactError::UnsupportedOp)?.to_string();
        let input = self.visible(&rel, u.time)?;
        let src = match &u.kind {
            OpKind::Insert { query, .. } => {
                let time = u.time;
                Some(bind_current(query, &mut |s| {
                    if s == rel {
                        Ok(input.clone())
                    } else {
                        self.visible(s, time)
                    }
                })?)
            }
            _ => None,
        };
        let p = update_stage(u, input, src)?;
        self.stages.insert(i, p.clone());
        Ok(p)
    }
}

fn committed_txn<'a>(h: &'a History, txn: TxnId, rel: &str) -> Result<(&'a Transaction, VersionId), ReenactError> {
    h.schema(rel).ok_or_else(|| ReenactError::UnknownRelation(rel.to_string()))?;
    let t = h.transaction(txn).ok_or(ReenactError::UnknownTransaction(txn))?;
    let finish = t.finish().ok_or(ReenactError::Uncommitted(txn))?;
    if !t.modified_relations().iter().any(|r| r == rel) {
        return Err(ReenactError::NotModified(txn, rel.to_string()));
    }
    Ok((t, finish))
}

/// `R(T)` for relation `rel`, merge-chained.
pub fn reenact_transaction(h: &History, txn: TxnId, rel: &str) -> Result<ReenactPlan, ReenactError> {
    reenact_transaction_with(h, txn, rel, MergeMode::Merge)
}

pub fn reenact_transaction_with(h: &History, txn: TxnId, rel: &str, mode: MergeMode) -> Result<ReenactPlan, ReenactError> {
    let (t, finish) = committed_txn(h, txn, rel)?;
    let last = t
        .ops
        .iter()
        .rposition(|o| o.target() == Some(rel))
        .expect("relation is modified");
    let mut c = TxnCompiler {
        txn: t,
        mode,
        stages: HashMap::new(),
    };
    let body = c.stage(last)?;
    Ok(ReenactPlan::new(QueryPlan::annot(AnnotKind::C, txn, finish + 1, body)))
}

/// One plan per relation modified by `txn`.
pub fn reenact_transaction_all(h: &History, txn: TxnId) -> Result<BTreeMap<String, ReenactPlan>, ReenactError> {
    let t = h.transaction(txn).ok_or(ReenactError::UnknownTransaction(txn))?;
    t.modified_relations()
        .into_iter()
        .map(|r| reenact_transaction(h, txn, &r).map(|p| (r, p)))
        .collect()
}

/// `R_opt(T)`: a single read of `R_C[finish(T) - 1]`.
pub fn reenact_transaction_opt(h: &History, txn: TxnId, rel: &str) -> Result<ReenactPlan, ReenactError> {
    let (t, finish) = committed_txn(h, txn, rel)?;
    let values_only = t.ops.iter().all(|o| match &o.kind {
        OpKind::Insert { query, .. } => is_values_only(query),
        _ => true,
    });
    if !values_only {
        return Err(ReenactError::OptimizationInapplicable(txn));
    }
    let mut cur = QueryPlan::base(rel, VersionRef::CommittedAt(finish - 1));
    for u in t.ops.iter().filter(|o| o.target() == Some(rel)) {
        let seen = QueryPlan::vfilter(VCond::cmp(CmpOp::Le, u.time), cur.clone());
        let unseen = QueryPlan::vfilter(VCond::cmp(CmpOp::Gt, u.time), cur.clone());
        let next = u.time + 1;
        cur = match &u.kind {
            OpKind::Update { cond, exprs, .. } => QueryPlan::union(
                QueryPlan::union(
                    QueryPlan::annot(
                        AnnotKind::U,
                        txn,
                        next,
                        QueryPlan::project(exprs.clone(), QueryPlan::select(cond.clone(), seen.clone())),
                    ),
                    QueryPlan::select(Condition::not(cond.clone()), seen),
                ),
                unseen,
            ),
            OpKind::Delete { cond, .. } => QueryPlan::union(
                QueryPlan::union(
                    QueryPlan::annot(AnnotKind::D, txn, next, QueryPlan::select(cond.clone(), seen.clone())),
                    QueryPlan::select(Condition::not(cond.clone()), seen),
                ),
                unseen,
            ),
            OpKind::Insert { query, .. } => QueryPlan::union(cur, QueryPlan::annot(AnnotKind::I, txn, next, query.clone())),
            OpKind::Commit => unreachable!("commit has no target"),
        };
    }
    Ok(ReenactPlan::new(QueryPlan::annot(AnnotKind::C, txn, finish + 1, cur)))
}

/// Plans computing `R_C[ν]` for every relation from nothing but transaction
/// reenactments: each committed version is the left-deep merge, in commit
/// order, of the transactions that committed before it.
pub fn reenact_history(h: &History, v: VersionId) -> Result<BTreeMap<String, ReenactPlan>, ReenactError> {
    let mut memo: HashMap<(String, VersionId), Arc<QueryPlan>> = HashMap::new();
    let mut out = BTreeMap::new();
    for s in &h.schemas {
        let p = history_plan(h, s, v, &mut memo)?;
        out.insert(s.name.clone(), ReenactPlan::new(p));
    }
    Ok(out)
}

fn history_plan(
    h: &History,
    schema: &Arc<Schema>,
    v: VersionId,
    memo: &mut HashMap<(String, VersionId), Arc<QueryPlan>>,
) -> Result<Arc<QueryPlan>, ReenactError> {
    let key = (schema.name.clone(), v);
    if let Some(p) = memo.get(&key) {
        return Ok(p.clone());
    }
    let mut acc: Option<Arc<QueryPlan>> = None;
    for t in h.commit_order() {
        if t.finish().is_none_or(|f| f >= v) || !t.modified_relations().contains(&schema.name) {
            continue;
        }
        let rt = reenact_transaction(h, t.id, &schema.name)?;
        let closed = substitute_committed(h, &rt.plan, memo)?;
        acc = Some(match acc {
            None => closed,
            Some(a) => QueryPlan::merge(a, closed),
        });
    }
    let p = acc.unwrap_or_else(|| Arc::new(QueryPlan::Empty { schema: schema.clone() }));
    memo.insert(key, p.clone());
    Ok(p)
}

fn substitute_committed(
    h: &History,
    p: &Arc<QueryPlan>,
    memo: &mut HashMap<(String, VersionId), Arc<QueryPlan>>,
) -> Result<Arc<QueryPlan>, ReenactError> {
    let mut sub = |c: &Arc<QueryPlan>| substitute_committed(h, c, memo);
    Ok(match p.as_ref() {
        QueryPlan::BaseRel {
            name,
            version: VersionRef::CommittedAt(v),
        } => {
            let schema = h.schema(name).ok_or_else(|| ReenactError::UnknownRelation(name.clone()))?.clone();
            return history_plan(h, &schema, *v, memo);
        }
        QueryPlan::BaseRel { .. } | QueryPlan::Empty { .. } | QueryPlan::Singleton { .. } => p.clone(),
        QueryPlan::Select { cond, input } => QueryPlan::select(cond.clone(), sub(input)?),
        QueryPlan::Project { exprs, input } => QueryPlan::project(exprs.clone(), sub(input)?),
        QueryPlan::AnnotOp { kind, txn, time, input } => QueryPlan::annot(*kind, *txn, *time, sub(input)?),
        QueryPlan::VersionFilter { cond, input } => QueryPlan::vfilter(cond.clone(), sub(input)?),
        QueryPlan::Join { left, right } => {
            let l = sub(left)?;
            QueryPlan::join(l, sub(right)?)
        }
        QueryPlan::Union { left, right } => {
            let l = sub(left)?;
            QueryPlan::union(l, sub(right)?)
        }
        QueryPlan::VersionMerge { left, right } => {
            let l = sub(left)?;
            QueryPlan::merge(l, sub(right)?)
        }
    })
}

/// Resolves `CommittedAt` leaves against an executed history.
pub struct StateCatalog<'a> {
    pub state: &'a HistoryState,
}

impl Catalog for StateCatalog<'_> {
    fn schema(&self, name: &str) -> Option<Arc<Schema>> {
        self.state.schema(name).ok().cloned()
    }

    fn semiring(&self) -> BaseSemiring {
        self.state.semiring()
    }

    fn resolve(&self, name: &str, version: VersionRef) -> Result<AnnotatedRelation, RelError> {
        match version {
            VersionRef::CommittedAt(v) => self
                .state
                .committed_at(name, v)
                .map_err(|_| RelError::UnboundRelation(name.to_string())),
            VersionRef::Current => Err(RelError::UnboundRelation(format!("{name} (unbound current version)"))),
        }
    }
}

/// Evaluates a reenactment plan over `state`, replaying the tuple ids that
/// execution handed out.
pub fn evaluate(plan: &ReenactPlan, state: &HistoryState) -> Result<AnnotatedRelation, ReenactError> {
    let mut ids = TableIds::new(Arc::new(state.id_table().clone()));
    Ok(eval_plan(&plan.plan, &StateCatalog { state }, &mut ids)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditlog::parse_log;
    use crate::history::execute_history;

    const LOG: &str = "\
TABLE R(A INT, B INT)
TABLE S(A INT)
1 | T1 | INSERT INTO R VALUES (1, 1), (2, 2), (3, 3);
2 | T1 | INSERT INTO S VALUES (5);
3 | T1 | COMMIT;
4 | T2 | UPDATE R SET B = B + 10 WHERE A = 1;
5 | T3 | UPDATE R SET B = 0 WHERE A = 2;
6 | T3 | COMMIT;
7 | T2 | DELETE FROM R WHERE A = 2;
8 | T2 | UPDATE R SET B = B * 2 WHERE A <= 2;
9 | T2 | INSERT INTO S SELECT A FROM R WHERE B > 0;
10 | T2 | COMMIT;
";

    #[test]
    fn chain_matches_direct_execution() {
        let h = parse_log(LOG).unwrap().history;
        let st = execute_history(&h).unwrap();
        for (rel, p) in reenact_transaction_all(&h, TxnId(2)).unwrap() {
            let got = evaluate(&p, &st).unwrap();
            assert_eq!(got, st.relation_in_txn(&rel, TxnId(2), 11).unwrap(), "{rel}\n{}", p.pretty());
        }
        let r = reenact_transaction(&h, TxnId(2), "R").unwrap();
        assert_eq!(access_count(&r, "R"), 3);
        let s = reenact_transaction(&h, TxnId(2), "S").unwrap();
        // The insert into S reads R through T2's own stages.
        assert_eq!(access_count(&s, "S"), 1);
        assert_eq!(access_count(&s, "R"), 4);
    }

    #[test]
    fn single_statement_has_no_merge() {
        let h = parse_log(LOG).unwrap().history;
        let p = reenact_transaction(&h, TxnId(3), "R").unwrap();
        assert!(!p.plan.pretty().contains("VersionMerge"));
        assert_eq!(access_count(&p, "R"), 1);
    }

    #[test]
    fn optimized_form_reads_once() {
        let h = parse_log(LOG).unwrap().history;
        assert_eq!(
            reenact_transaction_opt(&h, TxnId(2), "R"),
            Err(ReenactError::OptimizationInapplicable(TxnId(2)))
        );
        let st = execute_history(&h).unwrap();
        let p = reenact_transaction_opt(&h, TxnId(3), "R").unwrap();
        assert_eq!(access_count(&p, "R"), 1);
        assert_eq!(evaluate(&p, &st).unwrap(), st.relation_in_txn("R", TxnId(3), 7).unwrap());
    }

    #[test]
    fn history_plans_rebuild_committed_versions() {
        let h = parse_log(LOG).unwrap().history;
        let st = execute_history(&h).unwrap();
        for v in 1..=st.horizon() {
            for (rel, p) in reenact_history(&h, v).unwrap() {
                assert!(p.access.is_empty());
                assert_eq!(evaluate(&p, &st).unwrap(), st.committed_at(&rel, v).unwrap(), "{rel}@{v}");
            }
        }
    }

    #[test]
    fn errors() {
        let h = parse_log(LOG).unwrap().history;
        assert_eq!(reenact_transaction(&h, TxnId(9), "R"), Err(ReenactError::UnknownTransaction(TxnId(9))));
        assert_eq!(
            reenact_transaction(&h, TxnId(3), "S"),
            Err(ReenactError::NotModified(TxnId(3), "S".into()))
        );
        let commit = h.transaction(TxnId(1)).unwrap().ops.last().unwrap().clone();
        assert_eq!(
            reenact_update(&commit, &RelRef::CommittedAt("R".into(), 1)),
            Err(ReenactError::UnsupportedOp)
        );
    }
}
