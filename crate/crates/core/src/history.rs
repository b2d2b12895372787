//! Transactional histories under read-committed snapshot isolation.
//!
//! [`Engine`] consumes operations in time order and maintains three families
//! of relation versions:
//!
//! * `R[T,ν]`, the version of `R` inside transaction `T`,
//! * `R_E[T,ν]`, what a statement of `T` at `ν` reads (committed versions not
//!   yet overwritten by `T`, plus `T`'s own versions),
//! * `R_C[ν]`, the committed versions at `ν`.
//!
//! Versions only change at a few points (a transaction's start, right after
//! each of its statements, right after a commit), so each family is stored as
//! a timeline of change points. [`HistoryState`] answers queries for any `ν`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::mvsemiring::{
    do_commit, AnnotKind, BaseElem, BaseSemiring, LiftedHom, NormalForm, Shape, Summand, TupleId, TxnId, Var,
    VersionAnnotation, VersionId,
};
use crate::relalg::{
    eval_plan, AnnotatedRelation, Catalog, Condition, IdSource, QueryPlan, RelError, ScalarExpr, Schema, Tuple,
    VersionRef,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// `exprs` lists one expression per attribute of `rel`, in schema order.
    Update {
        rel: String,
        cond: Condition,
        exprs: Vec<(ScalarExpr, String)>,
    },
    Insert {
        rel: String,
        query: Arc<QueryPlan>,
    },
    Delete {
        rel: String,
        cond: Condition,
    },
    Commit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateOp {
    pub txn: TxnId,
    pub time: VersionId,
    pub kind: OpKind,
}

impl UpdateOp {
    pub fn target(&self) -> Option<&str> {
        match &self.kind {
            OpKind::Update { rel, .. } | OpKind::Insert { rel, .. } | OpKind::Delete { rel, .. } => Some(rel),
            OpKind::Commit => None,
        }
    }

    pub fn is_commit(&self) -> bool {
        matches!(self.kind, OpKind::Commit)
    }
}

/// True if the plan only builds constant rows (`INSERT ... VALUES`).
pub fn is_values_only(plan: &QueryPlan) -> bool {
    match plan {
        QueryPlan::Singleton { .. } | QueryPlan::Empty { .. } => true,
        QueryPlan::Union { left, right } => is_values_only(left) && is_values_only(right),
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub id: TxnId,
    pub ops: Vec<UpdateOp>,
}

impl Transaction {
    pub fn start(&self) -> VersionId {
        self.ops.first().map(|o| o.time).unwrap_or(0)
    }

    pub fn finish(&self) -> Option<VersionId> {
        self.ops.last().filter(|o| o.is_commit()).map(|o| o.time)
    }

    /// Relations written by the transaction, in order of first write.
    pub fn modified_relations(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for o in &self.ops {
            if let Some(r) = o.target() {
                if !out.iter().any(|x| x == r) {
                    out.push(r.to_string());
                }
            }
        }
        out
    }

    pub fn statements(&self) -> impl Iterator<Item = &UpdateOp> {
        self.ops.iter().filter(|o| !o.is_commit())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct History {
    pub schemas: Vec<Arc<Schema>>,
    pub semiring: BaseSemiring,
    /// Sorted by transaction id.
    pub transactions: Vec<Transaction>,
}

impl History {
    pub fn new(schemas: Vec<Arc<Schema>>, semiring: BaseSemiring) -> History {
        History {
            schemas,
            semiring,
            transactions: Vec::new(),
        }
    }

    pub fn schema(&self, name: &str) -> Option<&Arc<Schema>> {
        self.schemas.iter().find(|s| s.name == name)
    }

    pub fn transaction(&self, id: TxnId) -> Option<&Transaction> {
        self.transactions.iter().find(|t| t.id == id)
    }

    /// Appends `op` to its transaction, keeping ops ordered by time.
    pub fn push(&mut self, op: UpdateOp) {
        let pos = match self.transactions.binary_search_by_key(&op.txn, |t| t.id) {
            Ok(p) => p,
            Err(p) => {
                self.transactions.insert(p, Transaction { id: op.txn, ops: Vec::new() });
                p
            }
        };
        let ops = &mut self.transactions[pos].ops;
        let at = ops.partition_point(|o| o.time < op.time);
        ops.insert(at, op);
    }

    pub fn ops_by_time(&self) -> Vec<&UpdateOp> {
        let mut v: Vec<&UpdateOp> = self.transactions.iter().flat_map(|t| t.ops.iter()).collect();
        v.sort_by_key(|o| o.time);
        v
    }

    pub fn horizon(&self) -> VersionId {
        self.ops_by_time().last().map(|o| o.time + 1).unwrap_or(1)
    }

    /// Transactions ordered by commit time.
    pub fn commit_order(&self) -> Vec<&Transaction> {
        let mut v: Vec<&Transaction> = self.transactions.iter().filter(|t| t.finish().is_some()).collect();
        v.sort_by_key(|t| t.finish());
        v
    }

    /// The same history with every constant annotation mapped through `h`.
    pub fn map_base(&self, h: &LiftedHom) -> History {
        fn map_plan(p: &Arc<QueryPlan>, h: &LiftedHom) -> Arc<QueryPlan> {
            Arc::new(match p.as_ref() {
                QueryPlan::Singleton { schema, tuple, annot } => QueryPlan::Singleton {
                    schema: schema.clone(),
                    tuple: tuple.clone(),
                    annot: h.map_base(annot),
                },
                QueryPlan::Union { left, right } => QueryPlan::Union {
                    left: map_plan(left, h),
                    right: map_plan(right, h),
                },
                QueryPlan::Join { left, right } => QueryPlan::Join {
                    left: map_plan(left, h),
                    right: map_plan(right, h),
                },
                QueryPlan::Select { cond, input } => QueryPlan::Select {
                    cond: cond.clone(),
                    input: map_plan(input, h),
                },
                QueryPlan::Project { exprs, input } => QueryPlan::Project {
                    exprs: exprs.clone(),
                    input: map_plan(input, h),
                },
                other => other.clone(),
            })
        }
        let mut out = History::new(self.schemas.clone(), h.target);
        for t in &self.transactions {
            let ops = t
                .ops
                .iter()
                .map(|o| UpdateOp {
                    txn: o.txn,
                    time: o.time,
                    kind: match &o.kind {
                        OpKind::Insert { rel, query } => OpKind::Insert {
                            rel: rel.clone(),
                            query: map_plan(query, h),
                        },
                        k => k.clone(),
                    },
                })
                .collect();
            out.transactions.push(Transaction { id: t.id, ops });
        }
        out
    }

    /// For every variable annotating a constant row: the relation and tuple it
    /// was inserted as.
    pub fn var_origins(&self) -> BTreeMap<Var, (String, Tuple)> {
        fn walk(p: &QueryPlan, rel: &str, out: &mut BTreeMap<Var, (String, Tuple)>) {
            if let QueryPlan::Singleton { tuple, annot, .. } = p {
                if let Some(v) = annot.as_var() {
                    out.insert(v.clone(), (rel.to_string(), tuple.clone()));
                }
            }
            for c in p.children() {
                walk(c, rel, out);
            }
        }
        let mut out = BTreeMap::new();
        for t in &self.transactions {
            for o in &t.ops {
                if let OpKind::Insert { rel, query } = &o.kind {
                    walk(query, rel, &mut out);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryError {
    #[error("ill-formed history: two operations at time {0}")]
    DuplicateTimestamp(VersionId),
    #[error("ill-formed history: operation at time {time} is not after time {last}")]
    OutOfOrder { time: VersionId, last: VersionId },
    #[error("ill-formed history: {txn} has an operation at time {time} after its commit")]
    StatementAfterCommit { txn: TxnId, time: VersionId },
    #[error("ill-formed history: {0} never commits")]
    Uncommitted(TxnId),
    #[error("ill-formed history: time 0 is reserved")]
    ZeroTime,
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown transaction {0}")]
    UnknownTransaction(TxnId),
    #[error("invalid insert query: {0}")]
    InvalidInsert(String),
    #[error("lock violation: {txn} writes tuple {id} at time {time} while {holder} holds its write lock")]
    LockViolation {
        txn: TxnId,
        holder: TxnId,
        id: TupleId,
        time: VersionId,
    },
    #[error(transparent)]
    Rel(#[from] RelError),
}

type Timeline = Vec<(VersionId, Arc<AnnotatedRelation>)>;

fn at(tl: &Timeline, v: VersionId) -> Option<&Arc<AnnotatedRelation>> {
    let i = tl.partition_point(|(t, _)| *t <= v);
    if i == 0 {
        None
    } else {
        Some(&tl[i - 1].1)
    }
}

/// Identifies a tuple version by relation, tuple and summand shape.
type VersionKey = (String, Tuple, Shape);

#[derive(Clone, Debug)]
struct TxnState {
    start: VersionId,
    finish: Option<VersionId>,
    views: BTreeMap<String, Timeline>,
    /// Versions overwritten by an update or delete of this transaction, with
    /// the time of the overwriting statement.
    killed: HashMap<VersionKey, VersionId>,
}

/// Fresh-id policy: a global counter, or a table recorded by a previous run
/// keyed by (annotation time, tuple).
#[derive(Clone, Debug)]
pub enum IdAllocator {
    Counter(u64),
    Table(Arc<BTreeMap<(VersionId, Tuple), TupleId>>),
}

struct RecordingIds<'a> {
    alloc: &'a mut IdAllocator,
    log: Vec<((VersionId, Tuple), TupleId)>,
}

impl IdSource for RecordingIds<'_> {
    fn fresh(&mut self, _txn: TxnId, time: VersionId, tuple: &Tuple) -> TupleId {
        let id = match self.alloc {
            IdAllocator::Counter(c) => {
                *c += 1;
                TupleId(*c)
            }
            IdAllocator::Table(t) => match t.get(&(time, tuple.clone())) {
                Some(id) => *id,
                None => {
                    // Not seen by the recording run; stay clear of recorded ids.
                    let max = t.values().map(|i| i.0).max().unwrap_or(0);
                    TupleId(max + 1 + self.log.len() as u64)
                }
            },
        };
        self.log.push(((time, tuple.clone()), id));
        id
    }
}

/// Replays the ids recorded during execution; used when evaluating
/// reenactment plans so that insert annotations coincide.
#[derive(Clone, Debug)]
pub struct TableIds {
    pub table: Arc<BTreeMap<(VersionId, Tuple), TupleId>>,
    next: u64,
}

impl TableIds {
    pub fn new(table: Arc<BTreeMap<(VersionId, Tuple), TupleId>>) -> TableIds {
        let next = table.values().map(|i| i.0).max().unwrap_or(0);
        TableIds { table, next }
    }
}

impl IdSource for TableIds {
    fn fresh(&mut self, _txn: TxnId, time: VersionId, tuple: &Tuple) -> TupleId {
        match self.table.get(&(time, tuple.clone())) {
            Some(id) => *id,
            None => {
                self.next += 1;
                TupleId(self.next)
            }
        }
    }
}

/// The relation versions induced by a history. Immutable once built.
#[derive(Clone, Debug)]
pub struct HistoryState {
    schemas: Vec<Arc<Schema>>,
    semiring: BaseSemiring,
    committed: BTreeMap<String, Timeline>,
    txns: BTreeMap<TxnId, TxnState>,
    ids: BTreeMap<(VersionId, Tuple), TupleId>,
    horizon: VersionId,
}

impl HistoryState {
    fn new(schemas: Vec<Arc<Schema>>, semiring: BaseSemiring) -> HistoryState {
        let committed = schemas
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    vec![(0, Arc::new(AnnotatedRelation::empty(s.clone(), semiring)))],
                )
            })
            .collect();
        HistoryState {
            schemas,
            semiring,
            committed,
            txns: BTreeMap::new(),
            ids: BTreeMap::new(),
            horizon: 1,
        }
    }

    pub fn semiring(&self) -> BaseSemiring {
        self.semiring
    }

    pub fn schemas(&self) -> &[Arc<Schema>] {
        &self.schemas
    }

    pub fn schema(&self, rel: &str) -> Result<&Arc<Schema>, HistoryError> {
        self.schemas
            .iter()
            .find(|s| s.name == rel)
            .ok_or_else(|| HistoryError::UnknownRelation(rel.to_string()))
    }

    /// One past the last operation.
    pub fn horizon(&self) -> VersionId {
        self.horizon
    }

    /// Ids handed out to inserted tuples, keyed by (annotation time, tuple).
    pub fn id_table(&self) -> &BTreeMap<(VersionId, Tuple), TupleId> {
        &self.ids
    }

    pub fn start(&self, txn: TxnId) -> Result<VersionId, HistoryError> {
        Ok(self.txn(txn)?.start)
    }

    pub fn finish(&self, txn: TxnId) -> Result<Option<VersionId>, HistoryError> {
        Ok(self.txn(txn)?.finish)
    }

    fn txn(&self, txn: TxnId) -> Result<&TxnState, HistoryError> {
        self.txns.get(&txn).ok_or(HistoryError::UnknownTransaction(txn))
    }

    fn empty(&self, rel: &str) -> Result<AnnotatedRelation, HistoryError> {
        Ok(AnnotatedRelation::empty(self.schema(rel)?.clone(), self.semiring))
    }

    /// `R_C[ν]`.
    pub fn committed_at(&self, rel: &str, v: VersionId) -> Result<AnnotatedRelation, HistoryError> {
        let tl = self
            .committed
            .get(rel)
            .ok_or_else(|| HistoryError::UnknownRelation(rel.to_string()))?;
        Ok(at(tl, v).map(|r| (**r).clone()).unwrap_or(self.empty(rel)?))
    }

    /// `R[T,ν]`.
    pub fn relation_in_txn(&self, rel: &str, txn: TxnId, v: VersionId) -> Result<AnnotatedRelation, HistoryError> {
        let st = self.txn(txn)?;
        self.schema(rel)?;
        if v < st.start {
            return self.empty(rel);
        }
        match st.views.get(rel).and_then(|tl| at(tl, v)) {
            Some(r) => Ok((**r).clone()),
            None => self.empty(rel),
        }
    }

    /// `updated(T, t, k, ν)`: some statement of `T` before `ν` overwrote the
    /// version `k` of tuple `t`.
    pub fn updated(&self, txn: TxnId, rel: &str, t: &Tuple, k: &Summand, v: VersionId) -> bool {
        self.txns
            .get(&txn)
            .and_then(|st| st.killed.get(&(rel.to_string(), t.clone(), k.shape.clone())))
            .is_some_and(|when| *when < v)
    }

    pub fn valid_in(&self, txn: TxnId, k: &Summand) -> bool {
        matches!(k.outermost(), Some(a) if a.txn == txn && a.kind != AnnotKind::C)
    }

    pub fn valid_ex(&self, txn: TxnId, rel: &str, t: &Tuple, k: &Summand, v: VersionId) -> bool {
        !self.updated(txn, rel, t, k, v)
    }

    /// `k` is a version committed by `txn` that no other transaction finished
    /// before `ν` has overwritten.
    pub fn valid_at(&self, txn: TxnId, rel: &str, t: &Tuple, k: &Summand, v: VersionId) -> bool {
        if !matches!(k.outermost(), Some(a) if a.txn == txn && a.kind == AnnotKind::C) {
            return false;
        }
        !self.txns.iter().any(|(id, st)| {
            *id != txn && st.finish.is_some_and(|f| f < v) && self.updated(*id, rel, t, k, v)
        })
    }

    /// `R_E[T,ν]`.
    pub fn visible_to_update(&self, rel: &str, txn: TxnId, v: VersionId) -> Result<AnnotatedRelation, HistoryError> {
        let committed = self.committed_at(rel, v)?;
        let own = self.relation_in_txn(rel, txn, v)?;
        let mut out = committed.filter_summands(|t, k| self.valid_ex(txn, rel, t, k, v));
        for (t, k) in own.summands() {
            if self.valid_in(txn, k) {
                out.add_summand(t.clone(), k.clone());
            }
        }
        Ok(out)
    }

    /// `R_C[ν]` recomputed from the final versions of finished transactions.
    fn recompute_committed(&self, rel: &str, v: VersionId) -> Result<AnnotatedRelation, HistoryError> {
        let mut out = self.empty(rel)?;
        for (id, st) in &self.txns {
            let Some(f) = st.finish else { continue };
            if f >= v {
                continue;
            }
            let Some(view) = st.views.get(rel).and_then(|tl| at(tl, v)) else { continue };
            for (t, k) in view.summands() {
                if self.valid_at(*id, rel, t, k, v) {
                    out.add_summand(t.clone(), k.clone());
                }
            }
        }
        Ok(out)
    }

    /// Summands with no delete layer anywhere: the current copies of a tuple.
    pub fn live(r: &AnnotatedRelation) -> AnnotatedRelation {
        r.filter_summands(|_, k| !k.shape.any_layer(&|a| a.kind == AnnotKind::D))
    }

    /// Bag view: live multiplicities after mapping every variable to 1.
    pub fn live_bag(r: &AnnotatedRelation) -> BTreeMap<Tuple, u64> {
        let h = LiftedHom::vars_to_one();
        let mut out = BTreeMap::new();
        for (t, k) in HistoryState::live(r).rows() {
            let n = match r.semiring() {
                BaseSemiring::ProvPoly => h.apply(k),
                _ => k.clone(),
            };
            let c: u64 = n.summands().iter().map(|s| s.coeff).sum();
            if c > 0 {
                out.insert(t.clone(), c);
            }
        }
        out
    }
}

struct StmtCatalog<'a> {
    state: &'a HistoryState,
    txn: TxnId,
    time: VersionId,
}

impl Catalog for StmtCatalog<'_> {
    fn schema(&self, name: &str) -> Option<Arc<Schema>> {
        self.state.schema(name).ok().cloned()
    }

    fn semiring(&self) -> BaseSemiring {
        self.state.semiring
    }

    fn resolve(&self, name: &str, version: VersionRef) -> Result<AnnotatedRelation, RelError> {
        let r = match version {
            VersionRef::Current => self.state.visible_to_update(name, self.txn, self.time),
            VersionRef::CommittedAt(v) => self.state.committed_at(name, v),
        };
        r.map_err(|_| RelError::UnboundRelation(name.to_string()))
    }
}

fn check_insert_plan(p: &QueryPlan, state: &HistoryState) -> Result<(), HistoryError> {
    match p {
        QueryPlan::Singleton { annot, .. } => {
            let _ = state.semiring.coerce(annot);
            Ok(())
        }
        QueryPlan::BaseRel { name, version } => {
            state.schema(name)?;
            if *version != VersionRef::Current {
                return Err(HistoryError::InvalidInsert(format!("insert reads a fixed version of {name}")));
            }
            Ok(())
        }
        QueryPlan::Empty { .. } => Ok(()),
        QueryPlan::Select { input, .. } | QueryPlan::Project { input, .. } => check_insert_plan(input, state),
        QueryPlan::Union { left, right } | QueryPlan::Join { left, right } => {
            check_insert_plan(left, state)?;
            check_insert_plan(right, state)
        }
        other => Err(HistoryError::InvalidInsert(format!(
            "operator `{}` is not allowed in an insert query",
            other.pretty().lines().next().unwrap_or("")
        ))),
    }
}

/// Incremental executor. Operations must arrive in strictly increasing time.
/// A failed [`Engine::apply`] leaves the engine unchanged.
#[derive(Clone, Debug)]
pub struct Engine {
    state: HistoryState,
    history: History,
    last_time: VersionId,
    locks: HashMap<TupleId, TxnId>,
    alloc: IdAllocator,
}

impl Engine {
    pub fn new(schemas: Vec<Arc<Schema>>, semiring: BaseSemiring) -> Engine {
        Engine::with_ids(schemas, semiring, IdAllocator::Counter(0))
    }

    pub fn with_ids(schemas: Vec<Arc<Schema>>, semiring: BaseSemiring, alloc: IdAllocator) -> Engine {
        Engine {
            state: HistoryState::new(schemas.clone(), semiring),
            history: History::new(schemas, semiring),
            last_time: 0,
            locks: HashMap::new(),
            alloc,
        }
    }

    pub fn state(&self) -> &HistoryState {
        &self.state
    }

    /// The operations applied so far.
    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn last_time(&self) -> VersionId {
        self.last_time
    }

    pub fn is_open(&self, txn: TxnId) -> bool {
        self.state.txns.get(&txn).is_some_and(|s| s.finish.is_none())
    }

    pub fn apply(&mut self, op: &UpdateOp) -> Result<(), HistoryError> {
        if op.time == 0 {
            return Err(HistoryError::ZeroTime);
        }
        if op.time == self.last_time {
            return Err(HistoryError::DuplicateTimestamp(op.time));
        }
        if op.time < self.last_time {
            return Err(HistoryError::OutOfOrder {
                time: op.time,
                last: self.last_time,
            });
        }
        if let Some(st) = self.state.txns.get(&op.txn) {
            if st.finish.is_some() {
                return Err(HistoryError::StatementAfterCommit {
                    txn: op.txn,
                    time: op.time,
                });
            }
        }
        if let Some(rel) = op.target() {
            self.state.schema(rel)?;
        }

        // All changes are computed on a scratch copy and swapped in at the end.
        let mut state = self.state.clone();
        let mut alloc = self.alloc.clone();
        let mut locks = self.locks.clone();
        let v = op.time;
        let txn = op.txn;
        if !state.txns.contains_key(&txn) {
            let mut views = BTreeMap::new();
            for s in &state.schemas {
                views.insert(s.name.clone(), vec![(v, Arc::new(state.committed_at(&s.name, v)?))]);
            }
            state.txns.insert(
                txn,
                TxnState {
                    start: v,
                    finish: None,
                    views,
                    killed: HashMap::new(),
                },
            );
        }

        match &op.kind {
            OpKind::Update { rel, cond, exprs } => {
                let input = state.visible_to_update(rel, txn, v)?;
                cond.check(&input.schema)?;
                crate::relalg::project_schema(exprs, &input.schema)?;
                let mut out = AnnotatedRelation::empty(input.schema.clone(), state.semiring);
                let mut kills = Vec::new();
                for (t, k) in input.rows() {
                    if cond.eval(&input.schema, t)? {
                        let vals = exprs
                            .iter()
                            .map(|(e, _)| e.eval(&input.schema, t))
                            .collect::<Result<Vec<_>, _>>()?;
                        let nt = Tuple(vals);
                        for s in k.summands() {
                            let id = s.id_of().map_err(RelError::from)?;
                            take_lock(&mut locks, id, txn, v)?;
                            kills.push((t.clone(), s.shape.clone()));
                            out.add_summand(nt.clone(), s.wrap(VersionAnnotation::new(AnnotKind::U, txn, v + 1, id)));
                        }
                    } else {
                        out.add(t.clone(), k.clone());
                    }
                }
                record(&mut state, txn, rel, v, out, kills);
            }
            OpKind::Delete { rel, cond } => {
                let input = state.visible_to_update(rel, txn, v)?;
                cond.check(&input.schema)?;
                let mut out = AnnotatedRelation::empty(input.schema.clone(), state.semiring);
                let mut kills = Vec::new();
                for (t, k) in input.rows() {
                    if cond.eval(&input.schema, t)? {
                        for s in k.summands() {
                            let id = s.id_of().map_err(RelError::from)?;
                            take_lock(&mut locks, id, txn, v)?;
                            kills.push((t.clone(), s.shape.clone()));
                            out.add_summand(t.clone(), s.wrap(VersionAnnotation::new(AnnotKind::D, txn, v + 1, id)));
                        }
                    } else {
                        out.add(t.clone(), k.clone());
                    }
                }
                record(&mut state, txn, rel, v, out, kills);
            }
            OpKind::Insert { rel, query } => {
                check_insert_plan(query, &state)?;
                let input = state.visible_to_update(rel, txn, v)?;
                let cat = StmtCatalog {
                    state: &state,
                    txn,
                    time: v,
                };
                let mut rec = RecordingIds {
                    alloc: &mut alloc,
                    log: Vec::new(),
                };
                let plan = QueryPlan::annot(AnnotKind::I, txn, v + 1, query.clone());
                let q = eval_plan(&plan, &cat, &mut rec)?;
                if !q.schema.compatible(&input.schema) {
                    return Err(RelError::SchemaMismatch(format!(
                        "insert into {} produces {}",
                        input.schema, q.schema
                    ))
                    .into());
                }
                let mut out = input.clone();
                for (t, k) in q.rows() {
                    out.add(t.clone(), k.clone());
                }
                for (key, id) in rec.log {
                    locks.insert(id, txn);
                    state.ids.insert(key, id);
                }
                record(&mut state, txn, rel, v, out, Vec::new());
            }
            OpKind::Commit => {
                let st = state.txns.get_mut(&txn).expect("registered above");
                for tl in st.views.values_mut() {
                    let cur = tl.last().expect("views start non-empty").1.clone();
                    let committed = cur.map_summands(|_, s| do_commit(txn, v, s));
                    tl.push((v + 1, Arc::new(committed)));
                }
                st.finish = Some(v);
                locks.retain(|_, holder| *holder != txn);
                let names: Vec<String> = state.schemas.iter().map(|s| s.name.clone()).collect();
                for name in names {
                    let rc = state.recompute_committed(&name, v + 1)?;
                    state.committed.get_mut(&name).unwrap().push((v + 1, Arc::new(rc)));
                }
            }
        }
        state.horizon = v + 1;
        self.state = state;
        self.alloc = alloc;
        self.locks = locks;
        self.last_time = v;
        self.history.push(op.clone());
        Ok(())
    }

    /// Checks that every transaction committed and returns the state.
    pub fn finish(self) -> Result<HistoryState, HistoryError> {
        if let Some((id, _)) = self.state.txns.iter().find(|(_, s)| s.finish.is_none()) {
            return Err(HistoryError::Uncommitted(*id));
        }
        Ok(self.state)
    }
}

fn take_lock(locks: &mut HashMap<TupleId, TxnId>, id: TupleId, txn: TxnId, time: VersionId) -> Result<(), HistoryError> {
    match locks.get(&id) {
        Some(holder) if *holder != txn => Err(HistoryError::LockViolation {
            txn,
            holder: *holder,
            id,
            time,
        }),
        _ => {
            locks.insert(id, txn);
            Ok(())
        }
    }
}

fn record(
    state: &mut HistoryState,
    txn: TxnId,
    rel: &str,
    v: VersionId,
    out: AnnotatedRelation,
    kills: Vec<(Tuple, Shape)>,
) {
    let st = state.txns.get_mut(&txn).expect("registered");
    st.views.get_mut(rel).expect("known relation").push((v + 1, Arc::new(out)));
    for (t, shape) in kills {
        st.killed.entry((rel.to_string(), t, shape)).or_insert(v);
    }
}

pub fn execute_history(h: &History) -> Result<HistoryState, HistoryError> {
    execute_history_with(h, IdAllocator::Counter(0))
}

pub fn execute_history_with(h: &History, alloc: IdAllocator) -> Result<HistoryState, HistoryError> {
    let mut e = Engine::with_ids(h.schemas.clone(), h.semiring, alloc);
    for op in h.ops_by_time() {
        e.apply(op)?;
    }
    for t in &h.transactions {
        if t.finish().is_none() {
            return Err(HistoryError::Uncommitted(t.id));
        }
    }
    e.finish()
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Update { rel, cond, .. } => write!(f, "update {rel} where {cond}"),
            OpKind::Insert { rel, .. } => write!(f, "insert into {rel}"),
            OpKind::Delete { rel, cond } => write!(f, "delete from {rel} where {cond}"),
            OpKind::Commit => f.write_str("commit"),
        }
    }
}

/// A one-row `VALUES` insert annotated with `annot`.
pub fn values_insert(schema: &Arc<Schema>, rows: Vec<(Tuple, BaseElem)>) -> Arc<QueryPlan> {
    let mut plan: Option<Arc<QueryPlan>> = None;
    for (tuple, annot) in rows {
        let s = Arc::new(QueryPlan::Singleton {
            schema: schema.clone(),
            tuple,
            annot,
        });
        plan = Some(match plan {
            None => s,
            Some(p) => QueryPlan::union(p, s),
        });
    }
    plan.unwrap_or_else(|| Arc::new(QueryPlan::Empty { schema: schema.clone() }))
}

/// The straight-line fold of the update operations of a serial history:
/// each operation applied to the result of the previous one.
pub fn apply_serially(h: &History, rel: &str) -> Result<AnnotatedRelation, HistoryError> {
    let schema = h
        .schema(rel)
        .ok_or_else(|| HistoryError::UnknownRelation(rel.to_string()))?
        .clone();
    let mut cur = AnnotatedRelation::empty(schema, h.semiring);
    let mut ids = crate::relalg::CounterIds::default();
    for op in h.ops_by_time() {
        match &op.kind {
            OpKind::Commit => {
                cur = cur.map_summands(|_, s| do_commit(op.txn, op.time, s));
            }
            OpKind::Insert { rel: r, query } if r == rel => {
                let mut cat = crate::relalg::MapCatalog::new(h.semiring);
                cat.insert(cur.clone());
                let q = eval_plan(&QueryPlan::annot(AnnotKind::I, op.txn, op.time + 1, query.clone()), &cat, &mut ids)?;
                for (t, k) in q.rows() {
                    cur.add(t.clone(), k.clone());
                }
            }
            OpKind::Update { rel: r, cond, exprs } if r == rel => {
                let mut out = AnnotatedRelation::empty(cur.schema.clone(), h.semiring);
                for (t, k) in cur.rows() {
                    if cond.eval(&cur.schema, t)? {
                        let nt = Tuple(
                            exprs
                                .iter()
                                .map(|(e, _)| e.eval(&cur.schema, t))
                                .collect::<Result<_, _>>()?,
                        );
                        let wrapped = k.summands().iter().map(|s| {
                            let id = s.id_of().expect("admissible");
                            s.wrap(VersionAnnotation::new(AnnotKind::U, op.txn, op.time + 1, id))
                        });
                        out.add(nt, NormalForm::from_summands(h.semiring, wrapped));
                    } else {
                        out.add(t.clone(), k.clone());
                    }
                }
                cur = out;
            }
            OpKind::Delete { rel: r, cond } if r == rel => {
                let mut out = AnnotatedRelation::empty(cur.schema.clone(), h.semiring);
                for (t, k) in cur.rows() {
                    if cond.eval(&cur.schema, t)? {
                        let wrapped = k.summands().iter().map(|s| {
                            let id = s.id_of().expect("admissible");
                            s.wrap(VersionAnnotation::new(AnnotKind::D, op.txn, op.time + 1, id))
                        });
                        out.add(t.clone(), NormalForm::from_summands(h.semiring, wrapped));
                    } else {
                        out.add(t.clone(), k.clone());
                    }
                }
                cur = out;
            }
            _ => {}
        }
    }
    Ok(cur)
}
