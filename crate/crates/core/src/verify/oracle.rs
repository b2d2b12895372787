//! A plain multiset interpreter for read-committed histories.
//!
//! Rows carry private ids; each open transaction keeps an overlay of the rows
//! it wrote. A statement reads the committed rows as of its time with the
//! overlay applied on top. Nothing here is shared with the annotated executor.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::history::{History, OpKind};
use crate::mvsemiring::{BaseElem, TxnId, VersionId};
use crate::relalg::{Condition, QueryPlan, Schema, Tuple, VersionRef};

pub type Bag = BTreeMap<Tuple, u64>;

#[derive(Default)]
struct Interp {
    schemas: Vec<Arc<Schema>>,
    committed: BTreeMap<String, BTreeMap<u64, Tuple>>,
    /// Per transaction and relation: row id to new contents, `None` if deleted.
    overlays: HashMap<TxnId, BTreeMap<String, BTreeMap<u64, Option<Tuple>>>>,
    next_id: u64,
}

fn multiplicity(b: &BaseElem) -> u64 {
    match b {
        BaseElem::Nat(n) => *n,
        BaseElem::Bool(x) => u64::from(*x),
        BaseElem::Poly(p) => p.terms().map(|(_, c)| *c).sum(),
    }
}

impl Interp {
    fn schema(&self, rel: &str) -> Result<Arc<Schema>, String> {
        self.schemas
            .iter()
            .find(|s| s.name == rel)
            .cloned()
            .ok_or_else(|| format!("unknown relation {rel}"))
    }

    fn view(&self, txn: TxnId, rel: &str) -> BTreeMap<u64, Tuple> {
        let mut rows = self.committed.get(rel).cloned().unwrap_or_default();
        if let Some(ov) = self.overlays.get(&txn).and_then(|o| o.get(rel)) {
            for (id, row) in ov {
                match row {
                    Some(t) => {
                        rows.insert(*id, t.clone());
                    }
                    None => {
                        rows.remove(id);
                    }
                }
            }
        }
        rows
    }

    fn write(&mut self, txn: TxnId, rel: &str, id: u64, row: Option<Tuple>) {
        self.overlays
            .entry(txn)
            .or_default()
            .entry(rel.to_string())
            .or_default()
            .insert(id, row);
    }

    fn query(&self, txn: TxnId, p: &QueryPlan) -> Result<(Schema, Vec<Tuple>), String> {
        Ok(match p {
            QueryPlan::BaseRel {
                name,
                version: VersionRef::Current,
            } => ((*self.schema(name)?).clone(), self.view(txn, name).into_values().collect()),
            QueryPlan::Empty { schema } => ((**schema).clone(), Vec::new()),
            QueryPlan::Singleton { schema, tuple, annot } => {
                ((**schema).clone(), vec![tuple.clone(); multiplicity(annot) as usize])
            }
            QueryPlan::Select { cond, input } => {
                let (s, rows) = self.query(txn, input)?;
                let mut out = Vec::new();
                for t in rows {
                    if cond.eval(&s, &t).map_err(|e| e.to_string())? {
                        out.push(t);
                    }
                }
                (s, out)
            }
            QueryPlan::Project { exprs, input } => {
                let (s, rows) = self.query(txn, input)?;
                let mut attrs = Vec::new();
                for (e, n) in exprs {
                    attrs.push((n.clone(), e.type_of(&s).map_err(|e| e.to_string())?));
                }
                let mut out = Vec::new();
                for t in rows {
                    let vals = exprs
                        .iter()
                        .map(|(e, _)| e.eval(&s, &t))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| e.to_string())?;
                    out.push(Tuple(vals));
                }
                (
                    Schema {
                        name: s.name.clone(),
                        attrs,
                    },
                    out,
                )
            }
            QueryPlan::Join { left, right } => {
                let (ls, l) = self.query(txn, left)?;
                let (rs, r) = self.query(txn, right)?;
                let mut out = Vec::new();
                for a in &l {
                    for b in &r {
                        out.push(Tuple(a.0.iter().chain(&b.0).cloned().collect()));
                    }
                }
                let mut attrs = ls.attrs.clone();
                attrs.extend(rs.attrs.iter().cloned());
                (Schema { name: ls.name, attrs }, out)
            }
            QueryPlan::Union { left, right } => {
                let (s, mut l) = self.query(txn, left)?;
                l.extend(self.query(txn, right)?.1);
                (s, l)
            }
            other => return Err(format!("unsupported operator in insert query: {other:?}")),
        })
    }

    fn fresh(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn matching(&self, txn: TxnId, rel: &str, cond: &Condition) -> Result<Vec<(u64, Tuple)>, String> {
        let s = self.schema(rel)?;
        let mut out = Vec::new();
        for (id, t) in self.view(txn, rel) {
            if cond.eval(&s, &t).map_err(|e| e.to_string())? {
                out.push((id, t));
            }
        }
        Ok(out)
    }
}

/// Committed bag of every relation at every version `1..=horizon`.
pub fn bag_oracle(h: &History) -> Result<BTreeMap<VersionId, BTreeMap<String, Bag>>, String> {
    let mut it = Interp {
        schemas: h.schemas.clone(),
        ..Interp::default()
    };
    let ops = h.ops_by_time();
    let mut next = 0;
    let mut out = BTreeMap::new();
    for v in 1..=h.horizon() {
        while next < ops.len() && ops[next].time < v {
            let op = ops[next];
            next += 1;
            match &op.kind {
                OpKind::Update { rel, cond, exprs } => {
                    let s = it.schema(rel)?;
                    for (id, t) in it.matching(op.txn, rel, cond)? {
                        let vals = exprs
                            .iter()
                            .map(|(e, _)| e.eval(&s, &t))
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| e.to_string())?;
                        it.write(op.txn, rel, id, Some(Tuple(vals)));
                    }
                }
                OpKind::Delete { rel, cond } => {
                    for (id, _) in it.matching(op.txn, rel, cond)? {
                        it.write(op.txn, rel, id, None);
                    }
                }
                OpKind::Insert { rel, query } => {
                    let (_, rows) = it.query(op.txn, query)?;
                    for t in rows {
                        let id = it.fresh();
                        it.write(op.txn, rel, id, Some(t));
                    }
                }
                OpKind::Commit => {
                    for (rel, ov) in it.overlays.remove(&op.txn).unwrap_or_default() {
                        let base = it.committed.entry(rel).or_default();
                        for (id, row) in ov {
                            match row {
                                Some(t) => {
                                    base.insert(id, t);
                                }
                                None => {
                                    base.remove(&id);
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut bags = BTreeMap::new();
        for s in &h.schemas {
            let mut bag = Bag::new();
            for t in it.committed.get(&s.name).into_iter().flat_map(|m| m.values()) {
                *bag.entry(t.clone()).or_insert(0) += 1;
            }
            bags.insert(s.name.clone(), bag);
        }
        out.insert(v, bags);
    }
    Ok(out)
}
