//! Random histories, annotations and relations.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::auditlog::{lower_statement, Lowerer};
use crate::history::{Engine, History, HistoryError};
use crate::mvsemiring::{AnnotExpr, AnnotKind, BaseElem, BaseSemiring, TupleId, TxnId, VersionAnnotation};
use crate::relalg::{AnnotatedRelation, AttrType, Schema, Tuple, Value};

use super::FuzzConfig;

/// `R0(A INT, B INT)` and `R1(A INT, B INT, C STRING)`, truncated to `n`.
pub fn fuzz_schemas(n: usize) -> Vec<Arc<Schema>> {
    let all = [
        Schema::new("R0", &[("A", AttrType::Int), ("B", AttrType::Int)]),
        Schema::new("R1", &[("A", AttrType::Int), ("B", AttrType::Int), ("C", AttrType::Str)]),
    ];
    all.into_iter().take(n.clamp(1, 2)).map(Arc::new).collect()
}

struct SqlGen<'a> {
    rng: &'a mut ChaCha8Rng,
    domain: i64,
}

impl SqlGen<'_> {
    fn val(&mut self) -> i64 {
        self.rng.gen_range(0..self.domain)
    }

    fn string(&mut self) -> String {
        format!("'s{}'", self.val())
    }

    fn atom(&mut self, s: &Schema) -> String {
        let ops = ["=", "<>", "<", "<=", ">", ">="];
        let op = ops.choose(self.rng).unwrap();
        if s.arity() == 3 && self.rng.gen_bool(0.15) {
            let op = if self.rng.gen_bool(0.5) { "=" } else { "<>" };
            return format!("C {op} {}", self.string());
        }
        let col = if self.rng.gen_bool(0.5) { "A" } else { "B" };
        format!("{col} {op} {}", self.val())
    }

    fn cond(&mut self, s: &Schema) -> String {
        match self.rng.gen_range(0..20) {
            0 => "TRUE".into(),
            1 => "FALSE".into(),
            2..=9 => self.atom(s),
            10..=13 => format!("{} AND {}", self.atom(s), self.atom(s)),
            14..=16 => format!("{} OR {}", self.atom(s), self.atom(s)),
            17 => format!("NOT ({} AND {})", self.atom(s), self.atom(s)),
            _ => format!("NOT {}", self.atom(s)),
        }
    }

    fn assignment(&mut self, col: &str) -> String {
        if col == "C" {
            return format!("C = {}", self.string());
        }
        let other = if col == "A" { "B" } else { "A" };
        match self.rng.gen_range(0..5) {
            0 => format!("{col} = {col} + {}", self.rng.gen_range(1..3)),
            1 => format!("{col} = {}", self.val()),
            2 => format!("{col} = {other}"),
            3 => format!("{col} = {other} - {}", self.rng.gen_range(0..3)),
            _ => format!("{col} = {col} * 2 - {}", self.val()),
        }
    }

    fn row(&mut self, s: &Schema) -> String {
        if s.arity() == 3 {
            format!("({}, {}, {})", self.val(), self.val(), self.string())
        } else {
            format!("({}, {})", self.val(), self.val())
        }
    }

    fn statement(&mut self, schemas: &[Arc<Schema>], mix: &[f64; 4]) -> String {
        let s = schemas.choose(self.rng).unwrap().clone();
        let total: f64 = mix.iter().sum();
        let mut pick = self.rng.gen_range(0.0..total);
        let mut kind = 3;
        for (i, w) in mix.iter().enumerate() {
            if pick < *w {
                kind = i;
                break;
            }
            pick -= w;
        }
        match kind {
            0 => {
                let mut cols: Vec<&str> = s.attr_names().collect();
                cols.shuffle(self.rng);
                let n = self.rng.gen_range(1..=2.min(cols.len()));
                let sets: Vec<String> = cols[..n].iter().map(|c| self.assignment(c)).collect();
                format!("UPDATE {} SET {} WHERE {}", s.name, sets.join(", "), self.cond(&s))
            }
            1 => {
                if self.rng.gen_bool(0.15) {
                    // Omitted column: exercises sequence defaults.
                    return format!("INSERT INTO {} (B) VALUES ({})", s.name, self.val());
                }
                let n = self.rng.gen_range(1..=3);
                let rows: Vec<String> = (0..n).map(|_| self.row(&s)).collect();
                format!("INSERT INTO {} VALUES {}", s.name, rows.join(", "))
            }
            2 => {
                let src = schemas.choose(self.rng).unwrap().clone();
                let mut items = match self.rng.gen_range(0..3) {
                    0 => vec!["A".to_string(), "B".to_string()],
                    1 => vec!["A + 1".to_string(), "B".to_string()],
                    _ => vec!["B".to_string(), "A".to_string()],
                };
                if s.arity() == 3 {
                    if src.arity() == 3 && self.rng.gen_bool(0.5) {
                        items.push("C".into());
                    } else {
                        let v = self.string();
                        items.push(v);
                    }
                }
                format!(
                    "INSERT INTO {} SELECT {} FROM {} WHERE {}",
                    s.name,
                    items.join(", "),
                    src.name,
                    self.cond(&src)
                )
            }
            _ => format!("DELETE FROM {} WHERE {}", s.name, self.cond(&s)),
        }
    }
}

fn total_summands(e: &Engine, txn: TxnId, time: u32) -> usize {
    let st = e.state();
    st.schemas()
        .iter()
        .map(|s| {
            let own = st.relation_in_txn(&s.name, txn, time + 1).map(|r| r.num_summands()).unwrap_or(0);
            let com = st.committed_at(&s.name, time + 1).map(|r| r.num_summands()).unwrap_or(0);
            own.max(com)
        })
        .max()
        .unwrap_or(0)
}

/// A well-formed history that the executor accepts without lock violations.
/// Statements are drawn as SQL text and lowered through the log parser's
/// [`Lowerer`], so the result round-trips through the log format.
pub fn random_history(cfg: &FuzzConfig, rng: &mut ChaCha8Rng) -> History {
    let schemas = fuzz_schemas(rng.gen_range(1..=cfg.max_relations.max(1)));
    let ntx = rng.gen_range(1..=cfg.max_txns.max(1)) as u32;
    let max_stmts = cfg.max_ops.saturating_sub(1).max(1);
    let mut remaining: Vec<(TxnId, usize)> = (1..=ntx).map(|t| (TxnId(t), rng.gen_range(1..=max_stmts))).collect();
    let mut engine = Engine::new(schemas.clone(), BaseSemiring::ProvPoly);
    let mut lowerer = Lowerer::new(schemas.clone());
    let mut time = 0u32;
    let mut current = 0usize;
    while !remaining.is_empty() {
        if !rng.gen_bool(cfg.density.clamp(0.0, 1.0)) || current >= remaining.len() {
            current = rng.gen_range(0..remaining.len());
        }
        let (txn, left) = remaining[current];
        time += 1 + u32::from(rng.gen_bool(0.1));
        if left == 0 {
            let mut l = lowerer.clone();
            let op = lower_statement(&mut l, "COMMIT", txn, time).expect("commit lowers").expect("commit is a write");
            engine.apply(&op).expect("commit of an open transaction succeeds");
            remaining.remove(current);
            continue;
        }
        for _ in 0..8 {
            let sql = SqlGen {
                rng: &mut *rng,
                domain: cfg.domain.max(1) as i64,
            }
            .statement(&schemas, &cfg.op_mix);
            let mut l = lowerer.clone();
            let Ok(Some(op)) = lower_statement(&mut l, &sql, txn, time) else { continue };
            let mut e = engine.clone();
            match e.apply(&op) {
                Ok(()) if total_summands(&e, txn, time) <= cfg.max_tuples => {
                    engine = e;
                    lowerer = l;
                    break;
                }
                Ok(()) | Err(HistoryError::LockViolation { .. }) | Err(HistoryError::Rel(_)) => continue,
                Err(other) => panic!("generator produced an invalid statement `{sql}`: {other}"),
            }
        }
        remaining[current].1 -= 1;
    }
    engine.history().clone()
}

/// A random symbolic expression over `x1..x4`, at most `depth` deep.
pub fn random_expr(rng: &mut ChaCha8Rng, k: BaseSemiring, depth: u32) -> AnnotExpr {
    let leaf = |rng: &mut ChaCha8Rng| match k {
        BaseSemiring::Nat => AnnotExpr::nat(rng.gen_range(0..4)),
        BaseSemiring::Bool => AnnotExpr::base(BaseElem::Bool(rng.gen_bool(0.7))),
        BaseSemiring::ProvPoly => match rng.gen_range(0..6) {
            0 => AnnotExpr::nat(rng.gen_range(0..3)),
            n => AnnotExpr::var(&format!("x{}", n.min(4))),
        },
    };
    if depth == 0 {
        return leaf(rng);
    }
    match rng.gen_range(0..5) {
        0 => leaf(rng),
        1 => AnnotExpr::sum(random_expr(rng, k, depth - 1), random_expr(rng, k, depth - 1)),
        2 => AnnotExpr::product(random_expr(rng, k, depth - 1), random_expr(rng, k, depth - 1)),
        _ => AnnotExpr::wrap(random_annotation(rng), random_expr(rng, k, depth - 1)),
    }
}

pub fn random_annotation(rng: &mut ChaCha8Rng) -> VersionAnnotation {
    let kind = *[AnnotKind::I, AnnotKind::U, AnnotKind::D, AnnotKind::C].choose(rng).unwrap();
    VersionAnnotation::new(kind, TxnId(rng.gen_range(0..3)), rng.gen_range(1..12), TupleId(rng.gen_range(1..5)))
}

/// A relation over `R0` whose summands all carry a version annotation.
pub fn random_relation(rng: &mut ChaCha8Rng, k: BaseSemiring) -> AnnotatedRelation {
    let schema = fuzz_schemas(1).remove(0);
    let mut r = AnnotatedRelation::empty(schema, k);
    for _ in 0..rng.gen_range(0..6) {
        let t = Tuple(vec![Value::Int(rng.gen_range(0..3)), Value::Int(rng.gen_range(0..3))]);
        let e = AnnotExpr::wrap(random_annotation(rng), random_expr(rng, k, 2));
        r.add(t, crate::mvsemiring::normalize(&e, k));
    }
    r
}
