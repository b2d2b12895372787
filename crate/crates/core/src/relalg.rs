//! Annotated relations and the extended relational algebra.
//!
//! Plans are trees (DAGs, when subplans are shared through `Arc`) of
//! [`QueryPlan`] nodes. [`eval_plan`] evaluates bottom-up and memoizes shared
//! subplans by pointer, so a reenactment chain that uses its input twice per
//! stage stays linear in the number of stages.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::mvsemiring::{
    do_commit, AnnotError, AnnotKind, BaseElem, BaseSemiring, NormalForm, Summand, TupleId, TxnId, VersionAnnotation,
    VersionId,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttrType {
    Int,
    Str,
    Bool,
}

impl AttrType {
    pub fn sql_name(self) -> &'static str {
        match self {
            AttrType::Int => "INT",
            AttrType::Str => "STRING",
            AttrType::Bool => "BOOL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Int(i64),
    Str(String),
    Bool(bool),
}

impl Value {
    pub fn ty(&self) -> AttrType {
        match self {
            Value::Int(_) => AttrType::Int,
            Value::Str(_) => AttrType::Str,
            Value::Bool(_) => AttrType::Bool,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Int(i) => json!(i),
            Value::Str(s) => json!(s),
            Value::Bool(b) => json!(b),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tuple(pub Vec<Value>);

impl fmt::Display for Tuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Schema {
    pub name: String,
    pub attrs: Vec<(String, AttrType)>,
}

impl Schema {
    pub fn new(name: &str, attrs: &[(&str, AttrType)]) -> Schema {
        Schema {
            name: name.to_string(),
            attrs: attrs.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn index_of(&self, attr: &str) -> Option<usize> {
        self.attrs.iter().position(|(n, _)| n == attr)
    }

    pub fn attr_names(&self) -> impl Iterator<Item = &str> {
        self.attrs.iter().map(|(n, _)| n.as_str())
    }

    /// Same arity and attribute types position by position.
    pub fn compatible(&self, other: &Schema) -> bool {
        self.attrs.len() == other.attrs.len() && self.attrs.iter().zip(&other.attrs).all(|(a, b)| a.1 == b.1)
    }

    pub fn check_tuple(&self, t: &Tuple) -> Result<(), RelError> {
        if t.0.len() != self.arity() {
            return Err(RelError::TypeMismatch(format!(
                "tuple {t} has arity {} but {} has arity {}",
                t.0.len(),
                self.name,
                self.arity()
            )));
        }
        for (v, (n, ty)) in t.0.iter().zip(&self.attrs) {
            if v.ty() != *ty {
                return Err(RelError::TypeMismatch(format!("value {v} for {}.{n} is not {}", self.name, ty.sql_name())));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, (n, t)) in self.attrs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{n} {}", t.sql_name())?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("join schema collision on attribute `{0}`")]
    SchemaCollision(String),
    #[error("unbound relation `{0}`")]
    UnboundRelation(String),
    #[error("integer overflow in `{0}`")]
    Overflow(String),
    #[error(transparent)]
    Annot(#[from] AnnotError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ScalarExpr {
    Attr(String),
    Const(Value),
    Arith(ArithOp, Box<ScalarExpr>, Box<ScalarExpr>),
}

impl ScalarExpr {
    pub fn attr(name: &str) -> ScalarExpr {
        ScalarExpr::Attr(name.to_string())
    }

    pub fn int(i: i64) -> ScalarExpr {
        ScalarExpr::Const(Value::Int(i))
    }

    pub fn str(s: &str) -> ScalarExpr {
        ScalarExpr::Const(Value::Str(s.to_string()))
    }

    pub fn arith(op: ArithOp, a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
        ScalarExpr::Arith(op, Box::new(a), Box::new(b))
    }

    pub fn type_of(&self, schema: &Schema) -> Result<AttrType, RelError> {
        match self {
            ScalarExpr::Attr(a) => schema
                .index_of(a)
                .map(|i| schema.attrs[i].1)
                .ok_or_else(|| RelError::UnknownColumn(a.clone())),
            ScalarExpr::Const(v) => Ok(v.ty()),
            ScalarExpr::Arith(op, a, b) => {
                let (ta, tb) = (a.type_of(schema)?, b.type_of(schema)?);
                if ta != AttrType::Int || tb != AttrType::Int {
                    return Err(RelError::TypeMismatch(format!("`{}` applied to non-integer operands", op.symbol())));
                }
                Ok(AttrType::Int)
            }
        }
    }

    pub fn eval(&self, schema: &Schema, t: &Tuple) -> Result<Value, RelError> {
        match self {
            ScalarExpr::Attr(a) => schema
                .index_of(a)
                .map(|i| t.0[i].clone())
                .ok_or_else(|| RelError::UnknownColumn(a.clone())),
            ScalarExpr::Const(v) => Ok(v.clone()),
            ScalarExpr::Arith(op, a, b) => match (a.eval(schema, t)?, b.eval(schema, t)?) {
                (Value::Int(x), Value::Int(y)) => {
                    let r = match op {
                        ArithOp::Add => x.checked_add(y),
                        ArithOp::Sub => x.checked_sub(y),
                        ArithOp::Mul => x.checked_mul(y),
                    };
                    r.map(Value::Int).ok_or_else(|| RelError::Overflow(self.to_string()))
                }
                _ => Err(RelError::TypeMismatch(format!("`{}` applied to non-integer operands", op.symbol()))),
            },
        }
    }

    fn prec(&self) -> u8 {
        match self {
            ScalarExpr::Arith(ArithOp::Mul, ..) => 2,
            ScalarExpr::Arith(..) => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarExpr::Attr(a) => f.write_str(a),
            ScalarExpr::Const(v) => write!(f, "{v}"),
            ScalarExpr::Arith(op, a, b) => {
                let p = self.prec();
                if a.prec() < p {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {} ", op.symbol())?;
                // Left-associative: a right operand of equal precedence needs parentheses.
                if b.prec() <= p {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn holds<T: Ord>(self, a: &T, b: &T) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }

    pub fn negate(self) -> CmpOp {
        match self {
            CmpOp::Eq => CmpOp::Ne,
            CmpOp::Ne => CmpOp::Eq,
            CmpOp::Lt => CmpOp::Ge,
            CmpOp::Le => CmpOp::Gt,
            CmpOp::Gt => CmpOp::Le,
            CmpOp::Ge => CmpOp::Lt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    True,
    False,
    Cmp(ScalarExpr, CmpOp, ScalarExpr),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
    Not(Box<Condition>),
}

impl Condition {
    pub fn cmp(a: ScalarExpr, op: CmpOp, b: ScalarExpr) -> Condition {
        Condition::Cmp(a, op, b)
    }

    pub fn and(a: Condition, b: Condition) -> Condition {
        Condition::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Condition, b: Condition) -> Condition {
        Condition::Or(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(a: Condition) -> Condition {
        Condition::Not(Box::new(a))
    }

    pub fn check(&self, schema: &Schema) -> Result<(), RelError> {
        match self {
            Condition::True | Condition::False => Ok(()),
            Condition::Cmp(a, op, b) => {
                let (ta, tb) = (a.type_of(schema)?, b.type_of(schema)?);
                if ta != tb {
                    return Err(RelError::TypeMismatch(format!(
                        "cannot compare {} with {} in `{a} {} {b}`",
                        ta.sql_name(),
                        tb.sql_name(),
                        op.symbol()
                    )));
                }
                Ok(())
            }
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.check(schema)?;
                b.check(schema)
            }
            Condition::Not(a) => a.check(schema),
        }
    }

    pub fn eval(&self, schema: &Schema, t: &Tuple) -> Result<bool, RelError> {
        Ok(match self {
            Condition::True => true,
            Condition::False => false,
            Condition::Cmp(a, op, b) => {
                let (x, y) = (a.eval(schema, t)?, b.eval(schema, t)?);
                if x.ty() != y.ty() {
                    return Err(RelError::TypeMismatch(format!("cannot compare {x} with {y}")));
                }
                op.holds(&x, &y)
            }
            Condition::And(a, b) => a.eval(schema, t)? && b.eval(schema, t)?,
            Condition::Or(a, b) => a.eval(schema, t)? || b.eval(schema, t)?,
            Condition::Not(a) => !a.eval(schema, t)?,
        })
    }

    fn prec(&self) -> u8 {
        match self {
            Condition::Or(..) => 1,
            Condition::And(..) => 2,
            Condition::Not(..) => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sub = |c: &Condition, min: u8, f: &mut fmt::Formatter<'_>| {
            if c.prec() < min {
                write!(f, "({c})")
            } else {
                write!(f, "{c}")
            }
        };
        match self {
            Condition::True => f.write_str("TRUE"),
            Condition::False => f.write_str("FALSE"),
            Condition::Cmp(a, op, b) => write!(f, "{a} {} {b}", op.symbol()),
            Condition::And(a, b) => {
                sub(a, 2, f)?;
                f.write_str(" AND ")?;
                sub(b, 3, f)
            }
            Condition::Or(a, b) => {
                sub(a, 1, f)?;
                f.write_str(" OR ")?;
                sub(b, 2, f)
            }
            Condition::Not(a) => {
                f.write_str("NOT ")?;
                sub(a, 3, f)
            }
        }
    }
}

/// Condition over the pseudo attribute `V`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum VCond {
    True,
    Cmp(CmpOp, VersionId),
    And(Box<VCond>, Box<VCond>),
    Or(Box<VCond>, Box<VCond>),
    Not(Box<VCond>),
}

impl VCond {
    pub fn cmp(op: CmpOp, v: VersionId) -> VCond {
        VCond::Cmp(op, v)
    }

    pub fn and(a: VCond, b: VCond) -> VCond {
        VCond::And(Box::new(a), Box::new(b))
    }

    pub fn holds(&self, v: VersionId) -> bool {
        match self {
            VCond::True => true,
            VCond::Cmp(op, c) => op.holds(&v, c),
            VCond::And(a, b) => a.holds(v) && b.holds(v),
            VCond::Or(a, b) => a.holds(v) || b.holds(v),
            VCond::Not(a) => !a.holds(v),
        }
    }
}

impl fmt::Display for VCond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VCond::True => f.write_str("TRUE"),
            VCond::Cmp(op, c) => write!(f, "V {} {c}", op.symbol()),
            VCond::And(a, b) => write!(f, "({a} AND {b})"),
            VCond::Or(a, b) => write!(f, "({a} OR {b})"),
            VCond::Not(a) => write!(f, "NOT ({a})"),
        }
    }
}

/// `K`-relation with normalized, nonzero annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedRelation {
    pub schema: Arc<Schema>,
    semiring: BaseSemiring,
    rows: BTreeMap<Tuple, NormalForm>,
}

/// Supplies tuple ids for the insert annotation operator.
pub trait IdSource {
    fn fresh(&mut self, txn: TxnId, time: VersionId, tuple: &Tuple) -> TupleId;
}

/// Hands out consecutive ids starting after `last`.
#[derive(Clone, Debug, Default)]
pub struct CounterIds {
    pub last: u64,
}

impl IdSource for CounterIds {
    fn fresh(&mut self, _txn: TxnId, _time: VersionId, _tuple: &Tuple) -> TupleId {
        self.last += 1;
        TupleId(self.last)
    }
}

impl AnnotatedRelation {
    pub fn empty(schema: Arc<Schema>, semiring: BaseSemiring) -> AnnotatedRelation {
        AnnotatedRelation {
            schema,
            semiring,
            rows: BTreeMap::new(),
        }
    }

    pub fn semiring(&self) -> BaseSemiring {
        self.semiring
    }

    pub fn rows(&self) -> &BTreeMap<Tuple, NormalForm> {
        &self.rows
    }

    pub fn get(&self, t: &Tuple) -> Option<&NormalForm> {
        self.rows.get(t)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds `k` to the annotation of `t`.
    pub fn add(&mut self, t: Tuple, k: NormalForm) {
        if k.is_zero() {
            return;
        }
        match self.rows.get_mut(&t) {
            Some(e) => *e = e.add(&k),
            None => {
                self.rows.insert(t, k);
            }
        }
    }

    pub fn add_summand(&mut self, t: Tuple, s: Summand) {
        let k = NormalForm::from_summands(self.semiring, [s]);
        self.add(t, k);
    }

    pub fn from_rows(
        schema: Arc<Schema>,
        semiring: BaseSemiring,
        rows: impl IntoIterator<Item = (Tuple, NormalForm)>,
    ) -> AnnotatedRelation {
        let mut r = AnnotatedRelation::empty(schema, semiring);
        for (t, k) in rows {
            r.add(t, k);
        }
        r
    }

    /// All `(tuple, summand)` pairs in canonical order.
    pub fn summands(&self) -> impl Iterator<Item = (&Tuple, &Summand)> {
        self.rows.iter().flat_map(|(t, k)| k.summands().iter().map(move |s| (t, s)))
    }

    pub fn num_summands(&self) -> usize {
        self.rows.values().map(|k| k.num_summands()).sum()
    }

    /// Keeps the summands accepted by `keep`.
    pub fn filter_summands(&self, mut keep: impl FnMut(&Tuple, &Summand) -> bool) -> AnnotatedRelation {
        let mut out = AnnotatedRelation::empty(self.schema.clone(), self.semiring);
        for (t, k) in &self.rows {
            let f = k.filter(|s| keep(t, s));
            out.add(t.clone(), f);
        }
        out
    }

    pub fn map_summands(&self, mut f: impl FnMut(&Tuple, &Summand) -> Summand) -> AnnotatedRelation {
        let mut out = AnnotatedRelation::empty(self.schema.clone(), self.semiring);
        for (t, k) in &self.rows {
            let nk = NormalForm::from_summands(self.semiring, k.summands().iter().map(|s| f(t, s)));
            out.add(t.clone(), nk);
        }
        out
    }

    /// Applies a lifted homomorphism annotation-wise.
    pub fn map_annotations(&self, h: &crate::mvsemiring::LiftedHom) -> AnnotatedRelation {
        let mut out = AnnotatedRelation::empty(self.schema.clone(), h.target);
        for (t, k) in &self.rows {
            out.add(t.clone(), h.apply(k));
        }
        out
    }

    pub fn with_schema(mut self, schema: Arc<Schema>) -> AnnotatedRelation {
        self.schema = schema;
        self
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("{}\n", self.schema);
        for (t, k) in &self.rows {
            s.push_str(&format!("{t} | {k}\n"));
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let attrs: Vec<_> = self
            .schema
            .attrs
            .iter()
            .map(|(n, t)| json!({"name": n, "type": t.sql_name()}))
            .collect();
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|(t, k)| {
                json!({
                    "tuple": t.0.iter().map(Value::to_json).collect::<Vec<_>>(),
                    "annotation": k.render(),
                    "summands": k.summands().iter().map(|s| s.render(self.semiring)).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "relation": self.schema.name,
            "semiring": self.semiring.name(),
            "schema": attrs,
            "rows": rows,
        })
    }
}

pub fn eval_select(cond: &Condition, r: &AnnotatedRelation) -> Result<AnnotatedRelation, RelError> {
    cond.check(&r.schema)?;
    let mut out = AnnotatedRelation::empty(r.schema.clone(), r.semiring);
    for (t, k) in &r.rows {
        if cond.eval(&r.schema, t)? {
            out.rows.insert(t.clone(), k.clone());
        }
    }
    Ok(out)
}

pub fn project_schema(exprs: &[(ScalarExpr, String)], input: &Schema) -> Result<Schema, RelError> {
    let mut attrs: Vec<(String, AttrType)> = Vec::with_capacity(exprs.len());
    for (e, name) in exprs {
        if attrs.iter().any(|(n, _)| n == name) {
            return Err(RelError::SchemaMismatch(format!("duplicate output attribute `{name}`")));
        }
        attrs.push((name.clone(), e.type_of(input)?));
    }
    Ok(Schema {
        name: input.name.clone(),
        attrs,
    })
}

pub fn eval_project(exprs: &[(ScalarExpr, String)], r: &AnnotatedRelation) -> Result<AnnotatedRelation, RelError> {
    let schema = Arc::new(project_schema(exprs, &r.schema)?);
    let mut out = AnnotatedRelation::empty(schema, r.semiring);
    for (t, k) in &r.rows {
        let vals = exprs
            .iter()
            .map(|(e, _)| e.eval(&r.schema, t))
            .collect::<Result<Vec<_>, _>>()?;
        out.add(Tuple(vals), k.clone());
    }
    Ok(out)
}

pub fn eval_join(r: &AnnotatedRelation, s: &AnnotatedRelation) -> Result<AnnotatedRelation, RelError> {
    for (n, _) in &s.schema.attrs {
        if r.schema.index_of(n).is_some() {
            return Err(RelError::SchemaCollision(n.clone()));
        }
    }
    let schema = Arc::new(Schema {
        name: format!("{}_{}", r.schema.name, s.schema.name),
        attrs: r.schema.attrs.iter().chain(&s.schema.attrs).cloned().collect(),
    });
    let mut out = AnnotatedRelation::empty(schema, r.semiring);
    for (t1, k1) in &r.rows {
        for (t2, k2) in &s.rows {
            let mut v = t1.0.clone();
            v.extend(t2.0.iter().cloned());
            out.add(Tuple(v), k1.mul(k2));
        }
    }
    Ok(out)
}

fn require_compatible(r: &AnnotatedRelation, s: &AnnotatedRelation, op: &str) -> Result<(), RelError> {
    if !r.schema.compatible(&s.schema) {
        return Err(RelError::SchemaMismatch(format!("{op} of {} and {}", r.schema, s.schema)));
    }
    Ok(())
}

pub fn eval_union(r: &AnnotatedRelation, s: &AnnotatedRelation) -> Result<AnnotatedRelation, RelError> {
    require_compatible(r, s, "union")?;
    let mut out = r.clone();
    for (t, k) in &s.rows {
        out.add(t.clone(), k.clone());
    }
    Ok(out)
}

pub fn eval_singleton(
    schema: Arc<Schema>,
    t: &Tuple,
    k: &BaseElem,
    semiring: BaseSemiring,
) -> Result<AnnotatedRelation, RelError> {
    schema.check_tuple(t)?;
    let mut out = AnnotatedRelation::empty(schema, semiring);
    out.add(t.clone(), NormalForm::from_base(semiring, k));
    Ok(out)
}

pub fn eval_annot_op(
    kind: AnnotKind,
    txn: TxnId,
    time: VersionId,
    r: &AnnotatedRelation,
    ids: &mut dyn IdSource,
) -> Result<AnnotatedRelation, RelError> {
    let mut out = AnnotatedRelation::empty(r.schema.clone(), r.semiring);
    for (t, k) in &r.rows {
        let nk = match kind {
            AnnotKind::I => {
                let id = ids.fresh(txn, time, t);
                k.wrap(VersionAnnotation::new(kind, txn, time, id))
            }
            AnnotKind::U | AnnotKind::D => {
                let mut v = Vec::with_capacity(k.num_summands());
                for s in k.summands() {
                    v.push(s.wrap(VersionAnnotation::new(kind, txn, time, s.id_of()?)));
                }
                NormalForm::from_summands(r.semiring, v)
            }
            AnnotKind::C => NormalForm::from_summands(
                r.semiring,
                k.summands().iter().map(|s| do_commit(txn, time - 1, s)),
            ),
        };
        out.add(t.clone(), nk);
    }
    Ok(out)
}

/// Highest version per tuple id among the summands of `r`.
pub fn max_versions(r: &AnnotatedRelation) -> Result<HashMap<TupleId, VersionId>, RelError> {
    let mut m = HashMap::new();
    for (_, s) in r.summands() {
        let (id, v) = (s.id_of()?, s.version_of()?);
        let e = m.entry(id).or_insert(v);
        if v > *e {
            *e = v;
        }
    }
    Ok(m)
}

pub fn is_max(r: &AnnotatedRelation, s: &Summand) -> Result<bool, RelError> {
    let (id, v) = (s.id_of()?, s.version_of()?);
    for (_, o) in r.summands() {
        if o.id_of()? == id && o.version_of()? > v {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn is_strict_max(r: &AnnotatedRelation, s: &Summand) -> Result<bool, RelError> {
    let (id, v) = (s.id_of()?, s.version_of()?);
    for (_, o) in r.summands() {
        if o.id_of()? == id && o.version_of()? >= v {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn eval_version_merge(r1: &AnnotatedRelation, r2: &AnnotatedRelation) -> Result<AnnotatedRelation, RelError> {
    require_compatible(r1, r2, "version merge")?;
    let max1 = max_versions(r1)?;
    let max2 = max_versions(r2)?;
    let mut out = AnnotatedRelation::empty(r1.schema.clone(), r1.semiring);
    for (t, k) in &r1.rows {
        let mut keep = Vec::new();
        for s in k.summands() {
            let v = s.version_of()?;
            if max2.get(&s.id_of()?).is_none_or(|m| *m <= v) {
                keep.push(s.clone());
            }
        }
        out.add(t.clone(), NormalForm::from_summands(r1.semiring, keep));
    }
    for (t, k) in &r2.rows {
        let mut keep = Vec::new();
        for s in k.summands() {
            let v = s.version_of()?;
            if max1.get(&s.id_of()?).is_none_or(|m| *m < v) {
                keep.push(s.clone());
            }
        }
        out.add(t.clone(), NormalForm::from_summands(r1.semiring, keep));
    }
    Ok(out)
}

pub fn eval_version_filter(cond: &VCond, r: &AnnotatedRelation) -> Result<AnnotatedRelation, RelError> {
    let mut out = AnnotatedRelation::empty(r.schema.clone(), r.semiring);
    for (t, k) in &r.rows {
        let mut keep = Vec::new();
        for s in k.summands() {
            if cond.holds(s.version_of()?) {
                keep.push(s.clone());
            }
        }
        out.add(t.clone(), NormalForm::from_summands(r.semiring, keep));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VersionRef {
    /// The version a statement sees when it runs; bound by the caller.
    Current,
    CommittedAt(VersionId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QueryPlan {
    BaseRel {
        name: String,
        version: VersionRef,
    },
    Empty {
        schema: Arc<Schema>,
    },
    Select {
        cond: Condition,
        input: Arc<QueryPlan>,
    },
    Project {
        exprs: Vec<(ScalarExpr, String)>,
        input: Arc<QueryPlan>,
    },
    Join {
        left: Arc<QueryPlan>,
        right: Arc<QueryPlan>,
    },
    Union {
        left: Arc<QueryPlan>,
        right: Arc<QueryPlan>,
    },
    Singleton {
        schema: Arc<Schema>,
        tuple: Tuple,
        annot: BaseElem,
    },
    AnnotOp {
        kind: AnnotKind,
        txn: TxnId,
        time: VersionId,
        input: Arc<QueryPlan>,
    },
    VersionMerge {
        left: Arc<QueryPlan>,
        right: Arc<QueryPlan>,
    },
    VersionFilter {
        cond: VCond,
        input: Arc<QueryPlan>,
    },
}

impl QueryPlan {
    pub fn base(name: &str, version: VersionRef) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::BaseRel {
            name: name.to_string(),
            version,
        })
    }

    pub fn select(cond: Condition, input: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::Select { cond, input })
    }

    pub fn project(exprs: Vec<(ScalarExpr, String)>, input: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::Project { exprs, input })
    }

    pub fn join(left: Arc<QueryPlan>, right: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::Join { left, right })
    }

    pub fn union(left: Arc<QueryPlan>, right: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::Union { left, right })
    }

    pub fn annot(kind: AnnotKind, txn: TxnId, time: VersionId, input: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::AnnotOp { kind, txn, time, input })
    }

    pub fn merge(left: Arc<QueryPlan>, right: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::VersionMerge { left, right })
    }

    pub fn vfilter(cond: VCond, input: Arc<QueryPlan>) -> Arc<QueryPlan> {
        Arc::new(QueryPlan::VersionFilter { cond, input })
    }

    pub fn children(&self) -> Vec<&Arc<QueryPlan>> {
        match self {
            QueryPlan::BaseRel { .. } | QueryPlan::Empty { .. } | QueryPlan::Singleton { .. } => vec![],
            QueryPlan::Select { input, .. }
            | QueryPlan::Project { input, .. }
            | QueryPlan::AnnotOp { input, .. }
            | QueryPlan::VersionFilter { input, .. } => vec![input],
            QueryPlan::Join { left, right }
            | QueryPlan::Union { left, right }
            | QueryPlan::VersionMerge { left, right } => vec![left, right],
        }
    }

    /// Visits every `BaseRel` leaf, counting shared subplans once per
    /// occurrence in the tree.
    pub fn for_each_leaf(&self, f: &mut dyn FnMut(&str, VersionRef)) {
        if let QueryPlan::BaseRel { name, version } = self {
            f(name, *version);
        }
        for c in self.children() {
            c.for_each_leaf(f);
        }
    }

    /// Number of distinct nodes in the plan DAG.
    pub fn dag_size(self: &Arc<Self>) -> usize {
        fn go(p: &Arc<QueryPlan>, seen: &mut std::collections::HashSet<usize>) {
            if seen.insert(Arc::as_ptr(p) as usize) {
                for c in p.children() {
                    go(c, seen);
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        go(self, &mut seen);
        seen.len()
    }

    fn label(&self) -> String {
        match self {
            QueryPlan::BaseRel { name, version } => match version {
                VersionRef::Current => format!("BaseRel {name}"),
                VersionRef::CommittedAt(v) => format!("CommittedAt {name}@{v}"),
            },
            QueryPlan::Empty { schema } => format!("Empty {schema}"),
            QueryPlan::Select { cond, .. } => format!("Select {cond}"),
            QueryPlan::Project { exprs, .. } => {
                let parts: Vec<String> = exprs
                    .iter()
                    .map(|(e, n)| match e {
                        ScalarExpr::Attr(a) if a == n => n.clone(),
                        _ => format!("{e} -> {n}"),
                    })
                    .collect();
                format!("Project {}", parts.join(", "))
            }
            QueryPlan::Join { .. } => "Join".into(),
            QueryPlan::Union { .. } => "Union".into(),
            QueryPlan::Singleton { schema, tuple, annot } => format!("Singleton {} {tuple} | {annot}", schema.name),
            QueryPlan::AnnotOp { kind, txn, time, .. } => format!("AnnotOp {} {txn} {time}", kind.letter()),
            QueryPlan::VersionMerge { .. } => "VersionMerge".into(),
            QueryPlan::VersionFilter { cond, .. } => format!("VersionFilter {cond}"),
        }
    }

    /// Indented tree rendering, one node per line.
    pub fn pretty(&self) -> String {
        fn go(p: &QueryPlan, depth: usize, out: &mut String) {
            out.push_str(&"  ".repeat(depth));
            out.push_str(&p.label());
            out.push('\n');
            for c in p.children() {
                go(c, depth + 1, out);
            }
        }
        let mut s = String::new();
        go(self, 0, &mut s);
        s
    }
}

/// Resolves `BaseRel` leaves.
pub trait Catalog {
    fn schema(&self, name: &str) -> Option<Arc<Schema>>;
    fn semiring(&self) -> BaseSemiring;
    fn resolve(&self, name: &str, version: VersionRef) -> Result<AnnotatedRelation, RelError>;
}

/// A catalog of fixed relations; `CommittedAt` and `Current` resolve alike.
#[derive(Clone, Debug)]
pub struct MapCatalog {
    pub semiring: BaseSemiring,
    pub relations: BTreeMap<String, AnnotatedRelation>,
}

impl MapCatalog {
    pub fn new(semiring: BaseSemiring) -> MapCatalog {
        MapCatalog {
            semiring,
            relations: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, r: AnnotatedRelation) {
        self.relations.insert(r.schema.name.clone(), r);
    }
}

impl Catalog for MapCatalog {
    fn schema(&self, name: &str) -> Option<Arc<Schema>> {
        self.relations.get(name).map(|r| r.schema.clone())
    }

    fn semiring(&self) -> BaseSemiring {
        self.semiring
    }

    fn resolve(&self, name: &str, _version: VersionRef) -> Result<AnnotatedRelation, RelError> {
        self.relations
            .get(name)
            .cloned()
            .ok_or_else(|| RelError::UnboundRelation(name.to_string()))
    }
}

pub fn eval_plan(
    plan: &Arc<QueryPlan>,
    catalog: &dyn Catalog,
    ids: &mut dyn IdSource,
) -> Result<AnnotatedRelation, RelError> {
    let mut memo = HashMap::new();
    eval_memo(plan, catalog, ids, &mut memo)
}

fn eval_memo(
    plan: &Arc<QueryPlan>,
    catalog: &dyn Catalog,
    ids: &mut dyn IdSource,
    memo: &mut HashMap<usize, AnnotatedRelation>,
) -> Result<AnnotatedRelation, RelError> {
    let key = Arc::as_ptr(plan) as usize;
    if let Some(r) = memo.get(&key) {
        return Ok(r.clone());
    }
    let k = catalog.semiring();
    let mut sub = |p: &Arc<QueryPlan>, ids: &mut dyn IdSource| eval_memo(p, catalog, ids, memo);
    let r = match plan.as_ref() {
        QueryPlan::BaseRel { name, version } => catalog.resolve(name, *version)?,
        QueryPlan::Empty { schema } => AnnotatedRelation::empty(schema.clone(), k),
        QueryPlan::Select { cond, input } => eval_select(cond, &sub(input, ids)?)?,
        QueryPlan::Project { exprs, input } => eval_project(exprs, &sub(input, ids)?)?,
        QueryPlan::Join { left, right } => {
            let l = sub(left, ids)?;
            eval_join(&l, &sub(right, ids)?)?
        }
        QueryPlan::Union { left, right } => {
            let l = sub(left, ids)?;
            eval_union(&l, &sub(right, ids)?)?
        }
        QueryPlan::Singleton { schema, tuple, annot } => eval_singleton(schema.clone(), tuple, annot, k)?,
        QueryPlan::AnnotOp { kind, txn, time, input } => {
            let i = sub(input, ids)?;
            eval_annot_op(*kind, *txn, *time, &i, ids)?
        }
        QueryPlan::VersionMerge { left, right } => {
            let l = sub(left, ids)?;
            eval_version_merge(&l, &sub(right, ids)?)?
        }
        QueryPlan::VersionFilter { cond, input } => eval_version_filter(cond, &sub(input, ids)?)?,
    };
    memo.insert(key, r.clone());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvsemiring::{normalize, parse_annotation, AnnotExpr};

    fn bonus_schema() -> Arc<Schema> {
        Arc::new(Schema::new(
            "Bonus",
            &[("ID", AttrType::Int), ("EmpID", AttrType::Int), ("Amount", AttrType::Int)],
        ))
    }

    fn nf(text: &str) -> NormalForm {
        normalize(&parse_annotation(text).unwrap(), BaseSemiring::ProvPoly)
    }

    fn row(a: i64, b: i64, c: i64) -> Tuple {
        Tuple(vec![Value::Int(a), Value::Int(b), Value::Int(c)])
    }

    fn bonus19() -> AnnotatedRelation {
        AnnotatedRelation::from_rows(
            bonus_schema(),
            BaseSemiring::ProvPoly,
            [
                (row(1, 101, 1000), nf("C[T1,10,4](I[T1,8,4](x4))")),
                (row(2, 102, 2000), nf("C[T2,14,5](I[T2,12,5](x5))")),
                (row(3, 103, 500), nf("C[T4,18,6](I[T4,16,6](x6))")),
            ],
        )
    }

    fn bonus26() -> AnnotatedRelation {
        AnnotatedRelation::from_rows(
            bonus_schema(),
            BaseSemiring::ProvPoly,
            [
                (row(1, 101, 2000), nf("C[T7,26,4](U[T7,22,4](C[T1,10,4](I[T1,8,4](x4))))")),
                (row(2, 102, 2000), nf("C[T2,14,5](I[T2,12,5](x5))")),
                (row(3, 103, 500), nf("C[T4,18,6](I[T4,16,6](x6))")),
                (row(4, 101, 500), nf("C[T8,24,7](I[T8,23,7](C[T0,6,1](I[T0,2,1](x1))))")),
            ],
        )
    }

    fn eq_cond(a: &str, v: i64) -> Condition {
        Condition::cmp(ScalarExpr::attr(a), CmpOp::Eq, ScalarExpr::int(v))
    }

    #[test]
    fn select_keeps_matching_annotations() {
        let r = bonus19();
        let s = eval_select(&eq_cond("EmpID", 101), &r).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(&row(1, 101, 1000)), r.get(&row(1, 101, 1000)));
        assert_eq!(eval_select(&Condition::True, &r).unwrap(), r);
        assert!(eval_select(&Condition::False, &r).unwrap().is_empty());
        let bad = Condition::cmp(ScalarExpr::attr("ID"), CmpOp::Eq, ScalarExpr::str("x"));
        assert!(matches!(eval_select(&bad, &r), Err(RelError::TypeMismatch(_))));
    }

    #[test]
    fn project_sums_collisions() {
        let r = bonus19();
        let p = eval_project(&[(ScalarExpr::int(0), "Z".into())], &r).unwrap();
        assert_eq!(p.len(), 1);
        let expected = r.rows().values().fold(NormalForm::zero(BaseSemiring::ProvPoly), |a, k| a.add(k));
        assert_eq!(p.get(&Tuple(vec![Value::Int(0)])).unwrap(), &expected);
        let ident: Vec<_> = r.schema.attr_names().map(|n| (ScalarExpr::attr(n), n.to_string())).collect();
        assert_eq!(eval_project(&ident, &r).unwrap(), r);
    }

    #[test]
    fn join_multiplies() {
        let s1 = Arc::new(Schema::new("R", &[("A", AttrType::Int)]));
        let s2 = Arc::new(Schema::new("S", &[("B", AttrType::Int)]));
        let k = BaseSemiring::ProvPoly;
        let r = AnnotatedRelation::from_rows(
            s1.clone(),
            k,
            [(Tuple(vec![Value::Int(1)]), nf("x1")), (Tuple(vec![Value::Int(2)]), nf("x3"))],
        );
        let s = AnnotatedRelation::from_rows(
            s2.clone(),
            k,
            [(Tuple(vec![Value::Int(5)]), nf("x2")), (Tuple(vec![Value::Int(6)]), nf("x4"))],
        );
        let j = eval_join(&r, &s).unwrap();
        assert_eq!(j.len(), 4);
        assert_eq!(j.get(&Tuple(vec![Value::Int(1), Value::Int(5)])).unwrap().render(), "x1 * x2");
        assert!(eval_join(&r, &AnnotatedRelation::empty(s2, k)).unwrap().is_empty());
        assert!(matches!(eval_join(&r, &r), Err(RelError::SchemaCollision(_))));
    }

    #[test]
    fn union_adds_and_singleton() {
        let s = Arc::new(Schema::new("R", &[("A", AttrType::Int)]));
        let k = BaseSemiring::ProvPoly;
        let t = Tuple(vec![Value::Int(1)]);
        let a = eval_singleton(s.clone(), &t, &BaseElem::var("x1"), k).unwrap();
        let b = eval_singleton(s.clone(), &t, &BaseElem::var("x2"), k).unwrap();
        assert_eq!(eval_union(&a, &b).unwrap().get(&t).unwrap().render(), "x1 + x2");
        assert_eq!(eval_union(&a, &AnnotatedRelation::empty(s, k)).unwrap(), a);
        let one = eval_singleton(bonus_schema(), &row(4, 101, 500), &BaseElem::Nat(1), BaseSemiring::Nat).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn annotation_operator() {
        let r = AnnotatedRelation::from_rows(
            bonus_schema(),
            BaseSemiring::ProvPoly,
            [(row(1, 101, 1000), nf("C[T1,10,4](I[T1,8,4](x4))"))],
        );
        let mut ids = CounterIds::default();
        let u = eval_annot_op(AnnotKind::U, TxnId(7), 22, &r, &mut ids).unwrap();
        assert_eq!(u.get(&row(1, 101, 1000)).unwrap().render(), "U[T7,22,4](C[T1,10,4](I[T1,8,4](x4)))");
        let c = eval_annot_op(AnnotKind::C, TxnId(7), 26, &u, &mut ids).unwrap();
        assert_eq!(
            c.get(&row(1, 101, 1000)).unwrap().render(),
            "C[T7,26,4](U[T7,22,4](C[T1,10,4](I[T1,8,4](x4))))"
        );
        let e = AnnotatedRelation::empty(bonus_schema(), BaseSemiring::ProvPoly);
        assert!(eval_annot_op(AnnotKind::I, TxnId(1), 2, &e, &mut ids).unwrap().is_empty());
        assert_eq!(ids.last, 0);
    }

    #[test]
    fn max_predicates() {
        let b26 = bonus26();
        let b1p = b26.get(&row(1, 101, 2000)).unwrap().summands()[0].clone();
        assert!(is_max(&bonus19(), &b1p).unwrap());
        let b2 = b26.get(&row(2, 102, 2000)).unwrap().summands()[0].clone();
        assert!(!is_strict_max(&b26, &b2).unwrap());
        assert!(is_max(&b26, &b2).unwrap());
    }

    #[test]
    fn version_merge_prefers_newer() {
        let m = eval_version_merge(&bonus26(), &bonus19()).unwrap();
        assert!(m.get(&row(1, 101, 1000)).is_none());
        assert_eq!(m.get(&row(1, 101, 2000)), bonus26().get(&row(1, 101, 2000)));
        assert_eq!(m.get(&row(2, 102, 2000)).unwrap().num_summands(), 1);
        assert_eq!(m, bonus26());
        let r = bonus26();
        assert_eq!(eval_version_merge(&r, &r).unwrap(), r);
    }

    #[test]
    fn version_filter() {
        let r = bonus26();
        assert_eq!(eval_version_filter(&VCond::True, &r).unwrap(), r);
        let f = eval_version_filter(&VCond::cmp(CmpOp::Lt, 11), &bonus19()).unwrap();
        assert_eq!(f.len(), 1);
        let f = eval_version_filter(&VCond::cmp(CmpOp::Le, 21), &r).unwrap();
        let kept: Vec<_> = f.rows().keys().cloned().collect();
        assert_eq!(kept, vec![row(2, 102, 2000), row(3, 103, 500)]);
    }

    #[test]
    fn plan_evaluation_shares_subplans() {
        let mut cat = MapCatalog::new(BaseSemiring::ProvPoly);
        cat.insert(bonus19());
        let input = QueryPlan::base("Bonus", VersionRef::Current);
        let theta = eq_cond("EmpID", 101);
        let exprs = vec![
            (ScalarExpr::attr("ID"), "ID".to_string()),
            (ScalarExpr::attr("EmpID"), "EmpID".to_string()),
            (
                ScalarExpr::arith(ArithOp::Add, ScalarExpr::attr("Amount"), ScalarExpr::int(1000)),
                "Amount".to_string(),
            ),
        ];
        let plan = QueryPlan::union(
            QueryPlan::annot(
                AnnotKind::U,
                TxnId(7),
                22,
                QueryPlan::project(exprs, QueryPlan::select(theta.clone(), input.clone())),
            ),
            QueryPlan::select(Condition::not(theta), input),
        );
        assert_eq!(plan.dag_size(), 6);
        let r = eval_plan(&plan, &cat, &mut CounterIds::default()).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(
            r.get(&row(1, 101, 2000)).unwrap().render(),
            "U[T7,22,4](C[T1,10,4](I[T1,8,4](x4)))"
        );
        let missing = QueryPlan::base("Nope", VersionRef::Current);
        assert!(matches!(
            eval_plan(&missing, &cat, &mut CounterIds::default()),
            Err(RelError::UnboundRelation(_))
        ));
    }

    #[test]
    fn condition_display_round_trips_precedence() {
        let c = Condition::and(
            Condition::or(eq_cond("A", 1), eq_cond("B", 2)),
            Condition::not(eq_cond("C", 3)),
        );
        assert_eq!(c.to_string(), "(A = 1 OR B = 2) AND NOT C = 3");
        let e = ScalarExpr::arith(
            ArithOp::Sub,
            ScalarExpr::attr("A"),
            ScalarExpr::arith(ArithOp::Sub, ScalarExpr::int(1), ScalarExpr::int(2)),
        );
        assert_eq!(e.to_string(), "A - (1 - 2)");
        let _ = AnnotExpr::nat(1);
    }
}
