//! The MV-semiring: base semirings, version-annotated expressions and their
//! normal form.
//!
//! An [`AnnotExpr`] is a finite symbolic term built from base elements, `+`,
//! `×` and version annotations `X^{T,ν}_{id}(·)`. Terms are compared through
//! [`NormalForm`], which is reached by full expansion:
//!
//! * products distribute over sums,
//! * an annotation distributes over a sum inside it, and `A(0) = 0`,
//! * natural-number scalars commute through annotations (`A(n·k) = n·A(k)`,
//!   since `n` is a sum of ones),
//! * summands with the same shape are merged by adding their coefficients.
//!
//! A summand is therefore a positive coefficient times a *shape*: a monomial
//! over the variables (only for `N[X]`) and a sorted multiset of wrapped
//! factors, each of which is an annotation around another shape. Two terms are
//! congruent iff their normal forms are identical.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Logical time of an operation or of a version annotation.
pub type VersionId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnId(pub u32);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TupleId(pub u64);

impl fmt::Display for TupleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnnotKind {
    I,
    U,
    D,
    C,
}

impl AnnotKind {
    pub fn letter(self) -> char {
        match self {
            AnnotKind::I => 'I',
            AnnotKind::U => 'U',
            AnnotKind::D => 'D',
            AnnotKind::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<AnnotKind> {
        match c {
            'I' => Some(AnnotKind::I),
            'U' => Some(AnnotKind::U),
            'D' => Some(AnnotKind::D),
            'C' => Some(AnnotKind::C),
            _ => None,
        }
    }
}

/// `X^{T,ν}_{id}`. Ordered by `(time, txn, kind, tid)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VersionAnnotation {
    pub kind: AnnotKind,
    pub txn: TxnId,
    pub time: VersionId,
    pub tid: TupleId,
}

impl VersionAnnotation {
    pub fn new(kind: AnnotKind, txn: TxnId, time: VersionId, tid: TupleId) -> Self {
        VersionAnnotation { kind, txn, time, tid }
    }

    fn key(&self) -> (VersionId, TxnId, AnnotKind, TupleId) {
        (self.time, self.txn, self.kind, self.tid)
    }
}

impl PartialOrd for VersionAnnotation {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VersionAnnotation {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for VersionAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{},{}]", self.kind.letter(), self.txn, self.time, self.tid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaseSemiring {
    Nat,
    Bool,
    ProvPoly,
}

impl BaseSemiring {
    pub fn name(self) -> &'static str {
        match self {
            BaseSemiring::Nat => "NAT",
            BaseSemiring::Bool => "BOOL",
            BaseSemiring::ProvPoly => "PROV_POLY",
        }
    }

    pub fn zero(self) -> BaseElem {
        match self {
            BaseSemiring::Nat => BaseElem::Nat(0),
            BaseSemiring::Bool => BaseElem::Bool(false),
            BaseSemiring::ProvPoly => BaseElem::Poly(Poly::zero()),
        }
    }

    pub fn one(self) -> BaseElem {
        match self {
            BaseSemiring::Nat => BaseElem::Nat(1),
            BaseSemiring::Bool => BaseElem::Bool(true),
            BaseSemiring::ProvPoly => BaseElem::Poly(Poly::constant(1)),
        }
    }

    /// Reads `e` as an element of this semiring. Naturals embed into `N[X]`
    /// as constants and into `B` as `n > 0`; booleans embed as 0/1.
    pub fn coerce(self, e: &BaseElem) -> BaseElem {
        match (self, e) {
            (BaseSemiring::Nat, BaseElem::Nat(_))
            | (BaseSemiring::Bool, BaseElem::Bool(_))
            | (BaseSemiring::ProvPoly, BaseElem::Poly(_)) => e.clone(),
            (BaseSemiring::Nat, BaseElem::Bool(b)) => BaseElem::Nat(*b as u64),
            (BaseSemiring::ProvPoly, BaseElem::Nat(n)) => BaseElem::Poly(Poly::constant(*n)),
            (BaseSemiring::ProvPoly, BaseElem::Bool(b)) => BaseElem::Poly(Poly::constant(*b as u64)),
            (BaseSemiring::Bool, BaseElem::Nat(n)) => BaseElem::Bool(*n > 0),
            (_, BaseElem::Poly(p)) => {
                assert!(
                    p.is_constant(),
                    "polynomial {p} is not an element of {}",
                    self.name()
                );
                let c = p.constant_term();
                match self {
                    BaseSemiring::Nat => BaseElem::Nat(c),
                    _ => BaseElem::Bool(c > 0),
                }
            }
        }
    }

    pub fn add(self, a: &BaseElem, b: &BaseElem) -> BaseElem {
        match (self.coerce(a), self.coerce(b)) {
            (BaseElem::Nat(x), BaseElem::Nat(y)) => BaseElem::Nat(x.saturating_add(y)),
            (BaseElem::Bool(x), BaseElem::Bool(y)) => BaseElem::Bool(x || y),
            (BaseElem::Poly(x), BaseElem::Poly(y)) => BaseElem::Poly(x.add(&y)),
            _ => unreachable!(),
        }
    }

    pub fn mul(self, a: &BaseElem, b: &BaseElem) -> BaseElem {
        match (self.coerce(a), self.coerce(b)) {
            (BaseElem::Nat(x), BaseElem::Nat(y)) => BaseElem::Nat(x.saturating_mul(y)),
            (BaseElem::Bool(x), BaseElem::Bool(y)) => BaseElem::Bool(x && y),
            (BaseElem::Poly(x), BaseElem::Poly(y)) => BaseElem::Poly(x.mul(&y)),
            _ => unreachable!(),
        }
    }

    pub fn eq(self, a: &BaseElem, b: &BaseElem) -> bool {
        self.coerce(a) == self.coerce(b)
    }

    fn add_coeff(self, a: u64, b: u64) -> u64 {
        match self {
            BaseSemiring::Bool => 1,
            _ => a.saturating_add(b),
        }
    }

    fn mul_coeff(self, a: u64, b: u64) -> u64 {
        match self {
            BaseSemiring::Bool => 1,
            _ => a.saturating_mul(b),
        }
    }
}

/// Provenance variable.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub Arc<str>);

impl Var {
    pub fn new(name: &str) -> Var {
        Var(Arc::from(name))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Product of variables with exponents, sorted by variable.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial(Vec<(Var, u32)>);

impl Monomial {
    pub fn unit() -> Monomial {
        Monomial(Vec::new())
    }

    pub fn var(v: Var) -> Monomial {
        Monomial(vec![(v, 1)])
    }

    pub fn is_unit(&self) -> bool {
        self.0.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = &(Var, u32)> {
        self.0.iter()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut m: BTreeMap<Var, u32> = BTreeMap::new();
        for (v, e) in self.0.iter().chain(other.0.iter()) {
            *m.entry(v.clone()).or_insert(0) += e;
        }
        Monomial(m.into_iter().collect())
    }

    fn render(&self) -> String {
        let mut parts = Vec::new();
        for (v, e) in &self.0 {
            for _ in 0..*e {
                parts.push(v.to_string());
            }
        }
        parts.join(" * ")
    }
}

/// Polynomial with natural coefficients; zero has no terms.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Poly(BTreeMap<Monomial, u64>);

impl Poly {
    pub fn zero() -> Poly {
        Poly(BTreeMap::new())
    }

    pub fn constant(c: u64) -> Poly {
        let mut m = BTreeMap::new();
        if c > 0 {
            m.insert(Monomial::unit(), c);
        }
        Poly(m)
    }

    pub fn var(name: &str) -> Poly {
        let mut m = BTreeMap::new();
        m.insert(Monomial::var(Var::new(name)), 1);
        Poly(m)
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, u64)>) -> Poly {
        let mut p = Poly::zero();
        for (m, c) in terms {
            if c > 0 {
                let e = p.0.entry(m).or_insert(0);
                *e = e.saturating_add(c);
            }
        }
        p
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &u64)> {
        self.0.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.0.keys().all(|m| m.is_unit())
    }

    pub fn constant_term(&self) -> u64 {
        self.0.get(&Monomial::unit()).copied().unwrap_or(0)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        Poly::from_terms(self.0.iter().chain(other.0.iter()).map(|(m, c)| (m.clone(), *c)))
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut terms = Vec::new();
        for (m1, c1) in &self.0 {
            for (m2, c2) in &other.0 {
                terms.push((m1.mul(m2), c1.saturating_mul(*c2)));
            }
        }
        Poly::from_terms(terms)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("0");
        }
        let parts: Vec<String> = self.0.iter().map(|(m, c)| render_scaled(*c, m)).collect();
        f.write_str(&parts.join(" + "))
    }
}

fn render_scaled(c: u64, m: &Monomial) -> String {
    if m.is_unit() {
        c.to_string()
    } else if c == 1 {
        m.render()
    } else {
        format!("{} * {}", c, m.render())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BaseElem {
    Nat(u64),
    Bool(bool),
    Poly(Poly),
}

impl BaseElem {
    pub fn var(name: &str) -> BaseElem {
        BaseElem::Poly(Poly::var(name))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            BaseElem::Nat(n) => *n == 0,
            BaseElem::Bool(b) => !*b,
            BaseElem::Poly(p) => p.is_zero(),
        }
    }

    /// The single variable this element consists of, if it is exactly `x`.
    pub fn as_var(&self) -> Option<&Var> {
        match self {
            BaseElem::Poly(p) if p.0.len() == 1 => {
                let (m, c) = p.0.iter().next().unwrap();
                if *c == 1 && m.0.len() == 1 && m.0[0].1 == 1 {
                    Some(&m.0[0].0)
                } else {
                    None
                }
            }
            _ => None,
        }
    }
}

impl fmt::Display for BaseElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseElem::Nat(n) => write!(f, "{n}"),
            BaseElem::Bool(b) => write!(f, "{b}"),
            BaseElem::Poly(p) => write!(f, "{p}"),
        }
    }
}

/// Symbolic MV-semiring expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AnnotExpr {
    Base(BaseElem),
    Sum(Box<AnnotExpr>, Box<AnnotExpr>),
    Product(Box<AnnotExpr>, Box<AnnotExpr>),
    Wrapped(VersionAnnotation, Box<AnnotExpr>),
}

impl AnnotExpr {
    pub fn base(b: BaseElem) -> AnnotExpr {
        AnnotExpr::Base(b)
    }

    pub fn var(name: &str) -> AnnotExpr {
        AnnotExpr::Base(BaseElem::var(name))
    }

    pub fn nat(n: u64) -> AnnotExpr {
        AnnotExpr::Base(BaseElem::Nat(n))
    }

    pub fn sum(a: AnnotExpr, b: AnnotExpr) -> AnnotExpr {
        AnnotExpr::Sum(Box::new(a), Box::new(b))
    }

    pub fn product(a: AnnotExpr, b: AnnotExpr) -> AnnotExpr {
        AnnotExpr::Product(Box::new(a), Box::new(b))
    }

    pub fn wrap(ann: VersionAnnotation, e: AnnotExpr) -> AnnotExpr {
        AnnotExpr::Wrapped(ann, Box::new(e))
    }

    /// Replaces every base leaf by `f(leaf)`; annotation structure is kept.
    pub fn map_leaves(&self, f: &dyn Fn(&BaseElem) -> BaseElem) -> AnnotExpr {
        match self {
            AnnotExpr::Base(b) => AnnotExpr::Base(f(b)),
            AnnotExpr::Sum(a, b) => AnnotExpr::sum(a.map_leaves(f), b.map_leaves(f)),
            AnnotExpr::Product(a, b) => AnnotExpr::product(a.map_leaves(f), b.map_leaves(f)),
            AnnotExpr::Wrapped(ann, e) => AnnotExpr::wrap(*ann, e.map_leaves(f)),
        }
    }
}

impl fmt::Display for AnnotExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(e: &AnnotExpr, prec: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match e {
                AnnotExpr::Base(b) => {
                    let s = b.to_string();
                    if prec > 0 && (s.contains(" + ") || (prec > 1 && s.contains(" * "))) {
                        write!(f, "({s})")
                    } else {
                        f.write_str(&s)
                    }
                }
                AnnotExpr::Sum(a, b) => {
                    if prec > 0 {
                        f.write_str("(")?;
                    }
                    go(a, 0, f)?;
                    f.write_str(" + ")?;
                    go(b, 0, f)?;
                    if prec > 0 {
                        f.write_str(")")?;
                    }
                    Ok(())
                }
                AnnotExpr::Product(a, b) => {
                    go(a, 1, f)?;
                    f.write_str(" * ")?;
                    go(b, 1, f)
                }
                AnnotExpr::Wrapped(ann, e) => {
                    write!(f, "{ann}(")?;
                    go(e, 0, f)?;
                    f.write_str(")")
                }
            }
        }
        go(self, 0, f)
    }
}

/// An annotation layer around a shape.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Factor {
    pub ann: VersionAnnotation,
    pub inner: Arc<Shape>,
}

/// Coefficient-free part of a summand. Field order fixes the canonical order:
/// wrapped factors (by outermost annotation key, then recursively), then the
/// monomial.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Shape {
    pub factors: Vec<Factor>,
    pub mono: Monomial,
}

impl Shape {
    pub fn unit() -> Shape {
        Shape::default()
    }

    fn mul(&self, other: &Shape) -> Shape {
        let mut factors: Vec<Factor> = self.factors.iter().chain(other.factors.iter()).cloned().collect();
        factors.sort();
        Shape {
            factors,
            mono: self.mono.mul(&other.mono),
        }
    }

    /// The annotation wrapping this shape, when it is a single annotated chain.
    pub fn outermost(&self) -> Option<&VersionAnnotation> {
        if self.factors.len() == 1 && self.mono.is_unit() {
            Some(&self.factors[0].ann)
        } else {
            None
        }
    }

    /// True if any annotation layer anywhere in the shape satisfies `p`.
    pub fn any_layer(&self, p: &dyn Fn(&VersionAnnotation) -> bool) -> bool {
        self.factors.iter().any(|f| p(&f.ann) || f.inner.any_layer(p))
    }

    /// All variables in the innermost monomials, in canonical order.
    pub fn leaf_vars(&self, out: &mut Vec<Var>) {
        for (v, e) in self.mono.vars() {
            for _ in 0..*e {
                out.push(v.clone());
            }
        }
        for f in &self.factors {
            f.inner.leaf_vars(out);
        }
    }

    pub fn wrap(self, ann: VersionAnnotation) -> Shape {
        Shape {
            factors: vec![Factor {
                ann,
                inner: Arc::new(self),
            }],
            mono: Monomial::unit(),
        }
    }

    fn to_expr(&self, semiring: BaseSemiring) -> AnnotExpr {
        let mut e = match semiring {
            BaseSemiring::ProvPoly => AnnotExpr::Base(BaseElem::Poly(Poly::from_terms([(self.mono.clone(), 1)]))),
            other => AnnotExpr::Base(other.one()),
        };
        for f in &self.factors {
            e = AnnotExpr::product(e, AnnotExpr::wrap(f.ann, f.inner.to_expr(semiring)));
        }
        e
    }

    fn render(&self, coeff: u64, semiring: BaseSemiring, out: &mut String) {
        if self.factors.is_empty() {
            out.push_str(&render_leaf(coeff, &self.mono, semiring));
            return;
        }
        let mut first = true;
        if !self.mono.is_unit() {
            out.push_str(&self.mono.render());
            first = false;
        }
        for (i, f) in self.factors.iter().enumerate() {
            if !first {
                out.push_str(" * ");
            }
            first = false;
            out.push_str(&f.ann.to_string());
            out.push('(');
            f.inner.render(if i == 0 { coeff } else { 1 }, semiring, out);
            out.push(')');
        }
    }
}

fn render_leaf(coeff: u64, mono: &Monomial, semiring: BaseSemiring) -> String {
    match semiring {
        BaseSemiring::Bool => "true".to_string(),
        BaseSemiring::Nat => coeff.to_string(),
        BaseSemiring::ProvPoly => render_scaled(coeff, mono),
    }
}

/// One addition-free term: `coeff · shape`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Summand {
    pub shape: Shape,
    pub coeff: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotError {
    #[error("summand `{0}` has no single outermost version annotation")]
    NotAdmissible(String),
    #[error("summand index {index} out of range ({len} summands)")]
    IndexOutOfRange { index: usize, len: usize },
}

impl Summand {
    pub fn outermost(&self) -> Option<&VersionAnnotation> {
        self.shape.outermost()
    }

    fn admissible(&self) -> Result<&VersionAnnotation, AnnotError> {
        self.outermost()
            .ok_or_else(|| AnnotError::NotAdmissible(self.render(BaseSemiring::ProvPoly)))
    }

    pub fn id_of(&self) -> Result<TupleId, AnnotError> {
        Ok(self.admissible()?.tid)
    }

    pub fn version_of(&self) -> Result<VersionId, AnnotError> {
        Ok(self.admissible()?.time)
    }

    /// Wraps this summand in `ann`; scalars move outside the annotation.
    pub fn wrap(&self, ann: VersionAnnotation) -> Summand {
        Summand {
            shape: self.shape.clone().wrap(ann),
            coeff: self.coeff,
        }
    }

    /// The summand's scalar part as a base element.
    pub fn base(&self, semiring: BaseSemiring) -> BaseElem {
        match semiring {
            BaseSemiring::Nat => BaseElem::Nat(self.coeff),
            BaseSemiring::Bool => BaseElem::Bool(true),
            BaseSemiring::ProvPoly => BaseElem::Poly(Poly::from_terms([(self.shape.mono.clone(), self.coeff)])),
        }
    }

    pub fn render(&self, semiring: BaseSemiring) -> String {
        let mut s = String::new();
        self.shape.render(self.coeff, semiring, &mut s);
        s
    }

    pub fn to_expr(&self, semiring: BaseSemiring) -> AnnotExpr {
        let scalar = match semiring {
            BaseSemiring::Nat => AnnotExpr::nat(self.coeff),
            BaseSemiring::Bool => AnnotExpr::Base(BaseElem::Bool(true)),
            BaseSemiring::ProvPoly => AnnotExpr::Base(BaseElem::Poly(Poly::constant(self.coeff))),
        };
        AnnotExpr::product(scalar, self.shape.to_expr(semiring))
    }
}

/// Canonical representative of a congruence class: summands sorted by shape,
/// shapes pairwise distinct, coefficients nonzero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NormalForm {
    semiring: BaseSemiring,
    summands: Vec<Summand>,
}

impl NormalForm {
    pub fn zero(semiring: BaseSemiring) -> NormalForm {
        NormalForm {
            semiring,
            summands: Vec::new(),
        }
    }

    pub fn one(semiring: BaseSemiring) -> NormalForm {
        NormalForm::from_summands(
            semiring,
            vec![Summand {
                shape: Shape::unit(),
                coeff: 1,
            }],
        )
    }

    /// Builds a normal form from arbitrary summands, merging equal shapes.
    pub fn from_summands(semiring: BaseSemiring, summands: impl IntoIterator<Item = Summand>) -> NormalForm {
        let mut m: BTreeMap<Shape, u64> = BTreeMap::new();
        for s in summands {
            if s.coeff == 0 {
                continue;
            }
            let c = if semiring == BaseSemiring::Bool { 1 } else { s.coeff };
            match m.get_mut(&s.shape) {
                Some(e) => *e = semiring.add_coeff(*e, c),
                None => {
                    m.insert(s.shape, c);
                }
            }
        }
        NormalForm {
            semiring,
            summands: m.into_iter().map(|(shape, coeff)| Summand { shape, coeff }).collect(),
        }
    }

    pub fn from_base(semiring: BaseSemiring, b: &BaseElem) -> NormalForm {
        let summands: Vec<Summand> = match semiring.coerce(b) {
            BaseElem::Nat(n) => vec![Summand {
                shape: Shape::unit(),
                coeff: n,
            }],
            BaseElem::Bool(x) => vec![Summand {
                shape: Shape::unit(),
                coeff: x as u64,
            }],
            BaseElem::Poly(p) => p
                .0
                .into_iter()
                .map(|(mono, coeff)| Summand {
                    shape: Shape {
                        factors: Vec::new(),
                        mono,
                    },
                    coeff,
                })
                .collect(),
        };
        NormalForm::from_summands(semiring, summands)
    }

    pub fn semiring(&self) -> BaseSemiring {
        self.semiring
    }

    pub fn is_zero(&self) -> bool {
        self.summands.is_empty()
    }

    pub fn summands(&self) -> &[Summand] {
        &self.summands
    }

    pub fn into_summands(self) -> Vec<Summand> {
        self.summands
    }

    pub fn num_summands(&self) -> usize {
        self.summands.len()
    }

    pub fn get_summand(&self, i: usize) -> Result<&Summand, AnnotError> {
        self.summands.get(i).ok_or(AnnotError::IndexOutOfRange {
            index: i,
            len: self.summands.len(),
        })
    }

    pub fn add(&self, other: &NormalForm) -> NormalForm {
        NormalForm::from_summands(self.semiring, self.summands.iter().chain(other.summands.iter()).cloned())
    }

    pub fn mul(&self, other: &NormalForm) -> NormalForm {
        let mut out = Vec::with_capacity(self.summands.len() * other.summands.len());
        for a in &self.summands {
            for b in &other.summands {
                out.push(Summand {
                    shape: a.shape.mul(&b.shape),
                    coeff: self.semiring.mul_coeff(a.coeff, b.coeff),
                });
            }
        }
        NormalForm::from_summands(self.semiring, out)
    }

    /// `A(k)` for a normalized `k`: each summand wrapped individually.
    pub fn wrap(&self, ann: VersionAnnotation) -> NormalForm {
        NormalForm::from_summands(self.semiring, self.summands.iter().map(|s| s.wrap(ann)))
    }

    /// Keeps the summands for which `keep` holds.
    pub fn filter(&self, mut keep: impl FnMut(&Summand) -> bool) -> NormalForm {
        NormalForm {
            semiring: self.semiring,
            summands: self.summands.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn to_expr(&self) -> AnnotExpr {
        let mut it = self.summands.iter();
        match it.next() {
            None => AnnotExpr::Base(self.semiring.zero()),
            Some(first) => it.fold(first.to_expr(self.semiring), |acc, s| {
                AnnotExpr::sum(acc, s.to_expr(self.semiring))
            }),
        }
    }

    pub fn render(&self) -> String {
        if self.summands.is_empty() {
            return self.semiring.zero().to_string();
        }
        let parts: Vec<String> = self.summands.iter().map(|s| s.render(self.semiring)).collect();
        parts.join(" + ")
    }
}

impl fmt::Display for NormalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn normalize(e: &AnnotExpr, k: BaseSemiring) -> NormalForm {
    match e {
        AnnotExpr::Base(b) => NormalForm::from_base(k, b),
        AnnotExpr::Sum(a, b) => normalize(a, k).add(&normalize(b, k)),
        AnnotExpr::Product(a, b) => normalize(a, k).mul(&normalize(b, k)),
        AnnotExpr::Wrapped(ann, inner) => normalize(inner, k).wrap(*ann),
    }
}

pub fn equivalent(e1: &AnnotExpr, e2: &AnnotExpr, k: BaseSemiring) -> bool {
    normalize(e1, k) == normalize(e2, k)
}

/// `doCommit(T, ν, k)`: wraps `k` in `C^{T,ν+1}` when its outermost layer is
/// an insert, update or delete of `T`.
pub fn do_commit(txn: TxnId, time: VersionId, s: &Summand) -> Summand {
    match s.outermost() {
        Some(a) if a.txn == txn && a.kind != AnnotKind::C => {
            s.wrap(VersionAnnotation::new(AnnotKind::C, txn, time + 1, a.tid))
        }
        _ => s.clone(),
    }
}

pub fn has_created(txn: TxnId, s: &Summand) -> bool {
    s.outermost().map(|a| a.txn == txn).unwrap_or(false)
}

/// A base-semiring homomorphism applied at the leaves of MV-expressions.
#[derive(Clone)]
pub struct LiftedHom {
    pub source: BaseSemiring,
    pub target: BaseSemiring,
    name: String,
    base_map: Arc<dyn Fn(&BaseElem) -> BaseElem + Send + Sync>,
}

impl fmt::Debug for LiftedHom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LiftedHom({}: {} -> {})", self.name, self.source.name(), self.target.name())
    }
}

impl LiftedHom {
    pub fn new(
        name: &str,
        source: BaseSemiring,
        target: BaseSemiring,
        base_map: impl Fn(&BaseElem) -> BaseElem + Send + Sync + 'static,
    ) -> LiftedHom {
        LiftedHom {
            source,
            target,
            name: name.to_string(),
            base_map: Arc::new(base_map),
        }
    }

    pub fn identity(k: BaseSemiring) -> LiftedHom {
        LiftedHom::new("identity", k, k, move |b| k.coerce(b))
    }

    /// The polynomial homomorphism `N[X] → K` induced by a valuation of the
    /// variables.
    pub fn from_valuation(
        name: &str,
        target: BaseSemiring,
        valuation: impl Fn(&Var) -> BaseElem + Send + Sync + 'static,
    ) -> LiftedHom {
        LiftedHom::new(name, BaseSemiring::ProvPoly, target, move |b| {
            let p = match BaseSemiring::ProvPoly.coerce(b) {
                BaseElem::Poly(p) => p,
                _ => unreachable!(),
            };
            let mut acc = target.zero();
            for (m, c) in p.terms() {
                let mut term = target.coerce(&BaseElem::Nat(*c));
                for (v, e) in m.vars() {
                    let x = target.coerce(&valuation(v));
                    for _ in 0..*e {
                        term = target.mul(&term, &x);
                    }
                }
                acc = target.add(&acc, &term);
            }
            acc
        })
    }

    pub fn vars_to_one() -> LiftedHom {
        LiftedHom::from_valuation("vars-to-1", BaseSemiring::Nat, |_| BaseElem::Nat(1))
    }

    pub fn vars_to_true() -> LiftedHom {
        LiftedHom::from_valuation("vars-to-true", BaseSemiring::Bool, |_| BaseElem::Bool(true))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn map_base(&self, b: &BaseElem) -> BaseElem {
        self.target.coerce(&(self.base_map)(&self.source.coerce(b)))
    }

    pub fn apply_expr(&self, e: &AnnotExpr) -> AnnotExpr {
        e.map_leaves(&|b| self.map_base(b))
    }

    pub fn apply(&self, n: &NormalForm) -> NormalForm {
        normalize(&self.apply_expr(&n.to_expr()), self.target)
    }
}

pub fn apply_lifted(h: &LiftedHom, e: &AnnotExpr) -> AnnotExpr {
    h.apply_expr(e)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("annotation syntax error at offset {offset}: {message}")]
pub struct AnnotParseError {
    pub offset: usize,
    pub message: String,
}

/// Parses the textual rendering produced by [`NormalForm::render`] and
/// `Display for AnnotExpr`.
pub fn parse_annotation(text: &str) -> Result<AnnotExpr, AnnotParseError> {
    let mut p = AnnotParser {
        src: text.as_bytes(),
        pos: 0,
    };
    let e = p.sum()?;
    p.ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

struct AnnotParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl AnnotParser<'_> {
    fn err(&self, m: &str) -> AnnotParseError {
        AnnotParseError {
            offset: self.pos,
            message: m.to_string(),
        }
    }

    fn ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), AnnotParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn sum(&mut self) -> Result<AnnotExpr, AnnotParseError> {
        let mut e = self.product()?;
        while self.eat(b'+') {
            e = AnnotExpr::sum(e, self.product()?);
        }
        Ok(e)
    }

    fn product(&mut self) -> Result<AnnotExpr, AnnotParseError> {
        let mut e = self.atom()?;
        while self.eat(b'*') {
            e = AnnotExpr::product(e, self.atom()?);
        }
        Ok(e)
    }

    fn number(&mut self) -> Result<u64, AnnotParseError> {
        self.ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err("expected a number"))
    }

    fn atom(&mut self) -> Result<AnnotExpr, AnnotParseError> {
        self.ws();
        let Some(&c) = self.src.get(self.pos) else {
            return Err(self.err("unexpected end of input"));
        };
        if c == b'(' {
            self.pos += 1;
            let e = self.sum()?;
            self.expect(b')')?;
            return Ok(e);
        }
        if c.is_ascii_digit() {
            let n = self.number()?;
            return Ok(AnnotExpr::Base(BaseElem::Nat(n)));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                self.pos += 1;
            }
            let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            if word.len() == 1 && self.src.get(self.pos) == Some(&b'[') {
                if let Some(kind) = AnnotKind::from_letter(word.chars().next().unwrap()) {
                    self.pos += 1;
                    self.ws();
                    if !self.eat(b'T') {
                        return Err(self.err("expected transaction id `T<n>`"));
                    }
                    let txn = self.number()? as u32;
                    self.expect(b',')?;
                    let time = self.number()? as u32;
                    self.expect(b',')?;
                    let tid = self.number()?;
                    self.expect(b']')?;
                    self.expect(b'(')?;
                    let inner = self.sum()?;
                    self.expect(b')')?;
                    return Ok(AnnotExpr::wrap(
                        VersionAnnotation::new(kind, TxnId(txn), time, TupleId(tid)),
                        inner,
                    ));
                }
            }
            return Ok(match word {
                "true" => AnnotExpr::Base(BaseElem::Bool(true)),
                "false" => AnnotExpr::Base(BaseElem::Bool(false)),
                v => AnnotExpr::var(v),
            });
        }
        Err(self.err("unexpected character"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(kind: AnnotKind, t: u32, v: u32, id: u64) -> VersionAnnotation {
        VersionAnnotation::new(kind, TxnId(t), v, TupleId(id))
    }

    fn chain(layers: &[(AnnotKind, u32, u32, u64)], leaf: AnnotExpr) -> AnnotExpr {
        layers
            .iter()
            .rev()
            .fold(leaf, |e, &(k, t, v, id)| AnnotExpr::wrap(ann(k, t, v, id), e))
    }

    #[test]
    fn annotation_sums_evaluate_in_the_base() {
        let e = AnnotExpr::wrap(ann(AnnotKind::U, 1, 3, 1), AnnotExpr::sum(AnnotExpr::nat(10), AnnotExpr::nat(5)));
        let f = AnnotExpr::wrap(ann(AnnotKind::U, 1, 3, 1), AnnotExpr::nat(15));
        assert!(equivalent(&e, &f, BaseSemiring::Nat));
        assert_eq!(normalize(&e, BaseSemiring::Nat).render(), "U[T1,3,1](15)");
    }

    #[test]
    fn wrapped_zero_vanishes() {
        let e = AnnotExpr::wrap(ann(AnnotKind::I, 1, 2, 1), AnnotExpr::nat(0));
        assert_eq!(normalize(&e, BaseSemiring::Nat).num_summands(), 0);
        let p = AnnotExpr::wrap(ann(AnnotKind::I, 1, 2, 1), AnnotExpr::Base(BaseSemiring::ProvPoly.zero()));
        assert!(normalize(&p, BaseSemiring::ProvPoly).is_zero());
    }

    #[test]
    fn distributes_products_over_sums() {
        let e = AnnotExpr::product(AnnotExpr::sum(AnnotExpr::var("x1"), AnnotExpr::var("x2")), AnnotExpr::var("x3"));
        let n = normalize(&e, BaseSemiring::ProvPoly);
        assert_eq!(n.render(), "x1 * x3 + x2 * x3");
        assert_eq!(n.num_summands(), 2);
    }

    #[test]
    fn annotations_distribute_over_sums() {
        let a = ann(AnnotKind::U, 2, 5, 3);
        let lhs = AnnotExpr::wrap(a, AnnotExpr::sum(AnnotExpr::var("x1"), AnnotExpr::var("x2")));
        let rhs = AnnotExpr::sum(AnnotExpr::wrap(a, AnnotExpr::var("x1")), AnnotExpr::wrap(a, AnnotExpr::var("x2")));
        assert!(equivalent(&lhs, &rhs, BaseSemiring::ProvPoly));
        assert!(!equivalent(&AnnotExpr::var("x1"), &AnnotExpr::var("x2"), BaseSemiring::ProvPoly));
    }

    #[test]
    fn summand_access() {
        let n = normalize(&AnnotExpr::sum(AnnotExpr::var("x1"), AnnotExpr::var("x2")), BaseSemiring::ProvPoly);
        assert_eq!(n.num_summands(), 2);
        assert!(normalize(&AnnotExpr::nat(0), BaseSemiring::Nat).get_summand(0).is_err());
        let e1 = chain(&[(AnnotKind::C, 0, 6, 1), (AnnotKind::I, 0, 2, 1)], AnnotExpr::var("x1"));
        let n = normalize(&e1, BaseSemiring::ProvPoly);
        assert_eq!(n.num_summands(), 1);
        assert_eq!(n.get_summand(0).unwrap().render(BaseSemiring::ProvPoly), "C[T0,6,1](I[T0,2,1](x1))");
    }

    #[test]
    fn id_and_version_of_outermost_layer() {
        let b1 = chain(
            &[(AnnotKind::C, 7, 26, 4), (AnnotKind::U, 7, 22, 4), (AnnotKind::C, 1, 10, 4), (AnnotKind::I, 1, 8, 4)],
            AnnotExpr::var("x4"),
        );
        let s = normalize(&b1, BaseSemiring::ProvPoly).summands()[0].clone();
        assert_eq!(s.id_of().unwrap(), TupleId(4));
        assert_eq!(s.version_of().unwrap(), 26);
        let s = normalize(&chain(&[(AnnotKind::I, 0, 2, 1)], AnnotExpr::var("x1")), BaseSemiring::ProvPoly).summands()[0]
            .clone();
        assert_eq!((s.id_of().unwrap(), s.version_of().unwrap()), (TupleId(1), 2));
        let bare = normalize(&AnnotExpr::var("x1"), BaseSemiring::ProvPoly).summands()[0].clone();
        assert!(matches!(bare.id_of(), Err(AnnotError::NotAdmissible(_))));
    }

    #[test]
    fn commit_wraps_only_own_pending_layers() {
        let k = BaseSemiring::ProvPoly;
        let pending = normalize(
            &chain(&[(AnnotKind::U, 7, 22, 4), (AnnotKind::C, 1, 10, 4)], AnnotExpr::var("x4")),
            k,
        )
        .summands()[0]
            .clone();
        assert_eq!(
            do_commit(TxnId(7), 25, &pending).render(k),
            "C[T7,26,4](U[T7,22,4](C[T1,10,4](x4)))"
        );
        let committed = normalize(&chain(&[(AnnotKind::C, 1, 10, 4)], AnnotExpr::var("x4")), k).summands()[0].clone();
        assert_eq!(do_commit(TxnId(7), 25, &committed), committed);
        let other = normalize(&chain(&[(AnnotKind::I, 8, 23, 7)], AnnotExpr::var("x1")), k).summands()[0].clone();
        assert_eq!(do_commit(TxnId(7), 25, &other), other);
        assert!(has_created(TxnId(7), &pending));
        assert!(!has_created(TxnId(7), &committed));
        assert!(has_created(TxnId(8), &other));
    }

    #[test]
    fn lifted_homomorphism_maps_leaves() {
        let h = LiftedHom::from_valuation("h", BaseSemiring::Nat, |v| match v.name() {
            "x1" => BaseElem::Nat(1),
            "x2" => BaseElem::Nat(3),
            _ => BaseElem::Nat(0),
        });
        let e = AnnotExpr::sum(
            chain(&[(AnnotKind::C, 1, 3, 1), (AnnotKind::U, 1, 1, 1)], AnnotExpr::var("x1")),
            chain(&[(AnnotKind::C, 1, 3, 2), (AnnotKind::U, 1, 2, 2)], AnnotExpr::var("x2")),
        );
        let mapped = normalize(&apply_lifted(&h, &e), BaseSemiring::Nat);
        assert_eq!(mapped.render(), "C[T1,3,1](U[T1,1,1](1)) + C[T1,3,2](U[T1,2,2](3))");
        let id = LiftedHom::identity(BaseSemiring::ProvPoly);
        assert_eq!(apply_lifted(&id, &e), e);
        let kill = LiftedHom::from_valuation("zero", BaseSemiring::Nat, |_| BaseElem::Nat(0));
        let z = apply_lifted(&kill, &chain(&[(AnnotKind::I, 1, 2, 1)], AnnotExpr::var("x1")));
        assert!(normalize(&z, BaseSemiring::Nat).is_zero());
    }

    #[test]
    fn render_parse_round_trip() {
        let text = "C[T7,26,4](U[T7,22,4](C[T1,10,4](I[T1,8,4](x4))))";
        let e = parse_annotation(text).unwrap();
        assert_eq!(normalize(&e, BaseSemiring::ProvPoly).render(), text);
        let e = parse_annotation("2 * U[T1,3,1](x1 * x2) + x3 * I[T2,4,2](x1)").unwrap();
        let n = normalize(&e, BaseSemiring::ProvPoly);
        let again = normalize(&parse_annotation(&n.render()).unwrap(), BaseSemiring::ProvPoly);
        assert_eq!(n, again);
    }
}
