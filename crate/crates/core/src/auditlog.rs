//! Audit logs: a schema preamble followed by timestamped SQL statements.
//!
//! ```text
//! -- comment
//! TABLE Bonus(ID INT, EmpID INT, Amount INT)
//! 21 | T7 | UPDATE Bonus SET Amount = Amount + 1000 WHERE EmpID = 101;
//! 25 | T7 | COMMIT;
//! ```
//!
//! Grammar (keywords are case-insensitive, identifiers are not):
//!
//! ```text
//! log      := { line '\n' }
//! line     := blank | '--' text | table | entry
//! table    := TABLE ident '(' ident type { ',' ident type } ')' [';']
//! type     := INT | STRING
//! entry    := int '|' 'T'int '|' stmt [';']
//! stmt     := UPDATE ident SET ident '=' expr { ',' ident '=' expr } [WHERE cond]
//!           | INSERT INTO ident [ '(' ident { ',' ident } ')' ] source
//!           | DELETE FROM ident [WHERE cond]
//!           | COMMIT
//!           | select
//! source   := VALUES row { ',' row } | select | '(' select ')'
//! row      := '(' literal { ',' literal } ')'
//! select   := SELECT expr [AS ident] { ',' expr [AS ident] } [INTO ident] FROM ident [WHERE cond]
//! cond     := conj { OR conj }
//! conj     := neg { AND neg }
//! neg      := NOT neg | '(' cond ')' | TRUE | FALSE | expr cmp expr | ident
//! cmp      := '=' | '<>' | '!=' | '<' | '<=' | '>' | '>='
//! expr     := term { ('+' | '-') term }
//! term     := atom { '*' atom }
//! atom     := ident | literal | '(' expr ')'
//! literal  := ['-'] int | 'string' | TRUE | FALSE
//! ```
//!
//! Lowering: `INSERT ... VALUES` becomes a union of singletons, each row
//! annotated with a fresh variable `x<n>` (rows numbered across the log in
//! time order). Omitted `INT` columns take `1 + ` the largest value seen for
//! that column in earlier inserts; omitted `STRING` columns take `''`.
//! `SELECT` entries are read-only and lower to nothing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde_json::json;

use crate::history::{values_insert, History, OpKind, UpdateOp};
use crate::mvsemiring::{BaseElem, BaseSemiring, TxnId, VersionId};
use crate::relalg::{
    ArithOp, AttrType, CmpOp, Condition, QueryPlan, ScalarExpr, Schema, Tuple, Value, VersionRef,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditErrorKind {
    SyntaxError,
    UnknownTable,
    UnknownColumn,
    DuplicateTimestamp,
    StatementAfterCommit,
    UncommittedTransaction,
    TypeMismatch,
}

impl AuditErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            AuditErrorKind::SyntaxError => "SyntaxError",
            AuditErrorKind::UnknownTable => "UnknownTable",
            AuditErrorKind::UnknownColumn => "UnknownColumn",
            AuditErrorKind::DuplicateTimestamp => "DuplicateTimestamp",
            AuditErrorKind::StatementAfterCommit => "StatementAfterCommit",
            AuditErrorKind::UncommittedTransaction => "UncommittedTransaction",
            AuditErrorKind::TypeMismatch => "TypeMismatch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditError {
    pub kind: AuditErrorKind,
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
    pub expected: Option<String>,
    pub message: String,
}

impl AuditError {
    fn new(kind: AuditErrorKind, line: usize, column: usize, message: String) -> AuditError {
        AuditError {
            kind,
            line,
            column,
            expected: None,
            message,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "error": self.kind.name(),
            "line": self.line,
            "column": self.column,
            "expected": self.expected,
            "message": self.message,
        })
    }
}

impl fmt::Display for AuditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}: {}", self.line, self.column, self.kind.name(), self.message)
    }
}

impl std::error::Error for AuditError {}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i128),
    Str(String),
    Sym(&'static str),
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(i) => write!(f, "`{i}`"),
            Tok::Str(s) => write!(f, "'{s}'"),
            Tok::Sym(s) => write!(f, "`{s}`"),
            Tok::End => f.write_str("end of line"),
        }
    }
}

fn lex(line: &str, lineno: usize) -> Result<Vec<(Tok, usize)>, AuditError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            break;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let s = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[s..i].iter().collect()), col));
        } else if c.is_ascii_digit() {
            let s = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[s..i].iter().collect();
            let n: i128 = text.parse().map_err(|_| {
                AuditError::new(AuditErrorKind::SyntaxError, lineno, col, format!("integer `{text}` is too large"))
            })?;
            out.push((Tok::Int(n), col));
        } else if c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => {
                        let mut e = AuditError::new(
                            AuditErrorKind::SyntaxError,
                            lineno,
                            col,
                            "unterminated string literal".into(),
                        );
                        e.expected = Some("`'`".into());
                        return Err(e);
                    }
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            out.push((Tok::Str(s), col));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "<>" => Some("<>"),
                "!=" => Some("<>"),
                "<=" => Some("<="),
                ">=" => Some(">="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push((Tok::Sym(s), col));
                i += 2;
                continue;
            }
            let s = match c {
                '(' => "(",
                ')' => ")",
                ',' => ",",
                ';' => ";",
                '|' => "|",
                '=' => "=",
                '<' => "<",
                '>' => ">",
                '+' => "+",
                '-' => "-",
                '*' => "*",
                _ => {
                    return Err(AuditError::new(
                        AuditErrorKind::SyntaxError,
                        lineno,
                        col,
                        format!("unexpected character `{c}`"),
                    ))
                }
            };
            out.push((Tok::Sym(s), col));
            i += 1;
        }
    }
    out.push((Tok::End, chars.len() + 1));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spanned<T> {
    pub value: T,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectStmt {
    pub items: Vec<(ScalarExpr, Option<String>)>,
    pub into: Option<String>,
    pub from: Spanned<String>,
    pub cond: Option<Condition>,
}

/// Statements of the supported SQL subset.
#[derive(Clone, Debug, PartialEq)]
pub enum SqlStmt {
    Update {
        table: Spanned<String>,
        sets: Vec<(Spanned<String>, ScalarExpr)>,
        cond: Option<Condition>,
    },
    InsertValues {
        table: Spanned<String>,
        cols: Option<Vec<Spanned<String>>>,
        rows: Vec<Spanned<Vec<Value>>>,
    },
    InsertSelect {
        table: Spanned<String>,
        cols: Option<Vec<Spanned<String>>>,
        select: SelectStmt,
    },
    Delete {
        table: Spanned<String>,
        cond: Option<Condition>,
    },
    Commit,
    Select(SelectStmt),
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    /// Column references seen in expressions, with their positions.
    refs: Vec<Spanned<String>>,
    /// Accept `P(Rel,attr)` as a column name.
    prov_cols: bool,
}

type PResult<T> = Result<T, AuditError>;

const KEYWORDS: &[&str] = &[
    "UPDATE", "SET", "WHERE", "INSERT", "INTO", "VALUES", "DELETE", "FROM", "COMMIT", "SELECT", "AS", "AND", "OR",
    "NOT", "TRUE", "FALSE", "TABLE",
];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].0
    }

    fn col(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, expected: &str) -> AuditError {
        AuditError {
            kind: AuditErrorKind::SyntaxError,
            line: self.line,
            column: self.col(),
            expected: Some(expected.to_string()),
            message: format!("expected {expected}, found {}", self.peek()),
        }
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.err(&format!("`{kw}`")))
        }
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.err(&format!("`{s}`")))
        }
    }

    fn ident(&mut self) -> PResult<Spanned<String>> {
        let column = self.col();
        match self.peek() {
            Tok::Ident(s) if !KEYWORDS.iter().any(|k| s.eq_ignore_ascii_case(k)) => {
                let value = s.clone();
                self.bump();
                Ok(Spanned { value, column })
            }
            _ => Err(self.err("identifier")),
        }
    }

    fn int(&mut self) -> PResult<i128> {
        match self.peek() {
            Tok::Int(n) => {
                let n = *n;
                self.bump();
                Ok(n)
            }
            _ => Err(self.err("integer")),
        }
    }

    fn end(&mut self) -> PResult<()> {
        self.eat_sym(";");
        if *self.peek() != Tok::End {
            return Err(self.err("end of statement"));
        }
        Ok(())
    }

    fn literal(&mut self) -> PResult<Value> {
        let col = self.col();
        let neg = self.eat_sym("-");
        match self.peek().clone() {
            Tok::Int(n) => {
                self.bump();
                let v = if neg { -n } else { n };
                i64::try_from(v).map(Value::Int).map_err(|_| {
                    AuditError::new(AuditErrorKind::SyntaxError, self.line, col, format!("integer `{v}` is out of range"))
                })
            }
            Tok::Str(s) if !neg => {
                self.bump();
                Ok(Value::Str(s))
            }
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("TRUE") => {
                self.bump();
                Ok(Value::Bool(true))
            }
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("FALSE") => {
                self.bump();
                Ok(Value::Bool(false))
            }
            _ => Err(self.err("literal")),
        }
    }

    fn expr(&mut self) -> PResult<ScalarExpr> {
        let mut e = self.term()?;
        loop {
            let op = if self.eat_sym("+") {
                ArithOp::Add
            } else if self.eat_sym("-") {
                ArithOp::Sub
            } else {
                return Ok(e);
            };
            e = ScalarExpr::arith(op, e, self.term()?);
        }
    }

    fn term(&mut self) -> PResult<ScalarExpr> {
        let mut e = self.atom()?;
        while self.eat_sym("*") {
            e = ScalarExpr::arith(ArithOp::Mul, e, self.atom()?);
        }
        Ok(e)
    }

    fn atom(&mut self) -> PResult<ScalarExpr> {
        if self.eat_sym("(") {
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(e);
        }
        match self.peek() {
            Tok::Ident(s) if self.prov_cols && s == "P" && *self.peek_at(1) == Tok::Sym("(") => {
                let column = self.col();
                self.bump();
                self.bump();
                let rel = self.ident()?.value;
                self.expect_sym(",")?;
                let attr = self.ident()?.value;
                self.expect_sym(")")?;
                let value = format!("P({rel},{attr})");
                self.refs.push(Spanned {
                    value: value.clone(),
                    column,
                });
                Ok(ScalarExpr::Attr(value))
            }
            Tok::Ident(s) if !(s.eq_ignore_ascii_case("TRUE") || s.eq_ignore_ascii_case("FALSE")) => {
                let id = self.ident().map_err(|_| self.err("expression"))?;
                self.refs.push(id.clone());
                Ok(ScalarExpr::Attr(id.value))
            }
            _ => self.literal().map(ScalarExpr::Const).map_err(|_| self.err("expression")),
        }
    }

    fn cmp_op(&mut self) -> Option<CmpOp> {
        let op = match self.peek() {
            Tok::Sym("=") => CmpOp::Eq,
            Tok::Sym("<>") => CmpOp::Ne,
            Tok::Sym("<") => CmpOp::Lt,
            Tok::Sym("<=") => CmpOp::Le,
            Tok::Sym(">") => CmpOp::Gt,
            Tok::Sym(">=") => CmpOp::Ge,
            _ => return None,
        };
        self.bump();
        Some(op)
    }

    fn cond(&mut self) -> PResult<Condition> {
        let mut c = self.conj()?;
        while self.eat_kw("OR") {
            c = Condition::or(c, self.conj()?);
        }
        Ok(c)
    }

    fn conj(&mut self) -> PResult<Condition> {
        let mut c = self.neg()?;
        while self.eat_kw("AND") {
            c = Condition::and(c, self.neg()?);
        }
        Ok(c)
    }

    fn neg(&mut self) -> PResult<Condition> {
        if self.eat_kw("NOT") {
            return Ok(Condition::not(self.neg()?));
        }
        let continues_expr = |t: &Tok| matches!(t, Tok::Sym("=" | "<>" | "<" | "<=" | ">" | ">=" | "+" | "-" | "*"));
        if (self.is_kw("TRUE") || self.is_kw("FALSE")) && !continues_expr(self.peek_at(1)) {
            let t = self.is_kw("TRUE");
            self.bump();
            return Ok(if t { Condition::True } else { Condition::False });
        }
        if self.is_sym("(") {
            // Either a parenthesized condition or a comparison whose left
            // operand is parenthesized; try the former first.
            let (save, nrefs) = (self.pos, self.refs.len());
            self.bump();
            if let Ok(c) = self.cond() {
                if self.eat_sym(")") && !continues_expr(self.peek()) {
                    return Ok(c);
                }
            }
            self.pos = save;
            self.refs.truncate(nrefs);
        }
        let a = self.expr()?;
        let Some(op) = self.cmp_op() else {
            // A bare column stands for `col = TRUE`; type checking rejects
            // non-boolean columns.
            if let ScalarExpr::Attr(_) = a {
                return Ok(Condition::cmp(a, CmpOp::Eq, ScalarExpr::Const(Value::Bool(true))));
            }
            return Err(self.err("comparison operator"));
        };
        let b = self.expr()?;
        Ok(Condition::cmp(a, op, b))
    }

    fn select(&mut self) -> PResult<SelectStmt> {
        self.expect_kw("SELECT")?;
        let mut items = Vec::new();
        loop {
            let e = self.expr()?;
            let alias = if self.eat_kw("AS") { Some(self.ident()?.value) } else { None };
            items.push((e, alias));
            if !self.eat_sym(",") {
                break;
            }
        }
        let into = if self.eat_kw("INTO") { Some(self.ident()?.value) } else { None };
        self.expect_kw("FROM")?;
        let from = self.ident()?;
        let cond = if self.eat_kw("WHERE") { Some(self.cond()?) } else { None };
        Ok(SelectStmt { items, into, from, cond })
    }

    fn stmt(&mut self) -> PResult<SqlStmt> {
        let s = if self.eat_kw("UPDATE") {
            let table = self.ident()?;
            self.expect_kw("SET")?;
            let mut sets = Vec::new();
            loop {
                let c = self.ident()?;
                self.expect_sym("=")?;
                sets.push((c, self.expr()?));
                if !self.eat_sym(",") {
                    break;
                }
            }
            let cond = if self.eat_kw("WHERE") { Some(self.cond()?) } else { None };
            SqlStmt::Update { table, sets, cond }
        } else if self.eat_kw("INSERT") {
            self.expect_kw("INTO")?;
            let table = self.ident()?;
            let mut cols = None;
            if self.is_sym("(") && !matches!(self.peek_at(1), Tok::Ident(s) if s.eq_ignore_ascii_case("SELECT")) {
                self.bump();
                let mut v = vec![self.ident()?];
                while self.eat_sym(",") {
                    v.push(self.ident()?);
                }
                self.expect_sym(")")?;
                cols = Some(v);
            }
            if self.eat_kw("VALUES") {
                let mut rows = Vec::new();
                loop {
                    let column = self.col();
                    self.expect_sym("(")?;
                    let mut row = vec![self.literal()?];
                    while self.eat_sym(",") {
                        row.push(self.literal()?);
                    }
                    self.expect_sym(")")?;
                    rows.push(Spanned { value: row, column });
                    if !self.eat_sym(",") {
                        break;
                    }
                }
                SqlStmt::InsertValues { table, cols, rows }
            } else if self.eat_sym("(") {
                let select = self.select()?;
                self.expect_sym(")")?;
                SqlStmt::InsertSelect { table, cols, select }
            } else if self.is_kw("SELECT") {
                SqlStmt::InsertSelect {
                    table,
                    cols,
                    select: self.select()?,
                }
            } else {
                return Err(self.err("`VALUES` or `SELECT`"));
            }
        } else if self.eat_kw("DELETE") {
            self.expect_kw("FROM")?;
            let table = self.ident()?;
            let cond = if self.eat_kw("WHERE") { Some(self.cond()?) } else { None };
            SqlStmt::Delete { table, cond }
        } else if self.eat_kw("COMMIT") {
            SqlStmt::Commit
        } else if self.is_kw("SELECT") {
            SqlStmt::Select(self.select()?)
        } else {
            return Err(self.err("`UPDATE`, `INSERT`, `DELETE`, `SELECT` or `COMMIT`"));
        };
        self.end()?;
        Ok(s)
    }
}

/// Parses one condition, e.g. a provenance filter. Column references are not
/// resolved here; `P(Rel,attr)` is accepted as a column name.
pub fn parse_condition(text: &str) -> Result<Condition, AuditError> {
    let mut p = Parser {
        toks: lex(text, 1)?,
        pos: 0,
        line: 1,
        refs: Vec::new(),
        prov_cols: true,
    };
    let c = p.cond()?;
    if *p.peek() != Tok::End {
        return Err(p.err("end of condition"));
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub time: VersionId,
    pub txn: TxnId,
    pub line: usize,
    /// Statement text as written, without the trailing `;`.
    pub stmt: String,
    pub sql: SqlStmt,
    /// `None` for read-only statements.
    pub parsed: Option<UpdateOp>,
}

#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub schemas: Vec<Arc<Schema>>,
    pub entries: Vec<AuditEntry>,
    pub history: History,
}

/// Statement lowering state: the variable counter and per-column sequences.
#[derive(Clone, Debug)]
pub struct Lowerer {
    schemas: Vec<Arc<Schema>>,
    next_var: u64,
    seqs: HashMap<(String, String), i64>,
}

impl Lowerer {
    pub fn new(schemas: Vec<Arc<Schema>>) -> Lowerer {
        Lowerer {
            schemas,
            next_var: 0,
            seqs: HashMap::new(),
        }
    }

    pub fn schemas(&self) -> &[Arc<Schema>] {
        &self.schemas
    }

    fn schema(&self, t: &Spanned<String>, line: usize) -> Result<Arc<Schema>, AuditError> {
        self.schemas.iter().find(|s| s.name == t.value).cloned().ok_or_else(|| {
            AuditError::new(AuditErrorKind::UnknownTable, line, t.column, format!("unknown table `{}`", t.value))
        })
    }

    fn fresh_var(&mut self) -> BaseElem {
        self.next_var += 1;
        BaseElem::var(&format!("x{}", self.next_var))
    }

    fn observe(&mut self, table: &str, col: &str, v: &Value) {
        if let Value::Int(i) = v {
            let e = self.seqs.entry((table.to_string(), col.to_string())).or_insert(*i);
            *e = (*e).max(*i);
        }
    }

    fn next_seq(&mut self, table: &str, col: &str) -> i64 {
        let e = self.seqs.entry((table.to_string(), col.to_string())).or_insert(0);
        *e = e.saturating_add(1);
        *e
    }

    fn default_value(&mut self, table: &str, col: &str, ty: AttrType) -> Value {
        match ty {
            AttrType::Int => Value::Int(self.next_seq(table, col)),
            AttrType::Str => Value::Str(String::new()),
            AttrType::Bool => Value::Bool(false),
        }
    }

    /// Lowers a parsed statement; `col` locates the statement for errors.
    pub fn lower(
        &mut self,
        sql: &SqlStmt,
        refs: &[Spanned<String>],
        txn: TxnId,
        time: VersionId,
        line: usize,
        col: usize,
    ) -> Result<Option<UpdateOp>, AuditError> {
        let type_err = |e: crate::relalg::RelError| {
            AuditError::new(AuditErrorKind::TypeMismatch, line, col, e.to_string())
        };
        let check_refs = |schema: &Schema| -> Result<(), AuditError> {
            for r in refs {
                if schema.index_of(&r.value).is_none() {
                    return Err(AuditError::new(
                        AuditErrorKind::UnknownColumn,
                        line,
                        r.column,
                        format!("unknown column `{}` in `{}`", r.value, schema.name),
                    ));
                }
            }
            Ok(())
        };
        let check_cols = |schema: &Schema, cols: &[Spanned<String>]| -> Result<(), AuditError> {
            for (i, c) in cols.iter().enumerate() {
                if schema.index_of(&c.value).is_none() {
                    return Err(AuditError::new(
                        AuditErrorKind::UnknownColumn,
                        line,
                        c.column,
                        format!("unknown column `{}` in `{}`", c.value, schema.name),
                    ));
                }
                if cols[..i].iter().any(|d| d.value == c.value) {
                    return Err(AuditError::new(
                        AuditErrorKind::SyntaxError,
                        line,
                        c.column,
                        format!("column `{}` listed twice", c.value),
                    ));
                }
            }
            Ok(())
        };
        let kind = match sql {
            SqlStmt::Commit => OpKind::Commit,
            SqlStmt::Select(s) => {
                let schema = self.schema(&s.from, line)?;
                check_refs(&schema)?;
                if let Some(c) = &s.cond {
                    c.check(&schema).map_err(type_err)?;
                }
                for (e, _) in &s.items {
                    e.type_of(&schema).map_err(type_err)?;
                }
                return Ok(None);
            }
            SqlStmt::Update { table, sets, cond } => {
                let schema = self.schema(table, line)?;
                let targets: Vec<Spanned<String>> = sets.iter().map(|(c, _)| c.clone()).collect();
                check_cols(&schema, &targets)?;
                check_refs(&schema)?;
                let cond = cond.clone().unwrap_or(Condition::True);
                cond.check(&schema).map_err(type_err)?;
                let mut exprs = Vec::new();
                for (name, ty) in &schema.attrs {
                    let e = sets
                        .iter()
                        .find(|(c, _)| &c.value == name)
                        .map(|(_, e)| e.clone())
                        .unwrap_or_else(|| ScalarExpr::Attr(name.clone()));
                    let et = e.type_of(&schema).map_err(type_err)?;
                    if et != *ty {
                        return Err(type_err(crate::relalg::RelError::TypeMismatch(format!(
                            "`{e}` is {} but `{name}` is {}",
                            et.sql_name(),
                            ty.sql_name()
                        ))));
                    }
                    exprs.push((e, name.clone()));
                }
                OpKind::Update {
                    rel: schema.name.clone(),
                    cond,
                    exprs,
                }
            }
            SqlStmt::Delete { table, cond } => {
                let schema = self.schema(table, line)?;
                check_refs(&schema)?;
                let cond = cond.clone().unwrap_or(Condition::True);
                cond.check(&schema).map_err(type_err)?;
                OpKind::Delete {
                    rel: schema.name.clone(),
                    cond,
                }
            }
            SqlStmt::InsertValues { table, cols, rows } => {
                let schema = self.schema(table, line)?;
                let cols: Vec<Spanned<String>> = match cols {
                    Some(c) => c.clone(),
                    None => schema
                        .attr_names()
                        .map(|n| Spanned {
                            value: n.to_string(),
                            column: table.column,
                        })
                        .collect(),
                };
                check_cols(&schema, &cols)?;
                let mut out = Vec::new();
                for row in rows {
                    if row.value.len() != cols.len() {
                        return Err(AuditError::new(
                            AuditErrorKind::TypeMismatch,
                            line,
                            row.column,
                            format!("row has {} values for {} columns", row.value.len(), cols.len()),
                        ));
                    }
                    for (c, v) in cols.iter().zip(&row.value) {
                        let ty = schema.attrs[schema.index_of(&c.value).unwrap()].1;
                        if v.ty() != ty {
                            return Err(AuditError::new(
                                AuditErrorKind::TypeMismatch,
                                line,
                                row.column,
                                format!("value {v} for `{}` is not {}", c.value, ty.sql_name()),
                            ));
                        }
                        self.observe(&schema.name, &c.value, v);
                    }
                    let mut vals = Vec::with_capacity(schema.arity());
                    for (name, ty) in &schema.attrs {
                        match cols.iter().position(|c| &c.value == name) {
                            Some(i) => vals.push(row.value[i].clone()),
                            None => vals.push(self.default_value(&schema.name, name, *ty)),
                        }
                    }
                    let var = self.fresh_var();
                    out.push((Tuple(vals), var));
                }
                OpKind::Insert {
                    rel: schema.name.clone(),
                    query: values_insert(&schema, out),
                }
            }
            SqlStmt::InsertSelect { table, cols, select } => {
                let schema = self.schema(table, line)?;
                let source = self.schema(&select.from, line)?;
                let cols: Vec<Spanned<String>> = match cols {
                    Some(c) => c.clone(),
                    None => schema
                        .attr_names()
                        .map(|n| Spanned {
                            value: n.to_string(),
                            column: table.column,
                        })
                        .collect(),
                };
                check_cols(&schema, &cols)?;
                check_refs(&source)?;
                if select.items.len() != cols.len() {
                    return Err(AuditError::new(
                        AuditErrorKind::TypeMismatch,
                        line,
                        col,
                        format!("select list has {} items for {} columns", select.items.len(), cols.len()),
                    ));
                }
                let cond = select.cond.clone().unwrap_or(Condition::True);
                cond.check(&source).map_err(type_err)?;
                for (c, (e, _)) in cols.iter().zip(&select.items) {
                    let ty = schema.attrs[schema.index_of(&c.value).unwrap()].1;
                    let et = e.type_of(&source).map_err(type_err)?;
                    if et != ty {
                        return Err(type_err(crate::relalg::RelError::TypeMismatch(format!(
                            "`{e}` is {} but `{}` is {}",
                            et.sql_name(),
                            c.value,
                            ty.sql_name()
                        ))));
                    }
                    if let ScalarExpr::Const(v) = e {
                        self.observe(&schema.name, &c.value, v);
                    }
                }
                let mut exprs = Vec::new();
                for (name, ty) in &schema.attrs {
                    let e = match cols.iter().position(|c| &c.value == name) {
                        Some(i) => select.items[i].0.clone(),
                        None => ScalarExpr::Const(self.default_value(&schema.name, name, *ty)),
                    };
                    exprs.push((e, name.clone()));
                }
                let base = QueryPlan::base(&source.name, VersionRef::Current);
                OpKind::Insert {
                    rel: schema.name.clone(),
                    query: QueryPlan::project(exprs, QueryPlan::select(cond, base)),
                }
            }
        };
        Ok(Some(UpdateOp { txn, time, kind }))
    }
}

fn parse_table(p: &mut Parser) -> PResult<Schema> {
    p.expect_kw("TABLE")?;
    let name = p.ident()?;
    p.expect_sym("(")?;
    let mut attrs: Vec<(String, AttrType)> = Vec::new();
    loop {
        let a = p.ident()?;
        let ty = if p.eat_kw("INT") || p.eat_kw("INTEGER") {
            AttrType::Int
        } else if p.eat_kw("STRING") || p.eat_kw("TEXT") || p.eat_kw("VARCHAR") {
            AttrType::Str
        } else {
            return Err(p.err("`INT` or `STRING`"));
        };
        if attrs.iter().any(|(n, _)| *n == a.value) {
            return Err(AuditError::new(
                AuditErrorKind::SyntaxError,
                p.line,
                a.column,
                format!("column `{}` declared twice", a.value),
            ));
        }
        attrs.push((a.value, ty));
        if !p.eat_sym(",") {
            break;
        }
    }
    p.expect_sym(")")?;
    p.end()?;
    Ok(Schema {
        name: name.value,
        attrs,
    })
}

struct RawEntry {
    time: VersionId,
    txn: TxnId,
    line: usize,
    stmt_col: usize,
    stmt: String,
    sql: SqlStmt,
    refs: Vec<Spanned<String>>,
}

pub fn parse_log(text: &str) -> Result<ParsedLog, AuditError> {
    let mut schemas: Vec<Arc<Schema>> = Vec::new();
    let mut raw: Vec<RawEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks = lex(line, lineno)?;
        if toks.len() == 1 {
            continue;
        }
        let mut p = Parser {
            toks,
            pos: 0,
            line: lineno,
            refs: Vec::new(),
            prov_cols: false,
        };
        if p.is_kw("TABLE") {
            if !raw.is_empty() {
                return Err(p.err("a log entry (TABLE declarations must precede entries)"));
            }
            let col = p.col();
            let s = parse_table(&mut p)?;
            if schemas.iter().any(|x| x.name == s.name) {
                return Err(AuditError::new(
                    AuditErrorKind::SyntaxError,
                    lineno,
                    col,
                    format!("table `{}` declared twice", s.name),
                ));
            }
            schemas.push(Arc::new(s));
            continue;
        }
        let tcol = p.col();
        let time = p.int()?;
        let time = VersionId::try_from(time)
            .ok()
            .filter(|t| *t > 0)
            .ok_or_else(|| AuditError::new(AuditErrorKind::SyntaxError, lineno, tcol, "time must be in 1..2^32".into()))?;
        p.expect_sym("|")?;
        let txn = match p.peek().clone() {
            Tok::Ident(s) if (s.starts_with('T') || s.starts_with('t')) && s.len() > 1 => {
                let n: u32 = s[1..].parse().map_err(|_| p.err("transaction id `T<n>`"))?;
                p.bump();
                TxnId(n)
            }
            _ => return Err(p.err("transaction id `T<n>`")),
        };
        p.expect_sym("|")?;
        let stmt_col = p.col();
        let sql = p.stmt()?;
        let stmt: String = line.chars().skip(stmt_col - 1).collect::<String>();
        let stmt = stmt.split("--").next().unwrap_or("").trim().trim_end_matches(';').trim_end().to_string();
        raw.push(RawEntry {
            time,
            txn,
            line: lineno,
            stmt_col,
            stmt,
            sql,
            refs: p.refs,
        });
    }

    raw.sort_by_key(|e| (e.time, e.line));
    for w in raw.windows(2) {
        if w[0].time == w[1].time {
            return Err(AuditError::new(
                AuditErrorKind::DuplicateTimestamp,
                w[1].line,
                1,
                format!("time {} already used on line {}", w[1].time, w[0].line),
            ));
        }
    }
    let mut lowerer = Lowerer::new(schemas.clone());
    let mut committed: BTreeMap<TxnId, usize> = BTreeMap::new();
    let mut last_line: BTreeMap<TxnId, usize> = BTreeMap::new();
    let mut history = History::new(schemas.clone(), BaseSemiring::ProvPoly);
    let mut entries = Vec::new();
    for e in raw {
        if let Some(cl) = committed.get(&e.txn) {
            return Err(AuditError::new(
                AuditErrorKind::StatementAfterCommit,
                e.line,
                e.stmt_col,
                format!("{} committed on line {cl}", e.txn),
            ));
        }
        let parsed = lowerer.lower(&e.sql, &e.refs, e.txn, e.time, e.line, e.stmt_col)?;
        if matches!(e.sql, SqlStmt::Commit) {
            committed.insert(e.txn, e.line);
        }
        last_line.insert(e.txn, e.line);
        if let Some(op) = &parsed {
            history.push(op.clone());
        }
        entries.push(AuditEntry {
            time: e.time,
            txn: e.txn,
            line: e.line,
            stmt: e.stmt,
            sql: e.sql,
            parsed,
        });
    }
    for (t, l) in &last_line {
        if !committed.contains_key(t) {
            return Err(AuditError::new(
                AuditErrorKind::UncommittedTransaction,
                *l,
                1,
                format!("{t} has no COMMIT"),
            ));
        }
    }
    Ok(ParsedLog {
        schemas,
        entries,
        history,
    })
}

/// Renders one operation as SQL. Fails for insert plans that have no SQL form
/// in the supported subset.
pub fn op_to_sql(op: &UpdateOp, schemas: &[Arc<Schema>]) -> Result<String, String> {
    let schema = |rel: &str| {
        schemas
            .iter()
            .find(|s| s.name == rel)
            .cloned()
            .ok_or_else(|| format!("unknown relation `{rel}`"))
    };
    let where_clause = |c: &Condition| match c {
        Condition::True => String::new(),
        c => format!(" WHERE {c}"),
    };
    Ok(match &op.kind {
        OpKind::Commit => "COMMIT".to_string(),
        OpKind::Delete { rel, cond } => format!("DELETE FROM {rel}{}", where_clause(cond)),
        OpKind::Update { rel, cond, exprs } => {
            let mut sets: Vec<String> = exprs
                .iter()
                .filter(|(e, n)| !matches!(e, ScalarExpr::Attr(a) if a == n))
                .map(|(e, n)| format!("{n} = {e}"))
                .collect();
            if sets.is_empty() {
                let (_, n) = exprs.first().ok_or("update without attributes")?;
                sets.push(format!("{n} = {n}"));
            }
            format!("UPDATE {rel} SET {}{}", sets.join(", "), where_clause(cond))
        }
        OpKind::Insert { rel, query } => {
            let s = schema(rel)?;
            let cols: Vec<&str> = s.attr_names().collect();
            if let Some(rows) = values_rows(query) {
                let rows: Vec<String> = rows
                    .iter()
                    .map(|t| {
                        let vals: Vec<String> = t.0.iter().map(|v| v.to_string()).collect();
                        format!("({})", vals.join(", "))
                    })
                    .collect();
                format!("INSERT INTO {rel} ({}) VALUES {}", cols.join(", "), rows.join(", "))
            } else if let QueryPlan::Project { exprs, input } = query.as_ref() {
                let (cond, from) = match input.as_ref() {
                    QueryPlan::Select { cond, input } => match input.as_ref() {
                        QueryPlan::BaseRel {
                            name,
                            version: VersionRef::Current,
                        } => (cond.clone(), name.clone()),
                        _ => return Err("insert query has no SQL form".into()),
                    },
                    QueryPlan::BaseRel {
                        name,
                        version: VersionRef::Current,
                    } => (Condition::True, name.clone()),
                    _ => return Err("insert query has no SQL form".into()),
                };
                let items: Vec<String> = exprs.iter().map(|(e, _)| e.to_string()).collect();
                let names: Vec<&str> = exprs.iter().map(|(_, n)| n.as_str()).collect();
                format!(
                    "INSERT INTO {rel} ({}) SELECT {} FROM {from}{}",
                    names.join(", "),
                    items.join(", "),
                    where_clause(&cond)
                )
            } else {
                return Err("insert query has no SQL form".into());
            }
        }
    })
}

fn values_rows(p: &QueryPlan) -> Option<Vec<Tuple>> {
    match p {
        QueryPlan::Singleton { tuple, .. } => Some(vec![tuple.clone()]),
        QueryPlan::Union { left, right } => {
            let mut l = values_rows(left)?;
            l.extend(values_rows(right)?);
            Some(l)
        }
        _ => None,
    }
}

/// Renders a history as a log. The result parses back to the same history
/// when the history's constant rows carry the variables the parser would
/// assign (as histories built through [`Lowerer`] do).
pub fn serialize_log(h: &History) -> Result<String, String> {
    let mut out = String::new();
    for s in &h.schemas {
        let cols: Vec<String> = s.attrs.iter().map(|(n, t)| format!("{n} {}", t.sql_name())).collect();
        out.push_str(&format!("TABLE {}({})\n", s.name, cols.join(", ")));
    }
    for op in h.ops_by_time() {
        out.push_str(&format!("{} | {} | {};\n", op.time, op.txn, op_to_sql(op, &h.schemas)?));
    }
    Ok(out)
}

/// Parses a single statement against `lowerer`'s schemas; used by tools that
/// build histories one statement at a time.
pub fn lower_statement(
    lowerer: &mut Lowerer,
    sql: &str,
    txn: TxnId,
    time: VersionId,
) -> Result<Option<UpdateOp>, AuditError> {
    let mut p = Parser {
        toks: lex(sql, 1)?,
        pos: 0,
        line: 1,
        refs: Vec::new(),
        prov_cols: false,
    };
    let stmt = p.stmt()?;
    let refs = std::mem::take(&mut p.refs);
    lowerer.lower(&stmt, &refs, txn, time, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMPLOYEES: &str = "\
TABLE Employee(ID INT, Name STRING, Position STRING)
TABLE Bonus(ID INT, EmpID INT, Amount INT)
20 | T7 | UPDATE Employee SET Position = 'Software Architect' WHERE ID = 101;
21 | T7 | UPDATE Bonus SET Amount = Amount + 1000 WHERE EmpID = 101;
22 | T8 | INSERT INTO Bonus (EmpID, Amount) (SELECT ID, 500 FROM Employee WHERE Position = 'Software Engineer');
23 | T8 | COMMIT;
24 | T7 | SELECT Amount INTO amounts FROM Bonus WHERE ID = 101;
25 | T7 | COMMIT;
";

    #[test]
    fn parses_the_example_shape() {
        let log = parse_log(EMPLOYEES).unwrap();
        assert_eq!(log.entries.len(), 6);
        assert!(log.entries[4].parsed.is_none());
        let h = &log.history;
        let t7 = h.transaction(TxnId(7)).unwrap();
        let times: Vec<u32> = t7.ops.iter().map(|o| o.time).collect();
        assert_eq!(times, vec![20, 21, 25]);
        assert_eq!(h.transaction(TxnId(8)).unwrap().ops.len(), 2);
        match &t7.ops[1].kind {
            OpKind::Update { rel, cond, exprs } => {
                assert_eq!(rel, "Bonus");
                assert_eq!(cond.to_string(), "EmpID = 101");
                assert_eq!(exprs[0].0, ScalarExpr::attr("ID"));
                assert_eq!(exprs[2].0.to_string(), "Amount + 1000");
            }
            k => panic!("unexpected {k:?}"),
        }
        let again = parse_log(&serialize_log(h).unwrap()).unwrap().history;
        assert_eq!(&again, h);
    }

    #[test]
    fn empty_log() {
        let log = parse_log("").unwrap();
        assert!(log.history.transactions.is_empty());
        assert_eq!(serialize_log(&log.history).unwrap(), "");
    }

    #[test]
    fn positioned_errors() {
        let base = "TABLE R(A INT, B STRING)\n";
        let cases = [
            ("1 | T1 | UPDATE R SET A = WHERE A = 1;", AuditErrorKind::SyntaxError, 1, 27),
            ("1 | T1 | DELETE FROM S WHERE A = 1;", AuditErrorKind::UnknownTable, 1, 22),
            ("1 | T1 | DELETE FROM R WHERE C = 1;", AuditErrorKind::UnknownColumn, 1, 30),
            ("1 | T1 | DELETE FROM R WHERE B = 1;", AuditErrorKind::TypeMismatch, 1, 10),
            ("1 | T1 | COMMIT;\n1 | T2 | COMMIT;", AuditErrorKind::DuplicateTimestamp, 2, 1),
            ("1 | T1 | COMMIT;\n2 | T1 | COMMIT;", AuditErrorKind::StatementAfterCommit, 2, 10),
            ("1 | T1 | DELETE FROM R;", AuditErrorKind::UncommittedTransaction, 1, 1),
            ("1 | T1 | INSERT INTO R VALUES ('x', 1);", AuditErrorKind::TypeMismatch, 1, 31),
            ("1 | T1 | DELETE FROM R WHERE B = 'abc;", AuditErrorKind::SyntaxError, 1, 34),
        ];
        for (text, kind, line, col) in cases {
            let e = parse_log(&format!("{base}{text}")).unwrap_err();
            assert_eq!((e.kind, e.line - 1, e.column), (kind, line, col), "{text}: {e}");
        }
    }

    #[test]
    fn condition_round_trip() {
        for text in [
            "(A + 1) * 2 = 3",
            "NOT (A = 1 OR B = 2) AND C <> 3",
            "A - (1 - 2) >= -4",
            "TRUE",
            "U2 = true",
            "(A = 1)",
            "P(Bonus,Amount) >= 1000 AND U2 = true",
        ] {
            let c = parse_condition(text).unwrap();
            assert_eq!(parse_condition(&c.to_string()).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn sequence_defaults() {
        let log = parse_log(
            "TABLE B(ID INT, N STRING)\n1 | T1 | INSERT INTO B VALUES (3, 'a');\n2 | T1 | INSERT INTO B (N) VALUES ('b'), ('c');\n3 | T1 | COMMIT;",
        )
        .unwrap();
        let text = serialize_log(&log.history).unwrap();
        assert!(text.contains("VALUES (4, 'b'), (5, 'c')"), "{text}");
    }
}
