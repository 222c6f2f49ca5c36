//! Parser for the budgeted aggregate-join query language.
//!
//! Grammar (case-insensitive keywords):
//!
//! ```text
//! query  = "SELECT" agg "(" expr ")" "FROM" inputs "WHERE" chain [budget]
//! agg    = "SUM" | "AVG" | "COUNT" | "STDEV"
//! expr   = ref { "+" ref }
//! ref    = ident "." ident
//! inputs = ident { "," ident }
//! chain  = ref "=" ref { "=" ref }
//! budget = "WITHIN" number "SECONDS"
//!        | "ERROR" number "CONFIDENCE" number "%"
//! number = digits [ "." digits ]
//! ```
//!
//! Every WHERE equality must chain over one join attribute, every value
//! reference must name a listed input, and at most one budget clause is
//! accepted; a missing budget clause means an exact run.

use crate::budget::{BudgetMode, QueryBudget};
use crate::estimator::AggFn;
use crate::hashing::fnv1a64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("syntax error at {line}:{col}: expected {expected}, found `{found}`")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
        found: String,
    },
    #[error("semantic error: {0}")]
    Semantic(String),
}

/// One `dataset.attribute` reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueRef {
    pub dataset: String,
    pub attribute: String,
}

/// A parsed query: aggregate over a sum of per-dataset value references,
/// joined on a single attribute, under an optional budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuery {
    pub aggregate: AggFn,
    pub expr: Vec<ValueRef>,
    pub inputs: Vec<String>,
    pub join_attribute: String,
    pub budget: QueryBudget<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokKind {
    Ident,
    Number,
    LParen,
    RParen,
    Comma,
    Dot,
    Eq,
    Plus,
    Percent,
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    text: String,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Tok>, QueryError> {
    let mut toks = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        let mut advance = |chars: &mut std::iter::Peekable<std::str::Chars>| {
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        if c.is_whitespace() {
            advance(&mut chars);
            continue;
        }
        let kind = match c {
            '(' => Some(TokKind::LParen),
            ')' => Some(TokKind::RParen),
            ',' => Some(TokKind::Comma),
            '.' => Some(TokKind::Dot),
            '=' => Some(TokKind::Eq),
            '+' => Some(TokKind::Plus),
            '%' => Some(TokKind::Percent),
            _ => None,
        };
        if let Some(kind) = kind {
            let c = advance(&mut chars);
            toks.push(Tok {
                kind,
                text: c.to_string(),
                line: tline,
                col: tcol,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let mut text = String::new();
            while matches!(chars.peek(), Some(d) if d.is_ascii_digit()) {
                text.push(advance(&mut chars));
            }
            // A fraction only if a digit follows the dot, so `R1.V` lexes as
            // ident, dot, ident.
            let mut look = chars.clone();
            if look.next() == Some('.') && matches!(look.next(), Some(d) if d.is_ascii_digit()) {
                text.push(advance(&mut chars));
                while matches!(chars.peek(), Some(d) if d.is_ascii_digit()) {
                    text.push(advance(&mut chars));
                }
            }
            toks.push(Tok {
                kind: TokKind::Number,
                text,
                line: tline,
                col: tcol,
            });
            continue;
        }
        if c.is_alphanumeric() || c == '_' {
            let mut text = String::new();
            while matches!(chars.peek(), Some(d) if d.is_alphanumeric() || *d == '_') {
                text.push(advance(&mut chars));
            }
            toks.push(Tok {
                kind: TokKind::Ident,
                text,
                line: tline,
                col: tcol,
            });
            continue;
        }
        return Err(QueryError::Syntax {
            line: tline,
            col: tcol,
            expected: "a token".into(),
            found: c.to_string(),
        });
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    end_line: usize,
    end_col: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn err_expected(&self, expected: &str) -> QueryError {
        match self.peek() {
            Some(t) => QueryError::Syntax {
                line: t.line,
                col: t.col,
                expected: expected.into(),
                found: t.text.clone(),
            },
            None => QueryError::Syntax {
                line: self.end_line,
                col: self.end_col,
                expected: expected.into(),
                found: "end of input".into(),
            },
        }
    }

    fn next(&mut self, kind: TokKind, expected: &str) -> Result<Tok, QueryError> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                let t = t.clone();
                self.pos += 1;
                Ok(t)
            }
            _ => Err(self.err_expected(expected)),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), QueryError> {
        match self.peek() {
            Some(t) if t.kind == TokKind::Ident && t.text.eq_ignore_ascii_case(kw) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err_expected(&format!("keyword {kw}"))),
        }
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(t) if t.kind == TokKind::Ident && t.text.eq_ignore_ascii_case(kw))
    }

    fn ident(&mut self, expected: &str) -> Result<String, QueryError> {
        Ok(self.next(TokKind::Ident, expected)?.text)
    }

    fn number(&mut self, expected: &str) -> Result<f64, QueryError> {
        let t = self.next(TokKind::Number, expected)?;
        t.text.parse().map_err(|_| QueryError::Syntax {
            line: t.line,
            col: t.col,
            expected: expected.into(),
            found: t.text,
        })
    }

    fn value_ref(&mut self) -> Result<ValueRef, QueryError> {
        let dataset = self.ident("a dataset reference")?;
        self.next(TokKind::Dot, "`.`")?;
        let attribute = self.ident("an attribute name")?;
        Ok(ValueRef { dataset, attribute })
    }
}

/// Parse a query, reporting syntax errors with line/column positions and
/// semantic errors distinctly.
pub fn parse(text: &str) -> Result<ParsedQuery, QueryError> {
    let toks = lex(text)?;
    let lines = text.lines().count().max(1);
    let last_len = text.lines().last().map(|l| l.chars().count()).unwrap_or(0);
    let mut p = Parser {
        toks,
        pos: 0,
        end_line: lines,
        end_col: last_len + 1,
    };

    p.keyword("SELECT")?;
    let agg_tok = p.ident("an aggregate function (SUM, AVG, COUNT, STDEV)")?;
    let aggregate: AggFn = agg_tok.parse().map_err(|_| QueryError::Syntax {
        line: 0,
        col: 0,
        expected: "SUM, AVG, COUNT or STDEV".into(),
        found: agg_tok.clone(),
    })?;
    p.next(TokKind::LParen, "`(`")?;
    let mut expr = vec![p.value_ref()?];
    while p.peek().map(|t| t.kind) == Some(TokKind::Plus) {
        p.pos += 1;
        expr.push(p.value_ref()?);
    }
    p.next(TokKind::RParen, "`)`")?;

    p.keyword("FROM")?;
    let mut inputs = vec![p.ident("a dataset name")?];
    while p.peek().map(|t| t.kind) == Some(TokKind::Comma) {
        p.pos += 1;
        inputs.push(p.ident("a dataset name")?);
    }

    p.keyword("WHERE")?;
    let first = p.value_ref()?;
    let mut chain = vec![first];
    p.next(TokKind::Eq, "`=`")?;
    chain.push(p.value_ref()?);
    while p.peek().map(|t| t.kind) == Some(TokKind::Eq) {
        p.pos += 1;
        chain.push(p.value_ref()?);
    }

    let mut budget: Option<QueryBudget<f64>> = None;
    loop {
        if p.peek_keyword("WITHIN") {
            p.pos += 1;
            if budget.is_some() {
                return Err(QueryError::Semantic(
                    "only one budget clause is allowed (WITHIN or ERROR, not both)".into(),
                ));
            }
            let seconds = p.number("a latency in seconds")?;
            p.keyword("SECONDS")?;
            budget = Some(QueryBudget::latency(seconds));
        } else if p.peek_keyword("ERROR") {
            p.pos += 1;
            if budget.is_some() {
                return Err(QueryError::Semantic(
                    "only one budget clause is allowed (WITHIN or ERROR, not both)".into(),
                ));
            }
            let err = p.number("an error bound")?;
            p.keyword("CONFIDENCE")?;
            let pct = p.number("a confidence percentage")?;
            p.next(TokKind::Percent, "`%`")?;
            if !(0.0 < pct && pct < 100.0) {
                return Err(QueryError::Semantic(format!(
                    "confidence {pct}% outside (0, 100)"
                )));
            }
            budget = Some(QueryBudget::error_bound(err).with_confidence(pct / 100.0));
        } else {
            break;
        }
    }
    if let Some(t) = p.peek() {
        return Err(QueryError::Syntax {
            line: t.line,
            col: t.col,
            expected: "end of query".into(),
            found: t.text.clone(),
        });
    }

    // Semantic checks.
    let query = ParsedQuery {
        aggregate,
        expr,
        inputs,
        join_attribute: chain[0].attribute.clone(),
        budget: budget.unwrap_or_else(QueryBudget::exact),
    };
    if query.inputs.len() < 2 {
        return Err(QueryError::Semantic(
            "a join needs at least two inputs".into(),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for name in &query.inputs {
        if !seen.insert(name.clone()) {
            return Err(QueryError::Semantic(format!(
                "duplicate input `{name}` in FROM"
            )));
        }
    }
    let mut expr_seen = std::collections::BTreeSet::new();
    for r in &query.expr {
        if !query.inputs.contains(&r.dataset) {
            return Err(QueryError::Semantic(format!(
                "expression references unknown dataset `{}`",
                r.dataset
            )));
        }
        if !expr_seen.insert(r.dataset.clone()) {
            return Err(QueryError::Semantic(format!(
                "dataset `{}` referenced more than once in the aggregate expression",
                r.dataset
            )));
        }
    }
    let mut chain_seen = std::collections::BTreeSet::new();
    for r in &chain {
        if r.attribute != query.join_attribute {
            return Err(QueryError::Semantic(format!(
                "mixed join attributes `{}` and `{}`; the equality chain must use one attribute",
                query.join_attribute, r.attribute
            )));
        }
        if !query.inputs.contains(&r.dataset) {
            return Err(QueryError::Semantic(format!(
                "WHERE references unknown dataset `{}`",
                r.dataset
            )));
        }
        if !chain_seen.insert(r.dataset.clone()) {
            return Err(QueryError::Semantic(format!(
                "dataset `{}` appears twice in the join chain",
                r.dataset
            )));
        }
    }
    for name in &query.inputs {
        if !chain_seen.contains(name) {
            return Err(QueryError::Semantic(format!(
                "input `{name}` is missing from the join chain"
            )));
        }
    }
    Ok(query)
}

/// Deterministic canonical text for a parsed query (input order preserved,
/// single spacing, uppercase keywords): `parse(render(q)) == q`.
pub fn render(q: &ParsedQuery) -> String {
    let expr = q
        .expr
        .iter()
        .map(|r| format!("{}.{}", r.dataset, r.attribute))
        .collect::<Vec<_>>()
        .join(" + ");
    let inputs = q.inputs.join(", ");
    let chain = q
        .inputs
        .iter()
        .map(|d| format!("{}.{}", d, q.join_attribute))
        .collect::<Vec<_>>()
        .join(" = ");
    let budget = match q.budget.mode {
        BudgetMode::Latency { d_desired } => format!(" WITHIN {d_desired} SECONDS"),
        BudgetMode::ErrorBound { err_desired } => {
            format!(
                " ERROR {err_desired} CONFIDENCE {}%",
                q.budget.confidence * 100.0
            )
        }
        BudgetMode::Exact => String::new(),
    };
    format!(
        "SELECT {}({expr}) FROM {inputs} WHERE {chain}{budget}",
        q.aggregate
    )
}

/// Stable 64-bit fingerprint of a query body. Inputs are sorted and case is
/// normalized so formatting and input order do not matter; the budget is
/// excluded so one query shares its sigma history across budgets.
pub fn fingerprint(q: &ParsedQuery) -> u64 {
    let mut inputs: Vec<String> = q.inputs.iter().map(|s| s.to_ascii_uppercase()).collect();
    inputs.sort();
    let mut expr: Vec<String> = q
        .expr
        .iter()
        .map(|r| {
            format!(
                "{}.{}",
                r.dataset.to_ascii_uppercase(),
                r.attribute.to_ascii_uppercase()
            )
        })
        .collect();
    expr.sort();
    let canonical = format!(
        "{}|{}|{}|{}",
        q.aggregate,
        expr.join("+"),
        inputs.join(","),
        q.join_attribute.to_ascii_uppercase()
    );
    fnv1a64(canonical.as_bytes())
}
