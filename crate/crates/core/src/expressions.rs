//! State and metrics expressions.
//!
//! State expressions count jobs of the asserting resource by phase:
//!
//! ```text
//! .state.failed() > 4
//! (.state.running() >= 2) AND (.state.failed() == 0)
//! .action.masters.state.success() == 4      # scoped reference, top level only
//! .state.phase() != "Failed"
//! ```
//!
//! Metrics expressions follow the alert-rule form
//! `REDUCER() QUERY(metric, offset, now) IS COND(args)`, where thresholds may
//! reference checkpoint values: `IS ABOVE(CHECKPOINT(maxSeen.goroutines) * 1.2)`.
//! An expression is a metrics expression iff it contains a `QUERY` term.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Finding, Severity};
use crate::lifecycle::{aggregate_phase, FailureClass, NodeKind, Phase, ResourceTree};
use crate::telemetry::MetricPoint;
use crate::time::{parse_duration, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    State,
    Metrics,
}

/// Raw expression text as written in a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpressionSource {
    pub text: String,
}

impl ExpressionSource {
    pub fn new(text: impl Into<String>) -> Self {
        ExpressionSource { text: text.into() }
    }

    pub fn flavor(&self) -> Flavor {
        let mut lexer = Lexer::new(&self.text);
        while let Ok(Some(tok)) = lexer.next_token() {
            if matches!(&tok.kind, TokenKind::Word(w) if w == "QUERY") {
                return Flavor::Metrics;
            }
        }
        Flavor::State
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("expression syntax error at {position}: {message}")]
pub struct ExprSyntaxError {
    /// Character offset into the source text.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unknown metric: {0}")]
    UnknownMetric(String),
    #[error("unknown checkpoint value: {0}")]
    UnknownCheckpoint(String),
    #[error("empty range: {low} is not below {high}")]
    EmptyRange { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    State(StateExpr),
    Metrics(MetricsExpr),
}

impl Expression {
    pub fn flavor(&self) -> Flavor {
        match self {
            Expression::State(_) => Flavor::State,
            Expression::Metrics(_) => Flavor::Metrics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggFn {
    Failed,
    Running,
    Success,
    Pending,
    All,
    /// Aggregate phase of the scope; only comparable to a phase name.
    Phase,
}

impl AggFn {
    fn parse(word: &str) -> Option<AggFn> {
        Some(match word {
            "failed" => AggFn::Failed,
            "running" => AggFn::Running,
            "success" => AggFn::Success,
            "pending" => AggFn::Pending,
            "all" => AggFn::All,
            "phase" => AggFn::Phase,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Aggregation {
    /// `None` for the asserting resource's own scope.
    pub scope: Option<String>,
    pub func: AggFn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl Comparator {
    fn apply<T: PartialOrd>(self, a: T, b: T) -> bool {
        match self {
            Comparator::Lt => a < b,
            Comparator::Le => a <= b,
            Comparator::Gt => a > b,
            Comparator::Ge => a >= b,
            Comparator::Eq => a == b,
            Comparator::Ne => a != b,
        }
    }

    fn mirrored(self) -> Comparator {
        match self {
            Comparator::Lt => Comparator::Gt,
            Comparator::Le => Comparator::Ge,
            Comparator::Gt => Comparator::Lt,
            Comparator::Ge => Comparator::Le,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Literal {
    Int(i64),
    Phase(Phase),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateExpr {
    /// Normalized so the aggregation is always on the left.
    Compare {
        agg: Aggregation,
        op: Comparator,
        literal: Literal,
    },
    And(Box<StateExpr>, Box<StateExpr>),
    Or(Box<StateExpr>, Box<StateExpr>),
    Not(Box<StateExpr>),
}

impl StateExpr {
    /// Scoped references (`.action.<name>.state...`) in the expression.
    pub fn scope_refs(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs(&self, out: &mut Vec<String>) {
        match self {
            StateExpr::Compare { agg, .. } => {
                if let Some(s) = &agg.scope {
                    if !out.contains(s) {
                        out.push(s.clone());
                    }
                }
            }
            StateExpr::And(a, b) | StateExpr::Or(a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
            StateExpr::Not(a) => a.collect_refs(out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reducer {
    Max,
    Min,
    Avg,
    Sum,
    Last,
    Count,
}

impl Reducer {
    pub const ALL: [Reducer; 6] = [
        Reducer::Max,
        Reducer::Min,
        Reducer::Avg,
        Reducer::Sum,
        Reducer::Last,
        Reducer::Count,
    ];

    fn parse(word: &str) -> Option<Reducer> {
        Some(match word {
            "MAX" => Reducer::Max,
            "MIN" => Reducer::Min,
            "AVG" => Reducer::Avg,
            "SUM" => Reducer::Sum,
            "LAST" => Reducer::Last,
            "COUNT" => Reducer::Count,
            _ => return None,
        })
    }

    /// `None` on an empty window.
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        let last = *values.last()?;
        Some(match self {
            Reducer::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reducer::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Reducer::Sum => values.iter().sum(),
            Reducer::Avg => values.iter().sum::<f64>() / values.len() as f64,
            Reducer::Last => last,
            Reducer::Count => values.len() as f64,
        })
    }
}

impl fmt::Display for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reducer::Max => "MAX",
            Reducer::Min => "MIN",
            Reducer::Avg => "AVG",
            Reducer::Sum => "SUM",
            Reducer::Last => "LAST",
            Reducer::Count => "COUNT",
        };
        f.write_str(s)
    }
}

/// `REDUCER() QUERY(metric, offset, now)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsQuery {
    pub reducer: Reducer,
    pub metric: String,
    pub offset: Duration,
}

impl MetricsQuery {
    pub fn window(&self, now: Timestamp) -> (Timestamp, Timestamp) {
        (now.saturating_sub(self.offset), now)
    }

    pub fn reduce(&self, store: &dyn MetricsSource, now: Timestamp) -> Result<Option<f64>, EvalError> {
        let (from, to) = self.window(now);
        let series = store
            .query(&self.metric, from, to)
            .map_err(|_| EvalError::UnknownMetric(self.metric.clone()))?;
        let values: Vec<f64> = series.iter().map(|p| p.value).collect();
        Ok(self.reducer.apply(&values))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdBase {
    Number(f64),
    Checkpoint { name: String, key: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub base: ThresholdBase,
    pub factor: Option<f64>,
}

impl Threshold {
    fn resolve(&self, checkpoints: &dyn CheckpointLookup) -> Result<f64, EvalError> {
        let base = match &self.base {
            ThresholdBase::Number(v) => *v,
            ThresholdBase::Checkpoint { name, key } => checkpoints
                .checkpoint_value(name, key)
                .ok_or_else(|| EvalError::UnknownCheckpoint(format!("{name}.{key}")))?,
        };
        Ok(base * self.factor.unwrap_or(1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Above(Threshold),
    Below(Threshold),
    Within(Threshold, Threshold),
    Outside(Threshold, Threshold),
}

impl Condition {
    fn thresholds(&self) -> Vec<&Threshold> {
        match self {
            Condition::Above(t) | Condition::Below(t) => vec![t],
            Condition::Within(a, b) | Condition::Outside(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsExpr {
    pub query: MetricsQuery,
    pub condition: Condition,
}

impl MetricsExpr {
    /// `(checkpoint, key)` pairs referenced by thresholds.
    pub fn checkpoint_refs(&self) -> Vec<(String, String)> {
        self.condition
            .thresholds()
            .into_iter()
            .filter_map(|t| match &t.base {
                ThresholdBase::Checkpoint { name, key } => Some((name.clone(), key.clone())),
                ThresholdBase::Number(_) => None,
            })
            .collect()
    }
}

/// Read access to stored series.
pub trait MetricsSource {
    fn query(&self, name: &str, from: Timestamp, to: Timestamp) -> Result<Vec<MetricPoint>, UnknownMetric>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown metric: {0}")]
pub struct UnknownMetric(pub String);

pub trait CheckpointLookup {
    fn checkpoint_value(&self, name: &str, key: &str) -> Option<f64>;
}

/// Checkpoint values keyed by `(checkpoint, key)`.
impl CheckpointLookup for BTreeMap<(String, String), f64> {
    fn checkpoint_value(&self, name: &str, key: &str) -> Option<f64> {
        self.get(&(name.to_string(), key.to_string())).copied()
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Word(String),
    Number(f64),
    /// Number immediately followed by a unit, e.g. `5m`.
    Duration(String),
    Str(String),
    Dot,
    Comma,
    Star,
    LParen,
    RParen,
    Cmp(Comparator),
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    kind: TokenKind,
    pos: usize,
}

struct Lexer<'a> {
    chars: Vec<char>,
    at: usize,
    _src: &'a str,
}

fn is_word_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == ':'
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            chars: src.chars().collect(),
            at: 0,
            _src: src,
        }
    }

    fn err<T>(&self, pos: usize, message: impl Into<String>) -> Result<T, ExprSyntaxError> {
        Err(ExprSyntaxError {
            position: pos,
            message: message.into(),
        })
    }

    fn peek_char(&self, offset: usize) -> Option<char> {
        self.chars.get(self.at + offset).copied()
    }

    fn next_token(&mut self) -> Result<Option<Token>, ExprSyntaxError> {
        while self.peek_char(0).is_some_and(char::is_whitespace) {
            self.at += 1;
        }
        let Some(c) = self.peek_char(0) else {
            return Ok(None);
        };
        let pos = self.at;
        let simple = |kind, len| (kind, len);
        let (kind, len) = match (c, self.peek_char(1)) {
            ('.', _) => simple(TokenKind::Dot, 1),
            (',', _) => simple(TokenKind::Comma, 1),
            ('*', _) => simple(TokenKind::Star, 1),
            ('(', _) => simple(TokenKind::LParen, 1),
            (')', _) => simple(TokenKind::RParen, 1),
            ('<', Some('=')) => simple(TokenKind::Cmp(Comparator::Le), 2),
            ('>', Some('=')) => simple(TokenKind::Cmp(Comparator::Ge), 2),
            ('=', Some('=')) => simple(TokenKind::Cmp(Comparator::Eq), 2),
            ('!', Some('=')) => simple(TokenKind::Cmp(Comparator::Ne), 2),
            ('<', _) => simple(TokenKind::Cmp(Comparator::Lt), 1),
            ('>', _) => simple(TokenKind::Cmp(Comparator::Gt), 1),
            ('"', _) => return self.string(pos).map(Some),
            (c, _) if c.is_ascii_digit() => return self.number(pos).map(Some),
            ('-', Some(d)) if d.is_ascii_digit() => return self.number(pos).map(Some),
            (c, _) if is_word_start(c) => {
                let mut end = self.at;
                while self.chars.get(end).is_some_and(|c| is_word_char(*c)) {
                    end += 1;
                }
                let word: String = self.chars[self.at..end].iter().collect();
                let len = end - self.at;
                (TokenKind::Word(word), len)
            }
            (c, _) => return self.err(pos, format!("unexpected character {c:?}")),
        };
        self.at += len;
        Ok(Some(Token { kind, pos }))
    }

    fn string(&mut self, pos: usize) -> Result<Token, ExprSyntaxError> {
        self.at += 1;
        let start = self.at;
        while let Some(c) = self.peek_char(0) {
            if c == '"' {
                let text: String = self.chars[start..self.at].iter().collect();
                self.at += 1;
                return Ok(Token {
                    kind: TokenKind::Str(text),
                    pos,
                });
            }
            self.at += 1;
        }
        self.err(pos, "unterminated string literal")
    }

    fn number(&mut self, pos: usize) -> Result<Token, ExprSyntaxError> {
        let start = self.at;
        if self.peek_char(0) == Some('-') {
            self.at += 1;
        }
        while self.peek_char(0).is_some_and(|c| c.is_ascii_digit() || c == '.') {
            self.at += 1;
        }
        if matches!(self.peek_char(0), Some('e' | 'E'))
            && self
                .peek_char(1)
                .is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '+')
        {
            self.at += 2;
            while self.peek_char(0).is_some_and(|c| c.is_ascii_digit()) {
                self.at += 1;
            }
        }
        if self.peek_char(0).is_some_and(|c| c.is_ascii_alphabetic()) {
            // duration such as 5m or 1h30m
            while self.peek_char(0).is_some_and(|c| c.is_ascii_alphanumeric()) {
                self.at += 1;
            }
            let text: String = self.chars[start..self.at].iter().collect();
            return Ok(Token {
                kind: TokenKind::Duration(text),
                pos,
            });
        }
        let text: String = self.chars[start..self.at].iter().collect();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Token {
                kind: TokenKind::Number(v),
                pos,
            }),
            _ => self.err(pos, format!("invalid number {text:?}")),
        }
    }

    fn tokenize(mut self) -> Result<(Vec<Token>, usize), ExprSyntaxError> {
        let mut out = Vec::new();
        while let Some(t) = self.next_token()? {
            out.push(t);
        }
        Ok((out, self.chars.len()))
    }
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    end: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ExprSyntaxError> {
        let (tokens, end) = Lexer::new(text).tokenize()?;
        Ok(Parser { tokens, at: 0, end })
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.at).map_or(self.end, |t| t.pos)
    }

    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.at).map(|t| &t.kind)
    }

    fn bump(&mut self) -> Option<TokenKind> {
        let t = self.tokens.get(self.at).map(|t| t.kind.clone());
        self.at += 1;
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprSyntaxError> {
        Err(ExprSyntaxError {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn expect(&mut self, want: TokenKind, what: &str) -> Result<(), ExprSyntaxError> {
        if self.peek() == Some(&want) {
            self.at += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn expect_word(&mut self, want: &str) -> Result<(), ExprSyntaxError> {
        match self.peek() {
            Some(TokenKind::Word(w)) if w == want => {
                self.at += 1;
                Ok(())
            }
            _ => self.err(format!("expected {want}")),
        }
    }

    fn word(&mut self, what: &str) -> Result<String, ExprSyntaxError> {
        match self.peek() {
            Some(TokenKind::Word(w)) => {
                let w = w.clone();
                self.at += 1;
                Ok(w)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    /// `word ('.' word)*`
    fn dotted(&mut self, what: &str) -> Result<Vec<String>, ExprSyntaxError> {
        let mut parts = vec![self.word(what)?];
        while self.peek() == Some(&TokenKind::Dot) {
            self.at += 1;
            parts.push(self.word(what)?);
        }
        Ok(parts)
    }

    fn finish(&self) -> Result<(), ExprSyntaxError> {
        if self.at < self.tokens.len() {
            self.err("unexpected trailing input")
        } else {
            Ok(())
        }
    }

    // state grammar ---------------------------------------------------------

    fn state_or(&mut self) -> Result<StateExpr, ExprSyntaxError> {
        let mut lhs = self.state_and()?;
        while matches!(self.peek(), Some(TokenKind::Word(w)) if w == "OR") {
            self.at += 1;
            let rhs = self.state_and()?;
            lhs = StateExpr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn state_and(&mut self) -> Result<StateExpr, ExprSyntaxError> {
        let mut lhs = self.state_not()?;
        while matches!(self.peek(), Some(TokenKind::Word(w)) if w == "AND") {
            self.at += 1;
            let rhs = self.state_not()?;
            lhs = StateExpr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn state_not(&mut self) -> Result<StateExpr, ExprSyntaxError> {
        if matches!(self.peek(), Some(TokenKind::Word(w)) if w == "NOT") {
            self.at += 1;
            return Ok(StateExpr::Not(Box::new(self.state_not()?)));
        }
        if self.peek() == Some(&TokenKind::LParen) {
            self.at += 1;
            let inner = self.state_or()?;
            self.expect(TokenKind::RParen, "')'")?;
            return Ok(inner);
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<StateExpr, ExprSyntaxError> {
        let start = self.pos();
        let left = self.operand()?;
        let op = match self.bump() {
            Some(TokenKind::Cmp(op)) => op,
            _ => {
                self.at -= 1;
                return self.err("expected comparator");
            }
        };
        let right = self.operand()?;
        let (agg, op, literal) = match (left, right) {
            (Operand::Agg(a), Operand::Lit(l)) => (a, op, l),
            (Operand::Lit(l), Operand::Agg(a)) => (a, op.mirrored(), l),
            _ => {
                return Err(ExprSyntaxError {
                    position: start,
                    message: "comparison must be between an aggregation and a literal".into(),
                })
            }
        };
        match (&agg.func, &literal) {
            (AggFn::Phase, Literal::Phase(_)) if matches!(op, Comparator::Eq | Comparator::Ne) => {}
            (AggFn::Phase, Literal::Phase(_)) => {
                return Err(ExprSyntaxError {
                    position: start,
                    message: "phase names only support == and !=".into(),
                })
            }
            (AggFn::Phase, Literal::Int(_)) | (_, Literal::Phase(_)) => {
                return Err(ExprSyntaxError {
                    position: start,
                    message: "phase() compares to phase names, counts compare to integers".into(),
                })
            }
            _ => {}
        }
        Ok(StateExpr::Compare { agg, op, literal })
    }

    fn operand(&mut self) -> Result<Operand, ExprSyntaxError> {
        let pos = self.pos();
        match self.peek() {
            Some(TokenKind::Number(v)) => {
                let v = *v;
                if v.fract() != 0.0 || v.abs() > i64::MAX as f64 {
                    return self.err("count literals must be integers");
                }
                self.at += 1;
                Ok(Operand::Lit(Literal::Int(v as i64)))
            }
            Some(TokenKind::Str(s)) => {
                let phase = Phase::parse(s).ok_or(ExprSyntaxError {
                    position: pos,
                    message: format!("unknown phase name {s:?}"),
                })?;
                self.at += 1;
                Ok(Operand::Lit(Literal::Phase(phase)))
            }
            Some(TokenKind::Dot) => self.aggregation().map(Operand::Agg),
            _ => self.err("expected aggregation or literal"),
        }
    }

    /// `.state.fn()` or `.action.<name>.state.fn()`
    fn aggregation(&mut self) -> Result<Aggregation, ExprSyntaxError> {
        self.expect(TokenKind::Dot, "'.'")?;
        let mut scope = None;
        let head = self.word("'state' or 'action'")?;
        if head == "action" {
            self.expect(TokenKind::Dot, "'.'")?;
            scope = Some(self.word("resource name")?);
            self.expect(TokenKind::Dot, "'.'")?;
            self.expect_word("state")?;
        } else if head != "state" {
            self.at -= 1;
            return self.err("expected 'state' or 'action'");
        }
        self.expect(TokenKind::Dot, "'.'")?;
        let fn_pos = self.pos();
        let name = self.word("aggregation function")?;
        let func = AggFn::parse(&name).ok_or(ExprSyntaxError {
            position: fn_pos,
            message: format!("unknown aggregation {name:?}"),
        })?;
        self.expect(TokenKind::LParen, "'('")?;
        if self.peek() != Some(&TokenKind::RParen) {
            return self.err("aggregations take no arguments");
        }
        self.at += 1;
        Ok(Aggregation { scope, func })
    }

    // metrics grammar -------------------------------------------------------

    fn metrics_query(&mut self) -> Result<MetricsQuery, ExprSyntaxError> {
        let pos = self.pos();
        let word = self.word("reducer")?;
        let reducer = Reducer::parse(&word).ok_or(ExprSyntaxError {
            position: pos,
            message: format!("unknown reducer {word:?}"),
        })?;
        self.expect(TokenKind::LParen, "'('")?;
        self.expect(TokenKind::RParen, "')'")?;
        self.expect_word("QUERY")?;
        self.expect(TokenKind::LParen, "'('")?;
        let metric = self.dotted("metric name")?.join(".");
        self.expect(TokenKind::Comma, "','")?;
        let pos = self.pos();
        let offset = match self.bump() {
            Some(TokenKind::Duration(text)) => parse_duration(&text).map_err(|e| ExprSyntaxError {
                position: pos,
                message: format!("invalid duration {text:?}: {e}"),
            })?,
            _ => {
                self.at -= 1;
                return self.err("expected duration such as 1m");
            }
        };
        if offset.is_zero() {
            return Err(ExprSyntaxError {
                position: pos,
                message: "query offset must be positive".into(),
            });
        }
        self.expect(TokenKind::Comma, "','")?;
        self.expect_word("now")?;
        self.expect(TokenKind::RParen, "')'")?;
        Ok(MetricsQuery {
            reducer,
            metric,
            offset,
        })
    }

    fn metrics(&mut self) -> Result<MetricsExpr, ExprSyntaxError> {
        let query = self.metrics_query()?;
        self.expect_word("IS")?;
        let pos = self.pos();
        let cond = self.word("condition")?;
        self.expect(TokenKind::LParen, "'('")?;
        let first = self.threshold()?;
        let condition = match cond.as_str() {
            "ABOVE" | "BELOW" => {
                if cond == "ABOVE" {
                    Condition::Above(first)
                } else {
                    Condition::Below(first)
                }
            }
            "WITHIN" | "OUTSIDE" => {
                self.expect(TokenKind::Comma, "','")?;
                let second = self.threshold()?;
                if let (ThresholdBase::Number(a), ThresholdBase::Number(b)) = (&first.base, &second.base) {
                    let (a, b) = (a * first.factor.unwrap_or(1.0), b * second.factor.unwrap_or(1.0));
                    if a >= b {
                        return Err(ExprSyntaxError {
                            position: pos,
                            message: format!("range bounds must satisfy {a} < {b}"),
                        });
                    }
                }
                if cond == "WITHIN" {
                    Condition::Within(first, second)
                } else {
                    Condition::Outside(first, second)
                }
            }
            other => {
                return Err(ExprSyntaxError {
                    position: pos,
                    message: format!("unknown condition {other:?}"),
                })
            }
        };
        self.expect(TokenKind::RParen, "')'")?;
        Ok(MetricsExpr { query, condition })
    }

    fn threshold(&mut self) -> Result<Threshold, ExprSyntaxError> {
        let base = match self.peek() {
            Some(TokenKind::Number(v)) => {
                let v = *v;
                self.at += 1;
                ThresholdBase::Number(v)
            }
            Some(TokenKind::Word(w)) if w == "CHECKPOINT" => {
                self.at += 1;
                self.expect(TokenKind::LParen, "'('")?;
                let pos = self.pos();
                let parts = self.dotted("checkpoint reference")?;
                if parts.len() < 2 {
                    return Err(ExprSyntaxError {
                        position: pos,
                        message: "checkpoint reference must be <name>.<key>".into(),
                    });
                }
                self.expect(TokenKind::RParen, "')'")?;
                ThresholdBase::Checkpoint {
                    name: parts[0].clone(),
                    key: parts[1..].join("."),
                }
            }
            _ => return self.err("expected number or CHECKPOINT(name.key)"),
        };
        let factor = if self.peek() == Some(&TokenKind::Star) {
            self.at += 1;
            match self.bump() {
                Some(TokenKind::Number(v)) => Some(v),
                _ => {
                    self.at -= 1;
                    return self.err("expected numeric factor");
                }
            }
        } else {
            None
        };
        Ok(Threshold { base, factor })
    }
}

enum Operand {
    Agg(Aggregation),
    Lit(Literal),
}

/// Parses either flavor, inferred from the presence of `QUERY`.
pub fn parse_expression(src: &ExpressionSource) -> Result<Expression, ExprSyntaxError> {
    let mut p = Parser::new(&src.text)?;
    if p.tokens.is_empty() {
        return p.err("empty expression");
    }
    let expr = match src.flavor() {
        Flavor::State => Expression::State(p.state_or()?),
        Flavor::Metrics => Expression::Metrics(p.metrics()?),
    };
    p.finish()?;
    Ok(expr)
}

/// Parses the condition-less form used by checkpoint values.
pub fn parse_reduction(text: &str) -> Result<MetricsQuery, ExprSyntaxError> {
    let mut p = Parser::new(text)?;
    let q = p.metrics_query()?;
    p.finish()?;
    Ok(q)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobState {
    pub name: String,
    pub phase: Phase,
    pub class: Option<FailureClass>,
}

/// Jobs visible to one resource's state assertions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScopeSnapshot {
    pub owner: String,
    pub jobs: Vec<JobState>,
    /// Scopes of descendants referenced through `.action.<name>`.
    pub nested: BTreeMap<String, Vec<JobState>>,
}

impl ScopeSnapshot {
    /// Captures `owner`'s own jobs plus the referenced scopes that lie
    /// within its reach. Anything else stays out of the snapshot.
    pub fn capture(tree: &ResourceTree, owner: &str, refs: &[String]) -> ScopeSnapshot {
        let Some(id) = tree.id(owner) else {
            return ScopeSnapshot {
                owner: owner.to_string(),
                ..Default::default()
            };
        };
        let mut nested = BTreeMap::new();
        for r in refs {
            if let Some(rid) = tree.id(r) {
                if scope_reachable(tree, id, rid) {
                    nested.insert(r.clone(), scope_jobs(tree, rid));
                }
            }
        }
        ScopeSnapshot {
            owner: owner.to_string(),
            jobs: scope_jobs(tree, id),
            nested,
        }
    }
}

fn scope_reachable(tree: &ResourceTree, owner: crate::lifecycle::NodeId, target: crate::lifecycle::NodeId) -> bool {
    tree.get(owner).kind == NodeKind::Scenario || tree.is_within(target, owner)
}

/// Jobs created by a resource: its children, or the service itself.
pub fn scope_jobs(tree: &ResourceTree, id: crate::lifecycle::NodeId) -> Vec<JobState> {
    let node = tree.get(id);
    let to_job = |n: &crate::lifecycle::ResourceNode| JobState {
        name: n.name.clone(),
        phase: n.phase,
        class: n.class,
    };
    if !node.children.is_empty() {
        tree.children(id).map(to_job).collect()
    } else if node.kind == NodeKind::Service {
        vec![to_job(node)]
    } else {
        Vec::new()
    }
}

fn count_jobs(jobs: &[JobState], func: AggFn) -> i64 {
    let want = match func {
        AggFn::Failed => Some(Phase::Failed),
        AggFn::Running => Some(Phase::Running),
        AggFn::Success => Some(Phase::Success),
        AggFn::Pending => Some(Phase::Pending),
        AggFn::All | AggFn::Phase => None,
    };
    jobs.iter().filter(|j| want.is_none_or(|p| j.phase == p)).count() as i64
}

pub fn eval_state(expr: &StateExpr, scope: &ScopeSnapshot) -> bool {
    match expr {
        StateExpr::Compare { agg, op, literal } => {
            let jobs = match &agg.scope {
                None => scope.jobs.as_slice(),
                Some(name) => scope.nested.get(name).map_or(&[][..], Vec::as_slice),
            };
            match (agg.func, literal) {
                (AggFn::Phase, Literal::Phase(want)) => {
                    let inputs: Vec<_> = jobs.iter().map(|j| (j.phase, j.class)).collect();
                    op.apply(aggregate_phase(&inputs, 0), *want)
                }
                (func, Literal::Int(k)) => op.apply(count_jobs(jobs, func), *k),
                (_, Literal::Phase(_)) => false,
            }
        }
        StateExpr::And(a, b) => eval_state(a, scope) && eval_state(b, scope),
        StateExpr::Or(a, b) => eval_state(a, scope) || eval_state(b, scope),
        StateExpr::Not(a) => !eval_state(a, scope),
    }
}

/// Evaluates an alert condition over `[now - offset, now]`.
///
/// An empty window never fires; a metric the store has never heard of is
/// an error.
pub fn eval_metrics(
    expr: &MetricsExpr,
    store: &dyn MetricsSource,
    now: Timestamp,
    checkpoints: &dyn CheckpointLookup,
) -> Result<bool, EvalError> {
    let Some(value) = expr.query.reduce(store, now)? else {
        return Ok(false);
    };
    Ok(match &expr.condition {
        Condition::Above(t) => value > t.resolve(checkpoints)?,
        Condition::Below(t) => value < t.resolve(checkpoints)?,
        Condition::Within(a, b) | Condition::Outside(a, b) => {
            let (low, high) = (a.resolve(checkpoints)?, b.resolve(checkpoints)?);
            if low >= high {
                return Err(EvalError::EmptyRange { low, high });
            }
            let inside = value > low && value < high;
            if matches!(expr.condition, Condition::Within(..)) {
                inside
            } else {
                value < low || value > high
            }
        }
    })
}

/// Flags state references that reach outside `owner`'s subtree.
///
/// Metrics expressions may look at any series and are never flagged.
pub fn check_scope(expr: &Expression, owner: &str, tree: &ResourceTree) -> Vec<Finding> {
    let Expression::State(state) = expr else {
        return Vec::new();
    };
    let mut findings = Vec::new();
    let Some(owner_id) = tree.id(owner) else {
        findings.push(Finding::error(owner, format!("unknown resource: {owner}")));
        return findings;
    };
    for r in state.scope_refs() {
        match tree.id(&r) {
            None => findings.push(Finding::error(owner, format!("unknown resource: {r}"))),
            Some(rid) if !scope_reachable(tree, owner_id, rid) => findings.push(Finding {
                severity: Severity::Error,
                location: owner.to_string(),
                message: format!("cross-reference from {owner} to jobs of {r}"),
            }),
            Some(_) => {}
        }
    }
    findings
}
