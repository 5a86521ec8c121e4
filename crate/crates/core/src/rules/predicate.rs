//! Record predicates and their s-expression syntax.
//!
//! ```text
//! pred    := 'always' | '(' form ')'
//! form    := 'always'
//!          | 'eq' FIELD LIT                 field equals a literal
//!          | 'in' FIELD '[' LIT (',' LIT)* ']'
//!          | 'marker' FIELD MARKER          MARKER = NO_EQUIPMENT | NOT_DONE
//!          | 'present' FIELD                field holds a reading (numeric, pair or text)
//!          | 'pair' FIELD NUM NUM           pair equals systolic/diastolic
//!          | 'pair-in' FIELD '[' '(' NUM ',' NUM ')' (',' ...)* ']'
//!          | 'and' pred+ | 'or' pred+ | 'not' pred
//!          | 'exists' pred                  some record of another patient in the
//!                                           same window satisfies pred
//! LIT     := number | "quoted text" | bare-word
//! ```
//!
//! Markers do not count as `present`: a `NO_EQUIPMENT` entry is not a reading.
//! Numeric comparisons snap the recorded value to the rule's granularity first.

use std::fmt;

use crate::data::{HealthRecord, Marker, MeasurementValue};

const EQ_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Text(String),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Text(t) if t.chars().all(is_atom_char) && !t.is_empty() && t.parse::<f64>().is_err() => {
                f.write_str(t)
            }
            Literal::Text(t) => write!(f, "{t:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Always,
    FieldEquals { field: String, value: Literal },
    FieldInSet { field: String, values: Vec<Literal> },
    FieldIsMarker { field: String, marker: Marker },
    FieldPresent { field: String },
    PairEquals { field: String, systolic: f64, diastolic: f64 },
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
    ExistsInWindow(Box<Predicate>),
}

fn snap(v: f64, granularity: Option<f64>) -> f64 {
    match granularity {
        Some(g) if g > 0.0 => (v / g).round() * g,
        _ => v,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQ_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

fn literal_matches(value: &MeasurementValue, lit: &Literal, granularity: Option<f64>) -> bool {
    match (value, lit) {
        (MeasurementValue::Numeric { value, .. }, Literal::Number(n)) => close(snap(*value, granularity), *n),
        (MeasurementValue::Text(t), Literal::Text(s)) => t == s,
        (MeasurementValue::Text(t), Literal::Number(n)) => t.parse::<f64>().is_ok_and(|v| close(v, *n)),
        _ => false,
    }
}

impl Predicate {
    /// Evaluates against `record`, which must belong to `window`.
    pub fn matches(&self, record: &HealthRecord, window: &[&HealthRecord], granularity: Option<f64>) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::FieldEquals { field, value } => literal_matches(record.field(field), value, granularity),
            Predicate::FieldInSet { field, values } => {
                let v = record.field(field);
                values.iter().any(|lit| literal_matches(v, lit, granularity))
            }
            Predicate::FieldIsMarker { field, marker } => {
                matches!(record.field(field), MeasurementValue::Marker(m) if m == marker)
            }
            Predicate::FieldPresent { field } => matches!(
                record.field(field),
                MeasurementValue::Numeric { .. } | MeasurementValue::Pair { .. } | MeasurementValue::Text(_)
            ),
            Predicate::PairEquals {
                field,
                systolic,
                diastolic,
            } => match record.field(field) {
                MeasurementValue::Pair {
                    systolic: s,
                    diastolic: d,
                } => close(snap(*s, granularity), *systolic) && close(snap(*d, granularity), *diastolic),
                _ => false,
            },
            Predicate::And(ps) => ps.iter().all(|p| p.matches(record, window, granularity)),
            Predicate::Or(ps) => ps.iter().any(|p| p.matches(record, window, granularity)),
            Predicate::Not(p) => !p.matches(record, window, granularity),
            Predicate::ExistsInWindow(p) => window
                .iter()
                .any(|other| other.patient_id != record.patient_id && p.matches(other, window, granularity)),
        }
    }

    /// Names of every field the predicate reads.
    pub fn fields(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::Always => {}
            Predicate::FieldEquals { field, .. }
            | Predicate::FieldInSet { field, .. }
            | Predicate::FieldIsMarker { field, .. }
            | Predicate::FieldPresent { field }
            | Predicate::PairEquals { field, .. } => out.push(field),
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().for_each(|p| p.collect_fields(out)),
            Predicate::Not(p) | Predicate::ExistsInWindow(p) => p.collect_fields(out),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |f: &mut fmt::Formatter<'_>, op: &str, ps: &[Predicate]| {
            write!(f, "({op}")?;
            for p in ps {
                write!(f, " {p}")?;
            }
            f.write_str(")")
        };
        match self {
            Predicate::Always => f.write_str("(always)"),
            Predicate::FieldEquals { field, value } => write!(f, "(eq {field} {value})"),
            Predicate::FieldInSet { field, values } => {
                let items: Vec<String> = values.iter().map(ToString::to_string).collect();
                write!(f, "(in {field} [{}])", items.join(", "))
            }
            Predicate::FieldIsMarker { field, marker } => write!(f, "(marker {field} {})", marker.sentinel()),
            Predicate::FieldPresent { field } => write!(f, "(present {field})"),
            Predicate::PairEquals {
                field,
                systolic,
                diastolic,
            } => write!(f, "(pair {field} {systolic} {diastolic})"),
            Predicate::And(ps) => list(f, "and", ps),
            Predicate::Or(ps) => list(f, "or", ps),
            Predicate::Not(p) => write!(f, "(not {p})"),
            Predicate::ExistsInWindow(p) => write!(f, "(exists {p})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open,
    Close,
    OpenBracket,
    CloseBracket,
    Comma,
    Atom(String),
    Quoted(String),
}

fn is_atom_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | '[' | ']' | ',' | '"')
}

fn tokenize(src: &str) -> Result<Vec<Token>, String> {
    let mut out = Vec::new();
    let mut chars = src.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' | ')' | '[' | ']' | ',' => {
                chars.next();
                out.push(match c {
                    '(' => Token::Open,
                    ')' => Token::Close,
                    '[' => Token::OpenBracket,
                    ']' => Token::CloseBracket,
                    _ => Token::Comma,
                });
            }
            '"' => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err("unterminated string literal".into()),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(e) => s.push(e),
                            None => return Err("unterminated string literal".into()),
                        },
                        Some(ch) => s.push(ch),
                    }
                }
                out.push(Token::Quoted(s));
            }
            _ => {
                let mut s = String::new();
                while let Some(&ch) = chars.peek() {
                    if !is_atom_char(ch) {
                        break;
                    }
                    s.push(ch);
                    chars.next();
                }
                out.push(Token::Atom(s));
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Token) -> Result<(), String> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(format!("expected {want:?}, found {t:?}")),
            None => Err(format!("expected {want:?}, found end of input")),
        }
    }

    fn field(&mut self) -> Result<String, String> {
        match self.next() {
            Some(Token::Atom(a)) | Some(Token::Quoted(a)) if !a.is_empty() => Ok(a),
            other => Err(format!("expected a field name, found {other:?}")),
        }
    }

    fn number(&mut self) -> Result<f64, String> {
        match self.next() {
            Some(Token::Atom(a)) => a
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("expected a number, found `{a}`")),
            other => Err(format!("expected a number, found {other:?}")),
        }
    }

    fn literal(&mut self) -> Result<Literal, String> {
        match self.next() {
            Some(Token::Quoted(s)) => Ok(Literal::Text(s)),
            Some(Token::Atom(a)) => Ok(match a.parse::<f64>() {
                Ok(v) if v.is_finite() => Literal::Number(v),
                _ => Literal::Text(a),
            }),
            other => Err(format!("expected a literal, found {other:?}")),
        }
    }

    fn bracket_list<T>(&mut self, mut item: impl FnMut(&mut Self) -> Result<T, String>) -> Result<Vec<T>, String> {
        self.expect(Token::OpenBracket)?;
        let mut out = Vec::new();
        if self.peek() == Some(&Token::CloseBracket) {
            self.next();
            return Ok(out);
        }
        loop {
            out.push(item(self)?);
            match self.next() {
                Some(Token::Comma) => continue,
                Some(Token::CloseBracket) => return Ok(out),
                other => return Err(format!("expected `,` or `]`, found {other:?}")),
            }
        }
    }

    fn predicate(&mut self) -> Result<Predicate, String> {
        match self.next() {
            Some(Token::Atom(a)) if a == "always" => Ok(Predicate::Always),
            Some(Token::Open) => {
                let op = match self.next() {
                    Some(Token::Atom(op)) => op,
                    other => return Err(format!("expected an operator, found {other:?}")),
                };
                let pred = match op.as_str() {
                    "always" => Predicate::Always,
                    "eq" => Predicate::FieldEquals {
                        field: self.field()?,
                        value: self.literal()?,
                    },
                    "in" => Predicate::FieldInSet {
                        field: self.field()?,
                        values: self.bracket_list(Self::literal)?,
                    },
                    "marker" => {
                        let field = self.field()?;
                        let marker = match self.next() {
                            Some(Token::Atom(m)) => {
                                Marker::from_sentinel(&m).ok_or_else(|| format!("unknown marker `{m}`"))?
                            }
                            other => return Err(format!("expected a marker, found {other:?}")),
                        };
                        Predicate::FieldIsMarker { field, marker }
                    }
                    "present" => Predicate::FieldPresent { field: self.field()? },
                    "pair" => Predicate::PairEquals {
                        field: self.field()?,
                        systolic: self.number()?,
                        diastolic: self.number()?,
                    },
                    "pair-in" => {
                        let field = self.field()?;
                        let pairs = self.bracket_list(|p| {
                            p.expect(Token::Open)?;
                            let s = p.number()?;
                            p.expect(Token::Comma)?;
                            let d = p.number()?;
                            p.expect(Token::Close)?;
                            Ok((s, d))
                        })?;
                        Predicate::Or(
                            pairs
                                .into_iter()
                                .map(|(systolic, diastolic)| Predicate::PairEquals {
                                    field: field.clone(),
                                    systolic,
                                    diastolic,
                                })
                                .collect(),
                        )
                    }
                    "and" | "or" => {
                        let mut ps = Vec::new();
                        while self.peek() != Some(&Token::Close) && self.peek().is_some() {
                            ps.push(self.predicate()?);
                        }
                        if ps.is_empty() {
                            return Err(format!("`{op}` needs at least one operand"));
                        }
                        if op == "and" {
                            Predicate::And(ps)
                        } else {
                            Predicate::Or(ps)
                        }
                    }
                    "not" => Predicate::Not(Box::new(self.predicate()?)),
                    "exists" => Predicate::ExistsInWindow(Box::new(self.predicate()?)),
                    other => return Err(format!("unknown predicate kind `{other}`")),
                };
                self.expect(Token::Close)?;
                Ok(pred)
            }
            other => Err(format!("expected `(`, found {other:?}")),
        }
    }
}

/// Parses one predicate expression.
pub fn parse_predicate(src: &str) -> Result<Predicate, String> {
    let tokens = tokenize(src)?;
    let mut p = Parser { tokens, pos: 0 };
    let pred = p.predicate()?;
    if let Some(t) = p.peek() {
        return Err(format!("trailing input starting at {t:?}"));
    }
    Ok(pred)
}
