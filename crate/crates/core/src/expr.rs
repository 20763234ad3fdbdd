//! Element expressions of compute nodes.
//!
//! Index expressions are affine in the iterators of the owning node; value
//! expressions form a small closed language that both the interpreter and
//! the feature extractor can handle totally.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// An affine combination `sum(coef * iter) + constant`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Affine {
    pub terms: Vec<(String, i64)>,
    pub constant: i64,
}

impl Affine {
    pub fn var(name: &str) -> Self {
        Affine {
            terms: vec![(name.to_string(), 1)],
            constant: 0,
        }
    }

    pub fn constant(c: i64) -> Self {
        Affine {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(name: &str, coef: i64) -> Self {
        Affine {
            terms: vec![(name.to_string(), coef)],
            constant: 0,
        }
        .normalized()
    }

    /// Merges duplicate iterators, drops zero coefficients and sorts by name.
    pub fn normalized(mut self) -> Self {
        self.terms.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out: Vec<(String, i64)> = Vec::with_capacity(self.terms.len());
        for (name, coef) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == name => last.1 += coef,
                _ => out.push((name, coef)),
            }
        }
        out.retain(|(_, c)| *c != 0);
        Affine {
            terms: out,
            constant: self.constant,
        }
    }

    pub fn plus(&self, other: &Affine) -> Affine {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Affine {
            terms,
            constant: self.constant + other.constant,
        }
        .normalized()
    }

    pub fn offset(&self, c: i64) -> Affine {
        let mut a = self.clone();
        a.constant += c;
        a
    }

    pub fn scaled(&self, k: i64) -> Affine {
        Affine {
            terms: self.terms.iter().map(|(n, c)| (n.clone(), c * k)).collect(),
            constant: self.constant * k,
        }
        .normalized()
    }

    pub fn coef(&self, name: &str) -> i64 {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, c)| *c).unwrap_or(0)
    }

    /// Replaces `name` by `by`.
    pub fn substitute(&self, name: &str, by: &Affine) -> Affine {
        let k = self.coef(name);
        if k == 0 {
            return self.clone();
        }
        let rest = Affine {
            terms: self.terms.iter().filter(|(n, _)| n != name).cloned().collect(),
            constant: self.constant,
        };
        rest.plus(&by.scaled(k))
    }

    pub fn rename(&self, from: &str, to: &str) -> Affine {
        Affine {
            terms: self
                .terms
                .iter()
                .map(|(n, c)| (if n == from { to.to_string() } else { n.clone() }, *c))
                .collect(),
            constant: self.constant,
        }
        .normalized()
    }

    /// `Some(name)` when the expression is exactly one iterator with coefficient 1.
    pub fn as_single_var(&self) -> Option<&str> {
        match self.terms.as_slice() {
            [(n, 1)] if self.constant == 0 => Some(n),
            _ => None,
        }
    }

    pub fn eval(&self, lookup: impl Fn(&str) -> i64) -> i64 {
        self.terms.iter().fold(self.constant, |acc, (n, c)| acc + c * lookup(n))
    }

    /// Integer operations needed to evaluate the index once.
    pub fn int_ops(&self) -> (u64, u64) {
        let muls = self.terms.iter().filter(|(_, c)| *c != 1).count() as u64;
        let mut adds = self.terms.len().saturating_sub(1) as u64;
        if self.constant != 0 && !self.terms.is_empty() {
            adds += 1;
        }
        (adds, muls)
    }

    /// Converts to a value expression over iterators.
    pub fn to_expr(&self) -> Expr {
        let mut acc: Option<Expr> = None;
        for (n, c) in &self.terms {
            let t = if *c == 1 {
                Expr::iter(n)
            } else {
                Expr::binary(BinOp::Mul, Expr::constant(*c as f64), Expr::iter(n))
            };
            acc = Some(match acc {
                None => t,
                Some(a) => Expr::binary(BinOp::Add, a, t),
            });
        }
        match acc {
            None => Expr::constant(self.constant as f64),
            Some(a) if self.constant == 0 => a,
            Some(a) => Expr::binary(BinOp::Add, a, Expr::constant(self.constant as f64)),
        }
    }
}

impl fmt::Display for Affine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (n, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if *c == 1 {
                write!(f, "{n}")?;
            } else {
                write!(f, "{c}*{n}")?;
            }
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant != 0 {
            write!(f, " + {}", self.constant)
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl BinOp {
    pub fn apply(self, a: f32, b: f32) -> f32 {
        let t = |x: bool| if x { 1.0 } else { 0.0 };
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Max => a.max(b),
            BinOp::Min => a.min(b),
            BinOp::Lt => t(a < b),
            BinOp::Le => t(a <= b),
            BinOp::Gt => t(a > b),
            BinOp::Ge => t(a >= b),
            BinOp::Eq => t(a == b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryOp {
    Exp,
    Sqrt,
}

impl UnaryOp {
    pub fn apply(self, a: f32) -> f32 {
        match self {
            UnaryOp::Exp => a.exp(),
            UnaryOp::Sqrt => a.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Sum,
    Max,
}

impl ReduceOp {
    pub fn identity(self) -> f32 {
        match self {
            ReduceOp::Sum => 0.0,
            ReduceOp::Max => f32::NEG_INFINITY,
        }
    }

    pub fn combine(self, acc: f32, v: f32) -> f32 {
        match self {
            ReduceOp::Sum => acc + v,
            ReduceOp::Max => acc.max(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expr {
    Const {
        value: f64,
    },
    Iter {
        name: String,
    },
    Read {
        buffer: String,
        index: Vec<Affine>,
    },
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Unary {
        op: UnaryOp,
        arg: Box<Expr>,
    },
    /// `cond != 0 ? then : otherwise`; only the taken branch is evaluated.
    Select {
        cond: Box<Expr>,
        then: Box<Expr>,
        otherwise: Box<Expr>,
    },
    /// Only legal at the root of a node body.
    Reduce {
        op: ReduceOp,
        axes: Vec<String>,
        body: Box<Expr>,
    },
}

/// Operation counts for a single evaluation of an expression.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpCounts {
    pub add: f64,
    pub sub: f64,
    pub mul: f64,
    pub div: f64,
    pub modulo: f64,
    pub cmp: f64,
    pub intrinsic: f64,
    pub other: f64,
}

impl OpCounts {
    pub fn total(&self) -> f64 {
        self.add + self.sub + self.mul + self.div + self.modulo + self.cmp + self.intrinsic + self.other
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.add,
            self.sub,
            self.mul,
            self.div,
            self.modulo,
            self.cmp,
            self.intrinsic,
            self.other,
        ]
    }

    pub fn scaled(&self, k: f64) -> OpCounts {
        let a = self.as_array().map(|v| v * k);
        OpCounts {
            add: a[0],
            sub: a[1],
            mul: a[2],
            div: a[3],
            modulo: a[4],
            cmp: a[5],
            intrinsic: a[6],
            other: a[7],
        }
    }

    fn bump_binop(&mut self, op: BinOp) {
        match op {
            BinOp::Add => self.add += 1.0,
            BinOp::Sub => self.sub += 1.0,
            BinOp::Mul => self.mul += 1.0,
            BinOp::Div => self.div += 1.0,
            _ => self.cmp += 1.0,
        }
    }
}

impl Expr {
    pub fn constant(value: f64) -> Expr {
        Expr::Const { value }
    }

    pub fn iter(name: &str) -> Expr {
        Expr::Iter { name: name.to_string() }
    }

    pub fn read(buffer: &str, index: Vec<Affine>) -> Expr {
        Expr::Read {
            buffer: buffer.to_string(),
            index,
        }
    }

    /// Read indexed by plain iterator names.
    pub fn read_vars(buffer: &str, vars: &[&str]) -> Expr {
        Expr::read(buffer, vars.iter().map(|v| Affine::var(v)).collect())
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn unary(op: UnaryOp, arg: Expr) -> Expr {
        Expr::Unary { op, arg: Box::new(arg) }
    }

    pub fn select(cond: Expr, then: Expr, otherwise: Expr) -> Expr {
        Expr::Select {
            cond: Box::new(cond),
            then: Box::new(then),
            otherwise: Box::new(otherwise),
        }
    }

    pub fn reduce(op: ReduceOp, axes: &[&str], body: Expr) -> Expr {
        Expr::Reduce {
            op,
            axes: axes.iter().map(|s| s.to_string()).collect(),
            body: Box::new(body),
        }
    }

    pub fn relu(x: Expr) -> Expr {
        Expr::binary(BinOp::Max, x, Expr::constant(0.0))
    }

    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Const { .. } | Expr::Iter { .. } | Expr::Read { .. } => vec![],
            Expr::Binary { lhs, rhs, .. } => vec![lhs, rhs],
            Expr::Unary { arg, .. } => vec![arg],
            Expr::Select { cond, then, otherwise } => vec![cond, then, otherwise],
            Expr::Reduce { body, .. } => vec![body],
        }
    }

    /// Applies `f` bottom-up to every node, rebuilding the tree.
    pub fn map(&self, f: &dyn Fn(Expr) -> Expr) -> Expr {
        let rebuilt = match self {
            Expr::Const { .. } | Expr::Iter { .. } | Expr::Read { .. } => self.clone(),
            Expr::Binary { op, lhs, rhs } => Expr::binary(*op, lhs.map(f), rhs.map(f)),
            Expr::Unary { op, arg } => Expr::unary(*op, arg.map(f)),
            Expr::Select { cond, then, otherwise } => Expr::select(cond.map(f), then.map(f), otherwise.map(f)),
            Expr::Reduce { op, axes, body } => Expr::Reduce {
                op: *op,
                axes: axes.clone(),
                body: Box::new(body.map(f)),
            },
        };
        f(rebuilt)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// All buffer reads, in traversal order.
    pub fn reads(&self) -> Vec<(&str, &[Affine])> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Read { buffer, index } = e {
                out.push((buffer.as_str(), index.as_slice()));
            }
        });
        out
    }

    pub fn reads_buffer(&self, buffer: &str) -> bool {
        self.reads().iter().any(|(b, _)| *b == buffer)
    }

    pub fn read_buffers(&self) -> BTreeSet<String> {
        self.reads().iter().map(|(b, _)| b.to_string()).collect()
    }

    /// Iterator names referenced anywhere (values and indices).
    pub fn iterators(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| match e {
            Expr::Iter { name } => {
                out.insert(name.clone());
            }
            Expr::Read { index, .. } => {
                for a in index {
                    for (n, _) in &a.terms {
                        out.insert(n.clone());
                    }
                }
            }
            _ => {}
        });
        out
    }

    /// `(op, axes, body)` when the root is a reduction.
    pub fn as_reduce(&self) -> Option<(ReduceOp, &[String], &Expr)> {
        match self {
            Expr::Reduce { op, axes, body } => Some((*op, axes, body)),
            _ => None,
        }
    }

    /// Substitutes an iterator by an affine expression everywhere.
    pub fn substitute_iter(&self, name: &str, by: &Affine) -> Expr {
        let by_expr = by.to_expr();
        self.map(&|e| match e {
            Expr::Iter { name: n } if n == name => by_expr.clone(),
            Expr::Read { buffer, index } => Expr::Read {
                buffer,
                index: index.iter().map(|a| a.substitute(name, by)).collect(),
            },
            Expr::Reduce { op, axes, body } => Expr::Reduce {
                op,
                axes: axes.into_iter().filter(|a| a != name).collect(),
                body,
            },
            other => other,
        })
    }

    /// Replaces every read of `buffer` by `f(index)`.
    pub fn replace_reads(&self, buffer: &str, f: &dyn Fn(&[Affine]) -> Expr) -> Expr {
        self.map(&|e| match e {
            Expr::Read {
                buffer: ref b,
                ref index,
            } if b == buffer => f(index),
            other => other,
        })
    }

    pub fn rename_buffer(&self, from: &str, to: &str) -> Expr {
        self.map(&|e| match e {
            Expr::Read { buffer, index } if buffer == from => Expr::Read {
                buffer: to.to_string(),
                index,
            },
            other => other,
        })
    }

    /// True when the subtree is computed purely from iterators and integer constants.
    pub fn is_integer(&self) -> bool {
        match self {
            Expr::Const { value } => value.fract() == 0.0,
            Expr::Iter { .. } => true,
            Expr::Read { .. } | Expr::Reduce { .. } | Expr::Unary { .. } => false,
            Expr::Binary { lhs, rhs, op } => *op != BinOp::Div && lhs.is_integer() && rhs.is_integer(),
            Expr::Select { then, otherwise, .. } => then.is_integer() && otherwise.is_integer(),
        }
    }

    /// Float and integer operation counts for one evaluation. A root
    /// reduction contributes its combine operation.
    pub fn op_counts(&self) -> (OpCounts, OpCounts) {
        let mut fl = OpCounts::default();
        let mut it = OpCounts::default();
        self.count_into(&mut fl, &mut it);
        (fl, it)
    }

    fn count_into(&self, fl: &mut OpCounts, it: &mut OpCounts) {
        match self {
            Expr::Const { .. } | Expr::Iter { .. } => {}
            Expr::Read { index, .. } => {
                for a in index {
                    let (adds, muls) = a.int_ops();
                    it.add += adds as f64;
                    it.mul += muls as f64;
                }
            }
            Expr::Binary { op, lhs, rhs } => {
                if self.is_integer() {
                    it.bump_binop(*op);
                } else {
                    fl.bump_binop(*op);
                }
                lhs.count_into(fl, it);
                rhs.count_into(fl, it);
            }
            Expr::Unary { arg, .. } => {
                fl.intrinsic += 1.0;
                arg.count_into(fl, it);
            }
            Expr::Select { cond, then, otherwise } => {
                if self.is_integer() {
                    it.other += 1.0;
                } else {
                    fl.other += 1.0;
                }
                cond.count_into(fl, it);
                then.count_into(fl, it);
                otherwise.count_into(fl, it);
            }
            Expr::Reduce { op, body, .. } => {
                match op {
                    ReduceOp::Sum => fl.add += 1.0,
                    ReduceOp::Max => fl.cmp += 1.0,
                }
                body.count_into(fl, it);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const { value } => write!(f, "{value}"),
            Expr::Iter { name } => write!(f, "{name}"),
            Expr::Read { buffer, index } => {
                write!(f, "{buffer}[")?;
                for (k, a) in index.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, "]")
            }
            Expr::Binary { op, lhs, rhs } => write!(f, "{op:?}({lhs}, {rhs})"),
            Expr::Unary { op, arg } => write!(f, "{op:?}({arg})"),
            Expr::Select { cond, then, otherwise } => write!(f, "select({cond}, {then}, {otherwise})"),
            Expr::Reduce { op, axes, body } => write!(f, "{op:?}[{}]({body})", axes.join(",")),
        }
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Add, self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Sub, self, rhs)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Mul, self, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_substitution_composes() {
        let a = Affine::var("k").scaled(2).offset(1);
        let by = Affine::term("ko", 4).plus(&Affine::var("ki"));
        let s = a.substitute("k", &by);
        assert_eq!(s.coef("ko"), 8);
        assert_eq!(s.coef("ki"), 2);
        assert_eq!(s.constant, 1);
        assert_eq!(s.eval(|n| if n == "ko" { 3 } else { 1 }), 8 * 3 + 2 + 1);
    }

    #[test]
    fn matmul_counts_two_flops() {
        let body = Expr::reduce(
            ReduceOp::Sum,
            &["k"],
            Expr::read_vars("A", &["i", "k"]) * Expr::read_vars("B", &["k", "j"]),
        );
        let (fl, it) = body.op_counts();
        assert_eq!(fl.total(), 2.0);
        assert_eq!(it.total(), 0.0);
    }

    #[test]
    fn iterator_comparisons_are_integer_ops() {
        let cond = Expr::binary(BinOp::Ge, Expr::iter("h"), Expr::constant(1.0));
        let e = Expr::select(
            cond,
            Expr::read("I", vec![Affine::var("h").offset(-1)]),
            Expr::constant(0.0),
        );
        let (fl, it) = e.op_counts();
        assert_eq!(fl.other, 1.0);
        assert_eq!(it.cmp, 1.0);
        assert_eq!(it.add, 1.0);
    }
}
