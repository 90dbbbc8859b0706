//! Model formulas (`response ~ a + b*c + factor(g)`) and their design matrices.
//!
//! Operator precedence follows the Wilkinson–Rogers convention: `:` binds
//! tighter than `*`, which binds tighter than `+`. Parentheses group.
//! `a*b` expands to `a + b + a:b`; terms are kept in order of first
//! appearance and duplicates (including `b:a` after `a:b`) are dropped.
//! The literal `1` denotes the intercept, which is always included.

use std::fmt;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variable {
    pub name: String,
    /// Marked with `factor(...)`: dummy-coded against its first level.
    pub factor: bool,
}

/// A main effect (one variable) or an interaction (several).
#[derive(Debug, Clone, Eq)]
pub struct Term {
    pub vars: Vec<Variable>,
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.vars.len() == other.vars.len() && self.vars.iter().all(|v| other.vars.contains(v))
    }
}

impl Term {
    fn interact(&self, other: &Term) -> Term {
        let mut vars = self.vars.clone();
        for v in &other.vars {
            if !vars.contains(v) {
                vars.push(v.clone());
            }
        }
        Term { vars }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factor {
            write!(f, "factor({})", self.name)
        } else {
            f.write_str(&self.name)
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.vars.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub response: String,
    pub terms: Vec<Term>,
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        if self.terms.is_empty() {
            return f.write_str("1");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Formula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

impl Formula {
    /// Column names referenced on the right-hand side, first appearance order.
    pub fn covariate_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.terms {
            for v in &t.vars {
                if !out.contains(&v.name.as_str()) {
                    out.push(&v.name);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    One,
    Plus,
    Star,
    Colon,
    LParen,
    RParen,
}

fn tokenize(s: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1
            }
            '*' => {
                out.push(Token::Star);
                i += 1
            }
            ':' => {
                out.push(Token::Colon);
                i += 1
            }
            '(' => {
                out.push(Token::LParen);
                i += 1
            }
            ')' => {
                out.push(Token::RParen);
                i += 1
            }
            c if c.is_alphanumeric() || c == '_' || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if word == "1" {
                    out.push(Token::One);
                } else if word.chars().next().is_some_and(|c| c.is_ascii_digit()) {
                    return Err(Error::FormulaSyntax(format!("unexpected number `{word}`")));
                } else {
                    out.push(Token::Ident(word));
                }
            }
            other => return Err(Error::FormulaSyntax(format!("unexpected character `{other}`"))),
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

    fn sum(&mut self) -> Result<Vec<Term>> {
        let mut terms = self.product()?;
        while self.peek() == Some(&Token::Plus) {
            self.pos += 1;
            let rhs = self.product()?;
            union_into(&mut terms, rhs);
        }
        Ok(terms)
    }

    fn product(&mut self) -> Result<Vec<Term>> {
        let mut terms = self.interaction()?;
        while self.peek() == Some(&Token::Star) {
            self.pos += 1;
            let rhs = self.interaction()?;
            let cross = cross(&terms, &rhs);
            union_into(&mut terms, rhs);
            union_into(&mut terms, cross);
        }
        Ok(terms)
    }

    fn interaction(&mut self) -> Result<Vec<Term>> {
        let mut terms = self.atom()?;
        while self.peek() == Some(&Token::Colon) {
            self.pos += 1;
            let rhs = self.atom()?;
            terms = cross(&terms, &rhs);
        }
        Ok(terms)
    }

    fn atom(&mut self) -> Result<Vec<Term>> {
        match self.next() {
            Some(Token::One) => Ok(vec![Term { vars: vec![] }]),
            Some(Token::LParen) => {
                let inner = self.sum()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(Error::FormulaSyntax("unbalanced parentheses".into())),
                }
            }
            Some(Token::Ident(name)) => {
                if self.peek() != Some(&Token::LParen) {
                    return Ok(vec![Term { vars: vec![Variable { name, factor: false }] }]);
                }
                if name != "factor" {
                    return Err(Error::UnsupportedFunction(name));
                }
                self.pos += 1;
                let arg = match self.next() {
                    Some(Token::Ident(a)) => a,
                    _ => return Err(Error::FormulaSyntax("factor() expects a column name".into())),
                };
                match self.next() {
                    Some(Token::RParen) => {}
                    Some(Token::LParen) => return Err(Error::FormulaSyntax("nested function calls are not supported".into())),
                    _ => return Err(Error::FormulaSyntax("unbalanced parentheses".into())),
                }
                Ok(vec![Term { vars: vec![Variable { name: arg, factor: true }] }])
            }
            Some(Token::RParen) => Err(Error::FormulaSyntax("unbalanced parentheses".into())),
            Some(t) => Err(Error::FormulaSyntax(format!("unexpected token {t:?}"))),
            None => Err(Error::FormulaSyntax("unexpected end of formula".into())),
        }
    }
}

fn union_into(acc: &mut Vec<Term>, more: Vec<Term>) {
    for t in more {
        if !acc.contains(&t) {
            acc.push(t);
        }
    }
}

fn cross(a: &[Term], b: &[Term]) -> Vec<Term> {
    let mut out = Vec::new();
    for x in a {
        for y in b {
            union_into(&mut out, vec![x.interact(y)]);
        }
    }
    out
}

/// Parses a right-hand side (`a + b*c`) into its expanded term list.
pub fn parse_terms(rhs: &str) -> Result<Vec<Term>> {
    let tokens = tokenize(rhs)?;
    if tokens.is_empty() {
        return Err(Error::FormulaSyntax("empty right-hand side".into()));
    }
    let mut p = Parser { tokens, pos: 0 };
    let terms = p.sum()?;
    match p.peek() {
        None => {}
        Some(Token::RParen) => return Err(Error::FormulaSyntax("unbalanced parentheses".into())),
        Some(t) => return Err(Error::FormulaSyntax(format!("unexpected token {t:?}"))),
    }
    Ok(terms.into_iter().filter(|t| !t.vars.is_empty()).collect())
}

pub fn parse_formula(text: &str) -> Result<Formula> {
    let mut parts = text.split('~');
    let (lhs, rhs) = match (parts.next(), parts.next(), parts.next()) {
        (Some(l), Some(r), None) => (l.trim(), r.trim()),
        (_, None, _) => return Err(Error::FormulaSyntax("missing `~`".into())),
        _ => return Err(Error::FormulaSyntax("more than one `~`".into())),
    };
    if lhs.is_empty() {
        return Err(Error::FormulaSyntax("empty left-hand side".into()));
    }
    let response = match tokenize(lhs)?.as_slice() {
        [Token::Ident(name)] => name.clone(),
        _ => return Err(Error::FormulaSyntax("left-hand side must be a single column name".into())),
    };
    let terms = parse_terms(rhs)?;
    Ok(Formula { response, terms })
}

/// Numeric model matrix with labelled columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub has_intercept: bool,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Covariate columns, skipping the intercept.
    pub fn covariates(&self) -> impl Iterator<Item = (&str, Vec<f64>)> + '_ {
        let skip = usize::from(self.has_intercept);
        (skip..self.n_cols()).map(move |j| {
            (self.column_names[j].as_str(), self.values.column(j).iter().copied().collect())
        })
    }

    /// Rows by index; indices may repeat.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_rows(rows),
            column_names: self.column_names.clone(),
            has_intercept: self.has_intercept,
        }
    }
}

struct Block {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

fn variable_block(var: &Variable, d: &Dataset) -> Result<Block> {
    let raw = d.raw(&var.name)?;
    if let Some(row) = raw.iter().position(|c| crate::data::is_missing(c)) {
        return Err(Error::MissingValue { column: var.name.clone(), row: row + 1 });
    }
    if !var.factor && d.is_numeric(&var.name)? {
        return Ok(Block { names: vec![var.name.clone()], cols: vec![d.numeric(&var.name)?] });
    }
    let labels = d.labels(&var.name)?;
    let mut levels: Vec<&str> = labels.iter().map(String::as_str).collect();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::DegenerateDesign(format!("factor `{}` has a single level", var.name)));
    }
    let names = levels[1..].iter().map(|l| format!("{}={}", var.name, l)).collect();
    let cols = levels[1..]
        .iter()
        .map(|lvl| labels.iter().map(|l| if l == lvl { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(Block { names, cols })
}

/// Expands the formula's right-hand side over the dataset. The intercept
/// column comes first; factors use reference coding against their
/// lexicographically first level; interactions are elementwise products.
pub fn build_design_matrix(f: &Formula, d: &Dataset) -> Result<DesignMatrix> {
    build_from_terms(&f.terms, d)
}

pub fn build_from_terms(terms: &[Term], d: &Dataset) -> Result<DesignMatrix> {
    let n = d.n_rows();
    let mut names = vec!["(Intercept)".to_string()];
    let mut cols = vec![vec![1.0; n]];
    for term in terms {
        let mut acc = Block { names: vec![String::new()], cols: vec![vec![1.0; n]] };
        for (k, var) in term.vars.iter().enumerate() {
            let b = variable_block(var, d)?;
            let mut next = Block { names: vec![], cols: vec![] };
            for (an, ac) in acc.names.iter().zip(&acc.cols) {
                for (bn, bc) in b.names.iter().zip(&b.cols) {
                    next.names.push(if k == 0 { bn.clone() } else { format!("{an}:{bn}") });
                    next.cols.push(ac.iter().zip(bc).map(|(x, y)| x * y).collect());
                }
            }
            acc = next;
        }
        names.extend(acc.names);
        cols.extend(acc.cols);
    }
    for (name, col) in names.iter().zip(&cols) {
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateDesign(format!("column `{name}` is identically zero")));
        }
    }
    for j in 1..cols.len() {
        if let Some(i) = (0..j).find(|&i| cols[i] == cols[j]) {
            return Err(Error::DegenerateDesign(format!(
                "columns `{}` and `{}` are identical",
                names[i], names[j]
            )));
        }
    }
    let q = cols.len();
    let values = DMatrix::from_fn(n, q, |i, j| cols[j][i]);
    Ok(DesignMatrix { values, column_names: names, has_intercept: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(f: &Formula) -> Vec<String> {
        f.terms.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn parses_main_effects() {
        let f = parse_formula("wage ~ white + maemp").unwrap();
        assert_eq!(f.response, "wage");
        assert_eq!(names(&f), ["white", "maemp"]);
    }

    #[test]
    fn star_expands_once() {
        let f = parse_formula("y ~ a*b").unwrap();
        assert_eq!(names(&f), ["a", "b", "a:b"]);
        let f = parse_formula("y ~ a*b + b:a + a").unwrap();
        assert_eq!(names(&f), ["a", "b", "a:b"]);
        let f = parse_formula("y ~ a:b").unwrap();
        assert_eq!(names(&f), ["a:b"]);
    }

    #[test]
    fn precedence_and_grouping() {
        let f = parse_formula("y ~ a*b:c").unwrap();
        assert_eq!(names(&f), ["a", "b:c", "a:b:c"]);
        let f = parse_formula("y ~ (a + b)*c").unwrap();
        assert_eq!(names(&f), ["a", "b", "c", "a:c", "b:c"]);
        let f = parse_formula("y ~ factor(g) + x").unwrap();
        assert_eq!(names(&f), ["factor(g)", "x"]);
        assert!(f.terms[0].vars[0].factor);
        let f = parse_formula("y ~ 1").unwrap();
        assert!(f.terms.is_empty());
        assert_eq!(f.to_string(), "y ~ 1");
    }

    #[test]
    fn rejects_bad_syntax() {
        assert!(matches!(parse_formula("y + x"), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula(" ~ x"), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula("y ~ "), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula("y ~ (a + b"), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula("y ~ a + b)"), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula("y ~ factor(x"), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula("y ~ a ~ b"), Err(Error::FormulaSyntax(_))));
        assert!(matches!(parse_formula("y ~ a + + b"), Err(Error::FormulaSyntax(_))));
        match parse_formula("y ~ bs(x)") {
            Err(Error::UnsupportedFunction(f)) => assert_eq!(f, "bs"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_formula("y ~ log(x)"), Err(Error::UnsupportedFunction(_))));
    }

    fn data(csv: &str) -> Dataset {
        Dataset::read_csv(csv.as_bytes()).unwrap()
    }

    #[test]
    fn factor_reference_coding() {
        let d = data("y,x\n1,B\n2,A\n3,C\n4,B\n");
        let f = parse_formula("y ~ factor(x)").unwrap();
        let m = build_design_matrix(&f, &d).unwrap();
        assert_eq!(m.column_names, ["(Intercept)", "x=B", "x=C"]);
        assert_eq!(m.values.column(1).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.values.column(2).as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(m.values.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn interaction_is_elementwise_product() {
        let d = data("y,a,b\n0,1,3\n1,2,4\n");
        let m = build_design_matrix(&parse_formula("y ~ a:b").unwrap(), &d).unwrap();
        assert_eq!(m.column_names, ["(Intercept)", "a:b"]);
        assert_eq!(m.values.column(1).as_slice(), &[3.0, 8.0]);
    }

    #[test]
    fn missing_cell_is_rejected() {
        let d = data("y,a\n0,1\n1,\n");
        let err = build_design_matrix(&parse_formula("y ~ a").unwrap(), &d).unwrap_err();
        assert!(err.to_string().contains("missing value in covariate"));
        let err = build_design_matrix(&parse_formula("y ~ b").unwrap(), &d).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(_)));
    }

    #[test]
    fn duplicate_and_zero_columns_are_rejected() {
        let d = data("y,a,b,c\n0,1,1,0\n1,2,2,0\n0,3,3,0\n");
        let e = build_design_matrix(&parse_formula("y ~ a + b").unwrap(), &d).unwrap_err();
        assert!(matches!(e, Error::DegenerateDesign(_)));
        let e = build_design_matrix(&parse_formula("y ~ c").unwrap(), &d).unwrap_err();
        assert!(matches!(e, Error::DegenerateDesign(_)));
    }

    #[test]
    fn text_columns_become_factors() {
        let d = data("y,g\n0,u\n1,v\n");
        let m = build_design_matrix(&parse_formula("y ~ g").unwrap(), &d).unwrap();
        assert_eq!(m.column_names, ["(Intercept)", "g=v"]);
    }

    fn arb_rhs() -> impl Strategy<Value = String> {
        let atom = prop_oneof![
            "[a-e]".prop_map(String::from),
            "[a-e]".prop_map(|s| format!("factor({s})")),
        ];
        let leaf = atom.prop_recursive(3, 12, 2, |inner| {
            (inner.clone(), prop_oneof![Just("+"), Just("*"), Just(":")], inner)
                .prop_map(|(l, op, r)| format!("({l} {op} {r})"))
        });
        leaf
    }

    proptest! {
        #[test]
        fn rendering_round_trips(rhs in arb_rhs()) {
            let f = parse_formula(&format!("y ~ {rhs}")).unwrap();
            let again = parse_formula(&f.to_string()).unwrap();
            prop_assert_eq!(&f, &again);
            prop_assert_eq!(f.to_string(), again.to_string());
        }

        #[test]
        fn star_design_is_concatenation(a in proptest::collection::vec(-5i32..5, 6), b in proptest::collection::vec(-5i32..5, 6)) {
            let mut csv = String::from("y,a,b\n");
            for (x, z) in a.iter().zip(&b) {
                csv.push_str(&format!("0,{x},{z}\n"));
            }
            let d = data(&csv);
            let star = build_design_matrix(&parse_formula("y ~ a*b").unwrap(), &d);
            let parts = build_design_matrix(&parse_formula("y ~ a + b + a:b").unwrap(), &d);
            match (star, parts) {
                (Ok(s), Ok(p)) => {
                    prop_assert_eq!(s.n_rows(), 6);
                    prop_assert_eq!(s, p);
                }
                (Err(_), Err(_)) => {}
                (s, p) => prop_assert!(false, "mismatch {:?} {:?}", s, p),
            }
        }
    }
}
