//! Line-oriented graph text.
//!
//! ```text
//! # comment
//! input X : [100, 200]
//! input Y : [200, 50]
//! Z[i,k] = sum[j] mul(X[i,j], Y[j,k])
//! B[i,k] = map relu(Z[i,k])
//! M[i] = max[k] map identity(B[i,k])
//! P = softmax(B)
//! output Z
//! ```
//!
//! Statements may reference tensors defined further down; cycles are rejected.

use std::collections::BTreeMap;

use super::graph::softmax_macro;
use super::{AggOp, EinGraph, EinSumExpr, GraphBuilder, JoinOp, Label, MapOp, ScalarOp, Vertex};
use crate::error::{Error, Result};
use crate::tensor::Bound;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    LBrack,
    RBrack,
    LParen,
    RParen,
    Comma,
    Colon,
    Eq,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '\''
}

fn lex(line_no: usize, line: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '[' => Some(Tok::LBrack),
            ']' => Some(Tok::RBrack),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            ':' => Some(Tok::Colon),
            '=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, col });
            i += 1;
        } else if is_ident_start(c) {
            let start = i;
            while i < chars.len() && is_ident_char(chars[i]) {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                col,
            });
        } else if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' {
            let start = i;
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push(Token {
                tok: Tok::Num(chars[start..i].iter().collect()),
                col,
            });
        } else {
            return Err(syntax(line_no, col, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.eol_col, |t| t.col)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        syntax(self.line, self.col(), msg)
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        match self.peek() {
            Some(t) if *t == want => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize)> {
        let col = self.col();
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok((s, col))
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn number(&mut self, what: &str) -> Result<(String, usize)> {
        let col = self.col();
        match self.peek() {
            Some(Tok::Num(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok((s, col))
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn finish(&self) -> Result<()> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err("unexpected trailing input"))
        }
    }

    /// `[a, b, c]`, possibly empty.
    fn label_list(&mut self) -> Result<Vec<(Label, usize)>> {
        self.expect(Tok::LBrack, "`[`")?;
        let mut out = Vec::new();
        if self.peek() == Some(&Tok::RBrack) {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(self.ident("label")?);
            match self.peek() {
                Some(Tok::Comma) => self.pos += 1,
                Some(Tok::RBrack) => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => return Err(self.err("expected `,` or `]`")),
            }
        }
    }
}

fn distinct_labels(line: usize, tensor: &str, ls: Vec<(Label, usize)>) -> Result<Vec<Label>> {
    let mut out: Vec<Label> = Vec::new();
    for (l, col) in ls {
        if out.contains(&l) {
            return Err(syntax(
                line,
                col,
                Error::RepeatedLabel {
                    tensor: tensor.to_string(),
                    label: l,
                }
                .to_string(),
            ));
        }
        out.push(l);
    }
    Ok(out)
}

#[derive(Debug)]
struct Operand {
    name: String,
    col: usize,
    labels: Vec<Label>,
}

#[derive(Debug)]
enum Stmt {
    Input {
        name: String,
        bound: Vec<usize>,
    },
    EinSum {
        name: String,
        expr: EinSumExpr,
        operands: Vec<Operand>,
    },
    Softmax {
        name: String,
        operand: Operand,
    },
    Output {
        name: String,
        col: usize,
    },
}

fn operand(c: &mut Cursor<'_>) -> Result<Operand> {
    let (name, col) = c.ident("tensor name")?;
    let raw = c.label_list()?;
    let labels = distinct_labels(c.line, &name, raw)?;
    Ok(Operand { name, col, labels })
}

fn map_op(c: &mut Cursor<'_>) -> Result<MapOp> {
    let (name, col) = c.ident("map operator")?;
    Ok(match name.as_str() {
        "relu" => MapOp::Relu,
        "exp" => MapOp::Exp,
        "neg" => MapOp::Neg,
        "identity" => MapOp::Identity,
        "scale" => {
            c.expect(Tok::LParen, "`(` after scale")?;
            let (num, ncol) = c.number("scale factor")?;
            let factor: f64 = num
                .parse()
                .map_err(|_| syntax(c.line, ncol, format!("bad number `{num}`")))?;
            c.expect(Tok::RParen, "`)`")?;
            MapOp::Scale(factor)
        }
        other => {
            return Err(syntax(
                c.line,
                col,
                format!("unknown map operator `{other}`"),
            ))
        }
    })
}

fn parse_line(line_no: usize, line: &str) -> Result<Option<Stmt>> {
    let toks = lex(line_no, line)?;
    if toks.is_empty() {
        return Ok(None);
    }
    let eol_col = line.chars().count() + 1;
    let mut c = Cursor {
        toks: &toks,
        pos: 0,
        line: line_no,
        eol_col,
    };
    let (head, _) = c.ident("statement")?;
    match head.as_str() {
        "input" if matches!(c.peek(), Some(Tok::Ident(_))) => {
            let (name, _) = c.ident("tensor name")?;
            c.expect(Tok::Colon, "`:`")?;
            c.expect(Tok::LBrack, "`[`")?;
            let mut bound = Vec::new();
            if c.peek() != Some(&Tok::RBrack) {
                loop {
                    let (n, col) = c.number("extent")?;
                    let v: usize = n
                        .parse()
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| syntax(line_no, col, format!("bad extent `{n}`")))?;
                    bound.push(v);
                    match c.peek() {
                        Some(Tok::Comma) => c.pos += 1,
                        Some(Tok::RBrack) => break,
                        _ => return Err(c.err("expected `,` or `]`")),
                    }
                }
            }
            c.expect(Tok::RBrack, "`]`")?;
            c.finish()?;
            Ok(Some(Stmt::Input { name, bound }))
        }
        "output" if matches!(c.peek(), Some(Tok::Ident(_))) => {
            let (name, col) = c.ident("tensor name")?;
            c.finish()?;
            Ok(Some(Stmt::Output { name, col }))
        }
        _ => {
            let name = head;
            if c.peek() == Some(&Tok::Eq) {
                // Y = softmax(X)
                c.pos += 1;
                let (m, col) = c.ident("macro name")?;
                if m != "softmax" {
                    return Err(syntax(line_no, col, format!("unknown macro `{m}`")));
                }
                c.expect(Tok::LParen, "`(`")?;
                let (src, scol) = c.ident("tensor name")?;
                c.expect(Tok::RParen, "`)`")?;
                c.finish()?;
                return Ok(Some(Stmt::Softmax {
                    name,
                    operand: Operand {
                        name: src,
                        col: scol,
                        labels: Vec::new(),
                    },
                }));
            }
            let out = distinct_labels(line_no, &name, c.label_list()?)?;
            c.expect(Tok::Eq, "`=`")?;

            let (word, wcol) = c.ident("operator")?;
            let mut agg: Option<(AggOp, Vec<Label>, usize)> = None;
            let word = if let Ok(op) = word.parse::<AggOp>() {
                let agg_labels = distinct_labels(line_no, "aggregation", c.label_list()?)?;
                agg = Some((op, agg_labels, wcol));
                c.ident("operator")?
            } else {
                (word, wcol)
            };

            let (op, operands) = if word.0 == "map" {
                let m = map_op(&mut c)?;
                c.expect(Tok::LParen, "`(`")?;
                let a = operand(&mut c)?;
                c.expect(Tok::RParen, "`)`")?;
                (ScalarOp::Map(m), vec![a])
            } else {
                let j: JoinOp = word
                    .0
                    .parse()
                    .map_err(|e: String| syntax(line_no, word.1, e))?;
                c.expect(Tok::LParen, "`(`")?;
                let a = operand(&mut c)?;
                c.expect(Tok::Comma, "`,`")?;
                let b = operand(&mut c)?;
                c.expect(Tok::RParen, "`)`")?;
                (ScalarOp::Join(j), vec![a, b])
            };
            c.finish()?;

            let expr = EinSumExpr::new(
                out,
                operands.iter().map(|o| o.labels.clone()).collect(),
                op,
                agg.as_ref().map(|(op, _, _)| *op),
            )
            .map_err(|e| syntax(line_no, 1, e.to_string()))?;
            if let Some((_, declared, col)) = &agg {
                let mut want = expr.agg_labels();
                let mut got = declared.clone();
                want.sort();
                got.sort();
                if want != got {
                    return Err(syntax(
                        line_no,
                        *col,
                        format!(
                            "aggregation labels [{}] do not match the labels summed out [{}]",
                            declared.join(","),
                            expr.agg_labels().join(",")
                        ),
                    ));
                }
            }
            Ok(Some(Stmt::EinSum {
                name,
                expr,
                operands,
            }))
        }
    }
}

/// Parses graph text into a validated [`EinGraph`].
pub fn parse_eingraph(text: &str) -> Result<EinGraph> {
    let mut stmts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(s) = parse_line(i + 1, line)? {
            stmts.push((i + 1, s));
        }
    }

    // Resolve names to statement indices, allowing forward references.
    let mut defs: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, (line, s)) in stmts.iter().enumerate() {
        let name = match s {
            Stmt::Input { name, .. } | Stmt::EinSum { name, .. } | Stmt::Softmax { name, .. } => {
                name
            }
            Stmt::Output { .. } => continue,
        };
        if defs.insert(name.clone(), idx).is_some() {
            return Err(syntax(*line, 1, format!("tensor `{name}` defined twice")));
        }
    }
    fn deps_of(s: &Stmt) -> Vec<&Operand> {
        match s {
            Stmt::EinSum { operands, .. } => operands.iter().collect(),
            Stmt::Softmax { operand, .. } => vec![operand],
            _ => Vec::new(),
        }
    }
    let mut stmt_inputs: Vec<Vec<usize>> = Vec::new();
    for (line, s) in &stmts {
        let mut ins = Vec::new();
        for o in deps_of(s) {
            match defs.get(&o.name) {
                Some(&d) => ins.push(d),
                None => {
                    return Err(syntax(
                        *line,
                        o.col,
                        Error::UndeclaredInput(o.name.clone()).to_string(),
                    ))
                }
            }
        }
        stmt_inputs.push(ins);
    }
    let order = super::topo_sort(&stmt_inputs).map_err(|cycle| {
        Error::Cycle(
            cycle
                .iter()
                .map(|&i| match &stmts[i].1 {
                    Stmt::Input { name, .. }
                    | Stmt::EinSum { name, .. }
                    | Stmt::Softmax { name, .. } => name.clone(),
                    Stmt::Output { name, .. } => name.clone(),
                })
                .collect(),
        )
    })?;

    // Softmax expands to several vertices, so ids are assigned while walking
    // statements in dependency order; declaration order is then restored for
    // single-vertex statements by a final renumbering.
    let mut b = GraphBuilder::new();
    let mut vid: BTreeMap<usize, usize> = BTreeMap::new();
    for &si in &order {
        let (line, s) = &stmts[si];
        let res = match s {
            Stmt::Input { name, bound } => b.input(name, Bound::new(bound.clone())),
            Stmt::EinSum { name, expr, .. } => {
                let ins: Vec<usize> = stmt_inputs[si].iter().map(|d| vid[d]).collect();
                b.einsum(name, expr.clone(), &ins)
            }
            Stmt::Softmax { name, .. } => softmax_macro(&mut b, vid[&stmt_inputs[si][0]], name),
            Stmt::Output { .. } => continue,
        };
        let id = res.map_err(|e| match e {
            e @ (Error::BoundMismatch { .. } | Error::Shape(_) | Error::InvalidExpr(_)) => {
                syntax(*line, 1, e.to_string())
            }
            other => other,
        })?;
        vid.insert(si, id);
    }
    for (line, s) in &stmts {
        if let Stmt::Output { name, col } = s {
            let d = defs.get(name).ok_or_else(|| {
                syntax(
                    *line,
                    *col,
                    Error::UndeclaredInput(name.clone()).to_string(),
                )
            })?;
            b.output(vid[d]);
        }
    }
    let built = b.build()?;
    renumber_by_declaration(built, &order, &stmts)
}

/// Reassigns ids so that tensors keep the order in which they were declared.
fn renumber_by_declaration(
    g: EinGraph,
    order: &[usize],
    stmts: &[(usize, Stmt)],
) -> Result<EinGraph> {
    // Builder ids follow `order`; collect the vertex block each statement produced.
    let mut blocks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut next = 0;
    for &si in order {
        let n = match &stmts[si].1 {
            Stmt::Output { .. } => 0,
            Stmt::Softmax { .. } => 5,
            _ => 1,
        };
        blocks.insert(si, (next..next + n).collect());
        next += n;
    }
    let mut new_id = vec![usize::MAX; g.len()];
    let mut counter = 0;
    for ids in blocks.values() {
        for &old in ids {
            new_id[old] = counter;
            counter += 1;
        }
    }
    let mut vertices: Vec<Vertex> = vec![];
    let mut by_new: Vec<(usize, Vertex)> = g
        .vertices()
        .iter()
        .map(|v| {
            let mut nv = v.clone();
            nv.id = new_id[v.id];
            nv.inputs = v.inputs.iter().map(|&u| new_id[u]).collect();
            (nv.id, nv)
        })
        .collect();
    by_new.sort_by_key(|(id, _)| *id);
    vertices.extend(by_new.into_iter().map(|(_, v)| v));
    let outputs = g.outputs().iter().map(|&o| new_id[o]).collect();
    EinGraph::new(vertices, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_graph() {
        let g = parse_eingraph(
            "input X:[100,200]\ninput Y:[200,50]\nZ[i,k] = sum[j] mul(X[i,j], Y[j,k])\noutput Z",
        )
        .unwrap();
        assert_eq!(g.len(), 3);
        let z = g.by_name("Z").unwrap();
        assert_eq!(g.vertex(z).bound, Bound::from([100, 50]));
        assert_eq!(g.outputs(), &[z]);
        assert_eq!(g.vertex(z).inputs, vec![0, 1]);
    }

    #[test]
    fn unary_map() {
        let g = parse_eingraph("input A:[4]\nB[i] = map relu(A[i])\noutput B").unwrap();
        let b = g.vertex(1);
        assert_eq!(b.bound, Bound::from([4]));
        assert_eq!(b.expr.as_ref().unwrap().arity(), 1);
    }

    #[test]
    fn repeated_label_within_operand() {
        let err = parse_eingraph("Z[i,k] = sum[j] mul(X[i,i], Y[j,k])").unwrap_err();
        match err {
            Error::Syntax {
                line,
                column,
                message,
            } => {
                assert_eq!(line, 1);
                assert_eq!(column, 25);
                assert!(message.contains("repeated"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_position() {
        let err = parse_eingraph("input X:[2,2]\nZ[i] = sum[j] mul(X[i,j] Y[j])").unwrap_err();
        assert!(
            matches!(
                err,
                Error::Syntax {
                    line: 2,
                    column: 26,
                    ..
                }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn bound_mismatch() {
        let err =
            parse_eingraph("input X:[2,3]\ninput Y:[4,5]\nZ[i,k] = sum[j] mul(X[i,j], Y[j,k])")
                .unwrap_err();
        assert!(
            matches!(err, Error::Syntax { line: 3, ref message, .. } if message.contains("mismatch"))
        );
    }

    #[test]
    fn cycle_and_undeclared() {
        let err = parse_eingraph("A[i] = map relu(B[i])\nB[i] = map neg(A[i])").unwrap_err();
        assert!(matches!(err, Error::Cycle(ref c) if c.len() == 2));
        let err = parse_eingraph("B[i] = map neg(Q[i])").unwrap_err();
        assert!(matches!(err, Error::Syntax { ref message, .. } if message.contains("undeclared")));
    }

    #[test]
    fn forward_reference_keeps_declaration_ids() {
        let g = parse_eingraph("B[i] = map neg(A[i])\ninput A:[3]\noutput B").unwrap();
        assert_eq!(g.vertex(0).name, "B");
        assert_eq!(g.vertex(1).name, "A");
        assert_eq!(g.vertex(0).inputs, vec![1]);
        assert_eq!(g.topo_order(), &[1, 0]);
    }

    #[test]
    fn aggregation_labels_must_match() {
        assert!(parse_eingraph("input X:[2,2]\nZ[i] = sum[k] map identity(X[i,j])").is_err());
        assert!(parse_eingraph("input X:[2,2]\nZ[i] = map identity(X[i,j])").is_err());
        let g = parse_eingraph("input X:[2,3]\nZ[i] = max[j] map identity(X[i,j])").unwrap();
        assert_eq!(g.vertex(1).bound, Bound::from([2]));
    }

    #[test]
    fn softmax_statement_expands() {
        let g = parse_eingraph("input X:[2,3]\nY = softmax(X)\noutput Y").unwrap();
        assert_eq!(g.len(), 6);
        let y = g.by_name("Y").unwrap();
        assert_eq!(g.vertex(y).bound, Bound::from([2, 3]));
        assert_eq!(g.outputs(), &[y]);
    }

    #[test]
    fn scale_constant_and_text_round_trip() {
        let text = "input A:[2,2]\nB[i,j] = map scale(-0.35355339059327373)(A[i,j])\nC[i] = sum[j] add(B[i,j], A[i,j])\noutput C\n";
        let g = parse_eingraph(text).unwrap();
        let again = parse_eingraph(&g.to_text()).unwrap();
        assert_eq!(g, again);
    }
}
