//! Prefix function-call notation for loss formulas, e.g.
//! `mul(neg(y), log(yhat))`.
//!
//! Operators use their lowercase names (`add`, `mean_nhw`, `max_pool`, ...),
//! leaves are `y`, `yhat`, `one` (or `1`) and the box areas `i`, `u`, `e`.

use crate::error::{Error, Result};

use super::{Leaf, Node, Op};

pub fn format_formula(node: &Node) -> String {
    let mut out = String::new();
    write_node(node, &mut out);
    out
}

fn write_node(node: &Node, out: &mut String) {
    match node {
        Node::Leaf(l) => out.push_str(l.name()),
        Node::Op(op, ch) => {
            out.push_str(op.name());
            out.push('(');
            for (i, c) in ch.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_node(c, out);
            }
            out.push(')');
        }
    }
}

pub fn parse_formula(text: &str) -> Result<Node> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let node = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        let msg = if p.src[p.pos] == b')' {
            "unbalanced `)`".to_string()
        } else {
            format!("unexpected `{}` after complete formula", p.src[p.pos] as char)
        };
        return Err(Error::parse(p.pos, msg));
    }
    Ok(node)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn ident(&mut self) -> Result<(usize, &'a str)> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.src.get(start) {
                None => Error::parse(start, "unexpected end of formula"),
                Some(b'(') | Some(b')') => Error::parse(start, "unbalanced parentheses"),
                Some(&c) => Error::parse(start, format!("unexpected `{}`", c as char)),
            });
        }
        // Identifiers are ASCII by construction.
        let src: &'a [u8] = self.src;
        let name = std::str::from_utf8(&src[start..self.pos]).expect("ascii identifier");
        Ok((start, name))
    }

    fn expr(&mut self) -> Result<Node> {
        let (start, name) = self.ident()?;
        if let Some(op) = Op::from_name(name) {
            self.op_call(start, op)
        } else if let Some(leaf) = Leaf::from_name(name) {
            if self.peek() == Some(b'(') {
                return Err(Error::parse(self.pos, format!("input `{name}` takes no arguments")));
            }
            Ok(Node::Leaf(leaf))
        } else {
            Err(Error::parse(start, format!("unknown symbol `{name}`")))
        }
    }

    fn op_call(&mut self, start: usize, op: Op) -> Result<Node> {
        if self.peek() != Some(b'(') {
            return Err(Error::parse(self.pos, format!("expected `(` after `{}`", op.name())));
        }
        self.pos += 1;
        let mut children = Vec::with_capacity(op.arity());
        loop {
            children.push(self.expr()?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                None => return Err(Error::parse(self.pos, "unbalanced parentheses: missing `)`")),
                Some(c) => {
                    return Err(Error::parse(self.pos, format!("expected `,` or `)`, found `{}`", c as char)))
                }
            }
        }
        if children.len() != op.arity() {
            return Err(Error::parse(
                start,
                format!("arity mismatch: `{}` takes {} argument(s), got {}", op.name(), op.arity(), children.len()),
            ));
        }
        Ok(Node::Op(op, children))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{random_graph, InputKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_round_trip() {
        let text = "mul(neg(y), log(yhat))";
        let node = parse_formula(text).unwrap();
        assert_eq!(
            node,
            Node::binary(
                Op::Mul,
                Node::unary(Op::Neg, Node::leaf(Leaf::Y)),
                Node::unary(Op::Log, Node::leaf(Leaf::YHat))
            )
        );
        assert_eq!(format_formula(&node), text);
    }

    #[test]
    fn whitespace_and_numeric_one() {
        let node = parse_formula("  add( 1 ,\n yhat ) ").unwrap();
        assert_eq!(format_formula(&node), "add(one, yhat)");
    }

    #[test]
    fn errors_carry_positions() {
        match parse_formula("add(y)") {
            Err(Error::Parse { pos: 0, msg }) => assert!(msg.contains("arity")),
            other => panic!("{other:?}"),
        }
        match parse_formula("neg(foo)") {
            Err(Error::Parse { pos: 4, msg }) => assert!(msg.contains("unknown symbol")),
            other => panic!("{other:?}"),
        }
        match parse_formula("neg(y") {
            Err(Error::Parse { pos: 5, msg }) => assert!(msg.contains("unbalanced")),
            other => panic!("{other:?}"),
        }
        match parse_formula("neg(y))") {
            Err(Error::Parse { pos: 6, msg }) => assert!(msg.contains("unbalanced")),
            other => panic!("{other:?}"),
        }
        assert!(parse_formula("").is_err());
        assert!(parse_formula("y(one)").is_err());
        assert!(parse_formula("neg y").is_err());
    }

    proptest! {
        #[test]
        fn generated_graphs_round_trip(seed in any::<u64>(), depth in 1usize..5, areas in any::<bool>()) {
            let inputs = if areas { InputKind::Areas } else { InputKind::Dense };
            let g = random_graph("g", inputs, depth, &mut ChaCha8Rng::seed_from_u64(seed));
            let text = format_formula(&g.body);
            prop_assert_eq!(parse_formula(&text).unwrap(), g.body);
        }
    }
}
