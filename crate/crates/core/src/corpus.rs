//! Formula files: one loss per line, optionally labelled.
//!
//! ```text
//! # comment
//! seg/gacc: exp(square(add(y, neg(sqrt(yhat)))))
//! cls=neg(mul(y, log(yhat))); reg=neg(log(mul(i, inv(e))))
//! ```

use crate::error::{Error, Result};
use crate::expr::MultiBranchLoss;
use crate::metrics::Metric;

/// Published searched losses shipped with the crate.
pub const DISCOVERED: &str = include_str!("../../../formulas/discovered.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct FormulaLine {
    /// 1-based line number in the source text.
    pub line: usize,
    pub label: Option<String>,
    pub loss: MultiBranchLoss,
}

impl FormulaLine {
    /// Label components split on `/`.
    pub fn label_parts(&self) -> Vec<&str> {
        self.label.as_deref().map(|l| l.split('/').collect()).unwrap_or_default()
    }

    /// The task named by the label, if any.
    pub fn task(&self) -> Option<&str> {
        self.label_parts().first().copied()
    }

    /// The metric named by the label when it is one this crate implements.
    pub fn metric(&self) -> Option<Metric> {
        self.label_parts().get(1).and_then(|m| m.parse().ok())
    }
}

fn split_label(text: &str) -> (Option<&str>, &str) {
    match text.split_once(':') {
        Some((label, rest)) if !label.contains('(') => (Some(label.trim()), rest),
        _ => (None, text),
    }
}

/// `task/metric/branch` labels name the branch; anything shorter gets `loss`.
fn branch_name(label: Option<&str>) -> &str {
    match label.map(|l| l.split('/').collect::<Vec<_>>()) {
        Some(parts) if parts.len() >= 3 => parts[parts.len() - 1],
        _ => "loss",
    }
}

/// Parses every non-blank, non-comment line. Each element is either a
/// formula or the parse error of that line.
pub fn parse_formula_lines(text: &str) -> Vec<(usize, Result<FormulaLine>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(k, raw)| {
            let line = k + 1;
            let (label, body) = split_label(raw.trim());
            let parsed = MultiBranchLoss::parse(body, branch_name(label))
                .map(|loss| FormulaLine { line, label: label.map(str::to_owned), loss })
                .map_err(|e| Error::Config(format!("line {line}: {e}")));
            (line, parsed)
        })
        .collect()
}

/// The shipped corpus. Panics if the embedded file does not parse.
pub fn discovered() -> Vec<FormulaLine> {
    parse_formula_lines(DISCOVERED)
        .into_iter()
        .map(|(line, r)| r.unwrap_or_else(|e| panic!("embedded corpus line {line}: {e}")))
        .collect()
}
