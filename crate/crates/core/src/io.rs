//! Edge-list files and dataset statistics.
//!
//! File layout:
//!
//! ```text
//! # n=<n> d=<d>
//! <u> <v>              one line per edge u → v
//! F <v> <x_1> … <x_d>  optional feature row; missing rows are all zeros
//! ```
//!
//! Blank lines and further `#` comment lines are ignored.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::reach::{Bound, ReachabilityIndex};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::ParseError { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?;
    let mut n = None;
    let mut d = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("n=") {
            n = v.parse().ok();
        } else {
            let v = tok.strip_prefix("d=")?;
            d = v.parse().ok();
        }
    }
    Some((n?, d?))
}

pub fn parse_edge_list(text: &str) -> Result<Dag> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (n, d) = lines
        .next()
        .and_then(|(_, l)| parse_header(l))
        .ok_or_else(|| parse_err(1, "expected header `# n=<n> d=<d>`"))?;
    if d == 0 {
        return Err(parse_err(1, "feature dimension must be at least 1"));
    }
    let mut edges = Vec::new();
    let mut features = Array2::zeros((n, d));
    let check = |node: usize| if node < n { Ok(node) } else { Err(Error::OutOfRangeNode { node, n }) };
    for (lineno, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        if let Some(rest) = line.strip_prefix('F').filter(|r| r.starts_with(char::is_whitespace)) {
            let mut toks = rest.split_whitespace();
            let v: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(lineno, "feature line needs a node id"))?;
            let v = check(v)?;
            let row: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(lineno, "bad feature value"))?;
            if row.len() != d {
                return Err(parse_err(lineno, format!("expected {d} feature values, found {}", row.len())));
            }
            for (dst, x) in features.row_mut(v).iter_mut().zip(row) {
                *dst = x;
            }
            continue;
        }
        let mut node = || -> Result<usize> {
            let tok = toks.next().ok_or_else(|| parse_err(lineno, "expected `<u> <v>`"))?;
            check(tok.parse().map_err(|_| parse_err(lineno, format!("bad node id `{tok}`")))?)
        };
        let (u, v) = (node()?, node()?);
        if toks.next().is_some() {
            return Err(parse_err(lineno, "trailing tokens after edge"));
        }
        edges.push((u, v));
    }
    Dag::new(n, &edges, features)
}

pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Dag> {
    parse_edge_list(&fs::read_to_string(path)?)
}

/// Inverse of [`parse_edge_list`]; every feature row is written so loading is exact.
pub fn emit_edge_list(g: &Dag) -> String {
    let mut out = format!("# n={} d={}\n", g.n(), g.d());
    for &(u, v) in g.edges() {
        out.push_str(&format!("{u} {v}\n"));
    }
    for (v, row) in g.features().rows().into_iter().enumerate() {
        out.push_str(&format!("F {v}"));
        for x in row {
            out.push_str(&format!(" {x}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_edge_list(g: &Dag, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, emit_edge_list(g))?;
    Ok(())
}

/// Structural quantities of one graph: size, depth, `Δ⁺` and receptive-field sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n: usize,
    pub edges: usize,
    pub depth: usize,
    pub max_outdegree: usize,
    pub k: Bound,
    pub total_n_k: usize,
    pub avg_n_k: String,
    pub max_n_k: usize,
}

pub fn dataset_stats(g: &Dag, k: Bound) -> DatasetStats {
    let reach = ReachabilityIndex::build(g, k).stats();
    DatasetStats {
        n: g.n(),
        edges: g.edge_count(),
        depth: g.depth().dag_depth,
        max_outdegree: g.max_outdegree(),
        k,
        total_n_k: reach.total,
        avg_n_k: reach.avg_display(),
        max_n_k: reach.max_n_k,
    }
}

impl DatasetStats {
    fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("edges", self.edges.to_string()),
            ("depth", self.depth.to_string()),
            ("max_outdegree", self.max_outdegree.to_string()),
            ("k", self.k.to_string()),
            ("total_n_k", self.total_n_k.to_string()),
            ("avg_n_k", self.avg_n_k.clone()),
            ("max_n_k", self.max_n_k.to_string()),
        ]
    }

    /// One `key=value` line per quantity.
    pub fn to_key_values(&self) -> String {
        self.rows().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.rows() {
            writeln!(f, "{k:<14} {v:>10}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIAMOND: &str = "# n=4 d=1\n0 1\n0 2\n1 3\n2 3\n";

    #[test]
    fn single_node_file() {
        let g = parse_edge_list("# n=1 d=1\n").unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.features()[[0, 0]], 0.0);
    }

    #[test]
    fn diamond_file() {
        let g = parse_edge_list(DIAMOND).unwrap();
        assert_eq!(g.predecessors(3), &[1, 2]);
        let stats = dataset_stats(&g, Bound::Unbounded);
        assert_eq!((stats.n, stats.edges, stats.depth, stats.max_outdegree), (4, 4, 2, 2));
        assert_eq!(stats.avg_n_k, "2.50");
        assert!(stats.to_key_values().contains("avg_n_k=2.50\n"));
    }

    #[test]
    fn cyclic_file() {
        assert!(matches!(parse_edge_list("# n=2 d=1\n1 0\n0 1\n"), Err(Error::CycleDetected(_))));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_edge_list("# n=3 d=2\n0 1\n\n1 x\n") {
            Err(Error::ParseError { line: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_edge_list("# n=3 d=2\nF 1 0.5\n") {
            Err(Error::ParseError { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_edge_list("0 1\n"), Err(Error::ParseError { line: 1, .. })));
        assert!(matches!(parse_edge_list("# n=2 d=1\n0 5\n"), Err(Error::OutOfRangeNode { node: 5, n: 2 })));
    }

    #[test]
    fn features_and_round_trip() {
        let text = "# n=3 d=2\n# comment\n0 1\n0 2\nF 2 0.25 -1e-7\n";
        let g = parse_edge_list(text).unwrap();
        assert_eq!(g.features().row(2).to_vec(), vec![0.25, -1e-7]);
        assert_eq!(g.features().row(0).to_vec(), vec![0.0, 0.0]);
        let back = parse_edge_list(&emit_edge_list(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn edgeless_stats() {
        let g = parse_edge_list("# n=3 d=1\n").unwrap();
        let stats = dataset_stats(&g, Bound::Hops(2));
        assert_eq!(stats.depth, 0);
        assert_eq!(stats.avg_n_k, "0.00");
    }
}
