//! Bounded reachability receptive fields.
//!
//! `N_k(v)` is the set of ancestors and descendants of `v` within `k` hops,
//! excluding `v` itself. Fields are built with one depth-limited BFS in each
//! direction per node, which is `O(|V|·|E|)` overall and independent across
//! nodes.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dag::Dag;
use crate::error::{Error, Result};

/// Additive mask value for blocked pairs. Finite so `0 · MASK_BLOCKED` stays a number.
pub const MASK_BLOCKED: f64 = -1e30;

/// Hop limit of the reachability relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bound {
    Hops(usize),
    Unbounded,
}

impl Bound {
    pub fn limit(self) -> usize {
        match self {
            Bound::Hops(k) => k,
            Bound::Unbounded => usize::MAX,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Hops(k) => write!(f, "{k}"),
            Bound::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for Bound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" | "unbounded" => Ok(Bound::Unbounded),
            other => match other.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Bound::Hops(k)),
                _ => Err(Error::InvalidConfig(format!(
                    "reachability bound must be a positive integer or `inf`, got `{other}`"
                ))),
            },
        }
    }
}

/// Per-node receptive fields `N_k(v)`, each sorted ascending and never containing `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityIndex {
    k: Bound,
    neighbors: Vec<Vec<usize>>,
}

/// Summary of receptive-field sizes (self excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ReachStats {
    pub n: usize,
    /// `Σ_v |N_k(v)|`.
    pub total: usize,
    pub avg_n_k: f64,
    pub max_n_k: usize,
    /// `histogram[s]` = number of nodes with `|N_k(v)| = s`.
    pub histogram: Vec<usize>,
}

impl ReachStats {
    /// `avg_n_k` rounded to two decimals, from the exact ratio `total / n`.
    pub fn avg_display(&self) -> String {
        if self.n == 0 {
            return "0.00".to_string();
        }
        // Integer rounding of total*100/n avoids any binary-fraction surprises.
        let scaled = (self.total as u128 * 200 + self.n as u128) / (2 * self.n as u128);
        format!("{}.{:02}", scaled / 100, scaled % 100)
    }
}

/// Compressed receptive fields used for sparse aggregation: `N_k(v)`, optionally with `v`
/// merged in, stored contiguously per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionFields {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl AttentionFields {
    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn field(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Number of (node, attended node) pairs.
    pub fn pair_count(&self) -> usize {
        self.targets.len()
    }
}

impl ReachabilityIndex {
    /// Build on the calling thread.
    pub fn build(g: &Dag, k: Bound) -> Self {
        let mut scratch = Scratch::new(g.n());
        let neighbors = (0..g.n()).map(|v| field_of(g, v, k, &mut scratch)).collect();
        Self { k, neighbors }
    }

    /// Build with per-node BFS spread over at most `threads` workers. The result is
    /// identical to [`ReachabilityIndex::build`].
    pub fn build_parallel(g: &Dag, k: Bound, threads: usize) -> Self {
        if threads <= 1 {
            return Self::build(g, k);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        let neighbors = pool.install(|| {
            (0..g.n())
                .into_par_iter()
                .map_init(|| Scratch::new(g.n()), |scratch, v| field_of(g, v, k, scratch))
                .collect()
        });
        Self { k, neighbors }
    }

    /// Wrap precomputed fields, checking the structural invariants.
    pub fn from_neighbors(k: Bound, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (v, field) in neighbors.iter().enumerate() {
            if field.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::ShapeMismatch(format!("field of node {v} is not strictly sorted")));
            }
            if let Some(&u) = field.iter().find(|&&u| u >= n || u == v) {
                return Err(Error::ShapeMismatch(format!("field of node {v} contains invalid id {u}")));
            }
        }
        Ok(Self { k, neighbors })
    }

    pub fn k(&self) -> Bound {
        self.k
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// `Σ_v |N_k(v)|`.
    pub fn total_size(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> ReachStats {
        let n = self.n();
        let sizes = self.sizes();
        let total: usize = sizes.iter().sum();
        let max_n_k = sizes.iter().copied().max().unwrap_or(0);
        let mut histogram = vec![0; max_n_k + 1];
        for &s in &sizes {
            histogram[s] += 1;
        }
        let avg_n_k = if n == 0 { 0.0 } else { total as f64 / n as f64 };
        ReachStats { n, total, avg_n_k, max_n_k, histogram }
    }

    /// Dense additive mask: `0` where attention is allowed, [`MASK_BLOCKED`] elsewhere.
    pub fn dense_mask(&self, include_self: bool) -> Array2<f64> {
        let n = self.n();
        let mut mask = Array2::from_elem((n, n), MASK_BLOCKED);
        for (v, field) in self.neighbors.iter().enumerate() {
            for &u in field {
                mask[[v, u]] = 0.0;
            }
            if include_self {
                mask[[v, v]] = 0.0;
            }
        }
        mask
    }

    pub fn attention_fields(&self, include_self: bool) -> AttentionFields {
        let mut offsets = Vec::with_capacity(self.n() + 1);
        let mut targets = Vec::with_capacity(self.total_size() + if include_self { self.n() } else { 0 });
        offsets.push(0);
        for (v, field) in self.neighbors.iter().enumerate() {
            let split = field.partition_point(|&u| u < v);
            targets.extend_from_slice(&field[..split]);
            if include_self {
                targets.push(v);
            }
            targets.extend_from_slice(&field[split..]);
            offsets.push(targets.len());
        }
        AttentionFields { offsets, targets }
    }

    /// Text form: a `DAGREACH v1 n=<n> k=<k|inf>` header, then `<v>: <ids>` per node.
    pub fn to_text(&self) -> String {
        let mut out = format!("DAGREACH v1 n={} k={}\n", self.n(), self.k);
        for (v, field) in self.neighbors.iter().enumerate() {
            out.push_str(&v.to_string());
            out.push(':');
            if !field.is_empty() {
                out.push(' ');
                let ids: Vec<String> = field.iter().map(usize::to_string).collect();
                out.push_str(&ids.join(","));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (n, k) = match parts.as_slice() {
            ["DAGREACH", "v1", n, k] => {
                let n = n
                    .strip_prefix("n=")
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(1, "bad node count"))?;
                let k = k
                    .strip_prefix("k=")
                    .ok_or_else(|| parse_err(1, "bad bound"))?
                    .parse::<Bound>()
                    .map_err(|e| parse_err(1, &e.to_string()))?;
                (n, k)
            }
            _ => return Err(parse_err(1, "expected `DAGREACH v1 n=<n> k=<k>` header")),
        };
        let mut neighbors = Vec::with_capacity(n);
        for (i, line) in lines {
            let lineno = i + 1;
            let (v, ids) = line.split_once(':').ok_or_else(|| parse_err(lineno, "missing `:`"))?;
            let v: usize = v.trim().parse().map_err(|_| parse_err(lineno, "bad node id"))?;
            if v != neighbors.len() {
                return Err(parse_err(lineno, &format!("expected node {}, found {v}", neighbors.len())));
            }
            let ids = ids.trim();
            let field = if ids.is_empty() {
                Vec::new()
            } else {
                ids.split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| parse_err(lineno, "bad neighbor id"))?
            };
            neighbors.push(field);
        }
        if neighbors.len() != n {
            return Err(parse_err(n + 1, &format!("expected {n} node lines, found {}", neighbors.len())));
        }
        Self::from_neighbors(k, neighbors)
    }
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::ParseError { line, msg: msg.to_string() }
}

struct Scratch {
    stamp: Vec<usize>,
    epoch: usize,
    frontier: Vec<usize>,
    next: Vec<usize>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self { stamp: vec![0; n], epoch: 0, frontier: Vec::new(), next: Vec::new() }
    }
}

fn field_of(g: &Dag, v: usize, k: Bound, scratch: &mut Scratch) -> Vec<usize> {
    let mut field = Vec::new();
    bfs(g.fwd_adj(), v, k.limit(), scratch, &mut field);
    bfs(g.bwd_adj(), v, k.limit(), scratch, &mut field);
    // Ancestors and descendants are disjoint in a DAG, so a sort is enough.
    field.sort_unstable();
    field
}

/// Level-synchronous BFS from `start` over `adj`, at most `limit` levels deep.
fn bfs(adj: &[Vec<usize>], start: usize, limit: usize, s: &mut Scratch, out: &mut Vec<usize>) {
    s.epoch += 1;
    let epoch = s.epoch;
    s.stamp[start] = epoch;
    s.frontier.clear();
    s.frontier.push(start);
    let mut level = 0;
    while !s.frontier.is_empty() && level < limit {
        s.next.clear();
        for &u in &s.frontier {
            for &w in &adj[u] {
                if s.stamp[w] != epoch {
                    s.stamp[w] = epoch;
                    s.next.push(w);
                    out.push(w);
                }
            }
        }
        std::mem::swap(&mut s.frontier, &mut s.next);
        level += 1;
    }
}
