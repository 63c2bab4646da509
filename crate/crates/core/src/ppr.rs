//! Personalized PageRank on a DAG and on its reverse.
//!
//! The walk moves along edge direction: from `x` it steps to a uniformly chosen
//! successor, so the column-stochastic transition matrix is
//! `P[y][x] = 1 / outdeg(x)` for every edge `x → y`. Nodes without successors
//! keep their mass (`P[x][x] = 1`), which makes the degree normalization well
//! defined without adding mass anywhere new. With this orientation the PageRank
//! vector of `G` rooted at `x` is supported exactly on the descendants of `x`
//! (plus `x`), and that of the reversed graph on its ancestors.

use nalgebra::{DMatrix, DVector};

use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::reach::{Bound, ReachabilityIndex};

pub const DEFAULT_ALPHA: f64 = 0.15;
pub const DEFAULT_TOL: f64 = 1e-12;
/// Entries below this count as structurally zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;
/// Entries expected to be non-zero must exceed this.
pub const NONZERO_THRESHOLD: f64 = 1e-10;

const MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PprResult {
    pub pi: Vec<f64>,
    pub alpha: f64,
    pub root: usize,
    pub iterations: usize,
    /// L1 norm of the last update.
    pub residual: f64,
}

fn validate(g: &Dag, root: usize, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if root >= g.n() {
        return Err(Error::OutOfRangeNode { node: root, n: g.n() });
    }
    Ok(())
}

/// Fixed-point iteration `π ← (1−α)·P·π + α·i_root` from `π = i_root` until the L1
/// change drops below `tol`.
pub fn ppr_solve(g: &Dag, root: usize, alpha: f64, tol: f64) -> Result<PprResult> {
    validate(g, root, alpha)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidTolerance(tol));
    }
    let n = g.n();
    let mut pi = vec![0.0; n];
    pi[root] = 1.0;
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while residual >= tol && iterations < MAX_ITERATIONS {
        next.fill(0.0);
        for (x, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let succ = g.successors(x);
            if succ.is_empty() {
                next[x] += (1.0 - alpha) * mass;
            } else {
                let share = (1.0 - alpha) * mass / succ.len() as f64;
                for &y in succ {
                    next[y] += share;
                }
            }
        }
        next[root] += alpha;
        residual = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        iterations += 1;
    }
    Ok(PprResult { pi, alpha, root, iterations, residual })
}

/// Dense transition matrix `P` (see module docs).
pub fn transition_matrix(g: &Dag) -> DMatrix<f64> {
    let n = g.n();
    let mut p = DMatrix::zeros(n, n);
    for x in 0..n {
        let succ = g.successors(x);
        if succ.is_empty() {
            p[(x, x)] = 1.0;
        }
        for &y in succ {
            p[(y, x)] = 1.0 / succ.len() as f64;
        }
    }
    p
}

/// Direct solve of `(I − (1−α)·P)·π = α·i_root` by LU decomposition.
pub fn ppr_direct(g: &Dag, root: usize, alpha: f64) -> Result<Vec<f64>> {
    validate(g, root, alpha)?;
    let n = g.n();
    let system = DMatrix::identity(n, n) - transition_matrix(g) * (1.0 - alpha);
    let mut rhs = DVector::zeros(n);
    rhs[root] = alpha;
    let pi = system.lu().solve(&rhs).ok_or(Error::Singular("personalized PageRank system"))?;
    Ok(pi.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    pub ok: bool,
    /// First node where the observed support disagrees with reachability.
    pub witness: Option<usize>,
    /// Nodes with `π_G[y] + π_rev[y] < ZERO_THRESHOLD`.
    pub zero_set: Vec<usize>,
    /// Smallest combined mass on a node reachable from the root.
    pub min_support: f64,
}

/// Check that the combined mass `π_G(root) + π_reverse(G)(root)` vanishes exactly on
/// the nodes that are neither ancestors nor descendants of `root`.
pub fn support_check(g: &Dag, root: usize, alpha: f64) -> Result<SupportReport> {
    let forward = ppr_direct(g, root, alpha)?;
    let backward = ppr_direct(&g.reverse(), root, alpha)?;
    let combined: Vec<f64> = forward.iter().zip(&backward).map(|(a, b)| a + b).collect();

    let idx = ReachabilityIndex::build(g, Bound::Unbounded);
    let mut related = vec![false; g.n()];
    related[root] = true;
    for &u in idx.neighbors(root) {
        related[u] = true;
    }

    let zero_set: Vec<usize> = (0..g.n()).filter(|&y| combined[y] < ZERO_THRESHOLD).collect();
    let witness = (0..g.n()).find(|&y| {
        if related[y] {
            combined[y] <= NONZERO_THRESHOLD
        } else {
            combined[y] >= ZERO_THRESHOLD
        }
    });
    let min_support = (0..g.n())
        .filter(|&y| related[y])
        .map(|y| combined[y])
        .fold(f64::INFINITY, f64::min);
    Ok(SupportReport { ok: witness.is_none(), witness, zero_set, min_support })
}
