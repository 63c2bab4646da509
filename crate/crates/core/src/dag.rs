//! Validated, immutable directed acyclic graphs with node features.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A directed acyclic graph over dense node ids `0..n` with an `n × d` feature matrix.
///
/// Construction validates everything up front; afterwards the graph is read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    n: usize,
    edges: Vec<(usize, usize)>,
    fwd: Vec<Vec<usize>>,
    bwd: Vec<Vec<usize>>,
    features: Array2<f64>,
    topo: Vec<usize>,
}

/// Longest-path distance of every node from the sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthVector {
    pub depth: Vec<usize>,
    pub dag_depth: usize,
}

impl Dag {
    /// Validate `edges` and `features` and build both adjacency directions.
    pub fn new(n: usize, edges: &[(usize, usize)], features: Array2<f64>) -> Result<Self> {
        if features.nrows() != n {
            return Err(Error::FeatureShapeMismatch { expected: n, got: features.nrows() });
        }
        if features.ncols() == 0 {
            return Err(Error::ShapeMismatch("feature dimension must be at least 1".into()));
        }
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= n {
                    return Err(Error::OutOfRangeNode { node, n });
                }
            }
            if u == v {
                return Err(Error::SelfLoop(u));
            }
            fwd[u].push(v);
            bwd[v].push(u);
        }
        for (u, succ) in fwd.iter_mut().enumerate() {
            succ.sort_unstable();
            if let Some(w) = succ.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicateEdge(u, w[0]));
            }
        }
        for pred in &mut bwd {
            pred.sort_unstable();
        }
        let topo = kahn(&fwd, &bwd)?;
        let mut edges = edges.to_vec();
        edges.sort_unstable();
        Ok(Self { n, edges, fwd, bwd, features, topo })
    }

    /// Graph with `n` nodes, the given edges and an all-zero `n × d` feature matrix.
    pub fn with_zero_features(n: usize, edges: &[(usize, usize)], d: usize) -> Result<Self> {
        Self::new(n, edges, Array2::zeros((n, d)))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        &self.fwd[v]
    }

    pub fn predecessors(&self, v: usize) -> &[usize] {
        &self.bwd[v]
    }

    pub fn fwd_adj(&self) -> &[Vec<usize>] {
        &self.fwd
    }

    pub fn bwd_adj(&self) -> &[Vec<usize>] {
        &self.bwd
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Same structure with a different feature matrix.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.n {
            return Err(Error::FeatureShapeMismatch { expected: self.n, got: features.nrows() });
        }
        Ok(Self { features, ..self.clone() })
    }

    /// Topological order with ties broken by ascending node id.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.n).filter(|&v| self.bwd[v].is_empty()).collect()
    }

    pub fn sinks(&self) -> Vec<usize> {
        (0..self.n).filter(|&v| self.fwd[v].is_empty()).collect()
    }

    /// Maximal out-degree (Δ⁺); zero for edgeless graphs.
    pub fn max_outdegree(&self) -> usize {
        self.fwd.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Depth of each node: 0 for sources, otherwise 1 + the maximal depth of a predecessor.
    pub fn depth(&self) -> DepthVector {
        let mut depth = vec![0usize; self.n];
        for &v in &self.topo {
            depth[v] = self.bwd[v].iter().map(|&u| depth[u] + 1).max().unwrap_or(0);
        }
        let dag_depth = depth.iter().copied().max().unwrap_or(0);
        DepthVector { depth, dag_depth }
    }

    /// The graph with every edge inverted; features are kept.
    pub fn reverse(&self) -> Dag {
        let mut edges: Vec<_> = self.edges.iter().map(|&(u, v)| (v, u)).collect();
        edges.sort_unstable();
        // Reversal preserves acyclicity; only the tie-broken order has to be recomputed.
        let topo = kahn(&self.bwd, &self.fwd).expect("reverse of a DAG is acyclic");
        Dag {
            n: self.n,
            edges,
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
            features: self.features.clone(),
            topo,
        }
    }

    /// Relabel node `v` as `perm[v]`. `perm` must be a permutation of `0..n`.
    pub fn permute(&self, perm: &[usize]) -> Result<Dag> {
        if perm.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.n
            )));
        }
        let mut seen = vec![false; self.n];
        for &p in perm {
            if p >= self.n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::ShapeMismatch(format!("{perm:?} is not a permutation of 0..{}", self.n)));
            }
        }
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut features = Array2::zeros(self.features.raw_dim());
        for (v, &p) in perm.iter().enumerate() {
            features.row_mut(p).assign(&self.features.row(v));
        }
        Dag::new(self.n, &edges, features)
    }
}

/// Kahn's algorithm with a min-heap so that ties resolve to the smallest id.
fn kahn(fwd: &[Vec<usize>], bwd: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = fwd.len();
    let mut indeg: Vec<usize> = bwd.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(u)) = ready.pop() {
        order.push(u);
        for &v in &fwd[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.push(Reverse(v));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(Error::CycleDetected(find_cycle(&indeg, bwd)))
}

/// Every node left with positive in-degree after Kahn has a predecessor that is
/// also left over, so walking predecessors must revisit a node.
fn find_cycle(indeg: &[usize], bwd: &[Vec<usize>]) -> Vec<usize> {
    let start = indeg.iter().position(|&d| d > 0).expect("a cycle exists");
    let mut seen_at = vec![usize::MAX; indeg.len()];
    let mut walk = Vec::new();
    let mut v = start;
    while seen_at[v] == usize::MAX {
        seen_at[v] = walk.len();
        walk.push(v);
        v = *bwd[v]
            .iter()
            .find(|&&u| indeg[u] > 0)
            .expect("leftover node has a leftover predecessor");
    }
    // walk[seen_at[v]..] follows edges backwards; flip it into edge direction and close the loop.
    let mut cycle: Vec<usize> = walk[seen_at[v]..].iter().rev().copied().collect();
    cycle.push(cycle[0]);
    cycle
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> Dag {
        Dag::with_zero_features(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], 1).unwrap()
    }

    /// Longest path to `v` by enumerating every path that ends there.
    fn brute_depth(g: &Dag, v: usize) -> usize {
        g.predecessors(v).iter().map(|&u| brute_depth(g, u) + 1).max().unwrap_or(0)
    }

    #[test]
    fn single_node() {
        let g = Dag::with_zero_features(1, &[], 1).unwrap();
        assert_eq!(g.fwd_adj(), &[Vec::<usize>::new()]);
        assert_eq!(g.depth().dag_depth, 0);
        assert_eq!(g.reverse(), g);
    }

    #[test]
    fn two_cycle_is_rejected() {
        match Dag::with_zero_features(2, &[(0, 1), (1, 0)], 1) {
            Err(Error::CycleDetected(cycle)) => {
                assert_eq!(cycle.first(), cycle.last());
                assert_eq!(cycle.len(), 3);
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn reported_cycle_is_a_real_cycle() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 1), (3, 4)];
        let Err(Error::CycleDetected(cycle)) = Dag::with_zero_features(5, &edges, 1) else {
            panic!("expected a cycle");
        };
        assert_eq!(cycle.first(), cycle.last());
        for w in cycle.windows(2) {
            assert!(edges.contains(&(w[0], w[1])), "{w:?} is not an edge");
        }
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            Dag::with_zero_features(2, &[(0, 1), (0, 1)], 1),
            Err(Error::DuplicateEdge(0, 1))
        ));
        assert!(matches!(Dag::with_zero_features(2, &[(1, 1)], 1), Err(Error::SelfLoop(1))));
        assert!(matches!(
            Dag::with_zero_features(2, &[(0, 2)], 1),
            Err(Error::OutOfRangeNode { node: 2, n: 2 })
        ));
        assert!(matches!(
            Dag::new(3, &[], Array2::zeros((2, 1))),
            Err(Error::FeatureShapeMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn diamond_structure() {
        let g = diamond();
        assert_eq!(g.predecessors(3), &[1, 2]);
        assert_eq!(g.topological_order(), &[0, 1, 2, 3]);
        assert_eq!(g.depth().depth, vec![0, 1, 1, 2]);
        assert_eq!(g.max_outdegree(), 2);
        assert_eq!(g.reverse().reverse(), g);
    }

    #[test]
    fn topological_tie_breaks() {
        let chain = Dag::with_zero_features(3, &[(0, 1), (1, 2)], 1).unwrap();
        assert_eq!(chain.topological_order(), &[0, 1, 2]);
        assert_eq!(chain.depth().depth, vec![0, 1, 2]);
        assert_eq!(chain.depth().dag_depth, 2);
        let isolated = Dag::with_zero_features(2, &[], 1).unwrap();
        assert_eq!(isolated.topological_order(), &[0, 1]);
        let late_source = Dag::with_zero_features(3, &[(2, 0), (1, 0)], 1).unwrap();
        assert_eq!(late_source.topological_order(), &[1, 2, 0]);
    }

    #[test]
    fn extra_branch_leaves_sink_depth() {
        let g = Dag::with_zero_features(5, &[(0, 1), (0, 2), (1, 3), (2, 3), (0, 4)], 1).unwrap();
        let depth = g.depth();
        for v in 0..5 {
            assert_eq!(depth.depth[v], brute_depth(&g, v));
        }
        assert_eq!(depth.depth[4], 1);
        assert_eq!(depth.depth[3], 2);
    }

    #[test]
    fn reverse_chain() {
        let g = Dag::with_zero_features(3, &[(0, 1), (1, 2)], 1).unwrap();
        let r = g.reverse();
        assert_eq!(r.edges(), &[(1, 0), (2, 1)]);
        assert_eq!(r.topological_order(), &[2, 1, 0]);
        assert_eq!(r.fwd_adj(), g.bwd_adj());
        assert_eq!(r.bwd_adj(), g.fwd_adj());
    }
}
