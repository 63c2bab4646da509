#![allow(dead_code)]

use dagkit::rng::SplitMix64;
use dagkit::{Bound, Dag};
use ndarray::Array2;

/// Random DAG: a random topological order, then each forward pair becomes an
/// edge with probability `p`. Node ids are shuffled so they do not follow the order.
pub fn random_dag(rng: &mut SplitMix64, n: usize, p: f64, d: usize) -> Dag {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.bernoulli(p) {
                edges.push((order[i], order[j]));
            }
        }
    }
    let features = Array2::from_shape_simple_fn((n, d), || rng.uniform(-1.0, 1.0));
    Dag::new(n, &edges, features).expect("forward edges in a fixed order are acyclic")
}

/// Random DAG with size drawn from `lo..=hi` and edge probability from `[0.02, 0.4)`.
pub fn random_dag_sized(rng: &mut SplitMix64, lo: usize, hi: usize, d: usize) -> Dag {
    let n = rng.range_inclusive(lo, hi);
    let p = rng.uniform(0.02, 0.4);
    random_dag(rng, n, p, d)
}

/// Connected DAG with the single source `0`: node `v` gets a parent below it, plus
/// extra forward edges with probability `p`.
pub fn rooted_dag(rng: &mut SplitMix64, n: usize, p: f64, d: usize) -> Dag {
    let mut edges = Vec::new();
    for v in 1..n {
        let parent = rng.below(v);
        edges.push((parent, v));
        for u in 0..v {
            if u != parent && rng.bernoulli(p) {
                edges.push((u, v));
            }
        }
    }
    let features = Array2::from_shape_simple_fn((n, d), || rng.uniform(-1.0, 1.0));
    Dag::new(n, &edges, features).expect("edges point to larger ids")
}

/// `reach[u][v]` is true iff a directed path of length `1..=k` leads from `u` to `v`,
/// computed by boolean matrix powering of the adjacency matrix.
pub fn closure_by_powering(g: &Dag, k: Bound) -> Vec<Vec<bool>> {
    let n = g.n();
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in g.edges() {
        adj[u][v] = true;
    }
    let steps = k.limit().min(n);
    let mut power = adj.clone();
    let mut reach = adj.clone();
    for _ in 1..steps {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for m in 0..n {
                if power[i][m] {
                    for j in 0..n {
                        next[i][j] |= adj[m][j];
                    }
                }
            }
        }
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if next[i][j] && !reach[i][j] {
                    reach[i][j] = true;
                    changed = true;
                }
            }
        }
        // No new pair within j hops means none within j + 1 either.
        if !changed {
            break;
        }
        power = next;
    }
    reach
}

/// `N_k(v)` from the powering oracle, sorted.
pub fn oracle_fields(g: &Dag, k: Bound) -> Vec<Vec<usize>> {
    let reach = closure_by_powering(g, k);
    (0..g.n())
        .map(|v| (0..g.n()).filter(|&u| u != v && (reach[u][v] || reach[v][u])).collect())
        .collect()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-1.0, 1.0))
}
