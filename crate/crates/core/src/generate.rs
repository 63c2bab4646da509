//! Seeded synthetic DAG families.

use std::str::FromStr;

use ndarray::Array2;

use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Random recursive tree: node `i` picks a uniformly random earlier node that
    /// still has fewer than `max_outdegree` children as its parent.
    Tree { max_outdegree: usize },
    /// Nodes split into `layers` contiguous layers; each forward pair across layers
    /// becomes an edge with probability `edge_prob`, and every node outside layer 0
    /// without any parent gets one from the preceding layer.
    Layered { layers: usize, edge_prob: f64 },
    /// Path `0 → 1 → … → n−1`.
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn tree(n: usize, max_outdegree: usize, seed: u64) -> Self {
        Self { family: Family::Tree { max_outdegree }, n, feature_dim: 1, seed }
    }

    pub fn layered(n: usize, layers: usize, edge_prob: f64, seed: u64) -> Self {
        Self { family: Family::Layered { layers, edge_prob }, n, feature_dim: 1, seed }
    }

    pub fn chain(n: usize) -> Self {
        Self { family: Family::Chain, n, feature_dim: 1, seed: 0 }
    }

    pub fn with_features(mut self, d: usize) -> Self {
        self.feature_dim = d;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidSpec("feature dimension must be at least 1".into()));
        }
        match self.family {
            Family::Tree { max_outdegree: 0 } if self.n > 1 => {
                Err(Error::InvalidSpec("trees with more than one node need max_outdegree ≥ 1".into()))
            }
            Family::Layered { layers: 0, .. } => Err(Error::InvalidSpec("layers must be at least 1".into())),
            Family::Layered { edge_prob, .. } if !(0.0..=1.0).contains(&edge_prob) => {
                Err(Error::InvalidSpec(format!("edge probability {edge_prob} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for GeneratorSpec {
    type Err = Error;

    /// `<tree|layered|chain>[,key=value]*` with keys `n`, `d`, `seed`, `outdeg`, `layers`, `p`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(',');
        let family = parts.next().unwrap_or_default().trim().to_ascii_lowercase();
        let (mut n, mut d, mut seed, mut outdeg, mut layers, mut p) = (16, 1, 0u64, 2, 4, 0.3);
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("expected key=value, got `{kv}`")))?;
            let bad = || Error::InvalidSpec(format!("bad value for `{k}`: `{v}`"));
            match k.trim() {
                "n" => n = v.trim().parse().map_err(|_| bad())?,
                "d" => d = v.trim().parse().map_err(|_| bad())?,
                "seed" => seed = v.trim().parse().map_err(|_| bad())?,
                "outdeg" => outdeg = v.trim().parse().map_err(|_| bad())?,
                "layers" => layers = v.trim().parse().map_err(|_| bad())?,
                "p" => p = v.trim().parse().map_err(|_| bad())?,
                other => return Err(Error::InvalidSpec(format!("unknown key `{other}`"))),
            }
        }
        let family = match family.as_str() {
            "tree" => Family::Tree { max_outdegree: outdeg },
            "layered" => Family::Layered { layers, edge_prob: p },
            "chain" => Family::Chain,
            other => return Err(Error::InvalidSpec(format!("unknown family `{other}`"))),
        };
        Ok(Self { family, n, feature_dim: d, seed })
    }
}

/// Generate a graph; identical specs give identical graphs.
pub fn gen(spec: &GeneratorSpec) -> Result<Dag> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = SplitMix64::new(spec.seed);
    let mut structure = rng.fork();
    let edges = match spec.family {
        Family::Chain => (1..n).map(|v| (v - 1, v)).collect(),
        Family::Tree { max_outdegree } => tree_edges(n, max_outdegree, &mut structure),
        Family::Layered { layers, edge_prob } => layered_edges(n, layers, edge_prob, &mut structure),
    };
    let features = Array2::from_shape_simple_fn((n, spec.feature_dim), || rng.uniform(-1.0, 1.0));
    Dag::new(n, &edges, features)
}

/// `count` graphs from `spec`, graph `i` seeded with `spec.seed + i`. With `n_range`
/// each graph's size is drawn uniformly from the inclusive range using `spec.seed`.
pub fn gen_dataset(spec: &GeneratorSpec, count: usize, n_range: Option<(usize, usize)>) -> Result<Vec<Dag>> {
    if let Some((lo, hi)) = n_range {
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!("bad size range {lo}..={hi}")));
        }
    }
    let mut sizes = SplitMix64::new(spec.seed ^ 0x51_2E5);
    (0..count)
        .map(|i| {
            let n = n_range.map_or(spec.n, |(lo, hi)| sizes.range_inclusive(lo, hi));
            gen(&GeneratorSpec { n, seed: spec.seed.wrapping_add(i as u64), ..*spec })
        })
        .collect()
}

fn tree_edges(n: usize, cap: usize, rng: &mut SplitMix64) -> Vec<(usize, usize)> {
    let mut open = vec![0usize];
    let mut children = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for child in 1..n {
        let slot = rng.below(open.len());
        let parent = open[slot];
        edges.push((parent, child));
        children[parent] += 1;
        if children[parent] == cap {
            open.swap_remove(slot);
        }
        open.push(child);
    }
    edges
}

fn layered_edges(n: usize, layers: usize, p: f64, rng: &mut SplitMix64) -> Vec<(usize, usize)> {
    let layers = layers.min(n);
    let layer_of = |v: usize| v * layers / n;
    let first_of = |l: usize| (l * n).div_ceil(layers);
    let mut edges = Vec::new();
    for v in 0..n {
        let lv = layer_of(v);
        if lv == 0 {
            continue;
        }
        let before = edges.len();
        for u in 0..first_of(lv) {
            if rng.bernoulli(p) {
                edges.push((u, v));
            }
        }
        if edges.len() == before {
            let (lo, hi) = (first_of(lv - 1), first_of(lv));
            edges.push((lo + rng.below(hi - lo), v));
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reach::{Bound, ReachabilityIndex};

    #[test]
    fn chain_of_eight() {
        let g = gen(&GeneratorSpec::chain(8)).unwrap();
        assert_eq!(g.edge_count(), 7);
        let stats = ReachabilityIndex::build(&g, Bound::Unbounded).stats();
        assert_eq!(stats.avg_display(), "7.00");
    }

    #[test]
    fn single_node_tree() {
        let g = gen(&GeneratorSpec::tree(1, 2, 9)).unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn deterministic_in_seed() {
        for spec in [GeneratorSpec::tree(50, 3, 4), GeneratorSpec::layered(40, 5, 0.2, 4).with_features(3)] {
            let (a, b) = (gen(&spec).unwrap(), gen(&spec).unwrap());
            assert_eq!(a, b);
            let other = gen(&GeneratorSpec { seed: 5, ..spec }).unwrap();
            assert_ne!(a, other);
        }
    }

    #[test]
    fn trees_are_rooted_and_capped() {
        for seed in 0..30 {
            for cap in 1..4 {
                let g = gen(&GeneratorSpec::tree(60, cap, seed)).unwrap();
                assert_eq!(g.sources(), vec![0]);
                assert!((1..60).all(|v| g.predecessors(v).len() == 1));
                assert!(g.max_outdegree() <= cap);
            }
        }
    }

    #[test]
    fn layered_structure() {
        for seed in 0..30 {
            let g = gen(&GeneratorSpec::layered(37, 5, 0.15, seed)).unwrap();
            let layer_of = |v: usize| v * 5 / 37;
            for &(u, v) in g.edges() {
                assert!(layer_of(u) < layer_of(v));
            }
            let sources = g.sources();
            assert!(!sources.is_empty());
            assert!(sources.iter().all(|&v| layer_of(v) == 0));
        }
    }

    #[test]
    fn features_in_range() {
        let g = gen(&GeneratorSpec::layered(20, 3, 0.5, 1).with_features(4)).unwrap();
        assert_eq!(g.d(), 4);
        assert!(g.features().iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn datasets_vary_size_within_range() {
        let spec = GeneratorSpec::layered(0, 4, 0.2, 3);
        let data = gen_dataset(&spec, 30, Some((10, 40))).unwrap();
        assert_eq!(data.len(), 30);
        assert!(data.iter().all(|g| (10..=40).contains(&g.n())));
        assert!(data.iter().any(|g| g.n() != data[0].n()));
        assert_eq!(gen_dataset(&spec, 30, Some((10, 40))).unwrap(), data);
        assert!(gen_dataset(&spec, 2, Some((5, 4))).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(gen(&GeneratorSpec::chain(0)).is_err());
        assert!(gen(&GeneratorSpec::tree(5, 0, 1)).is_err());
        assert!(gen(&GeneratorSpec::layered(5, 0, 0.5, 1)).is_err());
        assert!(gen(&GeneratorSpec::layered(5, 2, 1.5, 1)).is_err());
    }

    #[test]
    fn parse_specs() {
        let s: GeneratorSpec = "tree,n=100,outdeg=2,seed=7,d=3".parse().unwrap();
        assert_eq!(s, GeneratorSpec::tree(100, 2, 7).with_features(3));
        let s: GeneratorSpec = "layered,n=30,layers=3,p=0.25".parse().unwrap();
        assert_eq!(s.family, Family::Layered { layers: 3, edge_prob: 0.25 });
        assert!("ring,n=3".parse::<GeneratorSpec>().is_err());
        assert!("chain,q=3".parse::<GeneratorSpec>().is_err());
    }
}
