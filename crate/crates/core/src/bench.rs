//! Complexity measurements: the receptive-field bound on trees, wall-clock scaling
//! of one attention layer, and the dense/sparse crossover.
//!
//! Timings are medians over repeated runs after one discarded warmup run. Index
//! construction is timed separately from attention.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;

use crate::attention::{dagra_dense, dagra_sparse_fields, AttentionLayerParams};
use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::generate::{gen, Family, GeneratorSpec};
use crate::model::Backend;
use crate::reach::{Bound, ReachabilityIndex};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundCheck {
    pub n: usize,
    pub depth: usize,
    pub max_outdegree: usize,
    pub k: Bound,
    /// `Σ_v |N_k(v)|`, self excluded.
    pub sum_fields: usize,
    /// `|V| · min(k, depth) · Δ⁺`.
    pub bound: usize,
    pub ok: bool,
}

/// Compare `Σ_v |N_k(v)|` with `|V| · min(k, depth) · Δ⁺` on any graph.
pub fn bound_check(g: &Dag, k: Bound) -> BoundCheck {
    let depth = g.depth().dag_depth;
    let sum_fields = ReachabilityIndex::build(g, k).total_size();
    let bound = g.n() * k.limit().min(depth) * g.max_outdegree();
    BoundCheck { n: g.n(), depth, max_outdegree: g.max_outdegree(), k, sum_fields, bound, ok: sum_fields <= bound }
}

/// [`bound_check`] on a generated tree.
pub fn bound_check_tree(spec: &GeneratorSpec, k: Bound) -> Result<BoundCheck> {
    if !matches!(spec.family, Family::Tree { .. }) {
        return Err(Error::InvalidSpec("bound checks need the tree family".into()));
    }
    Ok(bound_check(&gen(spec)?, k))
}

/// Settings shared by the timing benchmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Timed runs per size; one extra warmup run is discarded.
    pub repeats: usize,
    /// Graph `n` is generated with seed `seed + n`.
    pub seed: u64,
    /// Workers for index construction.
    pub threads: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { d_model: 16, heads: 2, repeats: 5, seed: 0, threads: 1 }
    }
}

impl TimingConfig {
    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig("d_model must be a positive multiple of heads".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be positive".into()));
        }
        Ok(())
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("sizes must be positive and strictly ascending".into()));
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Run `f` once untimed, then `repeats` timed times; returns the median seconds
/// and the last result.
fn time_median<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut last = f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        last = f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok((median(times), last))
}

struct Workload {
    graph: Dag,
    idx: ReachabilityIndex,
    index_secs: f64,
    params: AttentionLayerParams,
}

fn workload(family: Family, n: usize, k: Bound, cfg: &TimingConfig) -> Result<Workload> {
    let spec = GeneratorSpec { family, n, feature_dim: cfg.d_model, seed: cfg.seed.wrapping_add(n as u64) };
    let graph = gen(&spec)?;
    let start = Instant::now();
    let idx = ReachabilityIndex::build_parallel(&graph, k, cfg.threads);
    let index_secs = start.elapsed().as_secs_f64();
    let mut rng = SplitMix64::new(cfg.seed ^ 0xA77E_4710);
    let params = AttentionLayerParams::init(cfg.d_model, cfg.heads, cfg.d_model / cfg.heads, &mut rng);
    Ok(Workload { graph, idx, index_secs, params })
}

fn run_sparse(w: &Workload, fields: &crate::reach::AttentionFields) -> Result<Array2<f64>> {
    let (out, cost) = dagra_sparse_fields(w.graph.features(), &w.params, fields)?;
    let expected = w.idx.total_size() + w.graph.n();
    if cost.pairs_per_head.iter().any(|&p| p != expected) {
        return Err(Error::ShapeMismatch(format!(
            "sparse backend aggregated {:?} pairs per head, expected {expected}",
            cost.pairs_per_head
        )));
    }
    Ok(out)
}

/// One row of a scaling curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePoint {
    pub n: usize,
    pub median_secs: f64,
    pub index_secs: f64,
    /// `Σ_v |N_k(v)|`, self excluded.
    pub sum_fields: usize,
    /// Pairs aggregated per head by the sparse backend, `Σ_v (|N_k(v)| + 1)`; `None` for dense.
    pub pairs_per_head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReport {
    pub family: String,
    pub k: Bound,
    pub backend: Backend,
    pub points: Vec<ScalePoint>,
    /// Log-log slopes between consecutive sizes.
    pub consecutive_slopes: Vec<f64>,
    /// Least-squares slope of `log t` against `log n` over all sizes.
    pub fitted_slope: f64,
}

fn family_label(family: Family) -> String {
    match family {
        Family::Tree { max_outdegree } => format!("tree(outdeg={max_outdegree})"),
        Family::Layered { layers, edge_prob } => format!("layered(layers={layers},p={edge_prob})"),
        Family::Chain => "chain".into(),
    }
}

fn backend_label(b: Backend) -> &'static str {
    match b {
        Backend::Dense => "dense",
        Backend::Sparse => "sparse",
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Time one attention layer forward on a graph of each size.
pub fn scaling_curve(family: Family, sizes: &[usize], k: Bound, backend: Backend, cfg: &TimingConfig) -> Result<ScaleReport> {
    cfg.validate()?;
    check_sizes(sizes)?;
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let w = workload(family, n, k, cfg)?;
        let (median_secs, pairs_per_head) = match backend {
            Backend::Sparse => {
                let fields = w.idx.attention_fields(true);
                let (t, _) = time_median(cfg.repeats, || run_sparse(&w, &fields))?;
                (t, Some(fields.pair_count()))
            }
            Backend::Dense => {
                let mask = w.idx.dense_mask(true);
                let (t, _) = time_median(cfg.repeats, || dagra_dense(w.graph.features(), &w.params, &mask))?;
                (t, None)
            }
        };
        points.push(ScalePoint { n, median_secs, index_secs: w.index_secs, sum_fields: w.idx.total_size(), pairs_per_head });
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|p| ((p.n as f64).ln(), p.median_secs.max(1e-12).ln())).collect();
    let consecutive_slopes = logs.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = logs.into_iter().unzip();
    let fitted_slope = if xs.len() >= 2 { fit_slope(&xs, &ys) } else { f64::NAN };
    Ok(ScaleReport { family: family_label(family), k, backend, points, consecutive_slopes, fitted_slope })
}

impl ScaleReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("family={} k={} backend={}\n", self.family, self.k, backend_label(self.backend));
        let _ = writeln!(out, "{:>8} {:>14} {:>14} {:>12} {:>10}", "n", "attn_median_s", "index_s", "sum_n_k", "slope");
        for (i, p) in self.points.iter().enumerate() {
            let slope = if i == 0 { "-".to_string() } else { format!("{:.3}", self.consecutive_slopes[i - 1]) };
            let _ = writeln!(out, "{:>8} {:>14.6e} {:>14.6e} {:>12} {:>10}", p.n, p.median_secs, p.index_secs, p.sum_fields, slope);
        }
        let _ = writeln!(out, "fitted log-log slope: {:.3}", self.fitted_slope);
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!("family={}\nk={}\nbackend={}\n", self.family, self.k, backend_label(self.backend));
        for p in &self.points {
            let _ = writeln!(out, "n{}.attn_median_s={:e}", p.n, p.median_secs);
            let _ = writeln!(out, "n{}.index_s={:e}", p.n, p.index_secs);
            let _ = writeln!(out, "n{}.sum_n_k={}", p.n, p.sum_fields);
            if let Some(pairs) = p.pairs_per_head {
                let _ = writeln!(out, "n{}.pairs_per_head={pairs}", p.n);
            }
        }
        let _ = writeln!(out, "fitted_slope={:.6}", self.fitted_slope);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,attn_median_s,index_s,sum_n_k\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:e},{:e},{}", p.n, p.median_secs, p.index_secs, p.sum_fields);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverRow {
    pub n: usize,
    pub dense_secs: f64,
    pub sparse_secs: f64,
    pub index_secs: f64,
    /// `dense_secs / sparse_secs`.
    pub speedup: f64,
    /// Largest elementwise difference between the backends over every timed run.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverReport {
    pub family: String,
    pub k: Bound,
    pub rows: Vec<CrossoverRow>,
    /// Smallest size where the sparse backend is at least twice as fast.
    pub first_2x: Option<usize>,
    /// Tolerance used for the equivalence check.
    pub tolerance: f64,
}

impl CrossoverReport {
    pub fn equivalent(&self) -> bool {
        self.rows.iter().all(|r| r.max_abs_diff <= self.tolerance)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("family={} k={}\n", self.family, self.k);
        let _ = writeln!(
            out,
            "{:>8} {:>14} {:>14} {:>14} {:>9} {:>11}",
            "n", "dense_s", "sparse_s", "index_s", "speedup", "max_diff"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8} {:>14.6e} {:>14.6e} {:>14.6e} {:>9.2} {:>11.2e}",
                r.n, r.dense_secs, r.sparse_secs, r.index_secs, r.speedup, r.max_abs_diff
            );
        }
        let first = self.first_2x.map_or("none".to_string(), |n| n.to_string());
        let _ = writeln!(out, "sparse wins by 2x from n={first}; outputs agree within {:e}: {}", self.tolerance, self.equivalent());
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!("family={}\nk={}\n", self.family, self.k);
        for r in &self.rows {
            let _ = writeln!(out, "n{}.dense_s={:e}", r.n, r.dense_secs);
            let _ = writeln!(out, "n{}.sparse_s={:e}", r.n, r.sparse_secs);
            let _ = writeln!(out, "n{}.index_s={:e}", r.n, r.index_secs);
            let _ = writeln!(out, "n{}.speedup={:.4}", r.n, r.speedup);
            let _ = writeln!(out, "n{}.max_abs_diff={:e}", r.n, r.max_abs_diff);
        }
        let _ = writeln!(out, "first_2x={}", self.first_2x.map_or("none".to_string(), |n| n.to_string()));
        let _ = writeln!(out, "equivalent={}", self.equivalent());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,dense_s,sparse_s,index_s,speedup,max_abs_diff\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:e},{:e},{:e},{},{:e}", r.n, r.dense_secs, r.sparse_secs, r.index_secs, r.speedup, r.max_abs_diff);
        }
        out
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Time both backends on the same inputs and compare every timed output.
pub fn backend_crossover(family: Family, sizes: &[usize], k: Bound, cfg: &TimingConfig) -> Result<CrossoverReport> {
    const TOLERANCE: f64 = 1e-8;
    cfg.validate()?;
    check_sizes(sizes)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let w = workload(family, n, k, cfg)?;
        let fields = w.idx.attention_fields(true);
        let mask = w.idx.dense_mask(true);
        let (sparse_secs, reference) = time_median(cfg.repeats, || run_sparse(&w, &fields))?;
        let mut worst = 0.0f64;
        let (dense_secs, _) = time_median(cfg.repeats, || {
            let out = dagra_dense(w.graph.features(), &w.params, &mask)?;
            worst = worst.max(max_abs_diff(&out, &reference));
            Ok(())
        })?;
        rows.push(CrossoverRow {
            n,
            dense_secs,
            sparse_secs,
            index_secs: w.index_secs,
            speedup: dense_secs / sparse_secs,
            max_abs_diff: worst,
        });
    }
    let first_2x = rows.iter().find(|r| r.speedup >= 2.0).map(|r| r.n);
    Ok(CrossoverReport { family: family_label(family), k, rows, first_2x, tolerance: TOLERANCE })
}
