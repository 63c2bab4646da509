//! Forward numeric kernels shared by the plain attention path and the gradient tape.
//!
//! Scores and weights over receptive fields are stored flat, one entry per
//! (node, attended node) pair, in the order given by [`AttentionFields`].

use ndarray::{Array2, ArrayView2, Axis};

use crate::reach::AttentionFields;

/// Layer-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// The exponential attention kernel `exp(⟨q, k⟩ / √d_K)` on already projected rows.
pub fn kernel(q_row: &[f64], k_row: &[f64], d_k: usize) -> f64 {
    (dot(q_row, k_row) / (d_k as f64).sqrt()).exp()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}


/// `scale · ⟨q_v, k_u⟩` for every pair `(v, u)` of `fields`.
pub fn pair_scores(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, fields: &AttentionFields, scale: f64) -> Vec<f64> {
    let dk = q.ncols();
    let (q, k) = (q.as_standard_layout(), k.as_standard_layout());
    let (qs, ks) = (q.as_slice().expect("standard layout"), k.as_slice().expect("standard layout"));
    let mut out = Vec::with_capacity(fields.pair_count());
    for v in 0..fields.n() {
        let qv = &qs[v * dk..(v + 1) * dk];
        for &u in fields.field(v) {
            out.push(scale * dot(qv, &ks[u * dk..(u + 1) * dk]));
        }
    }
    out
}

/// Softmax within each segment `offsets[v]..offsets[v+1]`, stabilized by the segment maximum.
pub fn segment_softmax(scores: &[f64], offsets: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for w in offsets.windows(2) {
        let (s, o) = (&scores[w[0]..w[1]], &mut out[w[0]..w[1]]);
        if s.is_empty() {
            continue;
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &si) in o.iter_mut().zip(s) {
            *oi = (si - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    }
    out
}

/// `out[v] = Σ_{u ∈ field(v)} weight(v, u) · values[u]`. Returns the output and the
/// number of pairs aggregated.
pub fn segment_aggregate(weights: &[f64], values: ArrayView2<'_, f64>, fields: &AttentionFields) -> (Array2<f64>, usize) {
    let (n, d) = (fields.n(), values.ncols());
    let values = values.as_standard_layout();
    let vs = values.as_slice().expect("standard layout");
    let mut out = Array2::zeros((n, d));
    let mut pairs = 0;
    {
        let os = out.as_slice_mut().expect("fresh array");
        for v in 0..n {
            let ov = &mut os[v * d..(v + 1) * d];
            let span = fields.offsets()[v]..fields.offsets()[v + 1];
            for (&w, &u) in weights[span.clone()].iter().zip(fields.field(v)) {
                for (o, x) in ov.iter_mut().zip(&vs[u * d..(u + 1) * d]) {
                    *o += w * x;
                }
                pairs += 1;
            }
        }
    }
    (out, pairs)
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
}

/// Per-row standardization `(x − mean) / sqrt(var + eps)` with the biased variance.
/// Also returns each row's `sqrt(var + eps)`.
pub fn standardize_rows(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut scales = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) / s);
        scales.push(s);
    }
    (out, scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::Dag;
    use crate::reach::{Bound, ReachabilityIndex};
    use ndarray::array;

    #[test]
    fn kernel_values() {
        assert_eq!(kernel(&[1.0, 0.0], &[0.0, 1.0], 4), 1.0);
        assert_eq!(kernel(&[0.0], &[3.0], 1), 1.0);
        assert!((kernel(&[1.0], &[1.0], 1) - std::f64::consts::E).abs() < 1e-15);
        assert!((kernel(&[1.0, 0.0], &[1.0, 0.0], 1) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn softmax_equals_normalized_kernel() {
        let g = Dag::with_zero_features(3, &[(0, 1), (1, 2)], 1).unwrap();
        let fields = ReachabilityIndex::build(&g, Bound::Unbounded).attention_fields(true);
        let q = array![[0.3, -1.0], [0.7, 0.2], [-0.4, 0.9]];
        let k = array![[1.1, 0.0], [-0.5, 0.25], [0.6, -0.8]];
        let w = segment_softmax(&pair_scores(q.view(), k.view(), &fields, 1.0 / 2f64.sqrt()), fields.offsets());
        for v in 0..3 {
            let z: f64 = fields.field(v).iter().map(|&u| kernel(q.row(v).as_slice().unwrap(), k.row(u).as_slice().unwrap(), 2)).sum();
            for (i, &u) in fields.field(v).iter().enumerate() {
                let expect = kernel(q.row(v).as_slice().unwrap(), k.row(u).as_slice().unwrap(), 2) / z;
                assert!((w[fields.offsets()[v] + i] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-3.0, 0.5, 0.5, 10.0]];
        let (y, _) = standardize_rows(&x, 0.0);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_softmax_at_equal_logits() {
        let mut m = array![[0.0, 0.0]];
        softmax_rows_inplace(&mut m);
        assert_eq!(m, array![[0.5, 0.5]]);
    }
}
