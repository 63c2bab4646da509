//! Reverse-mode differentiation over a recorded tape of matrix primitives.
//!
//! Every value is an `Array2<f64>`; scalars are `1 × 1` and per-pair
//! attention scores are `m × 1` columns. Each primitive has one forward
//! implementation (shared with [`Tape::replay`]) and one hand-written adjoint.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::kernels;
use crate::reach::AttentionFields;
use crate::rng::SplitMix64;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// `a + row` with `row` broadcast over rows.
    AddRow(Var, Var),
    /// `a ⊙ row` with `row` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var, Arc<Array2<f64>>),
    Relu(Var),
    SoftmaxRows(Var),
    Standardize(Var, f64),
    ConcatCols(Vec<Var>),
    PairScores { q: Var, k: Var, fields: Arc<AttentionFields>, scale: f64 },
    SegmentSoftmax(Var, Arc<AttentionFields>),
    SegmentAggregate { w: Var, v: Var, fields: Arc<AttentionFields> },
    MeanRows(Var, Arc<Vec<usize>>),
    SumAll(Var),
    SquaredError(Var, Arc<Array2<f64>>),
    /// A value computed outside the tape from `inputs`; it has no adjoint.
    Opaque { name: String, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Standardize(..) => "standardize",
            Op::ConcatCols(..) => "concat_cols",
            Op::PairScores { .. } => "pair_scores",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentAggregate { .. } => "segment_aggregate",
            Op::MeanRows(..) => "mean_rows",
            Op::SumAll(..) => "sum_all",
            Op::SquaredError(..) => "squared_error",
            Op::Opaque { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Record of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every recorded value, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if no gradient reached it.
    pub fn get(&self, v: Var) -> Array2<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }

    pub fn get_ref(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn forward(op: &Op, nodes: &[Node]) -> Option<Array2<f64>> {
    let val = |v: &Var| &nodes[v.0].value;
    let out = match op {
        Op::Leaf | Op::Opaque { .. } => return None,
        Op::MatMul(a, b) => val(a).dot(val(b)),
        Op::MatMulNt(a, b) => val(a).dot(&val(b).t()),
        Op::Add(a, b) => val(a) + val(b),
        Op::AddRow(a, r) => val(a) + val(r),
        Op::MulRow(a, r) => val(a) * val(r),
        Op::Scale(a, c) => val(a) * *c,
        Op::AddConst(a, m) => val(a) + m.as_ref(),
        Op::Relu(a) => val(a).mapv(|x| x.max(0.0)),
        Op::SoftmaxRows(a) => {
            let mut m = val(a).clone();
            kernels::softmax_rows_inplace(&mut m);
            m
        }
        Op::Standardize(a, eps) => kernels::standardize_rows(val(a), *eps).0,
        Op::ConcatCols(parts) => {
            let views: Vec<_> = parts.iter().map(|p| val(p).view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat shapes checked at record time")
        }
        Op::PairScores { q, k, fields, scale } => {
            column(kernels::pair_scores(val(q).view(), val(k).view(), fields, *scale))
        }
        Op::SegmentSoftmax(s, fields) => {
            column(kernels::segment_softmax(val(s).as_slice().expect("column"), fields.offsets()))
        }
        Op::SegmentAggregate { w, v, fields } => {
            kernels::segment_aggregate(val(w).as_slice().expect("column"), val(v).view(), fields).0
        }
        Op::MeanRows(a, rows) => {
            let x = val(a);
            let mut acc = Array2::zeros((1, x.ncols()));
            for &r in rows.iter() {
                acc += &x.slice(s![r..r + 1, ..]);
            }
            acc / rows.len() as f64
        }
        Op::SumAll(a) => Array2::from_elem((1, 1), val(a).sum()),
        Op::SquaredError(a, t) => {
            Array2::from_elem((1, 1), val(a).iter().zip(t.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        }
    };
    Some(out)
}

fn column(v: Vec<f64>) -> Array2<f64> {
    let m = v.len();
    Array2::from_shape_vec((m, 1), v).expect("column shape")
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn sum_rows(g: &Array2<f64>) -> Array2<f64> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> Var {
        let value = forward(&op, &self.nodes).expect("primitive with a forward rule");
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A differentiable input (parameter or feature matrix).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    /// Record a value computed elsewhere from `inputs`. Backpropagating into it fails
    /// with [`Error::UnregisteredPrimitive`].
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Array2<f64>) -> Var {
        self.nodes.push(Node { op: Op::Opaque { name: name.to_string(), inputs: inputs.to_vec() }, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dimensions");
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_nt inner dimensions");
        self.push(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "broadcast row shape");
        self.push(Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "broadcast row shape");
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    /// `a + c` for a constant `c` (e.g. an attention mask or positional encoding).
    pub fn add_const(&mut self, a: Var, c: Arc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "add_const shapes");
        self.push(Op::AddConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::SoftmaxRows(a))
    }

    /// Per-row `(x − mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Var {
        self.push(Op::Standardize(a, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat row counts");
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// Scaled dot products `scale·⟨q_v, k_u⟩` for every pair of `fields`, as an `m × 1` column.
    pub fn pair_scores(&mut self, q: Var, k: Var, fields: Arc<AttentionFields>, scale: f64) -> Var {
        assert_eq!(self.shape(q), self.shape(k), "query/key shapes");
        assert_eq!(self.shape(q).0, fields.n(), "fields cover every node");
        self.push(Op::PairScores { q, k, fields, scale })
    }

    /// Softmax of a pair column restricted to each node's receptive field.
    pub fn segment_softmax(&mut self, scores: Var, fields: Arc<AttentionFields>) -> Var {
        assert_eq!(self.shape(scores), (fields.pair_count(), 1), "score column");
        self.push(Op::SegmentSoftmax(scores, fields))
    }

    /// Weighted sum of value rows over each receptive field.
    pub fn segment_aggregate(&mut self, weights: Var, values: Var, fields: Arc<AttentionFields>) -> Var {
        assert_eq!(self.shape(weights), (fields.pair_count(), 1), "weight column");
        assert_eq!(self.shape(values).0, fields.n(), "value rows");
        self.push(Op::SegmentAggregate { w: weights, v: values, fields })
    }

    /// `1 × d` mean of the selected rows.
    pub fn mean_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Var {
        assert!(!rows.is_empty(), "mean over no rows");
        self.push(Op::MeanRows(a, rows))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }

    /// `Σ (a − target)²` as a `1 × 1` value.
    pub fn squared_error(&mut self, a: Var, target: Arc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), target.dim(), "target shape");
        self.push(Op::SquaredError(a, target))
    }

    /// Sign of every ReLU input on the tape (`true` where positive), in recording order.
    /// Two evaluations with equal patterns lie on the same smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|x| x.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Re-run every primitive from the recorded leaves and report whether all
    /// outputs are reproduced bit for bit.
    pub fn replay(&self) -> bool {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = forward(&node.op, &replayed).unwrap_or_else(|| node.value.clone());
            let same = value.iter().zip(node.value.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same || value.dim() != node.value.dim() {
                return false;
            }
            replayed.push(Node { op: node.op.clone(), value });
        }
        true
    }

    /// Backpropagate from a `1 × 1` loss, seeding its adjoint with `seed`.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::ShapeMismatch(format!("loss must be 1 × 1, got {:?}", self.shape(loss))));
        }
        self.backward_from(loss, Array2::from_elem((1, 1), seed))
    }

    /// Backpropagate an arbitrary adjoint `seed` of `out`.
    pub fn backward_from(&self, out: Var, seed: Array2<f64>) -> Result<Gradients> {
        if seed.dim() != self.shape(out) {
            return Err(Error::ShapeMismatch("seed shape differs from output".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn adjoint(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Opaque { inputs, .. } => {
                if !inputs.is_empty() {
                    return Err(Error::UnregisteredPrimitive(node.op.name().to_string()));
                }
            }
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(b).t()));
                accumulate(grads, *b, val(a).t().dot(g));
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.dot(val(b)));
                accumulate(grads, *b, g.t().dot(val(a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, sum_rows(g));
            }
            Op::MulRow(a, r) => {
                accumulate(grads, *a, g * val(r));
                accumulate(grads, *r, sum_rows(&(g * val(a))));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddConst(a, _) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(val(a), |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − Σ_row g⊙y)
                let y = &node.value;
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dotp = row.sum();
                    row.zip_mut_with(&yrow, |gi, &yi| *gi -= yi * dotp);
                }
                accumulate(grads, *a, ga);
            }
            Op::Standardize(a, eps) => {
                // dx = (g − mean(g) − ŷ · mean(g ⊙ ŷ)) / s
                let y = &node.value;
                let (_, scales) = kernels::standardize_rows(val(a), *eps);
                let d = y.ncols() as f64;
                let mut ga = g.clone();
                for ((mut row, yrow), s) in ga.rows_mut().into_iter().zip(y.rows()).zip(scales) {
                    let mean_g = row.sum() / d;
                    let mean_gy = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    row.zip_mut_with(&yrow, |gi, &yi| *gi = (*gi - mean_g - yi * mean_gy) / s);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = val(p).ncols();
                    accumulate(grads, *p, g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::PairScores { q, k, fields, scale } => {
                let (qv, kv) = (val(q), val(k));
                let dk = qv.ncols();
                let mut gq = Array2::<f64>::zeros(qv.raw_dim());
                let mut gk = Array2::<f64>::zeros(kv.raw_dim());
                let gs = g.as_slice().expect("column");
                {
                    let (qv, kv) = (qv.as_standard_layout(), kv.as_standard_layout());
                    let (qs, ks) = (qv.as_slice().expect("layout"), kv.as_slice().expect("layout"));
                    let gqs = gq.as_slice_mut().expect("fresh");
                    let gks = gk.as_slice_mut().expect("fresh");
                    for v in 0..fields.n() {
                        let base = fields.offsets()[v];
                        for (j, &u) in fields.field(v).iter().enumerate() {
                            let c = scale * gs[base + j];
                            for t in 0..dk {
                                gqs[v * dk + t] += c * ks[u * dk + t];
                                gks[u * dk + t] += c * qs[v * dk + t];
                            }
                        }
                    }
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
            }
            Op::SegmentSoftmax(s_var, fields) => {
                let y = node.value.as_slice().expect("column");
                let gs = g.as_slice().expect("column");
                let mut out = vec![0.0; y.len()];
                for w in fields.offsets().windows(2) {
                    let span = w[0]..w[1];
                    let dotp: f64 = gs[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for e in span {
                        out[e] = y[e] * (gs[e] - dotp);
                    }
                }
                accumulate(grads, *s_var, column(out));
            }
            Op::SegmentAggregate { w, v, fields } => {
                let (wv, vv) = (val(w), val(v));
                let d = vv.ncols();
                let mut gw = vec![0.0; wv.len()];
                let mut gv = Array2::<f64>::zeros(vv.raw_dim());
                {
                    let ws = wv.as_slice().expect("column");
                    let (vv, g) = (vv.as_standard_layout(), g.as_standard_layout());
                    let vs = vv.as_slice().expect("layout");
                    let gos = g.as_slice().expect("layout");
                    let gvs = gv.as_slice_mut().expect("fresh");
                    for node_v in 0..fields.n() {
                        let base = fields.offsets()[node_v];
                        let go = &gos[node_v * d..(node_v + 1) * d];
                        for (j, &u) in fields.field(node_v).iter().enumerate() {
                            gw[base + j] = kernels::dot(go, &vs[u * d..(u + 1) * d]);
                            let wt = ws[base + j];
                            for (dst, &gi) in gvs[u * d..(u + 1) * d].iter_mut().zip(go) {
                                *dst += wt * gi;
                            }
                        }
                    }
                }
                accumulate(grads, *w, column(gw));
                accumulate(grads, *v, gv);
            }
            Op::MeanRows(a, rows) => {
                let mut ga = Array2::zeros(val(a).raw_dim());
                let share = g / rows.len() as f64;
                for &r in rows.iter() {
                    let mut dst = ga.slice_mut(s![r..r + 1, ..]);
                    dst += &share;
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => accumulate(grads, *a, Array2::from_elem(val(a).raw_dim(), g[[0, 0]])),
            Op::SquaredError(a, t) => {
                let c = 2.0 * g[[0, 0]];
                accumulate(grads, *a, (val(a) - t.as_ref()) * c);
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates passed over because the stencil `θ ± h·e_i` leaves the smooth
    /// piece containing `θ`.
    pub skipped: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` against central differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` on
/// `samples` coordinates drawn without replacement (all coordinates if there are fewer).
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, theta: &[f64], analytic: &[f64], h: f64, samples: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    grad_check_piecewise(|x| (f(x), Vec::new()), theta, analytic, h, samples, seed)
}

/// [`grad_check`] for piecewise-smooth functions. `f` returns its value and a
/// signature of the smooth piece it was evaluated on (for example
/// [`Tape::relu_pattern`]). A coordinate whose `θ ± h·e_i` evaluations change the
/// signature is skipped and the next coordinate in the random order is used instead.
pub fn grad_check_piecewise<F>(f: F, theta: &[f64], analytic: &[f64], h: f64, samples: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<bool>),
{
    assert_eq!(theta.len(), analytic.len(), "gradient length");
    let mut coords: Vec<usize> = (0..theta.len()).collect();
    SplitMix64::new(seed).shuffle(&mut coords);
    let (_, base) = f(theta);
    let mut work = theta.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
    for &i in &coords {
        if report.checked == samples {
            break;
        }
        work[i] = theta[i] + h;
        let (plus, plus_sig) = f(&work);
        work[i] = theta[i] - h;
        let (minus, minus_sig) = f(&work);
        work[i] = theta[i];
        if plus_sig != base || minus_sig != base {
            report.skipped += 1;
            continue;
        }
        let rel = relative_error(analytic[i], (plus - minus) / (2.0 * h));
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}
