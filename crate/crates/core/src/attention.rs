//! Reachability-restricted multi-head attention and its parameter containers.
//!
//! Two interchangeable backends compute the same function:
//!
//! * [`dagra_dense`] materializes the `n × n` score matrix and blocks unreachable
//!   pairs with an additive mask, the way an ordinary transformer would;
//! * [`dagra_sparse`] walks each node's receptive field and never allocates
//!   anything quadratic in `n`.
//!
//! Heads have independent query/key/value projections, are concatenated, and
//! are mixed by a shared output projection.

use ndarray::{s, Array1, Array2};

use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::kernels;
use crate::reach::{AttentionFields, ReachabilityIndex};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    /// Per-head `d_model × d_k` projections.
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    /// `(heads · d_k) × d_model`.
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams {
    pub attn: AttentionLayerParams,
    /// `d_model × 2·d_model`.
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
    pub norm1_scale: Array2<f64>,
    pub norm1_shift: Array2<f64>,
    pub norm2_scale: Array2<f64>,
    pub norm2_shift: Array2<f64>,
}

/// Input projection, transformer blocks and a linear task head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub input_proj: Array2<f64>,
    pub blocks: Vec<TransformerBlockParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
}

/// Shape of a [`TransformerStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub blocks: usize,
    pub d_out: usize,
}

impl StackShape {
    /// `d_k = d_model / heads`, rounded up to at least 1.
    pub fn new(d_in: usize, d_model: usize, heads: usize, blocks: usize, d_out: usize) -> Self {
        let d_k = (d_model / heads.max(1)).max(1);
        Self { d_in, d_model, heads, d_k, blocks, d_out }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut SplitMix64) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-a, a))
}

impl AttentionLayerParams {
    pub fn init(d_model: usize, heads: usize, d_k: usize, rng: &mut SplitMix64) -> Self {
        let mut proj = || (0..heads).map(|_| glorot(d_model, d_k, rng)).collect::<Vec<_>>();
        let (w_q, w_k, w_v) = (proj(), proj(), proj());
        let w_o = glorot(heads * d_k, d_model, rng);
        Self { w_q, w_k, w_v, w_o }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_k(&self) -> usize {
        self.w_q[0].ncols()
    }

    pub fn d_model(&self) -> usize {
        self.w_q[0].nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, dm, dk) = (self.heads(), self.d_model(), self.d_k());
        if h == 0 {
            return Err(Error::ShapeMismatch("attention needs at least one head".into()));
        }
        for w in self.w_q.iter().chain(&self.w_k).chain(&self.w_v) {
            if w.dim() != (dm, dk) {
                return Err(Error::ShapeMismatch(format!("head projection {:?}, expected {:?}", w.dim(), (dm, dk))));
            }
        }
        if self.w_k.len() != h || self.w_v.len() != h || self.w_o.dim() != (h * dk, dm) {
            return Err(Error::ShapeMismatch("inconsistent attention parameter shapes".into()));
        }
        Ok(())
    }
}

impl TransformerBlockParams {
    pub fn init(d_model: usize, heads: usize, d_k: usize, rng: &mut SplitMix64) -> Self {
        let hidden = 2 * d_model;
        Self {
            attn: AttentionLayerParams::init(d_model, heads, d_k, rng),
            ffn_w1: glorot(d_model, hidden, rng),
            ffn_b1: Array2::zeros((1, hidden)),
            ffn_w2: glorot(hidden, d_model, rng),
            ffn_b2: Array2::zeros((1, d_model)),
            norm1_scale: Array2::ones((1, d_model)),
            norm1_shift: Array2::zeros((1, d_model)),
            norm2_scale: Array2::ones((1, d_model)),
            norm2_shift: Array2::zeros((1, d_model)),
        }
    }

    /// All-zero weights with unit norm scales: attention and feed-forward contribute nothing.
    pub fn zeroed(d_model: usize, heads: usize, d_k: usize) -> Self {
        let mut b = Self::init(d_model, heads, d_k, &mut SplitMix64::new(0));
        for (name, m) in b.named_params_mut("") {
            if name.contains("scale") {
                m.fill(1.0);
            } else {
                m.fill(0.0);
            }
        }
        b
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (kind, ws) in [("w_q", &self.attn.w_q), ("w_k", &self.attn.w_k), ("w_v", &self.attn.w_v)] {
            for (h, w) in ws.iter().enumerate() {
                out.push((format!("{prefix}attn.{kind}.{h}"), w));
            }
        }
        out.push((format!("{prefix}attn.w_o"), &self.attn.w_o));
        out.push((format!("{prefix}ffn.w1"), &self.ffn_w1));
        out.push((format!("{prefix}ffn.b1"), &self.ffn_b1));
        out.push((format!("{prefix}ffn.w2"), &self.ffn_w2));
        out.push((format!("{prefix}ffn.b2"), &self.ffn_b2));
        out.push((format!("{prefix}norm1.scale"), &self.norm1_scale));
        out.push((format!("{prefix}norm1.shift"), &self.norm1_shift));
        out.push((format!("{prefix}norm2.scale"), &self.norm2_scale));
        out.push((format!("{prefix}norm2.shift"), &self.norm2_shift));
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (kind, ws) in [("w_q", &mut self.attn.w_q), ("w_k", &mut self.attn.w_k), ("w_v", &mut self.attn.w_v)] {
            for (h, w) in ws.iter_mut().enumerate() {
                out.push((format!("{prefix}attn.{kind}.{h}"), w));
            }
        }
        out.push((format!("{prefix}attn.w_o"), &mut self.attn.w_o));
        out.push((format!("{prefix}ffn.w1"), &mut self.ffn_w1));
        out.push((format!("{prefix}ffn.b1"), &mut self.ffn_b1));
        out.push((format!("{prefix}ffn.w2"), &mut self.ffn_w2));
        out.push((format!("{prefix}ffn.b2"), &mut self.ffn_b2));
        out.push((format!("{prefix}norm1.scale"), &mut self.norm1_scale));
        out.push((format!("{prefix}norm1.shift"), &mut self.norm1_shift));
        out.push((format!("{prefix}norm2.scale"), &mut self.norm2_scale));
        out.push((format!("{prefix}norm2.shift"), &mut self.norm2_shift));
        out
    }
}

impl TransformerStack {
    pub fn init(shape: StackShape, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let input_proj = glorot(shape.d_in, shape.d_model, &mut rng);
        let blocks = (0..shape.blocks)
            .map(|_| TransformerBlockParams::init(shape.d_model, shape.heads, shape.d_k, &mut rng))
            .collect();
        let head_w = glorot(shape.d_model, shape.d_out, &mut rng);
        Self { input_proj, blocks, head_w, head_b: Array2::zeros((1, shape.d_out)) }
    }

    pub fn shape(&self) -> StackShape {
        let attn = &self.blocks[0].attn;
        StackShape {
            d_in: self.input_proj.nrows(),
            d_model: self.input_proj.ncols(),
            heads: attn.heads(),
            d_k: attn.d_k(),
            blocks: self.blocks.len(),
            d_out: self.head_w.ncols(),
        }
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("input_proj".to_string(), &self.input_proj)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("blocks.{i}.")));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Mutable counterpart of [`TransformerStack::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![("input_proj".to_string(), &mut self.input_proj)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_params_mut(&format!("blocks.{i}.")));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    /// All parameters concatenated in [`TransformerStack::named_params`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.named_params() {
            out.extend(m.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut at = 0;
        for (_, m) in self.named_params_mut() {
            for (dst, &src) in m.iter_mut().zip(&flat[at..]) {
                *dst = src;
            }
            at += m.len();
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_params_mut() {
            m.fill(0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::ShapeMismatch("stack needs at least one block".into()));
        }
        let dm = self.input_proj.ncols();
        for b in &self.blocks {
            b.attn.validate()?;
            if b.attn.d_model() != dm || b.ffn_w1.nrows() != dm || b.ffn_w2.ncols() != dm {
                return Err(Error::ShapeMismatch("block width differs from d_model".into()));
            }
        }
        if self.head_w.nrows() != dm || self.head_b.ncols() != self.head_w.ncols() {
            return Err(Error::ShapeMismatch("task head shape".into()));
        }
        if self.named_params().iter().any(|(_, m)| m.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteInput("parameters"));
        }
        Ok(())
    }
}

fn check_input(x: &Array2<f64>, params: &AttentionLayerParams) -> Result<()> {
    params.validate()?;
    if x.ncols() != params.d_model() {
        return Err(Error::ShapeMismatch(format!("input width {} vs d_model {}", x.ncols(), params.d_model())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("attention input"));
    }
    Ok(())
}

/// Dense masked attention: per head `softmax(QKᵀ/√d_k + M) V`, concatenated and
/// projected by `W_O`. `mask` is `n × n` with `0` for allowed pairs.
pub fn dagra_dense(x: &Array2<f64>, params: &AttentionLayerParams, mask: &Array2<f64>) -> Result<Array2<f64>> {
    check_input(x, params)?;
    let n = x.nrows();
    if mask.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!("mask {:?} for {n} nodes", mask.dim())));
    }
    let (h, dk) = (params.heads(), params.d_k());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Array2::zeros((n, h * dk));
    for head in 0..h {
        let q = x.dot(&params.w_q[head]);
        let k = x.dot(&params.w_k[head]);
        let v = x.dot(&params.w_v[head]);
        let mut scores = q.dot(&k.t());
        scores.zip_mut_with(mask, |s, &m| *s = *s * scale + m);
        kernels::softmax_rows_inplace(&mut scores);
        concat.slice_mut(s![.., head * dk..(head + 1) * dk]).assign(&scores.dot(&v));
    }
    Ok(concat.dot(&params.w_o))
}

/// Work done by one sparse attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseCost {
    /// Pairs aggregated by each head; equals `Σ_v |field(v)|`.
    pub pairs_per_head: Vec<usize>,
}

/// Sparse attention over precomputed receptive fields (normally with self included).
pub fn dagra_sparse_fields(
    x: &Array2<f64>,
    params: &AttentionLayerParams,
    fields: &AttentionFields,
) -> Result<(Array2<f64>, SparseCost)> {
    check_input(x, params)?;
    let n = x.nrows();
    if fields.n() != n {
        return Err(Error::ShapeMismatch(format!("fields for {} nodes, input has {n}", fields.n())));
    }
    let (h, dk) = (params.heads(), params.d_k());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Array2::zeros((n, h * dk));
    let mut pairs_per_head = Vec::with_capacity(h);
    for head in 0..h {
        let q = x.dot(&params.w_q[head]);
        let k = x.dot(&params.w_k[head]);
        let v = x.dot(&params.w_v[head]);
        let scores = kernels::pair_scores(q.view(), k.view(), fields, scale);
        let weights = kernels::segment_softmax(&scores, fields.offsets());
        let (out, pairs) = kernels::segment_aggregate(&weights, v.view(), fields);
        concat.slice_mut(s![.., head * dk..(head + 1) * dk]).assign(&out);
        pairs_per_head.push(pairs);
    }
    Ok((concat.dot(&params.w_o), SparseCost { pairs_per_head }))
}

/// Sparse attention where every node attends to `N_k(v) ∪ {v}`.
pub fn dagra_sparse(x: &Array2<f64>, params: &AttentionLayerParams, idx: &ReachabilityIndex) -> Result<Array2<f64>> {
    dagra_sparse_fields(x, params, &idx.attention_fields(true)).map(|(out, _)| out)
}

/// Graph-level pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    Mean,
    Sinks,
}

impl std::str::FromStr for ReadoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ReadoutMode::Mean),
            "sinks" => Ok(ReadoutMode::Sinks),
            other => Err(Error::InvalidConfig(format!("unknown readout `{other}`"))),
        }
    }
}

/// Rows averaged by `mode`.
pub fn readout_rows(g: &Dag, mode: ReadoutMode) -> Vec<usize> {
    match mode {
        ReadoutMode::Mean => (0..g.n()).collect(),
        ReadoutMode::Sinks => g.sinks(),
    }
}

pub fn readout(x: &Array2<f64>, g: &Dag, mode: ReadoutMode) -> Array1<f64> {
    let rows = readout_rows(g, mode);
    let mut acc = Array1::zeros(x.ncols());
    for &r in &rows {
        acc += &x.row(r);
    }
    acc / rows.len() as f64
}
