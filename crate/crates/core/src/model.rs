//! Transformer blocks and stacks recorded on a [`Tape`], so that the same code
//! path yields outputs and exact parameter gradients.

use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;

use crate::attention::{readout_rows, ReadoutMode, StackShape, TransformerBlockParams, TransformerStack};
use crate::autograd::{grad_check_piecewise, GradCheckReport, Gradients, Tape, Var};
use crate::dag::Dag;
use crate::encoding::dagpe;
use crate::error::{Error, Result};
use crate::kernels::NORM_EPS;
use crate::generate::{gen, GeneratorSpec};
use crate::reach::{AttentionFields, Bound, ReachabilityIndex};
use crate::rng::SplitMix64;

/// How attention restricted to receptive fields is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    /// `n × n` scores with an additive mask.
    Dense,
    /// Per-node aggregation over receptive fields only.
    Sparse,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Backend::Dense),
            "sparse" => Ok(Backend::Sparse),
            other => Err(Error::InvalidConfig(format!("unknown backend `{other}`"))),
        }
    }
}

/// Node-level outputs or one pooled graph-level output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Node,
    Graph(ReadoutMode),
}

/// Everything a forward pass needs from one graph, computed once up front.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub backend: Backend,
    features: Arc<Array2<f64>>,
    fields: Arc<AttentionFields>,
    mask: Option<Arc<Array2<f64>>>,
    pe: Arc<Array2<f64>>,
    mean_rows: Arc<Vec<usize>>,
    sink_rows: Arc<Vec<usize>>,
}

impl GraphContext {
    /// `d_model` sizes the depth encodings. The dense mask is only built for [`Backend::Dense`].
    pub fn new(g: &Dag, idx: &ReachabilityIndex, backend: Backend, d_model: usize) -> Result<Self> {
        if idx.n() != g.n() {
            return Err(Error::ShapeMismatch(format!("index over {} nodes for a graph of {}", idx.n(), g.n())));
        }
        if g.features().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("node features"));
        }
        let mask = match backend {
            Backend::Dense => Some(Arc::new(idx.dense_mask(true))),
            Backend::Sparse => None,
        };
        Ok(Self {
            backend,
            features: Arc::new(g.features().clone()),
            fields: Arc::new(idx.attention_fields(true)),
            mask,
            pe: Arc::new(dagpe(&g.depth(), d_model)?.pe),
            mean_rows: Arc::new(readout_rows(g, ReadoutMode::Mean)),
            sink_rows: Arc::new(readout_rows(g, ReadoutMode::Sinks)),
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn fields(&self) -> &AttentionFields {
        &self.fields
    }
}

struct AttnVars {
    q: Vec<Var>,
    k: Vec<Var>,
    v: Vec<Var>,
    o: Var,
}

struct BlockVars {
    attn: AttnVars,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    n1_scale: Var,
    n1_shift: Var,
    n2_scale: Var,
    n2_shift: Var,
}

/// Parameters of a [`TransformerStack`] registered as tape leaves.
pub struct StackVars {
    input_proj: Var,
    blocks: Vec<BlockVars>,
    head_w: Var,
    head_b: Var,
}

impl BlockVars {
    fn register(tape: &mut Tape, p: &TransformerBlockParams) -> Self {
        let mut leaves = |ws: &[Array2<f64>]| ws.iter().map(|w| tape.leaf(w.clone())).collect::<Vec<_>>();
        let (q, k, v) = (leaves(&p.attn.w_q), leaves(&p.attn.w_k), leaves(&p.attn.w_v));
        let attn = AttnVars { q, k, v, o: tape.leaf(p.attn.w_o.clone()) };
        Self {
            attn,
            w1: tape.leaf(p.ffn_w1.clone()),
            b1: tape.leaf(p.ffn_b1.clone()),
            w2: tape.leaf(p.ffn_w2.clone()),
            b2: tape.leaf(p.ffn_b2.clone()),
            n1_scale: tape.leaf(p.norm1_scale.clone()),
            n1_shift: tape.leaf(p.norm1_shift.clone()),
            n2_scale: tape.leaf(p.norm2_scale.clone()),
            n2_shift: tape.leaf(p.norm2_shift.clone()),
        }
    }

    fn all(&self) -> impl Iterator<Item = Var> + '_ {
        let a = &self.attn;
        a.q.iter()
            .chain(&a.k)
            .chain(&a.v)
            .copied()
            .chain([a.o, self.w1, self.b1, self.w2, self.b2])
            .chain([self.n1_scale, self.n1_shift, self.n2_scale, self.n2_shift])
    }
}

impl StackVars {
    pub fn register(tape: &mut Tape, stack: &TransformerStack) -> Self {
        let input_proj = tape.leaf(stack.input_proj.clone());
        let blocks = stack.blocks.iter().map(|b| BlockVars::register(tape, b)).collect();
        Self { input_proj, blocks, head_w: tape.leaf(stack.head_w.clone()), head_b: tape.leaf(stack.head_b.clone()) }
    }

    /// Leaves in [`TransformerStack::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.input_proj];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    /// Gradients packed into a stack-shaped container.
    pub fn gradients(&self, grads: &Gradients, template: &TransformerStack) -> TransformerStack {
        let mut out = template.zeros_like();
        for ((_, slot), var) in out.named_params_mut().into_iter().zip(self.all()) {
            if let Some(g) = grads.get_ref(var) {
                slot.assign(g);
            }
        }
        out
    }
}

fn attention_on_tape(tape: &mut Tape, x: Var, p: &AttnVars, ctx: &GraphContext) -> Var {
    let d_k = tape.value(p.q[0]).ncols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let heads: Vec<Var> = (0..p.q.len())
        .map(|h| {
            let q = tape.matmul(x, p.q[h]);
            let k = tape.matmul(x, p.k[h]);
            let v = tape.matmul(x, p.v[h]);
            match (ctx.backend, &ctx.mask) {
                (Backend::Dense, Some(mask)) => {
                    let s = tape.matmul_nt(q, k);
                    let s = tape.scale(s, scale);
                    let s = tape.add_const(s, mask.clone());
                    let w = tape.softmax_rows(s);
                    tape.matmul(w, v)
                }
                _ => {
                    let s = tape.pair_scores(q, k, ctx.fields.clone(), scale);
                    let w = tape.segment_softmax(s, ctx.fields.clone());
                    tape.segment_aggregate(w, v, ctx.fields.clone())
                }
            }
        })
        .collect();
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, p.o)
}

fn norm(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Var {
    let z = tape.standardize(x, NORM_EPS);
    let z = tape.mul_row(z, scale);
    tape.add_row(z, shift)
}

fn block_on_tape(tape: &mut Tape, x: Var, b: &BlockVars, ctx: &GraphContext) -> Var {
    let a = attention_on_tape(tape, x, &b.attn, ctx);
    let r1 = tape.add(x, a);
    let y1 = norm(tape, r1, b.n1_scale, b.n1_shift);
    let h = tape.matmul(y1, b.w1);
    let h = tape.add_row(h, b.b1);
    let h = tape.relu(h);
    let f = tape.matmul(h, b.w2);
    let f = tape.add_row(f, b.b2);
    let r2 = tape.add(y1, f);
    norm(tape, r2, b.n2_scale, b.n2_shift)
}

/// Record a full stack forward pass; returns the output variable.
pub fn stack_on_tape(tape: &mut Tape, vars: &StackVars, ctx: &GraphContext, pe_on: bool, task: Task) -> Var {
    let x = tape.leaf((*ctx.features).clone());
    let mut h = tape.matmul(x, vars.input_proj);
    if pe_on {
        h = tape.add_const(h, ctx.pe.clone());
    }
    for b in &vars.blocks {
        h = block_on_tape(tape, h, b, ctx);
    }
    if let Task::Graph(mode) = task {
        let rows = match mode {
            ReadoutMode::Mean => ctx.mean_rows.clone(),
            ReadoutMode::Sinks => ctx.sink_rows.clone(),
        };
        h = tape.mean_rows(h, rows);
    }
    let out = tape.matmul(h, vars.head_w);
    tape.add_row(out, vars.head_b)
}

fn check_stack(stack: &TransformerStack, ctx: &GraphContext) -> Result<()> {
    stack.validate()?;
    if stack.input_proj.nrows() != ctx.features.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "stack expects {} input features, graph has {}",
            stack.input_proj.nrows(),
            ctx.features.ncols()
        )));
    }
    if stack.input_proj.ncols() != ctx.pe.ncols() {
        return Err(Error::ShapeMismatch("context encodings were sized for a different d_model".into()));
    }
    Ok(())
}

/// One transformer block: `y1 = norm1(x + attn(x))`, `y2 = norm2(y1 + ffn(y1))`.
pub fn block_forward(x: &Array2<f64>, params: &TransformerBlockParams, ctx: &GraphContext) -> Result<Array2<f64>> {
    params.attn.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("block input"));
    }
    if x.dim() != (ctx.n(), params.attn.d_model()) {
        return Err(Error::ShapeMismatch(format!("block input {:?}", x.dim())));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = BlockVars::register(&mut tape, params);
    let out = block_on_tape(&mut tape, xv, &vars, ctx);
    Ok(tape.value(out).clone())
}

/// Full forward pass: `n × d_out` for [`Task::Node`], `1 × d_out` for [`Task::Graph`].
pub fn stack_forward(stack: &TransformerStack, ctx: &GraphContext, pe_on: bool, task: Task) -> Result<Array2<f64>> {
    check_stack(stack, ctx)?;
    let mut tape = Tape::new();
    let vars = StackVars::register(&mut tape, stack);
    let out = stack_on_tape(&mut tape, &vars, ctx, pe_on, task);
    Ok(tape.value(out).clone())
}

/// Sum of squared errors against `target` and its gradient with respect to every parameter.
pub fn stack_sse_grad(
    stack: &TransformerStack,
    ctx: &GraphContext,
    pe_on: bool,
    task: Task,
    target: Arc<Array2<f64>>,
) -> Result<(f64, TransformerStack)> {
    check_stack(stack, ctx)?;
    let mut tape = Tape::new();
    let vars = StackVars::register(&mut tape, stack);
    let out = stack_on_tape(&mut tape, &vars, ctx, pe_on, task);
    if tape.value(out).dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!("target {:?} vs output {:?}", target.dim(), tape.value(out).dim())));
    }
    let loss = tape.squared_error(out, target);
    let grads = tape.backward(loss, 1.0)?;
    Ok((tape.value(loss)[[0, 0]], vars.gradients(&grads, stack)))
}

/// Finite-difference check of the mean-squared-error gradient from [`stack_sse_grad`]
/// over `samples` randomly chosen parameters. Parameters whose `±h` stencil flips a
/// ReLU are skipped (see [`grad_check_piecewise`]).
#[allow(clippy::too_many_arguments)]
pub fn stack_grad_check(
    stack: &TransformerStack,
    ctx: &GraphContext,
    pe_on: bool,
    task: Task,
    target: Arc<Array2<f64>>,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let count = target.len() as f64;
    let (_, grads) = stack_sse_grad(stack, ctx, pe_on, task, target.clone())?;
    let analytic: Vec<f64> = grads.to_flat().into_iter().map(|g| g / count).collect();
    let f = |flat: &[f64]| {
        let mut probe = stack.clone();
        probe.set_flat(flat);
        let mut tape = Tape::new();
        let vars = StackVars::register(&mut tape, &probe);
        let out = stack_on_tape(&mut tape, &vars, ctx, pe_on, task);
        let sse = tape.value(out).iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (sse / count, tape.relu_pattern())
    };
    Ok(grad_check_piecewise(f, &stack.to_flat(), &analytic, h, samples, seed))
}

/// One randomly drawn gradient-check instance for a full stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Nodes of the random layered graph.
    pub n: usize,
    pub backend: Backend,
    pub k: Bound,
    pub task: Task,
    pub pe_on: bool,
    pub h: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            blocks: 2,
            d_model: 8,
            heads: 2,
            n: 10,
            backend: Backend::Sparse,
            k: Bound::Unbounded,
            task: Task::Node,
            pe_on: true,
            h: 1e-5,
            samples: 256,
            seed: 0,
        }
    }
}

/// Draw a graph, parameters and targets from `setup.seed` and run [`stack_grad_check`].
pub fn random_stack_grad_check(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    const D_IN: usize = 3;
    if setup.heads == 0 || !setup.d_model.is_multiple_of(setup.heads) {
        return Err(Error::InvalidConfig("d_model must be a positive multiple of heads".into()));
    }
    let g = gen(&GeneratorSpec::layered(setup.n, 3, 0.3, setup.seed).with_features(D_IN))?;
    let idx = ReachabilityIndex::build(&g, setup.k);
    let ctx = GraphContext::new(&g, &idx, setup.backend, setup.d_model)?;
    let stack = TransformerStack::init(StackShape::new(D_IN, setup.d_model, setup.heads, setup.blocks, 1), setup.seed);
    let rows = if setup.task == Task::Node { g.n() } else { 1 };
    let mut rng = SplitMix64::new(setup.seed ^ 0x7A_26E7);
    let target = Arc::new(Array2::from_shape_simple_fn((rows, 1), || rng.uniform(-1.0, 1.0)));
    stack_grad_check(&stack, &ctx, setup.pe_on, setup.task, target, setup.h, setup.samples, setup.seed)
}
