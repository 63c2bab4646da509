//! Supervised regression on structural targets with exact oracles, trained with AdamW.
//!
//! Each graph is processed on its own (no padding). A mini-batch sums the squared
//! errors of its graphs and divides by the number of target entries, so every
//! reported loss is a mean squared error.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::attention::{ReadoutMode, StackShape, TransformerStack};
use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::model::{stack_forward, stack_sse_grad, Backend, GraphContext, Task};
use crate::reach::{Bound, ReachabilityIndex};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Per node: number of descendants divided by `n`.
    NodeDescendantCount,
    /// Per graph: `dag_depth / n`.
    GraphDepthRegression,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descendants" => Ok(Objective::NodeDescendantCount),
            "depth" => Ok(Objective::GraphDepthRegression),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::NodeDescendantCount => "descendants",
            Objective::GraphDepthRegression => "depth",
        })
    }
}

/// What to predict and how graphs are split. The loss is always MSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub objective: Objective,
    /// Fraction of graphs held out for validation, in `[0, 1)`.
    pub val_fraction: f64,
    pub split_seed: u64,
}

/// Exact targets: `n × 1` for the node task, `1 × 1` for the graph task.
pub fn make_labels(g: &Dag, objective: Objective) -> Array2<f64> {
    let n = g.n() as f64;
    match objective {
        Objective::NodeDescendantCount => {
            let counts = descendant_counts(g);
            Array2::from_shape_fn((g.n(), 1), |(v, _)| counts[v] as f64 / n)
        }
        Objective::GraphDepthRegression => Array2::from_elem((1, 1), g.depth().dag_depth as f64 / n),
    }
}

fn descendant_counts(g: &Dag) -> Vec<usize> {
    let mut mark = vec![usize::MAX; g.n()];
    let mut stack = Vec::new();
    (0..g.n())
        .map(|v| {
            let mut count = 0;
            stack.push(v);
            while let Some(x) = stack.pop() {
                for &y in g.successors(x) {
                    if mark[y] != v {
                        mark[y] = v;
                        count += 1;
                        stack.push(y);
                    }
                }
            }
            count
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// `lr · (1 + cos(π · (epoch − 1) / epochs)) / 2`, evaluated once per epoch.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub k: Bound,
    pub backend: Backend,
    pub pe_on: bool,
    pub seed: u64,
    pub weight_decay: f64,
    pub task: TaskSpec,
    pub readout: ReadoutMode,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 8,
            blocks: 2,
            d_model: 32,
            heads: 4,
            k: Bound::Unbounded,
            backend: Backend::Sparse,
            pe_on: true,
            seed: 0,
            weight_decay: 0.0,
            task: TaskSpec { objective: Objective::NodeDescendantCount, val_fraction: 0.2, split_seed: 0 },
            readout: ReadoutMode::Mean,
            schedule: Schedule::Constant,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    /// Parse `key=value` lines over the defaults. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut split_seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::ParseError { line: i + 1, msg: format!("expected key=value, got `{line}`") })?;
            let bad = || Error::InvalidConfig(format!("bad value for `{key}`: `{value}`"));
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "blocks" => cfg.blocks = value.parse().map_err(|_| bad())?,
                "d_model" => cfg.d_model = value.parse().map_err(|_| bad())?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad())?,
                "k" => cfg.k = value.parse().map_err(|_| bad())?,
                "backend" => cfg.backend = value.parse()?,
                "pe" | "pe_on" => cfg.pe_on = parse_bool(value).ok_or_else(bad)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad())?,
                "task" => cfg.task.objective = value.parse()?,
                "val_fraction" => cfg.task.val_fraction = value.parse().map_err(|_| bad())?,
                "split_seed" => split_seed = Some(value.parse().map_err(|_| bad())?),
                "readout" => cfg.readout = value.parse()?,
                "schedule" => {
                    cfg.schedule = match value {
                        "constant" => Schedule::Constant,
                        "cosine" => Schedule::Cosine,
                        _ => return Err(bad()),
                    }
                }
                other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
            }
        }
        cfg.task.split_seed = split_seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.blocks == 0 || self.d_model == 0 || self.heads == 0 {
            return fail("epochs, batch_size, blocks, d_model and heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.task.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    fn model_task(&self) -> Task {
        match self.task.objective {
            Objective::NodeDescendantCount => Task::Node,
            Objective::GraphDepthRegression => Task::Graph(self.readout),
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = (epoch - 1) as f64 / self.epochs as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The `key=value` form accepted by [`TrainConfig::parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lr={}", self.lr)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "blocks={}", self.blocks)?;
        writeln!(f, "d_model={}", self.d_model)?;
        writeln!(f, "heads={}", self.heads)?;
        writeln!(f, "k={}", self.k)?;
        writeln!(f, "backend={}", match self.backend {
            Backend::Dense => "dense",
            Backend::Sparse => "sparse",
        })?;
        writeln!(f, "pe={}", self.pe_on)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "weight_decay={}", self.weight_decay)?;
        writeln!(f, "task={}", self.task.objective)?;
        writeln!(f, "val_fraction={}", self.task.val_fraction)?;
        writeln!(f, "split_seed={}", self.task.split_seed)?;
        writeln!(f, "readout={}", match self.readout {
            ReadoutMode::Mean => "mean",
            ReadoutMode::Sinks => "sinks",
        })?;
        writeln!(f, "schedule={}", match self.schedule {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

/// Adam with decoupled weight decay on a flat parameter vector:
/// `θ ← θ·(1 − lr·λ) − lr · m̂ / (√v̂ + ε)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] = theta[i] * (1.0 - lr * self.weight_decay) - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch, weighted by target count.
    pub train_loss: f64,
    /// Validation MSE after the epoch's updates; `None` without a validation split.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub params: TransformerStack,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Validation MSE of predicting the mean training target everywhere.
    pub baseline_val_mse: Option<f64>,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.val_loss)
    }
}

/// `epoch,train_loss,val_loss` with a header row; a missing validation loss is left empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:.10e}")).unwrap_or_default();
        out.push_str(&format!("{},{:.10e},{}\n", r.epoch, r.train_loss, val));
    }
    out
}

/// Shuffle graph indices with `seed` and hold out `round(len · fraction)` of them.
pub fn split_indices(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_val = ((len as f64 * fraction).round() as usize).min(len.saturating_sub(1));
    let val = order.split_off(len - n_val);
    (order, val)
}

struct Example {
    ctx: GraphContext,
    target: Arc<Array2<f64>>,
}

fn prepare(data: &[Dag], cfg: &TrainConfig) -> Result<Vec<Example>> {
    data.par_iter()
        .map(|g| {
            let idx = ReachabilityIndex::build(g, cfg.k);
            Ok(Example {
                ctx: GraphContext::new(g, &idx, cfg.backend, cfg.d_model)?,
                target: Arc::new(make_labels(g, cfg.task.objective)),
            })
        })
        .collect()
}

fn mse(stack: &TransformerStack, examples: &[Example], ids: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let parts: Vec<(f64, usize)> = ids
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let out = stack_forward(stack, &ex.ctx, cfg.pe_on, cfg.model_task())?;
            let sse = out.iter().zip(ex.target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            Ok((sse, ex.target.len()))
        })
        .collect::<Result<_>>()?;
    let (sse, count) = parts.iter().fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
    Ok(sse / count as f64)
}

fn mean_predictor_mse(examples: &[Example], train: &[usize], val: &[usize]) -> Option<f64> {
    if val.is_empty() {
        return None;
    }
    let (sum, count) = train
        .iter()
        .flat_map(|&i| examples[i].target.iter().copied())
        .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    let mean = sum / count as f64;
    let (sse, count) = val
        .iter()
        .flat_map(|&i| examples[i].target.iter().copied())
        .fold((0.0, 0usize), |(s, c), x| (s + (x - mean) * (x - mean), c + 1));
    Some(sse / count as f64)
}

/// Train a fresh stack on `data`. Deterministic for a fixed config: per-graph gradients
/// may be computed in parallel but are always summed in batch order.
pub fn train(data: &[Dag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::InvalidConfig("no training graphs".into()))?;
    if let Some(g) = data.iter().find(|g| g.d() != first.d()) {
        return Err(Error::ShapeMismatch(format!("feature width {} vs {}", g.d(), first.d())));
    }
    let examples = prepare(data, cfg)?;
    let (train_ids, val_ids) = split_indices(data.len(), cfg.task.val_fraction, cfg.task.split_seed);
    let baseline_val_mse = mean_predictor_mse(&examples, &train_ids, &val_ids);

    let shape = StackShape::new(first.d(), cfg.d_model, cfg.heads, cfg.blocks, 1);
    let mut stack = TransformerStack::init(shape, cfg.seed);
    let mut theta = stack.to_flat();
    let mut opt = AdamW::new(theta.len(), cfg.weight_decay);
    let mut order_rng = SplitMix64::new(cfg.seed ^ 0x5E_ED0F_0DE5);
    let task = cfg.model_task();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train_ids.clone();
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let lr = cfg.lr_at(epoch);
        let (mut epoch_sse, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, TransformerStack)> = batch
                .par_iter()
                .map(|&i| stack_sse_grad(&stack, &examples[i].ctx, cfg.pe_on, task, examples[i].target.clone()))
                .collect::<Result<_>>()?;
            let count: usize = batch.iter().map(|&i| examples[i].target.len()).sum();
            let mut grad = vec![0.0; theta.len()];
            let mut sse = 0.0;
            for (s, g) in &parts {
                sse += s;
                for (acc, x) in grad.iter_mut().zip(g.to_flat()) {
                    *acc += x;
                }
            }
            let batch_loss = sse / count as f64;
            if !batch_loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergenceDetected { epoch, loss: batch_loss, state: Box::new(stack) });
            }
            // d(sse/count)/dθ = 2·(ŷ − y)/count; the tape's squared error already carries the 2.
            grad.iter_mut().for_each(|x| *x /= count as f64);
            opt.step(&mut theta, &grad, lr);
            stack.set_flat(&theta);
            if theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergenceDetected { epoch, loss: f64::NAN, state: Box::new(stack) });
            }
            epoch_sse += sse;
            epoch_count += count;
        }
        let train_loss = epoch_sse / epoch_count as f64;
        let val_loss = if val_ids.is_empty() { None } else { Some(mse(&stack, &examples, &val_ids, cfg)?) };
        if let Some(v) = val_loss.filter(|v| !v.is_finite()) {
            return Err(Error::DivergenceDetected { epoch, loss: v, state: Box::new(stack) });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });
    }
    Ok(TrainOutcome { history, params: stack, train_indices: train_ids, val_indices: val_ids, baseline_val_mse })
}

/// MSE of `stack` on `data` under `cfg`'s task, backend and receptive-field bound.
pub fn evaluate(stack: &TransformerStack, data: &[Dag], cfg: &TrainConfig) -> Result<f64> {
    let examples = prepare(data, cfg)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    mse(stack, &examples, &ids, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{gen, GeneratorSpec};

    fn diamond() -> Dag {
        Dag::with_zero_features(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], 1).unwrap()
    }

    #[test]
    fn labels_by_inspection() {
        let d = make_labels(&diamond(), Objective::NodeDescendantCount);
        assert_eq!(d.column(0).to_vec(), vec![0.75, 0.25, 0.25, 0.0]);
        let chain = Dag::with_zero_features(3, &[(0, 1), (1, 2)], 1).unwrap();
        assert_eq!(make_labels(&chain, Objective::GraphDepthRegression)[[0, 0]], 2.0 / 3.0);
        let single = Dag::with_zero_features(1, &[], 1).unwrap();
        assert_eq!(make_labels(&single, Objective::NodeDescendantCount)[[0, 0]], 0.0);
        assert_eq!(make_labels(&single, Objective::GraphDepthRegression)[[0, 0]], 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first step is lr·g/(|g| + ε) ≈ lr·sign(g).
        let mut opt = AdamW::new(2, 0.0);
        let mut theta = vec![1.0, -1.0];
        opt.step(&mut theta, &[0.3, -2.0], 0.1);
        assert!((theta[0] - 0.9).abs() < 1e-7);
        assert!((theta[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut opt = AdamW::new(1, 0.5);
        let mut theta = vec![2.0];
        opt.step(&mut theta, &[0.0], 0.1);
        assert_eq!(theta[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig::parse("# demo\nlr=0.01\nk=inf\nbackend=dense\npe=off\ntask=depth\nseed=4\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.k, Bound::Unbounded);
        assert!(!cfg.pe_on);
        assert_eq!(cfg.task.split_seed, 4);
        assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
        assert!(TrainConfig::parse("lr=-1").is_err());
        assert!(TrainConfig::parse("d_model=10\nheads=4").is_err());
        assert!(TrainConfig::parse("colour=blue").is_err());
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_indices(10, 0.3, 7);
        assert_eq!((a.len(), b.len()), (7, 3));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.3, 7), (a, b));
        assert_eq!(split_indices(1, 0.5, 0).1.len(), 0);
    }

    fn small_data() -> Vec<Dag> {
        (0..6).map(|s| gen(&GeneratorSpec::layered(8, 3, 0.3, s).with_features(2)).unwrap()).collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 2, d_model: 8, heads: 2, lr: 1e-2, ..TrainConfig::default() }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let out = train(&small_data(), &cfg).unwrap();
        let first = out.history[0];
        assert!(out.history.iter().all(|r| r.train_loss == first.train_loss && r.val_loss == first.val_loss));
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let data = small_data();
        let a = train(&data, &small_cfg()).unwrap();
        let b = train(&data, &small_cfg()).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    }

    #[test]
    fn graph_task_trains() {
        let cfg = TrainConfig {
            task: TaskSpec { objective: Objective::GraphDepthRegression, val_fraction: 0.0, split_seed: 0 },
            schedule: Schedule::Cosine,
            ..small_cfg()
        };
        let out = train(&small_data(), &cfg).unwrap();
        assert!(out.history.iter().all(|r| r.val_loss.is_none()));
        assert!(out.baseline_val_mse.is_none());
        assert!(history_csv(&out.history).lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn divergence_is_reported_with_state() {
        let cfg = TrainConfig { lr: f64::MAX, epochs: 5, ..small_cfg() };
        match train(&small_data(), &cfg) {
            Err(Error::DivergenceDetected { state, .. }) => assert_eq!(state.shape().d_model, 8),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }
}
