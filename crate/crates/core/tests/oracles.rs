mod common;

use std::sync::Arc;

use dagkit::attention::{dagra_dense, dagra_sparse, AttentionLayerParams};
use dagkit::autograd::{grad_check, Tape, Var};
use dagkit::checkpoint::{load_stack, save_stack};
use dagkit::generate::{gen, gen_dataset, GeneratorSpec};
use dagkit::model::{random_stack_grad_check, stack_forward, stack_sse_grad, GradCheckSetup};
use dagkit::ppr::{ppr_direct, ppr_solve};
use dagkit::rng::SplitMix64;
use dagkit::trainer::{train, Objective, TaskSpec, TrainConfig};
use dagkit::{Backend, Bound, GraphContext, ReachabilityIndex, ReadoutMode, StackShape, Task, TransformerStack};
use ndarray::Array2;

use common::{max_abs_diff, random_dag_sized, random_matrix};

/// One attention layer recorded from tape primitives; returns the output variable.
fn layer_on_tape(tape: &mut Tape, x: Var, w: &[Var], heads: usize, idx: &ReachabilityIndex, backend: Backend) -> Var {
    let fields = Arc::new(idx.attention_fields(true));
    let mask = Arc::new(idx.dense_mask(true));
    let d_k = tape.value(w[0]).ncols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let q = tape.matmul(x, w[h]);
            let k = tape.matmul(x, w[heads + h]);
            let v = tape.matmul(x, w[2 * heads + h]);
            match backend {
                Backend::Dense => {
                    let s = tape.matmul_nt(q, k);
                    let s = tape.scale(s, scale);
                    let s = tape.add_const(s, mask.clone());
                    let a = tape.softmax_rows(s);
                    tape.matmul(a, v)
                }
                Backend::Sparse => {
                    let s = tape.pair_scores(q, k, fields.clone(), scale);
                    let a = tape.segment_softmax(s, fields.clone());
                    tape.segment_aggregate(a, v, fields.clone())
                }
            }
        })
        .collect();
    let cat = tape.concat_cols(&outs);
    tape.matmul(cat, w[3 * heads])
}

fn layer_leaves(p: &AttentionLayerParams) -> Vec<Array2<f64>> {
    p.w_q.iter().chain(&p.w_k).chain(&p.w_v).cloned().chain([p.w_o.clone()]).collect()
}

#[test]
fn single_layer_gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(11);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let g = random_dag_sized(&mut rng, 2, 12, 4);
        let k = [Bound::Hops(1), Bound::Hops(2), Bound::Unbounded][i % 3];
        let backend = if i % 2 == 0 { Backend::Dense } else { Backend::Sparse };
        let idx = ReachabilityIndex::build(&g, k);
        let heads = [1, 2, 4][i % 3];
        let params = AttentionLayerParams::init(4, heads, 4 / heads, &mut rng);
        let mut leaves = vec![random_matrix(&mut rng, g.n(), 4)];
        leaves.extend(layer_leaves(&params));

        let eval = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = layer_on_tape(&mut tape, vars[0], &vars[1..], heads, &idx, backend);
            let loss = tape.sum_all(out);
            (tape, vars, out, loss)
        };
        let (tape, vars, out, loss) = eval(&leaves);
        let reference = match backend {
            Backend::Dense => dagra_dense(&leaves[0], &params, &idx.dense_mask(true)).unwrap(),
            Backend::Sparse => dagra_sparse(&leaves[0], &params, &idx).unwrap(),
        };
        assert!(max_abs_diff(tape.value(out), &reference) < 1e-12);

        let grads = tape.backward(loss, 1.0).unwrap();
        let theta: Vec<f64> = leaves.iter().flat_map(|m| m.iter().copied()).collect();
        let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v).into_iter()).collect();
        let f = |flat: &[f64]| {
            let mut at = 0;
            let vals: Vec<Array2<f64>> = leaves
                .iter()
                .map(|m| {
                    let part = Array2::from_shape_vec(m.raw_dim(), flat[at..at + m.len()].to_vec()).unwrap();
                    at += m.len();
                    part
                })
                .collect();
            let (tape, _, _, loss) = eval(&vals);
            tape.value(loss)[[0, 0]]
        };
        let report = grad_check(f, &theta, &analytic, 1e-5, 256, i as u64);
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < 1e-6, "max relative error {worst:e}");
}

#[test]
fn single_block_and_readout_gradients() {
    let tasks = [Task::Node, Task::Graph(ReadoutMode::Mean), Task::Graph(ReadoutMode::Sinks)];
    for i in 0..24u64 {
        let setup = GradCheckSetup {
            blocks: 1 + (i as usize % 2),
            n: 3 + (i as usize % 9),
            backend: if i % 2 == 0 { Backend::Sparse } else { Backend::Dense },
            task: tasks[i as usize % 3],
            pe_on: i % 4 != 0,
            seed: 500 + i,
            ..GradCheckSetup::default()
        };
        let r = random_stack_grad_check(&setup).unwrap();
        assert!(r.max_rel_error < 1e-5, "{setup:?}: {r:?}");
        assert_eq!(r.checked, 256);
    }
}

#[test]
fn dense_and_sparse_gradients_agree() {
    let mut rng = SplitMix64::new(21);
    for i in 0..20 {
        let g = random_dag_sized(&mut rng, 1, 30, 3);
        let k = [Bound::Hops(1), Bound::Hops(3), Bound::Unbounded][i % 3];
        let idx = ReachabilityIndex::build(&g, k);
        let stack = TransformerStack::init(StackShape::new(3, 8, 2, 2, 2), i as u64);
        let target = Arc::new(random_matrix(&mut rng, g.n(), 2));
        let grads: Vec<(f64, Vec<f64>)> = [Backend::Dense, Backend::Sparse]
            .into_iter()
            .map(|b| {
                let ctx = GraphContext::new(&g, &idx, b, 8).unwrap();
                let (loss, grad) = stack_sse_grad(&stack, &ctx, true, Task::Node, target.clone()).unwrap();
                (loss, grad.to_flat())
            })
            .collect();
        assert!((grads[0].0 - grads[1].0).abs() < 1e-9);
        let diff = grads[0].1.iter().zip(&grads[1].1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "graph {i}: gradient difference {diff:e}");
    }
}

#[test]
fn pagerank_iteration_matches_direct_solve() {
    let mut rng = SplitMix64::new(31);
    for _ in 0..30 {
        let g = random_dag_sized(&mut rng, 1, 40, 1);
        let root = rng.below(g.n());
        let alpha = rng.uniform(0.05, 0.95);
        let it = ppr_solve(&g, root, alpha, 1e-13).unwrap();
        let direct = ppr_direct(&g, root, alpha).unwrap();
        assert!((it.pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!((direct.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (a, b) in it.pi.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stack.ckpt");
    let g = gen(&GeneratorSpec::layered(12, 3, 0.3, 5).with_features(3)).unwrap();
    let stack = TransformerStack::init(StackShape::new(3, 8, 4, 2, 1), 5);
    save_stack(&stack, &path).unwrap();
    let back = load_stack(&path).unwrap();
    let idx = ReachabilityIndex::build(&g, Bound::Hops(2));
    let ctx = GraphContext::new(&g, &idx, Backend::Sparse, 8).unwrap();
    let a = stack_forward(&stack, &ctx, true, Task::Node).unwrap();
    let b = stack_forward(&back, &ctx, true, Task::Node).unwrap();
    assert_eq!(a, b);
}

#[test]
fn permutation_must_be_a_bijection() {
    let g = gen(&GeneratorSpec::chain(3)).unwrap();
    assert!(g.permute(&[0, 0, 1]).is_err());
    assert!(g.permute(&[0, 1]).is_err());
    assert!(g.permute(&[2, 0, 5]).is_err());
    assert_eq!(g.permute(&[2, 1, 0]).unwrap().edges(), &[(1, 0), (2, 1)]);
}

#[test]
fn overfits_five_graphs() {
    let data = gen_dataset(&GeneratorSpec::layered(0, 4, 0.25, 8).with_features(4), 5, Some((8, 14))).unwrap();
    let cfg = TrainConfig {
        epochs: 2000,
        batch_size: 5,
        lr: 3e-3,
        d_model: 32,
        heads: 4,
        blocks: 2,
        task: TaskSpec { objective: Objective::NodeDescendantCount, val_fraction: 0.0, split_seed: 0 },
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg).unwrap();
    let reached = out.history.iter().find(|r| r.train_loss < 1e-3).map(|r| r.epoch);
    assert!(reached.is_some(), "final train MSE {:e}", out.history.last().unwrap().train_loss);
}

#[test]
fn training_is_identical_across_thread_counts() {
    let data = gen_dataset(&GeneratorSpec::layered(0, 4, 0.25, 2).with_features(3), 12, Some((5, 15))).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 4, d_model: 8, heads: 2, lr: 5e-3, ..TrainConfig::default() };
    let one = dagkit::with_threads(1, || train(&data, &cfg)).unwrap();
    let three = dagkit::with_threads(3, || train(&data, &cfg)).unwrap();
    assert_eq!(one.history, three.history);
    assert_eq!(one.params.to_flat(), three.params.to_flat());
}
