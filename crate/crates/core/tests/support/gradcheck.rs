//! Central finite-difference gradient checks at f64.

use vl3d::mae::PatchGrid;
use vl3d::nn::{causal_mask, Block, CrossBlock, Mode};
use vl3d::perceiver::{Perceiver, PerceiverKind, PerceiverSpec};
use vl3d::rng::RngHandle;
use vl3d::tensor::{Graph, ParamStore, Tensor, Var};
use vl3d::Result;

pub const SEEDS: u64 = 20;
const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
// Denominator floor: gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-3;
// Coordinates probed per tensor; all of them when the tensor is smaller.
const PROBES: usize = 24;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn randn(shape: &[usize], rng: &mut RngHandle) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn probe_indices(n: usize, rng: &mut RngHandle) -> Vec<usize> {
    if n <= PROBES {
        (0..n).collect()
    } else {
        (0..PROBES).map(|_| rng.below(n)).collect()
    }
}

/// Reduces `out` to a scalar with a fixed random projection so every
/// output element contributes a distinct weight.
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = RngHandle::new(seed ^ 0xABCD);
    let w = g.constant(randn(g.shape(out), &mut r));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Checks d(f)/d(inputs) for a function of free input tensors.
fn check_inputs<F>(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vs).unwrap();
        let l = project(&mut g, out, seed).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vs).unwrap();
    let l = project(&mut g, out, seed).unwrap();
    let grads = g.backward(l).unwrap();
    let mut rng = RngHandle::new(seed + 7);
    let mut worst: f64 = 0.0;
    for (i, v) in vs.iter().enumerate() {
        let an = grads.wrt(*v).unwrap_or_else(|| panic!("{name}: no gradient for input {i}"));
        for j in probe_indices(inputs[i].numel(), &mut rng) {
            let mut xs = inputs.clone();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            let num = (up - down) / (2.0 * H);
            let e = rel_err(an.data()[j], num);
            worst = worst.max(e);
        }
    }
    worst
}

/// Checks d(f)/d(x) and d(f)/d(params) for a parameterized module.
fn check_module<F>(name: &str, seed: u64, store: &ParamStore<f64>, x: Tensor<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |st: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut g = Graph::with_params(st);
        let xv = g.variable(x.clone());
        let out = f(&mut g, xv).unwrap();
        let l = project(&mut g, out, seed).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::with_params(store);
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv).unwrap();
    let l = project(&mut g, out, seed).unwrap();
    let grads = g.backward(l).unwrap();
    let mut rng = RngHandle::new(seed + 11);
    let mut worst: f64 = 0.0;

    let gx = grads.wrt(xv).expect("input gradient");
    for j in probe_indices(x.numel(), &mut rng) {
        let mut xp = x.clone();
        xp.data_mut()[j] += H;
        let up = eval(store, &xp);
        xp.data_mut()[j] -= 2.0 * H;
        let down = eval(store, &xp);
        let num = (up - down) / (2.0 * H);
        let e = rel_err(gx.data()[j], num);
        worst = worst.max(e);
    }

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let pname = store.get(id).name.clone();
        let an = grads.param(id).unwrap_or_else(|| panic!("{name}: no gradient for {pname}")).clone();
        for j in probe_indices(an.numel(), &mut rng) {
            let mut st = store.clone();
            st.get_mut(id).value.data_mut()[j] += H;
            let up = eval(&st, &x);
            st.get_mut(id).value.data_mut()[j] -= 2.0 * H;
            let down = eval(&st, &x);
            let num = (up - down) / (2.0 * H);
            let e = rel_err(an.data()[j], num);
            worst = worst.max(e);
        }
    }
    worst
}

/// Worst relative error of one check over every seed.
fn for_seeds(out: &mut Vec<(String, f64)>, name: &str, mut f: impl FnMut(u64, &mut RngHandle) -> f64) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = RngHandle::new(1000 + seed);
        worst = worst.max(f(seed, &mut rng));
    }
    out.push((name.to_string(), worst));
}

pub fn elementwise_ops(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "add/sub/mul", |s, r| {
        let (a, b) = (randn(&[3, 4], r), randn(&[3, 4], r));
        check_inputs("add", s, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))
            .max(check_inputs("sub", s, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])))
            .max(check_inputs("mul", s, vec![a, b], |g, v| g.mul(v[0], v[1])))
    });
    for_seeds(out, "add_broadcast", |s, r| {
        check_inputs("add_broadcast", s, vec![randn(&[2, 3, 4], r), randn(&[4], r)], |g, v| {
            g.add_broadcast(v[0], v[1])
        })
    });
    for_seeds(out, "scale", |s, r| check_inputs("scale", s, vec![randn(&[5], r)], |g, v| Ok(g.scale(v[0], -1.7))));
}

pub fn matrix_ops(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "matmul", |s, r| {
        check_inputs("matmul", s, vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)], |g, v| g.matmul(v[0], v[1]))
    });
    for_seeds(out, "linear", |s, r| {
        check_inputs("linear", s, vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        })
    });
    for_seeds(out, "bmm", |s, r| {
        check_inputs("bmm", s, vec![randn(&[2, 3, 4], r), randn(&[2, 4, 5], r)], |g, v| g.bmm(v[0], v[1], false))
    });
    for_seeds(out, "bmm_trans", |s, r| {
        check_inputs("bmm_trans", s, vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)], |g, v| g.bmm(v[0], v[1], true))
    });
}

pub fn layout_ops(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "reshape", |s, r| check_inputs("reshape", s, vec![randn(&[2, 6], r)], |g, v| g.reshape(v[0], &[3, 4])));
    for_seeds(out, "permute", |s, r| {
        check_inputs("permute", s, vec![randn(&[2, 3, 4], r)], |g, v| g.permute(v[0], &[2, 0, 1]))
    });
    for_seeds(out, "transpose", |s, r| {
        check_inputs("transpose", s, vec![randn(&[2, 3, 4], r)], |g, v| g.transpose(v[0], 0, 2))
    });
    for_seeds(out, "gather", |s, r| {
        // Repeated indices exercise gradient accumulation.
        check_inputs("gather", s, vec![randn(&[2, 5, 3], r)], |g, v| g.gather(v[0], &[4, 0, 4, 1, 1, 3], 3))
    });
    for_seeds(out, "embedding", |s, r| {
        check_inputs("embedding", s, vec![randn(&[6, 3], r)], |g, v| g.embedding(v[0], &[5, 0, 5, 2]))
    });
    for_seeds(out, "concat", |s, r| {
        check_inputs("concat", s, vec![randn(&[2, 3, 2], r), randn(&[2, 1, 2], r)], |g, v| g.concat(&[v[0], v[1]], 1))
    });
}

pub fn nonlinear_ops(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "layer_norm", |s, r| {
        check_inputs("layer_norm", s, vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6)
        })
    });
    for_seeds(out, "gelu", |s, r| check_inputs("gelu", s, vec![randn(&[4, 5], r)], |g, v| Ok(g.gelu(v[0]))));
    for_seeds(out, "softmax", |s, r| check_inputs("softmax", s, vec![randn(&[3, 5], r)], |g, v| g.softmax(v[0])));
    for_seeds(out, "dropout", |s, r| {
        let seed = r.next_u64();
        check_inputs("dropout", s, vec![randn(&[4, 6], r)], move |g, v| {
            g.dropout(v[0], 0.3, &mut RngHandle::new(seed))
        })
    });
}

pub fn volumetric_ops(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "conv3d", |s, r| {
        check_inputs(
            "conv3d",
            s,
            vec![randn(&[2, 3, 4, 4, 2], r), randn(&[5, 3, 2, 2, 2], r), randn(&[5], r)],
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), 2),
        )
    });
    for_seeds(out, "avg_pool3d", |s, r| {
        check_inputs("avg_pool3d", s, vec![randn(&[2, 3, 4, 4, 2], r)], |g, v| g.avg_pool3d(v[0], 2))
    });
    // Continuous random inputs have no ties, so the max is locally smooth.
    for_seeds(out, "max_pool3d", |s, r| {
        check_inputs("max_pool3d", s, vec![randn(&[2, 3, 4, 4, 2], r)], |g, v| g.max_pool3d(v[0], 2))
    });
}

pub fn reductions_and_losses(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "sum", |s, r| check_inputs("sum", s, vec![randn(&[3, 4], r)], |g, v| Ok(g.sum(v[0]))));
    for_seeds(out, "mean", |s, r| check_inputs("mean", s, vec![randn(&[3, 4], r)], |g, v| Ok(g.mean(v[0]))));
    for_seeds(out, "mse_loss", |s, r| {
        let target = randn(&[3, 4], r);
        check_inputs("mse_loss", s, vec![randn(&[3, 4], r)], move |g, v| g.mse_loss(v[0], &target))
    });
    for_seeds(out, "cross_entropy", |s, r| {
        check_inputs("cross_entropy", s, vec![randn(&[4, 6], r)], |g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)])
        })
    });
}

pub fn transformer_blocks(out: &mut Vec<(String, f64)>) {
    for_seeds(out, "block+causal", |s, r| {
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", 8, 2, 2, r);
        let x = randn(&[2, 5, 8], r);
        check_module("block", s, &store, x, |g, x| {
            let m = g.constant(causal_mask(5));
            block.forward(g, x, Some(m), &mut Mode::Eval)
        })
    });
    for_seeds(out, "cross_block", |s, r| {
        let mut store = ParamStore::<f64>::new();
        let block = CrossBlock::new(&mut store, "c", 8, 2, 2, r);
        let ctx = randn(&[2, 6, 8], r);
        let x = randn(&[2, 3, 8], r);
        check_module("cross_block", s, &store, x, move |g, q| {
            let c = g.constant(ctx.clone());
            block.forward(g, q, c, &mut Mode::Eval)
        })
    });
}

pub fn every_perceiver_kind(out: &mut Vec<(String, f64)>) {
    let grid = PatchGrid::from_dims([4, 4, 2]);
    for kind in PerceiverKind::ALL {
        for_seeds(out, kind.name(), |s, r| {
            let mut store = ParamStore::<f64>::new();
            let mut spec = PerceiverSpec::new(kind, 2, 6);
            spec.qformer_heads = 2;
            let p = Perceiver::new(&mut store, &spec, 4, grid, r).unwrap();
            let x = randn(&[2, grid.n_tokens(), 4], r);
            check_module(kind.name(), s, &store, x, |g, x| p.forward(g, x))
        });
    }
}

/// Runs every check; returns `(name, worst relative error)` pairs.
pub fn full_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for f in [
        elementwise_ops,
        matrix_ops,
        layout_ops,
        nonlinear_ops,
        volumetric_ops,
        reductions_and_losses,
        transformer_blocks,
        every_perceiver_kind,
    ] {
        f(&mut out);
    }
    out
}
