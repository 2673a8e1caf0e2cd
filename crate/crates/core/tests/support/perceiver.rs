//! Brute-force oracles for the pooling perceivers and the conv/pool
//! equivalence.

use vl3d::mae::PatchGrid;
use vl3d::perceiver::{Perceiver, PerceiverKind, PerceiverSpec};
use vl3d::rng::RngHandle;
use vl3d::tensor::{Graph, ParamStore, Real, Tensor};

pub const MEAN_REL_TOL: f64 = 1e-6;
pub const CONV_POOL_TOL: f64 = 1e-5;

fn identity<T: Real>(c: usize) -> Tensor<T> {
    Tensor::from_fn(vec![c, c], |i| T::lit(if i / c == i % c { 1.0 } else { 0.0 }))
}

/// Pooling perceiver whose projection is the identity.
fn pool_perceiver<T: Real>(kind: PerceiverKind, k: usize, c: usize, grid: PatchGrid) -> (Perceiver, ParamStore<T>) {
    let mut store = ParamStore::new();
    let p = Perceiver::new(&mut store, &PerceiverSpec::new(kind, k, c), c, grid, &mut RngHandle::new(0)).unwrap();
    store.get_mut(store.id("perceiver.proj.weight").unwrap()).value = identity(c);
    (p, store)
}

/// Reduces each k³ block directly from token indices.
fn block_reduce(x: &Tensor<f64>, grid: PatchGrid, k: usize, max: bool) -> Vec<f64> {
    let [h, w, d] = grid.dims;
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow, od) = (h / k, w / k, d / k);
    let mut out = Vec::with_capacity(b * oh * ow * od * c);
    for bi in 0..b {
        for a in 0..oh {
            for e in 0..ow {
                for f in 0..od {
                    for ch in 0..c {
                        let mut vals = Vec::with_capacity(k * k * k);
                        for i in 0..k {
                            for j in 0..k {
                                for l in 0..k {
                                    let t = (a * k + i) * w * d + (e * k + j) * d + (f * k + l);
                                    vals.push(x.data()[(bi * n + t) * c + ch]);
                                }
                            }
                        }
                        out.push(if max {
                            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            vals.iter().sum::<f64>() / vals.len() as f64
                        });
                    }
                }
            }
        }
    }
    out
}

fn random_case(rng: &mut RngHandle) -> (PatchGrid, usize, usize, usize) {
    let k = 1 + rng.below(3);
    let dims = [k * (1 + rng.below(3)), k * (1 + rng.below(3)), k * (1 + rng.below(3))];
    (PatchGrid::from_dims(dims), k, 1 + rng.below(3), 1 + rng.below(6))
}

/// Returns (max-pool mismatches, worst mean-pool relative error) over
/// `batches` random token batches, at f64.
pub fn pooling_vs_brute_force(batches: u64) -> (usize, f64) {
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for s in 0..batches {
        let mut rng = RngHandle::new(500 + s);
        let (grid, k, b, c) = random_case(&mut rng);
        let x = Tensor::from_fn(vec![b, grid.n_tokens(), c], |_| rng.normal() * 3.0);
        for max in [true, false] {
            let kind = if max { PerceiverKind::MaxPool } else { PerceiverKind::AvgPool };
            let (p, store) = pool_perceiver::<f64>(kind, k, c, grid);
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x.clone());
            let y = p.forward(&mut g, xv).unwrap();
            let got = g.value(y).data();
            let want = block_reduce(&x, grid, k, max);
            assert_eq!(got.len(), want.len());
            for (&a, &o) in got.iter().zip(&want) {
                if max {
                    mismatches += usize::from(a.to_bits() != o.to_bits());
                } else {
                    let rel = (a - o).abs() / o.abs().max(1e-12);
                    worst = worst.max(rel);
                }
            }
        }
    }
    (mismatches, worst)
}

/// A conv perceiver with per-channel uniform 1/k³ kernels and zero bias
/// against the average-pool perceiver with identity projection.
pub fn conv_vs_avg_pool(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..trials {
        let mut rng = RngHandle::new(900 + s);
        let (grid, k, b, c) = random_case(&mut rng);
        let k3 = k * k * k;
        let mut cstore = ParamStore::<f32>::new();
        let conv = Perceiver::new(&mut cstore, &PerceiverSpec::new(PerceiverKind::Conv3d, k, c), c, grid, &mut rng).unwrap();
        cstore.get_mut(cstore.id("perceiver.conv.weight").unwrap()).value =
            Tensor::from_fn(vec![c, c, k, k, k], |i| if i / (c * k3) == (i / k3) % c { 1.0 / k3 as f32 } else { 0.0 });
        let (pool, pstore) = pool_perceiver(PerceiverKind::AvgPool, k, c, grid);
        let x = Tensor::from_fn(vec![b, grid.n_tokens(), c], |_| rng.normal() as f32);
        let run = |p: &Perceiver, st: &ParamStore<f32>| {
            let mut g = Graph::with_params(st);
            let xv = g.constant(x.clone());
            let y = p.forward(&mut g, xv).unwrap();
            g.value(y).clone()
        };
        worst = worst.max(run(&conv, &cstore).max_abs_diff(&run(&pool, &pstore)) as f64);
    }
    worst
}
