#![allow(dead_code)]

use m2anet::autograd::{Tape, Var};
use m2anet::nn::{Ctx, ParamStore};
use m2anet::ops::{Broadcast, NormMode};
use m2anet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Naive reference convolution: one loop per index, no reuse.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    b: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, cpg, k, _] = w.shape();
    let opg = c_out / groups;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    assert_eq!(cpg * groups, c_in);
    let mut out = Tensor::zeros([n, c_out, oh, ow]);
    for bi in 0..n {
        for co in 0..c_out {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at([bi, g * cpg + ci, iy as usize, ix as usize])
                                    * w.at([co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set([bi, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Central-difference check of the gradients `f` produces for every
/// parameter in `store`, sampling at most `per_param` coordinates of each.
/// The objective is `Σ r ⊙ f(x)` for a random `r`. Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn param_grad_error<F>(store: &ParamStore, x: &Tensor, seed: u64, per_param: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore, &Var) -> m2anet::Result<Var>,
{
    let mut r = rng(seed ^ 0x5eed);
    let eval = |store: &ParamStore| -> Tensor {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        f(&mut tape, store, &xv).unwrap().value().clone()
    };
    let y0 = eval(store);
    let proj = Tensor::uniform(y0.shape(), -1.0, 1.0, &mut r);
    let objective = |store: &ParamStore| -> f64 {
        eval(store)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, store, &xv).unwrap();
    let p = tape.constant(proj.clone());
    let prod = tape.mul(&y, &p, Broadcast::None).unwrap();
    let loss = tape.sum(&prod).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let value = store.get(&name).unwrap().clone();
        let analytic = grads
            .param(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let coords: Vec<usize> = if value.numel() <= per_param {
            (0..value.numel()).collect()
        } else {
            (0..per_param)
                .map(|_| r.gen_range(0..value.numel()))
                .collect()
        };
        for c in coords {
            let orig = value.data()[c];
            work.get_mut(&name).unwrap().data_mut()[c] = orig + STEP;
            let plus = objective(&work);
            work.get_mut(&name).unwrap().data_mut()[c] = orig - STEP;
            let minus = objective(&work);
            work.get_mut(&name).unwrap().data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max((analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

/// Central-difference check of the input gradient of `f`.
pub fn input_grad_error<F>(store: &ParamStore, x: &Tensor, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore, &Var) -> m2anet::Result<Var>,
{
    m2anet::grad_check(
        |tape, v| f(tape, store, &v[0]),
        std::slice::from_ref(x),
        m2anet::GradCheckConfig {
            step: STEP,
            seed,
            max_coords: Some(64),
        },
    )
    .unwrap()
    .max_error
}

/// Forward of a block through a fresh context.
pub fn with_ctx<'s, B>(
    mode: NormMode,
    block: B,
) -> impl Fn(&mut Tape, &ParamStore, &Var) -> m2anet::Result<Var> + 's
where
    B: Fn(&mut Ctx, &Var) -> m2anet::Result<Var> + 's,
{
    move |tape, store, x| {
        let mut ctx = Ctx::new(tape, store, mode);
        block(&mut ctx, x)
    }
}

/// Moves norm affine terms, biases and running statistics away from their
/// identity initial values so block checks exercise every path.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        for v in t.data_mut() {
            if name.ends_with(".gamma") {
                *v = r.gen_range(0.5..1.5);
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                *v = r.gen_range(-0.3..0.3);
            }
        }
    }
    let stats: Vec<String> = store.stats_iter().map(|(n, _)| n.to_string()).collect();
    for name in stats {
        let s = store.stats_mut(&name).unwrap();
        for m in &mut s.mean {
            *m = r.gen_range(-0.2..0.2);
        }
        for v in &mut s.var {
            *v = r.gen_range(0.5..2.0);
        }
    }
}
