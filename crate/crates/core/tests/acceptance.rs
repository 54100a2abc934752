//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

mod common;

use std::time::Instant;

use common::{
    input_grad_error, jitter, naive_conv, param_grad_error, random, rng, with_ctx, STEP, TOL,
};
use m2anet::autograd::{Tape, Var};
use m2anet::checkpoint;
use m2anet::complexity::{self, layer_macs, layer_params};
use m2anet::data::{
    kfold_split, preprocess, synth_dataset, synth_dataset_sized, Sample, PARASITIZED,
};
use m2anet::explain::grad_cam;
use m2anet::metrics::{roc_auc, Confusion};
use m2anet::model::{fusion_projection, BlockKind, FusionBridge, M2ANet, ModelConfig, Preset};
use m2anet::nn::{
    ClassifierHead, Conv, Ctx, Downsample, LayerSpec, MbConv3, MbConvOptions, Mhsa2d, MhsaBlock,
    ParamStore, SeOrder, SqueezeExcite, Stem,
};
use m2anet::ops::{
    conv2d, conv_output_len, Activation, Broadcast, ConvParams, NormMode, RunningStats,
};
use m2anet::train::{self, run_crossval, Prepared, TrainConfig};
use m2anet::{grad_check, GradCheckConfig, Result, Tensor};
use rand::Rng;

const SEEDS: [u64; 5] = [21, 22, 23, 24, 25];
const DESK_SIZE: usize = 32;

type Outcome = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_config() -> ModelConfig {
    ModelConfig::preset(Preset::S)
        .with_widths(8, &[8, 16, 24, 32])
        .with_input_size(DESK_SIZE)
}

fn desk_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 2e-3,
        weight_decay: 0.05,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn prepare(samples: &[Sample]) -> Prepared {
    let refs: Vec<&Sample> = samples.iter().collect();
    Prepared::new(&refs, DESK_SIZE)
}

// ---------------------------------------------------------------- gradients

fn primitive_error<F>(inputs: impl Fn(u64) -> Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = GradCheckConfig {
                step: STEP,
                seed,
                max_coords: None,
            };
            grad_check(f, &inputs(seed), cfg).unwrap().max_error
        })
        .fold(0.0, f64::max)
}

fn block_error<B: Clone>(
    x_shape: [usize; 4],
    mode: NormMode,
    build: impl Fn(&mut ParamStore, u64) -> B,
    fwd: impl Fn(&B, &mut Ctx, &Var) -> Result<Var> + Copy,
) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let block = build(&mut store, seed);
        jitter(&mut store, seed + 1);
        let x = random(x_shape, seed + 2);
        let f = with_ctx(mode, |ctx, x| fwd(&block, ctx, x));
        worst = worst.max(input_grad_error(&store, &x, seed, &f));
        worst = worst.max(param_grad_error(&store, &x, seed, 12, &f));
    }
    worst
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| results.push((name.to_string(), e));

    for (c_in, c_out, groups) in [(2, 3, 1), (2, 4, 2), (4, 4, 4)] {
        record(
            &format!("conv2d g{groups}"),
            primitive_error(
                |s| {
                    vec![
                        random([2, c_in, 5, 5], s),
                        random([c_out, c_in / groups, 3, 3], s + 1),
                        random([1, c_out, 1, 1], s + 2),
                    ]
                },
                move |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), ConvParams::new(2, 1, groups)),
            ),
        );
    }
    for mode in [NormMode::Train, NormMode::Infer] {
        record(
            &format!("batch_norm {mode:?}"),
            primitive_error(
                |s| {
                    vec![
                        random([2, 3, 3, 3], s),
                        random([1, 3, 1, 1], s + 1).map(|v| 1.0 + 0.5 * v),
                        random([1, 3, 1, 1], s + 2),
                    ]
                },
                move |t, v| {
                    let running = RunningStats {
                        mean: vec![0.1, -0.2, 0.3],
                        var: vec![0.8, 1.5, 0.6],
                    };
                    t.batch_norm("bn", &v[0], &v[1], &v[2], &running, mode, 1e-5)
                },
            ),
        );
    }
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::HardSwish] {
        record(
            &format!("{kind:?}"),
            primitive_error(
                |s| vec![random([1, 2, 4, 4], s).map(|v| 4.0 * v)],
                move |t, v| t.activation(&v[0], kind),
            ),
        );
    }
    record(
        "softmax",
        primitive_error(
            |s| vec![random([2, 3, 2, 4], s)],
            |t, v| t.softmax(&v[0], 3),
        ),
    );
    record(
        "avg pool",
        primitive_error(
            |s| vec![random([2, 3, 3, 2], s)],
            |t, v| t.global_avg_pool(&v[0]),
        ),
    );
    record(
        "add",
        primitive_error(
            |s| vec![random([2, 3, 2, 2], s), random([2, 3, 2, 2], s + 1)],
            |t, v| t.add(&v[0], &v[1], Broadcast::None),
        ),
    );
    record(
        "mul per-channel",
        primitive_error(
            |s| vec![random([2, 3, 2, 2], s), random([2, 3, 1, 1], s + 1)],
            |t, v| t.mul(&v[0], &v[1], Broadcast::PerChannel),
        ),
    );
    record(
        "matmul",
        primitive_error(
            |s| vec![random([1, 2, 4, 3], s), random([1, 2, 4, 5], s + 1)],
            |t, v| t.matmul(&v[0], &v[1], true, false),
        ),
    );
    record(
        "cross entropy",
        primitive_error(
            |s| vec![random([4, 2, 1, 1], s).map(|v| 3.0 * v)],
            |t, v| t.cross_entropy(&v[0], &[0, 1, 1, 0]),
        ),
    );

    for mode in [NormMode::Train, NormMode::Infer] {
        record(
            &format!("stem {mode:?}"),
            block_error(
                [2, 3, 6, 6],
                mode,
                |st, s| Stem::new(st, &mut rng(s), 4).unwrap(),
                |b, c, x| b.forward(c, x),
            ),
        );
        record(
            &format!("mbconv3 {mode:?}"),
            block_error(
                [2, 4, 5, 5],
                mode,
                |st, s| {
                    MbConv3::new(st, &mut rng(s), "mb", 4, 6, 2, MbConvOptions::default()).unwrap()
                },
                |b, c, x| b.forward(c, x),
            ),
        );
        record(
            &format!("mhsa block {mode:?}"),
            block_error(
                [2, 8, 2, 3],
                mode,
                |st, s| MhsaBlock::new(st, &mut rng(s), "blk", 8, 4, 8).unwrap(),
                |b, c, x| b.forward(c, x),
            ),
        );
        record(
            &format!("downsample {mode:?}"),
            block_error(
                [2, 3, 5, 5],
                mode,
                |st, s| Downsample::new(st, &mut rng(s), "down", 3, 4).unwrap(),
                |b, c, x| b.forward(c, x),
            ),
        );
    }
    for order in [SeOrder::Literal, SeOrder::Standard] {
        record(
            &format!("se {order:?}"),
            block_error(
                [2, 4, 3, 3],
                NormMode::Infer,
                |st, s| SqueezeExcite::new(st, &mut rng(s), "se", 4, 2, order).unwrap(),
                |b, c, x| b.forward(c, x),
            ),
        );
    }
    for groups in [1, 8] {
        record(
            &format!("grouped mhsa g{groups}"),
            block_error(
                [2, 8, 3, 3],
                NormMode::Infer,
                |st, s| Mhsa2d::new(st, &mut rng(s), "attn", 8, 2, groups).unwrap(),
                |b, c, x| b.forward(c, x),
            ),
        );
    }
    record(
        "head",
        block_error(
            [3, 5, 2, 2],
            NormMode::Infer,
            |st, s| ClassifierHead::new(st, &mut rng(s), 5, 2).unwrap(),
            |b, c, x| b.forward(c, x),
        ),
    );

    let mut fusion: f64 = 0.0;
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let projection = fusion_projection(
            &mut store,
            &mut rng(seed),
            "fusion.proj",
            [1, 4, 6, 6],
            [1, 8, 3, 3],
        )
        .unwrap();
        let bridge = FusionBridge {
            source: 0,
            target: 1,
            projection,
        };
        jitter(&mut store, seed);
        let local = random([2, 4, 6, 6], seed + 1);
        let global = random([2, 8, 3, 3], seed + 2);
        let cfg = GradCheckConfig {
            step: STEP,
            seed,
            max_coords: None,
        };
        let r = grad_check(
            |tape, v| {
                let mut ctx = Ctx::new(tape, &store, NormMode::Infer);
                bridge.forward(&mut ctx, &v[0], &v[1])
            },
            &[local.clone(), global.clone()],
            cfg,
        )
        .unwrap();
        fusion = fusion.max(r.max_error);
        fusion = fusion.max(param_grad_error(&store, &local, seed, 16, |tape, st, x| {
            let g = tape.constant(global.clone());
            let mut ctx = Ctx::new(tape, st, NormMode::Infer);
            bridge.forward(&mut ctx, x, &g)
        }));
    }
    record("fusion", fusion);

    let cfg = ModelConfig::preset(Preset::S)
        .with_widths(4, &[4, 8, 8, 8])
        .with_heads(2)
        .with_input_size(16);
    let mut model_err: f64 = 0.0;
    for (mode, batch) in [(NormMode::Infer, 1), (NormMode::Train, 2)] {
        for seed in SEEDS {
            let mut model = M2ANet::build(cfg.clone(), seed).unwrap();
            jitter(&mut model.store, seed + 1);
            let x = random([batch, 3, 16, 16], seed + 2);
            let f = |tape: &mut Tape, store: &ParamStore, x: &Var| {
                let mut m = model.clone();
                m.store = store.clone();
                m.forward(tape, x, mode)
            };
            model_err = model_err.max(input_grad_error(&model.store, &x, seed, f));
            model_err = model_err.max(param_grad_error(&model.store, &x, seed, 4, f));
        }
    }
    record("reduced model", model_err);

    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) = results.iter().fold((String::new(), 0.0), |acc, (n, e)| {
        if *e > acc.1 {
            (n.clone(), *e)
        } else {
            acc
        }
    });
    let failing: Vec<&str> = results
        .iter()
        .filter(|(_, e)| *e >= TOL)
        .map(|(n, _)| n.as_str())
        .collect();
    verdict(
        failing.is_empty() && secs < 300.0,
        format!(
            "{} checks x {} seeds, worst rel err {worst:.2e} ({worst_name}), {secs:.1}s, failing {failing:?}",
            results.len(),
            SEEDS.len()
        ),
    )
}

// ---------------------------------------------------------------- convolution

fn conv_oracle() -> Outcome {
    let mut r = rng(4242);
    let mut worst: f64 = 0.0;
    let mut groupings = [0usize; 3];
    let cases = 150;
    for _ in 0..cases {
        let n = r.gen_range(1..=2);
        let c_in = r.gen_range(1..=4);
        let divisors: Vec<usize> = (1..=c_in).filter(|g| c_in % g == 0).collect();
        let groups = divisors[r.gen_range(0..divisors.len())];
        let c_out = groups * r.gen_range(1..=2);
        let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let k = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let padding = r.gen_range(0..=1);
        if conv_output_len(h, k, stride, padding).is_none()
            || conv_output_len(w, k, stride, padding).is_none()
        {
            continue;
        }
        groupings[if groups == 1 {
            0
        } else if groups == c_in {
            1
        } else {
            2
        }] += 1;
        let x = Tensor::uniform([n, c_in, h, w], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform([c_out, c_in / groups, k, k], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([1, c_out, 1, 1], -1.0, 1.0, &mut r);
        let fast = conv2d(&x, &wt, Some(&b), ConvParams::new(stride, padding, groups)).unwrap();
        let slow = naive_conv(&x, &wt, Some(b.data()), stride, padding, groups);
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    let checked: usize = groupings.iter().sum();
    verdict(
        worst <= 1e-9 && checked >= 100 && groupings.iter().all(|&g| g > 0),
        format!(
            "{checked} cases (standard/depthwise/grouped {groupings:?}), max |diff| {worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- complexity

fn projection_scaling() -> Outcome {
    let mut rows = Vec::new();
    let mut ok = true;
    for c in [8usize, 16, 32, 64, 128] {
        let measure = |g: usize| {
            let mut store = ParamStore::new();
            let conv = Conv::new(
                &mut store,
                &mut rng(c as u64),
                "proj",
                c,
                c,
                1,
                ConvParams::new(1, 0, g),
                true,
            )
            .unwrap();
            let mut specs = Vec::new();
            conv.describe([1, c, 14, 14], &mut specs).unwrap();
            (
                store.num_elements() as u64,
                layer_params(&specs[0].kind),
                layer_macs(&specs[0]),
            )
        };
        let (pd, cd, md) = measure(1);
        let (pg, cg, mg) = measure(c);
        let c = c as u64;
        ok &= pd == c * c + c && cd == pd && pg == 2 * c && cg == pg && mg * c == md;
        rows.push(format!("c={c}: {pd}/{pg} params, MACs {md}/{mg}"));
    }
    verdict(ok, rows.join("; "))
}

fn loop_multiplies(
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    p: ConvParams,
) -> u64 {
    let oh = conv_output_len(h, k, p.stride, p.padding).unwrap();
    let ow = conv_output_len(w, k, p.stride, p.padding).unwrap();
    let mut count = 0u64;
    for _ in 0..n * c_out * oh * ow {
        for _ in 0..c_in / p.groups {
            for _ in 0..k * k {
                count += 1;
            }
        }
    }
    count
}

fn flop_counter() -> Outcome {
    let mut r = rng(2020);
    let mut mismatches = 0;
    for case in 0..20 {
        let n = r.gen_range(1..=3);
        let mut specs: Vec<LayerSpec> = Vec::new();
        let mut store = ParamStore::new();
        let want = if case % 2 == 0 {
            let g = [1, 2, 4][r.gen_range(0..3)];
            let (c_in, c_out) = (g * r.gen_range(1..=4), g * r.gen_range(1..=4));
            let k = r.gen_range(1..=3);
            let p = ConvParams::new(r.gen_range(1..=2), r.gen_range(0..=1), g);
            let (h, w) = (r.gen_range(3..=12), r.gen_range(3..=12));
            let bias = r.gen_bool(0.5);
            Conv::new(&mut store, &mut r, "c", c_in, c_out, k, p, bias)
                .unwrap()
                .describe([n, c_in, h, w], &mut specs)
                .unwrap();
            loop_multiplies(n, c_in, h, w, c_out, k, p)
        } else {
            let heads = [1, 2, 4][r.gen_range(0..3)];
            let c = heads * r.gen_range(1..=4);
            let groups = [1, c][r.gen_range(0..2)];
            let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
            Mhsa2d::new(&mut store, &mut r, "m", c, heads, groups)
                .unwrap()
                .describe([n, c, h, w], &mut specs)
                .unwrap();
            let t = h * w;
            let mut attn = 0u64;
            for _ in 0..n * heads * t * t * (c / heads) {
                attn += 2;
            }
            4 * loop_multiplies(n, c, h, w, c, 1, ConvParams::new(1, 0, groups)) + attn
        };
        if specs.iter().map(layer_macs).sum::<u64>() != want {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("20 configs, {mismatches} mismatches"),
    )
}

fn presets() -> Outcome {
    let s = M2ANet::from_preset(Preset::S, 0).unwrap();
    let l = M2ANet::from_preset(Preset::L, 0).unwrap();
    let a = M2ANet::from_preset(Preset::A8, 0).unwrap();
    let blocks = |m: &M2ANet| {
        (
            m.block_count(BlockKind::Mbconv),
            m.block_count(BlockKind::Mhsa),
        )
    };
    let (ps, pl) = (s.num_params(), l.num_params());
    let counted = complexity::count_params(&s).unwrap() as usize;
    let ok = blocks(&s) == (4, 2)
        && blocks(&l) == (4, 4)
        && blocks(&a) == (8, 0)
        && ps < pl
        && (ps as f64 - 1.2e6).abs() <= 0.2 * 1.2e6
        && counted == ps;
    verdict(
        ok,
        format!(
            "S {:?} {ps}, L {:?} {pl}, a8 {:?} {}",
            blocks(&s),
            blocks(&l),
            blocks(&a),
            a.num_params()
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn metric_oracles() -> Outcome {
    let mut r = rng(99);
    let mut auc_bad = 0;
    for case in 0..50 {
        let n = r.gen_range(2..=200);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = if case % 2 == 0 { 4 } else { 10_000 };
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64).collect();
        let (mut num, mut pairs) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        if roc_auc(&scores, &labels).unwrap().auc != num as f64 / (2 * pairs) as f64 {
            auc_bad += 1;
        }
    }
    let hand = Confusion {
        tp: 45,
        fn_: 5,
        fp: 10,
        tn: 40,
    }
    .kappa();
    let mut indep_bad = 0;
    for _ in 0..20 {
        let (a, b, c, d) = (
            r.gen_range(1..30u64),
            r.gen_range(1..30u64),
            r.gen_range(1..30u64),
            r.gen_range(1..30u64),
        );
        let m = Confusion {
            tp: a * c,
            fn_: a * d,
            fp: b * c,
            tn: b * d,
        };
        if m.kappa() != 0.0 {
            indep_bad += 1;
        }
    }
    verdict(
        auc_bad == 0 && hand == 0.70 && indep_bad == 0,
        format!("AUC mismatches {auc_bad}/50, hand kappa {hand}, non-zero independent kappas {indep_bad}/20"),
    )
}

// ---------------------------------------------------------------- learning

struct Desk {
    model: M2ANet,
    held_out: Vec<Sample>,
}

fn desk_learning() -> (Outcome, Option<Desk>) {
    let train_samples = synth_dataset(200, 1).unwrap();
    let held_out = synth_dataset_sized(200, 99, 48).unwrap();
    let (train_set, val_set) = (prepare(&train_samples), prepare(&held_out));
    let cfg = desk_train_config(15);
    let run = || {
        let start = Instant::now();
        let mut model = M2ANet::build(desk_config(), cfg.seed).unwrap();
        let history = train::train(&mut model, &train_set, Some(&val_set), &cfg, None).unwrap();
        (model, history, start.elapsed().as_secs_f64())
    };
    let (model, h1, secs) = run();
    let (again, h2, _) = run();
    let deterministic =
        h1 == h2 && checkpoint::to_bytes(&model).unwrap() == checkpoint::to_bytes(&again).unwrap();
    let train_acc = train::evaluate_prepared(&model, &train_set, 50)
        .unwrap()
        .accuracy;
    let val_acc = train::evaluate_prepared(&model, &val_set, 50)
        .unwrap()
        .accuracy;
    let outcome = verdict(
        train_acc >= 0.95 && val_acc >= 0.90 && secs < 600.0 && deterministic,
        format!(
            "{} epochs: train {train_acc:.3}, held-out {val_acc:.3}, {secs:.1}s per run, deterministic {deterministic}",
            h1.epochs.len()
        ),
    );
    (outcome, Some(Desk { model, held_out }))
}

fn crossval() -> Outcome {
    let samples = synth_dataset(200, 1).unwrap();
    let report = match run_crossval(&desk_config(), &samples, &desk_train_config(15), 5, 0) {
        Ok(r) => r,
        Err(e) => return Err(e.to_string()),
    };
    let table = report.to_table();
    let lines: Vec<&str> = table.lines().collect();
    let shape_ok = lines.len() == 3
        && (1..=5).all(|i| lines[0].contains(&format!("k-fold {i}")))
        && lines[1].matches("TPR").count() == 5
        && lines[2].starts_with("M2ANET-S");
    let folds_ok = report
        .folds
        .iter()
        .all(|f| f.report.tpr > 0.9 && f.report.tnr > 0.9);

    let mut partition_ok = true;
    for n in 2..=10usize {
        for bits in 0u32..(1 << n) {
            let labels: Vec<usize> = (0..n).map(|i| ((bits >> i) & 1) as usize).collect();
            for k in 2..=n.min(6) {
                let plan = kfold_split(&labels, k, 0).unwrap();
                let mut seen = vec![0; n];
                let mut sizes = Vec::new();
                let mut pos = Vec::new();
                for f in 0..k {
                    let held = plan.fold(f);
                    partition_ok &= held.len() + plan.train_indices(f).len() == n;
                    held.iter().for_each(|&i| seen[i] += 1);
                    sizes.push(held.len());
                    pos.push(held.iter().filter(|&&i| labels[i] == 1).count());
                }
                let spread = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap();
                partition_ok &=
                    seen.iter().all(|&c| c == 1) && spread(&sizes) <= 1 && spread(&pos) <= 1;
            }
        }
    }
    println!("{table}");
    let cells: Vec<String> = report
        .folds
        .iter()
        .map(|f| format!("{:.3}/{:.3}", f.report.tpr, f.report.tnr))
        .collect();
    verdict(
        shape_ok && folds_ok && partition_ok,
        format!(
            "fold TPR/TNR {cells:?}, table shape {shape_ok}, exhaustive partitions {partition_ok}"
        ),
    )
}

fn localization(desk: &Desk, layer: &str) -> std::result::Result<(usize, usize), String> {
    let (mut hits, mut total) = (0, 0);
    for s in desk.held_out.iter().filter(|s| s.label == PARASITIZED) {
        let image = preprocess(&s.image, DESK_SIZE);
        let heat =
            grad_cam(&desk.model, &image, PARASITIZED, Some(layer)).map_err(|e| e.to_string())?;
        let (inside, outside) = heat
            .region_means(s.mask.as_ref().unwrap())
            .map_err(|e| e.to_string())?;
        total += 1;
        if inside > outside {
            hits += 1;
        }
    }
    Ok((hits, total))
}

/// Measured at the fused stage, the first attention stage; the default
/// layer's figure is reported alongside.
fn grad_cam_localization(desk: Option<&Desk>) -> Outcome {
    let Some(desk) = desk else {
        return Err("no trained model".into());
    };
    let bridge = desk
        .model
        .bridge
        .as_ref()
        .ok_or("model has no fusion bridge")?;
    let fused = desk.model.stages[bridge.target].name.clone();
    let (hits, total) = localization(desk, &fused)?;
    let default = desk.model.last_local_layer();
    let (dh, dt) = localization(desk, &default)?;
    let frac = hits as f64 / total as f64;
    verdict(
        frac >= 0.8,
        format!(
            "{fused}: {hits}/{total} class-1 images ({:.1}%) hotter inside the blob; {default}: {dh}/{dt}",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- checkpoint and bench

fn checkpoint_round_trip(desk: Option<&Desk>) -> Outcome {
    let model = desk.map_or_else(
        || M2ANet::build(desk_config(), 3).unwrap(),
        |d| d.model.clone(),
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).map_err(|e| e.to_string())?;
    let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let batch = Tensor::uniform([8, 3, DESK_SIZE, DESK_SIZE], 0.0, 1.0, &mut rng(8));
    let a = model.predict(&batch).unwrap();
    let b = back.predict(&batch).unwrap();
    let identical = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    verdict(
        identical,
        format!("{} logits bitwise identical: {identical}", a.numel()),
    )
}

fn bench_ordering() -> Outcome {
    let s = M2ANet::from_preset(Preset::S, 0).unwrap();
    let l = M2ANet::from_preset(Preset::L, 0).unwrap();
    let bs = complexity::bench(&s, 64, 0, 3, 1).map_err(|e| e.to_string())?;
    let bl = complexity::bench(&l, 64, 0, 3, 1).map_err(|e| e.to_string())?;
    verdict(
        bs.throughput >= bl.throughput,
        format!(
            "batch 64, 3 reps: S {:.2} img/s, L {:.2} img/s",
            bs.throughput, bl.throughput
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match &outcome {
        Ok(d) => println!("PASS  {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL  {name}: {d}");
        }
    };
    report("gradient correctness", gradients());
    report("convolution oracle", conv_oracle());
    report("grouped projection scaling", projection_scaling());
    report("FLOP counter", flop_counter());
    report("preset structure", presets());
    report("metric oracles", metric_oracles());
    let (learning, desk) = desk_learning();
    report("desk-scale learning", learning);
    report("5-fold protocol", crossval());
    report(
        "Grad-CAM localization",
        grad_cam_localization(desk.as_ref()),
    );
    report(
        "checkpoint round trip",
        checkpoint_round_trip(desk.as_ref()),
    );
    report("bench ordering", bench_ordering());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
