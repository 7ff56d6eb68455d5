//! Acceptance run. Prints one `PASS` or `FAIL` line per criterion and exits
//! non-zero if any failed.
//!
//! The benchmark criteria train six models on the default synthetic
//! benchmark; set `REAPS_BENCH_EPOCHS` to change the per-run epoch count.

mod common;

use common::{max_diff, rand_vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reaps::checks::{model_suite, primitive_suite, randomized_tiny_model, GRAPH_TOL, PRIMITIVE_TOL};
use reaps::psn::serialize_features;
use reaps::ran::{compute_cam, largest_component_bbox, threshold_mask, BBox, BinaryMask, CamMap};
use reaps::synth::{generate_dataset, Dataset};
use reaps::train::{evaluate, lr_schedule, make_batch, Metrics, Trainer};
use reaps::{checkpoint, Ablation, PoolMode, ReapsModel, RunConfig, Tape, Tensor, TrainConfig};
use std::process::ExitCode;
use std::time::Instant;

const BENCH_EPOCHS: usize = 12;
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const ORACLE_TOL: f64 = 1e-5;
const OVERFIT_STEPS: usize = 300;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit_secs: Option<f64>, f: impl FnOnce() -> Verdict) -> Verdict {
    let t0 = Instant::now();
    let mut v = f();
    let secs = t0.elapsed().as_secs_f64();
    v.detail = format!("{}; {secs:.1}s", v.detail);
    if let Some(limit) = limit_secs {
        if secs >= limit {
            v.pass = false;
            v.detail = format!("{} over the {limit:.0}s budget", v.detail);
        }
    }
    v
}

fn gradients() -> Verdict {
    let prims = primitive_suite(false).unwrap();
    let prim_err = prims.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    let prim_failed: Vec<&str> = prims.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let graph = model_suite().unwrap();
    let graph_err = graph.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    let params = randomized_tiny_model(3).unwrap().params.num_scalars();
    let pass = prim_failed.is_empty() && prim_err < PRIMITIVE_TOL && graph_err < GRAPH_TOL && params <= 5000;
    verdict(
        pass,
        format!(
            "{} primitives max_rel_err={prim_err:.2e} failed={prim_failed:?}; full graph ({params} params) max_rel_err={graph_err:.2e}",
            prims.len()
        ),
    )
}

fn f32_tensor(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::new(shape, data.iter().map(|v| *v as f32).collect()).unwrap()
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

/// Single-precision tape ops against f64 loop oracles on the same inputs.
fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name, d: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(d),
        None => worst.push((name, d)),
    };

    for (xs, ks, stride, pad) in [
        ((2, 3, 8, 7), (4, 3, 3), 1, 1),
        ((3, 2, 9, 9), (5, 3, 3), 2, 1),
        ((1, 16, 16, 16), (32, 3, 3), 1, 1),
    ] {
        let x = rounded(&rand_vec(&mut rng, xs.0 * xs.1 * xs.2 * xs.3));
        let w = rounded(&rand_vec(&mut rng, ks.0 * xs.1 * ks.1 * ks.2));
        let b = rounded(&rand_vec(&mut rng, ks.0));
        let mut t = Tape::<f32>::new();
        let xv = t.constant(f32_tensor(&[xs.0, xs.1, xs.2, xs.3], &x));
        let wv = t.constant(f32_tensor(&[ks.0, xs.1, ks.1, ks.2], &w));
        let bv = t.constant(f32_tensor(&[ks.0], &b));
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        record("conv2d", max_diff(&t.value(y).to_f64_vec(), &common::conv(&x, &w, &b, xs, ks, stride, pad)));
    }
    for (b, c, h, w, k, s) in [(1, 1, 4, 4, 2, 2), (2, 3, 8, 6, 2, 2), (1, 2, 7, 7, 3, 2)] {
        let x = rounded(&rand_vec(&mut rng, b * c * h * w));
        let mut t = Tape::<f32>::new();
        let xv = t.constant(f32_tensor(&[b, c, h, w], &x));
        let y = t.max_pool2d(xv, k, s).unwrap();
        record("max_pool2d", max_diff(&t.value(y).to_f64_vec(), &common::max_pool(&x, b * c, h, w, k, s)));
    }
    for (b, c, h, w) in [(1, 1, 2, 2), (2, 3, 4, 5), (3, 64, 8, 8)] {
        let x = rounded(&rand_vec(&mut rng, b * c * h * w));
        for mode in [PoolMode::Sum, PoolMode::Mean] {
            let mut t = Tape::<f32>::new();
            let xv = t.constant(f32_tensor(&[b, c, h, w], &x));
            let y = t.global_pool(xv, mode).unwrap();
            let want = common::global_pool(&x, h * w, mode == PoolMode::Mean);
            record("global_pool", max_diff(&t.value(y).to_f64_vec(), &want));
        }
    }
    for (p, h, w, kh, kw) in [(1, 4, 4, 2, 2), (3, 6, 8, 6, 2), (2, 8, 8, 8, 1)] {
        let x = rounded(&rand_vec(&mut rng, p * h * w));
        let mut t = Tape::<f32>::new();
        let xv = t.constant(f32_tensor(&[p, h, w], &x));
        let y = t.avg_pool_rect(xv, kh, kw).unwrap();
        record("avg_pool_rect", max_diff(&t.value(y).to_f64_vec(), &common::avg_pool_rect(&x, p, h, w, kh, kw)));
    }
    for (b, d, k) in [(1, 1, 1), (3, 7, 5), (16, 448, 10)] {
        let x = rounded(&rand_vec(&mut rng, b * d));
        let w = rounded(&rand_vec(&mut rng, d * k));
        let bias = rounded(&rand_vec(&mut rng, k));
        let mut t = Tape::<f32>::new();
        let xv = t.constant(f32_tensor(&[b, d], &x));
        let wv = t.constant(f32_tensor(&[d, k], &w));
        let bv = t.constant(f32_tensor(&[k], &bias));
        let y = t.linear(xv, wv, Some(bv)).unwrap();
        record("linear", max_diff(&t.value(y).to_f64_vec(), &common::linear(&x, &w, &bias, b, d, k)));
    }
    for (c, h, w, k) in [(1, 2, 2, 2), (4, 3, 5, 3), (64, 8, 8, 10)] {
        let f = rounded(&rand_vec(&mut rng, c * h * w));
        let wt = rounded(&rand_vec(&mut rng, c * k));
        let class = rng.gen_range(0..k);
        let cam = compute_cam(&f32_tensor(&[c, h, w], &f), &f32_tensor(&[c, k], &wt), class, (64, 64)).unwrap();
        record("compute_cam", max_diff(&cam.values.to_f64_vec(), &common::cam(&f, &wt, c, h * w, k, class)));
    }
    for (b, c, h, w, n) in [(1, 1, 2, 4, 2), (2, 3, 4, 8, 4), (2, 64, 8, 8, 8)] {
        let x = rounded(&rand_vec(&mut rng, b * c * h * w));
        let mut t = Tape::<f32>::new();
        let xv = t.constant(f32_tensor(&[b, c, h, w], &x));
        let seq = serialize_features(&mut t, xv, n).unwrap();
        record("serialize_features", max_diff(&t.value(seq.0).to_f64_vec(), &common::serialize(&x, (b, c, h, w), n)));
    }

    let max = worst.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, d)| format!("{n}={d:.1e}")).collect::<Vec<_>>().join(" ");
    verdict(max <= ORACLE_TOL, format!("max abs diff {detail}"))
}

fn cam_map(h: usize, w: usize, v: Vec<f64>) -> CamMap<f64> {
    CamMap {
        values: Tensor::new(&[h, w], v).unwrap(),
        class_index: 0,
        source_shape: (h, w),
    }
}

fn mask(h: usize, w: usize, cells: &[(usize, usize)]) -> BinaryMask {
    let mut bits = vec![false; h * w];
    for &(y, x) in cells {
        bits[y * w + x] = true;
    }
    BinaryMask {
        bits,
        height: h,
        width: w,
        tau: 0.5,
    }
}

fn pipeline_invariants() -> Verdict {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    for trial in 0..50 {
        let (c, h, w, k) = (rng.gen_range(1..8), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..5));
        let f = Tensor::new(&[c, h, w], rand_vec(&mut rng, c * h * w)).unwrap();
        let wt = rand_vec(&mut rng, c * k);
        let class = rng.gen_range(0..k);
        let alpha = 10f64.powf(rng.gen_range(-3.0..3.0));
        let tau = rng.gen_range(0.0..1.0);
        let scaled: Vec<f64> = wt.iter().map(|v| v * alpha).collect();
        let a = compute_cam(&f, &Tensor::new(&[c, k], wt).unwrap(), class, (h, w)).unwrap();
        let b = compute_cam(&f, &Tensor::new(&[c, k], scaled).unwrap(), class, (h, w)).unwrap();
        if threshold_mask(&a, tau).bits != threshold_mask(&b, tau).bits {
            failures.push(format!("scale invariance, trial {trial}"));
        }

        let ch = rng.gen_range(0..c);
        let mut onehot = vec![0.0; c * k];
        onehot[ch * k + class] = 1.0;
        let cam = compute_cam(&f, &Tensor::new(&[c, k], onehot).unwrap(), class, (4 * h, 4 * w)).unwrap();
        let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
        if cam.values.data() != plane {
            failures.push(format!("one-hot selection, trial {trial}"));
        }
        let direct = cam_map(h, w, plane.to_vec());
        let via_cam = largest_component_bbox(&threshold_mask(&cam, 0.1), (4 * h, 4 * w));
        if via_cam != largest_component_bbox(&threshold_mask(&direct, 0.1), (4 * h, 4 * w)) {
            failures.push(format!("one-hot bbox, trial {trial}"));
        }
    }

    let full = BBox::full(64, 48);
    let (h, w) = (8, 6);
    let all = BinaryMask {
        bits: vec![true; h * w],
        height: h,
        width: w,
        tau: 0.1,
    };
    let none = mask(h, w, &[]);
    let flat = threshold_mask(&cam_map(h, w, vec![3.0; h * w]), 0.1);
    for (name, m) in [("full", &all), ("empty", &none), ("degenerate", &flat)] {
        let b = largest_component_bbox(m, (64, 48));
        if b != full || !b.is_valid_within(64, 48) {
            failures.push(format!("{name} mask gave {b:?}"));
        }
    }
    let tiny = largest_component_bbox(&mask(h, w, &[(7, 5)]), (64, 48));
    if tiny != (BBox { x0: 40, y0: 56, x1: 48, y1: 64 }) {
        failures.push(format!("single corner cell gave {tiny:?}"));
    }

    // a five-cell L and a separate three-cell bar
    let two = mask(5, 5, &[(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (0, 4), (1, 4), (2, 4)]);
    let got = largest_component_bbox(&two, (5, 5));
    if got != (BBox { x0: 0, y0: 0, x1: 3, y1: 3 }) {
        failures.push(format!("two-component mask gave {got:?}"));
    }

    let m = threshold_mask(&cam_map(3, 3, vec![0.0, 5.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10.0]), 0.1);
    let want = [false, true, true, false, false, false, false, false, true];
    if m.bits != want {
        failures.push("hand-normalised 3x3 threshold".into());
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "scale invariance, one-hot identity, full/empty/degenerate boxes, largest component".to_string()
        } else {
            failures.join(", ")
        },
    )
}

fn overfit() -> Verdict {
    let cfg = RunConfig::default();
    let (train, _) = generate_dataset(&cfg.synth).unwrap();
    let subset = train.take(32);
    let mut tcfg = cfg.train.clone();
    // the step budget fits inside the first learning-rate period
    tcfg.decay_every = usize::MAX;
    let model = ReapsModel::<f32>::new(&cfg.model, tcfg.seed).unwrap();
    let mut t = Trainer::new(model, tcfg).unwrap();
    let per_epoch = subset.len().div_ceil(t.config.batch_size);
    let mut steps = 0;
    let mut acc = 0.0;
    while steps + per_epoch <= OVERFIT_STEPS {
        t.train_epoch(&subset).unwrap();
        steps += per_epoch;
        acc = evaluate(&t.model, &subset, t.config.tau, 32).unwrap().final_acc;
        if acc == 1.0 {
            break;
        }
    }
    verdict(acc == 1.0, format!("train accuracy {:.1}% after {steps} steps", acc * 100.0))
}

fn hyperparameters() -> Verdict {
    let d = TrainConfig::default();
    let mut failures = Vec::new();
    for (name, got, want) in [
        ("tau", d.tau, 0.1),
        ("lambda1", d.lambda1, 1.0),
        ("lambda2", d.lambda2, 1.0),
        ("lambda3", d.lambda3, 1.0),
        ("momentum", d.momentum, 0.9),
        ("lr0", d.lr0, 0.001),
        ("decay_factor", d.decay_factor, 0.1),
    ] {
        if got != want {
            failures.push(format!("{name}={got}"));
        }
    }
    let full = TrainConfig {
        decay_every: 60,
        ..TrainConfig::default()
    };
    for k in 0..5 {
        let want = 0.001 * 0.1f64.powi(k);
        for epoch in [60 * k as usize, 60 * k as usize + 59] {
            if lr_schedule(epoch, &full) != want {
                failures.push(format!("lr({epoch})={}", lr_schedule(epoch, &full)));
            }
        }
    }
    verdict(failures.is_empty(), if failures.is_empty() { "defaults and schedule exact".into() } else { failures.join(", ") })
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.train_per_class = 4;
    cfg.synth.test_per_class = 3;
    cfg.train.epochs = 2;
    cfg
}

fn param_bits(t: &Trainer) -> Vec<u32> {
    t.model.params.iter().flat_map(|(_, _, v)| v.data().iter().map(|x| x.to_bits())).collect()
}

fn determinism() -> Verdict {
    let cfg = small_run_config();
    let (train, test) = generate_dataset(&cfg.synth).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let mut t = Trainer::new(ReapsModel::new(&cfg.model, cfg.train.seed).unwrap(), cfg.train.clone()).unwrap();
            let logs = t.fit(&train, |_, _| {}).unwrap();
            (t, logs.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n"))
        })
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    let same_run = log_a == log_b && param_bits(&a) == param_bits(&b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    checkpoint::save(&path, &cfg, &a).unwrap();
    let (cfg2, loaded) = checkpoint::load(&path).unwrap();
    let m1 = evaluate(&a.model, &test, cfg.train.tau, 16).unwrap();
    let m2 = evaluate(&loaded.model, &test, cfg2.train.tau, 16).unwrap();
    let bits = |m: &Metrics| {
        [Some(m.final_acc), Some(m.ran_acc), Some(m.psn_global_acc), m.psn_part_acc, m.mean_iou]
            .map(|v| v.map(f64::to_bits))
    };
    let same_eval = cfg2 == cfg && bits(&m1) == bits(&m2);
    verdict(
        same_run && same_eval,
        format!("identical logs and weights: {same_run}; checkpoint metrics identical: {same_eval}"),
    )
}

fn stop_gradient() -> Verdict {
    let cfg = small_run_config();
    let (train, _) = generate_dataset(&cfg.synth).unwrap();
    let batches: Vec<Vec<usize>> = (0..4).map(|i| (i * 8..i * 8 + 8).collect()).collect();
    let ran_values = |t: &Trainer| -> Vec<u32> {
        t.model
            .params
            .iter()
            .filter(|(_, n, _)| ReapsModel::<f32>::is_ran_param(n))
            .flat_map(|(_, _, p)| p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let run = |lambda1: f64| {
        let mut c = cfg.train.clone();
        c.lambda1 = lambda1;
        let mut t = Trainer::new(ReapsModel::new(&cfg.model, c.seed).unwrap(), c).unwrap();
        let start = ran_values(&t);
        let mut nonzero = 0usize;
        let mut checked = 0usize;
        for idx in &batches {
            let (x, y) = make_batch(&train, idx).unwrap();
            t.step(&x, &y).unwrap();
            for (_, name, p) in t.model.params.iter() {
                if ReapsModel::<f32>::is_ran_param(name) {
                    let g = p.grad.as_ref().map_or(&[][..], |g| g.as_slice());
                    checked += g.len();
                    nonzero += g.iter().filter(|v| **v != 0.0).count();
                }
            }
        }
        (nonzero, checked, start == ran_values(&t))
    };
    let (leak, checked, frozen) = run(0.0);
    let (control, _, _) = run(1.0);
    verdict(
        leak == 0 && frozen && control > 0,
        format!(
            "lambda1=0: {leak} nonzero of {checked} RAN gradient entries over {} steps, weights unchanged: {frozen}; lambda1=1 control: {control} nonzero",
            batches.len()
        ),
    )
}

struct BenchRun {
    metrics: Metrics,
}

fn bench_config(seed: u64, ablation: Ablation, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.ablation = ablation;
    cfg.train.seed = seed;
    cfg.train.epochs = epochs;
    cfg
}

fn bench_run(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> BenchRun {
    let model = ReapsModel::<f32>::new(&cfg.model, cfg.train.seed).unwrap();
    let mut t = Trainer::new(model, cfg.train.clone()).unwrap();
    t.fit(train, |_, _| {}).unwrap();
    BenchRun {
        metrics: evaluate(&t.model, test, cfg.train.tau, 50).unwrap(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark(epochs: usize) -> (Verdict, Verdict) {
    let t0 = Instant::now();
    let (train, test) = generate_dataset(&RunConfig::default().synth).unwrap();
    let mut full = Vec::new();
    let mut wo = Vec::new();
    for seed in BENCH_SEEDS {
        for (ablation, out) in [(Ablation::Full, &mut full), (Ablation::WoPart, &mut wo)] {
            let cfg = bench_config(seed, ablation, epochs);
            let r = bench_run(&train, &test, &cfg);
            println!(
                "  seed {seed} {:<7} final_acc={:.3} psn_global_acc={:.3} psn_part_acc={} mean_iou={:.3} ({:.0}s elapsed)",
                ablation.as_str(),
                r.metrics.final_acc,
                r.metrics.psn_global_acc,
                r.metrics.psn_part_acc.map_or("-".into(), |a| format!("{a:.3}")),
                r.metrics.mean_iou.unwrap_or(f64::NAN),
                t0.elapsed().as_secs_f64()
            );
            out.push(r);
        }
    }
    let untrained = mean(BENCH_SEEDS.iter().map(|&s| {
        let model = ReapsModel::<f32>::new(&RunConfig::default().model, s).unwrap();
        evaluate(&model, &test, 0.1, 50).unwrap().mean_iou.unwrap()
    }));
    let secs = t0.elapsed().as_secs_f64();

    let acc_full = mean(full.iter().map(|r| r.metrics.final_acc));
    let acc_wo = mean(wo.iter().map(|r| r.metrics.final_acc));
    let within = secs < 1800.0;
    let ablation = verdict(
        acc_full - acc_wo >= 0.0 && within,
        format!(
            "mean test accuracy full={acc_full:.3} wo-part={acc_wo:.3} diff={:+.3} over seeds {BENCH_SEEDS:?}, {epochs} epochs each; {secs:.0}s{}",
            acc_full - acc_wo,
            if within { "" } else { " over the 1800s budget" }
        ),
    );
    let iou = mean(full.iter().map(|r| r.metrics.mean_iou.unwrap()));
    let localization = verdict(
        iou >= 0.5 && iou >= untrained + 0.2 && within,
        format!("mean test IoU trained={iou:.3} untrained={untrained:.3} margin={:+.3}", iou - untrained),
    );
    (ablation, localization)
}

fn main() -> ExitCode {
    let epochs = std::env::var("REAPS_BENCH_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(BENCH_EPOCHS);

    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient correctness", timed(Some(120.0), gradients)),
        (2, "oracle equivalence", timed(Some(60.0), oracles)),
        (3, "attention pipeline invariants", timed(None, pipeline_invariants)),
        (4, "overfit 32 samples", timed(Some(180.0), overfit)),
    ];
    println!("criteria 5 and 6: training on the synthetic benchmark");
    let (ablation, localization) = benchmark(epochs);
    results.push((5, "part-branch ablation direction", ablation));
    results.push((6, "attention localization", localization));
    results.push((7, "hyperparameter fidelity", timed(None, hyperparameters)));
    results.push((8, "determinism and persistence", timed(None, determinism)));
    results.push((9, "stop-gradient contract", timed(None, stop_gradient)));

    results.sort_by_key(|r| r.0);
    for (n, name, v) in &results {
        println!("{} {n} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
