//! Acceptance criteria. Each test prints exactly one `PASS`, `FAIL` or `SKIP`
//! line for its criterion, then asserts on the outcome.
//!
//! Criteria 4 and 5 need the DRIVE dataset; point `VESSELSEG_DRIVE_ROOT` at
//! its root directory to run them. The full-schedule DRIVE run is ignored by
//! default: `cargo test --test acceptance -- --ignored`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vesselseg::autograd::Graph;
use vesselseg::config::{Config, LossMode};
use vesselseg::datasets::{self, synthetic, DatasetId, FundusSample, LabelMask};
use vesselseg::evaluation::{self, Scored};
use vesselseg::lerf::{self, LayerGeom};
use vesselseg::network::{IlcMode, Mode, Model, NetworkSpec};
use vesselseg::tensor::Tensor;
use vesselseg::training;
use vesselseg::uncertainty;
use vesselseg::weightmap;

const DRIVE_ENV: &str = "VESSELSEG_DRIVE_ROOT";

type Check = Result<String, String>;

/// Writes straight to the process stdout so the line shows even when the
/// harness captures test output.
fn report(n: u32, name: &str, outcome: Option<&Check>) {
    let line = match outcome {
        Some(Ok(detail)) => format!("criterion {n} ({name}): PASS [{detail}]"),
        Some(Err(detail)) => format!("criterion {n} ({name}): FAIL [{detail}]"),
        None => format!("criterion {n} ({name}): SKIP [set {DRIVE_ENV} to the DRIVE root]"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn finish(n: u32, name: &str, outcome: Check) {
    report(n, name, Some(&outcome));
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

/// Runs named sub-checks and folds them into one outcome.
fn all(checks: Vec<(&str, Check)>) -> Check {
    let mut failed = Vec::new();
    let mut passed = Vec::new();
    for (name, c) in checks {
        match c {
            Ok(d) => passed.push(format!("{name}: {d}")),
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    if failed.is_empty() {
        Ok(passed.join("; "))
    } else {
        Err(failed.join("; "))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |_| rng.gen_bool(density))
}

// ---------------------------------------------------------------- criterion 1

fn weight_map_examples() -> Check {
    let w0 = weightmap::weight_from_distance(0.0, 5.0, 2.0) as f64;
    let w2 = weightmap::weight_from_distance(2.0, 5.0, 2.0) as f64;
    ensure((w0 - 5.0).abs() < 1e-6, || format!("w(0) = {w0}"))?;
    let expect = 5.0 * (-1.0f64).exp();
    ensure((w2 - expect).abs() < 1e-6, || format!("w(2) = {w2}, expected {expect}"))?;
    // the same values through a label map: a vertical line at x = 5
    let mut m = Array2::<bool>::from_elem((12, 12), false);
    m.column_mut(5).fill(true);
    let map = weightmap::compute_weight_map(&LabelMask::from_bools(&m), 5.0, 2.0).map_err(|e| e.to_string())?;
    ensure((map.w[[3, 5]] as f64 - 5.0).abs() < 1e-6, || format!("map on vessel {}", map.w[[3, 5]]))?;
    ensure((map.w[[3, 7]] as f64 - expect).abs() < 1e-6, || format!("map at d=2 {}", map.w[[3, 7]]))?;
    Ok(format!("w(0)={w0:.6}, w(2)={w2:.6}"))
}

fn edt_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut masks = 0;
    for density in [0.005, 0.02, 0.1, 0.4, 0.9] {
        for _ in 0..8 {
            let mut m = random_mask(&mut rng, 32, 32, density);
            if !m.iter().any(|&v| v) {
                m[[rng.gen_range(0..32), rng.gen_range(0..32)]] = true;
            }
            let seeds: Vec<(i64, i64)> = m
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|((y, x), _)| (y as i64, x as i64))
                .collect();
            let (sq, _) = weightmap::squared_edt(m.view());
            let d = weightmap::distance_transform(&LabelMask::from_bools(&m)).map_err(|e| e.to_string())?;
            for ((y, x), &got) in sq.indexed_iter() {
                let brute = seeds
                    .iter()
                    .map(|&(sy, sx)| (sy - y as i64).pow(2) + (sx - x as i64).pow(2))
                    .min()
                    .unwrap();
                ensure(got == brute as f64, || format!("({y},{x}) {got} vs {brute}"))?;
                ensure(d.d[[y, x]] == (brute as f64).sqrt(), || format!("distance at ({y},{x})"))?;
            }
            masks += 1;
        }
    }
    Ok(format!("{masks} masks exact"))
}

fn wce_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (8, 8);
    let logits = Array3::from_shape_fn((2, h, w), |_| rng.gen_range(-3.0..3.0));
    let mask = LabelMask::from_bools(&random_mask(&mut rng, h, w, 0.3));
    let map = weightmap::compute_weight_map(&mask, 5.0, 2.0).map_err(|e| e.to_string())?;
    let cw = [0.6, 2.4];
    let analytic = weightmap::weighted_cross_entropy_grad(logits.view(), &mask, Some(&map), &cw).map_err(|e| e.to_string())?;
    let scale = analytic.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for idx in ndarray::indices_of(&logits) {
        let mut plus = logits.clone();
        plus[idx] += eps;
        let mut minus = logits.clone();
        minus[idx] -= eps;
        let lp = weightmap::weighted_cross_entropy(plus.view(), &mask, Some(&map), &cw).unwrap();
        let lm = weightmap::weighted_cross_entropy(minus.view(), &mask, Some(&map), &cw).unwrap();
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3 * scale);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-4, || format!("relative error {worst:.2e}"))?;

    // the training graph's loss gradient agrees with the reference one
    let mut g = Graph::new();
    let flat: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
    let z = g.param(Tensor::from_vec(&[1, 2, h, w], flat).unwrap());
    let targets: Vec<u8> = mask.mask().iter().copied().collect();
    let weights: Vec<f32> = mask
        .mask()
        .iter()
        .zip(map.w.iter())
        .map(|(&t, &m)| cw[t as usize] as f32 * m)
        .collect();
    let loss = g.weighted_cross_entropy(z, &targets, &weights).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let gz = grads.get(z).unwrap();
    let mut graph_worst = 0.0f64;
    for (a, &b) in analytic.iter().zip(gz.data()) {
        graph_worst = graph_worst.max((a - b as f64).abs() / a.abs().max(1e-3 * scale));
    }
    ensure(graph_worst <= 1e-4, || format!("graph gradient relative error {graph_worst:.2e}"))?;
    Ok(format!("max rel err {worst:.1e} (graph {graph_worst:.1e})"))
}

fn softmax_argmax_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n = rng.gen_range(2..6);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let best = argmax(&z);
        for sigma in [0.1, 1.0, 10.0] {
            let p = uncertainty::scaled_softmax(&z, sigma).map_err(|e| e.to_string())?;
            ensure(argmax(&p) == best, || format!("sigma {sigma} moved the argmax of {z:?}"))?;
        }
    }
    Ok("500 vectors".into())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Golden-section search for the minimum of a unimodal `f` on `[a, b]`.
fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    while (b - a).abs() > 1e-12 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    (a + b) / 2.0
}

fn stationary_point() -> Check {
    let mut detail = Vec::new();
    for l in [0.1, 1.0, 10.0] {
        // minimise over sigma^2 directly: L / sigma^2 + log(sigma^2) / 2
        let var = golden_min(|v: f64| l / v + 0.5 * v.ln(), 1e-6, 100.0);
        let rel = (var - 2.0 * l).abs() / (2.0 * l);
        ensure(rel <= 1e-6, || format!("L={l}: sigma^2={var}, rel {rel:.2e}"))?;
        let s = uncertainty::stationary_log_variance(l);
        ensure(((s.exp() - var) / var).abs() <= 1e-6, || format!("L={l}: library s*={s}"))?;
        ensure(uncertainty::single_objective_grad(l, s).abs() < 1e-12, || format!("L={l}: gradient at s*"))?;
        detail.push(format!("{:.2e}", rel));
    }
    Ok(format!("rel err {}", detail.join("/")))
}

/// Footprint of output pixel (0, 0) on the input, from the gradient of a
/// valid-padding chain with positive weights. Pooling layers are modelled by
/// their averaging counterpart, which has the same geometric footprint.
fn gradient_footprint(layers: &[LayerGeom]) -> usize {
    let rfs = lerf::receptive_fields(layers).unwrap();
    let last = rfs.last().unwrap();
    let n = last.rf + 2 * last.jump;
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, n, n], 1.0));
    let mut h = x;
    for l in layers {
        let w = g.constant(Tensor::full(&[1, 1, l.kernel, l.kernel], 0.5));
        h = g.conv2d(h, w, None, l.stride, 0).unwrap();
    }
    let mut seed = Tensor::zeros(g.value(h).shape());
    seed.data_mut()[0] = 1.0;
    let grads = g.backward_with_seed(h, seed).unwrap();
    let gx = grads.get(x).unwrap().data();
    // extent, not count: strides wider than kernels leave gaps inside the field
    let rows = (0..n).filter(|y| (0..n).any(|x| gx[y * n + x] != 0.0)).max().map_or(0, |y| y + 1);
    let cols = (0..n).filter(|x| (0..n).any(|y| gx[y * n + x] != 0.0)).max().map_or(0, |x| x + 1);
    assert_eq!(rows, cols);
    rows
}

fn rf_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut specs = 0;
    for _ in 0..150 {
        let depth = rng.gen_range(1..=6);
        let mut stage = 1;
        let layers: Vec<LayerGeom> = (0..depth)
            .map(|_| {
                if rng.gen_bool(0.25) {
                    stage += 1;
                    LayerGeom::pool(2, stage)
                } else {
                    LayerGeom::conv(rng.gen_range(1..=5), rng.gen_range(1..=2), stage)
                }
            })
            .collect();
        let rfs = lerf::receptive_fields(&layers).map_err(|e| e.to_string())?;
        for d in 1..=depth {
            let oracle = gradient_footprint(&layers[..d]);
            ensure(rfs[d - 1].rf == oracle, || {
                format!("{:?}: recursion {} vs oracle {oracle}", &layers[..d], rfs[d - 1].rf)
            })?;
        }
        specs += 1;
    }
    Ok(format!("{specs} specs exact"))
}

fn metric_tally() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let probs = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0f32..1.0));
        let label = random_mask(&mut rng, 16, 16, 0.3);
        label_guard(&label)?;
        let fov = (case % 2 == 0).then(|| random_mask(&mut rng, 16, 16, 0.8));
        let lm = LabelMask::from_bools(&label);
        let threshold = [0.5, 0.3, 0.7][case % 3];
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for ((y, x), &p) in probs.indexed_iter() {
            if fov.as_ref().is_some_and(|f| !f[[y, x]]) {
                continue;
            }
            match (p as f64 >= threshold, label[[y, x]]) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        let item = Scored { probs: probs.view(), label: &lm, fov: fov.as_ref() };
        let r = match evaluation::pooled_metrics(&[item], threshold, fov.is_some()) {
            Ok(r) => r,
            // a random field-of-view may hide every vessel; then there is no AUC
            Err(_) if tp + fn_ == 0 || tn + fp == 0 => continue,
            Err(e) => return Err(e.to_string()),
        };
        let c = r.confusion;
        ensure((c.tp, c.tn, c.fp, c.fn_) == (tp, tn, fp, fn_), || format!("case {case}: tally"))?;
        let total = (tp + tn + fp + fn_) as f64;
        ensure(r.acc == (tp + tn) as f64 / total, || format!("case {case}: accuracy"))?;
        ensure(r.sen == tp as f64 / (tp + fn_) as f64, || format!("case {case}: sensitivity"))?;
        ensure(r.spe == tn as f64 / (tn + fp) as f64, || format!("case {case}: specificity"))?;
    }
    Ok("100 instances exact".into())
}

fn label_guard(label: &Array2<bool>) -> Result<(), String> {
    ensure(label.iter().any(|&v| v) && label.iter().any(|&v| !v), || "degenerate label".into())
}

fn auc_mann_whitney() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst = 0.0f64;
    for case in 0..50 {
        // coarse quantisation in half the cases to force ties
        let levels = if case % 2 == 0 { 12.0 } else { 1e6 };
        let positive: Vec<bool> = (0..200).map(|i| i % 7 == 0 || rng.gen_bool(0.2)).collect();
        let scores: Vec<f32> = positive
            .iter()
            .map(|&p| {
                let v: f64 = rng.gen_range(0.0..1.0) + if p { 0.3 } else { 0.0 };
                ((v * levels).round() / levels) as f32
            })
            .collect();
        let auc = evaluation::roc_auc(&scores, &positive).map_err(|e| e.to_string())?;
        let (mut u, mut np, mut nn) = (0.0f64, 0u64, 0u64);
        for (i, &pi) in positive.iter().enumerate() {
            if !pi {
                nn += 1;
                continue;
            }
            np += 1;
            for (j, &pj) in positive.iter().enumerate() {
                if !pj {
                    u += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        let oracle = u / (np * nn) as f64;
        worst = worst.max((auc - oracle).abs());
    }
    ensure(worst <= 1e-10, || format!("abs err {worst:.2e}"))?;
    Ok(format!("max abs err {worst:.1e}"))
}

#[test]
fn criterion_1_property_suite() {
    let outcome = all(vec![
        ("weight map", weight_map_examples()),
        ("edt", edt_brute_force()),
        ("wce gradient", wce_gradient()),
        ("softmax argmax", softmax_argmax_invariance()),
        ("stationary point", stationary_point()),
        ("rf oracle", rf_oracle()),
        ("metrics", metric_tally()),
        ("auc", auc_mann_whitney()),
    ]);
    finish(1, "property suite", outcome);
}

// ---------------------------------------------------------------- criterion 2

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dual_outputs() -> Check {
    let spec = NetworkSpec::default();
    ensure((spec.num_stages, spec.target_stage) == (4, 1), || "default is not M=4, t=1".into())?;
    let model = Model::build(spec, 0).map_err(|e| e.to_string())?;
    let out = model.predict(&random_tensor(&[1, 3, 128, 128], 1)).map_err(|e| e.to_string())?;
    for (name, t) in [("main", &out.y_main), ("aux", &out.y_aux)] {
        ensure(t.shape() == [1, 2, 128, 128], || format!("{name} shape {:?}", t.shape()))?;
        ensure(t.is_finite(), || format!("{name} not finite"))?;
    }
    Ok("2x128x128 main and aux".into())
}

fn small(mode: IlcMode) -> NetworkSpec {
    NetworkSpec { channels: vec![4, 6, 8, 10], ilc_mode: mode, ..NetworkSpec::default() }
}

fn ilc_stand_alone() -> Check {
    let model = Model::build(small(IlcMode::Target), 5).map_err(|e| e.to_string())?;
    let input = random_tensor(&[1, 3, 32, 32], 9);
    let run = |m: &Model| {
        let mut g = Graph::new();
        let mut b = m.bind(&mut g, Mode::Eval);
        let x = g.constant(input.clone());
        let f = m.forward(&mut g, &mut b, x).unwrap();
        let ilc: Vec<Tensor> = (2..=4).map(|i| g.value(f.ilc[&(i, 1)]).clone()).collect();
        (ilc, g.value(f.y_main).clone())
    };
    let (base_ilc, base_y) = run(&model);
    for source in 2..=4 {
        let mut p = model.clone();
        let names: Vec<String> = p.params.names().into_iter().filter(|n| n.starts_with(&format!("ilc{source}."))).collect();
        ensure(!names.is_empty(), || format!("no parameters for ilc{source}"))?;
        for n in &names {
            p.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let (ilc, y) = run(&p);
        for other in 2..=4 {
            let same = ilc[other - 2] == base_ilc[other - 2];
            ensure(same == (other != source), || format!("perturbing ilc{source} affected ilc{other}: {}", !same))?;
        }
        ensure(y != base_y, || format!("ilc{source} does not reach the output"))?;
    }
    Ok("3 paths independent".into())
}

fn subset_property() -> Check {
    let plain = Model::build(small(IlcMode::None), 11).map_err(|e| e.to_string())?;
    let ilc = Model::build(small(IlcMode::Target), 11).map_err(|e| e.to_string())?;
    for (name, t) in plain.params.params() {
        ensure(ilc.params.get(name) == Some(t), || format!("{name} differs"))?;
    }
    let extra = ilc.params.names().len() - plain.params.names().len();
    ensure(extra > 0, || "no extra parameters".into())?;
    Ok(format!("{} shared tensors, {extra} extra", plain.params.names().len()))
}

fn all_parameters_receive_gradient() -> Check {
    let mut checked = 0;
    for mode in [IlcMode::None, IlcMode::Target, IlcMode::AllShared] {
        let model = Model::build(small(mode), 3).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let mut b = model.bind(&mut g, Mode::Train);
        let x = g.constant(random_tensor(&[2, 3, 32, 32], 4));
        let f = model.forward(&mut g, &mut b, x).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.gen_range(0..2)).collect();
        let weights: Vec<f32> = (0..2 * 32 * 32).map(|_| rng.gen_range(0.5..3.0)).collect();
        let lm = g.weighted_cross_entropy(f.y_main, &targets, &weights).unwrap();
        let la = g.weighted_cross_entropy(f.y_aux, &targets, &weights).unwrap();
        let total = g.add(lm, la).unwrap();
        let grads = g.backward(total).map_err(|e| e.to_string())?;
        for (name, &v) in b.vars() {
            let gr = grads.get(v).ok_or_else(|| format!("{mode}: no gradient for {name}"))?;
            ensure(gr.is_finite() && gr.data().iter().any(|&d| d != 0.0), || format!("{mode}: zero gradient for {name}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} tensors over 3 modes"))
}

#[test]
fn criterion_2_architecture_contract() {
    let start = Instant::now();
    let mut outcome = all(vec![
        ("dual outputs", dual_outputs()),
        ("ilc stand-alone", ilc_stand_alone()),
        ("subset", subset_property()),
        ("gradients", all_parameters_receive_gradient()),
    ]);
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        outcome = Err(format!("took {:.1}s", elapsed.as_secs_f64()));
    }
    let outcome = outcome.map(|d| format!("{d}; {:.1}s", elapsed.as_secs_f64()));
    finish(2, "architecture contract", outcome);
}

// ---------------------------------------------------------------- criterion 3

const SMOKE_STEPS: u64 = 300;
const SMOKE_SEEDS: [u64; 3] = [0, 1, 2];

/// Desk-scale configuration shared by both arms of the comparison.
fn smoke_config(seed: u64, loss_mode: LossMode) -> Config {
    let mut c = Config::default();
    c.data.dataset = DatasetId::Synthetic;
    c.data.patch_size = 64;
    c.network.channels = vec![8, 16, 32, 64];
    c.network.ilc_mode = IlcMode::Target;
    c.train.loss_mode = loss_mode;
    c.train.use_weight_map = true;
    c.train.lr = 2e-3;
    c.train.total_epochs = SMOKE_STEPS;
    c.train.lr_halving_period = SMOKE_STEPS;
    c.train.eval_interval = 0;
    c.train.checkpoint_interval = SMOKE_STEPS;
    c.train.seed = seed;
    c
}

struct SmokeRun {
    auc: f64,
    thin_sen: f64,
}

fn smoke_run(train: &[FundusSample], test: &[synthetic::SyntheticSample], config: &Config) -> Result<SmokeRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let test_samples: Vec<FundusSample> = test.iter().map(|s| s.sample.clone()).collect();
    let run = training::fit(train, &[], config, dir.path(), false).map_err(|e| e.to_string())?;
    let ev = evaluation::evaluate(&run.model, &test_samples, config).map_err(|e| e.to_string())?;
    let thin: Vec<Array2<bool>> = test.iter().map(|s| s.widths.mapv(|w| w > 0 && w <= 3)).collect();
    let items: Vec<_> = ev.probs.iter().zip(&thin).map(|((_, p), t)| (p.view(), t)).collect();
    let thin_sen = evaluation::subset_sensitivity(&items, config.eval.threshold).map_err(|e| e.to_string())?;
    Ok(SmokeRun { auc: ev.pooled.auc, thin_sen })
}

#[test]
fn criterion_3_synthetic_smoke() {
    let start = Instant::now();
    let cfg = synthetic::SyntheticConfig::default();
    let train: Vec<FundusSample> = synthetic::generate_set("syn_train_", 16, &cfg, 100)
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let test = synthetic::generate_set("syn_test_", 6, &cfg, 200);
    let outcome = (|| -> Check {
        let mut wins = 0;
        let mut low_auc = Vec::new();
        let mut detail = Vec::new();
        for seed in SMOKE_SEEDS {
            let ours = smoke_run(&train, &test, &smoke_config(seed, LossMode::Uncertainty))?;
            let base = smoke_run(&train, &test, &smoke_config(seed, LossMode::MainOnly))?;
            if ours.thin_sen > base.thin_sen {
                wins += 1;
            }
            if ours.auc < 0.95 {
                low_auc.push(seed);
            }
            detail.push(format!(
                "seed {seed}: auc {:.4}, thin sen {:.4} vs {:.4}",
                ours.auc, ours.thin_sen, base.thin_sen
            ));
        }
        let elapsed = start.elapsed();
        detail.push(format!("{wins}/3 wins, {:.0}s", elapsed.as_secs_f64()));
        let detail = detail.join("; ");
        ensure(low_auc.is_empty(), || format!("AUC below 0.95 for seeds {low_auc:?}; {detail}"))?;
        ensure(wins >= 2, || format!("thin-vessel sensitivity win in {wins}/3 seeds; {detail}"))?;
        ensure(elapsed <= Duration::from_secs(15 * 60), || format!("over 15 minutes; {detail}"))?;
        Ok(detail)
    })();
    finish(3, "synthetic end-to-end smoke", outcome);
}

// ---------------------------------------------------------- criteria 4 and 5

fn drive_root() -> Option<PathBuf> {
    std::env::var_os(DRIVE_ENV).map(PathBuf::from).filter(|p| !p.as_os_str().is_empty())
}

fn drive_split(root: &Path) -> Result<(Vec<FundusSample>, Vec<FundusSample>), String> {
    let samples = datasets::load_dataset(DatasetId::Drive, root).map_err(|e| e.to_string())?;
    let split = datasets::make_splits(DatasetId::Drive, &samples, 0).map_err(|e| e.to_string())?;
    let pick = |ids: &[String]| samples.iter().filter(|s| ids.contains(&s.id)).cloned().collect::<Vec<_>>();
    Ok((pick(&split[0].train_ids), pick(&split[0].test_ids)))
}

fn drive_auc(train: &[FundusSample], test: &[FundusSample], config: &Config) -> Result<evaluation::MetricsReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = training::fit(train, &[], config, dir.path(), false).map_err(|e| e.to_string())?;
    Ok(evaluation::evaluate(&run.model, test, config).map_err(|e| e.to_string())?.pooled)
}

#[test]
fn criterion_4_drive_reduced_schedule_ordering() {
    let name = "DRIVE reduced-schedule ordering";
    let Some(root) = drive_root() else {
        report(4, name, None);
        return;
    };
    let outcome = (|| -> Check {
        let (train, test) = drive_split(&root)?;
        let mut base = Config::default();
        base.train = base.train.reduced();
        base.train.eval_interval = 0;
        let settings = evaluation::ablation_settings();
        let ours = settings.iter().find(|s| s.name == "uncert_wtmap_ilc").unwrap().apply(&base);
        let plain = settings.iter().find(|s| s.name == "lambda1").unwrap().apply(&base);
        let a = drive_auc(&train, &test, &ours)?;
        let b = drive_auc(&train, &test, &plain)?;
        let detail = format!("AUC {:.4} vs {:.4}", a.auc, b.auc);
        ensure(a.auc >= b.auc, || detail.clone())?;
        Ok(detail)
    })();
    finish(4, name, outcome);
}

#[test]
#[ignore = "full training schedule on DRIVE; hours of compute"]
fn criterion_4_drive_full_schedule() {
    let name = "DRIVE full-schedule reproduction";
    let Some(root) = drive_root() else {
        report(4, name, None);
        return;
    };
    let outcome = (|| -> Check {
        let (train, test) = drive_split(&root)?;
        let mut c = Config::default();
        c.train.eval_interval = 0;
        let m = drive_auc(&train, &test, &c)?;
        let detail = format!(
            "AUC {:.2}, Acc {:.2}, Spe {:.2}, Sen {:.2}",
            100.0 * m.auc,
            100.0 * m.acc,
            100.0 * m.spe,
            100.0 * m.sen
        );
        ensure((100.0 * m.auc - 98.33).abs() <= 1.0, || format!("AUC outside band; {detail}"))?;
        ensure((100.0 * m.sen - 90.14).abs() <= 2.0, || format!("Sen outside band; {detail}"))?;
        Ok(detail)
    })();
    finish(4, name, outcome);
}

#[test]
fn criterion_5_drive_label_statistics() {
    let name = "DRIVE vessel statistics";
    let Some(root) = drive_root() else {
        report(5, name, None);
        return;
    };
    let outcome = (|| -> Check {
        let (train, _) = drive_split(&root)?;
        let labels: Vec<&LabelMask> = train.iter().map(|s| &s.label).collect();
        let stats = lerf::vessel_width_stats(&labels).map_err(|e| e.to_string())?;
        let detail = format!(
            "vessel fraction {:.2}%, width <= 3 share {:.2}%",
            100.0 * stats.vessel_fraction,
            100.0 * stats.thin_fraction
        );
        ensure(stats.vessel_fraction < 0.10 + 0.02, || detail.clone())?;
        ensure(stats.thin_fraction < 0.50 + 0.02, || detail.clone())?;
        Ok(detail)
    })();
    finish(5, name, outcome);
}
