//! End-to-end acceptance checks. Each test prints one `[PASS]` or `[FAIL]`
//! line straight to stderr (bypassing output capture) and then asserts.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use msnet::arch::{build, init_params, zero_skip_transforms, ArchConfig, SkipInit, Variant};
use msnet::data::{gen_context_shapes, save_dataset};
use msnet::graph::{backward, forward, grad_check, topo_schedule, validate_acyclic, Feed, GradCheckConfig, Role};
use msnet::metrics::Confusion;
use msnet::tensor::{LabelMap, Mode, Tensor4};
use msnet::train::{evaluate, train, TrainConfig};
use msnet::{Error, RngStream};

/// Criteria share one core; running them one at a time keeps the timing
/// criterion honest.
static SERIAL: Mutex<()> = Mutex::new(());

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_MIN_COORDS: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const EQUATION_TOLERANCE: f64 = 1e-12;
const METRIC_TOLERANCE: f64 = 1e-12;
const OVERFIT_PA: f64 = 0.99;
const OVERFIT_EPOCHS: usize = 500;
const OVERFIT_LR: f64 = 1e-3;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const TREND_MARGIN_IU: f64 = 0.02;
const TREND_LR: f64 = 1e-3;
const TREND_EPOCHS: usize = 60;
const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const RATIO_RANGE: (f64, f64) = (1.5, 3.0);
const RATIO_TRIALS: usize = 20;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] {id:>2} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut min_checked = usize::MAX;
    let mut all_passed = true;
    for v in Variant::ALL {
        let arch = ArchConfig::new(v);
        let graph = build(&arch).unwrap();
        let params = init_params(&graph, 0, SkipInit::He);
        let s = common::sample(0);
        let feed = Feed {
            image: &s.image,
            labels: Some(&s.labels),
        };
        let cfg = GradCheckConfig {
            eps: GRAD_EPS,
            tolerance: GRAD_TOLERANCE,
            min_coords: GRAD_MIN_COORDS,
            ..Default::default()
        };
        let r = grad_check(&graph, &params, &feed, &cfg).unwrap();
        all_passed &= r.passed();
        min_checked = min_checked.min(r.checked);
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, format!("{v}/{}", r.worst_slot));
        }
    }
    let elapsed = start.elapsed();
    let pass = all_passed && min_checked >= GRAD_MIN_COORDS && elapsed < GRAD_BUDGET;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "max rel error {:.2e} at {} (< {GRAD_TOLERANCE:e}), min coords {min_checked}, {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c02_schedule() {
    let _g = serial();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut problems = Vec::new();
    for v in Variant::ALL.iter().filter(|v| v.is_msnet()) {
        let out = Command::new(env!("CARGO_BIN_EXE_msnet"))
            .args(["inspect-schedule", "--variant", v.name(), "--blocks"])
            .output()
            .unwrap();
        let text = String::from_utf8(out.stdout).unwrap();
        let want = fs::read_to_string(golden.join(format!("{v}.blocks.txt"))).unwrap();
        if text != want {
            problems.push(format!("{v} differs from golden"));
        }
        let seq: Vec<&str> = text.lines().collect();
        let reach = v.skips().1;
        for l in 1..=7usize {
            let m = seq.iter().position(|&b| b == format!("M{l}")).unwrap();
            for src in l..=(l + reach - 1).min(7) {
                let s = seq.iter().position(|&b| b == format!("S{src}")).unwrap();
                if s > m {
                    problems.push(format!("{v}: S{src} after M{l}"));
                }
            }
        }
    }
    let b1 = fs::read_to_string(golden.join("MSNetB1.blocks.txt")).unwrap();
    let b1_ok = b1.lines().collect::<Vec<_>>().join(",") == "S1,M1,S2,M2,S3,M3,S4,M4,S5,M5,S6,M6,S7,M7";
    if !b1_ok {
        problems.push("MSNetB1 golden is not strictly alternating".into());
    }
    let pass = problems.is_empty();
    let detail = if pass {
        "MSNetB1 alternates; B2/FB2 Master L follows Slave L..min(L+2,7)".to_string()
    } else {
        problems.join("; ")
    };
    report(2, "schedule", pass, &detail);
}

#[test]
fn c03_cycle_rejection() {
    let _g = serial();
    let mut g = build(&ArchConfig::new(Variant::FCN8s)).unwrap();
    let y3 = g.block_output(Role::Master, 3).unwrap();
    let conv = g.find("M.b1.conv1").unwrap();
    g.rewire_input(conv, 0, y3).unwrap();
    let result = validate_acyclic(&g);
    let pass = matches!(&result, Err(Error::CyclicGraph(c)) if !c.is_empty());
    report(3, "cycle rejection", pass, &format!("{:?}", result.err().map(|e| e.to_string())));
}

#[test]
fn c04_equation_conformance() {
    let _g = serial();
    let cases = common::equation_cases();
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = cases
        .iter()
        .map(|(n, d)| format!("{n} {d:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(4, "equation conformance", worst < EQUATION_TOLERANCE && cases.len() >= 4, &detail);
}

#[test]
fn c05_zero_skip_equivalence() {
    let _g = serial();
    let s = common::sample(21);
    let feed = Feed {
        image: &s.image,
        labels: None,
    };
    let scores = |g: &msnet::Graph, p: &msnet::ParamStore| {
        let plan = topo_schedule(g).unwrap();
        let tape = forward(g, &plan, &feed, p, Mode::Eval, &mut RngStream::new(0, "eval")).unwrap();
        tape.master_score(g).clone()
    };
    let base = build(&ArchConfig::new(Variant::FCN8s)).unwrap();
    let base_params = init_params(&base, 8, SkipInit::He);
    let want = scores(&base, &base_params);
    let mut failed = Vec::new();
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::FCN8s) {
        let g = build(&ArchConfig::new(v)).unwrap();
        let mut p = init_params(&g, 99, SkipInit::He);
        zero_skip_transforms(&g, &mut p);
        p.copy_matching_from(&base_params);
        let got = scores(&g, &p);
        let bitwise = got
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !bitwise {
            failed.push(v.name());
        }
    }
    let detail = if failed.is_empty() {
        "6 variants bitwise equal to FCN8s".to_string()
    } else {
        format!("differs: {failed:?}")
    };
    report(5, "zero-skip equivalence", failed.is_empty(), &detail);
}

#[test]
fn c06_metric_oracle() {
    let _g = serial();
    let mut rng = RngStream::new(6, "acceptance/metrics");
    let mut worst = 0.0f64;
    let mut exact = true;
    for i in 0..100 {
        let k = 2 + i % 5;
        let pred: Vec<u8> = (0..64).map(|_| rng.below(k) as u8).collect();
        let gt: Vec<u8> = (0..64)
            .map(|_| if rng.below(10) == 0 { 255 } else { rng.below(k) as u8 })
            .collect();
        let pairs: Vec<(u8, u8)> = pred.iter().copied().zip(gt.iter().copied()).collect();
        let mut c = Confusion::new(k);
        c.accumulate(&LabelMap::new(1, 8, 8, pred).unwrap(), &LabelMap::new(1, 8, 8, gt).unwrap())
            .unwrap();
        let got = c.finalize().unwrap();
        let want = common::brute_metrics(k, &pairs).unwrap();
        exact &= got.confusion == want.confusion;
        for (a, b) in [(got.pa, want.pa), (got.ca, want.ca), (got.iu, want.iu)] {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        6,
        "metric oracle",
        exact && worst < METRIC_TOLERANCE,
        &format!("100 pairs, confusion exact: {exact}, max metric diff {worst:.1e}"),
    );
}

#[test]
fn c07_overfit() {
    let _g = serial();
    let start = Instant::now();
    let arch = ArchConfig::new(Variant::MSNetFB1);
    let ds = gen_context_shapes(64, 4, 11).unwrap();
    let tc = TrainConfig {
        base_lr: OVERFIT_LR,
        decay_rate: 0.0,
        epochs: OVERFIT_EPOCHS,
        batch_size: 1,
        seed: 1,
        ..Default::default()
    };
    let out = train(&arch, &tc, &ds).unwrap();
    let pa = out.history.metrics.as_ref().unwrap().pa;
    let elapsed = start.elapsed();
    report(
        7,
        "overfit",
        pa >= OVERFIT_PA && elapsed < OVERFIT_BUDGET,
        &format!("MSNetFB1 PA {pa:.4} after {OVERFIT_EPOCHS} epochs, {:.0}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c08_directional_trend() {
    let _g = serial();
    let mut ius = [Vec::new(), Vec::new()];
    for seed in TREND_SEEDS {
        let train_set = gen_context_shapes(64, 64, 100 + seed).unwrap();
        let test_set = gen_context_shapes(64, 32, 200 + seed).unwrap();
        for (i, v) in [Variant::FCN8s, Variant::MSNetB1].into_iter().enumerate() {
            let arch = ArchConfig::new(v);
            let tc = TrainConfig {
                base_lr: TREND_LR,
                decay_rate: 0.0,
                epochs: TREND_EPOCHS,
                batch_size: 4,
                seed,
                ..Default::default()
            };
            let out = train(&arch, &tc, &train_set).unwrap();
            ius[i].push(evaluate(&out.graph, &out.params, &test_set).unwrap().iu);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (fcn, ms) = (mean(&ius[0]), mean(&ius[1]));
    report(
        8,
        "directional trend",
        ms - fcn >= TREND_MARGIN_IU,
        &format!(
            "mean IU MSNetB1 {:.2} vs FCN8s {:.2} ({:+.2} points; per seed {:?} vs {:?})",
            100.0 * ms,
            100.0 * fcn,
            100.0 * (ms - fcn),
            ius[1].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            ius[0].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

fn median_step_time(v: Variant, image: &Tensor4, labels: &LabelMap) -> f64 {
    let arch = ArchConfig::new(v);
    let g = build(&arch).unwrap();
    let params = init_params(&g, 0, SkipInit::Zero);
    let plan = topo_schedule(&g).unwrap();
    let feed = Feed {
        image,
        labels: Some(labels),
    };
    let mut rng = RngStream::new(0, "timing");
    let mut step = || {
        let t = Instant::now();
        let tape = forward(&g, &plan, &feed, &params, Mode::Train, &mut rng).unwrap();
        let grads = backward(&g, &plan, &tape, &params, arch.loss_weights).unwrap();
        std::hint::black_box(grads);
        t.elapsed().as_secs_f64()
    };
    step();
    let mut times: Vec<f64> = (0..RATIO_TRIALS).map(|_| step()).collect();
    times.sort_by(f64::total_cmp);
    (times[RATIO_TRIALS / 2 - 1] + times[RATIO_TRIALS / 2]) / 2.0
}

#[test]
fn c09_runtime_ratio() {
    let _g = serial();
    let ds = gen_context_shapes(64, 4, 9).unwrap();
    let (image, labels) = ds.batch(&[0, 1, 2, 3]).unwrap();
    let fcn = median_step_time(Variant::FCN8s, &image, &labels);
    let ms = median_step_time(Variant::MSNetB1, &image, &labels);
    let ratio = ms / fcn;
    report(
        9,
        "runtime ratio",
        (RATIO_RANGE.0..=RATIO_RANGE.1).contains(&ratio),
        &format!(
            "MSNetB1 {:.1} ms / FCN8s {:.1} ms = {ratio:.2} (median of {RATIO_TRIALS})",
            1e3 * ms,
            1e3 * fcn
        ),
    );
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.msds");
    save_dataset(&gen_context_shapes(64, 4, 3).unwrap(), &data).unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let cfg = dir.path().join(format!("{name}.json"));
        let text = format!(
            r#"{{"arch":{{"variant":"MSNetFB1","dropout_rate":0.2}},"train":{{"epochs":3,"base_lr":0.001,"batch_size":2,"seed":5}},"train_data":"{}","out_dir":"{}"}}"#,
            data.display(),
            out_dir.display()
        );
        fs::write(&cfg, text).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_msnet"))
            .args(["train", "--config"])
            .arg(&cfg)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        (
            fs::read(out_dir.join("history.csv")).unwrap(),
            fs::read(out_dir.join("weights.mswt")).unwrap(),
        )
    };
    let (h1, w1) = run("a");
    let (h2, w2) = run("b");
    let pass = h1 == h2 && w1 == w2;
    report(
        10,
        "determinism",
        pass,
        &format!("history {} bytes, weights {} bytes, identical: {pass}", h1.len(), w1.len()),
    );
}
