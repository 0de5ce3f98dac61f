//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 3 7`.

#[path = "../../core/tests/common/fixtures.rs"]
mod fixtures;
#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use uatriage::deep_taylor;
use uatriage::mc::{self, PredictiveSummary};
use uatriage::network::{self, build_reference_model, ForwardMode};
use uatriage::synthgen::{self, SynthSpec};
use uatriage::trainer::{self, TrainConfig};
use uatriage::triage::{self, Grouping};
use uatriage::{rng, Execution, WeightSet};

use fixtures::{names, probe_network, random_image};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

const CRITERIA: [(u32, &str, u64, Check); 8] = [
    (1, "gradient integrity", 30, gradient_integrity),
    (2, "dropout-off equivalence", 10, dropout_off_equivalence),
    (3, "MC convergence", 120, mc_convergence),
    (4, "Deep Taylor conservation", 60, deep_taylor_conservation),
    (5, "calibration semantics", 5, calibration_semantics),
    (6, "directional triage experiment", 600, triage_experiment),
    (7, "removal-curve oracle", 5, removal_curve_oracle),
    (8, "round-trip and determinism", 120, round_trip_and_determinism),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(budget);
        let pass = result.pass && in_budget;
        failed += usize::from(!pass);
        println!(
            "{} criterion {id}: {name}: {}; {:.1}s of {budget}s budget{}",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            if in_budget { "" } else { " (over budget)" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}

fn gradient_integrity() -> Outcome {
    let (h, rel, abs) = (1e-3, 1e-3, 1e-6);
    let (seed, cfg, w, img, label) = oracle::smooth_toy_case(0, h);
    let (_, _, grads) = network::loss_and_gradients(&cfg, &w, &img, label, ForwardMode::Deterministic).unwrap();
    let check = oracle::check_gradients(&oracle::OracleNet::new(&cfg, &w), &img, label, &grads, h, rel, abs);
    let smooth_ok = check.failures.is_empty() && check.checked == w.param_count();

    // Other random points: mismatches may only occur where ±h crosses a kink.
    let mut kinks = 0;
    let mut smooth_failures = 0;
    for s in 0..10 {
        let (cfg, w, img, label) = oracle::toy_case(s);
        let (_, _, g) = network::loss_and_gradients(&cfg, &w, &img, label, ForwardMode::Deterministic).unwrap();
        let c = oracle::check_gradients(&oracle::OracleNet::new(&cfg, &w), &img, label, &g, h, rel, abs);
        kinks += c.kinks.len();
        smooth_failures += c.smooth_failures().len();
    }
    outcome(
        smooth_ok && smooth_failures == 0,
        format!(
            "{} params at kink-free seed {seed}, {} failures, worst rel {:.2e}; 10 other seeds: {smooth_failures} smooth failures ({kinks} kink-crossing params excluded)",
            check.checked,
            check.failures.len(),
            check.worst_relative
        ),
    )
}

fn dropout_off_equivalence() -> Outcome {
    let cfg = build_reference_model([1, 32, 32], names(5)).unwrap().with_dropout_rate(0.0).unwrap();
    let w = WeightSet::init(&cfg, 1);
    let mut mismatched = 0;
    for i in 0..100 {
        let img = random_image(1000 + i, &[1, 32, 32]);
        let det = network::predict(&cfg, &w, &img, ForwardMode::Deterministic).unwrap();
        let sample = mc::mc_predict(&cfg, &w, &img, 10, i).unwrap();
        let same = sample
            .rows()
            .all(|row| row.iter().zip(det.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        mismatched += usize::from(!same);
    }
    outcome(mismatched == 0, format!("{mismatched}/100 images differ (T = 10)"))
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// For each seed: 20 independent replicates of the per-class MC mean at
/// T = 100 and T = 400; ratio of their standard deviations, averaged over
/// classes, then over seeds.
fn mc_convergence() -> Outcome {
    const REPLICATES: usize = 20;
    let cfg = build_reference_model([1, 8, 8], names(5)).unwrap();
    let mut ratios = Vec::new();
    let mut degenerate = 0;
    for seed in 0..20u64 {
        let w = WeightSet::init(&cfg, seed);
        let img = random_image(seed, &[1, 8, 8]);
        let stds = |passes: usize| -> Vec<f64> {
            let means: Vec<Vec<f64>> = (0..REPLICATES)
                .map(|r| {
                    let base = rng::derive_seed(seed, &[passes as u64, r as u64]);
                    mc::mc_predict(&cfg, &w, &img, passes, base).unwrap().mean()
                })
                .collect();
            (0..5)
                .map(|c| std_dev(&means.iter().map(|m| m[c]).collect::<Vec<_>>()))
                .collect()
        };
        let (s100, s400) = (stds(100), stds(400));
        let per_class: Vec<f64> = s100
            .iter()
            .zip(&s400)
            .filter(|(_, &b)| b > 0.0)
            .map(|(a, b)| a / b)
            .collect();
        degenerate += 5 - per_class.len();
        ratios.push(per_class.iter().sum::<f64>() / per_class.len() as f64);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    outcome(
        (1.6..=2.4).contains(&mean) && degenerate == 0,
        format!("std(T=100)/std(T=400) = {mean:.3} over 20 seeds (expected 2.0), {degenerate} zero-variance classes"),
    )
}

fn deep_taylor_conservation() -> Outcome {
    let cfg = build_reference_model([1, 16, 16], names(5)).unwrap();
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    for seed in 0..50 {
        // Glorot init leaves every bias at zero.
        let w = WeightSet::init(&cfg, seed);
        assert!(w.bundles.iter().all(|b| b.bias.data().iter().all(|&v| v == 0.0)));
        let img = random_image(seed, &[1, 16, 16]);
        let map = deep_taylor::relevance(&cfg, &w, &img, None).unwrap();
        worst = worst.max((map.total() - map.output_relevance).abs() / map.output_relevance.max(1e-6));
        negative += map.relevance.data().iter().filter(|&&v| v < 0.0).count();
    }
    let mut leaked = 0;
    let mut probes = 0;
    for py in 0..9 {
        for px in 0..9 {
            let (pcfg, pw) = probe_network(py as u64 * 9 + px as u64, py, px);
            let img = random_image(py as u64 * 9 + px as u64, &[1, 9, 9]);
            let map = deep_taylor::relevance(&pcfg, &pw, &img, Some(0)).unwrap();
            probes += 1;
            for y in 0..9usize {
                for x in 0..9usize {
                    if (y.abs_diff(py) > 2 || x.abs_diff(px) > 2) && map.relevance.data()[y * 9 + x] != 0.0 {
                        leaked += 1;
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-4 && negative == 0 && leaked == 0,
        format!(
            "worst conservation error {worst:.2e} over 50 networks, {negative} negative values, {leaked} nonzero pixels outside the receptive field in {probes} probes"
        ),
    )
}

fn summary(classes: usize, predicted: usize, confidence: f64) -> PredictiveSummary {
    let mut median = vec![(1.0 - confidence) / classes as f64; classes];
    median[predicted] = confidence;
    PredictiveSummary {
        p10: median.clone(),
        p90: median.clone(),
        median,
        predicted_class: predicted,
        confidence,
    }
}

fn calibration_semantics() -> Outcome {
    let mut r = rng::stream(55, 0);
    let mut violations = 0;
    let mut mismatches = 0;
    let sets = 300;
    for set in 0..sets {
        let n = 7 + (rng::unit_f64(&mut r) * 494.0) as usize;
        // Every other set draws from a coarse grid to force ties.
        let conf: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng::unit_f64(&mut r);
                if set % 2 == 0 {
                    (u * 20.0).floor() / 20.0
                } else {
                    u
                }
            })
            .collect();
        let sums: Vec<_> = conf.iter().map(|&c| summary(1, 0, c)).collect();
        let table = triage::calibrate_thresholds(&sums, &vec![0; n], &names(1), 10.0, Grouping::Predicted).unwrap();
        let threshold = table.threshold(0);

        let mut sorted = conf.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = (n as f64 / 10.0).ceil() as usize;
        if sorted[rank - 1] != threshold {
            mismatches += 1;
        }
        if conf.iter().filter(|&&c| c < threshold).count() >= rank {
            violations += 1;
        }
    }
    outcome(
        violations == 0 && mismatches == 0,
        format!("{sets} sets of size 7-500: {violations} coverage violations, {mismatches} thresholds differ from the sort oracle"),
    )
}

fn triage_experiment() -> Outcome {
    let spec = SynthSpec {
        image_size: 32,
        class_counts: [20, 25, 40, 50, 90],
        noise_sigma: 0.05,
        ambiguous_fraction: 0.2,
        seed: 0,
    };
    let data = synthgen::generate_dataset(&spec).unwrap();
    let cfg = build_reference_model([1, 32, 32], SynthSpec::class_names()).unwrap();
    let tc = TrainConfig {
        seed: 0,
        ..TrainConfig::default()
    };
    let (w, _) = trainer::train(&cfg, &data.train, &tc).unwrap();
    let exec = Execution::default();
    let train_s = mc::summarize_dataset(&cfg, &w, &data.train.images, 1000, 0, exec).unwrap();
    let test_s = mc::summarize_dataset(&cfg, &w, &data.test.images, 1000, 1, exec).unwrap();
    let table =
        triage::calibrate_thresholds(&train_s, &data.train.labels, cfg.class_names(), 10.0, Grouping::Predicted)
            .unwrap();
    let report = triage::evaluate_with_referral(&test_s, &data.test.labels, &table).unwrap();
    let curve = triage::removal_curve(&test_s, &data.test.labels, 5).unwrap();

    let n = test_s.len();
    let errors: Vec<usize> = (0..n).filter(|&i| test_s[i].predicted_class != data.test.labels[i]).collect();
    let quartile = n / 4;
    let in_quartile = curve.order[..quartile].iter().filter(|i| errors.contains(i)).count();
    let half = n / 2;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (first, last) = (mean(&curve.raw[..half]), mean(&curve.raw[n - half..]));
    let referral = report.referral_fraction();

    let a = report.accuracy >= report.full_accuracy;
    let b = (0.05..=0.40).contains(&referral);
    let c = 2 * in_quartile >= errors.len();
    let d = last >= first;
    let ambiguous_errors = errors.iter().filter(|&&i| data.test_ambiguous[i]).count();
    outcome(
        a && b && c && d,
        format!(
            "(a) retained acc {:.4} vs full {:.4} [{}]; (b) referred {}/{n} = {:.1}% [{}]; (c) {in_quartile}/{} errors in lowest {quartile} [{}]; (d) curve halves {first:.4} -> {last:.4} [{}]; {ambiguous_errors} errors on ambiguous images",
            report.accuracy,
            report.full_accuracy,
            ok(a),
            report.referred(),
            100.0 * referral,
            ok(b),
            errors.len(),
            ok(c),
            ok(d)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

fn removal_curve_oracle() -> Outcome {
    let mut r = rng::stream(77, 0);
    let mut raw_mismatch = 0;
    let mut smooth_mismatch = 0;
    let fixtures = 100;
    for _ in 0..fixtures {
        let mut conf = Vec::new();
        let mut sums = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..20 {
            let c = 0.2 + (rng::unit_f64(&mut r) * 16.0).floor() / 20.0;
            let predicted = (rng::unit_f64(&mut r) * 3.0) as usize;
            let label = if rng::unit_f64(&mut r) < 0.7 { predicted } else { (predicted + 1) % 3 };
            conf.push(c);
            sums.push(summary(3, predicted, c));
            labels.push(label);
        }
        let curve = triage::removal_curve(&sums, &labels, 5).unwrap();

        let mut order: Vec<usize> = (0..20).collect();
        // Stable bubble sort on confidence.
        for i in 0..20 {
            for j in 0..19 - i {
                if conf[order[j]] > conf[order[j + 1]] {
                    order.swap(j, j + 1);
                }
            }
        }
        let raw: Vec<f64> = (0..20)
            .map(|k| {
                let kept = &order[k..];
                let correct = kept.iter().filter(|&&i| sums[i].predicted_class == labels[i]).count();
                correct as f64 / kept.len() as f64
            })
            .collect();
        if raw != curve.raw {
            raw_mismatch += 1;
        }
        let smoothed: Vec<f64> = (0..16)
            .map(|k| {
                let mut s = 0.0;
                for v in &raw[k..k + 5] {
                    s += v;
                }
                s / 5.0
            })
            .collect();
        if smoothed != curve.smoothed {
            smooth_mismatch += 1;
        }
    }
    outcome(
        raw_mismatch == 0 && smooth_mismatch == 0,
        format!("{fixtures} fixtures of 20 samples: {raw_mismatch} raw and {smooth_mismatch} smoothed curves differ"),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_uatriage"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out.stdout)
}

fn pipeline(dir: &Path, extra: &[&str]) -> Result<Vec<Vec<u8>>, String> {
    let steps: [&[&str]; 8] = [
        &["synth", "--out", "ds", "--counts", "6,6,7,8,9", "--size", "16", "--ambiguous", "0.3", "--seed", "4"],
        &["train", "--data", "ds/train", "--out", "model.uawt", "--epochs", "3", "--seed", "2"],
        &["predict", "--model", "model.uawt", "--image", "ds/test/dr/00000.pgm"],
        &[
            "mc-predict", "--model", "model.uawt", "--image", "ds/test/dr/00000.pgm", "--passes", "64", "--seed", "3",
            "--out", "sample.csv", "--hist", "hist.csv", "--bins", "10",
        ],
        &["explain", "--model", "model.uawt", "--image", "ds/test/mh/00000.pgm", "--out", "heat.pgm", "--raw", "heat.csv"],
        &["calibrate", "--model", "model.uawt", "--data", "ds/train", "--passes", "32", "--grouping", "true", "--out",
            "thresholds.tsv",
        ],
        &[
            "triage", "--model", "model.uawt", "--data", "ds/test", "--thresholds", "thresholds.tsv", "--passes", "32",
            "--out", "report",
        ],
        &["curve", "--model", "model.uawt", "--data", "ds/test", "--passes", "32", "--window", "3", "--out", "curve.csv"],
    ];
    steps
        .iter()
        .map(|s| {
            let mut args: Vec<&str> = extra.to_vec();
            args.extend_from_slice(s);
            cli(dir, &args)
        })
        .collect()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn first_difference(a: &Path, b: &Path) -> Option<String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Some(format!("file lists differ ({} vs {})", fa.len(), fb.len()));
    }
    fa.iter()
        .find(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .map(|f| format!("{} differs", f.display()))
}

fn round_trip_and_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();

    // Weight file round trip.
    let cfg = build_reference_model([1, 32, 32], names(5)).unwrap();
    let w = WeightSet::init(&cfg, 8);
    let path = tmp.path().join("w.uawt");
    network::save_weights(&cfg, &w, &path).unwrap();
    let (cfg2, w2) = network::load_weights(&path).unwrap();
    let resaved = network::write_weights(&cfg2, &w2).unwrap();
    let weights_ok = cfg2 == cfg && w2.bit_eq(&w) && resaved == fs::read(&path).unwrap();

    // Two independent CLI runs, the second on one thread, then a rerun of
    // every manifest from the first.
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let runs = pipeline(&a, &[]).and_then(|sa| pipeline(&b, &["--sequential"]).map(|sb| (sa, sb)));
    let (stdout_a, stdout_b) = match runs {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let mut problems = Vec::new();
    if stdout_a != stdout_b {
        problems.push("standard output differs".to_string());
    }
    if let Some(d) = first_difference(&a, &b) {
        problems.push(format!("parallel vs sequential: {d}"));
    }
    let manifests: Vec<PathBuf> = files_under(&a)
        .into_iter()
        .filter(|f| f.to_string_lossy().ends_with("manifest.json"))
        .collect();
    for m in &manifests {
        if let Err(e) = cli(&a, &["rerun", m.to_str().unwrap()]) {
            problems.push(e);
        }
    }
    if let Some(d) = first_difference(&a, &b) {
        problems.push(format!("after rerun: {d}"));
    }
    let files = files_under(&a).len();
    outcome(
        weights_ok && problems.is_empty(),
        format!(
            "weights bit-exact: {weights_ok}; {files} output files identical across runs and {} manifest reruns{}",
            manifests.len(),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {}", problems.join("; "))
            }
        ),
    )
}

