//! Acceptance suite: one `PASS`/`FAIL` line per criterion.
//!
//! Runs without the libtest harness so every criterion is reported even if
//! an earlier one fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rac_core::checkpoint::{model_from_tensors, model_tensors, read_tensors, write_tensors};
use rac_core::config::{CorrelationMode, ModelConfig, TrainConfig};
use rac_core::data::{generate_suite, CycleSpan, SuiteSpec, SynthVideo, VideoRecord};
use rac_core::encoder::{read_racf, write_racf, FrameFeatures};
use rac_core::eval::{evaluate, mae, obo, EvalResult};
use rac_core::model::{Model, ModelParams, PreparedVideo};
use rac_core::predictor::count_from_density;
use rac_core::sampling::{build_clipset, map_cycles_to_samples, ClipPos};
use rac_core::training::{
    gaussian_bin_mass, grad_check, make_density_target, train, TargetVariant, TrainOutcome, TrainSample,
};

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const COUNT_IDENTITY_TOL: f64 = 1e-6;
const COUNT_IDENTITY_SETS: usize = 200;
const BIN_MASS_TOL: f64 = 1e-6;
const FULL_LINE_TOL: f64 = 1e-12;
const ATTENTION_ROW_TOL: f64 = 1e-6;
const OVERFIT_STEPS: usize = 1500;
const OVERFIT_MAE: f64 = 0.15;
const OVERFIT_OBO: f64 = 0.9;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_STEPS: usize = 400;
const ABLATION_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Pass,
    Fail,
    /// Soft gate missed: reported, not counted as a failure.
    Warn,
}

struct Line {
    id: usize,
    name: &'static str,
    outcome: Outcome,
    detail: String,
}

fn judge(hard: bool, ok: bool) -> Outcome {
    match (ok, hard) {
        (true, _) => Outcome::Pass,
        (false, true) => Outcome::Fail,
        (false, false) => Outcome::Warn,
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn overfit_suite(num_videos: usize, prefix: &str) -> SuiteSpec {
    let mut s = SuiteSpec::desk(num_videos, 256, (5, 12), (12, 40));
    s.jitter = 0.3;
    s.noise_sigma = 0.1;
    s.interruptions = (1, 2);
    s.interruption_length = (8, 16);
    s.id_prefix = prefix.into();
    s
}

fn samples_for(videos: &[SynthVideo], cfg: &TrainConfig) -> Vec<TrainSample> {
    let mc = cfg.model_config();
    videos
        .iter()
        .map(|v| {
            TrainSample::from_record(&v.record, &FrameFeatures::new(v.features.clone()), &mc, cfg.variant, cfg.sigma_floor)
                .expect("sample")
        })
        .collect()
}

fn eval_on(model: &Model, videos: &[SynthVideo]) -> EvalResult {
    let records: Vec<VideoRecord> = videos.iter().map(|v| v.record.clone()).collect();
    let features = |r: &VideoRecord| {
        let v = videos.iter().find(|v| v.record.video_id == r.video_id).expect("known id");
        Ok(FrameFeatures::new(v.features.clone()))
    };
    evaluate(model, &records, &features, false).expect("evaluate")
}

/// MAE of always predicting the mean training count.
fn mean_count_baseline(train: &[SynthVideo], test: &[SynthVideo]) -> f64 {
    let mean = train.iter().map(|v| v.record.count() as f64).sum::<f64>() / train.len() as f64;
    let gts: Vec<f64> = test.iter().map(|v| v.record.count() as f64).collect();
    mae(&vec![mean; gts.len()], &gts).expect("baseline")
}

// ---------------------------------------------------------------------------
// Independent normal-CDF oracle: Maclaurin series of erf, summed until the
// terms vanish. Converges for every argument used here (|x| < 3).

fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn phi_oracle(z: f64) -> f64 {
    0.5 * (1.0 + erf_series(z / std::f64::consts::SQRT_2))
}

fn bin_mass_oracle(mu: f64, sigma: f64, k: f64) -> f64 {
    phi_oracle((k + 0.5 - mu) / sigma) - phi_oracle((k - 0.5 - mu) / sigma)
}

// ---------------------------------------------------------------------------
// Criteria

fn c1_gradient_integrity() -> (bool, String) {
    let cfg = TrainConfig::gradcheck();
    let start = Instant::now();
    let report = grad_check(&cfg, 0, GRAD_EPS).expect("grad check");
    let elapsed = start.elapsed();
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    let ok = report.global_max <= GRAD_TOL && !report.tensors.is_empty() && elapsed <= GRAD_BUDGET;
    (
        ok,
        format!(
            "N={} d_e={} d_p={} scales={} tensors={} max rel err {:.3e} ({worst}) <= {GRAD_TOL:e}, {:.1}s <= {}s",
            cfg.num_frames,
            cfg.model.embed_dim,
            cfg.model.predictor_dim,
            cfg.scales.len(),
            report.tensors.len(),
            report.global_max,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn c2_target_count_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let variants = [TargetVariant::Begin, TargetVariant::Mid, TargetVariant::End, TargetVariant::Merge];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..COUNT_IDENTITY_SETS {
        let frame_count = rng.random_range(16..2000usize);
        let n = [8usize, 16, 64][rng.random_range(0..3usize)];
        let spans: Vec<CycleSpan> = (0..rng.random_range(1..=20usize))
            .map(|_| {
                let s = rng.random_range(0..frame_count);
                let e = rng.random_range(s..frame_count.min(s + 200));
                CycleSpan::new(s, e)
            })
            .collect();
        let sampled = map_cycles_to_samples(&spans, frame_count, n);
        for v in variants {
            let d = make_density_target(&sampled, n, v, 0.1).expect("target");
            worst = worst.max((count_from_density(&d) - sampled.len() as f64).abs());
            checked += 1;
        }
    }
    (worst <= COUNT_IDENTITY_TOL, format!("{checked} maps, max |count - spans| {worst:.2e} <= {COUNT_IDENTITY_TOL:e}"))
}

fn c3_gaussian_mass_oracle() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, expected) in [(13.0, 0.382925), (12.0, 0.241730)] {
        let got = gaussian_bin_mass(13.0, 1.0, k).expect("mass");
        let oracle = bin_mass_oracle(13.0, 1.0, k);
        // The six-digit reference value must agree with the oracle too.
        ok &= (got - oracle).abs() <= BIN_MASS_TOL && (expected - oracle).abs() <= 5e-7;
        parts.push(format!("m(13,1,{k})={got:.6} oracle {oracle:.6}"));
    }
    let mut worst = 0.0f64;
    for &(mu, sigma) in &[(13.0f64, 1.0f64), (0.3, 0.1), (31.7, 2.5), (5.25, 0.7), (40.0, 6.0)] {
        let lo = (mu - 10.0 * sigma).floor() as i64;
        let hi = (mu + 10.0 * sigma).ceil() as i64;
        let total: f64 = (lo..=hi).map(|k| gaussian_bin_mass(mu, sigma, k as f64).expect("mass")).sum();
        worst = worst.max((total - 1.0).abs());
    }
    ok &= worst <= FULL_LINE_TOL;
    parts.push(format!("full-line |sum - 1| {worst:.1e} <= {FULL_LINE_TOL:e}"));
    (ok, parts.join(", "))
}

fn c4_shape_contract() -> (bool, String) {
    let video = generate_suite(&SuiteSpec::desk(1, 64, (4, 6), (6, 10)), 4).expect("suite").remove(0);
    let features = FrameFeatures::new(video.features.clone());
    let mut ok = true;
    let mut parts = Vec::new();
    for (mode, expected) in [(CorrelationMode::Attention, (64, 64, 12)), (CorrelationMode::Tsm, (64, 64, 3))] {
        let config = ModelConfig { correlation_mode: mode, ..ModelConfig::desk() };
        let model = Model::new(config.clone(), 0).expect("model");
        let prepared = PreparedVideo::new("v", video.record.frame_count, &features, &config).expect("prepare");
        let c = model.correlation(&prepared).expect("correlation");
        let shape = c.shape();
        ok &= shape == expected;
        let mut worst = 0.0f64;
        for ch in 0..shape.2 {
            for i in 0..shape.0 {
                let row: f64 = (0..shape.1).map(|j| c.values[[i, j, ch]]).sum();
                worst = worst.max((row - 1.0).abs());
            }
        }
        ok &= worst <= ATTENTION_ROW_TOL;
        parts.push(format!("{mode:?} {shape:?} rows |sum-1| {worst:.1e}"));
    }
    (ok, parts.join(", "))
}

/// Brute force: raw windows start at every multiple of the stride below
/// `n`; the clip list repeats each raw window `stride` times and keeps the
/// first `n`. Positions past the sequence end are padding.
fn enumerate_windows(n: usize, window: usize, stride: usize) -> Vec<Vec<ClipPos>> {
    let mut raw = Vec::new();
    let mut s = 0;
    while raw.len() * stride < n {
        let w: Vec<ClipPos> = (s..s + window).map(|p| if p >= n { ClipPos::Pad } else { ClipPos::Frame(p) }).collect();
        raw.push(w);
        s += stride;
    }
    raw.iter().flat_map(|w| std::iter::repeat_n(w.clone(), stride)).take(n).collect()
}

fn c5_window_enumeration() -> (bool, String) {
    let mut ok = true;
    let mut compared = 0;
    for n in [8usize, 16, 64] {
        for (window, stride) in [(1usize, 1usize), (4, 2), (8, 4)] {
            let cs = build_clipset(n, window).expect("clipset");
            ok &= cs.stride() == stride && cs.clips == enumerate_windows(n, window, stride);
            // Padding resolves to the last sampled frame.
            for t in 0..n {
                let resolved: Vec<usize> = cs.resolved(t).collect();
                let expect: Vec<usize> = (0..window).map(|o| ((t / stride) * stride + o).min(n - 1)).collect();
                ok &= resolved == expect;
            }
            compared += 1;
        }
    }
    (ok, format!("{compared} (N, scale) pairs match the brute-force enumerator"))
}

fn c6_metric_oracle() -> (bool, String) {
    let gts = [10.0, 4.0];
    let o = obo(&[11.0, 8.0], &gts).expect("obo");
    let m = mae(&[11.0, 8.0], &gts).expect("mae");
    let mut ok = o == 0.5 && m == (0.1 + 1.0) / 2.0;
    // More hand-computed fixtures: (preds, gts, obo, mae).
    let fixtures: [(&[f64], &[f64], f64, f64); 3] = [
        (&[3.0, 3.0], &[3.0, 3.0], 1.0, 0.0),
        (&[2.0, 6.0, 9.5], &[2.0, 4.0, 10.0], 2.0 / 3.0, (0.0 + 0.5 + 0.05) / 3.0),
        (&[0.0, 5.0], &[0.0, 4.0], 1.0, 0.25),
    ];
    for (p, g, eo, em) in fixtures {
        ok &= obo(p, g).expect("obo") == eo && (mae(p, g).expect("mae") - em).abs() <= 1e-15;
    }
    let config = ModelConfig::desk();
    let zero = Model { params: ModelParams::zeros(&config), config };
    let videos = generate_suite(&SuiteSpec::desk(6, 64, (2, 6), (6, 10)), 6).expect("suite");
    let r = eval_on(&zero, &videos);
    ok &= r.mae == 1.0 && r.obo == 0.0 && r.failures.is_empty();
    (ok, format!("obo {o} / mae {m} on [11, 8] vs [10, 4]; zero model mae {} obo {}", r.mae, r.obo))
}

struct Overfit {
    outcome: TrainOutcome,
    train: Vec<SynthVideo>,
    elapsed: Duration,
}

fn run_overfit() -> Overfit {
    let train_videos = generate_suite(&overfit_suite(32, "train"), 0).expect("suite");
    let cfg = TrainConfig { steps: OVERFIT_STEPS, ..TrainConfig::desk() };
    let samples = samples_for(&train_videos, &cfg);
    let start = Instant::now();
    let outcome = train(&samples, &cfg).expect("train");
    Overfit { outcome, train: train_videos, elapsed: start.elapsed() }
}

fn c7_overfit(run: &Overfit) -> (bool, String) {
    let r = eval_on(&run.outcome.model, &run.train);
    let ok = r.mae <= OVERFIT_MAE && r.obo >= OVERFIT_OBO && run.elapsed <= OVERFIT_BUDGET;
    (
        ok,
        format!(
            "32 videos, {OVERFIT_STEPS} Adam steps: train MAE {:.4} <= {OVERFIT_MAE}, OBO {:.3} >= {OVERFIT_OBO}, {:.0}s <= {}s",
            r.mae,
            r.obo,
            run.elapsed.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    )
}

fn c8_generalization(run: &Overfit) -> (bool, String) {
    let test = generate_suite(&overfit_suite(16, "test"), 1).expect("suite");
    let r = eval_on(&run.outcome.model, &test);
    let baseline = mean_count_baseline(&run.train, &test);
    (r.mae < baseline, format!("16 held-out videos: MAE {:.4} < mean-count baseline {baseline:.4}", r.mae))
}

fn mixed_suite(num_videos: usize, seed: u64, prefix: &str) -> Vec<SynthVideo> {
    let mut fast = SuiteSpec::desk(num_videos / 2, 64, (5, 15), (3, 3));
    fast.noise_sigma = 0.1;
    fast.id_prefix = format!("{prefix}_fast");
    let mut slow = SuiteSpec::desk(num_videos - num_videos / 2, 64, (1, 2), (24, 24));
    slow.noise_sigma = 0.1;
    slow.id_prefix = format!("{prefix}_slow");
    let mut v = generate_suite(&fast, seed).expect("suite");
    v.extend(generate_suite(&slow, seed.wrapping_add(1000)).expect("suite"));
    v
}

fn c9_ablation() -> (bool, String) {
    let train_videos = mixed_suite(32, 0, "train");
    let test_videos = mixed_suite(16, 1, "test");
    let mut results = Vec::new();
    for scales in [vec![1usize, 4, 8], vec![1], vec![4], vec![8]] {
        let cfg = TrainConfig {
            steps: ABLATION_STEPS,
            scales: scales.iter().map(|&w| rac_core::sampling::Scale::from_window(w).expect("scale")).collect(),
            ..TrainConfig::desk()
        };
        let model = train(&samples_for(&train_videos, &cfg), &cfg).expect("train").model;
        results.push((scales, eval_on(&model, &test_videos).mae));
    }
    let multi = results[0].1;
    let best_single = results[1..].iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let detail = results.iter().map(|(s, m)| format!("{s:?} {m:.4}")).collect::<Vec<_>>().join(", ");
    (
        multi <= best_single + ABLATION_MARGIN,
        format!("held-out MAE {detail}; multi {multi:.4} <= best single {best_single:.4} + {ABLATION_MARGIN}"),
    )
}

fn c10_statistics() -> (bool, String) {
    let csv = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/count_extremes.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_rac")).args(["stats", csv]).output().expect("run rac stats");
    let text = String::from_utf8_lossy(&out.stdout);
    let line = |key: &str| text.lines().find(|l| l.starts_with(key)).unwrap_or("").to_string();
    let counts = line("Count Min./Max");
    let durations = line("Duration Min./Max");
    let ok = out.status.success() && counts.trim_end().ends_with(" 1/141") && durations.trim_end().ends_with(" 4.0/88.0");
    (ok, format!("`{}` | `{}`", counts.split_whitespace().last().unwrap_or("?"), durations.split_whitespace().last().unwrap_or("?")))
}

fn c11_determinism() -> (bool, String) {
    let videos = generate_suite(&overfit_suite(8, "det"), 11).expect("suite");
    let cfg = TrainConfig { steps: 25, batch_size: 4, ..TrainConfig::desk() };
    let samples = samples_for(&videos, &cfg);
    let a = train(&samples, &cfg).expect("train");
    let b = train(&samples, &cfg).expect("train");
    let same_history = a.history.len() == cfg.steps
        && a.history.iter().map(|x| x.to_bits()).eq(b.history.iter().map(|x| x.to_bits()));

    let mut racf = Vec::new();
    write_racf(&mut racf, &videos[0].features).expect("write racf");
    let mut racf2 = Vec::new();
    write_racf(&mut racf2, &read_racf(&mut racf.as_slice()).expect("read racf")).expect("write racf");

    let mut ok_racw = true;
    for mode in [CorrelationMode::Attention, CorrelationMode::Tsm] {
        let model = Model::new(ModelConfig { correlation_mode: mode, ..ModelConfig::desk() }, 5).expect("model");
        let mut w1 = Vec::new();
        write_tensors(&mut w1, &model_tensors(&model)).expect("write racw");
        let back = model_from_tensors(&read_tensors(&mut w1.as_slice()).expect("read racw")).expect("model");
        let mut w2 = Vec::new();
        write_tensors(&mut w2, &model_tensors(&back)).expect("write racw");
        ok_racw &= w1 == w2;
    }
    let mut w1 = Vec::new();
    write_tensors(&mut w1, &model_tensors(&a.model)).expect("write racw");
    let mut w2 = Vec::new();
    write_tensors(&mut w2, &model_tensors(&b.model)).expect("write racw");
    let same_model = w1 == w2;
    let ok = same_history && racf == racf2 && ok_racw && same_model;
    (
        ok,
        format!(
            "loss histories bit-identical: {same_history}, checkpoints identical: {same_model}, RACF round-trip: {}, RACW round-trip: {ok_racw}",
            racf == racf2
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |id: usize| wanted.is_empty() || wanted.contains(&id);
    let mut lines: Vec<Line> = Vec::new();
    let mut record = |id, name, hard, (ok, detail): (bool, String)| {
        let line = Line { id, name, outcome: judge(hard, ok), detail };
        let tag = match line.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Warn => "WARN",
        };
        println!("criterion {:>2} {tag} {}: {}", line.id, line.name, line.detail);
        lines.push(line);
    };

    if run(1) {
        record(1, "gradient integrity", true, c1_gradient_integrity());
    }
    if run(2) {
        record(2, "target-count identity", true, c2_target_count_identity());
    }
    if run(3) {
        record(3, "gaussian mass oracle", true, c3_gaussian_mass_oracle());
    }
    if run(4) {
        record(4, "shape contract", true, c4_shape_contract());
    }
    if run(5) {
        record(5, "window enumeration", true, c5_window_enumeration());
    }
    if run(6) {
        record(6, "metric oracle", true, c6_metric_oracle());
    }
    if run(7) || run(8) {
        let overfit = run_overfit();
        if run(7) {
            record(7, "overfit experiment", true, c7_overfit(&overfit));
        }
        if run(8) {
            record(8, "generalization direction", true, c8_generalization(&overfit));
        }
    }
    if run(9) {
        // Soft gate: a miss is reported but does not fail the suite.
        record(9, "multi-scale ablation (soft)", false, c9_ablation());
    }
    if run(10) {
        record(10, "statistics reproduction", true, c10_statistics());
    }
    if run(11) {
        record(11, "determinism", true, c11_determinism());
    }

    let failed = lines.iter().filter(|l| l.outcome == Outcome::Fail).count();
    let warned = lines.iter().filter(|l| l.outcome == Outcome::Warn).count();
    println!("acceptance: {} run, {failed} failed, {warned} soft warnings", lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
