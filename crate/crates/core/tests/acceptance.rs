//! Acceptance gate: one line per criterion, each at its stated tolerance and
//! time budget. Run with `cargo test --test acceptance -- --nocapture` to
//! see the report.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tema::diversity::{expected_diversity, expected_diversity_exact, sample_multiset_diversity, DiversityQuery};
use tema::engine::{Engine, EngineConfig, Mode, MomentumSetting};
use tema::harness::{
    compare_modes, component_rng, make_scenario, replicate_seed, run_stream, streams, RunOptions, Sampler,
    ScenarioSpec, World, WorldSpec,
};
use tema::momentum::{effective_batch_count, select_momentum, MomentumConfig};
use tema::rectifier::{divergence_to_alpha, gaussian_sym_kl, DivergenceVector, RectifierState};
use tema::stats::{ema_weights, mix_statistics, ChannelStats, TemaState};

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn check(id: u32, name: &'static str, budget: Duration, body: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let (ok, detail) = result.unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    Outcome {
        id,
        name,
        passed: ok && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn seeds(base: u64) -> Vec<u64> {
    (0..3).map(|i| replicate_seed(base, i)).collect()
}

fn diversity_exactness() -> (bool, String) {
    let cases = [(128u64, 1280i64, 137i64, 9.34), (200, 2000, 209, 9.57), (2, 20, 11, 1.82)];
    let mut ok = true;
    let mut shown = Vec::new();
    for (n, num, den, published) in cases {
        let q = DiversityQuery::new(10, n).unwrap();
        let exact = expected_diversity_exact(q) == BigRational::new(BigInt::from(num), BigInt::from(den));
        let value = expected_diversity(q);
        let display: f64 = format!("{value:.4}").parse().unwrap();
        ok &= exact && (display - published).abs() <= 0.005;
        shown.push(format!("N={n}: {value:.4} (exact {num}/{den}: {exact})"));
    }
    (ok, shown.join(", "))
}

fn closed_form_identity() -> (bool, String) {
    let mut mismatches = 0;
    for k in 1..=50u64 {
        for n in 1..=500u64 {
            let expected = BigRational::new(BigInt::from(k * n), BigInt::from(n + k - 1));
            if expected_diversity_exact(DiversityQuery::new(k, n).unwrap()) != expected {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("{mismatches} mismatches over 25000 (K,N) pairs"))
}

fn monte_carlo_concordance() -> (bool, String) {
    let pairs = [
        (2, 1),
        (2, 5),
        (3, 3),
        (5, 2),
        (5, 10),
        (7, 4),
        (10, 1),
        (10, 2),
        (10, 4),
        (10, 16),
        (10, 64),
        (10, 128),
        (10, 200),
        (20, 5),
        (20, 50),
        (50, 10),
        (50, 100),
        (100, 7),
        (100, 300),
        (1000, 64),
    ];
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (i, &(k, n)) in pairs.iter().enumerate() {
        let q = DiversityQuery::new(k, n).unwrap();
        let mc = sample_multiset_diversity(q, 100_000, 1000 + i as u64).unwrap();
        let gap = (mc.mean - expected_diversity(q)).abs();
        let z = if mc.std_error > 0.0 { gap / mc.std_error } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
        ok &= z <= 3.0;
    }
    (ok, format!("max |z| = {worst:.2} over {} pairs", pairs.len()))
}

/// Largest lag whose weight `(1-m)^lag` stays at or above `eps`, counted by
/// repeated multiplication; the current batch always counts.
fn lag_oracle(m: f64, eps: f64) -> u64 {
    let mut weight = 1.0;
    let mut lags = 0;
    loop {
        weight *= 1.0 - m;
        if weight < eps {
            break;
        }
        lags += 1;
    }
    lags.max(1)
}

fn effective_pools() -> (bool, String) {
    let expected = [(1.0, 1), (0.1, 21), (0.01, 229)];
    let mut ok = true;
    let mut shown = Vec::new();
    for (m, count) in expected {
        let got = effective_batch_count(m, 0.1).unwrap();
        ok &= got == count && got == lag_oracle(m, 0.1);
        shown.push(format!("m={m}->{got}"));
    }
    (ok, shown.join(", "))
}

fn grid_oracle(ns: u64, nt: u64, k: u64) -> f64 {
    let closed = |n: u64| (k * n) as f64 / (n + k - 1) as f64;
    let mut best = (f64::NAN, f64::INFINITY);
    for m in [1.0, 0.1, 0.01, 0.001] {
        let pool = lag_oracle(m, 0.1) * nt;
        let value = (closed(ns) / closed(pool) - 1.0).abs() + 0.01 * pool as f64 / ns as f64;
        if value < best.1 - 1e-12 {
            best = (m, value);
        }
    }
    best.0
}

fn momentum_regions() -> (bool, String) {
    let cfg = MomentumConfig::default();
    let pick = |nt| select_momentum(128, nt, 10, &cfg).unwrap().m_star;
    let regions = [(200, 1.0), (16, 0.1), (2, 0.01)];
    let mut ok = regions.iter().all(|&(nt, m)| pick(nt) == m);
    let sweep: Vec<f64> = [1, 2, 4, 16, 64, 200].iter().map(|&nt| pick(nt)).collect();
    ok &= sweep.windows(2).all(|w| w[0] <= w[1]);
    ok &= [1, 2, 4, 16, 64, 200].iter().zip(&sweep).all(|(&nt, &m)| grid_oracle(128, nt, 10) == m);
    (ok, format!("N_t 1..200 -> {sweep:?}"))
}

fn mixing_correctness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(0.0..=1.0);
        let (ms, mt): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (vs, vt): (f64, f64) = (rng.random_range(0.01..10.0), rng.random_range(0.01..10.0));
        let s = ChannelStats::new(vec![ms], vec![vs]).unwrap();
        let t = ChannelStats::new(vec![mt], vec![vt]).unwrap();
        let mixed = mix_statistics(a, &s, &t).unwrap();
        // Mixture moments from first and second raw moments.
        let mean = a * ms + (1.0 - a) * mt;
        let second = a * (vs + ms * ms) + (1.0 - a) * (vt + mt * mt);
        let var = second - mean * mean;
        let rel = |x: f64, y: f64| if x == y { 0.0 } else { (x - y).abs() / y.abs() };
        worst = worst.max(rel(mixed.mean()[0], mean));
        worst = worst.max(rel(mixed.variance()[0], var));
    }
    (worst <= 1e-10, format!("max relative error {worst:.2e} over 1000 cases"))
}

fn log_density(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v)
}

/// KL(p||q) by composite Simpson integration of p * (log p - log q).
fn kl_numeric(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    let sd = vp.sqrt();
    let (lo, hi) = (mp - 14.0 * sd, mp + 14.0 * sd);
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let f = |x: f64| {
        let lp = log_density(x, mp, vp);
        lp.exp() * (lp - log_density(x, mq, vq))
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..steps {
        sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn kl_correctness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..100 {
        let (mp, mq): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (vp, vq): (f64, f64) = (rng.random_range(0.2..4.0), rng.random_range(0.2..4.0));
        let p = ChannelStats::new(vec![mp], vec![vp]).unwrap();
        let q = ChannelStats::new(vec![mq], vec![vq]).unwrap();
        let pq = gaussian_sym_kl(&p, &q, 1e-12).unwrap();
        let qp = gaussian_sym_kl(&q, &p, 1e-12).unwrap();
        let numeric = 0.5 * kl_numeric(mp, vp, mq, vq) + 0.5 * kl_numeric(mq, vq, mp, vp);
        worst = worst.max((pq - numeric).abs());
        exact &= pq == qp && pq >= 0.0 && gaussian_sym_kl(&p, &p, 1e-12).unwrap() == 0.0;
    }
    (worst <= 1e-4 && exact, format!("max |closed - numeric| = {worst:.2e}; symmetric and nonnegative: {exact}"))
}

fn ema_decomposition() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for m in [1.0, 0.1, 0.01, 0.001] {
        let init = ChannelStats::new(vec![0.3, -1.0], vec![1.0, 2.0]).unwrap();
        let mut state = TemaState::new(m, init.clone()).unwrap();
        let mut batches = Vec::new();
        for _ in 0..50 {
            let b = ChannelStats::new(
                (0..2).map(|_| rng.random_range(-2.0..2.0)).collect(),
                (0..2).map(|_| rng.random_range(0.0..3.0)).collect(),
            )
            .unwrap();
            state.update(&b).unwrap();
            batches.push(b);
        }
        let (w0, w) = ema_weights(50, m).unwrap();
        for f in 0..2 {
            let mean = w0 * init.mean()[f] + w.iter().zip(&batches).map(|(w, b)| w * b.mean()[f]).sum::<f64>();
            let var = w0 * init.variance()[f] + w.iter().zip(&batches).map(|(w, b)| w * b.variance()[f]).sum::<f64>();
            worst = worst.max((state.stats().mean()[f] - mean).abs());
            worst = worst.max((state.stats().variance()[f] - var).abs());
        }
    }
    (worst <= 1e-12, format!("max |iterated - reconstructed| = {worst:.2e}"))
}

fn stabilization() -> (bool, String) {
    let mut tema_err = 0.0;
    let mut tbn_err = 0.0;
    let ids = seeds(9);
    for &seed in &ids {
        let world = World::build(&WorldSpec::default(), Sampler::IidUniform, seed).unwrap();
        let spec = ScenarioSpec {
            corruptions: vec![0],
            samples_per_segment: 10_000,
            ..ScenarioSpec::default()
        };
        let scenario = make_scenario(&spec, world.bank.len(), 2, &mut component_rng(seed, streams::SCENARIO)).unwrap();
        assert_eq!(scenario.total_batches(), 5000);
        let options = RunOptions {
            track_estimation: true,
            keep_traces: true,
        };
        let tema = EngineConfig {
            mode: Mode::TemaOnly,
            momentum: MomentumSetting::Fixed(0.01),
            ..EngineConfig::default()
        };
        // First layer: its true target moments do not depend on how the
        // estimate itself normalizes upstream.
        let layer_one = |cfg: &EngineConfig| {
            run_stream(&world, &scenario, cfg, 2, seed, options).unwrap().mean_layer_estimation_error()[0]
        };
        tema_err += layer_one(&tema) / 3.0;
        tbn_err += layer_one(&EngineConfig::with_mode(Mode::Tbn)) / 3.0;
    }
    let ratio = tbn_err / tema_err;
    (ratio >= 5.0, format!("TBN {tbn_err:.4} / TEMA {tema_err:.4} = {ratio:.2}x"))
}

fn default_worlds(ids: &[u64]) -> Vec<World> {
    ids.iter()
        .map(|&s| World::build(&WorldSpec::default(), Sampler::IidUniform, s).unwrap())
        .collect()
}

fn minibatch_robustness() -> (bool, String) {
    let ids = seeds(10);
    let table = compare_modes(
        &default_worlds(&ids),
        &ids,
        &ScenarioSpec::default(),
        &EngineConfig::default(),
        &[Mode::Full, Mode::Tbn],
        &[2, 200],
    )
    .unwrap();
    let full = table.cell("full", 2).unwrap() - table.cell("full", 200).unwrap();
    let tbn = table.cell("tbn", 2).unwrap() - table.cell("tbn", 200).unwrap();
    (
        full < 0.05 && tbn > 0.15,
        format!("full degrades {full:+.4}, tbn degrades {tbn:+.4}"),
    )
}

fn ablation_ordering() -> (bool, String) {
    let ids = seeds(11);
    let table = compare_modes(
        &default_worlds(&ids),
        &ids,
        &ScenarioSpec::default(),
        &EngineConfig::default(),
        &[Mode::Full, Mode::TemaOnly, Mode::Tbn],
        &[2],
    )
    .unwrap();
    let [full, tema, tbn] = [0, 1, 2].map(|m| table.cells[m][0]);
    (
        full <= tema && tema <= tbn,
        format!("full {full:.4} <= tema_only {tema:.4} <= tbn {tbn:.4}"),
    )
}

fn rectifier_bounds() -> (bool, String) {
    let mut ok = true;
    // Alphas emitted by a default full-mode engine.
    let world = World::build(&WorldSpec::default(), Sampler::IidUniform, 12).unwrap();
    let mut rng = component_rng(12, streams::DATA);
    let corruption = world.bank.corruption(4, 5).unwrap();
    let mut max_alpha: f64 = 0.0;
    for n in [1, 2, 16] {
        let mut engine = Engine::new(world.network.clone(), EngineConfig::default(), n as u64, 10).unwrap();
        for _ in 0..200 {
            let x = corruption.apply(&world.generator.sample_batch(&mut rng, n).unwrap().0).unwrap();
            let r = engine.process_batch(&x).unwrap();
            ok &= r.alphas.iter().all(|a| (0.0..=0.5).contains(a));
            max_alpha = r.alphas.iter().fold(max_alpha, |m, &a| m.max(a));
        }
    }
    // Equal divergences everywhere.
    for (len, value) in [(1, 0.0), (4, 0.3), (7, 12.5)] {
        let alphas = divergence_to_alpha(&DivergenceVector::new(vec![value; len]).unwrap(), 0.5).unwrap();
        ok &= alphas.iter().all(|&a| a == 0.25);
    }
    // Prior contraction toward the fresh coefficients.
    let mut worst: f64 = 0.0;
    let mut state = RectifierState::new(3, 0.5, 0.1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let before = state.prior().to_vec();
        let fresh: Vec<f64> = (0..3).map(|_| r.random_range(0.0..=0.5)).collect();
        state.update_prior(&fresh).unwrap();
        for ((p, b), f) in state.prior().iter().zip(&before).zip(&fresh) {
            worst = worst.max(((p - f).abs() - 0.9 * (b - f).abs()).abs());
        }
    }
    ok &= worst <= 1e-15;
    (ok, format!("max alpha {max_alpha:.4}; contraction residual {worst:.1e}"))
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 13\nreplicates = 1\nbatch_sizes = [2, 16, 200]\n\n[scenario]\nsamples_per_segment = 800\n",
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_tema"))
            .args(["simulate", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        let mut files: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    let a = run("a");
    let b = run("b");
    (a == b && a.len() == 15, format!("{} CSVs compared byte for byte", a.len()))
}

#[test]
fn acceptance() {
    let outcomes = vec![
        check(1, "diversity exactness", secs(1), diversity_exactness),
        check(2, "closed-form identity", secs(30), closed_form_identity),
        check(3, "Monte Carlo concordance", secs(30), monte_carlo_concordance),
        check(4, "effective pools", secs(1), effective_pools),
        check(5, "momentum regions", secs(5), momentum_regions),
        check(6, "mixing correctness", secs(5), mixing_correctness),
        check(7, "KL correctness", secs(30), kl_correctness),
        check(8, "EMA decomposition", secs(1), ema_decomposition),
        check(9, "stabilization", secs(30), stabilization),
        check(10, "mini-batch robustness", secs(180), minibatch_robustness),
        check(11, "ablation ordering", secs(180), ablation_ordering),
        check(12, "rectifier bounds", secs(1), rectifier_bounds),
        check(13, "determinism", secs(60), determinism),
    ];
    for o in &outcomes {
        println!(
            "[{}] {:>2}. {:<24} {:>8.2}s / {:>4}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.elapsed.as_secs_f64(),
            o.budget.as_secs(),
            o.detail
        );
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
