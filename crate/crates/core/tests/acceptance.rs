//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any fails.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use ecst::data::{Domain, UnlabeledSet};
use ecst::energy::{energy, sgld_sample, QuadraticEnergy, ReplayBuffer, SgldConfig};
use ecst::harness::config::{ExperimentConfig, RegularizerName};
use ecst::harness::experiment::{sweep, Summary, SweepAxis};
use ecst::harness::gradcheck;
use ecst::model::MlpParams;
use ecst::numerics::{softmax, Matrix, Rng};
use ecst::selftrain::{estimate_thresholds, select_class, thresholds_from_predictions, Thresholds};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn benchmark_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_moons.toml");
    ExperimentConfig::load(&path).expect("benchmark config")
}

fn seed_sweep(cfg: &ExperimentConfig) -> Vec<Summary> {
    sweep(cfg, &SweepAxis::Seed(SEEDS.to_vec()), None)
        .expect("sweep")
        .into_iter()
        .map(|e| e.summary)
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_acc(s: &Summary) -> f64 {
    s.final_mean_acc.expect("benchmark has target labels")
}

fn random_params(rng: &mut Rng, max_d: usize, max_k: usize, scale: f64) -> MlpParams {
    let d = 1 + rng.index(max_d);
    let k = 2 + rng.index(max_k - 1);
    let mut dims = vec![d];
    for _ in 0..rng.index(3) {
        dims.push(1 + rng.index(16));
    }
    dims.push(k);
    let mut p = MlpParams::init(&dims, rng).unwrap();
    let flat: Vec<f64> = p
        .to_flat()
        .iter()
        .map(|w| scale * (w + 0.2 * rng.normal()))
        .collect();
    p.set_flat(&flat).unwrap();
    p
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = gradcheck::run_suite(100, 0).expect("gradient suite");
    let secs = start.elapsed().as_secs_f64();
    verdict(
        report.passed() && secs < 10.0,
        format!(
            "{} checks over 100 configurations, max rel err {:.2e} (< 1e-6), {secs:.2}s (< 10s)",
            report.results.len(),
            report.max_rel_err()
        ),
    )
}

/// Minimizer of `-Σ_k y_k (ln p_k - ln λ_k)` over `{e_1, …, e_K, 0}`, or
/// `None` when the minimum is attained more than once.
fn brute_force(probs: &[f64], lambda: &[f64]) -> Option<Option<usize>> {
    let mut costs = vec![(0.0, None)];
    for k in 0..probs.len() {
        costs.push((-(probs[k].ln() - lambda[k].ln()), Some(k)));
    }
    let best = costs.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let arg: Vec<_> = costs.iter().filter(|c| c.0 == best).collect();
    (arg.len() == 1).then(|| arg[0].1)
}

fn solver_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let (mut checked, mut agree, mut skipped) = (0usize, 0usize, 0usize);
    while checked < 10_000 {
        let k = 2 + rng.index(7);
        let z: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
        let probs = softmax(&z).unwrap();
        let lambda: Vec<f64> = (0..k)
            .map(|_| {
                if rng.uniform() < 0.05 {
                    0.0
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let Some(expected) = brute_force(&probs, &lambda) else {
            skipped += 1;
            continue;
        };
        let th = Thresholds::new(lambda, 0.5).unwrap();
        checked += 1;
        if select_class(&probs, &th) == expected {
            agree += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        agree == checked && secs < 5.0,
        format!("{agree}/{checked} unique-optimum instances agree ({skipped} ties skipped), {secs:.2}s (< 5s)"),
    )
}

/// λ_k straight from the definition: sort class-k confidences descending,
/// take the (m+1)-th with m = ⌊p·N_k⌋, or 0 once m reaches N_k.
fn oracle_lambda(preds: &[(usize, f64)], k: usize, p: f64) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let mut conf: Vec<f64> = preds
                .iter()
                .filter(|(j, _)| *j == c)
                .map(|(_, v)| *v)
                .collect();
            conf.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let m = (p * conf.len() as f64).floor() as usize;
            if m >= conf.len() {
                0.0
            } else {
                conf[m]
            }
        })
        .collect()
}

fn random_portion(rng: &mut Rng) -> f64 {
    if rng.uniform() < 0.1 {
        1.0
    } else {
        rng.uniform_in(0.01, 1.0)
    }
}

fn threshold_oracle(runs: &[&Summary]) -> Verdict {
    let mut rng = Rng::new(77);
    let mut matches = 0;
    // half from raw multisets with many ties, half through the network
    for _ in 0..500 {
        let k = 2 + rng.index(5);
        let n = 1 + rng.index(300);
        let preds: Vec<(usize, f64)> = (0..n)
            .map(|_| {
                (
                    rng.index(k),
                    (rng.uniform_in(1.0 / k as f64, 1.0) * 20.0).round() / 20.0,
                )
            })
            .collect();
        let p = random_portion(&mut rng);
        if thresholds_from_predictions(&preds, k, p).unwrap().lambda == oracle_lambda(&preds, k, p)
        {
            matches += 1;
        }
    }
    for _ in 0..500 {
        let params = random_params(&mut rng, 4, 5, 1.0);
        let d = params.input_dim();
        let n = 1 + rng.index(200);
        let data: Vec<f64> = (0..n * d).map(|_| 2.0 * rng.normal()).collect();
        let target =
            UnlabeledSet::new(Matrix::from_vec(n, d, data).unwrap(), Domain::Target).unwrap();
        let preds: Vec<(usize, f64)> = target
            .features()
            .iter_rows()
            .map(|x| {
                let pr = params.predict_proba(x).unwrap();
                let c = ecst::numerics::argmax(&pr);
                (c, pr[c])
            })
            .collect();
        let p = random_portion(&mut rng);
        let k = params.n_classes();
        if estimate_thresholds(&params, &target, p).unwrap().lambda == oracle_lambda(&preds, k, p) {
            matches += 1;
        }
    }
    let rounds: usize = runs.iter().map(|s| s.n_rounds).sum();
    let violations: usize = runs.iter().map(|s| s.budget_violations).sum();
    verdict(
        matches == 1000 && violations == 0,
        format!(
            "{matches}/1000 multisets match the sorting oracle; {violations} budget violations in {rounds} rounds of {} runs",
            runs.len()
        ),
    )
}

fn partition_cancellation() -> Verdict {
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let scale = rng.uniform_in(0.5, 4.0);
        let params = random_params(&mut rng, 8, 6, scale);
        let x: Vec<f64> = (0..params.input_dim())
            .map(|_| 2.0 * rng.normal())
            .collect();
        let k = rng.index(params.n_classes());
        let e = energy(&params, &x).unwrap();
        let p = params.predict_proba(&x).unwrap();
        worst = worst.max(((e.logits()[k] + e.value()).exp() - p[k]).abs());
    }
    verdict(
        worst <= 1e-10,
        format!("max |exp(f[k] + E) - p(k|x)| = {worst:.2e} over 1000 triples (<= 1e-10)"),
    )
}

fn sgld_stationarity() -> Verdict {
    let start = Instant::now();
    let dim = 2;
    let (n_chains, calls, steps, burn_in) = (50, 200, 1000, 20);
    let cfg = SgldConfig {
        n_steps: steps,
        step_size: 1e-3,
        noise_std: 0.0,
        proper_sgld: true,
        init_bounds: vec![(-3.0, 3.0); dim],
    };
    let energy = QuadraticEnergy { dim };
    let mut sums = vec![0.0; dim];
    let mut squares = vec![0.0; dim];
    let mut n = 0usize;
    for chain in 0..n_chains {
        // a one-slot buffer without reinitialization keeps each chain persistent
        let mut buffer = ReplayBuffer::new(1, 0.0).unwrap();
        let mut rng = Rng::with_stream(99, chain);
        for call in 0..calls {
            let out = sgld_sample(&energy, &cfg, &mut buffer, &mut rng, 1).unwrap();
            if call >= burn_in {
                for j in 0..dim {
                    sums[j] += out.samples[0][j];
                    squares[j] += out.samples[0][j].powi(2);
                }
                n += 1;
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let vars: Vec<f64> = squares
        .iter()
        .zip(&means)
        .map(|(q, m)| q / n as f64 - m * m)
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let ok = means.iter().all(|m| m.abs() < 0.05)
        && vars.iter().all(|v| (v - 1.0).abs() < 0.1)
        && secs < 60.0;
    verdict(
        ok,
        format!(
            "{n_chains} chains x {} steps, means {:.4?} (|.| < 0.05), variances {:.4?} (within 10% of 1), {secs:.1}s (< 60s)",
            calls * steps,
            means,
            vars
        ),
    )
}

fn direction_of_effect(with: &[Summary], without: &[Summary], secs: f64) -> Verdict {
    let wins = with.iter().filter(|s| s.improvement.unwrap() > 0.0).count();
    let m1 = mean(with.iter().map(final_acc));
    let m0 = mean(without.iter().map(final_acc));
    let base = mean(with.iter().map(|s| s.baseline_mean_acc.unwrap()));
    verdict(
        wins >= 4 && m1 >= m0 && secs < 300.0,
        format!(
            "alpha = 1 beats baseline on {wins}/5 seeds (>= 4); mean acc {m1:.4} vs alpha = 0 {m0:.4} (baseline {base:.4}); {secs:.1}s (< 300s)"
        ),
    )
}

fn alpha_sensitivity(per_alpha: &[(f64, Vec<Summary>)]) -> Verdict {
    let means: Vec<(f64, f64)> = per_alpha
        .iter()
        .map(|(a, runs)| (*a, mean(runs.iter().map(final_acc))))
        .collect();
    let complete = per_alpha
        .iter()
        .all(|(_, r)| r.len() == SEEDS.len() && r.iter().all(|s| final_acc(s).is_finite()));
    let hi = means.iter().map(|m| m.1).fold(f64::MIN, f64::max);
    let lo = means.iter().map(|m| m.1).fold(f64::MAX, f64::min);
    let listed: Vec<String> = means
        .iter()
        .map(|(a, m)| format!("alpha {a}: {m:.4}"))
        .collect();
    verdict(
        complete,
        format!("{}; spread {:.4}", listed.join(", "), hi - lo),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_moons.toml");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_ecst"))
            .arg("adapt")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .expect("run ecst");
        if !status.status.success() {
            return verdict(
                false,
                format!("adapt failed: {}", String::from_utf8_lossy(&status.stderr)),
            );
        }
        outputs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    verdict(
        outputs[0] == outputs[1],
        format!(
            "two adapt runs wrote {} and {} byte metrics.csv, identical: {}",
            outputs[0].len(),
            outputs[1].len(),
            outputs[0] == outputs[1]
        ),
    )
}

fn main() {
    let cfg = benchmark_config();
    let start = Instant::now();
    let with_energy = seed_sweep(&cfg);
    let mut cbst = cfg.clone();
    cbst.selftrain.alpha = 0.0;
    let without = seed_sweep(&cbst);
    let effect_secs = start.elapsed().as_secs_f64();

    let mut per_alpha = Vec::new();
    for alpha in [0.8, 1.0, 1.1] {
        let mut c = cfg.clone();
        c.selftrain.alpha = alpha;
        per_alpha.push((
            alpha,
            if alpha == 1.0 {
                with_energy.clone()
            } else {
                seed_sweep(&c)
            },
        ));
    }

    let mut literal = cfg.clone();
    literal.selftrain.regularizer = RegularizerName::Literal;
    let literal_runs = seed_sweep(&literal);

    let all_runs: Vec<&Summary> = with_energy
        .iter()
        .chain(&without)
        .chain(per_alpha.iter().flat_map(|(_, r)| r))
        .chain(&literal_runs)
        .collect();

    let criteria: Vec<(&str, Verdict)> = vec![
        ("gradient suite", gradient_suite()),
        ("solver vs brute force", solver_oracle()),
        ("thresholds and budgets", threshold_oracle(&all_runs)),
        ("partition cancellation", partition_cancellation()),
        ("sgld stationarity", sgld_stationarity()),
        (
            "direction of effect",
            direction_of_effect(&with_energy, &without, effect_secs),
        ),
        ("alpha sensitivity", alpha_sensitivity(&per_alpha)),
        ("determinism", determinism()),
    ];

    let mut failed = 0;
    for (i, (name, v)) in criteria.iter().enumerate() {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {} [{tag}] {name}: {}", i + 1, v.detail);
        failed += usize::from(!v.passed);
    }
    let lit_wins = literal_runs
        .iter()
        .filter(|s| s.improvement.unwrap() > 0.0)
        .count();
    println!(
        "note: literal energy penalty at alpha = 1 beats baseline on {lit_wins}/5 seeds, mean acc {:.4}",
        mean(literal_runs.iter().map(final_acc))
    );
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
