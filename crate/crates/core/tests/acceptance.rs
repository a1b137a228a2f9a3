//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,4` restricts the run to the listed criteria.

use std::sync::OnceLock;
use std::time::Instant;

use bcpi::bench::{
    auc_ranking, ks_uniform, run_experiment, Direction, ExperimentConfig, ExperimentOutput, Method,
    MetricsRow, RawRecord,
};
use bcpi::inference::{importance_statistics, normal_cdf, upper_tail_p, LossDeltaMatrix};
use bcpi::learners::Network;
use bcpi::matrix::cholesky;
use bcpi::simulation::{build_block_covariance, OutcomeConfig};
use bcpi::{rng_for, GroupSpec, Matrix, Task};
use rand::Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 20_240_611;

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

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Straight double loop over rows and permutations.
fn brute_statistics(v: &Matrix) -> (f64, f64, f64, f64) {
    let (n, b) = (v.rows(), v.cols());
    let mut total = 0.0;
    let mut d = vec![0.0; n];
    for i in 0..n {
        for k in 0..b {
            total += v[(i, k)];
            d[i] += v[(i, k)];
        }
        d[i] /= b as f64;
    }
    let mean = total / (n * b) as f64;
    let mut ss = 0.0;
    for &di in &d {
        ss += (di - mean) * (di - mean);
    }
    let std = (ss / (n - 1) as f64).sqrt();
    let z = mean * (n as f64).sqrt() / std;
    let p = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    (mean, std, z, p)
}

fn criterion_1() -> Verdict {
    let mut rng = rng_for(SEED, "acceptance-statistics", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let b = rng.random_range(1..=50);
        let shift: f64 = rng.random_range(-0.5..0.5);
        let row_sd: f64 = rng.random_range(0.5..3.0);
        let perm_sd: f64 = rng.random_range(0.1..3.0);
        let mut m = Matrix::zeros(n, b);
        for i in 0..n {
            let row: f64 = rng.sample::<f64, _>(StandardNormal) * row_sd;
            for k in 0..b {
                m[(i, k)] = shift + row + perm_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let (mean, std, z, p) = brute_statistics(&m);
        let got = importance_statistics(&LossDeltaMatrix::new(m, 0, Task::Regression).unwrap()).unwrap();
        for (a, e) in [(got.mean, mean), (got.std, std), (got.z, z), (got.p_value, p)] {
            worst = worst.max(rel_err(a, e));
        }
    }
    verdict(worst <= 1e-12, format!("max relative error {worst:.2e} over 100 fixtures"))
}

fn pairwise_twice(v: &[f64], t: &[bool]) -> (u64, u64) {
    let (mut num, mut pairs) = (0u64, 0u64);
    for i in (0..v.len()).filter(|&i| t[i]) {
        for j in (0..v.len()).filter(|&j| !t[j]) {
            pairs += 1;
            num += if v[i] < v[j] {
                2
            } else if v[i] == v[j] {
                1
            } else {
                0
            };
        }
    }
    (num, 2 * pairs)
}

fn criterion_2() -> Verdict {
    let mut rng = rng_for(SEED, "acceptance-auc", 0);
    let mut mismatches = 0;
    let mut tested = 0;
    while tested < 1000 {
        let len = rng.random_range(2..=50);
        let levels = rng.random_range(1..=12);
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let t: Vec<bool> = (0..len).map(|_| rng.random_bool(0.4)).collect();
        if !t.iter().any(|&x| x) || t.iter().all(|&x| x) {
            continue;
        }
        tested += 1;
        let (num, den) = pairwise_twice(&v, &t);
        let got = auc_ranking(&v, &t, Direction::SmallerIsImportant).unwrap();
        if got != num as f64 / den as f64 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches in {tested} vectors"))
}

fn desk_exp1() -> &'static ExperimentOutput {
    static OUT: OnceLock<ExperimentOutput> = OnceLock::new();
    OUT.get_or_init(|| {
        let cfg = ExperimentConfig {
            rho_inter_sweep: vec![0.0, 0.5, 0.8],
            methods: vec![Method::BcpiDnn, Method::BpiDnn, Method::Marginal],
            ..ExperimentConfig::desk_exp1()
        };
        run_experiment(&cfg, SEED).expect("desk experiment")
    })
}

fn row(out: &ExperimentOutput, method: Method, rho: f64) -> MetricsRow {
    out.rows
        .iter()
        .find(|r| r.method == method && r.rho_inter == rho)
        .cloned()
        .expect("metrics row")
}

fn null_tests(out: &ExperimentOutput, method: Method, rho: f64) -> usize {
    out.records
        .iter()
        .filter(|r| r.method == method && r.rho_inter == rho && r.error.is_none())
        .map(|r| r.truth.iter().filter(|&&t| !t).count())
        .sum()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

fn criterion_3() -> Verdict {
    let out = desk_exp1();
    let r = row(out, Method::BcpiDnn, 0.8);
    let tests = null_tests(out, Method::BcpiDnn, 0.8);
    let pass = r.runs_failed == 0 && tests == 100 && r.type1.is_some_and(|t| t <= 0.10);
    verdict(pass, format!("BCPI-DNN type-I {} over {tests} null tests, {} failed runs", fmt(r.type1), r.runs_failed))
}

fn criterion_4() -> Verdict {
    let out = desk_exp1();
    let bpi = row(out, Method::BpiDnn, 0.8);
    let bcpi = row(out, Method::BcpiDnn, 0.8);
    let pass = match (bpi.type1, bcpi.type1) {
        (Some(a), Some(b)) => bpi.runs_failed == 0 && a > 0.10 && a > b,
        _ => false,
    };
    verdict(pass, format!("BPI-DNN type-I {} vs BCPI-DNN {}", fmt(bpi.type1), fmt(bcpi.type1)))
}

fn criterion_5() -> Verdict {
    let out = run_experiment(&ExperimentConfig::desk_null(), SEED).expect("null experiment");
    let p: Vec<f64> = out
        .records
        .iter()
        .filter_map(|r| r.p_values.clone())
        .flatten()
        .collect();
    let failed = out.records.iter().filter(|r| r.error.is_some()).count();
    let ks = ks_uniform(&p).expect("ks");
    let pass = failed == 0 && ks.uniform_or_conservative(0.01);
    verdict(
        pass,
        format!(
            "{} null p-values, KS p={:.3}, D+={:.3}, D-={:.3}, one-sided p={:.3}",
            ks.n, ks.p_two_sided, ks.d_plus, ks.d_minus, ks.p_anticonservative
        ),
    )
}

fn criterion_6() -> Verdict {
    let out = desk_exp1();
    let a0 = row(out, Method::BcpiDnn, 0.0).auc;
    let a5 = row(out, Method::BcpiDnn, 0.5).auc;
    let m5 = row(out, Method::Marginal, 0.5).auc;
    let pass = match (a0, a5, m5) {
        (Some(a0), Some(a5), Some(m5)) => a0 >= 0.85 && a5 >= 0.85 && a5 - m5 >= 0.05,
        _ => false,
    };
    verdict(
        pass,
        format!("BCPI-DNN AUC {} (rho 0), {} (rho 0.5); Marginal {} (rho 0.5)", fmt(a0), fmt(a5), fmt(m5)),
    )
}

fn importance_time(records: &[RawRecord]) -> f64 {
    records.iter().filter_map(|r| r.importance_seconds).sum()
}

fn criterion_7() -> Verdict {
    let base = ExperimentConfig {
        name: "stacking".into(),
        n: 500,
        n_blocks: 4,
        block_size: 100,
        rho_inter_sweep: vec![0.8],
        outcome: OutcomeConfig {
            signal_groups: 2,
            signals_per_group: 10,
            ..OutcomeConfig::default()
        },
        methods: vec![Method::BcpiDnn],
        runs: 10,
        ..ExperimentConfig::desk_exp1()
    };
    let stacked = run_experiment(&ExperimentConfig { stacking: true, ..base.clone() }, SEED).expect("stacked");
    let plain = run_experiment(&ExperimentConfig { stacking: false, ..base }, SEED).expect("unstacked");
    let (s, u) = (&stacked.rows[0], &plain.rows[0]);
    let (ts, tu) = (importance_time(&stacked.records), importance_time(&plain.records));
    let ratio = ts / tu;
    let pass = match (s.auc, u.auc, s.type1, u.type1) {
        (Some(sa), Some(ua), Some(st), Some(ut)) => {
            s.runs_failed == 0 && u.runs_failed == 0 && (sa - ua).abs() <= 0.1 && st <= 0.15 && ut <= 0.15 && ratio <= 0.67
        }
        _ => false,
    };
    verdict(
        pass,
        format!(
            "AUC {} vs {}, type-I {} vs {}, importance time {ts:.1}s vs {tu:.1}s (ratio {ratio:.2})",
            fmt(s.auc),
            fmt(u.auc),
            fmt(s.type1),
            fmt(u.type1)
        ),
    )
}

fn criterion_8() -> Verdict {
    let cfg = ExperimentConfig {
        rho_inter_sweep: vec![0.5],
        duplicate_group: Some(0),
        methods: vec![Method::BcpiDnn],
        runs: 20,
        ..ExperimentConfig::desk_exp1()
    };
    let out = run_experiment(&cfg, SEED).expect("duplicate experiment");
    let copy = cfg.n_blocks;
    let mut both_null = 0;
    let mut failed = 0;
    for r in &out.records {
        match &r.p_values {
            Some(p) if p[0] > 0.05 && p[copy] > 0.05 => both_null += 1,
            Some(_) => {}
            None => failed += 1,
        }
    }
    let pass = failed == 0 && both_null as f64 >= 0.9 * cfg.runs as f64;
    verdict(pass, format!("both copies p > 0.05 in {both_null}/{} runs, {failed} failed", cfg.runs))
}

fn max_gradient_error(net: &Network, x: &Matrix, y: &[f64], task: Task) -> f64 {
    let (_, grad) = net.loss_and_gradient(x, y, task);
    let analytic = grad.flat_params();
    let theta = net.flat_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let (mut plus, mut minus) = (net.clone(), net.clone());
        let mut t = theta.clone();
        t[k] = theta[k] + h;
        plus.set_flat_params(&t);
        t[k] = theta[k] - h;
        minus.set_flat_params(&t);
        let numeric = (plus.mean_loss(x, y, task) - minus.mean_loss(x, y, task)) / (2.0 * h);
        let denom = numeric.abs().max(analytic[k].abs()).max(1e-8);
        worst = worst.max((numeric - analytic[k]).abs() / denom);
    }
    worst
}

fn simpson_cdf(x: f64) -> f64 {
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let steps = 4000;
    let h = x / steps as f64;
    let mut s = phi(0.0) + phi(x);
    for i in 1..steps {
        s += phi(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

fn criterion_9() -> Verdict {
    let mut rng = rng_for(SEED, "acceptance-kernels", 0);
    let mut grad_err: f64 = 0.0;
    let spec = GroupSpec::new(vec![vec![0, 1, 2], vec![3, 4], vec![5]]);
    for (stack, task) in [(false, Task::Regression), (true, Task::Regression), (true, Task::Binary)] {
        let dims = [1, 2, 1];
        let net = Network::init(6, &[5, 4], stack.then_some((&spec, &dims[..])), &mut rng).expect("network");
        let mut x = Matrix::zeros(10, 6);
        x.as_mut_slice().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let y: Vec<f64> = (0..10)
            .map(|i| {
                let s = x[(i, 0)] - 0.5 * x[(i, 4)];
                match task {
                    Task::Regression => s,
                    Task::Binary => f64::from(u8::from(s > 0.0)),
                }
            })
            .collect();
        grad_err = grad_err.max(max_gradient_error(&net, &x, &y, task));
    }

    let mut phi_err: f64 = 0.0;
    for i in 0..=160 {
        let x = -8.0 + 0.1 * i as f64;
        phi_err = phi_err.max((normal_cdf(x) - simpson_cdf(x)).abs());
        phi_err = phi_err.max((upper_tail_p(x) - (1.0 - simpson_cdf(x))).abs());
    }

    let mut cov_ok = true;
    let mut configs = 0;
    for name in ["desk-exp1", "paper-exp1", "paper-exp2", "desk-nonlinear", "desk-null"] {
        let exp = ExperimentConfig::preset(name).expect("preset");
        for &rho in &[0.0, 0.2, 0.5, 0.8] {
            configs += 1;
            let cov = exp.simulation(rho).covariance;
            let ok = build_block_covariance(&cov).is_ok_and(|s| {
                let p = s.rows();
                let symmetric = (0..p).all(|a| (0..a).all(|b| s[(a, b)].to_bits() == s[(b, a)].to_bits()));
                symmetric && cholesky(&s).is_ok()
            });
            cov_ok &= ok;
        }
    }
    let pass = grad_err <= 1e-4 && phi_err <= 1e-7 && cov_ok;
    verdict(
        pass,
        format!(
            "gradient rel. error {grad_err:.1e}, Phi abs. error {phi_err:.1e}, {configs} covariances PSD and symmetric: {cov_ok}"
        ),
    )
}

fn criterion_10() -> Verdict {
    let cfg = ExperimentConfig {
        methods: vec![Method::BcpiDnn],
        ..ExperimentConfig::desk_nonlinear()
    };
    let out = run_experiment(&cfg, SEED).expect("nonlinear experiment");
    let r = &out.rows[0];
    let pass = r.runs_failed == 0 && r.auc.is_some_and(|a| a >= 0.8) && r.type1.is_some_and(|t| t <= 0.12);
    verdict(pass, format!("BCPI-DNN AUC {}, type-I {}", fmt(r.auc), fmt(r.type1)))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        ("statistics oracle", criterion_1),
        ("AUC oracle", criterion_2),
        ("type-I control", criterion_3),
        ("BPI failure", criterion_4),
        ("null calibration", criterion_5),
        ("ranking quality", criterion_6),
        ("stacking speedup", criterion_7),
        ("degenerate duplication", criterion_8),
        ("numerical kernels", criterion_9),
        ("nonlinear variant", criterion_10),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        failures += usize::from(!v.pass);
        println!(
            "criterion {id:>2} {name}: {} ({}; {secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
