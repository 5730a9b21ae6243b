//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dpl_core::acquisition::expected_improvement;
use dpl_core::baselines::{hyperband_brackets, run_successive_halving, ShSchedule};
use dpl_core::benchmark::{
    generate_synthetic, BenchmarkTable, ConfigEntry, Hyperparameter, MetricDirection,
};
use dpl_core::curve_models::{
    eval_broken_law, eval_candidate1, eval_candidate2, eval_power_law, fit_single_curve,
    min_smooth, ExtendedCoefficients, FitConfig, Formulation, LearningCurve, PowerLawCoefficients,
};
use dpl_core::forecast::{run_forecast_experiment, ForecastModel};
use dpl_core::hpo::Method;
use dpl_core::neural::stack_rows;
use dpl_core::stats::median;
use dpl_core::surrogate::{head_forward, CurveRegressor, DplNetwork, Posterior, RAW_OUTPUTS};
use dpl_core::trajectory::{incumbent_regret, RunSettings, StepLedger};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn batch_l1(net: &DplNetwork, inputs: &[Vec<f64>], budgets: &[f64], targets: &[f64]) -> f64 {
    let x = stack_rows(inputs).unwrap();
    let raw = net.network().predict_batch(x.view()).unwrap();
    let mut grad = [0.0; RAW_OUTPUTS];
    let mut total = 0.0;
    for (r, row) in raw.rows().into_iter().enumerate() {
        let raw_row: Vec<f64> = row.to_vec();
        total += (head_forward(&raw_row, budgets[r], &mut grad) - targets[r]).abs();
    }
    total / targets.len() as f64
}

/// Relative error with a floor on the denominator so that gradients near
/// zero are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DplNetwork::new(3, &[16, 16], seed).unwrap();
        let n = 8;
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let budgets: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..=1.0)).collect();

        let x = stack_rows(&inputs).unwrap();
        let (raw, cache) = net.body.forward_batch(x.view()).unwrap();
        // Targets sit well away from the predictions so the L1 kink is never crossed.
        let mut targets = Vec::with_capacity(n);
        let mut dout = Vec::with_capacity(n);
        for (r, &budget) in budgets.iter().enumerate() {
            let mut grad = vec![0.0; RAW_OUTPUTS];
            let pred = head_forward(&raw.row(r).to_vec(), budget, &mut grad);
            let offset = rng.random_range(0.2..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            targets.push(pred + offset);
            let sign = -offset.signum();
            dout.push(
                grad.iter()
                    .map(|g| g * sign / n as f64)
                    .collect::<Vec<f64>>(),
            );
        }
        let dout = stack_rows(&dout).unwrap();
        let analytic = net
            .body
            .backward(&cache, dout.view())
            .unwrap()
            .as_slice()
            .to_vec();

        for (i, &a) in analytic.iter().enumerate() {
            let orig = net.body.params()[i];
            net.body.params_mut()[i] = orig + h;
            let up = batch_l1(&net, &inputs, &budgets, &targets);
            net.body.params_mut()[i] = orig - h;
            let down = batch_l1(&net, &inputs, &budgets, &targets);
            net.body.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-5,
        format!("max relative error {worst:.2e} >= 1e-5"),
    )?;
    ensure(secs < 10.0, format!("took {secs:.1}s >= 10s"))?;
    Ok(format!(
        "max relative error {worst:.2e} over 100 seeds in {secs:.1}s"
    ))
}

fn curve_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c = ExtendedCoefficients {
            alpha: rng.random_range(-1.0..1.0),
            beta: rng.random_range(0.0..2.0),
            gamma: rng.random_range(0.0..3.0),
            d: rng.random_range(0.01..2.0),
            e: 1.0,
            c: 0.0,
            f: rng.random_range(0.1..3.0),
        };
        let b = rng.random_range(0.01..=1.0);
        let c1 = eval_candidate1(&c, b).unwrap();
        let c2 = eval_candidate2(&c, b).unwrap();
        worst = worst.max((c1 - c2).abs());
        let pl = PowerLawCoefficients::new(c.alpha, c.beta, c.gamma);
        worst =
            worst.max((eval_broken_law(&c, b).unwrap() - eval_power_law(&pl, b).unwrap()).abs());

        let raw: Vec<f64> = (0..RAW_OUTPUTS)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let mut grad = [0.0; RAW_OUTPUTS];
        let at_one = head_forward(&raw, 1.0, &mut grad);
        let coeffs = dpl_core::surrogate::head_coefficients(&raw);
        worst = worst.max((at_one - (coeffs.alpha + coeffs.beta)).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.2e} > 1e-12"))?;
    Ok(format!("max deviation {worst:.2e} over 10000 random draws"))
}

fn posterior_statistics() -> Outcome {
    let p = Posterior::from_predictions(&[0.2, 0.4]).unwrap();
    ensure(
        (p.mean - 0.3).abs() <= 1e-12 && (p.variance - 0.01).abs() <= 1e-12,
        format!("{{0.2,0.4}} gave {p:?}"),
    )?;
    let p = Posterior::from_predictions(&[1.0, 2.0, 3.0]).unwrap();
    ensure(
        (p.mean - 2.0).abs() <= 1e-12 && (p.variance - 2.0 / 3.0).abs() <= 1e-12,
        format!("{{1,2,3}} gave {p:?}"),
    )?;
    let p = Posterior::from_predictions(&[0.7; 5]).unwrap();
    ensure(
        p.variance == 0.0,
        format!("identical members gave variance {}", p.variance),
    )?;
    Ok("two-member, three-member and identical-member cases exact".into())
}

fn ei_analytics() -> Outcome {
    let centre = expected_improvement(0.5, 1.0, 0.5);
    let expected = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    ensure(
        (centre - expected).abs() <= 1e-9,
        format!("EI(f_best, 1) = {centre}"),
    )?;
    let f_best = 0.0;
    let means: Vec<f64> = (0..100).map(|i| -3.0 + 6.0 * i as f64 / 99.0).collect();
    let stds: Vec<f64> = (0..100).map(|j| 3.0 * j as f64 / 99.0).collect();
    let grid: Vec<Vec<f64>> = means
        .iter()
        .map(|&m| {
            stds.iter()
                .map(|&s| expected_improvement(m, s, f_best))
                .collect()
        })
        .collect();
    for i in 0..100 {
        for j in 0..100 {
            let v = grid[i][j];
            ensure(
                v >= 0.0 && v.is_finite(),
                format!("EI({}, {}) = {v}", means[i], stds[j]),
            )?;
            if i > 0 {
                ensure(
                    v <= grid[i - 1][j],
                    format!("EI increases with mean at ({}, {})", means[i], stds[j]),
                )?;
            }
            if j > 0 {
                ensure(
                    v >= grid[i][j - 1],
                    format!("EI decreases with std at ({}, {})", means[i], stds[j]),
                )?;
            }
        }
    }
    Ok(format!(
        "EI(f_best, 1) = {centre:.12}; 100x100 grid non-negative and monotone"
    ))
}

fn fit_recovery() -> Outcome {
    let start = Instant::now();
    let table = generate_synthetic(5, 100, 1, 50, 0.0).unwrap();
    let mut hits = 0;
    let mut worst: f64 = 0.0;
    for (i, entry) in table.configs().iter().enumerate() {
        let config = FitConfig {
            seed: i as u64,
            ..FitConfig::default()
        };
        let report = fit_single_curve(
            &entry.curve.values()[..10],
            50,
            Formulation::PowerLaw,
            &config,
        )
        .unwrap();
        let err = (report.curve.predict(1.0).unwrap() - entry.curve.final_value()).abs();
        worst = worst.max(err);
        if err <= 1e-2 {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        hits >= 95,
        format!("{hits}/100 within 1e-2 (worst {worst:.3e})"),
    )?;
    ensure(secs < 60.0, format!("took {secs:.1}s >= 60s"))?;
    Ok(format!(
        "{hits}/100 final values within 1e-2 (worst {worst:.2e}) in {secs:.1}s"
    ))
}

fn forecasting() -> Outcome {
    let table = generate_synthetic(6, 200, 2, 20, 0.0).unwrap();
    let pl = run_forecast_experiment(&table, 0.5, ForecastModel::PowerLaw, 0).unwrap();
    ensure(
        pl.spearman >= 0.99,
        format!("PL at 0.5: spearman {:.4}", pl.spearman),
    )?;
    let mut dpl = Vec::new();
    let mut cond = Vec::new();
    for seed in 0..10 {
        dpl.push(
            run_forecast_experiment(&table, 0.2, ForecastModel::Dpl, seed)
                .unwrap()
                .spearman,
        );
        cond.push(
            run_forecast_experiment(&table, 0.2, ForecastModel::CondNn, seed)
                .unwrap()
                .spearman,
        );
    }
    let (md, mc) = (median(&dpl).unwrap(), median(&cond).unwrap());
    ensure(
        md >= mc,
        format!("median spearman at 0.2: DPL {md:.4} < CondNN {mc:.4}"),
    )?;
    Ok(format!(
        "PL@0.5 spearman {:.4}; median spearman @0.2 DPL {md:.4} vs CondNN {mc:.4}",
        pl.spearman
    ))
}

fn hpo_superiority() -> Outcome {
    let start = Instant::now();
    let table = generate_synthetic(7, 200, 2, 10, 0.01).unwrap();
    let mut wins = 0;
    let (mut dpl_total, mut rs_total) = (0.0, 0.0);
    for seed in 0..10 {
        let settings = RunSettings::for_table(&table, 20, seed);
        let final_regret = |m: Method| {
            m.run(&table, settings)
                .unwrap()
                .final_point()
                .unwrap()
                .normalized_regret
                .unwrap()
        };
        let (d, r) = (
            final_regret(Method::Dpl),
            final_regret(Method::RandomSearch),
        );
        if d <= r {
            wins += 1;
        }
        dpl_total += d;
        rs_total += r;
    }
    let secs = start.elapsed().as_secs_f64();
    let (dm, rm) = (dpl_total / 10.0, rs_total / 10.0);
    ensure(wins >= 8, format!("DPL won {wins}/10 seeds"))?;
    ensure(
        dm < rm,
        format!("mean normalized regret DPL {dm:.4} vs RS {rm:.4}"),
    )?;
    ensure(secs < 900.0, format!("took {secs:.0}s >= 900s"))?;
    Ok(format!(
        "DPL <= RS in {wins}/10 seeds; mean normalized regret {dm:.4} vs {rm:.4}; {secs:.0}s"
    ))
}

fn scheduler_accounting() -> Outcome {
    let table = generate_synthetic(8, 9, 2, 9, 0.0).unwrap();
    let schedule = ShSchedule::new(3, 1, 9).unwrap();
    ensure(
        schedule.rungs == [1, 3, 9],
        format!("rungs {:?}", schedule.rungs),
    )?;
    let t =
        run_successive_halving(&table, RunSettings::for_table(&table, 100, 0), &schedule).unwrap();
    ensure(
        t.steps_consumed() == 21,
        format!("SH consumed {} steps", t.steps_consumed()),
    )?;
    let sizes: Vec<usize> = hyperband_brackets(27, 3)
        .unwrap()
        .iter()
        .map(|b| b.n)
        .collect();
    ensure(
        sizes == [27, 12, 6, 4],
        format!("Hyperband bracket sizes {sizes:?}"),
    )?;
    let mut runs = 0;
    for seed in 0..4 {
        let table = generate_synthetic(100 + seed, 25, 2, 6, 0.02).unwrap();
        for total in [1, 5, 13, 40, 500] {
            let settings = RunSettings {
                total_step_budget: total,
                b_step: 1,
                seed,
                record_wall_time: false,
            };
            for method in Method::ALL {
                let t = method.run(&table, settings).unwrap();
                ensure(
                    t.steps_consumed() <= total && t.steps_consumed() + t.unused_steps == total,
                    format!("{method} consumed {} of {total}", t.steps_consumed()),
                )?;
                runs += 1;
            }
        }
    }
    Ok(format!(
        "SH 21 steps; brackets {sizes:?}; {runs} runs within budget"
    ))
}

fn random_table(rng: &mut ChaCha8Rng) -> BenchmarkTable {
    let n = rng.random_range(1..=8);
    let b_max = rng.random_range(1..=10);
    let configs = (0..n)
        .map(|i| ConfigEntry {
            id: i as u64 * 3 + 1,
            raw_values: vec![rng.random::<f64>()],
            curve: LearningCurve::new((0..b_max).map(|_| rng.random_range(0.0..2.0)).collect())
                .unwrap(),
        })
        .collect();
    let hp = vec![Hyperparameter {
        name: "x".into(),
        min: 0.0,
        max: 1.0,
    }];
    BenchmarkTable::new("random", MetricDirection::Loss, b_max, hp, configs, None).unwrap()
}

fn regret_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checks = 0;
    for t in 0..50 {
        let table = random_table(&mut rng);
        let brute_oracle = table
            .configs()
            .iter()
            .flat_map(|c| c.curve.values().iter().copied())
            .fold(f64::INFINITY, f64::min);
        ensure(
            table.oracle() == brute_oracle,
            format!("table {t}: oracle mismatch"),
        )?;
        let settings = RunSettings {
            total_step_budget: 1000,
            b_step: 1,
            seed: 0,
            record_wall_time: false,
        };
        let mut ledger = StepLedger::new(&table, settings).unwrap();
        for _ in 0..6 {
            let i = rng.random_range(0..table.len());
            let entry = &table.configs()[i];
            let trained = ledger.trained_budget(i);
            if trained < table.b_max() {
                ledger
                    .evaluate(entry.id, rng.random_range(trained + 1..=table.b_max()))
                    .unwrap();
                let mut seen = f64::INFINITY;
                for (j, c) in table.configs().iter().enumerate() {
                    for &v in &c.curve.values()[..ledger.trained_budget(j)] {
                        seen = seen.min(v);
                    }
                }
                let regret = incumbent_regret(ledger.history(), &table).unwrap();
                ensure(
                    regret == seen - brute_oracle,
                    format!("table {t}: regret mismatch"),
                )?;
                checks += 1;
            }
        }
    }
    Ok(format!("50 tables, {checks} regret checks exact"))
}

fn dpl(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dpl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!(
            "dpl {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    for k in 0..2 {
        let run = root.join(format!("pass{k}"));
        std::fs::create_dir(&run).unwrap();
        dpl(
            &[
                "synth",
                "--seed",
                "3",
                "--configs",
                "30",
                "--hp-dim",
                "2",
                "--b-max",
                "8",
                "--noise",
                "0.01",
                "--out",
                "bench.json",
            ],
            &run,
        )?;
        dpl(
            &[
                "run",
                "--benchmarks",
                "bench.json",
                "--methods",
                "dpl,rs,sh,hb,asha",
                "--seeds",
                "0,1",
                "--budget-multiplier",
                "4",
                "--out",
                "runs",
            ],
            &run,
        )?;
        dpl(&["report", "--in", "runs", "--out", "report.csv"], &run)?;
        dpl(
            &[
                "forecast",
                "--benchmark",
                "bench.json",
                "--fractions",
                "0.3,0.6",
                "--models",
                "DPL,PL,CondNN",
                "--seeds",
                "0",
                "--out",
                "forecast.csv",
            ],
            &run,
        )?;
    }
    let mut compared = 0;
    for name in ["bench.json", "report.csv", "forecast.csv"] {
        let a = std::fs::read(root.join("pass0").join(name)).unwrap();
        let b = std::fs::read(root.join("pass1").join(name)).unwrap();
        ensure(a == b, format!("{name} differs between runs"))?;
        compared += 1;
    }
    let (a, b) = (
        read_dir_bytes(&root.join("pass0/runs")),
        read_dir_bytes(&root.join("pass1/runs")),
    );
    ensure(
        a.len() == 11,
        format!(
            "expected 10 trajectories and an aggregate, got {} files",
            a.len()
        ),
    )?;
    ensure(a == b, "trajectory CSVs differ between runs")?;
    compared += a.len();
    ensure(
        std::fs::read(root.join("pass0/report.csv")).unwrap()
            == std::fs::read(root.join("pass0/runs/aggregate.csv")).unwrap(),
        "report differs from the run's own aggregate",
    )?;
    Ok(format!(
        "synth, run, report and forecast byte-identical across reruns ({compared} files)"
    ))
}

fn min_smoothing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..1000 {
        let len = rng.random_range(1..=100);
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..2.0)).collect();
        let curve = LearningCurve::new(values.clone()).unwrap();
        let smoothed = min_smooth(&curve);
        for (i, &v) in smoothed.values().iter().enumerate() {
            let brute = values[..=i].iter().copied().fold(f64::INFINITY, f64::min);
            ensure(
                v == brute,
                format!("curve {k}: position {i} is not the prefix minimum"),
            )?;
        }
        ensure(
            min_smooth(&smoothed) == smoothed,
            format!("curve {k}: not idempotent"),
        )?;
    }
    Ok("1000 curves match the prefix minimum and are idempotent".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_check),
        ("curve-model identities", curve_identities),
        ("posterior statistics", posterior_statistics),
        ("EI analytics", ei_analytics),
        ("per-curve fit recovery", fit_recovery),
        ("forecasting ranking", forecasting),
        ("end-to-end HPO vs random search", hpo_superiority),
        ("scheduler accounting", scheduler_accounting),
        ("regret/oracle equivalence", regret_oracle),
        ("CLI determinism", cli_determinism),
        ("min-smoothing", min_smoothing),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&number) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        match outcome {
            Ok(detail) => println!("PASS criterion {number:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {number:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}
