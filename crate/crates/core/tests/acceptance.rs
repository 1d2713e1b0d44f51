//! End-to-end acceptance checks. Prints one pass/fail line per criterion and
//! exits non-zero when any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use drafteu::datagen::{generate_corpus, make_synthetic_qa, TeacherSource};
use drafteu::distill::{
    check_gradients_for, osd_train, DiscretizedGaussian, KlDirection, StochasticTeacher, StrategyKind, TrainConfig, TrainingSet,
};
use drafteu::evaluation::{
    auroc, brier, ccc, ece, fit_logistic, relative_flops, rmse, round2, spearman, CostEntry, CostMode, LogisticConfig,
};
use drafteu::models::{make_target_family, predictive_average, AutoregressiveModel, Backend, LowRankNoiseSpec, VocabSpec};
use drafteu::pipeline::studies::{bimodal_teacher, half_masses, mode_seeking_demo, proxy_robustness, strategy_sweep};
use drafteu::pipeline::{verify_theory, ExperimentConfig};
use drafteu::rng;
use drafteu::simplex::{total_variation, Categorical};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn identities() -> Outcome {
    let start = Instant::now();
    let r = verify_theory(1000, 11, 1e-10, false).expect("theory check runs");
    let elapsed = start.elapsed();
    let worst = r.rows.iter().map(|row| row.max_residual).fold(0.0, f64::max);
    outcome(r.passed() && elapsed < Duration::from_secs(10), format!("max residual {worst:.3e} in {elapsed:.2?}"))
}

fn osd_fixed_point() -> Outcome {
    let start = Instant::now();
    let vocab = VocabSpec::new(6, 0, Some(1)).unwrap();
    let data = make_synthetic_qa(vocab, 12, 2, 4).unwrap();
    let base = AutoregressiveModel::random(Backend::LinearSoftmax, vocab, 3, 4, 1.0, 8).unwrap();
    let corpus = generate_corpus(TeacherSource::Model(&base), "target", &data, 4, 1.0, 4, 2).unwrap();
    let family = make_target_family(&base, 3, &LowRankNoiseSpec::new(2, 0.5), 3).unwrap();
    let student = AutoregressiveModel::zeros(Backend::Tabular, vocab, 3, 0).unwrap();
    let set = TrainingSet::from_corpus(&data, &corpus, None);
    let config = TrainConfig { learning_rate: 20.0, steps: 20000, batch_size: 16, teacher_samples_per_step: 1, seed: 1 };
    let (trained, _) = osd_train(&student, &StochasticTeacher::Enumerated(family.clone()), &set, &config).unwrap();
    let worst = set
        .contexts
        .iter()
        .map(|c| {
            total_variation(&trained.next_token_dist(&c.context).unwrap(), &predictive_average(&family, &c.context).unwrap())
                .unwrap()
        })
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(worst <= 1e-3 && elapsed < Duration::from_secs(60), format!("max TV {worst:.2e} in {elapsed:.2?}"))
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut r = rng::stream(rng::derive(2024, i));
        let v = r.random_range(4..=10);
        let n = r.random_range(1..=3);
        let h = [0, 3, 5][r.random_range(0..3)];
        let vocab = VocabSpec::new(v, 0, Some(1)).unwrap();
        let model = AutoregressiveModel::random(Backend::LinearSoftmax, vocab, n, h, 0.7, rng::derive(7, i)).unwrap();
        let raw: Vec<f64> = (0..v).map(|_| r.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let teacher = Categorical::new(raw.iter().map(|x| x / total).collect()).unwrap();
        let context: Vec<usize> = (0..r.random_range(1..=5)).map(|_| r.random_range(0..v)).collect();
        for dir in [KlDirection::Forward, KlDirection::Reverse] {
            worst = worst.max(check_gradients_for(&model, &teacher, &context, dir).unwrap());
        }
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.2e} over 100 instances"))
}

fn grid_best(teacher: &Categorical, dir: KlDirection) -> DiscretizedGaussian {
    let v = teacher.len() as f64;
    let mut best = (f64::INFINITY, DiscretizedGaussian { mu: 0.0, log_sigma: 0.0 });
    for i in 0..=400 {
        for j in 0..=200 {
            let g = DiscretizedGaussian { mu: -2.0 + (v + 3.0) * i as f64 / 400.0, log_sigma: -1.5 + 5.0 * j as f64 / 200.0 };
            let loss = g.loss(teacher, dir);
            if loss < best.0 {
                best = (loss, g);
            }
        }
    }
    best.1
}

fn mode_seeking() -> Outcome {
    let teacher = bimodal_teacher(32).unwrap();
    let fit = mode_seeking_demo(&teacher);
    let v = teacher.len();
    let oracle_rev = grid_best(&teacher, KlDirection::Reverse);
    let oracle_fwd = grid_best(&teacher, KlDirection::Forward);
    let (orl, oru) = half_masses(&oracle_rev.dist(v));
    let (ofl, ofu) = half_masses(&oracle_fwd.dist(v));
    let (rl, ru) = fit.reverse_masses;
    let (fl, fu) = fit.forward_masses;
    let tol = 1e-6;
    let ok = rl.max(ru) >= 0.9
        && fl.min(fu) >= 0.2
        && orl.max(oru) >= 0.9
        && ofl.min(ofu) >= 0.2
        && fit.reverse.loss(&teacher, KlDirection::Reverse) <= oracle_rev.loss(&teacher, KlDirection::Reverse) + tol
        && fit.forward.loss(&teacher, KlDirection::Forward) <= oracle_fwd.loss(&teacher, KlDirection::Forward) + tol;
    outcome(
        ok,
        format!(
            "reverse fit {:.3} in one bump (grid {:.3}), forward fit keeps {fl:.3}/{fu:.3} (grid {ofl:.3}/{ofu:.3})",
            rl.max(ru),
            orl.max(oru)
        ),
    )
}

fn strategy_ordering() -> Outcome {
    let seeds = 5;
    let rows = strategy_sweep(&ExperimentConfig::default(), &StrategyKind::ALL, seeds).expect("sweep runs");
    let get = |i: usize, k: StrategyKind| rows.iter().find(|r| r.seed_index == i && r.kind == k).expect("row");
    let mean = |k: StrategyKind, f: &dyn Fn(&drafteu::pipeline::studies::SweepRow) -> f64| {
        (0..seeds).map(|i| f(get(i, k))).sum::<f64>() / seeds as f64
    };
    let ddd_rmse = mean(StrategyKind::Ddd, &|r| r.rmse);
    let lowest = StrategyKind::ALL.iter().all(|&k| k == StrategyKind::Ddd || mean(k, &|r| r.rmse) > ddd_rmse);
    let jsd_lower = mean(StrategyKind::ReverseKl, &|r| r.heldout_jsd) < mean(StrategyKind::Ddd, &|r| r.heldout_jsd);
    let per_seed = (0..seeds)
        .filter(|&i| {
            let d = get(i, StrategyKind::Ddd);
            StrategyKind::ALL.iter().all(|&k| k == StrategyKind::Ddd || get(i, k).rmse > d.rmse)
                && get(i, StrategyKind::ReverseKl).heldout_jsd < d.heldout_jsd
        })
        .count();
    let summary: Vec<String> =
        StrategyKind::ALL.iter().map(|&k| format!("{} {:.4}", k.name(), mean(k, &|r| r.rmse))).collect();
    outcome(lowest && jsd_lower && per_seed >= 4, format!("mean RMSE [{}]; ordering holds on {per_seed}/5 seeds", summary.join(", ")))
}

fn proxy_robustness_trend() -> Outcome {
    let r = proxy_robustness(&ExperimentConfig::default(), 100, 3, 40).expect("study runs");
    let (k_lo, s_lo) = r.konly_spread[0];
    let (k_hi, s_hi) = r.konly_spread[r.konly_spread.len() - 1];
    let ok = k_lo < k_hi && s_hi.std < s_lo.std && r.distilled_bias.std < r.raw_bias.std;
    outcome(
        ok,
        format!(
            "K-only std {:.4} (K={k_lo}) -> {:.4} (K={k_hi}); bias std distilled {:.4} vs raw {:.4}",
            s_lo.std, s_hi.std, r.distilled_bias.std, r.raw_bias.std
        ),
    )
}

fn cost_arithmetic() -> Outcome {
    let baseline = CostEntry::target_ensemble(8.0, 3).unwrap();
    let same = CostEntry::target_ensemble(8.0, 3).unwrap();
    let small = CostEntry::draft_ensemble(1.0, 6, 8.0, CostMode::DraftsPlusTarget).unwrap();
    let mid = CostEntry::draft_ensemble(3.0, 6, 8.0, CostMode::DraftsPlusTarget).unwrap();
    let got = [&same, &small, &mid].map(|m| round2(relative_flops(m, &baseline).unwrap()));
    outcome(got == [1.00, 0.58, 1.08] && small.total() == 14.0 && baseline.total() == 24.0, format!("ratios {got:?}"))
}

fn metric_examples() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("rmse identical", rmse(&[0.1, 0.2], &[0.1, 0.2]).unwrap() == 0.0);
    check("rmse offset", (rmse(&[0.5, 1.5, 2.5], &[0.0, 1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
    check("rmse swap", rmse(&[0.0, 1.0], &[1.0, 0.0]).unwrap() == 1.0);
    check("spearman same", (spearman(&[1.0, 2.0, 3.0], &[2.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
    check("spearman reversed", (spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    check("spearman ties", (spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-12);
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    check("ccc self", (ccc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    let var = 2.0;
    let shifted: Vec<f64> = x.iter().map(|v| v + 1.5).collect();
    check("ccc shift", (ccc(&x, &shifted).unwrap() - 2.0 * var / (2.0 * var + 1.5 * 1.5)).abs() < 1e-12);
    let mirrored: Vec<f64> = x.iter().map(|v| -v + 6.0).collect();
    check("ccc mirror", (ccc(&x, &mirrored).unwrap() + 1.0).abs() < 1e-12);
    check("auroc perfect", auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap() == 1.0);
    check("auroc inverted", auroc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap() == 0.0);
    let half = [0.5; 4];
    check("brier half", brier(&half, &[0, 1, 0, 1]).unwrap() == 0.25);
    check("ece half", ece(&half, &[0, 1, 0, 1], 10).unwrap() == 0.0);
    let n = failures.len();
    outcome(n == 0, if n == 0 { "all examples exact".to_string() } else { format!("failed: {}", failures.join(", ")) })
}

fn run_cli(config: &Path, out: &Path, workers: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_drafteu"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("DRAFTEU_WORKERS", workers)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { runs: 3, ..ExperimentConfig::default() };
    let config = tmp.path().join("config.toml");
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    let dirs = ["a", "b", "c"].map(|d| tmp.path().join(d));
    let ran = run_cli(&config, &dirs[0], "4") && run_cli(&config, &dirs[1], "4") && run_cli(&config, &dirs[2], "1");
    if !ran {
        return outcome(false, "run command failed");
    }
    let outs = dirs.map(|d| read_outputs(&d));
    let files = outs[0].len();
    outcome(files > 0 && outs[0] == outs[1] && outs[0] == outs[2], format!("{files} output files identical across repeats and worker counts"))
}

fn detection_sanity() -> Outcome {
    let mut r = rng::stream(99);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let truth: Vec<f64> = (0..400).map(|_| r.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = truth.iter().map(|&t| u8::from(t > 0.6)).collect();
    let est: Vec<f64> = truth.iter().map(|&t| t + noise.sample(&mut r)).collect();
    let model = fit_logistic(&est, &labels, 1e-3, &LogisticConfig::default()).unwrap();
    let a = auroc(&model.predict_all(&est), &labels).unwrap();
    outcome(a >= 0.95, format!("AUROC {a:.4}"))
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("EU identities", identities),
        ("OSD fixed point", osd_fixed_point),
        ("gradient correctness", gradients),
        ("mode seeking vs covering", mode_seeking),
        ("strategy ordering", strategy_ordering),
        ("proxy robustness", proxy_robustness_trend),
        ("cost arithmetic", cost_arithmetic),
        ("metric examples", metric_examples),
        ("determinism", determinism),
        ("detection sanity", detection_sanity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!("criterion {:>2} {:<26} {}  {}", i + 1, name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
