//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use coe::data::{coe4_synth, Dataset};
use coe::infer::{self, TcpBinning};
use coe::lgm::{generate_selection_labels, selection_loss_weights, standardize_suitability, TcpMatrix};
use coe::matrix::Matrix;
use coe::models::{ArchConfig, Bundle, Delegator, Expert, HETEROGENEOUS_SCALES};
use coe::nn::{gradient_check, random_matrix, softmax_rows, Mlp};
use coe::seed::{rng_for, Rng};
use coe::train::{self, phase2_backward, phase2_forward, Ablation, Mode, Phase2Targets, TrainConfig};
use coe::transport::{solve_btp, Assignment, CostMatrix, DemandVector};
use coe::wgm::{
    expert_weights, generate_assignment, smooth_assignment, AssignmentMatrix, SelectionProbMatrix,
};
use rand::seq::SliceRandom;
use rand::Rng as _;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Frozen after the first seeded runs; see the README for the observed values.
const SINGLE_MARGIN: f64 = 0.05;
const GATE_MARGIN: f64 = 0.05;
const WGM_STAR_MARGIN: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Independent brute force: (min, max) objective over all assignments
/// meeting the demands.
fn brute_force(costs: &Matrix, demands: &[usize]) -> (f64, f64) {
    fn go(costs: &Matrix, row: usize, left: &mut [usize], acc: f64, best: &mut (f64, f64)) {
        if row == costs.rows() {
            best.0 = best.0.min(acc);
            best.1 = best.1.max(acc);
            return;
        }
        for k in 0..left.len() {
            if left[k] > 0 {
                left[k] -= 1;
                go(costs, row + 1, left, acc + costs[(row, k)], best);
                left[k] += 1;
            }
        }
    }
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    go(costs, 0, &mut demands.to_vec(), 0.0, &mut best);
    best
}

fn random_costs(m: usize, n: usize, rng: &mut Rng) -> Matrix {
    if rng.random_bool(0.3) {
        // Small integer grid, so ties are common.
        Matrix::from_fn(m, n, |_, _| rng.random_range(0..4) as f64)
    } else {
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }
}

fn random_demands(m: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut d = vec![0; n];
    for _ in 0..m {
        d[rng.random_range(0..n)] += 1;
    }
    d
}

fn objective(costs: &Matrix, a: &Assignment) -> f64 {
    a.experts().iter().enumerate().map(|(j, &k)| costs[(j, k)]).sum()
}

fn criterion_1() -> Outcome {
    let mut rng = rng_for(1, "acceptance/btp-feasibility");
    let mut bad = 0;
    for i in 0..1000 {
        let m = rng.random_range(1..=64);
        let n = rng.random_range(1..=m.min(8));
        let costs = random_costs(m, n, &mut rng);
        let demands = if i % 2 == 0 {
            DemandVector::balanced(m, n).unwrap()
        } else {
            DemandVector::new(random_demands(m, n, &mut rng), m).unwrap()
        };
        let a = solve_btp(&CostMatrix::new(costs).unwrap(), &demands).unwrap();
        let one_hot = a.to_one_hot();
        let rows_ok = one_hot.iter_rows().all(|r| {
            r.iter().all(|&v| v == 0.0 || v == 1.0) && r.iter().sum::<f64>() == 1.0
        });
        let cols: Vec<usize> = one_hot.col_sums().iter().map(|&s| s as usize).collect();
        if !rows_ok || cols != demands.as_slice() || a.len() != m {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("1000 instances, {bad} infeasible"))
}

fn criterion_2() -> Outcome {
    let mut rng = rng_for(2, "acceptance/btp-quality");
    let mut gaps = Vec::new();
    let mut below_opt = 0;
    for _ in 0..100 {
        let n = [2, 3, 4][rng.random_range(0..3)];
        let m = rng.random_range(n..=12);
        let costs = random_costs(m, n, &mut rng);
        let demands = DemandVector::balanced(m, n).unwrap();
        let a = solve_btp(&CostMatrix::new(costs.clone()).unwrap(), &demands).unwrap();
        let vam = objective(&costs, &a);
        let (opt, worst) = brute_force(&costs, demands.as_slice());
        if vam < opt - 1e-9 {
            below_opt += 1;
        }
        gaps.push(if worst > opt { (vam - opt) / (worst - opt) } else { 0.0 });
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max = gaps.iter().cloned().fold(0.0, f64::max);
    outcome(
        mean <= 0.10 && below_opt == 0,
        format!("mean normalized gap {mean:.4} (max {max:.4}), {below_opt} below optimum"),
    )
}

struct GradFixture {
    x: Matrix,
    feat: Matrix,
    y: Vec<usize>,
    selector: Mlp,
    experts: Vec<Mlp>,
    targets: Phase2Targets,
}

fn jitter_biases(m: &mut Mlp, rng: &mut Rng) {
    for l in m.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
}

fn grad_fixture(eta: f64) -> GradFixture {
    let arch = ArchConfig {
        input_dim: 5,
        classes: 3,
        feat_dim: 4,
        selector_hidden: 6,
        expert_hidden: vec![6, 5],
        ..Default::default()
    };
    let mut rng = rng_for(3, "acceptance/gradcheck");
    let mut d = Delegator::new(&arch, 2, 3).unwrap();
    let mut experts: Vec<Mlp> = (0..2)
        .map(|k| Expert::new(&arch.expert_dims(k), 3, k).unwrap().network)
        .collect();
    // Zero initial biases put a sample whose hidden layer is entirely dead
    // exactly on the next ReLU kink; check at a generic point instead.
    for m in std::iter::once(&mut d.expert_selector).chain(&mut experts) {
        jitter_biases(m, &mut rng);
    }
    let x = random_matrix(8, 5, &mut rng).map(|v| 2.0 * v);
    let feat = d.features(&x).unwrap();
    let y: Vec<usize> = (0..8).map(|j| j % 3).collect();
    let cfg = TrainConfig { n_experts: 2, eta, ..Default::default() };
    let fwd = phase2_forward(&d.expert_selector, &experts, &feat, &x).unwrap();
    let (targets, _) = train::phase2_targets(&fwd, &y, 0.5, &cfg).unwrap();
    GradFixture { x, feat, y, selector: d.expert_selector, experts, targets }
}

fn criterion_3() -> Outcome {
    let eta = 0.8;
    let f = grad_fixture(eta);
    let loss = |sel: &Mlp, experts: &[Mlp]| {
        let fwd = phase2_forward(sel, experts, &f.feat, &f.x)?;
        phase2_backward(sel, experts, &fwd, &f.y, &f.targets, eta)
    };

    // (a) selector through η·L_S, experts fixed.
    let mut sel = vec![f.selector.clone()];
    let a = gradient_check(
        &mut sel,
        |ms| {
            let l = loss(&ms[0], &f.experts)?;
            Ok((eta * l.loss_s, vec![l.selector_grads]))
        },
        1e-6,
    )
    .unwrap();

    // (b) experts through L_T, selector fixed.
    let mut ex = f.experts.clone();
    let b = gradient_check(
        &mut ex,
        |ms| {
            let l = loss(&f.selector, ms)?;
            Ok((l.loss_t, l.expert_grads))
        },
        1e-6,
    )
    .unwrap();

    // (c) everything through η·L_S + L_T.
    let mut all = vec![f.selector.clone()];
    all.extend(f.experts.iter().cloned());
    let c = gradient_check(
        &mut all,
        |ms| {
            let l = loss(&ms[0], &ms[1..])?;
            let mut g = vec![l.selector_grads];
            g.extend(l.expert_grads);
            Ok((l.loss_total, g))
        },
        1e-6,
    )
    .unwrap();

    let worst = a.max_rel_error.max(b.max_rel_error).max(c.max_rel_error);
    outcome(
        worst < 1e-4,
        format!(
            "max rel err: selector {:.2e} ({} params), experts {:.2e} ({}), joint {:.2e} ({})",
            a.max_rel_error, a.params_checked, b.max_rel_error, b.params_checked, c.max_rel_error, c.params_checked
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = rng_for(4, "acceptance/identities");
    let (mut abar_err, mut w_err, mut v_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut balance_failures = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let m = n * rng.random_range(1..=8);
        let alpha = if rng.random_bool(0.1) { [0.0, 1.0][rng.random_range(0..2)] } else { rng.random_range(0.0..=1.0) };
        let mut experts: Vec<usize> = (0..m).map(|j| j % n).collect();
        experts.shuffle(&mut rng);
        let a = AssignmentMatrix::from_assignment(Assignment::new(experts, n).unwrap());

        let abar = smooth_assignment(&a, alpha).unwrap();
        for r in abar.abar.iter_rows() {
            abar_err = abar_err.max((r.iter().sum::<f64>() - 1.0).abs());
        }
        let w = expert_weights(&a, alpha).unwrap();
        for s in w.matrix().col_sums() {
            w_err = w_err.max((s - 1.0).abs());
        }

        let p = SelectionProbMatrix::new(softmax_rows(&random_matrix(m, n, &mut rng).map(|v| 4.0 * v))).unwrap();
        let want = vec![m / n; n];
        if generate_assignment(&p).unwrap().column_counts() != want {
            balance_failures += 1;
        }
        if m >= 2 {
            let tcp = TcpMatrix::new(Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0))).unwrap();
            let s = standardize_suitability(&tcp).unwrap();
            if generate_selection_labels(&s).unwrap().column_counts() != want {
                balance_failures += 1;
            }
            if n >= 2 {
                let v = selection_loss_weights(&s).unwrap();
                v_err = v_err.max((v.as_slice().iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    // Each row of Ā is α + (1−α)/n plus n−1 copies of (1−α)/n; in binary
    // floating point that sum lands within n rounding steps of 1.
    let abar_tol = 8.0 * f64::EPSILON;
    outcome(
        abar_err <= abar_tol && w_err <= 1e-9 && v_err <= 1e-9 && balance_failures == 0,
        format!(
            "max |rowsum(Ā)−1| {abar_err:.1e} (≤ {abar_tol:.1e}), max |colsum(W)−1| {w_err:.1e}, max |Σv−1| {v_err:.1e}, {balance_failures} unbalanced L/A"
        ),
    )
}

struct Bench {
    train: Dataset,
    val: Dataset,
    coe: Vec<(Bundle, f64)>,
}

fn bench_cfg(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig { mode, seed, n_experts: if mode == Mode::SingleExpert { 1 } else { 4 }, ..Default::default() }
}

fn accuracy_runs(cfg_for: impl Fn(u64) -> TrainConfig, train_set: &Dataset, val: &Dataset) -> Vec<(Bundle, f64)> {
    SEEDS
        .iter()
        .map(|&s| {
            let (b, _) = train::train(&cfg_for(s), train_set, Some(val)).unwrap();
            let acc = infer::full_accuracy(&b, val).unwrap();
            (b, acc)
        })
        .collect()
}

fn mean(xs: &[(Bundle, f64)]) -> f64 {
    xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64
}

fn accs(xs: &[(Bundle, f64)]) -> String {
    xs.iter().map(|x| format!("{:.4}", x.1)).collect::<Vec<_>>().join(" ")
}

fn criterion_5(bench: &Bench) -> Outcome {
    let bundle = &bench.coe[0].0;
    let data = &bench.val;
    let fd = bundle.delegator_profile().flops;
    let fe = bundle.expert_profiles()[0].flops;
    let taus = infer::tau_grid(20);
    let (curve, traces) = infer::sweep_traces(bundle, data, &taus).unwrap();
    let first = curve.rows[0];
    let last = curve.rows[curve.rows.len() - 1];
    let endpoints = first.mean_flops == fd as f64 && last.mean_flops == (fd + fe) as f64;
    let monotone = curve.rows.windows(2).all(|w| w[0].mean_flops <= w[1].mean_flops);
    let n = data.len() as u64;
    let mut identity = true;
    let mut max_rel = 0.0f64;
    for (row, tr) in curve.rows.iter().zip(&traces) {
        let exits = tr.iter().filter(|t| t.early_exit).count() as u64;
        let total: u64 = tr.iter().map(|t| t.accounted_flops).sum();
        identity &= total == n * fd + (n - exits) * fe;
        let closed = fd as f64 + (1.0 - row.exit_fraction) * fe as f64;
        max_rel = max_rel.max((row.mean_flops - closed).abs() / closed);
        identity &= *row == infer::row_from_traces(row.tau, tr, &data.labels);
    }
    let nested = traces.windows(2).all(|w| {
        w[1].iter().zip(&w[0]).all(|(hi, lo)| !hi.early_exit || lo.early_exit)
    });
    outcome(
        endpoints && monotone && identity && nested && max_rel <= 1e-12,
        format!(
            "F_D={fd} F_E={fe}: τ=0 mean {} τ=1 mean {}; monotone={monotone}; integer identity={identity}; float identity rel err {max_rel:.1e}; nested exits={nested}",
            first.mean_flops, last.mean_flops
        ),
    )
}

fn criterion_6(bench: &Bench) -> Outcome {
    let single = accuracy_runs(|s| bench_cfg(Mode::SingleExpert, s), &bench.train, &bench.val);
    let gate = accuracy_runs(|s| bench_cfg(Mode::GateValueSoft, s), &bench.train, &bench.val);
    let (c, s, g) = (mean(&bench.coe), mean(&single), mean(&gate));
    outcome(
        c - s >= SINGLE_MARGIN && c - g >= GATE_MARGIN,
        format!(
            "CoE {c:.4} [{}], single {s:.4} [{}], gate-value {g:.4} [{}]; CoE−single {:+.4} (need ≥ {SINGLE_MARGIN}), CoE−gate {:+.4} (need ≥ {GATE_MARGIN})",
            accs(&bench.coe),
            accs(&single),
            accs(&gate),
            c - s,
            c - g
        ),
    )
}

fn criterion_7(bench: &Bench) -> Outcome {
    let star = accuracy_runs(
        |s| TrainConfig { ablations: [Ablation::WgmStar].into(), ..bench_cfg(Mode::Coe, s) },
        &bench.train,
        &bench.val,
    );
    let (c, w) = (mean(&bench.coe), mean(&star));
    outcome(
        c - w >= WGM_STAR_MARGIN,
        format!("CoE {c:.4}, WGM★ {w:.4} [{}]; gap {:+.4} (need ≥ {WGM_STAR_MARGIN})", accs(&star), c - w),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_coe"))
        .args(args)
        .env("COE_QUIET", "1")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"epochs_phase1": 3, "epochs_phase2": 4, "seed": 7}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let bundle = out.to_str().unwrap();
        let metrics = dir.path().join(format!("metrics{run}.json"));
        let ok = run_cli(&["train", "--config", cfg, "--data", "coe4-synth", "--out", bundle])
            && run_cli(&["eval", "--bundle", bundle, "--data", "coe4-synth", "--tau", "0.5", "--out", metrics.to_str().unwrap()]);
        if !ok {
            return outcome(false, format!("run {run} failed"));
        }
        let read = |p: &Path| std::fs::read(p).unwrap();
        let mut files = vec![read(&metrics), read(&out.join("train_log.jsonl")), read(&out.join("summary.json"))];
        for name in ["extractor.bin", "predictor.bin", "selector.bin", "expert_0.bin", "expert_3.bin"] {
            files.push(read(&out.join(name)));
        }
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    outcome(same, format!("metrics, logs and checkpoints byte-identical: {same}"))
}

fn criterion_9(bench: &Bench) -> Outcome {
    let cfg = TrainConfig {
        arch: ArchConfig { expert_width_scales: HETEROGENEOUS_SCALES.to_vec(), ..Default::default() },
        ..bench_cfg(Mode::Coe, 0)
    };
    let (b, _) = train::train(&cfg, &bench.train, Some(&bench.val)).unwrap();
    let bins = infer::selection_vs_tcp_report(&b, &bench.val, 4, TcpBinning::Quantile).unwrap();
    let largest = b.expert_profiles().iter().enumerate().max_by_key(|(_, p)| p.flops).unwrap().0;
    let share = |i: usize| bins[i].probs.as_ref().map_or(0.0, |p| p[largest]);
    let (low, high) = (share(0), share(3));
    outcome(
        low > high,
        format!("largest expert (#{largest}) share: lowest-TCP quartile {low:.3}, highest {high:.3}"),
    )
}

fn main() {
    let budgets = [5, 30, 10, 5, 30, 600, 600, 300, 600].map(Duration::from_secs);
    let names = [
        "transport feasibility",
        "transport quality vs brute force",
        "gradient correctness",
        "smoothing/weight/label identities",
        "inference accounting",
        "specialization benefit",
        "WGM★ ablation direction",
        "determinism",
        "heterogeneous selection pattern",
    ];
    let mut failures = 0;
    let mut report = |i: usize, extra: Duration, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let took = t.elapsed() + extra;
        let in_time = took <= budgets[i];
        let pass = o.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "{} criterion {} ({}): {} [{:.1}s{}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            names[i],
            o.detail,
            took.as_secs_f64(),
            if in_time { String::new() } else { format!(", over {}s budget", budgets[i].as_secs()) }
        );
    };
    report(0, Duration::ZERO, &criterion_1);
    report(1, Duration::ZERO, &criterion_2);
    report(2, Duration::ZERO, &criterion_3);
    report(3, Duration::ZERO, &criterion_4);

    let t = Instant::now();
    let (train_set, val) = coe4_synth().unwrap();
    let coe = accuracy_runs(|s| bench_cfg(Mode::Coe, s), &train_set, &val);
    let bench = Bench { train: train_set, val, coe };
    // Criterion 6 owns the shared CoE runs for timing purposes.
    let shared = t.elapsed();

    report(4, Duration::ZERO, &|| criterion_5(&bench));
    report(5, shared, &|| criterion_6(&bench));
    report(6, Duration::ZERO, &|| criterion_7(&bench));
    report(7, Duration::ZERO, &criterion_8);
    report(8, Duration::ZERO, &|| criterion_9(&bench));

    println!("{} of {} criteria passed", names.len() - failures, names.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
