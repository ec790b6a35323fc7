//! Command-line entry point.
//!
//! Every artifact is written atomically. Setting `COE_QUIET=1` suppresses
//! progress lines on stdout; results written with `--out` are unaffected.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde_json::json;

use crate::checkpoint::write_atomic;
use crate::data::{read_matrix_csv, DataSource, Split};
use crate::error::{Error, Result};
use crate::infer::{
    class_report_csv, evaluate, selection_vs_class_report, selection_vs_tcp_report, sweep_tau,
    tau_grid, tcp_report_csv, TcpBinning,
};
use crate::models::Bundle;
use crate::nn::{gradient_check, random_matrix, Mlp};
use crate::seed::rng_for;
use crate::train::{self, phase2_backward, phase2_forward, Phase2Targets, TrainConfig};
use crate::transport::{assignment_objective, solve_btp, CostMatrix, DemandVector};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "coe", version, about = "Delegator/expert training and early-exit inference")]
struct Cli {
    /// Root seed; overrides the config or spec seed where one applies.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData {
        /// Synthetic spec, e.g. `coe4-synth` or `coe4-synth:split=val`.
        #[arg(long, default_value = "coe4-synth")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a bundle.
    Train {
        /// JSON config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV path or synthetic spec.
        #[arg(long)]
        data: String,
        /// Held-out data for per-epoch validation; synthetic sources
        /// default to their own held-out split.
        #[arg(long)]
        val: Option<String>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics JSON for one threshold.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Budget curve CSV over a set of thresholds.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: String,
        /// Comma-separated ascending thresholds.
        #[arg(long, value_delimiter = ',', conflicts_with = "tau_grid")]
        taus: Option<Vec<f64>>,
        /// `N + 1` evenly spaced thresholds on [0, 1].
        #[arg(long)]
        tau_grid: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expert-selection reports as CSV.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum)]
        kind: ReportKind,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = Binning::Uniform)]
        binning: Binning,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a balanced transportation problem from a cost CSV.
    Solve {
        /// Numeric CSV, one row per sample and one column per expert.
        #[arg(long)]
        costs: PathBuf,
        /// Comma-separated demands; balanced by default.
        #[arg(long, value_delimiter = ',')]
        demands: Option<Vec<usize>>,
    },
    /// Finite-difference check of the joint selector/expert loss.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        experts: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.8)]
        eta: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportKind {
    Tcp,
    Class,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Binning {
    Uniform,
    Quantile,
}

fn quiet() -> bool {
    std::env::var("COE_QUIET").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { spec, out } => {
            let mut src = DataSource::parse(&spec)?;
            let DataSource::Synthetic { spec: s, .. } = &mut src else {
                return Err(Error::invalid(format!("{spec:?} is not a synthetic spec")));
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let ds = src.load(Split::All)?;
            ds.save_csv(&out)?;
            if !quiet() {
                println!("{}", json!({"samples": ds.len(), "dim": ds.dim(), "classes": ds.classes, "out": out}));
            }
            Ok(0)
        }
        Command::Train { config, data, val, out } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text)?
                }
                None => TrainConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let src = DataSource::parse(&data)?;
            let (train_set, held_out) = match &src {
                DataSource::Synthetic { split: Some(_), .. } => (src.load(Split::Train)?, None),
                _ => src.load_train_val()?,
            };
            let val_set = match val {
                Some(v) => Some(DataSource::parse(&v)?.load(Split::Val)?),
                None => held_out,
            };
            let (bundle, report) = train::train(&cfg, &train_set, val_set.as_ref())?;
            bundle.save(&out)?;
            let lines = report.to_json_lines()?;
            write_atomic(&out.join("train_log.jsonl"), lines.as_bytes())?;
            let mut summary = json!({
                "mode": cfg.mode.name(),
                "seed": cfg.seed,
                "n_experts": cfg.n_experts,
                "train_samples": train_set.len(),
                "delegator_flops": bundle.delegator_profile().flops,
                "expert_flops": bundle.expert_profiles().iter().map(|p| p.flops).collect::<Vec<_>>(),
            });
            if let Some(v) = &val_set {
                let m = evaluate(&bundle, v, 1.0)?;
                summary["val_accuracy"] = json!(m.accuracy);
                summary["val_rough_accuracy"] = json!(m.rough_accuracy);
            }
            let summary_text = serde_json::to_string_pretty(&summary)? + "\n";
            write_atomic(&out.join("summary.json"), summary_text.as_bytes())?;
            let cfg_text = serde_json::to_string_pretty(&cfg)? + "\n";
            write_atomic(&out.join("config.json"), cfg_text.as_bytes())?;
            if !quiet() {
                print!("{lines}");
                println!("{}", serde_json::to_string(&summary)?);
            }
            Ok(0)
        }
        Command::Eval { bundle, data, tau, out } => {
            let b = Bundle::load(&bundle)?;
            let ds = DataSource::parse(&data)?.load(Split::Val)?;
            let m = evaluate(&b, &ds, tau)?;
            emit(out.as_deref(), &(serde_json::to_string_pretty(&m)? + "\n"))?;
            Ok(0)
        }
        Command::Sweep { bundle, data, taus, tau_grid: grid, out } => {
            let b = Bundle::load(&bundle)?;
            let ds = DataSource::parse(&data)?.load(Split::Val)?;
            let taus = match (taus, grid) {
                (Some(t), _) => t,
                (None, Some(n)) => tau_grid(n),
                (None, None) => tau_grid(20),
            };
            let curve = sweep_tau(&b, &ds, &taus)?;
            emit(out.as_deref(), &curve.to_csv())?;
            Ok(0)
        }
        Command::Report { bundle, data, kind, bins, binning, out } => {
            let b = Bundle::load(&bundle)?;
            let ds = DataSource::parse(&data)?.load(Split::Val)?;
            let n = b.experts.len();
            let text = match kind {
                ReportKind::Tcp => {
                    let binning = match binning {
                        Binning::Uniform => TcpBinning::Uniform,
                        Binning::Quantile => TcpBinning::Quantile,
                    };
                    tcp_report_csv(&selection_vs_tcp_report(&b, &ds, bins, binning)?, n)
                }
                ReportKind::Class => class_report_csv(&selection_vs_class_report(&b, &ds)?, n),
            };
            emit(out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Solve { costs, demands } => {
            let c = CostMatrix::new(read_matrix_csv(&costs)?)?;
            let d = match demands {
                Some(v) => DemandVector::new(v, c.rows())?,
                None => DemandVector::balanced(c.rows(), c.cols())?,
            };
            let a = solve_btp(&c, &d)?;
            let objective = assignment_objective(&c, &a)?;
            println!(
                "{}",
                json!({"assignment": a.experts(), "column_counts": a.column_counts(), "objective": objective})
            );
            Ok(0)
        }
        Command::Gradcheck { samples, experts, classes, eta } => {
            let rel = joint_gradcheck(samples, experts, classes, eta, cli.seed.unwrap_or(0))?;
            let pass = rel < GRADCHECK_TOLERANCE;
            println!("{}", json!({"max_rel_error": rel, "tolerance": GRADCHECK_TOLERANCE, "pass": pass}));
            Ok(if pass { 0 } else { 1 })
        }
    }
}

/// Largest relative error of the analytic `η·L_S + L_T` gradient on a random
/// instance, with selection labels and expert weights computed once from the
/// initial parameters and then held fixed.
pub fn joint_gradcheck(samples: usize, experts: usize, classes: usize, eta: f64, seed: u64) -> Result<f64> {
    if experts < 2 || samples < experts || classes < 2 {
        return Err(Error::invalid("gradcheck needs experts >= 2, samples >= experts, classes >= 2"));
    }
    let mut rng = rng_for(seed, "gradcheck");
    let (d, feat_dim) = (5, 4);
    let x = random_matrix(samples, d, &mut rng);
    let feat = random_matrix(samples, feat_dim, &mut rng);
    let y: Vec<usize> = (0..samples).map(|j| j % classes).collect();
    let mut models = vec![Mlp::he_init(&[feat_dim, 6, experts], &mut rng)?];
    for _ in 0..experts {
        models.push(Mlp::he_init(&[d, 6, classes], &mut rng)?);
    }
    // Non-zero biases keep samples off the ReLU kinks, where central
    // differences and the subgradient disagree.
    for m in &mut models {
        for l in m.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let cfg = TrainConfig { n_experts: experts, eta, ..Default::default() };
    let fwd = phase2_forward(&models[0], &models[1..], &feat, &x)?;
    let (targets, _): (Phase2Targets, _) = train::phase2_targets(&fwd, &y, 0.5, &cfg)?;
    let report = gradient_check(
        &mut models,
        |ms| {
            let fwd = phase2_forward(&ms[0], &ms[1..], &feat, &x)?;
            let loss = phase2_backward(&ms[0], &ms[1..], &fwd, &y, &targets, eta)?;
            let mut grads = vec![loss.selector_grads];
            grads.extend(loss.expert_grads);
            Ok((loss.loss_total, grads))
        },
        1e-6,
    )?;
    Ok(report.max_rel_error)
}
