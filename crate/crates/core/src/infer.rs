//! Early-exit inference, threshold sweeps, and selection-pattern reports.
//!
//! The delegator runs on every sample. A sample whose maximum class
//! probability is strictly greater than `τ` keeps the rough prediction;
//! the rest are grouped by selected expert and each group is run as one
//! batch. Per-sample cost is `F_D` for an early exit and `F_D + F_E(k)`
//! otherwise, so the mean cost moves from `F_D` at `τ = 0` to `F_D + F_E` at
//! `τ = 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::models::{Bundle, BundleKind, Routing};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub mcp: f64,
    pub early_exit: bool,
    pub selected_expert: Option<usize>,
    pub rough_class: usize,
    pub final_class: usize,
    pub accounted_flops: u64,
    pub accounted_mac: u64,
}

/// Delegator outputs plus each sample's routed expert, computed once and
/// reused across thresholds.
#[derive(Debug, Clone)]
pub struct Routed {
    pub rough_class: Vec<usize>,
    pub mcp: Vec<f64>,
    /// Delegator class probability at the true label, when labels are known.
    pub selected: Vec<usize>,
    pub delegator_flops: u64,
    pub delegator_mac: u64,
    pub expert_flops: Vec<u64>,
    pub expert_mac: Vec<u64>,
}

fn require_trained(bundle: &Bundle) -> Result<()> {
    if bundle.manifest.phase_completed < 2 {
        return Err(Error::invalid(format!(
            "bundle is not fully trained (phase {} of 2 completed)",
            bundle.manifest.phase_completed
        )));
    }
    Ok(())
}

/// Delegator pass: rough class, MCP, routed expert.
pub fn route(bundle: &Bundle, x: &Matrix) -> Result<(Routed, Matrix)> {
    let d = bundle
        .delegator
        .as_ref()
        .ok_or_else(|| Error::invalid("routing needs a delegator"))?;
    let BundleKind::Coe { routing } = &bundle.manifest.kind else {
        return Err(Error::invalid("routing needs a CoE bundle"));
    };
    let out = d.forward(x)?;
    let rough_class: Vec<usize> = out.class_probs.iter_rows().map(argmax).collect();
    let mcp = out
        .class_probs
        .iter_rows()
        .zip(&rough_class)
        .map(|(r, &c)| r[c])
        .collect();
    let selected = match routing {
        Routing::Selector => out.selection_probs.iter_rows().map(argmax).collect(),
        Routing::ClassGroups(groups) => rough_class.iter().map(|&c| groups[c]).collect(),
    };
    let dp = bundle.delegator_profile();
    let ep = bundle.expert_profiles();
    Ok((
        Routed {
            rough_class,
            mcp,
            selected,
            delegator_flops: dp.flops,
            delegator_mac: dp.mac,
            expert_flops: ep.iter().map(|p| p.flops).collect(),
            expert_mac: ep.iter().map(|p| p.mac).collect(),
        },
        out.class_probs,
    ))
}

/// Sample indices per expert, in input order.
pub fn group_by_expert(selected: &[usize], include: impl Fn(usize) -> bool, n: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n];
    for (j, &k) in selected.iter().enumerate() {
        if include(j) {
            groups[k].push(j);
        }
    }
    groups
}

/// Runs each group through its expert as one batch and scatters the
/// predicted classes back to input positions.
fn refine(bundle: &Bundle, x: &Matrix, groups: &[Vec<usize>]) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; x.rows()];
    for (k, idx) in groups.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let probs = bundle.experts[k].forward(&x.select_rows(idx))?;
        for (r, &j) in idx.iter().enumerate() {
            out[j] = Some(argmax(probs.row(r)));
        }
    }
    Ok(out)
}

fn assemble(routed: &Routed, refined: &[Option<usize>], tau: f64) -> Vec<InferenceTrace> {
    (0..routed.mcp.len())
        .map(|j| {
            let mcp = routed.mcp[j];
            let rough = routed.rough_class[j];
            if mcp > tau {
                InferenceTrace {
                    mcp,
                    early_exit: true,
                    selected_expert: None,
                    rough_class: rough,
                    final_class: rough,
                    accounted_flops: routed.delegator_flops,
                    accounted_mac: routed.delegator_mac,
                }
            } else {
                let k = routed.selected[j];
                InferenceTrace {
                    mcp,
                    early_exit: false,
                    selected_expert: Some(k),
                    rough_class: rough,
                    final_class: refined[j].expect("non-exited sample was refined"),
                    accounted_flops: routed.delegator_flops + routed.expert_flops[k],
                    accounted_mac: routed.delegator_mac + routed.expert_mac[k],
                }
            }
        })
        .collect()
}

/// Predictions for a batch at threshold `tau`. For ensemble and
/// single-expert bundles `tau` is ignored and every expert runs.
pub fn predict(bundle: &Bundle, x: &Matrix, tau: f64) -> Result<Vec<InferenceTrace>> {
    require_trained(bundle)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau {tau} outside [0, 1]")));
    }
    if x.cols() != bundle.manifest.input_dim {
        return Err(Error::shape(format!("width {}", bundle.manifest.input_dim), x.cols()));
    }
    match bundle.manifest.kind {
        BundleKind::Coe { .. } => {
            let (routed, _) = route(bundle, x)?;
            let groups = group_by_expert(&routed.selected, |j| routed.mcp[j] <= tau, bundle.experts.len());
            let refined = refine(bundle, x, &groups)?;
            Ok(assemble(&routed, &refined, tau))
        }
        BundleKind::Ensemble | BundleKind::Single => experts_only_traces(bundle, x),
    }
}

fn experts_only_traces(bundle: &Bundle, x: &Matrix) -> Result<Vec<InferenceTrace>> {
    let n = bundle.experts.len();
    let mut mean = Matrix::zeros(x.rows(), bundle.manifest.classes);
    for e in &bundle.experts {
        let p = e.forward(x)?;
        for (o, v) in mean.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *o += v;
        }
    }
    mean.scale(1.0 / n as f64);
    let profiles = bundle.expert_profiles();
    let flops: u64 = profiles.iter().map(|p| p.flops).sum();
    let mac: u64 = profiles.iter().map(|p| p.mac).sum();
    Ok(mean
        .iter_rows()
        .map(|r| {
            let c = argmax(r);
            InferenceTrace {
                mcp: r[c],
                early_exit: false,
                selected_expert: None,
                rough_class: c,
                final_class: c,
                accounted_flops: flops,
                accounted_mac: mac,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub tau: f64,
    pub mean_flops: f64,
    pub accuracy: f64,
    pub exit_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub rows: Vec<BudgetRow>,
}

impl BudgetCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,mean_flops,accuracy,exit_fraction\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:?},{:?},{:?},{:?}", r.tau, r.mean_flops, r.accuracy, r.exit_fraction);
        }
        s
    }
}

/// One curve row from raw traces. Totals are summed as integers before the
/// single division, so a constant per-sample cost averages back exactly.
pub fn row_from_traces(tau: f64, traces: &[InferenceTrace], labels: &[usize]) -> BudgetRow {
    let n = traces.len() as f64;
    let total: u64 = traces.iter().map(|t| t.accounted_flops).sum();
    let exits = traces.iter().filter(|t| t.early_exit).count();
    let correct = traces
        .iter()
        .zip(labels)
        .filter(|(t, &y)| t.final_class == y)
        .count();
    BudgetRow {
        tau,
        mean_flops: total as f64 / n,
        accuracy: correct as f64 / n,
        exit_fraction: exits as f64 / n,
    }
}

/// Per-τ traces and curve. The delegator and each sample's selected expert
/// run once; each threshold only re-partitions.
pub fn sweep_traces(bundle: &Bundle, data: &Dataset, taus: &[f64]) -> Result<(BudgetCurve, Vec<Vec<InferenceTrace>>)> {
    require_trained(bundle)?;
    if taus.is_empty() {
        return Err(Error::invalid("sweep needs at least one threshold"));
    }
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("thresholds must lie in [0, 1]"));
    }
    if data.is_empty() {
        return Err(Error::invalid("sweep needs a non-empty dataset"));
    }
    let x = &data.features;
    let all_traces: Vec<Vec<InferenceTrace>> = match bundle.manifest.kind {
        BundleKind::Coe { .. } => {
            let (routed, _) = route(bundle, x)?;
            let groups = group_by_expert(&routed.selected, |_| true, bundle.experts.len());
            let refined = refine(bundle, x, &groups)?;
            taus.iter().map(|&t| assemble(&routed, &refined, t)).collect()
        }
        _ => {
            let t = experts_only_traces(bundle, x)?;
            taus.iter().map(|_| t.clone()).collect()
        }
    };
    let rows = taus
        .iter()
        .zip(&all_traces)
        .map(|(&t, tr)| row_from_traces(t, tr, &data.labels))
        .collect();
    Ok((BudgetCurve { rows }, all_traces))
}

pub fn sweep_tau(bundle: &Bundle, data: &Dataset, taus: &[f64]) -> Result<BudgetCurve> {
    sweep_traces(bundle, data, taus).map(|(c, _)| c)
}

/// `n + 1` evenly spaced thresholds from 0 to 1 inclusive.
pub fn tau_grid(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tau: f64,
    pub samples: usize,
    pub accuracy: f64,
    /// Delegator-only accuracy; equals `accuracy` for bundles without one.
    pub rough_accuracy: f64,
    pub exit_fraction: f64,
    pub mean_flops: f64,
    pub mean_mac: f64,
    pub delegator_flops: u64,
    pub expert_flops: Vec<u64>,
    pub expert_counts: Vec<usize>,
}

pub fn evaluate(bundle: &Bundle, data: &Dataset, tau: f64) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty dataset"));
    }
    let traces = predict(bundle, &data.features, tau)?;
    let row = row_from_traces(tau, &traces, &data.labels);
    let n = traces.len();
    let rough_correct = traces
        .iter()
        .zip(&data.labels)
        .filter(|(t, &y)| t.rough_class == y)
        .count();
    let mut expert_counts = vec![0; bundle.experts.len()];
    for t in &traces {
        if let Some(k) = t.selected_expert {
            expert_counts[k] += 1;
        }
    }
    let total_mac: u64 = traces.iter().map(|t| t.accounted_mac).sum();
    Ok(Metrics {
        tau,
        samples: n,
        accuracy: row.accuracy,
        rough_accuracy: rough_correct as f64 / n as f64,
        exit_fraction: row.exit_fraction,
        mean_flops: row.mean_flops,
        mean_mac: total_mac as f64 / n as f64,
        delegator_flops: bundle.delegator_profile().flops,
        expert_flops: bundle.expert_profiles().iter().map(|p| p.flops).collect(),
        expert_counts,
    })
}

/// Accuracy with no early exit.
pub fn full_accuracy(bundle: &Bundle, data: &Dataset) -> Result<f64> {
    evaluate(bundle, data, 1.0).map(|m| m.accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpBinning {
    /// Equal-width bins on `[0, 1]`.
    Uniform,
    /// Equal-count bins after sorting by TCP.
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcpBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Share of samples routed to each expert; `None` for an empty bin.
    pub probs: Option<Vec<f64>>,
}

fn shares(selected: impl Iterator<Item = usize>, n: usize) -> (usize, Option<Vec<f64>>) {
    let mut counts = vec![0usize; n];
    let mut total = 0;
    for k in selected {
        counts[k] += 1;
        total += 1;
    }
    if total == 0 {
        (0, None)
    } else {
        (total, Some(counts.iter().map(|&c| c as f64 / total as f64).collect()))
    }
}

/// Expert-selection shares as a function of the delegator's true-class
/// probability.
pub fn selection_vs_tcp_report(bundle: &Bundle, data: &Dataset, bins: usize, binning: TcpBinning) -> Result<Vec<TcpBin>> {
    require_trained(bundle)?;
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let (routed, class_probs) = route(bundle, &data.features)?;
    let n = bundle.experts.len();
    let tcp: Vec<f64> = data
        .labels
        .iter()
        .enumerate()
        .map(|(j, &y)| class_probs[(j, y)])
        .collect();
    let mut out = Vec::with_capacity(bins);
    match binning {
        TcpBinning::Uniform => {
            let mut members = vec![Vec::new(); bins];
            for (j, &t) in tcp.iter().enumerate() {
                let b = ((t * bins as f64) as usize).min(bins - 1);
                members[b].push(j);
            }
            for (b, idx) in members.iter().enumerate() {
                let (count, probs) = shares(idx.iter().map(|&j| routed.selected[j]), n);
                out.push(TcpBin {
                    lo: b as f64 / bins as f64,
                    hi: (b + 1) as f64 / bins as f64,
                    count,
                    probs,
                });
            }
        }
        TcpBinning::Quantile => {
            let mut order: Vec<usize> = (0..tcp.len()).collect();
            order.sort_by(|&a, &b| tcp[a].total_cmp(&tcp[b]).then(a.cmp(&b)));
            let len = order.len();
            for b in 0..bins {
                let idx = &order[b * len / bins..(b + 1) * len / bins];
                let (count, probs) = shares(idx.iter().map(|&j| routed.selected[j]), n);
                let (lo, hi) = match (idx.first(), idx.last()) {
                    (Some(&f), Some(&l)) => (tcp[f], tcp[l]),
                    _ => (f64::NAN, f64::NAN),
                };
                out.push(TcpBin { lo, hi, count, probs });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub count: usize,
    pub probs: Option<Vec<f64>>,
}

/// Expert-selection shares per rough-prediction class.
pub fn selection_vs_class_report(bundle: &Bundle, data: &Dataset) -> Result<Vec<ClassRow>> {
    require_trained(bundle)?;
    let (routed, _) = route(bundle, &data.features)?;
    let n = bundle.experts.len();
    Ok((0..bundle.manifest.classes)
        .map(|c| {
            let (count, probs) = shares(
                routed
                    .rough_class
                    .iter()
                    .zip(&routed.selected)
                    .filter(|(&rc, _)| rc == c)
                    .map(|(_, &k)| k),
                n,
            );
            ClassRow { class: c, count, probs }
        })
        .collect())
}

fn probs_csv(probs: &Option<Vec<f64>>, n: usize) -> String {
    match probs {
        Some(p) => p.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","),
        None => vec![""; n].join(","),
    }
}

fn expert_header(n: usize) -> String {
    (0..n).map(|k| format!("p_expert{k}")).collect::<Vec<_>>().join(",")
}

pub fn tcp_report_csv(bins: &[TcpBin], n: usize) -> String {
    let mut s = format!("tcp_lo,tcp_hi,count,{}\n", expert_header(n));
    for b in bins {
        let _ = writeln!(s, "{:?},{:?},{},{}", b.lo, b.hi, b.count, probs_csv(&b.probs, n));
    }
    s
}

pub fn class_report_csv(rows: &[ClassRow], n: usize) -> String {
    let mut s = format!("class,count,{}\n", expert_header(n));
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.class, r.count, probs_csv(&r.probs, n));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchConfig, Delegator, Expert};
    use crate::nn::random_matrix;
    use crate::seed::rng_for;

    fn bundle(n: usize, seed: u64) -> Bundle {
        let arch = ArchConfig { input_dim: 6, classes: 4, feat_dim: 8, ..Default::default() };
        let d = Delegator::new(&arch, n, seed).unwrap();
        let experts = (0..n).map(|k| Expert::new(&arch.expert_dims(k), seed, k).unwrap()).collect();
        Bundle::coe(d, experts, Routing::Selector, "coe", seed, 2).unwrap()
    }

    fn data(rows: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, "infer-test");
        let x = random_matrix(rows, 6, &mut rng).map(|v| 3.0 * v);
        let y = (0..rows).map(|j| j % 4).collect();
        Dataset::new(x, y, 4).unwrap()
    }

    #[test]
    fn endpoints() {
        let b = bundle(3, 1);
        let ds = data(50, 1);
        let fd = b.delegator_profile().flops;
        let fe = b.expert_profiles()[0].flops;
        let t0 = predict(&b, &ds.features, 0.0).unwrap();
        assert!(t0.iter().all(|t| t.early_exit && t.accounted_flops == fd));
        assert_eq!(row_from_traces(0.0, &t0, &ds.labels).mean_flops, fd as f64);
        let t1 = predict(&b, &ds.features, 1.0).unwrap();
        assert!(t1.iter().all(|t| !t.early_exit));
        assert_eq!(row_from_traces(1.0, &t1, &ds.labels).mean_flops, (fd + fe) as f64);
    }

    #[test]
    fn trace_invariants() {
        let b = bundle(3, 2);
        let ds = data(80, 2);
        let traces = predict(&b, &ds.features, 0.5).unwrap();
        let fd = b.delegator_profile().flops;
        let fe = b.expert_profiles();
        let mut non_exit = 0;
        for t in &traces {
            if t.early_exit {
                assert!(t.selected_expert.is_none());
                assert_eq!(t.final_class, t.rough_class);
                assert_eq!(t.accounted_flops, fd);
            } else {
                non_exit += 1;
                assert_eq!(t.accounted_flops, fd + fe[t.selected_expert.unwrap()].flops);
            }
        }
        let (routed, _) = route(&b, &ds.features).unwrap();
        let groups = group_by_expert(&routed.selected, |j| routed.mcp[j] <= 0.5, 3);
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), non_exit);
    }

    #[test]
    fn rejects_untrained_and_bad_tau() {
        let mut b = bundle(2, 3);
        let ds = data(5, 3);
        assert!(predict(&b, &ds.features, 1.5).is_err());
        b.manifest.phase_completed = 1;
        assert!(predict(&b, &ds.features, 0.5).is_err());
    }

    #[test]
    fn sweep_edges() {
        let b = bundle(2, 4);
        let ds = data(40, 4);
        assert!(sweep_tau(&b, &ds, &[]).is_err());
        assert!(sweep_tau(&b, &ds, &[0.5, 0.2]).is_err());
        let c = sweep_tau(&b, &ds, &tau_grid(10)).unwrap();
        assert_eq!(c.rows.first().unwrap().exit_fraction, 1.0);
        assert_eq!(c.rows.last().unwrap().exit_fraction, 0.0);
        assert!(c.rows.windows(2).all(|w| w[0].mean_flops <= w[1].mean_flops));
        assert_eq!(c.rows.last().unwrap().accuracy, full_accuracy(&b, &ds).unwrap());
        assert!(c.to_csv().starts_with("tau,mean_flops,accuracy,exit_fraction\n"));
    }

    #[test]
    fn single_expert_reports() {
        let b = bundle(1, 5);
        let ds = data(60, 5);
        for bin in selection_vs_tcp_report(&b, &ds, 5, TcpBinning::Uniform).unwrap() {
            if let Some(p) = bin.probs {
                assert_eq!(p, vec![1.0]);
            }
        }
        let rows = selection_vs_class_report(&b, &ds).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            if let Some(p) = r.probs {
                assert_eq!(p, vec![1.0]);
            }
        }
    }

    #[test]
    fn report_rows_sum_to_one() {
        let b = bundle(3, 6);
        let ds = data(90, 6);
        for binning in [TcpBinning::Uniform, TcpBinning::Quantile] {
            let bins = selection_vs_tcp_report(&b, &ds, 4, binning).unwrap();
            assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 90);
            for bin in bins.iter().filter_map(|b| b.probs.as_ref()) {
                assert!((bin.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let rows = selection_vs_class_report(&b, &ds).unwrap();
        for p in rows.iter().filter_map(|r| r.probs.as_ref()) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let csv = class_report_csv(&rows, 3);
        assert_eq!(csv.lines().count(), 5);
    }
}
