use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{PolicyKind, ResultRow};
use crate::error::{Error, Result};

/// Final-window statistics of one (policy, drift, λ) group across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub policy: PolicyKind,
    pub drift: f64,
    pub lambda: f64,
    pub seeds: usize,
    pub adi_mean: f64,
    pub adi_std: f64,
    pub orr_mean: f64,
    pub orr_std: f64,
    /// Percentage change of the mean relative to NOD at the same drift.
    pub adi_vs_nod_pct: f64,
    pub orr_vs_nod_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub window: usize,
    /// Ordered by drift, policy, λ.
    pub entries: Vec<ReportEntry>,
}

impl ComparisonReport {
    pub fn entry(&self, policy: PolicyKind, drift: f64, lambda: f64) -> Option<&ReportEntry> {
        self.entries
            .iter()
            .find(|e| e.policy == policy && e.drift == drift && e.lambda == lambda)
    }

    pub fn drifts(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.entries.iter().map(|e| e.drift).collect();
        d.dedup();
        d
    }

    /// The λ sweep at one drift: the IL entry as λ = 0 followed by the
    /// kl_based entries.
    pub fn lambda_sweep(&self, drift: f64) -> Vec<&ReportEntry> {
        let il = self
            .entries
            .iter()
            .filter(|e| e.drift == drift && e.policy == PolicyKind::Il);
        let kl = self
            .entries
            .iter()
            .filter(|e| e.drift == drift && e.policy == PolicyKind::KlBased);
        let mut out: Vec<&ReportEntry> = il.chain(kl).collect();
        out.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        out
    }

    /// Plain-text table, one line per entry.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<9} {:>5} {:>6} {:>5} {:>20} {:>20} {:>9} {:>9}\n",
            "policy", "drift", "lambda", "seeds", "ADI", "ORR", "ADI/NOD", "ORR/NOD"
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<9} {:>5} {:>6} {:>5} {:>11.3} ± {:<6.3} {:>11.4} ± {:<6.4} {:>+8.2}% {:>+8.2}%",
                e.policy.name(),
                e.drift,
                e.lambda,
                e.seeds,
                e.adi_mean,
                e.adi_std,
                e.orr_mean,
                e.orr_std,
                e.adi_vs_nod_pct,
                e.orr_vs_nod_pct
            );
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub(crate) type GroupKey = (u64, PolicyKind, u64);

/// `(seeds, adi mean, adi std, orr mean, orr std)`.
pub(crate) type GroupStats = (usize, f64, f64, f64, f64);

fn group_key(r: &ResultRow) -> GroupKey {
    // Non-negative floats order like their bit patterns.
    (r.drift.to_bits(), r.policy, r.lambda.to_bits())
}

/// Final-window statistics per (drift, policy, λ) group.
pub(crate) fn aggregate(rows: &[ResultRow], window: usize) -> BTreeMap<GroupKey, GroupStats> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<&ResultRow>>> = BTreeMap::new();
    for r in rows {
        groups.entry(group_key(r)).or_default().entry(r.seed).or_default().push(r);
    }
    let mut stats = BTreeMap::new();
    for (key, seeds) in &groups {
        let (mut adis, mut orrs) = (Vec::new(), Vec::new());
        for rows in seeds.values() {
            let mut rows = rows.clone();
            rows.sort_by_key(|r| r.episode);
            let tail = &rows[rows.len().saturating_sub(window.max(1))..];
            adis.push(tail.iter().map(|r| r.adi).sum::<f64>() / tail.len() as f64);
            orrs.push(tail.iter().map(|r| r.orr).sum::<f64>() / tail.len() as f64);
        }
        let (am, asd) = mean_std(&adis);
        let (om, osd) = mean_std(&orrs);
        stats.insert(*key, (seeds.len(), am, asd, om, osd));
    }
    stats
}

/// Aggregates rows into per-group means and standard deviations (sample,
/// across seeds) of each seed's last-`window`-episode average, and compares
/// them with NOD at the same drift.
pub fn report(rows: &[ResultRow], window: usize) -> Result<ComparisonReport> {
    if rows.is_empty() {
        return Err(Error::Report("no result rows".into()));
    }
    if window == 0 {
        return Err(Error::Report("window must be positive".into()));
    }
    let stats = aggregate(rows, window);
    let mut entries = Vec::with_capacity(stats.len());
    for (&(drift_bits, policy, lambda_bits), &(seeds, am, asd, om, osd)) in &stats {
        let drift = f64::from_bits(drift_bits);
        let base = stats
            .iter()
            .find(|((d, p, _), _)| *d == drift_bits && *p == PolicyKind::Nod)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Report(format!("missing NOD baseline at drift {drift}")))?;
        let pct = |x: f64, b: f64| -> Result<f64> {
            if b == 0.0 {
                return Err(Error::Report(format!("NOD baseline is zero at drift {drift}")));
            }
            Ok((x - b) / b * 100.0)
        };
        entries.push(ReportEntry {
            policy,
            drift,
            lambda: f64::from_bits(lambda_bits),
            seeds,
            adi_mean: am,
            adi_std: asd,
            orr_mean: om,
            orr_std: osd,
            adi_vs_nod_pct: pct(am, base.1)?,
            orr_vs_nod_pct: pct(om, base.3)?,
        });
    }
    Ok(ComparisonReport { window, entries })
}

/// λ > 0 with the highest mean ORR at `drift`, ties broken by mean ADI and
/// then by the smaller λ.
pub fn best_kl_lambda(report: &ComparisonReport, drift: f64) -> Option<f64> {
    report
        .entries
        .iter()
        .filter(|e| e.policy == PolicyKind::KlBased && e.drift == drift && e.lambda > 0.0)
        .max_by(|a, b| {
            a.orr_mean
                .total_cmp(&b.orr_mean)
                .then(a.adi_mean.total_cmp(&b.adi_mean))
                .then(b.lambda.total_cmp(&a.lambda))
        })
        .map(|e| e.lambda)
}
