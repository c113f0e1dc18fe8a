//! Per-run CSV records, loss traces and the markdown summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use recon_core::metrics::{
    estimate_peak_memory, recovery_diffs, CompareAxis, Histogram, Pairing, RecoveryReport, RunKey,
};
use recon_core::model::{Granularity, ModelConfig};
use recon_core::recon::TraceRow;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{LabError, Result};

/// Granularity label of full-retraining rows.
pub const RETRAIN: &str = "retrain";

/// One finished sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub model: String,
    pub criterion: String,
    pub pattern: String,
    pub granularity: String,
    pub strategy: String,
    pub loss: String,
    pub lr: String,
    pub epochs: usize,
    pub seed: u64,
    pub ppl_dense: f64,
    pub ppl_pruned: f64,
    pub ppl_reconstructed: f64,
    pub recovery: Option<f64>,
    pub units: usize,
    pub steps: usize,
    /// Sum of the per-unit losses before training.
    pub initial_loss: f64,
    /// Sum of the per-unit losses after training.
    pub final_loss: f64,
    pub degenerate: usize,
    /// Pruned weights outside their masks, counted after pruning and after
    /// reconstruction.
    pub mask_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TraceRecord {
    unit: usize,
    label: String,
    epoch: usize,
    loss: f64,
    lr: f64,
}

/// Canonical spelling of a learning rate, shared by file names and keys.
pub fn format_lr(lr: f64) -> String {
    format!("{lr:e}")
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            model: self.model.clone(),
            pattern: self.pattern.clone(),
            criterion: self.criterion.clone(),
            granularity: self.granularity.clone(),
            strategy: self.strategy.clone(),
            loss: self.loss.clone(),
            lr: self.lr.clone(),
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn report(&self) -> RecoveryReport {
        RecoveryReport::new(
            self.key(),
            self.ppl_dense,
            self.ppl_pruned,
            self.ppl_reconstructed,
        )
    }

    pub fn is_retrain(&self) -> bool {
        self.granularity == RETRAIN
    }
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn run_path(out: &Path, fingerprint: &str) -> PathBuf {
    runs_dir(out).join(format!("{fingerprint}.csv"))
}

pub fn trace_path(out: &Path, fingerprint: &str) -> PathBuf {
    runs_dir(out).join(format!("{fingerprint}.trace.csv"))
}

fn csv_bytes<T: Serialize>(rows: &[T], path: &Path) -> Result<Vec<u8>> {
    let csv_err = |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| csv_err(e.into_error().into()))
}

/// Writes the trace, then the record; a record on disk marks a finished cell.
pub fn write_run(out: &Path, record: &RunRecord, trace: &[TraceRow]) -> Result<()> {
    let dir = runs_dir(out);
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let rows: Vec<TraceRecord> = trace
        .iter()
        .map(|t| TraceRecord {
            unit: t.unit,
            label: t.label.clone(),
            epoch: t.epoch,
            loss: t.loss,
            lr: t.lr,
        })
        .collect();
    let tp = trace_path(out, &record.fingerprint);
    write_atomic(&tp, &csv_bytes(&rows, &tp)?)?;
    let rp = run_path(out, &record.fingerprint);
    write_atomic(&rp, &csv_bytes(std::slice::from_ref(record), &rp)?)
}

pub fn read_run(path: &Path) -> Result<RunRecord> {
    let csv_err = |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = r.deserialize::<RunRecord>();
    match (rows.next(), rows.next()) {
        (Some(row), None) => row.map_err(csv_err),
        _ => Err(LabError::Config(format!(
            "{}: expected exactly one run row",
            path.display()
        ))),
    }
}

/// Every run record under `out/runs`, ordered by key.
pub fn read_runs(out: &Path) -> Result<Vec<RunRecord>> {
    let dir = runs_dir(out);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(LabError::io(&dir, e)),
    };
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| LabError::io(&dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".csv") && !name.ends_with(".trace.csv") {
            records.push(read_run(&path)?);
        }
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| {
        a.key()
            .cmp(&b.key())
            .then_with(|| a.fingerprint.cmp(&b.fingerprint))
    });
}

/// Sort position of a granularity label: finest first, retraining last.
fn granularity_rank(label: &str) -> (u8, Option<Granularity>, String) {
    match Granularity::parse(label) {
        Some(g) => (0, Some(g), String::new()),
        None => (1, None, label.to_string()),
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Mean recovery over seeds of one (granularity, strategy, loss, lr, epochs)
/// configuration; seeds with undefined recovery are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMean {
    pub granularity: String,
    pub strategy: String,
    pub loss: String,
    pub lr: String,
    pub epochs: usize,
    pub seeds: usize,
    pub mean_recovery: Option<f64>,
}

pub fn cell_means(records: &[RunRecord]) -> Vec<CellMean> {
    let mut cells: BTreeMap<(String, String, String, String, usize), (usize, Vec<f64>)> =
        BTreeMap::new();
    for r in records {
        let e = cells
            .entry((
                r.granularity.clone(),
                r.strategy.clone(),
                r.loss.clone(),
                r.lr.clone(),
                r.epochs,
            ))
            .or_default();
        e.0 += 1;
        e.1.extend(r.report().recovery);
    }
    cells
        .into_iter()
        .map(
            |((granularity, strategy, loss, lr, epochs), (seeds, recs))| CellMean {
                granularity,
                strategy,
                loss,
                lr,
                epochs,
                seeds,
                mean_recovery: mean(&recs),
            },
        )
        .collect()
}

/// The best (lr, epochs) cell among `cells`; the first one wins ties.
fn best<'a>(cells: impl Iterator<Item = &'a CellMean>) -> Option<&'a CellMean> {
    cells
        .filter(|c| c.mean_recovery.is_some())
        .fold(None, |acc: Option<&CellMean>, c| match acc {
            Some(a) if a.mean_recovery >= c.mean_recovery => Some(a),
            _ => Some(c),
        })
}

/// Granularities ordered by their best mean recovery, highest first.
pub fn granularity_ranking(records: &[RunRecord]) -> Vec<(String, Option<f64>)> {
    let means = cell_means(records);
    let grans: BTreeSet<(u8, Option<Granularity>, String)> = records
        .iter()
        .filter(|r| !r.is_retrain())
        .map(|r| granularity_rank(&r.granularity))
        .collect();
    let mut ranking: Vec<(String, Option<f64>)> = grans
        .into_iter()
        .map(|rank| {
            let label = rank.1.map_or(rank.2, |g| g.label());
            let b =
                best(means.iter().filter(|c| c.granularity == label)).and_then(|c| c.mean_recovery);
            (label, b)
        })
        .collect();
    ranking.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    ranking
}

const HIST_BINS: usize = 10;

fn write_diffs(md: &mut String, reports: &[RecoveryReport], axis: CompareAxis, a: &str, b: &str) {
    let name = match axis {
        CompareAxis::Strategy => "strategy",
        CompareAxis::Loss => "loss",
    };
    let _ = writeln!(md, "\n### {name}: {a} − {b}\n");
    let _ = writeln!(md, "| pairing | pairs | mean diff | min | max |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|");
    let mut identical = Vec::new();
    for (label, pairing) in [
        ("identical-config", Pairing::IdenticalConfig),
        ("best-per-model-sparsity", Pairing::BestPerModelSparsity),
    ] {
        let diffs: Vec<f64> = recovery_diffs(reports, axis, a, b, pairing)
            .iter()
            .map(|d| d.diff)
            .collect();
        let min = diffs.iter().copied().reduce(f64::min);
        let max = diffs.iter().copied().reduce(f64::max);
        let _ = writeln!(
            md,
            "| {label} | {} | {} | {} | {} |",
            diffs.len(),
            fmt_opt(mean(&diffs)),
            fmt_opt(min),
            fmt_opt(max)
        );
        if pairing == Pairing::IdenticalConfig {
            identical = diffs;
        }
    }
    if identical.is_empty() {
        let _ = writeln!(md, "\nNo valid identical-config pairs.");
        return;
    }
    let h = Histogram::new(&identical, -1.0, 1.0, HIST_BINS);
    let _ = writeln!(
        md,
        "\nIdentical-config histogram (edge bins absorb values outside [-1, 1]):\n"
    );
    let _ = writeln!(md, "| bin | count |");
    let _ = writeln!(md, "|---|---:|");
    for (i, c) in h.counts.iter().enumerate() {
        let (lo, hi) = h.bin_edges(i);
        let _ = writeln!(md, "| [{lo:+.1}, {hi:+.1}) | {c} |");
    }
}

fn write_group(md: &mut String, records: &[RunRecord], config: Option<&ModelConfig>) {
    let first = &records[0];
    let _ = writeln!(
        md,
        "## {} / {} / {}\n\n{} runs.\n",
        first.model,
        first.criterion,
        first.pattern,
        records.len()
    );

    let mut ppl: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for r in records {
        ppl.entry(r.seed).or_insert((r.ppl_dense, r.ppl_pruned));
    }
    let _ = writeln!(md, "| seed | ppl dense | ppl pruned |");
    let _ = writeln!(md, "|---:|---:|---:|");
    for (seed, (d, p)) in &ppl {
        let _ = writeln!(md, "| {seed} | {d:.4} | {p:.4} |");
    }

    let means = cell_means(records);
    let recon: Vec<&RunRecord> = records.iter().filter(|r| !r.is_retrain()).collect();
    let columns: BTreeSet<(String, String)> = recon
        .iter()
        .map(|r| (r.strategy.clone(), r.loss.clone()))
        .collect();
    let rows: BTreeSet<(u8, Option<Granularity>, String)> = recon
        .iter()
        .map(|r| granularity_rank(&r.granularity))
        .collect();
    if !recon.is_empty() {
        let _ = writeln!(
            md,
            "\n### Mean recovery over seeds (best lr, epochs per cell)\n"
        );
        let mut header = String::from("| granularity |");
        let mut rule = String::from("|---|");
        for (s, l) in &columns {
            let _ = write!(header, " {s}+{l} |");
            rule.push_str("---:|");
        }
        let _ = writeln!(md, "{header}\n{rule}");
        for row in &rows {
            let g = row.1.map_or(row.2.clone(), |g| g.label());
            let _ = write!(md, "| {g} |");
            for (s, l) in &columns {
                let cell = best(
                    means
                        .iter()
                        .filter(|c| c.granularity == g && &c.strategy == s && &c.loss == l),
                );
                match cell {
                    Some(c) => {
                        let _ = write!(
                            md,
                            " {} (lr {}, {} ep, {} seeds) |",
                            fmt_opt(c.mean_recovery),
                            c.lr,
                            c.epochs,
                            c.seeds
                        );
                    }
                    None => md.push_str(" n/a |"),
                }
            }
            md.push('\n');
        }

        let _ = writeln!(md, "\n### Granularity ranking by best mean recovery\n");
        let _ = writeln!(md, "| rank | granularity | mean recovery |");
        let _ = writeln!(md, "|---:|---|---:|");
        for (i, (g, v)) in granularity_ranking(records).iter().enumerate() {
            let _ = writeln!(md, "| {} | {g} | {} |", i + 1, fmt_opt(*v));
        }
    }

    let retrain: Vec<&CellMean> = means.iter().filter(|c| c.granularity == RETRAIN).collect();
    if !retrain.is_empty() {
        let _ = writeln!(md, "\n### Full retraining (cross-entropy)\n");
        let _ = writeln!(md, "| lr | epochs | seeds | mean recovery |");
        let _ = writeln!(md, "|---|---:|---:|---:|");
        for c in retrain {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                c.lr,
                c.epochs,
                c.seeds,
                fmt_opt(c.mean_recovery)
            );
        }
    }

    let reports: Vec<RecoveryReport> = recon.iter().map(|r| r.report()).collect();
    let strategies: BTreeSet<&str> = recon.iter().map(|r| r.strategy.as_str()).collect();
    let losses: BTreeSet<&str> = recon.iter().map(|r| r.loss.as_str()).collect();
    if strategies.len() > 1 || losses.len() > 1 {
        let _ = writeln!(md, "\n### Paired recovery differences");
        for (axis, values) in [
            (CompareAxis::Strategy, &strategies),
            (CompareAxis::Loss, &losses),
        ] {
            let v: Vec<&str> = values.iter().copied().collect();
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    write_diffs(md, &reports, axis, v[i], v[j]);
                }
            }
        }
    }

    if let Some(config) = config {
        let _ = writeln!(md, "\n### Estimated peak memory of the largest unit\n");
        let _ = writeln!(
            md,
            "| granularity | trainable params | activation floats | peak MiB |"
        );
        let _ = writeln!(md, "|---|---:|---:|---:|");
        for row in &rows {
            if let Some(Ok(e)) = row.1.map(|g| estimate_peak_memory(config, g)) {
                let mib = e.peak_bytes as f64 / (1024.0 * 1024.0);
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {mib:.3} |",
                    row.1.expect("parsed").label(),
                    e.trainable_params,
                    e.activation_floats
                );
            }
        }
    }
}

/// Markdown summary of `records`, grouped by (model, criterion, pattern).
/// The output depends only on the records and `config`.
pub fn render_summary(records: &[RunRecord], config: Option<&ModelConfig>) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut groups: BTreeMap<(String, String, String), Vec<RunRecord>> = BTreeMap::new();
    for r in sorted {
        groups
            .entry((r.model.clone(), r.criterion.clone(), r.pattern.clone()))
            .or_default()
            .push(r);
    }
    let mut md = String::from("# Reconstruction sweep summary\n\n");
    if groups.is_empty() {
        md.push_str("No runs.\n");
    }
    for records in groups.values() {
        write_group(&mut md, records, config);
        md.push('\n');
    }
    md
}

pub fn write_summary(
    out: &Path,
    records: &[RunRecord],
    config: Option<&ModelConfig>,
) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let path = out.join("summary.md");
    write_atomic(&path, render_summary(records, config).as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(g: &str, strategy: &str, lr: &str, seed: u64, rec: f64) -> RunRecord {
        RunRecord {
            fingerprint: format!("{g}-{strategy}-{lr}-{seed}"),
            model: "toy".into(),
            criterion: "wanda".into(),
            pattern: "unstructured-0.5".into(),
            granularity: g.into(),
            strategy: strategy.into(),
            loss: "mse".into(),
            lr: lr.into(),
            epochs: 20,
            seed,
            ppl_dense: 10.0,
            ppl_pruned: 20.0,
            ppl_reconstructed: 20.0 - 10.0 * rec,
            recovery: Some(rec),
            units: 1,
            steps: 1,
            initial_loss: 1.0,
            final_loss: 0.5,
            degenerate: 0,
            mask_violations: 0,
        }
    }

    #[test]
    fn mean_over_seeds_is_arithmetic_mean() {
        let rs = vec![
            record("half-block", "mp", "1e-5", 0, 0.2),
            record("half-block", "mp", "1e-5", 1, 0.6),
            record("half-block", "mp", "1e-4", 0, 0.5),
            record("half-block", "mp", "1e-4", 1, 0.5),
        ];
        let means = cell_means(&rs);
        let direct: Vec<f64> = rs.iter().map(|r| r.report().recovery.unwrap()).collect();
        let m = means.iter().find(|c| c.lr == "1e-5").unwrap();
        assert_eq!(m.mean_recovery, Some((direct[0] + direct[1]) / 2.0));
        assert_eq!(m.seeds, 2);
        assert_eq!(
            granularity_ranking(&rs),
            vec![("half-block".to_string(), Some(0.5))]
        );
    }

    #[test]
    fn ranking_orders_by_recovery() {
        let rs = vec![
            record("per-matrix", "mp", "1e-5", 0, 0.1),
            record("full-decoder", "mp", "1e-5", 0, 0.3),
            record("half-block", "mp", "1e-5", 0, 0.7),
        ];
        let names: Vec<String> = granularity_ranking(&rs).into_iter().map(|r| r.0).collect();
        assert_eq!(names, ["half-block", "full-decoder", "per-matrix"]);
    }

    #[test]
    fn summary_is_order_independent() {
        let mut rs = vec![
            record("per-matrix", "mp", "1e-5", 0, 0.1),
            record("half-block", "dp", "1e-5", 0, 0.3),
            record("half-block", "mp", "1e-5", 0, 0.7),
        ];
        let a = render_summary(&rs, None);
        rs.reverse();
        assert_eq!(a, render_summary(&rs, None));
        assert!(a.contains("strategy: dp − mp"));
        assert!(a.contains("| 1 | half-block | 0.7000 |"));
    }

    #[test]
    fn record_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record("blocks-2", "sp", "3e-5", 4, 0.123456789012345);
        r.ppl_reconstructed = 1.0 / 3.0;
        r.recovery = None;
        write_run(dir.path(), &r, &[]).unwrap();
        let back = read_runs(dir.path()).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn lr_spelling() {
        assert_eq!(format_lr(3e-5), "3e-5");
        assert_eq!(format_lr(0.0001), "1e-4");
    }
}
