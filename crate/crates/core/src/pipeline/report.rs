use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::TprAtFpr;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Accuracy of one victim model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub seed: u64,
    /// `original` or a compression tag.
    pub target: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `train_accuracy - test_accuracy`.
    pub gap: f64,
}

/// Mean KL(original || compressed) on victim members and non-members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub seed: u64,
    pub target: String,
    pub member_mean: f64,
    pub nonmember_mean: f64,
}

/// Metrics of one (attack, target, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub attack: String,
    pub target: String,
    pub seed: u64,
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub tpr_at_fpr: Vec<TprAtFpr>,
    /// Balanced accuracy after shuffling membership labels.
    pub null_balanced_accuracy: Option<f64>,
    /// Attack scores this row was computed from, relative to the output
    /// directory.
    pub scores_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapMedian {
    pub fpr_cap: f64,
    pub tpr: f64,
}

/// Medians of one (attack, target) over the seeds that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub attack: String,
    pub target: String,
    pub runs: usize,
    pub median_balanced_accuracy: f64,
    pub median_auc: f64,
    pub median_tpr_at_fpr: Vec<CapMedian>,
    pub median_null_balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellFailure {
    pub stage: String,
    pub cell: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan_name: String,
    pub plan_hash: String,
    pub seeds: Vec<u64>,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub models: Vec<ModelRow>,
    pub kl: Vec<KlRow>,
    pub cells: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<CellFailure>,
}

/// Median of the values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AuditReport {
    /// Builds aggregates from `cells`; rows are sorted so the report does
    /// not depend on execution order.
    pub fn assemble(
        provenance: Provenance,
        mut models: Vec<ModelRow>,
        mut kl: Vec<KlRow>,
        mut cells: Vec<CellRow>,
        mut failures: Vec<CellFailure>,
    ) -> Self {
        models.sort_by(|a, b| (a.seed, &a.target).cmp(&(b.seed, &b.target)));
        kl.sort_by(|a, b| (a.seed, &a.target).cmp(&(b.seed, &b.target)));
        cells.sort_by(|a, b| (&a.attack, &a.target, a.seed).cmp(&(&b.attack, &b.target, b.seed)));
        failures.sort();

        let mut groups: BTreeMap<(&str, &str), Vec<&CellRow>> = BTreeMap::new();
        for c in &cells {
            groups.entry((&c.attack, &c.target)).or_default().push(c);
        }
        let aggregates = groups
            .into_iter()
            .map(|((attack, target), rows)| {
                let col = |f: &dyn Fn(&CellRow) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let caps = rows[0].tpr_at_fpr.iter().map(|t| t.fpr_cap).collect::<Vec<_>>();
                let nulls: Vec<f64> = rows.iter().filter_map(|r| r.null_balanced_accuracy).collect();
                AggregateRow {
                    attack: attack.to_string(),
                    target: target.to_string(),
                    runs: rows.len(),
                    median_balanced_accuracy: col(&|r| r.balanced_accuracy),
                    median_auc: col(&|r| r.auc),
                    median_tpr_at_fpr: caps
                        .iter()
                        .enumerate()
                        .map(|(i, &fpr_cap)| CapMedian {
                            fpr_cap,
                            tpr: col(&|r| r.tpr_at_fpr[i].tpr),
                        })
                        .collect(),
                    median_null_balanced_accuracy: (!nulls.is_empty()).then(|| median(&nulls)),
                }
            })
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            provenance,
            models,
            kl,
            cells,
            aggregates,
            failures,
        }
    }

    pub fn cell(&self, attack: &str, target: &str, seed: u64) -> Option<&CellRow> {
        self.cells
            .iter()
            .find(|c| c.attack == attack && c.target == target && c.seed == seed)
    }

    pub fn aggregate(&self, attack: &str, target: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.attack == attack && a.target == target)
    }

    /// Human-readable summary.
    pub fn render_text(&self) -> String {
        let p = &self.provenance;
        let mut s = String::new();
        let _ = writeln!(s, "audit report (schema {})", self.schema_version);
        if !p.plan_name.is_empty() {
            let _ = writeln!(s, "plan      {}", p.plan_name);
        }
        let _ = writeln!(s, "plan hash {}", p.plan_hash);
        let _ = writeln!(s, "seeds     {:?}", p.seeds);
        let _ = writeln!(s, "version   {}", p.tool_version);

        let _ = writeln!(s, "\nvictim models (median over seeds)");
        let _ = writeln!(s, "  {:<14} {:>8} {:>8} {:>8}", "target", "train", "test", "gap");
        let mut by_target: BTreeMap<&str, Vec<&ModelRow>> = BTreeMap::new();
        for m in &self.models {
            by_target.entry(&m.target).or_default().push(m);
        }
        for (target, rows) in by_target {
            let med = |f: fn(&ModelRow) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let _ = writeln!(
                s,
                "  {:<14} {:>8.4} {:>8.4} {:>8.4}",
                target,
                med(|r| r.train_accuracy),
                med(|r| r.test_accuracy),
                med(|r| r.gap)
            );
        }

        let _ = writeln!(s, "\nattacks (median over seeds)");
        let caps: Vec<String> = self
            .aggregates
            .first()
            .map(|a| a.median_tpr_at_fpr.iter().map(|c| format!("tpr@{}", c.fpr_cap)).collect())
            .unwrap_or_default();
        let _ = write!(s, "  {:<22} {:<30} {:>4} {:>8} {:>8}", "attack", "target", "runs", "bal_acc", "auc");
        for c in &caps {
            let _ = write!(s, " {c:>11}");
        }
        let _ = writeln!(s, " {:>8}", "null_ba");
        for a in &self.aggregates {
            let _ = write!(
                s,
                "  {:<22} {:<30} {:>4} {:>8.4} {:>8.4}",
                a.attack, a.target, a.runs, a.median_balanced_accuracy, a.median_auc
            );
            for c in &a.median_tpr_at_fpr {
                let _ = write!(s, " {:>11.4}", c.tpr);
            }
            match a.median_null_balanced_accuracy {
                Some(v) => {
                    let _ = writeln!(s, " {v:>8.4}");
                }
                None => {
                    let _ = writeln!(s, " {:>8}", "-");
                }
            }
        }

        if !self.kl.is_empty() {
            let _ = writeln!(s, "\nKL(original || compressed), median over seeds");
            let mut by_target: BTreeMap<&str, Vec<&KlRow>> = BTreeMap::new();
            for k in &self.kl {
                by_target.entry(&k.target).or_default().push(k);
            }
            for (target, rows) in by_target {
                let m = median(&rows.iter().map(|r| r.member_mean).collect::<Vec<_>>());
                let n = median(&rows.iter().map(|r| r.nonmember_mean).collect::<Vec<_>>());
                let _ = writeln!(s, "  {target:<14} members {m:.6}  non-members {n:.6}");
            }
        }

        if !self.failures.is_empty() {
            let _ = writeln!(s, "\nfailed cells");
            for f in &self.failures {
                let _ = writeln!(s, "  [{}] {}: {}", f.stage, f.cell, f.message);
            }
        }
        s
    }

    /// Writes `report.json`, `report.txt` and the CSV tables into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        crate::checkpoint::write_json(dir.join("report.json"), self)?;
        std::fs::write(dir.join("report.txt"), self.render_text())?;

        let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
        let caps: Vec<f64> = self
            .cells
            .first()
            .map(|c| c.tpr_at_fpr.iter().map(|t| t.fpr_cap).collect())
            .unwrap_or_default();
        let mut header = vec!["attack", "target", "seed", "balanced_accuracy", "auc"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(caps.iter().map(|c| format!("tpr_at_fpr_{c}")));
        header.push("null_balanced_accuracy".into());
        header.push("scores_path".into());
        w.write_record(&header)?;
        for c in &self.cells {
            let mut row = vec![
                c.attack.clone(),
                c.target.clone(),
                c.seed.to_string(),
                c.balanced_accuracy.to_string(),
                c.auc.to_string(),
            ];
            row.extend(c.tpr_at_fpr.iter().map(|t| t.tpr.to_string()));
            row.push(c.null_balanced_accuracy.map(|v| v.to_string()).unwrap_or_default());
            row.push(c.scores_path.clone());
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("aggregates.csv"))?;
        let mut header = vec!["attack", "target", "runs", "median_balanced_accuracy", "median_auc"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(caps.iter().map(|c| format!("median_tpr_at_fpr_{c}")));
        header.push("median_null_balanced_accuracy".into());
        w.write_record(&header)?;
        for a in &self.aggregates {
            let mut row = vec![
                a.attack.clone(),
                a.target.clone(),
                a.runs.to_string(),
                a.median_balanced_accuracy.to_string(),
                a.median_auc.to_string(),
            ];
            row.extend(a.median_tpr_at_fpr.iter().map(|t| t.tpr.to_string()));
            row.push(a.median_null_balanced_accuracy.map(|v| v.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("models.csv"))?;
        w.write_record(["seed", "target", "train_accuracy", "test_accuracy", "gap"])?;
        for m in &self.models {
            w.write_record([
                m.seed.to_string(),
                m.target.clone(),
                m.train_accuracy.to_string(),
                m.test_accuracy.to_string(),
                m.gap.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("kl.csv"))?;
        w.write_record(["seed", "target", "member_mean", "nonmember_mean"])?;
        for k in &self.kl {
            w.write_record([
                k.seed.to_string(),
                k.target.clone(),
                k.member_mean.to_string(),
                k.nonmember_mean.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
