//! Metrics on a hand-written score set, plus the ROC as CSV.

use compaudit::metrics::{balanced_accuracy, roc_auc, roc_curve, tpr_at_fpr, AttackScoreSet};

fn main() -> compaudit::Result<()> {
    let scores = AttackScoreSet::new(
        vec![0.95, 0.9, 0.8, 0.7, 0.55, 0.4],
        vec![0.85, 0.6, 0.5, 0.3, 0.2, 0.1],
    )?;
    println!("balanced accuracy at 0.5: {:.3}", balanced_accuracy(&scores, 0.5));
    println!("AUC: {:.4}", roc_auc(&scores));
    for cap in [0.0, 0.2, 0.5] {
        let t = tpr_at_fpr(&scores, cap);
        println!(
            "TPR at FPR <= {cap}: {:.3}{}",
            t.tpr,
            if t.small_sample { " (too few non-members)" } else { "" }
        );
    }
    let curve = roc_curve(&scores);
    println!("trapezoid area {:.4}", curve.area());
    curve.write_csv(std::io::stdout().lock())?;
    Ok(())
}
