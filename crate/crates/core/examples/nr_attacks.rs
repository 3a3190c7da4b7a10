//! Single-model attacks: calibrated loss and modified-entropy thresholds
//! and a shadow-trained meta-classifier.

use compaudit::attacks::{run_nr_metric, run_nr_training, NrMetric, Population};
use compaudit::data::{make_split, synth_generate, SplitSizes, SynthParams};
use compaudit::meta::{ClassifierKind, MetaHyper};
use compaudit::nn::{train, FcnModel, TrainConfig};

fn main() -> compaudit::Result<()> {
    let data = synth_generate(&SynthParams {
        samples: 1600,
        features: 20,
        classes: 30,
        cluster_spread: 1.5,
        seed: 5,
    })?;
    let split = make_split(
        &data,
        SplitSizes {
            victim_train: 400,
            victim_test: 400,
            shadow_train: 400,
            shadow_test: 400,
        },
        0,
    )?;
    let [vtr, vte, str_, ste] = split.components().map(|ix| data.subset(ix));
    let config = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let fit = |set, seed| -> compaudit::Result<FcnModel> {
        let init = FcnModel::fcn(20, 30, seed)?;
        train(&init, set, None, &TrainConfig { seed, ..config.clone() }, None)
    };
    let victim = fit(&vtr, 1)?;
    let shadow = fit(&str_, 2)?;
    let vp = Population {
        members: &vtr,
        nonmembers: &vte,
    };
    let sp = Population {
        members: &str_,
        nonmembers: &ste,
    };

    for metric in [NrMetric::Loss, NrMetric::ModifiedEntropy] {
        let (threshold, outcome) = run_nr_metric(metric, &shadow, sp, &victim, vp)?;
        println!(
            "nr-{:<6} tau {:.4}  balanced accuracy {:.3}",
            metric.name(),
            threshold.tau,
            outcome.balanced_accuracy()
        );
    }
    let (_, outcome) = run_nr_training(true, ClassifierKind::Rf, &MetaHyper::default(), 0, &shadow, sp, &victim, vp)?;
    let s = outcome.summary(&[0.01]);
    println!("nr-train-label-rf balanced accuracy {:.3}, AUC {:.3}", s.balanced_accuracy, s.auc);
    Ok(())
}
