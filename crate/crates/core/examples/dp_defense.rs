//! Trains with DP-SGD at a few noise levels and measures the loss attack.

use compaudit::attacks::{run_nr_metric, NrMetric, Population};
use compaudit::data::{make_split, synth_generate, SplitSizes, SynthParams};
use compaudit::nn::{train_dpsgd, DpConfig, FcnModel, TrainConfig};

fn main() -> compaudit::Result<()> {
    let data = synth_generate(&SynthParams {
        samples: 1200,
        features: 20,
        classes: 30,
        cluster_spread: 1.5,
        seed: 8,
    })?;
    let split = make_split(
        &data,
        SplitSizes {
            victim_train: 300,
            victim_test: 300,
            shadow_train: 300,
            shadow_test: 300,
        },
        0,
    )?;
    let [vtr, vte, str_, ste] = split.components().map(|ix| data.subset(ix));
    let config = TrainConfig {
        learning_rate: 0.5,
        max_epochs: 30,
        ..TrainConfig::default()
    };
    for sigma in [0.0, 0.5, 1.0] {
        let dp = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: sigma,
            ..DpConfig::default()
        };
        let victim = train_dpsgd(&FcnModel::fcn(20, 30, 1)?, &vtr, None, &config, &dp, None)?;
        let shadow = train_dpsgd(&FcnModel::fcn(20, 30, 2)?, &str_, None, &config, &dp, None)?;
        let (_, outcome) = run_nr_metric(
            NrMetric::Loss,
            &shadow,
            Population {
                members: &str_,
                nonmembers: &ste,
            },
            &victim,
            Population {
                members: &vtr,
                nonmembers: &vte,
            },
        )?;
        println!(
            "sigma {sigma}: train {:.3} test {:.3} loss-attack BA {:.3}",
            victim.accuracy(&vtr)?,
            victim.accuracy(&vte)?,
            outcome.balanced_accuracy()
        );
    }
    Ok(())
}
