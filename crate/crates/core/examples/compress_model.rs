//! Prunes, quantises and clusters a trained model, then fine-tunes under
//! each constraint.

use compaudit::compression::{
    cluster_weights, finetune_compressed, prune_l1, quantize_int8, QuantMode,
};
use compaudit::data::{synth_generate, SynthParams};
use compaudit::nn::{train, FcnModel, TrainConfig};

fn main() -> compaudit::Result<()> {
    let data = synth_generate(&SynthParams {
        samples: 600,
        features: 12,
        classes: 6,
        cluster_spread: 1.0,
        seed: 2,
    })?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (tr, te) = idx.split_at(400);
    let (train_set, test_set) = (data.subset(tr), data.subset(te));

    let config = TrainConfig {
        max_epochs: 25,
        ..TrainConfig::default()
    };
    let model = FcnModel::with_layers(&[12, 64, 32, 6], 0.1, 1)?;
    let original = train(&model, &train_set, None, &config, None)?;
    println!("original      test acc {:.3}", original.accuracy(&test_set)?);

    let finetune = TrainConfig {
        max_epochs: 3,
        ..config.clone()
    };
    let variants = vec![
        prune_l1(&original, 0.6)?,
        prune_l1(&original, 0.9)?,
        quantize_int8(&original, QuantMode::PostTraining)?,
        cluster_weights(&original, 4, 0)?,
        cluster_weights(&original, 16, 0)?,
    ];
    for cm in variants {
        let before = cm.model.accuracy(&test_set)?;
        let tuned = finetune_compressed(&cm, &train_set, None, &finetune, None)?;
        tuned.verify()?;
        println!(
            "{:<12}  test acc {before:.3} -> {:.3} after fine-tuning (degree {})",
            cm.kind.tag(),
            tuned.model.accuracy(&test_set)?,
            tuned.degree_tag()
        );
    }
    Ok(())
}
