//! Trains the default FCN on a synthetic 10-class set, saves a checkpoint
//! and reloads it.

use compaudit::checkpoint::{read_model, write_model};
use compaudit::data::{make_split, synth_generate, SplitSizes, SynthParams};
use compaudit::nn::{train, FcnModel, TrainConfig};

fn main() -> compaudit::Result<()> {
    let data = synth_generate(&SynthParams {
        samples: 1200,
        features: 16,
        classes: 10,
        cluster_spread: 1.2,
        seed: 7,
    })?;
    let sizes = SplitSizes {
        victim_train: 300,
        victim_test: 300,
        shadow_train: 300,
        shadow_test: 300,
    };
    let split = make_split(&data, sizes, 1)?;
    let train_set = data.subset(&split.victim_train);
    let test_set = data.subset(&split.victim_test);

    let model = FcnModel::fcn(data.feature_dim(), data.class_count(), 3)?;
    println!("{} parameters, layers {:?}", model.parameter_count(), model.layer_sizes());
    let config = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let trained = train(&model, &train_set, None, &config, None)?;
    println!(
        "train accuracy {:.3}, test accuracy {:.3}",
        trained.accuracy(&train_set)?,
        trained.accuracy(&test_set)?
    );

    let path = std::env::temp_dir().join("compaudit-train-fcn.ckpt");
    write_model(&path, &trained)?;
    let back = read_model(&path)?;
    assert_eq!(back, trained);
    println!("checkpoint round trip ok: {}", path.display());
    Ok(())
}
