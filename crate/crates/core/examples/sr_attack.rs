//! Pairs the original with a pruned model and compares the four SR
//! feature constructions.

use compaudit::attacks::{kl_by_membership, run_sr, ModelPair, Population, SrConstruction};
use compaudit::compression::{finetune_compressed, prune_l1};
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
    let finetune = TrainConfig {
        max_epochs: 3,
        ..config.clone()
    };
    let build = |set, seed| -> compaudit::Result<(FcnModel, FcnModel)> {
        let original = train(&FcnModel::fcn(20, 30, seed)?, set, None, &TrainConfig { seed, ..config.clone() }, None)?;
        let pruned = finetune_compressed(&prune_l1(&original, 0.9)?, set, None, &finetune, None)?;
        Ok((original, pruned.model))
    };
    let (vo, vc) = build(&vtr, 1)?;
    let (so, sc) = build(&str_, 2)?;
    let vp = Population {
        members: &vtr,
        nonmembers: &vte,
    };
    let sp = Population {
        members: &str_,
        nonmembers: &ste,
    };

    let (km, kn) = kl_by_membership(&vo, &vc, vp)?;
    println!("KL(original || pruned): members {km:.4}, non-members {kn:.4}");
    for construction in SrConstruction::ALL {
        let (_, outcome) = run_sr(
            ModelPair {
                original: &so,
                compressed: &sc,
            },
            sp,
            ModelPair {
                original: &vo,
                compressed: &vc,
            },
            vp,
            construction,
            ClassifierKind::Rf,
            &MetaHyper::default(),
            0,
        )?;
        println!("{:<6} balanced accuracy {:.3}", construction.name(), outcome.balanced_accuracy());
    }
    Ok(())
}
