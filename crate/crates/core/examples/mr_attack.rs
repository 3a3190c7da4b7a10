//! Aggregates several pruning levels with both multi-model adversaries.

use compaudit::attacks::{run_mr, Adversary, MrConfig, MrSide, Population, RankedModel};
use compaudit::compression::{finetune_compressed, prune_l1, CompressedModel};
use compaudit::data::{make_split, synth_generate, SplitSizes, SynthParams, TabularDataset};
use compaudit::meta::ClassifierKind;
use compaudit::nn::{train, FcnModel, TrainConfig};

const LEVELS: [f64; 3] = [0.6, 0.8, 0.9];

fn build(set: &TabularDataset, seed: u64) -> compaudit::Result<(FcnModel, Vec<CompressedModel>)> {
    let config = TrainConfig {
        max_epochs: 30,
        seed,
        ..TrainConfig::default()
    };
    let original = train(&FcnModel::fcn(20, 30, seed)?, set, None, &config, None)?;
    let finetune = TrainConfig {
        max_epochs: 3,
        ..config
    };
    let compressed = LEVELS
        .iter()
        .map(|&s| finetune_compressed(&prune_l1(&original, s)?, set, None, &finetune, None))
        .collect::<compaudit::Result<_>>()?;
    Ok((original, compressed))
}

fn ranked(models: &[CompressedModel]) -> Vec<RankedModel<'_>> {
    models
        .iter()
        .map(|c| RankedModel {
            model: &c.model,
            degree: c.degree_tag(),
        })
        .collect()
}

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
    let (vo, vc) = build(&vtr, 1)?;
    let (so, sc) = build(&str_, 2)?;
    let shadow = MrSide {
        original: Some(&so),
        compressed: ranked(&sc),
        population: Population {
            members: &str_,
            nonmembers: &ste,
        },
    };
    let victim = MrSide {
        original: Some(&vo),
        compressed: ranked(&vc),
        population: Population {
            members: &vtr,
            nonmembers: &vte,
        },
    };
    for adversary in [Adversary::Adv1, Adversary::Adv2] {
        let config = MrConfig {
            adversary,
            sr_kind: ClassifierKind::Rf,
            ..MrConfig::default()
        };
        let run = run_mr(&config, &shadow, &victim, 0)?;
        println!(
            "{adversary:?}: meta-classifier on {} features, balanced accuracy {:.3}",
            run.meta.feature_dim(),
            run.outcome.balanced_accuracy()
        );
    }
    Ok(())
}
