//! Trains MLP-S with a baseline head and a text-initialised split head on
//! Gaussian blobs and compares accuracy and cost.

use faultline::data::{blobs, BlobConfig, Split};
use faultline::recipe::{Arch, Recipe, Variant};
use faultline::textinit::{synth_embeddings, InitMode};
use faultline::train::{evaluate, sgd_train_with, TrainConfig};

fn main() -> faultline::Result<()> {
    let blob = BlobConfig { classes: 5, samples: 2000, dim: 64, std: 1.0, seed: 0 };
    let train = blobs(&blob, Split::Train)?;
    let test = blobs(&blob, Split::Test)?;
    let table = synth_embeddings(train.class_names(), 4, 32, 0)?;
    let cfg = TrainConfig::desk_default(0);

    for variant in [Variant::Baseline, Variant::Split { latent: 32, init: InitMode::MultiDescription }] {
        let recipe = Recipe { arch: Arch::MlpS, variant };
        let model = recipe.build(train.sample_shape(), train.classes(), Some(&table), 0)?;
        let (model, _) = sgd_train_with(&model, &train, &cfg, |epoch, loss| {
            println!("  {} epoch {epoch} loss {loss:.4}", recipe.model_id(0));
        })?;
        let eval = evaluate(&model, &test)?;
        let cost = model.cost();
        println!(
            "{}: accuracy {:.4}, mean top2diff {:.4}, {} params, {} flops",
            recipe.model_id(0),
            eval.accuracy,
            eval.mean_top2diff,
            cost.params,
            cost.flops
        );
    }
    Ok(())
}
