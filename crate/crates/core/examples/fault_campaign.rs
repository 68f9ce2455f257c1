//! Single-bit activation fault campaign on a small trained model, with the
//! split head fused before injection.
//!
//! `cargo run --release --example fault_campaign -- [n]`

use faultline::data::{blobs, BlobConfig, Split};
use faultline::inject::{run_campaign, CampaignConfig};
use faultline::metrics::{improvement_ratio, reliability_csv, Scope};
use faultline::recipe::{Arch, Recipe, Variant};
use faultline::textinit::{synth_embeddings, InitMode};
use faultline::train::{sgd_train, TrainConfig};

fn main() -> faultline::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(1024, |s| s.parse().expect("n"));
    let blob = BlobConfig { classes: 4, samples: 1000, dim: 32, std: 0.8, seed: 1 };
    let train = blobs(&blob, Split::Train)?;
    let test = blobs(&blob, Split::Test)?;
    let table = synth_embeddings(train.class_names(), 3, 16, 1)?;

    let mut reports = Vec::new();
    for variant in [Variant::Baseline, Variant::Split { latent: 16, init: InitMode::MultiDescription }] {
        let recipe = Recipe { arch: Arch::MlpS, variant };
        let id = recipe.model_id(1);
        let model = recipe.build(train.sample_shape(), 4, Some(&table), 1)?;
        let (model, _) = sgd_train(&model, &train, &TrainConfig::desk_default(1))?;
        let model = if variant == Variant::Baseline { model } else { model.fuse_head()? };
        let mut cfg = CampaignConfig::new(&id, n, 1);
        cfg.layers = None;
        reports.push((id, run_campaign(&model, &test, &cfg)?));
    }

    let rows: Vec<_> = reports.iter().map(|(id, r)| (id.as_str(), r)).collect();
    print!("{}", reliability_csv(&rows));
    for scope in [Scope::LastLayer, Scope::Overall] {
        match improvement_ratio(&reports[0].1, &reports[1].1, scope) {
            Ok(r) => println!("{scope:?} improvement: {r:.3}"),
            Err(e) => println!("{scope:?} improvement: {e}"),
        }
    }
    Ok(())
}
