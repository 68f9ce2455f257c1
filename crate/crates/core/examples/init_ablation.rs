//! Random vs text-initialised projection heads: last-layer reliability,
//! value ranges and accuracy for each init mode.
//!
//! Usage: `cargo run --release --example init_ablation -- [arch] [epochs] [seeds] [n]`
//! with MNIST under `$FAULTLINE_DATA/mnist` (or `data/mnist`).

use std::path::PathBuf;

use faultline::data::{load_mnist, Split, DATA_ENV};
use faultline::inject::{run_campaign, CampaignConfig};
use faultline::metrics::{range_profile, ratio};
use faultline::recipe::{Arch, Recipe, Variant};
use faultline::textinit::{synth_embeddings, InitMode};
use faultline::train::{evaluate, sgd_train, TrainConfig};

const LATENT: usize = 256;

fn main() -> faultline::Result<()> {
    let mut args = std::env::args().skip(1);
    let arch: Arch = args.next().as_deref().unwrap_or("mlp-s").parse()?;
    let epochs: usize = args.next().map_or(2, |s| s.parse().expect("epochs"));
    let seeds: u64 = args.next().map_or(1, |s| s.parse().expect("seeds"));
    let n: usize = args.next().map_or(4096, |s| s.parse().expect("n"));

    let root = std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let train = load_mnist(root.join("mnist"), Split::Train)?;
    let test = load_mnist(root.join("mnist"), Split::Test)?;

    for seed in 0..seeds {
        let table = synth_embeddings(train.class_names(), 4, LATENT, seed)?;
        let mut cfg = TrainConfig::desk_default(seed);
        cfg.epochs = epochs;
        let variants = [
            Variant::Baseline,
            Variant::Split { latent: LATENT, init: InitMode::Random },
            Variant::Split { latent: LATENT, init: InitMode::SinglePrompt },
            Variant::Split { latent: LATENT, init: InitMode::MultiDescription },
        ];
        let mut last_means = Vec::new();
        for variant in variants {
            let recipe = Recipe { arch, variant };
            let id = recipe.model_id(seed);
            let model = recipe.build(train.sample_shape(), 10, Some(&table), seed)?;
            let (model, _) = sgd_train(&model, &train, &cfg)?;
            let acc = evaluate(&model, &test)?.accuracy;
            let fused = match variant {
                Variant::Baseline => model,
                _ => model.fuse_head()?,
            };
            let mut campaign = CampaignConfig::new(&id, n, seed);
            campaign.layers = None;
            let report = run_campaign(&fused, &test, &campaign)?;
            let ranges = range_profile(&fused, &test)?;
            let last = report.last().expect("last layer").clone();
            println!(
                "{id:32} acc {acc:.4}  last dloss {:.5} mismatch {:.4}  last max|a| {:.2} mean|a| {:.3}",
                last.mean_dloss,
                last.mismatch_rate,
                ranges.last().unwrap().max_abs,
                ranges.last().unwrap().mean_abs,
            );
            for l in &report.layers {
                println!("    layer {:2} dloss {:.5} mismatch {:.4}", l.layer, l.mean_dloss, l.mismatch_rate);
            }
            last_means.push(last.mean_dloss);
        }
        for (name, i) in [("single-prompt", 2), ("multi-description", 3)] {
            match ratio(last_means[1], last_means[i]) {
                Ok(r) => println!("seed {seed}: random / {name} = {r:.3}"),
                Err(e) => println!("seed {seed}: random / {name}: {e}"),
            }
        }
    }
    Ok(())
}
