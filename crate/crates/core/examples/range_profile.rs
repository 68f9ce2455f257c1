//! Per-layer activation ranges of a trained model, as `ranges.csv`.

use faultline::data::{blobs, BlobConfig, Split};
use faultline::metrics::{range_profile, ranges_csv};
use faultline::model::{HeadSpec, ModelGraph};
use faultline::tensor::SeededRng;
use faultline::train::{sgd_train, TrainConfig};

fn main() -> faultline::Result<()> {
    let blob = BlobConfig { classes: 3, samples: 600, dim: 20, std: 0.7, seed: 2 };
    let train = blobs(&blob, Split::Train)?;
    let test = blobs(&blob, Split::Test)?;
    let mut rng = SeededRng::new(2, 0);
    let model = ModelGraph::mlp_s(&[20], 3, HeadSpec::Baseline, &mut rng)?;
    let (model, _) = sgd_train(&model, &train, &TrainConfig::desk_default(2))?;
    let ranges = range_profile(&model, &test)?;
    print!("{}", ranges_csv(&[("mlp-s-baseline-s2", &ranges)]));
    Ok(())
}
