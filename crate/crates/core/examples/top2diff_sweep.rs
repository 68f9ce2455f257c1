//! Accuracy when predictions with a top-2 probability gap below delta
//! (in percentage points) count as wrong.

use faultline::data::{blobs, BlobConfig, Split};
use faultline::metrics::{sweep_csv, top2diff_sweep};
use faultline::model::{HeadSpec, ModelGraph};
use faultline::tensor::SeededRng;
use faultline::train::{evaluate, sgd_train, TrainConfig};

fn main() -> faultline::Result<()> {
    let blob = BlobConfig { classes: 4, samples: 800, dim: 16, std: 1.2, seed: 3 };
    let train = blobs(&blob, Split::Train)?;
    let test = blobs(&blob, Split::Test)?;
    let mut rng = SeededRng::new(3, 0);
    let model = ModelGraph::mlp_s(&[16], 4, HeadSpec::Baseline, &mut rng)?;
    let (model, _) = sgd_train(&model, &train, &TrainConfig::desk_default(3))?;
    let eval = evaluate(&model, &test)?;
    println!("accuracy {:.4}, mean top2diff {:.4} (all samples {:.4})", eval.accuracy, eval.mean_top2diff, eval.mean_top2diff_all);
    let deltas: Vec<f64> = (0..=10).map(|i| 10.0 * i as f64).collect();
    let sweep = top2diff_sweep(&eval, &deltas)?;
    print!("{}", sweep_csv(&[("mlp-s-baseline-s3", &sweep)]));
    Ok(())
}
