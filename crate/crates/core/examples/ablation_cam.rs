//! Ablation-CAM for one MNIST test image, clean and with weight bit flips.
//!
//! Writes `cam_out/` with PGM maps and JSON sidecars. MNIST is read from
//! `$FAULTLINE_DATA/mnist` (or `data/mnist`).

use std::path::{Path, PathBuf};

use faultline::data::{load_mnist, Split, DATA_ENV};
use faultline::explain::{ablation_cam, last_conv_layer, perturb_weights, write_cam_artifacts, CamSidecar};
use faultline::model::{HeadSpec, ModelGraph};
use faultline::tensor::SeededRng;
use faultline::train::{sgd_train, TrainConfig};
use faultline::Error;

fn main() -> faultline::Result<()> {
    let root = std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let train = load_mnist(root.join("mnist"), Split::Train)?.take(4000);
    let test = load_mnist(root.join("mnist"), Split::Test)?;
    let mut rng = SeededRng::new(0, 0);
    let model = ModelGraph::cnn_s(&[1, 28, 28], 10, HeadSpec::Baseline, &mut rng)?;
    let mut cfg = TrainConfig::desk_default(0);
    cfg.epochs = 2;
    let (model, _) = sgd_train(&model, &train, &cfg)?;
    let layer = last_conv_layer(&model).expect("cnn-s has conv layers");
    let (image, label) = test.sample(0)?;

    let perturbed = perturb_weights(&model, 20, 0, &[30, 31])?;
    for (stem, m, flips) in [("clean", &model, None), ("perturbed", &perturbed, Some(20))] {
        let cam = match ablation_cam(m, &image, label, layer) {
            Ok(cam) => cam,
            Err(Error::DegenerateScore { fallback, .. }) => *fallback,
            Err(e) => return Err(e),
        };
        println!("{stem}: score {:.3}, top weights {:?}", cam.score, &cam.weights[..4]);
        let sidecar = CamSidecar {
            class: label,
            class_name: Some(test.class_names()[label].clone()),
            layer,
            seed: 0,
            width: cam.width,
            height: cam.height,
            score: cam.score,
            weights: cam.weights.clone(),
            max_value: 0.0,
            cam: String::new(),
            image: String::new(),
            perturbed_flips: flips,
            config_hash: None,
        };
        for p in write_cam_artifacts(Path::new("cam_out"), stem, &cam, &image, sidecar)? {
            println!("  wrote {}", p.display());
        }
    }
    Ok(())
}
