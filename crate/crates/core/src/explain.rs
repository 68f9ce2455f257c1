//! Ablation-CAM saliency maps and weight perturbation for visualisation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::flip_bit;
use crate::model::{Layer, ModelGraph};
use crate::tensor::{SeededRng, Tensor};

/// Scores with magnitude below this cannot normalise the ablation drops.
pub const SCORE_EPS: f32 = 1e-8;

/// Stream used by [`perturb_weights`].
pub const PERTURB_STREAM: u64 = 0xC0FF_EE00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub width: usize,
    pub height: usize,
    /// Upsampled map, row-major `height x width`, all values >= 0.
    pub values: Vec<f32>,
    /// Map at the conv layer's own resolution, before upsampling.
    pub coarse: Tensor,
    /// Per-feature-map weights `(y - y_k) / y`; empty for the unweighted
    /// fallback map.
    pub weights: Vec<f32>,
    pub target_class: usize,
    pub layer: usize,
    pub score: f32,
}

impl CamMap {
    pub fn max(&self) -> f32 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// Bilinear resize of one `h x w` plane with half-pixel centres
/// (`align_corners = false`).
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "plane size");
    let coord = |dst: usize, inp: usize, out: usize| -> (usize, usize, f32) {
        let s = ((dst as f32 + 0.5) * (inp as f32 / out as f32) - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, ly) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, lx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
            let bottom = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
            out.push(top * (1.0 - ly) + bottom * ly);
        }
    }
    out
}

fn single_image(model: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    if x.shape() == model.input_shape() {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        return x.clone().reshape(&shape);
    }
    if x.shape().first() == Some(&1) && &x.shape()[1..] == model.input_shape() {
        return Ok(x.clone());
    }
    Err(Error::Dimension(format!(
        "expected one image of shape {:?}, got {:?}",
        model.input_shape(),
        x.shape()
    )))
}

/// Ablation-CAM for `class` at conv layer `layer`.
///
/// The feature maps are the conv layer's affine outputs. Map `k` is weighted
/// by the relative drop in the class logit when that map is zeroed.
pub fn ablation_cam(model: &ModelGraph, x: &Tensor, class: usize, layer: usize) -> Result<CamMap> {
    if !matches!(model.layers().get(layer), Some(Layer::Conv2d { .. })) {
        return Err(Error::Argument(format!("layer {layer} is not a conv2d layer")));
    }
    if class >= model.classes() {
        return Err(Error::Index(format!("class {class} out of range for {} classes", model.classes())));
    }
    let x = single_image(model, x)?;
    let (height, width) = match model.input_shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("input shape {s:?} is not C x H x W"))),
    };
    let (logits, taps) = model.forward_with_taps(&x, &[layer])?;
    let maps = &taps[&layer];
    let [_, k, h, w] = *maps.shape() else {
        unreachable!("conv output is 4-D")
    };
    let plane = h * w;
    let score = logits.data()[class];

    let upsample = |coarse: Vec<f32>| -> Result<(Tensor, Vec<f32>)> {
        let values = bilinear_resize(&coarse, h, w, height, width);
        Ok((Tensor::new(vec![h, w], coarse)?, values))
    };

    if score.abs() < SCORE_EPS {
        let mut sum = vec![0f32; plane];
        for m in maps.data().chunks_exact(plane) {
            for (s, v) in sum.iter_mut().zip(m) {
                *s += v;
            }
        }
        let (coarse, values) = upsample(relu_vec(sum))?;
        let fallback = CamMap {
            width,
            height,
            values,
            coarse,
            weights: Vec::new(),
            target_class: class,
            layer,
            score,
        };
        return Err(Error::DegenerateScore {
            score,
            fallback: Box::new(fallback),
        });
    }

    let mut weights = Vec::with_capacity(k);
    for map in 0..k {
        let mut ablated = maps.clone();
        ablated.data_mut()[map * plane..(map + 1) * plane].fill(0.0);
        let yk = model.forward_from(layer, &ablated)?.data()[class];
        weights.push((score - yk) / score);
    }
    let (coarse, values) = upsample(weighted_map(maps.data(), plane, &weights))?;
    Ok(CamMap {
        width,
        height,
        values,
        coarse,
        weights,
        target_class: class,
        layer,
        score,
    })
}

/// `relu(sum_k weights[k] * maps[k])` over maps of `plane` elements each.
pub fn weighted_map(maps: &[f32], plane: usize, weights: &[f32]) -> Vec<f32> {
    let mut sum = vec![0f32; plane];
    for (m, &wk) in maps.chunks_exact(plane).zip(weights) {
        for (s, v) in sum.iter_mut().zip(m) {
            *s += wk * v;
        }
    }
    relu_vec(sum)
}

fn relu_vec(mut v: Vec<f32>) -> Vec<f32> {
    for x in &mut v {
        if *x < 0.0 || x.is_nan() {
            *x = 0.0;
        }
    }
    v
}

/// Last conv layer of the model, the default CAM target.
pub fn last_conv_layer(model: &ModelGraph) -> Option<usize> {
    model
        .layers()
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d { .. }))
}

/// Copy of `model` with `flips` single-bit flips at uniformly drawn parameter
/// elements. Bits in `exclude_bits` are never drawn. The same seed always
/// produces the same sites, so applying it twice restores the original.
pub fn perturb_weights(model: &ModelGraph, flips: usize, seed: u64, exclude_bits: &[u32]) -> Result<ModelGraph> {
    if flips == 0 {
        return Err(Error::Argument("need at least one flip".into()));
    }
    if let Some(b) = exclude_bits.iter().find(|&&b| b >= 32) {
        return Err(Error::Argument(format!("bit {b} out of range")));
    }
    let bits: Vec<u32> = (0..32).filter(|b| !exclude_bits.contains(b)).collect();
    if bits.is_empty() {
        return Err(Error::Argument("every bit is excluded".into()));
    }
    let mut out = model.clone();
    let mut params: Vec<&mut Tensor> = out.params_mut().collect();
    let total: usize = params.iter().map(|t| t.len()).sum();
    if total == 0 {
        return Err(Error::Argument("model has no parameters".into()));
    }
    let mut rng = SeededRng::new(seed, PERTURB_STREAM);
    for _ in 0..flips {
        let mut e = rng.index(total);
        let bit = bits[rng.index(bits.len())];
        for t in params.iter_mut() {
            if e < t.len() {
                let v = &mut t.data_mut()[e];
                *v = flip_bit(*v, bit);
                break;
            }
            e -= t.len();
        }
    }
    Ok(out)
}

fn to_bytes(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 && v.is_finite() {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary PGM (`P5`), scaled so `max` maps to 255.
pub fn encode_pgm(width: usize, height: usize, values: &[f32], max: f32) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(to_bytes(values, 0.0, max));
    out
}

/// PGM for one-channel images and PPM (`P6`) for three-channel ones,
/// min-max scaled. Input is `C x H x W` or `1 x C x H x W`.
pub fn encode_image(image: &Tensor) -> Result<(Vec<u8>, &'static str)> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Dimension(format!("image must be C x H x W, got {:?}", image.shape())));
        }
    };
    let finite = image.data().iter().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = finite.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let scaled = to_bytes(image.data(), lo, hi);
    match c {
        1 => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(scaled);
            Ok((out, "pgm"))
        }
        3 => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            let plane = h * w;
            for i in 0..plane {
                out.extend([scaled[i], scaled[plane + i], scaled[2 * plane + i]]);
            }
            Ok((out, "ppm"))
        }
        _ => Err(Error::Dimension(format!("cannot encode a {c}-channel image"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamSidecar {
    pub class: usize,
    pub class_name: Option<String>,
    pub layer: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub score: f32,
    pub weights: Vec<f32>,
    /// Value that maps to 255 in the CAM graymap.
    pub max_value: f32,
    pub cam: String,
    pub image: String,
    pub perturbed_flips: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Writes `<stem>_cam.pgm`, `<stem>_image.{pgm,ppm}` and `<stem>.json` into
/// `dir` and returns the three paths.
pub fn write_cam_artifacts(
    dir: &Path,
    stem: &str,
    cam: &CamMap,
    image: &Tensor,
    mut sidecar: CamSidecar,
) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam_path = dir.join(format!("{stem}_cam.pgm"));
    let max = cam.max();
    fs::write(&cam_path, encode_pgm(cam.width, cam.height, &cam.values, max)).map_err(|e| Error::io(&cam_path, e))?;
    let (img, ext) = encode_image(image)?;
    let img_path = dir.join(format!("{stem}_image.{ext}"));
    fs::write(&img_path, img).map_err(|e| Error::io(&img_path, e))?;
    sidecar.max_value = max;
    sidecar.cam = file_name(&cam_path);
    sidecar.image = file_name(&img_path);
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok([cam_path, img_path, json_path])
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    /// Input 1x2x2, a 1x1 conv producing maps `x` and `2x`, then a linear
    /// read-out whose class-0 score drops by 0.5 and 0.25 under ablation.
    fn two_map_model() -> ModelGraph {
        let conv = Layer::conv2d(
            Tensor::new(vec![2, 1, 1, 1], vec![1.0, 2.0]).unwrap(),
            Tensor::zeros(&[2]),
            1,
            0,
        )
        .unwrap();
        let w = Tensor::new(
            vec![2, 8],
            vec![
                0.25, 0.0, 0.5, 0.0, 0.125, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let lin = Layer::linear(w, Tensor::new(vec![2], vec![0.25, 0.0]).unwrap()).unwrap();
        ModelGraph::new("two-map", vec![1, 2, 2], vec![conv, Layer::Flatten, lin], HeadKind::Baseline).unwrap()
    }

    #[test]
    fn two_map_oracle() {
        let m = two_map_model();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let cam = ablation_cam(&m, &x, 0, 0).unwrap();
        assert_eq!(cam.score, 1.0);
        assert_eq!(cam.weights, vec![0.5, 0.25]);
        // relu(0.5 * x + 0.25 * 2x) = relu(x)
        let want = [1.0, 0.0, 0.5, 0.5];
        for (a, b) in cam.values.iter().zip(want) {
            assert!((a - b).abs() <= 1e-5);
        }
        assert_eq!((cam.width, cam.height), (2, 2));
    }

    #[test]
    fn degenerate_score_returns_fallback() {
        let m = two_map_model();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        match ablation_cam(&m, &x, 1, 0) {
            Err(Error::DegenerateScore { score, fallback }) => {
                assert_eq!(score, 0.0);
                // relu(x + 2x)
                assert_eq!(fallback.values, vec![3.0, 0.0, 1.5, 1.5]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_conv_layer_rejected() {
        let m = two_map_model();
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(ablation_cam(&m, &x, 0, 2), Err(Error::Argument(_))));
        assert_eq!(last_conv_layer(&m), Some(0));
    }

    #[test]
    fn bilinear_matches_half_pixel_oracle() {
        // 2 -> 4 along each axis: source coords -0.25, 0.25, 0.75, 1.25.
        let src = [0.0, 1.0, 2.0, 3.0];
        let out = bilinear_resize(&src, 2, 2, 4, 4);
        let axis = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let want = axis[x] + 2.0 * axis[y];
                assert!((out[y * 4 + x] - want).abs() < 1e-6, "{y},{x}");
            }
        }
        assert_eq!(bilinear_resize(&src, 2, 2, 2, 2), src.to_vec());
    }

    #[test]
    fn perturb_is_involutive_and_pure() {
        let m = two_map_model();
        let p = perturb_weights(&m, 1, 5, &[]).unwrap();
        let changed = p
            .params()
            .zip(m.params())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).collect::<Vec<_>>())
            .count();
        assert_eq!(changed, 1);
        let p = perturb_weights(&m, 40, 5, &[30, 31]).unwrap();
        let back = perturb_weights(&p, 40, 5, &[30, 31]).unwrap();
        assert!(back.params().zip(m.params()).all(|(a, b)| a.bits_eq(b)));
        assert!(perturb_weights(&m, 0, 5, &[]).is_err());
        assert!(perturb_weights(&m, 1, 5, &[32]).is_err());
    }

    #[test]
    fn pgm_encoding() {
        let bytes = encode_pgm(2, 1, &[0.0, 2.0], 2.0);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
        let (img, ext) = encode_image(&Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.5]).unwrap()).unwrap();
        assert_eq!(ext, "ppm");
        assert_eq!(img, b"P6\n1 1\n255\n\x00\xff\x80");
    }
}
