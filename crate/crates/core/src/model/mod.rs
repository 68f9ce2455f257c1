//! Layer graphs for small classifiers.
//!
//! A [`ModelGraph`] is an ordered list of layers ending in one of two heads:
//!
//! * **baseline**: a single linear layer `F -> C`;
//! * **split**: a latent linear layer `F -> E` followed directly by a
//!   projection `E -> C`, with nothing in between. Because the composition is
//!   linear, [`ModelGraph::fuse_head`] can collapse it into one `F -> C` layer.
//!
//! Two reference backbones are provided: [`ModelGraph::mlp_s`] and
//! [`ModelGraph::cnn_s`].

mod checkpoint;
mod layer;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layer::{Layer, LayerKind, LayerSpec};
pub(crate) use layer::init_bound;

use crate::error::{Error, Result};
use crate::tensor::{matmul, numel, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Baseline,
    Split,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Baseline => "baseline",
            HeadKind::Split => "split",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(HeadKind::Baseline),
            "split" => Ok(HeadKind::Split),
            other => Err(Error::Argument(format!("unknown head kind `{other}`"))),
        }
    }
}

/// Head requested when building a reference architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSpec {
    Baseline,
    Split { latent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Penultimate feature width `F`.
    pub features: usize,
    /// Latent width `E`; `None` for baseline heads.
    pub latent: Option<usize>,
    /// Class count `C`.
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub params: u64,
    /// `2 * MACs` summed over conv and linear layers, per sample.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    arch: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    head: HeadKind,
    dims: HeadDims,
    shapes: Vec<Vec<usize>>,
    pub meta: ModelMeta,
}

impl ModelGraph {
    /// Validates shape composition and the head structure.
    pub fn new(arch: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer>, head: HeadKind) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind().name())))?;
            shapes.push(current.clone());
        }
        let dims = head_dims(&layers, head)?;
        Ok(Self {
            arch: arch.into(),
            input_shape,
            layers,
            head,
            dims,
            shapes,
            meta: ModelMeta::default(),
        })
    }

    /// `flatten -> linear(in, 256) -> relu -> head`.
    pub fn mlp_s(input_shape: &[usize], classes: usize, head: HeadSpec, rng: &mut SeededRng) -> Result<Self> {
        let inputs = numel(input_shape);
        let mut layers = vec![
            Layer::Flatten,
            Layer::linear_init(inputs, 256, rng),
            Layer::Relu,
        ];
        let kind = push_head(&mut layers, 256, classes, head, rng)?;
        Self::new("mlp-s", input_shape.to_vec(), layers, kind)
    }

    /// `conv(C->16, 3x3) -> relu -> maxpool2 -> conv(16->32, 3x3) -> relu ->
    /// maxpool2 -> flatten -> head`, unpadded, stride 1.
    pub fn cnn_s(input_shape: &[usize], classes: usize, head: HeadSpec, rng: &mut SeededRng) -> Result<Self> {
        let [cin, _, _] = *input_shape else {
            return Err(Error::Dimension(format!(
                "cnn-s expects a C x H x W input, got {input_shape:?}"
            )));
        };
        let mut layers = vec![
            Layer::conv2d_init(cin, 16, 3, 1, 0, rng),
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::conv2d_init(16, 32, 3, 1, 0, rng),
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::Flatten,
        ];
        let mut shape = input_shape.to_vec();
        for l in &layers {
            shape = l.output_shape(&shape)?;
        }
        let kind = push_head(&mut layers, shape[0], classes, head, rng)?;
        Self::new("cnn-s", input_shape.to_vec(), layers, kind)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to parameters; the layer structure stays fixed.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn dims(&self) -> HeadDims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn injectable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.injectable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn last_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Per-sample element count of layer `i`'s output.
    pub fn activation_len(&self, i: usize) -> usize {
        numel(&self.shapes[i])
    }

    /// Index of the latent layer of a split head.
    pub fn latent_layer(&self) -> Option<usize> {
        (self.head == HeadKind::Split).then(|| self.layers.len() - 2)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects B x {:?} input, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_hook(x, |_, _| {})
    }

    /// Runs the forward pass, calling `hook(i, output)` after every layer.
    /// The hook may modify the output in place; the rest of the pass consumes
    /// the modified tensor.
    pub fn forward_with_hook(&self, x: &Tensor, mut hook: impl FnMut(usize, &mut Tensor)) -> Result<Tensor> {
        self.check_input(x)?;
        let mut iter = self.layers.iter().enumerate();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut current = first.forward(x)?;
        hook(0, &mut current);
        for (i, layer) in iter {
            current = layer.forward(&current)?;
            hook(i, &mut current);
        }
        Ok(current)
    }

    /// Forward pass that also records the affine outputs of the `taps`
    /// layers. The logits are bitwise identical to [`ModelGraph::forward`].
    pub fn forward_with_taps(&self, x: &Tensor, taps: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        for &t in taps {
            if t >= self.layers.len() || !self.layers[t].injectable() {
                return Err(Error::Argument(format!("layer {t} is not injectable")));
            }
        }
        let mut recorded = BTreeMap::new();
        let logits = self.forward_with_hook(x, |i, out| {
            if taps.contains(&i) {
                recorded.insert(i, out.clone());
            }
        })?;
        Ok((logits, recorded))
    }

    /// Continues a forward pass from the output of layer `from`.
    pub fn forward_from(&self, from: usize, activation: &Tensor) -> Result<Tensor> {
        let mut current = activation.clone();
        for layer in &self.layers[from + 1..] {
            current = layer.forward(&current)?;
        }
        Ok(current)
    }

    /// Collapses a split head into a single linear layer:
    /// `W' = W2 * W1`, `b' = W2 * b1 + b2`.
    pub fn fuse_head(&self) -> Result<ModelGraph> {
        if self.head != HeadKind::Split {
            return Err(Error::Structural("fuse_head needs a split head".into()));
        }
        let n = self.layers.len();
        let (Layer::Linear { weight: w1, bias: b1 }, Layer::Linear { weight: w2, bias: b2 }) =
            (&self.layers[n - 2], &self.layers[n - 1])
        else {
            return Err(Error::Structural(
                "split head must end in two adjacent linear layers".into(),
            ));
        };
        let (fused_w, fused_b) = fuse_linear(w1, b1, w2, b2)?;
        let mut layers = self.layers[..n - 2].to_vec();
        layers.push(Layer::linear(fused_w, fused_b)?);
        let mut fused = ModelGraph::new(self.arch.clone(), self.input_shape.clone(), layers, HeadKind::Baseline)?;
        fused.meta = self.meta;
        Ok(fused)
    }

    pub fn cost(&self) -> ModelCost {
        let params = self.params().map(|t| t.len() as u64).sum();
        let mut shape = self.input_shape.as_slice();
        let mut macs = 0;
        for (layer, out) in self.layers.iter().zip(&self.shapes) {
            macs += layer.macs(shape).expect("shapes validated at construction");
            shape = out;
        }
        ModelCost {
            params,
            flops: 2 * macs,
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }
}

/// `(W2 * W1, W2 * b1 + b2)` for weights stored `out x in`.
pub fn fuse_linear(w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<(Tensor, Tensor)> {
    let w = matmul(w2, w1)?;
    let e = b1.len();
    let b1_col = b1.clone().reshape(&[e, 1])?;
    let mut b = matmul(w2, &b1_col)?.into_data();
    if b.len() != b2.len() {
        return Err(Error::Dimension("projection bias does not match its weight".into()));
    }
    for (v, add) in b.iter_mut().zip(b2.data()) {
        *v += add;
    }
    let c = b.len();
    Ok((w, Tensor::new(vec![c], b)?))
}

fn push_head(layers: &mut Vec<Layer>, features: usize, classes: usize, head: HeadSpec, rng: &mut SeededRng) -> Result<HeadKind> {
    match head {
        HeadSpec::Baseline => {
            layers.push(Layer::linear_init(features, classes, rng));
            Ok(HeadKind::Baseline)
        }
        HeadSpec::Split { latent } => {
            if latent == 0 {
                return Err(Error::Argument("latent width must be at least 1".into()));
            }
            layers.push(Layer::linear_init(features, latent, rng));
            layers.push(Layer::linear_init(latent, classes, rng));
            Ok(HeadKind::Split)
        }
    }
}

fn linear_dims(layer: &Layer) -> Option<(usize, usize)> {
    match layer {
        Layer::Linear { weight, .. } => Some((weight.shape()[1], weight.shape()[0])),
        _ => None,
    }
}

fn head_dims(layers: &[Layer], head: HeadKind) -> Result<HeadDims> {
    let n = layers.len();
    let last = layers
        .last()
        .and_then(linear_dims)
        .ok_or_else(|| Error::Structural("model must end in a linear layer".into()))?;
    let dims = match head {
        HeadKind::Baseline => HeadDims {
            features: last.0,
            latent: None,
            classes: last.1,
        },
        HeadKind::Split => {
            let latent = n
                .checked_sub(2)
                .and_then(|i| linear_dims(&layers[i]))
                .ok_or_else(|| {
                    Error::Structural(
                        "split head needs the latent linear layer directly before the projection".into(),
                    )
                })?;
            if latent.1 == 0 {
                return Err(Error::Structural("latent width must be at least 1".into()));
            }
            HeadDims {
                features: latent.0,
                latent: Some(latent.1),
                classes: last.1,
            }
        }
    };
    if dims.classes < 2 {
        return Err(Error::Structural(format!(
            "need at least 2 classes, got {}",
            dims.classes
        )));
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn two_layer_split(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> ModelGraph {
        let f = w1.shape()[1];
        ModelGraph::new(
            "test",
            vec![f],
            vec![Layer::linear(w1, b1).unwrap(), Layer::linear(w2, b2).unwrap()],
            HeadKind::Split,
        )
        .unwrap()
    }

    #[test]
    fn reference_architectures_compose() {
        let mut rng = SeededRng::new(0, 0);
        let mlp = ModelGraph::mlp_s(&[1, 28, 28], 10, HeadSpec::Split { latent: 64 }, &mut rng).unwrap();
        assert_eq!(mlp.injectable_layers(), vec![1, 3, 4]);
        assert_eq!(mlp.dims().features, 256);
        let cnn = ModelGraph::cnn_s(&[1, 28, 28], 10, HeadSpec::Baseline, &mut rng).unwrap();
        assert_eq!(cnn.injectable_layers(), vec![0, 3, 7]);
        assert_eq!(cnn.dims().features, 32 * 5 * 5);
        assert_eq!(cnn.output_shape(7), &[10]);
    }

    #[test]
    fn split_head_needs_adjacent_linears() {
        let mut rng = SeededRng::new(0, 0);
        let layers = vec![
            Layer::linear_init(4, 3, &mut rng),
            Layer::Relu,
            Layer::linear_init(3, 2, &mut rng),
        ];
        assert!(matches!(
            ModelGraph::new("x", vec![4], layers, HeadKind::Split),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn rejects_single_class_and_bad_composition() {
        let mut rng = SeededRng::new(0, 0);
        let one = vec![Layer::linear_init(4, 1, &mut rng)];
        assert!(ModelGraph::new("x", vec![4], one, HeadKind::Baseline).is_err());
        let bad = vec![Layer::linear_init(5, 2, &mut rng)];
        assert!(matches!(
            ModelGraph::new("x", vec![4], bad, HeadKind::Baseline),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn taps_do_not_perturb_logits() {
        let mut rng = SeededRng::new(1, 0);
        let m = ModelGraph::cnn_s(&[1, 12, 12], 3, HeadSpec::Split { latent: 4 }, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 1, 12, 12], |_| rng.uniform(-1.0, 1.0));
        let plain = m.forward(&x).unwrap();
        let (none, rec) = m.forward_with_taps(&x, &[]).unwrap();
        assert!(rec.is_empty());
        assert!(plain.bits_eq(&none));
        let last = m.last_layer();
        let (logits, rec) = m.forward_with_taps(&x, &[0, last]).unwrap();
        assert!(plain.bits_eq(&logits));
        assert_eq!(rec[&last].shape(), &[2, 3]);
        assert!(rec[&last].bits_eq(&logits));
    }

    #[test]
    fn tap_on_non_injectable_layer_is_rejected() {
        let mut rng = SeededRng::new(1, 0);
        let m = ModelGraph::mlp_s(&[4], 2, HeadSpec::Baseline, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        assert!(matches!(m.forward_with_taps(&x, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn tapped_intermediate_matches_hand_product() {
        let m = two_layer_split(
            t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            t(&[2], &[0.5, -1.0]),
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            t(&[2], &[0.0, 0.0]),
        );
        let x = t(&[1, 2], &[1.0, -1.0]);
        let (_, rec) = m.forward_with_taps(&x, &[0]).unwrap();
        // [1*1 + 2*(-1) + 0.5, 3*1 + 4*(-1) - 1]
        assert_eq!(rec[&0].data(), &[-0.5, -2.0]);
    }

    #[test]
    fn fuse_identity_projection_is_exact() {
        let w1 = t(&[2, 3], &[0.25, -1.5, 2.0, 3.0, 0.125, -0.75]);
        let b1 = t(&[2], &[0.5, -2.0]);
        let m = two_layer_split(w1.clone(), b1.clone(), t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Tensor::zeros(&[2]));
        let fused = m.fuse_head().unwrap();
        assert_eq!(fused.head(), HeadKind::Baseline);
        match &fused.layers()[0] {
            Layer::Linear { weight, bias } => {
                assert!(weight.bits_eq(&w1));
                assert!(bias.bits_eq(&b1));
            }
            _ => panic!("expected linear"),
        }
    }

    #[test]
    fn fuse_forced_arithmetic() {
        let mut rng = SeededRng::new(0, 0);
        let layers = vec![
            Layer::Flatten,
            Layer::linear(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]), t(&[2], &[1.0, 0.0])).unwrap(),
            Layer::linear(t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]), t(&[2], &[3.0, 0.0])).unwrap(),
        ];
        let _ = &mut rng;
        let m = ModelGraph::new("x", vec![2], layers, HeadKind::Split).unwrap();
        let fused = m.fuse_head().unwrap();
        assert_eq!(fused.layers().len(), 2);
        match &fused.layers()[1] {
            Layer::Linear { weight, bias } => {
                assert_eq!(&weight.data()[..2], &[1.0, 2.0]);
                assert_eq!(bias.data()[0], 4.0);
            }
            _ => panic!("expected linear"),
        }
    }

    #[test]
    fn fuse_baseline_is_structural_error() {
        let mut rng = SeededRng::new(0, 0);
        let m = ModelGraph::mlp_s(&[4], 2, HeadSpec::Baseline, &mut rng).unwrap();
        assert!(matches!(m.fuse_head(), Err(Error::Structural(_))));
    }

    #[test]
    fn closed_form_costs() {
        let mut rng = SeededRng::new(0, 0);
        let base = ModelGraph::new("x", vec![512], vec![Layer::linear_init(512, 10, &mut rng)], HeadKind::Baseline).unwrap();
        assert_eq!(base.cost(), ModelCost { params: 5130, flops: 10240 });
        let split = ModelGraph::new(
            "x",
            vec![512],
            vec![Layer::linear_init(512, 512, &mut rng), Layer::linear_init(512, 10, &mut rng)],
            HeadKind::Split,
        )
        .unwrap();
        assert_eq!(split.cost().params, 267_786);
        assert_eq!(split.cost().flops, 2 * (512 * 512 + 512 * 10));
    }

    #[test]
    fn param_delta_sign_follows_algebra() {
        let mut rng = SeededRng::new(0, 0);
        for (f, e, c) in [(512, 512, 10), (2048, 64, 1000), (64, 8, 100), (100, 10, 10)] {
            let base = ModelGraph::new("x", vec![f], vec![Layer::linear_init(f, c, &mut rng)], HeadKind::Baseline).unwrap();
            let split = ModelGraph::new(
                "x",
                vec![f],
                vec![Layer::linear_init(f, e, &mut rng), Layer::linear_init(e, c, &mut rng)],
                HeadKind::Split,
            )
            .unwrap();
            let delta = split.cost().flops as i64 - base.cost().flops as i64;
            let algebra = (f * e + e * c) as i64 - (f * c) as i64;
            assert_eq!(delta.signum(), algebra.signum(), "F={f} E={e} C={c}");
        }
    }

    #[test]
    fn conv_cost() {
        let mut rng = SeededRng::new(0, 0);
        let m = ModelGraph::cnn_s(&[1, 28, 28], 10, HeadSpec::Baseline, &mut rng).unwrap();
        let conv1 = 16 * 26 * 26 * 9;
        let conv2 = 32 * 11 * 11 * 16 * 9;
        let fc = 800 * 10;
        assert_eq!(m.cost().flops, 2 * (conv1 + conv2 + fc) as u64);
        assert_eq!(m.cost().params, (16 * 9 + 16 + 32 * 144 + 32 + 8000 + 10) as u64);
    }
}
