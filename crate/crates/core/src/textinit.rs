//! Per-class text embeddings and projection-layer initialisation.
//!
//! Embeddings arrive as a `C x D x E` table: `D` descriptions per class,
//! each encoded to an `E`-dimensional vector by an external text encoder.
//! The descriptions are averaged per class, each class row is L2-normalised,
//! and the rows become the projection weight of a split head.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{init_bound, HeadKind, Layer, ModelGraph};
use crate::tensor::{SeededRng, Tensor};

pub const MAGIC: &[u8] = b"FLEM1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    class_names: Vec<String>,
    embeddings: Tensor,
}

impl EmbeddingTable {
    pub fn new(class_names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let [c, d, e] = *embeddings.shape() else {
            return Err(Error::Dimension(format!(
                "embedding table must be C x D x E, got {:?}",
                embeddings.shape()
            )));
        };
        if c < 2 || d < 1 || e < 1 {
            return Err(Error::Dimension(format!(
                "embedding table needs C >= 2, D >= 1, E >= 1; got {c} x {d} x {e}"
            )));
        }
        if class_names.len() != c {
            return Err(Error::Dimension(format!(
                "{} class names for {c} classes",
                class_names.len()
            )));
        }
        check_unique(&class_names)?;
        if let Some(pos) = embeddings.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite embedding value at flat index {pos}"
            )));
        }
        Ok(Self {
            class_names,
            embeddings,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn classes(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn descriptions(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    /// The `E`-vector for `(class, description)`.
    pub fn row(&self, class: usize, description: usize) -> &[f32] {
        let (d, e) = (self.descriptions(), self.dim());
        let start = (class * d + description) * e;
        &self.embeddings.data()[start..start + e]
    }

    /// Table restricted to one description index per class.
    pub fn description_slice(&self, description: usize) -> Result<Self> {
        if description >= self.descriptions() {
            return Err(Error::Index(format!(
                "description {description} out of range for D = {}",
                self.descriptions()
            )));
        }
        let (c, e) = (self.classes(), self.dim());
        let mut data = Vec::with_capacity(c * e);
        for class in 0..c {
            data.extend_from_slice(self.row(class, description));
        }
        Self::new(self.class_names.clone(), Tensor::new(vec![c, 1, e], data)?)
    }
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Argument(format!("duplicate class name `{n}`")));
        }
    }
    Ok(())
}

/// Mean over descriptions, then L2 normalisation of each class row.
pub fn average_embeddings(table: &EmbeddingTable) -> Result<Tensor> {
    let (c, d, e) = (table.classes(), table.descriptions(), table.dim());
    let mut out = Vec::with_capacity(c * e);
    for class in 0..c {
        let mut mean = vec![0.0f32; e];
        for desc in 0..d {
            for (m, v) in mean.iter_mut().zip(table.row(class, desc)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= d as f32;
        }
        let norm = mean.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateClass { class });
        }
        out.extend(mean.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Tensor::new(vec![c, e], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Projection rows drawn like any other linear layer's weights.
    Random,
    /// Only the first description of each class.
    SinglePrompt,
    /// Average over all descriptions.
    MultiDescription,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::SinglePrompt => "single-prompt",
            InitMode::MultiDescription => "multi-description",
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "single-prompt" => Ok(InitMode::SinglePrompt),
            "multi-description" => Ok(InitMode::MultiDescription),
            other => Err(Error::Argument(format!("unknown init mode `{other}`"))),
        }
    }
}

/// Returns a copy of `model` with its projection layer re-initialised.
/// The bias is zeroed in every mode; the layer stays trainable.
pub fn init_projection(
    model: &ModelGraph,
    mode: InitMode,
    table: Option<&EmbeddingTable>,
    rng: &mut SeededRng,
) -> Result<ModelGraph> {
    if model.head() != HeadKind::Split {
        return Err(Error::Structural("projection init needs a split head".into()));
    }
    let classes = model.classes();
    let latent = model.dims().latent.expect("split head has a latent width");

    let rows = match mode {
        InitMode::Random => {
            let bound = init_bound(latent);
            Tensor::from_fn(&[classes, latent], |_| rng.uniform(-bound, bound))
        }
        InitMode::SinglePrompt | InitMode::MultiDescription => {
            let table = table.ok_or_else(|| {
                Error::Argument(format!("init mode `{}` needs an embedding table", mode.name()))
            })?;
            if table.dim() != latent {
                return Err(Error::Dimension(format!(
                    "embedding width {} does not match latent width {latent}",
                    table.dim()
                )));
            }
            if table.classes() != classes {
                return Err(Error::Dimension(format!(
                    "embedding table has {} classes, model has {classes}",
                    table.classes()
                )));
            }
            match mode {
                InitMode::SinglePrompt => average_embeddings(&table.description_slice(0)?)?,
                _ => average_embeddings(table)?,
            }
        }
    };

    let mut out = model.clone();
    let last = out.last_layer();
    out.layers_mut()[last] = Layer::linear(rows, Tensor::zeros(&[classes]))?;
    Ok(out)
}

/// Deterministic stand-in for text-encoder output.
///
/// Every class gets an anchor direction hashed from its name; description `d`
/// adds an equally weighted direction hashed from `(name, d)`. The sum is
/// normalised to unit length.
pub fn synth_embeddings(class_names: &[String], descriptions: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim < 8 {
        return Err(Error::Argument(format!("embedding width must be >= 8, got {dim}")));
    }
    if descriptions == 0 {
        return Err(Error::Argument("need at least one description per class".into()));
    }
    check_unique(class_names)?;
    let mut data = Vec::with_capacity(class_names.len() * descriptions * dim);
    for name in class_names {
        let anchor = hashed_gaussian(seed, name, None, dim);
        for d in 0..descriptions {
            let own = hashed_gaussian(seed, name, Some(d as u64), dim);
            let v: Vec<f64> = anchor.iter().zip(&own).map(|(a, b)| a + b).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| (x / norm) as f32));
        }
    }
    EmbeddingTable::new(
        class_names.to_vec(),
        Tensor::new(vec![class_names.len(), descriptions, dim], data)?,
    )
}

fn hashed_gaussian(seed: u64, name: &str, description: Option<u64>, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    match description {
        Some(d) => {
            h.update([1u8]);
            h.update(d.to_le_bytes());
        }
        None => h.update([0u8]),
    }
    let digest = h.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let stream = u64::from_le_bytes(digest[8..16].try_into().expect("8 bytes"));
    let mut rng = SeededRng::new(key, stream);
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "C")]
    classes: usize,
    #[serde(rename = "D")]
    descriptions: usize,
    #[serde(rename = "E")]
    dim: usize,
    class_names: Vec<String>,
}

pub fn write_embeddings(table: &EmbeddingTable) -> Result<Vec<u8>> {
    let header = Header {
        classes: table.classes(),
        descriptions: table.descriptions(),
        dim: table.dim(),
        class_names: table.class_names.clone(),
    };
    let mut buf = MAGIC.to_vec();
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    for v in table.embeddings.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn parse_embeddings(bytes: &[u8]) -> Result<EmbeddingTable> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("missing FLEM1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated embedding header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Format(format!("bad embedding header: {e}")))?;
    let body = &rest[nl + 1..];
    let count = header.classes * header.descriptions * header.dim;
    if body.len() != count * 4 {
        return Err(Error::Format(format!(
            "expected {count} values ({} bytes) for {} x {} x {}, found {} bytes",
            count * 4,
            header.classes,
            header.descriptions,
            header.dim,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(vec![header.classes, header.descriptions, header.dim], data)?;
    EmbeddingTable::new(header.class_names, t)
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_embeddings(table)?).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&bytes)
}
