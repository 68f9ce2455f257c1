//! Transient single-bit faults on layer activations.
//!
//! A fault flips one bit of one element of a conv/linear layer's affine
//! output during a single inference. Parameters are never touched. A
//! campaign draws `n` independent sites per layer, each from its own rng
//! stream, so results do not depend on how experiments are scheduled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{delta_loss, CampaignReport, LayerReliability};
use crate::model::ModelGraph;
use crate::tensor::{argmax, SeededRng};

/// XORs bit `bit` of the binary32 pattern of `v`. Bit 0 is the mantissa LSB,
/// bits 23..=30 the exponent, bit 31 the sign.
#[inline]
pub fn flip_bit(v: f32, bit: u32) -> f32 {
    assert!(bit < 32, "bit position {bit} out of range");
    f32::from_bits(v.to_bits() ^ (1u32 << bit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSite {
    pub layer: usize,
    /// Flat offset into the per-sample activation of `layer`.
    pub element: usize,
    pub bit: u32,
    /// Index into the evaluation set.
    pub sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub site: FaultSite,
    pub fault_free_top1: usize,
    pub faulty_top1: usize,
    pub dloss: f64,
    pub mismatch: bool,
}

/// Rng stream for experiment `index` on `layer`.
pub fn experiment_rng(seed: u64, layer: usize, index: usize) -> SeededRng {
    SeededRng::new(seed, ((layer as u64) << 32) | index as u64)
}

fn check_injectable(model: &ModelGraph, layer: usize) -> Result<()> {
    match model.layers().get(layer) {
        Some(l) if l.injectable() => Ok(()),
        Some(l) => Err(Error::Argument(format!(
            "layer {layer} ({}) is not injectable",
            l.kind().name()
        ))),
        None => Err(Error::Argument(format!(
            "layer {layer} does not exist ({} layers)",
            model.layers().len()
        ))),
    }
}

/// Uniform element, bit and sample for one experiment on `layer`.
pub fn sample_site(model: &ModelGraph, layer: usize, eval_len: usize, rng: &mut SeededRng) -> Result<FaultSite> {
    check_injectable(model, layer)?;
    if eval_len == 0 {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let element = rng.index(model.activation_len(layer));
    let bit = rng.index(32) as u32;
    let sample = rng.index(eval_len);
    Ok(FaultSite {
        layer,
        element,
        bit,
        sample,
    })
}

/// Runs one sample fault-free, then again with the site's bit flipped in
/// the layer's affine output before the following layers consume it.
pub fn run_experiment(model: &ModelGraph, site: FaultSite, data: &Dataset) -> Result<ExperimentOutcome> {
    check_injectable(model, site.layer)?;
    if site.bit >= 32 {
        return Err(Error::Argument(format!("bit {} out of range", site.bit)));
    }
    if site.element >= model.activation_len(site.layer) {
        return Err(Error::Index(format!(
            "element {} out of range for layer {} ({} elements)",
            site.element,
            site.layer,
            model.activation_len(site.layer)
        )));
    }
    if site.sample >= data.len() {
        return Err(Error::Index(format!(
            "sample {} out of range for {} samples",
            site.sample,
            data.len()
        )));
    }
    let (x, label) = data.sample(site.sample)?;
    let (clean, mut taps) = model.forward_with_taps(&x, &[site.layer])?;
    let mut act = taps.remove(&site.layer).expect("tapped");
    let slot = &mut act.data_mut()[site.element];
    *slot = flip_bit(*slot, site.bit);
    let faulty = model.forward_from(site.layer, &act)?;

    let fault_free_top1 = argmax(clean.data());
    let faulty_top1 = argmax(faulty.data());
    Ok(ExperimentOutcome {
        site,
        fault_free_top1,
        faulty_top1,
        dloss: delta_loss(clean.data(), faulty.data(), label),
        mismatch: fault_free_top1 != faulty_top1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub model_id: String,
    /// Target layers; `None` means every injectable layer.
    pub layers: Option<Vec<usize>>,
    pub n_per_layer: usize,
    pub seed: u64,
    /// Worker count; `None` uses the available parallelism.
    pub threads: Option<usize>,
    /// Keep every outcome in the report, not just the aggregates.
    pub keep_outcomes: bool,
}

impl CampaignConfig {
    pub fn new(model_id: impl Into<String>, n_per_layer: usize, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            layers: None,
            n_per_layer,
            seed,
            threads: None,
            keep_outcomes: false,
        }
    }
}

pub fn run_campaign(model: &ModelGraph, data: &Dataset, cfg: &CampaignConfig) -> Result<CampaignReport> {
    if cfg.n_per_layer == 0 {
        return Err(Error::Argument("need at least one experiment per layer".into()));
    }
    let layers = match &cfg.layers {
        Some(l) if l.is_empty() => return Err(Error::Argument("layer selection is empty".into())),
        Some(l) => {
            let mut l = l.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
        None => model.injectable_layers(),
    };
    for &l in &layers {
        check_injectable(model, l)?;
    }
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }

    let jobs: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| (0..cfg.n_per_layer).map(move |i| (l, i)))
        .collect();
    let work = || -> Result<Vec<ExperimentOutcome>> {
        jobs.par_iter()
            .map(|&(layer, i)| {
                let mut rng = experiment_rng(cfg.seed, layer, i);
                let site = sample_site(model, layer, data.len(), &mut rng)?;
                run_experiment(model, site, data)
            })
            .collect()
    };
    let outcomes = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Argument(format!("cannot build worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let per_layer = outcomes
        .chunks(cfg.n_per_layer)
        .zip(&layers)
        .map(|(chunk, &layer)| {
            LayerReliability::from_outcomes(
                layer,
                model.layers()[layer].kind(),
                model.activation_len(layer),
                chunk,
                cfg.keep_outcomes,
            )
        })
        .collect();
    Ok(CampaignReport::new(model, data.name(), cfg, per_layer))
}
