//! Reliability metrics, aggregation, sample-size math and the CSV exports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inject::{flip_bit, CampaignConfig, ExperimentOutcome};
use crate::model::{HeadKind, LayerKind, ModelCost, ModelGraph};
use crate::train::{accuracy_fraction, EvalReport};

/// Upper bound on a per-sample cross entropy, `ln(1e12)`. Non-finite logits
/// and any CE above it are treated as a probability floor of `1e-12`.
pub const CE_CLAMP: f64 = 27.631_021_115_928_547;

/// Cross entropy of one row of logits, computed in f64 and clamped.
pub fn cross_entropy(logits: &[f32], label: usize) -> f64 {
    assert!(label < logits.len(), "label {label} out of range");
    if logits.iter().any(|v| !v.is_finite()) {
        return CE_CLAMP;
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let ce = max + sum.ln() - logits[label] as f64;
    ce.clamp(0.0, CE_CLAMP)
}

/// `CE(faulty) - CE(fault_free)`. Negative values are legal.
pub fn delta_loss(fault_free: &[f32], faulty: &[f32], label: usize) -> f64 {
    assert_eq!(fault_free.len(), faulty.len(), "logit rows differ in length");
    cross_entropy(faulty, label) - cross_entropy(fault_free, label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReliability {
    pub layer: usize,
    pub kind: LayerKind,
    pub n: usize,
    pub mean_dloss: f64,
    pub mismatch_rate: f64,
    pub activation_elements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<ExperimentOutcome>>,
}

impl LayerReliability {
    pub fn from_outcomes(
        layer: usize,
        kind: LayerKind,
        activation_elements: usize,
        outcomes: &[ExperimentOutcome],
        keep: bool,
    ) -> Self {
        let n = outcomes.len();
        let sum: f64 = outcomes.iter().map(|o| o.dloss).sum();
        let mismatches = outcomes.iter().filter(|o| o.mismatch).count();
        Self {
            layer,
            kind,
            n,
            mean_dloss: sum / n as f64,
            mismatch_rate: mismatches as f64 / n as f64,
            activation_elements,
            outcomes: keep.then(|| outcomes.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub mean_dloss: f64,
    pub mismatch_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub model_id: String,
    pub arch: String,
    /// Head as trained, even when fused for injection.
    pub head: HeadKind,
    pub dataset: String,
    pub seed: u64,
    pub n_per_layer: usize,
    pub injectable_layers: Vec<usize>,
    pub last_layer: usize,
    /// Whether a split head was fused before injection. `cost` always
    /// describes the model as trained.
    pub fused_head: bool,
    pub cost: ModelCost,
    pub layers: Vec<LayerReliability>,
    /// Unweighted mean over the per-layer rows.
    pub overall: Overall,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CampaignReport {
    pub fn new(model: &ModelGraph, dataset: &str, cfg: &CampaignConfig, layers: Vec<LayerReliability>) -> Self {
        let k = layers.len() as f64;
        let overall = Overall {
            mean_dloss: layers.iter().map(|l| l.mean_dloss).sum::<f64>() / k,
            mismatch_rate: layers.iter().map(|l| l.mismatch_rate).sum::<f64>() / k,
        };
        Self {
            model_id: cfg.model_id.clone(),
            arch: model.arch().to_string(),
            head: model.head(),
            dataset: dataset.to_string(),
            seed: cfg.seed,
            n_per_layer: cfg.n_per_layer,
            injectable_layers: model.injectable_layers(),
            last_layer: model.last_layer(),
            fused_head: false,
            cost: model.cost(),
            layers,
            overall,
            config_hash: None,
        }
    }

    pub fn layer(&self, index: usize) -> Option<&LayerReliability> {
        self.layers.iter().find(|l| l.layer == index)
    }

    pub fn last(&self) -> Option<&LayerReliability> {
        self.layer(self.last_layer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    LastLayer,
    Overall,
}

fn scope_mean(r: &CampaignReport, scope: Scope) -> Result<f64> {
    match scope {
        Scope::Overall => Ok(r.overall.mean_dloss),
        Scope::LastLayer => r.last().map(|l| l.mean_dloss).ok_or_else(|| {
            Error::Comparison(format!(
                "report {} has no entry for its last layer {}",
                r.model_id, r.last_layer
            ))
        }),
    }
}

/// Baseline mean dloss over ours for `scope`; above 1 means ours is more reliable.
pub fn improvement_ratio(baseline: &CampaignReport, ours: &CampaignReport, scope: Scope) -> Result<f64> {
    let b = scope_mean(baseline, scope)?;
    let o = scope_mean(ours, scope)?;
    ratio(b, o)
}

pub fn ratio(baseline: f64, ours: f64) -> Result<f64> {
    if ours <= 0.0 || ours.is_nan() {
        return Err(Error::UndefinedRatio { baseline, ours });
    }
    Ok(baseline / ours)
}

fn check_sampling(margin: f64, t: f64, p: f64) -> Result<()> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Argument(format!("margin {margin} must be in (0, 1)")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Argument(format!("t {t} must be positive")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("p {p} must be in (0, 1)")));
    }
    Ok(())
}

/// Experiments needed for margin `margin` at z-score `t` and expected rate `p`.
/// `population` is `None` for an unbounded population.
pub fn required_samples(population: Option<u64>, margin: f64, t: f64, p: f64) -> Result<u64> {
    check_sampling(margin, t, p)?;
    let q = t * t * p * (1.0 - p);
    let n = match population {
        None => q / (margin * margin),
        Some(0) => return Err(Error::Argument("population must be positive".into())),
        Some(big_n) => {
            let big_n = big_n as f64;
            big_n / (1.0 + margin * margin * (big_n - 1.0) / q)
        }
    };
    Ok(n.ceil() as u64)
}

/// Margin of error achieved by `n` experiments; inverse of [`required_samples`].
pub fn margin_of_error(n: u64, population: Option<u64>, t: f64, p: f64) -> Result<f64> {
    check_sampling(0.5, t, p)?;
    if n == 0 {
        return Err(Error::Argument("n must be positive".into()));
    }
    let q = t * t * p * (1.0 - p);
    let n = n as f64;
    Ok(match population {
        None => (q / n).sqrt(),
        Some(big_n) if (big_n as f64) < n => {
            return Err(Error::Argument(format!("n {n} exceeds population {big_n}")))
        }
        Some(1) => 0.0,
        Some(big_n) => {
            let big_n = big_n as f64;
            (q * (big_n / n - 1.0) / (big_n - 1.0)).sqrt()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub layer: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
}

const PROFILE_BATCH: usize = 500;

/// Max and mean absolute value at each injectable layer's tap, over every
/// sample of `data`.
pub fn range_profile(model: &ModelGraph, data: &Dataset) -> Result<Vec<LayerRange>> {
    if data.is_empty() {
        return Err(Error::Argument("cannot profile an empty dataset".into()));
    }
    let taps = model.injectable_layers();
    let starts: Vec<usize> = (0..data.len()).step_by(PROFILE_BATCH).collect();
    let parts: Vec<Vec<(f64, f64)>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + PROFILE_BATCH).min(data.len())).collect();
            let (x, _) = data.batch(&idx)?;
            let (_, acts) = model.forward_with_taps(&x, &taps)?;
            Ok(taps
                .iter()
                .map(|l| {
                    let a = &acts[l];
                    let max = a.data().iter().fold(0f64, |m, v| m.max(v.abs() as f64));
                    let sum = a.data().iter().map(|v| v.abs() as f64).sum::<f64>();
                    (max, sum)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(taps
        .iter()
        .enumerate()
        .map(|(i, &layer)| {
            let (max, sum) = parts
                .iter()
                .fold((0f64, 0f64), |(m, s), p| (m.max(p[i].0), s + p[i].1));
            let count = (model.activation_len(layer) * data.len()) as f64;
            LayerRange {
                layer,
                max_abs: max,
                mean_abs: sum / count,
            }
        })
        .collect())
}

/// Accuracy retained when correct samples with Top2Diff below each delta are
/// counted as failures. Deltas must be ascending percentages.
pub fn top2diff_sweep(eval: &EvalReport, deltas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if let Some(bad) = deltas.iter().find(|d| !(0.0..=100.0).contains(*d)) {
        return Err(Error::Argument(format!("delta {bad} outside [0, 100]")));
    }
    if deltas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Argument("deltas must be sorted ascending".into()));
    }
    let mut margins: Vec<f64> = eval
        .records
        .iter()
        .filter(|r| r.correct())
        .map(|r| r.top2diff())
        .collect();
    margins.sort_by(f64::total_cmp);
    Ok(deltas
        .iter()
        .map(|&d| {
            let below = margins.partition_point(|&m| m < d);
            (d, accuracy_fraction(margins.len() - below, eval.total))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitOutcome {
    pub bit: u32,
    /// Fraction of flips with a finite result of magnitude at least 2.
    pub large: f64,
    /// Fraction of flips with a result of magnitude below 2.
    pub small: f64,
    pub non_finite: f64,
    /// Largest `|v'| / |v|` over non-zero inputs; infinite once any flip
    /// overflows or produces NaN.
    pub max_amplification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitOutcomeTable {
    pub considered: usize,
    /// Inputs skipped because they were non-finite or had magnitude >= 2.
    pub skipped: usize,
    pub bits: Vec<BitOutcome>,
}

pub fn bit_outcome_analysis(values: &[f32]) -> BitOutcomeTable {
    let inputs: Vec<f32> = values.iter().copied().filter(|v| v.is_finite() && v.abs() < 2.0).collect();
    let n = inputs.len() as f64;
    let bits = (0..32)
        .map(|bit| {
            let (mut large, mut small, mut non_finite) = (0usize, 0usize, 0usize);
            let mut amp = 0f64;
            for &v in &inputs {
                let f = flip_bit(v, bit);
                if !f.is_finite() {
                    non_finite += 1;
                    if v != 0.0 || f.is_nan() {
                        amp = f64::INFINITY;
                    }
                    continue;
                }
                if f.abs() >= 2.0 {
                    large += 1;
                } else {
                    small += 1;
                }
                if v != 0.0 {
                    amp = amp.max(f.abs() as f64 / v.abs() as f64);
                }
            }
            let frac = |c: usize| if inputs.is_empty() { 0.0 } else { c as f64 / n };
            BitOutcome {
                bit,
                large: frac(large),
                small: frac(small),
                non_finite: frac(non_finite),
                max_amplification: amp,
            }
        })
        .collect();
    BitOutcomeTable {
        considered: inputs.len(),
        skipped: values.len() - inputs.len(),
        bits,
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. `None` when either side has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Argument("need at least two points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some(sab / (saa * sbb).sqrt()))
}

pub const RELIABILITY_HEADER: &str = "model,layer,n,mean_dloss,mismatch_rate";
pub const RANGES_HEADER: &str = "model,layer,max_abs,mean_abs";
pub const SWEEP_HEADER: &str = "model,delta,accuracy";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn reliability_csv(rows: &[(&str, &CampaignReport)]) -> String {
    let mut out = format!("{RELIABILITY_HEADER}\n");
    for (model, r) in rows {
        for l in &r.layers {
            let _ = writeln!(out, "{},{},{},{},{}", csv_field(model), l.layer, l.n, l.mean_dloss, l.mismatch_rate);
        }
    }
    out
}

pub fn ranges_csv(rows: &[(&str, &[LayerRange])]) -> String {
    let mut out = format!("{RANGES_HEADER}\n");
    for (model, ranges) in rows {
        for r in *ranges {
            let _ = writeln!(out, "{},{},{},{}", csv_field(model), r.layer, r.max_abs, r.mean_abs);
        }
    }
    out
}

pub fn sweep_csv(rows: &[(&str, &[(f64, f64)])]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for (model, sweep) in rows {
        for (d, a) in *sweep {
            let _ = writeln!(out, "{},{},{}", csv_field(model), d, a);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inject::FaultSite;
    use crate::model::Layer;
    use crate::tensor::Tensor;
    use crate::train::SampleRecord;

    #[test]
    fn delta_loss_examples() {
        assert_eq!(delta_loss(&[2.0, 0.0], &[2.0, 0.0], 0), 0.0);
        assert!((delta_loss(&[2.0, 0.0], &[0.0, 2.0], 0) - 2.0).abs() < 1e-12);
        let want = (1.0 + (-4f64).exp()).ln() - (1.0 + (-2f64).exp()).ln();
        assert!((delta_loss(&[2.0, 0.0], &[4.0, 0.0], 0) - want).abs() < 1e-12);
        assert!((want + 0.10878).abs() < 1e-5);
    }

    #[test]
    fn clamp_on_non_finite() {
        let clean = [1.0, 0.0];
        let base = cross_entropy(&clean, 0);
        for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
            assert_eq!(delta_loss(&clean, &[bad, 0.0], 0), CE_CLAMP - base);
        }
        assert_eq!(cross_entropy(&[0.0, 1e30], 0), CE_CLAMP);
        assert!((CE_CLAMP - 1e12f64.ln()).abs() < 1e-12);
    }

    fn report(means: &[(usize, f64)], last: usize) -> CampaignReport {
        let layers: Vec<LayerReliability> = means
            .iter()
            .map(|&(layer, m)| LayerReliability {
                layer,
                kind: LayerKind::Linear,
                n: 4,
                mean_dloss: m,
                mismatch_rate: 0.0,
                activation_elements: 1,
                outcomes: None,
            })
            .collect();
        let k = layers.len() as f64;
        CampaignReport {
            model_id: "m".into(),
            arch: "a".into(),
            head: HeadKind::Baseline,
            dataset: "d".into(),
            seed: 0,
            n_per_layer: 4,
            injectable_layers: means.iter().map(|m| m.0).collect(),
            last_layer: last,
            fused_head: false,
            cost: ModelCost { params: 0, flops: 0 },
            overall: Overall {
                mean_dloss: layers.iter().map(|l| l.mean_dloss).sum::<f64>() / k,
                mismatch_rate: 0.0,
            },
            layers,
            config_hash: None,
        }
    }

    #[test]
    fn ratio_examples() {
        let a = report(&[(0, 0.2), (3, 0.4)], 3);
        assert_eq!(improvement_ratio(&a, &a, Scope::LastLayer).unwrap(), 1.0);
        assert_eq!(improvement_ratio(&a, &a, Scope::Overall).unwrap(), 1.0);
        let b = report(&[(0, 0.2), (3, 0.1)], 3);
        assert_eq!(improvement_ratio(&a, &b, Scope::LastLayer).unwrap(), 4.0);
        let z = report(&[(3, 0.0)], 3);
        assert!(matches!(improvement_ratio(&a, &z, Scope::LastLayer), Err(Error::UndefinedRatio { .. })));
        let missing = report(&[(0, 0.3)], 3);
        assert!(matches!(improvement_ratio(&a, &missing, Scope::LastLayer), Err(Error::Comparison(_))));
    }

    #[test]
    fn sample_size_examples() {
        assert_eq!(required_samples(None, 0.01, 2.576, 0.5).unwrap(), 16590);
        let e = margin_of_error(4096, None, 2.576, 0.5).unwrap();
        assert!((e - 0.0201).abs() < 1e-4, "{e}");
        // Finite population never needs more than the population itself.
        assert!(required_samples(Some(1000), 0.01, 2.576, 0.5).unwrap() <= 1000);
        let n = required_samples(Some(1_000_000), 0.01, 2.576, 0.5).unwrap();
        let back = margin_of_error(n, Some(1_000_000), 2.576, 0.5).unwrap();
        assert!(back <= 0.01 && back > 0.0099);
        for (e, t, p) in [(0.0, 2.0, 0.5), (1.0, 2.0, 0.5), (0.1, 0.0, 0.5), (0.1, 2.0, 1.0)] {
            assert!(required_samples(None, e, t, p).is_err());
        }
    }

    #[test]
    fn sweep_examples() {
        let rec = |p1: f32| SampleRecord {
            label: 0,
            predicted: 0,
            top1_prob: p1,
            top2_prob: 0.0,
        };
        let eval = EvalReport::from_records(vec![rec(0.1), rec(0.2), rec(0.3), rec(0.4)]).unwrap();
        let s = top2diff_sweep(&eval, &[0.0, 25.0, 41.0]).unwrap();
        assert_eq!(s[0].1, eval.accuracy);
        assert_eq!(s[1].1, 0.5);
        assert_eq!(s[2].1, 0.0);
        assert!(top2diff_sweep(&eval, &[5.0, 1.0]).is_err());
        assert!(top2diff_sweep(&eval, &[101.0]).is_err());
    }

    #[test]
    fn bit_outcomes() {
        let t = bit_outcome_analysis(&[1.0, -0.5, 1.5, 0.0, 3.0, f32::NAN]);
        assert_eq!((t.considered, t.skipped), (4, 2));
        for b in &t.bits {
            if b.bit != 30 {
                assert_eq!(b.large, 0.0, "bit {}", b.bit);
                assert_eq!(b.non_finite, 0.0);
            }
        }
        assert!(t.bits[30].max_amplification.is_infinite());
        assert_eq!(t.bits[31].max_amplification, 1.0);
        assert_eq!(t.bits[31].small, 1.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    fn one_linear(w: Vec<f32>, inputs: usize, outputs: usize) -> ModelGraph {
        let layers = vec![
            Layer::linear(Tensor::new(vec![outputs, inputs], w).unwrap(), Tensor::zeros(&[outputs])).unwrap(),
        ];
        ModelGraph::new("one", vec![inputs], layers, HeadKind::Baseline).unwrap()
    }

    #[test]
    fn range_profile_examples() {
        let data = Dataset::new(
            "two",
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap(),
            vec![0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        // Rows [1, 1] and [2, -1]: outputs (-1, 4) and (0.75, 0.75).
        let m = one_linear(vec![1.0, 1.0, 2.0, -1.0], 2, 2);
        let r = range_profile(&m, &data).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].max_abs, 4.0);
        assert_eq!(r[0].mean_abs, (1.0 + 4.0 + 0.75 + 0.75) / 4.0);
        let zero = one_linear(vec![0.0; 4], 2, 2);
        let r = range_profile(&zero, &data).unwrap();
        assert_eq!((r[0].max_abs, r[0].mean_abs), (0.0, 0.0));
        assert!(range_profile(&m, &data.take(0)).is_err());
    }

    #[test]
    fn csv_headers_and_rows() {
        let mut r = report(&[(0, 0.5)], 0);
        r.layers[0].mismatch_rate = 0.25;
        let csv = reliability_csv(&[("cnn,s", &r)]);
        assert_eq!(csv, "model,layer,n,mean_dloss,mismatch_rate\n\"cnn,s\",0,4,0.5,0.25\n");
        let ranges = [LayerRange {
            layer: 2,
            max_abs: 3.0,
            mean_abs: 0.5,
        }];
        assert_eq!(ranges_csv(&[("m", &ranges)]), "model,layer,max_abs,mean_abs\nm,2,3,0.5\n");
        let sweep = [(0.0, 0.9), (10.0, 0.8)];
        assert_eq!(sweep_csv(&[("m", &sweep)]), "model,delta,accuracy\nm,0,0.9\nm,10,0.8\n");
    }

    #[test]
    fn aggregation() {
        let site = FaultSite {
            layer: 1,
            element: 0,
            bit: 0,
            sample: 0,
        };
        let o = |d: f64, m: bool| ExperimentOutcome {
            site,
            fault_free_top1: 0,
            faulty_top1: m as usize,
            dloss: d,
            mismatch: m,
        };
        let l = LayerReliability::from_outcomes(1, LayerKind::Linear, 7, &[o(1.0, true), o(0.0, false)], false);
        assert_eq!((l.mean_dloss, l.mismatch_rate, l.n), (0.5, 0.5, 2));
        assert!(l.outcomes.is_none());
    }
}
