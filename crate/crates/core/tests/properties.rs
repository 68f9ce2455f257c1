use faultline::data::Dataset;
use faultline::explain::{perturb_weights, weighted_map};
use faultline::inject::{flip_bit, run_campaign, CampaignConfig};
use faultline::metrics::{delta_loss, margin_of_error, required_samples, top2diff_sweep};
use faultline::model::{HeadKind, HeadSpec, Layer, ModelGraph};
use faultline::tensor::{softmax_cross_entropy, SeededRng, Tensor};
use faultline::textinit::{average_embeddings, init_projection, EmbeddingTable, InitMode};
use faultline::train::{records_from_logits, EvalReport, LrSchedule, TrainConfig};
use proptest::prelude::*;

fn small_f32() -> impl Strategy<Value = f32> {
    (-2.0f32..2.0).prop_filter("strictly inside", |v| v.abs() < 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn flip_is_an_involution(bits in any::<u32>(), b in 0u32..32) {
        let v = f32::from_bits(bits);
        prop_assert_eq!(flip_bit(flip_bit(v, b), b).to_bits(), bits);
        prop_assert_ne!(flip_bit(v, b).to_bits(), bits);
    }

    #[test]
    fn small_values_stay_small(v in small_f32(), b in 0u32..32) {
        prop_assume!(b != 30);
        prop_assert!(flip_bit(v, b).abs() < 2.0);
    }

    #[test]
    fn delta_loss_is_antisymmetric(
        a in prop::collection::vec(-20.0f32..20.0, 4),
        b in prop::collection::vec(-20.0f32..20.0, 4),
        label in 0usize..4,
    ) {
        prop_assert_eq!(delta_loss(&a, &b, label), -delta_loss(&b, &a, label));
        prop_assert_eq!(delta_loss(&a, &a, label), 0.0);
    }

    #[test]
    fn softmax_rows_are_distributions(
        logits in prop::collection::vec(-50.0f32..50.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let t = Tensor::new(vec![3, 4], logits).unwrap();
        let (loss, probs) = softmax_cross_entropy(&t, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for row in probs.data().chunks(4) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn top2diff_is_shift_invariant(
        logits in prop::collection::vec(-5.0f32..5.0, 5),
        shift in -4.0f32..4.0,
    ) {
        let a = Tensor::new(vec![1, 5], logits.clone()).unwrap();
        let b = Tensor::new(vec![1, 5], logits.iter().map(|v| v + shift).collect()).unwrap();
        let ra = records_from_logits(&a, &[0]).unwrap()[0];
        let rb = records_from_logits(&b, &[0]).unwrap()[0];
        prop_assume!(ra.predicted == rb.predicted);
        prop_assert!((ra.top2diff() - rb.top2diff()).abs() < 1e-3);
    }

    #[test]
    fn fusion_matches_sequential_head(seed in any::<u64>(), f in 1usize..24, e in 1usize..24, c in 2usize..8) {
        let mut rng = SeededRng::new(seed, 0);
        let m = ModelGraph::mlp_s(&[f], c, HeadSpec::Split { latent: e }, &mut rng).unwrap();
        let fused = m.fuse_head().unwrap();
        prop_assert_eq!(fused.head(), HeadKind::Baseline);
        let x = Tensor::from_fn(&[8, f], |_| rng.uniform(-1.0, 1.0));
        let seq = m.forward(&x).unwrap();
        let fu = fused.forward(&x).unwrap();
        prop_assert!(fu.max_abs_diff(&seq) <= 1e-4 * (1.0 + seq.max_abs()));
    }

    #[test]
    fn taps_never_perturb_logits(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed, 0);
        let m = ModelGraph::cnn_s(&[1, 12, 12], 3, HeadSpec::Split { latent: 5 }, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 1, 12, 12], |_| rng.uniform(-1.0, 1.0));
        let plain = m.forward(&x).unwrap();
        let (logits, acts) = m.forward_with_taps(&x, &m.injectable_layers()).unwrap();
        prop_assert!(plain.bits_eq(&logits));
        prop_assert_eq!(acts.len(), m.injectable_layers().len());
    }

    #[test]
    fn averaging_is_description_permutation_equivariant(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = SeededRng::new(seed, 0);
        let (c, e) = (3, 6);
        let t = Tensor::from_fn(&[c, d, e], |_| rng.uniform(-1.0, 1.0));
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let a = average_embeddings(&EmbeddingTable::new(names.clone(), t.clone()).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        let mut shuffled = Vec::with_capacity(t.len());
        for ci in 0..c {
            for &di in &perm {
                shuffled.extend_from_slice(&t.data()[(ci * d + di) * e..(ci * d + di + 1) * e]);
            }
        }
        let b = average_embeddings(
            &EmbeddingTable::new(names, Tensor::new(vec![c, d, e], shuffled).unwrap()).unwrap(),
        )
        .unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn class_scaling_leaves_projection_rows(seed in any::<u64>(), alpha in 0.01f32..100.0) {
        let mut rng = SeededRng::new(seed, 0);
        let (c, d, e) = (3, 2, 8);
        let t = Tensor::from_fn(&[c, d, e], |_| rng.uniform(-1.0, 1.0));
        let mut scaled = t.clone();
        for v in &mut scaled.data_mut()[..d * e] {
            *v *= alpha;
        }
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let a = average_embeddings(&EmbeddingTable::new(names.clone(), t).unwrap()).unwrap();
        let b = average_embeddings(&EmbeddingTable::new(names, scaled).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        let row = |t: &Tensor| faultline::tensor::argmax(&t.data()[..e]);
        prop_assert_eq!(row(&a), row(&b));
    }

    #[test]
    fn single_description_tables_give_identical_inits(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed, 0);
        let m = ModelGraph::mlp_s(&[6], 3, HeadSpec::Split { latent: 8 }, &mut rng).unwrap();
        let t = Tensor::from_fn(&[3, 1, 8], |_| rng.uniform(-1.0, 1.0));
        let table = EmbeddingTable::new(vec!["a".into(), "b".into(), "c".into()], t).unwrap();
        let a = init_projection(&m, InitMode::MultiDescription, Some(&table), &mut SeededRng::new(0, 1)).unwrap();
        let b = init_projection(&m, InitMode::SinglePrompt, Some(&table), &mut SeededRng::new(0, 1)).unwrap();
        prop_assert!(a.params().zip(b.params()).all(|(x, y)| x.bits_eq(y)));
    }

    #[test]
    fn sweep_is_monotone(
        probs in prop::collection::vec((0.0f32..1.0, 0.0f32..1.0, any::<bool>()), 1..40),
        mut deltas in prop::collection::vec(0.0f64..100.0, 1..10),
    ) {
        let records = probs
            .iter()
            .map(|&(a, b, ok)| faultline::train::SampleRecord {
                label: 0,
                predicted: if ok { 0 } else { 1 },
                top1_prob: a.max(b),
                top2_prob: a.min(b),
            })
            .collect();
        let eval = EvalReport::from_records(records).unwrap();
        deltas.insert(0, 0.0);
        deltas.sort_by(f64::total_cmp);
        let s = top2diff_sweep(&eval, &deltas).unwrap();
        prop_assert_eq!(s[0].1, eval.accuracy);
        prop_assert!(s.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn sample_size_monotonicity(e1 in 0.001f64..0.5, e2 in 0.001f64..0.5, t1 in 0.5f64..4.0, t2 in 0.5f64..4.0, p in 0.01f64..0.99) {
        let (lo_e, hi_e) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(required_samples(None, lo_e, 2.0, p).unwrap() >= required_samples(None, hi_e, 2.0, p).unwrap());
        let (lo_t, hi_t) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(required_samples(None, 0.05, lo_t, p).unwrap() <= required_samples(None, 0.05, hi_t, p).unwrap());
        let finite = required_samples(Some(10_000), lo_e, lo_t, p).unwrap();
        prop_assert!(finite <= required_samples(None, lo_e, lo_t, p).unwrap());
        let n = required_samples(None, lo_e, lo_t, p).unwrap();
        prop_assert!(margin_of_error(n, None, lo_t, p).unwrap() <= lo_e + 1e-12);
    }

    #[test]
    fn cam_shape_is_invariant_to_weight_scaling(
        maps in prop::collection::vec(-1.0f32..1.0, 8),
        w in prop::collection::vec(-1.0f32..1.0, 2),
        alpha in 0.1f32..10.0,
    ) {
        let base = weighted_map(&maps, 4, &w);
        let scaled_w: Vec<f32> = w.iter().map(|v| v * alpha).collect();
        let scaled = weighted_map(&maps, 4, &scaled_w);
        let max = base.iter().fold(0f32, |m, &v| m.max(v));
        let smax = scaled.iter().fold(0f32, |m, &v| m.max(v));
        prop_assert_eq!(max == 0.0, smax == 0.0);
        if max > 0.0 {
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a / max - b / smax).abs() <= 1e-4);
            }
        }
    }
}

#[test]
fn schedules_are_monotone_and_reach_min_lr() {
    for schedule in [
        LrSchedule::Step { gamma: 0.1, step_size: 3 },
        LrSchedule::Step { gamma: 0.5, step_size: 1 },
        LrSchedule::Cosine { min_lr: 1e-4 },
    ] {
        let mut cfg = TrainConfig::desk_default(0);
        cfg.epochs = 9;
        cfg.schedule = schedule;
        let lrs: Vec<f64> = (0..cfg.epochs).map(|e| cfg.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "{schedule:?}: {lrs:?}");
        if let LrSchedule::Cosine { min_lr } = schedule {
            assert!((lrs[cfg.epochs - 1] - min_lr).abs() <= 1e-9);
        }
    }
}

#[test]
fn perturbation_is_deterministic_and_pure() {
    let mut rng = SeededRng::new(1, 0);
    let m = ModelGraph::cnn_s(&[1, 12, 12], 3, HeadSpec::Baseline, &mut rng).unwrap();
    let before = m.clone();
    let a = perturb_weights(&m, 50, 9, &[]).unwrap();
    let b = perturb_weights(&m, 50, 9, &[]).unwrap();
    assert_eq!(m, before);
    assert!(a.params().zip(b.params()).all(|(x, y)| x.bits_eq(y)));
}

fn linear_model(rng: &mut SeededRng) -> ModelGraph {
    let layers = vec![
        Layer::linear_init(6, 8, rng),
        Layer::Relu,
        Layer::linear_init(8, 3, rng),
    ];
    ModelGraph::new("tiny", vec![6], layers, HeadKind::Baseline).unwrap()
}

#[test]
fn campaign_json_is_thread_count_invariant() {
    let mut rng = SeededRng::new(2, 0);
    let m = linear_model(&mut rng);
    let x = Tensor::from_fn(&[40, 6], |_| rng.uniform(-1.0, 1.0));
    let data = Dataset::new("rand", x, (0..40).map(|i| i % 3).collect(), vec!["a".into(), "b".into(), "c".into()])
        .unwrap();
    let mut cfg = CampaignConfig::new("tiny", 300, 4);
    cfg.keep_outcomes = true;
    let runs: Vec<String> = [1, 2, 4]
        .into_iter()
        .map(|t| {
            cfg.threads = Some(t);
            run_campaign(&m, &data, &cfg).unwrap().to_json().unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}
