use std::collections::HashSet;

use asf_core::fusion::FusionKind;
use asf_core::model::{Asf, BranchKind, ComplexityReport, ComputationEncoder, Model, ModelConfig, ReductionEncoder};
use asf_core::nn::{Ctx, Mode, ParamKind, ParamStore, TokenTensor};
use asf_core::tensor::Tensor;
use asf_core::train::{synthetic_records, Dataset};

fn zero_trainables(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn tokens(b: usize, n: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[b, n, d], |i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0) - 1.0)
}

#[test]
fn zero_weight_computation_encoder_is_identity() {
    for branch in [BranchKind::Hmcb, BranchKind::Pcm, BranchKind::Bottleneck, BranchKind::AttentionOnly] {
        for fusion in [FusionKind::Simple, FusionKind::ContextAgnostic, FusionKind::Adaptive] {
            let cfg = ModelConfig { branch, fusion, ..ModelConfig::tiny() };
            let mut store = ParamStore::<f64>::new();
            let enc = ComputationEncoder::new(&mut store, "c", &cfg, (4, 4)).unwrap();
            store.materialize(3);
            zero_trainables(&mut store);
            for mode in [Mode::Train, Mode::Eval] {
                let x = tokens(2, 17, cfg.dim, 11);
                let mut s = store.clone();
                let mut ctx = Ctx::new(&mut s, mode);
                let v = ctx.input(x.clone());
                let y = enc.forward(&mut ctx, TokenTensor { data: v, spatial: Some((4, 4)), has_class: true }).unwrap();
                assert_eq!(ctx.tape.value(y.data), &x, "{branch:?} {fusion:?} {mode:?}");
            }
        }
    }
}

#[test]
fn reduction_encoder_maps_width_and_keeps_grid() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::<f64>::new();
    let enc = ReductionEncoder::new(&mut store, "r", &cfg, 27, (4, 4)).unwrap();
    store.materialize(0);
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let v = ctx.input(tokens(2, 16, 27, 1));
    let y = enc.forward(&mut ctx, TokenTensor::patches(v, (4, 4))).unwrap();
    assert_eq!(ctx.tape.shape(y.data), &[2, 16, cfg.dim_prime]);
    assert_eq!(y.spatial, Some((4, 4)));
    assert!(!y.has_class);
    let wrong = ctx.input(tokens(2, 9, 27, 1));
    assert!(enc.forward(&mut ctx, TokenTensor::patches(wrong, (3, 3))).is_err());
}

#[test]
fn tiny_model_has_six_fusion_sites_in_order() {
    let mut m = Model::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
    let data = Dataset::from_records(&synthetic_records(3, 10, 0), 10);
    let (x, _) = data.batch::<f32>(&[0, 1, 2], None);
    let out = m.predict(&x).unwrap();
    assert_eq!(out.logits.shape(), &[3, 10]);
    let sites: Vec<usize> = out.traces.iter().map(|t| t.encoder_index).collect();
    assert_eq!(sites, [1, 2, 3, 4, 5, 6]);
    assert!(out.traces.iter().all(|t| t.alpha.len() == 3));
}

#[test]
fn eval_is_deterministic_and_per_sample() {
    let mut m = Model::<f32>::init(&ModelConfig::tiny(), 5).unwrap();
    let data = Dataset::from_records(&synthetic_records(2, 10, 4), 10);
    let (x, _) = data.batch::<f32>(&[0, 0, 1], None);
    let a = m.predict(&x).unwrap().logits;
    let b = m.predict(&x).unwrap().logits;
    assert_eq!(a, b);
    assert_eq!(a.data()[..10], a.data()[10..20]);
    assert_ne!(a.data()[..10], a.data()[20..30]);
}

#[test]
fn wrong_image_size_rejected() {
    let mut m = Model::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
    assert!(m.predict(&Tensor::zeros(&[1, 3, 28, 28])).is_err());
}

#[test]
fn audit_covers_every_trainable_once() {
    for branch in [BranchKind::Hmcb, BranchKind::Pcm, BranchKind::Bottleneck, BranchKind::AttentionOnly, BranchKind::HmcbOnly] {
        let cfg = ModelConfig { branch, ..ModelConfig::tiny() };
        let mut store = ParamStore::<f32>::new();
        let arch = Asf::build(&cfg, &mut store).unwrap();
        let mut seen = HashSet::new();
        for part in arch.parts() {
            for id in part.params {
                assert!(seen.insert(id), "{} owned twice", store.spec(id).name);
            }
        }
        let trainable: HashSet<_> = store.trainable_ids().collect();
        let missing: Vec<_> = trainable.difference(&seen).map(|&id| store.spec(id).name.clone()).collect();
        assert!(missing.is_empty(), "{branch:?}: {missing:?}");
        let report = ComplexityReport::of(&arch, &store);
        assert_eq!(report.total_params as usize, store.trainable_count());
        let buffers = store.ids().filter(|&id| store.spec(id).kind != ParamKind::Trainable).count();
        assert!(buffers > 0 || branch == BranchKind::AttentionOnly);
    }
}

#[test]
fn audit_does_not_need_values() {
    let m = Model::<f32>::describe_only(&ModelConfig::small()).unwrap();
    assert!(!m.params.is_materialized());
    let r = ComplexityReport::of(&m.arch, &m.params);
    assert!(r.total_params > 0 && r.total_macs > 0);
}

#[test]
fn classifier_macs_match_hand_count() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::describe_only(&cfg).unwrap();
    let r = ComplexityReport::of(&m.arch, &m.params);
    let head = r.layers.iter().find(|l| l.name == "head").unwrap();
    assert_eq!(head.macs, (cfg.dim * cfg.num_classes) as u64);
    assert_eq!(head.params, (cfg.dim * cfg.num_classes + cfg.num_classes) as u64);
    let project = r.layers.iter().find(|l| l.name == "project").unwrap();
    // 4×4 grid, 64·9 inputs
    assert_eq!(project.macs, (16 * 576 * cfg.dim) as u64);
}

#[test]
fn parallel_and_sequential_steps_agree_bit_for_bit() {
    use asf_core::parallel::set_parallel;
    use asf_core::train::{train_step, AdamW, AdamWConfig};
    let data = Dataset::from_records(&synthetic_records(8, 10, 6), 10);
    let (x, y) = data.batch::<f32>(&(0..8).collect::<Vec<_>>(), None);
    let run = |on: bool| {
        set_parallel(on);
        let mut m = Model::<f32>::init(&ModelConfig::tiny(), 8).unwrap();
        let mut opt = AdamW::new(&m.params, AdamWConfig::default());
        let (loss, _) = train_step(&mut m, &mut opt, &x, &y, 1e-3).unwrap();
        let bits: Vec<u32> = m.params.values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        (loss.to_bits(), bits)
    };
    let (seq, par) = (run(false), run(true));
    assert!(seq == par);
}
