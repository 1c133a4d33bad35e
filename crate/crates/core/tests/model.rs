use std::time::Instant;

use candle_core::{DType, Device, IndexOp, Tensor};
use proptest::prelude::*;
use truvil_core::backbone::{pyramid_sizes, stage_specs, Aggregator, BlockOptions, StageSpec, UniformerBlock};
use truvil_core::decoder::{binarize, AttentiveNoiseDecoder, LocalizationMap, MlpFuse};
use truvil_core::noise_residual::NoiseFeature;
use truvil_core::objectives::{hybrid_loss, LossConfig};
use truvil_core::ops;
use truvil_core::{ModelConfig, ParamStore, TruVil};

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn uniform_clip(seed: u64, shape: &[usize]) -> Tensor {
    let x = randn(seed, shape);
    ops::sigmoid(&x).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
}

#[test]
fn full_resolution_shape_trace() {
    let dev = Device::Cpu;
    let cfg = ModelConfig::default();
    let store = ParamStore::new(0, DType::F32, &dev).inference_view();
    let model = TruVil::new(&cfg, &store).unwrap();
    let clip = uniform_clip(1, &[1, 5, 3, 240, 432]);
    let start = Instant::now();
    let out = model.forward_full(&clip).unwrap();
    eprintln!("default preset forward at 240x432: {:.1?}", start.elapsed());

    let sizes = pyramid_sizes(240, 432);
    assert_eq!(sizes, [(60, 108), (30, 54), (15, 27), (8, 14)]);
    let want = [
        (cfg.widths[0], sizes[0]),
        (cfg.widths[1], sizes[1]),
        (cfg.widths[2], sizes[2]),
        (cfg.widths[3], sizes[3]),
        (cfg.widths[3], sizes[3]),
    ];
    for (m, (c, (h, w))) in out.pyramid.members().iter().zip(want) {
        assert_eq!(m.dims(), &[1, 5, c, h, w]);
    }
    assert_eq!(out.fused.dims(), &[1, 5, cfg.unified_channels, 60, 108]);
    assert_eq!(out.probs.dims(), &[1, 1, 240, 432]);
    let p = out.probs.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn odd_sizes_follow_ceil_rule() {
    let store = ParamStore::new(0, DType::F32, &Device::Cpu).inference_view();
    let model = TruVil::new(&ModelConfig::toy(), &store).unwrap();
    let out = model.forward_full(&uniform_clip(2, &[2, 5, 3, 37, 50])).unwrap();
    let sizes = pyramid_sizes(37, 50);
    assert_eq!(sizes, [(10, 13), (5, 7), (3, 4), (2, 2)]);
    let dims: Vec<_> = out.pyramid.members().iter().map(|m| (m.dim(3).unwrap(), m.dim(4).unwrap())).collect();
    assert_eq!(dims, vec![sizes[0], sizes[1], sizes[2], sizes[3], sizes[3]]);
    assert_eq!(out.probs.dims(), &[2, 1, 37, 50]);
}

#[test]
fn wrong_clip_length_is_rejected() {
    let store = ParamStore::new(0, DType::F32, &Device::Cpu).inference_view();
    let model = TruVil::new(&ModelConfig::toy(), &store).unwrap();
    assert!(model.forward(&uniform_clip(0, &[1, 3, 3, 16, 16])).is_err());
    assert!(model.forward(&uniform_clip(0, &[1, 5, 1, 16, 16])).is_err());
}

fn block(aggregator: Aggregator, c: usize, store: &ParamStore) -> UniformerBlock {
    let spec = StageSpec {
        depth: 1,
        channels: c,
        aggregator,
        spatial_stride: 1,
    };
    let opts = BlockOptions {
        head_dim: 4,
        ..Default::default()
    };
    UniformerBlock::new(spec, opts, store.root().pp("b")).unwrap()
}

#[test]
fn zero_weight_block_is_identity() {
    for agg in [Aggregator::Local, Aggregator::Global] {
        let store = ParamStore::new(3, DType::F32, &Device::Cpu);
        let b = block(agg, 8, &store.inference_view());
        store.zero_all().unwrap();
        let x = randn(4, &[2, 3, 8, 5, 6]);
        assert_eq!(max_abs_diff(&b.forward(&x).unwrap(), &x), 0.0, "{agg:?}");
    }
}

#[test]
fn global_attention_rows_are_distributions() {
    let store = ParamStore::new(5, DType::F32, &Device::Cpu).inference_view();
    let b = block(Aggregator::Global, 8, &store);
    let map = b.attention_map(&randn(6, &[2, 2, 8, 3, 4])).unwrap();
    assert_eq!(map.dims(), &[2, 2, 24, 24]);
    let sums = map.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    assert!(map.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v >= 0.0));
    assert!(block(Aggregator::Local, 8, &store).attention_map(&randn(6, &[1, 2, 8, 3, 4])).is_err());
}

#[test]
fn streams_have_separate_weights() {
    let store = ParamStore::new(7, DType::F32, &Device::Cpu);
    let model = TruVil::new(&ModelConfig::toy(), &store.inference_view()).unwrap();
    let names: Vec<String> = store.vars().into_iter().map(|(n, _)| n).collect();
    let rgb: Vec<_> = names.iter().filter(|n| n.starts_with("encoder.rgb.")).collect();
    let noise: Vec<_> = names.iter().filter(|n| n.starts_with("encoder.noise.")).collect();
    assert!(!rgb.is_empty());
    assert_eq!(rgb.len(), noise.len());

    let clip = uniform_clip(8, &[1, 5, 3, 32, 32]);
    let noise0 = NoiseFeature {
        data: model.input_hp3d().forward(&clip).unwrap(),
        source_scale: 0,
    };
    let before = model.encoder().encode_traced(&clip, &noise0).unwrap();
    let name = "encoder.noise.stage1.embed.weight";
    let var = store.get(name).unwrap_or_else(|| panic!("{name} missing from {names:?}"));
    store.assign(name, &(var.as_tensor() * 2.0).unwrap()).unwrap();
    let after = model.encoder().encode_traced(&clip, &noise0).unwrap();
    assert_eq!(max_abs_diff(&before.rgb1, &after.rgb1), 0.0);
    assert_eq!(max_abs_diff(&before.rgb2, &after.rgb2), 0.0);
    assert!(max_abs_diff(&before.pyramid.f_n1.data, &after.pyramid.f_n1.data) > 0.0);
}

#[test]
fn same_seed_same_output() {
    let clip = uniform_clip(9, &[1, 5, 3, 24, 40]);
    let run = |seed| {
        let store = ParamStore::new(seed, DType::F32, &Device::Cpu).inference_view();
        TruVil::new(&ModelConfig::toy(), &store).unwrap().forward(&clip).unwrap()
    };
    let (a, b, c) = (run(11), run(11), run(12));
    assert_eq!(max_abs_diff(&a, &b), 0.0);
    assert!(max_abs_diff(&a, &c) > 0.0);
}

#[test]
fn mlp_fuse_targets_quarter_grid() {
    let store = ParamStore::new(13, DType::F32, &Device::Cpu).inference_view();
    let mlp = MlpFuse::new([4, 6, 8, 10, 10], 12, store.root().pp("mlp")).unwrap();
    let dims = [(4, 16, 20), (6, 8, 10), (8, 4, 5), (10, 2, 3), (10, 2, 3)];
    let members: Vec<Tensor> = dims
        .iter()
        .enumerate()
        .map(|(i, (c, h, w))| randn(20 + i as u64, &[2, 3, *c, *h, *w]))
        .collect();
    let refs: Vec<&Tensor> = members.iter().collect();
    assert_eq!(mlp.forward_members(&refs).unwrap().dims(), &[2, 3, 12, 16, 20]);
    assert!(mlp.forward_members(&refs[..4]).is_err());

    // spatially constant members give a spatially constant fusion
    let flat: Vec<Tensor> = dims
        .iter()
        .enumerate()
        .map(|(i, (c, h, w))| {
            randn(30 + i as u64, &[1, 1, *c, 1, 1]).broadcast_as((1, 1, *c, *h, *w)).unwrap().contiguous().unwrap()
        })
        .collect();
    let refs: Vec<&Tensor> = flat.iter().collect();
    let out = mlp.forward_members(&refs).unwrap();
    let corner = out.i((.., .., .., 0..1, 0..1)).unwrap().broadcast_as(out.dims()).unwrap();
    assert!(max_abs_diff(&out, &corner) < 1e-5);
}

#[test]
fn bilinear_resize_on_same_grid_is_exact() {
    let x = randn(40, &[2, 3, 7, 9]);
    assert_eq!(max_abs_diff(&ops::resize_bilinear(&x, 7, 9).unwrap(), &x), 0.0);
    let c = Tensor::full(0.25f32, (1, 2, 3, 4), &Device::Cpu).unwrap();
    let up = ops::resize_bilinear(&c, 12, 16).unwrap();
    assert!(max_abs_diff(&up, &Tensor::full(0.25f32, (1, 2, 12, 16), &Device::Cpu).unwrap()) < 1e-7);
}

fn decoder(store: &ParamStore) -> AttentiveNoiseDecoder {
    AttentiveNoiseDecoder::new(3, 8, 4, 6, store.root().pp("decoder")).unwrap()
}

#[test]
fn zero_decoder_gives_half_gate_and_half_map() {
    let store = ParamStore::new(14, DType::F32, &Device::Cpu);
    let dec = decoder(&store.inference_view());
    store.zero_all().unwrap();
    let trace = dec.decode_frame(&randn(15, &[2, 8, 4, 5]), &randn(16, &[2, 3, 16, 20])).unwrap();
    let half = Tensor::full(0.5f32, (2, 1, 16, 20), &Device::Cpu).unwrap();
    assert_eq!(max_abs_diff(&trace.gate, &half), 0.0);
    assert_eq!(max_abs_diff(&trace.probs, &half), 0.0);
}

#[test]
fn zero_noise_leaves_nothing_to_gate() {
    let store = ParamStore::new(17, DType::F32, &Device::Cpu).inference_view();
    let dec = decoder(&store);
    let zero = Tensor::zeros((1, 3, 16, 20), DType::F32, &Device::Cpu).unwrap();
    let trace = dec.decode_frame(&randn(18, &[1, 8, 4, 5]), &zero).unwrap();
    // conv biases start at zero
    assert_eq!(max_abs_diff(&trace.low, &trace.low.zeros_like().unwrap()), 0.0);
    assert_eq!(trace.gate.dims(), &[1, 1, 16, 20]);
}

#[test]
fn middle_frame_selection_commutes_with_decoding() {
    let store = ParamStore::new(19, DType::F32, &Device::Cpu).inference_view();
    let dec = decoder(&store);
    let f = randn(20, &[2, 5, 8, 4, 5]);
    let noise = NoiseFeature {
        data: randn(21, &[2, 5, 3, 16, 20]),
        source_scale: 0,
    };
    let mid = dec.forward(&f, &noise).unwrap();
    let all = dec.forward_all_frames(&f, &noise).unwrap();
    assert_eq!(all.dims(), &[2, 5, 1, 16, 20]);
    assert!(max_abs_diff(&mid, &all.i((.., 2)).unwrap()) < 1e-6);
}

#[test]
fn both_decoder_paths_receive_gradient() {
    let store = ParamStore::new(22, DType::F32, &Device::Cpu);
    let model = TruVil::new(&ModelConfig::toy(), &store).unwrap();
    let clip = uniform_clip(23, &[1, 5, 3, 32, 32]);
    let probs = model.forward(&clip).unwrap();
    let y = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let y = y.slice_assign(&[0..1, 0..1, 8..20, 8..20], &Tensor::ones((1, 1, 12, 12), DType::F32, &Device::Cpu).unwrap()).unwrap();
    let loss = hybrid_loss(&y, &probs, &LossConfig::default()).unwrap();
    let grads = loss.backward().unwrap();
    let norm = |name: &str| -> f32 {
        let var = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        g.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap()
    };
    assert!(norm("decoder.low.weight") > 0.0);
    assert!(norm("decoder.gate.weight") > 0.0);
    assert!(norm("mlp.fuse.weight") > 0.0);
    assert!(norm("encoder.rgb.stage1.embed.weight") > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_threshold_never_adds_positives(
        probs in proptest::collection::vec(0.0f32..=1.0, 1..64),
        a in 0.01f64..0.99,
        b in 0.01f64..0.99,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let map = LocalizationMap { width: probs.len(), height: 1, probs, frame_index: 0 };
        let m_lo = binarize(&map, lo).unwrap();
        let m_hi = binarize(&map, hi).unwrap();
        prop_assert!(m_hi.positives() <= m_lo.positives());
        for (h, l) in m_hi.data.iter().zip(&m_lo.data) {
            prop_assert!(h <= l);
        }
    }
}

#[test]
fn stage_specs_follow_widths() {
    let specs = stage_specs([16, 32, 48, 64], [1, 1, 2, 1]);
    assert_eq!(specs.map(|s| s.channels), [16, 32, 48, 64]);
    assert_eq!(specs.map(|s| s.spatial_stride), [4, 2, 2, 2]);
}
