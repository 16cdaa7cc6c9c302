//! Worked examples and shape contracts for the tensor ops, encoder, decoder
//! and data pipeline.

use std::collections::HashMap;

use deco_core::autograd::{ConvGeom, PadMode, ResizeMode, Tape};
use deco_core::config::ModelConfig;
use deco_core::data::{generate_dataset, generate_scene, read_dataset, write_dataset, CocoFile, DatasetSpec};
use deco_core::decoder::{init_queries, CimBlock, Decoder, ForwardTrace, Head};
use deco_core::encoder::{Backbone, Encoder, EncoderConfig, FeatureMap};
use deco_core::model::Deco;
use deco_core::nn::{ConvNextBlock, LAYER_NORM_EPS};
use deco_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_queries: 25,
        query_shape: [5, 5],
        decoder_layers: 2,
        sim_kernel: 5,
        cim_kernel: 5,
        backbone_channels: vec![4, 4, 8, 8, 16],
        stage_blocks: [1, 1, 1],
        stage_dims: [16, 24, 16],
        block_kernel: 3,
        ..ModelConfig::toy()
    }
}

#[test]
fn conv_of_ones_counts_window_cells() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 3, 3]));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, None, ConvGeom::new(1, 1, 1)).unwrap();
    assert_eq!(t.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = Tensor::<f64>::randn(&[3, 5, 4], 1.0, &mut r);
    let mut k = vec![0.0; 3 * 9];
    for c in 0..3 {
        k[c * 9 + 4] = 1.0;
    }
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::from_vec(&[3, 1, 3, 3], k).unwrap());
    let y = t.conv2d(xv, w, None, ConvGeom::new(1, 1, 3)).unwrap();
    assert_eq!(t.value(y), x.data());
}

#[test]
fn linear_hand_example() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
    let w = t.constant(Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap());
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y), &[3.0, -1.0]);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let g = t.constant(Tensor::ones(&[3]));
    let b = t.constant(Tensor::zeros(&[3]));
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    close(t.value(y), &[-1.2247, 0.0, 1.2247], 1e-3);

    let c = t.constant(Tensor::full(&[4, 2, 2], 7.0));
    let g4 = t.constant(Tensor::ones(&[4]));
    let b4 = t.constant(Tensor::zeros(&[4]));
    let y = t.layer_norm(c, g4, b4, 1e-6).unwrap();
    assert!(t.value(y).iter().all(|&v| v == 0.0));

    let z = t.constant(Tensor::zeros(&[4]));
    let beta = t.constant(Tensor::full(&[4], 0.3));
    let x = t.constant(Tensor::from_vec(&[4, 1], vec![1.0, -2.0, 5.0, 0.5]).unwrap());
    let y = t.layer_norm(x, z, beta, 1e-6).unwrap();
    close(t.value(y), &[0.3; 4], 1e-15);
}

#[test]
fn gelu_reference_points() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(&[3], vec![0.0, 1.0, -10.0]).unwrap());
    let y = t.gelu(x);
    let v = t.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.8413).abs() < 1e-3);
    assert!(v[2].abs() < 1e-6);
}

/// Bilinear resize written straight from the half-pixel mapping.
fn resize_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = t.resize(x, 4, 4, ResizeMode::Bilinear).unwrap();
    close(t.value(y), &resize_oracle(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4), 1e-12);
    close(&t.value(y)[..4], &[0.0, 0.25, 0.75, 1.0], 1e-12);
    close(&t.value(y)[4..8], &[0.5, 0.75, 1.25, 1.5], 1e-12);
}

#[test]
fn bilinear_matches_oracle_both_directions() {
    let mut r = rng(2);
    for &(h, w, oh, ow) in &[(5, 5, 4, 4), (4, 6, 5, 5), (3, 7, 9, 2), (6, 4, 6, 4)] {
        let x = Tensor::<f64>::randn(&[1, h, w], 1.0, &mut r);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let y = t.resize(v, oh, ow, ResizeMode::Bilinear).unwrap();
        close(t.value(y), &resize_oracle(x.data(), h, w, oh, ow), 1e-12);
    }
}

#[test]
fn resize_identity_size_is_identity() {
    let x = Tensor::<f64>::randn(&[2, 3, 5], 1.0, &mut rng(3));
    for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let y = t.resize(v, 3, 5, mode).unwrap();
        assert_eq!(t.value(y), x.data());
    }
}

#[test]
fn pool_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(&[1, 4, 4], (1..=16).map(f64::from).collect()).unwrap());
    let y = t.adaptive_max_pool(x, 2, 2).unwrap();
    assert_eq!(t.value(y), &[6.0, 8.0, 14.0, 16.0]);
    let same = t.adaptive_max_pool(x, 4, 4).unwrap();
    assert_eq!(t.value(same), t.value(x));
    let row = t.constant(Tensor::from_vec(&[1, 1, 3], vec![1.0, 5.0, 2.0]).unwrap());
    let y = t.adaptive_max_pool(row, 1, 2).unwrap();
    assert_eq!(t.value(y), &[5.0, 5.0]);
    assert!(t.adaptive_max_pool(row, 1, 4).is_err());
}

#[test]
fn softmax_xent_examples() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
    let a = t.softmax_xent(l, &[0], None).unwrap();
    assert!((t.scalar(a) - std::f64::consts::LN_2).abs() < 1e-12);
    let b = t.softmax_xent(l, &[1], Some(&[1.0, 0.1])).unwrap();
    assert!((t.scalar(b) - 0.1 * std::f64::consts::LN_2).abs() < 1e-12);
    let shifted = t.constant(Tensor::from_vec(&[1, 2], vec![40.0, 40.0]).unwrap());
    let c = t.softmax_xent(shifted, &[0], None).unwrap();
    assert!((t.scalar(c) - t.scalar(a)).abs() < 1e-6);
    assert!(t.softmax_xent(l, &[2], None).is_err());
}

#[test]
fn backward_of_sum_is_ones_and_needs_a_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::randn(&[2, 3], 1.0, &mut rng(4)), true);
    let s = t.sum(x);
    assert_eq!(t.backward(s).unwrap().wrt(x).unwrap(), &[1.0; 6]);
    assert!(t.backward(x).is_err());
}

#[test]
fn backbone_output_sizes_round_up() {
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &[4, 4, 4, 4, 6], &mut rng(5)).unwrap();
    for (h, w, fh, fw) in [(256, 256, 8, 8), (128, 192, 4, 6), (250, 250, 8, 8), (33, 32, 2, 1)] {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, h, w]));
        let f = bb.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.shape(f.var), &[6, fh, fw]);
        assert_eq!(f.stride, 32);
    }
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 31, 64]));
    assert!(bb.forward(&mut t, &store, x).is_err());
}

fn encoder(store: &mut ParamStore<f64>, d: usize, dims: [usize; 3]) -> Encoder {
    let cfg = EncoderConfig {
        backbone_channels: vec![4, 4, 4, 4, d],
        proj_dim: d,
        stage_blocks: [1, 2, 1],
        stage_dims: dims,
        block_kernel: 3,
    };
    Encoder::new(store, d, &cfg, &mut rng(6)).unwrap()
}

#[test]
fn encoder_preserves_spatial_dims() {
    let mut store = ParamStore::<f64>::new();
    let enc = encoder(&mut store, 8, [8, 12, 16]);
    assert_eq!(enc.channel_trace(), [8, 8, 12, 16, 8]);
    for (h, w) in [(8, 8), (5, 7), (4, 6)] {
        let mut t = Tape::new();
        let z0 = t.constant(Tensor::randn(&[8, h, w], 1.0, &mut rng(7)));
        let z = enc.forward(&mut t, &store, FeatureMap { var: z0, stride: 32 }).unwrap();
        assert_eq!(t.shape(z.var), &[8, h, w]);
    }
}

#[test]
fn paper_scale_channel_trace() {
    let mut store = ParamStore::<f32>::new();
    let cfg = ModelConfig::paper();
    let enc = Encoder::new(&mut store, 8, &EncoderConfig::from(&cfg), &mut rng(8)).unwrap();
    assert_eq!(enc.channel_trace(), [256, 120, 240, 480, 256]);
}

#[test]
fn circular_encoder_commutes_with_shifts() {
    let mut store = ParamStore::<f64>::new();
    let mut enc = encoder(&mut store, 8, [8, 12, 16]);
    enc.set_pad_mode(PadMode::Circular);
    let z0 = Tensor::<f64>::randn(&[8, 6, 7], 1.0, &mut rng(9));
    let run = |x: Tensor<f64>| {
        let mut t = Tape::new();
        let v = t.constant(x);
        let z = enc.forward(&mut t, &store, FeatureMap { var: v, stride: 32 }).unwrap();
        t.tensor(z.var)
    };
    let a = run(z0.roll2d(1, 1).unwrap());
    let b = run(z0).roll2d(1, 1).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
}

#[test]
fn zero_residuals_reduce_encoder_to_projections() {
    let mut store = ParamStore::<f64>::new();
    let enc = encoder(&mut store, 8, [8, 8, 8]);
    enc.zero_residual_branches(&mut store);
    let z0 = Tensor::<f64>::randn(&[8, 3, 3], 1.0, &mut rng(10));
    let mut t = Tape::new();
    let v = t.constant(z0);
    let z = enc.forward(&mut t, &store, FeatureMap { var: v, stride: 32 }).unwrap();
    // Equal stage widths mean no transitions, so only the output projection acts.
    let p = |t: &mut Tape<f64>, name: &str| {
        let tensor = store.by_name(&format!("encoder.output_proj.{name}")).unwrap().tensor.clone();
        t.constant(tensor)
    };
    let (g, b, w, bias) = (p(&mut t, "norm.gamma"), p(&mut t, "norm.beta"), p(&mut t, "conv.weight"), p(&mut t, "conv.bias"));
    let n = t.layer_norm(v, g, b, LAYER_NORM_EPS).unwrap();
    let want = t.conv2d(n, w, Some(bias), ConvGeom::new(1, 0, 1)).unwrap();
    assert_eq!(t.value(z.var), t.value(want));
}

#[test]
fn block_impulse_stays_in_kernel_window() {
    let mut store = ParamStore::<f64>::new();
    let block = ConvNextBlock::new(&mut store, "b", 4, 3, &mut rng(11)).unwrap();
    let mut x = Tensor::<f64>::zeros(&[4, 9, 9]);
    for c in 0..4 {
        x.data_mut()[(c * 9 + 4) * 9 + 4] = 1.0;
    }
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = block.forward(&mut t, &store, v).unwrap();
    let out = t.tensor(y);
    assert_eq!(out.shape(), x.shape());
    // The block's non-linearities leave a constant response of a zero
    // input; responses differing from it must sit within one cell.
    let mut zt = Tape::new();
    let zv = zt.constant(Tensor::zeros(&[4, 9, 9]));
    let zy = block.forward(&mut zt, &store, zv).unwrap();
    let base = zt.tensor(zy);
    for c in 0..4 {
        for yy in 0..9 {
            for xx in 0..9 {
                let diff = (out.at(&[c, yy, xx]) - base.at(&[c, yy, xx])).abs();
                if yy.abs_diff(4) > 1 || xx.abs_diff(4) > 1 {
                    assert_eq!(diff, 0.0, "({c},{yy},{xx})");
                }
            }
        }
    }

    block.pw2.zero_init(&mut store);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = block.forward(&mut t, &store, v).unwrap();
    assert_eq!(t.value(y), x.data());
}

#[test]
fn query_grid_shapes() {
    let mut store = ParamStore::<f32>::new();
    let id = init_queries(&mut store, 100, 10, 10, 64, &mut rng(12)).unwrap();
    assert_eq!(store.get(id).tensor.shape(), &[64, 10, 10]);
    let mut store = ParamStore::<f32>::new();
    assert!(init_queries(&mut store, 300, 30, 10, 8, &mut rng(12)).is_ok());
    assert!(init_queries(&mut store, 100, 7, 13, 8, &mut rng(12)).is_err());
}

fn cim_trace(q: [usize; 2], feature: [usize; 2]) -> (ForwardTrace, [usize; 3]) {
    let cfg = ModelConfig {
        hidden_dim: 8,
        ..ModelConfig::toy()
    };
    let mut store = ParamStore::<f64>::new();
    let cim = CimBlock::new(&mut store, "cim", &cfg, &mut rng(13)).unwrap();
    let mut t = Tape::new();
    let qv = t.constant(Tensor::randn(&[8, q[0], q[1]], 1.0, &mut rng(14)));
    let z = t.constant(Tensor::randn(&[8, feature[0], feature[1]], 1.0, &mut rng(15)));
    let mut trace = ForwardTrace::default();
    let out = cim.forward(&mut t, &store, qv, z, &mut trace).unwrap();
    let s = t.shape(out);
    (trace, [s[0], s[1], s[2]])
}

#[test]
fn cim_internal_follows_features() {
    let (trace, out) = cim_trace([10, 10], [8, 8]);
    assert_eq!(trace.cim[0].internal, [8, 8, 8]);
    assert_eq!(out, [8, 10, 10]);
    let (trace, out) = cim_trace([5, 5], [4, 6]);
    assert_eq!(trace.cim[0].internal, [8, 4, 6]);
    assert_eq!(out, [8, 5, 5]);
}

#[test]
fn cim_zero_queries_with_zero_branches_give_zero() {
    let cfg = ModelConfig {
        hidden_dim: 8,
        ..ModelConfig::toy()
    };
    let mut store = ParamStore::<f64>::new();
    let cim = CimBlock::new(&mut store, "cim", &cfg, &mut rng(16)).unwrap();
    cim.zero_residual_branches(&mut store);
    let mut t = Tape::new();
    let q = t.constant(Tensor::zeros(&[8, 5, 5]));
    let z = t.constant(Tensor::randn(&[8, 4, 4], 1.0, &mut rng(17)));
    let out = cim.forward(&mut t, &store, q, z, &mut ForwardTrace::default()).unwrap();
    assert!(t.value(out).iter().all(|&v| v == 0.0));

    let z7 = t.constant(Tensor::randn(&[7, 4, 4], 1.0, &mut rng(17)));
    assert!(cim.forward(&mut t, &store, q, z7, &mut ForwardTrace::default()).is_err());
}

#[test]
fn decoder_emits_one_set_per_layer() {
    for layers in [1, 6] {
        let cfg = ModelConfig {
            decoder_layers: layers,
            ..small_model()
        };
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, &cfg, &mut rng(18)).unwrap();
        let mut t = Tape::new();
        let z = t.constant(Tensor::randn(&[16, 4, 4], 1.0, &mut rng(19)));
        let mut trace = ForwardTrace::default();
        let sets = dec.forward(&mut t, &store, z, &mut trace).unwrap();
        assert_eq!(sets.len(), layers);
        assert_eq!(trace.cim.len(), layers);
        for s in sets {
            assert_eq!(t.shape(s.logits), &[25, 4]);
            assert_eq!(t.shape(s.boxes), &[25, 4]);
        }
    }
}

#[test]
fn head_contracts() {
    let mut store = ParamStore::<f64>::new();
    let head = Head::new(&mut store, 8, 3, &mut rng(20)).unwrap();
    let q = Tensor::<f64>::randn(&[8, 3, 4], 2.0, &mut rng(21));
    let mut t = Tape::new();
    let qv = t.constant(q.clone());
    let out = head.forward(&mut t, &store, qv).unwrap();
    assert_eq!(t.shape(out.logits), &[12, 4]);
    assert!(t.value(out.boxes).iter().all(|&b| b > 0.0 && b < 1.0));

    // Swap grid cells 0 and 5; rows 0 and 5 of the output swap with them.
    let mut swapped = q.clone();
    for c in 0..8 {
        let (a, b) = (c * 12, c * 12 + 5);
        swapped.data_mut().swap(a, b);
    }
    let sv = t.constant(swapped);
    let out2 = head.forward(&mut t, &store, sv).unwrap();
    let (l1, l2) = (t.tensor(out.logits), t.tensor(out2.logits));
    for k in 0..4 {
        assert_eq!(l1.at(&[0, k]), l2.at(&[5, k]));
        assert_eq!(l1.at(&[5, k]), l2.at(&[0, k]));
        assert_eq!(l1.at(&[3, k]), l2.at(&[3, k]));
    }

    head.zero_box_branch(&mut store);
    let mut t = Tape::new();
    let qv = t.constant(q);
    let out = head.forward(&mut t, &store, qv).unwrap();
    assert!(t.value(out.boxes).iter().all(|&b| b == 0.5));
}

#[test]
fn loss_reaches_queries_and_every_block() {
    use deco_core::criterion::set_prediction_loss;
    use deco_core::matching::{CostWeights, GroundTruth};
    use deco_core::boxgeom::BoxCxCyWh;

    let (model, store) = Deco::new::<f64>(&small_model(), 3).unwrap();
    let image = Tensor::<f64>::randn(&[3, 64, 96], 1.0, &mut rng(22));
    let mut t = Tape::new();
    let out = model.forward(&mut t, &store, image).unwrap();
    let gts = [
        GroundTruth { class: 0, bbox: BoxCxCyWh::new(0.3, 0.4, 0.2, 0.3) },
        GroundTruth { class: 2, bbox: BoxCxCyWh::new(0.7, 0.6, 0.25, 0.2) },
    ];
    let loss = set_prediction_loss(&mut t, &out.per_layer, &gts, &CostWeights::default()).unwrap();
    let grads = t.backward(loss.total).unwrap();
    let per_param = grads.param_grads(&store);
    let mut zero = Vec::new();
    for ((_, p), g) in store.iter().zip(&per_param) {
        if g.iter().all(|&v| v == 0.0) {
            zero.push(p.name.clone());
        }
    }
    assert!(zero.is_empty(), "no gradient reached {zero:?}");
}

#[test]
fn model_always_emits_n_rows() {
    let (model, store) = Deco::new::<f32>(&small_model(), 4).unwrap();
    let spec = DatasetSpec {
        objects: [0, 0],
        ..DatasetSpec::default()
    };
    let mut images = vec![generate_scene(&spec, 0).image];
    for objects in [[1, 1], [12, 12]] {
        let spec = DatasetSpec {
            objects,
            size_range: [10, 20],
            ..DatasetSpec::default()
        };
        let scene = generate_scene(&spec, 1);
        assert_eq!(scene.objects.len(), objects[0]);
        images.push(scene.image);
    }
    for img in images {
        let set = model.predict(&store, img).unwrap();
        assert_eq!(set.len(), 25);
    }
}

#[test]
fn generated_boxes_stay_inside_the_image() {
    let spec = DatasetSpec {
        count: 1000,
        ..DatasetSpec::default()
    };
    let (h, w) = (spec.height() as f64, spec.width() as f64);
    for s in generate_dataset(&spec) {
        for o in &s.objects {
            let b = o.bbox.to_xyxy().scale(w, h);
            assert!(0.0 < b.x1 && b.x1 < b.x2 && b.x2 <= w, "{b:?}");
            assert!(0.0 < b.y1 && b.y1 < b.y2 && b.y2 <= h, "{b:?}");
            assert!(b.width() >= 4.0 && b.height() >= 4.0);
            assert!(o.class < spec.num_classes);
        }
    }
}

#[test]
fn classes_are_balanced() {
    let spec = DatasetSpec {
        count: 10_000,
        image_size: [40, 40],
        size_range: [6, 12],
        noise: 0.0,
        ..DatasetSpec::default()
    };
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut total = 0usize;
    for s in generate_dataset(&spec) {
        for o in &s.objects {
            *counts.entry(o.class).or_default() += 1;
            total += 1;
        }
    }
    let p = 1.0 / 3.0;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    for k in 0..3 {
        let dev = (counts[&k] as f64 - total as f64 * p).abs();
        assert!(dev <= 3.0 * sigma, "class {k}: {} of {total}", counts[&k]);
    }
}

#[test]
fn coco_roundtrip_keeps_boxes_and_classes() {
    let spec = DatasetSpec {
        count: 12,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &scenes, spec.num_classes).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects.len(), b.objects.len());
        for (x, y) in a.objects.iter().zip(&b.objects) {
            assert_eq!(x.class, y.class);
            let (px, py) = (x.bbox.to_xyxy().scale(128.0, 128.0), y.bbox.to_xyxy().scale(128.0, 128.0));
            close(&px.to_array(), &py.to_array(), 1e-6);
        }
    }
    let file = CocoFile::from_scenes(&scenes, 3);
    assert_eq!(file.categories.len(), 3);
}
