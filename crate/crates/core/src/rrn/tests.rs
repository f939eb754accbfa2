use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::toy::person_image;
use crate::imaging::ResolutionTag;

const H: usize = 32;
const W: usize = 16;

fn build(cfg: RrnConfig, seed: u64) -> (Rrn, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rrn = Rrn::new(cfg, H, W, &mut store, &mut rng).unwrap();
    (rrn, store)
}

fn compact() -> RrnConfig {
    RrnConfig::from_encoder(EncoderConfig::compact(4))
}

fn image() -> ImageTensor {
    person_image(2, 0, H, W, 5)
}

fn set_param(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("no param {name}"));
    store.value_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
}

#[test]
fn default_config_is_valid() {
    RrnConfig::default().validate(256, 128).unwrap();
    RrnConfig::from_encoder(EncoderConfig::single_branch()).validate(256, 128).unwrap();
    assert_eq!(RrnConfig::default().decoder.deconv_channels, [64, 32]);
}

#[test]
fn invalid_configs_rejected() {
    let mut e = EncoderConfig::compact(4);
    e.strides = vec![1, 2, 1, 1];
    assert!(matches!(e.validate(), Err(Error::Config(_))));
    let mut e = EncoderConfig::compact(4);
    e.skip_taps = vec![1, 2];
    assert!(e.validate().is_err());
    let mut e = EncoderConfig::compact(4);
    e.kernel_sizes = vec![2, 3, 5];
    assert!(e.validate().is_err());
    let mut cfg = compact();
    cfg.decoder.deconv_channels = [4, 8];
    assert!(matches!(cfg.validate(H, W), Err(Error::Config(_))));
    assert!(compact().validate(30, 16).is_err());
}

#[test]
fn reconstruct_preserves_shape_and_range() {
    let (rrn, store) = build(compact(), 1);
    let pair = rrn.reconstruct(&store, &image()).unwrap();
    for img in [&pair.hr, &pair.lr] {
        assert_eq!(img.tensor().shape(), &[3, H, W]);
        assert!(img.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn attention_weights_are_a_distribution() {
    let (rrn, store) = build(compact(), 2);
    let w = rrn.encode(&store, &image()).unwrap().weights.unwrap();
    assert_eq!(w.len(), 3);
    assert!(w.iter().all(|&v| v >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn equal_logits_average_branches() {
    let (rrn, mut store) = build(compact(), 3);
    // zero gamma makes the attention logits equal to beta
    set_param(&mut store, "rrn.encoder.attention.bn.weight", |_| 0.0);
    let mut g = Graph::new(&store, false);
    let x = g.input(Rrn::image_batch(&image()).unwrap());
    let enc = rrn.encode_vars(&mut g, x).unwrap();
    let w = g.value(enc.weights.unwrap()).data().to_vec();
    assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let fused = g.value(enc.fused);
    let outs: Vec<&Tensor> = enc.branch_outputs.iter().map(|&v| g.value(v)).collect();
    for (i, &f) in fused.data().iter().enumerate() {
        let mean = outs.iter().map(|t| t.data()[i]).sum::<f64>() / 3.0;
        assert!((f - mean).abs() < 1e-12);
    }
}

#[test]
fn saturated_logit_selects_one_branch() {
    let (rrn, mut store) = build(compact(), 4);
    set_param(&mut store, "rrn.encoder.attention.bn.weight", |_| 0.0);
    set_param(&mut store, "rrn.encoder.attention.bn.bias", |i| if i == 2 { 50.0 } else { 0.0 });
    let mut g = Graph::new(&store, false);
    let x = g.input(Rrn::image_batch(&image()).unwrap());
    let enc = rrn.encode_vars(&mut g, x).unwrap();
    let diff = g.value(enc.fused).max_abs_diff(g.value(enc.branch_outputs[2]));
    let scale = g.value(enc.branch_outputs[2]).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff <= 1e-18 * scale.max(1.0) + 1e-20);
}

#[test]
fn forward_is_pure() {
    let (rrn, store) = build(compact(), 5);
    let a = rrn.reconstruct(&store, &image()).unwrap();
    let b = rrn.reconstruct(&store, &image()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resolution_tag_is_ignored() {
    let (rrn, store) = build(compact(), 6);
    let hr = image();
    let lr = hr.clone().with_tag(ResolutionTag::LR3);
    assert_eq!(rrn.reconstruct(&store, &hr).unwrap(), rrn.reconstruct(&store, &lr).unwrap());
}

#[test]
fn decoders_do_not_share_parameters() {
    let (rrn, mut store) = build(compact(), 7);
    let enc = rrn.encode(&store, &image()).unwrap();
    let hr = rrn.decode_hr(&store, &enc).unwrap();
    let lr = rrn.decode_lr(&store, &enc).unwrap();
    assert!(hr.tensor().max_abs_diff(lr.tensor()) > 0.0);
    set_param(&mut store, "rrn.hr_decoder.out.bias", |_| 0.7);
    assert_eq!(rrn.decode_lr(&store, &enc).unwrap(), lr);
    assert_ne!(rrn.decode_hr(&store, &enc).unwrap(), hr);
}

#[test]
fn zero_input_decodes_to_half_gray() {
    let (rrn, mut store) = build(compact(), 8);
    for name in ["rrn.hr_decoder.deconv0.bias", "rrn.hr_decoder.deconv1.bias", "rrn.hr_decoder.out.bias"] {
        set_param(&mut store, name, |_| 0.0);
    }
    let enc = rrn.encode(&store, &image()).unwrap();
    let zero = EncoderOutput {
        fused: Tensor::zeros(enc.fused.shape()),
        skips: enc.skips.iter().map(|(l, t)| (*l, Tensor::zeros(t.shape()))).collect(),
        weights: None,
    };
    let out = rrn.decode_hr(&store, &zero).unwrap();
    assert!(out.tensor().data().iter().all(|&v| v == 0.5));
}

#[test]
fn mismatched_skip_is_config_error() {
    let (rrn, store) = build(compact(), 9);
    let mut enc = rrn.encode(&store, &image()).unwrap();
    enc.skips[0].1 = Tensor::zeros(&[4, 3, 3]);
    assert!(matches!(rrn.decode_hr(&store, &enc), Err(Error::Config(_))));
}

#[test]
fn single_branch_matches_shape_and_is_smaller() {
    let (multi, ms) = build(compact(), 10);
    let (single, ss) = build(RrnConfig::from_encoder(EncoderConfig::compact(4).into_single_branch()), 10);
    let a = multi.encode(&ms, &image()).unwrap();
    let b = single.single_branch_encode(&ss, &image()).unwrap();
    assert_eq!(a.fused.shape(), b.fused.shape());
    assert!(b.weights.is_none());
    assert!(ss.scalar_count() < ms.scalar_count());
    assert!(multi.single_branch_encode(&ms, &image()).is_err());
}

#[test]
fn single_branch_equals_one_hot_multi_kernel() {
    let (multi, mut ms) = build(compact(), 11);
    let (single, ss) = build(RrnConfig::from_encoder(EncoderConfig::compact(4).into_single_branch()), 12);
    for p in ss.params() {
        let name = p.name.replace("branch0", "branch1");
        let id = ms.find(&name).unwrap();
        *ms.value_mut(id) = p.value.clone();
    }
    set_param(&mut ms, "rrn.encoder.attention.bn.weight", |_| 0.0);
    set_param(&mut ms, "rrn.encoder.attention.bn.bias", |i| if i == 1 { 1e3 } else { -1e3 });
    let a = multi.encode(&ms, &image()).unwrap();
    let b = single.single_branch_encode(&ss, &image()).unwrap();
    assert_eq!(a.weights.unwrap(), vec![0.0, 1.0, 0.0]);
    assert_eq!(a.fused, b.fused);
    assert_eq!(a.skips, b.skips);
    assert_eq!(multi.reconstruct(&ms, &image()).unwrap(), single.reconstruct(&ss, &image()).unwrap());
}

#[test]
fn non_finite_weights_raise_numeric_fault() {
    let (rrn, mut store) = build(compact(), 13);
    set_param(&mut store, "rrn.encoder.branch1.conv2.weight", |_| f64::NAN);
    match rrn.reconstruct(&store, &image()) {
        Err(Error::NumericFault { layer, .. }) => assert_eq!(layer, 2),
        other => panic!("expected numeric fault, got {other:?}"),
    }
}

#[test]
fn full_size_config_preserves_shape() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rrn = Rrn::new(RrnConfig::from_encoder(EncoderConfig::compact(2)), 256, 128, &mut store, &mut rng).unwrap();
    let img = person_image(0, 0, 256, 128, 0);
    let pair = rrn.reconstruct(&store, &img).unwrap();
    assert_eq!(pair.hr.tensor().shape(), &[3, 256, 128]);
    assert_eq!(pair.lr.tensor().shape(), &[3, 256, 128]);
}
