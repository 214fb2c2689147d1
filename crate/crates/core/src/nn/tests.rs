use rand::Rng;

use super::*;
use crate::autodiff::{gradient_check_components, Tape};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = crate::rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn spec(kind: ArchKind, padding: Padding) -> ArchSpec {
    ArchSpec::new(kind, 2, 2, padding)
}

const KINDS: [ArchKind; 4] = [ArchKind::Encoder, ArchKind::Adjustment, ArchKind::Decoder, ArchKind::DilResnet];

#[test]
fn parameter_counts_match_closed_forms() {
    let enc = 5 * 5 * 2 * 32 + 32 + 5 * 5 * 32 * 16 + 16 + 5 * 5 * 16 * 2 + 2;
    assert_eq!(enc, 15_250);
    assert_eq!(spec(ArchKind::Encoder, Padding::Zero).parameter_count(), enc);
    let adj = (25 * 2 * 32 + 32) + 10 * (25 * 32 * 32 + 32) + (25 * 32 * 2 + 2);
    assert_eq!(spec(ArchKind::Adjustment, Padding::Zero).parameter_count(), adj);
    let dil = (9 * 2 * 32 + 32) + 28 * (9 * 32 * 32 + 32) + (9 * 32 * 2 + 2);
    assert_eq!(spec(ArchKind::DilResnet, Padding::Zero).parameter_count(), dil);
    let branch = (9 * 2 * 24 + 24) + 2 * (9 * 24 * 24 + 24);
    let dec = 3 * branch + (9 * 72 * 48 + 48) + (9 * 48 * 32 + 32) + 2 * (9 * 32 * 32 + 32) + (9 * 32 * 2 + 2);
    assert_eq!(spec(ArchKind::Decoder, Padding::Zero).parameter_count(), dec);

    let set: ModelSet<f32> = parameter_init(
        &ModelConfig { padding: Padding::Zero, extra_inputs: 0, roles: ModelRole::ALL.to_vec() },
        1,
    );
    let report = set.count_parameters();
    assert_eq!(report.counts[&ModelRole::Encoder], 15_250);
    assert!(report.within_budget(), "{report}");
}

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = ModelConfig::ato(Padding::Circular, 1);
    let a: ModelSet<f32> = parameter_init(&cfg, 42);
    let b: ModelSet<f32> = parameter_init(&cfg, 42);
    let c: ModelSet<f32> = parameter_init(&cfg, 43);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let enc = a.require(ModelRole::Encoder).unwrap();
    assert_eq!(enc.spec.in_channels, 3);
    let bound = 1.0 / ((3 * 25) as f32).sqrt();
    assert!(enc.layers[0].weights.data().iter().all(|w| w.abs() <= bound));
}

#[test]
fn zero_weights_give_zero_output() {
    let net = Network::<f64>::zeros(spec(ArchKind::Encoder, Padding::Zero));
    let y = net.infer(&random(&[2, 8, 8], 1)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_final_layer_gives_zero_output() {
    for kind in [ArchKind::Adjustment, ArchKind::DilResnet] {
        let mut net = Network::<f64>::init(spec(kind, Padding::Circular), 3);
        let last = net.layers.last_mut().unwrap();
        *last = ConvLayer::zeros(last.spec, last.padding);
        let y = net.infer(&random(&[2, 8, 8], 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "{kind:?}");
    }
}

#[test]
fn decoder_maps_zero_to_zero_with_zero_biases() {
    let mut net = Network::<f64>::init(spec(ArchKind::Decoder, Padding::Zero), 4);
    for l in &mut net.layers {
        l.bias = Tensor::zeros(l.bias.shape());
    }
    let y = net.infer(&Tensor::zeros(&[2, 8, 8])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_upsamples_by_four() {
    let net = Network::<f32>::init(spec(ArchKind::Decoder, Padding::Zero), 5);
    for n in [8, 16, 32] {
        let y = net.infer(&Tensor::zeros(&[2, n, n])).unwrap();
        assert_eq!(y.shape(), [2, 4 * n, 4 * n]);
    }
    let y = net.infer(&Tensor::zeros(&[2, 4, 8])).unwrap();
    assert_eq!(y.shape(), [2, 16, 32]);
}

#[test]
fn wrong_channel_count_is_rejected() {
    let net = Network::<f32>::init(spec(ArchKind::Encoder, Padding::Zero), 6);
    assert!(matches!(net.infer(&Tensor::zeros(&[3, 8, 8])), Err(Error::ShapeError { .. })));
}

fn roll(x: &[f32], c: usize, h: usize, w: usize, sy: usize, sx: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * h + (y + sy) % h) * w + (xx + sx) % w] = x[(ch * h + y) * w + xx];
            }
        }
    }
    out
}

#[test]
fn circular_networks_are_translation_equivariant() {
    for kind in KINDS {
        let net = Network::<f32>::init(spec(kind, Padding::Circular), 7);
        let (h, w) = (8, 12);
        let x: Tensor<f32> = random(&[2, h, w], 8).cast();
        let shifted = Tensor::new(&[2, h, w], roll(x.data(), 2, h, w, 1, 3)).unwrap();
        let up = net.spec.upscale();
        let y = net.infer(&x).unwrap();
        let ys = net.infer(&shifted).unwrap();
        let expected = roll(y.data(), 2, h * up, w * up, up, 3 * up);
        let scale = y.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (a, e) in ys.data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-5 * scale.max(1.0), "{kind:?}: {a} vs {e}");
        }
    }
}

#[test]
fn dil_resnet_influence_stays_inside_receptive_field() {
    let s = spec(ArchKind::DilResnet, Padding::Zero);
    assert_eq!(s.receptive_radius(), 1 + 4 * 22 + 1);
    let net = Network::<f64>::init(s, 9);
    let w = 220;
    let base = random(&[2, 1, w], 10);
    let mut poked = base.to_vec();
    let at = 20;
    poked[at] += 0.5;
    let a = net.infer(&base).unwrap();
    let b = net.infer(&Tensor::new(&[2, 1, w], poked).unwrap()).unwrap();
    let mut reach = 0;
    for c in 0..2 {
        for x in 0..w {
            if a.data()[c * w + x] != b.data()[c * w + x] {
                reach = reach.max(x.abs_diff(at));
            }
        }
    }
    assert!(reach <= s.receptive_radius(), "{reach}");
    // Well past what an undilated stack of the same depth could reach.
    assert!(reach > 30, "{reach}");
}

#[test]
fn flat_round_trip() {
    let mut net = Network::<f32>::init(spec(ArchKind::Encoder, Padding::Zero), 11);
    let flat = net.flat();
    assert_eq!(flat.len(), 15_250);
    let copy = net.clone();
    net.set_flat(&flat).unwrap();
    assert_eq!(net, copy);
    assert!(net.set_flat(&flat[1..]).is_err());
}

const EPS: f64 = 1e-6;

/// Gradient check over sampled parameter components of every layer.
///
/// The loss is a random linear readout of `y − y(θ₀)`. It vanishes at the
/// checked point, so its rounding error is far below one ulp of an O(1) loss,
/// which would otherwise swamp single-weight derivatives of order 1e-8.
fn check_network(kind: ArchKind, per_layer: usize, seed: u64) -> f64 {
    let net = Network::<f64>::init(spec(kind, Padding::Circular), seed);
    let x = random(&[2, 8, 8], seed + 1);
    let readout = random(&[2, 8 * net.spec.upscale(), 8 * net.spec.upscale()], seed + 2);
    let base = net.infer(&x).unwrap();
    let point: Vec<Tensor<f64>> = net.layers.iter().flat_map(|l| [l.weights.clone(), l.bias.clone()]).collect();
    let mut rng = crate::rng::stream(seed, &[3]);
    let mut comps = Vec::new();
    for (i, p) in point.iter().enumerate() {
        for _ in 0..per_layer.min(p.len()) {
            comps.push((i, rng.random_range(0..p.len())));
        }
    }
    let report = gradient_check_components(
        |tape, v| {
            let vars: Vec<LayerVars<'_, f64>> =
                v.chunks(2).map(|p| LayerVars { weights: p[0].clone(), bias: p[1].clone() }).collect();
            let y = net.forward(&vars, &tape.constant(x.clone()))?;
            Ok(y.sub(&tape.constant(base.clone()))?.mul(&tape.constant(readout.clone()))?.mean())
        },
        &point,
        &comps,
        EPS,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let e = check_network(ArchKind::Encoder, 40, 20);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn adjustment_gradient_matches_finite_differences() {
    let e = check_network(ArchKind::Adjustment, 6, 21);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let e = check_network(ArchKind::Decoder, 6, 22);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn dil_resnet_gradient_matches_finite_differences() {
    let e = check_network(ArchKind::DilResnet, 3, 23);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn conditioning_appends_constant_channels() {
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(random(&[2, 3, 4], 30));
    let y = with_conditioning(&x, &[400.0 * REYNOLDS_SCALE]).unwrap();
    assert_eq!(y.shape(), [3, 3, 4]);
    assert!(y.data()[24..].iter().all(|&v| (v - 400.0 / 1500.0).abs() < 1e-15));
    assert_eq!(&y.data()[..24], x.data());
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let models: ModelSet<f32> = parameter_init(&ModelConfig::ato(Padding::Zero, 0), 7);
    let meta = CheckpointMeta { seed: 7, step: 12, config_hash: "abc".into(), networks: Vec::new(), pipeline: None };
    let bytes = encode_checkpoint(&models, &meta).unwrap();
    let (back, m) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, models);
    assert_eq!(m.step, 12);
    assert_eq!(m.networks.len(), 3);
    assert_eq!(encode_checkpoint(&back, &m).unwrap(), bytes);

    let cut = bytes.len() - 10;
    match decode_checkpoint(&bytes[..cut]) {
        Err(Error::FormatError { offset, .. }) => assert_eq!(offset, cut as u64),
        other => panic!("unexpected {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::FormatError { offset: 0, .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(Error::FormatError { .. })));

    let wanted = ArchSpec::new(ArchKind::Encoder, 3, 2, Padding::Zero);
    assert!(matches!(expect_arch(&back, ModelRole::Encoder, &wanted), Err(Error::IncompatibleCheckpoint(_))));
    assert!(expect_arch(&back, ModelRole::Encoder, &ModelConfig::ato(Padding::Zero, 0).arch(ModelRole::Encoder)).is_ok());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &models, &meta).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().0, models);
}
