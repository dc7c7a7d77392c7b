use super::*;
use crate::nn::{apply_bn_updates, AdamConfig, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec([n, 1, size, size], (0..n * size * size).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn every_desk_combination_maps_to_probabilities() {
    for &d in DecoderKind::ALL {
        for &e in EncoderKind::ALL {
            let m = build_segmentation_model(&ModelConfig::desk(d, e)).unwrap();
            let y = m.predict_batch(&noise(2, 64, 1)).unwrap();
            assert_eq!(y.shape(), [2, 1, 64, 64], "{d}/{e}");
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{d}/{e}");
        }
    }
}

#[test]
fn constant_input_gives_near_constant_output() {
    for &d in DecoderKind::ALL {
        let m = build_segmentation_model(&ModelConfig::desk(d, EncoderKind::Densenet121)).unwrap();
        let y = m.predict_batch(&Tensor::full([1, 1, 64, 64], 0.5)).unwrap();
        let (lo, hi) = y.data().iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi - lo < 0.2, "{d}: spread {}", hi - lo);
    }
}

#[test]
fn input_size_must_match_downsampling() {
    let mut c = ModelConfig::desk(DecoderKind::Unet, EncoderKind::Resnet50);
    c.input_size = 60;
    assert!(build_segmentation_model(&c).is_err());
    assert!("unet++".parse::<DecoderKind>().is_err());
    assert_eq!("UNETPP".parse::<DecoderKind>().unwrap(), DecoderKind::Unetpp);
}

#[test]
fn freezing_moves_encoder_to_non_trainable() {
    let mut m = build_segmentation_model(&ModelConfig::desk(DecoderKind::Unet, EncoderKind::Densenet121)).unwrap();
    let open = m.count_params();
    let enc = m.store().group_counts(ParamGroup::Encoder);
    m.set_encoder_frozen(true);
    let frozen = m.count_params();
    assert_eq!(frozen.trainable, open.trainable - enc.trainable);
    assert_eq!(frozen.total(), open.total());
    assert_eq!(m.store().group_counts(ParamGroup::Encoder).trainable, 0);
    m.set_encoder_frozen(false);
    assert_eq!(m.count_params(), open);
}

#[test]
fn frozen_classifier_trains_only_its_head() {
    let mut m = build_classifier(EncoderKind::Resnet50, Scale::Desk, None, 0).unwrap();
    m.set_encoder_frozen(true);
    let c = m.count_params();
    let head = m.store().group_counts(ParamGroup::Head);
    assert_eq!(c.trainable, head.trainable);
    assert_eq!(head.trainable, 64 * 2 + 2);
}

fn bn(c: usize) -> (usize, usize) {
    (2 * c, 2 * c)
}

fn conv(cin: usize, cout: usize, k: usize) -> (usize, usize) {
    (cin * cout * k * k, 0)
}

fn tally(parts: &[(usize, usize)]) -> ParamCounts {
    ParamCounts {
        trainable: parts.iter().map(|p| p.0).sum(),
        non_trainable: parts.iter().map(|p| p.1).sum(),
    }
}

#[test]
fn desk_unet_densenet_matches_hand_tally() {
    let mut parts = vec![conv(1, 8, 3), bn(8), conv(8, 8, 3), bn(8)];
    // first dense block: 6 units, growth 4, bottleneck 16
    let mut c = 8;
    for _ in 0..6 {
        parts.extend([bn(c), conv(c, 16, 1), bn(16), conv(16, 4, 3)]);
        c += 4;
    }
    parts.extend([bn(c), conv(c, c / 2, 1)]);
    c /= 2;
    for _ in 0..12 {
        parts.extend([bn(c), conv(c, 16, 1), bn(16), conv(16, 4, 3)]);
        c += 4;
    }
    parts.push(bn(c));
    assert_eq!(c, 64);
    // decoder levels 2, 1, 0, all 8 wide
    for cin in [64 + 32, 8 + 8, 8 + 8] {
        parts.extend([conv(cin, 8, 3), bn(8), conv(8, 8, 3), bn(8)]);
    }
    parts.push((8 * 9 + 1, 0));
    let m = build_segmentation_model(&ModelConfig::desk(DecoderKind::Unet, EncoderKind::Densenet121)).unwrap();
    assert_eq!(m.count_params(), tally(&parts));
}

#[test]
fn classifier_scores_are_a_distribution() {
    for &e in EncoderKind::ALL {
        let m = build_classifier(e, Scale::Desk, None, 3).unwrap();
        let p = m.class_probabilities(&noise(3, 64, 2)).unwrap();
        assert_eq!(p.len(), 3);
        for pair in p {
            assert!((pair[0] + pair[1] - 1.0).abs() < 1e-6);
        }
    }
    let m = build_classifier(EncoderKind::Resnet50, Scale::Desk, None, 3).unwrap();
    assert!(m.layer_names().contains(&m.default_cam_layer()));
    assert_eq!(m.default_cam_layer(), "encoder.stage3");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_segmentation_model(&ModelConfig::desk(DecoderKind::Dla, EncoderKind::Inceptionv3).with_seed(5)).unwrap();
    m.set_encoder_frozen(true);
    // move running stats away from their defaults
    let mut g = Graph::training(m.store());
    let x = g.input(noise(2, 64, 8));
    m.forward(&mut g, x);
    let ups = g.into_bn_updates();
    apply_bn_updates(m.store_mut(), &ups, 0.5);
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = ModelHandle::load(&path).unwrap();
    assert_eq!(back.count_params(), m.count_params());
    assert_eq!(back.config(), m.config());
    let x = noise(2, 64, 4);
    let (a, b) = (m.predict_batch(&x).unwrap(), back.predict_batch(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(read_header(&path).unwrap().schema_version, SCHEMA_VERSION);
}

#[test]
fn checkpoint_carries_optimizer_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_classifier(EncoderKind::Densenet121, Scale::Desk, None, 1).unwrap();
    let mut adam = AdamState::new(m.store());
    let mut g = Graph::training(m.store());
    let x = g.input(noise(2, 64, 1));
    let y = m.forward(&mut g, x);
    let grads = g.backward(vec![(y, Tensor::full([2, 2, 1, 1], 1.0))], &[]);
    let pg = grads.params().clone();
    drop(g);
    adam.update(&AdamConfig::default(), m.store_mut(), &pg);
    let state = TrainingState {
        adam: adam.clone(),
        meta: serde_json::json!({"epochs_done": 1}),
    };
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &m, Some(&state)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.training, Some(state));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    std::fs::write(&p, b"hello").unwrap();
    assert!(matches!(ModelHandle::load(&p), Err(Error::Checkpoint(_))));
    let m = build_classifier(EncoderKind::Resnet50, Scale::Desk, None, 0).unwrap();
    m.save(&p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 16);
    std::fs::write(&p, bytes).unwrap();
    assert!(ModelHandle::load(&p).is_err());
}

#[test]
fn pretrained_encoder_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::desk(DecoderKind::Unet, EncoderKind::Chexnet);
    let plain = build_segmentation_model(&cfg).unwrap();
    assert!(plain.init_record().note.is_some());

    cfg.pretrained = Some(WeightSource {
        name: "chexnet".into(),
        path: dir.path().join("missing.ckpt"),
        sha256: None,
    });
    match build_segmentation_model(&cfg) {
        Err(Error::MissingWeights { source_name, .. }) => assert_eq!(source_name, "chexnet"),
        other => panic!("expected missing weights, got {other:?}"),
    }

    // a classifier checkpoint with a different seed serves as the weight file
    let donor = build_classifier(EncoderKind::Chexnet, Scale::Desk, None, 77).unwrap();
    let path = dir.path().join("chexnet.ckpt");
    donor.save(&path).unwrap();
    cfg.pretrained.as_mut().unwrap().path = path.clone();
    let m = build_segmentation_model(&cfg).unwrap();
    let id = m.store().find("encoder.stem.conv.weight").unwrap();
    let did = donor.store().find("encoder.stem.conv.weight").unwrap();
    assert_eq!(m.store().data(id), donor.store().data(did));
    assert!(m.init_record().sha256.is_some());

    cfg.pretrained.as_mut().unwrap().sha256 = Some("00".repeat(32));
    assert!(build_segmentation_model(&cfg).is_err());
}

#[test]
#[ignore = "builds full-width networks"]
fn paper_scale_counts() {
    for &e in EncoderKind::ALL {
        for &d in DecoderKind::ALL {
            let m = build_segmentation_model(&ModelConfig::new(d, e, false, Scale::Paper)).unwrap();
            let c = m.count_params();
            println!("{d}/{e}: trainable {} non-trainable {}", c.trainable, c.non_trainable);
        }
    }
}
