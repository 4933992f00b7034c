use ssldetect::augment::ImageSample;
use ssldetect::backbone::{BackboneConfig, Encoder, ProjectionConfig, BACKBONE_PREFIX, PROJECTION_PREFIX};
use ssldetect::detector::{assign_targets, detection_loss, Detector, HeadConfig};
use ssldetect::error::{CheckpointError, Error};
use ssldetect::finetune::*;
use ssldetect::io::checkpoint::{Checkpoint, CheckpointMeta};
use ssldetect::io::synth::{scene_for, SynthConfig};
use ssldetect::nn::{InitScheme, ParamKind};
use ssldetect::optim::Sgd;
use ssldetect::rng::rng_from;
use ssldetect::tensor::Tensor;

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        stage_channels: vec![8, 8, 16, 16],
        blocks_per_stage: vec![1, 1, 1, 1],
        ..Default::default()
    }
}

fn tiny_head() -> HeadConfig {
    HeadConfig {
        neck_channels: 8,
        ..Default::default()
    }
}

fn tiny_detector(seed: u64) -> Detector {
    Detector::new(&tiny_backbone(), &tiny_head(), seed).unwrap()
}

fn encoder_checkpoint(seed: u64) -> Checkpoint {
    let enc = Encoder::new(&tiny_backbone(), &ProjectionConfig::default(), seed).unwrap();
    Checkpoint::from_store(&enc.store, &[], CheckpointMeta::default())
}

fn labeled(n: usize, split: u64) -> Vec<ImageSample> {
    let cfg = SynthConfig {
        image_size: 64,
        ..Default::default()
    };
    (0..n)
        .map(|i| {
            let s = scene_for(&cfg, split, i);
            ImageSample::new(s.pixels, s.boxes, format!("{split}/{i}")).unwrap()
        })
        .collect()
}

fn small_config() -> FinetuneConfig {
    FinetuneConfig {
        epochs: 1,
        batch_size: 16,
        image_size: 64,
        log_wall_clock: false,
        ..Default::default()
    }
}

#[test]
fn fresh_detector_has_zero_biases_and_unit_scales() {
    let det = tiny_detector(0);
    for (_, name, p) in det.store.iter() {
        let d = p.tensor.data();
        match p.kind {
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => assert!(d.iter().all(|&v| v == 0.0), "{name}"),
            ParamKind::BnGamma | ParamKind::RunningVar => assert!(d.iter().all(|&v| v == 1.0), "{name}"),
            ParamKind::Weight => assert!(d.iter().any(|&v| v != 0.0), "{name}"),
        }
    }
}

#[test]
fn init_variance_tracks_scheme() {
    let cfg = BackboneConfig::default();
    for seed in 0..5 {
        let det = Detector::new(&cfg, &HeadConfig::default(), seed).unwrap();
        let (name, p) = det
            .store
            .iter()
            .filter(|(_, _, p)| p.kind == ParamKind::Weight && p.tensor.shape().len() == 4)
            .map(|(_, n, p)| (n, p))
            .find(|(_, p)| p.tensor.shape()[1] * p.tensor.shape()[2] * p.tensor.shape()[3] == 256)
            .expect("a layer with fan-in 256");
        let d = p.tensor.data();
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let want = p.init.target_variance(p.tensor.shape());
        assert!(matches!(p.init, InitScheme::FanIn | InitScheme::Glorot), "{name}");
        assert!((var / want - 1.0).abs() < 0.2, "{name} seed {seed}: {var} vs {want}");
    }
}

#[test]
fn random_init_differs_between_seeds() {
    let mut a = tiny_detector(0);
    let mut b = tiny_detector(0);
    init_random(&mut a, &mut rng_from(1, &[]));
    init_random(&mut b, &mut rng_from(2, &[]));
    let differing = a.store.iter().filter(|(_, n, p)| p.kind == ParamKind::Weight && b.store.by_name(n).unwrap().tensor != p.tensor).count();
    let weights = a.store.iter().filter(|(_, _, p)| p.kind == ParamKind::Weight).count();
    assert_eq!(differing, weights);
}

#[test]
fn backbone_loading_round_trips_and_leaves_head_alone() {
    let ckpt = encoder_checkpoint(7);
    let mut det = tiny_detector(0);
    let before = det.clone();
    let report = load_backbone_into_detector(&ckpt, &mut det).unwrap();
    for (_, name, p) in det.store.iter() {
        if name.starts_with(BACKBONE_PREFIX) {
            assert_eq!(&p.tensor, ckpt.get(name).unwrap(), "{name}");
            assert!(report.loaded.iter().any(|n| n == name));
        } else {
            assert_eq!(p.tensor, before.store.by_name(name).unwrap().tensor, "{name}");
            assert!(report.missing.iter().any(|n| n == name));
        }
    }
    let projection: Vec<String> = ckpt.names().filter(|n| n.starts_with(PROJECTION_PREFIX)).map(str::to_string).collect();
    assert!(!projection.is_empty());
    assert_eq!(report.ignored, projection);
    assert_eq!(report.loaded.len() + report.missing.len(), det.store.len());

    let bytes = ckpt.to_bytes().unwrap();
    let mut again = tiny_detector(0);
    load_backbone_into_detector(&Checkpoint::from_bytes(&bytes).unwrap(), &mut again).unwrap();
    for (_, name, p) in det.store.iter() {
        assert_eq!(p.tensor, again.store.by_name(name).unwrap().tensor);
    }
}

#[test]
fn loading_rejects_mismatched_or_incomplete_checkpoints() {
    let mut ckpt = encoder_checkpoint(0);
    let victim = ckpt.tensors.iter().position(|(n, _)| n.starts_with(BACKBONE_PREFIX)).unwrap();
    let name = ckpt.tensors[victim].0.clone();
    ckpt.tensors[victim].1 = Tensor::zeros(&[1, 2, 3]);
    let mut det = tiny_detector(0);
    let before = det.clone();
    match load_backbone_into_detector(&ckpt, &mut det) {
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name: n, .. })) => assert_eq!(n, name),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    for (_, n, p) in det.store.iter() {
        assert_eq!(p.tensor, before.store.by_name(n).unwrap().tensor);
    }
    ckpt.tensors.remove(victim);
    assert!(matches!(
        load_backbone_into_detector(&ckpt, &mut det),
        Err(Error::Checkpoint(CheckpointError::Missing(n))) if n == name
    ));
    let wider = BackboneConfig {
        stage_channels: vec![8, 16, 16, 16],
        ..tiny_backbone()
    };
    let other = Encoder::new(&wider, &ProjectionConfig::default(), 0).unwrap();
    let ckpt = Checkpoint::from_store(&other.store, &[], CheckpointMeta::default());
    assert!(load_backbone_into_detector(&ckpt, &mut tiny_detector(0)).is_err());
}

#[test]
fn learning_rate_groups_partition_parameters() {
    let det = tiny_detector(0);
    let cfg = FinetuneConfig::default();
    let (mut bb, mut rest) = (0, 0);
    for name in det.store.names() {
        let lr = param_lr(name, 0, &cfg);
        if Detector::is_backbone_param(name) {
            assert!(name.starts_with(BACKBONE_PREFIX));
            assert!((lr - cfg.base_lr * cfg.backbone_lr_multiplier).abs() < 1e-15);
            bb += 1;
        } else {
            assert!(name.starts_with("neck.") || name.starts_with("head."));
            assert_eq!(lr, cfg.base_lr);
            rest += 1;
        }
    }
    assert!(bb > 0 && rest > 0);
    assert_eq!(bb + rest, det.store.len());
}

/// Same unit gradient on every parameter; during warm-up the backbone moves
/// by the multiplier relative to the head, afterwards by the same amount.
#[test]
fn warmup_scales_backbone_steps() {
    let cfg = FinetuneConfig::default();
    for (epoch, ratio) in [(0, cfg.backbone_lr_multiplier), (cfg.warmup_epochs - 1, cfg.backbone_lr_multiplier), (cfg.warmup_epochs, 1.0)] {
        let mut det = tiny_detector(0);
        let before = det.clone();
        let grads: Vec<_> = det.store.iter().filter(|(_, _, p)| p.trainable()).map(|(id, _, p)| (id, vec![1.0f32; p.tensor.numel()])).collect();
        Sgd::new(0.0, 0.0).step(&mut det.store, &grads, |n| param_lr(n, epoch, &cfg)).unwrap();
        let moved = |prefix: &str| {
            let (_, name, p) = det.store.iter().find(|(_, n, p)| n.starts_with(prefix) && p.kind == ParamKind::Weight).unwrap();
            (before.store.by_name(name).unwrap().tensor.data()[0] - p.tensor.data()[0]) as f64
        };
        let r = moved(BACKBONE_PREFIX) / moved("head.");
        assert!((r - ratio).abs() < 1e-4, "epoch {epoch}: {r}");
    }
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    let mut det = tiny_detector(0);
    let images = labeled(2, 1);
    let batch = Tensor::stack(&images.iter().map(|s| &s.pixels).collect::<Vec<_>>()).unwrap();
    let assignments: Vec<_> = images.iter().map(|s| assign_targets(&s.boxes, 64, 64, 16)).collect();
    let head_cfg = det.head_config().clone();
    let (mut s, head) = det.run(batch, true, true).unwrap();
    let out = detection_loss(&mut s.tape, &head, &assignments, &head_cfg).unwrap();
    s.tape.backward(out.total).unwrap();
    let grads = s.grads();
    let trainable = s.store().iter().filter(|(_, _, p)| p.trainable()).count();
    assert_eq!(grads.len(), trainable);
    let nonzero_backbone = grads
        .iter()
        .filter(|(id, g)| s.store().name(*id).starts_with(BACKBONE_PREFIX) && g.iter().any(|&v| v != 0.0))
        .count();
    assert!(nonzero_backbone > 0);
}

#[test]
fn one_epoch_of_32_images_in_batches_of_16() {
    assert_eq!(shuffled_batches(32, 16, 0, 0).len(), 2);
    let train = labeled(32, 1);
    let val = labeled(8, 2);
    let cfg = small_config();
    let mut det = tiny_detector(0);
    let before = det.clone();
    let log = finetune(&mut det, &train, &val, &cfg).unwrap();
    assert_eq!(log.records.len(), 1);
    let r = &log.records[0];
    assert_eq!(r.epoch, 1);
    assert!(r.val.is_some() && r.map50.is_some());
    let changed = det
        .store
        .iter()
        .filter(|(_, n, p)| n.starts_with(BACKBONE_PREFIX) && p.tensor != before.store.by_name(n).unwrap().tensor)
        .count();
    assert!(changed > 0);

    let mut twin = tiny_detector(0);
    let log2 = finetune(&mut twin, &train, &val, &cfg).unwrap();
    assert_eq!(log.records, log2.records);
    for (_, n, p) in det.store.iter() {
        assert_eq!(p.tensor, twin.store.by_name(n).unwrap().tensor, "{n}");
    }
}

#[test]
fn missing_validation_leaves_metrics_empty() {
    let mut det = tiny_detector(0);
    let log = finetune(&mut det, &labeled(4, 1), &[], &FinetuneConfig { batch_size: 4, ..small_config() }).unwrap();
    let r = &log.records[0];
    assert!(r.val.is_none() && r.map50.is_none() && r.precision.is_none());
    assert!(r.train.total().is_finite());
}

#[test]
fn training_samples_are_reproducible() {
    let images = labeled(6, 1);
    let cfg = FinetuneConfig {
        mosaic_prob: 1.0,
        affine_prob: 1.0,
        ..small_config()
    };
    for i in 0..6 {
        let a = train_sample(&images, i, 3, &cfg).unwrap();
        assert_eq!(a, train_sample(&images, i, 3, &cfg).unwrap());
        assert_eq!(a.pixels.shape(), &[3, 64, 64]);
    }
    assert_ne!(train_sample(&images, 0, 3, &cfg).unwrap(), train_sample(&images, 0, 4, &cfg).unwrap());
}
