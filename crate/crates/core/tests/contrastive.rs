use proptest::prelude::*;
use ssldetect::augment::ImageSample;
use ssldetect::autodiff::{grad_check, Tape};
use ssldetect::backbone::{BackboneConfig, ProjectionConfig, BACKBONE_PREFIX, PROJECTION_PREFIX};
use ssldetect::io::synth::{scene_for, SynthConfig};
use ssldetect::pretrain::*;
use ssldetect::tensor::Tensor;

/// Direct cosine-similarity NT-Xent on raw (unnormalized) rows.
fn oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
    let n = rows.len();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let sim = |i: usize, k: usize| unit[i].iter().zip(&unit[k]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let pos = if i % 2 == 0 { i + 1 } else { i - 1 };
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
        total += -(sim(i, pos).exp() / denom).ln();
    }
    total / n as f64
}

fn loss(rows: &[Vec<f64>], tau: f64) -> f64 {
    let d = rows[0].len();
    let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![rows.len(), d], data).unwrap());
    let z = tape.l2_normalize(z).unwrap();
    let l = nt_xent_loss(&mut tape, z, tau).unwrap();
    tape.scalar(l)
}

fn rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 2usize..6).prop_flat_map(|(pairs, d)| {
        prop::collection::vec(prop::collection::vec(0.1f64..1.0, d), 2 * pairs).prop_map(|mut v| {
            for (i, r) in v.iter_mut().enumerate() {
                if i % 3 == 1 {
                    r[0] = -r[0];
                }
            }
            v
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_cosine_oracle(z in rows(), tau in 0.1f64..1.0) {
        let (got, want) = (loss(&z, tau), oracle(&z, tau));
        prop_assert!((got - want).abs() < 1e-4 * want.max(1.0), "{} vs {}", got, want);
        prop_assert!(got > 0.0);
    }

    #[test]
    fn invariant_to_row_rescaling(z in rows(), scales in prop::collection::vec(0.2f64..5.0, 12)) {
        let scaled: Vec<Vec<f64>> = z.iter().enumerate().map(|(i, r)| r.iter().map(|v| v * scales[i]).collect()).collect();
        prop_assert!((loss(&z, 0.2) - loss(&scaled, 0.2)).abs() < 1e-5);
    }

    #[test]
    fn invariant_to_pair_order(z in rows(), swap_within in any::<bool>()) {
        let pairs: Vec<&[Vec<f64>]> = z.chunks(2).collect();
        let mut permuted: Vec<Vec<f64>> = Vec::new();
        for p in pairs.iter().rev() {
            if swap_within {
                permuted.push(p[1].clone());
                permuted.push(p[0].clone());
            } else {
                permuted.extend(p.iter().cloned());
            }
        }
        prop_assert!((loss(&z, 0.3) - loss(&permuted, 0.3)).abs() < 1e-5);
    }
}

#[test]
fn identical_rows_give_log_of_negatives() {
    for pairs in [2usize, 3, 5] {
        for tau in [0.05, 0.1, 0.5, 1.0] {
            let z = vec![vec![0.3, 0.4]; 2 * pairs];
            let want = ((2 * pairs - 1) as f64).ln();
            assert!((loss(&z, tau) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn gradient_through_normalization() {
    let x = Tensor::new(vec![6, 3], (0..18).map(|i| ((i * 7 % 11) as f32 - 5.0) / 4.0 + 0.05).collect()).unwrap();
    let r = grad_check(
        |t, v| {
            let z = t.l2_normalize(v)?;
            nt_xent_loss(t, z, 0.5)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        stage_channels: vec![8, 8, 16, 16],
        blocks_per_stage: vec![1, 1, 1, 1],
        ..Default::default()
    }
}

fn unlabeled(n: usize) -> Vec<ImageSample> {
    let cfg = SynthConfig {
        unlabeled_size: 32,
        ..Default::default()
    };
    (0..n).map(|i| ImageSample::new(scene_for(&cfg, 0, i).pixels, vec![], format!("u{i}")).unwrap()).collect()
}

fn tiny_run(seed: u64) -> PretrainOutput {
    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 4,
        seed,
        log_wall_clock: false,
        ..Default::default()
    };
    pretrain(&unlabeled(9), &tiny_backbone(), &ProjectionConfig { hidden: Some(16), out_dim: 8 }, &cfg).unwrap()
}

#[test]
fn pretraining_is_deterministic_and_logs_each_epoch() {
    let a = tiny_run(3);
    let b = tiny_run(3);
    assert_eq!(a.records, b.records);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.records.len(), 2);
    assert_eq!(a.step_losses.len(), 4);
    assert!(a.step_losses.iter().all(|l| l.is_finite() && *l > 0.0));
    for (_, name, p) in a.encoder.store.iter() {
        assert!(name.starts_with(BACKBONE_PREFIX) || name.starts_with(PROJECTION_PREFIX), "{name}");
        assert_eq!(Some(p.tensor.data()), b.encoder.store.by_name(name).map(|q| q.tensor.data()));
    }
    let c = tiny_run(4);
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn rejects_degenerate_inputs() {
    let cfg = PretrainConfig {
        epochs: 1,
        ..Default::default()
    };
    assert!(pretrain(&unlabeled(1), &tiny_backbone(), &ProjectionConfig::default(), &cfg).is_err());
    let bad = PretrainConfig {
        temperature: 0.0,
        ..cfg
    };
    assert!(pretrain(&unlabeled(4), &tiny_backbone(), &ProjectionConfig::default(), &bad).is_err());
}
