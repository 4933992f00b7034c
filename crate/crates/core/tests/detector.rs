use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssldetect::autodiff::{grad_check, Tape, Var};
use ssldetect::backbone::{BackboneConfig, FEATURE_STRIDES};
use ssldetect::boxes::{GroundTruthBox, Rect};
use ssldetect::detector::*;
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

fn noise(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Head tensors for an image side `size`, batch `n`.
fn head_tensors(n: usize, size: usize, bins: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let grids: Vec<usize> = FEATURE_STRIDES.iter().map(|s| size / s).collect();
    let mut out: Vec<Tensor> = grids.iter().map(|&g| noise(&[n, 1, g, g], rng, 3.0)).collect();
    out.extend(grids.iter().map(|&g| noise(&[n, 4 * bins, g, g], rng, 2.0)));
    out
}

fn on_tape(tape: &mut Tape, t: &[Tensor]) -> HeadOutput {
    let v: Vec<Var> = t.iter().map(|t| tape.leaf(t.clone())).collect();
    HeadOutput {
        cls: [v[0], v[1], v[2]],
        boxes: [v[3], v[4], v[5]],
    }
}

fn gt_box() -> impl Strategy<Value = GroundTruthBox> {
    (0.1f32..0.9, 0.1f32..0.9, 0.03f32..0.6, 0.03f32..0.6).prop_map(|(cx, cy, w, h)| GroundTruthBox::new(cx, cy, w, h))
}

#[test]
fn head_shapes_follow_strides() {
    let mut det = Detector::new(&tiny_backbone(), &tiny_head(), 0).unwrap();
    let (s, head) = det.run(Tensor::filled(&[2, 3, 64, 64], 0.5), false, false).unwrap();
    for (k, g) in [8usize, 4, 2].into_iter().enumerate() {
        assert_eq!(s.tape.value(head.cls[k]).shape(), &[2, 1, g, g]);
        assert_eq!(s.tape.value(head.boxes[k]).shape(), &[2, 64, g, g]);
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = Detector::new(&tiny_backbone(), &tiny_head(), 5).unwrap();
    let b = Detector::new(&tiny_backbone(), &tiny_head(), 5).unwrap();
    let c = Detector::new(&tiny_backbone(), &tiny_head(), 6).unwrap();
    let names: Vec<&str> = a.store.names().collect();
    assert_eq!(names, b.store.names().collect::<Vec<_>>());
    assert_eq!(names, c.store.names().collect::<Vec<_>>());
    assert!(names.iter().all(|n| n.starts_with("backbone.") || n.starts_with("neck.") || n.starts_with("head.")));
    let mut differ = false;
    for (_, name, p) in a.store.iter() {
        assert_eq!(&p.tensor, &b.store.by_name(name).unwrap().tensor);
        differ |= p.tensor != c.store.by_name(name).unwrap().tensor;
    }
    assert!(differ);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn positives_sit_inside_their_box(gt in gt_box()) {
        let a = assign_targets(&[gt], 128, 128, 16);
        let r = a.gts[0];
        let k = scale_for(&r);
        for (j, sa) in a.scales.iter().enumerate() {
            prop_assert!(j == k || sa.positives() == 0);
        }
        let sa = &a.scales[k];
        let n = sa.positives();
        prop_assert!((1..=9).contains(&n));
        for cell in 0..sa.matched.len() {
            if sa.matched[cell].is_some() {
                let (x, y) = sa.cell_center(cell);
                prop_assert!(r.contains(x, y) || n == 1);
                prop_assert!(sa.targets[cell].iter().all(|t| (0.0..=15.0).contains(t)));
            }
        }
    }

    #[test]
    fn assignment_shifts_with_the_box(gt in gt_box(), dx in 1usize..3, dy in 1usize..3) {
        let a = assign_targets(&[gt], 256, 256, 16);
        let k = scale_for(&a.gts[0]);
        let s = FEATURE_STRIDES[k] as f32;
        let shifted = GroundTruthBox::new(gt.cx + dx as f32 * s / 256.0, gt.cy + dy as f32 * s / 256.0, gt.w, gt.h);
        let r = shifted.to_rect(256, 256);
        prop_assume!(r.x_max < 256.0 && r.y_max < 256.0 && a.gts[0].x_min > 0.0 && a.gts[0].y_min > 0.0);
        let b = assign_targets(&[shifted], 256, 256, 16);
        let (sa, sb) = (&a.scales[k], &b.scales[k]);
        let cells = |m: &[Option<usize>]| m.iter().enumerate().filter(|c| c.1.is_some()).map(|c| c.0).collect::<Vec<_>>();
        let moved: Vec<usize> = cells(&sa.matched).iter().map(|c| c + dy * sa.width + dx).collect();
        prop_assert_eq!(moved, cells(&sb.matched));
    }

    #[test]
    fn loss_is_non_negative_and_finite(seed in any::<u64>(), gts in prop::collection::vec(gt_box(), 0..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = head_tensors(1, 64, 16, &mut rng);
        let mut tape = Tape::new();
        let head = on_tape(&mut tape, &t);
        let out = detection_loss(&mut tape, &head, &[assign_targets(&gts, 64, 64, 16)], &HeadConfig::default()).unwrap();
        let total = tape.scalar(out.total);
        prop_assert!(total.is_finite() && total >= 0.0);
        prop_assert!(out.parts.box_loss >= 0.0 && out.parts.cls_loss >= 0.0 && out.parts.dfl_loss >= 0.0);
        prop_assert!((out.parts.total() - total).abs() < 1e-9 * total.max(1.0));
    }

    #[test]
    fn postprocess_output_is_ordered_and_bounded(seed in any::<u64>(), conf in 0.0f32..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = head_tensors(2, 64, 16, &mut rng);
        let mut tape = Tape::new();
        let head = on_tape(&mut tape, &t);
        let dets = postprocess(&tape, &head, 16, 64, 64, conf, 0.45).unwrap();
        prop_assert_eq!(dets.len(), 2);
        for d in &dets {
            prop_assert!(d.len() <= 64 + 16 + 4);
            for w in d.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for x in d {
                prop_assert!(x.score > conf);
                let r = x.bbox;
                prop_assert!(r.x_min >= 0.0 && r.y_min >= 0.0 && r.x_max <= 64.0 && r.y_max <= 64.0);
                prop_assert!(r.width() >= MIN_DETECTION_SIZE && r.height() >= MIN_DETECTION_SIZE);
            }
        }
        let none = postprocess(&tape, &head, 16, 64, 64, 1.0, 0.45).unwrap();
        prop_assert!(none.iter().all(Vec::is_empty));
    }

    #[test]
    fn ciou_is_bounded_and_symmetric(a in (0.0f32..50.0, 0.0f32..50.0, 1.0f32..40.0, 1.0f32..40.0), b in (0.0f32..50.0, 0.0f32..50.0, 1.0f32..40.0, 1.0f32..40.0)) {
        let ra = Rect::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let rb = Rect::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        let v = ciou(&ra, &rb).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-9).contains(&v));
        prop_assert!((v - ciou(&rb, &ra).unwrap()).abs() < 1e-9);
        prop_assert!(v <= ssldetect::boxes::iou(&ra, &rb).unwrap() + 1e-9);
    }

    #[test]
    fn dfl_is_minimised_by_the_split_distribution(t in 0.0f64..15.0) {
        let l = t.floor() as usize;
        let mut probs = vec![1e-12; 16];
        probs[l] += (l + 1) as f64 - t;
        if l + 1 < 16 {
            probs[l + 1] += t - l as f64;
        }
        let best: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let flat = vec![0.0; 16];
        prop_assert!(dfl_loss(&best, t).unwrap() <= dfl_loss(&flat, t).unwrap());
        prop_assert!((expected_bin(&best.iter().map(|&v| v as f32).collect::<Vec<_>>()) - t).abs() < 1e-4);
    }
}

/// Box with edges on multiples of the stride-16 grid offset, so that every
/// positive cell has integer side targets.
fn aligned_scene() -> (Vec<GroundTruthBox>, Assignment) {
    let gt = GroundTruthBox::from_rect(&Rect::new(8.0, 8.0, 56.0, 56.0), 64, 64);
    let a = assign_targets(&[gt], 64, 64, 16);
    (vec![gt], a)
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let (_, a) = aligned_scene();
    let k = scale_for(&a.gts[0]);
    assert_eq!(FEATURE_STRIDES[k], 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = head_tensors(1, 64, 16, &mut rng);
    for (j, sa) in a.scales.iter().enumerate() {
        let hw = sa.height * sa.width;
        let cls = t[j].data_mut();
        for cell in 0..hw {
            cls[cell] = if sa.matched[cell].is_some() { 40.0 } else { -40.0 };
        }
        let bx = t[3 + j].data_mut();
        bx.iter_mut().for_each(|v| *v = -40.0);
        for cell in 0..hw {
            if sa.matched[cell].is_some() {
                for q in 0..4 {
                    let target = sa.targets[cell][q];
                    assert_eq!(target.fract(), 0.0);
                    bx[(q * 16 + target as usize) * hw + cell] = 40.0;
                }
            }
        }
    }
    let mut tape = Tape::new();
    let head = on_tape(&mut tape, &t);
    let out = detection_loss(&mut tape, &head, &[a], &HeadConfig::default()).unwrap();
    assert_eq!(out.positives, 4);
    assert!(tape.scalar(out.total) < 1e-6, "{:?}", out.parts);
}

#[test]
fn empty_image_pushes_every_score_down() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t: Vec<Tensor> = head_tensors(1, 64, 16, &mut rng).into_iter().map(|t| t.with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let head = on_tape(&mut tape, &t);
    let out = detection_loss(&mut tape, &head, &[assign_targets(&[], 64, 64, 16)], &HeadConfig::default()).unwrap();
    assert_eq!((out.parts.box_loss, out.parts.dfl_loss), (0.0, 0.0));
    tape.backward(out.total).unwrap();
    for k in 0..3 {
        assert!(tape.grad(head.cls[k]).unwrap().iter().all(|&g| g > 0.0));
        assert!(tape.grad(head.boxes[k]).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let gts = [GroundTruthBox::new(0.45, 0.55, 0.5, 0.4)];
    let a = assign_targets(&gts, 32, 32, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = head_tensors(1, 32, 16, &mut rng);
    for slot in 0..6 {
        let r = grad_check(
            |tape, x| {
                let vars: Vec<Var> = (0..6).map(|j| if j == slot { x } else { tape.leaf(t[j].clone()) }).collect();
                let head = HeadOutput {
                    cls: [vars[0], vars[1], vars[2]],
                    boxes: [vars[3], vars[4], vars[5]],
                };
                Ok(detection_loss(tape, &head, &[a.clone()], &HeadConfig::default())?.total)
            },
            &t[slot],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "slot {slot}: {r:?}");
    }
}

#[test]
fn predictions_are_bounded_for_a_real_network() {
    let mut det = Detector::new(&tiny_backbone(), &tiny_head(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = noise(&[3, 64, 64], &mut rng, 1.0);
    let dets = predict(&mut det, &img, 0.001, 0.45).unwrap();
    assert!(dets.len() <= 84);
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(predict(&mut det, &img, 1.0, 0.45).unwrap().is_empty());
    assert_eq!(dets, predict(&mut det, &img, 0.001, 0.45).unwrap());
}
