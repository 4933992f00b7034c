use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssldetect::nn::{InitScheme, ParamKind, ParamStore};
use ssldetect::optim::*;

proptest! {
    #[test]
    fn cosine_is_monotone_and_bounded(total in 1usize..500, lo in 0.0f64..0.01, span in 0.0f64..1.0) {
        let hi = lo + span;
        prop_assert_eq!(cosine_lr(0, total, hi, lo), hi);
        prop_assert!((cosine_lr(total, total, hi, lo) - lo).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, hi, lo);
            prop_assert!(lr <= prev + 1e-15 && lr >= lo - 1e-15 && lr <= hi + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn cosine_is_symmetric_about_midpoint(total in 2usize..400, step in 0usize..400) {
        let step = step % (total + 1);
        let a = cosine_lr(step, total, 1.0, 0.0);
        let b = cosine_lr(total - step, total, 1.0, 0.0);
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    /// Plain-loop SGD with momentum and decay as the reference.
    #[test]
    fn sgd_matches_reference(init in prop::collection::vec(-2.0f32..2.0, 1..6), grads in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..6), mu in 0.0f64..0.99, wd in 0.0f64..0.01, lr in 0.001f64..0.5) {
        let n = init.len();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add("w".into(), &[n], ParamKind::Weight, InitScheme::Constant(0.0), &mut rng).unwrap();
        store.get_mut(id).tensor.data_mut().copy_from_slice(&init);
        let mut opt = Sgd::new(mu, wd);
        let (mut p, mut v): (Vec<f64>, Vec<f64>) = (init.iter().map(|&x| x as f64).collect(), vec![0.0; n]);
        for g in &grads {
            opt.step(&mut store, &[(id, g[..n].to_vec())], |_| lr).unwrap();
            for i in 0..n {
                v[i] = mu * v[i] + g[i] as f64 + wd * p[i];
                p[i] -= lr * v[i];
            }
        }
        for (a, b) in store.get(id).tensor.data().iter().zip(&p) {
            prop_assert!((*a as f64 - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn decay_is_a_single_late_step(total in 1usize..200) {
        let f: Vec<f64> = (0..total).map(|e| step_decay(e, total)).collect();
        prop_assert!(f.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(f.iter().all(|&v| v == 1.0 || v == 0.1));
        let decayed = f.iter().filter(|&&v| v == 0.1).count();
        prop_assert_eq!(decayed, total - total * 4 / 5);
    }
}

#[test]
fn frozen_statistics_are_not_stepped() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = store.add("w".into(), &[2], ParamKind::Weight, InitScheme::Constant(1.0), &mut rng).unwrap();
    let m = store.add("m".into(), &[2], ParamKind::RunningMean, InitScheme::Constant(0.5), &mut rng).unwrap();
    Sgd::new(0.9, 0.1).step(&mut store, &[(w, vec![1.0, 1.0])], |_| 0.1).unwrap();
    assert_eq!(store.get(m).tensor.data(), &[0.5, 0.5]);
    assert!(store.get(w).tensor.data()[0] < 1.0);
}
