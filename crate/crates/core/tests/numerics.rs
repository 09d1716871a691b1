use babel_core::numerics::*;
use babel_core::rng::rng_from_seed;
use babel_core::selftest::{gradient_suite, nce_delta, GRAD_EPS};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = GRAD_EPS;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

#[test]
fn nce_difference_form_matches_direct_evaluation() {
    let (d, m) = (8, 4);
    let mut rng = rng_from_seed(9);
    let x0: Vec<f64> = (0..m + 2).flat_map(|_| unit(&mut rng, d)).collect();
    let x: Vec<f64> = x0.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
    let direct = |x: &[f64]| {
        let negs: Vec<&[f64]> = x[2 * d..].chunks(d).collect();
        nce_loss_unchecked(&x[..d], &x[d..2 * d], &negs, 0.07).unwrap().loss
    };
    let delta = direct(&x) - direct(&x0);
    assert!((nce_delta(&x0, &x, d, 0.07) - delta).abs() < 1e-12);
    assert_eq!(nce_delta(&x0, &x0, d, 0.07), 0.0);
}

#[test]
fn every_loss_gradient_over_100_seeds() {
    for c in gradient_suite(100).unwrap() {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn normalize_backward_matches_finite_differences() {
    let mut rng = rng_from_seed(77);
    let d = 6;
    let raw: Vec<f64> = (0..d * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..d * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |x: &[f64]| {
        let map = FeatureMap::new(d, 1, 3, x.to_vec())?;
        let n = normalize_features(&map)?;
        let v: f64 = n.data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok((v, normalize_backward(&map, &n, &weights)))
    };
    assert!(grad_check(f, &raw, EPS).unwrap() < 1e-6);
}

#[test]
fn total_loss_matches_recomputation() {
    let mut rng = rng_from_seed(5);
    for _ in 0..50 {
        let cls: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..5.0)).collect();
        let n = rng.gen_range(1..20);
        let pair: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let lambda = rng.gen_range(0.0..1.0);
        let mut expected = cls[0] + cls[1];
        let mut acc = 0.0;
        for p in &pair {
            acc += p;
        }
        expected += lambda * acc / n as f64;
        assert!((total_loss(&cls, &pair, lambda) - expected).abs() < 1e-12);
    }
}

fn phis() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-14.3f64..14.3, 2..20)
}

proptest! {
    #[test]
    fn nce_is_shift_invariant(phi in phis(), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = phi.iter().map(|v| v + shift).collect();
        prop_assert!((nce_from_similarities(&phi) - nce_from_similarities(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn nce_is_nonnegative_and_decreasing_in_positive(phi in phis(), bump in 0.01f64..3.0) {
        let l = nce_from_similarities(&phi);
        prop_assert!(l >= 0.0);
        let mut up = phi.clone();
        up[0] += bump;
        prop_assert!(nce_from_similarities(&up) < l);
    }

    #[test]
    fn nce_equals_log_m_plus_one_iff_uniform(phi in phis()) {
        let m = phi.len() - 1;
        let l = nce_from_similarities(&phi);
        let uniform = phi.iter().all(|&v| v == phi[0]);
        if uniform {
            prop_assert!((l - ((m + 1) as f64).ln()).abs() < 1e-12);
        } else {
            prop_assert!((l - ((m + 1) as f64).ln()).abs() > 0.0);
        }
    }

    #[test]
    fn normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 4 * 8)) {
        prop_assume!(v.chunks(4).all(|c| c.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let map = FeatureMap::new(4, 2, 4, v).unwrap();
        let a = normalize_features(&map).unwrap();
        let b = normalize_features(&a).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-7);
        }
        for px in a.pixels() {
            let n = px.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn classification_loss_is_nonnegative(
        s in prop::collection::vec(-5.0f64..5.0, 6 * 4),
        label in 0usize..5,
    ) {
        let agg = Aggregator::default();
        let maps = ScoreMaps::from_scores(s, 5, 2, 2, &agg).unwrap();
        let out = classification_loss(&maps, &[label], Phase::Full, 0.6, &agg).unwrap();
        prop_assert!(out.image_loss >= 0.0 && out.pixel_loss >= 0.0);
    }
}

#[test]
fn uniform_image_scores_give_log_c_for_any_c() {
    for c in 2..12 {
        let y = vec![0.7f64; c];
        assert!((image_cross_entropy(&y, 0) - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn nce_loss_f32_instantiation() {
    let p = [1.0f32, 0.0];
    let n = [0.0f32, 1.0];
    let out = nce_loss(&p, &p, &[&n], 1.0).unwrap();
    assert!((out.loss - 0.313_261_7).abs() < 1e-6);
}
