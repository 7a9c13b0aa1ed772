use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r2restore_core::tensor::conv::{conv2d, conv2d_direct};
use r2restore_core::tensor::{pixel_shuffle, pixel_unshuffle};
use r2restore_core::{Error, Shape, Tape, Tensor};

fn random(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fast_conv_matches_direct_loops(
        n in 1usize..=4, c_in in 1usize..=4, c_out in 1usize..=4,
        h in 1usize..=16, w in 1usize..=16, dilation in 1usize..=4,
        one_by_one in proptest::bool::weighted(0.2), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = if one_by_one { 1 } else { 3 };
        let padding = if one_by_one { 0 } else { dilation };
        let x = random(Shape::new(n, c_in, h, w), &mut rng);
        let wt = random(Shape::new(c_out, c_in, k, k), &mut rng);
        let b = random(Shape::new(1, c_out, 1, 1), &mut rng);
        let fast = conv2d(&x, &wt, &b, dilation, padding).unwrap();
        let slow = conv2d_direct(&x, &wt, &b, dilation, padding).unwrap();
        prop_assert_eq!(fast.shape(), Shape::new(n, c_out, h, w));
        prop_assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
    }

    #[test]
    fn conv_is_linear_without_bias(seed in any::<u64>(), dilation in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(2, 3, 9, 7);
        let (x, y) = (random(s, &mut rng), random(s, &mut rng));
        let wt = random(Shape::new(2, 3, 3, 3), &mut rng);
        let b = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix = Tensor::from_fn(s, |n, c, i, j| alpha * x.at(n, c, i, j) + beta * y.at(n, c, i, j));
        let lhs = conv2d(&mix, &wt, &b, dilation, dilation).unwrap();
        let cx = conv2d(&x, &wt, &b, dilation, dilation).unwrap();
        let cy = conv2d(&y, &wt, &b, dilation, dilation).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |n, c, i, j| alpha * cx.at(n, c, i, j) + beta * cy.at(n, c, i, j));
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn pixel_shuffle_is_a_bijection(seed in any::<u64>(), s in 2usize..=4, c in 1usize..=3, h in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(2, c * s * s, h, h + 1), &mut rng);
        let y = pixel_shuffle(&x, s).unwrap();
        prop_assert_eq!(y.len(), x.len());
        prop_assert_eq!(pixel_unshuffle(&y, s).unwrap(), x);
    }
}

fn scalar_of(v: &r2restore_core::Var<f64>) -> f64 {
    v.value().data()[0]
}

#[test]
fn activation_definitions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 0.3, 1.0, -2.0]).unwrap(), true).unwrap();
    let s = tape.sigmoid(&x).unwrap();
    assert_eq!(s.value().data()[0], 0.5);
    let k = tape.softshrink(&x, 0.5).unwrap();
    assert_eq!(k.value().data(), &[0.0, 0.0, 0.5, -1.5]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-3.2, 3.2]).unwrap(), true).unwrap();
    let r = tape.relu(&x).unwrap();
    assert_eq!(r.value().data(), &[0.0, 3.2]);
    let loss = tape.sum(&r).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&x).data(), &[0.0, 1.0]);
}

#[test]
fn pooling_and_scaling() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(tape.global_avg_pool(&x).unwrap().value().data(), &[2.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random(Shape::new(2, 4, 7, 5), &mut rng);
    let v = tape.constant(t.clone()).unwrap();
    let p = tape.global_avg_pool(&v).unwrap();
    for n in 0..2 {
        for c in 0..4 {
            let mut acc = 0.0;
            for i in 0..7 {
                for j in 0..5 {
                    acc += t.at(n, c, i, j);
                }
            }
            assert!((p.value().at(n, c, 0, 0) - acc / 35.0).abs() < 1e-12);
        }
    }

    let f = tape.constant(Tensor::full(Shape::new(1, 2, 3, 3), 4.0)).unwrap();
    let half = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 0.5)).unwrap();
    let out = tape.channel_scale(&f, &half).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 2.0));
    let ones = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0)).unwrap();
    assert_eq!(tape.channel_scale(&f, &ones).unwrap().value(), f.value());
    let bad = tape.constant(Tensor::full(Shape::new(1, 3, 1, 1), 1.0)).unwrap();
    assert!(matches!(tape.channel_scale(&f, &bad), Err(Error::Parameter(_))));
}

#[test]
fn structural_ops() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::full(Shape::new(1, 64, 8, 8), 1.0)).unwrap();
    let b = tape.constant(Tensor::full(Shape::new(1, 64, 8, 8), 2.0)).unwrap();
    let cat = tape.concat_channels(&a, &b).unwrap();
    assert_eq!(cat.shape(), Shape::new(1, 128, 8, 8));
    assert_eq!(cat.value().at(0, 63, 0, 0), 1.0);
    assert_eq!(cat.value().at(0, 64, 0, 0), 2.0);
    let z = tape.constant(Tensor::zeros(Shape::new(1, 64, 8, 8))).unwrap();
    assert_eq!(tape.add(&a, &z).unwrap().value(), a.value());
    let small = tape.constant(Tensor::zeros(Shape::new(1, 64, 4, 8))).unwrap();
    assert!(tape.add(&a, &small).is_err());
    assert!(tape.concat_channels(&a, &small).is_err());

    let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(pixel_shuffle(&Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2)), 2).is_err());
}

#[test]
fn l1_loss_values() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::full(Shape::new(2, 1, 2, 2), 3.0)).unwrap();
    assert_eq!(scalar_of(&tape.l1_loss(&a, &a).unwrap()), 0.0);
    let b = tape.constant(Tensor::full(Shape::new(2, 1, 2, 2), 2.0)).unwrap();
    assert_eq!(scalar_of(&tape.l1_loss(&a, &b).unwrap()), 1.0);
    // per-image means 0.2 and 0.6
    let mut p = Tensor::zeros(Shape::new(2, 1, 2, 2));
    p.item_mut(0).fill(0.2);
    p.item_mut(1).fill(0.6);
    let p = tape.constant(p).unwrap();
    let z = tape.constant(Tensor::zeros(Shape::new(2, 1, 2, 2))).unwrap();
    assert!((scalar_of(&tape.l1_loss(&p, &z).unwrap()) - 0.4).abs() < 1e-15);
    let other = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
    assert!(matches!(tape.l1_loss(&p, &other), Err(Error::Parameter(_))));
}

#[test]
fn backward_rules() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(Shape::new(1, 2, 3, 3), 0.7), true).unwrap();
    let z = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3))).unwrap();
    let loss = tape.l1_loss(&x, &z).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.wrt(&x).data().iter().all(|&v| v == 1.0 / 18.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), -0.3), true).unwrap();
    let unused = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0), true).unwrap();
    let y = tape.add(&x, &x).unwrap();
    let loss = tape.sum(&y).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.wrt(&x).data().iter().all(|&v| v == 2.0));
    assert!(g.wrt(&unused).data().iter().all(|&v| v == 0.0));
    // non-scalar loss
    assert!(tape.backward(&y).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let bad = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, f64::NAN]).unwrap();
    assert!(matches!(tape.leaf(bad, true), Err(Error::NonFinite { .. })));
    let big = tape.constant(Tensor::full(Shape::new(1, 1, 1, 2), f64::MAX)).unwrap();
    assert!(matches!(tape.add(&big, &big), Err(Error::NonFinite { .. })));
}

#[test]
fn stale_variables_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0), true).unwrap();
    tape.clear();
    let y = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0), true).unwrap();
    assert!(matches!(tape.add(&x, &y), Err(Error::State(_))));
    let mut other = Tape::<f64>::new();
    let z = other.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 1.0), true).unwrap();
    let s = other.sum(&z).unwrap();
    assert!(matches!(tape.backward(&s), Err(Error::State(_))));
}
