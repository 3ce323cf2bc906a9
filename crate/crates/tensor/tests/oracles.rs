use microanim_tensor::{conv2d, ops, soft_argmax, warp, FlowField, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Straight quadruple loop over output pixels and kernel taps.
fn naive_conv(x: &Tensor, k: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    Tensor::from_fn(&[co, ho, wo], |ix| {
        let (o, oy, ox) = (ix[0], ix[1], ix[2]);
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..ci {
            for ky in 0..ks {
                for kx in 0..ks {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ixx = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ixx >= 0 && (iy as usize) < h && (ixx as usize) < w {
                        acc += x.get(&[c, iy as usize, ixx as usize]) * k.get(&[o, c, ky, kx]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv_matches_naive_oracle_on_2x5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let got = conv2d(&x, &k, None, 1, 1).unwrap();
    assert!(got.max_abs_diff(&naive_conv(&x, &k, None, 1, 1)) <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive_oracle(
        seed in any::<u64>(),
        ci in 1usize..4, co in 1usize..4,
        h in 1usize..9, w in 1usize..9,
        ks in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, pad in 0usize..3,
        with_bias in any::<bool>(),
    ) {
        prop_assume!(h + 2 * pad >= ks && w + 2 * pad >= ks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[ci, h, w], &mut rng);
        let k = random(&[co, ci, ks, ks], &mut rng);
        let b = random(&[co], &mut rng);
        let b = with_bias.then_some(&b);
        let got = conv2d(&x, &k, b, stride, pad).unwrap();
        prop_assert!(got.max_abs_diff(&naive_conv(&x, &k, b, stride, pad)) <= 1e-12);
    }

    #[test]
    fn warp_is_linear_in_frame(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&[2, 6, 7], &mut rng);
        let g = random(&[2, 6, 7], &mut rng);
        let flow = Tensor::from_fn(&[2, 6, 7], |_| rng.gen_range(-3.0..3.0));
        let lhs = warp(&f.zip_map(&g, |x, y| a * x + y).unwrap(), &flow).unwrap();
        let rhs = warp(&f, &flow).unwrap().zip_map(&warp(&g, &flow).unwrap(), |x, y| a * x + y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn warp_zero_flow_identity(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&[3, h, w], &mut rng);
        prop_assert_eq!(warp(&f, &Tensor::zeros(&[2, h, w])).unwrap(), f);
    }

    #[test]
    fn soft_argmax_stays_inside(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, t in 0.001f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hm = Tensor::from_fn(&[h, w], |_| rng.gen_range(-50.0..50.0));
        let (x, y) = soft_argmax(&hm, t).unwrap();
        prop_assert!((0.0..=(w - 1) as f64).contains(&x));
        prop_assert!((0.0..=(h - 1) as f64).contains(&y));
    }
}

fn ramp(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[1, h, w], |ix| ix[2] as f64)
}

#[test]
fn ramp_integer_shift() {
    let out = FlowField::from_fn(8, 10, |_, _| (1.0, 0.0)).apply(&ramp(8, 10)).unwrap();
    for y in 0..8 {
        for x in 0..9 {
            assert!((out.get(&[0, y, x]) - (x as f64 + 1.0)).abs() <= 1e-6);
        }
    }
}

#[test]
fn ramp_half_pixel_shift() {
    let out = FlowField::from_fn(8, 10, |_, _| (0.5, 0.0)).apply(&ramp(8, 10)).unwrap();
    for y in 0..8 {
        for x in 0..9 {
            assert!((out.get(&[0, y, x]) - (x as f64 + 0.5)).abs() <= 1e-6);
        }
    }
}

#[test]
fn resize_roundtrip_shapes() {
    let t = Tensor::from_fn(&[2, 8, 8], |ix| (ix[1] + ix[2]) as f64);
    let small = ops::resize_bilinear(&t, 4, 4).unwrap();
    assert_eq!(small.shape(), &[2, 4, 4]);
    // a bilinear function of the coordinates is reproduced exactly
    let big = ops::resize_bilinear(&t, 15, 15).unwrap();
    for y in 0..15 {
        for x in 0..15 {
            let expect = (y as f64 + x as f64) * 7.0 / 14.0;
            assert!((big.get(&[1, y, x]) - expect).abs() < 1e-12);
        }
    }
}
