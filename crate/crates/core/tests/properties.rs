//! Property tests over random shapes, values and seeds.

use proptest::prelude::*;

use ternaus_core::data::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, GrayImage, RgbImage};
use ternaus_core::loss::{composite_loss, iou_discrete, soft_jaccard, BinaryMask};
use ternaus_core::model::{build_ternausnet, init_params, InitScheme, ParamStore, TernausNet};
use ternaus_core::ops::{
    concat_channels, conv2d_forward, conv_strided_forward, convtranspose2_backward,
    convtranspose2_forward, fan_in, lecun_bound, lecun_uniform_fill, maxpool2_forward, relu_forward,
    sigmoid_forward,
};
use ternaus_core::optim::{adam_step, AdamConfig, AdamState};
use ternaus_core::rng::Rng;
use ternaus_core::tensor::{Shape, Tensor4};

fn random(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = Rng::new(seed);
    Tensor4::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn mask(bits: &[bool], shape: [usize; 4]) -> BinaryMask {
    BinaryMask::new(&Tensor4::from_fn(shape, |i| bits[i] as u8 as f32)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn layer_shape_laws(n in 1usize..3, c in 1usize..5, o in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let (h2, w2) = (2 * h, 2 * w);
        let x = random([n, c, h2, w2], seed);

        let y = conv2d_forward(&x, &random([o, c, 3, 3], seed ^ 1), &vec![0.1; o]).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, o, h2, w2));
        prop_assert!(y.is_finite());

        let (p, _) = maxpool2_forward(&x).unwrap();
        prop_assert_eq!(p.shape(), Shape::new(n, c, h, w));

        let u = convtranspose2_forward(&x, &random([c, o, 4, 4], seed ^ 2), &vec![0.0; o]).unwrap();
        prop_assert_eq!(u.shape(), Shape::new(n, o, 2 * h2, 2 * w2));
        prop_assert!(u.is_finite());

        let cat = concat_channels(&x, &random([n, o, h2, w2], seed ^ 3)).unwrap();
        prop_assert_eq!(cat.shape(), Shape::new(n, c + o, h2, w2));

        prop_assert!(relu_forward(&x).data().iter().all(|&v| v >= 0.0));
        let s = sigmoid_forward(&x.map(|v| v * 50.0));
        prop_assert!(s.data().iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identity_kernel_is_identity(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = random([n, c, h, w], seed);
        let mut k = Tensor4::<f64>::zeros([c, c, 3, 3]);
        for i in 0..c {
            k.set(i, i, 1, 1, 1.0);
        }
        let y = conv2d_forward(&x, &k, &vec![0.0; c]).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upconv_input_grad_is_strided_conv(n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let x = random([n, c, h, w], seed);
        let wt = random([c, o, 4, 4], seed ^ 5);
        let gy = random([n, o, 2 * h, 2 * w], seed ^ 6);
        let gx = convtranspose2_backward(&x, &wt, &gy).unwrap().x.unwrap();
        let via = conv_strided_forward(&gy, &wt, &vec![0.0; c], 2, 1).unwrap();
        for (a, b) in gx.data().iter().zip(via.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn lecun_fill_is_seeded_and_bounded(o in 1usize..8, i in 1usize..8, k in prop::sample::select(vec![1usize, 3, 4]), seed in any::<u64>()) {
        let shape = Shape::new(o, i, k, k);
        let a: Tensor4<f32> = lecun_uniform_fill(&mut Rng::new(seed), shape, fan_in(shape));
        let b: Tensor4<f32> = lecun_uniform_fill(&mut Rng::new(seed), shape, fan_in(shape));
        prop_assert_eq!(a.data(), b.data());
        let bound = lecun_bound(fan_in(shape)) as f32;
        prop_assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn jaccard_and_iou_bounds(bits in prop::collection::vec(any::<bool>(), 32), probs in prop::collection::vec(0.0f64..=1.0, 16)) {
        let shape = [1, 1, 4, 4];
        let (a, b) = (mask(&bits[..16], shape), mask(&bits[16..], shape));
        let ab = iou_discrete(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou_discrete(&b, &a).unwrap());

        let y = a.tensor().cast::<f64>();
        let p = Tensor4::from_vec(shape, probs).unwrap();
        let j = soft_jaccard(&y, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        let fg = a.foreground() as f64 / 16.0;
        prop_assert!((soft_jaccard(&y, &y).unwrap() - fg).abs() < 1e-12);
    }

    #[test]
    fn small_gradient_step_lowers_loss(bits in prop::collection::vec(any::<bool>(), 16), probs in prop::collection::vec(0.05f64..0.95, 16)) {
        let y = mask(&bits, [1, 1, 4, 4]).tensor().cast::<f64>();
        let p = Tensor4::from_vec([1, 1, 4, 4], probs).unwrap();
        let (before, g) = composite_loss(&y, &p).unwrap();
        let norm = g.dot(&g).sqrt();
        prop_assume!(norm > 1e-9);
        let step = 1e-4 / norm;
        let q = Tensor4::from_fn(p.shape(), |i| p.data()[i] - step * g.data()[i]);
        let (after, _) = composite_loss(&y, &q).unwrap();
        prop_assert!(after.l < before.l);
    }

    #[test]
    fn first_adam_step_bounded_by_lr(grads in prop::collection::vec(-1e3f64..1e3, 1..40), lr in 1e-5f64..1e-1) {
        let mut store = ParamStore::<f64>::new();
        let len = grads.len();
        store.insert("p.weight", ternaus_core::model::ParamKind::Weight, Tensor4::zeros([1, 1, 1, len])).unwrap();
        store.iter_mut().next().unwrap().grad = Tensor4::from_vec([1, 1, 1, len], grads).unwrap();
        let mut state = AdamState::new(&store, AdamConfig { lr, ..AdamConfig::default() });
        adam_step(&mut store, &mut state).unwrap();
        prop_assert!(store.value("p.weight").unwrap().data().iter().all(|w| w.abs() <= lr * (1.0 + 1e-9)));
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let rgb = RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.int_in(0, 255) as u8).collect()).unwrap();
        let gray = GrayImage::new(w, h, (0..w * h).map(|_| rng.int_in(0, 255) as u8).collect()).unwrap();
        let rgb_bytes = encode_ppm(&rgb);
        prop_assert_eq!(encode_ppm(&decode_ppm(&rgb_bytes).unwrap()), rgb_bytes);
        let gray_bytes = encode_pgm(&gray);
        prop_assert_eq!(encode_pgm(&decode_pgm(&gray_bytes).unwrap()), gray_bytes);
    }
}

proptest! {
    // Full-network cases are expensive; a handful of seeds suffices.
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn network_output_is_a_probability_map(seed in any::<u64>(), side in prop::sample::select(vec![32usize, 64])) {
        let arch = build_ternausnet();
        let params = init_params::<f32>(&arch, &InitScheme::Lecun, &mut Rng::new(seed)).unwrap();
        for spec in arch.param_specs() {
            let bound = lecun_bound(spec.fan_in) as f32;
            prop_assert!(params.value(&spec.name).unwrap().data().iter().all(|v| v.abs() <= bound));
        }
        let net = TernausNet::new(arch, params).unwrap();
        let mut rng = Rng::new(seed ^ 9);
        let x = Tensor4::from_fn([1, 3, side, side], |_| rng.uniform() as f32);
        let p = net.forward(&x).unwrap();
        prop_assert_eq!(p.shape(), Shape::new(1, 1, side, side));
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
