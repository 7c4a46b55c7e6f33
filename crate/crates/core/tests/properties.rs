use dualcloak_core::attack::{render_adversarial, AttackConfig, PerturbationState, Space};
use dualcloak_core::autodiff::{finite_diff_check, gradient};
use dualcloak_core::colorspace::{lab_to_rgb_tensor, rgb_to_lab_tensor};
use dualcloak_core::eval::{psnr, ssim, TransformSpec};
use dualcloak_core::frequency::{apply_masked_delta, dct2, dct_matrix, make_lowfreq_mask};
use dualcloak_core::losses::{normalized_sq_distance, LossWeights};
use dualcloak_core::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn random_state(seed: u64, n: usize, cfg: &AttackConfig, scale: f64) -> PerturbationState {
    let mut s = PerturbationState::zeros(n, n, cfg.lr);
    let lab = cfg.lab_bound();
    s.delta_a = rand_tensor(seed, &[n, n], -scale * lab, scale * lab);
    s.delta_b = rand_tensor(seed + 1, &[n, n], -scale * lab, scale * lab);
    s.delta_freq = rand_tensor(seed + 2, &[3, n, n], -scale, scale);
    s.delta_rgb = rand_tensor(seed + 3, &[3, n, n], -scale, scale);
    s
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(seed in any::<u64>()) {
        let x = rand_tensor(seed, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(seed ^ 1, &[3, 4], -1.0, 1.0);
        fn f<'t>(v: Var<'t>) -> Result<Var<'t>> {
            Ok(v.tanh().sum_sq())
        }
        fn g<'t>(v: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
            Ok(v.mul(&v.tape().constant(w.clone()))?.exp().sum())
        }
        let (_, gf) = gradient(&f, &x).unwrap();
        let (_, gg) = gradient(&|v| g(v, &w), &x).unwrap();
        let (_, gs) = gradient(&|v| f(v)?.add(&g(v, &w)?), &x).unwrap();
        let expect = gf.zip_map(&gg, |a, b| a + b).unwrap();
        for (a, b) in gs.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn constants_get_zero_gradient(seed in any::<u64>()) {
        let tape = Tape::new();
        let a = tape.var(rand_tensor(seed, &[5], -1.0, 1.0));
        let c = tape.leaf(rand_tensor(seed ^ 7, &[5], -1.0, 1.0), false);
        let loss = a.mul(&c).unwrap().sigmoid().sum();
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(c).is_none());
        prop_assert!(g.wrt(a).unwrap().all_finite());
    }

    #[test]
    fn smooth_primitives_match_central_differences(seed in any::<u64>()) {
        let x = rand_tensor(seed, &[2, 3], 0.2, 1.5);
        let w = rand_tensor(seed ^ 3, &[2, 3], -1.0, 1.0);
        let r = finite_diff_check(
            |v| {
                let wv = v.tape().constant(w.clone());
                v.ln().add(&v.sqrt())?.mul(&wv)?.softmax().powf(1.5).sum_sq().add(&v.silu().mean())
            },
            &x,
            1e-6,
        )
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn lab_round_trip_in_gamut(seed in any::<u64>()) {
        let x = rand_tensor(seed, &[3, 4, 4], 0.0, 1.0);
        let back = lab_to_rgb_tensor(&rgb_to_lab_tensor(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn lab_step_keeps_lightness_before_clipping(seed in any::<u64>()) {
        // mid-range colors with small chroma steps stay in gamut
        let x = rand_tensor(seed, &[3, 4, 4], 0.3, 0.7);
        let mut lab = rgb_to_lab_tensor(&x).unwrap();
        let d = rand_tensor(seed ^ 9, &[2, 4, 4], -4.0, 4.0);
        for k in 0..32 {
            lab.data_mut()[16 + k] += d.data()[k];
        }
        let rgb = lab_to_rgb_tensor(&lab).unwrap();
        prop_assume!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = rgb_to_lab_tensor(&rgb).unwrap();
        for k in 0..16 {
            prop_assert!((again.data()[k] - lab.data()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn dct_is_orthonormal(n in 2usize..24) {
        let d = dct_matrix(n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| d.data()[i * n + k] * d.data()[j * n + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn masked_update_only_touches_masked_coefficients(seed in any::<u64>(), frac in 0.05f64..1.0) {
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(seed, &[3, 8, 8], 0.0, 1.0));
        let delta = tape.constant(rand_tensor(seed ^ 5, &[3, 8, 8], -1.0, 1.0));
        let mask = make_lowfreq_mask(8, 8, frac).unwrap();
        let out = apply_masked_delta(&x, &delta, &mask, false).unwrap();
        let diff = dct2(&out).unwrap().value().zip_map(&dct2(&x).unwrap().value(), |a, b| a - b).unwrap();
        for (k, v) in diff.data().iter().enumerate() {
            if mask.data()[k % 64] == 0.0 {
                prop_assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_distance_identities(seed in any::<u64>()) {
        let tape = Tape::new();
        let t = rand_tensor(seed, &[1, 3, 4, 4], -2.0, 2.0);
        let a = tape.constant(t.clone());
        prop_assert_eq!(normalized_sq_distance(&a, &a).unwrap().item(), 0.0);
        let d = normalized_sq_distance(&a, &a.neg()).unwrap().item();
        let want = 4.0 * t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        prop_assert!((d - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn weighted_total_is_linear_in_weights(
        comps in proptest::array::uniform7(-5.0f64..5.0),
        w1 in proptest::array::uniform4(0.0f64..3.0),
        w2 in proptest::array::uniform4(0.0f64..3.0),
    ) {
        let v = dualcloak_core::losses::ComponentValues {
            irc: comps[0], ira_denoiser: comps[1], ira_encoder: comps[2], clip: comps[3], lpips: comps[4], dm: comps[5], total: comps[6],
        };
        let mk = |w: [f64; 4]| LossWeights { irc: w[0], ira: w[1], aux: w[2], dm: w[3] };
        let sum = [w1[0] + w2[0], w1[1] + w2[1], w1[2] + w2[2], w1[3] + w2[3]];
        let lhs = v.weighted(&mk(sum));
        let rhs = v.weighted(&mk(w1)) + v.weighted(&mk(w2));
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn any_state_respects_the_box(seed in any::<u64>(), scale in 0.0f64..3.0, space_ix in 0usize..7) {
        let cfg = AttackConfig { space: Space::ALL[space_ix], ..Default::default() };
        let x = rand_tensor(seed, &[3, 8, 8], 0.0, 1.0);
        let s = random_state(seed ^ 11, 8, &cfg, scale);
        let xi = render_adversarial(&x, &s, &cfg).unwrap();
        prop_assert!(xi.max_abs_diff(&x).unwrap() <= 16.0 / 255.0 + 1e-12);
        prop_assert!(xi.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(psnr(&x, &xi).unwrap() >= 24.03);
    }

    #[test]
    fn transforms_preserve_the_unit_range(seed in any::<u64>(), quality in 1u8..=100, sigma in 0.3f64..3.0) {
        let x = rand_tensor(seed, &[3, 16, 16], 0.0, 1.0);
        for t in [
            TransformSpec::JpegLike { quality },
            TransformSpec::GaussianBlur { kernel: 7, sigma },
            TransformSpec::GaussianNoise { scale: 0.2, seed },
        ] {
            let y = t.apply(&x).unwrap();
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", t.name());
        }
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let a = rand_tensor(seed, &[3, 12, 12], 0.0, 1.0);
        let b = rand_tensor(seed ^ 2, &[3, 12, 12], 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}
