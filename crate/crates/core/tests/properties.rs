use pulse_core::generator::{init_random_generator, sample_latent_pushforward, LatentState};
use pulse_core::metrics::{mse, pixelwise_mean_minimizer, psnr, ssim, ssim_score, sum_squared_distance};
use pulse_core::objective::{cross_loss, geocross_loss};
use pulse_core::rng::rng;
use pulse_core::sphere::{project_sphere, sample_sphere, spherical_step, Retraction};
use pulse_core::{GeneratorConfig, GeneratorSpec, Image};
use proptest::prelude::*;
use rand::Rng;
use std::sync::OnceLock;

fn desk() -> &'static GeneratorSpec {
    static SPEC: OnceLock<GeneratorSpec> = OnceLock::new();
    SPEC.get_or_init(|| init_random_generator(&GeneratorConfig::desk(), 1).unwrap())
}

fn vecs(k: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k)
}

fn image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_planes(h, w, 1, (0..h * w).map(|_| r.random()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_stays_on_sphere(d in 2usize..40, seed in any::<u64>(), lr in 0.0f64..50.0, renorm in any::<bool>()) {
        let mut r = rng(seed);
        let mut styles = vec![sample_sphere(d, seed), sample_sphere(d, seed ^ 1)];
        let g: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| r.random::<f64>() * 10.0 - 5.0).collect()).collect();
        let mode = if renorm { Retraction::Renormalize } else { Retraction::Tangent };
        spherical_step(&mut styles, &[&g[0], &g[1]], lr, mode).unwrap();
        let root = (d as f64).sqrt();
        for v in &styles {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - root).abs() <= 1e-9 * root);
        }
    }

    #[test]
    fn projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let r = (v.len() as f64).sqrt();
        let p = project_sphere(&v, r).unwrap();
        let q = project_sphere(&p, r).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_losses_are_permutation_invariant(vs in vecs(4, 5), rot in 0usize..4) {
        prop_assume!(vs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
        let mut perm = vs.clone();
        perm.rotate_left(rot);
        perm.swap(0, 3);
        prop_assert!((cross_loss(&vs) - cross_loss(&perm)).abs() < 1e-9);
        prop_assert!((geocross_loss(&vs).unwrap() - geocross_loss(&perm).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cross_losses_vanish_only_when_equal(v in prop::collection::vec(0.2f64..2.0, 6), bump in 0.05f64..1.0, i in 0usize..6) {
        let equal = vec![v.clone(); 3];
        prop_assert_eq!(cross_loss(&equal), 0.0);
        prop_assert!(geocross_loss(&equal).unwrap() < 1e-12);
        // All entries of v are non-zero, so bumping one changes the direction.
        let mut other = v.clone();
        other[i] += bump;
        let mixed = vec![v.clone(), other, v];
        prop_assert!(cross_loss(&mixed) > 0.0);
        prop_assert!(geocross_loss(&mixed).unwrap() > 0.0);
    }

    #[test]
    fn geocross_is_scale_invariant(vs in vecs(3, 4), s in 0.1f64..10.0) {
        prop_assume!(vs.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2));
        let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        prop_assert!((geocross_loss(&vs).unwrap() - geocross_loss(&scaled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (image(9, 10, s1), image(9, 10, s2));
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(psnr(&a, &b).unwrap() > 0.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrast_structure_ignores_common_shift(s1 in any::<u64>(), s2 in any::<u64>(), c in -0.3f64..0.3) {
        let (a, b) = (image(8, 8, s1), image(8, 8, s2));
        let shift = |im: &Image| Image::from_planes(8, 8, 1, im.data().iter().map(|v| v + c).collect()).unwrap();
        let base = ssim_score(&a, &b).unwrap().contrast_structure;
        let moved = ssim_score(&shift(&a), &shift(&b)).unwrap().contrast_structure;
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn mean_minimizes_squared_distance(seeds in prop::collection::vec(any::<u64>(), 2..5), probe in any::<u64>()) {
        let imgs: Vec<Image> = seeds.iter().map(|&s| image(3, 3, s)).collect();
        let mean = pixelwise_mean_minimizer(&imgs).unwrap();
        let other = image(3, 3, probe);
        prop_assert!(sum_squared_distance(&imgs, &mean).unwrap() <= sum_squared_distance(&imgs, &other).unwrap() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mapping_inverse_recovers_latent(seed in any::<u64>()) {
        let spec = desk();
        let z = sample_sphere(spec.latent_dim(), seed);
        let w = spec.map_latent(&z).unwrap();
        let back = spec.inverse_map(&w).unwrap();
        for (a, b) in z.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        let pushed = sample_latent_pushforward(spec, seed).unwrap();
        prop_assert_eq!(pushed, w);
    }

    #[test]
    fn synthesis_is_deterministic_and_in_range(seed in any::<u64>()) {
        let spec = desk();
        let state = LatentState::sample(spec, seed, 0);
        let a = spec.synthesize(&state).unwrap();
        prop_assert_eq!(&a, &spec.synthesize(&state).unwrap());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.dims(), (32, 32));
        for (i, n) in state.noise.iter().enumerate() {
            let r = spec.config().layer_resolution(i);
            prop_assert_eq!(n.dims(), &[r, r]);
        }
    }
}

#[test]
fn generator_geometry() {
    let desk = GeneratorConfig::desk();
    assert_eq!(desk.output_resolution(), 32);
    assert_eq!(desk.default_trainable_noise(), 2);
    let full = GeneratorConfig::full_scale();
    full.validate().unwrap();
    assert_eq!(full.output_resolution(), 1024);
    assert_eq!(full.layer_resolution(17), 1024);
    assert_eq!(full.default_trainable_noise(), 6);
}

#[test]
fn seeded_init_is_reproducible() {
    let a = init_random_generator(&GeneratorConfig::desk(), 5).unwrap();
    let b = init_random_generator(&GeneratorConfig::desk(), 5).unwrap();
    let c = init_random_generator(&GeneratorConfig::desk(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.mapping_condition_number() < 1.0 + 1e-6);
}
