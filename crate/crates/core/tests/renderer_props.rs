use avatar_field::model::{AvatarField, ModelConfig};
use avatar_field::renderer::{
    composite, composite_graph, render_image, stratified_sample, Camera, PosedModel, Ray, RenderConfig,
};
use avatar_field::synthetic::{BodyAngles, SceneSpec};
use avatar_field::tensor::{Graph, ParamStore, Tensor};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn opaque_front_sample_gives_its_color() {
    let sigma = [1e6, 2.0, 5.0, 0.5];
    let deltas = [0.1; 4];
    let colors = [[0.2, 0.7, 0.4], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let c = composite(&sigma, &deltas, &colors, [1.0, 1.0, 1.0]).unwrap();
    for k in 0..3 {
        assert!((c.color[k] - colors[0][k]).abs() < 1e-12);
    }
    assert!((c.alpha - 1.0).abs() < 1e-12);
}

#[test]
fn empty_ray_gives_background() {
    let c = composite(&[0.0; 5], &[0.2; 5], &[[0.3, 0.3, 0.3]; 5], [0.1, 0.5, 0.9]).unwrap();
    assert_eq!(c.color, [0.1, 0.5, 0.9]);
    assert_eq!(c.alpha, 0.0);
}

#[test]
fn negative_density_is_rejected() {
    assert!(composite(&[0.5, -0.1], &[0.1, 0.1], &[[0.0; 3]; 2], [0.0; 3]).is_err());
}

#[test]
fn random_rays_have_monotone_transmittance_and_bounded_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let n = rng.gen_range(2..64);
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0) * rng.gen::<f64>().powi(3)).collect();
        let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..0.2)).collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let c = composite(&sigma, &deltas, &colors, [0.0; 3]).unwrap();
        assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
        let total: f64 = c.weights.iter().sum();
        assert!((0.0..=1.0 + 1e-12).contains(&total));
        assert!(c.weights.iter().all(|&w| w >= 0.0));
    }
}

proptest! {
    #[test]
    fn graph_compositing_matches_plain(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, s) = (3, 7);
        let sigma: Vec<f64> = (0..r * s).map(|_| rng.gen_range(0.0..8.0)).collect();
        let deltas: Vec<f64> = (0..r * s).map(|_| rng.gen_range(0.01..0.3)).collect();
        let colors: Vec<f64> = (0..r * s * 3).map(|_| rng.gen()).collect();
        let bg = [0.2, 0.4, 0.6];
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let sv = g.constant(Tensor::matrix(r * s, 1, sigma.clone()));
        let cv = g.constant(Tensor::matrix(r * s, 3, colors.clone()));
        let (rgb, acc) = composite_graph(&mut g, sv, cv, &Tensor::matrix(r, s, deltas.clone()), bg).unwrap();
        for i in 0..r {
            let cols: Vec<[f64; 3]> = (0..s)
                .map(|j| {
                    let o = 3 * (i * s + j);
                    [colors[o], colors[o + 1], colors[o + 2]]
                })
                .collect();
            let c = composite(&sigma[i * s..(i + 1) * s], &deltas[i * s..(i + 1) * s], &cols, bg).unwrap();
            for k in 0..3 {
                prop_assert!((g.value(rgb).get(i, k) - c.color[k]).abs() < 1e-12);
            }
            prop_assert!((g.value(acc).get(i, 0) - c.alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_samples_stay_in_their_bins(seed in 0u64..10_000, n in 2usize..80) {
        let ray = Ray { origin: [0.0; 3], dir: [0.0, 0.0, 1.0], near: 0.5, far: 4.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = stratified_sample(&ray, n, true, &mut rng).unwrap();
        let width = 4.0 / n as f64;
        for (i, &t) in set.t.iter().enumerate() {
            let lo = 0.5 + i as f64 * width;
            prop_assert!(t >= lo && t <= lo + width);
        }
        prop_assert!(set.deltas.iter().all(|&d| d > 0.0));
    }
}

#[test]
fn jittered_render_is_deterministic_for_a_seed() {
    let topo = SceneSpec::default_body().topology().unwrap();
    let (model, params) = AvatarField::init(&ModelConfig::default(), &topo, 3).unwrap();
    let pose = BodyAngles::bent().to_pose();
    let camera = Camera::look_at(
        Vector3::new(0.0, 0.3, 3.0),
        Vector3::new(0.0, 0.3, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        12,
        12,
        14.0,
        1.5,
        4.5,
    )
    .unwrap();
    let field = PosedModel { model: &model, params: &params, pose: &pose };
    let render = |seed, workers| {
        let cfg = RenderConfig { samples: 16, jitter: true, seed, workers: Some(workers), ..RenderConfig::default() };
        render_image(&field, &camera, &cfg).unwrap().0
    };
    let a = render(5, 1);
    assert_eq!(a.data(), render(5, 1).data());
    assert_eq!(a.data(), render(5, 2).data());
    assert_ne!(a.data(), render(6, 1).data());
}
