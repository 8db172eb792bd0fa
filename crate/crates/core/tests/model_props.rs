mod common;

use avatar_field::backbone::features_bounded;
use avatar_field::model::{AblationMode, AvatarField, ModelConfig};
use avatar_field::renderer::{render_image, PosedModel, RenderConfig};
use avatar_field::skeleton::Pose;
use proptest::prelude::*;
use avatar_field::synthetic::{BodyAngles, SceneSpec};
use avatar_field::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn body_model(cfg: &ModelConfig, seed: u64) -> (AvatarField, ParamStore) {
    let topo = SceneSpec::default_body().topology().unwrap();
    AvatarField::init(cfg, &topo, seed).unwrap()
}

fn bones() -> usize {
    SceneSpec::default_body().topology().unwrap().bone_count()
}

fn set_scales(model: &AvatarField, params: &mut ParamStore, s: f64) {
    for v in params.get_mut(model.scales_param()).data_mut() {
        *v = s.ln();
    }
}

fn squared_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

#[test]
fn theta_depends_on_pose() {
    let (model, params) = body_model(&ModelConfig::default(), 1);
    let pose = BodyAngles::bent().to_pose();
    let mut g = Graph::new(&params);
    let pv = g.input(pose.to_tensor());
    let ctx = model.prepare_var(&mut g, pv).unwrap();
    let theta = model
        .frequency_coefficients(&mut g, &ctx, &Tensor::row(&[0.3, 0.6, 0.05]))
        .unwrap()
        .unwrap();
    let mut total = g.sum(theta[0]).unwrap();
    for t in &theta[1..] {
        let s = g.sum(*t).unwrap();
        total = g.add(total, s).unwrap();
    }
    let grads = g.backward(total).unwrap();
    assert!(squared_norm(grads.wrt(pv).unwrap()) > 0.0);
}

#[test]
fn density_depends_on_pose() {
    let (model, params) = body_model(&ModelConfig::default(), 2);
    let mut g = Graph::new(&params);
    let pv = g.input(Pose::identity(bones()).to_tensor());
    let ctx = model.prepare_var(&mut g, pv).unwrap();
    let out = model
        .query(&mut g, &ctx, &Tensor::row(&[0.0, 0.4, 0.1]), &Tensor::row(&[0.0, 0.0, 1.0]))
        .unwrap();
    assert_eq!(out.evaluated, 1);
    let grads = g.backward(out.sigma).unwrap();
    assert!(squared_norm(grads.wrt(pv).unwrap()) > 0.0);
}

#[test]
fn points_outside_every_part_are_empty() {
    let (model, params) = body_model(&ModelConfig::default(), 3);
    let mut g = Graph::new(&params);
    let ctx = model.prepare(&mut g, &Pose::identity(bones())).unwrap();
    let pts = Tensor::matrix(2, 3, vec![40.0, 0.0, 0.0, 0.0, -30.0, 5.0]);
    let dirs = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let out = model.query(&mut g, &ctx, &pts, &dirs).unwrap();
    assert_eq!(out.evaluated, 0);
    assert!(g.value(out.sigma).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.color).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn backbone_features_are_bounded(seed in 0u64..1000, spread in 0.1f64..1.5) {
        let (model, params) = body_model(&ModelConfig::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = BodyAngles::sample(&mut rng).to_pose();
        let pts = Tensor::matrix(16, 3, (0..48).map(|_| rng.gen_range(-spread..spread)).collect());
        let mut g = Graph::new(&params);
        let ctx = model.prepare(&mut g, &pose).unwrap();
        let s = model.features(&mut g, &ctx, &pts).unwrap();
        prop_assert!(features_bounded(g.value(s)));
    }
}

#[test]
fn culling_does_not_change_a_render() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(dir.path());
    let (model, mut params) = body_model(&ModelConfig::default(), 5);
    // tight boxes so a good share of samples is culled
    set_scales(&model, &mut params, 1.6);
    let frame = &ds.frames[0];
    let cfg = RenderConfig {
        samples: 24,
        workers: Some(1),
        ..RenderConfig::default()
    };
    let render = |m: &AvatarField| {
        let field = PosedModel {
            model: m,
            params: &params,
            pose: &frame.pose,
        };
        render_image(&field, &frame.camera, &cfg).unwrap()
    };
    let (on, alpha_on) = render(&model.with_culling(true));
    let (off, alpha_off) = render(&model.with_culling(false));
    assert_eq!(on.data(), off.data());
    assert_eq!(alpha_on, alpha_off);
    assert!(alpha_on.iter().any(|&a| a > 0.0));
}

#[test]
fn only_syn_equals_full_when_theta_is_one() {
    let (model, mut params) = body_model(&ModelConfig::default(), 6);
    for (name, value) in [("window/freq2_w", 0.0), ("window/freq2_b", 1.0)] {
        let id = params.id(name).unwrap();
        params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
    }
    let syn = model.with_mode(AblationMode::OnlySyn, &mut params).unwrap();
    let pose = BodyAngles::bent().to_pose();
    let pts = Tensor::matrix(3, 3, vec![0.0, 0.3, 0.1, 0.4, 0.7, 0.0, 0.1, -0.5, 0.05]);
    let dirs = Tensor::matrix(3, 3, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    let eval = |m: &AvatarField| {
        let mut g = Graph::new(&params);
        let ctx = m.prepare(&mut g, &pose).unwrap();
        let out = m.query(&mut g, &ctx, &pts, &dirs).unwrap();
        (g.value(out.sigma).clone(), g.value(out.color).clone())
    };
    assert_eq!(eval(&model), eval(&syn));
}

#[test]
fn only_gnn_leaves_frequency_mlp_without_gradient() {
    let cfg = ModelConfig {
        ablation: AblationMode::OnlyGnn,
        ..ModelConfig::default()
    };
    let (model, params) = body_model(&cfg, 7);
    let mut g = Graph::new(&params);
    let ctx = model.prepare(&mut g, &BodyAngles::bent().to_pose()).unwrap();
    let out = model
        .query(&mut g, &ctx, &Tensor::row(&[0.0, 0.4, 0.1]), &Tensor::row(&[0.0, 0.0, 1.0]))
        .unwrap();
    let grads = g.backward(out.sigma).unwrap();
    for name in ["window/freq1_w", "window/freq1_b", "window/freq2_w", "window/freq2_b"] {
        let id = params.id(name).unwrap();
        let zero = grads.params().get(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
        assert!(zero, "{name} received gradient");
    }
    let cond = params.id("backbone/condition_w").unwrap();
    assert!(grads.params().get(cond).is_some_and(|t| squared_norm(t) > 0.0));
}
