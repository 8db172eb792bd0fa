//! Finite-difference checks of every differentiable piece, from single
//! graph ops up to a full render and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, RadianceHead};
use crate::error::{Error, Result};
use crate::model::{AvatarField, ModelConfig};
use crate::nn::ParamBuilder;
use crate::pose_encoder::{PoseEncoder, PoseEncoderConfig};
use crate::renderer::{composite_graph, generate_rays, sample_batch, Camera};
use crate::skeleton::{forward_kinematics_graph, to_relative_graph, BoneSpec, Pose, SkeletonTopology};
use crate::tensor::{
    finite_difference_check, finite_difference_wrt, GradCheckReport, Graph, ParamStore, Tensor, TensorError, Var,
};
use crate::trainer::{reconstruction_loss, scale_loss, total_loss};
use crate::window::{Window, WindowConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: [&str; 7] = [
    "tensor",
    "skeleton",
    "pose_encoder",
    "window",
    "backbone",
    "renderer",
    "pipeline",
];

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// A graph op under test: input shapes, whether inputs must be positive,
/// and the op itself.
struct OpCase {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    positive: bool,
    f: OpFn,
}

const OPS: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[(3, 4), (4, 2)], positive: false, f: |g, x| g.matmul(x[0], x[1]) },
    OpCase { name: "add", shapes: &[(3, 4), (1, 4)], positive: false, f: |g, x| g.add(x[0], x[1]) },
    OpCase { name: "sub", shapes: &[(3, 1), (3, 4)], positive: false, f: |g, x| g.sub(x[0], x[1]) },
    OpCase { name: "mul", shapes: &[(3, 4), (3, 1)], positive: false, f: |g, x| g.mul(x[0], x[1]) },
    OpCase { name: "div", shapes: &[(3, 4), (1, 4)], positive: true, f: |g, x| g.div(x[0], x[1]) },
    OpCase { name: "neg", shapes: &[(2, 3)], positive: false, f: |g, x| g.neg(x[0]) },
    OpCase { name: "scale", shapes: &[(2, 3)], positive: false, f: |g, x| g.scale(x[0], -1.7) },
    OpCase { name: "add_scalar", shapes: &[(2, 3)], positive: false, f: |g, x| g.add_scalar(x[0], 0.3) },
    OpCase { name: "sin", shapes: &[(2, 3)], positive: false, f: |g, x| g.sin(x[0]) },
    OpCase { name: "cos", shapes: &[(2, 3)], positive: false, f: |g, x| g.cos(x[0]) },
    OpCase { name: "exp", shapes: &[(2, 3)], positive: false, f: |g, x| g.exp(x[0]) },
    OpCase { name: "sigmoid", shapes: &[(2, 3)], positive: false, f: |g, x| g.sigmoid(x[0]) },
    OpCase { name: "relu", shapes: &[(2, 3)], positive: false, f: |g, x| g.relu(x[0]) },
    OpCase { name: "softplus", shapes: &[(2, 3)], positive: false, f: |g, x| g.softplus(x[0]) },
    OpCase { name: "abs", shapes: &[(2, 3)], positive: false, f: |g, x| g.abs(x[0]) },
    OpCase { name: "sqrt", shapes: &[(2, 3)], positive: true, f: |g, x| g.sqrt(x[0]) },
    OpCase { name: "powf", shapes: &[(2, 3)], positive: true, f: |g, x| g.powf(x[0], 3.0) },
    OpCase { name: "transpose", shapes: &[(2, 3)], positive: false, f: |g, x| g.transpose(x[0]) },
    OpCase { name: "reshape", shapes: &[(2, 6)], positive: false, f: |g, x| g.reshape(x[0], 4, 3) },
    OpCase { name: "concat_cols", shapes: &[(2, 3), (2, 1)], positive: false, f: |g, x| g.concat_cols(x) },
    OpCase { name: "concat_rows", shapes: &[(2, 3), (1, 3)], positive: false, f: |g, x| g.concat_rows(x) },
    OpCase { name: "slice_cols", shapes: &[(2, 5)], positive: false, f: |g, x| g.slice_cols(x[0], 1, 3) },
    OpCase { name: "slice_rows", shapes: &[(5, 2)], positive: false, f: |g, x| g.slice_rows(x[0], 2, 2) },
    OpCase { name: "sum", shapes: &[(3, 2)], positive: false, f: |g, x| g.sum(x[0]) },
    OpCase { name: "sum_rows", shapes: &[(3, 2)], positive: false, f: |g, x| g.sum_rows(x[0]) },
    OpCase { name: "sum_cols", shapes: &[(3, 2)], positive: false, f: |g, x| g.sum_cols(x[0]) },
    OpCase { name: "max_cols", shapes: &[(3, 4)], positive: false, f: |g, x| g.max_cols(x[0]) },
    OpCase { name: "max_stack", shapes: &[(3, 2), (3, 2), (3, 2)], positive: false, f: |g, x| g.max_stack(x) },
    OpCase { name: "row_norm", shapes: &[(4, 3)], positive: false, f: |g, x| g.row_norm(x[0]) },
    OpCase { name: "cross", shapes: &[(2, 3), (2, 3)], positive: false, f: |g, x| g.cross(x[0], x[1]) },
    OpCase { name: "cumsum_excl_cols", shapes: &[(2, 5)], positive: false, f: |g, x| g.cumsum_excl_cols(x[0]) },
    OpCase { name: "gather_rows", shapes: &[(4, 2)], positive: false, f: |g, x| g.gather_rows(x[0], &[3, 0, 3]) },
    OpCase { name: "scatter_rows", shapes: &[(2, 3)], positive: false, f: |g, x| g.scatter_rows(x[0], &[4, 1], 5) },
    OpCase { name: "linear", shapes: &[(3, 4), (4, 2), (1, 2)], positive: false, f: |g, x| g.linear(x[0], x[1], x[2]) },
];

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|o| o.name).collect()
}

/// Entries bounded away from zero (magnitude in `[0.1, 1.5]`) so kinks
/// of `abs`/`relu` and poles of `div` stay out of the step.
fn random_input(rng: &mut impl Rng, rows: usize, cols: usize, positive: bool) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if positive || rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Checks one op on `trials` random inputs, each reduced to a scalar
/// through a random linear probe.
pub fn check_op(name: &str, trials: usize, seed: u64) -> Result<CheckResult> {
    let case = OPS
        .iter()
        .find(|o| o.name == name)
        .ok_or_else(|| Error::Config(format!("unknown op {name}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::new();
    let mut worst = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for _ in 0..trials {
        let inputs = loop {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|&(r, c)| random_input(&mut rng, r, c, case.positive))
                .collect();
            // max ops need every candidate pair separated by more than the step
            if !case.name.starts_with("max") || min_gap(&inputs) > 1e-3 {
                break inputs;
            }
        };
        let out_shape = {
            let mut g = Graph::new(&params);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = (case.f)(&mut g, &vars)?;
            g.shape(out)
        };
        let probe = random_input(&mut rng, out_shape.0, out_shape.1, false);
        let report = finite_difference_wrt::<_, TensorError>(
            &params,
            &inputs,
            |g, x| {
                let out = (case.f)(g, x)?;
                let p = g.constant(probe.clone());
                let m = g.mul(out, p)?;
                g.sum(m)
            },
            STEP,
        )?;
        worst.coords_checked += report.coords_checked;
        if report.max_rel_error > worst.max_rel_error || !report.max_rel_error.is_finite() {
            worst.max_rel_error = report.max_rel_error;
            worst.worst = report.worst;
        }
    }
    Ok(CheckResult {
        name: format!("tensor/{name}"),
        report: worst,
    })
}

fn min_gap(inputs: &[Tensor]) -> f64 {
    let mut v: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn rand_t(rng: &mut impl Rng, r: usize, c: usize, s: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect())
}

fn chain_topology() -> SkeletonTopology {
    SkeletonTopology::new(&[
        BoneSpec {
            name: "a".into(),
            parent: None,
            offset: [0.1, 0.0, 0.0],
        },
        BoneSpec {
            name: "b".into(),
            parent: Some("a".into()),
            offset: [0.0, 0.6, 0.0],
        },
        BoneSpec {
            name: "c".into(),
            parent: Some("b".into()),
            offset: [0.0, 0.5, 0.1],
        },
    ])
    .expect("valid chain")
}

fn random_pose(rng: &mut impl Rng, bones: usize) -> Tensor {
    let mut p = Pose::identity(bones).to_tensor();
    for v in p.data_mut() {
        *v += rng.gen_range(-0.4..0.4);
    }
    p
}

/// Sum of `probe ⊙ v` for probes drawn once per check.
fn probe_sum(g: &mut Graph, v: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.clone());
    let m = g.mul(v, p)?;
    Ok(g.sum(m)?)
}

fn check_skeleton(seed: u64) -> Result<CheckResult> {
    let topo = chain_topology();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_pose(&mut rng, 3),
        rand_t(&mut rng, 3, 3, 0.5),
        rand_t(&mut rng, 4, 3, 1.0),
    ];
    let probes: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, 4, 3, 1.0)).collect();
    let params = ParamStore::new();
    let report = finite_difference_wrt::<_, Error>(
        &params,
        &inputs,
        |g, x| {
            let tf = forward_kinematics_graph(g, &topo, x[0])?;
            let s = g.exp(x[1])?;
            let rel = to_relative_graph(g, x[2], &tf, s)?;
            let mut acc = g.constant(Tensor::scalar(0.0));
            for (r, p) in rel.iter().zip(&probes) {
                let t = probe_sum(g, *r, p)?;
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        },
        STEP,
    )?;
    Ok(CheckResult {
        name: "skeleton".into(),
        report,
    })
}

fn check_pose_encoder(seed: u64) -> Result<Vec<CheckResult>> {
    let topo = chain_topology();
    let cfg = PoseEncoderConfig {
        conv_width: 6,
        mlp_width: 5,
        feature_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let enc = PoseEncoder::build(&cfg, &topo, &mut ParamBuilder::init(&mut params, &mut rng))?;
    let pose = random_pose(&mut rng, 3);
    let probe = rand_t(&mut rng, 3, 4, 1.0);
    let p_report = finite_difference_check::<_, Error>(
        &params,
        |g| {
            let x = g.constant(pose.clone());
            let f = enc.forward(g, x)?;
            probe_sum(g, f, &probe)
        },
        STEP,
        None,
    )?;
    let x_report = finite_difference_wrt::<_, Error>(
        &params,
        std::slice::from_ref(&pose),
        |g, x| {
            let f = enc.forward(g, x[0])?;
            probe_sum(g, f, &probe)
        },
        STEP,
    )?;
    Ok(vec![
        CheckResult {
            name: "pose_encoder/params".into(),
            report: p_report,
        },
        CheckResult {
            name: "pose_encoder/pose".into(),
            report: x_report,
        },
    ])
}

fn check_window(seed: u64) -> Result<Vec<CheckResult>> {
    const BONES: usize = 3;
    const DG: usize = 4;
    let cfg = WindowConfig {
        sine_features: 5,
        point_feature_dim: 6,
        feature_window_width: 5,
        frequency_hidden: 6,
        sine_weights_trainable: true,
        theta_init_noise: 0.3,
        ..WindowConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let win = Window::build(&cfg, BONES, DG, 2, 4, &mut ParamBuilder::init(&mut params, &mut rng))?;
    // sine features need moderate frequencies for a meaningful step
    let sine = params.id("window/sine_w")?;
    for v in params.get_mut(sine).data_mut() {
        *v *= 0.1;
    }
    let mut inputs: Vec<Tensor> = (0..BONES).map(|_| rand_t(&mut rng, 3, 3, 0.55)).collect();
    inputs.push(rand_t(&mut rng, BONES, DG, 1.0));
    let probes: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, 3, 4, 1.0)).collect();
    let xt_probe = rand_t(&mut rng, 3, 3 * BONES, 1.0);
    let loss = |g: &mut Graph, x: &[Var]| -> Result<Var> {
        let valid = vec![g.constant(Tensor::full(3, 1, 1.0)); BONES];
        let out = win.forward(g, &x[..BONES], &valid, x[BONES], true)?;
        let mut acc = probe_sum(g, out.xtilde, &xt_probe)?;
        for (th, p) in out.theta.expect("theta requested").iter().zip(&probes) {
            let t = probe_sum(g, *th, p)?;
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let p_report = finite_difference_check::<_, Error>(
        &params,
        |g| {
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            loss(g, &vars)
        },
        STEP,
        None,
    )?;
    let x_report = finite_difference_wrt::<_, Error>(&params, &inputs, loss, STEP)?;
    Ok(vec![
        CheckResult {
            name: "window/params".into(),
            report: p_report,
        },
        CheckResult {
            name: "window/inputs".into(),
            report: x_report,
        },
    ])
}

fn check_backbone(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = BackboneConfig {
        layers: 2,
        hidden: 5,
        color_hidden: 4,
        dir_frequencies: 2,
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let (bb, head) = {
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let bb = Backbone::build(&cfg, 6, Some(3), &mut pb)?;
        let head = RadianceHead::build(&cfg, bb.output_dim(), &mut pb)?;
        (bb, head)
    };
    let p = 4;
    let inputs = vec![
        rand_t(&mut rng, p, 6, 0.05),
        rand_t(&mut rng, p, 5, 1.5),
        rand_t(&mut rng, p, 5, 1.5),
        rand_t(&mut rng, p, 3, 1.0),
    ];
    let dirs = {
        let d = rand_t(&mut rng, p, 3, 1.0);
        let rows: Vec<Vec<f64>> = (0..p)
            .map(|r| {
                let v = d.row_slice(r);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    };
    let probe = rand_t(&mut rng, p, 3, 1.0);
    let loss = |g: &mut Graph, x: &[Var]| -> Result<Var> {
        let s = bb.modulated_forward(g, x[0], Some(&x[1..3]), Some(x[3]))?;
        let (sigma, color) = head.forward(g, s, &dirs)?;
        let c = probe_sum(g, color, &probe)?;
        let s = g.sum(sigma)?;
        Ok(g.add(c, s)?)
    };
    let p_report = finite_difference_check::<_, Error>(
        &params,
        |g| {
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            loss(g, &vars)
        },
        STEP,
        None,
    )?;
    let x_report = finite_difference_wrt::<_, Error>(&params, &inputs, loss, STEP)?;
    Ok(vec![
        CheckResult {
            name: "backbone/params".into(),
            report: p_report,
        },
        CheckResult {
            name: "backbone/inputs".into(),
            report: x_report,
        },
    ])
}

fn check_renderer(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, s) = (3, 6);
    let sigma = Tensor::matrix(r * s, 1, (0..r * s).map(|_| rng.gen_range(0.0..3.0)).collect());
    let color = Tensor::matrix(r * s, 3, (0..r * s * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
    let deltas = Tensor::matrix(r, s, (0..r * s).map(|_| rng.gen_range(0.05..0.5)).collect());
    let probe = rand_t(&mut rng, r, 3, 1.0);
    let aprobe = rand_t(&mut rng, r, 1, 1.0);
    let params = ParamStore::new();
    let report = finite_difference_wrt::<_, Error>(
        &params,
        &[sigma, color],
        |g, x| {
            let (rgb, alpha) = composite_graph(g, x[0], x[1], &deltas, [0.2, 0.4, 0.6])?;
            let a = probe_sum(g, rgb, &probe)?;
            let b = probe_sum(g, alpha, &aprobe)?;
            Ok(g.add(a, b)?)
        },
        STEP,
    )?;
    Ok(CheckResult {
        name: "renderer".into(),
        report,
    })
}

/// Full pipeline on a 2×2 pixel batch: pose encoder, kinematics, window,
/// modulated backbone, compositing and the total loss, differentiated with
/// respect to every parameter tensor (at most `per_param` coordinates
/// each).
pub fn check_pipeline(cfg: &ModelConfig, seed: u64, samples: usize, per_param: usize) -> Result<CheckResult> {
    let topo = chain_topology();
    let (model, mut params) = AvatarField::init(cfg, &topo, seed)?;
    // shrink the boxes so the 2×2 batch mixes culled and evaluated samples
    let ls = model.scales_param();
    for v in params.get_mut(ls).data_mut() {
        *v = 0.9f64.ln();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let pose = Pose::from_tensor(&random_pose(&mut rng, 3));
    let cam = Camera::look_at(
        nalgebra::Vector3::new(0.3, 0.5, 2.5),
        nalgebra::Vector3::new(0.05, 0.45, 0.0),
        nalgebra::Vector3::y(),
        2,
        2,
        1.2,
        1.2,
        3.8,
    )?;
    let rays = generate_rays(&cam, &cam.all_pixels())?;
    let batch = sample_batch(&rays, samples, true, &mut rng)?;
    let target = rand_t(&mut rng, 4, 3, 1.0).map(|v| 0.5 + 0.5 * v);
    let report = finite_difference_check::<_, Error>(
        &params,
        |g| {
            let ctx = model.prepare(g, &pose)?;
            let out = model.query(g, &ctx, &batch.points, &batch.dirs)?;
            let (rgb, _) = composite_graph(g, out.sigma, out.color, &batch.deltas, [0.1, 0.1, 0.1])?;
            let gt = g.constant(target.clone());
            let rec = reconstruction_loss(g, rgb, gt)?;
            let ls = scale_loss(g, ctx.scales)?;
            total_loss(g, rec, ls, 0.001)
        },
        STEP,
        Some(per_param),
    )?;
    Ok(CheckResult {
        name: "pipeline".into(),
        report,
    })
}

/// Runs the checks of one module (or all of them).
pub fn run_suite(module: Option<&str>, seed: u64) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!("unknown module {m:?}; expected one of {MODULES:?}")));
        }
    }
    let want = |m: &str| module.is_none_or(|x| x == m);
    let mut out = Vec::new();
    if want("tensor") {
        for (k, name) in op_names().into_iter().enumerate() {
            out.push(check_op(name, 100, seed.wrapping_add(k as u64))?);
        }
    }
    if want("skeleton") {
        out.push(check_skeleton(seed)?);
    }
    if want("pose_encoder") {
        out.extend(check_pose_encoder(seed)?);
    }
    if want("window") {
        out.extend(check_window(seed)?);
    }
    if want("backbone") {
        out.extend(check_backbone(seed)?);
    }
    if want("renderer") {
        out.push(check_renderer(seed)?);
    }
    if want("pipeline") {
        out.push(check_pipeline(&ModelConfig::default(), seed, 8, 12)?);
    }
    Ok(out)
}
