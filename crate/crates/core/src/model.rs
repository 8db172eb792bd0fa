//! The full pose-conditioned radiance field: pose encoder, kinematics,
//! two-stage window, modulated backbone and radiance head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, RadianceHead};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamBuilder};
use crate::pose_encoder::{PoseEncoder, PoseEncoderConfig};
use crate::skeleton::{
    forward_kinematics_graph, to_relative_graph, GraphTransforms, Pose, PartScales, SkeletonFile,
    SkeletonTopology,
};
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::window::{validity_masks, Window, WindowConfig, WindowMode};

/// Model variants used for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    /// Pose features condition an unmodulated network (no θ).
    OnlyGnn,
    /// Plain sine backbone, `θ ≡ 1`.
    OnlySyn,
    OnlySpatialWindow,
    OnlyFeatureWindow,
    NoWindow,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::OnlyGnn,
        AblationMode::OnlySyn,
        AblationMode::OnlySpatialWindow,
        AblationMode::OnlyFeatureWindow,
        AblationMode::NoWindow,
    ];

    pub fn window_mode(self) -> WindowMode {
        match self {
            AblationMode::OnlySpatialWindow => WindowMode::OnlySpatial,
            AblationMode::OnlyFeatureWindow => WindowMode::OnlyFeature,
            AblationMode::NoWindow => WindowMode::NoWindow,
            _ => WindowMode::Full,
        }
    }

    pub fn modulates(self) -> bool {
        !matches!(self, AblationMode::OnlyGnn | AblationMode::OnlySyn)
    }

    pub fn conditions_on_features(self) -> bool {
        self == AblationMode::OnlyGnn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::OnlyGnn => "only-gnn",
            AblationMode::OnlySyn => "only-syn",
            AblationMode::OnlySpatialWindow => "only-spatial-window",
            AblationMode::OnlyFeatureWindow => "only-feature-window",
            AblationMode::NoWindow => "no-window",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: PoseEncoderConfig,
    pub window: WindowConfig,
    pub backbone: BackboneConfig,
    pub ablation: AblationMode,
    /// Skip network evaluation for points outside every part box.
    pub cull: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: PoseEncoderConfig::default(),
            window: WindowConfig::default(),
            backbone: BackboneConfig::default(),
            ablation: AblationMode::Full,
            cull: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    skeleton: SkeletonFile,
}

/// Per-pose quantities shared by every query point in a batch.
pub struct PoseContext {
    pub pose: Var,
    pub features: Var,
    pub transforms: GraphTransforms,
    pub scales: Var,
}

/// Field values for a batch of points.
pub struct FieldOutput {
    /// `[P, 1]`
    pub sigma: Var,
    /// `[P, 3]`
    pub color: Var,
    /// Number of points the network was evaluated on.
    pub evaluated: usize,
}

#[derive(Clone, Debug)]
pub struct AvatarField {
    cfg: ModelConfig,
    topo: SkeletonTopology,
    encoder: PoseEncoder,
    window: Window,
    backbone: Backbone,
    head: RadianceHead,
    log_scales: ParamId,
}

impl AvatarField {
    fn build(cfg: &ModelConfig, topo: &SkeletonTopology, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.window.mode = cfg.ablation.window_mode();
        let n = topo.bone_count();
        let encoder = PoseEncoder::build(&cfg.encoder, topo, pb)?;
        let window = Window::build(
            &cfg.window,
            n,
            cfg.encoder.feature_dim,
            cfg.backbone.layers,
            cfg.backbone.hidden,
            pb,
        )?;
        let condition = cfg
            .ablation
            .conditions_on_features()
            .then_some(cfg.encoder.feature_dim);
        let backbone = Backbone::build(&cfg.backbone, 3 * n, condition, pb)?;
        let head = RadianceHead::build(&cfg.backbone, backbone.output_dim(), pb)?;
        let log_scales = pb.get(
            "skeleton/log_scales",
            n,
            3,
            Init::Const(PartScales::INIT.ln()),
            true,
        )?;
        Ok(Self {
            cfg,
            topo: topo.clone(),
            encoder,
            window,
            backbone,
            head,
            log_scales,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(cfg: &ModelConfig, topo: &SkeletonTopology, seed: u64) -> Result<(Self, ParamStore)> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(cfg, topo, &mut ParamBuilder::init(&mut params, &mut rng))?;
        Ok((model, params))
    }

    /// Binds to existing parameters by name, checking shapes.
    pub fn bind(cfg: &ModelConfig, topo: &SkeletonTopology, params: &mut ParamStore) -> Result<Self> {
        Self::build(cfg, topo, &mut ParamBuilder::bind(params))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore)> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        let topo = SkeletonTopology::new(&meta.skeleton.bones)?;
        let mut params = ckpt.params.clone();
        let model = Self::bind(&meta.model, &topo, &mut params)?;
        Ok((model, params))
    }

    pub fn to_checkpoint(&self, params: &ParamStore) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            model: self.cfg.clone(),
            skeleton: self.topo.to_file_doc(),
        };
        Ok(Checkpoint::new(serde_json::to_string(&meta)?, params.clone()))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topo
    }

    pub fn mode(&self) -> AblationMode {
        self.cfg.ablation
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn scales_param(&self) -> ParamId {
        self.log_scales
    }

    pub fn part_scales(&self, params: &ParamStore) -> PartScales {
        PartScales::from_log_tensor(params.get(self.log_scales))
    }

    /// Toggles culling without touching parameters.
    pub fn with_culling(&self, cull: bool) -> Self {
        let mut m = self.clone();
        m.cfg.cull = cull;
        m
    }

    /// Rewires trained parameters under another ablation mode. Fails when
    /// the mode needs parameters the checkpoint lacks.
    pub fn with_mode(&self, mode: AblationMode, params: &mut ParamStore) -> Result<Self> {
        let cfg = ModelConfig {
            ablation: mode,
            ..self.cfg.clone()
        };
        Self::bind(&cfg, &self.topo, params)
    }

    /// Encodes `pose` (a `[N_B, 6]` node) and runs forward kinematics.
    pub fn prepare_var(&self, g: &mut Graph, pose: Var) -> Result<PoseContext> {
        let features = self.encoder.forward(g, pose)?;
        let transforms = forward_kinematics_graph(g, &self.topo, pose)?;
        let ls = g.param(self.log_scales);
        let scales = g.exp(ls)?;
        Ok(PoseContext {
            pose,
            features,
            transforms,
            scales,
        })
    }

    pub fn prepare(&self, g: &mut Graph, pose: &Pose) -> Result<PoseContext> {
        let p = g.constant(pose.to_tensor());
        self.prepare_var(g, p)
    }

    /// Density and color at `points` (`[P, 3]`) seen along unit `dirs`.
    /// Points outside every part box get `σ = 0`, `c = 0`.
    pub fn query(
        &self,
        g: &mut Graph,
        ctx: &PoseContext,
        points: &Tensor,
        dirs: &Tensor,
    ) -> Result<FieldOutput> {
        let p = points.rows();
        if dirs.rows() != p {
            return Err(Error::SizeMismatch(format!("{p} points but {} directions", dirs.rows())));
        }
        let x = g.constant(points.clone());
        let xbar_all = to_relative_graph(g, x, &ctx.transforms, ctx.scales)?;
        let masks = validity_masks(g, &xbar_all);
        let any: Vec<bool> = (0..p)
            .map(|r| masks.iter().any(|m| m.data()[r] > 0.0))
            .collect();

        if self.cfg.cull {
            let idx: Vec<usize> = (0..p).filter(|&r| any[r]).collect();
            if idx.is_empty() {
                let sigma = g.constant(Tensor::zeros(p, 1));
                let color = g.constant(Tensor::zeros(p, 3));
                return Ok(FieldOutput {
                    sigma,
                    color,
                    evaluated: 0,
                });
            }
            let xbar = xbar_all
                .iter()
                .map(|&xb| g.gather_rows(xb, &idx))
                .collect::<Result<Vec<_>, _>>()?;
            let sub_masks: Vec<Var> = masks
                .iter()
                .map(|m| {
                    let data = idx.iter().map(|&r| m.data()[r]).collect();
                    g.constant(Tensor::matrix(idx.len(), 1, data))
                })
                .collect();
            let sub_dirs = Tensor::from_rows(&idx.iter().map(|&r| dirs.row_slice(r).to_vec()).collect::<Vec<_>>());
            let (sigma, color) = self.evaluate(g, ctx, &xbar, &sub_masks, &sub_dirs)?;
            let sigma = g.scatter_rows(sigma, &idx, p)?;
            let color = g.scatter_rows(color, &idx, p)?;
            Ok(FieldOutput {
                sigma,
                color,
                evaluated: idx.len(),
            })
        } else {
            let valid: Vec<Var> = masks.into_iter().map(|m| g.constant(m)).collect();
            let (sigma, color) = self.evaluate(g, ctx, &xbar_all, &valid, dirs)?;
            let keep = g.constant(Tensor::matrix(
                p,
                1,
                any.iter().map(|&a| a as u8 as f64).collect(),
            ));
            let sigma = g.mul(sigma, keep)?;
            let color = g.mul(color, keep)?;
            Ok(FieldOutput {
                sigma,
                color,
                evaluated: p,
            })
        }
    }

    /// Network evaluation on points that are all kept.
    fn evaluate(
        &self,
        g: &mut Graph,
        ctx: &PoseContext,
        xbar: &[Var],
        valid: &[Var],
        dirs: &Tensor,
    ) -> Result<(Var, Var)> {
        let mode = self.cfg.ablation;
        let win = self.window.forward(g, xbar, valid, ctx.features, mode.modulates())?;
        let condition = mode.conditions_on_features().then_some(win.fm);
        let s = self
            .backbone
            .modulated_forward(g, win.xtilde, win.theta.as_deref(), condition)?;
        self.head.forward(g, s, dirs)
    }

    /// Concatenated backbone features `S` at world points, `[P, n·h]`.
    pub fn features(&self, g: &mut Graph, ctx: &PoseContext, points: &Tensor) -> Result<Var> {
        let x = g.constant(points.clone());
        let xbar = to_relative_graph(g, x, &ctx.transforms, ctx.scales)?;
        let masks: Vec<Var> = validity_masks(g, &xbar)
            .into_iter()
            .map(|m| g.constant(m))
            .collect();
        let mode = self.cfg.ablation;
        let win = self.window.forward(g, &xbar, &masks, ctx.features, mode.modulates())?;
        let condition = mode.conditions_on_features().then_some(win.fm);
        self.backbone
            .modulated_forward(g, win.xtilde, win.theta.as_deref(), condition)
    }

    /// Frequency coefficients θ at world points for a pose (`None` for the
    /// unmodulated variants).
    pub fn frequency_coefficients(
        &self,
        g: &mut Graph,
        ctx: &PoseContext,
        points: &Tensor,
    ) -> Result<Option<Vec<Var>>> {
        let x = g.constant(points.clone());
        let xbar = to_relative_graph(g, x, &ctx.transforms, ctx.scales)?;
        let masks: Vec<Var> = validity_masks(g, &xbar)
            .into_iter()
            .map(|m| g.constant(m))
            .collect();
        let win = self
            .window
            .forward(g, &xbar, &masks, ctx.features, self.cfg.ablation.modulates())?;
        Ok(win.theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::BoneSpec;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::new(&[
            BoneSpec {
                name: "root".into(),
                parent: None,
                offset: [0.0; 3],
            },
            BoneSpec {
                name: "child".into(),
                parent: Some("root".into()),
                offset: [0.0, 0.5, 0.0],
            },
        ])
        .unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: PoseEncoderConfig {
                conv_width: 4,
                mlp_width: 4,
                feature_dim: 4,
            },
            window: WindowConfig {
                sine_features: 4,
                point_feature_dim: 4,
                feature_window_width: 4,
                frequency_hidden: 4,
                ..WindowConfig::default()
            },
            backbone: BackboneConfig {
                layers: 2,
                hidden: 5,
                color_hidden: 4,
                dir_frequencies: 1,
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ablation_mode_strings_roundtrip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }

    #[test]
    fn checkpoint_rebinds_model() {
        let (model, params) = AvatarField::init(&tiny(), &topo(), 3).unwrap();
        let ck = model.to_checkpoint(&params).unwrap();
        let (back, bparams) = AvatarField::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(bparams, params);
    }

    #[test]
    fn far_points_are_culled() {
        let (model, params) = AvatarField::init(&tiny(), &topo(), 4).unwrap();
        let mut g = Graph::new(&params);
        let ctx = model.prepare(&mut g, &Pose::identity(2)).unwrap();
        let pts = Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.1, 0.0]);
        let dirs = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let out = model.query(&mut g, &ctx, &pts, &dirs).unwrap();
        assert_eq!(out.evaluated, 1);
        assert_eq!(g.value(out.sigma).data()[0], 0.0);
        assert_eq!(g.value(out.color).row_slice(0), &[0.0, 0.0, 0.0]);
        assert!(g.value(out.sigma).data()[1] > 0.0);
    }

    #[test]
    fn only_gnn_has_no_theta() {
        let mut cfg = tiny();
        cfg.ablation = AblationMode::OnlyGnn;
        let (model, params) = AvatarField::init(&cfg, &topo(), 5).unwrap();
        assert!(params.id("backbone/condition_w").is_ok());
        let mut g = Graph::new(&params);
        let ctx = model.prepare(&mut g, &Pose::identity(2)).unwrap();
        let theta = model
            .frequency_coefficients(&mut g, &ctx, &Tensor::row(&[0.0, 0.1, 0.0]))
            .unwrap();
        assert!(theta.is_none());
    }
}
