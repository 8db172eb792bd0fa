//! Procedural articulated scenes: capsule bodies with stripe textures whose
//! spatial frequency grows with joint bend, and the analytic field that
//! renders them.

mod dataset;

pub use dataset::{generate_dataset, Dataset, Frame, GenerateConfig, Manifest, ManifestFrame, Split};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::RadianceField;
use crate::skeleton::{
    forward_kinematics, rotation_angle, BoneSpec, BoneTransforms, Pose, SkeletonFile, SkeletonTopology,
};
use crate::tensor::Tensor;

/// Capsule attached to a bone: a segment from the bone origin along `axis`
/// (bone-local, unit) of the given length, swept by `radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSpec {
    pub axis: [f64; 3],
    pub length: f64,
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Smooth-edged disc painted on a capsule surface, centered at a bone-local
/// point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decal {
    pub bone: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Stripe cycles per scene unit along a straight segment.
    pub base_frequency: f64,
    /// Added cycles per unit per radian of joint bend.
    pub wrinkle_gain: f64,
    /// Stripe modulation depth: albedo · (1 − depth/2 + depth/2 · sin).
    pub contrast: f64,
    pub decals: Vec<Decal>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub skeleton: SkeletonFile,
    pub capsules: Vec<CapsuleSpec>,
    pub texture: TextureSpec,
    pub sigma_max: f64,
    /// Occupancy falloff length.
    pub epsilon: f64,
    /// Softness of the color blend between overlapping capsules.
    pub blend: f64,
    /// Sphere containing the body in every sampled pose.
    pub bound_center: [f64; 3],
    pub bound_radius: f64,
}

fn bone(name: &str, parent: Option<&str>, offset: [f64; 3]) -> BoneSpec {
    BoneSpec {
        name: name.into(),
        parent: parent.map(Into::into),
        offset,
    }
}

fn capsule(length: f64, radius: f64, albedo: [f64; 3]) -> CapsuleSpec {
    CapsuleSpec {
        axis: [0.0, -1.0, 0.0],
        length,
        radius,
        albedo,
    }
}

impl SceneSpec {
    /// Five-bone body: torso with one arm (upper arm, forearm) and one leg
    /// (thigh, shin).
    pub fn default_body() -> Self {
        Self {
            skeleton: SkeletonFile {
                bones: vec![
                    bone("torso", None, [0.0, 0.0, 0.0]),
                    bone("upper_arm", Some("torso"), [0.38, 0.8, 0.0]),
                    bone("forearm", Some("upper_arm"), [0.0, -0.55, 0.0]),
                    bone("thigh", Some("torso"), [0.1, -0.05, 0.0]),
                    bone("shin", Some("thigh"), [0.0, -0.7, 0.0]),
                ],
            },
            capsules: vec![
                CapsuleSpec {
                    axis: [0.0, 1.0, 0.0],
                    ..capsule(0.9, 0.3, [0.85, 0.75, 0.55])
                },
                capsule(0.55, 0.15, [0.9, 0.35, 0.3]),
                capsule(0.5, 0.14, [0.95, 0.6, 0.25]),
                capsule(0.7, 0.17, [0.3, 0.45, 0.9]),
                capsule(0.65, 0.15, [0.35, 0.8, 0.45]),
            ],
            texture: TextureSpec {
                base_frequency: 0.8,
                wrinkle_gain: 1.2,
                contrast: 0.8,
                decals: vec![
                    Decal {
                        bone: 0,
                        center: [0.0, 0.6, 0.3],
                        radius: 0.09,
                        color: [0.1, 0.1, 0.1],
                    },
                    Decal {
                        bone: 0,
                        center: [0.0, 0.6, -0.3],
                        radius: 0.12,
                        color: [0.95, 0.95, 0.95],
                    },
                ],
            },
            sigma_max: 100.0,
            epsilon: 0.01,
            blend: 0.02,
            bound_center: [0.2, 0.2, 0.0],
            bound_radius: 1.85,
        }
    }

    pub fn topology(&self) -> Result<SkeletonTopology> {
        Ok(SkeletonTopology::new(&self.skeleton.bones)?)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.skeleton.bones.len();
        if self.capsules.len() != n {
            return Err(Error::Config(format!("{} capsules for {n} bones", self.capsules.len())));
        }
        for (i, c) in self.capsules.iter().enumerate() {
            let norm = c.axis.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(c.radius > 0.0 && c.length >= 0.0) || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("capsule {i}: need radius > 0, length ≥ 0, unit axis")));
            }
        }
        if let Some(d) = self.texture.decals.iter().find(|d| d.bone >= n) {
            return Err(Error::Config(format!("decal on missing bone {}", d.bone)));
        }
        if !(self.sigma_max > 0.0 && self.epsilon > 0.0 && self.blend > 0.0 && self.bound_radius > 0.0) {
            return Err(Error::Config("scene constants must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth occupancy in `[0, 1]` from a signed distance: 0.5 at the surface,
/// saturating within a few `eps` on either side.
pub fn occupancy(d: f64, eps: f64) -> f64 {
    let z = d / eps;
    if z <= 0.0 {
        1.0 - 0.5 * z.exp()
    } else {
        0.5 * (-z - 2.0 * z * z).exp()
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Per-bone joint bend, the geodesic angle between a bone's rotation and
/// its parent's. The root has no joint and reports 0.
pub fn bend_angles(topo: &SkeletonTopology, tf: &BoneTransforms) -> Vec<f64> {
    (0..topo.bone_count())
        .map(|i| match topo.parent(i) {
            Some(_) => rotation_angle(&tf.local_rotation[i]),
            None => 0.0,
        })
        .collect()
}

/// The ground-truth field of a scene in one pose.
pub struct OracleField<'a> {
    scene: &'a SceneSpec,
    tf: BoneTransforms,
    /// Bend at the proximal and distal end of each capsule.
    bends: Vec<(f64, f64)>,
}

impl<'a> OracleField<'a> {
    pub fn new(scene: &'a SceneSpec, pose: &Pose) -> Result<Self> {
        scene.validate()?;
        let topo = scene.topology()?;
        let tf = forward_kinematics(&topo, pose)?;
        let bend = bend_angles(&topo, &tf);
        let bends = (0..topo.bone_count())
            .map(|i| {
                let children: Vec<usize> = (0..topo.bone_count()).filter(|&j| topo.parent(j) == Some(i)).collect();
                let distal = if topo.parent(i).is_none() {
                    0.0
                } else if children.is_empty() {
                    bend[i]
                } else {
                    children.iter().map(|&j| bend[j]).fold(0.0, f64::max)
                };
                (bend[i], distal)
            })
            .collect();
        Ok(Self { scene, tf, bends })
    }

    /// Stripe frequency on capsule `i` at axial coordinate `u`.
    pub fn local_frequency(&self, i: usize, u: f64) -> f64 {
        let c = &self.scene.capsules[i];
        let s = if c.length > 0.0 { smoothstep(u / c.length) } else { 0.0 };
        let (p, d) = self.bends[i];
        self.scene.texture.base_frequency + self.scene.texture.wrinkle_gain * ((1.0 - s) * p + s * d)
    }

    /// Signed distance to capsule `i` and the axial coordinate of the
    /// closest segment point.
    fn capsule_distance(&self, i: usize, x: &Vector3<f64>) -> (f64, f64, Vector3<f64>) {
        let c = &self.scene.capsules[i];
        let p = self.tf.to_bone(i, x);
        let axis = Vector3::from(c.axis);
        let u = p.dot(&axis).clamp(0.0, c.length);
        ((p - u * axis).norm() - c.radius, u, p)
    }

    fn surface_color(&self, i: usize, u: f64, local: &Vector3<f64>) -> [f64; 3] {
        let c = &self.scene.capsules[i];
        let tex = &self.scene.texture;
        let f = self.local_frequency(i, u);
        let stripe = 1.0 - 0.5 * tex.contrast + 0.5 * tex.contrast * (2.0 * std::f64::consts::PI * f * u).sin();
        let mut rgb = c.albedo.map(|a| a * stripe);
        for d in tex.decals.iter().filter(|d| d.bone == i) {
            let dist = (local - Vector3::from(d.center)).norm();
            let w = 1.0 - smoothstep((dist - d.radius) / (0.3 * d.radius) + 0.5);
            for k in 0..3 {
                rgb[k] += w * (d.color[k] - rgb[k]);
            }
        }
        rgb
    }

    /// Density and color at one world point.
    pub fn eval(&self, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        let n = self.scene.capsules.len();
        let hits: Vec<(f64, f64, Vector3<f64>)> = (0..n).map(|i| self.capsule_distance(i, x)).collect();
        let dmin = hits.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
        let sigma = self.scene.sigma_max * occupancy(dmin, self.scene.epsilon);
        let mut rgb = [0.0; 3];
        let mut total = 0.0;
        for (i, (d, u, p)) in hits.iter().enumerate() {
            let w = (-(d - dmin) / self.scene.blend).exp();
            let c = self.surface_color(i, *u, p);
            for k in 0..3 {
                rgb[k] += w * c[k];
            }
            total += w;
        }
        (sigma, rgb.map(|v| v / total))
    }
}

impl RadianceField for OracleField<'_> {
    fn radiance(&self, points: &Tensor, _dirs: &Tensor) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        Ok((0..points.rows())
            .map(|r| {
                let p = points.row_slice(r);
                self.eval(&Vector3::new(p[0], p[1], p[2]))
            })
            .unzip())
    }
}

/// Joint angles of the default body, in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyAngles {
    pub torso_yaw: f64,
    pub shoulder: f64,
    pub elbow: f64,
    pub hip: f64,
    pub knee: f64,
}

impl BodyAngles {
    pub const STRAIGHT: Self = Self {
        torso_yaw: 0.0,
        shoulder: 0.0,
        elbow: 0.0,
        hip: 0.0,
        knee: 0.0,
    };

    /// Elbow and knee at 90°, shoulder and hip lightly raised.
    pub fn bent() -> Self {
        Self {
            torso_yaw: 0.0,
            shoulder: 30f64.to_radians(),
            elbow: 90f64.to_radians(),
            hip: 30f64.to_radians(),
            knee: 90f64.to_radians(),
        }
    }

    /// Uniform draw from the sampler ranges: yaw ±30°, shoulder 0–100°,
    /// elbow 0–100°, hip −30–60°, knee 0–100°.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let deg = |lo: f64, hi: f64, rng: &mut dyn rand::RngCore| rng.gen_range(lo..=hi).to_radians();
        Self {
            torso_yaw: deg(-30.0, 30.0, rng),
            shoulder: deg(0.0, 100.0, rng),
            elbow: deg(0.0, 100.0, rng),
            hip: deg(-30.0, 60.0, rng),
            knee: deg(0.0, 100.0, rng),
        }
    }

    /// Shoulder and elbow rotate about `z` (in the frontal plane), the hip
    /// swings forward about `x` and the knee folds backward.
    pub fn to_pose(&self) -> Pose {
        let rx = |a: f64| *Rotation3::from_axis_angle(&Vector3::x_axis(), a).matrix();
        let ry = |a: f64| *Rotation3::from_axis_angle(&Vector3::y_axis(), a).matrix();
        let rz = |a: f64| *Rotation3::from_axis_angle(&Vector3::z_axis(), a).matrix();
        let rots: [Matrix3<f64>; 5] = [
            ry(self.torso_yaw),
            rz(self.shoulder),
            rz(self.elbow),
            rx(-self.hip),
            rx(self.knee),
        ];
        Pose::from_rotations(&rots)
    }
}
