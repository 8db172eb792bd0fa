//! Rendering the oracle into a dataset directory and loading it back.
//!
//! Layout:
//!
//! ```text
//! scene.json      SceneSpec
//! skeleton.json   bone list
//! cameras.json    list of cameras (intrinsics + world-from-camera)
//! poses.json      bone names and one N_B × 6 array per pose
//! manifest.json   image size, background, frames with split / camera / pose
//! images/NNNN.png 8-bit RGB
//! images/NNNN.bin f32 RGB dump (exact values used for training and metrics)
//! masks/NNNN.png  alpha > 0.5
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodyAngles, OracleField, SceneSpec};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::renderer::{parallel_map, render_image, resolve_workers, Camera, RenderConfig};
use crate::skeleton::{Pose, PosesFile, SkeletonTopology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    NovelView,
    NovelPose,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::NovelView => "novel_view",
            Split::NovelPose => "novel_pose",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "novel_view" => Ok(Split::NovelView),
            "novel_pose" => Ok(Split::NovelPose),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub train_poses: usize,
    /// Training cameras are evenly spaced on a ring; held-out cameras sit
    /// halfway between them.
    pub ring_cameras: usize,
    pub views_per_pose: usize,
    pub novel_view_frames: usize,
    pub novel_pose_frames: usize,
    pub camera_distance: f64,
    pub elevation_deg: f64,
    pub focal: f64,
    /// Samples per ray for the ground-truth renders.
    pub gt_samples: usize,
    pub background: [f64; 3],
    pub workers: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            train_poses: 10,
            ring_cameras: 6,
            views_per_pose: 3,
            novel_view_frames: 8,
            novel_pose_frames: 8,
            camera_distance: 4.5,
            elevation_deg: 10.0,
            focal: 72.0,
            gt_samples: 256,
            background: [0.0; 3],
            workers: None,
        }
    }
}

impl GenerateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.width,
            self.height,
            self.train_poses,
            self.ring_cameras,
            self.views_per_pose,
            self.novel_view_frames,
            self.novel_pose_frames,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("image size, split counts and camera counts must be ≥ 1".into()));
        }
        if self.gt_samples < 2 {
            return Err(Error::Config("gt_samples must be ≥ 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub id: usize,
    pub split: Split,
    pub camera: usize,
    pub pose: usize,
    pub image: String,
    pub raw: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub gt_samples: usize,
    pub seed: u64,
    pub frames: Vec<ManifestFrame>,
    pub splits: BTreeMap<Split, Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: usize,
    pub split: Split,
    pub image: Image,
    pub mask: Mask,
    pub camera: Camera,
    pub pose: Pose,
    pub pose_index: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub scene: SceneSpec,
    pub topology: SkeletonTopology,
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let read = |name: &str| -> Result<String> {
            fs::read_to_string(root.join(name)).map_err(|e| Error::Dataset(format!("{name}: {e}")))
        };
        let scene: SceneSpec = serde_json::from_str(&read("scene.json")?)?;
        scene.validate()?;
        let topology = scene.topology()?;
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)?;
        let cameras: Vec<Camera> = serde_json::from_str(&read("cameras.json")?)?;
        let poses: PosesFile = serde_json::from_str(&read("poses.json")?)?;
        let poses = poses.poses();
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for f in &manifest.frames {
            let camera = cameras
                .get(f.camera)
                .ok_or_else(|| Error::Dataset(format!("frame {} references camera {}", f.id, f.camera)))?
                .clone();
            let pose = poses
                .get(f.pose)
                .ok_or_else(|| Error::Dataset(format!("frame {} references pose {}", f.id, f.pose)))?
                .clone();
            if pose.bone_count() != topology.bone_count() {
                return Err(Error::Dataset(format!("pose {} has the wrong bone count", f.pose)));
            }
            let image = Image::read_raw(root.join(&f.raw))?;
            let mask = Mask::read_png(root.join(&f.mask))?;
            if image.width() != manifest.width || image.height() != manifest.height || mask.width != manifest.width {
                return Err(Error::Dataset(format!("frame {} has the wrong size", f.id)));
            }
            frames.push(Frame {
                id: f.id,
                split: f.split,
                image,
                mask,
                camera,
                pose,
                pose_index: f.pose,
            });
        }
        Ok(Self {
            root,
            scene,
            topology,
            manifest,
            frames,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Frame> {
        self.frames.iter().filter(|f| f.split == split).collect()
    }

    pub fn background(&self) -> [f64; 3] {
        self.manifest.background
    }
}

fn ring_camera(scene: &SceneSpec, cfg: &GenerateConfig, azimuth_deg: f64) -> Result<Camera> {
    let c = Vector3::from(scene.bound_center);
    let (az, el) = (azimuth_deg.to_radians(), cfg.elevation_deg.to_radians());
    let eye = c + cfg.camera_distance * Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
    let near = (cfg.camera_distance - scene.bound_radius).max(1e-3);
    Camera::look_at(
        eye,
        c,
        Vector3::y(),
        cfg.width,
        cfg.height,
        cfg.focal,
        near,
        cfg.camera_distance + scene.bound_radius,
    )
}

/// Renders every split with the oracle and writes the dataset to `out`.
/// Output bytes depend only on `scene` and `cfg`.
pub fn generate_dataset(scene: &SceneSpec, cfg: &GenerateConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    scene.validate()?;
    cfg.validate()?;
    let topo = scene.topology()?;
    let out = out.as_ref();
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;

    let n = cfg.ring_cameras;
    let step = 360.0 / n as f64;
    let mut cameras = Vec::with_capacity(2 * n);
    for k in 0..n {
        cameras.push(ring_camera(scene, cfg, k as f64 * step)?);
    }
    for k in 0..n {
        cameras.push(ring_camera(scene, cfg, (k as f64 + 0.5) * step)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut poses: Vec<Pose> = (0..cfg.train_poses)
        .map(|_| BodyAngles::sample(&mut rng).to_pose())
        .collect();
    let mut novel = vec![BodyAngles::STRAIGHT.to_pose(), BodyAngles::bent().to_pose()];
    while novel.len() < cfg.novel_pose_frames {
        novel.push(BodyAngles::sample(&mut rng).to_pose());
    }
    novel.truncate(cfg.novel_pose_frames);
    if novel.iter().any(|p| poses.contains(p)) {
        return Err(Error::Dataset("a novel pose coincides with a training pose".into()));
    }
    let first_novel = poses.len();
    poses.extend(novel);

    // (split, camera, pose)
    let mut plan: Vec<(Split, usize, usize)> = Vec::new();
    for p in 0..cfg.train_poses {
        for v in 0..cfg.views_per_pose {
            let cam = (p + v * n / cfg.views_per_pose) % n;
            plan.push((Split::Train, cam, p));
        }
    }
    for j in 0..cfg.novel_view_frames {
        plan.push((Split::NovelView, n + j % n, j % cfg.train_poses));
    }
    for j in 0..cfg.novel_pose_frames {
        plan.push((Split::NovelPose, j % n, first_novel + j));
    }

    let render_cfg = RenderConfig {
        samples: cfg.gt_samples,
        background: cfg.background,
        workers: Some(1),
        ..RenderConfig::default()
    };
    let rendered = parallel_map(resolve_workers(cfg.workers), &plan, |_, &(_, cam, pose)| {
        let field = OracleField::new(scene, &poses[pose])?;
        render_image(&field, &cameras[cam], &render_cfg)
    })?;

    let mut frames = Vec::with_capacity(plan.len());
    let mut splits: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for (id, ((split, cam, pose), (image, alpha))) in plan.iter().zip(rendered).enumerate() {
        let mask = Mask::from_alpha(cfg.width, cfg.height, &alpha);
        let entry = ManifestFrame {
            id,
            split: *split,
            camera: *cam,
            pose: *pose,
            image: format!("images/{id:04}.png"),
            raw: format!("images/{id:04}.bin"),
            mask: format!("masks/{id:04}.png"),
        };
        image.write_png(out.join(&entry.image))?;
        image.write_raw(out.join(&entry.raw))?;
        mask.write_png(out.join(&entry.mask))?;
        splits.entry(*split).or_default().push(id);
        frames.push(entry);
    }

    let manifest = Manifest {
        width: cfg.width,
        height: cfg.height,
        background: cfg.background,
        gt_samples: cfg.gt_samples,
        seed: cfg.seed,
        frames,
        splits,
    };
    let poses_file = PosesFile {
        bone_names: (0..topo.bone_count()).map(|i| topo.name(i).to_string()).collect(),
        frames: poses.iter().map(|p| p.omega.clone()).collect(),
    };
    write_json(out.join("scene.json"), scene)?;
    write_json(out.join("skeleton.json"), &scene.skeleton)?;
    write_json(out.join("cameras.json"), &cameras)?;
    write_json(out.join("poses.json"), &poses_file)?;
    write_json(out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerateConfig {
        GenerateConfig {
            width: 16,
            height: 16,
            focal: 18.0,
            train_poses: 2,
            views_per_pose: 2,
            novel_view_frames: 1,
            novel_pose_frames: 2,
            gt_samples: 32,
            workers: Some(1),
            ..GenerateConfig::default()
        }
    }

    fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        for sub in ["", "images", "masks"] {
            for e in fs::read_dir(root.join(sub)).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn generation_is_deterministic_and_loads() {
        let scene = SceneSpec::default_body();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&scene, &small(), a.path()).unwrap();
        generate_dataset(&scene, &small(), b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 4);
        assert_eq!(ds.split(Split::NovelView).len(), 1);
        assert_eq!(ds.split(Split::NovelPose).len(), 2);
        for f in &ds.frames {
            assert!(f.mask.count() > 0, "frame {} has an empty mask", f.id);
        }
        let train: Vec<&Pose> = ds.split(Split::Train).iter().map(|f| &f.pose).collect();
        for f in ds.split(Split::NovelPose) {
            assert!(!train.contains(&&f.pose));
        }
        for f in ds.split(Split::NovelView) {
            assert!(train.contains(&&f.pose));
        }
    }

    #[test]
    fn split_names_roundtrip() {
        for s in [Split::Train, Split::NovelView, Split::NovelPose] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
    }
}
