//! Pinhole cameras, ray generation, stratified sampling and alpha
//! compositing, in plain and differentiable forms.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::AvatarField;
use crate::skeleton::Pose;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Environment variable overriding the number of render/training workers.
pub const WORKERS_ENV: &str = "AVATAR_WORKERS";

/// OpenCV-convention pinhole camera: `x` right, `y` down, `z` forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_from_camera: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

/// On-disk camera: intrinsics matrix and 4×4 world-from-camera extrinsics.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraFile {
    width: usize,
    height: usize,
    intrinsics: [[f64; 3]; 3],
    world_from_camera: [[f64; 4]; 4],
    near: f64,
    far: f64,
}

impl TryFrom<CameraFile> for Camera {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        let k = f.intrinsics;
        let m = f.world_from_camera;
        let cam = Camera {
            width: f.width,
            height: f.height,
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
            world_from_camera: Matrix4::from_fn(|r, c| m[r][c]),
            near: f.near,
            far: f.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraFile {
    fn from(c: Camera) -> Self {
        let m = c.world_from_camera;
        CameraFile {
            width: c.width,
            height: c.height,
            intrinsics: [[c.fx, 0.0, c.cx], [0.0, c.fy, c.cy], [0.0, 0.0, 1.0]],
            world_from_camera: std::array::from_fn(|r| std::array::from_fn(|col| m[(r, col)])),
            near: c.near,
            far: c.far,
        }
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`, principal point at the image
    /// center.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::Config("camera up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_columns(&[right, down, forward]);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        let cam = Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_from_camera: m,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("non-positive focal length ({}, {})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty image size".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::Config("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_from_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.world_from_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn all_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|k| self.origin[k] + t * self.dir[k])
    }
}

/// Back-projects pixel centers `(x + 0.5, y + 0.5)`.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    let rot = camera.rotation();
    let origin: [f64; 3] = camera.center().into();
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= camera.width || y >= camera.height {
                return Err(Error::PixelOutOfBounds(x, y));
            }
            let d = Vector3::new(
                (x as f64 + 0.5 - camera.cx) / camera.fx,
                (y as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            );
            let w = (rot * d).normalize();
            Ok(Ray {
                origin,
                dir: w.into(),
                near: camera.near,
                far: camera.far,
            })
        })
        .collect()
}

/// Depths, spacings and world positions of the samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
}

/// One sample in each of `n` equal bins over `[near, far]`; the last
/// spacing is the bin width.
pub fn stratified_sample(ray: &Ray, n: usize, jitter: bool, rng: &mut impl Rng) -> Result<SampleSet> {
    if n < 2 {
        return Err(Error::Samples(format!("need at least 2 samples per ray, got {n}")));
    }
    let width = (ray.far - ray.near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            ray.near + (i as f64 + u) * width
        })
        .collect();
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(width);
    let positions = t.iter().map(|&ti| ray.at(ti)).collect();
    Ok(SampleSet {
        t,
        deltas,
        positions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub alpha: f64,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Front-to-back alpha compositing over a constant background.
pub fn composite(sigma: &[f64], deltas: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> Result<Composite> {
    if sigma.len() != deltas.len() || sigma.len() != colors.len() {
        return Err(Error::SizeMismatch(format!(
            "{} densities, {} spacings, {} colors",
            sigma.len(),
            deltas.len(),
            colors.len()
        )));
    }
    let mut weights = Vec::with_capacity(sigma.len());
    let mut transmittance = Vec::with_capacity(sigma.len());
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut acc = 0.0;
    for i in 0..sigma.len() {
        if !(sigma[i] >= 0.0) || !(deltas[i] > 0.0) {
            return Err(Error::Samples(format!(
                "sample {i}: density {} and spacing {} must be non-negative and positive",
                sigma[i], deltas[i]
            )));
        }
        let sd = sigma[i] * deltas[i];
        let alpha = 1.0 - (-sd).exp();
        let w = t * alpha;
        transmittance.push(t);
        weights.push(w);
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        acc += w;
        t *= (-sd).exp();
    }
    for k in 0..3 {
        color[k] += (1.0 - acc) * background[k];
    }
    Ok(Composite {
        color,
        alpha: acc,
        weights,
        transmittance,
    })
}

/// Differentiable compositing of `R` rays with `S` samples each.
/// `sigma` is `[R·S, 1]`, `color` `[R·S, 3]` (ray-major) and `deltas`
/// `[R, S]`. Returns `(color [R, 3], alpha [R, 1])`.
pub fn composite_graph(
    g: &mut Graph,
    sigma: Var,
    color: Var,
    deltas: &Tensor,
    background: [f64; 3],
) -> Result<(Var, Var)> {
    let (r, s) = (deltas.rows(), deltas.cols());
    let sig = g.reshape(sigma, r, s)?;
    let d = g.constant(deltas.clone());
    let sd = g.mul(sig, d)?;
    let neg = g.neg(sd)?;
    let keep = g.exp(neg)?;
    let alpha = g.neg(keep)?;
    let alpha = g.add_scalar(alpha, 1.0)?;
    let depth = g.cumsum_excl_cols(sd)?;
    let depth = g.neg(depth)?;
    let trans = g.exp(depth)?;
    let w = g.mul(trans, alpha)?;
    let acc = g.sum_cols(w)?;

    let wcol = g.reshape(w, r * s, 1)?;
    let weighted = g.mul(color, wcol)?;
    let weighted = g.reshape(weighted, r, 3 * s)?;
    let mut sel = Tensor::zeros(3 * s, 3);
    for i in 0..s {
        for k in 0..3 {
            sel.set(3 * i + k, k, 1.0);
        }
    }
    let sel = g.constant(sel);
    let rgb = g.matmul(weighted, sel)?;
    let rest = g.neg(acc)?;
    let rest = g.add_scalar(rest, 1.0)?;
    let bg = g.constant(Tensor::row(&background));
    let bg = g.matmul(rest, bg)?;
    let rgb = g.add(rgb, bg)?;
    Ok((rgb, acc))
}

/// Flattened samples for a set of rays, ready for a field query.
#[derive(Clone, Debug)]
pub struct RayBatch {
    /// `[R·S, 3]`, ray-major.
    pub points: Tensor,
    /// `[R·S, 3]` unit directions.
    pub dirs: Tensor,
    /// `[R, S]`.
    pub deltas: Tensor,
}

pub fn sample_batch(rays: &[Ray], n: usize, jitter: bool, rng: &mut impl Rng) -> Result<RayBatch> {
    let mut points = Vec::with_capacity(rays.len() * n * 3);
    let mut dirs = Vec::with_capacity(rays.len() * n * 3);
    let mut deltas = Vec::with_capacity(rays.len() * n);
    for ray in rays {
        let s = stratified_sample(ray, n, jitter, rng)?;
        for p in &s.positions {
            points.extend_from_slice(p);
            dirs.extend_from_slice(&ray.dir);
        }
        deltas.extend(s.deltas);
    }
    let m = rays.len() * n;
    Ok(RayBatch {
        points: Tensor::matrix(m, 3, points),
        dirs: Tensor::matrix(m, 3, dirs),
        deltas: Tensor::matrix(rays.len(), n, deltas),
    })
}

/// Anything that yields density and color at world points.
pub trait RadianceField: Sync {
    /// `points` and `dirs` are `[P, 3]`; returns `P` densities and colors.
    fn radiance(&self, points: &Tensor, dirs: &Tensor) -> Result<(Vec<f64>, Vec<[f64; 3]>)>;
}

/// A model bound to its parameters and a pose.
pub struct PosedModel<'a> {
    pub model: &'a AvatarField,
    pub params: &'a ParamStore,
    pub pose: &'a Pose,
}

impl RadianceField for PosedModel<'_> {
    fn radiance(&self, points: &Tensor, dirs: &Tensor) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        let mut g = Graph::new(self.params);
        let ctx = self.model.prepare(&mut g, self.pose)?;
        let out = self.model.query(&mut g, &ctx, points, dirs)?;
        let sigma = g.value(out.sigma).data().to_vec();
        let color = g
            .value(out.color)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok((sigma, color))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples: usize,
    pub jitter: bool,
    pub seed: u64,
    pub background: [f64; 3],
    /// Rays evaluated per field query.
    pub chunk_rays: usize,
    /// `None` uses [`WORKERS_ENV`] or all cores.
    pub workers: Option<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            jitter: false,
            seed: 0,
            background: [0.0; 3],
            chunk_rays: 64,
            workers: None,
        }
    }
}

/// Worker count: explicit setting, then [`WORKERS_ENV`], then all cores.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(rayon::current_num_threads)
        .max(1)
}

/// Runs `f` over `items` with `workers` threads, keeping input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    workers: usize,
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

/// Renders every pixel. Returns the image and the per-pixel alpha.
pub fn render_image(field: &dyn RadianceField, camera: &Camera, cfg: &RenderConfig) -> Result<(Image, Vec<f64>)> {
    let pixels = camera.all_pixels();
    let chunks: Vec<&[(usize, usize)]> = pixels.chunks(cfg.chunk_rays.max(1)).collect();
    let parts = parallel_map(resolve_workers(cfg.workers), &chunks, |i, chunk| {
        let rays = generate_rays(camera, chunk)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let batch = sample_batch(&rays, cfg.samples, cfg.jitter, &mut rng)?;
        let (sigma, color) = field.radiance(&batch.points, &batch.dirs)?;
        let s = cfg.samples;
        (0..rays.len())
            .map(|r| {
                composite(
                    &sigma[r * s..(r + 1) * s],
                    batch.deltas.row_slice(r),
                    &color[r * s..(r + 1) * s],
                    cfg.background,
                )
                .map(|c| (c.color, c.alpha))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut image = Image::filled(camera.width, camera.height, cfg.background);
    let mut alpha = vec![0.0; pixels.len()];
    for (&(x, y), (c, a)) in pixels.iter().zip(parts.into_iter().flatten()) {
        image.set_pixel(x, y, c);
        alpha[y * camera.width + x] = a;
    }
    Ok((image, alpha))
}
