//! Skeleton topology, 6-D rotations, forward kinematics and bone-relative
//! coordinates.
//!
//! Every bone has its own frame. A pose stores, per bone, the 6-D rotation
//! of that frame relative to its parent; the child's origin sits at its
//! rest offset expressed in the parent frame.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("degenerate 6-D rotation for bone {bone}: column norm {norm:e}")]
    DegenerateRotation { bone: usize, norm: f64 },
    #[error("pose has {got} bones, topology has {expected}")]
    PoseShape { expected: usize, got: usize },
    #[error("non-finite pose entry for bone {0}")]
    NonFinitePose(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SkeletonError> = std::result::Result<T, E>;

/// Column norms below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoneSpec {
    pub name: String,
    pub parent: Option<String>,
    pub offset: [f64; 3],
}

/// On-disk skeleton document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub bones: Vec<BoneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    rest_offset: Vec<Vector3<f64>>,
}

impl SkeletonTopology {
    /// Bones must be listed parent-first with exactly one root.
    pub fn new(bones: &[BoneSpec]) -> Result<Self> {
        if bones.is_empty() {
            return Err(SkeletonError::Topology("no bones".into()));
        }
        let mut names: Vec<String> = Vec::with_capacity(bones.len());
        let mut parent = Vec::with_capacity(bones.len());
        let mut rest_offset = Vec::with_capacity(bones.len());
        for b in bones {
            if names.contains(&b.name) {
                return Err(SkeletonError::Topology(format!("duplicate bone {}", b.name)));
            }
            let p = match &b.parent {
                None => None,
                Some(pn) => Some(names.iter().position(|n| n == pn).ok_or_else(|| {
                    SkeletonError::Topology(format!(
                        "parent {pn} of {} must be listed before it",
                        b.name
                    ))
                })?),
            };
            if b.offset.iter().any(|v| !v.is_finite()) {
                return Err(SkeletonError::Topology(format!("non-finite offset on {}", b.name)));
            }
            names.push(b.name.clone());
            parent.push(p);
            rest_offset.push(Vector3::from(b.offset));
        }
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(SkeletonError::Topology(format!("expected one root, found {roots}")));
        }
        Ok(Self {
            names,
            parent,
            rest_offset,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let doc: SkeletonFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(&doc.bones)
    }

    pub fn to_file_doc(&self) -> SkeletonFile {
        SkeletonFile {
            bones: (0..self.bone_count())
                .map(|i| BoneSpec {
                    name: self.names[i].clone(),
                    parent: self.parent[i].map(|p| self.names[p].clone()),
                    offset: self.rest_offset[i].into(),
                })
                .collect(),
        }
    }

    pub fn bone_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn rest_offset(&self, i: usize) -> Vector3<f64> {
        self.rest_offset[i]
    }

    /// Undirected bone adjacency (parent and children).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.parent[i].into_iter().collect();
        out.extend((0..self.bone_count()).filter(|&j| self.parent[j] == Some(i)));
        out.sort_unstable();
        out
    }

    /// Hop distance between two bones in the undirected bone graph.
    pub fn graph_distance(&self, a: usize, b: usize) -> usize {
        let n = self.bone_count();
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::from([a]);
        dist[a] = 0;
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist[b]
    }
}

/// Per-bone 6-D rotation parameters, relative to the parent frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub omega: Vec<[f64; 6]>,
}

impl Pose {
    pub fn identity(bones: usize) -> Self {
        Self {
            omega: vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; bones],
        }
    }

    /// Encodes rotation matrices as their first two columns.
    pub fn from_rotations(rots: &[Matrix3<f64>]) -> Self {
        Self {
            omega: rots.iter().map(matrix_to_rot6d).collect(),
        }
    }

    pub fn bone_count(&self) -> usize {
        self.omega.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.omega.len(),
            6,
            self.omega.iter().flat_map(|w| w.iter().copied()).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            omega: (0..t.rows())
                .map(|i| {
                    let r = t.row_slice(i);
                    [r[0], r[1], r[2], r[3], r[4], r[5]]
                })
                .collect(),
        }
    }
}

/// On-disk pose sequence: one `N_B × 6` array per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub bone_names: Vec<String>,
    pub frames: Vec<Vec<[f64; 6]>>,
}

impl PosesFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames
            .iter()
            .map(|f| Pose { omega: f.clone() })
            .collect()
    }
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// Gram-Schmidt on the two 3-vectors of `omega`; columns of the result are
/// `b1, b2, b1 × b2`.
pub fn rot6d_to_matrix(omega: &[f64; 6]) -> Result<Matrix3<f64>> {
    rot6d_checked(omega, 0)
}

fn rot6d_checked(omega: &[f64; 6], bone: usize) -> Result<Matrix3<f64>> {
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(SkeletonError::NonFinitePose(bone));
    }
    let a1 = Vector3::new(omega[0], omega[1], omega[2]);
    let a2 = Vector3::new(omega[3], omega[4], omega[5]);
    let n1 = a1.norm();
    if n1 < DEGENERATE_NORM {
        return Err(SkeletonError::DegenerateRotation { bone, norm: n1 });
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < DEGENERATE_NORM {
        return Err(SkeletonError::DegenerateRotation { bone, norm: n2 });
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Geodesic angle of a rotation, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

fn rigid(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
    let rt = r.transpose();
    rigid(&rt, &(-(rt * t)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoneTransforms {
    pub bone_to_world: Vec<Matrix4<f64>>,
    pub world_to_bone: Vec<Matrix4<f64>>,
    /// Rotation of each bone relative to its parent.
    pub local_rotation: Vec<Matrix3<f64>>,
}

impl BoneTransforms {
    pub fn origin(&self, i: usize) -> Vector3<f64> {
        self.bone_to_world[i].fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn rotation(&self, i: usize) -> Matrix3<f64> {
        self.bone_to_world[i].fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn to_bone(&self, i: usize, x: &Vector3<f64>) -> Vector3<f64> {
        (self.world_to_bone[i] * x.push(1.0)).xyz()
    }

    pub fn to_world(&self, i: usize, x: &Vector3<f64>) -> Vector3<f64> {
        (self.bone_to_world[i] * x.push(1.0)).xyz()
    }
}

pub fn forward_kinematics(topo: &SkeletonTopology, pose: &Pose) -> Result<BoneTransforms> {
    let n = topo.bone_count();
    if pose.bone_count() != n {
        return Err(SkeletonError::PoseShape {
            expected: n,
            got: pose.bone_count(),
        });
    }
    let mut b2w: Vec<Matrix4<f64>> = Vec::with_capacity(n);
    let mut local_rotation = Vec::with_capacity(n);
    for i in 0..n {
        let r = rot6d_checked(&pose.omega[i], i)?;
        let local = rigid(&r, &topo.rest_offset(i));
        let world = match topo.parent(i) {
            Some(p) => b2w[p] * local,
            None => local,
        };
        b2w.push(world);
        local_rotation.push(r);
    }
    let world_to_bone = b2w.iter().map(rigid_inverse).collect();
    Ok(BoneTransforms {
        bone_to_world: b2w,
        world_to_bone,
        local_rotation,
    })
}

/// Per-bone positive scales, stored as logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct PartScales {
    pub log_s: Vec<[f64; 3]>,
}

impl PartScales {
    pub const INIT: f64 = 0.5;

    pub fn initial(bones: usize) -> Self {
        Self {
            log_s: vec![[Self::INIT.ln(); 3]; bones],
        }
    }

    pub fn from_values(s: &[[f64; 3]]) -> Self {
        Self {
            log_s: s.iter().map(|v| [v[0].ln(), v[1].ln(), v[2].ln()]).collect(),
        }
    }

    pub fn from_log_tensor(t: &Tensor) -> Self {
        Self {
            log_s: (0..t.rows())
                .map(|i| {
                    let r = t.row_slice(i);
                    [r[0], r[1], r[2]]
                })
                .collect(),
        }
    }

    pub fn log_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.log_s.len(),
            3,
            self.log_s.iter().flat_map(|v| v.iter().copied()).collect(),
        )
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        let l = self.log_s[i];
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeCoords {
    pub xhat: Vec<Vector3<f64>>,
    pub xbar: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    pub any_valid: bool,
}

/// A part is valid when every component of its scaled coordinate lies in
/// `[-1, 1]`.
pub fn is_valid_part(xbar: &[f64]) -> bool {
    xbar.iter().all(|v| (-1.0..=1.0).contains(v))
}

pub fn to_relative(x: &Vector3<f64>, tf: &BoneTransforms, scales: &PartScales) -> RelativeCoords {
    let n = tf.world_to_bone.len();
    let xhat: Vec<Vector3<f64>> = (0..n).map(|i| tf.to_bone(i, x)).collect();
    let xbar: Vec<Vector3<f64>> = xhat
        .iter()
        .enumerate()
        .map(|(i, h)| h.component_mul(&scales.scale(i)))
        .collect();
    let valid: Vec<bool> = xbar.iter().map(|v| is_valid_part(v.as_slice())).collect();
    let any_valid = valid.iter().any(|&v| v);
    RelativeCoords {
        xhat,
        xbar,
        valid,
        any_valid,
    }
}

/// Kinematic chain recorded on a graph.
pub struct GraphTransforms {
    /// Bone-to-world rotation per bone, `[3, 3]`.
    pub rotation: Vec<Var>,
    /// World position of each bone origin, `[1, 3]`.
    pub origin: Vec<Var>,
}

/// Batched 6-D → rotation on the graph. `omega` is `[N, 6]`; returns one
/// `[3, 3]` rotation per row.
pub fn rot6d_graph(g: &mut Graph, omega: Var) -> Result<Vec<Var>> {
    let (rows, _) = g.shape(omega);
    let a1 = g.slice_cols(omega, 0, 3)?;
    let a2 = g.slice_cols(omega, 3, 3)?;
    let n1 = g.row_norm(a1)?;
    check_norms(g.value(n1))?;
    let b1 = g.div(a1, n1)?;
    let d = g.mul(b1, a2)?;
    let d = g.sum_cols(d)?;
    let proj = g.mul(b1, d)?;
    let u2 = g.sub(a2, proj)?;
    let n2 = g.row_norm(u2)?;
    check_norms(g.value(n2))?;
    let b2 = g.div(u2, n2)?;
    let b3 = g.cross(b1, b2)?;
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let c1 = g.slice_rows(b1, i, 1)?;
        let c2 = g.slice_rows(b2, i, 1)?;
        let c3 = g.slice_rows(b3, i, 1)?;
        // rows of the stack are the columns of R
        let rt = g.concat_rows(&[c1, c2, c3])?;
        out.push(g.transpose(rt)?);
    }
    Ok(out)
}

fn check_norms(t: &Tensor) -> Result<()> {
    for (bone, &n) in t.data().iter().enumerate() {
        if n < DEGENERATE_NORM {
            return Err(SkeletonError::DegenerateRotation { bone, norm: n });
        }
    }
    Ok(())
}

/// Forward kinematics on the graph; `pose` is `[N_B, 6]`.
pub fn forward_kinematics_graph(
    g: &mut Graph,
    topo: &SkeletonTopology,
    pose: Var,
) -> Result<GraphTransforms> {
    let n = topo.bone_count();
    let (rows, cols) = g.shape(pose);
    if rows != n || cols != 6 {
        return Err(SkeletonError::PoseShape {
            expected: n,
            got: rows,
        });
    }
    let local = rot6d_graph(g, pose)?;
    let mut rotation: Vec<Var> = Vec::with_capacity(n);
    let mut origin: Vec<Var> = Vec::with_capacity(n);
    for (i, &r) in local.iter().enumerate() {
        let off = topo.rest_offset(i);
        let off = g.constant(Tensor::row(&[off.x, off.y, off.z]));
        match topo.parent(i) {
            None => {
                rotation.push(r);
                origin.push(off);
            }
            Some(p) => {
                let rw = g.matmul(rotation[p], r)?;
                let rpt = g.transpose(rotation[p])?;
                let moved = g.matmul(off, rpt)?;
                let o = g.add(origin[p], moved)?;
                rotation.push(rw);
                origin.push(o);
            }
        }
    }
    Ok(GraphTransforms { rotation, origin })
}

/// Scaled bone-relative coordinates of a `[P, 3]` batch of world points;
/// one `[P, 3]` node per bone. `scales` is `[N_B, 3]` (positive).
pub fn to_relative_graph(
    g: &mut Graph,
    x: Var,
    tf: &GraphTransforms,
    scales: Var,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(tf.rotation.len());
    for i in 0..tf.rotation.len() {
        let d = g.sub(x, tf.origin[i])?;
        // row form of Rᵀ(x − t)
        let xhat = g.matmul(d, tf.rotation[i])?;
        let s = g.slice_rows(scales, i, 1)?;
        out.push(g.mul(xhat, s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_wrt, ParamStore};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> SkeletonTopology {
        let bones: Vec<BoneSpec> = (0..n)
            .map(|i| BoneSpec {
                name: format!("b{i}"),
                parent: i.checked_sub(1).map(|p| format!("b{p}")),
                offset: if i == 0 { [0.0; 3] } else { [0.0, 1.0, 0.0] },
            })
            .collect();
        SkeletonTopology::new(&bones).unwrap()
    }

    fn as_tensor(e: SkeletonError) -> TensorError {
        match e {
            SkeletonError::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }

    fn random_omega(rng: &mut impl Rng) -> [f64; 6] {
        std::array::from_fn(|_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn canonical_omega_is_identity() {
        let r = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        // columns: b1 = y, b2 = -x, b3 = z
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_rotation_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(SkeletonError::DegenerateRotation { .. })
        ));
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(SkeletonError::DegenerateRotation { .. })
        ));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = rot6d_to_matrix(&random_omega(&mut rng)).unwrap();
            assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rot6d_is_continuous_along_a_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_omega(&mut rng);
        let b = random_omega(&mut rng);
        let steps = 2000;
        let at = |t: f64| -> [f64; 6] { std::array::from_fn(|k| a[k] + t * (b[k] - a[k])) };
        let mut prev = rot6d_to_matrix(&at(0.0)).unwrap();
        let mut worst: f64 = 0.0;
        for s in 1..=steps {
            let cur = rot6d_to_matrix(&at(s as f64 / steps as f64)).unwrap();
            worst = worst.max((cur - prev).norm());
            prev = cur;
        }
        // step length in ω is |b-a|/steps; a jump would be O(1)
        assert!(worst < 0.05, "largest step {worst}");
    }

    #[test]
    fn single_root_identity() {
        let topo = chain(1);
        let tf = forward_kinematics(&topo, &Pose::identity(1)).unwrap();
        assert_eq!(tf.world_to_bone[0], Matrix4::identity());
    }

    #[test]
    fn two_bone_chain_origins() {
        let bones = vec![
            BoneSpec {
                name: "a".into(),
                parent: None,
                offset: [0.0, 1.0, 0.0],
            },
            BoneSpec {
                name: "b".into(),
                parent: Some("a".into()),
                offset: [0.0, 1.0, 0.0],
            },
        ];
        let topo = SkeletonTopology::new(&bones).unwrap();
        let tf = forward_kinematics(&topo, &Pose::identity(2)).unwrap();
        assert_eq!(tf.origin(1), Vector3::new(0.0, 2.0, 0.0));
    }

    #[test]
    fn world_bone_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let topo = chain(4);
        let pose = Pose {
            omega: (0..4).map(|_| random_omega(&mut rng)).collect(),
        };
        let tf = forward_kinematics(&topo, &pose).unwrap();
        let x = Vector3::new(0.3, -1.2, 2.5);
        for i in 0..4 {
            let back = tf.to_world(i, &tf.to_bone(i, &x));
            assert!((back - x).norm() < 1e-12);
        }
    }

    #[test]
    fn topology_validation() {
        let orphan = vec![BoneSpec {
            name: "a".into(),
            parent: Some("missing".into()),
            offset: [0.0; 3],
        }];
        assert!(SkeletonTopology::new(&orphan).is_err());
        let two_roots = vec![
            BoneSpec {
                name: "a".into(),
                parent: None,
                offset: [0.0; 3],
            },
            BoneSpec {
                name: "b".into(),
                parent: None,
                offset: [0.0; 3],
            },
        ];
        assert!(SkeletonTopology::new(&two_roots).is_err());
    }

    #[test]
    fn relative_coordinate_examples() {
        let topo = chain(2);
        let tf = forward_kinematics(&topo, &Pose::identity(2)).unwrap();
        let scales = PartScales::from_values(&[[1.0; 3], [0.4, 1.0, 1.0]]);
        let at_origin = to_relative(&tf.origin(1), &tf, &scales);
        assert!(at_origin.xbar[1].norm() < 1e-15);
        assert!(at_origin.valid[1]);

        let x = tf.to_world(1, &Vector3::new(2.0, 0.0, 0.0));
        let rc = to_relative(&x, &tf, &scales);
        assert_relative_eq!(rc.xbar[1], Vector3::new(0.8, 0.0, 0.0), epsilon = 1e-12);
        assert!(rc.valid[1]);

        let far = to_relative(&Vector3::new(100.0, 0.0, 0.0), &tf, &scales);
        assert!(!far.any_valid);
    }

    #[test]
    fn graph_kinematics_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let topo = chain(3);
        let pose = Pose {
            omega: (0..3).map(|_| random_omega(&mut rng)).collect(),
        };
        let scales = PartScales::from_values(&[[0.5, 0.7, 0.9], [1.0, 0.3, 0.6], [0.2, 0.4, 0.8]]);
        let tf = forward_kinematics(&topo, &pose).unwrap();
        let x = Vector3::new(0.1, 0.9, -0.4);
        let plain = to_relative(&x, &tf, &scales);

        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let pv = g.constant(pose.to_tensor());
        let gt = forward_kinematics_graph(&mut g, &topo, pv).unwrap();
        let xv = g.constant(Tensor::row(&[x.x, x.y, x.z]));
        let ls = g.constant(scales.log_tensor());
        let s = g.exp(ls).unwrap();
        let rel = to_relative_graph(&mut g, xv, &gt, s).unwrap();
        for i in 0..3 {
            let v = g.value(rel[i]).data();
            for k in 0..3 {
                assert!((v[k] - plain.xbar[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relative_coords_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let topo = chain(3);
        let pose = Pose {
            omega: (0..3).map(|_| random_omega(&mut rng)).collect(),
        };
        let log_s = PartScales::from_values(&[[0.5, 0.7, 0.9], [1.0, 0.3, 0.6], [0.2, 0.4, 0.8]]);
        let p = ParamStore::new();
        let weights = Tensor::matrix(1, 3, vec![0.7, -1.3, 0.4]);
        let report = finite_difference_wrt::<_, TensorError>(
            &p,
            &[pose.to_tensor(), log_s.log_tensor(), Tensor::row(&[0.2, 0.5, -0.3])],
            |g, ins| {
                let tf = forward_kinematics_graph(g, &topo, ins[0]).map_err(as_tensor)?;
                let s = g.exp(ins[1])?;
                let rel = to_relative_graph(g, ins[2], &tf, s).map_err(as_tensor)?;
                let w = g.constant(weights.clone());
                let mut acc = None;
                for r in rel {
                    let t = g.mul(r, w)?;
                    let t = g.sin(t)?;
                    let t = g.sum(t)?;
                    acc = Some(match acc {
                        None => t,
                        Some(a) => g.add(a, t)?,
                    });
                }
                Ok(acc.unwrap())
            },
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
