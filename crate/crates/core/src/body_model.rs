//! Simplified articulated body standing in for a licensed parametric model.
//!
//! The template has SMPL's 24-joint kinematic tree, a linear shape basis over
//! the rest joints, and a set of template points each rigidly attached to one
//! joint. Rest data is y-up, x towards the body's left, z forward.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Real;
use crate::geom::{self, Mat3, Vec3};
use crate::{Error, Result};

pub const JOINT_COUNT: usize = 24;
pub const SHAPE_DIM: usize = 10;
pub const MIN_TEMPLATE_POINTS: usize = 30;

const BUILTIN_TEMPLATE: &str = include_str!("../data/body_template_v1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePoint {
    pub position: [f64; 3],
    pub joint: usize,
}

/// Where an observation keypoint comes from on the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSource {
    Joint(usize),
    Point(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleMap {
    pub root: usize,
    pub head_top: usize,
    pub left_ankle: usize,
    pub right_ankle: usize,
    /// Observation layout tag, e.g. `coco17`.
    pub layout: String,
    pub keypoints: Vec<KeypointSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonTemplate {
    pub version: String,
    #[serde(default)]
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub rest_joints: Vec<[f64; 3]>,
    /// `3K` rows (joint-major, xyz) by `S` columns.
    pub shape_basis: Vec<Vec<f64>>,
    pub template_points: Vec<TemplatePoint>,
    pub role_map: RoleMap,
}

/// Pose θ: one axis-angle per joint, joint 0 is the global orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseParams(pub Vec<[f64; 3]>);

impl PoseParams {
    pub fn zeros(joints: usize) -> Self {
        Self(vec![[0.0; 3]; joints])
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Config(format!("pose length {} not divisible by 3", flat.len())));
        }
        Ok(Self(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    /// Wraps every joint angle into `[0, 2π)`.
    pub fn canonicalize(&mut self) {
        for w in &mut self.0 {
            *w = geom::canonical_axis_angle(*w);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Shape β coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeParams(pub Vec<f64>);

impl ShapeParams {
    /// Bound on |βᵢ| checked after fitting.
    pub const SOFT_BOUND: f64 = 5.0;

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn within_soft_bound(&self) -> bool {
        self.0.iter().all(|b| b.is_finite() && b.abs() <= Self::SOFT_BOUND)
    }
}

/// Forward kinematics result in the root-local frame (root at the origin).
#[derive(Debug, Clone)]
pub struct Posed<R> {
    /// Global rotation of every joint frame.
    pub rotations: Vec<Mat3<R>>,
    pub joints: Vec<Vec3<R>>,
}

impl SkeletonTemplate {
    /// The bundled template (`data/body_template_v1.json`).
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_TEMPLATE).expect("bundled template is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.first().map_or(0, Vec::len)
    }

    pub fn point_count(&self) -> usize {
        self.template_points.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.role_map.keypoints.len()
    }

    /// Skeleton edges as `(parent, child)` joint pairs.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (p, i)))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.parents.len();
        let bad = |msg: String| Err(Error::Config(format!("template: {msg}")));
        if k != JOINT_COUNT {
            return bad(format!("expected {JOINT_COUNT} joints, found {k}"));
        }
        if self.rest_joints.len() != k {
            return bad(format!("{} rest joints for {k} parents", self.rest_joints.len()));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || self.parents[0].is_some() {
            return bad("joint 0 must be the only root".into());
        }
        for (i, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return bad(format!("parent of joint {i} is {p}; parents must precede children"));
                }
            }
        }
        if self.shape_basis.len() != 3 * k {
            return bad(format!("shape basis has {} rows, expected {}", self.shape_basis.len(), 3 * k));
        }
        if self.shape_basis.iter().any(|r| r.len() != SHAPE_DIM) {
            return bad(format!("every shape basis row needs {SHAPE_DIM} columns"));
        }
        if self.template_points.len() < MIN_TEMPLATE_POINTS {
            return bad(format!("need at least {MIN_TEMPLATE_POINTS} template points"));
        }
        if let Some(i) = self.template_points.iter().position(|p| p.joint >= k) {
            return bad(format!("template point {i} attached to missing joint"));
        }
        let all_finite = self.rest_joints.iter().flatten().all(|v| v.is_finite())
            && self.shape_basis.iter().flatten().all(|v| v.is_finite())
            && self.template_points.iter().flat_map(|p| p.position).all(f64::is_finite);
        if !all_finite {
            return bad("non-finite template data".into());
        }
        let r = &self.role_map;
        for (name, j) in [
            ("root", r.root),
            ("head_top", r.head_top),
            ("left_ankle", r.left_ankle),
            ("right_ankle", r.right_ankle),
        ] {
            if j >= k {
                return bad(format!("role {name} -> {j} is not a joint"));
            }
        }
        if r.root != 0 {
            return bad("root role must be joint 0".into());
        }
        if r.head_top == r.left_ankle || r.head_top == r.right_ankle {
            return bad("head_top must differ from the ankles".into());
        }
        for (i, src) in r.keypoints.iter().enumerate() {
            let ok = match *src {
                KeypointSource::Joint(j) => j < k,
                KeypointSource::Point(m) => m < self.template_points.len(),
            };
            if !ok {
                return bad(format!("keypoint {i} maps to a missing joint or point"));
            }
        }
        Ok(())
    }

    /// Rest joints for shape β: `J0 + reshape(B·β)`.
    pub fn shaped_rest_joints<R: Real>(&self, beta: &[R]) -> Result<Vec<Vec3<R>>> {
        if beta.len() != self.shape_dim() {
            return Err(Error::Config(format!(
                "shape has {} coefficients, basis expects {}",
                beta.len(),
                self.shape_dim()
            )));
        }
        Ok(self
            .rest_joints
            .iter()
            .enumerate()
            .map(|(j, rest)| {
                let mut out = geom::lift::<R>(*rest);
                for (c, slot) in out.iter_mut().enumerate() {
                    let row = &self.shape_basis[3 * j + c];
                    for (b, coef) in beta.iter().zip(row) {
                        if *coef != 0.0 {
                            *slot += *b * *coef;
                        }
                    }
                }
                out
            })
            .collect())
    }

    /// Joint frames for pose θ (flat, `3K`) and shape β.
    pub fn forward_kinematics<R: Real>(&self, theta: &[R], beta: &[R]) -> Result<Posed<R>> {
        let k = self.joint_count();
        if theta.len() != 3 * k {
            return Err(Error::Config(format!(
                "pose has {} values, template expects {}",
                theta.len(),
                3 * k
            )));
        }
        let rest = self.shaped_rest_joints(beta)?;
        let mut rotations: Vec<Mat3<R>> = Vec::with_capacity(k);
        let mut joints: Vec<Vec3<R>> = Vec::with_capacity(k);
        for i in 0..k {
            let local = geom::rodrigues([theta[3 * i], theta[3 * i + 1], theta[3 * i + 2]]);
            match self.parents[i] {
                None => {
                    rotations.push(local);
                    joints.push([R::zero(); 3]);
                }
                Some(p) => {
                    let bone = geom::sub(rest[i], rest[p]);
                    let pos = geom::add(joints[p], geom::mat_vec(&rotations[p], bone));
                    rotations.push(geom::mat_mul(&rotations[p], &local));
                    joints.push(pos);
                }
            }
        }
        Ok(Posed { rotations, joints })
    }

    fn place_point<R: Real>(&self, posed: &Posed<R>, m: usize) -> Vec3<R> {
        let p = &self.template_points[m];
        let offset = geom::sub(p.position, self.rest_joints[p.joint]);
        geom::add(
            posed.joints[p.joint],
            geom::mat_vec(&posed.rotations[p.joint], geom::lift(offset)),
        )
    }

    /// Template points carried rigidly by their attached joints.
    pub fn skin_points<R: Real>(&self, posed: &Posed<R>) -> Result<Vec<Vec3<R>>> {
        if posed.joints.len() != self.joint_count() {
            return Err(Error::Config("posed skeleton does not match template".into()));
        }
        Ok((0..self.point_count()).map(|m| self.place_point(posed, m)).collect())
    }

    /// 3D positions in the observation keypoint layout.
    pub fn keypoints<R: Real>(&self, posed: &Posed<R>) -> Vec<Vec3<R>> {
        self.role_map
            .keypoints
            .iter()
            .map(|src| match *src {
                KeypointSource::Joint(j) => posed.joints[j],
                KeypointSource::Point(m) => self.place_point(posed, m),
            })
            .collect()
    }

    /// Head-top joint and ankle midpoint, the two ends of the up estimate.
    pub fn top_and_bottom<R: Real>(&self, joints: &[Vec3<R>]) -> (Vec3<R>, Vec3<R>) {
        let r = &self.role_map;
        let bottom = geom::scale(
            geom::add(joints[r.left_ankle], joints[r.right_ankle]),
            R::constant(0.5),
        );
        (joints[r.head_top], bottom)
    }
}
