//! Evaluation: OKS, joint errors and ground-plane diagnostics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body_model::SkeletonTemplate;
use crate::camera;
use crate::geom;
use crate::losses::{self, PlaneAnchor};
use crate::pipeline::{PersonEstimate, Plane, SceneObservation};
use crate::{Error, Result};

/// Per-keypoint OKS constants (`k = 2σ`) for the 17-point COCO layout.
pub const COCO17_K: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214, 0.174, 0.174,
    0.178, 0.178,
];
/// Constant used for layouts without published per-keypoint values.
pub const UNIFORM_K: f64 = 0.08;

/// OKS constants for a layout tag.
pub fn oks_constants(layout: &str, count: usize) -> Vec<f64> {
    if layout == "coco17" && count == COCO17_K.len() {
        COCO17_K.to_vec()
    } else {
        vec![UNIFORM_K; count]
    }
}

/// Object keypoint similarity: mean over visible keypoints of
/// `exp(−d²/(2 s² k²))`, with `s²` the object area. `None` when nothing is
/// visible.
pub fn oks(pred: &[[f64; 2]], gt: &[[f64; 2]], visible: &[bool], area: f64, k: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..gt.len().min(pred.len()) {
        if !visible[i] {
            continue;
        }
        let d2 = (pred[i][0] - gt[i][0]).powi(2) + (pred[i][1] - gt[i][1]).powi(2);
        let e = d2 / (2.0 * area * k[i] * k[i]);
        total += if e.is_finite() { (-e).exp() } else { 0.0 };
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointError {
    pub mm: f64,
    /// Alignment fell back to translation only.
    pub degenerate: bool,
}

fn check_pair(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Config(format!("joint counts differ: {} vs {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// Mean per-joint position error in millimetres (inputs in metres).
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| geom::norm(geom::sub(*a, *b))).sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Similarity transform `(s, R, t)` minimizing `Σ‖s R p + t − q‖²`.
/// Returns `None` when `p` has no spread.
pub fn procrustes(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = pred.len() as f64;
    let to_v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mu_p = pred.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mu_q = gt.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, q) in pred.iter().zip(gt) {
        let dp = to_v(p) - mu_p;
        let dq = to_v(q) - mu_q;
        cov += dq * dp.transpose();
        var_p += dp.norm_squared();
    }
    if var_p < 1e-18 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let s = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_p;
    let t = mu_q - s * r * mu_p;
    Some((s, r, t))
}

/// MPJPE after optimal similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<JointError> {
    check_pair(pred, gt)?;
    match procrustes(pred, gt) {
        Some((s, r, t)) => {
            let aligned: Vec<[f64; 3]> = pred
                .iter()
                .map(|p| {
                    let v = s * r * Vector3::new(p[0], p[1], p[2]) + t;
                    [v.x, v.y, v.z]
                })
                .collect();
            Ok(JointError { mm: mpjpe(&aligned, gt)?, degenerate: false })
        }
        None => {
            let n = pred.len() as f64;
            let mut shift = [0.0; 3];
            for (p, q) in pred.iter().zip(gt) {
                shift = geom::add(shift, geom::scale(geom::sub(*q, *p), 1.0 / n));
            }
            let moved: Vec<[f64; 3]> = pred.iter().map(|p| geom::add(*p, shift)).collect();
            Ok(JointError { mm: mpjpe(&moved, gt)?, degenerate: true })
        }
    }
}

/// Exact population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    /// Spread of roots along the unit normal, metres.
    pub residual_std: f64,
    /// Unit-length estimated normal.
    pub normal: [f64; 3],
    pub angle_error_deg: Option<f64>,
}

/// Plane consistency of a set of world-space skeletons.
///
/// Uses the head/ankle normal estimate normalized to unit length, so the
/// residual is in metres.
pub fn plane_report(
    template: &SkeletonTemplate,
    world_joints: &[(u64, Vec<[f64; 3]>)],
    gt_plane: Option<&Plane>,
) -> Result<PlaneReport> {
    let anchors: Vec<PlaneAnchor<f64>> = world_joints
        .iter()
        .map(|(id, j)| {
            let (top, bottom) = template.top_and_bottom(j);
            PlaneAnchor { person: *id, top, bottom }
        })
        .collect();
    let l = losses::estimate_plane_normal(&anchors)?;
    let len = geom::norm(l);
    if !(len > 0.0) {
        return Err(Error::Domain("estimated normal has zero length".into()));
    }
    let unit = geom::scale(l, 1.0 / len);
    let root = template.role_map.root;
    let proj: Vec<f64> = world_joints.iter().map(|(_, j)| geom::dot(j[root], unit)).collect();
    let angle_error_deg = gt_plane.map(|p| {
        let c = geom::dot(unit, p.normal).abs() / geom::norm(p.normal);
        c.min(1.0).acos().to_degrees()
    });
    Ok(PlaneReport {
        residual_std: population_std(&proj),
        normal: unit,
        angle_error_deg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthErrorStats {
    pub mean_abs: f64,
    pub rms: f64,
    pub max_abs: f64,
}

impl DepthErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        Self {
            mean_abs: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
            rms: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            max_abs: errors.iter().fold(0.0, |m, e| m.max(e.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonEval {
    pub id: u64,
    pub oks: Option<f64>,
    pub mpjpe_mm: Option<f64>,
    pub pa_mpjpe_mm: Option<f64>,
    pub depth_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub persons: Vec<PersonEval>,
    pub mean_oks: Option<f64>,
    pub mpjpe_mm: Option<f64>,
    pub pa_mpjpe_mm: Option<f64>,
    pub plane: Option<PlaneReport>,
    pub depth_error: Option<DepthErrorStats>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates estimates against a scene. OKS compares reprojected keypoints
/// with the clean ground-truth 2D when available, else with the observed
/// confident keypoints. 3D errors need ground truth.
pub fn evaluate(template: &SkeletonTemplate, scene: &SceneObservation, estimates: &[PersonEstimate]) -> Result<EvalReport> {
    let gt = scene.ground_truth.as_ref();
    let k = oks_constants(&template.role_map.layout, template.keypoint_count());
    let mut persons = Vec::with_capacity(estimates.len());
    let mut world = Vec::with_capacity(estimates.len());
    let mut depth_errors = Vec::new();
    for e in estimates {
        let obs = scene
            .persons
            .iter()
            .find(|p| p.id == e.id)
            .ok_or_else(|| Error::Config(format!("estimate for unknown person {}", e.id)))?;
        let (joints, _) = e.pose(template)?;
        let world_kps = e.world_keypoints(template)?;
        let truth = gt.and_then(|g| g.person(e.id));
        let (target, visible): (Vec<[f64; 2]>, Vec<bool>) = match truth {
            Some(b) => (b.keypoints_2d.clone(), vec![true; b.keypoints_2d.len()]),
            None => obs.keypoints.iter().map(|kp| (kp.position, kp.is_confident())).unzip(),
        };
        let oks_value = match camera::project(&world_kps, [0.0; 3], &scene.intrinsics) {
            Ok(pred) => oks(&pred, &target, &visible, obs.bbox.area(), &k),
            Err(_) => Some(0.0),
        };
        let mut pe = PersonEval { id: e.id, oks: oks_value, mpjpe_mm: None, pa_mpjpe_mm: None, depth_error: None };
        if let Some(b) = truth {
            let rel = |js: &[[f64; 3]]| -> Vec<[f64; 3]> {
                let r = js[template.role_map.root];
                js.iter().map(|j| geom::sub(*j, r)).collect()
            };
            pe.mpjpe_mm = Some(mpjpe(&rel(&joints), &rel(&b.joints))?);
            pe.pa_mpjpe_mm = Some(pa_mpjpe(&joints, &b.joints)?.mm);
            let dz = e.translation[2] - b.translation[2];
            pe.depth_error = Some(dz);
            depth_errors.push(dz);
        }
        world.push((e.id, joints.iter().map(|j| geom::add(*j, e.translation)).collect::<Vec<_>>()));
        persons.push(pe);
    }
    let plane = if world.len() >= 2 {
        Some(plane_report(template, &world, gt.and_then(|g| g.plane.as_ref()))?)
    } else {
        None
    };
    Ok(EvalReport {
        mean_oks: mean(persons.iter().filter_map(|p| p.oks)),
        mpjpe_mm: mean(persons.iter().filter_map(|p| p.mpjpe_mm)),
        pa_mpjpe_mm: mean(persons.iter().filter_map(|p| p.pa_mpjpe_mm)),
        depth_error: (!depth_errors.is_empty()).then(|| DepthErrorStats::from_errors(&depth_errors)),
        persons,
        plane,
    })
}
