//! Fitting and crowd loss terms, generic over [`Real`] so the same code
//! serves evaluation and differentiation.

use serde::{Deserialize, Serialize};

use crate::body_model::{PoseParams, ShapeParams, SkeletonTemplate};
use crate::camera::{self, BBox, Intrinsics};
use crate::diff::{sum, PersonSlice, Real};
use crate::geom::{self, Vec3};
use crate::pipeline::{PersonEstimate, PersonObservation};
use crate::{Error, Result};

/// Guard for the confidence-weighted mean in the reprojection terms.
pub const CONFIDENCE_EPS: f64 = 1e-8;

/// Smoothing of the crowd standard deviation: `var / sqrt(var + ε²)`.
pub const STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointObs {
    pub position: [f64; 2],
    pub confidence: f64,
}

impl KeypointObs {
    /// Clamps confidence into `[0, 1]`; NaN confidence counts as 0.
    pub fn new(position: [f64; 2], confidence: f64) -> Self {
        let confidence = if confidence.is_nan() { 0.0 } else { confidence.clamp(0.0, 1.0) };
        Self { position, confidence }
    }

    pub fn is_confident(&self) -> bool {
        self.confidence > 0.0 && self.position.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reproj: f64,
    pub smpl: f64,
    pub joint: f64,
    pub verts: f64,
    pub crowd: f64,
    pub keyp: f64,
    pub init_shape: f64,
    pub init_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reproj: 5.0,
            smpl: 5.0,
            joint: 1.0,
            verts: 0.1,
            crowd: 0.001,
            keyp: 5.0,
            init_shape: 0.001,
            init_pose: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.reproj,
            self.smpl,
            self.joint,
            self.verts,
            self.crowd,
            self.keyp,
            self.init_shape,
            self.init_pose,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Supervision for one person. 3D quantities are root-local.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBundle {
    pub theta: PoseParams,
    pub beta: ShapeParams,
    pub translation: [f64; 3],
    pub joints: Vec<[f64; 3]>,
    pub points: Vec<[f64; 3]>,
    pub keypoints_2d: Vec<[f64; 2]>,
}

impl GroundTruthBundle {
    pub fn check_against(&self, template: &SkeletonTemplate) -> Result<()> {
        let ok = self.theta.0.len() == template.joint_count()
            && self.beta.0.len() == template.shape_dim()
            && self.joints.len() == template.joint_count()
            && self.points.len() == template.point_count()
            && self.keypoints_2d.len() == template.keypoint_count();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("ground truth dimensions do not match the template".into()))
        }
    }
}

/// Confidence-weighted, box-normalized reprojection error of one person.
///
/// `Σ w‖(Π(X + t) − x̂)/d‖² / max(Σ w, 1e-8)`; keypoints with zero
/// confidence are neither projected nor counted.
pub fn reproj_loss<R: Real>(
    keypoints_3d: &[Vec3<R>],
    t: Vec3<R>,
    intr: &Intrinsics,
    scale: f64,
    obs: &[KeypointObs],
) -> Result<R> {
    if keypoints_3d.len() != obs.len() {
        return Err(Error::Config(format!(
            "{} model keypoints for {} observations",
            keypoints_3d.len(),
            obs.len()
        )));
    }
    let mut total = R::zero();
    let mut weight = 0.0;
    for (joint, (p, o)) in keypoints_3d.iter().zip(obs).enumerate() {
        if !o.is_confident() {
            continue;
        }
        let uv = camera::project_point(*p, t, intr).map_err(|depth| Error::Projection {
            person: None,
            joint,
            depth,
        })?;
        let du = (uv[0] - o.position[0]) / scale;
        let dv = (uv[1] - o.position[1]) / scale;
        total += (du * du + dv * dv) * o.confidence;
        weight += o.confidence;
    }
    Ok(total / weight.max(CONFIDENCE_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedTerms<R> {
    pub smpl: R,
    pub joint: R,
    pub verts: R,
}

fn mean_sq_relative<R: Real>(pred: &[Vec3<R>], pred_origin: Vec3<R>, gt: &[[f64; 3]], gt_origin: [f64; 3]) -> R {
    let n = (3 * pred.len()).max(1) as f64;
    sum(pred.iter().zip(gt).map(|(p, g)| {
        let a = geom::sub(*p, pred_origin);
        let b = geom::sub(*g, gt_origin);
        (a[0] - b[0]).square() + (a[1] - b[1]).square() + (a[2] - b[2]).square()
    })) / n
}

/// Parameter, joint and point supervision, each a mean of squared
/// differences. Joints and points are compared root-relative.
pub fn supervised_param_losses<R: Real>(
    theta: &[R],
    beta: &[R],
    joints: &[Vec3<R>],
    points: &[Vec3<R>],
    root: usize,
    gt: &GroundTruthBundle,
) -> Result<SupervisedTerms<R>> {
    let gt_theta = gt.theta.flat();
    if theta.len() != gt_theta.len()
        || beta.len() != gt.beta.0.len()
        || joints.len() != gt.joints.len()
        || points.len() != gt.points.len()
        || root >= joints.len()
    {
        return Err(Error::Config("prediction and ground truth dimensions differ".into()));
    }
    let params = beta.iter().zip(&gt.beta.0).chain(theta.iter().zip(&gt_theta));
    let smpl = sum(params.map(|(p, g)| (*p - *g).square())) / (theta.len() + beta.len()) as f64;
    Ok(SupervisedTerms {
        smpl,
        joint: mean_sq_relative(joints, joints[root], &gt.joints, gt.joints[root]),
        verts: mean_sq_relative(points, joints[root], &gt.points, gt.joints[root]),
    })
}

/// `λ1·L_reproj + λ2·L_smpl + λ3·L_joint + λ4·L_verts`.
pub fn supervised_total<R: Real>(terms: &SupervisedTerms<R>, reproj: R, w: &LossWeights) -> R {
    reproj * w.reproj + terms.smpl * w.smpl + terms.joint * w.joint + terms.verts * w.verts
}

/// One person's head-top and ankle midpoint in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct PlaneAnchor<R> {
    pub person: u64,
    pub top: Vec3<R>,
    pub bottom: Vec3<R>,
}

/// Mean of per-person unit head-minus-ankle vectors; not renormalized.
pub fn estimate_plane_normal<R: Real>(anchors: &[PlaneAnchor<R>]) -> Result<Vec3<R>> {
    if anchors.is_empty() {
        return Err(Error::Domain("plane normal needs at least one person".into()));
    }
    let mut acc = [R::zero(); 3];
    for a in anchors {
        let v = geom::sub(a.top, a.bottom);
        let len = geom::norm(v);
        if !(len.value() > 0.0) {
            return Err(Error::DegeneratePerson { person: a.person });
        }
        acc = geom::add(acc, geom::scale(v, R::constant(1.0) / len));
    }
    Ok(geom::scale(acc, R::constant(1.0 / anchors.len() as f64)))
}

/// Smoothed population standard deviation of the roots projected on `l`.
///
/// Computed as `var / sqrt(var + ε²)`, which equals the standard deviation to
/// a relative 1e-12 once it exceeds a millimetre, is exactly 0 for identical
/// projections, and has a finite derivative everywhere. Fewer than two roots
/// give 0.
pub fn crowd_loss<R: Real>(roots: &[Vec3<R>], l: Vec3<R>) -> R {
    if roots.len() < 2 {
        return R::zero();
    }
    let n = roots.len() as f64;
    let proj: Vec<R> = roots.iter().map(|r| geom::dot(*r, l)).collect();
    let mean = sum(proj.iter().copied()) / n;
    let var = sum(proj.iter().map(|p| (*p - mean).square())) / n;
    var / (var + STD_EPS * STD_EPS).sqrt()
}

/// Differentiable per-person quantities derived from one parameter block.
#[derive(Debug, Clone)]
pub struct PersonState<R> {
    pub id: u64,
    pub theta: Vec<R>,
    pub beta: Vec<R>,
    pub translation: Vec3<R>,
    /// Root-local joints.
    pub joints: Vec<Vec3<R>>,
    /// Root-local keypoints in the observation layout.
    pub keypoints: Vec<Vec3<R>>,
}

impl<R: Real> PersonState<R> {
    pub fn build(
        template: &SkeletonTemplate,
        id: u64,
        block: PersonSlice<'_, R>,
        bbox: &BBox,
        intr: &Intrinsics,
    ) -> Result<Self> {
        let posed = template.forward_kinematics(block.theta, block.beta)?;
        let translation = camera::lift_translation([block.cam[0], block.cam[1], block.cam[2]], bbox, intr)
            .map_err(|e| e.for_person(id))?;
        let keypoints = template.keypoints(&posed);
        Ok(Self {
            id,
            theta: block.theta.to_vec(),
            beta: block.beta.to_vec(),
            translation,
            joints: posed.joints,
            keypoints,
        })
    }

    pub fn world_joint(&self, j: usize) -> Vec3<R> {
        geom::add(self.joints[j], self.translation)
    }

    pub fn root(&self, template: &SkeletonTemplate) -> Vec3<R> {
        self.world_joint(template.role_map.root)
    }

    pub fn plane_anchor(&self, template: &SkeletonTemplate) -> PlaneAnchor<R> {
        let (top, bottom) = template.top_and_bottom(&self.joints);
        PlaneAnchor {
            person: self.id,
            top: geom::add(top, self.translation),
            bottom: geom::add(bottom, self.translation),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KeypOutcome<R> {
    pub value: R,
    /// Indices of persons whose residual was dropped for non-positive depth.
    pub masked: Vec<usize>,
}

/// Mean over persons of the reprojection term against detected 2D poses.
///
/// With `raw_pixels` the residuals stay in pixels instead of being divided by
/// each person's box size. With `mask_depth`, persons with a keypoint behind
/// the camera contribute 0 and are reported instead of failing the call.
pub fn keyp_loss<R: Real>(
    states: &[PersonState<R>],
    detections: &[&PersonObservation],
    intr: &Intrinsics,
    raw_pixels: bool,
    mask_depth: bool,
) -> Result<KeypOutcome<R>> {
    if states.len() != detections.len() {
        return Err(Error::Config("one detection per person state required".into()));
    }
    if states.is_empty() {
        return Ok(KeypOutcome { value: R::zero(), masked: Vec::new() });
    }
    let mut masked = Vec::new();
    let mut total = R::zero();
    for (i, (s, det)) in states.iter().zip(detections).enumerate() {
        let scale = if raw_pixels { 1.0 } else { det.bbox.size() };
        match reproj_loss(&s.keypoints, s.translation, intr, scale, &det.keypoints) {
            Ok(v) => total += v,
            Err(Error::Projection { .. }) if mask_depth => masked.push(i),
            Err(e) => return Err(e.for_person(s.id)),
        }
    }
    Ok(KeypOutcome {
        value: total / states.len() as f64,
        masked,
    })
}

/// Pull toward the initial estimates:
/// `(1/N) Σ (λ7‖β − β_init‖² + λ8‖θ − θ_init‖²)`.
///
/// `crowd_factor = Some(L_crowd)` multiplies the shape term by the crowd
/// loss, reproducing the printed form of the objective literally.
pub fn init_loss<R: Real>(
    states: &[PersonState<R>],
    inits: &[&PersonEstimate],
    w: &LossWeights,
    crowd_factor: Option<R>,
) -> Result<R> {
    if states.len() != inits.len() {
        return Err(Error::Config("one initial estimate per person state required".into()));
    }
    if states.is_empty() {
        return Ok(R::zero());
    }
    let mut total = R::zero();
    for (s, init) in states.iter().zip(inits) {
        let init_theta = init.theta.flat();
        if s.theta.len() != init_theta.len() || s.beta.len() != init.beta.0.len() {
            return Err(Error::Config(format!("person {}: init dimensions differ", s.id)));
        }
        let shape = sum(s.beta.iter().zip(&init.beta.0).map(|(b, b0)| (*b - *b0).square()));
        let pose = sum(s.theta.iter().zip(&init_theta).map(|(t, t0)| (*t - *t0).square()));
        let shape = match crowd_factor {
            Some(c) => shape * c,
            None => shape,
        };
        total += shape * w.init_shape + pose * w.init_pose;
    }
    Ok(total / states.len() as f64)
}

/// `λ5·L_crowd + λ6·L_keyp + L_init`.
pub fn crowd_total<R: Real>(crowd: R, keyp: R, init: R, w: &LossWeights) -> R {
    crowd * w.crowd + keyp * w.keyp + init
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{cam_from_translation, CamTriple};
    use crate::pipeline::PersonFlags;
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(2000.0, 2000.0, Some(1000.0)).unwrap()
    }

    fn obs_at(points: &[[f64; 2]]) -> Vec<KeypointObs> {
        points.iter().map(|p| KeypointObs::new(*p, 1.0)).collect()
    }

    #[test]
    fn confidence_is_clamped() {
        assert_eq!(KeypointObs::new([0.0, 0.0], 1.7).confidence, 1.0);
        assert_eq!(KeypointObs::new([0.0, 0.0], -0.2).confidence, 0.0);
        assert_eq!(KeypointObs::new([0.0, 0.0], f64::NAN).confidence, 0.0);
    }

    #[test]
    fn reprojection_examples() {
        let i = intr();
        let pts = [[0.0, 0.0, 5.0], [1.0, 0.5, 5.0]];
        let exact = camera::project(&pts, [0.0; 3], &i).unwrap();
        assert_eq!(reproj_loss(&pts, [0.0; 3], &i, 100.0, &obs_at(&exact)).unwrap(), 0.0);

        let mut obs = obs_at(&exact);
        obs[0].position[0] += 3.0;
        obs[0].position[1] += 4.0;
        obs[1].confidence = 0.0;
        let v = reproj_loss(&pts, [0.0; 3], &i, 100.0, &obs).unwrap();
        assert!((v - 2.5e-3).abs() < 1e-15);

        for o in &mut obs {
            o.confidence = 0.0;
        }
        assert_eq!(reproj_loss(&pts, [0.0; 3], &i, 100.0, &obs).unwrap(), 0.0);
    }

    #[test]
    fn reprojection_ignores_zero_confidence_behind_camera() {
        let i = intr();
        let pts = [[0.0, 0.0, 5.0], [0.0, 0.0, -9.0]];
        let mut obs = obs_at(&[[1000.0, 1000.0], [0.0, 0.0]]);
        assert!(reproj_loss(&pts, [0.0; 3], &i, 10.0, &obs).is_err());
        obs[1].confidence = 0.0;
        assert_eq!(reproj_loss(&pts, [0.0; 3], &i, 10.0, &obs).unwrap(), 0.0);
    }

    fn gt_for(template: &SkeletonTemplate, theta: &[f64], beta: &[f64]) -> GroundTruthBundle {
        let posed = template.forward_kinematics(theta, beta).unwrap();
        GroundTruthBundle {
            theta: PoseParams::from_flat(theta).unwrap(),
            beta: ShapeParams(beta.to_vec()),
            translation: [0.0, 0.0, 5.0],
            points: template.skin_points(&posed).unwrap(),
            joints: posed.joints,
            keypoints_2d: vec![[0.0; 2]; template.keypoint_count()],
        }
    }

    #[test]
    fn supervised_examples() {
        let t = SkeletonTemplate::builtin();
        let theta = vec![0.05; 72];
        let beta = vec![0.3; 10];
        let gt = gt_for(&t, &theta, &beta);
        let posed = t.forward_kinematics(&theta, &beta).unwrap();
        let pts = t.skin_points(&posed).unwrap();
        let terms = supervised_param_losses(&theta, &beta, &posed.joints, &pts, 0, &gt).unwrap();
        assert_eq!((terms.smpl, terms.joint, terms.verts), (0.0, 0.0, 0.0));

        let mut off = theta.clone();
        off[40] += 2.0;
        let terms = supervised_param_losses(&off, &beta, &posed.joints, &pts, 0, &gt).unwrap();
        assert!((terms.smpl - 4.0 / 82.0).abs() < 1e-15);

        let shifted: Vec<[f64; 3]> = posed.joints.iter().map(|j| geom::add(*j, [0.4, -1.0, 2.0])).collect();
        let shifted_pts: Vec<[f64; 3]> = pts.iter().map(|j| geom::add(*j, [0.4, -1.0, 2.0])).collect();
        let terms = supervised_param_losses(&theta, &beta, &shifted, &shifted_pts, 0, &gt).unwrap();
        assert!(terms.joint < 1e-28 && terms.verts < 1e-28);

        assert!(supervised_param_losses(&theta[..70], &beta, &posed.joints, &pts, 0, &gt).is_err());
    }

    #[test]
    fn supervised_total_weights() {
        let w = LossWeights::default();
        let zero = SupervisedTerms { smpl: 0.0, joint: 0.0, verts: 0.0 };
        assert_eq!(supervised_total(&zero, 0.0, &w), 0.0);
        let ones = SupervisedTerms { smpl: 1.0, joint: 1.0, verts: 1.0 };
        assert!((supervised_total(&ones, 1.0, &w) - 11.1).abs() < 1e-12);
        let double = LossWeights {
            reproj: 10.0,
            smpl: 10.0,
            joint: 2.0,
            verts: 0.2,
            ..w
        };
        let terms = SupervisedTerms { smpl: 0.3, joint: 0.7, verts: 1.9 };
        assert!((supervised_total(&terms, 0.2, &double) - 2.0 * supervised_total(&terms, 0.2, &w)).abs() < 1e-12);
    }

    fn anchor(person: u64, top: [f64; 3], bottom: [f64; 3]) -> PlaneAnchor<f64> {
        PlaneAnchor { person, top, bottom }
    }

    #[test]
    fn plane_normal_examples() {
        let l = estimate_plane_normal(&[
            anchor(0, [0.0, 1.8, 0.0], [0.0; 3]),
            anchor(1, [3.0, 1.6, 2.0], [3.0, 0.0, 2.0]),
        ])
        .unwrap();
        assert_eq!(l, [0.0, 1.0, 0.0]);
        let l = estimate_plane_normal(&[anchor(0, [1.0, 1.0, 0.0], [0.0; 3])]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((l[0] - h).abs() < 1e-15 && (l[1] - h).abs() < 1e-15 && l[2] == 0.0);
        let err = estimate_plane_normal(&[anchor(0, [0.0, 1.0, 0.0], [0.0; 3]), anchor(7, [1.0; 3], [1.0; 3])]);
        assert_eq!(err.unwrap_err(), Error::DegeneratePerson { person: 7 });
        assert!(estimate_plane_normal::<f64>(&[]).is_err());
    }

    #[test]
    fn crowd_loss_examples() {
        let l = [0.0, 0.0, 1.0];
        assert_eq!(crowd_loss(&[[1.0, 2.0, 3.0]; 4], l), 0.0);
        assert_eq!(crowd_loss(&[[0.0, 0.0, 3.0], [5.0, -2.0, 3.0], [1.0, 9.0, 3.0]], l), 0.0);
        let v = crowd_loss(&[[0.0, 0.0, 5.0], [0.0, 0.0, 7.0]], l);
        assert!((v - 1.0).abs() < 1e-9);
        assert_eq!(crowd_loss(&[[0.0, 0.0, 5.0]], l), 0.0);
    }

    fn dummy_state(id: u64, theta: Vec<f64>, beta: Vec<f64>) -> PersonState<f64> {
        PersonState {
            id,
            theta,
            beta,
            translation: [0.0; 3],
            joints: Vec::new(),
            keypoints: Vec::new(),
        }
    }

    fn estimate(theta: &[f64], beta: &[f64]) -> PersonEstimate {
        PersonEstimate {
            id: 0,
            theta: PoseParams::from_flat(theta).unwrap(),
            beta: ShapeParams(beta.to_vec()),
            cam: CamTriple { f_c: 1.0, t_x: 0.0, t_y: 0.0 },
            translation: [0.0, 0.0, 1.0],
            flags: PersonFlags::default(),
        }
    }

    #[test]
    fn init_loss_examples() {
        let w = LossWeights::default();
        let theta = vec![0.1; 72];
        let beta = vec![0.2; 10];
        let init = estimate(&theta, &beta);
        let same = dummy_state(0, theta.clone(), beta.clone());
        assert_eq!(init_loss(&[same], &[&init], &w, None).unwrap(), 0.0);

        let mut moved = theta.clone();
        moved[5] += 1.0;
        let v = init_loss(&[dummy_state(0, moved, beta.clone())], &[&init], &w, None).unwrap();
        assert!((v - 5.0).abs() < 1e-12);

        let dev_t: Vec<f64> = theta.iter().enumerate().map(|(i, t)| t + 0.01 * i as f64).collect();
        let dev_b: Vec<f64> = beta.iter().map(|b| b - 0.3).collect();
        let s = 3.0;
        let scaled_t: Vec<f64> = theta.iter().zip(&dev_t).map(|(a, b)| a + s * (b - a)).collect();
        let scaled_b: Vec<f64> = beta.iter().zip(&dev_b).map(|(a, b)| a + s * (b - a)).collect();
        let base = init_loss(&[dummy_state(0, dev_t, dev_b.clone())], &[&init], &w, None).unwrap();
        let big = init_loss(&[dummy_state(0, scaled_t, scaled_b)], &[&init], &w, None).unwrap();
        assert!((big - s * s * base).abs() < 1e-9 * big);

        let literal = init_loss(&[dummy_state(0, theta.clone(), dev_b)], &[&init], &w, Some(0.0)).unwrap();
        assert_eq!(literal, 0.0);
    }

    #[test]
    fn crowd_total_examples() {
        let w = LossWeights::default();
        assert_eq!(crowd_total(0.0, 0.0, 0.0, &w), 0.0);
        assert!((crowd_total(1.0, 1.0, 1.0, &w) - 6.001).abs() < 1e-12);
    }

    fn observation_for(template: &SkeletonTemplate, id: u64, t: [f64; 3], i: &Intrinsics) -> (PersonObservation, PersonState<f64>) {
        let theta = vec![0.0; 72];
        let mut block = theta.clone();
        block.extend([0.0; 10]);
        let posed = template.forward_kinematics(&theta, &[0.0; 10]).unwrap();
        let kps = template.keypoints(&posed);
        let uv = camera::project(&kps, t, i).unwrap();
        let bbox = BBox::around(uv.iter().copied(), 0.15).unwrap();
        let cam = cam_from_translation(t, &bbox, i).unwrap();
        block.extend(cam.as_array());
        let state = PersonState::build(template, id, PersonSlice::split(&block), &bbox, i).unwrap();
        let obs = PersonObservation {
            id,
            bbox,
            keypoints: obs_at(&uv),
            score: 1.0,
        };
        (obs, state)
    }

    #[test]
    fn keyp_loss_averages_over_persons() {
        let t = SkeletonTemplate::builtin();
        let i = Intrinsics::new(4000.0, 3000.0, Some(3000.0)).unwrap();
        let mut states = Vec::new();
        let mut dets = Vec::new();
        for n in 0..5 {
            let (o, s) = observation_for(&t, n, [n as f64 - 2.0, 0.5, 8.0 + n as f64], &i);
            states.push(s);
            dets.push(o);
        }
        let refs: Vec<&PersonObservation> = dets.iter().collect();
        let exact = keyp_loss(&states, &refs, &i, false, false).unwrap();
        assert!(exact.value < 1e-20 && exact.masked.is_empty());

        // Person 2 gets a single confident keypoint off by (3, 4) with d = 100.
        let mut off = dets[2].clone();
        off.bbox = BBox::new(off.bbox.center, 100.0, 100.0).unwrap();
        for (k, kp) in off.keypoints.iter_mut().enumerate() {
            if k == 0 {
                kp.position[0] += 3.0;
                kp.position[1] += 4.0;
            } else {
                kp.confidence = 0.0;
            }
        }
        let mut refs2 = refs.clone();
        refs2[2] = &off;
        let v = keyp_loss(&states, &refs2, &i, false, false).unwrap().value;
        assert!((v - 5e-4).abs() < 1e-12, "{v}");

        let mut blind = dets.clone();
        for d in &mut blind {
            for kp in &mut d.keypoints {
                kp.confidence = 0.0;
            }
        }
        let refs3: Vec<&PersonObservation> = blind.iter().collect();
        assert_eq!(keyp_loss(&states, &refs3, &i, false, false).unwrap().value, 0.0);
    }

    #[test]
    fn keyp_loss_masks_persons_behind_camera() {
        let t = SkeletonTemplate::builtin();
        let i = Intrinsics::new(4000.0, 3000.0, Some(3000.0)).unwrap();
        let (o1, s1) = observation_for(&t, 1, [0.0, 0.0, 8.0], &i);
        let (o2, mut s2) = observation_for(&t, 2, [1.0, 0.0, 9.0], &i);
        s2.translation[2] = -3.0;
        let out = keyp_loss(&[s1.clone(), s2.clone()], &[&o1, &o2], &i, false, true).unwrap();
        assert_eq!(out.masked, vec![1]);
        let err = keyp_loss(&[s1, s2], &[&o1, &o2], &i, false, false).unwrap_err();
        assert!(matches!(err, Error::Projection { person: Some(2), .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn crowd_loss_ignores_in_plane_translation(
            roots in proptest::collection::vec(proptest::array::uniform3(-10.0..10.0f64), 2..20),
            shift in proptest::array::uniform3(-20.0..20.0f64),
            raw_l in proptest::array::uniform3(-1.0..1.0f64),
        ) {
            prop_assume!(geom::norm(raw_l) > 0.1);
            let l = raw_l;
            // Remove the component of the shift along l.
            let along = geom::dot(shift, l) / geom::dot(l, l);
            let in_plane = geom::sub(shift, geom::scale(l, along));
            let moved: Vec<[f64; 3]> = roots.iter().map(|r| geom::add(*r, in_plane)).collect();
            let a = crowd_loss(&roots, l);
            let b = crowd_loss(&moved, l);
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
        }

        #[test]
        fn crowd_loss_scales_with_normal(
            roots in proptest::collection::vec(proptest::array::uniform3(-10.0..10.0f64), 2..20),
            s in 0.1..10.0f64,
        ) {
            let l = [0.2, 0.9, -0.3];
            let a = crowd_loss(&roots, l);
            let b = crowd_loss(&roots, geom::scale(l, s));
            prop_assume!(a > 1e-3);
            prop_assert!((b - s * a).abs() < 1e-6 * (1.0 + s));
        }

        #[test]
        fn reprojection_ignores_relabelled_zero_confidence(
            junk in proptest::array::uniform2(-1e4..1e4f64),
        ) {
            let i = intr();
            let pts = [[0.0, 0.0, 5.0], [1.0, 0.5, 5.0], [0.3, -0.2, 4.0]];
            let uv = camera::project(&pts, [0.0; 3], &i).unwrap();
            let mut obs = obs_at(&uv);
            obs[0].position[0] += 7.0;
            let base = reproj_loss(&pts, [0.0; 3], &i, 50.0, &obs).unwrap();
            obs[2] = KeypointObs::new(junk, 0.0);
            let swapped = reproj_loss(&pts, [0.0; 3], &i, 50.0, &obs).unwrap();
            prop_assert!(swapped >= 0.0);
            // Dropping a perfect keypoint changes the weighted mean, so compare
            // against an observation set where it was absent from the start.
            let ref_obs = [obs[0], obs[1]];
            let reference = reproj_loss(&pts[..2], [0.0; 3], &i, 50.0, &ref_obs).unwrap();
            prop_assert!((swapped - reference).abs() < 1e-15);
            prop_assert!(base <= swapped);
        }
    }
}
