//! Synthetic crowds standing on a known plane, with controllable noise, and
//! perturbations that mimic depth-ambiguous per-person estimates.
//!
//! Randomness is split per person: person `i` draws from the ChaCha8 stream
//! `i` of the scene seed (perturbations use the stream of the person id), so
//! adding people never changes anyone else's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{PoseParams, ShapeParams, SkeletonTemplate};
use crate::camera::{self, BBox, CamTriple, Intrinsics};
use crate::geom::{self, Mat3};
use crate::losses::{GroundTruthBundle, KeypointObs};
use crate::pipeline::{
    PersonEstimate, PersonFlags, PersonGroundTruth, PersonObservation, Plane, SceneGroundTruth,
    SceneObservation,
};
use crate::{Error, Result};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
pub const BOX_PADDING: f64 = 0.15;
/// Minimum depth kept by [`perturb_estimates`].
pub const MIN_DEPTH: f64 = 0.1;

/// Ground plane seen by a camera `height` metres above it, pitched down by
/// `tilt` radians. The normal points up, away from the ground.
pub fn tilted_ground(height: f64, tilt: f64) -> Plane {
    Plane {
        normal: [0.0, -tilt.cos(), -tilt.sin()],
        offset: -height,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub plane: Plane,
    pub width: f64,
    pub height: f64,
    /// `None` uses the image diagonal.
    pub focal: Option<f64>,
    pub persons: usize,
    /// Std of non-root joint rotations, radians.
    pub pose_sigma: f64,
    pub shape_sigma: f64,
    /// Keypoint noise, pixels.
    pub keypoint_sigma: f64,
    /// Placement area on the plane (across, along the view), metres.
    pub extent: [f64; 2],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            plane: tilted_ground(6.0, 25f64.to_radians()),
            width: 4000.0,
            height: 3000.0,
            focal: None,
            persons: 50,
            pose_sigma: 0.1,
            shape_sigma: 0.5,
            keypoint_sigma: 0.0,
            extent: [8.0, 8.0],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = geom::norm(self.plane.normal);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("plane normal has length {n}, expected 1")));
        }
        if self.persons == 0 {
            return Err(Error::Config("scene needs at least one person".into()));
        }
        let sigmas = [self.pose_sigma, self.shape_sigma, self.keypoint_sigma, self.extent[0], self.extent[1]];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise levels and extent must be >= 0".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.width, self.height, self.focal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    /// Depth jitter σ_z, metres.
    pub depth_sigma: f64,
    pub pose_sigma: f64,
    pub shape_sigma: f64,
    pub seed: u64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative")
}

/// In-plane unit vectors: `across` (image right) and `away` (from camera).
fn plane_basis(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let x = [1.0, 0.0, 0.0];
    let mut across = geom::sub(x, geom::scale(n, geom::dot(x, n)));
    if geom::norm(across) < 1e-6 {
        let z = [0.0, 0.0, 1.0];
        across = geom::sub(z, geom::scale(n, geom::dot(z, n)));
    }
    let across = geom::scale(across, 1.0 / geom::norm(across));
    (across, geom::cross(n, across))
}

/// Root orientation standing on the plane, facing the camera at `yaw = 0`.
fn standing_root(n: [f64; 3], away: [f64; 3], yaw: f64) -> [f64; 3] {
    let forward = geom::scale(away, -1.0);
    let left = geom::cross(n, forward);
    let align: Mat3<f64> = [
        [left[0], n[0], forward[0]],
        [left[1], n[1], forward[1]],
        [left[2], n[2], forward[2]],
    ];
    let turn = geom::rodrigues([0.0, yaw, 0.0]);
    geom::axis_angle_of(&geom::mat_mul(&align, &turn))
}

struct Placed {
    obs: PersonObservation,
    gt: GroundTruthBundle,
}

fn place_person(
    template: &SkeletonTemplate,
    spec: &SceneSpec,
    intr: &Intrinsics,
    index: usize,
) -> Result<Placed> {
    let mut rng = rng_for(spec.seed, index as u64);
    let n = spec.plane.normal;
    let (across, away) = plane_basis(n);
    if n[2].abs() < 1e-9 || spec.plane.offset / n[2] <= 0.0 {
        return Err(Error::Config("plane is not visible in front of the camera".into()));
    }
    let centre = [0.0, 0.0, spec.plane.offset / n[2]];
    let pose_noise = gaussian(spec.pose_sigma);
    let shape_noise = gaussian(spec.shape_sigma);
    let k = template.joint_count();

    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let mut theta = vec![0.0; 3 * k];
        theta[..3].copy_from_slice(&standing_root(n, away, yaw));
        for v in &mut theta[3..] {
            *v = pose_noise.sample(&mut rng);
        }
        let beta: Vec<f64> = (0..template.shape_dim()).map(|_| shape_noise.sample(&mut rng)).collect();
        let a = rng.random_range(-0.5..=0.5) * spec.extent[0];
        let b = rng.random_range(-0.5..=0.5) * spec.extent[1];
        let ground = geom::add(centre, geom::add(geom::scale(across, a), geom::scale(away, b)));

        let posed = template.forward_kinematics(&theta, &beta)?;
        let (_, ankle_mid) = template.top_and_bottom(&posed.joints);
        let t = geom::sub(ground, ankle_mid);
        let points = template.skin_points(&posed)?;
        if points.iter().any(|p| p[2] + t[2] <= MIN_DEPTH) {
            continue;
        }
        let kps = template.keypoints(&posed);
        let clean = camera::project(&kps, t, intr)?;
        let inside = clean
            .iter()
            .all(|uv| (0.0..=intr.width).contains(&uv[0]) && (0.0..=intr.height).contains(&uv[1]));
        if !inside {
            continue;
        }
        let kp_noise = gaussian(spec.keypoint_sigma);
        let noisy: Vec<[f64; 2]> = clean
            .iter()
            .map(|uv| {
                if spec.keypoint_sigma > 0.0 {
                    [uv[0] + kp_noise.sample(&mut rng), uv[1] + kp_noise.sample(&mut rng)]
                } else {
                    *uv
                }
            })
            .collect();
        let score = rng.random_range(0.5..=1.0);
        let bbox = BBox::around(noisy.iter().copied(), BOX_PADDING)?;
        let obs = PersonObservation {
            id: index as u64,
            bbox,
            keypoints: noisy.iter().map(|p| KeypointObs::new(*p, 1.0)).collect(),
            score,
        };
        let gt = GroundTruthBundle {
            theta: PoseParams::from_flat(&theta)?,
            beta: ShapeParams(beta),
            translation: t,
            joints: posed.joints,
            points,
            keypoints_2d: clean,
        };
        return Ok(Placed { obs, gt });
    }
    Err(Error::Domain(format!(
        "person {index}: no visible placement after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// Generates a scene with full ground truth. Ankle midpoints lie exactly on
/// the plane.
pub fn generate_scene(template: &SkeletonTemplate, spec: &SceneSpec) -> Result<SceneObservation> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    let mut persons = Vec::with_capacity(spec.persons);
    let mut truths = Vec::with_capacity(spec.persons);
    for i in 0..spec.persons {
        let placed = place_person(template, spec, &intr, i)?;
        truths.push(PersonGroundTruth { id: placed.obs.id, bundle: placed.gt });
        persons.push(placed.obs);
    }
    Ok(SceneObservation {
        intrinsics: intr,
        persons,
        ground_truth: Some(SceneGroundTruth {
            persons: truths,
            plane: Some(spec.plane),
        }),
    })
}

/// Ground-truth parameters as estimates, cameras derived from the boxes.
pub fn ground_truth_estimates(scene: &SceneObservation) -> Result<Vec<PersonEstimate>> {
    let gt = scene
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Config("scene has no ground truth".into()))?;
    scene
        .persons
        .iter()
        .map(|p| {
            let b = gt
                .person(p.id)
                .ok_or_else(|| Error::Config(format!("no ground truth for person {}", p.id)))?;
            let cam = camera::cam_from_translation(b.translation, &p.bbox, &scene.intrinsics)?;
            Ok(PersonEstimate {
                id: p.id,
                theta: b.theta.clone(),
                beta: b.beta.clone(),
                cam,
                translation: b.translation,
                flags: PersonFlags::default(),
            })
        })
        .collect()
}

/// Adds Gaussian jitter to depth, pose and shape.
///
/// Depth jitter changes `f_c` (keeping `t_x`, `t_y`) so the translation stays
/// consistent with the crop camera; the person slides along the ray through
/// the box. Depths below [`MIN_DEPTH`] are clamped and flagged.
pub fn perturb_estimates(
    estimates: &[PersonEstimate],
    persons: &[PersonObservation],
    intr: &Intrinsics,
    spec: &PerturbSpec,
) -> Result<Vec<PersonEstimate>> {
    if estimates.len() != persons.len() {
        return Err(Error::Config("one observation per estimate required".into()));
    }
    let sigmas = [spec.depth_sigma, spec.pose_sigma, spec.shape_sigma];
    if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Config("perturbation sigmas must be >= 0".into()));
    }
    estimates
        .iter()
        .zip(persons)
        .map(|(e, obs)| {
            let mut rng = rng_for(spec.seed, e.id);
            let mut out = e.clone();
            let dz = gaussian(spec.depth_sigma).sample(&mut rng);
            if spec.depth_sigma > 0.0 {
                let mut z = e.translation[2] + dz;
                if z < MIN_DEPTH {
                    z = MIN_DEPTH;
                    out.flags.depth_clamped = true;
                }
                out.cam = CamTriple {
                    f_c: 2.0 * intr.focal / (obs.bbox.size() * z),
                    ..e.cam
                };
                out.translation = camera::translation_from_cam(&out.cam, &obs.bbox, intr)?;
            }
            let pose = gaussian(spec.pose_sigma);
            let shape = gaussian(spec.shape_sigma);
            if spec.pose_sigma > 0.0 {
                for w in &mut out.theta.0 {
                    for v in w.iter_mut() {
                        *v += pose.sample(&mut rng);
                    }
                }
            }
            if spec.shape_sigma > 0.0 {
                for b in &mut out.beta.0 {
                    *b += shape.sample(&mut rng);
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            persons: 6,
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let t = SkeletonTemplate::builtin();
        let a = generate_scene(&t, &small_spec()).unwrap();
        let b = generate_scene(&t, &small_spec()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let other = generate_scene(&t, &SceneSpec { seed: 12, ..small_spec() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn adding_people_keeps_earlier_draws() {
        let t = SkeletonTemplate::builtin();
        let a = generate_scene(&t, &small_spec()).unwrap();
        let b = generate_scene(&t, &SceneSpec { persons: 9, ..small_spec() }).unwrap();
        assert_eq!(a.persons[..], b.persons[..6]);
    }

    #[test]
    fn noiseless_keypoints_are_exact_projections() {
        let t = SkeletonTemplate::builtin();
        let s = generate_scene(&t, &small_spec()).unwrap();
        let gt = s.ground_truth.as_ref().unwrap();
        for p in &s.persons {
            let b = gt.person(p.id).unwrap();
            let posed = t.forward_kinematics(&b.theta.flat(), &b.beta.0).unwrap();
            let uv = camera::project(&t.keypoints(&posed), b.translation, &s.intrinsics).unwrap();
            for (k, o) in uv.iter().zip(&p.keypoints) {
                assert_eq!(*k, o.position);
            }
        }
    }

    #[test]
    fn ankles_on_plane() {
        let t = SkeletonTemplate::builtin();
        let s = generate_scene(&t, &small_spec()).unwrap();
        let gt = s.ground_truth.as_ref().unwrap();
        let plane = gt.plane.unwrap();
        for p in &gt.persons {
            let (_, mid) = t.top_and_bottom(&p.bundle.joints);
            let world = geom::add(mid, p.bundle.translation);
            assert!(plane.signed_distance(world).abs() < 1e-9);
            assert!(p.bundle.translation[2] > 0.0);
        }
    }

    #[test]
    fn invisible_plane_is_rejected() {
        let t = SkeletonTemplate::builtin();
        let spec = SceneSpec {
            plane: Plane { normal: [0.0, -1.0, 0.0], offset: -2.0 },
            ..small_spec()
        };
        assert!(generate_scene(&t, &spec).is_err());
        let spec = SceneSpec {
            plane: Plane { normal: [0.0, 2.0, 0.0], offset: 1.0 },
            ..small_spec()
        };
        assert!(matches!(generate_scene(&t, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let t = SkeletonTemplate::builtin();
        let s = generate_scene(&t, &small_spec()).unwrap();
        let gt = ground_truth_estimates(&s).unwrap();
        let out = perturb_estimates(&gt, &s.persons, &s.intrinsics, &PerturbSpec::default()).unwrap();
        assert_eq!(out, gt);
    }

    #[test]
    fn depth_jitter_statistics_and_consistency() {
        let t = SkeletonTemplate::builtin();
        let s = generate_scene(&t, &SceneSpec { persons: 50, ..small_spec() }).unwrap();
        let gt = ground_truth_estimates(&s).unwrap();
        let spec = PerturbSpec { depth_sigma: 0.5, seed: 3, ..PerturbSpec::default() };
        let out = perturb_estimates(&gt, &s.persons, &s.intrinsics, &spec).unwrap();
        let errs: Vec<f64> = out.iter().zip(&gt).map(|(a, b)| a.translation[2] - b.translation[2]).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64).sqrt();
        assert!((0.35..=0.65).contains(&sd), "{sd}");
        for (e, o) in out.iter().zip(&s.persons) {
            let t2 = camera::translation_from_cam(&e.cam, &o.bbox, &s.intrinsics).unwrap();
            assert_eq!(t2, e.translation);
        }
    }

    #[test]
    fn huge_jitter_is_clamped() {
        let t = SkeletonTemplate::builtin();
        let s = generate_scene(&t, &small_spec()).unwrap();
        let gt = ground_truth_estimates(&s).unwrap();
        let spec = PerturbSpec { depth_sigma: 1e4, seed: 1, ..PerturbSpec::default() };
        let out = perturb_estimates(&gt, &s.persons, &s.intrinsics, &spec).unwrap();
        assert!(out.iter().any(|e| e.flags.depth_clamped));
        assert!(out.iter().all(|e| e.translation[2] >= MIN_DEPTH - 1e-12));
    }
}
