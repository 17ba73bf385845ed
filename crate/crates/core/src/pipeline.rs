//! Two-stage reconstruction: per-person initialization, then crowd-constrained
//! joint refinement of everyone in the scene.
//!
//! Refinement optimizes body parameters directly. Each batch's parameters are
//! expressed as `p = p_start + gain · z` and AdamW runs on the latent `z`; the
//! gain plays the role of a backbone's output sensitivity so that the small
//! published learning rate can still move depths by decimetres.

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::body_model::{PoseParams, ShapeParams, SkeletonTemplate};
use crate::camera::{self, BBox, CamTriple, Intrinsics};
use crate::diff::{self, sum, Objective, ParamVector, PersonSlice, Real, PERSON_PARAMS};
use crate::geom::{self, Vec3};
use crate::losses::{self, GroundTruthBundle, KeypointObs, LossWeights, PersonState, PlaneAnchor};
use crate::optim::{self, AdamWConfig, StepRecord};
use crate::{Error, Result};

/// Persons need this many confident keypoints to be fitted and to take part
/// in the plane estimate.
pub const MIN_CONFIDENT_KEYPOINTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonObservation {
    pub id: u64,
    pub bbox: BBox,
    pub keypoints: Vec<KeypointObs>,
    pub score: f64,
}

impl PersonObservation {
    pub fn confident_keypoints(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_confident()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        geom::dot(self.normal, p) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonGroundTruth {
    pub id: u64,
    pub bundle: GroundTruthBundle,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGroundTruth {
    pub persons: Vec<PersonGroundTruth>,
    pub plane: Option<Plane>,
}

impl SceneGroundTruth {
    pub fn person(&self, id: u64) -> Option<&GroundTruthBundle> {
        self.persons.iter().find(|p| p.id == id).map(|p| &p.bundle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    pub intrinsics: Intrinsics,
    pub persons: Vec<PersonObservation>,
    pub ground_truth: Option<SceneGroundTruth>,
}

impl SceneObservation {
    pub fn validate(&self, template: &SkeletonTemplate) -> Result<()> {
        let mut ids = BTreeSet::new();
        for p in &self.persons {
            if !ids.insert(p.id) {
                return Err(Error::Config(format!("duplicate person id {}", p.id)));
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Config(format!("person {}: score {} outside [0, 1]", p.id, p.score)));
            }
            if p.keypoints.len() != template.keypoint_count() {
                return Err(Error::Config(format!(
                    "person {}: {} keypoints, layout `{}` has {}",
                    p.id,
                    p.keypoints.len(),
                    template.role_map.layout,
                    template.keypoint_count()
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            for p in &gt.persons {
                p.bundle.check_against(template).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("person {}: {m}", p.id)),
                    other => other,
                })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonFlags {
    /// Fewer than [`MIN_CONFIDENT_KEYPOINTS`] confident keypoints.
    pub low_confidence: bool,
    pub degenerate: bool,
    /// Residual dropped at least once for a keypoint behind the camera.
    pub depth_masked: bool,
    /// Depth jitter was clamped to the minimum depth.
    pub depth_clamped: bool,
    /// Some |βᵢ| exceeded the soft bound after fitting.
    pub shape_out_of_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonEstimate {
    pub id: u64,
    pub theta: PoseParams,
    pub beta: ShapeParams,
    pub cam: CamTriple,
    pub translation: [f64; 3],
    pub flags: PersonFlags,
}

impl PersonEstimate {
    pub fn from_params(
        id: u64,
        block: PersonSlice<'_, f64>,
        bbox: &BBox,
        intr: &Intrinsics,
        flags: PersonFlags,
    ) -> Result<Self> {
        let cam = CamTriple {
            f_c: block.cam[0],
            t_x: block.cam[1],
            t_y: block.cam[2],
        };
        let translation = camera::translation_from_cam(&cam, bbox, intr).map_err(|e| e.for_person(id))?;
        let mut theta = PoseParams::from_flat(block.theta)?;
        theta.canonicalize();
        let beta = ShapeParams(block.beta.to_vec());
        let flags = PersonFlags {
            shape_out_of_bound: !beta.within_soft_bound(),
            ..flags
        };
        if !theta.is_finite() || !beta.0.iter().all(|b| b.is_finite()) {
            return Err(Error::Eval { person: Some(id), term: "parameters" });
        }
        Ok(Self { id, theta, beta, cam, translation, flags })
    }

    pub fn push_params(&self, out: &mut ParamVector) -> Result<()> {
        out.push_person(&self.theta.flat(), &self.beta.0, &self.cam)
    }

    /// Root-local joints and skinned points.
    pub fn pose(&self, template: &SkeletonTemplate) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
        let posed = template.forward_kinematics(&self.theta.flat(), &self.beta.0)?;
        let points = template.skin_points(&posed)?;
        Ok((posed.joints, points))
    }

    pub fn world_joints(&self, template: &SkeletonTemplate) -> Result<Vec<[f64; 3]>> {
        let (joints, _) = self.pose(template)?;
        Ok(joints.into_iter().map(|j| geom::add(j, self.translation)).collect())
    }

    pub fn world_keypoints(&self, template: &SkeletonTemplate) -> Result<Vec<[f64; 3]>> {
        let posed = template.forward_kinematics(&self.theta.flat(), &self.beta.0)?;
        Ok(template
            .keypoints(&posed)
            .into_iter()
            .map(|k| geom::add(k, self.translation))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub crowd: f64,
    pub keyp: f64,
    pub init: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub batch: usize,
    pub step: usize,
    pub lr: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEstimate {
    pub persons: Vec<PersonEstimate>,
    /// Mean head-minus-ankle direction, not renormalized.
    pub normal: Option<[f64; 3]>,
    pub losses: LossBreakdown,
    pub iterations: Vec<IterationRecord>,
    pub crowd_stage: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitFitConfig {
    pub iters: usize,
    pub lr: f64,
    /// Prior toward zero on non-root joint rotations.
    pub rho_pose: f64,
    /// Prior toward zero shape.
    pub rho_shape: f64,
    /// Nominal standing height used to seed depth.
    pub person_height: f64,
    /// Facing directions tried, evenly spaced about the vertical.
    pub yaw_starts: usize,
}

impl Default for InitFitConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            lr: 0.05,
            rho_pose: 0.01,
            rho_shape: 0.1,
            person_height: 1.7,
            yaw_starts: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedFitConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for SupervisedFitConfig {
    fn default() -> Self {
        Self { iters: 500, lr: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalMode {
    /// Recomputed every evaluation and differentiated through.
    Differentiate,
    /// Recomputed every `n` steps from the current iterate, held constant.
    FreezeEvery(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrowdConfig {
    pub iters: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub batch_size: usize,
    /// Latent-to-parameter gain of the refinement reparameterization.
    pub param_gain: f64,
    pub normal_mode: NormalMode,
    /// Estimate the normal and spread from the current batch only.
    pub per_batch_normal: bool,
    /// Keep keypoint residuals in pixels instead of box-normalized units.
    pub raw_pixel_keyp: bool,
    /// Multiply the shape anchor by the crowd loss, as literally printed.
    pub literal_init: bool,
}

impl Default for CrowdConfig {
    fn default() -> Self {
        Self {
            iters: 260,
            lr: 1e-5,
            lr_min: 0.0,
            weight_decay: 0.0,
            betas: [0.9, 0.999],
            batch_size: 50,
            param_gain: 1000.0,
            normal_mode: NormalMode::Differentiate,
            per_batch_normal: false,
            raw_pixel_keyp: false,
            literal_init: false,
        }
    }
}

impl CrowdConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: 1e-8,
            weight_decay: self.weight_decay,
            lr_max: self.lr,
            lr_min: self.lr_min,
            total_steps: self.iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub weights: LossWeights,
    pub init: InitFitConfig,
    pub supervised: SupervisedFitConfig,
    pub crowd: CrowdConfig,
    pub threshold: f64,
    pub no_crowd: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            init: InitFitConfig::default(),
            supervised: SupervisedFitConfig::default(),
            crowd: CrowdConfig::default(),
            threshold: 0.23,
            no_crowd: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.crowd.adamw().validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.crowd.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.crowd.param_gain > 0.0) {
            return Err(Error::Config("param_gain must be positive".into()));
        }
        if self.crowd.normal_mode == NormalMode::FreezeEvery(0) {
            return Err(Error::Config("normal refresh interval must be at least 1".into()));
        }
        if !(self.init.lr > 0.0 && self.supervised.lr > 0.0 && self.init.person_height > 0.0) {
            return Err(Error::Config("stage-1 learning rates and height must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps persons whose detection score is at least `threshold`.
pub fn filter_detections(scene: &SceneObservation, threshold: f64) -> SceneObservation {
    SceneObservation {
        intrinsics: scene.intrinsics,
        persons: scene
            .persons
            .iter()
            .filter(|p| p.score >= threshold)
            .cloned()
            .collect(),
        ground_truth: scene.ground_truth.clone(),
    }
}

/// Root orientation of an upright person facing the camera, turned by `yaw`
/// about their vertical axis (camera frame: x right, y down, z forward).
pub fn upright_root(yaw: f64) -> [f64; 3] {
    let flip = geom::rodrigues([std::f64::consts::PI, 0.0, 0.0]);
    let turn = geom::rodrigues([0.0, yaw, 0.0]);
    geom::axis_angle_of(&geom::mat_mul(&flip, &turn))
}

/// Translation seeded from box height, assuming a standing person of
/// `height` metres whose root projects to the box centre.
pub fn seed_translation(bbox: &BBox, intr: &Intrinsics, height: f64) -> [f64; 3] {
    let z = intr.focal * height / bbox.height;
    let [cx, cy] = [bbox.center[0] - intr.principal[0], bbox.center[1] - intr.principal[1]];
    [cx * z / intr.focal, cy * z / intr.focal, z]
}

fn rest_estimate(
    template: &SkeletonTemplate,
    person: &PersonObservation,
    intr: &Intrinsics,
    config: &InitFitConfig,
    yaw: f64,
) -> Result<ParamVector> {
    let mut theta = vec![0.0; 3 * template.joint_count()];
    theta[..3].copy_from_slice(&upright_root(yaw));
    let t = seed_translation(&person.bbox, intr, config.person_height);
    let cam = camera::cam_from_translation(t, &person.bbox, intr).map_err(|e| e.for_person(person.id))?;
    let mut p = ParamVector::with_persons(1);
    p.push_person(&theta, &vec![0.0; template.shape_dim()], &cam)?;
    Ok(p)
}

/// Stage-1 objective: `λ1·L_reproj + ρθ‖θ_{1:}‖² + ρβ‖β‖²`.
pub struct InitFitObjective<'a> {
    pub template: &'a SkeletonTemplate,
    pub person: &'a PersonObservation,
    pub intr: &'a Intrinsics,
    pub reproj_weight: f64,
    pub rho_pose: f64,
    pub rho_shape: f64,
}

impl Objective for InitFitObjective<'_> {
    fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
        let id = self.person.id;
        let block = PersonSlice::split(x);
        let state = PersonState::build(self.template, id, block, &self.person.bbox, self.intr)?;
        let reproj = losses::reproj_loss(
            &state.keypoints,
            state.translation,
            self.intr,
            self.person.bbox.size(),
            &self.person.keypoints,
        )
        .map_err(|e| e.for_person(id))?;
        let reproj = diff::ensure_finite(reproj, Some(id), "reproj")?;
        let pose_prior = sum(block.theta[3..].iter().map(|v| v.square()));
        let shape_prior = sum(block.beta.iter().map(|v| v.square()));
        Ok(reproj * self.reproj_weight + pose_prior * self.rho_pose + shape_prior * self.rho_shape)
    }
}

fn run_adam<O: Objective>(objective: &O, x0: &[f64], iters: usize, lr: f64) -> Result<optim::Minimization> {
    let config = AdamWConfig {
        lr_max: lr,
        total_steps: iters,
        ..AdamWConfig::default()
    };
    optim::minimize(
        |x| diff::gradient(objective, x).map(|r| (r.value, r.gradient)),
        x0,
        &config,
        |_| {},
    )
}

/// Fits one person to their 2D keypoints (the per-person initializer).
pub fn init_fit(
    template: &SkeletonTemplate,
    person: &PersonObservation,
    intr: &Intrinsics,
    weights: &LossWeights,
    config: &InitFitConfig,
) -> Result<PersonEstimate> {
    if person.confident_keypoints() < MIN_CONFIDENT_KEYPOINTS {
        let p = rest_estimate(template, person, intr, config, 0.0)?;
        let flags = PersonFlags { low_confidence: true, ..PersonFlags::default() };
        return PersonEstimate::from_params(person.id, p.person(0), &person.bbox, intr, flags);
    }
    let objective = InitFitObjective {
        template,
        person,
        intr,
        reproj_weight: weights.reproj,
        rho_pose: config.rho_pose,
        rho_shape: config.rho_shape,
    };
    let starts = config.yaw_starts.max(1);
    let mut best: Option<optim::Minimization> = None;
    for k in 0..starts {
        let yaw = std::f64::consts::TAU * k as f64 / starts as f64;
        let x0 = rest_estimate(template, person, intr, config, yaw)?;
        let run = run_adam(&objective, x0.as_slice(), config.iters, config.lr)?;
        if let Some(e) = run.error {
            return Err(e.for_person(person.id));
        }
        if best.as_ref().map_or(true, |b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    PersonEstimate::from_params(
        person.id,
        PersonSlice::split(&best.x),
        &person.bbox,
        intr,
        PersonFlags::default(),
    )
}

/// Full supervised objective for one person.
pub struct SupervisedObjective<'a> {
    pub template: &'a SkeletonTemplate,
    pub person: &'a PersonObservation,
    pub gt: &'a GroundTruthBundle,
    pub intr: &'a Intrinsics,
    pub weights: &'a LossWeights,
}

impl Objective for SupervisedObjective<'_> {
    fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
        let id = self.person.id;
        let block = PersonSlice::split(x);
        let posed = self.template.forward_kinematics(block.theta, block.beta)?;
        let points = self.template.skin_points(&posed)?;
        let keypoints = self.template.keypoints(&posed);
        let t = camera::lift_translation([block.cam[0], block.cam[1], block.cam[2]], &self.person.bbox, self.intr)
            .map_err(|e| e.for_person(id))?;
        let reproj = losses::reproj_loss(&keypoints, t, self.intr, self.person.bbox.size(), &self.person.keypoints)
            .map_err(|e| e.for_person(id))?;
        let terms = losses::supervised_param_losses(
            block.theta,
            block.beta,
            &posed.joints,
            &points,
            self.template.role_map.root,
            self.gt,
        )?;
        let total = losses::supervised_total(&terms, reproj, self.weights);
        diff::ensure_finite(total, Some(id), "supervised")
    }
}

/// Minimizes the supervised objective from `start`.
pub fn supervised_fit(
    template: &SkeletonTemplate,
    person: &PersonObservation,
    gt: &GroundTruthBundle,
    intr: &Intrinsics,
    start: &PersonEstimate,
    weights: &LossWeights,
    config: &SupervisedFitConfig,
) -> Result<PersonEstimate> {
    gt.check_against(template)?;
    let objective = SupervisedObjective { template, person, gt, intr, weights };
    let mut x0 = ParamVector::with_persons(1);
    start.push_params(&mut x0)?;
    let run = run_adam(&objective, x0.as_slice(), config.iters, config.lr)?;
    if let Some(e) = run.error {
        return Err(e.for_person(person.id));
    }
    PersonEstimate::from_params(person.id, PersonSlice::split(&run.x), &person.bbox, intr, start.flags)
}

/// Crowd-stage objective over one batch of persons.
///
/// Batch parameters are `anchor + gain · z` for the optimized vector `z`.
/// Persons outside the batch enter the plane normal and the root spread as
/// constants.
pub struct CrowdObjective<'a> {
    template: &'a SkeletonTemplate,
    intr: &'a Intrinsics,
    weights: &'a LossWeights,
    detections: Vec<&'a PersonObservation>,
    inits: Vec<&'a PersonEstimate>,
    /// Which batch members take part in the plane terms.
    participates: Vec<bool>,
    fixed_anchors: Vec<PlaneAnchor<f64>>,
    fixed_roots: Vec<Vec3<f64>>,
    anchor: Vec<f64>,
    gain: f64,
    raw_pixel_keyp: bool,
    literal_init: bool,
    mask_depth: bool,
    normal_mode: NormalMode,
    evaluations: Cell<usize>,
    frozen_normal: Cell<Option<[f64; 3]>>,
    masked: RefCell<BTreeSet<u64>>,
}

/// Per-term values of the crowd objective at one point.
#[derive(Debug, Clone, Copy)]
pub struct CrowdTerms<R> {
    pub crowd: R,
    pub keyp: R,
    pub init: R,
    pub total: R,
    pub normal: Option<Vec3<R>>,
}

impl<'a> CrowdObjective<'a> {
    /// Objective over the given persons with parameters taken directly
    /// (anchor 0, gain 1) and no persons held fixed.
    pub fn new(
        template: &'a SkeletonTemplate,
        intr: &'a Intrinsics,
        weights: &'a LossWeights,
        detections: Vec<&'a PersonObservation>,
        inits: Vec<&'a PersonEstimate>,
    ) -> Result<Self> {
        if detections.len() != inits.len() {
            return Err(Error::Config("one init per detection required".into()));
        }
        let participates = detections
            .iter()
            .map(|d| d.confident_keypoints() >= MIN_CONFIDENT_KEYPOINTS)
            .collect();
        let n = detections.len();
        Ok(Self {
            template,
            intr,
            weights,
            detections,
            inits,
            participates,
            fixed_anchors: Vec::new(),
            fixed_roots: Vec::new(),
            anchor: vec![0.0; n * PERSON_PARAMS],
            gain: 1.0,
            raw_pixel_keyp: false,
            literal_init: false,
            mask_depth: false,
            normal_mode: NormalMode::Differentiate,
            evaluations: Cell::new(0),
            frozen_normal: Cell::new(None),
            masked: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn with_latent(mut self, anchor: Vec<f64>, gain: f64) -> Self {
        assert_eq!(anchor.len(), self.anchor.len(), "anchor length");
        self.anchor = anchor;
        self.gain = gain;
        self
    }

    pub fn with_fixed(mut self, anchors: Vec<PlaneAnchor<f64>>, roots: Vec<Vec3<f64>>) -> Self {
        self.fixed_anchors = anchors;
        self.fixed_roots = roots;
        self
    }

    pub fn with_options(mut self, config: &CrowdConfig, mask_depth: bool) -> Self {
        self.raw_pixel_keyp = config.raw_pixel_keyp;
        self.literal_init = config.literal_init;
        self.normal_mode = config.normal_mode;
        self.mask_depth = mask_depth;
        self
    }

    pub fn masked_persons(&self) -> BTreeSet<u64> {
        self.masked.borrow().clone()
    }

    fn states<R: Real>(&self, z: &[R]) -> Result<Vec<PersonState<R>>> {
        if z.len() != self.anchor.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.anchor.len(),
                z.len()
            )));
        }
        let params: Vec<R> = z
            .iter()
            .zip(&self.anchor)
            .map(|(v, a)| *v * self.gain + *a)
            .collect();
        params
            .chunks_exact(PERSON_PARAMS)
            .zip(&self.detections)
            .map(|(block, det)| {
                PersonState::build(self.template, det.id, PersonSlice::split(block), &det.bbox, self.intr)
            })
            .collect()
    }

    /// Evaluates every term.
    pub fn terms<R: Real>(&self, z: &[R]) -> Result<CrowdTerms<R>> {
        let states = self.states(z)?;
        let mut anchors: Vec<PlaneAnchor<R>> = Vec::new();
        let mut roots: Vec<Vec3<R>> = Vec::new();
        for (s, takes_part) in states.iter().zip(&self.participates) {
            if *takes_part {
                anchors.push(s.plane_anchor(self.template));
                roots.push(s.root(self.template));
            }
        }
        for a in &self.fixed_anchors {
            anchors.push(PlaneAnchor {
                person: a.person,
                top: geom::lift(a.top),
                bottom: geom::lift(a.bottom),
            });
        }
        roots.extend(self.fixed_roots.iter().map(|r| geom::lift::<R>(*r)));

        let normal = if anchors.is_empty() {
            None
        } else {
            Some(match self.normal_mode {
                NormalMode::Differentiate => losses::estimate_plane_normal(&anchors)?,
                NormalMode::FreezeEvery(n) => {
                    let count = self.evaluations.get();
                    let cached = self.frozen_normal.get();
                    let l = match cached {
                        Some(l) if count % n != 0 => l,
                        _ => {
                            let plain: Vec<PlaneAnchor<f64>> = anchors
                                .iter()
                                .map(|a| PlaneAnchor {
                                    person: a.person,
                                    top: geom::values(&a.top),
                                    bottom: geom::values(&a.bottom),
                                })
                                .collect();
                            let l = losses::estimate_plane_normal(&plain)?;
                            self.frozen_normal.set(Some(l));
                            l
                        }
                    };
                    geom::lift(l)
                }
            })
        };
        let crowd = match normal {
            Some(l) => diff::ensure_finite(losses::crowd_loss(&roots, l), None, "crowd")?,
            None => R::zero(),
        };
        let keyp = losses::keyp_loss(&states, &self.detections, self.intr, self.raw_pixel_keyp, self.mask_depth)?;
        if !keyp.masked.is_empty() {
            let mut masked = self.masked.borrow_mut();
            for i in &keyp.masked {
                masked.insert(self.detections[*i].id);
            }
        }
        let keyp = diff::ensure_finite(keyp.value, None, "keyp")?;
        let factor = self.literal_init.then_some(crowd);
        let init = diff::ensure_finite(losses::init_loss(&states, &self.inits, self.weights, factor)?, None, "init")?;
        let total = losses::crowd_total(crowd, keyp, init, self.weights);
        Ok(CrowdTerms { crowd, keyp, init, total, normal })
    }

    fn tick(&self) {
        self.evaluations.set(self.evaluations.get() + 1);
    }
}

impl Objective for CrowdObjective<'_> {
    fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
        Ok(self.terms(x)?.total)
    }
}

fn batches_by_id(persons: &[PersonObservation], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..persons.len()).collect();
    order.sort_by_key(|&i| persons[i].id);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn plain_anchor(template: &SkeletonTemplate, e: &PersonEstimate) -> Result<(PlaneAnchor<f64>, Vec3<f64>)> {
    let joints = e.world_joints(template)?;
    let (top, bottom) = template.top_and_bottom(&joints);
    Ok((PlaneAnchor { person: e.id, top, bottom }, joints[template.role_map.root]))
}

/// Loss terms of a whole scene at `current`, anchored to `inits`.
pub fn scene_losses(
    template: &SkeletonTemplate,
    scene: &SceneObservation,
    current: &[PersonEstimate],
    inits: &[PersonEstimate],
    config: &FitConfig,
) -> Result<CrowdTerms<f64>> {
    let mut x = ParamVector::with_persons(current.len());
    for e in current {
        e.push_params(&mut x)?;
    }
    let objective = CrowdObjective::new(
        template,
        &scene.intrinsics,
        &config.weights,
        scene.persons.iter().collect(),
        inits.iter().collect(),
    )?
    .with_options(
        &CrowdConfig {
            normal_mode: NormalMode::Differentiate,
            ..config.crowd
        },
        true,
    );
    objective.terms(x.as_slice())
}

/// Jointly refines all persons with the crowd objective.
///
/// `inits` must follow the order of `scene.persons`.
pub fn crowd_refine(
    template: &SkeletonTemplate,
    scene: &SceneObservation,
    inits: &[PersonEstimate],
    config: &FitConfig,
) -> Result<SceneEstimate> {
    config.validate()?;
    if inits.len() != scene.persons.len() {
        return Err(Error::Config(format!(
            "{} initial estimates for {} persons",
            inits.len(),
            scene.persons.len()
        )));
    }
    if scene.persons.is_empty() {
        return Err(Error::Config("crowd refinement needs at least one person".into()));
    }
    for (o, e) in scene.persons.iter().zip(inits) {
        if o.id != e.id {
            return Err(Error::Config(format!("init {} does not match person {}", e.id, o.id)));
        }
    }
    let intr = &scene.intrinsics;
    let cc = &config.crowd;
    let adamw = cc.adamw();
    let participates: Vec<bool> = scene
        .persons
        .iter()
        .map(|p| p.confident_keypoints() >= MIN_CONFIDENT_KEYPOINTS)
        .collect();

    let mut current: Vec<PersonEstimate> = inits.to_vec();
    let mut iterations = Vec::new();
    let mut warnings = Vec::new();
    let mut masked_ids = BTreeSet::new();

    for (b, batch) in batches_by_id(&scene.persons, cc.batch_size).into_iter().enumerate() {
        let in_batch: BTreeSet<usize> = batch.iter().copied().collect();
        let mut fixed_anchors = Vec::new();
        let mut fixed_roots = Vec::new();
        if !cc.per_batch_normal {
            for (i, e) in current.iter().enumerate() {
                if participates[i] && !in_batch.contains(&i) {
                    let (a, r) = plain_anchor(template, e)?;
                    fixed_anchors.push(a);
                    fixed_roots.push(r);
                }
            }
        }
        let mut anchor = ParamVector::with_persons(batch.len());
        for &i in &batch {
            current[i].push_params(&mut anchor)?;
        }
        let objective = CrowdObjective::new(
            template,
            intr,
            &config.weights,
            batch.iter().map(|&i| &scene.persons[i]).collect(),
            batch.iter().map(|&i| &inits[i]).collect(),
        )?
        .with_latent(anchor.0.clone(), cc.param_gain)
        .with_fixed(fixed_anchors, fixed_roots)
        .with_options(cc, true);

        let z0 = vec![0.0; anchor.0.len()];
        let run = optim::minimize(
            |z| {
                let r = diff::gradient(&objective, z).map(|r| (r.value, r.gradient));
                objective.tick();
                r
            },
            &z0,
            &adamw,
            |s: &StepRecord| {
                iterations.push(IterationRecord {
                    batch: b,
                    step: s.step,
                    lr: s.lr,
                    objective: s.objective,
                })
            },
        )?;
        if let Some(e) = &run.error {
            warnings.push(format!("batch {b}: stopped early: {e}"));
        }
        masked_ids.extend(objective.masked_persons());
        for (k, &i) in batch.iter().enumerate() {
            let block: Vec<f64> = (0..PERSON_PARAMS)
                .map(|j| anchor.0[k * PERSON_PARAMS + j] + cc.param_gain * run.x[k * PERSON_PARAMS + j])
                .collect();
            let o = &scene.persons[i];
            let mut flags = current[i].flags;
            flags.depth_masked |= masked_ids.contains(&o.id);
            current[i] = PersonEstimate::from_params(o.id, PersonSlice::split(&block), &o.bbox, intr, flags)?;
            if current[i].translation[2] <= 0.0 {
                warnings.push(format!("person {}: refined depth is not positive", o.id));
            }
        }
    }

    let terms = scene_losses(template, scene, &current, inits, config)?;
    Ok(SceneEstimate {
        persons: current,
        normal: terms.normal,
        losses: LossBreakdown {
            crowd: terms.crowd,
            keyp: terms.keyp,
            init: terms.init,
            total: terms.total,
        },
        iterations,
        crowd_stage: true,
        warnings,
    })
}

#[cfg(feature = "parallel")]
fn fit_all(
    template: &SkeletonTemplate,
    persons: &[PersonObservation],
    intr: &Intrinsics,
    config: &FitConfig,
) -> Vec<Result<PersonEstimate>> {
    use rayon::prelude::*;
    persons
        .par_iter()
        .map(|p| init_fit(template, p, intr, &config.weights, &config.init))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn fit_all(
    template: &SkeletonTemplate,
    persons: &[PersonObservation],
    intr: &Intrinsics,
    config: &FitConfig,
) -> Vec<Result<PersonEstimate>> {
    persons
        .iter()
        .map(|p| init_fit(template, p, intr, &config.weights, &config.init))
        .collect()
}

/// Stage-1 results packaged as a scene estimate, without refinement.
pub fn stage_one_estimate(
    template: &SkeletonTemplate,
    scene: &SceneObservation,
    inits: Vec<PersonEstimate>,
    config: &FitConfig,
    warnings: Vec<String>,
) -> Result<SceneEstimate> {
    let terms = if inits.is_empty() {
        None
    } else {
        Some(scene_losses(template, scene, &inits, &inits, config)?)
    };
    Ok(SceneEstimate {
        persons: inits,
        normal: terms.and_then(|t| t.normal),
        losses: terms
            .map(|t| LossBreakdown {
                crowd: t.crowd,
                keyp: t.keyp,
                init: t.init,
                total: t.total,
            })
            .unwrap_or_default(),
        iterations: Vec::new(),
        crowd_stage: false,
        warnings,
    })
}

/// Detection filtering, per-person initialization, then crowd refinement.
pub fn reconstruct(template: &SkeletonTemplate, scene: &SceneObservation, config: &FitConfig) -> Result<SceneEstimate> {
    config.validate()?;
    scene.validate(template)?;
    let filtered = filter_detections(scene, config.threshold);
    let mut warnings = Vec::new();
    if filtered.persons.is_empty() {
        warnings.push(format!("no detections at or above threshold {}", config.threshold));
        return stage_one_estimate(template, &filtered, Vec::new(), config, warnings);
    }

    let results = fit_all(template, &filtered.persons, &filtered.intrinsics, config);
    let mut kept_obs = Vec::new();
    let mut inits = Vec::new();
    for (obs, r) in filtered.persons.iter().zip(results) {
        match r {
            Ok(e) => {
                kept_obs.push(obs.clone());
                inits.push(e);
            }
            Err(e) => warnings.push(format!("person {}: dropped: {e}", obs.id)),
        }
    }
    if inits.is_empty() {
        return Err(Error::Domain(format!("no person could be reconstructed: {}", warnings.join("; "))));
    }
    let fitted = SceneObservation {
        persons: kept_obs,
        ..filtered
    };
    if config.no_crowd {
        return stage_one_estimate(template, &fitted, inits, config, warnings);
    }
    let mut est = crowd_refine(template, &fitted, &inits, config)?;
    warnings.append(&mut est.warnings);
    est.warnings = warnings;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(id: u64, score: f64) -> PersonObservation {
        PersonObservation {
            id,
            bbox: BBox::new([100.0, 100.0], 10.0, 20.0).unwrap(),
            keypoints: vec![KeypointObs::new([0.0, 0.0], 1.0); 17],
            score,
        }
    }

    fn scene(scores: &[f64]) -> SceneObservation {
        SceneObservation {
            intrinsics: Intrinsics::uncalibrated(640.0, 480.0).unwrap(),
            persons: scores.iter().enumerate().map(|(i, s)| person(i as u64, *s)).collect(),
            ground_truth: None,
        }
    }

    #[test]
    fn detection_threshold() {
        let s = scene(&[0.45, 0.24, 0.23, 0.22]);
        assert_eq!(filter_detections(&s, 0.23).persons.len(), 3);
        assert_eq!(filter_detections(&s, 0.0).persons.len(), 4);
        assert!(filter_detections(&s, 1.0).persons.is_empty());
    }

    #[test]
    fn defaults_match_published_configuration() {
        let c = FitConfig::default();
        assert_eq!(c.crowd.iters, 260);
        assert_eq!(c.crowd.batch_size, 50);
        assert_eq!(c.crowd.lr, 1e-5);
        assert_eq!(c.threshold, 0.23);
        let w = c.weights;
        assert_eq!((w.crowd, w.keyp, w.init_shape, w.init_pose), (0.001, 5.0, 0.001, 5.0));
        assert_eq!((w.reproj, w.smpl, w.joint, w.verts), (5.0, 5.0, 1.0, 0.1));
    }

    #[test]
    fn scene_validation() {
        let t = SkeletonTemplate::builtin();
        let mut s = scene(&[0.5, 0.6]);
        s.validate(&t).unwrap();
        s.persons[1].id = 0;
        assert!(s.validate(&t).is_err());
        let mut s = scene(&[0.5]);
        s.persons[0].keypoints.pop();
        assert!(s.validate(&t).is_err());
    }

    #[test]
    fn low_confidence_person_gets_rest_pose() {
        let t = SkeletonTemplate::builtin();
        let s = scene(&[0.9]);
        let mut p = s.persons[0].clone();
        for k in &mut p.keypoints {
            k.confidence = 0.0;
        }
        let e = init_fit(&t, &p, &s.intrinsics, &LossWeights::default(), &InitFitConfig::default()).unwrap();
        assert!(e.flags.low_confidence);
        assert_eq!(&e.theta.0[1..], &vec![[0.0; 3]; 23][..]);
        assert!(e.translation[2] > 0.0);
    }

    #[test]
    fn upright_root_points_head_up_in_image() {
        let t = SkeletonTemplate::builtin();
        let mut theta = vec![0.0; 72];
        theta[..3].copy_from_slice(&upright_root(0.0));
        let posed = t.forward_kinematics(&theta, &[0.0; 10]).unwrap();
        let (top, bottom) = t.top_and_bottom(&posed.joints);
        assert!(top[1] < bottom[1]);
        // Facing the camera: the nose sits in front of the head, towards -z.
        let kps = t.keypoints(&posed);
        assert!(kps[0][2] < posed.joints[15][2]);
    }

    #[test]
    fn batches_follow_id_order() {
        let mut s = scene(&[0.5; 5]);
        for (p, id) in s.persons.iter_mut().zip([9, 3, 7, 1, 5]) {
            p.id = id;
        }
        assert_eq!(batches_by_id(&s.persons, 2), vec![vec![3, 1], vec![4, 2], vec![0]]);
    }

    #[test]
    fn config_validation() {
        let mut c = FitConfig::default();
        c.validate().unwrap();
        c.crowd.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.crowd.normal_mode = NormalMode::FreezeEvery(0);
        assert!(c.validate().is_err());
    }
}
