use serde::Serialize;

use crowdfit_core::body_model::SkeletonTemplate;
use crowdfit_core::camera;
use crowdfit_core::metrics;
use crowdfit_core::pipeline::{self, FitConfig, PersonEstimate, SceneObservation};
use crowdfit_core::synth::{self, PerturbSpec, SceneSpec};

/// Largest crowd the page offers; refinement cost grows linearly.
pub const MAX_PERSONS: usize = 200;

pub struct Session {
    template: SkeletonTemplate,
    scene: SceneObservation,
    truth: Vec<PersonEstimate>,
    current: Vec<PersonEstimate>,
    steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PersonView {
    pub id: u64,
    /// World joints, metres, camera frame.
    pub joints: Vec<[f64; 3]>,
    /// Joints projected into the image, pixels.
    pub pixels: Vec<[f64; 2]>,
    pub true_depth: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub width: f64,
    pub height: f64,
    pub bones: Vec<[usize; 2]>,
    pub persons: Vec<PersonView>,
    /// True ground plane: unit normal and offset.
    pub plane: ([f64; 3], f64),
    pub plane_std: f64,
    pub mean_depth_error: f64,
    pub mean_oks: f64,
    pub steps: usize,
}

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Session {
    pub fn new(persons: usize, seed: u64, pose_sigma: f64) -> Result<Self, String> {
        if persons == 0 || persons > MAX_PERSONS {
            return Err(format!("crowd size must be between 1 and {MAX_PERSONS}"));
        }
        let template = SkeletonTemplate::builtin();
        let spec = SceneSpec { persons, seed, pose_sigma, ..SceneSpec::default() };
        let scene = synth::generate_scene(&template, &spec).map_err(text)?;
        let truth = synth::ground_truth_estimates(&scene).map_err(text)?;
        Ok(Self { template, scene, current: truth.clone(), truth, steps: 0 })
    }

    pub fn reset(&mut self) {
        self.current = self.truth.clone();
        self.steps = 0;
    }

    pub fn jitter(&mut self, sigma: f64, seed: u64) -> Result<(), String> {
        let spec = PerturbSpec { depth_sigma: sigma, seed, ..PerturbSpec::default() };
        self.current =
            synth::perturb_estimates(&self.current, &self.scene.persons, &self.scene.intrinsics, &spec).map_err(text)?;
        self.steps = 0;
        Ok(())
    }

    pub fn refine(&mut self, iters: usize) -> Result<(), String> {
        let mut config = FitConfig::default();
        config.crowd.iters = iters;
        let out = pipeline::crowd_refine(&self.template, &self.scene, &self.current, &config).map_err(text)?;
        self.current = out.persons;
        self.steps += iters;
        Ok(())
    }

    pub fn current(&self) -> &[PersonEstimate] {
        &self.current
    }

    pub fn snapshot(&self) -> Result<Snapshot, String> {
        let t = &self.template;
        let intr = &self.scene.intrinsics;
        let mut persons = Vec::with_capacity(self.current.len());
        let mut world = Vec::with_capacity(self.current.len());
        for (e, truth) in self.current.iter().zip(&self.truth) {
            let joints = e.world_joints(t).map_err(text)?;
            let pixels = camera::project(&joints, [0.0; 3], intr).unwrap_or_default();
            world.push((e.id, joints.clone()));
            persons.push(PersonView { id: e.id, joints, pixels, true_depth: truth.translation[2] });
        }
        let report = metrics::evaluate(t, &self.scene, &self.current).map_err(text)?;
        let plane = self.scene.ground_truth.as_ref().and_then(|g| g.plane).ok_or("scene has no plane")?;
        let plane_std = if world.len() >= 2 {
            metrics::plane_report(t, &world, None).map_err(text)?.residual_std
        } else {
            0.0
        };
        Ok(Snapshot {
            width: intr.width,
            height: intr.height,
            bones: t.bones().map(|(c, p)| [p, c]).collect(),
            persons,
            plane: (plane.normal, plane.offset),
            plane_std,
            mean_depth_error: report.depth_error.map_or(0.0, |d| d.mean_abs),
            mean_oks: report.mean_oks.unwrap_or(0.0),
            steps: self.steps,
        })
    }
}
