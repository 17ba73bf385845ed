//! Scene and result files, template lookup and geometry export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body_model::{PoseParams, ShapeParams, SkeletonTemplate};
use crate::camera::{BBox, Intrinsics};
use crate::geom;
use crate::losses::{GroundTruthBundle, KeypointObs};
use crate::pipeline::{
    FitConfig, IterationRecord, LossBreakdown, PersonEstimate, PersonGroundTruth, PersonObservation, Plane,
    SceneEstimate, SceneGroundTruth, SceneObservation,
};
use crate::{Error, Result};

pub const SCENE_SCHEMA: &str = "crowdfit.scene/1";
pub const RESULT_SCHEMA: &str = "crowdfit.result/1";
/// Overrides the built-in body template when set.
pub const TEMPLATE_ENV: &str = "CROWDFIT_TEMPLATE";

/// Number of joint-marker points at the front of the template point list.
fn marker_count(template: &SkeletonTemplate) -> usize {
    template.joint_count().min(template.point_count())
}

/// Loads the template named by `CROWDFIT_TEMPLATE`, else the built-in one.
pub fn load_template() -> Result<SkeletonTemplate> {
    match std::env::var_os(TEMPLATE_ENV) {
        Some(path) if !path.is_empty() => SkeletonTemplate::load(Path::new(&path)),
        _ => Ok(SkeletonTemplate::builtin()),
    }
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Parse(format!("schema `{found}` is not supported, expected `{expected}`")))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("{what}: {e}")))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub cx_abs: f64,
    pub cy_abs: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonRecord {
    pub id: u64,
    pub bbox: BoxRecord,
    pub score: f64,
    /// `[u, v, confidence]` in absolute pixels.
    pub keypoints: Vec<[f64; 3]>,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub id: u64,
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub t: [f64; 3],
    /// Root-local joints.
    pub joints: Vec<[f64; 3]>,
    /// Root-local skinned points.
    pub points: Vec<[f64; 3]>,
    pub keypoints_2d: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRecord {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub persons: Vec<TruthRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<PlaneRecord>,
}

/// On-disk detections for one image, optionally with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema: String,
    pub image: ImageRecord,
    pub persons: Vec<PersonRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthRecord>,
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = parse(text, "scene file")?;
        check_schema(&file.schema, SCENE_SCHEMA)?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?).map_err(|e| with_path(e, path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_json()?)
    }

    pub fn from_observation(scene: &SceneObservation, layout: &str) -> Self {
        let focal = match scene.intrinsics.focal_source {
            crate::camera::FocalSource::Calibrated => Some(scene.intrinsics.focal),
            crate::camera::FocalSource::Diagonal => None,
        };
        Self {
            schema: SCENE_SCHEMA.into(),
            image: ImageRecord {
                width: scene.intrinsics.width,
                height: scene.intrinsics.height,
                focal,
            },
            persons: scene
                .persons
                .iter()
                .map(|p| PersonRecord {
                    id: p.id,
                    bbox: BoxRecord {
                        cx_abs: p.bbox.center[0],
                        cy_abs: p.bbox.center[1],
                        w: p.bbox.width,
                        h: p.bbox.height,
                    },
                    score: p.score,
                    keypoints: p
                        .keypoints
                        .iter()
                        .map(|k| [k.position[0], k.position[1], k.confidence])
                        .collect(),
                    layout: layout.into(),
                })
                .collect(),
            ground_truth: scene.ground_truth.as_ref().map(|gt| GroundTruthRecord {
                persons: gt
                    .persons
                    .iter()
                    .map(|p| TruthRecord {
                        id: p.id,
                        theta: p.bundle.theta.0.clone(),
                        beta: p.bundle.beta.0.clone(),
                        t: p.bundle.translation,
                        joints: p.bundle.joints.clone(),
                        points: p.bundle.points.clone(),
                        keypoints_2d: p.bundle.keypoints_2d.clone(),
                    })
                    .collect(),
                plane: gt.plane.map(|p| PlaneRecord { normal: p.normal, offset: p.offset }),
            }),
        }
    }

    /// Converts to the in-memory scene and checks it against the template.
    pub fn to_observation(&self, template: &SkeletonTemplate) -> Result<SceneObservation> {
        let intrinsics = Intrinsics::new(self.image.width, self.image.height, self.image.focal)?;
        let mut persons = Vec::with_capacity(self.persons.len());
        for p in &self.persons {
            if p.layout != template.role_map.layout {
                return Err(Error::Config(format!(
                    "person {}: layout `{}` does not match template layout `{}`",
                    p.id, p.layout, template.role_map.layout
                )));
            }
            let bbox = BBox::new([p.bbox.cx_abs, p.bbox.cy_abs], p.bbox.w, p.bbox.h).map_err(|e| e.for_person(p.id))?;
            persons.push(PersonObservation {
                id: p.id,
                bbox,
                keypoints: p.keypoints.iter().map(|k| KeypointObs::new([k[0], k[1]], k[2])).collect(),
                score: p.score,
            });
        }
        let ground_truth = self.ground_truth.as_ref().map(|gt| SceneGroundTruth {
            persons: gt
                .persons
                .iter()
                .map(|p| PersonGroundTruth {
                    id: p.id,
                    bundle: GroundTruthBundle {
                        theta: PoseParams(p.theta.clone()),
                        beta: ShapeParams(p.beta.clone()),
                        translation: p.t,
                        joints: p.joints.clone(),
                        points: p.points.clone(),
                        keypoints_2d: p.keypoints_2d.clone(),
                    },
                })
                .collect(),
            plane: gt.plane.map(|p| Plane { normal: p.normal, offset: p.offset }),
        });
        let scene = SceneObservation { intrinsics, persons, ground_truth };
        scene.validate(template)?;
        Ok(scene)
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSummary {
    /// Estimated ground normal, not renormalized.
    pub normal: Option<[f64; 3]>,
    pub losses: LossBreakdown,
    pub iterations: Vec<IterationRecord>,
    pub crowd_stage: bool,
}

/// Fitted scene together with everything needed to rerun the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub schema: String,
    pub template_version: String,
    pub config: FitConfig,
    pub intrinsics: Intrinsics,
    pub persons: Vec<PersonEstimate>,
    pub scene: SceneSummary,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

/// Standing notes on how the fit differs from a network-based pipeline.
pub fn deviation_notes(config: &FitConfig) -> Vec<String> {
    let mut notes = vec![
        format!(
            "body parameters are optimized directly as p = p_start + {} * z; AdamW runs on z",
            config.crowd.param_gain
        ),
        "stage-1 estimates come from per-person keypoint fitting, not a regression network".into(),
        "crowd spread uses var / sqrt(var + 1e-12)".into(),
    ];
    if config.crowd.literal_init {
        notes.push("shape/pose anchor multiplied by the crowd loss".into());
    }
    notes
}

impl ResultFile {
    pub fn new(template: &SkeletonTemplate, config: &FitConfig, intrinsics: Intrinsics, estimate: SceneEstimate) -> Self {
        Self {
            schema: RESULT_SCHEMA.into(),
            template_version: template.version.clone(),
            config: config.clone(),
            intrinsics,
            persons: estimate.persons,
            scene: SceneSummary {
                normal: estimate.normal,
                losses: estimate.losses,
                iterations: estimate.iterations,
                crowd_stage: estimate.crowd_stage,
            },
            notes: deviation_notes(config),
            warnings: estimate.warnings,
        }
    }

    /// Fails on the first non-finite number.
    pub fn check_finite(&self) -> Result<()> {
        let bad = |what: &str, id: Option<u64>| Err(Error::Domain(match id {
            Some(id) => format!("person {id}: non-finite {what}"),
            None => format!("non-finite {what}"),
        }));
        for p in &self.persons {
            if !p.theta.is_finite() {
                return bad("pose", Some(p.id));
            }
            if !p.beta.0.iter().all(|v| v.is_finite()) {
                return bad("shape", Some(p.id));
            }
            if !p.cam.as_array().iter().chain(&p.translation).all(|v| v.is_finite()) {
                return bad("camera", Some(p.id));
            }
        }
        if let Some(n) = self.scene.normal {
            if !n.iter().all(|v| v.is_finite()) {
                return bad("normal", None);
            }
        }
        let l = &self.scene.losses;
        if ![l.crowd, l.keyp, l.init, l.total].iter().all(|v| v.is_finite()) {
            return bad("loss", None);
        }
        if !self.scene.iterations.iter().all(|r| r.lr.is_finite() && r.objective.is_finite()) {
            return bad("iteration log", None);
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = parse(text, "result file")?;
        check_schema(&file.schema, RESULT_SCHEMA)?;
        file.check_finite()?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        self.check_finite()?;
        to_json(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?).map_err(|e| with_path(e, path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_json()?)
    }
}

/// Reads a fit configuration; missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<FitConfig> {
    let config: FitConfig = parse(&read(path)?, "config file").map_err(|e| with_path(e, path))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryFormat {
    Obj,
    Ply,
}

impl GeometryFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Obj => "obj",
            Self::Ply => "ply",
        }
    }
}

/// Points plus line segments between them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub edges: Vec<[usize; 2]>,
    /// Polygons by vertex index.
    pub faces: Vec<Vec<usize>>,
}

impl Mesh {
    fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.edges.extend(other.edges.iter().map(|[a, b]| [a + base, b + base]));
        self.faces.extend(other.faces.iter().map(|f| f.iter().map(|i| i + base).collect()));
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for [a, b] in &self.edges {
            let _ = writeln!(s, "l {} {}", a + 1, b + 1);
        }
        for f in &self.faces {
            let idx: Vec<String> = f.iter().map(|i| (i + 1).to_string()).collect();
            let _ = writeln!(s, "f {}", idx.join(" "));
        }
        s
    }

    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property double x\nproperty double y\nproperty double z\n");
        let _ = writeln!(s, "element face {}", self.faces.len());
        s.push_str("property list uchar int vertex_indices\n");
        let _ = writeln!(s, "element edge {}", self.edges.len());
        s.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let idx: Vec<String> = f.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{} {}", f.len(), idx.join(" "));
        }
        for [a, b] in &self.edges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn render(&self, format: GeometryFormat) -> String {
        match format {
            GeometryFormat::Obj => self.to_obj(),
            GeometryFormat::Ply => self.to_ply(),
        }
    }
}

/// World-space skinned points of one person, with bones drawn between the
/// joint markers.
pub fn person_mesh(template: &SkeletonTemplate, person: &PersonEstimate) -> Result<Mesh> {
    let (_, points) = person.pose(template)?;
    let markers = marker_count(template);
    Ok(Mesh {
        vertices: points.into_iter().map(|p| geom::add(p, person.translation)).collect(),
        edges: template.bones().filter(|&(c, p)| c < markers && p < markers).map(|(c, p)| [p, c]).collect(),
        faces: Vec::new(),
    })
}

/// Square in the plane with unit normal through the mean ankle midpoint.
pub fn plane_quad(template: &SkeletonTemplate, persons: &[PersonEstimate], normal: [f64; 3]) -> Result<Option<Mesh>> {
    let len = geom::norm(normal);
    if persons.is_empty() || !(len > 0.0) {
        return Ok(None);
    }
    let n = geom::scale(normal, 1.0 / len);
    let mut center = [0.0; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in persons {
        let joints = p.world_joints(template)?;
        let (_, bottom) = template.top_and_bottom(&joints);
        center = geom::add(center, geom::scale(bottom, 1.0 / persons.len() as f64));
        for a in 0..3 {
            lo[a] = lo[a].min(bottom[a]);
            hi[a] = hi[a].max(bottom[a]);
        }
    }
    let half = 0.5 * geom::norm(geom::sub(hi, lo)) + 1.0;
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = geom::cross(n, helper);
    let u = geom::scale(u, half / geom::norm(u));
    let v = geom::scale(geom::cross(n, u), 1.0);
    let corner = |a: f64, b: f64| geom::add(center, geom::add(geom::scale(u, a), geom::scale(v, b)));
    Ok(Some(Mesh {
        vertices: vec![corner(-1.0, -1.0), corner(1.0, -1.0), corner(1.0, 1.0), corner(-1.0, 1.0)],
        edges: Vec::new(),
        faces: vec![vec![0, 1, 2, 3]],
    }))
}

/// Every person followed by the plane quad, when a normal is available.
pub fn scene_mesh(template: &SkeletonTemplate, result: &ResultFile) -> Result<Mesh> {
    let mut mesh = Mesh::default();
    for p in &result.persons {
        mesh.append(&person_mesh(template, p)?);
    }
    if let Some(n) = result.scene.normal {
        if let Some(quad) = plane_quad(template, &result.persons, n)? {
            mesh.append(&quad);
        }
    }
    Ok(mesh)
}

/// Writes `person_<id>.<ext>` per person and `scene.<ext>`; returns the paths.
pub fn export_geometry(
    template: &SkeletonTemplate,
    result: &ResultFile,
    format: GeometryFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let ext = format.extension();
    let mut written = Vec::with_capacity(result.persons.len() + 1);
    for p in &result.persons {
        let path = dir.join(format!("person_{}.{ext}", p.id));
        write(&path, &person_mesh(template, p)?.render(format))?;
        written.push(path);
    }
    let path = dir.join(format!("scene.{ext}"));
    write(&path, &scene_mesh(template, result)?.render(format))?;
    written.push(path);
    Ok(written)
}

/// Vertex lines of an OBJ file.
pub fn obj_vertices(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let coords: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        if coords.len() != 3 {
            return Err(Error::Parse(format!("line {}: expected 3 coordinates", n + 1)));
        }
        out.push([coords[0], coords[1], coords[2]]);
    }
    Ok(out)
}
