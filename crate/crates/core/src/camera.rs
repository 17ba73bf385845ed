//! Pinhole camera geometry and the crop-camera to world translation.

use serde::{Deserialize, Serialize};

use crate::diff::Real;
use crate::geom::Vec3;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalSource {
    Calibrated,
    /// Focal set to the image diagonal for an uncalibrated image.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: f64,
    pub height: f64,
    pub focal: f64,
    pub principal: [f64; 2],
    pub focal_source: FocalSource,
}

impl Intrinsics {
    /// Focal length from the image diagonal, principal point at the centre.
    pub fn uncalibrated(width: f64, height: f64) -> Result<Self> {
        Self::new(width, height, None)
    }

    pub fn new(width: f64, height: f64, focal: Option<f64>) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::Domain(format!("image size {width}x{height} must be positive")));
        }
        let (focal, focal_source) = match focal {
            Some(f) if f > 0.0 && f.is_finite() => (f, FocalSource::Calibrated),
            Some(f) => return Err(Error::Domain(format!("focal length {f} must be positive"))),
            None => (width.hypot(height), FocalSource::Diagonal),
        };
        Ok(Self {
            width,
            height,
            focal,
            principal: [width / 2.0, height / 2.0],
            focal_source,
        })
    }

    pub fn with_principal(mut self, principal: [f64; 2]) -> Self {
        self.principal = principal;
        self
    }

    pub fn image_center(&self) -> [f64; 2] {
        [self.width / 2.0, self.height / 2.0]
    }
}

/// Axis-aligned person box in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(center: [f64; 2], width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::Domain(format!("box size {width}x{height} must be positive")));
        }
        Ok(Self { center, width, height })
    }

    /// Box size `d`: the longer side.
    pub fn size(&self) -> f64 {
        self.width.max(self.height)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Box centre relative to the image centre.
    pub fn offset(&self, intr: &Intrinsics) -> [f64; 2] {
        let c = intr.image_center();
        [self.center[0] - c[0], self.center[1] - c[1]]
    }

    /// Tight box around points, grown by `padding` (0.15 = 15%) on each axis.
    pub fn around(points: impl IntoIterator<Item = [f64; 2]>, padding: f64) -> Result<Self> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        Self::new(center, (hi[0] - lo[0]) * (1.0 + padding), (hi[1] - lo[1]) * (1.0 + padding))
    }
}

/// Crop camera `[f_c, t_x, t_y]` predicted in box coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamTriple {
    pub f_c: f64,
    pub t_x: f64,
    pub t_y: f64,
}

impl CamTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.f_c, self.t_x, self.t_y]
    }
}

/// Generic form of [`translation_from_cam`] over `[f_c, t_x, t_y]`.
pub fn lift_translation<R: Real>(cam: [R; 3], bbox: &BBox, intr: &Intrinsics) -> Result<Vec3<R>> {
    let [f_c, t_x, t_y] = cam;
    let d = bbox.size();
    if !(f_c.value() > 0.0) || !(d > 0.0) {
        return Err(Error::Domain(format!(
            "crop focal {} and box size {d} must be positive",
            f_c.value()
        )));
    }
    let [cx, cy] = bbox.offset(intr);
    let inv = R::constant(2.0) / (f_c * d);
    Ok([t_x + inv * cx, t_y + inv * cy, inv * intr.focal])
}

/// World translation of a person from its crop camera:
/// `t_X = t_x + 2c_x/(d f_c)`, `t_Y = t_y + 2c_y/(d f_c)`, `t_Z = 2f/(d f_c)`.
pub fn translation_from_cam(cam: &CamTriple, bbox: &BBox, intr: &Intrinsics) -> Result<[f64; 3]> {
    lift_translation(cam.as_array(), bbox, intr)
}

/// Exact inverse of [`translation_from_cam`].
pub fn cam_from_translation(t: [f64; 3], bbox: &BBox, intr: &Intrinsics) -> Result<CamTriple> {
    if !(t[2] > 0.0) {
        return Err(Error::Domain(format!("t_Z = {} puts the person behind the camera", t[2])));
    }
    let d = bbox.size();
    if !(d > 0.0) {
        return Err(Error::Domain(format!("box size {d} must be positive")));
    }
    let f_c = 2.0 * intr.focal / (d * t[2]);
    let [cx, cy] = bbox.offset(intr);
    Ok(CamTriple {
        f_c,
        t_x: t[0] - 2.0 * cx / (d * f_c),
        t_y: t[1] - 2.0 * cy / (d * f_c),
    })
}

/// Projects one point offset by `t`; `Err(depth)` when it is not in front.
pub fn project_point<R: Real>(p: Vec3<R>, t: Vec3<R>, intr: &Intrinsics) -> Result<[R; 2], f64> {
    let z = p[2] + t[2];
    if !(z.value() > 0.0) {
        return Err(z.value());
    }
    let inv = R::constant(intr.focal) / z;
    Ok([
        (p[0] + t[0]) * inv + intr.principal[0],
        (p[1] + t[1]) * inv + intr.principal[1],
    ])
}

/// `u = c_x + f (x + t_X)/(z + t_Z)`, likewise for `v`.
pub fn project<R: Real>(points: &[Vec3<R>], t: Vec3<R>, intr: &Intrinsics) -> Result<Vec<[R; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(joint, p)| {
            project_point(*p, t, intr).map_err(|depth| Error::Projection {
                person: None,
                joint,
                depth,
            })
        })
        .collect()
}
