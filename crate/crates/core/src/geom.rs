//! Fixed-size 3D helpers generic over [`Real`].

use crate::diff::Real;

pub type Vec3<R> = [R; 3];
/// Row-major 3×3 matrix.
pub type Mat3<R> = [[R; 3]; 3];

/// Rotations with ‖axis-angle‖ below this use the Taylor branch.
pub const SMALL_ANGLE: f64 = 1e-6;

pub fn lift<R: Real>(v: [f64; 3]) -> Vec3<R> {
    [R::constant(v[0]), R::constant(v[1]), R::constant(v[2])]
}

pub fn values<R: Real>(v: &Vec3<R>) -> [f64; 3] {
    [v[0].value(), v[1].value(), v[2].value()]
}

pub fn add<R: Real>(a: Vec3<R>, b: Vec3<R>) -> Vec3<R> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<R: Real>(a: Vec3<R>, b: Vec3<R>) -> Vec3<R> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<R: Real>(a: Vec3<R>, s: R) -> Vec3<R> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<R: Real>(a: Vec3<R>, b: Vec3<R>) -> R {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<R: Real>(a: Vec3<R>, b: Vec3<R>) -> Vec3<R> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<R: Real>(a: Vec3<R>) -> R {
    dot(a, a).sqrt()
}

pub fn identity<R: Real>() -> Mat3<R> {
    let (o, z) = (R::constant(1.0), R::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_vec<R: Real>(m: &Mat3<R>, v: Vec3<R>) -> Vec3<R> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul<R: Real>(a: &Mat3<R>, b: &Mat3<R>) -> Mat3<R> {
    let mut out = [[R::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<R: Real>(m: &Mat3<R>) -> Mat3<R> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
///
/// `R = I + a·K + b·K²` with `a = sinθ/θ`, `b = (1−cosθ)/θ²`; below
/// [`SMALL_ANGLE`] the second-order series of `a` and `b` is used so value
/// and derivative stay finite at zero.
pub fn rodrigues<R: Real>(w: Vec3<R>) -> Mat3<R> {
    let theta_sq = dot(w, w);
    let (a, b) = if theta_sq.value() < SMALL_ANGLE * SMALL_ANGLE {
        (
            R::constant(1.0) - theta_sq / 6.0,
            R::constant(0.5) - theta_sq / 24.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (R::constant(1.0) - theta.cos()) / theta_sq)
    };
    let [x, y, z] = w;
    let zero = R::zero();
    let k = [[zero, -z, y], [z, zero, -x], [-y, x, zero]];
    let k2 = mat_mul(&k, &k);
    let mut r = identity::<R>();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = r[i][j] + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix, angle in `[0, π]`.
pub fn axis_angle_of(m: &Mat3<f64>) -> [f64; 3] {
    let mat = nalgebra::Matrix3::from_fn(|i, j| m[i][j]);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(mat);
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

/// Wraps an axis-angle so its magnitude lies in `[0, 2π)`.
pub fn canonical_axis_angle(w: [f64; 3]) -> [f64; 3] {
    let two_pi = std::f64::consts::TAU;
    let angle = norm(w);
    if angle < two_pi {
        return w;
    }
    let wrapped = angle.rem_euclid(two_pi);
    scale(w, wrapped / angle)
}
