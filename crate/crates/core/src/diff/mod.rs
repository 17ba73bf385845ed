//! Exact gradients of scene objectives.
//!
//! Objectives are written once against [`Real`] and evaluated either with
//! plain `f64` or with tape-recorded [`Var`]s. [`gradient`] runs one reverse
//! sweep; [`check_gradient`] compares it against central differences.

mod real;
mod tape;

pub use real::{sum, Real};
pub use tape::{Tape, Var};

use crate::camera::CamTriple;
use crate::{Error, Result};

/// A scalar function of a flat parameter vector.
pub trait Objective {
    fn evaluate<R: Real>(&self, x: &[R]) -> Result<R>;
}

impl<O: Objective + ?Sized> Objective for &O {
    fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
        (**self).evaluate(x)
    }
}

/// Fails with [`Error::Eval`] when `v` is not finite.
pub fn ensure_finite<R: Real>(v: R, person: Option<u64>, term: &'static str) -> Result<R> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Eval { person, term })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub gradient: Vec<f64>,
    pub value: f64,
    pub max_abs: f64,
    pub evaluations: usize,
}

pub fn value<O: Objective>(objective: &O, x: &[f64]) -> Result<f64> {
    let v = objective.evaluate(x)?;
    ensure_finite(v, None, "objective")
}

/// Reverse-mode gradient of `objective` at `x`.
pub fn gradient<O: Objective>(objective: &O, x: &[f64]) -> Result<GradReport> {
    let tape = Tape::with_capacity(64 * x.len().max(16));
    let inputs: Vec<Var<'_>> = x.iter().map(|&v| tape.var(v)).collect();
    let out = objective.evaluate(&inputs)?;
    let value = ensure_finite(out, None, "objective")?.value();
    let gradient = tape.gradient(out, &inputs);
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Eval {
            person: None,
            term: "gradient",
        });
    }
    let max_abs = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(GradReport {
        gradient,
        value,
        max_abs,
        evaluations: 1,
    })
}

/// Default central-difference step for coordinate value `x`.
pub fn default_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Relative error used by gradient checks: `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between [`gradient`] and central differences.
///
/// `step = None` uses [`default_step`] per coordinate.
pub fn check_gradient<O: Objective>(objective: &O, x: &[f64], step: Option<f64>) -> Result<f64> {
    let analytic = gradient(objective, x)?.gradient;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let h = step.unwrap_or_else(|| default_step(x[i]));
        probe[i] = x[i] + h;
        let up = value(objective, &probe)?;
        probe[i] = x[i] - h;
        let down = value(objective, &probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Number of free parameters per person: pose (72), shape (10), camera (3).
pub const PERSON_PARAMS: usize = 85;
pub const POSE_PARAMS: usize = 72;
pub const SHAPE_PARAMS: usize = 10;

/// Flattened per-person parameters, `[θ(72), β(10), f_c, t_x, t_y]` per
/// person, concatenated by person index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn with_persons(n: usize) -> Self {
        Self(Vec::with_capacity(n * PERSON_PARAMS))
    }

    pub fn push_person(&mut self, theta: &[f64], beta: &[f64], cam: &CamTriple) -> Result<()> {
        if theta.len() != POSE_PARAMS || beta.len() != SHAPE_PARAMS {
            return Err(Error::Config(format!(
                "expected {POSE_PARAMS} pose and {SHAPE_PARAMS} shape values, got {} and {}",
                theta.len(),
                beta.len()
            )));
        }
        self.0.extend_from_slice(theta);
        self.0.extend_from_slice(beta);
        self.0.extend_from_slice(&[cam.f_c, cam.t_x, cam.t_y]);
        Ok(())
    }

    pub fn persons(&self) -> usize {
        self.0.len() / PERSON_PARAMS
    }

    pub fn person(&self, i: usize) -> PersonSlice<'_, f64> {
        PersonSlice::split(&self.0[i * PERSON_PARAMS..(i + 1) * PERSON_PARAMS])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Borrowed view of one person's block inside a flat vector.
#[derive(Debug, Clone, Copy)]
pub struct PersonSlice<'a, R> {
    pub theta: &'a [R],
    pub beta: &'a [R],
    pub cam: &'a [R],
}

impl<'a, R> PersonSlice<'a, R> {
    pub fn split(block: &'a [R]) -> Self {
        assert_eq!(block.len(), PERSON_PARAMS, "person block length");
        let (theta, rest) = block.split_at(POSE_PARAMS);
        let (beta, cam) = rest.split_at(SHAPE_PARAMS);
        Self { theta, beta, cam }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl Objective for SumSquares {
        fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
            Ok(sum(x.iter().map(|v| *v * *v)))
        }
    }

    struct Constant;
    impl Objective for Constant {
        fn evaluate<R: Real>(&self, _x: &[R]) -> Result<R> {
            Ok(R::constant(4.2))
        }
    }

    struct Mixed;
    impl Objective for Mixed {
        fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
            Ok((x[0] * x[1]).sin() + (x[2] * x[2] + 1.0).sqrt() / x[0] + x[1].exp())
        }
    }

    #[test]
    fn quadratic_gradient() {
        let r = gradient(&SumSquares, &[3.0, -1.0]).unwrap();
        assert_eq!(r.gradient, vec![6.0, -2.0]);
        assert_eq!(r.value, 10.0);
        assert_eq!(r.max_abs, 6.0);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let r = gradient(&Constant, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.gradient, vec![0.0; 3]);
    }

    #[test]
    fn quadratic_passes_check() {
        let err = check_gradient(&SumSquares, &[3.0, -1.0, 0.25], None).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn transcendental_passes_check() {
        let err = check_gradient(&Mixed, &[0.8, -0.3, 1.7], None).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn linearity_of_gradient() {
        struct Combo(f64, f64);
        impl Objective for Combo {
            fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
                Ok(SumSquares.evaluate(x)? * self.0 + Mixed.evaluate(x)? * self.1)
            }
        }
        let x = [0.4, 1.1, -0.6];
        let gf = gradient(&SumSquares, &x).unwrap().gradient;
        let gg = gradient(&Mixed, &x).unwrap().gradient;
        let gc = gradient(&Combo(2.5, -0.75), &x).unwrap().gradient;
        for i in 0..3 {
            assert!((gc[i] - (2.5 * gf[i] - 0.75 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        struct Blowup;
        impl Objective for Blowup {
            fn evaluate<R: Real>(&self, x: &[R]) -> Result<R> {
                Ok(x[0] / 0.0)
            }
        }
        assert!(matches!(
            gradient(&Blowup, &[1.0]),
            Err(Error::Eval { term: "objective", .. })
        ));
    }

    #[test]
    fn param_vector_layout() {
        let mut p = ParamVector::with_persons(2);
        let theta: Vec<f64> = (0..72).map(|i| i as f64).collect();
        let beta = vec![0.5; 10];
        let cam = CamTriple { f_c: 2.0, t_x: 0.1, t_y: -0.2 };
        p.push_person(&theta, &beta, &cam).unwrap();
        p.push_person(&beta, &theta, &cam).unwrap_err();
        p.push_person(&theta, &beta, &CamTriple { f_c: 3.0, ..cam }).unwrap();
        assert_eq!(p.as_slice().len(), 170);
        assert_eq!(p.persons(), 2);
        let second = p.person(1);
        assert_eq!(second.theta[71], 71.0);
        assert_eq!(second.cam, &[3.0, 0.1, -0.2]);
    }
}
