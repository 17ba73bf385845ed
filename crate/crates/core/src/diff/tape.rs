use std::cell::RefCell;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use super::Real;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Wengert list for one reverse-mode sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(node);
        index
    }

    /// Adjoints of `output` with respect to every node on the tape.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.index == NONE {
            return adj;
        }
        adj[output.index as usize] = 1.0;
        for i in (0..=output.index as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adj[p as usize] += node.partials[k] * g;
                }
            }
        }
        adj
    }

    /// Gradient of `output` with respect to `inputs`.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        inputs
            .iter()
            .map(|v| {
                if v.index == NONE {
                    0.0
                } else {
                    adj[v.index as usize]
                }
            })
            .collect()
    }
}

/// A scalar recorded on a [`Tape`]; constants carry no tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.value)
    }
}

impl<'t> Var<'t> {
    fn index_or_none(&self) -> u32 {
        if self.tape.is_some() {
            self.index
        } else {
            NONE
        }
    }

    fn unary(self, value: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(tape) => Var {
                tape: Some(tape),
                index: tape.push(Node {
                    parents: [self.index, NONE],
                    partials: [d, 0.0],
                }),
                value,
            },
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        match self.tape.or(other.tape) {
            None => Var::constant(value),
            Some(tape) => Var {
                tape: Some(tape),
                index: tape.push(Node {
                    parents: [self.index_or_none(), other.index_or_none()],
                    partials: [da, db],
                }),
                value,
            },
        }
    }
}

impl Real for Var<'_> {
    fn constant(value: f64) -> Self {
        Var {
            tape: None,
            index: NONE,
            value,
        }
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl AddAssign for Var<'_> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let f = x * y + x.sin();
        let g = tape.gradient(f, &[x, y]);
        assert!((g[0] - (-2.0 + 3.0f64.cos())).abs() < 1e-15);
        assert_eq!(g[1], 3.0);
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let c = Var::constant(2.0) * Var::constant(4.0);
        assert_eq!(c.value(), 8.0);
        assert!(tape.is_empty());
        let x = tape.var(1.5);
        let f = (x * c) / 2.0 - 1.0;
        assert_eq!(tape.gradient(f, &[x]), vec![4.0]);
    }

    #[test]
    fn reused_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.var(0.7);
        let s = x.exp();
        let f = s * s; // e^{2x}
        let g = tape.gradient(f, &[x]);
        assert!((g[0] - 2.0 * (1.4f64).exp()).abs() < 1e-12);
    }
}
