//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a fixed set of primitives (matmul, with or without a
//! transposed right factor, add/sub,
//! elementwise multiply, row-broadcast add, scaling, sigmoid, tanh, power,
//! sums, mean, log10) plus user-supplied linear maps. Values are computed
//! eagerly while recording; [`Tape::backward`] replays the record in reverse
//! exactly once and returns gradients for every trainable parameter that
//! contributed to the output.
//!
//! Activations are laid out with one row per batch item.

mod adam;
mod gradcheck;
mod param;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

pub use adam::Adam;
pub use gradcheck::{grad_check, sample_coords, ParamCoord, GRAD_CHECK_FLOOR};
pub use param::{ParamKey, ParamSet, Parameter};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A linear map `(X_1, ..., X_n) -> Y` with an explicit adjoint, recorded
/// as a single tape node.
pub trait LinearMap: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, inputs: &[&Matrix]) -> Result<Matrix>;
    /// Returns one gradient per input, each shaped like that input.
    fn adjoint(&self, grad_output: &Matrix) -> Result<Vec<Matrix>>;
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.map.get(&key)
    }

    pub fn insert(&mut self, key: ParamKey, grad: Matrix) {
        match self.map.get_mut(&key) {
            Some(g) => *g += &grad,
            None => {
                self.map.insert(key, grad);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

enum Op {
    Constant,
    Param(ParamKey),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Power(Var, f64),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
    Log10(Var),
    Linear(Vec<Var>, Arc<dyn LinearMap>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Power(..) => "power",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Mean(_) => "mean",
            Op::Log10(_) => "log10",
            Op::Linear(_, map) => map.name(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("cannot record on a tape after backward".into()));
        }
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: op.name(),
                detail: format!("produced {bad} at node {}", self.nodes.len()),
            });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Power(a, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Mean(a)
            | Op::Log10(a) => self.needs(*a),
            Op::Linear(inputs, _) => inputs.iter().any(|v| self.needs(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Records a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Result<Var> {
        let p = params.get(index);
        if p.trainable() {
            self.push(p.value().clone(), Op::Param(params.key(index)))
        } else {
            self.push(p.value().clone(), Op::Constant)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dim(a);
        let (br, bc) = self.dim(b);
        if ac != br {
            return Err(Error::shape("matmul", format!("({ar}x{ac}) . ({br}x{bc})")));
        }
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dim(a);
        let (br, bc) = self.dim(b);
        if ac != bc {
            return Err(Error::shape(
                "matmul_t",
                format!("({ar}x{ac}) . ({br}x{bc})^T"),
            ));
        }
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dim(a), self.dim(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + 1 * row`, broadcasting a 1 x n row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.dim(a);
        if self.dim(row) != (1, ac) {
            return Err(Error::shape(
                "add_row",
                format!("{:?} row for {:?} matrix", self.dim(row), self.dim(a)),
            ));
        }
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Elementwise `x^c`. Fractional exponents need a non-negative base; the
    /// derivative at exactly zero is taken as zero.
    pub fn power(&mut self, a: Var, c: f64) -> Result<Var> {
        if c.fract() != 0.0 {
            if let Some(x) = self.value(a).iter().find(|&&x| x < 0.0) {
                return Err(Error::Numeric {
                    op: "power",
                    detail: format!("negative base {x} with fractional exponent {c}"),
                });
            }
        }
        let v = self.value(a).mapv(|x| x.powf(c));
        self.push(v, Op::Power(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// Row sums as an n x 1 column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty operand"));
        }
        let s = self.value(a).sum() / n as f64;
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a))
    }

    pub fn log10(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(f64::log10);
        self.push(v, Op::Log10(a))
    }

    pub fn linear(&mut self, inputs: &[Var], map: Arc<dyn LinearMap>) -> Result<Var> {
        let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = map.apply(&values)?;
        self.push(out, Op::Linear(inputs.to_vec(), map))
    }

    /// Backpropagates from a 1x1 output.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.dim(output) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output must be 1x1, got {:?}", self.dim(output)),
            ));
        }
        self.backward_with_seed(output, Array2::ones((1, 1)))
    }

    /// Backpropagates an arbitrary upstream gradient from `output`.
    pub fn backward_with_seed(&mut self, output: Var, seed: Matrix) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if seed.dim() != self.dim(output) {
            return Err(Error::shape("backward", "seed shape differs from output"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            let need = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => out.insert(*key, g),
                Op::MatMul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.dot(val(*b)));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, &g * val(*b));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if need(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Power(a, c) => {
                    let mut d = g;
                    let c = *c;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        *d *= if x == 0.0 { 0.0 } else { c * x.powf(c - 1.0) };
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.dim(*a), s));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.dim(*a);
                    let d = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(
                        &mut grads,
                        *a,
                        Array2::from_elem(self.dim(*a), g[[0, 0]] / n),
                    );
                }
                Op::Log10(a) => {
                    let mut d = g;
                    let ln10 = std::f64::consts::LN_10;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| *d /= x * ln10);
                    acc(&mut grads, *a, d);
                }
                Op::Linear(inputs, map) => {
                    let parts = map.adjoint(&g)?;
                    if parts.len() != inputs.len() {
                        return Err(Error::Tape(format!(
                            "{} adjoint returned {} gradients for {} inputs",
                            map.name(),
                            parts.len(),
                            inputs.len()
                        )));
                    }
                    for (v, part) in inputs.iter().zip(parts) {
                        if need(*v) {
                            if part.dim() != self.dim(*v) {
                                return Err(Error::shape(map.name(), "adjoint gradient shape"));
                            }
                            acc(&mut grads, *v, part);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
