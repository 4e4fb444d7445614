//! Define-by-run reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] just walks it in reverse. Graphs are cheap to build and
//! are rebuilt for every training step.
//!
//! ```
//! use lmreg::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod nn;
mod ops;
mod spatial;

use std::rc::Rc;

pub use gradcheck::{grad_check, grad_check_sampled, gradient_pairs, max_relative_error};
pub(crate) use ops::{leaky_relu, phi, phi_prime};

use crate::linalg::Lu;
use crate::volume::{Point3, Volume3D};
use crate::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::SizeMismatch {
                expected: n,
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    RowNorm(Var),
    Matmul(Var, Var),
    Transpose(Var),
    HCat(Var, Var),
    VCat(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Homogeneous(Var),
    AddDiag(Var),
    Solve {
        a: Var,
        b: Var,
        lu: Lu,
    },
    SqDist(Var, Var),
    TpsKernel {
        x: Var,
        inv_scale2: f64,
    },
    Conv3d {
        input: Var,
        weight: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialSoftmax(Var),
    CoordExpect {
        probs: Var,
        coords: Rc<Vec<Point3>>,
    },
    Trilinear {
        points: Var,
        volume: Rc<Volume3D>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the variable's shape when no path reached it.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape.clone()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op result after checking it is finite.
    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward value of {}", op_name(&op))));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            for (input, g) in self.local_grads(id, &out_grad)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep intermediate grads around only for parameters.
            grads[id] = None;
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {id}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, id: usize, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, ops::map(gy, |v| -v))],
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                vec![(*a, ops::zip(gy, bv, |g, b| g * b)), (*b, ops::zip(gy, av, |g, a| g * a))]
            }
            Op::Scale(a, c) => vec![(*a, ops::map(gy, |g| g * c))],
            Op::AddScalar(a) => vec![(*a, gy.clone())],
            Op::Square(a) => vec![(*a, ops::zip(gy, self.value(*a), |g, x| 2.0 * g * x))],
            Op::Relu(a) => vec![(
                *a,
                ops::zip(gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            )],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                ops::zip(gy, self.value(*a), |g, x| if x > 0.0 { g } else { g * slope }),
            )],
            Op::Sum(a) => {
                let g = gy.item();
                vec![(*a, Tensor::full(self.shape(*a).to_vec(), g))]
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let g = gy.item() / n;
                vec![(*a, Tensor::full(self.shape(*a).to_vec(), g))]
            }
            Op::Reshape(a) => vec![(*a, gy.clone().reshaped(self.shape(*a).to_vec())?)],
            Op::RowNorm(a) => vec![(*a, ops::row_norm_backward(self.value(*a), y, gy))],
            Op::Matmul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), gy);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, ops::transpose_raw(gy))],
            Op::HCat(a, b) => {
                let (ga, gb) = ops::hsplit(gy, self.shape(*a)[1]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::VCat(a, b) => {
                let (ga, gb) = ops::vsplit(gy, self.shape(*a)[0]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::SliceRows { x, start } => {
                vec![(*x, ops::slice_rows_backward(self.shape(*x), *start, gy))]
            }
            Op::Homogeneous(a) => {
                let d = self.shape(*a)[1];
                let (ga, _) = ops::hsplit(gy, d);
                vec![(*a, ga)]
            }
            Op::AddDiag(a) => vec![(*a, gy.clone())],
            Op::Solve { a, b, lu } => {
                let (ga, gb) = ops::solve_backward(lu, y, gy);
                vec![(*a, ga), (*b, gb)]
            }
            Op::SqDist(a, b) => {
                let (ga, gb) = ops::sq_dist_backward(self.value(*a), self.value(*b), gy);
                vec![(*a, ga), (*b, gb)]
            }
            Op::TpsKernel { x, inv_scale2 } => vec![(
                *x,
                ops::tps_kernel_backward(self.value(*x), *inv_scale2, gy),
            )],
            Op::Conv3d { input, weight, pad } => {
                let (gi, gw) = nn::conv3d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *pad,
                    gy,
                    self.needs_grad(*input),
                );
                let mut v = vec![(*weight, gw)];
                if let Some(gi) = gi {
                    v.push((*input, gi));
                }
                v
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (gx, gg, gb) =
                    nn::instance_norm_backward(self.value(*gamma), normalized, inv_std, gy);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, nn::max_pool_backward(self.shape(*x), argmax, gy))]
            }
            Op::SpatialSoftmax(a) => vec![(*a, spatial::softmax_backward(y, gy))],
            Op::CoordExpect { probs, coords } => vec![(
                *probs,
                spatial::coord_expect_backward(self.shape(*probs), coords, gy),
            )],
            Op::Trilinear { points, volume } => vec![(
                *points,
                spatial::trilinear_backward(volume, self.value(*points), gy),
            )],
        };
        Ok(out)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Square(..) => "square",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::RowNorm(..) => "row_norm",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::HCat(..) => "hcat",
        Op::VCat(..) => "vcat",
        Op::SliceRows { .. } => "slice_rows",
        Op::Homogeneous(..) => "homogeneous",
        Op::AddDiag(..) => "add_diag",
        Op::Solve { .. } => "solve",
        Op::SqDist(..) => "sq_dist",
        Op::TpsKernel { .. } => "tps_kernel",
        Op::Conv3d { .. } => "conv3d",
        Op::InstanceNorm { .. } => "instance_norm",
        Op::MaxPool { .. } => "max_pool3d",
        Op::SpatialSoftmax(..) => "spatial_softmax",
        Op::CoordExpect { .. } => "coord_expect",
        Op::Trilinear { .. } => "trilinear",
    }
}
