//! Spatial softmax, coordinate expectation and differentiable trilinear sampling.

use std::rc::Rc;

use super::{Graph, Op, Tensor, Var};
use crate::error::shape_err;
use crate::volume::{trilinear_with_grad, Point3, Volume3D};
use crate::Result;

pub(super) fn softmax_backward(p: &Tensor, gy: &Tensor) -> Tensor {
    let c = p.shape[0];
    let n = p.data.len() / c;
    let mut g = vec![0.0; p.data.len()];
    for ch in 0..c {
        let ps = &p.data[ch * n..(ch + 1) * n];
        let gs = &gy.data[ch * n..(ch + 1) * n];
        let dot: f64 = ps.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((o, &pv), &gv) in g[ch * n..(ch + 1) * n].iter_mut().zip(ps).zip(gs) {
            *o = pv * (gv - dot);
        }
    }
    Tensor {
        shape: p.shape.clone(),
        data: g,
    }
}

pub(super) fn coord_expect_backward(shape: &[usize], coords: &[Point3], gy: &Tensor) -> Tensor {
    let c = shape[0];
    let n = coords.len();
    let mut g = vec![0.0; c * n];
    for ch in 0..c {
        let go = &gy.data[ch * 3..ch * 3 + 3];
        for (o, p) in g[ch * n..(ch + 1) * n].iter_mut().zip(coords) {
            *o = go[0] * p[0] + go[1] * p[1] + go[2] * p[2];
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: g,
    }
}

pub(super) fn trilinear_backward(volume: &Volume3D, points: &Tensor, gy: &Tensor) -> Tensor {
    let mut g = vec![0.0; points.data.len()];
    for (i, (p, &go)) in points.data.chunks_exact(3).zip(&gy.data).enumerate() {
        if go == 0.0 {
            continue;
        }
        let (_, grad) = trilinear_with_grad(volume, [p[0], p[1], p[2]]);
        for a in 0..3 {
            g[i * 3 + a] = go * grad[a];
        }
    }
    Tensor {
        shape: points.shape.clone(),
        data: g,
    }
}

impl Graph {
    /// Softmax over all trailing (spatial) elements of each leading channel.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() < 2 {
            return Err(shape_err!("spatial_softmax expects [C, ...], got {:?}", t.shape));
        }
        let c = t.shape[0];
        let n = t.data.len() / c;
        let mut out = vec![0.0; t.data.len()];
        for ch in 0..c {
            let xs = &t.data[ch * n..(ch + 1) * n];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in &mut out[ch * n..(ch + 1) * n] {
                *o /= z;
            }
        }
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data: out,
            },
            Op::SpatialSoftmax(x),
            &[x],
        )
    }

    /// `sum_u p[c, u] * coords[u]` per channel: `[C, ...]` weights to `[C, 3]` points.
    pub fn coord_expect(&mut self, probs: Var, coords: Rc<Vec<Point3>>) -> Result<Var> {
        let t = self.value(probs);
        let c = t.shape[0];
        let n = t.data.len() / c;
        if n != coords.len() {
            return Err(shape_err!(
                "coord_expect: {n} weights per channel but {} coordinates",
                coords.len()
            ));
        }
        let mut out = vec![0.0; c * 3];
        for ch in 0..c {
            let ps = &t.data[ch * n..(ch + 1) * n];
            let mut acc = [0.0; 3];
            for (&w, p) in ps.iter().zip(coords.iter()) {
                acc[0] += w * p[0];
                acc[1] += w * p[1];
                acc[2] += w * p[2];
            }
            out[ch * 3..ch * 3 + 3].copy_from_slice(&acc);
        }
        self.push(
            Tensor {
                shape: vec![c, 3],
                data: out,
            },
            Op::CoordExpect { probs, coords },
            &[probs],
        )
    }

    /// Zero-padded trilinear lookup of a fixed volume at `[G, 3]` world points.
    pub fn trilinear(&mut self, volume: Rc<Volume3D>, points: Var) -> Result<Var> {
        let t = self.value(points);
        if t.shape.len() != 2 || t.shape[1] != 3 {
            return Err(shape_err!("trilinear expects [G, 3] points, got {:?}", t.shape));
        }
        let data = t
            .data
            .chunks_exact(3)
            .map(|p| trilinear_with_grad(&volume, [p[0], p[1], p[2]]).0)
            .collect();
        self.push(
            Tensor {
                shape: vec![t.shape[0]],
                data,
            },
            Op::Trilinear { points, volume },
            &[points],
        )
    }
}
