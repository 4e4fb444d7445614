//! Elementwise, reduction and small dense-matrix operations.

use super::{Graph, Op, Tensor, Var};
use crate::error::shape_err;
use crate::linalg::{self, Lu};
use crate::Result;

pub(super) fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

pub(super) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err!("{what} expects a matrix, got {:?}", t.shape)),
    }
}

pub(super) fn transpose_raw(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data: out,
    }
}

pub(super) fn hsplit(t: &Tensor, left: usize) -> (Tensor, Tensor) {
    let (r, c) = (t.shape[0], t.shape[1]);
    let right = c - left;
    let mut a = Vec::with_capacity(r * left);
    let mut b = Vec::with_capacity(r * right);
    for row in t.data.chunks_exact(c) {
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    (
        Tensor {
            shape: vec![r, left],
            data: a,
        },
        Tensor {
            shape: vec![r, right],
            data: b,
        },
    )
}

pub(super) fn vsplit(t: &Tensor, top: usize) -> (Tensor, Tensor) {
    let (r, c) = (t.shape[0], t.shape[1]);
    (
        Tensor {
            shape: vec![top, c],
            data: t.data[..top * c].to_vec(),
        },
        Tensor {
            shape: vec![r - top, c],
            data: t.data[top * c..].to_vec(),
        },
    )
}

pub(super) fn slice_rows_backward(shape: &[usize], start: usize, gy: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(shape.to_vec());
    let c = shape[1];
    g.data[start * c..start * c + gy.data.len()].copy_from_slice(&gy.data);
    g
}

pub(super) fn matmul_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (n, m) = (a.shape[0], a.shape[1]);
    let k = b.shape[1];
    let bt = transpose_raw(b);
    let at = transpose_raw(a);
    let ga = linalg::matmul(&gy.data, &bt.data, n, k, m);
    let gb = linalg::matmul(&at.data, &gy.data, m, n, k);
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    )
}

pub(super) fn solve_backward(lu: &Lu, x: &Tensor, gx: &Tensor) -> (Tensor, Tensor) {
    let n = lu.dim();
    let k = x.shape[1];
    // grad_b = A^-T grad_x, grad_A = -grad_b x^T
    let gb = lu.solve_transpose(&gx.data, k);
    let mut ga = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..k {
                s += gb[i * k + c] * x.data[j * k + c];
            }
            ga[i * n + j] = -s;
        }
    }
    (
        Tensor {
            shape: vec![n, n],
            data: ga,
        },
        Tensor {
            shape: vec![n, k],
            data: gb,
        },
    )
}

pub(super) fn sq_dist_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (a.shape[0], a.shape[1]);
    let m = b.shape[0];
    let mut ga = vec![0.0; n * d];
    let mut gb = vec![0.0; m * d];
    for i in 0..n {
        for j in 0..m {
            let g = gy.data[i * m + j];
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                let diff = 2.0 * g * (a.data[i * d + c] - b.data[j * d + c]);
                ga[i * d + c] += diff;
                gb[j * d + c] -= diff;
            }
        }
    }
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    )
}

/// `q^2 ln q` with the limit value 0 at `q = 0`.
#[inline]
pub(crate) fn phi(q: f64) -> f64 {
    if q > 0.0 {
        q * q * q.ln()
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn phi_prime(q: f64) -> f64 {
    if q > 0.0 {
        q * (2.0 * q.ln() + 1.0)
    } else {
        0.0
    }
}

pub(super) fn tps_kernel_backward(x: &Tensor, inv_scale2: f64, gy: &Tensor) -> Tensor {
    zip(gy, x, |g, d| g * phi_prime(d * inv_scale2) * inv_scale2)
}

pub(super) fn row_norm_backward(x: &Tensor, y: &Tensor, gy: &Tensor) -> Tensor {
    let d = x.shape[1];
    let mut g = vec![0.0; x.data.len()];
    for (i, (&norm, &gi)) in y.data.iter().zip(&gy.data).enumerate() {
        // Subgradient 0 at the origin.
        if norm > 0.0 {
            for c in 0..d {
                g[i * d + c] = gi * x.data[i * d + c] / norm;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: g,
    }
}

impl Graph {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = map(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = map(self.value(a), |x| leaky_relu(x, slope));
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Euclidean norm of each row of a matrix.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims2(t, "row_norm")?;
        let data = t
            .data
            .chunks_exact(c)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor { shape: vec![r], data }, Op::RowNorm(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "matmul")?;
        let (m2, k) = dims2(self.value(b), "matmul")?;
        if m != m2 {
            return Err(shape_err!("matmul: {n}x{m} times {m2}x{k}"));
        }
        let data = linalg::matmul(&self.value(a).data, &self.value(b).data, n, m, k);
        self.push(
            Tensor {
                shape: vec![n, k],
                data,
            },
            Op::Matmul(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        dims2(self.value(a), "transpose")?;
        let v = transpose_raw(self.value(a));
        self.push(v, Op::Transpose(a), &[a])
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims2(self.value(a), "hcat")?;
        let (rb, cb) = dims2(self.value(b), "hcat")?;
        if ra != rb {
            return Err(shape_err!("hcat: {ra} rows vs {rb} rows"));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&self.value(a).data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.value(b).data[i * cb..(i + 1) * cb]);
        }
        self.push(
            Tensor {
                shape: vec![ra, ca + cb],
                data,
            },
            Op::HCat(a, b),
            &[a, b],
        )
    }

    /// `[a ; b]` for matrices with equal column counts.
    pub fn vcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims2(self.value(a), "vcat")?;
        let (rb, cb) = dims2(self.value(b), "vcat")?;
        if ca != cb {
            return Err(shape_err!("vcat: {ca} cols vs {cb} cols"));
        }
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        self.push(
            Tensor {
                shape: vec![ra + rb, ca],
                data,
            },
            Op::VCat(a, b),
            &[a, b],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows {start}..{} of {r} rows", start + len));
        }
        let data = self.value(x).data[start * c..(start + len) * c].to_vec();
        self.push(
            Tensor {
                shape: vec![len, c],
                data,
            },
            Op::SliceRows { x, start },
            &[x],
        )
    }

    /// Appends a column of ones: rows `x` become `[x, 1]`.
    pub fn homogeneous(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "homogeneous")?;
        let mut data = Vec::with_capacity(r * (c + 1));
        for row in self.value(x).data.chunks_exact(c) {
            data.extend_from_slice(row);
            data.push(1.0);
        }
        self.push(
            Tensor {
                shape: vec![r, c + 1],
                data,
            },
            Op::Homogeneous(x),
            &[x],
        )
    }

    /// `x + c I` for a square matrix.
    pub fn add_diag(&mut self, x: Var, c: f64) -> Result<Var> {
        let (r, cols) = dims2(self.value(x), "add_diag")?;
        if r != cols {
            return Err(shape_err!("add_diag needs a square matrix, got {r}x{cols}"));
        }
        let mut v = self.value(x).clone();
        for i in 0..r {
            v.data[i * r + i] += c;
        }
        self.push(v, Op::AddDiag(x), &[x])
    }

    /// `A^-1 B` by LU with partial pivoting; rejects ill-conditioned `A`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        self.solve_with(a, b, Lu::factor)
    }

    /// `solve` without the conditioning threshold; the caller has already
    /// judged `A` on a rescaled copy.
    pub fn solve_prechecked(&mut self, a: Var, b: Var) -> Result<Var> {
        self.solve_with(a, b, Lu::factor_unchecked)
    }

    fn solve_with(&mut self, a: Var, b: Var, factor: fn(&[f64], usize) -> Result<Lu>) -> Result<Var> {
        let (n, n2) = dims2(self.value(a), "solve")?;
        let (nb, k) = dims2(self.value(b), "solve")?;
        if n != n2 || nb != n {
            return Err(shape_err!("solve: A {n}x{n2}, b {nb}x{k}"));
        }
        let lu = factor(&self.value(a).data, n)?;
        let data = lu.solve(&self.value(b).data, k);
        self.push(
            Tensor {
                shape: vec![n, k],
                data,
            },
            Op::Solve { a, b, lu },
            &[a, b],
        )
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(a), "sq_dist")?;
        let (m, d2) = dims2(self.value(b), "sq_dist")?;
        if d != d2 {
            return Err(shape_err!("sq_dist: dimension {d} vs {d2}"));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let ra = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &bv[j * d..(j + 1) * d];
                data[i * m + j] = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::SqDist(a, b),
            &[a, b],
        )
    }

    /// Elementwise `phi(d / s^2)` with `phi(q) = q^2 ln q`, applied to squared distances.
    pub fn tps_kernel(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(crate::Error::Invalid(format!("kernel scale {scale}")));
        }
        let inv_scale2 = 1.0 / (scale * scale);
        if self.value(x).data.iter().any(|&d| d < 0.0) {
            return Err(crate::Error::Invalid(
                "tps kernel applied to a negative squared distance".into(),
            ));
        }
        let v = map(self.value(x), |d| phi(d * inv_scale2));
        self.push(v, Op::TpsKernel { x, inv_scale2 }, &[x])
    }
}

#[inline]
pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x * slope
    }
}
