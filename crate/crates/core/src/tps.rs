//! Regularized thin-plate splines in closed form.
//!
//! A transform maps `p` to `W^T [p; 1] + sum_j v_j phi(|x_j - p|^2 / s^2)` with
//! `phi(q) = q^2 ln q`. Fitting solves the `(N+4) x (N+4)` saddle-point system
//!
//! ```text
//! [ M + lambda I   R ] [ V ]   [ Y ]
//! [ R^T            0 ] [ W ] = [ 0 ]
//! ```
//!
//! where `M_ij = phi(|x_i - x_j|^2 / s^2)` and row `j` of `R` is `[x_j, 1]`.
//! The kernel length scale `s` (mm) makes `lambda` independent of the
//! coordinate unit; the affine block is unaffected by it.
//!
//! The same math is available in-graph ([`fit_in_graph`], [`eval_in_graph`])
//! so fits of predicted landmarks can be differentiated end to end.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::linalg::Lu;
use crate::volume::{CoordField, Grid, LandmarkSet, Point3};
use crate::{Error, Result};

/// Kernel length scale used when none is given: distances enter the kernel in mm.
pub const DEFAULT_KERNEL_SCALE: f64 = 1.0;

/// `r^2 ln r`, with the limit value 0 at `r = 0`.
///
/// Callers pass squared (and scaled) distances.
pub fn kernel_phi(r: f64) -> Result<f64> {
    if r < 0.0 || r.is_nan() {
        return Err(Error::Invalid(format!("kernel argument {r} is negative")));
    }
    Ok(crate::autodiff::phi(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    /// Affine block, rows for `x, y, z, 1`.
    #[serde(rename = "W")]
    pub w: [[f64; 3]; 4],
    /// Non-affine coefficient per control point.
    #[serde(rename = "V")]
    pub v: Vec<[f64; 3]>,
    pub source_points: Vec<Point3>,
    pub lambda: f64,
    #[serde(default = "default_scale")]
    pub kernel_scale: f64,
}

fn default_scale() -> f64 {
    DEFAULT_KERNEL_SCALE
}

impl TpsTransform {
    /// The identity map anchored at `source_points`.
    pub fn identity(source_points: Vec<Point3>, kernel_scale: f64) -> Self {
        let mut w = [[0.0; 3]; 4];
        for (a, row) in w.iter_mut().take(3).enumerate() {
            row[a] = 1.0;
        }
        TpsTransform {
            w,
            v: vec![[0.0; 3]; source_points.len()],
            source_points,
            lambda: 0.0,
            kernel_scale,
        }
    }

    pub fn eval(&self, p: Point3) -> Point3 {
        let inv_s2 = 1.0 / (self.kernel_scale * self.kernel_scale);
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.w[0][a] * p[0] + self.w[1][a] * p[1] + self.w[2][a] * p[2] + self.w[3][a];
        }
        for (x, v) in self.source_points.iter().zip(&self.v) {
            let d2 = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2) + (x[2] - p[2]).powi(2);
            let k = crate::autodiff::phi(d2 * inv_s2);
            if k != 0.0 {
                out[0] += v[0] * k;
                out[1] += v[1] * k;
                out[2] += v[2] * k;
            }
        }
        out
    }

    /// Jacobian `d T / d p`, row `a` holding the gradient of output coordinate `a`.
    pub fn jacobian(&self, p: Point3) -> [[f64; 3]; 3] {
        let inv_s2 = 1.0 / (self.kernel_scale * self.kernel_scale);
        let mut jac = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                jac[a][b] = self.w[b][a];
            }
        }
        for (x, v) in self.source_points.iter().zip(&self.v) {
            let diff = [p[0] - x[0], p[1] - x[1], p[2] - x[2]];
            let d2 = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
            // d phi(d2 / s^2) / dp = phi'(q) / s^2 * 2 diff
            let dk = crate::autodiff::phi_prime(d2 * inv_s2) * inv_s2 * 2.0;
            for a in 0..3 {
                for b in 0..3 {
                    jac[a][b] += v[a] * dk * diff[b];
                }
            }
        }
        jac
    }

    pub fn apply(&self, lm: &LandmarkSet) -> LandmarkSet {
        lm.map(|p| self.eval(p))
    }

    /// Kernel matrix `M` of the control points, without regularization.
    pub fn kernel_matrix(&self) -> Vec<f64> {
        kernel_matrix(&self.source_points, self.kernel_scale)
    }

    /// `sum_j v_j` and `sum_j v_j x_j^T`, the side conditions a fit must satisfy.
    pub fn constraint_residuals(&self) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut s = [0.0; 3];
        let mut sx = [[0.0; 3]; 3];
        for (v, x) in self.v.iter().zip(&self.source_points) {
            for a in 0..3 {
                s[a] += v[a];
                for b in 0..3 {
                    sx[a][b] += v[a] * x[b];
                }
            }
        }
        (s, sx)
    }
}

fn kernel_matrix(points: &[Point3], scale: f64) -> Vec<f64> {
    let n = points.len();
    let inv_s2 = 1.0 / (scale * scale);
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2 = crate::volume::distance(points[i], points[j]).powi(2);
            m[i * n + j] = crate::autodiff::phi(d2 * inv_s2);
        }
    }
    m
}

fn check_pair(source: &LandmarkSet, target: &LandmarkSet, lambda: f64, scale: f64) -> Result<()> {
    if source.len() != target.len() {
        return Err(Error::Invalid(format!(
            "control point count mismatch: {} source vs {} target",
            source.len(),
            target.len()
        )));
    }
    if source.len() <= 3 {
        return Err(Error::Invalid(format!(
            "a 3D thin-plate spline needs more than 3 control points, got {}",
            source.len()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Invalid(format!("kernel scale must be > 0, got {scale}")));
    }
    Ok(())
}

/// Fits the transform carrying `source[j]` to `target[j]` with regularization `lambda`.
pub fn fit_tps(
    source: &LandmarkSet,
    target: &LandmarkSet,
    lambda: f64,
    kernel_scale: f64,
) -> Result<TpsTransform> {
    check_pair(source, target, lambda, kernel_scale)?;
    let n = source.len();
    let dim = n + 4;
    let m = kernel_matrix(&source.points, kernel_scale);
    let mut a = vec![0.0; dim * dim];
    for i in 0..n {
        for j in 0..n {
            a[i * dim + j] = m[i * n + j];
        }
        a[i * dim + i] += lambda;
        let x = source.points[i];
        for c in 0..3 {
            a[i * dim + n + c] = x[c];
            a[(n + c) * dim + i] = x[c];
        }
        a[i * dim + n + 3] = 1.0;
        a[(n + 3) * dim + i] = 1.0;
    }
    let mut b = vec![0.0; dim * 3];
    for (i, y) in target.points.iter().enumerate() {
        b[i * 3..i * 3 + 3].copy_from_slice(y);
    }
    let d = equilibration(&a, n);
    for r in 0..dim {
        for c in 0..dim {
            a[r * dim + c] *= d[r] * d[c];
        }
        for c in 0..3 {
            b[r * 3 + c] *= d[r];
        }
    }
    let lu = Lu::factor(&a, dim)?;
    let mut x = lu.solve(&b, 3);
    for r in 0..dim {
        for c in 0..3 {
            x[r * 3 + c] *= d[r];
        }
    }
    let v = (0..n).map(|i| [x[i * 3], x[i * 3 + 1], x[i * 3 + 2]]).collect();
    let mut w = [[0.0; 3]; 4];
    for (r, row) in w.iter_mut().enumerate() {
        row.copy_from_slice(&x[(n + r) * 3..(n + r) * 3 + 3]);
    }
    Ok(TpsTransform {
        w,
        v,
        source_points: source.points.clone(),
        lambda,
        kernel_scale,
    })
}

/// Symmetric diagonal scaling that brings the kernel block and the Schur
/// complement of the polynomial block to unit magnitude, so large `lambda`
/// does not masquerade as ill-conditioning.
fn equilibration(a: &[f64], n: usize) -> Vec<f64> {
    let dim = n + 4;
    let mut d = vec![1.0; dim];
    for i in 0..n {
        let big = (0..n).map(|j| a[i * dim + j].abs()).fold(0.0, f64::max);
        if big > 0.0 {
            d[i] = 1.0 / big.sqrt();
        }
    }
    for c in 0..4 {
        let s: f64 = (0..n).map(|i| (a[i * dim + n + c] * d[i]).powi(2)).sum();
        if s > 0.0 {
            d[n + c] = 1.0 / s.sqrt();
        }
    }
    d
}

/// Evaluates a transform at one point.
pub fn eval_tps(t: &TpsTransform, p: Point3) -> Point3 {
    t.eval(p)
}

/// Rasterizes `t` at every voxel of `grid` (backward-warp sampling coordinates).
pub fn dense_field(t: &TpsTransform, grid: &Grid) -> CoordField {
    CoordField {
        grid: *grid,
        points: grid.coordinates().into_iter().map(|p| t.eval(p)).collect(),
    }
}

/// `trace(V^T M V)`: the bending energy of the fitted spline.
pub fn bending_energy(t: &TpsTransform) -> f64 {
    let n = t.v.len();
    let m = t.kernel_matrix();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = m[i * n + j];
            if k != 0.0 {
                e += k * (t.v[i][0] * t.v[j][0] + t.v[i][1] * t.v[j][1] + t.v[i][2] * t.v[j][2]);
            }
        }
    }
    e
}

/// A fit living in an autodiff graph: `v` is `[N, 3]`, `w` is `[4, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct GraphTps {
    pub v: Var,
    pub w: Var,
    pub source: Var,
    pub kernel_scale: f64,
}

/// Differentiable fit of `source -> target` (`[N, 3]` each).
pub fn fit_in_graph(
    g: &mut Graph,
    source: Var,
    target: Var,
    lambda: f64,
    kernel_scale: f64,
) -> Result<GraphTps> {
    let n = g.shape(source)[0];
    if g.shape(source) != [n, 3] || g.shape(target) != [n, 3] {
        return Err(Error::Shape(format!(
            "tps fit needs [N, 3] point sets, got {:?} and {:?}",
            g.shape(source),
            g.shape(target)
        )));
    }
    if n <= 3 {
        return Err(Error::Invalid(format!(
            "a 3D thin-plate spline needs more than 3 control points, got {n}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let d = g.sq_dist(source, source)?;
    let k = g.tps_kernel(d, kernel_scale)?;
    let k = g.add_diag(k, lambda)?;
    let r = g.homogeneous(source)?;
    let top = g.hcat(k, r)?;
    let rt = g.transpose(r)?;
    let zero = g.constant(Tensor::zeros(vec![4, 4]));
    let bottom = g.hcat(rt, zero)?;
    let a = g.vcat(top, bottom)?;
    let pad = g.constant(Tensor::zeros(vec![4, 3]));
    let rhs = g.vcat(target, pad)?;
    // Pivot ratios depend on units, so judge conditioning on the equilibrated
    // system and solve the raw one, which keeps round-off in the gradients low.
    let d = equilibration(g.value(a).data(), n);
    let m = n + 4;
    let scaled: Vec<f64> = g.value(a).data().iter().enumerate().map(|(k, &x)| x * d[k / m] * d[k % m]).collect();
    Lu::factor(&scaled, m)?;
    let sol = g.solve_prechecked(a, rhs)?;
    let v = g.slice_rows(sol, 0, n)?;
    let w = g.slice_rows(sol, n, 4)?;
    Ok(GraphTps {
        v,
        w,
        source,
        kernel_scale,
    })
}

/// Differentiable evaluation at `[G, 3]` points.
pub fn eval_in_graph(g: &mut Graph, t: &GraphTps, points: Var) -> Result<Var> {
    let d = g.sq_dist(points, t.source)?;
    let k = g.tps_kernel(d, t.kernel_scale)?;
    let nonaffine = g.matmul(k, t.v)?;
    let h = g.homogeneous(points)?;
    let affine = g.matmul(h, t.w)?;
    g.add(affine, nonaffine)
}

/// Reads a graph fit back into a plain transform.
pub fn extract(g: &Graph, t: &GraphTps, lambda: f64) -> TpsTransform {
    let v = g
        .value(t.v)
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mut w = [[0.0; 3]; 4];
    for (r, c) in g.value(t.w).data().chunks_exact(3).enumerate() {
        w[r] = [c[0], c[1], c[2]];
    }
    let source_points = g
        .value(t.source)
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    TpsTransform {
        w,
        v,
        source_points,
        lambda,
        kernel_scale: t.kernel_scale,
    }
}

pub fn points_tensor(lm: &LandmarkSet) -> Tensor {
    Tensor::new(vec![lm.len(), 3], lm.flat()).expect("landmark sets are non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, hi: f64) -> LandmarkSet {
        LandmarkSet::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..hi),
                        rng.random_range(0.0..hi),
                        rng.random_range(0.0..hi),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn max_residual(t: &TpsTransform, src: &LandmarkSet, dst: &LandmarkSet) -> f64 {
        src.points
            .iter()
            .zip(&dst.points)
            .map(|(&x, &y)| crate::volume::distance(t.eval(x), y))
            .fold(0.0, f64::max)
    }

    #[test]
    fn phi_values() {
        assert_eq!(kernel_phi(1.0).unwrap(), 0.0);
        assert_eq!(kernel_phi(0.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((kernel_phi(e).unwrap() - 7.389056).abs() < 1e-6);
        assert!(kernel_phi(-1.0).is_err());
    }

    #[test]
    fn identity_correspondence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_set(&mut rng, 8, 32.0);
        let t = fit_tps(&src, &src, 0.0, DEFAULT_KERNEL_SCALE).unwrap();
        assert!(max_residual(&t, &src, &src) < 1e-8);
        assert!(bending_energy(&t).abs() < 1e-10);
    }

    #[test]
    fn large_lambda_approaches_affine_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = random_set(&mut rng, 8, 32.0);
        let dst = random_set(&mut rng, 8, 32.0);
        let wide = fit_tps(&src, &dst, 1e6, 64.0).unwrap();
        let tight = fit_tps(&src, &dst, 1e-3, 64.0).unwrap();
        assert!(bending_energy(&wide) < 1e-6 * bending_energy(&tight).abs().max(1.0));
        assert!(wide.v.iter().flatten().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn interpolates_at_lambda_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_set(&mut rng, 8, 32.0);
        let dst = random_set(&mut rng, 8, 32.0);
        let t = fit_tps(&src, &dst, 0.0, DEFAULT_KERNEL_SCALE).unwrap();
        assert!(max_residual(&t, &src, &dst) < 1e-6);
    }

    #[test]
    fn affine_identity_evaluates_exactly() {
        let t = TpsTransform::identity(vec![[0.0; 3]; 5], 10.0);
        for p in [[1.0, 2.0, 3.0], [-7.5, 0.0, 1e3]] {
            assert_eq!(t.eval(p), p);
        }
        assert_eq!(bending_energy(&t), 0.0);
    }

    #[test]
    fn eval_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_set(&mut rng, 9, 32.0);
        let dst = random_set(&mut rng, 9, 32.0);
        let t = fit_tps(&src, &dst, 0.3, 20.0).unwrap();
        for _ in 0..20 {
            let p = [
                rng.random_range(-5.0..40.0),
                rng.random_range(-5.0..40.0),
                rng.random_range(-5.0..40.0),
            ];
            let got = t.eval(p);
            for a in 0..3 {
                let mut want = t.w[3][a];
                for b in 0..3 {
                    want += t.w[b][a] * p[b];
                }
                for j in 0..9 {
                    let r: f64 = (0..3).map(|c| (src.points[j][c] - p[c]).powi(2)).sum();
                    let q = r / 400.0;
                    let k = if q > 0.0 { q * q * q.ln() } else { 0.0 };
                    want += t.v[j][a] * k;
                }
                assert!((got[a] - want).abs() < 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn constraints_hold_after_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for lambda in [0.0, 0.01, 1.0, 10.0] {
            let src = random_set(&mut rng, 8, 32.0);
            let dst = random_set(&mut rng, 8, 32.0);
            let t = fit_tps(&src, &dst, lambda, DEFAULT_KERNEL_SCALE).unwrap();
            let vnorm = t.v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            let (s, sx) = t.constraint_residuals();
            let tol = 1e-8 * vnorm.max(1e-300);
            assert!(s.iter().all(|x| x.abs() <= tol), "{s:?} vs {tol}");
            assert!(sx.iter().flatten().all(|x| x.abs() <= tol * 32.0), "{sx:?}");
        }
    }

    #[test]
    fn translation_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_set(&mut rng, 6, 16.0);
        let dst = src.map(|p| [p[0] + 2.0, p[1] - 1.0, p[2] + 0.5]);
        let t = fit_tps(&src, &dst, 0.0, 16.0).unwrap();
        let grid = Grid::unit([5, 4, 3]);
        let field = dense_field(&t, &grid);
        for (p, q) in grid.coordinates().iter().zip(&field.points) {
            assert!((q[0] - p[0] - 2.0).abs() < 1e-9);
            assert!((q[1] - p[1] + 1.0).abs() < 1e-9);
            assert!((q[2] - p[2] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_field_is_coordinate_grid() {
        let t = TpsTransform::identity(vec![[1.0, 2.0, 3.0]; 4], 8.0);
        let grid = Grid::new([4, 3, 5], [1.5, 1.0, 0.5], [-2.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense_field(&t, &grid).points, grid.coordinates());
    }

    #[test]
    fn degenerate_configurations_rejected() {
        // Coplanar sources leave R rank deficient.
        let src = LandmarkSet::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [2.0, 3.0, 0.0],
        ])
        .unwrap();
        assert!(matches!(
            fit_tps(&src, &src, 0.0, 4.0),
            Err(Error::Singular { .. })
        ));
        let short = LandmarkSet::new(vec![[0.0; 3]; 4]).unwrap();
        assert!(matches!(fit_tps(&src, &short, 0.0, 4.0), Err(Error::Invalid(_))));
    }

    #[test]
    fn jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = random_set(&mut rng, 7, 20.0);
        let dst = random_set(&mut rng, 7, 20.0);
        let t = fit_tps(&src, &dst, 0.1, 12.0).unwrap();
        let p = [4.0, 9.0, 13.0];
        let jac = t.jacobian(p);
        let h = 1e-6;
        for b in 0..3 {
            let (mut hi, mut lo) = (p, p);
            hi[b] += h;
            lo[b] -= h;
            let (fh, fl) = (t.eval(hi), t.eval(lo));
            for a in 0..3 {
                let fd = (fh[a] - fl[a]) / (2.0 * h);
                assert!((fd - jac[a][b]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn graph_fit_agrees_with_direct_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = random_set(&mut rng, 8, 32.0);
        let dst = random_set(&mut rng, 8, 32.0);
        let direct = fit_tps(&src, &dst, 0.5, 24.0).unwrap();
        let mut g = Graph::new();
        let s = g.constant(points_tensor(&src));
        let d = g.constant(points_tensor(&dst));
        let gt = fit_in_graph(&mut g, s, d, 0.5, 24.0).unwrap();
        let back = extract(&g, &gt, 0.5);
        let probe = random_set(&mut rng, 10, 32.0);
        let pv = g.constant(points_tensor(&probe));
        let ev = eval_in_graph(&mut g, &gt, pv).unwrap();
        for (i, p) in probe.points.iter().enumerate() {
            let want = direct.eval(*p);
            let got = back.eval(*p);
            for a in 0..3 {
                assert!((want[a] - got[a]).abs() < 1e-9);
                assert!((want[a] - g.value(ev).data()[i * 3 + a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_gradient_wrt_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = random_set(&mut rng, 6, 24.0);
        let dst = random_set(&mut rng, 6, 24.0);
        let probe = random_set(&mut rng, 5, 24.0);
        let (dt, pt) = (points_tensor(&dst), points_tensor(&probe));
        for lambda in [0.0, 0.5] {
            let (dt, pt) = (dt.clone(), pt.clone());
            let err = grad_check(
                move |g, s| {
                    let d = g.constant(dt.clone());
                    let t = fit_in_graph(g, s, d, lambda, 16.0)?;
                    // Control-point residuals plus off-node evaluations.
                    let at_nodes = eval_in_graph(g, &t, s)?;
                    let r = g.sub(at_nodes, d)?;
                    let r2 = g.square(r)?;
                    let p = g.constant(pt.clone());
                    let off = eval_in_graph(g, &t, p)?;
                    let off2 = g.square(off)?;
                    let a = g.sum(r2)?;
                    let b = g.mean(off2)?;
                    g.add(a, b)
                },
                &points_tensor(&src),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "lambda {lambda}: {err}");
        }
    }

    #[test]
    fn json_roundtrip_uses_documented_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_set(&mut rng, 5, 10.0);
        let t = fit_tps(&src, &src.map(|p| [p[1], p[0], p[2]]), 0.1, 10.0).unwrap();
        let text = serde_json::to_string(&t).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["W", "V", "source_points", "lambda"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        let back: TpsTransform = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
    }
}
