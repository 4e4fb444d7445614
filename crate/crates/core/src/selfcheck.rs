//! Oracle suites: finite-difference gradients of every graph op and of the
//! full training objective, closed-form spline checks, and brute-force loss
//! references.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{apply_affine, rc_augment, AffineAug, RcConfig};
use crate::autodiff::{max_relative_error, Graph, Tensor, Var};
use crate::error::Result;
use crate::linalg::Lu;
use crate::losses::{
    alpha, blend, consistency_terms, registration_loss, step_losses, warped_predictions, SplineSettings,
    SubjectTerm, TemplateRef,
};
use crate::model::{init_params, predict, BlockConfig, DetectorConfig};
use crate::tps::{bending_energy, fit_tps, points_tensor};
use crate::volume::{distance, sample_trilinear, Grid, LandmarkSet, Point3, Volume3D};

pub const GRAD_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;
const EPS: f64 = 1e-5;
/// Steps tried on the training objective, which has dense kinks from
/// trilinear sampling and more round-off than a single op.
const PROGRAM_STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&Check> {
        self.checks
            .iter()
            .find(|c| !c.passed)
            .or_else(|| self.checks.iter().max_by(|a, b| (a.value / a.tolerance).total_cmp(&(b.value / b.tolerance))))
    }
}

fn timed(suite: &str, f: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteReport> {
    let t = Instant::now();
    let checks = f()?;
    Ok(SuiteReport {
        suite: suite.into(),
        checks,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y).to_vec());
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut t = rand_tensor(rng, vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] += n as f64;
    }
    t
}

type Program = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn op_programs(seed: u64) -> Vec<(&'static str, Tensor, Program, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(&'static str, Tensor, Program, f64)> = Vec::new();
    let c34 = rand_tensor(&mut rng, vec![3, 4]);
    macro_rules! binary {
        ($name:literal, $op:ident) => {{
            let c = c34.clone();
            let prog: Program = Box::new(move |g, x| {
                let cv = g.constant(c.clone());
                let a = g.$op(x, cv)?;
                let b = g.$op(cv, x)?;
                let s = g.add(a, b)?;
                weighted_sum(g, s, 1)
            });
            out.push(($name, rand_tensor(&mut rng, vec![3, 4]), prog, EPS));
        }};
    }
    binary!("add", add);
    binary!("sub", sub);
    binary!("mul", mul);
    macro_rules! unary {
        ($name:literal, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let prog: Program = Box::new(move |$g, $v| {
                let y = $body?;
                weighted_sum($g, y, 2)
            });
            out.push(($name, $x, prog, EPS));
        }};
    }
    unary!("scale", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.scale(x, 1.7));
    unary!("add_scalar", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.add_scalar(x, 0.3));
    unary!("square", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.square(x));
    unary!("relu", away_from_zero(&mut rng, vec![3, 4]), |g, x| g.relu(x));
    unary!("leaky_relu", away_from_zero(&mut rng, vec![3, 4]), |g, x| g.leaky_relu(x, 0.2));
    unary!("sum", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.sum(x));
    unary!("mean", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.mean(x));
    unary!("reshape", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.reshape(x, vec![2, 6]));
    unary!("row_norm", away_from_zero(&mut rng, vec![4, 3]), |g, x| g.row_norm(x));
    unary!("transpose", rand_tensor(&mut rng, vec![3, 4]), |g, x| g.transpose(x));
    unary!("homogeneous", rand_tensor(&mut rng, vec![5, 3]), |g, x| g.homogeneous(x));
    unary!("add_diag", rand_tensor(&mut rng, vec![4, 4]), |g, x| g.add_diag(x, 0.4));
    unary!("slice_rows", rand_tensor(&mut rng, vec![5, 3]), |g, x| g.slice_rows(x, 1, 3));
    {
        let (l, r) = (rand_tensor(&mut rng, vec![2, 3]), rand_tensor(&mut rng, vec![4, 2]));
        let prog: Program = Box::new(move |g, x| {
            let lv = g.constant(l.clone());
            let rv = g.constant(r.clone());
            let a = g.matmul(lv, x)?;
            let b = g.matmul(x, rv)?;
            let sa = weighted_sum(g, a, 3)?;
            let sb = weighted_sum(g, b, 4)?;
            g.add(sa, sb)
        });
        out.push(("matmul", rand_tensor(&mut rng, vec![3, 4]), prog, EPS));
    }
    {
        let c = rand_tensor(&mut rng, vec![3, 2]);
        let prog: Program = Box::new(move |g, x| {
            let cv = g.constant(c.clone());
            let a = g.hcat(x, cv)?;
            let b = g.hcat(cv, x)?;
            let sa = weighted_sum(g, a, 5)?;
            let sb = weighted_sum(g, b, 6)?;
            g.add(sa, sb)
        });
        out.push(("hcat", rand_tensor(&mut rng, vec![3, 4]), prog, EPS));
    }
    {
        let c = rand_tensor(&mut rng, vec![2, 4]);
        let prog: Program = Box::new(move |g, x| {
            let cv = g.constant(c.clone());
            let a = g.vcat(x, cv)?;
            let b = g.vcat(cv, x)?;
            let sa = weighted_sum(g, a, 7)?;
            let sb = weighted_sum(g, b, 8)?;
            g.add(sa, sb)
        });
        out.push(("vcat", rand_tensor(&mut rng, vec![3, 4]), prog, EPS));
    }
    {
        let (a, b) = (well_conditioned(&mut rng, 5), rand_tensor(&mut rng, vec![5, 3]));
        let bc = b.clone();
        let prog: Program = Box::new(move |g, x| {
            let bv = g.constant(bc.clone());
            let y = g.solve(x, bv)?;
            weighted_sum(g, y, 9)
        });
        out.push(("solve/matrix", a.clone(), prog, EPS));
        let prog: Program = Box::new(move |g, x| {
            let av = g.constant(a.clone());
            let y = g.solve(av, x)?;
            weighted_sum(g, y, 9)
        });
        out.push(("solve/rhs", b, prog, EPS));
    }
    {
        let c = rand_tensor(&mut rng, vec![4, 3]);
        let prog: Program = Box::new(move |g, x| {
            let cv = g.constant(c.clone());
            let a = g.sq_dist(x, cv)?;
            let b = g.sq_dist(cv, x)?;
            let sa = weighted_sum(g, a, 10)?;
            let sb = weighted_sum(g, b, 11)?;
            g.add(sa, sb)
        });
        out.push(("sq_dist", rand_tensor(&mut rng, vec![5, 3]), prog, EPS));
    }
    {
        let c = rand_tensor(&mut rng, vec![4, 3]);
        let prog: Program = Box::new(move |g, x| {
            let cv = g.constant(c.clone());
            let d = g.sq_dist(x, cv)?;
            let k = g.tps_kernel(d, 0.7)?;
            weighted_sum(g, k, 12)
        });
        out.push(("tps_kernel", rand_tensor(&mut rng, vec![5, 3]), prog, EPS));
    }
    {
        let w = rand_tensor(&mut rng, vec![2, 2, 3, 3, 3]);
        let x = rand_tensor(&mut rng, vec![2, 5, 4, 6]);
        let (wc, xc) = (w.clone(), x.clone());
        let prog: Program = Box::new(move |g, x| {
            let wv = g.constant(wc.clone());
            let y = g.conv3d(x, wv, 1)?;
            weighted_sum(g, y, 13)
        });
        out.push(("conv3d/input", x, prog, EPS));
        let prog: Program = Box::new(move |g, w| {
            let xv = g.constant(xc.clone());
            let y = g.conv3d(xv, w, 1)?;
            weighted_sum(g, y, 13)
        });
        out.push(("conv3d/weight", w, prog, EPS));
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let gamma = rand_tensor(&mut rng, vec![2]);
        let beta = rand_tensor(&mut rng, vec![2]);
        let (gc, bc) = (gamma.clone(), beta.clone());
        let prog: Program = Box::new(move |g, x| {
            let gv = g.constant(gc.clone());
            let bv = g.constant(bc.clone());
            let y = g.instance_norm(x, gv, bv)?;
            weighted_sum(g, y, 14)
        });
        out.push(("instance_norm/input", x.clone(), prog, EPS));
        let (xc, bc) = (x.clone(), beta.clone());
        let prog: Program = Box::new(move |g, gm| {
            let xv = g.constant(xc.clone());
            let bv = g.constant(bc.clone());
            let y = g.instance_norm(xv, gm, bv)?;
            weighted_sum(g, y, 14)
        });
        out.push(("instance_norm/scale", gamma.clone(), prog, EPS));
        let prog: Program = Box::new(move |g, b| {
            let xv = g.constant(x.clone());
            let gv = g.constant(gamma.clone());
            let y = g.instance_norm(xv, gv, b)?;
            weighted_sum(g, y, 14)
        });
        out.push(("instance_norm/shift", beta, prog, EPS));
    }
    {
        let n = 2 * 4 * 4 * 4;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(vec![2, 4, 4, 4], vals).expect("shape matches");
        let prog: Program = Box::new(|g, x| {
            let y = g.max_pool3d(x)?;
            weighted_sum(g, y, 15)
        });
        out.push(("max_pool3d", x, prog, 1e-6));
    }
    unary!("spatial_softmax", rand_tensor(&mut rng, vec![2, 3, 3, 2]), |g, x| g.spatial_softmax(x));
    {
        let coords = Rc::new(Grid::unit([2, 3, 3]).coordinates());
        let prog: Program = Box::new(move |g, x| {
            let y = g.coord_expect(x, coords.clone())?;
            weighted_sum(g, y, 16)
        });
        out.push(("coord_expect", rand_tensor(&mut rng, vec![2, 3, 3, 2]), prog, EPS));
    }
    {
        let vol = Rc::new(Volume3D::from_fn(Grid::unit([6, 6, 6]), |p| {
            (0.3 * p[0]).sin() + (0.2 * p[1] * p[2]).cos()
        }));
        let pts: Vec<f64> = (0..12)
            .map(|_| rng.random_range(0.0..4.0f64).floor() + rng.random_range(0.1..0.9))
            .collect();
        let prog: Program = Box::new(move |g, x| {
            let y = g.trilinear(vol.clone(), x)?;
            weighted_sum(g, y, 17)
        });
        out.push(("trilinear", Tensor::matrix(4, 3, pts).expect("shape matches"), prog, EPS));
    }
    out
}

/// Small end-to-end problem: `8^3` volumes, two subjects, `landmarks` sites.
pub struct TotalLossProblem {
    pub detector: DetectorConfig,
    pub params: Vec<Tensor>,
    pub template: Rc<TemplateRef>,
    pub pre: Vec<Rc<Volume3D>>,
    pub inputs: Vec<Volume3D>,
    pub spline: SplineSettings,
    pub eta: f64,
}

impl TotalLossProblem {
    pub fn new(landmarks: usize, seed: u64) -> Result<Self> {
        let grid = Grid::unit([8, 8, 8]);
        let template = Volume3D::from_fn(grid, |p| {
            let r2 = (p[0] - 3.2).powi(2) + (p[1] - 3.8).powi(2) + (p[2] - 3.5).powi(2);
            0.8 * (-r2 / 6.0).exp() + 0.1 * (0.7 * p[0]).sin() * (0.4 * p[2]).cos() + 0.2
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<Point3> = (0..landmarks)
            .map(|_| [0; 3].map(|_| rng.random_range(2.0..5.0)))
            .collect();
        let detector = DetectorConfig {
            input_shape: [8, 8, 8],
            downsample: 1,
            blocks: vec![
                BlockConfig { channels: 3, pool: true },
                BlockConfig { channels: 3, pool: false },
            ],
            landmarks,
            kernel: 3,
        };
        let params = init_params(&detector, seed).tensors;
        let mut pre = Vec::new();
        let mut inputs = Vec::new();
        for k in 0..2 {
            let sign = if k == 0 { 1.0 } else { -1.0 };
            let aug = AffineAug::from_params(
                [4.0 * sign, -3.0, 6.0 * sign],
                [0.3 * sign, -0.2, 0.1],
                [1.05, 0.97, 1.0],
                [0.0; 3],
                grid.center(),
                grid.spacing,
            )?;
            let moved = apply_affine(&template, &aug);
            inputs.push(rc_augment(&moved, &RcConfig::default(), seed + k as u64)?);
            pre.push(Rc::new(moved));
        }
        Ok(TotalLossProblem {
            detector,
            params,
            template: Rc::new(TemplateRef::new(template, LandmarkSet::new(sites)?)),
            pre,
            inputs,
            spline: SplineSettings {
                lambda: 0.3,
                kernel_scale: 4.0,
            },
            eta: 0.5,
        })
    }

    /// Total loss as a function of parameter tensor `index`, others fixed.
    pub fn program(&self, index: usize) -> impl Fn(&mut Graph, Var) -> Result<Var> + '_ {
        move |g, x| {
            let vars: Vec<Var> = self
                .params
                .iter()
                .enumerate()
                .map(|(i, t)| if i == index { x } else { g.constant(t.clone()) })
                .collect();
            let subjects = self
                .inputs
                .iter()
                .zip(&self.pre)
                .map(|(inp, pre)| {
                    Ok(SubjectTerm {
                        volume: Rc::clone(pre),
                        pred: predict(g, &self.detector, &vars, inp)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(step_losses(g, &self.template, &subjects, self.spline, self.eta, true)?.total)
        }
    }
}

pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    timed("gradient", || {
        let mut checks = Vec::new();
        for (name, x, prog, eps) in op_programs(seed) {
            let err = max_relative_error(prog, &x, &[eps], GRAD_FLOOR)?;
            checks.push(Check::below(format!("op {name}"), err, GRAD_TOL));
        }
        for landmarks in [4, 6] {
            let problem = TotalLossProblem::new(landmarks, seed)?;
            let names: Vec<String> = problem.detector.param_specs().into_iter().map(|(n, _)| n).collect();
            for (i, name) in names.iter().enumerate() {
                let err = max_relative_error(problem.program(i), &problem.params[i], &PROGRAM_STEPS, GRAD_FLOOR)?;
                checks.push(Check::below(format!("total loss L={landmarks} d/d {name}"), err, GRAD_TOL));
            }
        }
        Ok(checks)
    })
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(0.0..extent))).collect()
}

/// Least-squares affine map `[x 1] W` carrying `src` to `dst`.
pub fn affine_least_squares(src: &[Point3], dst: &[Point3]) -> Result<[[f64; 3]; 4]> {
    let mut ata = [0.0; 16];
    let mut atb = [0.0; 12];
    for (x, y) in src.iter().zip(dst) {
        let h = [x[0], x[1], x[2], 1.0];
        for r in 0..4 {
            for c in 0..4 {
                ata[r * 4 + c] += h[r] * h[c];
            }
            for c in 0..3 {
                atb[r * 3 + c] += h[r] * y[c];
            }
        }
    }
    let w = Lu::factor(&ata, 4)?.solve(&atb, 3);
    let mut out = [[0.0; 3]; 4];
    for r in 0..4 {
        out[r].copy_from_slice(&w[r * 3..r * 3 + 3]);
    }
    Ok(out)
}

/// Spline oracles on 100 random 8-point configurations in a 48 mm box.
pub fn tps_suite(seed: u64, kernel_scale: f64) -> Result<SuiteReport> {
    timed("tps", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = kernel_scale;
        let mut interp = 0.0f64;
        let mut affine = 0.0f64;
        let mut constraint = 0.0f64;
        let mut increases = 0usize;
        let mut worst_increase = 0.0f64;
        for _ in 0..100 {
            let src = random_points(&mut rng, 8, 48.0);
            let dst: Vec<Point3> = src
                .iter()
                .map(|p| [0, 1, 2].map(|a| p[a] + rng.random_range(-4.0..4.0)))
                .collect();
            let (ls, ld) = (LandmarkSet::new(src.clone())?, LandmarkSet::new(dst.clone())?);
            let t0 = fit_tps(&ls, &ld, 0.0, s)?;
            for (x, y) in src.iter().zip(&dst) {
                interp = interp.max(distance(t0.eval(*x), *y));
            }
            let t_inf = fit_tps(&ls, &ld, 1e6, s)?;
            let w = affine_least_squares(&src, &dst)?;
            for x in &src {
                let a: Point3 = [0, 1, 2].map(|c| x[0] * w[0][c] + x[1] * w[1][c] + x[2] * w[2][c] + w[3][c]);
                affine = affine.max(distance(t_inf.eval(*x), a));
            }
            let mut energies = Vec::new();
            for lambda in [0.0, 1e-3, 1e-1, 1.0, 10.0] {
                let t = fit_tps(&ls, &ld, lambda, s)?;
                let (sum, moment) = t.constraint_residuals();
                let m = sum.iter().chain(moment.iter().flatten()).fold(0.0f64, |m, v| m.max(v.abs()));
                constraint = constraint.max(m);
                if lambda > 0.0 {
                    energies.push(bending_energy(&t));
                }
            }
            for pair in energies.windows(2) {
                let rise = pair[1] - pair[0];
                if rise > 1e-12 * pair[0].abs() {
                    increases += 1;
                    worst_increase = worst_increase.max(rise);
                }
            }
        }
        Ok(vec![
            Check::below("lambda=0 interpolation residual", interp, 1e-6),
            Check::below("lambda=1e6 deviation from affine least squares", affine, 1e-3),
            Check::below("side-condition residual", constraint, 1e-8),
            Check {
                name: "bending energy nonincreasing in lambda".into(),
                value: worst_increase,
                tolerance: 0.0,
                passed: increases == 0,
            },
        ])
    })
}

/// Brute-force registration loss: direct spline fits and per-voxel loops.
pub fn naive_registration(template: &Volume3D, p: &LandmarkSet, subjects: &[(Volume3D, LandmarkSet)], spline: SplineSettings) -> Result<f64> {
    let mut total = 0.0;
    for (vol, pred) in subjects {
        let t = fit_tps(p, pred, spline.lambda, spline.kernel_scale)?;
        let mut acc = 0.0;
        let [nx, ny, nz] = template.shape();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let x = template.grid.world(i, j, k);
                    let d = sample_trilinear(vol, t.eval(x)) - template.get(i, j, k) as f64;
                    acc += d * d;
                }
            }
        }
        total += acc / template.grid.len() as f64;
    }
    Ok(total / subjects.len() as f64)
}

/// Brute-force consistency terms.
pub fn naive_consistency(p: &LandmarkSet, preds: &[LandmarkSet], spline: SplineSettings) -> Result<(f64, f64)> {
    let warped: Vec<Vec<Point3>> = preds
        .iter()
        .map(|y| {
            let t = fit_tps(y, p, spline.lambda, spline.kernel_scale)?;
            Ok(y.points.iter().map(|&q| t.eval(q)).collect())
        })
        .collect::<Result<_>>()?;
    let l = p.len() as f64;
    let m = preds.len();
    let mut pair_sum = 0.0;
    let mut pairs = 0.0;
    for r in 0..m {
        for j in r + 1..m {
            let mut d = 0.0;
            for i in 0..p.len() {
                d += distance(warped[r][i], warped[j][i]);
            }
            pair_sum += d / l;
            pairs += 1.0;
        }
    }
    let mut tmpl = 0.0;
    for w in &warped {
        let mut d = 0.0;
        for i in 0..p.len() {
            d += distance(w[i], p.points[i]);
        }
        tmpl += d / l;
    }
    Ok((pair_sum / pairs, tmpl / m as f64))
}

pub fn loss_suite(seed: u64) -> Result<SuiteReport> {
    timed("loss", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg_err = 0.0f64;
        let mut cons_err = 0.0f64;
        for trial in 0..5 {
            let grid = Grid::unit([7, 6, 8]);
            let phase: f64 = rng.random_range(0.0..3.0);
            let template = Volume3D::from_fn(grid, |q| (0.5 * q[0] + phase).sin() * (0.3 * q[1]).cos() + 0.05 * q[2]);
            let p = LandmarkSet::new(random_points(&mut rng, 6, 5.0))?;
            let m = 2 + trial % 2;
            let mut subjects = Vec::new();
            for _ in 0..m {
                let vol = Volume3D::from_fn(grid, |q| (0.4 * q[2] + phase).cos() + 0.1 * q[0] * q[1] / 10.0);
                let pred = p.map(|x| [0, 1, 2].map(|a| x[a] + rng.random_range(-0.8..0.8)));
                subjects.push((vol, pred));
            }
            let spline = SplineSettings {
                lambda: rng.random_range(0.01..2.0),
                kernel_scale: 6.0,
            };
            let mut g = Graph::new();
            let t = TemplateRef::new(template.clone(), p.clone());
            let terms: Vec<SubjectTerm> = subjects
                .iter()
                .map(|(v, y)| SubjectTerm {
                    volume: Rc::new(v.clone()),
                    pred: g.constant(points_tensor(y)),
                })
                .collect();
            let reg = registration_loss(&mut g, &t, &terms, spline)?;
            let warped = warped_predictions(&mut g, &t, &terms, spline)?;
            let (c1, c2) = consistency_terms(&mut g, &warped, &p)?;
            let naive_reg = naive_registration(&template, &p, &subjects, spline)?;
            let preds: Vec<LandmarkSet> = subjects.iter().map(|(_, y)| y.clone()).collect();
            let (n1, n2) = naive_consistency(&p, &preds, spline)?;
            reg_err = reg_err.max((g.value(reg).item() - naive_reg).abs());
            cons_err = cons_err
                .max((g.value(c1).item() - n1).abs())
                .max((g.value(c2).item() - n2).abs());
        }
        Ok(vec![
            Check::below("registration loss vs per-voxel loop", reg_err, 1e-12),
            Check::below("consistency terms vs double loop", cons_err, 1e-12),
            Check {
                name: "alpha(0) == 0".into(),
                value: alpha(0.0)?,
                tolerance: 0.0,
                passed: alpha(0.0)? == 0.0,
            },
            Check::below("alpha(0.5) vs 0.848284", (alpha(0.5)? - 0.848284).abs(), 1e-6),
            Check::below("alpha(1) vs 0.986614", (alpha(1.0)? - 0.986614).abs(), 1e-6),
            Check::below("blend(2, 4, 0.5) vs 3.696568", (blend(2.0, 4.0, 0.5)? - 3.696568).abs(), 1e-6),
        ])
    })
}

pub fn run_all(seed: u64, kernel_scale: f64) -> Result<Vec<SuiteReport>> {
    Ok(vec![gradient_suite(seed)?, tps_suite(seed, kernel_scale)?, loss_suite(seed)?])
}
