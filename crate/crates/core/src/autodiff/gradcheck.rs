use super::{Graph, Tensor, Var};
use crate::Result;

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).item())
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    check_coords(&f, x, eps, &all)
}

/// [`grad_check`] restricted to at most `max_coords` evenly strided coordinates.
pub fn grad_check_sampled<F>(f: F, x: &Tensor, eps: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let n = x.len();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let coords: Vec<usize> = (0..n).step_by(stride).collect();
    check_coords(&f, x, eps, &coords)
}

/// Analytic gradient and central difference at each of `coords`.
pub fn gradient_pairs<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(&g, xv);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = eval(f, &probe)?;
        probe.data[i] = orig - eps;
        let lo = eval(f, &probe)?;
        probe.data[i] = orig;
        out.push((analytic.data[i], (hi - lo) / (2.0 * eps)));
    }
    Ok(out)
}

fn check_coords<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(gradient_pairs(f, x, eps, coords)?
        .into_iter()
        .map(|(a, fd)| (a - fd).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}

fn central<F>(f: &F, probe: &mut Tensor, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let orig = probe.data[i];
    probe.data[i] = orig + h;
    let hi = eval(f, probe)?;
    probe.data[i] = orig - h;
    let lo = eval(f, probe)?;
    probe.data[i] = orig;
    Ok((hi - lo) / (2.0 * h))
}

/// Max over coordinates of `|analytic - fd| / max(|analytic|, |fd|, floor)`,
/// where each coordinate keeps its closest central difference among `steps`.
///
/// Truncation and kink error grow with the step while round-off shrinks, so a
/// correct gradient agrees at some step and a wrong one agrees at none.
pub fn max_relative_error<F>(f: F, x: &Tensor, steps: &[f64], floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(&g, xv);
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let a = analytic.data[i];
        let mut best = f64::INFINITY;
        for &h in steps {
            let fd = central(&f, &mut probe, i, h)?;
            best = best.min((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}
