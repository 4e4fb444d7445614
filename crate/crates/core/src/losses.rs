//! Training objectives: image similarity after warping each subject onto the
//! template through its landmark spline, landmark consistency across subjects
//! and against the template, and the curriculum blend of the two.

use std::rc::Rc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::tps::{eval_in_graph, fit_in_graph};
use crate::volume::{LandmarkSet, Volume3D};
use crate::{Error, Result};

/// Curriculum weight `2 / (1 + exp(-5 eta)) - 1`.
pub fn alpha(eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Invalid(format!("training progress {eta} outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-5.0 * eta).exp()) - 1.0)
}

/// `(1 - alpha) * registration + alpha * consistency`.
pub fn blend(registration: f64, consistency: f64, eta: f64) -> Result<f64> {
    let a = alpha(eta)?;
    Ok((1.0 - a) * registration + a * consistency)
}

/// Template side of a batch; shared by all subjects.
pub struct TemplateRef {
    pub volume: Rc<Volume3D>,
    pub landmarks: LandmarkSet,
    /// Template voxel coordinates in storage order, `[G, 3]`.
    pub coords: Tensor,
}

impl TemplateRef {
    pub fn new(volume: Volume3D, landmarks: LandmarkSet) -> Self {
        let pts = volume.grid.coordinates();
        let coords = Tensor::new(vec![pts.len(), 3], pts.into_iter().flatten().collect())
            .expect("grid is non-empty");
        TemplateRef {
            volume: Rc::new(volume),
            landmarks,
            coords,
        }
    }
}

/// One subject of a step: its un-augmented-contrast volume and its predicted landmarks `[L, 3]`.
#[derive(Clone)]
pub struct SubjectTerm {
    pub volume: Rc<Volume3D>,
    pub pred: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SplineSettings {
    pub lambda: f64,
    pub kernel_scale: f64,
}

/// Graph nodes of every loss component.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub registration: Var,
    pub cons1: Var,
    pub cons2: Var,
    pub total: Var,
    pub alpha: f64,
}

fn check_landmarks(g: &Graph, t: &TemplateRef, subjects: &[SubjectTerm]) -> Result<()> {
    let l = t.landmarks.len();
    for s in subjects {
        if g.shape(s.pred) != [l, 3] {
            return Err(Error::Shape(format!(
                "landmark count mismatch: template has {l}, prediction is {:?}",
                g.shape(s.pred)
            )));
        }
    }
    Ok(())
}

/// Mean over subjects of the MSE between each subject sampled through the
/// template-to-subject spline and the template.
pub fn registration_loss(
    g: &mut Graph,
    t: &TemplateRef,
    subjects: &[SubjectTerm],
    spline: SplineSettings,
) -> Result<Var> {
    if subjects.is_empty() {
        return Err(Error::Invalid("registration loss needs at least one subject".into()));
    }
    check_landmarks(g, t, subjects)?;
    let p = g.constant(crate::tps::points_tensor(&t.landmarks));
    let coords = g.constant(t.coords.clone());
    let target = g.constant(Tensor::vector(t.volume.to_f64()));
    let mut acc: Option<Var> = None;
    for s in subjects {
        if s.volume.shape() != t.volume.shape() {
            return Err(Error::Shape(format!(
                "subject {:?} vs template {:?}",
                s.volume.shape(),
                t.volume.shape()
            )));
        }
        let rev = fit_in_graph(g, p, s.pred, spline.lambda, spline.kernel_scale)?;
        let field = eval_in_graph(g, &rev, coords)?;
        let warped = g.trilinear(s.volume.clone(), field)?;
        let diff = g.sub(warped, target)?;
        let sq = g.square(diff)?;
        let mse = g.mean(sq)?;
        acc = Some(match acc {
            None => mse,
            Some(a) => g.add(a, mse)?,
        });
    }
    g.scale(acc.expect("non-empty"), 1.0 / subjects.len() as f64)
}

/// Subject-to-template spline applied to each subject's own predictions.
///
/// At its own control points a fit satisfies `T(x) = y - lambda v`, which is
/// evaluated directly: the residual is then exactly zero when the spline is
/// affine instead of solver round-off.
pub fn warped_predictions(
    g: &mut Graph,
    t: &TemplateRef,
    subjects: &[SubjectTerm],
    spline: SplineSettings,
) -> Result<Vec<Var>> {
    check_landmarks(g, t, subjects)?;
    let p = g.constant(crate::tps::points_tensor(&t.landmarks));
    subjects
        .iter()
        .map(|s| {
            let fwd = fit_in_graph(g, s.pred, p, spline.lambda, spline.kernel_scale)?;
            let shrink = g.scale(fwd.v, -spline.lambda)?;
            g.add(p, shrink)
        })
        .collect()
}

fn mean_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let n = g.row_norm(d)?;
    g.mean(n)
}

/// Pairwise and template consistency terms from warped predictions.
pub fn consistency_terms(g: &mut Graph, warped: &[Var], template: &LandmarkSet) -> Result<(Var, Var)> {
    let m = warped.len();
    if m < 2 {
        return Err(Error::Invalid(format!("consistency needs at least 2 subjects, got {m}")));
    }
    for &w in warped {
        if g.shape(w) != [template.len(), 3] {
            return Err(Error::Shape(format!(
                "landmark count mismatch: template has {}, warped set is {:?}",
                template.len(),
                g.shape(w)
            )));
        }
    }
    let p = g.constant(crate::tps::points_tensor(template));
    let mut pair_sum: Option<Var> = None;
    for r in 0..m {
        for j in r + 1..m {
            let d = mean_distance(g, warped[r], warped[j])?;
            pair_sum = Some(match pair_sum {
                None => d,
                Some(a) => g.add(a, d)?,
            });
        }
    }
    let pairs = m * (m - 1) / 2;
    let term1 = g.scale(pair_sum.expect("m >= 2"), 1.0 / pairs as f64)?;
    let mut tmpl_sum: Option<Var> = None;
    for &w in warped {
        let d = mean_distance(g, w, p)?;
        tmpl_sum = Some(match tmpl_sum {
            None => d,
            Some(a) => g.add(a, d)?,
        });
    }
    let term2 = g.scale(tmpl_sum.expect("m >= 2"), 1.0 / m as f64)?;
    Ok((term1, term2))
}

/// All losses of one step. With `use_consistency == false` the total is the
/// registration loss alone.
pub fn step_losses(
    g: &mut Graph,
    t: &TemplateRef,
    subjects: &[SubjectTerm],
    spline: SplineSettings,
    eta: f64,
    use_consistency: bool,
) -> Result<LossTerms> {
    let a = alpha(eta)?;
    let registration = registration_loss(g, t, subjects, spline)?;
    let warped = warped_predictions(g, t, subjects, spline)?;
    let (cons1, cons2) = consistency_terms(g, &warped, &t.landmarks)?;
    let total = if use_consistency {
        let cons = g.add(cons1, cons2)?;
        let r = g.scale(registration, 1.0 - a)?;
        let c = g.scale(cons, a)?;
        g.add(r, c)?
    } else {
        registration
    };
    Ok(LossTerms {
        registration,
        cons1,
        cons2,
        total,
        alpha: if use_consistency { a } else { 0.0 },
    })
}
