//! Mean radial error and success detection rate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{distance, LandmarkSet};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [3.0, 6.0, 9.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdrEntry {
    pub tau: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `errors[s][l]` is the radial error of landmark `l` on scan `s`, in mm.
    pub errors: Vec<Vec<f64>>,
    pub mre: MeanStd,
    pub sdr: Vec<SdrEntry>,
    pub per_landmark: Vec<MeanStd>,
}

/// Radial errors per scan and landmark.
pub fn radial_errors(pred: &[LandmarkSet], gt: &[LandmarkSet]) -> Result<Vec<Vec<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::SizeMismatch {
            expected: gt.len(),
            found: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Invalid("no scans to evaluate".into()));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            if p.len() != g.len() {
                return Err(Error::SizeMismatch {
                    expected: g.len(),
                    found: p.len(),
                });
            }
            Ok(p.points
                .iter()
                .zip(&g.points)
                .map(|(&a, &b)| distance(a, b))
                .collect())
        })
        .collect()
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Mean and population standard deviation over all radial errors.
pub fn mre_from_errors(errors: &[Vec<f64>]) -> MeanStd {
    mean_std(errors.iter().flatten().copied())
}

/// Percentage of errors strictly below `tau`.
pub fn sdr_from_errors(errors: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("threshold must be positive, got {tau}")));
    }
    let total = errors.iter().map(Vec::len).sum::<usize>();
    let hits = errors.iter().flatten().filter(|&&e| e < tau).count();
    Ok(100.0 * hits as f64 / total as f64)
}

pub fn mre(pred: &[LandmarkSet], gt: &[LandmarkSet]) -> Result<MeanStd> {
    Ok(mre_from_errors(&radial_errors(pred, gt)?))
}

pub fn sdr(pred: &[LandmarkSet], gt: &[LandmarkSet], tau: f64) -> Result<f64> {
    sdr_from_errors(&radial_errors(pred, gt)?, tau)
}

impl EvalReport {
    pub fn from_errors(errors: Vec<Vec<f64>>, thresholds: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Invalid("no scans to evaluate".into()));
        }
        let l = errors[0].len();
        if errors.iter().any(|row| row.len() != l) || l == 0 {
            return Err(Error::Shape("ragged or empty error table".into()));
        }
        if errors.iter().flatten().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::NonFinite("radial error".into()));
        }
        let sdr = thresholds
            .iter()
            .map(|&tau| {
                Ok(SdrEntry {
                    tau,
                    percent: sdr_from_errors(&errors, tau)?,
                })
            })
            .collect::<Result<_>>()?;
        let per_landmark = (0..l)
            .map(|j| mean_std(errors.iter().map(move |row| row[j])))
            .collect();
        Ok(EvalReport {
            mre: mre_from_errors(&errors),
            sdr,
            per_landmark,
            errors,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// One row per scan and landmark: `scan,landmark,error_mm`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("scan,landmark,error_mm\n");
        for (s, row) in self.errors.iter().enumerate() {
            for (l, e) in row.iter().enumerate() {
                out.push_str(&format!("{s},{l},{e}\n"));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn report(pred: &[LandmarkSet], gt: &[LandmarkSet], thresholds: &[f64]) -> Result<EvalReport> {
    EvalReport::from_errors(radial_errors(pred, gt)?, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(points: &[[f64; 3]]) -> LandmarkSet {
        LandmarkSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let a = vec![set(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])];
        let r = report(&a, &a, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.mre, MeanStd { mean: 0.0, std: 0.0 });
        assert!(r.sdr.iter().all(|s| s.percent == 100.0));
    }

    #[test]
    fn three_four_five() {
        let p = vec![set(&[[3.0, 4.0, 0.0]])];
        let g = vec![set(&[[0.0, 0.0, 0.0]])];
        assert_eq!(mre(&p, &g).unwrap(), MeanStd { mean: 5.0, std: 0.0 });
    }

    #[test]
    fn sdr_half_and_strict() {
        let p = vec![set(&[[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]])];
        let g = vec![set(&[[0.0; 3], [0.0; 3]])];
        assert_eq!(sdr(&p, &g, 3.0).unwrap(), 50.0);
        assert_eq!(sdr(&p, &g, 2.0).unwrap(), 0.0);
        assert_eq!(sdr(&p, &g, 4.0).unwrap(), 50.0);
        assert!(sdr(&p, &g, 0.0).is_err());
    }

    #[test]
    fn count_mismatch() {
        let a = vec![set(&[[0.0; 3]])];
        let b = vec![set(&[[0.0; 3], [1.0; 3]])];
        assert!(mre(&a, &b).is_err());
        assert!(mre(&a, &[a[0].clone(), a[0].clone()]).is_err());
    }

    #[test]
    fn empty_thresholds_give_mre_only() {
        let p = vec![set(&[[1.0, 0.0, 0.0]])];
        let g = vec![set(&[[0.0; 3]])];
        let r = report(&p, &g, &[]).unwrap();
        assert!(r.sdr.is_empty());
        assert_eq!(r.mre.mean, 1.0);
    }

    #[test]
    fn json_roundtrip_and_csv() {
        let p = vec![set(&[[1.0, 0.5, 0.0], [0.1, 0.2, 0.3]])];
        let g = vec![set(&[[0.0; 3], [0.0; 3]])];
        let r = report(&p, &g, &DEFAULT_THRESHOLDS).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_json(dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::read_json(dir.path().join("r.json")).unwrap(), r);
        r.write_csv(dir.path().join("r.csv")).unwrap();
        let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    fn cohort() -> impl Strategy<Value = (Vec<LandmarkSet>, Vec<LandmarkSet>)> {
        (1usize..5, 1usize..5).prop_flat_map(|(s, l)| {
            let sets = prop::collection::vec(
                prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), l),
                s,
            );
            (sets.clone(), sets).prop_map(|(a, b)| {
                (
                    a.into_iter().map(|p| LandmarkSet::new(p).unwrap()).collect(),
                    b.into_iter().map(|p| LandmarkSet::new(p).unwrap()).collect(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn matches_naive_double_loop((p, g) in cohort()) {
            let mut sum = 0.0;
            let mut n = 0.0;
            for s in 0..p.len() {
                for l in 0..p[s].len() {
                    let d = p[s].points[l];
                    let t = g[s].points[l];
                    sum += ((d[0]-t[0]).powi(2) + (d[1]-t[1]).powi(2) + (d[2]-t[2]).powi(2)).sqrt();
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let mut var = 0.0;
            for s in 0..p.len() {
                for l in 0..p[s].len() {
                    let e = distance(p[s].points[l], g[s].points[l]);
                    var += (e - mean).powi(2);
                }
            }
            let m = mre(&p, &g).unwrap();
            prop_assert!((m.mean - mean).abs() < 1e-12);
            prop_assert!((m.std - (var / n).sqrt()).abs() < 1e-12);
        }

        #[test]
        fn sdr_monotone_in_tau((p, g) in cohort(), t1 in 0.1f64..30.0, dt in 0.0f64..30.0) {
            let a = sdr(&p, &g, t1).unwrap();
            let b = sdr(&p, &g, t1 + dt).unwrap();
            prop_assert!(a <= b);
            prop_assert!((0.0..=100.0).contains(&a));
        }

        #[test]
        fn permutation_invariant((p, g) in cohort()) {
            let a = mre(&p, &g).unwrap();
            let pr: Vec<_> = p.iter().rev().cloned().collect();
            let gr: Vec<_> = g.iter().rev().cloned().collect();
            let b = mre(&pr, &gr).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
        }

        #[test]
        fn shift_bounded_by_norm((p, g) in cohort(), d in prop::array::uniform3(-5.0f64..5.0)) {
            let shifted: Vec<_> = p.iter().map(|s| s.map(|q| [q[0]+d[0], q[1]+d[1], q[2]+d[2]])).collect();
            let before = radial_errors(&p, &g).unwrap();
            let after = radial_errors(&shifted, &g).unwrap();
            let nd = (d[0]*d[0] + d[1]*d[1] + d[2]*d[2]).sqrt();
            for (rb, ra) in before.iter().zip(&after) {
                for (eb, ea) in rb.iter().zip(ra) {
                    prop_assert!(*ea <= eb + nd + 1e-9);
                }
            }
        }

        #[test]
        fn report_composes_standalone_calls((p, g) in cohort()) {
            let r = report(&p, &g, &DEFAULT_THRESHOLDS).unwrap();
            prop_assert_eq!(r.mre, mre(&p, &g).unwrap());
            for s in &r.sdr {
                prop_assert_eq!(s.percent, sdr(&p, &g, s.tau).unwrap());
            }
            let again = EvalReport::from_errors(r.errors.clone(), &DEFAULT_THRESHOLDS).unwrap();
            prop_assert_eq!(again, r);
        }
    }
}
