//! Cross-checks against an independent dense solver.

use approx::assert_relative_eq;
use lmreg::tps::fit_tps;
use lmreg::LandmarkSet;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn phi(q: f64) -> f64 {
    if q == 0.0 {
        0.0
    } else {
        q * q * q.ln()
    }
}

/// Solves the saddle-point system with nalgebra, one output axis at a time.
fn reference_fit(x: &[[f64; 3]], y: &[[f64; 3]], lambda: f64, scale: f64) -> (Vec<[f64; 3]>, [[f64; 3]; 4]) {
    let n = x.len();
    let mut a = DMatrix::<f64>::zeros(n + 4, n + 4);
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = (0..3).map(|k| (x[i][k] - x[j][k]).powi(2)).sum();
            a[(i, j)] = phi(d2 / (scale * scale));
        }
        a[(i, i)] += lambda;
        for k in 0..3 {
            a[(i, n + k)] = x[i][k];
            a[(n + k, i)] = x[i][k];
        }
        a[(i, n + 3)] = 1.0;
        a[(n + 3, i)] = 1.0;
    }
    let lu = a.lu();
    let mut v = vec![[0.0; 3]; n];
    let mut w = [[0.0; 3]; 4];
    for axis in 0..3 {
        let mut b = DVector::<f64>::zeros(n + 4);
        for i in 0..n {
            b[i] = y[i][axis];
        }
        let sol = lu.solve(&b).expect("reference system is solvable");
        for i in 0..n {
            v[i][axis] = sol[i];
        }
        for r in 0..4 {
            w[r][axis] = sol[n + r];
        }
    }
    (v, w)
}

fn separated(points: &[[f64; 3]], min: f64) -> bool {
    points.iter().enumerate().all(|(i, p)| {
        points[..i]
            .iter()
            .all(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt() >= min)
    })
}

#[test]
fn matches_reference_on_a_fixed_configuration() {
    let x: [[f64; 3]; 6] = [[0.0, 0.0, 0.0], [10.0, 1.0, 2.0], [3.0, 9.0, 1.0], [2.0, 4.0, 11.0], [7.0, 7.0, 7.0], [1.0, 8.0, 5.0]];
    let y: Vec<[f64; 3]> = x.iter().map(|p| [p[0] + 0.5 * p[1].sin(), p[1] - 0.3, p[2] + 0.1 * p[0]]).collect();
    let t = fit_tps(&LandmarkSet::new(x.to_vec()).unwrap(), &LandmarkSet::new(y.clone()).unwrap(), 0.1, 4.0).unwrap();
    let (v, w) = reference_fit(&x, &y, 0.1, 4.0);
    for (a, b) in t.v.iter().flatten().zip(v.iter().flatten()) {
        assert_relative_eq!(*a, *b, epsilon = 1e-10, max_relative = 1e-8);
    }
    for (a, b) in t.w.iter().flatten().zip(w.iter().flatten()) {
        assert_relative_eq!(*a, *b, epsilon = 1e-10, max_relative = 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_agrees_with_reference_solver(
        x in prop::collection::vec(prop::array::uniform3(0.0f64..48.0), 5..10),
        shift in prop::collection::vec(prop::array::uniform3(-4.0f64..4.0), 10),
        lambda in prop::sample::select(vec![0.0, 1e-3, 0.1, 1.0, 10.0]),
        scale in prop::sample::select(vec![1.0, 4.0, 32.0]),
    ) {
        prop_assume!(separated(&x, 2.0));
        let y: Vec<[f64; 3]> = x.iter().zip(&shift).map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect();
        let t = fit_tps(&LandmarkSet::new(x.clone()).unwrap(), &LandmarkSet::new(y.clone()).unwrap(), lambda, scale).unwrap();
        let (v, w) = reference_fit(&x, &y, lambda, scale);
        let v_scale = v.iter().flatten().fold(1e-12f64, |m, c| m.max(c.abs()));
        for (a, b) in t.v.iter().zip(&v) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6 * v_scale, "V {} vs {}", a[k], b[k]);
            }
        }
        for (a, b) in t.w.iter().zip(&w) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6 * (1.0 + b[k].abs()), "W {} vs {}", a[k], b[k]);
            }
        }
        // The fitted map reproduces what the reference coefficients predict.
        let probe = [24.0, 20.0, 30.0];
        let mut reference = [0.0; 3];
        for k in 0..3 {
            reference[k] = w[0][k] * probe[0] + w[1][k] * probe[1] + w[2][k] * probe[2] + w[3][k];
            for (xi, vi) in x.iter().zip(&v) {
                let d2: f64 = (0..3).map(|c| (xi[c] - probe[c]).powi(2)).sum();
                reference[k] += vi[k] * phi(d2 / (scale * scale));
            }
        }
        let got = t.eval(probe);
        for k in 0..3 {
            assert_relative_eq!(got[k], reference[k], epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
