//! Dense dual active-set solver for small strictly convex quadratic programs
//!
//! ```text
//! minimize   1/2 x' G x + a' x
//! subject to C x >= b
//! ```
//!
//! following Goldfarb and Idnani: start from the unconstrained minimum and add
//! the most violated constraint until the iterate is primal feasible, dropping
//! constraints whose multipliers would turn negative. Problems here have at
//! most a handful of unknowns, so the projected quantities are rebuilt from
//! scratch at every step instead of being updated.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("objective is not strictly convex")]
    NotConvex,
    #[error("constraints are infeasible (constraint {0} cannot be satisfied)")]
    Infeasible(usize),
    #[error("active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Indices of constraints active at the optimum.
    pub active: Vec<usize>,
    /// Multipliers matching `active`.
    pub multipliers: Vec<f64>,
}

/// Solves the program. Rows of `c` are constraint normals.
pub fn solve(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = g.nrows();
    let m = c.nrows();
    assert_eq!(g.ncols(), n);
    assert_eq!(a.len(), n);
    assert_eq!(c.ncols(), n);
    assert_eq!(b.len(), m);

    let chol = Cholesky::new(g.clone()).ok_or(QpError::NotConvex)?;
    let ginv = chol.inverse();
    let mut x = -(&ginv * a);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();

    let scale: Vec<f64> = (0..m)
        .map(|j| c.row(j).norm().max(1.0) * b[j].abs().max(1.0))
        .collect();
    let tol = 1e-12;

    for _ in 0..(50 * (m + n) + 50) {
        // most violated inactive constraint, relative to its scale
        let mut p = None;
        let mut worst = 0.0;
        for j in 0..m {
            if active.contains(&j) {
                continue;
            }
            let s = (c.row(j) * &x)[0] - b[j];
            if s < -tol * scale[j] && s / scale[j] < worst {
                worst = s / scale[j];
                p = Some(j);
            }
        }
        let Some(p) = p else {
            if let Some(refined) = polish(g, a, c, b, &active) {
                x = refined;
            }
            let objective = 0.5 * x.dot(&(g * &x)) + a.dot(&x);
            return Ok(QpSolution {
                x,
                objective,
                active,
                multipliers: u,
            });
        };
        let np: DVector<f64> = c.row(p).transpose();
        let mut up = 0.0;

        loop {
            let (z, r) = directions(&ginv, c, &active, &np);
            let s = np.dot(&x) - b[p];
            // partial step limit from the active multipliers
            let mut t1 = f64::INFINITY;
            let mut k = None;
            for (i, &ri) in r.iter().enumerate() {
                if ri > 0.0 {
                    let ratio = u[i] / ri;
                    if ratio < t1 {
                        t1 = ratio;
                        k = Some(i);
                    }
                }
            }
            let znp = z.dot(&np);
            let t2 = if z.norm() <= 1e-14 * np.norm().max(1.0) || znp <= 0.0 {
                f64::INFINITY
            } else {
                -s / znp
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible(p));
            }
            if t2.is_finite() {
                x += &z * t;
            }
            for (ui, ri) in u.iter_mut().zip(r.iter()) {
                *ui -= t * ri;
            }
            up += t;
            if t == t2 {
                active.push(p);
                u.push(up);
                break;
            }
            let k = k.expect("partial step has a blocking constraint");
            active.remove(k);
            u.remove(k);
        }
    }
    Err(QpError::IterationLimit)
}

/// Re-solves the KKT system of the final active set, with one round of
/// iterative refinement. The incremental steps leave active constraints
/// satisfied only to about `cond * eps`; this brings them to rounding level.
fn polish(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    active: &[usize],
) -> Option<DVector<f64>> {
    if active.is_empty() {
        return None;
    }
    let n = g.nrows();
    let k = n + active.len();
    let mut kkt = DMatrix::zeros(k, k);
    kkt.view_mut((0, 0), (n, n)).copy_from(g);
    let mut rhs = DVector::zeros(k);
    rhs.rows_mut(0, n).copy_from(&(-a));
    for (j, &i) in active.iter().enumerate() {
        for col in 0..n {
            kkt[(n + j, col)] = c[(i, col)];
            kkt[(col, n + j)] = c[(i, col)];
        }
        rhs[n + j] = b[i];
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    let resid = &rhs - &kkt * &sol;
    sol += lu.solve(&resid)?;
    let x = sol.rows(0, n).into_owned();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Primal step direction `z` and dual direction `r` for adding normal `np`
/// to the active set.
fn directions(
    ginv: &DMatrix<f64>,
    c: &DMatrix<f64>,
    active: &[usize],
    np: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let gn = ginv * np;
    if active.is_empty() {
        return (gn, DVector::zeros(0));
    }
    let n = ginv.nrows();
    let na = DMatrix::from_fn(n, active.len(), |i, j| c[(active[j], i)]);
    let gna = ginv * &na;
    let s = na.transpose() * &gna;
    let rhs = na.transpose() * &gn;
    let r = match Cholesky::<f64, Dyn>::new(s.clone()) {
        Some(ch) => ch.solve(&rhs),
        None => s
            .pseudo_inverse(1e-14)
            .map(|pinv| pinv * &rhs)
            .unwrap_or_else(|_| DVector::zeros(active.len())),
    };
    let z = gn - gna * &r;
    (z, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let g = DMatrix::identity(2, 2);
        let a = DVector::from_vec(vec![-1.0, -2.0]);
        let c = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        let sol = solve(&g, &a, &c, &b).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.x[1] - 2.0).abs() < 1e-12);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn single_active_bound() {
        // min (x-3)^2 + (y-1)^2  s.t. x <= 1
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::from_vec(vec![-6.0, -2.0]);
        let c = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        let b = DVector::from_vec(vec![-1.0]);
        let sol = solve(&g, &a, &c, &b).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.x[1] - 1.0).abs() < 1e-12);
        assert_eq!(sol.active, vec![0]);
        assert!((sol.multipliers[0] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn corner_solution() {
        // min x^2 + y^2  s.t. x + y >= 2, x >= 1.5
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::zeros(2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        let b = DVector::from_vec(vec![2.0, 1.5]);
        let sol = solve(&g, &a, &c, &b).unwrap();
        assert!((sol.x[0] - 1.5).abs() < 1e-10, "{}", sol.x);
        assert!((sol.x[1] - 0.5).abs() < 1e-10, "{}", sol.x);
    }

    #[test]
    fn detects_infeasibility() {
        // x >= 1 and -x >= 0
        let g = DMatrix::identity(1, 1);
        let a = DVector::zeros(1);
        let c = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(solve(&g, &a, &c, &b), Err(QpError::Infeasible(_))));
    }

    #[test]
    fn rejects_singular_hessian() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let a = DVector::zeros(2);
        let c = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        assert!(matches!(solve(&g, &a, &c, &b), Err(QpError::NotConvex)));
    }
}
