//! Independent reference computations used by the integration tests. None of
//! these share code with the solvers they check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pads::geo_frames::LocalPoint;
use pads::motion_regression::{basis, loc_kernel, MotionConstraint};
use pads::trace_model::PositionSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Slab `lo <= c'x <= hi`.
#[derive(Debug, Clone)]
pub struct Slab {
    pub c: DVector<f64>,
    pub lo: f64,
    pub hi: f64,
}

/// One axis of the constrained regression as an explicit QP:
/// `min sum_i K_i (b_i'x - y_i)^2` over the slabs.
#[derive(Debug, Clone)]
pub struct AxisProblem {
    /// Hessian / 2.
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c0: f64,
    pub slabs: Vec<Slab>,
}

impl AxisProblem {
    /// Built directly from the samples, not from the library's normal
    /// equations.
    pub fn new(window: &[PositionSample], cons: &[MotionConstraint], t: f64, kappa: f64, degree: usize, axis: usize) -> Self {
        let k = degree + 1;
        let mut h = DMatrix::zeros(k, k);
        let mut g = DVector::zeros(k);
        let mut c0 = 0.0;
        for s in window {
            let w = (-kappa * (s.t - t).powi(2)).exp();
            let mut b = DVector::zeros(k);
            for i in 0..k {
                b[i] = (s.t - t).powi(i as i32);
            }
            let y = if axis == 0 { s.pos.east } else { s.pos.north };
            h += &b * b.transpose() * w;
            g += &b * (w * y);
            c0 += w * y * y;
        }
        let slabs = cons
            .iter()
            .map(|c| {
                let mut row = DVector::zeros(k);
                for i in 0..k {
                    row[i] = (c.t - t).powi(i as i32);
                }
                let target = if axis == 0 { c.target.east } else { c.target.north };
                Slab {
                    c: row,
                    lo: target - c.eps[axis],
                    hi: target + c.eps[axis],
                }
            })
            .collect();
        AxisProblem { h, g, c0, slabs }
    }

    /// `x'Hx - 2 g'x + c0`, the weighted squared error.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.h * x)[0] - 2.0 * self.g.dot(x) + self.c0
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.slabs
            .iter()
            .map(|s| {
                let v = s.c.dot(x);
                (s.lo - v).max(v - s.hi).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// Exact minimum by enumerating every choice of lower, upper or inactive
    /// per slab and solving the equality-constrained KKT system.
    pub fn enumerate(&self) -> Option<(DVector<f64>, f64)> {
        let m = self.slabs.len();
        let k = self.h.nrows();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for code in 0..3usize.pow(m as u32) {
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            let mut c = code;
            for s in &self.slabs {
                match c % 3 {
                    1 => {
                        rows.push(s.c.clone());
                        rhs.push(s.lo);
                    }
                    2 => {
                        rows.push(s.c.clone());
                        rhs.push(s.hi);
                    }
                    _ => {}
                }
                c /= 3;
            }
            let r = rows.len();
            let mut kkt = DMatrix::zeros(k + r, k + r);
            let mut b = DVector::zeros(k + r);
            kkt.view_mut((0, 0), (k, k)).copy_from(&(&self.h * 2.0));
            b.rows_mut(0, k).copy_from(&(&self.g * 2.0));
            for (j, row) in rows.iter().enumerate() {
                for i in 0..k {
                    kkt[(k + j, i)] = row[i];
                    kkt[(i, k + j)] = row[i];
                }
                b[k + j] = rhs[j];
            }
            let Some(sol) = kkt.clone().lu().solve(&b) else {
                continue;
            };
            if (&kkt * &sol - &b).amax() > 1e-8 * b.amax().max(1.0) {
                continue;
            }
            let x = sol.rows(0, k).into_owned();
            if self.max_violation(&x) > 1e-9 {
                continue;
            }
            let f = self.objective(&x);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((x, f));
            }
        }
        best
    }

    /// Projected gradient in coordinates where the objective is isotropic,
    /// projecting with Dykstra's algorithm, from several random starts.
    pub fn projected_gradient(&self, starts: usize, seed: u64) -> (DVector<f64>, f64) {
        let k = self.h.nrows();
        let chol = self.h.clone().cholesky().expect("positive definite normal matrix");
        let l = chol.l();
        let linv = l.clone().try_inverse().expect("invertible factor");
        // x = L^-T y turns x'Hx into |y|^2
        let to_x = linv.transpose();
        let slabs: Vec<Slab> = self
            .slabs
            .iter()
            .map(|s| Slab {
                c: linv.clone() * &s.c,
                lo: s.lo,
                hi: s.hi,
            })
            .collect();
        let grad = |y: &DVector<f64>| (y - &linv * &self.g) * 2.0;
        let mut r = rng(seed);
        let mut best: Option<(DVector<f64>, f64)> = None;
        for _ in 0..starts {
            let mut y = DVector::from_fn(k, |_, _| r.random_range(-50.0..50.0));
            y = dykstra(&y, &slabs);
            for _ in 0..200 {
                let next = dykstra(&(&y - grad(&y) * 0.5), &slabs);
                let done = (&next - &y).amax() < 1e-14;
                y = next;
                if done {
                    break;
                }
            }
            let x = &to_x * &y;
            let f = self.objective(&x);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((x, f));
            }
        }
        best.expect("at least one start")
    }
}

/// Euclidean projection onto an intersection of slabs.
pub fn dykstra(z: &DVector<f64>, slabs: &[Slab]) -> DVector<f64> {
    if slabs.is_empty() {
        return z.clone();
    }
    let mut x = z.clone();
    let mut incr: Vec<DVector<f64>> = vec![DVector::zeros(z.len()); slabs.len()];
    for _ in 0..100_000 {
        let prev = x.clone();
        for (s, p) in slabs.iter().zip(incr.iter_mut()) {
            let y = &x + &*p;
            let proj = project_slab(&y, s);
            *p = &y - &proj;
            x = proj;
        }
        if (&x - &prev).amax() < 1e-15 {
            break;
        }
    }
    x
}

fn project_slab(y: &DVector<f64>, s: &Slab) -> DVector<f64> {
    let v = s.c.dot(y);
    let n2 = s.c.norm_squared();
    if v < s.lo {
        y + &s.c * ((s.lo - v) / n2)
    } else if v > s.hi {
        y - &s.c * ((v - s.hi) / n2)
    } else {
        y.clone()
    }
}

/// Random regression instance with `n_cons <= degree + 1` constraints, so a
/// feasible polynomial always exists; targets straddle the unconstrained fit
/// so that some constraints bind and others do not.
pub struct Instance {
    pub window: Vec<PositionSample>,
    pub cons: Vec<MotionConstraint>,
    pub t: f64,
    pub kappa: f64,
    pub degree: usize,
}

pub fn random_instance(r: &mut ChaCha8Rng) -> Instance {
    let degree = r.random_range(1..=3usize);
    let w = r.random_range((degree + 2)..=10usize);
    let t = 100.0;
    let kappa = r.random_range(0.0..1.5);
    let (ve, vn) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
    let window: Vec<PositionSample> = (0..w)
        .map(|i| {
            let ti = t - (w - i) as f64;
            PositionSample {
                t: ti,
                source: 0,
                pos: LocalPoint::new(
                    ve * (ti - t) + r.random_range(-4.0..4.0),
                    vn * (ti - t) + r.random_range(-4.0..4.0),
                ),
            }
        })
        .collect();
    let n_cons = r.random_range(1..=(degree + 1));
    let mut times: Vec<f64> = vec![t];
    while times.len() < n_cons {
        let c = t - r.random_range(0..w) as f64;
        if !times.contains(&c) {
            times.push(c);
        }
    }
    let cons = times
        .into_iter()
        .map(|ct| MotionConstraint {
            t: ct,
            target: LocalPoint::new(
                ve * (ct - t) + r.random_range(-5.0..5.0),
                vn * (ct - t) + r.random_range(-5.0..5.0),
            ),
            eps: [r.random_range(0.2..3.0), r.random_range(0.2..3.0)],
        })
        .collect();
    Instance {
        window,
        cons,
        t,
        kappa,
        degree,
    }
}

/// Library-independent evaluation of the fitted polynomial's weighted error.
pub fn weighted_error(window: &[PositionSample], t: f64, kappa: f64, w: &[Vec<f64>; 2]) -> f64 {
    window
        .iter()
        .map(|s| {
            let b = basis(s.t - t, w[0].len() - 1);
            let e: f64 = w[0].iter().zip(&b).map(|(a, b)| a * b).sum::<f64>() - s.pos.east;
            let n: f64 = w[1].iter().zip(&b).map(|(a, b)| a * b).sum::<f64>() - s.pos.north;
            loc_kernel(s.t - t, kappa) * (e * e + n * n)
        })
        .sum()
}

/// Minimum of `v(l) = c00 - 2 l'c + l'C l` over `sum l = 1`, by brute force
/// on a grid of the free coordinates, refined twice around the best cell.
pub fn simplex_grid_min(cmat: &DMatrix<f64>, c: &DVector<f64>, c00: f64) -> (Vec<f64>, f64) {
    let n = c.len();
    let eval = |l: &[f64]| {
        let lv = DVector::from_column_slice(l);
        c00 - 2.0 * lv.dot(c) + (lv.transpose() * cmat * &lv)[0]
    };
    if n == 1 {
        return (vec![1.0], eval(&[1.0]));
    }
    let mut center = vec![1.0 / n as f64; n - 1];
    let mut half = 3.0;
    let steps = match n {
        2 => 4001,
        3 => 401,
        _ => 81,
    };
    let mut best = (vec![1.0], f64::INFINITY);
    for _round in 0..4 {
        let h = 2.0 * half / (steps - 1) as f64;
        let mut idx = vec![0usize; n - 1];
        loop {
            let mut l: Vec<f64> = idx.iter().zip(&center).map(|(&i, &c0)| c0 - half + h * i as f64).collect();
            let last = 1.0 - l.iter().sum::<f64>();
            l.push(last);
            let v = eval(&l);
            if v < best.1 {
                best = (l, v);
            }
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == n - 1 {
                    break;
                }
            }
            if d == n - 1 {
                break;
            }
        }
        center = best.0[..n - 1].to_vec();
        half = 4.0 * h;
    }
    best
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}
