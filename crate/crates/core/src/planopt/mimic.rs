use super::forward::{plan_from_fluence, spg_complexity, ForwardProblem};
use super::{Plan, PlanOptError, Provenance};
use crate::dosecalc::Beam;

/// Iteration budget for [`dose_mimic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MimicOptions {
    /// Projected-gradient iterations per penalty value.
    pub iterations_per_solve: usize,
    /// Doublings allowed while searching for a penalty that meets the bound.
    pub max_doublings: usize,
    pub bisection_steps: usize,
    /// Width of the quadratic zone of the smoothed penalty, relative to the
    /// largest unconstrained fluence.
    pub smoothing: f64,
}

impl Default for MimicOptions {
    fn default() -> Self {
        Self { iterations_per_solve: 1500, max_doublings: 40, bisection_steps: 20, smoothing: 1e-3 }
    }
}

/// Diagnostics of a mimicking run.
#[derive(Debug, Clone, PartialEq)]
pub struct MimicReport {
    /// `||A w - target||_2` of the returned plan.
    pub residual: f64,
    /// Penalty multiplier of the returned candidate (0 when unconstrained
    /// least squares already met the bound).
    pub penalty: f64,
    pub penalty_solves: usize,
    /// Penalised objective of every accepted iterate of the final
    /// projected-gradient solve.
    pub objective_trace: Vec<f64>,
}

/// Least-squares dose mimicking: `min ||A w - target||^2` over `w >= 0` with
/// `spg(w) <= C`.
///
/// Nonnegative least squares is solved exactly (active set on the normal
/// equations). If its solution exceeds the complexity bound, a smoothed
/// complexity penalty is added and minimised by monotone accelerated
/// projected gradient; the penalty multiplier is doubled until the bound is
/// met and then bisected. Every candidate is made exactly feasible by the
/// best admissible rescaling (complexity is positively homogeneous) and the
/// feasible candidate with the smallest residual is returned.
pub fn dose_mimic(
    problem: &ForwardProblem<'_>,
    target: &[f64],
    options: &MimicOptions,
) -> Result<(Plan, MimicReport), PlanOptError> {
    let a = problem.influence;
    let nv = a.num_voxels();
    let nb = a.num_beamlets();
    if target.len() != nv {
        return Err(PlanOptError::InvalidProblem(format!("target has {} voxels, expected {nv}", target.len())));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(PlanOptError::InvalidProblem("target dose is not finite".into()));
    }
    let q = Quadratic::new(problem, target);
    let bound = problem.complexity_bound;
    let beams = &a.beams;

    let finish = |w: Vec<f64>, penalty: f64, solves: usize, trace: Vec<f64>| -> Result<(Plan, MimicReport), PlanOptError> {
        let residual = (2.0 * q.value(&w)).max(0.0).sqrt();
        let mut plan = plan_from_fluence(problem, w, None, None, Provenance::Mimic)?;
        plan.mimic_residual = Some(residual);
        let report = MimicReport { residual, penalty, penalty_solves: solves, objective_trace: trace };
        if let Some(c) = bound {
            if plan.complexity > c + 1e-6 {
                return Err(PlanOptError::MimicInfeasible { violation: plan.complexity - c, best: Box::new(plan) });
            }
        }
        Ok((plan, report))
    };

    if bound == Some(0.0) || target.iter().all(|&v| v == 0.0) {
        return finish(vec![0.0; nb], 0.0, 0, vec![q.value(&vec![0.0; nb])]);
    }

    let w_ls = q.nnls();
    let spg_ls = spg_complexity(&w_ls, beams)?;
    let Some(c) = bound else {
        return finish(w_ls, 0.0, 0, Vec::new());
    };
    if spg_ls <= c {
        return finish(w_ls, 0.0, 0, Vec::new());
    }

    let delta = options.smoothing * w_ls.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut best = q.rescale(&w_ls, spg_ls, c);
    let mut best_value = q.value(&best);
    let mut best_mu = 0.0;
    let mut best_trace = Vec::new();
    let mut solves = 0;
    let mut consider = |w: &[f64], mu: f64, trace: &[f64], best: &mut Vec<f64>| -> Result<f64, PlanOptError> {
        let s = spg_complexity(w, beams)?;
        let cand = q.rescale(w, s, c);
        let v = q.value(&cand);
        if v < best_value {
            best_value = v;
            *best = cand;
            best_mu = mu;
            best_trace = trace.to_vec();
        }
        Ok(s)
    };

    let grad_scale = q.b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    let mut mu = 1e-3 * grad_scale;
    let mut w = w_ls.clone();
    let mut lo = 0.0;
    let mut hi = None;
    for _ in 0..options.max_doublings {
        let (next, trace) = q.penalised(&w, mu, delta, beams, options.iterations_per_solve);
        solves += 1;
        let s = consider(&next, mu, &trace, &mut best)?;
        w = next;
        if s <= c {
            hi = Some(mu);
            break;
        }
        lo = mu;
        mu *= 2.0;
    }
    if let Some(mut hi) = hi {
        for _ in 0..options.bisection_steps {
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { hi / 2.0 };
            let (next, trace) = q.penalised(&w, mid, delta, beams, options.iterations_per_solve);
            solves += 1;
            let s = consider(&next, mid, &trace, &mut best)?;
            w = next;
            if s <= c {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    finish(best, best_mu, solves, best_trace)
}

/// `0.5 w^T H w - b^T w + c0 = 0.5 ||A w - target||^2` in dense Gram form.
struct Quadratic {
    n: usize,
    h: Vec<f64>,
    b: Vec<f64>,
    c0: f64,
    lipschitz: f64,
}

impl Quadratic {
    fn new(problem: &ForwardProblem<'_>, target: &[f64]) -> Self {
        let a = problem.influence;
        let n = a.num_beamlets();
        let cols: Vec<Vec<(usize, f64)>> = (0..n).map(|j| a.column(j).collect()).collect();
        let mut h = vec![0.0; n * n];
        // Column dot products via a dense scatter of one column at a time.
        let mut dense = vec![0.0; a.num_voxels()];
        for i in 0..n {
            for &(v, x) in &cols[i] {
                dense[v] = x;
            }
            for j in i..n {
                let dot: f64 = cols[j].iter().map(|&(v, x)| dense[v] * x).sum();
                h[i * n + j] = dot;
                h[j * n + i] = dot;
            }
            for &(v, _) in &cols[i] {
                dense[v] = 0.0;
            }
        }
        let b = a.transpose_mul(target);
        let c0 = 0.5 * target.iter().map(|v| v * v).sum::<f64>();
        let lipschitz = power_iteration(&h, n);
        Self { n, h, b, c0, lipschitz }
    }

    fn hv(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.h[i * self.n..(i + 1) * self.n].iter().zip(w).map(|(a, b)| a * b).sum()).collect()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let hw = self.hv(w);
        let quad: f64 = hw.iter().zip(w).map(|(a, b)| a * b).sum();
        let lin: f64 = self.b.iter().zip(w).map(|(a, b)| a * b).sum();
        (0.5 * quad - lin + self.c0).max(0.0)
    }

    /// Best multiple `s w` with `s` in `[0, c / spg]`.
    fn rescale(&self, w: &[f64], spg: f64, c: f64) -> Vec<f64> {
        let hw = self.hv(w);
        let quad: f64 = hw.iter().zip(w).map(|(a, b)| a * b).sum();
        let lin: f64 = self.b.iter().zip(w).map(|(a, b)| a * b).sum();
        let cap = if spg > 0.0 { c / spg } else { f64::INFINITY };
        let s = if quad > 0.0 { (lin / quad).clamp(0.0, cap) } else { 0.0 };
        let s = if s.is_finite() { s } else { 0.0 };
        w.iter().map(|x| x * s).collect()
    }

    /// Lawson-Hanson active-set NNLS on the normal equations.
    fn nnls(&self) -> Vec<f64> {
        let n = self.n;
        let mut w = vec![0.0; n];
        let mut passive = vec![false; n];
        let tol = 1e-12 * self.b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        for _ in 0..3 * n + 10 {
            let hw = self.hv(&w);
            let grad: Vec<f64> = (0..n).map(|i| self.b[i] - hw[i]).collect();
            let Some(j) = (0..n)
                .filter(|&i| !passive[i] && grad[i] > tol)
                .max_by(|&x, &y| grad[x].total_cmp(&grad[y]))
            else {
                break;
            };
            passive[j] = true;
            for _ in 0..n + 1 {
                let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
                let z_p = self.solve_subset(&idx);
                let mut z = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    z[i] = z_p[k];
                }
                if idx.iter().all(|&i| z[i] > 0.0) {
                    w = z;
                    break;
                }
                let mut alpha = f64::INFINITY;
                for &i in &idx {
                    if z[i] <= 0.0 {
                        let d = w[i] - z[i];
                        if d > 0.0 {
                            alpha = alpha.min(w[i] / d);
                        } else {
                            alpha = 0.0;
                        }
                    }
                }
                let alpha = if alpha.is_finite() { alpha } else { 0.0 };
                for &i in &idx {
                    w[i] += alpha * (z[i] - w[i]);
                    if w[i] <= 1e-15 * (1.0 + z[i].abs()) {
                        w[i] = 0.0;
                        passive[i] = false;
                    }
                }
            }
        }
        w.iter().map(|v| v.max(0.0)).collect()
    }

    /// Solve `H_PP z = b_P` by Gaussian elimination with partial pivoting; a
    /// tiny ridge keeps rank-deficient subsets solvable.
    fn solve_subset(&self, idx: &[usize]) -> Vec<f64> {
        let k = idx.len();
        let ridge = 1e-13 * idx.iter().map(|&i| self.h[i * self.n + i]).fold(0.0, f64::max);
        let mut m = vec![0.0; k * (k + 1)];
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                m[r * (k + 1) + c] = self.h[i * self.n + j] + if r == c { ridge } else { 0.0 };
            }
            m[r * (k + 1) + k] = self.b[i];
        }
        let w = k + 1;
        for col in 0..k {
            let piv = (col..k).max_by(|&x, &y| m[x * w + col].abs().total_cmp(&m[y * w + col].abs())).unwrap();
            if piv != col {
                for c in 0..w {
                    m.swap(col * w + c, piv * w + c);
                }
            }
            let p = m[col * w + col];
            if p.abs() < 1e-300 {
                continue;
            }
            for r in col + 1..k {
                let f = m[r * w + col] / p;
                if f != 0.0 {
                    for c in col..w {
                        m[r * w + c] -= f * m[col * w + c];
                    }
                }
            }
        }
        let mut z = vec![0.0; k];
        for r in (0..k).rev() {
            let mut v = m[r * w + k];
            for c in r + 1..k {
                v -= m[r * w + c] * z[c];
            }
            let p = m[r * w + r];
            z[r] = if p.abs() < 1e-300 { 0.0 } else { v / p };
        }
        z
    }

    /// Monotone FISTA on `q(w) + mu * P(w)` over `w >= 0`, where `P` is the
    /// Huber-smoothed complexity. Returns the final iterate and the objective
    /// of every accepted iterate.
    fn penalised(&self, start: &[f64], mu: f64, delta: f64, beams: &[Beam], iterations: usize) -> (Vec<f64>, Vec<f64>) {
        let l = self.lipschitz + mu * 4.0 / delta;
        let objective = |w: &[f64]| self.value(w) + mu * smoothed_spg(w, beams, delta, None);
        let mut x = start.to_vec();
        let mut fx = objective(&x);
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut trace = vec![fx];
        for _ in 0..iterations {
            let hy = self.hv(&y);
            let mut g: Vec<f64> = (0..self.n).map(|i| hy[i] - self.b[i]).collect();
            smoothed_spg(&y, beams, delta, Some((&mut g, mu)));
            let z: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| (yi - gi / l).max(0.0)).collect();
            let fz = objective(&z);
            if fz <= fx {
                let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                for i in 0..self.n {
                    y[i] = z[i] + ((t - 1.0) / t_next) * (z[i] - x[i]);
                }
                x = z;
                fx = fz;
                t = t_next;
            } else {
                // Reject the step and restart momentum from the last accepted point.
                y = x.clone();
                t = 1.0;
            }
            trace.push(fx);
        }
        (x, trace)
    }
}

/// Huber-smoothed complexity; optionally accumulates `mu * gradient` into `grad`.
fn smoothed_spg(w: &[f64], beams: &[Beam], delta: f64, mut grad: Option<(&mut Vec<f64>, f64)>) -> f64 {
    let mut total = 0.0;
    let mut offset = 0;
    for b in beams {
        for r in 0..b.rows {
            let base = offset + r * b.cols;
            for c in 0..b.cols {
                let prev = if c > 0 { w[base + c - 1] } else { 0.0 };
                let d = w[base + c] - prev;
                if d <= 0.0 {
                    continue;
                }
                let (val, slope) = if d <= delta { (d * d / (2.0 * delta), d / delta) } else { (d - delta / 2.0, 1.0) };
                total += val;
                if let Some((g, mu)) = grad.as_mut() {
                    g[base + c] += *mu * slope;
                    if c > 0 {
                        g[base + c - 1] -= *mu * slope;
                    }
                }
            }
        }
        offset += b.beamlet_count();
    }
    total
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix, padded by 5%.
fn power_iteration(h: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let hv: Vec<f64> = (0..n).map(|i| h[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1e-12;
        }
        lambda = norm;
        v = hv.iter().map(|x| x / norm).collect();
    }
    lambda * 1.05
}
