//! Bounded-variable revised simplex for `min c^T x  s.t.  G x (<= | =) h`.
//!
//! Variables are either nonnegative or free. Every row gets a slack (bounded
//! `[0, inf)` for `<=` rows, fixed at zero for `=` rows), so the working basis
//! is always square. Phase 1 minimises the sum of bound violations of the
//! basic variables starting from the all-slack basis; phase 2 minimises the
//! true objective.
//!
//! The basis factorization exploits the fact that most basic columns in the
//! planning LPs have a single nonzero (slacks and per-row hinge variables):
//! those are eliminated directly and only the remaining core is factorized
//! densely (LU with partial pivoting). Pivots append product-form eta vectors
//! until the next refactorization.
//!
//! Pricing is Dantzig's rule with a static column-norm scaling. A run of
//! degenerate pivots triggers a small deterministic shift of the right-hand
//! side, which is removed once the shifted problem is solved; the solver then
//! repairs any exposed infeasibility, falling back to Bland's rule if
//! degeneracy persists. A returned `Optimal` status is backed by a
//! certificate recomputed from the problem data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    NonNegative,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("variable index {index} out of range ({num_vars} variables)")]
    VarOutOfRange { index: usize, num_vars: usize },
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
}

/// Linear program in inequality form.
#[derive(Debug, Clone, Default)]
pub struct LpProblem {
    objective: Vec<f64>,
    kinds: Vec<VarKind>,
    rows: Vec<Row>,
}

#[derive(Debug, Clone)]
struct Row {
    coeffs: Vec<(usize, f64)>,
    relation: Relation,
    rhs: f64,
}

impl LpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a variable with objective coefficient `cost`; returns its index.
    pub fn add_var(&mut self, cost: f64, kind: VarKind) -> usize {
        self.objective.push(cost);
        self.kinds.push(kind);
        self.objective.len() - 1
    }

    pub fn add_vars(&mut self, count: usize, cost: f64, kind: VarKind) -> std::ops::Range<usize> {
        let start = self.objective.len();
        for _ in 0..count {
            self.add_var(cost, kind);
        }
        start..self.objective.len()
    }

    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.objective[var] = cost;
    }

    /// Add `sum coeffs (relation) rhs`; repeated indices are summed. Returns the row index.
    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> usize {
        self.rows.push(Row { coeffs, relation, rhs });
        self.rows.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn rhs(&self, row: usize) -> f64 {
        self.rows[row].rhs
    }

    pub fn relation(&self, row: usize) -> Relation {
        self.rows[row].relation
    }

    pub fn kind(&self, var: usize) -> VarKind {
        self.kinds[var]
    }

    /// `G x` for every row.
    pub fn row_activity(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.coeffs.iter().map(|&(j, a)| a * x[j]).sum()).collect()
    }

    /// `c + G^T y`: the reduced costs of a dual vector.
    pub fn reduced_costs(&self, y: &[f64]) -> Vec<f64> {
        let mut d = self.objective.clone();
        for (r, yr) in self.rows.iter().zip(y) {
            for &(j, a) in &r.coeffs {
                d[j] += a * yr;
            }
        }
        d
    }

    /// Feasibility and optimality measures for a primal-dual pair.
    ///
    /// `y` follows the sign convention of the dual `max -h^T y` subject to
    /// `G^T y + c >= 0` (`= 0` on free variables) and `y >= 0` on `<=` rows.
    pub fn certificate(&self, x: &[f64], y: &[f64]) -> Certificate {
        let mut primal = 0.0f64;
        for (r, act) in self.rows.iter().zip(self.row_activity(x)) {
            let v = match r.relation {
                Relation::Le => (act - r.rhs).max(0.0),
                Relation::Eq => (act - r.rhs).abs(),
            };
            primal = primal.max(v);
        }
        for (xj, k) in x.iter().zip(&self.kinds) {
            if *k == VarKind::NonNegative {
                primal = primal.max(-xj);
            }
        }
        let mut dual = 0.0f64;
        for (dj, k) in self.reduced_costs(y).iter().zip(&self.kinds) {
            dual = dual.max(match k {
                VarKind::NonNegative => -dj,
                VarKind::Free => dj.abs(),
            });
        }
        for (r, yr) in self.rows.iter().zip(y) {
            if r.relation == Relation::Le {
                dual = dual.max(-yr);
            }
        }
        let objective: f64 = self.objective.iter().zip(x).map(|(c, x)| c * x).sum();
        let dual_objective: f64 = -self.rows.iter().zip(y).map(|(r, y)| r.rhs * y).sum::<f64>();
        Certificate {
            primal_residual: primal,
            dual_residual: dual,
            gap: (objective - dual_objective).abs(),
            objective,
            dual_objective,
        }
    }

    fn validate(&self) -> Result<(), LpError> {
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective"));
        }
        let n = self.num_vars();
        for r in &self.rows {
            if !r.rhs.is_finite() {
                return Err(LpError::NonFinite("right-hand side"));
            }
            for &(j, a) in &r.coeffs {
                if j >= n {
                    return Err(LpError::VarOutOfRange { index: j, num_vars: n });
                }
                if !a.is_finite() {
                    return Err(LpError::NonFinite("constraint coefficients"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub objective: f64,
    pub dual_objective: f64,
}

impl Certificate {
    pub const PRIMAL_TOL: f64 = 1e-7;
    pub const DUAL_TOL: f64 = 1e-7;
    pub const GAP_TOL: f64 = 1e-6;

    pub fn passes(&self) -> bool {
        self.primal_residual <= Self::PRIMAL_TOL
            && self.dual_residual <= Self::DUAL_TOL
            && self.gap <= Self::GAP_TOL * (1.0 + self.objective.abs())
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// Row duals, `y >= 0` on `<=` rows (see [`LpProblem::certificate`]).
    pub y: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub certificate: Certificate,
    /// Human-readable detail for non-optimal outcomes.
    pub diagnostics: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpOptions {
    pub max_iterations: usize,
    pub refactor_every: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub degenerate_limit: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self { max_iterations: 200_000, refactor_every: 64, degenerate_limit: 50 }
    }
}

pub fn simplex_solve(lp: &LpProblem) -> Result<LpSolution, LpError> {
    simplex_solve_with(lp, &LpOptions::default())
}

pub fn simplex_solve_with(lp: &LpProblem, options: &LpOptions) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let mut s = Simplex::new(lp, *options);
    let (status, diagnostics) = s.run();
    let x: Vec<f64> = s.x[..s.n].to_vec();
    // Row duals from the final basis; `pi` is the simplex multiplier of `G x + s = h`.
    let pi = s.multipliers(false);
    let y: Vec<f64> = pi.iter().map(|p| -p).collect();
    let y: Vec<f64> = y
        .iter()
        .zip(&lp.rows)
        .map(|(&v, r)| if r.relation == Relation::Le { v.max(0.0) } else { v })
        .collect();
    let certificate = lp.certificate(&x, &y);
    let (status, diagnostics) = match status {
        LpStatus::Optimal if !certificate.passes() => (
            LpStatus::IterLimit,
            format!(
                "optimality certificate failed: primal {:.3e}, dual {:.3e}, gap {:.3e}",
                certificate.primal_residual, certificate.dual_residual, certificate.gap
            ),
        ),
        other => (other, diagnostics),
    };
    Ok(LpSolution {
        status,
        objective: certificate.objective,
        x,
        y,
        iterations: s.iterations,
        certificate,
        diagnostics,
    })
}

const FEAS_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-9;
const REL_PIVOT_TOL: f64 = 1e-7;
const PERTURBATION: f64 = 1e-7;
const MAX_PERTURBATIONS: usize = 3;

/// Deterministic value in `[0, 1)` (splitmix64 finaliser).
fn unit_hash(i: u64) -> f64 {
    let mut z = i.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable resting at zero.
    FreeZero,
}

struct Simplex {
    opts: LpOptions,
    m: usize,
    n: usize,
    // Columns of [G | I] in compressed form.
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
    col_scale: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    cost: Vec<f64>,
    rhs: Vec<f64>,
    original_rhs: Vec<f64>,
    perturbations: usize,
    perturbed: bool,
    x: Vec<f64>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    factor: Factor,
    iterations: usize,
}

impl Simplex {
    fn new(lp: &LpProblem, opts: LpOptions) -> Self {
        let m = lp.num_rows();
        let n = lp.num_vars();
        let total = n + m;
        let mut counts = vec![0usize; total];
        // Merge duplicate (row, var) entries.
        let mut merged: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
        for r in &lp.rows {
            let mut c = r.coeffs.clone();
            c.sort_by_key(|e| e.0);
            let mut out: Vec<(usize, f64)> = Vec::with_capacity(c.len());
            for (j, a) in c {
                match out.last_mut() {
                    Some(last) if last.0 == j => last.1 += a,
                    _ => out.push((j, a)),
                }
            }
            out.retain(|e| e.1 != 0.0);
            for &(j, _) in &out {
                counts[j] += 1;
            }
            merged.push(out);
        }
        for i in 0..m {
            counts[n + i] = 1;
        }
        let mut col_ptr = vec![0usize; total + 1];
        for j in 0..total {
            col_ptr[j + 1] = col_ptr[j] + counts[j];
        }
        let nnz = col_ptr[total];
        let mut row_idx = vec![0usize; nnz];
        let mut vals = vec![0.0; nnz];
        let mut fill = col_ptr.clone();
        for (i, row) in merged.iter().enumerate() {
            for &(j, a) in row {
                row_idx[fill[j]] = i;
                vals[fill[j]] = a;
                fill[j] += 1;
            }
        }
        for i in 0..m {
            row_idx[fill[n + i]] = i;
            vals[fill[n + i]] = 1.0;
        }
        let col_scale = (0..total)
            .map(|j| {
                let s: f64 = vals[col_ptr[j]..col_ptr[j + 1]].iter().map(|v| v * v).sum();
                1.0 / (1.0 + s).sqrt()
            })
            .collect();

        let mut lb = vec![0.0; total];
        let mut ub = vec![f64::INFINITY; total];
        let mut state = vec![VarState::AtLower; total];
        for j in 0..n {
            if lp.kinds[j] == VarKind::Free {
                lb[j] = f64::NEG_INFINITY;
                state[j] = VarState::FreeZero;
            }
        }
        for (i, r) in lp.rows.iter().enumerate() {
            if r.relation == Relation::Eq {
                ub[n + i] = 0.0;
            }
        }
        let mut cost = lp.objective.clone();
        cost.resize(total, 0.0);
        let rhs: Vec<f64> = lp.rows.iter().map(|r| r.rhs).collect();
        let basis: Vec<usize> = (n..total).collect();
        for &j in &basis {
            state[j] = VarState::Basic;
        }
        let mut s = Self {
            opts,
            m,
            n,
            col_ptr,
            row_idx,
            vals,
            col_scale,
            lb,
            ub,
            cost,
            original_rhs: rhs.clone(),
            rhs,
            perturbations: 0,
            perturbed: false,
            x: vec![0.0; total],
            state,
            basis,
            factor: Factor::default(),
            iterations: 0,
        };
        s.refactor();
        s
    }

    fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.vals[r])
    }

    /// Rebuild the factorization and recompute basic values from scratch.
    /// Structurally singular bases are repaired by swapping in slacks.
    fn refactor(&mut self) {
        loop {
            match Factor::build(&self.basis, self.m, |j| self.column(j)) {
                Ok(f) => {
                    self.factor = f;
                    break;
                }
                Err(Singular { positions, rows }) => {
                    for (p, r) in positions.into_iter().zip(rows) {
                        let old = self.basis[p];
                        self.state[old] = self.nonbasic_state(old);
                        self.x[old] = self.nonbasic_value(old);
                        let slack = self.n + r;
                        self.basis[p] = slack;
                        self.state[slack] = VarState::Basic;
                    }
                }
            }
        }
        self.recompute_basic_values();
    }

    fn nonbasic_state(&self, j: usize) -> VarState {
        let v = self.x[j];
        if self.lb[j].is_finite() && self.ub[j].is_finite() {
            if (v - self.lb[j]).abs() <= (v - self.ub[j]).abs() {
                VarState::AtLower
            } else {
                VarState::AtUpper
            }
        } else if self.lb[j].is_finite() {
            VarState::AtLower
        } else if self.ub[j].is_finite() {
            VarState::AtUpper
        } else {
            VarState::FreeZero
        }
    }

    fn nonbasic_value(&self, j: usize) -> f64 {
        match self.state[j] {
            VarState::AtLower => self.lb[j],
            VarState::AtUpper => self.ub[j],
            _ => 0.0,
        }
    }

    fn recompute_basic_values(&mut self) {
        let mut r = self.rhs.clone();
        for j in 0..self.n + self.m {
            if self.state[j] != VarState::Basic {
                let v = self.nonbasic_value(j);
                self.x[j] = v;
                if v != 0.0 {
                    let (rows, vals) = self.column(j);
                    for (&i, &a) in rows.iter().zip(vals) {
                        r[i] -= a * v;
                    }
                }
            }
        }
        let xb = self.factor.ftran(&r, |j| self.column(j));
        for (p, &j) in self.basis.iter().enumerate() {
            self.x[j] = xb[p];
        }
    }

    fn infeasibility(&self, j: usize) -> f64 {
        let v = self.x[j];
        if v < self.lb[j] - FEAS_TOL {
            self.lb[j] - v
        } else if v > self.ub[j] + FEAS_TOL {
            v - self.ub[j]
        } else {
            0.0
        }
    }

    fn phase_one_cost(&self, j: usize) -> f64 {
        let v = self.x[j];
        if v < self.lb[j] - FEAS_TOL {
            -1.0
        } else if v > self.ub[j] + FEAS_TOL {
            1.0
        } else {
            0.0
        }
    }

    /// Simplex multipliers `pi = c_B^T B^{-1}` for the phase 1 or phase 2 costs.
    fn multipliers(&self, phase_one: bool) -> Vec<f64> {
        let cb: Vec<f64> = self
            .basis
            .iter()
            .map(|&j| if phase_one { self.phase_one_cost(j) } else { self.cost[j] })
            .collect();
        self.factor.btran(&cb, |j| self.column(j))
    }

    fn reduced_cost(&self, j: usize, pi: &[f64], phase_one: bool) -> f64 {
        let (rows, vals) = self.column(j);
        let c = if phase_one { 0.0 } else { self.cost[j] };
        c - rows.iter().zip(vals).map(|(&i, &a)| pi[i] * a).sum::<f64>()
    }

    /// Entering candidate: `(var, direction)` with direction +1 to increase.
    fn price(&self, pi: &[f64], phase_one: bool, bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for j in 0..self.n + self.m {
            let dir = match self.state[j] {
                VarState::Basic => continue,
                _ if self.lb[j] == self.ub[j] => continue,
                VarState::AtLower => {
                    let d = self.reduced_cost(j, pi, phase_one);
                    if d < -DUAL_TOL { (d, 1.0) } else { continue }
                }
                VarState::AtUpper => {
                    let d = self.reduced_cost(j, pi, phase_one);
                    if d > DUAL_TOL { (d, -1.0) } else { continue }
                }
                VarState::FreeZero => {
                    let d = self.reduced_cost(j, pi, phase_one);
                    if d.abs() > DUAL_TOL { (d, -d.signum()) } else { continue }
                }
            };
            if bland {
                return Some((j, dir.1));
            }
            let score = dir.0.abs() * self.col_scale[j];
            if score > best_score {
                best_score = score;
                best = Some((j, dir.1));
            }
        }
        best
    }

    fn run(&mut self) -> (LpStatus, String) {
        let mut phase_one = true;
        let mut degenerate = 0usize;
        let mut verified_once = false;
        loop {
            if self.iterations >= self.opts.max_iterations {
                return (LpStatus::IterLimit, format!("iteration limit {} reached", self.opts.max_iterations));
            }
            if self.factor.etas.len() >= self.opts.refactor_every {
                self.refactor();
                // Drift or a repaired basis can leave basics out of bounds.
                if !phase_one && self.basis.iter().any(|&j| self.infeasibility(j) > 0.0) {
                    phase_one = true;
                }
            }
            if phase_one {
                let total: f64 = self.basis.iter().map(|&j| self.infeasibility(j)).sum();
                if total == 0.0 {
                    phase_one = false;
                    degenerate = 0;
                }
            }
            if degenerate >= self.opts.degenerate_limit && self.perturbations < MAX_PERTURBATIONS {
                self.perturb();
                phase_one |= self.basis.iter().any(|&j| self.infeasibility(j) > 0.0);
                degenerate = 0;
            }
            let bland = degenerate >= self.opts.degenerate_limit;
            let pi = self.multipliers(phase_one);
            let Some((q, dir)) = self.price(&pi, phase_one, bland) else {
                if phase_one {
                    // Refresh before declaring infeasibility.
                    self.refactor();
                    let total: f64 = self.basis.iter().map(|&j| self.infeasibility(j)).sum();
                    if total == 0.0 {
                        phase_one = false;
                        continue;
                    }
                    let pi = self.multipliers(true);
                    if self.price(&pi, true, false).is_some() {
                        continue;
                    }
                    if self.perturbed {
                        self.unperturb();
                        continue;
                    }
                    return (LpStatus::Infeasible, format!("phase 1 ended with infeasibility {total:.3e}"));
                }
                if !verified_once || !self.factor.etas.is_empty() {
                    verified_once = true;
                    self.refactor();
                    if self.basis.iter().any(|&j| self.infeasibility(j) > 0.0) {
                        phase_one = true;
                    }
                    continue;
                }
                if self.perturbed {
                    // Optimal for the shifted right-hand side; restore it and
                    // repair whatever primal infeasibility that exposes.
                    self.unperturb();
                    phase_one = self.basis.iter().any(|&j| self.infeasibility(j) > 0.0);
                    degenerate = 0;
                    continue;
                }
                return (LpStatus::Optimal, String::new());
            };
            verified_once = false;

            let alpha = self.factor.ftran_column(q, |j| self.column(j), self.m);
            match self.ratio_test(q, dir, &alpha, phase_one, bland) {
                Step::Unbounded => {
                    if phase_one {
                        // Cannot happen for a bounded phase 1 objective; refresh and retry.
                        self.refactor();
                        degenerate = self.opts.degenerate_limit;
                        continue;
                    }
                    return (LpStatus::Unbounded, format!("variable {q} can increase without bound"));
                }
                Step::Flip(theta) => {
                    self.apply_step(q, dir, theta, &alpha);
                    self.state[q] = if dir > 0.0 { VarState::AtUpper } else { VarState::AtLower };
                    self.x[q] = self.nonbasic_value(q);
                    degenerate = 0;
                }
                Step::Pivot { pos, theta, to_upper } => {
                    self.apply_step(q, dir, theta, &alpha);
                    let leaving = self.basis[pos];
                    self.state[leaving] = if to_upper { VarState::AtUpper } else { VarState::AtLower };
                    if self.lb[leaving].is_infinite() && self.ub[leaving].is_infinite() {
                        self.state[leaving] = VarState::FreeZero;
                    }
                    self.x[leaving] = self.nonbasic_value(leaving);
                    self.basis[pos] = q;
                    self.state[q] = VarState::Basic;
                    self.factor.push_eta(pos, &alpha);
                    if theta <= 1e-12 {
                        degenerate += 1;
                    } else {
                        degenerate = 0;
                    }
                }
            }
            self.iterations += 1;
        }
    }

    /// Shift every right-hand side up by a small deterministic amount so
    /// that degenerate vertices split apart.
    fn perturb(&mut self) {
        let scale = PERTURBATION * 0.1f64.powi(self.perturbations as i32);
        for (i, (r, &h)) in self.rhs.iter_mut().zip(&self.original_rhs).enumerate() {
            *r = h + scale * (1.0 + h.abs()) * (1.0 + unit_hash(i as u64));
        }
        self.perturbations += 1;
        self.perturbed = true;
        self.refactor();
    }

    fn unperturb(&mut self) {
        self.rhs.clone_from(&self.original_rhs);
        self.perturbed = false;
        self.refactor();
    }

    fn apply_step(&mut self, q: usize, dir: f64, theta: f64, alpha: &[f64]) {
        if theta == 0.0 {
            return;
        }
        self.x[q] += dir * theta;
        for (p, &j) in self.basis.iter().enumerate() {
            if alpha[p] != 0.0 {
                self.x[j] -= dir * theta * alpha[p];
            }
        }
    }

    /// Two-pass (Harris) ratio test; exact minimum ratio under Bland's rule.
    fn ratio_test(&self, q: usize, dir: f64, alpha: &[f64], phase_one: bool, bland: bool) -> Step {
        // Candidate: (position, distance to blocking bound, |rate|, hits upper).
        let mut cands: Vec<(usize, f64, f64, bool)> = Vec::new();
        let scale = alpha.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let tol = PIVOT_TOL.max(REL_PIVOT_TOL * scale);
        for (p, &j) in self.basis.iter().enumerate() {
            let rate = -dir * alpha[p];
            if rate.abs() < tol {
                continue;
            }
            let v = self.x[j];
            let (lo, hi) = (self.lb[j], self.ub[j]);
            let below = v < lo - FEAS_TOL;
            let above = v > hi + FEAS_TOL;
            if phase_one && below {
                if rate > 0.0 {
                    cands.push((p, lo - v, rate, false));
                }
            } else if phase_one && above {
                if rate < 0.0 {
                    cands.push((p, v - hi, -rate, true));
                }
            } else if rate < 0.0 && lo.is_finite() {
                cands.push((p, (v - lo).max(0.0), -rate, false));
            } else if rate > 0.0 && hi.is_finite() {
                cands.push((p, (hi - v).max(0.0), rate, true));
            }
        }
        let flip = self.ub[q] - self.lb[q];
        let chosen = if cands.is_empty() {
            None
        } else if bland {
            let min = cands.iter().map(|c| c.1 / c.2).fold(f64::INFINITY, f64::min);
            cands
                .iter()
                .filter(|c| c.1 / c.2 <= min + 1e-12 * (1.0 + min))
                .min_by_key(|c| self.basis[c.0])
                .copied()
        } else {
            let bound = cands.iter().map(|c| (c.1 + FEAS_TOL) / c.2).fold(f64::INFINITY, f64::min);
            cands
                .iter()
                .filter(|c| c.1 / c.2 <= bound)
                .max_by(|a, b| a.2.total_cmp(&b.2))
                .copied()
        };
        match chosen {
            None if flip.is_finite() => Step::Flip(flip),
            None => Step::Unbounded,
            Some(c) => {
                let theta = c.1 / c.2;
                if flip.is_finite() && flip < theta {
                    Step::Flip(flip)
                } else {
                    Step::Pivot { pos: c.0, theta, to_upper: c.3 }
                }
            }
        }
    }
}

enum Step {
    Unbounded,
    Flip(f64),
    Pivot { pos: usize, theta: f64, to_upper: bool },
}

struct Singular {
    positions: Vec<usize>,
    rows: Vec<usize>,
}

struct Eta {
    pos: usize,
    pivot: f64,
    entries: Vec<(usize, f64)>,
}

/// Basis factorization: singleton columns, a sparse LU of the remaining core,
/// and a product-form eta file.
#[derive(Default)]
struct Factor {
    /// For each basis position, `Some((row, value))` when it is a singleton column.
    singleton: Vec<Option<(usize, f64)>>,
    /// Core basis positions in elimination order.
    core_pos: Vec<usize>,
    /// Variables occupying `core_pos` when the factor was built.
    core_vars: Vec<usize>,
    /// Pivot row (in the full row space) of each elimination step.
    pivot_rows: Vec<usize>,
    /// `l[s]`: multipliers `(t, l)` with `t < s` applied to step `s`'s row.
    l: Vec<Vec<(usize, f64)>>,
    /// `u[s]`: off-diagonal entries `(t, u)` with `t > s` of step `s`'s row.
    u: Vec<Vec<(usize, f64)>>,
    u_diag: Vec<f64>,
    etas: Vec<Eta>,
}

impl Factor {
    fn build<'c, F>(basis: &[usize], m: usize, column: F) -> Result<Self, Singular>
    where
        F: Fn(usize) -> (&'c [usize], &'c [f64]),
    {
        let mut singleton = vec![None; m];
        let mut owned = vec![false; m];
        let mut core_pos = Vec::new();
        for (p, &j) in basis.iter().enumerate() {
            let (rows, vals) = column(j);
            if rows.len() == 1 && !owned[rows[0]] {
                owned[rows[0]] = true;
                singleton[p] = Some((rows[0], vals[0]));
            } else {
                core_pos.push(p);
            }
        }
        let core_rows: Vec<usize> = (0..m).filter(|&r| !owned[r]).collect();
        let k = core_rows.len();
        debug_assert_eq!(k, core_pos.len());
        let mut local = vec![usize::MAX; m];
        for (i, &r) in core_rows.iter().enumerate() {
            local[r] = i;
        }
        // Sparsest columns first keeps fill low.
        let core_nnz = |p: usize| column(basis[p]).0.iter().filter(|&&r| local[r] != usize::MAX).count();
        core_pos.sort_by_key(|&p| (core_nnz(p), p));

        let mut lu = vec![0.0; k * k];
        let mut row_nnz = vec![0usize; k];
        for (c, &p) in core_pos.iter().enumerate() {
            let (rows, vals) = column(basis[p]);
            for (&r, &v) in rows.iter().zip(vals) {
                if local[r] != usize::MAX && v != 0.0 {
                    lu[local[r] * k + c] = v;
                    row_nnz[local[r]] += 1;
                }
            }
        }
        let col_max: Vec<f64> =
            (0..k).map(|c| (0..k).map(|r| lu[r * k + c].abs()).fold(0.0, f64::max)).collect();

        // Right-looking elimination with threshold pivoting: among rows within
        // a factor of the largest entry, take the one with the fewest nonzeros.
        let mut pivoted = vec![false; k];
        let mut perm = Vec::with_capacity(k);
        let mut failed = Vec::new();
        let mut nz = Vec::with_capacity(k);
        for s in 0..k {
            let amax = (0..k).filter(|&r| !pivoted[r]).map(|r| lu[r * k + s].abs()).fold(0.0, f64::max);
            if !(amax > 1e-11 * col_max[s].max(1e-300)) {
                failed.push(s);
                continue;
            }
            let pr = (0..k)
                .filter(|&r| !pivoted[r] && lu[r * k + s].abs() >= 0.1 * amax)
                .min_by_key(|&r| row_nnz[r])
                .expect("amax row qualifies");
            pivoted[pr] = true;
            perm.push(pr);
            let piv = lu[pr * k + s];
            nz.clear();
            nz.extend((s + 1..k).filter(|&c| lu[pr * k + c] != 0.0));
            for r in 0..k {
                if pivoted[r] || lu[r * k + s] == 0.0 {
                    continue;
                }
                let l = lu[r * k + s] / piv;
                lu[r * k + s] = l;
                for &c in &nz {
                    let before = lu[r * k + c];
                    lu[r * k + c] = before - l * lu[pr * k + c];
                    if before == 0.0 {
                        row_nnz[r] += 1;
                    }
                }
            }
        }
        if !failed.is_empty() {
            let rows: Vec<usize> = (0..k).filter(|&r| !pivoted[r]).map(|r| core_rows[r]).collect();
            return Err(Singular { positions: failed.iter().map(|&s| core_pos[s]).collect(), rows });
        }
        let mut l = Vec::with_capacity(k);
        let mut u = Vec::with_capacity(k);
        let mut u_diag = Vec::with_capacity(k);
        for &r in &perm {
            let row = &lu[r * k..(r + 1) * k];
            let (lo, hi) = row.split_at(u.len());
            l.push(lo.iter().enumerate().filter(|e| *e.1 != 0.0).map(|(t, &v)| (t, v)).collect());
            u_diag.push(hi[0]);
            let base = u.len() + 1;
            u.push(hi[1..].iter().enumerate().filter(|e| *e.1 != 0.0).map(|(t, &v)| (base + t, v)).collect());
        }
        let core_vars = core_pos.iter().map(|&p| basis[p]).collect();
        let pivot_rows = perm.iter().map(|&r| core_rows[r]).collect();
        Ok(Self { singleton, core_pos, core_vars, pivot_rows, l, u, u_diag, etas: Vec::new() })
    }

    fn push_eta(&mut self, pos: usize, alpha: &[f64]) {
        let entries = alpha
            .iter()
            .enumerate()
            .filter(|&(i, &a)| i != pos && a != 0.0)
            .map(|(i, &a)| (i, a))
            .collect();
        self.etas.push(Eta { pos, pivot: alpha[pos], entries });
    }

    fn ftran_column<'c, F>(&self, j: usize, column: F, m: usize) -> Vec<f64>
    where
        F: Fn(usize) -> (&'c [usize], &'c [f64]),
    {
        let mut a = vec![0.0; m];
        let (rows, vals) = column(j);
        for (&r, &v) in rows.iter().zip(vals) {
            a[r] = v;
        }
        self.ftran(&a, column)
    }

    /// Solve `B x = a`; `a` is indexed by row, the result by basis position.
    fn ftran<'c, F>(&self, a: &[f64], column: F) -> Vec<f64>
    where
        F: Fn(usize) -> (&'c [usize], &'c [f64]),
    {
        let m = a.len();
        let k = self.pivot_rows.len();
        let mut x = vec![0.0; m];
        if k > 0 {
            let mut y = vec![0.0; k];
            for s in 0..k {
                let mut v = a[self.pivot_rows[s]];
                for &(t, l) in &self.l[s] {
                    v -= l * y[t];
                }
                y[s] = v;
            }
            for s in (0..k).rev() {
                let mut v = y[s];
                for &(t, u) in &self.u[s] {
                    v -= u * y[t];
                }
                y[s] = v / self.u_diag[s];
            }
            for (s, &p) in self.core_pos.iter().enumerate() {
                x[p] = y[s];
            }
        }
        let mut r = a.to_vec();
        for (&p, &j) in self.core_pos.iter().zip(&self.core_vars) {
            let v = x[p];
            if v != 0.0 {
                let (rows, vals) = column(j);
                for (&i, &c) in rows.iter().zip(vals) {
                    r[i] -= c * v;
                }
            }
        }
        for (p, s) in self.singleton.iter().enumerate() {
            if let Some((row, v)) = *s {
                x[p] = r[row] / v;
            }
        }
        for e in &self.etas {
            let xp = x[e.pos] / e.pivot;
            x[e.pos] = xp;
            if xp != 0.0 {
                for &(i, a) in &e.entries {
                    x[i] -= a * xp;
                }
            }
        }
        x
    }

    /// Solve `B^T pi = c`; `c` is indexed by basis position, `pi` by row.
    fn btran<'c, F>(&self, c: &[f64], column: F) -> Vec<f64>
    where
        F: Fn(usize) -> (&'c [usize], &'c [f64]),
    {
        let m = c.len();
        let mut u = c.to_vec();
        for e in self.etas.iter().rev() {
            let mut v = u[e.pos];
            for &(i, a) in &e.entries {
                v -= u[i] * a;
            }
            u[e.pos] = v / e.pivot;
        }
        let mut pi = vec![0.0; m];
        for (p, s) in self.singleton.iter().enumerate() {
            if let Some((row, v)) = *s {
                pi[row] = u[p] / v;
            }
        }
        let k = self.pivot_rows.len();
        if k > 0 {
            let mut w = vec![0.0; k];
            for (s, (&p, &j)) in self.core_pos.iter().zip(&self.core_vars).enumerate() {
                let (rows, vals) = column(j);
                let mut v = u[p];
                for (&i, &a) in rows.iter().zip(vals) {
                    v -= a * pi[i];
                }
                w[s] = v;
            }
            // Core rows of pi are still zero above, so the sums only saw singleton rows.
            // Solve U^T z = w, then L^T v = z, both by scattering rows.
            for s in 0..k {
                let z = w[s] / self.u_diag[s];
                w[s] = z;
                if z != 0.0 {
                    for &(t, u) in &self.u[s] {
                        w[t] -= u * z;
                    }
                }
            }
            for s in (0..k).rev() {
                let v = w[s];
                if v != 0.0 {
                    for &(t, l) in &self.l[s] {
                        w[t] -= l * v;
                    }
                }
            }
            for s in 0..k {
                pi[self.pivot_rows[s]] = w[s];
            }
        }
        pi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_variable_upper_bound() {
        let mut lp = LpProblem::new();
        let x = lp.add_var(-1.0, VarKind::NonNegative);
        lp.add_row(vec![(x, 1.0)], Relation::Le, 1.0);
        let s = simplex_solve(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12);
        assert!((s.objective + 1.0).abs() < 1e-12);
        assert!((s.y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut lp = LpProblem::new();
        let x = lp.add_var(0.0, VarKind::NonNegative);
        lp.add_row(vec![(x, 1.0)], Relation::Le, -1.0);
        assert_eq!(simplex_solve(&lp).unwrap().status, LpStatus::Infeasible);

        let mut lp = LpProblem::new();
        let x = lp.add_var(-1.0, VarKind::NonNegative);
        let y = lp.add_var(0.0, VarKind::NonNegative);
        lp.add_row(vec![(x, 1.0), (y, -1.0)], Relation::Le, 1.0);
        assert_eq!(simplex_solve(&lp).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_rows_and_free_variables() {
        // min x + 2y  s.t. x + y = 3, x - y <= 1, y free.
        let mut lp = LpProblem::new();
        let x = lp.add_var(1.0, VarKind::NonNegative);
        let y = lp.add_var(2.0, VarKind::Free);
        lp.add_row(vec![(x, 1.0), (y, 1.0)], Relation::Eq, 3.0);
        lp.add_row(vec![(x, 1.0), (y, -1.0)], Relation::Le, 1.0);
        let s = simplex_solve(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 2.0).abs() < 1e-10 && (s.x[1] - 1.0).abs() < 1e-10);
        assert!((s.objective - 4.0).abs() < 1e-10);
        assert!(s.certificate.passes());
    }

    #[test]
    fn rejects_bad_data() {
        let mut lp = LpProblem::new();
        lp.add_var(f64::NAN, VarKind::NonNegative);
        assert_eq!(simplex_solve(&lp).unwrap_err(), LpError::NonFinite("objective"));
        let mut lp = LpProblem::new();
        lp.add_var(1.0, VarKind::NonNegative);
        lp.add_row(vec![(3, 1.0)], Relation::Le, 1.0);
        assert!(matches!(simplex_solve(&lp), Err(LpError::VarOutOfRange { index: 3, .. })));
    }

    /// Brute-force oracle: best objective over all vertices of a 3-variable
    /// polytope, formed from every triple of tight constraints (including
    /// the nonnegativity bounds).
    fn vertex_enumeration(a: &[[f64; 3]], b: &[f64], c: [f64; 3]) -> Option<f64> {
        let mut planes: Vec<([f64; 3], f64)> = a.iter().copied().zip(b.iter().copied()).collect();
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = -1.0;
            planes.push((e, 0.0));
        }
        let mut best: Option<f64> = None;
        let n = planes.len();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let m = [planes[i].0, planes[j].0, planes[k].0];
                    let rhs = [planes[i].1, planes[j].1, planes[k].1];
                    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                    if det.abs() < 1e-9 {
                        continue;
                    }
                    let mut x = [0.0; 3];
                    for col in 0..3 {
                        let mut mm = m;
                        for row in 0..3 {
                            mm[row][col] = rhs[row];
                        }
                        let d = mm[0][0] * (mm[1][1] * mm[2][2] - mm[1][2] * mm[2][1])
                            - mm[0][1] * (mm[1][0] * mm[2][2] - mm[1][2] * mm[2][0])
                            + mm[0][2] * (mm[1][0] * mm[2][1] - mm[1][1] * mm[2][0]);
                        x[col] = d / det;
                    }
                    let ok = planes.iter().all(|(p, h)| p[0] * x[0] + p[1] * x[1] + p[2] * x[2] <= h + 1e-9);
                    if ok {
                        let v = c[0] * x[0] + c[1] * x[1] + c[2] * x[2];
                        best = Some(best.map_or(v, |b: f64| b.min(v)));
                    }
                }
            }
        }
        best
    }

    #[test]
    fn random_three_variable_lps_match_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut solved = 0;
        for _ in 0..300 {
            let rows = rng.random_range(2..7);
            let a: Vec<[f64; 3]> = (0..rows)
                .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0f64).round() + rng.random_range(-0.5..0.5)))
                .collect();
            let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..8.0)).collect();
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let mut lp = LpProblem::new();
            for cj in c {
                lp.add_var(cj, VarKind::NonNegative);
            }
            // A box keeps the oracle finite.
            for k in 0..3 {
                lp.add_row(vec![(k, 1.0)], Relation::Le, 10.0);
            }
            let mut a_all = a.clone();
            let mut b_all = b.clone();
            for k in 0..3 {
                let mut e = [0.0; 3];
                e[k] = 1.0;
                a_all.push(e);
                b_all.push(10.0);
            }
            for (row, rhs) in a.iter().zip(&b) {
                lp.add_row((0..3).map(|k| (k, row[k])).collect(), Relation::Le, *rhs);
            }
            let s = simplex_solve(&lp).unwrap();
            match vertex_enumeration(&a_all, &b_all, c) {
                None => assert_eq!(s.status, LpStatus::Infeasible),
                Some(best) => {
                    assert_eq!(s.status, LpStatus::Optimal, "{}", s.diagnostics);
                    assert!((s.objective - best).abs() < 1e-8, "{} vs {best}", s.objective);
                    assert!(s.certificate.passes());
                    solved += 1;
                }
            }
        }
        assert!(solved > 100);
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Beale's cycling example under the textbook rule.
        let mut lp = LpProblem::new();
        let c = [-0.75, 150.0, -0.02, 6.0];
        for cj in c {
            lp.add_var(cj, VarKind::NonNegative);
        }
        lp.add_row(vec![(0, 0.25), (1, -60.0), (2, -0.04), (3, 9.0)], Relation::Le, 0.0);
        lp.add_row(vec![(0, 0.5), (1, -90.0), (2, -0.02), (3, 3.0)], Relation::Le, 0.0);
        lp.add_row(vec![(2, 1.0)], Relation::Le, 1.0);
        let s = simplex_solve(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 0.05).abs() < 1e-10);
    }

    #[test]
    fn larger_random_lp_is_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (40, 120);
        let mut lp = LpProblem::new();
        for _ in 0..n {
            lp.add_var(rng.random_range(-1.0..1.0), VarKind::NonNegative);
        }
        for _ in 0..m {
            let mut coeffs = Vec::new();
            for j in 0..n {
                if rng.random_bool(0.3) {
                    coeffs.push((j, rng.random_range(0.0..2.0)));
                }
            }
            lp.add_row(coeffs, Relation::Le, rng.random_range(1.0..5.0));
        }
        for j in 0..n {
            lp.add_row(vec![(j, 1.0)], Relation::Le, 3.0);
        }
        let s = simplex_solve_with(&lp, &LpOptions { refactor_every: 7, ..LpOptions::default() }).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(s.certificate.passes(), "{:?}", s.certificate);
    }
}
