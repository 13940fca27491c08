//! Dense primal-dual interior-point solver for convex QPs and LPs.
//!
//! Solves
//!
//! ```txt
//!     min  ½ xᵀ H x + gᵀ x + c
//!     s.t. A_eq x  = b_eq
//!          A_in x <= b_in
//! ```
//!
//! with Mehrotra's predictor-corrector. Multipliers follow the convention
//! `H x + g + A_eqᵀ λ_eq + A_inᵀ λ_in = 0`, `λ_in >= 0`, so that a multiplier is the
//! negative sensitivity of the optimal value with respect to its right-hand side.

use std::cell::OnceCell;

use nalgebra::{Cholesky, DMatrix, DVector, LU};

/// Dimensions and data of one convex program.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl ConvexProgram {
    pub fn new(n: usize) -> Self {
        ConvexProgram {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            constant: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    /// Builds a program from row lists `(coefficients, rhs)`.
    pub fn from_rows(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
        eq_rows: &[(Vec<f64>, f64)],
        in_rows: &[(Vec<f64>, f64)],
    ) -> Self {
        let n = linear.len();
        let stack = |rows: &[(Vec<f64>, f64)]| {
            (
                DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]),
                DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1)),
            )
        };
        let (a_eq, b_eq) = stack(eq_rows);
        let (a_in, b_in) = stack(in_rows);
        ConvexProgram {
            hessian,
            linear,
            constant,
            a_eq,
            b_eq,
            a_in,
            b_in,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn num_in(&self) -> usize {
        self.b_in.len()
    }

    pub fn push_eq(&mut self, row: &[f64], rhs: f64) {
        self.a_eq = append_row(&self.a_eq, row);
        self.b_eq = self.b_eq.push(rhs);
    }

    pub fn push_in(&mut self, row: &[f64], rhs: f64) {
        self.a_in = append_row(&self.a_in, row);
        self.b_in = self.b_in.push(rhs);
    }

    /// Adds `lb <= x_i <= ub` as two inequality rows.
    pub fn push_bounds(&mut self, i: usize, lb: f64, ub: f64) {
        let n = self.num_vars();
        let mut row = vec![0.0; n];
        row[i] = 1.0;
        self.push_in(&row, ub);
        row[i] = -1.0;
        self.push_in(&row, -lb);
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    /// Checks dimensions and symmetry of the Hessian.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.num_vars();
        if self.hessian.shape() != (n, n) {
            return Err(format!("Hessian is {:?}, expected {n}x{n}", self.hessian.shape()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err("equality system has inconsistent dimensions".into());
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err("inequality system has inconsistent dimensions".into());
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.hessian.amax()) {
            return Err(format!("Hessian is not symmetric (max defect {asym:e})"));
        }
        Ok(())
    }
}

fn append_row(m: &DMatrix<f64>, row: &[f64]) -> DMatrix<f64> {
    let (r, c) = m.shape();
    assert_eq!(row.len(), c, "row length mismatch");
    let mut out = m.clone().resize_vertically(r + 1, 0.0);
    for (j, &v) in row.iter().enumerate() {
        out[(r, j)] = v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Stationarity and primal feasibility, relative to the data scale.
    pub kkt: f64,
    /// Complementarity gap `sᵀz`, relative to `1 + |objective|`.
    pub gap: f64,
    pub max_iterations: usize,
    /// Proximal term added to the primal block of the Newton system.
    pub regularization: f64,
    /// Infeasibility measure above which a stall counts toward declaring infeasibility.
    pub stall_threshold: f64,
    pub stall_iterations: usize,
    /// After convergence, re-solve the KKT system on the identified active set and
    /// keep that solution if it is feasible with nonnegative multipliers.
    pub polish: bool,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            kkt: 1e-8,
            gap: 1e-10,
            max_iterations: 100,
            regularization: 1e-10,
            stall_threshold: 1e-6,
            stall_iterations: 10,
            polish: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub lambda_in: DVector<f64>,
    pub objective: f64,
    /// Infinity norm of stationarity, feasibility and complementarity residuals.
    pub kkt_residual: f64,
    /// Scaled primal infeasibility at termination.
    pub primal_infeasibility: f64,
    pub iterations: usize,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn new(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter_map(|j| {
                        let v = m[(i, j)];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        SparseRows { rows }
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()),
        )
    }

    fn tr_mul(&self, y: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            if yi != 0.0 {
                for &(j, v) in r {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    /// `m += Cᵀ diag(w) C`.
    fn add_weighted_gram(&self, w: &DVector<f64>, m: &mut DMatrix<f64>) {
        for (r, &wi) in self.rows.iter().zip(w.iter()) {
            for &(a, va) in r {
                let s = wi * va;
                for &(b, vb) in r {
                    m[(a, b)] += s * vb;
                }
            }
        }
    }
}

/// Solver for `[M Aᵀ; A 0] (dx, dy) = (r1, r2)` with `M` positive definite. Uses the
/// Schur complement, refines the solution iteratively, and switches to a pivoted LU of
/// the full system when the Schur route is singular or inaccurate.
struct NewtonSystem {
    m: DMatrix<f64>,
    schur: Option<Factor>,
    full: OnceCell<Option<Factor>>,
}

enum Factor {
    Schur {
        chol: Option<Cholesky<f64, nalgebra::Dyn>>,
        lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
        m_inv_at: DMatrix<f64>,
        schur: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    },
    Full(LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Largest accepted backward error of a Newton solve, relative to the data.
const NEWTON_ACCURACY: f64 = 1e-9;

impl NewtonSystem {
    fn factor(m: DMatrix<f64>, a: &DMatrix<f64>) -> Option<Self> {
        let schur = Factor::schur(m.clone(), a);
        let full = OnceCell::new();
        if schur.is_none() {
            full.set(Factor::full(&m, a)).ok();
            full.get()?.as_ref()?;
        }
        Some(NewtonSystem { m, schur, full })
    }

    fn solve(&self, a: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        if let Some(f) = &self.schur {
            if let Some(out) = self.refined(f, a, r1, r2) {
                return Some(out);
            }
        }
        let full = self.full.get_or_init(|| Factor::full(&self.m, a)).as_ref()?;
        self.refined(full, a, r1, r2)
    }

    /// Solution refined until its backward error is acceptable (at most two passes),
    /// or `None`.
    fn refined(
        &self,
        f: &Factor,
        a: &DMatrix<f64>,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let (mut dx, mut dy) = f.solve(a, r1, r2)?;
        for pass in 0..3 {
            if !dx.iter().chain(dy.iter()).all(|v| v.is_finite()) {
                return None;
            }
            let e1 = r1 - &self.m * &dx - a.tr_mul(&dy);
            let e2 = r2 - a * &dx;
            let data = inf_norm(r1).max(inf_norm(r2))
                + self.m.amax().max(a.amax()) * inf_norm(&dx).max(inf_norm(&dy));
            if inf_norm(&e1).max(inf_norm(&e2)) <= NEWTON_ACCURACY * data {
                return Some((dx, dy));
            }
            if pass == 2 {
                break;
            }
            let (cx, cy) = f.solve(a, &e1, &e2)?;
            dx += cx;
            dy += cy;
        }
        None
    }
}

impl Factor {
    fn schur(m: DMatrix<f64>, a: &DMatrix<f64>) -> Option<Self> {
        let (chol, lu) = match Cholesky::new(m.clone()) {
            Some(c) => (Some(c), None),
            None => {
                let lu = m.lu();
                if !lu.is_invertible() {
                    return None;
                }
                (None, Some(lu))
            }
        };
        let solve_m = |b: &DMatrix<f64>| match (&chol, &lu) {
            (Some(c), _) => Some(c.solve(b)),
            (None, Some(lu)) => lu.solve(b),
            _ => None,
        };
        let (m_inv_at, schur) = if a.nrows() > 0 {
            let m_inv_at = solve_m(&a.transpose())?;
            let mut s = a * &m_inv_at;
            let scale = s.diagonal().amax().max(1.0);
            for i in 0..s.nrows() {
                s[(i, i)] += 1e-14 * scale;
            }
            let s = s.lu();
            if !s.is_invertible() || !m_inv_at.iter().all(|v| v.is_finite()) {
                return None;
            }
            (m_inv_at, Some(s))
        } else {
            (DMatrix::zeros(0, 0), None)
        };
        Some(Factor::Schur {
            chol,
            lu,
            m_inv_at,
            schur,
        })
    }

    fn full(m: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<Self> {
        let (n, me) = (m.nrows(), a.nrows());
        let mut k = DMatrix::zeros(n + me, n + me);
        k.view_mut((0, 0), (n, n)).copy_from(m);
        k.view_mut((0, n), (n, me)).copy_from(&a.transpose());
        k.view_mut((n, 0), (me, n)).copy_from(a);
        let scale = m.amax().max(1.0);
        for i in n..n + me {
            k[(i, i)] = -1e-14 * scale;
        }
        let lu = k.lu();
        lu.is_invertible().then_some(Factor::Full(lu))
    }

    fn solve(&self, a: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let out = match self {
            Factor::Full(lu) => {
                let n = r1.len();
                let mut rhs = DVector::zeros(n + r2.len());
                rhs.rows_mut(0, n).copy_from(r1);
                rhs.rows_mut(n, r2.len()).copy_from(r2);
                let sol = lu.solve(&rhs)?;
                (sol.rows(0, n).into_owned(), sol.rows(n, r2.len()).into_owned())
            }
            Factor::Schur {
                chol,
                lu,
                m_inv_at,
                schur,
            } => {
                let m_inv_r1 = match (chol, lu) {
                    (Some(c), _) => c.solve(r1),
                    (None, Some(lu)) => lu.solve(r1)?,
                    _ => return None,
                };
                match schur {
                    None => (m_inv_r1, DVector::zeros(0)),
                    Some(s) => {
                        let rhs = a * &m_inv_r1 - r2;
                        let dy = s.solve(&rhs)?;
                        let dx = m_inv_r1 - m_inv_at * &dy;
                        (dx, dy)
                    }
                }
            }
        };
        Some(out)
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Largest step in (0, 1] keeping `v + α dv` strictly positive (before the boundary fraction).
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&vi, &d)| -vi / d)
        .fold(1.0, f64::min)
}

struct Fallback {
    stat: f64,
    infeas: f64,
    kkt: f64,
    x: DVector<f64>,
    y: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
}

pub fn solve(program: &ConvexProgram, tol: &Tolerances) -> SolveResult {
    if let Err(msg) = program.validate() {
        panic!("malformed convex program: {msg}");
    }
    let n = program.num_vars();
    let me = program.num_eq();
    let mi = program.num_in();
    // The objective is normalized internally; multipliers are scaled back on exit.
    let k = 1.0 + inf_norm(&program.linear).max(program.hessian.amax());
    let h = &(&program.hessian / k);
    let g = &(&program.linear / k);
    let a = &program.a_eq;
    let b = &program.b_eq;
    let c = SparseRows::new(&program.a_in);
    let d = &program.b_in;

    let scale_d = 1.0 + inf_norm(b).max(inf_norm(d));
    let scale_g = 1.0 + inf_norm(g).max(h.amax());

    let mut base = h.clone();
    for i in 0..n {
        base[(i, i)] += tol.regularization;
    }

    // Starting point: least-squares fit of the constraints, then slacks and duals
    // shifted into the positive orthant.
    let mut x = {
        let mut m = base.clone();
        c.add_weighted_gram(&DVector::from_element(mi, 1.0), &mut m);
        let r1 = -g + c.tr_mul(d, n);
        NewtonSystem::factor(m, a)
            .and_then(|sys| sys.solve(a, &r1, b))
            .map(|(x, _)| x)
            .unwrap_or_else(|| DVector::zeros(n))
    };
    let mut y = DVector::zeros(me);
    let residual = d - c.mul(&x);
    let shift = |v: DVector<f64>| {
        let lowest = v.min();
        if mi > 0 && lowest < 1e-8 {
            v.add_scalar(1.0 - lowest)
        } else {
            v
        }
    };
    let mut s = shift(residual.clone());
    let mut z = shift(-residual);

    let mut best_infeas = f64::INFINITY;
    let mut stall = 0usize;
    let mut best_stat = f64::INFINITY;
    let mut flat = 0usize;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0usize;
    let mut kkt = f64::INFINITY;
    let mut infeas = f64::INFINITY;
    // Best near-optimal iterate, returned if the iteration later breaks down on a
    // badly scaled Newton system.
    let mut fallback: Option<Fallback> = None;

    for iter in 0..=tol.max_iterations {
        iterations = iter;
        let cx = c.mul(&x);
        let r_d = h * &x + g + a.transpose() * &y + c.tr_mul(&z, n);
        let r_e = a * &x - b;
        let r_i = &cx + &s - d;
        let gap = s.dot(&z);
        let mu = if mi > 0 { gap / mi as f64 } else { 0.0 };
        let obj = program.objective(&x) / k;

        let stat = inf_norm(&r_d) / scale_g;
        infeas = inf_norm(&r_e).max(inf_norm(&r_i)) / scale_d;
        kkt = stat.max(infeas).max(mu);
        let gap_ok = gap <= tol.gap * (1.0 + obj.abs());
        if stat <= tol.kkt && infeas <= tol.kkt && gap_ok {
            status = SolveStatus::Optimal;
            break;
        }
        // Roundoff floor: complementarity and feasibility are done but stationarity
        // has stopped improving.
        let near_optimal = gap_ok && infeas <= tol.kkt && stat <= 1e3 * tol.kkt;
        if near_optimal {
            if fallback.as_ref().is_none_or(|f: &Fallback| stat < f.stat) {
                fallback = Some(Fallback {
                    stat,
                    infeas,
                    kkt,
                    x: x.clone(),
                    y: y.clone(),
                    s: s.clone(),
                    z: z.clone(),
                });
            }
            if stat < 0.5 * best_stat {
                best_stat = stat;
                flat = 0;
            } else {
                flat += 1;
                if flat >= 3 {
                    status = SolveStatus::Optimal;
                    break;
                }
            }
        }

        if infeas > tol.stall_threshold && infeas > 0.9 * best_infeas {
            stall += 1;
            if stall >= tol.stall_iterations {
                status = SolveStatus::Infeasible;
                break;
            }
        } else {
            stall = 0;
        }
        best_infeas = best_infeas.min(infeas);
        if iter == tol.max_iterations {
            break;
        }

        let w = DVector::from_iterator(mi, (0..mi).map(|i| z[i] / s[i]));
        let mut m = base.clone();
        c.add_weighted_gram(&w, &mut m);
        let Some(sys) = NewtonSystem::factor(m, a) else {
            if near_optimal {
                status = SolveStatus::Optimal;
            }
            break;
        };

        let newton = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // r_c is the complementarity right-hand side of z∘ds + s∘dz = r_c.
            let t = DVector::from_iterator(mi, (0..mi).map(|i| (r_c[i] + z[i] * r_i[i]) / s[i]));
            let r1 = -&r_d - c.tr_mul(&t, n);
            let r2 = -&r_e;
            let (dx, dy) = sys.solve(a, &r1, &r2)?;
            let cdx = c.mul(&dx);
            let ds = -&r_i - &cdx;
            let dz = DVector::from_iterator(mi, (0..mi).map(|i| (r_c[i] + z[i] * r_i[i] + z[i] * cdx[i]) / s[i]));
            Some((dx, dy, ds, dz))
        };

        // Predictor.
        let r_aff = -s.component_mul(&z);
        let Some((_, _, ds_a, dz_a)) = newton(&r_aff) else {
            if near_optimal {
                status = SolveStatus::Optimal;
            }
            break;
        };
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (&s + alpha_aff * &ds_a).dot(&(&z + alpha_aff * &dz_a)) / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };

        // Corrector.
        let r_c = DVector::from_iterator(
            mi,
            (0..mi).map(|i| -s[i] * z[i] + sigma * mu - ds_a[i] * dz_a[i]),
        );
        let Some((dx, dy, ds, dz)) = newton(&r_c) else {
            if near_optimal {
                status = SolveStatus::Optimal;
            }
            break;
        };
        let eta = (1.0 - mu.sqrt().min(0.1)).clamp(0.9, 0.99999);
        let alpha = (eta * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += alpha * dx;
        y += alpha * dy;
        s += alpha * ds;
        z += alpha * dz;
        for v in s.iter_mut().chain(z.iter_mut()) {
            *v = v.max(1e-300);
        }
    }

    if status != SolveStatus::Optimal {
        if let Some(f) = fallback {
            (x, y, s, z) = (f.x, f.y, f.s, f.z);
            (infeas, kkt) = (f.infeas, f.kkt);
            status = SolveStatus::Optimal;
        }
    }

    if status == SolveStatus::Optimal && tol.polish {
        if let Some((px, py, pz)) = polish(h, g, a, b, &program.a_in, d, &s, &z) {
            x = px;
            y = py;
            z = pz;
        }
    }

    let objective = program.objective(&x);
    SolveResult {
        status,
        x,
        lambda_eq: y * k,
        lambda_in: z * k,
        objective,
        kkt_residual: kkt,
        primal_infeasibility: infeas,
        iterations,
    }
}

/// Re-solves the KKT system with the inequalities that have `s < z` treated as
/// equalities. Violated rows are added and rows with negative multipliers dropped
/// for a few passes. Returns `None` if no consistent active set is found.
#[allow(clippy::too_many_arguments)]
fn polish(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    s: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let mut active: Vec<bool> = (0..c.nrows()).map(|i| s[i] < z[i]).collect();
    for _ in 0..10 {
        let rows: Vec<usize> = (0..c.nrows()).filter(|&i| active[i]).collect();
        let (x, y, mult) = solve_active(h, g, a, b, c, d, &rows)?;
        let scale = 1.0 + inf_norm(d).max(inf_norm(&x));
        let violated: Vec<usize> = (0..c.nrows())
            .filter(|&i| !active[i] && c.row(i).dot(&x.transpose()) - d[i] > 1e-12 * scale)
            .collect();
        let negative = rows
            .iter()
            .zip(mult.iter())
            .filter(|(_, &m)| m < -1e-12 * (1.0 + mult.amax()))
            .min_by(|p, q| p.1.total_cmp(q.1))
            .map(|(&i, _)| i);
        if violated.is_empty() && negative.is_none() {
            let mut zz = DVector::zeros(c.nrows());
            for (&i, &m) in rows.iter().zip(mult.iter()) {
                zz[i] = m.max(0.0);
            }
            return Some((x, y, zz));
        }
        for i in violated {
            active[i] = true;
        }
        if let Some(i) = negative {
            active[i] = false;
        }
    }
    None
}

/// Equality-constrained solve over the given inequality rows, with a small dual
/// regularization for dependent rows followed by refinement on the exact system.
#[allow(clippy::too_many_arguments)]
fn solve_active(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    rows: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let (n, me) = (h.nrows(), a.nrows());
    let dim = n + me + rows.len();
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    rhs.rows_mut(0, n).copy_from(&(-g));
    for i in 0..me {
        kkt.view_mut((n + i, 0), (1, n)).copy_from(&a.row(i));
        kkt.view_mut((0, n + i), (n, 1)).copy_from(&a.row(i).transpose());
        rhs[n + i] = b[i];
    }
    for (j, &i) in rows.iter().enumerate() {
        let r = n + me + j;
        kkt.view_mut((r, 0), (1, n)).copy_from(&c.row(i));
        kkt.view_mut((0, r), (n, 1)).copy_from(&c.row(i).transpose());
        rhs[r] = d[i];
    }
    let delta = 1e-10 * (1.0 + h.amax());
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..dim {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let corr = lu.solve(&(&rhs - &kkt * &sol))?;
        sol += &corr;
        if inf_norm(&corr) <= 1e-15 * (1.0 + inf_norm(&sol)) {
            break;
        }
    }
    if !sol.iter().all(|v| v.is_finite()) || inf_norm(&(&rhs - &kkt * &sol)) > 1e-9 * (1.0 + inf_norm(&rhs)) {
        return None;
    }
    Some((
        sol.rows(0, n).into_owned(),
        sol.rows(n, me).into_owned(),
        sol.rows(n + me, rows.len()).into_owned(),
    ))
}
