//! Self-contained linear-program solver: two-phase revised simplex over a
//! dense basis inverse, returning both primal and dual optimal solutions.
//!
//! Minimization with nonnegative variables. Dual sign convention: the dual of
//! a `>=` row is `>= 0`, of a `<=` row is `<= 0`, of an `=` row is free.

use thiserror::Error;

/// Absolute feasibility / optimality tolerance.
pub const EPS_ABS: f64 = 1e-9;
/// Relative tolerance used by the post-solve checks.
pub const EPS_REL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("linear program has no variables")]
    NoVariables,
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
    #[error("row {row} references variable {var}, but there are only {nvars}")]
    BadVariable { row: usize, var: usize, nvars: usize },
    #[error("simplex did not converge within {0} iterations")]
    IterationLimit(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Eq,
    Ge,
    Le,
}

#[derive(Debug, Clone)]
pub struct LpRow {
    /// Sparse coefficients (variable index, value).
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min c'x  s.t.  rows, x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<LpRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Variable values; empty unless optimal.
    pub primal: Vec<f64>,
    /// One dual per constraint row; empty unless optimal.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LinearProgram {
    fn validate(&self) -> Result<(), LpError> {
        if self.num_vars == 0 {
            return Err(LpError::NoVariables);
        }
        if self.objective.len() != self.num_vars {
            return Err(LpError::NonFinite("objective length mismatch".into()));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective".into()));
        }
        for (r, row) in self.rows.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(LpError::NonFinite(format!("rhs of row {r}")));
            }
            for &(v, c) in &row.coeffs {
                if v >= self.num_vars {
                    return Err(LpError::BadVariable {
                        row: r,
                        var: v,
                        nvars: self.num_vars,
                    });
                }
                if !c.is_finite() {
                    return Err(LpError::NonFinite(format!("row {r}")));
                }
            }
        }
        Ok(())
    }

    /// Writes the program in CPLEX LP text format for cross-checking against
    /// external solvers.
    pub fn write_lp_format(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "Minimize")?;
        write!(out, " obj:")?;
        for (i, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                write!(out, " {:+} x{}", c, i)?;
            }
        }
        writeln!(out, "\nSubject To")?;
        for (r, row) in self.rows.iter().enumerate() {
            write!(out, " c{}:", r)?;
            for &(v, c) in &row.coeffs {
                write!(out, " {:+} x{}", c, v)?;
            }
            let rel = match row.relation {
                Relation::Eq => "=",
                Relation::Ge => ">=",
                Relation::Le => "<=",
            };
            writeln!(out, " {} {}", rel, row.rhs)?;
        }
        writeln!(out, "Bounds")?;
        for i in 0..self.num_vars {
            writeln!(out, " 0 <= x{}", i)?;
        }
        writeln!(out, "End")
    }
}

/// Tableau-free revised simplex state. One instance solves one program.
struct Simplex {
    m: usize,
    /// Columns of the equality-form constraint matrix, sparse.
    cols: Vec<Vec<(u32, f64)>>,
    b: Vec<f64>,
    /// +1 if the original row kept its sign, -1 if it was negated.
    row_sign: Vec<f64>,
    /// Indices of artificial columns (phase 1 only, barred afterwards).
    first_artificial: usize,
    basis: Vec<usize>,
    x_basis: Vec<f64>,
    /// Dense row-major basis inverse.
    binv: Vec<f64>,
    iterations: usize,
    cap: usize,
    bland: bool,
    degenerate_streak: usize,
}

enum CoreOutcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    fn new(lp: &LinearProgram) -> Simplex {
        let m = lp.rows.len();
        let n = lp.num_vars;
        let mut row_sign = vec![1.0; m];
        let mut b = Vec::with_capacity(m);
        let mut relations = Vec::with_capacity(m);
        for (r, row) in lp.rows.iter().enumerate() {
            let mut rhs = row.rhs;
            let mut rel = row.relation;
            if rhs < 0.0 {
                row_sign[r] = -1.0;
                rhs = -rhs;
                rel = match rel {
                    Relation::Eq => Relation::Eq,
                    Relation::Ge => Relation::Le,
                    Relation::Le => Relation::Ge,
                };
            }
            b.push(rhs);
            relations.push(rel);
        }

        let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (r, row) in lp.rows.iter().enumerate() {
            for &(v, c) in &row.coeffs {
                if c != 0.0 {
                    cols[v].push((r as u32, c * row_sign[r]));
                }
            }
        }
        // Slack / surplus columns, then artificials where the identity is
        // still missing.
        let mut basis = vec![usize::MAX; m];
        for (r, rel) in relations.iter().enumerate() {
            match rel {
                Relation::Le => {
                    cols.push(vec![(r as u32, 1.0)]);
                    basis[r] = cols.len() - 1;
                }
                Relation::Ge => {
                    cols.push(vec![(r as u32, -1.0)]);
                }
                Relation::Eq => {}
            }
        }
        let first_artificial = cols.len();
        for (r, slot) in basis.iter_mut().enumerate() {
            if *slot == usize::MAX {
                cols.push(vec![(r as u32, 1.0)]);
                *slot = cols.len() - 1;
            }
        }

        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let x_basis = b.clone();
        let cap = 200 * (m + cols.len()) + 20_000;
        Simplex {
            m,
            cols,
            b,
            row_sign,
            first_artificial,
            basis,
            x_basis,
            binv,
            iterations: 0,
            cap,
            bland: false,
            degenerate_streak: 0,
        }
    }

    fn dual_row(&self, costs: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (i, &bi) in self.basis.iter().enumerate() {
            let cb = costs.get(bi).copied().unwrap_or(0.0);
            if cb != 0.0 {
                let row = &self.binv[i * m..(i + 1) * m];
                for (yj, &v) in y.iter_mut().zip(row) {
                    *yj += cb * v;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, costs: &[f64], y: &[f64]) -> f64 {
        let c = costs.get(j).copied().unwrap_or(0.0);
        let dot: f64 = self.cols[j].iter().map(|&(r, v)| y[r as usize] * v).sum();
        c - dot
    }

    /// Runs pivots until optimal or unbounded under `costs`. Columns at
    /// index >= `bar_from` never enter.
    fn run(&mut self, costs: &[f64], bar_from: usize) -> Result<CoreOutcome, LpError> {
        let m = self.m;
        let mut in_basis = vec![false; self.cols.len()];
        for &bi in &self.basis {
            in_basis[bi] = true;
        }
        loop {
            self.iterations += 1;
            if self.iterations > self.cap {
                return Err(LpError::IterationLimit(self.cap));
            }
            let y = self.dual_row(costs);
            // Entering column: Dantzig's most negative reduced cost, or the
            // lowest eligible index once Bland's anti-cycling rule kicks in.
            let mut entering = None;
            let mut best = -EPS_ABS;
            for j in 0..bar_from.min(self.cols.len()) {
                if in_basis[j] {
                    continue;
                }
                let d = self.reduced_cost(j, costs, &y);
                if d < best {
                    entering = Some(j);
                    if self.bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(q) = entering else {
                return Ok(CoreOutcome::Optimal);
            };

            // Direction w = B^-1 a_q.
            let mut w = vec![0.0; m];
            for &(r, v) in &self.cols[q] {
                let r = r as usize;
                for i in 0..m {
                    w[i] += self.binv[i * m + r] * v;
                }
            }
            // Ratio test; ties leave the smallest basis index (anti-cycling).
            let mut leave: Option<usize> = None;
            let mut theta = f64::INFINITY;
            for i in 0..m {
                if w[i] > EPS_ABS {
                    let ratio = self.x_basis[i] / w[i];
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            ratio < theta - EPS_ABS
                                || (ratio < theta + EPS_ABS && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        leave = Some(i);
                        theta = ratio;
                    }
                }
            }
            let Some(r) = leave else {
                return Ok(CoreOutcome::Unbounded);
            };
            let theta = theta.max(0.0);
            if theta <= EPS_ABS {
                self.degenerate_streak += 1;
                if self.degenerate_streak > 2 * (m + self.cols.len()) {
                    self.bland = true;
                }
            } else {
                self.degenerate_streak = 0;
            }

            // Pivot: update basic values and the inverse.
            for i in 0..m {
                if i != r {
                    // Clamp roundoff; real infeasibility is caught post-solve.
                    self.x_basis[i] = (self.x_basis[i] - theta * w[i]).max(0.0);
                }
            }
            self.x_basis[r] = theta;
            let piv = w[r];
            let (head, tail) = self.binv.split_at_mut(r * m);
            let (prow, rest) = tail.split_at_mut(m);
            for v in prow.iter_mut() {
                *v /= piv;
            }
            for (i, chunk) in head.chunks_exact_mut(m).enumerate() {
                let f = w[i];
                if f != 0.0 {
                    for (x, &p) in chunk.iter_mut().zip(prow.iter()) {
                        *x -= f * p;
                    }
                }
            }
            for (k, chunk) in rest.chunks_exact_mut(m).enumerate() {
                let f = w[r + 1 + k];
                if f != 0.0 {
                    for (x, &p) in chunk.iter_mut().zip(prow.iter()) {
                        *x -= f * p;
                    }
                }
            }
            in_basis[self.basis[r]] = false;
            in_basis[q] = true;
            self.basis[r] = q;
        }
    }

    /// Pivots zero-level artificial columns out of the basis where possible.
    fn expel_artificials(&mut self) {
        let m = self.m;
        for i in 0..m {
            if self.basis[i] < self.first_artificial || self.x_basis[i] > EPS_ABS {
                continue;
            }
            let row: Vec<f64> = self.binv[i * m..(i + 1) * m].to_vec();
            let candidate = (0..self.first_artificial).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let alpha: f64 = self.cols[j]
                    .iter()
                    .map(|&(r, v)| row[r as usize] * v)
                    .sum();
                alpha.abs() > 1e-7
            });
            let Some(q) = candidate else {
                // Redundant row: the artificial stays basic at level zero.
                continue;
            };
            let mut w = vec![0.0; m];
            for &(r, v) in &self.cols[q] {
                let r = r as usize;
                for k in 0..m {
                    w[k] += self.binv[k * m + r] * v;
                }
            }
            let piv = w[i];
            for k in 0..m {
                if k == i {
                    continue;
                }
                let f = w[k] / piv;
                if f != 0.0 {
                    for c in 0..m {
                        self.binv[k * m + c] -= f * self.binv[i * m + c];
                    }
                    self.x_basis[k] -= f * self.x_basis[i];
                }
            }
            for c in 0..m {
                self.binv[i * m + c] /= piv;
            }
            self.x_basis[i] /= piv;
            self.basis[i] = q;
        }
    }
}

/// Solves the program. At `Optimal` the returned duals satisfy the sign
/// convention and complementary slackness within tolerance; nonconvergence
/// raises an error rather than returning a silent wrong answer.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let m = lp.rows.len();
    let mut s = Simplex::new(lp);

    if m > 0 {
        // Phase 1: minimize the sum of artificials.
        let mut phase1 = vec![0.0; s.cols.len()];
        for c in phase1.iter_mut().skip(s.first_artificial) {
            *c = 1.0;
        }
        match s.run(&phase1, s.cols.len())? {
            CoreOutcome::Unbounded => {
                return Err(LpError::Numerical("phase 1 reported unbounded".into()))
            }
            CoreOutcome::Optimal => {}
        }
        let infeas: f64 = s
            .basis
            .iter()
            .zip(&s.x_basis)
            .filter(|(&bi, _)| bi >= s.first_artificial)
            .map(|(_, &x)| x)
            .sum();
        let scale = 1.0 + s.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if infeas > EPS_ABS.max(EPS_REL * scale) {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                primal: Vec::new(),
                duals: Vec::new(),
                objective: f64::NAN,
                iterations: s.iterations,
            });
        }
        s.expel_artificials();
    }

    // Phase 2 under the true objective; artificials are barred.
    let mut costs = vec![0.0; s.cols.len()];
    costs[..lp.num_vars].copy_from_slice(&lp.objective);
    let outcome = s.run(&costs, s.first_artificial)?;
    if matches!(outcome, CoreOutcome::Unbounded) {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            primal: Vec::new(),
            duals: Vec::new(),
            objective: f64::NEG_INFINITY,
            iterations: s.iterations,
        });
    }

    let mut primal = vec![0.0; lp.num_vars];
    for (i, &bi) in s.basis.iter().enumerate() {
        if bi < lp.num_vars {
            primal[bi] = s.x_basis[i];
        }
    }
    let objective: f64 = primal
        .iter()
        .zip(&lp.objective)
        .map(|(x, c)| x * c)
        .sum();
    let y = s.dual_row(&costs);
    let duals: Vec<f64> = y
        .iter()
        .zip(&s.row_sign)
        .map(|(&yi, &sg)| yi * sg)
        .collect();

    // Honest post-solve checks: residuals and strong duality.
    let mut dual_obj = 0.0;
    for (r, row) in lp.rows.iter().enumerate() {
        let lhs: f64 = row.coeffs.iter().map(|&(v, c)| c * primal[v]).sum();
        let resid = lhs - row.rhs;
        let scale = 1.0 + row.rhs.abs();
        let ok = match row.relation {
            Relation::Eq => resid.abs() <= EPS_ABS.max(EPS_REL * scale) * 100.0,
            Relation::Ge => resid >= -EPS_ABS.max(EPS_REL * scale) * 100.0,
            Relation::Le => resid <= EPS_ABS.max(EPS_REL * scale) * 100.0,
        };
        if !ok {
            return Err(LpError::Numerical(format!(
                "row {r} residual {resid:.3e} out of tolerance"
            )));
        }
        dual_obj += duals[r] * row.rhs;
    }
    let gap = (objective - dual_obj).abs();
    if gap > EPS_ABS.max(EPS_REL * (1.0 + objective.abs())) * 100.0 {
        return Err(LpError::Numerical(format!(
            "duality gap {gap:.3e} out of tolerance"
        )));
    }

    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal,
        duals,
        objective,
        iterations: s.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(num_vars: usize, objective: Vec<f64>, rows: Vec<LpRow>) -> LinearProgram {
        LinearProgram {
            num_vars,
            objective,
            rows,
        }
    }

    fn row(coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> LpRow {
        LpRow {
            coeffs,
            relation,
            rhs,
        }
    }

    #[test]
    fn one_variable_bound() {
        let p = lp(1, vec![1.0], vec![row(vec![(0, 1.0)], Relation::Ge, 3.0)]);
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.primal[0] - 3.0).abs() < 1e-9);
        assert!((s.duals[0] - 1.0).abs() < 1e-9);
        assert!((s.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_objective() {
        let p = lp(1, vec![0.0], vec![row(vec![(0, 1.0)], Relation::Eq, 5.0)]);
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.primal[0] - 5.0).abs() < 1e-9);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let p = lp(
            1,
            vec![1.0],
            vec![
                row(vec![(0, 1.0)], Relation::Le, 1.0),
                row(vec![(0, 1.0)], Relation::Ge, 2.0),
            ],
        );
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Infeasible);
        let p = lp(1, vec![-1.0], vec![row(vec![(0, 1.0)], Relation::Ge, 0.0)]);
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Unbounded);
    }

    /// 2x2 transportation problem against an exhaustive vertex enumeration.
    /// With row sums (s1, s2) and column sums (d1, d2) the polytope is the
    /// segment x11 in [max(0, s1 - d2), min(s1, d1)]; its two endpoints are
    /// the basic feasible solutions.
    #[test]
    fn transportation_matches_vertex_enumeration() {
        let (s1, s2, d1, d2) = (7.0, 5.0, 4.0, 8.0);
        let cost = [3.0, 1.0, 4.0, 2.0]; // c11 c12 c21 c22
        let obj_at = |x11: f64| {
            let x12 = s1 - x11;
            let x21 = d1 - x11;
            let x22 = d2 - x12;
            cost[0] * x11 + cost[1] * x12 + cost[2] * x21 + cost[3] * x22
        };
        let lo = (s1 - d2).max(0.0);
        let hi = s1.min(d1);
        let best = obj_at(lo).min(obj_at(hi));

        let p = lp(
            4,
            cost.to_vec(),
            vec![
                row(vec![(0, 1.0), (1, 1.0)], Relation::Eq, s1),
                row(vec![(2, 1.0), (3, 1.0)], Relation::Eq, s2),
                row(vec![(0, 1.0), (2, 1.0)], Relation::Eq, d1),
                row(vec![(1, 1.0), (3, 1.0)], Relation::Eq, d2),
            ],
        );
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - best).abs() < 1e-9, "{} vs {}", s.objective, best);
    }

    #[test]
    fn dual_signs_follow_convention() {
        // min x + y  s.t.  x + y >= 2 (dual >= 0),  x <= 5 (dual <= 0), y = 1.
        let p = lp(
            2,
            vec![1.0, 1.0],
            vec![
                row(vec![(0, 1.0), (1, 1.0)], Relation::Ge, 2.0),
                row(vec![(0, 1.0)], Relation::Le, 5.0),
                row(vec![(1, 1.0)], Relation::Eq, 1.0),
            ],
        );
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(s.duals[0] >= -1e-9);
        assert!(s.duals[1] <= 1e-9);
        assert!((s.objective - 2.0).abs() < 1e-9);
    }

    #[test]
    fn negative_rhs_rows_are_normalized() {
        // x >= 3 written as -x <= -3.
        let p = lp(1, vec![1.0], vec![row(vec![(0, -1.0)], Relation::Le, -3.0)]);
        let s = solve_lp(&p).unwrap();
        assert!((s.primal[0] - 3.0).abs() < 1e-9);
        // Dual of the <= row must be <= 0.
        assert!(s.duals[0] <= 1e-9);
        assert!((s.duals[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn complementary_slackness_and_resolve_stability() {
        let p = lp(
            3,
            vec![2.0, 3.0, 1.0],
            vec![
                row(vec![(0, 1.0), (1, 2.0), (2, 1.0)], Relation::Ge, 4.0),
                row(vec![(0, 1.0), (1, 1.0)], Relation::Ge, 1.0),
                row(vec![(0, 1.0), (1, 1.0), (2, 1.0)], Relation::Le, 10.0),
            ],
        );
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        for (r, rowdef) in p.rows.iter().enumerate() {
            let lhs: f64 = rowdef.coeffs.iter().map(|&(v, c)| c * s.primal[v]).sum();
            let slack = lhs - rowdef.rhs;
            assert!(
                (slack * s.duals[r]).abs() <= 1e-7,
                "row {r}: slack {slack} dual {}",
                s.duals[r]
            );
        }
        // Perturb-and-restore returns the same objective.
        let mut q = p.clone();
        q.rows[0].rhs = 5.0;
        let _ = solve_lp(&q).unwrap();
        q.rows[0].rhs = 4.0;
        let s2 = solve_lp(&q).unwrap();
        assert!((s2.objective - s.objective).abs() <= 1e-7 * (1.0 + s.objective.abs()));
    }

    #[test]
    fn lp_format_dump_contains_rows() {
        let p = lp(2, vec![1.0, 0.5], vec![row(vec![(0, 1.0), (1, -1.0)], Relation::Ge, 1.0)]);
        let mut buf = Vec::new();
        p.write_lp_format(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("Minimize"));
        assert!(text.contains("c0:"));
        assert!(text.contains(">= 1"));
    }
}
