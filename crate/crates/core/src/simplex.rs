//! Dense two-phase simplex for small standard-form programs
//! `min c'x  s.t.  A x = b, x >= 0` with `b >= 0`.
//!
//! Bland's rule everywhere (smallest eligible column; ratio ties resolved by
//! the smallest basic variable index), which makes the solve deterministic
//! and cycle-free. Problem sizes here are tiny, so no factorization is kept.
//!
//! `solve_lex` optimizes a sequence of objectives: each level runs on the
//! optimal face of the previous ones by restricting entering columns to
//! those with (numerically) zero reduced cost at every completed level.

use crate::error::{Error, Result};

const EPS: f64 = 1e-9;
const PIVOT_EPS: f64 = 1e-11;
const MAX_ITERS: usize = 200_000;

pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
}

struct Tableau {
    rows: usize,
    n_total: usize,
    /// rows x (n_total + 1); last column is the rhs.
    t: Vec<Vec<f64>>,
    /// Maintained reduced-cost rows, one per objective level so far; each has
    /// length n_total + 1 with -objective in the last slot.
    costs: Vec<Vec<f64>>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let inv = 1.0 / self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v *= inv;
        }
        for r in 0..self.rows {
            if r != row {
                let factor = self.t[r][col];
                if factor != 0.0 {
                    for j in 0..=self.n_total {
                        self.t[r][j] -= factor * self.t[row][j];
                    }
                }
            }
        }
        for cost in &mut self.costs {
            let factor = cost[col];
            if factor != 0.0 {
                for j in 0..=self.n_total {
                    cost[j] -= factor * self.t[row][j];
                }
            }
        }
        self.basis[row] = col;
    }

    /// Append a fresh cost row for `c` (real variables only), eliminating the
    /// current basic columns.
    fn push_cost(&mut self, c: &[f64]) {
        let mut cost = vec![0.0; self.n_total + 1];
        cost[..c.len()].copy_from_slice(c);
        for (r, &bvar) in self.basis.iter().enumerate() {
            let cb = if bvar < c.len() { c[bvar] } else { 0.0 };
            if cb != 0.0 {
                for j in 0..=self.n_total {
                    cost[j] -= cb * self.t[r][j];
                }
            }
        }
        self.costs.push(cost);
    }

    /// Optimize the last cost row; columns >= `col_limit` never enter, and
    /// neither do columns that would leave the optimal face of the earlier
    /// levels (nonzero reduced cost there).
    fn iterate(&mut self, col_limit: usize) -> Result<()> {
        let level = self.costs.len() - 1;
        for _ in 0..MAX_ITERS {
            // Bland: smallest improving column among the allowed ones.
            let mut entering = None;
            'cols: for j in 0..col_limit {
                if self.costs[level][j] < -EPS {
                    for earlier in &self.costs[..level] {
                        if earlier[j].abs() > EPS {
                            continue 'cols;
                        }
                    }
                    entering = Some(j);
                    break;
                }
            }
            let col = match entering {
                Some(c) => c,
                None => return Ok(()),
            };
            // Ratio test; ties resolved by smallest basic variable index.
            let mut best: Option<(f64, usize, usize)> = None; // (ratio, basis var, row)
            for r in 0..self.rows {
                let a = self.t[r][col];
                if a > PIVOT_EPS {
                    let ratio = self.t[r][self.n_total] / a;
                    let key = (ratio, self.basis[r]);
                    match best {
                        Some((br, bv, _)) if (br, bv) <= key => {}
                        _ => best = Some((ratio, self.basis[r], r)),
                    }
                }
            }
            let row = match best {
                Some((_, _, r)) => r,
                None => return Err(Error::Solver("unbounded objective".into())),
            };
            self.pivot(row, col);
        }
        Err(Error::Solver("iteration limit exceeded".into()))
    }

    fn solution(&self, n_real: usize) -> Vec<f64> {
        let mut x = vec![0.0; n_real];
        for (r, &b) in self.basis.iter().enumerate() {
            if b < n_real {
                x[b] = self.t[r][self.n_total];
            }
        }
        x
    }
}

/// Solve the lexicographic sequence: optimize `objectives[0]`, then each
/// later objective over the tied optima of the earlier ones. Returns the
/// final vertex and the first objective's value.
pub fn solve_lex(a: &[Vec<f64>], b: &[f64], objectives: &[Vec<f64>]) -> Result<Solution> {
    let rows = a.len();
    assert!(!objectives.is_empty());
    let n_real = objectives[0].len();
    assert_eq!(b.len(), rows);
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), n_real, "row {i} width");
        assert!(b[i] >= 0.0, "rhs must be non-negative");
    }

    // Phase 1: artificials form the starting basis.
    let n_total = n_real + rows;
    let mut t = Vec::with_capacity(rows);
    for (i, row) in a.iter().enumerate() {
        let mut r = vec![0.0; n_total + 1];
        r[..n_real].copy_from_slice(row);
        r[n_real + i] = 1.0;
        r[n_total] = b[i];
        t.push(r);
    }
    // Phase-1 reduced costs: minimize the artificial sum; with the identity
    // basis this is the negated column sum for real columns, zero elsewhere.
    let mut cost = vec![0.0; n_total + 1];
    for j in 0..=n_total {
        let mut s = 0.0;
        for row in &t {
            s += row[j];
        }
        cost[j] = if (n_real..n_total).contains(&j) { 0.0 } else { -s };
    }

    let mut tab = Tableau {
        rows,
        n_total,
        t,
        costs: vec![cost],
        basis: (n_real..n_total).collect(),
    };
    tab.iterate(n_total)?;
    let phase1_obj = -tab.costs[0][n_total];
    let scale = b.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    if phase1_obj > 1e-7 * scale {
        return Err(Error::Solver(format!(
            "infeasible (phase-1 residual {phase1_obj:.3e})"
        )));
    }

    // Drive leftover artificials out of the basis where possible. A fully
    // zero row is redundant; its artificial stays basic at level ~0 and can
    // never re-enter.
    for r in 0..tab.rows {
        if tab.basis[r] >= n_real {
            if let Some(col) = (0..n_real).find(|&j| tab.t[r][j].abs() > PIVOT_EPS) {
                tab.pivot(r, col);
            }
        }
    }
    // The phase-1 cost row has served its purpose.
    tab.costs.clear();

    for c in objectives {
        assert_eq!(c.len(), n_real);
        tab.push_cost(c);
        tab.iterate(n_real)?;
    }

    let x = tab.solution(n_real);
    let objective = x
        .iter()
        .zip(&objectives[0])
        .map(|(xi, ci)| xi * ci)
        .sum();
    Ok(Solution { x, objective })
}

/// Single-objective convenience wrapper.
pub fn solve(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<Solution> {
    solve_lex(a, b, std::slice::from_ref(&c.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solves_textbook_problem() {
        // min -3x - 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18 (slacks appended).
        let a = vec![
            vec![1.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 1.0, 0.0],
            vec![3.0, 2.0, 0.0, 0.0, 1.0],
        ];
        let b = vec![4.0, 12.0, 18.0];
        let c = vec![-3.0, -5.0, 0.0, 0.0, 0.0];
        let sol = solve(&a, &b, &c).unwrap();
        assert_abs_diff_eq!(sol.objective, -36.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 6.0, epsilon = 1e-9);
    }

    #[test]
    fn reports_infeasible() {
        // x = 2 and x = 3 simultaneously.
        let a = vec![vec![1.0], vec![1.0]];
        let b = vec![2.0, 3.0];
        let c = vec![1.0];
        assert!(matches!(solve(&a, &b, &c), Err(Error::Solver(_))));
    }

    #[test]
    fn reports_unbounded() {
        // min -x s.t. x - y = 1, x,y >= 0: x can grow without bound.
        let a = vec![vec![1.0, -1.0]];
        let b = vec![1.0];
        let c = vec![-1.0, 0.0];
        assert!(matches!(solve(&a, &b, &c), Err(Error::Solver(_))));
    }

    #[test]
    fn degenerate_problems_terminate() {
        // Redundant rows force degenerate pivots.
        let a = vec![
            vec![1.0, 1.0, 1.0, 0.0],
            vec![2.0, 2.0, 2.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
        ];
        let b = vec![4.0, 8.0, 2.0];
        let c = vec![-1.0, -2.0, 0.0, 0.0];
        let sol = solve(&a, &b, &c).unwrap();
        assert_abs_diff_eq!(sol.objective, -8.0, epsilon = 1e-8);
    }

    #[test]
    fn lexicographic_refinement_stays_on_optimal_face() {
        // min 0 (everything optimal) with x + y + z = 6, x,y,z <= 4;
        // then minimize x, then y: forces x = 0, y = 2, z = 4.
        let a = vec![
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        ];
        let b = vec![6.0, 4.0, 4.0, 4.0];
        let zero = vec![0.0; 6];
        let min_x = {
            let mut c = vec![0.0; 6];
            c[0] = 1.0;
            c
        };
        let min_y = {
            let mut c = vec![0.0; 6];
            c[1] = 1.0;
            c
        };
        let sol = solve_lex(&a, &b, &[zero, min_x, min_y]).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[2], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn lexicographic_preserves_primary_objective() {
        // min x + y with x + y >= 2 (via x + y - s = 2), both bounded by 5.
        let a = vec![
            vec![1.0, 1.0, -1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 1.0],
        ];
        let b = vec![2.0, 5.0, 5.0];
        let primary = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        let min_x = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let sol = solve_lex(&a, &b, &[primary, min_x]).unwrap();
        assert_abs_diff_eq!(sol.objective, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 2.0, epsilon = 1e-12);
    }
}
