//! Dense two-phase simplex over exact rationals.
//!
//! Pivoting follows Bland's rule (lowest eligible index for both the
//! entering and the leaving variable), so the method terminates on
//! degenerate problems. Intended for problems with at most a few hundred
//! variables.

use num_traits::{Signed, Zero};
use thiserror::Error;

use crate::rational::Rational;

type Row = (Vec<(usize, Rational)>, Relation, Rational);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub terms: Vec<(usize, Rational)>,
    pub relation: Relation,
    pub rhs: Rational,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("variable {0} does not exist")]
    UnknownVariable(usize),
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub objective: Rational,
    pub values: Vec<Rational>,
}

/// Variables are non-negative unless declared free.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    free: Vec<bool>,
    sense: Sense,
    objective: Vec<(usize, Rational)>,
    constraints: Vec<Constraint>,
}

impl Default for LinearProgram {
    fn default() -> Self {
        Self::new()
    }
}

impl LinearProgram {
    pub fn new() -> Self {
        LinearProgram {
            free: Vec::new(),
            sense: Sense::Minimize,
            objective: Vec::new(),
            constraints: Vec::new(),
        }
    }

    pub fn add_var(&mut self) -> usize {
        self.free.push(false);
        self.free.len() - 1
    }

    pub fn add_free_var(&mut self) -> usize {
        self.free.push(true);
        self.free.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.free.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn set_objective(&mut self, sense: Sense, terms: Vec<(usize, Rational)>) {
        self.sense = sense;
        self.objective = terms;
    }

    pub fn add_constraint(&mut self, terms: Vec<(usize, Rational)>, relation: Relation, rhs: Rational) {
        self.constraints.push(Constraint {
            terms,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        let n = self.free.len();
        let check = |terms: &[(usize, Rational)]| {
            terms
                .iter()
                .find(|(v, _)| *v >= n)
                .map_or(Ok(()), |(v, _)| Err(LpError::UnknownVariable(*v)))
        };
        check(&self.objective)?;
        for c in &self.constraints {
            check(&c.terms)?;
        }

        // Column layout: structural columns (free vars split in two), then
        // slack/surplus, then artificials.
        let mut col_of = Vec::with_capacity(n);
        let mut n_struct = 0;
        for &is_free in &self.free {
            col_of.push(n_struct);
            n_struct += if is_free { 2 } else { 1 };
        }
        let m = self.constraints.len();
        let mut rows: Vec<Row> = Vec::with_capacity(m);
        for c in &self.constraints {
            let mut terms = Vec::with_capacity(c.terms.len() * 2);
            for (v, a) in &c.terms {
                if a.is_zero() {
                    continue;
                }
                terms.push((col_of[*v], a.clone()));
                if self.free[*v] {
                    terms.push((col_of[*v] + 1, -a.clone()));
                }
            }
            let (terms, relation, rhs) = if c.rhs.is_negative() {
                let flipped = match c.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                (
                    terms.into_iter().map(|(j, a)| (j, -a)).collect(),
                    flipped,
                    -c.rhs.clone(),
                )
            } else {
                (terms, c.relation, c.rhs.clone())
            };
            rows.push((terms, relation, rhs));
        }
        let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
        let width = n_struct + n_slack + n_art;
        let art_start = n_struct + n_slack;

        let mut tab = Tableau {
            a: Vec::with_capacity(m),
            basis: Vec::with_capacity(m),
            cost: vec![Rational::zero(); width + 1],
            allowed: vec![true; width],
        };
        let mut next_slack = n_struct;
        let mut next_art = art_start;
        for (terms, relation, rhs) in rows {
            let mut row = vec![Rational::zero(); width + 1];
            for (j, a) in terms {
                row[j] += a;
            }
            row[width] = rhs;
            match relation {
                Relation::Le => {
                    row[next_slack] = Rational::from_integer(1.into());
                    tab.basis.push(next_slack);
                    next_slack += 1;
                }
                Relation::Ge => {
                    row[next_slack] = Rational::from_integer((-1).into());
                    next_slack += 1;
                    row[next_art] = Rational::from_integer(1.into());
                    tab.basis.push(next_art);
                    next_art += 1;
                }
                Relation::Eq => {
                    row[next_art] = Rational::from_integer(1.into());
                    tab.basis.push(next_art);
                    next_art += 1;
                }
            }
            tab.a.push(row);
        }

        // Phase 1: minimize the sum of artificials.
        if n_art > 0 {
            let mut c1 = vec![Rational::zero(); width];
            for c in c1.iter_mut().skip(art_start) {
                *c = Rational::from_integer(1.into());
            }
            tab.load_costs(&c1);
            tab.optimize()?;
            let infeasibility: Rational = tab
                .basis
                .iter()
                .zip(&tab.a)
                .filter(|(b, _)| **b >= art_start)
                .map(|(_, row)| row[width].clone())
                .sum();
            if infeasibility.is_positive() {
                return Err(LpError::Infeasible);
            }
            tab.drive_out_artificials(art_start);
            for allowed in tab.allowed.iter_mut().skip(art_start) {
                *allowed = false;
            }
        }

        // Phase 2.
        let mut c2 = vec![Rational::zero(); width];
        for (v, a) in &self.objective {
            let a = match self.sense {
                Sense::Minimize => a.clone(),
                Sense::Maximize => -a.clone(),
            };
            c2[col_of[*v]] += &a;
            if self.free[*v] {
                c2[col_of[*v] + 1] -= &a;
            }
        }
        tab.load_costs(&c2);
        tab.optimize()?;

        let mut col_values = vec![Rational::zero(); width];
        for (row, &b) in tab.a.iter().zip(&tab.basis) {
            col_values[b] = row[width].clone();
        }
        let values: Vec<Rational> = (0..n)
            .map(|v| {
                let pos = &col_values[col_of[v]];
                if self.free[v] {
                    pos - &col_values[col_of[v] + 1]
                } else {
                    pos.clone()
                }
            })
            .collect();
        let objective = self
            .objective
            .iter()
            .map(|(v, a)| a * &values[*v])
            .sum();
        Ok(LpSolution { objective, values })
    }
}

struct Tableau {
    a: Vec<Vec<Rational>>,
    basis: Vec<usize>,
    /// Reduced costs; the last entry is minus the current objective value.
    cost: Vec<Rational>,
    allowed: Vec<bool>,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cost.len() - 1
    }

    fn load_costs(&mut self, c: &[Rational]) {
        self.cost = c.iter().cloned().chain(std::iter::once(Rational::zero())).collect();
        for (row, &b) in self.a.iter().zip(&self.basis) {
            let cb = c[b].clone();
            if cb.is_zero() {
                continue;
            }
            for (cost, a) in self.cost.iter_mut().zip(row) {
                if !a.is_zero() {
                    *cost -= &cb * a;
                }
            }
        }
    }

    fn optimize(&mut self) -> Result<(), LpError> {
        let w = self.width();
        loop {
            let entering = (0..w).find(|&j| self.allowed[j] && self.cost[j].is_negative());
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, Rational)> = None;
            for (i, row) in self.a.iter().enumerate() {
                if !row[col].is_positive() {
                    continue;
                }
                let ratio = &row[w] / &row[col];
                let better = match &leave {
                    None => true,
                    Some((li, best)) => {
                        ratio < *best || (ratio == *best && self.basis[i] < self.basis[*li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
            let Some((row, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            self.pivot(row, col);
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width();
        let p = self.a[r][c].clone();
        for x in self.a[r].iter_mut() {
            if !x.is_zero() {
                *x /= &p;
            }
        }
        let nz: Vec<usize> = (0..=w).filter(|&j| !self.a[r][j].is_zero()).collect();
        let pivot_row = self.a[r].clone();
        for (i, row) in self.a.iter_mut().enumerate() {
            if i == r || row[c].is_zero() {
                continue;
            }
            let f = row[c].clone();
            for &j in &nz {
                row[j] -= &f * &pivot_row[j];
            }
        }
        if !self.cost[c].is_zero() {
            let f = self.cost[c].clone();
            for &j in &nz {
                self.cost[j] -= &f * &pivot_row[j];
            }
        }
        self.basis[r] = c;
    }

    /// After a feasible phase 1 every basic artificial sits at zero. Pivot
    /// each one out on any structural or slack column; rows with no such
    /// column are redundant and dropped.
    fn drive_out_artificials(&mut self, art_start: usize) {
        let mut i = 0;
        while i < self.a.len() {
            if self.basis[i] < art_start {
                i += 1;
                continue;
            }
            match (0..art_start).find(|&j| !self.a[i][j].is_zero()) {
                Some(j) => {
                    self.pivot(i, j);
                    i += 1;
                }
                None => {
                    self.a.remove(i);
                    self.basis.remove(i);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{from_int, ratio};

    fn r(x: i64) -> Rational {
        from_int(x)
    }

    #[test]
    fn textbook_maximization() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36
        let mut lp = LinearProgram::new();
        let x = lp.add_var();
        let y = lp.add_var();
        lp.set_objective(Sense::Maximize, vec![(x, r(3)), (y, r(5))]);
        lp.add_constraint(vec![(x, r(1))], Relation::Le, r(4));
        lp.add_constraint(vec![(y, r(2))], Relation::Le, r(12));
        lp.add_constraint(vec![(x, r(3)), (y, r(2))], Relation::Le, r(18));
        let s = lp.solve().unwrap();
        assert_eq!(s.objective, r(36));
        assert_eq!(s.values, vec![r(2), r(6)]);
    }

    #[test]
    fn minimax_with_free_variable() {
        // min t s.t. 3p - 1 <= t, 2(3(1-p) - 1) <= t, 0 <= p <= 1 -> t = 2/3
        let mut lp = LinearProgram::new();
        let p = lp.add_var();
        let t = lp.add_free_var();
        lp.set_objective(Sense::Minimize, vec![(t, r(1))]);
        lp.add_constraint(vec![(p, r(3)), (t, r(-1))], Relation::Le, r(1));
        lp.add_constraint(vec![(p, r(-6)), (t, r(-1))], Relation::Le, r(-4));
        lp.add_constraint(vec![(p, r(1))], Relation::Le, r(1));
        let s = lp.solve().unwrap();
        assert_eq!(s.objective, ratio(2, 3));
        assert_eq!(s.values[p], ratio(5, 9));
    }

    #[test]
    fn negative_optimum_of_free_variable() {
        let mut lp = LinearProgram::new();
        let t = lp.add_free_var();
        lp.set_objective(Sense::Minimize, vec![(t, r(1))]);
        lp.add_constraint(vec![(t, r(1))], Relation::Ge, ratio(-7, 3));
        assert_eq!(lp.solve().unwrap().objective, ratio(-7, 3));
    }

    #[test]
    fn equality_and_ge_rows() {
        // min x + y s.t. x + y = 2, x >= 1/2, y >= 1/3
        let mut lp = LinearProgram::new();
        let x = lp.add_var();
        let y = lp.add_var();
        lp.set_objective(Sense::Minimize, vec![(x, r(1)), (y, r(2))]);
        lp.add_constraint(vec![(x, r(1)), (y, r(1))], Relation::Eq, r(2));
        lp.add_constraint(vec![(x, r(1))], Relation::Ge, ratio(1, 2));
        lp.add_constraint(vec![(y, r(1))], Relation::Ge, ratio(1, 3));
        let s = lp.solve().unwrap();
        assert_eq!(s.values, vec![ratio(5, 3), ratio(1, 3)]);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var();
        let y = lp.add_var();
        lp.set_objective(Sense::Maximize, vec![(x, r(1))]);
        lp.add_constraint(vec![(x, r(1)), (y, r(1))], Relation::Eq, r(1));
        lp.add_constraint(vec![(x, r(2)), (y, r(2))], Relation::Eq, r(2));
        assert_eq!(lp.solve().unwrap().objective, r(1));
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var();
        lp.add_constraint(vec![(x, r(1))], Relation::Le, r(1));
        lp.add_constraint(vec![(x, r(1))], Relation::Ge, r(2));
        assert_eq!(lp.solve().unwrap_err(), LpError::Infeasible);

        let mut lp = LinearProgram::new();
        let x = lp.add_var();
        lp.set_objective(Sense::Maximize, vec![(x, r(1))]);
        lp.add_constraint(vec![(x, r(1))], Relation::Ge, r(2));
        assert_eq!(lp.solve().unwrap_err(), LpError::Unbounded);
    }

    #[test]
    fn degenerate_cycling_example_terminates() {
        // Beale's example cycles under the textbook rule; Bland's rule terminates.
        let mut lp = LinearProgram::new();
        let v: Vec<usize> = (0..4).map(|_| lp.add_var()).collect();
        lp.set_objective(
            Sense::Minimize,
            vec![(v[0], ratio(-3, 4)), (v[1], r(150)), (v[2], ratio(-1, 50)), (v[3], r(6))],
        );
        lp.add_constraint(
            vec![(v[0], ratio(1, 4)), (v[1], r(-60)), (v[2], ratio(-1, 25)), (v[3], r(9))],
            Relation::Le,
            r(0),
        );
        lp.add_constraint(
            vec![(v[0], ratio(1, 2)), (v[1], r(-90)), (v[2], ratio(-1, 50)), (v[3], r(3))],
            Relation::Le,
            r(0),
        );
        lp.add_constraint(vec![(v[2], r(1))], Relation::Le, r(1));
        assert_eq!(lp.solve().unwrap().objective, ratio(-1, 20));
    }

    #[test]
    fn unknown_variable_is_rejected() {
        let mut lp = LinearProgram::new();
        lp.add_constraint(vec![(3, r(1))], Relation::Le, r(1));
        assert_eq!(lp.solve().unwrap_err(), LpError::UnknownVariable(3));
    }
}
