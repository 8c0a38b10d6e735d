//! Affine conic programs in the form `min 1/2 x'Px + q'x + k` subject to
//! affine expressions lying in zero, nonnegative, second-order or PSD cones,
//! solved with Clarabel.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn term(mut self, i: usize, coeff: f64) -> Self {
        if coeff != 0.0 {
            self.terms.push((i, coeff));
        }
        self
    }

    pub fn plus(mut self, other: &LinExpr, scale: f64) -> Self {
        self.terms.extend(other.terms.iter().map(|(i, c)| (*i, c * scale)));
        self.constant += other.constant * scale;
        self
    }

    pub fn offset(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }
}

/// `M * exprs` for a dense matrix `M`.
pub fn mat_times(m: &DMatrix<f64>, exprs: &[LinExpr]) -> Vec<LinExpr> {
    assert_eq!(m.ncols(), exprs.len());
    (0..m.nrows())
        .map(|r| {
            exprs
                .iter()
                .enumerate()
                .filter(|(c, _)| m[(r, *c)] != 0.0)
                .fold(LinExpr::default(), |acc, (c, e)| acc.plus(e, m[(r, c)]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cone {
    Zero,
    Nonneg,
    /// First row bounds the Euclidean norm of the rest.
    Soc,
    /// Rows hold the scaled upper triangle (column-major) of a symmetric matrix of this order.
    Psd(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBlock {
    pub cone: Cone,
    pub rows: Vec<LinExpr>,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub n_vars: usize,
    pub linear: Vec<f64>,
    /// Upper-triangle entries of `P`.
    #[serde(with = "triplets")]
    pub quadratic: BTreeMap<(usize, usize), f64>,
    pub objective_constant: f64,
    pub blocks: Vec<ConeBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    SolverError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    /// Gap/feasibility tolerance of the attempt that produced this result.
    pub tolerance: f64,
    pub detail: String,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `n` variables and returns the index of the first.
    pub fn add_vars(&mut self, n: usize) -> usize {
        let start = self.n_vars;
        self.n_vars += n;
        self.linear.resize(self.n_vars, 0.0);
        start
    }

    pub fn add_linear(&mut self, i: usize, c: f64) {
        self.linear[i] += c;
    }

    /// Adds `e' W e` to the objective for an affine vector `e` and symmetric `W`.
    pub fn add_weighted_square(&mut self, e: &[LinExpr], w: &DMatrix<f64>) {
        assert_eq!(w.nrows(), e.len());
        let we = mat_times(w, e);
        for (r, er) in e.iter().enumerate() {
            let wr = &we[r];
            // e' W e = sum_r e_r (W e)_r; the product of two affine terms.
            for (i, a) in &er.terms {
                for (j, b) in &wr.terms {
                    // full-matrix entry of P gets 2ab split symmetrically
                    let key = (*i.min(j), *i.max(j));
                    let add = if i == j { 2.0 * a * b } else { a * b };
                    *self.quadratic.entry(key).or_insert(0.0) += add;
                }
                self.linear[*i] += a * wr.constant;
            }
            for (j, b) in &wr.terms {
                self.linear[*j] += er.constant * b;
            }
            self.objective_constant += er.constant * wr.constant;
        }
    }

    pub fn add_block(&mut self, cone: Cone, rows: Vec<LinExpr>, label: impl Into<String>) {
        if let Cone::Psd(n) = cone {
            assert_eq!(rows.len(), n * (n + 1) / 2, "psd block size");
        }
        if !rows.is_empty() {
            self.blocks.push(ConeBlock { cone, rows, label: label.into() });
        }
    }

    pub fn add_eq(&mut self, lhs: LinExpr, label: &str) {
        self.add_block(Cone::Zero, vec![lhs], label);
    }

    /// `expr >= 0`.
    pub fn add_nonneg(&mut self, expr: LinExpr, label: &str) {
        self.add_block(Cone::Nonneg, vec![expr], label);
    }

    /// `|v| <= t`.
    pub fn add_soc(&mut self, t: LinExpr, v: Vec<LinExpr>, label: &str) {
        let mut rows = vec![t];
        rows.extend(v);
        self.add_block(Cone::Soc, rows, label);
    }

    /// Symmetric matrix of affine expressions (upper triangle read) is PSD.
    pub fn add_psd(&mut self, m: &[Vec<LinExpr>], label: &str) {
        let n = m.len();
        let mut rows = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for i in 0..=j {
                let e = m[i][j].clone();
                rows.push(if i == j { e } else { LinExpr::default().plus(&e, std::f64::consts::SQRT_2) });
            }
        }
        self.add_block(Cone::Psd(n), rows, label);
    }

    pub fn has_psd(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.cone, Cone::Psd(_)))
    }

    pub fn quadratic_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n_vars, self.n_vars);
        for (&(i, j), &v) in &self.quadratic {
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
        p
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(c, v)| c * v).sum();
        let quad: f64 = self
            .quadratic
            .iter()
            .map(|(&(i, j), v)| if i == j { 0.5 * v * x[i] * x[i] } else { v * x[i] * x[j] })
            .sum();
        quad + lin + self.objective_constant
    }

    /// Structural check: convex quadratic objective, and PSD cones only when allowed.
    pub fn assert_convex(&self, allow_psd: bool) -> Result<()> {
        if !allow_psd && self.has_psd() {
            return Err(Error::InvalidArgument("semidefinite block in a second-order cone program".into()));
        }
        for b in &self.blocks {
            for r in &b.rows {
                if r.terms.iter().any(|(i, c)| *i >= self.n_vars || !c.is_finite()) || !r.constant.is_finite() {
                    return Err(Error::InvalidArgument(format!("malformed row in block {}", b.label)));
                }
            }
        }
        if !self.quadratic.is_empty() {
            let p = self.quadratic_matrix();
            let scale = p.amax().max(1.0);
            let min = p.symmetric_eigenvalues().min();
            if min < -1e-9 * scale {
                return Err(Error::InvalidArgument(format!("objective not convex: eigenvalue {min:e}")));
            }
        }
        Ok(())
    }

    /// Largest cone violation of `x` over all blocks.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.blocks.iter().map(|b| block_violation(b, x)).fold(0.0, f64::max)
    }

    fn clarabel_data(&self) -> Result<(CscMatrix<f64>, CscMatrix<f64>, Vec<f64>, Vec<SupportedConeT<f64>>)> {
        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for (&(i, j), &v) in &self.quadratic {
            pi.push(i);
            pj.push(j);
            pv.push(v);
        }
        let p = CscMatrix::new_from_triplets(self.n_vars, self.n_vars, pi, pj, pv);
        let (mut ai, mut aj, mut av, mut b, mut cones) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for block in &self.blocks {
            for row in &block.rows {
                let r = b.len();
                for (i, c) in &row.terms {
                    ai.push(r);
                    aj.push(*i);
                    av.push(-c);
                }
                b.push(row.constant);
            }
            let n = block.rows.len();
            cones.push(match block.cone {
                Cone::Zero => SupportedConeT::ZeroConeT(n),
                Cone::Nonneg => SupportedConeT::NonnegativeConeT(n),
                Cone::Soc => SupportedConeT::SecondOrderConeT(n),
                #[cfg(feature = "sdp")]
                Cone::Psd(d) => SupportedConeT::PSDTriangleConeT(d),
                #[cfg(not(feature = "sdp"))]
                Cone::Psd(_) => return Err(Error::Solver("built without semidefinite support".into())),
            });
        }
        let a = CscMatrix::new_from_triplets(b.len(), self.n_vars, ai, aj, av);
        Ok((p, a, b, cones))
    }

    pub fn solve_at(&self, tol: f64, max_iter: u32) -> Result<Solution> {
        let (p, a, b, cones) = self.clarabel_data()?;
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .max_iter(max_iter)
            .build()
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &self.linear, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => Status::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Status::Infeasible,
            _ => Status::SolverError,
        };
        let objective = if status == Status::Optimal { self.objective(&sol.x) } else { f64::NAN };
        Ok(Solution {
            status,
            x: sol.x.clone(),
            objective,
            iterations: sol.iterations,
            tolerance: tol,
            detail: format!("{:?}", sol.status),
        })
    }

    /// Solves at each tolerance in turn until a definite answer comes back.
    pub fn solve(&self, tolerances: &[f64]) -> Result<Solution> {
        let mut last = None;
        for &tol in tolerances {
            let sol = self.solve_at(tol, 200)?;
            if sol.status != Status::SolverError {
                return Ok(sol);
            }
            last = Some(sol);
        }
        last.ok_or_else(|| Error::InvalidArgument("no solver tolerance given".into()))
    }
}

fn block_violation(b: &ConeBlock, x: &[f64]) -> f64 {
    let s: Vec<f64> = b.rows.iter().map(|r| r.eval(x)).collect();
    match b.cone {
        Cone::Zero => s.iter().map(|v| v.abs()).fold(0.0, f64::max),
        Cone::Nonneg => s.iter().map(|v| -v).fold(0.0, f64::max),
        Cone::Soc => {
            let rest: f64 = s[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            (rest - s[0]).max(0.0)
        }
        Cone::Psd(n) => (-svec_to_mat(&s, n).symmetric_eigenvalues().min()).max(0.0),
    }
}

pub fn svec_to_mat(s: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            let v = if i == j { s[k] } else { s[k] * std::f64::consts::FRAC_1_SQRT_2 };
            m[(i, j)] = v;
            m[(j, i)] = v;
            k += 1;
        }
    }
    m
}

mod triplets {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<(usize, usize), f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(&(i, j), &v)| (i, j, v)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(usize, usize), f64>, D::Error> {
        Ok(Vec::<(usize, usize, f64)>::deserialize(d)?.into_iter().map(|(i, j, v)| ((i, j), v)).collect())
    }
}

/// A solved program kept together with its solution for regression replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub program: ConicProgram,
    pub solution: Solution,
}

impl Replay {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
