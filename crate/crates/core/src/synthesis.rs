//! Offline synthesis of the tube controller `(P, K)` and its derived constants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arm::{DiscreteDynamics, State, StateBox};
use crate::conic::{ConicProgram, LinExpr, Status};
use crate::error::{Error, Result};
use crate::error_bounds::{AccelSet, ErrorBoundConstants};
use crate::linalg::{min_eigenvalue, serde_matrix, serde_vector, spectral_norm, sym_inv_sqrt, sym_sqrt, symmetrize, weighted_norm};
use crate::par;

/// Half-plane set `{x : A x <= b}` with unit-norm rows and a normalizing scale per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    #[serde(with = "serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub b: DVector<f64>,
    pub normalizers: Vec<f64>,
}

impl Polytope {
    fn symmetric_box(halfwidth: &[f64], normalizers: &[f64]) -> Self {
        let n = halfwidth.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        let mut norm = Vec::with_capacity(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i] = halfwidth[i];
            b[2 * i + 1] = halfwidth[i];
            norm.extend([normalizers[i], normalizers[i]]);
        }
        Self { a, b, normalizers: norm }
    }

    /// `|q_i| <= q_limit_i`, `|qd_i| <= qd_limit_i`.
    pub fn state_box(x_box: &StateBox, q_norm: f64, qd_norm: f64) -> Self {
        let n = x_box.dof();
        let hw: Vec<f64> = x_box.q_limit.iter().chain(&x_box.qd_limit).copied().collect();
        let norm: Vec<f64> = (0..2 * n).map(|i| if i < n { q_norm } else { qd_norm }).collect();
        Self::symmetric_box(&hw, &norm)
    }

    pub fn input_box(accel: &AccelSet, norm: f64) -> Self {
        Self::symmetric_box(&accel.box_halfwidth, &vec![norm; accel.dof()])
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (&self.a * x - &self.b).iter().all(|v| *v <= tol)
    }
}

pub fn default_rho_grid() -> Vec<f64> {
    (0..20).map(|k| 0.8 + 0.19 * k as f64 / 19.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub rho_grid: Vec<f64>,
    pub state_constraints: Polytope,
    pub input_constraints: Polytope,
    /// Halfwidths of the symmetric disturbance box `W` in state space.
    pub disturbance_halfwidth: Vec<f64>,
    pub tolerance: f64,
}

/// Box around `B w` for `|w| <= beta_max`, with `beta_max` taken at the corners of the state and acceleration boxes.
pub fn disturbance_box(dynamics: &DiscreteDynamics, consts: &ErrorBoundConstants, x_box: &StateBox, accel: &AccelSet) -> Vec<f64> {
    let qd_radius = x_box.qd_limit.iter().map(|v| v * v).sum::<f64>().sqrt();
    let beta_max = consts.a * accel.radius() + consts.b * qd_radius + consts.c;
    dynamics.b.row_iter().map(|r| beta_max * r.norm()).collect()
}

impl SynthesisConfig {
    /// Default grid and normalizers (0.1 rad, 2 rad/s, 20 rad/s^2).
    pub fn standard(dynamics: &DiscreteDynamics, consts: &ErrorBoundConstants, x_box: &StateBox, accel: &AccelSet) -> Self {
        Self {
            rho_grid: default_rho_grid(),
            state_constraints: Polytope::state_box(x_box, 0.1, 2.0),
            input_constraints: Polytope::input_box(accel, 20.0),
            disturbance_halfwidth: disturbance_box(dynamics, consts, x_box, accel),
            tolerance: 1e-8,
        }
    }

    pub fn validate(&self, dynamics: &DiscreteDynamics) -> Result<()> {
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::InvalidArgument("rho grid must be nonempty with entries in (0, 1)".into()));
        }
        let nx = dynamics.state_dim();
        if self.state_constraints.a.ncols() != nx
            || self.input_constraints.a.ncols() != dynamics.input_dim()
            || self.disturbance_halfwidth.len() != nx
        {
            return Err(Error::InvalidArgument("constraint dimensions do not match the dynamics".into()));
        }
        for p in [&self.state_constraints, &self.input_constraints] {
            if p.normalizers.len() != p.rows() || p.normalizers.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidArgument("one positive normalizer per constraint row".into()));
            }
            if p.a.row_iter().any(|r| (r.norm() - 1.0).abs() > 1e-12) {
                return Err(Error::InvalidArgument("constraint rows must have unit norm".into()));
            }
        }
        if self.disturbance_halfwidth.iter().any(|h| !(*h >= 0.0)) {
            return Err(Error::InvalidArgument("disturbance halfwidths must be nonnegative".into()));
        }
        Ok(())
    }

    /// Vertices of `W`, one of each `+-v` pair (the LMI is symmetric in the sign).
    fn disturbance_vertices(&self) -> Vec<DVector<f64>> {
        let n = self.disturbance_halfwidth.len();
        if self.disturbance_halfwidth.iter().all(|h| *h == 0.0) {
            return vec![DVector::zeros(n)];
        }
        (0..1usize << (n - 1))
            .map(|k| {
                DVector::from_fn(n, |i, _| {
                    let s = if i > 0 && (k >> (i - 1)) & 1 == 1 { -1.0 } else { 1.0 };
                    s * self.disturbance_halfwidth[i]
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub e: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub cx2: Vec<f64>,
    pub cu2: Vec<f64>,
    pub w_bar2: f64,
    pub objective: f64,
}

/// Solves the tightening-aware synthesis SDP at a fixed contraction rate.
/// Constraint rows enter divided by their normalizers.
pub fn synthesize(cfg: &SynthesisConfig, dynamics: &DiscreteDynamics, rho: f64) -> Result<SdpSolution> {
    cfg.validate(dynamics)?;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho = {rho} outside (0, 1)")));
    }
    let nx = dynamics.state_dim();
    let nu = dynamics.input_dim();
    // Solve in z = T^-1 x with T the W halfwidths, so W becomes the unit box;
    // position and velocity scales otherwise differ by 1/dt.
    let trivial_w = cfg.disturbance_halfwidth.iter().any(|h| *h == 0.0);
    let t = DVector::from_iterator(nx, cfg.disturbance_halfwidth.iter().map(|h| if trivial_w { 1.0 } else { *h }));
    let t_inv = t.map(|v| 1.0 / v);
    let a = DMatrix::from_diagonal(&t_inv) * &dynamics.a * DMatrix::from_diagonal(&t);
    let b = DMatrix::from_diagonal(&t_inv) * &dynamics.b;
    let ax = scaled_rows(&cfg.state_constraints) * DMatrix::from_diagonal(&t);
    let au = scaled_rows(&cfg.input_constraints);
    let (m, n) = (ax.nrows(), au.nrows());

    let mut prog = ConicProgram::new();
    let e0 = prog.add_vars(nx * (nx + 1) / 2);
    let y0 = prog.add_vars(nu * nx);
    let cx0 = prog.add_vars(m);
    let cu0 = prog.add_vars(n);
    let w0 = prog.add_vars(1);
    let e_at = |i: usize, j: usize| {
        let (i, j) = (i.min(j), i.max(j));
        e0 + j * (j + 1) / 2 + i
    };
    let e = |i: usize, j: usize| LinExpr::var(e_at(i, j));
    let y_at = |i: usize, j: usize| y0 + i * nx + j;

    let scale = 1.0 / (2.0 * (1.0 - rho));
    prog.add_linear(w0, scale * (m + n) as f64);
    for k in 0..m {
        prog.add_linear(cx0 + k, scale);
    }
    for k in 0..n {
        prog.add_linear(cu0 + k, scale);
    }

    // (A E + B Y)[r][c]
    let ael = |r: usize, c: usize| {
        let mut ex = LinExpr::default();
        for k in 0..nx {
            ex = ex.term(e_at(k, c), a[(r, k)]);
        }
        for k in 0..nu {
            ex = ex.term(y_at(k, c), b[(r, k)]);
        }
        ex
    };
    let contraction: Vec<Vec<LinExpr>> = (0..2 * nx)
        .map(|i| {
            (0..2 * nx)
                .map(|j| match (i < nx, j < nx) {
                    (true, true) => LinExpr::default().plus(&e(i, j), rho * rho),
                    (true, false) => ael(j - nx, i),
                    (false, true) => ael(i - nx, j),
                    (false, false) => e(i - nx, j - nx),
                })
                .collect()
        })
        .collect();
    prog.add_psd(&contraction, "contraction");

    let row_block = |corner: LinExpr, row: Vec<LinExpr>| -> Vec<Vec<LinExpr>> {
        (0..nx + 1)
            .map(|i| {
                (0..nx + 1)
                    .map(|j| match (i, j) {
                        (0, 0) => corner.clone(),
                        (0, j) => row[j - 1].clone(),
                        (i, 0) => row[i - 1].clone(),
                        (i, j) => e(i - 1, j - 1),
                    })
                    .collect()
            })
            .collect()
    };
    for r in 0..m {
        let row = (0..nx)
            .map(|c| (0..nx).fold(LinExpr::default(), |acc, k| acc.term(e_at(k, c), ax[(r, k)])))
            .collect();
        prog.add_psd(&row_block(LinExpr::var(cx0 + r), row), "state tightening");
    }
    for r in 0..n {
        let row = (0..nx)
            .map(|c| (0..nu).fold(LinExpr::default(), |acc, k| acc.term(y_at(k, c), au[(r, k)])))
            .collect();
        prog.add_psd(&row_block(LinExpr::var(cu0 + r), row), "input tightening");
    }
    for v in cfg.disturbance_vertices() {
        let row = v.component_mul(&t_inv).iter().map(|x| LinExpr::constant(*x)).collect();
        prog.add_psd(&row_block(LinExpr::var(w0), row), "disturbance");
    }
    // Without a floor E collapses to zero whenever W is trivial.
    let floor = if trivial_w { 1.0 } else { 1e-6 };
    let shifted: Vec<Vec<LinExpr>> = (0..nx)
        .map(|i| (0..nx).map(|j| if i == j { e(i, j).offset(-floor) } else { e(i, j) }).collect())
        .collect();
    prog.add_psd(&shifted, "conditioning");
    prog.assert_convex(true)?;

    let sol = prog.solve(&[cfg.tolerance, 1e-6])?;
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => {
            return Err(Error::SynthesisInfeasible { rho, reason: "semidefinite program infeasible".into() })
        }
        Status::SolverError => return Err(Error::SynthesisInfeasible { rho, reason: sol.detail }),
    }
    let x = &sol.x;
    let e_z = DMatrix::from_fn(nx, nx, |i, j| x[e_at(i, j)]);
    let min_eig = min_eigenvalue(&e_z);
    if !(min_eig > 0.5 * floor) {
        return Err(Error::IllConditioned { rho, min_eig });
    }
    let t_mat = DMatrix::from_diagonal(&t);
    Ok(SdpSolution {
        e: &t_mat * e_z * &t_mat,
        y: DMatrix::from_fn(nu, nx, |i, j| x[y_at(i, j)]) * &t_mat,
        cx2: x[cx0..cx0 + m].to_vec(),
        cu2: x[cu0..cu0 + n].to_vec(),
        w_bar2: x[w0],
        objective: sol.objective,
    })
}

fn scaled_rows(p: &Polytope) -> DMatrix<f64> {
    let mut a = p.a.clone();
    for (mut r, s) in a.row_iter_mut().zip(&p.normalizers) {
        r /= *s;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TubeMode {
    Flexible,
    Rigid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub consts_sha256: String,
    pub seed: u64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeController {
    #[serde(with = "serde_matrix")]
    pub p: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub k: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_sqrt: DMatrix<f64>,
    pub rho: f64,
    pub d: f64,
    pub l_beta: f64,
    pub rho_tilde: f64,
    /// `None` when `rho_tilde >= 1`.
    pub delta_f: Option<f64>,
    pub w_bar: f64,
    pub delta_bar: f64,
    pub r_p: f64,
    pub tightening_x: Vec<f64>,
    pub tightening_u: Vec<f64>,
    pub state_constraints: Polytope,
    pub input_constraints: Polytope,
    pub consts: ErrorBoundConstants,
    pub mode: TubeMode,
    pub provenance: Option<Provenance>,
}

/// Fills in every tube constant from `(P, K)`.
pub fn derive_constants(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    rho: f64,
    dynamics: &DiscreteDynamics,
    consts: &ErrorBoundConstants,
    cfg: &SynthesisConfig,
) -> Result<TubeController> {
    let p = symmetrize(p);
    let nx = dynamics.state_dim();
    let nq = nx / 2;
    let p_sqrt = sym_sqrt(&p)?;
    let p_inv_sqrt = sym_inv_sqrt(&p)?;
    // The solver meets the contraction LMI only to its tolerance; report the
    // rate (P, K) actually certify, never below the requested one.
    let a_cl = &dynamics.a + &dynamics.b * k;
    let certified = spectral_norm(&(&p_sqrt * a_cl * &p_inv_sqrt)) * (1.0 + 1e-10);
    let rho = rho.max(certified);
    if rho >= 1.0 {
        return Err(Error::SynthesisInfeasible { rho, reason: "closed loop does not contract".into() });
    }
    let d = spectral_norm(&(&p_sqrt * &dynamics.b));
    let v = p_inv_sqrt.rows(nq, nq).into_owned();
    let l_beta = consts.a * spectral_norm(&(k * &p_inv_sqrt)) + consts.b * spectral_norm(&v);
    let rho_tilde = rho + d * l_beta;
    let delta_f = (rho_tilde < 1.0).then(|| d * consts.c / (1.0 - rho_tilde));
    let w_bar = cfg
        .disturbance_vertices()
        .iter()
        .map(|v| weighted_norm(&p, v))
        .fold(0.0, f64::max);
    let tightening = |rows: &DMatrix<f64>| -> Vec<f64> {
        rows.row_iter().map(|r| (&p_inv_sqrt * r.transpose()).norm()).collect()
    };
    let tightening_x = tightening(&cfg.state_constraints.a);
    let tightening_u = tightening(&(&cfg.input_constraints.a * k));
    let r_p = projection_radius(&p)?;
    Ok(TubeController {
        p_sqrt,
        k: k.clone(),
        rho,
        d,
        l_beta,
        rho_tilde,
        delta_f,
        w_bar,
        delta_bar: w_bar / (1.0 - rho),
        r_p,
        tightening_x,
        tightening_u,
        state_constraints: cfg.state_constraints.clone(),
        input_constraints: cfg.input_constraints.clone(),
        consts: consts.clone(),
        mode: TubeMode::Flexible,
        provenance: None,
        p,
    })
}

/// Admissible negative eigenvalue of `rho^2 P - A_cl' P A_cl`.
pub const CONTRACTION_TOL: f64 = 1e-8;

/// Radius of the configuration-space ball covering the projection of `{|x|_P <= 1}`:
/// `1 / sqrt(lambda_min(P11 - P12 P22^-1 P21))`.
pub fn projection_radius(p: &DMatrix<f64>) -> Result<f64> {
    let nq = p.nrows() / 2;
    let p11 = p.view((0, 0), (nq, nq));
    let p12 = p.view((0, nq), (nq, nq));
    let p22_inv = p
        .view((nq, nq), (nq, nq))
        .into_owned()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("velocity block of P is singular".into()))?;
    let lam = min_eigenvalue(&symmetrize(&(p11 - p12 * p22_inv * p12.transpose())));
    if !(lam > 0.0) {
        return Err(Error::Numerical("configuration Schur complement of P not positive definite".into()));
    }
    Ok(1.0 / lam.sqrt())
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub rho: f64,
    pub controller: Option<TubeController>,
    pub score: f64,
    pub rejected: Option<String>,
}

/// Largest normalized tightening `c_i delta_bar / nu_i` over state and input rows.
pub fn candidate_score(ctrl: &TubeController) -> f64 {
    let s = &ctrl.state_constraints;
    let u = &ctrl.input_constraints;
    ctrl.tightening_x
        .iter()
        .zip(&s.normalizers)
        .chain(ctrl.tightening_u.iter().zip(&u.normalizers))
        .map(|(c, nu)| c * ctrl.delta_bar / nu)
        .fold(0.0, f64::max)
}

/// One SDP per grid value; shared by both tube modes.
pub fn grid_controllers(
    cfg: &SynthesisConfig,
    dynamics: &DiscreteDynamics,
    consts: &ErrorBoundConstants,
) -> Vec<(f64, std::result::Result<TubeController, String>)> {
    par::map(&cfg.rho_grid, |&rho| {
        let ctrl = synthesize(cfg, dynamics, rho).and_then(|sdp| {
            let e_inv = sdp
                .e
                .clone()
                .try_inverse()
                .ok_or(Error::IllConditioned { rho, min_eig: 0.0 })?;
            let k = &sdp.y * &e_inv;
            derive_constants(&e_inv, &k, rho, dynamics, consts, cfg)
        });
        (rho, ctrl.map_err(|e| e.to_string()))
    })
}

pub fn rank_candidates(
    grid: &[(f64, std::result::Result<TubeController, String>)],
    dynamics: &DiscreteDynamics,
    mode: TubeMode,
) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = grid
        .iter()
        .map(|(rho, ctrl)| match ctrl {
            Err(err) => Candidate { rho: *rho, controller: None, score: f64::INFINITY, rejected: Some(err.clone()) },
            Ok(c) => {
                let mut c = c.clone();
                c.mode = mode;
                let residual = c.contraction_residual(dynamics);
                let rejected = if mode == TubeMode::Flexible && c.rho_tilde >= 1.0 {
                    Some(format!("rho_tilde = {} >= 1", c.rho_tilde))
                } else if residual < -CONTRACTION_TOL {
                    Some(format!("contraction residual {residual:e}"))
                } else {
                    None
                };
                let score = if rejected.is_none() { candidate_score(&c) } else { f64::INFINITY };
                Candidate { rho: *rho, controller: Some(c), score, rejected }
            }
        })
        .collect();
    out.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    out
}

/// Smallest score among accepted candidates; ties go to the smaller rho.
pub fn best_candidate(cands: &[Candidate]) -> Result<TubeController> {
    let mut best: Option<&Candidate> = None;
    for c in cands.iter().filter(|c| c.rejected.is_none()) {
        if best.is_none_or(|b| c.score < b.score) {
            best = Some(c);
        }
    }
    best.and_then(|c| c.controller.clone()).ok_or(Error::NoValidController)
}

pub fn synthesize_grid(
    cfg: &SynthesisConfig,
    dynamics: &DiscreteDynamics,
    consts: &ErrorBoundConstants,
    mode: TubeMode,
) -> Vec<Candidate> {
    rank_candidates(&grid_controllers(cfg, dynamics, consts), dynamics, mode)
}

/// Synthesizes over the grid and keeps the candidate with the smallest max tightening.
pub fn select_candidate(
    cfg: &SynthesisConfig,
    dynamics: &DiscreteDynamics,
    consts: &ErrorBoundConstants,
    mode: TubeMode,
) -> Result<TubeController> {
    cfg.validate(dynamics)?;
    best_candidate(&synthesize_grid(cfg, dynamics, consts, mode))
}

impl TubeController {
    pub fn dof(&self) -> usize {
        self.k.nrows()
    }

    /// `rho_tilde * delta + d * beta(x_bar, a_bar)`.
    pub fn tube_step(&self, delta: f64, x_bar: &State, a_bar: &DVector<f64>) -> f64 {
        self.rho_tilde * delta + self.d * self.consts.beta(&x_bar.qd, a_bar)
    }

    /// Smallest eigenvalue of `rho^2 P - A_cl' P A_cl`.
    pub fn contraction_residual(&self, dynamics: &DiscreteDynamics) -> f64 {
        let a_cl = &dynamics.a + &dynamics.b * &self.k;
        let m = &self.p * (self.rho * self.rho) - a_cl.transpose() * &self.p * &a_cl;
        min_eigenvalue(&symmetrize(&m))
    }

    pub fn p_norm(&self, x: &DVector<f64>) -> f64 {
        (&self.p_sqrt * x).norm()
    }

    pub fn consts_hash(consts: &ErrorBoundConstants) -> String {
        let json = serde_json::to_vec(consts).expect("constants serialize");
        hex::encode(Sha256::digest(json))
    }

    pub fn with_provenance(mut self, seed: u64, scale: f64) -> Self {
        self.provenance = Some(Provenance { consts_sha256: Self::consts_hash(&self.consts), seed, scale });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p.nrows();
        if self.p.ncols() != n || self.k.ncols() != n || self.p_sqrt.shape() != (n, n) {
            return Err(Error::InvalidArgument("controller matrices have inconsistent shapes".into()));
        }
        if (&self.p_sqrt * &self.p_sqrt - &self.p).amax() > 1e-8 * self.p.amax().max(1.0) {
            return Err(Error::InvalidArgument("stored square root does not match P".into()));
        }
        if !(min_eigenvalue(&self.p) > 0.0) {
            return Err(Error::InvalidArgument("P is not positive definite".into()));
        }
        if let Some(p) = &self.provenance {
            if p.consts_sha256 != Self::consts_hash(&self.consts) {
                return Err(Error::InvalidArgument("error-bound constants do not match their digest".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(all(test, feature = "sdp"))]
mod tests {
    use super::*;
    use crate::arm::{ArmModel, ArmParams, Discretization, UncertaintySet};
    use crate::error_bounds::estimate_constants;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn family(scale: f64) -> UncertaintySet {
        UncertaintySet::mass_and_damping(2, 0.05).scaled(scale)
    }

    fn setup(scale: f64) -> (DiscreteDynamics, ErrorBoundConstants, StateBox, AccelSet) {
        let dynamics = DiscreteDynamics::double_integrator(2, 0.01, Discretization::ZeroOrderHold);
        let x_box = StateBox::standard(2);
        let consts = estimate_constants(&ArmParams::two_link(), &family(scale), &x_box, 10_000, 1.1, 1).unwrap();
        (dynamics, consts, x_box, AccelSet::symmetric(20.0, 2))
    }

    fn controller(scale: f64, rho: f64) -> (TubeController, DiscreteDynamics, SynthesisConfig) {
        let (dynamics, consts, x_box, accel) = setup(scale);
        let mut cfg = SynthesisConfig::standard(&dynamics, &consts, &x_box, &accel);
        cfg.rho_grid = vec![rho];
        let c = select_candidate(&cfg, &dynamics, &consts, TubeMode::Flexible).unwrap();
        (c, dynamics, cfg)
    }

    fn unit_ball<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
        loop {
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            if v.norm() <= 1.0 {
                return v;
            }
        }
    }

    #[test]
    fn contraction_certificate_holds() {
        let (c, dynamics, _) = controller(1.0, 0.9);
        assert!(c.contraction_residual(&dynamics) >= -1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_cl = &dynamics.a + &dynamics.b * &c.k;
        for _ in 0..10_000 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            assert!(c.p_norm(&(&a_cl * &x)) <= c.rho * c.p_norm(&x) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn trivial_disturbance_gives_zero_w_bar() {
        let (dynamics, _, x_box, accel) = setup(0.0);
        let consts = ErrorBoundConstants::zero();
        let cfg = SynthesisConfig::standard(&dynamics, &consts, &x_box, &accel);
        assert!(cfg.disturbance_halfwidth.iter().all(|h| *h == 0.0));
        let sdp = synthesize(&cfg, &dynamics, 0.9).unwrap();
        // zero up to the solver's relative gap
        assert!(sdp.w_bar2.abs() <= 1e-8 * sdp.objective, "{} vs {}", sdp.w_bar2, sdp.objective);
        let p = sdp.e.clone().try_inverse().unwrap();
        let c = derive_constants(&p, &(&sdp.y * &p), 0.9, &dynamics, &consts, &cfg).unwrap();
        assert_eq!(c.w_bar, 0.0);
        assert_eq!(c.delta_bar, 0.0);
    }

    #[test]
    fn tightenings_match_closed_form() {
        let (dynamics, consts, x_box, accel) = setup(1.0);
        let cfg = SynthesisConfig::standard(&dynamics, &consts, &x_box, &accel);
        let sdp = synthesize(&cfg, &dynamics, 0.9).unwrap();
        let p = sdp.e.clone().try_inverse().unwrap();
        let k = &sdp.y * &p;
        let c = derive_constants(&p, &k, 0.9, &dynamics, &consts, &cfg).unwrap();
        // the LMI variable holds the squared normalized tightening at the optimum
        for (i, cx2) in sdp.cx2.iter().enumerate() {
            let nu = cfg.state_constraints.normalizers[i];
            let rel = (cx2.sqrt() * nu - c.tightening_x[i]).abs() / c.tightening_x[i];
            assert!(rel < 1e-6, "row {i}: {rel}");
        }
        for (j, cu2) in sdp.cu2.iter().enumerate() {
            let nu = cfg.input_constraints.normalizers[j];
            let rel = (cu2.sqrt() * nu - c.tightening_u[j]).abs() / c.tightening_u[j];
            assert!(rel < 1e-6, "row {j}: {rel}");
        }
        let rel = (sdp.w_bar2.sqrt() - c.w_bar).abs() / c.w_bar;
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn zero_constants_leave_rho_unchanged() {
        let (dynamics, _, x_box, accel) = setup(1.0);
        let zero = ErrorBoundConstants::zero();
        let cfg = SynthesisConfig::standard(&dynamics, &zero, &x_box, &accel);
        let sdp = synthesize(&cfg, &dynamics, 0.9).unwrap();
        let p = sdp.e.clone().try_inverse().unwrap();
        let c = derive_constants(&p, &(&sdp.y * &p), 0.9, &dynamics, &zero, &cfg).unwrap();
        assert_eq!(c.l_beta, 0.0);
        assert_eq!(c.rho_tilde, c.rho);
        assert_eq!(c.delta_f, Some(0.0));
    }

    #[test]
    fn projection_radius_of_block_diagonal_p() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 1.0, 2.0]));
        assert!((projection_radius(&p).unwrap() - 0.5).abs() < 1e-12);
        let mut coupled = p.clone();
        coupled[(0, 2)] = 1.0;
        coupled[(2, 0)] = 1.0;
        // Schur complement diag(4 - 1, 9)
        assert!((projection_radius(&coupled).unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn projection_contains_tube_members() {
        let (c, _, _) = controller(1.0, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p_inv_sqrt = sym_inv_sqrt(&c.p).unwrap();
        for _ in 0..10_000 {
            let delta = rng.random_range(0.0..2.0);
            let mut u = unit_ball(4, &mut rng);
            if rng.random_bool(0.5) {
                u /= u.norm();
            }
            let e = &p_inv_sqrt * u * delta;
            assert!(e.rows(0, 2).norm() <= delta * c.r_p * (1.0 + 1e-12));
        }
    }

    #[test]
    fn single_candidate_grid_returns_it() {
        let (c, _, _) = controller(1.0, 0.85);
        assert!((c.rho - 0.85).abs() < 1e-6);
    }

    #[test]
    fn larger_uncertainty_does_not_shrink_rho_tilde() {
        let (one, _, _) = controller(1.0, 0.9);
        let (two, _, _) = controller(2.0, 0.9);
        assert!(two.rho_tilde >= one.rho_tilde);
    }

    #[test]
    fn selection_is_reproducible() {
        let (dynamics, _, x_box, accel) = setup(0.0);
        let zero = ErrorBoundConstants::zero();
        let cfg = SynthesisConfig::standard(&dynamics, &zero, &x_box, &accel);
        let a = select_candidate(&cfg, &dynamics, &zero, TubeMode::Flexible).unwrap();
        let b = select_candidate(&cfg, &dynamics, &zero, TubeMode::Flexible).unwrap();
        assert_eq!(a, b);
        // every score is zero, so the smallest rate wins the tie
        assert!((a.rho - 0.8).abs() < 1e-6);
    }

    #[test]
    fn rigid_mode_keeps_non_contracting_candidates() {
        let (dynamics, consts, x_box, accel) = setup(1.0);
        let mut cfg = SynthesisConfig::standard(&dynamics, &consts, &x_box, &accel);
        cfg.rho_grid = vec![0.99];
        assert!(matches!(
            select_candidate(&cfg, &dynamics, &consts, TubeMode::Flexible),
            Err(Error::NoValidController)
        ));
        let rigid = select_candidate(&cfg, &dynamics, &consts, TubeMode::Rigid).unwrap();
        assert!(rigid.rho_tilde >= 1.0 && rigid.delta_f.is_none());
    }

    #[test]
    fn tube_step_fixed_point_and_decay() {
        let (mut c, _, _) = controller(1.0, 0.9);
        let rest = State::at_rest(DVector::zeros(2));
        let zero = DVector::zeros(2);
        assert_eq!(c.tube_step(0.7, &rest, &zero), c.rho_tilde * 0.7);
        c.consts.c = 0.05;
        let delta_f = c.d * c.consts.c / (1.0 - c.rho_tilde);
        assert!((c.tube_step(delta_f, &rest, &zero) - delta_f).abs() < 1e-12);
    }

    #[test]
    fn tube_step_bounds_true_error() {
        let scale = 1.0;
        let (c, dynamics, _) = controller(scale, 0.9);
        let nominal = ArmParams::two_link();
        let fam = family(scale);
        let x_box = StateBox::standard(2);
        let p_inv_sqrt = sym_inv_sqrt(&c.p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut trials = 0;
        while trials < 10_000 {
            let model = ArmModel::new(nominal.clone(), fam.sample(&nominal, &mut rng)).unwrap();
            let x_bar = x_box.sample(&mut rng);
            let a_bar = DVector::from_fn(2, |_, _| rng.random_range(-20.0..20.0));
            let delta = rng.random_range(0.0..0.5);
            let e = &p_inv_sqrt * unit_ball(4, &mut rng) * delta;
            let x = State::from_vector(&(x_bar.to_vector() + &e));
            if !x_box.contains(&x, 0.0) {
                continue;
            }
            trials += 1;
            let a = &a_bar + &c.k * &e;
            let next = model.step_true(&dynamics, &x, &a).unwrap();
            let nominal_next = dynamics.propagate(&x_bar.to_vector(), &a_bar);
            let err = c.p_norm(&(next.to_vector() - nominal_next));
            assert!(err <= c.tube_step(delta, &x_bar, &a_bar) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn tightening_is_sound_on_ellipsoid() {
        let (c, _, _) = controller(1.0, 0.9);
        let p_inv = c.p.clone().try_inverse().unwrap();
        for (i, row) in c.state_constraints.a.row_iter().enumerate() {
            // max of row * e over |e|_P <= 1 is sqrt(row P^-1 row')
            let support = (row * &p_inv * row.transpose())[(0, 0)].sqrt();
            assert!((support - c.tightening_x[i]).abs() < 1e-9 * support.max(1.0));
        }
        let ku = &c.input_constraints.a * &c.k;
        for (j, row) in ku.row_iter().enumerate() {
            let support = (row * &p_inv * row.transpose())[(0, 0)].sqrt();
            assert!((support - c.tightening_u[j]).abs() < 1e-9 * support.max(1.0));
        }
    }

    #[test]
    fn json_round_trip_and_digest() {
        let (c, _, _) = controller(1.0, 0.9);
        let c = c.with_provenance(7, 1.0);
        let back = TubeController::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.provenance, c.provenance);
        assert!((back.p.clone() - &c.p).amax() <= 1e-12 * c.p.amax());
        let mut tampered = c.clone();
        tampered.consts.a *= 2.0;
        assert!(TubeController::from_json(&tampered.to_json().unwrap()).is_err());
    }
}
