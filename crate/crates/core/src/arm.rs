//! Rigid-body dynamics of planar serial arms with revolute joints.
//!
//! The arm hangs in the x-y plane with gravity (if any) acting along -y.
//! Joint `j` rotates every link `i >= j`; absolute link angles are the
//! cumulative joint sums. Closed forms below hold for any link count, but
//! configs ship 2- and 3-link defaults.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::error_bounds;

/// Physical parameters of a planar arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    /// [kg]
    pub link_masses: Vec<f64>,
    /// [m]
    pub link_lengths: Vec<f64>,
    /// Distance from the proximal joint to the link's center of mass [m].
    pub com_offsets: Vec<f64>,
    /// Inertia about the center of mass [kg m^2].
    pub link_inertias: Vec<f64>,
    /// Viscous joint damping [N m s / rad].
    pub damping_diag: Vec<f64>,
    /// [m/s^2]; zero for a horizontal arm.
    pub gravity_accel: f64,
}

impl ArmParams {
    pub fn dof(&self) -> usize {
        self.link_masses.len()
    }

    /// Two uniform 0.5 m rods of 1 kg.
    pub fn two_link() -> Self {
        Self::uniform_rods(&[1.0, 1.0], &[0.5, 0.5])
    }

    pub fn three_link() -> Self {
        Self::uniform_rods(&[1.5, 1.0, 0.5], &[0.4, 0.35, 0.25])
    }

    fn uniform_rods(masses: &[f64], lengths: &[f64]) -> Self {
        Self {
            link_masses: masses.to_vec(),
            link_lengths: lengths.to_vec(),
            com_offsets: lengths.iter().map(|l| 0.5 * l).collect(),
            link_inertias: masses.iter().zip(lengths).map(|(m, l)| m * l * l / 12.0).collect(),
            damping_diag: vec![0.1 * 2.0; masses.len()],
            gravity_accel: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::InvalidArgument("arm has no links".into()));
        }
        let lens = [
            self.link_lengths.len(),
            self.com_offsets.len(),
            self.link_inertias.len(),
            self.damping_diag.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidArgument("arm parameter vectors differ in length".into()));
        }
        for i in 0..n {
            let (m, l, lc, inertia, damp) = (
                self.link_masses[i],
                self.link_lengths[i],
                self.com_offsets[i],
                self.link_inertias[i],
                self.damping_diag[i],
            );
            if !(m > 0.0 && l > 0.0 && inertia > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "link {i}: mass, length and inertia must be positive"
                )));
            }
            if !(lc > 0.0 && lc <= l) {
                return Err(Error::InvalidArgument(format!("link {i}: com offset outside (0, length]")));
            }
            if !(damp >= 0.0) {
                return Err(Error::InvalidArgument(format!("link {i}: negative damping")));
            }
        }
        if !self.gravity_accel.is_finite() {
            return Err(Error::InvalidArgument("gravity must be finite".into()));
        }
        Ok(())
    }

    pub fn with_offsets(&self, theta: &ParamOffsets) -> ArmParams {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        ArmParams {
            link_masses: add(&self.link_masses, &theta.link_masses),
            link_inertias: add(&self.link_inertias, &theta.link_inertias),
            damping_diag: add(&self.damping_diag, &theta.damping_diag),
            ..self.clone()
        }
    }

    /// Lever arm of joint-chain segment `l` as seen by the center of mass of link `i` (`l <= i`).
    fn lever(&self, i: usize, l: usize) -> f64 {
        if l < i {
            self.link_lengths[l]
        } else {
            self.com_offsets[i]
        }
    }

    /// Mass matrix and its partial derivatives `dM/dq_p`.
    fn mass_and_gradient(&self, q: &DVector<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = self.dof();
        let phi = absolute_angles(q);
        let mut m = DMatrix::zeros(n, n);
        let mut dm = vec![DMatrix::zeros(n, n); n];
        for j in 0..n {
            for k in 0..n {
                for i in j.max(k)..n {
                    m[(j, k)] += self.link_inertias[i];
                    for l in j..=i {
                        for lp in k..=i {
                            let rr = self.link_masses[i] * self.lever(i, l) * self.lever(i, lp);
                            let diff = phi[l] - phi[lp];
                            m[(j, k)] += rr * diff.cos();
                            if l == lp {
                                continue;
                            }
                            let s = rr * diff.sin();
                            // d(phi_l - phi_lp)/dq_p = [p <= l] - [p <= lp]
                            for (p, dmp) in dm.iter_mut().enumerate() {
                                let w = f64::from(u8::from(p <= l)) - f64::from(u8::from(p <= lp));
                                if w != 0.0 {
                                    dmp[(j, k)] -= s * w;
                                }
                            }
                        }
                    }
                }
            }
        }
        (m, dm)
    }

    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.mass_and_gradient(q).0
    }

    /// Coriolis/centrifugal matrix from Christoffel symbols; damping excluded.
    pub fn coriolis_matrix(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let (_, dm) = self.mass_and_gradient(q);
        DMatrix::from_fn(n, n, |k, j| {
            (0..n)
                .map(|i| 0.5 * (dm[i][(k, j)] + dm[j][(k, i)] - dm[k][(i, j)]) * qd[i])
                .sum()
        })
    }

    pub fn gravity_vector(&self, q: &DVector<f64>) -> DVector<f64> {
        let n = self.dof();
        let phi = absolute_angles(q);
        DVector::from_fn(n, |k, _| {
            (k..n)
                .map(|i| {
                    let arm: f64 = (k..=i).map(|l| self.lever(i, l) * phi[l].cos()).sum();
                    self.link_masses[i] * self.gravity_accel * arm
                })
                .sum()
        })
    }

    /// Coupling matrix: Coriolis plus viscous damping.
    pub fn coupling_matrix(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DMatrix<f64> {
        let mut c = self.coriolis_matrix(q, qd);
        for (i, d) in self.damping_diag.iter().enumerate() {
            c[(i, i)] += d;
        }
        c
    }

    /// Center-of-mass positions of each link.
    pub fn com_positions(&self, q: &DVector<f64>) -> Vec<[f64; 2]> {
        let phi = absolute_angles(q);
        (0..self.dof())
            .map(|i| {
                (0..=i).fold([0.0, 0.0], |acc, l| {
                    let r = self.lever(i, l);
                    [acc[0] + r * phi[l].cos(), acc[1] + r * phi[l].sin()]
                })
            })
            .collect()
    }
}

fn absolute_angles(q: &DVector<f64>) -> Vec<f64> {
    q.iter()
        .scan(0.0, |acc, qi| {
            *acc += qi;
            Some(*acc)
        })
        .collect()
}

/// Offsets of the true parameters from the nominal ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamOffsets {
    pub link_masses: Vec<f64>,
    pub link_inertias: Vec<f64>,
    pub damping_diag: Vec<f64>,
}

impl ParamOffsets {
    pub fn zero(dof: usize) -> Self {
        Self {
            link_masses: vec![0.0; dof],
            link_inertias: vec![0.0; dof],
            damping_diag: vec![0.0; dof],
        }
    }

    /// Packed as `[masses, inertias, damping]`.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.link_masses[..], &self.link_inertias, &self.damping_diag].concat()
    }

    pub fn from_vec(dof: usize, v: &[f64]) -> Self {
        Self {
            link_masses: v[..dof].to_vec(),
            link_inertias: v[dof..2 * dof].to_vec(),
            damping_diag: v[2 * dof..3 * dof].to_vec(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.to_vec().iter().all(|v| *v == 0.0)
    }
}

/// Box of parameter offsets: `|theta_p| <= scale * rel_p * |nominal_p|`.
///
/// Gravity has no entry of its own; with `gravity_accel != 0` the mass
/// offsets still perturb the gravity torque.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySet {
    pub mass_rel: Vec<f64>,
    pub inertia_rel: Vec<f64>,
    pub damping_rel: Vec<f64>,
    pub scale: f64,
}

impl UncertaintySet {
    /// Relative bound on every link mass and damping entry; inertias exact.
    pub fn mass_and_damping(dof: usize, rel: f64) -> Self {
        Self {
            mass_rel: vec![rel; dof],
            inertia_rel: vec![0.0; dof],
            damping_rel: vec![rel; dof],
            scale: 1.0,
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self { scale, ..self.clone() }
    }

    pub fn validate(&self, nominal: &ArmParams) -> Result<()> {
        let n = nominal.dof();
        if self.mass_rel.len() != n || self.inertia_rel.len() != n || self.damping_rel.len() != n {
            return Err(Error::InvalidArgument("uncertainty bounds do not match the arm".into()));
        }
        let rel = [&self.mass_rel[..], &self.inertia_rel, &self.damping_rel].concat();
        if rel.iter().any(|r| !(*r >= 0.0)) || !(self.scale >= 0.0) {
            return Err(Error::InvalidArgument("uncertainty bounds must be non-negative".into()));
        }
        let h = self.halfwidths(nominal);
        let pos = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, w)| x - w > 0.0);
        if !pos(&nominal.link_masses, &h.link_masses) || !pos(&nominal.link_inertias, &h.link_inertias) {
            return Err(Error::InvalidArgument(
                "uncertainty allows non-positive masses or inertias".into(),
            ));
        }
        Ok(())
    }

    pub fn halfwidths(&self, nominal: &ArmParams) -> ParamOffsets {
        let hw = |rel: &[f64], nom: &[f64]| {
            rel.iter().zip(nom).map(|(r, v)| self.scale * r * v.abs()).collect::<Vec<_>>()
        };
        ParamOffsets {
            link_masses: hw(&self.mass_rel, &nominal.link_masses),
            link_inertias: hw(&self.inertia_rel, &nominal.link_inertias),
            damping_diag: hw(&self.damping_rel, &nominal.damping_diag),
        }
    }

    /// Indices (in packed order) of parameters with a nonzero bound.
    pub fn active_parameters(&self, nominal: &ArmParams) -> Vec<usize> {
        self.halfwidths(nominal)
            .to_vec()
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_empty(&self, nominal: &ArmParams) -> bool {
        self.active_parameters(nominal).is_empty()
    }

    /// Offsets from per-parameter unit coordinates in `[-1, 1]`.
    pub fn offsets_from_unit(&self, nominal: &ArmParams, unit: &[f64]) -> ParamOffsets {
        let hw = self.halfwidths(nominal).to_vec();
        let v: Vec<f64> = hw.iter().zip(unit).map(|(w, u)| w * u).collect();
        ParamOffsets::from_vec(nominal.dof(), &v)
    }

    /// Unit coordinates of vertex `k` (bits of `k` pick the sign of each active parameter).
    pub fn vertex_unit(&self, nominal: &ArmParams, k: usize) -> Vec<f64> {
        let mut unit = vec![0.0; 3 * nominal.dof()];
        for (bit, p) in self.active_parameters(nominal).into_iter().enumerate() {
            unit[p] = if (k >> bit) & 1 == 1 { 1.0 } else { -1.0 };
        }
        unit
    }

    pub fn vertex_count(&self, nominal: &ArmParams) -> usize {
        1usize << self.active_parameters(nominal).len()
    }

    pub fn sample_unit<R: Rng>(&self, nominal: &ArmParams, rng: &mut R) -> Vec<f64> {
        (0..3 * nominal.dof()).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }

    /// Uniform draw of the true-minus-nominal offsets.
    pub fn sample<R: Rng>(&self, nominal: &ArmParams, rng: &mut R) -> ParamOffsets {
        let unit = self.sample_unit(nominal, rng);
        self.offsets_from_unit(nominal, &unit)
    }

    pub fn contains(&self, nominal: &ArmParams, theta: &ParamOffsets) -> bool {
        let hw = self.halfwidths(nominal).to_vec();
        theta.to_vec().iter().zip(&hw).all(|(t, w)| t.abs() <= w * (1.0 + 1e-12))
    }
}

/// Joint configuration and velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    #[serde(with = "crate::linalg::serde_vector")]
    pub q: DVector<f64>,
    #[serde(with = "crate::linalg::serde_vector")]
    pub qd: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Self {
        Self { q, qd }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, qd: DVector::zeros(n) }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    /// Stacked `(q, qd)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dof();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.qd[i - n] })
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            q: x.rows(0, n).into_owned(),
            qd: x.rows(n, n).into_owned(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.len() != self.qd.len() {
            return Err(Error::InvalidArgument("q and qd differ in length".into()));
        }
        ensure_finite("state q", self.q.as_slice())?;
        ensure_finite("state qd", self.qd.as_slice())
    }
}

/// Symmetric state box `|q_i| <= q_limit_i`, `|qd_i| <= qd_limit_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub q_limit: Vec<f64>,
    pub qd_limit: Vec<f64>,
}

impl StateBox {
    /// `|q| <= pi`, `|qd| <= 2`.
    pub fn standard(dof: usize) -> Self {
        Self {
            q_limit: vec![std::f64::consts::PI; dof],
            qd_limit: vec![2.0; dof],
        }
    }

    pub fn dof(&self) -> usize {
        self.q_limit.len()
    }

    pub fn contains(&self, s: &State, tol: f64) -> bool {
        s.q.iter().zip(&self.q_limit).all(|(q, l)| q.abs() <= l + tol)
            && s.qd.iter().zip(&self.qd_limit).all(|(v, l)| v.abs() <= l + tol)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> State {
        let draw = |lims: &[f64], rng: &mut R| {
            DVector::from_iterator(lims.len(), lims.iter().map(|l| rng.random_range(-l..=*l)))
        };
        let q = draw(&self.q_limit, rng);
        let qd = draw(&self.qd_limit, rng);
        State { q, qd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// Exact for piecewise-constant acceleration: `B = [dt^2/2 I; dt I]`.
    #[default]
    ZeroOrderHold,
    /// `B = [0; dt I]`.
    ForwardEuler,
}

/// Discrete double integrator `x+ = A x + B a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDynamics {
    #[serde(with = "crate::linalg::serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub b: DMatrix<f64>,
    pub dt: f64,
}

impl DiscreteDynamics {
    pub fn double_integrator(dof: usize, dt: f64, kind: Discretization) -> Self {
        let n = dof;
        let mut a = DMatrix::identity(2 * n, 2 * n);
        let mut b = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            a[(i, n + i)] = dt;
            b[(n + i, i)] = dt;
            if kind == Discretization::ZeroOrderHold {
                b[(i, i)] = 0.5 * dt * dt;
            }
        }
        Self { a, b, dt }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn propagate(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * a
    }
}

/// `M`, `C` (Coriolis + damping) and `g` at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub mass: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

/// Nominal parameters plus the (unknown to the controller) true offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub nominal: ArmParams,
    pub theta: ParamOffsets,
}

impl ArmModel {
    pub fn new(nominal: ArmParams, theta: ParamOffsets) -> Result<Self> {
        nominal.validate()?;
        if theta.to_vec().len() != 3 * nominal.dof() {
            return Err(Error::InvalidArgument("theta does not match the arm".into()));
        }
        nominal.with_offsets(&theta).validate()?;
        Ok(Self { nominal, theta })
    }

    pub fn nominal_only(nominal: ArmParams) -> Result<Self> {
        let dof = nominal.dof();
        Self::new(nominal, ParamOffsets::zero(dof))
    }

    pub fn dof(&self) -> usize {
        self.nominal.dof()
    }

    pub fn true_params(&self) -> ArmParams {
        self.nominal.with_offsets(&self.theta)
    }

    fn check_state(&self, s: &State) -> Result<()> {
        s.validate()?;
        if s.dof() != self.dof() {
            return Err(Error::InvalidArgument(format!(
                "state has {} joints, arm has {}",
                s.dof(),
                self.dof()
            )));
        }
        Ok(())
    }

    fn check_input(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.dof() {
            return Err(Error::InvalidArgument(format!("{what} has wrong dimension {}", v.len())));
        }
        ensure_finite(what, v.as_slice())
    }

    pub fn eval_dynamics(&self, use_true: bool, s: &State) -> Result<Dynamics> {
        self.check_state(s)?;
        let params = if use_true && !self.theta.is_zero() {
            self.true_params()
        } else {
            self.nominal.clone()
        };
        Ok(Dynamics {
            mass: params.mass_matrix(&s.q),
            coupling: params.coupling_matrix(&s.q, &s.qd),
            gravity: params.gravity_vector(&s.q),
        })
    }

    /// Torque cancelling the nominal nonlinearities: `M0 a + C0 qd + g0`.
    pub fn feedback_linearize(&self, s: &State, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(a, "acceleration")?;
        let d = self.eval_dynamics(false, s)?;
        Ok(&d.mass * a + &d.coupling * &s.qd + &d.gravity)
    }

    /// Joint acceleration produced by torque `u`.
    pub fn forward_dynamics(&self, use_true: bool, s: &State, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(u, "torque")?;
        let d = self.eval_dynamics(use_true, s)?;
        let rhs = u - &d.coupling * &s.qd - &d.gravity;
        d.mass
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Numerical("mass matrix not positive definite".into()))
    }

    /// One step of the feedback-linearized true system: `x+ = A x + B (a + Delta(q, qd, a))`.
    pub fn step_true(&self, dynamics: &DiscreteDynamics, s: &State, a: &DVector<f64>) -> Result<State> {
        self.check_input(a, "acceleration")?;
        let delta = error_bounds::eval_delta(self, s, a)?;
        let x = s.to_vector();
        Ok(State::from_vector(&dynamics.propagate(&x, &(a + delta))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed_two_link() -> ArmModel {
        let nominal = ArmParams::two_link();
        let theta = ParamOffsets {
            link_masses: vec![0.05, -0.04],
            link_inertias: vec![0.001, 0.0],
            damping_diag: vec![-0.01, 0.01],
        };
        ArmModel::new(nominal, theta).unwrap()
    }

    /// Mass matrix from numerically differentiated center-of-mass Jacobians.
    fn mass_matrix_oracle(p: &ArmParams, q: &DVector<f64>) -> DMatrix<f64> {
        let n = p.dof();
        let h = 1e-6;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut jac = DMatrix::zeros(2, n);
            for j in 0..n {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                let (pp, pm) = (p.com_positions(&qp)[i], p.com_positions(&qm)[i]);
                jac[(0, j)] = (pp[0] - pm[0]) / (2.0 * h);
                jac[(1, j)] = (pp[1] - pm[1]) / (2.0 * h);
            }
            let mut jw = DMatrix::zeros(1, n);
            for j in 0..=i {
                jw[(0, j)] = 1.0;
            }
            m += jac.transpose() * &jac * p.link_masses[i] + jw.transpose() * &jw * p.link_inertias[i];
        }
        m
    }

    #[test]
    fn zero_velocity_no_gravity_leaves_only_damping() {
        let model = ArmModel::nominal_only(ArmParams::two_link()).unwrap();
        let s = State::at_rest(DVector::zeros(2));
        let d = model.eval_dynamics(true, &s).unwrap();
        assert_eq!(d.gravity, DVector::zeros(2));
        assert_eq!(d.coupling, DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.2])));
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let p = ArmParams::three_link();
        let q = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        assert_eq!(p.coriolis_matrix(&q, &DVector::zeros(3)), DMatrix::zeros(3, 3));
    }

    #[test]
    fn mass_matrix_matches_jacobian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for params in [ArmParams::two_link(), ArmParams::three_link()] {
            for _ in 0..20 {
                let q = DVector::from_fn(params.dof(), |_, _| rng.random_range(-3.0..3.0));
                let err = (params.mass_matrix(&q) - mass_matrix_oracle(&params, &q)).amax();
                assert!(err < 1e-8, "mass matrix error {err}");
            }
        }
    }

    #[test]
    fn two_link_mass_matrix_matches_textbook() {
        let p = ArmParams::two_link();
        let q = DVector::from_vec(vec![0.4, 0.9]);
        let (m1, m2) = (1.0, 1.0);
        let (l1, lc1, lc2) = (0.5, 0.25, 0.25);
        let (i1, i2) = (p.link_inertias[0], p.link_inertias[1]);
        let c2 = 0.9f64.cos();
        let m11 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i1 + i2;
        let m12 = m2 * (lc2 * lc2 + l1 * lc2 * c2) + i2;
        let m22 = m2 * lc2 * lc2 + i2;
        let m = p.mass_matrix(&q);
        assert!((m[(0, 0)] - m11).abs() < 1e-14);
        assert!((m[(0, 1)] - m12).abs() < 1e-14);
        assert!((m[(1, 0)] - m12).abs() < 1e-14);
        assert!((m[(1, 1)] - m22).abs() < 1e-14);
    }

    #[test]
    fn mass_matrix_positive_definite_nominal_and_true() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = perturbed_two_link();
        for _ in 0..500 {
            let s = StateBox::standard(2).sample(&mut rng);
            for use_true in [false, true] {
                let m = model.eval_dynamics(use_true, &s).unwrap().mass;
                assert!(crate::linalg::min_eigenvalue(&m) > 0.0);
                assert!((&m - m.transpose()).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn mdot_minus_two_coriolis_is_skew() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for params in [ArmParams::two_link(), ArmParams::three_link()] {
            let n = params.dof();
            for _ in 0..50 {
                let q = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
                let qd = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                let h = 1e-6;
                let mdot = (params.mass_matrix(&(&q + &qd * h)) - params.mass_matrix(&(&q - &qd * h)))
                    / (2.0 * h);
                let n_mat = mdot - params.coriolis_matrix(&q, &qd) * 2.0;
                assert!((&n_mat + n_mat.transpose()).amax() < 1e-5);
            }
        }
    }

    #[test]
    fn gravity_matches_potential_gradient() {
        let mut p = ArmParams::three_link();
        p.gravity_accel = 9.81;
        let q = DVector::from_vec(vec![0.2, 0.7, -1.1]);
        let potential = |q: &DVector<f64>| -> f64 {
            p.com_positions(q)
                .iter()
                .zip(&p.link_masses)
                .map(|(c, m)| m * p.gravity_accel * c[1])
                .sum()
        };
        let g = p.gravity_vector(&q);
        for k in 0..3 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let fd = (potential(&qp) - potential(&qm)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn eval_dynamics_rejects_non_finite() {
        let model = ArmModel::nominal_only(ArmParams::two_link()).unwrap();
        let s = State::new(DVector::from_vec(vec![f64::NAN, 0.0]), DVector::zeros(2));
        assert!(matches!(model.eval_dynamics(false, &s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn true_with_zero_theta_equals_nominal_bitwise() {
        let model = ArmModel::nominal_only(ArmParams::three_link()).unwrap();
        let s = State::new(DVector::from_vec(vec![0.1, 0.2, 0.3]), DVector::from_vec(vec![1.0, -0.5, 0.2]));
        assert_eq!(model.eval_dynamics(true, &s).unwrap(), model.eval_dynamics(false, &s).unwrap());
    }

    #[test]
    fn feedback_linearize_zero_at_rest() {
        let model = ArmModel::nominal_only(ArmParams::two_link()).unwrap();
        let s = State::at_rest(DVector::from_vec(vec![0.5, -0.5]));
        let u = model.feedback_linearize(&s, &DVector::zeros(2)).unwrap();
        assert_eq!(u, DVector::zeros(2));
        assert!(model.feedback_linearize(&s, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn feedback_linearization_exact_without_uncertainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = ArmModel::nominal_only(ArmParams::three_link()).unwrap();
        for _ in 0..100 {
            let s = StateBox::standard(3).sample(&mut rng);
            let a = DVector::from_fn(3, |_, _| rng.random_range(-20.0..20.0));
            let u = model.feedback_linearize(&s, &a).unwrap();
            let qdd = model.forward_dynamics(true, &s, &u).unwrap();
            assert!((qdd - &a).amax() < 1e-10);
        }
    }

    #[test]
    fn feedback_linearization_residual_is_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = perturbed_two_link();
        for _ in 0..100 {
            let s = StateBox::standard(2).sample(&mut rng);
            let a = DVector::from_fn(2, |_, _| rng.random_range(-20.0..20.0));
            let u = model.feedback_linearize(&s, &a).unwrap();
            let qdd = model.forward_dynamics(true, &s, &u).unwrap();
            let delta = error_bounds::eval_delta(&model, &s, &a).unwrap();
            assert!((qdd - &a - delta).amax() < 1e-10);
        }
    }

    #[test]
    fn step_true_steady_state_and_double_integrator() {
        let model = ArmModel::nominal_only(ArmParams::two_link()).unwrap();
        let dynamics = DiscreteDynamics::double_integrator(2, 0.01, Discretization::ZeroOrderHold);
        let s = State::at_rest(DVector::from_vec(vec![0.3, 0.1]));
        assert_eq!(model.step_true(&dynamics, &s, &DVector::zeros(2)).unwrap(), s);

        let a = DVector::from_vec(vec![2.0, -1.0]);
        let mut cur = s.clone();
        for k in 1..=50 {
            cur = model.step_true(&dynamics, &cur, &a).unwrap();
            let t = k as f64 * 0.01;
            let expect_q = &s.q + &a * (0.5 * t * t);
            assert!((&cur.q - expect_q).amax() < 1e-12);
            assert!((&cur.qd - &a * t).amax() < 1e-12);
        }
    }

    /// One step of the continuous dynamics under the held feedback-linearizing torque.
    fn rk4_step(model: &ArmModel, s: &State, u: &DVector<f64>, dt: f64) -> State {
        let f = |x: &DVector<f64>| {
            let st = State::from_vector(x);
            let qdd = model.forward_dynamics(true, &st, u).unwrap();
            let mut dx = x.clone();
            let n = st.dof();
            dx.rows_mut(0, n).copy_from(&st.qd);
            dx.rows_mut(n, n).copy_from(&qdd);
            dx
        };
        let x = s.to_vector();
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (dt / 2.0)));
        let k3 = f(&(&x + &k2 * (dt / 2.0)));
        let k4 = f(&(&x + &k3 * dt));
        State::from_vector(&(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
    }

    fn one_step_error(model: &ArmModel, kind: Discretization, s: &State, a: &DVector<f64>, dt: f64) -> f64 {
        let dynamics = DiscreteDynamics::double_integrator(s.dof(), dt, kind);
        let u = model.feedback_linearize(s, a).unwrap();
        let stepped = model.step_true(&dynamics, s, a).unwrap();
        (stepped.to_vector() - rk4_step(model, s, &u, dt).to_vector()).amax()
    }

    #[test]
    fn step_true_tracks_continuous_dynamics_to_second_order() {
        // Under a held torque qdd drifts within the step (damping alone gives
        // M^-1 D qdd), so the absolute 10 dt^2 bound only holds on slow states.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = perturbed_two_link();
        let dt = 0.01;
        let moderate = StateBox { q_limit: vec![std::f64::consts::PI; 2], qd_limit: vec![0.2; 2] };
        for kind in [Discretization::ZeroOrderHold, Discretization::ForwardEuler] {
            for _ in 0..50 {
                let s = moderate.sample(&mut rng);
                let a = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                let err = one_step_error(&model, kind, &s, &a, dt);
                assert!(err < 10.0 * dt * dt, "{kind:?}: {err}");
            }
        }
    }

    #[test]
    fn step_true_error_is_second_order_over_full_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let model = perturbed_two_link();
        for kind in [Discretization::ZeroOrderHold, Discretization::ForwardEuler] {
            for _ in 0..50 {
                let s = StateBox::standard(2).sample(&mut rng);
                let a = DVector::from_fn(2, |_, _| rng.random_range(-20.0..20.0));
                let coarse = one_step_error(&model, kind, &s, &a, 0.01);
                let fine = one_step_error(&model, kind, &s, &a, 0.005);
                assert!(fine <= coarse / 3.0 + 1e-12, "{kind:?}: {coarse} -> {fine}");
            }
        }
    }

    #[test]
    fn uncertainty_vertices_and_samples_stay_inside() {
        let nominal = ArmParams::two_link();
        let set = UncertaintySet::mass_and_damping(2, 0.05);
        assert_eq!(set.vertex_count(&nominal), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..16 {
            let th = set.offsets_from_unit(&nominal, &set.vertex_unit(&nominal, k));
            assert!(set.contains(&nominal, &th));
            assert!((th.link_masses[0].abs() - 0.05).abs() < 1e-15);
        }
        for _ in 0..100 {
            assert!(set.contains(&nominal, &set.sample(&nominal, &mut rng)));
        }
        assert!(set.scaled(0.0).is_empty(&nominal));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = ArmParams::two_link();
        p.com_offsets[1] = 0.6;
        assert!(p.validate().is_err());
        let mut p = ArmParams::two_link();
        p.link_masses[0] = 0.0;
        assert!(p.validate().is_err());
    }
}
