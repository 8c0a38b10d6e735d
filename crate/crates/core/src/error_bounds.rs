//! Model error left over by feedback linearization and its affine bound
//! `beta(x, a) = a |a| + b |qd| + c`, plus the sampled convex acceleration set.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, ArmParams, State, StateBox, UncertaintySet};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::par;

/// `M~ = -M^-1 M_theta`, `C~ = -M^-1 C_theta`, `g~ = -M^-1 g_theta` with `M` the true mass matrix.
#[derive(Debug, Clone)]
pub struct ErrorTerms {
    pub mass: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

pub fn error_terms(model: &ArmModel, s: &State) -> Result<ErrorTerms> {
    let nominal = model.eval_dynamics(false, s)?;
    let truth = model.eval_dynamics(true, s)?;
    let chol = truth
        .mass
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("true mass matrix not positive definite".into()))?;
    let m_theta = &truth.mass - &nominal.mass;
    let c_theta = &truth.coupling - &nominal.coupling;
    let g_theta = &truth.gravity - &nominal.gravity;
    Ok(ErrorTerms {
        mass: -chol.solve(&m_theta),
        coupling: -chol.solve(&c_theta),
        gravity: -chol.solve(&g_theta),
    })
}

/// `Delta_theta(q, qd, a) = M~ a + C~ qd + g~`.
pub fn eval_delta(model: &ArmModel, s: &State, a: &DVector<f64>) -> Result<DVector<f64>> {
    if a.len() != model.dof() {
        return Err(Error::InvalidArgument("acceleration has wrong dimension".into()));
    }
    let t = error_terms(model, s)?;
    Ok(&t.mass * a + &t.coupling * &s.qd + &t.gravity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub samples_used: usize,
    pub margin: f64,
    pub seed: u64,
}

impl ErrorBoundConstants {
    pub fn zero() -> Self {
        Self { a: 0.0, b: 0.0, c: 0.0, samples_used: 0, margin: 1.0, seed: 0 }
    }

    pub fn beta(&self, qd: &DVector<f64>, accel: &DVector<f64>) -> f64 {
        self.a * accel.norm() + self.b * qd.norm() + self.c
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { a: self.a * factor, b: self.b * factor, c: self.c * factor, ..self.clone() }
    }
}

/// Symmetric torque box `|u_i| <= torque_limits_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorqueSet {
    pub torque_limits: Vec<f64>,
}

impl TorqueSet {
    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter().zip(&self.torque_limits).all(|(v, l)| v.abs() <= l + tol)
    }
}

/// Symmetric box of admissible nominal accelerations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelSet {
    pub box_halfwidth: Vec<f64>,
    pub shrink_iterations: usize,
}

impl AccelSet {
    pub fn symmetric(halfwidth: f64, dof: usize) -> Self {
        Self { box_halfwidth: vec![halfwidth; dof], shrink_iterations: 0 }
    }

    pub fn dof(&self) -> usize {
        self.box_halfwidth.len()
    }

    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dof();
        (0..1usize << n)
            .map(|k| {
                DVector::from_fn(n, |i, _| {
                    if (k >> i) & 1 == 1 {
                        self.box_halfwidth[i]
                    } else {
                        -self.box_halfwidth[i]
                    }
                })
            })
            .collect()
    }

    /// Euclidean norm of a box corner.
    pub fn radius(&self) -> f64 {
        self.box_halfwidth.iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    pub fn contains(&self, a: &DVector<f64>, tol: f64) -> bool {
        a.iter().zip(&self.box_halfwidth).all(|(v, h)| v.abs() <= h + tol)
    }
}

struct ErrorSample {
    theta_unit: Vec<f64>,
    state: State,
}

/// Half the samples cycle through the vertices of the parameter box, the
/// rest are uniform; states are uniform over `x_box`.
fn error_samples(
    nominal: &ArmParams,
    family: &UncertaintySet,
    x_box: &StateBox,
    n: usize,
    seed: u64,
) -> Vec<ErrorSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = family.vertex_count(nominal);
    (0..n)
        .map(|i| {
            let theta_unit = if i % 2 == 0 {
                family.vertex_unit(nominal, (i / 2) % nv)
            } else {
                family.sample_unit(nominal, &mut rng)
            };
            ErrorSample { theta_unit, state: x_box.sample(&mut rng) }
        })
        .collect()
}

/// Sampled maxima of `|M~|`, `|C~|`, `|g~|` over the parameter and state boxes, times `margin`.
pub fn estimate_constants(
    nominal: &ArmParams,
    family: &UncertaintySet,
    x_box: &StateBox,
    n_samples: usize,
    margin: f64,
    seed: u64,
) -> Result<ErrorBoundConstants> {
    nominal.validate()?;
    family.validate(nominal)?;
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument("estimate_constants needs at least 1e4 samples".into()));
    }
    if !(margin >= 1.0) {
        return Err(Error::InvalidArgument("margin must be >= 1".into()));
    }
    if family.is_empty(nominal) {
        return Ok(ErrorBoundConstants { samples_used: 0, margin, seed, ..ErrorBoundConstants::zero() });
    }
    let samples = error_samples(nominal, family, x_box, n_samples, seed);
    let norms = par::map(&samples, |s| -> Result<[f64; 3]> {
        let theta = family.offsets_from_unit(nominal, &s.theta_unit);
        let model = ArmModel::new(nominal.clone(), theta)?;
        let t = error_terms(&model, &s.state)?;
        Ok([spectral_norm(&t.mass), spectral_norm(&t.coupling), t.gravity.norm()])
    });
    let mut max = [0.0f64; 3];
    for n in norms {
        let n = n?;
        for k in 0..3 {
            max[k] = max[k].max(n[k]);
        }
    }
    Ok(ErrorBoundConstants {
        a: margin * max[0],
        b: margin * max[1],
        c: margin * max[2],
        samples_used: n_samples,
        margin,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    /// Largest observed `|Delta| / beta` (infinite if `beta = 0` with nonzero error).
    pub max_ratio: f64,
    pub samples: usize,
    pub violations: usize,
    pub seed: u64,
    pub passed: bool,
}

/// Monte-Carlo check of `|Delta_theta(q, qd, a)| <= beta(x, a)` on fresh draws.
pub fn certify_beta(
    consts: &ErrorBoundConstants,
    nominal: &ArmParams,
    family: &UncertaintySet,
    x_box: &StateBox,
    accel: &AccelSet,
    n_validation: usize,
    seed: u64,
) -> Result<BetaReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<(ErrorSample, DVector<f64>)> = error_samples(nominal, family, x_box, n_validation, seed ^ 0x5eed)
        .into_iter()
        .map(|s| {
            let a = DVector::from_iterator(
                accel.dof(),
                accel.box_halfwidth.iter().map(|h| rng.random_range(-h..=*h)),
            );
            (s, a)
        })
        .collect();
    let ratios = par::map(&samples, |(s, a)| -> Result<f64> {
        let theta = family.offsets_from_unit(nominal, &s.theta_unit);
        let model = ArmModel::new(nominal.clone(), theta)?;
        let err = eval_delta(&model, &s.state, a)?.norm();
        let beta = consts.beta(&s.state.qd, a);
        Ok(if err == 0.0 {
            0.0
        } else if beta == 0.0 {
            f64::INFINITY
        } else {
            err / beta
        })
    });
    let mut max_ratio = 0.0f64;
    let mut violations = 0;
    for r in ratios {
        let r = r?;
        max_ratio = max_ratio.max(r);
        violations += usize::from(r > 1.0);
    }
    Ok(BetaReport { max_ratio, samples: n_validation, violations, seed, passed: violations == 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexifyOptions {
    pub initial_halfwidth: f64,
    pub n_samples: usize,
    pub shrink_factor: f64,
    pub floor: f64,
    /// Fresh validation sets drawn after the working set is satisfied.
    pub validation_rounds: usize,
    pub seed: u64,
}

impl Default for ConvexifyOptions {
    fn default() -> Self {
        Self {
            initial_halfwidth: 20.0,
            n_samples: 20_000,
            shrink_factor: 0.99,
            floor: 1e-3,
            validation_rounds: 2,
            seed: 11,
        }
    }
}

/// Largest |torque| excess over the limits at the box vertices, or `None` when all fit.
fn worst_vertex_violation(
    model: &ArmModel,
    torque: &TorqueSet,
    states: &[State],
    vertices: &[DVector<f64>],
) -> Result<bool> {
    let violated = par::map(states, |s| -> Result<bool> {
        for v in vertices {
            if !torque.contains(&model.feedback_linearize(s, v)?, 0.0) {
                return Ok(true);
            }
        }
        Ok(false)
    });
    for v in violated {
        if v? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Shrinks a symmetric acceleration box until feedback-linearized torques at
/// every sampled state and box vertex fit the torque limits.
pub fn convexify_accel_set(
    nominal: &ArmParams,
    torque: &TorqueSet,
    x_box: &StateBox,
    opts: &ConvexifyOptions,
) -> Result<AccelSet> {
    let model = ArmModel::nominal_only(nominal.clone())?;
    let n = nominal.dof();
    if torque.torque_limits.len() != n {
        return Err(Error::InvalidArgument("torque limits do not match the arm".into()));
    }
    if !(opts.shrink_factor > 0.0 && opts.shrink_factor < 1.0) {
        return Err(Error::InvalidArgument("shrink factor must lie in (0, 1)".into()));
    }
    if torque.torque_limits.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::TorqueLimitsInfeasible { floor: opts.floor, iterations: 0 });
    }
    let mut set = AccelSet::symmetric(opts.initial_halfwidth, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut states: Vec<State> = (0..opts.n_samples).map(|_| x_box.sample(&mut rng)).collect();
    let mut validations_left = opts.validation_rounds;
    loop {
        while worst_vertex_violation(&model, torque, &states, &set.vertices())? {
            for h in &mut set.box_halfwidth {
                *h *= opts.shrink_factor;
            }
            set.shrink_iterations += 1;
            if set.box_halfwidth.iter().any(|h| *h < opts.floor) {
                return Err(Error::TorqueLimitsInfeasible {
                    floor: opts.floor,
                    iterations: set.shrink_iterations,
                });
            }
        }
        if validations_left == 0 {
            return Ok(set);
        }
        validations_left -= 1;
        let fresh: Vec<State> = (0..opts.n_samples).map(|_| x_box.sample(&mut rng)).collect();
        if !worst_vertex_violation(&model, torque, &fresh, &set.vertices())? {
            return Ok(set);
        }
        states.extend(fresh);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::ParamOffsets;
    use rand::Rng;

    fn family() -> UncertaintySet {
        UncertaintySet::mass_and_damping(2, 0.05)
    }

    #[test]
    fn delta_zero_without_uncertainty() {
        let model = ArmModel::nominal_only(ArmParams::two_link()).unwrap();
        let s = State::new(DVector::from_vec(vec![0.4, 1.0]), DVector::from_vec(vec![1.0, -2.0]));
        let d = eval_delta(&model, &s, &DVector::from_vec(vec![5.0, 3.0])).unwrap();
        assert_eq!(d, DVector::zeros(2));
    }

    #[test]
    fn delta_zero_at_rest_without_gravity() {
        let nominal = ArmParams::two_link();
        let theta = family().offsets_from_unit(&nominal, &[1.0, -1.0, 0.0, 0.0, 1.0, 1.0]);
        let model = ArmModel::new(nominal, theta).unwrap();
        let s = State::at_rest(DVector::from_vec(vec![0.3, -0.2]));
        assert_eq!(eval_delta(&model, &s, &DVector::zeros(2)).unwrap().norm(), 0.0);
    }

    #[test]
    fn delta_matches_simulation_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut nominal = ArmParams::three_link();
        nominal.gravity_accel = 9.81;
        let fam = UncertaintySet {
            inertia_rel: vec![0.05; 3],
            ..UncertaintySet::mass_and_damping(3, 0.1)
        };
        for _ in 0..200 {
            let theta = fam.sample(&nominal, &mut rng);
            let model = ArmModel::new(nominal.clone(), theta).unwrap();
            let s = StateBox::standard(3).sample(&mut rng);
            let a = DVector::from_fn(3, |_, _| rng.random_range(-20.0..20.0));
            let d0 = model.eval_dynamics(false, &s).unwrap();
            let d = model.eval_dynamics(true, &s).unwrap();
            let rhs = &d0.mass * &a + &d0.coupling * &s.qd + &d0.gravity - &d.coupling * &s.qd - &d.gravity;
            let oracle = d.mass.clone().try_inverse().unwrap() * rhs - &a;
            let got = eval_delta(&model, &s, &a).unwrap();
            assert!((got - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_scale_gives_zero_constants() {
        let c = estimate_constants(&ArmParams::two_link(), &family().scaled(0.0), &StateBox::standard(2), 10_000, 1.1, 0)
            .unwrap();
        assert_eq!((c.a, c.b, c.c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn no_gravity_gives_zero_c() {
        let c = estimate_constants(&ArmParams::two_link(), &family(), &StateBox::standard(2), 10_000, 1.1, 0).unwrap();
        assert_eq!(c.c, 0.0);
        assert!(c.a > 0.0 && c.b > 0.0);
    }

    #[test]
    fn gravity_with_mass_uncertainty_gives_positive_c() {
        let mut nominal = ArmParams::two_link();
        nominal.gravity_accel = 9.81;
        let c = estimate_constants(&nominal, &family(), &StateBox::standard(2), 10_000, 1.1, 0).unwrap();
        assert!(c.c > 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let r = estimate_constants(&ArmParams::two_link(), &family(), &StateBox::standard(2), 100, 1.1, 0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mass_constant_matches_dense_grid() {
        // 50 x 50 grid over the two mass offsets times 50 x 50 over configurations.
        let nominal = ArmParams::two_link();
        let fam = family();
        let consts = estimate_constants(&nominal, &fam, &StateBox::standard(2), 20_000, 1.0, 3).unwrap();
        let hw = fam.halfwidths(&nominal);
        let grid = |k: usize, lo: f64, hi: f64| lo + (hi - lo) * k as f64 / 49.0;
        let mut best = 0.0f64;
        for i in 0..50 {
            for j in 0..50 {
                let theta = ParamOffsets {
                    link_masses: vec![
                        grid(i, -hw.link_masses[0], hw.link_masses[0]),
                        grid(j, -hw.link_masses[1], hw.link_masses[1]),
                    ],
                    link_inertias: vec![0.0; 2],
                    damping_diag: vec![0.0; 2],
                };
                let model = ArmModel::new(nominal.clone(), theta).unwrap();
                for k in 0..50 {
                    for l in 0..50 {
                        let q = DVector::from_vec(vec![
                            grid(k, -std::f64::consts::PI, std::f64::consts::PI),
                            grid(l, -std::f64::consts::PI, std::f64::consts::PI),
                        ]);
                        let t = error_terms(&model, &State::at_rest(q)).unwrap();
                        best = best.max(spectral_norm(&t.mass));
                    }
                }
            }
        }
        assert!((consts.a - best).abs() <= 0.05 * best, "sampled {} vs grid {best}", consts.a);
    }

    #[test]
    fn constants_monotone_in_scale() {
        let nominal = ArmParams::two_link();
        let x_box = StateBox::standard(2);
        let one = estimate_constants(&nominal, &family(), &x_box, 10_000, 1.1, 5).unwrap();
        let two = estimate_constants(&nominal, &family().scaled(2.0), &x_box, 10_000, 1.1, 5).unwrap();
        assert!(two.a >= one.a && two.b >= one.b && two.c >= one.c);
    }

    #[test]
    fn certified_on_fresh_samples() {
        let nominal = ArmParams::two_link();
        let x_box = StateBox::standard(2);
        let consts = estimate_constants(&nominal, &family(), &x_box, 20_000, 1.1, 7).unwrap();
        let rep = certify_beta(&consts, &nominal, &family(), &x_box, &AccelSet::symmetric(20.0, 2), 100_000, 99)
            .unwrap();
        assert!(rep.passed, "max ratio {}", rep.max_ratio);
        assert!(rep.max_ratio <= 1.0);
    }

    #[test]
    fn zero_constants_fail_certification() {
        let nominal = ArmParams::two_link();
        let rep = certify_beta(
            &ErrorBoundConstants::zero(),
            &nominal,
            &family(),
            &StateBox::standard(2),
            &AccelSet::symmetric(20.0, 2),
            1000,
            1,
        )
        .unwrap();
        assert!(!rep.passed && rep.max_ratio > 1.0);
    }

    #[test]
    fn beta_at_rest_is_c() {
        let c = ErrorBoundConstants { a: 0.3, b: 0.2, c: 0.7, ..ErrorBoundConstants::zero() };
        assert_eq!(c.beta(&DVector::zeros(2), &DVector::zeros(2)), 0.7);
    }

    #[test]
    fn beta_affine_in_acceleration() {
        let c = ErrorBoundConstants { a: 0.3, b: 0.2, c: 0.7, ..ErrorBoundConstants::zero() };
        let qd = DVector::zeros(2);
        let a = DVector::from_vec(vec![1.5, -2.0]);
        let base = c.beta(&qd, &DVector::zeros(2));
        for lambda in [0.5, 1.0, 3.0, 7.0] {
            let lhs = c.beta(&qd, &(&a * lambda)) - base;
            assert!((lhs - lambda * (c.beta(&qd, &a) - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_torque_limits_leave_box_unshrunk() {
        let set = convexify_accel_set(
            &ArmParams::two_link(),
            &TorqueSet { torque_limits: vec![1e6, 1e6] },
            &StateBox::standard(2),
            &ConvexifyOptions { n_samples: 2000, ..Default::default() },
        )
        .unwrap();
        assert_eq!(set.box_halfwidth, vec![20.0, 20.0]);
        assert_eq!(set.shrink_iterations, 0);
    }

    #[test]
    fn zero_torque_limits_rejected() {
        let r = convexify_accel_set(
            &ArmParams::two_link(),
            &TorqueSet { torque_limits: vec![0.0, 0.0] },
            &StateBox::standard(2),
            &ConvexifyOptions { n_samples: 100, ..Default::default() },
        );
        assert!(matches!(r, Err(Error::TorqueLimitsInfeasible { .. })));
    }

    #[test]
    fn realistic_limits_pass_rejection_test() {
        let nominal = ArmParams::two_link();
        let torque = TorqueSet { torque_limits: vec![6.0, 2.0] };
        let x_box = StateBox::standard(2);
        let set = convexify_accel_set(&nominal, &torque, &x_box, &ConvexifyOptions::default()).unwrap();
        assert!(set.shrink_iterations > 0);
        assert!(set.box_halfwidth.iter().all(|h| *h <= 20.0));

        let model = ArmModel::nominal_only(nominal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let states: Vec<State> = (0..1_000_000 / 4).map(|_| x_box.sample(&mut rng)).collect();
        let violations: usize = par::map(&states, |s| {
            set.vertices()
                .iter()
                .filter(|v| !torque.contains(&model.feedback_linearize(s, v).unwrap(), 0.0))
                .count()
        })
        .into_iter()
        .sum();
        assert_eq!(violations, 0);
    }
}
