//! Tube MPC as a second-order cone program, with rigid-tube and nominal variants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arm::{DiscreteDynamics, State};
use crate::conic::{ConicProgram, LinExpr, Replay, Solution, Status};
use crate::error::{Error, Result};
use crate::geometry::Ball;
use crate::linalg::{serde_matrix, serde_vectors};
use crate::synthesis::TubeController;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpcMode {
    /// Tube scalings are decision variables propagated by the tube dynamics.
    Flexible,
    /// Every scaling is fixed to the controller's `delta_bar`.
    Rigid,
    /// No tube; the first state equals the measurement.
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    #[serde(with = "serde_matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub q_terminal: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub r: DMatrix<f64>,
    /// Extra terminal tightening, in P-norm units.
    pub epsilon: f64,
    pub mode: MpcMode,
    pub tolerances: Vec<f64>,
}

impl MpcConfig {
    pub fn standard(dof: usize, mode: MpcMode) -> Self {
        let mut qd = vec![10.0; dof];
        qd.extend(vec![0.01; dof]);
        Self {
            horizon: 20,
            q: DMatrix::from_diagonal(&DVector::from_vec(qd)),
            q_terminal: DMatrix::identity(2 * dof, 2 * dof) * 1e4,
            r: DMatrix::identity(dof, dof) * 1e-3,
            epsilon: 1e-3,
            mode,
            tolerances: vec![1e-8, 1e-6],
        }
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidArgument("horizon must be at least 2".into()));
        }
        for (name, m, dim) in [("Q", &self.q, 2 * dof), ("Q_e", &self.q_terminal, 2 * dof), ("R", &self.r, dof)] {
            if m.shape() != (dim, dim) {
                return Err(Error::InvalidArgument(format!("{name} must be {dim}x{dim}")));
            }
            if (m - m.transpose()).amax() > 1e-12 || m.clone().cholesky().is_none() {
                return Err(Error::InvalidArgument(format!("{name} must be symmetric positive definite")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.tolerances.is_empty() {
            return Err(Error::InvalidArgument("at least one solver tolerance is required".into()));
        }
        Ok(())
    }
}

/// Everything one solve needs. Constraint sets, error-bound constants and the
/// tightening offsets come from `ctrl`.
#[derive(Debug, Clone, Copy)]
pub struct MpcProblemInputs<'a> {
    pub x_now: &'a State,
    pub x_goal: &'a State,
    /// One ball per predicted state, `H + 1` in total.
    pub balls: &'a [Ball],
    pub ctrl: &'a TubeController,
    pub dynamics: &'a DiscreteDynamics,
}

impl MpcProblemInputs<'_> {
    fn validate(&self, cfg: &MpcConfig) -> Result<()> {
        let n = self.ctrl.dof();
        cfg.validate(n)?;
        if self.x_now.dof() != n || self.x_goal.dof() != n || self.dynamics.input_dim() != n {
            return Err(Error::InvalidArgument("state dimension does not match the controller".into()));
        }
        if self.x_goal.qd.iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidArgument("virtual goal must have zero velocity".into()));
        }
        if self.balls.len() != cfg.horizon + 1 {
            return Err(Error::InvalidArgument(format!("need {} balls, got {}", cfg.horizon + 1, self.balls.len())));
        }
        if self.balls.iter().any(|b| b.center.len() != n) {
            return Err(Error::InvalidArgument("ball dimension does not match the arm".into()));
        }
        if cfg.mode == MpcMode::Flexible && self.ctrl.delta_f.is_none() {
            return Err(Error::InvalidArgument("flexible tube needs a finite delta_f (rho_tilde < 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub x_bar: Vec<State>,
    #[serde(with = "serde_vectors")]
    pub a_bar: Vec<DVector<f64>>,
    pub deltas: Vec<f64>,
    pub cost: f64,
    pub status: Status,
}

impl MpcSolution {
    fn failed(status: Status) -> Self {
        Self { x_bar: Vec::new(), a_bar: Vec::new(), deltas: Vec::new(), cost: f64::NAN, status }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

/// Variable layout of the assembled program.
#[derive(Debug, Clone)]
struct Layout {
    h: usize,
    n: usize,
    x0: usize,
    a0: usize,
    delta0: Option<usize>,
    fixed_delta: f64,
}

impl Layout {
    fn x(&self, i: usize, k: usize) -> LinExpr {
        LinExpr::var(self.x0 + i * 2 * self.n + k)
    }

    fn state(&self, i: usize) -> Vec<LinExpr> {
        (0..2 * self.n).map(|k| self.x(i, k)).collect()
    }

    fn accel(&self, i: usize) -> Vec<LinExpr> {
        (0..self.n).map(|k| LinExpr::var(self.a0 + i * self.n + k)).collect()
    }

    fn delta(&self, i: usize) -> LinExpr {
        match self.delta0 {
            Some(d) => LinExpr::var(d + i),
            None => LinExpr::constant(self.fixed_delta),
        }
    }
}

/// Assembled program plus the layout needed to read a solution back.
#[derive(Debug, Clone)]
pub struct MpcProgram {
    pub program: ConicProgram,
    layout: Layout,
}

fn constant_vec(v: &DVector<f64>) -> Vec<LinExpr> {
    v.iter().map(|&c| LinExpr::constant(c)).collect()
}

fn sub(a: &[LinExpr], b: &[LinExpr]) -> Vec<LinExpr> {
    a.iter().zip(b).map(|(x, y)| x.clone().plus(y, -1.0)).collect()
}

pub fn build(cfg: &MpcConfig, inp: &MpcProblemInputs) -> Result<MpcProgram> {
    inp.validate(cfg)?;
    let ctrl = inp.ctrl;
    let (h, n) = (cfg.horizon, ctrl.dof());
    let mut prog = ConicProgram::new();
    let x0 = prog.add_vars((h + 1) * 2 * n);
    let a0 = prog.add_vars(h * n);
    let delta0 = (cfg.mode == MpcMode::Flexible).then(|| prog.add_vars(h + 1));
    let ta0 = prog.add_vars(if cfg.mode == MpcMode::Flexible { h } else { 0 });
    let tv0 = prog.add_vars(if cfg.mode == MpcMode::Flexible { h } else { 0 });
    let fixed_delta = if cfg.mode == MpcMode::Rigid { ctrl.delta_bar } else { 0.0 };
    let lay = Layout { h, n, x0, a0, delta0, fixed_delta };

    // objective
    let terminal = lay.state(h);
    for i in 0..h {
        prog.add_weighted_square(&sub(&lay.state(i), &terminal), &cfg.q);
        prog.add_weighted_square(&lay.accel(i), &cfg.r);
    }
    prog.add_weighted_square(&sub(&terminal, &constant_vec(&inp.x_goal.to_vector())), &cfg.q_terminal);
    if let Some(d) = delta0 {
        for i in 0..h {
            prog.add_linear(d + i, 1.0);
        }
        prog.add_linear(d + h, 1.0 / (1.0 - ctrl.rho_tilde));
    }

    // initial condition
    let x_now = constant_vec(&inp.x_now.to_vector());
    let e0 = sub(&lay.state(0), &x_now);
    match cfg.mode {
        MpcMode::Nominal => {
            for e in e0 {
                prog.add_eq(e, "initial");
            }
        }
        _ => prog.add_soc(lay.delta(0), crate::conic::mat_times(&ctrl.p_sqrt, &e0), "initial tube"),
    }

    // dynamics
    for i in 0..h {
        let ax = crate::conic::mat_times(&inp.dynamics.a, &lay.state(i));
        let bu = crate::conic::mat_times(&inp.dynamics.b, &lay.accel(i));
        for (k, next) in lay.state(i + 1).into_iter().enumerate() {
            prog.add_eq(next.plus(&ax[k], -1.0).plus(&bu[k], -1.0), "dynamics");
        }
    }

    // terminal steady state
    for k in n..2 * n {
        prog.add_eq(lay.x(h, k), "terminal velocity");
    }
    if let (Some(d), Some(delta_f)) = (delta0, ctrl.delta_f) {
        prog.add_nonneg(LinExpr::var(d + h).offset(-delta_f), "terminal tube");
    }

    // tube dynamics with norm epigraphs for beta
    if let Some(d) = delta0 {
        let c = &ctrl.consts;
        for i in 0..h {
            prog.add_soc(LinExpr::var(ta0 + i), lay.accel(i), "accel epigraph");
            prog.add_soc(LinExpr::var(tv0 + i), lay.state(i)[n..].to_vec(), "velocity epigraph");
            let expr = LinExpr::var(d + i + 1)
                .term(d + i, -ctrl.rho_tilde)
                .term(ta0 + i, -ctrl.d * c.a)
                .term(tv0 + i, -ctrl.d * c.b)
                .offset(-ctrl.d * c.c);
            prog.add_nonneg(expr, "tube dynamics");
        }
    }

    // tightened state and input boxes
    let (sx, su) = (&ctrl.state_constraints, &ctrl.input_constraints);
    for i in 0..=h {
        let s = lay.state(i);
        for r in 0..sx.rows() {
            let row: Vec<f64> = sx.a.row(r).iter().copied().collect();
            let mut e = LinExpr::constant(sx.b[r]).plus(&lay.delta(i), -ctrl.tightening_x[r]);
            for (k, coef) in row.iter().enumerate() {
                if *coef != 0.0 {
                    e = e.plus(&s[k], -coef);
                }
            }
            prog.add_nonneg(e, "state box");
        }
    }
    for i in 0..h {
        let a = lay.accel(i);
        for r in 0..su.rows() {
            let mut e = LinExpr::constant(su.b[r]).plus(&lay.delta(i), -ctrl.tightening_u[r]);
            for (k, coef) in su.a.row(r).iter().enumerate() {
                if *coef != 0.0 {
                    e = e.plus(&a[k], -coef);
                }
            }
            prog.add_nonneg(e, "input box");
        }
    }

    // configuration-space balls shrunk by the projected tube
    for (i, ball) in inp.balls.iter().enumerate() {
        let mut t = LinExpr::constant(ball.radius).plus(&lay.delta(i), -ctrl.r_p);
        if i == h {
            t = t.offset(-ctrl.r_p * cfg.epsilon);
        }
        let q = lay.state(i)[..n].to_vec();
        let v = sub(&q, &constant_vec(&ball.center));
        prog.add_soc(t, v, "ball");
    }

    prog.assert_convex(false)?;
    Ok(MpcProgram { program: prog, layout: lay })
}

impl MpcProgram {
    pub fn extract(&self, sol: &Solution) -> MpcSolution {
        if sol.status != Status::Optimal {
            return MpcSolution::failed(sol.status);
        }
        let lay = &self.layout;
        let x = &sol.x;
        let x_bar = (0..=lay.h)
            .map(|i| State::from_vector(&DVector::from_fn(2 * lay.n, |k, _| lay.x(i, k).eval(x))))
            .collect();
        let a_bar = (0..lay.h).map(|i| DVector::from_iterator(lay.n, lay.accel(i).iter().map(|e| e.eval(x)))).collect();
        let deltas = (0..=lay.h).map(|i| lay.delta(i).eval(x)).collect();
        MpcSolution { x_bar, a_bar, deltas, cost: self.program.objective(x), status: Status::Optimal }
    }
}

pub fn build_and_solve(cfg: &MpcConfig, inp: &MpcProblemInputs) -> Result<MpcSolution> {
    Ok(build_and_solve_with_replay(cfg, inp)?.0)
}

/// Also returns the assembled program and raw solver output for replay files.
pub fn build_and_solve_with_replay(cfg: &MpcConfig, inp: &MpcProblemInputs) -> Result<(MpcSolution, Replay)> {
    let built = build(cfg, inp)?;
    let raw = built.program.solve(&cfg.tolerances)?;
    let sol = built.extract(&raw);
    Ok((sol, Replay { program: built.program, solution: raw }))
}

/// Drops the first `n_a` states and repeats the terminal one.
pub fn shift_warm_start(sol: &MpcSolution, n_a: usize) -> Result<Vec<State>> {
    if !sol.is_optimal() {
        return Err(Error::InvalidArgument("only optimal solutions can be shifted".into()));
    }
    let h = sol.x_bar.len() - 1;
    if n_a == 0 || n_a > h {
        return Err(Error::InvalidArgument(format!("n_a must be in 1..={h}")));
    }
    let mut out = sol.x_bar[n_a..].to_vec();
    out.extend(std::iter::repeat_n(sol.x_bar[h].clone(), n_a));
    Ok(out)
}

/// `a_bar + K (x - x_bar)`.
pub fn aux_control(ctrl: &TubeController, x: &State, x_bar: &State, a_bar: &DVector<f64>) -> DVector<f64> {
    a_bar + &ctrl.k * (x.to_vector() - x_bar.to_vector())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: String,
    pub index: usize,
    pub amount: f64,
}

/// Re-checks every constraint of an optimal solution directly from the
/// trajectory, without the assembled program.
pub fn check_solution(cfg: &MpcConfig, inp: &MpcProblemInputs, sol: &MpcSolution, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |name: &str, index: usize, excess: f64| {
        if excess > tol || excess.is_nan() {
            out.push(Violation { constraint: name.to_string(), index, amount: excess });
        }
    };
    let ctrl = inp.ctrl;
    let h = cfg.horizon;
    if sol.x_bar.len() != h + 1 || sol.a_bar.len() != h || sol.deltas.len() != h + 1 {
        flag("shape", 0, f64::INFINITY);
        return out;
    }
    let xs: Vec<DVector<f64>> = sol.x_bar.iter().map(State::to_vector).collect();
    let e0 = &xs[0] - inp.x_now.to_vector();
    match cfg.mode {
        MpcMode::Nominal => flag("initial", 0, e0.amax()),
        _ => flag("initial", 0, ctrl.p_norm(&e0) - sol.deltas[0]),
    }
    for i in 0..h {
        flag("dynamics", i, (&xs[i + 1] - inp.dynamics.propagate(&xs[i], &sol.a_bar[i])).amax());
    }
    flag("terminal velocity", h, sol.x_bar[h].qd.amax());
    match cfg.mode {
        MpcMode::Flexible => {
            flag("terminal tube", h, ctrl.delta_f.unwrap_or(f64::INFINITY) - sol.deltas[h]);
            for i in 0..h {
                flag("tube dynamics", i, ctrl.tube_step(sol.deltas[i], &sol.x_bar[i], &sol.a_bar[i]) - sol.deltas[i + 1]);
            }
        }
        MpcMode::Rigid => {
            for (i, d) in sol.deltas.iter().enumerate() {
                flag("rigid tube", i, (d - ctrl.delta_bar).abs());
            }
        }
        MpcMode::Nominal => {
            for (i, d) in sol.deltas.iter().enumerate() {
                flag("nominal tube", i, d.abs());
            }
        }
    }
    let (sx, su) = (&ctrl.state_constraints, &ctrl.input_constraints);
    for (i, x) in xs.iter().enumerate() {
        let ax = &sx.a * x;
        for r in 0..sx.rows() {
            flag("state box", i, ax[r] + ctrl.tightening_x[r] * sol.deltas[i] - sx.b[r]);
        }
    }
    for (i, a) in sol.a_bar.iter().enumerate() {
        let aa = &su.a * a;
        for r in 0..su.rows() {
            flag("input box", i, aa[r] + ctrl.tightening_u[r] * sol.deltas[i] - su.b[r]);
        }
    }
    for (i, ball) in inp.balls.iter().enumerate() {
        let shrink = if i == h { sol.deltas[i] + cfg.epsilon } else { sol.deltas[i] };
        let dist = (&sol.x_bar[i].q - &ball.center).norm();
        flag("ball", i, dist - (ball.radius - ctrl.r_p * shrink));
    }
    out
}

/// Objective recomputed from the trajectory.
pub fn objective_value(cfg: &MpcConfig, inp: &MpcProblemInputs, sol: &MpcSolution) -> f64 {
    let h = cfg.horizon;
    let xh = sol.x_bar[h].to_vector();
    let quad = |e: &DVector<f64>, w: &DMatrix<f64>| (e.transpose() * w * e)[(0, 0)];
    let mut cost = 0.0;
    for i in 0..h {
        cost += quad(&(sol.x_bar[i].to_vector() - &xh), &cfg.q) + quad(&sol.a_bar[i], &cfg.r);
    }
    cost += quad(&(xh - inp.x_goal.to_vector()), &cfg.q_terminal);
    if cfg.mode == MpcMode::Flexible {
        cost += sol.deltas[..h].iter().sum::<f64>() + sol.deltas[h] / (1.0 - inp.ctrl.rho_tilde);
    }
    cost
}

#[cfg(all(test, feature = "sdp"))]
mod tests {
    use super::*;
    use crate::arm::{ArmModel, ArmParams, Discretization, StateBox, UncertaintySet};
    use crate::error_bounds::{estimate_constants, AccelSet};
    use crate::synthesis::{select_candidate, SynthesisConfig, TubeMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    struct Fixture {
        dynamics: DiscreteDynamics,
        flexible: TubeController,
        rigid: TubeController,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let dynamics = DiscreteDynamics::double_integrator(2, 0.01, Discretization::ZeroOrderHold);
            let x_box = StateBox::standard(2);
            let family = UncertaintySet::mass_and_damping(2, 0.05);
            let consts = estimate_constants(&ArmParams::two_link(), &family, &x_box, 10_000, 1.1, 1).unwrap();
            let accel = AccelSet::symmetric(20.0, 2);
            let cfg = SynthesisConfig::standard(&dynamics, &consts, &x_box, &accel);
            let flexible = select_candidate(&cfg, &dynamics, &consts, TubeMode::Flexible).unwrap();
            let rigid = select_candidate(&cfg, &dynamics, &consts, TubeMode::Rigid).unwrap();
            Fixture { dynamics, flexible, rigid }
        })
    }

    fn ctrl_for(mode: MpcMode) -> &'static TubeController {
        match mode {
            MpcMode::Rigid => &fixture().rigid,
            _ => &fixture().flexible,
        }
    }

    fn big_balls(center: &DVector<f64>, radius: f64, h: usize) -> Vec<Ball> {
        vec![Ball { center: center.clone(), radius }; h + 1]
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Flexible);
        assert_eq!(f.flexible.consts.c, 0.0);
        let x = State::at_rest(DVector::from_vec(vec![0.4, -0.3]));
        let balls = big_balls(&x.q, 0.5, cfg.horizon);
        let inp = MpcProblemInputs { x_now: &x, x_goal: &x, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        let sol = build_and_solve(&cfg, &inp).unwrap();
        assert!(sol.is_optimal());
        for (xb, ab) in sol.x_bar.iter().zip(&sol.a_bar) {
            assert!((xb.to_vector() - x.to_vector()).amax() < 1e-6);
            assert!(ab.amax() < 1e-5);
        }
        assert!(sol.deltas.iter().all(|d| d.abs() < 1e-6));
        assert!(sol.cost.abs() < 1e-5, "{}", sol.cost);
    }

    #[test]
    fn tiny_terminal_ball_is_infeasible() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Flexible);
        let x = State::at_rest(DVector::from_vec(vec![0.4, -0.3]));
        let mut balls = big_balls(&x.q, 0.5, cfg.horizon);
        balls[cfg.horizon].radius = 0.5 * f.flexible.r_p * cfg.epsilon;
        let inp = MpcProblemInputs { x_now: &x, x_goal: &x, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        assert_eq!(build_and_solve(&cfg, &inp).unwrap().status, Status::Infeasible);
    }

    #[test]
    fn rejects_moving_goal_and_wrong_ball_count() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Flexible);
        let x = State::at_rest(DVector::zeros(2));
        let goal = State::new(DVector::zeros(2), DVector::from_vec(vec![0.1, 0.0]));
        let balls = big_balls(&x.q, 0.5, cfg.horizon);
        let inp = MpcProblemInputs { x_now: &x, x_goal: &goal, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        assert!(build(&cfg, &inp).is_err());
        let inp = MpcProblemInputs { x_goal: &x, balls: &balls[1..], ..inp };
        assert!(build(&cfg, &inp).is_err());
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (State, State, Vec<Ball>) {
        let q = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let qd = DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3));
        let goal = State::at_rest(&q + DVector::from_fn(2, |_, _| rng.random_range(-0.15..0.15)));
        let center = (&q + &goal.q) * 0.5 + DVector::from_fn(2, |_, _| rng.random_range(-0.05..0.05));
        let balls = big_balls(&center, rng.random_range(0.3..0.6), 20);
        (State::new(q, qd), goal, balls)
    }

    #[test]
    fn random_solutions_pass_independent_audit() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mode in [MpcMode::Flexible, MpcMode::Rigid, MpcMode::Nominal] {
            let cfg = MpcConfig::standard(2, mode);
            let mut solved = 0;
            for _ in 0..15 {
                let (x, goal, balls) = random_instance(&mut rng);
                let inp = MpcProblemInputs { x_now: &x, x_goal: &goal, balls: &balls, ctrl: ctrl_for(mode), dynamics: &f.dynamics };
                let sol = build_and_solve(&cfg, &inp).unwrap();
                if !sol.is_optimal() {
                    continue;
                }
                solved += 1;
                let v = check_solution(&cfg, &inp, &sol, 1e-6);
                assert!(v.is_empty(), "{mode:?}: {v:?}");
                let recomputed = objective_value(&cfg, &inp, &sol);
                assert!((recomputed - sol.cost).abs() <= 1e-8 * sol.cost.abs().max(1.0), "{recomputed} vs {}", sol.cost);
            }
            assert!(solved >= 10, "{mode:?}: only {solved} solved");
        }
    }

    #[test]
    fn checker_flags_corrupted_solution() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Flexible);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (x, goal, balls) = random_instance(&mut rng);
        let inp = MpcProblemInputs { x_now: &x, x_goal: &goal, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        let mut sol = build_and_solve(&cfg, &inp).unwrap();
        sol.a_bar[3][0] += 1.0;
        let v = check_solution(&cfg, &inp, &sol, 1e-6);
        assert!(v.iter().any(|v| v.constraint == "dynamics" && v.index == 3));
    }

    #[test]
    fn shift_repeats_terminal_state() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Flexible);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (x, goal, balls) = random_instance(&mut rng);
        let inp = MpcProblemInputs { x_now: &x, x_goal: &goal, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        let sol = build_and_solve(&cfg, &inp).unwrap();
        let all = shift_warm_start(&sol, cfg.horizon).unwrap();
        assert!(all.iter().all(|s| *s == sol.x_bar[cfg.horizon]));
        let four = shift_warm_start(&sol, 4).unwrap();
        assert_eq!(four.len(), cfg.horizon + 1);
        assert_eq!(four[0], sol.x_bar[4]);
        assert!(shift_warm_start(&sol, 0).is_err());
    }

    #[test]
    fn aux_control_is_affine_in_error() {
        let c = &fixture().flexible;
        let xb = State::new(DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![0.3, -0.1]));
        let ab = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(aux_control(c, &xb, &xb, &ab), ab);
        let e = DVector::from_vec(vec![0.01, -0.02, 0.03, 0.01]);
        let x1 = State::from_vector(&(xb.to_vector() + &e));
        let x2 = State::from_vector(&(xb.to_vector() + &e * 2.0));
        let d1 = aux_control(c, &x1, &xb, &ab) - &ab;
        let d2 = aux_control(c, &x2, &xb, &ab) - &ab;
        assert!((d2 - d1 * 2.0).amax() < 1e-12);
    }

    #[test]
    fn nominal_model_tracks_prediction_exactly() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Nominal);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (x, goal, balls) = random_instance(&mut rng);
        let inp = MpcProblemInputs { x_now: &x, x_goal: &goal, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        let sol = build_and_solve(&cfg, &inp).unwrap();
        let model = ArmModel::nominal_only(ArmParams::two_link()).unwrap();
        let mut s = x.clone();
        for i in 0..cfg.horizon {
            let a = aux_control(&f.flexible, &s, &sol.x_bar[i], &sol.a_bar[i]);
            s = model.step_true(&f.dynamics, &s, &a).unwrap();
            assert!((s.to_vector() - sol.x_bar[i + 1].to_vector()).amax() < 1e-9);
        }
    }

    #[test]
    fn replay_reproduces_objective() {
        let f = fixture();
        let cfg = MpcConfig::standard(2, MpcMode::Flexible);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (x, goal, balls) = random_instance(&mut rng);
        let inp = MpcProblemInputs { x_now: &x, x_goal: &goal, balls: &balls, ctrl: &f.flexible, dynamics: &f.dynamics };
        let (sol, replay) = build_and_solve_with_replay(&cfg, &inp).unwrap();
        let back = Replay::from_json(&replay.to_json().unwrap()).unwrap();
        assert_eq!(back.program.objective(&back.solution.x), sol.cost);
        assert!(back.program.max_violation(&back.solution.x) < 1e-6);
    }
}
