//! Closed-loop episodes: instance generation, the outer MPC loop with inner
//! auxiliary steps, trace auditing and benchmark sweeps.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmModel, ArmParams, DiscreteDynamics, ParamOffsets, State, StateBox, UncertaintySet};
use crate::conic::Status;
use crate::corridor::{assign_balls, build_corridor, plan_path, select_virtual_goal, Corridor, PlannerOptions};
use crate::error::{Error, Result};
use crate::error_bounds::TorqueSet;
use crate::geometry::{in_collision, scdf, ArmGeometry, Circle, Scene};
use crate::linalg::serde_vectors;
use crate::mpc::{aux_control, build_and_solve, shift_warm_start, MpcConfig, MpcMode, MpcProblemInputs};
use crate::par;
use crate::synthesis::TubeController;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub scene: Scene,
    #[serde(with = "crate::linalg::serde_vector")]
    pub q_start: DVector<f64>,
    #[serde(with = "crate::linalg::serde_vector")]
    pub q_goal: DVector<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningConfig {
    pub clearance: f64,
    pub corridor_step: f64,
    pub planner: PlannerOptions,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self { clearance: 0.1, corridor_step: 0.001, planner: PlannerOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub n_obstacles: usize,
    pub radius_range: (f64, f64),
    /// Obstacle centers are drawn from this annulus around the base.
    pub center_range: (f64, f64),
    pub half_extent: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self { n_obstacles: 6, radius_range: (0.05, 0.2), center_range: (0.35, 1.0), half_extent: 1.5 }
    }
}

pub fn random_scene(geom: &ArmGeometry, opts: &SceneOptions, rng: &mut ChaCha8Rng) -> Scene {
    let base = geom.base_position;
    let mut scene = Scene::empty(opts.half_extent);
    scene.workspace_bounds.min = [base[0] - opts.half_extent, base[1] - opts.half_extent];
    scene.workspace_bounds.max = [base[0] + opts.half_extent, base[1] + opts.half_extent];
    for _ in 0..opts.n_obstacles {
        let r = rng.random_range(opts.center_range.0..opts.center_range.1);
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        scene.obstacles.push(Circle {
            center: [base[0] + r * phi.cos(), base[1] + r * phi.sin()],
            radius: rng.random_range(opts.radius_range.0..opts.radius_range.1),
        });
    }
    scene
}

/// Whether 100 evenly spaced points of the straight segment keep the clearance.
pub fn straight_line_clear(geom: &ArmGeometry, scene: &Scene, a: &DVector<f64>, b: &DVector<f64>, clearance: f64) -> bool {
    (0..100).all(|k| {
        let t = k as f64 / 99.0;
        scdf(geom, scene, &(a + (b - a) * t)) >= clearance
    })
}

const INSTANCE_ATTEMPTS: usize = 200;
/// Planner budget for the generator's connectivity check. Planning is
/// deterministic per seed, so an accepted instance replans identically under
/// the full budget; pairs that need more are rejected as likely disconnected.
const INSTANCE_PLAN_BUDGET: usize = 5_000;

/// Draws start and goal in `scene` (or a fresh random scene) until they are
/// clear, not connectable by a straight line, and the planner connects them.
pub fn generate_instance(
    geom: &ArmGeometry,
    fixed_scene: Option<&Scene>,
    scene_opts: &SceneOptions,
    planning: &PlanningConfig,
    seed: u64,
) -> Result<ProblemInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lim = planning.planner.q_limit;
    let n = geom.dof();
    for _ in 0..INSTANCE_ATTEMPTS {
        let scene = match fixed_scene {
            Some(s) => s.clone(),
            None => random_scene(geom, scene_opts, &mut rng),
        };
        let mut free = || {
            (0..1000)
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-lim..=lim)))
                .find(|q| scdf(geom, &scene, q) > planning.clearance)
        };
        let (Some(q_start), Some(q_goal)) = (free(), free()) else { continue };
        if straight_line_clear(geom, &scene, &q_start, &q_goal, planning.clearance) {
            continue;
        }
        let opts = PlannerOptions {
            seed,
            node_budget: planning.planner.node_budget.min(INSTANCE_PLAN_BUDGET),
            ..planning.planner.clone()
        };
        if plan_path(geom, &scene, &q_start, &q_goal, planning.clearance, &opts).is_err() {
            continue;
        }
        return Ok(ProblemInstance { scene, q_start, q_goal, seed });
    }
    Err(Error::PlanningFailed(format!("no valid instance for seed {seed} after {INSTANCE_ATTEMPTS} attempts")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Flexible,
    Rigid,
    Nominal,
    /// Nominal MPC on the plant with zero parameter error.
    Oracle,
}

impl SimMode {
    pub fn mpc_mode(self) -> MpcMode {
        match self {
            SimMode::Flexible => MpcMode::Flexible,
            SimMode::Rigid => MpcMode::Rigid,
            SimMode::Nominal | SimMode::Oracle => MpcMode::Nominal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimMode::Flexible => "flexible",
            SimMode::Rigid => "rigid",
            SimMode::Nominal => "nominal",
            SimMode::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flexible" => Ok(SimMode::Flexible),
            "rigid" => Ok(SimMode::Rigid),
            "nominal" => Ok(SimMode::Nominal),
            "oracle" => Ok(SimMode::Oracle),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_a: usize,
    pub step_cap: usize,
    /// Radius of the goal region in state space.
    pub goal_radius: f64,
    pub uncertainty_scale: f64,
    pub mode: SimMode,
    pub theta_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { n_a: 4, step_cap: 4000, goal_radius: 0.01, uncertainty_scale: 1.0, mode: SimMode::Flexible, theta_seed: 0 }
    }
}

/// Everything an episode needs besides the instance.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub params: ArmParams,
    /// Already scaled to the run's uncertainty level.
    pub family: UncertaintySet,
    pub geometry: ArmGeometry,
    pub dynamics: DiscreteDynamics,
    pub x_box: StateBox,
    pub torque: TorqueSet,
    /// Flexible-tube controller; its `K` and `P` also serve the nominal modes.
    pub flexible: TubeController,
    pub rigid: Option<TubeController>,
    pub mpc: MpcConfig,
    pub planning: PlanningConfig,
}

impl Artifacts {
    fn controller(&self, mode: SimMode) -> Result<&TubeController> {
        match mode {
            SimMode::Rigid => self.rigid.as_ref().ok_or(Error::NoValidController),
            _ => Ok(&self.flexible),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    Timeout,
    Infeasible,
    Collision,
    SolverError,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Reached => "reached",
            Outcome::Timeout => "timeout",
            Outcome::Infeasible => "infeasible",
            Outcome::Collision => "collision",
            Outcome::SolverError => "solver_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub step: usize,
    pub status: Status,
    pub cost: f64,
    pub delta0: f64,
    pub goal_index: usize,
    pub last_ball: usize,
}

/// Counters filled while running; the independent checks live in `audit_trace`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    /// Steps where `|x - x_bar_i|_P` exceeded `delta_i` by more than 1e-6.
    pub tube_escapes: usize,
    pub max_tube_excess: f64,
    /// Solves whose virtual-goal index fell below the previous one.
    pub goal_regressions: usize,
    /// Solves that failed after an earlier success.
    pub feasibility_losses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub instance_seed: u64,
    pub theta_seed: u64,
    pub mode: SimMode,
    pub uncertainty_scale: f64,
    pub theta: ParamOffsets,
    pub states: Vec<State>,
    #[serde(with = "serde_vectors")]
    pub torques: Vec<DVector<f64>>,
    #[serde(with = "serde_vectors")]
    pub accelerations: Vec<DVector<f64>>,
    pub solves: Vec<SolveSummary>,
    pub outcome: Outcome,
    pub steps: usize,
    pub time_to_goal: Option<usize>,
    /// Largest tube scaling over the executed part of each plan.
    pub max_tube: f64,
    pub counters: RunCounters,
    pub corridor_len: usize,
}

impl SimTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

const TUBE_TOL: f64 = 1e-6;

pub fn draw_theta(family: &UncertaintySet, params: &ArmParams, mode: SimMode, theta_seed: u64) -> ParamOffsets {
    if mode == SimMode::Oracle {
        return ParamOffsets::zero(params.dof());
    }
    family.sample(params, &mut ChaCha8Rng::seed_from_u64(theta_seed))
}

pub fn plan_corridor(art: &Artifacts, inst: &ProblemInstance) -> Result<Corridor> {
    let opts = PlannerOptions { seed: inst.seed, ..art.planning.planner.clone() };
    let path = plan_path(&art.geometry, &inst.scene, &inst.q_start, &inst.q_goal, art.planning.clearance, &opts)?;
    build_corridor(&art.geometry, &inst.scene, &path, art.planning.corridor_step)
}

/// One closed-loop run: plan, then alternate MPC solves with `n_a` auxiliary steps.
pub fn run_episode(inst: &ProblemInstance, run: &RunConfig, art: &Artifacts) -> Result<SimTrace> {
    let corridor = plan_corridor(art, inst)?;
    run_episode_in(inst, &corridor, run, art)
}

pub fn run_episode_in(inst: &ProblemInstance, corridor: &Corridor, run: &RunConfig, art: &Artifacts) -> Result<SimTrace> {
    let h = art.mpc.horizon;
    if run.n_a == 0 || run.n_a > h {
        return Err(Error::InvalidArgument(format!("n_a must lie in 1..={h}")));
    }
    let ctrl = art.controller(run.mode)?;
    let mpc = MpcConfig { mode: run.mode.mpc_mode(), ..art.mpc.clone() };
    let theta = draw_theta(&art.family, &art.params, run.mode, run.theta_seed);
    let model = ArmModel::new(art.params.clone(), theta.clone())?;
    let goal = State::at_rest(inst.q_goal.clone());
    let tube_tighten = match run.mode {
        SimMode::Flexible => ctrl.delta_f.unwrap_or(f64::INFINITY),
        SimMode::Rigid => ctrl.delta_bar,
        SimMode::Nominal | SimMode::Oracle => 0.0,
    };
    let goal_tighten = (mpc.epsilon + tube_tighten) * ctrl.r_p;

    let mut x = State::at_rest(inst.q_start.clone());
    let mut guess = vec![x.clone(); h + 1];
    let mut trace = SimTrace {
        instance_seed: inst.seed,
        theta_seed: run.theta_seed,
        mode: run.mode,
        uncertainty_scale: run.uncertainty_scale,
        theta,
        states: vec![x.clone()],
        torques: Vec::new(),
        accelerations: Vec::new(),
        solves: Vec::new(),
        outcome: Outcome::Timeout,
        steps: 0,
        time_to_goal: None,
        max_tube: 0.0,
        counters: RunCounters::default(),
        corridor_len: corridor.len(),
    };
    let at_goal = |s: &State| (s.to_vector() - goal.to_vector()).norm() <= run.goal_radius;
    if at_goal(&x) {
        trace.outcome = Outcome::Reached;
        trace.time_to_goal = Some(0);
        return Ok(trace);
    }
    let mut prev_goal = 0;
    let mut solved_once = false;
    'outer: loop {
        let qs: Vec<DVector<f64>> = guess.iter().map(|s| s.q.clone()).collect();
        let assignment = assign_balls(corridor, &qs)?;
        let balls: Vec<_> = assignment.indices.iter().map(|&j| corridor.ball(j)).collect();
        let last = assignment.indices[h];
        let goal_index = select_virtual_goal(corridor, last, goal_tighten);
        if goal_index < prev_goal {
            trace.counters.goal_regressions += 1;
        }
        prev_goal = goal_index;
        let x_goal = State::at_rest(corridor.centers[goal_index].clone());
        let inp = MpcProblemInputs { x_now: &x, x_goal: &x_goal, balls: &balls, ctrl, dynamics: &art.dynamics };
        let sol = build_and_solve(&mpc, &inp)?;
        trace.solves.push(SolveSummary {
            step: trace.steps,
            status: sol.status,
            cost: sol.cost,
            delta0: sol.deltas.first().copied().unwrap_or(f64::NAN),
            goal_index,
            last_ball: last,
        });
        match sol.status {
            Status::Optimal => solved_once = true,
            status => {
                if solved_once {
                    trace.counters.feasibility_losses += 1;
                }
                trace.outcome = if status == Status::Infeasible { Outcome::Infeasible } else { Outcome::SolverError };
                break;
            }
        }
        trace.max_tube = sol.deltas[..=run.n_a].iter().fold(trace.max_tube, |m, d| m.max(*d));
        for i in 0..run.n_a {
            let a = aux_control(ctrl, &x, &sol.x_bar[i], &sol.a_bar[i]);
            let u = model.feedback_linearize(&x, &a)?;
            x = model.step_true(&art.dynamics, &x, &a)?;
            trace.steps += 1;
            trace.states.push(x.clone());
            trace.torques.push(u);
            trace.accelerations.push(a);
            let excess = ctrl.p_norm(&(x.to_vector() - sol.x_bar[i + 1].to_vector())) - sol.deltas[i + 1];
            trace.counters.max_tube_excess = trace.counters.max_tube_excess.max(excess);
            if excess > TUBE_TOL {
                trace.counters.tube_escapes += 1;
            }
            if in_collision(&art.geometry, &inst.scene, &x.q) {
                trace.outcome = Outcome::Collision;
                break 'outer;
            }
            if at_goal(&x) {
                trace.outcome = Outcome::Reached;
                trace.time_to_goal = Some(trace.steps);
                break 'outer;
            }
            if trace.steps >= run.step_cap {
                trace.outcome = Outcome::Timeout;
                break 'outer;
            }
        }
        guess = shift_warm_start(&sol, run.n_a)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub collision: usize,
    pub velocity: usize,
    pub configuration: usize,
    pub torque: usize,
    /// First step index with any violation.
    pub first_violation: Option<usize>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.collision + self.velocity + self.configuration + self.torque == 0
    }

    /// Compact `kind:count` list, empty when clean.
    pub fn flags(&self) -> String {
        let parts: Vec<String> = [
            ("collision", self.collision),
            ("velocity", self.velocity),
            ("configuration", self.configuration),
            ("torque", self.torque),
        ]
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(k, n)| format!("{k}:{n}"))
        .collect();
        parts.join(";")
    }
}

pub const AUDIT_SUBSTEPS: usize = 10;
pub const AUDIT_TOL: f64 = 1e-6;

/// Independent replay checks on a finished trace.
pub fn audit_trace(trace: &SimTrace, scene: &Scene, geom: &ArmGeometry, x_box: &StateBox, torque: &TorqueSet) -> AuditReport {
    let mut rep = AuditReport::default();
    let mark = |rep: &mut AuditReport, k: usize| {
        rep.first_violation = Some(rep.first_violation.map_or(k, |f: usize| f.min(k)));
    };
    for (k, s) in trace.states.iter().enumerate() {
        let hit = match trace.states.get(k + 1) {
            Some(next) => (0..AUDIT_SUBSTEPS).any(|j| {
                let t = j as f64 / AUDIT_SUBSTEPS as f64;
                in_collision(geom, scene, &(&s.q + (&next.q - &s.q) * t))
            }),
            None => in_collision(geom, scene, &s.q),
        };
        if hit {
            rep.collision += 1;
            mark(&mut rep, k);
        }
        if s.qd.iter().zip(&x_box.qd_limit).any(|(v, l)| v.abs() > l + AUDIT_TOL) {
            rep.velocity += 1;
            mark(&mut rep, k);
        }
        if s.q.iter().zip(&x_box.q_limit).any(|(v, l)| v.abs() > l + AUDIT_TOL) {
            rep.configuration += 1;
            mark(&mut rep, k);
        }
    }
    for (k, u) in trace.torques.iter().enumerate() {
        if !torque.contains(u, AUDIT_TOL) {
            rep.torque += 1;
            mark(&mut rep, k);
        }
    }
    rep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance_seed: u64,
    pub theta_seed: u64,
    pub scale: f64,
    pub mode: SimMode,
    pub outcome: String,
    pub steps: usize,
    pub ratio_vs_oracle: Option<f64>,
    pub max_tube: f64,
    pub audit_flags: String,
}

/// Artifacts for one uncertainty scale. `None` controllers mark a failed synthesis.
#[derive(Debug, Clone)]
pub struct ScaleArtifacts {
    pub scale: f64,
    pub artifacts: Option<Artifacts>,
    pub failure: Option<String>,
}

pub fn theta_seed_for(instance_seed: u64, repeat: usize) -> u64 {
    instance_seed.wrapping_mul(1_000_003).wrapping_add(repeat as u64)
}

fn episode_row(inst: &ProblemInstance, corridor: &Corridor, run: &RunConfig, art: &Artifacts) -> (ResultRow, Option<usize>) {
    let base = ResultRow {
        instance_seed: inst.seed,
        theta_seed: run.theta_seed,
        scale: run.uncertainty_scale,
        mode: run.mode,
        outcome: String::new(),
        steps: 0,
        ratio_vs_oracle: None,
        max_tube: 0.0,
        audit_flags: String::new(),
    };
    match run_episode_in(inst, corridor, run, art) {
        Ok(trace) => {
            let audit = audit_trace(&trace, &inst.scene, &art.geometry, &art.x_box, &art.torque);
            let row = ResultRow {
                outcome: trace.outcome.name().to_string(),
                steps: trace.steps,
                max_tube: trace.max_tube,
                audit_flags: audit.flags(),
                ..base
            };
            (row, trace.time_to_goal)
        }
        Err(e) => (ResultRow { outcome: format!("error: {e}"), ..base }, None),
    }
}

/// Every (instance, scale, mode, repeat) episode, plus one oracle run per
/// (instance, scale) as the time reference. Rows come back sorted.
pub fn run_benchmark(
    instances: &[ProblemInstance],
    scales: &[ScaleArtifacts],
    modes: &[SimMode],
    repeats: usize,
    run: &RunConfig,
) -> Vec<ResultRow> {
    struct Job<'a> {
        inst: usize,
        scale: &'a ScaleArtifacts,
        mode: SimMode,
        repeat: usize,
    }
    let mut jobs = Vec::new();
    for (i, _) in instances.iter().enumerate() {
        for scale in scales {
            for &mode in modes {
                let reps = if mode == SimMode::Oracle { 1 } else { repeats };
                for repeat in 0..reps {
                    jobs.push(Job { inst: i, scale, mode, repeat });
                }
            }
        }
    }
    // corridors depend only on the instance and planning settings
    let corridors: Vec<Option<Corridor>> = par::map(instances, |inst| {
        scales.iter().find_map(|s| s.artifacts.as_ref()).and_then(|art| plan_corridor(art, inst).ok())
    });
    let oracle_keys: Vec<(usize, &ScaleArtifacts)> =
        instances.iter().enumerate().flat_map(|(i, _)| scales.iter().map(move |s| (i, s))).collect();
    let oracle_steps: Vec<Option<usize>> = par::map(&oracle_keys, |(i, s)| {
        let art = s.artifacts.as_ref()?;
        let corridor = corridors[*i].as_ref()?;
        let cfg = RunConfig { mode: SimMode::Oracle, uncertainty_scale: s.scale, theta_seed: 0, ..run.clone() };
        run_episode_in(&instances[*i], corridor, &cfg, art).ok()?.time_to_goal
    });
    let oracle_for = |i: usize, scale: f64| {
        oracle_keys.iter().position(|(j, s)| *j == i && s.scale == scale).and_then(|k| oracle_steps[k])
    };
    let mut rows = par::map(&jobs, |job| {
        let inst = &instances[job.inst];
        let theta_seed = if job.mode == SimMode::Oracle { 0 } else { theta_seed_for(inst.seed, job.repeat) };
        let cfg = RunConfig { mode: job.mode, uncertainty_scale: job.scale.scale, theta_seed, ..run.clone() };
        let failed = |outcome: String| ResultRow {
            instance_seed: inst.seed,
            theta_seed,
            scale: job.scale.scale,
            mode: job.mode,
            outcome,
            steps: 0,
            ratio_vs_oracle: None,
            max_tube: 0.0,
            audit_flags: String::new(),
        };
        let Some(art) = job.scale.artifacts.as_ref() else {
            return failed("synthesis_failed".into());
        };
        if job.mode == SimMode::Rigid && art.rigid.is_none() {
            return failed("synthesis_failed".into());
        }
        let Some(corridor) = corridors[job.inst].as_ref() else {
            return failed("planning_failed".into());
        };
        let (mut row, ttg) = episode_row(inst, corridor, &cfg, art);
        if let (Some(t), Some(o)) = (ttg, oracle_for(job.inst, job.scale.scale)) {
            row.ratio_vs_oracle = Some(if o == 0 { 1.0 } else { t as f64 / o as f64 });
        }
        row
    });
    rows.sort_by(|a, b| {
        (a.scale, a.mode, a.instance_seed, a.theta_seed)
            .partial_cmp(&(b.scale, b.mode, b.instance_seed, b.theta_seed))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub scale: f64,
    pub mode: SimMode,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_ratio: Option<f64>,
    /// Two standard deviations of the ratio over successful runs.
    pub ratio_band: Option<f64>,
}

/// Per (scale, mode) aggregation; success means reached with a clean audit.
pub fn summarize(rows: &[ResultRow]) -> Vec<ModeSummary> {
    let mut keys: Vec<(f64, SimMode)> = rows.iter().map(|r| (r.scale, r.mode)).collect();
    keys.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    keys.dedup();
    keys.into_iter()
        .map(|(scale, mode)| {
            let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.scale == scale && r.mode == mode).collect();
            let ok: Vec<&&ResultRow> = sel.iter().filter(|r| r.outcome == "reached" && r.audit_flags.is_empty()).collect();
            let ratios: Vec<f64> = ok.iter().filter_map(|r| r.ratio_vs_oracle).collect();
            let (mean, band) = if ratios.is_empty() {
                (None, None)
            } else {
                let m = ratios.iter().sum::<f64>() / ratios.len() as f64;
                let var = ratios.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / ratios.len() as f64;
                (Some(m), Some(2.0 * var.sqrt()))
            };
            ModeSummary {
                scale,
                mode,
                runs: sel.len(),
                successes: ok.len(),
                success_rate: if sel.is_empty() { 0.0 } else { ok.len() as f64 / sel.len() as f64 },
                mean_ratio: mean,
                ratio_band: band,
            }
        })
        .collect()
}
