//! WebAssembly front end for the two-link demo page.
//!
//! All operations take and return JSON strings so the page needs no glue
//! beyond `JSON.parse`. The controller is synthesized offline (the browser
//! build has no SDP solver) and embedded from `assets/`.

use nalgebra::DVector;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use tube_mpc::config::{artifacts_from_json, ProjectConfig};
use tube_mpc::corridor::Corridor;
use tube_mpc::geometry::{scdf, Point};
use tube_mpc::sim::{audit_trace, generate_instance, plan_corridor, run_episode_in, Artifacts, ProblemInstance, RunConfig, SimMode};

const CONSTS: &str = include_str!("../assets/consts.json");
const CONTROLLER: &str = include_str!("../assets/controller.json");
const RIGID: &str = include_str!("../assets/controller_rigid.json");

/// Corridor balls sent to the page are thinned to at most this many.
const MAX_BALLS_SHOWN: usize = 400;

pub struct Demo {
    cfg: ProjectConfig,
    art: Artifacts,
}

#[derive(Serialize)]
struct InstanceView<'a> {
    instance: &'a ProblemInstance,
    link_lengths: &'a [f64],
    link_radii: &'a [f64],
    start_arm: Vec<Point>,
    goal_arm: Vec<Point>,
}

#[derive(Serialize)]
struct CorridorView {
    balls: usize,
    centers: Vec<[f64; 2]>,
    radii: Vec<f64>,
}

#[derive(Serialize)]
struct EpisodeView {
    outcome: &'static str,
    steps: usize,
    max_tube: f64,
    audit: String,
    q: Vec<[f64; 2]>,
    arm: Vec<Vec<Point>>,
    torque_use: Vec<f64>,
    corridor: CorridorView,
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn q2(v: &DVector<f64>) -> [f64; 2] {
    [v[0], v[1]]
}

impl Demo {
    pub fn new() -> Result<Self, String> {
        let cfg = ProjectConfig::two_link();
        let art = artifacts_from_json(&cfg, CONSTS, CONTROLLER, Some(RIGID)).map_err(err)?;
        Ok(Self { cfg, art })
    }

    pub fn uncertainty_scale(&self) -> f64 {
        self.art.family.scale
    }

    fn parse_instance(json: &str) -> Result<ProblemInstance, String> {
        serde_json::from_str(json).map_err(err)
    }

    /// A random scene with start and goal the planner can connect.
    pub fn new_instance(&self, seed: u64) -> Result<String, String> {
        let inst = generate_instance(&self.art.geometry, None, &self.cfg.scene_generator, &self.cfg.planning, seed)
            .map_err(err)?;
        let g = &self.art.geometry;
        let view = InstanceView {
            instance: &inst,
            link_lengths: &g.link_lengths,
            link_radii: &g.link_radii,
            start_arm: g.joint_positions(&inst.q_start),
            goal_arm: g.joint_positions(&inst.q_goal),
        };
        serde_json::to_string(&view).map_err(err)
    }

    /// Signed configuration distance sampled on an `n x n` grid over
    /// `[-pi, pi]^2`, row-major with `q2` along rows.
    pub fn scdf_field(&self, instance: &str, n: usize) -> Result<Vec<f64>, String> {
        if !(2..=400).contains(&n) {
            return Err("grid size must lie in 2..=400".into());
        }
        let inst = Self::parse_instance(instance)?;
        let pi = std::f64::consts::PI;
        let at = |k: usize| -pi + 2.0 * pi * k as f64 / (n - 1) as f64;
        let mut out = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                out.push(scdf(&self.art.geometry, &inst.scene, &DVector::from_vec(vec![at(i), at(j)])));
            }
        }
        Ok(out)
    }

    fn corridor_view(corridor: &Corridor) -> CorridorView {
        let stride = corridor.len().div_ceil(MAX_BALLS_SHOWN).max(1);
        let mut idx: Vec<usize> = (0..corridor.len()).step_by(stride).collect();
        if idx.last() != Some(&(corridor.len() - 1)) {
            idx.push(corridor.len() - 1);
        }
        CorridorView {
            balls: corridor.len(),
            centers: idx.iter().map(|&i| q2(&corridor.centers[i])).collect(),
            radii: idx.iter().map(|&i| corridor.radii[i]).collect(),
        }
    }

    pub fn plan(&self, instance: &str) -> Result<String, String> {
        let inst = Self::parse_instance(instance)?;
        let corridor = plan_corridor(&self.art, &inst).map_err(err)?;
        serde_json::to_string(&Self::corridor_view(&corridor)).map_err(err)
    }

    /// Runs one closed-loop episode. `mode` is flexible, rigid, nominal or oracle.
    pub fn simulate(&self, instance: &str, mode: &str, theta_seed: u64) -> Result<String, String> {
        let inst = Self::parse_instance(instance)?;
        let mode = SimMode::parse(mode).map_err(err)?;
        let corridor = plan_corridor(&self.art, &inst).map_err(err)?;
        let run = RunConfig { mode, uncertainty_scale: self.uncertainty_scale(), theta_seed, ..self.cfg.run.clone() };
        let trace = run_episode_in(&inst, &corridor, &run, &self.art).map_err(err)?;
        let audit = audit_trace(&trace, &inst.scene, &self.art.geometry, &self.art.x_box, &self.art.torque);
        let limits = &self.cfg.torque_limits;
        let view = EpisodeView {
            outcome: trace.outcome.name(),
            steps: trace.steps,
            max_tube: trace.max_tube,
            audit: if audit.clean() { "clean".into() } else { audit.flags() },
            q: trace.states.iter().map(|s| q2(&s.q)).collect(),
            arm: trace.states.iter().map(|s| self.art.geometry.joint_positions(&s.q)).collect(),
            torque_use: trace
                .torques
                .iter()
                .map(|u| u.iter().zip(limits).map(|(t, l)| (t / l).abs()).fold(0.0, f64::max))
                .collect(),
            corridor: Self::corridor_view(&corridor),
        };
        serde_json::to_string(&view).map_err(err)
    }
}

#[wasm_bindgen(js_name = Demo)]
pub struct WasmDemo(Demo);

#[wasm_bindgen(js_class = Demo)]
impl WasmDemo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<WasmDemo, JsError> {
        Demo::new().map(WasmDemo).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = newInstance)]
    pub fn new_instance(&self, seed: u32) -> Result<String, JsError> {
        self.0.new_instance(seed as u64).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = scdfField)]
    pub fn scdf_field(&self, instance: &str, n: usize) -> Result<Vec<f64>, JsError> {
        self.0.scdf_field(instance, n).map_err(|e| JsError::new(&e))
    }

    pub fn plan(&self, instance: &str) -> Result<String, JsError> {
        self.0.plan(instance).map_err(|e| JsError::new(&e))
    }

    pub fn simulate(&self, instance: &str, mode: &str, theta_seed: u32) -> Result<String, JsError> {
        self.0.simulate(instance, mode, theta_seed as u64).map_err(|e| JsError::new(&e))
    }
}
