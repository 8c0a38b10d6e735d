//! Project configuration, versioned artifact files and the offline pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmParams, Discretization, DiscreteDynamics, StateBox, UncertaintySet};
use crate::error::{Error, Result};
use crate::error_bounds::{
    certify_beta, convexify_accel_set, estimate_constants, AccelSet, BetaReport, ConvexifyOptions, ErrorBoundConstants,
    TorqueSet,
};
use crate::geometry::{ArmGeometry, Scene};
use crate::mpc::{MpcConfig, MpcMode};
use crate::sim::{Artifacts, PlanningConfig, RunConfig, SceneOptions};
use crate::synthesis::{best_candidate, grid_controllers, default_rho_grid, rank_candidates, SynthesisConfig, TubeController, TubeMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub n_samples: usize,
    pub margin: f64,
    pub n_validation: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { n_samples: 100_000, margin: 1.1, n_validation: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub arm: ArmParams,
    pub link_radius: f64,
    /// Relative bound on link masses and damping at scale 1.
    pub relative_uncertainty: f64,
    pub torque_limits: Vec<f64>,
    pub state_box: StateBox,
    pub dt: f64,
    pub discretization: Discretization,
    pub estimate: EstimateOptions,
    pub convexify: ConvexifyOptions,
    pub rho_grid: Vec<f64>,
    pub mpc: MpcConfig,
    pub run: RunConfig,
    pub planning: PlanningConfig,
    pub scene_generator: SceneOptions,
    /// Fixed scene file; when absent every instance seed draws its own scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    /// Where synth writes and run/bench read artifacts.
    pub artifact_dir: PathBuf,
}

impl ProjectConfig {
    pub fn two_link() -> Self {
        let arm = ArmParams::two_link();
        let dof = arm.dof();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            link_radius: 0.03,
            relative_uncertainty: 0.05,
            torque_limits: vec![6.0, 2.0],
            state_box: StateBox::standard(dof),
            dt: 0.01,
            discretization: Discretization::ZeroOrderHold,
            estimate: EstimateOptions::default(),
            convexify: ConvexifyOptions::default(),
            rho_grid: default_rho_grid(),
            mpc: MpcConfig::standard(dof, MpcMode::Flexible),
            run: RunConfig::default(),
            planning: PlanningConfig::default(),
            scene_generator: SceneOptions::default(),
            scene: None,
            artifact_dir: PathBuf::from("artifacts"),
            arm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} does not match {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.arm.validate()?;
        let n = self.arm.dof();
        if self.torque_limits.len() != n || self.state_box.dof() != n {
            return Err(Error::Config("torque limits and state box must match the arm".into()));
        }
        if !(self.dt > 0.0) || !(self.link_radius >= 0.0) || !(self.relative_uncertainty >= 0.0) {
            return Err(Error::Config("dt, link_radius and relative_uncertainty must be nonnegative (dt positive)".into()));
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::Config("rho_grid entries must lie in (0, 1)".into()));
        }
        if self.estimate.n_samples < 10_000 || self.estimate.n_validation == 0 || !(self.estimate.margin >= 1.0) {
            return Err(Error::Config("estimate needs n_samples >= 1e4, n_validation > 0 and margin >= 1".into()));
        }
        self.mpc.validate(n)?;
        if self.run.n_a == 0 || self.run.n_a > self.mpc.horizon {
            return Err(Error::Config("run.n_a must lie in 1..=horizon".into()));
        }
        self.geometry().validate()?;
        Ok(())
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.artifact_dir.is_relative() {
            cfg.artifact_dir = base.join(&cfg.artifact_dir);
        }
        if let Some(scene) = cfg.scene.as_mut() {
            if scene.is_relative() {
                *scene = base.join(&*scene);
            }
            if !scene.exists() {
                return Err(Error::Config(format!("scene file {} does not exist", scene.display())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn family(&self, scale: f64) -> UncertaintySet {
        UncertaintySet::mass_and_damping(self.arm.dof(), self.relative_uncertainty).scaled(scale)
    }

    pub fn dynamics(&self) -> DiscreteDynamics {
        DiscreteDynamics::double_integrator(self.arm.dof(), self.dt, self.discretization)
    }

    pub fn geometry(&self) -> ArmGeometry {
        ArmGeometry::from_params(&self.arm, self.link_radius)
    }

    pub fn torque(&self) -> TorqueSet {
        TorqueSet { torque_limits: self.torque_limits.clone() }
    }

    pub fn load_scene(&self) -> Result<Option<Scene>> {
        let Some(path) = &self.scene else { return Ok(None) };
        let scene: Scene = read_artifact(path, "scene")?;
        scene.validate()?;
        Ok(Some(scene))
    }

    pub fn artifact_path(&self, name: &str, scale: f64) -> PathBuf {
        self.artifact_dir.join(format!("scale_{scale}")).join(name)
    }
}

/// Writes `payload` as a JSON object tagged with `schema_version` and `kind`.
pub fn write_artifact<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let mut value = serde_json::to_value(payload)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument(format!("{kind} does not serialize to an object")))?;
    obj.insert("schema_version".into(), SCHEMA_VERSION.into());
    obj.insert("kind".into(), kind.into());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_artifact(&text, kind).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Like [`read_artifact`] for an artifact already in memory.
pub fn parse_artifact<T: DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Config("artifact is not a JSON object".into()))?;
    match obj.remove("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        other => return Err(Error::Config(format!("schema_version {other:?} does not match {SCHEMA_VERSION}"))),
    }
    match obj.remove("kind") {
        Some(serde_json::Value::String(k)) if k == kind => {}
        other => return Err(Error::Config(format!("expected kind {kind:?}, found {other:?}"))),
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstsArtifact {
    pub scale: f64,
    pub constants: ErrorBoundConstants,
    pub validation: BetaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelArtifact {
    pub torque: TorqueSet,
    pub accel_set: AccelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub rho: f64,
    pub score: Option<f64>,
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerArtifact {
    pub controller: TubeController,
    pub contraction_residual: f64,
    pub candidates: Vec<CandidateRecord>,
}

impl ControllerArtifact {
    /// Structural validation plus the constants digest check.
    pub fn check(&self) -> Result<()> {
        TubeController::from_json(&self.controller.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub consts: ConstsArtifact,
    pub accel: AccelArtifact,
    pub flexible: ControllerArtifact,
    pub rigid: std::result::Result<ControllerArtifact, String>,
}

/// Constants, acceleration set and both controllers at one uncertainty scale.
pub fn synthesize_all(cfg: &ProjectConfig, scale: f64) -> Result<SynthOutputs> {
    cfg.validate()?;
    if !(scale >= 0.0) {
        return Err(Error::InvalidArgument("scale must be nonnegative".into()));
    }
    let family = cfg.family(scale);
    let dynamics = cfg.dynamics();
    let accel_set = convexify_accel_set(&cfg.arm, &cfg.torque(), &cfg.state_box, &cfg.convexify)?;
    let constants =
        estimate_constants(&cfg.arm, &family, &cfg.state_box, cfg.estimate.n_samples, cfg.estimate.margin, cfg.seed)?;
    let validation = certify_beta(
        &constants,
        &cfg.arm,
        &family,
        &cfg.state_box,
        &accel_set,
        cfg.estimate.n_validation,
        cfg.seed.wrapping_add(1),
    )?;
    let mut syn = SynthesisConfig::standard(&dynamics, &constants, &cfg.state_box, &accel_set);
    syn.rho_grid = cfg.rho_grid.clone();
    syn.validate(&dynamics)?;
    let grid = grid_controllers(&syn, &dynamics, &constants);
    let pick = |mode: TubeMode| -> Result<ControllerArtifact> {
        let cands = rank_candidates(&grid, &dynamics, mode);
        let controller = best_candidate(&cands)?.with_provenance(cfg.seed, scale);
        Ok(ControllerArtifact {
            contraction_residual: controller.contraction_residual(&dynamics),
            candidates: cands
                .iter()
                .map(|c| CandidateRecord {
                    rho: c.rho,
                    score: c.score.is_finite().then_some(c.score),
                    rejected: c.rejected.clone(),
                })
                .collect(),
            controller,
        })
    };
    let flexible = pick(TubeMode::Flexible)?;
    let rigid = pick(TubeMode::Rigid).map_err(|e| e.to_string());
    Ok(SynthOutputs {
        consts: ConstsArtifact { scale, constants, validation },
        accel: AccelArtifact { torque: cfg.torque(), accel_set },
        flexible,
        rigid,
    })
}

pub const CONSTS_FILE: &str = "consts.json";
pub const ACCEL_FILE: &str = "accel_set.json";
pub const CONTROLLER_FILE: &str = "controller.json";
pub const RIGID_FILE: &str = "controller_rigid.json";

/// Writes the synthesis outputs under `artifact_dir/scale_<s>/`; a failed
/// rigid synthesis removes any stale rigid file.
pub fn write_outputs(cfg: &ProjectConfig, out: &SynthOutputs) -> Result<Vec<PathBuf>> {
    let scale = out.consts.scale;
    let mut written = Vec::new();
    let p = cfg.artifact_path(CONSTS_FILE, scale);
    write_artifact(&p, "error_bound_constants", &out.consts)?;
    written.push(p);
    let p = cfg.artifact_path(ACCEL_FILE, scale);
    write_artifact(&p, "accel_set", &out.accel)?;
    written.push(p);
    let p = cfg.artifact_path(CONTROLLER_FILE, scale);
    write_artifact(&p, "tube_controller", &out.flexible)?;
    written.push(p);
    let p = cfg.artifact_path(RIGID_FILE, scale);
    match &out.rigid {
        Ok(r) => {
            write_artifact(&p, "tube_controller", r)?;
            written.push(p);
        }
        Err(_) => {
            if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    Ok(written)
}

/// Loads the artifacts written by `write_outputs` for `scale`.
pub fn load_artifacts(cfg: &ProjectConfig, scale: f64) -> Result<Artifacts> {
    let consts: ConstsArtifact = read_artifact(&cfg.artifact_path(CONSTS_FILE, scale), "error_bound_constants")?;
    let flexible: ControllerArtifact = read_artifact(&cfg.artifact_path(CONTROLLER_FILE, scale), "tube_controller")?;
    let rigid_path = cfg.artifact_path(RIGID_FILE, scale);
    let rigid = if rigid_path.exists() { Some(read_artifact(&rigid_path, "tube_controller")?) } else { None };
    checked_artifacts(cfg, scale, &consts, flexible, rigid)
}

/// Builds run artifacts from in-memory JSON (consts, controller and optional rigid controller).
pub fn artifacts_from_json(cfg: &ProjectConfig, consts: &str, controller: &str, rigid: Option<&str>) -> Result<Artifacts> {
    let consts: ConstsArtifact = parse_artifact(consts, "error_bound_constants")?;
    let flexible: ControllerArtifact = parse_artifact(controller, "tube_controller")?;
    let rigid = rigid.map(|r| parse_artifact(r, "tube_controller")).transpose()?;
    checked_artifacts(cfg, consts.scale, &consts, flexible, rigid)
}

fn checked_artifacts(
    cfg: &ProjectConfig,
    scale: f64,
    consts: &ConstsArtifact,
    flexible: ControllerArtifact,
    rigid: Option<ControllerArtifact>,
) -> Result<Artifacts> {
    flexible.check()?;
    if flexible.controller.consts != consts.constants {
        return Err(Error::Config("controller was synthesized from different constants".into()));
    }
    let rigid = match rigid {
        Some(r) => {
            r.check()?;
            Some(r.controller)
        }
        None => None,
    };
    Ok(assemble(cfg, scale, flexible.controller, rigid))
}

pub fn artifacts_from_outputs(cfg: &ProjectConfig, out: &SynthOutputs) -> Artifacts {
    let rigid = out.rigid.as_ref().ok().map(|r| r.controller.clone());
    assemble(cfg, out.consts.scale, out.flexible.controller.clone(), rigid)
}

fn assemble(cfg: &ProjectConfig, scale: f64, flexible: TubeController, rigid: Option<TubeController>) -> Artifacts {
    Artifacts {
        params: cfg.arm.clone(),
        family: cfg.family(scale),
        geometry: cfg.geometry(),
        dynamics: cfg.dynamics(),
        x_box: cfg.state_box.clone(),
        torque: cfg.torque(),
        flexible,
        rigid,
        mpc: cfg.mpc.clone(),
        planning: cfg.planning.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ProjectConfig::two_link();
        cfg.validate().unwrap();
        let back: ProjectConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let mut cfg = ProjectConfig::two_link();
        cfg.schema_version = 99;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn artifact_kind_and_version_checked() {
        let dir = std::env::temp_dir().join(format!("tube-mpc-artifact-{}", std::process::id()));
        let path = dir.join("a.json");
        let payload = AccelArtifact { torque: TorqueSet { torque_limits: vec![1.0] }, accel_set: AccelSet::symmetric(2.0, 1) };
        write_artifact(&path, "accel_set", &payload).unwrap();
        let back: AccelArtifact = read_artifact(&path, "accel_set").unwrap();
        assert_eq!(back, payload);
        assert!(read_artifact::<AccelArtifact>(&path, "scene").is_err());
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(read_artifact::<AccelArtifact>(&path, "accel_set").is_err());
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert!(matches!(ProjectConfig::load(Path::new("/nonexistent/cfg.json")), Err(Error::Config(_))));
    }
}
