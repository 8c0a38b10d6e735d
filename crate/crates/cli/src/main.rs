use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tube_mpc::config::{
    artifacts_from_outputs, load_artifacts, read_artifact, synthesize_all, write_artifact, write_outputs, ProjectConfig,
};
use tube_mpc::error::Error;
use tube_mpc::par;
use tube_mpc::sim::{
    audit_trace, generate_instance, run_benchmark, run_episode, summarize, ProblemInstance, ResultRow, RunConfig,
    ScaleArtifacts, SimMode, SimTrace,
};

#[derive(Parser)]
#[command(name = "tube-mpc", version, about = "Robust tube MPC for planar arms in cluttered scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Project configuration (JSON). The built-in two-link setup is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; for synth it replaces the configured artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate error bounds, convexify the acceleration set and synthesize both tube controllers.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Overrides the configured global seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one closed-loop episode and write its trace.
    Run {
        #[command(flatten)]
        common: Common,
        /// Instance seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value = "flexible")]
        mode: String,
        /// Seed of the parameter draw; defaults to the instance seed.
        #[arg(long)]
        theta_seed: Option<u64>,
    },
    /// Sweep instances x scales x modes and write results.csv and plotdata.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated uncertainty scales.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        scales: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "flexible,rigid,nominal,oracle")]
        modes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        /// Parameter draws per instance.
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        /// First instance seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthesize artifacts for scales that have none on disk.
        #[arg(long)]
        synth_missing: bool,
    },
    /// Replay a trace file through the independent safety audit.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write the built-in configuration as a starting point.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit codes: 0 success, 1 domain failure, 2 usage or configuration error.
enum Failure {
    Domain(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Io(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Domain(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize, Deserialize)]
struct TraceFile {
    instance: ProblemInstance,
    trace: SimTrace,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common, scale, seed } => par::with_threads(common.jobs, || cmd_synth(&common, scale, seed)),
        Command::Run { common, seed, scale, mode, theta_seed } => {
            par::with_threads(common.jobs, || cmd_run(&common, seed, scale, &mode, theta_seed))
        }
        Command::Bench { common, scales, modes, instances, repeats, seed, synth_missing } => par::with_threads(common.jobs, || {
            cmd_bench(&common, &scales, &modes, instances, repeats, seed, synth_missing)
        }),
        Command::Audit { common, trace } => cmd_audit(&common, &trace),
        Command::InitConfig { out } => cmd_init(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<ProjectConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => ProjectConfig::load(path)?,
        None => ProjectConfig::two_link(),
    };
    Ok(cfg)
}

fn cmd_init(out: &Path) -> CmdResult {
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(out, ProjectConfig::two_link().to_json()? + "\n").map_err(Error::from)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_synth(common: &Common, scale: f64, seed: Option<u64>) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(out) = &common.out {
        cfg.artifact_dir = out.clone();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = synthesize_all(&cfg, scale).map_err(|e| match e {
        Error::NoValidController | Error::SynthesisInfeasible { .. } | Error::IllConditioned { .. } => {
            Failure::Domain(format!("{e}; no controller at scale {scale}, try a lower --scale"))
        }
        other => other.into(),
    })?;
    let c = &out.consts.constants;
    println!("constants a={:.6} b={:.6} c={:.6} (samples {})", c.a, c.b, c.c, c.samples_used);
    let v = &out.consts.validation;
    println!(
        "beta validation: {} violations in {} draws, max ratio {:.4} -> {}",
        v.violations,
        v.samples,
        v.max_ratio,
        if v.passed { "pass" } else { "FAIL" }
    );
    println!("accel box halfwidth {:?}", out.accel.accel_set.box_halfwidth);
    let f = &out.flexible;
    println!(
        "flexible: rho={:.4} rho_tilde={:.4} delta_f={:?} contraction residual {:.3e} -> {}",
        f.controller.rho,
        f.controller.rho_tilde,
        f.controller.delta_f,
        f.contraction_residual,
        if f.contraction_residual >= -1e-8 { "pass" } else { "FAIL" }
    );
    match &out.rigid {
        Ok(r) => println!("rigid: rho={:.4} delta_bar={:.4}", r.controller.rho, r.controller.delta_bar),
        Err(e) => println!("rigid: synthesis failed ({e})"),
    }
    for p in write_outputs(&cfg, &out)? {
        println!("wrote {}", p.display());
    }
    if !v.passed || f.contraction_residual < -1e-8 {
        return Err(Failure::Domain("artifacts failed their embedded validation".into()));
    }
    Ok(())
}

fn trace_hash(json: &str) -> String {
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn cmd_run(common: &Common, seed: u64, scale: f64, mode: &str, theta_seed: Option<u64>) -> CmdResult {
    let cfg = load_config(common)?;
    let mode = SimMode::parse(mode)?;
    let art = load_artifacts(&cfg, scale).map_err(|e| Failure::Usage(format!("{e} (run `tube-mpc synth --scale {scale}` first)")))?;
    let scene = cfg.load_scene()?;
    let inst = generate_instance(&cfg.geometry(), scene.as_ref(), &cfg.scene_generator, &cfg.planning, seed)?;
    let run = RunConfig { mode, uncertainty_scale: scale, theta_seed: theta_seed.unwrap_or(seed), ..cfg.run.clone() };
    let trace = run_episode(&inst, &run, &art)?;
    let audit = audit_trace(&trace, &inst.scene, &art.geometry, &art.x_box, &art.torque);
    let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let path = out_dir.join(format!("trace_{}_{}_{}.json", mode.name(), scale, seed));
    let file = TraceFile { instance: inst, trace };
    write_artifact(&path, "trace", &file)?;
    let hash = trace_hash(&file.trace.to_json()?);
    println!(
        "outcome={} steps={} max_delta={:.6} audit={} trace={} sha256={}",
        file.trace.outcome.name(),
        file.trace.steps,
        file.trace.max_tube,
        if audit.clean() { "clean".to_string() } else { audit.flags() },
        path.display(),
        hash
    );
    if file.trace.outcome != tube_mpc::sim::Outcome::Reached || !audit.clean() {
        return Err(Failure::Domain(format!("episode ended {}", file.trace.outcome.name())));
    }
    Ok(())
}

fn cmd_audit(common: &Common, trace: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    let file: TraceFile = read_artifact(trace, "trace")?;
    let rep = audit_trace(&file.trace, &file.instance.scene, &cfg.geometry(), &cfg.state_box, &cfg.torque());
    println!("{}", serde_json::to_string_pretty(&rep).map_err(Error::from)?);
    if rep.clean() {
        println!("clean");
        Ok(())
    } else {
        Err(Failure::Domain(format!("violations: {}", rep.flags())))
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    instance_seed: u64,
    theta_seed: u64,
    scale: f64,
    mode: &'a str,
    outcome: &'a str,
    steps: usize,
    ratio_vs_oracle: Option<f64>,
    max_tube: f64,
    audit_flags: &'a str,
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<usize, Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Usage(e.to_string()))?;
    for r in rows {
        w.serialize(CsvRow {
            instance_seed: r.instance_seed,
            theta_seed: r.theta_seed,
            scale: r.scale,
            mode: r.mode.name(),
            outcome: &r.outcome,
            steps: r.steps,
            ratio_vs_oracle: r.ratio_vs_oracle,
            max_tube: r.max_tube,
            audit_flags: &r.audit_flags,
        })
        .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Usage(e.to_string()))?;
    drop(w);
    let failed = rows.iter().filter(|r| r.outcome != "reached" || !r.audit_flags.is_empty()).count();
    if failed > 0 {
        let mut text = fs::read_to_string(path).map_err(Error::from)?;
        text.push_str(&format!("# partial: {failed} of {} episodes did not reach the goal cleanly\n", rows.len()));
        fs::write(path, text).map_err(Error::from)?;
    }
    Ok(failed)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per scale with success rate, mean ratio and 2-sigma band per mode.
fn write_plotdata(path: &Path, rows: &[ResultRow], modes: &[SimMode], scales: &[f64]) -> Result<(), Failure> {
    let summary = summarize(rows);
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut header = vec!["scale".to_string()];
    for m in modes {
        for col in ["success_rate", "mean_ratio", "ratio_band"] {
            header.push(format!("{}_{col}", m.name()));
        }
    }
    w.write_record(&header).map_err(|e| Failure::Usage(e.to_string()))?;
    for &scale in scales {
        let mut rec = vec![format!("{scale}")];
        for m in modes {
            match summary.iter().find(|s| s.scale == scale && s.mode == *m) {
                Some(s) => {
                    rec.push(format!("{:.6}", s.success_rate));
                    rec.push(fmt_opt(s.mean_ratio));
                    rec.push(fmt_opt(s.ratio_band));
                }
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(())
}

fn cmd_bench(
    common: &Common,
    scales: &[f64],
    modes: &[String],
    n_instances: usize,
    repeats: usize,
    seed: u64,
    synth_missing: bool,
) -> CmdResult {
    if scales.is_empty() {
        return Err(Failure::Usage("--scales needs at least one value".into()));
    }
    if modes.is_empty() || n_instances == 0 || repeats == 0 {
        return Err(Failure::Usage("--modes, --instances and --repeats must be nonempty".into()));
    }
    let cfg = load_config(common)?;
    let modes: Vec<SimMode> = modes.iter().map(|m| SimMode::parse(m)).collect::<Result<_, _>>()?;
    let mut per_scale = Vec::new();
    for &scale in scales {
        let loaded = match load_artifacts(&cfg, scale) {
            Ok(a) => ScaleArtifacts { scale, artifacts: Some(a), failure: None },
            Err(e) if !synth_missing => {
                return Err(Failure::Usage(format!("scale {scale}: {e} (synthesize first or pass --synth-missing)")))
            }
            Err(_) => match synthesize_all(&cfg, scale) {
                Ok(out) => {
                    write_outputs(&cfg, &out)?;
                    ScaleArtifacts { scale, artifacts: Some(artifacts_from_outputs(&cfg, &out)), failure: None }
                }
                Err(e) => {
                    eprintln!("scale {scale}: synthesis failed ({e})");
                    ScaleArtifacts { scale, artifacts: None, failure: Some(e.to_string()) }
                }
            },
        };
        per_scale.push(loaded);
    }
    let scene = cfg.load_scene()?;
    let geom = cfg.geometry();
    let instances: Vec<ProblemInstance> = (0..n_instances as u64)
        .map(|k| generate_instance(&geom, scene.as_ref(), &cfg.scene_generator, &cfg.planning, seed + k))
        .collect::<Result<_, _>>()?;
    let rows = run_benchmark(&instances, &per_scale, &modes, repeats, &cfg.run);
    let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let results = out_dir.join("results.csv");
    let failed = write_results(&results, &rows)?;
    let plot = out_dir.join("plotdata.csv");
    write_plotdata(&plot, &rows, &modes, scales)?;
    for s in summarize(&rows) {
        println!(
            "scale {:<5} {:<9} success {}/{} mean ratio {} band {}",
            s.scale,
            s.mode.name(),
            s.successes,
            s.runs,
            fmt_opt(s.mean_ratio),
            fmt_opt(s.ratio_band)
        );
    }
    println!("wrote {} and {} ({failed} of {} episodes unsuccessful)", results.display(), plot.display(), rows.len());
    Ok(())
}
