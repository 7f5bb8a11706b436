//! Command-line front end: config ingestion, experiment orchestration, and
//! table emission for the library's probability routes and oracles.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::path::PathBuf;
use std::time::Instant;

use tasep::limits::{f_limit, scaling_map, LimitKind, LimitObservation, RayContourPlan};
use tasep::multipoint::{
    flat_probability, height_to_particle, joint_probability, signed_probability, ContourPlan,
    Observation, ObservationSet,
};
use tasep::periodic::{periodic_probability, PeriodicParams, PeriodicPlan};
use tasep::simulate::{ctmc_exact, mc_joint, poisson_joint, MCConfig};
use tasep::symfunc::ParticleConfig;
use tasep::{Error as TasepError, Provenance};

mod verify;

#[derive(Parser)]
#[command(
    name = "tasep",
    about = "Finite-time and limiting multi-point distributions of TASEP, with stochastic and exact-chain cross-checks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to a JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Tolerance override for oracle computations.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Contour node count override (power of two).
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Random seed for sampling commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sample count for Monte Carlo commands.
    #[arg(long, global = true)]
    samples: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-time joint probability P(all x_{k_l}(t_l) >= a_l).
    Prob,
    /// Mixed-inequality probability with an outside set of levels.
    Signed,
    /// Ring-geometry probability via the Bethe-root route.
    Periodic,
    /// Limiting step/flat distribution value.
    Limit,
    /// Monte Carlo estimate of the joint probability.
    Mc,
    /// Exact oracle value (uniformized chain, or Poisson closed form for N=1).
    Oracle,
    /// Run the identity and cross-validation suite; exit 3 on any failure.
    Verify,
    /// Finite-time values along a doubling time ladder against the limit.
    Converge,
}

/// JSON run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// "step" | "flat" | explicit positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<InitialCondition>,
    /// Observation triples in particle coordinates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    observations: Vec<Observation>,
    /// Observation triples in height-function coordinates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    height_observations: Vec<HeightObservation>,
    /// Scaled observation points for limit commands.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    limit_points: Vec<LimitPoint>,
    /// "step" | "flat" for limit and converge commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    /// Ring period for the periodic command (also used by mc).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    period: Option<i64>,
    /// 1-based levels whose events flip to strict lower bounds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outside: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contour: Option<ContourConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    samples: Option<u64>,
    /// Time horizons for the converge command.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    t_ladder: Vec<f64>,
    /// Oracle selector: "ctmc" (default) | "poisson".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum InitialCondition {
    Step { n: usize },
    Flat { n: usize },
    Explicit { positions: Vec<i64> },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct HeightObservation {
    site: i64,
    height: i64,
    t: f64,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
struct LimitPoint {
    x: f64,
    tau: f64,
    h: f64,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ContourConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
}

/// One emitted record: every number carries its error estimate and origin.
#[derive(Debug, Serialize)]
struct OutputRecord {
    config_hash: String,
    command: String,
    value: f64,
    imag_residue: f64,
    error_estimate: f64,
    provenance: Provenance,
    warnings: Vec<String>,
    plan: serde_json::Value,
    extra: serde_json::Value,
}

const EXIT_CONFIG: i32 = 2;
const EXIT_QUALITY: i32 = 3;
const EXIT_UNSUPPORTED: i32 = 4;

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn fail(code: i32, message: &str) -> i32 {
    let record = serde_json::json!({ "error": message, "exit_code": code });
    eprintln!("{}", serde_json::to_string_pretty(&record).unwrap());
    code
}

fn exit_code_for(err: &TasepError) -> i32 {
    match err {
        TasepError::Invalid(_) => EXIT_CONFIG,
        TasepError::Unsupported(_) => EXIT_UNSUPPORTED,
        _ => EXIT_QUALITY,
    }
}

fn run(cli: Cli) -> i32 {
    let mut config: RunConfig = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match serde_json::from_str(&text) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_CONFIG, &format!("config parse error: {e}")),
            },
            Err(e) => return fail(EXIT_CONFIG, &format!("cannot read config: {e}")),
        },
        None => RunConfig::default(),
    };
    if let Some(t) = cli.tol {
        config.tol = Some(t);
    }
    if let Some(s) = cli.seed {
        config.seed = Some(s);
    }
    if let Some(s) = cli.samples {
        config.samples = Some(s);
    }
    if let Some(n) = cli.nodes {
        config.contour.get_or_insert_with(ContourConfig::default).nodes = Some(n);
    }
    let hash = config_hash(&config);

    if matches!(cli.command, Command::Verify) {
        return verify::run_verify(&hash, config.seed.unwrap_or(1), &cli);
    }

    let started = Instant::now();
    let result = match cli.command {
        Command::Prob => cmd_prob(&config),
        Command::Signed => cmd_signed(&config),
        Command::Periodic => cmd_periodic(&config),
        Command::Limit => cmd_limit(&config),
        Command::Mc => cmd_mc(&config),
        Command::Oracle => cmd_oracle(&config),
        Command::Converge => cmd_converge(&config),
        Command::Verify => unreachable!(),
    };
    let runtime_ms = started.elapsed().as_millis();

    match result {
        Ok(mut record) => {
            record.config_hash = hash;
            let quality_fail = record.imag_residue > 1e-3;
            if emit(&cli, &record, runtime_ms).is_err() {
                return fail(EXIT_CONFIG, "cannot write output");
            }
            if quality_fail {
                EXIT_QUALITY
            } else {
                0
            }
        }
        Err(e) => fail(exit_code_for(&e), &e.to_string()),
    }
}

fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_string(config).unwrap();
    let digest = sha2::Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn emit(cli: &Cli, record: &OutputRecord, runtime_ms: u128) -> std::io::Result<()> {
    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(record).unwrap() + "\n",
        Format::Csv => {
            // fixed column contract, version 1
            format!(
                "config_hash,command,value,imag_residue,error,runtime_ms\n{},{},{},{},{},{}\n",
                record.config_hash,
                record.command,
                record.value,
                record.imag_residue,
                record.error_estimate,
                runtime_ms
            )
        }
    };
    match &cli.out {
        Some(path) => std::fs::write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn particle_config(config: &RunConfig, fallback_n: usize) -> Result<ParticleConfig, TasepError> {
    match &config.initial {
        Some(InitialCondition::Step { n }) => Ok(ParticleConfig::step(*n)),
        Some(InitialCondition::Flat { n }) => Ok(ParticleConfig::flat(*n)),
        Some(InitialCondition::Explicit { positions }) => ParticleConfig::new(positions.clone()),
        None => Ok(ParticleConfig::step(fallback_n)),
    }
}

fn observation_set(config: &RunConfig) -> Result<ObservationSet, TasepError> {
    let mut obs = config.observations.clone();
    for h in &config.height_observations {
        let (k, threshold) = height_to_particle(h.site, h.height)?;
        if k < 1 {
            return Err(TasepError::Invalid(format!(
                "height observation maps to particle index {k} < 1"
            )));
        }
        obs.push(Observation { k: k as usize, a: threshold, t: h.t });
    }
    ObservationSet::new(obs)
}

fn contour_plan(config: &RunConfig, m: usize) -> Result<ContourPlan, TasepError> {
    let c = config.contour.clone().unwrap_or_default();
    ContourPlan::with_radii(
        m,
        c.r_min.unwrap_or(0.08),
        c.r_max.unwrap_or(0.42),
        c.nodes.unwrap_or(64),
        c.z_nodes.unwrap_or(64),
    )
}

fn plan_json(plan: &ContourPlan) -> serde_json::Value {
    serde_json::json!({
        "left_radii": plan.system.left.iter().map(|c| c.radius).collect::<Vec<_>>(),
        "right_radii": plan.system.right.iter().map(|c| c.radius).collect::<Vec<_>>(),
        "contour_nodes": plan.system.left[0].nodes,
        "z_radii": plan.z_radii,
        "z_nodes": plan.z_nodes,
    })
}

fn record_from(
    command: &str,
    p: tasep::ProbabilityResult,
    plan: serde_json::Value,
    extra: serde_json::Value,
) -> OutputRecord {
    OutputRecord {
        config_hash: String::new(),
        command: command.into(),
        value: p.value,
        imag_residue: p.imag_residue,
        error_estimate: p.error_estimate,
        provenance: p.provenance,
        warnings: p.warnings,
        plan,
        extra,
    }
}

fn cmd_prob(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let obs = observation_set(config)?;
    let plan = contour_plan(config, obs.m())?;
    // a flat configuration with n = 0 selects the infinite flat route
    if let Some(InitialCondition::Flat { n: 0 }) = config.initial {
        let p = flat_probability(&obs, &plan)?;
        return Ok(record_from("prob", p, plan_json(&plan), serde_json::json!({"n": "infinite"})));
    }
    let y = particle_config(config, obs.max_k())?;
    let p = joint_probability(&y, &obs, &plan)?;
    Ok(record_from("prob", p, plan_json(&plan), serde_json::json!({"n": y.n()})))
}

fn cmd_signed(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let obs = observation_set(config)?;
    let plan = contour_plan(config, obs.m())?;
    let y = particle_config(config, obs.max_k())?;
    let p = signed_probability(&y, &obs, &plan, &config.outside)?;
    Ok(record_from("signed", p, plan_json(&plan), serde_json::json!({"outside": config.outside})))
}

fn cmd_periodic(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let obs = observation_set(config)?;
    let y = particle_config(config, obs.max_k())?;
    let period =
        config.period.ok_or_else(|| TasepError::Invalid("periodic needs a period".into()))?;
    let params = PeriodicParams::new(period, y.n())?;
    let plan = PeriodicPlan::default();
    let p = periodic_probability(&y, &params, &obs, &plan)?;
    Ok(record_from(
        "periodic",
        p,
        serde_json::json!({"z_nodes": plan.z_nodes, "ratio": plan.ratio}),
        serde_json::json!({"period": period}),
    ))
}

fn cmd_limit(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let kind = match config.kind.as_deref() {
        Some("flat") => LimitKind::Flat,
        _ => LimitKind::Step,
    };
    if config.limit_points.is_empty() {
        return Err(TasepError::Invalid("limit needs limit_points".into()));
    }
    let obs =
        LimitObservation::new(config.limit_points.iter().map(|p| (p.x, p.tau, p.h)).collect())?;
    let plan = RayContourPlan::for_observation(&obs)?;
    let v = f_limit(kind, &obs, &plan)?;
    Ok(OutputRecord {
        config_hash: String::new(),
        command: "limit".into(),
        value: v.value,
        imag_residue: v.imag_residue,
        error_estimate: v.error_estimate,
        provenance: Provenance::Fredholm,
        warnings: Vec::new(),
        plan: serde_json::json!({
            "s_max": plan.s_max,
            "panels": plan.panels,
            "gl_order": plan.gl_order,
            "angle_right": plan.angle_right,
        }),
        extra: serde_json::json!({"kind": config.kind.clone().unwrap_or_else(|| "step".into())}),
    })
}

fn cmd_mc(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let obs = observation_set(config)?;
    let y = particle_config(config, obs.max_k())?;
    let cfg = MCConfig::new(config.seed.unwrap_or(1), config.samples.unwrap_or(1_000_000));
    let (value, stderr) = mc_joint(&y, &obs, &cfg, config.period)?;
    let p = tasep::ProbabilityResult::from_real(value, stderr, Provenance::Mc);
    Ok(record_from(
        "mc",
        p,
        serde_json::json!({"seed": cfg.seed, "samples": cfg.samples}),
        serde_json::json!({"stderr": stderr, "periodic": config.period}),
    ))
}

fn cmd_oracle(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let obs = observation_set(config)?;
    let y = particle_config(config, obs.max_k())?;
    match config.oracle.as_deref() {
        Some("poisson") => {
            if y.n() != 1 {
                return Err(TasepError::Unsupported(
                    "the closed-form oracle needs a single particle".into(),
                ));
            }
            let thresholds: Vec<i64> =
                obs.observations().iter().map(|o| o.a + o.k as i64).collect();
            let times: Vec<f64> = obs.observations().iter().map(|o| o.t).collect();
            let value = poisson_joint(&thresholds, &times)?;
            let p = tasep::ProbabilityResult::from_real(value, 1e-15, Provenance::Poisson);
            Ok(record_from("oracle", p, serde_json::json!({}), serde_json::json!({})))
        }
        _ => {
            let tol = config.tol.unwrap_or(1e-8);
            let v = ctmc_exact(&y, &obs, tol)?;
            let cert = serde_json::to_value(&v.certificate).unwrap();
            let p = tasep::ProbabilityResult::from_real(
                v.value,
                v.certificate.total_error(),
                Provenance::Ctmc,
            );
            Ok(record_from("oracle", p, serde_json::json!({}), cert))
        }
    }
}

fn cmd_converge(config: &RunConfig) -> Result<OutputRecord, TasepError> {
    let point = config
        .limit_points
        .first()
        .copied()
        .unwrap_or(LimitPoint { x: 0.0, tau: 1.0, h: 0.0 });
    let kind = match config.kind.as_deref() {
        Some("flat") => LimitKind::Flat,
        _ => LimitKind::Step,
    };
    let ladder: Vec<f64> =
        if config.t_ladder.is_empty() { vec![8.0, 16.0, 32.0] } else { config.t_ladder.clone() };
    let obs = LimitObservation::single(point.x, point.tau, point.h);
    let ray_plan = RayContourPlan::for_observation(&obs)?;
    let limit = f_limit(kind, &obs, &ray_plan)?;

    let mut rows = Vec::new();
    let mut last_gap = f64::NAN;
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for &t_h in &ladder {
        let (lattice, n) = scaling_map(t_h, &obs)?;
        let mut plan = ContourPlan::with_radii(1, 0.45, 0.45, 512, 8)?;
        plan.error_probe = false;
        let p = match kind {
            LimitKind::Step => joint_probability(&ParticleConfig::step(n), &lattice, &plan)?,
            LimitKind::Flat => flat_probability(&lattice, &plan)?,
        };
        let gap = (p.value - limit.value).abs();
        if gap >= prev {
            monotone = false;
        }
        prev = gap;
        last_gap = gap;
        rows.push(serde_json::json!({"t": t_h, "value": p.value, "gap": gap}));
    }
    Ok(OutputRecord {
        config_hash: String::new(),
        command: "converge".into(),
        value: last_gap,
        imag_residue: limit.imag_residue,
        error_estimate: limit.error_estimate,
        provenance: Provenance::Fredholm,
        warnings: if monotone { Vec::new() } else { vec!["gap ladder not monotone".into()] },
        plan: serde_json::json!({"ladder": ladder}),
        extra: serde_json::json!({"limit": limit.value, "rows": rows}),
    })
}
