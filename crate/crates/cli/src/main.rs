//! `rbm`: command-line harness for reflected Brownian motion experiments.
//!
//! Exit codes: 0 success, 2 a stability assumption fails (named A1/A2/A3),
//! 3 invalid input, 4 a verification check fails, 1 anything else.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rbm_core::bounds;
use rbm_core::experiments::{self, CouplingConfig, GeneratorSpec, VerifyConfig};
use rbm_core::hitting;
use rbm_core::io::{load_model, write_json, write_text};
use rbm_core::network_model::{certify, DEFAULT_N_MAX};
use rbm_core::sim::{self, RunManifest};
use rbm_core::{AssumptionCertificate, Error, NetworkModel};

const DEFAULT_GENERATOR: &str = "tandem:d=3,q=0.5";

#[derive(Parser)]
#[command(name = "rbm", version, about = "Simulate and verify reflected Brownian motion on queueing networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the stability assumptions and write the certificate.
    Validate(Common),
    /// Simulate one RBM path and its hitting record.
    Simulate(Common),
    /// Coupling study against approximate stationary starts.
    Couple(Common),
    /// Relaxation-time scaling across dimensions.
    Scaling(Common),
    /// Run the invariant battery.
    Verify(Common),
    /// Evaluate the convergence bound and relaxation time.
    Bound(Common),
}

/// Flags shared by all subcommands. Every flag can also come from the JSON
/// file given by `--config` (same names, `d_list` and `eps_hit` with
/// underscores); flags win.
#[derive(Args, Clone, Default)]
struct Common {
    /// Model JSON file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Generator spec such as `tandem:d=8,q=0.5` (used when no model file is given).
    #[arg(long)]
    generator: Option<String>,
    /// JSON config mirroring these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated dimensions for `scaling`.
    #[arg(long, value_delimiter = ',')]
    d_list: Option<Vec<usize>>,
    /// Initial state, one value per station or a single value for all.
    #[arg(long, value_delimiter = ',')]
    y0: Option<Vec<f64>>,
    /// Zero-detection threshold; defaults to 2·sqrt(dt·max σ²).
    #[arg(long)]
    eps_hit: Option<f64>,
}

#[derive(Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<PathBuf>,
    generator: Option<String>,
    seed: Option<u64>,
    dt: Option<f64>,
    horizon: Option<f64>,
    reps: Option<usize>,
    beta: Option<f64>,
    out: Option<PathBuf>,
    d_list: Option<Vec<usize>>,
    y0: Option<Vec<f64>>,
    eps_hit: Option<f64>,
}

/// Settings after merging the config file and the flags.
#[derive(Serialize, Clone)]
struct Settings {
    model: Option<PathBuf>,
    generator: Option<String>,
    seed: u64,
    dt: Option<f64>,
    horizon: Option<f64>,
    reps: Option<usize>,
    beta: f64,
    out: PathBuf,
    d_list: Option<Vec<usize>>,
    y0: Option<Vec<f64>>,
    eps_hit: Option<f64>,
}

enum Failure {
    Assumption(String),
    Input(String),
    Verification(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Assumption(_) => 2,
            Failure::Input(_) => 3,
            Failure::Verification(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Assumption(m) | Failure::Input(m) | Failure::Verification(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NoContraction(_) => Failure::Assumption(format!("assumption A1 fails: {msg}")),
            Error::Unstable { .. } | Error::NotMMatrix | Error::Singular => {
                Failure::Assumption(format!("assumption A2 fails: {msg}"))
            }
            Error::NotPositiveDefinite(_) => Failure::Assumption(format!("assumption A3 fails: {msg}")),
            Error::Io(_)
            | Error::Json(_)
            | Error::DimensionMismatch(_)
            | Error::NonFinite(_)
            | Error::NonSubstochastic(_)
            | Error::NegativeStart { .. }
            | Error::NegativeInput(_)
            | Error::DimensionTooSmall(_)
            | Error::InvalidArgument(_)
            | Error::Precondition(_) => Failure::Input(msg),
            Error::ConditionViolated { .. } => Failure::Verification(msg),
            _ => Failure::Other(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(c) => settings(c).and_then(|s| cmd_validate(&s)),
        Command::Simulate(c) => settings(c).and_then(|s| cmd_simulate(&s)),
        Command::Couple(c) => settings(c).and_then(|s| cmd_couple(&s)),
        Command::Scaling(c) => settings(c).and_then(|s| cmd_scaling(&s)),
        Command::Verify(c) => settings(c).and_then(|s| cmd_verify(&s)),
        Command::Bound(c) => settings(c).and_then(|s| cmd_bound(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn settings(flags: Common) -> Result<Settings, Failure> {
    let file = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ConfigFile>(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let s = Settings {
        model: flags.model.or(file.model),
        generator: flags.generator.or(file.generator),
        seed: flags.seed.or(file.seed).unwrap_or(1),
        dt: flags.dt.or(file.dt),
        horizon: flags.horizon.or(file.horizon),
        reps: flags.reps.or(file.reps),
        beta: flags.beta.or(file.beta).unwrap_or(0.05),
        out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("rbm-out")),
        d_list: flags.d_list.or(file.d_list),
        y0: flags.y0.or(file.y0),
        eps_hit: flags.eps_hit.or(file.eps_hit),
    };
    if let Some(dt) = s.dt {
        if dt.is_nan() || dt <= 0.0 {
            return Err(Failure::Input(format!("dt = {dt} must be positive")));
        }
    }
    if let (Some(h), Some(dt)) = (s.horizon, s.dt) {
        if h < dt {
            return Err(Failure::Input(format!("horizon = {h} must be at least dt = {dt}")));
        }
    }
    if s.reps == Some(0) {
        return Err(Failure::Input("reps must be at least 1".into()));
    }
    Ok(s)
}

fn load(s: &Settings) -> Result<NetworkModel, Failure> {
    match (&s.model, &s.generator) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(Failure::Input(format!("model file {} does not exist", path.display())));
            }
            load_model(path).map_err(|e| match e {
                Error::Json(j) => Failure::Input(format!("{}: malformed model JSON: {j}", path.display())),
                other => other.into(),
            })
        }
        (None, Some(spec)) => Ok(spec.parse::<GeneratorSpec>()?.build()?),
        (None, None) => Ok(DEFAULT_GENERATOR.parse::<GeneratorSpec>()?.build()?),
    }
}

fn start(s: &Settings, d: usize, default: f64) -> Result<Vec<f64>, Failure> {
    match &s.y0 {
        None => Ok(vec![default; d]),
        Some(v) if v.len() == 1 => Ok(vec![v[0]; d]),
        Some(v) if v.len() == d => Ok(v.clone()),
        Some(v) => Err(Failure::Input(format!("y0 has {} entries, model has d = {d}", v.len()))),
    }
}

fn out_file(s: &Settings, name: &str) -> PathBuf {
    s.out.join(name)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Output wrapper carrying provenance.
#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_hash: String,
    code_version: &'static str,
    settings: &'a Settings,
    #[serde(flatten)]
    body: T,
}

fn tagged<'a, T: Serialize>(s: &'a Settings, body: T) -> Result<Tagged<'a, T>, Failure> {
    Ok(Tagged { config_hash: experiments::config_hash(s)?, code_version: rbm_core::CODE_VERSION, settings: s, body })
}

#[derive(Serialize)]
struct CertificateBody<'a> {
    model_hash: String,
    certificate: &'a AssumptionCertificate,
}

fn certificate(model: &NetworkModel) -> Result<AssumptionCertificate, Failure> {
    Ok(certify(model, DEFAULT_N_MAX)?)
}

fn cmd_validate(s: &Settings) -> CmdResult {
    let model = load(s)?;
    let cert = certificate(&model)?;
    let doc = tagged(s, CertificateBody { model_hash: model.content_hash(), certificate: &cert })?;
    write_json(&out_file(s, "certificate.json"), &doc)?;
    println!("{}", serde_json::to_string_pretty(&cert).map_err(Error::from)?);
    if !cert.beta_feasible {
        eprintln!("note: no certified beta exists (beta_max = {:e})", cert.beta_max);
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateBody {
    manifest: RunManifest,
    eps_hit: f64,
    residual_identity: f64,
    residual_complementarity: f64,
    tol_comp: f64,
    min_y: f64,
    n_at_horizon: usize,
    sensitivity: [usize; 3],
    eta: Vec<hitting::EtaRound>,
}

fn cmd_simulate(s: &Settings) -> CmdResult {
    let model = load(s)?;
    let _ = certificate(&model)?;
    let dt = s.dt.unwrap_or(sim::DEFAULT_DT);
    let horizon = s.horizon.unwrap_or(10.0);
    let y0 = start(s, model.d, 0.0)?;
    let sol = sim::simulate_rbm(&model, &y0, horizon, dt, s.seed)?;
    let eps = s.eps_hit.unwrap_or_else(|| hitting::default_eps_hit(&model, dt));
    let rec = hitting::eta_sequence(&sol, eps)?;
    let sens = hitting::count_sensitivity(&sol, eps)?;
    let last = sol.steps();
    sol.write_csv(create(&out_file(s, "path.csv"))?)?;
    sol.write_binary(create(&out_file(s, "path.bin"))?)?;
    write_text(&out_file(s, "hitting.json"), &rec.to_json()?)?;
    let body = SimulateBody {
        manifest: RunManifest::new(&model, s.seed, dt, horizon),
        eps_hit: eps,
        residual_identity: sol.residual_identity,
        residual_complementarity: sol.residual_complementarity,
        tol_comp: sol.tol_comp(),
        min_y: sol.min_y,
        n_at_horizon: hitting::count_n(&rec, sol.time(last)),
        sensitivity: [sens.half[last], sens.nominal[last], sens.double[last]],
        eta: rec.eta,
    };
    write_json(&out_file(s, "manifest.json"), &tagged(s, &body)?)?;
    println!(
        "simulated {} steps; N(horizon) = {} (eps/2: {}, 2 eps: {})",
        last, body.n_at_horizon, body.sensitivity[0], body.sensitivity[2]
    );
    Ok(())
}

fn cmd_couple(s: &Settings) -> CmdResult {
    let model = load(s)?;
    let cert = certificate(&model)?;
    let defaults = CouplingConfig::default();
    let config = CouplingConfig {
        dt: s.dt.unwrap_or(defaults.dt),
        horizon: s.horizon.unwrap_or(defaults.horizon),
        reps: s.reps.unwrap_or(defaults.reps),
        seed: s.seed,
        y0: s.y0.as_ref().map(|_| start(s, model.d, 0.0)).transpose()?,
        beta: s.beta,
        ..defaults
    };
    if config.reps < 30 {
        return Err(Failure::Input(format!("couple needs at least 30 replications, got {}", config.reps)));
    }
    let partial = out_file(s, "coupling.partial.json");
    let curve = experiments::couple(&model, &cert, &config, |c| write_json(&partial, c))?;
    curve.write_csv(create(&out_file(s, "coupling.csv"))?)?;
    write_json(&out_file(s, "coupling.json"), &curve)?;
    let _ = fs::remove_file(&partial);
    match &curve.fit {
        Some(f) => {
            println!("decay rate {:.6} (95% CI {:.6} .. {:.6}) over {} points", f.rate, f.ci95.0, f.ci95.1, f.points)
        }
        None => println!("decay rate not estimable (too few positive grid points)"),
    }
    if let Some(excess) = curve.bound_excess() {
        println!("bound minus (mean + 3 SE), worst case: {:e}", -excess);
    }
    Ok(())
}

fn cmd_scaling(s: &Settings) -> CmdResult {
    let spec: GeneratorSpec = s.generator.as_deref().unwrap_or(DEFAULT_GENERATOR).parse()?;
    let d_list = s.d_list.clone().unwrap_or_else(|| vec![8, 16, 32, 64]);
    if d_list.iter().any(|&d| !(3..=128).contains(&d)) {
        return Err(Failure::Input(format!("d-list {d_list:?} must lie within 3..=128")));
    }
    let report = experiments::scaling(&spec, &d_list, s.beta)?;
    report.write_csv(create(&out_file(s, "scaling.csv"))?)?;
    write_json(&out_file(s, "scaling.json"), &report)?;
    match (report.slope, &report.slope_flag) {
        (Some(slope), _) => println!("log-log slope of t* against d: {slope:.4}"),
        (None, Some(flag)) => println!("{flag}"),
        (None, None) => {}
    }
    Ok(())
}

fn cmd_verify(s: &Settings) -> CmdResult {
    let model = load(s)?;
    let cert = certificate(&model)?;
    let defaults = VerifyConfig::default();
    let config = VerifyConfig {
        seed: s.seed,
        dt: s.dt.unwrap_or(defaults.dt),
        horizon: s.horizon.unwrap_or(defaults.horizon),
        paths: s.reps.unwrap_or(defaults.paths),
        beta: s.beta,
        ..defaults
    };
    let report = experiments::verify(&model, &cert, &config)?;
    write_json(&out_file(s, "verify.json"), &report)?;
    for c in &report.checks {
        println!("{} {:<24} margin {:+.3e}  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.margin, c.detail);
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_bound(s: &Settings) -> CmdResult {
    let model = load(s)?;
    let cert = certificate(&model)?;
    let y = start(s, model.d, 0.0)?;
    let params = bounds::select_parameters(&cert, model.d, s.beta)?;
    let t_star = bounds::relaxation_time(&params, &cert, &y, model.d);
    let horizon = s.horizon.unwrap_or(if t_star > 0.0 { 2.0 * t_star } else { 1.0 });
    let grid: Vec<f64> = (0..=100).map(|k| horizon * k as f64 / 100.0).collect();
    let report = bounds::bound_report(&cert, model.d, s.beta, &y, &grid)?;
    let mut csv = String::from("t,bound,prop5,beta_in_range,geo1,select_theta\n");
    for (t, b, p) in &report.bound_curve {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            rbm_core::io::csv_num(*t),
            rbm_core::io::csv_num(*b),
            rbm_core::io::csv_num(*p),
            report.params.beta_in_range,
            report.params.geo1_pass,
            report.params.select_theta_pass
        ));
    }
    write_text(&out_file(s, "bound.csv"), &csv)?;
    write_json(&out_file(s, "bound.json"), &tagged(s, &report)?)?;
    println!("relaxation time t* = {:e}", report.t_star);
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(())
}
