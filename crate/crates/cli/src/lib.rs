//! `jlw` command-line front end.
//!
//! Exit codes: 0 on success, 1 when validation or a verdict fails, 2 on
//! usage errors and malformed input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use jlw_core::decomposition::{bonded_components, BRUTE_FORCE_MAX_STATIONS};
use jlw_core::model::raw_from_json;
use jlw_core::rational::{format_rational, parse_rational};
use jlw_core::verify::{run_all, run_experiment, write_replica_csv, Experiment, VerifyError, VerifyOptions};
use jlw_core::{
    brute_force_decompose, decompose, run, validate, Instance, ProcessKind, Rational, Routing,
    SimConfig, StaticPolicy,
};

#[derive(Debug, Parser)]
#[command(name = "jlw", version, about = "Hierarchical minimax decomposition and JLW simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Instance JSON file.
    #[arg(long)]
    input: PathBuf,
    /// Accept instances whose neighbourhood graph is disconnected.
    #[arg(long)]
    allow_disconnected: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check an instance file and list every violation.
    Validate {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Print clusters and exact values; `--output` writes the JSON report.
    Decompose {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use subset enumeration instead of linear programming.
        #[arg(long)]
        brute_force: bool,
    },
    /// Write a static policy achieving every cluster value.
    Synthesize {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the bonded sub-clusters of each cluster.
    Bonded {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulate the queue or the walk and write the sampled path as CSV.
    Simulate {
        #[command(flatten)]
        input: InputArgs,
        /// CSV path; counters go to `<output>.counters.json`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Simulation config JSON; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cadence: Option<u64>,
        /// Comma-separated initial state.
        #[arg(long, allow_hyphen_values = true)]
        initial: Option<String>,
    },
    /// Run one experiment (or `all`) and write the verdicts as JSON.
    Verify {
        /// speeds, separation, shape, control, stability, weights, dispersion or all
        experiment: String,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// Base radius M of the shape check.
        #[arg(long, default_value_t = 5.0)]
        radius: f64,
        /// Comma-separated weight vector; repeat for several.
        #[arg(long)]
        weights: Vec<String>,
        /// Replicas each station must pass in the speeds check.
        #[arg(long)]
        quorum: Option<usize>,
        /// Comma-separated initial state for the separation check.
        #[arg(long, allow_hyphen_values = true)]
        initial: Option<String>,
        /// Also write per-replica statistics as CSV.
        #[arg(long)]
        replica_csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Queue,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PolicyArg {
    Jlw,
    Witness,
    Uniform,
}

/// Simulation config file. `policy` is `"jlw"`, `"witness"`, `"uniform"`
/// or a matrix of fraction strings, one row per neighbourhood.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfigFile {
    kind: Option<KindArg>,
    policy: Option<PolicySpec>,
    horizon: Option<u64>,
    seed: Option<u64>,
    cadence: Option<u64>,
    initial_state: Option<Vec<i64>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PolicySpec {
    Named(PolicyArg),
    Rows(Vec<Vec<String>>),
}

/// Error carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn load(input: &InputArgs) -> Result<Instance, Failure> {
    let text = read_text(&input.input)?;
    let raw = raw_from_json(&text).map_err(|e| usage(e.to_string()))?;
    let built = if input.allow_disconnected {
        Instance::new_relaxed(raw)
    } else {
        Instance::new(raw)
    };
    built.map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| usage(format!("{what}: cannot parse {s:?}"))))
        .collect()
}

fn parse_weights(text: &str) -> Result<Vec<Rational>, Failure> {
    text.split(',')
        .map(|s| parse_rational(s).map_err(|e| usage(format!("--weights: {e}"))))
        .collect()
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => write_text(p, text),
        None => writeln!(out, "{text}").map_err(|e| usage(e.to_string())),
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn verify_error(e: VerifyError) -> Failure {
    usage(e.to_string())
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let io = |e: std::io::Error| usage(e.to_string());
    match cli.command {
        Command::Validate { input } => {
            let text = read_text(&input.input)?;
            let raw = raw_from_json(&text).map_err(|e| usage(e.to_string()))?;
            let violations: Vec<_> = validate(&raw)
                .into_iter()
                .filter(|v| !(input.allow_disconnected && matches!(v, jlw_core::Violation::GraphNotConnected { .. })))
                .collect();
            if violations.is_empty() {
                writeln!(out, "valid").map_err(io)?;
                Ok(0)
            } else {
                for v in &violations {
                    writeln!(out, "{v}").map_err(io)?;
                }
                Ok(1)
            }
        }
        Command::Decompose {
            input,
            output,
            brute_force,
        } => {
            let inst = load(&input)?;
            if brute_force && inst.n_stations() > BRUTE_FORCE_MAX_STATIONS {
                return Err(usage(format!(
                    "brute force is limited to {BRUTE_FORCE_MAX_STATIONS} stations, instance has {}",
                    inst.n_stations()
                )));
            }
            let d = if brute_force { brute_force_decompose(&inst) } else { decompose(&inst) }
                .map_err(|e| usage(e.to_string()))?;
            for (k, (c, v)) in d.clusters.iter().zip(&d.values).enumerate() {
                writeln!(out, "C_{} = {c}  V_{} = {}", k + 1, k + 1, format_rational(v)).map_err(io)?;
            }
            if let Some(p) = output {
                write_text(&p, &pretty(&d.to_report(&inst)))?;
            }
            Ok(0)
        }
        Command::Synthesize { input, output } => {
            let inst = load(&input)?;
            let d = decompose(&inst).map_err(|e| usage(e.to_string()))?;
            let rows: Vec<Vec<String>> = d
                .witness
                .rows()
                .iter()
                .map(|r| r.iter().map(format_rational).collect())
                .collect();
            emit(out, output.as_deref(), &pretty(&serde_json::json!({ "policy": rows })))?;
            Ok(0)
        }
        Command::Bonded { input, output } => {
            let inst = load(&input)?;
            let d = decompose(&inst).map_err(|e| usage(e.to_string()))?;
            let bonded = bonded_components(&inst, &d).map_err(|e| usage(e.to_string()))?;
            let json: Vec<Vec<Vec<usize>>> = bonded
                .iter()
                .map(|comps| comps.iter().map(|c| c.one_based()).collect())
                .collect();
            for (k, comps) in bonded.iter().enumerate() {
                let shown: Vec<String> = comps.iter().map(|c| c.to_string()).collect();
                writeln!(out, "C_{}: {}", k + 1, shown.join(" ")).map_err(io)?;
            }
            if let Some(p) = output {
                write_text(&p, &pretty(&json))?;
            }
            Ok(0)
        }
        Command::Simulate {
            input,
            output,
            config,
            kind,
            policy,
            horizon,
            seed,
            cadence,
            initial,
        } => {
            let inst = load(&input)?;
            let file: SimConfigFile = match config {
                Some(p) => serde_json::from_str(&read_text(&p)?).map_err(|e| usage(format!("config: {e}")))?,
                None => SimConfigFile::default(),
            };
            let kind = match kind.or(file.kind).unwrap_or(KindArg::Queue) {
                KindArg::Queue => ProcessKind::Queue,
                KindArg::Walk => ProcessKind::Walk,
            };
            let spec = policy.map(PolicySpec::Named).or(file.policy).unwrap_or(PolicySpec::Named(PolicyArg::Jlw));
            let routing = match spec {
                PolicySpec::Named(PolicyArg::Jlw) => Routing::Jlw,
                PolicySpec::Named(PolicyArg::Uniform) => Routing::Static(StaticPolicy::uniform(&inst)),
                PolicySpec::Named(PolicyArg::Witness) => {
                    Routing::Static(decompose(&inst).map_err(|e| usage(e.to_string()))?.witness)
                }
                PolicySpec::Rows(rows) => {
                    let parsed = rows
                        .iter()
                        .map(|r| r.iter().map(|s| parse_rational(s)).collect::<Result<Vec<_>, _>>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| usage(format!("config policy: {e}")))?;
                    Routing::Static(StaticPolicy::new(&inst, parsed).map_err(|e| usage(e.to_string()))?)
                }
            };
            let horizon = horizon.or(file.horizon).unwrap_or(100_000);
            let mut cfg = SimConfig::new(inst, kind, routing, horizon, seed.or(file.seed).unwrap_or(0));
            cfg.cadence = cadence.or(file.cadence);
            if let Some(x) = initial.map(|s| parse_list::<i64>(&s, "--initial")).transpose()?.or(file.initial_state) {
                cfg.initial_state = x;
            }
            let traj = run(&cfg).map_err(|e| usage(e.to_string()))?;
            let mut csv = Vec::new();
            traj.write_csv(&mut csv).map_err(|e| usage(e.to_string()))?;
            let csv = String::from_utf8(csv).expect("csv is utf-8");
            match output {
                Some(p) => {
                    write_text(&p, &csv)?;
                    let mut sidecar = p.into_os_string();
                    sidecar.push(".counters.json");
                    write_text(Path::new(&sidecar), &pretty(&traj.counters_json()))?;
                }
                None => write!(out, "{csv}").map_err(io)?,
            }
            Ok(0)
        }
        Command::Verify {
            experiment,
            input,
            output,
            seed,
            horizon,
            replicas,
            epsilon,
            radius,
            weights,
            quorum,
            initial,
            replica_csv,
        } => {
            let inst = load(&input)?;
            let options = VerifyOptions {
                seed,
                horizon,
                replicas,
                epsilon,
                radius,
                quorum,
                initial_state: initial.map(|s| parse_list::<i64>(&s, "--initial")).transpose()?,
                weight_samples: weights.iter().map(|w| parse_weights(w)).collect::<Result<_, _>>()?,
                ..VerifyOptions::default()
            };
            let verdicts = if experiment == "all" {
                let (v, skipped) = run_all(&inst, &options).map_err(verify_error)?;
                for s in skipped {
                    writeln!(err, "skipped {s}").map_err(io)?;
                }
                v
            } else {
                let e: Experiment = experiment.parse().map_err(verify_error)?;
                vec![run_experiment(e, &inst, &options).map_err(verify_error)?]
            };
            for v in &verdicts {
                writeln!(err, "{}", v.summary()).map_err(io)?;
            }
            emit(out, output.as_deref(), &pretty(&verdicts))?;
            if let Some(p) = replica_csv {
                let mut buf = Vec::new();
                write_replica_csv(&verdicts, &mut buf).map_err(|e| usage(e.to_string()))?;
                write_text(&p, &String::from_utf8(buf).expect("csv is utf-8"))?;
            }
            Ok(if verdicts.iter().all(|v| v.passed) { 0 } else { 1 })
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
