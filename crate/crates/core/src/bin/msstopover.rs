use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use msstopover::estimate::{
    bootstrap, derived_abundance, fit, step_up_selection, BootstrapConfig, FitConfig, Init, Move,
};
use msstopover::io::{
    bootstrap_report, fit_report, parse_history_file, resolve_structure, selection_report,
    write_history_file, RunConfig,
};
use msstopover::oracle::oracle_check;
use msstopover::simulate::{paper_scenario, simulate};
use msstopover::{hmm, Error, ParameterSet, StudyDesign};

#[derive(Parser)]
#[command(name = "msstopover", version, about = "Multi-state multi-period stopover models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset; writes <out>.hist and <out>.truth.json
    Simulate(SimulateArgs),
    /// Maximum-likelihood fit; writes <out>.txt and <out>.json
    Fit(FitArgs),
    /// Fit, then nonparametric bootstrap over individuals
    Bootstrap(FitArgs),
    /// AIC step-up selection from a base structure
    Select(SelectArgs),
    /// Log-likelihood of a dataset at given parameters
    Loglik(LoglikArgs),
    /// Compare the HMM likelihood with exhaustive path enumeration
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Use the built-in three-period scenario with this N (100 or 1000)
    #[arg(long, conflicts_with = "params")]
    paper_scenario: Option<u64>,
    /// JSON file with {"design": .., "params": ..}
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "simulated")]
    out: String,
}

#[derive(Args)]
struct Common {
    /// History file
    #[arg(long, alias = "data")]
    design: PathBuf,
    /// Built-in name, grammar file, or inline grammar
    #[arg(long)]
    structure: Option<String>,
    /// TOML run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    starts: Option<usize>,
    /// Output path prefix; without it results go to stdout only
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    /// Candidate move such as "p = year*state" (repeatable)
    #[arg(long = "move")]
    moves: Vec<String>,
}

#[derive(Args)]
struct LoglikArgs {
    #[arg(long, alias = "data")]
    design: PathBuf,
    /// JSON file with {"design": .., "params": ..} or a bare parameter set
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Occasions per period
    #[arg(long, default_value = "2,2", value_delimiter = ',')]
    occasions: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long)]
    out: Option<String>,
}

enum Failure {
    Error(Error),
    NotConverged,
    OracleMismatch,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Serialize, serde::Deserialize)]
struct ModelFile {
    design: StudyDesign,
    params: ParameterSet,
}

fn read_model(path: &Path) -> msstopover::Result<(Option<StudyDesign>, ParameterSet)> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<ModelFile>(&text) {
        return Ok((Some(m.design), m.params));
    }
    Ok((None, serde_json::from_str(&text)?))
}

fn write_json<T: Serialize>(path: &str, value: &T) -> msstopover::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn emit(out: &Option<String>, text: &str, json: &impl Serialize) -> msstopover::Result<()> {
    print!("{text}");
    if let Some(prefix) = out {
        std::fs::write(format!("{prefix}.txt"), text)?;
        write_json(&format!("{prefix}.json"), json)?;
    }
    Ok(())
}

/// Run settings after applying flags on top of the config file.
fn effective_config(c: &Common, replicates: Option<usize>) -> msstopover::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &c.structure {
        cfg.structure = Some(s.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.starts {
        cfg.starts = s;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    Ok(cfg)
}

fn fit_config(cfg: &RunConfig) -> FitConfig {
    FitConfig {
        starts: cfg.starts,
        jitter: cfg.jitter,
        seed: cfg.seed,
        init: Init::Default,
        optimizer: cfg.optimizer.clone(),
        ..FitConfig::default()
    }
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    data: String,
    config: &'a RunConfig,
    result: T,
}

fn run_simulate(a: &SimulateArgs) -> CmdResult {
    let (params, design) = match (&a.paper_scenario, &a.params) {
        (Some(n), _) => paper_scenario(*n),
        (None, Some(path)) => {
            let (design, params) = read_model(path)?;
            let design = design.ok_or_else(|| {
                Error::Input("simulation parameters need a \"design\" entry".into())
            })?;
            (params, design)
        }
        (None, None) => {
            return Err(Error::Input("give --paper-scenario or --params".into()).into())
        }
    };
    let (data, truth) = simulate(&params, &design, a.seed)?;
    write_history_file(format!("{}.hist", a.out), &data)?;
    write_json(&format!("{}.truth.json", a.out), &truth)?;
    println!(
        "simulated N = {}, observed n = {} ({} unique histories), seed {}",
        params.super_population,
        data.observed(),
        data.unique(),
        a.seed
    );
    println!("realized abundance per period: {:?}", truth.abundance);
    println!("wrote {0}.hist and {0}.truth.json", a.out);
    Ok(())
}

fn run_fit(a: &FitArgs, with_bootstrap: bool) -> CmdResult {
    let cfg = effective_config(&a.common, a.replicates)?;
    let data = parse_history_file(&a.common.design)?;
    let structure = resolve_structure(cfg.structure.as_deref().unwrap_or("constant"))?;
    let result = fit(&data, &structure, &fit_config(&cfg))?;
    let data_name = a.common.design.display().to_string();
    if !with_bootstrap {
        #[derive(Serialize)]
        struct Out<'a> {
            fit: &'a msstopover::FitResult,
            derived_abundance: Vec<f64>,
        }
        let echo = Echo {
            command: "fit",
            data: data_name,
            config: &cfg,
            result: Out {
                fit: &result,
                derived_abundance: derived_abundance(&result),
            },
        };
        emit(&cfg.out, &fit_report(&result), &echo)?;
    } else {
        let boot_cfg = BootstrapConfig {
            replicates: cfg.replicates,
            seed: cfg.seed,
            fit: FitConfig {
                starts: 1,
                ..fit_config(&cfg)
            },
        };
        let boot = bootstrap(&data, &structure, &result, &boot_cfg)?;
        let echo = Echo {
            command: "bootstrap",
            data: data_name,
            config: &cfg,
            result: &boot,
        };
        emit(&cfg.out, &bootstrap_report(&boot), &echo)?;
    }
    if result.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn run_select(a: &SelectArgs) -> CmdResult {
    let mut cfg = effective_config(&a.common, None)?;
    cfg.moves.extend(a.moves.iter().cloned());
    if cfg.moves.is_empty() {
        return Err(Error::Input("no candidate moves (use --move or the config file)".into()).into());
    }
    let moves = cfg
        .moves
        .iter()
        .map(|m| m.parse())
        .collect::<msstopover::Result<Vec<Move>>>()?;
    let data = parse_history_file(&a.common.design)?;
    let base = resolve_structure(cfg.structure.as_deref().unwrap_or("constant"))?;
    let sel = step_up_selection(&data, &moves, &base, &fit_config(&cfg))?;
    let echo = Echo {
        command: "select",
        data: a.common.design.display().to_string(),
        config: &cfg,
        result: &sel,
    };
    emit(&cfg.out, &selection_report(&sel), &echo)?;
    if sel.best_fit.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn run_loglik(a: &LoglikArgs) -> CmdResult {
    let data = parse_history_file(&a.design)?;
    let (design, params) = read_model(&a.params)?;
    if let Some(d) = design {
        if d != data.design {
            return Err(Error::Input("parameter file design differs from the data design".into()).into());
        }
    }
    let ll = hmm::log_likelihood(&data, &params)?;
    #[derive(Serialize)]
    struct Out {
        data: String,
        observed: u64,
        loglik: f64,
    }
    let out = Out {
        data: a.design.display().to_string(),
        observed: data.observed(),
        loglik: ll,
    };
    emit(&a.out, &format!("log-likelihood: {ll:.10}\n"), &out)?;
    Ok(())
}

fn run_oracle(a: &OracleArgs) -> CmdResult {
    let design = StudyDesign::new(a.occasions.clone(), a.states)?;
    let report = oracle_check(&design, a.instances, a.seed)?;
    let text = format!(
        "instances: {}\nhistories checked: {}\nmax |HMM - brute force|: {:.3e}\nmax |1 - total probability|: {:.3e}\n",
        report.instances,
        report.histories_checked,
        report.max_abs_diff,
        report.max_total_probability_error
    );
    emit(&a.out, &text, &report)?;
    if report.max_abs_diff < 1e-10 && report.max_total_probability_error < 1e-8 {
        Ok(())
    } else {
        Err(Failure::OracleMismatch)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a, false),
        Command::Bootstrap(a) => run_fit(a, true),
        Command::Select(a) => run_select(a),
        Command::Loglik(a) => run_loglik(a),
        Command::OracleCheck(a) => run_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged) => {
            eprintln!("error: optimizer did not converge");
            ExitCode::from(3)
        }
        Err(Failure::OracleMismatch) => {
            eprintln!("error: HMM and brute-force likelihoods disagree");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } | Error::Structure(_) | Error::Json(_) | Error::Input(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
