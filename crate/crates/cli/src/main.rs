use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rollout_core::asymptotics::{run_dichotomy, DichotomyOptions, COLLAPSE_TOL, DEFAULT_CHECKPOINTS};
use rollout_core::io::{self, load, load_profile, save, LogitMatrix};
use rollout_core::metrics::{compare, fit_content_many, DEFAULT_BINS};
use rollout_core::rollout::drift_report;
use rollout_core::stochastic_order::{check_stoch_monotone, MONOTONE_TOL};
use rollout_core::{run_rollout, Error, RolloutConfig, RolloutOptions, Variant};

mod specs;

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown subcommand or bad flag)
  3  I/O error
  4  malformed input or schema mismatch
  5  invariant violation (ranges, dimensions, stochasticity, missing full matrix)
  6  numerically undefined result (non-finite values, constant profiles)

Errors are reported on stderr as one JSON object: {\"error\", \"message\", \"exit_code\"}.";

#[derive(Parser)]
#[command(name = "rollout-lab", version, about = "Residual-aware attention rollout experiments", after_help = AFTER_HELP)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "ROLLOUT_LAB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rollout config; writes trajectory.json and trajectory.csv.
    Run(RunArgs),
    /// Compare a predicted profile with a measured one.
    Compare(CompareArgs),
    /// Count violations of the row-wise prefix-mass ordering of a kernel.
    CheckMonotone(CheckArgs),
    /// Bounds and collapse detection over a long schedule.
    Dichotomy(DichotomyArgs),
    /// Fit the constant-plus-diagonal content model to logit matrices.
    FitContent(FitArgs),
    /// Schema-check interchange files.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also accumulate and store the full rollout matrix.
    #[arg(long)]
    full_matrix: bool,
    /// Report the prefix-mass series at this cutoff.
    #[arg(long)]
    drift: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Distribution, measured-profile or trajectory file.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    meas: PathBuf,
    /// Also write the comparison JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KernelArgs {
    /// uniform | alibi:M | random | noise:S | path to a kernel file
    #[arg(long, default_value = "uniform")]
    kernel: String,
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Sliding-window width; causal when absent.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CheckArgs {
    /// Kernel file; overrides --kernel.
    path: Option<PathBuf>,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, default_value_t = MONOTONE_TOL)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DichotomyArgs {
    /// constant:L | harmonic | geometric:R | linear:A:B | path to a schedule file
    #[arg(long)]
    schedule: String,
    #[arg(long)]
    depth: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Collapse tolerance on P_n1.
    #[arg(long, default_value_t = COLLAPSE_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_CHECKPOINTS)]
    checkpoints: usize,
    /// Directory for dichotomy.json and bounds.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Logit-matrix files; fits are averaged uniformly.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "io" => 3,
        "malformed" | "schema_mismatch" => 4,
        "non_finite" | "undefined" => 6,
        _ => 5,
    }
}

fn report_error(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn save_to<D: io::Document>(dir: &Path, name: &str, doc: &D) -> rollout_core::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    save(&path, doc)?;
    Ok(path)
}

fn save_file<D: io::Document>(path: &Path, doc: &D) -> rollout_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save(path, doc)
}

fn cmd_run(a: RunArgs) -> rollout_core::Result<()> {
    let mut cfg: RolloutConfig = load(&a.config)?;
    if let Some(v) = a.variant {
        cfg = cfg.with_variant(v);
    }
    let res = run_rollout(&cfg, RolloutOptions { full_matrix: a.full_matrix })?;
    let json_path = save_to(&a.out, "trajectory.json", &res)?;
    let csv_path = a.out.join("trajectory.csv");
    io::write_trajectory_csv(&csv_path, &res)?;
    let last = res.last_row();
    let mut summary = json!({
        "config_digest": res.config_digest(),
        "variant": cfg.variant(),
        "n": res.n(),
        "depth": res.depth(),
        "p_first": last.get(1),
        "p_last": last.get(res.n()),
        "trajectory_json": json_path,
        "trajectory_csv": csv_path,
    });
    if let Some(k) = a.drift {
        summary["drift"] = serde_json::to_value(drift_report(res.trajectory(), k)?)?;
    }
    print_json(&summary);
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> rollout_core::Result<()> {
    let pred = load_profile(&a.pred)?;
    let meas = load_profile(&a.meas)?;
    let result = compare(&pred, &meas)?;
    if let Some(out) = &a.out {
        save_file(out, &result)?;
    }
    print_json(&serde_json::to_value(&result)?);
    Ok(())
}

fn cmd_check(a: CheckArgs) -> rollout_core::Result<()> {
    let kernel = match &a.path {
        Some(p) => load(p)?,
        None => {
            let mask = specs::mask(a.kernel.n, a.kernel.window)?;
            specs::parse_kernel(&a.kernel.kernel, mask, a.kernel.seed)?
        }
    };
    let report = check_stoch_monotone(&kernel, a.tol)?;
    if let Some(out) = &a.out {
        save_file(out, &report)?;
    }
    print_json(&serde_json::to_value(&report)?);
    Ok(())
}

fn cmd_dichotomy(a: DichotomyArgs) -> rollout_core::Result<()> {
    let schedule = specs::parse_schedule(&a.schedule, a.depth)?;
    let mask = specs::mask(a.kernel.n, a.kernel.window)?;
    let kernel = specs::parse_kernel(&a.kernel.kernel, mask, a.kernel.seed)?;
    let report = run_dichotomy(
        &[kernel],
        &schedule,
        DichotomyOptions {
            checkpoints: a.checkpoints,
            collapse_tol: a.tol,
        },
    )?;
    let mut summary = json!({
        "verdict": report.verdict,
        "collapse": report.collapsed(),
        "p_n1": report.p_n1,
        "epsilon": report.epsilon,
        "cumulative_mixing": report.cumulative_mixing,
        "diag_lower_bound": report.diag_lower_bound[0],
        "c_prime": report.offdiag_upper_bound.c_prime,
    });
    if let Some(dir) = &a.out {
        summary["report"] = json!(save_to(dir, "dichotomy.json", &report)?);
        let csv_path = dir.join("bounds.csv");
        io::write_bounds_csv(&csv_path, &report.checkpoints)?;
        summary["bounds_csv"] = json!(csv_path);
    }
    print_json(&summary);
    Ok(())
}

fn cmd_fit(a: FitArgs) -> rollout_core::Result<()> {
    let files = a
        .files
        .iter()
        .map(load::<LogitMatrix>)
        .collect::<rollout_core::Result<Vec<_>>>()?;
    let mask = files[0].mask;
    if files.iter().any(|f| f.mask != mask) {
        return Err(Error::Invariant("logit matrices disagree on mask".into()));
    }
    let mats: Vec<_> = files.into_iter().map(|f| f.logits).collect();
    let fit = fit_content_many(&mats, mask, a.bins)?;
    if let Some(out) = &a.out {
        save_file(out, &fit)?;
    }
    print_json(&serde_json::to_value(&fit)?);
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> ExitCode {
    let mut worst: Option<(Error, u8)> = None;
    for path in &a.files {
        match io::validate(path) {
            Ok(kind) => println!("{}", json!({ "path": path, "kind": kind, "ok": true })),
            Err(e) => {
                let code = exit_code(&e);
                println!("{}", json!({ "path": path, "ok": false, "error": e.kind(), "message": e.to_string() }));
                if worst.as_ref().is_none_or(|(_, c)| code > *c) {
                    worst = Some((e, code));
                }
            }
        }
    }
    match worst {
        None => ExitCode::SUCCESS,
        Some((e, code)) => report_error(e.kind(), e.to_string(), code),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error("usage", e.to_string().trim_end().to_owned(), 2),
    };
    if let Some(t) = cli.threads.filter(|&t| t > 0) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::CheckMonotone(a) => cmd_check(a),
        Command::Dichotomy(a) => cmd_dichotomy(a),
        Command::FitContent(a) => cmd_fit(a),
        Command::Validate(a) => return cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            report_error(e.kind(), e.to_string(), code)
        }
    }
}
