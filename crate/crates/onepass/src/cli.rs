//! Command-line interface: one binary whose subcommands run experiments,
//! sweep the sensitivity grid, and drive the diagnostic checks, all
//! configured through a TOML file plus `--set` overrides.
//!
//! Exit codes are a stable contract: 0 success, 1 check or runtime failure,
//! 2 configuration error, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::check::run_gradcheck;
use crate::autodiff::{Graph, Tensor};
use crate::data::DataError;
use crate::harness::{
    self, compare_hypergradients, load_corpus, sensitivity_grid, summarise, Experiment,
    ExperimentConfig, HarnessError, Setting, SettingSummary, Task,
};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "onepass",
    version,
    about = "Hyperparameter optimisation alongside a single training run",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run the configured setting over its trials and export the results.
    Run(Common),
    /// Sweep update interval against look-back distance at a fixed number of
    /// hyperparameter updates.
    Grid(Common),
    /// Check every autodiff primitive against central differences and
    /// second-order products against a quadratic oracle.
    Gradcheck(GradcheckArgs),
    /// Compare truncated, dense-matrix, and exact-window hypergradients at
    /// the first hyperparameter update of each trial.
    HypergradCheck(Common),
    /// Rebuild the final-loss CDF from trajectory files in the output
    /// directory.
    ExportCdf(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override configuration keys, e.g. --set setting=random n_trials=4.
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
    set: Vec<String>,
    /// Directory for exported files.
    #[arg(long, value_name = "DIR", default_value = "results")]
    out: PathBuf,
    /// Worker threads; 0 keeps one thread per core.
    #[arg(long, value_name = "N", env = "ONEPASS_JOBS", default_value_t = 0)]
    jobs: usize,
    /// Master seed, overriding the configuration file.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Relative error bound each primitive must meet.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Deliberately corrupt one primitive's reverse-mode gradient, to
    /// exercise the failure path.
    #[arg(long, value_name = "PRIMITIVE")]
    corrupt: Option<String>,
}

/// A failed command: message plus the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }

    fn check(message: impl Into<String>) -> Self {
        Self { code: EXIT_FAILURE, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        let code = match &err {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Data(DataError::Io { .. }) => EXIT_IO,
            HarnessError::Data(_) => EXIT_CONFIG,
            HarnessError::Io { .. } => EXIT_IO,
            _ => EXIT_FAILURE,
        };
        Self { code, message: err.to_string() }
    }
}

/// Parses arguments from the process environment and runs the chosen verb.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::Run(common) => cmd_run(common),
        Verb::Grid(common) => cmd_grid(common),
        Verb::Gradcheck(args) => cmd_gradcheck(args),
        Verb::HypergradCheck(common) => cmd_hypergrad_check(common),
        Verb::ExportCdf(common) => cmd_export_cdf(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut table = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::io(format!("cannot read config {}: {e}", path.display()))
            })?;
            text.parse::<toml::Table>().map_err(|e| {
                Failure::config(format!("config {} does not parse: {e}", path.display()))
            })?
        }
        None => toml::Table::new(),
    };
    for pair in &common.set {
        merge_override(&mut table, pair)?;
    }
    let mut config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Failure::config(format!("bad configuration: {e}")))?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    config.validate().map_err(Failure::from)?;
    Ok(config)
}

/// Applies one `key=value` override. The value is parsed as a TOML literal,
/// falling back to a quoted string, so `n_trials=4`, `hidden=[50]`, and
/// `setting=random` all work; dotted keys reach nested tables.
fn merge_override(table: &mut toml::Table, pair: &str) -> Result<(), Failure> {
    let Some((key, value)) = pair.split_once('=') else {
        return Err(Failure::config(format!("override {pair:?} is not KEY=VALUE")));
    };
    let parsed: toml::Table = format!("{key} = {value}")
        .parse()
        .or_else(|_| format!("{key} = {value:?}").parse())
        .map_err(|e| Failure::config(format!("cannot parse override {pair:?}: {e}")))?;
    deep_merge(table, parsed);
    Ok(())
}

fn deep_merge(into: &mut toml::Table, from: toml::Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => deep_merge(dst, src),
            (_, value) => {
                into.insert(key, value);
            }
        }
    }
}

fn install_pool(jobs: usize) -> Result<(), Failure> {
    if jobs == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Failure::check(format!("cannot size the worker pool: {e}")))
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e-3 && v.abs() < 1e6 {
        format!("{v:.6}")
    } else {
        format!("{v:.4e}")
    }
}

fn cmd_run(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    install_pool(common.jobs)?;
    let experiment = Experiment::new(config.clone())?;
    let records = experiment.run()?;
    let raw_scale = match config.task {
        Task::Regression => experiment.dataset().stats(),
        Task::Classification => None,
    };
    let summary = summarise(
        &records,
        config.outliers_to_nan(),
        experiment.bootstrap_seed(),
        raw_scale,
    );

    harness::export_trajectories(&records, config.setting, &common.out)?;
    let table = merge_summary(&common.out.join("summary.json"), config.setting, &summary)?;
    print_summary_table(&table);
    println!(
        "\n{} trials of {} written to {}",
        records.len(),
        config.setting,
        common.out.display()
    );
    Ok(())
}

/// Inserts this setting's summary into `summary.json`, creating or updating
/// the file, and returns the full table for printing. Keys stay sorted, so
/// repeated runs into one directory accumulate a deterministic table.
fn merge_summary(
    path: &Path,
    setting: Setting,
    summary: &SettingSummary,
) -> Result<serde_json::Map<String, serde_json::Value>, Failure> {
    let mut table: serde_json::Map<String, serde_json::Value> = match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| Failure::io(format!("existing {} is not valid JSON: {e}", path.display())))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => serde_json::Map::new(),
        Err(e) => return Err(Failure::io(format!("cannot read {}: {e}", path.display()))),
    };
    table.insert(
        setting.name().to_string(),
        serde_json::to_value(summary).expect("summary serialises"),
    );
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(table.clone()))
        .expect("summary serialises");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, text).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))?;
    Ok(table)
}

fn print_summary_table(table: &serde_json::Map<String, serde_json::Value>) {
    let f = |v: &serde_json::Value| fmt_f(v.as_f64().unwrap_or(f64::NAN));
    println!(
        "{:<18} {:>22} {:>22} {:>12} {:>5} {:>10}",
        "setting", "mean±se", "median±se", "best", "nan", "runtime_s"
    );
    for (name, entry) in table {
        println!(
            "{:<18} {:>22} {:>22} {:>12} {:>5} {:>10}",
            name,
            format!("{}±{}", f(&entry["mean"]), f(&entry["mean_se"])),
            format!("{}±{}", f(&entry["median"]), f(&entry["median_se"])),
            f(&entry["best"]),
            entry["nan_count"].as_u64().unwrap_or(0),
            f(&entry["mean_runtime_s"]),
        );
    }
}

fn cmd_grid(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    install_pool(common.jobs)?;
    let raw = load_corpus(&config)?;
    let cells = sensitivity_grid(&config, &raw)?;
    let path = common.out.join("grid.csv");
    harness::export_grid(&cells, &path)?;

    println!("median final test loss over {} trials per cell", config.n_trials);
    print!("{:>6}", "t \\ i");
    for &i in &config.grid_i {
        print!(" {i:>12}");
    }
    println!();
    for &t in &config.grid_t {
        print!("{t:>6}");
        for &i in &config.grid_i {
            let cell = cells
                .iter()
                .find(|c| c.t == t && c.i == i)
                .expect("grid covers the full product");
            print!(" {:>12}", fmt_f(cell.median));
        }
        println!();
    }
    println!("\ngrid written to {}", path.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let report = run_gradcheck(args.step, args.tolerance, args.corrupt.as_deref());
    println!(
        "central differences, h = {:.1e}, tolerance = {:.1e}",
        report.step, report.tolerance
    );
    for check in &report.checks {
        println!(
            "{:<24} {:>12.4e}  {}",
            check.primitive,
            check.max_rel_err,
            if check.pass { "ok" } else { "FAIL" }
        );
    }
    let hvp_err = quadratic_hvp_error().map_err(|e| Failure::check(e.to_string()))?;
    let hvp_pass = hvp_err < 1e-10;
    println!(
        "{:<24} {:>12.4e}  {}",
        "hessian_vector_product",
        hvp_err,
        if hvp_pass { "ok" } else { "FAIL" }
    );
    if report.all_pass() && hvp_pass {
        Ok(())
    } else {
        Err(Failure::check("gradient check failed"))
    }
}

/// Worst absolute deviation of a recorded Hessian-vector product from the
/// hand-computed `A v` on the quadratic `0.5 * w' A w` with symmetric `A`.
fn quadratic_hvp_error() -> Result<f64, crate::autodiff::AdError> {
    let n = 5;
    let mut a = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            a[r * n + c] = ((r * 3 + c * 7) % 11) as f64 / 11.0;
        }
        a[r * n + r] += f64::from(n as u32);
    }
    for r in 0..n {
        for c in 0..r {
            let s = 0.5 * (a[r * n + c] + a[c * n + r]);
            a[r * n + c] = s;
            a[c * n + r] = s;
        }
    }
    let w: Vec<f64> = (0..n).map(|k| 0.3 - 0.17 * k as f64).collect();
    let v: Vec<f64> = (0..n).map(|k| 1.0 - 0.4 * k as f64).collect();

    let mut g = Graph::new();
    let a_node = g.constant(Tensor::new(vec![n, n], a.clone()));
    let w_node = g.leaf(Tensor::new(vec![n, 1], w));
    let v_node = g.constant(Tensor::new(vec![n, 1], v.clone()));
    let aw = g.matmul(a_node, w_node)?;
    let waw = g.mul(w_node, aw)?;
    let s = g.sum(waw)?;
    let loss = g.scale_const(s, 0.5)?;

    let grad_nodes = g.grad_recorded(loss, &[w_node])?;
    let hvp_nodes = g.vjp_recorded(&grad_nodes, &[v_node], &[w_node])?;
    let hvp = g.value(hvp_nodes[0]);

    let mut worst: f64 = 0.0;
    for r in 0..n {
        let want: f64 = (0..n).map(|c| a[r * n + c] * v[c]).sum();
        worst = worst.max((hvp.data()[r] - want).abs());
    }
    Ok(worst)
}

fn cmd_hypergrad_check(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    install_pool(common.jobs)?;
    let experiment = Experiment::new(config)?;
    let (probes, diverged) = compare_hypergradients(&experiment)?;

    let mut csv = String::from("trial,hyper,neumann_vs_dense,neumann_vs_unrolled\n");
    for probe in &probes {
        for (k, coord) in probe.coords.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                probe.trial_id, coord, probe.vs_dense[k], probe.vs_unrolled[k]
            ));
        }
    }
    fs::create_dir_all(&common.out)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", common.out.display())))?;
    let path = common.out.join("error_table.csv");
    fs::write(&path, csv).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))?;

    println!("worst relative error across {} trials ({} diverged)", probes.len(), diverged);
    println!("{:<12} {:>18} {:>20}", "hyper", "vs dense matrix", "vs exact window");
    if let Some(first) = probes.first() {
        for (k, coord) in first.coords.iter().enumerate() {
            let dense = probes.iter().map(|p| p.vs_dense[k]).fold(0.0, f64::max);
            let unrolled = probes.iter().map(|p| p.vs_unrolled[k]).fold(0.0, f64::max);
            println!("{coord:<12} {:>18} {:>20}", fmt_f(dense), fmt_f(unrolled));
        }
    }
    println!("\nerror table written to {}", path.display());
    Ok(())
}

fn cmd_export_cdf(common: &Common) -> Result<(), Failure> {
    let entries = fs::read_dir(&common.out)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", common.out.display())))?;
    let mut groups: Vec<(Setting, Vec<(usize, f64)>)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Failure::io(e.to_string()))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some((setting, trial)) = parse_trajectory_name(name) else { continue };
        let loss = read_final_test_loss(&entry.path())?;
        match groups.iter_mut().find(|(s, _)| *s == setting) {
            Some((_, list)) => list.push((trial, loss)),
            None => groups.push((setting, vec![(trial, loss)])),
        }
    }
    if groups.is_empty() {
        return Err(Failure::io(format!(
            "no trajectory files found in {}",
            common.out.display()
        )));
    }
    groups.sort_by_key(|(s, _)| s.name());
    let finals: Vec<(Setting, Vec<f64>)> = groups
        .into_iter()
        .map(|(setting, mut list)| {
            list.sort_by_key(|(trial, _)| *trial);
            (setting, list.into_iter().map(|(_, loss)| loss).collect())
        })
        .collect();
    let path = common.out.join("cdf.csv");
    harness::export_cdf(&finals, &path)?;
    for (setting, values) in &finals {
        let finite = values.iter().filter(|v| v.is_finite()).count();
        println!("{}: {} trials, {} finite", setting, values.len(), finite);
    }
    println!("cdf written to {}", path.display());
    Ok(())
}

fn parse_trajectory_name(name: &str) -> Option<(Setting, usize)> {
    let stem = name.strip_suffix(".csv")?;
    let (prefix, trial) = stem.rsplit_once("_trial")?;
    let trial: usize = trial.parse().ok()?;
    let setting: Setting = prefix.parse().ok()?;
    Some((setting, trial))
}

/// Reads the last data row of a trajectory CSV and returns its test loss,
/// NaN when that row is marked diverged.
fn read_final_test_loss(path: &Path) -> Result<f64, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?;
    let last = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| Failure::io(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = last.split(',').collect();
    if cols.len() != 8 || cols[0] == "step" {
        return Err(Failure::io(format!("{} has no data rows", path.display())));
    }
    if cols[7] == "diverged_nan" {
        return Ok(f64::NAN);
    }
    cols[3]
        .parse()
        .map_err(|e| Failure::io(format!("{}: bad test loss {:?}: {e}", path.display(), cols[3])))
}
