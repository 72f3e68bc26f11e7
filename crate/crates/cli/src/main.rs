use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use noetherkit::conserved::{self, QValue};
use noetherkit::experiments::{self, write_atomic, ExperimentConfig, ExperimentError, Table};
use noetherkit::flow::{self, FlowConfig, NamedQ};
use noetherkit::linalg::{self, Matrix};
use noetherkit::network::{self, Activation, Batch, EquivarianceClass, LossConvention, Model};
use noetherkit::nonlinear::{self, NonlinearError};
use noetherkit::symmetry::{self, GroupKind, HiddenGroupElement, PiRule, PiSpec};

#[derive(Parser, Debug)]
#[command(
    name = "noetherkit",
    version,
    about = "Parameter-space symmetry checks, flows and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Loss invariance, equivariance, orthogonality or anchor invariance of a model.
    Check(Common),
    /// Orbit-dimension formula against the infinitesimal-action rank.
    OrbitDim(Common),
    /// GD or RK4 gradient flow with conserved-quantity tracking.
    Flow(Common),
    /// Loss and conserved quantities along a one-parameter symmetry orbit.
    Qscan(Common),
    /// Symmetry-based ensembles and FGSM sweeps.
    Ensemble(Common),
    /// A named experiment.
    Experiment {
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn experiment_error(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::UnknownExperiment(_)
        | ExperimentError::Params(_)
        | ExperimentError::Infeasible(_) => usage(e),
        other => failure(other),
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_strict<T: DeserializeOwned>(v: serde_json::Value, path: &Path) -> Result<T> {
    serde_json::from_value(v).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_model(config: &Path, model: &Path) -> Result<Model> {
    let path = if model.is_absolute() {
        model.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(model)
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Model::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn out_dir(common: &Common, fallback: Option<PathBuf>) -> PathBuf {
    common
        .out
        .clone()
        .or(fallback)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("NOETHERKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        usage(format!(
            "NOETHERKIT_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(usage)
}

struct Row {
    name: String,
    trials: usize,
    worst: f64,
    threshold: f64,
    passed: bool,
}

fn print_rows(rows: &[Row]) {
    println!(
        "{:<24} {:>7} {:>14} {:>10}  verdict",
        "suite", "trials", "worst", "threshold"
    );
    for r in rows {
        println!(
            "{:<24} {:>7} {:>14.6e} {:>10.1e}  {}",
            r.name,
            r.trials,
            r.worst,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
}

#[derive(Serialize)]
struct RowJson<'a> {
    suite: &'a str,
    trials: usize,
    worst: f64,
    threshold: f64,
    passed: bool,
}

fn write_report(dir: &Path, file: &str, rows: &[Row]) -> Result<()> {
    let json: Vec<RowJson> = rows
        .iter()
        .map(|r| RowJson {
            suite: &r.name,
            trials: r.trials,
            worst: r.worst,
            threshold: r.threshold,
            passed: r.passed,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&json).map_err(failure)?;
    s.push('\n');
    write_atomic(&dir.join(file), s.as_bytes()).map_err(failure)
}

fn verdict_of(rows: &[Row]) -> Result<()> {
    if rows.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(failure("one or more checks failed"))
    }
}

// ---------------------------------------------------------------- check

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum ActionKind {
    #[default]
    Linear,
    Nonlinear,
}

fn default_trials() -> usize {
    20
}

fn default_spread() -> f64 {
    0.5
}

fn default_batch() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckConfig {
    model: PathBuf,
    group: GroupKind,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    action: ActionKind,
    #[serde(default = "default_spread")]
    spread: f64,
    #[serde(default)]
    pi: Option<PiSpec>,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    loss: LossConvention,
    #[serde(default)]
    seed: u64,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn default_pi(acts: &[Activation]) -> PiSpec {
    PiSpec(
        acts[..acts.len() - 1]
            .iter()
            .map(|a| match a {
                Activation::HomogeneousPower { alpha } => PiRule::Power { alpha: *alpha },
                _ => PiRule::Identity,
            })
            .collect(),
    )
}

fn run_check(common: &Common) -> Result<()> {
    let mut cfg: CheckConfig = parse_strict(read_json(&common.config)?, &common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.trials == 0 || cfg.batch_size == 0 || !(cfg.spread >= 0.0) {
        return Err(usage(
            "trials and batch_size must be positive, spread non-negative",
        ));
    }
    let model = load_model(&common.config, &cfg.model)?;
    let params = &model.params;
    let acts = &model.activations;
    if params.depth() < 2 {
        return Err(usage("check needs at least one hidden layer"));
    }
    let hidden = params.widths().hidden().to_vec();
    let pi = cfg.pi.clone().unwrap_or_else(|| default_pi(acts));
    if pi.0.len() != hidden.len() {
        return Err(usage(format!(
            "pi has {} rules for {} hidden layers",
            pi.0.len(),
            hidden.len()
        )));
    }
    let (n_in, n_out) = (params.widths().input(), params.widths().output());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    match cfg.action {
        ActionKind::Linear => {
            let mut loss_worst = 0.0f64;
            let mut eq_worst = 0.0f64;
            let mut orth_worst = 0.0f64;
            let basis = symmetry::hidden_lie_basis(cfg.group, &hidden, symmetry::LiePart::All)
                .map_err(usage)?;
            for _ in 0..cfg.trials {
                let batch = Batch::new(
                    gaussian(n_in, cfg.batch_size, &mut rng),
                    gaussian(n_out, cfg.batch_size, &mut rng),
                )
                .map_err(failure)?;
                let g = symmetry::sample_hidden_element(cfg.group, &hidden, cfg.spread, &mut rng)
                    .map_err(failure)?;
                let moved = symmetry::apply_linear_action(params, &g, &pi).map_err(usage)?;
                let l0 = network::loss_mse(params, acts, &batch, cfg.loss).map_err(failure)?;
                let l1 = network::loss_mse(&moved, acts, &batch, cfg.loss).map_err(failure)?;
                loss_worst = loss_worst.max((l1 - l0).abs() / (1.0 + l0.abs()));
                for (j, gm) in g.layers().iter().enumerate() {
                    let r = symmetry::check_equivariance(&acts[j], gm, pi.rule(j), 4, &mut rng)
                        .map_err(failure)?;
                    eq_worst = eq_worst.max(r);
                }
                for m in &basis {
                    let r =
                        symmetry::check_grad_orthogonality(params, acts, &batch, cfg.loss, m, &pi)
                            .map_err(failure)?;
                    orth_worst = orth_worst.max(r);
                }
            }
            for (name, worst) in [
                ("loss_invariance", loss_worst),
                ("equivariance", eq_worst),
                ("grad_orthogonality", orth_worst),
            ] {
                rows.push(Row {
                    name: name.into(),
                    trials: cfg.trials,
                    worst,
                    threshold: 1e-9,
                    passed: worst <= 1e-9,
                });
            }
        }
        ActionKind::Nonlinear => {
            let mut worst = 0.0f64;
            for _ in 0..cfg.trials {
                let mut done = false;
                for _ in 0..50 {
                    let x: Vec<f64> = (0..n_in).map(|_| rng.sample(StandardNormal)).collect();
                    let g =
                        symmetry::sample_hidden_element(cfg.group, &hidden, cfg.spread, &mut rng)
                            .map_err(failure)?;
                    match nonlinear::apply_nonlinear_action_deep(params, acts, &x, &g) {
                        Ok(moved) => {
                            let xc = Matrix::column_vector(&x);
                            let a = network::forward(params, acts, &xc).map_err(failure)?;
                            let b = network::forward(&moved, acts, &xc).map_err(failure)?;
                            let r = (a.output() - b.output()).frobenius_norm()
                                / a.output().frobenius_norm().max(1e-300);
                            worst = worst.max(r);
                            done = true;
                            break;
                        }
                        Err(
                            NonlinearError::Degenerate { .. } | NonlinearError::NearZero { .. },
                        ) => continue,
                        Err(e) => return Err(failure(e)),
                    }
                }
                if !done {
                    return Err(failure("anchor sampling budget of 50 exhausted"));
                }
            }
            rows.push(Row {
                name: "anchor_invariance".into(),
                trials: cfg.trials,
                worst,
                threshold: 1e-7,
                passed: worst <= 1e-7,
            });
        }
    }
    print_rows(&rows);
    write_report(&out_dir(common, None).join("check"), "report.json", &rows)?;
    verdict_of(&rows)
}

// ---------------------------------------------------------------- orbit-dim

fn default_orbit_trials() -> usize {
    5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrbitConfig {
    n: usize,
    h: usize,
    m: usize,
    class: EquivarianceClass,
    #[serde(default = "default_orbit_trials")]
    trials: usize,
    #[serde(default)]
    seed: u64,
}

fn run_orbit_dim(common: &Common) -> Result<()> {
    let mut cfg: OrbitConfig = parse_strict(read_json(&common.config)?, &common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.n == 0 || cfg.h == 0 || cfg.m == 0 || cfg.trials == 0 {
        return Err(usage("dimensions and trials must be at least 1"));
    }
    let formula =
        symmetry::orbit_dimension_formula(cfg.class, cfg.n, cfg.h, cfg.m).map_err(usage)?;
    let generic =
        symmetry::orbit_dimension_generic(cfg.class, cfg.n, cfg.h, cfg.m).map_err(usage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ranks = (0..cfg.trials)
        .map(|_| symmetry::sample_orbit_dimension(cfg.class, cfg.n, cfg.h, cfg.m, &mut rng))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(failure)?;
    let agree = ranks.iter().all(|r| *r == formula);
    println!("class      {:?}", cfg.class);
    println!("(n,h,m)    ({}, {}, {})", cfg.n, cfg.h, cfg.m);
    println!("formula    {formula}");
    println!("generic    {generic}");
    println!("empirical  {ranks:?}");
    println!("verdict    {}", if agree { "PASS" } else { "FAIL" });
    let json = serde_json::json!({
        "class": cfg.class, "n": cfg.n, "h": cfg.h, "m": cfg.m,
        "formula": formula, "generic": generic, "empirical": ranks, "passed": agree,
    });
    let mut s = serde_json::to_string_pretty(&json).map_err(failure)?;
    s.push('\n');
    write_atomic(
        &out_dir(common, None).join("orbit-dim").join("result.json"),
        s.as_bytes(),
    )
    .map_err(failure)?;
    if agree {
        Ok(())
    } else {
        Err(failure(format!(
            "formula {formula} disagrees with empirical ranks {ranks:?}"
        )))
    }
}

// ---------------------------------------------------------------- flow

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowCliConfig {
    model: PathBuf,
    data: Batch,
    #[serde(default)]
    loss: LossConvention,
    flow: FlowConfig,
    #[serde(default)]
    max_relative_drift: Option<f64>,
}

fn run_flow(common: &Common) -> Result<()> {
    let cfg: FlowCliConfig = parse_strict(read_json(&common.config)?, &common.config)?;
    cfg.flow.validate().map_err(usage)?;
    let model = load_model(&common.config, &cfg.model)?;
    let prob = flow::MlpProblem::new(
        model.params.clone(),
        model.activations.clone(),
        cfg.data,
        cfg.loss,
    )
    .map_err(usage)?;
    let traj = flow::run(&prob, &model.params.flatten(), &cfg.flow).map_err(failure)?;
    let dir = out_dir(common, None).join("flow");
    write_atomic(&dir.join("trajectory.csv"), traj.to_csv().as_bytes()).map_err(failure)?;
    let drifts: Vec<(String, f64)> = traj
        .q_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), traj.relative_drift(i)))
        .collect();
    println!("steps      {}", traj.steps.last().copied().unwrap_or(0));
    println!("stop       {:?}", traj.stop);
    println!(
        "loss       {:.6e} -> {:.6e}",
        traj.loss[0],
        traj.final_loss()
    );
    let mut rows = Vec::new();
    for (name, d) in &drifts {
        let threshold = cfg.max_relative_drift.unwrap_or(f64::INFINITY);
        rows.push(Row {
            name: format!("drift_{name}"),
            trials: 1,
            worst: *d,
            threshold,
            passed: *d <= threshold,
        });
    }
    if !rows.is_empty() {
        print_rows(&rows);
    }
    write_report(&dir, "summary.json", &rows)?;
    verdict_of(&rows)
}

// ---------------------------------------------------------------- qscan

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QscanConfig {
    model: PathBuf,
    data: Batch,
    #[serde(default)]
    loss: LossConvention,
    group: GroupKind,
    t_grid: Vec<f64>,
    #[serde(default)]
    q_specs: Vec<NamedQ>,
    #[serde(default)]
    pi: Option<PiSpec>,
    #[serde(default)]
    seed: u64,
}

/// Random Lie algebra direction: symmetric for GL, diagonal for positive diagonal, antisymmetric for O.
fn random_direction<R: Rng + ?Sized>(kind: GroupKind, h: usize, rng: &mut R) -> Matrix {
    let a = gaussian(h, h, rng);
    match kind {
        GroupKind::GeneralLinear => (&a + &a.transpose()).scale(0.5),
        GroupKind::PositiveDiagonal => Matrix::diag(&a.diagonal()),
        GroupKind::Orthogonal => (&a - &a.transpose()).scale(0.5),
    }
}

fn run_qscan(common: &Common) -> Result<()> {
    let mut cfg: QscanConfig = parse_strict(read_json(&common.config)?, &common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.t_grid.is_empty() {
        return Err(usage("t_grid must be non-empty"));
    }
    let model = load_model(&common.config, &cfg.model)?;
    let hidden = model.params.widths().hidden().to_vec();
    let pi = cfg
        .pi
        .clone()
        .unwrap_or_else(|| default_pi(&model.activations));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs: Vec<Matrix> = hidden
        .iter()
        .map(|&h| random_direction(cfg.group, h, &mut rng))
        .collect();
    let mut cols = vec!["t".to_string(), "loss".into()];
    let mut table_rows = Vec::new();
    let mut losses = Vec::new();
    for &t in &cfg.t_grid {
        let layers = dirs
            .iter()
            .map(|d| Ok((linalg::expm(&d.scale(t)).map_err(failure)?, cfg.group)))
            .collect::<Result<Vec<_>>>()?;
        let layers = layers
            .into_iter()
            .map(|(g, k)| {
                if k == GroupKind::PositiveDiagonal {
                    (Matrix::diag(&g.diagonal()), k)
                } else {
                    (g, k)
                }
            })
            .collect();
        let g = HiddenGroupElement::new(layers).map_err(failure)?;
        let moved = symmetry::apply_linear_action(&model.params, &g, &pi).map_err(usage)?;
        let l =
            network::loss_mse(&moved, &model.activations, &cfg.data, cfg.loss).map_err(usage)?;
        losses.push(l);
        let mut row = vec![format!("{t:.16e}"), format!("{l:.16e}")];
        for q in &cfg.q_specs {
            let v = conserved::evaluate(&q.spec, &moved).map_err(usage)?;
            let comps = v.components();
            if table_rows.is_empty() {
                match v {
                    QValue::Scalar(_) => cols.push(format!("q_{}", q.name)),
                    _ => cols.extend((0..comps.len()).map(|k| format!("q_{}_{k}", q.name))),
                }
            }
            row.extend(comps.iter().map(|x| format!("{x:.16e}")));
        }
        table_rows.push(row);
    }
    let mut csv = cols.join(",");
    csv.push('\n');
    for r in &table_rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    let dir = out_dir(common, None).join("qscan");
    write_atomic(&dir.join("qscan.csv"), csv.as_bytes()).map_err(failure)?;
    let l0 = losses[0];
    let spread = losses.iter().map(|l| (l - l0).abs()).fold(0.0, f64::max) / (1.0 + l0.abs());
    if common.verbose {
        eprint!("{csv}");
    }
    let rows = vec![Row {
        name: "loss_constant".into(),
        trials: cfg.t_grid.len(),
        worst: spread,
        threshold: 1e-9,
        passed: spread <= 1e-9,
    }];
    print_rows(&rows);
    write_report(&dir, "summary.json", &rows)?;
    verdict_of(&rows)
}

// ---------------------------------------------------------------- experiments

fn load_experiment(common: &Common, name: Option<&str>) -> Result<ExperimentConfig> {
    let mut v = read_json(&common.config)?;
    let obj = v.as_object_mut().ok_or_else(|| {
        usage(format!(
            "{}: config must be a JSON object",
            common.config.display()
        ))
    })?;
    match (name, obj.get("name").and_then(|n| n.as_str())) {
        (Some(want), Some(have)) if want != have => {
            return Err(usage(format!(
                "config names experiment {have:?}, command line asks for {want:?}"
            )))
        }
        (Some(want), None) => {
            obj.insert("name".into(), want.into());
        }
        (None, None) => {
            return Err(usage(
                "experiment name missing from command line and config",
            ))
        }
        _ => {}
    }
    if let Some(s) = common.seed {
        obj.insert("seed".into(), s.into());
    }
    parse_strict(v, &common.config)
}

fn print_table_head(t: &Table) {
    eprintln!(
        "table {} ({} rows): {}",
        t.name,
        t.rows.len(),
        t.columns.join(",")
    );
}

fn run_named_experiment(common: &Common, name: Option<&str>) -> Result<()> {
    let cfg = load_experiment(common, name)?;
    if !experiments::EXPERIMENTS.contains(&cfg.name.as_str()) {
        return Err(usage(format!(
            "unknown experiment {:?}; expected one of {}",
            cfg.name,
            experiments::EXPERIMENTS.join(", ")
        )));
    }
    let result = experiments::run_experiment(&cfg).map_err(experiment_error)?;
    let dir = result
        .write(&out_dir(common, cfg.out_dir.clone()))
        .map_err(failure)?;
    for v in &result.verdicts {
        println!(
            "{} {:<36} {:>14.6e} {} {:e}{}",
            if v.passed { "PASS" } else { "FAIL" },
            v.name,
            v.measured,
            v.comparison,
            v.threshold,
            if v.asserted { "" } else { "  (recorded)" }
        );
    }
    if common.verbose {
        result.tables.iter().for_each(print_table_head);
        eprintln!("wrote {}", dir.display());
    }
    if result.passed {
        Ok(())
    } else {
        Err(failure(format!("experiment {} failed", result.name)))
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Check(c) => run_check(c),
        Command::OrbitDim(c) => run_orbit_dim(c),
        Command::Flow(c) => run_flow(c),
        Command::Qscan(c) => run_qscan(c),
        Command::Ensemble(c) => run_named_experiment(c, Some("ensemble")),
        Command::Experiment { name, common } => run_named_experiment(common, name.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) => format!("error: {m}"),
                CliError::Failure(m) => format!("failed: {m}"),
            };
            eprintln!("{msg}");
            ExitCode::from(e.code())
        }
    }
}
