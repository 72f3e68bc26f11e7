//! Config-driven desk-scale experiments with CSV/JSON artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conserved::{self, ConservedError, QSpec};
use crate::flow::{
    self, EllipseProblem, FlowConfig, FlowError, FlowMode, MlpProblem, NamedQ, RadialReducedProblem,
};
use crate::linalg::{self, LinalgError, Matrix};
use crate::network::EquivarianceClass;
use crate::network::{self, Activation, Batch, LossConvention, MlpParams, NetworkError};
use crate::nonlinear::{self, NonlinearError};
use crate::symmetry;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("sampling budget exhausted: {0}")]
    Budget(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Nonlinear(#[from] NonlinearError),
    #[error(transparent)]
    Conserved(#[from] ConservedError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub const EXPERIMENTS: [&str; 6] = [
    "q-init",
    "ellipse",
    "convergence-elementwise",
    "radial-convergence",
    "hessian-vs-q",
    "ensemble",
];

/// Top-level experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "empty_object")]
    pub params: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl ExperimentConfig {
    pub fn new(name: &str, seed: u64) -> Self {
        ExperimentConfig {
            name: name.into(),
            seed,
            out_dir: None,
            params: empty_object(),
        }
    }

    pub fn with_params(mut self, params: serde_json::Value) -> Self {
        self.params = params;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format!("{x:.16e}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.into())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width in table {}",
            self.name
        );
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub comparison: String,
    pub table: String,
    pub asserted: bool,
}

#[derive(Clone, Copy)]
enum Cmp {
    Le,
    Gt,
    Ge,
}

fn verdict(name: &str, measured: f64, cmp: Cmp, threshold: f64, table: &str) -> Verdict {
    let (passed, comparison) = match cmp {
        Cmp::Le => (measured <= threshold, "<="),
        Cmp::Gt => (measured > threshold, ">"),
        Cmp::Ge => (measured >= threshold, ">="),
    };
    Verdict {
        name: name.into(),
        passed,
        measured,
        threshold,
        comparison: comparison.into(),
        table: table.into(),
        asserted: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub config: serde_json::Value,
    pub resolved_params: serde_json::Value,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
    pub tables: Vec<Table>,
    pub provenance: Provenance,
}

impl ExperimentResult {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Writes `<root>/<name>/tables/*.csv` and `<root>/<name>/result.json`.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(&self.name);
        for t in &self.tables {
            write_atomic(
                &dir.join("tables").join(format!("{}.csv", t.name)),
                t.to_csv().as_bytes(),
            )?;
        }
        let mut json = self.to_json();
        json.push('\n');
        write_atomic(&dir.join("result.json"), json.as_bytes())?;
        Ok(dir)
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io)?;
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(".{file_name}.{}.tmp", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(io)
}

fn parse_params<P: DeserializeOwned + Serialize>(
    v: &serde_json::Value,
) -> Result<(P, serde_json::Value)> {
    let p: P =
        serde_json::from_value(v.clone()).map_err(|e| ExperimentError::Params(e.to_string()))?;
    let resolved = serde_json::to_value(&p)?;
    Ok((p, resolved))
}

fn rng_for(seed: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ idx)
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Spearman rank correlation with average ranks for ties; 0 for constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn act_label(a: &Activation) -> String {
    match a {
        Activation::LeakyReLU { slope } => format!("leakyrelu{slope}"),
        Activation::HomogeneousPower { alpha } => format!("power{alpha}"),
        other => format!("{other:?}").to_lowercase(),
    }
}

/// Runs the experiment named in `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (tables, verdicts, resolved) = match cfg.name.as_str() {
        "q-init" => exp_q_init(cfg)?,
        "ellipse" => exp_ellipse(cfg)?,
        "convergence-elementwise" => exp_convergence_elementwise(cfg)?,
        "radial-convergence" => exp_radial_convergence(cfg)?,
        "hessian-vs-q" => exp_hessian_vs_q(cfg)?,
        "ensemble" => exp_ensemble(cfg)?,
        other => return Err(ExperimentError::UnknownExperiment(other.into())),
    };
    for v in &verdicts {
        debug_assert!(
            tables.iter().any(|t| t.name == v.table),
            "verdict {} has no table",
            v.name
        );
    }
    let config = serde_json::to_value(cfg)?;
    let canonical =
        serde_json::to_string(&serde_json::json!({"config": config, "params": resolved}))?;
    let sha256 = Sha256::digest(canonical.as_bytes())
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        seed: cfg.seed,
        passed: verdicts.iter().filter(|v| v.asserted).all(|v| v.passed),
        verdicts,
        tables,
        provenance: Provenance {
            config,
            resolved_params: resolved,
            sha256,
        },
    })
}

type Parts = (Vec<Table>, Vec<Verdict>, serde_json::Value);

// ---------------------------------------------------------------- q-init

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QInitParams {
    /// `(m, h, n)` triples.
    pub dims: Vec<[usize; 3]>,
    pub samples: usize,
    pub bins: usize,
}

impl Default for QInitParams {
    fn default() -> Self {
        QInitParams {
            dims: vec![[100, 100, 100], [200, 100, 100], [100, 200, 100]],
            samples: 1000,
            bins: 40,
        }
    }
}

/// `Tr[UᵀU − VVᵀ]` for one Xavier draw `U ~ N(0, 1/h)`, `V ~ N(0, 1/n)`.
pub fn xavier_q<R: Rng + ?Sized>(m: usize, h: usize, n: usize, rng: &mut R) -> f64 {
    let mut su = 0.0;
    for _ in 0..m * h {
        let z: f64 = rng.sample(StandardNormal);
        su += z * z;
    }
    let mut sv = 0.0;
    for _ in 0..h * n {
        let z: f64 = rng.sample(StandardNormal);
        sv += z * z;
    }
    su / h as f64 - sv / n as f64
}

fn exp_q_init(cfg: &ExperimentConfig) -> Result<Parts> {
    let (p, resolved): (QInitParams, _) = parse_params(&cfg.params)?;
    if p.samples < 100 {
        return Err(ExperimentError::Params(
            "samples must be at least 100".into(),
        ));
    }
    if p.dims.is_empty() || p.bins == 0 || p.dims.iter().any(|d| d.contains(&0)) {
        return Err(ExperimentError::Params(
            "dims must be non-empty and positive".into(),
        ));
    }
    let mut summary = Table::new(
        "q_init_summary",
        &[
            "m",
            "h",
            "n",
            "samples",
            "mean_q",
            "std_err",
            "expected_q",
            "mean_q_half",
            "expected_q_half",
            "z_score",
        ],
    );
    let mut hist = Table::new(
        "q_init_histogram",
        &["m", "h", "n", "bin_lo", "bin_hi", "count"],
    );
    let mut verdicts = Vec::new();
    for (d, &[m, h, n]) in p.dims.iter().enumerate() {
        let qs: Vec<f64> = (0..p.samples)
            .into_par_iter()
            .map(|s| xavier_q(m, h, n, &mut rng_for(cfg.seed, (d * p.samples + s) as u64)))
            .collect();
        let k = qs.len() as f64;
        let mean = qs.iter().sum::<f64>() / k;
        let var = qs.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        let expected = m as f64 - h as f64;
        let z = (mean - expected).abs() / se;
        summary.push(vec![
            m.into(),
            h.into(),
            n.into(),
            p.samples.into(),
            mean.into(),
            se.into(),
            expected.into(),
            (0.5 * mean).into(),
            (0.5 * expected).into(),
            z.into(),
        ]);
        let lo = qs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / p.bins as f64).max(f64::MIN_POSITIVE);
        let mut counts = vec![0usize; p.bins];
        for q in &qs {
            counts[(((q - lo) / width) as usize).min(p.bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            hist.push(vec![
                m.into(),
                h.into(),
                n.into(),
                (lo + b as f64 * width).into(),
                (lo + (b + 1) as f64 * width).into(),
                (*c).into(),
            ]);
        }
        verdicts.push(verdict(
            &format!("mean_q_m{m}_h{h}_n{n}"),
            z,
            Cmp::Le,
            4.0,
            "q_init_summary",
        ));
    }
    Ok((vec![summary, hist], verdicts, resolved))
}

// ---------------------------------------------------------------- ellipse

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllipseParams {
    pub a_values: Vec<f64>,
    pub q_grid: Vec<f64>,
    pub l0: f64,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
}

impl Default for EllipseParams {
    fn default() -> Self {
        EllipseParams {
            a_values: vec![1.0, 3.0],
            q_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            l0: 1.0,
            dt: 1e-3,
            t_end: 1.0,
            record_every: 10,
        }
    }
}

/// Point with `w₁² + a w₂² = L₀` and `w₁^{2a}/w₂² = Q`, both coordinates positive.
pub fn ellipse_init(a: f64, l0: f64, q: f64) -> Result<[f64; 2]> {
    if !(a > 0.0 && l0 > 0.0 && q > 0.0 && q.is_finite()) {
        return Err(ExperimentError::Infeasible(format!(
            "a = {a}, L0 = {l0}, Q = {q}"
        )));
    }
    let log_q =
        |phi: f64| a * (l0 * phi.cos().powi(2)).ln() + a.ln() - (l0 * phi.sin().powi(2)).ln();
    let (mut lo, mut hi) = (0.0f64, std::f64::consts::FRAC_PI_2);
    let target = q.ln();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_q(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let phi = 0.5 * (lo + hi);
    let w = [l0.sqrt() * phi.cos(), (l0 / a).sqrt() * phi.sin()];
    let got = conserved::q_ellipse(&w, a)?;
    if !((got - q).abs() <= 1e-8 * q) {
        return Err(ExperimentError::Infeasible(format!(
            "Q = {q} not reachable on L0 = {l0}"
        )));
    }
    Ok(w)
}

fn exp_ellipse(cfg: &ExperimentConfig) -> Result<Parts> {
    let (p, resolved): (EllipseParams, _) = parse_params(&cfg.params)?;
    if p.a_values.is_empty() || p.q_grid.is_empty() {
        return Err(ExperimentError::Params(
            "a_values and q_grid must be non-empty".into(),
        ));
    }
    if !(p.dt > 0.0 && p.t_end > 0.0) || p.record_every == 0 {
        return Err(ExperimentError::Params(
            "dt, t_end and record_every must be positive".into(),
        ));
    }
    let steps = (p.t_end / p.dt).round() as usize;
    let mut curves = Table::new(
        "ellipse_curves",
        &["a", "q", "step", "time", "loss_rk4", "loss_exact"],
    );
    let mut finals = Table::new("ellipse_final", &["a", "q", "loss_t", "q_drift"]);
    let mut verdicts = Vec::new();
    let mut max_err = 0.0f64;
    for &a in &p.a_values {
        let prob = EllipseProblem { a };
        let mut fc = FlowConfig::new(FlowMode::RK4 { dt: p.dt }, steps);
        fc.record_every = p.record_every;
        fc.gtol = 0.0;
        fc.snapshots = true;
        fc.q_specs = vec![NamedQ::new(QSpec::EllipseQ { a })];
        let runs: Vec<_> = p
            .q_grid
            .par_iter()
            .map(|&q| {
                let w0 = ellipse_init(a, p.l0, q)?;
                Ok((q, w0, flow::run(&prob, &w0, &fc)?))
            })
            .collect::<Result<_>>()?;
        let mut final_losses = Vec::new();
        for (q, w0, t) in &runs {
            for r in 0..t.len() {
                let e = prob.exact(w0, t.times[r]);
                let exact = e[0] * e[0] + a * e[1] * e[1];
                let snap = &t.snapshots.as_ref().expect("snapshots on")[r];
                max_err = max_err
                    .max((t.loss[r] - exact).abs())
                    .max((snap[0] - e[0]).abs())
                    .max((snap[1] - e[1]).abs());
                curves.push(vec![
                    a.into(),
                    (*q).into(),
                    t.steps[r].into(),
                    t.times[r].into(),
                    t.loss[r].into(),
                    exact.into(),
                ]);
            }
            final_losses.push(t.final_loss());
            finals.push(vec![
                a.into(),
                (*q).into(),
                t.final_loss().into(),
                t.relative_drift(0).into(),
            ]);
        }
        let hi = final_losses
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = final_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let spread = (hi - lo) / hi.abs().max(f64::MIN_POSITIVE);
        if a == 1.0 {
            verdicts.push(verdict(
                "q_independent_a1",
                spread,
                Cmp::Le,
                1e-9,
                "ellipse_final",
            ));
        } else {
            verdicts.push(verdict(
                &format!("q_dependent_a{a}"),
                spread,
                Cmp::Gt,
                1e-3,
                "ellipse_final",
            ));
        }
    }
    verdicts.push(verdict(
        "rk4_matches_closed_form",
        max_err,
        Cmp::Le,
        1e-6,
        "ellipse_curves",
    ));
    Ok((vec![curves, finals], verdicts, resolved))
}

// ---------------------------------------------------------------- convergence-elementwise

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceParams {
    pub activations: Vec<Activation>,
    pub variance_grid: Vec<f64>,
    pub lr: f64,
    pub steps: usize,
    /// `(m, h, n)`; the input is `I_n`.
    pub dims: [usize; 3],
    pub threshold_frac: f64,
    pub record_every: usize,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        ConvergenceParams {
            activations: vec![
                Activation::Identity,
                Activation::LeakyReLU { slope: 0.0 },
                Activation::Tanh,
                Activation::Sigmoid,
            ],
            variance_grid: vec![0.01, 0.1, 0.5, 1.0, 2.0],
            lr: 0.005,
            steps: 4000,
            dims: [5, 20, 10],
            threshold_frac: 0.05,
            record_every: 10,
        }
    }
}

/// Initial conserved value: the elementwise integral when available, otherwise `½Tr[UᵀU − VVᵀ]`.
fn init_q(u: &Matrix, v: &Matrix, act: &Activation) -> Result<f64> {
    match conserved::q_elementwise_integral(u, v, act, 0.0) {
        Ok(q) => Ok(q),
        Err(ConservedError::NoAntiderivative(_)) => {
            Ok(-0.5 * conserved::q_imbalance_matrix(u, v)?.trace())
        }
        Err(e) => Err(e.into()),
    }
}

fn exp_convergence_elementwise(cfg: &ExperimentConfig) -> Result<Parts> {
    let (p, resolved): (ConvergenceParams, _) = parse_params(&cfg.params)?;
    if p.activations.is_empty() || p.variance_grid.is_empty() {
        return Err(ExperimentError::Params(
            "activations and variance_grid must be non-empty".into(),
        ));
    }
    if p.variance_grid.iter().any(|v| !(*v > 0.0))
        || !(p.lr > 0.0)
        || p.steps == 0
        || p.record_every == 0
    {
        return Err(ExperimentError::Params(
            "variances, lr, steps and record_every must be positive".into(),
        ));
    }
    for a in &p.activations {
        let ok = matches!(
            a,
            Activation::Identity
                | Activation::Tanh
                | Activation::Sigmoid
                | Activation::LeakyReLU { .. }
        );
        if !ok {
            return Err(ExperimentError::Params(format!(
                "unsupported activation {a:?}"
            )));
        }
        a.validate()?;
    }
    let [m, h, n] = p.dims;
    let mut rng = rng_for(cfg.seed, 0);
    let y = gaussian(m, n, 1.0, &mut rng);
    let gu = gaussian(m, h, 1.0, &mut rng);
    let gv = gaussian(h, n, (1.0 / n as f64).sqrt(), &mut rng);
    let batch = Batch::new(Matrix::identity(n), y.clone())?;
    let threshold = p.threshold_frac * y.dot(&y);
    let jobs: Vec<(usize, usize)> = (0..p.activations.len())
        .flat_map(|a| (0..p.variance_grid.len()).map(move |v| (a, v)))
        .collect();
    let runs: Vec<_> = jobs
        .par_iter()
        .map(|&(ai, vi)| {
            let act = p.activations[ai];
            let u = gu.scale(p.variance_grid[vi].sqrt());
            let q0 = init_q(&u, &gv, &act)?;
            let params = MlpParams::two_layer(u, gv.clone())?;
            let mut fc = FlowConfig::new(FlowMode::GD { lr: p.lr }, p.steps);
            fc.record_every = p.record_every;
            fc.gtol = 0.0;
            let t = flow::run_gd(
                &params,
                &[act, Activation::Identity],
                &batch,
                LossConvention::Sum,
                &fc,
            )?;
            Ok((ai, vi, q0, t))
        })
        .collect::<Result<_>>()?;
    let mut curves = Table::new(
        "convergence_curves",
        &["activation", "variance", "q0", "step", "loss"],
    );
    let mut summary = Table::new(
        "convergence_summary",
        &[
            "activation",
            "variance",
            "q0",
            "steps_to_threshold",
            "final_loss",
            "threshold",
        ],
    );
    let mut corr = Table::new(
        "convergence_correlation",
        &["activation", "spearman_q0_steps", "distinct_steps"],
    );
    let mut verdicts = Vec::new();
    for (ai, act) in p.activations.iter().enumerate() {
        let label = act_label(act);
        let mut qs = Vec::new();
        let mut st = Vec::new();
        for (_, vi, q0, t) in runs.iter().filter(|r| r.0 == ai) {
            let var = p.variance_grid[*vi];
            for r in 0..t.len() {
                curves.push(vec![
                    label.clone().into(),
                    var.into(),
                    (*q0).into(),
                    t.steps[r].into(),
                    t.loss[r].into(),
                ]);
            }
            let hit = t
                .steps
                .iter()
                .zip(&t.loss)
                .find(|(_, l)| **l <= threshold)
                .map_or(p.steps + 1, |(s, _)| *s);
            summary.push(vec![
                label.clone().into(),
                var.into(),
                (*q0).into(),
                hit.into(),
                t.final_loss().into(),
                threshold.into(),
            ]);
            qs.push(*q0);
            st.push(hit as f64);
        }
        let mut distinct = st.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let rho = spearman(&qs, &st);
        corr.push(vec![
            label.clone().into(),
            rho.into(),
            distinct.len().into(),
        ]);
        verdicts.push(verdict(
            &format!("non_constant_{label}"),
            distinct.len() as f64,
            Cmp::Gt,
            1.0,
            "convergence_summary",
        ));
    }
    Ok((vec![curves, summary, corr], verdicts, resolved))
}

// ---------------------------------------------------------------- radial-convergence

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadialParams {
    pub lambda_grid: Vec<f64>,
    pub dt: f64,
    pub t_end: f64,
    /// Shape of the target `Y`.
    pub dims: [usize; 2],
    pub threshold_frac: f64,
    pub record_every: usize,
    pub bound_slack: f64,
}

impl Default for RadialParams {
    fn default() -> Self {
        RadialParams {
            lambda_grid: vec![0.5, 1.0, 2.0, 4.0],
            dt: 1e-3,
            t_end: 40.0,
            dims: [5, 5],
            threshold_frac: 1e-3,
            record_every: 100,
            bound_slack: 1e-6,
        }
    }
}

fn exp_radial_convergence(cfg: &ExperimentConfig) -> Result<Parts> {
    let (p, resolved): (RadialParams, _) = parse_params(&cfg.params)?;
    if p.lambda_grid.is_empty() || p.lambda_grid.iter().any(|l| !(*l > 0.0)) {
        return Err(ExperimentError::Params(
            "lambda_grid must be non-empty and positive".into(),
        ));
    }
    if !(p.dt > 0.0 && p.t_end > 0.0) || p.record_every == 0 || p.dims.contains(&0) {
        return Err(ExperimentError::Params(
            "dt, t_end, dims and record_every must be positive".into(),
        ));
    }
    let mut rng = rng_for(cfg.seed, 0);
    let y = gaussian(p.dims[0], p.dims[1], 1.0, &mut rng);
    let init = flow::spectral_init(&y, &mut rng)?;
    let prob = RadialReducedProblem {
        sigma_y: init.sigma_y.clone(),
    };
    let steps = (p.t_end / p.dt).round() as usize;
    let runs: Vec<_> = p
        .lambda_grid
        .par_iter()
        .map(|&lam| {
            let scale: Vec<f64> = init
                .u_bar
                .iter()
                .zip(&init.v_bar)
                .map(|(u, v)| (lam / (u * u + v * v)).sqrt())
                .collect();
            let u: Vec<f64> = init.u_bar.iter().zip(&scale).map(|(u, s)| u * s).collect();
            let v: Vec<f64> = init.v_bar.iter().zip(&scale).map(|(v, s)| v * s).collect();
            let theta: Vec<f64> = u.iter().chain(&v).copied().collect();
            let mut fc = FlowConfig::new(FlowMode::RK4 { dt: p.dt }, steps);
            fc.record_every = p.record_every;
            fc.gtol = 0.0;
            fc.snapshots = true;
            fc.q_specs = vec![NamedQ::new(QSpec::RadialSpectralLambda)];
            Ok((lam, theta.clone(), flow::run(&prob, &theta, &fc)?))
        })
        .collect::<Result<_>>()?;
    let mut curves = Table::new(
        "radial_curves",
        &["lambda", "step", "time", "loss", "bound_violation"],
    );
    let mut summary = Table::new(
        "radial_summary",
        &[
            "lambda",
            "time_to_threshold",
            "max_bound_violation",
            "lambda_drift",
        ],
    );
    let mut worst = 0.0f64;
    let mut times = Vec::new();
    for (lam, theta0, t) in &runs {
        let sx0 = prob.sigma_x(theta0)?;
        let l0 = t.loss[0];
        let mut run_worst = f64::NEG_INFINITY;
        let mut hit = f64::INFINITY;
        for r in 0..t.len() {
            let sx = prob.sigma_x(&t.snapshots.as_ref().expect("snapshots on")[r])?;
            let mut viol = f64::NEG_INFINITY;
            for i in 0..sx.len() {
                let bound = (sx0[i] - prob.sigma_y[i]).abs() * (-t.times[r] / lam).exp();
                viol = viol.max((sx[i] - prob.sigma_y[i]).abs() - bound);
            }
            run_worst = run_worst.max(viol);
            if hit.is_infinite() && t.loss[r] <= p.threshold_frac * l0 {
                hit = t.times[r];
            }
            curves.push(vec![
                (*lam).into(),
                t.steps[r].into(),
                t.times[r].into(),
                t.loss[r].into(),
                viol.into(),
            ]);
        }
        worst = worst.max(run_worst);
        times.push((*lam, hit));
        summary.push(vec![
            (*lam).into(),
            hit.into(),
            run_worst.into(),
            t.relative_drift(0).into(),
        ]);
    }
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    let inversions = times.windows(2).filter(|w| w[1].1 < w[0].1).count();
    let verdicts = vec![
        verdict(
            "exponential_bound",
            worst,
            Cmp::Le,
            p.bound_slack,
            "radial_curves",
        ),
        verdict(
            "monotone_in_lambda",
            inversions as f64,
            Cmp::Le,
            0.0,
            "radial_summary",
        ),
    ];
    Ok((vec![curves, summary], verdicts, resolved))
}

// ---------------------------------------------------------------- hessian-vs-q

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HessianParams {
    pub q_grid_1d: Vec<f64>,
    /// Initial product `uv` for the scalar problem.
    pub uv0: f64,
    pub dt_1d: f64,
    /// `(m, h, n)` of the linear network.
    pub dims: [usize; 3],
    pub samples: usize,
    pub q_grid: Vec<f64>,
    pub lr: f64,
    pub max_steps: usize,
    pub gtol: f64,
    /// Extra activations whose spectra are emitted without verdicts.
    pub nonlinear_activations: Vec<Activation>,
}

impl Default for HessianParams {
    fn default() -> Self {
        HessianParams {
            q_grid_1d: vec![0.0, 1.0, 3.0],
            uv0: 0.2,
            dt_1d: 1e-2,
            dims: [5, 50, 10],
            samples: 20,
            q_grid: vec![0.0, 2.0, 5.0, 10.0],
            lr: 0.01,
            max_steps: 400_000,
            gtol: 1e-8,
            nonlinear_activations: Vec::new(),
        }
    }
}

/// Rescales `(U, V) ↦ (sU, V/s)` so that `‖U‖² − ‖V‖² = q`.
fn rescale_to_q(u: &Matrix, v: &Matrix, q: f64) -> (Matrix, Matrix) {
    let a = u.dot(u);
    let b = v.dot(v);
    let s2 = (q + (q * q + 4.0 * a * b).sqrt()) / (2.0 * a);
    let s = s2.sqrt();
    (u.scale(s), v.scale(1.0 / s))
}

/// Trains to a minimum and returns the Hessian report plus the final state.
fn train_to_minimum(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    mode: FlowMode,
    max_steps: usize,
    gtol: f64,
) -> Result<(flow::HessianReport, MlpParams, usize)> {
    let mut fc = FlowConfig::new(mode, max_steps);
    fc.gtol = gtol;
    fc.record_every = max_steps;
    let prob = MlpProblem::new(params.clone(), acts.to_vec(), batch.clone(), conv)?;
    let t = flow::run(&prob, &params.flatten(), &fc)?;
    let gnorm = *t.grad_norm.last().expect("recorded");
    if gnorm > gtol {
        return Err(ExperimentError::NotConverged(format!(
            "gradient norm {gnorm:e} after {max_steps} steps exceeds {gtol:e}"
        )));
    }
    let trained = params.with_flat(&t.final_theta)?;
    let (h, _) = flow::hessian_fd_problem(&prob, &t.final_theta, 1e-4)?;
    Ok((
        flow::HessianReport::from_matrix(&h)?,
        trained,
        *t.steps.last().expect("recorded"),
    ))
}

fn exp_hessian_vs_q(cfg: &ExperimentConfig) -> Result<Parts> {
    let (p, resolved): (HessianParams, _) = parse_params(&cfg.params)?;
    if p.q_grid_1d.is_empty() || p.q_grid.is_empty() {
        return Err(ExperimentError::Params("q grids must be non-empty".into()));
    }
    let [m, h, n] = p.dims;
    let total = m * h + h * n;
    if total > flow::HESSIAN_MAX_PARAMS {
        return Err(ExperimentError::Params(format!(
            "{total} parameters exceed the hessian limit"
        )));
    }
    let lin = [Activation::Identity, Activation::Identity];

    let mut t1 = Table::new(
        "hessian_1d",
        &["q", "q_final", "lambda_min", "lambda_max", "predicted_max"],
    );
    let one_d: Vec<_> = p
        .q_grid_1d
        .par_iter()
        .map(|&q| {
            let u2 = 0.5 * (q + (q * q + 4.0 * p.uv0 * p.uv0).sqrt());
            let (u, v) = (u2.sqrt(), p.uv0 / u2.sqrt());
            let params =
                MlpParams::two_layer(Matrix::from_rows(&[&[u]]), Matrix::from_rows(&[&[v]]))?;
            let batch = Batch::new(Matrix::from_rows(&[&[1.0]]), Matrix::from_rows(&[&[1.0]]))?;
            let (rep, trained, _) = train_to_minimum(
                &params,
                &lin,
                &batch,
                LossConvention::Sum,
                FlowMode::RK4 { dt: p.dt_1d },
                p.max_steps,
                1e-10,
            )?;
            let qf = trained.weights[1].dot(&trained.weights[1])
                - trained.weights[0].dot(&trained.weights[0]);
            Ok((q, qf, rep))
        })
        .collect::<Result<_>>()?;
    let mut err_1d = 0.0f64;
    for (q, qf, rep) in &one_d {
        let pred = 2.0 * (q * q + 4.0).sqrt();
        err_1d = err_1d
            .max(rep.eigenvalues[0].abs())
            .max((rep.largest - pred).abs());
        t1.push(vec![
            (*q).into(),
            (*qf).into(),
            rep.eigenvalues[0].into(),
            rep.largest.into(),
            pred.into(),
        ]);
    }

    let mut rng = rng_for(cfg.seed, 0);
    let x = gaussian(n, p.samples, 1.0, &mut rng);
    let w_star = gaussian(m, n, (1.0 / n as f64).sqrt(), &mut rng);
    let batch = Batch::new(x.clone(), &w_star * &x)?;
    let u_init = gaussian(m, h, (1.0 / h as f64).sqrt(), &mut rng);
    let v_init = gaussian(h, n, (1.0 / n as f64).sqrt(), &mut rng);
    let predicted = symmetry::orbit_dimension_generic(EquivarianceClass::FullGL, n, h, m)
        .map_err(|e| ExperimentError::Params(e.to_string()))?;

    let mut jobs: Vec<(Activation, f64)> = p
        .q_grid
        .iter()
        .map(|q| (Activation::Identity, *q))
        .collect();
    for a in &p.nonlinear_activations {
        a.validate()?;
        jobs.extend(p.q_grid.iter().map(|q| (*a, *q)));
    }
    let multi: Vec<_> = jobs
        .par_iter()
        .map(|&(act, q)| {
            let (u, v) = rescale_to_q(&u_init, &v_init, q);
            let params = MlpParams::two_layer(u, v)?;
            let (rep, trained, steps) = train_to_minimum(
                &params,
                &[act, Activation::Identity],
                &batch,
                LossConvention::Mean,
                FlowMode::GD { lr: p.lr },
                p.max_steps,
                p.gtol,
            )?;
            let qf = trained.weights[1].dot(&trained.weights[1])
                - trained.weights[0].dot(&trained.weights[0]);
            Ok((act, q, qf, rep, steps))
        })
        .collect::<Result<_>>()?;
    let mut eigs = Table::new(
        "hessian_eigenvalues",
        &["activation", "q", "index", "eigenvalue"],
    );
    let mut summary = Table::new(
        "hessian_summary",
        &[
            "activation",
            "q",
            "q_final",
            "steps",
            "near_zero",
            "predicted_near_zero",
            "mean_surviving",
            "largest",
        ],
    );
    let mut lin_q = Vec::new();
    let mut lin_mean = Vec::new();
    let mut count_err = 0usize;
    for (act, q, qf, rep, steps) in &multi {
        let label = act_label(act);
        let surv = rep.surviving();
        let mean = surv.iter().sum::<f64>() / surv.len().max(1) as f64;
        for (i, e) in surv.iter().enumerate() {
            eigs.push(vec![
                label.clone().into(),
                (*q).into(),
                i.into(),
                (*e).into(),
            ]);
        }
        summary.push(vec![
            label.clone().into(),
            (*q).into(),
            (*qf).into(),
            (*steps).into(),
            rep.near_zero.into(),
            predicted.into(),
            mean.into(),
            rep.largest.into(),
        ]);
        if *act == Activation::Identity {
            lin_q.push(*qf);
            lin_mean.push(mean);
            count_err = count_err.max(rep.near_zero.abs_diff(predicted));
        }
    }
    let verdicts = vec![
        verdict("one_d_formula", err_1d, Cmp::Le, 1e-3, "hessian_1d"),
        verdict(
            "q_vs_mean_eigenvalue",
            spearman(&lin_q, &lin_mean),
            Cmp::Gt,
            0.0,
            "hessian_summary",
        ),
        verdict(
            "near_zero_count",
            count_err as f64,
            Cmp::Le,
            0.0,
            "hessian_summary",
        ),
    ];
    Ok((vec![t1, eigs, summary], verdicts, resolved))
}

// ---------------------------------------------------------------- ensemble

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMethod {
    Group,
    Ginv,
    Random,
    Shuffle,
    PermInterp,
}

impl TransformMethod {
    pub fn label(self) -> &'static str {
        match self {
            TransformMethod::Group => "group",
            TransformMethod::Ginv => "ginv",
            TransformMethod::Random => "random",
            TransformMethod::Shuffle => "shuffle",
            TransformMethod::PermInterp => "perm_interp",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleParams {
    pub classes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub anchors: usize,
    pub center_scale: f64,
    pub blob_std: f64,
    pub slope: f64,
    pub train_lr: f64,
    pub train_steps: usize,
    pub epsilons: Vec<f64>,
    pub n_transforms: usize,
    pub methods: Vec<TransformMethod>,
    pub attack_strengths: Vec<f64>,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            classes: 3,
            dim: 4,
            hidden: 16,
            train_per_class: 100,
            test_per_class: 100,
            anchors: 48,
            center_scale: 1.5,
            blob_std: 1.0,
            slope: 0.1,
            train_lr: 0.05,
            train_steps: 3000,
            epsilons: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
            n_transforms: 10,
            methods: vec![
                TransformMethod::Group,
                TransformMethod::Ginv,
                TransformMethod::Random,
                TransformMethod::Shuffle,
                TransformMethod::PermInterp,
            ],
            attack_strengths: vec![0.0, 0.05, 0.1, 0.2, 0.4],
        }
    }
}

/// `x′ = x + ε·sign(∇ₓL)` for each column of `x`.
pub fn fgsm_attack(
    params: &MlpParams,
    acts: &[Activation],
    x: &Matrix,
    y: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    let g = network::backprop(
        params,
        acts,
        &Batch::new(x.clone(), y.clone())?,
        LossConvention::Mean,
    )?;
    Ok(fgsm_from_gradient(x, &g.input, eps))
}

fn fgsm_from_gradient(x: &Matrix, grad: &Matrix, eps: f64) -> Matrix {
    if eps == 0.0 {
        return x.clone();
    }
    x.zip_with(grad, |xi, gi| {
        let s = if gi > 0.0 {
            1.0
        } else if gi < 0.0 {
            -1.0
        } else {
            0.0
        };
        xi + eps * s
    })
    .expect("same shape")
}

/// Gradient of `Σ_t L(θ_t, (x, y))` with respect to `x`.
fn ensemble_input_gradient(
    members: &[MlpParams],
    acts: &[Activation],
    x: &Matrix,
    y: &Matrix,
) -> Result<Matrix> {
    let batch = Batch::new(x.clone(), y.clone())?;
    let mut total = Matrix::zeros(x.rows(), x.cols());
    for m in members {
        total = &total + &network::backprop(m, acts, &batch, LossConvention::Mean)?.input;
    }
    Ok(total)
}

fn argmax_columns(f: &Matrix) -> Vec<usize> {
    (0..f.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..f.rows() {
                if f[(i, j)] > f[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Majority vote of member argmaxes; ties go to the smallest class index.
pub fn majority_vote(
    members: &[MlpParams],
    acts: &[Activation],
    x: &Matrix,
    classes: usize,
) -> Result<Vec<usize>> {
    let mut votes = vec![vec![0usize; classes]; x.cols()];
    for m in members {
        let out = network::forward(m, acts, x)?;
        for (j, c) in argmax_columns(out.output()).into_iter().enumerate() {
            votes[j][c] += 1;
        }
    }
    Ok(votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Gaussian-blob classification data with one-hot targets.
struct Blobs {
    x: Matrix,
    y: Matrix,
    labels: Vec<usize>,
}

fn blobs<R: Rng + ?Sized>(centers: &Matrix, per_class: usize, std: f64, rng: &mut R) -> Blobs {
    let (classes, dim) = centers.shape();
    let k = classes * per_class;
    let labels: Vec<usize> = (0..k).map(|j| j % classes).collect();
    let mut x = Matrix::zeros(dim, k);
    let mut y = Matrix::zeros(classes, k);
    for (j, &c) in labels.iter().enumerate() {
        for d in 0..dim {
            x[(d, j)] = centers[(c, d)] + std * rng.sample::<f64, _>(StandardNormal);
        }
        y[(c, j)] = 1.0;
    }
    Blobs { x, y, labels }
}

/// `π(g, H) = σ(H) σ(gH)^†`.
pub fn pi_pseudo_inverse(act: &Activation, g: &Matrix, h: &Matrix) -> Result<Matrix> {
    let s = network::activation_apply(act, h)?;
    let sg = network::activation_apply(act, &(g * h))?;
    Ok(&s * &linalg::pseudo_inverse(&sg, 1e-10)?)
}

struct Transformed {
    params: MlpParams,
    anchor_error: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn transform_model<R: Rng + ?Sized>(
    method: TransformMethod,
    base: &MlpParams,
    act: &Activation,
    anchors: &Matrix,
    eps: f64,
    rng: &mut R,
) -> Result<Transformed> {
    let v = &base.weights[0];
    let u = &base.weights[1];
    let h = v.rows();
    for _ in 0..50 {
        let mm = gaussian(h, h, 1.0 / (h as f64).sqrt(), rng);
        let g = &Matrix::identity(h) + &mm.scale(eps);
        let out = match method {
            TransformMethod::Group => {
                let j = rng.gen_range(0..anchors.cols());
                let x = anchors.column(j);
                match nonlinear::apply_nonlinear_action(u, v, &x, &g, act) {
                    Ok((u2, v2)) => {
                        let p2 = MlpParams::two_layer(u2, v2)?;
                        let acts = [*act, Activation::Identity];
                        let col = Matrix::column_vector(&x);
                        let before = network::forward(base, &acts, &col)?;
                        let after = network::forward(&p2, &acts, &col)?;
                        let err = (before.output() - after.output()).frobenius_norm()
                            / before.output().frobenius_norm().max(f64::MIN_POSITIVE);
                        Some(Transformed {
                            params: p2,
                            anchor_error: Some(err),
                        })
                    }
                    Err(NonlinearError::Degenerate { .. } | NonlinearError::NearZero { .. }) => {
                        None
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            TransformMethod::Ginv => match linalg::inverse(&g) {
                Ok(gi) => Some((u * &gi, &g * v)),
                Err(LinalgError::Singular { .. }) => None,
                Err(e) => return Err(e.into()),
            }
            .map(|(a, b)| {
                MlpParams::two_layer(a, b).map(|params| Transformed {
                    params,
                    anchor_error: None,
                })
            })
            .transpose()?,
            TransformMethod::Random => {
                let d: Vec<f64> = (0..h)
                    .map(|_| 1.0 + eps * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Some(Transformed {
                    params: MlpParams::two_layer(u * &Matrix::diag(&d), &g * v)?,
                    anchor_error: None,
                })
            }
            TransformMethod::Shuffle => {
                let pi = pi_pseudo_inverse(act, &g, &(v * anchors))?;
                let mut entries = pi.into_data();
                entries.shuffle(rng);
                let pi = Matrix::new(h, h, entries)?;
                Some(Transformed {
                    params: MlpParams::two_layer(u * &pi, &g * v)?,
                    anchor_error: None,
                })
            }
            TransformMethod::PermInterp => {
                let mut perm: Vec<usize> = (0..h).collect();
                perm.shuffle(rng);
                let s = Matrix::from_fn(h, h, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
                let p = (&Matrix::identity(h) + &(&Matrix::identity(h) + &s).scale(0.5 * eps))
                    .scale(1.0 / (1.0 + eps));
                match linalg::inverse(&p) {
                    Ok(pi) => Some(Transformed {
                        params: MlpParams::two_layer(u * &pi, &p * v)?,
                        anchor_error: None,
                    }),
                    Err(LinalgError::Singular { .. }) => None,
                    Err(e) => return Err(e.into()),
                }
            }
        };
        if let Some(t) = out {
            return Ok(t);
        }
    }
    Err(ExperimentError::Budget(format!(
        "{} transform at eps = {eps}",
        method.label()
    )))
}

fn exp_ensemble(cfg: &ExperimentConfig) -> Result<Parts> {
    let (p, resolved): (EnsembleParams, _) = parse_params(&cfg.params)?;
    if p.epsilons.is_empty() || p.methods.is_empty() || p.attack_strengths.is_empty() {
        return Err(ExperimentError::Params("grids must be non-empty".into()));
    }
    if p.n_transforms == 0 || p.classes < 2 || p.dim == 0 || p.hidden == 0 || p.anchors == 0 {
        return Err(ExperimentError::Params("sizes must be positive".into()));
    }
    if p.epsilons
        .iter()
        .chain(&p.attack_strengths)
        .any(|e| !(*e >= 0.0))
    {
        return Err(ExperimentError::Params(
            "epsilons and attack strengths must be non-negative".into(),
        ));
    }
    let act = Activation::LeakyReLU { slope: p.slope };
    act.validate()?;
    let acts = [act, Activation::Identity];

    let mut rng = rng_for(cfg.seed, 0);
    let centers = gaussian(p.classes, p.dim, p.center_scale, &mut rng);
    let train = blobs(&centers, p.train_per_class, p.blob_std, &mut rng);
    let test = blobs(&centers, p.test_per_class, p.blob_std, &mut rng);
    let anchor_per_class = p.anchors.div_ceil(p.classes);
    let anchors = blobs(&centers, anchor_per_class, p.blob_std, &mut rng).x;
    let init = MlpParams::two_layer(
        gaussian(
            p.classes,
            p.hidden,
            (1.0 / p.hidden as f64).sqrt(),
            &mut rng,
        ),
        gaussian(p.hidden, p.dim, (1.0 / p.dim as f64).sqrt(), &mut rng),
    )?;
    let mut fc = FlowConfig::new(FlowMode::GD { lr: p.train_lr }, p.train_steps);
    fc.record_every = p.train_steps;
    let trained = flow::run_gd(
        &init,
        &acts,
        &Batch::new(train.x.clone(), train.y.clone())?,
        LossConvention::Mean,
        &fc,
    )?;
    let base = init.with_flat(&trained.final_theta)?;
    let test_batch = Batch::new(test.x.clone(), test.y.clone())?;
    let base_loss = network::loss_mse(&base, &acts, &test_batch, LossConvention::Mean)?;

    let mut acc_table = Table::new(
        "ensemble_accuracy",
        &[
            "method",
            "epsilon",
            "attack",
            "accuracy",
            "base_accuracy",
            "drop_points",
        ],
    );
    let mut loss_table = Table::new(
        "ensemble_loss",
        &[
            "method",
            "epsilon",
            "mean_member_loss",
            "base_loss",
            "max_anchor_error",
        ],
    );
    let base_acc: Vec<f64> = p
        .attack_strengths
        .iter()
        .map(|&a| {
            let xa = fgsm_attack(&base, &acts, &test.x, &test.y, a)?;
            Ok(accuracy(
                &argmax_columns(network::forward(&base, &acts, &xa)?.output()),
                &test.labels,
            ))
        })
        .collect::<Result<_>>()?;
    for (ai, &a) in p.attack_strengths.iter().enumerate() {
        acc_table.push(vec![
            "base".into(),
            0.0.into(),
            a.into(),
            base_acc[ai].into(),
            base_acc[ai].into(),
            0.0.into(),
        ]);
    }

    let jobs: Vec<(usize, usize)> = (0..p.methods.len())
        .flat_map(|m| (0..p.epsilons.len()).map(move |e| (m, e)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(mi, ei)| {
            let method = p.methods[mi];
            let eps = p.epsilons[ei];
            let members: Vec<Transformed> = (0..p.n_transforms)
                .map(|t| {
                    let idx = ((mi * p.epsilons.len() + ei) * p.n_transforms + t + 1) as u64;
                    transform_model(
                        method,
                        &base,
                        &act,
                        &anchors,
                        eps,
                        &mut rng_for(cfg.seed, idx),
                    )
                })
                .collect::<Result<_>>()?;
            let anchor_err = members
                .iter()
                .filter_map(|m| m.anchor_error)
                .fold(0.0f64, f64::max);
            let members: Vec<MlpParams> = members.into_iter().map(|m| m.params).collect();
            let mut loss = 0.0;
            for m in &members {
                loss += network::loss_mse(m, &acts, &test_batch, LossConvention::Mean)?;
            }
            let grad = ensemble_input_gradient(&members, &acts, &test.x, &test.y)?;
            let accs: Vec<f64> = p
                .attack_strengths
                .iter()
                .map(|&a| {
                    let xa = fgsm_from_gradient(&test.x, &grad, a);
                    Ok(accuracy(
                        &majority_vote(&members, &acts, &xa, p.classes)?,
                        &test.labels,
                    ))
                })
                .collect::<Result<_>>()?;
            let identical = members.iter().all(|m| *m == base);
            Ok((
                mi,
                ei,
                loss / members.len() as f64,
                anchor_err,
                accs,
                identical,
            ))
        })
        .collect::<Result<_>>()?;

    let clean = p.attack_strengths.iter().position(|a| *a == 0.0);
    let positive: Vec<f64> = p.epsilons.iter().copied().filter(|e| *e > 0.0).collect();
    let smallest = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let mut verdicts = Vec::new();
    let mut group_clean: BTreeMap<usize, f64> = BTreeMap::new();
    let mut anchor_worst = 0.0f64;
    for (mi, ei, loss, anchor_err, accs, identical) in &results {
        let method = p.methods[*mi];
        let eps = p.epsilons[*ei];
        for (ai, &a) in p.attack_strengths.iter().enumerate() {
            acc_table.push(vec![
                method.label().into(),
                eps.into(),
                a.into(),
                accs[ai].into(),
                base_acc[ai].into(),
                (100.0 * (base_acc[ai] - accs[ai])).into(),
            ]);
        }
        loss_table.push(vec![
            method.label().into(),
            eps.into(),
            (*loss).into(),
            base_loss.into(),
            (*anchor_err).into(),
        ]);
        if method == TransformMethod::Group {
            anchor_worst = anchor_worst.max(*anchor_err);
            if let Some(c) = clean {
                group_clean.insert(*ei, accs[c]);
            }
            if eps == 0.0 {
                verdicts.push(verdict(
                    "eps0_identical",
                    if *identical { 0.0 } else { 1.0 },
                    Cmp::Le,
                    0.0,
                    "ensemble_accuracy",
                ));
            }
        }
    }
    if p.methods.contains(&TransformMethod::Group) {
        verdicts.push(verdict(
            "group_anchor_preserved",
            anchor_worst,
            Cmp::Le,
            1e-7,
            "ensemble_loss",
        ));
    }
    if let (Some(c), true) = (clean, smallest.is_finite()) {
        for (mi, ei, _, _, accs, _) in &results {
            let method = p.methods[*mi];
            let eps = p.epsilons[*ei];
            let Some(&g) = group_clean.get(ei) else {
                continue;
            };
            if method == TransformMethod::Group {
                if eps == smallest {
                    let drop = 100.0 * (base_acc[c] - g);
                    verdicts.push(verdict(
                        "group_drop_smallest_eps",
                        drop,
                        Cmp::Le,
                        1.0,
                        "ensemble_accuracy",
                    ));
                }
            } else if eps > 0.0 {
                let mut v = verdict(
                    &format!("group_ge_{}_eps{eps}", method.label()),
                    g - accs[c],
                    Cmp::Ge,
                    0.0,
                    "ensemble_accuracy",
                );
                v.asserted = eps == smallest;
                verdicts.push(v);
            }
        }
    }
    Ok((vec![acc_table, loss_table], verdicts, resolved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn unknown_experiment_and_params_rejected() {
        assert!(matches!(
            run_experiment(&ExperimentConfig::new("nope", 1)),
            Err(ExperimentError::UnknownExperiment(_))
        ));
        let cfg =
            ExperimentConfig::new("q-init", 1).with_params(json!({"samples": 100, "bogus": 1}));
        assert!(matches!(
            run_experiment(&cfg),
            Err(ExperimentError::Params(_))
        ));
        let cfg = ExperimentConfig::new("q-init", 1).with_params(json!({"samples": 10}));
        assert!(matches!(
            run_experiment(&cfg),
            Err(ExperimentError::Params(_))
        ));
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"name":"q-init","seed":1,"x":2}"#)
                .is_err()
        );
    }

    #[test]
    fn q_init_small_dims() {
        let cfg = ExperimentConfig::new("q-init", 3)
            .with_params(json!({"dims": [[8, 4, 4], [4, 8, 4]], "samples": 400}));
        let r = run_experiment(&cfg).unwrap();
        assert!(r.passed, "{:?}", r.verdicts);
        assert_eq!(r.table("q_init_summary").unwrap().rows.len(), 2);
    }

    #[test]
    fn ellipse_init_on_level_set() {
        for a in [1.0, 3.0] {
            for q in [0.3, 1.0, 5.0] {
                let w = ellipse_init(a, 2.0, q).unwrap();
                assert!((w[0] * w[0] + a * w[1] * w[1] - 2.0).abs() < 1e-12);
                assert!((conserved::q_ellipse(&w, a).unwrap() - q).abs() < 1e-8 * q);
            }
        }
        assert!(ellipse_init(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn ellipse_experiment_passes() {
        let r = run_experiment(&ExperimentConfig::new("ellipse", 0)).unwrap();
        assert!(r.passed, "{:?}", r.verdicts);
    }

    #[test]
    fn fgsm_zero_and_signs() {
        let mut rng = rng_for(9, 0);
        let p = MlpParams::two_layer(gaussian(2, 4, 1.0, &mut rng), gaussian(4, 3, 1.0, &mut rng))
            .unwrap();
        let acts = [Activation::Tanh, Activation::Identity];
        let x = gaussian(3, 5, 1.0, &mut rng);
        let y = gaussian(2, 5, 1.0, &mut rng);
        assert_eq!(fgsm_attack(&p, &acts, &x, &y, 0.0).unwrap(), x);
        let fd = network::backprop(
            &p,
            &acts,
            &Batch::new(x.clone(), y.clone()).unwrap(),
            LossConvention::Mean,
        )
        .unwrap();
        let xa = fgsm_attack(&p, &acts, &x, &y, 1e-3).unwrap();
        let l0 = network::loss_mse(
            &p,
            &acts,
            &Batch::new(x.clone(), y.clone()).unwrap(),
            LossConvention::Mean,
        )
        .unwrap();
        let l1 = network::loss_mse(
            &p,
            &acts,
            &Batch::new(xa.clone(), y.clone()).unwrap(),
            LossConvention::Mean,
        )
        .unwrap();
        assert!(l1 >= l0);
        for i in 0..3 {
            for j in 0..5 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let b = |x: Matrix| {
                    network::loss_mse(
                        &p,
                        &acts,
                        &Batch::new(x, y.clone()).unwrap(),
                        LossConvention::Mean,
                    )
                    .unwrap()
                };
                let g = (b(xp) - b(xm)) / (2.0 * h);
                assert_eq!(g > 0.0, fd.input[(i, j)] > 0.0);
                assert_eq!((xa[(i, j)] - x[(i, j)]) > 0.0, g > 0.0);
            }
        }
    }

    #[test]
    fn write_is_atomic_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::new("q-init", 5)
            .with_params(json!({"dims": [[3, 3, 3]], "samples": 100, "bins": 5}));
        let a = run_experiment(&cfg).unwrap();
        let out = a.write(dir.path()).unwrap();
        let first = fs::read(out.join("tables/q_init_histogram.csv")).unwrap();
        let json1 = fs::read(out.join("result.json")).unwrap();
        run_experiment(&cfg).unwrap().write(dir.path()).unwrap();
        assert_eq!(
            first,
            fs::read(out.join("tables/q_init_histogram.csv")).unwrap()
        );
        assert_eq!(json1, fs::read(out.join("result.json")).unwrap());
        let leftovers: Vec<_> = fs::read_dir(out.join("tables"))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with(".tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
        let v: serde_json::Value = serde_json::from_slice(&json1).unwrap();
        assert_eq!(v["provenance"]["sha256"].as_str().unwrap().len(), 64);
        assert!(v["verdicts"][0]["threshold"].is_number());
    }

    #[test]
    fn pi_pseudo_inverse_identity_for_full_rank_features() {
        let mut rng = rng_for(11, 0);
        let h = gaussian(3, 6, 1.0, &mut rng);
        let pi = pi_pseudo_inverse(&Activation::Sigmoid, &Matrix::identity(3), &h).unwrap();
        assert!((&pi - &Matrix::identity(3)).max_abs() < 1e-9);
    }
}
