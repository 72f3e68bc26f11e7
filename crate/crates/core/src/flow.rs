//! Gradient descent, RK4 gradient flow, and Hessian spectra.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conserved::{self, ConservedError, QSpec, QValue};
use crate::linalg::{self, LinalgError, Matrix};
use crate::network::{self, Activation, Batch, LossConvention, MlpParams, NetworkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("diverged at step {step}")]
    Divergence { step: usize, last_finite: Vec<f64> },
    #[error("hessian of {params} parameters exceeds the limit of {limit}")]
    CostGuard { params: usize, limit: usize },
    #[error("zero radial coordinate at index {0}")]
    ZeroRadial(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Conserved(#[from] ConservedError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Largest parameter count accepted by [`hessian_fd`].
pub const HESSIAN_MAX_PARAMS: usize = 1024;
/// Eigenvalues with `|λ|` at or below this are counted as zero.
pub const NEAR_ZERO: f64 = 1e-3;

/// A smooth objective on a flat parameter vector.
pub trait FlowProblem: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    fn conserved(&self, spec: &QSpec, theta: &[f64]) -> Result<QValue>;
}

/// Full-batch MSE of an MLP.
#[derive(Clone, Debug)]
pub struct MlpProblem {
    pub template: MlpParams,
    pub acts: Vec<Activation>,
    pub batch: Batch,
    pub conv: LossConvention,
}

impl MlpProblem {
    pub fn new(
        template: MlpParams,
        acts: Vec<Activation>,
        batch: Batch,
        conv: LossConvention,
    ) -> Result<Self> {
        network::loss_mse(&template, &acts, &batch, conv)?;
        Ok(MlpProblem {
            template,
            acts,
            batch,
            conv,
        })
    }

    pub fn params(&self, theta: &[f64]) -> Result<MlpParams> {
        Ok(self.template.with_flat(theta)?)
    }
}

impl FlowProblem for MlpProblem {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(network::loss_mse(
            &self.params(theta)?,
            &self.acts,
            &self.batch,
            self.conv,
        )?)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let g = network::grad(&self.params(theta)?, &self.acts, &self.batch, self.conv)?;
        Ok(g.flatten())
    }

    fn conserved(&self, spec: &QSpec, theta: &[f64]) -> Result<QValue> {
        Ok(conserved::evaluate(spec, &self.params(theta)?)?)
    }
}

/// `L(w₁, w₂) = w₁² + a·w₂²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseProblem {
    pub a: f64,
}

impl EllipseProblem {
    /// Closed-form flow `w₁₀e^{−2t}, w₂₀e^{−2at}`.
    pub fn exact(&self, w0: &[f64], t: f64) -> [f64; 2] {
        [w0[0] * (-2.0 * t).exp(), w0[1] * (-2.0 * self.a * t).exp()]
    }
}

fn expect_dim(theta: &[f64], n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(FlowError::Dimension(format!(
            "expected {n} coordinates, got {}",
            theta.len()
        )));
    }
    Ok(())
}

impl FlowProblem for EllipseProblem {
    fn dim(&self) -> usize {
        2
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        expect_dim(theta, 2)?;
        Ok(theta[0] * theta[0] + self.a * theta[1] * theta[1])
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        expect_dim(theta, 2)?;
        Ok(vec![2.0 * theta[0], 2.0 * self.a * theta[1]])
    }

    fn conserved(&self, spec: &QSpec, theta: &[f64]) -> Result<QValue> {
        match spec {
            QSpec::EllipseQ { a } => Ok(QValue::Scalar(conserved::q_ellipse(theta, *a)?)),
            other => Err(ConservedError::Unsupported(format!("{other:?} on the ellipse")).into()),
        }
    }
}

/// Decoupled spectral coordinates: `θ = (ū, v̄)`, `L = ½Σ(σʸ_i − ū_i/v̄_i)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialReducedProblem {
    pub sigma_y: Vec<f64>,
}

impl RadialReducedProblem {
    fn split<'a>(&self, theta: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        expect_dim(theta, 2 * self.sigma_y.len())?;
        Ok(theta.split_at(self.sigma_y.len()))
    }

    /// `σˣ_i = ū_i / v̄_i`.
    pub fn sigma_x(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (u, v) = self.split(theta)?;
        u.iter()
            .zip(v)
            .enumerate()
            .map(|(i, (u, v))| {
                if *v == 0.0 {
                    Err(FlowError::ZeroRadial(i))
                } else {
                    Ok(u / v)
                }
            })
            .collect()
    }
}

impl FlowProblem for RadialReducedProblem {
    fn dim(&self) -> usize {
        2 * self.sigma_y.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let sx = self.sigma_x(theta)?;
        Ok(0.5
            * sx.iter()
                .zip(&self.sigma_y)
                .map(|(x, y)| (y - x) * (y - x))
                .sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (u, v) = self.split(theta)?;
        let (du, dv) = radial_spectral_rhs(u, v, &self.sigma_y)?;
        Ok(du.iter().chain(&dv).map(|x| -x).collect())
    }

    fn conserved(&self, spec: &QSpec, theta: &[f64]) -> Result<QValue> {
        match spec {
            QSpec::RadialSpectralLambda => {
                let (u, v) = self.split(theta)?;
                Ok(QValue::Vector(conserved::q_radial_spectral(u, v)?))
            }
            other => {
                Err(ConservedError::Unsupported(format!("{other:?} on the reduced flow")).into())
            }
        }
    }
}

/// `ū̇ = (σʸ − ū g)g`, `v̄̇ = (σʸ − ū g)ū g'` with `g(v̄) = 1/v̄`.
pub fn radial_spectral_rhs(u: &[f64], v: &[f64], sigma_y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() || u.len() != sigma_y.len() {
        return Err(FlowError::Dimension("ū, v̄ and σʸ lengths differ".into()));
    }
    let mut du = Vec::with_capacity(u.len());
    let mut dv = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        if v[i] == 0.0 {
            return Err(FlowError::ZeroRadial(i));
        }
        let g = 1.0 / v[i];
        let r = sigma_y[i] - u[i] * g;
        du.push(r * g);
        dv.push(-r * u[i] * g * g);
    }
    Ok((du, dv))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FlowMode {
    GD { lr: f64 },
    RK4 { dt: f64 },
}

impl FlowMode {
    pub fn step_size(self) -> f64 {
        match self {
            FlowMode::GD { lr } => lr,
            FlowMode::RK4 { dt } => dt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedQ {
    pub name: String,
    pub spec: QSpec,
}

impl NamedQ {
    pub fn new(spec: QSpec) -> Self {
        NamedQ {
            name: spec.default_name(),
            spec,
        }
    }
}

fn one() -> usize {
    1
}

fn default_gtol() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub mode: FlowMode,
    pub steps: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub q_specs: Vec<NamedQ>,
    #[serde(default = "default_gtol")]
    pub gtol: f64,
    #[serde(default)]
    pub ltol: f64,
    #[serde(default)]
    pub snapshots: bool,
}

impl FlowConfig {
    pub fn new(mode: FlowMode, steps: usize) -> Self {
        FlowConfig {
            mode,
            steps,
            record_every: 1,
            q_specs: Vec::new(),
            gtol: default_gtol(),
            ltol: 0.0,
            snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.mode.step_size();
        if !(h > 0.0 && h.is_finite()) {
            return Err(FlowError::Config(format!(
                "step size must be positive, got {h}"
            )));
        }
        if self.steps == 0 {
            return Err(FlowError::Config("steps must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(FlowError::Config("record_every must be at least 1".into()));
        }
        if !(self.gtol >= 0.0) || !(self.ltol >= 0.0) {
            return Err(FlowError::Config("tolerances must be non-negative".into()));
        }
        let mut names: Vec<&str> = self.q_specs.iter().map(|q| q.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(FlowError::Config("duplicate q_specs name".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Steps,
    GradientTolerance,
    LossTolerance,
}

/// Recorded run of GD or RK4 flow.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub q_names: Vec<String>,
    /// `q_values[spec][record]` holds the flattened components.
    pub q_values: Vec<Vec<Vec<f64>>>,
    /// `drift[spec][record] = max_k |Q_t,k − Q_0,k|`.
    pub drift: Vec<Vec<f64>>,
    pub snapshots: Option<Vec<Vec<f64>>>,
    pub final_theta: Vec<f64>,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss.last().expect("non-empty trajectory")
    }

    /// `max_t max_k |Q_t,k − Q_0,k| / (1 + ‖Q_0‖_∞)` for spec index `i`.
    pub fn relative_drift(&self, i: usize) -> f64 {
        let q0 = &self.q_values[i][0];
        let scale = 1.0 + q0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        self.drift[i].iter().fold(0.0f64, |m, x| m.max(*x)) / scale
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["step".to_string(), "loss".into(), "grad_norm".into()];
        let widths: Vec<usize> = self.q_values.iter().map(|s| s[0].len()).collect();
        for (name, w) in self.q_names.iter().zip(&widths) {
            if *w == 1 {
                header.push(format!("q_{name}"));
            } else {
                header.extend((0..*w).map(|k| format!("q_{name}_{k}")));
            }
        }
        header.extend(self.q_names.iter().map(|n| format!("dq_{n}")));
        let mut out = header.join(",");
        out.push('\n');
        for r in 0..self.len() {
            let _ = write!(
                out,
                "{},{:.16e},{:.16e}",
                self.steps[r], self.loss[r], self.grad_norm[r]
            );
            for s in &self.q_values {
                for x in &s[r] {
                    let _ = write!(out, ",{x:.16e}");
                }
            }
            for d in &self.drift {
                let _ = write!(out, ",{:.16e}", d[r]);
            }
            out.push('\n');
        }
        out
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn axpy(theta: &[f64], c: f64, d: &[f64]) -> Vec<f64> {
    theta.iter().zip(d).map(|(t, d)| t + c * d).collect()
}

fn rk4_step<P: FlowProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    g1: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let g2 = p.gradient(&axpy(theta, -0.5 * dt, g1))?;
    let g3 = p.gradient(&axpy(theta, -0.5 * dt, &g2))?;
    let g4 = p.gradient(&axpy(theta, -dt, &g3))?;
    Ok((0..theta.len())
        .map(|i| theta[i] - dt / 6.0 * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]))
        .collect())
}

struct Recorder<'a> {
    cfg: &'a FlowConfig,
    traj: Trajectory,
    q0: Vec<Vec<f64>>,
}

impl<'a> Recorder<'a> {
    fn record<P: FlowProblem + ?Sized>(
        &mut self,
        p: &P,
        step: usize,
        theta: &[f64],
        loss: f64,
        gnorm: f64,
    ) -> Result<()> {
        let t = &mut self.traj;
        t.steps.push(step);
        t.times.push(step as f64 * self.cfg.mode.step_size());
        t.loss.push(loss);
        t.grad_norm.push(gnorm);
        for (i, q) in self.cfg.q_specs.iter().enumerate() {
            let v = p.conserved(&q.spec, theta)?.components();
            if self.q0.len() <= i {
                self.q0.push(v.clone());
            }
            let d = v
                .iter()
                .zip(&self.q0[i])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            t.q_values[i].push(v);
            t.drift[i].push(d);
        }
        if let Some(s) = t.snapshots.as_mut() {
            s.push(theta.to_vec());
        }
        Ok(())
    }
}

/// Integrates `θ̇ = −∇L` by GD or RK4 according to `cfg.mode`.
pub fn run<P: FlowProblem + ?Sized>(p: &P, theta0: &[f64], cfg: &FlowConfig) -> Result<Trajectory> {
    cfg.validate()?;
    expect_dim(theta0, p.dim())?;
    let n_q = cfg.q_specs.len();
    let mut rec = Recorder {
        cfg,
        traj: Trajectory {
            steps: Vec::new(),
            times: Vec::new(),
            loss: Vec::new(),
            grad_norm: Vec::new(),
            q_names: cfg.q_specs.iter().map(|q| q.name.clone()).collect(),
            q_values: vec![Vec::new(); n_q],
            drift: vec![Vec::new(); n_q],
            snapshots: cfg.snapshots.then(Vec::new),
            final_theta: Vec::new(),
            stop: StopReason::Steps,
        },
        q0: Vec::new(),
    };
    let mut theta = theta0.to_vec();
    let mut loss = p.loss(&theta)?;
    let mut g = p.gradient(&theta)?;
    if !loss.is_finite() || !finite(&g) {
        return Err(FlowError::Divergence {
            step: 0,
            last_finite: theta,
        });
    }
    let mut step = 0;
    loop {
        let gnorm = linalg::norm2(&g);
        let stop = if gnorm < cfg.gtol {
            Some(StopReason::GradientTolerance)
        } else if loss < cfg.ltol {
            Some(StopReason::LossTolerance)
        } else if step == cfg.steps {
            Some(StopReason::Steps)
        } else {
            None
        };
        if stop.is_some() || step % cfg.record_every == 0 {
            rec.record(p, step, &theta, loss, gnorm)?;
        }
        if let Some(s) = stop {
            rec.traj.stop = s;
            break;
        }
        let next = match cfg.mode {
            FlowMode::GD { lr } => axpy(&theta, -lr, &g),
            FlowMode::RK4 { dt } => match rk4_step(p, &theta, &g, dt) {
                Ok(t) => t,
                Err(_) => {
                    return Err(FlowError::Divergence {
                        step,
                        last_finite: theta,
                    })
                }
            },
        };
        let evaluated = if finite(&next) {
            p.loss(&next).and_then(|l| Ok((l, p.gradient(&next)?))).ok()
        } else {
            None
        };
        match evaluated {
            Some((l, ng)) if l.is_finite() && finite(&ng) => {
                theta = next;
                loss = l;
                g = ng;
            }
            _ => {
                return Err(FlowError::Divergence {
                    step: step + 1,
                    last_finite: theta,
                })
            }
        }
        step += 1;
    }
    rec.traj.final_theta = theta;
    Ok(rec.traj)
}

/// Gradient descent on an MLP; `cfg.mode` must be `GD`.
pub fn run_gd(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    cfg: &FlowConfig,
) -> Result<Trajectory> {
    if !matches!(cfg.mode, FlowMode::GD { .. }) {
        return Err(FlowError::Config("run_gd needs GD mode".into()));
    }
    let p = MlpProblem::new(params.clone(), acts.to_vec(), batch.clone(), conv)?;
    run(&p, &params.flatten(), cfg)
}

/// RK4 gradient flow on an MLP; `cfg.mode` must be `RK4`.
pub fn run_gf(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    cfg: &FlowConfig,
) -> Result<Trajectory> {
    if !matches!(cfg.mode, FlowMode::RK4 { .. }) {
        return Err(FlowError::Config("run_gf needs RK4 mode".into()));
    }
    let p = MlpProblem::new(params.clone(), acts.to_vec(), batch.clone(), conv)?;
    run(&p, &params.flatten(), cfg)
}

/// One-step change of `Tr[UᵀU − VVᵀ]` under GD and its bound.
pub fn delta_q_identity(g_u: &Matrix, g_v: &Matrix, eta: f64) -> (f64, f64) {
    let a = g_u.dot(g_u);
    let b = g_v.dot(g_v);
    (eta * eta * (a - b), eta * eta * (a + b))
}

/// Central differences of the analytic gradient, symmetrized.
pub fn hessian_fd_problem<P: FlowProblem + ?Sized>(
    p: &P,
    theta: &[f64],
    step_scale: f64,
) -> Result<(Matrix, f64)> {
    let n = theta.len();
    if n > HESSIAN_MAX_PARAMS {
        return Err(FlowError::CostGuard {
            params: n,
            limit: HESSIAN_MAX_PARAMS,
        });
    }
    expect_dim(theta, p.dim())?;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let h = step_scale * (1.0 + theta[j].abs());
            let mut probe = theta.to_vec();
            probe[j] = theta[j] + h;
            let gp = p.gradient(&probe)?;
            probe[j] = theta[j] - h;
            let gm = p.gradient(&probe)?;
            Ok(gp
                .iter()
                .zip(&gm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect())
        })
        .collect::<Result<_>>()?;
    let h = Matrix::from_fn(n, n, |i, j| cols[j][i]);
    let asym = h.asymmetry();
    Ok((h.symmetrize(), asym))
}

/// Symmetrized finite-difference Hessian of the MLP loss.
pub fn hessian_fd(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    step_scale: f64,
) -> Result<Matrix> {
    let n = params.num_params();
    if n > HESSIAN_MAX_PARAMS {
        return Err(FlowError::CostGuard {
            params: n,
            limit: HESSIAN_MAX_PARAMS,
        });
    }
    let p = MlpProblem::new(params.clone(), acts.to_vec(), batch.clone(), conv)?;
    Ok(hessian_fd_problem(&p, &params.flatten(), step_scale)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HessianReport {
    pub eigenvalues: Vec<f64>,
    pub near_zero: usize,
    pub largest: f64,
    pub threshold: f64,
}

impl HessianReport {
    pub fn from_matrix(h: &Matrix) -> Result<Self> {
        let e = linalg::eigh_jacobi(h)?;
        let eigenvalues = e.values.into_inner();
        let near_zero = eigenvalues.iter().filter(|x| x.abs() <= NEAR_ZERO).count();
        let largest = eigenvalues.last().copied().unwrap_or(0.0);
        Ok(HessianReport {
            eigenvalues,
            near_zero,
            largest,
            threshold: NEAR_ZERO,
        })
    }

    /// Eigenvalues with `|λ| > threshold`.
    pub fn surviving(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .copied()
            .filter(|x| x.abs() > self.threshold)
            .collect()
    }
}

pub fn hessian_spectrum(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
) -> Result<HessianReport> {
    HessianReport::from_matrix(&hessian_fd(params, acts, batch, conv, 1e-4)?)
}

/// Factors of a spectral initialization `U₀ = ΦŪ₀`, `V₀ = ΨV̄₀`.
#[derive(Clone, Debug)]
pub struct SpectralInit {
    pub u0: Matrix,
    pub v0: Matrix,
    pub phi: Matrix,
    pub psi: Matrix,
    pub u_bar: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub sigma_y: Vec<f64>,
}

impl SpectralInit {
    /// Rebuilds the full factors from new diagonal coefficients.
    pub fn with_diagonals(&self, u_bar: &[f64], v_bar: &[f64]) -> Result<SpectralInit> {
        if u_bar.len() != self.u_bar.len() || v_bar.len() != self.v_bar.len() {
            return Err(FlowError::Dimension("diagonal lengths differ".into()));
        }
        Ok(SpectralInit {
            u0: &self.phi * &Matrix::diag(u_bar),
            v0: &self.psi * &Matrix::diag(v_bar),
            phi: self.phi.clone(),
            psi: self.psi.clone(),
            u_bar: u_bar.to_vec(),
            v_bar: v_bar.to_vec(),
            sigma_y: self.sigma_y.clone(),
        })
    }

    /// Two-layer network `W₁ = V₀ᵀ`, `W₂ = U₀`.
    pub fn params(&self) -> Result<MlpParams> {
        Ok(MlpParams::two_layer(self.u0.clone(), self.v0.transpose())?)
    }

    /// `(ū, v̄)` as the reduced flow state.
    pub fn reduced_state(&self) -> Vec<f64> {
        self.u_bar.iter().chain(&self.v_bar).copied().collect()
    }
}

/// Diagonal coefficients are drawn from `uniform(0.1, 1.1)`.
pub fn spectral_init<R: Rng + ?Sized>(y: &Matrix, rng: &mut R) -> Result<SpectralInit> {
    let svd = linalg::svd_jacobi(y)?;
    let r = svd.s.len();
    let mut draw = || {
        (0..r)
            .map(|_| rng.gen_range(0.1..1.1))
            .collect::<Vec<f64>>()
    };
    let u_bar = draw();
    let v_bar = draw();
    let base = SpectralInit {
        u0: Matrix::zeros(0, 0),
        v0: Matrix::zeros(0, 0),
        phi: svd.u,
        psi: svd.v,
        u_bar: u_bar.clone(),
        v_bar: v_bar.clone(),
        sigma_y: svd.s.into_inner(),
    };
    base.with_diagonals(&u_bar, &v_bar)
}
