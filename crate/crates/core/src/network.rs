//! Multilayer perceptrons: parameters, activations, forward pass, MSE loss
//! and backpropagation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid widths {0:?}: need at least two positive entries")]
    InvalidWidths(Vec<usize>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("radial profile is singular at a zero vector")]
    SingularRadial,
    #[error("invalid activation parameter: {0}")]
    InvalidActivation(String),
    #[error("flat parameter vector has length {got}, expected {expected}")]
    FlatLength { got: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

fn shape_err(msg: impl Into<String>) -> NetworkError {
    NetworkError::Shape(msg.into())
}

/// Layer widths `(n_0, ..., n_L)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Widths(Vec<usize>);

impl Widths {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetworkError::InvalidWidths(dims));
        }
        Ok(Widths(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn input(&self) -> usize {
        self.0[0]
    }

    pub fn output(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    /// Hidden widths `n_1, ..., n_{L-1}`.
    pub fn hidden(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }
}

impl TryFrom<Vec<usize>> for Widths {
    type Error = NetworkError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Widths::new(v)
    }
}

impl From<Widths> for Vec<usize> {
    fn from(w: Widths) -> Self {
        w.0
    }
}

/// Radial profile `f` in `σ(z) = f(‖z‖) z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RadialProfile {
    /// `f(r) = 1/r²`
    InverseSquare,
    /// `f(r) = tanh(r)/r`, extended by 1 at the origin
    TanhRatio,
}

impl RadialProfile {
    pub fn value(self, r: f64) -> Result<f64> {
        match self {
            RadialProfile::InverseSquare => {
                if r == 0.0 {
                    Err(NetworkError::SingularRadial)
                } else {
                    Ok(1.0 / (r * r))
                }
            }
            RadialProfile::TanhRatio => Ok(if r < 1e-4 {
                let r2 = r * r;
                1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0
            } else {
                r.tanh() / r
            }),
        }
    }

    /// `f'(r) / r`, the coefficient of `z zᵀ` in the Jacobian.
    pub fn derivative_over_r(self, r: f64) -> Result<f64> {
        match self {
            RadialProfile::InverseSquare => {
                if r == 0.0 {
                    Err(NetworkError::SingularRadial)
                } else {
                    Ok(-2.0 / (r * r * r * r))
                }
            }
            RadialProfile::TanhRatio => Ok(if r < 1e-4 {
                -2.0 / 3.0 + 8.0 * r * r / 15.0
            } else {
                let sech2 = 1.0 - r.tanh().powi(2);
                (r * sech2 - r.tanh()) / (r * r * r)
            }),
        }
    }
}

/// Which hidden-group kind an activation is equivariant under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquivarianceClass {
    FullGL,
    PositiveDiagonal,
    Orthogonal,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Activation {
    Identity,
    /// `max(z,0) + s·min(z,0)`; ReLU is `slope = 0`.
    LeakyReLU {
        slope: f64,
    },
    Sigmoid,
    Tanh,
    /// Rectified power `max(z,0)^α`.
    HomogeneousPower {
        alpha: f64,
    },
    /// Columnwise `f(‖z‖) z`.
    RadialRescale {
        profile: RadialProfile,
    },
    /// Rowwise `h(‖w‖) w` over the whole preactivation matrix.
    RowRadial {
        profile: RadialProfile,
    },
}

/// Derivative of an activation at a preactivation matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationDerivative {
    Pointwise(Matrix),
    /// One Jacobian per column.
    ColumnJacobians(Vec<Matrix>),
    /// One Jacobian per row.
    RowJacobians(Vec<Matrix>),
}

impl Activation {
    pub const RELU: Activation = Activation::LeakyReLU { slope: 0.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyReLU { slope } if !(slope >= 0.0 && slope.is_finite()) => Err(
                NetworkError::InvalidActivation(format!("LeakyReLU slope {slope}")),
            ),
            Activation::HomogeneousPower { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                NetworkError::InvalidActivation(format!("HomogeneousPower alpha {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn equivariance_class(&self) -> EquivarianceClass {
        match self {
            Activation::Identity => EquivarianceClass::FullGL,
            Activation::LeakyReLU { .. } | Activation::HomogeneousPower { .. } => {
                EquivarianceClass::PositiveDiagonal
            }
            Activation::RadialRescale { .. } => EquivarianceClass::Orthogonal,
            Activation::Sigmoid | Activation::Tanh | Activation::RowRadial { .. } => {
                EquivarianceClass::None
            }
        }
    }

    pub fn is_pointwise(&self) -> bool {
        !matches!(
            self,
            Activation::RadialRescale { .. } | Activation::RowRadial { .. }
        )
    }

    /// Global Lipschitz constant where one is known.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        match *self {
            Activation::Identity | Activation::Tanh => Some(1.0),
            Activation::Sigmoid => Some(0.25),
            Activation::LeakyReLU { slope } => Some(slope.max(1.0)),
            Activation::HomogeneousPower { alpha: 1.0 } => Some(1.0),
            Activation::RadialRescale {
                profile: RadialProfile::TanhRatio,
            } => Some(1.0),
            _ => None,
        }
    }

    pub fn scalar(&self, z: f64) -> f64 {
        match *self {
            Activation::Identity => z,
            Activation::LeakyReLU { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::HomogeneousPower { alpha } => {
                if z > 0.0 {
                    z.powf(alpha)
                } else {
                    0.0
                }
            }
            Activation::RadialRescale { .. } | Activation::RowRadial { .. } => {
                panic!("radial activations have no scalar form")
            }
        }
    }

    pub fn scalar_derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::LeakyReLU { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::HomogeneousPower { alpha } => {
                if z > 0.0 {
                    alpha * z.powf(alpha - 1.0)
                } else {
                    0.0
                }
            }
            Activation::RadialRescale { .. } | Activation::RowRadial { .. } => {
                panic!("radial activations have no scalar form")
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn radial_vec(profile: RadialProfile, v: &[f64]) -> Result<Vec<f64>> {
    let r = crate::linalg::norm2(v);
    let f = profile.value(r)?;
    Ok(v.iter().map(|x| f * x).collect())
}

fn radial_jacobian(profile: RadialProfile, v: &[f64]) -> Result<Matrix> {
    let r = crate::linalg::norm2(v);
    let f = profile.value(r)?;
    let c = profile.derivative_over_r(r)?;
    let n = v.len();
    Ok(Matrix::from_fn(n, n, |i, j| {
        c * v[i] * v[j] + if i == j { f } else { 0.0 }
    }))
}

/// `J v` for the symmetric radial Jacobian, without forming `J`.
fn radial_jvp(profile: RadialProfile, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let r = crate::linalg::norm2(z);
    let f = profile.value(r)?;
    let c = profile.derivative_over_r(r)?;
    let zv: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(z.iter()
        .zip(v)
        .map(|(zi, vi)| f * vi + c * zv * zi)
        .collect())
}

pub fn activation_apply(act: &Activation, z: &Matrix) -> Result<Matrix> {
    match *act {
        Activation::RadialRescale { profile } => {
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for j in 0..z.cols() {
                out.set_column(j, &radial_vec(profile, &z.column(j))?);
            }
            Ok(out)
        }
        Activation::RowRadial { profile } => {
            let mut data = Vec::with_capacity(z.rows() * z.cols());
            for i in 0..z.rows() {
                data.extend(radial_vec(profile, z.row(i))?);
            }
            Ok(Matrix::new(z.rows(), z.cols(), data)?)
        }
        _ => Ok(z.map(|x| act.scalar(x))),
    }
}

pub fn activation_derivative(act: &Activation, z: &Matrix) -> Result<ActivationDerivative> {
    match *act {
        Activation::RadialRescale { profile } => Ok(ActivationDerivative::ColumnJacobians(
            (0..z.cols())
                .map(|j| radial_jacobian(profile, &z.column(j)))
                .collect::<Result<_>>()?,
        )),
        Activation::RowRadial { profile } => Ok(ActivationDerivative::RowJacobians(
            (0..z.rows())
                .map(|i| radial_jacobian(profile, z.row(i)))
                .collect::<Result<_>>()?,
        )),
        _ => Ok(ActivationDerivative::Pointwise(
            z.map(|x| act.scalar_derivative(x)),
        )),
    }
}

/// Pulls an upstream gradient `d` back through `σ` at `z`. All Jacobians are symmetric.
fn activation_vjp(act: &Activation, z: &Matrix, d: &Matrix) -> Result<Matrix> {
    match *act {
        Activation::RadialRescale { profile } => {
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for j in 0..z.cols() {
                out.set_column(j, &radial_jvp(profile, &z.column(j), &d.column(j))?);
            }
            Ok(out)
        }
        Activation::RowRadial { profile } => {
            let mut data = Vec::with_capacity(z.rows() * z.cols());
            for i in 0..z.rows() {
                data.extend(radial_jvp(profile, z.row(i), d.row(i))?);
            }
            Ok(Matrix::new(z.rows(), z.cols(), data)?)
        }
        _ => Ok(z.zip_with(d, |x, g| act.scalar_derivative(x) * g)?),
    }
}

/// Parameters `θ = (W_i, b_i)` of an MLP. Also used for gradients and tangents.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    widths: Widths,
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vector>>,
}

impl MlpParams {
    pub fn new(widths: Widths, weights: Vec<Matrix>, biases: Option<Vec<Vector>>) -> Result<Self> {
        let d = widths.dims();
        if weights.len() != widths.depth() {
            return Err(shape_err(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                widths.depth()
            )));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != (d[i + 1], d[i]) {
                return Err(shape_err(format!(
                    "weight {} is {:?}, expected {:?}",
                    i + 1,
                    w.shape(),
                    (d[i + 1], d[i])
                )));
            }
        }
        if let Some(bs) = &biases {
            if bs.len() != widths.depth() {
                return Err(shape_err("one bias per layer required"));
            }
            for (i, b) in bs.iter().enumerate() {
                if b.len() != d[i + 1] {
                    return Err(shape_err(format!("bias {} has length {}", i + 1, b.len())));
                }
                if b.iter().any(|x| !x.is_finite()) {
                    return Err(NetworkError::Linalg(LinalgError::NonFinite));
                }
            }
        }
        Ok(MlpParams {
            widths,
            weights,
            biases,
        })
    }

    /// Bias-free params from weights alone; widths are inferred.
    pub fn from_weights(weights: Vec<Matrix>) -> Result<Self> {
        let first = weights.first().ok_or_else(|| shape_err("no layers"))?;
        let mut dims = vec![first.cols()];
        dims.extend(weights.iter().map(|w| w.rows()));
        MlpParams::new(Widths::new(dims)?, weights, None)
    }

    /// Two-layer `x ↦ U σ(V x)`.
    pub fn two_layer(u: Matrix, v: Matrix) -> Result<Self> {
        MlpParams::from_weights(vec![v, u])
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            widths: self.widths.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| Vector::zeros(b.len())).collect()),
        }
    }

    pub fn widths(&self) -> &Widths {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum::<usize>()
            + self
                .biases
                .as_ref()
                .map_or(0, |bs| bs.iter().map(|b| b.len()).sum())
    }

    /// Weights in layer order, then biases in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.weights {
            out.extend_from_slice(w.data());
        }
        if let Some(bs) = &self.biases {
            for b in bs {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape template.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(NetworkError::FlatLength {
                got: flat.len(),
                expected: self.num_params(),
            });
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &flat[off..off + n];
            off += n;
            s.to_vec()
        };
        let weights = self
            .weights
            .iter()
            .map(|w| Matrix::new(w.rows(), w.cols(), take(w.data().len())))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let biases = self
            .biases
            .as_ref()
            .map(|bs| bs.iter().map(|b| Vector(take(b.len()))).collect());
        Ok(MlpParams {
            widths: self.widths.clone(),
            weights,
            biases,
        })
    }

    pub fn dot(&self, other: &MlpParams) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm2(&self.flatten())
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, other: &MlpParams, c: f64) -> Result<MlpParams> {
        let a = self.flatten();
        let b = other.flatten();
        if a.len() != b.len() {
            return Err(shape_err("parameter tuples differ in size"));
        }
        self.with_flat(&a.iter().zip(&b).map(|(x, y)| x + c * y).collect::<Vec<_>>())
    }

    pub fn bias(&self, layer: usize) -> Option<&Vector> {
        self.biases.as_ref().map(|bs| &bs[layer])
    }
}

/// Inputs `X` (`n_0 x k`) and targets `Y` (`n_L x k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.cols() == 0 || x.cols() != y.cols() {
            return Err(shape_err(format!(
                "batch sizes differ: X {:?}, Y {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Batch { x, y })
    }

    pub fn size(&self) -> usize {
        self.x.cols()
    }

    fn check(&self, params: &MlpParams) -> Result<()> {
        if self.x.rows() != params.widths.input() || self.y.rows() != params.widths.output() {
            return Err(shape_err(format!(
                "batch X {:?} / Y {:?} incompatible with widths {:?}",
                self.x.shape(),
                self.y.shape(),
                params.widths.dims()
            )));
        }
        Self::new(self.x.clone(), self.y.clone()).map(|_| ())
    }
}

/// Scaling applied to the squared residual norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossConvention {
    /// `(1/k)‖Y − F‖²`
    #[default]
    Mean,
    /// `½‖Y − F‖²`
    Half,
    /// `‖Y − F‖²`
    Sum,
}

impl LossConvention {
    pub fn factor(self, k: usize) -> f64 {
        match self {
            LossConvention::Mean => 1.0 / k as f64,
            LossConvention::Half => 0.5,
            LossConvention::Sum => 1.0,
        }
    }
}

/// Preactivations `Z_i` and features `σ_i(Z_i)` for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub preactivations: Vec<Matrix>,
    pub features: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.features.last().expect("at least one layer")
    }

    /// `σ_{i}(Z_i)` with `i = 0` meaning the input.
    pub fn feature(&self, i: usize) -> &Matrix {
        if i == 0 {
            &self.input
        } else {
            &self.features[i - 1]
        }
    }
}

fn check_acts(params: &MlpParams, acts: &[Activation]) -> Result<()> {
    if acts.len() != params.depth() {
        return Err(shape_err(format!(
            "{} activations for {} layers",
            acts.len(),
            params.depth()
        )));
    }
    acts.iter().try_for_each(|a| a.validate())
}

pub fn forward(params: &MlpParams, acts: &[Activation], x: &Matrix) -> Result<ForwardTrace> {
    check_acts(params, acts)?;
    if x.rows() != params.widths.input() {
        return Err(shape_err(format!(
            "input has {} rows, network expects {}",
            x.rows(),
            params.widths.input()
        )));
    }
    let mut pre = Vec::with_capacity(params.depth());
    let mut feats: Vec<Matrix> = Vec::with_capacity(params.depth());
    for (i, (w, act)) in params.weights.iter().zip(acts).enumerate() {
        let prev = if i == 0 { x } else { &feats[i - 1] };
        let mut z = w.matmul(prev)?;
        if let Some(b) = params.bias(i) {
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    z[(r, c)] += b[r];
                }
            }
        }
        let a = activation_apply(act, &z)?;
        pre.push(z);
        feats.push(a);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        preactivations: pre,
        features: feats,
    })
}

pub fn loss_mse(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
) -> Result<f64> {
    batch.check(params)?;
    let tr = forward(params, acts, &batch.x)?;
    let r = &batch.y - tr.output();
    Ok(conv.factor(batch.size()) * r.dot(&r))
}

/// Gradients with respect to the parameters and the input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: MlpParams,
    pub input: Matrix,
    pub loss: f64,
}

pub fn backprop(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
) -> Result<Gradients> {
    batch.check(params)?;
    let tr = forward(params, acts, &batch.x)?;
    let c = conv.factor(batch.size());
    let resid = tr.output() - &batch.y;
    let loss = c * resid.dot(&resid);
    let mut upstream = resid.scale(2.0 * c);
    let mut gw = vec![Matrix::zeros(0, 0); params.depth()];
    let mut gb = vec![Vector::default(); params.depth()];
    for i in (0..params.depth()).rev() {
        let dz = activation_vjp(&acts[i], &tr.preactivations[i], &upstream)?;
        gw[i] = dz.matmul(&tr.feature(i).transpose())?;
        gb[i] = Vector((0..dz.rows()).map(|r| dz.row(r).iter().sum()).collect());
        upstream = params.weights[i].transpose().matmul(&dz)?;
    }
    let biases = params.biases.as_ref().map(|_| gb);
    Ok(Gradients {
        params: MlpParams {
            widths: params.widths.clone(),
            weights: gw,
            biases,
        },
        input: upstream,
        loss,
    })
}

pub fn grad(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
) -> Result<MlpParams> {
    Ok(backprop(params, acts, batch, conv)?.params)
}

/// Central-difference gradient; the slow oracle for [`grad`].
pub fn grad_fd(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    step: f64,
) -> Result<MlpParams> {
    let theta = params.flatten();
    let mut g = vec![0.0; theta.len()];
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let lp = loss_mse(&params.with_flat(&probe)?, acts, batch, conv)?;
        probe[i] = theta[i] - step;
        let lm = loss_mse(&params.with_flat(&probe)?, acts, batch, conv)?;
        probe[i] = theta[i];
        g[i] = (lp - lm) / (2.0 * step);
    }
    params.with_flat(&g)
}

/// A network together with its activations; the unit stored in model files.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: MlpParams,
    pub activations: Vec<Activation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    widths: Widths,
    weights: Vec<Matrix>,
    biases: Option<Vec<Vector>>,
    activations: Vec<Activation>,
}

impl Model {
    pub fn new(params: MlpParams, activations: Vec<Activation>) -> Result<Self> {
        check_acts(&params, &activations)?;
        Ok(Model {
            params,
            activations,
        })
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            widths: self.params.widths.clone(),
            weights: self.params.weights.clone(),
            biases: self.params.biases.clone(),
            activations: self.activations.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(s).map_err(|e| NetworkError::Format(e.to_string()))?;
        let params = MlpParams::new(file.widths, file.weights, file.biases)?;
        Model::new(params, file.activations)
    }
}
