//! Conserved quantities of gradient flow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::network::{Activation, MlpParams, NetworkError};
use crate::symmetry::{self, HiddenLieElement, LieSymmetry, PiSpec, SymmetryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConservedError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Q_M requires a symmetric Lie element")]
    NotSymmetric,
    #[error("no closed-form antiderivative of σ/σ' for {0:?}")]
    NoAntiderivative(Activation),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("{0} cannot be evaluated on this problem")]
    Unsupported(String),
    #[error("zero normalization denominator")]
    ZeroDenominator,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
}

pub type Result<T> = std::result::Result<T, ConservedError>;

fn one() -> usize {
    1
}

/// A declarative choice of conserved quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", deny_unknown_fields)]
pub enum QSpec {
    /// `W_i W_iᵀ + b_i b_iᵀ − W_{i+1}ᵀ W_{i+1}` at hidden layer `i` (1-based).
    ImbalanceMatrix {
        #[serde(default = "one")]
        layer: usize,
    },
    /// `⟨θ, M·θ⟩` for symmetric `M`.
    QM { m: HiddenLieElement, pi: PiSpec },
    /// `diag(W_i W_iᵀ − α W_{i+1}ᵀ W_{i+1})`.
    HomogeneousDiag {
        alpha: f64,
        #[serde(default = "one")]
        layer: usize,
    },
    /// `½Tr UᵀU − Σ ∫_{x₀}^{V_aj} σ/σ'` for two-layer nets.
    ElementwiseIntegral { activation: Activation, x0: f64 },
    /// `λ_i = ū_i² + v̄_i²`.
    RadialSpectralLambda,
    /// `w₁^{2a} / w₂²`.
    EllipseQ { a: f64 },
}

impl QSpec {
    /// Short column-friendly name.
    pub fn default_name(&self) -> String {
        match self {
            QSpec::ImbalanceMatrix { layer } => format!("imbalance{layer}"),
            QSpec::QM { .. } => "qm".into(),
            QSpec::HomogeneousDiag { layer, .. } => format!("homdiag{layer}"),
            QSpec::ElementwiseIntegral { .. } => "elementwise".into(),
            QSpec::RadialSpectralLambda => "lambda".into(),
            QSpec::EllipseQ { .. } => "ellipse".into(),
        }
    }
}

/// Value of a conserved quantity.
#[derive(Clone, Debug, PartialEq)]
pub enum QValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Matrix),
}

impl QValue {
    pub fn components(&self) -> Vec<f64> {
        match self {
            QValue::Scalar(x) => vec![*x],
            QValue::Vector(v) => v.clone(),
            QValue::Matrix(m) => m.data().to_vec(),
        }
    }
}

/// Evaluates `spec` on network parameters.
pub fn evaluate(spec: &QSpec, params: &MlpParams) -> Result<QValue> {
    match spec {
        QSpec::ImbalanceMatrix { layer } => {
            Ok(QValue::Matrix(layer_imbalance(params, *layer, 1.0)?))
        }
        QSpec::QM { m, pi } => Ok(QValue::Scalar(q_m(params, m, pi)?)),
        QSpec::HomogeneousDiag { alpha, layer } => Ok(QValue::Vector(
            layer_imbalance(params, *layer, *alpha)?.diagonal(),
        )),
        QSpec::ElementwiseIntegral { activation, x0 } => {
            let (u, v) = two_layer(params)?;
            Ok(QValue::Scalar(q_elementwise_integral(
                u, v, activation, *x0,
            )?))
        }
        QSpec::RadialSpectralLambda => {
            let (u, v) = two_layer(params)?;
            let lam = (&(&u.transpose() * u) + &(v * &v.transpose())).diagonal();
            Ok(QValue::Vector(lam))
        }
        QSpec::EllipseQ { .. } => Err(ConservedError::Unsupported("EllipseQ on a network".into())),
    }
}

fn two_layer(params: &MlpParams) -> Result<(&Matrix, &Matrix)> {
    if params.depth() != 2 {
        return Err(ConservedError::Shape(format!(
            "two-layer network required, got {} layers",
            params.depth()
        )));
    }
    Ok((&params.weights[1], &params.weights[0]))
}

fn layer_imbalance(params: &MlpParams, layer: usize, alpha: f64) -> Result<Matrix> {
    if layer == 0 || layer >= params.depth() {
        return Err(ConservedError::Shape(format!("no hidden layer {layer}")));
    }
    let w_in = &params.weights[layer - 1];
    let w_out = &params.weights[layer];
    let mut q = &(w_in * &w_in.transpose()) - &(&w_out.transpose() * w_out).scale(alpha);
    if let Some(b) = params.bias(layer - 1) {
        for i in 0..b.len() {
            for j in 0..b.len() {
                q[(i, j)] += b[i] * b[j];
            }
        }
    }
    Ok(q)
}

/// `⟨θ, M·θ⟩` with no symmetry check; identically zero for antisymmetric `M`.
pub fn quadratic_form(params: &MlpParams, m: &HiddenLieElement, pi: &PiSpec) -> Result<f64> {
    let t = symmetry::apply_infinitesimal(params, m, pi)?;
    Ok(params.dot(&t))
}

pub fn q_m(params: &MlpParams, m: &HiddenLieElement, pi: &PiSpec) -> Result<f64> {
    if m.flag() != LieSymmetry::Symmetric {
        let symmetric = m
            .layers()
            .iter()
            .all(|x| (x - &x.transpose()).max_abs() <= 1e-12 * x.max_abs().max(1.0));
        if !symmetric {
            return Err(ConservedError::NotSymmetric);
        }
    }
    quadratic_form(params, m, pi)
}

/// `∇_θ Q_M = 2 M·θ` for symmetric `M`.
pub fn q_m_gradient(params: &MlpParams, m: &HiddenLieElement, pi: &PiSpec) -> Result<MlpParams> {
    let t = symmetry::apply_infinitesimal(params, m, pi)?;
    Ok(t.zeros_like().add_scaled(&t, 2.0)?)
}

fn check_uv(u: &Matrix, v: &Matrix) -> Result<()> {
    if u.cols() != v.rows() {
        return Err(ConservedError::Shape(format!(
            "U {:?} and V {:?}",
            u.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// `VVᵀ − UᵀU`.
pub fn q_imbalance_matrix(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_uv(u, v)?;
    Ok(&(v * &v.transpose()) - &(&u.transpose() * u))
}

/// `diag(VVᵀ − α UᵀU)`.
pub fn q_homogeneous_diag(u: &Matrix, v: &Matrix, alpha: f64) -> Result<Vec<f64>> {
    check_uv(u, v)?;
    if !(alpha > 0.0) {
        return Err(ConservedError::Domain(format!("alpha = {alpha}")));
    }
    Ok((&(v * &v.transpose()) - &(&u.transpose() * u).scale(alpha)).diagonal())
}

/// `σ(x)/σ'(x)`, the integrand of the elementwise conserved quantity.
pub fn sigma_over_dsigma(act: &Activation, x: f64) -> Result<f64> {
    match act {
        Activation::Identity | Activation::Sigmoid | Activation::Tanh => {
            Ok(act.scalar(x) / act.scalar_derivative(x))
        }
        Activation::LeakyReLU { slope } if *slope > 0.0 => Ok(x),
        _ => Err(ConservedError::NoAntiderivative(*act)),
    }
}

/// Closed-form antiderivative of `σ/σ'`.
pub fn antiderivative(act: &Activation, x: f64) -> Result<f64> {
    match act {
        Activation::Sigmoid => Ok(x + x.exp()),
        Activation::Tanh => Ok(0.25 * (2.0 * x).cosh()),
        Activation::Identity => Ok(0.5 * x * x),
        Activation::LeakyReLU { slope } if *slope > 0.0 => Ok(0.5 * x * x),
        _ => Err(ConservedError::NoAntiderivative(*act)),
    }
}

fn integral_terms(u: &Matrix, v: &Matrix, act: &Activation, x0: f64) -> Result<(f64, f64)> {
    check_uv(u, v)?;
    let f0 = antiderivative(act, x0)?;
    let mut f2 = 0.0;
    for &x in v.data() {
        f2 += antiderivative(act, x)? - f0;
    }
    Ok((0.5 * u.dot(u), f2))
}

/// `½Tr UᵀU − Σ_{a,j} [F(V_aj) − F(x₀)]` with `F' = σ/σ'`.
pub fn q_elementwise_integral(u: &Matrix, v: &Matrix, act: &Activation, x0: f64) -> Result<f64> {
    let (f1, f2) = integral_terms(u, v, act, x0)?;
    Ok(f1 - f2)
}

/// `ν = V(−G_V)ᵀ − (−G_V)Vᵀ + Uᵀ(−G_U) − (−G_U)ᵀU`.
pub fn angular_momentum_residual(
    u: &Matrix,
    v: &Matrix,
    g_u: &Matrix,
    g_v: &Matrix,
) -> Result<Matrix> {
    check_uv(u, v)?;
    if g_u.shape() != u.shape() || g_v.shape() != v.shape() {
        return Err(ConservedError::Shape(
            "gradient shapes differ from parameters".into(),
        ));
    }
    let vd = g_v.scale(-1.0);
    let ud = g_u.scale(-1.0);
    let a = &(v * &vd.transpose()) - &(&vd * &v.transpose());
    let b = &(&u.transpose() * &ud) - &(&ud.transpose() * u);
    Ok(&a + &b)
}

/// `λ_i = ū_i² + v̄_i²`.
pub fn q_radial_spectral(u_diag: &[f64], v_diag: &[f64]) -> Result<Vec<f64>> {
    if u_diag.len() != v_diag.len() {
        return Err(ConservedError::Shape(format!(
            "lengths {} and {}",
            u_diag.len(),
            v_diag.len()
        )));
    }
    Ok(u_diag
        .iter()
        .zip(v_diag)
        .map(|(u, v)| u * u + v * v)
        .collect())
}

/// `w₁^{2a} / w₂²`.
pub fn q_ellipse(w: &[f64], a: f64) -> Result<f64> {
    if w.len() != 2 {
        return Err(ConservedError::Shape(format!(
            "ellipse needs 2 coordinates, got {}",
            w.len()
        )));
    }
    if w[1] == 0.0 {
        return Err(ConservedError::Domain("w2 = 0".into()));
    }
    if a.fract() != 0.0 && w[0] <= 0.0 {
        return Err(ConservedError::Domain(
            "w1 must be positive for non-integer a".into(),
        ));
    }
    let p = if a.fract() == 0.0 && a.abs() < 1e9 {
        w[0].powi(2 * a as i32)
    } else {
        w[0].powf(2.0 * a)
    };
    Ok(p / (w[1] * w[1]))
}

/// `|f₁(U₀)|` and `|f₂(V₀)|` captured at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedBaseline {
    pub f1: f64,
    pub f2: f64,
}

impl NormalizedBaseline {
    pub fn capture(u0: &Matrix, v0: &Matrix, act: &Activation, x0: f64) -> Result<Self> {
        let (f1, f2) = integral_terms(u0, v0, act, x0)?;
        Ok(NormalizedBaseline { f1, f2 })
    }
}

/// `|f₁(U) − f₂(V)| / (|f₁(U₀)| + |f₂(V₀)|)`.
pub fn normalized_q(
    u: &Matrix,
    v: &Matrix,
    act: &Activation,
    x0: f64,
    baseline: &NormalizedBaseline,
) -> Result<f64> {
    let den = baseline.f1.abs() + baseline.f2.abs();
    if den == 0.0 {
        return Err(ConservedError::ZeroDenominator);
    }
    let (f1, f2) = integral_terms(u, v, act, x0)?;
    Ok((f1 - f2).abs() / den)
}

/// Closed-form antiderivative against adaptive quadrature; returns the absolute gap.
pub fn antiderivative_quadrature_gap(act: &Activation, lo: f64, hi: f64) -> Result<f64> {
    let closed = antiderivative(act, hi)? - antiderivative(act, lo)?;
    let numeric = linalg::integrate_adaptive(
        |x| sigma_over_dsigma(act, x).unwrap_or(f64::NAN),
        lo,
        hi,
        1e-12,
    )?;
    Ok((closed - numeric).abs())
}
