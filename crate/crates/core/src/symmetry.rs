//! Linear actions of the hidden symmetry group on MLP parameters.
//!
//! A hidden group element carries one matrix per hidden layer; the input and
//! output layers are fixed. Infinitesimal actions, equivariance checks, Lie
//! algebra bases and orbit dimensions live here too.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::network::{
    self, activation_apply, Activation, Batch, EquivarianceClass, LossConvention, MlpParams,
    NetworkError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymmetryError {
    #[error("layer {layer}: matrix is not in {kind:?}")]
    NotInGroup { layer: usize, kind: GroupKind },
    #[error("layer {layer}: Lie element does not match flag {flag:?}")]
    FlagMismatch { layer: usize, flag: LieSymmetry },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Power representation requires a positive diagonal group at layer {0}")]
    PowerNeedsDiagonal(usize),
    #[error("no {part:?} Lie basis for {kind:?}")]
    InvalidBasis { kind: GroupKind, part: LiePart },
    #[error("no orbit formula for equivariance class {0:?}")]
    NoFormula(EquivarianceClass),
    #[error("parameters outside the full-rank locus (layer {layer}: σ_min/σ_max = {ratio:e})")]
    Degenerate { layer: usize, ratio: f64 },
    #[error("group sampling budget exhausted")]
    SamplingBudget,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, SymmetryError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    GeneralLinear,
    PositiveDiagonal,
    Orthogonal,
}

impl GroupKind {
    pub fn contains(self, g: &Matrix) -> bool {
        if !g.is_square() || !g.is_finite() {
            return false;
        }
        let n = g.rows();
        match self {
            GroupKind::GeneralLinear => {
                let scale = g.max_abs().powi(n as i32);
                linalg::determinant(g).is_ok_and(|d| d.abs() > 1e-12 * scale)
            }
            GroupKind::PositiveDiagonal => (0..n).all(|i| {
                (0..n).all(|j| {
                    if i == j {
                        g[(i, j)] > 0.0
                    } else {
                        g[(i, j)] == 0.0
                    }
                })
            }),
            GroupKind::Orthogonal => {
                (&(&g.transpose() * g) - &Matrix::identity(n)).frobenius_norm() <= 1e-9
            }
        }
    }

    /// Whether an activation of the given class is equivariant under this kind.
    pub fn admitted_by(self, class: EquivarianceClass) -> bool {
        match class {
            EquivarianceClass::FullGL => true,
            EquivarianceClass::PositiveDiagonal => self == GroupKind::PositiveDiagonal,
            EquivarianceClass::Orthogonal => self == GroupKind::Orthogonal,
            EquivarianceClass::None => false,
        }
    }
}

/// `(g_1, ..., g_{L-1})`, one invertible matrix per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenGroupElement {
    layers: Vec<Matrix>,
    kinds: Vec<GroupKind>,
}

impl HiddenGroupElement {
    pub fn new(layers: Vec<(Matrix, GroupKind)>) -> Result<Self> {
        for (i, (g, k)) in layers.iter().enumerate() {
            if !k.contains(g) {
                return Err(SymmetryError::NotInGroup {
                    layer: i + 1,
                    kind: *k,
                });
            }
        }
        let (layers, kinds) = layers.into_iter().unzip();
        Ok(HiddenGroupElement { layers, kinds })
    }

    pub fn identity(hidden: &[usize], kind: GroupKind) -> Self {
        HiddenGroupElement {
            layers: hidden.iter().map(|&h| Matrix::identity(h)).collect(),
            kinds: vec![kind; hidden.len()],
        }
    }

    /// Single hidden layer convenience.
    pub fn single(g: Matrix, kind: GroupKind) -> Result<Self> {
        HiddenGroupElement::new(vec![(g, kind)])
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn kinds(&self) -> &[GroupKind] {
        &self.kinds
    }

    /// Layerwise product `self · other`.
    pub fn compose(&self, other: &HiddenGroupElement) -> Result<Self> {
        if self.layers.len() != other.layers.len() {
            return Err(SymmetryError::Shape(
                "group elements of different depth".into(),
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.matmul(b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(HiddenGroupElement {
            layers,
            kinds: self.kinds.clone(),
        })
    }

    pub fn inverse(&self) -> Result<Self> {
        Ok(HiddenGroupElement {
            layers: self
                .layers
                .iter()
                .map(linalg::inverse)
                .collect::<std::result::Result<Vec<_>, _>>()?,
            kinds: self.kinds.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LieSymmetry {
    Symmetric,
    Antisymmetric,
    General,
}

/// `(M_1, ..., M_{L-1})` in the hidden Lie algebra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLie", into = "RawLie")]
pub struct HiddenLieElement {
    layers: Vec<Matrix>,
    flag: LieSymmetry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLie {
    layers: Vec<Matrix>,
    flag: LieSymmetry,
}

impl TryFrom<RawLie> for HiddenLieElement {
    type Error = SymmetryError;
    fn try_from(r: RawLie) -> Result<Self> {
        HiddenLieElement::new(r.layers, r.flag)
    }
}

impl From<HiddenLieElement> for RawLie {
    fn from(m: HiddenLieElement) -> Self {
        RawLie {
            layers: m.layers,
            flag: m.flag,
        }
    }
}

impl HiddenLieElement {
    pub fn new(layers: Vec<Matrix>, flag: LieSymmetry) -> Result<Self> {
        for (i, m) in layers.iter().enumerate() {
            if !m.is_square() {
                return Err(SymmetryError::Shape(format!("M_{} is not square", i + 1)));
            }
            let tol = 1e-12 * m.max_abs().max(1.0);
            let ok = match flag {
                LieSymmetry::General => true,
                LieSymmetry::Symmetric => (m - &m.transpose()).max_abs() <= tol,
                LieSymmetry::Antisymmetric => (m + &m.transpose()).max_abs() <= tol,
            };
            if !ok {
                return Err(SymmetryError::FlagMismatch { layer: i + 1, flag });
            }
        }
        Ok(HiddenLieElement { layers, flag })
    }

    pub fn single(m: Matrix, flag: LieSymmetry) -> Result<Self> {
        HiddenLieElement::new(vec![m], flag)
    }

    pub fn zeros(hidden: &[usize]) -> Self {
        HiddenLieElement {
            layers: hidden.iter().map(|&h| Matrix::zeros(h, h)).collect(),
            flag: LieSymmetry::Symmetric,
        }
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn flag(&self) -> LieSymmetry {
        self.flag
    }

    pub fn scale(&self, c: f64) -> Self {
        HiddenLieElement {
            layers: self.layers.iter().map(|m| m.scale(c)).collect(),
            flag: self.flag,
        }
    }

    /// `exp(M)` layerwise as a general linear group element.
    pub fn exp(&self) -> Result<HiddenGroupElement> {
        let layers = self
            .layers
            .iter()
            .map(|m| Ok((linalg::expm(m)?, GroupKind::GeneralLinear)))
            .collect::<Result<Vec<_>>>()?;
        HiddenGroupElement::new(layers)
    }
}

/// Representation `π` on one hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", deny_unknown_fields)]
pub enum PiRule {
    Identity,
    /// `π(g) = g^α` on positive diagonal matrices.
    Power {
        alpha: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiSpec(pub Vec<PiRule>);

impl PiSpec {
    pub fn identity(hidden_layers: usize) -> Self {
        PiSpec(vec![PiRule::Identity; hidden_layers])
    }

    pub fn power(alpha: f64, hidden_layers: usize) -> Self {
        PiSpec(vec![PiRule::Power { alpha }; hidden_layers])
    }

    pub fn rule(&self, layer: usize) -> PiRule {
        self.0.get(layer).copied().unwrap_or(PiRule::Identity)
    }
}

impl PiRule {
    /// `π(g)` for a group matrix `g`.
    pub fn apply(self, g: &Matrix) -> Result<Matrix> {
        match self {
            PiRule::Identity => Ok(g.clone()),
            PiRule::Power { alpha } => diag_power(g, alpha),
        }
    }

    /// `π(g⁻¹) = π(g)⁻¹`.
    pub fn apply_inverse(self, g: &Matrix) -> Result<Matrix> {
        match self {
            PiRule::Identity => Ok(linalg::inverse(g)?),
            PiRule::Power { alpha } => diag_power(g, -alpha),
        }
    }

    /// `dπ(M)`.
    pub fn differential(self, m: &Matrix) -> Matrix {
        match self {
            PiRule::Identity => m.clone(),
            PiRule::Power { alpha } => m.scale(alpha),
        }
    }
}

fn diag_power(g: &Matrix, alpha: f64) -> Result<Matrix> {
    if !GroupKind::PositiveDiagonal.contains(g) {
        return Err(SymmetryError::PowerNeedsDiagonal(0));
    }
    Ok(Matrix::diag(
        &g.diagonal()
            .iter()
            .map(|d| d.powf(alpha))
            .collect::<Vec<_>>(),
    ))
}

fn check_depth(params: &MlpParams, n_hidden: usize, what: &str) -> Result<()> {
    let hidden = params.widths().hidden();
    if hidden.len() != n_hidden {
        return Err(SymmetryError::Shape(format!(
            "{what} has {n_hidden} hidden layers, network has {}",
            hidden.len()
        )));
    }
    Ok(())
}

/// `g·W_i = g_i W_i π_{i−1}(g_{i−1})⁻¹`, `g·b_i = g_i b_i`.
pub fn apply_linear_action(
    params: &MlpParams,
    g: &HiddenGroupElement,
    pi: &PiSpec,
) -> Result<MlpParams> {
    check_depth(params, g.layers.len(), "group element")?;
    let depth = params.depth();
    for (j, rule) in pi.0.iter().enumerate().take(g.layers.len()) {
        if matches!(rule, PiRule::Power { .. }) && g.kinds[j] != GroupKind::PositiveDiagonal {
            return Err(SymmetryError::PowerNeedsDiagonal(j + 1));
        }
    }
    let mut weights = Vec::with_capacity(depth);
    for (i, w) in params.weights.iter().enumerate() {
        let mut w = w.clone();
        if i + 1 < depth {
            w = g.layers[i].matmul(&w)?;
        }
        if i >= 1 {
            w = w.matmul(&pi.rule(i - 1).apply_inverse(&g.layers[i - 1])?)?;
        }
        weights.push(w);
    }
    let biases = params.biases.as_ref().map(|bs| {
        bs.iter()
            .enumerate()
            .map(|(i, b)| {
                if i + 1 < depth {
                    Vector(g.layers[i].mat_vec(b).expect("bias shape"))
                } else {
                    b.clone()
                }
            })
            .collect()
    });
    Ok(MlpParams::new(params.widths().clone(), weights, biases)?)
}

/// One layer where the action does not commute with the activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Incompatibility {
    pub layer: usize,
    pub activation: Activation,
    pub kind: GroupKind,
    pub rule: PiRule,
}

/// Hidden layers whose (activation, group kind, π) triple is not an exact symmetry.
pub fn compatibility_warnings(
    acts: &[Activation],
    g: &HiddenGroupElement,
    pi: &PiSpec,
) -> Vec<Incompatibility> {
    let mut out = Vec::new();
    for (j, (gm, &kind)) in g.layers.iter().zip(&g.kinds).enumerate() {
        if *gm == Matrix::identity(gm.rows()) {
            continue;
        }
        let act = acts[j];
        let rule = pi.rule(j);
        let ok = match (act, rule) {
            (Activation::HomogeneousPower { alpha }, PiRule::Power { alpha: a }) => {
                alpha == a && kind == GroupKind::PositiveDiagonal
            }
            (Activation::HomogeneousPower { alpha }, PiRule::Identity) => {
                alpha == 1.0 && kind == GroupKind::PositiveDiagonal
            }
            (_, PiRule::Power { alpha }) => {
                alpha == 1.0 && kind.admitted_by(act.equivariance_class())
            }
            (_, PiRule::Identity) => kind.admitted_by(act.equivariance_class()),
        };
        if !ok {
            out.push(Incompatibility {
                layer: j + 1,
                activation: act,
                kind,
                rule,
            });
        }
    }
    out
}

/// Result of an action that may not be an exact symmetry.
#[derive(Clone, Debug)]
pub struct CheckedAction {
    pub params: MlpParams,
    pub warnings: Vec<Incompatibility>,
}

impl CheckedAction {
    pub fn is_exact_symmetry(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// [`apply_linear_action`] plus a flag for incompatible layers. The action is applied regardless.
pub fn apply_linear_action_checked(
    params: &MlpParams,
    acts: &[Activation],
    g: &HiddenGroupElement,
    pi: &PiSpec,
) -> Result<CheckedAction> {
    let out = apply_linear_action(params, g, pi)?;
    Ok(CheckedAction {
        params: out,
        warnings: compatibility_warnings(acts, g, pi),
    })
}

/// `M·W_i = M_i W_i − W_i dπ_{i−1}(M_{i−1})`, `M·b_i = M_i b_i`.
pub fn apply_infinitesimal(
    params: &MlpParams,
    m: &HiddenLieElement,
    pi: &PiSpec,
) -> Result<MlpParams> {
    check_depth(params, m.layers.len(), "Lie element")?;
    let depth = params.depth();
    let mut weights = Vec::with_capacity(depth);
    for (i, w) in params.weights.iter().enumerate() {
        let mut t = Matrix::zeros(w.rows(), w.cols());
        if i + 1 < depth {
            t = &t + &m.layers[i].matmul(w)?;
        }
        if i >= 1 {
            t = &t - &w.matmul(&pi.rule(i - 1).differential(&m.layers[i - 1]))?;
        }
        weights.push(t);
    }
    let biases = params.biases.as_ref().map(|bs| {
        bs.iter()
            .enumerate()
            .map(|(i, b)| {
                if i + 1 < depth {
                    Vector(m.layers[i].mat_vec(b).expect("bias shape"))
                } else {
                    Vector::zeros(b.len())
                }
            })
            .collect()
    });
    Ok(MlpParams::new(params.widths().clone(), weights, biases)?)
}

/// Max over random `z` of `‖σ(gz) − π(g)σ(z)‖ / (1 + ‖σ(gz)‖)`.
pub fn check_equivariance<R: Rng + ?Sized>(
    act: &Activation,
    g: &Matrix,
    rule: PiRule,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = g.rows();
    let pg = rule.apply(g)?;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let z = Matrix::from_fn(n, 1, |_, _| rng.sample(StandardNormal));
        let lhs = activation_apply(act, &g.matmul(&z)?)?;
        let rhs = pg.matmul(&activation_apply(act, &z)?)?;
        let r = (&lhs - &rhs).frobenius_norm() / (1.0 + lhs.frobenius_norm());
        worst = worst.max(r);
    }
    Ok(worst)
}

/// `|⟨∇L, M·θ⟩| / (‖∇L‖‖M·θ‖ + 1e-30)`.
pub fn check_grad_orthogonality(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    m: &HiddenLieElement,
    pi: &PiSpec,
) -> Result<f64> {
    let g = network::grad(params, acts, batch, conv)?;
    let t = apply_infinitesimal(params, m, pi)?;
    Ok(g.dot(&t).abs() / (g.norm() * t.norm() + 1e-30))
}

/// Transpose of the linear action applied to a gradient:
/// `G_i ↦ g_iᵀ G_i π_{i−1}(g_{i−1})⁻ᵀ`.
pub fn transport_gradient(
    grad: &MlpParams,
    g: &HiddenGroupElement,
    pi: &PiSpec,
) -> Result<MlpParams> {
    check_depth(grad, g.layers.len(), "group element")?;
    let depth = grad.depth();
    let mut weights = Vec::with_capacity(depth);
    for (i, w) in grad.weights.iter().enumerate() {
        let mut w = w.clone();
        if i + 1 < depth {
            w = g.layers[i].transpose().matmul(&w)?;
        }
        if i >= 1 {
            w = w.matmul(&pi.rule(i - 1).apply_inverse(&g.layers[i - 1])?.transpose())?;
        }
        weights.push(w);
    }
    let biases = grad.biases.as_ref().map(|bs| {
        bs.iter()
            .enumerate()
            .map(|(i, b)| {
                if i + 1 < depth {
                    Vector(g.layers[i].transpose().mat_vec(b).expect("bias shape"))
                } else {
                    b.clone()
                }
            })
            .collect()
    });
    Ok(MlpParams::new(grad.widths().clone(), weights, biases)?)
}

/// `‖transport(g, ∇_{g·θ}L) − ∇_θL‖ / (‖∇_θL‖ + 1e-30)`.
pub fn check_grad_equivariance(
    params: &MlpParams,
    acts: &[Activation],
    batch: &Batch,
    conv: LossConvention,
    g: &HiddenGroupElement,
    pi: &PiSpec,
) -> Result<f64> {
    let moved = apply_linear_action(params, g, pi)?;
    let g_moved = network::grad(&moved, acts, batch, conv)?;
    let g_here = network::grad(params, acts, batch, conv)?;
    let back = transport_gradient(&g_moved, g, pi)?;
    let diff = back.add_scaled(&g_here, -1.0)?;
    Ok(diff.norm() / (g_here.norm() + 1e-30))
}

fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Generic orbit dimension as tabulated for two-layer nets `n → h → m`.
pub fn orbit_dimension_formula(
    class: EquivarianceClass,
    n: usize,
    h: usize,
    m: usize,
) -> Result<usize> {
    let big = n.max(m);
    let small_regime = match class {
        EquivarianceClass::FullGL => h * h,
        EquivarianceClass::PositiveDiagonal => h,
        EquivarianceClass::Orthogonal => choose2(h),
        EquivarianceClass::None => return Err(SymmetryError::NoFormula(class)),
    };
    if h < big {
        return Ok(small_regime);
    }
    let large_regime = match class {
        EquivarianceClass::FullGL => h * (n + m) - n * m,
        EquivarianceClass::PositiveDiagonal => big,
        _ => choose2(h) - choose2(h - big),
    };
    if h == big {
        assert_eq!(
            small_regime, large_regime,
            "regimes disagree at h = max(n, m)"
        );
    }
    Ok(large_regime)
}

/// Orbit dimension from the stabilizer of a generic pair `(U, V)`.
///
/// Agrees with [`orbit_dimension_formula`] except when `h > max(n, m)` for the
/// positive diagonal and orthogonal classes.
pub fn orbit_dimension_generic(
    class: EquivarianceClass,
    n: usize,
    h: usize,
    m: usize,
) -> Result<usize> {
    match class {
        EquivarianceClass::FullGL => Ok(h * h - h.saturating_sub(n) * h.saturating_sub(m)),
        EquivarianceClass::PositiveDiagonal => Ok(h),
        EquivarianceClass::Orthogonal => Ok(choose2(h) - choose2(h.saturating_sub(n + m))),
        EquivarianceClass::None => Err(SymmetryError::NoFormula(class)),
    }
}

/// Numerical rank of the infinitesimal action over `basis`, with no locus check.
pub fn orbit_rank(params: &MlpParams, basis: &[HiddenLieElement], pi: &PiSpec) -> Result<usize> {
    if basis.is_empty() {
        return Ok(0);
    }
    let cols = basis
        .iter()
        .map(|m| Ok(apply_infinitesimal(params, m, pi)?.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let rows = params.num_params();
    let a = Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i]);
    if a.max_abs() == 0.0 {
        return Ok(0);
    }
    Ok(linalg::numerical_rank(&a, 1e-8)?)
}

/// Errors unless every weight has `σ_min > 1e-6 σ_max`.
pub fn check_full_rank(params: &MlpParams) -> Result<()> {
    for (i, w) in params.weights.iter().enumerate() {
        let s = linalg::svd_jacobi(w)?.s;
        let smax = s.first().copied().unwrap_or(0.0);
        let smin = s.last().copied().unwrap_or(0.0);
        let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        if ratio <= 1e-6 {
            return Err(SymmetryError::Degenerate {
                layer: i + 1,
                ratio,
            });
        }
    }
    Ok(())
}

/// Orbit dimension at `params` from the rank of the infinitesimal action.
pub fn orbit_dimension_empirical(
    params: &MlpParams,
    basis: &[HiddenLieElement],
    pi: &PiSpec,
) -> Result<usize> {
    check_full_rank(params)?;
    orbit_rank(params, basis, pi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LiePart {
    Symmetric,
    Antisymmetric,
    All,
}

pub fn lie_basis(kind: GroupKind, dim: usize, part: LiePart) -> Result<Vec<Matrix>> {
    let unit = |k: usize, l: usize| {
        let mut m = Matrix::zeros(dim, dim);
        m[(k, l)] = 1.0;
        m
    };
    let symmetric = || {
        let mut out = Vec::new();
        for k in 0..dim {
            for l in k..dim {
                let mut m = unit(k, l);
                m[(l, k)] = 1.0;
                out.push(m);
            }
        }
        out
    };
    let antisymmetric = || {
        let mut out = Vec::new();
        for k in 0..dim {
            for l in k + 1..dim {
                let mut m = unit(k, l);
                m[(l, k)] = -1.0;
                out.push(m);
            }
        }
        out
    };
    match (kind, part) {
        (GroupKind::GeneralLinear, LiePart::All) => Ok((0..dim)
            .flat_map(|k| (0..dim).map(move |l| (k, l)))
            .map(|(k, l)| unit(k, l))
            .collect()),
        (GroupKind::GeneralLinear, LiePart::Symmetric) => Ok(symmetric()),
        (GroupKind::GeneralLinear, LiePart::Antisymmetric)
        | (GroupKind::Orthogonal, LiePart::Antisymmetric | LiePart::All) => Ok(antisymmetric()),
        (GroupKind::PositiveDiagonal, LiePart::Symmetric | LiePart::All) => {
            Ok((0..dim).map(|k| unit(k, k)).collect())
        }
        _ => Err(SymmetryError::InvalidBasis { kind, part }),
    }
}

/// Basis of the full hidden algebra: each element is nonzero on one layer only.
pub fn hidden_lie_basis(
    kind: GroupKind,
    hidden: &[usize],
    part: LiePart,
) -> Result<Vec<HiddenLieElement>> {
    let flag = match (kind, part) {
        (GroupKind::PositiveDiagonal, _) | (_, LiePart::Symmetric) => LieSymmetry::Symmetric,
        (GroupKind::Orthogonal, _) | (_, LiePart::Antisymmetric) => LieSymmetry::Antisymmetric,
        _ => LieSymmetry::General,
    };
    let mut out = Vec::new();
    for (j, &h) in hidden.iter().enumerate() {
        for b in lie_basis(kind, h, part)? {
            let mut layers: Vec<Matrix> = hidden.iter().map(|&d| Matrix::zeros(d, d)).collect();
            layers[j] = b;
            out.push(HiddenLieElement { layers, flag });
        }
    }
    Ok(out)
}

pub fn sample_group_element<R: Rng + ?Sized>(
    kind: GroupKind,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if spread == 0.0 {
        return Ok(Matrix::identity(dim));
    }
    match kind {
        GroupKind::GeneralLinear => {
            for _ in 0..100 {
                let g = Matrix::from_fn(dim, dim, |i, j| {
                    let e: f64 = rng.sample(StandardNormal);
                    spread * e + if i == j { 1.0 } else { 0.0 }
                });
                if linalg::determinant(&g)?.abs() > 1e-6 {
                    return Ok(g);
                }
            }
            Err(SymmetryError::SamplingBudget)
        }
        GroupKind::Orthogonal => {
            let a = Matrix::from_fn(dim, dim, |i, j| {
                let e: f64 = rng.sample(StandardNormal);
                spread * e + if i == j { 1.0 } else { 0.0 }
            });
            let (q, r) = linalg::qr(&a);
            let signs: Vec<f64> = r
                .diagonal()
                .iter()
                .map(|d| if *d < 0.0 { -1.0 } else { 1.0 })
                .collect();
            Ok(Matrix::from_fn(dim, dim, |i, j| q[(i, j)] * signs[j]))
        }
        GroupKind::PositiveDiagonal => Ok(Matrix::diag(
            &(0..dim)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    (spread * e).exp()
                })
                .collect::<Vec<_>>(),
        )),
    }
}

/// A random hidden group element with one sampled matrix per hidden layer.
pub fn sample_hidden_element<R: Rng + ?Sized>(
    kind: GroupKind,
    hidden: &[usize],
    spread: f64,
    rng: &mut R,
) -> Result<HiddenGroupElement> {
    let layers = hidden
        .iter()
        .map(|&h| Ok((sample_group_element(kind, h, spread, rng)?, kind)))
        .collect::<Result<Vec<_>>>()?;
    HiddenGroupElement::new(layers)
}

/// Group kind whose orbits an activation class preserves.
pub fn class_group(class: EquivarianceClass) -> Result<GroupKind> {
    match class {
        EquivarianceClass::FullGL => Ok(GroupKind::GeneralLinear),
        EquivarianceClass::PositiveDiagonal => Ok(GroupKind::PositiveDiagonal),
        EquivarianceClass::Orthogonal => Ok(GroupKind::Orthogonal),
        EquivarianceClass::None => Err(SymmetryError::NoFormula(class)),
    }
}

/// Empirical orbit dimension at a Gaussian two-layer point, resampling degenerate draws.
pub fn sample_orbit_dimension<R: Rng + ?Sized>(
    class: EquivarianceClass,
    n: usize,
    h: usize,
    m: usize,
    rng: &mut R,
) -> Result<usize> {
    let basis = hidden_lie_basis(class_group(class)?, &[h], LiePart::All)?;
    let pi = PiSpec::identity(1);
    for _ in 0..20 {
        let u = Matrix::from_fn(m, h, |_, _| rng.sample(StandardNormal));
        let v = Matrix::from_fn(h, n, |_, _| rng.sample(StandardNormal));
        match orbit_dimension_empirical(&MlpParams::two_layer(u, v)?, &basis, &pi) {
            Err(SymmetryError::Degenerate { .. }) => continue,
            other => return other,
        }
    }
    Err(SymmetryError::SamplingBudget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{loss_mse, RadialProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn ex_params() -> MlpParams {
        MlpParams::two_layer(
            Matrix::from_rows(&[&[1.0, 2.0]]),
            Matrix::column_vector(&[3.0, 4.0]),
        )
        .unwrap()
    }

    #[test]
    fn identity_acts_trivially() {
        let p = ex_params();
        let g = HiddenGroupElement::identity(&[2], GroupKind::GeneralLinear);
        assert_eq!(
            apply_linear_action(&p, &g, &PiSpec::identity(1)).unwrap(),
            p
        );
    }

    #[test]
    fn scalar_multiple_action_by_hand() {
        let p = ex_params();
        let g = HiddenGroupElement::single(Matrix::diag(&[2.0, 2.0]), GroupKind::GeneralLinear)
            .unwrap();
        let q = apply_linear_action(&p, &g, &PiSpec::identity(1)).unwrap();
        assert_eq!(q.weights[1], Matrix::from_rows(&[&[0.5, 1.0]]));
        assert_eq!(q.weights[0], Matrix::column_vector(&[6.0, 8.0]));
        let b = Batch::new(
            Matrix::from_rows(&[&[0.3, -1.0]]),
            Matrix::from_rows(&[&[1.0, 2.0]]),
        )
        .unwrap();
        let acts = [Activation::Identity; 2];
        let l0 = loss_mse(&p, &acts, &b, LossConvention::Mean).unwrap();
        let l1 = loss_mse(&q, &acts, &b, LossConvention::Mean).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_diagonal_action_keeps_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::two_layer(gaussian(3, 2, &mut rng), gaussian(2, 4, &mut rng)).unwrap();
        let acts = [Activation::LeakyReLU { slope: 0.2 }, Activation::Identity];
        let b = Batch::new(gaussian(4, 5, &mut rng), gaussian(3, 5, &mut rng)).unwrap();
        let g = HiddenGroupElement::single(Matrix::diag(&[2.0, 3.0]), GroupKind::PositiveDiagonal)
            .unwrap();
        let out = apply_linear_action_checked(&p, &acts, &g, &PiSpec::identity(1)).unwrap();
        assert!(out.is_exact_symmetry());
        let l0 = loss_mse(&p, &acts, &b, LossConvention::Mean).unwrap();
        let l1 = loss_mse(&out.params, &acts, &b, LossConvention::Mean).unwrap();
        assert!((l0 - l1).abs() <= 1e-10);
    }

    #[test]
    fn incompatible_action_is_flagged_and_applied() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::two_layer(gaussian(1, 3, &mut rng), gaussian(3, 2, &mut rng)).unwrap();
        let acts = [Activation::Sigmoid, Activation::Identity];
        let g = sample_hidden_element(GroupKind::GeneralLinear, &[3], 0.5, &mut rng).unwrap();
        let out = apply_linear_action_checked(&p, &acts, &g, &PiSpec::identity(1)).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].layer, 1);
        assert_ne!(out.params, p);
    }

    #[test]
    fn power_rule_needs_diagonal_group() {
        let p = ex_params();
        let g = HiddenGroupElement::single(
            Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]),
            GroupKind::GeneralLinear,
        )
        .unwrap();
        assert!(matches!(
            apply_linear_action(&p, &g, &PiSpec::power(2.0, 1)),
            Err(SymmetryError::PowerNeedsDiagonal(1))
        ));
    }

    #[test]
    fn homogeneous_power_action_keeps_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = 2.0;
        let p = MlpParams::two_layer(gaussian(2, 3, &mut rng), gaussian(3, 2, &mut rng)).unwrap();
        let acts = [Activation::HomogeneousPower { alpha }, Activation::Identity];
        let b = Batch::new(gaussian(2, 4, &mut rng), gaussian(2, 4, &mut rng)).unwrap();
        let g = sample_hidden_element(GroupKind::PositiveDiagonal, &[3], 0.7, &mut rng).unwrap();
        let pi = PiSpec::power(alpha, 1);
        let out = apply_linear_action_checked(&p, &acts, &g, &pi).unwrap();
        assert!(out.is_exact_symmetry());
        let l0 = loss_mse(&p, &acts, &b, LossConvention::Mean).unwrap();
        let l1 = loss_mse(&out.params, &acts, &b, LossConvention::Mean).unwrap();
        assert!((l0 - l1).abs() <= 1e-10 * (1.0 + l0));
    }

    #[test]
    fn infinitesimal_examples() {
        let p = ex_params();
        let zero = HiddenLieElement::zeros(&[2]);
        let t = apply_infinitesimal(&p, &zero, &PiSpec::identity(1)).unwrap();
        assert!(t.flatten().iter().all(|&x| x == 0.0));
        let m = HiddenLieElement::single(Matrix::identity(2), LieSymmetry::Symmetric).unwrap();
        let t = apply_infinitesimal(&p, &m, &PiSpec::identity(1)).unwrap();
        assert_eq!(t.weights[1], p.weights[1].scale(-1.0));
        assert_eq!(t.weights[0], p.weights[0]);
    }

    #[test]
    fn infinitesimal_matches_exponential_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MlpParams::new(
            crate::network::Widths::new(vec![2, 3, 4, 2]).unwrap(),
            vec![
                gaussian(3, 2, &mut rng),
                gaussian(4, 3, &mut rng),
                gaussian(2, 4, &mut rng),
            ],
            Some(vec![
                Vector(vec![0.1, 0.2, -0.3]),
                Vector(vec![1.0, -1.0, 0.5, 0.0]),
                Vector(vec![0.3, 0.4]),
            ]),
        )
        .unwrap();
        let m = HiddenLieElement::new(
            vec![gaussian(3, 3, &mut rng), gaussian(4, 4, &mut rng)],
            LieSymmetry::General,
        )
        .unwrap();
        let pi = PiSpec::identity(2);
        let t = 1e-6;
        let g = m.scale(t).exp().unwrap();
        let moved = apply_linear_action(&p, &g, &pi).unwrap();
        let fd = moved.add_scaled(&p, -1.0).unwrap().flatten();
        let inf = apply_infinitesimal(&p, &m, &pi).unwrap().flatten();
        for (a, b) in fd.iter().zip(&inf) {
            assert!((a / t - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn equivariance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = gaussian(3, 3, &mut rng);
        let r =
            check_equivariance(&Activation::Identity, &g, PiRule::Identity, 20, &mut rng).unwrap();
        assert!(r < 1e-14);
        let d = Matrix::diag(&[2.0, 5.0]);
        let r = check_equivariance(
            &Activation::LeakyReLU { slope: 0.1 },
            &d,
            PiRule::Identity,
            50,
            &mut rng,
        )
        .unwrap();
        assert!(r <= 1e-12);
        let two = Matrix::diag(&[2.0, 2.0]);
        let r =
            check_equivariance(&Activation::Sigmoid, &two, PiRule::Identity, 20, &mut rng).unwrap();
        assert!(r > 0.1);
        let z = Matrix::column_vector(&[1.0, 0.0]);
        let lhs = activation_apply(&Activation::Sigmoid, &two.matmul(&z).unwrap()).unwrap();
        let rhs = two
            .matmul(&activation_apply(&Activation::Sigmoid, &z).unwrap())
            .unwrap();
        assert!((lhs[(0, 0)] - rhs[(0, 0)]).abs() > 0.5);
    }

    #[test]
    fn radial_net_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MlpParams::two_layer(gaussian(2, 4, &mut rng), gaussian(4, 3, &mut rng)).unwrap();
        let acts = [
            Activation::RadialRescale {
                profile: RadialProfile::TanhRatio,
            },
            Activation::Identity,
        ];
        let b = Batch::new(gaussian(3, 5, &mut rng), gaussian(2, 5, &mut rng)).unwrap();
        for m in hidden_lie_basis(GroupKind::Orthogonal, &[4], LiePart::All).unwrap() {
            let r = check_grad_orthogonality(
                &p,
                &acts,
                &b,
                LossConvention::Mean,
                &m,
                &PiSpec::identity(1),
            )
            .unwrap();
            assert!(r <= 1e-9, "{r}");
        }
    }

    #[test]
    fn grad_equivariance_for_orthogonal_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = MlpParams::two_layer(gaussian(2, 3, &mut rng), gaussian(3, 2, &mut rng)).unwrap();
        let acts = [Activation::Identity; 2];
        let b = Batch::new(gaussian(2, 4, &mut rng), gaussian(2, 4, &mut rng)).unwrap();
        let pi = PiSpec::identity(1);
        let id = HiddenGroupElement::identity(&[3], GroupKind::Orthogonal);
        assert_eq!(
            check_grad_equivariance(&p, &acts, &b, LossConvention::Mean, &id, &pi).unwrap(),
            0.0
        );
        let g = sample_hidden_element(GroupKind::Orthogonal, &[3], 1.0, &mut rng).unwrap();
        assert!(
            check_grad_equivariance(&p, &acts, &b, LossConvention::Mean, &g, &pi).unwrap() <= 1e-9
        );
        let g = sample_hidden_element(GroupKind::GeneralLinear, &[3], 0.4, &mut rng).unwrap();
        assert!(
            check_grad_equivariance(&p, &acts, &b, LossConvention::Mean, &g, &pi).unwrap() <= 1e-9
        );
    }

    #[test]
    fn formula_examples() {
        use EquivarianceClass::*;
        assert_eq!(orbit_dimension_formula(FullGL, 1, 2, 1).unwrap(), 3);
        assert_eq!(
            orbit_dimension_formula(PositiveDiagonal, 3, 2, 1).unwrap(),
            2
        );
        assert_eq!(orbit_dimension_formula(Orthogonal, 1, 2, 1).unwrap(), 1);
        assert!(orbit_dimension_formula(None, 1, 2, 1).is_err());
    }

    fn random_two_layer(n: usize, h: usize, m: usize, rng: &mut ChaCha8Rng) -> MlpParams {
        MlpParams::two_layer(gaussian(m, h, rng), gaussian(h, n, rng)).unwrap()
    }

    fn empirical(
        class: EquivarianceClass,
        n: usize,
        h: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let (kind, part) = match class {
            EquivarianceClass::FullGL => (GroupKind::GeneralLinear, LiePart::All),
            EquivarianceClass::PositiveDiagonal => (GroupKind::PositiveDiagonal, LiePart::All),
            _ => (GroupKind::Orthogonal, LiePart::All),
        };
        let basis = hidden_lie_basis(kind, &[h], part).unwrap();
        let p = random_two_layer(n, h, m, rng);
        orbit_dimension_empirical(&p, &basis, &PiSpec::identity(1)).unwrap()
    }

    #[test]
    fn rank_oracle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(empirical(EquivarianceClass::FullGL, 1, 2, 1, &mut rng), 3);
        assert_eq!(
            empirical(EquivarianceClass::Orthogonal, 5, 3, 5, &mut rng),
            3
        );
        assert_eq!(
            empirical(EquivarianceClass::PositiveDiagonal, 3, 2, 1, &mut rng),
            2
        );
        let zero = MlpParams::two_layer(Matrix::zeros(1, 2), Matrix::zeros(2, 1)).unwrap();
        let basis = hidden_lie_basis(GroupKind::GeneralLinear, &[2], LiePart::All).unwrap();
        assert_eq!(orbit_rank(&zero, &basis, &PiSpec::identity(1)).unwrap(), 0);
        assert!(matches!(
            orbit_dimension_empirical(&zero, &basis, &PiSpec::identity(1)),
            Err(SymmetryError::Degenerate { .. })
        ));
    }

    #[test]
    fn generic_formula_matches_rank_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for class in [
            EquivarianceClass::FullGL,
            EquivarianceClass::PositiveDiagonal,
            EquivarianceClass::Orthogonal,
        ] {
            for n in 1..=4 {
                for h in 1..=4 {
                    for m in 1..=4 {
                        let want = orbit_dimension_generic(class, n, h, m).unwrap();
                        assert_eq!(
                            empirical(class, n, h, m, &mut rng),
                            want,
                            "{class:?} {n} {h} {m}"
                        );
                        if h <= n.max(m) || class == EquivarianceClass::FullGL {
                            assert_eq!(orbit_dimension_formula(class, n, h, m).unwrap(), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn basis_examples() {
        let o = lie_basis(GroupKind::Orthogonal, 2, LiePart::All).unwrap();
        assert_eq!(o, vec![Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]])]);
        assert_eq!(
            lie_basis(GroupKind::GeneralLinear, 2, LiePart::Symmetric)
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            lie_basis(GroupKind::GeneralLinear, 3, LiePart::All)
                .unwrap()
                .len(),
            9
        );
        let d = lie_basis(GroupKind::PositiveDiagonal, 3, LiePart::All).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d
            .iter()
            .enumerate()
            .all(|(k, m)| m[(k, k)] == 1.0 && m.frobenius_norm() == 1.0));
        assert!(lie_basis(GroupKind::Orthogonal, 2, LiePart::Symmetric).is_err());
        assert!(lie_basis(GroupKind::PositiveDiagonal, 2, LiePart::Antisymmetric).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for kind in [
            GroupKind::GeneralLinear,
            GroupKind::PositiveDiagonal,
            GroupKind::Orthogonal,
        ] {
            assert_eq!(
                sample_group_element(kind, 3, 0.0, &mut rng).unwrap(),
                Matrix::identity(3)
            );
            let g = sample_group_element(kind, 4, 0.8, &mut rng).unwrap();
            assert!(kind.contains(&g));
        }
        let o = sample_group_element(GroupKind::Orthogonal, 5, 2.0, &mut rng).unwrap();
        assert!((&(&o.transpose() * &o) - &Matrix::identity(5)).frobenius_norm() <= 1e-10);
        let d = sample_group_element(GroupKind::PositiveDiagonal, 5, 3.0, &mut rng).unwrap();
        assert!(d.diagonal().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn lie_flag_is_validated() {
        let a = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!(HiddenLieElement::single(a.clone(), LieSymmetry::Symmetric).is_err());
        assert!(HiddenLieElement::single(a.clone(), LieSymmetry::Antisymmetric).is_err());
        assert!(HiddenLieElement::single(a, LieSymmetry::General).is_ok());
        let bad =
            HiddenGroupElement::single(Matrix::diag(&[1.0, -1.0]), GroupKind::PositiveDiagonal);
        assert!(matches!(
            bad,
            Err(SymmetryError::NotInGroup { layer: 1, .. })
        ));
    }
}
