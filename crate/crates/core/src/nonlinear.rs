//! Data-dependent `GL_h` actions built from hyperspherical rotations.
//!
//! For nonzero `z`, `R_z = |z|·R(α)` is a scaled rotation whose first column
//! is `z`. Replacing `U` by `U R_{σ(Vx)} R_{σ(gVx)}⁻¹` and `V` by `gV` keeps the
//! network output at the anchor `x` fixed for any invertible `g`.

use thiserror::Error;

use crate::linalg::{self, norm2, LinalgError, Matrix, Vector};
use crate::network::{self, activation_apply, Activation, MlpParams, NetworkError};
use crate::symmetry::HiddenGroupElement;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearError {
    #[error("zero vector has no spherical coordinates")]
    ZeroVector,
    #[error("spherical coordinates need dimension at least 2")]
    Dimension,
    #[error("vector norm {norm:e} below threshold")]
    NearZero { norm: f64 },
    #[error("degenerate locus at layer {layer}: {what} has norm {norm:e}")]
    Degenerate {
        layer: usize,
        what: &'static str,
        norm: f64,
    },
    #[error("entrywise formula undefined: vanishing sine product")]
    VanishingSines,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, NonlinearError>;

const SIGMA_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SphericalCoords {
    pub r: f64,
    pub angles: Vec<f64>,
}

impl SphericalCoords {
    /// `z_i = r cos(α_i) ∏_{k<i} sin(α_k)` with `α_h = 0`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let h = self.angles.len() + 1;
        let mut out = Vec::with_capacity(h);
        let mut sines = 1.0;
        for i in 0..h {
            let a = self.angles.get(i).copied().unwrap_or(0.0);
            out.push(self.r * a.cos() * sines);
            sines *= a.sin();
        }
        out
    }
}

pub fn spherical_coordinates(z: &[f64]) -> Result<SphericalCoords> {
    let h = z.len();
    if h < 2 {
        return Err(NonlinearError::Dimension);
    }
    let r = norm2(z);
    if r == 0.0 {
        return Err(NonlinearError::ZeroVector);
    }
    let mut angles = vec![0.0; h - 1];
    for i in 0..h - 1 {
        if norm2(&z[i..]) < 1e-12 * r {
            break;
        }
        angles[i] = if i == h - 2 {
            z[h - 1].atan2(z[h - 2])
        } else {
            norm2(&z[i + 1..]).atan2(z[i])
        };
    }
    Ok(SphericalCoords { r, angles })
}

/// The orthogonal `(n+1)×(n+1)` matrix `R(β)` with `β_0 = β_{n+1} = 0`.
pub fn rotation_from_angles(beta: &[f64]) -> Matrix {
    let n = beta.len();
    let b = |k: usize| if k == 0 || k > n { 0.0 } else { beta[k - 1] };
    Matrix::from_fn(n + 1, n + 1, |i0, j0| {
        let (i, j) = (i0 + 1, j0 + 1);
        if j <= i {
            let sines: f64 = (j..i).map(|k| b(k).sin()).product();
            b(j - 1).cos() * sines * b(i).cos()
        } else if j == i + 1 {
            -b(i).sin()
        } else {
            0.0
        }
    })
}

/// `R_z` together with `|z|`.
#[derive(Clone, Debug, PartialEq)]
pub struct RMatrix {
    pub matrix: Matrix,
    pub norm: f64,
}

impl RMatrix {
    /// `R_z⁻¹ = R_zᵀ / |z|²`.
    pub fn inverse(&self) -> Matrix {
        self.matrix.transpose().scale(1.0 / (self.norm * self.norm))
    }
}

pub fn r_matrix(z: &[f64]) -> Result<RMatrix> {
    let h = z.len();
    let norm = norm2(z);
    if h == 0 || norm <= 1e-12 * (h as f64).sqrt() {
        return Err(NonlinearError::NearZero { norm });
    }
    if h == 1 {
        return Ok(RMatrix {
            matrix: Matrix::from_rows(&[&[z[0]]]),
            norm,
        });
    }
    let sc = spherical_coordinates(z)?;
    Ok(RMatrix {
        matrix: rotation_from_angles(&sc.angles).scale(norm),
        norm,
    })
}

/// Entrywise closed form of `R_z`, defined only when no sine product vanishes.
pub fn r_matrix_entrywise(z: &[f64]) -> Result<Matrix> {
    let sc = spherical_coordinates(z)?;
    let h = z.len();
    let a = |k: usize| {
        if k == 0 || k >= h {
            0.0
        } else {
            sc.angles[k - 1]
        }
    };
    let prod = |upto: usize| (1..=upto).map(|k| a(k).sin()).product::<f64>();
    if (1..h).any(|i| prod(i - 1) == 0.0) {
        return Err(NonlinearError::VanishingSines);
    }
    Ok(Matrix::from_fn(h, h, |i0, j0| {
        let (i, j) = (i0 + 1, j0 + 1);
        if j <= i {
            z[i0] * a(j - 1).cos() / prod(j - 1)
        } else if j == i + 1 {
            -sc.r * a(i).sin()
        } else {
            0.0
        }
    }))
}

fn sigma_vec(act: &Activation, z: &[f64]) -> Result<Vec<f64>> {
    Ok(activation_apply(act, &Matrix::column_vector(z))?.into_data())
}

fn vanishes_at_zero(act: &Activation) -> bool {
    match act {
        Activation::Sigmoid => false,
        Activation::RadialRescale { .. } | Activation::RowRadial { .. } => true,
        a => a.scalar(0.0) == 0.0,
    }
}

/// Checks the non-degenerate locus condition for one preactivation and its image.
fn checked_sigma(
    act: &Activation,
    z: &[f64],
    layer: usize,
    what: &'static str,
) -> Result<Vec<f64>> {
    if vanishes_at_zero(act) && norm2(z) <= SIGMA_FLOOR {
        return Err(NonlinearError::Degenerate {
            layer,
            what,
            norm: norm2(z),
        });
    }
    let s = sigma_vec(act, z)?;
    let n = norm2(&s);
    if n <= SIGMA_FLOOR {
        return Err(NonlinearError::Degenerate {
            layer,
            what,
            norm: n,
        });
    }
    Ok(s)
}

/// `(U, V) ↦ (U R_{σ(Vx)} R_{σ(gVx)}⁻¹, gV)`.
pub fn apply_nonlinear_action(
    u: &Matrix,
    v: &Matrix,
    x: &[f64],
    g: &Matrix,
    act: &Activation,
) -> Result<(Matrix, Matrix)> {
    if u.cols() != v.rows() || v.cols() != x.len() || g.shape() != (v.rows(), v.rows()) {
        return Err(NonlinearError::Shape(format!(
            "U {:?}, V {:?}, x {}, g {:?}",
            u.shape(),
            v.shape(),
            x.len(),
            g.shape()
        )));
    }
    if *g == Matrix::identity(g.rows()) {
        return Ok((u.clone(), v.clone()));
    }
    let vx = v.mat_vec(x)?;
    let gvx = g.mat_vec(&vx)?;
    let s = checked_sigma(act, &vx, 1, "Vx")?;
    let sg = checked_sigma(act, &gvx, 1, "gVx")?;
    let ra = r_matrix(&s)?;
    let rb = r_matrix(&sg)?;
    let u2 = u.matmul(&ra.matrix)?.matmul(&rb.inverse())?;
    let v2 = g.matmul(v)?;
    Ok((u2, v2))
}

/// Multi-layer action `W_i ↦ g_i W_i R_{F_{i−1}} R⁻¹_{σ_{i−1}(g_{i−1} Z_{i−1})}`, `b_i ↦ g_i b_i`.
pub fn apply_nonlinear_action_deep(
    params: &MlpParams,
    acts: &[Activation],
    x: &[f64],
    g: &HiddenGroupElement,
) -> Result<MlpParams> {
    let depth = params.depth();
    if g.layers().len() + 1 != depth {
        return Err(NonlinearError::Shape(format!(
            "group element has {} layers, network has {} hidden layers",
            g.layers().len(),
            depth - 1
        )));
    }
    let trace = network::forward(params, acts, &Matrix::column_vector(x))?;
    let mut weights = Vec::with_capacity(depth);
    for (i, w) in params.weights.iter().enumerate() {
        let mut w = w.clone();
        if i + 1 < depth {
            w = g.layers()[i].matmul(&w)?;
        }
        if i >= 1 {
            let gi = &g.layers()[i - 1];
            if *gi != Matrix::identity(gi.rows()) {
                let z = trace.preactivations[i - 1].column(0);
                let f = checked_sigma(&acts[i - 1], &z, i, "Z")?;
                let gz = gi.mat_vec(&z)?;
                let fg = checked_sigma(&acts[i - 1], &gz, i, "gZ")?;
                let ra = r_matrix(&f)?;
                let rb = r_matrix(&fg)?;
                w = w.matmul(&ra.matrix)?.matmul(&rb.inverse())?;
            }
        }
        weights.push(w);
    }
    let biases = params.biases.as_ref().map(|bs| {
        bs.iter()
            .enumerate()
            .map(|(i, b)| {
                if i + 1 < depth {
                    Vector(g.layers()[i].mat_vec(b).expect("bias shape"))
                } else {
                    b.clone()
                }
            })
            .collect()
    });
    Ok(MlpParams::new(params.widths().clone(), weights, biases)?)
}

/// `c(g, z) = R_{σ(gz)} R_{σ(z)}⁻¹`, so that `σ(gz) = c(g, z) σ(z)`.
pub fn equivariance_map_c(g: &Matrix, z: &[f64], act: &Activation) -> Result<Matrix> {
    let s = checked_sigma(act, z, 1, "z")?;
    let gz = g.mat_vec(z)?;
    let sg = checked_sigma(act, &gz, 1, "gz")?;
    Ok(r_matrix(&sg)?.matrix.matmul(&r_matrix(&s)?.inverse())?)
}

/// `η ‖U‖ ‖V‖ |σ(Vx)| ‖g‖ / |σ(gVx)|`, operator norms by power iteration.
pub fn lipschitz_bound(
    u: &Matrix,
    v: &Matrix,
    x: &[f64],
    g: &Matrix,
    act: &Activation,
    eta: f64,
) -> Result<f64> {
    let vx = v.mat_vec(x)?;
    let s = checked_sigma(act, &vx, 1, "Vx")?;
    let sg = checked_sigma(act, &g.mat_vec(&vx)?, 1, "gVx")?;
    Ok(eta
        * linalg::operator_norm(u)
        * linalg::operator_norm(v)
        * norm2(&s)
        * linalg::operator_norm(g)
        / norm2(&sg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::FRAC_PI_2;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn gvec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn two_layer_out(u: &Matrix, v: &Matrix, act: &Activation, x: &[f64]) -> Vec<f64> {
        let s = sigma_vec(act, &v.mat_vec(x).unwrap()).unwrap();
        u.mat_vec(&s).unwrap()
    }

    #[test]
    fn spherical_examples() {
        let sc = spherical_coordinates(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(sc.r, 1.0);
        assert!(sc.angles.iter().all(|&a| a == 0.0));
        let sc = spherical_coordinates(&[0.0, 1.0]).unwrap();
        assert!((sc.angles[0] - FRAC_PI_2).abs() < 1e-15);
        let sc = spherical_coordinates(&[3.0, 4.0]).unwrap();
        assert_eq!(sc.r, 5.0);
        assert!((sc.angles[0] - 0.9273).abs() < 1e-4);
        let back = sc.reconstruct();
        assert!((back[0] - 3.0).abs() < 1e-12 * 5.0 && (back[1] - 4.0).abs() < 1e-12 * 5.0);
        assert_eq!(
            spherical_coordinates(&[0.0, 0.0]),
            Err(NonlinearError::ZeroVector)
        );
    }

    #[test]
    fn spherical_reconstruction_with_zero_suffix() {
        for z in [
            vec![2.0, -1.0, 0.0, 0.0],
            vec![0.0, 0.0, -3.0],
            vec![-1.0, 0.0, 0.0, 1e-20],
        ] {
            let sc = spherical_coordinates(&z).unwrap();
            for (a, b) in sc.reconstruct().iter().zip(&z) {
                assert!((a - b).abs() <= 1e-12 * sc.r);
            }
        }
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_from_angles(&[0.0]), Matrix::identity(2));
        let r = rotation_from_angles(&[FRAC_PI_2]);
        let want = Matrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!((&r - &want).max_abs() < 1e-15);
        let (b1, b2) = (0.4f64, -1.3f64);
        let (c1, s1, c2, s2) = (b1.cos(), b1.sin(), b2.cos(), b2.sin());
        let want = Matrix::from_rows(&[
            &[c1, -s1, 0.0],
            &[s1 * c2, c1 * c2, -s2],
            &[s1 * s2, c1 * s2, c2],
        ]);
        assert!((&rotation_from_angles(&[b1, b2]) - &want).max_abs() < 1e-15);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..10 {
            let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let r = rotation_from_angles(&beta);
            let e = &(&r.transpose() * &r) - &Matrix::identity(n + 1);
            assert!(e.max_abs() < 1e-12);
        }
    }

    #[test]
    fn r_matrix_examples() {
        let r = r_matrix(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.matrix, Matrix::identity(3));
        let r = r_matrix(&[3.0, 4.0]).unwrap();
        let want = Matrix::from_rows(&[&[3.0, -4.0], &[4.0, 3.0]]);
        assert!((&r.matrix - &want).max_abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gvec(7, &mut rng);
        let r = r_matrix(&z).unwrap();
        for (a, b) in r.matrix.column(0).iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        let e = &(&r.matrix * &r.inverse()) - &Matrix::identity(7);
        assert!(e.frobenius_norm() <= 1e-10);
        assert!(matches!(
            r_matrix(&[0.0, 0.0]),
            Err(NonlinearError::NearZero { .. })
        ));
        let neg = r_matrix(&[-2.0]).unwrap();
        assert_eq!(neg.matrix[(0, 0)], -2.0);
    }

    #[test]
    fn entrywise_formula_agrees_on_generic_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for h in 2..8 {
            let z = gvec(h, &mut rng);
            let a = r_matrix(&z).unwrap().matrix;
            let b = r_matrix_entrywise(&z).unwrap();
            assert!((&a - &b).max_abs() < 1e-10 * norm2(&z));
        }
        assert_eq!(
            r_matrix_entrywise(&[1.0, 0.0, 0.0]),
            Err(NonlinearError::VanishingSines)
        );
    }

    #[test]
    fn identity_g_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = gaussian(2, 3, &mut rng);
        let v = gaussian(3, 2, &mut rng);
        let (u2, v2) = apply_nonlinear_action(
            &u,
            &v,
            &[0.5, -0.2],
            &Matrix::identity(3),
            &Activation::Sigmoid,
        )
        .unwrap();
        assert_eq!((u2, v2), (u, v));
    }

    #[test]
    fn sigmoid_anchor_preserved_elsewhere_changed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let act = Activation::Sigmoid;
        let u = gaussian(3, 4, &mut rng);
        let v = gaussian(4, 2, &mut rng);
        let x = gvec(2, &mut rng);
        let g = &Matrix::identity(4) + &gaussian(4, 4, &mut rng).scale(0.5);
        let (u2, v2) = apply_nonlinear_action(&u, &v, &x, &g, &act).unwrap();
        assert_eq!(v2, &g * &v);
        let before = two_layer_out(&u, &v, &act, &x);
        let after = two_layer_out(&u2, &v2, &act, &x);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-8);
        }
        let other = gvec(2, &mut rng);
        let b0 = two_layer_out(&u, &v, &act, &other);
        let b1 = two_layer_out(&u2, &v2, &act, &other);
        let diff: f64 = b0.iter().zip(&b1).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn degenerate_anchor_is_rejected() {
        let u = Matrix::from_rows(&[&[1.0, 1.0]]);
        let v = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = Matrix::diag(&[2.0, 3.0]);
        let r = apply_nonlinear_action(&u, &v, &[0.0, 0.0], &g, &Activation::Tanh);
        assert!(matches!(r, Err(NonlinearError::Degenerate { .. })));
        let ok = apply_nonlinear_action(&u, &v, &[0.0, 0.0], &g, &Activation::Sigmoid);
        assert!(ok.is_ok());
    }

    #[test]
    fn deep_action_transports_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let widths = crate::network::Widths::new(vec![3, 4, 5, 2]).unwrap();
        let p = MlpParams::new(
            widths,
            vec![
                gaussian(4, 3, &mut rng),
                gaussian(5, 4, &mut rng),
                gaussian(2, 5, &mut rng),
            ],
            Some(vec![
                Vector(gvec(4, &mut rng)),
                Vector(gvec(5, &mut rng)),
                Vector(gvec(2, &mut rng)),
            ]),
        )
        .unwrap();
        let acts = [
            Activation::Sigmoid,
            Activation::Sigmoid,
            Activation::Identity,
        ];
        let x = gvec(3, &mut rng);
        let g = HiddenGroupElement::new(vec![
            (
                &Matrix::identity(4) + &gaussian(4, 4, &mut rng).scale(0.3),
                crate::symmetry::GroupKind::GeneralLinear,
            ),
            (
                &Matrix::identity(5) + &gaussian(5, 5, &mut rng).scale(0.3),
                crate::symmetry::GroupKind::GeneralLinear,
            ),
        ])
        .unwrap();
        let q = apply_nonlinear_action_deep(&p, &acts, &x, &g).unwrap();
        let xm = Matrix::column_vector(&x);
        let t0 = network::forward(&p, &acts, &xm).unwrap();
        let t1 = network::forward(&q, &acts, &xm).unwrap();
        for i in 0..2 {
            let want = g.layers()[i].matmul(&t0.preactivations[i]).unwrap();
            assert!((&want - &t1.preactivations[i]).max_abs() <= 1e-8);
        }
        let d = (t0.output() - t1.output()).frobenius_norm();
        assert!(d <= 1e-7 * (1.0 + t0.output().frobenius_norm()));
        let id = HiddenGroupElement::identity(&[4, 5], crate::symmetry::GroupKind::GeneralLinear);
        assert_eq!(apply_nonlinear_action_deep(&p, &acts, &x, &id).unwrap(), p);
    }

    #[test]
    fn cocycle_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let act = Activation::Sigmoid;
        let z = gvec(3, &mut rng);
        assert_eq!(
            equivariance_map_c(&Matrix::identity(3), &z, &act).unwrap(),
            {
                let r = r_matrix(&sigma_vec(&act, &z).unwrap()).unwrap();
                r.matrix.matmul(&r.inverse()).unwrap()
            }
        );
        let g1 = &Matrix::identity(3) + &gaussian(3, 3, &mut rng).scale(0.4);
        let g2 = &Matrix::identity(3) + &gaussian(3, 3, &mut rng).scale(0.4);
        let c2 = equivariance_map_c(&g2, &z, &act).unwrap();
        let c1 = equivariance_map_c(&g1, &g2.mat_vec(&z).unwrap(), &act).unwrap();
        let c12 = equivariance_map_c(&(&g1 * &g2), &z, &act).unwrap();
        assert!((&(&c1 * &c2) - &c12).max_abs() <= 1e-9);
        let lhs = sigma_vec(&act, &g1.mat_vec(&z).unwrap()).unwrap();
        let rhs = equivariance_map_c(&g1, &z, &act)
            .unwrap()
            .mat_vec(&sigma_vec(&act, &z).unwrap())
            .unwrap();
        assert!(lhs.iter().zip(&rhs).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn lipschitz_identity_and_scalar_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = gaussian(2, 3, &mut rng);
        let v = gaussian(3, 4, &mut rng);
        let x = gvec(4, &mut rng);
        let b =
            lipschitz_bound(&u, &v, &x, &Matrix::identity(3), &Activation::Sigmoid, 0.25).unwrap();
        let want = 0.25 * linalg::operator_norm(&u) * linalg::operator_norm(&v);
        assert!((b - want).abs() <= 1e-12 * want);

        let (uu, vv, xx, gg) = (2.0, -0.5, 1.5, 3.0);
        let b = lipschitz_bound(
            &Matrix::from_rows(&[&[uu]]),
            &Matrix::from_rows(&[&[vv]]),
            &[xx],
            &Matrix::from_rows(&[&[gg]]),
            &Activation::Sigmoid,
            0.25,
        )
        .unwrap();
        let s = network::sigmoid(vv * xx);
        let sg = network::sigmoid(gg * vv * xx);
        let want = 0.25 * uu * vv.abs() * s * gg / sg;
        assert!((b - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn lipschitz_bound_dominates_difference_quotients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let act = Activation::Sigmoid;
        let u = gaussian(2, 4, &mut rng);
        let v = gaussian(4, 3, &mut rng);
        let x = gvec(3, &mut rng);
        let g = &Matrix::identity(4) + &gaussian(4, 4, &mut rng).scale(0.5);
        let (u2, v2) = apply_nonlinear_action(&u, &v, &x, &g, &act).unwrap();
        let bound = lipschitz_bound(&u, &v, &x, &g, &act, 0.25).unwrap();
        for _ in 0..1000 {
            let a = gvec(3, &mut rng);
            let b: Vec<f64> = a
                .iter()
                .map(|e| e + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let fa = two_layer_out(&u2, &v2, &act, &a);
            let fb = two_layer_out(&u2, &v2, &act, &b);
            let num = norm2(&fa.iter().zip(&fb).map(|(p, q)| p - q).collect::<Vec<_>>());
            let den = norm2(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
            assert!(num / den <= bound * (1.0 + 1e-9));
        }
    }
}
