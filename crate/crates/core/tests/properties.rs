use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use noetherkit::conserved;
use noetherkit::experiments::spearman;
use noetherkit::flow;
use noetherkit::linalg::{self, Matrix};
use noetherkit::network::{self, Activation, Batch, LossConvention, MlpParams};
use noetherkit::nonlinear;
use noetherkit::symmetry::{self, GroupKind, PiSpec};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn close(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).max_abs() / (1.0 + a.max_abs().max(b.max_abs()))
}

fn params_close(a: &MlpParams, b: &MlpParams) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (gaussian(m, k, &mut rng), gaussian(k, n, &mut rng), gaussian(n, p, &mut rng));
        prop_assert!(close(&(&(&a * &b) * &c), &(&a * &(&b * &c))) < 1e-12);
        prop_assert!(close(&(&a * &b).transpose(), &(&b.transpose() * &a.transpose())) < 1e-14);
    }

    #[test]
    fn eigh_reconstructs(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(n, n, &mut rng).symmetrize();
        let e = linalg::eigh_jacobi(&a).unwrap();
        let vals = e.values.clone().into_inner();
        let rebuilt = &(&e.vectors * &Matrix::diag(&vals)) * &e.vectors.transpose();
        prop_assert!(close(&rebuilt, &a) < 1e-11);
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let q = &e.vectors;
        prop_assert!(close(&(&q.transpose() * q), &Matrix::identity(n)) < 1e-11);
    }

    #[test]
    fn svd_reconstructs(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(m, n, &mut rng);
        let s = linalg::svd_jacobi(&a).unwrap();
        prop_assert!(close(&s.reconstruct(), &a) < 1e-11);
        let sv = s.s.clone().into_inner();
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let ev = linalg::eigh_jacobi(&(&a.transpose() * &a)).unwrap().values.into_inner();
        let mut top: Vec<f64> = ev.iter().rev().take(sv.len()).copied().collect();
        top.iter_mut().for_each(|x| *x = x.max(0.0));
        for (x, y) in sv.iter().zip(&top) {
            prop_assert!((x * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn action_is_a_group_action(seed in any::<u64>(), n in 1usize..4, h in 1usize..5, m in 1usize..4, kind_ix in 0usize..3) {
        let kind = [GroupKind::GeneralLinear, GroupKind::PositiveDiagonal, GroupKind::Orthogonal][kind_ix];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::two_layer(gaussian(m, h, &mut rng), gaussian(h, n, &mut rng)).unwrap();
        let pi = PiSpec::identity(1);
        let g1 = symmetry::sample_hidden_element(kind, &[h], 0.5, &mut rng).unwrap();
        let g2 = symmetry::sample_hidden_element(kind, &[h], 0.5, &mut rng).unwrap();
        let lhs = symmetry::apply_linear_action(&p, &g1.compose(&g2).unwrap(), &pi).unwrap();
        let rhs = symmetry::apply_linear_action(&symmetry::apply_linear_action(&p, &g2, &pi).unwrap(), &g1, &pi).unwrap();
        prop_assert!(params_close(&lhs, &rhs) < 1e-10);
        let back = symmetry::apply_linear_action(&symmetry::apply_linear_action(&p, &g1, &pi).unwrap(), &g1.inverse().unwrap(), &pi).unwrap();
        prop_assert!(params_close(&back, &p) < 1e-10);
    }

    #[test]
    fn linear_loss_invariant_under_gl(seed in any::<u64>(), n in 1usize..5, h in 1usize..5, m in 1usize..5, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::two_layer(gaussian(m, h, &mut rng), gaussian(h, n, &mut rng)).unwrap();
        let acts = [Activation::Identity, Activation::Identity];
        let b = Batch::new(gaussian(n, k, &mut rng), gaussian(m, k, &mut rng)).unwrap();
        let g = symmetry::sample_hidden_element(GroupKind::GeneralLinear, &[h], 0.5, &mut rng).unwrap();
        let q = symmetry::apply_linear_action(&p, &g, &PiSpec::identity(1)).unwrap();
        let l0 = network::loss_mse(&p, &acts, &b, LossConvention::Mean).unwrap();
        let l1 = network::loss_mse(&q, &acts, &b, LossConvention::Mean).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0));
    }

    #[test]
    fn r_matrix_identities(seed in any::<u64>(), h in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
        let r = nonlinear::r_matrix(&z).unwrap();
        let n2: f64 = z.iter().map(|x| x * x).sum();
        for (a, b) in r.matrix.column(0).iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + n2.sqrt()));
        }
        let rtr = &r.matrix.transpose() * &r.matrix;
        prop_assert!((&rtr - &Matrix::identity(h).scale(n2)).max_abs() <= 1e-11 * n2.max(1.0));
    }

    #[test]
    fn cocycle_holds(seed in any::<u64>(), h in 2usize..6, tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Sigmoid };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
        let g1 = symmetry::sample_group_element(GroupKind::GeneralLinear, h, 0.4, &mut rng).unwrap();
        let g2 = symmetry::sample_group_element(GroupKind::GeneralLinear, h, 0.4, &mut rng).unwrap();
        let whole = nonlinear::equivariance_map_c(&(&g2 * &g1), &z, &act);
        let first = nonlinear::equivariance_map_c(&g1, &z, &act);
        let g1z = g1.mat_vec(&z).unwrap();
        let second = nonlinear::equivariance_map_c(&g2, &g1z, &act);
        if let (Ok(w), Ok(f), Ok(s)) = (whole, first, second) {
            prop_assert!(close(&w, &(&s * &f)) < 1e-8);
        }
    }

    #[test]
    fn delta_q_bound_dominates(seed in any::<u64>(), m in 1usize..5, h in 1usize..5, n in 1usize..5, eta in 1e-5f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gu, gv) = (gaussian(m, h, &mut rng), gaussian(h, n, &mut rng));
        let (exact, bound) = flow::delta_q_identity(&gu, &gv, eta);
        prop_assert!(exact.abs() <= bound);
        prop_assert!(bound >= 0.0);
    }

    #[test]
    fn imbalance_is_symmetric(seed in any::<u64>(), m in 1usize..5, h in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = conserved::q_imbalance_matrix(&gaussian(m, h, &mut rng), &gaussian(h, n, &mut rng)).unwrap();
        prop_assert!(q.asymmetry() <= 1e-12);
    }

    #[test]
    fn spearman_bounded(xs in prop::collection::vec(-1e3f64..1e3, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = spearman(&xs, &ys);
        prop_assert!(r.is_nan() || (-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let self_r = spearman(&xs, &xs);
        prop_assert!(self_r.is_nan() || (self_r - 1.0).abs() < 1e-12);
    }
}
