use super::*;
use crate::fisher::{exact_fim_block, LayerStats};
use crate::linalg::{
    kron, mat, mat_square, svd_dense, sym_eig, symmetrize, trace, vec, zigzag, Vector,
};
use crate::mlp::{Activation, LossKind};
use rand::Rng;

fn small_model(seed: u64) -> (Mlp, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mlp::init(
        vec![5, 8, 4, 5],
        vec![Activation::Relu, Activation::Relu, Activation::Sigmoid],
        LossKind::BinaryCrossEntropy,
        &mut rng,
    )
    .unwrap();
    let x = Matrix::from_fn(32, 5, |_, _| rng.random::<f64>());
    let y = x.clone();
    (model, x, y)
}

fn natural_config(method: OptimizerKind) -> OptimizerConfig {
    OptimizerConfig {
        method,
        learning_rate: 0.5,
        damping: 1e-2,
        clip: 1e-2,
        refresh_period: 1,
        inverse_period: 1,
        batch_size: 32,
        seed: 5,
        ..OptimizerConfig::default()
    }
}

#[test]
fn sgd_without_momentum_is_plain_descent() {
    let mut p = vec![Matrix::from_element(2, 2, 1.0)];
    let g = GradientSet(vec![Matrix::from_element(2, 2, 0.5)]);
    let mut v = GradientSet::zeros_like(&p);
    sgd_step(&mut p, &g, &mut v, 0.1, 0.0);
    assert_eq!(p[0], Matrix::from_element(2, 2, 0.95));
    sgd_step(&mut p, &g, &mut v, 0.0, 0.0);
    assert_eq!(p[0], Matrix::from_element(2, 2, 0.95));
}

#[test]
fn sgd_momentum_matches_scalar_recurrence() {
    let (lr, beta, g) = (0.1, 0.9, 2.0);
    let mut p = vec![Matrix::from_element(1, 1, 0.0)];
    let grads = GradientSet(vec![Matrix::from_element(1, 1, g)]);
    let mut v = GradientSet::zeros_like(&p);
    let (mut theta, mut vel) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        sgd_step(&mut p, &grads, &mut v, lr, beta);
        vel = beta * vel + g;
        theta -= lr * vel;
        assert!((p[0][(0, 0)] - theta).abs() <= 1e-15);
    }
    let mut p = vec![Matrix::from_element(1, 1, 0.0)];
    let mut v = GradientSet::zeros_like(&p);
    sgd_step(&mut p, &grads, &mut v, lr, beta);
    sgd_step(&mut p, &grads, &mut v, lr, beta);
    assert!((p[0][(0, 0)] + lr * g * (1.0 + (1.0 + beta))).abs() <= 1e-15);
}

#[test]
fn adam_first_step_matches_scalar_oracle() {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let g = Matrix::from_row_slice(1, 3, &[0.3, -2.0, 1e-3]);
    let mut p = vec![Matrix::zeros(1, 3)];
    let mut state = AdamState::new(&p);
    adam_step(
        &mut p,
        &GradientSet(vec![g.clone()]),
        &mut state,
        lr,
        b1,
        b2,
        eps,
    );
    for i in 0..3 {
        let m = (1.0 - b1) * g[i] / (1.0 - b1);
        let v = (1.0 - b2) * g[i] * g[i] / (1.0 - b2);
        let want = -lr * m / (v.sqrt() + eps);
        assert!((p[0][i] - want).abs() <= 1e-15, "{i}");
    }
}

#[test]
fn adam_zero_gradient_and_scale_invariance() {
    let mut p = vec![Matrix::from_element(2, 1, 3.0)];
    let mut state = AdamState::new(&p);
    let zero = GradientSet::zeros_like(&p);
    for _ in 0..3 {
        adam_step(&mut p, &zero, &mut state, 0.1, 0.9, 0.999, 1e-8);
    }
    assert_eq!(p[0], Matrix::from_element(2, 1, 3.0));

    let g = Matrix::from_row_slice(2, 1, &[0.5, -0.25]);
    let step = |scale: f64| {
        let mut p = vec![Matrix::zeros(2, 1)];
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &GradientSet(vec![&g * scale]),
            &mut s,
            0.1,
            0.9,
            0.999,
            1e-8,
        );
        p[0].clone()
    };
    let (a, b) = (step(1.0), step(10.0));
    assert!((&a - &b).norm() <= 1e-6 * a.norm());
}

#[test]
fn config_validation() {
    assert!(OptimizerConfig::default().validate().is_ok());
    let bad = [
        OptimizerConfig {
            refresh_period: 0,
            ..Default::default()
        },
        OptimizerConfig {
            damping: 0.0,
            ..Default::default()
        },
        OptimizerConfig {
            clip: -1.0,
            ..Default::default()
        },
        OptimizerConfig {
            batch_size: 0,
            ..Default::default()
        },
        OptimizerConfig {
            ema_decay: 1.0,
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let sgd = OptimizerConfig {
        method: OptimizerKind::Sgd,
        damping: 0.0,
        ..Default::default()
    };
    assert!(sgd.validate().is_ok());
}

#[test]
fn optimizer_names_round_trip() {
    for k in OptimizerKind::ALL {
        assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
    }
    for m in Method::ALL {
        assert_eq!(OptimizerKind::from(m).method(), Some(m));
    }
}

/// Eigenvalues replaced by their absolute values.
fn abs_eig(m: &Matrix) -> Matrix {
    let e = sym_eig(m).unwrap();
    symmetrize(&e.map(f64::abs))
}

/// Rank-1 term `σ mat(u) ⊗ mat(v)` from a dense SVD column, as a symmetric pair.
fn dense_term(z: &Matrix, k: usize) -> (Matrix, Matrix) {
    let svd = svd_dense(z).unwrap();
    let s = svd.sigma[k].sqrt();
    let u: Vector = svd.u.column(k).into();
    let v: Vector = svd.v.column(k).into();
    let (mut l, mut r) = (
        symmetrize(&(mat_square(&u).unwrap() * s)),
        symmetrize(&(mat_square(&v).unwrap() * s)),
    );
    if trace(&l) < 0.0 {
        l = -l;
        r = -r;
    }
    (l, r)
}

/// Dense damped approximate Fisher block, built from a dense SVD of the
/// exact rearranged block and the damping rule written out by hand.
fn dense_damped(method: Method, stats: &LayerStats, lambda: f64) -> Matrix {
    let m = stats.batch_size() as f64;
    let (d, dp) = (stats.activation_dim(), stats.derivative_dim());
    let f = exact_fim_block(stats).unwrap();
    let z = zigzag(&f, d, dp).unwrap();
    let kfac = (
        stats.abar().transpose() * stats.abar() / m,
        stats.g().transpose() * stats.g() / m,
    );
    let (dom_l, dom_r) = match method {
        Method::Kfac | Method::KfacCorrected => kfac.clone(),
        _ => {
            let (l, r) = dense_term(&z, 0);
            (abs_eig(&l), abs_eig(&r))
        }
    };
    let correction = match method {
        Method::Deflation | Method::Lanczos => Some(dense_term(&z, 1)),
        Method::KfacCorrected => {
            let rest = zigzag(&(&f - kron(&kfac.0, &kfac.1)), d, dp).unwrap();
            Some(dense_term(&rest, 0))
        }
        _ => None,
    };
    let pi = ((trace(&dom_l) / d as f64) / (trace(&dom_r) / dp as f64)).sqrt();
    let s = lambda.sqrt();
    let mut out = kron(
        &(dom_l + Matrix::identity(d, d) * (pi * s)),
        &(dom_r + Matrix::identity(dp, dp) * (s / pi)),
    );
    if let Some((p, q)) = correction {
        out += kron(&p, &q);
    }
    out
}

#[test]
fn natural_direction_matches_dense_damped_inverse() {
    for method in Method::ALL {
        let (mut model, x, y) = small_model(70);
        let mut cfg = natural_config(method.into());
        // A huge budget keeps ν = 1 so the raw preconditioned gradient is compared.
        cfg.clip = 1e12;
        cfg.svd.eps = 1e-12;
        cfg.svd.max_iters = 20_000;
        cfg.svd.max_restarts = 5_000;
        let mut opt = Optimizer::new(cfg.clone(), &model).unwrap();
        let report = opt.step(&mut model, &x, &y).unwrap();
        assert_eq!(report.nu, 1.0);
        let stats = report.fisher_stats.as_ref().unwrap();
        for (l, (g, dir)) in report
            .gradient
            .layers()
            .iter()
            .zip(report.direction.layers())
            .enumerate()
        {
            let f_hat = dense_damped(method, &stats.layers()[l], cfg.damping);
            let want = f_hat.lu().solve(&vec(g)).unwrap();
            let want = mat(&want, g.nrows(), g.ncols()).unwrap();
            let err = (dir - &want).norm() / want.norm();
            assert!(
                err <= 1e-6,
                "{} layer {l}: relative error {err}",
                method.name()
            );
        }
    }
}

#[test]
fn clip_factor_uses_preconditioned_inner_product() {
    let (mut model, x, y) = small_model(71);
    let mut cfg = natural_config(OptimizerKind::Kfac);
    cfg.clip = 1e-6;
    let mut opt = Optimizer::new(cfg.clone(), &model).unwrap();
    let report = opt.step(&mut model, &x, &y).unwrap();
    assert!(report.nu < 1.0);
    let budget: f64 = report
        .direction
        .layers()
        .iter()
        .zip(report.gradient.layers())
        .map(|(d, g)| d.dot(g).abs())
        .sum::<f64>()
        * report.nu;
    assert!((budget - cfg.clip).abs() <= 1e-9 * cfg.clip);
}

#[test]
fn refresh_and_rebuild_follow_periods() {
    let (mut model, x, y) = small_model(72);
    let mut cfg = natural_config(OptimizerKind::Kpsvd);
    cfg.refresh_period = 3;
    cfg.inverse_period = 2;
    let mut opt = Optimizer::new(cfg, &model).unwrap();
    let mut seen = Vec::new();
    for _ in 0..7 {
        let r = opt.step(&mut model, &x, &y).unwrap();
        seen.push((r.refreshed, r.rebuilt));
        assert_eq!(r.diagnostics.len(), if r.refreshed { 3 } else { 0 });
    }
    let refreshed: Vec<bool> = seen.iter().map(|s| s.0).collect();
    let rebuilt: Vec<bool> = seen.iter().map(|s| s.1).collect();
    assert_eq!(refreshed, [true, false, false, true, false, false, true]);
    assert_eq!(rebuilt, [true, false, true, false, true, false, true]);
    assert_eq!(opt.layers()[0].approx.refreshes(), 3);
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Deflation,
        OptimizerKind::Lanczos,
    ] {
        let run = || {
            let (mut model, x, y) = small_model(73);
            let mut opt = Optimizer::new(natural_config(kind), &model).unwrap();
            (0..10)
                .map(|_| opt.step(&mut model, &x, &y).unwrap().loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run(), "{}", kind.name());
    }
}

#[test]
fn every_method_reduces_training_loss() {
    for kind in OptimizerKind::ALL {
        let (mut model, x, y) = small_model(74);
        let mut cfg = natural_config(kind);
        if kind.method().is_none() {
            cfg.learning_rate = 0.05;
        }
        let mut opt = Optimizer::new(cfg, &model).unwrap();
        let first = opt.step(&mut model, &x, &y).unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = opt.step(&mut model, &x, &y).unwrap().loss;
        }
        assert!(last < first, "{}: {first} -> {last}", kind.name());
    }
}

#[test]
fn non_finite_loss_aborts() {
    let (mut model, x, y) = small_model(75);
    model.weights_mut()[0][(0, 1)] = f64::NAN;
    let mut opt = Optimizer::new(natural_config(OptimizerKind::Kfac), &model).unwrap();
    assert!(matches!(
        opt.step(&mut model, &x, &y),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn probe_errors_of_exact_and_scaled_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(76);
    let x = Matrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
    let f = &x * x.transpose();
    assert_eq!(fim_errors(&f, &f).unwrap(), (0.0, 0.0));
    let (e1, e2) = fim_errors(&f, &(&f * 2.0)).unwrap();
    assert!((e1 - 1.0).abs() <= 1e-12 && (e2 - 1.0).abs() <= 1e-12);
    assert!(fim_errors(&Matrix::zeros(2, 2), &f.view((0, 0), (2, 2)).into_owned()).is_err());
}

#[test]
fn probe_orders_methods() {
    let (model, x, _) = small_model(77);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let out = fim_error_probe(
        &model,
        &x,
        1,
        &Method::ALL,
        &SvdOptions::default(),
        &mut rng,
    )
    .unwrap();
    let e = |m: Method| out.iter().find(|r| r.method == m).unwrap().error1;
    assert!(e(Method::Kpsvd) <= e(Method::Kfac) + 1e-9);
    assert!(e(Method::Deflation) <= e(Method::Kpsvd) + 1e-9);
    assert!(e(Method::KfacCorrected) <= e(Method::Kfac) + 1e-9);
    assert!(fim_error_probe(
        &model,
        &x,
        3,
        &Method::ALL,
        &SvdOptions::default(),
        &mut rng
    )
    .is_err());
}
