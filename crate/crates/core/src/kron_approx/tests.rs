use super::*;
use crate::fisher::test_support::random_stats;
use crate::fisher::{exact_fim_block, LayerStats};
use crate::linalg::{asymmetry, spectrum, svd_dense, zigzag};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts() -> SvdOptions {
    SvdOptions {
        eps: 1e-10,
        max_iters: 5000,
        krylov_dim: 6,
        max_restarts: 2000,
    }
}

fn residual(f: &Matrix, approx: &Matrix) -> f64 {
    (f - approx).norm()
}

fn dense_z(stats: &LayerStats) -> (Matrix, Matrix) {
    let f = exact_fim_block(stats).unwrap();
    let z = zigzag(&f, stats.activation_dim(), stats.derivative_dim()).unwrap();
    (f, z)
}

fn random_sym(n: usize, rng: &mut impl Rng) -> Matrix {
    symmetrize(&Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
}

#[test]
fn kfac_single_sample_is_exact() {
    let stats = random_stats(1, 3, 2, 40);
    let f = exact_fim_block(&stats).unwrap();
    assert!(residual(&f, &kfac_factors(&stats).to_dense()) <= 1e-14 * f.norm());
}

#[test]
fn kfac_factors_are_symmetric_psd() {
    let stats = random_stats(30, 4, 3, 41);
    let pair = kfac_factors(&stats);
    for m in [&pair.left, &pair.right] {
        assert_eq!(asymmetry(m), 0.0);
        let s = spectrum(m).unwrap();
        assert!(s[s.len() - 1] >= -1e-12 * s[0]);
    }
}

#[test]
fn kfac_is_accurate_under_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m = 100_000;
    let abar = Matrix::from_fn(m, 3, |_, c| {
        if c == 0 {
            1.0
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let g = Matrix::from_fn(m, 2, |_, _| rng.random_range(-1.0..1.0));
    let stats = LayerStats::new(abar, g).unwrap();
    let f = exact_fim_block(&stats).unwrap();
    let err = residual(&f, &kfac_factors(&stats).to_dense()) / f.norm();
    assert!(err <= 0.05, "relative error {err}");
}

#[test]
fn kpsvd_matches_dense_best_rank_one() {
    for seed in 0..10 {
        let stats = random_stats(12, 3, 4, 100 + seed);
        let (f, z) = dense_z(&stats);
        let dense = svd_dense(&z).unwrap();
        let best = residual(&z, &dense.truncate(1));
        let out = kpsvd_factors(&stats, &opts(), None).unwrap();
        let got = residual(&f, &out.pair.to_dense());
        assert!(
            (got - best).abs() <= 1e-8 * best,
            "seed {seed}: {got} vs {best}"
        );
        assert!(got <= residual(&f, &kfac_factors(&stats).to_dense()) + 1e-12);
    }
}

#[test]
fn kpsvd_single_sample_has_zero_residual() {
    let stats = random_stats(1, 3, 3, 43);
    let f = exact_fim_block(&stats).unwrap();
    let out = kpsvd_factors(&stats, &SvdOptions::default(), None).unwrap();
    assert!(residual(&f, &out.pair.to_dense()) <= 1e-8 * f.norm());
}

#[test]
fn kpsvd_pair_satisfies_pythagoras_and_symmetry() {
    let stats = random_stats(25, 4, 3, 44);
    let (f, z) = dense_z(&stats);
    let out = kpsvd_factors(&stats, &opts(), None).unwrap();
    let sigma = out.svd.triplet.sigma;
    let lhs = residual(&f, &out.pair.to_dense()).powi(2) + sigma * sigma;
    assert!((lhs - z.norm_squared()).abs() <= 1e-8 * z.norm_squared());
    let raw = pair_from_triplet(&out.svd.triplet).unwrap();
    assert!(asymmetry(&raw.left) <= 1e-8);
    assert!(asymmetry(&raw.right) <= 1e-8);
}

#[test]
fn psd_select_cases() {
    let m = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, -3.0]));
    let out = psd_select(&m).unwrap();
    assert!((out - Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]))).norm() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let x = Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let psd = &x * x.transpose();
    assert!((psd_select(&psd).unwrap() - &psd).norm() <= 1e-10 * psd.norm().max(1.0));

    let sym = random_sym(5, &mut rng);
    let mut want: Vec<f64> = spectrum(&sym).unwrap().iter().map(|l| l.abs()).collect();
    want.sort_by(|a, b| b.total_cmp(a));
    let got = spectrum(&psd_select(&sym).unwrap()).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-10);
    }
}

#[test]
fn residual_op_matches_dense_and_annihilates() {
    let stats = random_stats(10, 3, 4, 46);
    let (f, _) = dense_z(&stats);
    let base = FisherOp::new(&stats);
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let pair = KronPair::new(random_sym(4, &mut rng), random_sym(4, &mut rng));
    let dense = zigzag(&(&f - pair.to_dense()), 4, 4).unwrap();
    let op = residual_op(&base, &pair);
    let v = Vector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
    assert!((op.matvec(&v) - &dense * &v).norm() <= 1e-10);
    assert!((op.rmatvec(&v) - dense.transpose() * &v).norm() <= 1e-10);

    let unchanged = residual_op(&base, &KronPair::zeros(4, 4));
    assert_eq!(unchanged.matvec(&v), base.matvec(&v));

    // Removing the exact dominant term leaves nothing along it.
    let svd = power_svd(&base, 1e-12, 5000, None).unwrap();
    let exact = pair_from_triplet(&svd.triplet).unwrap();
    let deflated = residual_op(&base, &exact);
    let along = deflated.matvec(&svd.triplet.v).norm();
    assert!(along <= 1e-8 * svd.triplet.sigma);
}

#[test]
fn deflation_improves_on_kpsvd() {
    for seed in 0..10 {
        let stats = random_stats(15, 3, 3, 200 + seed);
        let f = exact_fim_block(&stats).unwrap();
        let kp = kpsvd_factors(&stats, &SvdOptions::default(), None).unwrap();
        let defl =
            deflation_factors(&stats, &SvdOptions::default(), &WarmStart::default()).unwrap();
        assert!(
            residual(&f, &defl.factors().to_dense())
                <= residual(&f, &kp.pair.to_dense()) + 1e-9 * f.norm()
        );
    }
}

#[test]
fn deflation_recovers_exact_kronecker_rank_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    // vec(A1) ⟂ vec(A2) and vec(B1) ⟂ vec(B2): identity against traceless.
    let a1 = Matrix::identity(3, 3);
    let mut a2 = random_sym(3, &mut rng);
    a2 -= Matrix::identity(3, 3) * (crate::linalg::trace(&a2) / 3.0);
    let b1 = 2.0 * Matrix::identity(4, 4);
    let mut b2 = random_sym(4, &mut rng);
    b2 -= Matrix::identity(4, 4) * (crate::linalg::trace(&b2) / 4.0);
    let f = kron(&a1, &b1) + kron(&a2, &b2) * 0.3;
    let op = DenseOp(zigzag(&f, 3, 4).unwrap());
    let out = deflation_from_op(&op, &SvdOptions::default(), None, None).unwrap();
    assert!(residual(&f, &out.factors().to_dense()) <= 1e-6 * f.norm());
}

/// Stats from two clusters with different activation/derivative statistics,
/// giving `Z(F)` two dominant singular values well above the rest.
fn two_cluster_stats(m: usize, d_in: usize, d_out: usize, seed: u64) -> LayerStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir_a: Vec<Vector> = (0..2)
        .map(|_| Vector::from_fn(d_in, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let dir_g: Vec<Vector> = (0..2)
        .map(|_| Vector::from_fn(d_out, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mut abar = Matrix::zeros(m, d_in + 1);
    let mut g = Matrix::zeros(m, d_out);
    for t in 0..m {
        let c = t % 2;
        let sa: f64 = rng.random_range(0.5..1.5);
        let sg: f64 = rng.random_range(0.5..1.5) * if c == 0 { 1.0 } else { 0.7 };
        abar[(t, 0)] = 1.0;
        for j in 0..d_in {
            abar[(t, j + 1)] = sa * dir_a[c][j] + 0.1 * rng.random_range(-1.0..1.0);
        }
        for j in 0..d_out {
            g[(t, j)] = sg * dir_g[c][j] + 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    LayerStats::new(abar, g).unwrap()
}

#[test]
fn rank_two_methods_match_dense_truncated_svd() {
    let mut checked = 0;
    for seed in 0..20 {
        let stats = two_cluster_stats(40, 3, 4, 300 + seed);
        let (f, z) = dense_z(&stats);
        let dense = svd_dense(&z).unwrap();
        let s = &dense.sigma;
        if s[1] - s[2] <= 0.01 * s[0] {
            continue;
        }
        checked += 1;
        let best = residual(&z, &dense.truncate(2));
        let defl = deflation_factors(&stats, &opts(), &WarmStart::default()).unwrap();
        let lan = lanczos_factors(&stats, &opts(), &WarmStart::default()).unwrap();
        for (name, out) in [("deflation", defl), ("lanczos", lan)] {
            assert!(out.converged, "{name} seed {seed}");
            let got = residual(&f, &out.factors().to_dense());
            assert!(
                (got - best).abs() <= 1e-6 * best,
                "{name} seed {seed}: {got} vs {best}"
            );
            assert!((out.sigma1 - s[0]).abs() <= 1e-6 * s[0]);
            assert!((out.sigma2 - s[1]).abs() <= 1e-6 * s[0]);
        }
    }
    assert!(checked >= 10, "only {checked} gap-conditioned instances");
}

#[test]
fn lanczos_flags_rank_one_blocks() {
    let stats = random_stats(1, 3, 3, 49);
    let out = lanczos_factors(&stats, &SvdOptions::default(), &WarmStart::default()).unwrap();
    assert!(out.correction.is_none());
}

#[test]
fn kfac_corrected_improves_on_kfac_and_vanishes_when_iad_holds() {
    let stats = random_stats(20, 3, 3, 50);
    let f = exact_fim_block(&stats).unwrap();
    let kfac = kfac_factors(&stats);
    let corrected =
        kfac_corrected_factors(&stats, &SvdOptions::default(), &WarmStart::default()).unwrap();
    assert!(residual(&f, &corrected.factors().to_dense()) <= residual(&f, &kfac.to_dense()));
    assert_eq!(corrected.dominant, kfac);

    let single = random_stats(1, 3, 3, 51);
    let out =
        kfac_corrected_factors(&single, &SvdOptions::default(), &WarmStart::default()).unwrap();
    assert!(out.sigma2 <= 1e-10 * exact_fim_block(&single).unwrap().norm());
}

#[test]
fn kfac_corrected_is_deflation_with_kfac_dominant() {
    let stats = random_stats(20, 2, 3, 52);
    let a = kfac_corrected_factors(&stats, &SvdOptions::default(), &WarmStart::default()).unwrap();
    let b = corrected_from_op(
        &FisherOp::new(&stats),
        &kfac_factors(&stats),
        &SvdOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(a.factors(), b.factors());
}

#[test]
fn algorithms_never_materialize_the_operator() {
    let stats = random_stats(20, 4, 3, 53);
    let op = CountingOp::new(FisherOp::new(&stats));
    let o = SvdOptions::default();
    kpsvd_from_op(&op, &o, None).unwrap();
    deflation_from_op(&op, &o, None, None).unwrap();
    lanczos_from_op(&op, &o, None).unwrap();
    corrected_from_op(&op, &kfac_factors(&stats), &o, None).unwrap();
    assert_eq!(op.dense_materializations(), 0);
    assert!(op.matvecs() > 0 && op.rmatvecs() > 0);
    let _ = op.to_dense();
    assert_eq!(op.dense_materializations(), 1);
}

#[test]
fn warm_start_reduces_iterations() {
    let stats = random_stats(40, 4, 4, 54);
    let mut warm = WarmStart::default();
    let cold = factorize(Method::Deflation, &stats, &SvdOptions::default(), &mut warm).unwrap();
    let again = factorize(Method::Deflation, &stats, &SvdOptions::default(), &mut warm).unwrap();
    assert!(again.diagnostics.iterations < cold.diagnostics.iterations);
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("kfac-corrected".parse::<Method>().is_ok());
    assert!("newton".parse::<Method>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn error_ordering_chain(seed in any::<u64>(), m in 2usize..30) {
        let stats = random_stats(m, 3, 3, seed);
        let f = exact_fim_block(&stats).unwrap();
        let o = SvdOptions::default();
        let err = |method| {
            let fac = factorize(method, &stats, &o, &mut WarmStart::default()).unwrap();
            residual(&f, &fac.factors.to_dense())
        };
        let slack = 1e-9 * f.norm();
        let (kfac, kpsvd, defl, corr) = (err(Method::Kfac), err(Method::Kpsvd), err(Method::Deflation), err(Method::KfacCorrected));
        prop_assert!(kpsvd <= kfac + slack);
        prop_assert!(defl <= kpsvd + slack);
        prop_assert!(corr <= kfac + slack);
    }

    #[test]
    fn kpsvd_factors_are_symmetric_psd(seed in any::<u64>()) {
        let stats = random_stats(10, 3, 2, seed);
        let out = kpsvd_factors(&stats, &SvdOptions::default(), None).unwrap();
        let raw = pair_from_triplet(&out.svd.triplet).unwrap();
        prop_assert!(asymmetry(&raw.left) <= 1e-8 && asymmetry(&raw.right) <= 1e-8);
        for m in [&out.pair.left, &out.pair.right] {
            let s = spectrum(m).unwrap();
            let tr = crate::linalg::trace(m);
            prop_assert!(s[s.len() - 1] >= -1e-8 * tr / m.nrows() as f64);
        }
    }
}
