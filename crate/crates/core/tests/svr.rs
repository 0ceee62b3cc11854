mod support;

use deepfidelity::rng::SplitMix64;
use deepfidelity::svr::*;
use deepfidelity::Error;
use proptest::prelude::*;
use support::{kkt_oracle, qp_oracle};

fn random_problem(rng: &mut SplitMix64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect()).collect();
    let ys = xs.iter().map(|x| x.iter().sum::<f64>().sin() * 0.5 + 0.1 * rng.normal()).collect();
    (xs, ys)
}

fn sin_fixture() -> (Vec<Vec<f64>>, Vec<f64>, SvrConfig) {
    let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![std::f64::consts::PI * i as f64 / 39.0]).collect();
    let ys = xs.iter().map(|x| x[0].sin()).collect();
    let cfg = SvrConfig { c: 10.0, epsilon: 0.01, sigma: Sigma::Fixed(0.5), ..SvrConfig::default() };
    (xs, ys, cfg)
}

fn min_eigenvalue(k: &[f64], n: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(n, n, k);
    m.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn kernel_examples() {
    let x = [0.3, -1.2, 4.0];
    assert_eq!(rbf_kernel(&x, &x, 0.7).unwrap(), 1.0);
    let k = rbf_kernel(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
    assert!((k - (-1.0f64).exp()).abs() < 1e-6);
    assert!((k - 0.367879).abs() < 1e-6);
    assert!(rbf_kernel(&[0.0], &[20.0], 1.0).unwrap() < 1e-12);
    assert!(matches!(rbf_kernel(&[0.0], &[1.0, 2.0], 1.0), Err(Error::Dimension(_))));
    assert!(matches!(rbf_kernel(&[0.0], &[1.0], 0.0), Err(Error::Domain(_))));
    assert!(matches!(rbf_kernel(&[0.0], &[1.0], -1.0), Err(Error::Domain(_))));
}

#[test]
fn gram_examples() {
    assert_eq!(gram_matrix(&[vec![1.0, 2.0]], 1.0).unwrap(), vec![1.0]);
    assert_eq!(gram_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]], 0.3).unwrap(), vec![1.0; 4]);
    assert!(gram_matrix(&[], 1.0).is_err());
    assert!(matches!(gram_matrix(&[vec![1.0], vec![1.0, 2.0]], 1.0), Err(Error::Dimension(_))));
    let mut rng = SplitMix64::new(1);
    let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let k = gram_matrix(&xs, 1.0).unwrap();
    assert!(min_eigenvalue(&k, 5) >= -1e-8);
}

#[test]
fn median_heuristic_values() {
    assert_eq!(median_heuristic(&[vec![0.0], vec![1.0], vec![3.0]]), 2.0);
    assert_eq!(median_heuristic(&[vec![0.0], vec![1.0], vec![3.0], vec![6.0]]), 3.0);
    assert_eq!(median_heuristic(&[vec![2.0], vec![2.0]]), 1.0);
}

#[test]
fn constant_targets_give_constant_model() {
    let mut rng = SplitMix64::new(2);
    let (xs, _) = random_problem(&mut rng, 12, 3);
    let ys = vec![0.7; 12];
    let m = svr_fit(&xs, &ys, &SvrConfig::default()).unwrap();
    assert!(m.support_vectors.is_empty());
    assert!((m.bias - 0.7).abs() < 1e-12);
    for x in &xs {
        assert!((svr_predict(&m, x).unwrap() - 0.7).abs() < 1e-12);
    }
    assert!((svr_predict(&m, &[9.0, -9.0, 0.0]).unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn ten_point_problem_matches_qp_oracle() {
    let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 3.0]).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (x[0] * 1.3).cos()).collect();
    let cfg = SvrConfig { tolerance: 1e-6, max_passes: 500, ..SvrConfig::default() };
    let m = svr_fit(&xs, &ys, &cfg).unwrap();
    let z: Vec<Vec<f64>> = xs.iter().map(|x| m.standardize(x).unwrap()).collect();
    let k = gram_matrix(&z, m.sigma).unwrap();
    let beta = m.training_coefs(&xs).unwrap();
    let smo = dual_objective(&k, &beta, &ys, cfg.epsilon);
    let (oracle, _) = qp_oracle(&k, &ys, cfg.c, cfg.epsilon, 40_000);
    assert!((smo - oracle).abs() < 1e-4, "smo {smo} oracle {oracle}");
}

#[test]
fn sin_fixture_fits_and_satisfies_kkt() {
    let (xs, ys, cfg) = sin_fixture();
    let m = svr_fit(&xs, &ys, &cfg).unwrap();
    let preds: Vec<f64> = xs.iter().map(|x| svr_predict(&m, x).unwrap()).collect();
    let rmse = (preds.iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / 40.0).sqrt();
    assert!(rmse <= 0.05, "rmse {rmse}");
    for (p, y) in preds.iter().zip(&ys) {
        assert!((p - y).abs() <= cfg.epsilon + 0.05);
    }
    let v = kkt_report(&m, &xs, &ys, &cfg).unwrap();
    assert!(v < cfg.tolerance, "violation {v}");
    let oracle = kkt_oracle(&m, &xs, &ys, cfg.c, cfg.epsilon);
    assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
    assert!(m.dual_coefs.iter().all(|b| b.abs() <= cfg.c + 1e-9));
    assert!(m.dual_coefs.iter().sum::<f64>().abs() <= 1e-6);
}

#[test]
fn inflated_coefficient_is_reported() {
    let (xs, ys, cfg) = sin_fixture();
    let mut m = svr_fit(&xs, &ys, &cfg).unwrap();
    m.dual_coefs[0] = 2.0 * cfg.c;
    assert!(kkt_report(&m, &xs, &ys, &cfg).unwrap() >= cfg.c);
}

#[test]
fn prediction_ignores_support_vector_order() {
    let (xs, ys, cfg) = sin_fixture();
    let m = svr_fit(&xs, &ys, &cfg).unwrap();
    let mut r = m.clone();
    r.support_vectors.reverse();
    r.dual_coefs.reverse();
    for x in xs.iter().step_by(7) {
        let (a, b) = (svr_predict(&m, x).unwrap(), svr_predict(&r, x).unwrap());
        assert!((a - b).abs() < 1e-12);
    }
    let empty = SvrModel { support_vectors: vec![], dual_coefs: vec![], ..m.clone() };
    assert_eq!(svr_predict(&empty, &[1.0]).unwrap(), m.bias);
    assert!(matches!(svr_predict(&m, &[1.0, 2.0]), Err(Error::Dimension(_))));
}

#[test]
fn fit_input_errors() {
    let cfg = SvrConfig::default();
    assert!(matches!(svr_fit(&[vec![1.0]], &[1.0], &cfg), Err(Error::Domain(_))));
    assert!(matches!(svr_fit(&[vec![1.0], vec![f64::NAN]], &[1.0, 2.0], &cfg), Err(Error::Domain(_))));
    assert!(matches!(svr_fit(&[vec![1.0], vec![2.0]], &[1.0, f64::INFINITY], &cfg), Err(Error::Domain(_))));
    assert!(matches!(svr_fit(&[vec![1.0], vec![2.0, 3.0]], &[1.0, 2.0], &cfg), Err(Error::Dimension(_))));
    let bad = SvrConfig { c: 0.0, ..cfg };
    assert!(svr_fit(&[vec![1.0], vec![2.0]], &[1.0, 2.0], &bad).is_err());
}

#[test]
fn fit_is_deterministic_and_file_roundtrips() {
    let mut rng = SplitMix64::new(3);
    let (xs, ys) = random_problem(&mut rng, 30, 4);
    let a = svr_fit(&xs, &ys, &SvrConfig::default()).unwrap();
    let b = svr_fit(&xs, &ys, &SvrConfig::default()).unwrap();
    assert_eq!(svr_to_bytes(&a), svr_to_bytes(&b));
    let bytes = svr_to_bytes(&a);
    assert_eq!(&bytes[..4], b"SVRM");
    assert_eq!(svr_from_bytes(&bytes).unwrap(), a);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.svrm");
    save_svr(&a, &p).unwrap();
    assert_eq!(load_svr(&p).unwrap(), a);

    let mut bad = bytes.clone();
    bad[0] = b'Q';
    assert!(matches!(svr_from_bytes(&bad), Err(Error::Format(_))));
    let mut flip = bytes.clone();
    flip[40] ^= 4;
    assert!(matches!(svr_from_bytes(&flip), Err(Error::Format(_))));
    assert!(matches!(svr_from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
    assert!(load_svr(dir.path().join("nope")).unwrap_err().is_io());
}

#[test]
fn smo_rejects_bad_gram() {
    assert!(matches!(smo_solve(&[1.0, 0.0], &[1.0, 2.0], &SvrConfig::default()), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_symmetry_and_range(x in prop::collection::vec(-5.0f64..5.0, 1..8), seed in any::<u64>(), sigma in 0.1f64..4.0) {
        let mut rng = SplitMix64::new(seed);
        let y: Vec<f64> = x.iter().map(|_| rng.uniform(-5.0, 5.0)).collect();
        let kxy = rbf_kernel(&x, &y, sigma).unwrap();
        prop_assert_eq!(kxy, rbf_kernel(&y, &x, sigma).unwrap());
        prop_assert_eq!(rbf_kernel(&x, &x, sigma).unwrap(), 1.0);
        let exponent = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * sigma * sigma);
        if exponent < 700.0 {
            prop_assert!(kxy > 0.0);
        }
        prop_assert!(kxy <= 1.0);
    }

    #[test]
    fn smo_matches_oracle(seed in any::<u64>(), n in 2usize..=20, d in 1usize..=4, c in 0.2f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let (xs, ys) = random_problem(&mut rng, n, d);
        // Objective agreement needs a tighter stopping gap than the 1e-3 default.
        let cfg = SvrConfig { c, tolerance: 1e-5, max_passes: 2000, ..SvrConfig::default() };
        let m = svr_fit(&xs, &ys, &cfg).unwrap();
        let z: Vec<Vec<f64>> = xs.iter().map(|x| m.standardize(x).unwrap()).collect();
        let k = gram_matrix(&z, m.sigma).unwrap();
        let beta = m.training_coefs(&xs).unwrap();
        let smo = dual_objective(&k, &beta, &ys, cfg.epsilon);
        let (oracle, _) = qp_oracle(&k, &ys, c, cfg.epsilon, 20_000);
        prop_assert!((smo - oracle).abs() < 1e-4, "smo {} oracle {}", smo, oracle);
        prop_assert!(kkt_report(&m, &xs, &ys, &cfg).unwrap() < 1e-3);
        prop_assert!(beta.iter().all(|b| b.abs() <= c + 1e-9));
        prop_assert!(beta.iter().sum::<f64>().abs() <= 1e-6);
        for (i, x) in xs.iter().enumerate() {
            if beta[i] == 0.0 {
                let r = ys[i] - svr_predict(&m, x).unwrap();
                prop_assert!(r.abs() <= cfg.epsilon + cfg.tolerance);
            }
        }
    }

    #[test]
    fn default_tolerance_satisfies_kkt(seed in any::<u64>(), n in 2usize..=40, d in 1usize..=4) {
        let mut rng = SplitMix64::new(seed);
        let (xs, ys) = random_problem(&mut rng, n, d);
        let cfg = SvrConfig::default();
        let m = svr_fit(&xs, &ys, &cfg).unwrap();
        prop_assert!(kkt_report(&m, &xs, &ys, &cfg).unwrap() < cfg.tolerance);
    }
}
