use rand::seq::SliceRandom;

use super::gp::{fit_gp, FitOptions};
use super::SurrogateError;
use crate::linalg::Matrix;
use crate::streams::derive_stream;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvPolicy {
    /// Leave-one-out below 10 points, 10-fold otherwise.
    Auto,
    Loo,
    KFold(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvResult<S> {
    pub gp_mse: S,
    /// MSE of predicting the training-fold mean, on the same folds.
    pub mean_baseline_mse: S,
    pub folds: usize,
}

/// Held-out index sets. K-fold assignment is a seeded shuffle split into
/// folds whose sizes differ by at most one.
pub fn cv_folds(n: usize, policy: CvPolicy, seed: u64) -> Vec<Vec<usize>> {
    let k = match policy {
        CvPolicy::Loo => n,
        CvPolicy::Auto if n < 10 => n,
        CvPolicy::Auto => 10,
        CvPolicy::KFold(k) => k.clamp(2, n.max(2)).min(n),
    };
    if k == n {
        return (0..n).map(|i| vec![i]).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_stream(seed, "cv_folds", n as u64, k as u64));
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Cross-validated MSE of the GP posterior mean (hyperparameters refit in
/// every fold) alongside the constant-mean predictor on identical folds.
pub fn gp_cv_mse<S: Scalar>(
    z: &Matrix<S>,
    y: &[S],
    policy: CvPolicy,
    options: &FitOptions,
) -> Result<CvResult<S>, SurrogateError> {
    let n = z.nrows();
    if n != y.len() {
        return Err(SurrogateError::DimensionMismatch { expected: n, found: y.len() });
    }
    if n < 3 {
        return Err(SurrogateError::TooFewPoints(n));
    }
    let folds = cv_folds(n, policy, options.seed);
    let mut gp_sse = S::zero();
    let mut base_sse = S::zero();
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
        let zt = select_rows(z, &train);
        let yt: Vec<S> = train.iter().map(|&i| y[i]).collect();
        let zh = select_rows(z, test);
        let fold_opts = FitOptions {
            seed: options.seed ^ (f as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..options.clone()
        };
        let model = fit_gp(&zt, &yt, &fold_opts)?;
        let pred = model.predict_mean(&zh)?;
        let ybar = yt.iter().copied().sum::<S>() / S::from_usize_lossy(yt.len());
        for (k, &i) in test.iter().enumerate() {
            gp_sse += (pred[k] - y[i]) * (pred[k] - y[i]);
            base_sse += (ybar - y[i]) * (ybar - y[i]);
        }
    }
    let nn = S::from_usize_lossy(n);
    Ok(CvResult {
        gp_mse: gp_sse / nn,
        mean_baseline_mse: base_sse / nn,
        folds: folds.len(),
    })
}

fn select_rows<S: Scalar>(z: &Matrix<S>, rows: &[usize]) -> Matrix<S> {
    let mut data = Vec::with_capacity(rows.len() * z.ncols());
    for &r in rows {
        data.extend_from_slice(z.row(r));
    }
    Matrix::from_vec(rows.len(), z.ncols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quick() -> FitOptions {
        FitOptions {
            restarts: 2,
            steps: 60,
            ..FitOptions::default()
        }
    }

    #[test]
    fn fold_policy_switches_at_ten() {
        assert_eq!(cv_folds(9, CvPolicy::Auto, 0).len(), 9);
        assert_eq!(cv_folds(10, CvPolicy::Auto, 0).len(), 10);
        assert!(cv_folds(25, CvPolicy::Auto, 0).iter().all(|f| f.len() == 2 || f.len() == 3));
        assert_eq!(cv_folds(5, CvPolicy::Loo, 0).len(), 5);
    }

    #[test]
    fn mean_baseline_on_two_level_targets() {
        let z = Matrix::from_f64_rows(&[[0.0], [0.3], [0.6], [1.0]]).unwrap();
        let r: CvResult<f64> = gp_cv_mse(&z, &[0.0, 0.0, 1.0, 1.0], CvPolicy::Loo, &quick()).unwrap();
        assert_eq!(r.folds, 4);
        assert!((r.mean_baseline_mse - 4.0 / 9.0).abs() <= 1e-15);
    }

    #[test]
    fn constant_targets_give_zero_error() {
        let z = Matrix::from_f64_rows(&[[0.1], [0.4], [0.5], [0.9], [0.2]]).unwrap();
        let r = gp_cv_mse(&z, &[0.3; 5], CvPolicy::Auto, &quick()).unwrap();
        assert!(r.gp_mse < 1e-20 && r.mean_baseline_mse < 1e-20);
    }

    #[test]
    fn smooth_function_beats_constant() {
        let rows: Vec<[f64; 2]> = (0..12)
            .map(|i| [(i % 4) as f64 / 3.0, (i / 4) as f64 / 2.0])
            .collect();
        let z = Matrix::from_f64_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[0]).collect();
        let r = gp_cv_mse(&z, &y, CvPolicy::Auto, &FitOptions::default()).unwrap();
        assert_eq!(r.folds, 10);
        assert!(r.gp_mse < r.mean_baseline_mse, "{r:?}");
    }

    proptest! {
        #[test]
        fn folds_partition_indices(n in 3usize..40, seed: u64) {
            let folds = cv_folds(n, CvPolicy::Auto, seed);
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
