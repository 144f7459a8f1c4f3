use serde::{Deserialize, Serialize};

use super::SurrogateError;
use crate::domain::FeatureVector;
use crate::linalg::Matrix;
use crate::Scalar;

/// ARD Matérn 5/2 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<S> {
    pub lengthscales: Vec<S>,
    pub signal_variance: S,
    pub noise_variance: S,
}

impl<S: Scalar> KernelParams<S> {
    pub fn new(lengthscales: Vec<S>, signal_variance: S, noise_variance: S) -> Result<Self, SurrogateError> {
        let p = Self {
            lengthscales,
            signal_variance,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn isotropic(d: usize, lengthscale: S, signal_variance: S, noise_variance: S) -> Result<Self, SurrogateError> {
        Self::new(vec![lengthscale; d], signal_variance, noise_variance)
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let ok = !self.lengthscales.is_empty()
            && self.lengthscales.iter().all(|l| l.is_finite() && *l > S::zero())
            && self.signal_variance.is_finite()
            && self.signal_variance > S::zero()
            && self.noise_variance.is_finite()
            && self.noise_variance >= S::zero();
        if ok {
            Ok(())
        } else {
            Err(SurrogateError::InvalidParams(format!("{self:?}")))
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Scaled distance `r = ‖(x − x2) / ℓ‖`.
#[inline]
pub fn scaled_distance<S: Scalar>(x: &[S], x2: &[S], lengthscales: &[S]) -> S {
    let mut r2 = S::zero();
    for ((&a, &b), &l) in x.iter().zip(x2).zip(lengthscales) {
        let u = (a - b) / l;
        r2 += u * u;
    }
    r2.sqrt()
}

/// Correlation part `(1 + √5 r + 5r²/3) e^{−√5 r}`.
#[inline]
pub fn matern52_corr<S: Scalar>(r: S) -> S {
    let s5 = S::lit(5.0).sqrt();
    let u = s5 * r;
    (S::one() + u + u * u / S::lit(3.0)) * (-u).exp()
}

#[inline]
pub fn matern52<S: Scalar>(x: &[S], x2: &[S], params: &KernelParams<S>) -> S {
    params.signal_variance * matern52_corr(scaled_distance(x, x2, &params.lengthscales))
}

/// Kernel between two feature vectors.
pub fn matern52_kernel(x: &FeatureVector, x2: &FeatureVector, params: &KernelParams<f64>) -> Result<f64, SurrogateError> {
    if x.dim() != x2.dim() || x.dim() != params.dim() {
        return Err(SurrogateError::DimensionMismatch {
            expected: params.dim(),
            found: if x.dim() != params.dim() { x.dim() } else { x2.dim() },
        });
    }
    Ok(matern52(x.values(), x2.values(), params))
}

/// Gram matrix `K(X, X)` without noise.
pub fn gram<S: Scalar>(x: &Matrix<S>, params: &KernelParams<S>) -> Matrix<S> {
    let n = x.nrows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = matern52(x.row(i), x.row(j), params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cross-covariance `K(A, B)`.
pub fn cross<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, params: &KernelParams<S>) -> Matrix<S> {
    let mut k = Matrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            k[(i, j)] = matern52(a.row(i), b.row(j), params);
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::derive_stream;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn p1() -> KernelParams<f64> {
        KernelParams::new(vec![1.0], 1.0, 0.0).unwrap()
    }

    #[test]
    fn value_at_unit_distance() {
        // (1 + √5 + 5/3) e^{−√5}, evaluated independently.
        let s5 = 5f64.sqrt();
        let expected = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        let got = matern52(&[0.0], &[1.0], &p1());
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.5240).abs() < 5e-5);
    }

    #[test]
    fn zero_distance_is_signal_variance() {
        let p = KernelParams::new(vec![0.3, 2.0], 2.5, 0.1).unwrap();
        assert_eq!(matern52(&[0.2, 0.4], &[0.2, 0.4], &p), 2.5);
    }

    #[test]
    fn feature_vector_api_checks_dims() {
        let a = FeatureVector::new(vec![0.1, 0.2]).unwrap();
        let b = FeatureVector::new(vec![0.1]).unwrap();
        assert!(matern52_kernel(&a, &b, &p1()).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(vec![0.0], 1.0, 0.0).is_err());
        assert!(KernelParams::new(vec![1.0], -1.0, 0.0).is_err());
        assert!(KernelParams::new(vec![1.0], 1.0, -1e-3).is_err());
        assert!(KernelParams::<f64>::new(vec![], 1.0, 0.0).is_err());
    }

    #[test]
    fn gram_is_psd_on_random_inputs() {
        for seed in 0..10 {
            let mut rng = derive_stream(seed, "gram", 0, 0);
            let d = 1 + (seed as usize % 4);
            let n = 12;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
            let p = KernelParams::new(ls, rng.random_range(0.1..3.0), 0.0).unwrap();
            let k = gram(&Matrix::from_rows(&rows).unwrap(), &p);
            let dm = DMatrix::from_row_slice(n, n, k.as_slice());
            let min = dm.symmetric_eigenvalues().min();
            assert!(min >= -1e-8, "min eigenvalue {min}");
            assert!(k.max_abs_diff(&k.transpose()) == 0.0);
        }
    }

    proptest! {
        #[test]
        fn symmetric(a in prop::collection::vec(0.0f64..1.0, 3), b in prop::collection::vec(0.0f64..1.0, 3), l in 0.01f64..5.0) {
            let p = KernelParams::isotropic(3, l, 1.3, 0.0).unwrap();
            prop_assert_eq!(matern52(&a, &b, &p), matern52(&b, &a, &p));
            let v = matern52(&a, &b, &p);
            prop_assert!(v > 0.0 && v <= 1.3);
        }
    }
}
