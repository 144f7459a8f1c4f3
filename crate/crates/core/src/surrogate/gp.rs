use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{cross, gram, KernelParams};
use super::SurrogateError;
use crate::linalg::{Cholesky, Matrix};
use crate::streams::derive_stream;
use crate::Scalar;

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 10.0);
pub const NOISE_BOUNDS: (f64, f64) = (1e-6, 1.0);
pub const SIGNAL_BOUNDS: (f64, f64) = (1e-2, 1e2);
const JITTER_MAX: f64 = 1e-4;
const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            steps: 200,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Per-dimension min/max scaling of inputs to the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalize<S> {
    pub offset: Vec<S>,
    pub span: Vec<S>,
}

impl<S: Scalar> Normalize<S> {
    pub fn fit(x: &Matrix<S>) -> Self {
        let d = x.ncols();
        let mut lo = vec![S::infinity(); d];
        let mut hi = vec![S::neg_infinity(); d];
        for i in 0..x.nrows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let span = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                let s = h - l;
                // Constant columns keep their scale instead of dividing by zero.
                if s > S::lit(1e-8) {
                    s
                } else {
                    S::one()
                }
            })
            .collect();
        Self { offset: lo, span }
    }

    pub fn apply(&self, x: &Matrix<S>) -> Matrix<S> {
        let mut out = x.clone();
        for i in 0..out.nrows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.offset[j]) / self.span[j];
            }
        }
        out
    }
}

/// Standardization of targets with the zero-variance guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardize<S> {
    pub mean: S,
    pub scale: S,
}

impl<S: Scalar> Standardize<S> {
    pub fn fit(y: &[S]) -> Self {
        let n = S::from_usize_lossy(y.len());
        let mean = y.iter().copied().sum::<S>() / n;
        let var = if y.len() > 1 {
            y.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / (n - S::one())
        } else {
            S::zero()
        };
        let scale = if var < S::lit(ZERO_VARIANCE) { S::one() } else { var.sqrt() };
        Self { mean, scale }
    }

    pub fn apply(&self, y: &[S]) -> Vec<S> {
        y.iter().map(|&v| (v - self.mean) / self.scale).collect()
    }
}

/// Exact GP marginal likelihood on fixed (normalized, standardized) data, as a
/// function of log-parameters `θ = [log ℓ₁…log ℓ_d, log σ², log ν]`.
pub struct MllObjective<S> {
    x: Matrix<S>,
    y: Vec<S>,
    /// Squared coordinate differences, one n×n matrix per input dimension.
    sq_diff: Vec<Matrix<S>>,
}

impl<S: Scalar> MllObjective<S> {
    pub fn new(x: Matrix<S>, y: Vec<S>) -> Self {
        let n = x.nrows();
        let sq_diff = (0..x.ncols())
            .map(|d| {
                let mut m = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let u = x[(i, d)] - x[(j, d)];
                        m[(i, j)] = u * u;
                    }
                }
                m
            })
            .collect();
        Self { x, y, sq_diff }
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn params_from_log(&self, theta: &[S]) -> KernelParams<S> {
        let d = self.dim();
        KernelParams {
            lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
            signal_variance: theta[d].exp(),
            noise_variance: theta[d + 1].exp(),
        }
    }

    /// MLL and its gradient in θ; `None` when the system cannot be factorized.
    pub fn value_and_grad(&self, theta: &[S]) -> Option<(S, Vec<S>)> {
        let n = self.x.nrows();
        let d = self.dim();
        let p = self.params_from_log(theta);
        let s5 = S::lit(5.0).sqrt();
        let mut kf = Matrix::zeros(n, n);
        // dk/d log ℓ_d = g · (Δ_d/ℓ_d)², g = σ² (5/3)(1 + √5 r) e^{−√5 r}
        let mut g = Matrix::zeros(n, n);
        let inv_l2: Vec<S> = p.lengthscales.iter().map(|&l| S::one() / (l * l)).collect();
        for i in 0..n {
            kf[(i, i)] = p.signal_variance;
            g[(i, i)] = p.signal_variance * S::lit(5.0 / 3.0);
            for j in 0..i {
                let mut r2 = S::zero();
                for (dd, il) in inv_l2.iter().enumerate() {
                    r2 += self.sq_diff[dd][(i, j)] * *il;
                }
                let r = r2.sqrt();
                let e = (-s5 * r).exp();
                let kv = p.signal_variance * (S::one() + s5 * r + S::lit(5.0 / 3.0) * r2) * e;
                let gv = p.signal_variance * S::lit(5.0 / 3.0) * (S::one() + s5 * r) * e;
                kf[(i, j)] = kv;
                kf[(j, i)] = kv;
                g[(i, j)] = gv;
                g[(j, i)] = gv;
            }
        }
        let mut a = kf.clone();
        a.add_diagonal(p.noise_variance);
        let (chol, _) = Cholesky::with_jitter(&a, S::zero(), S::lit(JITTER_MAX))?;
        let alpha = chol.solve(&self.y);
        let fit = crate::linalg::dot(&self.y, &alpha);
        let two_pi = S::lit(2.0) * S::PI();
        let half = S::lit(0.5);
        let mll = -half * fit - half * chol.log_det() - half * S::from_usize_lossy(n) * two_pi.ln();
        if !mll.is_finite() {
            return None;
        }
        let kinv = chol.inverse();
        // W = ααᵀ − K⁻¹; ∂MLL/∂θ_j = ½ tr(W ∂K/∂θ_j)
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                w[(i, j)] = alpha[i] * alpha[j] - kinv[(i, j)];
            }
        }
        let mut grad = vec![S::zero(); d + 2];
        for (dd, il) in inv_l2.iter().enumerate() {
            let sq = &self.sq_diff[dd];
            let mut acc = S::zero();
            for i in 0..n {
                for j in 0..n {
                    acc += w[(i, j)] * g[(i, j)] * sq[(i, j)];
                }
            }
            grad[dd] = half * acc * *il;
        }
        grad[d] = half * w.frobenius_dot(&kf);
        let trace_w = (0..n).map(|i| w[(i, i)]).sum::<S>();
        grad[d + 1] = half * p.noise_variance * trace_w;
        Some((mll, grad))
    }

    fn log_bounds(&self) -> Vec<(S, S)> {
        let b = |(lo, hi): (f64, f64)| (S::lit(lo.ln()), S::lit(hi.ln()));
        let mut v = vec![b(LENGTHSCALE_BOUNDS); self.dim()];
        v.push(b(SIGNAL_BOUNDS));
        v.push(b(NOISE_BOUNDS));
        v
    }

    /// Projected Adam ascent from `theta0`; returns the best point visited.
    fn ascend(&self, theta0: Vec<S>, steps: usize, lr: S) -> Option<(S, Vec<S>)> {
        let bounds = self.log_bounds();
        let mut theta = theta0;
        let (value, mut grad) = self.value_and_grad(&theta)?;
        let mut best = (value, theta.clone());
        let (b1, b2, eps) = (S::lit(0.9), S::lit(0.999), S::lit(1e-8));
        let mut m = vec![S::zero(); theta.len()];
        let mut v = vec![S::zero(); theta.len()];
        let mut stall = 0usize;
        for step in 1..=steps {
            let t = step as i32;
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (S::one() - b1) * grad[k];
                v[k] = b2 * v[k] + (S::one() - b2) * grad[k] * grad[k];
                let mh = m[k] / (S::one() - b1.powi(t));
                let vh = v[k] / (S::one() - b2.powi(t));
                theta[k] = (theta[k] + lr * mh / (vh.sqrt() + eps)).max(bounds[k].0).min(bounds[k].1);
            }
            match self.value_and_grad(&theta) {
                Some((nv, ng)) => {
                    let gain = nv - best.0;
                    if nv > best.0 {
                        best = (nv, theta.clone());
                    }
                    stall = if gain > S::lit(1e-6) { 0 } else { stall + 1 };
                    grad = ng;
                }
                None => break,
            }
            if stall >= 15 {
                break;
            }
        }
        Some(best)
    }
}

/// Fitted Gaussian-process surrogate.
#[derive(Debug, Clone)]
pub struct SurrogateModel<S: Scalar> {
    input: Normalize<S>,
    output: Standardize<S>,
    train_x: Matrix<S>,
    train_y: Vec<S>,
    params: KernelParams<S>,
    chol: Cholesky<S>,
    alpha: Vec<S>,
    jitter: S,
}

fn check_data<S: Scalar>(z: &Matrix<S>, y: &[S]) -> Result<(), SurrogateError> {
    if z.nrows() != y.len() {
        return Err(SurrogateError::DimensionMismatch {
            expected: z.nrows(),
            found: y.len(),
        });
    }
    if z.nrows() < 2 {
        return Err(SurrogateError::TooFewPoints(z.nrows()));
    }
    if z.ncols() < 1 {
        return Err(SurrogateError::DimensionMismatch { expected: 1, found: 0 });
    }
    Ok(())
}

/// Fits a GP by multi-start maximization of the marginal likelihood.
pub fn fit_gp<S: Scalar>(z: &Matrix<S>, y: &[S], options: &FitOptions) -> Result<SurrogateModel<S>, SurrogateError> {
    check_data(z, y)?;
    let input = Normalize::fit(z);
    let output = Standardize::fit(y);
    let x = input.apply(z);
    let ys = output.apply(y);
    let objective = MllObjective::new(x, ys);
    let d = z.ncols();
    let lr = S::lit(options.learning_rate);
    let mut best: Option<(S, Vec<S>)> = None;
    for restart in 0..options.restarts.max(1) {
        let theta0: Vec<S> = if restart == 0 {
            let mut t = vec![S::lit(0.5f64.ln()); d];
            t.push(S::zero());
            t.push(S::lit(1e-2f64.ln()));
            t
        } else {
            let mut rng = derive_stream(options.seed, "gp_restart", z.nrows() as u64, restart as u64);
            let mut t: Vec<S> = (0..d)
                .map(|_| S::lit(rng.random_range(0.05f64.ln()..2f64.ln())))
                .collect();
            t.push(S::lit(rng.random_range(0.1f64.ln()..10f64.ln())));
            t.push(S::lit(rng.random_range(1e-5f64.ln()..1e-1f64.ln())));
            t
        };
        if let Some(found) = objective.ascend(theta0, options.steps, lr) {
            if best.as_ref().is_none_or(|b| found.0 > b.0) {
                best = Some(found);
            }
        }
    }
    let (_, theta) = best.ok_or(SurrogateError::FitFailed)?;
    let params = objective.params_from_log(&theta);
    SurrogateModel::from_parts(input, output, objective.x, objective.y, params)
}

impl<S: Scalar> SurrogateModel<S> {
    /// Conditions a GP with fixed hyperparameters (no likelihood fitting).
    pub fn with_params(z: &Matrix<S>, y: &[S], params: KernelParams<S>) -> Result<Self, SurrogateError> {
        check_data(z, y)?;
        params.validate()?;
        if params.dim() != z.ncols() {
            return Err(SurrogateError::DimensionMismatch {
                expected: z.ncols(),
                found: params.dim(),
            });
        }
        let input = Normalize::fit(z);
        let output = Standardize::fit(y);
        let x = input.apply(z);
        let ys = output.apply(y);
        Self::from_parts(input, output, x, ys, params)
    }

    fn from_parts(
        input: Normalize<S>,
        output: Standardize<S>,
        train_x: Matrix<S>,
        train_y: Vec<S>,
        params: KernelParams<S>,
    ) -> Result<Self, SurrogateError> {
        let mut k = gram(&train_x, &params);
        k.add_diagonal(params.noise_variance);
        let (chol, jitter) =
            Cholesky::with_jitter(&k, S::zero(), S::lit(JITTER_MAX)).ok_or(SurrogateError::FitFailed)?;
        let alpha = chol.solve(&train_y);
        Ok(Self {
            input,
            output,
            train_x,
            train_y,
            params,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn params(&self) -> &KernelParams<S> {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn n_train(&self) -> usize {
        self.train_x.nrows()
    }

    /// Diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> S {
        self.jitter
    }

    pub fn output_transform(&self) -> Standardize<S> {
        self.output
    }

    pub fn input_transform(&self) -> &Normalize<S> {
        &self.input
    }

    /// Training inputs after normalization.
    pub fn train_inputs(&self) -> &Matrix<S> {
        &self.train_x
    }

    /// Training targets after standardization.
    pub fn train_targets(&self) -> &[S] {
        &self.train_y
    }

    pub(crate) fn cholesky(&self) -> &Cholesky<S> {
        &self.chol
    }

    pub(crate) fn alpha(&self) -> &[S] {
        &self.alpha
    }

    fn check_query(&self, xq: &Matrix<S>) -> Result<(), SurrogateError> {
        if xq.ncols() != self.dim() {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.dim(),
                found: xq.ncols(),
            });
        }
        Ok(())
    }

    /// Posterior on the standardized scale at raw (unnormalized) inputs.
    pub fn posterior_standardized(&self, xq: &Matrix<S>, include_noise: bool) -> Result<(Vec<S>, Matrix<S>), SurrogateError> {
        self.check_query(xq)?;
        let xn = self.input.apply(xq);
        let ks = cross(&xn, &self.train_x, &self.params);
        let mean = ks.matvec(&self.alpha);
        let v = self.chol.solve_lower_matrix(&ks.transpose());
        let mut cov = gram(&xn, &self.params);
        let m = xq.nrows();
        let n = self.n_train();
        for i in 0..m {
            for j in 0..=i {
                let mut s = S::zero();
                for k in 0..n {
                    s += v[(k, i)] * v[(k, j)];
                }
                let c = cov[(i, j)] - s;
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        if include_noise {
            cov.add_diagonal(self.params.noise_variance);
        }
        Ok((mean, cov))
    }

    /// Posterior mean and covariance on the original target scale.
    pub fn posterior(&self, xq: &Matrix<S>, include_noise: bool) -> Result<(Vec<S>, Matrix<S>), SurrogateError> {
        let (mean, mut cov) = self.posterior_standardized(xq, include_noise)?;
        let Standardize { mean: mu, scale } = self.output;
        let mean = mean.into_iter().map(|m| m * scale + mu).collect();
        cov.scale(scale * scale);
        Ok((mean, cov))
    }

    /// Posterior mean only, original scale.
    pub fn predict_mean(&self, xq: &Matrix<S>) -> Result<Vec<S>, SurrogateError> {
        self.check_query(xq)?;
        let xn = self.input.apply(xq);
        let ks = cross(&xn, &self.train_x, &self.params);
        let Standardize { mean: mu, scale } = self.output;
        Ok(ks.matvec(&self.alpha).into_iter().map(|m| m * scale + mu).collect())
    }

    /// Log marginal likelihood of the training data at the fitted parameters.
    pub fn log_marginal_likelihood(&self) -> S {
        let n = S::from_usize_lossy(self.n_train());
        let half = S::lit(0.5);
        -half * crate::linalg::dot(&self.train_y, &self.alpha)
            - half * self.chol.log_det()
            - half * n * (S::lit(2.0) * S::PI()).ln()
    }
}
