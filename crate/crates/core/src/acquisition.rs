//! Batch Monte-Carlo log noisy expected improvement and its maximization
//! over the unit hypercube.
//!
//! Baseline points are the training inputs, sampled jointly with the
//! candidates from the GP posterior: baseline values include observation
//! noise, candidate values are latent. Per sample the improvement of a
//! smoothed max over the candidates above the baseline max is passed through
//! a temperature-`1e-6` softplus and a log; samples are combined by
//! log-mean-exp.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{Cholesky, Matrix};
use crate::streams::derive_stream;
use crate::surrogate::{cross, gram, SurrogateError, SurrogateModel};
use crate::Scalar;

/// Softplus temperature applied to the improvement.
pub const RELU_TAU: f64 = 1e-6;
/// Floor on the smoothed improvement inside the log.
pub const IMPROVEMENT_FLOOR: f64 = 1e-12;
pub const DEFAULT_SMOOTHING_TAU: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub num_samples: usize,
    pub seed: u64,
    /// Temperature of the smooth max over the q candidates.
    pub smoothing_tau: f64,
}

impl McOptions {
    pub fn new(num_samples: usize, seed: u64) -> Self {
        Self {
            num_samples,
            seed,
            smoothing_tau: DEFAULT_SMOOTHING_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub restarts: usize,
    pub raw_samples: usize,
    pub mc_samples: usize,
    pub final_mc_samples: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            raw_samples: 512,
            mc_samples: 128,
            final_mc_samples: 1024,
            max_iters: 100,
            seed: 0,
        }
    }
}

fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

/// `log(max(τ·log(1 + e^{x/τ}), floor))`, stable for large |x/τ|.
fn log_soft_improvement<S: Scalar>(x: S, tau: S, floor_ln: S) -> S {
    let u = x / tau;
    let ln_sp = if u > S::lit(30.0) {
        // log1p(e^u) ≈ u + e^{-u}
        (u + (-u).exp()).ln()
    } else if u < S::lit(-30.0) {
        u
    } else {
        u.exp().ln_1p().ln()
    };
    (tau.ln() + ln_sp).max(floor_ln)
}

/// Smooth max `τ·LSE(v/τ)` over one sample's candidate values.
fn fat_max<S: Scalar>(values: &[S], tau: S) -> S {
    if values.len() == 1 {
        return values[0];
    }
    let scaled: Vec<S> = values.iter().map(|&v| v / tau).collect();
    tau * log_sum_exp(&scaled)
}

/// Combines per-sample candidate values with per-sample baseline maxima.
fn aggregate<S: Scalar>(best_baseline: &[S], candidate_samples: &[Vec<S>], smoothing_tau: S) -> S {
    let tau_r = S::lit(RELU_TAU);
    let floor_ln = S::lit(IMPROVEMENT_FLOOR.ln());
    let logs: Vec<S> = best_baseline
        .iter()
        .zip(candidate_samples)
        .map(|(&b, c)| log_soft_improvement(fat_max(c, smoothing_tau) - b, tau_r, floor_ln))
        .collect();
    log_sum_exp(&logs) - S::from_usize_lossy(logs.len()).ln()
}

fn robust_cholesky<S: Scalar>(a: &Matrix<S>) -> Cholesky<S> {
    if let Some((c, _)) = Cholesky::with_jitter(a, S::zero(), S::lit(1e-4)) {
        return c;
    }
    // Fall back to independent marginals when the conditional covariance is
    // numerically indefinite.
    let n = a.nrows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = a[(i, i)].max(S::lit(1e-12));
    }
    Cholesky::new(&d).expect("diagonal positive matrix factorizes")
}

fn standard_normals<S: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Reference evaluation from an explicit joint posterior over
/// `[baseline…, candidates…]`, on whatever scale `mean`/`cov` use.
///
/// Base samples are drawn in the same order as [`QLogNei`], so both agree
/// when given the same joint posterior.
pub fn qlog_nei_from_posterior<S: Scalar>(mean: &[S], cov: &Matrix<S>, n_baseline: usize, mc: &McOptions) -> S {
    let total = mean.len();
    assert!(n_baseline >= 1 && n_baseline < total, "need baseline and at least one candidate");
    let chol = robust_cholesky(cov);
    let mut rng = derive_stream(mc.seed, "qlognei_base", 0, 0);
    let mut best = Vec::with_capacity(mc.num_samples);
    let mut cands = Vec::with_capacity(mc.num_samples);
    for _ in 0..mc.num_samples {
        let e: Vec<S> = standard_normals(&mut rng, total);
        let f: Vec<S> = chol.mul_lower(&e).iter().zip(mean).map(|(&a, &m)| a + m).collect();
        best.push(f[..n_baseline].iter().copied().fold(S::neg_infinity(), S::max));
        cands.push(f[n_baseline..].to_vec());
    }
    aggregate(&best, &cands, S::lit(mc.smoothing_tau))
}

/// Evaluator with the baseline block and base samples precomputed, for
/// repeated evaluation of q-batches under common random numbers.
pub struct QLogNei<'a, S: Scalar> {
    model: &'a SurrogateModel<S>,
    q: usize,
    smoothing_tau: S,
    log_scale: S,
    /// `L_bb⁻¹ (I − K_f (K + νI)⁻¹)`, maps candidate cross-covariances to `L_cbᵀ`.
    c: Matrix<S>,
    /// Baseline base samples, one row per MC sample.
    e_b: Vec<Vec<S>>,
    e_c: Vec<Vec<S>>,
    best_b: Vec<S>,
}

impl<'a, S: Scalar> QLogNei<'a, S> {
    pub fn new(model: &'a SurrogateModel<S>, q: usize, mc: &McOptions) -> Self {
        assert!(q >= 1, "q must be at least 1");
        let x = model.train_inputs();
        let n = x.nrows();
        let p = model.params();
        let kf = gram(x, p);
        let chol = model.cholesky();
        // (K + νI)⁻¹ K_f, column by column.
        let mut inv_kf = Matrix::zeros(n, n);
        for j in 0..n {
            let col: Vec<S> = (0..n).map(|i| kf[(i, j)]).collect();
            let s = chol.solve(&col);
            for i in 0..n {
                inv_kf[(i, j)] = s[i];
            }
        }
        let mean_b = kf.matvec(model.alpha());
        // Σ_bb + νI = K_f − K_f (K + νI)⁻¹ K_f + νI
        let mut sigma_bb = kf.matmul(&inv_kf);
        for i in 0..n {
            for j in 0..n {
                sigma_bb[(i, j)] = kf[(i, j)] - sigma_bb[(i, j)];
            }
        }
        for i in 0..n {
            for j in 0..i {
                let avg = S::lit(0.5) * (sigma_bb[(i, j)] + sigma_bb[(j, i)]);
                sigma_bb[(i, j)] = avg;
                sigma_bb[(j, i)] = avg;
            }
        }
        sigma_bb.add_diagonal(p.noise_variance);
        let l_bb = robust_cholesky(&sigma_bb);
        // Bᵀ = I − (K + νI)⁻¹ K_f, so Σ_bc = Bᵀ K_Xc.
        let mut bt = inv_kf;
        bt.scale(-S::one());
        bt.add_diagonal(S::one());
        let c = l_bb.solve_lower_matrix(&bt);
        let mut rng = derive_stream(mc.seed, "qlognei_base", 0, 0);
        let mut e_b = Vec::with_capacity(mc.num_samples);
        let mut e_c = Vec::with_capacity(mc.num_samples);
        let mut best_b = Vec::with_capacity(mc.num_samples);
        for _ in 0..mc.num_samples {
            let eb: Vec<S> = standard_normals(&mut rng, n);
            let ec: Vec<S> = standard_normals(&mut rng, q);
            let fb = l_bb.mul_lower(&eb);
            best_b.push(
                fb.iter()
                    .zip(&mean_b)
                    .map(|(&a, &m)| a + m)
                    .fold(S::neg_infinity(), S::max),
            );
            e_b.push(eb);
            e_c.push(ec);
        }
        Self {
            model,
            q,
            smoothing_tau: S::lit(mc.smoothing_tau),
            log_scale: model.output_transform().scale.ln(),
            c,
            e_b,
            e_c,
            best_b,
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Acquisition value of a `q × d` candidate batch in raw feature
    /// coordinates, on the log original-score scale.
    ///
    /// Rows are put in lexicographic order first, which makes the value
    /// exactly invariant to the order in which candidates are listed.
    pub fn value(&self, candidates: &Matrix<S>) -> Result<S, SurrogateError> {
        if candidates.nrows() != self.q || candidates.ncols() != self.model.dim() {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.q * self.model.dim(),
                found: candidates.nrows() * candidates.ncols(),
            });
        }
        let mut rows = candidates.to_rows();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let xc = self.model.input_transform().apply(&Matrix::from_rows(&rows).expect("rectangular"));
        let p = self.model.params();
        let k_xc = cross(self.model.train_inputs(), &xc, p);
        let mu_c = k_xc.transpose().matvec(self.model.alpha());
        let v = self.model.cholesky().solve_lower_matrix(&k_xc);
        let mut sigma_cc = gram(&xc, p);
        for i in 0..self.q {
            for j in 0..self.q {
                let mut s = S::zero();
                for k in 0..v.nrows() {
                    s += v[(k, i)] * v[(k, j)];
                }
                sigma_cc[(i, j)] -= s;
            }
        }
        // L_cbᵀ = C K_Xc (n × q); conditional covariance Σ_cc − L_cb L_cbᵀ.
        let l_cbt = self.c.matmul(&k_xc);
        for i in 0..self.q {
            for j in 0..self.q {
                let mut s = S::zero();
                for k in 0..l_cbt.nrows() {
                    s += l_cbt[(k, i)] * l_cbt[(k, j)];
                }
                sigma_cc[(i, j)] -= s;
            }
        }
        for i in 0..self.q {
            for j in 0..i {
                let avg = S::lit(0.5) * (sigma_cc[(i, j)] + sigma_cc[(j, i)]);
                sigma_cc[(i, j)] = avg;
                sigma_cc[(j, i)] = avg;
            }
        }
        let l_cc = robust_cholesky(&sigma_cc);
        let n = l_cbt.nrows();
        let mut cands = Vec::with_capacity(self.e_b.len());
        for (eb, ec) in self.e_b.iter().zip(&self.e_c) {
            let cc = l_cc.mul_lower(ec);
            let f: Vec<S> = (0..self.q)
                .map(|j| {
                    let mut s = mu_c[j] + cc[j];
                    for k in 0..n {
                        s += l_cbt[(k, j)] * eb[k];
                    }
                    s
                })
                .collect();
            cands.push(f);
        }
        Ok(aggregate(&self.best_b, &cands, self.smoothing_tau) + self.log_scale)
    }
}

/// Acquisition value of a candidate batch with the training inputs as baseline.
pub fn qlog_nei_value<S: Scalar>(
    model: &SurrogateModel<S>,
    candidates: &Matrix<S>,
    mc: &McOptions,
) -> Result<S, SurrogateError> {
    QLogNei::new(model, candidates.nrows(), mc).value(candidates)
}

/// Latin-hypercube sample of `n` points in `[0,1]^dim`.
pub fn latin_hypercube<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        strata.shuffle(rng);
        for (i, &s) in strata.iter().enumerate() {
            points[i][j] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

fn to_batch<S: Scalar>(flat: &[S], q: usize, d: usize) -> Matrix<S> {
    Matrix::from_vec(q, d, flat.to_vec())
}

/// Projected finite-difference ascent with an adaptive step.
fn refine<S: Scalar>(acq: &QLogNei<'_, S>, start: Vec<S>, start_value: S, q: usize, d: usize, max_iters: usize) -> (Vec<S>, S) {
    let h = S::lit(1e-4);
    let mut x = start;
    let mut fx = start_value;
    let mut step = S::lit(0.05);
    let eval = |p: &[S]| acq.value(&to_batch(p, q, d)).expect("shape fixed");
    let gradient = |x: &[S], fx: S| -> Vec<S> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                // Step inward at the upper face so the probe stays in the cube.
                let hk = if p[k] + h > S::one() { -h } else { h };
                p[k] += hk;
                (eval(&p) - fx) / hk
            })
            .collect()
    };
    let mut g = gradient(&x, fx);
    for _ in 0..max_iters {
        let norm = g.iter().map(|&v| v * v).sum::<S>().sqrt();
        if !(norm > S::lit(1e-12)) || step < S::lit(1e-4) {
            break;
        }
        let trial: Vec<S> = x
            .iter()
            .zip(&g)
            .map(|(&xi, &gi)| (xi + step * gi / norm).max(S::zero()).min(S::one()))
            .collect();
        let ft = eval(&trial);
        if ft > fx {
            x = trial;
            fx = ft;
            step = (step * S::lit(1.5)).min(S::lit(0.25));
            g = gradient(&x, fx);
        } else {
            step *= S::lit(0.5);
        }
    }
    (x, fx)
}

/// Maximizes the acquisition over `[0,1]^{q·d}`: Latin-hypercube raw
/// batches are ranked, the best `restarts` are refined by local ascent under
/// common random numbers, and the winner is chosen by a larger-sample pass
/// over the refined batches and the best raw batch.
pub fn optimize_batch<S: Scalar>(model: &SurrogateModel<S>, q: usize, options: &OptimizeOptions) -> Matrix<S> {
    let d = model.dim();
    let acq = QLogNei::new(model, q, &McOptions::new(options.mc_samples, options.seed));
    let mut rng = derive_stream(options.seed, "acq_raw", q as u64, d as u64);
    let raw: Vec<Vec<S>> = latin_hypercube(options.raw_samples.max(1), q * d, &mut rng)
        .into_iter()
        .map(|p| p.into_iter().map(S::lit).collect())
        .collect();
    let mut scored: Vec<(S, usize)> = raw
        .iter()
        .enumerate()
        .map(|(i, p)| (acq.value(&to_batch(p, q, d)).expect("shape fixed"), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut finalists: Vec<Vec<S>> = vec![raw[scored[0].1].clone()];
    for &(v, i) in scored.iter().take(options.restarts.max(1)) {
        let (x, _) = refine(&acq, raw[i].clone(), v, q, d, options.max_iters);
        finalists.push(x);
    }
    let final_acq = QLogNei::new(
        model,
        q,
        &McOptions::new(options.final_mc_samples, options.seed ^ 0x5eed_f1a1),
    );
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (i, f) in finalists.iter().enumerate() {
        let v = final_acq.value(&to_batch(f, q, d)).expect("shape fixed");
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    to_batch(&finalists[best], q, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::{FitOptions, KernelParams};
    use proptest::prelude::*;

    fn model(seed: u64, n: usize, noise: f64) -> SurrogateModel<f64> {
        let mut rng = derive_stream(seed, "acq_model", 0, 0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| (4.0 * r[0]).sin() * r[1] + 0.5).collect();
        let z = Matrix::from_rows(&rows).unwrap();
        SurrogateModel::with_params(&z, &y, KernelParams::new(vec![0.3, 0.4], 1.0, noise).unwrap()).unwrap()
    }

    #[test]
    fn evaluator_agrees_with_joint_reference() {
        let m = model(1, 8, 1e-4);
        let mc = McOptions::new(256, 3);
        let cand = Matrix::from_rows(&[[0.2, 0.3], [0.7, 0.9]]).unwrap();
        let fast = QLogNei::new(&m, 2, &mc).value(&cand).unwrap();
        // Joint posterior over [training inputs; candidates] on the standardized scale.
        let t = m.input_transform();
        let raw_train: Vec<Vec<f64>> = m
            .train_inputs()
            .to_rows()
            .into_iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| v * t.span[j] + t.offset[j]).collect())
            .collect();
        let mut all = raw_train.clone();
        all.extend(cand.to_rows());
        let (mean, mut cov) = m.posterior_standardized(&Matrix::from_rows(&all).unwrap(), false).unwrap();
        for i in 0..8 {
            cov[(i, i)] += m.params().noise_variance;
        }
        let reference = qlog_nei_from_posterior(&mean, &cov, 8, &mc) + m.output_transform().scale.ln();
        assert!((fast - reference).abs() < 1e-6, "{fast} vs {reference}");
    }

    #[test]
    fn larger_mean_gives_larger_value() {
        let m = model(2, 6, 1e-3);
        let t = m.input_transform();
        let raw: Vec<Vec<f64>> = m
            .train_inputs()
            .to_rows()
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| v * t.span[j] + t.offset[j]).collect())
            .chain(std::iter::once(vec![0.4, 0.6]))
            .collect();
        let (mean, cov) = m.posterior(&Matrix::from_rows(&raw).unwrap(), false).unwrap();
        let mc = McOptions::new(512, 9);
        let base = qlog_nei_from_posterior(&mean, &cov, 6, &mc);
        let mut shifted = mean.clone();
        shifted[6] += 0.1;
        assert!(qlog_nei_from_posterior(&shifted, &cov, 6, &mc) > base);
    }

    #[test]
    fn no_improvement_at_best_training_point() {
        let m = model(3, 8, 1e-6);
        let t = m.input_transform();
        let ys = m.train_targets();
        let ibest = (0..8).max_by(|&a, &b| ys[a].total_cmp(&ys[b])).unwrap();
        let xb: Vec<f64> = m.train_inputs().row(ibest).iter().enumerate().map(|(j, v)| v * t.span[j] + t.offset[j]).collect();
        let v = qlog_nei_value(&m, &Matrix::from_rows(&[xb]).unwrap(), &McOptions::new(1024, 1)).unwrap();
        let range = (ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min))
            * m.output_transform().scale;
        assert!(v.exp() < 1e-3 * range, "{} vs {}", v.exp(), range);
    }

    #[test]
    fn optimize_is_deterministic_and_in_cube() {
        let m = model(4, 10, 1e-3);
        let opts = OptimizeOptions {
            raw_samples: 64,
            restarts: 4,
            max_iters: 20,
            seed: 5,
            ..OptimizeOptions::default()
        };
        let a = optimize_batch(&m, 3, &opts);
        let b = optimize_batch(&m, 3, &opts);
        assert_eq!(a, b);
        assert_eq!((a.nrows(), a.ncols()), (3, 2));
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn optimize_never_loses_to_best_raw_sample() {
        let m = model(6, 9, 1e-3);
        let opts = OptimizeOptions {
            raw_samples: 32,
            restarts: 3,
            max_iters: 15,
            seed: 11,
            ..OptimizeOptions::default()
        };
        let out = optimize_batch(&m, 2, &opts);
        let final_acq = QLogNei::new(&m, 2, &McOptions::new(opts.final_mc_samples, opts.seed ^ 0x5eed_f1a1));
        let got = final_acq.value(&out).unwrap();
        let opt_acq = QLogNei::new(&m, 2, &McOptions::new(opts.mc_samples, opts.seed));
        let mut rng = derive_stream(opts.seed, "acq_raw", 2, 2);
        let raw = latin_hypercube(opts.raw_samples, 4, &mut rng);
        let top = raw
            .iter()
            .max_by(|a, b| {
                opt_acq.value(&to_batch(a, 2, 2)).unwrap().total_cmp(&opt_acq.value(&to_batch(b, 2, 2)).unwrap())
            })
            .unwrap();
        assert!(got >= final_acq.value(&to_batch(top, 2, 2)).unwrap());
    }

    #[test]
    fn fitted_model_works() {
        let mut rng = derive_stream(7, "fit", 0, 0);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] - (r[1] - 0.5).powi(2)).collect();
        let m = crate::surrogate::fit_gp(&Matrix::from_rows(&rows).unwrap(), &y, &FitOptions::default()).unwrap();
        let v = qlog_nei_value(&m, &Matrix::from_rows(&[[0.9, 0.5, 0.5]]).unwrap(), &McOptions::new(128, 0)).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn latin_hypercube_stratifies() {
        let pts = latin_hypercube(16, 3, &mut derive_stream(0, "lhs", 0, 0));
        for j in 0..3 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[j] * 16.0) as usize).collect();
            bins.sort_unstable();
            assert_eq!(bins, (0..16).collect::<Vec<_>>());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_invariant(coords in prop::collection::vec(0.0f64..1.0, 6), seed in 0u64..50) {
            let m = model(8, 7, 1e-3);
            let acq = QLogNei::new(&m, 3, &McOptions::new(64, seed));
            let a = Matrix::from_vec(3, 2, coords.clone());
            let b = Matrix::from_vec(3, 2, [&coords[4..6], &coords[0..2], &coords[2..4]].concat());
            prop_assert_eq!(acq.value(&a).unwrap(), acq.value(&b).unwrap());
        }
    }
}
