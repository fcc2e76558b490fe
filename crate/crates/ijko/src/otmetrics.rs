//! Evaluation metrics between sample sets: exact EMD (W1) and empirical W2
//! via an assignment solver, Bures–Wasserstein and L2 unexplained-variance
//! percentages, and the unbiased Gaussian-kernel MMD².
//!
//! Transport distances are exact — a dense O(n³) Hungarian assignment on
//! the cost matrix, no entropic regularization — so reported values are
//! deterministic. Desk-scale sample counts (n ≤ 4000, typically 250 per
//! step) keep that affordable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{sym_eig, Tensor};
use crate::dynamics::worker_count;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sample sets have {0} and {1} rows; resample to equal counts before exact EMD")]
    UnequalCounts(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("covariance is rank-deficient beyond the 1e-10 clamp (eigenvalue {0})")]
    RankDeficient(f64),
    #[error("variance of the reference step must be positive, got {0}")]
    NonPositiveVariance(f64),
}

/// Samples drawn per time step by the synthetic evaluation protocol.
pub const EVAL_PROTOCOL_SAMPLES: usize = 250;

/// Minimum-cost perfect assignment on a dense n×n cost matrix.
///
/// Jonker–Volgenant style shortest augmenting paths with potentials.
/// Returns the column matched to each row and the total cost.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "dense square cost matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
            total += cost[(matched[j] - 1) * n + (j - 1)];
        }
    }
    (assignment, total)
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<usize, MetricError> {
    if x.cols() != y.cols() {
        return Err(MetricError::DimMismatch(x.cols(), y.cols()));
    }
    if x.rows() != y.rows() {
        return Err(MetricError::UnequalCounts(x.rows(), y.rows()));
    }
    Ok(x.rows())
}

/// Pairwise cost matrix, `power` = 1 for distances, 2 for squared.
fn cost_matrix(x: &Tensor, y: &Tensor, power: i32) -> Vec<f64> {
    let n = x.rows();
    let d = x.cols();
    let mut cost = vec![0.0f64; n * n];
    let workers = worker_count().min(n).max(1);
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, block) in cost.chunks_mut(chunk * n).enumerate() {
            let lo = w * chunk;
            scope.spawn(move || {
                for (r, row) in block.chunks_mut(n).enumerate() {
                    let xi = x.row(lo + r);
                    for (j, slot) in row.iter_mut().enumerate() {
                        let yj = y.row(j);
                        let mut s = 0.0;
                        for c in 0..d {
                            let diff = xi[c] - yj[c];
                            s += diff * diff;
                        }
                        *slot = if power == 1 { s.sqrt() } else { s };
                    }
                }
            });
        }
    });
    cost
}

/// Earth Mover's Distance: minimum over matchings of the mean Euclidean
/// distance between paired samples. Exact; equal counts required.
pub fn emd(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    let n = check_pair(x, y)?;
    if n == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let cost = cost_matrix(x, y, 1);
    let (_, total) = min_cost_assignment(&cost, n);
    Ok(total / n as f64)
}

/// Empirical W2: square root of the minimal mean squared-distance matching.
pub fn w2_empirical(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    let n = check_pair(x, y)?;
    if n == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let cost = cost_matrix(x, y, 2);
    let (_, total) = min_cost_assignment(&cost, n);
    Ok((total / n as f64).sqrt())
}

/// Sample mean of the rows.
pub fn sample_mean(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mu[c] += x.row(r)[c];
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    mu
}

/// Unbiased sample covariance (denominator n−1).
pub fn sample_covariance(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mu = sample_mean(x);
    let mut cov = Tensor::zeros(vec![d, d]);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            for j in 0..d {
                cov.data_mut()[i * d + j] += (row[i] - mu[i]) * (row[j] - mu[j]);
            }
        }
    }
    for v in cov.data_mut() {
        *v /= (n - 1) as f64;
    }
    cov
}

/// Total variance: trace of the sample covariance.
pub fn trace_variance(x: &Tensor) -> f64 {
    let cov = sample_covariance(x);
    let d = x.cols();
    (0..d).map(|i| cov.data()[i * d + i]).sum()
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// `[-1e-10, 0)` clamp to zero; anything lower is an error.
fn psd_sqrt(m: &Tensor) -> Result<Tensor, MetricError> {
    let d = m.rows();
    let (vals, vecs) = sym_eig(m).map_err(|_| MetricError::RankDeficient(f64::NAN))?;
    let mut roots = Vec::with_capacity(d);
    for &l in &vals {
        if l < -1e-10 {
            return Err(MetricError::RankDeficient(l));
        }
        roots.push(l.max(0.0).sqrt());
    }
    // V diag(√λ) Vᵀ
    let mut scaled = vecs.clone();
    for r in 0..d {
        for c in 0..d {
            scaled.data_mut()[r * d + c] *= roots[c];
        }
    }
    Ok(scaled.matmul_nt(&vecs))
}

/// Squared Bures–Wasserstein distance between the Gaussian fits of two
/// sample sets: `‖μ_P − μ_Q‖² + tr(Σ_P + Σ_Q − 2(Σ_Q^{1/2} Σ_P Σ_Q^{1/2})^{1/2})`.
pub fn bw2_gaussian(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    let d = x.cols();
    if x.cols() != y.cols() {
        return Err(MetricError::DimMismatch(x.cols(), y.cols()));
    }
    for s in [x, y] {
        if s.rows() < d + 1 {
            return Err(MetricError::TooFewSamples { need: d + 1, got: s.rows() });
        }
    }
    let (mp, mq) = (sample_mean(x), sample_mean(y));
    let (sp, sq) = (sample_covariance(x), sample_covariance(y));
    let mean_term: f64 = mp.iter().zip(&mq).map(|(a, b)| (a - b) * (a - b)).sum();

    let sq_root = psd_sqrt(&sq)?;
    let inner = sq_root.matmul(&sp).matmul(&sq_root);
    let cross = psd_sqrt(&inner)?;
    let mut tr = 0.0;
    for i in 0..d {
        tr += sp.data()[i * d + i] + sq.data()[i * d + i] - 2.0 * cross.data()[i * d + i];
    }
    Ok(mean_term + tr)
}

/// Bures–Wasserstein unexplained variance percentage:
/// `100 · BW²(X, Y) / (½ tr Σ_X)`.
pub fn bw_uvp(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    let bw2 = bw2_gaussian(x, y)?;
    let denom = 0.5 * trace_variance(x);
    if denom <= 0.0 {
        return Err(MetricError::NonPositiveVariance(denom));
    }
    Ok(100.0 * bw2 / denom)
}

/// Backward L2 unexplained variance percentage:
/// `100 · τ² E_{ρ_{k+1}}‖∇F̂ − ∇F*‖² / Var(ρ_k)`.
///
/// Gradient fields are closures over points; `var_prev` is the trace
/// variance of the previous step's distribution.
pub fn l2_uvp(
    grad_hat: &dyn Fn(&[f64]) -> Vec<f64>,
    grad_star: &dyn Fn(&[f64]) -> Vec<f64>,
    samples_next: &Tensor,
    var_prev: f64,
    tau: f64,
) -> Result<f64, MetricError> {
    if var_prev <= 0.0 {
        return Err(MetricError::NonPositiveVariance(var_prev));
    }
    let n = samples_next.rows();
    if n == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let mut acc = 0.0;
    for r in 0..n {
        let p = samples_next.row(r);
        let gh = grad_hat(p);
        let gs = grad_star(p);
        acc += gh.iter().zip(&gs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(100.0 * tau * tau * (acc / n as f64) / var_prev)
}

/// Kernel bandwidth for MMD².
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// σ² = mean squared pairwise distance over all distinct pairs of the
    /// pooled batch.
    Adaptive,
}

impl std::fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bandwidth::Fixed(s) => write!(f, "fixed:{s}"),
            Bandwidth::Adaptive => write!(f, "adaptive"),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased MMD² with Gaussian kernel `k(x,y) = exp(−‖x−y‖²/(2σ²))`:
/// off-diagonal within-set sums over `N(N−1)` and `M(M−1)`, cross term
/// `−2/(NM)`. May be slightly negative, as unbiased estimators are.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64, MetricError> {
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(MetricError::TooFewSamples { need: 2, got: n.min(m) });
    }
    if x.cols() != y.cols() {
        return Err(MetricError::DimMismatch(x.cols(), y.cols()));
    }
    let sigma2 = match bandwidth {
        Bandwidth::Fixed(s) => s * s,
        Bandwidth::Adaptive => {
            // Pool both sets; average squared distance over distinct pairs.
            let total = n + m;
            let row = |i: usize| if i < n { x.row(i) } else { y.row(i - n) };
            let mut acc = 0.0;
            for i in 0..total {
                for j in i + 1..total {
                    acc += sq_dist(row(i), row(j));
                }
            }
            acc / (total * (total - 1) / 2) as f64
        }
    };
    let kern = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma2)).exp();

    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += kern(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += kern(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += kern(x.row(i), y.row(j));
        }
    }
    Ok(xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64)
}

/// Resample rows with replacement to `n` rows (seeded), used to equalize
/// set sizes before exact transport.
pub fn resample_rows(x: &Tensor, n: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = x.cols();
    let mut out = Tensor::zeros(vec![n, d]);
    for r in 0..n {
        let src = rng.gen_range(0..x.rows());
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(x.row(src));
    }
    out
}

/// Per-step metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub k: usize,
    pub emd: f64,
    pub w2: f64,
    pub bw_uvp_percent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2_uvp_percent: Option<f64>,
    pub mmd2: f64,
}

/// Estimation metadata carried alongside the per-step values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricMeta {
    pub eval_samples: usize,
    pub bandwidth: String,
    pub resampled: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_step: Vec<StepMetrics>,
    pub meta: MetricMeta,
}

impl MetricReport {
    /// Fixed-order table: k, emd, w2, bw_uvp, l2_uvp, mmd2.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "k        emd             w2              bw_uvp%         l2_uvp%         mmd2\n",
        );
        for s in &self.per_step {
            let l2 = match s.l2_uvp_percent {
                Some(v) => format!("{v:<15.6}"),
                None => format!("{:<15}", "-"),
            };
            out.push_str(&format!(
                "{:<8} {:<15.6} {:<15.6} {:<15.6} {} {:<15.6e}\n",
                s.k, s.emd, s.w2, s.bw_uvp_percent, l2, s.mmd2
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
    }

    /// Brute-force optimal matching cost over all permutations.
    fn brute_force(x: &Tensor, y: &Tensor, power: i32) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for slot in 0..n {
                    let mut q: Vec<usize> =
                        p.iter().map(|&v| v + usize::from(v >= slot)).collect();
                    q.insert(0, slot);
                    out.push(q);
                }
            }
            out
        }
        let n = x.rows();
        let mut best = f64::INFINITY;
        for perm in permutations(n) {
            let mut total = 0.0;
            for (i, &j) in perm.iter().enumerate() {
                let d2 = sq_dist(x.row(i), y.row(j));
                total += if power == 1 { d2.sqrt() } else { d2 };
            }
            best = best.min(total / n as f64);
        }
        best
    }

    #[test]
    fn emd_of_identical_sets_is_zero() {
        let x = gaussian(20, 2, 0);
        assert_eq!(emd(&x, &x).unwrap(), 0.0);
        assert_eq!(w2_empirical(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn emd_singleton_is_point_distance() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let y = Tensor::matrix(1, 2, vec![3.0, 4.0]);
        assert!((emd(&x, &y).unwrap() - 5.0).abs() < 1e-15);
        assert!((w2_empirical(&x, &y).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn emd_matches_brute_force_on_small_sets() {
        for seed in 0..30 {
            let x = gaussian(2, 2, seed);
            let y = gaussian(2, 2, 100 + seed);
            let fast = emd(&x, &y).unwrap();
            let slow = brute_force(&x, &y, 1);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
        // n ≤ 4 for the acceptance-level check.
        for seed in 0..10 {
            let x = gaussian(4, 3, 200 + seed);
            let y = gaussian(4, 3, 300 + seed);
            assert!((emd(&x, &y).unwrap() - brute_force(&x, &y, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_matches_brute_force_on_small_sets() {
        for seed in 0..30 {
            let x = gaussian(3, 2, seed);
            let y = gaussian(3, 2, 500 + seed);
            let fast = w2_empirical(&x, &y).unwrap();
            let slow = brute_force(&x, &y, 2).sqrt();
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn unequal_counts_error_mentions_resampling() {
        let x = gaussian(3, 2, 0);
        let y = gaussian(4, 2, 1);
        let err = emd(&x, &y).unwrap_err();
        assert!(err.to_string().contains("resample"));
    }

    #[test]
    fn transport_metrics_satisfy_triangle_inequality() {
        for seed in 0..20 {
            let x = gaussian(8, 2, seed);
            let y = gaussian(8, 2, 40 + seed);
            let z = gaussian(8, 2, 80 + seed);
            let (xy, yz, xz) = (emd(&x, &y).unwrap(), emd(&y, &z).unwrap(), emd(&x, &z).unwrap());
            assert!(xz <= xy + yz + 1e-9);
            let (xy, yz, xz) = (
                w2_empirical(&x, &y).unwrap(),
                w2_empirical(&y, &z).unwrap(),
                w2_empirical(&x, &z).unwrap(),
            );
            assert!(xz <= xy + yz + 1e-9);
        }
    }

    #[test]
    fn transport_metrics_are_permutation_invariant() {
        let x = gaussian(10, 2, 3);
        let y = gaussian(10, 2, 4);
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| x.row(i).to_vec()).collect();
        rows.reverse();
        let xp = Tensor::matrix(10, 2, rows.concat());
        assert!((emd(&x, &y).unwrap() - emd(&xp, &y).unwrap()).abs() < 1e-12);
        assert!((w2_empirical(&x, &y).unwrap() - w2_empirical(&xp, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn emd_is_dominated_by_w2() {
        // Jensen: mean distance ≤ sqrt(mean squared distance) per matching.
        for seed in 0..100 {
            let x = gaussian(6, 2, seed);
            let y = gaussian(6, 2, 1000 + seed);
            assert!(emd(&x, &y).unwrap() <= w2_empirical(&x, &y).unwrap() + 1e-12);
        }
    }

    #[test]
    fn bw_uvp_of_identical_sets_vanishes() {
        for seed in 0..5 {
            let x = gaussian(200, 2, seed);
            assert!(bw_uvp(&x, &x).unwrap() < 1e-6);
        }
    }

    #[test]
    fn bw_uvp_of_shifted_gaussians_is_900_percent() {
        let n = 100_000;
        let x = gaussian(n, 2, 0);
        let mut y = gaussian(n, 2, 1);
        for r in 0..n {
            y.data_mut()[r * 2] += 3.0;
        }
        // BW² = 9, ½ tr Σ = 1 → 900%.
        let v = bw_uvp(&x, &y).unwrap();
        assert!((v - 900.0).abs() / 900.0 < 0.05, "{v}");
    }

    #[test]
    fn bw2_is_symmetric() {
        let x = gaussian(500, 3, 5);
        let y = gaussian(500, 3, 6).map(|v| 1.3 * v + 0.2);
        let a = bw2_gaussian(&x, &y).unwrap();
        let b = bw2_gaussian(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn l2_uvp_zero_for_matching_fields_and_exact_for_constant_gap() {
        let samples = gaussian(100, 1, 7);
        let g1 = |p: &[f64]| vec![2.0 * p[0]];
        let same = l2_uvp(&g1, &g1, &samples, 1.0, 0.1).unwrap();
        assert_eq!(same, 0.0);

        // Constant gradient gap c in 1D: 100 τ² c² / var.
        let c = 0.6;
        let var_prev = 1.7;
        let tau = 0.05;
        let gap = l2_uvp(&|p| vec![2.0 * p[0] + c], &g1, &samples, var_prev, tau).unwrap();
        let expect = 100.0 * tau * tau * c * c / var_prev;
        assert!((gap - expect).abs() < 1e-12);
    }

    #[test]
    fn l2_uvp_ignores_additive_potential_constants() {
        // Adding a constant to F̂ leaves ∇F̂ unchanged, so the metric cannot
        // see it: both closures below are gradients of F and F + 7.
        let samples = gaussian(50, 2, 8);
        let grad = |p: &[f64]| vec![p[0].cos(), 2.0 * p[1]];
        let a = l2_uvp(&grad, &grad, &samples, 1.0, 0.01).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn l2_uvp_rejects_nonpositive_variance() {
        let samples = gaussian(10, 1, 9);
        let g = |p: &[f64]| vec![p[0]];
        assert!(matches!(
            l2_uvp(&g, &g, &samples, 0.0, 0.1),
            Err(MetricError::NonPositiveVariance(_))
        ));
    }

    /// Direct triple-loop evaluation of the unbiased estimator.
    fn mmd2_naive(x: &Tensor, y: &Tensor, sigma2: f64) -> f64 {
        let kern = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma2)).exp();
        let (n, m) = (x.rows(), y.rows());
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += kern(x.row(i), x.row(j));
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += kern(y.row(i), y.row(j));
                }
            }
        }
        for i in 0..n {
            for j in 0..m {
                xy += kern(x.row(i), y.row(j));
            }
        }
        xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
    }

    #[test]
    fn mmd2_two_point_sets_match_direct_summation() {
        let x = Tensor::matrix(2, 1, vec![0.0, 2.0]);
        let y = Tensor::matrix(2, 1, vec![1.0, 3.0]);
        let got = mmd2(&x, &y, Bandwidth::Fixed(10.0)).unwrap();
        let oracle = mmd2_naive(&x, &y, 100.0);
        assert!((got - oracle).abs() < 1e-15);
        // Frozen from the direct double-sum at σ = 10: the unbiased
        // estimator is slightly negative here, as it may be.
        assert!((got - (-1.0120113092062955e-2)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn mmd2_of_identical_two_point_sets_reduces_to_kab_minus_one() {
        let x = Tensor::matrix(2, 1, vec![0.4, -1.1]);
        let sigma = 2.0;
        let got = mmd2(&x, &x, Bandwidth::Fixed(sigma)).unwrap();
        let oracle = mmd2_naive(&x, &x, sigma * sigma);
        assert!((got - oracle).abs() < 1e-15);
        let kab = (-sq_dist(&[0.4], &[-1.1]) / (2.0 * sigma * sigma)).exp();
        assert!((got - (kab - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn mmd2_matches_naive_on_small_sets() {
        for seed in 0..20 {
            let x = gaussian(7, 2, seed);
            let y = gaussian(9, 2, 50 + seed);
            let got = mmd2(&x, &y, Bandwidth::Fixed(10.0)).unwrap();
            let oracle = mmd2_naive(&x, &y, 100.0);
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd2_flattens_as_bandwidth_grows() {
        let x = gaussian(10, 2, 1);
        let y = gaussian(10, 2, 2).map(|v| v + 1.0);
        let big = mmd2(&x, &y, Bandwidth::Fixed(1e8)).unwrap();
        assert!(big.abs() < 1e-10, "{big}");
    }

    #[test]
    fn adaptive_bandwidth_uses_pooled_pairwise_distances() {
        // Two points in each set, constructed so the pooled mean squared
        // distance is easy to compute by hand.
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        let y = Tensor::matrix(2, 1, vec![2.0, 3.0]);
        // Pairwise squared distances among {0,1,2,3}: 1,4,9,1,4,1 → mean 10/3.
        let sigma2 = 10.0 / 3.0;
        let got = mmd2(&x, &y, Bandwidth::Adaptive).unwrap();
        let oracle = mmd2_naive(&x, &y, sigma2);
        assert!((got - oracle).abs() < 1e-15);
    }

    #[test]
    fn mmd2_needs_two_samples_per_set() {
        let one = gaussian(1, 2, 0);
        let two = gaussian(2, 2, 1);
        assert!(mmd2(&one, &two, Bandwidth::Fixed(1.0)).is_err());
    }

    #[test]
    fn resampling_equalizes_counts_deterministically() {
        let x = gaussian(11, 2, 3);
        let a = resample_rows(&x, 7, 9);
        let b = resample_rows(&x, 7, 9);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.rows(), 7);
    }

    #[test]
    fn report_table_has_fixed_column_order() {
        let report = MetricReport {
            per_step: vec![StepMetrics {
                k: 0,
                emd: 0.1,
                w2: 0.2,
                bw_uvp_percent: 3.0,
                l2_uvp_percent: None,
                mmd2: -1e-5,
            }],
            meta: MetricMeta {
                eval_samples: 250,
                bandwidth: "fixed:10".into(),
                resampled: false,
                seed: 0,
            },
        };
        let table = report.table();
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols, vec!["k", "emd", "w2", "bw_uvp%", "l2_uvp%", "mmd2"]);
    }
}
