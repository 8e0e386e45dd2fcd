//! Small numerical helpers shared across modules: log-sum-exp, empirical
//! CDF distances, and goodness-of-fit statistics used by the diagnostics.

/// log(sum(exp(v))) computed against the running maximum.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// One-sample Kolmogorov-Smirnov statistic of `xs` against the CDF `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i as f64 + 1.0) / n - f).abs());
    }
    d
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> f64 {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical value of the one-sample KS statistic at significance `alpha`
/// for sample size `n` (asymptotic `c(alpha) / sqrt(n)`).
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c / (n as f64).sqrt()
}

/// Chi-square goodness-of-fit of observed coalescence times against
/// Geometric(p) on {1, 2, ...}. Singleton bins {1}, ..., {m} plus one tail
/// bin {> m}, with m chosen as large as possible while every bin keeps an
/// expected count of at least five. Returns `(statistic, dof)` with
/// dof = m (bins minus one; p is given, not estimated).
///
/// Meaningful only for p bounded away from 1: a near-degenerate geometric
/// leaves no mass for the tail bin.
pub fn geometric_gof(times: &[u64], p: f64) -> (f64, usize) {
    assert!(!times.is_empty() && p > 0.0 && p < 1.0);
    let n = times.len() as f64;
    let q = 1.0 - p;
    let cell = |k: usize| n * q.powi(k as i32 - 1) * p; // n * P(T = k)
    let tail = |m: usize| n * q.powi(m as i32); // n * P(T > m)
    let mut m = 1usize;
    while cell(m + 1) >= 5.0 && tail(m + 1) >= 5.0 && m < 10_000 {
        m += 1;
    }
    let mut observed = vec![0u64; m + 1]; // [k-1] holds T = k, [m] the tail
    for &t in times {
        let idx = if (t as usize) <= m { t as usize - 1 } else { m };
        observed[idx] += 1;
    }
    let mut stat = 0.0;
    for k in 1..=m {
        let diff = observed[k - 1] as f64 - cell(k);
        stat += diff * diff / cell(k);
    }
    let e_tail = tail(m);
    if e_tail > 0.0 {
        let diff = observed[m] as f64 - e_tail;
        stat += diff * diff / e_tail;
    }
    (stat, m)
}

/// Pearson sample correlation matrix of rows-as-observations data.
pub fn correlation_matrix(data: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let (n, d) = (data.nrows(), data.ncols());
    let mut means = vec![0.0; d];
    for j in 0..d {
        means[j] = data.column(j).sum() / n as f64;
    }
    let mut cov = nalgebra::DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = data[(i, a)] - means[a];
            for b in a..d {
                cov[(a, b)] += da * (data[(i, b)] - means[b]);
            }
        }
    }
    let mut corr = nalgebra::DMatrix::identity(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            let r = cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
            corr[(a, b)] = r;
            corr[(b, a)] = r;
        }
    }
    corr
}
