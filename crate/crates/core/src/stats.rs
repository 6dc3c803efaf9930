//! Statistical helpers shared by the samplers, estimators and test suites:
//! seeded stream derivation, Kolmogorov-Smirnov tests, least squares,
//! histograms and a KL-divergence estimator.

use serde::{Deserialize, Serialize};

/// SplitMix64 step; a bijection on u64 with good avalanche behavior.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-replica seed: hash of (base seed, replica index).
/// Injective in the index for a fixed base, so replica streams never share a
/// seed.
pub fn replica_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(index.wrapping_mul(0xA24BAED4963EE407)))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Survival function Q(t) = P(K > t) of the Kolmogorov distribution.
pub fn kolmogorov_q(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 0.3 {
        return 1.0; // series is numerically 1 here
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF, with the
/// Stephens small-sample correction in the p-value.
pub fn ks_test_cdf(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    assert!(!samples.is_empty());
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let t = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    KsResult { statistic: d, p_value: kolmogorov_q(t), n: xs.len() }
}

/// Two-sample Kolmogorov-Smirnov test (asymptotic p-value).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xa: Vec<f64> = a.to_vec();
    let mut xb: Vec<f64> = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < na && j < nb {
        let (fa, fb) = (i as f64 / na as f64, j as f64 / nb as f64);
        d = d.max((fa - fb).abs());
        if xa[i] <= xb[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    d = d.max((1.0 - (j as f64 / nb as f64)).abs().max(1.0 - i as f64 / na as f64));
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let t = d * (ne.sqrt() + 0.12 + 0.11 / ne.sqrt());
    KsResult { statistic: d, p_value: kolmogorov_q(t), n: na.min(nb) }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// First-lag autocorrelation coefficient.
pub fn lag1_autocorr(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    cov / var
}

/// One-sided z statistic for p1 > p2 with pooled variance
/// (k1/n1 vs k2/n2 successes).
pub fn two_proportion_z(k1: u64, n1: u64, k2: u64, n2: u64) -> f64 {
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return 0.0;
    }
    (p1 - p2) / se
}

/// Wilson score interval for a binomial proportion: (lower, upper) for
/// k successes out of n at z standard normal quantiles (z = 1.96 for 95%).
/// Behaves sensibly at k = 0 and k = n, unlike the Wald interval.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    assert!(n > 0 && k <= n);
    let (nf, p) = (n as f64, k as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r2: f64,
}

/// Weighted least-squares line fit. Weights are inverse variances; pass 1.0
/// for an ordinary fit.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    assert!(x.len() == y.len() && y.len() == w.len() && x.len() >= 3);
    let sw: f64 = w.iter().sum();
    let xb: f64 = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let yb: f64 = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - xb) * (x[i] - xb);
        sxy += w[i] * (x[i] - xb) * (y[i] - yb);
    }
    let slope = sxy / sxx;
    let intercept = yb - slope * xb;
    // residual-scaled slope error and weighted R^2
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..x.len() {
        let r = y[i] - intercept - slope * x[i];
        ss_res += w[i] * r * r;
        ss_tot += w[i] * (y[i] - yb) * (y[i] - yb);
    }
    let dof = (x.len() - 2) as f64;
    let slope_se = (ss_res / dof / sxx).sqrt();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    LineFit { slope, intercept, slope_se, r2 }
}

/// Uniform-bin histogram on [lo, hi); samples outside are counted in
/// `overflow` and excluded from the bins.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram1d {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl Histogram1d {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0);
        Histogram1d { lo, hi, counts: vec![0; bins], overflow: 0 }
    }

    pub fn add(&mut self, x: f64) {
        if x < self.lo || x >= self.hi || !x.is_finite() {
            self.overflow += 1;
            return;
        }
        let b = ((x - self.lo) / (self.hi - self.lo) * self.counts.len() as f64) as usize;
        let b = b.min(self.counts.len() - 1);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }
}

/// Plug-in KL divergence (nats) of binned samples against reference bin
/// masses, with the Miller-Madow bias correction. Empty sample bins
/// contribute zero; reference masses must be positive where counts are.
pub fn kl_divergence_binned(counts: &[u64], ref_masses: &[f64]) -> f64 {
    assert_eq!(counts.len(), ref_masses.len());
    let n: u64 = counts.iter().sum();
    assert!(n > 0);
    let nf = n as f64;
    let mut kl = 0.0;
    let mut occupied = 0usize;
    for (&c, &q) in counts.iter().zip(ref_masses) {
        if c == 0 {
            continue;
        }
        occupied += 1;
        let p = c as f64 / nf;
        assert!(q > 0.0, "sample mass in a bin with zero reference mass");
        kl += p * (p / q).ln();
    }
    // Miller-Madow: E[plug-in] ~ KL + (occupied - 1)/(2n)
    (kl - (occupied.saturating_sub(1)) as f64 / (2.0 * nf)).max(0.0)
}
