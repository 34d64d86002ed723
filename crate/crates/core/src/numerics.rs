//! Dense numeric kernel: row-major matrices, stable softmax, Gaussian
//! reparameterization, analytic KL against a standard normal, and a
//! counter-based seeded RNG.

use std::f64::consts::PI;

/// Row-major dense matrix of `f64`. Dimensions are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Logistic sigmoid, evaluated branch-wise so neither tail overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|x| x - lse).collect()
}

/// Writes `softmax(logits)` into `out` and returns `logsumexp(logits)`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        s += *o;
    }
    let inv = 1.0 / s;
    out.iter_mut().for_each(|o| *o *= inv);
    max + s.ln()
}

/// Diagonal Gaussian `N(mu, exp(log_var))`.
/// Sum of a stream accumulated as deviations from its first element, so a
/// run of `n` equal values sums to exactly `n * value`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnchoredSum {
    anchor: f64,
    deviations: f64,
    count: usize,
}

impl AnchoredSum {
    pub fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.anchor = x;
        } else {
            self.deviations += x - self.anchor;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum(&self) -> f64 {
        self.count as f64 * self.anchor + self.deviations
    }

    /// 0 for an empty stream.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.anchor + self.deviations / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(mu.len(), log_var.len(), "posterior dimension mismatch");
        Self { mu, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `z = mu + exp(0.5 * log_var) * eps`
    pub fn sample_reparameterized(&self, eps: &[f64]) -> Vec<f64> {
        assert_eq!(eps.len(), self.dim(), "eps dimension mismatch");
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    /// `KL(q || N(0, I))` in closed form.
    pub fn kl_standard_normal(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
    }

    /// Log density of `q` at `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), zi)| {
                let d = zi - m;
                -0.5 * ((2.0 * PI).ln() + lv + d * d / lv.exp())
            })
            .sum()
    }
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    z.iter()
        .map(|zi| -0.5 * ((2.0 * PI).ln() + zi * zi))
        .sum()
}

/// Weyl increment of SplitMix64 (the 64-bit golden ratio).
pub const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLITMIX_MUL1: u64 = 0xBF58_476D_1CE4_E5B9;
const SPLITMIX_MUL2: u64 = 0x94D0_49BB_1331_11EB;
const SUBSTREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
    z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 stream.
///
/// The i-th output (0-based) is `mix(key + (i + 1) * GAMMA)`, so a stream is
/// fully described by `(key, counter)` and reproduces bit-identically on every
/// platform. Normal draws use the Box-Muller transform on pairs of uniforms;
/// the second variate of each pair is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Independent stream identified by `path` under `seed`, e.g.
    /// `Rng::substream(seed, &[EPOCH_TAG, epoch, batch])`.
    pub fn substream(seed: u64, path: &[u64]) -> Self {
        let mut key = splitmix_mix(seed ^ SUBSTREAM_SALT);
        for &p in path {
            key = splitmix_mix(key ^ splitmix_mix(p.wrapping_add(SPLITMIX_GAMMA)));
        }
        Self::new(key)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        splitmix_mix(
            self.key
                .wrapping_add(self.counter.wrapping_mul(SPLITMIX_GAMMA)),
        )
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `0..n` by rejection on the top of the range.
    /// Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the radius argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// In-place Fisher-Yates shuffle (descending swap index).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchored_sum_is_exact_on_constant_runs() {
        let x = -(2000f64).ln();
        let mut acc = AnchoredSum::default();
        for _ in 0..37 {
            acc.push(x);
        }
        assert_eq!(acc.sum(), 37.0 * x);
        assert_eq!(acc.mean(), x);
        let mut acc = AnchoredSum::default();
        for v in [1.0, 2.0, 4.5] {
            acc.push(v);
        }
        assert_eq!(acc.sum(), 7.5);
        assert_eq!(acc.mean(), 2.5);
        assert_eq!(AnchoredSum::default().mean(), 0.0);
    }

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&[3.0; 4]);
        for v in out {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_shift_invariant() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
        let a = log_softmax(&x);
        let b = log_softmax(&shifted);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_large_logits() {
        let out = log_softmax(&[1000.0, 0.0]);
        assert!(out[0].abs() < 1e-300);
        assert_eq!(out[1], -1000.0);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_into_matches_log_softmax() {
        let x = [0.1, 2.0, -3.0, 0.7];
        let mut p = [0.0; 4];
        let lse = softmax_into(&x, &mut p);
        assert!((lse - logsumexp(&x)).abs() < 1e-14);
        for (pi, li) in p.iter().zip(log_softmax(&x)) {
            assert!((pi - li.exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert_eq!(sigmoid(0.0), 0.5);
        let tiny = sigmoid(-710.0);
        assert!(tiny > 0.0 && tiny <= 1e-300, "{tiny}");
        assert_eq!(sigmoid(710.0), 1.0);
        assert!(!sigmoid(-1e6).is_nan());
    }

    #[test]
    fn reparameterization_cases() {
        let q = GaussianPosterior::new(vec![1.0, -2.0], vec![0.3, -0.4]);
        assert_eq!(q.sample_reparameterized(&[0.0, 0.0]), vec![1.0, -2.0]);
        let unit = GaussianPosterior::new(vec![1.0, -2.0], vec![0.0, 0.0]);
        assert_eq!(unit.sample_reparameterized(&[0.5, 1.5]), vec![1.5, -0.5]);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(GaussianPosterior::new(vec![0.0; 3], vec![0.0; 3]).kl_standard_normal(), 0.0);
        let q = GaussianPosterior::new(vec![1.0, 0.0, 0.0], vec![0.0; 3]);
        assert_eq!(q.kl_standard_normal(), 0.5);
    }

    #[test]
    fn rng_determinism_and_substreams() {
        let a: Vec<f64> = Rng::new(42).normals(1000);
        let b: Vec<f64> = Rng::new(42).normals(1000);
        assert_eq!(a, b);
        let s1 = Rng::substream(42, &[1]).normals(16);
        let s2 = Rng::substream(42, &[2]).normals(16);
        assert_ne!(s1, s2);
        let s3 = Rng::substream(42, &[1, 0]).normals(16);
        assert_ne!(s1, s3);
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0; these are the published
        // reference values of the generator.
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(9);
        for n in 1..50u64 {
            for _ in 0..20 {
                assert!(rng.below(n) < n);
            }
        }
    }
}
