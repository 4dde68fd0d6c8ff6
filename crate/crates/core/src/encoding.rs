//! Scalar grids and their categorical encodings.
//!
//! A trajectory with `T` states becomes a `T × M` grid whose rows are
//! `(s¹…sᵐ, r, a¹…aⁿ)`. Row 0 carries `r = 0` and the last row carries
//! `a = 0`. Each scalar is then mapped to a distribution over `B` uniform bins.

use rand::Rng;

use crate::dataset::{BinStats, TrajectoryRecord};
use crate::{invalid, Result};

/// Row-major `T × M` grid of scalars with `M = m + 1 + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub values: Vec<f64>,
    pub steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl ScalarGrid {
    pub fn width(&self) -> usize {
        self.state_dim + 1 + self.action_dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.values[t * w..(t + 1) * w]
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.width() + j]
    }
}

/// Flattens a record into the scalar grid.
pub fn scalarize(rec: &TrajectoryRecord) -> ScalarGrid {
    let (m, n, steps) = (rec.state_dim, rec.action_dim, rec.len());
    let w = m + 1 + n;
    let mut values = vec![0.0; steps * w];
    for t in 0..steps {
        let row = &mut values[t * w..(t + 1) * w];
        row[..m].copy_from_slice(rec.state(t));
        if t > 0 {
            row[m] = rec.rewards[t - 1];
        }
        if t + 1 < steps {
            row[m + 1..].copy_from_slice(rec.action(t));
        }
    }
    ScalarGrid {
        values,
        steps,
        state_dim: m,
        action_dim: n,
    }
}

/// Uniform bins of one variate: `b_i = lo + i·(hi − lo)/B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariateBins {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl VariateBins {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// `b_i` for `i ∈ 0..=B`.
    pub fn boundary(&self, i: usize) -> f64 {
        if i == self.bins {
            self.hi
        } else {
            self.lo + i as f64 * (self.hi - self.lo) / self.bins as f64
        }
    }

    /// Midpoint of 0-based bin `k`.
    pub fn center(&self, k: usize) -> f64 {
        0.5 * (self.boundary(k) + self.boundary(k + 1))
    }

    /// 0-based bin `k` with `b_k < x ≤ b_{k+1}`, clamped into `0..B`.
    pub fn index(&self, x: f64) -> usize {
        let last = self.bins - 1;
        let est = ((x - self.lo) / (self.hi - self.lo) * self.bins as f64).ceil() - 1.0;
        let mut k = if est.is_nan() || est < 0.0 {
            0
        } else if est > last as f64 {
            last
        } else {
            est as usize
        };
        while k > 0 && x <= self.boundary(k) {
            k -= 1;
        }
        while k < last && x > self.boundary(k + 1) {
            k += 1;
        }
        k
    }
}

pub fn encode_onehot(x: f64, vb: &VariateBins) -> Vec<f64> {
    let mut out = vec![0.0; vb.bins];
    encode_onehot_into(x, vb, &mut out);
    out
}

pub fn encode_onehot_into(x: f64, vb: &VariateBins, out: &mut [f64]) {
    out.fill(0.0);
    out[vb.index(x)] = 1.0;
}

/// Standard normal mass of the interval `[a, b]`, computed from the tail that
/// avoids cancellation.
fn normal_mass(a: f64, b: f64) -> f64 {
    let q = |z: f64| 0.5 * libm::erfc(z / std::f64::consts::SQRT_2);
    if a >= 0.0 {
        q(a) - q(b)
    } else if b <= 0.0 {
        q(-b) - q(-a)
    } else {
        1.0 - q(b) - q(-a)
    }
}

pub fn encode_gauss_hist(x: f64, vb: &VariateBins, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; vb.bins];
    encode_gauss_hist_into(x, vb, sigma, &mut out);
    out
}

/// Bin masses of `N(x, σ²)`, renormalized over `[b_0, b_B]`. Falls back to
/// one-hot when the in-range mass underflows.
pub fn encode_gauss_hist_into(x: f64, vb: &VariateBins, sigma: f64, out: &mut [f64]) {
    debug_assert!(sigma > 0.0);
    let mut total = 0.0;
    let mut prev = (vb.boundary(0) - x) / sigma;
    for (i, o) in out.iter_mut().enumerate() {
        let next = (vb.boundary(i + 1) - x) / sigma;
        *o = normal_mass(prev, next).max(0.0);
        total += *o;
        prev = next;
    }
    if total > 0.0 && total.is_finite() {
        for o in out.iter_mut() {
            *o /= total;
        }
    } else {
        encode_onehot_into(x, vb, out);
    }
}

const NORMALIZATION_TOL: f64 = 1e-4;

fn check_distribution(p: &[f64], vb: &VariateBins) -> Result<()> {
    if p.len() != vb.bins {
        return Err(invalid(format!("distribution has {} entries, expected {}", p.len(), vb.bins)));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| v < 0.0) {
        return Err(invalid(format!("distribution not normalized (sum {s})")));
    }
    Ok(())
}

/// `Σ p_k c_k` over bin centers.
pub fn decode_expectation(p: &[f64], vb: &VariateBins) -> Result<f64> {
    check_distribution(p, vb)?;
    Ok(expectation_unchecked(p, vb))
}

pub(crate) fn expectation_unchecked(p: &[f64], vb: &VariateBins) -> f64 {
    let w = vb.width();
    p.iter()
        .enumerate()
        .map(|(k, &pk)| pk * (vb.lo + (k as f64 + 0.5) * w))
        .sum()
}

/// Draws bin `k` with probability `p_k` and returns its center.
pub fn decode_sample<R: Rng + ?Sized>(p: &[f64], vb: &VariateBins, rng: &mut R) -> Result<f64> {
    check_distribution(p, vb)?;
    Ok(sample_unchecked(p, vb, rng))
}

pub(crate) fn sample_unchecked<R: Rng + ?Sized>(p: &[f64], vb: &VariateBins, rng: &mut R) -> f64 {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = p.len() - 1;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            pick = k;
            break;
        }
    }
    // never land on a zero-probability tail bin through rounding
    while p[pick] == 0.0 && pick > 0 {
        pick -= 1;
    }
    vb.center(pick)
}

/// How scalars become bin distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Encoder {
    OneHot,
    /// Gaussian histogram with `σ = sigma_frac × bin width`.
    GaussHist { sigma_frac: f64 },
}

pub const DEFAULT_SIGMA_FRAC: f64 = 0.75;

impl Default for Encoder {
    fn default() -> Self {
        Encoder::GaussHist {
            sigma_frac: DEFAULT_SIGMA_FRAC,
        }
    }
}

impl Encoder {
    pub fn encode_into(&self, x: f64, vb: &VariateBins, out: &mut [f64]) {
        match *self {
            Encoder::OneHot => encode_onehot_into(x, vb, out),
            Encoder::GaussHist { sigma_frac } => encode_gauss_hist_into(x, vb, sigma_frac * vb.width(), out),
        }
    }
}

/// `T × M × B` bin distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGrid {
    pub probs: Vec<f64>,
    pub steps: usize,
    pub variates: usize,
    pub bins: usize,
}

impl EncodedGrid {
    pub fn slice(&self, t: usize, j: usize) -> &[f64] {
        let off = (t * self.variates + j) * self.bins;
        &self.probs[off..off + self.bins]
    }
}

/// Encodes every cell of `grid` with the per-variate bins in `stats`.
pub fn encode_grid(grid: &ScalarGrid, stats: &BinStats, enc: Encoder) -> Result<EncodedGrid> {
    let w = grid.width();
    if stats.variates() != w {
        return Err(crate::Error::DimMismatch(format!(
            "grid has {w} variates, bin stats cover {}",
            stats.variates()
        )));
    }
    let b = stats.bins;
    let mut probs = vec![0.0; grid.steps * w * b];
    for t in 0..grid.steps {
        for j in 0..w {
            let off = (t * w + j) * b;
            enc.encode_into(grid.get(t, j), &stats.variate(j), &mut probs[off..off + b]);
        }
    }
    Ok(EncodedGrid {
        probs,
        steps: grid.steps,
        variates: w,
        bins: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bins(lo: f64, hi: f64, b: usize) -> VariateBins {
        VariateBins { lo, hi, bins: b }
    }

    fn linear_scan(x: f64, vb: &VariateBins) -> usize {
        for k in 0..vb.bins {
            if x <= vb.boundary(k + 1) {
                return k;
            }
        }
        vb.bins - 1
    }

    #[test]
    fn scalarize_layout_and_padding() {
        let rec = TrajectoryRecord::new("e", 1, 1, vec![2.0, 3.0], vec![0.5], vec![1.0]).unwrap();
        let g = scalarize(&rec);
        assert_eq!(g.values, vec![2.0, 0.0, 0.5, 3.0, 1.0, 0.0]);
        let zero = TrajectoryRecord::new("e", 1, 1, vec![0.0; 2], vec![0.0], vec![0.0]).unwrap();
        assert_eq!(scalarize(&zero).values, vec![0.0; 6]);
    }

    #[test]
    fn onehot_examples() {
        let vb = bins(0.0, 2.0, 2);
        assert_eq!(encode_onehot(0.5, &vb), vec![1.0, 0.0]);
        assert_eq!(encode_onehot(-7.0, &vb), vec![1.0, 0.0]);
        assert_eq!(encode_onehot(9.0, &vb), vec![0.0, 1.0]);
        // x == b_1 falls in the lower bin
        assert_eq!(encode_onehot(1.0, &vb), vec![1.0, 0.0]);
    }

    #[test]
    fn onehot_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vb = bins(-1.3, 2.9, 37);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-2.0..3.5);
            let v = encode_onehot(x, &vb);
            assert_eq!(v.iter().filter(|&&p| p == 1.0).count(), 1);
            assert_eq!(v.iter().position(|&p| p == 1.0).unwrap(), linear_scan(x, &vb));
        }
        for k in 0..=37 {
            let x = vb.boundary(k);
            assert_eq!(vb.index(x), linear_scan(x, &vb));
        }
    }

    /// Trapezoid integration of the Gaussian density over each bin.
    fn trapezoid_hist(x: f64, vb: &VariateBins, sigma: f64) -> Vec<f64> {
        let pdf = |z: f64| (-(z - x) * (z - x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut out: Vec<f64> = (0..vb.bins)
            .map(|k| {
                let (a, b) = (vb.boundary(k), vb.boundary(k + 1));
                let n = 20_000;
                let h = (b - a) / n as f64;
                let mut s = 0.5 * (pdf(a) + pdf(b));
                for i in 1..n {
                    s += pdf(a + i as f64 * h);
                }
                s * h
            })
            .collect();
        let t: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= t);
        out
    }

    #[test]
    fn gauss_hist_symmetric_example_and_integration_oracle() {
        let vb = bins(0.0, 2.0, 2);
        let p = encode_gauss_hist(1.0, &vb, 0.75);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let vb = bins(-1.0, 1.0, 8);
        for &x in &[-1.2, -0.31, 0.0, 0.07, 0.66, 1.0] {
            let p = encode_gauss_hist(x, &vb, 0.75 * vb.width());
            let q = trapezoid_hist(x, &vb, 0.75 * vb.width());
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-8, "x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gauss_hist_delta_limit() {
        let vb = bins(0.0, 1.0, 10);
        for k in 0..10 {
            let p = encode_gauss_hist(vb.center(k), &vb, 1e-6 * vb.width());
            for (i, v) in p.iter().enumerate() {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gauss_hist_far_out_of_range_falls_back() {
        let vb = bins(0.0, 1.0, 4);
        let p = encode_gauss_hist(1e6, &vb, 1e-3);
        assert_eq!(p, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn decode_examples() {
        let vb = bins(0.0, 2.0, 2);
        assert_eq!(decode_expectation(&[0.0, 1.0], &vb).unwrap(), 1.5);
        assert_eq!(decode_expectation(&[0.5, 0.5], &vb).unwrap(), 1.0);
        assert!(decode_expectation(&[0.5, 0.6], &vb).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(decode_sample(&[1.0, 0.0], &vb, &mut rng).unwrap(), 0.5);
        }
    }

    #[test]
    fn decode_sample_frequencies() {
        let vb = bins(0.0, 4.0, 4);
        let p = [0.1, 0.4, 0.2, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let c = decode_sample(&p, &vb, &mut rng).unwrap();
            counts[vb.index(c)] += 1;
        }
        for k in 0..4 {
            assert!((counts[k] as f64 / n as f64 - p[k]).abs() < 0.01);
        }
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| decode_sample(&p, &vb, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn roundtrip_grid_sweep() {
        let vb = bins(-3.0, 5.0, 64);
        let half = vb.width() / 2.0;
        for i in 0..=10_000 {
            let x = -3.0 + 8.0 * i as f64 / 10_000.0;
            let y = decode_expectation(&encode_onehot(x, &vb), &vb).unwrap();
            assert!((y - x).abs() <= half + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn encoders_produce_distributions(x in -10.0f64..10.0, lo in -5.0f64..0.0, span in 0.1f64..8.0, b in 2usize..64) {
            let vb = bins(lo, lo + span, b);
            for p in [encode_onehot(x, &vb), encode_gauss_hist(x, &vb, 0.75 * vb.width())] {
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn roundtrip_error_bounds(u in 0.0f64..1.0, lo in -5.0f64..0.0, span in 0.1f64..8.0, b in 2usize..128, sf in 0.05f64..1.0) {
            let vb = bins(lo, lo + span, b);
            let x = lo + u * span;
            let one = decode_expectation(&encode_onehot(x, &vb), &vb).unwrap();
            prop_assert!((one - x).abs() <= vb.width() / 2.0 + 1e-12);
            let g = decode_expectation(&encode_gauss_hist(x, &vb, sf * vb.width()), &vb).unwrap();
            prop_assert!((g - x).abs() <= vb.width() + 1e-12);
        }

        #[test]
        fn binning_is_monotone(a in -10.0f64..10.0, d in 0.0f64..5.0, b in 2usize..50) {
            let vb = bins(-3.0, 4.0, b);
            prop_assert!(vb.index(a) <= vb.index(a + d));
        }

        #[test]
        fn scalarize_slices_back(m in 1usize..4, n in 1usize..3, t in 2usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..t * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..(t - 1) * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..t - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rec = TrajectoryRecord::new("e", m, n, s.clone(), a.clone(), r.clone()).unwrap();
            let g = scalarize(&rec);
            prop_assert_eq!(g.width(), m + n + 1);
            for i in 0..t {
                prop_assert_eq!(&g.row(i)[..m], &s[i * m..(i + 1) * m]);
                if i > 0 { prop_assert_eq!(g.get(i, m), r[i - 1]); } else { prop_assert_eq!(g.get(0, m), 0.0); }
                if i + 1 < t { prop_assert_eq!(&g.row(i)[m + 1..], &a[i * n..(i + 1) * n]); }
                else { prop_assert!(g.row(i)[m + 1..].iter().all(|&v| v == 0.0)); }
            }
        }
    }
}
