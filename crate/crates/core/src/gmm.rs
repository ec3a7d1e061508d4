//! One-dimensional Gaussian and Gaussian-mixture algebra.
//!
//! Mixtures serialize as `{"components": [{"w": .., "mean": .., "sd": ..}]}`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::histogram::Histogram;
use crate::rng;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian")]
pub struct Gaussian {
    mean: f64,
    sd: f64,
}

#[derive(Deserialize)]
struct RawGaussian {
    mean: f64,
    sd: f64,
}

impl TryFrom<RawGaussian> for Gaussian {
    type Error = Error;
    fn try_from(raw: RawGaussian) -> Result<Self> {
        Gaussian::new(raw.mean, raw.sd)
    }
}

impl Gaussian {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(invalid(format!("gaussian mean {mean}")));
        }
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(invalid(format!("gaussian sd must be > 0, got {sd}")));
        }
        Ok(Self { mean, sd })
    }

    pub fn standard() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        (-0.5 * z * z).exp() / (self.sd * (2.0 * PI).sqrt())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 1.0;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        0.5 * erfc(-(x - self.mean) / (self.sd * std::f64::consts::SQRT_2))
    }

    /// Upper tail P(X > x).
    pub fn sf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 0.0;
        }
        if x == f64::NEG_INFINITY {
            return 1.0;
        }
        0.5 * erfc((x - self.mean) / (self.sd * std::f64::consts::SQRT_2))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }

    /// Affine image a + b·X.
    pub fn affine(&self, offset: f64, scale: f64) -> Result<Self> {
        Self::new(offset + scale * self.mean, scale.abs() * self.sd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    #[serde(rename = "w")]
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

impl Component {
    pub fn gaussian(&self) -> Gaussian {
        Gaussian { mean: self.mean, sd: self.sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct GaussianMixture {
    components: Vec<Component>,
}

#[derive(Deserialize)]
struct RawMixture {
    components: Vec<Component>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;
    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.components)
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("mixture needs at least one component"));
        }
        for c in &components {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(invalid(format!("mixture weight {} outside (0, 1]", c.weight)));
            }
            Gaussian::new(c.mean, c.sd)?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn single(g: Gaussian) -> Self {
        Self { components: vec![Component { weight: 1.0, mean: g.mean, sd: g.sd }] }
    }

    /// Build from arbitrary non-negative weights, renormalizing and dropping
    /// zero-weight terms.
    pub fn from_weighted(terms: &[(f64, Gaussian)]) -> Result<Self> {
        let total: f64 = terms.iter().map(|(w, _)| *w).sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("mixture with zero total weight".into()));
        }
        let components = terms
            .iter()
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, g)| Component { weight: w / total, mean: g.mean, sd: g.sd })
            .collect::<Vec<_>>();
        // renormalized weights can drift by an ulp or two
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.sd * c.sd + (c.mean - m) * (c.mean - m)))
            .sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        mixture_pdf(x, self)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.weight * c.gaussian().cdf(x)).sum()
    }

    pub fn sf(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.weight * c.gaussian().sf(x)).sum()
    }

    /// Quadrature support: [min μ − k·σmax, max μ + k·σmax].
    pub fn support(&self, k: f64) -> (f64, f64) {
        let sd_max = self.components.iter().map(|c| c.sd).fold(0.0, f64::max);
        let lo = self.components.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
        (lo - k * sd_max, hi + k * sd_max)
    }

    /// Map every component through x ↦ offset + scale·x.
    pub fn affine(&self, offset: f64, scale: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let g = c.gaussian().affine(offset, scale)?;
                Ok(Component { weight: c.weight, mean: g.mean, sd: g.sd })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        self.components[chosen].gaussian().sample(rng)
    }
}

/// Σ w_k·N(x | μ_k, σ_k).
pub fn mixture_pdf(x: f64, mix: &GaussianMixture) -> f64 {
    mix.components.iter().map(|c| c.weight * c.gaussian().pdf(x)).sum()
}

/// Draw `n` samples: pick component k with probability w_k, then sample it.
pub fn sample_mixture(mix: &GaussianMixture, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed);
    (0..n).map(|_| mix.sample_one(&mut r)).collect()
}

/// Histogram of `n` mixture samples over the mixture's ±6σ support.
pub fn sample_histogram(mix: &GaussianMixture, n: usize, bins: usize, seed: u64) -> Result<Histogram> {
    let (lo, hi) = mix.support(6.0);
    Histogram::from_samples(&sample_mixture(mix, n, seed), lo, hi, bins)
}

/// Distribution of Σ sᵢXᵢ for independent Gaussian Xᵢ.
pub fn linear_combine(terms: &[(f64, Gaussian)]) -> Result<Gaussian> {
    if terms.is_empty() {
        return Err(invalid("linear_combine needs at least one term"));
    }
    let mean = terms.iter().map(|(s, g)| s * g.mean).sum();
    let var: f64 = terms.iter().map(|(s, g)| s * s * g.variance()).sum();
    if !(var > 0.0) {
        return Err(Error::Degenerate("all combination weights are zero".into()));
    }
    Gaussian::new(mean, var.sqrt())
}

/// Method-of-moments fit with the sample (n−1) standard deviation.
pub fn fit_single_gaussian(samples: &[f64]) -> Result<Gaussian> {
    if samples.len() < 2 {
        return Err(invalid("fit needs at least two samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("zero-variance samples".into()));
    }
    Gaussian::new(mean, sd)
}

/// Counts of each mixture component within a sample set of size m.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub counts: Vec<u32>,
}

impl Composition {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn size(&self) -> u32 {
        self.counts.iter().sum()
    }
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Multinomial probability (m! / Π q_k!) Π w_k^{q_k}.
pub fn composition_pmf(m: u32, weights: &[f64], q: &Composition) -> Result<f64> {
    if q.counts.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            actual: q.counts.len(),
            context: "composition length vs weights",
        });
    }
    if q.size() != m {
        return Err(invalid(format!("composition sums to {}, expected {m}", q.size())));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(invalid("weights are not on the simplex"));
    }
    let mut ln_p = ln_factorial(m);
    for (&c, &w) in q.counts.iter().zip(weights) {
        ln_p -= ln_factorial(c);
        if c > 0 {
            if w == 0.0 {
                return Ok(0.0);
            }
            ln_p += c as f64 * w.ln();
        }
    }
    Ok(ln_p.exp())
}

/// Every composition of m into k non-negative parts, in lexicographic order.
pub fn enumerate_compositions(m: u32, k: usize) -> Vec<Composition> {
    fn rec(left: u32, slots: usize, prefix: &mut Vec<u32>, out: &mut Vec<Composition>) {
        if slots == 1 {
            prefix.push(left);
            out.push(Composition::new(prefix.clone()));
            prefix.pop();
            return;
        }
        for c in (0..=left).rev() {
            prefix.push(c);
            rec(left - c, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    rec(m, k, &mut Vec::with_capacity(k), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> GaussianMixture {
        GaussianMixture::new(
            [-2.0, -1.0, 1.0, 2.0]
                .iter()
                .map(|&m| Component { weight: 0.25, mean: m, sd: 1.0 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_peak() {
        let mix = GaussianMixture::single(Gaussian::standard());
        assert!((mixture_pdf(0.0, &mix) - 0.398_942_280_4).abs() < 1e-9);
        let g = Gaussian::new(3.0, 0.7).unwrap();
        let peak = 1.0 / (0.7 * (2.0 * PI).sqrt());
        assert!((GaussianMixture::single(g).pdf(3.0) - peak).abs() < 1e-12);
    }

    #[test]
    fn four_component_value_and_mass() {
        let mix = four();
        // direct sum of the four normal densities at 0
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        let expected = 0.25 * (phi(2.0) + phi(1.0) + phi(-1.0) + phi(-2.0));
        assert!((mixture_pdf(0.0, &mix) - expected).abs() < 1e-12);
        assert!((expected - 0.147_981_0).abs() < 1e-6);

        let (lo, hi) = mix.support(8.0);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        // composite Simpson
        let mut s = mix.pdf(lo) + mix.pdf(hi);
        for i in 1..n {
            let x = lo + h * i as f64;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * mix.pdf(x);
        }
        let mass = s * h / 3.0;
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn rejects_bad_weights() {
        let bad = vec![Component { weight: 0.5, mean: 0.0, sd: 1.0 }];
        assert!(GaussianMixture::new(bad).is_err());
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(Gaussian::new(0.0, 0.0).is_err());
    }

    #[test]
    fn json_shape() {
        let mix = four();
        let s = serde_json::to_string(&mix).unwrap();
        assert!(s.starts_with(r#"{"components":[{"w":0.25,"mean":-2.0,"sd":1.0}"#));
        let back: GaussianMixture = serde_json::from_str(&s).unwrap();
        assert_eq!(back, mix);
        assert!(serde_json::from_str::<GaussianMixture>(r#"{"components":[{"w":0.4,"mean":0,"sd":1}]}"#).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let mix = GaussianMixture::single(Gaussian::standard());
        let xs = sample_mixture(&mix, 100_000, 11);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 3.0 / (1e5f64).sqrt());
        assert_eq!(xs, sample_mixture(&mix, 100_000, 11));

        let ys = sample_mixture(&four(), 100_000, 12);
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let se = (four().variance() / 1e5).sqrt();
        assert!(m.abs() < 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn histogram_matches_density() {
        let mix = four();
        let (lo, hi) = mix.support(6.0);
        let h = Histogram::from_samples(&sample_mixture(&mix, 1_000_000, 3), lo, hi, 64).unwrap();
        let p = h.probabilities();
        let l1: f64 = (0..64)
            .map(|i| {
                let (a, b) = h.edges(i);
                (p[i] - (mix.cdf(b) - mix.cdf(a))).abs()
            })
            .sum();
        assert!(l1 <= 0.02, "l1 {l1}");
    }

    #[test]
    fn linear_combine_cases() {
        let g = Gaussian::standard();
        let c = linear_combine(&[(0.5, g), (0.5, g)]).unwrap();
        assert!(c.mean().abs() < 1e-15);
        assert!((c.sd() - 0.5f64.sqrt()).abs() < 1e-12);

        let h = Gaussian::new(2.5, 0.3).unwrap();
        assert_eq!(linear_combine(&[(1.0, h)]).unwrap(), h);

        let c = linear_combine(&[(0.3, Gaussian::new(1.0, 2.0).unwrap()), (0.7, Gaussian::new(-1.0, 1.0).unwrap())])
            .unwrap();
        assert!((c.mean() + 0.4).abs() < 1e-12);
        assert!((c.variance() - 0.85).abs() < 1e-12);

        assert!(linear_combine(&[(0.0, g), (0.0, g)]).is_err());
        assert!(linear_combine(&[]).is_err());
    }

    #[test]
    fn linear_combine_monte_carlo() {
        let a = Gaussian::new(1.0, 2.0).unwrap();
        let b = Gaussian::new(-1.0, 1.0).unwrap();
        let mut r = rng::stream(99);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| 0.3 * a.sample(&mut r) + 0.7 * b.sample(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (0.85f64 / n as f64).sqrt();
        let se_var = 0.85 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean + 0.4).abs() < 3.0 * se_mean);
        assert!((var - 0.85).abs() < 3.0 * se_var);
    }

    #[test]
    fn fit_cases() {
        let g = fit_single_gaussian(&[-1.0, 1.0]).unwrap();
        assert_eq!(g.mean(), 0.0);
        assert!((g.sd() - 2f64.sqrt()).abs() < 1e-15);

        let xs: Vec<f64> = {
            let t = Gaussian::new(3.0, 0.5).unwrap();
            let mut r = rng::stream(5);
            (0..100_000).map(|_| t.sample(&mut r)).collect()
        };
        assert!((fit_single_gaussian(&xs).unwrap().mean() - 3.0).abs() < 0.01);
        assert!(matches!(fit_single_gaussian(&[2.0, 2.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(fit_single_gaussian(&[1.0]).is_err());
    }

    #[test]
    fn pmf_cases() {
        let p = composition_pmf(2, &[0.5, 0.5], &Composition::new(vec![1, 1])).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        let w = [0.1, 0.2, 0.3, 0.4];
        let p = composition_pmf(5, &w, &Composition::new(vec![5, 0, 0, 0])).unwrap();
        assert!((p - 0.1f64.powi(5)).abs() < 1e-15);
        assert!(composition_pmf(5, &w, &Composition::new(vec![1, 1, 1, 1])).is_err());
        assert!(composition_pmf(4, &w, &Composition::new(vec![1, 1, 2])).is_err());
    }

    #[test]
    fn pmf_sums_to_one_over_lattice() {
        for k in 1..=4usize {
            for m in 0..=9u32 {
                let w = vec![1.0 / k as f64; k];
                let total: f64 = enumerate_compositions(m, k)
                    .iter()
                    .map(|q| composition_pmf(m, &w, q).unwrap())
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "m={m} k={k} total={total}");
            }
        }
        // lattice size C(m+k-1, k-1)
        assert_eq!(enumerate_compositions(9, 4).len(), 220);
    }
}
