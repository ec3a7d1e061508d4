use lobelens::distmodel::{enumerate_fss, lobe_params, D0Pair};
use lobelens::gmm::{composition_pmf, enumerate_compositions, linear_combine, Gaussian};
use lobelens::linearizer::CoeffSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAMPLES: usize = 100_000;

/// Asserts sample mean and variance lie within 3 standard errors of the claim.
fn check_moments(samples: &[f64], claim: &Gaussian, what: &str) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = claim.sd() / n.sqrt();
    let se_var = claim.variance() * (2.0 / (n - 1.0)).sqrt();
    assert!((mean - claim.mean()).abs() <= 3.0 * se_mean, "{what}: mean {mean} vs {}", claim.mean());
    assert!((var - claim.variance()).abs() <= 3.0 * se_var, "{what}: var {var} vs {}", claim.variance());
}

fn random_gaussian(r: &mut ChaCha8Rng) -> Gaussian {
    Gaussian::new(r.random_range(-5.0..5.0), r.random_range(0.2..3.0)).unwrap()
}

#[test]
fn linear_combine_monte_carlo() {
    for case in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(lobelens::rng::indexed_seed(21, case));
        let terms: Vec<(f64, Gaussian)> =
            (0..r.random_range(1..=5)).map(|_| (r.random_range(-2.0..2.0), random_gaussian(&mut r))).collect();
        let claim = linear_combine(&terms).unwrap();
        let samples: Vec<f64> =
            (0..SAMPLES).map(|_| terms.iter().map(|(a, g)| a * g.sample(&mut r)).sum()).collect();
        check_moments(&samples, &claim, &format!("linear_combine case {case}"));
    }
}

#[test]
fn lobe_params_monte_carlo() {
    for case in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(lobelens::rng::indexed_seed(22, case));
        let p = r.random_range(1..=2);
        let l = 2 * p + 1;
        let coeffs = CoeffSet {
            alphas: (0..l).map(|_| r.random_range(-1.0..1.0)).collect(),
            beta: r.random_range(-0.5..0.5),
            dropped_max: 0.0,
        };
        let d0 = D0Pair { normal: random_gaussian(&mut r), fault: random_gaussian(&mut r) };
        let u = r.random_range(-2.0..2.0);
        let all = enumerate_fss(l, false);
        let fss = &all[r.random_range(0..all.len())];
        let claim = lobe_params(fss, &coeffs, &d0, u).unwrap();
        let samples: Vec<f64> = (0..SAMPLES)
            .map(|_| {
                coeffs.beta
                    + (0..l).map(|j| u * coeffs.alphas[j] * d0.get(fss.slot(j)).sample(&mut r)).sum::<f64>()
            })
            .collect();
        check_moments(&samples, &claim, &format!("lobe_params case {case} {fss}"));
    }
}

#[test]
fn composition_pmf_sums_to_one() {
    let weights = [0.28, 0.26, 0.24, 0.22];
    let total: f64 = enumerate_compositions(9, 4).iter().map(|q| composition_pmf(9, &weights, q).unwrap()).sum();
    assert!((total - 1.0).abs() <= 1e-9, "{total}");
}
