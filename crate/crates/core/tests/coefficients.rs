use lobelens::linearizer::{closed_form_coefficients, expand_coefficients, lss_length, Segment};
use proptest::prelude::*;

fn segments(raw: &[(f64, f64)]) -> Vec<Segment> {
    raw.iter().map(|&(gain, intercept)| Segment { gain, intercept }).collect()
}

fn max_dev(order: usize, w: &[f64], lss: &[Segment]) -> f64 {
    let a = expand_coefficients(order, w, lss).unwrap();
    let b = closed_form_coefficients(order, w, lss).unwrap();
    assert_eq!(a.alphas.len(), b.alphas.len());
    a.alphas.iter().zip(&b.alphas).map(|(x, y)| (x - y).abs()).fold((a.beta - b.beta).abs(), f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn first_order_matches_closed_form(
        raw in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 3),
        w in -0.95f64..0.95,
    ) {
        prop_assert!(max_dev(1, &[w], &segments(&raw)) <= 1e-12);
    }

    #[test]
    fn second_order_matches_closed_form(
        raw in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 5),
        w in prop::collection::vec(-0.95f64..0.95, 2),
    ) {
        prop_assert!(max_dev(2, &w, &segments(&raw)) <= 1e-12);
    }

    #[test]
    fn fourth_order_has_nine_alphas(
        raw in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 9),
        w in prop::collection::vec(-0.5f64..0.5, 4),
    ) {
        let c = expand_coefficients(4, &w, &segments(&raw)).unwrap();
        prop_assert_eq!(c.alphas.len(), 9);
        prop_assert_eq!(lss_length(4), 9);
    }
}
