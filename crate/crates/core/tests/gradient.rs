use lobelens::rnn::{forward_from, loss_and_gradient, RnnConfig, RnnWeights};
use lobelens::scenario::Status;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn loss_at(weights: &RnnWeights, params: &[f64], x: &[Vec<f64>], y: &[Status], init: Option<&lobelens::rnn::State>) -> f64 {
    let mut w = weights.clone();
    w.unflatten(params);
    loss_and_gradient(&w, x, y, init).unwrap().0
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[test]
fn bptt_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..24 {
        let layers = rng.random_range(1..=3);
        let order = [1, 2, 4][rng.random_range(0..3)];
        let width = rng.random_range(1..=3);
        let n_features = rng.random_range(1..=3);
        let len = rng.random_range(3..=7);
        let mut cfg = RnnConfig::new(n_features, layers, order, width).unwrap();
        cfg.diagonal = case % 3 != 0;
        let mut w = RnnWeights::init(&cfg, case).unwrap();
        let params: Vec<f64> = w.flatten().iter().map(|_| rng.random_range(-0.9..0.9)).collect();
        w.unflatten(&params);
        let x: Vec<Vec<f64>> = (0..len).map(|_| (0..n_features).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<Status> = (0..len).map(|_| if rng.random_bool(0.5) { Status::F } else { Status::N }).collect();
        // every other case starts from a carried-in state
        let init = (case % 2 == 1).then(|| {
            let warm: Vec<Vec<f64>> = (0..3).map(|_| (0..n_features).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            forward_from(&w, &warm, None).unwrap().1
        });

        let (_, grad, _) = loss_and_gradient(&w, &x, &y, init.as_ref()).unwrap();
        let numeric: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut p = params.clone();
                p[i] += STEP;
                let up = loss_at(&w, &p, &x, &y, init.as_ref());
                p[i] -= 2.0 * STEP;
                let down = loss_at(&w, &p, &x, &y, init.as_ref());
                (up - down) / (2.0 * STEP)
            })
            .collect();
        let err = relative_error(&grad, &numeric);
        assert!(err <= TOL, "case {case} ({layers}L o{order} w{width}): relative error {err:e}");
        worst = worst.max(err);
    }
    println!("worst relative error {worst:e}");
}
