//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use lobelens::distmodel::{
    channel_lobe_table, enumerate_fss, lobe_params, multilayer_fss_growth, principal_sidelobe_count, target_span,
    D0Pair, Growth, Target,
};
use lobelens::eval::{diminishing_returns_report, evaluate, mixture_error, EvalArtifacts, EvalOptions};
use lobelens::gmm::{composition_pmf, enumerate_compositions, linear_combine, Gaussian};
use lobelens::linearizer::{build_pwl, closed_form_coefficients, expand_coefficients, CoeffSet, Segment};
use lobelens::rng::indexed_seed;
use lobelens::rnn::{forward_from, loss_and_gradient, train, Preset, RnnConfig, RnnWeights, TrainHyper};
use lobelens::scenario::{generate_dataset, LabelledSequence, ScenarioConfig, Status};
use lobelens_cli::pipeline::eval_stream;
use lobelens_cli::{PipelineConfig, Run};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EVAL_SEQUENCES: usize = 500;

const COEFF_TOL: f64 = 1e-12;
const MC_SAMPLES: usize = 100_000;
const MC_SE: f64 = 3.0;
const PMF_TOL: f64 = 1e-9;
const MAIN_BAND: (f64, f64) = (0.38, 0.45);
const SINGLE_BAND: (f64, f64) = (0.025, 0.055);
const DOUBLE_MAX: f64 = 0.01;
const SD_SPREAD: f64 = 0.01;
const AUC_GAP: f64 = 0.03;
const OUTPUT_L1: f64 = 0.15;
const STATE_RMSE: f64 = 0.05;
const IDENTITY_TOL: f64 = 1e-12;
const ERROR_REL: f64 = 0.20;
const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Trained 1-layer order-1 nets shared between criteria.
#[derive(Default)]
struct Cache {
    nets: BTreeMap<(u64, u64), (RnnWeights, Vec<LabelledSequence>)>,
}

impl Cache {
    fn l1o1(&mut self, impact: f64, seed: u64) -> &(RnnWeights, Vec<LabelledSequence>) {
        self.nets.entry((impact.to_bits(), seed)).or_insert_with(|| {
            let cfg = ScenarioConfig::default().with_impact(impact);
            let ds = generate_dataset(&cfg, seed).unwrap();
            let hyper = TrainHyper { seed, ..TrainHyper::default() };
            let w = train(&RnnConfig::preset(Preset::L1O1, cfg.n_features, WIDTH), &ds.train, &hyper).unwrap().weights;
            (w, ds.all_sequences())
        })
    }

    fn evaluate(&mut self, impact: f64, seed: u64) -> EvalArtifacts {
        let cfg = ScenarioConfig::default().with_impact(impact);
        let stream = eval_stream(&cfg, seed, EVAL_SEQUENCES).unwrap();
        let (w, _) = self.l1o1(impact, seed);
        let pwl = build_pwl(8, 3.0).unwrap();
        evaluate(w, &pwl, &stream, &cfg.normal_mixture, &cfg.fault_mixture().unwrap(), &EvalOptions::default()).unwrap()
    }
}

fn segments(r: &mut ChaCha8Rng, n: usize) -> Vec<Segment> {
    (0..n).map(|_| Segment { gain: r.random_range(0.0..1.0), intercept: r.random_range(-1.0..1.0) }).collect()
}

fn coefficient_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for order in [1usize, 2] {
        for _ in 0..20 {
            let w: Vec<f64> = (0..order).map(|_| r.random_range(-0.95..0.95)).collect();
            let lss = segments(&mut r, 2 * order + 1);
            let a = expand_coefficients(order, &w, &lss).unwrap();
            let b = closed_form_coefficients(order, &w, &lss).unwrap();
            let dev = a.alphas.iter().zip(&b.alphas).map(|(x, y)| (x - y).abs()).fold((a.beta - b.beta).abs(), f64::max);
            worst = worst.max(dev);
        }
    }
    let w4: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let nine = expand_coefficients(4, &w4, &segments(&mut r, 9)).unwrap().alphas.len();
    outcome(worst <= COEFF_TOL && nine == 9, format!("max deviation {worst:.2e} over 40 draws; order 4 gives {nine} alphas"))
}

fn z_scores(samples: &[f64], claim: &Gaussian) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (
        (mean - claim.mean()) / (claim.sd() / n.sqrt()),
        (var - claim.variance()) / (claim.variance() * (2.0 / (n - 1.0)).sqrt()),
    )
}

fn gaussian_algebra() -> Outcome {
    let g = |r: &mut ChaCha8Rng| Gaussian::new(r.random_range(-5.0..5.0), r.random_range(0.2..3.0)).unwrap();
    let mut worst = 0.0f64;
    for case in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(indexed_seed(21, case));
        let terms: Vec<(f64, Gaussian)> = (0..r.random_range(1..=5)).map(|_| (r.random_range(-2.0..2.0), g(&mut r))).collect();
        let claim = linear_combine(&terms).unwrap();
        let s: Vec<f64> = (0..MC_SAMPLES).map(|_| terms.iter().map(|(a, x)| a * x.sample(&mut r)).sum()).collect();
        let (zm, zv) = z_scores(&s, &claim);
        worst = worst.max(zm.abs()).max(zv.abs());
    }
    for case in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(indexed_seed(22, case));
        let l = 2 * r.random_range(1..=2) + 1;
        let coeffs = CoeffSet {
            alphas: (0..l).map(|_| r.random_range(-1.0..1.0)).collect(),
            beta: r.random_range(-0.5..0.5),
            dropped_max: 0.0,
        };
        let d0 = D0Pair { normal: g(&mut r), fault: g(&mut r) };
        let u = r.random_range(-2.0..2.0);
        let all = enumerate_fss(l, false);
        let fss = &all[r.random_range(0..all.len())];
        let claim = lobe_params(fss, &coeffs, &d0, u).unwrap();
        let s: Vec<f64> = (0..MC_SAMPLES)
            .map(|_| coeffs.beta + (0..l).map(|j| u * coeffs.alphas[j] * d0.get(fss.slot(j)).sample(&mut r)).sum::<f64>())
            .collect();
        let (zm, zv) = z_scores(&s, &claim);
        worst = worst.max(zm.abs()).max(zv.abs());
    }
    let pmf: f64 =
        enumerate_compositions(9, 4).iter().map(|q| composition_pmf(9, &[0.28, 0.26, 0.24, 0.22], q).unwrap()).sum();
    outcome(
        worst <= MC_SE && (pmf - 1.0).abs() <= PMF_TOL,
        format!("max |z| {worst:.2} over 40 cases x mean/var; composition pmf sum {pmf:.12}"),
    )
}

fn table_one(cache: &mut Cache) -> Outcome {
    let cfg = ScenarioConfig::default();
    let (w, all) = cache.l1o1(15.0, SEEDS[0]).clone();
    let rows = channel_lobe_table(
        &w,
        &build_pwl(8, 3.0).unwrap(),
        &all,
        &cfg.normal_mixture,
        &cfg.fault_mixture().unwrap(),
        0,
    )
    .unwrap();
    let f = |case: &str| rows.iter().find(|r| r.case.to_string() == case).map_or(0.0, |r| r.rel_freq);
    let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    let main_ok = inside(f("NNN"), MAIN_BAND) && inside(f("FFF"), MAIN_BAND);
    let singles = ["NNF", "NFF", "FFN", "FNN"];
    let single_ok = singles.iter().all(|c| inside(f(c), SINGLE_BAND));
    let double = f("NFN") + f("FNF");
    let sds: Vec<f64> = rows.iter().map(|r| r.sd).collect();
    let (lo, hi) = sds.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &s| (a.min(s), b.max(s)));
    let spread = (hi - lo) / lo;
    outcome(
        main_ok && single_ok && double < DOUBLE_MAX && spread <= SD_SPREAD,
        format!(
            "{} sequences: NNN {:.4} FFF {:.4} (band {:?}, expected 0.3825 / 0.4325 under uniform onset); singles [{}]; NFN+FNF {:.4}; sd spread {:.1e}",
            all.len(),
            f("NNN"),
            f("FFF"),
            MAIN_BAND,
            singles.iter().map(|c| format!("{c} {:.4}", f(c))).collect::<Vec<_>>().join(", "),
            double,
            spread
        ),
    )
}

fn lobe_counts() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (g, want) in [
        (Growth::Layers(1), 4),
        (Growth::Layers(2), 8),
        (Growth::Layers(3), 12),
        (Growth::Order(1), 4),
        (Growth::Order(2), 8),
        (Growth::Order(4), 16),
    ] {
        let (l, n) = multilayer_fss_growth(g).unwrap();
        let listed = enumerate_fss(l, true).len() - 2;
        ok &= n == want && listed == want && principal_sidelobe_count(l) == want;
        parts.push(format!("{g:?}:{n}"));
    }
    for p in Preset::PAPER {
        let w = RnnWeights::init(&RnnConfig::preset(p, 9, WIDTH), 0).unwrap();
        let l = target_span(&w, Target::Readout).unwrap() + 1;
        let (layers, order) = p.layers_and_order();
        let expect = if layers > 1 { multilayer_fss_growth(Growth::Layers(layers)) } else { multilayer_fss_growth(Growth::Order(order)) };
        ok &= expect.unwrap().0 == l;
    }
    outcome(ok, format!("principal sidelobes {}; detailed-model spans agree for all five presets", parts.join(" ")))
}

fn fidelity(cache: &mut Cache) -> Outcome {
    let a = cache.evaluate(20.0, SEEDS[0]);
    let e = &a.evaluation;
    let gap = (e.rnn_auc - e.model_auc).abs();
    let rmse = e.state_rel_rmse.iter().copied().fold(0.0, f64::max);
    let low = cache.evaluate(10.0, SEEDS[0]).evaluation;
    outcome(
        gap <= AUC_GAP && e.output_l1 <= OUTPUT_L1 && rmse <= STATE_RMSE,
        format!(
            "20 dB: AUC gap {gap:.5}, output L1 {:.4}, h1 rel RMSE {rmse:.4}; 10 dB (reported only): AUC gap {:.5}, output L1 {:.4}",
            e.output_l1,
            (low.rnn_auc - low.model_auc).abs(),
            low.output_l1
        ),
    )
}

fn error_decomposition(cache: &mut Cache) -> Outcome {
    let mut ok = true;
    let mut worst_identity = 0.0f64;
    let mut parts = Vec::new();
    for impact in [15.0, 20.0] {
        let (mut predicted, mut empirical) = (0.0, 0.0);
        for seed in SEEDS {
            let a = cache.evaluate(impact, seed);
            let e = &a.evaluation;
            let lobes: f64 = e.decomposition.lobes.iter().map(|l| l.fp + l.fn_).sum();
            let mix = mixture_error(&a.detailed, 0.0, cache.l1o1(impact, seed).0.polarity).unwrap();
            worst_identity = worst_identity.max((lobes - mix).abs());
            predicted += e.predicted_error;
            empirical += e.rnn_error_rate;
            parts.push(format!("s{seed} {:.4}/{:.4}", e.predicted_error, e.rnn_error_rate));
        }
        let rel = (predicted - empirical).abs() / empirical;
        ok &= rel <= ERROR_REL;
        parts.push(format!("{impact} dB over seeds {:.4}/{:.4} ({:+.1}%)", predicted, empirical, 100.0 * (predicted - empirical) / empirical));
    }
    outcome(
        ok && worst_identity <= IDENTITY_TOL,
        format!("identity gap {worst_identity:.1e}; predicted/empirical {}", parts.join(", ")),
    )
}

fn diminishing_returns() -> Outcome {
    let cfg = ScenarioConfig::default().with_impact(15.0);
    let fault = cfg.fault_mixture().unwrap();
    let pwl = build_pwl(8, 3.0).unwrap();
    let configs: Vec<RnnConfig> =
        [Preset::L1O1, Preset::L2O1, Preset::L3O1].iter().map(|p| RnnConfig::preset(*p, cfg.n_features, WIDTH)).collect();
    let (mut g12, mut g23) = (0.0, 0.0);
    let mut side = [0.0; 3];
    for seed in SEEDS {
        let ds = generate_dataset(&cfg, seed).unwrap();
        let stream = eval_stream(&cfg, seed, EVAL_SEQUENCES).unwrap();
        let hyper = TrainHyper { seed, ..TrainHyper::default() };
        let rows = diminishing_returns_report(
            &configs,
            &ds.train,
            &stream,
            &cfg.normal_mixture,
            &fault,
            &hyper,
            &pwl,
            &EvalOptions::default(),
        )
        .unwrap();
        g12 += rows[1].auc_gain.unwrap() / SEEDS.len() as f64;
        g23 += rows[2].auc_gain.unwrap() / SEEDS.len() as f64;
        for (s, r) in side.iter_mut().zip(&rows) {
            *s += r.sidelobe_error / SEEDS.len() as f64;
        }
    }
    outcome(
        g12 >= g23 && side[0] < side[1] && side[1] < side[2],
        format!("mean AUC gain 1->2 {g12:+.5}, 2->3 {g23:+.5}; sidelobe error {:.4} < {:.4} < {:.4}", side[0], side[1], side[2]),
    )
}

fn gradient_check() -> (bool, String) {
    let mut r = ChaCha8Rng::seed_from_u64(301);
    let mut worst = 0.0f64;
    let cases = 24;
    for case in 0..cases {
        let n_features = r.random_range(1..=3);
        let mut cfg =
            RnnConfig::new(n_features, r.random_range(1..=3), [1, 2, 4][r.random_range(0..3)], r.random_range(1..=3)).unwrap();
        cfg.diagonal = case % 3 != 0;
        let mut w = RnnWeights::init(&cfg, case).unwrap();
        let params: Vec<f64> = w.flatten().iter().map(|_| r.random_range(-0.9..0.9)).collect();
        w.unflatten(&params);
        let len = r.random_range(3..=7);
        let row = |r: &mut ChaCha8Rng| (0..n_features).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let x: Vec<Vec<f64>> = (0..len).map(|_| row(&mut r)).collect();
        let y: Vec<Status> = (0..len).map(|_| if r.random_bool(0.5) { Status::F } else { Status::N }).collect();
        let init = (case % 2 == 1).then(|| {
            let warm: Vec<Vec<f64>> = (0..3).map(|_| row(&mut r)).collect();
            forward_from(&w, &warm, None).unwrap().1
        });
        let (_, grad, _) = loss_and_gradient(&w, &x, &y, init.as_ref()).unwrap();
        let loss = |p: &[f64]| {
            let mut v = w.clone();
            v.unflatten(p);
            loss_and_gradient(&v, &x, &y, init.as_ref()).unwrap().0
        };
        let h = 1e-5;
        let mut num = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            num.push((up - loss(&p)) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&num).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&grad).max(norm(&num)).max(1e-12));
    }
    (worst <= GRAD_TOL, format!("BPTT vs central differences {worst:.1e} over {cases} configs"))
}

fn determinism() -> (bool, String) {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 20;
    cfg.eval.sequences = 60;
    cfg.study_configs = vec![(1, 1), (2, 1)];
    let digests = |dir: &std::path::Path| {
        let mut run = Run::open(dir, cfg.clone()).unwrap();
        for step in ["gen", "train", "linearize", "model", "study"] {
            run.run_step(step).unwrap();
        }
        // compare may legitimately trip a tolerance on this short run; its artifacts are still written
        let _ = run.run_step("compare");
        run.manifest.artifacts().map(|(_, a)| (a.path.clone(), a.sha256.clone())).collect::<Vec<_>>()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (digests(a.path()), digests(b.path()));
    (da == db && !da.is_empty(), format!("{} artifacts bitwise identical across two pipeline runs", da.len()))
}

fn hygiene() -> Outcome {
    let (g_ok, g) = gradient_check();
    let sup: Vec<f64> = [8, 16, 32].iter().map(|&n| build_pwl(n, 3.0).unwrap().sup_error).collect();
    let halves = sup.windows(2).all(|w| w[1] <= 0.5 * w[0]);
    let (d_ok, d) = determinism();
    outcome(
        g_ok && halves && d_ok,
        format!("{g}; PWL sup error {:.4} -> {:.4} -> {:.4}; {d}", sup[0], sup[1], sup[2]),
    )
}

fn main() {
    let mut cache = Cache::default();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Cache) -> Outcome>)> = vec![
        ("coefficient oracle", Box::new(|_| coefficient_oracle())),
        ("gaussian algebra", Box::new(|_| gaussian_algebra())),
        ("lobe table", Box::new(table_one)),
        ("lobe-count laws", Box::new(|_| lobe_counts())),
        ("model fidelity", Box::new(fidelity)),
        ("error decomposition", Box::new(error_decomposition)),
        ("diminishing returns", Box::new(|_| diminishing_returns())),
        ("numerical hygiene", Box::new(|_| hygiene())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let o = run(&mut cache);
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {} ({:.1}s) {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
