//! Metrics, lobe error attribution and the depth/order study.

use serde::{Deserialize, Serialize};

use crate::distmodel::{
    compose_detailed, run_main_model, ComposeOptions, DetailedDistribution, FeatureMoments, LobeKind, MainModelRun,
    Target, Weighting,
};
use crate::error::{invalid, Error, Result};
use crate::gmm::GaussianMixture;
use crate::histogram::Histogram;
use crate::linearizer::PwlApprox;
use crate::rnn::{forward, train, Polarity, RnnConfig, RnnWeights, Trace, TrainHyper};
use crate::scenario::{stream_features, stream_labels, LabelledSequence, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn errors(&self) -> u64 {
        self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_).max(1) as f64
    }

    pub fn fpr(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn).max(1) as f64
    }
}

fn check_pair(scores: &[f64], labels: &[Status]) -> Result<()> {
    if scores.is_empty() {
        return Err(invalid("empty input"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), actual: labels.len(), context: "scores vs labels" });
    }
    Ok(())
}

/// Fault is the positive class: predicted F iff score > threshold.
pub fn confusion(scores: &[f64], labels: &[Status], threshold: f64) -> Result<Confusion> {
    check_pair(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l.is_fault()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (fpr, tpr) from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweep over every unique score plus ±∞; trapezoidal area.
pub fn roc(scores: &[f64], labels: &[Status]) -> Result<RocCurve> {
    check_pair(scores, labels)?;
    let pos = labels.iter().filter(|l| l.is_fault()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("ROC needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]].is_fault() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

/// Accuracy at the best threshold of the sweep.
pub fn best_accuracy(scores: &[f64], labels: &[Status]) -> Result<f64> {
    let r = roc(scores, labels)?;
    let pos = labels.iter().filter(|l| l.is_fault()).count() as f64;
    let neg = labels.len() as f64 - pos;
    Ok(r
        .points
        .iter()
        .map(|(fpr, tpr)| (tpr * pos + (1.0 - fpr) * neg) / labels.len() as f64)
        .fold(0.0, f64::max))
}

/// Σ|p̂_a − p̂_b| over a shared binning of the joint range.
pub fn histogram_l1(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("empty input"));
    }
    let (lo, hi) = Histogram::joint_range(&[a, b]).ok_or_else(|| invalid("no finite samples"))?;
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let pa = Histogram::from_samples(a, lo, hi, bins)?.probabilities();
    let pb = Histogram::from_samples(b, lo, hi, bins)?.probabilities();
    Ok(pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum())
}

/// Histogram L1 between samples and a predicted mixture over the sample range.
pub fn mixture_l1(samples: &[f64], mix: &GaussianMixture, bins: usize) -> Result<f64> {
    cdf_l1(samples, |x| mix.cdf(x), bins)
}

/// Histogram L1 between samples and any predicted CDF over the sample range.
pub fn cdf_l1(samples: &[f64], cdf: impl Fn(f64) -> f64, bins: usize) -> Result<f64> {
    let (lo, hi) = Histogram::joint_range(&[samples]).ok_or_else(|| invalid("empty input"))?;
    let h = Histogram::from_samples(samples, lo, hi, bins)?;
    let p = h.probabilities();
    Ok((0..bins)
        .map(|i| {
            let (a, b) = h.edges(i);
            let a = if i == 0 { f64::NEG_INFINITY } else { a };
            let b = if i + 1 == bins { f64::INFINITY } else { b };
            let lo = if a == f64::NEG_INFINITY { 0.0 } else { cdf(a) };
            let hi = if b == f64::INFINITY { 1.0 } else { cdf(b) };
            (p[i] - (hi - lo)).abs()
        })
        .sum())
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

pub fn rms(a: &[f64]) -> f64 {
    (a.iter().map(|x| x * x).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobeError {
    pub fss: String,
    pub kind: LobeKind,
    pub weight: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    /// Aggregated per FSS.
    pub lobes: Vec<LobeError>,
    pub main_fp: f64,
    pub main_fn: f64,
    pub side_fp: f64,
    pub side_fn: f64,
    pub neglected: f64,
    pub total: f64,
}

impl ErrorDecomposition {
    pub fn main(&self) -> f64 {
        self.main_fp + self.main_fn
    }

    pub fn side(&self) -> f64 {
        self.side_fp + self.side_fn
    }
}

/// Mass predicted F given the CDF at the threshold.
fn fault_side(cdf: f64, polarity: Polarity) -> f64 {
    match polarity {
        Polarity::HighIsFault => 1.0 - cdf,
        Polarity::LowIsFault => cdf,
    }
}

/// Predicted error mass per lobe. Lobes whose current slot is F lose mass on
/// the normal side of the threshold (FN); N lobes on the fault side (FP).
pub fn decompose_errors(d: &DetailedDistribution, threshold: f64, polarity: Polarity) -> ErrorDecomposition {
    use std::collections::BTreeMap;
    let mut per: BTreeMap<String, LobeError> = BTreeMap::new();
    let (mut main_fp, mut main_fn, mut side_fp, mut side_fn, mut neglected) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for c in &d.components {
        let fault_side = fault_side(c.cdf(threshold), polarity);
        let (fp, fn_) = if c.fss.current().is_fault() {
            (0.0, c.weight * (1.0 - fault_side))
        } else {
            (c.weight * fault_side, 0.0)
        };
        match c.kind {
            LobeKind::Main => {
                main_fp += fp;
                main_fn += fn_;
            }
            LobeKind::PrincipalSide => {
                side_fp += fp;
                side_fn += fn_;
            }
            LobeKind::Neglected => neglected += fp + fn_,
        }
        let e = per.entry(c.fss.to_string()).or_insert(LobeError {
            fss: c.fss.to_string(),
            kind: c.kind,
            weight: 0.0,
            fp: 0.0,
            fn_: 0.0,
        });
        e.weight += c.weight;
        e.fp += fp;
        e.fn_ += fn_;
    }
    let total = main_fp + main_fn + side_fp + side_fn + neglected;
    ErrorDecomposition { lobes: per.into_values().collect(), main_fp, main_fn, side_fp, side_fn, neglected, total }
}

/// Error mass of the per-status mixtures, computed on the mixtures directly.
pub fn mixture_error(d: &DetailedDistribution, threshold: f64, polarity: Polarity) -> Result<f64> {
    let mut e = 0.0;
    for s in [Status::N, Status::F] {
        let mass = d.status_mass(s);
        if mass == 0.0 {
            continue;
        }
        let fault_side = fault_side(d.status_cdf(s, threshold), polarity);
        e += mass * if s.is_fault() { 1.0 - fault_side } else { fault_side };
    }
    Ok(e)
}

pub fn write_decomposition_csv<W: std::io::Write>(d: &ErrorDecomposition, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fss", "kind", "weight", "fp", "fn"])?;
    for l in &d.lobes {
        let kind = match l.kind {
            LobeKind::Main => "main",
            LobeKind::PrincipalSide => "principal-side",
            LobeKind::Neglected => "neglected",
        };
        out.write_record([l.fss.clone(), kind.into(), l.weight.to_string(), l.fp.to_string(), l.fn_.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Everything measured for one trained network on one evaluation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub label: String,
    pub layers: usize,
    pub order: usize,
    pub instants: usize,
    pub rnn_auc: f64,
    pub model_auc: f64,
    pub rnn_best_accuracy: f64,
    pub rnn_confusion: Confusion,
    pub model_confusion: Confusion,
    pub agreement: f64,
    pub output_l1: f64,
    /// Per-status (N, F) histogram L1 between the RNN output and the shape distribution.
    pub shape_l1: [f64; 2],
    /// Per layer-1 channel RMSE(model − RNN) / RMS(RNN).
    pub state_rel_rmse: Vec<f64>,
    pub rnn_error_rate: f64,
    pub predicted_error: f64,
    pub decomposition: ErrorDecomposition,
    pub main_separation: f64,
    pub independence_gap: f64,
}

#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub evaluation: Evaluation,
    pub trace: Trace,
    pub run: MainModelRun,
    /// Distribution used for the error decomposition.
    pub detailed: DetailedDistribution,
    /// Distribution used for the shape comparison.
    pub shape: DetailedDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub bins: usize,
    /// Weighting for the error decomposition.
    pub weighting: Weighting,
    /// Weighting for the per-status shape.
    pub shape_weighting: Weighting,
    pub principal_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            bins: 64,
            weighting: Weighting::Boundary,
            shape_weighting: Weighting::Joint,
            principal_only: false,
        }
    }
}

/// Compare a trained network with its main and detailed models on a stream.
pub fn evaluate(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    stream: &[LabelledSequence],
    normal: &GaussianMixture,
    fault: &GaussianMixture,
    opts: &EvalOptions,
) -> Result<EvalArtifacts> {
    let features = stream_features(stream);
    let labels = stream_labels(stream);
    let trace = forward(weights, &features)?;
    let run = run_main_model(weights, pwl, &features)?;
    let moments = FeatureMoments::from_mixtures(normal, fault, weights)?;
    let compose = |weighting| {
        compose_detailed(
            weights,
            pwl,
            &run,
            &labels,
            &moments,
            ComposeOptions { target: Target::Readout, weighting, principal_only: opts.principal_only, threshold: opts.threshold },
        )
    };
    let detailed = compose(opts.weighting)?;
    let shape = if opts.shape_weighting == opts.weighting { detailed.clone() } else { compose(opts.shape_weighting)? };
    let skip = detailed.fss_len - 1;
    let pol = weights.polarity;
    let thr = pol.oriented(opts.threshold);
    let lab = &labels[skip..];
    let rnn_scores: Vec<f64> = trace.output[skip..].iter().map(|&y| pol.oriented(y)).collect();
    let model_scores: Vec<f64> = run.output[skip..].iter().map(|&y| pol.oriented(y)).collect();
    let rnn_confusion = confusion(&rnn_scores, lab, thr)?;
    let model_confusion = confusion(&model_scores, lab, thr)?;
    let agreement = rnn_scores.iter().zip(&model_scores).filter(|(a, b)| (**a > thr) == (**b > thr)).count() as f64
        / lab.len() as f64;

    let state_rel_rmse = (0..weights.config.widths[0])
        .map(|c| {
            let r: Vec<f64> = trace.layers[0].state[skip..].iter().map(|h| h[c]).collect();
            let m: Vec<f64> = run.layers[0].state[skip..].iter().map(|h| h[c]).collect();
            rmse(&m, &r) / rms(&r).max(1e-12)
        })
        .collect();

    let mut shape_l1 = [0.0; 2];
    for (i, st) in [Status::N, Status::F].into_iter().enumerate() {
        let ys: Vec<f64> = (skip..labels.len()).filter(|&n| labels[n] == st).map(|n| trace.output[n]).collect();
        shape_l1[i] = if ys.is_empty() { f64::NAN } else { cdf_l1(&ys, |x| shape.status_cdf(st, x), opts.bins)? };
    }

    let decomposition = decompose_errors(&detailed, opts.threshold, pol);
    let main_profile = detailed
        .contexts
        .iter()
        .fold(vec![0.0; detailed.fss_len], |mut acc, c| {
            for (a, v) in acc.iter_mut().zip(c.kernel.lag_profile()) {
                *a += v * c.count as f64;
            }
            acc
        });
    let main_separation = crate::distmodel::separation_ratio(&main_profile).unwrap_or(0.0).abs();

    let evaluation = Evaluation {
        label: crate::rnn::Preset::from_layers_order(weights.config.n_layers(), weights.config.order)
            .map_or_else(|| format!("{}L-O{}", weights.config.n_layers(), weights.config.order), |p| p.label().into()),
        layers: weights.config.n_layers(),
        order: weights.config.order,
        instants: lab.len(),
        rnn_auc: roc(&rnn_scores, lab)?.auc,
        model_auc: roc(&model_scores, lab)?.auc,
        rnn_best_accuracy: best_accuracy(&rnn_scores, lab)?,
        rnn_confusion,
        model_confusion,
        agreement,
        output_l1: histogram_l1(&trace.output[skip..], &run.output[skip..], opts.bins)?,
        shape_l1,
        state_rel_rmse,
        rnn_error_rate: rnn_confusion.errors() as f64 / lab.len() as f64,
        predicted_error: decomposition.total,
        decomposition,
        main_separation,
        independence_gap: detailed.independence_gap,
    };
    Ok(EvalArtifacts { evaluation, trace, run, detailed, shape })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub evaluation: Evaluation,
    /// AUC change from the previous row.
    pub auc_gain: Option<f64>,
    pub sidelobe_error: f64,
    pub principal_sidelobes: usize,
}

/// Train and evaluate each config on the same data, in the given order.
pub fn diminishing_returns_report(
    configs: &[RnnConfig],
    train_set: &[LabelledSequence],
    eval_stream: &[LabelledSequence],
    normal: &GaussianMixture,
    fault: &GaussianMixture,
    hyper: &TrainHyper,
    pwl: &PwlApprox,
    opts: &EvalOptions,
) -> Result<Vec<StudyRow>> {
    if configs.len() < 2 {
        return Err(invalid("need at least two configurations"));
    }
    let mut rows: Vec<StudyRow> = Vec::with_capacity(configs.len());
    for cfg in configs {
        let trained = train(cfg, train_set, hyper)?;
        let ev = evaluate(&trained.weights, pwl, eval_stream, normal, fault, opts)?.evaluation;
        let auc_gain = rows.last().map(|p| ev.rnn_auc - p.evaluation.rnn_auc);
        rows.push(StudyRow {
            sidelobe_error: ev.decomposition.side(),
            principal_sidelobes: crate::distmodel::principal_sidelobe_count(
                crate::distmodel::target_span(&trained.weights, Target::Readout)? + 1,
            ),
            auc_gain,
            evaluation: ev,
        });
    }
    Ok(rows)
}

pub fn write_study_csv<W: std::io::Write>(rows: &[StudyRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "config",
        "layers",
        "order",
        "rnn_auc",
        "model_auc",
        "best_accuracy",
        "auc_gain",
        "main_error",
        "sidelobe_error",
        "principal_sidelobes",
        "rnn_error_rate",
    ])?;
    for r in rows {
        let e = &r.evaluation;
        out.write_record([
            e.label.clone(),
            e.layers.to_string(),
            e.order.to_string(),
            e.rnn_auc.to_string(),
            e.model_auc.to_string(),
            e.rnn_best_accuracy.to_string(),
            r.auc_gain.map_or(String::new(), |g| g.to_string()),
            e.decomposition.main().to_string(),
            r.sidelobe_error.to_string(),
            r.principal_sidelobes.to_string(),
            e.rnn_error_rate.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Minimal static SVG rendering.
pub mod svg {
    use std::fmt::Write;

    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    struct Frame {
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    }

    impl Frame {
        fn fit(series: &[(&str, Vec<(f64, f64)>)]) -> Self {
            let pts = series.iter().flat_map(|s| s.1.iter());
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for &(x, y) in pts {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
            if !(x1 > x0) {
                x1 = x0 + 1.0;
            }
            if !(y1 > y0) {
                y1 = y0 + 1.0;
            }
            Self { x0, x1, y0, y1 }
        }

        fn map(&self, x: f64, y: f64) -> (f64, f64) {
            (
                PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD),
                H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD),
            )
        }
    }

    fn header(title: &str, f: &Frame) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\
             <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\
             <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\
             <text x=\"{PAD}\" y=\"{}\">{:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\
             <text x=\"4\" y=\"{}\">{:.3}</text><text x=\"4\" y=\"{}\">{:.3}</text>",
            W / 2.0,
            escape(title),
            W - 2.0 * PAD,
            H - 2.0 * PAD,
            H - PAD + 14.0,
            f.x0,
            W - PAD,
            H - PAD + 14.0,
            f.x1,
            H - PAD,
            f.y0,
            PAD + 4.0,
            f.y1
        );
        s
    }

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    fn legend(s: &mut String, names: &[&str]) {
        for (i, n) in names.iter().enumerate() {
            let y = PAD + 14.0 + 14.0 * i as f64;
            let _ = write!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
                W - PAD - 110.0,
                y - 9.0,
                COLORS[i % COLORS.len()],
                W - PAD - 96.0,
                y,
                escape(n)
            );
        }
    }

    /// Polylines, one per series.
    pub fn lines(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
        let f = Frame::fit(series);
        let mut s = header(title, &f);
        for (i, (_, pts)) in series.iter().enumerate() {
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = f.map(x, y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = write!(
                s,
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                COLORS[i % COLORS.len()],
                path.join(" ")
            );
        }
        legend(&mut s, &series.iter().map(|x| x.0).collect::<Vec<_>>());
        s.push_str("</svg>\n");
        s
    }

    /// Step outlines of densities sharing one binning.
    pub fn histograms(title: &str, lo: f64, hi: f64, series: &[(&str, Vec<f64>)]) -> String {
        let lines_: Vec<(&str, Vec<(f64, f64)>)> = series
            .iter()
            .map(|(n, p)| {
                let w = (hi - lo) / p.len().max(1) as f64;
                let mut pts = vec![(lo, 0.0)];
                for (i, v) in p.iter().enumerate() {
                    let d = v / w;
                    pts.push((lo + i as f64 * w, d));
                    pts.push((lo + (i + 1) as f64 * w, d));
                }
                pts.push((hi, 0.0));
                (*n, pts)
            })
            .collect();
        lines(title, &lines_)
    }
}
