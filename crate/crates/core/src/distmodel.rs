//! The two parallel explanatory models.
//!
//! The main model runs next to the RNN and replaces every tanh by the
//! line-segment expansion selected from its own pre-activations. The detailed
//! model turns that run into distributions: for every fault status sequence
//! and every segment context it predicts one Gaussian lobe, weighted by how
//! often the two occur.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gmm::{composition_pmf, enumerate_compositions, fit_single_gaussian, Gaussian, GaussianMixture};
use crate::linearizer::{expand_coefficients, lss_length, CoeffSet, FrequencyTable, LssKey, PwlApprox, Segment};
use crate::rng::stream;
use crate::rnn::{LayerTrace, Mat, RnnWeights};
use crate::scenario::{LabelledSequence, Status};

/// Per-channel spatially averaged input distribution under each status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D0Pair {
    pub normal: Gaussian,
    pub fault: Gaussian,
}

impl D0Pair {
    pub fn get(&self, s: Status) -> Gaussian {
        match s {
            Status::N => self.normal,
            Status::F => self.fault,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialAverage {
    /// Single Gaussians fitted to averaged samples.
    pub d0: D0Pair,
    /// One Gaussian per component composition, weighted by its multinomial pmf.
    pub composition_normal: GaussianMixture,
    pub composition_fault: GaussianMixture,
}

/// Exact moments of S·z for iid features drawn from `mix`.
pub fn averaged_moments(mix: &GaussianMixture, s_row: &[f64]) -> Result<Gaussian> {
    let s1: f64 = s_row.iter().sum();
    let s2: f64 = s_row.iter().map(|s| s * s).sum();
    Gaussian::new(mix.mean() * s1, (mix.variance() * s2).sqrt())
}

pub fn exact_d0(normal: &GaussianMixture, fault: &GaussianMixture, s_row: &[f64]) -> Result<D0Pair> {
    Ok(D0Pair { normal: averaged_moments(normal, s_row)?, fault: averaged_moments(fault, s_row)? })
}

/// Mixture over compositions of the m features among the K components.
///
/// Exact for a uniform row; otherwise each composition uses exchangeable
/// moments (ΣS/m per draw for the mean, ΣS²/m for the variance).
pub fn composition_mixture(mix: &GaussianMixture, s_row: &[f64]) -> Result<GaussianMixture> {
    let m = s_row.len();
    if m == 0 {
        return Err(invalid("empty spatial-average row"));
    }
    let s1 = s_row.iter().sum::<f64>() / m as f64;
    let s2 = s_row.iter().map(|s| s * s).sum::<f64>() / m as f64;
    let comps = mix.components();
    let weights = mix.weights();
    let mut terms = Vec::new();
    for q in enumerate_compositions(m as u32, comps.len()) {
        let p = composition_pmf(m as u32, &weights, &q)?;
        if p == 0.0 {
            continue;
        }
        let mean: f64 = q.counts.iter().zip(comps).map(|(&c, k)| c as f64 * k.mean).sum::<f64>() * s1;
        let var: f64 = q.counts.iter().zip(comps).map(|(&c, k)| c as f64 * k.sd * k.sd).sum::<f64>() * s2;
        terms.push((p, Gaussian::new(mean, var.sqrt())?));
    }
    GaussianMixture::from_weighted(&terms)
}

pub fn spatial_average_dist(
    normal: &GaussianMixture,
    fault: &GaussianMixture,
    s_row: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<SpatialAverage> {
    if s_row.is_empty() {
        return Err(invalid("empty spatial-average row"));
    }
    let fit = |mix: &GaussianMixture, seed: u64| -> Result<Gaussian> {
        let mut rng = stream(seed);
        let xs: Vec<f64> = (0..n_samples)
            .map(|_| s_row.iter().map(|s| s * mix.sample_one(&mut rng)).sum())
            .collect();
        fit_single_gaussian(&xs)
    };
    Ok(SpatialAverage {
        d0: D0Pair {
            normal: fit(normal, crate::rng::child_seed(seed, "normal"))?,
            fault: fit(fault, crate::rng::child_seed(seed, "fault"))?,
        },
        composition_normal: composition_mixture(normal, s_row)?,
        composition_fault: composition_mixture(fault, s_row)?,
    })
}

/// A weight row factored into a scalar gain and an averaging row: row = u·S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGain {
    pub u: f64,
    pub s: Vec<f64>,
}

pub fn stage_gains(m: &Mat) -> Result<Vec<StageGain>> {
    (0..m.rows)
        .map(|r| {
            let row = m.row(r);
            let l1: f64 = row.iter().map(|x| x.abs()).sum();
            if l1 == 0.0 {
                return Err(Error::Degenerate(format!("all-zero weight row {r}")));
            }
            let sign = if row.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            let u = sign * l1;
            Ok(StageGain { u, s: row.iter().map(|x| x / u).collect() })
        })
        .collect()
}

/// Status string written oldest first; the last character is the current instant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Fss(pub Vec<Status>);

impl Fss {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Status at lag j (0 = current instant).
    pub fn slot(&self, j: usize) -> Status {
        self.0[self.0.len() - 1 - j]
    }

    pub fn current(&self) -> Status {
        self.slot(0)
    }

    pub fn transitions(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn kind(&self) -> LobeKind {
        match self.transitions() {
            0 => LobeKind::Main,
            1 => LobeKind::PrincipalSide,
            _ => LobeKind::Neglected,
        }
    }

    /// Labels at n−l+1 ..= n.
    pub fn window(labels: &[Status], n: usize, l: usize) -> Self {
        Fss(labels[n + 1 - l..=n].to_vec())
    }
}

impl fmt::Display for Fss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|s| write!(f, "{}", s.as_char()))
    }
}

impl FromStr for Fss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| Status::from_char(c).ok_or_else(|| invalid(format!("bad status character {c:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(Fss)
    }
}

impl From<Fss> for String {
    fn from(f: Fss) -> String {
        f.to_string()
    }
}

impl TryFrom<String> for Fss {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LobeKind {
    Main,
    PrincipalSide,
    Neglected,
}

/// All 2^l sequences in lexicographic order (N < F), or the main and
/// single-transition ones only.
pub fn enumerate_fss(l: usize, principal_only: bool) -> Vec<Fss> {
    if principal_only {
        let mut out = vec![Fss(vec![Status::N; l]), Fss(vec![Status::F; l])];
        for cut in 1..l {
            for (a, b) in [(Status::N, Status::F), (Status::F, Status::N)] {
                let mut v = vec![a; cut];
                v.extend(std::iter::repeat_n(b, l - cut));
                out.push(Fss(v));
            }
        }
        return out;
    }
    (0..1usize << l)
        .map(|bits| Fss((0..l).map(|i| if bits >> (l - 1 - i) & 1 == 1 { Status::F } else { Status::N }).collect()))
        .collect()
}

pub fn principal_sidelobe_count(l: usize) -> usize {
    2 * l.saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    Layers(usize),
    Order(usize),
}

/// (FSS length, principal sidelobe count).
pub fn multilayer_fss_growth(g: Growth) -> Result<(usize, usize)> {
    let l = match g {
        Growth::Layers(k) if (1..=3).contains(&k) => 2 * k + 1,
        Growth::Order(p) if matches!(p, 1 | 2 | 4) => 2 * p + 1,
        other => return Err(invalid(format!("unsupported growth {other:?}"))),
    };
    Ok((l, principal_sidelobe_count(l)))
}

/// FSS occurrences over a label stream, skipping the first l−1 instants.
pub fn fss_table(labels: &[Status], l: usize) -> FrequencyTable<Fss> {
    let mut t = FrequencyTable::new();
    for n in l.saturating_sub(1)..labels.len() {
        t.add(Fss::window(labels, n, l));
    }
    t
}

pub fn lobe_params(fss: &Fss, coeffs: &CoeffSet, d0: &D0Pair, u: f64) -> Result<Gaussian> {
    if fss.len() != coeffs.alphas.len() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.alphas.len(),
            actual: fss.len(),
            context: "FSS length vs coefficient count",
        });
    }
    let mut mean = coeffs.beta;
    let mut var = 0.0;
    for (j, a) in coeffs.alphas.iter().enumerate() {
        let g = d0.get(fss.slot(j));
        mean += u * a * g.mean();
        var += u * u * a * a * g.variance();
    }
    if !(var > 0.0) {
        return Err(Error::Degenerate(format!("lobe {fss} has zero variance")));
    }
    Gaussian::new(mean, var.sqrt())
}

pub fn separation_ratio(alphas: &[f64]) -> Result<f64> {
    let s2: f64 = alphas.iter().map(|a| a * a).sum();
    if s2 == 0.0 {
        return Err(Error::Degenerate("all coefficients are zero".into()));
    }
    Ok(alphas.iter().sum::<f64>() / s2.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobeRow {
    pub case: Fss,
    pub mean: f64,
    pub sd: f64,
    pub rel_freq: f64,
    pub count: u64,
}

/// One row per FSS of the table's length, sorted by mean.
pub fn lobe_table(fss: &FrequencyTable<Fss>, coeffs: &CoeffSet, d0: &D0Pair, u: f64) -> Result<Vec<LobeRow>> {
    let l = coeffs.alphas.len();
    let mut rows = enumerate_fss(l, false)
        .into_iter()
        .map(|f| {
            let g = lobe_params(&f, coeffs, d0, u)?;
            Ok(LobeRow {
                rel_freq: fss.relfreq(&f),
                count: fss.counts.get(&f).copied().unwrap_or(0),
                mean: g.mean(),
                sd: g.sd(),
                case: f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    Ok(rows)
}

/// Lobe table of one layer-1 channel over a labelled stream, using the
/// frequency-averaged coefficients of the channel's LSS table.
pub fn channel_lobe_table(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    stream: &[LabelledSequence],
    normal: &GaussianMixture,
    fault: &GaussianMixture,
    channel: usize,
) -> Result<Vec<LobeRow>> {
    let width = weights.config.widths[0];
    if channel >= width {
        return Err(invalid(format!("channel {channel} out of range for width {width}")));
    }
    let trace = crate::rnn::forward_stream(weights, stream)?;
    let lss = crate::linearizer::extract_lss(weights, &trace, pwl, 0)?;
    let coeffs = crate::linearizer::mean_field(&lss.tables[channel], |k| {
        crate::linearizer::channel_coefficients(weights, pwl, 0, channel, k)
    })?;
    let gain = &stage_gains(&weights.layers[0].input)?[channel];
    let sc = weights.scaling;
    let scaled = |m: &GaussianMixture| m.affine(-sc.center / sc.scale, 1.0 / sc.scale);
    let d0 = exact_d0(&scaled(normal)?, &scaled(fault)?, &gain.s)?;
    let labels = crate::scenario::stream_labels(stream);
    lobe_table(&fss_table(&labels, coeffs.alphas.len()), &coeffs, &d0, gain.u)
}

pub fn write_lobe_table_csv<W: std::io::Write>(rows: &[LobeRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["case", "mean", "sd", "rel_freq", "count"])?;
    for r in rows {
        out.write_record([
            r.case.to_string(),
            format!("{:.4}", r.mean),
            format!("{:.4}", r.sd),
            format!("{:.4}", r.rel_freq),
            r.count.to_string(),
        ])?;
    }
    let total: u64 = rows.iter().map(|r| r.count).sum();
    let freq: f64 = rows.iter().map(|r| r.rel_freq).sum();
    out.write_record(["total".to_string(), String::new(), String::new(), format!("{freq:.4}"), total.to_string()])?;
    out.flush()?;
    Ok(())
}

/// Parallel run of the linearized network.
#[derive(Debug, Clone, PartialEq)]
pub struct MainModelRun {
    /// Per layer: a (input drive), a′ (pre-activation), model state.
    pub layers: Vec<LayerTrace>,
    pub output: Vec<f64>,
    /// segments[k][n][c]: segment selected from the model's own a′.
    pub segments: Vec<Vec<Vec<u8>>>,
    /// Largest truncated-term coefficient seen.
    pub dropped_max: f64,
}

impl MainModelRun {
    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    pub fn lss_key(&self, layer: usize, n: usize, channel: usize, order: usize, zero_seg: u8) -> LssKey {
        LssKey((0..lss_length(order)).map(|j| self.segment_at(layer, n, j, channel, zero_seg)).collect())
    }

    fn segment_at(&self, layer: usize, n: usize, lag: usize, channel: usize, zero_seg: u8) -> u8 {
        if n >= lag {
            self.segments[layer][n - lag][channel]
        } else {
            zero_seg
        }
    }
}

type CoeffCache = HashMap<(usize, usize, LssKey), CoeffSet>;

fn cached_coeffs<'c>(
    cache: &'c mut CoeffCache,
    weights: &RnnWeights,
    pwl: &PwlApprox,
    layer: usize,
    channel: usize,
    key: LssKey,
) -> Result<&'c CoeffSet> {
    use std::collections::hash_map::Entry;
    match cache.entry((layer, channel, key)) {
        Entry::Occupied(e) => Ok(e.into_mut()),
        Entry::Vacant(e) => {
            let w: Vec<f64> = weights.layers[layer].feedback.iter().map(|m| m.get(channel, channel)).collect();
            let segs: Vec<Segment> = e.key().2 .0.iter().map(|&i| pwl.segments[i as usize]).collect();
            let c = expand_coefficients(weights.config.order, &w, &segs)?;
            Ok(e.insert(c))
        }
    }
}

/// Run the linearized model over raw feature rows from a zero state.
pub fn run_main_model(weights: &RnnWeights, pwl: &PwlApprox, features: &[Vec<f64>]) -> Result<MainModelRun> {
    weights.check_diagonal()?;
    let cfg = &weights.config;
    let p = cfg.order;
    let span = 2 * p;
    let zero_seg = pwl.select(0.0) as u8;
    let n_layers = cfg.n_layers();
    let mut run = MainModelRun {
        layers: vec![LayerTrace::default(); n_layers],
        output: Vec::with_capacity(features.len()),
        segments: vec![Vec::with_capacity(features.len()); n_layers],
        dropped_max: 0.0,
    };
    let mut cache = CoeffCache::new();
    for (n, row) in features.iter().enumerate() {
        if row.len() != cfg.n_features {
            return Err(Error::DimensionMismatch {
                expected: cfg.n_features,
                actual: row.len(),
                context: "feature vector width",
            });
        }
        let mut x: Vec<f64> = row.iter().map(|&v| weights.scaling.apply(v)).collect();
        for (k, layer) in weights.layers.iter().enumerate() {
            let width = cfg.widths[k];
            let a = layer.input.mul_vec(&x);
            let mut pre = a.clone();
            for (j, fb) in layer.feedback.iter().enumerate() {
                if n > j {
                    let past = &run.layers[k].state[n - 1 - j];
                    for c in 0..width {
                        pre[c] += fb.get(c, c) * past[c];
                    }
                }
            }
            run.segments[k].push(pre.iter().map(|&v| pwl.select(v) as u8).collect());
            run.layers[k].input.push(a);
            let mut m = vec![0.0; width];
            for (c, mc) in m.iter_mut().enumerate() {
                let key = run.lss_key(k, n, c, p, zero_seg);
                let cs = cached_coeffs(&mut cache, weights, pwl, k, c, key)?;
                run.dropped_max = run.dropped_max.max(cs.dropped_max);
                let mut v = cs.beta;
                for j in 0..=span.min(n) {
                    v += cs.alphas[j] * run.layers[k].input[n - j][c];
                }
                *mc = v;
            }
            run.layers[k].pre.push(pre);
            run.layers[k].state.push(m.clone());
            x = m;
        }
        run.output.push(weights.readout.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + weights.bias);
    }
    Ok(run)
}

pub fn run_main_model_stream(weights: &RnnWeights, pwl: &PwlApprox, seqs: &[LabelledSequence]) -> Result<MainModelRun> {
    let features: Vec<Vec<f64>> = seqs.iter().flat_map(|s| s.features.iter().cloned()).collect();
    run_main_model(weights, pwl, &features)
}

/// The quantity a detailed model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Readout,
    Channel { layer: usize, channel: usize },
}

/// How (FSS, context) pairs are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// relfreq(FSS) · relfreq(context)
    Product,
    /// Observed joint frequency.
    Joint,
    /// One lobe per FSS through the kernel averaged over that FSS's contexts.
    FssAveraged,
    /// Joint weights, with the current-instant segments of every context
    /// replaced by the segment averaged where the target comes closest to
    /// the threshold.
    Boundary,
}

/// Per-status mean and variance of one standardized feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub normal: Gaussian,
    pub fault: Gaussian,
}

impl FeatureMoments {
    pub fn from_mixtures(normal: &GaussianMixture, fault: &GaussianMixture, weights: &RnnWeights) -> Result<Self> {
        let sc = weights.scaling;
        let g = |m: &GaussianMixture| Gaussian::new((m.mean() - sc.center) / sc.scale, m.variance().sqrt() / sc.scale);
        Ok(Self { normal: g(normal)?, fault: g(fault)? })
    }

    pub fn get(&self, s: Status) -> Gaussian {
        match s {
            Status::N => self.normal,
            Status::F => self.fault,
        }
    }
}

/// Segment slots (layer, channel, lag) that determine the target at one instant.
#[derive(Debug, Clone, PartialEq)]
struct ContextLayout {
    slots: Vec<(usize, usize, usize)>,
    index: HashMap<(usize, usize, usize), usize>,
    top: usize,
    span: usize,
}

impl ContextLayout {
    fn new(weights: &RnnWeights, target: Target) -> Result<Self> {
        let cfg = &weights.config;
        let p2 = 2 * cfg.order;
        let (top, top_channels): (usize, Vec<usize>) = match target {
            Target::Readout => (cfg.n_layers() - 1, (0..*cfg.widths.last().unwrap()).collect()),
            Target::Channel { layer, channel } => {
                if layer >= cfg.n_layers() || channel >= cfg.widths[layer] {
                    return Err(invalid(format!("no channel {channel} in layer {layer}")));
                }
                (layer, vec![channel])
            }
        };
        let mut slots = Vec::new();
        for k in (0..=top).rev() {
            let reach = (top - k + 1) * p2;
            let chans: Vec<usize> = if k == top { top_channels.clone() } else { (0..cfg.widths[k]).collect() };
            for &c in &chans {
                for t in 0..=reach {
                    slots.push((k, c, t));
                }
            }
        }
        let index = slots.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Ok(Self { slots, index, top, span: (top + 1) * p2 })
    }

    fn key(&self, run: &MainModelRun, n: usize) -> Vec<u8> {
        self.slots.iter().map(|&(k, c, t)| run.segments[k][n - t][c]).collect()
    }
}

/// Affine map from the standardized inputs z(n−τ) to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    /// lags[τ][feature]
    pub lags: Vec<Vec<f64>>,
    pub offset: f64,
}

impl Kernel {
    fn zeros(span: usize, m: usize) -> Self {
        Self { lags: vec![vec![0.0; m]; span + 1], offset: 0.0 }
    }

    fn add_scaled(&mut self, other: &Kernel, s: f64) {
        for (a, b) in self.lags.iter_mut().zip(&other.lags) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        self.offset += s * other.offset;
    }

    pub fn apply(&self, z: impl Fn(usize) -> Vec<f64>) -> f64 {
        self.offset
            + self.lags.iter().enumerate().map(|(t, k)| k.iter().zip(z(t)).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
    }

    /// Per-lag aggregate weight Σ_features K[τ].
    pub fn lag_profile(&self) -> Vec<f64> {
        self.lags.iter().map(|k| k.iter().sum()).collect()
    }

    pub fn lobe(&self, fss: &Fss, moments: &FeatureMoments) -> Result<Gaussian> {
        if fss.len() != self.lags.len() {
            return Err(Error::DimensionMismatch { expected: self.lags.len(), actual: fss.len(), context: "FSS vs kernel span" });
        }
        let mut mean = self.offset;
        let mut var = 0.0;
        for (t, k) in self.lags.iter().enumerate() {
            let g = moments.get(fss.slot(t));
            mean += g.mean() * k.iter().sum::<f64>();
            var += g.variance() * k.iter().map(|x| x * x).sum::<f64>();
        }
        if !(var > 0.0) {
            // fully saturated context: a point mass, kept as a very narrow lobe
            var = 1e-18;
        }
        Gaussian::new(mean, var.sqrt())
    }
}

struct KernelBuilder<'a> {
    weights: &'a RnnWeights,
    pwl: &'a PwlApprox,
    layout: &'a ContextLayout,
    key: &'a [u8],
    cache: &'a mut CoeffCache,
    memo: HashMap<(usize, usize, usize), Kernel>,
}

impl KernelBuilder<'_> {
    /// Kernel of m_{k,c}(n−t).
    fn state(&mut self, k: usize, c: usize, t: usize) -> Result<Kernel> {
        if let Some(hit) = self.memo.get(&(k, c, t)) {
            return Ok(hit.clone());
        }
        let m = self.weights.config.n_features;
        let p2 = 2 * self.weights.config.order;
        let segs: Vec<u8> = (0..=p2).map(|j| self.key[self.layout.index[&(k, c, t + j)]]).collect();
        let cs = cached_coeffs(self.cache, self.weights, self.pwl, k, c, LssKey(segs))?.clone();
        let mut out = Kernel::zeros(self.layout.span, m);
        out.offset = cs.beta;
        let u = &self.weights.layers[k].input;
        for (j, &a) in cs.alphas.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            if k == 0 {
                for f in 0..m {
                    out.lags[t + j][f] += a * u.get(c, f);
                }
            } else {
                for c2 in 0..u.cols {
                    let w = u.get(c, c2);
                    if w != 0.0 {
                        let below = self.state(k - 1, c2, t + j)?;
                        out.add_scaled(&below, a * w);
                    }
                }
            }
        }
        self.memo.insert((k, c, t), out.clone());
        Ok(out)
    }
}

fn context_kernel(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    layout: &ContextLayout,
    key: &[u8],
    target: Target,
    cache: &mut CoeffCache,
) -> Result<Kernel> {
    let mut b = KernelBuilder { weights, pwl, layout, key, cache, memo: HashMap::new() };
    match target {
        Target::Channel { layer, channel } => b.state(layer, channel, 0),
        Target::Readout => {
            let mut out = Kernel::zeros(layout.span, weights.config.n_features);
            out.offset = weights.bias;
            for (c, &v) in weights.readout.iter().enumerate() {
                let kc = b.state(layout.top, c, 0)?;
                out.add_scaled(&kc, v);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobeComponent {
    pub fss: Fss,
    /// Index into `DetailedDistribution::contexts`.
    pub context: usize,
    pub gaussian: Gaussian,
    /// Output interval allowed by the current-instant segments; the lobe is
    /// the Gaussian truncated to it.
    pub support: Option<(f64, f64)>,
    pub weight: f64,
    pub kind: LobeKind,
}

impl LobeComponent {
    pub fn cdf(&self, x: f64) -> f64 {
        let g = &self.gaussian;
        match self.support {
            None => g.cdf(x),
            Some((a, b)) => {
                let mass = g.cdf(b) - g.cdf(a);
                if b <= a || mass < 1e-300 {
                    let at = g.mean().clamp(a, b);
                    return if x >= at { 1.0 } else { 0.0 };
                }
                if x < a {
                    0.0
                } else if x >= b {
                    1.0
                } else {
                    ((g.cdf(x) - g.cdf(a)) / mass).clamp(0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextInfo {
    pub count: u64,
    pub kernel: Kernel,
    pub support: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailedDistribution {
    pub target: Target,
    pub weighting: Weighting,
    pub fss_len: usize,
    pub fss: FrequencyTable<Fss>,
    pub contexts: Vec<ContextInfo>,
    pub components: Vec<LobeComponent>,
    /// Weight mass of the enumerated components that were filtered out.
    pub discarded_mass: f64,
    /// ½Σ|p(fss, ctx) − p(fss)·p(ctx)|.
    pub independence_gap: f64,
}

impl DetailedDistribution {
    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn status_mass(&self, s: Status) -> f64 {
        self.components.iter().filter(|c| c.fss.current() == s).map(|c| c.weight).sum()
    }

    /// Predicted CDF of the target given the current status.
    pub fn status_cdf(&self, s: Status, x: f64) -> f64 {
        let mass = self.status_mass(s);
        if mass == 0.0 {
            return f64::NAN;
        }
        self.components.iter().filter(|c| c.fss.current() == s).map(|c| c.weight * c.cdf(x)).sum::<f64>() / mass
    }

    /// Untruncated Gaussian mixture of the lobes with the given current status.
    pub fn status_mixture(&self, s: Status) -> Result<GaussianMixture> {
        let terms: Vec<(f64, Gaussian)> = self
            .components
            .iter()
            .filter(|c| c.fss.current() == s && c.weight > 0.0)
            .map(|c| (c.weight, c.gaussian))
            .collect();
        if terms.is_empty() {
            return Err(Error::Degenerate(format!("no lobes for status {s}")));
        }
        GaussianMixture::from_weighted(&terms)
    }

    /// Weight and moment-matched Gaussian of each FSS's combined lobe.
    pub fn per_fss(&self) -> Vec<(Fss, f64, Gaussian)> {
        let mut acc: BTreeMap<Fss, (f64, f64, f64)> = BTreeMap::new();
        for c in &self.components {
            let e = acc.entry(c.fss.clone()).or_insert((0.0, 0.0, 0.0));
            let m = c.gaussian.mean();
            e.0 += c.weight;
            e.1 += c.weight * m;
            e.2 += c.weight * (c.gaussian.variance() + m * m);
        }
        acc.into_iter()
            .filter(|(_, (w, _, _))| *w > 0.0)
            .filter_map(|(f, (w, s1, s2))| {
                let mean = s1 / w;
                let var = (s2 / w - mean * mean).max(1e-18);
                Gaussian::new(mean, var.sqrt()).ok().map(|g| (f, w, g))
            })
            .collect()
    }

    pub fn write_lobe_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let rows: Vec<LobeRow> = {
            let mut r: Vec<LobeRow> = self
                .per_fss()
                .into_iter()
                .map(|(f, _, g)| LobeRow {
                    rel_freq: self.fss.relfreq(&f),
                    count: self.fss.counts.get(&f).copied().unwrap_or(0),
                    mean: g.mean(),
                    sd: g.sd(),
                    case: f,
                })
                .collect();
            r.sort_by(|a, b| a.mean.total_cmp(&b.mean));
            r
        };
        write_lobe_table_csv(&rows, w)
    }
}

/// Share of instants, nearest the threshold, that define the boundary segments.
pub const BOUNDARY_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposeOptions {
    pub target: Target,
    pub weighting: Weighting,
    pub principal_only: bool,
    /// Decision threshold on the target, used by `Weighting::Boundary`.
    pub threshold: f64,
}

/// Output range of one segment; `None` for virtual segments.
fn segment_range(pwl: &PwlApprox, idx: u8) -> Option<(f64, f64)> {
    let i = idx as usize;
    let n = pwl.knots.len();
    match i {
        0 => Some((-1.0, -1.0)),
        i if i < n => Some((pwl.knots[i - 1].1, pwl.knots[i].1)),
        i if i == n => Some((1.0, 1.0)),
        _ => None,
    }
}

/// Interval the target can take given the current-instant segments.
fn segment_support(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    layout: &ContextLayout,
    key: &[u8],
    target: Target,
) -> Option<(f64, f64)> {
    let current = |k: usize, c: usize| segment_range(pwl, key[layout.index[&(k, c, 0)]]);
    match target {
        Target::Channel { layer, channel } => current(layer, channel),
        Target::Readout => {
            let (mut lo, mut hi) = (weights.bias, weights.bias);
            for (c, &v) in weights.readout.iter().enumerate() {
                let (a, b) = current(layout.top, c)?;
                lo += (v * a).min(v * b);
                hi += (v * a).max(v * b);
            }
            Some((lo, hi))
        }
    }
}

/// Per current-instant slot, the segment averaged over the instants whose
/// target lies nearest the threshold. Saturated picks are first moved onto the
/// adjacent chord, since a flat segment says nothing about the crossing.
fn boundary_segments(
    layout: &ContextLayout,
    keys: &[Vec<u8>],
    values: impl Iterator<Item = f64>,
    threshold: f64,
    pwl: &PwlApprox,
) -> Vec<(usize, Segment)> {
    let mut order: Vec<(f64, usize)> = values.map(|y| (y - threshold).abs()).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let take = ((order.len() as f64 * BOUNDARY_FRACTION).ceil() as usize).clamp(1, order.len().max(1));
    let upper = (pwl.n_segments() - 2) as u8;
    layout
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.2 == 0)
        .map(|(i, _)| {
            let (mut g, mut r) = (0.0, 0.0);
            for &(_, n) in &order[..take] {
                let seg = pwl.segments[keys[n][i].clamp(1, upper) as usize];
                g += seg.gain;
                r += seg.intercept;
            }
            (i, Segment { gain: g / take as f64, intercept: r / take as f64 })
        })
        .collect()
}

/// Build lobes from a main-model run over the stream whose labels are `labels`.
pub fn compose_detailed(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    run: &MainModelRun,
    labels: &[Status],
    moments: &FeatureMoments,
    opts: ComposeOptions,
) -> Result<DetailedDistribution> {
    if labels.len() != run.len() {
        return Err(Error::DimensionMismatch { expected: run.len(), actual: labels.len(), context: "labels vs model run" });
    }
    let layout = ContextLayout::new(weights, opts.target)?;
    let l = layout.span + 1;
    if run.len() < l {
        return Err(invalid("stream shorter than one FSS"));
    }

    let mut ctx_index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut ctx_keys: Vec<Vec<u8>> = Vec::new();
    let mut ctx_counts: Vec<u64> = Vec::new();
    let mut joint: BTreeMap<(Fss, usize), u64> = BTreeMap::new();
    let instants = layout.span..run.len();
    let mut keys: Vec<Vec<u8>> = instants.clone().map(|n| layout.key(run, n)).collect();
    let mut augmented = pwl.clone();
    if opts.weighting == Weighting::Boundary {
        let target_value = |n: usize| match opts.target {
            Target::Readout => run.output[n],
            Target::Channel { layer, channel } => run.layers[layer].state[n][channel],
        };
        let pinned = boundary_segments(&layout, &keys, instants.clone().map(target_value), opts.threshold, pwl);
        if pwl.n_segments() + pinned.len() > u8::MAX as usize {
            return Err(invalid("too many segments for boundary contexts"));
        }
        // virtual segments appended after the real ones
        for &(slot, seg) in &pinned {
            let idx = augmented.n_segments() as u8;
            augmented.segments.push(seg);
            for k in keys.iter_mut() {
                k[slot] = idx;
            }
        }
    }
    let pwl = &augmented;
    let mut fss = FrequencyTable::new();
    for (n, key) in instants.zip(keys) {
        let id = *ctx_index.entry(key.clone()).or_insert_with(|| {
            ctx_keys.push(key);
            ctx_counts.push(0);
            ctx_keys.len() - 1
        });
        ctx_counts[id] += 1;
        let f = Fss::window(labels, n, l);
        *joint.entry((f.clone(), id)).or_insert(0) += 1;
        fss.add(f);
    }
    if fss.is_empty() {
        return Err(invalid("empty frequency tables"));
    }
    let total = fss.total as f64;

    let mut cache = CoeffCache::new();
    let contexts = ctx_keys
        .iter()
        .zip(&ctx_counts)
        .map(|(k, &count)| {
            Ok(ContextInfo {
                count,
                kernel: context_kernel(weights, pwl, &layout, k, opts.target, &mut cache)?,
                support: segment_support(weights, pwl, &layout, k, opts.target),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let independence_gap = {
        let mut gap = 0.0;
        let mut covered = 0.0;
        for ((f, id), &c) in &joint {
            let prod = fss.relfreq(f) * ctx_counts[*id] as f64 / total;
            gap += (c as f64 / total - prod).abs();
            covered += prod;
        }
        0.5 * (gap + (1.0 - covered))
    };

    let keep = |f: &Fss| !opts.principal_only || f.kind() != LobeKind::Neglected;
    let mut components = Vec::new();
    let mut discarded_mass = 0.0;
    match opts.weighting {
        Weighting::Product => {
            for (f, pf) in fss.iter_relfreq() {
                if !keep(f) {
                    discarded_mass += pf;
                    continue;
                }
                for (id, ctx) in contexts.iter().enumerate() {
                    components.push(LobeComponent {
                        fss: f.clone(),
                        context: id,
                        gaussian: ctx.kernel.lobe(f, moments)?,
                        support: ctx.support,
                        weight: pf * ctx.count as f64 / total,
                        kind: f.kind(),
                    });
                }
            }
        }
        Weighting::Joint | Weighting::Boundary => {
            for ((f, id), &c) in &joint {
                let w = c as f64 / total;
                if !keep(f) {
                    discarded_mass += w;
                    continue;
                }
                components.push(LobeComponent {
                    fss: f.clone(),
                    context: *id,
                    gaussian: contexts[*id].kernel.lobe(f, moments)?,
                    support: contexts[*id].support,
                    weight: w,
                    kind: f.kind(),
                });
            }
        }
        Weighting::FssAveraged => {
            let mut acc: BTreeMap<Fss, (u64, Kernel)> = BTreeMap::new();
            for ((f, id), &c) in &joint {
                let e = acc
                    .entry(f.clone())
                    .or_insert_with(|| (0, Kernel::zeros(layout.span, weights.config.n_features)));
                e.0 += c;
                e.1.add_scaled(&contexts[*id].kernel, c as f64);
            }
            for (f, (c, mut k)) in acc {
                let w = c as f64 / total;
                if !keep(&f) {
                    discarded_mass += w;
                    continue;
                }
                let inv = 1.0 / c as f64;
                k.lags.iter_mut().flatten().for_each(|x| *x *= inv);
                k.offset *= inv;
                components.push(LobeComponent {
                    gaussian: k.lobe(&f, moments)?,
                    support: None,
                    fss: f.clone(),
                    context: usize::MAX,
                    weight: w,
                    kind: f.kind(),
                });
            }
        }
    }

    Ok(DetailedDistribution {
        target: opts.target,
        weighting: opts.weighting,
        fss_len: l,
        fss,
        contexts,
        components,
        discarded_mass,
        independence_gap,
    })
}

/// Kernel of the target at instant n of a run (n ≥ span).
pub fn kernel_at(weights: &RnnWeights, pwl: &PwlApprox, run: &MainModelRun, target: Target, n: usize) -> Result<Kernel> {
    let layout = ContextLayout::new(weights, target)?;
    if n < layout.span {
        return Err(invalid("instant lies in the warm-up window"));
    }
    context_kernel(weights, pwl, &layout, &layout.key(run, n), target, &mut CoeffCache::new())
}

/// Lag span of the target's kernel; FSS length is this plus one.
pub fn target_span(weights: &RnnWeights, target: Target) -> Result<usize> {
    Ok(ContextLayout::new(weights, target)?.span)
}
