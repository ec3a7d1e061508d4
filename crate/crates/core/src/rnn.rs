//! Layered tanh RNN with higher-order state feedback.
//!
//! Layer k computes a′_k(n) = U_k·z_{k−1}(n) + Σ_j W_{k,j}·h_k(n−j) and
//! h_k(n) = tanh(a′_k(n)), where z_0 is the scaled feature vector and z_k = h_k.
//! The score is y(n) = v·h_L(n) + b. Hidden layers carry no bias, so the
//! readout bias is the only offset in the network.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scenario::{LabelledSequence, Status};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(invalid("ragged matrix rows"));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn tmul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, xr) in x.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(r, c) * xr;
            }
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| (0..self.cols).all(|c| r == c || self.get(r, c) == 0.0))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// One layer, first order.
    L1O1,
    /// One layer, second order.
    L1O2,
    /// One layer, fourth order.
    L1O4,
    /// Two first-order layers.
    L2O1,
    /// Three first-order layers.
    L3O1,
}

impl Preset {
    pub const PAPER: [Preset; 5] = [Preset::L1O1, Preset::L1O2, Preset::L1O4, Preset::L2O1, Preset::L3O1];

    pub fn layers_and_order(self) -> (usize, usize) {
        match self {
            Preset::L1O1 => (1, 1),
            Preset::L1O2 => (1, 2),
            Preset::L1O4 => (1, 4),
            Preset::L2O1 => (2, 1),
            Preset::L3O1 => (3, 1),
        }
    }

    pub fn from_layers_order(layers: usize, order: usize) -> Option<Self> {
        Self::PAPER.into_iter().find(|p| p.layers_and_order() == (layers, order))
    }

    pub fn label(self) -> &'static str {
        match self {
            Preset::L1O1 => "1-layer order-1",
            Preset::L1O2 => "1-layer order-2",
            Preset::L1O4 => "1-layer order-4",
            Preset::L2O1 => "2-layer order-1",
            Preset::L3O1 => "3-layer order-1",
        }
    }
}

pub const DEFAULT_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub n_features: usize,
    /// Hidden width per layer; its length is the layer count.
    pub widths: Vec<usize>,
    /// Number of previous states fed back in every layer.
    pub order: usize,
    /// Restrict every feedback matrix to its diagonal.
    #[serde(default = "yes")]
    pub diagonal: bool,
}

fn yes() -> bool {
    true
}

impl RnnConfig {
    pub fn new(n_features: usize, n_layers: usize, order: usize, width: usize) -> Result<Self> {
        let c = Self { n_features, widths: vec![width; n_layers], order, diagonal: true };
        c.validate()?;
        Ok(c)
    }

    pub fn preset(p: Preset, n_features: usize, width: usize) -> Self {
        let (l, o) = p.layers_and_order();
        Self { n_features, widths: vec![width; l], order: o, diagonal: true }
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_layers()) {
            return Err(invalid(format!("layer count must be 1, 2 or 3, got {}", self.n_layers())));
        }
        if ![1, 2, 4].contains(&self.order) {
            return Err(invalid(format!("feedback order must be 1, 2 or 4, got {}", self.order)));
        }
        if self.n_features == 0 || self.widths.contains(&0) {
            return Err(invalid("feature count and widths must be positive"));
        }
        Ok(())
    }

    fn input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_features
        } else {
            self.widths[layer - 1]
        }
    }
}

/// Affine feature standardization applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: f64,
    pub scale: f64,
}

impl InputScaling {
    pub fn identity() -> Self {
        Self { center: 0.0, scale: 1.0 }
    }

    /// Global mean and sd over every feature of every instant.
    pub fn fit(seqs: &[LabelledSequence]) -> Result<Self> {
        let xs: Vec<f64> = seqs.iter().flat_map(|s| s.features.iter().flatten().copied()).collect();
        if xs.len() < 2 {
            return Err(invalid("not enough samples to fit input scaling"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Degenerate("constant input features".into()));
        }
        Ok(Self { center: mean, scale: sd })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    HighIsFault,
    LowIsFault,
}

impl Polarity {
    /// Normalize a score so that larger always means "more faulty".
    #[inline]
    pub fn oriented(self, score: f64) -> f64 {
        match self {
            Polarity::HighIsFault => score,
            Polarity::LowIsFault => -score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// width_k × width_{k−1}
    pub input: Mat,
    /// W_{k,1..order}, each width_k × width_k
    pub feedback: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnWeights {
    pub config: RnnConfig,
    pub scaling: InputScaling,
    pub layers: Vec<LayerWeights>,
    pub readout: Vec<f64>,
    pub bias: f64,
    pub polarity: Polarity,
}

impl RnnWeights {
    pub fn zeros(config: &RnnConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers())
            .map(|k| LayerWeights {
                input: Mat::zeros(config.widths[k], config.input_width(k)),
                feedback: (0..config.order).map(|_| Mat::zeros(config.widths[k], config.widths[k])).collect(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            scaling: InputScaling::identity(),
            layers,
            readout: vec![0.0; *config.widths.last().expect("validated")],
            bias: 0.0,
            polarity: Polarity::HighIsFault,
        })
    }

    /// Uniform in ±0.3/√fan_in; feedback is diagonal unless the config says otherwise.
    pub fn init(config: &RnnConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut r = rng::stream(seed);
        for (k, layer) in w.layers.iter_mut().enumerate() {
            let lim = 0.3 / (config.input_width(k) as f64).sqrt();
            for v in layer.input.data.iter_mut() {
                *v = r.random_range(-lim..lim);
            }
            for fb in layer.feedback.iter_mut() {
                let n = fb.rows;
                if config.diagonal {
                    for i in 0..n {
                        fb.set(i, i, r.random_range(-0.3..0.3));
                    }
                } else {
                    let lim = 0.3 / (n as f64).sqrt();
                    for v in fb.data.iter_mut() {
                        *v = r.random_range(-lim..lim);
                    }
                }
            }
        }
        let lim = 0.3 / (w.readout.len() as f64).sqrt();
        for v in w.readout.iter_mut() {
            *v = r.random_range(-lim..lim);
        }
        Ok(w)
    }

    pub fn is_diagonal(&self) -> bool {
        self.layers.iter().all(|l| l.feedback.iter().all(Mat::is_diagonal))
    }

    pub fn check_diagonal(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            if !l.feedback.iter().all(Mat::is_diagonal) {
                return Err(Error::NonDiagonal { layer: k + 1 });
            }
        }
        Ok(())
    }

    pub fn max_feedback_magnitude(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.feedback.iter().flat_map(|m| m.data.iter()))
            .fold(0.0, |a, v| a.max(v.abs()))
    }

    fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Parameters in a fixed order: per layer (input, feedback…), readout, bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(&l.input.data);
            for fb in &l.feedback {
                v.extend_from_slice(&fb.data);
            }
        }
        v.extend_from_slice(&self.readout);
        v.push(self.bias);
        v
    }

    pub fn unflatten(&mut self, params: &[f64]) {
        let mut i = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[i..i + dst.len()]);
            i += dst.len();
        };
        for l in self.layers.iter_mut() {
            take(&mut l.input.data);
            for fb in l.feedback.iter_mut() {
                take(&mut fb.data);
            }
        }
        take(&mut self.readout);
        let mut b = [0.0];
        take(&mut b);
        self.bias = b[0];
    }

    /// 1 for trainable entries, 0 for entries pinned by the diagonal constraint.
    fn trainable_mask(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(std::iter::repeat_n(1.0, l.input.data.len()));
            for fb in &l.feedback {
                for r in 0..fb.rows {
                    for c in 0..fb.cols {
                        v.push(if !self.config.diagonal || r == c { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        v.extend(std::iter::repeat_n(1.0, self.readout.len() + 1));
        v
    }

    /// Index ranges of the feedback entries within `flatten()`.
    fn feedback_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut i = 0;
        for l in &self.layers {
            i += l.input.data.len();
            for fb in &l.feedback {
                out.push(i..i + fb.data.len());
                i += fb.data.len();
            }
        }
        out
    }
}

/// Recorded internals of one layer over time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerTrace {
    /// a_k(n) = U_k·z_{k−1}(n)
    pub input: Vec<Vec<f64>>,
    /// a′_k(n), the tanh argument
    pub pre: Vec<Vec<f64>>,
    /// h_k(n)
    pub state: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
    /// y(n)
    pub output: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }
}

/// Feedback history per layer, most recent state first.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    history: Vec<VecDeque<Vec<f64>>>,
}

impl State {
    pub fn zeros(config: &RnnConfig) -> Self {
        Self {
            history: config
                .widths
                .iter()
                .map(|&w| (0..config.order).map(|_| vec![0.0; w]).collect())
                .collect(),
        }
    }

    /// h_k(n−j), j ≥ 1.
    pub fn lagged(&self, layer: usize, j: usize) -> &[f64] {
        &self.history[layer][j - 1]
    }

    fn push(&mut self, layer: usize, h: Vec<f64>) {
        let q = &mut self.history[layer];
        q.pop_back();
        q.push_front(h);
    }
}

fn check_width(config: &RnnConfig, features: &[Vec<f64>]) -> Result<()> {
    if let Some(bad) = features.iter().find(|r| r.len() != config.n_features) {
        return Err(Error::DimensionMismatch {
            expected: config.n_features,
            actual: bad.len(),
            context: "feature vector width",
        });
    }
    Ok(())
}

/// Run the network over raw feature rows starting from `init` (zero state if `None`).
pub fn forward_from(weights: &RnnWeights, features: &[Vec<f64>], init: Option<&State>) -> Result<(Trace, State)> {
    let cfg = &weights.config;
    check_width(cfg, features)?;
    let mut state = init.cloned().unwrap_or_else(|| State::zeros(cfg));
    let mut trace = Trace {
        layers: vec![LayerTrace::default(); cfg.n_layers()],
        output: Vec::with_capacity(features.len()),
    };
    for row in features {
        let mut z: Vec<f64> = row.iter().map(|&x| weights.scaling.apply(x)).collect();
        for (k, layer) in weights.layers.iter().enumerate() {
            let a = layer.input.mul_vec(&z);
            let mut pre = a.clone();
            for (j, fb) in layer.feedback.iter().enumerate() {
                fb.mul_vec_add(state.lagged(k, j + 1), &mut pre);
            }
            let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
            let lt = &mut trace.layers[k];
            lt.input.push(a);
            lt.pre.push(pre);
            lt.state.push(h.clone());
            state.push(k, h.clone());
            z = h;
        }
        let y = weights.readout.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + weights.bias;
        trace.output.push(y);
    }
    Ok((trace, state))
}

pub fn forward(weights: &RnnWeights, features: &[Vec<f64>]) -> Result<Trace> {
    Ok(forward_from(weights, features, None)?.0)
}

/// Run over consecutive sequences as one stream, carrying state across boundaries.
pub fn forward_stream(weights: &RnnWeights, seqs: &[LabelledSequence]) -> Result<Trace> {
    let features: Vec<Vec<f64>> = seqs.iter().flat_map(|s| s.features.iter().cloned()).collect();
    forward(weights, &features)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean per-instant logistic loss and its gradient (in `flatten()` layout)
/// over one chunk, with `init` treated as a constant.
pub fn loss_and_gradient(
    weights: &RnnWeights,
    features: &[Vec<f64>],
    labels: &[Status],
    init: Option<&State>,
) -> Result<(f64, Vec<f64>, State)> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
            context: "labels vs features",
        });
    }
    let cfg = &weights.config;
    let init_state = init.cloned().unwrap_or_else(|| State::zeros(cfg));
    let (trace, end_state) = forward_from(weights, features, Some(&init_state))?;
    let t_len = features.len();
    let n_layers = cfg.n_layers();
    let inv_t = 1.0 / t_len.max(1) as f64;

    let mut loss = 0.0;
    let mut dy = vec![0.0; t_len];
    for t in 0..t_len {
        let y = trace.output[t];
        let target = if labels[t].is_fault() { 1.0 } else { 0.0 };
        loss += softplus(y) - target * y;
        dy[t] = (sigmoid(y) - target) * inv_t;
    }
    loss *= inv_t;

    let mut g_input: Vec<Mat> = weights.layers.iter().map(|l| Mat::zeros(l.input.rows, l.input.cols)).collect();
    let mut g_fb: Vec<Vec<Mat>> = weights
        .layers
        .iter()
        .map(|l| l.feedback.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect())
        .collect();
    let mut g_readout = vec![0.0; weights.readout.len()];
    let mut g_bias = 0.0;

    // dh[k][t]
    let mut dh: Vec<Vec<Vec<f64>>> = cfg.widths.iter().map(|&w| vec![vec![0.0; w]; t_len]).collect();
    let scaled: Vec<Vec<f64>> =
        features.iter().map(|r| r.iter().map(|&x| weights.scaling.apply(x)).collect()).collect();
    let last = n_layers - 1;

    for t in (0..t_len).rev() {
        g_bias += dy[t];
        for (c, g) in g_readout.iter_mut().enumerate() {
            *g += dy[t] * trace.layers[last].state[t][c];
            dh[last][t][c] += dy[t] * weights.readout[c];
        }
        for k in (0..n_layers).rev() {
            let h = &trace.layers[k].state[t];
            let da: Vec<f64> = dh[k][t].iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
            let z_prev: &[f64] = if k == 0 { &scaled[t] } else { &trace.layers[k - 1].state[t] };
            let gi = &mut g_input[k];
            for (r, dar) in da.iter().enumerate() {
                for (c, zc) in z_prev.iter().enumerate() {
                    gi.data[r * gi.cols + c] += dar * zc;
                }
            }
            if k > 0 {
                let mut back = vec![0.0; z_prev.len()];
                weights.layers[k].input.tmul_vec_add(&da, &mut back);
                for (d, b) in dh[k - 1][t].iter_mut().zip(back) {
                    *d += b;
                }
            }
            for (j0, fb) in weights.layers[k].feedback.iter().enumerate() {
                let j = j0 + 1;
                let h_lag: &[f64] =
                    if t >= j { &trace.layers[k].state[t - j] } else { init_state.lagged(k, j - t) };
                let gf = &mut g_fb[k][j0];
                for (r, dar) in da.iter().enumerate() {
                    for (c, hc) in h_lag.iter().enumerate() {
                        gf.data[r * gf.cols + c] += dar * hc;
                    }
                }
                if t >= j {
                    let mut back = vec![0.0; h_lag.len()];
                    fb.tmul_vec_add(&da, &mut back);
                    for (d, b) in dh[k][t - j].iter_mut().zip(back) {
                        *d += b;
                    }
                }
            }
        }
    }

    let mut grad = Vec::new();
    for k in 0..n_layers {
        grad.extend_from_slice(&g_input[k].data);
        for m in &g_fb[k] {
            grad.extend_from_slice(&m.data);
        }
    }
    grad.extend_from_slice(&g_readout);
    grad.push(g_bias);
    Ok((loss, grad, end_state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Feedback entries are clipped to ±clip after every step.
    pub weight_clip: Option<f64>,
    /// Sequences per optimizer step.
    pub batch: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 0.02, epochs: 200, seed: 1, weight_clip: Some(0.5), batch: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub weights: RnnWeights,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] * mask[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Truncated BPTT over whole sequences with Adam. Each sequence starts from
/// the final state of the sequence processed before it, so training sees the
/// same sequence-boundary transitions as stream evaluation.
pub fn train(config: &RnnConfig, train_set: &[LabelledSequence], hyper: &TrainHyper) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if hyper.batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let mut weights = RnnWeights::init(config, rng::child_seed(hyper.seed, "init"))?;
    weights.scaling = InputScaling::fit(train_set)?;
    let mask = weights.trainable_mask();
    let fb_ranges = weights.feedback_ranges();
    let mut params = weights.flatten();
    let mut opt = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut r = rng::stream(rng::indexed_seed(rng::child_seed(hyper.seed, "shuffle"), epoch as u64));
        order.shuffle(&mut r);
        let mut carried: Option<State> = None;
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let mut grad = vec![0.0; params.len()];
            for &i in batch {
                let s = &train_set[i];
                let (loss, g, end) = loss_and_gradient(&weights, &s.features, &s.labels, carried.as_ref())?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("training loss became non-finite at epoch {epoch}")));
                }
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / batch.len() as f64;
                }
                carried = Some(end);
            }
            if hyper.lr != 0.0 {
                opt.step(&mut params, &grad, &mask, hyper.lr);
                if let Some(clip) = hyper.weight_clip {
                    for range in &fb_ranges {
                        for v in &mut params[range.clone()] {
                            *v = v.clamp(-clip, clip);
                        }
                    }
                }
                weights.unflatten(&params);
                if !weights.is_finite() {
                    return Err(Error::Numeric(format!("weights became non-finite at epoch {epoch}")));
                }
            }
        }
        history.push(epoch_loss / train_set.len() as f64);
    }

    weights.polarity = training_polarity(&weights, train_set)?;
    Ok(TrainResult { weights, loss_history: history })
}

fn training_polarity(weights: &RnnWeights, train_set: &[LabelledSequence]) -> Result<Polarity> {
    let trace = forward_stream(weights, train_set)?;
    let labels: Vec<Status> = train_set.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let mean = |st: Status| {
        let v: Vec<f64> =
            trace.output.iter().zip(&labels).filter(|(_, l)| **l == st).map(|(y, _)| *y).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(if mean(Status::F) >= mean(Status::N) { Polarity::HighIsFault } else { Polarity::LowIsFault })
}

/// Label F iff the score lies on the fault side of `threshold`.
pub fn classify(trace: &Trace, threshold: f64, polarity: Polarity) -> (Vec<Status>, Vec<f64>) {
    let labels = trace
        .output
        .iter()
        .map(|&y| if polarity.oriented(y) > polarity.oriented(threshold) { Status::F } else { Status::N })
        .collect();
    (labels, trace.output.clone())
}
