//! Piecewise-linear tanh and the unrolled feedback expansion.
//!
//! A layer with diagonal feedback and a piecewise-linear NLF satisfies, per
//! channel, h(n) = g(n)·(a(n) + Σ_j w_j h(n−j)) + r(n). Substituting for the
//! lagged states twice and dropping what remains turns this into
//! h(n) ≈ Σ_{j=0}^{2p} α_j a(n−j) + β, where (α, β) depend only on the
//! segments active at n, n−1, …, n−2p: the line segment sequence.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rnn::{RnnWeights, Trace};

pub const DEFAULT_SEGMENTS: usize = 8;
pub const DEFAULT_SPAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub gain: f64,
    pub intercept: f64,
}

impl Segment {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.gain * x + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlApprox {
    /// Knots (x_i, tanh x_i), strictly increasing in both coordinates.
    pub knots: Vec<(f64, f64)>,
    /// Lower saturation, the interior chords in order, upper saturation.
    pub segments: Vec<Segment>,
    /// max |pwl − tanh| over the knot span.
    pub sup_error: f64,
    /// Jump at each outer knot between the chord end and the ±1 saturation.
    pub edge_gap: f64,
}

/// Uniform knots on tanh over [−span, span] with saturation at ±1 outside.
pub fn build_pwl(n_interior: usize, span: f64) -> Result<PwlApprox> {
    if n_interior == 0 {
        return Err(invalid("need at least one interior segment"));
    }
    if !(span > 0.0) || !span.is_finite() {
        return Err(invalid(format!("span must be positive, got {span}")));
    }
    let knots: Vec<(f64, f64)> = (0..=n_interior)
        .map(|i| {
            let x = -span + 2.0 * span * i as f64 / n_interior as f64;
            (x, x.tanh())
        })
        .collect();
    let mut segments = Vec::with_capacity(n_interior + 2);
    segments.push(Segment { gain: 0.0, intercept: -1.0 });
    for w in knots.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let gain = (y1 - y0) / (x1 - x0);
        segments.push(Segment { gain, intercept: y0 - gain * x0 });
    }
    segments.push(Segment { gain: 0.0, intercept: 1.0 });
    let mut pwl = PwlApprox { knots, segments, sup_error: 0.0, edge_gap: 1.0 - span.tanh() };
    pwl.sup_error = pwl.sup_error_on_grid(span, 20_000);
    Ok(pwl)
}

impl PwlApprox {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn span(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.0)
    }

    pub fn is_saturation(&self, idx: usize) -> bool {
        idx == 0 || idx + 1 == self.segments.len()
    }

    /// Segment index for x; a value exactly on a knot takes the left segment.
    pub fn select(&self, x: f64) -> usize {
        // first knot with x <= knot.x
        let i = self.knots.partition_point(|k| k.0 < x);
        i.min(self.knots.len())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.segments[self.select(x)].eval(x)
    }

    fn sup_error_on_grid(&self, span: f64, points: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..=points {
            let x = -span + 2.0 * span * i as f64 / points as f64;
            worst = worst.max((self.eval(x) - x.tanh()).abs());
        }
        // the chord error peaks between knots, never on them; refine around each maximum
        for w in self.knots.windows(2) {
            let (a, b) = (w[0].0, w[1].0);
            for i in 1..200 {
                let x = a + (b - a) * i as f64 / 200.0;
                worst = worst.max((self.eval(x) - x.tanh()).abs());
            }
        }
        worst
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["segment", "x_left", "x_right", "gain", "intercept"])?;
        for (i, s) in self.segments.iter().enumerate() {
            let left = if i == 0 { f64::NEG_INFINITY } else { self.knots[i - 1].0 };
            let right = if i < self.knots.len() { self.knots[i].0 } else { f64::INFINITY };
            out.write_record([i.to_string(), left.to_string(), right.to_string(), s.gain.to_string(), s.intercept.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn select_segment(pwl: &PwlApprox, x: f64) -> (usize, Segment) {
    let i = pwl.select(x);
    (i, pwl.segments[i])
}

/// Segment indices active at lags 0, 1, …, 2p (lag 0 = current instant).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LssKey(pub Vec<u8>);

impl LssKey {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn segments(&self, pwl: &PwlApprox) -> Vec<Segment> {
        self.0.iter().map(|&i| pwl.segments[i as usize]).collect()
    }
}

impl fmt::Display for LssKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

pub fn lss_length(order: usize) -> usize {
    2 * order + 1
}

/// Occurrence counts of distinct keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrequencyTable<K: Ord> {
    pub counts: BTreeMap<K, u64>,
    pub total: u64,
}

impl<K: Ord + Clone> FrequencyTable<K> {
    pub fn new() -> Self {
        Self { counts: BTreeMap::new(), total: 0 }
    }

    pub fn add(&mut self, key: K) {
        *self.counts.entry(key).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn relfreq(&self, key: &K) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(key).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn iter_relfreq(&self) -> impl Iterator<Item = (&K, f64)> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(move |(k, c)| (k, *c as f64 / t))
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

pub type LssTable = FrequencyTable<LssKey>;

impl LssTable {
    /// JSON object keyed by the dash-joined segment-index tuple.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .counts
            .iter()
            .map(|(k, c)| {
                (k.to_string(), serde_json::json!({ "count": c, "rel_freq": *c as f64 / self.total.max(1) as f64 }))
            })
            .collect();
        serde_json::json!({ "total": self.total, "sequences": map })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LssExtraction {
    /// keys[n][c]; instants with n < 2p rely on the zero-state prefix.
    pub keys: Vec<Vec<LssKey>>,
    pub warmup: Vec<bool>,
    /// Per-channel tables over non-warm-up instants.
    pub tables: Vec<LssTable>,
}

/// LSS per instant and channel from the recorded pre-activations of `layer` (0-based).
pub fn extract_lss(weights: &RnnWeights, trace: &Trace, pwl: &PwlApprox, layer: usize) -> Result<LssExtraction> {
    weights.check_diagonal()?;
    let lt = trace
        .layers
        .get(layer)
        .ok_or_else(|| invalid(format!("trace has no layer {layer}")))?;
    let p = weights.config.order;
    let width = weights.config.widths[layer];
    Ok(lss_from_preactivations(&lt.pre, width, p, pwl))
}

pub fn lss_from_preactivations(pre: &[Vec<f64>], width: usize, order: usize, pwl: &PwlApprox) -> LssExtraction {
    let span = 2 * order;
    let seg: Vec<Vec<u8>> = pre.iter().map(|row| row.iter().map(|&x| pwl.select(x) as u8).collect()).collect();
    let zero_seg = pwl.select(0.0) as u8;
    let mut keys = Vec::with_capacity(pre.len());
    let mut warmup = Vec::with_capacity(pre.len());
    let mut tables = vec![LssTable::new(); width];
    for n in 0..pre.len() {
        let row: Vec<LssKey> = (0..width)
            .map(|c| LssKey((0..=span).map(|j| if n >= j { seg[n - j][c] } else { zero_seg }).collect()))
            .collect();
        let warm = n < span;
        if !warm {
            for (t, k) in tables.iter_mut().zip(&row) {
                t.add(k.clone());
            }
        }
        keys.push(row);
        warmup.push(warm);
    }
    LssExtraction { keys, warmup, tables }
}

/// Expansion coefficients of one channel for one LSS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffSet {
    pub alphas: Vec<f64>,
    pub beta: f64,
    /// Largest |coefficient| among the dropped h(n−k) terms; zero for the closed forms.
    pub dropped_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    One,
    A(usize),
    H(usize),
}

fn check_expansion_inputs(order: usize, w: &[f64], lss: &[Segment]) -> Result<()> {
    if order == 0 {
        return Err(invalid("order must be >= 1"));
    }
    if w.len() != order {
        return Err(Error::DimensionMismatch { expected: order, actual: w.len(), context: "feedback weights vs order" });
    }
    if lss.len() != lss_length(order) {
        return Err(Error::DimensionMismatch {
            expected: lss_length(order),
            actual: lss.len(),
            context: "LSS length vs order",
        });
    }
    Ok(())
}

/// Two-level symbolic substitution of the lagged states, then truncation.
pub fn expand_coefficients(order: usize, w: &[f64], lss: &[Segment]) -> Result<CoeffSet> {
    check_expansion_inputs(order, w, lss)?;
    let g0 = lss[0].gain;
    let mut terms: Vec<(f64, Var)> = vec![(g0, Var::A(0)), (lss[0].intercept, Var::One)];
    terms.extend((1..=order).map(|j| (g0 * w[j - 1], Var::H(j))));

    for _ in 0..2 {
        let mut next = Vec::with_capacity(terms.len() * (order + 2));
        for (c, v) in terms {
            match v {
                Var::H(lag) => {
                    let s = lss[lag];
                    next.push((c * s.gain, Var::A(lag)));
                    next.push((c * s.intercept, Var::One));
                    next.extend((1..=order).map(|i| (c * s.gain * w[i - 1], Var::H(lag + i))));
                }
                other => next.push((c, other)),
            }
        }
        terms = next;
    }

    let mut alphas = vec![0.0; lss_length(order)];
    let mut beta = 0.0;
    let mut dropped_max: f64 = 0.0;
    for (c, v) in terms {
        match v {
            Var::A(lag) => alphas[lag] += c,
            Var::One => beta += c,
            Var::H(_) => dropped_max = dropped_max.max(c.abs()),
        }
    }
    Ok(CoeffSet { alphas, beta, dropped_max })
}

/// The printed closed forms for first and second order.
pub fn closed_form_coefficients(order: usize, w: &[f64], lss: &[Segment]) -> Result<CoeffSet> {
    if order != 1 && order != 2 {
        return Err(invalid(format!("closed forms exist for order 1 and 2 only, got {order}")));
    }
    check_expansion_inputs(order, w, lss)?;
    let g: Vec<f64> = lss.iter().map(|s| s.gain).collect();
    let r: Vec<f64> = lss.iter().map(|s| s.intercept).collect();
    let w1 = w[0];
    let (alphas, beta) = if order == 1 {
        (
            vec![g[0], g[0] * w1 * g[1], g[0] * g[1] * w1 * w1 * g[2]],
            r[0] + g[0] * w1 * r[1] + g[0] * w1 * w1 * g[1] * r[2],
        )
    } else {
        let w2 = w[1];
        (
            vec![
                g[0],
                g[0] * w1 * g[1],
                g[0] * g[1] * w1 * w1 * g[2] + g[0] * w2 * g[2],
                g[0] * g[1] * w1 * w2 * g[3] + g[0] * g[2] * w2 * w1 * g[3],
                g[0] * g[2] * w2 * w2 * g[4],
            ],
            r[0] + g[0] * w1 * r[1]
                + (g[0] * w1 * w1 * g[1] + g[0] * w2) * r[2]
                + (g[0] * w1 * w2 * g[1] + g[0] * w2 * w1 * g[2]) * r[3]
                + g[0] * w2 * w2 * g[2] * r[4],
        )
    };
    Ok(CoeffSet { alphas, beta, dropped_max: 0.0 })
}

/// Per-channel diagonal feedback weights w_{k,1..p}[c] of one layer.
pub fn channel_feedback(weights: &RnnWeights, layer: usize, channel: usize) -> Result<Vec<f64>> {
    weights.check_diagonal()?;
    Ok(weights.layers[layer].feedback.iter().map(|m| m.get(channel, channel)).collect())
}

/// Coefficients for one channel and LSS key, using that channel's feedback.
pub fn channel_coefficients(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    layer: usize,
    channel: usize,
    key: &LssKey,
) -> Result<CoeffSet> {
    let w = channel_feedback(weights, layer, channel)?;
    expand_coefficients(weights.config.order, &w, &key.segments(pwl))
}

/// Frequency-weighted average coefficient set over a table.
pub fn mean_field(table: &LssTable, mut coeffs: impl FnMut(&LssKey) -> Result<CoeffSet>) -> Result<CoeffSet> {
    if table.is_empty() {
        return Err(invalid("empty LSS table"));
    }
    let mut acc: Option<CoeffSet> = None;
    for (k, f) in table.iter_relfreq() {
        let c = coeffs(k)?;
        match acc.as_mut() {
            None => {
                acc = Some(CoeffSet {
                    alphas: c.alphas.iter().map(|a| a * f).collect(),
                    beta: c.beta * f,
                    dropped_max: c.dropped_max,
                })
            }
            Some(s) => {
                for (x, a) in s.alphas.iter_mut().zip(&c.alphas) {
                    *x += a * f;
                }
                s.beta += c.beta * f;
                s.dropped_max = s.dropped_max.max(c.dropped_max);
            }
        }
    }
    Ok(acc.expect("non-empty table"))
}

/// One row per (channel, LSS): channel, lss, count, rel_freq, alpha_0.., beta.
pub fn write_coefficient_csv<W: std::io::Write>(
    weights: &RnnWeights,
    pwl: &PwlApprox,
    layer: usize,
    tables: &[LssTable],
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n_alpha = lss_length(weights.config.order);
    let mut header = vec!["channel".to_string(), "lss".into(), "count".into(), "rel_freq".into()];
    header.extend((0..n_alpha).map(|j| format!("alpha_{j}")));
    header.push("beta".into());
    header.push("dropped_max".into());
    out.write_record(&header)?;
    for (c, table) in tables.iter().enumerate() {
        for (k, count) in &table.counts {
            let cs = channel_coefficients(weights, pwl, layer, c, k)?;
            let mut rec = vec![c.to_string(), k.to_string(), count.to_string(), table.relfreq(k).to_string()];
            rec.extend(cs.alphas.iter().map(|a| a.to_string()));
            rec.push(cs.beta.to_string());
            rec.push(cs.dropped_max.to_string());
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Vec<Segment> {
        vec![Segment { gain: 1.0, intercept: 0.0 }; n]
    }

    #[test]
    fn single_chord() {
        let p = build_pwl(1, 2.0).unwrap();
        assert_eq!(p.n_segments(), 3);
        let s = p.segments[1];
        assert!((s.gain - 2f64.tanh() / 2.0).abs() < 1e-15);
        assert!(s.intercept.abs() < 1e-15);
    }

    #[test]
    fn saturation_outside_span() {
        let p = build_pwl(8, 3.0).unwrap();
        assert_eq!(p.eval(10.0), 1.0);
        assert_eq!(p.eval(-10.0), -1.0);
        let (i, s) = select_segment(&p, 10.0);
        assert_eq!((i, s.gain), (9, 0.0));
        assert_eq!(select_segment(&p, -10.0).0, 0);
        assert!((p.edge_gap - (1.0 - 3f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn zero_maps_to_central_segment() {
        for n in [1, 2, 7, 8] {
            let p = build_pwl(n, 3.0).unwrap();
            let (i, s) = select_segment(&p, 0.0);
            assert!(!p.is_saturation(i));
            assert!(s.eval(0.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_go_left() {
        let p = build_pwl(4, 2.0).unwrap();
        // knots at -2, -1, 0, 1, 2
        assert_eq!(p.select(-1.0), 1);
        assert_eq!(p.select(-1.0 + 1e-12), 2);
        assert_eq!(p.select(2.0), 4);
        assert_eq!(p.select(-2.0), 0);
    }

    #[test]
    fn continuity_and_monotonicity() {
        for n in [1, 3, 8, 16] {
            let p = build_pwl(n, 3.0).unwrap();
            for &(x, _) in &p.knots[1..p.knots.len() - 1] {
                let eps = 1e-9;
                assert!((p.eval(x - eps) - p.eval(x + eps)).abs() < 1e-8);
            }
            for w in p.knots.windows(2) {
                assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=4000 {
                let x = -5.0 + 10.0 * i as f64 / 4000.0;
                let y = p.eval(x);
                assert!(y >= prev);
                prev = y;
            }
        }
    }

    /// Dense-grid sup error, independent of the stored value.
    fn oracle_sup_error(p: &PwlApprox) -> f64 {
        (0..=200_000)
            .map(|i| -3.0 + 6.0 * i as f64 / 200_000.0)
            .map(|x| (p.eval(x) - x.tanh()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn sup_error_shrinks() {
        let p8 = build_pwl(8, 3.0).unwrap();
        let e8 = oracle_sup_error(&p8);
        // chords through uniform tanh knots 0.75 apart
        assert!((e8 - 0.041_261_66).abs() < 1e-6, "{e8}");
        assert!((p8.sup_error - e8).abs() < 1e-6);
        let mut prev = e8;
        for n in [16, 32] {
            let e = oracle_sup_error(&build_pwl(n, 3.0).unwrap());
            assert!(e <= prev / 2.0, "n={n}: {e} vs {prev}");
            prev = e;
        }
    }

    #[test]
    fn unit_gain_first_order() {
        let c = expand_coefficients(1, &[0.5], &unit(3)).unwrap();
        assert_eq!(c.alphas, vec![1.0, 0.5, 0.25]);
        assert_eq!(c.beta, 0.0);
    }

    #[test]
    fn unit_gain_second_order() {
        let c = expand_coefficients(2, &[0.5, 0.25], &unit(5)).unwrap();
        let expect = [1.0, 0.5, 0.5, 0.25, 0.0625];
        for (a, e) in c.alphas.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(c.beta, 0.0);
    }

    #[test]
    fn first_order_beta() {
        let lss = [
            Segment { gain: 0.8, intercept: 0.1 },
            Segment { gain: 0.6, intercept: -0.2 },
            Segment { gain: 0.3, intercept: 0.5 },
        ];
        let w = 0.7;
        let c = expand_coefficients(1, &[w], &lss).unwrap();
        let beta = 0.1 + 0.8 * w * -0.2 + 0.8 * w * w * 0.6 * 0.5;
        assert!((c.beta - beta).abs() < 1e-15);
    }

    #[test]
    fn fourth_order_has_nine() {
        let c = expand_coefficients(4, &[0.3, 0.2, 0.1, 0.05], &unit(9)).unwrap();
        assert_eq!(c.alphas.len(), 9);
        assert!(closed_form_coefficients(4, &[0.3, 0.2, 0.1, 0.05], &unit(9)).is_err());
    }

    #[test]
    fn length_errors() {
        assert!(expand_coefficients(1, &[0.5], &unit(5)).is_err());
        assert!(expand_coefficients(2, &[0.5], &unit(5)).is_err());
    }

    #[test]
    fn second_order_with_zero_w2_matches_first() {
        let lss = [
            Segment { gain: 0.9, intercept: 0.05 },
            Segment { gain: 0.7, intercept: -0.1 },
            Segment { gain: 0.4, intercept: 0.3 },
            Segment { gain: 0.2, intercept: 0.6 },
            Segment { gain: 0.1, intercept: 0.8 },
        ];
        let two = closed_form_coefficients(2, &[0.6, 0.0], &lss).unwrap();
        let one = closed_form_coefficients(1, &[0.6], &lss[..3]).unwrap();
        assert_eq!(&two.alphas[..3], &one.alphas[..]);
        assert_eq!(&two.alphas[3..], &[0.0, 0.0]);
        assert!((two.beta - one.beta).abs() < 1e-15);
    }

    #[test]
    fn truncation_bound() {
        let lss: Vec<Segment> = (0..3).map(|_| Segment { gain: 1.0, intercept: 0.0 }).collect();
        let c = expand_coefficients(1, &[0.5], &lss).unwrap();
        assert!((c.dropped_max - 0.125).abs() < 1e-15);
        let c = expand_coefficients(1, &[-0.4], &lss).unwrap();
        assert!(c.dropped_max <= 0.125);
    }

    #[test]
    fn lss_from_constant_central() {
        let p = build_pwl(8, 3.0).unwrap();
        let pre = vec![vec![0.1, -0.2]; 10];
        let ex = lss_from_preactivations(&pre, 2, 1, &p);
        for t in &ex.tables {
            assert_eq!(t.distinct(), 1);
            assert_eq!(t.total, 8);
            let s: f64 = t.iter_relfreq().map(|(_, f)| f).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(ex.warmup.iter().filter(|w| **w).count(), 2);
    }
}
