//! Fixed-bin histograms over a shared range.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("histogram range [{lo}, {hi}] with {bins} bins")));
        }
        Ok(Self { lo, hi, counts: vec![0; bins] })
    }

    /// Range spanning all samples of every slice; widened when degenerate.
    pub fn joint_range(sets: &[&[f64]]) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in sets {
            for &x in s.iter() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return None;
        }
        if hi - lo < 1e-12 {
            Some((lo - 0.5, hi + 0.5))
        } else {
            Some((lo, hi))
        }
    }

    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        let mut h = Self::new(lo, hi, bins)?;
        for &x in samples {
            h.add(x);
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = self.width();
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    /// Samples outside the range are clamped into the end bins.
    pub fn add(&mut self, x: f64) {
        let n = self.bins();
        let pos = ((x - self.lo) / self.width()).floor();
        let i = if pos < 0.0 {
            0
        } else if pos >= n as f64 {
            n - 1
        } else {
            pos as usize
        };
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_left", "bin_right", "count"])?;
        for i in 0..self.bins() {
            let (l, r) = self.edges(i);
            out.write_record([l.to_string(), r.to_string(), self.counts[i].to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}
