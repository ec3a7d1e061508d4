//! Synthetic RSRP-like feature streams with injected faults.
//!
//! A fault is a transmit-power reduction: every component of the normal
//! mixture moves down by the impact in dB. Each sequence switches from normal
//! to faulty at a uniformly drawn onset and stays faulty to its end.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gmm::{Component, GaussianMixture};
use crate::rng;

const DEFAULT_SCENARIO: &str = include_str!("../config/default_scenario.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Status {
    N,
    F,
}

impl Status {
    pub fn is_fault(self) -> bool {
        self == Status::F
    }

    pub fn as_char(self) -> char {
        match self {
            Status::N => 'N',
            Status::F => 'F',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'N' => Some(Status::N),
            'F' => Some(Status::F),
            _ => None,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub n_features: usize,
    pub seq_len: usize,
    pub fault_impact_db: f64,
    pub normal_mixture: GaussianMixture,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

fn default_version() -> u32 {
    1
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_SCENARIO).expect("bundled scenario config parses")
    }
}

impl ScenarioConfig {
    pub fn with_impact(mut self, impact_db: f64) -> Self {
        self.fault_impact_db = impact_db;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 3 {
            return Err(invalid(format!("seq_len must be >= 3, got {}", self.seq_len)));
        }
        if self.n_features == 0 {
            return Err(invalid("n_features must be >= 1"));
        }
        if !(self.fault_impact_db >= 0.0) {
            return Err(invalid(format!("fault impact must be >= 0 dB, got {}", self.fault_impact_db)));
        }
        Ok(())
    }

    pub fn fault_mixture(&self) -> Result<GaussianMixture> {
        shift_mixture(&self.normal_mixture, self.fault_impact_db)
    }
}

/// Translate every component down by `impact_db`.
pub fn shift_mixture(mix: &GaussianMixture, impact_db: f64) -> Result<GaussianMixture> {
    if !(impact_db >= 0.0) {
        return Err(invalid(format!("impact must be >= 0, got {impact_db}")));
    }
    GaussianMixture::new(
        mix.components()
            .iter()
            .map(|c| Component { weight: c.weight, mean: c.mean - impact_db, sd: c.sd })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledSequence {
    /// seq_len rows of n_features values (dB).
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Status>,
    /// 1-based instant of the N→F switch; 1 means the whole sequence is faulty.
    pub fault_onset: Option<usize>,
}

impl LabelledSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.labels.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

pub fn generate_sequence(cfg: &ScenarioConfig, seed: u64) -> Result<LabelledSequence> {
    cfg.validate()?;
    let fault = cfg.fault_mixture()?;
    let mut r = rng::stream(seed);
    let onset = r.random_range(1..=cfg.seq_len);
    let mut features = Vec::with_capacity(cfg.seq_len);
    let mut labels = Vec::with_capacity(cfg.seq_len);
    for t in 1..=cfg.seq_len {
        let status = if t >= onset { Status::F } else { Status::N };
        let mix = match status {
            Status::N => &cfg.normal_mixture,
            Status::F => &fault,
        };
        features.push((0..cfg.n_features).map(|_| mix.sample_one(&mut r)).collect());
        labels.push(status);
    }
    Ok(LabelledSequence { features, labels, fault_onset: Some(onset) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub split_seeds: Vec<(SplitKind, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<LabelledSequence>,
    pub val: Vec<LabelledSequence>,
    pub test: Vec<LabelledSequence>,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &[LabelledSequence] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn total_instants(&self) -> usize {
        SplitKind::ALL.iter().map(|&k| self.split(k).iter().map(|s| s.len()).sum::<usize>()).sum()
    }

    /// Every split concatenated in train, val, test order.
    pub fn all_sequences(&self) -> Vec<LabelledSequence> {
        let mut v = self.train.clone();
        v.extend(self.val.iter().cloned());
        v.extend(self.test.iter().cloned());
        v
    }
}

pub fn generate_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut split_seeds = Vec::new();
    let mut splits: Vec<Vec<LabelledSequence>> = Vec::new();
    for kind in SplitKind::ALL {
        let n = match kind {
            SplitKind::Train => cfg.n_train,
            SplitKind::Val => cfg.n_val,
            SplitKind::Test => cfg.n_test,
        };
        let split_seed = rng::child_seed(seed, kind.name());
        split_seeds.push((kind, split_seed));
        let seqs = (0..n)
            .map(|i| generate_sequence(cfg, rng::indexed_seed(split_seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        splits.push(seqs);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset { meta: DatasetMeta { config: cfg.clone(), seed, split_seeds }, train, val, test })
}

/// Labels of consecutive sequences joined into one stream.
pub fn stream_labels(seqs: &[LabelledSequence]) -> Vec<Status> {
    seqs.iter().flat_map(|s| s.labels.iter().copied()).collect()
}

pub fn stream_features(seqs: &[LabelledSequence]) -> Vec<Vec<f64>> {
    seqs.iter().flat_map(|s| s.features.iter().cloned()).collect()
}

/// One row per instant: seq_id, t, label, f1..fm (t is 1-based).
pub fn write_split_csv<W: Write>(seqs: &[LabelledSequence], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let m = seqs.first().and_then(|s| s.features.first()).map_or(0, |r| r.len());
    let mut header = vec!["seq_id".to_string(), "t".to_string(), "label".to_string()];
    header.extend((1..=m).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for (id, s) in seqs.iter().enumerate() {
        for (t, (row, label)) in s.features.iter().zip(&s.labels).enumerate() {
            let mut rec = vec![id.to_string(), (t + 1).to_string(), label.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_split_csv<R: Read>(r: R) -> Result<Vec<LabelledSequence>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut seqs: Vec<LabelledSequence> = Vec::new();
    let mut current: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| invalid("short dataset row"));
        let id: usize = field(0)?.parse().map_err(|_| invalid("bad seq_id"))?;
        let label = field(2)?
            .chars()
            .next()
            .and_then(Status::from_char)
            .ok_or_else(|| invalid("bad label"))?;
        let row = (3..rec.len())
            .map(|i| field(i)?.parse::<f64>().map_err(|_| invalid("bad feature value")))
            .collect::<Result<Vec<_>>>()?;
        if current != Some(id) {
            seqs.push(LabelledSequence { features: Vec::new(), labels: Vec::new(), fault_onset: None });
            current = Some(id);
        }
        let s = seqs.last_mut().expect("pushed above");
        s.features.push(row);
        s.labels.push(label);
    }
    for s in &mut seqs {
        s.fault_onset = s.labels.iter().position(|l| l.is_fault()).map(|i| i + 1);
    }
    Ok(seqs)
}

pub fn write_dataset(ds: &Dataset, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for kind in SplitKind::ALL {
        let p = dir.join(format!("{}.csv", kind.name()));
        write_split_csv(ds.split(kind), std::fs::File::create(&p)?)?;
        paths.push(p);
    }
    let p = dir.join("dataset.json");
    std::fs::write(&p, serde_json::to_string_pretty(&ds.meta)?)?;
    paths.push(p);
    Ok(paths)
}

pub fn read_dataset(dir: &std::path::Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
    let load = |k: SplitKind| -> Result<Vec<LabelledSequence>> {
        read_split_csv(std::fs::File::open(dir.join(format!("{}.csv", k.name())))?)
    };
    let ds = Dataset { train: load(SplitKind::Train)?, val: load(SplitKind::Val)?, test: load(SplitKind::Test)?, meta };
    if ds.train.iter().any(|s| s.features.iter().any(|r| r.len() != ds.meta.config.n_features)) {
        return Err(Error::DimensionMismatch {
            expected: ds.meta.config.n_features,
            actual: 0,
            context: "dataset feature width",
        });
    }
    Ok(ds)
}
