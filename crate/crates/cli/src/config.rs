use std::path::Path;

use lobelens::distmodel::Weighting;
use lobelens::eval::EvalOptions;
use lobelens::linearizer::{build_pwl, PwlApprox, DEFAULT_SEGMENTS, DEFAULT_SPAN};
use lobelens::rnn::{Preset, RnnConfig, TrainHyper};
use lobelens::scenario::ScenarioConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: usize,
    pub order: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { layers: 1, order: 1, width: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwlConfig {
    pub segments: usize,
    pub span: f64,
}

impl Default for PwlConfig {
    fn default() -> Self {
        Self { segments: DEFAULT_SEGMENTS, span: DEFAULT_SPAN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sequences in the fresh evaluation stream.
    pub sequences: usize,
    pub bins: usize,
    pub threshold: f64,
    pub weighting: Weighting,
    pub shape_weighting: Weighting,
    /// Layer-1 channel used for the lobe table.
    pub table_channel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            sequences: 500,
            bins: o.bins,
            threshold: o.threshold,
            weighting: o.weighting,
            shape_weighting: o.shape_weighting,
            table_channel: 0,
        }
    }
}

/// Bounds checked by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub auc_gap: f64,
    pub output_l1: f64,
    pub state_rel_rmse: f64,
    pub error_mass_rel: f64,
    pub shape_l1: f64,
    pub identity_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { auc_gap: 0.03, output_l1: 0.15, state_rel_rmse: 0.05, error_mass_rel: 0.20, shape_l1: 0.15, identity_abs: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub network: NetworkConfig,
    pub train: TrainHyper,
    pub pwl: PwlConfig,
    pub eval: EvalConfig,
    /// Seeds swept by `study`.
    pub study_seeds: Vec<u64>,
    /// Configurations swept by `study`, as (layers, order).
    pub study_configs: Vec<(usize, usize)>,
    pub tolerances: Tolerances,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: ScenarioConfig::default(),
            network: NetworkConfig::default(),
            train: TrainHyper::default(),
            pwl: PwlConfig::default(),
            eval: EvalConfig::default(),
            study_seeds: vec![1],
            study_configs: Preset::PAPER.iter().map(|p| p.layers_and_order()).collect(),
            tolerances: Tolerances::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scenario.validate()?;
        self.rnn_config()?;
        build_pwl(self.pwl.segments, self.pwl.span)?;
        if self.eval.sequences == 0 {
            return Err(CliError::config("eval.sequences must be >= 1"));
        }
        if self.eval.bins < 2 {
            return Err(CliError::config("eval.bins must be >= 2"));
        }
        if self.eval.table_channel >= self.network.width {
            return Err(CliError::config("eval.table_channel must be below the hidden width"));
        }
        if self.study_seeds.is_empty() || self.study_configs.len() < 2 {
            return Err(CliError::config("study needs at least one seed and two configurations"));
        }
        for &(l, o) in &self.study_configs {
            RnnConfig::new(self.scenario.n_features, l, o, self.network.width)?;
        }
        Ok(())
    }

    pub fn rnn_config(&self) -> CliResult<RnnConfig> {
        Ok(RnnConfig::new(self.scenario.n_features, self.network.layers, self.network.order, self.network.width)?)
    }

    pub fn pwl(&self) -> CliResult<PwlApprox> {
        Ok(build_pwl(self.pwl.segments, self.pwl.span)?)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.eval.threshold,
            bins: self.eval.bins,
            weighting: self.eval.weighting,
            shape_weighting: self.eval.shape_weighting,
            principal_only: false,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper { seed: self.seed, ..self.train.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub impact: Option<f64>,
    pub layers: Option<usize>,
    pub order: Option<usize>,
    pub segments: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = self.impact {
            cfg.scenario.fault_impact_db = i;
        }
        if let Some(l) = self.layers {
            cfg.network.layers = l;
        }
        if let Some(o) = self.order {
            cfg.network.order = o;
        }
        if let Some(n) = self.segments {
            cfg.pwl.segments = n;
        }
    }
}
