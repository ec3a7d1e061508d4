use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lobelens::distmodel::{channel_lobe_table, write_lobe_table_csv};
use lobelens::eval::{
    diminishing_returns_report, evaluate, roc, svg, write_decomposition_csv, write_study_csv, EvalArtifacts, Evaluation,
    StudyRow,
};
use lobelens::histogram::Histogram;
use lobelens::linearizer::{extract_lss, write_coefficient_csv};
use lobelens::rng::child_seed;
use lobelens::rnn::{forward_stream, train, Polarity, RnnConfig, RnnWeights};
use lobelens::scenario::{
    generate_dataset, read_dataset, read_split_csv, stream_labels, write_dataset, write_split_csv, Dataset,
    LabelledSequence, ScenarioConfig, Status,
};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{now_unix, sha256_file, ArtifactRecord, RunManifest, Seeds, StepRecord, StepStatus};

/// Fresh evaluation sequences drawn independently of the dataset splits.
pub fn eval_stream(scenario: &ScenarioConfig, seed: u64, sequences: usize) -> CliResult<Vec<LabelledSequence>> {
    let mut cfg = scenario.clone();
    cfg.n_train = 0;
    cfg.n_val = 0;
    cfg.n_test = sequences;
    Ok(generate_dataset(&cfg, eval_seed(seed))?.test)
}

pub fn eval_seed(seed: u64) -> u64 {
    child_seed(seed, "eval-stream")
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Outcome of `compare`'s tolerance checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

fn check(name: &str, value: f64, bound: f64) -> Check {
    Check { name: name.into(), value, bound, pass: value <= bound }
}

struct Evaluated {
    weights: RnnWeights,
    dataset: Dataset,
    labels: Vec<Status>,
    artifacts: EvalArtifacts,
}

/// One run directory, keyed by the config hash.
pub struct Run {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub manifest: RunManifest,
}

impl Run {
    pub fn open(out: &Path, config: PipelineConfig) -> CliResult<Self> {
        config.validate()?;
        let hash = config.hash();
        let dir = out.join(format!("run-{}", &hash[..16]));
        std::fs::create_dir_all(&dir)?;
        let manifest = match RunManifest::load(&dir)? {
            Some(m) if m.config_hash == hash => m,
            _ => RunManifest::new(
                hash,
                Seeds {
                    dataset: config.seed,
                    train: config.seed,
                    eval_stream: eval_seed(config.seed),
                    study: config.study_seeds.clone(),
                },
            ),
        };
        let mut run = Self { dir, config, manifest };
        write_text(&run.dir.join("config.json"), &(run.config.to_json() + "\n"))?;
        run.manifest.save(&run.dir)?;
        Ok(run)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&mut self, step: &str, files: &[PathBuf], status: StepStatus, error: Option<String>) -> CliResult<()> {
        let mut artifacts = Vec::new();
        for p in files {
            let (sha256, bytes) = sha256_file(p)?;
            let rel = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            artifacts.push(ArtifactRecord { path: rel, sha256, bytes });
        }
        self.manifest.steps.insert(step.into(), StepRecord { status, artifacts, error, finished_unix: now_unix() });
        self.manifest.save(&self.dir)
    }

    /// Run one step; on failure whatever it left in its directory is recorded as invalid.
    fn step<T>(&mut self, name: &str, body: impl FnOnce(&Run) -> CliResult<(T, Vec<PathBuf>)>) -> CliResult<T> {
        let dir = self.path(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        match body(self) {
            Ok((value, files)) => {
                self.record(name, &files, StepStatus::Valid, None)?;
                Ok(value)
            }
            Err(e) => {
                let left = files_under(&dir);
                self.record(name, &left, StepStatus::Invalid, Some(e.to_string()))?;
                Err(e)
            }
        }
    }

    pub fn gen(&mut self) -> CliResult<(Dataset, Vec<LabelledSequence>)> {
        self.step("gen", |run| {
            let cfg = &run.config;
            let ds = generate_dataset(&cfg.scenario, cfg.seed)?;
            let dir = run.path("gen");
            let mut files = write_dataset(&ds, &dir)?;
            let stream = eval_stream(&cfg.scenario, cfg.seed, cfg.eval.sequences)?;
            let p = dir.join("eval.csv");
            let mut f = create(&p)?;
            write_split_csv(&stream, &mut f)?;
            f.flush()?;
            files.push(p);
            files.sort();
            Ok(((ds, stream), files))
        })
    }

    pub fn data(&mut self) -> CliResult<(Dataset, Vec<LabelledSequence>)> {
        if self.manifest.is_valid("gen") {
            let dir = self.path("gen");
            let ds = read_dataset(&dir)?;
            let stream = read_split_csv(File::open(dir.join("eval.csv"))?)?;
            return Ok((ds, stream));
        }
        self.gen()
    }

    pub fn train(&mut self) -> CliResult<RnnWeights> {
        let (ds, _) = self.data()?;
        self.step("train", |run| {
            let rc = run.config.rnn_config()?;
            let res = train(&rc, &ds.train, &run.config.hyper())?;
            let wp = run.path("train/weights.json");
            write_json(&wp, &res.weights)?;
            let lp = run.path("train/loss.csv");
            let mut text = String::from("epoch,loss\n");
            for (i, l) in res.loss_history.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            write_text(&lp, &text)?;
            Ok((res.weights, vec![lp, wp]))
        })
    }

    pub fn weights(&mut self) -> CliResult<RnnWeights> {
        if self.manifest.is_valid("train") {
            return read_json(&self.path("train/weights.json"));
        }
        self.train()
    }

    pub fn linearize(&mut self) -> CliResult<()> {
        let w = self.weights()?;
        let (_, stream) = self.data()?;
        self.step("linearize", |run| {
            let pwl = run.config.pwl()?;
            let trace = forward_stream(&w, &stream)?;
            let mut files = Vec::new();
            let p = run.path("linearize/pwl.csv");
            let mut f = create(&p)?;
            pwl.write_csv(&mut f)?;
            f.flush()?;
            files.push(p);
            for k in 0..w.config.n_layers() {
                let ex = extract_lss(&w, &trace, &pwl, k)?;
                let lp = run.path(&format!("linearize/lss_layer{}.json", k + 1));
                let tables: Vec<serde_json::Value> = ex.tables.iter().map(|t| t.to_json()).collect();
                write_json(&lp, &tables)?;
                let cp = run.path(&format!("linearize/coefficients_layer{}.csv", k + 1));
                let mut f = create(&cp)?;
                write_coefficient_csv(&w, &pwl, k, &ex.tables, &mut f)?;
                f.flush()?;
                files.extend([cp, lp]);
            }
            files.sort();
            Ok(((), files))
        })
    }

    fn evaluate(&mut self) -> CliResult<Evaluated> {
        let weights = self.weights()?;
        let (dataset, stream) = self.data()?;
        let cfg = &self.config;
        let fault = cfg.scenario.fault_mixture()?;
        let artifacts =
            evaluate(&weights, &cfg.pwl()?, &stream, &cfg.scenario.normal_mixture, &fault, &cfg.eval_options())?;
        Ok(Evaluated { labels: stream_labels(&stream), weights, dataset, artifacts })
    }

    pub fn model(&mut self) -> CliResult<()> {
        let Evaluated { artifacts: a, labels, .. } = self.evaluate()?;
        self.step("model", |run| {
            let width = a.trace.layers[0].state.first().map_or(0, |h| h.len());
            let tp = run.path("model/trace.csv");
            let mut f = create(&tp)?;
            let mut header = vec!["n".to_string(), "label".into(), "rnn_output".into(), "model_output".into()];
            header.extend((0..width).map(|c| format!("rnn_h1_{c}")));
            header.extend((0..width).map(|c| format!("model_h1_{c}")));
            writeln!(f, "{}", header.join(","))?;
            for n in 0..a.trace.output.len() {
                let mut row = vec![n.to_string(), labels[n].to_string(), a.trace.output[n].to_string(), a.run.output[n].to_string()];
                row.extend(a.trace.layers[0].state[n].iter().map(|v| v.to_string()));
                row.extend(a.run.layers[0].state[n].iter().map(|v| v.to_string()));
                writeln!(f, "{}", row.join(","))?;
            }
            f.flush()?;
            let ep = run.path("model/lobes_error.csv");
            let mut f = create(&ep)?;
            a.detailed.write_lobe_csv(&mut f)?;
            f.flush()?;
            let sp = run.path("model/lobes_shape.csv");
            let mut f = create(&sp)?;
            a.shape.write_lobe_csv(&mut f)?;
            f.flush()?;
            Ok(((), vec![ep, sp, tp]))
        })
    }

    pub fn compare(&mut self) -> CliResult<Vec<Check>> {
        let Evaluated { weights: w, dataset: ds, artifacts: a, labels: all_labels } = self.evaluate()?;
        let checks = self.step("compare", |run| {
            let cfg = &run.config;
            let e = &a.evaluation;
            let mut files = Vec::new();

            let p = run.path("compare/evaluation.json");
            write_json(&p, e)?;
            files.push(p);

            let p = run.path("compare/decomposition.csv");
            let mut f = create(&p)?;
            write_decomposition_csv(&e.decomposition, &mut f)?;
            f.flush()?;
            files.push(p);

            let table = channel_lobe_table(
                &w,
                &cfg.pwl()?,
                &ds.all_sequences(),
                &cfg.scenario.normal_mixture,
                &cfg.scenario.fault_mixture()?,
                cfg.eval.table_channel,
            )?;
            let p = run.path("compare/lobe_table.csv");
            let mut f = create(&p)?;
            write_lobe_table_csv(&table, &mut f)?;
            f.flush()?;
            files.push(p);

            let skip = a.detailed.fss_len - 1;
            let labels = &all_labels[skip..];
            let pol = w.polarity;
            let rs: Vec<f64> = a.trace.output[skip..].iter().map(|&y| pol.oriented(y)).collect();
            let ms: Vec<f64> = a.run.output[skip..].iter().map(|&y| pol.oriented(y)).collect();
            let (rr, mr) = (roc(&rs, labels)?, roc(&ms, labels)?);
            let p = run.path("compare/roc.csv");
            let mut text = String::from("curve,fpr,tpr\n");
            for (name, c) in [("rnn", &rr), ("model", &mr)] {
                for (x, y) in &c.points {
                    text.push_str(&format!("{name},{x},{y}\n"));
                }
            }
            write_text(&p, &text)?;
            files.push(p);
            let p = run.path("compare/roc.svg");
            write_text(&p, &svg::lines("ROC", &[("RNN", rr.points.clone()), ("main model", mr.points.clone())]))?;
            files.push(p);

            let (lo, hi) = Histogram::joint_range(&[&a.trace.output[skip..], &a.run.output[skip..]])
                .ok_or_else(|| CliError::numeric("empty output range"))?;
            let hist = |xs: &[f64]| Histogram::from_samples(xs, lo, hi, cfg.eval.bins).map(|h| h.probabilities());
            let p = run.path("compare/output_hist.svg");
            write_text(
                &p,
                &svg::histograms(
                    "output distribution",
                    lo,
                    hi,
                    &[("RNN", hist(&a.trace.output[skip..])?), ("main model", hist(&a.run.output[skip..])?)],
                ),
            )?;
            files.push(p);

            let checks = compare_checks(e, &a, w.polarity, cfg);
            let p = run.path("compare/checks.json");
            write_json(&p, &checks)?;
            files.push(p);
            files.sort();
            Ok((checks, files))
        })?;
        if let Some(bad) = checks.iter().find(|c| !c.pass) {
            return Err(CliError::assertion(format!("{} = {} exceeds {}", bad.name, bad.value, bad.bound)));
        }
        Ok(checks)
    }

    pub fn study(&mut self) -> CliResult<Vec<StudySeedRows>> {
        self.step("study", |run| {
            let cfg = &run.config;
            let pwl = cfg.pwl()?;
            let fault = cfg.scenario.fault_mixture()?;
            let configs: Vec<RnnConfig> = cfg
                .study_configs
                .iter()
                .map(|&(l, o)| RnnConfig::new(cfg.scenario.n_features, l, o, cfg.network.width))
                .collect::<lobelens::Result<_>>()?;
            let mut all = Vec::new();
            let mut files = Vec::new();
            for &seed in &cfg.study_seeds {
                let ds = generate_dataset(&cfg.scenario, seed)?;
                let stream = eval_stream(&cfg.scenario, seed, cfg.eval.sequences)?;
                let hyper = lobelens::rnn::TrainHyper { seed, ..cfg.train.clone() };
                let rows = diminishing_returns_report(
                    &configs,
                    &ds.train,
                    &stream,
                    &cfg.scenario.normal_mixture,
                    &fault,
                    &hyper,
                    &pwl,
                    &cfg.eval_options(),
                )?;
                let p = run.path(&format!("study/seed{seed}.csv"));
                let mut f = create(&p)?;
                write_study_csv(&rows, &mut f)?;
                f.flush()?;
                files.push(p);
                all.push(StudySeedRows { seed, rows });
            }
            let summary = summarize_study(&all);
            let p = run.path("study/summary.json");
            write_json(&p, &summary)?;
            files.push(p);
            let p = run.path("study/summary.svg");
            let series = |f: fn(&StudyMean) -> f64| summary.iter().enumerate().map(|(i, m)| (i as f64, f(m))).collect();
            write_text(
                &p,
                &svg::lines(
                    "mean over seeds by configuration",
                    &[("AUC gain", series(|m| m.auc_gain)), ("sidelobe error", series(|m| m.sidelobe_error))],
                ),
            )?;
            files.push(p);
            files.sort();
            Ok((all, files))
        })
    }

    /// Collate headline numbers and the artifact index of every valid step.
    pub fn report(&mut self) -> CliResult<PathBuf> {
        if !self.manifest.steps.keys().any(|s| s != "report") {
            return Err(CliError::config("nothing to report: run another subcommand first"));
        }
        let index: Vec<(String, ArtifactRecord)> = self
            .manifest
            .artifacts()
            .filter(|(s, _)| *s != "report")
            .map(|(s, a)| (s.to_string(), a.clone()))
            .collect();
        let evaluation: Option<Evaluation> = self
            .manifest
            .is_valid("compare")
            .then(|| read_json(&self.path("compare/evaluation.json")))
            .transpose()?;
        let study: Option<Vec<StudyMean>> =
            self.manifest.is_valid("study").then(|| read_json(&self.path("study/summary.json"))).transpose()?;
        self.step("report", |run| {
            let mut md = format!("# Run {}\n\n", &run.manifest.config_hash[..16]);
            if let Some(e) = &evaluation {
                md.push_str(&format!(
                    "## Comparison ({})\n\n| metric | value |\n|---|---|\n| RNN AUC | {:.4} |\n| main-model AUC | {:.4} |\n| agreement | {:.4} |\n| output L1 | {:.4} |\n| shape L1 N / F | {:.4} / {:.4} |\n| RNN error rate | {:.4} |\n| predicted error | {:.4} |\n| main / sidelobe error | {:.4} / {:.4} |\n\n",
                    e.label,
                    e.rnn_auc,
                    e.model_auc,
                    e.agreement,
                    e.output_l1,
                    e.shape_l1[0],
                    e.shape_l1[1],
                    e.rnn_error_rate,
                    e.predicted_error,
                    e.decomposition.main(),
                    e.decomposition.side()
                ));
            }
            if let Some(s) = &study {
                md.push_str("## Study (mean over seeds)\n\n| config | RNN AUC | AUC gain | sidelobe error | principal sidelobes |\n|---|---|---|---|---|\n");
                for m in s {
                    md.push_str(&format!(
                        "| {} | {:.4} | {:+.5} | {:.4} | {} |\n",
                        m.label, m.rnn_auc, m.auc_gain, m.sidelobe_error, m.principal_sidelobes
                    ));
                }
                md.push('\n');
            }
            md.push_str("## Artifacts\n\n| step | path | sha256 |\n|---|---|---|\n");
            for (s, a) in &index {
                md.push_str(&format!("| {s} | {} | {} |\n", a.path, &a.sha256[..16]));
            }
            let p = run.path("report/report.md");
            write_text(&p, &md)?;
            Ok((p.clone(), vec![p]))
        })
    }

    pub fn run_step(&mut self, name: &str) -> CliResult<serde_json::Value> {
        Ok(match name {
            "gen" => {
                self.gen()?;
                serde_json::Value::Null
            }
            "train" => {
                self.train()?;
                serde_json::Value::Null
            }
            "linearize" => {
                self.linearize()?;
                serde_json::Value::Null
            }
            "model" => {
                self.model()?;
                serde_json::Value::Null
            }
            "compare" => serde_json::to_value(self.compare()?)?,
            "study" => serde_json::to_value(summarize_study(&self.study()?))?,
            "report" => serde_json::Value::String(self.report()?.display().to_string()),
            other => return Err(CliError::config(format!("unknown step {other}"))),
        })
    }
}

fn compare_checks(e: &Evaluation, a: &EvalArtifacts, polarity: Polarity, cfg: &PipelineConfig) -> Vec<Check> {
    let t = &cfg.tolerances;
    let lobe_sum: f64 = e.decomposition.lobes.iter().map(|l| l.fp + l.fn_).sum();
    let identity = lobelens::eval::mixture_error(&a.detailed, cfg.eval.threshold, polarity)
        .map_or(f64::INFINITY, |m| (m - lobe_sum).abs());
    let rel = if e.rnn_error_rate > 0.0 {
        (e.predicted_error - e.rnn_error_rate).abs() / e.rnn_error_rate
    } else {
        e.predicted_error
    };
    vec![
        check("auc_gap", (e.rnn_auc - e.model_auc).abs(), t.auc_gap),
        check("output_l1", e.output_l1, t.output_l1),
        check("state_rel_rmse", e.state_rel_rmse.iter().copied().fold(0.0, f64::max), t.state_rel_rmse),
        check("error_mass_rel", rel, t.error_mass_rel),
        check("shape_l1", e.shape_l1[0].max(e.shape_l1[1]), t.shape_l1),
        check("decomposition_identity", identity, t.identity_abs),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySeedRows {
    pub seed: u64,
    pub rows: Vec<StudyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMean {
    pub label: String,
    pub rnn_auc: f64,
    /// Mean AUC change from the previous configuration; 0 for the first.
    pub auc_gain: f64,
    pub sidelobe_error: f64,
    pub principal_sidelobes: usize,
}

pub fn summarize_study(all: &[StudySeedRows]) -> Vec<StudyMean> {
    let Some(first) = all.first() else { return Vec::new() };
    let n = all.len() as f64;
    (0..first.rows.len())
        .map(|i| {
            let mean = |f: &dyn Fn(&StudyRow) -> f64| all.iter().map(|s| f(&s.rows[i])).sum::<f64>() / n;
            StudyMean {
                label: first.rows[i].evaluation.label.clone(),
                rnn_auc: mean(&|r| r.evaluation.rnn_auc),
                auc_gain: mean(&|r| r.auc_gain.unwrap_or(0.0)),
                sidelobe_error: mean(&|r| r.sidelobe_error),
                principal_sidelobes: first.rows[i].principal_sidelobes,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_step_marks_leftovers_invalid() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = Run::open(tmp.path(), PipelineConfig::default()).unwrap();
        let r: CliResult<()> = run.step("model", |run| {
            write_text(&run.path("model/partial.csv"), "a,b\n")?;
            Err(CliError::numeric("boom"))
        });
        assert_eq!(r.unwrap_err().exit_code(), 3);
        let rec = &run.manifest.steps["model"];
        assert_eq!(rec.status, StepStatus::Invalid);
        assert_eq!(rec.artifacts.len(), 1);
        assert_eq!(rec.artifacts[0].path, "model/partial.csv");
        assert!(!run.manifest.is_valid("model"));
        let saved = RunManifest::load(&run.dir).unwrap().unwrap();
        assert_eq!(saved.steps["model"].status, StepStatus::Invalid);
        assert_eq!(saved.steps["model"].error.as_deref(), Some("Numeric: boom"));
    }

    #[test]
    fn study_summary_means() {
        assert!(summarize_study(&[]).is_empty());
    }
}
