//! Experiment configuration, run directories, delta sweeps and reports.
//!
//! A run directory holds `config.toml` (the exact configuration used),
//! `history.csv`, `freeze_log.csv`, `checkpoint.bin`, `metrics.json`,
//! `augmented_seeds.tsv` when the iterative phase is enabled, and
//! `scores_epoch{N}.csv` for requested epochs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_sections, save_sections};
use crate::data::{generate_synthetic_pair, load_kg_pair, split_seeds, AlignmentSeedSet, DatasetLayout, KgPair, SyntheticSpec};
use crate::encoders::{EncoderConfig, EncoderParams, PairFeatures};
use crate::error::{PmfError, Result};
use crate::inference::{evaluate, greedy_match, MatchResult, MetricsReport};
use crate::integration::{EpochScores, IntegrationOptions, ThresholdSchedule};
use crate::modality::{Modality, Side};
use crate::objectives::LossConfig;
use crate::training::{joint_embeddings, train_pmf, StepContext, TrainConfig, TrainHistory, TrainSetup, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory in the on-disk layout; mutually exclusive with `synthetic`.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Fraction of alignment pairs used for supervision (train + validation).
    pub seed_ratio: f64,
    /// Share of the supervised pairs held out for validation.
    pub valid_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: Some(SyntheticSpec::default()),
            seed_ratio: 0.3,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Every score fixed at 1 (no freezing, unweighted fusion).
    pub disable_relevance: bool,
    /// Scores weight fusion, but masks are all ones.
    pub disable_freezing: bool,
    /// Masks apply, but fusion weights are all ones.
    pub disable_fusion_weighting: bool,
    /// `"epoch:N"`: scores computed once at epoch N and reused.
    pub static_integration: Option<String>,
    pub disable_cm_loss: bool,
    pub drop_modalities: Vec<Modality>,
}

impl AblationConfig {
    pub fn static_epoch(&self) -> Result<Option<usize>> {
        let Some(spec) = &self.static_integration else {
            return Ok(None);
        };
        spec.strip_prefix("epoch:")
            .and_then(|e| e.trim().parse().ok())
            .map(Some)
            .ok_or_else(|| PmfError::Config(format!("static_integration '{spec}' is not of the form epoch:N")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Epochs whose full relevance scores are written to `scores_epoch{N}.csv`.
    pub score_dump_epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modalities: Vec<Modality>,
    pub dataset: DatasetConfig,
    pub model: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub schedule: ThresholdSchedule,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            dataset: DatasetConfig::default(),
            model: EncoderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            schedule: ThresholdSchedule::default(),
            ablation: AblationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PmfError::Config(e.to_string()))
    }

    /// Reads a config file; a relative dataset path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PmfError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| PmfError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            PmfError::Config(msg) => PmfError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PmfError::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Configured modalities minus dropped ones, in fixed order.
    pub fn active_modalities(&self) -> Vec<Modality> {
        let mut m: Vec<Modality> = self
            .modalities
            .iter()
            .copied()
            .filter(|m| !self.ablation.drop_modalities.contains(m))
            .collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn integration_options(&self) -> Result<IntegrationOptions> {
        Ok(IntegrationOptions {
            disable_relevance: self.ablation.disable_relevance,
            disable_freezing: self.ablation.disable_freezing,
            disable_fusion_weighting: self.ablation.disable_fusion_weighting,
            static_epoch: self.ablation.static_epoch()?,
            forced_frozen: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.ablation.drop_modalities.iter().find(|m| !self.modalities.contains(m)) {
            return Err(PmfError::Config(format!("dropped modality {bad} is not configured")));
        }
        if self.active_modalities().is_empty() {
            return Err(PmfError::Config("no modality left after dropping".into()));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(PmfError::Config("dataset.path and dataset.synthetic are mutually exclusive".into()))
            }
            (None, None) => return Err(PmfError::Config("dataset needs a path or a synthetic spec".into())),
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        for (name, r) in [("seed_ratio", self.dataset.seed_ratio), ("valid_fraction", self.dataset.valid_fraction)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(PmfError::Config(format!("dataset.{name} {r} outside [0, 1]")));
            }
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        self.ablation.static_epoch()?;
        Ok(())
    }

    /// Applies one `--ablate` value: `frm`, `iff`, `rff`, `cm`, or
    /// `static_integration=epoch:N`.
    pub fn apply_ablation(&mut self, flag: &str) -> Result<()> {
        let flag = flag.trim();
        if let Some(v) = flag.strip_prefix("static_integration=").or_else(|| flag.strip_prefix("static=")) {
            self.ablation.static_integration = Some(v.to_string());
            return self.ablation.static_epoch().map(|_| ());
        }
        match flag.to_ascii_lowercase().as_str() {
            "frm" | "disable_relevance" => self.ablation.disable_relevance = true,
            "iff" | "disable_freezing" => self.ablation.disable_freezing = true,
            "rff" | "disable_fusion_weighting" => self.ablation.disable_fusion_weighting = true,
            "cm" | "lcm" | "disable_cm_loss" => self.ablation.disable_cm_loss = true,
            other => return Err(PmfError::Config(format!("unknown ablation '{other}'"))),
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<KgPair> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(p), None) => load_kg_pair(p, DatasetLayout::Pmf),
            (None, Some(s)) => Ok(generate_synthetic_pair(s)?.pair),
            _ => Err(PmfError::Config("dataset needs exactly one of path or synthetic".into())),
        }
    }

    pub fn split(&self, pair: &KgPair) -> Result<AlignmentSeedSet> {
        let r = self.dataset.seed_ratio;
        let vf = self.dataset.valid_fraction;
        split_seeds(pair.pairs.clone(), r * (1.0 - vf), r * vf, self.train.seed)
    }
}

/// Dataset, features and split of a configuration.
pub struct Prepared {
    pub pair: KgPair,
    pub features: PairFeatures,
    pub seeds: AlignmentSeedSet,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let pair = cfg.load_dataset()?;
    let features = PairFeatures::from_pair(&pair, cfg.model.bag_cap);
    let seeds = cfg.split(&pair)?;
    Ok(Prepared { pair, features, seeds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub test: MetricsReport,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_augmented: usize,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub config_hash: String,
    /// Frozen ratio at the last epoch, keyed `side.modality`.
    pub final_frozen: BTreeMap<String, f64>,
    /// Share of corrupted target entities frozen in their corrupted
    /// modality at the last epoch, when corruption labels exist.
    pub corrupted_frozen: BTreeMap<String, f64>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub history: TrainHistory,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> PmfError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PmfError::io(path, io),
        other => PmfError::Format {
            file: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| PmfError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PmfError::io(path, e))
}

fn state_key(side: Side, m: Modality) -> String {
    format!("{side}.{m}")
}

fn write_history(dir: &Path, history: &TrainHistory, modalities: &[Modality]) -> Result<()> {
    let mut header: Vec<String> = ["epoch", "phase", "delta", "lr", "loss_total", "loss_cm", "loss_ckg"]
        .map(String::from)
        .to_vec();
    for side in [Side::Source, Side::Target] {
        for m in modalities {
            header.push(format!("frozen_{side}_{m}"));
        }
    }
    header.extend(["val_hits1", "val_hits10", "val_mrr", "n_train_seeds"].map(String::from));
    let rows: Vec<Vec<String>> = history
        .records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.epoch.to_string(),
                format!("{:?}", r.phase).to_lowercase(),
                r.delta.to_string(),
                r.lr.to_string(),
                r.loss.total.to_string(),
                r.loss.cm.to_string(),
                r.loss.ckg.to_string(),
            ];
            for side in [Side::Source, Side::Target] {
                for m in modalities {
                    let s = r.states.iter().find(|s| s.side == side && s.modality == *m);
                    row.push(s.map_or(String::new(), |s| s.frozen_ratio.to_string()));
                }
            }
            match r.validation {
                Some(v) => row.extend([v.hits1, v.hits10, v.mrr].map(|x| x.to_string())),
                None => row.extend(["", "", ""].map(String::from)),
            }
            row.push(r.n_train_seeds.to_string());
            row
        })
        .collect();
    write_rows(&dir.join("history.csv"), &header, &rows)
}

fn write_freeze_log(dir: &Path, history: &TrainHistory) -> Result<()> {
    let header = ["epoch", "modality", "side", "delta", "frozen_ratio", "mean_w"].map(String::from);
    let rows: Vec<Vec<String>> = history
        .records
        .iter()
        .flat_map(|r| {
            r.states.iter().map(move |s| {
                vec![
                    r.epoch.to_string(),
                    s.modality.to_string(),
                    s.side.to_string(),
                    r.delta.to_string(),
                    s.frozen_ratio.to_string(),
                    s.mean_w.to_string(),
                ]
            })
        })
        .collect();
    write_rows(&dir.join("freeze_log.csv"), &header, &rows)
}

fn write_scores(path: &Path, scores: &EpochScores, pairs: &[(usize, usize)], modalities: &[Modality]) -> Result<()> {
    let mut header = vec!["source".to_string(), "target".to_string()];
    for side in [Side::Source, Side::Target] {
        for m in modalities {
            header.push(format!("w_{side}_{m}"));
        }
    }
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .map(|&(s, t)| {
            let mut row = vec![s.to_string(), t.to_string()];
            for (side, id) in [(Side::Source, s), (Side::Target, t)] {
                for m in modalities {
                    row.push(scores.states[&(side, *m)].w[id].to_string());
                }
            }
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let text: String = pairs.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect();
    write_text(path, &text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PmfError::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Trains one configuration and writes its run directory.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| PmfError::io(dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let prepared = prepare(cfg)?;
    let modalities = cfg.active_modalities();
    let setup = TrainSetup {
        ctx: StepContext {
            features: &prepared.features,
            modalities: modalities.clone(),
            encoder: cfg.model.clone(),
            loss: cfg.loss.clone(),
            disable_cm_loss: cfg.ablation.disable_cm_loss,
        },
        seeds: &prepared.seeds,
        train: cfg.train.clone(),
        schedule: cfg.schedule,
        integration: cfg.integration_options()?,
        dump_epochs: cfg.output.score_dump_epochs.clone(),
    };
    let init = EncoderParams::init(&cfg.model, &modalities, &prepared.features, cfg.train.seed)?;
    let (model, history) = train_pmf(&setup, init)?;

    write_history(dir, &history, &modalities)?;
    write_freeze_log(dir, &history)?;
    for (epoch, scores) in &history.score_dumps {
        write_scores(&dir.join(format!("scores_epoch{epoch}.csv")), scores, &prepared.pair.pairs, &modalities)?;
    }
    save_sections(&dir.join("checkpoint.bin"), &model.to_sections())?;
    if cfg.train.iterative_epochs > 0 {
        write_pairs(&dir.join("augmented_seeds.tsv"), &history.augmented)?;
    }

    let test = test_metrics(&model, &prepared, &modalities, &cfg.model)?;
    let final_scores = history.final_scores.as_ref().expect("at least one epoch");
    let final_frozen = final_scores
        .states
        .values()
        .map(|s| (state_key(s.side, s.modality), s.frozen_ratio()))
        .collect();
    let mut corrupted_frozen = BTreeMap::new();
    if let Some(labels) = &prepared.pair.corruption {
        for &m in &modalities {
            let flagged: Vec<usize> = (0..labels.n_entities()).filter(|&i| labels.get(m, i)).collect();
            if flagged.is_empty() {
                continue;
            }
            let mask = &final_scores.states[&(Side::Target, m)].mask;
            let frozen = flagged.iter().filter(|&&i| !mask[i]).count();
            corrupted_frozen.insert(m.to_string(), frozen as f64 / flagged.len() as f64);
        }
    }
    let metrics = RunMetrics {
        test,
        n_train: prepared.seeds.train_idx.len(),
        n_valid: prepared.seeds.valid_idx.len(),
        n_test: prepared.seeds.test_idx.len(),
        n_augmented: history.augmented.len(),
        best_epoch: history.best_epoch,
        epochs_run: history.records.len(),
        config_hash: cfg.hash()?,
        final_frozen,
        corrupted_frozen,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        metrics,
        history,
    })
}

fn test_metrics(
    model: &TrainedModel,
    prepared: &Prepared,
    modalities: &[Modality],
    encoder: &EncoderConfig,
) -> Result<MetricsReport> {
    let (a, b) = joint_embeddings(&model.params, &model.fusion, &prepared.features, modalities, encoder)?;
    evaluate(a.view(), b.view(), &prepared.seeds.test_pairs())
}

/// Reloads a run directory's configuration and checkpoint.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub prepared: Prepared,
    pub model: TrainedModel,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(&dir.join("config.toml"))?;
    let prepared = prepare(&config)?;
    let sections = load_sections(&dir.join("checkpoint.bin"))?;
    let model = TrainedModel::from_sections(sections, &config.model, &config.active_modalities())?;
    Ok(LoadedRun { config, prepared, model })
}

pub struct EvaluationOutput {
    pub metrics: MetricsReport,
    pub matches: Option<MatchResult>,
}

/// Recomputes test metrics from a run directory. Optionally writes greedy
/// matches of the test entities (`matches.tsv`) and the joint embeddings
/// (`joint_src.bin`, `joint_tgt.bin`).
pub fn evaluate_run(dir: &Path, greedy: bool, dump_embeddings: bool) -> Result<EvaluationOutput> {
    let run = load_run(dir)?;
    let modalities = run.config.active_modalities();
    let (a, b) = joint_embeddings(&run.model.params, &run.model.fusion, &run.prepared.features, &modalities, &run.config.model)?;
    let test = run.prepared.seeds.test_pairs();
    let metrics = evaluate(a.view(), b.view(), &test)?;
    let matches = if greedy {
        let sp: Vec<usize> = test.iter().map(|p| p.0).collect();
        let tp: Vec<usize> = test.iter().map(|p| p.1).collect();
        let sa = a.select(ndarray::Axis(0), &sp);
        let tb = b.select(ndarray::Axis(0), &tp);
        let mut m = greedy_match(sa.view(), tb.view())?;
        for e in &mut m.matches {
            *e = (sp[e.0], tp[e.1], e.2);
        }
        m.unmatched_sources = m.unmatched_sources.iter().map(|&i| sp[i]).collect();
        m.unmatched_targets = m.unmatched_targets.iter().map(|&j| tp[j]).collect();
        let text: String = m.matches.iter().map(|(s, t, sim)| format!("{s}\t{t}\t{sim}\n")).collect();
        write_text(&dir.join("matches.tsv"), &text)?;
        Some(m)
    } else {
        None
    };
    if dump_embeddings {
        let write = |name: &str, m: &ndarray::Array2<f64>| -> Result<()> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| PmfError::io(&path, e))?;
            crate::data::write_matrix_block(&mut f, m).map_err(|e| PmfError::io(&path, e))
        };
        write("joint_src.bin", &a)?;
        write("joint_tgt.bin", &b)?;
    }
    Ok(EvaluationOutput { metrics, matches })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cap: f64,
    /// Mean image frozen ratio of both sides at the last epoch.
    pub img_frozen_ratio: Option<f64>,
    pub hits1: f64,
}

/// One full run per threshold cap, each in `out/cap_{cap}`, summarized in
/// `out/sweep.csv`.
pub fn sweep_delta(cfg: &ExperimentConfig, caps: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if caps.is_empty() {
        return Err(PmfError::Config("empty cap list".into()));
    }
    for &c in caps {
        if !(c > 0.0 && c <= 1.0) {
            return Err(PmfError::Config(format!("threshold cap {c} outside (0, 1]")));
        }
        if c < cfg.schedule.delta0 {
            return Err(PmfError::Config(format!("threshold cap {c} below delta0 {}", cfg.schedule.delta0)));
        }
    }
    let mut rows = Vec::new();
    for &cap in caps {
        let mut run = cfg.clone();
        run.schedule.cap = cap;
        let outcome = run_training(&run, &out.join(format!("cap_{cap}")))?;
        let ff = &outcome.metrics.final_frozen;
        let img: Vec<f64> = [Side::Source, Side::Target]
            .iter()
            .filter_map(|s| ff.get(&state_key(*s, Modality::Img)).copied())
            .collect();
        rows.push(SweepRow {
            cap,
            img_frozen_ratio: (!img.is_empty()).then(|| img.iter().sum::<f64>() / img.len() as f64),
            hits1: outcome.metrics.test.mean.hits1,
        });
    }
    let header = ["cap", "img_frozen_ratio", "hits1"].map(String::from);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.cap.to_string(), r.img_frozen_ratio.map_or(String::new(), |x| x.to_string()), r.hits1.to_string()])
        .collect();
    write_rows(&out.join("sweep.csv"), &header, &table)?;
    Ok(rows)
}

/// Caps from `start` to `end` inclusive in steps of `step`, rounded to
/// avoid accumulated error.
pub fn cap_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || end < start {
        return Err(PmfError::Config("cap range needs step > 0 and end >= start".into()));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub hits1: f64,
    pub hits10: f64,
    pub mrr: f64,
}

pub fn read_metrics(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join("metrics.json");
    if !path.exists() {
        return Err(PmfError::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| PmfError::io(&path, e))?;
    let m: RunMetrics = serde_json::from_str(&text).map_err(|e| PmfError::Format {
        file: path.clone(),
        detail: e.to_string(),
    })?;
    if !(m.test.mean.is_finite() && m.test.src_to_tgt.is_finite() && m.test.tgt_to_src.is_finite()) {
        return Err(PmfError::Format {
            file: path,
            detail: "non-finite metric".into(),
        });
    }
    Ok(m)
}

/// Merges the test metrics of several runs; writes `report.csv` when `out`
/// is given.
pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<Vec<ReportRow>> {
    let rows = dirs
        .iter()
        .map(|d| {
            let m = read_metrics(d)?;
            let run = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            Ok(ReportRow {
                run,
                hits1: m.test.mean.hits1,
                hits10: m.test.mean.hits10,
                mrr: m.test.mean.mrr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| PmfError::io(out, e))?;
        let header = ["run", "hits1", "hits10", "mrr"].map(String::from);
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.run.clone(), r.hits1.to_string(), r.hits10.to_string(), r.mrr.to_string()])
            .collect();
        write_rows(&out.join("report.csv"), &header, &table)?;
    }
    Ok(rows)
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<width$}  {:>7}  {:>7}  {:>7}\n", "run", "H@1", "H@10", "MRR");
    for r in rows {
        s += &format!("{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}\n", r.run, r.hits1, r.hits10, r.mrr);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.synthetic = Some(SyntheticSpec {
            n_entities: 40,
            ..SyntheticSpec::default()
        });
        cfg.dataset.seed_ratio = 0.5;
        cfg.model.dim = 16;
        cfg.train.epochs = 4;
        cfg.train.iterative_epochs = 0;
        cfg.train.eval_interval = 2;
        cfg
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.loss.tau, 0.05);
        assert_eq!(cfg.train.batch_size, 3500);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\nepochz = 3\n").is_err());
        let mut cfg = small();
        cfg.ablation.drop_modalities = Modality::ALL.to_vec();
        assert!(matches!(cfg.validate(), Err(PmfError::Config(_))));
        let mut cfg = small();
        cfg.ablation.static_integration = Some("later".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_flags() {
        let mut cfg = small();
        cfg.apply_ablation("frm").unwrap();
        cfg.apply_ablation("static_integration=epoch:3").unwrap();
        assert!(cfg.ablation.disable_relevance);
        assert_eq!(cfg.ablation.static_epoch().unwrap(), Some(3));
        assert!(cfg.apply_ablation("nonsense").is_err());
    }

    #[test]
    fn run_directory_contents_and_reevaluation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.output.score_dump_epochs = vec![0, 3];
        let out = run_training(&cfg, dir.path()).unwrap();
        for f in ["config.toml", "history.csv", "freeze_log.csv", "checkpoint.bin", "metrics.json", "scores_epoch0.csv", "scores_epoch3.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let again = evaluate_run(dir.path(), true, true).unwrap();
        assert_eq!(again.metrics, out.metrics.test);
        assert!(dir.path().join("matches.tsv").exists());
        let rows = report(&[dir.path().to_path_buf()], None).unwrap();
        assert_eq!(rows[0].hits1, out.metrics.test.mean.hits1);
    }

    #[test]
    fn cap_ranges() {
        let caps = cap_range(0.1, 0.95, 0.05).unwrap();
        assert_eq!(caps.len(), 18);
        assert_eq!(caps[17], 0.95);
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(sweep_delta(&cfg, &[0.0, 0.5], dir.path()), Err(PmfError::Config(_))));
    }

    #[test]
    fn missing_metrics_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(&[dir.path().to_path_buf()], None).unwrap_err();
        assert!(err.to_string().contains("metrics.json"));
    }
}
