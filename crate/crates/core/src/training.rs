//! Optimization: warm-up/cosine learning rate, AdamW, probation of
//! pseudo-seeds and the epoch loop.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::round_to_f32;
use crate::data::AlignmentSeedSet;
use crate::diff::{cosine_similarity_matrix, Tape, Var};
use crate::encoders::{encode_all, EncoderConfig, EncoderParams, PairFeatures};
use crate::error::{PmfError, Result};
use crate::inference::{evaluate_with_pool, DirectionMetrics};
use crate::integration::{fuse_values, EpochScores, IntegrationOptions, Integrator, ThresholdSchedule};
use crate::modality::{Modality, Side};
use crate::objectives::{cross_kg_loss, cross_modality_loss, total_loss, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Extra epochs with probation of pseudo-seeds; 0 disables.
    pub iterative_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub accumulation_steps: usize,
    /// Evaluations without validation improvement before a phase stops.
    pub early_stop_patience: usize,
    pub eval_interval: usize,
    pub probation_interval: usize,
    pub probation_stability: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Above this many entities the association loss samples an entity batch
    /// of this size per update.
    pub cm_entity_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            iterative_epochs: 500,
            batch_size: 3500,
            base_lr: 5e-3,
            warmup_fraction: 0.15,
            accumulation_steps: 1,
            early_stop_patience: 10,
            eval_interval: 5,
            probation_interval: 5,
            probation_stability: 10,
            weight_decay: 0.01,
            seed: 0,
            cm_entity_limit: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("accumulation_steps", self.accumulation_steps),
            ("early_stop_patience", self.early_stop_patience),
            ("eval_interval", self.eval_interval),
            ("probation_interval", self.probation_interval),
            ("probation_stability", self.probation_stability),
            ("cm_entity_limit", self.cm_entity_limit),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PmfError::Config(format!("train.{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(PmfError::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(PmfError::Config("base_lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` over `warmup_fraction · total_steps`, then
/// cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = config.warmup_fraction * total;
    if step < warm {
        return config.base_lr * step / warm;
    }
    if total <= warm {
        return config.base_lr;
    }
    let progress = (step - warm) / (total - warm);
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay. Parameters absent from
/// `grads` are treated as having zero gradient.
pub fn optimizer_step(
    params: &mut BTreeMap<String, Array2<f64>>,
    grads: &BTreeMap<String, Array2<f64>>,
    state: &mut OptimizerState,
    rate: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| PmfError::Config(format!("gradient for unknown parameter '{name}'")))?;
        if g.dim() != p.dim() {
            return Err(PmfError::dim("optimizer_step", format!("{name}: {:?} vs {:?}", g.dim(), p.dim())));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(PmfError::Numeric(format!("non-finite gradient {bad} for '{name}'")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Array2::zeros(p.dim());
                &zero
            }
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| Array2::zeros(p.dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array2::zeros(p.dim()));
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *p -= rate * weight_decay * *p;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
    }
    Ok(())
}

/// Source/target index pairs that are each other's nearest neighbor among
/// the candidates, by cosine similarity.
pub fn mutual_nearest(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    source_candidates: &[usize],
    target_candidates: &[usize],
) -> Result<Vec<(usize, usize)>> {
    if source_candidates.is_empty() || target_candidates.is_empty() {
        return Ok(Vec::new());
    }
    let s = source.select(ndarray::Axis(0), source_candidates);
    let t = target.select(ndarray::Axis(0), target_candidates);
    let sim = cosine_similarity_matrix(s.view(), t.view())?;
    let argmax = |it: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, x) in it.enumerate() {
            if x > best.1 {
                best = (k, x);
            }
        }
        best.0
    };
    let row_best: Vec<usize> = (0..sim.nrows()).map(|i| argmax(&mut sim.row(i).iter().copied())).collect();
    let col_best: Vec<usize> = (0..sim.ncols()).map(|j| argmax(&mut sim.column(j).iter().copied())).collect();
    Ok(row_best
        .iter()
        .enumerate()
        .filter(|&(i, &j)| col_best[j] == i)
        .map(|(i, &j)| (source_candidates[i], target_candidates[j]))
        .collect())
}

/// Consecutive-round streaks of mutual-nearest candidate pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProbationLedger {
    pub streaks: BTreeMap<(usize, usize), usize>,
}

impl ProbationLedger {
    /// Extends streaks of pairs in `mutual`, drops every other streak and
    /// returns the pairs that reached `stability` rounds.
    pub fn record(&mut self, mutual: &[(usize, usize)], stability: usize) -> Vec<(usize, usize)> {
        let mut next = BTreeMap::new();
        let mut promoted = Vec::new();
        for &pair in mutual {
            let streak = self.streaks.get(&pair).copied().unwrap_or(0) + 1;
            if streak >= stability {
                promoted.push(pair);
            } else {
                next.insert(pair, streak);
            }
        }
        self.streaks = next;
        promoted
    }
}

/// One probation round over joint embeddings; candidates exclude every
/// entity already in `train`.
pub fn probation_update(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    train: &[(usize, usize)],
    ledger: &mut ProbationLedger,
    stability: usize,
) -> Result<Vec<(usize, usize)>> {
    let used_s: BTreeSet<usize> = train.iter().map(|p| p.0).collect();
    let used_t: BTreeSet<usize> = train.iter().map(|p| p.1).collect();
    let cs: Vec<usize> = (0..source.nrows()).filter(|i| !used_s.contains(i)).collect();
    let ct: Vec<usize> = (0..target.nrows()).filter(|i| !used_t.contains(i)).collect();
    let mutual = mutual_nearest(source, target, &cs, &ct)?;
    Ok(ledger.record(&mutual, stability))
}

/// Everything a training step needs besides the parameters.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub features: &'a PairFeatures,
    pub modalities: Vec<Modality>,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub disable_cm_loss: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cm: f64,
    pub ckg: f64,
}

impl LossParts {
    fn add(&mut self, other: LossParts) {
        self.total += other.total;
        self.cm += other.cm;
        self.ckg += other.ckg;
    }
}

/// Where the relevance scores of a step come from.
pub enum ScoreSource<'i> {
    /// Compute (and possibly cache) scores for this epoch.
    Fresh(&'i mut Integrator, usize),
    /// Reuse earlier scores of the same epoch.
    Reuse(&'i Integrator, &'i EpochScores),
}

/// Forward pass, losses over the given micro-batches and summed gradients.
///
/// The association loss joins the first micro-batch only, so the summed
/// gradient equals that of one pass over the concatenated batch.
pub fn loss_and_gradients(
    ctx: &StepContext<'_>,
    params: &EncoderParams,
    scores: ScoreSource<'_>,
    micro_batches: &[&[(usize, usize)]],
    cm_rows: Option<&[usize]>,
) -> Result<(LossParts, BTreeMap<String, Array2<f64>>, EpochScores)> {
    let tape = Tape::new();
    let vars = params.attach(&tape, true);
    let src = encode_all(&tape, Side::Source, &ctx.features.source, &vars, &ctx.modalities, &ctx.encoder)?;
    let tgt = encode_all(&tape, Side::Target, &ctx.features.target, &vars, &ctx.modalities, &ctx.encoder)?;
    let integ = match scores {
        ScoreSource::Fresh(integrator, epoch) => integrator.integrate_epoch(epoch, &src, &tgt)?,
        ScoreSource::Reuse(integrator, s) => integrator.apply(s.clone(), &src, &tgt)?,
    };
    let stack = |side: Side| -> Vec<Var<'_>> {
        let mut v: Vec<Var<'_>> = integ.frozen[&side].values().copied().collect();
        v.push(integ.joint[&side]);
        v
    };
    let (sv, tv) = (stack(Side::Source), stack(Side::Target));
    let mut parts = LossParts::default();
    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (k, batch) in micro_batches.iter().enumerate() {
        let l_ckg = cross_kg_loss(&sv, &tv, batch, &ctx.loss)?;
        let l_cm = if k == 0 && !ctx.disable_cm_loss {
            let a = cross_modality_loss(&integ.frozen[&Side::Source], &ctx.loss, cm_rows)?;
            let b = cross_modality_loss(&integ.frozen[&Side::Target], &ctx.loss, cm_rows)?;
            a.add(&b)?
        } else {
            tape.constant(Array2::zeros((1, 1)))
        };
        let loss = total_loss(&l_cm, &l_ckg)?;
        parts.add(LossParts {
            total: loss.scalar(),
            cm: l_cm.scalar(),
            ckg: l_ckg.scalar(),
        });
        let g = tape.backward(&loss);
        for (name, var) in &vars.vars {
            if let Some(gv) = g.get(var) {
                match grads.get_mut(name) {
                    Some(acc) => *acc += gv,
                    None => {
                        grads.insert(name.clone(), gv.clone());
                    }
                }
            }
        }
    }
    Ok((parts, grads, integ.scores))
}

/// Encoder outputs of both graphs without a gradient path.
pub fn embed(
    params: &EncoderParams,
    features: &PairFeatures,
    modalities: &[Modality],
    encoder: &EncoderConfig,
) -> Result<(BTreeMap<Modality, Array2<f64>>, BTreeMap<Modality, Array2<f64>>)> {
    let tape = Tape::new();
    let vars = params.attach(&tape, false);
    let values = |side: Side| -> Result<BTreeMap<Modality, Array2<f64>>> {
        let e = encode_all(&tape, side, features.side(side), &vars, modalities, encoder)?;
        Ok(e.into_iter().map(|(m, v)| (m, v.to_array())).collect())
    };
    Ok((values(Side::Source)?, values(Side::Target)?))
}

pub type FusionWeights = BTreeMap<Side, BTreeMap<Modality, Vec<f64>>>;

/// Joint embeddings of both graphs for fixed parameters and fusion weights.
pub fn joint_embeddings(
    params: &EncoderParams,
    fusion: &FusionWeights,
    features: &PairFeatures,
    modalities: &[Modality],
    encoder: &EncoderConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (s, t) = embed(params, features, modalities, encoder)?;
    let w = |side: Side| {
        fusion
            .get(&side)
            .ok_or_else(|| PmfError::Config(format!("no fusion weights for {side}")))
    };
    Ok((fuse_values(&s, w(Side::Source)?)?, fuse_values(&t, w(Side::Target)?)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Iterative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSummary {
    pub side: Side,
    pub modality: Modality,
    pub frozen_ratio: f64,
    pub mean_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub delta: f64,
    pub lr: f64,
    pub loss: LossParts,
    pub states: Vec<StateSummary>,
    pub validation: Option<DirectionMetrics>,
    pub n_train_seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Pseudo-seeds promoted by probation, in promotion order.
    pub augmented: Vec<(usize, usize)>,
    pub best_epoch: Option<usize>,
    /// Full scores at the epochs requested for dumping.
    pub score_dumps: BTreeMap<usize, EpochScores>,
    /// Training-time scores of the last epoch run.
    pub final_scores: Option<EpochScores>,
}

/// Best-validation parameters and fusion weights, rounded to the precision
/// of the checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub fusion: FusionWeights,
}

pub const FUSION_PREFIX: &str = "fusion";

impl TrainedModel {
    /// Checkpoint sections: every parameter by name, plus one `n×1` fusion
    /// column per side and modality.
    pub fn to_sections(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out = self.params.tensors.clone();
        for (side, per) in &self.fusion {
            for (m, w) in per {
                let col = Array2::from_shape_vec((w.len(), 1), w.clone()).expect("column shape");
                out.insert(format!("{FUSION_PREFIX}.{side}.{m}"), col);
            }
        }
        out
    }

    pub fn from_sections(
        mut sections: BTreeMap<String, Array2<f64>>,
        encoder: &EncoderConfig,
        modalities: &[Modality],
    ) -> Result<Self> {
        let mut fusion: FusionWeights = BTreeMap::new();
        for side in [Side::Source, Side::Target] {
            for &m in modalities {
                let key = format!("{FUSION_PREFIX}.{side}.{m}");
                let col = sections
                    .remove(&key)
                    .ok_or_else(|| PmfError::Data(format!("checkpoint lacks section '{key}'")))?;
                fusion.entry(side).or_default().insert(m, col.column(0).to_vec());
            }
        }
        sections.retain(|k, _| !k.starts_with(FUSION_PREFIX));
        let mut mods = modalities.to_vec();
        mods.sort();
        Ok(Self {
            params: EncoderParams {
                config: encoder.clone(),
                modalities: mods,
                tensors: sections,
            },
            fusion,
        })
    }

    fn rounded(params: &EncoderParams, fusion: &FusionWeights) -> Self {
        let mut p = params.clone();
        for t in p.tensors.values_mut() {
            *t = round_to_f32(t);
        }
        let fusion = fusion
            .iter()
            .map(|(s, per)| {
                let per = per
                    .iter()
                    .map(|(m, w)| (*m, w.iter().map(|&x| x as f32 as f64).collect()))
                    .collect();
                (*s, per)
            })
            .collect();
        Self { params: p, fusion }
    }
}

/// Inputs of a full training run.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub ctx: StepContext<'a>,
    pub seeds: &'a AlignmentSeedSet,
    pub train: TrainConfig,
    pub schedule: ThresholdSchedule,
    pub integration: IntegrationOptions,
    /// Epochs whose full scores are kept in the history.
    pub dump_epochs: Vec<usize>,
}

fn summaries(scores: &EpochScores) -> Vec<StateSummary> {
    scores
        .states
        .values()
        .map(|s| StateSummary {
            side: s.side,
            modality: s.modality,
            frozen_ratio: s.frozen_ratio(),
            mean_w: s.mean_w(),
        })
        .collect()
}

fn fusion_of(scores: &EpochScores, options: &IntegrationOptions) -> FusionWeights {
    [Side::Source, Side::Target]
        .into_iter()
        .map(|s| (s, scores.fusion_weights(s, options)))
        .collect()
}

struct Evaluation {
    joint: (Array2<f64>, Array2<f64>),
    fusion: FusionWeights,
    metrics: Option<DirectionMetrics>,
}

/// Validation queries rank against validation and test targets together.
fn evaluate_current(
    ctx: &StepContext<'_>,
    params: &EncoderParams,
    integrator: &Integrator,
    epoch: usize,
    seeds: &AlignmentSeedSet,
) -> Result<Evaluation> {
    let (s, t) = embed(params, ctx.features, &ctx.modalities, &ctx.encoder)?;
    let scores = integrator.scores(epoch, &s, &t)?;
    let fusion = fusion_of(&scores, &integrator.options);
    let joint = (fuse_values(&s, &fusion[&Side::Source])?, fuse_values(&t, &fusion[&Side::Target])?);
    let valid = seeds.valid_pairs();
    let metrics = if valid.is_empty() {
        None
    } else {
        let pool: Vec<(usize, usize)> = valid.iter().copied().chain(seeds.test_pairs()).collect();
        let sp: Vec<usize> = pool.iter().map(|p| p.0).collect();
        let tp: Vec<usize> = pool.iter().map(|p| p.1).collect();
        Some(evaluate_with_pool(joint.0.view(), joint.1.view(), &valid, &sp, &tp)?.mean)
    };
    Ok(Evaluation { joint, fusion, metrics })
}

/// Trains from `init` and returns the best-validation model with the run
/// history.
pub fn train_pmf(setup: &TrainSetup<'_>, init: EncoderParams) -> Result<(TrainedModel, TrainHistory)> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.ctx.loss.validate()?;
    let mut train_pairs = setup.seeds.train_pairs();
    if train_pairs.is_empty() {
        return Err(PmfError::Config("no training seed pairs".into()));
    }
    let mut integrator = Integrator::new(setup.schedule, setup.integration.clone())?;
    let mut params = init;
    let mut opt = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let updates_per_epoch = train_pairs.len().div_ceil(cfg.batch_size).div_ceil(cfg.accumulation_steps);
    let total_steps = (cfg.epochs + cfg.iterative_epochs) * updates_per_epoch;
    let n_entities = setup.ctx.features.source.n_entities().min(setup.ctx.features.target.n_entities());

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut last_eval: Option<FusionWeights> = None;
    let mut ledger = ProbationLedger::default();
    let mut step = 0usize;
    let mut epoch = 0usize;

    for (phase, length) in [(Phase::Base, cfg.epochs), (Phase::Iterative, cfg.iterative_epochs)] {
        let mut since_improvement = 0usize;
        for local in 0..length {
            let mut order = train_pairs.clone();
            order.shuffle(&mut rng);
            let batches: Vec<&[(usize, usize)]> = order.chunks(cfg.batch_size).collect();
            let mut epoch_loss = LossParts::default();
            let mut epoch_scores: Option<EpochScores> = None;
            let mut lr = 0.0;
            for group in batches.chunks(cfg.accumulation_steps) {
                let cm_rows = (n_entities > cfg.cm_entity_limit).then(|| {
                    let mut all: Vec<usize> = (0..n_entities).collect();
                    all.shuffle(&mut rng);
                    all.truncate(cfg.cm_entity_limit);
                    all.sort_unstable();
                    all
                });
                let source = match &epoch_scores {
                    Some(s) => ScoreSource::Reuse(&integrator, s),
                    None => ScoreSource::Fresh(&mut integrator, epoch),
                };
                let (loss, grads, scores) =
                    loss_and_gradients(&setup.ctx, &params, source, group, cm_rows.as_deref())?;
                if !loss.total.is_finite() {
                    return Err(PmfError::Numeric(format!("loss {} at epoch {epoch}", loss.total)));
                }
                epoch_loss.add(loss);
                epoch_scores.get_or_insert(scores);
                step += 1;
                lr = lr_schedule(step, total_steps, cfg);
                optimizer_step(&mut params.tensors, &grads, &mut opt, lr, cfg.weight_decay)
                    .map_err(|e| PmfError::Numeric(format!("epoch {epoch}: {e}")))?;
            }
            let scores = epoch_scores.expect("at least one batch per epoch");

            let last_local = local + 1 == length;
            let mut validation = None;
            let mut stop = false;
            let needs_eval = (local + 1) % cfg.eval_interval == 0 || last_local;
            let probation_due = phase == Phase::Iterative && (local + 1) % cfg.probation_interval == 0;
            if needs_eval || probation_due {
                let ev = evaluate_current(&setup.ctx, &params, &integrator, epoch, setup.seeds)?;
                if probation_due {
                    let promoted =
                        probation_update(ev.joint.0.view(), ev.joint.1.view(), &train_pairs, &mut ledger, cfg.probation_stability)?;
                    train_pairs.extend(&promoted);
                    history.augmented.extend(promoted);
                }
                if needs_eval {
                    last_eval = Some(ev.fusion.clone());
                    validation = ev.metrics;
                    if let Some(m) = ev.metrics {
                        if best.as_ref().is_none_or(|(h, _)| m.hits1 > *h) {
                            best = Some((m.hits1, TrainedModel::rounded(&params, &ev.fusion)));
                            history.best_epoch = Some(epoch);
                            since_improvement = 0;
                        } else {
                            since_improvement += 1;
                            stop = since_improvement >= cfg.early_stop_patience;
                        }
                    }
                }
            }

            if setup.dump_epochs.contains(&epoch) {
                history.score_dumps.insert(epoch, scores.clone());
            }
            history.records.push(EpochRecord {
                epoch,
                phase,
                delta: scores.delta,
                lr,
                loss: epoch_loss,
                states: summaries(&scores),
                validation,
                n_train_seeds: train_pairs.len(),
            });
            history.final_scores = Some(scores);
            epoch += 1;
            if stop {
                break;
            }
        }
    }

    let model = match best {
        Some((_, m)) => m,
        None => {
            history.best_epoch = epoch.checked_sub(1);
            let fusion = last_eval.expect("final epoch is always evaluated");
            TrainedModel::rounded(&params, &fusion)
        }
    };
    Ok((model, history))
}
