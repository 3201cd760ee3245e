//! Relevance scoring, freezing and weighted fusion of modality embeddings.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diff::{cosine_similarity_matrix, hconcat, normalize_rows, Var};
use crate::encoders::ModalityEmbeddings;
use crate::error::{PmfError, Result};
use crate::modality::{Modality, Side};

/// Growing relevance threshold `δ_t = min(delta0 · factor^t, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub delta0: f64,
    pub factor: f64,
    pub cap: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            delta0: 0.1,
            factor: 1.2,
            cap: 0.9,
        }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.delta0 && self.delta0 <= self.cap && self.cap <= 1.0) {
            return Err(PmfError::Config(format!(
                "threshold schedule needs 0 <= delta0 ({}) <= cap ({}) <= 1",
                self.delta0, self.cap
            )));
        }
        if !(self.factor >= 1.0) {
            return Err(PmfError::Config(format!("threshold factor {} below 1", self.factor)));
        }
        Ok(())
    }

    pub fn delta(&self, epoch: usize) -> f64 {
        schedule_delta(self, epoch)
    }
}

pub fn schedule_delta(schedule: &ThresholdSchedule, epoch: usize) -> f64 {
    let exp = i32::try_from(epoch).unwrap_or(i32::MAX);
    (schedule.delta0 * schedule.factor.powi(exp)).min(schedule.cap)
}

/// Best cosine similarity of every row of `a` against all rows of `b`.
pub fn max_cosine(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let sim = cosine_similarity_matrix(a, b)?;
    Ok(sim
        .outer_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// `w_i = ReLU((α_i − δ) / (max_j α_j − δ))`, or all zeros when no `α`
/// exceeds `δ`.
pub fn scores_from_alpha(alpha: &[f64], delta: f64) -> Vec<f64> {
    let top = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(top > delta) {
        return vec![0.0; alpha.len()];
    }
    alpha
        .iter()
        .map(|&a| ((a - delta) / (top - delta)).clamp(0.0, 1.0))
        .collect()
}

/// Relevance scores of both sides for one modality.
pub fn relevance_scores(
    h: ArrayView2<'_, f64>,
    h_other: ArrayView2<'_, f64>,
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.ncols() != h_other.ncols() {
        return Err(PmfError::dim(
            "relevance_scores",
            format!("{} vs {} columns", h.ncols(), h_other.ncols()),
        ));
    }
    let sim = cosine_similarity_matrix(h, h_other)?;
    let row_max: Vec<f64> = sim
        .outer_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let col_max: Vec<f64> = sim
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok((scores_from_alpha(&row_max, delta), scores_from_alpha(&col_max, delta)))
}

/// `true` where gradient flows (score above zero), `false` where frozen.
pub fn freeze_mask(w: &[f64]) -> Vec<bool> {
    w.iter().map(|&x| x != 0.0).collect()
}

pub fn apply_freezing<'t>(h: &Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    h.stop_gradient_rows(mask)
}

/// Concatenation of `w_i · h_i` blocks in the given order.
pub fn fuse_modalities<'t>(blocks: &[(Var<'t>, &[f64])]) -> Result<Var<'t>> {
    let (n, d) = blocks
        .first()
        .map(|(h, _)| h.shape())
        .ok_or_else(|| PmfError::dim("fuse_modalities", "no modalities"))?;
    let mut scaled = Vec::with_capacity(blocks.len());
    for (h, w) in blocks {
        if h.shape() != (n, d) {
            return Err(PmfError::dim(
                "fuse_modalities",
                format!("block {:?} differs from {:?}", h.shape(), (n, d)),
            ));
        }
        scaled.push(h.scale_rows(w)?);
    }
    hconcat(&scaled)
}

/// Tape-free fusion of normalized embeddings; numerically identical to the
/// tape path used during training.
pub fn fuse_values(
    embeddings: &BTreeMap<Modality, Array2<f64>>,
    weights: &BTreeMap<Modality, Vec<f64>>,
) -> Result<Array2<f64>> {
    let mut blocks = Vec::with_capacity(embeddings.len());
    for (m, h) in embeddings {
        let w = weights
            .get(m)
            .ok_or_else(|| PmfError::Config(format!("no fusion weights for {m}")))?;
        if w.len() != h.nrows() {
            return Err(PmfError::dim("fuse_values", format!("{} weights for {} rows", w.len(), h.nrows())));
        }
        let mut b = normalize_rows(h);
        for (mut row, &wi) in b.outer_iter_mut().zip(w) {
            row *= wi;
        }
        blocks.push(b);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| PmfError::dim("fuse_values", e.to_string()))
}

/// Ablation switches acting on integration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationOptions {
    /// All scores fixed at 1: no freezing and unweighted fusion.
    pub disable_relevance: bool,
    /// Scores still weight fusion but nothing is frozen.
    pub disable_freezing: bool,
    /// Freezing still applies but fusion uses unit weights.
    pub disable_fusion_weighting: bool,
    /// Scores computed once at this epoch and reused afterwards; unit
    /// scores before it.
    pub static_epoch: Option<usize>,
    /// Modalities whose scores and masks are forced to zero.
    pub forced_frozen: Vec<Modality>,
}

/// Scores and masks of one modality on one side.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityState {
    pub side: Side,
    pub modality: Modality,
    pub w: Vec<f64>,
    /// `true` where gradient flows.
    pub mask: Vec<bool>,
}

impl ModalityState {
    pub fn frozen_ratio(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|m| !**m).count() as f64 / self.mask.len() as f64
    }

    pub fn mean_w(&self) -> f64 {
        if self.w.is_empty() {
            return 0.0;
        }
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }
}

pub type StateMap = BTreeMap<(Side, Modality), ModalityState>;

/// Scores and masks for one epoch together with the threshold that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochScores {
    pub delta: f64,
    pub states: StateMap,
}

impl EpochScores {
    /// Weights used for fusion under the given options.
    pub fn fusion_weights(&self, side: Side, options: &IntegrationOptions) -> BTreeMap<Modality, Vec<f64>> {
        self.states
            .iter()
            .filter(|((s, _), _)| *s == side)
            .map(|((_, m), st)| {
                let w = if options.disable_fusion_weighting && !options.forced_frozen.contains(m) {
                    vec![1.0; st.w.len()]
                } else {
                    st.w.clone()
                };
                (*m, w)
            })
            .collect()
    }
}

/// Output of one integration step on a tape.
pub struct EpochIntegration<'t> {
    pub scores: EpochScores,
    /// Post-freezing embeddings per side.
    pub frozen: BTreeMap<Side, ModalityEmbeddings<'t>>,
    pub joint: BTreeMap<Side, Var<'t>>,
}

/// Per-epoch integration with optional static-score caching.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub schedule: ThresholdSchedule,
    pub options: IntegrationOptions,
    cached: Option<EpochScores>,
}

fn unit_state(side: Side, modality: Modality, n: usize) -> ModalityState {
    ModalityState {
        side,
        modality,
        w: vec![1.0; n],
        mask: vec![true; n],
    }
}

impl Integrator {
    pub fn new(schedule: ThresholdSchedule, options: IntegrationOptions) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            options,
            cached: None,
        })
    }

    fn relevance(
        &self,
        delta: f64,
        src: &BTreeMap<Modality, Array2<f64>>,
        tgt: &BTreeMap<Modality, Array2<f64>>,
    ) -> Result<StateMap> {
        let mut states = BTreeMap::new();
        for (m, hs) in src {
            let ht = tgt
                .get(m)
                .ok_or_else(|| PmfError::Config(format!("target lacks modality {m}")))?;
            let (ws, wt) = if self.options.disable_relevance {
                (vec![1.0; hs.nrows()], vec![1.0; ht.nrows()])
            } else {
                relevance_scores(hs.view(), ht.view(), delta)?
            };
            for (side, w) in [(Side::Source, ws), (Side::Target, wt)] {
                let mask = if self.options.disable_freezing {
                    vec![true; w.len()]
                } else {
                    freeze_mask(&w)
                };
                states.insert((side, *m), ModalityState { side, modality: *m, w, mask });
            }
        }
        Ok(states)
    }

    fn force(&self, states: &mut StateMap) {
        for st in states.values_mut() {
            if self.options.forced_frozen.contains(&st.modality) {
                st.w.fill(0.0);
                st.mask.fill(false);
            }
        }
    }

    /// Scores for `epoch` without touching the static cache.
    pub fn scores(
        &self,
        epoch: usize,
        src: &BTreeMap<Modality, Array2<f64>>,
        tgt: &BTreeMap<Modality, Array2<f64>>,
    ) -> Result<EpochScores> {
        let mut out = match self.options.static_epoch {
            Some(e) if epoch < e => EpochScores {
                delta: self.schedule.delta(e),
                states: src
                    .iter()
                    .flat_map(|(m, h)| {
                        let nt = tgt.get(m).map_or(0, |t| t.nrows());
                        [
                            ((Side::Source, *m), unit_state(Side::Source, *m, h.nrows())),
                            ((Side::Target, *m), unit_state(Side::Target, *m, nt)),
                        ]
                    })
                    .collect(),
            },
            Some(e) => match &self.cached {
                Some(c) => c.clone(),
                None => {
                    let delta = self.schedule.delta(e);
                    EpochScores {
                        delta,
                        states: self.relevance(delta, src, tgt)?,
                    }
                }
            },
            None => {
                let delta = self.schedule.delta(epoch);
                EpochScores {
                    delta,
                    states: self.relevance(delta, src, tgt)?,
                }
            }
        };
        self.force(&mut out.states);
        Ok(out)
    }

    /// Scores, freezes and fuses freshly encoded embeddings of both graphs.
    pub fn integrate_epoch<'t>(
        &mut self,
        epoch: usize,
        src: &ModalityEmbeddings<'t>,
        tgt: &ModalityEmbeddings<'t>,
    ) -> Result<EpochIntegration<'t>> {
        let values = |e: &ModalityEmbeddings<'t>| e.iter().map(|(m, v)| (*m, v.to_array())).collect();
        let (sv, tv): (BTreeMap<_, _>, BTreeMap<_, _>) = (values(src), values(tgt));
        let scores = self.scores(epoch, &sv, &tv)?;
        if matches!(self.options.static_epoch, Some(e) if epoch >= e) && self.cached.is_none() {
            self.cached = Some(scores.clone());
        }
        self.apply(scores, src, tgt)
    }

    /// Freezes and fuses with precomputed scores.
    pub fn apply<'t>(
        &self,
        scores: EpochScores,
        src: &ModalityEmbeddings<'t>,
        tgt: &ModalityEmbeddings<'t>,
    ) -> Result<EpochIntegration<'t>> {
        let mut frozen = BTreeMap::new();
        let mut joint = BTreeMap::new();
        for (side, emb) in [(Side::Source, src), (Side::Target, tgt)] {
            let weights = scores.fusion_weights(side, &self.options);
            let mut side_frozen = BTreeMap::new();
            let mut blocks = Vec::new();
            for (m, h) in emb {
                let st = scores
                    .states
                    .get(&(side, *m))
                    .ok_or_else(|| PmfError::Config(format!("no scores for {side} {m}")))?;
                let hf = apply_freezing(h, &st.mask)?;
                side_frozen.insert(*m, hf);
                blocks.push((hf.normalize_rows(), *m));
            }
            let parts: Vec<(Var<'t>, &[f64])> = blocks.iter().map(|(h, m)| (*h, weights[m].as_slice())).collect();
            joint.insert(side, fuse_modalities(&parts)?);
            frozen.insert(side, side_frozen);
        }
        Ok(EpochIntegration { scores, frozen, joint })
    }
}
