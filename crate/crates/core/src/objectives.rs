//! Contrastive objectives: cross-modality association inside each graph and
//! bidirectional cross-graph alignment over seed pairs.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diff::{hconcat, Var};
use crate::encoders::ModalityEmbeddings;
use crate::error::{PmfError, Result};
use crate::modality::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaWeights {
    pub str: f64,
    pub rel: f64,
    pub attr: f64,
    pub img: f64,
}

impl Default for BetaWeights {
    fn default() -> Self {
        Self {
            str: 0.1,
            rel: 0.1,
            attr: 0.1,
            img: 10.0,
        }
    }
}

impl BetaWeights {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Str => self.str,
            Modality::Rel => self.rel,
            Modality::Attr => self.attr,
            Modality::Img => self.img,
        }
    }
}

/// Negative pool of the cross-graph loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativesMode {
    /// Every entity of the opposite graph.
    #[default]
    Full,
    /// Only the opposite-side entities of the current seed batch.
    InBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: BetaWeights,
    pub negatives: NegativesMode,
    /// Use `-½ log(l(i→j) + l(j→i))` instead of the mean of the two logs.
    pub ckg_literal_sum: bool,
    /// Modality pairs of the association loss; all unordered pairs of the
    /// active modalities when absent.
    pub modality_pairs: Option<Vec<(Modality, Modality)>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            beta: BetaWeights::default(),
            negatives: NegativesMode::Full,
            ckg_literal_sum: false,
            modality_pairs: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(PmfError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for m in Modality::ALL {
            if !(self.beta.get(m) > 0.0) {
                return Err(PmfError::Config(format!("beta.{m} must be positive")));
            }
        }
        if let Some(pairs) = &self.modality_pairs {
            if pairs.iter().any(|(p, q)| p == q) {
                return Err(PmfError::Config("modality pairs must be distinct".into()));
            }
        }
        Ok(())
    }

    pub fn pairs_for(&self, modalities: &[Modality]) -> Vec<(Modality, Modality)> {
        match &self.modality_pairs {
            Some(p) => p.clone(),
            None => {
                let mut mods = modalities.to_vec();
                mods.sort();
                let mut out = Vec::new();
                for (k, &p) in mods.iter().enumerate() {
                    for &q in &mods[k + 1..] {
                        out.push((p, q));
                    }
                }
                out
            }
        }
    }
}

fn zero<'t>(like: &Var<'t>) -> Var<'t> {
    like.tape().constant(Array2::zeros((1, 1)))
}

/// `Σ_i [log(Σ_{neg ∪ pos} exp(s/τ)) − s_ii/τ]` for one modality pair.
fn pair_term<'t>(hp: &Var<'t>, hq: &Var<'t>, tau: f64) -> Result<Var<'t>> {
    let n = hp.shape().0;
    let s = hp.normalize_rows().matmul_t(&hq.normalize_rows())?.scale(1.0 / tau);
    // Row i of [S | Sᵀ] holds s(h_i^p, h_j^q) and s(h_j^p, h_i^q); the
    // duplicate positive in the second half is masked out.
    let u = hconcat(&[s, s.t()])?;
    let mask = Array2::from_shape_fn((n, 2 * n), |(i, j)| j != n + i);
    let lse = u.logsumexp_rows(Some(Rc::new(mask)))?;
    Ok(lse.sub(&s.diag()?)?.sum())
}

/// Association loss of one graph, `Σ_(p,q) β_p β_q Σ_i −log l(i; p, q)`.
///
/// `rows` restricts the entity pool (and the negatives) to a subset.
pub fn cross_modality_loss<'t>(
    embeddings: &ModalityEmbeddings<'t>,
    config: &LossConfig,
    rows: Option<&[usize]>,
) -> Result<Var<'t>> {
    let any = embeddings
        .values()
        .next()
        .ok_or_else(|| PmfError::Config("no modality embeddings".into()))?;
    let modalities: Vec<Modality> = embeddings.keys().copied().collect();
    let mut total = zero(any);
    for (p, q) in config.pairs_for(&modalities) {
        let get = |m: Modality| {
            let h = embeddings
                .get(&m)
                .ok_or_else(|| PmfError::Config(format!("embeddings lack modality {m}")))?;
            match rows {
                Some(r) => h.gather_rows(r),
                None => Ok(*h),
            }
        };
        let term = pair_term(&get(p)?, &get(q)?, config.tau)?;
        total = total.add(&term.scale(config.beta.get(p) * config.beta.get(q)))?;
    }
    Ok(total)
}

/// Bidirectional alignment loss of one modality over `seeds`.
pub fn cross_kg_term<'t>(
    source: &Var<'t>,
    target: &Var<'t>,
    seeds: &[(usize, usize)],
    config: &LossConfig,
) -> Result<Var<'t>> {
    if seeds.is_empty() {
        return Ok(zero(source));
    }
    let (ns, nt) = (source.shape().0, target.shape().0);
    if let Some(&(s, t)) = seeds.iter().find(|(s, t)| *s >= ns || *t >= nt) {
        return Err(PmfError::Data(format!(
            "seed ({s}, {t}) outside {ns} source / {nt} target entities"
        )));
    }
    let a = source.normalize_rows();
    let b = target.normalize_rows();
    let src_idx: Vec<usize> = seeds.iter().map(|p| p.0).collect();
    let tgt_idx: Vec<usize> = seeds.iter().map(|p| p.1).collect();
    let a_batch = a.gather_rows(&src_idx)?;
    let b_batch = b.gather_rows(&tgt_idx)?;
    let inv = 1.0 / config.tau;
    // −log l for each direction as a column over the batch.
    let (fwd, bwd) = match config.negatives {
        NegativesMode::Full => {
            let s1 = a_batch.matmul_t(&b)?.scale(inv);
            let s2 = b_batch.matmul_t(&a)?.scale(inv);
            let pos1: Vec<(usize, usize)> = tgt_idx.iter().copied().enumerate().collect();
            let pos2: Vec<(usize, usize)> = src_idx.iter().copied().enumerate().collect();
            (
                s1.logsumexp_rows(None)?.sub(&s1.pick(&pos1)?)?,
                s2.logsumexp_rows(None)?.sub(&s2.pick(&pos2)?)?,
            )
        }
        NegativesMode::InBatch => {
            let s = a_batch.matmul_t(&b_batch)?.scale(inv);
            let st = s.t();
            (
                s.logsumexp_rows(None)?.sub(&s.diag()?)?,
                st.logsumexp_rows(None)?.sub(&st.diag()?)?,
            )
        }
    };
    if config.ckg_literal_sum {
        let l1 = fwd.scale(-1.0).exp();
        let l2 = bwd.scale(-1.0).exp();
        Ok(l1.add(&l2)?.ln().sum().scale(-0.5))
    } else {
        Ok(fwd.add(&bwd)?.sum().scale(0.5))
    }
}

/// Alignment loss summed over the given modality embeddings (the caller
/// includes the joint embedding).
pub fn cross_kg_loss<'t>(
    source: &[Var<'t>],
    target: &[Var<'t>],
    seeds: &[(usize, usize)],
    config: &LossConfig,
) -> Result<Var<'t>> {
    if source.len() != target.len() || source.is_empty() {
        return Err(PmfError::Config("cross-graph loss needs matching modality lists".into()));
    }
    let mut total = zero(&source[0]);
    for (s, t) in source.iter().zip(target) {
        total = total.add(&cross_kg_term(s, t, seeds, config)?)?;
    }
    Ok(total)
}

/// `L = L_CM + L_CKG`, rejecting non-finite parts.
pub fn total_loss<'t>(l_cm: &Var<'t>, l_ckg: &Var<'t>) -> Result<Var<'t>> {
    for (name, v) in [("cross-modality", l_cm), ("cross-graph", l_ckg)] {
        let x = v.scalar();
        if !x.is_finite() {
            return Err(PmfError::Numeric(format!("{name} loss is {x}")));
        }
    }
    l_cm.add(l_ckg)
}
