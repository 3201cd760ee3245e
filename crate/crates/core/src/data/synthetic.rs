use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Bags, KgPair, MultiModalKG, Triple};
use crate::error::{PmfError, Result};
use crate::modality::Modality;

/// Fraction of entities whose target-side feature is replaced by an
/// unrelated sample, per modality.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionRates {
    pub str: f64,
    pub rel: f64,
    pub attr: f64,
    pub img: f64,
}

impl CorruptionRates {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Str => self.str,
            Modality::Rel => self.rel,
            Modality::Attr => self.attr,
            Modality::Img => self.img,
        }
    }
}

/// Parameters of a synthetic aligned graph pair. Entity `i` of the source
/// graph aligns with entity `i` of the target graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_attributes: usize,
    /// Expected triples per entity.
    pub triple_density: f64,
    pub d_v: usize,
    pub corrupt_rate: CorruptionRates,
    pub missing_image_rate: f64,
    pub seed: u64,
    /// Norm of the additive image noise relative to the mean image norm.
    pub image_noise: f64,
    /// Fraction of target triples rewired to a random tail.
    pub structure_noise: f64,
    /// Per-item replacement probability for target attribute bags.
    pub bag_noise: f64,
    pub attrs_per_entity: usize,
    /// Relations drawn per entity profile.
    pub relations_per_entity: usize,
    /// Probability that a triple's relation comes from the head's profile.
    pub relation_affinity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_relations: 40,
            n_attributes: 60,
            triple_density: 3.0,
            d_v: 32,
            corrupt_rate: CorruptionRates::default(),
            missing_image_rate: 0.0,
            seed: 0,
            image_noise: 0.1,
            structure_noise: 0.1,
            bag_noise: 0.1,
            attrs_per_entity: 5,
            relations_per_entity: 3,
            relation_affinity: 0.7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 {
            return Err(PmfError::Config(format!(
                "synthetic n_entities must be at least 2, got {}",
                self.n_entities
            )));
        }
        let rates = [
            ("corrupt_rate.str", self.corrupt_rate.str),
            ("corrupt_rate.rel", self.corrupt_rate.rel),
            ("corrupt_rate.attr", self.corrupt_rate.attr),
            ("corrupt_rate.img", self.corrupt_rate.img),
            ("missing_image_rate", self.missing_image_rate),
            ("structure_noise", self.structure_noise),
            ("bag_noise", self.bag_noise),
            ("relation_affinity", self.relation_affinity),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(PmfError::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.n_relations == 0 || self.n_attributes == 0 || self.d_v == 0 {
            return Err(PmfError::Config(
                "n_relations, n_attributes and d_v must be positive".into(),
            ));
        }
        if !(self.triple_density >= 0.0 && self.image_noise >= 0.0) {
            return Err(PmfError::Config("triple_density and image_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground-truth corruption flags per modality and entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionLabels {
    flags: BTreeMap<Modality, Vec<bool>>,
}

impl CorruptionLabels {
    pub fn clean(n: usize) -> Self {
        Self {
            flags: Modality::ALL.iter().map(|&m| (m, vec![false; n])).collect(),
        }
    }

    pub fn n_entities(&self) -> usize {
        self.flags[&Modality::Str].len()
    }

    pub fn get(&self, m: Modality, entity: usize) -> bool {
        self.flags[&m][entity]
    }

    pub fn set(&mut self, m: Modality, entity: usize, flag: bool) {
        self.flags.get_mut(&m).expect("all modalities present")[entity] = flag;
    }

    pub fn flags(&self, m: Modality) -> &[bool] {
        &self.flags[&m]
    }

    pub fn count(&self, m: Modality) -> usize {
        self.flags[&m].iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub pair: KgPair,
    pub labels: CorruptionLabels,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 1e-9).floor() as usize
}

fn choose_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &order[..k] {
        flags[i] = true;
    }
    flags
}

fn random_tail(rng: &mut ChaCha8Rng, n: usize, head: usize) -> usize {
    let t = rng.random_range(0..n - 1);
    if t >= head {
        t + 1
    } else {
        t
    }
}

fn relation_bags(n: usize, triples: &[Triple]) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); n];
    for t in triples {
        rows[t.head].push(t.relation);
        rows[t.tail].push(t.relation);
    }
    rows
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Generates an aligned pair with controlled target-side corruption.
///
/// Uncorrupted target features are noisy copies of the source features;
/// corrupted ones are resampled independently. Exactly
/// `floor(rate · n)` entities are corrupted per modality.
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let n = spec.n_entities;

    let mut labels = CorruptionLabels::clean(n);
    let mut pick = stream(spec.seed, 0);
    for m in Modality::ALL {
        let flags = choose_subset(&mut pick, n, count(spec.corrupt_rate.get(m), n));
        for (i, f) in flags.into_iter().enumerate() {
            labels.set(m, i, f);
        }
    }

    // Structure and relations.
    let mut rng = stream(spec.seed, 1);
    let profiles: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            (0..spec.relations_per_entity.max(1))
                .map(|_| rng.random_range(0..spec.n_relations))
                .collect()
        })
        .collect();
    let n_triples = (spec.triple_density * n as f64).round() as usize;
    let relation_for = |rng: &mut ChaCha8Rng, head: usize| {
        if rng.random_bool(spec.relation_affinity) {
            profiles[head][rng.random_range(0..profiles[head].len())]
        } else {
            rng.random_range(0..spec.n_relations)
        }
    };
    let source_triples: Vec<Triple> = (0..n_triples)
        .map(|_| {
            let head = rng.random_range(0..n);
            let tail = random_tail(&mut rng, n, head);
            Triple {
                head,
                relation: relation_for(&mut rng, head),
                tail,
            }
        })
        .collect();

    let mut rng = stream(spec.seed, 2);
    let str_corrupt = labels.flags(Modality::Str).to_vec();
    let mut target_triples = Vec::with_capacity(source_triples.len());
    let mut rewired_degree = vec![0usize; n];
    for t in &source_triples {
        if str_corrupt[t.head] || str_corrupt[t.tail] {
            for e in [t.head, t.tail] {
                if str_corrupt[e] {
                    rewired_degree[e] += 1;
                }
            }
            continue;
        }
        if rng.random_bool(spec.structure_noise) {
            target_triples.push(Triple {
                head: t.head,
                relation: t.relation,
                tail: random_tail(&mut rng, n, t.head),
            });
        } else {
            target_triples.push(*t);
        }
    }
    // Corrupted entities keep their degree but connect to random entities.
    for (e, &deg) in rewired_degree.iter().enumerate() {
        for _ in 0..deg {
            target_triples.push(Triple {
                head: e,
                relation: relation_for(&mut rng, e),
                tail: random_tail(&mut rng, n, e),
            });
        }
    }

    let source_rel = relation_bags(n, &source_triples);
    let mut target_rel = relation_bags(n, &target_triples);
    let mut rng = stream(spec.seed, 3);
    for (i, row) in target_rel.iter_mut().enumerate() {
        if labels.get(Modality::Rel, i) {
            let size = row.len().max(1);
            *row = (0..size).map(|_| rng.random_range(0..spec.n_relations)).collect();
        }
    }

    // Attributes.
    let mut rng = stream(spec.seed, 4);
    let per = spec.attrs_per_entity.max(1);
    let source_attr: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..per).map(|_| rng.random_range(0..spec.n_attributes)).collect())
        .collect();
    let target_attr: Vec<Vec<usize>> = source_attr
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if labels.get(Modality::Attr, i) {
                (0..per).map(|_| rng.random_range(0..spec.n_attributes)).collect()
            } else {
                row.iter()
                    .map(|&a| {
                        if rng.random_bool(spec.bag_noise) {
                            rng.random_range(0..spec.n_attributes)
                        } else {
                            a
                        }
                    })
                    .collect()
            }
        })
        .collect();

    // Images.
    let mut rng = stream(spec.seed, 5);
    let d = spec.d_v;
    let source_img = gaussian_rows(&mut rng, n, d);
    let mean_norm = source_img
        .outer_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum::<f64>()
        / n as f64;
    let sigma = spec.image_noise * mean_norm / (d as f64).sqrt();
    let mut target_img = Array2::zeros((n, d));
    for i in 0..n {
        let fresh = labels.get(Modality::Img, i);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            target_img[[i, j]] = if fresh { z } else { source_img[[i, j]] + sigma * z };
        }
    }
    let mut rng = stream(spec.seed, 6);
    let k_missing = count(spec.missing_image_rate, n);
    let missing_src = choose_subset(&mut rng, n, k_missing);
    let missing_tgt = choose_subset(&mut rng, n, k_missing);

    let finish = |mut img: Array2<f64>, missing: &[bool]| {
        // f32 precision so in-memory pairs equal their on-disk form.
        img.mapv_inplace(|v| v as f32 as f64);
        for (i, &gone) in missing.iter().enumerate() {
            if gone {
                img.row_mut(i).fill(0.0);
            }
        }
        let has: Vec<bool> = missing.iter().map(|m| !m).collect();
        (img, has)
    };
    let (source_img, source_has) = finish(source_img, &missing_src);
    let (target_img, target_has) = finish(target_img, &missing_tgt);

    let source = MultiModalKG::new(
        "source",
        n,
        spec.n_relations,
        spec.n_attributes,
        source_triples,
        Bags::new(source_rel),
        Bags::new(source_attr),
        source_img,
        source_has,
    )?;
    let target = MultiModalKG::new(
        "target",
        n,
        spec.n_relations,
        spec.n_attributes,
        target_triples,
        Bags::new(target_rel),
        Bags::new(target_attr),
        target_img,
        target_has,
    )?;
    Ok(SyntheticPair {
        pair: KgPair {
            source,
            target,
            pairs: (0..n).map(|i| (i, i)).collect(),
            corruption: Some(labels.clone()),
        },
        labels,
    })
}
