//! Per-modality entity encoders.
//!
//! Structure is encoded by graph attention over a learned per-graph base
//! table; relation bags, attribute bags and image vectors pass through one
//! dense layer each. Layer weights are shared by both graphs, base tables
//! are not.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bag_vocabulary, build_bag_features_with_vocab, BagKind, KgPair, MultiModalKG};
use crate::diff::{Tape, Var};
use crate::error::{PmfError, Result};
use crate::modality::{Modality, Side};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub gat_layers: usize,
    pub leaky_slope: f64,
    /// Maximum relation/attribute bag vocabulary.
    pub bag_cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            gat_layers: 2,
            leaky_slope: 0.2,
            bag_cap: 1000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.gat_layers == 0 || self.bag_cap == 0 {
            return Err(PmfError::Config("dim, gat_layers and bag_cap must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(PmfError::Config(format!("leaky_slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Raw encoder inputs of one graph.
#[derive(Debug, Clone)]
pub struct SideFeatures {
    pub adjacency: Rc<Array2<bool>>,
    pub rel: Array2<f64>,
    pub attr: Array2<f64>,
    pub img: Array2<f64>,
}

impl SideFeatures {
    pub fn n_entities(&self) -> usize {
        self.adjacency.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub source: SideFeatures,
    pub target: SideFeatures,
}

impl PairFeatures {
    /// Builds multi-hot bags over a vocabulary shared by both graphs.
    pub fn from_pair(pair: &KgPair, bag_cap: usize) -> Self {
        let kgs = [&pair.source, &pair.target];
        let rel_vocab = bag_vocabulary(&kgs, BagKind::Relation, bag_cap);
        let attr_vocab = bag_vocabulary(&kgs, BagKind::Attribute, bag_cap);
        let side = |kg: &MultiModalKG| SideFeatures {
            adjacency: Rc::new(kg.adjacency()),
            rel: build_bag_features_with_vocab(kg, BagKind::Relation, &rel_vocab),
            attr: build_bag_features_with_vocab(kg, BagKind::Attribute, &attr_vocab),
            img: kg.image_features.clone(),
        };
        Self {
            source: side(&pair.source),
            target: side(&pair.target),
        }
    }

    pub fn side(&self, side: Side) -> &SideFeatures {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }
}

pub fn base_name(side: Side) -> String {
    format!("str.base.{}", side.label())
}

fn gat_names(layer: usize) -> [String; 3] {
    [
        format!("str.gat{layer}.w"),
        format!("str.gat{layer}.a_src"),
        format!("str.gat{layer}.a_dst"),
    ]
}

/// Named encoder parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub modalities: Vec<Modality>,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl EncoderParams {
    /// Xavier-uniform weights and zero biases for the given modalities.
    pub fn init(config: &EncoderConfig, modalities: &[Modality], features: &PairFeatures, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut modalities = modalities.to_vec();
        modalities.sort();
        modalities.dedup();
        if modalities.is_empty() {
            return Err(PmfError::Config("at least one modality is required".into()));
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for &m in &modalities {
            match m {
                Modality::Str => {
                    for side in [Side::Source, Side::Target] {
                        let n = features.side(side).n_entities();
                        tensors.insert(base_name(side), xavier(&mut rng, n, d));
                    }
                    for l in 0..config.gat_layers {
                        let [w, a_src, a_dst] = gat_names(l);
                        tensors.insert(w, xavier(&mut rng, d, d));
                        tensors.insert(a_src, xavier(&mut rng, d, 1));
                        tensors.insert(a_dst, xavier(&mut rng, d, 1));
                    }
                }
                Modality::Rel | Modality::Attr | Modality::Img => {
                    let k = dense_input(&features.source, m).ncols();
                    tensors.insert(format!("{m}.w"), xavier(&mut rng, k.max(1), d));
                    // The image layer has no bias so a missing image stays a zero row.
                    if m != Modality::Img {
                        tensors.insert(format!("{m}.b"), Array2::zeros((1, d)));
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            modalities,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| PmfError::Config(format!("missing encoder parameter '{name}'")))
    }

    /// Records every tensor on `tape`, as trainable inputs or as constants.
    pub fn attach<'t>(&self, tape: &'t Tape, trainable: bool) -> TapeParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        TapeParams { vars }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn dense_input(side: &SideFeatures, m: Modality) -> &Array2<f64> {
    match m {
        Modality::Rel => &side.rel,
        Modality::Attr => &side.attr,
        Modality::Img => &side.img,
        Modality::Str => unreachable!("structure is not a dense modality"),
    }
}

/// Encoder parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct TapeParams<'t> {
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> TapeParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| PmfError::Config(format!("missing encoder parameter '{name}'")))
    }

    fn opt(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatLayer<'t> {
    pub w: Var<'t>,
    pub a_src: Var<'t>,
    pub a_dst: Var<'t>,
}

/// One attention layer. Returns the aggregated features and the attention
/// matrix whose row `i` holds the weights of node `i` over its neighbors.
pub fn gat_layer<'t>(
    x: &Var<'t>,
    layer: &GatLayer<'t>,
    adjacency: &Rc<Array2<bool>>,
    slope: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.shape().0;
    if adjacency.dim() != (n, n) {
        return Err(PmfError::dim(
            "encode_structure",
            format!("adjacency {:?} for {n} entities", adjacency.dim()),
        ));
    }
    let z = x.matmul(&layer.w)?;
    let s = z.matmul(&layer.a_src)?;
    let t = z.matmul(&layer.a_dst)?.t();
    let logits = s.outer_add(&t)?.leaky_relu(slope);
    let attention = logits.softmax_rows(Some(Rc::clone(adjacency)))?;
    Ok((attention.matmul(&z)?, attention))
}

/// Stacked attention layers with ReLU between layers.
pub fn encode_structure<'t>(
    adjacency: &Rc<Array2<bool>>,
    base: &Var<'t>,
    layers: &[GatLayer<'t>],
    slope: f64,
) -> Result<Var<'t>> {
    let mut h = *base;
    for (l, layer) in layers.iter().enumerate() {
        if l > 0 {
            h = h.relu();
        }
        h = gat_layer(&h, layer, adjacency, slope)?.0;
    }
    Ok(h)
}

/// `features · W (+ bias)`, no activation.
pub fn encode_dense<'t>(features: &Var<'t>, w: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
    let (_, k) = features.shape();
    if k != w.shape().0 {
        return Err(PmfError::dim(
            "encode_dense",
            format!("{k} input columns for a {:?} weight", w.shape()),
        ));
    }
    let out = features.matmul(w)?;
    match bias {
        Some(b) => out.add_row(b),
        None => Ok(out),
    }
}

pub type ModalityEmbeddings<'t> = BTreeMap<Modality, Var<'t>>;

/// Encodes every modality in `modalities` for one graph.
pub fn encode_all<'t>(
    tape: &'t Tape,
    side: Side,
    features: &SideFeatures,
    params: &TapeParams<'t>,
    modalities: &[Modality],
    config: &EncoderConfig,
) -> Result<ModalityEmbeddings<'t>> {
    let mut out = BTreeMap::new();
    for &m in modalities {
        let h = match m {
            Modality::Str => {
                let base = params.get(&base_name(side))?;
                let layers = (0..config.gat_layers)
                    .map(|l| {
                        let [w, a_src, a_dst] = gat_names(l);
                        Ok(GatLayer {
                            w: params.get(&w)?,
                            a_src: params.get(&a_src)?,
                            a_dst: params.get(&a_dst)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                encode_structure(&features.adjacency, &base, &layers, config.leaky_slope)?
            }
            _ => {
                let x = tape.constant(dense_input(features, m).clone());
                let w = params.get(&format!("{m}.w"))?;
                let b = params.opt(&format!("{m}.b"));
                encode_dense(&x, &w, b.as_ref())?
            }
        };
        out.insert(m, h);
    }
    Ok(out)
}
