//! Multi-modal knowledge-graph model, on-disk layout, seed splits and the
//! synthetic paired-graph generator.

mod bags;
mod io;
mod seeds;
mod synthetic;

pub use bags::{bag_vocabulary, build_bag_features, build_bag_features_with_vocab, BagKind};
pub use io::{load_kg_pair, read_matrix_block, write_kg_pair, write_matrix_block, DatasetLayout, KgPair};
pub use seeds::{split_seeds, AlignmentSeedSet};
pub use synthetic::{generate_synthetic_pair, CorruptionLabels, CorruptionRates, SyntheticPair, SyntheticSpec};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PmfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Sparse bag of vocabulary items per entity; row `i` lists the distinct
/// item ids of entity `i` in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bags {
    pub rows: Vec<Vec<usize>>,
}

impl Bags {
    pub fn new(mut rows: Vec<Vec<usize>>) -> Self {
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
        }
        Self { rows }
    }

    pub fn max_item(&self) -> Option<usize> {
        self.rows.iter().flat_map(|r| r.iter().copied()).max()
    }
}

/// One knowledge graph with per-modality raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalKG {
    pub name: String,
    pub n_entities: usize,
    /// Relation vocabulary size.
    pub n_relations: usize,
    /// Attribute vocabulary size.
    pub n_attributes: usize,
    pub triples: Vec<Triple>,
    pub rel_bags: Bags,
    pub attr_bags: Bags,
    /// `n_entities × d_v`; rows of entities without an image are zero.
    pub image_features: Array2<f64>,
    pub has_image: Vec<bool>,
    /// Sorted neighbor lists of the symmetrized, self-looped adjacency.
    pub neighbors: Vec<Vec<usize>>,
}

impl MultiModalKG {
    /// Builds a graph and derives the adjacency from `triples`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n_entities: usize,
        n_relations: usize,
        n_attributes: usize,
        triples: Vec<Triple>,
        rel_bags: Bags,
        attr_bags: Bags,
        image_features: Array2<f64>,
        has_image: Vec<bool>,
    ) -> Result<Self> {
        let neighbors = adjacency_lists(n_entities, &triples)?;
        let kg = Self {
            name: name.into(),
            n_entities,
            n_relations,
            n_attributes,
            triples,
            rel_bags,
            attr_bags,
            image_features,
            has_image,
            neighbors,
        };
        kg.validate()?;
        Ok(kg)
    }

    pub fn image_dim(&self) -> usize {
        self.image_features.ncols()
    }

    /// Dense 0/1 adjacency (symmetric, ones on the diagonal).
    pub fn adjacency(&self) -> Array2<bool> {
        let mut a = Array2::from_elem((self.n_entities, self.n_entities), false);
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                a[[i, j]] = true;
            }
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_entities;
        let bad = |detail: String| Err(PmfError::Data(format!("{}: {detail}", self.name)));
        for t in &self.triples {
            if t.head >= n || t.tail >= n {
                return bad(format!("triple {t:?} references an entity outside [0, {n})"));
            }
            if t.relation >= self.n_relations {
                return bad(format!("triple {t:?} uses relation outside vocabulary of {}", self.n_relations));
            }
        }
        for (bags, vocab, label) in [
            (&self.rel_bags, self.n_relations, "relation"),
            (&self.attr_bags, self.n_attributes, "attribute"),
        ] {
            if bags.rows.len() != n {
                return bad(format!("{} {label} bag rows for {n} entities", bags.rows.len()));
            }
            if let Some(item) = bags.max_item().filter(|&m| m >= vocab) {
                return bad(format!("{label} item {item} outside vocabulary of {vocab}"));
            }
        }
        if self.image_features.nrows() != n || self.has_image.len() != n {
            return bad(format!(
                "image matrix has {} rows and {} flags for {n} entities",
                self.image_features.nrows(),
                self.has_image.len()
            ));
        }
        for (i, &present) in self.has_image.iter().enumerate() {
            if !present && self.image_features.row(i).iter().any(|&v| v != 0.0) {
                return bad(format!("entity {i} has no image but a nonzero image row"));
            }
        }
        Ok(())
    }
}

fn adjacency_lists(n: usize, triples: &[Triple]) -> Result<Vec<Vec<usize>>> {
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for t in triples {
        if t.head >= n || t.tail >= n {
            return Err(PmfError::Data(format!(
                "triple {t:?} references an entity outside [0, {n})"
            )));
        }
        neighbors[t.head].push(t.tail);
        neighbors[t.tail].push(t.head);
    }
    for ns in &mut neighbors {
        ns.sort_unstable();
        ns.dedup();
    }
    Ok(neighbors)
}
