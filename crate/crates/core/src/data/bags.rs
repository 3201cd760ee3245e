use ndarray::Array2;

use super::{Bags, MultiModalKG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagKind {
    Relation,
    Attribute,
}

impl BagKind {
    fn bags(self, kg: &MultiModalKG) -> &Bags {
        match self {
            BagKind::Relation => &kg.rel_bags,
            BagKind::Attribute => &kg.attr_bags,
        }
    }

    fn vocab_size(self, kg: &MultiModalKG) -> usize {
        match self {
            BagKind::Relation => kg.n_relations,
            BagKind::Attribute => kg.n_attributes,
        }
    }
}

/// Item ids kept as feature columns, in ascending id order.
///
/// When the vocabulary shared by `kgs` fits in `cap` every id is kept;
/// otherwise the `cap` items occurring in the most entities (ties to the
/// smaller id) are kept.
pub fn bag_vocabulary(kgs: &[&MultiModalKG], kind: BagKind, cap: usize) -> Vec<usize> {
    let size = kgs.iter().map(|kg| kind.vocab_size(kg)).max().unwrap_or(0);
    if size <= cap {
        return (0..size).collect();
    }
    let mut counts = vec![0usize; size];
    for kg in kgs {
        for row in &kind.bags(kg).rows {
            for &item in row {
                counts[item] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(cap);
    order.sort_unstable();
    order
}

/// Multi-hot matrix of one graph's relation or attribute bags over its own
/// vocabulary, truncated to the `cap` most frequent items.
pub fn build_bag_features(kg: &MultiModalKG, kind: BagKind, cap: usize) -> Array2<f64> {
    let vocab = bag_vocabulary(&[kg], kind, cap);
    build_bag_features_with_vocab(kg, kind, &vocab)
}

/// Multi-hot matrix over an explicit column vocabulary; items outside it are
/// dropped and entities with an empty bag get a zero row.
pub fn build_bag_features_with_vocab(kg: &MultiModalKG, kind: BagKind, vocab: &[usize]) -> Array2<f64> {
    let size = vocab.iter().max().map_or(0, |m| m + 1);
    let mut column = vec![usize::MAX; size];
    for (c, &item) in vocab.iter().enumerate() {
        column[item] = c;
    }
    let bags = kind.bags(kg);
    let mut out = Array2::zeros((kg.n_entities, vocab.len()));
    for (i, row) in bags.rows.iter().enumerate() {
        for &item in row {
            if let Some(&c) = column.get(item).filter(|&&c| c != usize::MAX) {
                out[[i, c]] = 1.0;
            }
        }
    }
    out
}
