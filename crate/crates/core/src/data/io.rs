use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::synthetic::CorruptionLabels;
use super::{Bags, MultiModalKG, Triple};
use crate::error::{PmfError, Result};
use crate::modality::Modality;

/// Magic prefix of a binary matrix block.
pub const MATRIX_MAGIC: &[u8; 5] = b"PMFV1";

/// On-disk layouts understood by [`load_kg_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetLayout {
    /// `triples_{1,2}.tsv`, `rel_bags_{1,2}.tsv`, `attr_bags_{1,2}.tsv`,
    /// `img_features_{1,2}.bin`, `seeds.tsv`, optional `corruption.tsv`.
    #[default]
    Pmf,
}

/// Two graphs plus their known alignment pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct KgPair {
    pub source: MultiModalKG,
    pub target: MultiModalKG,
    pub pairs: Vec<(usize, usize)>,
    /// Ground-truth corruption flags, present for generated datasets.
    pub corruption: Option<CorruptionLabels>,
}

/// Writes `PMFV1`, u32 LE rows, u32 LE cols, then row-major f32 LE values.
pub fn write_matrix_block<W: Write>(w: &mut W, m: &Array2<f64>) -> std::io::Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for &v in m.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one block written by [`write_matrix_block`]. `what` names the
/// source in error messages.
pub fn read_matrix_block<R: Read>(r: &mut R, what: &Path) -> Result<Array2<f64>> {
    let fmt = |detail: String| PmfError::Format {
        file: what.to_path_buf(),
        detail,
    };
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
    if &magic != MATRIX_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| fmt("truncated header".into()))?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(|_| fmt("truncated header".into()))?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| fmt(format!("expected {} values for {rows}x{cols}", rows * cols)))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length matches shape"))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(PmfError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| PmfError::io(path, e))
}

fn invalid(path: &Path, line: usize, detail: impl Into<String>) -> PmfError {
    PmfError::Validation {
        file: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

/// Non-empty lines with their 1-based line numbers, split on tabs.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| invalid(path, line, format!("{what} '{field}' is not a non-negative integer")))
}

fn parse_entity(path: &Path, line: usize, field: &str, n: usize) -> Result<usize> {
    let id = parse_id(path, line, field, "entity id")?;
    if id >= n {
        return Err(invalid(path, line, format!("entity {id} out of range for {n} entities")));
    }
    Ok(id)
}

fn read_triples(path: &Path, n: usize) -> Result<Vec<Triple>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        if f.len() != 3 {
            return Err(invalid(path, line, format!("expected 3 fields, found {}", f.len())));
        }
        out.push(Triple {
            head: parse_entity(path, line, f[0], n)?,
            relation: parse_id(path, line, f[1], "relation id")?,
            tail: parse_entity(path, line, f[2], n)?,
        });
    }
    Ok(out)
}

fn read_bags(path: &Path, n: usize) -> Result<Bags> {
    let text = read_text(path)?;
    let mut rows = vec![Vec::new(); n];
    for (line, f) in records(&text) {
        if f.len() > 2 {
            return Err(invalid(path, line, format!("expected 2 fields, found {}", f.len())));
        }
        let id = parse_entity(path, line, f[0], n)?;
        let items = f.get(1).copied().unwrap_or("");
        for item in items.split(',').filter(|s| !s.trim().is_empty()) {
            rows[id].push(parse_id(path, line, item, "vocabulary id")?);
        }
    }
    Ok(Bags::new(rows))
}

fn read_images(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(PmfError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| PmfError::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let m = read_matrix_block(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(PmfError::Format {
            file: path.to_path_buf(),
            detail: format!("{} trailing bytes", cursor.len()),
        });
    }
    Ok(m)
}

fn read_seeds(path: &Path, n_src: usize, n_tgt: usize) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        if f.len() != 2 {
            return Err(invalid(path, line, format!("expected 2 fields, found {}", f.len())));
        }
        out.push((
            parse_entity(path, line, f[0], n_src)?,
            parse_entity(path, line, f[1], n_tgt)?,
        ));
    }
    Ok(out)
}

fn read_corruption(path: &Path, n: usize) -> Result<CorruptionLabels> {
    let text = read_text(path)?;
    let mut labels = CorruptionLabels::clean(n);
    for (line, f) in records(&text) {
        if f.len() != 3 {
            return Err(invalid(path, line, format!("expected 3 fields, found {}", f.len())));
        }
        let id = parse_entity(path, line, f[0], n)?;
        let m: Modality = f[1]
            .parse()
            .map_err(|_| invalid(path, line, format!("unknown modality '{}'", f[1])))?;
        let flag = match f[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(invalid(path, line, format!("flag '{other}' is not 0 or 1"))),
        };
        labels.set(m, id, flag);
    }
    Ok(labels)
}

struct SideFiles {
    triples: Vec<Triple>,
    rel: Bags,
    attr: Bags,
    images: Array2<f64>,
}

fn read_side(dir: &Path, k: u8) -> Result<SideFiles> {
    let images = read_images(&dir.join(format!("img_features_{k}.bin")))?;
    // The image matrix has one row per entity and fixes the entity count.
    let n = images.nrows();
    Ok(SideFiles {
        triples: read_triples(&dir.join(format!("triples_{k}.tsv")), n)?,
        rel: read_bags(&dir.join(format!("rel_bags_{k}.tsv")), n)?,
        attr: read_bags(&dir.join(format!("attr_bags_{k}.tsv")), n)?,
        images,
    })
}

/// Loads a graph pair from `dir`.
///
/// The image file fixes each side's entity count; all-zero image rows mark
/// entities without an image. Relation and attribute vocabularies are shared
/// across both sides.
pub fn load_kg_pair(dir: &Path, layout: DatasetLayout) -> Result<KgPair> {
    let DatasetLayout::Pmf = layout;
    let a = read_side(dir, 1)?;
    let b = read_side(dir, 2)?;
    if a.images.ncols() != b.images.ncols() {
        return Err(PmfError::Format {
            file: dir.join("img_features_2.bin"),
            detail: format!(
                "image dimension {} differs from source dimension {}",
                b.images.ncols(),
                a.images.ncols()
            ),
        });
    }
    let max_rel = [&a, &b]
        .iter()
        .flat_map(|s| s.triples.iter().map(|t| t.relation).chain(s.rel.max_item()))
        .max();
    let n_relations = max_rel.map_or(0, |m| m + 1);
    let n_attributes = a.attr.max_item().max(b.attr.max_item()).map_or(0, |m| m + 1);

    let build = |s: SideFiles, name: &str| {
        let has_image: Vec<bool> = s.images.outer_iter().map(|r| r.iter().any(|&v| v != 0.0)).collect();
        let n = s.images.nrows();
        MultiModalKG::new(name, n, n_relations, n_attributes, s.triples, s.rel, s.attr, s.images, has_image)
    };
    let source = build(a, "source")?;
    let target = build(b, "target")?;
    let pairs = read_seeds(&dir.join("seeds.tsv"), source.n_entities, target.n_entities)?;
    let corruption_path = dir.join("corruption.tsv");
    let corruption = if corruption_path.exists() {
        Some(read_corruption(&corruption_path, target.n_entities)?)
    } else {
        None
    };
    Ok(KgPair {
        source,
        target,
        pairs,
        corruption,
    })
}

fn create(path: PathBuf) -> Result<BufWriter<fs::File>> {
    fs::File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| PmfError::io(path, e))
}

fn write_side(dir: &Path, k: u8, kg: &MultiModalKG) -> Result<()> {
    let wrap = |path: PathBuf| move |e| PmfError::io(path.clone(), e);

    let path = dir.join(format!("triples_{k}.tsv"));
    let mut w = create(path.clone())?;
    for t in &kg.triples {
        writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail).map_err(wrap(path.clone()))?;
    }
    w.flush().map_err(wrap(path))?;

    for (name, bags) in [("rel_bags", &kg.rel_bags), ("attr_bags", &kg.attr_bags)] {
        let path = dir.join(format!("{name}_{k}.tsv"));
        let mut w = create(path.clone())?;
        for (i, row) in bags.rows.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
            let items: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{i}\t{}", items.join(",")).map_err(wrap(path.clone()))?;
        }
        w.flush().map_err(wrap(path))?;
    }

    let path = dir.join(format!("img_features_{k}.bin"));
    let mut w = create(path.clone())?;
    write_matrix_block(&mut w, &kg.image_features).map_err(wrap(path.clone()))?;
    w.flush().map_err(wrap(path))
}

/// Writes the canonical layout read by [`load_kg_pair`].
pub fn write_kg_pair(dir: &Path, pair: &KgPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PmfError::io(dir, e))?;
    write_side(dir, 1, &pair.source)?;
    write_side(dir, 2, &pair.target)?;

    let path = dir.join("seeds.tsv");
    let mut w = create(path.clone())?;
    for (s, t) in &pair.pairs {
        writeln!(w, "{s}\t{t}").map_err(|e| PmfError::io(&path, e))?;
    }
    w.flush().map_err(|e| PmfError::io(&path, e))?;

    if let Some(labels) = &pair.corruption {
        let path = dir.join("corruption.tsv");
        let mut w = create(path.clone())?;
        for i in 0..labels.n_entities() {
            for m in Modality::ALL {
                writeln!(w, "{i}\t{m}\t{}", u8::from(labels.get(m, i))).map_err(|e| PmfError::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| PmfError::io(&path, e))?;
    }
    Ok(())
}
