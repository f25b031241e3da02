//! Fixed item embeddings derived from item text.
//!
//! The built-in provider hashes character trigrams of the item text and
//! projects the trigram bag onto `dim` dimensions with a seeded Gaussian
//! random projection. Vectors produced offline by any other model can be
//! loaded from CSV instead. Tables are immutable once built; the checksum lets
//! training code prove it never touched them.

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::datasets::{Item, ItemId};
use crate::error::{Error, Result};
use crate::rng;

pub const TRIGRAM_PROVIDER: &str = "trigram-projection-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    /// Row-major, one unit-norm row per item.
    vectors: Vec<f64>,
    provider_tag: String,
    checksum: String,
}

impl EmbeddingTable {
    /// Builds a table from raw rows, normalizing each to unit L2 norm. Rows
    /// already of unit norm up to rounding are kept bit for bit, so a table
    /// written to CSV loads back with the same checksum.
    pub fn from_rows(rows: Vec<Vec<f64>>, provider_tag: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("embedding rows must be non-empty"));
        }
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (idx, mut row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding row {idx} has {} values, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding row {idx}")));
            }
            if !normalize(&mut row) {
                return Err(Error::invalid(format!("embedding row {idx} has zero norm")));
            }
            vectors.extend_from_slice(&row);
        }
        let mut table = EmbeddingTable {
            dim,
            vectors,
            provider_tag: provider_tag.into(),
            checksum: String::new(),
        };
        table.checksum = table.compute_checksum();
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_items(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn row(&self, item: ItemId) -> &[f64] {
        let start = item as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    /// Checksum recorded at construction.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// SHA-256 over the little-endian bytes of every value.
    pub fn compute_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for v in &self.vectors {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn verify_checksum(&self) -> bool {
        self.compute_checksum() == self.checksum
    }

    pub fn cosine(&self, a: ItemId, b: ItemId) -> f64 {
        // rows are unit norm
        self.row(a)
            .iter()
            .zip(self.row(b))
            .map(|(x, y)| x * y)
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for row in self.vectors.chunks(self.dim) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

const UNIT_NORM_TOLERANCE: f64 = 1e-12;

fn normalize(row: &mut [f64]) -> bool {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return false;
    }
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        row.iter_mut().for_each(|v| *v /= norm);
    }
    true
}

fn gaussian_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn trigram_hash(chars: &[char]) -> u64 {
    let mut h = FnvHasher::default();
    for c in chars {
        h.write_u32(*c as u32);
    }
    h.finish()
}

const EMPTY_TEXT_STREAM: u64 = 0x454d_5054_5954_5854;

/// Embeds every item from its text. Items with identical text get identical
/// rows; items with empty text get a seeded random unit vector keyed by id.
pub fn embed_items(items: &[Item], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim < 2 {
        return Err(Error::invalid(format!(
            "embedding dim must be >= 2, got {dim}"
        )));
    }
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let text: Vec<char> = format!(" {} ", item.text.trim().to_lowercase())
            .chars()
            .collect();
        let mut bag: BTreeMap<u64, f64> = BTreeMap::new();
        if text.len() > 2 {
            for w in text.windows(3) {
                *bag.entry(trigram_hash(w)).or_insert(0.0) += 1.0;
            }
        }
        let mut row = vec![0.0; dim];
        if !item.text.trim().is_empty() {
            for (h, count) in &bag {
                let proj = gaussian_vector(rng::derive_seed(seed, *h), dim);
                row.iter_mut().zip(&proj).for_each(|(r, p)| *r += count * p);
            }
        }
        if !normalize(&mut row) {
            row = gaussian_vector(
                rng::derive_seed(seed ^ EMPTY_TEXT_STREAM, item.id as u64),
                dim,
            );
            normalize(&mut row);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid("cannot embed an empty catalogue"));
    }
    EmbeddingTable::from_rows(rows, format!("{TRIGRAM_PROVIDER}/seed={seed}"))
}

/// Parses headerless CSV, one row per item in id order. The dimension is
/// taken from the first row.
pub fn parse_embeddings<R: Read>(
    input: R,
    expected_num_items: usize,
    name: &str,
) -> Result<EmbeddingTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            source_name: name.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    source_name: name.into(),
                    line,
                    message: format!("non-numeric field `{f}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::Parse {
                    source_name: name.into(),
                    line,
                    message: format!("row has {} fields, first row has {first}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.len() != expected_num_items {
        return Err(Error::RowCount {
            expected: expected_num_items,
            found: rows.len(),
        });
    }
    EmbeddingTable::from_rows(rows, format!("file:{name}"))
}

pub fn load_embeddings(path: &Path, expected_num_items: usize) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(file, expected_num_items, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticConfig};

    fn item(id: ItemId, text: &str) -> Item {
        Item {
            id,
            text: text.into(),
        }
    }

    #[test]
    fn identical_text_identical_rows() {
        let t = embed_items(
            &[item(0, "red apple"), item(1, "red apple"), item(2, "pear")],
            8,
            1,
        )
        .unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert_ne!(t.row(0), t.row(2));
    }

    #[test]
    fn rows_are_unit_norm() {
        let items: Vec<_> = (0..50)
            .map(|i| item(i, &format!("item {i} text")))
            .collect();
        let t = embed_items(&items, 16, 4).unwrap();
        for i in 0..50 {
            let n: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_text_falls_back_per_id() {
        let t = embed_items(&[item(0, ""), item(1, "  ")], 4, 9).unwrap();
        assert_ne!(t.row(0), t.row(1));
        let again = embed_items(&[item(0, ""), item(1, "  ")], 4, 9).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn dim_must_be_at_least_two() {
        assert!(embed_items(&[item(0, "x")], 1, 0).is_err());
    }

    #[test]
    fn cluster_structure_survives_embedding() {
        let cfg = SyntheticConfig::default();
        let corpus = generate_synthetic(&cfg).unwrap();
        let t = embed_items(&corpus.items, 16, 0).unwrap();
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0, 0.0, 0);
        for a in 0..200u32 {
            for b in (a + 1)..200u32 {
                let cs = t.cosine(a, b);
                if cfg.cluster_of(a) == cfg.cluster_of(b) {
                    intra += cs;
                    n_intra += 1;
                } else {
                    inter += cs;
                    n_inter += 1;
                }
            }
        }
        assert!(intra / n_intra as f64 > inter / n_inter as f64);
    }

    #[test]
    fn load_normalizes_and_checks_rows() {
        let t = parse_embeddings("3,4\n1,0\n".as_bytes(), 2, "mem").unwrap();
        assert_eq!(t.dim(), 2);
        assert!((t.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((t.row(0)[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            parse_embeddings("3,4\n".as_bytes(), 2, "mem"),
            Err(Error::RowCount {
                expected: 2,
                found: 1
            })
        ));
        assert!(matches!(
            parse_embeddings("3,x\n1,0\n".as_bytes(), 2, "mem"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_embeddings("0,0\n".as_bytes(), 1, "mem").is_err());
    }

    #[test]
    fn csv_roundtrip_preserves_values() {
        let items: Vec<_> = (0..5).map(|i| item(i, &format!("thing {i}"))).collect();
        let t = embed_items(&items, 6, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        t.write_csv(&p).unwrap();
        let back = load_embeddings(&p, 5).unwrap();
        for i in 0..5 {
            for (a, b) in t.row(i).iter().zip(back.row(i)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(t.verify_checksum());
    }
}
