//! Memory bank of pretrained normal features with exact top-K cosine addressing.
//!
//! Rows are stored raw (not normalized) because the alignment constraint uses
//! Euclidean distances on the original magnitudes. Row norms are cached once at
//! construction and reused by every cosine query.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::ops::Deref;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CapError, Result};
use crate::format::{self, ByteReader, DTYPE_F32};

/// Vectors with a Euclidean norm at or below this are rejected or flagged.
pub const MIN_NORM: f64 = 1e-12;

const BANK_MAGIC: &[u8; 8] = b"CAPBANK1";
const BANK_VERSION: u32 = 1;

/// A single pretrained embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(CapError::Empty("feature vector"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CapError::NonFinite {
                what: "feature vector",
                index,
            });
        }
        Ok(Self(values))
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

/// Sequential double-precision dot product of two f32 rows.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

pub(crate) fn l2_norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Metadata block carried by bank and feature-set files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetadata {
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
    /// One label per row (0 normal, 1 anomaly) for labeled test sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

/// A table of feature rows as stored on disk: the common shape of banks,
/// query sets and labeled test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub rows: Array2<f32>,
    pub labels: Option<Vec<u8>>,
    pub provenance: BTreeMap<String, String>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, rows: Array2<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        let set = Self {
            ids,
            rows: rows.as_standard_layout().into_owned(),
            labels,
            provenance: BTreeMap::new(),
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows.nrows();
        if self.ids.len() != n {
            return Err(CapError::LengthMismatch {
                what: "ids",
                expected: n,
                actual: self.ids.len(),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(CapError::LengthMismatch {
                    what: "labels",
                    expected: n,
                    actual: labels.len(),
                });
            }
            if let Some(index) = labels.iter().position(|&l| l > 1) {
                return Err(CapError::BadLabel {
                    index,
                    label: labels[index],
                });
            }
        }
        if let Some(index) = self.rows.iter().position(|v| !v.is_finite()) {
            return Err(CapError::NonFinite {
                what: "feature payload",
                index,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.rows.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = FeatureMetadata {
            ids: self.ids.clone(),
            provenance: self.provenance.clone(),
            labels: self.labels.clone(),
        };
        write_feature_file(w, self.rows.view(), &meta)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (rows, meta) = read_feature_file(r)?;
        let set = Self {
            ids: meta.ids,
            rows,
            labels: meta.labels,
            provenance: meta.provenance,
        };
        set.validate()?;
        Ok(set)
    }
}

fn write_feature_file<W: Write>(
    w: &mut W,
    rows: ArrayView2<'_, f32>,
    meta: &FeatureMetadata,
) -> Result<()> {
    let text = serde_json::to_string(meta)
        .map_err(|e| CapError::Malformed(format!("metadata encoding: {e}")))?;
    format::write_header(w, BANK_MAGIC, BANK_VERSION)?;
    format::write_u8(w, DTYPE_F32)?;
    format::write_u64(w, rows.nrows() as u64)?;
    format::write_u64(w, rows.ncols() as u64)?;
    format::write_f32s(w, rows.iter().copied())?;
    format::write_metadata(w, &text)?;
    Ok(())
}

fn read_feature_file<R: Read>(r: R) -> Result<(Array2<f32>, FeatureMetadata)> {
    let mut reader = ByteReader::from_reader(r)?;
    reader.expect_header(BANK_MAGIC, BANK_VERSION)?;
    let dtype = reader.read_u8("header")?;
    if dtype != DTYPE_F32 {
        return Err(CapError::UnknownDtype(dtype));
    }
    let n = reader.read_usize("header")?;
    let d = reader.read_usize("header")?;
    let count = format::checked_product(&[n, d], "payload")?;
    let values = reader.read_f32s(count, "payload")?;
    let text = reader.read_metadata()?;
    let meta: FeatureMetadata = serde_json::from_str(&text)
        .map_err(|e| CapError::Malformed(format!("metadata: {e}")))?;
    let rows = Array2::from_shape_vec((n, d), values)
        .map_err(|e| CapError::Malformed(e.to_string()))?;
    Ok((rows, meta))
}

/// The K rows most similar to a query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    /// K×D rows copied from the bank in rank order.
    pub matrix: Array2<f32>,
}

impl NeighborSet {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Ordering used for ranking: higher similarity first, then lower index.
pub(crate) fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Immutable matrix of normal pretrained features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    items: Array2<f32>,
    norms: Vec<f64>,
    ids: Vec<String>,
    provenance: BTreeMap<String, String>,
}

impl MemoryBank {
    /// Builds a bank from feature vectors, preserving input order.
    pub fn build(features: &[FeatureVector], ids: &[String]) -> Result<Self> {
        let first = features.first().ok_or(CapError::Empty("bank features"))?;
        let d = first.len();
        if ids.len() != features.len() {
            return Err(CapError::LengthMismatch {
                what: "ids",
                expected: features.len(),
                actual: ids.len(),
            });
        }
        let mut flat = Vec::with_capacity(features.len() * d);
        for f in features {
            if f.len() != d {
                return Err(CapError::DimensionMismatch {
                    expected: d,
                    actual: f.len(),
                });
            }
            flat.extend_from_slice(f);
        }
        let items = Array2::from_shape_vec((features.len(), d), flat)
            .map_err(|e| CapError::Malformed(e.to_string()))?;
        Self::from_parts(items, ids.to_vec(), BTreeMap::new())
    }

    /// Builds a bank from a loaded feature table; labels are ignored.
    pub fn from_feature_set(set: FeatureSet) -> Result<Self> {
        Self::from_parts(set.rows, set.ids, set.provenance)
    }

    fn from_parts(
        items: Array2<f32>,
        ids: Vec<String>,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        let (n, d) = items.dim();
        if n == 0 {
            return Err(CapError::Empty("bank features"));
        }
        if d == 0 {
            return Err(CapError::Empty("feature dimension"));
        }
        if ids.len() != n {
            return Err(CapError::LengthMismatch {
                what: "ids",
                expected: n,
                actual: ids.len(),
            });
        }
        let items = items.as_standard_layout().into_owned();
        let flat = items.as_slice().expect("standard layout");
        if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
            return Err(CapError::NonFinite {
                what: "bank payload",
                index,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for (index, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(CapError::DuplicateId {
                    id: id.clone(),
                    index,
                });
            }
        }
        let norms: Vec<f64> = flat.chunks_exact(d).map(l2_norm).collect();
        if let Some(index) = norms.iter().position(|&n| n <= MIN_NORM) {
            return Err(CapError::NearZeroVector {
                index,
                norm: norms[index],
            });
        }
        Ok(Self {
            items,
            norms,
            ids,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.items.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.items.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    pub fn items(&self) -> ArrayView2<'_, f32> {
        self.items.view()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    pub fn set_provenance(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.provenance.insert(key.into(), value.into());
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.items.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Cosine similarity of the query against every bank row, clamped to [-1, 1].
    pub fn cosine_similarities(&self, query: &[f32]) -> Result<Vec<f64>> {
        let qn = self.check_query(query)?;
        Ok((0..self.len())
            .map(|j| (dot(self.row(j), query) / (self.norms[j] * qn)).clamp(-1.0, 1.0))
            .collect())
    }

    fn check_query(&self, query: &[f32]) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(CapError::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        let qn = l2_norm(query);
        if !(qn > MIN_NORM) {
            return Err(CapError::ZeroNormQuery { norm: qn });
        }
        Ok(qn)
    }

    /// Exact top-k search by cosine similarity.
    ///
    /// `exclude` drops one bank index from consideration; training uses it to
    /// skip the query's own row. Ties resolve to the lower bank index.
    pub fn top_k_neighbors(
        &self,
        query: &[f32],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborSet> {
        if k == 0 {
            return Err(CapError::KZero);
        }
        if let Some(index) = exclude {
            if index >= self.len() {
                return Err(CapError::ExcludeOutOfRange {
                    index,
                    len: self.len(),
                });
            }
        }
        let available = self.len() - usize::from(exclude.is_some());
        if k > available {
            return Err(CapError::KTooLarge { k, available });
        }
        let sims = self.cosine_similarities(query)?;
        let mut ranked: Vec<(f64, usize)> = sims
            .into_iter()
            .enumerate()
            .filter(|&(j, _)| Some(j) != exclude)
            .map(|(j, s)| (s, j))
            .collect();
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, rank_order);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(rank_order);

        let d = self.dim();
        let mut matrix = Array2::<f32>::zeros((k, d));
        for (r, &(_, j)) in ranked.iter().enumerate() {
            matrix
                .row_mut(r)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(self.row(j));
        }
        Ok(NeighborSet {
            indices: ranked.iter().map(|&(_, j)| j).collect(),
            similarities: ranked.iter().map(|&(s, _)| s).collect(),
            matrix,
        })
    }

    pub fn to_feature_set(&self) -> FeatureSet {
        FeatureSet {
            ids: self.ids.clone(),
            rows: self.items.clone(),
            labels: None,
            provenance: self.provenance.clone(),
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = FeatureMetadata {
            ids: self.ids.clone(),
            provenance: self.provenance.clone(),
            labels: None,
        };
        write_feature_file(w, self.items.view(), &meta)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (items, meta) = read_feature_file(r)?;
        Self::from_parts(items, meta.ids, meta.provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn three_row_bank() -> MemoryBank {
        MemoryBank::build(&[fv(&[1.0, 0.0]), fv(&[0.0, 1.0]), fv(&[0.6, 0.8])], &ids(3)).unwrap()
    }

    #[test]
    fn unit_rows_have_unit_norms() {
        let bank = MemoryBank::build(&[fv(&[1.0, 0.0]), fv(&[0.0, 1.0])], &ids(2)).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.dim(), 2);
        assert_eq!(bank.norms(), &[1.0, 1.0]);
    }

    #[test]
    fn pythagorean_norm() {
        let bank = MemoryBank::build(&[fv(&[3.0, 4.0])], &ids(1)).unwrap();
        assert_eq!(bank.norms(), &[5.0]);
    }

    #[test]
    fn cached_norms_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<FeatureVector> = (0..100)
            .map(|_| fv(&(0..64).map(|_| rng.random_range(-2.0f32..2.0)).collect::<Vec<_>>()))
            .collect();
        let bank = MemoryBank::build(&rows, &ids(100)).unwrap();
        for (row, &cached) in rows.iter().zip(bank.norms()) {
            let mut sq = 0.0f64;
            for &v in row.iter().rev() {
                sq += (v as f64).powi(2);
            }
            let direct = sq.sqrt();
            assert!((cached - direct).abs() <= 1e-6 * direct);
        }
    }

    #[test]
    fn build_rejects_bad_input() {
        let err = MemoryBank::build(&[fv(&[1.0, 0.0]), fv(&[1.0])], &ids(2)).unwrap_err();
        assert!(matches!(err, CapError::DimensionMismatch { expected: 2, actual: 1 }));

        let dup = vec!["a".to_string(), "a".to_string()];
        let err = MemoryBank::build(&[fv(&[1.0]), fv(&[2.0])], &dup).unwrap_err();
        assert!(matches!(err, CapError::DuplicateId { index: 1, .. }));

        let err = MemoryBank::build(&[fv(&[1.0, 0.0]), fv(&[0.0, 0.0])], &ids(2)).unwrap_err();
        assert!(matches!(err, CapError::NearZeroVector { index: 1, .. }));

        assert!(FeatureVector::new(vec![f32::NAN]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
    }

    #[test]
    fn cosine_against_analytic_values() {
        let bank = three_row_bank();
        let sims = bank.cosine_similarities(&[1.0, 0.0]).unwrap();
        assert_eq!(sims[0], 1.0);
        assert_eq!(sims[1], 0.0);
        assert!((sims[2] - 0.6).abs() < 1e-7);

        let self_sim = bank.cosine_similarities(bank.row(2)).unwrap();
        assert!((self_sim[2] - 1.0).abs() < 1e-12);

        assert!(matches!(
            bank.cosine_similarities(&[0.0, 0.0]),
            Err(CapError::ZeroNormQuery { .. })
        ));
    }

    #[test]
    fn cosine_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<FeatureVector> = (0..200)
            .map(|_| fv(&(0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()))
            .collect();
        let bank = MemoryBank::build(&rows, &ids(200)).unwrap();
        let q: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let sims = bank.cosine_similarities(&q).unwrap();
        for (row, s) in rows.iter().zip(&sims) {
            let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..32 {
                let (a, b) = (row[i] as f64, q[i] as f64);
                ab += a * b;
                aa += a * a;
                bb += b * b;
            }
            assert!((s - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_examples() {
        let bank = three_row_bank();
        let ns = bank.top_k_neighbors(&[1.0, 0.0], 2, None).unwrap();
        assert_eq!(ns.indices, vec![0, 2]);
        assert_eq!(ns.similarities[0], 1.0);
        assert!((ns.similarities[1] - 0.6).abs() < 1e-7);
        assert_eq!(ns.matrix, array![[1.0f32, 0.0], [0.6, 0.8]]);

        let ns = bank.top_k_neighbors(&[1.0, 0.0], 2, Some(0)).unwrap();
        assert_eq!(ns.indices, vec![2, 1]);

        let dup = MemoryBank::build(&[fv(&[1.0, 0.0]), fv(&[1.0, 0.0])], &ids(2)).unwrap();
        assert_eq!(dup.top_k_neighbors(&[1.0, 0.0], 1, None).unwrap().indices, vec![0]);
        // With duplicates, excluding index 0 must still return the twin at index 1.
        assert_eq!(dup.top_k_neighbors(&[1.0, 0.0], 1, Some(0)).unwrap().indices, vec![1]);
    }

    #[test]
    fn top_k_errors() {
        let bank = three_row_bank();
        assert!(matches!(
            bank.top_k_neighbors(&[1.0, 0.0], 4, None),
            Err(CapError::KTooLarge { k: 4, available: 3 })
        ));
        assert!(matches!(
            bank.top_k_neighbors(&[1.0, 0.0], 3, Some(1)),
            Err(CapError::KTooLarge { k: 3, available: 2 })
        ));
        assert!(matches!(
            bank.top_k_neighbors(&[1.0, 0.0], 1, Some(3)),
            Err(CapError::ExcludeOutOfRange { index: 3, len: 3 })
        ));
        assert!(matches!(bank.top_k_neighbors(&[1.0, 0.0], 0, None), Err(CapError::KZero)));
    }

    #[test]
    fn save_load_round_trip() {
        let mut bank = three_row_bank();
        bank.set_provenance("extractor", "synthetic");
        let mut bytes = Vec::new();
        bank.save(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"CAPBANK1");
        let loaded = MemoryBank::load(bytes.as_slice()).unwrap();
        assert_eq!(loaded, bank);
        let mut again = Vec::new();
        loaded.save(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn load_rejects_malformed_files() {
        assert!(matches!(
            MemoryBank::load(&[][..]),
            Err(CapError::BadMagic { expected: "CAPBANK1" })
        ));

        let mut bytes = Vec::new();
        three_row_bank().save(&mut bytes).unwrap();

        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        assert!(matches!(
            MemoryBank::load(wrong_version.as_slice()),
            Err(CapError::VersionMismatch { found: 2, supported: 1 })
        ));

        let mut wrong_dtype = bytes.clone();
        wrong_dtype[12] = 7;
        assert!(matches!(MemoryBank::load(wrong_dtype.as_slice()), Err(CapError::UnknownDtype(7))));

        // Header claims 3x2 floats = 24 bytes; keep only 10 of them.
        let header_len = 8 + 4 + 1 + 8 + 8;
        let short = &bytes[..header_len + 10];
        match MemoryBank::load(short) {
            Err(CapError::Truncated {
                section: "payload",
                expected: 24,
                actual: 10,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feature_set_keeps_labels() {
        let set = FeatureSet::new(
            ids(3),
            array![[1.0f32, 0.0], [0.0, 0.0], [0.5, 0.5]],
            Some(vec![0, 1, 0]),
        )
        .unwrap();
        let mut bytes = Vec::new();
        set.write_to(&mut bytes).unwrap();
        let back = FeatureSet::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, set);
        // A zero row is fine in a query set but not in a bank.
        assert!(matches!(
            MemoryBank::from_feature_set(back),
            Err(CapError::NearZeroVector { index: 1, .. })
        ));

        let bad = FeatureSet::new(ids(1), array![[1.0f32]], Some(vec![2]));
        assert!(matches!(bad, Err(CapError::BadLabel { index: 0, label: 2 })));
    }
}
