//! The descriptor map and exact L2 nearest-neighbor search.
//!
//! Map file layout (little-endian): magic `VPRM`, version u16, D u32, N u64,
//! flags u16 (bit 0 = rows normalized), N x D f32 descriptors, N x 2 f64
//! poses, N ids as u32 byte length + UTF-8, then the 32-byte model
//! fingerprint.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{Dataset, Pose};
use crate::embedding::{extract_raw, Descriptor, EmbeddingModel, Fingerprint};
use crate::error::{Result, VprError};

const MAP_MAGIC: &[u8; 4] = b"VPRM";
const MAP_VERSION: u16 = 1;
const FLAG_NORMALIZED: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap {
    dim: usize,
    /// Row-major `N x D`.
    descriptors: Vec<f32>,
    poses: Vec<Pose>,
    ids: Vec<String>,
    model_fingerprint: Fingerprint,
    normalized: bool,
}

/// Ranked neighbors of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(reference index, distance)`, ascending by distance, ties by index.
    pub ranked: Vec<(usize, f64)>,
}

impl DescriptorMap {
    pub fn new(
        dim: usize,
        descriptors: Vec<f32>,
        poses: Vec<Pose>,
        ids: Vec<String>,
        model_fingerprint: Fingerprint,
        normalized: bool,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(VprError::EmptyReferences);
        }
        if dim == 0 || descriptors.len() != n * dim {
            return Err(VprError::ShapeError {
                expected: n * dim,
                actual: descriptors.len(),
            });
        }
        if poses.len() != n {
            return Err(VprError::ShapeError {
                expected: n,
                actual: poses.len(),
            });
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(VprError::FormatError("non-finite descriptor entry".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(VprError::InconsistentManifest {
                id: dup.clone(),
                reason: "duplicate map id".into(),
            });
        }
        Ok(Self {
            dim,
            descriptors,
            poses,
            ids,
            model_fingerprint,
            normalized,
        })
    }

    /// Map from unit-norm descriptor rows.
    pub fn from_descriptors(
        rows: &[Descriptor],
        poses: Vec<Pose>,
        ids: Vec<String>,
        model_fingerprint: Fingerprint,
    ) -> Result<Self> {
        let dim = rows
            .first()
            .map(|d| d.dim())
            .ok_or(VprError::EmptyReferences)?;
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(VprError::ShapeError {
                    expected: dim,
                    actual: r.dim(),
                });
            }
            flat.extend(r.0.iter().map(|&v| v as f32));
        }
        Self::new(dim, flat, poses, ids, model_fingerprint, true)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.descriptors.chunks_exact(self.dim)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn model_fingerprint(&self) -> Fingerprint {
        self.model_fingerprint
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * self.descriptors.len() + 16 * self.len() + 32);
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&MAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let flags = if self.normalized { FLAG_NORMALIZED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in &self.descriptors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.poses {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out.extend_from_slice(&self.model_fingerprint.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, HEADER_LEN as u64)?;
        if magic != MAP_MAGIC {
            return Err(VprError::FormatError(format!("bad map magic {magic:02x?}")));
        }
        let header_rest = r.take(HEADER_LEN - 4, HEADER_LEN as u64)?;
        let version = u16::from_le_bytes([header_rest[0], header_rest[1]]);
        if version != MAP_VERSION {
            return Err(VprError::FormatError(format!(
                "unsupported map version {version}"
            )));
        }
        let dim = u32::from_le_bytes(header_rest[2..6].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(header_rest[6..14].try_into().unwrap());
        let flags = u16::from_le_bytes([header_rest[14], header_rest[15]]);
        if flags & !FLAG_NORMALIZED != 0 {
            return Err(VprError::FormatError(format!(
                "unknown map flags {flags:#x}"
            )));
        }
        // minimum size with empty ids; lets truncation be reported before allocation
        let fixed = HEADER_LEN as u64 + n * (4 * dim as u64 + 16 + 4) + 32;
        if (bytes.len() as u64) < fixed {
            return Err(VprError::TruncatedError {
                expected: fixed,
                actual: bytes.len() as u64,
            });
        }
        let n = n as usize;
        let descriptors = r
            .take(4 * n * dim, fixed)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let poses = r
            .take(16 * n, fixed)?
            .chunks_exact(16)
            .map(|c| {
                Pose::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        let mut ids = Vec::with_capacity(n);
        let mut expected = fixed;
        for _ in 0..n {
            let len = u32::from_le_bytes(r.take(4, expected)?.try_into().unwrap()) as usize;
            expected += len as u64;
            let raw = r.take(len, expected)?;
            ids.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| VprError::FormatError("map id is not UTF-8".into()))?,
            );
        }
        let fp: [u8; 32] = r.take(32, expected)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(VprError::FormatError(format!(
                "{} trailing bytes after map",
                bytes.len() - r.pos
            )));
        }
        Self::new(
            dim,
            descriptors,
            poses,
            ids,
            Fingerprint(fp),
            flags & FLAG_NORMALIZED != 0,
        )
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, expected_total: u64) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(VprError::TruncatedError {
                expected: expected_total.max((self.pos + n) as u64),
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

pub fn save_map(map: &DescriptorMap, path: &Path) -> Result<()> {
    crate::config::write_atomic(path, &map.to_bytes())
}

pub fn load_map(path: &Path) -> Result<DescriptorMap> {
    DescriptorMap::from_bytes(&std::fs::read(path)?)
}

/// Descriptors of a list of images, in order.
pub fn describe_all(
    model: &EmbeddingModel,
    images: &[crate::dataset::ImageRecord],
) -> Result<Vec<Descriptor>> {
    images
        .par_iter()
        .map(|r| model.forward(&extract_raw(&r.image)))
        .collect()
}

/// Offline stage: describes every reference image, in id order.
pub fn build_map(dataset: &Dataset, model: &EmbeddingModel) -> Result<DescriptorMap> {
    if dataset.references().is_empty() {
        return Err(VprError::EmptyReferences);
    }
    let rows = describe_all(model, dataset.references())?;
    DescriptorMap::from_descriptors(
        &rows,
        dataset.reference_poses().to_vec(),
        dataset.references().iter().map(|r| r.id.clone()).collect(),
        model.fingerprint(),
    )
}

#[inline]
fn squared_distance(row: &[f32], query: &[f64]) -> f64 {
    row.iter()
        .zip(query)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

/// Exact top-`k` search under L2 distance with ties broken by lower index.
pub fn knn(map: &DescriptorMap, query: &Descriptor, k: usize) -> Result<Vec<(usize, f64)>> {
    knn_slice(map, query.as_slice(), k)
}

pub fn knn_slice(map: &DescriptorMap, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if query.len() != map.dim {
        return Err(VprError::ShapeError {
            expected: map.dim,
            actual: query.len(),
        });
    }
    if k == 0 || k > map.len() {
        return Err(VprError::KTooLarge { k, n: map.len() });
    }
    let mut scored: Vec<(usize, f64)> = map
        .rows()
        .enumerate()
        .map(|(i, row)| (i, squared_distance(row, query)))
        .collect();
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    Ok(scored.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect())
}

/// Online stage for a batch of queries.
pub fn retrieve(
    map: &DescriptorMap,
    queries: &[(String, Descriptor)],
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    queries
        .par_iter()
        .map(|(id, d)| {
            Ok(RetrievalResult {
                query_id: id.clone(),
                ranked: knn(map, d, k)?,
            })
        })
        .collect()
}

/// Describes every query of `dataset` with `model` and retrieves its top `k`.
pub fn retrieve_dataset(
    map: &DescriptorMap,
    model: &EmbeddingModel,
    dataset: &Dataset,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    let queries = dataset.queries();
    let descriptors = describe_all(model, queries)?;
    let pairs: Vec<(String, Descriptor)> = queries
        .iter()
        .map(|q| q.id.clone())
        .zip(descriptors)
        .collect();
    retrieve(map, &pairs, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_map(rows: &[&[f32]]) -> DescriptorMap {
        let dim = rows[0].len();
        DescriptorMap::new(
            dim,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            (0..rows.len()).map(|i| Pose::new(i as f64, 0.0)).collect(),
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            Fingerprint::default(),
            true,
        )
        .unwrap()
    }

    #[test]
    fn query_equal_to_row_ranks_first() {
        let rows: Vec<Vec<f32>> = (0..6)
            .map(|i| vec![i as f32, 1.0 - i as f32 * 0.1])
            .collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let map = toy_map(&refs);
        let q: Vec<f64> = map.row(3).iter().map(|&v| v as f64).collect();
        let res = knn_slice(&map, &q, 3).unwrap();
        assert_eq!(res[0], (3, 0.0));
    }

    #[test]
    fn hand_computed_two_dimensional_case() {
        let map = toy_map(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let q = [0.6, 0.8];
        let res = knn_slice(&map, &q, 3).unwrap();
        let idx: Vec<usize> = res.iter().map(|r| r.0).collect();
        assert_eq!(idx, vec![1, 0, 2]);
        // |(0.6,-0.2)|, |(-0.4,0.8)|, |(1.6,0.8)|
        let expect = [0.4f64.sqrt(), 0.8f64.sqrt(), 3.2f64.sqrt()];
        for ((_, d), e) in res.iter().zip(expect) {
            assert!((d - e).abs() < 1e-12, "{d} vs {e}");
        }
    }

    #[test]
    fn ties_break_by_lower_index() {
        let map = toy_map(&[
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[0.5, 0.5],
            &[-1.0, 0.0],
            &[0.0, -1.0],
            &[0.5, 0.5],
        ]);
        let res = knn_slice(&map, &[0.5, 0.5], 2).unwrap();
        assert_eq!(res, vec![(2, 0.0), (5, 0.0)]);
    }

    #[test]
    fn k_and_dim_errors() {
        let map = toy_map(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            knn_slice(&map, &[1.0, 0.0], 3),
            Err(VprError::KTooLarge { k: 3, n: 2 })
        ));
        assert!(matches!(
            knn_slice(&map, &[1.0, 0.0], 0),
            Err(VprError::KTooLarge { .. })
        ));
        assert!(matches!(
            knn_slice(&map, &[1.0], 1),
            Err(VprError::ShapeError { .. })
        ));
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let map = toy_map(&[&[0.25, -0.5, 1.0], &[0.0, 1e-7, -3.5]]);
        let bytes = map.to_bytes();
        let back = DescriptorMap::from_bytes(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(
            DescriptorMap::from_bytes(&bad),
            Err(VprError::FormatError(_))
        ));
        for cut in [3, 10, bytes.len() - 40, bytes.len() - 1] {
            assert!(
                matches!(
                    DescriptorMap::from_bytes(&bytes[..cut]),
                    Err(VprError::TruncatedError { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = DescriptorMap::new(
            1,
            vec![0.0, 1.0],
            vec![Pose::new(0.0, 0.0); 2],
            vec!["a".into(), "a".into()],
            Fingerprint::default(),
            true,
        );
        assert!(err.is_err());
    }
}
