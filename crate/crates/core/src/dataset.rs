//! Geo-tagged image sets: the query/reference structure, the on-disk
//! directory layout and seeded validation splits.
//!
//! Directory layout:
//!
//! ```text
//! root/
//!   references/<id>.ppm
//!   reference_poses.csv     id,x_m,y_m
//!   queries/<id>.ppm        optional
//!   query_poses.csv         optional
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, VprError};
use crate::image::{read_ppm, write_ppm, RgbImage};

pub const REFERENCE_DIR: &str = "references";
pub const QUERY_DIR: &str = "queries";
pub const REFERENCE_POSES: &str = "reference_poses.csv";
pub const QUERY_POSES: &str = "query_poses.csv";
const POSE_HEADER: [&str; 3] = ["id", "x_m", "y_m"];

/// Mean Earth radius in meters (IUGG).
const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Planar position in meters: `x` east, `y` north.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: RgbImage,
    pub pose: Option<Pose>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, image: RgbImage, pose: Option<Pose>) -> Self {
        Self {
            id: id.into(),
            image,
            pose,
        }
    }
}

/// A query set and a reference set, each with parallel pose lists.
///
/// Both sets are kept sorted by id, so integer indices are stable. Reads of the
/// query side are counted, which lets callers verify that a procedure meant to
/// use only the reference side never looked at the queries.
pub struct Dataset {
    name: String,
    queries: Vec<ImageRecord>,
    query_poses: Vec<Pose>,
    references: Vec<ImageRecord>,
    reference_poses: Vec<Pose>,
    query_reads: AtomicUsize,
}

impl Dataset {
    /// Validates the invariants and sorts both sets by id. `query_poses` may be
    /// empty when query poses are unknown.
    pub fn new(
        name: impl Into<String>,
        queries: Vec<ImageRecord>,
        query_poses: Vec<Pose>,
        references: Vec<ImageRecord>,
        reference_poses: Vec<Pose>,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(VprError::EmptyReferences);
        }
        if references.len() != reference_poses.len() {
            return Err(VprError::InvalidDataset(format!(
                "{} references but {} reference poses",
                references.len(),
                reference_poses.len()
            )));
        }
        if !query_poses.is_empty() && query_poses.len() != queries.len() {
            return Err(VprError::InvalidDataset(format!(
                "{} queries but {} query poses",
                queries.len(),
                query_poses.len()
            )));
        }
        let (references, reference_poses) = sort_and_check(references, Some(reference_poses))?;
        let has_query_poses = !query_poses.is_empty();
        let (queries, query_poses) =
            sort_and_check(queries, has_query_poses.then_some(query_poses))?;
        Ok(Self {
            name: name.into(),
            queries,
            query_poses,
            references,
            reference_poses,
            query_reads: AtomicUsize::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn references(&self) -> &[ImageRecord] {
        &self.references
    }

    pub fn reference_poses(&self) -> &[Pose] {
        &self.reference_poses
    }

    pub fn queries(&self) -> &[ImageRecord] {
        self.query_reads.fetch_add(1, Ordering::Relaxed);
        &self.queries
    }

    pub fn query_poses(&self) -> &[Pose] {
        self.query_reads.fetch_add(1, Ordering::Relaxed);
        &self.query_poses
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    pub fn has_query_poses(&self) -> bool {
        !self.query_poses.is_empty() || self.queries.is_empty()
    }

    /// Number of times the query images or query poses were accessed.
    pub fn query_reads(&self) -> usize {
        self.query_reads.load(Ordering::Relaxed)
    }

    /// Copy of the dataset without its query side.
    pub fn reference_only(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            queries: Vec::new(),
            query_poses: Vec::new(),
            references: self.references.clone(),
            reference_poses: self.reference_poses.clone(),
            query_reads: AtomicUsize::new(0),
        }
    }
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            queries: self.queries.clone(),
            query_poses: self.query_poses.clone(),
            references: self.references.clone(),
            reference_poses: self.reference_poses.clone(),
            query_reads: AtomicUsize::new(self.query_reads()),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.queries == other.queries
            && self.query_poses == other.query_poses
            && self.references == other.references
            && self.reference_poses == other.reference_poses
    }
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("name", &self.name)
            .field("queries", &self.queries.len())
            .field("query_poses", &self.query_poses.len())
            .field("references", &self.references.len())
            .finish()
    }
}

fn sort_and_check(
    records: Vec<ImageRecord>,
    poses: Option<Vec<Pose>>,
) -> Result<(Vec<ImageRecord>, Vec<Pose>)> {
    let mut paired: Vec<(ImageRecord, Option<Pose>)> = match poses {
        Some(poses) => records
            .into_iter()
            .zip(poses)
            .map(|(r, p)| (r, Some(p)))
            .collect(),
        None => records.into_iter().map(|r| (r, None)).collect(),
    };
    paired.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    for w in paired.windows(2) {
        if w[0].0.id == w[1].0.id {
            return Err(VprError::InconsistentManifest {
                id: w[0].0.id.clone(),
                reason: "appears more than once".into(),
            });
        }
    }
    let mut out_records = Vec::with_capacity(paired.len());
    let mut out_poses = Vec::new();
    for (mut record, pose) in paired {
        record.image.validate(&record.id)?;
        if let Some(pose) = pose {
            if !pose.is_finite() {
                return Err(VprError::InvalidDataset(format!(
                    "pose of `{}` is not finite",
                    record.id
                )));
            }
            record.pose = Some(pose);
            out_poses.push(pose);
        }
        out_records.push(record);
    }
    Ok((out_records, out_poses))
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Evaluation radius the dataset is meant for; used only to warn about
    /// queries that have no reference within reach.
    pub radius_hint: f64,
    /// Manifests hold `id,lat,lon` in WGS84 degrees; converted to a local
    /// planar frame around the centroid of the reference poses.
    pub geographic: bool,
    /// Skip the query side entirely: neither query images nor query poses
    /// are read.
    pub references_only: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            radius_hint: crate::evaluation::DEFAULT_RADIUS_M,
            geographic: false,
            references_only: false,
        }
    }
}

/// Loads a dataset directory. Pose ids are matched against image file stems.
pub fn load_dataset(root: &Path, options: &LoadOptions) -> Result<Dataset> {
    let ref_manifest = root.join(REFERENCE_POSES);
    if !ref_manifest.is_file() {
        return Err(VprError::ManifestMissing(ref_manifest));
    }
    let mut ref_rows = read_pose_manifest(&ref_manifest)?;

    let query_dir = root.join(QUERY_DIR);
    let query_manifest = root.join(QUERY_POSES);
    let mut query_rows = if query_manifest.is_file() && !options.references_only {
        Some(read_pose_manifest(&query_manifest)?)
    } else {
        None
    };

    if options.geographic {
        let origin = geographic_origin(&ref_rows);
        for (_, pose) in ref_rows.iter_mut().chain(query_rows.iter_mut().flatten()) {
            *pose = geographic_to_local(*pose, origin);
        }
    }

    let references = load_images(&root.join(REFERENCE_DIR), &ref_rows)?;
    let reference_poses = ref_rows.iter().map(|(_, p)| *p).collect();

    let (queries, query_poses) = match (&query_rows, query_dir.is_dir() && !options.references_only)
    {
        (Some(rows), _) => (
            load_images(&query_dir, rows)?,
            rows.iter().map(|(_, p)| *p).collect(),
        ),
        (None, true) => {
            let ids = list_ppm_stems(&query_dir)?;
            let rows: Vec<(String, Pose)> = ids
                .into_iter()
                .map(|id| (id, Pose::new(0.0, 0.0)))
                .collect();
            (load_images(&query_dir, &rows)?, Vec::new())
        }
        (None, false) => (Vec::new(), Vec::new()),
    };

    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dataset = Dataset::new(name, queries, query_poses, references, reference_poses)?;

    if !dataset.query_poses.is_empty() {
        let unreachable = dataset
            .query_poses
            .iter()
            .filter(|q| {
                dataset
                    .reference_poses
                    .iter()
                    .all(|r| q.distance(r) > options.radius_hint)
            })
            .count();
        if unreachable > 0 {
            log::warn!(
                "{}: {unreachable} queries have no reference within {} m",
                root.display(),
                options.radius_hint
            );
        }
    }
    Ok(dataset)
}

fn read_pose_manifest(path: &Path) -> Result<Vec<(String, Pose)>> {
    let parse_err = |line: u64, reason: String| VprError::ManifestParse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.len() != 3 || headers.get(0) != Some("id") {
        return Err(parse_err(
            1,
            format!("expected header `{}`", POSE_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let id = record[0].to_string();
        let coord = |k: usize| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad coordinate `{}`", &record[k])))
        };
        let pose = Pose::new(coord(1)?, coord(2)?);
        if !seen.insert(id.clone()) {
            return Err(VprError::InconsistentManifest {
                id,
                reason: format!("listed twice in {}", path.display()),
            });
        }
        rows.push((id, pose));
    }
    Ok(rows)
}

/// Equirectangular projection of `(lat, lon)` rows (stored in `x`, `y`) around
/// their centroid.
/// Mean latitude and longitude of `rows`, read as `(lat, lon)` poses.
fn geographic_origin(rows: &[(String, Pose)]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|(_, p)| p.x).sum::<f64>() / n,
        rows.iter().map(|(_, p)| p.y).sum::<f64>() / n,
    )
}

/// Equirectangular projection of a `(lat, lon)` pose around `origin`, in meters.
fn geographic_to_local(pose: Pose, origin: (f64, f64)) -> Pose {
    let (lat, lon) = (pose.x, pose.y);
    Pose::new(
        EARTH_RADIUS_M * (lon - origin.1).to_radians() * origin.0.to_radians().cos(),
        EARTH_RADIUS_M * (lat - origin.0).to_radians(),
    )
}

fn list_ppm_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem() {
                stems.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_images(dir: &Path, rows: &[(String, Pose)]) -> Result<Vec<ImageRecord>> {
    let on_disk: BTreeMap<String, PathBuf> = if dir.is_dir() {
        list_ppm_stems(dir)?
            .into_iter()
            .map(|s| {
                let p = dir.join(format!("{s}.ppm"));
                (s, p)
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    for (id, _) in rows {
        if !on_disk.contains_key(id) {
            return Err(VprError::InconsistentManifest {
                id: id.clone(),
                reason: format!("has a pose but no image in {}", dir.display()),
            });
        }
    }
    let listed: HashSet<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
    if let Some(orphan) = on_disk.keys().find(|s| !listed.contains(s.as_str())) {
        return Err(VprError::InconsistentManifest {
            id: orphan.clone(),
            reason: format!("has an image in {} but no pose", dir.display()),
        });
    }
    rows.par_iter()
        .map(|(id, pose)| {
            let image = read_ppm(&on_disk[id])?;
            Ok(ImageRecord::new(id.clone(), image, Some(*pose)))
        })
        .collect()
}

/// Writes the dataset in the directory layout read by [`load_dataset`].
/// Coordinates are written with shortest round-trip formatting.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    write_set(
        root,
        REFERENCE_DIR,
        REFERENCE_POSES,
        &dataset.references,
        Some(&dataset.reference_poses),
    )?;
    if !dataset.queries.is_empty() {
        let poses = (!dataset.query_poses.is_empty()).then_some(dataset.query_poses.as_slice());
        write_set(root, QUERY_DIR, QUERY_POSES, &dataset.queries, poses)?;
    }
    Ok(())
}

fn write_set(
    root: &Path,
    dir_name: &str,
    manifest_name: &str,
    records: &[ImageRecord],
    poses: Option<&[Pose]>,
) -> Result<()> {
    let dir = root.join(dir_name);
    std::fs::create_dir_all(&dir)?;
    records
        .par_iter()
        .try_for_each(|r| write_ppm(&dir.join(format!("{}.ppm", r.id)), &r.image))?;
    if let Some(poses) = poses {
        let mut writer = csv::Writer::from_path(root.join(manifest_name))
            .map_err(|e| VprError::Io(std::io::Error::other(e)))?;
        let to_io = |e: csv::Error| VprError::Io(std::io::Error::other(e));
        writer.write_record(POSE_HEADER).map_err(to_io)?;
        for (r, p) in records.iter().zip(poses) {
            writer
                .write_record([r.id.clone(), p.x.to_string(), p.y.to_string()])
                .map_err(to_io)?;
        }
        writer.flush()?;
    }
    Ok(())
}

/// Splits the queries into `(training, validation)` by a seeded shuffle.
/// Both halves keep the full reference set. The validation half receives
/// `round(fraction * |queries|)` queries.
pub fn split_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(VprError::InvalidFraction(fraction));
    }
    if dataset.query_poses.is_empty() && !dataset.queries.is_empty() {
        return Err(VprError::InvalidDataset(
            "validation split requires query poses".into(),
        ));
    }
    let n = dataset.queries.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = order.split_at(n_val);

    let part = |idx: &[usize], suffix: &str| {
        let queries = idx.iter().map(|&i| dataset.queries[i].clone()).collect();
        let poses = idx.iter().map(|&i| dataset.query_poses[i]).collect();
        Dataset::new(
            format!("{}-{suffix}", dataset.name),
            queries,
            poses,
            dataset.references.clone(),
            dataset.reference_poses.clone(),
        )
    };
    Ok((part(train_idx, "train")?, part(val_idx, "val")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, shade: f32) -> ImageRecord {
        ImageRecord::new(id, RgbImage::filled(16, 16, [shade; 3]), None)
    }

    fn small_dataset(n_queries: usize) -> Dataset {
        let refs = (0..3)
            .map(|i| record(&format!("r{i}"), 0.1 * i as f32))
            .collect();
        let ref_poses = (0..3).map(|i| Pose::new(i as f64 * 10.0, 0.0)).collect();
        let queries = (0..n_queries)
            .map(|i| record(&format!("q{i:03}"), 0.5))
            .collect();
        let query_poses = (0..n_queries).map(|i| Pose::new(i as f64, 1.0)).collect();
        Dataset::new("toy", queries, query_poses, refs, ref_poses).unwrap()
    }

    #[test]
    fn sorts_by_id_and_attaches_poses() {
        let refs = vec![record("b", 0.2), record("a", 0.1)];
        let poses = vec![Pose::new(2.0, 0.0), Pose::new(1.0, 0.0)];
        let ds = Dataset::new("x", vec![], vec![], refs, poses).unwrap();
        assert_eq!(ds.references()[0].id, "a");
        assert_eq!(ds.reference_poses()[0], Pose::new(1.0, 0.0));
        assert_eq!(ds.references()[1].pose, Some(Pose::new(2.0, 0.0)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let refs = vec![record("a", 0.2), record("a", 0.1)];
        let poses = vec![Pose::new(2.0, 0.0), Pose::new(1.0, 0.0)];
        assert!(matches!(
            Dataset::new("x", vec![], vec![], refs, poses),
            Err(VprError::InconsistentManifest { .. })
        ));
    }

    #[test]
    fn empty_references_rejected() {
        assert!(matches!(
            Dataset::new("x", vec![], vec![], vec![], vec![]),
            Err(VprError::EmptyReferences)
        ));
    }

    #[test]
    fn query_reads_are_counted() {
        let ds = small_dataset(4);
        assert_eq!(ds.query_reads(), 0);
        let _ = ds.references();
        let _ = ds.reference_poses();
        assert_eq!(ds.query_reads(), 0);
        let _ = ds.queries();
        assert_eq!(ds.query_reads(), 1);
        assert_eq!(ds.reference_only().query_reads(), 0);
    }

    #[test]
    fn split_fraction_zero_and_bounds() {
        let ds = small_dataset(10);
        let (train, val) = split_validation(&ds, 0.0, 3).unwrap();
        assert_eq!(val.query_count(), 0);
        assert_eq!(train.query_count(), 10);
        assert!(matches!(
            split_validation(&ds, 1.5, 3),
            Err(VprError::InvalidFraction(_))
        ));
        assert!(matches!(
            split_validation(&ds, -0.1, 3),
            Err(VprError::InvalidFraction(_))
        ));
    }

    #[test]
    fn split_hundred_queries() {
        let ds = small_dataset(100);
        let (train, val) = split_validation(&ds, 0.2, 7).unwrap();
        assert_eq!(val.query_count(), 20);
        assert_eq!(train.query_count(), 80);
        let train_ids: HashSet<_> = train.queries().iter().map(|r| r.id.clone()).collect();
        let val_ids: HashSet<_> = val.queries().iter().map(|r| r.id.clone()).collect();
        assert!(train_ids.is_disjoint(&val_ids));
        assert_eq!(train_ids.len() + val_ids.len(), 100);
        assert_eq!(train.references(), ds.references());
        assert_eq!(val.references(), ds.references());

        let (train2, val2) = split_validation(&ds, 0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn geographic_projection_is_metric() {
        // 0.001 degrees of latitude is about 111.2 m everywhere
        let rows = vec![
            ("a".to_string(), Pose::new(52.0, 4.0)),
            ("b".to_string(), Pose::new(52.001, 4.0)),
        ];
        let origin = geographic_origin(&rows);
        let local: Vec<Pose> = rows
            .iter()
            .map(|(_, p)| geographic_to_local(*p, origin))
            .collect();
        let d = local[0].distance(&local[1]);
        assert!((d - 111.195).abs() < 0.01, "{d}");
        assert!((local[0].y + local[1].y).abs() < 1e-6);
    }
}
