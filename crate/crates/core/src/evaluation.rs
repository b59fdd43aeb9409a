//! Ground truth by metric radius, Recall@N, report rendering, cross-dataset
//! matrices and a 2-D PCA projection of descriptor sets.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::{Dataset, Pose};
use crate::embedding::{EmbeddingModel, Fingerprint};
use crate::error::{Result, VprError};
use crate::retrieval::{build_map, retrieve_dataset, DescriptorMap, RetrievalResult};

/// A reference within this many meters of the query counts as a correct match.
pub const DEFAULT_RADIUS_M: f64 = 25.0;
pub const DEFAULT_NS: [usize; 3] = [1, 5, 10];

const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITERATIONS: usize = 1000;

/// Correct reference indices for every query.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    query_ids: Vec<String>,
    matches: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new(query_ids: Vec<String>, matches: Vec<Vec<usize>>) -> Self {
        let index = query_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            query_ids,
            matches,
            index,
        }
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn matches(&self, query: usize) -> &[usize] {
        &self.matches[query]
    }

    pub fn matches_for(&self, query_id: &str) -> Option<&[usize]> {
        self.index
            .get(query_id)
            .map(|&i| self.matches[i].as_slice())
    }

    /// Queries without any reference inside the radius; they are excluded
    /// from recall denominators.
    pub fn unmatched(&self) -> usize {
        self.matches.iter().filter(|m| m.is_empty()).count()
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Query `q` matches reference `i` iff their poses are at most `radius` apart.
pub fn ground_truth(
    query_ids: &[String],
    query_poses: &[Pose],
    reference_poses: &[Pose],
    radius: f64,
) -> GroundTruth {
    let matches = query_poses
        .iter()
        .map(|q| {
            reference_poses
                .iter()
                .enumerate()
                .filter(|(_, r)| q.distance(r) <= radius)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    GroundTruth::new(query_ids.to_vec(), matches)
}

pub fn dataset_ground_truth(dataset: &Dataset, radius: f64) -> Result<GroundTruth> {
    if !dataset.has_query_poses() {
        return Err(VprError::InvalidDataset(format!(
            "{}: queries have no poses",
            dataset.name()
        )));
    }
    let ids: Vec<String> = dataset.queries().iter().map(|q| q.id.clone()).collect();
    Ok(ground_truth(
        &ids,
        dataset.query_poses(),
        dataset.reference_poses(),
        radius,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub dataset: String,
    pub model_fingerprint: Fingerprint,
    pub ns: Vec<usize>,
    pub recalls: Vec<f64>,
    pub total: usize,
    pub evaluated: usize,
}

impl RecallReport {
    pub fn labeled(mut self, dataset: impl Into<String>, fingerprint: Fingerprint) -> Self {
        self.dataset = dataset.into();
        self.model_fingerprint = fingerprint;
        self
    }

    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.ns
            .iter()
            .position(|&m| m == n)
            .map(|i| self.recalls[i])
    }

    /// Recall@1, the headline number.
    pub fn r1(&self) -> f64 {
        self.recall_at(1).unwrap_or(f64::NAN)
    }

    /// Rows `model_fingerprint,dataset,N,recall,evaluated,total`.
    pub fn csv_rows(&self) -> Vec<String> {
        self.ns
            .iter()
            .zip(&self.recalls)
            .map(|(n, r)| {
                format!(
                    "{},{},{n},{r:.6},{},{}",
                    self.model_fingerprint, self.dataset, self.evaluated, self.total
                )
            })
            .collect()
    }
}

pub const REPORT_CSV_HEADER: &str = "model_fingerprint,dataset,N,recall,evaluated,total";

/// Percentage with one decimal, as in published recall tables.
pub fn format_percent(recall: f64) -> String {
    format!("{:.1}", recall * 100.0)
}

/// Fraction of evaluated queries whose top-N holds at least one correct
/// reference, for every N in `ns`.
pub fn recall_at_n(
    results: &[RetrievalResult],
    gt: &GroundTruth,
    ns: &[usize],
) -> Result<RecallReport> {
    let mut hits = vec![0usize; ns.len()];
    let mut evaluated = 0;
    for res in results {
        let correct = gt
            .matches_for(&res.query_id)
            .ok_or_else(|| VprError::MissingGroundTruth(res.query_id.clone()))?;
        if correct.is_empty() {
            continue;
        }
        evaluated += 1;
        let first_hit = res.ranked.iter().position(|(i, _)| correct.contains(i));
        if let Some(rank) = first_hit {
            for (h, &n) in hits.iter_mut().zip(ns) {
                if rank < n {
                    *h += 1;
                }
            }
        }
    }
    let recalls = hits
        .iter()
        .map(|&h| {
            if evaluated == 0 {
                0.0
            } else {
                h as f64 / evaluated as f64
            }
        })
        .collect();
    Ok(RecallReport {
        dataset: String::new(),
        model_fingerprint: Fingerprint::default(),
        ns: ns.to_vec(),
        recalls,
        total: results.len(),
        evaluated,
    })
}

/// Builds the map of `dataset` with `model`, retrieves every query and scores it.
pub fn evaluate_model(
    model: &EmbeddingModel,
    dataset: &Dataset,
    radius: f64,
    ns: &[usize],
) -> Result<RecallReport> {
    let map = build_map(dataset, model)?;
    evaluate_with_map(&map, model, dataset, radius, ns)
}

pub fn evaluate_with_map(
    map: &DescriptorMap,
    model: &EmbeddingModel,
    dataset: &Dataset,
    radius: f64,
    ns: &[usize],
) -> Result<RecallReport> {
    let k = ns.iter().copied().max().unwrap_or(1).clamp(1, map.len());
    let results = retrieve_dataset(map, model, dataset, k)?;
    let gt = dataset_ground_truth(dataset, radius)?;
    Ok(recall_at_n(&results, &gt, ns)?.labeled(dataset.name(), model.fingerprint()))
}

/// Plain-text table with right-aligned columns after the first.
#[derive(Clone, Debug, Default)]
pub struct TextTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut widths = vec![0usize; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |row: &Vec<String>| {
            let mut s = String::new();
            for (c, w) in widths.iter().enumerate() {
                let cell = row.get(c).map(String::as_str).unwrap_or("");
                if c == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, " | {cell:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        let rule: usize = widths.iter().sum::<usize>() + 3 * (cols.saturating_sub(1));
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Table with one row per labeled report set and `R@N` columns per dataset.
pub fn recall_table(rows: &[(String, Vec<RecallReport>)]) -> TextTable {
    let mut header = vec![String::new()];
    if let Some((_, reports)) = rows.first() {
        for rep in reports {
            for n in &rep.ns {
                header.push(format!("{} R@{n}", rep.dataset));
            }
        }
    }
    let mut table = TextTable::new(header);
    for (label, reports) in rows {
        let mut row = vec![label.clone()];
        for rep in reports {
            row.extend(rep.recalls.iter().map(|&r| format_percent(r)));
        }
        table.push(row);
    }
    table
}

/// Cell failure kept in a matrix so that one bad pair does not abort the run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellError {
    pub kind: String,
    pub message: String,
}

impl From<VprError> for CellError {
    fn from(e: VprError) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

/// Models as rows, datasets as columns.
#[derive(Clone, Debug)]
pub struct GeneralizationMatrix {
    pub model_labels: Vec<String>,
    pub dataset_names: Vec<String>,
    pub cells: Vec<Vec<std::result::Result<RecallReport, CellError>>>,
}

impl GeneralizationMatrix {
    pub fn recall(&self, row: usize, col: usize, n: usize) -> Option<f64> {
        self.cells[row][col].as_ref().ok()?.recall_at(n)
    }

    /// Row index of the best model for `col` at cutoff `n`; ties go to the lower row.
    pub fn column_argmax(&self, col: usize, n: usize) -> Option<usize> {
        (0..self.model_labels.len())
            .filter_map(|r| self.recall(r, col, n).map(|v| (r, v)))
            .fold(None, |best: Option<(usize, f64)>, (r, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((r, v)),
            })
            .map(|(r, _)| r)
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (label, row) in self.model_labels.iter().zip(&self.cells) {
            for (name, cell) in self.dataset_names.iter().zip(row) {
                match cell {
                    Ok(rep) => out.extend(rep.csv_rows()),
                    Err(e) => out.push(format!("{label},{name},error,{},0,0", e.kind)),
                }
            }
        }
        out
    }

    /// Text table with `R@n` per dataset.
    pub fn table(&self, n: usize) -> TextTable {
        let mut header = vec![String::new()];
        header.extend(self.dataset_names.iter().map(|d| format!("{d} R@{n}")));
        let mut table = TextTable::new(header);
        for (label, row) in self.model_labels.iter().zip(&self.cells) {
            let mut cells = vec![label.clone()];
            for cell in row {
                cells.push(match cell {
                    Ok(rep) => rep
                        .recall_at(n)
                        .map(format_percent)
                        .unwrap_or_else(|| "-".into()),
                    Err(e) => e.kind.clone(),
                });
            }
            table.push(cells);
        }
        table
    }
}

/// Evaluates every model on every dataset. Failures are recorded per cell.
pub fn generalization_matrix(
    models: &[(String, &EmbeddingModel)],
    datasets: &[&Dataset],
    radius: f64,
    ns: &[usize],
) -> GeneralizationMatrix {
    let cells = models
        .iter()
        .map(|(_, model)| {
            datasets
                .iter()
                .map(|ds| evaluate_model(model, ds, radius, ns).map_err(CellError::from))
                .collect()
        })
        .collect();
    GeneralizationMatrix {
        model_labels: models.iter().map(|(l, _)| l.clone()).collect(),
        dataset_names: datasets.iter().map(|d| d.name().to_string()).collect(),
        cells,
    }
}

/// Result of [`project_2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each of the two principal directions.
    pub variances: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Projects mean-centered rows onto their top two principal directions,
/// found by power iteration with deflation on the covariance matrix. Each
/// direction is signed so that its largest-magnitude loading is positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    if n < 3 {
        return Err(VprError::DegenerateSpectrum(format!(
            "need at least 3 rows, got {n}"
        )));
    }
    let d = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(VprError::ShapeError {
            expected: d,
            actual: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for (c, v) in row.iter_mut().zip(r) {
                *c += r[i] * v;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);

    let mut components: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut variances = [0.0; 2];
    for k in 0..2 {
        let (v, lambda) = power_iteration(&cov, d);
        if !(lambda > floor) || trace <= 0.0 {
            return Err(VprError::DegenerateSpectrum(format!(
                "principal direction {} has variance {lambda:.3e}",
                k + 1
            )));
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        variances[k] = lambda;
        components[k] = v;
    }

    let coords = centered
        .iter()
        .map(|r| [0, 1].map(|k| r.iter().zip(&components[k]).map(|(a, b)| a * b).sum()))
        .collect();
    Ok(Projection {
        coords,
        variances,
        components,
    })
}

fn power_iteration(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    let matvec = |v: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| {
                cov[i * d..(i + 1) * d]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    };
    let normalize = |v: &mut Vec<f64>| {
        let n = crate::embedding::l2_norm(v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + 0.5 * ((i as f64) * 0.7).sin())
        .collect();
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut w = matvec(&v);
        if normalize(&mut w) == 0.0 {
            return (v, 0.0);
        }
        let diff: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        v = w;
        if diff < PCA_TOLERANCE {
            break;
        }
    }
    let (imax, _) = v.iter().enumerate().fold((0, 0.0f64), |(bi, bv), (i, x)| {
        if x.abs() > bv {
            (i, x.abs())
        } else {
            (bi, bv)
        }
    });
    if v[imax] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let lambda: f64 = matvec(&v).iter().zip(&v).map(|(a, b)| a * b).sum();
    (v, lambda)
}

pub fn map_rows(map: &DescriptorMap) -> Vec<Vec<f64>> {
    map.rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// One labeled 2-D point per descriptor of every map.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub source: String,
    pub x: f64,
    pub y: f64,
}

/// Concatenates the maps' descriptors and projects them jointly.
pub fn emit_projection(maps: &[(String, &DescriptorMap)]) -> Result<Vec<ProjectedPoint>> {
    let dim = maps
        .first()
        .map(|(_, m)| m.dim())
        .ok_or(VprError::EmptyReferences)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (label, map) in maps {
        if map.dim() != dim {
            return Err(VprError::ShapeError {
                expected: dim,
                actual: map.dim(),
            });
        }
        rows.extend(map_rows(map));
        labels.extend(std::iter::repeat_n(label.clone(), map.len()));
    }
    let proj = project_2d(&rows)?;
    Ok(labels
        .into_iter()
        .zip(proj.coords)
        .map(|(source, [x, y])| ProjectedPoint { source, x, y })
        .collect())
}
