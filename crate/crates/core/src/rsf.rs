//! Reference-set finetuning.
//!
//! The finetuning set reuses the test-time references unchanged, and builds
//! its queries as `M` augmented copies of every reference, each inheriting
//! the pose of its source. Triplets pair every query with its source
//! reference as positive and, given poses, with the feature-nearest reference
//! lying beyond `negative_radius` as negative. Without poses the negative is
//! drawn at random among the other references. The head is then updated by
//! plain gradient descent on the triplet hinge loss, and the epoch with the
//! best validation Recall@1 is kept.
//!
//! The same engine pretrains a head on a labeled dataset, where queries are
//! real images with poses and positives are the feature-nearest references
//! within `positive_radius`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augmentation::{apply, sample_op, AugmentationOp, AugmentationSpec};
use crate::dataset::{Dataset, ImageRecord, Pose};
use crate::embedding::{extract_raw, EmbeddingModel, ParamGradients, RawFeatures, NORM_EPS};
use crate::error::{Result, VprError};
use crate::evaluation::{evaluate_model, DEFAULT_RADIUS_M};
use crate::seed::{rng_for, stream};

/// Triplets per gradient-accumulation chunk. Chunks are summed in a fixed
/// order, so results do not depend on the number of worker threads.
const ACCUMULATION_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(|q - p| - |q - n| + margin, 0)` and its gradients. On the inactive
/// side of the hinge, including the kink, all gradients are zero.
pub fn triplet_loss(
    query: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<TripletLoss> {
    let dim = query.len();
    for other in [positive.len(), negative.len()] {
        if other != dim {
            return Err(VprError::ShapeError {
                expected: dim,
                actual: other,
            });
        }
    }
    if !(margin > 0.0) {
        return Err(VprError::InvalidConfig(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let qp: Vec<f64> = query.iter().zip(positive).map(|(a, b)| a - b).collect();
    let qn: Vec<f64> = query.iter().zip(negative).map(|(a, b)| a - b).collect();
    let d_pos = crate::embedding::l2_norm(&qp);
    let d_neg = crate::embedding::l2_norm(&qn);
    let loss = (d_pos - d_neg + margin).max(0.0);
    if loss <= 0.0 {
        return Ok(TripletLoss {
            loss: 0.0,
            grad_query: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        });
    }
    let up: Vec<f64> = qp.iter().map(|v| v / (d_pos + NORM_EPS)).collect();
    let un: Vec<f64> = qn.iter().map(|v| v / (d_neg + NORM_EPS)).collect();
    Ok(TripletLoss {
        loss,
        grad_query: up.iter().zip(&un).map(|(a, b)| a - b).collect(),
        grad_positive: up.iter().map(|v| -v).collect(),
        grad_negative: un,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    /// Hard negatives selected with reference poses.
    Pose,
    /// Random negatives; poses unused.
    Poseless,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Augmented queries per reference per epoch.
    pub multiplicity: usize,
    pub positive_radius: f64,
    pub negative_radius: f64,
    pub negatives_per_query: usize,
    pub early_stop_patience: usize,
    pub poseless: bool,
    /// Ground-truth radius for validation recall.
    pub eval_radius: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            multiplicity: 2,
            positive_radius: 10.0,
            negative_radius: 25.0,
            negatives_per_query: 1,
            early_stop_patience: 3,
            poseless: false,
            eval_radius: DEFAULT_RADIUS_M,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VprError::InvalidConfig(m));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.multiplicity == 0 {
            return Err(VprError::InvalidMultiplicity(0));
        }
        if !(self.positive_radius >= 0.0) || !(self.negative_radius >= self.positive_radius) {
            return bad(format!(
                "need 0 <= positive_radius ({}) <= negative_radius ({})",
                self.positive_radius, self.negative_radius
            ));
        }
        if self.negatives_per_query == 0 {
            return bad("negatives per query must be positive".into());
        }
        if !(self.eval_radius > 0.0) {
            return bad("evaluation radius must be positive".into());
        }
        Ok(())
    }

    pub fn mining_mode(&self) -> MiningMode {
        if self.poseless {
            MiningMode::Poseless
        } else {
            MiningMode::Pose
        }
    }
}

/// The finetuning set: the test-time references with their poses, plus the
/// recipe for `multiplicity` augmented queries per reference per epoch.
#[derive(Clone, Debug)]
pub struct FinetuneDataset {
    references: Vec<ImageRecord>,
    reference_poses: Vec<Pose>,
    multiplicity: usize,
    spec: AugmentationSpec,
    seed: u64,
}

/// A synthetic query of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedQuery {
    /// Index of the reference it was made from.
    pub source: usize,
    pub op: AugmentationOp,
    /// Carries the source's pose.
    pub record: ImageRecord,
}

impl FinetuneDataset {
    pub fn references(&self) -> &[ImageRecord] {
        &self.references
    }

    pub fn reference_poses(&self) -> &[Pose] {
        &self.reference_poses
    }

    pub fn multiplicity(&self) -> usize {
        self.multiplicity
    }

    pub fn spec(&self) -> &AugmentationSpec {
        &self.spec
    }

    /// Queries of `epoch`: copy `j` of reference `i` sits at index
    /// `i * multiplicity + j` and draws from its own RNG stream, so the
    /// realization is independent of evaluation order.
    pub fn realize(&self, epoch: usize) -> Result<Vec<RealizedQuery>> {
        let m = self.multiplicity;
        (0..self.references.len() * m)
            .into_par_iter()
            .map(|q| {
                let source = q / m;
                let mut rng = rng_for(self.seed, &[stream::AUGMENT, epoch as u64, q as u64]);
                let op = sample_op(&self.spec, &mut rng)?;
                let mut record = apply(&self.references[source], &op, &mut rng);
                record.id = format!("{}~{}", record.id, q % m);
                record.pose = Some(self.reference_poses[source]);
                Ok(RealizedQuery { source, op, record })
            })
            .collect()
    }
}

/// Builds the finetuning set from the reference side of `map_dataset`.
/// The dataset's queries are never read.
pub fn build_finetune_stream(
    map_dataset: &Dataset,
    multiplicity: usize,
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<FinetuneDataset> {
    if multiplicity < 1 {
        return Err(VprError::InvalidMultiplicity(multiplicity));
    }
    if map_dataset.references().is_empty() {
        return Err(VprError::EmptyReferences);
    }
    if spec.kinds().is_empty() {
        return Err(VprError::NothingToSample);
    }
    Ok(FinetuneDataset {
        references: map_dataset.references().to_vec(),
        reference_poses: map_dataset.reference_poses().to_vec(),
        multiplicity,
        spec: spec.clone(),
        seed,
    })
}

/// Indices into the epoch's query list and the reference list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Queries that yielded no triplet (no positive or no eligible negative).
    pub skipped: usize,
}

/// What the miner knows about one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryInfo {
    /// Reference the query was synthesized from, if any.
    pub source: Option<usize>,
    pub pose: Option<Pose>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k` candidates closest to `query` in feature space, ties to the lower index.
fn k_nearest(
    query: &[f64],
    refs: &[Vec<f64>],
    candidates: impl Iterator<Item = usize>,
    k: usize,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = candidates
        .map(|i| (i, squared_distance(query, &refs[i])))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Pose-aware mining. The positive is the query's source reference when it
/// has one, otherwise the feature-nearest reference within
/// `positive_radius`. Negatives are the `negatives_per_query` feature-nearest
/// references farther than `negative_radius` from the query.
pub fn mine_hard_negatives(
    query_desc: &[Vec<f64>],
    queries: &[QueryInfo],
    ref_desc: &[Vec<f64>],
    ref_poses: &[Pose],
    config: &TrainConfig,
) -> Result<MiningOutcome> {
    let per_query: Vec<Vec<Triplet>> = query_desc
        .par_iter()
        .zip(queries)
        .enumerate()
        .map(|(qi, (desc, info))| {
            let pose = info.pose.ok_or_else(|| {
                VprError::InvalidConfig("pose-mode mining needs query poses".into())
            })?;
            let positive = match info.source {
                Some(s) => Some(s),
                None => k_nearest(
                    desc,
                    ref_desc,
                    (0..ref_desc.len())
                        .filter(|&i| pose.distance(&ref_poses[i]) <= config.positive_radius),
                    1,
                )
                .first()
                .copied(),
            };
            let Some(positive) = positive else {
                return Ok(Vec::new());
            };
            let negatives = k_nearest(
                desc,
                ref_desc,
                (0..ref_desc.len())
                    .filter(|&i| pose.distance(&ref_poses[i]) > config.negative_radius),
                config.negatives_per_query,
            );
            Ok(negatives
                .into_iter()
                .map(|negative| Triplet {
                    query: qi,
                    positive,
                    negative,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(collect_outcome(per_query))
}

/// Random-negative mining for references without poses: the positive is the
/// source reference and negatives are drawn uniformly from the others.
pub fn mine_random_negatives(
    queries: &[QueryInfo],
    reference_count: usize,
    config: &TrainConfig,
    epoch: usize,
) -> Result<MiningOutcome> {
    let per_query = queries
        .iter()
        .enumerate()
        .map(|(qi, info)| {
            let source = info.source.ok_or_else(|| {
                VprError::InvalidConfig("random-negative mining needs synthesized queries".into())
            })?;
            if reference_count < 2 {
                return Ok(Vec::new());
            }
            let mut rng = rng_for(
                config.seed,
                &[stream::RANDOM_NEGATIVES, epoch as u64, qi as u64],
            );
            let k = config.negatives_per_query.min(reference_count - 1);
            Ok(rand::seq::index::sample(&mut rng, reference_count - 1, k)
                .into_iter()
                .map(|r| Triplet {
                    query: qi,
                    positive: source,
                    negative: if r >= source { r + 1 } else { r },
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_outcome(per_query))
}

fn collect_outcome(per_query: Vec<Vec<Triplet>>) -> MiningOutcome {
    let skipped = per_query.iter().filter(|t| t.is_empty()).count();
    MiningOutcome {
        triplets: per_query.into_iter().flatten().collect(),
        skipped,
    }
}

/// Realizes `epoch` of the finetuning set and mines its triplets under `model`.
pub fn mine_triplets(
    model: &EmbeddingModel,
    finetune: &FinetuneDataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Vec<RealizedQuery>, MiningOutcome)> {
    let queries = finetune.realize(epoch)?;
    let ref_raw = raw_features(finetune.references());
    let query_raw: Vec<RawFeatures> = queries
        .par_iter()
        .map(|q| extract_raw(&q.record.image))
        .collect();
    let info: Vec<QueryInfo> = queries
        .iter()
        .map(|q| QueryInfo {
            source: Some(q.source),
            pose: q.record.pose,
        })
        .collect();
    let outcome = mine_epoch(
        model,
        &query_raw,
        &info,
        &ref_raw,
        finetune.reference_poses(),
        config,
        epoch,
    )?;
    Ok((queries, outcome))
}

fn mine_epoch(
    model: &EmbeddingModel,
    query_raw: &[RawFeatures],
    info: &[QueryInfo],
    ref_raw: &[RawFeatures],
    ref_poses: &[Pose],
    config: &TrainConfig,
    epoch: usize,
) -> Result<MiningOutcome> {
    match config.mining_mode() {
        MiningMode::Poseless => mine_random_negatives(info, ref_raw.len(), config, epoch),
        MiningMode::Pose => {
            let describe = |raws: &[RawFeatures]| -> Result<Vec<Vec<f64>>> {
                raws.par_iter().map(|r| Ok(model.forward(r)?.0)).collect()
            };
            mine_hard_negatives(
                &describe(query_raw)?,
                info,
                &describe(ref_raw)?,
                ref_poses,
                config,
            )
        }
    }
}

fn raw_features(records: &[ImageRecord]) -> Vec<RawFeatures> {
    records.par_iter().map(|r| extract_raw(&r.image)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub triplets: usize,
    pub skipped_queries: usize,
    /// Fraction of triplets with non-zero loss.
    pub active_fraction: f64,
    pub validation_r1: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub mode: MiningMode,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
}

impl TrainLog {
    fn new(mode: MiningMode) -> Self {
        Self {
            mode,
            steps: Vec::new(),
            epochs: Vec::new(),
            selected_epoch: None,
        }
    }
}

/// Source of training queries.
#[derive(Clone, Copy, Debug)]
pub enum TrainingData<'a> {
    /// Augmented references, regenerated every epoch.
    Finetune(&'a FinetuneDataset),
    /// A dataset with real, posed queries.
    Labeled(&'a Dataset),
}

/// Gradient of the summed triplet loss over `triplets`, and the summed loss.
fn accumulate_gradients(
    model: &EmbeddingModel,
    triplets: &[Triplet],
    query_raw: &[RawFeatures],
    ref_raw: &[RawFeatures],
    margin: f64,
) -> Result<(ParamGradients, f64, usize)> {
    let partials: Vec<(ParamGradients, f64, usize)> = triplets
        .par_chunks(ACCUMULATION_CHUNK)
        .map(|chunk| {
            let mut grads = ParamGradients::zeros_like(model);
            let mut loss_sum = 0.0;
            let mut active = 0;
            for t in chunk {
                let q = model.forward_cached(query_raw[t.query].as_slice())?;
                let p = model.forward_cached(ref_raw[t.positive].as_slice())?;
                let n = model.forward_cached(ref_raw[t.negative].as_slice())?;
                let tl = triplet_loss(q.output(), p.output(), n.output(), margin)?;
                loss_sum += tl.loss;
                if tl.loss > 0.0 {
                    active += 1;
                    model.backward_into(&q, &tl.grad_query, &mut grads)?;
                    model.backward_into(&p, &tl.grad_positive, &mut grads)?;
                    model.backward_into(&n, &tl.grad_negative, &mut grads)?;
                }
            }
            Ok((grads, loss_sum, active))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let (mut total, mut loss, mut active) = iter
        .next()
        .unwrap_or_else(|| (ParamGradients::zeros_like(model), 0.0, 0));
    for (g, l, a) in iter {
        total.add_assign(&g);
        loss += l;
        active += a;
    }
    Ok((total, loss, active))
}

/// Minimizes the triplet loss with plain gradient descent, re-mining every
/// epoch under the current parameters. After each epoch, Recall@1 on
/// `validation` is measured; the parameters of the best epoch are returned
/// (earliest on ties), and training stops after `early_stop_patience` epochs
/// without improvement. Without a validation set the last epoch is returned.
pub fn train(
    model: &EmbeddingModel,
    data: TrainingData<'_>,
    config: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<(EmbeddingModel, TrainLog)> {
    config.validate()?;
    let mut log = TrainLog::new(config.mining_mode());
    if config.epochs == 0 {
        return Ok((model.clone(), log));
    }

    let (ref_records, ref_poses): (&[ImageRecord], &[Pose]) = match data {
        TrainingData::Finetune(ft) => (ft.references(), ft.reference_poses()),
        TrainingData::Labeled(ds) => {
            if config.poseless {
                return Err(VprError::InvalidConfig(
                    "random-negative mining applies to finetuning streams only".into(),
                ));
            }
            if !ds.has_query_poses() || ds.query_count() == 0 {
                return Err(VprError::InvalidDataset(format!(
                    "{}: training needs posed queries",
                    ds.name()
                )));
            }
            (ds.references(), ds.reference_poses())
        }
    };
    let ref_raw = raw_features(ref_records);

    // labeled queries never change, so their features are computed once
    let labeled: Option<(Vec<RawFeatures>, Vec<QueryInfo>)> = match data {
        TrainingData::Labeled(ds) => Some((
            raw_features(ds.queries()),
            ds.query_poses()
                .iter()
                .map(|&p| QueryInfo {
                    source: None,
                    pose: Some(p),
                })
                .collect(),
        )),
        TrainingData::Finetune(_) => None,
    };

    let mut current = model.clone();
    let mut best: Option<(f64, EmbeddingModel, usize)> = None;
    let mut since_improvement = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let epoch_queries: Option<(Vec<RawFeatures>, Vec<QueryInfo>)> = match data {
            TrainingData::Finetune(ft) => {
                let realized = ft.realize(epoch)?;
                let raw = realized
                    .par_iter()
                    .map(|q| extract_raw(&q.record.image))
                    .collect();
                let info = realized
                    .iter()
                    .map(|q| QueryInfo {
                        source: Some(q.source),
                        pose: q.record.pose,
                    })
                    .collect();
                Some((raw, info))
            }
            TrainingData::Labeled(_) => None,
        };
        let (query_raw, info) = match (&epoch_queries, &labeled) {
            (Some((r, i)), _) | (None, Some((r, i))) => (r.as_slice(), i.as_slice()),
            (None, None) => unreachable!(),
        };

        let mut mined = mine_epoch(
            &current, query_raw, info, &ref_raw, ref_poses, config, epoch,
        )?;
        if mined.skipped > 0 {
            log::debug!("epoch {epoch}: {} queries without a triplet", mined.skipped);
        }
        mined.triplets.shuffle(&mut rng_for(
            config.seed,
            &[stream::BATCH_ORDER, epoch as u64],
        ));

        let mut loss_sum = 0.0;
        let mut active_total = 0;
        for (step, batch) in mined.triplets.chunks(config.batch_size).enumerate() {
            let (mut grads, batch_loss, active) =
                accumulate_gradients(&current, batch, query_raw, &ref_raw, config.margin)?;
            let mean_loss = batch_loss / batch.len() as f64;
            if !mean_loss.is_finite() || !grads.max_abs().is_finite() {
                return Err(VprError::NumericalDivergence { epoch, step });
            }
            grads.scale(1.0 / batch.len() as f64);
            current.apply_gradients(&grads, config.learning_rate);
            if !current.is_finite() {
                return Err(VprError::NumericalDivergence { epoch, step });
            }
            loss_sum += batch_loss;
            active_total += active;
            log.steps.push(StepRecord {
                epoch,
                step,
                loss: mean_loss,
            });
        }

        let n_triplets = mined.triplets.len();
        let validation_r1 = match validation {
            Some(val) => Some(evaluate_model(&current, val, config.eval_radius, &[1])?.r1()),
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: if n_triplets == 0 {
                0.0
            } else {
                loss_sum / n_triplets as f64
            },
            triplets: n_triplets,
            skipped_queries: mined.skipped,
            active_fraction: if n_triplets == 0 {
                0.0
            } else {
                active_total as f64 / n_triplets as f64
            },
            validation_r1,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {:.5}, {n_triplets} triplets, val R@1 {:?}",
            log.epochs[epoch].mean_loss,
            validation_r1
        );

        let score = validation_r1.unwrap_or(epoch as f64);
        match &best {
            Some((b, _, _)) if score <= *b => {
                since_improvement += 1;
                if validation.is_some() && since_improvement >= config.early_stop_patience.max(1) {
                    break;
                }
            }
            _ => {
                best = Some((score, current.clone(), epoch));
                since_improvement = 0;
            }
        }
    }

    let (_, chosen, epoch) = best.expect("at least one epoch ran");
    log.selected_epoch = Some(epoch);
    Ok((chosen, log))
}

/// Pretraining on a labeled dataset.
pub fn pretrain(
    model: &EmbeddingModel,
    labeled: &Dataset,
    config: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<(EmbeddingModel, TrainLog)> {
    train(model, TrainingData::Labeled(labeled), config, validation)
}

/// Reference-set finetuning: builds the finetuning set from the references
/// of `test_dataset` (its queries are never read) and trains on it.
pub fn rsf_finetune(
    model: &EmbeddingModel,
    test_dataset: &Dataset,
    config: &TrainConfig,
    spec: &AugmentationSpec,
    validation: Option<&Dataset>,
) -> Result<(EmbeddingModel, TrainLog)> {
    let stream = build_finetune_stream(test_dataset, config.multiplicity, spec, config.seed)?;
    train(model, TrainingData::Finetune(&stream), config, validation)
}

/// Mean triplet loss of a fixed triplet set under `model`.
pub fn mean_triplet_loss(
    model: &EmbeddingModel,
    triplets: &[Triplet],
    query_raw: &[RawFeatures],
    ref_raw: &[RawFeatures],
    margin: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let (_, loss, _) = accumulate_gradients(model, triplets, query_raw, ref_raw, margin)?;
    Ok(loss / triplets.len() as f64)
}

/// One gradient step on a fixed triplet set; exposed for descent checks.
pub fn descent_step(
    model: &mut EmbeddingModel,
    triplets: &[Triplet],
    query_raw: &[RawFeatures],
    ref_raw: &[RawFeatures],
    margin: f64,
    learning_rate: f64,
) -> Result<f64> {
    let (mut grads, loss, _) = accumulate_gradients(model, triplets, query_raw, ref_raw, margin)?;
    let n = triplets.len().max(1) as f64;
    grads.scale(1.0 / n);
    model.apply_gradients(&grads, learning_rate);
    Ok(loss / n)
}

/// Random reference index different from `source`; used by tests and tools
/// that need a single poseless draw.
pub fn random_other(rng: &mut impl Rng, reference_count: usize, source: usize) -> usize {
    let r = rng.random_range(0..reference_count - 1);
    if r >= source {
        r + 1
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{AugmentKind, AugmentRanges, AugmentSelection};
    use crate::image::RgbImage;

    #[test]
    fn hinge_boundary_is_zero() {
        let q = [0.0, 0.0];
        let n = [0.5, 0.0];
        let out = triplet_loss(&q, &q, &n, 0.5).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_query.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn equal_positive_and_negative_cost_the_margin() {
        let out = triplet_loss(&[0.3, -0.2], &[1.0, 0.5], &[1.0, 0.5], 0.1).unwrap();
        assert_eq!(out.loss, 0.1);
    }

    #[test]
    fn one_dimensional_hand_case() {
        let out = triplet_loss(&[0.0], &[2.0], &[1.0], 0.5).unwrap();
        assert_eq!(out.loss, 1.5);
        assert!(out.grad_query[0].abs() < 1e-12);
        assert!((out.grad_positive[0] - 1.0).abs() < 1e-9);
        assert!((out.grad_negative[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_input_errors() {
        assert!(matches!(
            triplet_loss(&[0.0, 1.0], &[0.0], &[1.0, 0.0], 0.1),
            Err(VprError::ShapeError { .. })
        ));
        assert!(triplet_loss(&[0.0], &[0.0], &[1.0], 0.0).is_err());
    }

    fn line_references(xs: &[f64]) -> Dataset {
        let refs = xs
            .iter()
            .enumerate()
            .map(|(i, _)| {
                ImageRecord::new(
                    format!("r{i}"),
                    RgbImage::from_fn(16, 16, |x, y| {
                        [((x + i) % 5) as f32 / 4.0, (y % 3) as f32 / 2.0, 0.5]
                    }),
                    None,
                )
            })
            .collect();
        let poses = xs.iter().map(|&x| Pose::new(x, 0.0)).collect();
        Dataset::new("line", vec![], vec![], refs, poses).unwrap()
    }

    #[test]
    fn hard_negative_from_candidates_beyond_radius() {
        // references at x = 0, 10, 40, 100; query from x = 0
        let refs = vec![
            vec![0.0, 0.0],
            vec![0.05, 0.0],
            vec![0.9, 0.0],
            vec![0.4, 0.0],
        ];
        let poses: Vec<Pose> = [0.0, 10.0, 40.0, 100.0]
            .iter()
            .map(|&x| Pose::new(x, 0.0))
            .collect();
        let info = [QueryInfo {
            source: Some(0),
            pose: Some(Pose::new(0.0, 0.0)),
        }];
        let out = mine_hard_negatives(
            &[vec![0.0, 0.0]],
            &info,
            &refs,
            &poses,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(
            out.triplets,
            vec![Triplet {
                query: 0,
                positive: 0,
                negative: 3
            }]
        );
    }

    #[test]
    fn singleton_candidate_is_always_chosen_and_empty_set_skips() {
        let refs = vec![vec![0.0], vec![0.01], vec![5.0]];
        let poses: Vec<Pose> = [0.0, 5.0, 40.0]
            .iter()
            .map(|&x| Pose::new(x, 0.0))
            .collect();
        let info = [
            QueryInfo {
                source: Some(0),
                pose: Some(poses[0]),
            },
            QueryInfo {
                source: Some(1),
                pose: Some(poses[1]),
            },
        ];
        let out = mine_hard_negatives(
            &[vec![0.0], vec![0.0]],
            &info,
            &refs,
            &poses,
            &TrainConfig::default(),
        )
        .unwrap();
        assert!(out.triplets.iter().all(|t| t.negative == 2));
        assert_eq!(out.skipped, 0);

        let near_only: Vec<Pose> = [0.0, 5.0, 20.0]
            .iter()
            .map(|&x| Pose::new(x, 0.0))
            .collect();
        let out = mine_hard_negatives(
            &[vec![0.0]],
            &info[..1],
            &refs,
            &near_only,
            &TrainConfig::default(),
        )
        .unwrap();
        assert!(out.triplets.is_empty());
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn poseless_negatives_are_reproducible_and_never_the_source() {
        let n_refs = 7;
        let info: Vec<QueryInfo> = (0..10_000)
            .map(|i| QueryInfo {
                source: Some(i % n_refs),
                pose: None,
            })
            .collect();
        let config = TrainConfig {
            poseless: true,
            seed: 99,
            ..TrainConfig::default()
        };
        let a = mine_random_negatives(&info, n_refs, &config, 0).unwrap();
        let b = mine_random_negatives(&info, n_refs, &config, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.triplets.len(), 10_000);
        assert!(a
            .triplets
            .iter()
            .all(|t| t.negative != t.positive && t.negative < n_refs));
        let c = mine_random_negatives(&info, n_refs, &config, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stream_cardinality_and_pose_copy() {
        let ds = line_references(&[0.0, 30.0, 60.0, 90.0, 120.0]);
        let ft = build_finetune_stream(&ds, 3, &AugmentationSpec::default(), 4).unwrap();
        let epoch0 = ft.realize(0).unwrap();
        assert_eq!(epoch0.len(), 15);
        for q in &epoch0 {
            assert_eq!(q.record.pose, Some(ds.reference_poses()[q.source]));
        }
        let epoch1 = ft.realize(1).unwrap();
        assert_ne!(epoch0, epoch1);
        assert_eq!(epoch0, ft.realize(0).unwrap());
        assert!(matches!(
            build_finetune_stream(&ds, 0, &AugmentationSpec::default(), 4),
            Err(VprError::InvalidMultiplicity(0))
        ));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let ds = line_references(&[0.0, 30.0, 60.0]);
        let model = crate::embedding::init_model(&[8], 4, 1).unwrap();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let spec = AugmentationSpec::from_selection(
            AugmentSelection::All,
            AugmentRanges::default(),
            false,
        );
        let (out, log) = rsf_finetune(&model, &ds, &config, &spec, None).unwrap();
        assert_eq!(out.fingerprint(), model.fingerprint());
        assert!(log.steps.is_empty() && log.epochs.is_empty());
    }

    #[test]
    fn poseless_labeled_training_rejected() {
        let ds = line_references(&[0.0, 30.0, 60.0]);
        let model = crate::embedding::init_model(&[], 4, 1).unwrap();
        let config = TrainConfig {
            poseless: true,
            ..TrainConfig::default()
        };
        assert!(pretrain(&model, &ds, &config, None).is_err());
        let only_gray =
            AugmentationSpec::with_kinds(vec![AugmentKind::Grayscale], AugmentRanges::default());
        assert!(rsf_finetune(&model, &ds, &config, &only_gray, None).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                margin: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                negative_radius: 5.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn random_other_skips_source() {
        let mut rng = rng_for(1, &[]);
        for _ in 0..1000 {
            assert_ne!(random_other(&mut rng, 3, 1), 1);
        }
    }
}
