//! Reproducible experiment recipes shared by the command-line tool and the
//! acceptance suite: the synthetic world presets, the pretrain/finetune
//! pipeline, and the pose and augmentation ablations.

use crate::augmentation::{AugmentRanges, AugmentSelection, AugmentationSpec};
use crate::dataset::{split_validation, Dataset};
use crate::embedding::{init_model, EmbeddingModel, Fingerprint};
use crate::error::Result;
use crate::evaluation::{evaluate_model, RecallReport};
use crate::rsf::{pretrain, rsf_finetune, TrainConfig, TrainLog};
use crate::synth::{generate_synthetic, StyleParams, SynthWorldSpec, TextureFamily};

/// World presets available by name.
pub const PRESETS: [&str; 3] = ["a", "a-test", "b"];

/// Settings of the two-world domain-gap experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainGapProtocol {
    pub seed: u64,
    pub places: usize,
    pub image_size: usize,
    pub validation_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub radius: f64,
    pub ns: Vec<usize>,
}

impl Default for DomainGapProtocol {
    fn default() -> Self {
        Self {
            seed: 0,
            places: 500,
            image_size: 48,
            validation_fraction: 0.2,
            hidden_dims: vec![256],
            output_dim: 128,
            pretrain: TrainConfig {
                learning_rate: 0.05,
                epochs: 6,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 0.03,
                epochs: 5,
                ..TrainConfig::default()
            },
            radius: crate::evaluation::DEFAULT_RADIUS_M,
            ns: crate::evaluation::DEFAULT_NS.to_vec(),
        }
    }
}

/// The datasets of one protocol instance.
#[derive(Clone, Debug)]
pub struct Worlds {
    pub a_train: Dataset,
    pub a_val: Dataset,
    /// Held-out world in the training domain.
    pub a_test: Dataset,
    /// Test world across the domain gap.
    pub b: Dataset,
}

impl DomainGapProtocol {
    /// World `a` and `a-test` share the block texture family and a moderate
    /// query shift; world `b` uses soft gradients, another palette, and a
    /// strong photometric query shift.
    pub fn world_spec(&self, preset: &str) -> Option<SynthWorldSpec> {
        let a_query = StyleParams {
            hue_shift: 15.0,
            brightness_offset: -0.2,
            contrast_gain: 0.7,
            noise_sigma: 0.1,
            ..StyleParams::plain(0, TextureFamily::Blocks)
        };
        let base = |name: &str, offset: u64| SynthWorldSpec {
            name: name.to_string(),
            place_count: self.places,
            spacing: 30.0,
            reference_style: StyleParams::plain(0, TextureFamily::Blocks),
            query_style: a_query.clone(),
            queries_per_place: 2,
            image_size: self.image_size,
            query_jitter_px: 6,
            seed: self.seed.wrapping_add(offset),
        };
        match preset {
            "a" => Some(base("world-a", 1)),
            "a-test" => Some(base("world-a-test", 2)),
            "b" => Some(SynthWorldSpec {
                reference_style: StyleParams::plain(3, TextureFamily::Gradients),
                query_style: StyleParams {
                    hue_shift: 40.0,
                    brightness_offset: -0.25,
                    contrast_gain: 0.6,
                    noise_sigma: 0.08,
                    ..StyleParams::plain(3, TextureFamily::Gradients)
                },
                query_jitter_px: 4,
                ..base("world-b", 3)
            }),
            _ => None,
        }
    }

    pub fn build_worlds(&self) -> Result<Worlds> {
        let spec = |p: &str| self.world_spec(p).expect("preset exists");
        let a = generate_synthetic(&spec("a"))?;
        let (a_train, a_val) =
            split_validation(&a, self.validation_fraction, self.seed.wrapping_add(7))?;
        Ok(Worlds {
            a_train,
            a_val,
            a_test: generate_synthetic(&spec("a-test"))?,
            b: generate_synthetic(&spec("b"))?,
        })
    }

    fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_add(11),
            eval_radius: self.radius,
            ..self.pretrain.clone()
        }
    }

    /// Finetuning settings with the protocol's seed folded in.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_add(21),
            eval_radius: self.radius,
            ..self.finetune.clone()
        }
    }

    /// Initializes a head and trains it on the training split of world A.
    pub fn pretrain_baseline(&self, worlds: &Worlds) -> Result<(EmbeddingModel, TrainLog)> {
        let init = init_model(
            &self.hidden_dims,
            self.output_dim,
            self.seed.wrapping_add(5),
        )?;
        pretrain(
            &init,
            &worlds.a_train,
            &self.pretrain_config(),
            Some(&worlds.a_val),
        )
    }

    pub fn augmentation(&self, selection: AugmentSelection) -> AugmentationSpec {
        AugmentationSpec::from_selection(selection, AugmentRanges::default(), false)
    }

    /// Reference-set finetuning of `base` on world B, validated on A.
    pub fn finetune_on_b(
        &self,
        base: &EmbeddingModel,
        worlds: &Worlds,
        selection: AugmentSelection,
        poseless: bool,
    ) -> Result<(EmbeddingModel, TrainLog)> {
        let config = TrainConfig {
            poseless,
            ..self.finetune_config()
        };
        rsf_finetune(
            base,
            &worlds.b,
            &config,
            &self.augmentation(selection),
            Some(&worlds.a_val),
        )
    }

    pub fn evaluate(&self, model: &EmbeddingModel, dataset: &Dataset) -> Result<RecallReport> {
        evaluate_model(model, dataset, self.radius, &self.ns)
    }
}

/// Outcome of pretraining on A and finetuning on B's references.
#[derive(Clone, Debug)]
pub struct DomainGapRun {
    pub baseline: EmbeddingModel,
    pub finetuned: EmbeddingModel,
    pub pretrain_log: TrainLog,
    pub finetune_log: TrainLog,
    pub baseline_on_a: RecallReport,
    pub baseline_on_b: RecallReport,
    pub finetuned_on_a: RecallReport,
    pub finetuned_on_b: RecallReport,
}

pub fn run_domain_gap(protocol: &DomainGapProtocol, worlds: &Worlds) -> Result<DomainGapRun> {
    let (baseline, pretrain_log) = protocol.pretrain_baseline(worlds)?;
    let (finetuned, finetune_log) =
        protocol.finetune_on_b(&baseline, worlds, AugmentSelection::All, false)?;
    Ok(DomainGapRun {
        baseline_on_a: protocol.evaluate(&baseline, &worlds.a_test)?,
        baseline_on_b: protocol.evaluate(&baseline, &worlds.b)?,
        finetuned_on_a: protocol.evaluate(&finetuned, &worlds.a_test)?,
        finetuned_on_b: protocol.evaluate(&finetuned, &worlds.b)?,
        baseline,
        finetuned,
        pretrain_log,
        finetune_log,
    })
}

/// One row of an ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub model: Fingerprint,
    pub report: RecallReport,
    pub log: Option<TrainLog>,
}

/// Finetunes `model` on the references of `dataset` once per selection and
/// evaluates each result on `dataset`.
#[allow(clippy::too_many_arguments)]
pub fn augmentation_ablation(
    model: &EmbeddingModel,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    ranges: &AugmentRanges,
    allow_flip: bool,
    selections: &[AugmentSelection],
    ns: &[usize],
) -> Result<Vec<AblationRow>> {
    selections
        .iter()
        .map(|&selection| {
            let spec = AugmentationSpec::from_selection(selection, ranges.clone(), allow_flip);
            let (tuned, log) = rsf_finetune(model, dataset, config, &spec, validation)?;
            Ok(AblationRow {
                label: selection.as_str().to_string(),
                model: tuned.fingerprint(),
                report: evaluate_model(&tuned, dataset, config.eval_radius, ns)?,
                log: Some(log),
            })
        })
        .collect()
}

/// Baseline, finetuning with random negatives, and finetuning with pose-mined
/// hard negatives, all evaluated on `dataset`.
pub fn pose_ablation(
    model: &EmbeddingModel,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    spec: &AugmentationSpec,
    ns: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut rows = vec![AblationRow {
        label: "baseline".into(),
        model: model.fingerprint(),
        report: evaluate_model(model, dataset, config.eval_radius, ns)?,
        log: None,
    }];
    for (label, poseless) in [("rsf-poseless", true), ("rsf-poses", false)] {
        let cfg = TrainConfig {
            poseless,
            ..config.clone()
        };
        let (tuned, log) = rsf_finetune(model, dataset, &cfg, spec, validation)?;
        rows.push(AblationRow {
            label: label.into(),
            model: tuned.fingerprint(),
            report: evaluate_model(&tuned, dataset, config.eval_radius, ns)?,
            log: Some(log),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_differ() {
        let p = DomainGapProtocol::default();
        let specs: Vec<_> = PRESETS.iter().map(|n| p.world_spec(n).unwrap()).collect();
        assert!(specs.iter().all(|s| s.validate().is_ok()));
        assert_ne!(specs[0].seed, specs[1].seed);
        assert_ne!(
            specs[0].reference_style.texture_family,
            specs[2].reference_style.texture_family
        );
        assert!(p.world_spec("c").is_none());
    }

    #[test]
    fn seed_shifts_every_world() {
        let a = DomainGapProtocol::default();
        let b = DomainGapProtocol {
            seed: 9,
            ..a.clone()
        };
        for n in PRESETS {
            assert_ne!(a.world_spec(n).unwrap().seed, b.world_spec(n).unwrap().seed);
        }
    }
}
