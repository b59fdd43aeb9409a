use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use refset_vpr::augmentation::AugmentSelection;
use refset_vpr::config::ExperimentConfig;
use refset_vpr::dataset::{load_dataset, split_validation, Dataset, LoadOptions};
use refset_vpr::embedding::{init_model, load_model, EmbeddingModel, Fingerprint};
use refset_vpr::evaluation::{
    dataset_ground_truth, emit_projection, evaluate_model, format_percent, generalization_matrix,
    recall_at_n, recall_table, RecallReport, TextTable, REPORT_CSV_HEADER,
};
use refset_vpr::protocol::{
    augmentation_ablation, pose_ablation, AblationRow, DomainGapProtocol, PRESETS,
};
use refset_vpr::retrieval::{build_map, load_map, retrieve_dataset, RetrievalResult};
use refset_vpr::rsf::{pretrain, rsf_finetune, TrainLog};
use refset_vpr::seed::{derive_seed, stream};
use refset_vpr::synth::generate_synthetic;
use refset_vpr::{Result, VprError};
use serde_json::json;

use crate::args::{overlay_file, resolve, EvalArgs, TrainArgs};
use crate::run::Run;

pub const RESULTS_HEADER: &str = "query_id,rank,reference_index,reference_id,distance";

/// Options shared by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Parent directory of run directories.
    #[arg(long, global = true, env = "VPR_OUT_DIR", default_value = "runs")]
    pub out_dir: PathBuf,
    /// TOML file whose keys override the command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Zero wall-clock timings so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Pose manifests hold latitude/longitude in degrees.
    #[arg(long, global = true)]
    pub geographic: bool,
}

impl Common {
    fn load(&self, path: &Path, references_only: bool) -> Result<Dataset> {
        load_dataset(
            path,
            &LoadOptions {
                geographic: self.geographic,
                references_only,
                ..LoadOptions::default()
            },
        )
    }

    fn config(&self, apply: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
        resolve(self.config.as_deref(), apply)
    }
}

/// What a finished command reports on stdout.
pub struct Outcome {
    pub dir: PathBuf,
    pub text: String,
}

fn finish(run: Run, text: String) -> Result<Outcome> {
    Ok(Outcome {
        dir: run.finish()?,
        text,
    })
}

fn train_log_jsonl(log: &TrainLog, deterministic: bool) -> String {
    let mut out = String::new();
    for s in &log.steps {
        let _ = writeln!(
            out,
            "{}",
            json!({"type": "step", "epoch": s.epoch, "step": s.step, "loss": s.loss})
        );
    }
    for e in &log.epochs {
        let mut v = serde_json::to_value(e).expect("epoch records serialize");
        v["type"] = json!("epoch");
        if deterministic {
            v["seconds"] = json!(0.0);
        }
        let _ = writeln!(out, "{v}");
    }
    let _ = writeln!(
        out,
        "{}",
        json!({"type": "summary", "mode": log.mode, "selected_epoch": log.selected_epoch, "epochs_run": log.epochs.len()})
    );
    out
}

fn report_csv(reports: &[RecallReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for line in reports.iter().flat_map(|r| r.csv_rows()) {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn load_validation(
    common: &Common,
    config: &ExperimentConfig,
    run: &mut Run,
) -> Result<Option<Dataset>> {
    match &config.validation {
        Some(path) => {
            run.input("validation", path)?;
            Ok(Some(common.load(path, false)?))
        }
        None => Ok(None),
    }
}

fn model_input(run: &mut Run, path: &Path) -> Result<EmbeddingModel> {
    run.input("model", path)?;
    load_model(path)
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    /// World preset: a, a-test, or b.
    #[arg(long, default_value = "b")]
    pub preset: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub places: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

pub fn synth_gen(common: &Common, a: &SynthGenArgs) -> Result<Outcome> {
    let mut protocol = DomainGapProtocol {
        seed: a.seed,
        ..DomainGapProtocol::default()
    };
    if let Some(p) = a.places {
        protocol.places = p;
    }
    if let Some(s) = a.image_size {
        protocol.image_size = s;
    }
    let spec = protocol.world_spec(&a.preset).ok_or_else(|| {
        VprError::InvalidSpec(format!(
            "unknown preset `{}`, expected one of {}",
            a.preset,
            PRESETS.join(", ")
        ))
    })?;
    let spec = overlay_file(&spec, common.config.as_deref())?;
    let dataset = generate_synthetic(&spec)?;
    let text = format!(
        "{}: {} references, {} queries\n",
        spec.name,
        dataset.references().len(),
        dataset.query_count()
    );
    let mut run = Run::new(&common.out_dir, "synth-gen", Some(a.seed), &spec);
    run.detail("preset", &a.preset);
    run.output_dataset(&spec.name, dataset);
    finish(run, text)
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Labeled dataset with posed queries.
    #[arg(long)]
    pub train: PathBuf,
    /// Fraction of training places held out for validation when no
    /// validation dataset is given.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

pub fn pretrain_cmd(common: &Common, a: &PretrainArgs) -> Result<Outcome> {
    let config = common.config(|c| {
        a.train_args.apply(c);
        c.seed = a.seed;
    })?;
    let mut run = Run::new(&common.out_dir, "pretrain", Some(config.seed), &config);
    run.input("train", &a.train)?;
    let full = common.load(&a.train, false)?;
    let (train, validation) = match load_validation(common, &config, &mut run)? {
        Some(v) => (full, Some(v)),
        None if a.val_fraction > 0.0 => {
            let (t, v) = split_validation(
                &full,
                a.val_fraction,
                derive_seed(config.seed, &[stream::BATCH_ORDER]),
            )?;
            (t, Some(v))
        }
        None => (full, None),
    };
    let init = init_model(
        &config.hidden_dims,
        config.output_dim,
        derive_seed(config.seed, &[stream::INIT]),
    )?;
    let (model, log) = pretrain(&init, &train, &config.train_config(), validation.as_ref())?;
    let mut text = format!("model {}\n", model.fingerprint().short());
    if let Some(v) = &validation {
        let rep = evaluate_model(&model, v, config.radius, &config.ns)?;
        text.push_str(&recall_table(&[("pretrained".into(), vec![rep])]).render());
    }
    run.detail("mining_mode", log.mode);
    run.detail("selected_epoch", log.selected_epoch);
    run.detail("model_fingerprint", model.fingerprint());
    run.output("model.vprh", model.to_bytes());
    run.output(
        "train_log.jsonl",
        train_log_jsonl(&log, common.deterministic),
    );
    finish(run, text)
}

#[derive(Args, Debug)]
pub struct BuildMapArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

pub fn build_map_cmd(common: &Common, a: &BuildMapArgs) -> Result<Outcome> {
    let mut run = Run::new(&common.out_dir, "build-map", None, json!({}));
    run.input("dataset", &a.dataset)?;
    let model = model_input(&mut run, &a.model)?;
    let dataset = common.load(&a.dataset, true)?;
    let map = build_map(&dataset, &model)?;
    let text = format!("{} descriptors of dimension {}\n", map.len(), map.dim());
    run.output("map.vprm", map.to_bytes());
    finish(run, text)
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose queries are looked up.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

pub fn retrieve_cmd(common: &Common, a: &RetrieveArgs) -> Result<Outcome> {
    let mut run = Run::new(&common.out_dir, "retrieve", None, json!({ "k": a.k }));
    run.input("map", &a.map)?;
    let model = model_input(&mut run, &a.model)?;
    run.input("queries", &a.queries)?;
    let map = load_map(&a.map)?;
    if map.model_fingerprint() != model.fingerprint() {
        log::warn!(
            "map was built with model {}, querying with {}",
            map.model_fingerprint().short(),
            model.fingerprint().short()
        );
    }
    let dataset = common.load(&a.queries, false)?;
    let results = retrieve_dataset(&map, &model, &dataset, a.k)?;
    let mut csv = format!("{RESULTS_HEADER}\n");
    for res in &results {
        for (rank, (idx, dist)) in res.ranked.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{idx},{},{dist:.9}",
                res.query_id,
                rank + 1,
                map.ids()[*idx]
            );
        }
    }
    let text = format!("{} queries, top {}\n", results.len(), a.k);
    run.output("results.csv", csv);
    finish(run, text)
}

fn read_results(path: &Path, dataset: &Dataset) -> Result<Vec<RetrievalResult>> {
    let parse_err = |line: u64, reason: String| VprError::ManifestParse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
    let mut out: Vec<RetrievalResult> = Vec::new();
    for row in reader.records() {
        let row =
            row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 5 {
            return Err(parse_err(
                line,
                format!("expected 5 fields, found {}", row.len()),
            ));
        }
        let index: usize = row[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad reference index `{}`", &row[2])))?;
        let distance: f64 = row[4]
            .parse()
            .map_err(|_| parse_err(line, format!("bad distance `{}`", &row[4])))?;
        match dataset.references().get(index) {
            Some(r) if r.id == row[3] => {}
            _ => {
                return Err(VprError::InconsistentManifest {
                    id: row[3].to_string(),
                    reason: format!("is not reference {index} of dataset `{}`", dataset.name()),
                })
            }
        }
        match out.last_mut() {
            Some(last) if last.query_id == row[0] => last.ranked.push((index, distance)),
            _ => out.push(RetrievalResult {
                query_id: row[0].to_string(),
                ranked: vec![(index, distance)],
            }),
        }
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Ranked results produced by `retrieve`.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub results: Option<PathBuf>,
    /// Model to evaluate end to end.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalArgs,
}

pub fn evaluate_cmd(common: &Common, a: &EvaluateArgs) -> Result<Outcome> {
    let config = common.config(|c| a.eval.apply(c))?;
    let settings = json!({ "radius": config.radius, "ns": config.ns });
    let mut run = Run::new(&common.out_dir, "evaluate", None, settings);
    run.input("dataset", &a.dataset)?;
    let dataset = common.load(&a.dataset, false)?;
    let (label, report) = match (&a.results, &a.model) {
        (Some(path), _) => {
            run.input("results", path)?;
            let results = read_results(path, &dataset)?;
            let gt = dataset_ground_truth(&dataset, config.radius)?;
            let report = recall_at_n(&results, &gt, &config.ns)?
                .labeled(dataset.name(), Fingerprint::default());
            (path.display().to_string(), report)
        }
        (None, Some(path)) => {
            let model = model_input(&mut run, path)?;
            let report = evaluate_model(&model, &dataset, config.radius, &config.ns)?;
            (model.fingerprint().short(), report)
        }
        (None, None) => unreachable!("clap requires --results or --model"),
    };
    let table = recall_table(&[(label, vec![report.clone()])]).render();
    run.output("report.csv", report_csv(&[report]));
    run.output("table.txt", table.clone());
    finish(run, table)
}

#[derive(Args, Debug)]
pub struct RsfArgs {
    /// Model to finetune.
    #[arg(long)]
    pub model: PathBuf,
    /// Target dataset; only its references are read.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

pub fn rsf_cmd(common: &Common, a: &RsfArgs) -> Result<Outcome> {
    let config = common.config(|c| {
        a.train_args.apply(c);
        c.seed = a.seed;
    })?;
    let spec = config.augmentation_spec()?;
    let mut run = Run::new(&common.out_dir, "rsf", Some(config.seed), &config);
    let base = model_input(&mut run, &a.model)?;
    run.input("dataset", &a.dataset)?;
    let dataset = common.load(&a.dataset, true)?;
    let validation = load_validation(common, &config, &mut run)?;
    let (model, log) = rsf_finetune(
        &base,
        &dataset,
        &config.train_config(),
        &spec,
        validation.as_ref(),
    )?;
    let mut text = format!(
        "mode {}, {} epochs, model {}\n",
        json!(log.mode).as_str().unwrap_or_default(),
        log.epochs.len(),
        model.fingerprint().short()
    );
    if let Some(v) = &validation {
        let rows = vec![
            (
                "base".to_string(),
                vec![evaluate_model(&base, v, config.radius, &config.ns)?],
            ),
            (
                "rsf".to_string(),
                vec![evaluate_model(&model, v, config.radius, &config.ns)?],
            ),
        ];
        text.push_str(&recall_table(&rows).render());
    }
    run.detail("mining_mode", log.mode);
    run.detail("augmentation", spec.selection().as_str());
    run.detail("selected_epoch", log.selected_epoch);
    run.detail("model_fingerprint", model.fingerprint());
    run.output("model.vprh", model.to_bytes());
    run.output(
        "train_log.jsonl",
        train_log_jsonl(&log, common.deterministic),
    );
    finish(run, text)
}

#[derive(Args, Debug)]
pub struct XevalArgs {
    /// Model files, comma-separated; one matrix row each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Dataset directories, comma-separated; one matrix column each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub datasets: Vec<PathBuf>,
    /// Row labels; defaults to the model file stems.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[command(flatten)]
    pub eval: EvalArgs,
}

fn labels_for(paths: &[PathBuf], labels: Option<&Vec<String>>) -> Result<Vec<String>> {
    match labels {
        Some(l) if l.len() != paths.len() => Err(VprError::ShapeError {
            expected: paths.len(),
            actual: l.len(),
        }),
        Some(l) => Ok(l.clone()),
        None => Ok(paths
            .iter()
            .map(|p| {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy();
                match p.parent().and_then(|d| d.file_name()) {
                    Some(dir) if stem == "model" || stem == "map" => {
                        format!("{}/{stem}", dir.to_string_lossy())
                    }
                    _ => stem.into_owned(),
                }
            })
            .collect()),
    }
}

pub fn xeval_cmd(common: &Common, a: &XevalArgs) -> Result<Outcome> {
    let config = common.config(|c| a.eval.apply(c))?;
    let labels = labels_for(&a.models, a.labels.as_ref())?;
    let settings = json!({ "radius": config.radius, "ns": config.ns });
    let mut run = Run::new(&common.out_dir, "xeval", None, settings);
    let mut models = Vec::new();
    for (label, path) in labels.iter().zip(&a.models) {
        models.push((label.clone(), model_input(&mut run, path)?));
    }
    let mut datasets = Vec::new();
    for path in &a.datasets {
        run.input("dataset", path)?;
        datasets.push(common.load(path, false)?);
    }
    let model_refs: Vec<(String, &EmbeddingModel)> =
        models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let dataset_refs: Vec<&Dataset> = datasets.iter().collect();
    let matrix = generalization_matrix(&model_refs, &dataset_refs, config.radius, &config.ns);

    let mut csv = format!("model,{REPORT_CSV_HEADER},error\n");
    for (label, row) in matrix.model_labels.iter().zip(&matrix.cells) {
        for (name, cell) in matrix.dataset_names.iter().zip(row) {
            match cell {
                Ok(rep) => rep.csv_rows().iter().for_each(|r| {
                    let _ = writeln!(csv, "{label},{r},");
                }),
                Err(e) => {
                    let _ = writeln!(csv, "{label},,{name},,,,,{}", e.kind);
                }
            }
        }
    }
    let mut text = String::new();
    for &n in &config.ns {
        text.push_str(&matrix.table(n).render());
        text.push('\n');
    }
    run.output("matrix.csv", csv);
    run.output("table.txt", text.clone());
    finish(run, text)
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Map files, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub maps: Vec<PathBuf>,
    /// Source labels; defaults to the map file stems.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

pub fn project_cmd(common: &Common, a: &ProjectArgs) -> Result<Outcome> {
    let labels = labels_for(&a.maps, a.labels.as_ref())?;
    let mut run = Run::new(
        &common.out_dir,
        "project",
        None,
        json!({ "labels": labels }),
    );
    let mut maps = Vec::new();
    for path in &a.maps {
        run.input("map", path)?;
        maps.push(load_map(path)?);
    }
    let pairs: Vec<(String, _)> = labels.iter().cloned().zip(maps.iter()).collect();
    let points = emit_projection(&pairs)?;
    let mut csv = String::from("source_label,x,y\n");
    for p in &points {
        let _ = writeln!(csv, "{},{:.9},{:.9}", p.source, p.x, p.y);
    }
    let text = format!("{} points from {} maps\n", points.len(), maps.len());
    run.output("projection.csv", csv);
    finish(run, text)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Model to finetune.
    #[arg(long)]
    pub model: PathBuf,
    /// Target dataset; finetuning reads its references, evaluation its queries.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

fn ablation_outputs(run: &mut Run, rows: &[AblationRow], deterministic: bool) -> String {
    let mut csv = format!("label,{REPORT_CSV_HEADER}\n");
    for row in rows {
        for line in row.report.csv_rows() {
            let _ = writeln!(csv, "{},{line}", row.label.replace(',', "+"));
        }
        if let Some(log) = &row.log {
            run.output(
                &format!("train_log_{}.jsonl", row.label.replace(',', "+")),
                train_log_jsonl(log, deterministic),
            );
        }
    }
    let mut table = TextTable::new(
        std::iter::once("".to_string())
            .chain(rows.first().map_or(vec![], |r| {
                r.report.ns.iter().map(|n| format!("R@{n}")).collect()
            }))
            .chain(["model".to_string()])
            .collect(),
    );
    for row in rows {
        let mut cells = vec![row.label.replace(',', "+")];
        cells.extend(row.report.recalls.iter().map(|&r| format_percent(r)));
        cells.push(row.model.short());
        table.push(cells);
    }
    let text = table.render();
    run.output("ablation.csv", csv);
    run.output("table.txt", text.clone());
    let fingerprints: Vec<_> = rows
        .iter()
        .map(|r| json!({"label": r.label, "model": r.model}))
        .collect();
    run.detail("rows", fingerprints);
    text
}

fn ablation_setup(
    common: &Common,
    a: &AblateArgs,
    command: &str,
) -> Result<(
    ExperimentConfig,
    Run,
    EmbeddingModel,
    Dataset,
    Option<Dataset>,
)> {
    let config = common.config(|c| {
        a.train_args.apply(c);
        c.seed = a.seed;
    })?;
    let mut run = Run::new(&common.out_dir, command, Some(config.seed), &config);
    let model = model_input(&mut run, &a.model)?;
    run.input("dataset", &a.dataset)?;
    let dataset = common.load(&a.dataset, false)?;
    let validation = load_validation(common, &config, &mut run)?;
    Ok((config, run, model, dataset, validation))
}

pub fn ablate_aug_cmd(common: &Common, a: &AblateArgs) -> Result<Outcome> {
    let (config, mut run, model, dataset, validation) = ablation_setup(common, a, "ablate-aug")?;
    let rows = augmentation_ablation(
        &model,
        &dataset,
        validation.as_ref(),
        &config.train_config(),
        &config.ranges,
        config.allow_flip,
        &AugmentSelection::ALL_FOUR,
        &config.ns,
    )?;
    let text = ablation_outputs(&mut run, &rows, common.deterministic);
    finish(run, text)
}

pub fn ablate_poses_cmd(common: &Common, a: &AblateArgs) -> Result<Outcome> {
    let (config, mut run, model, dataset, validation) = ablation_setup(common, a, "ablate-poses")?;
    let rows = pose_ablation(
        &model,
        &dataset,
        validation.as_ref(),
        &config.train_config(),
        &config.augmentation_spec()?,
        &config.ns,
    )?;
    let text = ablation_outputs(&mut run, &rows, common.deterministic);
    finish(run, text)
}
