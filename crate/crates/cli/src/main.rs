//! Command-line front end: every command writes its outputs and a manifest
//! into a run directory named after the manifest hash.

mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::*;

#[derive(Parser, Debug)]
#[command(
    name = "refset-vpr",
    version,
    about = "Visual place recognition with reference-set finetuning"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world.
    SynthGen(SynthGenArgs),
    /// Train a new head on a labeled dataset.
    Pretrain(PretrainArgs),
    /// Describe the references of a dataset.
    BuildMap(BuildMapArgs),
    /// Rank map entries for every query of a dataset.
    Retrieve(RetrieveArgs),
    /// Recall@N of stored results or of a model.
    Evaluate(EvaluateArgs),
    /// Finetune a model on the augmented references of a dataset.
    Rsf(RsfArgs),
    /// Evaluate every model on every dataset.
    Xeval(XevalArgs),
    /// 2-D projection of one or more maps.
    Project(ProjectArgs),
    /// Finetune with no, appearance, viewpoint, and all augmentations.
    AblateAug(AblateArgs),
    /// Baseline against poseless and pose-mined finetuning.
    AblatePoses(AblateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let outcome = match &cli.command {
        Command::SynthGen(a) => synth_gen(c, a),
        Command::Pretrain(a) => pretrain_cmd(c, a),
        Command::BuildMap(a) => build_map_cmd(c, a),
        Command::Retrieve(a) => retrieve_cmd(c, a),
        Command::Evaluate(a) => evaluate_cmd(c, a),
        Command::Rsf(a) => rsf_cmd(c, a),
        Command::Xeval(a) => xeval_cmd(c, a),
        Command::Project(a) => project_cmd(c, a),
        Command::AblateAug(a) => ablate_aug_cmd(c, a),
        Command::AblatePoses(a) => ablate_poses_cmd(c, a),
    };
    match outcome {
        Ok(out) => {
            print!("{}", out.text);
            println!("run directory: {}", out.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "message": e.to_string() })
            );
            ExitCode::from(1)
        }
    }
}
