//! Command-line driver for the mask-diffusion pipeline.
//!
//! Each subcommand runs one stage against the run directory named by the
//! config (or the `MASKDIFF_OUT` environment variable). Exit codes: 0 on
//! success, 2 for config problems, 3 when the run directory is not ready
//! (missing prerequisite stage, stale under --strict, or locked), 4 for
//! runtime failures.

use clap::{Parser, Subcommand, ValueEnum};
use maskdiff::config::ExperimentConfig;
use maskdiff::denoiser::ConditioningVariant;
use maskdiff::discrepancy::EnsembleRole;
use maskdiff::pipeline::{
    stage_eval, stage_features, stage_sample, stage_synth, stage_train_ae, stage_train_diff,
    PipelineError, StageContext, StageSummary,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "maskdiff",
    version,
    about = "Lesion mask generation via discrepancy-conditioned diffusion"
)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Fail instead of warn when a prerequisite stage ran under a different
    /// config.
    #[arg(long, global = true)]
    strict: bool,

    /// Override the conditioning variant from the config.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,

    /// Override every stage seed at once.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Mini,
    Light,
    Full,
}

impl From<VariantArg> for ConditioningVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Mini => ConditioningVariant::Mini,
            VariantArg::Light => ConditioningVariant::Light,
            VariantArg::Full => ConditioningVariant::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    #[value(name = "mixture")]
    Mixture,
    #[value(name = "normal_only", alias = "normal-only")]
    NormalOnly,
}

impl From<RoleArg> for EnsembleRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Mixture => EnsembleRole::Mixture,
            RoleArg::NormalOnly => EnsembleRole::NormalOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    Synth,
    /// Train one reconstruction ensemble
    TrainAe {
        /// Which data subset the ensemble learns
        #[arg(long, value_enum)]
        role: RoleArg,
    },
    /// Compute discrepancy maps and anomaly scores for every slice
    Features,
    /// Train the conditional mask denoiser
    TrainDiff,
    /// Sample segmentation masks for the test split
    Sample,
    /// Score the sampled masks against ground truth
    Eval,
}

fn main() {
    std::process::exit(run(Cli::parse()));
}

fn run(cli: Cli) -> i32 {
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(v) = cli.variant {
        cfg.denoiser.variant = v.into();
    }
    if let Some(seed) = cli.seed {
        cfg.set_master_seed(seed);
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 2;
    }

    let ctx = StageContext::new(cfg, cli.strict);
    let result = match cli.command {
        Command::Synth => stage_synth(&ctx),
        Command::TrainAe { role } => stage_train_ae(&ctx, role.into()),
        Command::Features => stage_features(&ctx),
        Command::TrainDiff => stage_train_diff(&ctx),
        Command::Sample => stage_sample(&ctx),
        Command::Eval => stage_eval(&ctx),
    };

    match result {
        Ok(summary) => {
            print_summary(&summary, &ctx);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn print_summary(summary: &StageSummary, ctx: &StageContext) {
    println!("{} done ({})", summary.stage, ctx.out.display());
    for (key, value) in &summary.notes {
        println!("  {key}: {value}");
    }
    for warning in &summary.warnings {
        eprintln!("warning: {warning}");
    }
}

fn exit_code(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::MissingPrerequisite { .. }
        | PipelineError::Locked(_)
        | PipelineError::StaleInput { .. } => 3,
        _ => 4,
    }
}
