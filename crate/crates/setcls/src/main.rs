//! Command-line front end: dataset generation, training, evaluation,
//! tracklet re-classification, gradient checking, and sampler statistics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use setcls::augment::{read_class_counts, write_class_counts, RoiPool};
use setcls::model::{SetClassifierConfig, SetClassifierModel};
use setcls::pipeline::{
    check_model_gradients, evaluate, reclassify, read_predicted_tracklets, sample_stats, train,
    write_reclassified, FusionConfig, TrainConfig,
};
use setcls::synthdata::{
    frequency_groups, generate_dataset, read_eval_tracklets, write_eval_tracklets, SynthConfig,
};
use setcls::Result;

#[derive(Parser)]
#[command(name = "setcls", about = "Tracklet set classifier toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed multi-view dataset.
    GenData(GenDataArgs),
    /// Train a set classifier on a RoI pool.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled test tracklets.
    Eval(EvalArgs),
    /// Re-classify tracker output with fused scores.
    Reclassify(ReclassifyArgs),
    /// Compare reverse-mode gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Report analytic vs empirical sampler distributions for a pool.
    SampleStats(SampleStatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for pool.strk, counts.json, and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    num_classes: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.5)]
    zipf_exponent: f64,
    #[arg(long, default_value_t = 2000)]
    total_instances: usize,
    #[arg(long, default_value_t = 24)]
    views_per_instance: usize,
    #[arg(long, default_value_t = 0.5)]
    view_noise_sigma: f64,
    #[arg(long, default_value_t = 0.3)]
    occlusion_prob: f64,
    #[arg(long, default_value_t = 1.0)]
    prototype_sigma: f64,
    #[arg(long, default_value_t = 0.25)]
    instance_sigma: f64,
    #[arg(long, default_value_t = 4)]
    test_instances_per_class: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training pool (STRK binary).
    #[arg(long)]
    pool: PathBuf,
    /// JSON sidecar with per-class annotation counts.
    #[arg(long)]
    counts: PathBuf,
    /// Optional auxiliary pool mixed into each batch.
    #[arg(long)]
    aux_pool: Option<PathBuf>,
    #[arg(long, requires = "aux_pool")]
    aux_counts: Option<PathBuf>,
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled tracklets for periodic evaluation.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Overrides the config-file seed when given.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled test tracklets (JSON lines).
    #[arg(long)]
    test: PathBuf,
    /// Per-class counts used for the rare/common/frequent split.
    #[arg(long)]
    counts: PathBuf,
    /// Also write the full report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReclassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tracker output to re-classify (JSON lines).
    #[arg(long)]
    tracklets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    lambda_c: f64,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    lambda_s: f64,
    /// Disable the tracklet-length multiplier.
    #[arg(long)]
    no_length_penalty: bool,
    /// Fuse with the scalar max class probability instead of the vector.
    #[arg(long)]
    scalar_set_score: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    encoder_layers: usize,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 8)]
    tracklet_len: usize,
    /// Entries probed per parameter tensor; 0 checks every entry.
    #[arg(long, default_value_t = 4)]
    entries_per_param: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleStatsArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    exponent: f64,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(args) => {
            let cfg = SynthConfig {
                num_classes: args.num_classes,
                feature_dim: args.feature_dim,
                zipf_exponent: args.zipf_exponent,
                total_instances: args.total_instances,
                views_per_instance: args.views_per_instance,
                view_noise_sigma: args.view_noise_sigma,
                occlusion_prob: args.occlusion_prob,
                prototype_sigma: args.prototype_sigma,
                instance_sigma: args.instance_sigma,
                test_instances_per_class: args.test_instances_per_class,
                seed: args.seed,
            };
            let ds = generate_dataset(&cfg)?;
            std::fs::create_dir_all(&args.out)?;
            ds.pool.write_strk(&args.out.join("pool.strk"))?;
            write_class_counts(&args.out.join("counts.json"), ds.pool.class_counts())?;
            write_eval_tracklets(&args.out.join("test.jsonl"), &ds.test)?;
            println!(
                "wrote {} records, {} test tracklets to {}",
                ds.pool.len(),
                ds.test.len(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let counts = read_class_counts(&args.counts)?;
            let pool = RoiPool::read_strk(&args.pool, counts)?;
            let aux = match (&args.aux_pool, &args.aux_counts) {
                (Some(pool_path), Some(counts_path)) => {
                    let aux_counts = read_class_counts(counts_path)?;
                    Some(RoiPool::read_strk(pool_path, aux_counts)?)
                }
                (Some(_), None) => {
                    return Err(setcls::Error::Config(
                        "--aux-pool requires --aux-counts".into(),
                    ))
                }
                _ => None,
            };
            let mut cfg = match &args.config {
                Some(path) => TrainConfig::from_file(path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let eval_set = match &args.test {
                Some(path) => Some(read_eval_tracklets(path)?),
                None => None,
            };
            let result =
                train(&pool, aux.as_ref(), &cfg, cfg.seed, eval_set.as_deref(), true)?;
            result.model.save(&args.out)?;
            println!(
                "trained {} iterations, final loss {:.4}, checkpoint {}",
                cfg.iterations,
                result.loss_history.last().copied().unwrap_or(f64::NAN),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let model = SetClassifierModel::load(&args.checkpoint)?;
            let test = read_eval_tracklets(&args.test)?;
            let counts = read_class_counts(&args.counts)?;
            let groups = frequency_groups(&counts);
            let report = evaluate(&model, &test, &groups)?;
            print!("{}", report.to_text_table());
            if let Some(path) = &args.json {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Reclassify(args) => {
            let model = SetClassifierModel::load(&args.checkpoint)?;
            let tracklets = read_predicted_tracklets(&args.tracklets)?;
            let cfg = FusionConfig {
                lambda_c: args.lambda_c,
                lambda_s: args.lambda_s,
                length_penalty: !args.no_length_penalty,
                scalar_set_score: args.scalar_set_score,
            };
            let rows = reclassify(&model, &tracklets, &cfg)?;
            write_reclassified(&args.out, &rows)?;
            println!("re-classified {} tracklets into {}", rows.len(), args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck(args) => {
            let cfg = SetClassifierConfig {
                input_dim: args.input_dim,
                model_dim: args.model_dim,
                heads: args.heads,
                encoder_layers: args.encoder_layers,
                num_classes: args.num_classes,
                feedforward_dim: 4 * args.model_dim,
            };
            let report = check_model_gradients(
                cfg,
                args.tracklet_len,
                args.entries_per_param,
                args.tolerance,
                args.seed,
            )?;
            println!(
                "checked {} entries, worst relative error {:.3e}",
                report.entries_checked, report.worst_rel_err
            );
            if report.passed() {
                println!("gradient check passed");
                Ok(ExitCode::SUCCESS)
            } else {
                for f in report.failures.iter().take(10) {
                    eprintln!(
                        "mismatch {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
                        f.param, f.index, f.analytic, f.numeric, f.rel_err
                    );
                }
                eprintln!("gradient check FAILED ({} mismatches)", report.failures.len());
                Ok(ExitCode::FAILURE)
            }
        }
        Command::SampleStats(args) => {
            let counts = read_class_counts(&args.counts)?;
            let pool = RoiPool::read_strk(&args.pool, counts)?;
            let stats = sample_stats(&pool, args.exponent, args.draws, args.seed)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
