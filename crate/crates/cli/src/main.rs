use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pocketalign::evaluation::{KnnConfig, KnnWeighting};
use pocketalign::fragment_forge::ExtractionConfig;
use pocketalign::pipeline::PipelineConfig;
use pocketalign::transfer_bound::BoundConfig;
use pocketalign_cli::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pocketalign", version, about = "Pseudo-ligand pocket mining, contrastive pocket encoder training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct ParallelArgs {
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Merge worker results in input order.
    #[arg(long)]
    deterministic: bool,
}

impl From<ParallelArgs> for Parallelism {
    fn from(a: ParallelArgs) -> Self {
        Parallelism {
            threads: a.threads,
            deterministic: a.deterministic || a.threads == 1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Weighting {
    Inverse,
    Similarity,
}

#[derive(Subcommand)]
enum Command {
    /// Mine pseudo-ligand/pocket complexes from a directory of PDB files.
    Extract {
        #[arg(long)]
        pdb_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_frag_len: usize,
        /// Pocket contact distance in Å.
        #[arg(long, default_value_t = 6.0)]
        threshold: f64,
        /// Residues on each side of a fragment excluded from its pocket.
        #[arg(long, default_value_t = 5)]
        exclusion: usize,
        #[command(flatten)]
        parallel: ParallelArgs,
    },
    /// Thin a dataset toward a target (ligand size, pocket size) histogram.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target_hist: PathBuf,
        #[arg(long)]
        target_rbsa: Option<PathBuf>,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        parallel: ParallelArgs,
    },
    /// Write the joint and rBSA histograms of a dataset.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pocket encoder against a frozen ligand encoder.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Saved ligand encoder; a seeded random encoder is used otherwise.
        #[arg(long)]
        ligand_encoder: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        ligand_seed: u64,
        #[command(flatten)]
        parallel: ParallelArgs,
    },
    /// Encode the pockets of a dataset into an embedding bank.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        parallel: ParallelArgs,
    },
    /// Check the loss-transfer inequalities on random batches.
    VerifyBound {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ligand_encoder: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        batches: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Perturbation norm as a multiple of 1/(2·l_T); repeatable.
        #[arg(long = "perturb-scale", default_values_t = [0.1])]
        perturb_scale: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        parallel: ParallelArgs,
    },
    /// Pair-matching AUC and KNN regression over an embedding bank.
    Eval {
        #[arg(long)]
        bank: PathBuf,
        /// CSV with columns id_a,id_b,label.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// CSV with columns id,value.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long, default_value_t = 1e-8)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = Weighting::Inverse)]
        weighting: Weighting,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serialises"));
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Extract {
            pdb_dir,
            out,
            max_frag_len,
            threshold,
            exclusion,
            parallel,
        } => {
            let pipeline = PipelineConfig {
                extraction: ExtractionConfig {
                    max_fragment_len: max_frag_len,
                    pocket_threshold: threshold,
                    exclusion_window: exclusion,
                    ..ExtractionConfig::default()
                },
                ..PipelineConfig::default()
            };
            let summary = cmd_extract(&ExtractRun {
                pdb_dir,
                out,
                pipeline,
                parallelism: parallel.into(),
            })?;
            for (file, err) in &summary.failed {
                eprintln!("warning[input]: skipped {file}: {err}");
            }
            println!("{} records from {} files", summary.records, summary.files);
        }
        Command::Sample {
            input,
            target_hist,
            target_rbsa,
            budget,
            seed,
            out,
            parallel,
        } => print_json(&cmd_sample(&SampleRun {
            input,
            target_hist,
            target_rbsa,
            budget,
            seed,
            out,
            parallelism: parallel.into(),
        })?),
        Command::Stats { input, out } => {
            let (joint, rbsa) = cmd_stats(&StatsRun { input, out_dir: out })?;
            println!("{} records binned", joint.total().max(rbsa.total()));
        }
        Command::Train {
            input,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            ligand_encoder,
            ligand_seed,
            parallel,
        } => {
            let mut run = TrainRun::new(input, out);
            run.train.max_epochs = epochs;
            run.train.batch_size = batch_size;
            run.train.learning_rate = lr;
            run.train.seed = seed;
            run.init_seed = seed;
            run.parallelism = parallel.into();
            match ligand_encoder {
                Some(path) => run.ligand_encoder = LigandEncoderSource::Checkpoint(path),
                None => {
                    if let LigandEncoderSource::Seeded { seed, .. } = &mut run.ligand_encoder {
                        *seed = ligand_seed;
                    }
                }
            }
            print_json(&cmd_train(&run)?);
        }
        Command::Embed {
            model,
            input,
            out,
            parallel,
        } => {
            let n = cmd_embed(&EmbedRun {
                model,
                input,
                out,
                parallelism: parallel.into(),
            })?;
            println!("{n} embeddings");
        }
        Command::VerifyBound {
            model,
            ligand_encoder,
            input,
            out,
            batches,
            batch_size,
            perturb_scale,
            seed,
            parallel,
        } => {
            let summary = cmd_verify_bound(&BoundRun {
                model,
                ligand_encoder,
                input,
                out,
                batches,
                batch_size,
                seed,
                bound: BoundConfig {
                    scales: perturb_scale,
                    seed,
                    ..BoundConfig::default()
                },
                parallelism: parallel.into(),
            })?;
            println!(
                "{} batches, {} pairs: l_T in [{:.4e}, {:.4e}], max M1 {:.4}, max M2 {:.4}, {} violations where the condition holds (l_T is an empirical lower bound)",
                summary.batches,
                summary.pairs_checked,
                summary.l_t_min,
                summary.l_t_max,
                summary.max_m1_under_condition,
                summary.max_m2_under_condition,
                summary.violations_under_condition
            );
        }
        Command::Eval {
            bank,
            pairs,
            labels,
            k,
            epsilon,
            weighting,
            out,
        } => print_json(&cmd_eval(&EvalRun {
            bank,
            pairs,
            labels,
            knn: KnnConfig {
                k,
                epsilon,
                weighting: match weighting {
                    Weighting::Inverse => KnnWeighting::InverseSimilarity,
                    Weighting::Similarity => KnnWeighting::Similarity,
                },
            },
            out,
        })?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
