use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use modadd::checkpoint::Checkpoint;
use modadd::evaluation::{eval_b_set, evaluate, EvalSetup};
use modadd::rendering::render_variants;
use modadd::rng::Stream;
use modadd::runner::{
    export_reproducibility_package, reproduce_all, run_experiment, verify_package, Assets, ExperimentId,
    ExperimentSpec, Scale, SEEDS,
};
use modadd::task_data::{split, SplitSpec, MODULUS};

#[derive(Parser)]
#[command(name = "modadd", version, about = "Modular addition from text: training and robustness evaluation")]
struct Cli {
    /// Seed for single-run commands.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[arg(long, global = true, default_value = "full")]
    scale: Scale,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seed's train/test split as `a,b,label,split` lines.
    Generate {
        /// Output file; defaults to `<out-dir>/split-seed-<seed>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one experiment for `--seed`.
    Train {
        #[arg(long)]
        experiment: Option<ExperimentId>,
        /// JSON spec file; specs outside the matrix also need `--custom`.
        #[arg(long, conflicts_with = "experiment")]
        spec: Option<PathBuf>,
        #[arg(long)]
        custom: bool,
        /// Print the resolved spec as JSON instead of running it.
        #[arg(long)]
        print_spec: bool,
    },
    /// Evaluate a checkpoint with an experiment's protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        experiment: ExperimentId,
    },
    /// Run the whole matrix over several seeds and write results.json.
    Reproduce {
        #[arg(long, value_delimiter = ',')]
        experiments: Option<Vec<ExperimentId>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Bundle a completed reproduction, or verify an existing bundle.
    Export {
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Only verify the package at this path.
        #[arg(long, conflicts_with = "dest")]
        verify: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print sample training and position-shift renders for eyeballing.
    RenderDump {
        #[arg(long)]
        experiment: ExperimentId,
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        /// Optimizer step whose curriculum range is used.
        #[arg(long)]
        step: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let assets = Assets::builtin();
    match cli.command {
        Command::Generate { out } => {
            let spec = split(cli.seed, MODULUS)?;
            let path = out.unwrap_or_else(|| cli.out_dir.join(format!("split-seed-{}.csv", cli.seed)));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, spec.to_text()).with_context(|| path.display().to_string())?;
            println!("{} ({} train, {} test)", path.display(), spec.train.len(), spec.test.len());
        }
        Command::Train { experiment, spec, custom, print_spec } => {
            let spec = match (experiment, spec) {
                (Some(id), None) => id.spec(cli.scale),
                (None, Some(path)) => {
                    let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                    ExperimentSpec::from_json(&text, custom)?
                }
                _ => bail!("pass --experiment or --spec"),
            };
            if print_spec {
                println!("{}", serde_json::to_string_pretty(&spec)?);
                return Ok(());
            }
            let record = run_experiment(&spec, cli.seed, &cli.out_dir, &assets)?;
            println!("{}", serde_json::to_string_pretty(&record.report)?);
        }
        Command::Eval { checkpoint, experiment } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| checkpoint.display().to_string())?;
            if ck.vocab_hash != assets.vocab.hash() || ck.registry_hash != assets.registry.hash() {
                bail!("checkpoint was trained with a different vocabulary or template registry");
            }
            let spec = experiment.spec(cli.scale);
            let split: SplitSpec = split(cli.seed, MODULUS)?;
            let setup = spec.setup(&assets.registry)?;
            let report = evaluate(
                &ck.model,
                &spec.id,
                cli.seed,
                &split,
                &setup,
                &spec.protocol,
                &assets.registry,
                &assets.vocab,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Reproduce { experiments, seeds } => {
            let specs: Vec<ExperimentSpec> = experiments
                .unwrap_or_else(|| ExperimentId::ALL.to_vec())
                .into_iter()
                .map(|id| id.spec(cli.scale))
                .collect();
            let seeds = seeds.unwrap_or_else(|| SEEDS.to_vec());
            let results = reproduce_all(&cli.out_dir, &specs, &seeds, &assets)?;
            println!("{}", serde_json::to_string_pretty(&results.table1)?);
            if !results.complete {
                bail!("incomplete: {}", results.missing.join(", "));
            }
        }
        Command::Export { dest, verify, seeds } => {
            if let Some(dir) = verify {
                let manifest = verify_package(&dir)?;
                println!("verified {} files, {} runs", manifest.files.len(), manifest.runs.len());
                return Ok(());
            }
            let dest = dest.unwrap_or_else(|| cli.out_dir.join("package"));
            let specs: Vec<ExperimentSpec> = ExperimentId::ALL.iter().map(|id| id.spec(cli.scale)).collect();
            let seeds = seeds.unwrap_or_else(|| SEEDS.to_vec());
            let manifest = export_reproducibility_package(&cli.out_dir, &dest, &specs, &seeds, &assets)?;
            println!("{}: {} files, {} runs", dest.display(), manifest.files.len(), manifest.runs.len());
        }
        Command::RenderDump { experiment, pairs, step } => {
            let spec = experiment.spec(cli.scale);
            let split = split(cli.seed, MODULUS)?;
            let step = step.unwrap_or(0);
            let range = spec.train.curriculum.range_at(step)?;
            let mixture = spec.train.templates.mixture(&assets.registry)?;
            let mut rng = Stream::derived(cli.seed, "render-dump");
            println!("# {} training renders at step {step}, positions {}..={}", spec.id, range.lo, range.hi);
            for (i, pair) in split.train.iter().take(pairs).enumerate() {
                for ex in render_variants(pair, spec.train.k, range, &mixture, spec.train.anchored, i as u64, &mut rng)? {
                    println!("{:>2} {:<12} {:?}", ex.position, ex.template_id, ex.text);
                }
            }
            let setup = EvalSetup::for_config(&spec.train, &assets.registry)?;
            let (sets, _) = eval_b_set(&setup, &spec.protocol, MODULUS)?;
            println!("# position-shift probes");
            for (pos, set) in sets {
                if let Some(ex) = set.first() {
                    println!("{pos:>2} {:<12} {:?}", ex.template_id, ex.text);
                }
            }
        }
    }
    Ok(())
}
