use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segchange::backbone::BackboneRegistry;
use segchange::bev::BevMode;
use segchange::dataio::{generate_synthetic, SynthConfig};
use segchange::dataio::{load_dataset, write_dataset, DatasetSplit, SplitName};
use segchange::harness::bench::{bench_attention, bench_table, report_from_files, BenchShape};
use segchange::harness::train::{evaluate, TextSource, Trainer, BEST_CHECKPOINT};
use segchange::harness::TrainConfig;
use segchange::Result;

#[derive(Parser)]
#[command(name = "segchange", version, about = "Bitemporal building change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override `key=value` pairs after loading the config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split and print metrics as JSON.
    Eval {
        #[arg(long, alias = "checkpoint")]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Probability cut-off; defaults to the checkpoint's `decoder.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Write predicted masks here.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Also write the JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset split.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: SplitName,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the converter modes over token counts.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_values_t = [256, 1024, 4096])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [BevMode::Transformer, BevMode::AdditiveExact, BevMode::AdditiveLinear])]
        modes: Vec<BevMode>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Write the rows as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render metric JSON files as a markdown table.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn set_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| segchange::Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()
}

fn load_val(cfg: &TrainConfig) -> Result<Option<DatasetSplit>> {
    cfg.data.val_split.map(|s| load_dataset(&cfg.data.root, s)).transpose()
}

fn run(cli: Cli) -> Result<()> {
    let registry = BackboneRegistry::with_builtins();
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            let mut trainer = match resume {
                Some(path) => Trainer::resume(path, &registry)?,
                None => {
                    let mut cfg = match config {
                        Some(p) => TrainConfig::load(p)?,
                        None => TrainConfig::desk(),
                    };
                    set_overrides(&mut cfg, &overrides)?;
                    cfg.apply_env();
                    Trainer::new(cfg, &registry)?
                }
            };
            let cfg = trainer.config().clone();
            let train = load_dataset(&cfg.data.root, cfg.data.train_split)?;
            let val = load_val(&cfg)?;
            let out = PathBuf::from(&cfg.out_dir);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), cfg.serialize())?;
            for log in trainer.run(&train, val.as_ref(), Some(&out))? {
                println!("{}", serde_json::to_string(&log)?);
            }
            eprintln!("best checkpoint: {}", out.join(BEST_CHECKPOINT).display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            threshold,
            dump_masks,
            report,
        } => {
            let trainer = Trainer::resume(&ckpt, &registry)?;
            let mut cfg = trainer.config().clone();
            cfg.apply_env();
            let split = load_dataset(&data, split)?;
            let mut text = TextSource::new(&cfg, segchange::harness::train::make_provider(&cfg)?);
            let threshold = threshold.unwrap_or(cfg.decoder.threshold);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(segchange::Error::Config(format!("threshold {threshold} is outside [0, 1]")));
            }
            let metrics = evaluate(trainer.model(), &split, &mut text, threshold, dump_masks.as_deref())?;
            let json = metrics.to_json();
            println!("{json}");
            if let Some(p) = report {
                std::fs::write(p, format!("{json}\n"))?;
            }
        }
        Command::SynthData {
            out,
            split,
            n,
            size,
            seed,
        } => {
            let cfg = SynthConfig {
                n_samples: n,
                height: size,
                width: size,
                seed,
                ..SynthConfig::default()
            };
            // Splits share the A/B/label directories, so ids carry the split name.
            let mut samples = generate_synthetic(&cfg)?.into_samples();
            for s in &mut samples {
                s.id = format!("{split}_{}", s.id);
            }
            let named = DatasetSplit::new(split, samples)?;
            write_dataset(&out, &named)?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
        Command::BenchAttn { sizes, modes, runs, out } => {
            let rows = bench_attention(
                &sizes,
                &modes,
                BenchShape {
                    runs,
                    ..BenchShape::default()
                },
            )?;
            print!("{}", bench_table(&rows));
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&rows)?)?;
            }
        }
        Command::Report { inputs, out } => {
            let table = report_from_files(&inputs)?;
            match out {
                Some(p) => std::fs::write(p, table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
