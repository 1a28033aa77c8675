use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inharmony_core::dataset::{build_dataset, Split};
use inharmony_core::harness::gradsuite::{gradcheck_all, planted_fault_error, TOLERANCE};
use inharmony_core::harness::{discrepancy_stats, dump_field, evaluate, infer, train, Model, TrainConfig};
use inharmony_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Inharmonious-region localization: data generation, training, evaluation, inference.
///
/// Any config key can also be given as a flag, e.g. `--epochs 5 --lambda-ddm 0`.
#[derive(Parser, Debug)]
#[command(name = "inharmony", version)]
struct Cli {
    /// Run seed (`data_seed` for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test splits into --out-dir (default: data_dir).
    GenData,
    /// Train a model; writes the log, checkpoint and final test metrics to --out-dir.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print `metric,value` CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Percentages of images whose code-space discrepancy grows under the color mapping.
    DiscrepancyStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict the region mask of one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask_out: PathBuf,
        #[arg(long)]
        retouched_out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Write the affine field and guidance map of one image to --out-dir.
    DumpField {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

/// Pulls `--<config key> value` pairs (dashes or underscores) out of the argument list.
/// A key flag with no value, like `--pooled-ap`, means `true`.
fn split_key_flags(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut keys = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let flag = a.strip_prefix("--").map(|f| f.replace('-', "_"));
        let (name, inline) = match &flag {
            Some(f) => match f.split_once('=') {
                Some((k, v)) => (k.to_string(), Some(v.to_string())),
                None => (f.clone(), None),
            },
            None => (String::new(), None),
        };
        let is_key = TrainConfig::KEYS.contains(&name.as_str()) && name != "seed" && name != "threads";
        if !is_key {
            rest.push(a);
            continue;
        }
        let value = inline.or_else(|| it.next_if(|n| !n.starts_with("--")));
        keys.push((name, value.unwrap_or_else(|| "true".into())));
    }
    (rest, keys)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn overrides(cli: &Cli, keys: &[(String, String)]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    out.extend(keys.iter().cloned());
    if let Some(s) = cli.seed {
        let key = if matches!(cli.command, Command::GenData) { "data_seed" } else { "seed" };
        out.push((key.into(), s.to_string()));
    }
    if let Some(t) = cli.threads {
        out.push(("threads".into(), t.to_string()));
    }
    Ok(out)
}

/// Defaults, then the config file, then flags.
fn fresh_config(cli: &Cli, ov: &[(String, String)]) -> Result<TrainConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for (k, v) in ov {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The checkpoint's stored config, then the config file, then flags.
fn checkpoint_config(cli: &Cli, ck: &Path, ov: &[(String, String)]) -> Result<TrainConfig, Error> {
    let mut cfg = Model::checkpoint_config(ck, &[])?;
    if let Some(p) = &cli.config {
        cfg.apply_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    }
    for (k, v) in ov {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, keys: &[(String, String)]) -> Result<(), Error> {
    let ov = overrides(cli, keys)?;
    let threads = match &cli.command {
        Command::Eval { checkpoint, .. }
        | Command::DiscrepancyStats { checkpoint, .. }
        | Command::Infer { checkpoint, .. }
        | Command::DumpField { checkpoint, .. } => checkpoint_config(cli, checkpoint, &ov)?.threads,
        _ => fresh_config(cli, &ov)?.threads,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    match &cli.command {
        Command::GenData => {
            let cfg = fresh_config(cli, &ov)?;
            let out = cli.out_dir.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let m = build_dataset(&cfg.dataset_config(), cfg.data_seed, &out)?;
            println!(
                "wrote {} train / {} test pairs to {}",
                m.count(Split::Train),
                m.count(Split::Test),
                out.display()
            );
        }
        Command::Train => {
            let cfg = fresh_config(cli, &ov)?;
            let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
            let res = train(&cfg, &out)?;
            println!("trained {} steps; checkpoint {}", res.steps, res.checkpoint.display());
            print!("{}", res.final_eval.to_table());
        }
        Command::Eval { checkpoint, csv } => {
            let cfg = checkpoint_config(cli, checkpoint, &ov)?;
            let r = evaluate(&cfg, checkpoint)?;
            print!("{}", if *csv { r.to_csv() } else { r.to_table() });
        }
        Command::DiscrepancyStats { checkpoint, split } => {
            let cfg = checkpoint_config(cli, checkpoint, &ov)?;
            let s = discrepancy_stats(&cfg, checkpoint, Split::parse(split)?)?;
            print!("{}", s.to_table());
        }
        Command::Infer {
            checkpoint,
            image,
            mask_out,
            retouched_out,
        } => {
            let cfg = checkpoint_config(cli, checkpoint, &ov)?;
            let r = infer(&cfg, checkpoint, image, mask_out, retouched_out.as_deref())?;
            println!("mask area fraction {:.6}", r.area_fraction);
        }
        Command::Gradcheck { seeds } => {
            let seeds: Vec<u64> = (0..*seeds).collect();
            let cases = gradcheck_all(&seeds)?;
            let mut failed = 0;
            for c in &cases {
                let ok = c.report.passes(TOLERANCE);
                failed += usize::from(!ok);
                println!(
                    "{:<20} seed {:<3} max_rel_err {:.3e}  {}",
                    c.op,
                    c.seed,
                    c.report.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            let planted = planted_fault_error(0)?;
            println!("planted fault        max_rel_err {planted:.3e}  {}", if planted > 0.3 { "caught" } else { "MISSED" });
            if failed > 0 || planted <= 0.3 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
        }
        Command::DumpField { checkpoint, image } => {
            let cfg = checkpoint_config(cli, checkpoint, &ov)?;
            let out = cli
                .out_dir
                .clone()
                .ok_or_else(|| Error::Config("dump-field needs --out-dir".into()))?;
            dump_field(&cfg, checkpoint, image, &out)?;
            println!("wrote field and guidance to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, keys) = split_key_flags(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &keys) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn key_flags_are_extracted() {
        let (rest, keys) = split_key_flags(strings(&[
            "bin", "train", "--epochs", "3", "--lambda-ddm=0", "--pooled-ap", "--seed", "9", "--out-dir", "x",
        ]));
        assert_eq!(rest, strings(&["bin", "train", "--seed", "9", "--out-dir", "x"]));
        assert_eq!(
            keys,
            vec![
                ("epochs".into(), "3".into()),
                ("lambda_ddm".into(), "0".into()),
                ("pooled_ap".into(), "true".into())
            ]
        );
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
    }
}
