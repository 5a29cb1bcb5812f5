//! Command-line front end for the toy text-to-speech pipeline.
//!
//! Every subcommand reads an optional key/value config file, applies
//! `--set key=value` overrides, and writes under `--run-dir` with the
//! resolved config echoed to `config.echo`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use e2etts::pipeline::{self, Config, Metric, RunDir};
use e2etts::trainer::Stage;

#[derive(Parser)]
#[command(name = "e2etts", version, about = "Joint AR + flow-matching toy TTS")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory for checkpoints, metrics and reports.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train through both curriculum stages.
    Train,
    /// Synthesise a held-out dialogue with the final checkpoint.
    Sample {
        #[arg(long, default_value_t = 3)]
        speakers: usize,
        #[arg(long, default_value_t = 6)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on held-out prompts, or score transcript files.
    Eval {
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// Score `--ref` against `--hyp` with cer, wer or cpwer.
        #[arg(long, requires_all = ["reference", "hyp"])]
        metric: Option<String>,
        #[arg(long = "ref", value_name = "FILE")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        hyp: Option<PathBuf>,
    },
    /// Harvest preference pairs from sampled candidates.
    ApoPairs {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Preference-optimise the final checkpoint on harvested pairs.
    DpoTrain,
    /// Finite-difference gradient checks; exits nonzero on failure.
    Gradcheck,
    /// Render samples from a training stream.
    GenData {
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    for kv in &common.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override {kv:?} is not KEY=VALUE");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let root = cli.common.run_dir.as_path();
    match cli.cmd {
        Cmd::Train => {
            let t0 = Instant::now();
            let (s, _) = pipeline::train(&cfg, root)?;
            println!(
                "steps\t{}\nloss\t{}\nl_am\t{}\nl_fm\t{}\nseconds\t{:.1}",
                s.steps,
                s.final_loss,
                s.final_l_am,
                s.final_l_fm,
                t0.elapsed().as_secs_f64()
            );
        }
        Cmd::Sample { speakers, turns, seed } => {
            print!("{}", pipeline::sample(&cfg, root, speakers, turns, seed)?);
        }
        Cmd::Eval { checkpoint, metric, reference, hyp } => match metric {
            Some(m) => {
                let metric: Metric = m.parse()?;
                let (r, h) = (reference.expect("required by clap"), hyp.expect("required by clap"));
                println!("{}", pipeline::score_files(metric, &read(&r)?, &read(&h)?)?);
            }
            None => print!("{}", pipeline::eval_model(&cfg, root, &checkpoint)?.tsv()),
        },
        Cmd::ApoPairs { n, temperature } => {
            let n = n.unwrap_or(cfg.apo_n);
            let temperature = temperature.unwrap_or(cfg.apo_temperature);
            let (pairs, rate) = pipeline::apo_pairs(&cfg, root, n, temperature)?;
            println!("pairs\t{pairs}\nyield\t{rate}");
        }
        Cmd::DpoTrain => {
            let losses = pipeline::dpo(&cfg, root)?;
            println!("batches\t{}", losses.len());
            if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
                println!("first_loss\t{a}\nlast_loss\t{b}");
            }
        }
        Cmd::Gradcheck => {
            let run = RunDir::create(root)?;
            run.echo_config(&cfg)?;
            let checks = pipeline::gradcheck(&cfg)?;
            let table = pipeline::render_gradcheck(&checks);
            fs::write(run.report("gradcheck.tsv"), &table)?;
            print!("{table}");
            return Ok(checks.iter().all(|c| c.report.passed()));
        }
        Cmd::GenData { stage, n } => {
            let stage = if stage == 1 { Stage::Short } else { Stage::Long };
            let hist = pipeline::gen_data(&cfg, root, stage, n)?;
            println!("speakers\tcount");
            for (k, c) in hist.iter().enumerate() {
                println!("{}\t{c}", k + 1);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
