use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bharnet::data::{load_dataset, save_dataset, synth_generate, Modality, SynthSpec};
use bharnet::harness::metrics::trace;
use bharnet::harness::{count_run_cost, evaluate, grad_check, train, Inference, RunConfig, TARGETS};
use bharnet::model::Checkpoint;
use bharnet::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bharnet", version, about = "Body and hand dual-stream skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test split.
    Synth {
        /// SynthSpec JSON; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory; receives train.json and test.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured variant and write checkpoint.json and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "joint")]
        streams: Vec<String>,
        /// Also write the metrics as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Analytic FLOPs and parameters per sample.
    Cost {
        #[arg(long)]
        config: PathBuf,
        /// Count only the expertized branches of the four-branch model.
        #[arg(long)]
        expert_only: bool,
    },
    /// Finite-difference gradient check of one registered target (or `all`).
    Gradcheck {
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Confusion matrix of the fused prediction, restricted to some classes.
    Confmat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Class indices; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "joint")]
        streams: Vec<String>,
    },
}

fn parse_streams(names: &[String]) -> Result<Vec<Modality>> {
    names.iter().map(|s| Modality::parse(s.trim())).collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io_at(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io_at(&p, e))?)?,
                None => SynthSpec::default(),
            };
            let split = synth_generate(&spec, seed)?;
            fs::create_dir_all(&out).map_err(|e| Error::io_at(&out, e))?;
            save_dataset(&split.train, out.join("train.json"))?;
            save_dataset(&split.test, out.join("test.json"))?;
            println!("train {} samples, test {} samples, {} classes", split.train.len(), split.test.len(), spec.num_classes);
        }
        Command::Train { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io_at(&out_dir, e))?;
            outcome.checkpoint.save(out_dir.join("checkpoint.json"))?;
            let report = serde_json::json!({ "metrics": outcome.metrics, "history": outcome.history });
            write(&out_dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            for h in &outcome.history {
                let acc = h.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "epoch {} {:?} {:?} lr={:.5} loss={:.6} test_acc={acc}",
                    h.epoch, h.stream, h.phase, h.learning_rate, h.train_loss
                );
            }
            print!("{}", outcome.metrics.report());
        }
        Command::Eval { checkpoint, data, streams, report } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let metrics = evaluate(&ck, &load_dataset(&data)?, &parse_streams(&streams)?)?;
            if let Some(p) = report {
                write(&p, &serde_json::to_string_pretty(&metrics)?)?;
            }
            print!("{}", metrics.report());
        }
        Command::Cost { config, expert_only } => {
            let cfg = RunConfig::load(&config)?;
            let inference = if expert_only { Inference::ExpertOnly } else { Inference::Full };
            print!("{}", count_run_cost(&cfg, inference)?.report());
        }
        Command::Gradcheck { target, tol, seed } => {
            let targets: Vec<&str> = if target == "all" { TARGETS.to_vec() } else { vec![target.as_str()] };
            let mut failed = Vec::new();
            for t in targets {
                let r = grad_check(t, seed, tol)?;
                print!("{}", r.report());
                if !r.passed {
                    failed.push(t.to_string());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Confmat { checkpoint, data, classes, streams } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let metrics = evaluate(&ck, &ds, &parse_streams(&streams)?)?;
            let k = ds.num_classes;
            let classes = if classes.is_empty() { (0..k).collect() } else { classes };
            if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
                return Err(Error::validation(format!("class {bad} out of range for {k} classes")));
            }
            let full = &metrics.confusion;
            println!("true\\pred {}", classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
            for &r in &classes {
                let row: Vec<String> = classes.iter().map(|&c| full[r][c].to_string()).collect();
                println!("{r} {}", row.join(" "));
            }
            let total: usize = full.iter().flatten().sum();
            println!("accuracy {:.4} ({}/{})", metrics.accuracy, trace(full), total);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let text = e.to_string().replace('\n', " ");
            let msg = text.strip_prefix(&format!("{category}: ")).unwrap_or(&text);
            eprintln!("{category}: {msg}");
            ExitCode::FAILURE
        }
    }
}
