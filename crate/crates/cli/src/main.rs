use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsr_core::sim::{
    evaluate, gen_dataset, lattice_gradcheck, load_checkpoint_as, load_dataset, metrics_csv,
    model_gradcheck, oracle_check, save_checkpoint, save_dataset, Checkpoint, Domain, Experiment,
    ExperimentConfig, CSV_HEADER,
};
use fedsr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedsr",
    version,
    about = "Federated self-training simulator for transducer models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as plain-text records.
    GenData {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value = "source")]
        domain: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the source domain and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        exp: ExpArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the per-step training loss.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Run federated adaptation from a checkpoint and write per-round metrics.
    Adapt {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the final weights and server round state here.
        #[arg(long)]
        save: Option<PathBuf>,
        /// Train centrally on ground-truth target labels instead.
        #[arg(long)]
        centralized: bool,
    },
    /// Token error rate and mean loss of a checkpoint.
    Eval {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the experiment's source and target eval sets.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check losses and Viterbi alignments against exhaustive enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone, Default)]
struct ExpArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (`device` or `video`), applied before other settings.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    local_updates: Option<usize>,
    #[arg(long)]
    block_momentum: Option<f64>,
    /// all|encoder|attention|keyvalue|predictor|joiner|bias
    #[arg(long)]
    mask: Option<String>,
    /// full|ar|sr
    #[arg(long)]
    loss: Option<String>,
    /// Band half-widths `L,R` in frames.
    #[arg(long)]
    band: Option<String>,
    /// Confidence threshold, or `off`.
    #[arg(long, allow_hyphen_values = true)]
    filter_threshold: Option<String>,
    /// true|pseudo
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Worker threads for device rounds.
    #[arg(long)]
    workers: Option<usize>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.set("preset", p)?;
        }
        let mut overrides: Vec<(&str, String)> = Vec::new();
        let mut add = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k, v));
            }
        };
        add("seed", self.seed.map(|v| v.to_string()));
        add("rounds", self.rounds.map(|v| v.to_string()));
        add("devices", self.devices.map(|v| v.to_string()));
        add("local_updates", self.local_updates.map(|v| v.to_string()));
        add("block_momentum", self.block_momentum.map(|v| v.to_string()));
        add("mask", self.mask.clone());
        add("loss", self.loss.clone());
        add("band", self.band.clone());
        add("filter_threshold", self.filter_threshold.clone());
        add("labels", self.labels.clone());
        add("learning_rate", self.learning_rate.map(|v| v.to_string()));
        add("workers", self.workers.map(|v| v.to_string()));
        for (k, v) in overrides {
            cfg.set(k, &v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set `{kv}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            exp,
            domain,
            count,
            out,
        } => {
            let cfg = exp.resolve()?;
            let domain: Domain = domain.parse()?;
            let e = Experiment::new(cfg.clone())?;
            let d = match domain {
                Domain::Source => &e.source,
                Domain::Target => &e.target,
            };
            save_dataset(&out, &gen_dataset(d, count.max(1), cfg.seed))?;
            println!(
                "wrote {count} {} utterances to {}",
                domain.name(),
                out.display()
            );
        }
        Command::Pretrain {
            exp,
            out,
            loss_curve,
        } => {
            let e = Experiment::new(exp.resolve()?)?;
            let pre = e.pretrain()?;
            save_checkpoint(
                &out,
                &Checkpoint {
                    params: pre.params.clone(),
                    server: None,
                },
            )?;
            if let Some(path) = loss_curve {
                let mut s = String::from("step,loss\n");
                for (i, l) in pre.losses.iter().enumerate() {
                    s.push_str(&format!("{i},{l:.6}\n"));
                }
                std::fs::write(path, s)?;
            }
            let (target, source) = e.evaluate(&pre.params)?;
            println!(
                "pretrained steps={} source_ter={:.6} target_ter={:.6} source_loss={:.6}",
                pre.losses.len(),
                source.ter,
                target.ter,
                source.mean_loss
            );
        }
        Command::Adapt {
            exp,
            checkpoint,
            out,
            save,
            centralized,
        } => {
            let cfg = exp.resolve()?;
            let e = Experiment::new(cfg.clone())?;
            let w0 = load_checkpoint_as(&checkpoint, &e.model_config())?.params;
            if centralized {
                let w = e.supervised_baseline(&w0)?;
                let (target, source) = e.evaluate(&w)?;
                let text = format!(
                    "{CSV_HEADER}\n{},{:.6},{:.6},,,\n",
                    cfg.rounds, target.ter, source.ter
                );
                write_out(out.as_ref(), &text)?;
                if let Some(path) = save {
                    save_checkpoint(
                        &path,
                        &Checkpoint {
                            params: w,
                            server: None,
                        },
                    )?;
                }
            } else {
                let result = e.adapt(&w0)?;
                write_out(out.as_ref(), &metrics_csv(&result.rows))?;
                if let Some(path) = save {
                    save_checkpoint(&path, &Checkpoint::from_server(&result.state))?;
                }
            }
        }
        Command::Eval {
            exp,
            checkpoint,
            data,
        } => {
            let cfg = exp.resolve()?;
            let e = Experiment::new(cfg.clone())?;
            let params = load_checkpoint_as(&checkpoint, &e.model_config())?.params;
            match data {
                Some(path) => {
                    let set = load_dataset(&path, cfg.model.blank_id)?;
                    let r = evaluate(&params, &set)?;
                    println!(
                        "ter={:.6} mean_loss={:.6} utterances={}",
                        r.ter,
                        r.mean_loss,
                        set.len()
                    );
                }
                None => {
                    let (target, source) = e.evaluate(&params)?;
                    println!(
                        "source_ter={:.6} source_loss={:.6} target_ter={:.6} target_loss={:.6}",
                        source.ter, source.mean_loss, target.ter, target.mean_loss
                    );
                }
            }
        }
        Command::Gradcheck { instances, seed } => {
            let lat = lattice_gradcheck(instances, seed)?;
            let model = model_gradcheck(seed)?;
            println!(
                "instances={} full_rel={:.3e} restricted_rel={:.3e} model_rel={:.3e}",
                lat.instances, lat.max_full_rel, lat.max_restricted_rel, model
            );
            if lat.max_full_rel >= 1e-5 || lat.max_restricted_rel >= 1e-5 || model >= 1e-4 {
                return Err(Error::Config("gradient check failed".into()));
            }
        }
        Command::OracleCheck { instances, seed } => {
            let r = oracle_check(instances, seed)?;
            println!(
                "instances={} max_loss_err={:.3e} max_viterbi_err={:.3e} viterbi_below_total={}",
                r.instances, r.max_loss_err, r.max_viterbi_err, r.viterbi_below_total
            );
            if r.max_loss_err >= 1e-10 || r.max_viterbi_err != 0.0 || !r.viterbi_below_total {
                return Err(Error::Config("oracle check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
