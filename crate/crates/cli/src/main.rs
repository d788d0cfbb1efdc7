//! `dlm-mia`: build synthetic worlds, run membership attacks, compute metrics
//! and diagnostics.
//!
//! Exit codes: 0 on success, 2 when some samples failed, 1 on any other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};

use dlm_mia::attacks::describe_defaults;
use dlm_mia::eval::diagnostics::{delta_pools, CalibrationReport, Diagnostics, DiagnosticsConfig};
use dlm_mia::eval::runner::{
    attack_order, bytes_digest, format_table, reports_for, set_dotted, write_metrics, Experiment, ExperimentConfig,
};
use dlm_mia::io::{read_scores, write_samples, write_shot_pools};
use dlm_mia::oracle::remote::{RemoteConfig, RemoteOracle};
use dlm_mia::oracle::synthetic::build_synthetic_world;
use dlm_mia::oracle::Backend;
use dlm_mia::{LossQuery, ModelRole, Oracle, SeedSpec};

#[derive(Parser)]
#[command(name = "dlm-mia", version, about = "Membership-inference auditing for masked diffusion language models")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic world's samples, shots, digest and calibration report.
    SynthWorld {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        diag: DiagnosticsArgs,
        /// Output directory.
        #[arg(long, default_value = "world")]
        out: PathBuf,
    },
    /// Score samples with the selected attacks and write scores, metrics and ROC files.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics and ROC files from a scores CSV.
    Metrics {
        /// Scores file with header sample_id,attack,score,label.
        scores: PathBuf,
        /// Output directory; defaults to the directory of the scores file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Token-level loss-difference statistics for members and non-members.
    Diagnose {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        diag: DiagnosticsArgs,
        #[arg(long, default_value = "diagnostics")]
        out: PathBuf,
    },
    /// Check that a loss server answers the wire protocol.
    ServeCheck {
        #[arg(long, env = "DLM_MIA_URL")]
        url: String,
        /// Separate server for the reference model.
        #[arg(long)]
        reference_url: Option<String>,
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON). Without it, the calibrated synthetic world is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. attacks.sama.schedule.steps=8 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for all randomness [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["synthetic", "remote"])]
    oracle: Option<String>,
    /// Loss server URL for the remote oracle.
    #[arg(long, env = "DLM_MIA_URL")]
    url: Option<String>,
    /// Comma-separated attack names.
    #[arg(long, value_delimiter = ',')]
    attacks: Vec<String>,
    /// Samples file (newline-delimited JSON) instead of the synthetic samples.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Shot-pool file for the context attacks.
    #[arg(long)]
    shots: Option<PathBuf>,
    /// Use the null synthetic world (no membership signal).
    #[arg(long)]
    null_world: bool,
}

#[derive(Args)]
struct DiagnosticsArgs {
    /// Fraction of positions masked per configuration.
    #[arg(long)]
    density: Option<f64>,
    /// Mask configurations drawn per sample.
    #[arg(long)]
    draws: Option<usize>,
}

impl DiagnosticsArgs {
    fn config(&self) -> Result<DiagnosticsConfig> {
        let mut cfg = DiagnosticsConfig::default();
        if let Some(d) = self.density {
            cfg.density = d;
        }
        if let Some(n) = self.draws {
            cfg.draws = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut v = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => json!({"oracle": {"backend": "synthetic"}, "samples": {"synthetic": true}}),
        };
        if let Some(backend) = &self.oracle {
            set_dotted(&mut v, "oracle.backend", &json!(backend).to_string())?;
        }
        if let Some(url) = &self.url {
            set_dotted(&mut v, "oracle.url", &json!(url).to_string())?;
        }
        if self.null_world {
            set_dotted(&mut v, "oracle.preset", "\"null\"")?;
        }
        if let Some(path) = &self.samples {
            v["samples"] = json!({"path": path});
        }
        if let Some(path) = &self.shots {
            set_dotted(&mut v, "samples.shots", &json!(path).to_string())?;
        }
        if !self.attacks.is_empty() {
            v["attacks"] = json!(self.attacks);
        }
        if let Some(seed) = self.seed {
            v["seed"] = json!(seed);
        }
        if let Some(n) = self.workers {
            v["workers"] = json!(n);
        }
        for o in &self.overrides {
            let (key, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
            set_dotted(&mut v, key.trim(), raw.trim())?;
        }
        Ok(ExperimentConfig::from_value(v)?)
    }
}

fn write_json(path: &Path, value: Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_diagnostics(d: &Diagnostics) {
    for (name, s) in [("member", &d.member), ("non-member", &d.nonmember)] {
        println!(
            "{name:>10}: n {} mean {} sd {} skewness {} excess kurtosis {}",
            s.count,
            fmt_opt(s.mean),
            fmt_opt(s.sd),
            fmt_opt(s.skewness),
            fmt_opt(s.excess_kurtosis)
        );
    }
}

fn synth_world(exp: &ExperimentArgs, diag: &DiagnosticsArgs, out: &Path) -> Result<u8> {
    let config = exp.resolve()?;
    if config.oracle.backend != Backend::Synthetic {
        bail!("synth-world needs the synthetic oracle");
    }
    let world_cfg = config.oracle.world_config()?;
    let digest = world_cfg.digest(config.seed);
    println!("world digest: {digest}");
    let world = build_synthetic_world(&world_cfg, config.seed)?;
    create_dir(out)?;
    write_samples(&out.join("samples.ndjson"), &world.samples)?;
    write_shot_pools(
        &out.join("shots.ndjson"),
        &dlm_mia::baselines::ShotPools {
            member: world.member_shots.clone(),
            nonmember: world.nonmember_shots.clone(),
        },
    )?;
    write_json(
        &out.join("world.json"),
        json!({"digest": digest, "seed": config.seed, "config": world_cfg}),
    )?;
    let report = CalibrationReport::measure(&world, &diag.config()?, &SeedSpec::new(config.seed))?;
    write_json(&out.join("calibration.json"), serde_json::to_value(&report)?)?;
    print_diagnostics(&report.diagnostics);
    let t = &report.targets;
    println!(
        "targets: member mean {} sd {} skewness {} excess kurtosis {}; non-member mean {}",
        t.member_mean, t.member_sd, t.member_skewness, t.member_excess_kurtosis, t.nonmember_mean
    );
    println!("wrote {} samples to {}", world.samples.len(), out.display());
    Ok(0)
}

fn run(exp: &ExperimentArgs, out: Option<&Path>) -> Result<u8> {
    let mut config = exp.resolve()?;
    if let Some(dir) = out {
        config.output_dir = dir.to_path_buf();
    }
    let dir = config.output_dir.clone();
    let experiment = Experiment::prepare(config)?;
    println!("config digest: {}", experiment.digest);
    let outcome = experiment.run()?;
    outcome.write(&dir)?;
    write_json(&dir.join("config.json"), experiment.config.canonical()?)?;
    print!("{}", format_table(&outcome.reports));
    println!("wrote {} score rows to {}", outcome.scores.len(), dir.display());
    if outcome.is_complete() {
        Ok(0)
    } else {
        eprintln!("{} sample/attack pairs failed; see failures.csv", outcome.failures.len());
        Ok(2)
    }
}

fn metrics(scores_path: &Path, out: Option<&Path>, seed: u64) -> Result<u8> {
    let bytes = std::fs::read(scores_path).with_context(|| format!("reading {}", scores_path.display()))?;
    let digest = bytes_digest(&bytes);
    println!("scores digest: {digest}");
    let scores = read_scores(scores_path)?;
    let names = attack_order(&scores);
    let reports = reports_for(&scores, &names, &[], &digest, seed)?;
    if reports.is_empty() {
        bail!("{}: no attack has both member and non-member scores", scores_path.display());
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => scores_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    write_metrics(&dir, &scores, &reports)?;
    print!("{}", format_table(&reports));
    Ok(0)
}

fn diagnose(exp: &ExperimentArgs, diag: &DiagnosticsArgs, out: &Path) -> Result<u8> {
    let config = exp.resolve()?;
    let cfg = diag.config()?;
    let experiment = Experiment::prepare(config)?;
    println!("config digest: {}", experiment.digest);
    let seeds = SeedSpec::new(experiment.config.seed);
    let pools = delta_pools(&experiment.samples, experiment.oracle.as_ref(), &cfg, &seeds)?;
    let d = Diagnostics::from_pools(&pools, &cfg);
    create_dir(out)?;
    write_json(&out.join("diagnostics.json"), serde_json::to_value(&d)?)?;
    print_diagnostics(&d);
    println!("configuration sd {} member margin {}", fmt_opt(d.configuration_sd), fmt_opt(d.member_margin));
    Ok(0)
}

fn serve_check(url: &str, reference_url: Option<&str>, timeout: f64) -> Result<u8> {
    let config = RemoteConfig {
        reference_url: reference_url.map(str::to_string),
        timeout_secs: timeout,
        ..RemoteConfig::new(url)
    };
    println!("config digest: {}", bytes_digest(&serde_json::to_vec(&config)?));
    let oracle = RemoteOracle::new(config)?;
    let info = oracle.info()?;
    println!(
        "info: vocab {} mask token {} max length {} models {:?}",
        info.vocab_size, info.mask_token_id, info.max_sequence_length, info.models
    );
    let tokens = oracle.tokenize("membership inference check")?;
    println!("tokenize: {} tokens", tokens.len());
    let masked: Vec<usize> = (0..tokens.len()).step_by(2).collect();
    let query = LossQuery::new(tokens.clone(), masked.clone(), masked);
    for role in [ModelRole::Target, ModelRole::Reference] {
        let first = oracle.position_losses(&query, role)?;
        let again = oracle.position_losses_batch(std::slice::from_ref(&query), role)?;
        if first.losses().iter().any(|l| !l.is_finite()) {
            bail!("{} returned non-finite losses", role.as_str());
        }
        if again.first().map(|v| v.losses()) != Some(first.losses()) {
            eprintln!("warning: {} losses differ between repeated queries", role.as_str());
        }
        println!("{}: {} losses, mean {:.4}", role.as_str(), first.losses().len(), first.mean().unwrap_or(f64::NAN));
    }
    let empty = oracle.position_losses(&LossQuery::new(tokens, vec![0], vec![]), ModelRole::Target)?;
    if !empty.losses().is_empty() {
        bail!("empty evaluation set returned losses");
    }
    println!("ok");
    Ok(0)
}

fn main() -> ExitCode {
    let attacks = format!("Attacks and defaults:\n{}", describe_defaults());
    let command = Cli::command()
        .after_help(attacks.clone())
        .mut_subcommand("run", |c| c.after_help(attacks));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::SynthWorld { exp, diag, out } => synth_world(exp, diag, out),
        Command::Run { exp, out } => run(exp, out.as_deref()),
        Command::Metrics { scores, out, seed } => metrics(scores, out.as_deref(), *seed),
        Command::Diagnose { exp, diag, out } => diagnose(exp, diag, out),
        Command::ServeCheck {
            url,
            reference_url,
            timeout,
        } => serve_check(url, reference_url.as_deref(), *timeout),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
