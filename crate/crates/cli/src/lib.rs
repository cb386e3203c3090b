pub mod config;
pub mod error;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use advpit::checks::{self, Suite};
use advpit::data::{self, SeparationExample};
use advpit::metrics::{self, EvalReport};
use advpit::train::{self, TrainConfig};
use advpit::{dsp, models::Separator};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::{Preset, RunConfig};
use error::{io_err, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "advpit", version, about = "Adversarial PIT sound separation on synthetic mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// JSON run config; defaults to the chosen preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Override one config value, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test splits of synthetic mixtures.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Master seed, overriding `gen.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a separator; writes checkpoints and a JSON-lines log.
    Train {
        /// Defaults to the `config.json` stored by `gen` in the data directory.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split and write `report.json`.
    Eval {
        #[arg(long, required_unless_present = "bypass")]
        checkpoint: Option<PathBuf>,
        /// A split directory, or a dataset root combined with `--split`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        mixture_consistency: Switch,
        /// Write spectrogram grids for the first N mixes.
        #[arg(long, default_value_t = 0)]
        spectrograms: usize,
        /// Score the debug estimator that returns the mix in every slot.
        #[arg(long, conflicts_with = "checkpoint")]
        bypass: bool,
        #[arg(long, default_value_t = 16)]
        chunk: usize,
    },
    /// Separate one WAV file into K estimate files.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical oracle suites.
    Check {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for `report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a resolved config.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Human-readable progress on stdout, silenced by `ADVPIT_QUIET=1`.
fn say(msg: impl AsRef<str>) {
    if std::env::var("ADVPIT_QUIET").map_or(true, |v| v.is_empty() || v == "0") {
        println!("{}", msg.as_ref());
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(io_err(p))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(io_err(p))
}

fn fmt_db(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.2} dB"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { cfg, out, seed } => cmd_gen(&cfg, &out, seed),
        Command::Train { cfg, data, out } => cmd_train(&cfg, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            mixture_consistency,
            spectrograms,
            bypass,
            chunk,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            data,
            split,
            out,
            mixture_consistency: mixture_consistency == Switch::On,
            spectrograms,
            bypass,
            chunk,
        }),
        Command::Separate { checkpoint, input, out } => cmd_separate(&checkpoint, &input, &out),
        Command::Check { suite, seed, out } => cmd_check(suite, seed, out.as_deref()),
        Command::Config { cfg } => {
            let c = RunConfig::resolve(cfg.config.as_deref(), cfg.preset, &cfg.overrides)?;
            print!("{}", c.to_json());
            Ok(())
        }
    }
}

pub fn cmd_gen(args: &ConfigArgs, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut overrides = args.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("gen.seed={s}"));
    }
    let cfg = RunConfig::resolve(args.config.as_deref(), args.preset, &overrides)?;
    create_dir(out)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let s = cfg.splits;
    data::make_splits(&cfg.gen, out, [s.train, s.val, s.test])?;
    say(format!(
        "wrote {} / {} / {} examples (seed {}) to {}",
        s.train,
        s.val,
        s.test,
        cfg.gen.seed,
        out.display()
    ));
    Ok(())
}

fn load_examples(dir: &Path, k: usize) -> Result<Vec<SeparationExample>> {
    Ok(data::load_split(dir, k)?)
}

fn check_data_rate(dir: &Path, stft: &dsp::StftConfig) -> Result<()> {
    if let Some(e) = data::read_manifest(&dir.join("manifest.jsonl"))?.first() {
        config::check_rate(stft, e.sample_rate)?;
    }
    Ok(())
}

pub fn cmd_train(args: &ConfigArgs, data_dir: &Path, out: &Path) -> Result<()> {
    let stored = data_dir.join("config.json");
    let path = args.config.clone().or_else(|| stored.exists().then_some(stored));
    let cfg = RunConfig::resolve(path.as_deref(), args.preset, &args.overrides)?;
    let t: &TrainConfig = &cfg.train;
    let k = t.separator.k;
    let (train_dir, val_dir) = (data_dir.join("train"), data_dir.join("val"));
    check_data_rate(&train_dir, &t.separator.stft)?;
    let train_set = load_examples(&train_dir, k)?;
    let val_set = load_examples(&val_dir, k)?;
    create_dir(out)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    say(format!(
        "training K={k} on {} examples ({} val) for {} steps",
        train_set.len(),
        val_set.len(),
        t.max_steps
    ));
    let mut progress = |line: &str| {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else {
            return;
        };
        let step = v["step"].as_u64().unwrap_or(0);
        match v["event"].as_str() {
            Some("val") => say(format!(
                "step {step:>6}  val SI-SNR_I {}  SI-SNR_S {}",
                fmt_db(v["si_snr_i"].as_f64()),
                fmt_db(v["si_snr_s"].as_f64())
            )),
            Some("step") if step % 100 == 0 => say(format!(
                "step {step:>6}  separator loss {:.4}",
                v["total_sep"].as_f64().unwrap_or(f64::NAN)
            )),
            _ => {}
        }
    };
    let outcome = train::fit_with(t, &train_set, &val_set, Some(out), &mut progress)?;
    say(format!(
        "best validation score {:.2} dB at step {}; checkpoints in {}",
        outcome.best_score,
        outcome.best.step,
        out.display()
    ));
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub mixture_consistency: bool,
    pub spectrograms: usize,
    pub bypass: bool,
    pub chunk: usize,
}

fn split_dir(data: &Path, split: &str) -> PathBuf {
    if data.join("manifest.jsonl").exists() {
        data.to_path_buf()
    } else {
        data.join(split)
    }
}

fn load_separator(path: &Path) -> Result<(Separator, TrainConfig)> {
    let (state, cfg) = train::load_checkpoint(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((state.separator, cfg))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.chunk == 0 {
        return Err(CliError::Usage("--chunk must be at least 1".into()));
    }
    let dir = split_dir(&a.data, &a.split);
    let model = match &a.checkpoint {
        Some(p) if !a.bypass => Some(load_separator(p)?),
        _ => None,
    };
    let examples = match &model {
        Some((sep, _)) => {
            check_data_rate(&dir, &sep.cfg.stft)?;
            load_examples(&dir, sep.cfg.k)?
        }
        None => {
            let k = data::read_manifest(&dir.join("manifest.jsonl"))?
                .iter()
                .map(|e| e.sources.len())
                .max()
                .unwrap_or(1);
            load_examples(&dir, k)?
        }
    };
    let (report, estimates): (EvalReport, Box<dyn Fn(&SeparationExample) -> Result<Vec<Vec<f64>>>>) = match &model {
        Some((sep, _)) => {
            let report = train::evaluate(sep, &examples, a.mixture_consistency, a.chunk)?;
            let mc = a.mixture_consistency;
            let est = move |ex: &SeparationExample| -> Result<Vec<Vec<f64>>> {
                let e = sep.separate(&[&ex.mix])?.remove(0);
                Ok(if mc { dsp::mixture_consistency(&e, &ex.mix)? } else { e })
            };
            (report, Box::new(est))
        }
        None => (
            metrics::bypass_report(&examples)?,
            Box::new(|ex: &SeparationExample| Ok(vec![ex.mix.clone(); ex.sources.len()])),
        ),
    };
    create_dir(&a.out)?;
    let resolved = json!({
        "checkpoint": a.checkpoint,
        "data": dir,
        "estimator": if model.is_some() { "separator" } else { "bypass" },
        "mixture_consistency": a.mixture_consistency && model.is_some(),
        "spectrograms": a.spectrograms,
        "chunk": a.chunk,
        "train": model.as_ref().map(|(_, c)| c),
    });
    write_text(
        &a.out.join("config.json"),
        &(serde_json::to_string_pretty(&resolved).expect("config serializes") + "\n"),
    )?;
    write_text(
        &a.out.join("report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    if a.spectrograms > 0 {
        let png_dir = a.out.join("spectrograms");
        create_dir(&png_dir)?;
        let stft = model
            .as_ref()
            .map_or_else(dsp::StftConfig::desk, |(s, _)| s.cfg.stft.clone());
        for ex in examples.iter().take(a.spectrograms) {
            let img = render::spectrogram_grid(&ex.mix, &ex.sources, &estimates(ex)?, &stft)?;
            render::save_png(&img, &png_dir.join(format!("{}.png", ex.id)))?;
        }
    }
    say(format!(
        "{} mixes ({} single-source, {} multi-source): SI-SNR_I {}, SI-SNR_S {}",
        report.n_mixtures,
        report.n_single_source,
        report.n_multi_source,
        fmt_db(report.si_snr_i),
        fmt_db(report.si_snr_s)
    ));
    Ok(())
}

pub fn cmd_separate(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (sep, cfg) = load_separator(checkpoint)?;
    let (mix, rate) = data::read_wav(input)?;
    config::check_rate(&sep.cfg.stft, rate)?;
    if mix.len() < sep.cfg.min_len() {
        return Err(CliError::Usage(format!(
            "{} has {} samples; at least {} are needed",
            input.display(),
            mix.len(),
            sep.cfg.min_len()
        )));
    }
    let est = sep.separate(&[&mix])?.remove(0);
    let est = dsp::mixture_consistency(&est, &mix)?;
    create_dir(out)?;
    let resolved = json!({"checkpoint": checkpoint, "input": input, "mixture_consistency": true, "train": cfg});
    write_text(
        &out.join("config.json"),
        &(serde_json::to_string_pretty(&resolved).expect("config serializes") + "\n"),
    )?;
    for (k, e) in est.iter().enumerate() {
        data::write_wav(&out.join(format!("est_{k}.wav")), e, rate)?;
    }
    say(format!("wrote {} estimates to {}", est.len(), out.display()));
    Ok(())
}

pub fn cmd_check(suite: Suite, seed: u64, out: Option<&Path>) -> Result<()> {
    let results = checks::run(suite, seed);
    for r in &results {
        say(format!(
            "{} {}/{}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.name,
            r.detail
        ));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(
            &dir.join("config.json"),
            &(json!({"suite": suite.to_string(), "seed": seed}).to_string() + "\n"),
        )?;
        write_text(
            &dir.join("report.json"),
            &(serde_json::to_string_pretty(&results).expect("results serialize") + "\n"),
        )?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: results.len(),
        });
    }
    say(format!("all {} checks passed", results.len()));
    Ok(())
}
