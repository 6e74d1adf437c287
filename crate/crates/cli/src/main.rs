use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use steermoe::checkpoint::{
    bridge_checkpoint, decoder_checkpoint, encoder_checkpoint, file_sha256, load_bridge, load_decoder, load_encoder,
    version_string, Checkpoint,
};
use steermoe::config::{build_corpora, text_corpora, RunConfig};
use steermoe::data::{read_corpus, write_corpus, Utterance, Vocabulary};
use steermoe::decoder::DecoderWeights;
use steermoe::encoder::EncoderWeights;
use steermoe::eval::{ablation_csv, evaluate, init_bridge, run_ablation, score, AblationSetup, Variant};
use steermoe::numerics::ParamSet;
use steermoe::steering::{router_stats, Bridge};
use steermoe::training::{align_train, pretrain_decoder, pretrain_encoder};

/// Layer-wise MoE steering between a frozen toy encoder and a frozen toy decoder.
///
/// Every subcommand reads the run configuration (`--config`, then `--set`
/// overrides) and works inside `--run-dir`:
///
///   data/         train/dev/test corpora (JSON lines) and vocab.txt
///   checkpoints/  encoder.json, decoder.json, bridge.json
///   reports/      evaluation, ablation and probe reports
///   manifest.json every file written so far with its SHA-256
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 numerical
/// failure, 3 evaluation WER above `eval.wer_threshold`.
#[derive(Parser, Debug)]
#[command(name = "steermoe", version, verbatim_doc_comment)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set optim.max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long, default_value = "run", global = true)]
    run_dir: PathBuf,

    /// Worker threads for per-utterance work. Results do not depend on it.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration.
    ShowConfig,
    /// Generate the synthetic corpus and split it into train/dev/test.
    GenData,
    /// Pretrain and freeze one backbone.
    Pretrain {
        #[arg(value_enum)]
        which: Backbone,
    },
    /// Train the bridge with both backbones frozen.
    Align {
        #[arg(long, value_enum, default_value_t = BridgeKind::Moe)]
        variant: BridgeKind,
    },
    /// Greedy-decode a split and score it.
    Eval {
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Bridge checkpoint; defaults to the run's checkpoints/bridge.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the reference transcripts against themselves.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and test every variant of the ablation plan.
    Ablate,
    /// Router usage and gate entropy per layer.
    Probe {
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Probe a freshly initialized bridge instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backbone {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BridgeKind {
    Moe,
    Static,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

struct Run {
    cfg: RunConfig,
    overrides: Vec<String>,
    dir: PathBuf,
    threads: usize,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Provenance attached to every output.
    fn provenance(&self) -> anyhow::Result<BTreeMap<String, Value>> {
        let mut m = BTreeMap::new();
        m.insert("config".into(), serde_json::to_value(&self.cfg)?);
        m.insert("overrides".into(), json!(self.overrides));
        m.insert("version".into(), json!(version_string()));
        Ok(m)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json(&self, rel: &str, value: &Value) -> anyhow::Result<()> {
        self.write(rel, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
    }

    fn record(&self, files: &[&str]) -> anyhow::Result<()> {
        let path = self.path("manifest.json");
        let mut manifest: BTreeMap<String, String> = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).context("reading manifest.json")?,
            Err(_) => BTreeMap::new(),
        };
        for rel in files {
            manifest.insert(rel.to_string(), file_sha256(&self.path(rel))?);
        }
        self.write("config.json", self.cfg.to_json()?.as_bytes())?;
        manifest.insert("config.json".into(), file_sha256(&self.path("config.json"))?);
        self.write_json("manifest.json", &serde_json::to_value(&manifest)?)
    }

    fn split(&self, split: Split) -> anyhow::Result<Vec<Utterance>> {
        let path = self.path(&format!("data/{}.jsonl", split.name()));
        if !path.exists() {
            bail!("corpus {} not found; run gen-data first", path.display());
        }
        let (_, utts) = read_corpus(&path)?;
        Ok(utts)
    }

    fn vocab(&self) -> anyhow::Result<Vocabulary> {
        Ok(self.cfg.synth.vocabulary()?)
    }

    fn encoder(&self) -> anyhow::Result<EncoderWeights> {
        let path = self.path("checkpoints/encoder.json");
        Ok(load_encoder(&Checkpoint::load(&path)?)?)
    }

    fn decoder(&self) -> anyhow::Result<DecoderWeights> {
        let path = self.path("checkpoints/decoder.json");
        Ok(load_decoder(&Checkpoint::load(&path)?)?)
    }

    fn bridge(&self, checkpoint: Option<&Path>) -> anyhow::Result<Bridge> {
        let default = self.path("checkpoints/bridge.json");
        Ok(load_bridge(&Checkpoint::load(checkpoint.unwrap_or(&default))?)?)
    }

    fn backbone_file_hashes(&self) -> anyhow::Result<(String, String)> {
        Ok((
            file_sha256(&self.path("checkpoints/encoder.json"))?,
            file_sha256(&self.path("checkpoints/decoder.json"))?,
        ))
    }
}

enum Outcome {
    Done,
    ThresholdFailed,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(run: &Run) -> anyhow::Result<()> {
    let c = build_corpora(&run.cfg)?;
    let mut files = Vec::new();
    for (name, utts) in [("train", &c.train), ("dev", &c.dev), ("test", &c.test)] {
        let rel = format!("data/{name}.jsonl");
        fs::create_dir_all(run.path("data"))?;
        write_corpus(&run.path(&rel), &run.cfg.synth, utts)?;
        println!("{name}: {} utterances", utts.len());
        files.push(rel);
    }
    run.write("data/vocab.txt", run.vocab()?.to_lines().as_bytes())?;
    files.push("data/vocab.txt".into());
    run.record(&files.iter().map(String::as_str).collect::<Vec<_>>())
}

fn pretrain(run: &Run, which: Backbone) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let (rel, ckpt) = match which {
        Backbone::Encoder => {
            let train = run.split(Split::Train)?;
            let dev = run.split(Split::Dev)?;
            let w = pretrain_encoder(
                &cfg.encoder,
                run.vocab()?.len(),
                &train,
                &dev,
                &cfg.pretrain,
                run.threads,
            )?;
            println!("frame accuracy {:.6}", w.frame_accuracy.unwrap_or(f64::NAN));
            ("checkpoints/encoder.json", encoder_checkpoint(&w, run.provenance()?)?)
        }
        Backbone::Decoder => {
            let (train, val) = text_corpora(cfg)?;
            let w = pretrain_decoder(&cfg.decoder, &train, &val, &cfg.pretrain, run.threads)?;
            println!("perplexity {:.6}", w.perplexity.unwrap_or(f64::NAN));
            ("checkpoints/decoder.json", decoder_checkpoint(&w, run.provenance()?)?)
        }
    };
    run.write(rel, &ckpt.to_bytes()?)?;
    run.record(&[rel])
}

fn align(run: &Run, kind: BridgeKind) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let before = run.backbone_file_hashes()?;
    println!("backbone sha256 before: encoder {} decoder {}", before.0, before.1);
    let (encoder, decoder) = (run.encoder()?, run.decoder()?);
    let (train, dev) = (run.split(Split::Train)?, run.split(Split::Dev)?);
    let variant = match kind {
        BridgeKind::Moe => Variant::Moe {
            experts: cfg.steering.num_experts,
        },
        BridgeKind::Static => Variant::Static,
    };
    let bridge = init_bridge(variant, &cfg.steering, &encoder, &decoder, cfg.bridge_seed)?;
    println!("{}: {} trainable parameters", bridge.label(), bridge.trainable_count());
    let out = align_train(
        &encoder,
        &decoder,
        bridge,
        &train,
        &dev,
        &cfg.optim,
        &cfg.eval,
        run.threads,
        |e| {
            if let Some(w) = e.dev_wer {
                eprintln!("step {:>6}  loss {:.6}  dev WER {:.4}", e.step, e.loss, w);
            }
        },
    )?;
    if let Some(last) = out.log.entries.last() {
        println!("final loss {:.6}", last.loss);
    }
    if let Some(w) = out.best_dev_wer {
        println!("best dev WER {w:.6} at step {}", out.best_step);
    }
    let mut meta = run.provenance()?;
    meta.insert("best_step".into(), json!(out.best_step));
    meta.insert("best_dev_wer".into(), json!(out.best_dev_wer));
    run.write(
        "checkpoints/bridge.json",
        &bridge_checkpoint(&out.best, meta)?.to_bytes()?,
    )?;
    run.write("reports/train_log.csv", out.log.to_csv(false).as_bytes())?;
    let after = run.backbone_file_hashes()?;
    println!("backbone sha256 after:  encoder {} decoder {}", after.0, after.1);
    if before != after {
        bail!("backbone checkpoint files changed during alignment");
    }
    run.record(&["checkpoints/bridge.json", "reports/train_log.csv"])
}

fn eval(run: &Run, split: Split, checkpoint: Option<&Path>, oracle: bool) -> anyhow::Result<Outcome> {
    let cfg = &run.cfg;
    let corpus = run.split(split)?;
    let vocab = run.vocab()?;
    let report = if oracle {
        let refs: Vec<Vec<usize>> = corpus.iter().map(|u| u.transcript.clone()).collect();
        score("oracle", split.name(), &corpus, &refs, &vocab)?
    } else {
        let (encoder, decoder) = (run.encoder()?, run.decoder()?);
        let bridge = run.bridge(checkpoint)?;
        evaluate(
            &bridge,
            &encoder,
            &decoder,
            &corpus,
            split.name(),
            &vocab,
            &cfg.eval,
            run.threads,
        )?
    };
    println!(
        "{} {}: WER {:.6} CER {:.6} over {} utterances",
        report.variant, report.split, report.wer, report.cer, report.utterances
    );
    let rel = format!("reports/eval-{}.json", split.name());
    let mut doc = run.provenance()?;
    doc.insert("report".into(), serde_json::to_value(&report)?);
    run.write_json(&rel, &serde_json::to_value(&doc)?)?;
    run.record(&[&rel])?;
    if report.wer > cfg.eval.wer_threshold {
        eprintln!(
            "WER {:.6} is above the threshold {}",
            report.wer, cfg.eval.wer_threshold
        );
        return Ok(Outcome::ThresholdFailed);
    }
    Ok(Outcome::Done)
}

fn ablate(run: &Run) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let (encoder, decoder) = (run.encoder()?, run.decoder()?);
    let (train, dev, test) = (
        run.split(Split::Train)?,
        run.split(Split::Dev)?,
        run.split(Split::Test)?,
    );
    let vocab = run.vocab()?;
    let setup = AblationSetup {
        encoder: &encoder,
        decoder: &decoder,
        train: &train,
        dev: &dev,
        test: &test,
        vocab: &vocab,
        steering: &cfg.steering,
        optim: &cfg.optim,
        eval: &cfg.eval,
        init_seed: cfg.bridge_seed,
        threads: run.threads,
    };
    let rows = run_ablation(&cfg.ablation, &setup, |label, e| {
        if let Some(w) = e.dev_wer {
            eprintln!("{label:>8} step {:>6}  loss {:.6}  dev WER {:.4}", e.step, e.loss, w);
        }
    });
    let csv = ablation_csv(&rows);
    print!("{csv}");
    let mut doc = run.provenance()?;
    doc.insert("variants".into(), serde_json::to_value(&rows)?);
    run.write_json("reports/ablation.json", &serde_json::to_value(&doc)?)?;
    run.write("reports/ablation.csv", csv.as_bytes())?;
    run.record(&["reports/ablation.json", "reports/ablation.csv"])
}

fn probe(run: &Run, split: Split, checkpoint: Option<&Path>, untrained: bool) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let encoder = run.encoder()?;
    let bridge = if untrained {
        let decoder = run.decoder()?;
        let variant = Variant::Moe {
            experts: cfg.steering.num_experts,
        };
        init_bridge(variant, &cfg.steering, &encoder, &decoder, cfg.bridge_seed)?
    } else {
        run.bridge(checkpoint)?
    };
    let Bridge::Moe(state) = &bridge else {
        bail!("the static adapter has no router to probe");
    };
    let corpus = run.split(split)?;
    let stats = router_stats(state, &encoder, &corpus)?;
    let uniform = (state.num_experts() as f64).ln();
    for (l, (usage, h)) in stats.usage.iter().zip(&stats.entropy).enumerate() {
        let u: Vec<String> = usage.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "layer {l}: entropy {h:.6} (ln N = {uniform:.6})  usage [{}]",
            u.join(", ")
        );
    }
    let mut doc = run.provenance()?;
    doc.insert("variant".into(), json!(bridge.label()));
    doc.insert("split".into(), json!(split.name()));
    doc.insert("untrained".into(), json!(untrained));
    doc.insert("router".into(), serde_json::to_value(&stats)?);
    run.write_json("reports/probe.json", &serde_json::to_value(&doc)?)?;
    run.record(&["reports/probe.json"])
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = load_config(&cli)?;
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let run = Run {
        cfg,
        overrides: cli.overrides.clone(),
        dir: cli.run_dir.clone(),
        threads: cli.threads,
    };
    match cli.command {
        Command::ShowConfig => print!("{}", run.cfg.to_json()?),
        Command::GenData => gen_data(&run)?,
        Command::Pretrain { which } => pretrain(&run, which)?,
        Command::Align { variant } => align(&run, variant)?,
        Command::Eval {
            split,
            checkpoint,
            oracle,
        } => return eval(&run, split, checkpoint.as_deref(), oracle),
        Command::Ablate => ablate(&run)?,
        Command::Probe {
            split,
            checkpoint,
            untrained,
        } => probe(&run, split, checkpoint.as_deref(), untrained)?,
    }
    Ok(Outcome::Done)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<steermoe::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
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
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ThresholdFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
