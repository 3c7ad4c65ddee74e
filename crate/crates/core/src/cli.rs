//! Command-line front end: `synth`, `train`, `eval`, `control`, `analyze`.

use crate::analysis::{
    self, char_lm, collapse_diagnostic, control_blank_ends, control_random_memory, control_time_reverse,
    error_delta_report, modality_lag, monotonicity_score, LagMode, UtteranceResult,
};
use crate::audio::{Waveform, FEATURE_PERIOD_S, SAMPLE_RATE};
use crate::corpus::{self, read_manifest, CorpusConfig, ManifestRow, SymbolSpec, VIDEO_PERIOD_S};
use crate::error::{Error, Result};
use crate::model::{AlignmentRecord, Checkpoint, Example, FusionVariant, MemoryEdit, ModelConfig, ModelKind};
use crate::train::{self, Dataset, Stage, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "avalign", version, about = "Audio-visual speech recognition with cross-modal attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic audio-visual corpus.
    Synth(Common),
    /// Train a model through the staged-SNR curriculum.
    Train(TrainArgs),
    /// Decode the test split and dump metrics and alignments.
    Eval(EvalArgs),
    /// Run a control experiment on the visual memory.
    Control(ControlArgs),
    /// Compare two evaluation runs.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// audio, av_align, av_align_au, av_cat or av_cat_au.
    #[arg(long)]
    pub model: Option<String>,
    /// baseline or m1..m5.
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long, value_enum)]
    pub au: Option<Switch>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Corpus directory written by `synth`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Train only up to and including this stage.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// clean, 10, 0 or -5.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControlKind {
    Random,
    Blank,
    Reverse,
}

#[derive(Debug, Clone, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub which: ControlKind,
    /// Seconds of blank video before the utterance.
    #[arg(long, default_value_t = 1.0)]
    pub pre: f64,
    /// Seconds of blank video after the utterance.
    #[arg(long, default_value_t = 1.0)]
    pub post: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluation directory of the audio-only system.
    #[arg(long)]
    pub run_a: PathBuf,
    /// Evaluation directory of the audio-visual system.
    #[arg(long)]
    pub run_b: PathBuf,
    #[arg(long, value_enum, default_value = "row")]
    pub per: PerArg,
    #[arg(long, default_value_t = 30)]
    pub lm_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerArg {
    Row,
    Col,
}

/// Contents of `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub fusion: Option<FusionVariant>,
    pub au: Option<bool>,
    pub snr: Option<Stage>,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    /// Network sizes; defaults to the desk-scale preset.
    pub network: Option<ModelConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    fn model_config(&self, args: &ModelArgs) -> Result<ModelConfig> {
        let mut kind = match &args.model {
            Some(m) => m.parse()?,
            None => self.model.unwrap_or(ModelKind::AvAlignAu),
        };
        let au = match args.au {
            Some(s) => Some(s == Switch::On),
            None => self.au,
        };
        if let Some(on) = au {
            kind = kind.with_au(on);
        }
        let fusion = match &args.fusion {
            Some(f) => f.parse()?,
            None => self.fusion.unwrap_or_default(),
        };
        let mut cfg = self.network.clone().unwrap_or_else(|| ModelConfig::toy(kind));
        cfg.kind = kind;
        cfg.fusion = fusion;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn stage_arg(flag: &Option<String>, cfg: &RunConfig) -> Result<Stage> {
    match flag {
        Some(s) => s.parse(),
        None => Ok(cfg.snr.unwrap_or(Stage::Clean)),
    }
}

fn seed_of(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.or(cfg.seed).unwrap_or(0)
}

fn write_run_json(out: &Path, command: &str, seed: u64, extra: serde_json::Value) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let doc = json!({
        "command": command,
        "argv": argv,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "details": extra,
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn load_symbols(corpus: &Path) -> Result<Option<Vec<SymbolSpec>>> {
    let p = corpus.join("symbols.json");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&std::fs::read(p)?)?))
}

/// Babble from the corpus symbol table when present, white noise otherwise.
fn noise_source(corpus: &Path, seed: u64) -> Result<Waveform> {
    let n = 4 * SAMPLE_RATE as usize;
    Ok(match load_symbols(corpus)? {
        Some(specs) => corpus::babble_noise(&specs, n, seed),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), SAMPLE_RATE)?
        }
    })
}

fn manifest(corpus: &Path, split: &str) -> Result<Vec<ManifestRow>> {
    let p = corpus.join(format!("{split}.json"));
    if !p.exists() {
        return Err(Error::Data(format!("missing manifest {}", p.display())));
    }
    read_manifest(&p)
}

/// Parse arguments and run; errors carry the process exit code.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Control(a) => cmd_control(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

pub fn cmd_synth(a: &Common) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let seed = seed_of(a, &cfg);
    let corpus = corpus::generate_corpus(&cfg.corpus, seed)?;
    corpus::write_corpus(&a.out, &corpus)?;
    write_run_json(
        &a.out,
        "synth",
        seed,
        json!({ "corpus": cfg.corpus, "train": corpus.train.len(), "test": corpus.test.len() }),
    )
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let seed = seed_of(&a.common, &cfg);
    let model_cfg = cfg.model_config(&a.model)?;
    let mut tcfg = cfg.train.clone();
    if let Some(s) = &a.snr {
        let last: Stage = s.parse()?;
        let k = tcfg
            .stages
            .iter()
            .position(|x| *x == last)
            .ok_or_else(|| Error::Config(format!("stage {last} is not in the curriculum")))?;
        tcfg.stages.truncate(k + 1);
    }
    if a.common.seed.is_some() || cfg.seed.is_some() {
        tcfg.seeds = vec![seed];
    }
    tcfg.validate()?;
    let with_video = model_cfg.kind.uses_video();
    let noise = noise_source(&a.corpus, seed)?;
    let train_set = Dataset::load(&a.corpus, &manifest(&a.corpus, "train")?, with_video, noise.clone())?;
    let test_set = Dataset::load(&a.corpus, &manifest(&a.corpus, "test")?, with_video, noise)?;
    std::fs::create_dir_all(&a.common.out)?;
    let report = train::run_trials(&model_cfg, &tcfg, &train_set, None, &test_set, Some(&a.common.out))?;
    let kind = model_cfg.kind;
    std::fs::write(a.common.out.join(format!("{kind}_curves.csv")), report.curves_csv())?;
    std::fs::write(a.common.out.join(format!("{kind}_summary.csv")), report.summary_csv())?;
    write_run_json(
        &a.common.out,
        "train",
        seed,
        json!({ "model": model_cfg, "train": tcfg, "wall_clock_s": report.wall_clock_s }),
    )
}

fn load_examples(corpus: &Path, ck: &Checkpoint, stage: Stage, seed: u64) -> Result<Vec<(Example, ManifestRow)>> {
    let rows = manifest(corpus, "test")?;
    let with_video = ck.model.kind().uses_video();
    let ds = Dataset::load(corpus, &rows, with_video, noise_source(corpus, seed)?)?;
    Ok(ds.examples(stage, with_video)?.into_iter().zip(rows).collect())
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    if !p.exists() {
        return Err(Error::Data(format!("missing checkpoint {}", p.display())));
    }
    Checkpoint::load(p)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let seed = seed_of(&a.common, &cfg);
    let stage = stage_arg(&a.snr, &cfg)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let exs = load_examples(&a.corpus, &ck, stage, seed)?;
    let align_dir = a.common.out.join("alignments");
    std::fs::create_dir_all(&align_dir)?;
    let mut csv = String::from("id,reference,hypothesis,cer,first_frame_mass,row_entropy,monotonicity\n");
    let mut total = 0.0;
    for (ex, row) in &exs {
        let d = ck.model.greedy_decode(ex, cfg.train.max_decode_len, &MemoryEdit::None)?;
        let c = analysis::cer(&d.text, &row.label)?;
        total += c;
        let (mass, ent, mono) = match &d.record.alpha {
            Some(al) => {
                let cd = collapse_diagnostic(al);
                (Some(cd.first_frame_mass), Some(cd.mean_row_entropy), monotonicity_score(al).score)
            }
            None => (None, None, None),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{},{},{}",
            row.id,
            row.label,
            d.text,
            c,
            fmt_opt(mass),
            fmt_opt(ent),
            fmt_opt(mono)
        );
        d.record.write_csv(&align_dir.join(format!("{}.csv", row.id)))?;
        d.record.write_pgms(&align_dir, &row.id)?;
    }
    std::fs::write(a.common.out.join("metrics.csv"), csv)?;
    let mean = total / exs.len().max(1) as f64;
    std::fs::write(
        a.common.out.join("summary.json"),
        serde_json::to_string_pretty(&json!({ "mean_cer": mean, "utterances": exs.len(), "stage": stage.tag(), "kind": ck.model.kind() }))?,
    )?;
    write_run_json(&a.common.out, "eval", seed, json!({ "checkpoint": a.checkpoint, "stage": stage.tag() }))
}

pub fn cmd_control(a: &ControlArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let seed = seed_of(&a.common, &cfg);
    let stage = stage_arg(&a.snr, &cfg)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    if !ck.model.kind().uses_video() {
        return Err(Error::Config("control experiments need an audio-visual model".into()));
    }
    let exs = load_examples(&a.corpus, &ck, stage, seed)?;
    let dir = a.common.out.join("alignments");
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("id,reference,clean_hypothesis,control_hypothesis,memory_before,memory_after,alpha_max_diff\n");
    let max_len = cfg.train.max_decode_len;
    for (k, (ex, row)) in exs.iter().enumerate() {
        let r = match a.which {
            ControlKind::Random => control_random_memory(&ck.model, ex, seed.wrapping_add(k as u64), max_len)?,
            ControlKind::Reverse => control_time_reverse(&ck.model, ex, max_len)?,
            ControlKind::Blank => control_blank_ends(&ck.model, ex, a.pre, a.post, max_len)?,
        };
        log::info!("{}: memory length {} -> {}", row.id, r.memory_len.0, r.memory_len.1);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.id,
            row.label,
            r.clean.text,
            r.control.text,
            r.memory_len.0,
            r.memory_len.1,
            fmt_opt(r.alpha_max_diff())
        );
        r.clean.record.write_csv(&dir.join(format!("{}_before.csv", row.id)))?;
        r.control.record.write_csv(&dir.join(format!("{}_after.csv", row.id)))?;
        r.clean.record.write_pgms(&dir, &format!("{}_before", row.id))?;
        r.control.record.write_pgms(&dir, &format!("{}_after", row.id))?;
    }
    std::fs::write(a.common.out.join("control.csv"), csv)?;
    let which = format!("{:?}", a.which).to_lowercase();
    write_run_json(&a.common.out, "control", seed, json!({ "which": which, "pre_s": a.pre, "post_s": a.post }))
}

fn read_metrics(dir: &Path) -> Result<Vec<UtteranceResult>> {
    let p = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < 4 {
                return Err(Error::Format(format!("bad metrics line '{l}'")));
            }
            Ok(UtteranceResult {
                id: f[0].into(),
                reference: f[1].into(),
                hypothesis: f[2].into(),
                cer: f[3].parse().map_err(|_| Error::Format(format!("bad CER in '{l}'")))?,
            })
        })
        .collect()
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let seed = seed_of(&a.common, &cfg);
    let ra = read_metrics(&a.run_a)?;
    let rb = read_metrics(&a.run_b)?;
    let labels: Vec<String> = manifest(&a.corpus, "train")?.into_iter().map(|r| r.label).collect();
    let lm = char_lm(&labels, 32, a.lm_epochs, seed)?;
    let report = error_delta_report(&ra, &rb, &lm)?;
    std::fs::create_dir_all(&a.common.out)?;
    std::fs::write(a.common.out.join("deltas.csv"), report.rows_csv())?;
    std::fs::write(a.common.out.join("cdf.csv"), report.cdf_csv())?;
    let mode = match a.per {
        PerArg::Row => LagMode::Row,
        PerArg::Col => LagMode::Col,
    };
    let lag_dir = a.common.out.join("lags");
    std::fs::create_dir_all(&lag_dir)?;
    let mut lags = 0;
    for r in &rb {
        let p = a.run_b.join("alignments").join(format!("{}.csv", r.id));
        if !p.exists() {
            continue;
        }
        let rec = AlignmentRecord::from_csv(&std::fs::read_to_string(&p)?)?;
        if let Some(al) = rec.alpha {
            let trace = modality_lag(&al, FEATURE_PERIOD_S, VIDEO_PERIOD_S, mode)?;
            std::fs::write(lag_dir.join(format!("{}.csv", r.id)), trace.to_csv())?;
            lags += 1;
        }
    }
    write_run_json(
        &a.common.out,
        "analyze",
        seed,
        json!({ "run_a": a.run_a, "run_b": a.run_b, "lag_traces": lags, "per": format!("{:?}", a.per).to_lowercase() }),
    )
}
