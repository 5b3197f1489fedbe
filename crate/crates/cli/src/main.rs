mod config;
mod manifest;

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use scope_core::corpus::{
    build_confusion_set, char_frequencies, characters_of, read_confusion_pairs, read_corpus_dir, read_pairs_jsonl,
    write_pairs_jsonl, SentencePair, SynthesisConfig, Synthesizer, DEFAULT_MAX_PARAGRAPH,
};
use scope_core::eval::{metrics, EvalRecord, Level};
use scope_core::inference::{correct_all, sighan13_postprocess, CICConfig, ModelCorrector};
use scope_core::model::{load_checkpoint, save_checkpoint, Granularity, Lexicon, Model, ModelConfig};
use scope_core::pinyin::{Syllable, SyllableTable};
use scope_core::training::{finetune, pretrain, TrainConfig, WeightingScheme};

use config::{Flags, RunConfig};
use manifest::RunManifest;

const DATA_DIR_ENV: &str = "SCOPE_DATA_DIR";

#[derive(Parser)]
#[command(name = "scope", version, about = "Chinese spelling check with pronunciation-aware training")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the initial,final,tone triplet of a syllable or character.
    Pinyin {
        /// Numbered syllable such as `gao1`, or a single character.
        input: String,
    },
    /// Synthesize misspelled/correct pairs from a clean corpus.
    Synth(SynthArgs),
    /// Train a fresh model on synthesized pairs with weight 1 on the pronunciation loss.
    Pretrain(TrainArgs),
    /// Train on annotated pairs with adaptive pronunciation weighting.
    Finetune(TrainArgs),
    /// Correct stdin line by line and write the result to stdout.
    Correct(CorrectArgs),
    /// Score predictions against gold JSON-lines records.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of plain-text articles, one paragraph per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Confusion-set file(s): `char<TAB>confusables`.
    #[arg(long, required = true, num_args = 1..)]
    confusion: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    select_rate: Option<f64>,
    /// Keep confusion pairs whose characters are both in this top fraction of corpus frequency.
    #[arg(long)]
    top_fraction: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_PARAGRAPH)]
    max_paragraph: usize,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Skip the run if the manifest matches and its outputs are intact.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training pairs, JSON lines.
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint; a fresh model when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// non, part or full.
    #[arg(long)]
    scheme: Option<WeightingScheme>,
    /// fine or coarse.
    #[arg(long)]
    granularity: Option<Granularity>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Undo edits involving 的, 地 or 得.
    #[arg(long)]
    sighan13_post: bool,
    /// Write one JSON trace per input line here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON lines with `source` and `prediction`.
    #[arg(long)]
    pred: PathBuf,
    /// JSON lines with `source` and `target`.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "sentence")]
    level: Level,
    #[arg(long)]
    sighan13_post: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some(command) = cli.command else {
        let _ = Cli::command().write_help(&mut std::io::stderr());
        return ExitCode::from(1);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pinyin { input } => cmd_pinyin(&input),
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_train(a, Stage::Pretrain),
        Command::Finetune(a) => cmd_train(a, Stage::Finetune),
        Command::Correct(a) => cmd_correct(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn load_table() -> Result<SyllableTable> {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            SyllableTable::load_dir(&dir).with_context(|| format!("loading pinyin table from {}", dir.display()))
        }
        None => Ok(SyllableTable::builtin()),
    }
}

fn cmd_pinyin(input: &str) -> Result<()> {
    let table = load_table()?;
    let syllable = match Syllable::parse(input) {
        Ok(s) => s,
        Err(parse_err) => {
            let mut chars = input.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if !c.is_ascii() => table
                    .reading(c)
                    .cloned()
                    .with_context(|| format!("no reading for `{c}`"))?,
                _ => return Err(parse_err.into()),
            }
        }
    };
    println!("{}", table.decompose(&syllable)?);
    Ok(())
}

/// Loads the previous manifest when resuming. `Ok(true)` means the recorded
/// outputs are intact and there is nothing to do.
fn check_resume(resume: bool, path: &Path, fresh: &RunManifest) -> Result<bool> {
    if !resume || !path.exists() {
        return Ok(false);
    }
    let previous = RunManifest::read(path)?;
    fresh
        .verify_against(&previous)
        .with_context(|| format!("cannot resume from {}", path.display()))?;
    Ok(previous.outputs_intact())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let table = load_table()?;
    let mut cfg = SynthesisConfig {
        rng_seed: a.seed,
        max_paragraph: a.max_paragraph,
        ..Default::default()
    };
    if let Some(r) = a.select_rate {
        cfg.select_rate = r;
    }
    if let Some(f) = a.top_fraction {
        cfg.freq_top_fraction = f;
    }
    cfg.validate()?;

    let manifest_path = a.manifest.unwrap_or_else(|| manifest::default_path(&a.out));
    let mut m = RunManifest::new("synth", serde_json::to_value(&cfg)?, a.seed);
    m.add_dataset(&a.corpus)?;
    for c in &a.confusion {
        m.add_dataset(c)?;
    }
    if check_resume(a.resume, &manifest_path, &m)? {
        info!("{} is up to date", a.out.display());
        return Ok(());
    }
    m.write(&manifest_path)?;

    let paragraphs = read_corpus_dir(&a.corpus, cfg.max_paragraph)?;
    if paragraphs.is_empty() {
        bail!("no usable paragraphs under {}", a.corpus.display());
    }
    let freqs = char_frequencies(paragraphs.iter().map(Vec::as_slice));
    let pairs = read_confusion_pairs(&a.confusion)?;
    let confusion = build_confusion_set(&pairs, &freqs, cfg.freq_top_fraction)?;
    info!(
        "{} paragraphs, {} confusion entries after frequency filtering",
        paragraphs.len(),
        confusion.len()
    );
    let synth = Synthesizer::new(&confusion, cfg, &table)?;
    let out = synth.synthesize_corpus(&paragraphs)?;
    write_atomically(&a.out, |p| Ok(write_pairs_jsonl(p, &out)?))?;

    m.add_output(&a.out)?;
    m.finish();
    m.write(&manifest_path)?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Pretrain,
    Finetune,
}

fn cmd_train(a: TrainArgs, stage: Stage) -> Result<()> {
    let table = load_table()?;
    let defaults = RunConfig {
        train: match stage {
            Stage::Pretrain => TrainConfig::pretrain_default(),
            Stage::Finetune => TrainConfig::default(),
        },
        model: ModelConfig::default(),
    };
    let mut flags = Flags::default();
    flags
        .set("seed", a.seed)
        .set("scheme", a.scheme)
        .set("granularity", a.granularity)
        .set("lr", a.lr)
        .set("batch_size", a.batch_size)
        .set("epochs", a.epochs)
        .set("max_steps", a.max_steps)
        .set("checkpoint_dir", a.checkpoint_dir.clone())
        .model("granularity", a.granularity)
        .model("embed_dim", a.embed_dim)
        .model("num_layers", a.num_layers)
        .model("num_heads", a.num_heads)
        .model("ffn_dim", a.ffn_dim)
        .model("max_len", a.max_len);
    let mut cfg = config::resolve(defaults, a.config.as_deref(), flags.into_value())?;
    cfg.model.granularity = cfg.train.granularity;
    if stage == Stage::Pretrain && cfg.train.scheme != WeightingScheme::NonAdaptive {
        warn!("pre-training always uses weight 1; ignoring scheme {:?}", cfg.train.scheme);
        cfg.train.scheme = WeightingScheme::NonAdaptive;
    }

    let command = match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    };
    let manifest_path = a.manifest.unwrap_or_else(|| manifest::default_path(&a.out));
    let mut m = RunManifest::new(command, serde_json::to_value(&cfg)?, cfg.train.seed);
    m.add_dataset(&a.data)?;
    if let Some(c) = &a.ckpt {
        m.add_checkpoint(c)?;
    }
    if check_resume(a.resume, &manifest_path, &m)? {
        info!("{} is up to date", a.out.display());
        return Ok(());
    }
    m.write(&manifest_path)?;

    let pairs = read_pairs_jsonl(&a.data, &table)?;
    let mut model = match &a.ckpt {
        Some(path) => {
            let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if model.granularity() != cfg.train.granularity || !model.has_pron_heads() {
                warn!(
                    "checkpoint predicts {:?} pronunciation; starting new {:?} heads",
                    model.granularity(),
                    cfg.train.granularity
                );
            }
            model.with_granularity(cfg.train.granularity)?
        }
        None => Model::new(cfg.model.clone(), Lexicon::new(characters_of(&pairs), &table))?,
    };
    report_unknown(&model, &pairs);
    let reports = match stage {
        Stage::Pretrain => pretrain(&mut model, &pairs, &cfg.train)?,
        Stage::Finetune => finetune(&mut model, &pairs, &cfg.train)?,
    };
    if let Some(last) = reports.last() {
        info!("finished after {} epochs, final loss {:.5}", reports.len(), last.mean_total);
    }
    save_checkpoint(&model, &a.out)?;

    m.add_output(&a.out)?;
    m.finish();
    m.write(&manifest_path)?;
    Ok(())
}

fn report_unknown(model: &Model, pairs: &[SentencePair]) {
    let lex = model.lexicon();
    let unknown = pairs
        .iter()
        .flat_map(|p| p.source.iter().chain(&p.target))
        .filter(|&&c| !lex.contains(c))
        .count();
    if unknown > 0 {
        warn!("{unknown} characters in the data are outside the model vocabulary");
    }
}

fn write_atomically(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn cmd_correct(a: CorrectArgs) -> Result<()> {
    let table = load_table()?;
    let cic = CICConfig {
        iterations: a.iterations,
        window: a.window,
    };
    cic.validate()?;
    let mut m = RunManifest::new(
        "correct",
        serde_json::json!({ "cic": cic, "sighan13_post": a.sighan13_post }),
        0,
    );
    m.add_checkpoint(&a.ckpt)?;
    if let Some(p) = &a.manifest {
        m.write(p)?;
    }

    let model = load_checkpoint(&a.ckpt)
        .with_context(|| format!("loading {}", a.ckpt.display()))?
        .without_pron_heads()?;
    let lines: Vec<Vec<char>> = std::io::stdin()
        .lock()
        .lines()
        .map(|l| l.map(|l| l.trim_end_matches('\r').chars().collect()))
        .collect::<std::io::Result<_>>()?;
    let corrector = ModelCorrector::new(&model, &table);
    let results = correct_all(&corrector, &lines, &cic)?;

    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut traces = match &a.trace {
        Some(p) => Some(BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    for (i, (source, (corrected, trace))) in lines.iter().zip(results).enumerate() {
        let corrected = if a.sighan13_post {
            sighan13_postprocess(source, &corrected)?
        } else {
            corrected
        };
        writeln!(out, "{}", corrected.iter().collect::<String>())?;
        if let Some(t) = traces.as_mut() {
            let record = serde_json::json!({
                "line": i + 1,
                "source": source.iter().collect::<String>(),
                "output": corrected.iter().collect::<String>(),
                "trace": trace,
            });
            serde_json::to_writer(&mut *t, &record)?;
            t.write_all(b"\n")?;
        }
    }
    out.flush()?;
    if let Some(mut t) = traces {
        t.flush()?;
    }
    if let Some(p) = &a.manifest {
        m.finish();
        m.write(p)?;
    }
    Ok(())
}

/// A line of either evaluation input; each file supplies some of the fields.
#[derive(Deserialize)]
struct PartialRecord {
    source: Option<String>,
    prediction: Option<String>,
    target: Option<String>,
}

fn read_partial(path: &Path) -> Result<Vec<PartialRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn join_records(pred: Vec<PartialRecord>, gold: Vec<PartialRecord>) -> Result<Vec<EvalRecord>> {
    if pred.len() != gold.len() {
        bail!("{} predictions but {} gold records", pred.len(), gold.len());
    }
    pred.into_iter()
        .zip(gold)
        .enumerate()
        .map(|(i, (p, g))| {
            let line = i + 1;
            let source = match (g.source, p.source) {
                (Some(a), Some(b)) if a != b => bail!("record {line}: prediction and gold sources differ"),
                (Some(s), _) | (None, Some(s)) => s,
                (None, None) => bail!("record {line}: no source"),
            };
            let prediction = p.prediction.with_context(|| format!("record {line}: no prediction"))?;
            let target = g.target.or(p.target).with_context(|| format!("record {line}: no target"))?;
            Ok(EvalRecord {
                source,
                prediction,
                target,
            })
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut m = RunManifest::new(
        "eval",
        serde_json::json!({ "level": a.level, "sighan13_post": a.sighan13_post }),
        0,
    );
    m.add_dataset(&a.pred)?;
    m.add_dataset(&a.gold)?;
    if let Some(p) = &a.manifest {
        m.write(p)?;
    }

    let mut records = join_records(read_partial(&a.pred)?, read_partial(&a.gold)?)?;
    if a.sighan13_post {
        for r in &mut records {
            let s: Vec<char> = r.source.chars().collect();
            let p: Vec<char> = r.prediction.chars().collect();
            r.prediction = sighan13_postprocess(&s, &p)?.into_iter().collect();
        }
    }
    let report = metrics(&records, a.level)?;
    print!("{}", report.table());
    println!("{}", serde_json::to_string(&report)?);
    if let Some(p) = &a.manifest {
        m.finish();
        m.write(p)?;
    }
    Ok(())
}
