use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xling::checkpoint::Checkpoint;
use xling::config::{Preset, RunConfig};
use xling::eval::{edit_distance, probe_layers, probe_table, EditCounts, ProbeOptions};
use xling::pipeline::{self, MetricsLog};
use xling::synth::{self, Corpus, Manifest, ManifestRow, Role, Utterance};
use xling::transcoder::Transcoder;
use xling::unidata2vec::{OutputUnits, UniData2vecModel};

const EXIT_FAILURE: u8 = 1;
const EXIT_MISSING_CHECKPOINT: u8 = 3;
const EXIT_INVALID_CONFIG: u8 = 4;
const EXIT_MANIFEST: u8 = 5;

const AFTER_HELP: &str = "Exit codes: 0 success, 1 runtime failure, 2 usage error, \
3 missing or unreadable checkpoint, 4 invalid config, 5 manifest or feature mismatch.";

#[derive(Parser)]
#[command(name = "xling", version, about = "Phonetic pre-training, fine-tuning and phoneme-to-word transcoding", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base preset; a `preset` key in the config file takes precedence.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Threads used for corpus generation.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum UnitsArg {
    Phoneme,
    Grapheme,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Source,
    Unlabeled,
    Finetune,
    Test,
}

impl SplitArg {
    fn role(self) -> Role {
        match self {
            SplitArg::Source => Role::Source,
            SplitArg::Unlabeled => Role::Unlabeled,
            SplitArg::Finetune => Role::Finetune,
            SplitArg::Test => Role::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (features, manifests, lexicons).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Multi-task pre-training on the labeled source split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Continue pre-training with unlabeled target audio added.
    PretrainPlus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Acoustic checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// CTC fine-tuning on the small labeled target split.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "phoneme")]
        units: UnitsArg,
    },
    /// Train the phoneme-to-word transcoder on the text split.
    TrainTranscoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fine-tune a transcoder on the acoustic model's hypotheses.
    FinetuneTranscoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Transcoder checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fine-tuned acoustic checkpoint producing the hypotheses.
        #[arg(long)]
        acoustic: Option<PathBuf>,
    },
    /// Decode a split into phoneme and word hypotheses.
    Transcribe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        acoustic: Option<PathBuf>,
        #[arg(long)]
        transcoder: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score a hypothesis manifest against a reference manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        hypothesis: PathBuf,
    },
    /// Cluster teacher-layer frames and report purity and PNMI.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

struct Failure {
    code: u8,
    message: String,
}

type Outcome<T> = Result<T, Failure>;

fn fail(code: u8) -> impl Fn(xling::Error) -> Failure {
    move |e| Failure {
        code,
        message: e.to_string(),
    }
}

fn runtime(e: xling::Error) -> Failure {
    fail(EXIT_FAILURE)(e)
}

fn load_config(common: &Common) -> Outcome<RunConfig> {
    let preset = match common.preset {
        Some(PresetArg::Paper) => Preset::Paper,
        _ => Preset::Desk,
    };
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, preset).map_err(fail(EXIT_INVALID_CONFIG))?,
        None => RunConfig::preset(preset),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(fail(EXIT_INVALID_CONFIG))?;
    Ok(cfg)
}

fn require_checkpoint(path: &Option<PathBuf>, flag: &str) -> Outcome<Checkpoint> {
    let Some(path) = path else {
        return Err(Failure {
            code: EXIT_MISSING_CHECKPOINT,
            message: format!("{flag} CHECKPOINT is required"),
        });
    };
    if !path.is_file() {
        return Err(Failure {
            code: EXIT_MISSING_CHECKPOINT,
            message: format!("checkpoint {} does not exist", path.display()),
        });
    }
    Checkpoint::load(path).map_err(fail(EXIT_MISSING_CHECKPOINT))
}

fn load_acoustic(path: &Option<PathBuf>, flag: &str) -> Outcome<UniData2vecModel> {
    let ck = require_checkpoint(path, flag)?;
    UniData2vecModel::from_checkpoint(&ck).map_err(fail(EXIT_MISSING_CHECKPOINT))
}

fn load_transcoder(path: &Option<PathBuf>, flag: &str) -> Outcome<Transcoder> {
    let ck = require_checkpoint(path, flag)?;
    Transcoder::from_checkpoint(&ck).map_err(fail(EXIT_MISSING_CHECKPOINT))
}

fn load_corpus(dir: &Path, cfg: &RunConfig) -> Outcome<Corpus> {
    let corpus = synth::load_corpus(dir).map_err(fail(EXIT_MANIFEST))?;
    if corpus.config.feature_dim != cfg.encoder.input_dim {
        return Err(Failure {
            code: EXIT_MANIFEST,
            message: format!(
                "corpus features have {} dimensions, the encoder expects {}",
                corpus.config.feature_dim, cfg.encoder.input_dim
            ),
        });
    }
    Ok(corpus)
}

fn prepare_out(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(xling::Error::io(dir, e)))
}

fn save_acoustic(model: &UniData2vecModel, log: &MetricsLog, out: &Path) -> Outcome<()> {
    let ck = model.to_checkpoint(&log.header).map_err(runtime)?;
    ck.save(&out.join("unidata2vec.ckpt")).map_err(runtime)?;
    log.write(&out.join("metrics.jsonl")).map_err(runtime)
}

fn save_transcoder(model: &Transcoder, log: &MetricsLog, out: &Path) -> Outcome<()> {
    let ck = model.to_checkpoint(&log.header).map_err(runtime)?;
    ck.save(&out.join("transcoder.ckpt")).map_err(runtime)?;
    log.write(&out.join("metrics.jsonl")).map_err(runtime)
}

/// Keeps the checkpoint's architecture but takes training-time settings
/// (loss weights, masking, EMA decay) from the run config.
fn adopt_training_settings(model: &mut UniData2vecModel, cfg: &RunConfig) -> Outcome<()> {
    let c = &mut model.config;
    c.loss = cfg.encoder.loss;
    c.mask_prob = cfg.encoder.mask_prob;
    c.mask_span = cfg.encoder.mask_span;
    c.ema_decay = cfg.encoder.ema_decay;
    c.ctc_on_masked = cfg.encoder.ctc_on_masked;
    c.validate().map_err(fail(EXIT_INVALID_CONFIG))
}

fn log_error_rate(log: &mut MetricsLog, step: usize, name: &str, c: &EditCounts) {
    log.push(step, name, c.rate());
    log.push(step, &format!("{name}_edits"), c.distance as f64);
    log.push(step, &format!("{name}_ref_len"), c.reference_len as f64);
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out)?;
            let corpus = synth::generate_corpus(&cfg.corpus, cfg.seed, cfg.workers.max(1)).map_err(runtime)?;
            let log = MetricsLog::new("synth", &cfg);
            let paths = synth::build_corpus(&corpus, &common.out, &log.header).map_err(runtime)?;
            for (role, path) in paths {
                println!("{}\t{}", role.name(), path.display());
            }
        }
        Command::Pretrain { common, corpus } => {
            let cfg = load_config(&common)?;
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let mut log = MetricsLog::new("pretrain", &cfg);
            let mut model = UniData2vecModel::new(cfg.encoder.clone(), cfg.seed).map_err(fail(EXIT_INVALID_CONFIG))?;
            pipeline::pretrain(&mut model, &data.source_set, None, &cfg.pretrain, cfg.seed, &mut log).map_err(runtime)?;
            save_acoustic(&model, &log, &common.out)?;
        }
        Command::PretrainPlus { common, corpus, init } => {
            let cfg = load_config(&common)?;
            let mut model = load_acoustic(&init, "--init")?;
            adopt_training_settings(&mut model, &cfg)?;
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let mut log = MetricsLog::new("pretrain-plus", &cfg);
            pipeline::pretrain(
                &mut model,
                &data.source_set,
                Some(&data.unlabeled),
                &cfg.pretrain_plus,
                cfg.seed,
                &mut log,
            )
            .map_err(runtime)?;
            save_acoustic(&model, &log, &common.out)?;
        }
        Command::Finetune {
            common,
            corpus,
            init,
            units,
        } => {
            let cfg = load_config(&common)?;
            let mut model = load_acoustic(&init, "--init")?;
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let units = match units {
                UnitsArg::Phoneme => OutputUnits::Phoneme {
                    size: data.target.inventory.len(),
                },
                UnitsArg::Grapheme => OutputUnits::graphemes(&data.target.graphemes()),
            };
            let mut log = MetricsLog::new("finetune", &cfg);
            pipeline::finetune(&mut model, &units, &data.finetune, &cfg.finetune, cfg.seed, &mut log)
                .map_err(runtime)?;
            if !data.test.is_empty() {
                let step = cfg.finetune.steps;
                if matches!(units, OutputUnits::Phoneme { .. }) {
                    let c = pipeline::evaluate_per(&model, &data.test).map_err(runtime)?;
                    log_error_rate(&mut log, step, "test_per", &c);
                } else {
                    let c = pipeline::evaluate_wer(&model, None, &data.test).map_err(runtime)?;
                    log_error_rate(&mut log, step, "test_wer", &c);
                }
            }
            save_acoustic(&model, &log, &common.out)?;
        }
        Command::TrainTranscoder { common, corpus } => {
            let cfg = load_config(&common)?;
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let mut log = MetricsLog::new("train-transcoder", &cfg);
            let model = pipeline::train_transcoder(&cfg, &data.text, &data.target.lexicon_map(), cfg.seed, &mut log)
                .map_err(runtime)?;
            save_transcoder(&model, &log, &common.out)?;
        }
        Command::FinetuneTranscoder {
            common,
            corpus,
            init,
            acoustic,
        } => {
            let cfg = load_config(&common)?;
            let mut model = load_transcoder(&init, "--init")?;
            let acoustic = load_acoustic(&acoustic, "--acoustic")?;
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let mut log = MetricsLog::new("finetune-transcoder", &cfg);
            let examples = pipeline::hypothesis_examples(
                &acoustic,
                &data.finetune,
                &data.target.lexicon_map(),
                &model.vocab,
                cfg.hypothesis_inputs,
            )
            .map_err(runtime)?;
            pipeline::finetune_transcoder(&mut model, &examples, &cfg.transcoder_finetune, cfg.seed, &mut log)
                .map_err(runtime)?;
            save_transcoder(&model, &log, &common.out)?;
        }
        Command::Transcribe {
            common,
            corpus,
            acoustic,
            transcoder,
            split,
        } => {
            let cfg = load_config(&common)?;
            let acoustic = load_acoustic(&acoustic, "--acoustic")?;
            let transcoder = match transcoder {
                Some(p) => Some(load_transcoder(&Some(p), "--transcoder")?),
                None => None,
            };
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let log = MetricsLog::new("transcribe", &cfg);
            let role = split.role();
            let inventory = &data.language(role).inventory;
            let mut manifest = Manifest {
                header: Some(log.header.clone()),
                rows: Vec::new(),
            };
            for u in data.audio(role) {
                manifest.rows.push(transcribe_row(&acoustic, transcoder.as_ref(), u, role, inventory)?);
            }
            let path = common.out.join("transcripts.jsonl");
            manifest.write(&path).map_err(runtime)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            common,
            reference,
            hypothesis,
        } => {
            let cfg = load_config(&common)?;
            let reference = Manifest::read(&reference).map_err(fail(EXIT_MANIFEST))?;
            let hypothesis = Manifest::read(&hypothesis).map_err(fail(EXIT_MANIFEST))?;
            prepare_out(&common.out)?;
            let mut log = MetricsLog::new("evaluate", &cfg);
            let (per, wer) = score(&reference, &hypothesis)?;
            if let Some(c) = &per {
                log_error_rate(&mut log, 0, "per", c);
                println!("PER\t{:.6}", c.rate());
            }
            if let Some(c) = &wer {
                log_error_rate(&mut log, 0, "wer", c);
                println!("WER\t{:.6}", c.rate());
            }
            if per.is_none() && wer.is_none() {
                return Err(Failure {
                    code: EXIT_MANIFEST,
                    message: "no reference row carries a phoneme or word transcript".into(),
                });
            }
            log.write(&common.out.join("metrics.jsonl")).map_err(runtime)?;
        }
        Command::Probe {
            common,
            corpus,
            init,
            split,
        } => {
            let cfg = load_config(&common)?;
            let model = load_acoustic(&init, "--init")?;
            let data = load_corpus(&corpus, &cfg)?;
            prepare_out(&common.out)?;
            let mut utts: &[Utterance] = data.audio(split.role());
            if cfg.probe.utterances > 0 && utts.len() > cfg.probe.utterances {
                utts = &utts[..cfg.probe.utterances];
            }
            let opts = ProbeOptions {
                k: cfg.probe_k(),
                seed: cfg.seed,
                iters: cfg.probe.iters,
                restarts: cfg.probe.restarts,
            };
            let layers = cfg.probe_layers();
            let reports = probe_layers(&model, utts, &layers, opts).map_err(runtime)?;
            let mut log = MetricsLog::new("probe", &cfg);
            for r in &reports {
                log.push(r.layer, "purity", r.purity);
                log.push(r.layer, "nmi", r.nmi);
                log.push(r.layer, "shuffled_purity", r.shuffled_purity);
            }
            let table = probe_table(&reports);
            let echo = serde_json::to_string(&log.header).map_err(|e| runtime(e.into()))?;
            let path = common.out.join("probe.tsv");
            fs::write(&path, format!("# {echo}\n{table}")).map_err(|e| runtime(xling::Error::io(&path, e)))?;
            log.write(&common.out.join("metrics.jsonl")).map_err(runtime)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn transcribe_row(
    acoustic: &UniData2vecModel,
    transcoder: Option<&Transcoder>,
    u: &Utterance,
    role: Role,
    inventory: &synth::PhonemeInventory,
) -> Outcome<ManifestRow> {
    let phonemes = match acoustic.units {
        OutputUnits::Phoneme { .. } => {
            let ids = acoustic.decode_units(&u.features).map_err(runtime)?;
            if ids.iter().any(|&i| i >= inventory.len()) {
                return Err(Failure {
                    code: EXIT_MANIFEST,
                    message: format!("model emits {} phonemes, inventory has {}", acoustic.units.size(), inventory.len()),
                });
            }
            Some(inventory.render(&ids))
        }
        OutputUnits::Grapheme { .. } => None,
    };
    let words = match (transcoder, &acoustic.units) {
        (None, OutputUnits::Phoneme { .. }) => None,
        _ => Some(
            pipeline::transcribe(acoustic, transcoder, &u.features)
                .map_err(runtime)?
                .join(" "),
        ),
    };
    Ok(ManifestRow {
        id: u.id.clone(),
        features: None,
        duration: None,
        phonemes,
        words,
        language: u.language.clone(),
        role,
        frame_labels: None,
    })
}

/// Corpus-level PER and WER over reference rows, matched by id.
fn score(reference: &Manifest, hypothesis: &Manifest) -> Outcome<(Option<EditCounts>, Option<EditCounts>)> {
    let hyps: BTreeMap<&str, &ManifestRow> = hypothesis.rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let tokens = |s: &Option<String>| -> Vec<String> {
        s.as_deref()
            .unwrap_or("")
            .split_whitespace()
            .map(str::to_string)
            .collect()
    };
    let mut per: Option<EditCounts> = None;
    let mut wer: Option<EditCounts> = None;
    for r in &reference.rows {
        let h = hyps.get(r.id.as_str()).ok_or_else(|| Failure {
            code: EXIT_MANIFEST,
            message: format!("hypothesis has no row for {}", r.id),
        })?;
        for (refs, hyp, acc) in [(&r.phonemes, &h.phonemes, &mut per), (&r.words, &h.words, &mut wer)] {
            let rt = tokens(refs);
            if rt.is_empty() {
                continue;
            }
            let c = edit_distance(&rt, &tokens(hyp)).map_err(runtime)?;
            acc.get_or_insert_with(EditCounts::default).accumulate(&c);
        }
    }
    Ok((per, wer))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
