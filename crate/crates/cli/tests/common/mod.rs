#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough that every subcommand finishes in seconds.
pub const TINY: &str = r#"
seed = 3

[corpus.sizes]
source = 12
unlabeled = 8
finetune = 6
text = 40
test = 6

[corpus.source]
vocab_size = 30
min_sentence_words = 1
max_sentence_words = 2

[corpus.target]
vocab_size = 30
min_sentence_words = 1
max_sentence_words = 2

[encoder]
layers = 2
dim = 16
inner_dim = 32
heads = 2
conv_channels = [16, 16]

[transcoder]
blocks = 1
dim = 16
inner_dim = 32
heads = 2

[pretrain]
steps = 4
batch_size = 4

[pretrain_plus]
steps = 4
batch_size = 4

[finetune]
steps = 4
batch_size = 4

[transcoder_train]
steps = 6
batch_size = 8

[transcoder_finetune]
steps = 3
batch_size = 4

[probe]
iters = 5
restarts = 1
utterances = 4
"#;

pub fn xling(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xling"))
        .args(args)
        .output()
        .expect("spawn xling")
}

pub fn ok(args: &[&str]) -> Output {
    let out = xling(args);
    assert!(
        out.status.success(),
        "xling {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Paths produced by [`run_pipeline`].
pub struct PipelineDirs {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub pretrain: PathBuf,
    pub plus: PathBuf,
    pub finetune: PathBuf,
    pub grapheme: PathBuf,
    pub transcoder: PathBuf,
    pub transcoder_ft: PathBuf,
    pub transcribe: PathBuf,
    pub evaluate: PathBuf,
    pub probe: PathBuf,
}

impl PipelineDirs {
    /// Every directory that receives a metrics file.
    pub fn metric_dirs(&self) -> Vec<(&'static str, &Path)> {
        vec![
            ("pretrain", &self.pretrain),
            ("pretrain-plus", &self.plus),
            ("finetune", &self.finetune),
            ("finetune --units grapheme", &self.grapheme),
            ("train-transcoder", &self.transcoder),
            ("finetune-transcoder", &self.transcoder_ft),
            ("evaluate", &self.evaluate),
            ("probe", &self.probe),
        ]
    }
}

/// Runs every subcommand once on the tiny config under `root`.
pub fn run_pipeline(root: &Path) -> PipelineDirs {
    let d = |n: &str| root.join(n);
    let dirs = PipelineDirs {
        config: d("tiny.toml"),
        corpus: d("corpus"),
        pretrain: d("pretrain"),
        plus: d("plus"),
        finetune: d("finetune"),
        grapheme: d("grapheme"),
        transcoder: d("transcoder"),
        transcoder_ft: d("transcoder_ft"),
        transcribe: d("transcribe"),
        evaluate: d("evaluate"),
        probe: d("probe"),
    };
    fs::write(&dirs.config, TINY).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = s(&dirs.config);
    let corpus = s(&dirs.corpus);
    let ck = |p: &Path, name: &str| s(&p.join(name));
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs)
    };
    let v = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    run(v(&["synth", "--config", &cfg, "--out", &corpus]));
    run(v(&["pretrain", "--config", &cfg, "--corpus", &corpus, "--out", &s(&dirs.pretrain)]));
    run(v(&[
        "pretrain-plus", "--config", &cfg, "--corpus", &corpus,
        "--init", &ck(&dirs.pretrain, "unidata2vec.ckpt"), "--out", &s(&dirs.plus),
    ]));
    run(v(&[
        "finetune", "--config", &cfg, "--corpus", &corpus,
        "--init", &ck(&dirs.plus, "unidata2vec.ckpt"), "--out", &s(&dirs.finetune),
    ]));
    run(v(&[
        "finetune", "--config", &cfg, "--corpus", &corpus, "--units", "grapheme",
        "--init", &ck(&dirs.plus, "unidata2vec.ckpt"), "--out", &s(&dirs.grapheme),
    ]));
    run(v(&["train-transcoder", "--config", &cfg, "--corpus", &corpus, "--out", &s(&dirs.transcoder)]));
    run(v(&[
        "finetune-transcoder", "--config", &cfg, "--corpus", &corpus,
        "--init", &ck(&dirs.transcoder, "transcoder.ckpt"),
        "--acoustic", &ck(&dirs.finetune, "unidata2vec.ckpt"), "--out", &s(&dirs.transcoder_ft),
    ]));
    run(v(&[
        "transcribe", "--config", &cfg, "--corpus", &corpus,
        "--acoustic", &ck(&dirs.finetune, "unidata2vec.ckpt"),
        "--transcoder", &ck(&dirs.transcoder_ft, "transcoder.ckpt"), "--out", &s(&dirs.transcribe),
    ]));
    run(v(&[
        "evaluate", "--config", &cfg,
        "--reference", &ck(&dirs.corpus, "test.jsonl"),
        "--hypothesis", &ck(&dirs.transcribe, "transcripts.jsonl"), "--out", &s(&dirs.evaluate),
    ]));
    run(v(&[
        "probe", "--config", &cfg, "--corpus", &corpus,
        "--init", &ck(&dirs.plus, "unidata2vec.ckpt"), "--out", &s(&dirs.probe),
    ]));
    dirs
}
