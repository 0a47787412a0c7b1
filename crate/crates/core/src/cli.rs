//! Command implementations behind the `nemb` binary.
//!
//! Each command writes a [`RunManifest`] next to its output. The manifest
//! stores the fully resolved arguments, so `nemb rerun --manifest <file>`
//! repeats the run without the original flags or config file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{
    import_external, load_corpus, load_dataset, load_embeddings, save_embeddings, write_dataset,
    VectorFormat, STORE_MAGIC,
};
use crate::embedder::{embed_corpus, embedding_fingerprint, MicroTuneConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    broken_set, concat_ensemble, count_triplets, evaluate, intersection, EmbeddingMatrix,
    GroupedDataset, TripletReport,
};
use crate::masking::BlueprintSet;
use crate::model::{
    load_model, pretrain, save_checkpoint, LayerSelection, ModelConfig, ParameterStore,
    PretrainConfig,
};
use crate::synth::{generate, SyntheticTopicSpec};
use crate::tokenizer::{build_vocab, Vocabulary};

#[derive(Debug, Parser)]
#[command(
    name = "nemb",
    version,
    about = "Neural embeddings from micro-tuning weight deltas"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train the toy masked language model on a corpus.
    Pretrain(PretrainArgs),
    /// Embed every text of a dataset.
    Embed(EmbedArgs),
    /// Evaluate one or two embedding stores on a grouped dataset.
    Eval(EvalArgs),
    /// Count the triplets a dataset provides.
    Count(CountArgs),
    /// Time and evaluate embedding over a grid of epoch counts.
    Bench(BenchArgs),
    /// Generate a synthetic topic dataset and pretraining corpus.
    Synth(SynthArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Embed(_) => "embed",
            Command::Eval(_) => "eval",
            Command::Count(_) => "count",
            Command::Bench(_) => "bench",
            Command::Synth(_) => "synth",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint path; the vocabulary goes to `<out>.vocab`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Upper bound on the vocabulary size, special tokens included.
    #[arg(long, default_value_t = 1000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub ffn: usize,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

/// Micro-tuning options shared by `embed` and `bench`. Unset values fall back
/// to the run config file, then to the built-in defaults.
#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct TuneArgs {
    /// Key-value run config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub blueprints: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated parameter names; defaults to the last block's output bias and LayerNorm.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub tune: TuneArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// One or two stores: native `.nev` files, or jsonl/csv vector files.
    #[arg(long = "store", required = true, num_args = 1)]
    pub stores: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Broken triplets of the first store, one `anchor\tpositive\tnegative` line each.
    /// With two stores, `<path>.second` and `<path>.concat` are written too.
    #[arg(long)]
    pub broken_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CountArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Tab-separated table.
    #[arg(long)]
    pub out: PathBuf,
    /// The first entry is the reference row for the intersection column.
    #[arg(long, default_value = "20,10,5,3,1")]
    pub epochs_grid: String,
    #[command(flatten)]
    pub tune: TuneArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory for `dataset.jsonl` and `corpus.txt`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub topics: usize,
    #[arg(long, default_value_t = 100)]
    pub texts_per_topic: usize,
    #[arg(long, default_value_t = 40)]
    pub words_per_topic: usize,
    #[arg(long, default_value_t = 300)]
    pub corpus_texts_per_topic: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some items failed; the rest were processed.
    PartialFailure,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::PartialFailure => 1,
        }
    }
}

/// Exit code for a command that could not run at all.
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub samples: usize,
    pub seconds_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Resolved arguments; running them again reproduces the outputs.
    pub args: Command,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timing: Timing,
    /// `(item id, error message)` for items that could not be processed.
    pub failures: Vec<(String, String)>,
}

impl RunManifest {
    fn new(args: Command) -> Self {
        Self {
            command: args.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            args,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timing: Timing {
                wall_seconds: 0.0,
                samples: 0,
                seconds_per_sample: 0.0,
            },
            failures: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(record(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(record(path)?);
        Ok(())
    }

    fn timed(&mut self, start: Instant, samples: usize) {
        let wall = start.elapsed().as_secs_f64();
        self.timing = Timing {
            wall_seconds: wall,
            samples,
            seconds_per_sample: if samples == 0 {
                0.0
            } else {
                wall / samples as f64
            },
        };
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))
    }
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let mut h = Sha256::new();
    io::copy(&mut fs::File::open(path)?, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn record(path: &Path) -> Result<FileRecord> {
    Ok(FileRecord {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
    })
}

/// `<out>.manifest.json`
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Pretrain(a) => cmd_pretrain(a).map(|_| Outcome::Success),
        Command::Embed(a) => cmd_embed(a),
        Command::Eval(a) => cmd_eval(a).map(|_| Outcome::Success),
        Command::Count(a) => cmd_count(a).map(|_| Outcome::Success),
        Command::Bench(a) => cmd_bench(a).map(|_| Outcome::Success),
        Command::Synth(a) => cmd_synth(a).map(|_| Outcome::Success),
        Command::Rerun(a) => {
            let manifest = RunManifest::load(&a.manifest)?;
            if let Command::Rerun(_) = manifest.args {
                return Err(Error::InvalidConfig(
                    "a manifest cannot point at another rerun".into(),
                ));
            }
            run(&manifest.args)
        }
    }
}

// ---------------------------------------------------------------- pretrain

pub fn vocab_path_for(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".vocab")
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<crate::model::PretrainReport> {
    let start = Instant::now();
    let corpus = load_corpus(&args.corpus)?;
    let vocab = build_vocab(&corpus, args.vocab_size)?;
    let config = ModelConfig {
        vocab_size: vocab.size(),
        num_blocks: args.blocks,
        hidden_dim: args.hidden,
        num_heads: args.heads,
        ffn_dim: args.ffn,
        max_input_len: args.max_len,
    };
    config.validate()?;
    let pcfg = PretrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        ..PretrainConfig::default()
    };
    let (params, report) = pretrain(&corpus, &vocab, config, &pcfg)?;

    let vocab_path = vocab_path_for(&args.out);
    vocab.save(&vocab_path)?;
    let vocab_name = vocab_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidConfig(format!("bad output path {}", args.out.display())))?;
    save_checkpoint(&args.out, &params, vocab_name)?;
    println!(
        "final train loss {:.4}, held-out loss {:.4} (initial {:.4})",
        report.final_train_loss, report.final_heldout_loss, report.initial_heldout_loss
    );

    let mut m = RunManifest::new(Command::Pretrain(args.clone()));
    m.seeds.insert("init_and_sampling".into(), args.seed);
    m.input(&args.corpus)?;
    m.output(&args.out)?;
    m.output(&vocab_path)?;
    m.timed(start, args.steps);
    m.save(manifest_path(&args.out))?;
    Ok(report)
}

// ---------------------------------------------------------------- run config

/// Values read from a run config file: one `key = value` per line, `#`
/// comments and blank lines ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub checkpoint: Option<PathBuf>,
    pub blueprints: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub layers: Option<String>,
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid value {value:?} for {key}")))
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::parse(line, "expected key = value"))?;
        let (key, value) = (key.trim().replace('-', "_"), value.trim().trim_matches('"'));
        match key.as_str() {
            "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
            "blueprints" => cfg.blueprints = Some(value.to_string()),
            "epochs" => cfg.epochs = Some(parse_value(line, &key, value)?),
            "lr" => cfg.lr = Some(parse_value(line, &key, value)?),
            "batch_size" => cfg.batch_size = Some(parse_value(line, &key, value)?),
            "seed" => cfg.seed = Some(parse_value(line, &key, value)?),
            "layers" => cfg.layers = Some(value.to_string()),
            other => return Err(Error::parse(line, format!("unknown key {other:?}"))),
        }
    }
    Ok(cfg)
}

/// Reads a run config; a relative checkpoint path is taken relative to the
/// config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = parse_run_config(&fs::read_to_string(path)?)?;
    if let (Some(ck), Some(dir)) = (&cfg.checkpoint, path.parent()) {
        if ck.is_relative() {
            cfg.checkpoint = Some(dir.join(ck));
        }
    }
    Ok(cfg)
}

struct Tuning {
    params: ParameterStore,
    vocab: Vocabulary,
    cfg: MicroTuneConfig,
    /// Arguments with every value filled in and no config file.
    resolved: TuneArgs,
}

fn resolve_tuning(tune: &TuneArgs, epochs: Option<usize>) -> Result<(Tuning, usize)> {
    let file = match &tune.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    let checkpoint = tune.checkpoint.clone().or(file.checkpoint).ok_or_else(|| {
        Error::InvalidConfig("no checkpoint given (--checkpoint or config file)".into())
    })?;
    let (params, vocab) = load_model(&checkpoint)?;
    let selection = match tune.layers.clone().or(file.layers) {
        Some(s) => s.parse()?,
        None => LayerSelection::last_block_default(params.config()),
    };
    selection.validate(&params)?;
    let mut cfg = MicroTuneConfig::new(selection);
    if let Some(b) = tune.blueprints.clone().or(file.blueprints) {
        cfg.blueprints = b.parse::<BlueprintSet>()?;
    }
    cfg.lr = tune.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.batch_size = tune
        .batch_size
        .or(file.batch_size)
        .unwrap_or(cfg.batch_size);
    cfg.seed = tune.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.epochs = epochs.or(file.epochs).unwrap_or(cfg.epochs);
    cfg.validate()?;
    let resolved = TuneArgs {
        config: None,
        checkpoint: Some(checkpoint),
        blueprints: Some(cfg.blueprints.to_string()),
        lr: Some(cfg.lr),
        batch_size: Some(cfg.batch_size),
        seed: Some(cfg.seed),
        layers: Some(cfg.selection.to_string()),
        workers: tune.workers,
    };
    let epochs = cfg.epochs;
    Ok((
        Tuning {
            params,
            vocab,
            cfg,
            resolved,
        },
        epochs,
    ))
}

// ---------------------------------------------------------------- embed

struct Embedded {
    matrix: Option<EmbeddingMatrix>,
    failures: Vec<(String, String)>,
}

fn embed_dataset(t: &Tuning, ds: &GroupedDataset, workers: usize) -> Result<Embedded> {
    let mut failures = Vec::new();
    let mut ids = Vec::new();
    let mut texts = Vec::new();
    for item in ds.items() {
        match &item.text {
            Some(text) => {
                ids.push(item.id.clone());
                texts.push(text.as_str());
            }
            None => failures.push((item.id.clone(), "item has no text".to_string())),
        }
    }
    let results = embed_corpus(&t.params, &texts, &t.vocab, &t.cfg, workers);
    let mut ok_ids = Vec::new();
    let mut rows = Vec::new();
    for (id, r) in ids.into_iter().zip(results) {
        match r {
            Ok(e) => {
                ok_ids.push(id);
                rows.push(e.values);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    for (id, msg) in &failures {
        warn!("item {id}: {msg}");
    }
    let matrix = if ok_ids.is_empty() {
        None
    } else {
        let fp = embedding_fingerprint(&t.cfg, &t.params.fingerprint());
        Some(EmbeddingMatrix::from_unit_rows(ok_ids, rows)?.with_fingerprint(fp))
    };
    Ok(Embedded { matrix, failures })
}

/// Embeds every dataset item and writes the store. Items that fail are
/// listed in the manifest; if all fail no store is written.
pub fn cmd_embed(args: &EmbedArgs) -> Result<Outcome> {
    let start = Instant::now();
    let (tuning, epochs) = resolve_tuning(&args.tune, args.epochs)?;
    let ds = load_dataset(&args.dataset)?;
    info!("embedding {} items with {}", ds.len(), tuning.cfg);
    let embedded = embed_dataset(&tuning, &ds, args.tune.workers)?;

    let resolved = EmbedArgs {
        epochs: Some(epochs),
        tune: tuning.resolved.clone(),
        ..args.clone()
    };
    let mut m = RunManifest::new(Command::Embed(resolved));
    m.seeds.insert("micro_tuning".into(), tuning.cfg.seed);
    if let Some(ck) = &tuning.resolved.checkpoint {
        m.input(ck)?;
    }
    m.input(&args.dataset)?;
    if let Some(matrix) = &embedded.matrix {
        save_embeddings(&args.out, matrix)?;
        m.output(&args.out)?;
    }
    m.timed(start, ds.len());
    m.failures = embedded.failures;
    println!(
        "embedded {} of {} items, {:.4} s/sample",
        ds.len() - m.failures.len(),
        ds.len(),
        m.timing.seconds_per_sample
    );
    m.save(manifest_path(&args.out))?;
    Ok(if m.failures.is_empty() {
        Outcome::Success
    } else {
        Outcome::PartialFailure
    })
}

// ---------------------------------------------------------------- eval

/// Native stores are recognized by their magic bytes; otherwise `.csv` files
/// are read as csv vectors and anything else as jsonl vectors.
pub fn load_any_store(path: &Path) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 4];
    let is_native = {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        f.read(&mut magic)? == 4 && &magic == STORE_MAGIC
    };
    if is_native {
        return load_embeddings(path);
    }
    let format = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        VectorFormat::CsvVectors
    } else {
        VectorFormat::JsonlVectors
    };
    let (matrix, report) = import_external(path, format)?;
    for (id, reason) in &report.rejected {
        warn!("{}: rejected {id}: {reason}", path.display());
    }
    Ok(matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub dim: usize,
    pub report: TripletReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Intersection of the first two rows' broken sets.
    pub intersection: Option<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>6} {:>9} {:>9} {:>9} {:>12}\n",
            "store", "dim", "error", "same", "diff", "broken"
        );
        for r in &self.rows {
            s += &format!(
                "{:<10} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>12}\n",
                r.name,
                r.dim,
                r.report.error_global,
                r.report.same_avg,
                r.report.diff_avg,
                r.report.broken_triplets
            );
        }
        if let Some(i) = self.intersection {
            s += &format!("I = {i:.4}\n");
        }
        s
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let start = Instant::now();
    if args.stores.is_empty() || args.stores.len() > 2 {
        return Err(Error::InvalidConfig(format!(
            "expected 1 or 2 stores, got {}",
            args.stores.len()
        )));
    }
    let ds = load_dataset(&args.dataset)?;
    let mut matrices = args
        .stores
        .iter()
        .map(|p| load_any_store(p))
        .collect::<Result<Vec<_>>>()?;
    let mut names = vec!["first".to_string(), "second".to_string()];
    names.truncate(matrices.len());
    if matrices.len() == 2 {
        matrices.push(concat_ensemble(&matrices[0], &matrices[1])?);
        names.push("concat".into());
    }
    let mut rows = Vec::new();
    let mut broken = Vec::new();
    for (name, e) in names.iter().zip(&matrices) {
        rows.push(EvalRow {
            name: name.clone(),
            dim: e.dim(),
            report: evaluate(e, &ds)?,
        });
        broken.push(broken_set(e, &ds, None)?);
    }
    let report = EvalReport {
        intersection: (broken.len() >= 2).then(|| intersection(&broken[0], &broken[1])),
        rows,
    };
    let mut m = RunManifest::new(Command::Eval(args.clone()));
    for p in &args.stores {
        m.input(p)?;
    }
    m.input(&args.dataset)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&args.out, json + "\n")?;
    m.output(&args.out)?;
    if let Some(path) = &args.broken_out {
        for (i, set) in broken.iter().enumerate() {
            let p = if i == 0 {
                path.clone()
            } else {
                with_suffix(path, &format!(".{}", names[i]))
            };
            set.write(&p, &ds)?;
            m.output(&p)?;
        }
    }
    print!("{}", report.table());
    m.timed(start, ds.len());
    m.save(manifest_path(&args.out))?;
    Ok(report)
}

// ---------------------------------------------------------------- count

pub fn cmd_count(args: &CountArgs) -> Result<u64> {
    let start = Instant::now();
    let ds = load_dataset(&args.dataset)?;
    let n = count_triplets(&ds);
    println!("{n}");
    let mut m = RunManifest::new(Command::Count(args.clone()));
    m.input(&args.dataset)?;
    m.timed(start, ds.len());
    match &args.out {
        Some(out) => {
            fs::write(out, format!("{n}\n"))?;
            m.output(out)?;
            m.save(manifest_path(out))?;
        }
        None => eprintln!(
            "{}",
            serde_json::to_string(&m).map_err(|e| Error::InvalidConfig(e.to_string()))?
        ),
    }
    Ok(n)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub epochs: usize,
    pub seconds_per_sample: f64,
    pub error: f64,
    /// Broken-set intersection with the first row.
    pub intersection: f64,
    pub same: f64,
    pub diff: f64,
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("epochs\tsec_per_sample\terror\tI\tsame\tdiff\n");
    for r in rows {
        s += &format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.epochs, r.seconds_per_sample, r.error, r.intersection, r.same, r.diff
        );
    }
    s
}

pub fn parse_epochs_grid(s: &str) -> Result<Vec<usize>> {
    let grid: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&e| e > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad epochs entry {p:?}")))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty epochs grid".into()));
    }
    Ok(grid)
}

/// Embeds and evaluates the dataset once per grid entry. Timing covers input
/// generation and micro-tuning.
pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let start = Instant::now();
    let grid = parse_epochs_grid(&args.epochs_grid)?;
    let (mut tuning, _) = resolve_tuning(&args.tune, None)?;
    let ds = load_dataset(&args.dataset)?;
    let mut rows = Vec::new();
    let mut reference = None;
    for &epochs in &grid {
        tuning.cfg.epochs = epochs;
        let t = Instant::now();
        let embedded = embed_dataset(&tuning, &ds, args.tune.workers)?;
        let per_sample = t.elapsed().as_secs_f64() / ds.len() as f64;
        if !embedded.failures.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "{} items failed at {epochs} epochs, first: {} ({})",
                embedded.failures.len(),
                embedded.failures[0].0,
                embedded.failures[0].1
            )));
        }
        let e = embedded.matrix.ok_or(Error::EmptyCorpus)?;
        let report = evaluate(&e, &ds)?;
        let set = broken_set(&e, &ds, None)?;
        let reference = reference.get_or_insert_with(|| set.clone());
        rows.push(BenchRow {
            epochs,
            seconds_per_sample: per_sample,
            error: report.error_global,
            intersection: intersection(reference, &set),
            same: report.same_avg,
            diff: report.diff_avg,
        });
        info!("bench: {epochs} epochs done");
    }
    let table = bench_table(&rows);
    fs::write(&args.out, &table)?;
    print!("{table}");

    let resolved = BenchArgs {
        tune: tuning.resolved.clone(),
        ..args.clone()
    };
    let mut m = RunManifest::new(Command::Bench(resolved));
    m.seeds.insert("micro_tuning".into(), tuning.cfg.seed);
    if let Some(ck) = &tuning.resolved.checkpoint {
        m.input(ck)?;
    }
    m.input(&args.dataset)?;
    m.output(&args.out)?;
    m.timed(start, ds.len() * grid.len());
    m.save(manifest_path(&args.out))?;
    Ok(rows)
}

// ---------------------------------------------------------------- synth

pub fn synth_spec(args: &SynthArgs) -> SyntheticTopicSpec {
    SyntheticTopicSpec {
        topics: args.topics,
        texts_per_topic: args.texts_per_topic,
        words_per_topic: args.words_per_topic,
        corpus_texts_per_topic: args.corpus_texts_per_topic,
        seed: args.seed,
        ..SyntheticTopicSpec::default()
    }
}

/// Writes `dataset.jsonl`, `corpus.txt` and `manifest.json` into `args.out`.
pub fn cmd_synth(args: &SynthArgs) -> Result<(PathBuf, PathBuf)> {
    let start = Instant::now();
    let data = generate(&synth_spec(args))?;
    fs::create_dir_all(&args.out)?;
    let dataset = args.out.join("dataset.jsonl");
    let corpus = args.out.join("corpus.txt");
    write_dataset(&dataset, &data.dataset)?;
    let mut w = BufWriter::new(fs::File::create(&corpus)?);
    for line in &data.corpus {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    drop(w);

    let mut m = RunManifest::new(Command::Synth(args.clone()));
    m.seeds.insert("generator".into(), args.seed);
    m.output(&dataset)?;
    m.output(&corpus)?;
    m.timed(start, data.dataset.len());
    m.save(args.out.join("manifest.json"))?;
    println!(
        "{} items, {} corpus lines",
        data.dataset.len(),
        data.corpus.len()
    );
    Ok((dataset, corpus))
}
