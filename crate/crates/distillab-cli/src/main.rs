//! Command line front end for the pipeline: corpus synthesis, teacher
//! training, pseudo-label generation, student distillation, evaluation,
//! and analysis exports.
//!
//! Configuration is layered: built-in defaults, then an optional JSON
//! config file (`--config`), then flags, in increasing precedence. Every
//! run writes a manifest next to its primary output holding the fully
//! resolved configuration plus SHA-256 digests of all inputs and outputs,
//! so a completed run can be reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use distillab::corpus::{
    load_jsonl, split_corpus, synth_corpus_generate, tokenize_corpus, write_jsonl, Corpus,
    SynthConfig, TokenizedCorpus, Vocabulary,
};
use distillab::decoding::{
    BeamConfig, DecoderRegistry, LambdaSpec, TraceAggregation,
};
use distillab::digest::digest_file;
use distillab::distill::{
    evaluate_model, generate_pseudo_labels, init_student_from_teacher, load_pseudo_jsonl,
    model_digest, pseudo_to_corpus, train_model, write_attention_dumps, write_pseudo_jsonl, Init,
    LayerSelection, PseudoGenConfig, TrainConfig, TrainResult,
};
use distillab::metrics::{
    evaluate_system, evident_attention_histogram, histogram_csv, EvalRow, MetricsReport,
    RougeMode, SystemMetrics,
};
use distillab::model::{Model, ModelConfig};

#[derive(Parser)]
#[command(
    name = "distillab",
    version,
    about = "Desk-scale seq2seq distillation lab with attention-temperature pseudo-labeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write train/valid/test splits plus
    /// the vocabulary.
    Synth(SynthArgs),
    /// Train a model on gold pairs and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Generate pseudo-labels for a corpus with a trained teacher.
    Pseudo(PseudoArgs),
    /// Initialize a student from a teacher and train it on pseudo-labels.
    Distill(DistillArgs),
    /// Decode a corpus with a model and score it against the gold summaries.
    Eval(EvalArgs),
    /// Score an existing system output file against its source corpus.
    Analyze(AnalyzeArgs),
    /// Aggregate attention dumps into a source-position histogram.
    AttnStats(AttnStatsArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SamplerArg {
    Beam,
    Ancestral,
    Nucleus,
}

impl SamplerArg {
    fn name(self) -> &'static str {
        match self {
            SamplerArg::Beam => "beam",
            SamplerArg::Ancestral => "ancestral",
            SamplerArg::Nucleus => "nucleus",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    #[value(name = "linear-warmup-constant")]
    LinearWarmupConstant,
    #[value(name = "inverse-sqrt")]
    InverseSqrt,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum RougeModeArg {
    #[value(name = "f1")]
    F1,
    #[value(name = "limited_recall")]
    LimitedRecall,
}

impl From<RougeModeArg> for RougeMode {
    fn from(m: RougeModeArg) -> Self {
        match m {
            RougeModeArg::F1 => RougeMode::F1,
            RougeModeArg::LimitedRecall => RougeMode::LimitedRecall,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SelectionArg {
    #[value(name = "first_k")]
    FirstK,
    #[value(name = "maximally_spaced")]
    MaximallySpaced,
}

impl From<SelectionArg> for LayerSelection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::FirstK => LayerSelection::FirstK,
            SelectionArg::MaximallySpaced => LayerSelection::MaximallySpaced,
        }
    }
}

/// Sections a JSON config file may carry; anything omitted keeps its
/// built-in default, and unknown keys are rejected.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    decode: BeamConfig,
    synth: SynthConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: BeamConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Overlays `over` onto `base` key by key, erroring on keys the defaults
/// do not know, so config typos fail loudly instead of silently keeping a
/// default.
fn merge_config(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match over {
        Value::Object(entries) if base.is_object() => {
            for (key, value) in entries {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match base.get_mut(key) {
                    Some(slot) => merge_config(slot, value, &child)?,
                    None => bail!("unknown config key '{child}'"),
                }
            }
            Ok(())
        }
        _ => {
            *base = over.clone();
            Ok(())
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let mut base = serde_json::to_value(FileConfig::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading config file {}", p.display()))?;
        let over: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", p.display()))?;
        merge_config(&mut base, &over, "")?;
    }
    serde_json::from_value(base).context("resolving config")
}

/// One run's provenance: the fully resolved configuration and digests of
/// everything read and written.
#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(subcommand: &str, config: Value) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    /// Writes `<file>.manifest.json` next to the primary output.
    fn write_beside(&self, primary: &Path) -> Result<PathBuf> {
        let name = primary
            .file_name()
            .ok_or_else(|| anyhow!("output path {} has no file name", primary.display()))?;
        let mut file = name.to_os_string();
        file.push(".manifest.json");
        let path = primary.with_file_name(file);
        self.write_to(&path)?;
        Ok(path)
    }

    fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    load_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading vocabulary {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing vocabulary {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_losses_csv(result: &TrainResult, path: &Path) -> Result<()> {
    let mut out = String::from("step,train_loss,val_loss\n");
    let mut val = result.val_losses.iter().peekable();
    for (i, loss) in result.train_losses.iter().enumerate() {
        let step = (i + 1) as u64;
        let v = match val.peek() {
            Some(&&(s, v)) if s == step => {
                val.next();
                v.to_string()
            }
            _ => String::new(),
        };
        out.push_str(&format!("{step},{loss},{v}\n"));
    }
    std::fs::write(path, out).with_context(|| format!("writing losses {}", path.display()))?;
    Ok(())
}

// --- synth ---

#[derive(Args)]
struct SynthArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of documents before splitting.
    #[arg(long)]
    docs: Option<usize>,
    /// Key-sentence position skew in [0, 1]: 0 uniform, 1 front-only.
    #[arg(long)]
    lead_skew: Option<f64>,
    /// Per-word probability of rewriting a summary word to its synonym.
    #[arg(long)]
    paraphrase: Option<f64>,
    /// Distinct content words in the generator vocabulary.
    #[arg(long)]
    vocab_words: Option<usize>,
    /// Key sentences per document.
    #[arg(long)]
    key_sentences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of documents held out for validation.
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    /// Fraction of documents held out for test.
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    /// Output directory for train/valid/test JSONL and vocab.json.
    #[arg(long)]
    out: PathBuf,
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut cfg = file.synth;
    if let Some(n) = args.docs {
        cfg.num_documents = n;
    }
    if let Some(s) = args.lead_skew {
        cfg.lead_skew = s;
    }
    if let Some(p) = args.paraphrase {
        cfg.paraphrase_rate = p;
    }
    if let Some(v) = args.vocab_words {
        cfg.vocab_words = v;
    }
    if let Some(k) = args.key_sentences {
        cfg.key_sentences = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }

    let corpus = synth_corpus_generate(&cfg)?;
    let (train, valid, test) = split_corpus(&corpus, args.valid_frac, args.test_frac)?;
    let vocab = Vocabulary::build(&train, 1)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let train_path = args.out.join("train.jsonl");
    let valid_path = args.out.join("valid.jsonl");
    let test_path = args.out.join("test.jsonl");
    let vocab_path = args.out.join("vocab.json");
    write_jsonl(&train, &train_path)?;
    write_jsonl(&valid, &valid_path)?;
    write_jsonl(&test, &test_path)?;
    std::fs::write(&vocab_path, serde_json::to_vec_pretty(&vocab)?)?;

    let mut manifest = RunManifest::new(
        "synth",
        serde_json::json!({
            "synth": cfg,
            "valid_frac": args.valid_frac,
            "test_frac": args.test_frac,
        }),
    );
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    for p in [&train_path, &valid_path, &test_path, &vocab_path] {
        manifest.output(p)?;
    }
    manifest.write_to(&args.out.join("manifest.json"))?;

    println!(
        "wrote {} train / {} valid / {} test examples, vocabulary of {} tokens, to {}",
        train.len(),
        valid.len(),
        test.len(),
        vocab.len(),
        args.out.display()
    );
    Ok(())
}

// --- train ---

#[derive(Args)]
struct TrainOverrides {
    /// Base learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Warmup steps.
    #[arg(long)]
    warmup: Option<u64>,
    /// Total optimization steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Summed target tokens per batch.
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    /// Steps between validation passes.
    #[arg(long)]
    val_interval: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.batch_tokens {
            cfg.batch_tokens = v;
        }
        if let Some(v) = self.label_smoothing {
            cfg.label_smoothing = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.schedule {
            cfg.schedule = match v {
                ScheduleArg::LinearWarmupConstant => {
                    distillab::optim::ScheduleKind::LinearWarmupConstant
                }
                ScheduleArg::InverseSqrt => distillab::optim::ScheduleKind::InverseSqrt,
            };
        }
        if let Some(v) = self.val_interval {
            cfg.val_interval = v;
        }
    }
}

#[derive(Args)]
struct ModelOverrides {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.n_heads {
            cfg.n_heads = v;
        }
        if let Some(v) = self.encoder_layers {
            cfg.encoder_layers = v;
        }
        if let Some(v) = self.decoder_layers {
            cfg.decoder_layers = v;
        }
        if let Some(v) = self.d_ff {
            cfg.d_ff = v;
        }
        if let Some(v) = self.max_seq_len {
            cfg.max_seq_len = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gold training pairs (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    /// Gold validation pairs (JSONL) for checkpoint selection.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Vocabulary JSON written by synth; fixes the model's token table.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    model: ModelOverrides,
    /// Output model file; a loss-curve CSV lands beside it.
    #[arg(long)]
    out: PathBuf,
}

fn tokenized_or_empty(
    path: Option<&Path>,
    vocab: &Vocabulary,
) -> Result<(TokenizedCorpus, Option<Corpus>)> {
    match path {
        Some(p) => {
            let corpus = load_corpus(p)?;
            Ok((tokenize_corpus(&corpus, vocab), Some(corpus)))
        }
        None => Ok((TokenizedCorpus::default(), None)),
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let vocab = load_vocab(&args.vocab)?;
    let mut model_cfg = file.model;
    args.model.apply(&mut model_cfg);
    // The token table is an input artifact, not a tunable: the embedding
    // rows must line up with it exactly.
    model_cfg.vocab_size = vocab.len();
    let mut train_cfg = file.train;
    args.train.apply(&mut train_cfg);
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }

    let corpus = load_corpus(&args.corpus)?;
    let train_tok = tokenize_corpus(&corpus, &vocab);
    let (valid_tok, _) = tokenized_or_empty(args.valid.as_deref(), &vocab)?;

    let result = train_model(&train_tok, &valid_tok, &model_cfg, &train_cfg, Init::Fresh)?;
    result.model.save(&args.out)?;
    let losses_path = args.out.with_extension("losses.csv");
    write_losses_csv(&result, &losses_path)?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({ "model": model_cfg, "train": train_cfg }),
    );
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    manifest.input(&args.corpus)?;
    if let Some(v) = &args.valid {
        manifest.input(v)?;
    }
    manifest.input(&args.vocab)?;
    manifest.output(&args.out)?;
    manifest.output(&losses_path)?;
    manifest.write_beside(&args.out)?;

    let first = result.train_losses.first().copied().unwrap_or(f64::NAN);
    let last = result.train_losses.last().copied().unwrap_or(f64::NAN);
    match result.best_val_loss {
        Some(v) => println!(
            "trained {} steps (loss {first:.4} -> {last:.4}), best validation {v:.4} at step {}, saved {}",
            train_cfg.total_steps,
            result.best_step,
            args.out.display()
        ),
        None => println!(
            "trained {} steps (loss {first:.4} -> {last:.4}), no validation set, saved {}",
            train_cfg.total_steps,
            args.out.display()
        ),
    }
    Ok(())
}

// --- pseudo ---

#[derive(Args)]
struct DecodeOverrides {
    /// Decoding strategy.
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Nucleus mass for --sampler nucleus.
    #[arg(long)]
    top_p: Option<f64>,
    /// Beam width for --sampler beam.
    #[arg(long)]
    beam: Option<usize>,
    /// Length-normalization exponent.
    #[arg(long)]
    length_penalty: Option<f64>,
    /// Minimum generated tokens before the end marker is allowed.
    #[arg(long)]
    min_len: Option<usize>,
    /// Maximum generated tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Softmax temperature over output logits (samplers only).
    #[arg(long)]
    output_temp: Option<f64>,
}

impl DecodeOverrides {
    fn apply(&self, cfg: &mut BeamConfig) {
        if let Some(v) = self.beam {
            cfg.beam_size = v;
        }
        if let Some(v) = self.length_penalty {
            cfg.length_penalty_alpha = v;
        }
        if let Some(v) = self.min_len {
            cfg.min_length = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_length = v;
        }
        if let Some(v) = self.output_temp {
            cfg.output_temperature = v;
        }
    }

    fn sampler_name(&self) -> &'static str {
        self.sampler.unwrap_or(SamplerArg::Beam).name()
    }

    fn registry(&self) -> DecoderRegistry {
        DecoderRegistry::with_defaults(self.top_p.unwrap_or(0.9))
    }
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("lambda_mode").required(true)))]
struct LambdaArgs {
    /// Fixed attention-temperature coefficient for every document.
    #[arg(long, group = "lambda_mode")]
    lambda: Option<f64>,
    /// Uniform coefficient range [A, B]; one draw per document.
    #[arg(long, num_args = 2, value_names = ["A", "B"], group = "lambda_mode")]
    lambda_range: Option<Vec<f64>>,
    /// Override the coefficient for encoder self-attention only.
    #[arg(long)]
    lambda_enc: Option<f64>,
    /// Override the coefficient for cross-attention only.
    #[arg(long)]
    lambda_cross: Option<f64>,
    /// Override the coefficient for decoder self-attention only.
    #[arg(long)]
    lambda_dec: Option<f64>,
}

impl LambdaArgs {
    fn spec(&self) -> Result<LambdaSpec> {
        let mut spec = match (&self.lambda, &self.lambda_range) {
            (Some(l), None) => LambdaSpec::fixed(*l),
            (None, Some(r)) => LambdaSpec::range(r[0], r[1]),
            _ => bail!("exactly one of --lambda or --lambda-range is required"),
        };
        spec.enc = self.lambda_enc;
        spec.cross = self.lambda_cross;
        spec.dec = self.lambda_dec;
        Ok(spec)
    }
}

#[derive(Args)]
struct PseudoArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained teacher model file.
    #[arg(long)]
    model: PathBuf,
    /// Documents to pseudo-label (JSONL; summaries are not read).
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary JSON the teacher was trained against.
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    lambda: LambdaArgs,
    #[command(flatten)]
    decode: DecodeOverrides,
    /// Write one cross-attention map JSON per document into this directory.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Dump a single head's map (given as LAYER:HEAD) instead of the mean
    /// over layers and heads.
    #[arg(long, value_name = "LAYER:HEAD")]
    trace_head: Option<String>,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    /// Worker threads for decoding; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Output pseudo-label JSONL.
    #[arg(long)]
    out: PathBuf,
}

fn parse_trace(arg: Option<&str>) -> Result<TraceAggregation> {
    match arg {
        None => Ok(TraceAggregation::Mean),
        Some(s) => {
            let (layer, head) = s
                .split_once(':')
                .ok_or_else(|| anyhow!("--trace-head expects LAYER:HEAD, got '{s}'"))?;
            Ok(TraceAggregation::Single {
                layer: layer.parse().context("parsing trace layer")?,
                head: head.parse().context("parsing trace head")?,
            })
        }
    }
}

fn in_worker_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building worker pool")?;
            Ok(pool.install(job))
        }
    }
}

fn run_pseudo(args: &PseudoArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut decode = file.decode;
    args.decode.apply(&mut decode);
    let lambda = args.lambda.spec()?;
    let teacher = load_model(&args.model)?;
    let vocab = load_vocab(&args.vocab)?;
    let corpus = load_corpus(&args.corpus)?;

    let capture = if args.dump_attention.is_some() {
        Some(parse_trace(args.trace_head.as_deref())?)
    } else {
        None
    };
    let registry = args.decode.registry();
    let strategy = registry.get(args.decode.sampler_name())?;
    let gen_cfg = PseudoGenConfig { decode: decode.clone(), lambda: lambda.clone(), seed: args.seed, capture };

    let labels = in_worker_pool(args.workers, || {
        generate_pseudo_labels(&teacher, &vocab, &corpus, strategy, &gen_cfg)
    })??;

    for failure in &labels.failures {
        eprintln!("skipped '{}': {}", failure.id, failure.error);
    }
    write_pseudo_jsonl(&labels.records, &args.out)?;
    let dump_paths = match &args.dump_attention {
        Some(dir) => write_attention_dumps(&labels.dumps, dir)?,
        None => Vec::new(),
    };

    let mut manifest = RunManifest::new(
        "pseudo",
        serde_json::json!({
            "decode": decode,
            "lambda": lambda,
            "sampler": args.decode.sampler_name(),
            "top_p": args.decode.top_p,
            "trace": capture,
            "seed": args.seed,
            "teacher_digest": labels.teacher_digest,
            "decoder_digest": labels.decoder_digest,
            "skipped": labels.failures,
        }),
    );
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    manifest.input(&args.model)?;
    manifest.input(&args.corpus)?;
    manifest.input(&args.vocab)?;
    manifest.output(&args.out)?;
    for p in &dump_paths {
        manifest.output(p)?;
    }
    manifest.write_beside(&args.out)?;

    println!(
        "pseudo-labeled {} of {} documents ({} skipped) -> {}",
        labels.records.len(),
        corpus.len(),
        labels.failures.len(),
        args.out.display()
    );
    Ok(())
}

// --- distill ---

#[derive(Args)]
struct DistillArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained teacher model file.
    #[arg(long)]
    teacher: PathBuf,
    /// JSON file with the student's full model configuration; defaults to
    /// the teacher's configuration.
    #[arg(long)]
    student_config: Option<PathBuf>,
    /// Shortcut: clone the teacher configuration with this decoder depth.
    #[arg(long, conflicts_with = "student_config")]
    decoder_layers: Option<usize>,
    /// How the student decoder picks teacher layers.
    #[arg(long, value_enum)]
    init: SelectionArg,
    /// Pseudo-label JSONL to train on.
    #[arg(long)]
    pseudo: PathBuf,
    /// Gold validation pairs (JSONL) for checkpoint selection.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Vocabulary JSON the teacher was trained against.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainOverrides,
    /// Output student model file; a loss-curve CSV lands beside it.
    #[arg(long)]
    out: PathBuf,
}

fn run_distill(args: &DistillArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let teacher = load_model(&args.teacher)?;
    let vocab = load_vocab(&args.vocab)?;

    let student_cfg = match (&args.student_config, args.decoder_layers) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading student config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing student config {}", path.display()))?
        }
        (None, Some(k)) => ModelConfig { decoder_layers: k, ..teacher.config.clone() },
        (None, None) => teacher.config.clone(),
    };
    let mut train_cfg = file.train;
    args.train.apply(&mut train_cfg);
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }

    let records = load_pseudo_jsonl(&args.pseudo)
        .with_context(|| format!("loading pseudo-labels {}", args.pseudo.display()))?;
    let teacher_digest = model_digest(&teacher)?;
    let mismatched =
        records.iter().filter(|r| r.teacher_digest != teacher_digest).count();
    if mismatched > 0 {
        eprintln!(
            "warning: {mismatched} of {} pseudo-labels carry a different teacher digest",
            records.len()
        );
    }
    let pseudo_corpus = pseudo_to_corpus(&records)?;
    let train_tok = tokenize_corpus(&pseudo_corpus, &vocab);
    let (valid_tok, _) = tokenized_or_empty(args.valid.as_deref(), &vocab)?;

    let init = init_student_from_teacher(&teacher, &student_cfg, args.init.into())?;
    let result =
        train_model(&train_tok, &valid_tok, &student_cfg, &train_cfg, Init::From(init.params))?;
    result.model.save(&args.out)?;
    let losses_path = args.out.with_extension("losses.csv");
    write_losses_csv(&result, &losses_path)?;

    let mut manifest = RunManifest::new(
        "distill",
        serde_json::json!({
            "student_model": student_cfg,
            "train": train_cfg,
            "init": LayerSelection::from(args.init),
            "teacher_digest": teacher_digest,
        }),
    );
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    manifest.input(&args.teacher)?;
    manifest.input(&args.pseudo)?;
    if let Some(v) = &args.valid {
        manifest.input(v)?;
    }
    manifest.input(&args.vocab)?;
    manifest.output(&args.out)?;
    manifest.output(&losses_path)?;
    manifest.write_beside(&args.out)?;

    println!(
        "distilled {}-layer decoder student over {} pseudo-labels, saved {}",
        student_cfg.decoder_layers,
        records.len(),
        args.out.display()
    );
    Ok(())
}

// --- eval ---

#[derive(Args)]
struct EvalArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to decode with.
    #[arg(long)]
    model: PathBuf,
    /// Gold pairs to score against (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary JSON the model was trained against.
    #[arg(long)]
    vocab: PathBuf,
    /// ROUGE aggregation mode.
    #[arg(long, value_enum, default_value = "f1")]
    rouge_mode: RougeModeArg,
    /// Fixed attention-temperature coefficient during decoding.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[command(flatten)]
    decode: DecodeOverrides,
    /// Leading front fraction for the position-bias score.
    #[arg(long, default_value_t = 0.4)]
    leading_fraction: f64,
    /// Minimum copied-span length in words.
    #[arg(long, default_value_t = 3)]
    min_span: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    /// Output report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Also write the report as a one-row-per-system CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn system_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "system".into())
}

fn write_report(
    name: &str,
    metrics: SystemMetrics,
    report_path: &Path,
    csv_path: Option<&Path>,
) -> Result<MetricsReport> {
    let mut report = MetricsReport { systems: indexmap::IndexMap::new(), attention: None };
    report.systems.insert(name.to_string(), metrics);
    std::fs::write(report_path, serde_json::to_vec_pretty(&report)?)
        .with_context(|| format!("writing report {}", report_path.display()))?;
    if let Some(p) = csv_path {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(report)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut decode = file.decode;
    args.decode.apply(&mut decode);
    let model = load_model(&args.model)?;
    let vocab = load_vocab(&args.vocab)?;
    let corpus = load_corpus(&args.corpus)?;
    let registry = args.decode.registry();
    let strategy = registry.get(args.decode.sampler_name())?;

    let metrics = evaluate_model(
        &model,
        &vocab,
        &corpus,
        strategy,
        &decode,
        &LambdaSpec::fixed(args.lambda),
        args.seed,
        args.rouge_mode.into(),
        args.leading_fraction,
        args.min_span,
    )?;
    let name = system_name(&args.model);
    let report = write_report(&name, metrics, &args.report, args.csv.as_deref())?;

    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({
            "decode": decode,
            "sampler": args.decode.sampler_name(),
            "top_p": args.decode.top_p,
            "lambda": args.lambda,
            "rouge_mode": RougeMode::from(args.rouge_mode),
            "leading_fraction": args.leading_fraction,
            "min_span": args.min_span,
            "seed": args.seed,
        }),
    );
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    manifest.input(&args.model)?;
    manifest.input(&args.corpus)?;
    manifest.input(&args.vocab)?;
    manifest.output(&args.report)?;
    if let Some(p) = &args.csv {
        manifest.output(p)?;
    }
    manifest.write_beside(&args.report)?;

    let m = &report.systems[&name];
    println!(
        "{name}: rouge1 {:.4}, rouge2 {:.4}, rougeL {:.4}, mean length {:.1} -> {}",
        m.rouge1,
        m.rouge2,
        m.rouge_l,
        m.mean_length,
        args.report.display()
    );
    Ok(())
}

// --- analyze ---

#[derive(Args)]
struct AnalyzeArgs {
    /// System output JSONL: pseudo-label records or id/document/summary
    /// rows.
    #[arg(long)]
    system: PathBuf,
    /// Gold corpus the system summarized (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "f1")]
    rouge_mode: RougeModeArg,
    #[arg(long, default_value_t = 0.4)]
    leading_fraction: f64,
    #[arg(long, default_value_t = 3)]
    min_span: usize,
    /// Output report JSON.
    #[arg(long)]
    report: PathBuf,
    /// Also write the report as a one-row-per-system CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// System summaries keyed by id: pseudo-label JSONL when the lines carry
/// a lambda, plain corpus JSONL otherwise.
fn load_system_summaries(path: &Path) -> Result<Vec<(String, String)>> {
    match load_pseudo_jsonl(path) {
        Ok(records) => Ok(records.into_iter().map(|r| (r.id, r.summary)).collect()),
        Err(_) => {
            let corpus = load_corpus(path)?;
            Ok(corpus.examples.into_iter().map(|e| (e.id, e.summary)).collect())
        }
    }
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let system = load_system_summaries(&args.system)?;
    let corpus = load_corpus(&args.corpus)?;
    let by_id: std::collections::HashMap<&str, &distillab::corpus::Example> =
        corpus.examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut rows = Vec::with_capacity(system.len());
    for (id, summary) in &system {
        let gold = by_id.get(id.as_str()).ok_or_else(|| {
            anyhow!("system id '{id}' not present in {}", args.corpus.display())
        })?;
        rows.push(EvalRow {
            candidate: summary.clone(),
            reference: gold.summary.clone(),
            document: gold.document.clone(),
        });
    }
    let metrics =
        evaluate_system(&rows, args.rouge_mode.into(), args.leading_fraction, args.min_span)?;
    let name = system_name(&args.system);
    let report = write_report(&name, metrics, &args.report, args.csv.as_deref())?;

    let mut manifest = RunManifest::new(
        "analyze",
        serde_json::json!({
            "rouge_mode": RougeMode::from(args.rouge_mode),
            "leading_fraction": args.leading_fraction,
            "min_span": args.min_span,
        }),
    );
    manifest.input(&args.system)?;
    manifest.input(&args.corpus)?;
    manifest.output(&args.report)?;
    if let Some(p) = &args.csv {
        manifest.output(p)?;
    }
    manifest.write_beside(&args.report)?;

    let m = &report.systems[&name];
    println!(
        "{name}: {} summaries, mean length {:.1}, novel 1-grams {:.4}, copied spans {:.4}, leading bias {:.4} -> {}",
        rows.len(),
        m.mean_length,
        m.novel_ngram[0],
        m.copied_span_fraction,
        m.leading_bias_fraction,
        args.report.display()
    );
    Ok(())
}

// --- attn-stats ---

#[derive(Args)]
struct AttnStatsArgs {
    /// Directory of per-document attention JSON dumps.
    #[arg(long)]
    attn: PathBuf,
    /// Weights strictly above this count as evident.
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    /// Number of relative-position bins.
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Output histogram CSV.
    #[arg(long)]
    csv: PathBuf,
    /// Optional JSON report with the full histogram.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn run_attn_stats(args: &AttnStatsArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.attn)
        .with_context(|| format!("reading {}", args.attn.display()))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().is_some_and(|e| e == "json")).then_some(path)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .json attention dumps in {}", args.attn.display());
    }

    let mut traces = Vec::with_capacity(paths.len());
    let mut manifest_inputs = Vec::new();
    for path in &paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let dump: distillab::decoding::AttentionDump = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        traces.push(dump.attention);
        manifest_inputs.push(path.clone());
    }
    let histogram = evident_attention_histogram(&traces, args.threshold, args.bins)?;
    std::fs::write(&args.csv, histogram_csv(&histogram))
        .with_context(|| format!("writing {}", args.csv.display()))?;
    if let Some(p) = &args.report {
        std::fs::write(p, serde_json::to_vec_pretty(&histogram)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }

    let mut manifest = RunManifest::new(
        "attn-stats",
        serde_json::json!({ "threshold": args.threshold, "bins": args.bins }),
    );
    for p in &manifest_inputs {
        manifest.input(p)?;
    }
    manifest.output(&args.csv)?;
    if let Some(p) = &args.report {
        manifest.output(p)?;
    }
    manifest.write_beside(&args.csv)?;

    match &histogram.bin_proportions {
        Some(props) => println!(
            "{} documents ({} with evident weight), evident rate {:.4}, bins [{}] -> {}",
            traces.len(),
            histogram.docs_with_evident,
            histogram.evident_rate,
            props.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", "),
            args.csv.display()
        ),
        None => println!(
            "{} documents, no weight above {}; histogram undefined -> {}",
            traces.len(),
            args.threshold,
            args.csv.display()
        ),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => run_synth(&args),
        Command::Train(args) => run_train(&args),
        Command::Pseudo(args) => run_pseudo(&args),
        Command::Distill(args) => run_distill(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Analyze(args) => run_analyze(&args),
        Command::AttnStats(args) => run_attn_stats(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
