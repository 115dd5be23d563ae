//! Pipeline stages for teacher/student distillation: gold-data training,
//! temperature-rescaled pseudo-labeling, student initialization from
//! teacher decoder layers, and a grid runner that trains and scores one
//! student per lambda setting.
//!
//! Training is single-writer: gradients for a batch are computed in
//! parallel per example (each example owns a derived dropout stream, so
//! results do not depend on thread count), then reduced and applied in
//! corpus order by the one training loop. Pseudo-labeling is parallel
//! across documents with per-document seeds.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::corpus::{tokenize_corpus, Corpus, Example, TokenizedCorpus, Vocabulary};
use crate::decoding::{
    decode_document, doc_seed, AttentionDump, BeamConfig, DecodeStrategy, LambdaSpec,
    TraceAggregation,
};
use crate::digest::{digest_bytes, digest_file, fnv1a64};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_system, EvalRow, RougeMode, SystemMetrics};
use crate::model::{Gradients, Model, ModelConfig, Parameters};
use crate::optim::{adam_step, lr_at, AdamHyper, AdamState, ScheduleKind};

/// Fraction of per-document decode failures above which a pseudo-labeling
/// run is aborted instead of returning a thinned corpus.
pub const FAILURE_RATE_LIMIT: f64 = 0.01;

/// Optimization settings for one training run. The batch size is a token
/// budget: each step packs shuffled examples until their summed target
/// lengths (summary plus end marker) reach `batch_tokens`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: ScheduleKind,
    /// Validation cadence in steps; the final step always validates.
    pub val_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_tokens: 256,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            schedule: ScheduleKind::LinearWarmupConstant,
            val_interval: 100,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid_argument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid_argument("total_steps must be at least 1"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid_argument(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_tokens == 0 {
            return Err(Error::invalid_argument("batch_tokens must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid_argument(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::invalid_argument(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid_argument(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.val_interval == 0 {
            return Err(Error::invalid_argument("val_interval must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

/// Starting point for training: fresh random weights or a given checkpoint.
#[derive(Clone, Debug)]
pub enum Init {
    Fresh,
    From(Parameters),
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Best-validation checkpoint; the final weights when no validation ran.
    pub model: Model,
    /// One mean batch loss per step.
    pub train_losses: Vec<f64>,
    /// (step, mean validation loss) at each validation point.
    pub val_losses: Vec<(u64, f64)>,
    /// Step whose checkpoint is in `model`; `total_steps` when no
    /// validation ran. Ties keep the earliest step.
    pub best_step: u64,
    pub best_val_loss: Option<f64>,
}

fn check_vocabulary(corpus: &TokenizedCorpus, vocab_size: usize, what: &str) -> Result<()> {
    for ex in &corpus.examples {
        if ex.summary.is_empty() {
            return Err(Error::invalid_argument(format!(
                "{what} example '{}' has an empty summary",
                ex.id
            )));
        }
        for &t in ex.document.iter().chain(&ex.summary) {
            if t >= vocab_size {
                return Err(Error::invalid_argument(format!(
                    "{what} example '{}' holds token id {t} outside the model vocabulary of size {vocab_size}",
                    ex.id
                )));
            }
        }
    }
    Ok(())
}

fn example_seed(run_seed: u64, step: u64, id: &str) -> u64 {
    let mut buf = Vec::with_capacity(16 + id.len());
    buf.extend_from_slice(&run_seed.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(id.as_bytes());
    fnv1a64(&buf)
}

/// Shuffled epoch stream packing examples into token-budget batches. An
/// epoch boundary closes the current batch, so every epoch is exactly one
/// permutation of the corpus.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchStream { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, corpus: &TokenizedCorpus, batch_tokens: usize) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0usize;
        loop {
            if self.cursor == self.order.len() {
                if !batch.is_empty() {
                    break;
                }
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            tokens += corpus.examples[idx].summary.len() + 1;
            batch.push(idx);
            if tokens >= batch_tokens {
                break;
            }
        }
        batch
    }
}

/// Mean per-example loss over `valid` with dropout disabled.
pub fn validation_loss(model: &Model, valid: &TokenizedCorpus, epsilon: f64) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::invalid_argument("validation corpus is empty"));
    }
    let losses: Vec<f64> = valid
        .examples
        .par_iter()
        .map(|ex| model.forward_loss(&ex.document, &ex.summary, epsilon, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains a model on `train`, validating on `valid` every `val_interval`
/// steps, and returns the best-validation checkpoint together with the
/// loss curves. An empty `valid` skips validation and returns the final
/// weights. Deterministic for a fixed config, including across thread
/// counts: each example's dropout stream is derived from (seed, step,
/// example id), and reductions run in batch order.
pub fn train_model(
    train: &TokenizedCorpus,
    valid: &TokenizedCorpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    init: Init,
) -> Result<TrainResult> {
    cfg.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid_argument("training corpus is empty"));
    }
    check_vocabulary(train, model_config.vocab_size, "training")?;
    check_vocabulary(valid, model_config.vocab_size, "validation")?;

    let params = match init {
        Init::Fresh => Parameters::init(model_config, cfg.seed)?,
        Init::From(p) => {
            p.validate_against(model_config)?;
            p
        }
    };
    let mut model = Model::new(model_config.clone(), params)?;

    let hp = cfg.adam();
    let mut states: IndexMap<String, AdamState> =
        model.params.iter().map(|(n, t)| (n.clone(), AdamState::new(t.numel()))).collect();

    let mut stream = BatchStream::new(train.len(), example_seed(cfg.seed, 0, "batch-order"));
    let mut train_losses = Vec::with_capacity(cfg.total_steps as usize);
    let mut val_losses: Vec<(u64, f64)> = Vec::new();
    let mut best: Option<(u64, f64, Parameters)> = None;

    for step in 1..=cfg.total_steps {
        let batch = stream.next_batch(train, cfg.batch_tokens);
        let per: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|&i| {
                let ex = &train.examples[i];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, step, &ex.id));
                model.forward_loss_grad(&ex.document, &ex.summary, cfg.label_smoothing, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        let k = per.len() as f64;
        let mut loss = 0.0;
        let mut acc: Gradients = IndexMap::new();
        for (l, grads) in per {
            loss += l;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => {
                        for (ai, gi) in a.iter_mut().zip(&g) {
                            *ai += gi;
                        }
                    }
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        loss /= k;
        train_losses.push(loss);

        let lr = lr_at(cfg.schedule, cfg.learning_rate, cfg.warmup_steps, step);
        for (name, state) in states.iter_mut() {
            if let Some(grad) = acc.get_mut(name) {
                for g in grad.iter_mut() {
                    *g /= k;
                }
                adam_step(model.params.get_mut(name)?, grad, state, &hp, lr)?;
            }
        }

        if !valid.is_empty() && (step % cfg.val_interval == 0 || step == cfg.total_steps) {
            let vl = validation_loss(&model, valid, cfg.label_smoothing)?;
            val_losses.push((step, vl));
            if best.as_ref().is_none_or(|(_, b, _)| vl < *b) {
                best = Some((step, vl, model.params.clone()));
            }
        }
    }

    match best {
        Some((best_step, best_loss, params)) => Ok(TrainResult {
            model: Model::new(model_config.clone(), params)?,
            train_losses,
            val_losses,
            best_step,
            best_val_loss: Some(best_loss),
        }),
        None => Ok(TrainResult {
            best_step: cfg.total_steps,
            model,
            train_losses,
            val_losses,
            best_val_loss: None,
        }),
    }
}

/// SHA-256 over the model's serialized image.
pub fn model_digest(model: &Model) -> Result<String> {
    Ok(digest_bytes(&model.to_bytes()?))
}

/// One pseudo-labeled pair as serialized to JSONL. Documents are carried
/// verbatim from the source corpus; the summary is the detokenized
/// generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub id: String,
    pub document: String,
    pub summary: String,
    /// Scalar lambda actually applied for this document (the draw itself
    /// in range mode, not the range).
    pub lambda: f64,
    pub teacher_digest: String,
}

/// Per-document decode failure kept for the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoFailure {
    pub id: String,
    pub error: String,
}

/// Output of one pseudo-labeling pass over a corpus.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Source-corpus order, minus failed documents.
    pub records: Vec<PseudoRecord>,
    pub failures: Vec<PseudoFailure>,
    pub teacher_digest: String,
    /// Digest over decode config, lambda spec, sampler name, and seed.
    pub decoder_digest: String,
    /// One aggregated cross-attention map per record when capture is on.
    pub dumps: Vec<AttentionDump>,
}

#[derive(Clone, Debug)]
pub struct PseudoGenConfig {
    pub decode: BeamConfig,
    pub lambda: LambdaSpec,
    pub seed: u64,
    /// Capture aggregated cross-attention maps alongside each record.
    pub capture: Option<TraceAggregation>,
}

fn decoder_config_digest(
    decode: &BeamConfig,
    lambda: &LambdaSpec,
    sampler: &str,
    seed: u64,
) -> Result<String> {
    #[derive(Serialize)]
    struct Stamp<'a> {
        decode: &'a BeamConfig,
        lambda: &'a LambdaSpec,
        sampler: &'a str,
        seed: u64,
    }
    Ok(digest_bytes(&serde_json::to_vec(&Stamp { decode, lambda, sampler, seed })?))
}

/// Decodes one summary per document and returns them as pseudo-label
/// records in corpus order. Individual decode failures are recorded and
/// skipped; the run fails only when they exceed `FAILURE_RATE_LIMIT`.
/// Deterministic regardless of thread count: each document's draws come
/// from a stream seeded by (seed, doc id).
pub fn generate_pseudo_labels(
    teacher: &Model,
    vocab: &Vocabulary,
    corpus: &Corpus,
    strategy: &dyn DecodeStrategy,
    cfg: &PseudoGenConfig,
) -> Result<PseudoLabels> {
    if corpus.is_empty() {
        return Err(Error::invalid_argument("no documents to pseudo-label"));
    }
    cfg.decode.validate()?;
    let teacher_digest = model_digest(teacher)?;
    let decoder_digest =
        decoder_config_digest(&cfg.decode, &cfg.lambda, strategy.name(), cfg.seed)?;

    let outcomes: Vec<_> = corpus
        .examples
        .par_iter()
        .map(|ex| {
            let doc = vocab.encode(&ex.document);
            decode_document(
                teacher,
                &doc,
                strategy,
                &cfg.decode,
                &cfg.lambda,
                doc_seed(cfg.seed, &ex.id),
                cfg.capture,
            )
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut dumps = Vec::new();
    for (ex, outcome) in corpus.examples.iter().zip(outcomes) {
        match outcome {
            Ok(res) => {
                let content = &res.tokens[..res.content_len()];
                records.push(PseudoRecord {
                    id: ex.id.clone(),
                    document: ex.document.clone(),
                    summary: vocab.decode(content),
                    lambda: res.lambda_base,
                    teacher_digest: teacher_digest.clone(),
                });
                if let Some(attention) = res.trace {
                    dumps.push(AttentionDump {
                        doc_id: ex.id.clone(),
                        lambda: res.lambda_base,
                        tokens: res.tokens.iter().map(|&t| vocab.decode(&[t])).collect(),
                        attention,
                    });
                }
            }
            Err(e) => failures.push(PseudoFailure { id: ex.id.clone(), error: e.to_string() }),
        }
    }

    let rate = failures.len() as f64 / corpus.len() as f64;
    if rate > FAILURE_RATE_LIMIT {
        let first = &failures[0];
        return Err(Error::RunFailed(format!(
            "pseudo-labeling failed on {} of {} documents ({:.2}%, limit {:.0}%); first failure: '{}' ({})",
            failures.len(),
            corpus.len(),
            rate * 100.0,
            FAILURE_RATE_LIMIT * 100.0,
            first.id,
            first.error
        )));
    }

    Ok(PseudoLabels { records, failures, teacher_digest, decoder_digest, dumps })
}

/// Writes pseudo-label records as JSONL, one record per line.
pub fn write_pseudo_jsonl(records: &[PseudoRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads pseudo-label JSONL; malformed or invalid lines report their
/// 1-based line number.
pub fn load_pseudo_jsonl(path: &Path) -> Result<Vec<PseudoRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records: Vec<PseudoRecord> = Vec::new();
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PseudoRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if r.document.trim().is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty document".into() });
        }
        if r.summary.trim().is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty summary".into() });
        }
        if !r.lambda.is_finite() || r.lambda <= 0.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("lambda must be finite and positive, got {}", r.lambda),
            });
        }
        if let Some(first) = seen.insert(r.id.clone(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate id '{}' (first seen on line {first})", r.id),
            });
        }
        records.push(r);
    }
    Ok(records)
}

/// Document/pseudo-summary pairs as a training corpus.
pub fn pseudo_to_corpus(records: &[PseudoRecord]) -> Result<Corpus> {
    Corpus::new(
        records
            .iter()
            .map(|r| Example {
                id: r.id.clone(),
                document: r.document.clone(),
                summary: r.summary.clone(),
            })
            .collect(),
    )
}

fn safe_filename(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one `{doc_id}.json` attention map per dump into `dir` and
/// returns the written paths in dump order.
pub fn write_attention_dumps(dumps: &[AttentionDump], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(dumps.len());
    for d in dumps {
        let path = dir.join(format!("{}.json", safe_filename(&d.doc_id)));
        let mut out = BufWriter::new(std::fs::File::create(&path)?);
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
        out.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Which teacher decoder layers seed the student decoder.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    FirstK,
    MaximallySpaced,
}

/// Teacher decoder indices used for a k-layer student. Maximal spacing
/// places layer j at round(j * (L-1) / (k-1)), keeping both endpoints.
pub fn selected_decoder_layers(
    teacher_layers: usize,
    student_layers: usize,
    selection: LayerSelection,
) -> Result<Vec<usize>> {
    let l = teacher_layers;
    let k = student_layers;
    if k == 0 || k > l {
        return Err(Error::invalid_argument(format!(
            "cannot select {k} decoder layers from a {l}-layer teacher"
        )));
    }
    Ok(match selection {
        LayerSelection::FirstK => (0..k).collect(),
        LayerSelection::MaximallySpaced => {
            if k == 1 {
                vec![0]
            } else {
                (0..k).map(|j| ((j * (l - 1)) as f64 / (k - 1) as f64).round() as usize).collect()
            }
        }
    })
}

/// Builds student weights from a teacher: embeddings, encoder, final
/// norms, and output projection are copied in full; decoder layer j takes
/// teacher layer `selected_decoder_layers(..)[j]`. Every width and the
/// encoder depth must match; only the decoder may be shallower.
pub fn init_student_from_teacher(
    teacher: &Model,
    student_config: &ModelConfig,
    selection: LayerSelection,
) -> Result<Model> {
    student_config.validate()?;
    let t = &teacher.config;
    for (name, tv, sv) in [
        ("vocab_size", t.vocab_size, student_config.vocab_size),
        ("d_model", t.d_model, student_config.d_model),
        ("n_heads", t.n_heads, student_config.n_heads),
        ("d_ff", t.d_ff, student_config.d_ff),
        ("max_seq_len", t.max_seq_len, student_config.max_seq_len),
    ] {
        if tv != sv {
            return Err(Error::invalid_argument(format!(
                "student {name} {sv} differs from teacher {name} {tv}; only decoder depth may shrink"
            )));
        }
    }
    if t.positional != student_config.positional {
        return Err(Error::invalid_argument(
            "student and teacher use different positional embedding kinds",
        ));
    }
    if student_config.encoder_layers != t.encoder_layers {
        return Err(Error::invalid_argument(format!(
            "student has {} encoder layers but the teacher's {} are copied in full",
            student_config.encoder_layers, t.encoder_layers
        )));
    }
    let sel = selected_decoder_layers(
        t.decoder_layers,
        student_config.decoder_layers,
        selection,
    )?;

    let mut params = Parameters::init(student_config, 0)?;
    for (name, tensor) in params.iter_mut() {
        let source = match name.strip_prefix("dec.") {
            Some(rest) => match rest.split_once('.') {
                Some((idx, tail)) => match idx.parse::<usize>() {
                    Ok(j) => format!("dec.{}.{tail}", sel[j]),
                    Err(_) => name.clone(),
                },
                None => name.clone(),
            },
            None => name.clone(),
        };
        *tensor = teacher.params.get(&source)?.clone();
    }
    Model::new(student_config.clone(), params)
}

/// Decodes every gold document under `lambda` (fixed 1 leaves attention
/// at its training temperature) and scores the candidates against the
/// gold summaries. Documents whose decode failed under the tolerated rate
/// are left out of the scored rows.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocabulary,
    test: &Corpus,
    strategy: &dyn DecodeStrategy,
    decode: &BeamConfig,
    lambda: &LambdaSpec,
    seed: u64,
    mode: RougeMode,
    leading_fraction: f64,
    min_copy_span: usize,
) -> Result<SystemMetrics> {
    let cfg = PseudoGenConfig {
        decode: decode.clone(),
        lambda: lambda.clone(),
        seed,
        capture: None,
    };
    let out = generate_pseudo_labels(model, vocab, test, strategy, &cfg)?;
    let mut rec = out.records.iter().peekable();
    let mut rows = Vec::new();
    for ex in &test.examples {
        if rec.peek().is_some_and(|r| r.id == ex.id) {
            let r = rec.next().expect("peeked record");
            rows.push(EvalRow {
                candidate: r.summary.clone(),
                reference: ex.summary.clone(),
                document: ex.document.clone(),
            });
        }
    }
    evaluate_system(&rows, mode, leading_fraction, min_copy_span)
}

/// One grid row: a report label plus the lambda mode used for its
/// pseudo-labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSetting {
    pub label: String,
    pub lambda: LambdaSpec,
}

/// Everything a distillation grid shares across settings. Students reuse
/// one initialization and one training seed, so two settings can differ
/// only through their pseudo-label corpora.
pub struct DistillPlan<'a> {
    pub teacher: &'a Model,
    pub vocab: &'a Vocabulary,
    /// Documents to pseudo-label; their gold summaries are not read.
    pub train_docs: &'a Corpus,
    /// Gold pairs scored during student training for checkpoint selection.
    pub valid: &'a Corpus,
    /// Gold pairs decoded and scored once per trained student.
    pub test: &'a Corpus,
    pub student_config: ModelConfig,
    pub selection: LayerSelection,
    pub train: TrainConfig,
    pub decode: BeamConfig,
    pub strategy: &'a dyn DecodeStrategy,
    pub pseudo_seed: u64,
    pub rouge_mode: RougeMode,
    pub leading_fraction: f64,
    pub min_copy_span: usize,
    /// When set, per-setting artifacts (pseudo JSONL, student model,
    /// metrics JSON) and a digest manifest are written here.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub label: String,
    pub lambda: LambdaSpec,
    pub pseudo: PseudoLabels,
    pub student: TrainResult,
    pub metrics: SystemMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSetting {
    pub label: String,
    pub lambda: LambdaSpec,
    pub pseudo_path: String,
    pub pseudo_digest: String,
    pub student_path: String,
    pub student_digest: String,
    pub metrics_path: String,
    pub best_step: u64,
    pub best_val_loss: Option<f64>,
}

/// Digest chain for one grid run: the teacher image, the decoder setup,
/// and each setting's persisted artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillManifest {
    pub teacher_digest: String,
    pub settings: Vec<ManifestSetting>,
}

/// Runs the full grid: per setting, pseudo-label the training documents
/// with the teacher, train a student from the shared initialization on
/// those labels, and score it on the gold test set.
pub fn run_distillation(plan: &DistillPlan, grid: &[GridSetting]) -> Result<Vec<GridOutcome>> {
    if grid.is_empty() {
        return Err(Error::invalid_argument("distillation grid is empty"));
    }
    let valid_tok = tokenize_corpus(plan.valid, plan.vocab);
    let init = init_student_from_teacher(plan.teacher, &plan.student_config, plan.selection)?;
    if let Some(dir) = &plan.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut outcomes = Vec::new();
    let mut manifest = DistillManifest {
        teacher_digest: model_digest(plan.teacher)?,
        settings: Vec::new(),
    };
    for setting in grid {
        let gen_cfg = PseudoGenConfig {
            decode: plan.decode.clone(),
            lambda: setting.lambda.clone(),
            seed: plan.pseudo_seed,
            capture: None,
        };
        let pseudo =
            generate_pseudo_labels(plan.teacher, plan.vocab, plan.train_docs, plan.strategy, &gen_cfg)?;
        let pseudo_corpus = pseudo_to_corpus(&pseudo.records)?;
        let pseudo_tok = tokenize_corpus(&pseudo_corpus, plan.vocab);
        let student = train_model(
            &pseudo_tok,
            &valid_tok,
            &plan.student_config,
            &plan.train,
            Init::From(init.params.clone()),
        )?;
        let metrics = evaluate_model(
            &student.model,
            plan.vocab,
            plan.test,
            plan.strategy,
            &plan.decode,
            &LambdaSpec::fixed(1.0),
            plan.pseudo_seed,
            plan.rouge_mode,
            plan.leading_fraction,
            plan.min_copy_span,
        )?;

        if let Some(dir) = &plan.out_dir {
            let stem = safe_filename(&setting.label);
            let pseudo_path = dir.join(format!("{stem}.pseudo.jsonl"));
            let student_path = dir.join(format!("{stem}.student.bin"));
            let metrics_path = dir.join(format!("{stem}.metrics.json"));
            write_pseudo_jsonl(&pseudo.records, &pseudo_path)?;
            student.model.save(&student_path)?;
            std::fs::write(&metrics_path, serde_json::to_vec_pretty(&metrics)?)?;
            manifest.settings.push(ManifestSetting {
                label: setting.label.clone(),
                lambda: setting.lambda.clone(),
                pseudo_path: pseudo_path.display().to_string(),
                pseudo_digest: digest_file(&pseudo_path)?,
                student_path: student_path.display().to_string(),
                student_digest: digest_file(&student_path)?,
                metrics_path: metrics_path.display().to_string(),
                best_step: student.best_step,
                best_val_loss: student.best_val_loss,
            });
        }

        outcomes.push(GridOutcome {
            label: setting.label.clone(),
            lambda: setting.lambda.clone(),
            pseudo,
            student,
            metrics,
        });
    }

    if let Some(dir) = &plan.out_dir {
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(outcomes)
}
