//! Tokenization, vocabulary, corpus JSONL I/O, and a synthetic
//! summarization corpus with controllable copy bias (paraphrase rate) and
//! leading bias (key-sentence position skew).

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SEP_ID: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const SEP_TOKEN: &str = "<sep>";

const RESERVED: [&str; NUM_RESERVED] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN];

/// Lowercased whitespace word tokenization, the only normalization used
/// anywhere in the pipeline.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token/id bijection with fixed reserved ids 0..5 (pad, unk, bos, eos,
/// sep). Content ids follow in (frequency desc, token asc) build order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyData", into = "VocabularyData")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: IndexMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyData {
    tokens: Vec<String>,
    min_freq: usize,
}

impl From<Vocabulary> for VocabularyData {
    fn from(v: Vocabulary) -> Self {
        VocabularyData { tokens: v.id_to_token, min_freq: v.min_freq }
    }
}

impl TryFrom<VocabularyData> for Vocabulary {
    type Error = Error;

    fn try_from(data: VocabularyData) -> Result<Self> {
        if data.tokens.len() < NUM_RESERVED || data.tokens[..NUM_RESERVED] != RESERVED {
            return Err(Error::invalid_state("vocabulary does not start with the reserved tokens"));
        }
        let mut token_to_id = IndexMap::with_capacity(data.tokens.len());
        for (id, token) in data.tokens.iter().enumerate() {
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(Error::invalid_state(format!("duplicate vocabulary token '{token}'")));
            }
        }
        Ok(Vocabulary { id_to_token: data.tokens, token_to_id, min_freq: data.min_freq })
    }
}

impl Vocabulary {
    /// Builds from every document and summary in the corpus. Tokens seen
    /// fewer than `min_freq` times encode to unknown.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid_argument("cannot build a vocabulary from an empty corpus"));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for ex in &corpus.examples {
            for token in tokenize(&ex.document).into_iter().chain(tokenize(&ex.summary)) {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut content: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, n)| *n >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(content.into_iter().map(|(t, _)| t));
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { id_to_token, token_to_id, min_freq })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Tokenizes and maps to ids; out-of-vocabulary tokens become unknown.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(&t).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One document/summary pair. Ids are unique within a corpus; splits are
/// kept as separate corpora (one JSONL file each), not tagged per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub document: String,
    pub summary: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let corpus = Corpus { examples };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.document.trim().is_empty() {
                return Err(Error::invalid_argument(format!("example '{}' has an empty document", ex.id)));
            }
            if ex.summary.trim().is_empty() {
                return Err(Error::invalid_argument(format!("example '{}' has an empty summary", ex.id)));
            }
            if let Some(first) = seen.insert(ex.id.clone(), i) {
                return Err(Error::invalid_argument(format!(
                    "duplicate example id '{}' (positions {first} and {i})",
                    ex.id
                )));
            }
        }
        Ok(())
    }
}

/// One pair encoded against a fixed vocabulary. Documents and summaries
/// keep their raw token ids; BOS/EOS framing is added by the model code.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedExample {
    pub id: String,
    pub document: Vec<usize>,
    pub summary: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenizedCorpus {
    pub examples: Vec<TokenizedExample>,
}

impl TokenizedCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn tokenize_corpus(corpus: &Corpus, vocab: &Vocabulary) -> TokenizedCorpus {
    let examples = corpus
        .examples
        .iter()
        .map(|ex| TokenizedExample {
            id: ex.id.clone(),
            document: vocab.encode(&ex.document),
            summary: vocab.encode(&ex.summary),
        })
        .collect();
    TokenizedCorpus { examples }
}

/// Reads `{"id", "document", "summary"}` JSONL. Malformed or invalid lines
/// report their 1-based line number; an empty file is an empty corpus.
pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if ex.document.trim().is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty document".into() });
        }
        if ex.summary.trim().is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty summary".into() });
        }
        if let Some(first) = seen.insert(ex.id.clone(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate id '{}' (first seen on line {first})", ex.id),
            });
        }
        examples.push(ex);
    }
    Ok(Corpus { examples })
}

pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for ex in &corpus.examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Deterministic index split: test takes the tail, validation the slice
/// before it, training the rest.
pub fn split_corpus(corpus: &Corpus, valid_frac: f64, test_frac: f64) -> Result<(Corpus, Corpus, Corpus)> {
    if !(valid_frac >= 0.0 && test_frac >= 0.0 && valid_frac + test_frac < 1.0) {
        return Err(Error::invalid_argument(format!(
            "split fractions must be non-negative and sum below 1, got {valid_frac} and {test_frac}"
        )));
    }
    let n = corpus.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    let n_train = n - n_valid - n_test;
    let train = Corpus { examples: corpus.examples[..n_train].to_vec() };
    let valid = Corpus { examples: corpus.examples[n_train..n_train + n_valid].to_vec() };
    let test = Corpus { examples: corpus.examples[n_train + n_valid..].to_vec() };
    Ok((train, valid, test))
}

/// Synthetic corpus shape. Documents are template sentences of uniformly
/// drawn content words; the gold summary is the key sentences in document
/// order, each word independently rewritten through the synonym table at
/// `paraphrase_rate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_documents: usize,
    /// Inclusive range of sentences per document.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range of words per sentence.
    pub words_per_sentence: (usize, usize),
    /// Distinct content words (reserved tokens not included).
    pub vocab_words: usize,
    pub key_sentences: usize,
    /// Positional concentration of key sentences: 0 uniform, 1 front-only.
    pub lead_skew: f64,
    /// Per-word probability that a summary word is replaced by its synonym.
    pub paraphrase_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_documents: 400,
            sentences_per_doc: (6, 9),
            words_per_sentence: (4, 7),
            vocab_words: 300,
            key_sentences: 2,
            lead_skew: 0.7,
            paraphrase_rate: 0.3,
            seed: 13,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !ok_range(self.sentences_per_doc) {
            return Err(Error::invalid_argument("sentences_per_doc must be a non-empty range from at least 1"));
        }
        if !ok_range(self.words_per_sentence) {
            return Err(Error::invalid_argument("words_per_sentence must be a non-empty range from at least 1"));
        }
        if self.vocab_words < 2 {
            return Err(Error::invalid_argument("vocab_words must be at least 2"));
        }
        if self.key_sentences == 0 {
            return Err(Error::invalid_argument("key_sentences must be at least 1"));
        }
        if self.key_sentences > self.sentences_per_doc.0 {
            return Err(Error::invalid_argument(format!(
                "key_sentences {} exceeds the sentences_per_doc minimum {}",
                self.key_sentences, self.sentences_per_doc.0
            )));
        }
        for (name, v) in [("lead_skew", self.lead_skew), ("paraphrase_rate", self.paraphrase_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_argument(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

fn content_word(i: usize) -> String {
    format!("w{i:04}")
}

/// Fixed random pairing of content words; paraphrasing swaps a word for
/// its partner, so paraphrases are always in-vocabulary. An odd word
/// count leaves one word self-paired.
fn synonym_pairing(vocab_words: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vocab_words).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53594e4f4e594d53);
    order.shuffle(&mut rng);
    let mut partner: Vec<usize> = (0..vocab_words).collect();
    for pair in order.chunks_exact(2) {
        partner[pair[0]] = pair[1];
        partner[pair[1]] = pair[0];
    }
    partner
}

/// Draws `k` distinct sentence positions from a truncated geometric
/// distribution: P(i) proportional to (1 - lead_skew)^i. Skew 0 is
/// uniform; skew 1 concentrates entirely on the front (ties broken by
/// taking the earliest remaining position). Returned sorted ascending.
fn draw_key_positions(n: usize, k: usize, lead_skew: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..n).map(|i| (1.0 - lead_skew).powi(i as i32)).collect();
    let mut available = vec![true; n];
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = (0..n).filter(|&i| available[i]).map(|i| weights[i]).sum();
        let choice = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = None;
            for i in (0..n).filter(|&i| available[i] && weights[i] > 0.0) {
                u -= weights[i];
                if u < 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| {
                (0..n).rev().find(|&i| available[i] && weights[i] > 0.0).expect("total > 0")
            })
        } else {
            // All remaining mass underflowed (lead_skew at or near 1):
            // the front-most remaining position is the limit behavior. The
            // draw is still consumed so streams align across skews.
            rng.gen::<f64>();
            (0..n).find(|&i| available[i]).expect("k <= n")
        };
        available[choice] = false;
        picked.push(choice);
    }
    picked.sort_unstable();
    picked
}

/// Pure function of the config: same seed, bit-identical corpus.
pub fn synth_corpus_generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let partner = synonym_pairing(cfg.vocab_words, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.num_documents);
    for d in 0..cfg.num_documents {
        let n_sentences = rng.gen_range(cfg.sentences_per_doc.0..=cfg.sentences_per_doc.1);
        let sentences: Vec<Vec<usize>> = (0..n_sentences)
            .map(|_| {
                let len = rng.gen_range(cfg.words_per_sentence.0..=cfg.words_per_sentence.1);
                (0..len).map(|_| rng.gen_range(0..cfg.vocab_words)).collect()
            })
            .collect();
        let keys = draw_key_positions(n_sentences, cfg.key_sentences, cfg.lead_skew, &mut rng);
        let summary_sentences: Vec<Vec<usize>> = keys
            .iter()
            .map(|&i| {
                sentences[i]
                    .iter()
                    .map(|&w| {
                        if rng.gen::<f64>() < cfg.paraphrase_rate {
                            partner[w]
                        } else {
                            w
                        }
                    })
                    .collect()
            })
            .collect();
        let render = |sents: &[Vec<usize>]| {
            sents
                .iter()
                .map(|s| s.iter().map(|&w| content_word(w)).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join(&format!(" {SEP_TOKEN} "))
        };
        examples.push(Example {
            id: format!("doc-{d:05}"),
            document: render(&sentences),
            summary: render(&summary_sentences),
        });
    }
    Ok(Corpus { examples })
}
