//! Pre-layer-norm encoder-decoder transformer whose three attention
//! families (encoder self, decoder self, decoder cross) each take an
//! independent temperature coefficient at inference. Training always runs
//! with all coefficients at 1, which is bit-identical to a standard
//! transformer because the score divisor is sqrt(lambda * d_head).

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{matmul_nt_raw, matmul_raw, softmax_row_masked, Tensor};

/// File magic for serialized models.
const MODEL_MAGIC: &[u8; 4] = b"DLAB";
const MODEL_VERSION: u32 = 1;

/// Positional encoding variant. Learned rows live in the parameter set;
/// sinusoidal rows are recomputed on demand and never trained.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub positional: PositionalKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 256,
            max_seq_len: 128,
            dropout: 0.1,
            positional: PositionalKind::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.encoder_layers,
            self.decoder_layers,
            self.d_ff,
            self.max_seq_len,
        ];
        if extents.contains(&0) {
            return Err(Error::invalid_argument("all model extents must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid_argument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_argument("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-family attention temperature coefficients; the score divisor is
/// sqrt(lambda * d_head). Training always uses (1, 1, 1).
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTemperatures {
    pub lambda_enc: f64,
    pub lambda_cross: f64,
    pub lambda_dec: f64,
}

impl Default for AttentionTemperatures {
    fn default() -> Self {
        AttentionTemperatures { lambda_enc: 1.0, lambda_cross: 1.0, lambda_dec: 1.0 }
    }
}

impl AttentionTemperatures {
    pub fn uniform(lambda: f64) -> Self {
        AttentionTemperatures { lambda_enc: lambda, lambda_cross: lambda, lambda_dec: lambda }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda_enc", self.lambda_enc),
            ("lambda_cross", self.lambda_cross),
            ("lambda_dec", self.lambda_dec),
        ] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::invalid_argument(format!(
                    "{name} must be positive and finite, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed declaration order.
#[derive(Clone, Debug)]
pub struct Parameters {
    map: IndexMap<String, Tensor>,
}

/// Shape of every tensor the config declares, in declaration order.
fn declared_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let dm = cfg.d_model;
    let mut out = vec![("tok_emb".to_string(), vec![cfg.vocab_size, dm])];
    if cfg.positional == PositionalKind::Learned {
        out.push(("pos_emb".to_string(), vec![cfg.max_seq_len, dm]));
    }
    let attn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![dm, dm]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{prefix}.{b}"), vec![dm]));
        }
    };
    let ln = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.g"), vec![dm]));
        out.push((format!("{prefix}.b"), vec![dm]));
    };
    let ffn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.w1"), vec![dm, cfg.d_ff]));
        out.push((format!("{prefix}.b1"), vec![cfg.d_ff]));
        out.push((format!("{prefix}.w2"), vec![cfg.d_ff, dm]));
        out.push((format!("{prefix}.b2"), vec![dm]));
    };
    for i in 0..cfg.encoder_layers {
        ln(&format!("enc.{i}.ln1"), &mut out);
        attn(&format!("enc.{i}.attn"), &mut out);
        ln(&format!("enc.{i}.ln2"), &mut out);
        ffn(&format!("enc.{i}.ffn"), &mut out);
    }
    ln("enc.final_ln", &mut out);
    for i in 0..cfg.decoder_layers {
        ln(&format!("dec.{i}.ln1"), &mut out);
        attn(&format!("dec.{i}.self_attn"), &mut out);
        ln(&format!("dec.{i}.ln2"), &mut out);
        attn(&format!("dec.{i}.cross_attn"), &mut out);
        ln(&format!("dec.{i}.ln3"), &mut out);
        ffn(&format!("dec.{i}.ffn"), &mut out);
    }
    ln("dec.final_ln", &mut out);
    out.push(("out_proj.w".to_string(), vec![dm, cfg.vocab_size]));
    out.push(("out_proj.b".to_string(), vec![cfg.vocab_size]));
    out
}

impl Parameters {
    /// Fresh init: weights N(0, 0.02), biases and layer-norm shifts 0,
    /// layer-norm gains 1. Deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = IndexMap::new();
        for (name, shape) in declared_shapes(cfg) {
            // Last path segment decides the class: "g" is a layer-norm gain
            // (ones), any "b*" is a bias or shift (zeros), the rest are
            // weights (N(0, 0.02)).
            let segment = name.rsplit('.').next().expect("non-empty name");
            let t = if segment == "g" {
                Tensor::from_vec(shape.clone(), vec![1.0; shape.iter().product()])?
            } else if segment.starts_with('b') {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, 0.02, &mut rng)
            };
            map.insert(name, t);
        }
        Ok(Parameters { map })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid_state(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid_state(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against the config declaration, in order.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = declared_shapes(cfg);
        if expect.len() != self.map.len() {
            return Err(Error::invalid_state(format!(
                "parameter count {} does not match config declaration {}",
                self.map.len(),
                expect.len()
            )));
        }
        for ((name, shape), (have_name, have)) in expect.iter().zip(self.map.iter()) {
            if name != have_name || have.shape() != shape.as_slice() {
                return Err(Error::invalid_state(format!(
                    "parameter {have_name} {:?} does not match declared {name} {:?}",
                    have.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal position rows: even columns sine, odd columns cosine, with
/// the standard 10000^(2i/d) wavelength ladder.
fn sinusoid_rows(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model {
            let wavelength = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 / wavelength;
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![len, d_model], data).expect("shape matches data")
}

/// Stand-alone attention primitive: context = softmax(Q K^T / sqrt(lambda d)) V.
/// Returns (context, weights); weights rows are distributions with exact
/// zeros on masked positions.
pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[bool]>,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::invalid_argument("attention inputs must be 2-d"));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    if k.shape()[1] != d {
        return Err(Error::invalid_argument("Q and K head dims differ"));
    }
    if v.shape()[0] != m {
        return Err(Error::invalid_argument("K and V lengths differ"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid_argument(format!("lambda must be positive, got {lambda}")));
    }
    if let Some(ma) = mask {
        if ma.len() != n * m {
            return Err(Error::invalid_argument("mask must be n x m"));
        }
    }
    let mut scores = vec![0.0; n * m];
    matmul_nt_raw(q.data(), k.data(), n, d, m, &mut scores);
    let tau = (lambda * d as f64).sqrt();
    let mut weights = vec![0.0; n * m];
    for i in 0..n {
        let keep = mask.map(|ma| &ma[i * m..(i + 1) * m]);
        softmax_row_masked(&scores[i * m..(i + 1) * m], keep, tau, &mut weights[i * m..(i + 1) * m])?;
    }
    let dv = v.shape()[1];
    let mut ctx = vec![0.0; n * dv];
    matmul_raw(&weights, v.data(), n, m, dv, &mut ctx);
    Ok((Tensor::from_vec(vec![n, dv], ctx)?, Tensor::from_vec(vec![n, m], weights)?))
}

/// Cross-attention weights captured during one decoder pass:
/// `weights[layer][head]` is a [target_len, src_len] tensor.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub weights: Vec<Vec<Tensor>>,
}

impl CrossAttention {
    /// Mean over layers and heads; rows remain distributions.
    pub fn mean_map(&self) -> Tensor {
        let first = &self.weights[0][0];
        let (t, s) = (first.shape()[0], first.shape()[1]);
        let mut acc = vec![0.0; t * s];
        let mut count = 0.0;
        for layer in &self.weights {
            for head in layer {
                for (a, &w) in acc.iter_mut().zip(head.data()) {
                    *a += w;
                }
                count += 1.0;
            }
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
        Tensor::from_vec(vec![t, s], acc).expect("shape matches data")
    }

    /// A single layer/head map, for aggregation overrides.
    pub fn single_map(&self, layer: usize, head: usize) -> Result<Tensor> {
        self.weights
            .get(layer)
            .and_then(|l| l.get(head))
            .cloned()
            .ok_or_else(|| Error::invalid_argument(format!("no cross-attention map at layer {layer} head {head}")))
    }
}

/// Source for cross-attention keys and values: a live graph node (training,
/// gradients flow into the encoder) or per-layer precomputed tensors
/// (decode sessions; bit-identical values, computed once per document).
enum CrossKv<'a> {
    FromEncoder(NodeId),
    Precomputed(&'a [LayerKv]),
}

/// Precomputed cross-attention K and V for one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// Per-parameter gradient vectors keyed by parameter name.
pub type Gradients = IndexMap<String, Vec<f64>>;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

/// Leaf ids for every parameter staged onto a graph.
struct Staged {
    ids: IndexMap<String, NodeId>,
}

impl Staged {
    fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).expect("staged parameter")
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.validate_against(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(Model { config, params })
    }

    fn stage(&self, g: &mut Graph, trainable: bool) -> Staged {
        let mut ids = IndexMap::new();
        for (name, t) in self.params.iter() {
            ids.insert(name.clone(), g.leaf(t.clone(), trainable));
        }
        Staged { ids }
    }

    /// Token plus position embeddings for `ids` starting at position 0.
    fn embed(&self, g: &mut Graph, staged: &Staged, ids: &[usize]) -> Result<NodeId> {
        let tok = g.embedding(staged.id("tok_emb"), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = match self.config.positional {
            PositionalKind::Learned => g.embedding(staged.id("pos_emb"), &positions)?,
            PositionalKind::Sinusoidal => {
                let rows = sinusoid_rows(ids.len(), self.config.d_model);
                g.constant(rows)
            }
        };
        g.add(tok, pos)
    }

    /// One multi-head attention sublayer on pre-normalized input `x`.
    /// `kv` selects self-attention (None) or cross-attention (Some).
    /// Captures per-head weight nodes into `capture` when given.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        staged: &Staged,
        prefix: &str,
        x: NodeId,
        kv: Option<(&CrossKv<'_>, usize)>,
        causal: bool,
        lambda: f64,
        layer: usize,
        capture: Option<&mut Vec<Vec<NodeId>>>,
    ) -> Result<NodeId> {
        let dh = self.config.head_dim();
        let n_heads = self.config.n_heads;
        let t_len = g.value(x).shape()[0];

        let q0 = g.matmul(x, staged.id(&format!("{prefix}.wq")))?;
        let q = g.add_row_bias(q0, staged.id(&format!("{prefix}.bq")))?;
        let (k, v, m_len) = match kv {
            None => {
                let k0 = g.matmul(x, staged.id(&format!("{prefix}.wk")))?;
                let k = g.add_row_bias(k0, staged.id(&format!("{prefix}.bk")))?;
                let v0 = g.matmul(x, staged.id(&format!("{prefix}.wv")))?;
                let v = g.add_row_bias(v0, staged.id(&format!("{prefix}.bv")))?;
                (k, v, t_len)
            }
            Some((CrossKv::FromEncoder(enc), src_len)) => {
                let k0 = g.matmul(*enc, staged.id(&format!("{prefix}.wk")))?;
                let k = g.add_row_bias(k0, staged.id(&format!("{prefix}.bk")))?;
                let v0 = g.matmul(*enc, staged.id(&format!("{prefix}.wv")))?;
                let v = g.add_row_bias(v0, staged.id(&format!("{prefix}.bv")))?;
                (k, v, src_len)
            }
            Some((CrossKv::Precomputed(layers), src_len)) => {
                let k = g.constant(layers[layer].k.clone());
                let v = g.constant(layers[layer].v.clone());
                (k, v, src_len)
            }
        };

        let tau = (lambda * dh as f64).sqrt();
        let causal_keep = if causal {
            let mut keep = vec![false; t_len * m_len];
            for i in 0..t_len {
                for j in 0..=i.min(m_len - 1) {
                    keep[i * m_len + j] = true;
                }
            }
            Some(keep)
        } else {
            None
        };

        let mut head_ctx = Vec::with_capacity(n_heads);
        let mut head_weights = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let attn = g.masked_softmax(scores, causal_keep.clone(), tau)?;
            head_weights.push(attn);
            head_ctx.push(g.matmul(attn, vh)?);
        }
        if let Some(cap) = capture {
            cap.push(head_weights);
        }
        let ctx = g.concat_cols(&head_ctx)?;
        let o0 = g.matmul(ctx, staged.id(&format!("{prefix}.wo")))?;
        g.add_row_bias(o0, staged.id(&format!("{prefix}.bo")))
    }

    fn ffn(
        &self,
        g: &mut Graph,
        staged: &Staged,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let h0 = g.matmul(x, staged.id(&format!("{prefix}.w1")))?;
        let h1 = g.add_row_bias(h0, staged.id(&format!("{prefix}.b1")))?;
        let h = g.relu(h1);
        let o0 = g.matmul(h, staged.id(&format!("{prefix}.w2")))?;
        g.add_row_bias(o0, staged.id(&format!("{prefix}.b2")))
    }

    fn layer_norm(
        &self,
        g: &mut Graph,
        staged: &Staged,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        g.layer_norm(x, staged.id(&format!("{prefix}.g")), staged.id(&format!("{prefix}.b")), 1e-5)
    }

    /// Encoder stack on a graph. `doc` must already fit max_seq_len.
    fn encode_on(
        &self,
        g: &mut Graph,
        staged: &Staged,
        doc: &[usize],
        lambda_enc: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut x = self.embed(g, staged, doc)?;
        x = g.dropout(x, dropout, rng)?;
        for i in 0..self.config.encoder_layers {
            let normed = self.layer_norm(g, staged, &format!("enc.{i}.ln1"), x)?;
            let attn = self.attention(
                g,
                staged,
                &format!("enc.{i}.attn"),
                normed,
                None,
                false,
                lambda_enc,
                i,
                None,
            )?;
            let attn = g.dropout(attn, dropout, rng)?;
            x = g.add(x, attn)?;
            let normed = self.layer_norm(g, staged, &format!("enc.{i}.ln2"), x)?;
            let ff = self.ffn(g, staged, &format!("enc.{i}.ffn"), normed)?;
            let ff = g.dropout(ff, dropout, rng)?;
            x = g.add(x, ff)?;
        }
        self.layer_norm(g, staged, "enc.final_ln", x)
    }

    /// Decoder stack producing logits. `last_row_only` restricts the output
    /// projection to the final position (bit-identical to slicing the full
    /// logits because every row is computed independently after the stack).
    #[allow(clippy::too_many_arguments)]
    fn decode_on(
        &self,
        g: &mut Graph,
        staged: &Staged,
        dec_input: &[usize],
        kv: &CrossKv<'_>,
        src_len: usize,
        temps: &AttentionTemperatures,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        mut capture: Option<&mut Vec<Vec<NodeId>>>,
        last_row_only: bool,
    ) -> Result<NodeId> {
        let mut x = self.embed(g, staged, dec_input)?;
        x = g.dropout(x, dropout, rng)?;
        for i in 0..self.config.decoder_layers {
            let normed = self.layer_norm(g, staged, &format!("dec.{i}.ln1"), x)?;
            let self_attn = self.attention(
                g,
                staged,
                &format!("dec.{i}.self_attn"),
                normed,
                None,
                true,
                temps.lambda_dec,
                i,
                None,
            )?;
            let self_attn = g.dropout(self_attn, dropout, rng)?;
            x = g.add(x, self_attn)?;

            let normed = self.layer_norm(g, staged, &format!("dec.{i}.ln2"), x)?;
            let cross = self.attention(
                g,
                staged,
                &format!("dec.{i}.cross_attn"),
                normed,
                Some((kv, src_len)),
                false,
                temps.lambda_cross,
                i,
                capture.as_deref_mut(),
            )?;
            let cross = g.dropout(cross, dropout, rng)?;
            x = g.add(x, cross)?;

            let normed = self.layer_norm(g, staged, &format!("dec.{i}.ln3"), x)?;
            let ff = self.ffn(g, staged, &format!("dec.{i}.ffn"), normed)?;
            let ff = g.dropout(ff, dropout, rng)?;
            x = g.add(x, ff)?;
        }
        let mut out = self.layer_norm(g, staged, "dec.final_ln", x)?;
        if last_row_only {
            let rows = g.value(out).shape()[0];
            out = g.slice_rows(out, rows - 1, 1)?;
        }
        let l0 = g.matmul(out, staged.id("out_proj.w"))?;
        g.add_row_bias(l0, staged.id("out_proj.b"))
    }

    fn truncate_doc<'a>(&self, doc: &'a [usize]) -> Result<&'a [usize]> {
        if doc.is_empty() {
            return Err(Error::invalid_argument("empty document"));
        }
        Ok(&doc[..doc.len().min(self.config.max_seq_len)])
    }

    /// Encoder states for a document; inputs beyond max_seq_len are
    /// truncated. Inference mode: no dropout.
    pub fn encode(&self, doc: &[usize], temps: &AttentionTemperatures) -> Result<Tensor> {
        temps.validate()?;
        let doc = self.truncate_doc(doc)?;
        let mut g = Graph::new();
        let staged = self.stage(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode_on(&mut g, &staged, doc, temps.lambda_enc, 0.0, &mut rng)?;
        Ok(g.value(enc).clone())
    }

    /// Precomputed cross-attention K/V per decoder layer for fixed encoder
    /// states. Values are bit-identical to computing them inside a decode
    /// pass because the same graph ops run on the same inputs.
    pub fn cross_kv(&self, enc_states: &Tensor) -> Result<Vec<LayerKv>> {
        let mut g = Graph::new();
        let staged = self.stage(&mut g, false);
        let enc = g.constant(enc_states.clone());
        let mut out = Vec::with_capacity(self.config.decoder_layers);
        for i in 0..self.config.decoder_layers {
            let prefix = format!("dec.{i}.cross_attn");
            let k0 = g.matmul(enc, staged.id(&format!("{prefix}.wk")))?;
            let k = g.add_row_bias(k0, staged.id(&format!("{prefix}.bk")))?;
            let v0 = g.matmul(enc, staged.id(&format!("{prefix}.wv")))?;
            let v = g.add_row_bias(v0, staged.id(&format!("{prefix}.bv")))?;
            out.push(LayerKv { k: g.value(k).clone(), v: g.value(v).clone() });
        }
        Ok(out)
    }

    /// Next-token logits for a prefix, with cross-attention capture.
    /// The prefix must start with BOS and fit max_seq_len.
    pub fn decode_step(
        &self,
        prefix: &[usize],
        enc_states: &Tensor,
        temps: &AttentionTemperatures,
    ) -> Result<(Vec<f64>, CrossAttention)> {
        let (logits, cross) = self.decode_prefix(prefix, enc_states, None, temps, true)?;
        Ok((logits.data().to_vec(), cross))
    }

    /// Shared decode entry: full-prefix pass over precomputed or fresh K/V.
    /// Returns logits ([1, V] when last_row_only, else [len, V]).
    pub fn decode_prefix(
        &self,
        prefix: &[usize],
        enc_states: &Tensor,
        cross_kv: Option<&[LayerKv]>,
        temps: &AttentionTemperatures,
        last_row_only: bool,
    ) -> Result<(Tensor, CrossAttention)> {
        temps.validate()?;
        if prefix.is_empty() || prefix[0] != BOS_ID {
            return Err(Error::invalid_argument("decode prefix must start with BOS"));
        }
        if prefix.len() > self.config.max_seq_len {
            return Err(Error::invalid_argument(format!(
                "prefix length {} exceeds max sequence length {}",
                prefix.len(),
                self.config.max_seq_len
            )));
        }
        let src_len = enc_states.shape()[0];
        let mut g = Graph::new();
        let staged = self.stage(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut capture: Vec<Vec<NodeId>> = Vec::new();
        let kv_owned;
        let kv = match cross_kv {
            Some(layers) => CrossKv::Precomputed(layers),
            None => {
                kv_owned = g.constant(enc_states.clone());
                CrossKv::FromEncoder(kv_owned)
            }
        };
        let logits = self.decode_on(
            &mut g,
            &staged,
            prefix,
            &kv,
            src_len,
            temps,
            0.0,
            &mut rng,
            Some(&mut capture),
            last_row_only,
        )?;
        let weights = capture
            .into_iter()
            .map(|layer| layer.into_iter().map(|id| g.value(id).clone()).collect())
            .collect();
        Ok((g.value(logits).clone(), CrossAttention { weights }))
    }

    /// Teacher-forced label-smoothed loss for one (document, summary) pair.
    /// Decoder input is [BOS, summary...], target is [summary..., EOS];
    /// training mode ((1,1,1) temperatures, dropout from `rng`) when `rng`
    /// is Some.
    pub fn forward_loss(
        &self,
        doc: &[usize],
        summary: &[usize],
        epsilon: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        let (loss, _) = self.forward_loss_inner(doc, summary, epsilon, rng, false)?;
        Ok(loss)
    }

    /// Loss plus gradients for every parameter, for one pair.
    pub fn forward_loss_grad(
        &self,
        doc: &[usize],
        summary: &[usize],
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradients)> {
        let (loss, grads) = self.forward_loss_inner(doc, summary, epsilon, Some(rng), true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    fn forward_loss_inner(
        &self,
        doc: &[usize],
        summary: &[usize],
        epsilon: f64,
        rng: Option<&mut ChaCha8Rng>,
        want_grads: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        if summary.is_empty() {
            return Err(Error::invalid_argument("empty summary"));
        }
        let doc = self.truncate_doc(doc)?;
        let keep = summary.len().min(self.config.max_seq_len - 1);
        let summary = &summary[..keep];
        let mut dec_input = Vec::with_capacity(summary.len() + 1);
        dec_input.push(BOS_ID);
        dec_input.extend_from_slice(summary);
        let mut targets = summary.to_vec();
        targets.push(EOS_ID);

        let dropout = if rng.is_some() { self.config.dropout } else { 0.0 };
        let mut local_rng = ChaCha8Rng::seed_from_u64(0);
        let rng = rng.unwrap_or(&mut local_rng);

        let mut g = Graph::new();
        let staged = self.stage(&mut g, want_grads);
        let train_temps = AttentionTemperatures::default();
        let enc = self.encode_on(&mut g, &staged, doc, train_temps.lambda_enc, dropout, rng)?;
        let kv = CrossKv::FromEncoder(enc);
        let logits = self.decode_on(
            &mut g,
            &staged,
            &dec_input,
            &kv,
            doc.len(),
            &train_temps,
            dropout,
            rng,
            None,
            false,
        )?;
        let loss = g.label_smoothed_nll(logits, &targets, epsilon)?;
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::invalid_state(format!("non-finite loss {loss_val}")));
        }
        if !want_grads {
            return Ok((loss_val, None));
        }
        let grads = g.backward(loss)?;
        let mut out = IndexMap::new();
        for (name, t) in self.params.iter() {
            let id = staged.id(name);
            let buf = grads.get(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(name.clone(), buf);
        }
        Ok((loss_val, Some(out)))
    }

    /// Writes magic, version, length-prefixed config JSON, then each named
    /// tensor (name, shape, f64 little-endian data) in declaration order.
    /// Serialized image, byte-identical to the on-disk format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader { buf: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::invalid_argument("not a model file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != MODEL_VERSION {
            return Err(Error::invalid_argument(format!("unsupported model version {version}")));
        }
        let cfg_len = r.read_u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        config.validate()?;
        let count = r.read_u64()? as usize;
        let mut map = IndexMap::new();
        for _ in 0..count {
            let name_len = r.read_u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::invalid_argument("non-utf8 parameter name"))?;
            let rank = r.read_u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let b: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
                data.push(f64::from_le_bytes(b));
            }
            map.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid_argument("trailing bytes in model file"));
        }
        Model::new(config, Parameters { map })
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid_argument("truncated model file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads only the config header of a model file.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)?;
    if &head[0..4] != MODEL_MAGIC {
        return Err(Error::invalid_argument("not a model file (bad magic)"));
    }
    let cfg_len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let mut cfg = vec![0u8; cfg_len];
    f.read_exact(&mut cfg)?;
    Ok(serde_json::from_slice(&cfg)?)
}
