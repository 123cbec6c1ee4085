//! Transformer encoder for source text, tokenizers, and checkpoint import.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::RngCore;
use safetensors::{Dtype, SafeTensors};
use scvd_autograd::{init, ParamId, ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Dense, LayerNorm};
use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_tokens: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
}

impl EncoderDims {
    pub fn tiny_test() -> Self {
        Self {
            vocab_size: 8192,
            hidden: 128,
            layers: 2,
            heads: 2,
            intermediate: 512,
            max_tokens: 128,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.max_tokens < 2 || self.vocab_size < 8 || self.layers == 0 || self.type_vocab_size == 0 {
            return Err(ModelError::Config("degenerate encoder dimensions".into()));
        }
        Ok(())
    }
}

/// Pieces of text: word runs and single punctuation marks. With
/// `code_words`, `_` and `$` belong to words (identifiers stay whole);
/// otherwise they split like any ASCII punctuation.
fn pre_tokenize(text: &str, lowercase: bool, code_words: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        let punct = c.is_ascii_punctuation() && !(code_words && (c == '_' || c == '$'));
        if !punct && !c.is_whitespace() && !c.is_control() {
            if lowercase {
                word.extend(c.to_lowercase());
            } else {
                word.push(c);
            }
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() && !c.is_control() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Text → token ids with `[CLS]` first and `[SEP]` last.
#[derive(Clone, Debug)]
pub enum Tokenizer {
    /// Pieces hashed into a fixed id range; no vocabulary file needed.
    Hashing { vocab_size: usize },
    WordPiece(WordPiece),
}

const HASH_PAD: usize = 0;
const HASH_UNK: usize = 1;
const HASH_CLS: usize = 2;
const HASH_SEP: usize = 3;
const HASH_RESERVED: usize = 4;

impl Tokenizer {
    pub fn encode(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        let (cls, sep, body) = match self {
            Tokenizer::Hashing { vocab_size } => {
                let span = (*vocab_size - HASH_RESERVED) as u64;
                let ids = pre_tokenize(text, false, true)
                    .iter()
                    .map(|p| if p.is_empty() { HASH_UNK } else { HASH_RESERVED + (fnv1a(p) % span) as usize })
                    .collect::<Vec<_>>();
                (HASH_CLS, HASH_SEP, ids)
            }
            Tokenizer::WordPiece(wp) => (wp.cls, wp.sep, wp.encode_body(text)),
        };
        let keep = max_tokens.saturating_sub(2).min(body.len());
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(cls);
        ids.extend_from_slice(&body[..keep]);
        ids.push(sep);
        ids
    }

    pub fn pad_id(&self) -> usize {
        match self {
            Tokenizer::Hashing { .. } => HASH_PAD,
            Tokenizer::WordPiece(wp) => wp.pad,
        }
    }
}

/// Greedy longest-match-first subword tokenizer over a `vocab.txt`.
#[derive(Clone, Debug)]
pub struct WordPiece {
    vocab: HashMap<String, usize>,
    lowercase: bool,
    unk: usize,
    cls: usize,
    sep: usize,
    pad: usize,
}

const MAX_WORD_CHARS: usize = 100;

impl WordPiece {
    pub fn from_vocab_text(text: &str, lowercase: bool) -> Result<Self, String> {
        let vocab: HashMap<String, usize> =
            text.lines().enumerate().map(|(i, l)| (l.trim_end_matches('\r').to_string(), i)).collect();
        let get = |t: &str| vocab.get(t).copied().ok_or_else(|| format!("vocabulary lacks {t}"));
        Ok(Self { unk: get("[UNK]")?, cls: get("[CLS]")?, sep: get("[SEP]")?, pad: get("[PAD]")?, vocab, lowercase })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    fn encode_body(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text, self.lowercase, false) {
            let chars: Vec<char> = word.chars().collect();
            if chars.len() > MAX_WORD_CHARS {
                ids.push(self.unk);
                continue;
            }
            let mut pieces = Vec::new();
            let mut start = 0;
            while start < chars.len() {
                let mut end = chars.len();
                let mut found = None;
                while start < end {
                    let mut piece: String = chars[start..end].iter().collect();
                    if start > 0 {
                        piece.insert_str(0, "##");
                    }
                    if let Some(&id) = self.vocab.get(&piece) {
                        found = Some(id);
                        break;
                    }
                    end -= 1;
                }
                match found {
                    Some(id) => {
                        pieces.push(id);
                        start = end;
                    }
                    None => {
                        pieces = vec![self.unk];
                        break;
                    }
                }
            }
            ids.extend(pieces);
        }
        ids
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Dense,
    key: Dense,
    value: Dense,
    attn_out: Dense,
    attn_norm: LayerNorm,
    ffn_in: Dense,
    ffn_out: Dense,
    ffn_norm: LayerNorm,
}

/// Post-norm transformer encoder with learned positions and a tanh pooler
/// over the first token.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dims: EncoderDims,
    word: ParamId,
    position: ParamId,
    token_type: ParamId,
    emb_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    pooler: Dense,
}

impl TextEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        dims: EncoderDims,
    ) -> Result<Self, ModelError> {
        dims.validate()?;
        let h = dims.hidden;
        let eps = dims.layer_norm_eps;
        let word = store.add(format!("{name}.word"), init::normal(rng, (dims.vocab_size, h), 0.02), true);
        let position = store.add(format!("{name}.position"), init::normal(rng, (dims.max_tokens, h), 0.02), true);
        let token_type = store.add(format!("{name}.token_type"), init::normal(rng, (dims.type_vocab_size, h), 0.02), true);
        let emb_norm = LayerNorm::new(store, &format!("{name}.emb_norm"), h, eps, true);
        let layers = (0..dims.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    query: Dense::new(store, rng, &format!("{p}.query"), h, h, Activation::Linear),
                    key: Dense::new(store, rng, &format!("{p}.key"), h, h, Activation::Linear),
                    value: Dense::new(store, rng, &format!("{p}.value"), h, h, Activation::Linear),
                    attn_out: Dense::new(store, rng, &format!("{p}.attn_out"), h, h, Activation::Linear),
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), h, eps, true),
                    ffn_in: Dense::new(store, rng, &format!("{p}.ffn_in"), h, dims.intermediate, Activation::Gelu),
                    ffn_out: Dense::new(store, rng, &format!("{p}.ffn_out"), dims.intermediate, h, Activation::Linear),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), h, eps, true),
                }
            })
            .collect();
        let pooler = Dense::new(store, rng, &format!("{name}.pooler"), h, h, Activation::Tanh);
        Ok(Self { dims, word, position, token_type, emb_norm, layers, pooler })
    }

    /// Every parameter id owned by the encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.word, self.position, self.token_type, self.emb_norm.gamma, self.emb_norm.beta];
        for l in &self.layers {
            for d in [&l.query, &l.key, &l.value, &l.attn_out, &l.ffn_in, &l.ffn_out] {
                ids.extend([d.w, d.b]);
            }
            for n in [&l.attn_norm, &l.ffn_norm] {
                ids.extend([n.gamma, n.beta]);
            }
        }
        ids.extend([self.pooler.w, self.pooler.b]);
        ids
    }

    /// Pooled `1 × hidden` representation of one token sequence.
    pub fn pooled<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        let n = ids.len();
        assert!(n >= 1 && n <= self.dims.max_tokens, "sequence of {n} tokens");
        let positions: Vec<usize> = (0..n).collect();
        let types = vec![0usize; n];
        let x = tape.add(
            tape.add(
                tape.gather_rows(tape.param(store, self.word), ids),
                tape.gather_rows(tape.param(store, self.position), &positions),
            ),
            tape.gather_rows(tape.param(store, self.token_type), &types),
        );
        let mut x = self.emb_norm.forward(tape, store, x);
        let dh = self.dims.hidden / self.dims.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        for l in &self.layers {
            let q = l.query.forward(tape, store, x);
            let k = l.key.forward(tape, store, x);
            let v = l.value.forward(tape, store, x);
            let heads: Vec<Var> = (0..self.dims.heads)
                .map(|hd| {
                    let (lo, hi) = (hd * dh, (hd + 1) * dh);
                    let scores = tape.matmul(tape.slice_cols(q, lo, hi), tape.transpose(tape.slice_cols(k, lo, hi)));
                    let probs = tape.softmax_rows(tape.scale(scores, scale));
                    tape.matmul(probs, tape.slice_cols(v, lo, hi))
                })
                .collect();
            let attn = l.attn_out.forward(tape, store, tape.concat_cols(&heads));
            x = l.attn_norm.forward(tape, store, tape.add(x, attn));
            let f = l.ffn_out.forward(tape, store, l.ffn_in.forward(tape, store, x));
            x = l.ffn_norm.forward(tape, store, tape.add(x, f));
        }
        self.pooler.forward(tape, store, tape.slice_rows(x, 0, 1))
    }
}

/// Files of a BERT-style checkpoint directory.
#[derive(Clone, Debug)]
pub struct PretrainedFiles {
    pub dir: PathBuf,
    pub dims: EncoderDims,
    pub tokenizer: WordPiece,
}

#[derive(Deserialize)]
struct HfConfig {
    vocab_size: usize,
    hidden_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    type_vocab_size: usize,
    #[serde(default = "default_eps")]
    layer_norm_eps: f64,
}

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

impl PretrainedFiles {
    /// Reads `config.json`, `vocab.txt` and (optionally) `tokenizer_config.json`.
    pub fn open(dir: &Path) -> Result<Self, ModelError> {
        let unavailable = |reason: String| ModelError::CheckpointUnavailable { path: dir.display().to_string(), reason };
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| unavailable(format!("{name}: {e}")));
        let cfg: HfConfig = serde_json::from_str(&read("config.json")?).map_err(|e| unavailable(format!("config.json: {e}")))?;
        let lowercase = match fs::read_to_string(dir.join("tokenizer_config.json")) {
            Ok(t) => serde_json::from_str::<serde_json::Value>(&t)
                .ok()
                .and_then(|v| v.get("do_lower_case").and_then(|b| b.as_bool()))
                .unwrap_or(true),
            Err(_) => true,
        };
        let tokenizer = WordPiece::from_vocab_text(&read("vocab.txt")?, lowercase).map_err(unavailable)?;
        let dims = EncoderDims {
            vocab_size: cfg.vocab_size,
            hidden: cfg.hidden_size,
            layers: cfg.num_hidden_layers,
            heads: cfg.num_attention_heads,
            intermediate: cfg.intermediate_size,
            max_tokens: cfg.max_position_embeddings,
            type_vocab_size: cfg.type_vocab_size,
            layer_norm_eps: cfg.layer_norm_eps,
        };
        if !dir.join("model.safetensors").is_file() {
            return Err(unavailable("model.safetensors missing".into()));
        }
        Ok(Self { dir: dir.to_path_buf(), dims, tokenizer })
    }

    /// Copies checkpoint weights into `encoder`'s parameters and freezes them.
    pub fn load_into<T: Scalar>(&self, encoder: &TextEncoder, store: &mut ParamStore<T>) -> Result<(), ModelError> {
        let path = self.dir.join("model.safetensors");
        let unavailable = |reason: String| ModelError::CheckpointUnavailable { path: path.display().to_string(), reason };
        let bytes = fs::read(&path).map_err(|e| unavailable(e.to_string()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| unavailable(e.to_string()))?;
        let names: Vec<String> = st.names().into_iter().map(|n| n.to_string()).collect();
        let prefix = if names.iter().any(|n| n.starts_with("bert.")) { "bert." } else { "" };
        let fetch = |name: &str, transpose: bool| -> Result<Array2<T>, ModelError> {
            let full = format!("{prefix}{name}");
            let alt = full.replace(".weight", ".gamma").replace(".bias", ".beta");
            let view = st
                .tensor(&full)
                .or_else(|_| if name.contains("LayerNorm") { st.tensor(&alt) } else { st.tensor(&full) })
                .map_err(|_| unavailable(format!("tensor {full} missing")))?;
            let data = view.data();
            let values: Vec<f64> = match view.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect(),
                Dtype::F64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
                other => return Err(unavailable(format!("tensor {full}: unsupported dtype {other:?}"))),
            };
            let shape = view.shape();
            let (r, c) = match shape {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(unavailable(format!("tensor {full}: rank {}", shape.len()))),
            };
            let m = Array2::from_shape_vec((r, c), values.into_iter().map(T::lit).collect()).expect("shape");
            Ok(if transpose { m.t().to_owned() } else { m })
        };
        let mut assign = |id: ParamId, name: &str, transpose: bool| -> Result<(), ModelError> {
            let value = fetch(name, transpose)?;
            let expected = store.value(id).dim();
            if value.dim() != expected {
                return Err(unavailable(format!("{name}: shape {:?}, expected {expected:?}", value.dim())));
            }
            store.set_value(id, value);
            store.set_trainable(id, false);
            Ok(())
        };
        assign(encoder.word, "embeddings.word_embeddings.weight", false)?;
        assign(encoder.position, "embeddings.position_embeddings.weight", false)?;
        assign(encoder.token_type, "embeddings.token_type_embeddings.weight", false)?;
        assign(encoder.emb_norm.gamma, "embeddings.LayerNorm.weight", false)?;
        assign(encoder.emb_norm.beta, "embeddings.LayerNorm.bias", false)?;
        for (i, l) in encoder.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            for (d, n) in [
                (&l.query, "attention.self.query"),
                (&l.key, "attention.self.key"),
                (&l.value, "attention.self.value"),
                (&l.attn_out, "attention.output.dense"),
                (&l.ffn_in, "intermediate.dense"),
                (&l.ffn_out, "output.dense"),
            ] {
                assign(d.w, &format!("{p}.{n}.weight"), true)?;
                assign(d.b, &format!("{p}.{n}.bias"), false)?;
            }
            for (ln, n) in [(&l.attn_norm, "attention.output.LayerNorm"), (&l.ffn_norm, "output.LayerNorm")] {
                assign(ln.gamma, &format!("{p}.{n}.weight"), false)?;
                assign(ln.beta, &format!("{p}.{n}.bias"), false)?;
            }
        }
        assign(encoder.pooler.w, "pooler.dense.weight", true)?;
        assign(encoder.pooler.b, "pooler.dense.bias", false)?;
        Ok(())
    }
}
