//! Text, opcode and graph branches, the convolutional fusion head, and the
//! seven ablation variants built from them.

pub mod layers;
pub mod text;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use scvd_autograd::{init, softmax_rows, ParamId, ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::cfg::GraphTensors;
use crate::embedding::{TextHash, EMBEDDING_DIM};
use crate::evm::{TokenIdSequence, PAD_ID};
use layers::{dropout, normalized_adjacency, Activation, BiLstm, Conv1d, Dense, GcnConv};
use text::{EncoderDims, PretrainedFiles, TextEncoder, Tokenizer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("pretrained encoder checkpoint unavailable at {path}: {reason}")]
    CheckpointUnavailable { path: String, reason: String },
    #[error("node features have width {got}, expected {expected}")]
    FeatureWidthMismatch { expected: usize, got: usize },
    #[error("fusion input dims {dims:?} (sum {sum}) are shorter than the kernel size {kernel}")]
    DimMismatch { dims: Vec<usize>, sum: usize, kernel: usize },
    #[error("batch item {index} lacks the {kind} feature")]
    MissingFeature { index: usize, kind: FeatureKind },
    #[error("batch item {index}: {reason}")]
    BadFeature { index: usize, reason: String },
    #[error("checkpoint {path} does not match: {reason}")]
    CheckpointMismatch { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BERT")]
    Bert,
    #[serde(rename = "BiLSTM")]
    BiLstm,
    #[serde(rename = "GNN")]
    Gnn,
    M1,
    M2,
    M3,
    VulnSense,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Bert, Variant::BiLstm, Variant::Gnn, Variant::M1, Variant::M2, Variant::M3, Variant::VulnSense];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bert => "BERT",
            Variant::BiLstm => "BiLSTM",
            Variant::Gnn => "GNN",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::VulnSense => "VulnSense",
        }
    }

    /// Feature kinds consumed, in fusion order (text, opcodes, graph).
    pub fn features(self) -> &'static [FeatureKind] {
        use FeatureKind::*;
        match self {
            Variant::Bert => &[Text],
            Variant::BiLstm => &[Opcodes],
            Variant::Gnn => &[Graph],
            Variant::M1 => &[Text, Opcodes],
            Variant::M2 => &[Text, Graph],
            Variant::M3 => &[Opcodes, Graph],
            Variant::VulnSense => &[Text, Opcodes, Graph],
        }
    }

    pub fn uses(self, kind: FeatureKind) -> bool {
        self.features().contains(&kind)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?} (expected one of BERT, BiLSTM, GNN, M1, M2, M3, VulnSense)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Text,
    Opcodes,
    Graph,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Text => "text",
            FeatureKind::Opcodes => "opcodes",
            FeatureKind::Graph => "graph",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// From-scratch 2-layer, 128-wide encoder with a hashing tokenizer.
    TinyTest,
    /// BERT-style checkpoint directory (`config.json`, `vocab.txt`,
    /// `model.safetensors`). The encoder is frozen; only the head trains.
    Pretrained { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelVariantConfig {
    pub variant: Variant,
    pub d_bert_out: usize,
    pub d_lstm_out: usize,
    pub d_gnn_out: usize,
    pub lstm_units: (usize, usize),
    pub lstm_dense_units: usize,
    pub opcode_embed_dim: usize,
    /// Rows of the opcode embedding table (vocabulary size + pad + unknown).
    pub opcode_vocab_rows: usize,
    pub gnn_hidden_channels: usize,
    pub gnn_bottleneck: usize,
    pub node_feature_dim: usize,
    pub encoder_preset: EncoderPreset,
    pub num_classes: usize,
    pub dropout: f64,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub fusion_dense: usize,
    pub init_seed: u64,
}

impl Default for ModelVariantConfig {
    fn default() -> Self {
        Self {
            variant: Variant::VulnSense,
            d_bert_out: 66,
            d_lstm_out: 64,
            d_gnn_out: 64,
            lstm_units: (128, 64),
            lstm_dense_units: 128,
            opcode_embed_dim: 200,
            opcode_vocab_rows: 0,
            gnn_hidden_channels: 64,
            gnn_bottleneck: 3,
            node_feature_dim: EMBEDDING_DIM,
            encoder_preset: EncoderPreset::TinyTest,
            num_classes: 3,
            dropout: 0.03,
            conv_filters: 64,
            conv_kernel: 3,
            fusion_dense: 32,
            init_seed: 0,
        }
    }
}

impl ModelVariantConfig {
    pub fn for_variant(variant: Variant, opcode_vocab_rows: usize) -> Self {
        Self { variant, opcode_vocab_rows, ..Self::default() }
    }

    /// Output widths of the active branches in fusion order.
    pub fn active_dims(&self) -> Vec<usize> {
        self.variant
            .features()
            .iter()
            .map(|k| match k {
                FeatureKind::Text => self.d_bert_out,
                FeatureKind::Opcodes => self.d_lstm_out,
                FeatureKind::Graph => self.d_gnn_out,
            })
            .collect()
    }

    /// Length of the concatenated branch outputs fed to the head.
    pub fn fusion_width(&self) -> usize {
        self.active_dims().iter().sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_bert_out", self.d_bert_out),
            ("d_lstm_out", self.d_lstm_out),
            ("d_gnn_out", self.d_gnn_out),
            ("lstm_units.0", self.lstm_units.0),
            ("lstm_units.1", self.lstm_units.1),
            ("lstm_dense_units", self.lstm_dense_units),
            ("opcode_embed_dim", self.opcode_embed_dim),
            ("gnn_hidden_channels", self.gnn_hidden_channels),
            ("gnn_bottleneck", self.gnn_bottleneck),
            ("node_feature_dim", self.node_feature_dim),
            ("num_classes", self.num_classes),
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("fusion_dense", self.fusion_dense),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.variant.uses(FeatureKind::Opcodes) && self.opcode_vocab_rows < 2 {
            return Err(ModelError::Config("opcode_vocab_rows must cover padding and the unknown token".into()));
        }
        let dims = self.active_dims();
        let sum: usize = dims.iter().sum();
        if sum < self.conv_kernel {
            return Err(ModelError::DimMismatch { dims, sum, kernel: self.conv_kernel });
        }
        Ok(())
    }

    /// Stable hash of the configuration (hex SHA-256 of its JSON).
    pub fn hash(&self) -> String {
        TextHash::of(&serde_json::to_string(self).expect("config serializes")).to_string()
    }
}

/// Per-contract features. Only the kinds the variant needs must be present.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub text: Option<String>,
    pub opcodes: Option<TokenIdSequence>,
    pub graph: Option<GraphTensors<T>>,
}

impl<T> Default for ModelInput<T> {
    fn default() -> Self {
        Self { text: None, opcodes: None, graph: None }
    }
}

#[derive(Debug)]
struct TextBranch {
    tokenizer: Tokenizer,
    encoder: TextEncoder,
    head: Dense,
    frozen: bool,
}

#[derive(Debug)]
struct OpcodeBranch {
    embedding: ParamId,
    rows: usize,
    lstm1: BiLstm,
    dense: Dense,
    lstm2: BiLstm,
    out: Dense,
}

#[derive(Debug)]
struct GraphBranch {
    convs: [GcnConv; 3],
    bottleneck: Dense,
    out: Dense,
    width: usize,
}

#[derive(Debug)]
struct FusionHead {
    conv: Conv1d,
    dense: Dense,
    out: Dense,
}

/// A complete classifier for one variant. Parameters live in an owned
/// [`ParamStore`]; the model is `Send + Sync` and immutable during inference.
#[derive(Debug)]
pub struct Model<T: Scalar> {
    config: ModelVariantConfig,
    store: ParamStore<T>,
    text: Option<TextBranch>,
    opcode: Option<OpcodeBranch>,
    graph: Option<GraphBranch>,
    head: FusionHead,
    pooled_cache: Mutex<HashMap<TextHash, Array2<T>>>,
}

/// Builds the model described by `config` with freshly initialized weights
/// (seeded by `config.init_seed`). A pretrained preset loads and freezes the
/// encoder.
pub fn assemble_variant<T: Scalar>(config: &ModelVariantConfig) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let rng: &mut dyn RngCore = &mut rng;
    let mut store = ParamStore::new();
    let variant = config.variant;

    let text = if variant.uses(FeatureKind::Text) {
        let (dims, tokenizer, pretrained) = match &config.encoder_preset {
            EncoderPreset::TinyTest => {
                let dims = EncoderDims::tiny_test();
                let tok = Tokenizer::Hashing { vocab_size: dims.vocab_size };
                (dims, tok, None)
            }
            EncoderPreset::Pretrained { path } => {
                let files = PretrainedFiles::open(path)?;
                (files.dims.clone(), Tokenizer::WordPiece(files.tokenizer.clone()), Some(files))
            }
        };
        let hidden = dims.hidden;
        let encoder = TextEncoder::new(&mut store, rng, "text.encoder", dims)?;
        if let Some(files) = &pretrained {
            files.load_into(&encoder, &mut store)?;
        }
        let head = Dense::new(&mut store, rng, "text.head", hidden, config.d_bert_out, Activation::Relu);
        Some(TextBranch { tokenizer, encoder, head, frozen: pretrained.is_some() })
    } else {
        None
    };

    let opcode = if variant.uses(FeatureKind::Opcodes) {
        let (u1, u2) = config.lstm_units;
        let embedding = store.add(
            "opcode.embedding",
            init::uniform(rng, (config.opcode_vocab_rows, config.opcode_embed_dim), 0.05),
            true,
        );
        Some(OpcodeBranch {
            embedding,
            rows: config.opcode_vocab_rows,
            lstm1: BiLstm::new(&mut store, rng, "opcode.bilstm1", config.opcode_embed_dim, u1),
            dense: Dense::new(&mut store, rng, "opcode.dense", 2 * u1, config.lstm_dense_units, Activation::Linear),
            lstm2: BiLstm::new(&mut store, rng, "opcode.bilstm2", config.lstm_dense_units, u2),
            out: Dense::new(&mut store, rng, "opcode.out", 2 * u2, config.d_lstm_out, Activation::Relu),
        })
    } else {
        None
    };

    let graph = if variant.uses(FeatureKind::Graph) {
        let hc = config.gnn_hidden_channels;
        Some(GraphBranch {
            convs: [
                GcnConv::new(&mut store, rng, "graph.gcn1", config.node_feature_dim, hc, Activation::Relu),
                GcnConv::new(&mut store, rng, "graph.gcn2", hc, hc, Activation::Relu),
                GcnConv::new(&mut store, rng, "graph.gcn3", hc, hc, Activation::Linear),
            ],
            bottleneck: Dense::new(&mut store, rng, "graph.dense1", hc, config.gnn_bottleneck, Activation::Relu),
            out: Dense::new(&mut store, rng, "graph.out", config.gnn_bottleneck, config.d_gnn_out, Activation::Relu),
            width: config.node_feature_dim,
        })
    } else {
        None
    };

    let width = config.fusion_width();
    let positions = width + 1 - config.conv_kernel;
    let head = FusionHead {
        conv: Conv1d::new(&mut store, rng, "head.conv", config.conv_kernel, config.conv_filters),
        dense: Dense::new(&mut store, rng, "head.dense", positions * config.conv_filters, config.fusion_dense, Activation::Relu),
        out: Dense::new(&mut store, rng, "head.out", config.fusion_dense, config.num_classes, Activation::Linear),
    };

    Ok(Model { config: config.clone(), store, text, opcode, graph, head, pooled_cache: Mutex::new(HashMap::new()) })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelVariantConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn required_features(&self) -> &'static [FeatureKind] {
        self.config.variant.features()
    }

    pub fn fusion_width(&self) -> usize {
        self.config.fusion_width()
    }

    /// Maximum text length in tokens, including the two framing tokens.
    pub fn max_text_tokens(&self) -> Option<usize> {
        self.text.as_ref().map(|t| t.encoder.dims.max_tokens)
    }

    /// Token ids the text branch feeds its encoder for `text`.
    pub fn text_token_ids(&self, text: &str) -> Option<Vec<usize>> {
        self.text.as_ref().map(|t| t.tokenizer.encode(text, t.encoder.dims.max_tokens))
    }

    /// Pooled encoder output for `text` (`1 × hidden`), before the head.
    pub fn text_pooled(&self, text: &str) -> Option<Array2<T>> {
        let branch = self.text.as_ref()?;
        let ids = branch.tokenizer.encode(text, branch.encoder.dims.max_tokens);
        let tape = Tape::inference();
        let p = branch.encoder.pooled(&tape, &self.store, &ids);
        let value = tape.value(p).to_owned();
        Some(value)
    }

    /// Branch a parameter belongs to, from its name; `None` for the head.
    pub fn param_branch(name: &str) -> Option<FeatureKind> {
        match name.split('.').next() {
            Some("text") => Some(FeatureKind::Text),
            Some("opcode") => Some(FeatureKind::Opcodes),
            Some("graph") => Some(FeatureKind::Graph),
            _ => None,
        }
    }

    /// Concatenated branch outputs (`B × fusion_width`).
    pub fn fused(
        &self,
        tape: &Tape<T>,
        batch: &[&ModelInput<T>],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(3);
        for kind in self.required_features() {
            let part = match kind {
                FeatureKind::Text => self.text_forward(tape, batch)?,
                FeatureKind::Opcodes => self.opcode_forward(tape, batch, rng.take())?,
                FeatureKind::Graph => self.graph_forward(tape, batch)?,
            };
            parts.push(part);
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) })
    }

    /// Class logits (`B × num_classes`); softmax of these is the prediction.
    /// Dropout is applied only when `rng` is given.
    pub fn logits(
        &self,
        tape: &Tape<T>,
        batch: &[&ModelInput<T>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let c = self.fused(tape, batch, rng)?;
        let s = &self.store;
        let f = self.head.conv.forward_flat(tape, s, c);
        let d = self.head.dense.forward(tape, s, f);
        Ok(self.head.out.forward(tape, s, d))
    }

    /// Class probabilities for a batch, computed without recording gradients.
    pub fn predict_proba(&self, batch: &[&ModelInput<T>]) -> Result<Array2<T>, ModelError> {
        let tape = Tape::inference();
        let z = self.logits(&tape, batch, None)?;
        let logits = tape.value(z);
        Ok(softmax_rows(&logits))
    }

    fn text_forward(&self, tape: &Tape<T>, batch: &[&ModelInput<T>]) -> Result<Var, ModelError> {
        let branch = self.text.as_ref().expect("text branch");
        let max = branch.encoder.dims.max_tokens;
        let mut pooled = Vec::with_capacity(batch.len());
        for (index, item) in batch.iter().enumerate() {
            let text = item.text.as_deref().ok_or(ModelError::MissingFeature { index, kind: FeatureKind::Text })?;
            let ids = branch.tokenizer.encode(text, max);
            if branch.frozen {
                let key = TextHash::of(text);
                let cached = self.pooled_cache.lock().expect("pooled cache").get(&key).cloned();
                let value = match cached {
                    Some(v) => v,
                    None => {
                        let scratch = Tape::inference();
                        let p = branch.encoder.pooled(&scratch, &self.store, &ids);
                        let v = scratch.value(p).to_owned();
                        self.pooled_cache.lock().expect("pooled cache").insert(key, v.clone());
                        v
                    }
                };
                pooled.push(tape.constant(value));
            } else {
                pooled.push(branch.encoder.pooled(tape, &self.store, &ids));
            }
        }
        let x = tape.concat_rows(&pooled);
        Ok(branch.head.forward(tape, &self.store, x))
    }

    fn opcode_forward(
        &self,
        tape: &Tape<T>,
        batch: &[&ModelInput<T>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let branch = self.opcode.as_ref().expect("opcode branch");
        let mut seqs = Vec::with_capacity(batch.len());
        for (index, item) in batch.iter().enumerate() {
            let s = item.opcodes.as_ref().ok_or(ModelError::MissingFeature { index, kind: FeatureKind::Opcodes })?;
            seqs.push(&s.ids);
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let b = seqs.len();
        let unk = branch.rows - 1;
        let mut rows = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for s in &seqs {
                let id = s.get(t).copied().unwrap_or(PAD_ID) as usize;
                rows.push(if id < branch.rows { id } else { unk });
            }
        }
        let s = &self.store;
        let x = tape.gather_rows(tape.param(s, branch.embedding), &rows);
        let h1 = branch.lstm1.sequences(tape, s, x, b);
        let r = dropout(tape, branch.dense.forward(tape, s, h1), self.config.dropout, rng);
        let h2 = branch.lstm2.last(tape, s, r, steps, b);
        Ok(branch.out.forward(tape, s, h2))
    }

    fn graph_forward(&self, tape: &Tape<T>, batch: &[&ModelInput<T>]) -> Result<Var, ModelError> {
        let branch = self.graph.as_ref().expect("graph branch");
        let mut total = 0usize;
        let mut segments = Vec::with_capacity(batch.len());
        let mut edges = Vec::new();
        let mut blocks = Vec::with_capacity(batch.len());
        for (index, item) in batch.iter().enumerate() {
            let g = item.graph.as_ref().ok_or(ModelError::MissingFeature { index, kind: FeatureKind::Graph })?;
            let n = g.num_nodes();
            if g.node_features.ncols() != branch.width {
                return Err(ModelError::FeatureWidthMismatch { expected: branch.width, got: g.node_features.ncols() });
            }
            if n == 0 {
                return Err(ModelError::BadFeature { index, reason: "graph has no nodes".into() });
            }
            if g.edge_index.nrows() != 2 {
                return Err(ModelError::BadFeature { index, reason: "edge_index must have two rows".into() });
            }
            for (src, dst) in g.edges() {
                if src >= n || dst >= n {
                    return Err(ModelError::BadFeature { index, reason: format!("edge {src}->{dst} with {n} nodes") });
                }
                edges.push((src + total, dst + total));
            }
            segments.push((total, total + n));
            blocks.push(g.node_features.view());
            total += n;
        }
        let features = ndarray::concatenate(ndarray::Axis(0), &blocks).expect("equal widths");
        let adj = Arc::new(normalized_adjacency::<T>(total, edges));
        let s = &self.store;
        let mut x = tape.constant(features);
        for conv in &branch.convs {
            x = conv.forward(tape, s, &adj, x);
        }
        let pooled = tape.segment_mean(x, &segments);
        let d = branch.bottleneck.forward(tape, s, pooled);
        Ok(branch.out.forward(tape, s, d))
    }

    /// Writes `config.json` and `weights.safetensors` (trainable parameters).
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ModelError::Io { path: path.clone(), source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let meta = CheckpointMeta { format_version: CHECKPOINT_FORMAT_VERSION, dtype: T::DTYPE.into(), config: self.config.clone() };
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(&meta).expect("serializable")).map_err(io(&cfg_path))?;

        let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (_, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            let mut bytes = Vec::with_capacity(p.value.len() * T::BYTES);
            for v in p.value.iter() {
                v.write_le(&mut bytes);
            }
            blobs.push((p.name.clone(), vec![p.value.nrows(), p.value.ncols()], bytes));
        }
        let dtype = if T::BYTES == 4 { Dtype::F32 } else { Dtype::F64 };
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = blobs
            .iter()
            .map(|(n, shape, b)| (n.clone(), safetensors::tensor::TensorView::new(dtype, shape.clone(), b).expect("consistent")))
            .collect();
        let bytes = safetensors::serialize(views, None).map_err(|e| ModelError::Io {
            path: dir.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let w_path = dir.join(WEIGHTS_FILE);
        fs::write(&w_path, bytes).map_err(io(&w_path))
    }

    /// Rebuilds a model from [`Model::save`] output, checking every stored
    /// tensor against the shapes implied by the stored configuration.
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let mismatch = |reason: String| ModelError::CheckpointMismatch { path: dir.display().to_string(), reason };
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| mismatch(format!("{CONFIG_FILE}: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| mismatch(format!("{CONFIG_FILE}: {e}")))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(mismatch(format!("format version {} unsupported", meta.format_version)));
        }
        let mut model = assemble_variant::<T>(&meta.config)?;
        let bytes = fs::read(dir.join(WEIGHTS_FILE)).map_err(|e| mismatch(format!("{WEIGHTS_FILE}: {e}")))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| mismatch(format!("{WEIGHTS_FILE}: {e}")))?;
        let expected: Vec<(ParamId, String)> =
            model.store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
        if st.len() != expected.len() {
            return Err(mismatch(format!("{} tensors stored, {} expected", st.len(), expected.len())));
        }
        for (id, name) in expected {
            let view = st.tensor(&name).map_err(|_| mismatch(format!("tensor {name} missing")))?;
            let want = model.store.value(id).dim();
            if view.shape() != [want.0, want.1] {
                return Err(mismatch(format!("tensor {name}: shape {:?}, expected {want:?}", view.shape())));
            }
            let values: Vec<T> = match view.dtype() {
                Dtype::F32 => view.data().chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                Dtype::F64 => view.data().chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
                other => return Err(mismatch(format!("tensor {name}: dtype {other:?}"))),
            };
            model.store.set_value(id, Array2::from_shape_vec(want, values).expect("shape checked"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    dtype: String,
    config: ModelVariantConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_widths() {
        let v = ModelVariantConfig::for_variant(Variant::VulnSense, 10);
        assert_eq!(v.active_dims(), vec![66, 64, 64]);
        assert_eq!(v.fusion_width(), 194);
        assert_eq!(ModelVariantConfig::for_variant(Variant::M3, 10).fusion_width(), 128);
        assert_eq!(ModelVariantConfig::for_variant(Variant::Bert, 10).fusion_width(), 66);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
        assert_eq!("vulnsense".parse::<Variant>().unwrap(), Variant::VulnSense);
    }

    #[test]
    fn validation() {
        let mut c = ModelVariantConfig::for_variant(Variant::BiLstm, 0);
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        c.opcode_vocab_rows = 5;
        c.d_lstm_out = 2;
        assert!(matches!(c.validate(), Err(ModelError::DimMismatch { sum: 2, .. })));
        let mut g = ModelVariantConfig::for_variant(Variant::Gnn, 0);
        assert!(g.validate().is_ok());
        g.dropout = 1.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn missing_pretrained_checkpoint() {
        let c = ModelVariantConfig {
            encoder_preset: EncoderPreset::Pretrained { path: "/nonexistent/bert".into() },
            ..ModelVariantConfig::for_variant(Variant::Bert, 0)
        };
        assert!(matches!(assemble_variant::<f32>(&c), Err(ModelError::CheckpointUnavailable { .. })));
    }
}
