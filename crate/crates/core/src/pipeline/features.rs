use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use scvd_autograd::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_json, write_json, PipelineConfig, PipelineError, Result};
use crate::cfg::{build_cfg, emit_dot, encode_graph, ControlFlowGraph, GraphTensors};
use crate::corpus::{stratified_split, ContractRecord, DatasetSplit, Label};
use crate::embedding::{CachedProvider, EmbeddingCache, EmbeddingProvider, LocalProvider, ProviderKind, RemoteConfig, RemoteProvider};
use crate::evm::{
    decode_hex, disassemble_bytes, simplify_opcodes, tokenize_and_pad, OpcodeSequence, SolidityCompiler,
    TokenIdSequence, Vocab,
};
use crate::model::ModelInput;
use crate::solidity_prep::{clean_source, CleanOptions, CleanSource};
use crate::train_eval::Example;

const STAGE_VERSION: &str = "scvd-features-1";

pub const CLEAN_FILE: &str = "source.clean.sol";
pub const RUNTIME_FILE: &str = "runtime.hex";
pub const OPS_FILE: &str = "ops.txt";
pub const IDS_FILE: &str = "ids.bin";
pub const DOT_FILE: &str = "cfg.gv";
pub const GRAPH_FILE: &str = "graph.safetensors";
pub const META_FILE: &str = "meta.json";

/// Directory layout of materialized features.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    root: PathBuf,
}

impl FeatureStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// One directory per record; ids are made filesystem-safe.
    pub fn record_dir(&self, id: &str) -> PathBuf {
        let safe: String =
            id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
        self.root.join("records").join(safe)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn failures_path(&self) -> PathBuf {
        self.root.join("failures.json")
    }

    pub fn load_vocab(&self) -> Result<Vocab> {
        let path = self.vocab_path();
        if !path.is_file() {
            return Err(PipelineError::FeaturesMissing { id: "vocab.json".into() });
        }
        let mut vocab: Vocab = read_json(&path)?;
        vocab.reindex();
        Ok(vocab)
    }

    pub fn load_split(&self) -> Result<DatasetSplit> {
        let path = self.split_path();
        if !path.is_file() {
            return Err(PipelineError::FeaturesMissing { id: "split.json".into() });
        }
        read_json(&path)
    }

    pub fn load_meta(&self, id: &str) -> Option<RecordMeta> {
        read_json(&self.record_dir(id).join(META_FILE)).ok()
    }
}

/// Bookkeeping written last into each record directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub label: Label,
    pub stage_hash: String,
    /// Hash of the vocabulary and length the current `ids.bin` was made with.
    pub ids_hash: Option<String>,
    pub bytecode_origin: String,
    pub original_len: usize,
    pub cleaned_len: usize,
    pub opcode_count: usize,
    pub blocks: usize,
    pub edges: usize,
    pub unresolved_jumps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFailure {
    pub id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FeatureReport {
    pub total: usize,
    pub computed: usize,
    pub skipped: usize,
    pub failed: Vec<FeatureFailure>,
    pub ids_written: usize,
    pub vocab_size: usize,
    pub train_records: usize,
    pub test_records: usize,
    pub seconds: f64,
}

impl FeatureReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.failed.len() as f64 / self.total as f64
        }
    }
}

/// Everything derived from one contract before tokenization.
#[derive(Clone, Debug)]
pub struct DerivedFeatures {
    pub clean: CleanSource,
    pub runtime: String,
    pub bytecode_origin: String,
    pub ops: OpcodeSequence,
    pub cfg: ControlFlowGraph,
    pub graph: GraphTensors<f32>,
}

/// Builds the configured embedding provider with a persistent cache in
/// the workspace.
pub(crate) fn make_provider(config: &PipelineConfig) -> Result<Arc<dyn EmbeddingProvider>> {
    let inner: Arc<dyn EmbeddingProvider> = match config.embedding.provider {
        ProviderKind::Local => Arc::new(LocalProvider::new(config.embedding.local_seed)),
        ProviderKind::Remote => Arc::new(RemoteProvider::new(RemoteConfig::from_env()?)?),
    };
    let dir = config.cache_dir();
    std::fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
    let name: String = inner
        .identity()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let cache = EmbeddingCache::open(dir.join(format!("embeddings-{name}.bin")))?;
    Ok(Arc::new(CachedProvider::new(inner, cache)))
}

fn fail(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::FeatureDerivationFailed { stage, reason: e.to_string() }
}

/// Clean, obtain runtime bytecode (given, or compiled from the original
/// source), disassemble, simplify, build and embed the CFG.
pub fn derive_features(
    source: &str,
    bytecode: Option<&str>,
    compiler: Option<&SolidityCompiler>,
    clean: CleanOptions,
    provider: &dyn EmbeddingProvider,
) -> Result<DerivedFeatures> {
    let cleaned = clean_source(source, clean);
    let (runtime, bytecode_origin) = match bytecode {
        Some(hex) => (hex.to_string(), "manifest".to_string()),
        None => {
            let compiler = compiler.ok_or_else(|| fail("bytecode", "no bytecode given and no compiler available"))?;
            let compiled = compiler.compile(source).map_err(|e| fail("bytecode", e))?;
            (compiled.runtime, format!("solc {} ({})", compiler.version(), compiled.name))
        }
    };
    let bytes = decode_hex(&runtime).map_err(|e| fail("bytecode", e))?;
    let instructions = disassemble_bytes(&bytes);
    let ops = simplify_opcodes(&instructions);
    let cfg = build_cfg(&instructions);
    let graph = encode_graph::<f32>(&cfg, provider).map_err(|e| fail("graph", e))?;
    Ok(DerivedFeatures { clean: cleaned, runtime, bytecode_origin, ops, cfg, graph })
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_graph(path: &Path, graph: &GraphTensors<f32>) -> Result<()> {
    let (n, d) = graph.node_features.dim();
    let feats: Vec<u8> = graph.node_features.iter().flat_map(|v| v.to_le_bytes()).collect();
    let edges: Vec<u8> = graph.edge_index.iter().flat_map(|&v| (v as i64).to_le_bytes()).collect();
    let tensors = [
        ("node_features", TensorView::new(StDtype::F32, vec![n, d], &feats).expect("consistent shape")),
        ("edge_index", TensorView::new(StDtype::I64, vec![2, graph.num_edges()], &edges).expect("consistent shape")),
    ];
    safetensors::serialize_to_file(tensors, None, path).map_err(|e| fail("graph", e))
}

fn read_graph<T: Scalar>(path: &Path) -> Result<GraphTensors<T>> {
    let bytes = std::fs::read(path).map_err(PipelineError::io(path))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| fail("graph", format!("{}: {e}", path.display())))?;
    let feats = st.tensor("node_features").map_err(|e| fail("graph", e))?;
    let edges = st.tensor("edge_index").map_err(|e| fail("graph", e))?;
    let (n, d) = (feats.shape()[0], feats.shape()[1]);
    let values: Vec<T> =
        feats.data().chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    let e = edges.shape()[1];
    let idx: Vec<usize> = edges
        .data()
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    Ok(GraphTensors {
        node_features: Array2::from_shape_vec((n, d), values).map_err(|e| fail("graph", e))?,
        edge_index: Array2::from_shape_vec((2, e), idx).map_err(|e| fail("graph", e))?,
    })
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(PipelineError::io(path))
}

enum Outcome {
    Skipped,
    Computed,
    Failed(FeatureFailure),
}

fn process_record(
    store: &FeatureStore,
    record: &ContractRecord,
    compiler: Option<&SolidityCompiler>,
    compiler_id: &str,
    config: &PipelineConfig,
    provider: &dyn EmbeddingProvider,
) -> Outcome {
    let failed = |stage: &str, e: &dyn std::fmt::Display| {
        Outcome::Failed(FeatureFailure { id: record.id.clone(), stage: stage.to_string(), error: e.to_string() })
    };
    let source = match record.source_text() {
        Ok(s) => s,
        Err(e) => return failed("source", &e),
    };
    let clean_json = serde_json::to_vec(&config.clean).expect("serializable");
    let bytecode = record.bytecode.as_deref();
    let compiler_part = if bytecode.is_some() { "" } else { compiler_id };
    let stage_hash = sha_hex(&[
        STAGE_VERSION.as_bytes(),
        source.as_bytes(),
        bytecode.unwrap_or("").as_bytes(),
        compiler_part.as_bytes(),
        &clean_json,
        provider.identity().as_bytes(),
    ]);
    let dir = store.record_dir(&record.id);
    if let Some(meta) = store.load_meta(&record.id) {
        let complete = [CLEAN_FILE, RUNTIME_FILE, OPS_FILE, DOT_FILE, GRAPH_FILE].iter().all(|f| dir.join(f).is_file());
        if meta.stage_hash == stage_hash && meta.label == record.label && complete {
            return Outcome::Skipped;
        }
    }
    let derived = match derive_features(source, bytecode, compiler, config.clean, provider) {
        Ok(d) => d,
        Err(PipelineError::FeatureDerivationFailed { stage, reason }) => return failed(stage, &reason),
        Err(e) => return failed("features", &e),
    };
    let written = (|| -> Result<()> {
        std::fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
        let _ = std::fs::remove_file(dir.join(META_FILE));
        write_text(&dir, CLEAN_FILE, &derived.clean.text)?;
        write_text(&dir, RUNTIME_FILE, &(derived.runtime.clone() + "\n"))?;
        write_text(&dir, OPS_FILE, &derived.ops.to_lines())?;
        write_text(&dir, DOT_FILE, &emit_dot(&derived.cfg))?;
        write_graph(&dir.join(GRAPH_FILE), &derived.graph)?;
        let meta = RecordMeta {
            id: record.id.clone(),
            label: record.label,
            stage_hash,
            ids_hash: None,
            bytecode_origin: derived.bytecode_origin.clone(),
            original_len: derived.clean.original_len,
            cleaned_len: derived.clean.cleaned_len,
            opcode_count: derived.ops.len(),
            blocks: derived.cfg.blocks.len(),
            edges: derived.cfg.edges.len(),
            unresolved_jumps: derived.cfg.unresolved_jumps.len(),
        };
        write_json(&dir.join(META_FILE), &meta)
    })();
    match written {
        Ok(()) => Outcome::Computed,
        Err(e) => failed("write", &e),
    }
}

/// Materializes features for every record, skipping records whose inputs
/// hash to what is already on disk. Then fits the opcode vocabulary on the
/// training split and (re)writes `ids.bin` where the vocabulary changed.
/// Per-record failures are collected in the report, not raised.
pub fn materialize(config: &PipelineConfig, records: &[ContractRecord]) -> Result<FeatureReport> {
    config.validate()?;
    let start = Instant::now();
    let store = config.store();
    std::fs::create_dir_all(store.root()).map_err(PipelineError::io(store.root()))?;
    let split = stratified_split(records, config.split.test_fraction, config.split.seed)?;
    write_json(&store.split_path(), &split)?;
    let provider = make_provider(config)?;

    let needs_compiler = records.iter().any(|r| r.bytecode.is_none());
    let (compiler, compiler_id) = if needs_compiler {
        match SolidityCompiler::discover(&config.compiler) {
            Ok(c) => {
                let id = format!("{}|{:?}|{}", c.version(), c.interface(), config.compiler.optimizer);
                (Some(c), id)
            }
            Err(e) => (None, format!("unavailable: {e}")),
        }
    } else {
        (None, String::new())
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        records
            .par_iter()
            .map(|r| process_record(&store, r, compiler.as_ref(), &compiler_id, config, provider.as_ref()))
            .collect()
    });

    let mut report = FeatureReport { total: records.len(), ..Default::default() };
    for o in outcomes {
        match o {
            Outcome::Skipped => report.skipped += 1,
            Outcome::Computed => report.computed += 1,
            Outcome::Failed(f) => report.failed.push(f),
        }
    }
    let failed: std::collections::HashSet<&str> = report.failed.iter().map(|f| f.id.as_str()).collect();

    let mut train_ops = Vec::new();
    for id in split.train.iter().filter(|id| !failed.contains(id.as_str())) {
        let path = store.record_dir(id).join(OPS_FILE);
        let text = std::fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
        train_ops.push(OpcodeSequence::from_lines(&text));
    }
    let vocab = Vocab::fit(&train_ops);
    if vocab.tokens().is_empty() {
        return Err(PipelineError::Config("no training record produced opcodes; cannot fit a vocabulary".into()));
    }
    write_json(&store.vocab_path(), &vocab)?;
    let ids_hash = sha_hex(&[
        serde_json::to_string(&vocab).expect("serializable").as_bytes(),
        &(config.max_sequence_len as u64).to_le_bytes(),
    ]);
    for r in records.iter().filter(|r| !failed.contains(r.id.as_str())) {
        let dir = store.record_dir(&r.id);
        let Some(mut meta) = store.load_meta(&r.id) else { continue };
        if meta.ids_hash.as_deref() == Some(ids_hash.as_str()) && dir.join(IDS_FILE).is_file() {
            continue;
        }
        let path = dir.join(OPS_FILE);
        let text = std::fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
        let ids = tokenize_and_pad(&OpcodeSequence::from_lines(&text), &vocab, config.max_sequence_len)?;
        let ids_path = dir.join(IDS_FILE);
        std::fs::write(&ids_path, ids.to_le_bytes()).map_err(PipelineError::io(ids_path))?;
        meta.ids_hash = Some(ids_hash.clone());
        write_json(&dir.join(META_FILE), &meta)?;
        report.ids_written += 1;
    }
    write_json(&store.failures_path(), &report.failed)?;

    report.vocab_size = vocab.size();
    report.train_records = split.train.iter().filter(|id| !failed.contains(id.as_str())).count();
    report.test_records = split.test.iter().filter(|id| !failed.contains(id.as_str())).count();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Reads materialized features back as model inputs. Records without a
/// complete feature directory are returned by id in the second list.
pub fn load_examples<T: Scalar>(
    store: &FeatureStore,
    ids: &[String],
    labels: &HashMap<String, Label>,
) -> Result<(Vec<Example<T>>, Vec<String>)> {
    let mut examples = Vec::with_capacity(ids.len());
    let mut missing = Vec::new();
    for id in ids {
        let dir = store.record_dir(id);
        let meta = match store.load_meta(id) {
            Some(m) if m.ids_hash.is_some() && dir.join(IDS_FILE).is_file() => m,
            _ => {
                missing.push(id.clone());
                continue;
            }
        };
        let label = labels.get(id).copied().unwrap_or(meta.label);
        let clean_path = dir.join(CLEAN_FILE);
        let text = std::fs::read_to_string(&clean_path).map_err(PipelineError::io(clean_path))?;
        let ids_path = dir.join(IDS_FILE);
        let raw = std::fs::read(&ids_path).map_err(PipelineError::io(ids_path))?;
        let opcodes = TokenIdSequence::from_le_bytes(&raw)?;
        let graph = read_graph::<T>(&dir.join(GRAPH_FILE))?;
        examples.push(Example::new(
            id.clone(),
            ModelInput { text: Some(text), opcodes: Some(opcodes), graph: Some(graph) },
            label,
        ));
    }
    Ok((examples, missing))
}
