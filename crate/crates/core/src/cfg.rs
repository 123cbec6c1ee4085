//! Control-flow graph over runtime bytecode, DOT output and numeric encoding.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use ndarray::Array2;
use scvd_autograd::Scalar;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingError, EmbeddingProvider, EMBEDDING_DIM};
use crate::evm::opcodes::{self, JUMP, JUMPDEST, JUMPI, RETURN, REVERT, SELFDESTRUCT, STOP};
use crate::evm::{simplify_mnemonic, Instruction};

/// Text embedded in place of an empty graph so pooling stays defined.
pub const EMPTY_CFG_TEXT: &str = "EMPTY_CFG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminator {
    Jump,
    JumpI,
    Stop,
    Return,
    Revert,
    SelfDestruct,
    Invalid,
    /// The block ends because the next instruction is a JUMPDEST or the code ends.
    FallThrough,
}

impl Terminator {
    fn of(ins: &Instruction) -> Option<Terminator> {
        Some(match ins.opcode {
            JUMP => Terminator::Jump,
            JUMPI => Terminator::JumpI,
            STOP => Terminator::Stop,
            RETURN => Terminator::Return,
            REVERT => Terminator::Revert,
            SELFDESTRUCT => Terminator::SelfDestruct,
            b if opcodes::is_invalid(b) => Terminator::Invalid,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: usize,
    pub start_offset: usize,
    pub instructions: Vec<Instruction>,
    pub terminator: Terminator,
}

impl BasicBlock {
    pub fn starts_with_jumpdest(&self) -> bool {
        self.instructions.first().is_some_and(|i| i.opcode == JUMPDEST)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Jump,
    BranchTrue,
    BranchFalse,
    Fallthrough,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Jump => "jump",
            EdgeKind::BranchTrue => "branch_true",
            EdgeKind::BranchFalse => "branch_false",
            EdgeKind::Fallthrough => "fallthrough",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlowGraph {
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<Edge>,
    /// Blocks ending in JUMP/JUMPI whose target could not be resolved statically.
    pub unresolved_jumps: Vec<usize>,
}

impl ControlFlowGraph {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn out_edges(&self, block: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.src == block)
    }
}

/// Partitions instructions into basic blocks and adds statically resolvable edges.
///
/// A jump target is resolved only when the instruction right before the
/// JUMP/JUMPI in the same block is a PUSH whose value is the start offset of
/// a JUMPDEST block.
pub fn build_cfg(instructions: &[Instruction]) -> ControlFlowGraph {
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut current: Vec<Instruction> = Vec::new();
    let mut close = |current: &mut Vec<Instruction>, terminator: Terminator| {
        let instructions = std::mem::take(current);
        blocks.push(BasicBlock { id: blocks.len(), start_offset: instructions[0].offset, instructions, terminator });
    };
    for ins in instructions {
        if ins.opcode == JUMPDEST && !current.is_empty() {
            close(&mut current, Terminator::FallThrough);
        }
        current.push(ins.clone());
        if let Some(t) = Terminator::of(ins) {
            close(&mut current, t);
        }
    }
    if !current.is_empty() {
        close(&mut current, Terminator::FallThrough);
    }

    let jumpdests: HashMap<usize, usize> =
        blocks.iter().filter(|b| b.starts_with_jumpdest()).map(|b| (b.start_offset, b.id)).collect();
    let mut edges = Vec::new();
    let mut unresolved_jumps = Vec::new();
    for b in &blocks {
        let next = (b.id + 1 < blocks.len()).then_some(b.id + 1);
        match b.terminator {
            Terminator::Jump | Terminator::JumpI => {
                let n = b.instructions.len();
                let target = (n >= 2)
                    .then(|| b.instructions[n - 2].push_value())
                    .flatten()
                    .and_then(|off| jumpdests.get(&off).copied());
                let kind = if b.terminator == Terminator::Jump { EdgeKind::Jump } else { EdgeKind::BranchTrue };
                match target {
                    Some(dst) => edges.push(Edge { src: b.id, dst, kind }),
                    None => unresolved_jumps.push(b.id),
                }
                if b.terminator == Terminator::JumpI {
                    if let Some(dst) = next {
                        edges.push(Edge { src: b.id, dst, kind: EdgeKind::BranchFalse });
                    }
                }
            }
            Terminator::FallThrough => {
                if let Some(dst) = next {
                    edges.push(Edge { src: b.id, dst, kind: EdgeKind::Fallthrough });
                }
            }
            _ => {}
        }
    }
    edges.sort();
    ControlFlowGraph { blocks, edges, unresolved_jumps }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering. Nodes `n{id}` in id order, edges sorted; each edge
/// carries a `kind` attribute (also used as its label).
pub fn emit_dot(cfg: &ControlFlowGraph) -> String {
    let mut out = String::from("digraph cfg {\n");
    if !cfg.blocks.is_empty() {
        out.push_str("  node [shape=box, fontname=\"monospace\"];\n");
    }
    for b in &cfg.blocks {
        let mut label = b.start_offset.to_string();
        for ins in &b.instructions {
            label.push_str("\\n");
            label.push_str(&dot_escape(&ins.mnemonic()));
        }
        let _ = writeln!(out, "  n{} [label=\"{}\"];", b.id, label);
    }
    let mut edges = cfg.edges.clone();
    edges.sort();
    for e in &edges {
        let _ = writeln!(out, "  n{} -> n{} [kind=\"{}\", label=\"{}\"];", e.src, e.dst, e.kind, e.kind);
    }
    out.push_str("}\n");
    out
}

/// Text embedded for a block: start offset followed by its simplified mnemonics.
pub fn block_text(block: &BasicBlock) -> String {
    let mut s = block.start_offset.to_string();
    for ins in &block.instructions {
        s.push(' ');
        s.push_str(&simplify_mnemonic(&ins.mnemonic()));
    }
    s
}

/// One line per edge, `src -> dst kind`. Recorded alongside the graph; not a model input.
pub fn edge_texts(cfg: &ControlFlowGraph) -> Vec<String> {
    cfg.edges.iter().map(|e| format!("{} -> {} {}", e.src, e.dst, e.kind)).collect()
}

/// Node features (N×1536) and directed edge pairs (2×E).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensors<T> {
    pub node_features: Array2<T>,
    pub edge_index: Array2<usize>,
}

impl<T: Scalar> GraphTensors<T> {
    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.ncols()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_edges()).map(|j| (self.edge_index[[0, j]], self.edge_index[[1, j]]))
    }

    pub fn cast<U: Scalar>(&self) -> GraphTensors<U> {
        GraphTensors {
            node_features: self.node_features.mapv(|v| U::lit(v.to_f64_lossy())),
            edge_index: self.edge_index.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("embedding block {block}: {source}")]
pub struct EncodeError {
    pub block: usize,
    #[source]
    pub source: EmbeddingError,
}

/// Embeds every block's [`block_text`]; an empty graph becomes one node
/// embedded from [`EMPTY_CFG_TEXT`] with no edges.
pub fn encode_graph<T: Scalar>(
    cfg: &ControlFlowGraph,
    provider: &dyn EmbeddingProvider,
) -> Result<GraphTensors<T>, EncodeError> {
    let texts: Vec<String> = if cfg.blocks.is_empty() {
        vec![EMPTY_CFG_TEXT.to_string()]
    } else {
        cfg.blocks.iter().map(block_text).collect()
    };
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = provider.embed_batch(&refs).map_err(|e| match e {
        EmbeddingError::Batch { index, source } => EncodeError { block: index, source: *source },
        other => EncodeError { block: 0, source: other },
    })?;
    let mut node_features = Array2::<T>::zeros((vectors.len(), EMBEDDING_DIM));
    for (mut row, v) in node_features.rows_mut().into_iter().zip(&vectors) {
        for (dst, &src) in row.iter_mut().zip(v.values()) {
            *dst = T::lit(src as f64);
        }
    }
    let mut edge_index = Array2::<usize>::zeros((2, cfg.edges.len()));
    for (j, e) in cfg.edges.iter().enumerate() {
        edge_index[[0, j]] = e.src;
        edge_index[[1, j]] = e.dst;
    }
    Ok(GraphTensors { node_features, edge_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::LocalProvider;
    use crate::evm::{disassemble, disassemble_bytes};
    use proptest::prelude::*;

    fn cfg_of(hex: &str) -> ControlFlowGraph {
        build_cfg(&disassemble(hex).unwrap())
    }

    #[test]
    fn empty() {
        let g = build_cfg(&[]);
        assert!(g.blocks.is_empty() && g.edges.is_empty());
        assert_eq!(emit_dot(&g), "digraph cfg {\n}\n");
    }

    #[test]
    fn jump_to_jumpdest() {
        // PUSH1 0x04, JUMP | STOP | JUMPDEST, STOP
        let g = cfg_of("600456005b00");
        assert_eq!(g.blocks.len(), 3);
        assert_eq!(g.blocks.iter().map(|b| b.start_offset).collect::<Vec<_>>(), vec![0, 3, 4]);
        assert_eq!(g.edges, vec![Edge { src: 0, dst: 2, kind: EdgeKind::Jump }]);
        assert!(g.unresolved_jumps.is_empty());
        assert_eq!(g.blocks[1].terminator, Terminator::Stop);
        assert!(!g.edges.iter().any(|e| e.dst == 1));

        let dot = emit_dot(&g);
        assert_eq!(dot.matches("[label=").count(), 3);
        assert_eq!(dot.matches("->").count(), 1);
        assert!(dot.contains("n0 -> n2 [kind=\"jump\""));
        assert!(dot.contains("n0 [label=\"0\\nPUSH1\\nJUMP\"]"));
        assert_eq!(dot, emit_dot(&g));
    }

    #[test]
    fn dynamic_jumpi_is_unresolved_but_falls_through() {
        // CALLDATALOAD-derived target: PUSH1 0, CALLDATALOAD, DUP1, JUMPI | JUMPDEST, STOP
        let g = cfg_of("600035805700");
        assert_eq!(g.blocks.len(), 2);
        assert_eq!(g.unresolved_jumps, vec![0]);
        assert_eq!(g.edges, vec![Edge { src: 0, dst: 1, kind: EdgeKind::BranchFalse }]);
    }

    #[test]
    fn jumpi_with_static_target() {
        // PUSH1 1, PUSH1 7, JUMPI | STOP | INVALID | JUMPDEST(7), STOP
        let g = cfg_of("600160075700fe5b00");
        let kinds: Vec<_> = g.out_edges(0).map(|e| (e.dst, e.kind)).collect();
        assert_eq!(kinds, vec![(1, EdgeKind::BranchFalse), (3, EdgeKind::BranchTrue)]);
        assert_eq!(g.blocks[2].terminator, Terminator::Invalid);
    }

    #[test]
    fn push_into_non_jumpdest_is_unresolved() {
        let g = cfg_of("6004565b00");
        assert_eq!(g.unresolved_jumps, vec![0]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn jumpdest_splits_with_fallthrough() {
        let g = cfg_of("60015b600100");
        assert_eq!(g.blocks.len(), 2);
        assert_eq!(g.blocks[0].terminator, Terminator::FallThrough);
        assert_eq!(g.edges, vec![Edge { src: 0, dst: 1, kind: EdgeKind::Fallthrough }]);
    }

    #[test]
    fn texts() {
        let g = cfg_of("600456005b00");
        assert_eq!(block_text(&g.blocks[0]), "0 PUSH1 JUMP");
        assert_eq!(edge_texts(&g), vec!["0 -> 2 jump"]);
        let g = cfg_of(&format!("7f{}", "00".repeat(32)));
        assert_eq!(block_text(&g.blocks[0]), "0 PUSH");
    }

    #[test]
    fn encoding_shapes() {
        let p = LocalProvider::new(0);
        let g = cfg_of("600456005b00");
        let t: GraphTensors<f32> = encode_graph(&g, &p).unwrap();
        assert_eq!(t.node_features.dim(), (3, EMBEDDING_DIM));
        assert_eq!(t.edge_index.dim(), (2, 1));
        assert_eq!(t.edges().collect::<Vec<_>>(), vec![(0, 2)]);
        assert_eq!(t, encode_graph(&cfg_of("600456005b00"), &p).unwrap());

        let e: GraphTensors<f64> = encode_graph(&build_cfg(&[]), &p).unwrap();
        assert_eq!(e.node_features.dim(), (1, EMBEDDING_DIM));
        assert_eq!(e.edge_index.dim(), (2, 0));
    }

    fn check_invariants(code: &[u8]) -> Result<(), TestCaseError> {
        let ins = disassemble_bytes(code);
        prop_assert_eq!(ins.iter().map(Instruction::size).sum::<usize>(), code.len());
        let g = build_cfg(&ins);
        let flat: Vec<Instruction> = g.blocks.iter().flat_map(|b| b.instructions.clone()).collect();
        prop_assert_eq!(&flat, &ins);
        for (i, b) in g.blocks.iter().enumerate() {
            prop_assert_eq!(b.id, i);
            prop_assert!(b.instructions.iter().skip(1).all(|x| x.opcode != JUMPDEST));
        }
        for e in &g.edges {
            prop_assert!(e.src < g.blocks.len() && e.dst < g.blocks.len());
            if matches!(e.kind, EdgeKind::Jump | EdgeKind::BranchTrue) {
                prop_assert!(g.blocks[e.dst].starts_with_jumpdest());
            }
            if e.kind == EdgeKind::BranchTrue {
                prop_assert_eq!(g.blocks[e.src].terminator, Terminator::JumpI);
            }
        }
        for b in &g.blocks {
            prop_assert!(g.out_edges(b.id).count() <= 2);
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn random_bytecode_invariants(code in proptest::collection::vec(any::<u8>(), 0..512)) {
            check_invariants(&code)?;
        }

        #[test]
        fn jumpy_bytecode_invariants(code in proptest::collection::vec(
            prop_oneof![Just(0x56u8), Just(0x57), Just(0x5b), Just(0x60), Just(0x00), any::<u8>()], 0..256)) {
            check_invariants(&code)?;
        }
    }
}
