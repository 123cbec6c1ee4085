//! Source → bytecode → instructions → simplified opcodes → padded token ids.

pub mod compiler;
mod disasm;
pub mod opcodes;
mod tokens;

pub use compiler::{CompiledContract, CompilerConfig, CompilerError, CompilerInterface, SolidityCompiler};
pub use disasm::{decode_hex, disassemble, disassemble_bytes, Instruction};
pub use tokens::{
    simplify_mnemonic, simplify_opcodes, tokenize_and_pad, OpcodeSequence, TokenIdSequence, Vocab, MAX_SEQUENCE_LEN,
    PAD_ID,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvmError {
    #[error("odd hex length {0}")]
    OddHexLength(usize),
    #[error("non-hex character {ch:?} at position {position}")]
    NonHexCharacter { position: usize, ch: char },
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("maximum sequence length must be at least 1")]
    InvalidMaxLen,
    #[error("id file length {0} is not a multiple of 4")]
    BadIdFile(usize),
}
