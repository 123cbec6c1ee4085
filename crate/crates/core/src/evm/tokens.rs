//! Opcode simplification, vocabulary and fixed-length id sequences.

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::disasm::Instruction;
use super::EvmError;

/// Default sequence length fed to the opcode branch.
pub const MAX_SEQUENCE_LEN: usize = 200;
pub const PAD_ID: u32 = 0;

/// Collapses numbered opcode families: DUP1..16 → DUP, SWAP1..16 → SWAP,
/// PUSH5..32 → PUSH, LOG1..4 → LOG. PUSH0..4 and LOG0 keep their names.
/// Already-collapsed names map to themselves.
pub fn simplify_mnemonic(name: &str) -> Cow<'_, str> {
    const FAMILIES: [(&str, u32, u32); 4] = [("DUP", 1, 16), ("SWAP", 1, 16), ("PUSH", 5, 32), ("LOG", 1, 4)];
    for (family, lo, hi) in FAMILIES {
        if let Some(n) = name.strip_prefix(family).and_then(|rest| rest.parse::<u32>().ok()) {
            if (lo..=hi).contains(&n) && !name[family.len()..].starts_with('0') {
                return Cow::Borrowed(family);
            }
        }
    }
    Cow::Borrowed(name)
}

/// Operand-free, simplified mnemonic stream of one contract.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpcodeSequence {
    pub mnemonics: Vec<String>,
}

impl OpcodeSequence {
    pub fn len(&self) -> usize {
        self.mnemonics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mnemonics.is_empty()
    }

    /// One mnemonic per line, as written to `ops.txt`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for m in &self.mnemonics {
            out.push_str(m);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Self {
        Self { mnemonics: text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect() }
    }
}

pub fn simplify_opcodes(instructions: &[Instruction]) -> OpcodeSequence {
    OpcodeSequence {
        mnemonics: instructions.iter().map(|i| simplify_mnemonic(&i.mnemonic()).into_owned()).collect(),
    }
}

/// Mnemonic → id map. Known tokens get ids `1..=n` ordered by descending
/// training frequency (ties by name); `n + 1` is the unknown-token id and 0 is
/// padding, so an embedding table needs [`Vocab::table_rows`] rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn fit<'a>(sequences: impl IntoIterator<Item = &'a OpcodeSequence>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for m in &seq.mnemonics {
                *counts.entry(m.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(m, _)| m.to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + 1)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + 1)).collect();
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Known tokens plus the unknown-token slot.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Rows needed by an embedding table: padding + known + unknown.
    pub fn table_rows(&self) -> usize {
        self.size() + 1
    }

    pub fn unk_id(&self) -> u32 {
        self.tokens.len() as u32 + 1
    }

    pub fn id(&self, mnemonic: &str) -> u32 {
        self.index.get(mnemonic).copied().unwrap_or_else(|| self.unk_id())
    }
}

/// Fixed-length id sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIdSequence {
    pub ids: Vec<u32>,
}

impl TokenIdSequence {
    /// Little-endian 32-bit integers, the `ids.bin` layout.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.ids.iter().flat_map(|&id| (id as i32).to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, EvmError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(EvmError::BadIdFile(bytes.len()));
        }
        let ids = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]).max(0) as u32)
            .collect();
        Ok(Self { ids })
    }
}

/// Maps mnemonics to ids, keeps the first `max_len` and right-pads with
/// [`PAD_ID`].
pub fn tokenize_and_pad(seq: &OpcodeSequence, vocab: &Vocab, max_len: usize) -> Result<TokenIdSequence, EvmError> {
    if vocab.tokens.is_empty() {
        return Err(EvmError::EmptyVocab);
    }
    if max_len == 0 {
        return Err(EvmError::InvalidMaxLen);
    }
    let mut ids: Vec<u32> = seq.mnemonics.iter().take(max_len).map(|m| vocab.id(m)).collect();
    ids.resize(max_len, PAD_ID);
    Ok(TokenIdSequence { ids })
}
