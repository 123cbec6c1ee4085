use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::opcodes::{self, mnemonic, push_width};
use super::EvmError;

/// One decoded instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub offset: usize,
    pub opcode: u8,
    /// Immediate bytes; nonempty only for PUSH1..PUSH32.
    pub operand: Vec<u8>,
    /// The code ended before all `n` immediate bytes of a PUSHn.
    pub truncated: bool,
}

impl Instruction {
    pub fn mnemonic(&self) -> Cow<'static, str> {
        mnemonic(self.opcode)
    }

    /// Bytes this instruction occupies in the code.
    pub fn size(&self) -> usize {
        1 + self.operand.len()
    }

    /// Immediate interpreted as a big-endian integer, if it fits in `usize`.
    /// PUSH0 yields zero.
    pub fn push_value(&self) -> Option<usize> {
        if !opcodes::is_push(self.opcode) || self.truncated {
            return None;
        }
        let significant: &[u8] = {
            let lead = self.operand.iter().take_while(|b| **b == 0).count();
            &self.operand[lead..]
        };
        if significant.len() > std::mem::size_of::<usize>() {
            return None;
        }
        Some(significant.iter().fold(0usize, |acc, &b| (acc << 8) | b as usize))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#06x} {}", self.offset, self.mnemonic())?;
        if !self.operand.is_empty() {
            write!(f, " 0x{}", hex::encode(&self.operand))?;
        }
        Ok(())
    }
}

/// Decodes hex (optional `0x`, either case) to bytes.
pub fn decode_hex(code: &str) -> Result<Vec<u8>, EvmError> {
    let body = code.strip_prefix("0x").or_else(|| code.strip_prefix("0X")).unwrap_or(code);
    if let Some((position, ch)) = body.char_indices().find(|(_, c)| !c.is_ascii_hexdigit()) {
        return Err(EvmError::NonHexCharacter { position, ch });
    }
    if !body.len().is_multiple_of(2) {
        return Err(EvmError::OddHexLength(body.len()));
    }
    Ok(hex::decode(body).expect("validated hex"))
}

/// Linear sweep over hex-encoded bytecode.
pub fn disassemble(code: &str) -> Result<Vec<Instruction>, EvmError> {
    Ok(disassemble_bytes(&decode_hex(code)?))
}

/// Linear sweep from offset 0. Never fails: unassigned bytes decode as
/// `INVALID_0xXX` and a PUSH cut off by the end of code keeps the bytes that
/// exist, flagged `truncated`.
pub fn disassemble_bytes(code: &[u8]) -> Vec<Instruction> {
    let mut out = Vec::with_capacity(code.len());
    let mut pc = 0;
    while pc < code.len() {
        let opcode = code[pc];
        let width = push_width(opcode);
        let end = (pc + 1 + width).min(code.len());
        let operand = code[pc + 1..end].to_vec();
        let truncated = operand.len() < width;
        out.push(Instruction { offset: pc, opcode, operand, truncated });
        pc = end;
    }
    out
}
