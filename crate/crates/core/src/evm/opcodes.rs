//! EVM opcode table (Cancun) with functional-group annotations.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

/// Functional family of an opcode, following the section layout of the
/// Ethereum yellow paper with hashing folded into the bitwise family.
/// Informational only; nothing downstream consumes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpcodeGroup {
    StopArithmetic,
    ComparisonBitwise,
    Environment,
    Block,
    StackMemoryStorageFlow,
    Push,
    Duplication,
    Exchange,
    Logging,
    System,
}

const PUSH: [&str; 33] = [
    "PUSH0", "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9", "PUSH10", "PUSH11",
    "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18", "PUSH19", "PUSH20", "PUSH21", "PUSH22",
    "PUSH23", "PUSH24", "PUSH25", "PUSH26", "PUSH27", "PUSH28", "PUSH29", "PUSH30", "PUSH31", "PUSH32",
];
const DUP: [&str; 16] = [
    "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11", "DUP12", "DUP13", "DUP14",
    "DUP15", "DUP16",
];
const SWAP: [&str; 16] = [
    "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10", "SWAP11", "SWAP12",
    "SWAP13", "SWAP14", "SWAP15", "SWAP16",
];
const LOG: [&str; 5] = ["LOG0", "LOG1", "LOG2", "LOG3", "LOG4"];

pub const STOP: u8 = 0x00;
pub const JUMP: u8 = 0x56;
pub const JUMPI: u8 = 0x57;
pub const JUMPDEST: u8 = 0x5b;
pub const PUSH0: u8 = 0x5f;
pub const PUSH1: u8 = 0x60;
pub const PUSH32: u8 = 0x7f;
pub const RETURN: u8 = 0xf3;
pub const REVERT: u8 = 0xfd;
pub const SELFDESTRUCT: u8 = 0xff;

/// Name and group of an assigned opcode. `None` for unassigned bytes and for
/// `0xFE`, the designated invalid instruction.
pub fn opcode_info(byte: u8) -> Option<(&'static str, OpcodeGroup)> {
    use OpcodeGroup::*;
    let entry = match byte {
        0x00 => ("STOP", StopArithmetic),
        0x01 => ("ADD", StopArithmetic),
        0x02 => ("MUL", StopArithmetic),
        0x03 => ("SUB", StopArithmetic),
        0x04 => ("DIV", StopArithmetic),
        0x05 => ("SDIV", StopArithmetic),
        0x06 => ("MOD", StopArithmetic),
        0x07 => ("SMOD", StopArithmetic),
        0x08 => ("ADDMOD", StopArithmetic),
        0x09 => ("MULMOD", StopArithmetic),
        0x0a => ("EXP", StopArithmetic),
        0x0b => ("SIGNEXTEND", StopArithmetic),
        0x10 => ("LT", ComparisonBitwise),
        0x11 => ("GT", ComparisonBitwise),
        0x12 => ("SLT", ComparisonBitwise),
        0x13 => ("SGT", ComparisonBitwise),
        0x14 => ("EQ", ComparisonBitwise),
        0x15 => ("ISZERO", ComparisonBitwise),
        0x16 => ("AND", ComparisonBitwise),
        0x17 => ("OR", ComparisonBitwise),
        0x18 => ("XOR", ComparisonBitwise),
        0x19 => ("NOT", ComparisonBitwise),
        0x1a => ("BYTE", ComparisonBitwise),
        0x1b => ("SHL", ComparisonBitwise),
        0x1c => ("SHR", ComparisonBitwise),
        0x1d => ("SAR", ComparisonBitwise),
        0x20 => ("SHA3", ComparisonBitwise),
        0x30 => ("ADDRESS", Environment),
        0x31 => ("BALANCE", Environment),
        0x32 => ("ORIGIN", Environment),
        0x33 => ("CALLER", Environment),
        0x34 => ("CALLVALUE", Environment),
        0x35 => ("CALLDATALOAD", Environment),
        0x36 => ("CALLDATASIZE", Environment),
        0x37 => ("CALLDATACOPY", Environment),
        0x38 => ("CODESIZE", Environment),
        0x39 => ("CODECOPY", Environment),
        0x3a => ("GASPRICE", Environment),
        0x3b => ("EXTCODESIZE", Environment),
        0x3c => ("EXTCODECOPY", Environment),
        0x3d => ("RETURNDATASIZE", Environment),
        0x3e => ("RETURNDATACOPY", Environment),
        0x3f => ("EXTCODEHASH", Environment),
        0x40 => ("BLOCKHASH", Block),
        0x41 => ("COINBASE", Block),
        0x42 => ("TIMESTAMP", Block),
        0x43 => ("NUMBER", Block),
        0x44 => ("DIFFICULTY", Block),
        0x45 => ("GASLIMIT", Block),
        0x46 => ("CHAINID", Block),
        0x47 => ("SELFBALANCE", Block),
        0x48 => ("BASEFEE", Block),
        0x49 => ("BLOBHASH", Block),
        0x4a => ("BLOBBASEFEE", Block),
        0x50 => ("POP", StackMemoryStorageFlow),
        0x51 => ("MLOAD", StackMemoryStorageFlow),
        0x52 => ("MSTORE", StackMemoryStorageFlow),
        0x53 => ("MSTORE8", StackMemoryStorageFlow),
        0x54 => ("SLOAD", StackMemoryStorageFlow),
        0x55 => ("SSTORE", StackMemoryStorageFlow),
        0x56 => ("JUMP", StackMemoryStorageFlow),
        0x57 => ("JUMPI", StackMemoryStorageFlow),
        0x58 => ("PC", StackMemoryStorageFlow),
        0x59 => ("MSIZE", StackMemoryStorageFlow),
        0x5a => ("GAS", StackMemoryStorageFlow),
        0x5b => ("JUMPDEST", StackMemoryStorageFlow),
        0x5c => ("TLOAD", StackMemoryStorageFlow),
        0x5d => ("TSTORE", StackMemoryStorageFlow),
        0x5e => ("MCOPY", StackMemoryStorageFlow),
        0x5f..=0x7f => (PUSH[(byte - PUSH0) as usize], Push),
        0x80..=0x8f => (DUP[(byte - 0x80) as usize], Duplication),
        0x90..=0x9f => (SWAP[(byte - 0x90) as usize], Exchange),
        0xa0..=0xa4 => (LOG[(byte - 0xa0) as usize], Logging),
        0xf0 => ("CREATE", System),
        0xf1 => ("CALL", System),
        0xf2 => ("CALLCODE", System),
        0xf3 => ("RETURN", System),
        0xf4 => ("DELEGATECALL", System),
        0xf5 => ("CREATE2", System),
        0xfa => ("STATICCALL", System),
        0xfd => ("REVERT", System),
        0xff => ("SELFDESTRUCT", System),
        _ => return None,
    };
    Some(entry)
}

/// Mnemonic of a byte; unassigned bytes render as `INVALID_0xXX`.
pub fn mnemonic(byte: u8) -> Cow<'static, str> {
    match opcode_info(byte) {
        Some((name, _)) => Cow::Borrowed(name),
        None => Cow::Owned(format!("INVALID_0x{byte:02X}")),
    }
}

/// Number of immediate bytes following the opcode.
pub fn push_width(byte: u8) -> usize {
    if (PUSH1..=PUSH32).contains(&byte) {
        (byte - PUSH0) as usize
    } else {
        0
    }
}

pub fn is_push(byte: u8) -> bool {
    (PUSH0..=PUSH32).contains(&byte)
}

pub fn is_invalid(byte: u8) -> bool {
    opcode_info(byte).is_none()
}
