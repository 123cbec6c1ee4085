//! Small labeled datasets with a class signal in every modality, for tests
//! and sanity runs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scvd_autograd::Scalar;

use crate::cfg::GraphTensors;
use crate::corpus::Label;
use crate::embedding::EMBEDDING_DIM;
use crate::evm::{TokenIdSequence, MAX_SEQUENCE_LEN};
use crate::model::ModelInput;

/// Opcode table rows the synthetic sequences assume (ids `0..SYNTHETIC_VOCAB_ROWS`).
pub const SYNTHETIC_VOCAB_ROWS: usize = 32;

const TEXT_MARKERS: [&str; 3] = ["unchecked { total += amount * rate; }", "msg.sender.call{value: amount}(\"\");", "require(ok); emit Done();"];

/// `n` samples cycling through the three labels. Each modality carries a
/// label-dependent pattern plus seeded noise.
pub fn separable_dataset<T: Scalar>(n: usize, seq_len: usize, seed: u64) -> Vec<(ModelInput<T>, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = Label::from_index(i % 3).expect("three labels");
            (sample(&mut rng, label, seq_len), label)
        })
        .collect()
}

/// Same as [`separable_dataset`] with the standard sequence length.
pub fn separable_default<T: Scalar>(n: usize, seed: u64) -> Vec<(ModelInput<T>, Label)> {
    separable_dataset(n, MAX_SEQUENCE_LEN, seed)
}

fn sample<T: Scalar>(rng: &mut ChaCha8Rng, label: Label, seq_len: usize) -> ModelInput<T> {
    let k = label.index();
    let filler = ["uint x = 1;", "function f() public {}", "mapping(address => uint) b;", "return y;"];
    let mut text = String::from("pragma solidity ^0.8.0;\ncontract C {\n");
    for _ in 0..rng.gen_range(2..5) {
        text.push_str(filler[rng.gen_range(0..filler.len())]);
        text.push('\n');
    }
    text.push_str(TEXT_MARKERS[k]);
    text.push_str("\n}\n");

    let band = 1 + 10 * k as u32;
    let ids = (0..seq_len)
        .map(|_| if rng.gen_bool(0.8) { band + rng.gen_range(0..10) } else { rng.gen_range(1..SYNTHETIC_VOCAB_ROWS as u32) })
        .collect();

    let nodes = rng.gen_range(1..6);
    let mut features = Array2::<T>::zeros((nodes, EMBEDDING_DIM));
    for r in 0..nodes {
        for c in 0..EMBEDDING_DIM {
            let signal = if c % 3 == k { 0.04 } else { 0.0 };
            features[[r, c]] = T::lit(signal + rng.gen_range(-0.02..0.02));
        }
    }
    let edges: Vec<(usize, usize)> = (1..nodes).map(|j| (j - 1, j)).collect();
    let mut edge_index = Array2::<usize>::zeros((2, edges.len()));
    for (j, (s, d)) in edges.into_iter().enumerate() {
        edge_index[[0, j]] = s;
        edge_index[[1, j]] = d;
    }
    ModelInput {
        text: Some(text),
        opcodes: Some(TokenIdSequence { ids }),
        graph: Some(GraphTensors { node_features: features, edge_index }),
    }
}
