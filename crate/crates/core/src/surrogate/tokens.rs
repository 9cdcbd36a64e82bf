use serde::{Deserialize, Serialize};

use crate::cell::CellSpec;

/// Token encoding of a cell: `[i1, i2, o1, o2]` for every block, so the
/// sequence has length `4b`. Positions `4k` and `4k + 1` index the input
/// vocabulary, `4k + 2` and `4k + 3` the operator vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u8>,
}

impl TokenSequence {
    pub fn num_blocks(&self) -> usize {
        self.tokens.len() / 4
    }

    /// Whether position `p` holds an input token.
    pub fn is_input_slot(p: usize) -> bool {
        p % 4 < 2
    }

    pub fn max_input(&self) -> u8 {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(p, _)| Self::is_input_slot(*p))
            .map(|(_, &t)| t)
            .max()
            .unwrap_or(0)
    }
}

pub fn encode_tokens(cell: &CellSpec) -> TokenSequence {
    let mut tokens = Vec::with_capacity(4 * cell.num_blocks());
    for b in cell.blocks() {
        tokens.extend_from_slice(&[b.i1.0, b.i2.0, b.o1.id(), b.o2.id()]);
    }
    TokenSequence { tokens }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{sample_cell, BlockSpec, Operator};
    use rand::SeedableRng;
    use std::collections::HashMap;

    #[test]
    fn length_is_four_per_block() {
        let cell: CellSpec = "3|0,0,1,1;0,2,2,4;1,6,3,7".parse().unwrap();
        let seq = encode_tokens(&cell);
        assert_eq!(seq.tokens.len(), 12);
        assert_eq!(&seq.tokens[..4], &[0, 1, 0, 1]);
        assert_eq!(seq.max_input(), 3);
    }

    #[test]
    fn all_identity_single_block() {
        let cell = CellSpec::single(BlockSpec::new(1, Operator::Identity, 0, Operator::Identity).canonical()).unwrap();
        let id = Operator::Identity.id();
        assert_eq!(encode_tokens(&cell).tokens, vec![0, 1, id, id]);
    }

    #[test]
    fn injective_on_sampled_canonical_cells() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut seen: HashMap<Vec<u8>, String> = HashMap::new();
        for _ in 0..1000 {
            let cell = sample_cell(4, &mut rng).unwrap();
            let key = cell.key();
            if let Some(prev) = seen.insert(encode_tokens(&cell).tokens, key.clone()) {
                assert_eq!(prev, key);
            }
        }
    }
}
