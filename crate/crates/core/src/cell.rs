//! Block/cell search space.
//!
//! A cell is an ordered list of blocks. Block `b` (1-indexed) reads two inputs
//! from `{H[c-2], H[c-1], H_1, .., H_{b-1}}`, applies one operator to each and
//! adds the results. Input ids are encoded as `0 => H[c-2]`, `1 => H[c-1]`,
//! `j + 1 => H_j`, so block `b` has `b + 1` possible inputs.
//!
//! Addition commutes, so a block is stored in canonical form with
//! `(i1, o1) <= (i2, o2)`. No other symmetry is collapsed.
//!
//! # Key format
//!
//! [`CellSpec::key`] renders `b|i1,o1,i2,o2;i1,o1,i2,o2;...` with operator ids
//! `0..=7` (see [`Operator::ALL`]). The format is stable and used for trace
//! files, tabular benchmarks and the worker protocol.
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest supported number of blocks per cell.
pub const MAX_BLOCKS: usize = 10;

/// Number of candidate operators.
pub const NUM_OPERATORS: usize = 8;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CellError {
    #[error("block position {position} is outside 1..={max}")]
    BlockOutOfRange { position: usize, max: usize },
    #[error("invalid cell: {0}")]
    Invalid(String),
    #[error("malformed cell key segment `{segment}`: {reason}")]
    Parse { segment: String, reason: String },
}

/// The eight operators, in token-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Operator {
    Sep3x3 = 0,
    Sep5x5 = 1,
    Sep7x7 = 2,
    Conv1x7_7x1 = 3,
    Identity = 4,
    AvgPool3x3 = 5,
    MaxPool3x3 = 6,
    Dilated3x3 = 7,
}

impl Operator {
    pub const ALL: [Operator; NUM_OPERATORS] = [
        Operator::Sep3x3,
        Operator::Sep5x5,
        Operator::Sep7x7,
        Operator::Conv1x7_7x1,
        Operator::Identity,
        Operator::AvgPool3x3,
        Operator::MaxPool3x3,
        Operator::Dilated3x3,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Operator> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Sep3x3 => "sep3x3",
            Operator::Sep5x5 => "sep5x5",
            Operator::Sep7x7 => "sep7x7",
            Operator::Conv1x7_7x1 => "conv1x7_7x1",
            Operator::Identity => "identity",
            Operator::AvgPool3x3 => "avgpool3x3",
            Operator::MaxPool3x3 => "maxpool3x3",
            Operator::Dilated3x3 => "dilated3x3",
        }
    }

    pub fn is_pooling(self) -> bool {
        matches!(self, Operator::AvgPool3x3 | Operator::MaxPool3x3)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| CellError::Parse {
                segment: s.to_owned(),
                reason: "unknown operator name".to_owned(),
            })
    }
}

/// Input selector of a block: `0 => H[c-2]`, `1 => H[c-1]`, `j + 1 => H_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InputIndex(pub u8);

impl InputIndex {
    pub const PREV_PREV: InputIndex = InputIndex(0);
    pub const PREV: InputIndex = InputIndex(1);

    /// Input referring to the output of block `j` (1-indexed).
    pub fn block(j: usize) -> InputIndex {
        InputIndex((j + 1) as u8)
    }

    /// The 1-indexed block this input refers to, if it is not a cell input.
    pub fn as_block(self) -> Option<usize> {
        (self.0 >= 2).then(|| self.0 as usize - 1)
    }

    pub fn value(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockSpec {
    pub i1: InputIndex,
    pub i2: InputIndex,
    pub o1: Operator,
    pub o2: Operator,
}

impl BlockSpec {
    pub fn new(i1: u8, o1: Operator, i2: u8, o2: Operator) -> BlockSpec {
        BlockSpec {
            i1: InputIndex(i1),
            i2: InputIndex(i2),
            o1,
            o2,
        }
    }

    pub fn canonical(self) -> BlockSpec {
        if (self.i1, self.o1) <= (self.i2, self.o2) {
            self
        } else {
            BlockSpec {
                i1: self.i2,
                i2: self.i1,
                o1: self.o2,
                o2: self.o1,
            }
        }
    }

    pub fn is_canonical(&self) -> bool {
        (self.i1, self.o1) <= (self.i2, self.o2)
    }

    pub fn inputs(&self) -> [InputIndex; 2] {
        [self.i1, self.i2]
    }

    pub fn ops(&self) -> [Operator; 2] {
        [self.o1, self.o2]
    }
}

/// Number of distinct inputs available to the block at 1-indexed `position`.
pub fn num_inputs(position: usize) -> usize {
    position + 1
}

fn check_position(position: usize) -> Result<(), CellError> {
    if (1..=MAX_BLOCKS).contains(&position) {
        Ok(())
    } else {
        Err(CellError::BlockOutOfRange {
            position,
            max: MAX_BLOCKS,
        })
    }
}

/// All raw 4-tuples for a block at `position`, in the fixed order
/// `i1`, `i2`, `o1`, `o2` (outermost to innermost). No deduplication.
pub fn enumerate_blocks(position: usize) -> Result<Vec<BlockSpec>, CellError> {
    check_position(position)?;
    let n = num_inputs(position) as u8;
    let mut out = Vec::with_capacity((n as usize).pow(2) * NUM_OPERATORS * NUM_OPERATORS);
    for i1 in 0..n {
        for i2 in 0..n {
            for o1 in Operator::ALL {
                for o2 in Operator::ALL {
                    out.push(BlockSpec::new(i1, o1, i2, o2));
                }
            }
        }
    }
    Ok(out)
}

/// Canonical blocks at `position`, deduplicated, in first-seen enumeration order.
pub fn canonical_blocks(position: usize) -> Result<Vec<BlockSpec>, CellError> {
    let mut seen = HashSet::new();
    Ok(enumerate_blocks(position)?
        .into_iter()
        .map(BlockSpec::canonical)
        .filter(|b| seen.insert(*b))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CellSpec {
    blocks: Vec<BlockSpec>,
}

impl CellSpec {
    /// Builds a cell, checking its length and input references. The blocks are
    /// kept as given; call [`CellSpec::canonical`] to normalise them.
    pub fn new(blocks: Vec<BlockSpec>) -> Result<CellSpec, CellError> {
        if blocks.is_empty() || blocks.len() > MAX_BLOCKS {
            return Err(CellError::Invalid(format!(
                "cell has {} blocks, expected 1..={MAX_BLOCKS}",
                blocks.len()
            )));
        }
        for (k, block) in blocks.iter().enumerate() {
            let limit = num_inputs(k + 1);
            for input in block.inputs() {
                if input.value() >= limit {
                    return Err(CellError::Invalid(format!(
                        "block {} reads input {} but only 0..{limit} exist",
                        k + 1,
                        input.value()
                    )));
                }
            }
        }
        Ok(CellSpec { blocks })
    }

    pub fn single(block: BlockSpec) -> Result<CellSpec, CellError> {
        CellSpec::new(vec![block])
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn canonical(&self) -> CellSpec {
        CellSpec {
            blocks: self.blocks.iter().map(|b| b.canonical()).collect(),
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.blocks.iter().all(BlockSpec::is_canonical)
    }

    /// Returns a copy with `block` appended, without validation.
    fn with_block(&self, block: BlockSpec) -> CellSpec {
        let mut blocks = Vec::with_capacity(self.blocks.len() + 1);
        blocks.extend_from_slice(&self.blocks);
        blocks.push(block);
        CellSpec { blocks }
    }

    pub fn key(&self) -> String {
        let mut s = String::with_capacity(4 + 9 * self.blocks.len());
        s.push_str(&self.blocks.len().to_string());
        s.push('|');
        for (k, b) in self.blocks.iter().enumerate() {
            if k > 0 {
                s.push(';');
            }
            s.push_str(&format!(
                "{},{},{},{}",
                b.i1.0,
                b.o1.id(),
                b.i2.0,
                b.o2.id()
            ));
        }
        s
    }

    pub fn parse_key(key: &str) -> Result<CellSpec, CellError> {
        let (count, body) = key.split_once('|').ok_or_else(|| CellError::Parse {
            segment: key.to_owned(),
            reason: "missing `|` after block count".to_owned(),
        })?;
        let count: usize = count.trim().parse().map_err(|_| CellError::Parse {
            segment: count.to_owned(),
            reason: "block count is not an integer".to_owned(),
        })?;
        let mut blocks = Vec::with_capacity(count);
        for segment in body.split(';') {
            let fields: Vec<&str> = segment.split(',').collect();
            if fields.len() != 4 {
                return Err(CellError::Parse {
                    segment: segment.to_owned(),
                    reason: format!("expected 4 comma-separated fields, found {}", fields.len()),
                });
            }
            let num = |s: &str| -> Result<u8, CellError> {
                s.trim().parse::<u8>().map_err(|_| CellError::Parse {
                    segment: segment.to_owned(),
                    reason: format!("`{s}` is not a small non-negative integer"),
                })
            };
            let op = |s: &str| -> Result<Operator, CellError> {
                Operator::from_id(num(s)?).ok_or_else(|| CellError::Parse {
                    segment: segment.to_owned(),
                    reason: format!("operator id `{s}` is outside 0..{NUM_OPERATORS}"),
                })
            };
            let position = blocks.len() + 1;
            let block = BlockSpec::new(num(fields[0])?, op(fields[1])?, num(fields[2])?, op(fields[3])?);
            if block.i1.value() >= num_inputs(position) || block.i2.value() >= num_inputs(position) {
                return Err(CellError::Parse {
                    segment: segment.to_owned(),
                    reason: format!("block {position} may only read inputs 0..{}", num_inputs(position)),
                });
            }
            blocks.push(block);
        }
        if blocks.len() != count {
            return Err(CellError::Parse {
                segment: key.to_owned(),
                reason: format!("header says {count} blocks but {} were given", blocks.len()),
            });
        }
        CellSpec::new(blocks)
    }

    /// Length of the longest block chain; a block reading only cell inputs has depth 1.
    pub fn depth(&self) -> usize {
        let mut depths: Vec<usize> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let d = block
                .inputs()
                .iter()
                .filter_map(|i| i.as_block())
                .map(|j| depths[j - 1])
                .max()
                .unwrap_or(0);
            depths.push(d + 1);
        }
        depths.into_iter().max().unwrap_or(0)
    }

    /// Blocks (1-indexed) whose output no later block reads.
    pub fn unused_blocks(&self) -> Vec<usize> {
        let mut used = vec![false; self.blocks.len()];
        for block in &self.blocks {
            for j in block.inputs().iter().filter_map(|i| i.as_block()) {
                used[j - 1] = true;
            }
        }
        (1..=self.blocks.len()).filter(|&j| !used[j - 1]).collect()
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for CellSpec {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CellSpec::parse_key(s)
    }
}

impl TryFrom<String> for CellSpec {
    type Error = CellError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        CellSpec::parse_key(&s)
    }
}

impl From<CellSpec> for String {
    fn from(c: CellSpec) -> String {
        c.key()
    }
}

/// Canonicalizes every block of `cell`.
pub fn canonicalize(cell: &CellSpec) -> CellSpec {
    cell.canonical()
}

/// The 136 distinct canonical one-block cells.
pub fn one_block_cells() -> Vec<CellSpec> {
    canonical_blocks(1)
        .expect("position 1 is in range")
        .into_iter()
        .map(|b| CellSpec { blocks: vec![b] })
        .collect()
}

/// Children of `cell` with one more block, canonicalized and deduplicated.
/// The parent's blocks are carried over unchanged.
pub fn expand_cell(cell: &CellSpec, max_blocks: usize) -> Result<Vec<CellSpec>, CellError> {
    let position = cell.num_blocks() + 1;
    if position > max_blocks.min(MAX_BLOCKS) {
        return Err(CellError::BlockOutOfRange {
            position,
            max: max_blocks.min(MAX_BLOCKS),
        });
    }
    Ok(canonical_blocks(position)?
        .into_iter()
        .map(|b| cell.with_block(b))
        .collect())
}

/// Number of raw children produced by appending any block to a cell with
/// `position - 1` blocks.
pub fn raw_children(position: usize) -> Result<usize, CellError> {
    check_position(position)?;
    Ok(num_inputs(position).pow(2) * NUM_OPERATORS * NUM_OPERATORS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceSize {
    pub raw: BigUint,
    pub unique: BigUint,
}

/// Exact sizes of the space of cells with exactly `max_blocks` blocks.
/// `unique` collapses within-block symmetry only.
pub fn count_space(max_blocks: usize) -> Result<SpaceSize, CellError> {
    check_position(max_blocks)?;
    let mut raw = BigUint::from(1u32);
    let mut unique = BigUint::from(1u32);
    for b in 1..=max_blocks {
        raw *= BigUint::from(raw_children(b)?);
        let pairs = num_inputs(b) * NUM_OPERATORS;
        unique *= BigUint::from(pairs * (pairs + 1) / 2);
    }
    Ok(SpaceSize { raw, unique })
}

/// Samples a cell with `num_blocks` blocks by drawing every block uniformly
/// from its raw tuple space, then canonicalizing.
pub fn sample_cell<R: Rng + ?Sized>(num_blocks: usize, rng: &mut R) -> Result<CellSpec, CellError> {
    check_position(num_blocks)?;
    let blocks = (1..=num_blocks)
        .map(|position| {
            let n = num_inputs(position) as u8;
            let mut op = || Operator::ALL[rng.random_range(0..NUM_OPERATORS)];
            let (o1, o2) = (op(), op());
            BlockSpec::new(rng.random_range(0..n), o1, rng.random_range(0..n), o2).canonical()
        })
        .collect();
    Ok(CellSpec { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_distinct(position: usize) -> usize {
        enumerate_blocks(position)
            .unwrap()
            .into_iter()
            .map(|b| b.canonical())
            .collect::<HashSet<_>>()
            .len()
    }

    #[test]
    fn enumeration_sizes() {
        assert_eq!(enumerate_blocks(1).unwrap().len(), 256);
        assert_eq!(enumerate_blocks(2).unwrap().len(), 576);
        assert_eq!(enumerate_blocks(3).unwrap().len(), 1024);
        for b in 1..=MAX_BLOCKS {
            assert_eq!(enumerate_blocks(b).unwrap().len(), (b + 1).pow(2) * 64);
        }
        assert!(matches!(enumerate_blocks(0), Err(CellError::BlockOutOfRange { .. })));
        assert!(matches!(enumerate_blocks(11), Err(CellError::BlockOutOfRange { .. })));
    }

    #[test]
    fn enumeration_order_is_inputs_then_ops() {
        let blocks = enumerate_blocks(2).unwrap();
        assert_eq!(blocks[0], BlockSpec::new(0, Operator::Sep3x3, 0, Operator::Sep3x3));
        assert_eq!(blocks[1], BlockSpec::new(0, Operator::Sep3x3, 0, Operator::Sep5x5));
        assert_eq!(blocks[8], BlockSpec::new(0, Operator::Sep5x5, 0, Operator::Sep3x3));
        assert_eq!(blocks[64], BlockSpec::new(0, Operator::Sep3x3, 1, Operator::Sep3x3));
        assert_eq!(*blocks.last().unwrap(), BlockSpec::new(2, Operator::Dilated3x3, 2, Operator::Dilated3x3));
    }

    #[test]
    fn canonical_swap() {
        let block = BlockSpec::new(1, Operator::Sep3x3, 0, Operator::Identity);
        assert_eq!(block.canonical(), BlockSpec::new(0, Operator::Identity, 1, Operator::Sep3x3));
        let cell = CellSpec::single(block).unwrap();
        let once = canonicalize(&cell);
        assert_eq!(canonicalize(&once), once);
    }

    #[test]
    fn distinct_counts_match_pair_formula() {
        assert_eq!(brute_force_distinct(1), 136);
        assert_eq!(brute_force_distinct(2), 300);
        for b in 1..=MAX_BLOCKS {
            let n = (b + 1) * 8;
            assert_eq!(canonical_blocks(b).unwrap().len(), n * (n + 1) / 2);
        }
        assert_eq!(one_block_cells().len(), 136);
    }

    #[test]
    fn expansion_of_one_block_cells() {
        let parents = one_block_cells();
        let mut total = 0;
        for parent in &parents {
            let children = expand_cell(parent, 5).unwrap();
            let distinct: HashSet<_> = children.iter().map(|c| c.key()).collect();
            assert_eq!(children.len(), 300);
            assert_eq!(distinct.len(), 300);
            assert!(children.iter().all(|c| c.blocks()[0] == parent.blocks()[0]));
            total += children.len();
        }
        assert_eq!(total, 136 * 300);
        assert_eq!(raw_children(2).unwrap(), 576);
        assert_eq!(256 * raw_children(2).unwrap(), 147_456);
    }

    #[test]
    fn expansion_respects_cap() {
        let cell = CellSpec::single(BlockSpec::new(0, Operator::Identity, 1, Operator::Identity)).unwrap();
        assert!(matches!(
            expand_cell(&cell, 1),
            Err(CellError::BlockOutOfRange { position: 2, max: 1 })
        ));
    }

    #[test]
    fn space_counts() {
        let one = count_space(1).unwrap();
        assert_eq!(one.raw, BigUint::from(256u32));
        assert_eq!(one.unique, BigUint::from(136u32));
        let five = count_space(5).unwrap();
        let raw: u128 = [2u128, 3, 4, 5, 6].iter().map(|i| i * i * 64).product();
        assert_eq!(five.raw, BigUint::from(raw));
        assert_eq!(five.raw, BigUint::from(556_627_761_561_600u64));
        assert_eq!(
            five.unique,
            BigUint::from(136u64 * 300 * 528 * 820 * 1176)
        );
        assert!(five.unique <= five.raw);
        assert!(count_space(10).is_ok());
        assert!(count_space(11).is_err());
    }

    #[test]
    fn keys_and_parsing() {
        let a = CellSpec::single(BlockSpec::new(1, Operator::Sep3x3, 0, Operator::Identity)).unwrap();
        let b = CellSpec::single(BlockSpec::new(0, Operator::Identity, 1, Operator::Sep3x3)).unwrap();
        assert_eq!(a.canonical().key(), b.canonical().key());
        assert_eq!(b.key(), "1|0,4,1,0");
        let c = CellSpec::single(BlockSpec::new(0, Operator::Identity, 1, Operator::Sep5x5)).unwrap();
        assert_ne!(b.key(), c.key());

        let err = CellSpec::parse_key("2|0,4,1,0;0,9,1,1").unwrap_err();
        assert!(matches!(err, CellError::Parse { ref segment, .. } if segment == "0,9,1,1"));
        assert!(CellSpec::parse_key("1|0,4,2,0").is_err());
        assert!(CellSpec::parse_key("0,4,1,0").is_err());
        assert!(CellSpec::parse_key("2|0,4,1,0").is_err());
    }

    #[test]
    fn depth_and_unused() {
        let cell: CellSpec = "3|0,0,1,0;2,1,0,4;3,0,2,0".parse().unwrap();
        assert_eq!(cell.depth(), 3);
        assert_eq!(cell.unused_blocks(), vec![3]);
        let flat: CellSpec = "2|0,0,1,0;0,1,1,1".parse().unwrap();
        assert_eq!(flat.depth(), 1);
        assert_eq!(flat.unused_blocks(), vec![1, 2]);
    }

    #[test]
    fn sampled_children_reference_valid_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let parent = sample_cell(4, &mut rng).unwrap();
            let before = parent.clone();
            for child in expand_cell(&parent, MAX_BLOCKS).unwrap() {
                assert_eq!(&child.blocks()[..4], parent.blocks());
                let last = child.blocks()[4];
                assert!(last.i1.value() < 6 && last.i2.value() < 6);
            }
            assert_eq!(parent, before);
        }
    }

    #[test]
    fn sampled_deep_cells_do_not_collide_across_keys() {
        // Spot check: distinct canonical cells always get distinct keys.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut by_key = std::collections::HashMap::new();
        for _ in 0..5000 {
            let cell = sample_cell(5, &mut rng).unwrap();
            if let Some(prev) = by_key.insert(cell.key(), cell.clone()) {
                assert_eq!(prev, cell);
            }
        }
    }

    proptest! {
        #[test]
        fn key_roundtrip_and_idempotence(seed in any::<u64>(), b in 1usize..=MAX_BLOCKS) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks: Vec<BlockSpec> = (1..=b).map(|p| {
                let n = num_inputs(p) as u8;
                BlockSpec::new(
                    rng.random_range(0..n), Operator::ALL[rng.random_range(0..8)],
                    rng.random_range(0..n), Operator::ALL[rng.random_range(0..8)],
                )
            }).collect();
            let raw = CellSpec::new(blocks).unwrap();
            let canon = canonicalize(&raw);
            prop_assert!(canon.is_canonical());
            prop_assert_eq!(canonicalize(&canon).key(), canon.key());
            prop_assert_eq!(CellSpec::parse_key(&canon.key()).unwrap(), canon.clone());
            prop_assert_eq!(CellSpec::parse_key(&raw.key()).unwrap(), raw);
        }
    }
}
