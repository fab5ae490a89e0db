//! Integer-list encoding of a convolution cell.
//!
//! A cell is a DAG of `n_blocks` blocks. Each block owns four genes laid out
//! as `[input_a, input_b, op_a, op_b]`. Input gene `0` names the DAG input and
//! `k >= 1` names block `k - 1`, so block `b` may only read from the DAG input
//! or blocks `0..b`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENES_PER_BLOCK: usize = 4;

/// Position of a gene inside its block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneSlot {
    InputA,
    InputB,
    OpA,
    OpB,
}

impl GeneSlot {
    pub const ALL: [GeneSlot; 4] = [
        GeneSlot::InputA,
        GeneSlot::InputB,
        GeneSlot::OpA,
        GeneSlot::OpB,
    ];

    pub fn from_offset(offset: usize) -> GeneSlot {
        Self::ALL[offset % GENES_PER_BLOCK]
    }

    pub fn is_input(self) -> bool {
        matches!(self, GeneSlot::InputA | GeneSlot::InputB)
    }
}

impl fmt::Display for GeneSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GeneSlot::InputA => "input_a",
            GeneSlot::InputB => "input_b",
            GeneSlot::OpA => "op_a",
            GeneSlot::OpB => "op_b",
        };
        f.write_str(s)
    }
}

/// Shape of the cell search space. The single source of genome validity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub n_blocks: usize,
    pub n_ops: usize,
    pub n_dag_inputs: usize,
}

impl SearchSpaceSpec {
    pub fn new(n_blocks: usize, n_ops: usize) -> Result<Self> {
        let spec = SearchSpaceSpec {
            n_blocks,
            n_ops,
            n_dag_inputs: 1,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::InvalidSpec("n_blocks must be at least 1".into()));
        }
        if self.n_ops == 0 {
            return Err(Error::InvalidSpec("n_ops must be at least 1".into()));
        }
        if self.n_dag_inputs != 1 {
            return Err(Error::InvalidSpec(
                "only single-input DAGs are supported".into(),
            ));
        }
        Ok(())
    }

    pub fn genome_len(&self) -> usize {
        GENES_PER_BLOCK * self.n_blocks
    }

    /// Number of admissible input indices for block `block`.
    pub fn n_inputs(&self, block: usize) -> usize {
        block + self.n_dag_inputs
    }

    /// Number of distinct values gene `index` may take.
    pub fn gene_range_size(&self, index: usize) -> usize {
        let block = index / GENES_PER_BLOCK;
        if GeneSlot::from_offset(index).is_input() {
            self.n_inputs(block)
        } else {
            self.n_ops
        }
    }

    /// Exact number of valid genomes: the product over blocks of
    /// `n_inputs(b)^2 * n_ops^2`. `None` on `u128` overflow.
    pub fn search_space_size(&self) -> Option<u128> {
        let ops = (self.n_ops as u128).checked_mul(self.n_ops as u128)?;
        (0..self.n_blocks).try_fold(1u128, |acc, b| {
            let inputs = self.n_inputs(b) as u128;
            acc.checked_mul(inputs * inputs)?.checked_mul(ops)
        })
    }

    /// The closed form `n_ops^n_blocks * (n_blocks!)^2`, which undercounts the
    /// space because it assigns one op per block instead of two.
    pub fn factorial_formula_size(&self) -> Option<u128> {
        let pow = (self.n_ops as u128).checked_pow(self.n_blocks as u32)?;
        let fact = (1..=self.n_blocks as u128).try_fold(1u128, |a, k| a.checked_mul(k))?;
        pow.checked_mul(fact)?.checked_mul(fact)
    }
}

/// One range violation found by [`validate_genome`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    Length {
        expected: usize,
        found: usize,
    },
    OutOfRange {
        block: usize,
        slot: GeneSlot,
        value: usize,
        /// Inclusive upper bound; lower bound is always 0.
        max: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Length { expected, found } => {
                write!(f, "genome has {found} genes, expected {expected}")
            }
            Violation::OutOfRange {
                block,
                slot,
                value,
                max,
            } => write!(f, "block {block} {slot} = {value} outside [0, {max}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellGenome {
    genes: Vec<usize>,
}

impl CellGenome {
    /// Wraps raw genes without validation.
    pub fn from_genes(genes: Vec<usize>) -> Self {
        CellGenome { genes }
    }

    pub fn genes(&self) -> &[usize] {
        &self.genes
    }

    pub fn genes_mut(&mut self) -> &mut [usize] {
        &mut self.genes
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.genes[b * GENES_PER_BLOCK..(b + 1) * GENES_PER_BLOCK]
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }
}

impl From<Vec<usize>> for CellGenome {
    fn from(genes: Vec<usize>) -> Self {
        CellGenome { genes }
    }
}

/// Draws every gene uniformly over its valid range.
pub fn random_genome<R: Rng + ?Sized>(spec: &SearchSpaceSpec, rng: &mut R) -> CellGenome {
    let genes = (0..spec.genome_len())
        .map(|g| rng.random_range(0..spec.gene_range_size(g)))
        .collect();
    CellGenome { genes }
}

/// Returns every violated invariant; an empty list means the genome is valid.
pub fn validate_genome(spec: &SearchSpaceSpec, genome: &CellGenome) -> Vec<Violation> {
    let expected = spec.genome_len();
    if genome.len() != expected {
        return vec![Violation::Length {
            expected,
            found: genome.len(),
        }];
    }
    genome
        .genes
        .iter()
        .enumerate()
        .filter_map(|(g, &value)| {
            let size = spec.gene_range_size(g);
            (value >= size).then(|| Violation::OutOfRange {
                block: g / GENES_PER_BLOCK,
                slot: GeneSlot::from_offset(g),
                value,
                max: size - 1,
            })
        })
        .collect()
}

pub fn ensure_valid(spec: &SearchSpaceSpec, genome: &CellGenome) -> Result<()> {
    let v = validate_genome(spec, genome);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidGenome(v))
    }
}

/// Where a block input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputSource {
    DagInput,
    Block(usize),
}

impl InputSource {
    fn from_gene(gene: usize) -> InputSource {
        match gene {
            0 => InputSource::DagInput,
            k => InputSource::Block(k - 1),
        }
    }

    /// Index into the list `[dag_input, block0, block1, ...]`.
    pub fn slot_index(self) -> usize {
        match self {
            InputSource::DagInput => 0,
            InputSource::Block(b) => b + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedBlock {
    pub inputs: [InputSource; 2],
    /// Raw input genes, which index the shared weight banks.
    pub input_genes: [usize; 2],
    pub ops: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedCell {
    pub blocks: Vec<DecodedBlock>,
    /// Blocks not consumed by any other block, ascending.
    pub loose_ends: Vec<usize>,
}

impl DecodedCell {
    pub fn is_loose(&self, block: usize) -> bool {
        self.loose_ends.binary_search(&block).is_ok()
    }
}

pub fn decode(spec: &SearchSpaceSpec, genome: &CellGenome) -> Result<DecodedCell> {
    ensure_valid(spec, genome)?;
    let mut used = vec![false; spec.n_blocks];
    let blocks = (0..spec.n_blocks)
        .map(|b| {
            let g = genome.block(b);
            let inputs = [InputSource::from_gene(g[0]), InputSource::from_gene(g[1])];
            for src in inputs {
                if let InputSource::Block(k) = src {
                    used[k] = true;
                }
            }
            DecodedBlock {
                inputs,
                input_genes: [g[0], g[1]],
                ops: [g[2], g[3]],
            }
        })
        .collect();
    let loose_ends = (0..spec.n_blocks).filter(|&b| !used[b]).collect();
    Ok(DecodedCell { blocks, loose_ends })
}
