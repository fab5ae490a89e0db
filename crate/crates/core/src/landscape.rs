//! Deterministic synthetic fitness functions over genomes.
//!
//! A landscape scores each block of the scored cell types from a lookup
//! table indexed by the block's four genes and averages the block scores, so
//! the global optimum is the per-block argmax. That makes GA behaviour
//! checkable against exhaustive enumeration without training anything.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ga::{CellType, Individual};
use crate::genome::{CellGenome, SearchSpaceSpec};
use crate::rng::stream;

/// How a block's score falls off away from its hidden target tuple, which
/// always scores exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum BlockShape {
    /// `(1 - r)·closeness + r·u`, with circular gene distance and `u`
    /// uniform in `[0, 1)`: `r = 0` is a smooth bowl, `r = 1` a random table.
    Bowl { roughness: f64 },
    /// Deceptive: `(1 - gap)·d / 4` with `d` the number of genes that differ
    /// from the target, so every slope leads away from the optimum.
    Trap { gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    pub seed: u64,
    pub shape: BlockShape,
    pub cells: Vec<CellType>,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            seed: 0,
            shape: BlockShape::Bowl { roughness: 0.5 },
            cells: CellType::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub spec: SearchSpaceSpec,
    pub cells: Vec<CellType>,
    /// `[scored cell][block][tuple index]`, values in `[0, 1]`.
    tables: Vec<Vec<Vec<f64>>>,
}

/// Genes of block `b` as a single table index.
pub fn tuple_index(spec: &SearchSpaceSpec, b: usize, genes: &[usize]) -> usize {
    let (ni, no) = (spec.n_inputs(b), spec.n_ops);
    ((genes[0] * ni + genes[1]) * no + genes[2]) * no + genes[3]
}

pub fn tuple_count(spec: &SearchSpaceSpec, b: usize) -> usize {
    let (ni, no) = (spec.n_inputs(b), spec.n_ops);
    ni * ni * no * no
}

fn tuple_genes(spec: &SearchSpaceSpec, b: usize, mut t: usize) -> [usize; 4] {
    let (ni, no) = (spec.n_inputs(b), spec.n_ops);
    let j_b = t % no;
    t /= no;
    let j_a = t % no;
    t /= no;
    [t / ni, t % ni, j_a, j_b]
}

fn circular(a: usize, b: usize, range: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(range - d)
}

impl Landscape {
    pub fn new(spec: SearchSpaceSpec, config: &LandscapeConfig) -> Result<Self> {
        spec.check()?;
        let (BlockShape::Bowl { roughness: p } | BlockShape::Trap { gap: p }) = config.shape;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "landscape parameter {p} outside [0, 1]"
            )));
        }
        if config.cells.is_empty() {
            return Err(Error::Config(
                "a landscape must score at least one cell type".into(),
            ));
        }
        let mut rng = stream(config.seed, "landscape");
        let tables = config
            .cells
            .iter()
            .map(|_| {
                (0..spec.n_blocks)
                    .map(|b| {
                        let ni = spec.n_inputs(b);
                        let ranges = [ni, ni, spec.n_ops, spec.n_ops];
                        let target: Vec<usize> =
                            ranges.iter().map(|&n| rng.random_range(0..n)).collect();
                        let max_dist: usize = ranges.iter().map(|&n| n / 2).sum();
                        (0..tuple_count(&spec, b))
                            .map(|t| {
                                let g = tuple_genes(&spec, b, t);
                                let u: f64 = rng.random();
                                if g[..] == target[..] {
                                    return 1.0;
                                }
                                let v = match config.shape {
                                    BlockShape::Bowl { roughness } => {
                                        let dist: usize = (0..4)
                                            .map(|k| circular(g[k], target[k], ranges[k]))
                                            .sum();
                                        let close = if max_dist == 0 {
                                            1.0
                                        } else {
                                            1.0 - dist as f64 / max_dist as f64
                                        };
                                        (1.0 - roughness) * close + roughness * u
                                    }
                                    BlockShape::Trap { gap } => {
                                        let d = (0..4).filter(|&k| g[k] != target[k]).count();
                                        (1.0 - gap) * d as f64 / 4.0
                                    }
                                };
                                // keep off-target tuples strictly below the target
                                v.min(1.0 - 1e-9)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Landscape {
            spec,
            cells: config.cells.clone(),
            tables,
        })
    }

    /// Builds a landscape from explicit tables, `[cell][block][tuple]`.
    pub fn from_tables(
        spec: SearchSpaceSpec,
        cells: Vec<CellType>,
        tables: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        spec.check()?;
        let ok = tables.len() == cells.len()
            && !cells.is_empty()
            && tables.iter().all(|t| {
                t.len() == spec.n_blocks
                    && t.iter()
                        .enumerate()
                        .all(|(b, row)| row.len() == tuple_count(&spec, b))
            });
        if !ok {
            return Err(Error::Config(
                "landscape tables do not match the search space".into(),
            ));
        }
        Ok(Landscape {
            spec,
            cells,
            tables,
        })
    }

    pub fn score_genome(&self, cell: usize, genome: &CellGenome) -> f64 {
        let s: f64 = (0..self.spec.n_blocks)
            .map(|b| self.tables[cell][b][tuple_index(&self.spec, b, genome.block(b))])
            .sum();
        s / self.spec.n_blocks as f64
    }

    /// Mean block score over the scored cell types, in `[0, 1]`.
    pub fn fitness(&self, ind: &Individual) -> f64 {
        let s: f64 = self
            .cells
            .iter()
            .enumerate()
            .map(|(k, &c)| self.score_genome(k, ind.genome(c)))
            .sum();
        s / self.cells.len() as f64
    }

    /// Per-block argmax, which is the global optimum of an additive score.
    pub fn optimum_genomes(&self) -> Vec<CellGenome> {
        self.tables
            .iter()
            .map(|cell| {
                let genes = cell
                    .iter()
                    .enumerate()
                    .flat_map(|(b, row)| {
                        let best =
                            (0..row.len())
                                .fold(0, |best, t| if row[t] > row[best] { t } else { best });
                        tuple_genes(&self.spec, b, best)
                    })
                    .collect();
                CellGenome::from_genes(genes)
            })
            .collect()
    }

    pub fn optimum_fitness(&self) -> f64 {
        let s: f64 = self
            .optimum_genomes()
            .iter()
            .enumerate()
            .map(|(k, g)| self.score_genome(k, g))
            .sum();
        s / self.cells.len() as f64
    }

    /// Whether every scored genome of `ind` sits at the optimum.
    pub fn is_optimal(&self, ind: &Individual) -> bool {
        self.optimum_genomes()
            .iter()
            .zip(&self.cells)
            .all(|(g, &c)| ind.genome(c) == g)
    }
}

/// Every valid genome of a small space, in lexicographic gene order.
pub fn enumerate_genomes(spec: &SearchSpaceSpec) -> Vec<CellGenome> {
    let len = spec.genome_len();
    let ranges: Vec<usize> = (0..len).map(|i| spec.gene_range_size(i)).collect();
    let mut out = Vec::new();
    let mut genes = vec![0usize; len];
    loop {
        out.push(CellGenome::from_genes(genes.clone()));
        let mut k = len;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            genes[k] += 1;
            if genes[k] < ranges[k] {
                break;
            }
            genes[k] = 0;
        }
    }
}
