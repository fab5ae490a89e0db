//! Genetic operators over cell genomes: fitness-proportional selection,
//! uniform and block crossover, ±1 mutation and steady-state replacement
//! without duplicates.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{ensure_valid, random_genome, CellGenome, SearchSpaceSpec, GENES_PER_BLOCK};

pub const POPULATION_SCHEMA: &str = "gnas.population.v1";

/// The three searched cell types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Input,
    Normal,
    Reduction,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Input, CellType::Normal, CellType::Reduction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Input => "input",
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    Uniform,
    Block,
}

/// One candidate architecture: a genome per cell type plus its fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    /// Indexed by [`CellType::index`].
    pub genomes: [CellGenome; 3],
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(genomes: [CellGenome; 3]) -> Self {
        Individual {
            genomes,
            fitness: None,
        }
    }

    pub fn genome(&self, cell: CellType) -> &CellGenome {
        &self.genomes[cell.index()]
    }

    pub fn random<R: Rng + ?Sized>(spec: &SearchSpaceSpec, rng: &mut R) -> Self {
        Individual::new([
            random_genome(spec, rng),
            random_genome(spec, rng),
            random_genome(spec, rng),
        ])
    }

    pub fn validate(&self, spec: &SearchSpaceSpec) -> Result<()> {
        for g in &self.genomes {
            ensure_valid(spec, g)?;
        }
        if let Some(f) = self.fitness {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidPopulation(format!(
                    "fitness {f} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn with_fitness(mut self, fitness: f64) -> Self {
        self.fitness = Some(fitness);
        self
    }

    pub fn fitness_or_zero(&self) -> f64 {
        self.fitness.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    pub generation_size: usize,
    pub mutation_prob: f64,
    pub crossover: CrossoverKind,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 20,
            generation_size: 20,
            mutation_prob: 0.02,
            crossover: CrossoverKind::Block,
        }
    }
}

impl GaConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::Config(format!(
                "mutation_prob {} outside [0, 1]",
                self.mutation_prob
            )));
        }
        if self.population_size < 2 {
            return Err(Error::Config("population_size must be at least 2".into()));
        }
        if self.generation_size < 1 {
            return Err(Error::Config("generation_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fitness-proportional probabilities `p_i = f_i / sum(f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub probs: Vec<f64>,
    /// Set when every fitness is zero and the uniform fallback was used.
    pub degenerate: bool,
}

pub fn selection_probabilities(fitnesses: &[f64]) -> Result<Selection> {
    if fitnesses.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if let Some(f) = fitnesses.iter().find(|f| !f.is_finite() || **f < 0.0) {
        return Err(Error::InvalidPopulation(format!(
            "fitness {f} is not a non-negative number"
        )));
    }
    let total: f64 = fitnesses.iter().sum();
    if total == 0.0 {
        log::warn!("all fitness values are zero; selecting uniformly");
        let p = 1.0 / fitnesses.len() as f64;
        return Ok(Selection {
            probs: vec![p; fitnesses.len()],
            degenerate: true,
        });
    }
    Ok(Selection {
        probs: fitnesses.iter().map(|f| f / total).collect(),
        degenerate: false,
    })
}

impl Selection {
    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

fn check_parents(spec: &SearchSpaceSpec, a: &CellGenome, b: &CellGenome) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SpecMismatch);
    }
    ensure_valid(spec, a)?;
    ensure_valid(spec, b)
}

/// Gene `g` of the first offspring comes from `b` where `mask[g]` is set;
/// the second offspring uses the negated mask.
pub fn crossover_with_mask(
    a: &CellGenome,
    b: &CellGenome,
    mask: &[bool],
) -> (CellGenome, CellGenome) {
    let (mut x, mut y) = (a.clone(), b.clone());
    for (g, &swap) in mask.iter().enumerate() {
        if swap {
            x.genes_mut()[g] = b.genes()[g];
            y.genes_mut()[g] = a.genes()[g];
        }
    }
    (x, y)
}

pub fn uniform_crossover<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    a: &CellGenome,
    b: &CellGenome,
    rng: &mut R,
) -> Result<(CellGenome, CellGenome)> {
    check_parents(spec, a, b)?;
    let mask: Vec<bool> = (0..a.len()).map(|_| rng.random_bool(0.5)).collect();
    Ok(crossover_with_mask(a, b, &mask))
}

/// Expands a per-block status vector into a per-gene mask.
pub fn block_mask(status: &[bool]) -> Vec<bool> {
    status
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, GENES_PER_BLOCK))
        .collect()
}

pub fn block_crossover<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    a: &CellGenome,
    b: &CellGenome,
    rng: &mut R,
) -> Result<(CellGenome, CellGenome)> {
    check_parents(spec, a, b)?;
    let status: Vec<bool> = (0..spec.n_blocks).map(|_| rng.random_bool(0.5)).collect();
    Ok(crossover_with_mask(a, b, &block_mask(&status)))
}

pub fn crossover<R: Rng + ?Sized>(
    kind: CrossoverKind,
    spec: &SearchSpaceSpec,
    a: &CellGenome,
    b: &CellGenome,
    rng: &mut R,
) -> Result<(CellGenome, CellGenome)> {
    match kind {
        CrossoverKind::Uniform => uniform_crossover(spec, a, b, rng),
        CrossoverKind::Block => block_crossover(spec, a, b, rng),
    }
}

/// `value + delta` wrapped into `[0, range)`.
pub fn wrap_step(value: usize, delta: i64, range: usize) -> usize {
    (value as i64 + delta).rem_euclid(range as i64) as usize
}

/// Each gene is picked with probability `p_m` and moved by ±1 with equal
/// probability, wrapping within its range.
pub fn mutate<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    genome: &CellGenome,
    p_m: f64,
    rng: &mut R,
) -> CellGenome {
    let mut out = genome.clone();
    for (g, value) in out.genes_mut().iter_mut().enumerate() {
        if rng.random_bool(p_m) {
            let delta = if rng.random_bool(0.5) { 1 } else { -1 };
            *value = wrap_step(*value, delta, spec.gene_range_size(g));
        }
    }
    out
}

/// Crosses two individuals cell type by cell type, one mask per cell type.
pub fn crossover_individuals<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    kind: CrossoverKind,
    a: &Individual,
    b: &Individual,
    rng: &mut R,
) -> Result<(Individual, Individual)> {
    let mut x = Vec::with_capacity(3);
    let mut y = Vec::with_capacity(3);
    for cell in CellType::ALL {
        let (gx, gy) = crossover(kind, spec, a.genome(cell), b.genome(cell), rng)?;
        x.push(gx);
        y.push(gy);
    }
    Ok((
        Individual::new(into_triple(x)),
        Individual::new(into_triple(y)),
    ))
}

pub fn mutate_individual<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    ind: &Individual,
    p_m: f64,
    rng: &mut R,
) -> Individual {
    Individual::new([
        mutate(spec, &ind.genomes[0], p_m, rng),
        mutate(spec, &ind.genomes[1], p_m, rng),
        mutate(spec, &ind.genomes[2], p_m, rng),
    ])
}

fn into_triple(v: Vec<CellGenome>) -> [CellGenome; 3] {
    v.try_into().expect("three cell genomes")
}

/// Fixed-size set of evaluated, pairwise distinct individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub spec: SearchSpaceSpec,
    members: Vec<Individual>,
}

impl Population {
    pub fn new(spec: SearchSpaceSpec, members: Vec<Individual>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        let mut seen = HashMap::new();
        for (i, m) in members.iter().enumerate() {
            m.validate(&spec)?;
            if m.fitness.is_none() {
                return Err(Error::InvalidPopulation(format!(
                    "member {i} is not evaluated"
                )));
            }
            if let Some(j) = seen.insert(&m.genomes, i) {
                return Err(Error::InvalidPopulation(format!(
                    "members {j} and {i} are duplicates"
                )));
            }
        }
        Ok(Population { spec, members })
    }

    pub fn members(&self) -> &[Individual] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn fitnesses(&self) -> Vec<f64> {
        self.members
            .iter()
            .map(Individual::fitness_or_zero)
            .collect()
    }

    pub fn best(&self) -> &Individual {
        // ties go to the earliest member
        self.members
            .iter()
            .reduce(|best, m| {
                if m.fitness_or_zero() > best.fitness_or_zero() {
                    m
                } else {
                    best
                }
            })
            .expect("population is never empty")
    }

    pub fn stats(&self) -> FitnessStats {
        FitnessStats::of(&self.fitnesses())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'a str,
            spec: &'a SearchSpaceSpec,
            members: &'a [Individual],
        }
        Ok(serde_json::to_string_pretty(&Doc {
            schema: POPULATION_SCHEMA,
            spec: &self.spec,
            members: &self.members,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            spec: SearchSpaceSpec,
            members: Vec<Individual>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != POPULATION_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "unsupported population schema {}",
                doc.schema
            )));
        }
        doc.spec.check()?;
        Population::new(doc.spec, doc.members)
    }
}

/// `n` distinct random individuals. Fails when the space is too small.
pub fn random_unique_individuals<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Individual>> {
    let mut out: Vec<Individual> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::Config(format!(
                "could not draw {n} distinct individuals from the search space"
            )));
        }
        let ind = Individual::random(spec, rng);
        if !out.iter().any(|m| m.genomes == ind.genomes) {
            out.push(ind);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl FitnessStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        FitnessStats {
            mean,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            std: var.sqrt(),
        }
    }
}

/// Builds `generation_size` offspring: pairs of parents drawn independently
/// by fitness, crossed per cell type, both offspring mutated.
pub fn next_generation<R: Rng + ?Sized>(
    population: &Population,
    config: &GaConfig,
    rng: &mut R,
) -> Result<Vec<Individual>> {
    if population.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let selection = selection_probabilities(&population.fitnesses())?;
    let spec = &population.spec;
    let mut out = Vec::with_capacity(config.generation_size + 1);
    while out.len() < config.generation_size {
        let a = &population.members[selection.sample(rng)];
        let b = &population.members[selection.sample(rng)];
        let (x, y) = crossover_individuals(spec, config.crossover, a, b, rng)?;
        out.push(mutate_individual(spec, &x, config.mutation_prob, rng));
        out.push(mutate_individual(spec, &y, config.mutation_prob, rng));
    }
    out.truncate(config.generation_size);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub population: Population,
    /// Members of the new population that were not in the old one.
    pub inserted: usize,
    /// The deduplicated pool held fewer than the target size.
    pub underfull: bool,
}

/// Keeps the best `target_size` distinct individuals of the current members
/// and the evaluated offspring. Duplicates collapse onto the earliest entry
/// with the higher fitness; ties favour incumbents, then insertion order.
pub fn replace_population(
    population: &Population,
    offspring: &[Individual],
    target_size: usize,
) -> Result<Replacement> {
    let spec = population.spec;
    let mut pool: Vec<(Individual, bool)> = Vec::with_capacity(population.len() + offspring.len());
    let mut index: HashMap<[CellGenome; 3], usize> = HashMap::new();
    let incumbents = population.members.iter().map(|m| (m, true));
    let newcomers = offspring.iter().map(|m| (m, false));
    for (ind, incumbent) in incumbents.chain(newcomers) {
        let fitness = ind
            .fitness
            .ok_or_else(|| Error::InvalidPopulation("offspring must be evaluated".into()))?;
        ind.validate(&spec)?;
        match index.get(&ind.genomes) {
            Some(&slot) => {
                let kept = &mut pool[slot].0;
                if fitness > kept.fitness_or_zero() {
                    kept.fitness = Some(fitness);
                }
            }
            None => {
                index.insert(ind.genomes.clone(), pool.len());
                pool.push((ind.clone(), incumbent));
            }
        }
    }
    // stable: incumbents precede newcomers, each in insertion order
    pool.sort_by(|a, b| b.0.fitness_or_zero().total_cmp(&a.0.fitness_or_zero()));
    let underfull = pool.len() < target_size;
    if underfull {
        log::warn!(
            "replacement pool has {} individuals, below {target_size}",
            pool.len()
        );
    }
    pool.truncate(target_size);
    let inserted = pool.iter().filter(|(_, inc)| !inc).count();
    let members = pool.into_iter().map(|(m, _)| m).collect();
    Ok(Replacement {
        population: Population { spec, members },
        inserted,
        underfull,
    })
}
