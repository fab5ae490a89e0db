//! The search loop: per-batch child sampling on shared weights, and a
//! steady-state GA generation after every epoch.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, AugmentConfig, Batch, LabeledImageSet, Normalization};
use crate::error::{Error, Result};
use crate::ga::{
    crossover_individuals, mutate_individual, next_generation, random_unique_individuals,
    replace_population, selection_probabilities, FitnessStats, GaConfig, Individual, Population,
};
use crate::genome::SearchSpaceSpec;
use crate::history::HistoryRow;
use crate::landscape::Landscape;
use crate::optim::{lr_at_epoch, Sgd, SgdConfig};
use crate::par;
use crate::rng::{stream, Rng, Streams};
use crate::supernet::{
    accuracy, backward_and_step, network_forward, Mode, NetworkConfig, SupernetWeights,
};

/// Augmentation knobs; the crop size is the network's image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub pad: usize,
    pub flip_prob: f64,
    pub cutout: usize,
}

impl AugmentSettings {
    pub fn for_side(side: usize) -> Self {
        let a = AugmentConfig::for_side(side, Normalization::identity());
        AugmentSettings {
            pad: a.pad,
            flip_prob: a.flip_prob,
            cutout: a.cutout,
        }
    }

    pub fn resolve(&self, side: usize, normalization: Normalization) -> Result<AugmentConfig> {
        let cfg = AugmentConfig {
            pad: self.pad,
            crop: side,
            flip_prob: self.flip_prob,
            cutout: self.cutout,
            normalization,
        };
        cfg.check(side)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub spec: SearchSpaceSpec,
    pub ga: GaConfig,
    pub network: NetworkConfig,
    pub augment: AugmentSettings,
    pub sgd: SgdConfig,
    /// N_e.
    pub epochs: usize,
    /// N_v, the validation images scored per evaluation.
    pub eval_subset: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
}

impl SearchConfig {
    pub fn check(&self) -> Result<()> {
        self.spec.check()?;
        self.ga.check()?;
        self.network.check(&self.spec)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_subset == 0 {
            return Err(Error::Config("eval_subset must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} is not a non-negative number",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// Training and validation images with their normalisation.
#[derive(Debug, Clone)]
pub struct SearchData {
    pub train: LabeledImageSet,
    pub valid: LabeledImageSet,
    pub normalization: Normalization,
}

impl SearchData {
    /// Normalisation statistics come from the training split.
    pub fn new(train: LabeledImageSet, valid: LabeledImageSet) -> Result<Self> {
        if train.is_empty() || valid.is_empty() {
            return Err(Error::Config(
                "training and validation sets must be non-empty".into(),
            ));
        }
        if train.side != valid.side || train.n_classes != valid.n_classes {
            return Err(Error::Config(
                "training and validation sets differ in image size or classes".into(),
            ));
        }
        let normalization = Normalization::from_set(&train);
        Ok(SearchData {
            train,
            valid,
            normalization,
        })
    }

    fn check(&self, config: &SearchConfig) -> Result<()> {
        if self.train.side != config.network.image_size {
            return Err(Error::Config(format!(
                "images are {0}×{0}, the network expects {1}×{1}",
                self.train.side, config.network.image_size
            )));
        }
        if self.train.n_classes != config.network.n_classes {
            return Err(Error::Config(format!(
                "the dataset has {} classes, the network {}",
                self.train.n_classes, config.network.n_classes
            )));
        }
        if config.eval_subset > self.valid.len() {
            return Err(Error::Config(format!(
                "eval_subset {} exceeds the {} validation images",
                config.eval_subset,
                self.valid.len()
            )));
        }
        Ok(())
    }
}

/// Where fitness comes from.
#[derive(Debug, Clone, Copy)]
pub enum Evaluator<'a> {
    /// Accuracy of the shared-weight supernet on a validation subset.
    Supernet(&'a SearchData),
    /// A deterministic function of the genomes; no weights are trained.
    Synthetic(&'a Landscape),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    /// The evaluated initial population, before any epoch.
    pub initial: FitnessStats,
    pub rows: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    /// Completed epochs.
    pub epoch: usize,
    pub population: Population,
    pub weights: Option<SupernetWeights>,
    pub optimizer: Option<Sgd>,
    pub streams: Streams,
    pub history: SearchHistory,
}

/// Draws two parents by fitness, crosses them and returns the mutated first
/// offspring, unevaluated.
pub fn sample_child(population: &Population, ga: &GaConfig, rng: &mut Rng) -> Result<Individual> {
    let selection = selection_probabilities(&population.fitnesses())?;
    let a = &population.members()[selection.sample(rng)];
    let b = &population.members()[selection.sample(rng)];
    let (x, _) = crossover_individuals(&population.spec, ga.crossover, a, b, rng)?;
    Ok(mutate_individual(
        &population.spec,
        &x,
        ga.mutation_prob,
        rng,
    ))
}

/// Fraction of `logits` rows whose argmax is the label.
pub fn fitness_from_logits(logits: &crate::Tensor, labels: &[usize]) -> f64 {
    accuracy(logits, labels)
}

/// Top-1 accuracy over `indices` of the validation set, evaluated in chunks
/// of `batch_size` (batch statistics make chunking part of the definition).
pub fn evaluate_individual(
    weights: &SupernetWeights,
    ind: &Individual,
    data: &SearchData,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = Batch::plain(&data.valid, chunk, &data.normalization);
        let out =
            network_forward(weights, ind, &batch, Mode::Eval).map_err(|e| with_genome(e, ind))?;
        correct += accuracy(&out.logits, &batch.labels) * chunk.len() as f64;
    }
    Ok(correct / indices.len() as f64)
}

fn with_genome(err: Error, ind: &Individual) -> Error {
    match err {
        Error::NonFinite {
            layer,
            genome: None,
        } => Error::NonFinite {
            layer,
            genome: serde_json::to_string(&ind.genomes).ok(),
        },
        other => other,
    }
}

fn validation_subset(data: &SearchData, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx = sample_indices(rng, data.valid.len(), n).into_vec();
    idx.sort_unstable();
    idx
}

/// Scores `inds` in parallel over frozen weights, one shared subset.
fn evaluate_all(
    config: &SearchConfig,
    evaluator: Evaluator,
    weights: Option<&SupernetWeights>,
    inds: Vec<Individual>,
    valid_rng: &mut Rng,
) -> Result<Vec<Individual>> {
    let scores: Vec<Result<f64>> = match evaluator {
        Evaluator::Synthetic(land) => inds.iter().map(|i| Ok(land.fitness(i))).collect(),
        Evaluator::Supernet(data) => {
            let w = weights
                .ok_or_else(|| Error::Config("supernet evaluation without weights".into()))?;
            let subset = validation_subset(data, config.eval_subset, valid_rng);
            par::map_slice(&inds, |ind| {
                evaluate_individual(w, ind, data, &subset, config.batch_size)
            })
        }
    };
    inds.into_iter()
        .zip(scores)
        .map(|(ind, s)| Ok(ind.with_fitness(s?)))
        .collect()
}

/// Fresh weights and an evaluated random initial population.
pub fn init_state(config: &SearchConfig, evaluator: Evaluator) -> Result<SearchState> {
    config.check()?;
    let mut streams = Streams::new(config.seed);
    let (weights, optimizer) = match evaluator {
        Evaluator::Supernet(data) => {
            data.check(config)?;
            let w = SupernetWeights::init(config.spec, config.network.clone(), &mut streams.init)?;
            (Some(w), Some(Sgd::new(config.sgd.clone())))
        }
        Evaluator::Synthetic(land) => {
            if land.spec != config.spec {
                return Err(Error::SpecMismatch);
            }
            (None, None)
        }
    };
    let members =
        random_unique_individuals(&config.spec, config.ga.population_size, &mut streams.init)?;
    let members = evaluate_all(
        config,
        evaluator,
        weights.as_ref(),
        members,
        &mut streams.valid,
    )?;
    let population = Population::new(config.spec, members)?;
    let initial = population.stats();
    Ok(SearchState {
        epoch: 0,
        population,
        weights,
        optimizer,
        streams,
        history: SearchHistory {
            initial,
            rows: Vec::new(),
        },
    })
}

/// One epoch: a training step per batch on a freshly sampled child, then a
/// generation of offspring scored on a fresh subset and merged into the
/// population.
pub fn run_search_epoch(
    state: &mut SearchState,
    config: &SearchConfig,
    evaluator: Evaluator,
) -> Result<HistoryRow> {
    let (lr, train_loss) = match evaluator {
        Evaluator::Supernet(data) => {
            let lr = lr_at_epoch(state.epoch, config.epochs, config.base_lr);
            (lr, train_epoch(state, config, data, lr)?)
        }
        Evaluator::Synthetic(_) => (0.0, 0.0),
    };
    let offspring = next_generation(&state.population, &config.ga, &mut state.streams.ga)?;
    let offspring = evaluate_all(
        config,
        evaluator,
        state.weights.as_ref(),
        offspring,
        &mut state.streams.valid,
    )?;
    let rep = replace_population(&state.population, &offspring, config.ga.population_size)?;
    state.population = rep.population;
    state.epoch += 1;
    let s = state.population.stats();
    let row = HistoryRow {
        epoch: state.epoch,
        mean: s.mean,
        max: s.max,
        min: s.min,
        std: s.std,
        inserted: rep.inserted,
        lr,
        train_loss,
    };
    state.history.rows.push(row);
    Ok(row)
}

fn train_epoch(
    state: &mut SearchState,
    config: &SearchConfig,
    data: &SearchData,
    lr: f64,
) -> Result<f64> {
    let augment = config
        .augment
        .resolve(data.train.side, data.normalization)?;
    let (Some(weights), Some(sgd)) = (state.weights.as_mut(), state.optimizer.as_mut()) else {
        return Err(Error::Config("supernet search state has no weights".into()));
    };
    let batches = minibatches(
        data.train.len(),
        config.batch_size,
        true,
        &mut state.streams.data,
    )?;
    let mut total = 0.0;
    for idx in &batches {
        let child = sample_child(&state.population, &config.ga, &mut state.streams.sample)?;
        let batch = Batch::augmented(&data.train, idx, &augment, &mut state.streams.data);
        let out = backward_and_step(
            weights,
            sgd,
            &child,
            &batch,
            lr,
            &mut state.streams.sample,
            false,
        )
        .map_err(|e| with_genome(e, &child))?;
        total += out.loss;
    }
    Ok(total / batches.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Individual,
    pub state: SearchState,
}

/// Runs epochs until `stop_epoch` (at most `config.epochs`), calling
/// `observer` after each one.
pub fn run_epochs(
    state: &mut SearchState,
    config: &SearchConfig,
    evaluator: Evaluator,
    stop_epoch: usize,
    observer: &mut dyn FnMut(&SearchState, &HistoryRow) -> Result<()>,
) -> Result<()> {
    let stop = stop_epoch.min(config.epochs);
    while state.epoch < stop {
        let row = run_search_epoch(state, config, evaluator)?;
        log::info!(
            "epoch {}/{}: mean {:.4} max {:.4} inserted {} loss {:.4}",
            row.epoch,
            config.epochs,
            row.mean,
            row.max,
            row.inserted,
            row.train_loss
        );
        observer(state, &row)?;
    }
    Ok(())
}

/// Full search, optionally continuing from a restored state.
pub fn run_search(
    config: &SearchConfig,
    evaluator: Evaluator,
    resume: Option<SearchState>,
    observer: &mut dyn FnMut(&SearchState, &HistoryRow) -> Result<()>,
) -> Result<SearchOutcome> {
    let mut state = match resume {
        Some(s) => s,
        None => init_state(config, evaluator)?,
    };
    run_epochs(&mut state, config, evaluator, config.epochs, observer)?;
    Ok(SearchOutcome {
        best: state.population.best().clone(),
        state,
    })
}

/// Settings for retraining one architecture from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalTrainConfig {
    pub network: NetworkConfig,
    pub augment: AugmentSettings,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FinalOutcome {
    pub weights: SupernetWeights,
    /// Accuracy on the full validation set.
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Fresh weights, a single fixed architecture, drop-path on.
pub fn final_train(
    ind: &Individual,
    spec: &SearchSpaceSpec,
    config: &FinalTrainConfig,
    data: &SearchData,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<FinalOutcome> {
    ind.validate(spec)?;
    config.network.check(spec)?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config(
            "final training needs epochs and batch_size of at least 1".into(),
        ));
    }
    let augment = config
        .augment
        .resolve(data.train.side, data.normalization)?;
    let mut weights = SupernetWeights::init(
        *spec,
        config.network.clone(),
        &mut stream(config.seed, "final.init"),
    )?;
    let mut sgd = Sgd::new(config.sgd.clone());
    let mut data_rng = stream(config.seed, "final.data");
    let mut mask_rng = stream(config.seed, "final.mask");
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(epoch, config.epochs, config.base_lr);
        let batches = minibatches(data.train.len(), config.batch_size, true, &mut data_rng)?;
        let mut total = 0.0;
        for idx in &batches {
            let batch = Batch::augmented(&data.train, idx, &augment, &mut data_rng);
            let out =
                backward_and_step(&mut weights, &mut sgd, ind, &batch, lr, &mut mask_rng, true)
                    .map_err(|e| with_genome(e, ind))?;
            total += out.loss;
        }
        let loss = total / batches.len() as f64;
        on_epoch(epoch + 1, loss);
        epoch_losses.push(loss);
    }
    let all: Vec<usize> = (0..data.valid.len()).collect();
    let accuracy = evaluate_individual(&weights, ind, data, &all, config.batch_size)?;
    Ok(FinalOutcome {
        weights,
        accuracy,
        epoch_losses,
    })
}

/// Generations until the population's best is the landscape optimum
/// (0 when the initial population already holds it), or `None` within
/// `max_generations`.
pub fn generations_to_optimum(
    spec: SearchSpaceSpec,
    ga: &GaConfig,
    landscape: &Landscape,
    max_generations: usize,
    seed: u64,
) -> Result<Option<usize>> {
    let config = synthetic_config(spec, ga, max_generations, seed);
    let evaluator = Evaluator::Synthetic(landscape);
    let mut state = init_state(&config, evaluator)?;
    let target = landscape.optimum_fitness();
    if state.population.best().fitness_or_zero() >= target {
        return Ok(Some(0));
    }
    while state.epoch < max_generations {
        run_search_epoch(&mut state, &config, evaluator)?;
        if state.population.best().fitness_or_zero() >= target {
            return Ok(Some(state.epoch));
        }
    }
    Ok(None)
}

/// Best fitness after `generations` generations on a landscape.
pub fn final_best_fitness(
    spec: SearchSpaceSpec,
    ga: &GaConfig,
    landscape: &Landscape,
    generations: usize,
    seed: u64,
) -> Result<f64> {
    let config = synthetic_config(spec, ga, generations, seed);
    let out = run_search(
        &config,
        Evaluator::Synthetic(landscape),
        None,
        &mut |_, _| Ok(()),
    )?;
    Ok(out.best.fitness_or_zero())
}

/// A search config for landscape runs; network and training fields are
/// placeholders that synthetic evaluation never reads.
pub fn synthetic_config(
    spec: SearchSpaceSpec,
    ga: &GaConfig,
    epochs: usize,
    seed: u64,
) -> SearchConfig {
    SearchConfig {
        spec,
        ga: ga.clone(),
        network: NetworkConfig {
            n_cells: 1,
            channels: 1,
            n_classes: 1,
            image_size: 1,
            dropout: 0.0,
            drop_path: 0.0,
        },
        augment: AugmentSettings {
            pad: 0,
            flip_prob: 0.0,
            cutout: 0,
        },
        sgd: SgdConfig::default(),
        epochs: epochs.max(1),
        eval_subset: 1,
        batch_size: 1,
        base_lr: 0.0,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ga::CellType;
    use crate::genome::validate_genome;
    use crate::landscape::LandscapeConfig;

    fn spec() -> SearchSpaceSpec {
        SearchSpaceSpec::new(3, 5).unwrap()
    }

    fn one_member(p_m: f64) -> (Population, GaConfig) {
        let ind = Individual::random(&spec(), &mut stream(1, "m")).with_fitness(0.5);
        let pop = Population::new(spec(), vec![ind]).unwrap();
        let ga = GaConfig {
            mutation_prob: p_m,
            ..GaConfig::default()
        };
        (pop, ga)
    }

    #[test]
    fn lone_member_without_mutation_is_returned() {
        let (pop, ga) = one_member(0.0);
        let mut rng = stream(2, "s");
        for _ in 0..20 {
            let child = sample_child(&pop, &ga, &mut rng).unwrap();
            assert_eq!(child.genomes, pop.members()[0].genomes);
            assert_eq!(child.fitness, None);
        }
    }

    #[test]
    fn sampled_children_are_valid() {
        let s = spec();
        let mut rng = stream(3, "s");
        let members = random_unique_individuals(&s, 6, &mut rng)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.with_fitness(i as f64 / 6.0))
            .collect();
        let pop = Population::new(s, members).unwrap();
        let ga = GaConfig {
            mutation_prob: 0.3,
            ..GaConfig::default()
        };
        for _ in 0..10_000 {
            let child = sample_child(&pop, &ga, &mut rng).unwrap();
            for g in &child.genomes {
                assert!(validate_genome(&s, g).is_empty());
            }
        }
    }

    #[test]
    fn full_mutation_changes_a_gene_often_enough() {
        let (pop, ga) = one_member(1.0);
        let s = spec();
        // genes with range 1 never move; every other gene moves for sure
        let movable = (0..s.genome_len())
            .filter(|&i| s.gene_range_size(i) >= 2)
            .count()
            * 3;
        let bound = 1.0 - 0.5f64.powi(movable as i32);
        let mut rng = stream(4, "s");
        let trials = 2000;
        let changed = (0..trials)
            .filter(|_| {
                sample_child(&pop, &ga, &mut rng).unwrap().genomes != pop.members()[0].genomes
            })
            .count();
        assert!(changed as f64 / trials as f64 >= bound - 1e-12, "{changed}");
    }

    #[test]
    fn synthetic_smoke_and_bounds() {
        let s = SearchSpaceSpec::new(2, 2).unwrap();
        let land = Landscape::new(s, &LandscapeConfig::default()).unwrap();
        let ga = GaConfig {
            population_size: 4,
            generation_size: 3,
            mutation_prob: 0.1,
            crossover: crate::ga::CrossoverKind::Uniform,
        };
        let config = synthetic_config(s, &ga, 12, 5);
        let mut seen = 0;
        let out = run_search(&config, Evaluator::Synthetic(&land), None, &mut |_, row| {
            seen += 1;
            assert!(row.inserted <= 3);
            assert!(row.min <= row.mean && row.mean <= row.max);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 12);
        let rows = &out.state.history.rows;
        assert_eq!(rows.len(), 12);
        for w in rows.windows(2) {
            assert!(w[1].max >= w[0].max);
        }
        assert!(rows[0].max >= out.state.history.initial.max);
    }

    #[test]
    fn whole_space_converges_to_the_top_set_in_one_generation() {
        let s = SearchSpaceSpec::new(2, 2).unwrap();
        let land = Landscape::new(
            s,
            &LandscapeConfig {
                seed: 3,
                shape: crate::landscape::BlockShape::Bowl { roughness: 1.0 },
                cells: vec![CellType::Normal],
            },
        )
        .unwrap();
        let zero = crate::genome::CellGenome::from_genes(vec![0; 8]);
        let all: Vec<Individual> = crate::landscape::enumerate_genomes(&s)
            .into_iter()
            .map(|g| {
                let ind = Individual::new([zero.clone(), g, zero.clone()]);
                let f = land.fitness(&ind);
                ind.with_fitness(f)
            })
            .collect();
        let mut expect: Vec<f64> = all.iter().map(Individual::fitness_or_zero).collect();
        expect.sort_by(|a, b| b.total_cmp(a));
        let pop = Population::new(s, all).unwrap();
        let ga = GaConfig {
            population_size: 8,
            generation_size: 8,
            mutation_prob: 0.0,
            crossover: crate::ga::CrossoverKind::Block,
        };
        let mut rng = stream(6, "g");
        let offspring: Vec<Individual> = next_generation(&pop, &ga, &mut rng)
            .unwrap()
            .into_iter()
            .map(|i| {
                let f = land.fitness(&i);
                i.with_fitness(f)
            })
            .collect();
        let rep = replace_population(&pop, &offspring, 8).unwrap();
        let mut got = rep.population.fitnesses();
        got.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(got, expect[..8]);
    }

    #[test]
    fn constant_logits_pick_the_lowest_class() {
        let logits = crate::Tensor::zeros(&[10, 10]);
        let labels: Vec<usize> = (0..10).collect();
        assert_eq!(fitness_from_logits(&logits, &labels), 0.1);
        let mut one_hot = crate::Tensor::zeros(&[10, 10]);
        for i in 0..10 {
            one_hot.data_mut()[i * 10 + labels[i]] = 1.0;
        }
        assert_eq!(fitness_from_logits(&one_hot, &labels), 1.0);
    }

    #[test]
    fn landscape_spec_must_match() {
        let land = Landscape::new(
            SearchSpaceSpec::new(2, 2).unwrap(),
            &LandscapeConfig::default(),
        )
        .unwrap();
        let config = synthetic_config(spec(), &GaConfig::default(), 1, 0);
        assert!(matches!(
            init_state(&config, Evaluator::Synthetic(&land)),
            Err(Error::SpecMismatch)
        ));
    }
}
