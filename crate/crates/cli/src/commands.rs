//! search, final-train, enumerate and export-dot.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use genetic_nas::checkpoint::{load_state, save_state, save_weights};
use genetic_nas::config::{parse_run_config, DatasetKind, RunConfig};
use genetic_nas::export::{export_dot_files, write_atomic, write_json, BestIndividual, RunLock};
use genetic_nas::history::{history_csv, HistorySink};
use genetic_nas::landscape::Landscape;
use genetic_nas::optim::lr_at_epoch;
use genetic_nas::search::{final_train as train_final, run_search, Evaluator, SearchData};
use genetic_nas::{CellGenome, Error, SearchSpaceSpec};
use serde::Serialize;

use crate::config_error;

pub const SEARCH_CONFIG_FILE: &str = "search.toml";
pub const FINAL_CONFIG_FILE: &str = "final-train.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const STATE_FILE: &str = "state.ckpt";
pub const WEIGHTS_FILE: &str = "weights.ckpt";
pub const BEST_FILE: &str = "best.json";
pub const POPULATION_FILE: &str = "population.json";
pub const ABORT_FILE: &str = "abort.json";
pub const FINAL_WEIGHTS_FILE: &str = "final_weights.ckpt";
pub const FINAL_RESULT_FILE: &str = "final.json";
pub const FINAL_HISTORY_FILE: &str = "final_history.csv";

/// The rough figure usually quoted for the five-block, five-op space.
const CLAIMED_SIZE: &str = "~1e12";

#[derive(Serialize)]
struct AbortDump {
    schema: &'static str,
    mode: String,
    completed_epochs: usize,
    error: String,
    layer: Option<String>,
    /// The three cell genomes of the individual being trained or evaluated.
    genome: Option<serde_json::Value>,
}

fn write_abort(out: &Path, mode: &str, completed_epochs: usize, err: &Error) {
    let (layer, genome) = match err {
        Error::NonFinite { layer, genome } => (
            Some(layer.clone()),
            genome.as_deref().and_then(|g| serde_json::from_str(g).ok()),
        ),
        _ => (None, None),
    };
    let dump = AbortDump {
        schema: "gnas.abort.v1",
        mode: mode.into(),
        completed_epochs,
        error: err.to_string(),
        layer,
        genome,
    };
    let path = out.join(ABORT_FILE);
    match write_json(&path, &dump) {
        Ok(()) => log::error!("run aborted; details in {}", path.display()),
        Err(e) => log::error!("could not write {}: {e}", path.display()),
    }
}

/// Images or a landscape, whichever the dataset names.
pub(crate) enum Source {
    Images(SearchData),
    Landscape(Landscape),
}

impl Source {
    pub(crate) fn load(config: &RunConfig) -> genetic_nas::Result<Self> {
        Ok(match config.dataset {
            DatasetKind::Landscape => Source::Landscape(config.landscape()?),
            _ => Source::Images(config.load_data()?),
        })
    }

    pub(crate) fn evaluator(&self) -> Evaluator<'_> {
        match self {
            Source::Images(d) => Evaluator::Supernet(d),
            Source::Landscape(l) => Evaluator::Synthetic(l),
        }
    }
}

pub fn search(config: &RunConfig, resume: bool) -> anyhow::Result<()> {
    let search_config = config.search_config()?;
    let out = &config.out;
    let _lock = RunLock::acquire(out)?;
    let config_path = out.join(SEARCH_CONFIG_FILE);
    let state_path = out.join(STATE_FILE);
    let history_path = out.join(HISTORY_FILE);

    let resumed = if resume {
        if !state_path.exists() {
            return Err(config_error(format!(
                "--resume given but {} has no checkpoint",
                out.display()
            )));
        }
        let text = fs::read_to_string(&config_path)
            .with_context(|| format!("reading {}", config_path.display()))?;
        let previous = parse_run_config(&text)?;
        if previous != *config {
            return Err(config_error(format!(
                "the configuration differs from the one recorded in {}",
                config_path.display()
            )));
        }
        let state = load_state(&state_path)?;
        log::info!("resuming after epoch {}", state.epoch);
        Some(state)
    } else {
        if state_path.exists() || history_path.exists() {
            return Err(config_error(format!(
                "{} already holds a search; pass --resume or choose another --out",
                out.display()
            )));
        }
        None
    };
    write_atomic(&config_path, config.to_toml()?.as_bytes())?;
    let source = Source::load(config)?;

    let prior_rows = resumed
        .as_ref()
        .map(|s| s.history.rows.clone())
        .unwrap_or_default();
    let sink = HistorySink::create(&history_path, &prior_rows)?;
    let mut completed = resumed.as_ref().map_or(0, |s| s.epoch);
    let every = config.checkpoint_every;
    let total = search_config.epochs;
    let result = run_search(
        &search_config,
        source.evaluator(),
        resumed,
        &mut |state, row| {
            completed = state.epoch;
            if let Err(e) = sink.append(row) {
                log::warn!("history row {} kept in memory only: {e}", row.epoch);
            }
            if every > 0 && (state.epoch % every == 0 || state.epoch == total) {
                save_state(&state_path, state)?;
                write_atomic(
                    &out.join(POPULATION_FILE),
                    state.population.to_json()?.as_bytes(),
                )?;
            }
            Ok(())
        },
    );
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if !e.is_config() {
                write_abort(out, "search", completed, &e);
            }
            return Err(e.into());
        }
    };

    let state = &outcome.state;
    write_atomic(&history_path, history_csv(&state.history.rows).as_bytes())?;
    write_atomic(
        &out.join(POPULATION_FILE),
        state.population.to_json()?.as_bytes(),
    )?;
    write_json(
        &out.join(BEST_FILE),
        &BestIndividual::new(search_config.spec, &outcome.best),
    )?;
    export_dot_files(&search_config.spec, &outcome.best, out)?;
    if let Some(w) = &state.weights {
        save_weights(&out.join(WEIGHTS_FILE), w)?;
    }
    if every > 0 {
        save_state(&state_path, state)?;
    }
    println!(
        "search finished: {} epochs, best fitness {:.6}, initial mean {:.6}; results in {}",
        state.epoch,
        outcome.best.fitness_or_zero(),
        state.history.initial.mean,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FinalResult {
    schema: &'static str,
    spec: SearchSpaceSpec,
    input: CellGenome,
    normal: CellGenome,
    reduction: CellGenome,
    epochs: usize,
    accuracy: f64,
}

fn load_individual(path: &Path, spec: &SearchSpaceSpec) -> anyhow::Result<BestIndividual> {
    if !path.exists() {
        return Err(config_error(format!(
            "individual file {} does not exist",
            path.display()
        )));
    }
    let best = BestIndividual::load(path).with_context(|| format!("reading {}", path.display()))?;
    if best.spec != *spec {
        return Err(config_error(format!(
            "{} was searched with {} blocks and {} ops, the config has {} and {}",
            path.display(),
            best.spec.n_blocks,
            best.spec.n_ops,
            spec.n_blocks,
            spec.n_ops
        )));
    }
    Ok(best)
}

pub fn final_train(config: &RunConfig) -> anyhow::Result<()> {
    if config.dataset == DatasetKind::Landscape {
        return Err(config_error(
            "final-train needs an image dataset, not the landscape",
        ));
    }
    let spec = config.spec()?;
    let best = load_individual(&config.genome_path(), &spec)?;
    let out = &config.out;
    let _lock = RunLock::acquire(out)?;
    write_atomic(&out.join(FINAL_CONFIG_FILE), config.to_toml()?.as_bytes())?;
    let data = config.load_data()?;
    let final_config = config.final_config();
    let ind = best.individual();
    let mut losses = Vec::new();
    let result = train_final(&ind, &spec, &final_config, &data, &mut |epoch, loss| {
        log::info!(
            "final epoch {epoch}/{}: loss {loss:.4}",
            final_config.epochs
        );
        losses.push(loss);
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if !e.is_config() {
                write_abort(out, "final-train", losses.len(), &e);
            }
            return Err(e.into());
        }
    };
    let mut csv = String::from("epoch,lr,train_loss\n");
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        let lr = lr_at_epoch(i, final_config.epochs, final_config.base_lr);
        csv.push_str(&format!("{},{lr:.6},{loss:.6}\n", i + 1));
    }
    write_atomic(&out.join(FINAL_HISTORY_FILE), csv.as_bytes())?;
    save_weights(&out.join(FINAL_WEIGHTS_FILE), &outcome.weights)?;
    write_json(
        &out.join(FINAL_RESULT_FILE),
        &FinalResult {
            schema: "gnas.final.v1",
            spec,
            input: best.input,
            normal: best.normal,
            reduction: best.reduction,
            epochs: final_config.epochs,
            accuracy: outcome.accuracy,
        },
    )?;
    println!(
        "final training finished: validation accuracy {:.6}; results in {}",
        outcome.accuracy,
        out.display()
    );
    Ok(())
}

pub fn enumerate(config: &RunConfig) -> anyhow::Result<()> {
    let spec = config.spec()?;
    let exact = spec
        .search_space_size()
        .map_or_else(|| "overflow".to_string(), |n| n.to_string());
    let formula = spec
        .factorial_formula_size()
        .map_or_else(|| "overflow".to_string(), |n| n.to_string());
    println!("blocks: {}  operations: {}", spec.n_blocks, spec.n_ops);
    println!("exact (prod (b+1)^2 * ops^2): {exact}");
    println!("factorial formula (ops^blocks * (blocks!)^2): {formula}");
    println!("commonly quoted: {CLAIMED_SIZE}");
    Ok(())
}

pub fn export_dot(config: &RunConfig, genome: Option<PathBuf>) -> anyhow::Result<()> {
    let spec = config.spec()?;
    let path = genome.unwrap_or_else(|| config.out.join(BEST_FILE));
    let best = load_individual(&path, &spec)?;
    let files = export_dot_files(&spec, &best.individual(), &config.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
