//! Run configuration: one flat TOML document, every key optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_records, make_synthetic_dataset, CifarFormat, LabeledImageSet, Split, CIFAR_SIDE,
};
use crate::error::{Error, Result};
use crate::ga::{CellType, CrossoverKind, GaConfig};
use crate::genome::SearchSpaceSpec;
use crate::landscape::{BlockShape, Landscape, LandscapeConfig};
use crate::optim::SgdConfig;
use crate::rng::stream;
use crate::search::{AugmentSettings, FinalTrainConfig, SearchConfig, SearchData};
use crate::supernet::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Search,
    FinalTrain,
    #[serde(alias = "ablation-sweep")]
    Ablate,
    #[serde(alias = "enumerate-space")]
    Enumerate,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Search => "search",
            RunMode::FinalTrain => "final-train",
            RunMode::Ablate => "ablate",
            RunMode::Enumerate => "enumerate",
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "search" => Ok(RunMode::Search),
            "final-train" => Ok(RunMode::FinalTrain),
            "ablate" | "ablation-sweep" => Ok(RunMode::Ablate),
            "enumerate" | "enumerate-space" => Ok(RunMode::Enumerate),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Generated class-pattern images.
    Synthetic,
    Cifar10,
    Cifar100,
    /// No images: fitness comes from a synthetic landscape.
    Landscape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandscapeShape {
    Bowl,
    Trap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub out: PathBuf,

    pub dataset: DatasetKind,
    /// Directory with the CIFAR `.bin` batches.
    pub data_dir: PathBuf,
    pub data_seed: u64,
    pub synthetic_classes: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_valid_per_class: usize,
    pub synthetic_noise: f64,
    pub image_size: usize,

    pub n_blocks: usize,
    pub n_ops: usize,
    pub population_size: usize,
    pub generation_size: usize,
    pub mutation_prob: f64,
    pub crossover: CrossoverKind,

    pub epochs: usize,
    pub eval_subset: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Maximum global gradient norm per step; 0 disables clipping.
    pub grad_clip: f64,
    pub n_cells: usize,
    pub channels: usize,
    pub dropout: f64,
    pub drop_path: f64,
    pub pad: usize,
    pub flip_prob: f64,
    /// Defaults to half the image side.
    pub cutout: Option<usize>,
    /// Epochs between state checkpoints; 0 disables them.
    pub checkpoint_every: usize,

    pub final_epochs: usize,
    pub final_n_cells: usize,
    pub final_channels: usize,
    /// Individual to retrain; defaults to `<out>/best.json`.
    pub genome: Option<PathBuf>,

    pub landscape_seed: u64,
    pub landscape_shape: LandscapeShape,
    pub landscape_roughness: f64,
    pub landscape_gap: f64,
    pub landscape_cells: Vec<CellType>,

    pub ablate_mutation_probs: Vec<f64>,
    pub ablate_population_sizes: Vec<usize>,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::Search,
            seed: 0,
            out: PathBuf::from("runs/gnas"),
            dataset: DatasetKind::Synthetic,
            data_dir: PathBuf::from("data"),
            data_seed: 0,
            synthetic_classes: 10,
            synthetic_train_per_class: 100,
            synthetic_valid_per_class: 100,
            synthetic_noise: 0.1,
            image_size: CIFAR_SIDE,
            n_blocks: 5,
            n_ops: 5,
            population_size: 20,
            generation_size: 20,
            mutation_prob: 0.02,
            crossover: CrossoverKind::Block,
            epochs: 310,
            eval_subset: 1000,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            n_cells: 2,
            channels: 20,
            dropout: 0.2,
            drop_path: 0.1,
            pad: 4,
            flip_prob: 0.5,
            cutout: None,
            checkpoint_every: 1,
            final_epochs: 630,
            final_n_cells: 4,
            final_channels: 48,
            genome: None,
            landscape_seed: 0,
            landscape_shape: LandscapeShape::Bowl,
            landscape_roughness: 0.5,
            landscape_gap: 0.2,
            landscape_cells: CellType::ALL.to_vec(),
            ablate_mutation_probs: vec![0.0, 0.02, 0.1, 0.5],
            ablate_population_sizes: vec![5, 10, 20, 40],
            ablate_seeds: 10,
        }
    }
}

/// Parses and validates a configuration document.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl RunConfig {
    /// Every invariant violation, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        };
        positive("n_blocks", self.n_blocks);
        positive("n_ops", self.n_ops);
        positive("generation_size", self.generation_size);
        positive("epochs", self.epochs);
        positive("eval_subset", self.eval_subset);
        positive("batch_size", self.batch_size);
        positive("n_cells", self.n_cells);
        positive("channels", self.channels);
        positive("image_size", self.image_size);
        positive("final_epochs", self.final_epochs);
        positive("final_n_cells", self.final_n_cells);
        positive("final_channels", self.final_channels);
        positive("synthetic_classes", self.synthetic_classes);
        positive("synthetic_train_per_class", self.synthetic_train_per_class);
        positive("synthetic_valid_per_class", self.synthetic_valid_per_class);
        positive("ablate_seeds", self.ablate_seeds);
        if self.population_size < 2 {
            errs.push("population_size must be at least 2".into());
        }
        for (name, p) in [
            ("mutation_prob", self.mutation_prob),
            ("dropout", self.dropout),
            ("drop_path", self.drop_path),
            ("flip_prob", self.flip_prob),
            ("landscape_roughness", self.landscape_roughness),
            ("landscape_gap", self.landscape_gap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} = {v} must be a non-negative number"));
            }
        }
        if self.n_ops > crate::supernet::OPERATIONS.len() && self.dataset != DatasetKind::Landscape
        {
            errs.push(format!(
                "n_ops = {} exceeds the 5 supernet operations",
                self.n_ops
            ));
        }
        if self.cutout() > self.image_size {
            errs.push(format!(
                "cutout {} exceeds image_size {}",
                self.cutout(),
                self.image_size
            ));
        }
        if matches!(self.dataset, DatasetKind::Cifar10 | DatasetKind::Cifar100)
            && self.image_size != CIFAR_SIDE
        {
            errs.push(format!(
                "CIFAR images are {CIFAR_SIDE} pixels, image_size is {}",
                self.image_size
            ));
        }
        if self.landscape_cells.is_empty() {
            errs.push("landscape_cells must name at least one cell type".into());
        }
        if self
            .ablate_mutation_probs
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            errs.push("ablate_mutation_probs must lie in [0, 1]".into());
        }
        if self.ablate_population_sizes.iter().any(|&n| n < 2) {
            errs.push("ablate_population_sizes must be at least 2".into());
        }
        if self.dataset == DatasetKind::Synthetic
            && self.eval_subset > self.synthetic_classes * self.synthetic_valid_per_class
        {
            errs.push(format!(
                "eval_subset {} exceeds the {} synthetic validation images",
                self.eval_subset,
                self.synthetic_classes * self.synthetic_valid_per_class
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn cutout(&self) -> usize {
        self.cutout.unwrap_or(self.image_size / 2)
    }

    pub fn spec(&self) -> Result<SearchSpaceSpec> {
        SearchSpaceSpec::new(self.n_blocks, self.n_ops)
    }

    pub fn n_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Synthetic | DatasetKind::Landscape => self.synthetic_classes,
        }
    }

    pub fn ga(&self) -> GaConfig {
        GaConfig {
            population_size: self.population_size,
            generation_size: self.generation_size,
            mutation_prob: self.mutation_prob,
            crossover: self.crossover,
        }
    }

    fn network(&self, n_cells: usize, channels: usize) -> NetworkConfig {
        NetworkConfig {
            n_cells,
            channels,
            n_classes: self.n_classes(),
            image_size: self.image_size,
            dropout: self.dropout,
            drop_path: self.drop_path,
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    fn augment(&self) -> AugmentSettings {
        AugmentSettings {
            pad: self.pad,
            flip_prob: self.flip_prob,
            cutout: self.cutout(),
        }
    }

    pub fn search_config(&self) -> Result<SearchConfig> {
        let config = SearchConfig {
            spec: self.spec()?,
            ga: self.ga(),
            network: self.network(self.n_cells, self.channels),
            augment: self.augment(),
            sgd: self.sgd(),
            epochs: self.epochs,
            eval_subset: self.eval_subset,
            batch_size: self.batch_size,
            base_lr: self.lr,
            seed: self.seed,
        };
        if self.dataset != DatasetKind::Landscape {
            config.check()?;
        }
        Ok(config)
    }

    pub fn final_config(&self) -> FinalTrainConfig {
        FinalTrainConfig {
            network: self.network(self.final_n_cells, self.final_channels),
            augment: self.augment(),
            sgd: self.sgd(),
            epochs: self.final_epochs,
            batch_size: self.batch_size,
            base_lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn landscape(&self) -> Result<Landscape> {
        Landscape::new(
            self.spec()?,
            &LandscapeConfig {
                seed: self.landscape_seed,
                shape: match self.landscape_shape {
                    LandscapeShape::Bowl => BlockShape::Bowl {
                        roughness: self.landscape_roughness,
                    },
                    LandscapeShape::Trap => BlockShape::Trap {
                        gap: self.landscape_gap,
                    },
                },
                cells: self.landscape_cells.clone(),
            },
        )
    }

    pub fn genome_path(&self) -> PathBuf {
        self.genome
            .clone()
            .unwrap_or_else(|| self.out.join("best.json"))
    }

    /// Training and validation images for the configured dataset.
    pub fn load_data(&self) -> Result<SearchData> {
        let (train, valid) = match self.dataset {
            DatasetKind::Landscape => {
                return Err(Error::Config("the landscape dataset has no images".into()));
            }
            DatasetKind::Synthetic => {
                let make = |split, per_class, name| {
                    make_synthetic_dataset(
                        self.synthetic_classes,
                        per_class,
                        self.image_size,
                        self.synthetic_noise,
                        split,
                        &mut stream(self.data_seed, name),
                    )
                };
                (
                    make(
                        Split::Train,
                        self.synthetic_train_per_class,
                        "dataset.train",
                    )?,
                    make(
                        Split::Validation,
                        self.synthetic_valid_per_class,
                        "dataset.valid",
                    )?,
                )
            }
            DatasetKind::Cifar10 => {
                let train: Vec<PathBuf> = (1..=5)
                    .map(|i| self.data_dir.join(format!("data_batch_{i}.bin")))
                    .collect();
                (
                    load_many(&train, CifarFormat::Cifar10, Split::Train)?,
                    load_many(
                        &[self.data_dir.join("test_batch.bin")],
                        CifarFormat::Cifar10,
                        Split::Validation,
                    )?,
                )
            }
            DatasetKind::Cifar100 => (
                load_many(
                    &[self.data_dir.join("train.bin")],
                    CifarFormat::Cifar100,
                    Split::Train,
                )?,
                load_many(
                    &[self.data_dir.join("test.bin")],
                    CifarFormat::Cifar100,
                    Split::Validation,
                )?,
            ),
        };
        SearchData::new(train, valid)
    }
}

fn load_many(paths: &[PathBuf], format: CifarFormat, split: Split) -> Result<LabeledImageSet> {
    let mut out: Option<LabeledImageSet> = None;
    for p in paths {
        if !p.exists() {
            return Err(Error::Config(format!(
                "dataset file {} does not exist",
                p.display()
            )));
        }
        let set = load_records(p, format, CIFAR_SIDE, split)?;
        match &mut out {
            None => out = Some(set),
            Some(acc) => {
                acc.pixels.extend_from_slice(&set.pixels);
                acc.labels.extend_from_slice(&set.labels);
            }
        }
    }
    out.ok_or_else(|| Error::Config("no dataset files".into()))
}
