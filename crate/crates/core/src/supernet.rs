//! The weight-sharing supernet.
//!
//! Every cell position owns one weight bank per `(block, input slot, input
//! index, op)`; a genome picks which banks a forward pass reads. Blocks sum
//! their two op outputs, the loose ends are concatenated and projected back
//! to the cell width by a 1×1 convolution, and the cell adds its input `h_n`
//! as a residual.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ga::{CellType, Individual};
use crate::genome::{decode, DecodedBlock, DecodedCell, SearchSpaceSpec};
use crate::optim::Sgd;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Candidate operations, in gene order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    Identity,
    MaxPool3,
    AvgPool3,
    SepConv3,
    SepConv5,
}

pub const OPERATIONS: [Operation; 5] = [
    Operation::Identity,
    Operation::MaxPool3,
    Operation::AvgPool3,
    Operation::SepConv3,
    Operation::SepConv5,
];

impl Operation {
    pub fn from_index(j: usize) -> Option<Operation> {
        OPERATIONS.get(j).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Operation::Identity => "identity",
            Operation::MaxPool3 => "max_pool_3x3",
            Operation::AvgPool3 => "avg_pool_3x3",
            Operation::SepConv3 => "sep_conv_3x3",
            Operation::SepConv5 => "sep_conv_5x5",
        }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            Operation::SepConv3 => Some(3),
            Operation::SepConv5 => Some(5),
            _ => None,
        }
    }
}

pub fn op_names() -> Vec<&'static str> {
    OPERATIONS.iter().map(|o| o.name()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Cells per set; the first set has one fewer normal cell.
    pub n_cells: usize,
    /// Channels of the first set; doubled at each reduction.
    pub channels: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub dropout: f64,
    /// Drop-path probability, only used when a training step asks for it.
    pub drop_path: f64,
}

impl NetworkConfig {
    pub fn check(&self, spec: &SearchSpaceSpec) -> Result<()> {
        for (name, v) in [
            ("n_cells", self.n_cells),
            ("channels", self.channels),
            ("n_classes", self.n_classes),
            ("image_size", self.image_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, p) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if spec.n_ops > OPERATIONS.len() {
            return Err(Error::Config(format!(
                "the supernet provides {} operations, n_ops is {}",
                OPERATIONS.len(),
                spec.n_ops
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// ReLU → depthwise → BN → ReLU → pointwise → BN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SepUnit {
    pub depthwise: ParamId,
    pub bn_depthwise: BnParams,
    pub pointwise: ParamId,
    pub bn_pointwise: BnParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpParams {
    None,
    SepConv([SepUnit; 2]),
}

impl OpParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            OpParams::None => vec![],
            OpParams::SepConv(units) => units
                .iter()
                .flat_map(|u| {
                    [
                        u.depthwise,
                        u.bn_depthwise.gamma,
                        u.bn_depthwise.beta,
                        u.pointwise,
                        u.bn_pointwise.gamma,
                        u.bn_pointwise.beta,
                    ]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub cell_type: CellType,
    pub channels: usize,
    /// Indexed `[block][slot][input][op]`.
    pub banks: Vec<[Vec<Vec<OpParams>>; 2]>,
    /// Per-block slice of the concat projection, each `[c, c, 1, 1]`.
    pub projection: Vec<ParamId>,
    pub projection_bn: BnParams,
    /// Whether the cell also receives the previous cell's input.
    pub has_prev: bool,
}

impl CellParams {
    pub fn bank(&self, block: usize, slot: usize, input: usize, op: usize) -> &OpParams {
        &self.banks[block][slot][input][op]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Cell(usize),
    Reduction(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetWeights {
    pub spec: SearchSpaceSpec,
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub stem: ParamId,
    pub cells: Vec<CellParams>,
    pub reductions: Vec<ParamId>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    pub layers: Vec<Layer>,
}

struct Init<'r> {
    store: ParamStore,
    rng: &'r mut Rng,
}

impl Init<'_> {
    /// He-normal convolution kernel.
    fn conv(&mut self, name: String, shape: [usize; 4]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.store
            .add(name, Tensor::from_vec(&shape, data).unwrap())
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnParams {
        BnParams {
            gamma: self
                .store
                .add(format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0)),
            beta: self
                .store
                .add(format!("{prefix}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn op(&mut self, prefix: &str, op: Operation, c: usize) -> OpParams {
        let Some(k) = op.kernel() else {
            return OpParams::None;
        };
        let mut unit = |u: usize| SepUnit {
            depthwise: self.conv(format!("{prefix}.u{u}.dw"), [c, 1, k, k]),
            bn_depthwise: self.bn(&format!("{prefix}.u{u}.dw_bn"), c),
            pointwise: self.conv(format!("{prefix}.u{u}.pw"), [c, c, 1, 1]),
            bn_pointwise: self.bn(&format!("{prefix}.u{u}.pw_bn"), c),
        };
        OpParams::SepConv([unit(0), unit(1)])
    }

    fn cell(
        &mut self,
        index: usize,
        spec: &SearchSpaceSpec,
        cell_type: CellType,
        c: usize,
        has_prev: bool,
    ) -> CellParams {
        let banks = (0..spec.n_blocks)
            .map(|b| {
                let slot = |s: usize, this: &mut Self| {
                    (0..spec.n_inputs(b))
                        .map(|i| {
                            (0..spec.n_ops)
                                .map(|j| {
                                    let prefix =
                                        format!("cell{index}.b{b}.{}.in{i}.op{j}", ["A", "B"][s]);
                                    this.op(&prefix, OPERATIONS[j], c)
                                })
                                .collect()
                        })
                        .collect()
                };
                let a = slot(0, self);
                [a, slot(1, self)]
            })
            .collect();
        let projection = (0..spec.n_blocks)
            .map(|b| self.conv(format!("cell{index}.proj.b{b}"), [c, c, 1, 1]))
            .collect();
        let projection_bn = self.bn(&format!("cell{index}.proj_bn"), c);
        CellParams {
            cell_type,
            channels: c,
            banks,
            projection,
            projection_bn,
            has_prev,
        }
    }
}

impl SupernetWeights {
    /// Builds the layer plan and draws fresh weights: He-normal convolutions,
    /// unit BN scale, zero BN shift, zero classifier.
    pub fn init(spec: SearchSpaceSpec, config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        spec.check()?;
        config.check(&spec)?;
        let mut init = Init {
            store: ParamStore::new(),
            rng,
        };
        let c0 = config.channels;
        let stem = init.conv("stem.w".into(), [c0, 3, 3, 3]);
        let mut cells = Vec::new();
        let mut reductions = Vec::new();
        let mut layers = Vec::new();
        let mut c = c0;
        let push_cell =
            |init: &mut Init, cells: &mut Vec<CellParams>, layers: &mut Vec<Layer>, t, c, prev| {
                let idx = cells.len();
                cells.push(init.cell(idx, &spec, t, c, prev));
                layers.push(Layer::Cell(idx));
            };
        push_cell(
            &mut init,
            &mut cells,
            &mut layers,
            CellType::Input,
            c,
            false,
        );
        for set in 0..3 {
            if set > 0 {
                let idx = reductions.len();
                reductions.push(init.conv(format!("reduce{idx}.w"), [2 * c, c, 1, 1]));
                layers.push(Layer::Reduction(idx));
                c *= 2;
                push_cell(
                    &mut init,
                    &mut cells,
                    &mut layers,
                    CellType::Reduction,
                    c,
                    false,
                );
            }
            let normals = if set == 0 {
                config.n_cells - 1
            } else {
                config.n_cells
            };
            for _ in 0..normals {
                push_cell(
                    &mut init,
                    &mut cells,
                    &mut layers,
                    CellType::Normal,
                    c,
                    true,
                );
            }
        }
        let classifier_w = init
            .store
            .add("classifier.w".into(), Tensor::zeros(&[config.n_classes, c]));
        let classifier_b = init
            .store
            .add("classifier.b".into(), Tensor::zeros(&[config.n_classes]));
        Ok(SupernetWeights {
            spec,
            config,
            store: init.store,
            stem,
            cells,
            reductions,
            classifier_w,
            classifier_b,
            layers,
        })
    }

    /// Parameters a forward pass of `ind` reads.
    pub fn reachable_params(&self, ind: &Individual) -> Result<Vec<ParamId>> {
        let decoded = self.decode_all(ind)?;
        let mut ids = vec![self.stem, self.classifier_w, self.classifier_b];
        ids.extend(&self.reductions);
        for cell in &self.cells {
            let d = &decoded[cell.cell_type.index()];
            for (b, block) in d.blocks.iter().enumerate() {
                for s in 0..2 {
                    ids.extend(cell.bank(b, s, block.input_genes[s], block.ops[s]).ids());
                }
            }
            ids.extend(d.loose_ends.iter().map(|&b| cell.projection[b]));
            ids.extend([cell.projection_bn.gamma, cell.projection_bn.beta]);
        }
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    fn decode_all(&self, ind: &Individual) -> Result<[DecodedCell; 3]> {
        Ok([
            decode(&self.spec, ind.genome(CellType::Input))?,
            decode(&self.spec, ind.genome(CellType::Normal))?,
            decode(&self.spec, ind.genome(CellType::Reduction))?,
        ])
    }
}

/// How a forward pass treats stochastic layers.
pub enum Mode<'a> {
    /// No dropout, no drop-path.
    Eval,
    Train {
        rng: &'a mut Rng,
        drop_path: bool,
    },
}

/// Per-sample keep mask, scaled so the expectation is unchanged.
fn sample_mask(rng: &mut Rng, shape: &[usize], per_sample: bool, drop: f64) -> Vec<f64> {
    let keep = if drop < 1.0 { 1.0 / (1.0 - drop) } else { 0.0 };
    let n: usize = shape.iter().product();
    if per_sample {
        let block = n / shape[0];
        (0..shape[0])
            .flat_map(|_| {
                let v = if rng.random_bool(drop) { 0.0 } else { keep };
                std::iter::repeat_n(v, block)
            })
            .collect()
    } else {
        (0..n)
            .map(|_| if rng.random_bool(drop) { 0.0 } else { keep })
            .collect()
    }
}

fn check_finite(tape: &Tape, v: Var, layer: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer(),
            genome: None,
        })
    }
}

fn bn(tape: &mut Tape, x: Var, p: BnParams) -> Result<Var> {
    let (g, b) = (tape.param(p.gamma), tape.param(p.beta));
    tape.batch_norm(x, g, b)
}

pub(crate) fn op_on_tape(tape: &mut Tape, op: Operation, params: &OpParams, x: Var) -> Result<Var> {
    let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
    match (op, params) {
        (Operation::Identity, OpParams::None) => Ok(x),
        (Operation::MaxPool3, OpParams::None) => {
            let r = tape.relu(x);
            Ok(tape.max_pool3(r))
        }
        (Operation::AvgPool3, OpParams::None) => {
            let r = tape.relu(x);
            Ok(tape.avg_pool3(r))
        }
        (Operation::SepConv3 | Operation::SepConv5, OpParams::SepConv(units)) => {
            let k = op.kernel().unwrap();
            let mut h = x;
            for u in units {
                let w = tape.param(u.depthwise);
                if tape.value(w).shape() != [c, 1, k, k] {
                    return Err(Error::Shape(format!(
                        "{} kernel {:?} for {c} channels",
                        op.name(),
                        tape.value(w).shape()
                    )));
                }
                h = tape.relu(h);
                h = tape.conv2d(h, w, k / 2, c)?;
                h = bn(tape, h, u.bn_depthwise)?;
                h = tape.relu(h);
                let pw = tape.param(u.pointwise);
                h = tape.conv2d(h, pw, 0, 1)?;
                h = bn(tape, h, u.bn_pointwise)?;
            }
            Ok(h)
        }
        _ => Err(Error::Shape(format!(
            "parameters do not match {}",
            op.name()
        ))),
    }
}

fn block_on_tape(
    tape: &mut Tape,
    cell: &CellParams,
    b: usize,
    block: &DecodedBlock,
    available: &[Var],
    mode: &mut Mode,
    drop_path: f64,
) -> Result<Var> {
    let mut outs = [available[0]; 2];
    for s in 0..2 {
        let src = *available.get(block.inputs[s].slot_index()).ok_or_else(|| {
            Error::Shape(format!(
                "block {b} reads an input that is not available yet"
            ))
        })?;
        let op = Operation::from_index(block.ops[s])
            .ok_or_else(|| Error::Shape(format!("op index {} has no operation", block.ops[s])))?;
        let mut y = op_on_tape(
            tape,
            op,
            cell.bank(b, s, block.input_genes[s], block.ops[s]),
            src,
        )?;
        if let Mode::Train {
            rng,
            drop_path: true,
        } = mode
        {
            if drop_path > 0.0 {
                let mask = sample_mask(rng, tape.value(y).shape(), true, drop_path);
                y = tape.mask(y, mask)?;
            }
        }
        outs[s] = y;
    }
    tape.add(outs[0], outs[1])
}

fn cell_on_tape(
    tape: &mut Tape,
    cell: &CellParams,
    decoded: &DecodedCell,
    h_n: Var,
    h_prev: Option<Var>,
    mode: &mut Mode,
    drop_path: f64,
) -> Result<Var> {
    let dag_input = match h_prev {
        Some(p) => tape.add(h_n, p)?,
        None => h_n,
    };
    let mut available = vec![dag_input];
    for (b, block) in decoded.blocks.iter().enumerate() {
        let h = block_on_tape(tape, cell, b, block, &available, mode, drop_path)?;
        available.push(h);
    }
    let loose: Vec<Var> = decoded
        .loose_ends
        .iter()
        .map(|&b| available[b + 1])
        .collect();
    let slices: Vec<Var> = decoded
        .loose_ends
        .iter()
        .map(|&b| tape.param(cell.projection[b]))
        .collect();
    let (features, weight) = if loose.len() == 1 {
        (loose[0], slices[0])
    } else {
        (tape.concat(&loose)?, tape.concat(&slices)?)
    };
    let p = tape.conv2d(features, weight, 0, 1)?;
    let p = bn(tape, p, cell.projection_bn)?;
    let p = tape.relu(p);
    tape.add(p, h_n)
}

/// Output of a network pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub loss: f64,
}

struct Recorded<'s> {
    tape: Tape<'s>,
    logits: Var,
    loss: Var,
}

fn network_on_tape<'s>(
    weights: &'s SupernetWeights,
    ind: &Individual,
    batch: &Batch,
    mode: &mut Mode,
) -> Result<Recorded<'s>> {
    let cfg = &weights.config;
    let (_, c, h, w) = batch.images.dims4();
    if c != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "batch of {:?} for {}×{} RGB images",
            batch.images.shape(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let decoded = weights.decode_all(ind)?;
    let drop_path = cfg.drop_path;
    let mut tape = Tape::new(&weights.store);
    let x = tape.input(batch.images.clone());
    let stem = tape.param(weights.stem);
    let mut cur = tape.conv2d(x, stem, 1, 1)?;
    check_finite(&tape, cur, || "stem".into())?;
    let mut prev: Option<Var> = None;
    for layer in &weights.layers {
        match *layer {
            Layer::Cell(i) => {
                let cell = &weights.cells[i];
                let h_prev = if cell.has_prev { prev } else { None };
                let out = cell_on_tape(
                    &mut tape,
                    cell,
                    &decoded[cell.cell_type.index()],
                    cur,
                    h_prev,
                    mode,
                    drop_path,
                )?;
                check_finite(&tape, out, || format!("cell {i} ({})", cell.cell_type))?;
                prev = Some(cur);
                cur = out;
            }
            Layer::Reduction(i) => {
                let pooled = tape.avg_pool2(cur);
                let w = tape.param(weights.reductions[i]);
                cur = tape.conv2d(pooled, w, 0, 1)?;
                check_finite(&tape, cur, || format!("reduction {i}"))?;
                prev = None;
            }
        }
    }
    let mut feat = tape.global_avg_pool(cur);
    if let Mode::Train { rng, .. } = mode {
        if cfg.dropout > 0.0 {
            let mask = sample_mask(rng, tape.value(feat).shape(), false, cfg.dropout);
            feat = tape.mask(feat, mask)?;
        }
    }
    let (cw, cb) = (
        tape.param(weights.classifier_w),
        tape.param(weights.classifier_b),
    );
    let logits = tape.linear(feat, cw, cb)?;
    check_finite(&tape, logits, || "classifier".into())?;
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    Ok(Recorded { tape, logits, loss })
}

/// Logits and mean cross-entropy of `ind` on `batch`.
pub fn network_forward(
    weights: &SupernetWeights,
    ind: &Individual,
    batch: &Batch,
    mut mode: Mode,
) -> Result<ForwardOutput> {
    let rec = network_on_tape(weights, ind, batch, &mut mode)?;
    Ok(ForwardOutput {
        logits: rec.tape.value(rec.logits).clone(),
        loss: rec.tape.value(rec.loss).data()[0],
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    /// Parameters that received a gradient and an update.
    pub updated: Vec<ParamId>,
}

/// One SGD step on the parameters reachable from `ind`; all others, and
/// their momentum buffers, are left untouched.
pub fn backward_and_step(
    weights: &mut SupernetWeights,
    optimizer: &mut Sgd,
    ind: &Individual,
    batch: &Batch,
    lr: f64,
    rng: &mut Rng,
    drop_path: bool,
) -> Result<StepOutcome> {
    let (loss, grads) = {
        let mut mode = Mode::Train { rng, drop_path };
        let rec = network_on_tape(weights, ind, batch, &mut mode)?;
        let grads = rec.tape.backward(rec.loss);
        (rec.tape.value(rec.loss).data()[0], grads)
    };
    let grad_norm = grads.norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            layer: "gradients".into(),
            genome: None,
        });
    }
    optimizer.step(&mut weights.store, &grads, lr);
    Ok(StepOutcome {
        loss,
        grad_norm,
        updated: grads.by_param.keys().copied().collect(),
    })
}

/// Gradients of the training loss of `ind` on `batch`, without an update.
/// `mask_seed` fixes the dropout and drop-path draws.
pub fn loss_and_gradients(
    weights: &SupernetWeights,
    ind: &Individual,
    batch: &Batch,
    mask_rng: &mut Rng,
    drop_path: bool,
) -> Result<(f64, crate::tape::Gradients)> {
    let mut mode = Mode::Train {
        rng: mask_rng,
        drop_path,
    };
    let rec = network_on_tape(weights, ind, batch, &mut mode)?;
    let grads = rec.tape.backward(rec.loss);
    Ok((rec.tape.value(rec.loss).data()[0], grads))
}

/// Applies one operation to `x` with the given bank, outside any network.
pub fn op_forward(
    store: &ParamStore,
    op: Operation,
    params: &OpParams,
    x: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let v = tape.input(x.clone());
    let y = op_on_tape(&mut tape, op, params, v)?;
    Ok(tape.value(y).clone())
}

/// Output of block `b` of cell `cell_index`: the sum of its two ops applied
/// to `available[input]`, where `available` is `[dag_input, block0, ...]`.
pub fn block_forward(
    weights: &SupernetWeights,
    cell_index: usize,
    decoded: &DecodedCell,
    b: usize,
    available: &[Tensor],
) -> Result<Tensor> {
    let cell = weights
        .cells
        .get(cell_index)
        .ok_or_else(|| Error::Shape(format!("no cell {cell_index}")))?;
    let block = decoded
        .blocks
        .get(b)
        .ok_or_else(|| Error::Shape(format!("no block {b}")))?;
    let mut tape = Tape::new(&weights.store);
    let vars: Vec<Var> = available.iter().map(|t| tape.input(t.clone())).collect();
    let out = block_on_tape(&mut tape, cell, b, block, &vars, &mut Mode::Eval, 0.0)?;
    Ok(tape.value(out).clone())
}

/// Runs cell `cell_index` on `h_n` (and `h_prev` when the cell takes it).
pub fn cell_forward(
    weights: &SupernetWeights,
    cell_index: usize,
    ind: &Individual,
    h_n: &Tensor,
    h_prev: Option<&Tensor>,
    mut mode: Mode,
) -> Result<Tensor> {
    let cell = weights
        .cells
        .get(cell_index)
        .ok_or_else(|| Error::Shape(format!("no cell {cell_index}")))?;
    if let Some(p) = h_prev {
        if p.shape() != h_n.shape() {
            return Err(Error::Shape(format!(
                "h_n {:?} vs h_prev {:?}",
                h_n.shape(),
                p.shape()
            )));
        }
    }
    if h_n.shape().len() != 4 || h_n.shape()[1] != cell.channels {
        return Err(Error::Shape(format!(
            "cell {cell_index} has {} channels, input is {:?}",
            cell.channels,
            h_n.shape()
        )));
    }
    let decoded = decode(&weights.spec, ind.genome(cell.cell_type))?;
    let mut tape = Tape::new(&weights.store);
    let hn = tape.input(h_n.clone());
    let hp = h_prev.map(|t| tape.input(t.clone()));
    let drop = weights.config.drop_path;
    let out = cell_on_tape(&mut tape, cell, &decoded, hn, hp, &mut mode, drop)?;
    Ok(tape.value(out).clone())
}

/// Reduction stage `i`: 2×2 average pool (stride 2, ceil mode) then the
/// channel-doubling 1×1 convolution.
pub fn reduction_forward(weights: &SupernetWeights, i: usize, x: &Tensor) -> Result<Tensor> {
    let id = *weights
        .reductions
        .get(i)
        .ok_or_else(|| Error::Shape(format!("no reduction stage {i}")))?;
    let mut tape = Tape::new(&weights.store);
    let v = tape.input(x.clone());
    let pooled = tape.avg_pool2(v);
    let w = tape.param(id);
    let out = tape.conv2d(pooled, w, 0, 1)?;
    Ok(tape.value(out).clone())
}

/// Top-1 accuracy; ties resolve to the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
