#![allow(dead_code)]

use genetic_nas::data::{make_synthetic_dataset, Batch, Normalization, Split};
use genetic_nas::ga::Individual;
use genetic_nas::genome::{CellGenome, SearchSpaceSpec};
use genetic_nas::params::ParamId;
use genetic_nas::rng::{stream, Rng};
use genetic_nas::supernet::{
    loss_and_gradients, network_forward, Mode, NetworkConfig, SupernetWeights,
};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub fn net_config(
    n_cells: usize,
    channels: usize,
    n_classes: usize,
    image_size: usize,
) -> NetworkConfig {
    NetworkConfig {
        n_cells,
        channels,
        n_classes,
        image_size,
        dropout: 0.2,
        drop_path: 0.1,
    }
}

pub fn weights(spec: SearchSpaceSpec, config: NetworkConfig, seed: u64) -> SupernetWeights {
    SupernetWeights::init(spec, config, &mut stream(seed, "init")).unwrap()
}

/// Moves every parameter away from its structured initial value so that
/// no gradient vanishes for trivial reasons (zero classifier, unit BN).
pub fn randomize(w: &mut SupernetWeights, seed: u64) {
    let mut rng = stream(seed, "randomize");
    let noise = Normal::new(0.0, 1.0).unwrap();
    let ids: Vec<ParamId> = w.store.ids().collect();
    for id in ids {
        let name = w.store.name(id).to_string();
        let (base, scale) = if name.ends_with(".gamma") {
            (1.0, 0.2)
        } else if name.ends_with(".beta") || name.starts_with("classifier") {
            (0.0, 0.3)
        } else {
            (0.0, 0.0)
        };
        for v in w.store.get_mut(id).data_mut() {
            if scale > 0.0 {
                *v = base + scale * noise.sample(&mut rng);
            } else {
                *v *= 1.0 + 0.1 * noise.sample(&mut rng);
            }
        }
    }
}

pub fn synthetic_batch(
    n_per_class: usize,
    n_classes: usize,
    side: usize,
    noise: f64,
    seed: u64,
) -> Batch {
    let set = make_synthetic_dataset(
        n_classes,
        n_per_class,
        side,
        noise,
        Split::Train,
        &mut stream(seed, "data"),
    )
    .unwrap();
    let norm = Normalization::from_set(&set);
    let idx: Vec<usize> = (0..set.len()).collect();
    Batch::plain(&set, &idx, &norm)
}

/// Random genome whose every op gene is `op`.
pub fn genome_with_op(spec: &SearchSpaceSpec, op: usize, rng: &mut Rng) -> CellGenome {
    let mut genes = Vec::with_capacity(spec.genome_len());
    for b in 0..spec.n_blocks {
        genes.push(rng.random_range(0..=b));
        genes.push(rng.random_range(0..=b));
        genes.push(op);
        genes.push(op);
    }
    CellGenome::from_genes(genes)
}

pub fn individual_with_op(spec: &SearchSpaceSpec, op: usize, rng: &mut Rng) -> Individual {
    Individual::new([
        genome_with_op(spec, op, rng),
        genome_with_op(spec, op, rng),
        genome_with_op(spec, op, rng),
    ])
}

pub struct FdResult {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Scale below which gradients are compared absolutely: the tolerance times
/// this floor (1e-8) stays well above the ~1e-10 rounding noise of a central
/// difference at eps = 1e-5.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

impl FdResult {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
            / self
                .analytic
                .abs()
                .max(self.numeric.abs())
                .max(FD_SCALE_FLOOR)
    }
}

pub struct FdSample {
    pub results: Vec<FdResult>,
    /// Draws rejected because the loss has a kink within `eps`.
    pub kinked: usize,
}

/// Central differences on `n` random scalar weights drawn from `candidates`,
/// with dropout and drop-path masks fixed by `seed`.
///
/// ReLU and max-pool make the loss piecewise smooth, and a central
/// difference across a kink is not a derivative. Each draw is screened using
/// the loss alone: one-sided slopes over `eps` and `eps / 2` on both sides
/// must agree to `kink_tol` (relative, same floor as `rel_error`). A single
/// kink shifts the central estimate by at most half the largest of those
/// disagreements, so a draw that passes the screen cannot fail the
/// comparison at tolerance `2 * kink_tol` because of a kink. Screened-out
/// draws are replaced until `n` remain.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    w: &mut SupernetWeights,
    ind: &Individual,
    batch: &Batch,
    candidates: &[ParamId],
    n: usize,
    eps: f64,
    kink_tol: f64,
    seed: u64,
) -> FdSample {
    let masks = stream(seed, "masks");
    let (_, grads) = loss_and_gradients(w, ind, batch, &mut masks.clone(), true).unwrap();
    let loss_at = |w: &SupernetWeights| {
        let mut r = masks.clone();
        network_forward(
            w,
            ind,
            batch,
            Mode::Train {
                rng: &mut r,
                drop_path: true,
            },
        )
        .unwrap()
        .loss
    };
    let mut pick = stream(seed, "pick");
    let mut results = Vec::with_capacity(n);
    let mut kinked = 0;
    while results.len() < n {
        assert!(kinked <= 20 * n, "too many draws straddle a kink");
        let id = candidates[pick.random_range(0..candidates.len())];
        let k = pick.random_range(0..w.store.get(id).len());
        let orig = w.store.get(id).data()[k];
        let mut at = |delta: f64| {
            w.store.get_mut(id).data_mut()[k] = orig + delta;
            loss_at(w)
        };
        let (m2, m1, f0, p1, p2) = (at(-eps), at(-eps / 2.0), at(0.0), at(eps / 2.0), at(eps));
        w.store.get_mut(id).data_mut()[k] = orig;
        let numeric = (p2 - m2) / (2.0 * eps);
        let right = (p2 - f0) / eps;
        let left = (f0 - m2) / eps;
        let right_half = (p1 - f0) / (eps / 2.0);
        let left_half = (f0 - m1) / (eps / 2.0);
        let spread = (right - left)
            .abs()
            .max((right - right_half).abs())
            .max((left - left_half).abs());
        if spread > kink_tol * numeric.abs().max(FD_SCALE_FLOOR) {
            kinked += 1;
            continue;
        }
        results.push(FdResult {
            name: format!("{}[{k}]", w.store.name(id)),
            analytic: grads.by_param.get(&id).map_or(0.0, |g| g.data()[k]),
            numeric,
        });
    }
    FdSample { results, kinked }
}

/// Reachable parameters of `ind` that belong to op `op`, or every reachable
/// parameter when that op has no weights.
pub fn op_candidates(w: &SupernetWeights, ind: &Individual, op: usize) -> Vec<ParamId> {
    let reach = w.reachable_params(ind).unwrap();
    let tag = format!(".op{op}.");
    let own: Vec<ParamId> = reach
        .iter()
        .copied()
        .filter(|&id| w.store.name(id).contains(&tag))
        .collect();
    if own.is_empty() {
        reach
    } else {
        own
    }
}
