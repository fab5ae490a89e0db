mod common;

use common::*;
use genetic_nas::ga::{CellType, Individual};
use genetic_nas::genome::{decode, CellGenome, SearchSpaceSpec};
use genetic_nas::optim::{Sgd, SgdConfig};
use genetic_nas::params::ParamStore;
use genetic_nas::rng::stream;
use genetic_nas::supernet::*;
use genetic_nas::tape::{softmax_rows, BN_EPS};
use genetic_nas::Tensor;
use rand_distr::{Distribution, Normal, Uniform};

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "tensor");
    let n = Normal::new(0.0, 1.0).unwrap();
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| n.sample(&mut rng)).collect()).unwrap()
}

fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "positive");
    let u = Uniform::new(0.5, 2.0).unwrap();
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| u.sample(&mut rng)).collect()).unwrap()
}

fn chain(spec: &SearchSpaceSpec, op: usize) -> CellGenome {
    CellGenome::from_genes((0..spec.n_blocks).flat_map(|b| [b, b, op, op]).collect())
}

#[test]
fn identity_op_is_exact() {
    let store = ParamStore::new();
    let x = random_tensor(&[2, 3, 4, 4], 1);
    assert_eq!(
        op_forward(&store, Operation::Identity, &OpParams::None, &x).unwrap(),
        x
    );
}

#[test]
fn max_pool_keeps_positive_constants() {
    let store = ParamStore::new();
    let x = Tensor::filled(&[1, 2, 5, 5], 0.7);
    assert_eq!(
        op_forward(&store, Operation::MaxPool3, &OpParams::None, &x).unwrap(),
        x
    );
    let avg = op_forward(&store, Operation::AvgPool3, &OpParams::None, &x).unwrap();
    assert!(avg.max_abs_diff(&x) < 1e-15);
}

fn sep_unit(store: &mut ParamStore, u: usize, k: usize) -> SepUnit {
    let bn = |store: &mut ParamStore, tag: &str| BnParams {
        gamma: store.add(format!("u{u}.{tag}.gamma"), Tensor::filled(&[1], 1.0)),
        beta: store.add(format!("u{u}.{tag}.beta"), Tensor::zeros(&[1])),
    };
    SepUnit {
        depthwise: store.add(format!("u{u}.dw"), Tensor::filled(&[1, 1, k, k], 1.0)),
        bn_depthwise: bn(store, "dw_bn"),
        pointwise: store.add(format!("u{u}.pw"), Tensor::filled(&[1, 1, 1, 1], 1.0)),
        bn_pointwise: bn(store, "pw_bn"),
    }
}

// Naive 4×4 single-channel stages.
fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn box3(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 16];
    for y in 0..4i32 {
        for xx in 0..4i32 {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (py, px) = (y + dy, xx + dx);
                    if (0..4).contains(&py) && (0..4).contains(&px) {
                        s += x[(py * 4 + px) as usize];
                    }
                }
            }
            out[(y * 4 + xx) as usize] = s;
        }
    }
    out
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter().map(|a| (a - m) / (v + BN_EPS).sqrt()).collect()
}

#[test]
fn sep_conv3_matches_hand_table() {
    let mut store = ParamStore::new();
    let units = [sep_unit(&mut store, 0, 3), sep_unit(&mut store, 1, 3)];
    let input: Vec<f64> = (0..16).map(|i| ((i * 7) % 11) as f64 - 4.0).collect();
    let x = Tensor::from_vec(&[1, 1, 4, 4], input.clone()).unwrap();
    let got = op_forward(&store, Operation::SepConv3, &OpParams::SepConv(units), &x).unwrap();
    let mut h = input;
    for _ in 0..2 {
        h = standardize(&box3(&relu(&h)));
        h = standardize(&relu(&h));
    }
    for (a, b) in got.data().iter().zip(&h) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn ops_preserve_shape() {
    let spec = SearchSpaceSpec::new(2, 5).unwrap();
    let w = weights(spec, net_config(1, 3, 2, 5), 3);
    let x = random_tensor(&[2, 3, 5, 5], 4);
    for (j, op) in OPERATIONS.iter().enumerate() {
        let y = op_forward(&w.store, *op, w.cells[0].bank(1, 0, 1, j), &x).unwrap();
        assert_eq!(y.shape(), x.shape(), "{}", op.name());
    }
    let r = reduction_forward(&w, 0, &x).unwrap();
    assert_eq!(r.shape(), &[2, 6, 3, 3]);
}

#[test]
fn op_bank_mismatch_is_an_error() {
    let spec = SearchSpaceSpec::new(1, 5).unwrap();
    let w = weights(spec, net_config(1, 3, 2, 4), 3);
    let x = random_tensor(&[1, 3, 4, 4], 4);
    assert!(op_forward(&w.store, Operation::SepConv3, &OpParams::None, &x).is_err());
    let wrong = w.cells[0].bank(0, 0, 0, 4).clone();
    assert!(op_forward(&w.store, Operation::SepConv3, &wrong, &x).is_err());
}

#[test]
fn identity_blocks_add_their_inputs() {
    let spec = SearchSpaceSpec::new(2, 5).unwrap();
    let w = weights(spec, net_config(1, 2, 2, 4), 5);
    let x = random_tensor(&[1, 2, 4, 4], 6);
    let y = random_tensor(&[1, 2, 4, 4], 7);
    let d = decode(&spec, &CellGenome::from_genes(vec![0, 0, 0, 0, 0, 1, 0, 0])).unwrap();
    let both = block_forward(&w, 0, &d, 0, std::slice::from_ref(&x)).unwrap();
    let mut twice = x.clone();
    twice.scale(2.0);
    assert_eq!(both, twice);
    let mixed = block_forward(&w, 0, &d, 1, &[x.clone(), y.clone()]).unwrap();
    let mut sum = x.clone();
    sum.add_assign(&y);
    assert_eq!(mixed, sum);
}

#[test]
fn block_is_the_sum_of_its_ops() {
    let spec = SearchSpaceSpec::new(3, 5).unwrap();
    let mut w = weights(spec, net_config(1, 3, 2, 5), 8);
    randomize(&mut w, 9);
    let avail: Vec<Tensor> = (0..3)
        .map(|i| random_tensor(&[2, 3, 5, 5], 10 + i))
        .collect();
    let mut rng = stream(11, "genomes");
    for _ in 0..20 {
        let g = genetic_nas::genome::random_genome(&spec, &mut rng);
        let d = decode(&spec, &g).unwrap();
        let b = 2;
        let got = block_forward(&w, 0, &d, b, &avail).unwrap();
        let blk = g.block(b);
        let mut expect = op_forward(
            &w.store,
            OPERATIONS[blk[2]],
            w.cells[0].bank(b, 0, blk[0], blk[2]),
            &avail[blk[0]],
        )
        .unwrap();
        let other = op_forward(
            &w.store,
            OPERATIONS[blk[3]],
            w.cells[0].bank(b, 1, blk[1], blk[3]),
            &avail[blk[1]],
        )
        .unwrap();
        expect.add_assign(&other);
        assert!(got.max_abs_diff(&expect) <= 1e-12);
    }
}

fn single_block_net() -> (SearchSpaceSpec, SupernetWeights, Individual) {
    let spec = SearchSpaceSpec::new(1, 5).unwrap();
    let w = weights(spec, net_config(2, 2, 2, 4), 12);
    let g = CellGenome::from_genes(vec![0, 0, 0, 0]);
    (spec, w, Individual::new([g.clone(), g.clone(), g]))
}

#[test]
fn halving_projection_passes_the_dag_input() {
    let (_, mut w, ind) = single_block_net();
    let cell = w.cells[1].clone();
    assert_eq!(cell.cell_type, CellType::Normal);
    assert!(cell.has_prev);
    let h_n = positive_tensor(&[3, 2, 4, 4], 13);
    let h_prev = positive_tensor(&[3, 2, 4, 4], 14);
    let mut dag = h_n.clone();
    dag.add_assign(&h_prev);

    // Blocks double the DAG input; a 0.5·I projection halves it back, and a
    // BN whose affine part undoes the batch standardisation is the identity.
    let proj = w.store.get_mut(cell.projection[0]);
    proj.data_mut().copy_from_slice(&[0.5, 0.0, 0.0, 0.5]);
    let plane = 16;
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| dag.data()[(n * 2 + c) * plane..(n * 2 + c + 1) * plane].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        w.store.get_mut(cell.projection_bn.gamma).data_mut()[c] = (v + BN_EPS).sqrt();
        w.store.get_mut(cell.projection_bn.beta).data_mut()[c] = m;
    }
    let out = cell_forward(&w, 1, &ind, &h_n, Some(&h_prev), Mode::Eval).unwrap();
    let mut expect = dag.clone();
    expect.add_assign(&h_n);
    assert!(
        out.max_abs_diff(&expect) < 1e-12,
        "{}",
        out.max_abs_diff(&expect)
    );
}

#[test]
fn zero_projection_leaves_the_residual() {
    let (_, mut w, ind) = single_block_net();
    for cell in 0..w.cells.len() {
        let id = w.cells[cell].projection[0];
        w.store.get_mut(id).data_mut().fill(0.0);
    }
    let h_n = random_tensor(&[2, 2, 4, 4], 15);
    let h_prev = random_tensor(&[2, 2, 4, 4], 16);
    assert_eq!(
        cell_forward(&w, 1, &ind, &h_n, Some(&h_prev), Mode::Eval).unwrap(),
        h_n
    );
    assert_eq!(
        cell_forward(&w, 0, &ind, &h_n, None, Mode::Eval).unwrap(),
        h_n
    );
}

#[test]
fn chain_has_one_loose_end_and_cells_preserve_shape() {
    let spec = SearchSpaceSpec::new(3, 5).unwrap();
    let d = decode(&spec, &chain(&spec, 3)).unwrap();
    assert_eq!(d.loose_ends, vec![2]);
    let mut w = weights(spec, net_config(2, 3, 2, 5), 17);
    randomize(&mut w, 18);
    let ind = Individual::random(&spec, &mut stream(19, "ind"));
    let h = random_tensor(&[2, 3, 5, 5], 20);
    let p = random_tensor(&[2, 3, 5, 5], 21);
    assert_eq!(
        cell_forward(&w, 1, &ind, &h, Some(&p), Mode::Eval)
            .unwrap()
            .shape(),
        h.shape()
    );
    assert!(cell_forward(
        &w,
        1,
        &ind,
        &h,
        Some(&random_tensor(&[2, 3, 4, 4], 1)),
        Mode::Eval
    )
    .is_err());
}

#[test]
fn fresh_network_outputs_uniform_logits() {
    let spec = SearchSpaceSpec::new(2, 5).unwrap();
    let w = weights(spec, net_config(1, 4, 7, 6), 22);
    let batch = synthetic_batch(1, 7, 6, 0.1, 23);
    let ind = Individual::random(&spec, &mut stream(24, "ind"));
    let out = network_forward(&w, &ind, &batch, Mode::Eval).unwrap();
    assert_eq!(out.logits.shape(), &[7, 7]);
    assert!(out.logits.data().iter().all(|&v| v == 0.0));
    assert!((out.loss - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_rows_are_normalised() {
    let spec = SearchSpaceSpec::new(2, 5).unwrap();
    let mut w = weights(spec, net_config(1, 4, 5, 6), 25);
    randomize(&mut w, 26);
    let batch = synthetic_batch(2, 5, 6, 0.1, 27);
    let ind = Individual::random(&spec, &mut stream(28, "ind"));
    let out = network_forward(&w, &ind, &batch, Mode::Eval).unwrap();
    assert_eq!(out.logits.shape(), &[10, 5]);
    for row in softmax_rows(out.logits.data(), 5).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn architectures_differ_and_swapping_is_bit_exact() {
    let spec = SearchSpaceSpec::new(3, 5).unwrap();
    let mut w = weights(spec, net_config(1, 4, 3, 6), 29);
    randomize(&mut w, 30);
    let batch = synthetic_batch(2, 3, 6, 0.1, 31);
    let mut rng = stream(32, "ind");
    let g1 = Individual::random(&spec, &mut rng);
    let g2 = Individual::random(&spec, &mut rng);
    assert_ne!(g1, g2);
    let a = network_forward(&w, &g1, &batch, Mode::Eval).unwrap();
    let b = network_forward(&w, &g2, &batch, Mode::Eval).unwrap();
    let again = network_forward(&w, &g1, &batch, Mode::Eval).unwrap();
    assert_ne!(a.logits, b.logits);
    assert_eq!(a.logits.data(), again.logits.data());
    assert_eq!(a.loss.to_bits(), again.loss.to_bits());
}

#[test]
fn wrong_image_size_is_rejected() {
    let spec = SearchSpaceSpec::new(1, 5).unwrap();
    let w = weights(spec, net_config(1, 2, 3, 8), 33);
    let batch = synthetic_batch(1, 3, 6, 0.1, 34);
    let ind = Individual::random(&spec, &mut stream(35, "ind"));
    assert!(network_forward(&w, &ind, &batch, Mode::Eval).is_err());
}

#[test]
fn non_finite_activations_name_the_layer() {
    let spec = SearchSpaceSpec::new(1, 5).unwrap();
    let mut w = weights(spec, net_config(1, 2, 3, 6), 36);
    w.store.get_mut(w.stem).data_mut()[0] = f64::NAN;
    let batch = synthetic_batch(1, 3, 6, 0.1, 37);
    let ind = Individual::random(&spec, &mut stream(38, "ind"));
    let err = network_forward(&w, &ind, &batch, Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("stem"), "{err}");
}

#[test]
fn gradients_match_finite_differences() {
    let spec = SearchSpaceSpec::new(2, 5).unwrap();
    let batch = synthetic_batch(2, 3, 6, 0.2, 40);
    for op in 0..5 {
        let mut w = weights(spec, net_config(1, 3, 3, 6), 41 + op as u64);
        randomize(&mut w, 50 + op as u64);
        let ind = individual_with_op(&spec, op, &mut stream(60 + op as u64, "ind"));
        let cand = op_candidates(&w, &ind, op);
        let sample =
            finite_difference_check(&mut w, &ind, &batch, &cand, 12, 1e-5, 5e-5, 70 + op as u64);
        for r in sample.results {
            assert!(
                r.rel_error() < 1e-4,
                "op {op} {}: {} vs {}",
                r.name,
                r.analytic,
                r.numeric
            );
        }
    }
}

#[test]
fn lr_zero_without_momentum_keeps_weights() {
    let spec = SearchSpaceSpec::new(2, 5).unwrap();
    let mut w = weights(spec, net_config(1, 3, 3, 6), 80);
    randomize(&mut w, 81);
    let before = w.store.clone();
    let batch = synthetic_batch(2, 3, 6, 0.1, 82);
    let ind = Individual::random(&spec, &mut stream(83, "ind"));
    let mut sgd = Sgd::new(SgdConfig {
        momentum: 0.0,
        ..SgdConfig::default()
    });
    let out = backward_and_step(
        &mut w,
        &mut sgd,
        &ind,
        &batch,
        0.0,
        &mut stream(84, "m"),
        false,
    )
    .unwrap();
    assert!(out.loss.is_finite());
    assert_eq!(w.store, before);
}

#[test]
fn unselected_weights_are_untouched() {
    let spec = SearchSpaceSpec::new(3, 5).unwrap();
    let mut w = weights(spec, net_config(1, 3, 3, 6), 85);
    randomize(&mut w, 86);
    let before = w.store.clone();
    let batch = synthetic_batch(2, 3, 6, 0.1, 87);
    let ind = Individual::random(&spec, &mut stream(88, "ind"));
    let mut sgd = Sgd::new(SgdConfig::default());
    let out = backward_and_step(
        &mut w,
        &mut sgd,
        &ind,
        &batch,
        0.1,
        &mut stream(89, "m"),
        true,
    )
    .unwrap();
    let reach = w.reachable_params(&ind).unwrap();
    assert_eq!(out.updated, reach);
    for id in w.store.ids() {
        let same = w.store.get(id) == before.get(id);
        assert_eq!(!same, reach.contains(&id), "{}", w.store.name(id));
        assert_eq!(
            sgd.buffers().get(id.0).is_some_and(Option::is_some),
            reach.contains(&id)
        );
    }
}

#[test]
fn training_a_fixed_genome_lowers_the_loss() {
    let spec = SearchSpaceSpec::new(3, 5).unwrap();
    let mut w = weights(spec, net_config(1, 8, 4, 8), 90);
    let batch = synthetic_batch(8, 4, 8, 0.1, 91);
    let ind = Individual::random(&spec, &mut stream(92, "ind"));
    let mut sgd = Sgd::new(SgdConfig::default());
    let mut rng = stream(93, "m");
    let losses: Vec<f64> = (0..200)
        .map(|_| {
            backward_and_step(&mut w, &mut sgd, &ind, &batch, 0.05, &mut rng, false)
                .unwrap()
                .loss
        })
        .collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn paper_scale_network_takes_a_step() {
    let spec = SearchSpaceSpec::new(5, 5).unwrap();
    let config = NetworkConfig {
        n_cells: 4,
        channels: 48,
        n_classes: 10,
        image_size: 32,
        dropout: 0.2,
        drop_path: 0.1,
    };
    let mut w = weights(spec, config, 94);
    let batch = synthetic_batch(1, 10, 32, 0.1, 95);
    let ind = Individual::random(&spec, &mut stream(96, "ind"));
    let mut sgd = Sgd::new(SgdConfig::default());
    let out = backward_and_step(
        &mut w,
        &mut sgd,
        &ind,
        &batch,
        0.1,
        &mut stream(97, "m"),
        true,
    )
    .unwrap();
    assert!(out.loss.is_finite());
}
