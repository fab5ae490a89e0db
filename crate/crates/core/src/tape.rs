//! Reverse-mode differentiation over the handful of primitives the supernet
//! needs. A [`Tape`] records one forward pass; [`Tape::backward`] returns the
//! gradient of a scalar node with respect to every parameter read during it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        pad: usize,
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    MaxPool3 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool3(Var),
    AvgPool2(Var),
    Add(Var, Var),
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Parameter gradients keyed by id, in id order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::Shape(format!("{what}: {detail}"))
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    /// Parameters read so far, in id order.
    pub fn touched_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Stride-one 2-D convolution with zero padding. Weight is
    /// `[c_out, c_in / groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize, groups: usize) -> Result<Var> {
        let out = conv_forward(self.value(x), self.value(w), pad, groups)?;
        Ok(self.push(out, Op::Conv { x, w, pad, groups }))
    }

    /// Batch normalisation with statistics of the current batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, inv_std) = bn_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// 3×3 max pooling, stride one, padding one.
    pub fn max_pool3(&mut self, x: Var) -> Var {
        let (out, argmax) = max_pool3_forward(self.value(x));
        self.push(out, Op::MaxPool3 { x, argmax })
    }

    /// 3×3 average pooling, stride one, padding one; padded cells are not counted.
    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let out = avg_pool3_forward(self.value(x));
        self.push(out, Op::AvgPool3(x))
    }

    /// 2×2 average pooling with stride two; odd edges average what exists.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2_forward(self.value(x));
        self.push(out, Op::AvgPool2(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product with a constant mask (dropout, drop-path).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.len() != mask.len() {
            return Err(shape_err(
                "mask",
                format!("{} values vs mask of {}", t.len(), mask.len()),
            ));
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(t.shape(), data)?;
        Ok(self.push(out, Op::Mask { x, mask }))
    }

    /// Concatenation along axis 1 of rank-4 tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = concat_forward(&parts)?;
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = h * w;
        let data = t
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[n, c], data).expect("pooled shape");
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// `x [n, d] · wᵀ [d, k] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let k = tw.shape()[0];
        if tw.shape() != [k, d] || tb.shape() != [k] {
            return Err(shape_err(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let xi = &tx.data()[i * d..(i + 1) * d];
            for j in 0..k {
                let wj = &tw.data()[j * d..(j + 1) * d];
                out[i * k + j] = tb.data()[j] + xi.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy over the batch; a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(shape_err(
                "cross entropy",
                format!("{} labels for {n}×{k} logits", labels.len()),
            ));
        }
        let probs = softmax_rows(t.data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        let out = Tensor::from_vec(&[1], vec![loss])?;
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::filled(self.value(root).shape(), 1.0);
        self.backward_seeded(root, seed, None).0
    }

    /// Backpropagates `seed` from `root`; also returns the gradient reaching
    /// input node `want`, if any.
    pub fn backward_seeded(
        &self,
        root: Var,
        seed: Tensor,
        want: Option<Var>,
    ) -> (Gradients, Option<Tensor>) {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = Gradients::default();
        let mut wanted = None;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    if want == Some(Var(i)) {
                        wanted = Some(g);
                    }
                }
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::Conv { x, w, pad, groups } => {
                    let (dx, dw) = conv_backward(self.value(*x), self.value(*w), &g, *pad, *groups);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dg, db) = bn_backward(self.value(*gamma), xhat, inv_std, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::MaxPool3 { x, argmax } => {
                    let src = self.value(*x);
                    let mut d = Tensor::zeros(src.shape());
                    let (_, _, h, w) = src.dims4();
                    let hw = h * w;
                    for (plane, (gp, ap)) in d
                        .data_mut()
                        .chunks_mut(hw)
                        .zip(g.data().chunks(hw).zip(argmax.chunks(hw)))
                    {
                        for (gv, &a) in gp.iter().zip(ap) {
                            plane[a as usize] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::AvgPool3(x) => {
                    let d = avg_pool3_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, d);
                }
                Op::AvgPool2(x) => {
                    let d = avg_pool2_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mask { x, mask } => {
                    let mut d = g;
                    d.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat(xs) => {
                    let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.value(v).shape()).collect();
                    for (v, d) in xs.iter().zip(concat_backward(&shapes, &g)) {
                        accumulate(&mut grads, *v, d);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let src = self.value(*x);
                    let (_, _, h, w) = src.dims4();
                    let hw = h * w;
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(src.shape(), data).unwrap());
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, d) = (tx.shape()[0], tx.shape()[1]);
                    let k = tw.shape()[0];
                    let gd = g.data();
                    let mut dx = vec![0.0; n * d];
                    let mut dw = vec![0.0; k * d];
                    let mut db = vec![0.0; k];
                    for i in 0..n {
                        for j in 0..k {
                            let gij = gd[i * k + j];
                            db[j] += gij;
                            for t in 0..d {
                                dx[i * d + t] += gij * tw.data()[j * d + t];
                                dw[j * d + t] += gij * tx.data()[i * d + t];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, d], dx).unwrap());
                    accumulate(&mut grads, *w, Tensor::from_vec(&[k, d], dw).unwrap());
                    accumulate(&mut grads, *b, Tensor::from_vec(&[k], db).unwrap());
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let scale = g.data()[0] / n as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] -= 1.0;
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, Tensor::from_vec(&shape, d).unwrap());
                }
            }
        }
        (out, wanted)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Output rows `y` of a padded stride-one window whose input row `y + k - pad`
/// falls inside `[0, len)`.
fn valid_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(x: &Tensor, w: &Tensor, pad: usize, groups: usize) -> Result<ConvGeom> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, cin, h, wd) = x.dims4();
    let (cout, cin_g, k, k2) = w.dims4();
    if groups == 0
        || k != k2
        || cin_g * groups != cin
        || cout % groups != 0
        || h + 2 * pad < k
        || wd + 2 * pad < k
    {
        return Err(shape_err(
            "conv2d",
            format!(
                "x {:?}, w {:?}, pad {pad}, groups {groups}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        cin_g,
        cout_g: cout / groups,
        k,
        oh: h + 2 * pad + 1 - k,
        ow: wd + 2 * pad + 1 - k,
    })
}

pub fn conv_forward(x: &Tensor, w: &Tensor, pad: usize, groups: usize) -> Result<Tensor> {
    let g = conv_geom(x, w, pad, groups)?;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.oh * g.ow;
    let (xd, wd) = (x.data(), w.data());
    par::for_each_chunk_mut(out.data_mut(), out_img, |i, o| {
        let xi = &xd[i * in_img..(i + 1) * in_img];
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let oplane = &mut o[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow];
            for cl in 0..g.cin_g {
                let ic = grp * g.cin_g + cl;
                let iplane = &xi[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = valid_range(ky, pad, g.h, g.oh);
                    for kx in 0..g.k {
                        let (x0, x1) = valid_range(kx, pad, g.w, g.ow);
                        let wv = wd[((oc * g.cin_g + cl) * g.k + ky) * g.k + kx];
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let orow = &mut oplane[y * g.ow..(y + 1) * g.ow];
                            let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                            for xx in x0..x1 {
                                orow[xx] += wv * irow[xx + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    pad: usize,
    groups: usize,
) -> (Tensor, Tensor) {
    let g = conv_geom(x, w, pad, groups).expect("validated in forward");
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.oh * g.ow;
    let (xd, wd, dd) = (x.data(), w.data(), dout.data());

    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk_mut(dx.data_mut(), in_img, |i, dxi| {
        let di = &dd[i * out_img..(i + 1) * out_img];
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let dplane = &di[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow];
            for cl in 0..g.cin_g {
                let ic = grp * g.cin_g + cl;
                let xplane = &mut dxi[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = valid_range(ky, pad, g.h, g.oh);
                    for kx in 0..g.k {
                        let (x0, x1) = valid_range(kx, pad, g.w, g.ow);
                        let wv = wd[((oc * g.cin_g + cl) * g.k + ky) * g.k + kx];
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let drow = &dplane[y * g.ow..(y + 1) * g.ow];
                            let xrow = &mut xplane[iy * g.w..(iy + 1) * g.w];
                            for xx in x0..x1 {
                                xrow[xx + kx - pad] += wv * drow[xx];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    let w_row = g.cin_g * g.k * g.k;
    par::for_each_chunk_mut(dw.data_mut(), w_row, |oc, dwr| {
        let grp = oc / g.cout_g;
        for i in 0..g.n {
            let dplane = &dd[i * out_img + oc * g.oh * g.ow..i * out_img + (oc + 1) * g.oh * g.ow];
            for cl in 0..g.cin_g {
                let ic = grp * g.cin_g + cl;
                let xplane = &xd[i * in_img + ic * g.h * g.w..i * in_img + (ic + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (y0, y1) = valid_range(ky, pad, g.h, g.oh);
                    for kx in 0..g.k {
                        let (x0, x1) = valid_range(kx, pad, g.w, g.ow);
                        let mut s = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - pad;
                            let drow = &dplane[y * g.ow..(y + 1) * g.ow];
                            let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                            for xx in x0..x1 {
                                s += drow[xx] * xrow[xx + kx - pad];
                            }
                        }
                        dwr[(cl * g.k + ky) * g.k + kx] += s;
                    }
                }
            }
        }
    });
    (dx, dw)
}

type BnForward = (Tensor, Vec<f64>, Vec<f64>);

fn bn_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<BnForward> {
    if x.shape().len() != 4 {
        return Err(shape_err("batch norm", format!("x {:?}", x.shape())));
    }
    let (n, c, h, w) = x.dims4();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batch norm",
            format!(
                "x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..n).map(|i| (i * c + ch) * hw);
        let mean = planes
            .clone()
            .map(|o| xd[o..o + hw].iter().sum::<f64>())
            .sum::<f64>()
            / m;
        let var = planes
            .clone()
            .map(|o| {
                xd[o..o + hw]
                    .iter()
                    .map(|v| (v - mean).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / m;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for o in planes {
            for t in o..o + hw {
                let xh = (xd[t] - mean) * is;
                xhat[t] = xh;
                out.data_mut()[t] = gm * xh + bt;
            }
        }
    }
    Ok((out, xhat, inv_std))
}

fn bn_backward(
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let dd = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..n).map(|i| (i * c + ch) * hw);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for o in planes.clone() {
            for t in o..o + hw {
                sum_dy += dd[t];
                sum_dy_xhat += dd[t] * xhat[t];
            }
        }
        dg[ch] = sum_dy_xhat;
        db[ch] = sum_dy;
        let k = gamma.data()[ch] * inv_std[ch] / m;
        for o in planes {
            for t in o..o + hw {
                dx.data_mut()[t] = k * (m * dd[t] - sum_dy - xhat[t] * sum_dy_xhat);
            }
        }
    }
    (
        dx,
        Tensor::from_vec(&[c], dg).unwrap(),
        Tensor::from_vec(&[c], db).unwrap(),
    )
}

fn max_pool3_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (_, _, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut argmax = vec![0u32; x.len()];
    for ((src, dst), am) in x
        .data()
        .chunks(hw)
        .zip(out.data_mut().chunks_mut(hw))
        .zip(argmax.chunks_mut(hw))
    {
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for iy in y.saturating_sub(1)..(y + 2).min(h) {
                    for ix in xx.saturating_sub(1)..(xx + 2).min(w) {
                        let v = src[iy * w + ix];
                        if v > best {
                            best = v;
                            at = iy * w + ix;
                        }
                    }
                }
                dst[y * w + xx] = best;
                am[y * w + xx] = at as u32;
            }
        }
    }
    (out, argmax)
}

fn window3(y: usize, len: usize) -> std::ops::Range<usize> {
    y.saturating_sub(1)..(y + 2).min(len)
}

fn avg_pool3_forward(x: &Tensor) -> Tensor {
    let (_, _, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)) {
        for y in 0..h {
            for xx in 0..w {
                let (ry, rx) = (window3(y, h), window3(xx, w));
                let count = (ry.len() * rx.len()) as f64;
                let s: f64 = ry
                    .flat_map(|iy| rx.clone().map(move |ix| iy * w + ix))
                    .map(|t| src[t])
                    .sum();
                dst[y * w + xx] = s / count;
            }
        }
    }
    out
}

fn avg_pool3_backward(shape: &[usize], g: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(shape);
    let (_, _, h, w) = d.dims4();
    let hw = h * w;
    for (dst, gp) in d.data_mut().chunks_mut(hw).zip(g.data().chunks(hw)) {
        for y in 0..h {
            for xx in 0..w {
                let (ry, rx) = (window3(y, h), window3(xx, w));
                let share = gp[y * w + xx] / (ry.len() * rx.len()) as f64;
                for iy in ry {
                    for ix in rx.clone() {
                        dst[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    d
}

fn pool2_window(y: usize, len: usize) -> std::ops::Range<usize> {
    2 * y..(2 * y + 2).min(len)
}

fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(oh * ow))
    {
        for y in 0..oh {
            for xx in 0..ow {
                let (ry, rx) = (pool2_window(y, h), pool2_window(xx, w));
                let count = (ry.len() * rx.len()) as f64;
                let s: f64 = ry
                    .flat_map(|iy| rx.clone().map(move |ix| iy * w + ix))
                    .map(|t| src[t])
                    .sum();
                dst[y * ow + xx] = s / count;
            }
        }
    }
    out
}

fn avg_pool2_backward(shape: &[usize], g: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(shape);
    let (_, _, h, w) = d.dims4();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    for (dst, gp) in d.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let (ry, rx) = (pool2_window(y, h), pool2_window(xx, w));
                let share = gp[y * ow + xx] / (ry.len() * rx.len()) as f64;
                for iy in ry {
                    for ix in rx.clone() {
                        dst[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    d
}

fn concat_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
    if first.shape().len() != 4 {
        return Err(shape_err("concat", format!("rank of {:?}", first.shape())));
    }
    let (n, _, h, w) = first.dims4();
    let mut c_total = 0;
    for p in parts {
        if p.shape().len() != 4 || p.shape()[0] != n || p.shape()[2] != h || p.shape()[3] != w {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        c_total += p.shape()[1];
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c_total * hw);
    for i in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[i * c * hw..(i + 1) * c * hw]);
        }
    }
    Tensor::from_vec(&[n, c_total, h, w], data)
}

fn concat_backward(shapes: &[&[usize]], g: &Tensor) -> Vec<Tensor> {
    let (n, _, h, w) = g.dims4();
    let hw = h * w;
    let mut outs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut offset = 0;
    for _ in 0..n {
        for (s, o) in shapes.iter().zip(outs.iter_mut()) {
            let len = s[1] * hw;
            o.extend_from_slice(&g.data()[offset..offset + len]);
            offset += len;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::from_vec(s, d).unwrap())
        .collect()
}
