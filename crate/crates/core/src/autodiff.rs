//! A small reverse-mode tape over dense `f64` tensors.
//!
//! The op set is exactly what the encoder and the objective need: addition,
//! scaling, dense layers, 3×3 convolutions, rectifier, average pooling,
//! L2 normalization, the exponential map at the origin, Busemann values,
//! softmax, entropy and the prototype objective.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::geometry::{self, busemann_raw, check_within_clamp, norm_sq, EPS_BALL, EXP_MAP_MIN_NORM};
use crate::loss::{self, BatchAssignments, LossWeights, LOG_CLAMP};
use crate::prototypes::{softmax, AssignmentVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                what: format!("tensor data for shape {shape:?}"),
                expected: n,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    L2Normalize(Var),
    ExpMap0 {
        v: Var,
        kappa: f64,
    },
    Busemann {
        z: Var,
        protos: Var,
    },
    Softmax(Var),
    Entropy(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
    },
    HmsnLoss {
        targets: Vec<Var>,
        anchors: Vec<Vec<Var>>,
        weights: LossWeights,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], one slot per node.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn mismatch(what: &str, expected: usize, found: usize) -> Error {
    Error::DimensionMismatch {
        what: what.into(),
        expected,
        found,
    }
}

fn shape3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid(format!("{what} must be [C, H, W], got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable was not recorded on this tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(format!(
                "add of shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        Ok(self.push(out, Op::Scale(a, s)))
    }

    /// `w·x + b` with `w: [out, in]`, `x: [in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (tx, tw, tb) = (
            &self.nodes[x.index].value,
            &self.nodes[w.index].value,
            &self.nodes[b.index].value,
        );
        let (o, i) = match tw.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::invalid(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if tx.len() != i {
            return Err(mismatch("linear input", i, tx.len()));
        }
        if tb.len() != o {
            return Err(mismatch("linear bias", o, tb.len()));
        }
        let xd = tx.data();
        let out: Vec<f64> = (0..o)
            .map(|r| {
                let row = &tw.data()[r * i..(r + 1) * i];
                tb.data()[r] + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::Linear { x, w, b }))
    }

    /// Same-padded, stride-1 3×3 convolution. `x: [C, H, W]`,
    /// `w: [O, C, 3, 3]`, `b: [O]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (tx, tw, tb) = (
            &self.nodes[x.index].value,
            &self.nodes[w.index].value,
            &self.nodes[b.index].value,
        );
        let (c, h, wd) = shape3(tx, "conv input")?;
        let o = match tw.shape() {
            [o, ci, 3, 3] if *ci == c => *o,
            s => {
                return Err(Error::invalid(format!(
                    "conv weight shape {s:?} does not fit {c} input channels"
                )))
            }
        };
        if tb.len() != o {
            return Err(mismatch("conv bias", o, tb.len()));
        }
        let mut out = vec![0.0; o * h * wd];
        let xd = tx.data();
        for oc in 0..o {
            let dst = &mut out[oc * h * wd..(oc + 1) * h * wd];
            dst.iter_mut().for_each(|v| *v = tb.data()[oc]);
            for ic in 0..c {
                let src = &xd[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = tw.data()[((oc * c + ic) * 3 + ky) * 3 + kx];
                        conv_tap(dst, src, h, wd, ky, kx, wv);
                    }
                }
            }
        }
        let out = Tensor::new(vec![o, h, wd], out)?;
        Ok(self.push(out, Op::Conv3x3 { x, w, b }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect())?;
        Ok(self.push(out, Op::Relu(a)))
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let (c, h, w) = shape3(t, "pool input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("pool input {h}×{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let d = t.data();
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[(ch * oh + y) * ow + x] = 0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(a)))
    }

    /// Mean over the spatial axes: `[C, H, W] → [C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let (c, h, w) = shape3(t, "global pool input")?;
        let hw = (h * w) as f64;
        let out = t
            .data()
            .chunks_exact(h * w)
            .map(|s| s.iter().sum::<f64>() / hw)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), c);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool(a)))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let n = norm_sq(t.data()).sqrt().max(1e-12);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x / n).collect())?;
        Ok(self.push(out, Op::L2Normalize(a)))
    }

    /// Exponential map at the origin followed by projection onto the clamp
    /// radius.
    pub fn exp_map0(&mut self, v: Var, kappa: f64) -> Result<Var> {
        self.check(v)?;
        let t = &self.nodes[v.index].value;
        let mut out = geometry::exp_map0_raw(t.data(), kappa);
        geometry::project_in_place(&mut out, kappa, EPS_BALL);
        Ok(self.push(Tensor::vector(out), Op::ExpMap0 { v, kappa }))
    }

    /// Busemann values of `z: [d]` against every row of `protos: [K, d]`.
    pub fn busemann(&mut self, z: Var, protos: Var) -> Result<Var> {
        self.check(z)?;
        self.check(protos)?;
        let (tz, tp) = (&self.nodes[z.index].value, &self.nodes[protos.index].value);
        let (k, d) = match tp.shape() {
            [k, d] => (*k, *d),
            s => return Err(Error::invalid(format!("prototype matrix must be 2-D, got {s:?}"))),
        };
        if tz.len() != d {
            return Err(mismatch("embedding dimension vs prototypes", d, tz.len()));
        }
        check_within_clamp(tz.data())?;
        let out: Vec<f64> = tp.data().chunks_exact(d).map(|c| busemann_raw(c, tz.data())).collect();
        debug_assert_eq!(out.len(), k);
        Ok(self.push(Tensor::vector(out), Op::Busemann { z, protos }))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = softmax(self.nodes[a.index].value.data());
        Ok(self.push(Tensor::vector(out), Op::Softmax(a)))
    }

    /// Shannon entropy of a probability vector (clamped logarithm).
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        self.check(p)?;
        let h = loss::entropy_raw(self.nodes[p.index].value.data());
        Ok(self.push(Tensor::scalar(h), Op::Entropy(p)))
    }

    /// `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.check(logits)?;
        let t = &self.nodes[logits.index].value;
        if label >= t.len() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                t.len()
            )));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let v = lse - t.data()[label];
        Ok(self.push(Tensor::scalar(v), Op::SoftmaxCrossEntropy { logits, label }))
    }

    /// The prototype objective over assignment nodes. Targets receive no
    /// gradient.
    pub fn hmsn_loss(&mut self, targets: &[Var], anchors: &[Vec<Var>], weights: LossWeights) -> Result<Var> {
        for v in targets.iter().chain(anchors.iter().flatten()) {
            self.check(*v)?;
        }
        let batch = self.batch_of(targets, anchors)?;
        let value = loss::hmsn_loss(&batch, weights);
        Ok(self.push(
            Tensor::scalar(value),
            Op::HmsnLoss {
                targets: targets.to_vec(),
                anchors: anchors.to_vec(),
                weights,
            },
        ))
    }

    fn batch_of(&self, targets: &[Var], anchors: &[Vec<Var>]) -> Result<BatchAssignments> {
        let av = |v: &Var| AssignmentVector::new_unchecked(self.nodes[v.index].value.data().to_vec());
        BatchAssignments::new(
            targets.iter().map(av).collect(),
            anchors.iter().map(|g| g.iter().map(av).collect()).collect(),
        )
    }

    /// Backpropagates from a scalar output with unit seed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        if self.nodes[output.index].value.len() != 1 {
            return Err(Error::Usage(
                "backward() needs a scalar output; use backward_with".into(),
            ));
        }
        let seed = Tensor::new(self.nodes[output.index].value.shape().to_vec(), vec![1.0])?;
        self.backward_with(output, seed)
    }

    /// Backpropagates `seed = ∂L/∂output` through the recorded computation.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.nodes[output.index].value.shape() {
            return Err(Error::invalid(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[output.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        grads[output.index] = Some(seed);
        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self.val(*a).shape(), gd);
                accumulate(grads, *b, self.val(*b).shape(), gd);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = gd.iter().map(|x| x * s).collect();
                accumulate(grads, *a, self.val(*a).shape(), &d);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (o, n) = (tw.shape()[0], tw.shape()[1]);
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; o * n];
                for r in 0..o {
                    let row = &tw.data()[r * n..(r + 1) * n];
                    for c in 0..n {
                        dx[c] += row[c] * gd[r];
                        dw[r * n + c] = gd[r] * tx.data()[c];
                    }
                }
                accumulate(grads, *x, tx.shape(), &dx);
                accumulate(grads, *w, tw.shape(), &dw);
                accumulate(grads, *b, self.val(*b).shape(), gd);
            }
            Op::Conv3x3 { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (c, h, wd) = shape3(tx, "conv input")?;
                let o = tw.shape()[0];
                let plane = h * wd;
                let mut dx = vec![0.0; c * plane];
                let mut dw = vec![0.0; tw.len()];
                let mut db = vec![0.0; o];
                for oc in 0..o {
                    let go = &gd[oc * plane..(oc + 1) * plane];
                    db[oc] = go.iter().sum();
                    for ic in 0..c {
                        let src = &tx.data()[ic * plane..(ic + 1) * plane];
                        let dsrc = &mut dx[ic * plane..(ic + 1) * plane];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wi = ((oc * c + ic) * 3 + ky) * 3 + kx;
                                dw[wi] = conv_tap_dot(go, src, h, wd, ky, kx);
                                conv_tap_transpose(dsrc, go, h, wd, ky, kx, tw.data()[wi]);
                            }
                        }
                    }
                }
                accumulate(grads, *x, tx.shape(), &dx);
                accumulate(grads, *w, tw.shape(), &dw);
                accumulate(grads, *b, self.val(*b).shape(), &db);
            }
            Op::Relu(a) => {
                let ta = self.val(*a);
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ta.shape(), &d);
            }
            Op::AvgPool2(a) => {
                let ta = self.val(*a);
                let (c, h, w) = shape3(ta, "pool input")?;
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; ta.len()];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * gd[(ch * oh + y) * ow + x];
                            let base = ch * h * w + 2 * y * w + 2 * x;
                            d[base] += gv;
                            d[base + 1] += gv;
                            d[base + w] += gv;
                            d[base + w + 1] += gv;
                        }
                    }
                }
                accumulate(grads, *a, ta.shape(), &d);
            }
            Op::GlobalAvgPool(a) => {
                let ta = self.val(*a);
                let (_, h, w) = shape3(ta, "global pool input")?;
                let hw = h * w;
                let d: Vec<f64> = (0..ta.len()).map(|j| gd[j / hw] / hw as f64).collect();
                accumulate(grads, *a, ta.shape(), &d);
            }
            Op::L2Normalize(a) => {
                let ta = self.val(*a);
                let y = node.value.data();
                let n = norm_sq(ta.data()).sqrt().max(1e-12);
                let yg: f64 = y.iter().zip(gd).map(|(p, q)| p * q).sum();
                let d: Vec<f64> = y.iter().zip(gd).map(|(yi, gi)| (gi - yi * yg) / n).collect();
                accumulate(grads, *a, ta.shape(), &d);
            }
            Op::ExpMap0 { v, kappa } => {
                let tv = self.val(*v);
                let d = exp_map0_vjp(tv.data(), gd, *kappa);
                accumulate(grads, *v, tv.shape(), &d);
            }
            Op::Busemann { z, protos } => {
                let (tz, tp) = (self.val(*z), self.val(*protos));
                let dim = tz.len();
                let zd = tz.data();
                let z2 = norm_sq(zd);
                let mut dz = vec![0.0; dim];
                let mut dp = vec![0.0; tp.len()];
                let gsum: f64 = gd.iter().sum();
                for (k, c) in tp.data().chunks_exact(dim).enumerate() {
                    let diff2: f64 = c.iter().zip(zd).map(|(a, b)| (a - b) * (a - b)).sum();
                    let s = 2.0 * gd[k] / diff2;
                    for j in 0..dim {
                        let cz = c[j] - zd[j];
                        dz[j] -= s * cz;
                        dp[k * dim + j] = s * cz;
                    }
                }
                let radial = 2.0 * gsum / (1.0 - z2);
                dz.iter_mut().zip(zd).for_each(|(a, b)| *a += radial * b);
                accumulate(grads, *z, tz.shape(), &dz);
                accumulate(grads, *protos, tp.shape(), &dp);
            }
            Op::Softmax(a) => {
                let d = loss::softmax_vjp(node.value.data(), gd);
                accumulate(grads, *a, self.val(*a).shape(), &d);
            }
            Op::Entropy(p) => {
                let tp = self.val(*p);
                let d: Vec<f64> = tp
                    .data()
                    .iter()
                    .map(|x| {
                        let dx = if *x > LOG_CLAMP { x.ln() + 1.0 } else { LOG_CLAMP.ln() };
                        -gd[0] * dx
                    })
                    .collect();
                accumulate(grads, *p, tp.shape(), &d);
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let tl = self.val(*logits);
                let mut d = softmax(tl.data());
                d[*label] -= 1.0;
                d.iter_mut().for_each(|x| *x *= gd[0]);
                accumulate(grads, *logits, tl.shape(), &d);
            }
            Op::HmsnLoss {
                targets,
                anchors,
                weights,
            } => {
                let batch = self.batch_of(targets, anchors)?;
                let pg = loss::prob_gradients(&batch, *weights);
                for (vars, gs) in anchors.iter().zip(pg) {
                    for (v, gvec) in vars.iter().zip(gs) {
                        let d: Vec<f64> = gvec.iter().map(|x| x * gd[0]).collect();
                        accumulate(grads, *v, self.val(*v).shape(), &d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: &[f64]) {
    match &mut grads[v.index] {
        Some(t) => t.data_mut().iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: d.to_vec(),
            })
        }
    }
}

/// Valid output rows/cols for kernel offset `k ∈ {0,1,2}` under padding 1.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

#[inline]
fn conv_tap(dst: &mut [f64], src: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    for y in y0..y1 {
        let sy = y + ky - 1;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
        d.iter_mut().zip(s).for_each(|(a, b)| *a += wv * b);
    }
}

#[inline]
fn conv_tap_dot(go: &[f64], src: &[f64], h: usize, w: usize, ky: usize, kx: usize) -> f64 {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = y + ky - 1;
        let g = &go[y * w + x0..y * w + x1];
        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

#[inline]
fn conv_tap_transpose(dsrc: &mut [f64], go: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    for y in y0..y1 {
        let sy = y + ky - 1;
        let g = &go[y * w + x0..y * w + x1];
        let s = &mut dsrc[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
        s.iter_mut().zip(g).for_each(|(a, b)| *a += wv * b);
    }
}

/// VJP of `v ↦ project(tanh(√κ‖v‖)/(√κ‖v‖)·v)`.
pub(crate) fn exp_map0_vjp(v: &[f64], g: &[f64], kappa: f64) -> Vec<f64> {
    let n = norm_sq(v).sqrt();
    if n < EXP_MAP_MIN_NORM {
        return g.to_vec();
    }
    let sk = kappa.sqrt();
    let u = sk * n;
    let vg: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
    let out_norm = u.tanh() / sk;
    let r_max = (1.0 - EPS_BALL) / sk;
    if out_norm > r_max {
        // projected branch: y = r_max · v/‖v‖
        return v
            .iter()
            .zip(g)
            .map(|(vi, gi)| r_max * (gi - vi * vg / (n * n)) / n)
            .collect();
    }
    let (f, fp_over_n) = if u < 1e-3 {
        let u2 = u * u;
        (
            1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0,
            kappa * (-2.0 / 3.0 + 8.0 * u2 / 15.0),
        )
    } else {
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        (t / u, (u * sech2 - t) / (sk * n * n * n))
    };
    v.iter().zip(g).map(|(vi, gi)| f * gi + fp_over_n * vg * vi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect(),
        )
        .unwrap()
    }

    /// Checks d⟨r, f(x)⟩/dx for a unary op built by `build` against central
    /// differences, with `r` a fixed random readout.
    fn check_unary<F>(x: Tensor, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&mut tape, xv);
        let readout = rand_tensor(&mut rng, tape.value(y).shape(), 1.0);
        let grads = tape.backward_with(y, readout.clone()).unwrap();
        let analytic = grads.get(xv).unwrap().data().to_vec();
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::new(x.shape().to_vec(), xs.to_vec()).unwrap());
            let y = build(&mut t, v);
            t.value(y)
                .data()
                .iter()
                .zip(readout.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let numeric = crate::gradcheck::central_differences(f, x.data(), 1e-6);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 4, 4], 1.0);
        check_unary(x.clone(), |t, v| t.relu(v).unwrap(), 1e-7);
        check_unary(x.clone(), |t, v| t.avg_pool2(v).unwrap(), 1e-7);
        check_unary(x.clone(), |t, v| t.global_avg_pool(v).unwrap(), 1e-7);
        check_unary(x.clone(), |t, v| t.scale(v, -2.5).unwrap(), 1e-7);
        check_unary(x.clone(), |t, v| t.add(v, v).unwrap(), 1e-7);
        let v = rand_tensor(&mut rng, &[6], 1.0);
        check_unary(v.clone(), |t, v| t.l2_normalize(v).unwrap(), 1e-7);
        check_unary(v.clone(), |t, v| t.softmax(v).unwrap(), 1e-7);
        check_unary(v.clone(), |t, v| t.softmax_cross_entropy(v, 2).unwrap(), 1e-7);
        check_unary(
            v.clone(),
            |t, v| {
                let p = t.softmax(v).unwrap();
                t.entropy(p).unwrap()
            },
            1e-7,
        );
    }

    #[test]
    fn exp_map0_gradients_in_all_regimes() {
        for (scale, kappa) in [(0.3, 1.0), (2.0, 1.0), (1e-5, 1.0), (0.4, 2.5), (20.0, 1.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let v = rand_tensor(&mut rng, &[5], scale);
            check_unary(v, move |t, v| t.exp_map0(v, kappa).unwrap(), 1e-6);
        }
    }

    #[test]
    fn linear_and_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, &[3, 4], 1.0);
        let b = rand_tensor(&mut rng, &[3], 1.0);
        let x = rand_tensor(&mut rng, &[4], 1.0);
        let (w2, b2) = (w.clone(), b.clone());
        check_unary(
            x.clone(),
            move |t, v| {
                let wv = t.leaf(w2.clone());
                let bv = t.leaf(b2.clone());
                t.linear(v, wv, bv).unwrap()
            },
            1e-7,
        );
        let x2 = x.clone();
        check_unary(
            w.clone(),
            move |t, wv| {
                let xv = t.leaf(x2.clone());
                let bv = t.leaf(b.clone());
                t.linear(xv, wv, bv).unwrap()
            },
            1e-7,
        );

        let cw = rand_tensor(&mut rng, &[3, 2, 3, 3], 0.5);
        let cb = rand_tensor(&mut rng, &[3], 0.5);
        let img = rand_tensor(&mut rng, &[2, 5, 6], 1.0);
        let (cw2, cb2) = (cw.clone(), cb.clone());
        check_unary(
            img.clone(),
            move |t, v| {
                let wv = t.leaf(cw2.clone());
                let bv = t.leaf(cb2.clone());
                t.conv3x3(v, wv, bv).unwrap()
            },
            1e-7,
        );
        let (img2, cb3) = (img.clone(), cb.clone());
        check_unary(
            cw.clone(),
            move |t, wv| {
                let xv = t.leaf(img2.clone());
                let bv = t.leaf(cb3.clone());
                t.conv3x3(xv, wv, bv).unwrap()
            },
            1e-7,
        );
        check_unary(
            cb,
            move |t, bv| {
                let xv = t.leaf(img.clone());
                let wv = t.leaf(cw.clone());
                t.conv3x3(xv, wv, bv).unwrap()
            },
            1e-7,
        );
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, o, h, w) = (2, 3, 4, 5);
        let x = rand_tensor(&mut rng, &[c, h, w], 1.0);
        let k = rand_tensor(&mut rng, &[o, c, 3, 3], 1.0);
        let b = rand_tensor(&mut rng, &[o], 1.0);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
        let y = tape.conv3x3(xv, kv, bv).unwrap();
        let out = tape.value(y);
        for oc in 0..o {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((oc * c + ic) * 3 + ky as usize) * 3 + kx as usize]
                                    * x.data()[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let got = out.data()[(oc * h + yy as usize) * w + xx as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn busemann_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let protos = crate::prototypes::PrototypeSet::init(5, 4, 1).unwrap();
        let pt = Tensor::new(vec![5, 4], protos.as_slice().to_vec()).unwrap();
        let z = rand_tensor(&mut rng, &[4], 0.4);
        let pt2 = pt.clone();
        check_unary(
            z.clone(),
            move |t, zv| {
                let pv = t.leaf(pt2.clone());
                t.busemann(zv, pv).unwrap()
            },
            1e-7,
        );
        check_unary(
            pt,
            move |t, pv| {
                let zv = t.leaf(z.clone());
                t.busemann(zv, pv).unwrap()
            },
            1e-7,
        );
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, -3.0]));
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, 1.0, -1.0, 0.25]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        let grads = tape.backward_with(y, Tensor::vector(vec![7.0, -1.0])).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[14.0, -21.0, -2.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, 0.2]));
        let p = tape.softmax(x).unwrap();
        let grads = tape.backward_with(p, Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn usage_errors() {
        let mut a = Tape::new();
        let b = Tape::new();
        let v = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(v), Err(Error::Usage(_))));
        let w = a.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(a.backward(w), Err(Error::Usage(_))));
        assert!(a.add(v, w).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn hmsn_op_matches_loss_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let mut logits = Vec::new();
        let mut probs = Vec::new();
        for _ in 0..6 {
            let l = tape.leaf(rand_tensor(&mut rng, &[5], 2.0));
            logits.push(l);
            probs.push(tape.softmax(l).unwrap());
        }
        let targets = vec![probs[0], probs[3]];
        let anchors = vec![vec![probs[1], probs[2]], vec![probs[4], probs[5]]];
        let w = LossWeights::default();
        let out = tape.hmsn_loss(&targets, &anchors, w).unwrap();
        let grads = tape.backward(out).unwrap();
        let batch = tape.batch_of(&targets, &anchors).unwrap();
        assert_eq!(tape.value(out).item(), loss::hmsn_loss(&batch, w));
        let reference = loss::hmsn_loss_backward(&batch, w).anchor_logits;
        let g = grads.get(logits[4]).unwrap().data();
        for (a, b) in g.iter().zip(&reference[1][0]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(grads.get(logits[0]).is_none(), "targets are stop-gradient");
    }
}
