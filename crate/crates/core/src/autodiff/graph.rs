use std::collections::BTreeMap;

use rayon::prelude::*;

use super::conv::{ConvGeometry, Padding};
use super::store::ParameterStore;
use super::tensor::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: Option<usize>, pad: Padding },
    Linear { x: usize, w: usize, b: Option<usize> },
    LeakyRelu { x: usize, slope: T },
    Add(usize, usize),
    Scale { x: usize, c: T },
    Concat(usize, usize),
    Broadcast { x: usize },
    RepeatBatch { x: usize },
    PixelShuffle { x: usize, r: usize },
    AvgPool2 { x: usize },
    GlobalAvgPool { x: usize },
    L1 { p: usize, t: usize },
    L2 { p: usize, t: usize },
    Dot { x: usize, c: Vec<T> },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
/// them backwards is a valid topological order.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    params: BTreeMap<String, usize>,
    fault: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Calls `f(input offset, output offset)` for every element of one sample.
fn for_each_shuffle(c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src_plane = (ch * r * r + i * r + j) * h * w;
                for y in 0..h {
                    let src = src_plane + y * w;
                    let dst = (ch * oh + y * r + i) * ow + j;
                    for x in 0..w {
                        f(src + x, dst + x * r);
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            params: BTreeMap::new(),
            fault: false,
        }
    }

    /// Test fixture: scales every conv weight gradient by 1.1.
    #[doc(hidden)]
    pub fn inject_conv_weight_fault(&mut self, on: bool) {
        self.fault = on;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Ok(Var(self.values.len() - 1))
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is accumulated.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    /// Binds a named parameter; repeated binds return the same node so
    /// weights used several times accumulate a single gradient.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var(i));
        }
        let p = store.get(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable, "param")?;
        self.params.insert(name.into(), v.0);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every bound trainable parameter (zeros if unreached).
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .filter(|(_, &i)| self.requires[i])
            .map(|(name, &i)| {
                let g = self.grads[i].clone().unwrap_or_else(|| vec![T::zero(); self.values[i].len()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn req(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.requires[i])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Result<Var> {
        let (n, c, h, wd) = self.values[x.0].dims4()?;
        let (o, ci, k, k2) = self.values[w.0].dims4()?;
        if ci != c || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv weight {:?} for input {:?}",
                self.values[w.0].shape(),
                self.values[x.0].shape()
            )));
        }
        if let Some(b) = b {
            if self.values[b.0].shape() != [o] {
                return Err(Error::Shape(format!("conv bias {:?} for {o} outputs", self.values[b.0].shape())));
            }
        }
        if pad == Padding::Reflect && (k / 2 >= h || k / 2 >= wd) {
            return Err(Error::Shape(format!("reflect pad of {k}x{k} kernel on {h}x{wd}")));
        }
        let hw = h * wd;
        let geo = ConvGeometry::new(c, h, wd, k, pad);
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let bv = b.map(|b| self.values[b.0].data());
        let mut out = vec![T::zero(); n * o * hw];
        out.par_chunks_mut(o * hw).enumerate().for_each(|(s, dst)| {
            let src = &xv[s * c * hw..(s + 1) * c * hw];
            let mut buf;
            let cols = if k == 1 {
                src
            } else {
                buf = vec![T::zero(); geo.col_rows() * hw];
                geo.im2col(src, &mut buf);
                &buf[..]
            };
            if let Some(bv) = bv {
                for (row, &bias) in dst.chunks_mut(hw).zip(bv) {
                    row.iter_mut().for_each(|v| *v = bias);
                }
            }
            let beta = if bv.is_some() { T::one() } else { T::zero() };
            matmul(o, geo.col_rows(), hw, wv, false, cols, false, beta, dst);
        });
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        let requires = self.req(&inputs);
        let value = Tensor::new(&[n, o, h, wd], out)?;
        self.push(value, Op::Conv { x: x.0, w: w.0, b: b.map(|b| b.0), pad }, requires, "conv2d")
    }

    /// `x W^T + b` for `x: N x F`, `W: G x F`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = self.values[x.0].dims2()?;
        let (g, f2) = self.values[w.0].dims2()?;
        if f != f2 {
            return Err(Error::Shape(format!(
                "linear weight {:?} for input {:?}",
                self.values[w.0].shape(),
                self.values[x.0].shape()
            )));
        }
        let mut out = vec![T::zero(); n * g];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = self.values[b.0].data();
            if bv.len() != g {
                return Err(Error::Shape(format!("linear bias of {} for {g} outputs", bv.len())));
            }
            for row in out.chunks_mut(g) {
                row.copy_from_slice(bv);
            }
            beta = T::one();
        }
        matmul(n, f, g, self.values[x.0].data(), false, self.values[w.0].data(), true, beta, &mut out);
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        let requires = self.req(&inputs);
        self.push(
            Tensor::new(&[n, g], out)?,
            Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) },
            requires,
            "linear",
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let xv = &self.values[x.0];
        let out = Tensor::new(
            xv.shape(),
            xv.data().iter().map(|&v| if v > T::zero() { v } else { v * s }).collect(),
        )?;
        let r = self.requires[x.0];
        self.push(out, Op::LeakyRelu { x: x.0, slope: s }, r, "leaky_relu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = &self.values[a.0];
        let data = av.data().iter().zip(self.values[b.0].data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let r = self.req(&[a.0, b.0]);
        self.push(out, Op::Add(a.0, b.0), r, "add")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let xv = &self.values[x.0];
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * c).collect())?;
        let r = self.requires[x.0];
        self.push(out, Op::Scale { x: x.0, c }, r, "scale")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.values[a.0].dims4()?;
        let (n2, cb, h2, w2) = self.values[b.0].dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            out.extend_from_slice(&av[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&bv[s * sb..(s + 1) * sb]);
        }
        let r = self.req(&[a.0, b.0]);
        self.push(Tensor::new(&[n, ca + cb, h, w], out)?, Op::Concat(a.0, b.0), r, "concat_channels")
    }

    /// `N x F` to `N x F x H x W` by copying each value over the grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, f) = self.values[x.0].dims2()?;
        let mut out = Vec::with_capacity(n * f * h * w);
        for &v in self.values[x.0].data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let r = self.requires[x.0];
        self.push(Tensor::new(&[n, f, h, w], out)?, Op::Broadcast { x: x.0 }, r, "broadcast_spatial")
    }

    /// `1 x F` to `n x F`.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let (one, f) = self.values[x.0].dims2()?;
        if one != 1 {
            return Err(Error::Shape(format!("repeat_batch expects 1 x F, got {one} x {f}")));
        }
        let row = self.values[x.0].data().to_vec();
        let out: Vec<T> = (0..n).flat_map(|_| row.iter().copied()).collect();
        let r = self.requires[x.0];
        self.push(Tensor::new(&[n, f], out)?, Op::RepeatBatch { x: x.0 }, r, "repeat_batch")
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, cr, h, w) = self.values[x.0].dims4()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::Shape(format!("pixel_shuffle({r}) of {cr} channels")));
        }
        let c = cr / (r * r);
        let per = cr * h * w;
        let xv = self.values[x.0].data();
        let mut out = vec![T::zero(); n * per];
        for s in 0..n {
            let (src, dst) = (&xv[s * per..(s + 1) * per], &mut out[s * per..(s + 1) * per]);
            for_each_shuffle(c, h, w, r, |i, o| dst[o] = src[i]);
        }
        let rq = self.requires[x.0];
        self.push(
            Tensor::new(&[n, c, h * r, w * r], out)?,
            Op::PixelShuffle { x: x.0, r },
            rq,
            "pixel_shuffle",
        )
    }

    /// 2x2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("avg_pool2 on {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.values[x.0].data();
        let q = T::of(0.25);
        let out = (0..n * c)
            .flat_map(|p| {
                let plane = &xv[p * h * w..(p + 1) * h * w];
                (0..oh * ow).map(move |i| {
                    let (y, xx) = (2 * (i / ow), 2 * (i % ow));
                    (plane[y * w + xx] + plane[y * w + xx + 1] + plane[(y + 1) * w + xx] + plane[(y + 1) * w + xx + 1])
                        * q
                })
            })
            .collect();
        let r = self.requires[x.0];
        self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::AvgPool2 { x: x.0 }, r, "avg_pool2")
    }

    /// `N x C x H x W` to `N x C` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out = self.values[x.0]
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let r = self.requires[x.0];
        self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool { x: x.0 }, r, "global_avg_pool")
    }

    /// Mean absolute error, shape `[1]`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let n = self.values[pred.0].len() as f64;
        let s: f64 = self.values[pred.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
            .map(|(&p, &t)| (p - t).abs().f64())
            .sum();
        let r = self.req(&[pred.0, target.0]);
        self.push(Tensor::scalar(T::of(s / n)), Op::L1 { p: pred.0, t: target.0 }, r, "l1_loss")
    }

    /// Mean squared error, shape `[1]`.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l2_loss")?;
        let n = self.values[pred.0].len() as f64;
        let s: f64 = self.values[pred.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
            .map(|(&p, &t)| {
                let d = (p - t).f64();
                d * d
            })
            .sum();
        let r = self.req(&[pred.0, target.0]);
        self.push(Tensor::scalar(T::of(s / n)), Op::L2 { p: pred.0, t: target.0 }, r, "l2_loss")
    }

    /// `sum_i x_i c_i`, shape `[1]`.
    pub fn dot_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.values[x.0].len() {
            return Err(Error::Shape(format!("dot of {} with {}", self.values[x.0].len(), c.len())));
        }
        let s = self.values[x.0].data().iter().zip(c).map(|(&a, &b)| a * b).sum();
        let r = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Dot { x: x.0, c: c.to_vec() }, r, "dot")
    }

    /// `x + conv2(relu(conv1(x)))` with weights `[w1, b1, w2, b2]`.
    pub fn residual_block(&mut self, x: Var, p: [Var; 4], pad: Padding) -> Result<Var> {
        let h = self.conv2d(x, p[0], Some(p[1]), pad)?;
        let h = self.relu(h)?;
        let h = self.conv2d(h, p[2], Some(p[3]), pad)?;
        self.add(x, h)
    }

    fn grad_buf(&mut self, i: usize) -> &mut Vec<T> {
        let n = self.values[i].len();
        self.grads[i].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn accumulate(&mut self, i: usize, g: impl IntoIterator<Item = T>) {
        if !self.requires[i] {
            return;
        }
        match &mut self.grads[i] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.into_iter().collect()),
        }
    }

    /// Back-propagates from a single-element node. Gradients accumulate into
    /// leaves across calls until the graph is dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape(format!("backward from {:?}", self.values[loss.0].shape())));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grad_buf(loss.0)[0] += T::one();
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = self.ops[i].clone();
            self.backward_op(&op, &g)?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>, g: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv { x, w, b, pad } => self.conv_backward(x, w, b, pad, g)?,
            Op::Linear { x, w, b } => {
                let (n, f) = self.values[x].dims2()?;
                let gdim = self.values[w].dims2()?.0;
                if self.requires[x] {
                    let mut dx = vec![T::zero(); n * f];
                    matmul(n, gdim, f, g, false, self.values[w].data(), false, T::zero(), &mut dx);
                    self.accumulate(x, dx);
                }
                if self.requires[w] {
                    let mut dw = vec![T::zero(); gdim * f];
                    matmul(gdim, n, f, g, true, self.values[x].data(), false, T::zero(), &mut dw);
                    self.accumulate(w, dw);
                }
                if let Some(b) = b {
                    let db: Vec<T> = (0..gdim).map(|j| (0..n).map(|s| g[s * gdim + j]).sum()).collect();
                    self.accumulate(b, db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let d: Vec<T> = self.values[x]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * slope })
                    .collect();
                self.accumulate(x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().copied());
            }
            Op::Scale { x, c } => self.accumulate(x, g.iter().map(|&v| v * c)),
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.values[a].dims4()?;
                let cb = self.values[b].dims4()?.1;
                let (sa, sb) = (ca * h * w, cb * h * w);
                let ga: Vec<T> = (0..n).flat_map(|s| g[s * (sa + sb)..s * (sa + sb) + sa].iter().copied()).collect();
                let gb: Vec<T> =
                    (0..n).flat_map(|s| g[s * (sa + sb) + sa..(s + 1) * (sa + sb)].iter().copied()).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Broadcast { x } => {
                let (n, f) = self.values[x].dims2()?;
                let hw = g.len() / (n * f);
                self.accumulate(x, g.chunks(hw).map(|c| c.iter().copied().sum::<T>()));
            }
            Op::RepeatBatch { x } => {
                let f = self.values[x].len();
                let d: Vec<T> = (0..f).map(|j| g.iter().skip(j).step_by(f).copied().sum()).collect();
                self.accumulate(x, d);
            }
            Op::PixelShuffle { x, r } => {
                let (n, cr, h, w) = self.values[x].dims4()?;
                let per = cr * h * w;
                let mut d = vec![T::zero(); n * per];
                for s in 0..n {
                    let (ds, gs) = (&mut d[s * per..(s + 1) * per], &g[s * per..(s + 1) * per]);
                    for_each_shuffle(cr / (r * r), h, w, r, |src, dst| ds[src] = gs[dst]);
                }
                self.accumulate(x, d);
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.values[x].dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let q = T::of(0.25);
                let d: Vec<T> = (0..n * c * h * w)
                    .map(|idx| {
                        let p = idx / (h * w);
                        let (y, xx) = ((idx % (h * w)) / w, idx % w);
                        g[(p * oh + y / 2) * ow + xx / 2] * q
                    })
                    .collect();
                self.accumulate(x, d);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.values[x].dims4()?;
                let inv = T::of(1.0 / (h * w) as f64);
                let d: Vec<T> = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, h * w)).collect();
                self.accumulate(x, d);
            }
            Op::L1 { p, t } => {
                let n = T::of(self.values[p].len() as f64);
                let d: Vec<T> = self.values[p]
                    .data()
                    .iter()
                    .zip(self.values[t].data())
                    .map(|(&a, &b)| {
                        let s = if a > b {
                            T::one()
                        } else if a < b {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s * g[0] / n
                    })
                    .collect();
                self.accumulate(t, d.iter().map(|&v| -v));
                self.accumulate(p, d);
            }
            Op::L2 { p, t } => {
                let n = T::of(self.values[p].len() as f64);
                let two = T::of(2.0);
                let d: Vec<T> = self.values[p]
                    .data()
                    .iter()
                    .zip(self.values[t].data())
                    .map(|(&a, &b)| two * (a - b) * g[0] / n)
                    .collect();
                self.accumulate(t, d.iter().map(|&v| -v));
                self.accumulate(p, d);
            }
            Op::Dot { x, ref c } => {
                let d: Vec<T> = c.iter().map(|&v| v * g[0]).collect();
                self.accumulate(x, d);
            }
        }
        Ok(())
    }

    fn conv_backward(&mut self, x: usize, w: usize, b: Option<usize>, pad: Padding, g: &[T]) -> Result<()> {
        let (n, c, h, wd) = self.values[x].dims4()?;
        let (o, _, k, _) = self.values[w].dims4()?;
        let hw = h * wd;
        let geo = ConvGeometry::new(c, h, wd, k, pad);
        let rows = geo.col_rows();
        let (need_x, need_w) = (self.requires[x], self.requires[w]);
        let need_b = b.is_some_and(|b| self.requires[b]);

        if need_x {
            let wv = self.values[w].data().to_vec();
            let mut dx = std::mem::take(self.grad_buf(x));
            dx.par_chunks_mut(c * hw).enumerate().for_each(|(s, dxs)| {
                let gs = &g[s * o * hw..(s + 1) * o * hw];
                if k == 1 {
                    matmul(rows, o, hw, &wv, true, gs, false, T::one(), dxs);
                } else {
                    let mut dcols = vec![T::zero(); rows * hw];
                    matmul(rows, o, hw, &wv, true, gs, false, T::zero(), &mut dcols);
                    geo.col2im(&dcols, dxs);
                }
            });
            self.grads[x] = Some(dx);
        }

        if need_w || need_b {
            let xv = self.values[x].data();
            let partial: Vec<(Vec<T>, Vec<T>)> = (0..n)
                .into_par_iter()
                .map(|s| {
                    let gs = &g[s * o * hw..(s + 1) * o * hw];
                    let mut dw = Vec::new();
                    if need_w {
                        dw = vec![T::zero(); o * rows];
                        let src = &xv[s * c * hw..(s + 1) * c * hw];
                        if k == 1 {
                            matmul(o, hw, rows, gs, false, src, true, T::zero(), &mut dw);
                        } else {
                            let mut cols = vec![T::zero(); rows * hw];
                            geo.im2col(src, &mut cols);
                            matmul(o, hw, rows, gs, false, &cols, true, T::zero(), &mut dw);
                        }
                    }
                    let db = if need_b {
                        gs.chunks(hw).map(|r| r.iter().copied().sum()).collect()
                    } else {
                        Vec::new()
                    };
                    (dw, db)
                })
                .collect();
            let fault = if self.fault { T::of(1.1) } else { T::one() };
            if need_w {
                let mut dw = vec![T::zero(); o * rows];
                for (p, _) in &partial {
                    dw.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
                }
                self.accumulate(w, dw.into_iter().map(|v| v * fault));
            }
            if let (Some(b), true) = (b, need_b) {
                let mut db = vec![T::zero(); o];
                for (_, p) in &partial {
                    db.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
                }
                self.accumulate(b, db);
            }
        }
        Ok(())
    }
}
