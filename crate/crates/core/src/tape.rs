//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and the ids of its inputs. Node ids are assigned in execution order, so
//! walking them from last to first is a reverse topological sweep.

use std::collections::HashMap;

use crate::error::{shape_mismatch, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{broadcast_index_map, ops, PoolMode, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    PoolSpatial {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    PoolChannel {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulBroadcast(Var, Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Spp {
        input: Var,
        levels: Vec<usize>,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    NormalizeScale {
        input: Var,
        alpha: T,
        norm: T,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter gradients produced by one backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor<T>)> {
        self.entries.iter()
    }

    /// Adds every gradient into the matching `Parameter::grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.entries {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    backward_order: Vec<usize>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
            backward_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Node ids in the order the last backward sweep visited them.
    pub fn backward_order(&self) -> &[usize] {
        &self.backward_order
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Records a trainable parameter. Repeated calls for the same id share
    /// one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, padding }, &inputs))
    }

    pub fn pool_spatial(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        let hw = h * w;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for plane in x.data().chunks_exact(hw) {
            let (v, k) = ops::reduce(plane.iter().copied(), hw, mode);
            out.push(v);
            argmax.push(k);
        }
        Ok(self.push(Tensor::from_vec(out), Op::PoolSpatial { input, mode, argmax }, &[input]))
    }

    pub fn pool_channel(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        let hw = h * w;
        let data = x.data();
        let mut out = Vec::with_capacity(hw);
        let mut argmax = Vec::with_capacity(hw);
        for p in 0..hw {
            let (v, k) = ops::reduce((0..c).map(|ch| data[ch * hw + p]), c, mode);
            out.push(v);
            argmax.push(k);
        }
        let out = Tensor::new(vec![1, h, w], out)?;
        Ok(self.push(out, Op::PoolChannel { input, mode, argmax }, &[input]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `w2·relu(w1·x + b1) + b2`.
    pub fn mlp2(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let hidden = self.linear(x, w1, b1)?;
        let hidden = self.relu(hidden);
        self.linear(hidden, w2, b2)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul_broadcast(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MulBroadcast(a, b), &[a, b]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn spp(&mut self, input: Var, levels: &[usize], mode: PoolMode) -> Result<Var> {
        let (out, argmax) = ops::spp_with_argmax(self.value(input), levels, mode)?;
        let op = Op::Spp {
            input,
            levels: levels.to_vec(),
            mode,
            argmax,
        };
        Ok(self.push(out, op, &[input]))
    }

    pub fn normalize_scale(&mut self, input: Var, alpha: T) -> Result<Var> {
        let out = ops::normalize_scale(self.value(input), alpha)?;
        let norm = self.value(input).norm();
        Ok(self.push(out, Op::NormalizeScale { input, alpha, norm }, &[input]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, Tensor::ones(self.value(loss).shape()))
    }

    /// Backpropagates and adds the result into the parameters' gradients.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    /// Backpropagates a given upstream gradient `seed` from `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(shape_mismatch("backward seed", self.value(output).shape(), seed.shape()));
        }
        self.consumed = true;
        self.backward_order.clear();

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_order.push(i);
            if let Op::Param(id) = self.nodes[i].op {
                result.entries.push((id, g));
                continue;
            }
            for (var, dg) in self.local_grads(i, &g)? {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        result.entries.sort_by_key(|(id, _)| *id);
        Ok(result)
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        Ok(match &node.op {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::Conv2d { input, weight, bias, padding } => {
                let (dx, dw) = conv2d_backward(self.value(*input), self.value(*weight), g, *padding)?;
                let mut out = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    let (cout, h, w) = g.dims3()?;
                    let db = (0..cout).map(|c| gd[c * h * w..(c + 1) * h * w].iter().copied().sum()).collect();
                    out.push((*b, Tensor::from_vec(db)));
                }
                out
            }
            Op::PoolSpatial { input, mode, argmax } => {
                let x = self.value(*input);
                let (c, h, w) = x.dims3()?;
                let hw = h * w;
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for ch in 0..c {
                    match mode {
                        PoolMode::Avg => {
                            let v = gd[ch] / T::lit(hw as f64);
                            d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|e| *e = v);
                        }
                        PoolMode::Max => d[ch * hw + argmax[ch]] = gd[ch],
                    }
                }
                vec![(*input, dx)]
            }
            Op::PoolChannel { input, mode, argmax } => {
                let x = self.value(*input);
                let (c, h, w) = x.dims3()?;
                let hw = h * w;
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for p in 0..hw {
                    match mode {
                        PoolMode::Avg => {
                            let v = gd[p] / T::lit(c as f64);
                            for ch in 0..c {
                                d[ch * hw + p] = v;
                            }
                        }
                        PoolMode::Max => d[argmax[p] * hw + p] = gd[p],
                    }
                }
                vec![(*input, dx)]
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.len();
                let mut dx = vec![T::zero(); n];
                let mut dw = vec![T::zero(); wv.len()];
                for (r, (&gr, row)) in gd.iter().zip(wv.data().chunks_exact(n)).enumerate() {
                    for j in 0..n {
                        dx[j] = dx[j] + row[j] * gr;
                        dw[r * n + j] = gr * xv.data()[j];
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), dx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), dw)?),
                    (*b, g.clone()),
                ]
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gg)| gg * s * (T::one() - s))
                    .collect();
                vec![(*x, Tensor::new(y.shape().to_vec(), d)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::MulBroadcast(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ia = broadcast_index_map(av.shape(), g.shape());
                let ib = broadcast_index_map(bv.shape(), g.shape());
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for (k, &gg) in gd.iter().enumerate() {
                    da.data_mut()[ia[k]] = da.data()[ia[k]] + gg * bv.data()[ib[k]];
                    db.data_mut()[ib[k]] = db.data()[ib[k]] + gg * av.data()[ia[k]];
                }
                vec![(*a, da), (*b, db)]
            }
            Op::ConcatChannels(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let split = av.len();
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), gd[..split].to_vec())?),
                    (*b, Tensor::new(bv.shape().to_vec(), gd[split..].to_vec())?),
                ]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.value(*x).shape())?)],
            Op::Spp { input, levels, mode, argmax } => {
                let x = self.value(*input);
                let mut dx = Tensor::zeros(x.shape());
                match mode {
                    PoolMode::Max => {
                        let d = dx.data_mut();
                        for (k, &src) in argmax.iter().enumerate() {
                            d[src] = d[src] + gd[k];
                        }
                    }
                    PoolMode::Avg => spp_avg_backward(x, levels, gd, dx.data_mut())?,
                }
                vec![(*input, dx)]
            }
            Op::NormalizeScale { input, alpha, norm } => {
                // y = a·v/|v|  =>  dv = (a/|v|)·(g − u·(u·g)), u = v/|v|
                let v = self.value(*input);
                let u: Vec<T> = v.data().iter().map(|&e| e / *norm).collect();
                let ug: T = u.iter().zip(gd).map(|(&a, &b)| a * b).sum();
                let s = *alpha / *norm;
                let d = u.iter().zip(gd).map(|(&ui, &gi)| s * (gi - ui * ug)).collect();
                vec![(*input, Tensor::new(v.shape().to_vec(), d)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), gd[0]))],
        })
    }
}

fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cin, h, w) = input.dims3()?;
    let cout = weight.shape()[0];
    let k = weight.shape()[2];
    let x = input.data();
    let wt = weight.data();
    let gd = g.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wt.len()];
    for co in 0..cout {
        let gplane = &gd[co * h * w..(co + 1) * h * w];
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let base = (co * cin + ci) * k * k;
            for ky in 0..k {
                let y0 = padding.saturating_sub(ky);
                let y1 = (h + padding).saturating_sub(ky).min(h);
                for kx in 0..k {
                    let x0 = padding.saturating_sub(kx);
                    let x1 = (w + padding).saturating_sub(kx).min(w);
                    let wv = wt[base + ky * k + kx];
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy + ky - padding;
                        for ox in x0..x1 {
                            let ix = ox + kx - padding;
                            let gv = gplane[oy * w + ox];
                            acc = acc + gv * xin[iy * w + ix];
                            let di = ci * h * w + iy * w + ix;
                            dx[di] = dx[di] + wv * gv;
                        }
                    }
                    dw[base + ky * k + kx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
    ))
}

fn spp_avg_backward<T: Real>(x: &Tensor<T>, levels: &[usize], gd: &[T], dx: &mut [T]) -> Result<()> {
    let (c, h, w) = x.dims3()?;
    let mut k = 0;
    for &n in levels {
        for by in 0..n {
            let (y0, y1) = ops::bin_bounds(by, n, h);
            for bx in 0..n {
                let (x0, x1) = ops::bin_bounds(bx, n, w);
                let count = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for ch in 0..c {
                    let share = gd[k] / count;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let i = ch * h * w + yy * w + xx;
                            dx[i] = dx[i] + share;
                        }
                    }
                    k += 1;
                }
            }
        }
    }
    Ok(())
}
