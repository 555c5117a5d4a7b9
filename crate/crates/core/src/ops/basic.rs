//! Elementwise math, broadcasts, reductions, and shape ops.

use crate::graph::{BackwardOp, Graph, ValId};
use crate::tensor::{numel, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct ElemBinary {
    kind: BinKind,
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

impl BackwardOp for ElemBinary {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| match self.kind {
            BinKind::Add | BinKind::Sub => grad.clone(),
            BinKind::Mul => Tensor::new(
                grad.shape(),
                grad.data().iter().zip(b.data()).map(|(g, y)| g * y).collect(),
            ),
        });
        let gb = needs[1].then(|| match self.kind {
            BinKind::Add => grad.clone(),
            BinKind::Sub => grad.map(|g| -g),
            BinKind::Mul => Tensor::new(
                grad.shape(),
                grad.data().iter().zip(a.data()).map(|(g, x)| g * x).collect(),
            ),
        });
        vec![ga, gb]
    }
}

struct ElemUnary {
    kind: UnKind,
}

#[derive(Clone, Copy)]
enum UnKind {
    Neg,
    Scale(f64),
    Shift(f64),
    Silu,
    Relu,
    Softplus,
    Exp,
    Abs,
}

impl BackwardOp for ElemUnary {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d: Vec<f64> = match self.kind {
            UnKind::Neg => grad.data().iter().map(|g| -g).collect(),
            UnKind::Scale(c) => grad.data().iter().map(|g| g * c).collect(),
            UnKind::Shift(_) => grad.data().to_vec(),
            UnKind::Silu => grad
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| {
                    let s = sigmoid(v);
                    g * (s * (1.0 + v * (1.0 - s)))
                })
                .collect(),
            UnKind::Relu => grad
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
            UnKind::Softplus => grad
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| g * sigmoid(v))
                .collect(),
            UnKind::Exp => grad
                .data()
                .iter()
                .zip(output.data())
                .map(|(g, y)| g * y)
                .collect(),
            UnKind::Abs => grad
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| g * v.signum() * if v == 0.0 { 0.0 } else { 1.0 })
                .collect(),
        };
        vec![Some(Tensor::new(grad.shape(), d))]
    }
}

struct AddBias {
    axis: usize,
}

impl BackwardOp for AddBias {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let ga = needs[0].then(|| grad.clone());
        let gb = needs[1].then(|| {
            let n = x.shape()[self.axis];
            let mut acc = vec![0.0; n];
            for_each_axis_index(x.shape(), self.axis, |flat, j| {
                acc[j] += grad.data()[flat];
            });
            Tensor::from_vec(acc)
        });
        vec![ga, gb]
    }
}

struct MulVecAxis {
    axis: usize,
}

impl BackwardOp for MulVecAxis {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, v) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let mut d = vec![0.0; x.len()];
            for_each_axis_index(x.shape(), self.axis, |flat, j| {
                d[flat] = grad.data()[flat] * v.data()[j];
            });
            Tensor::new(x.shape(), d)
        });
        let gb = needs[1].then(|| {
            let mut acc = vec![0.0; v.len()];
            for_each_axis_index(x.shape(), self.axis, |flat, j| {
                acc[j] += grad.data()[flat] * x.data()[flat];
            });
            Tensor::from_vec(acc)
        });
        vec![ga, gb]
    }
}

struct BroadcastVec;

impl BackwardOp for BroadcastVec {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let v = inputs[0];
        let n = v.len();
        let mut acc = vec![0.0; n];
        for (i, g) in grad.data().iter().enumerate() {
            acc[i % n] += g;
        }
        vec![Some(Tensor::new(v.shape(), acc))]
    }
}

struct AddBcastTrailing;

impl BackwardOp for AddBcastTrailing {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let y = inputs[1];
        let ga = needs[0].then(|| grad.clone());
        let gb = needs[1].then(|| {
            let n = y.len();
            let mut acc = vec![0.0; n];
            for (i, g) in grad.data().iter().enumerate() {
                acc[i % n] += g;
            }
            Tensor::new(y.shape(), acc)
        });
        vec![ga, gb]
    }
}

struct SumAll {
    mean: bool,
}

impl BackwardOp for SumAll {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let g = grad.item() * if self.mean { 1.0 / x.len() as f64 } else { 1.0 };
        vec![Some(Tensor::full(x.shape(), g))]
    }
}

struct MeanAxis {
    axis: usize,
}

impl BackwardOp for MeanAxis {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let n = x.shape()[self.axis] as f64;
        let mut d = vec![0.0; x.len()];
        for_each_axis_reduce(x.shape(), self.axis, |flat, out_flat| {
            d[flat] = grad.data()[out_flat] / n;
        });
        vec![Some(Tensor::new(x.shape(), d))]
    }
}

struct Reshape {
    from: Vec<usize>,
}

impl BackwardOp for Reshape {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::new(&self.from, grad.data().to_vec()))]
    }
}

struct Permute {
    perm: Vec<usize>,
}

impl BackwardOp for Permute {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        vec![Some(permute_tensor(grad, &inv).0.reshaped(inputs[0].shape()))]
    }
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}

impl BackwardOp for Concat {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for (i, &sz) in self.sizes.iter().enumerate() {
            out.push(
                needs[i].then(|| slice_axis(grad, self.axis, start, sz)),
            );
            start += sz;
        }
        out
    }
}

struct SliceAxis {
    axis: usize,
    start: usize,
}

impl BackwardOp for SliceAxis {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut d = Tensor::zeros(x.shape());
        scatter_axis(&mut d, grad, self.axis, self.start);
        let _ = output;
        vec![Some(d)]
    }
}

struct PadEdgeRight {
    extra: usize,
}

impl BackwardOp for PadEdgeRight {
    // last axis; padded tail replicates the final sample
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let t = *x.shape().last().unwrap();
        let tp = t + self.extra;
        let rows = x.len() / t;
        let mut d = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..tp {
                let src = r * tp + j;
                let dst = r * t + j.min(t - 1);
                d[dst] += grad.data()[src];
            }
        }
        vec![Some(Tensor::new(x.shape(), d))]
    }
}

/// Visit every flat index of `shape` together with its coordinate along `axis`.
fn for_each_axis_index(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    for flat in 0..n {
        let j = (flat / inner) % axis_len;
        f(flat, j);
    }
}

/// Visit every flat index together with the flat index of the axis-reduced output.
fn for_each_axis_reduce(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for j in 0..axis_len {
            for i in 0..inner {
                let flat = (o * axis_len + j) * inner + i;
                let out_flat = o * inner + i;
                f(flat, out_flat);
            }
        }
    }
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> (Tensor, Vec<usize>) {
    assert_eq!(perm.len(), x.ndim());
    let old_shape = x.shape();
    let new_shape: Vec<usize> = perm.iter().map(|&p| old_shape[p]).collect();
    let old_strides = x.strides();
    let mut data = vec![0.0; x.len()];
    let n = x.len();
    let mut new_strides = vec![1usize; perm.len()];
    for i in (0..perm.len().saturating_sub(1)).rev() {
        new_strides[i] = new_strides[i + 1] * new_shape[i + 1];
    }
    for (flat, item) in data.iter_mut().enumerate().take(n) {
        // decode new index, map through perm to old flat offset
        let mut rem = flat;
        let mut old_off = 0;
        for d in 0..perm.len() {
            let idx = rem / new_strides[d];
            rem %= new_strides[d];
            old_off += idx * old_strides[perm[d]];
        }
        *item = x.data()[old_off];
    }
    (Tensor::new(&new_shape, data), new_shape)
}

pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    assert!(start + len <= shape[axis], "slice out of range");
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut new_shape = shape.to_vec();
    new_shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&new_shape));
    for o in 0..outer {
        for j in start..start + len {
            let base = (o * shape[axis] + j) * inner;
            data.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    Tensor::new(&new_shape, data)
}

fn scatter_axis(dst: &mut Tensor, src: &Tensor, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let len = src.shape()[axis];
    let mut k = 0;
    for o in 0..outer {
        for j in start..start + len {
            let base = (o * shape[axis] + j) * inner;
            dst.data_mut()[base..base + inner].copy_from_slice(&src.data()[k..k + inner]);
            k += inner;
        }
    }
}

impl Graph {
    fn binary(&mut self, a: ValId, b: ValId, kind: BinKind) -> ValId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.shape(),
            y.shape(),
            "elementwise op shape mismatch {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
        let data: Vec<f64> = match kind {
            BinKind::Add => x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
            BinKind::Sub => x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect(),
            BinKind::Mul => x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        };
        let v = Tensor::new(x.shape(), data);
        self.record(v, vec![a, b], Box::new(ElemBinary { kind }))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> ValId {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> ValId {
        self.binary(a, b, BinKind::Mul)
    }

    fn unary(&mut self, a: ValId, kind: UnKind) -> ValId {
        let x = self.value(a);
        let data: Vec<f64> = match kind {
            UnKind::Neg => x.data().iter().map(|v| -v).collect(),
            UnKind::Scale(c) => x.data().iter().map(|v| v * c).collect(),
            UnKind::Shift(c) => x.data().iter().map(|v| v + c).collect(),
            UnKind::Silu => x.data().iter().map(|&v| v * sigmoid(v)).collect(),
            UnKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            UnKind::Softplus => x.data().iter().map(|&v| softplus(v)).collect(),
            UnKind::Exp => x.data().iter().map(|&v| v.exp()).collect(),
            UnKind::Abs => x.data().iter().map(|&v| v.abs()).collect(),
        };
        let v = Tensor::new(x.shape(), data);
        self.record(v, vec![a], Box::new(ElemUnary { kind }))
    }

    pub fn neg(&mut self, a: ValId) -> ValId {
        self.unary(a, UnKind::Neg)
    }

    pub fn scale(&mut self, a: ValId, c: f64) -> ValId {
        self.unary(a, UnKind::Scale(c))
    }

    pub fn shift(&mut self, a: ValId, c: f64) -> ValId {
        self.unary(a, UnKind::Shift(c))
    }

    pub fn silu(&mut self, a: ValId) -> ValId {
        self.unary(a, UnKind::Silu)
    }

    pub fn relu(&mut self, a: ValId) -> ValId {
        self.unary(a, UnKind::Relu)
    }

    pub fn softplus(&mut self, a: ValId) -> ValId {
        self.unary(a, UnKind::Softplus)
    }

    pub fn exp(&mut self, a: ValId) -> ValId {
        self.unary(a, UnKind::Exp)
    }

    pub fn abs(&mut self, a: ValId) -> ValId {
        self.unary(a, UnKind::Abs)
    }

    pub fn square(&mut self, a: ValId) -> ValId {
        self.mul(a, a)
    }

    /// x + b with b broadcast along every axis except `axis`.
    pub fn add_bias(&mut self, x: ValId, b: ValId, axis: usize) -> ValId {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.ndim(), 1);
        assert_eq!(xv.shape()[axis], bv.len(), "bias length mismatch");
        let mut data = xv.data().to_vec();
        for_each_axis_index(xv.shape(), axis, |flat, j| {
            data[flat] += bv.data()[j];
        });
        let v = Tensor::new(xv.shape(), data);
        self.record(v, vec![x, b], Box::new(AddBias { axis }))
    }

    /// x * v with v broadcast along every axis except `axis`.
    pub fn mul_vec_axis(&mut self, x: ValId, v: ValId, axis: usize) -> ValId {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!(vv.ndim(), 1);
        assert_eq!(xv.shape()[axis], vv.len(), "vector length mismatch");
        let mut data = xv.data().to_vec();
        for_each_axis_index(xv.shape(), axis, |flat, j| {
            data[flat] *= vv.data()[j];
        });
        let out = Tensor::new(xv.shape(), data);
        self.record(out, vec![x, v], Box::new(MulVecAxis { axis }))
    }

    /// Tile a vector v[n] to shape [lead..., n].
    pub fn broadcast_vec(&mut self, v: ValId, lead: &[usize]) -> ValId {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 1);
        let n = vv.len();
        let reps = numel(lead);
        let mut shape = lead.to_vec();
        shape.push(n);
        let mut data = Vec::with_capacity(reps * n);
        for _ in 0..reps {
            data.extend_from_slice(vv.data());
        }
        let out = Tensor::new(&shape, data);
        self.record(out, vec![v], Box::new(BroadcastVec))
    }

    /// x + y where y's shape equals x's trailing dims (broadcast over leading).
    pub fn add_bcast(&mut self, x: ValId, y: ValId) -> ValId {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(
            &xv.shape()[xv.ndim() - yv.ndim()..],
            yv.shape(),
            "trailing-broadcast shape mismatch"
        );
        let n = yv.len();
        let data: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv.data()[i % n])
            .collect();
        let out = Tensor::new(xv.shape(), data);
        self.record(out, vec![x, y], Box::new(AddBcastTrailing))
    }

    pub fn sum_all(&mut self, a: ValId) -> ValId {
        let s: f64 = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), vec![a], Box::new(SumAll { mean: false }))
    }

    pub fn mean_all(&mut self, a: ValId) -> ValId {
        let x = self.value(a);
        let s: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        self.record(Tensor::scalar(s), vec![a], Box::new(SumAll { mean: true }))
    }

    pub fn mean_axis(&mut self, a: ValId, axis: usize) -> ValId {
        let x = self.value(a);
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; numel(&out_shape)];
        for_each_axis_reduce(x.shape(), axis, |flat, out_flat| {
            data[out_flat] += x.data()[flat];
        });
        let n = x.shape()[axis] as f64;
        for v in &mut data {
            *v /= n;
        }
        let out = Tensor::new(&out_shape, data);
        self.record(out, vec![a], Box::new(MeanAxis { axis }))
    }

    pub fn reshape(&mut self, a: ValId, shape: &[usize]) -> ValId {
        let x = self.value(a);
        let from = x.shape().to_vec();
        let v = x.reshaped(shape);
        self.record(v, vec![a], Box::new(Reshape { from }))
    }

    pub fn permute(&mut self, a: ValId, perm: &[usize]) -> ValId {
        let (v, _) = permute_tensor(self.value(a), perm);
        self.record(v, vec![a], Box::new(Permute { perm: perm.to_vec() }))
    }

    /// Transpose the last two axes.
    pub fn transpose(&mut self, a: ValId) -> ValId {
        let nd = self.value(a).ndim();
        assert!(nd >= 2);
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[ValId], axis: usize) -> ValId {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len());
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dims must match");
                }
            }
            sizes.push(s[axis]);
        }
        let mut out_shape = first.clone();
        out_shape[axis] = sizes.iter().sum();
        let mut out = Tensor::zeros(&out_shape);
        let mut start = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let v = self.value(p).clone();
            scatter_axis(&mut out, &v, axis, start);
            start += sz;
        }
        self.record(out, parts.to_vec(), Box::new(Concat { axis, sizes }))
    }

    pub fn slice(&mut self, a: ValId, axis: usize, start: usize, len: usize) -> ValId {
        let v = slice_axis(self.value(a), axis, start, len);
        self.record(v, vec![a], Box::new(SliceAxis { axis, start }))
    }

    /// Right-pad the last axis by `extra` samples, replicating the edge value.
    pub fn pad_edge_right(&mut self, a: ValId, extra: usize) -> ValId {
        if extra == 0 {
            return a;
        }
        let x = self.value(a);
        let t = *x.shape().last().unwrap();
        assert!(t >= 1);
        let rows = x.len() / t;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = t + extra;
        let mut data = Vec::with_capacity(rows * (t + extra));
        for r in 0..rows {
            let row = &x.data()[r * t..(r + 1) * t];
            data.extend_from_slice(row);
            for _ in 0..extra {
                data.push(row[t - 1]);
            }
        }
        let out = Tensor::new(&shape, data);
        self.record(out, vec![a], Box::new(PadEdgeRight { extra }))
    }
}
