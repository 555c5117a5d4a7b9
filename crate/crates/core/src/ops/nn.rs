//! Neural-net layers: convolutions, pooling, resampling, normalization,
//! softmax, and classification loss.

use crate::graph::{BackwardOp, Graph, ValId};
use crate::tensor::Tensor;

fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> usize {
    assert!(t + 2 * padding >= k, "conv window larger than padded input");
    (t + 2 * padding - k) / stride + 1
}

struct Conv1d {
    stride: usize,
    padding: usize,
}

impl BackwardOp for Conv1d {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let to = grad.shape()[2];
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            for co in 0..cout {
                for ot in 0..to {
                    let g = grad.data()[(bi * cout + co) * to + ot];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        for kk in 0..k {
                            let it = ot * self.stride + kk;
                            if it < self.padding || it - self.padding >= t {
                                continue;
                            }
                            let xi = (bi * cin + ci) * t + it - self.padding;
                            let wi = (co * cin + ci) * k + kk;
                            if let Some(gx) = gx.as_mut() {
                                gx[xi] += g * w.data()[wi];
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wi] += g * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape(), d)),
            gw.map(|d| Tensor::new(w.shape(), d)),
        ]
    }
}

struct DwConv1d;

impl BackwardOp for DwConv1d {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[1];
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ot in 0..t {
                    let g = grad.data()[base + ot];
                    if g == 0.0 {
                        continue;
                    }
                    for kk in 0..k {
                        // causal: tap kk reads sample ot + kk - (k-1)
                        let it = ot + kk;
                        if it < k - 1 {
                            continue;
                        }
                        let xi = base + it - (k - 1);
                        if let Some(gx) = gx.as_mut() {
                            gx[xi] += g * w.data()[ci * k + kk];
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[ci * k + kk] += g * x.data()[xi];
                        }
                    }
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape(), d)),
            gw.map(|d| Tensor::new(w.shape(), d)),
        ]
    }
}

struct MaxPool1d {
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPool1d {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut d = vec![0.0; inputs[0].len()];
        for (g, &src) in grad.data().iter().zip(&self.argmax) {
            d[src] += g;
        }
        vec![Some(Tensor::new(inputs[0].shape(), d))]
    }
}

struct UpsampleLinear {
    factor: usize,
}

impl BackwardOp for UpsampleLinear {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let t = *x.shape().last().unwrap();
        let to = t * self.factor;
        let rows = x.len() / t;
        let mut d = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..to {
                let g = grad.data()[r * to + j];
                let pos = j as f64 / self.factor as f64;
                let i0 = pos.floor() as usize;
                if i0 + 1 >= t {
                    d[r * t + (t - 1).min(i0)] += g;
                } else {
                    let frac = pos - i0 as f64;
                    d[r * t + i0] += g * (1.0 - frac);
                    d[r * t + i0 + 1] += g * frac;
                }
            }
        }
        vec![Some(Tensor::new(x.shape(), d))]
    }
}

struct Softmax {
    axis: usize,
}

impl BackwardOp for Softmax {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let axis_len = shape[self.axis];
        let outer: usize = shape[..self.axis].iter().product();
        let mut d = vec![0.0; inputs[0].len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut dot = 0.0;
                for j in 0..axis_len {
                    let f = (o * axis_len + j) * inner + i;
                    dot += grad.data()[f] * output.data()[f];
                }
                for j in 0..axis_len {
                    let f = (o * axis_len + j) * inner + i;
                    d[f] = output.data()[f] * (grad.data()[f] - dot);
                }
            }
        }
        vec![Some(Tensor::new(shape, d))]
    }
}

struct GroupNorm {
    groups: usize,
    eps: f64,
}

impl BackwardOp for GroupNorm {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cg = c / self.groups;
        let n = (cg * t) as f64;
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut ggamma = needs[1].then(|| vec![0.0; c]);
        let mut gbeta = needs[2].then(|| vec![0.0; c]);
        for bi in 0..b {
            for g in 0..self.groups {
                let mut mean = 0.0;
                let mut var = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    for ti in 0..t {
                        mean += x.data()[(bi * c + ci) * t + ti];
                    }
                }
                mean /= n;
                for ci in g * cg..(g + 1) * cg {
                    for ti in 0..t {
                        let d = x.data()[(bi * c + ci) * t + ti] - mean;
                        var += d * d;
                    }
                }
                var /= n;
                let s = (var + self.eps).sqrt();
                // ghat = gamma * grad; gx = (ghat - mean(ghat) - xhat*mean(ghat*xhat)) / s
                let mut sum_gh = 0.0;
                let mut sum_gh_xh = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    for ti in 0..t {
                        let f = (bi * c + ci) * t + ti;
                        let xh = (x.data()[f] - mean) / s;
                        let gh = gamma.data()[ci] * grad.data()[f];
                        sum_gh += gh;
                        sum_gh_xh += gh * xh;
                        if let Some(gg) = ggamma.as_mut() {
                            gg[ci] += grad.data()[f] * xh;
                        }
                        if let Some(gb) = gbeta.as_mut() {
                            gb[ci] += grad.data()[f];
                        }
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    for ci in g * cg..(g + 1) * cg {
                        for ti in 0..t {
                            let f = (bi * c + ci) * t + ti;
                            let xh = (x.data()[f] - mean) / s;
                            let gh = gamma.data()[ci] * grad.data()[f];
                            gx[f] = (gh - sum_gh / n - xh * sum_gh_xh / n) / s;
                        }
                    }
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape(), d)),
            ggamma.map(Tensor::from_vec),
            gbeta.map(Tensor::from_vec),
        ]
    }
}

struct RmsNorm {
    eps: f64,
}

impl BackwardOp for RmsNorm {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, scale) = (inputs[0], inputs[1]);
        let d = *x.shape().last().unwrap();
        let rows = x.len() / d;
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gs = needs[1].then(|| vec![0.0; d]);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let rms = (ms + self.eps).sqrt();
            let mut dot = 0.0;
            for j in 0..d {
                let gh = scale.data()[j] * grad.data()[r * d + j];
                dot += gh * row[j];
                if let Some(gs) = gs.as_mut() {
                    gs[j] += grad.data()[r * d + j] * row[j] / rms;
                }
            }
            if let Some(gx) = gx.as_mut() {
                for j in 0..d {
                    let gh = scale.data()[j] * grad.data()[r * d + j];
                    gx[r * d + j] = gh / rms - row[j] * dot / (d as f64 * rms.powi(3));
                }
            }
        }
        vec![
            gx.map(|v| Tensor::new(x.shape(), v)),
            gs.map(Tensor::from_vec),
        ]
    }
}

struct CrossEntropy {
    labels: Vec<usize>,
    probs: Tensor,
}

impl BackwardOp for CrossEntropy {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let g = grad.item() / b as f64;
        let mut d = self.probs.data().to_vec();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * c + y] -= 1.0;
        }
        for v in &mut d {
            *v *= g;
        }
        vec![Some(Tensor::new(x.shape(), d))]
    }
}

/// Row softmax of a 2-D slice, max-subtracted for stability.
fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= z;
        }
    }
    out
}

impl Graph {
    /// 1-D cross-correlation: x[B,Cin,T] * w[Cout,Cin,K] -> [B,Cout,T'],
    /// zero-padded by `padding` on both sides.
    pub fn conv1d(&mut self, x: ValId, w: ValId, stride: usize, padding: usize) -> ValId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 3, "conv1d input must be [B,Cin,T]");
        assert_eq!(wv.ndim(), 3, "conv1d weight must be [Cout,Cin,K]");
        assert_eq!(xv.shape()[1], wv.shape()[1], "conv1d channel mismatch");
        assert!(stride >= 1);
        let (b, cin, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let to = conv_out_len(t, k, stride, padding);
        let mut data = vec![0.0; b * cout * to];
        for bi in 0..b {
            for co in 0..cout {
                for ot in 0..to {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for kk in 0..k {
                            let it = ot * stride + kk;
                            if it < padding || it - padding >= t {
                                continue;
                            }
                            acc += xv.data()[(bi * cin + ci) * t + it - padding]
                                * wv.data()[(co * cin + ci) * k + kk];
                        }
                    }
                    data[(bi * cout + co) * to + ot] = acc;
                }
            }
        }
        let out = Tensor::new(&[b, cout, to], data);
        self.record(out, vec![x, w], Box::new(Conv1d { stride, padding }))
    }

    /// Causal depthwise conv: x[B,C,T] * w[C,K] -> [B,C,T], left-padded K-1.
    pub fn dwconv1d(&mut self, x: ValId, w: ValId) -> ValId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 3, "dwconv1d input must be [B,C,T]");
        assert_eq!(wv.ndim(), 2, "dwconv1d weight must be [C,K]");
        assert_eq!(xv.shape()[1], wv.shape()[0], "dwconv1d channel mismatch");
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[1];
        let mut data = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ot in 0..t {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let it = ot + kk;
                        if it < k - 1 {
                            continue;
                        }
                        acc += xv.data()[base + it - (k - 1)] * wv.data()[ci * k + kk];
                    }
                    data[base + ot] = acc;
                }
            }
        }
        let out = Tensor::new(&[b, c, t], data);
        self.record(out, vec![x, w], Box::new(DwConv1d))
    }

    /// Non-overlapping max pooling on the last axis; requires T % window == 0.
    /// Ties route the gradient to the earliest maximum.
    pub fn maxpool1d(&mut self, x: ValId, window: usize) -> ValId {
        let xv = self.value(x);
        let t = *xv.shape().last().unwrap();
        assert!(window >= 1);
        assert_eq!(t % window, 0, "pool window {} must divide length {}", window, t);
        let to = t / window;
        let rows = xv.len() / t;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = to;
        let mut data = vec![0.0; rows * to];
        let mut argmax = vec![0; rows * to];
        for r in 0..rows {
            for j in 0..to {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for p in 0..window {
                    let f = r * t + j * window + p;
                    if xv.data()[f] > best {
                        best = xv.data()[f];
                        bi = f;
                    }
                }
                data[r * to + j] = best;
                argmax[r * to + j] = bi;
            }
        }
        let out = Tensor::new(&shape, data);
        self.record(out, vec![x], Box::new(MaxPool1d { argmax }))
    }

    /// Linear interpolation upsampling of the last axis by an integer factor.
    /// Output sample j reads input position j/factor; past the final knot the
    /// edge value is replicated.
    pub fn upsample_linear(&mut self, x: ValId, factor: usize) -> ValId {
        assert!(factor >= 1);
        if factor == 1 {
            return x;
        }
        let xv = self.value(x);
        let t = *xv.shape().last().unwrap();
        let to = t * factor;
        let rows = xv.len() / t;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = to;
        let mut data = vec![0.0; rows * to];
        for r in 0..rows {
            let row = &xv.data()[r * t..(r + 1) * t];
            for j in 0..to {
                let pos = j as f64 / factor as f64;
                let i0 = pos.floor() as usize;
                data[r * to + j] = if i0 + 1 >= t {
                    row[(t - 1).min(i0)]
                } else {
                    let frac = pos - i0 as f64;
                    row[i0] * (1.0 - frac) + row[i0 + 1] * frac
                };
            }
        }
        let out = Tensor::new(&shape, data);
        self.record(out, vec![x], Box::new(UpsampleLinear { factor }))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: ValId, axis: usize) -> ValId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    m = m.max(xv.data()[(o * axis_len + j) * inner + i]);
                }
                let mut z = 0.0;
                for j in 0..axis_len {
                    let f = (o * axis_len + j) * inner + i;
                    data[f] = (xv.data()[f] - m).exp();
                    z += data[f];
                }
                for j in 0..axis_len {
                    data[(o * axis_len + j) * inner + i] /= z;
                }
            }
        }
        let out = Tensor::new(&shape, data);
        self.record(out, vec![x], Box::new(Softmax { axis }))
    }

    /// Group normalization of x[B,C,T] with per-channel affine parameters.
    pub fn groupnorm(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        groups: usize,
        eps: f64,
    ) -> ValId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "groupnorm input must be [B,C,T]");
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(c % groups, 0, "groups {} must divide channels {}", groups, c);
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let cg = c / groups;
        let n = (cg * t) as f64;
        let (gv, bv) = (self.value(gamma).clone(), self.value(beta).clone());
        let xv = self.value(x);
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for g in 0..groups {
                let mut mean = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    for ti in 0..t {
                        mean += xv.data()[(bi * c + ci) * t + ti];
                    }
                }
                mean /= n;
                let mut var = 0.0;
                for ci in g * cg..(g + 1) * cg {
                    for ti in 0..t {
                        let d = xv.data()[(bi * c + ci) * t + ti] - mean;
                        var += d * d;
                    }
                }
                var /= n;
                let s = (var + eps).sqrt();
                for ci in g * cg..(g + 1) * cg {
                    for ti in 0..t {
                        let f = (bi * c + ci) * t + ti;
                        data[f] = gv.data()[ci] * (xv.data()[f] - mean) / s + bv.data()[ci];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, t], data);
        self.record(out, vec![x, gamma, beta], Box::new(GroupNorm { groups, eps }))
    }

    /// RMS normalization over the last axis with a learned per-feature scale.
    pub fn rmsnorm(&mut self, x: ValId, scale: ValId, eps: f64) -> ValId {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        assert_eq!(self.value(scale).len(), d, "rmsnorm scale length mismatch");
        let rows = xv.len() / d;
        let sv = self.value(scale).clone();
        let xv = self.value(x);
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let rms = (ms + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = sv.data()[j] * row[j] / rms;
            }
        }
        let out = Tensor::new(xv.shape(), data);
        self.record(out, vec![x, scale], Box::new(RmsNorm { eps }))
    }

    /// Mean cross-entropy of logits[B,C] against integer labels.
    pub fn cross_entropy(&mut self, logits: ValId, labels: &[usize]) -> ValId {
        let xv = self.value(logits);
        assert_eq!(xv.ndim(), 2, "cross_entropy logits must be [B,C]");
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(labels.len(), b, "one label per row");
        assert!(labels.iter().all(|&y| y < c), "label out of range");
        let probs = Tensor::new(&[b, c], softmax_rows(xv.data(), b, c));
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs.data()[i * c + y].max(1e-300).ln();
        }
        loss /= b as f64;
        self.record(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(CrossEntropy {
                labels: labels.to_vec(),
                probs,
            }),
        )
    }
}
