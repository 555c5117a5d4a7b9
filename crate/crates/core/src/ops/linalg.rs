//! Matrix contraction with broadcastable leading dims.

use crate::graph::{BackwardOp, Graph, ValId};
use crate::tensor::{numel, Tensor};

/// Broadcast two leading-dim shapes (numpy rules, left-padded with 1s).
fn broadcast_lead(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let av = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let bv = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(
            av == bv || av == 1 || bv == 1,
            "matmul leading dims not broadcastable: {:?} vs {:?}",
            a,
            b
        );
        out[i] = av.max(bv);
    }
    out
}

/// Map a flat batch index in the broadcast shape to a flat index in `dims`.
fn batch_offset(batch_shape: &[usize], flat: usize, dims: &[usize]) -> usize {
    let n = batch_shape.len();
    let mut rem = flat;
    let mut idx = vec![0; n];
    for i in (0..n).rev() {
        idx[i] = rem % batch_shape[i];
        rem /= batch_shape[i];
    }
    let mut off = 0;
    let mut stride = 1;
    for i in (0..dims.len()).rev() {
        let bi = idx[n - dims.len() + i];
        let j = if dims[i] == 1 { 0 } else { bi };
        off += j * stride;
        stride *= dims[i];
    }
    off
}

fn mm_block(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a^T · b block: a is (k x m), result (m x n) accumulated into out.
fn mm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a · b^T block: b is (n x k), result (m x n) accumulated into out.
fn mm_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] += s;
        }
    }
}

struct MatMul {
    batch: Vec<usize>,
    a_lead: Vec<usize>,
    b_lead: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardOp for MatMul {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let nb = numel(&self.batch);
        let ga = needs[0].then(|| {
            let mut d = vec![0.0; a.len()];
            for bi in 0..nb {
                let ao = batch_offset(&self.batch, bi, &self.a_lead) * m * k;
                let bo = batch_offset(&self.batch, bi, &self.b_lead) * k * n;
                let go = bi * m * n;
                // dA = dY · B^T
                mm_a_bt(
                    &grad.data()[go..go + m * n],
                    &b.data()[bo..bo + k * n],
                    m,
                    n,
                    k,
                    &mut d[ao..ao + m * k],
                );
            }
            Tensor::new(a.shape(), d)
        });
        let gb = needs[1].then(|| {
            let mut d = vec![0.0; b.len()];
            for bi in 0..nb {
                let ao = batch_offset(&self.batch, bi, &self.a_lead) * m * k;
                let bo = batch_offset(&self.batch, bi, &self.b_lead) * k * n;
                let go = bi * m * n;
                // dB = A^T · dY
                mm_at_b(
                    &a.data()[ao..ao + m * k],
                    &grad.data()[go..go + m * n],
                    k,
                    m,
                    n,
                    &mut d[bo..bo + k * n],
                );
            }
            Tensor::new(b.shape(), d)
        });
        vec![ga, gb]
    }
}

impl Graph {
    /// Batched matrix product: a[.., m, k] · b[.., k, n] -> [.., m, n], with
    /// broadcastable leading dims.
    pub fn matmul(&mut self, a: ValId, b: ValId) -> ValId {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.ndim() >= 2 && bv.ndim() >= 2, "matmul needs >= 2 dims");
        let (m, ka) = (av.shape()[av.ndim() - 2], av.shape()[av.ndim() - 1]);
        let (kb, n) = (bv.shape()[bv.ndim() - 2], bv.shape()[bv.ndim() - 1]);
        assert_eq!(
            ka, kb,
            "matmul inner dims mismatch: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let a_lead = av.shape()[..av.ndim() - 2].to_vec();
        let b_lead = bv.shape()[..bv.ndim() - 2].to_vec();
        let batch = broadcast_lead(&a_lead, &b_lead);
        let nb = numel(&batch);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let ao = batch_offset(&batch, bi, &a_lead) * m * ka;
            let bo = batch_offset(&batch, bi, &b_lead) * ka * n;
            mm_block(
                &av.data()[ao..ao + m * ka],
                &bv.data()[bo..bo + ka * n],
                m,
                ka,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out = Tensor::new(&out_shape, data);
        self.record(
            out,
            vec![a, b],
            Box::new(MatMul {
                batch,
                a_lead,
                b_lead,
                m,
                k: ka,
                n,
            }),
        )
    }

    /// x[.., d] · w[d, n]: convenience for dense layers.
    pub fn linear(&mut self, x: ValId, w: ValId) -> ValId {
        self.matmul(x, w)
    }
}

/// Triple-loop reference contraction for 2-D matrices (test oracle).
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.ndim(), 2);
    assert_eq!(b.ndim(), 2);
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}
