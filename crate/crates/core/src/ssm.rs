//! Selective state-space sequence mixing in two equivalent forms: a
//! linear-time recurrent scan and a quadratic semiseparable materialization
//! (kept as an oracle and for runtime-scaling comparisons), plus the assembled
//! residual block used everywhere in the network.
//!
//! Parametrization: scalar decay per channel lane. For channel p with head
//! h(p), the state S[n,p] evolves as
//!
//!   S_t = exp(dt_{t,h} a_h) S_{t-1} + dt_{t,h} b_t[n] x_t[p]
//!   y_t[p] = sum_n c_t[n] S_t[n,p] + D[p] x_t[p]
//!
//! with a_h <= 0 so the discretized decay lies in (0, 1].

use rand::Rng;

use crate::graph::{BackwardOp, Graph, ValId};
use crate::init;
use crate::tensor::Tensor;

/// Highest T the quadratic form will materialize (it allocates T^2 weights).
pub const QUADRATIC_T_CAP: usize = 4096;

/// Which sequence-mixing kernel the block runs. Both produce identical
/// outputs; `Quadratic` is forward-only and O(T^2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsdKernel {
    Scan,
    Quadratic,
}

fn head_of(p: usize, heads: usize, channels: usize) -> usize {
    p * heads / channels
}

/// Shared forward recurrence. Shapes: x[B,T,P], dt[B,T,H], a[H], b[B,T,N],
/// c[B,T,N], d[P]. Returns y[B,T,P].
fn scan_forward(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Tensor {
    let (bb, t, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = dt.shape()[2];
    let n = b.shape()[2];
    let mut y = vec![0.0; bb * t * p];
    let mut state = vec![0.0; n * p];
    for bi in 0..bb {
        state.iter_mut().for_each(|s| *s = 0.0);
        for ti in 0..t {
            let xrow = &x.data()[(bi * t + ti) * p..(bi * t + ti + 1) * p];
            let dtrow = &dt.data()[(bi * t + ti) * h..(bi * t + ti + 1) * h];
            let brow = &b.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
            let crow = &c.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
            for pi in 0..p {
                let hd = head_of(pi, h, p);
                let step = dtrow[hd];
                assert!(step > 0.0, "nonpositive step size {} at t={}", step, ti);
                let lam = (step * a.data()[hd]).exp();
                let inp = step * xrow[pi];
                let mut out = 0.0;
                for ni in 0..n {
                    let s = &mut state[ni * p + pi];
                    *s = lam * *s + brow[ni] * inp;
                    out += crow[ni] * *s;
                }
                y[(bi * t + ti) * p + pi] = out + d.data()[pi] * xrow[pi];
            }
        }
    }
    Tensor::new(&[bb, t, p], y)
}

struct SsdScan;

impl BackwardOp for SsdScan {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, dt, a, b, c, d) = (
            inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5],
        );
        let (bb, t, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = dt.shape()[2];
        let n = b.shape()[2];
        let mut gx = vec![0.0; x.len()];
        let mut gdt = vec![0.0; dt.len()];
        let mut ga = vec![0.0; h];
        let mut gb = vec![0.0; b.len()];
        let mut gc = vec![0.0; c.len()];
        let mut gd = vec![0.0; p];
        // recompute the state trajectory (O(T) memory per batch element)
        let mut states = vec![0.0; (t + 1) * n * p]; // states[ti] = S_{ti}, S_0 slot holds h_0 = 0
        for bi in 0..bb {
            states.iter_mut().for_each(|s| *s = 0.0);
            for ti in 0..t {
                let xrow = &x.data()[(bi * t + ti) * p..(bi * t + ti + 1) * p];
                let dtrow = &dt.data()[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                let brow = &b.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                let (prev, cur) = states.split_at_mut((ti + 1) * n * p);
                let prev = &prev[ti * n * p..];
                let cur = &mut cur[..n * p];
                for pi in 0..p {
                    let hd = head_of(pi, h, p);
                    let lam = (dtrow[hd] * a.data()[hd]).exp();
                    let inp = dtrow[hd] * xrow[pi];
                    for ni in 0..n {
                        cur[ni * p + pi] = lam * prev[ni * p + pi] + brow[ni] * inp;
                    }
                }
            }
            // reverse sweep: shat_t = c_t (x) gy_t + lambda_{t+1} shat_{t+1}
            let mut shat = vec![0.0; n * p];
            for ti in (0..t).rev() {
                let xrow = &x.data()[(bi * t + ti) * p..(bi * t + ti + 1) * p];
                let dtrow = &dt.data()[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                let brow = &b.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                let crow = &c.data()[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                let gyrow = &grad.data()[(bi * t + ti) * p..(bi * t + ti + 1) * p];
                let cur = &states[(ti + 1) * n * p..(ti + 2) * n * p];
                let prev = &states[ti * n * p..(ti + 1) * n * p];
                for pi in 0..p {
                    let hd = head_of(pi, h, p);
                    let lam = (dtrow[hd] * a.data()[hd]).exp();
                    let gy = gyrow[pi];
                    gd[pi] += gy * xrow[pi];
                    let mut glam = 0.0;
                    let mut gx_acc = 0.0;
                    let mut ginp = 0.0;
                    for ni in 0..n {
                        let s = &mut shat[ni * p + pi];
                        *s += crow[ni] * gy;
                        gc[(bi * t + ti) * n + ni] += gy * cur[ni * p + pi];
                        glam += *s * prev[ni * p + pi];
                        gb[(bi * t + ti) * n + ni] += *s * dtrow[hd] * xrow[pi];
                        ginp += *s * brow[ni];
                        gx_acc += *s * brow[ni];
                        // prepare shat for step t-1
                        *s *= lam;
                    }
                    gx[(bi * t + ti) * p + pi] = dtrow[hd] * gx_acc + d.data()[pi] * gy;
                    // lambda = exp(dt a): d lambda/d dt = a lambda, d lambda/d a = dt lambda
                    gdt[(bi * t + ti) * h + hd] +=
                        glam * a.data()[hd] * lam + ginp * xrow[pi];
                    ga[hd] += glam * dtrow[hd] * lam;
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape(), gx)),
            needs[1].then(|| Tensor::new(dt.shape(), gdt)),
            needs[2].then(|| Tensor::new(a.shape(), ga)),
            needs[3].then(|| Tensor::new(b.shape(), gb)),
            needs[4].then(|| Tensor::new(c.shape(), gc)),
            needs[5].then(|| Tensor::new(d.shape(), gd)),
        ]
    }
}

struct SsdQuadraticOp;

impl BackwardOp for SsdQuadraticOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        _grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        panic!("the quadratic kernel is forward-only; train with the scan kernel");
    }
}

fn check_scan_shapes(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) {
    assert_eq!(x.ndim(), 3, "scan input must be [B,T,P]");
    let (bb, t, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = a.len();
    assert_eq!(dt.shape(), &[bb, t, h], "step-size shape mismatch");
    assert_eq!(p % h, 0, "heads {} must divide channels {}", h, p);
    let n = b.shape()[2];
    assert_eq!(b.shape(), &[bb, t, n]);
    assert_eq!(c.shape(), &[bb, t, n]);
    assert_eq!(d.len(), p);
    assert!(a.data().iter().all(|&v| v <= 0.0), "decay rate must be <= 0");
}

impl Graph {
    /// Linear-time selective scan; see the module doc for the recurrence.
    pub fn ssd_scan(
        &mut self,
        x: ValId,
        dt: ValId,
        a: ValId,
        b: ValId,
        c: ValId,
        d: ValId,
    ) -> ValId {
        let (xv, dtv, av, bv, cv, dv) = (
            self.value(x),
            self.value(dt),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
        );
        check_scan_shapes(xv, dtv, av, bv, cv, dv);
        let y = scan_forward(xv, dtv, av, bv, cv, dv);
        self.record(y, vec![x, dt, a, b, c, d], Box::new(SsdScan))
    }

    /// Same map as `ssd_scan` but via the materialized T x T mixing matrix.
    /// Forward-only; panics on backward and on T above the oracle cap.
    pub fn ssd_quadratic_op(
        &mut self,
        x: ValId,
        dt: ValId,
        a: ValId,
        b: ValId,
        c: ValId,
        d: ValId,
    ) -> ValId {
        let (xv, dtv, av, bv, cv, dv) = (
            self.value(x),
            self.value(dt),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
        );
        let y = ssd_quadratic(xv, dtv, av, bv, cv, dv);
        self.record(y, vec![x, dt, a, b, c, d], Box::new(SsdQuadraticOp))
    }
}

/// Quadratic dual: y = (M + diag-broadcast D) x with
/// M_{tj}[p] = (c_t . b_j) dt_{j,h} prod_{k=j+1..t} exp(dt_{k,h} a_h), j <= t.
/// O(T^2) time; the mixing matrix is materialized per (batch, head).
pub fn ssd_quadratic(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Tensor {
    check_scan_shapes(x, dt, a, b, c, d);
    let (bb, t, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(
        t <= QUADRATIC_T_CAP,
        "sequence length {} above quadratic-form cap {}",
        t,
        QUADRATIC_T_CAP
    );
    let h = a.len();
    let n = b.shape()[2];
    let mut y = vec![0.0; bb * t * p];
    let mut m = vec![0.0; t * t];
    for bi in 0..bb {
        for hd in 0..h {
            // cumulative log-decay: logdecay[t] = sum_{k<=t} dt_k a_h
            let mut logdecay = vec![0.0; t];
            let mut acc = 0.0;
            for ti in 0..t {
                let step = dt.data()[(bi * t + ti) * h + hd];
                assert!(step > 0.0, "nonpositive step size");
                acc += step * a.data()[hd];
                logdecay[ti] = acc;
            }
            for ti in 0..t {
                for tj in 0..t {
                    m[ti * t + tj] = if tj > ti {
                        0.0 // causal: upper triangle is identically zero
                    } else {
                        let mut cb = 0.0;
                        for ni in 0..n {
                            cb += c.data()[(bi * t + ti) * n + ni]
                                * b.data()[(bi * t + tj) * n + ni];
                        }
                        cb * dt.data()[(bi * t + tj) * h + hd]
                            * (logdecay[ti] - logdecay[tj]).exp()
                    };
                }
            }
            let plo = hd * p / h;
            let phi = (hd + 1) * p / h;
            for pi in plo..phi {
                for ti in 0..t {
                    let mut out = d.data()[pi] * x.data()[(bi * t + ti) * p + pi];
                    for tj in 0..=ti {
                        out += m[ti * t + tj] * x.data()[(bi * t + tj) * p + pi];
                    }
                    y[(bi * t + ti) * p + pi] = out;
                }
            }
        }
    }
    Tensor::new(&[bb, t, p], y)
}

/// Materialize the mixing matrix of one (batch, head) lane; test hook for the
/// causality and single-step properties.
pub fn ssd_mixing_matrix(dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, batch: usize, head: usize) -> Tensor {
    let t = dt.shape()[1];
    let h = a.len();
    let n = b.shape()[2];
    let mut logdecay = vec![0.0; t];
    let mut acc = 0.0;
    for ti in 0..t {
        acc += dt.data()[(batch * t + ti) * h + head] * a.data()[head];
        logdecay[ti] = acc;
    }
    let mut m = Tensor::zeros(&[t, t]);
    for ti in 0..t {
        for tj in 0..=ti {
            let mut cb = 0.0;
            for ni in 0..n {
                cb += c.data()[(batch * t + ti) * n + ni] * b.data()[(batch * t + tj) * n + ni];
            }
            m.data_mut()[ti * t + tj] = cb
                * dt.data()[(batch * t + tj) * h + head]
                * (logdecay[ti] - logdecay[tj]).exp();
        }
    }
    m
}

/// Hyperparameters of one block.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    /// State size N.
    pub state: usize,
    /// Width multiplier for the inner projection.
    pub expand: usize,
    /// Depthwise conv taps.
    pub conv_kernel: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            state: 16,
            expand: 2,
            conv_kernel: 4,
        }
    }
}

/// All learnable tensors of one block. Decay and skip gains are per inner
/// channel; b/c rows are shared across channels.
#[derive(Clone, Debug)]
pub struct Mamba2BlockWeights {
    pub norm_scale: Tensor, // [d]
    pub w_in: Tensor,       // [d, 2*di]
    pub conv: Tensor,       // [di, K]
    pub w_dt: Tensor,       // [di, di]
    pub dt_bias: Tensor,    // [di]
    pub a_log: Tensor,      // [di]; a = -exp(a_log)
    pub w_b: Tensor,        // [di, N]
    pub w_c: Tensor,        // [di, N]
    pub d_skip: Tensor,     // [di]
    pub w_out: Tensor,      // [di, d]
}

impl Mamba2BlockWeights {
    pub fn init<R: Rng>(d: usize, cfg: &SsmConfig, rng: &mut R) -> Self {
        let di = cfg.expand * d;
        let n = cfg.state;
        // softplus^{-1} of log-spaced initial step sizes in [0.01, 0.1]
        let dt_bias = Tensor::new(
            &[di],
            (0..di)
                .map(|i| {
                    let frac = if di > 1 { i as f64 / (di - 1) as f64 } else { 0.5 };
                    let dt0 = 0.01 * (10.0f64).powf(frac);
                    (dt0.exp() - 1.0).ln()
                })
                .collect(),
        );
        let a_log = Tensor::new(
            &[di],
            (0..di).map(|_| rng.gen_range(1.0..16.0f64).ln()).collect(),
        );
        Mamba2BlockWeights {
            norm_scale: Tensor::full(&[d], 1.0),
            w_in: init::dense(rng, d, &[d, 2 * di]),
            conv: init::dense(rng, cfg.conv_kernel, &[di, cfg.conv_kernel]),
            w_dt: init::dense(rng, di, &[di, di]),
            dt_bias,
            a_log,
            w_b: init::dense(rng, di, &[di, n]),
            w_c: init::dense(rng, di, &[di, n]),
            d_skip: Tensor::full(&[di], 1.0),
            w_out: init::dense(rng, di, &[di, d]),
        }
    }

    pub fn width(&self) -> usize {
        self.norm_scale.len()
    }

    /// Visit every tensor with a stable name, in a fixed order.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.norm_scale"), &self.norm_scale);
        f(format!("{prefix}.w_in"), &self.w_in);
        f(format!("{prefix}.conv"), &self.conv);
        f(format!("{prefix}.w_dt"), &self.w_dt);
        f(format!("{prefix}.dt_bias"), &self.dt_bias);
        f(format!("{prefix}.a_log"), &self.a_log);
        f(format!("{prefix}.w_b"), &self.w_b);
        f(format!("{prefix}.w_c"), &self.w_c);
        f(format!("{prefix}.d_skip"), &self.d_skip);
        f(format!("{prefix}.w_out"), &self.w_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.norm_scale"), &mut self.norm_scale);
        f(format!("{prefix}.w_in"), &mut self.w_in);
        f(format!("{prefix}.conv"), &mut self.conv);
        f(format!("{prefix}.w_dt"), &mut self.w_dt);
        f(format!("{prefix}.dt_bias"), &mut self.dt_bias);
        f(format!("{prefix}.a_log"), &mut self.a_log);
        f(format!("{prefix}.w_b"), &mut self.w_b);
        f(format!("{prefix}.w_c"), &mut self.w_c);
        f(format!("{prefix}.d_skip"), &mut self.d_skip);
        f(format!("{prefix}.w_out"), &mut self.w_out);
    }

    /// Bind every tensor as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Mamba2BlockVars {
        Mamba2BlockVars {
            norm_scale: g.leaf(self.norm_scale.clone(), true),
            w_in: g.leaf(self.w_in.clone(), true),
            conv: g.leaf(self.conv.clone(), true),
            w_dt: g.leaf(self.w_dt.clone(), true),
            dt_bias: g.leaf(self.dt_bias.clone(), true),
            a_log: g.leaf(self.a_log.clone(), true),
            w_b: g.leaf(self.w_b.clone(), true),
            w_c: g.leaf(self.w_c.clone(), true),
            d_skip: g.leaf(self.d_skip.clone(), true),
            w_out: g.leaf(self.w_out.clone(), true),
        }
    }
}

/// Graph handles of one bound block, in the same order as `visit`.
#[derive(Clone, Copy, Debug)]
pub struct Mamba2BlockVars {
    pub norm_scale: ValId,
    pub w_in: ValId,
    pub conv: ValId,
    pub w_dt: ValId,
    pub dt_bias: ValId,
    pub a_log: ValId,
    pub w_b: ValId,
    pub w_c: ValId,
    pub d_skip: ValId,
    pub w_out: ValId,
}

impl Mamba2BlockVars {
    /// Handles in `visit` order (for pairing gradients with names).
    pub fn ids(&self) -> Vec<ValId> {
        vec![
            self.norm_scale,
            self.w_in,
            self.conv,
            self.w_dt,
            self.dt_bias,
            self.a_log,
            self.w_b,
            self.w_c,
            self.d_skip,
            self.w_out,
        ]
    }
}

/// Full residual block: pre-norm, input projection, causal depthwise conv +
/// SiLU, selective scan, SiLU gate, output projection, residual add.
pub fn mamba2_block(g: &mut Graph, x: ValId, w: &Mamba2BlockVars, kernel: SsdKernel) -> ValId {
    let d = *g.shape(x).last().unwrap();
    assert_eq!(
        g.shape(w.w_in)[0],
        d,
        "block width {} does not match input {}",
        g.shape(w.w_in)[0],
        d
    );
    let di = g.shape(w.w_in)[1] / 2;
    let xn = g.rmsnorm(x, w.norm_scale, 1e-6);
    let proj = g.matmul(xn, w.w_in); // [B,T,2di]
    let u = g.slice(proj, 2, 0, di);
    let z = g.slice(proj, 2, di, di);
    let ut = g.permute(u, &[0, 2, 1]); // [B,di,T]
    let uc = g.dwconv1d(ut, w.conv);
    let uc = g.silu(uc);
    let uc = g.permute(uc, &[0, 2, 1]); // [B,T,di]
    let dt_pre = g.matmul(uc, w.w_dt);
    let dt_pre = g.add_bias(dt_pre, w.dt_bias, 2);
    let dt = g.softplus(dt_pre);
    let ea = g.exp(w.a_log);
    let a = g.neg(ea);
    let b = g.matmul(uc, w.w_b);
    let c = g.matmul(uc, w.w_c);
    let y = match kernel {
        SsdKernel::Scan => g.ssd_scan(uc, dt, a, b, c, w.d_skip),
        SsdKernel::Quadratic => g.ssd_quadratic_op(uc, dt, a, b, c, w.d_skip),
    };
    let gate = g.silu(z);
    let y = g.mul(y, gate);
    let y = g.matmul(y, w.w_out);
    g.add(y, x)
}
