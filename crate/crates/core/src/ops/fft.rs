//! Spectral magnitude difference: sum over rows and one-sided frequency bins
//! of |F(a - b)_j|^2. Forward uses an FFT; backward sums the analytic
//! derivative directly.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::graph::{BackwardOp, Graph, ValId};
use crate::tensor::Tensor;

/// DFT of one real row (unnormalized, e^{-i 2*pi j t / T} convention).
fn fft_row(row: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(row.len());
    fft.process(&mut buf);
    buf
}

struct RfftMag2Diff {
    // spectra of d = a - b, one Vec per row, kept for the backward pass
    spectra: Vec<Vec<Complex<f64>>>,
    t: usize,
}

impl BackwardOp for RfftMag2Diff {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let a = inputs[0];
        let t = self.t;
        let g = grad.item();
        let mut da = vec![0.0; a.len()];
        for (r, spec) in self.spectra.iter().enumerate() {
            for ti in 0..t {
                let mut acc = 0.0;
                for j in 0..=t / 2 {
                    let theta = 2.0 * std::f64::consts::PI * (j * ti) as f64 / t as f64;
                    acc += 2.0 * (spec[j].re * theta.cos() - spec[j].im * theta.sin());
                }
                da[r * t + ti] = g * acc;
            }
        }
        let ga = needs[0].then(|| Tensor::new(a.shape(), da.clone()));
        let gb = needs[1].then(|| {
            Tensor::new(
                a.shape(),
                da.iter().map(|v| -v).collect::<Vec<_>>(),
            )
        });
        vec![ga, gb]
    }
}

impl Graph {
    /// Scalar sum over all leading rows and bins j in [0, T/2] of
    /// |DFT(a - b)_j|^2, where the DFT runs over the last axis.
    pub fn rfft_mag2_diff(&mut self, a: ValId, b: ValId) -> ValId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "rfft_mag2_diff shape mismatch");
        let t = *av.shape().last().unwrap();
        assert!(t >= 1);
        let rows = av.len() / t;
        let mut spectra = Vec::with_capacity(rows);
        let mut total = 0.0;
        for r in 0..rows {
            let d: Vec<f64> = av.data()[r * t..(r + 1) * t]
                .iter()
                .zip(&bv.data()[r * t..(r + 1) * t])
                .map(|(x, y)| x - y)
                .collect();
            let spec = fft_row(&d);
            for bin in spec.iter().take(t / 2 + 1) {
                total += bin.norm_sqr();
            }
            spectra.push(spec);
        }
        self.record(
            Tensor::scalar(total),
            vec![a, b],
            Box::new(RfftMag2Diff { spectra, t }),
        )
    }
}

/// O(T^2) direct-summation reference for `rfft_mag2_diff` (test oracle).
pub fn naive_dft_mag2_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let t = *a.shape().last().unwrap();
    let rows = a.len() / t;
    let mut total = 0.0;
    for r in 0..rows {
        for j in 0..=t / 2 {
            let mut re = 0.0;
            let mut im = 0.0;
            for ti in 0..t {
                let d = a.data()[r * t + ti] - b.data()[r * t + ti];
                let theta = 2.0 * std::f64::consts::PI * (j * ti) as f64 / t as f64;
                re += d * theta.cos();
                im -= d * theta.sin();
            }
            total += re * re + im * im;
        }
    }
    total
}
