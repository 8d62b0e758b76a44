//! Discrete Fourier transforms along single axes of dynamically shaped
//! arrays, in the conventions used throughout the crate:
//!
//! - `fft_axis` is the unnormalized forward transform; the inverse carries
//!   the 1/n factor.
//! - `rfft_axis` keeps the non-redundant half spectrum (n/2 + 1 bins).
//! - `irfft_axis` reconstructs a real signal from a half spectrum by
//!   Hermitian extension; the imaginary parts of the self-conjugate bins
//!   (DC, and Nyquist for even n) do not enter the reconstruction, so the
//!   output is real for every input.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Complex FFT along `axis`. The inverse is normalized by 1/n.
pub fn fft_axis(a: &ArrayD<Complex64>, axis: usize, inverse: bool) -> ArrayD<Complex64> {
    let n = a.shape()[axis];
    let fft = plan(n, inverse);
    let mut out = a.clone();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    for mut lane in out.lanes_mut(Axis(axis)) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = b * scale;
        }
    }
    out
}

/// Real-input FFT along `axis`: length n lanes become n/2 + 1 bins.
pub fn rfft_axis(x: &ArrayD<f64>, axis: usize) -> ArrayD<Complex64> {
    let n = x.shape()[axis];
    let nh = n / 2 + 1;
    let fft = plan(n, false);
    let mut shape = x.shape().to_vec();
    shape[axis] = nh;
    let mut out = ArrayD::<Complex64>::from_elem(IxDyn(&shape), Complex64::new(0.0, 0.0));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (lx, mut lo) in x
        .lanes(Axis(axis))
        .into_iter()
        .zip(out.lanes_mut(Axis(axis)))
    {
        for (b, v) in buf.iter_mut().zip(lx.iter()) {
            *b = Complex64::new(*v, 0.0);
        }
        fft.process(&mut buf);
        for (o, b) in lo.iter_mut().zip(buf.iter().take(nh)) {
            *o = *b;
        }
    }
    out
}

/// Inverse of [`rfft_axis`] back to real lanes of length `n`.
pub fn irfft_axis(z: &ArrayD<Complex64>, axis: usize, n: usize) -> ArrayD<f64> {
    let nh = n / 2 + 1;
    assert_eq!(z.shape()[axis], nh, "irfft: half-spectrum length");
    let fft = plan(n, true);
    let mut shape = z.shape().to_vec();
    shape[axis] = n;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let even = n % 2 == 0;
    for (lz, mut lo) in z
        .lanes(Axis(axis))
        .into_iter()
        .zip(out.lanes_mut(Axis(axis)))
    {
        // Hermitian extension; self-conjugate bins keep only their real part.
        buf[0] = Complex64::new(lz[0].re, 0.0);
        for k in 1..nh {
            let v = if even && k == n / 2 {
                Complex64::new(lz[k].re, 0.0)
            } else {
                lz[k]
            };
            buf[k] = v;
            buf[n - k] = v.conj();
        }
        fft.process(&mut buf);
        for (o, b) in lo.iter_mut().zip(buf.iter()) {
            *o = b.re / n as f64;
        }
    }
    out
}

/// Scale the half-spectrum bins along `axis` by `f(k)` where `k` is the bin
/// index. Used for transform adjoints.
pub fn scale_half_bins(
    z: &mut ArrayD<Complex64>,
    axis: usize,
    n: usize,
    f: impl Fn(usize) -> f64,
) {
    let nh = n / 2 + 1;
    assert_eq!(z.shape()[axis], nh);
    for mut lane in z.lanes_mut(Axis(axis)) {
        for (k, v) in lane.iter_mut().enumerate() {
            *v *= f(k);
        }
    }
}

/// Whether half-spectrum bin `k` of an n-point transform is self-conjugate.
pub fn is_self_conjugate(k: usize, n: usize) -> bool {
    k == 0 || (n % 2 == 0 && k == n / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rfft_irfft_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for n in [1usize, 2, 3, 4, 5, 8, 9] {
            let x = ArrayD::from_shape_fn(IxDyn(&[3, n]), |_| rng.gen_range(-1.0..1.0));
            let z = rfft_axis(&x, 1);
            let y = irfft_axis(&z, 1, n);
            for (a, b) in x.iter().zip(y.iter()) {
                assert!((a - b).abs() < 1e-12, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn irfft_is_real_for_arbitrary_spectra() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let n = 6;
        let z = ArrayD::from_shape_fn(IxDyn(&[2, n / 2 + 1]), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        // Output is real by construction; additionally the function must be
        // insensitive to the imaginary parts of the self-conjugate bins.
        let y = irfft_axis(&z, 1, n);
        let mut z2 = z.clone();
        for mut lane in z2.lanes_mut(Axis(1)) {
            lane[0].im = 0.0;
            lane[n / 2].im = 0.0;
        }
        let y2 = irfft_axis(&z2, 1, n);
        for (a, b) in y.iter().zip(y2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fft_axis_inverse_normalizes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 7]), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let y = fft_axis(&fft_axis(&x, 0, false), 0, true);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
