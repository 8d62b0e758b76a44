//! Learnable spectral filtering: forward real 2D DFT over one axis pair,
//! elementwise multiply by complex weights, inverse real 2D DFT.
//!
//! The transform pair runs the half-spectrum real DFT along axis `b` and a
//! full complex DFT along axis `a`; weights live on the (dim_a, n_b/2 + 1)
//! half-spectrum grid and broadcast over every other axis. Because the
//! output comes from a genuine inverse-real transform, it is real for any
//! weights, not by discarding an imaginary component.

use ndarray::{ArrayD, IxDyn, Zip};
use num_complex::Complex64;

use super::fftutil::{fft_axis, irfft_axis, is_self_conjugate, rfft_axis, scale_half_bins};
use super::graph::{Graph, VarId};

fn complex_weights(wre: &ArrayD<f64>, wim: &ArrayD<f64>) -> ArrayD<Complex64> {
    let mut w = ArrayD::<Complex64>::from_elem(wre.raw_dim(), Complex64::new(0.0, 0.0));
    Zip::from(&mut w).and(wre).and(wim).for_each(|o, &re, &im| {
        *o = Complex64::new(re, im);
    });
    w
}

/// Multiply `spectrum` in place by weights broadcast over all axes other
/// than (`axis_a`, `axis_b`); `conjugate` applies the conjugate weights.
fn apply_weights(
    spectrum: &mut ArrayD<Complex64>,
    w: &ArrayD<Complex64>,
    axis_a: usize,
    axis_b: usize,
    conjugate: bool,
) {
    let mut bshape = vec![1usize; spectrum.ndim()];
    bshape[axis_a] = w.shape()[0];
    bshape[axis_b] = w.shape()[1];
    let wb = w
        .view()
        .into_shape_with_order(IxDyn(&bshape))
        .expect("weight reshape");
    let wb = wb.broadcast(spectrum.raw_dim()).expect("weight broadcast");
    Zip::from(spectrum).and(&wb).for_each(|s, &wv| {
        *s *= if conjugate { wv.conj() } else { wv };
    });
}

fn forward_spectrum(x: &ArrayD<f64>, axis_a: usize, axis_b: usize) -> ArrayD<Complex64> {
    let x1 = rfft_axis(x, axis_b);
    fft_axis(&x1, axis_a, false)
}

impl Graph {
    /// y = InverseRealDFT2(RealDFT2(x, (a,b)) .* W, (a,b)), differentiable in
    /// x and in both weight components.
    pub fn spectral_filter(
        &mut self,
        x: VarId,
        w_re: VarId,
        w_im: VarId,
        axis_a: usize,
        axis_b: usize,
    ) -> VarId {
        let shape: Vec<usize> = self.shape(x).to_vec();
        assert!(axis_a != axis_b && axis_a < shape.len() && axis_b < shape.len());
        let na = shape[axis_a];
        let nb = shape[axis_b];
        let nh = nb / 2 + 1;
        assert_eq!(self.shape(w_re), &[na, nh], "spectral weights: real part");
        assert_eq!(self.shape(w_im), &[na, nh], "spectral weights: imag part");

        let w = complex_weights(self.value(w_re), self.value(w_im));
        let mut spec = forward_spectrum(self.value(x), axis_a, axis_b);
        apply_weights(&mut spec, &w, axis_a, axis_b, false);
        let y1 = fft_axis(&spec, axis_a, true);
        let out = irfft_axis(&y1, axis_b, nb);

        self.push_op(
            out,
            vec![x, w_re, w_im],
            Box::new(move |g, ctx| {
                // Adjoint of the inverse stage.
                let mut gy = rfft_axis(g, axis_b);
                scale_half_bins(&mut gy, axis_b, nb, |k| {
                    if is_self_conjugate(k, nb) {
                        1.0 / nb as f64
                    } else {
                        2.0 / nb as f64
                    }
                });
                let gy = fft_axis(&gy, axis_a, false).mapv(|v| v / na as f64);

                let w = complex_weights(ctx.parents[1], ctx.parents[2]);
                let (gwre, gwim) = if ctx.needs[1] || ctx.needs[2] {
                    let spec = forward_spectrum(ctx.parents[0], axis_a, axis_b);
                    let mut gw = ArrayD::<Complex64>::from_elem(
                        IxDyn(&[na, nh]),
                        Complex64::new(0.0, 0.0),
                    );
                    for (idx, gv) in gy.indexed_iter() {
                        let ia = idx[axis_a];
                        let ib = idx[axis_b];
                        gw[[ia, ib]] += spec[&idx].conj() * gv;
                    }
                    (
                        ctx.needs[1].then(|| gw.mapv(|v| v.re)),
                        ctx.needs[2].then(|| gw.mapv(|v| v.im)),
                    )
                } else {
                    (None, None)
                };

                let gx = ctx.needs[0].then(|| {
                    let mut gs = gy;
                    apply_weights(&mut gs, &w, axis_a, axis_b, true);
                    // Adjoint of the forward stage.
                    let mut g1 = fft_axis(&gs, axis_a, true).mapv(|v| v * na as f64);
                    scale_half_bins(&mut g1, axis_b, nb, |k| {
                        if is_self_conjugate(k, nb) {
                            nb as f64
                        } else {
                            nb as f64 / 2.0
                        }
                    });
                    irfft_axis(&g1, axis_b, nb)
                });

                vec![gx, gwre, gwim]
            }),
        )
    }
}
