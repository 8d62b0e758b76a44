//! Normalization layers and softmax.

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use super::graph::{Graph, VarId};

impl Graph {
    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> VarId {
        let mut value = self.value(a).clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, ctx| {
                // dx = y * (g - sum(g * y))
                let y = ctx.output;
                let mut gx = g * y;
                for (mut gl, yl) in gx.lanes_mut(Axis(axis)).into_iter().zip(y.lanes(Axis(axis)))
                {
                    let dot: f64 = gl.sum();
                    Zip::from(&mut gl).and(&yl).for_each(|gv, &yv| {
                        *gv -= dot * yv;
                    });
                }
                vec![Some(gx)]
            }),
        )
    }

    /// GroupNorm over a (B, C, H, W) map: per-(batch, group) standardization
    /// followed by a per-channel affine. Variance is the biased estimate.
    pub fn group_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        eps: f64,
    ) -> VarId {
        let shape: Vec<usize> = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "group_norm expects rank 4");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c % groups, 0, "group_norm: C % groups != 0");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let cg = c / groups;
        let n = (cg * h * w) as f64;

        let xv = self.value_shared(x);
        let mut stats = Vec::with_capacity(b * groups); // (mean, inv_std)
        let mut value = ArrayD::<f64>::zeros(IxDyn(&shape));
        {
            let gamma_v = self.value(gamma);
            let beta_v = self.value(beta);
            for bi in 0..b {
                for gi in 0..groups {
                    let sl = xv.slice(ndarray::s![bi, gi * cg..(gi + 1) * cg, .., ..]);
                    let mean = sl.sum() / n;
                    let var = sl.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    stats.push((mean, inv_std));
                    let mut out =
                        value.slice_mut(ndarray::s![bi, gi * cg..(gi + 1) * cg, .., ..]);
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let (scale, shift) = (gamma_v[[ch]], beta_v[[ch]]);
                        let src = sl.index_axis(Axis(0), ci);
                        let mut dst = out.index_axis_mut(Axis(0), ci);
                        Zip::from(&mut dst).and(&src).for_each(|o, &v| {
                            *o = (v - mean) * inv_std * scale + shift;
                        });
                    }
                }
            }
        }

        self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, ctx| {
                let xv = ctx.parents[0];
                let gamma_v = ctx.parents[1];
                let mut gx = ctx.needs[0].then(|| ArrayD::<f64>::zeros(IxDyn(&shape)));
                let mut ggamma = ctx.needs[1].then(|| ArrayD::<f64>::zeros(IxDyn(&[c])));
                let mut gbeta = ctx.needs[2].then(|| ArrayD::<f64>::zeros(IxDyn(&[c])));

                for bi in 0..b {
                    for gi in 0..groups {
                        let (mean, inv_std) = stats[bi * groups + gi];
                        let xs = xv.slice(ndarray::s![bi, gi * cg..(gi + 1) * cg, .., ..]);
                        let gs = g.slice(ndarray::s![bi, gi * cg..(gi + 1) * cg, .., ..]);
                        // Accumulate affine grads and the two reduction terms.
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let scale = gamma_v[[ch]];
                            let xs_c = xs.index_axis(Axis(0), ci);
                            let gs_c = gs.index_axis(Axis(0), ci);
                            let mut gg = 0.0;
                            let mut gb_acc = 0.0;
                            Zip::from(&gs_c).and(&xs_c).for_each(|&gv, &xvv| {
                                let xh = (xvv - mean) * inv_std;
                                let dxh = gv * scale;
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                gg += gv * xh;
                                gb_acc += gv;
                            });
                            if let Some(ggam) = ggamma.as_mut() {
                                ggam[[ch]] += gg;
                            }
                            if let Some(gbet) = gbeta.as_mut() {
                                gbet[[ch]] += gb_acc;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let mut gxs =
                                gx.slice_mut(ndarray::s![bi, gi * cg..(gi + 1) * cg, .., ..]);
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let scale = gamma_v[[ch]];
                                let xs_c = xs.index_axis(Axis(0), ci);
                                let gs_c = gs.index_axis(Axis(0), ci);
                                let mut gx_c = gxs.index_axis_mut(Axis(0), ci);
                                Zip::from(&mut gx_c).and(&gs_c).and(&xs_c).for_each(
                                    |o, &gv, &xvv| {
                                        let xh = (xvv - mean) * inv_std;
                                        let dxh = gv * scale;
                                        *o = inv_std
                                            * (dxh - (sum_dxh + xh * sum_dxh_xh) / n);
                                    },
                                );
                            }
                        }
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// LayerNorm over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let shape: Vec<usize> = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let axis = shape.len() - 1;
        let n = d as f64;

        let mut value = self.value(x).clone();
        {
            let gamma_v = self.value(gamma);
            let beta_v = self.value(beta);
            for mut lane in value.lanes_mut(Axis(axis)) {
                let mean = lane.sum() / n;
                let var = lane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                for (i, v) in lane.iter_mut().enumerate() {
                    *v = (*v - mean) * inv_std * gamma_v[[i]] + beta_v[[i]];
                }
            }
        }

        self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, ctx| {
                let xv = ctx.parents[0];
                let gamma_v = ctx.parents[1];
                let mut gx = ctx.needs[0].then(|| ArrayD::<f64>::zeros(xv.raw_dim()));
                let mut ggamma = ctx.needs[1].then(|| ArrayD::<f64>::zeros(IxDyn(&[d])));
                let mut gbeta = ctx.needs[2].then(|| ArrayD::<f64>::zeros(IxDyn(&[d])));

                let g_lanes = g.lanes(Axis(axis));
                let x_lanes = xv.lanes(Axis(axis));
                let mut gx_lanes = gx.as_mut().map(|a| a.lanes_mut(Axis(axis)).into_iter());
                for (gl, xl) in g_lanes.into_iter().zip(x_lanes) {
                    let mean = xl.sum() / n;
                    let var = xl.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in 0..d {
                        let xh = (xl[i] - mean) * inv_std;
                        let dxh = gl[i] * gamma_v[[i]];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        if let Some(ggam) = ggamma.as_mut() {
                            ggam[[i]] += gl[i] * xh;
                        }
                        if let Some(gbet) = gbeta.as_mut() {
                            gbet[[i]] += gl[i];
                        }
                    }
                    if let Some(lanes) = gx_lanes.as_mut() {
                        let mut out = lanes.next().expect("lane count");
                        for i in 0..d {
                            let xh = (xl[i] - mean) * inv_std;
                            let dxh = gl[i] * gamma_v[[i]];
                            out[i] = inv_std * (dxh - (sum_dxh + xh * sum_dxh_xh) / n);
                        }
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grads, leaf_rand};
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = leaf_rand(&mut g, &[3, 7], 11);
        let y = g.softmax(x, 1);
        for lane in g.value(y).lanes(Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_difference() {
        check_grads(
            &[&[2, 5]],
            |g, ids| {
                let y = g.softmax(ids[0], 1);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-6,
            1e-8,
        );
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut g = Graph::new();
        let x = leaf_rand(&mut g, &[2, 4, 8, 8], 3);
        let gamma = g.constant(ArrayD::ones(IxDyn(&[4])));
        let beta = g.constant(ArrayD::zeros(IxDyn(&[4])));
        let y = g.group_norm(x, gamma, beta, 4, 1e-5);
        let yv = g.value(y);
        for bi in 0..2 {
            for ci in 0..4 {
                let sl = yv.slice(ndarray::s![bi, ci..ci + 1, .., ..]);
                let n = sl.len() as f64;
                let mean = sl.sum() / n;
                let var = sl.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
                assert!(mean.abs() < 1e-10, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "group var {var}");
            }
        }
    }

    #[test]
    fn group_norm_gradients_match_finite_difference() {
        check_grads(
            &[&[1, 4, 3, 3], &[4], &[4]],
            |g, ids| {
                let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-6,
            2e-7,
        );
    }

    #[test]
    fn layer_norm_gradients_match_finite_difference() {
        check_grads(
            &[&[2, 3, 4], &[4], &[4]],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-6,
            2e-7,
        );
    }
}
