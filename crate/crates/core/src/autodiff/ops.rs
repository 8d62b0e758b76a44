//! Elementwise, shape, and reduction ops.

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use super::graph::{Graph, VarId};

const GELU_COEF: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, ctx| {
                let ga = ctx.needs[0].then(|| g * ctx.parents[1]);
                let gb = ctx.needs[1].then(|| g * ctx.parents[0]);
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let value = self.value(a).mapv(|v| v * k);
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, _| vec![Some(g.mapv(|v| v * k))]),
        )
    }

    pub fn add_scalar(&mut self, a: VarId, k: f64) -> VarId {
        let value = self.value(a).mapv(|v| v + k);
        self.push_op(value, vec![a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Multiply a tensor by a rank-0 learnable gate.
    pub fn scale_by_gate(&mut self, x: VarId, gate: VarId) -> VarId {
        assert!(self.shape(gate).is_empty(), "gate must be rank-0");
        let s = self.scalar_value(gate);
        let value = self.value(x).mapv(|v| v * s);
        self.push_op(
            value,
            vec![x, gate],
            Box::new(move |g, ctx| {
                let gx = ctx.needs[0].then(|| g.mapv(|v| v * s));
                let gs = ctx.needs[1].then(|| {
                    let dot = Zip::from(g)
                        .and(ctx.parents[0])
                        .fold(0.0, |acc, &gv, &xv| acc + gv * xv);
                    ArrayD::from_elem(IxDyn(&[]), dot)
                });
                vec![gx, gs]
            }),
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push_op(
            value,
            vec![a],
            Box::new(|g, ctx| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(ctx.parents[0]).for_each(|gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(gx)]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let c = sqrt_2_over_pi();
        let value = self.value(a).mapv(|x| {
            0.5 * x * (1.0 + (c * (x + GELU_COEF * x.powi(3))).tanh())
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, ctx| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(ctx.parents[0]).for_each(|gv, &x| {
                    let u = c * (x + GELU_COEF * x.powi(3));
                    let t = u.tanh();
                    let du = c * (1.0 + 3.0 * GELU_COEF * x * x);
                    *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                vec![Some(gx)]
            }),
        )
    }

    /// Add a per-channel bias to a (B, C, ...) tensor.
    pub fn add_bias_channel(&mut self, x: VarId, bias: VarId) -> VarId {
        let c = self.shape(x)[1];
        assert_eq!(self.shape(bias), &[c], "bias must be (C,)");
        let mut value = self.value(x).clone();
        {
            let b = self.value(bias);
            for (ci, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
                lane += b[[ci]];
            }
        }
        self.push_op(
            value,
            vec![x, bias],
            Box::new(move |g, ctx| {
                let gx = ctx.needs[0].then(|| g.clone());
                let gb = ctx.needs[1].then(|| {
                    let mut gb = ArrayD::zeros(IxDyn(&[c]));
                    for (ci, lane) in g.axis_iter(Axis(1)).enumerate() {
                        gb[[ci]] = lane.sum();
                    }
                    gb
                });
                vec![gx, gb]
            }),
        )
    }

    /// Add a bias along the last axis of any tensor.
    pub fn add_bias_last(&mut self, x: VarId, bias: VarId) -> VarId {
        let last = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(self.shape(bias), &[last], "bias must match last axis");
        let axis = self.shape(x).len() - 1;
        let mut value = self.value(x).clone();
        {
            let b = self.value(bias);
            for mut lane in value.lanes_mut(Axis(axis)) {
                for (i, v) in lane.iter_mut().enumerate() {
                    *v += b[[i]];
                }
            }
        }
        self.push_op(
            value,
            vec![x, bias],
            Box::new(move |g, ctx| {
                let gx = ctx.needs[0].then(|| g.clone());
                let gb = ctx.needs[1].then(|| {
                    let mut gb = ArrayD::zeros(IxDyn(&[last]));
                    for lane in g.lanes(Axis(axis)) {
                        for (i, &v) in lane.iter().enumerate() {
                            gb[[i]] += v;
                        }
                    }
                    gb
                });
                vec![gx, gb]
            }),
        )
    }

    /// Add a tensor shaped like one batch element to every element of the
    /// batch (axis 0 broadcast); used for position embeddings.
    pub fn add_broadcast_batch(&mut self, x: VarId, p: VarId) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(&xs[1..], self.shape(p), "broadcast shape must match x[1..]");
        let b = xs[0];
        let mut value = self.value(x).clone();
        {
            let pv = self.value(p);
            for mut item in value.axis_iter_mut(Axis(0)) {
                Zip::from(&mut item).and(pv).for_each(|v, &av| *v += av);
            }
        }
        self.push_op(
            value,
            vec![x, p],
            Box::new(move |g, ctx| {
                let gx = ctx.needs[0].then(|| g.clone());
                let gp = ctx.needs[1].then(|| {
                    let mut gp = ArrayD::zeros(ctx.parents[1].raw_dim());
                    let _ = b;
                    for item in g.axis_iter(Axis(0)) {
                        Zip::from(&mut gp).and(&item).for_each(|acc, &v| *acc += v);
                    }
                    gp
                });
                vec![gx, gp]
            }),
        )
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        let n_old: usize = old_shape.iter().product();
        let n_new: usize = shape.iter().product();
        assert_eq!(n_old, n_new, "reshape: element count mismatch");
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, _| {
                vec![Some(
                    g.clone()
                        .into_shape_with_order(IxDyn(&old_shape))
                        .expect("reshape back"),
                )]
            }),
        )
    }

    /// Reorder axes; the output is materialized in standard layout.
    pub fn permute(&mut self, a: VarId, axes: &[usize]) -> VarId {
        let rank = self.shape(a).len();
        assert_eq!(axes.len(), rank, "permute: axes arity");
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; rank];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push_op(
            value,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut out = Vec::with_capacity(lens.len());
                let mut start = 0;
                for &len in &lens {
                    out.push(Some(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                            .to_owned(),
                    ));
                    start += len;
                }
                out
            }),
        )
    }

    pub fn slice_axis(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> VarId {
        let full = self.shape(a)[axis];
        assert!(start + len <= full, "slice out of range");
        let value = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let in_shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, _| {
                let mut gx = ArrayD::zeros(IxDyn(&in_shape));
                gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, _| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |g, _| {
                let gv = *g.iter().next().expect("scalar grad") / n;
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_unary_grad;
    use super::*;

    #[test]
    fn gelu_gradient_matches_finite_difference() {
        check_unary_grad(&[5], |g, x| g.gelu(x), 1e-6, 1e-8);
    }

    #[test]
    fn relu_gradient_matches_finite_difference() {
        // Stay away from the kink at 0.
        check_unary_grad(&[6], |g, x| g.relu(x), 1e-6, 1e-8);
    }

    #[test]
    fn scale_by_gate_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap(),
            true,
        );
        let gate = g.leaf(ArrayD::from_elem(IxDyn(&[]), 0.25), true);
        let y = g.scale_by_gate(x, gate);
        let s = g.sum_all(y);
        g.backward(s);
        let gx = g.grad(x).unwrap();
        assert!(gx.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let gg = g.grad(gate).unwrap();
        assert!((gg[[]] - (1.0 - 2.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_round_trip_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2, 3]), 1.0), true);
        let b = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0), true);
        let cat = g.concat(&[a, b], 1);
        assert_eq!(g.shape(cat), &[2, 5]);
        let sl = g.slice_axis(cat, 1, 3, 2);
        let s = g.sum_all(sl);
        g.backward(s);
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn permute_inverts_in_backward() {
        let mut g = Graph::new();
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), (0..6).map(|v| v as f64).collect()).unwrap(),
            true,
        );
        let y = g.permute(x, &[1, 0]);
        assert_eq!(g.shape(y), &[3, 2]);
        let s = g.sum_all(y);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap().shape(), &[2, 3]);
    }
}
