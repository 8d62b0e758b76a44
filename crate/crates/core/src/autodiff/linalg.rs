//! Dense and batched matrix products.

use ndarray::{Ix2, Ix3};

use super::graph::{Graph, VarId};

impl Graph {
    /// (M,K) x (K,N) -> (M,N).
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs rank 2");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs rank 2");
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
        let value = av.dot(&bv).into_dyn();
        self.push_op(
            value,
            vec![a, b],
            Box::new(|g, ctx| {
                let gv = g.view().into_dimensionality::<Ix2>().expect("grad rank 2");
                let av = ctx.parents[0]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("lhs");
                let bv = ctx.parents[1]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("rhs");
                let ga = ctx.needs[0].then(|| gv.dot(&bv.t()).into_dyn());
                let gb = ctx.needs[1].then(|| av.t().dot(&gv).into_dyn());
                vec![ga, gb]
            }),
        )
    }

    /// (B,M,K) x (B,K,N) -> (B,M,N).
    pub fn bmm(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs rank 3");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs rank 3");
        let (ba, m, k) = av.dim();
        let (bb, k2, n) = bv.dim();
        assert_eq!(ba, bb, "bmm: batch dims");
        assert_eq!(k, k2, "bmm: inner dims");
        let mut value = ndarray::Array3::<f64>::zeros((ba, m, n));
        for i in 0..ba {
            ndarray::linalg::general_mat_mul(
                1.0,
                &av.index_axis(ndarray::Axis(0), i),
                &bv.index_axis(ndarray::Axis(0), i),
                0.0,
                &mut value.index_axis_mut(ndarray::Axis(0), i),
            );
        }
        self.push_op(
            value.into_dyn(),
            vec![a, b],
            Box::new(move |g, ctx| {
                let gv = g.view().into_dimensionality::<Ix3>().expect("grad rank 3");
                let av = ctx.parents[0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("lhs");
                let bv = ctx.parents[1]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("rhs");
                let ga = ctx.needs[0].then(|| {
                    let mut ga = ndarray::Array3::<f64>::zeros((ba, m, k));
                    for i in 0..ba {
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &gv.index_axis(ndarray::Axis(0), i),
                            &bv.index_axis(ndarray::Axis(0), i).t(),
                            0.0,
                            &mut ga.index_axis_mut(ndarray::Axis(0), i),
                        );
                    }
                    ga.into_dyn()
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = ndarray::Array3::<f64>::zeros((ba, k, n));
                    for i in 0..ba {
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &av.index_axis(ndarray::Axis(0), i).t(),
                            &gv.index_axis(ndarray::Axis(0), i),
                            0.0,
                            &mut gb.index_axis_mut(ndarray::Axis(0), i),
                        );
                    }
                    gb.into_dyn()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Token-style linear layer: (..., D_in) x (D_in, D_out) + bias.
    pub fn linear(&mut self, x: VarId, weight: VarId, bias: VarId) -> VarId {
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        let d_in = *in_shape.last().expect("rank >= 1");
        let (w_in, w_out) = {
            let s = self.shape(weight);
            assert_eq!(s.len(), 2, "linear weight rank 2");
            (s[0], s[1])
        };
        assert_eq!(d_in, w_in, "linear: input width");
        let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, d_in]);
        let prod = self.matmul(flat, weight);
        let mut out_shape = in_shape;
        *out_shape.last_mut().expect("rank") = w_out;
        let shaped = self.reshape(prod, &out_shape);
        self.add_bias_last(shaped, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grads, leaf_rand};
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn matmul_matches_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
        );
        let c = g.matmul(a, b);
        let v = g.value(c);
        assert_eq!(v[[0, 0]], 19.0);
        assert_eq!(v[[0, 1]], 22.0);
        assert_eq!(v[[1, 0]], 43.0);
        assert_eq!(v[[1, 1]], 50.0);
    }

    #[test]
    fn matmul_gradients_match_finite_difference() {
        check_grads(
            &[&[3, 4], &[4, 2]],
            |g, ids| {
                let m = g.matmul(ids[0], ids[1]);
                g.sum_all(m)
            },
            1e-6,
            1e-8,
        );
    }

    #[test]
    fn bmm_gradients_match_finite_difference() {
        check_grads(
            &[&[2, 3, 4], &[2, 4, 2]],
            |g, ids| {
                let m = g.bmm(ids[0], ids[1]);
                let sq = g.mul(m, m);
                g.sum_all(sq)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn linear_applies_bias() {
        let mut g = Graph::new();
        let x = leaf_rand(&mut g, &[2, 3, 4], 7);
        let w = g.constant(ArrayD::zeros(IxDyn(&[4, 5])));
        let b = g.constant(ArrayD::from_elem(IxDyn(&[5]), 2.5));
        let y = g.linear(x, w, b);
        assert_eq!(g.shape(y), &[2, 3, 5]);
        assert!(g.value(y).iter().all(|&v| v == 2.5));
    }
}
