//! Spatial ops: convolutions, pooling, upsampling.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Ix4, IxDyn};

use super::graph::{Graph, VarId};

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold one (C,H,W) image into a (C*kh*kw, OH*OW) patch matrix.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let mut out_row = col.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Fold a patch-matrix gradient back onto the input (scatter-add).
fn col2im_add(
    gcol: &ArrayView2<f64>,
    gx: &mut ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (c, h, w) = gx.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    for ci in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let grow = gcol.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += grow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Standard 2D convolution. `x` is (B,Cin,H,W), `weight` is
    /// (Cout,Cin,kh,kw); zero padding. Bias, when wanted, is a separate
    /// [`Graph::add_bias_channel`].
    pub fn conv2d(&mut self, x: VarId, weight: VarId, stride: usize, pad: usize) -> VarId {
        let xs = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let ws = self
            .value(weight)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (b, cin, h, w) = xs.dim();
        let (cout, cin_w, kh, kw) = ws.dim();
        assert_eq!(cin, cin_w, "conv2d: input channels");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(w, kw, stride, pad);

        let wmat = ws
            .to_shape((cout, cin * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
        for bi in 0..b {
            let col = im2col(&xs.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad);
            let prod = wmat.dot(&col); // (cout, oh*ow)
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&prod.into_shape_with_order((cout, oh, ow)).expect("out reshape"));
        }

        self.push_op(
            out.into_dyn(),
            vec![x, weight],
            Box::new(move |g, ctx| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xs = ctx.parents[0]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let ws = ctx.parents[1]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let wmat = ws
                    .to_shape((cout, cin * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                let mut gw = ctx.needs[1].then(|| Array2::<f64>::zeros((cout, cin * kh * kw)));
                let mut gx = ctx.needs[0].then(|| Array4::<f64>::zeros((b, cin, h, w)));
                for bi in 0..b {
                    let gmat = gv
                        .index_axis(ndarray::Axis(0), bi)
                        .to_shape((cout, oh * ow))
                        .expect("grad reshape")
                        .to_owned();
                    if gw.is_some() || gx.is_some() {
                        let col =
                            im2col(&xs.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad);
                        if let Some(gw) = gw.as_mut() {
                            *gw += &gmat.dot(&col.t());
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gcol = wmat.t().dot(&gmat);
                            col2im_add(
                                &gcol.view(),
                                &mut gx.index_axis_mut(ndarray::Axis(0), bi),
                                kh,
                                kw,
                                stride,
                                pad,
                            );
                        }
                    }
                }
                vec![
                    gx.map(|a| a.into_dyn()),
                    gw.map(|a| {
                        a.into_shape_with_order((cout, cin, kh, kw))
                            .expect("gw reshape")
                            .into_dyn()
                    }),
                ]
            }),
        )
    }

    /// Depthwise 3x3 convolution, stride 1, same padding. `kernel` is (C,3,3).
    pub fn depthwise3x3(&mut self, x: VarId, kernel: VarId) -> VarId {
        let xs = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xs.dim();
        {
            let ks = self.shape(kernel);
            assert_eq!(ks, &[c, 3, 3], "depthwise kernel must be (C,3,3)");
        }
        let kv = self.value_shared(kernel);
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let plane = xs.slice(ndarray::s![bi, ci, .., ..]);
                let mut dst = out.slice_mut(ndarray::s![bi, ci, .., ..]);
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for di in 0..3usize {
                            let iy = y as isize + di as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dj in 0..3usize {
                                let ix = xx as isize + dj as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kv[[ci, di, dj]] * plane[[iy as usize, ix as usize]];
                            }
                        }
                        dst[[y, xx]] = acc;
                    }
                }
            }
        }

        self.push_op(
            out.into_dyn(),
            vec![x, kernel],
            Box::new(move |g, ctx| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xs = ctx.parents[0]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let kv = ctx.parents[1].view();
                let mut gk = ctx.needs[1].then(|| ArrayD::<f64>::zeros(IxDyn(&[c, 3, 3])));
                let mut gx = ctx.needs[0].then(|| Array4::<f64>::zeros((b, c, h, w)));
                for bi in 0..b {
                    for ci in 0..c {
                        let gplane = gv.slice(ndarray::s![bi, ci, .., ..]);
                        let xplane = xs.slice(ndarray::s![bi, ci, .., ..]);
                        for y in 0..h {
                            for xx in 0..w {
                                let go = gplane[[y, xx]];
                                if go == 0.0 {
                                    continue;
                                }
                                for di in 0..3usize {
                                    let iy = y as isize + di as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..3usize {
                                        let ix = xx as isize + dj as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            gk[[ci, di, dj]] +=
                                                go * xplane[[iy as usize, ix as usize]];
                                        }
                                        if let Some(gx) = gx.as_mut() {
                                            gx[[bi, ci, iy as usize, ix as usize]] +=
                                                go * kv[[ci, di, dj]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx.map(|a| a.into_dyn()), gk]
            }),
        )
    }

    /// Average pooling with square window = stride = `p`; trailing partial
    /// windows average over their actual extent.
    pub fn avg_pool(&mut self, x: VarId, p: usize) -> VarId {
        assert!(p >= 1);
        let xs = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xs.dim();
        let oh = h.div_ceil(p);
        let ow = w.div_ceil(p);
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    let y0 = oy * p;
                    let y1 = (y0 + p).min(h);
                    for ox in 0..ow {
                        let x0 = ox * p;
                        let x1 = (x0 + p).min(w);
                        let window = xs.slice(ndarray::s![bi, ci, y0..y1, x0..x1]);
                        out[[bi, ci, oy, ox]] = window.sum() / window.len() as f64;
                    }
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            let y0 = oy * p;
                            let y1 = (y0 + p).min(h);
                            for ox in 0..ow {
                                let x0 = ox * p;
                                let x1 = (x0 + p).min(w);
                                let count = ((y1 - y0) * (x1 - x0)) as f64;
                                let share = gv[[bi, ci, oy, ox]] / count;
                                let mut window =
                                    gx.slice_mut(ndarray::s![bi, ci, y0..y1, x0..x1]);
                                window += share;
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let xs = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xs.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xs[[bi, ci, y, xx]];
                        out[[bi, ci, 2 * y, 2 * xx]] = v;
                        out[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[bi, ci, y, xx]] = gv[[bi, ci, 2 * y, 2 * xx]]
                                    + gv[[bi, ci, 2 * y, 2 * xx + 1]]
                                    + gv[[bi, ci, 2 * y + 1, 2 * xx]]
                                    + gv[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            }),
        )
    }
}
